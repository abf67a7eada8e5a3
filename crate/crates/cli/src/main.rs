use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use poecal::pipeline::{
    parse_methods, render_report, stage_calibrate, stage_evaluate, stage_report, stage_simulate, EvaluationReport,
    ScenarioConfig, REPORT_FILE,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_CALIBRATION: u8 = 3;
const EXIT_EVALUATION: u8 = 4;

/// Configuration-dependent POE calibration experiments.
#[derive(Parser, Debug)]
#[command(name = "poecal", version)]
struct Cli {
    /// Print the canonical default configuration and exit.
    #[arg(long, global = true)]
    print_default_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate training, test and sweep datasets plus the ground truth.
    Simulate(Common),
    /// Fit every configured method to the training data.
    Calibrate(Common),
    /// Evaluate fitted models on the test set.
    Evaluate(Common),
    /// Render a text summary of an evaluation.
    Report {
        #[command(flatten)]
        common: Common,
        /// Report JSON or the directory holding it; defaults to the output directory.
        input: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Scenario JSON; fields omitted fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for all stage files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated methods, e.g. nominal,nls1,fourier13.
    #[arg(long)]
    methods: Option<String>,
    /// ma2010, ma1440 or a robot model JSON file.
    #[arg(long)]
    robot: Option<String>,
}

/// Error tagged with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait Tag<T> {
    fn tag(self, code: u8) -> std::result::Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for std::result::Result<T, E> {
    fn tag(self, code: u8) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn load_config(c: &Common) -> Result<ScenarioConfig> {
    let mut cfg = match &c.config {
        Some(p) => ScenarioConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    if let Some(m) = &c.methods {
        cfg.methods = parse_methods(m)?;
    }
    if let Some(r) = &c.robot {
        cfg.robot = r.clone();
        cfg.grid = None;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn simulate(c: &Common) -> std::result::Result<(), Failure> {
    let cfg = load_config(c).tag(EXIT_CONFIG)?;
    let sc = stage_simulate(&cfg, &cfg.out).tag(EXIT_CONFIG)?;
    println!(
        "training: {} samples in {} clusters\ntest: {} samples\nsweeps: {} joints x {} angles\nwritten to {}",
        sc.training.len(),
        sc.training.num_clusters(),
        sc.test.len(),
        sc.sweeps.len(),
        cfg.sweeps.k,
        cfg.out.display()
    );
    Ok(())
}

fn calibrate(c: &Common) -> std::result::Result<(), Failure> {
    let cfg = load_config(c).tag(EXIT_CONFIG)?;
    let status = stage_calibrate(&cfg, &cfg.out).tag(EXIT_CALIBRATION)?;
    let mut failed = 0;
    for s in &status {
        match &s.error {
            None => println!("{:<10} ok", s.method.name()),
            Some(e) => {
                failed += 1;
                println!("{:<10} FAILED: {e}", s.method.name());
            }
        }
    }
    if failed > 0 {
        return Err(Failure {
            code: EXIT_CALIBRATION,
            error: anyhow::anyhow!("{failed} method(s) failed to calibrate"),
        });
    }
    Ok(())
}

fn evaluate(c: &Common) -> std::result::Result<(), Failure> {
    let cfg = load_config(c).tag(EXIT_CONFIG)?;
    let report = stage_evaluate(&cfg, &cfg.out).tag(EXIT_EVALUATION)?;
    print!("{}", render_report(&report).tag(EXIT_EVALUATION)?);
    Ok(())
}

fn report(c: &Common, input: Option<&Path>) -> std::result::Result<(), Failure> {
    let text = match input {
        Some(p) if p.is_file() => {
            let r: EvaluationReport = poecal::io::read_json(p).tag(EXIT_EVALUATION)?;
            if r.methods.is_empty() {
                return Err(Failure {
                    code: EXIT_EVALUATION,
                    error: anyhow::anyhow!("report contains no methods"),
                });
            }
            render_report(&r).tag(EXIT_EVALUATION)?
        }
        Some(dir) => stage_report(dir)
            .with_context(|| format!("reading {}", dir.join(REPORT_FILE).display()))
            .tag(EXIT_EVALUATION)?,
        None => {
            let cfg = load_config(c).tag(EXIT_CONFIG)?;
            stage_report(&cfg.out)
                .with_context(|| format!("reading {}", cfg.out.join(REPORT_FILE).display()))
                .tag(EXIT_EVALUATION)?
        }
    };
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.print_default_config {
        match ScenarioConfig::default().to_json() {
            Ok(s) => {
                print!("{s}");
                return ExitCode::SUCCESS;
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
        }
    }
    let result = match &cli.command {
        Some(Command::Simulate(c)) => simulate(c),
        Some(Command::Calibrate(c)) => calibrate(c),
        Some(Command::Evaluate(c)) => evaluate(c),
        Some(Command::Report { common, input }) => report(common, input.as_deref()),
        None => Err(Failure {
            code: EXIT_CONFIG,
            error: anyhow::anyhow!("no command given; see --help"),
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
