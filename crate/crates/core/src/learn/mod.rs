//! Small fully connected networks trained with full-batch Adam.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cdc::ClusterModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// ReLU on hidden layers, identity on the output, with affine
/// standardization of inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpFile", into = "MlpFile")]
pub struct MlpWeights {
    pub layers: Vec<Layer>,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
    pub seed: u64,
    pub final_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    layers: Vec<LayerFile>,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    output_mean: Vec<f64>,
    output_std: Vec<f64>,
    seed: u64,
    #[serde(default)]
    final_loss: f64,
}

impl From<MlpWeights> for MlpFile {
    fn from(m: MlpWeights) -> Self {
        MlpFile {
            layers: m
                .layers
                .iter()
                .map(|l| LayerFile {
                    rows: l.w.nrows(),
                    cols: l.w.ncols(),
                    w: l.w.transpose().as_slice().to_vec(),
                    b: l.b.as_slice().to_vec(),
                })
                .collect(),
            input_mean: m.input_mean,
            input_std: m.input_std,
            output_mean: m.output_mean,
            output_std: m.output_std,
            seed: m.seed,
            final_loss: m.final_loss,
        }
    }
}

impl TryFrom<MlpFile> for MlpWeights {
    type Error = Error;

    fn try_from(f: MlpFile) -> Result<Self> {
        let mut layers = Vec::with_capacity(f.layers.len());
        for l in f.layers {
            if l.w.len() != l.rows * l.cols || l.b.len() != l.rows {
                return Err(Error::InvalidData("layer shape does not match its data".into()));
            }
            layers.push(Layer {
                w: DMatrix::from_row_slice(l.rows, l.cols, &l.w),
                b: DVector::from_vec(l.b),
            });
        }
        let m = MlpWeights {
            layers,
            input_mean: f.input_mean,
            input_std: f.input_std,
            output_mean: f.output_mean,
            output_std: f.output_std,
            seed: f.seed,
            final_loss: f.final_loss,
        };
        m.validate()?;
        Ok(m)
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Layer {
    let limit = (6.0 / cols as f64).sqrt();
    Layer {
        w: DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit)),
        b: DVector::zeros(rows),
    }
}

fn random_layers(sizes: &[usize], rng: &mut ChaCha8Rng) -> Vec<Layer> {
    sizes.windows(2).map(|w| he_uniform(rng, w[1], w[0])).collect()
}

/// He-uniform hidden layers and a zero output layer, so an untrained
/// network predicts the standardized mean.
fn initial_layers(sizes: &[usize], rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let mut layers = random_layers(sizes, rng);
    let last = layers.last_mut().expect("at least one layer");
    last.w.fill(0.0);
    layers
}

impl MlpWeights {
    /// Unstandardized network with the given layer widths.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let (din, dout) = match (layers.first(), layers.last()) {
            (Some(f), Some(l)) => (f.w.ncols(), l.w.nrows()),
            _ => return Err(Error::Precondition("network needs at least one layer".into())),
        };
        let m = MlpWeights {
            layers,
            input_mean: vec![0.0; din],
            input_std: vec![1.0; din],
            output_mean: vec![0.0; dout],
            output_std: vec![1.0; dout],
            seed: 0,
            final_loss: 0.0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidData("network has no layers".into()));
        }
        for w in self.layers.windows(2) {
            if w[0].w.nrows() != w[1].w.ncols() {
                return Err(Error::InvalidData("consecutive layer sizes do not chain".into()));
            }
        }
        for l in &self.layers {
            if l.b.len() != l.w.nrows() || l.w.iter().chain(l.b.iter()).any(|x| !x.is_finite()) {
                return Err(Error::InvalidData("malformed or non-finite layer".into()));
            }
        }
        if self.input_mean.len() != self.input_dim()
            || self.input_std.len() != self.input_dim()
            || self.output_mean.len() != self.output_dim()
            || self.output_std.len() != self.output_dim()
        {
            return Err(Error::InvalidData("standardization length mismatch".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").w.nrows()
    }

    /// Columns of `x` are standardized inputs.
    fn forward_std(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let relu = hidden_relu(self.layers.len());
        forward(&self.layers, &relu, x).pop().expect("nonempty")
    }
}

/// Forward pass including input and output standardization.
pub fn mlp_forward(w: &MlpWeights, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != w.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: w.input_dim(),
            got: x.len(),
        });
    }
    let xs = DMatrix::from_fn(x.len(), 1, |r, _| (x[r] - w.input_mean[r]) / w.input_std[r]);
    let y = w.forward_std(&xs);
    Ok((0..w.output_dim()).map(|r| y[(r, 0)] * w.output_std[r] + w.output_mean[r]).collect())
}

fn hidden_relu(n: usize) -> Vec<bool> {
    (0..n).map(|k| k + 1 < n).collect()
}

fn add_bias(z: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut col in z.column_iter_mut() {
        col += b;
    }
}

/// Activations of every layer, input first.
fn forward(layers: &[Layer], relu: &[bool], x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x.clone());
    for (l, &r) in layers.iter().zip(relu) {
        let mut z = &l.w * acts.last().expect("nonempty");
        add_bias(&mut z, &l.b);
        if r {
            z.apply(|v| *v = v.max(0.0));
        }
        acts.push(z);
    }
    acts
}

/// Mean over columns of the squared error summed over rows, and its
/// gradient for every layer.
fn loss_and_grad(layers: &[Layer], relu: &[bool], x: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, Vec<Layer>) {
    let acts = forward(layers, relu, x);
    let n = x.ncols() as f64;
    let out = acts.last().expect("nonempty");
    let diff = out - y;
    let loss = diff.norm_squared() / n;
    let mut delta = diff * (2.0 / n);
    let mut grads: Vec<Layer> = Vec::with_capacity(layers.len());
    for k in (0..layers.len()).rev() {
        if relu[k] {
            delta.zip_apply(&acts[k + 1], |d, a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
        }
        let gw = &delta * acts[k].transpose();
        let gb = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
        if k > 0 {
            delta = layers[k].w.tr_mul(&delta);
        }
        grads.push(Layer { w: gw, b: gb });
    }
    grads.reverse();
    (loss, grads)
}

/// Training loss and its backpropagated gradient for a network with ReLU
/// hidden layers and a linear output, on standardized columns `x → y`.
pub fn loss_gradient(layers: &[Layer], x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(f64, Vec<Layer>)> {
    MlpWeights::from_layers(layers.to_vec())?;
    let (inp, out) = (layers[0].w.ncols(), layers[layers.len() - 1].w.nrows());
    if x.nrows() != inp || y.nrows() != out || x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch {
            expected: inp,
            got: x.nrows(),
        });
    }
    Ok(loss_and_grad(layers, &hidden_relu(layers.len()), x, y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden_sizes: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Stop when the best loss improved by less than `plateau_tol`
    /// (relative) over this many epochs.
    pub plateau_window: usize,
    pub plateau_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![200, 200, 200],
            epochs: 20000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            plateau_window: 2000,
            plateau_tol: 1e-9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.contains(&0) || self.epochs == 0 || self.plateau_window == 0 {
            return Err(Error::Precondition("training sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Precondition("learning rate and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Precondition("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<Layer>,
    v: Vec<Layer>,
    t: i32,
}

impl Adam {
    fn new(layers: &[Layer]) -> Self {
        let zeros = || {
            layers
                .iter()
                .map(|l| Layer {
                    w: DMatrix::zeros(l.w.nrows(), l.w.ncols()),
                    b: DVector::zeros(l.b.len()),
                })
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, layers: &mut [Layer], grads: &[Layer], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = cfg.learning_rate;
        let eps = cfg.epsilon;
        let upd = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        };
        for k in 0..layers.len() {
            upd(
                layers[k].w.as_mut_slice(),
                grads[k].w.as_slice(),
                self.m[k].w.as_mut_slice(),
                self.v[k].w.as_mut_slice(),
            );
            upd(
                layers[k].b.as_mut_slice(),
                grads[k].b.as_slice(),
                self.m[k].b.as_mut_slice(),
                self.v[k].b.as_mut_slice(),
            );
        }
    }
}

/// Trains `layers` in place on standardized data; returns the per-epoch loss.
fn train_layers(layers: &mut [Layer], relu: &[bool], x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &TrainConfig) -> Vec<f64> {
    let mut adam = Adam::new(layers);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut checkpoint = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        let (loss, grads) = loss_and_grad(layers, relu, x, y);
        history.push(loss);
        best = best.min(loss);
        if loss == 0.0 {
            break;
        }
        if (epoch + 1) % cfg.plateau_window == 0 {
            if checkpoint.is_finite() && checkpoint - best <= cfg.plateau_tol * checkpoint {
                break;
            }
            checkpoint = best;
        }
        adam.step(layers, &grads, cfg);
    }
    history
}

/// Per-row mean and population standard deviation (1 where degenerate).
fn standardization(data: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = data.ncols() as f64;
    let mut mean = Vec::with_capacity(data.nrows());
    let mut std = Vec::with_capacity(data.nrows());
    for row in data.row_iter() {
        let mu = row.sum() / n;
        let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
        let s = var.sqrt();
        mean.push(mu);
        std.push(if s > 1e-12 * mu.abs().max(1e-300) && s > 0.0 { s } else { 1.0 });
    }
    (mean, std)
}

fn standardize(data: &DMatrix<f64>, mean: &[f64], std: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(data.nrows(), data.ncols(), |r, c| (data[(r, c)] - mean[r]) / std[r])
}

fn cluster_data(clusters: &[ClusterModel]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if clusters.is_empty() {
        return Err(Error::EmptyModel);
    }
    let dim = clusters[0].theta.as_slice().len();
    let mut x = DMatrix::zeros(2, clusters.len());
    let mut y = DMatrix::zeros(dim, clusters.len());
    for (l, c) in clusters.iter().enumerate() {
        if c.anchor_q.len() < 3 || c.theta.as_slice().len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: c.theta.as_slice().len(),
            });
        }
        x[(0, l)] = c.anchor_q[1];
        x[(1, l)] = c.anchor_q[2];
        y.column_mut(l).copy_from_slice(c.theta.as_slice());
    }
    Ok((x, y))
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

/// Direct regression `(q2, q3) ↦ Θ`.
pub fn train_nn_field(clusters: &[ClusterModel], cfg: &TrainConfig) -> Result<MlpWeights> {
    cfg.validate()?;
    let (x, y) = cluster_data(clusters)?;
    let (in_mean, in_std) = standardization(&x);
    let (out_mean, out_std) = standardization(&y);
    let xs = standardize(&x, &in_mean, &in_std);
    let ys = standardize(&y, &out_mean, &out_std);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layers = initial_layers(&sizes(2, &cfg.hidden_sizes, y.nrows()), &mut rng);
    let relu = hidden_relu(layers.len());
    let history = train_layers(&mut layers, &relu, &xs, &ys, cfg);
    let (final_loss, _) = loss_and_grad(&layers, &relu, &xs, &ys);
    let _ = history;
    Ok(MlpWeights {
        layers,
        input_mean: in_mean,
        input_std: in_std,
        output_mean: out_mean,
        output_std: out_std,
        seed: cfg.seed,
        final_loss,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoder: MlpWeights,
    pub decoder: MlpWeights,
    /// Root-mean-square reconstruction error over the training set, in
    /// original units and averaged over components.
    pub reconstruction_rmse: f64,
    pub loss_history: Vec<f64>,
}

impl Autoencoder {
    pub fn encode(&self, theta: &[f64]) -> Result<Vec<f64>> {
        mlp_forward(&self.encoder, theta)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        mlp_forward(&self.decoder, z)
    }
}

/// Encoder `4n → N` and mirrored decoder `N → 4n` trained jointly on
/// reconstruction loss.
pub fn train_autoencoder(clusters: &[ClusterModel], latent_dim: usize, cfg: &TrainConfig) -> Result<Autoencoder> {
    cfg.validate()?;
    if latent_dim == 0 {
        return Err(Error::Precondition("latent dimension must be positive".into()));
    }
    let (_, y) = cluster_data(clusters)?;
    let dim = y.nrows();
    let (mean, std) = standardization(&y);
    let ys = standardize(&y, &mean, &std);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let enc_sizes = sizes(dim, &cfg.hidden_sizes, latent_dim);
    let mut dec_hidden = cfg.hidden_sizes.clone();
    dec_hidden.reverse();
    let dec_sizes = sizes(latent_dim, &dec_hidden, dim);
    let mut layers = random_layers(&enc_sizes, &mut rng);
    layers.extend(initial_layers(&dec_sizes, &mut rng));
    let ne = enc_sizes.len() - 1;
    let mut relu = hidden_relu(ne);
    relu.extend(hidden_relu(dec_sizes.len() - 1));
    let history = train_layers(&mut layers, &relu, &ys, &ys, cfg);
    let (final_loss, _) = loss_and_grad(&layers, &relu, &ys, &ys);
    let dec_layers = layers.split_off(ne);
    let encoder = MlpWeights {
        layers,
        input_mean: mean.clone(),
        input_std: std.clone(),
        output_mean: vec![0.0; latent_dim],
        output_std: vec![1.0; latent_dim],
        seed: cfg.seed,
        final_loss,
    };
    let decoder = MlpWeights {
        layers: dec_layers,
        input_mean: vec![0.0; latent_dim],
        input_std: vec![1.0; latent_dim],
        output_mean: mean,
        output_std: std,
        seed: cfg.seed,
        final_loss,
    };
    let mut se = 0.0;
    for col in y.column_iter() {
        let t: Vec<f64> = col.iter().copied().collect();
        let r = mlp_forward(&decoder, &mlp_forward(&encoder, &t)?)?;
        se += t.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let reconstruction_rmse = (se / (y.len() as f64)).sqrt();
    Ok(Autoencoder {
        encoder,
        decoder,
        reconstruction_rmse,
        loss_history: history,
    })
}
