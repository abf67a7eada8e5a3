//! Configuration-dependent calibration: one identified `Θ` per cluster of
//! poses, interpolated over the shoulder and elbow angles.

pub mod coeff;
pub mod fusion;
pub mod scattered;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::kin::{forward_kinematics, PosePredictor, RobotModel, Transform};
use crate::learn::{mlp_forward, Autoencoder, MlpWeights};
use crate::minpoe::{apply_params, ParamVector, PlaneBasis};
use crate::nls::{nls_calibrate_with_basis, NlsOptions, NlsReport, PoseSample};
pub use coeff::{eval_fourier_basis, fit_basis_coefficients, reduce_basis, BasisKind, CoeffMatrix, FOURIER_TERMS};
pub use fusion::fuse_clusters;
use scattered::ScatteredField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub anchor_q: Vec<f64>,
    pub theta: ParamVector,
    pub nls_report: NlsReport,
}

impl ClusterModel {
    pub fn q23(&self) -> [f64; 2] {
        [self.anchor_q[1], self.anchor_q[2]]
    }
}

/// Groups samples by cluster id and fits each group independently. The
/// anchor is the mean joint vector of the group.
pub fn identify_clusters(
    nominal: &RobotModel,
    basis: &PlaneBasis,
    samples: &[PoseSample],
    opts: &NlsOptions,
) -> Result<Vec<ClusterModel>> {
    let mut groups: BTreeMap<usize, Vec<PoseSample>> = BTreeMap::new();
    for s in samples {
        let id = s
            .cluster_id
            .ok_or_else(|| Error::InvalidData("sample without cluster id".into()))?;
        groups.entry(id).or_default().push(s.clone());
    }
    if groups.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let groups: Vec<Vec<PoseSample>> = groups.into_values().collect();
    groups
        .par_iter()
        .map(|g| {
            let n = nominal.n();
            let mut anchor = vec![0.0; n];
            for s in g {
                if s.q.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: s.q.len(),
                    });
                }
                for (a, q) in anchor.iter_mut().zip(&s.q) {
                    *a += q / g.len() as f64;
                }
            }
            let report = nls_calibrate_with_basis(nominal, basis, g, opts)?;
            Ok(ClusterModel {
                anchor_q: anchor,
                theta: report.theta_hat.clone(),
                nls_report: report,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Interpolator {
    Nearest,
    Linear,
    Cubic,
    Rbf(CoeffMatrix),
    Fourier(CoeffMatrix),
    Nn(MlpWeights),
    Ae {
        decoder: MlpWeights,
        latent: Vec<Vec<f64>>,
        reconstruction_rmse: f64,
    },
}

impl Interpolator {
    pub fn name(&self) -> &'static str {
        match self {
            Interpolator::Nearest => "nearest",
            Interpolator::Linear => "linear",
            Interpolator::Cubic => "cubic",
            Interpolator::Rbf(_) => "rbf",
            Interpolator::Fourier(_) => "fourier",
            Interpolator::Nn(_) => "nn",
            Interpolator::Ae { .. } => "ae",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CdcModel {
    nominal: RobotModel,
    basis: PlaneBasis,
    clusters: Vec<ClusterModel>,
    interpolator: Interpolator,
    field: Option<ScatteredField>,
}

impl PartialEq for CdcModel {
    fn eq(&self, other: &Self) -> bool {
        self.nominal == other.nominal
            && self.basis == other.basis
            && self.clusters == other.clusters
            && self.interpolator == other.interpolator
    }
}

fn theta_matrix(clusters: &[ClusterModel]) -> DMatrix<f64> {
    let dim = clusters[0].theta.as_slice().len();
    let mut m = DMatrix::zeros(dim, clusters.len());
    for (l, c) in clusters.iter().enumerate() {
        m.column_mut(l).copy_from_slice(c.theta.as_slice());
    }
    m
}

impl CdcModel {
    pub fn new(nominal: RobotModel, basis: PlaneBasis, clusters: Vec<ClusterModel>, interpolator: Interpolator) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::EmptyModel);
        }
        let n = nominal.n();
        if basis.n() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: basis.n(),
            });
        }
        for c in &clusters {
            if c.anchor_q.len() != n || c.theta.joints() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: c.anchor_q.len(),
                });
            }
        }
        let points: Vec<[f64; 2]> = clusters.iter().map(ClusterModel::q23).collect();
        let field = match &interpolator {
            Interpolator::Nearest | Interpolator::Linear => Some(ScatteredField::new(&points, theta_matrix(&clusters), false)?),
            Interpolator::Cubic => Some(ScatteredField::new(&points, theta_matrix(&clusters), true)?),
            Interpolator::Ae { latent, decoder, .. } => {
                if latent.len() != clusters.len() || latent.iter().any(|z| z.len() != decoder.input_dim()) {
                    return Err(Error::DimensionMismatch {
                        expected: clusters.len(),
                        got: latent.len(),
                    });
                }
                let dimz = decoder.input_dim();
                let z = DMatrix::from_fn(dimz, latent.len(), |r, c| latent[c][r]);
                Some(ScatteredField::new(&points, z, false)?)
            }
            Interpolator::Rbf(c) | Interpolator::Fourier(c) => {
                if c.a.nrows() != 4 * n {
                    return Err(Error::DimensionMismatch {
                        expected: 4 * n,
                        got: c.a.nrows(),
                    });
                }
                None
            }
            Interpolator::Nn(w) => {
                if w.input_dim() != 2 || w.output_dim() != 4 * n {
                    return Err(Error::DimensionMismatch {
                        expected: 4 * n,
                        got: w.output_dim(),
                    });
                }
                None
            }
        };
        Ok(Self {
            nominal,
            basis,
            clusters,
            interpolator,
            field,
        })
    }

    /// Autoencoder interpolator with latent anchors `z = f_en(Θ)`.
    pub fn with_autoencoder(nominal: RobotModel, basis: PlaneBasis, clusters: Vec<ClusterModel>, ae: &Autoencoder) -> Result<Self> {
        let latent = clusters
            .iter()
            .map(|c| ae.encode(c.theta.as_slice()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            nominal,
            basis,
            clusters,
            Interpolator::Ae {
                decoder: ae.decoder.clone(),
                latent,
                reconstruction_rmse: ae.reconstruction_rmse,
            },
        )
    }

    pub fn nominal(&self) -> &RobotModel {
        &self.nominal
    }

    pub fn basis(&self) -> &PlaneBasis {
        &self.basis
    }

    pub fn clusters(&self) -> &[ClusterModel] {
        &self.clusters
    }

    pub fn interpolator(&self) -> &Interpolator {
        &self.interpolator
    }

    /// `Θ(q2, q3)`. At an anchor, nearest returns the stored `Θ` exactly;
    /// linear, cubic, RBF, and Fourier with at most 13 anchors reproduce it
    /// within 1e-9; Fourier with more anchors is off by at most its
    /// `anchor_residual`, plus `√7 σ_(r+1)` when reduced to rank `r`
    /// (`‖β‖₂ = √7` everywhere); NN and AE are within ten times their
    /// training RMS error.
    pub fn interpolate_params(&self, q: &[f64]) -> Result<ParamVector> {
        let n = self.nominal.n();
        if q.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: q.len() });
        }
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::Precondition("joint vector must be finite".into()));
        }
        let x = [q[1], q[2]];
        let v: Vec<f64> = match (&self.interpolator, &self.field) {
            (Interpolator::Nearest, Some(f)) => f.nearest(x).as_slice().to_vec(),
            (Interpolator::Linear, Some(f)) => f.linear(x).as_slice().to_vec(),
            (Interpolator::Cubic, Some(f)) => f.cubic(x).as_slice().to_vec(),
            (Interpolator::Rbf(c) | Interpolator::Fourier(c), _) => c.predict(x[0], x[1]).as_slice().to_vec(),
            (Interpolator::Nn(w), _) => mlp_forward(w, &x)?,
            (Interpolator::Ae { decoder, .. }, Some(f)) => mlp_forward(decoder, f.linear(x).as_slice())?,
            _ => unreachable!("scattered field built at construction"),
        };
        ParamVector::from_vec(v)
    }

    pub fn model_at(&self, q: &[f64]) -> Result<RobotModel> {
        apply_params(&self.nominal, &self.interpolate_params(q)?, &self.basis)
    }

    pub fn fk(&self, q: &[f64]) -> Result<Transform> {
        forward_kinematics(&self.model_at(q)?, q)
    }

    /// Writes the model JSON; network weights go to sibling files named
    /// after `path`'s stem.
    pub fn save(&self, path: &Path) -> Result<()> {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "cdc".into());
        let sibling = |suffix: &str| {
            let name = format!("{stem}.{suffix}.json");
            (path.with_file_name(&name), name)
        };
        let interpolator = match &self.interpolator {
            Interpolator::Nearest => InterpolatorFile::Nearest,
            Interpolator::Linear => InterpolatorFile::Linear,
            Interpolator::Cubic => InterpolatorFile::Cubic,
            Interpolator::Rbf(c) => InterpolatorFile::Rbf { coeffs: c.clone() },
            Interpolator::Fourier(c) => InterpolatorFile::Fourier { coeffs: c.clone() },
            Interpolator::Nn(w) => {
                let (p, name) = sibling("weights");
                write_json(&p, w)?;
                InterpolatorFile::Nn { weights_file: name }
            }
            Interpolator::Ae {
                decoder,
                latent,
                reconstruction_rmse,
            } => {
                let (p, name) = sibling("decoder");
                write_json(&p, decoder)?;
                InterpolatorFile::Ae {
                    decoder_file: name,
                    latent: latent.clone(),
                    reconstruction_rmse: *reconstruction_rmse,
                }
            }
        };
        let file = CdcModelFile {
            nominal: self.nominal.clone(),
            basis: self.basis.clone(),
            clusters: self.clusters.clone(),
            interpolator,
        };
        write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: CdcModelFile = read_json(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let interpolator = match file.interpolator {
            InterpolatorFile::Nearest => Interpolator::Nearest,
            InterpolatorFile::Linear => Interpolator::Linear,
            InterpolatorFile::Cubic => Interpolator::Cubic,
            InterpolatorFile::Rbf { coeffs } => Interpolator::Rbf(coeffs),
            InterpolatorFile::Fourier { coeffs } => Interpolator::Fourier(coeffs),
            InterpolatorFile::Nn { weights_file } => Interpolator::Nn(read_json(&dir.join(weights_file))?),
            InterpolatorFile::Ae {
                decoder_file,
                latent,
                reconstruction_rmse,
            } => Interpolator::Ae {
                decoder: read_json(&dir.join(decoder_file))?,
                latent,
                reconstruction_rmse,
            },
        };
        Self::new(file.nominal, file.basis, file.clusters, interpolator)
    }
}

impl PosePredictor for CdcModel {
    fn predict(&self, q: &[f64]) -> Result<Transform> {
        self.fk(q)
    }
}

pub fn interpolate_params(model: &CdcModel, q: &[f64]) -> Result<ParamVector> {
    model.interpolate_params(q)
}

pub fn fk_cdc(model: &CdcModel, q: &[f64]) -> Result<Transform> {
    model.fk(q)
}

/// Latent-space interpolation followed by decoding; only for models with an
/// autoencoder interpolator.
pub fn ae_interpolate(model: &CdcModel, q: &[f64]) -> Result<ParamVector> {
    match model.interpolator {
        Interpolator::Ae { .. } => model.interpolate_params(q),
        _ => Err(Error::Precondition("model does not use an autoencoder".into())),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
enum InterpolatorFile {
    Nearest,
    Linear,
    Cubic,
    Rbf {
        coeffs: CoeffMatrix,
    },
    Fourier {
        coeffs: CoeffMatrix,
    },
    Nn {
        weights_file: String,
    },
    Ae {
        decoder_file: String,
        latent: Vec<Vec<f64>>,
        reconstruction_rmse: f64,
    },
}

#[derive(Serialize, Deserialize)]
struct CdcModelFile {
    nominal: RobotModel,
    basis: PlaneBasis,
    clusters: Vec<ClusterModel>,
    interpolator: InterpolatorFile,
}

/// Row-major nested arrays for dense matrices.
pub(crate) mod serde_mat {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        (m.nrows(), m.ncols(), rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let (nr, nc, rows): (usize, usize, Vec<Vec<f64>>) = Deserialize::deserialize(d)?;
        if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
            return Err(serde::de::Error::custom("matrix shape does not match its rows"));
        }
        Ok(DMatrix::from_fn(nr, nc, |r, c| rows[r][c]))
    }
}
