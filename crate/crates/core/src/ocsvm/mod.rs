//! ν-one-class SVM with an RBF kernel, trained on in-distribution features
//! only.
//!
//! The decision function is `Σᵢ αᵢ exp(−γ‖sᵢ − x‖²) − ρ`; positive values
//! are inside the learned support, and higher means more in-distribution.

mod solver;

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{ensure, Error, Result};
use crate::features::FeatureMatrix;
use crate::tensor_io::{read_tensor, write_tensor, FeatureTensor};

pub(crate) use solver::rbf;

/// RBF width: explicit, or `1 / (d · mean feature variance)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Gamma {
    #[default]
    Auto,
    Value(f64),
}

impl Serialize for Gamma {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Gamma::Auto => s.serialize_str("auto"),
            Gamma::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Gamma {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Gamma::Value(v)),
            Raw::Str(s) if s == "auto" => Ok(Gamma::Auto),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "gamma must be a number or \"auto\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcsvmConfig {
    pub nu: f64,
    pub gamma: Gamma,
    pub tol: f64,
    pub max_iter: usize,
    /// Larger training sets are subsampled to this many rows.
    pub max_samples: usize,
    pub cache_mb: usize,
}

impl Default for OcsvmConfig {
    fn default() -> Self {
        Self {
            nu: 0.001,
            gamma: Gamma::Auto,
            tol: 1e-3,
            max_iter: 10_000_000,
            max_samples: 5000,
            cache_mb: 256,
        }
    }
}

impl OcsvmConfig {
    pub fn with_nu(nu: f64) -> Self {
        Self {
            nu,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.nu > 0.0 && self.nu <= 1.0,
            Error::InvalidArgument(format!("nu must lie in (0, 1], got {}", self.nu))
        );
        if let Gamma::Value(g) = self.gamma {
            ensure!(
                g > 0.0 && g.is_finite(),
                Error::InvalidArgument(format!("gamma must be positive, got {g}"))
            );
        }
        ensure!(
            self.tol > 0.0,
            Error::InvalidArgument("solver tolerance must be positive".into())
        );
        ensure!(
            self.max_samples >= 2,
            Error::InvalidArgument("max_samples must be ≥ 2".into())
        );
        Ok(())
    }
}

/// Solver diagnostics kept alongside a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub n_train: usize,
    pub iterations: usize,
    pub objective: f64,
    pub residual: f64,
    /// Fraction of fitted rows with a negative decision value.
    pub train_outlier_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcsvmModel {
    pub support_vectors: FeatureMatrix,
    pub alphas: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub nu: f64,
    pub info: FitInfo,
}

/// `1 / (d · v)` with `v` the mean per-feature variance; `1 / d` when the
/// features have no spread.
pub fn auto_gamma(x: &FeatureMatrix) -> f64 {
    let d = x.n_cols().max(1) as f64;
    let var = x.column_variances().iter().sum::<f64>() / d;
    if var > 0.0 && var.is_finite() {
        1.0 / (d * var)
    } else {
        1.0 / d
    }
}

pub fn fit(features: &FeatureMatrix, cfg: &OcsvmConfig, seed: u64) -> Result<OcsvmModel> {
    cfg.validate()?;
    ensure!(
        features.n_rows() >= 2,
        Error::InvalidArgument(format!(
            "one-class SVM needs at least 2 samples, got {}",
            features.n_rows()
        ))
    );
    ensure!(
        features.n_cols() >= 1,
        Error::InvalidArgument("features must have at least one column".into())
    );
    ensure!(
        features.all_finite(),
        Error::NonFinite("one-class SVM training features".into())
    );

    let subsampled;
    let x = if features.n_rows() > cfg.max_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, features.n_rows(), cfg.max_samples).into_vec();
        idx.sort_unstable();
        subsampled = features.select_rows(&idx);
        &subsampled
    } else {
        features
    };

    let m = x.n_rows();
    let gamma = match cfg.gamma {
        Gamma::Auto => auto_gamma(x),
        Gamma::Value(g) => g,
    };
    let upper = 1.0 / (cfg.nu * m as f64);
    let sol = solver::solve(
        x,
        gamma,
        &solver::SolverParams {
            upper,
            tol: cfg.tol,
            max_iter: cfg.max_iter,
            cache_bytes: cfg.cache_mb << 20,
        },
    )?;
    log::debug!(
        "ocsvm: m={m} gamma={gamma:.4e} iterations={} residual={:.2e}",
        sol.iterations,
        sol.residual
    );

    let outliers = sol.gradient.iter().filter(|&&g| g - sol.rho < 0.0).count();
    let sv: Vec<usize> = (0..m).filter(|&i| sol.alphas[i] > 0.0).collect();
    Ok(OcsvmModel {
        support_vectors: x.select_rows(&sv),
        alphas: sv.iter().map(|&i| sol.alphas[i]).collect(),
        rho: sol.rho,
        gamma,
        nu: cfg.nu,
        info: FitInfo {
            n_train: m,
            iterations: sol.iterations,
            objective: sol.objective,
            residual: sol.residual,
            train_outlier_fraction: outliers as f64 / m as f64,
        },
    })
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    nu: f64,
    gamma: f64,
    rho: f64,
    dim: usize,
    n_support: usize,
    info: FitInfo,
}

impl OcsvmModel {
    pub fn dim(&self) -> usize {
        self.support_vectors.n_cols()
    }

    pub fn n_support(&self) -> usize {
        self.alphas.len()
    }

    /// Σ αᵢ k(sᵢ, x) before subtracting ρ.
    fn kernel_sum(&self, x: &[f64]) -> f64 {
        self.support_vectors
            .rows()
            .zip(&self.alphas)
            .map(|(s, a)| a * rbf(s, x, self.gamma))
            .sum()
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        ensure!(
            x.len() == self.dim(),
            Error::Shape(format!(
                "feature vector has {} values, model expects {}",
                x.len(),
                self.dim()
            ))
        );
        Ok(self.kernel_sum(x) - self.rho)
    }

    pub fn score_matrix(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        ensure!(
            x.n_cols() == self.dim(),
            Error::Shape(format!(
                "features have {} columns, model expects {}",
                x.n_cols(),
                self.dim()
            ))
        );
        Ok((0..x.n_rows())
            .into_par_iter()
            .map(|i| self.kernel_sum(x.row(i)) - self.rho)
            .collect())
    }

    /// Dual objective ½ αᵀKα over the support vectors.
    pub fn dual_objective(&self) -> f64 {
        let sv = &self.support_vectors;
        let mut total = 0.0;
        for (i, si) in sv.rows().enumerate() {
            for (j, sj) in sv.rows().enumerate() {
                total += self.alphas[i] * self.alphas[j] * rbf(si, sj, self.gamma);
            }
        }
        0.5 * total
    }

    /// Writes `model.json`, `support_vectors.oodf` and `alphas.oodf`.
    ///
    /// Support vectors and coefficients are stored as `f32`, so a reloaded
    /// model scores within single precision of the original.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        let meta = ModelMeta {
            nu: self.nu,
            gamma: self.gamma,
            rho: self.rho,
            dim: self.dim(),
            n_support: self.n_support(),
            info: self.info.clone(),
        };
        let path = dir.join("model.json");
        fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n")
            .map_err(|e| Error::io_at(&path, e))?;
        write_tensor(
            dir.join("support_vectors.oodf"),
            &FeatureTensor::from_f64(
                vec![self.n_support(), self.dim()],
                self.support_vectors.as_slice(),
            )?,
        )?;
        write_tensor(
            dir.join("alphas.oodf"),
            &FeatureTensor::from_f64(vec![self.n_support()], &self.alphas)?,
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io_at(&path, e))?;
        let meta: ModelMeta = serde_json::from_str(&text)?;
        let sv = read_tensor(dir.join("support_vectors.oodf"))?;
        let alphas = read_tensor(dir.join("alphas.oodf"))?;
        ensure!(
            sv.shape() == [meta.n_support, meta.dim] && alphas.shape() == [meta.n_support],
            Error::Malformed("support vector tensors disagree with model.json".into())
        );
        Ok(Self {
            support_vectors: FeatureMatrix::new(
                meta.n_support,
                meta.dim,
                sv.data().iter().map(|&v| v as f64).collect(),
            )?,
            alphas: alphas.data().iter().map(|&v| v as f64).collect(),
            rho: meta.rho,
            gamma: meta.gamma,
            nu: meta.nu,
            info: meta.info,
        })
    }
}
