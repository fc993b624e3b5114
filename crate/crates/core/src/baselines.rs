//! Comparison detectors. Every score is oriented so that higher means more
//! in-distribution.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::detector::preprocess_batch;
use crate::error::{ensure, Error, Result};
use crate::features::FeatureMatrix;
use crate::refnet::{softmax_probs, RefNet};
use crate::tensor_io::FeatureTensor;

pub const ODIN_TEMPERATURE: f64 = 1000.0;

pub fn max_softmax_score(probs: &[f64]) -> f64 {
    probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Negated Shannon entropy, `Σ pᵢ log pᵢ`.
pub fn entropy_score(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum()
}

/// Gap between the two largest probabilities.
pub fn margin_score(probs: &[f64]) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in probs {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    if second.is_finite() {
        first - second
    } else {
        first
    }
}

/// Max temperature-scaled softmax after input preprocessing.
pub fn odin_score(net: &RefNet, x: &FeatureTensor, temperature: f64, epsilon: f64) -> Result<f64> {
    let batched = if x.shape() == net.input_shape() {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        FeatureTensor::new(shape, x.data().to_vec())?
    } else {
        x.clone()
    };
    ensure!(
        batched.batch_len() == 1,
        Error::Shape("odin_score takes a single sample".into())
    );
    Ok(odin_scores(net, &batched, temperature, epsilon)?[0])
}

pub fn odin_scores(net: &RefNet, inputs: &FeatureTensor, temperature: f64, epsilon: f64) -> Result<Vec<f64>> {
    let x = preprocess_batch(net, inputs, epsilon)?;
    let out = net.forward_capture(&x, &[])?;
    out.logits
        .rows()
        .map(|z| Ok(max_softmax_score(&softmax_probs(z, temperature)?)))
        .collect()
}

/// Scores derived from the softmax output of a batch.
pub fn softmax_scores(net: &RefNet, inputs: &FeatureTensor, f: fn(&[f64]) -> f64) -> Result<Vec<f64>> {
    let out = net.forward_capture(inputs, &[])?;
    Ok(out.probs.rows().map(f).collect())
}

/// Class-conditional Gaussians with a shared covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GdaModel {
    pub class_means: Vec<Vec<f64>>,
    pub shared_precision: DMatrix<f64>,
    pub reg: f64,
}

pub fn fit_gda(features: &FeatureMatrix, labels: &[u32]) -> Result<GdaModel> {
    ensure!(
        features.n_rows() == labels.len(),
        Error::Shape(format!(
            "{} feature rows but {} labels",
            features.n_rows(),
            labels.len()
        ))
    );
    ensure!(
        !labels.is_empty(),
        Error::InvalidArgument("no samples".into())
    );
    ensure!(features.all_finite(), Error::NonFinite("GDA features".into()));
    let d = features.n_cols();
    let c = *labels.iter().max().unwrap() as usize + 1;
    let mut counts = vec![0usize; c];
    let mut means = vec![vec![0.0; d]; c];
    for (row, &y) in features.rows().zip(labels) {
        counts[y as usize] += 1;
        means[y as usize].iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    if let Some(k) = counts.iter().position(|&n| n < 2) {
        return Err(Error::InvalidArgument(format!(
            "class {k} has {} samples, at least 2 are required",
            counts[k]
        )));
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n as f64);
    }

    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (row, &y) in features.rows().zip(labels) {
        let diff = DVector::from_iterator(d, row.iter().zip(&means[y as usize]).map(|(a, b)| a - b));
        cov += &diff * diff.transpose();
    }
    cov /= features.n_rows() as f64;
    let trace = cov.trace();
    let reg = if trace > 0.0 {
        1e-6 * trace / d as f64
    } else {
        1e-6
    };
    for i in 0..d {
        cov[(i, i)] += reg;
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Singular("tied covariance is not positive definite".into()))?;
    let precision = chol.inverse();
    ensure!(
        precision.iter().all(|v| v.is_finite()),
        Error::Singular("tied covariance inverse is not finite".into())
    );
    Ok(GdaModel {
        class_means: means,
        shared_precision: precision,
        reg,
    })
}

impl GdaModel {
    pub fn dim(&self) -> usize {
        self.shared_precision.nrows()
    }

    /// Negated squared Mahalanobis distance to the closest class mean.
    pub fn score(&self, f: &[f64]) -> Result<f64> {
        ensure!(
            f.len() == self.dim(),
            Error::Shape(format!(
                "feature vector has {} values, model expects {}",
                f.len(),
                self.dim()
            ))
        );
        let best = self
            .class_means
            .iter()
            .map(|mu| {
                let diff = DVector::from_iterator(f.len(), f.iter().zip(mu).map(|(a, b)| a - b));
                (diff.transpose() * &self.shared_precision * &diff)[(0, 0)]
            })
            .fold(f64::INFINITY, f64::min);
        Ok(-best.max(0.0))
    }

    pub fn score_matrix(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        (0..x.n_rows())
            .into_par_iter()
            .map(|i| self.score(x.row(i)))
            .collect()
    }
}

/// `mahalanobis_score(model, f)`, free-function form.
pub fn mahalanobis_score(model: &GdaModel, f: &[f64]) -> Result<f64> {
    model.score(f)
}
