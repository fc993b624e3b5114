//! One-class detection over a single probe layer, and the search for the
//! layer that separates in-distribution from OOD inputs best.
//!
//! Convolutional activations (height × width × channels) are reduced to one
//! value per channel, the mean absolute activation; flat activations are
//! used as they are.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{ensure, Error, Result};
use crate::features::{FeatureMatrix, Standardizer};
use crate::metrics::{self, ScorePair};
use crate::ocsvm::{self, OcsvmConfig, OcsvmModel};
use crate::refnet::{ActivationRecord, RefNet};
use crate::tensor_io::{balance_indices, FeatureTensor};

/// Perturbation magnitudes tried by [`sweep_epsilon`] unless overridden.
pub const DEFAULT_EPSILON_GRID: [f64; 12] = [
    0.0, 0.0005, 0.001, 0.0015, 0.002, 0.0025, 0.005, 0.01, 0.05, 0.1, 0.15, 0.2,
];

pub const DEFAULT_TPR_TARGET: f64 = 0.95;

/// `q_k = mean_{i,j} |f_ijk|` for an `h × w × d` map.
pub fn reduce_channel_mean(shape: &[usize], data: &[f32]) -> Result<Vec<f64>> {
    ensure!(
        shape.len() == 3,
        Error::Shape(format!(
            "channel-mean reduction needs a rank-3 map, got shape {shape:?}"
        ))
    );
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    ensure!(
        data.len() == h * w * d,
        Error::Shape(format!("shape {shape:?} does not match {} values", data.len()))
    );
    let mut q = vec![0.0f64; d];
    for px in data.chunks_exact(d) {
        for (acc, &v) in q.iter_mut().zip(px) {
            *acc += (v as f64).abs();
        }
    }
    let area = (h * w) as f64;
    q.iter_mut().for_each(|v| *v /= area);
    Ok(q)
}

/// Feature vector of one sample's activation.
pub fn sample_features(shape: &[usize], data: &[f32]) -> Result<Vec<f64>> {
    match shape.len() {
        1 => Ok(data.iter().map(|&v| v as f64).collect()),
        3 => reduce_channel_mean(shape, data),
        r => Err(Error::Shape(format!(
            "unsupported activation rank {r} (shape {shape:?})"
        ))),
    }
}

fn sample_features_f64(shape: &[usize], data: &[f64]) -> Result<Vec<f64>> {
    match shape.len() {
        1 => Ok(data.to_vec()),
        3 => {
            let d = shape[2];
            let mut q = vec![0.0; d];
            for px in data.chunks_exact(d) {
                q.iter_mut().zip(px).for_each(|(a, v)| *a += v.abs());
            }
            let area = (shape[0] * shape[1]) as f64;
            q.iter_mut().for_each(|v| *v /= area);
            Ok(q)
        }
        r => Err(Error::Shape(format!(
            "unsupported activation rank {r} (shape {shape:?})"
        ))),
    }
}

/// Feature matrix (one row per sample) from a batched activation record.
pub fn layer_features(record: &ActivationRecord) -> Result<FeatureMatrix> {
    tensor_features(&record.tensor)
}

/// Same as [`layer_features`] for a bare batched tensor, e.g. one read from
/// an exported activation file.
pub fn tensor_features(t: &FeatureTensor) -> Result<FeatureMatrix> {
    let rows = (0..t.batch_len())
        .map(|i| sample_features(t.sample_shape(), t.sample(i)))
        .collect::<Result<Vec<_>>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    FeatureMatrix::new(rows.len(), cols, rows.concat())
}

/// Features of `layers` for every sample in `inputs`, optionally after input
/// preprocessing with magnitude `epsilon`.
pub fn extract_features(
    net: &RefNet,
    inputs: &FeatureTensor,
    layers: &[usize],
    epsilon: f64,
) -> Result<Vec<FeatureMatrix>> {
    ensure!(
        inputs.sample_shape() == net.input_shape(),
        Error::Shape(format!(
            "inputs {:?} do not match network input {:?}",
            inputs.sample_shape(),
            net.input_shape()
        ))
    );
    for &l in layers {
        ensure!(
            l <= net.num_layers(),
            Error::InvalidArgument(format!("layer {l} does not exist"))
        );
    }
    let per_sample: Vec<Vec<Vec<f64>>> = (0..inputs.batch_len())
        .into_par_iter()
        .map(|i| {
            let mut x: Vec<f64> = inputs.sample(i).iter().map(|&v| v as f64).collect();
            if epsilon > 0.0 {
                perturb(net, &mut x, epsilon, None)?;
            }
            let acts = net.forward_sample(&x)?;
            layers
                .iter()
                .map(|&l| sample_features_f64(net.activation_shape(l), &acts[l]))
                .collect()
        })
        .collect::<Result<_>>()?;
    layers
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let rows: Vec<&[f64]> = per_sample.iter().map(|s| s[k].as_slice()).collect();
            let m = FeatureMatrix::from_rows(&rows)?;
            ensure!(m.all_finite(), Error::NonFinite("layer features".into()));
            Ok(m)
        })
        .collect()
}

/// Largest δ such that at least `tpr_target` of `id_scores` are ≥ δ.
pub fn calibrate_threshold(id_scores: &[f64], tpr_target: f64) -> Result<f64> {
    ensure!(
        !id_scores.is_empty(),
        Error::InvalidArgument("cannot calibrate on an empty score set".into())
    );
    ensure!(
        tpr_target > 0.0 && tpr_target < 1.0,
        Error::InvalidArgument(format!("tpr target {tpr_target} outside (0, 1)"))
    );
    ensure!(
        id_scores.iter().all(|s| s.is_finite()),
        Error::NonFinite("calibration scores".into())
    );
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let n = sorted.len();
    // slack keeps 0.95 * 100 from rounding up to 96
    let keep = ((tpr_target * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    Ok(sorted[keep - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Id,
    Ood,
}

/// OOD when `delta >= score`, in-distribution otherwise.
pub fn detect(score: f64, delta: f64) -> Decision {
    if delta >= score {
        Decision::Ood
    } else {
        Decision::Id
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn perturb(net: &RefNet, x: &mut [f64], epsilon: f64, clip: Option<(f64, f64)>) -> Result<()> {
    let g = net.input_gradient_f64(x)?;
    for (v, gv) in x.iter_mut().zip(&g) {
        *v += epsilon * sign(*gv);
        if let Some((lo, hi)) = clip {
            *v = v.clamp(lo, hi);
        }
    }
    Ok(())
}

/// `x' = x − ε·sign(−∇ₓ log max_i Q_i(x))`, i.e. a signed step that raises
/// the winning-class probability. No clipping is applied.
pub fn preprocess_input(net: &RefNet, x: &FeatureTensor, epsilon: f64) -> Result<FeatureTensor> {
    preprocess_input_clipped(net, x, epsilon, None)
}

/// [`preprocess_input`] with the result optionally clamped to `[lo, hi]`.
pub fn preprocess_input_clipped(
    net: &RefNet,
    x: &FeatureTensor,
    epsilon: f64,
    clip: Option<(f64, f64)>,
) -> Result<FeatureTensor> {
    ensure!(
        epsilon >= 0.0 && epsilon.is_finite(),
        Error::InvalidArgument(format!("epsilon must be ≥ 0, got {epsilon}"))
    );
    if epsilon == 0.0 && clip.is_none() {
        return Ok(x.clone());
    }
    let g = net.input_gradient(x)?;
    let data: Vec<f64> = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| {
            let p = v as f64 + epsilon * sign(gv as f64);
            match clip {
                Some((lo, hi)) => p.clamp(lo, hi),
                None => p,
            }
        })
        .collect();
    FeatureTensor::from_f64(x.shape().to_vec(), &data)
}

/// Preprocesses every sample of a batch.
pub fn preprocess_batch(net: &RefNet, x: &FeatureTensor, epsilon: f64) -> Result<FeatureTensor> {
    ensure!(
        epsilon >= 0.0 && epsilon.is_finite(),
        Error::InvalidArgument(format!("epsilon must be ≥ 0, got {epsilon}"))
    );
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let rows: Vec<Vec<f64>> = (0..x.batch_len())
        .into_par_iter()
        .map(|i| {
            let mut s: Vec<f64> = x.sample(i).iter().map(|&v| v as f64).collect();
            perturb(net, &mut s, epsilon, None)?;
            Ok(s)
        })
        .collect::<Result<_>>()?;
    FeatureTensor::from_f64(x.shape().to_vec(), &rows.concat())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Probe layer the detector reads; chosen by the layer search when unset.
    pub layer: Option<usize>,
    pub epsilon: f64,
    pub tpr_target: f64,
    /// Z-score features with training statistics before fitting.
    pub standardize: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            layer: None,
            epsilon: 0.0,
            tpr_target: DEFAULT_TPR_TARGET,
            standardize: false,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.epsilon >= 0.0 && self.epsilon.is_finite(),
            Error::InvalidArgument(format!("epsilon must be ≥ 0, got {}", self.epsilon))
        );
        ensure!(
            self.tpr_target > 0.0 && self.tpr_target < 1.0,
            Error::InvalidArgument(format!("tpr target {} outside (0, 1)", self.tpr_target))
        );
        Ok(())
    }
}

/// A one-class SVM bound to one probe layer of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct OodlDetector {
    pub layer: usize,
    pub model: OcsvmModel,
    pub scaler: Option<Standardizer>,
}

impl OodlDetector {
    /// Fits on in-distribution training inputs only.
    pub fn fit(
        net: &RefNet,
        train_inputs: &FeatureTensor,
        layer: usize,
        cfg: &OcsvmConfig,
        standardize: bool,
        seed: u64,
    ) -> Result<Self> {
        ensure!(
            net.probe_points().contains(&layer),
            Error::InvalidArgument(format!("layer {layer} is not a probe point"))
        );
        let feats = extract_features(net, train_inputs, &[layer], 0.0)?.remove(0);
        Self::fit_features(layer, &feats, cfg, standardize, seed)
    }

    pub fn fit_features(
        layer: usize,
        feats: &FeatureMatrix,
        cfg: &OcsvmConfig,
        standardize: bool,
        seed: u64,
    ) -> Result<Self> {
        let scaler = standardize.then(|| Standardizer::fit(feats));
        let model = match &scaler {
            Some(s) => ocsvm::fit(&s.transform(feats)?, cfg, seed)?,
            None => ocsvm::fit(feats, cfg, seed)?,
        };
        Ok(Self {
            layer,
            model,
            scaler,
        })
    }

    pub fn score_features(&self, feats: &FeatureMatrix) -> Result<Vec<f64>> {
        match &self.scaler {
            Some(s) => self.model.score_matrix(&s.transform(feats)?),
            None => self.model.score_matrix(feats),
        }
    }

    /// Detector scores for a batch of raw inputs, preprocessed with
    /// `epsilon` first when it is positive.
    pub fn score_inputs(&self, net: &RefNet, inputs: &FeatureTensor, epsilon: f64) -> Result<Vec<f64>> {
        let feats = extract_features(net, inputs, &[self.layer], epsilon)?.remove(0);
        self.score_features(&feats)
    }
}

#[derive(Serialize, Deserialize)]
struct DetectorMeta {
    layer: usize,
    scaler: Option<Standardizer>,
}

impl OodlDetector {
    /// Writes `detector.json` next to the SVM files of [`OcsvmModel::save`].
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.model.save(dir)?;
        let meta = DetectorMeta {
            layer: self.layer,
            scaler: self.scaler.clone(),
        };
        let path = dir.join("detector.json");
        fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io_at(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("detector.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io_at(&path, e))?;
        let meta: DetectorMeta = serde_json::from_str(&text)?;
        let model = OcsvmModel::load(dir)?;
        if let Some(s) = &meta.scaler {
            ensure!(
                s.means.len() == model.dim(),
                Error::Malformed("scaler and model dimensions differ".into())
            );
        }
        Ok(Self {
            layer: meta.layer,
            model,
            scaler: meta.scaler,
        })
    }
}

/// Scores of both sides after seeded size balancing.
pub fn balanced_pair(id: &[f64], ood: &[f64], seed: u64) -> Result<ScorePair> {
    let (ii, oi) = balance_indices(id.len(), ood.len(), seed)?;
    ScorePair::new(
        ii.iter().map(|&i| id[i]).collect(),
        oi.iter().map(|&i| ood[i]).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSweep {
    pub grid: Vec<f64>,
    /// FPR (percent) at the target TPR for each grid value.
    pub fpr: Vec<f64>,
    pub best_epsilon: f64,
}

/// Grid search over ε with an arbitrary scorer returning `(id, ood)` scores.
/// The lowest FPR wins; ties go to the smaller ε.
pub fn sweep_epsilon_with<F>(grid: &[f64], tpr_target: f64, seed: u64, mut scorer: F) -> Result<EpsilonSweep>
where
    F: FnMut(f64) -> Result<(Vec<f64>, Vec<f64>)>,
{
    ensure!(
        !grid.is_empty(),
        Error::InvalidArgument("epsilon grid is empty".into())
    );
    ensure!(
        grid.iter().all(|&e| e >= 0.0 && e.is_finite()),
        Error::InvalidArgument("epsilon grid values must be ≥ 0".into())
    );
    let mut fpr = Vec::with_capacity(grid.len());
    for &eps in grid {
        let (id, ood) = scorer(eps)?;
        let pair = balanced_pair(&id, &ood, seed)?;
        fpr.push(metrics::fpr_at_tpr(&pair, tpr_target)?);
    }
    let best = (0..grid.len())
        .min_by(|&a, &b| {
            fpr[a]
                .partial_cmp(&fpr[b])
                .unwrap()
                .then(grid[a].partial_cmp(&grid[b]).unwrap())
        })
        .unwrap();
    Ok(EpsilonSweep {
        grid: grid.to_vec(),
        fpr,
        best_epsilon: grid[best],
    })
}

/// Picks the ε minimising FPR at `tpr_target` for a fitted detector, with
/// preprocessing applied to both the ID set and the OOD tuning subset.
pub fn sweep_epsilon(
    net: &RefNet,
    detector: &OodlDetector,
    id_inputs: &FeatureTensor,
    ood_subset: &FeatureTensor,
    grid: &[f64],
    tpr_target: f64,
    seed: u64,
) -> Result<EpsilonSweep> {
    sweep_epsilon_with(grid, tpr_target, seed, |eps| {
        Ok((
            detector.score_inputs(net, id_inputs, eps)?,
            detector.score_inputs(net, ood_subset, eps)?,
        ))
    })
}

fn ser_errors<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let opt: Vec<Option<f64>> = v.iter().map(|&e| e.is_finite().then_some(e)).collect();
    opt.serialize(s)
}

fn de_errors<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    let opt: Vec<Option<f64>> = Vec::deserialize(d)?;
    Ok(opt.into_iter().map(|e| e.unwrap_or(f64::INFINITY)).collect())
}

/// Detection error per probe point and the layer minimising it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodlSearchResult {
    pub layers: Vec<usize>,
    /// Detection error in `[0, 1]` per layer; skipped layers are infinite
    /// (`null` in JSON).
    #[serde(serialize_with = "ser_errors", deserialize_with = "de_errors")]
    pub errors: Vec<f64>,
    pub best_layer: usize,
    pub tpr_target: f64,
    #[serde(skip)]
    pub models: Vec<Option<OodlDetector>>,
}

impl OodlSearchResult {
    pub fn best_error(&self) -> f64 {
        self.error_at(self.best_layer).unwrap()
    }

    pub fn error_at(&self, layer: usize) -> Option<f64> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.errors[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchOptions {
    pub tpr_target: f64,
    pub standardize: bool,
    pub keep_models: bool,
    pub seed: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            tpr_target: DEFAULT_TPR_TARGET,
            standardize: false,
            keep_models: false,
            seed: 0,
        }
    }
}

/// Per-layer features for the three datasets of the search.
pub struct LayerFeatures {
    pub layer: usize,
    pub train: FeatureMatrix,
    pub id_test: FeatureMatrix,
    pub ood: FeatureMatrix,
}

/// Fits a one-class SVM per layer on the training features and records its
/// detection error on the balanced ID/OOD test features. A layer whose fit
/// fails is skipped with an infinite error.
pub fn search_layers(inputs: Vec<LayerFeatures>, cfg: &OcsvmConfig, opts: &SearchOptions) -> Result<OodlSearchResult> {
    ensure!(
        !inputs.is_empty(),
        Error::InvalidArgument("no layers to search".into())
    );
    let outcomes: Vec<(usize, f64, Option<OodlDetector>)> = inputs
        .into_par_iter()
        .map(|lf| {
            let attempt = || -> Result<(f64, OodlDetector)> {
                let det = OodlDetector::fit_features(
                    lf.layer,
                    &lf.train,
                    cfg,
                    opts.standardize,
                    opts.seed,
                )?;
                let id = det.score_features(&lf.id_test)?;
                let ood = det.score_features(&lf.ood)?;
                let pair = balanced_pair(&id, &ood, opts.seed)?;
                Ok((metrics::detection_error_at(&pair, opts.tpr_target)? / 100.0, det))
            };
            match attempt() {
                Ok((err, det)) => (lf.layer, err, opts.keep_models.then_some(det)),
                Err(e) => {
                    log::warn!("layer {}: skipped ({e})", lf.layer);
                    (lf.layer, f64::INFINITY, None)
                }
            }
        })
        .collect();

    let layers: Vec<usize> = outcomes.iter().map(|o| o.0).collect();
    let errors: Vec<f64> = outcomes.iter().map(|o| o.1).collect();
    let models = outcomes.into_iter().map(|o| o.2).collect();
    ensure!(
        errors.iter().any(|e| e.is_finite()),
        Error::InvalidArgument("every layer failed to fit".into())
    );
    // first minimum wins, so ties go to the earlier layer
    let mut best = 0;
    for (i, &e) in errors.iter().enumerate() {
        if e < errors[best] {
            best = i;
        }
    }
    Ok(OodlSearchResult {
        best_layer: layers[best],
        layers,
        errors,
        tpr_target: opts.tpr_target,
        models,
    })
}

/// Searches every probe point of `net` for the layer whose one-class SVM
/// best separates `id_test` from `ood_probe`. The SVMs only ever see
/// `train`; the OOD set is used solely to measure detection error.
pub fn find_oodl(
    net: &RefNet,
    train: &FeatureTensor,
    id_test: &FeatureTensor,
    ood_probe: &FeatureTensor,
    cfg: &OcsvmConfig,
    opts: &SearchOptions,
) -> Result<OodlSearchResult> {
    let layers = net.probe_points().to_vec();
    let tr = extract_features(net, train, &layers, 0.0)?;
    let id = extract_features(net, id_test, &layers, 0.0)?;
    let ood = extract_features(net, ood_probe, &layers, 0.0)?;
    let inputs = layers
        .iter()
        .zip(tr.into_iter().zip(id).zip(ood))
        .map(|(&layer, ((train, id_test), ood))| LayerFeatures {
            layer,
            train,
            id_test,
            ood,
        })
        .collect();
    search_layers(inputs, cfg, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refnet::Layer;

    #[test]
    fn channel_mean_uses_absolute_values() {
        // 2x2 map, one channel: [[1,-1],[2,-2]]
        let q = reduce_channel_mean(&[2, 2, 1], &[1.0, -1.0, 2.0, -2.0]).unwrap();
        assert_eq!(q, vec![1.5]);
    }

    #[test]
    fn channel_mean_zero_map() {
        let q = reduce_channel_mean(&[4, 4, 3], &[0.0; 48]).unwrap();
        assert_eq!(q, vec![0.0; 3]);
    }

    #[test]
    fn channel_mean_unit_spatial_extent() {
        let q = reduce_channel_mean(&[1, 1, 4], &[-0.5, 2.0, 0.0, -3.25]).unwrap();
        assert_eq!(q, vec![0.5, 2.0, 0.0, 3.25]);
    }

    #[test]
    fn channel_mean_rejects_wrong_rank() {
        assert!(reduce_channel_mean(&[4, 3], &[0.0; 12]).is_err());
    }

    #[test]
    fn feature_dispatch() {
        assert_eq!(sample_features(&[2], &[0.3, -0.1]).unwrap(), vec![0.3f32 as f64, -0.1f32 as f64]);
        let conv = [1.0, -3.0, -1.0, 5.0];
        assert_eq!(
            sample_features(&[1, 2, 2], &conv).unwrap(),
            reduce_channel_mean(&[1, 2, 2], &conv).unwrap()
        );
        assert!(matches!(sample_features(&[2, 2], &[0.0; 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn calibration_examples() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(calibrate_threshold(&s, 0.95).unwrap(), 6.0);
        assert_eq!(calibrate_threshold(&[2.5; 7], 0.95).unwrap(), 2.5);
        assert_eq!(calibrate_threshold(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 3.0);
        assert!(calibrate_threshold(&[], 0.95).is_err());
        assert!(calibrate_threshold(&[1.0], 1.0).is_err());
    }

    #[test]
    fn detect_examples() {
        assert_eq!(detect(0.7, 0.2), Decision::Id);
        assert_eq!(detect(0.2, 0.2), Decision::Ood);
        assert_eq!(detect(-1.0, 0.0), Decision::Ood);
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let net = RefNet::new(
            vec![2],
            vec![
                Layer::dense(2, 2, vec![1.0, -2.0, 0.5, 3.0], vec![0.1, 0.0]).unwrap(),
                Layer::softmax(),
            ],
            vec![1],
        )
        .unwrap();
        let x = FeatureTensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        assert_eq!(preprocess_input(&net, &x, 0.0).unwrap(), x);
        assert!(preprocess_input(&net, &x, -0.1).is_err());
    }

    #[test]
    fn constant_net_leaves_input_unchanged() {
        let net = RefNet::new(
            vec![3],
            vec![
                Layer::dense(3, 2, vec![0.0; 6], vec![1.0, -1.0]).unwrap(),
                Layer::softmax(),
            ],
            vec![1],
        )
        .unwrap();
        let x = FeatureTensor::new(vec![3], vec![0.3, -0.7, 2.0]).unwrap();
        assert_eq!(preprocess_input(&net, &x, 0.05).unwrap(), x);
    }

    #[test]
    fn sweep_singleton_and_ties() {
        let flat = |_: f64| Ok((vec![1.0, 2.0, 3.0], vec![0.0, 0.5, 2.5]));
        let s = sweep_epsilon_with(&[0.0], 0.95, 0, flat).unwrap();
        assert_eq!(s.best_epsilon, 0.0);
        let s = sweep_epsilon_with(&DEFAULT_EPSILON_GRID, 0.95, 0, flat).unwrap();
        assert_eq!(s.best_epsilon, 0.0);
        // ties resolve to the smaller value regardless of grid order
        let s = sweep_epsilon_with(&[0.1, 0.05], 0.95, 0, flat).unwrap();
        assert_eq!(s.best_epsilon, 0.05);
        assert!(sweep_epsilon_with(&[], 0.95, 0, flat).is_err());
    }

    #[test]
    fn sweep_prefers_lower_fpr() {
        let s = sweep_epsilon_with(&[0.0, 0.01, 0.02], 0.95, 0, |eps| {
            let shift = if eps == 0.01 { 10.0 } else { 0.0 };
            Ok((vec![1.0 + shift, 2.0 + shift], vec![1.5, 1.6]))
        })
        .unwrap();
        assert_eq!(s.best_epsilon, 0.01);
        assert_eq!(s.fpr[1], 0.0);
    }

    #[test]
    fn search_result_json_marks_skipped_layers() {
        let r = OodlSearchResult {
            layers: vec![2, 4],
            errors: vec![f64::INFINITY, 0.1],
            best_layer: 4,
            tpr_target: 0.95,
            models: vec![],
        };
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("null"));
        let back: OodlSearchResult = serde_json::from_str(&json).unwrap();
        assert!(back.errors[0].is_infinite());
    }
}
