//! End-to-end orchestration: load manifests, fit detectors on training data,
//! tune perturbation magnitudes, and score every method against every OOD
//! set.
//!
//! Dataset loads go through a [`DataSource`], which is told which stage the
//! pipeline is in. [`TrackingSource`] records every load with its stage, so
//! callers can verify that fitting never touches OOD data.

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    entropy_score, fit_gda, margin_score, max_softmax_score, odin_scores, softmax_scores, GdaModel,
    ODIN_TEMPERATURE,
};
use crate::detector::{
    balanced_pair, extract_features, sweep_epsilon, sweep_epsilon_with, DetectorConfig,
    EpsilonSweep, OodlDetector, DEFAULT_EPSILON_GRID,
};
use crate::error::{ensure, Error, Result};
use crate::metrics::{report, MetricsReport};
use crate::ocsvm::OcsvmConfig;
use crate::refnet::RefNet;
use crate::tensor_io::{split_fraction, Dataset, DatasetManifest, FeatureTensor, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Fit,
    Tune,
    Score,
}

pub trait DataSource: Sync {
    fn load(&self, manifest: &DatasetManifest) -> Result<Dataset>;

    fn enter_stage(&self, _stage: Stage) {}
}

/// Reads manifests from disk.
#[derive(Debug, Default, Clone, Copy)]
pub struct FileSource;

impl DataSource for FileSource {
    fn load(&self, manifest: &DatasetManifest) -> Result<Dataset> {
        manifest.load_dataset()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessEvent {
    pub stage: Option<Stage>,
    pub name: String,
    pub role: Role,
}

/// Wraps another source and logs each load with the active stage.
#[derive(Debug, Default)]
pub struct TrackingSource<S> {
    inner: S,
    stage: Mutex<Option<Stage>>,
    events: Mutex<Vec<AccessEvent>>,
}

impl<S> TrackingSource<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            stage: Mutex::new(None),
            events: Mutex::new(Vec::new()),
        }
    }

    pub fn events(&self) -> Vec<AccessEvent> {
        self.events.lock().unwrap().clone()
    }

    pub fn roles_read_during(&self, stage: Stage) -> Vec<Role> {
        self.events()
            .into_iter()
            .filter(|e| e.stage == Some(stage))
            .map(|e| e.role)
            .collect()
    }
}

impl<S: DataSource> DataSource for TrackingSource<S> {
    fn load(&self, manifest: &DatasetManifest) -> Result<Dataset> {
        let stage = *self.stage.lock().unwrap();
        self.events.lock().unwrap().push(AccessEvent {
            stage,
            name: manifest.name.clone(),
            role: manifest.role,
        });
        self.inner.load(manifest)
    }

    fn enter_stage(&self, stage: Stage) {
        *self.stage.lock().unwrap() = Some(stage);
        self.inner.enter_stage(stage);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "max-softmax")]
    MaxSoftmax,
    #[serde(rename = "odin")]
    Odin,
    #[serde(rename = "md")]
    Mahalanobis,
    #[serde(rename = "entropy")]
    Entropy,
    #[serde(rename = "margin")]
    Margin,
    #[serde(rename = "ours")]
    Ours,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::MaxSoftmax,
        Method::Odin,
        Method::Mahalanobis,
        Method::Entropy,
        Method::Margin,
        Method::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::MaxSoftmax => "max-softmax",
            Method::Odin => "odin",
            Method::Mahalanobis => "md",
            Method::Entropy => "entropy",
            Method::Margin => "margin",
            Method::Ours => "ours",
        }
    }

    fn uses_epsilon(self) -> bool {
        matches!(self, Method::Odin | Method::Ours)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown method {s:?}; expected one of max-softmax, odin, md, entropy, margin, ours"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationPlan {
    pub methods: Vec<Method>,
    pub ocsvm: OcsvmConfig,
    pub detector: DetectorConfig,
    /// Layer for the Mahalanobis baseline; the penultimate probe when unset.
    pub md_layer: Option<usize>,
    pub odin_temperature: f64,
    pub odin_epsilon: f64,
    /// Tune ε per OOD set on a seeded fraction of it, then evaluate on the
    /// remainder.
    pub tune_epsilon: bool,
    pub tune_fraction: f64,
    pub epsilon_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for EvaluationPlan {
    fn default() -> Self {
        Self {
            methods: vec![Method::MaxSoftmax, Method::Odin, Method::Mahalanobis, Method::Ours],
            ocsvm: OcsvmConfig::default(),
            detector: DetectorConfig::default(),
            md_layer: None,
            odin_temperature: ODIN_TEMPERATURE,
            odin_epsilon: 0.0,
            tune_epsilon: false,
            tune_fraction: 0.2,
            epsilon_grid: DEFAULT_EPSILON_GRID.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub method: Method,
    pub ood: String,
    /// Perturbation magnitude used, for the methods that preprocess inputs.
    pub epsilon: Option<f64>,
    pub n_id: usize,
    pub n_ood: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub id_dataset: String,
    pub ours_layer: Option<usize>,
    pub rows: Vec<EvaluationRow>,
}

impl Evaluation {
    /// Fixed-width table with one row per (method, OOD set).
    pub fn to_table(&self) -> String {
        let tpr = self.rows.first().map_or(0.95, |r| r.metrics.tpr_target);
        let mut out = MetricsReport::table_header(tpr);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.metrics.table_row(&format!("{} / {}", r.method, r.ood)));
            out.push('\n');
        }
        out
    }
}

struct Fitted {
    ours: Option<OodlDetector>,
    gda: Option<(usize, GdaModel)>,
}

/// Fits every method that learns from data, using the training set only.
fn fit_stage(net: &RefNet, train: &Dataset, plan: &EvaluationPlan) -> Result<Fitted> {
    let ours = if plan.methods.contains(&Method::Ours) {
        let layer = plan.detector.layer.ok_or_else(|| {
            Error::InvalidArgument("no detector layer given; run the layer search first".into())
        })?;
        Some(OodlDetector::fit(
            net,
            &train.inputs,
            layer,
            &plan.ocsvm,
            plan.detector.standardize,
            plan.seed,
        )?)
    } else {
        None
    };
    let gda = if plan.methods.contains(&Method::Mahalanobis) {
        let layer = match plan.md_layer {
            Some(l) => l,
            None => net.penultimate_probe().ok_or_else(|| {
                Error::InvalidArgument("network has no probe point before the logits".into())
            })?,
        };
        let labels = train.labels.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("{} has no labels for the Mahalanobis fit", train.name))
        })?;
        let feats = extract_features(net, &train.inputs, &[layer], 0.0)?.remove(0);
        Some((layer, fit_gda(&feats, labels)?))
    } else {
        None
    };
    Ok(Fitted { ours, gda })
}

fn method_scores(
    net: &RefNet,
    fitted: &Fitted,
    plan: &EvaluationPlan,
    method: Method,
    inputs: &FeatureTensor,
    epsilon: f64,
) -> Result<Vec<f64>> {
    match method {
        Method::MaxSoftmax => softmax_scores(net, inputs, max_softmax_score),
        Method::Entropy => softmax_scores(net, inputs, entropy_score),
        Method::Margin => softmax_scores(net, inputs, margin_score),
        Method::Odin => odin_scores(net, inputs, plan.odin_temperature, epsilon),
        Method::Mahalanobis => {
            let (layer, gda) = fitted.gda.as_ref().expect("fitted in fit stage");
            let feats = extract_features(net, inputs, &[*layer], 0.0)?.remove(0);
            gda.score_matrix(&feats)
        }
        Method::Ours => fitted
            .ours
            .as_ref()
            .expect("fitted in fit stage")
            .score_inputs(net, inputs, epsilon),
    }
}

pub fn evaluate(
    net: &RefNet,
    source: &dyn DataSource,
    train: &DatasetManifest,
    id_test: &DatasetManifest,
    ood_sets: &[DatasetManifest],
    plan: &EvaluationPlan,
) -> Result<Evaluation> {
    ensure!(
        !plan.methods.is_empty(),
        Error::InvalidArgument("no methods to evaluate".into())
    );
    ensure!(
        !ood_sets.is_empty(),
        Error::InvalidArgument("no OOD datasets to evaluate against".into())
    );
    plan.detector.validate()?;
    let tpr = plan.detector.tpr_target;

    source.enter_stage(Stage::Fit);
    let train = source.load(train)?;
    let fitted = fit_stage(net, &train, plan)?;
    drop(train);

    source.enter_stage(Stage::Score);
    let id = source.load(id_test)?;

    let mut rows = Vec::new();
    for (k, ood_manifest) in ood_sets.iter().enumerate() {
        let set_seed = plan.seed.wrapping_add(k as u64);
        let (ood_eval, tuned) = if plan.tune_epsilon
            && plan.methods.iter().any(|m| m.uses_epsilon())
        {
            source.enter_stage(Stage::Tune);
            let ood = source.load(ood_manifest)?;
            let (tune_idx, eval_idx) = split_fraction(ood.len(), plan.tune_fraction, set_seed)?;
            ensure!(
                !eval_idx.is_empty(),
                Error::InvalidArgument(format!(
                    "{} is too small to hold out a tuning subset",
                    ood.name
                ))
            );
            let tune = ood.inputs.select(&tune_idx)?;
            let mut tuned = Vec::new();
            for &m in plan.methods.iter().filter(|m| m.uses_epsilon()) {
                let sweep = tune_method(net, &fitted, plan, m, &id.inputs, &tune, set_seed)?;
                log::info!("{m} vs {}: tuned epsilon {}", ood.name, sweep.best_epsilon);
                tuned.push((m, sweep.best_epsilon));
            }
            source.enter_stage(Stage::Score);
            (ood.subset(&eval_idx)?, tuned)
        } else {
            (source.load(ood_manifest)?, Vec::new())
        };

        for &m in &plan.methods {
            let eps = if m.uses_epsilon() {
                let fixed = match m {
                    Method::Odin => plan.odin_epsilon,
                    _ => plan.detector.epsilon,
                };
                Some(tuned.iter().find(|t| t.0 == m).map_or(fixed, |t| t.1))
            } else {
                None
            };
            let e = eps.unwrap_or(0.0);
            let id_scores = method_scores(net, &fitted, plan, m, &id.inputs, e)?;
            let ood_scores = method_scores(net, &fitted, plan, m, &ood_eval.inputs, e)?;
            let pair = balanced_pair(&id_scores, &ood_scores, set_seed)?;
            rows.push(EvaluationRow {
                method: m,
                ood: ood_eval.name.clone(),
                epsilon: eps,
                n_id: pair.id_scores().len(),
                n_ood: pair.ood_scores().len(),
                metrics: report(&pair, tpr)?,
            });
        }
    }
    Ok(Evaluation {
        id_dataset: id.name.clone(),
        ours_layer: fitted.ours.as_ref().map(|d| d.layer),
        rows,
    })
}

fn tune_method(
    net: &RefNet,
    fitted: &Fitted,
    plan: &EvaluationPlan,
    method: Method,
    id: &FeatureTensor,
    ood_subset: &FeatureTensor,
    seed: u64,
) -> Result<EpsilonSweep> {
    let tpr = plan.detector.tpr_target;
    match method {
        Method::Ours => sweep_epsilon(
            net,
            fitted.ours.as_ref().expect("fitted"),
            id,
            ood_subset,
            &plan.epsilon_grid,
            tpr,
            seed,
        ),
        _ => sweep_epsilon_with(&plan.epsilon_grid, tpr, seed, |eps| {
            Ok((
                method_scores(net, fitted, plan, method, id, eps)?,
                method_scores(net, fitted, plan, method, ood_subset, eps)?,
            ))
        }),
    }
}

/// Fits the one-class detector at `layer` from the training manifest alone.
pub fn fit_detector(
    net: &RefNet,
    source: &dyn DataSource,
    train: &DatasetManifest,
    layer: usize,
    cfg: &OcsvmConfig,
    standardize: bool,
    seed: u64,
) -> Result<OodlDetector> {
    source.enter_stage(Stage::Fit);
    let train = source.load(train)?;
    OodlDetector::fit(net, &train.inputs, layer, cfg, standardize, seed)
}
