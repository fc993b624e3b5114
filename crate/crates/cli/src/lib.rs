//! Commands behind the `oodl` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use oodl_core::detector::{extract_features, find_oodl, sweep_epsilon, EpsilonSweep, OodlDetector, OodlSearchResult, SearchOptions};
use oodl_core::pipeline::{evaluate, fit_detector, Evaluation, FileSource, Method};
use oodl_core::refnet::{self, Architecture, RefNet, TrainHistory};
use oodl_core::synthetic::{planted_ood, planted_task, PlantedOod};
use oodl_core::{DatasetManifest, FeatureTensor};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] oodl_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numeric() => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "oodl", version, about = "One-class OOD detection on a searched network layer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the network described by `architecture` on the `train` manifest.
    Train(Overrides),
    /// Write per-layer features of one dataset.
    Extract {
        #[command(flatten)]
        overrides: Overrides,
        /// Manifest to extract; the training manifest when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Search the probe points for the layer with the lowest detection error.
    FindOodl(Overrides),
    /// Fit the one-class SVM at the chosen layer.
    Fit(Overrides),
    /// Pick the perturbation magnitude on the probe OOD set.
    SweepEpsilon(Overrides),
    /// Score every method against every OOD set.
    Evaluate {
        #[command(flatten)]
        overrides: Overrides,
        /// Extra OOD manifests, appended to the configured ones.
        ood: Vec<PathBuf>,
    },
    /// Write a small synthetic task (network, manifests, config) to `--out`.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_test: usize,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated, e.g. `max-softmax,ours`.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub layer: Option<usize>,
    /// Target true-positive rate; the config value (0.95 by default) when
    /// omitted.
    #[arg(long)]
    pub tpr: Option<f64>,
}

impl Overrides {
    pub fn load(&self, net_is_output: bool) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config, net_is_output)?;
        if let Some(s) = self.seed {
            cfg.plan.seed = s;
            cfg.training.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(m) = &self.methods {
            cfg.plan.methods = m.clone();
        }
        if let Some(e) = self.epsilon {
            cfg.plan.detector.epsilon = e;
            cfg.plan.odin_epsilon = e;
        }
        if let Some(l) = self.layer {
            cfg.plan.detector.layer = Some(l);
        }
        if let Some(t) = self.tpr {
            cfg.plan.detector.tpr_target = t;
        }
        cfg.plan.detector.validate()?;
        cfg.plan.ocsvm.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(o) => cmd_train(&o.load(true)?).map(|_| ()),
        Command::Extract { overrides, manifest } => {
            cmd_extract(&overrides.load(false)?, manifest.as_deref()).map(|_| ())
        }
        Command::FindOodl(o) => cmd_find_oodl(&o.load(false)?).map(|_| ()),
        Command::Fit(o) => cmd_fit(&o.load(false)?).map(|_| ()),
        Command::SweepEpsilon(o) => cmd_sweep_epsilon(&o.load(false)?).map(|_| ()),
        Command::Evaluate { overrides, ood } => {
            let mut cfg = overrides.load(false)?;
            if let Some(p) = ood.iter().find(|p| !p.exists()) {
                return Err(CliError::Config(format!("{} does not exist", p.display())));
            }
            cfg.ood.extend(ood);
            let ev = cmd_evaluate(&cfg)?;
            print!("{}", ev.to_table());
            Ok(())
        }
        Command::Synth {
            out,
            seed,
            n_train,
            n_test,
        } => cmd_synth(&out, seed, n_train, n_test).map(|_| ()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| oodl_core::Error::io_at(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(oodl_core::Error::from)? + "\n";
    fs::write(path, text).map_err(|e| oodl_core::Error::io_at(path, e))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_net(cfg: &RunConfig) -> Result<RefNet> {
    Ok(RefNet::load(RunConfig::require(&cfg.net, "net")?)?)
}

fn load_manifest(p: &Path) -> Result<DatasetManifest> {
    Ok(DatasetManifest::load(p)?)
}

/// Trains a freshly initialised network and writes it to `<out>/net`.
pub fn cmd_train(cfg: &RunConfig) -> Result<(PathBuf, TrainHistory)> {
    let arch_path = RunConfig::require(&cfg.architecture, "architecture")?;
    let text = fs::read_to_string(arch_path).map_err(|e| oodl_core::Error::io_at(arch_path, e))?;
    let arch: Architecture = serde_json::from_str(&text).map_err(oodl_core::Error::from)?;
    let data = load_manifest(RunConfig::require(&cfg.train, "train")?)?.load_dataset()?;
    let net = RefNet::init(&arch, cfg.training.seed)?;
    let (net, history) = refnet::train(&net, &data, &cfg.training)?;
    let dir = cfg.out.join("net");
    net.save(&dir)?;
    write_json(&cfg.out.join("train_history.json"), &history)?;
    log::info!("training accuracy {:.4}", history.final_accuracy);
    Ok((dir, history))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractedLayer {
    pub layer: usize,
    pub path: PathBuf,
    pub shape: Vec<usize>,
}

/// Writes one `[n, d]` feature tensor per probe layer (or `--layer` only)
/// under `<out>/features/<dataset>/`.
pub fn cmd_extract(cfg: &RunConfig, manifest: Option<&Path>) -> Result<Vec<ExtractedLayer>> {
    let net = load_net(cfg)?;
    let manifest = match manifest {
        Some(m) => m,
        None => RunConfig::require(&cfg.train, "train")?,
    };
    let data = load_manifest(manifest)?.load_dataset()?;
    let layers = match cfg.plan.detector.layer {
        Some(l) => vec![l],
        None => net.probe_points().to_vec(),
    };
    let feats = extract_features(&net, &data.inputs, &layers, 0.0)?;
    let dir = cfg.out.join("features").join(&data.name);
    fs::create_dir_all(&dir).map_err(|e| oodl_core::Error::io_at(&dir, e))?;
    let mut index = Vec::new();
    for (&layer, f) in layers.iter().zip(&feats) {
        let shape = vec![f.n_rows(), f.n_cols()];
        let file = format!("layer{layer:02}.oodf");
        oodl_core::tensor_io::write_tensor(dir.join(&file), &FeatureTensor::from_f64(shape.clone(), f.as_slice())?)?;
        index.push(ExtractedLayer {
            layer,
            path: PathBuf::from(file),
            shape,
        });
    }
    write_json(&dir.join("index.json"), &index)?;
    Ok(index)
}

/// Runs the layer search and writes `<out>/oodl.json`.
pub fn cmd_find_oodl(cfg: &RunConfig) -> Result<OodlSearchResult> {
    let net = load_net(cfg)?;
    let train = load_manifest(RunConfig::require(&cfg.train, "train")?)?.load_dataset()?;
    let id = load_manifest(RunConfig::require(&cfg.id_test, "id_test")?)?.load_dataset()?;
    let ood = load_manifest(cfg.probe_manifest()?)?.load_dataset()?;
    let opts = SearchOptions {
        tpr_target: cfg.plan.detector.tpr_target,
        standardize: cfg.plan.detector.standardize,
        keep_models: false,
        seed: cfg.plan.seed,
    };
    let result = find_oodl(&net, &train.inputs, &id.inputs, &ood.inputs, &cfg.plan.ocsvm, &opts)?;
    log::info!(
        "best layer {} with detection error {:.4}",
        result.best_layer,
        result.best_error()
    );
    write_json(&cfg.out.join("oodl.json"), &result)?;
    Ok(result)
}

/// `--layer`, then the config, then a previous search in `<out>/oodl.json`.
pub fn resolve_layer(cfg: &RunConfig) -> Result<usize> {
    if let Some(l) = cfg.plan.detector.layer {
        return Ok(l);
    }
    let path = cfg.out.join("oodl.json");
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| oodl_core::Error::io_at(&path, e))?;
        let r: OodlSearchResult = serde_json::from_str(&text).map_err(oodl_core::Error::from)?;
        return Ok(r.best_layer);
    }
    Err(CliError::Config(
        "no detector layer: pass --layer, set detector.layer, or run find-oodl first".into(),
    ))
}

/// Fits the detector and writes it to `<out>/detector`.
pub fn cmd_fit(cfg: &RunConfig) -> Result<OodlDetector> {
    let net = load_net(cfg)?;
    let layer = resolve_layer(cfg)?;
    let train = load_manifest(RunConfig::require(&cfg.train, "train")?)?;
    let det = fit_detector(
        &net,
        &FileSource,
        &train,
        layer,
        &cfg.plan.ocsvm,
        cfg.plan.detector.standardize,
        cfg.plan.seed,
    )?;
    det.save(cfg.out.join("detector"))?;
    Ok(det)
}

/// Sweeps ε for the detector (reused from `<out>/detector` when present)
/// and writes `<out>/epsilon_sweep.json`.
pub fn cmd_sweep_epsilon(cfg: &RunConfig) -> Result<EpsilonSweep> {
    let net = load_net(cfg)?;
    let saved = cfg.out.join("detector");
    let det = if cfg.plan.detector.layer.is_none() && saved.join("detector.json").exists() {
        OodlDetector::load(&saved)?
    } else {
        cmd_fit(cfg)?
    };
    let id = load_manifest(RunConfig::require(&cfg.id_test, "id_test")?)?.load_dataset()?;
    let ood = load_manifest(cfg.probe_manifest()?)?.load_dataset()?;
    let sweep = sweep_epsilon(
        &net,
        &det,
        &id.inputs,
        &ood.inputs,
        &cfg.plan.epsilon_grid,
        cfg.plan.detector.tpr_target,
        cfg.plan.seed,
    )?;
    log::info!("best epsilon {}", sweep.best_epsilon);
    write_json(&cfg.out.join("epsilon_sweep.json"), &sweep)?;
    Ok(sweep)
}

/// Writes `<out>/evaluation.json` and `<out>/evaluation.txt`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Evaluation> {
    let net = load_net(cfg)?;
    let mut plan = cfg.plan.clone();
    if plan.methods.contains(&Method::Ours) {
        plan.detector.layer = Some(resolve_layer(cfg)?);
    }
    let train = load_manifest(RunConfig::require(&cfg.train, "train")?)?;
    let id = load_manifest(RunConfig::require(&cfg.id_test, "id_test")?)?;
    let ood = cfg
        .ood
        .iter()
        .map(|p| load_manifest(p))
        .collect::<Result<Vec<_>>>()?;
    let ev = evaluate(&net, &FileSource, &train, &id, &ood, &plan)?;
    write_json(&cfg.out.join("evaluation.json"), &ev)?;
    let table = cfg.out.join("evaluation.txt");
    fs::write(&table, ev.to_table()).map_err(|e| oodl_core::Error::io_at(&table, e))?;
    Ok(ev)
}

/// Writes the planted synthetic task: a network bundle, train / ID / two
/// OOD manifests and a `config.json` referencing them.
pub fn cmd_synth(out: &Path, seed: u64, n_train: usize, n_test: usize) -> Result<PathBuf> {
    let task = planted_task(n_train, n_test, PlantedOod::MeanShift(2.0), seed);
    let data = out.join("data");
    task.net.save(out.join("net"))?;
    let train = task.train.save(&data, "train")?;
    let id = task.id_test.save(&data, "id_test")?;
    let shift = task.ood.save(&data, "ood_shift")?;
    let scale = planted_ood(n_test, PlantedOod::Scaled(3.0), seed.wrapping_add(4)).save(&data, "ood_scale")?;
    let rel = |p: &Path| p.strip_prefix(out).unwrap_or(p).to_path_buf();
    let cfg = RunConfig {
        net: Some(PathBuf::from("net")),
        train: Some(rel(&train)),
        id_test: Some(rel(&id)),
        ood: vec![rel(&shift), rel(&scale)],
        out: PathBuf::from("results"),
        ..RunConfig::default()
    };
    let path = out.join("config.json");
    write_json(&path, &cfg)?;
    Ok(path)
}
