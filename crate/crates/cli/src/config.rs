use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use oodl_core::pipeline::EvaluationPlan;
use oodl_core::refnet::TrainConfig;

use crate::CliError;

/// Everything a command needs, read from one JSON file.
///
/// Relative paths are resolved against the directory holding the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Network bundle directory (`arch.json` plus weight tensors).
    #[serde(default)]
    pub net: Option<PathBuf>,
    /// Architecture to initialise before training.
    #[serde(default)]
    pub architecture: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub id_test: Option<PathBuf>,
    #[serde(default)]
    pub ood: Vec<PathBuf>,
    /// OOD set used by the layer search and the ε sweep; the first of `ood`
    /// when unset.
    #[serde(default)]
    pub ood_probe: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(flatten)]
    pub plan: EvaluationPlan,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: None,
            architecture: None,
            train: None,
            id_test: None,
            ood: Vec::new(),
            ood_probe: None,
            out: default_out(),
            training: TrainConfig::default(),
            plan: EvaluationPlan::default(),
        }
    }
}

impl RunConfig {
    /// Reads the file and checks that every referenced input exists. The
    /// network bundle is exempt when `net_is_output` is set, as `train`
    /// writes it.
    pub fn load(path: &Path, net_is_output: bool) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.check_paths(net_is_output)?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.net,
            &mut self.architecture,
            &mut self.train,
            &mut self.id_test,
            &mut self.ood_probe,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
        self.ood.iter_mut().for_each(join);
        join(&mut self.out);
    }

    fn check_paths(&self, net_is_output: bool) -> Result<(), CliError> {
        let mut inputs: Vec<&PathBuf> = [&self.architecture, &self.train, &self.id_test, &self.ood_probe]
            .into_iter()
            .flatten()
            .chain(&self.ood)
            .collect();
        if !net_is_output {
            inputs.extend(&self.net);
        }
        match inputs.into_iter().find(|p| !p.exists()) {
            Some(p) => Err(CliError::Config(format!("{} does not exist", p.display()))),
            None => Ok(()),
        }
    }

    pub fn require<'a>(field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, CliError> {
        field
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("config has no `{name}` entry")))
    }

    pub fn probe_manifest(&self) -> Result<&Path, CliError> {
        self.ood_probe
            .as_deref()
            .or(self.ood.first().map(PathBuf::as_path))
            .ok_or_else(|| CliError::Config("config lists no OOD manifest".into()))
    }
}
