//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use heron_sfl::data::PartitionMode;
use heron_sfl::nn::Activation;
use heron_sfl::protocol::{Algorithm, ArchSpec, BinSpec, ClientOptimizer, RoundConfig};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Algorithms run as paired arms on identical seeds.
    pub arms: Vec<Algorithm>,
    /// Accuracy at which the `rounds_to_threshold` column is filled.
    #[serde(default = "default_threshold")]
    pub accuracy_threshold: f64,
    pub round: RoundSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub spectrum: Option<SpectrumSection>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_threshold() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundSection {
    pub rounds: usize,
    pub num_clients: usize,
    #[serde(default = "one")]
    pub participation: f64,
    pub local_steps: usize,
    pub upload_period: usize,
    pub batch_size: usize,
    pub lr_client: f64,
    pub lr_server: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "one_usize")]
    pub probes: usize,
    #[serde(default)]
    pub optimizer: ClientOptimizer,
    pub drift: Option<BinSpec>,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn default_mu() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Training samples generated when `train_path` is unset.
    #[serde(default)]
    pub n_samples: usize,
    /// Held-out samples generated when `eval_path` is unset.
    #[serde(default)]
    pub n_eval: usize,
    pub n_inputs: usize,
    pub n_classes: usize,
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    #[serde(default = "one")]
    pub noise_sd: f64,
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
}

fn default_separation() -> f64 {
    2.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", deny_unknown_fields)]
pub enum PartitionSection {
    #[default]
    Iid,
    Dirichlet {
        alpha: f64,
    },
}

impl PartitionSection {
    pub fn mode(self) -> PartitionMode {
        match self {
            PartitionSection::Iid => PartitionMode::Iid,
            PartitionSection::Dirichlet { alpha } => PartitionMode::Dirichlet { alpha },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Client layer widths; the last one is the cut width.
    pub client_widths: Vec<usize>,
    #[serde(default = "tanh")]
    pub client_activation: Activation,
    #[serde(default)]
    pub aux_hidden: Vec<usize>,
    #[serde(default)]
    pub server_hidden: Vec<usize>,
    #[serde(default = "tanh")]
    pub hidden_activation: Activation,
}

fn tanh() -> Activation {
    Activation::Tanh
}

/// Lanczos settings for the local-loss Hessian diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSection {
    pub steps: usize,
    pub probes: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Training samples (lowest indices) the loss is averaged over.
    #[serde(default = "default_spectrum_samples")]
    pub samples: usize,
}

fn default_eps() -> f64 {
    1e-4
}

fn default_spectrum_samples() -> usize {
    256
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text, path)?;
        // Relative data paths are taken relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset.train_path, &mut cfg.dataset.eval_path]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            n_inputs: self.dataset.n_inputs,
            client_widths: self.model.client_widths.clone(),
            client_activation: self.model.client_activation,
            aux_hidden: self.model.aux_hidden.clone(),
            server_hidden: self.model.server_hidden.clone(),
            hidden_activation: self.model.hidden_activation,
            n_classes: self.dataset.n_classes,
        }
    }

    pub fn round_config(&self, algorithm: Algorithm) -> RoundConfig<f64> {
        let r = &self.round;
        RoundConfig {
            local_steps: r.local_steps,
            upload_period: r.upload_period,
            lr_client: r.lr_client,
            lr_server: r.lr_server,
            mu: r.mu,
            probes: r.probes,
            batch_size: r.batch_size,
            num_clients: r.num_clients,
            participation: r.participation,
            rounds: r.rounds,
            algorithm,
            optimizer: r.optimizer,
            seed: self.seed,
            drift_bins: r.drift,
        }
    }

    /// Every violated invariant; empty when the config is runnable.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.arms.is_empty() {
            v.push("arms must list at least one algorithm".to_string());
        }
        let mut seen = self.arms.clone();
        seen.sort_by_key(|a| a.tag());
        seen.dedup();
        if seen.len() != self.arms.len() {
            v.push("arms must not repeat an algorithm".to_string());
        }
        let alg = self.arms.first().copied().unwrap_or(Algorithm::Heron);
        v.extend(self.round_config(alg).violations());
        if !(0.0..=1.0).contains(&self.accuracy_threshold) {
            v.push("accuracy_threshold must be in [0, 1]".to_string());
        }
        let d = &self.dataset;
        if d.n_inputs == 0 {
            v.push("dataset.n_inputs must be at least 1".to_string());
        }
        if d.n_classes < 2 {
            v.push("dataset.n_classes must be at least 2".to_string());
        }
        if d.train_path.is_none() && d.n_samples < self.round.num_clients.max(1) {
            v.push("dataset.n_samples must be at least the number of clients".to_string());
        }
        if d.eval_path.is_none() && d.n_eval == 0 {
            v.push("dataset.n_eval must be at least 1".to_string());
        }
        if !(d.noise_sd >= 0.0 && d.noise_sd.is_finite()) || !d.class_separation.is_finite() {
            v.push("dataset.noise_sd must be non-negative and class_separation finite".to_string());
        }
        if let PartitionSection::Dirichlet { alpha } = self.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                v.push(format!("partition.alpha must be positive, got {alpha}"));
            }
        }
        if self.model.client_widths.is_empty() {
            v.push("model.client_widths needs at least one layer".to_string());
        }
        let widths = self.model.client_widths.iter();
        if widths
            .chain(&self.model.aux_hidden)
            .chain(&self.model.server_hidden)
            .any(|&w| w == 0)
        {
            v.push("model layer widths must be positive".to_string());
        }
        if let Some(s) = self.spectrum {
            if s.steps == 0 || s.probes == 0 || s.samples == 0 {
                v.push("spectrum.steps, probes and samples must be at least 1".to_string());
            }
            if !(s.eps > 0.0) {
                v.push("spectrum.eps must be positive".to_string());
            }
            if let Ok((c, a, _)) = self.arch().topologies() {
                let dim = c.param_count() + a.param_count();
                if s.steps > dim {
                    v.push(format!("spectrum.steps {} exceeds the {dim} local parameters", s.steps));
                }
            }
        }
        v
    }
}
