use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::scalar::Scalar;

/// Training scheme run by the clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    /// Zeroth-order client + auxiliary head, first-order server.
    #[serde(rename = "HERON")]
    Heron,
    /// Client and server backprop through the cut layer every step.
    #[serde(rename = "SFLV2")]
    Sflv2,
    /// First-order client + auxiliary head (decoupled, no server gradient).
    #[serde(rename = "CSE_FSL_FO")]
    CseFslFo,
}

impl Algorithm {
    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::Heron => "HERON",
            Algorithm::Sflv2 => "SFLV2",
            Algorithm::CseFslFo => "CSE_FSL_FO",
        }
    }

    /// Whether clients train an auxiliary head.
    pub fn uses_aux(self) -> bool {
        !matches!(self, Algorithm::Sflv2)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "HERON" | "HERON_SFL" => Ok(Algorithm::Heron),
            "SFLV2" => Ok(Algorithm::Sflv2),
            "CSE_FSL_FO" | "CSE_FSL" => Ok(Algorithm::CseFslFo),
            _ => Err(config(format!("unknown algorithm tag '{s}'"))),
        }
    }
}

/// Client-side update rule applied to the (estimated or exact) gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClientOptimizer {
    #[default]
    Sgd,
    /// Moments are reset at every broadcast.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Histogram bins for the cut-layer drift statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

/// Hyperparameters of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig<T> {
    /// Local steps per round (`h`).
    pub local_steps: usize,
    /// Upload smashed data every `k` local steps.
    pub upload_period: usize,
    pub lr_client: T,
    pub lr_server: T,
    pub mu: T,
    /// Two-point probes per zeroth-order estimate.
    pub probes: usize,
    pub batch_size: usize,
    pub num_clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub algorithm: Algorithm,
    pub optimizer: ClientOptimizer,
    pub seed: u64,
    /// Compute the drift statistic each round when set.
    pub drift_bins: Option<BinSpec>,
}

impl<T: Scalar> RoundConfig<T> {
    /// Defaults for a small synthetic run.
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            local_steps: 4,
            upload_period: 2,
            lr_client: T::of(0.05),
            lr_server: T::of(0.05),
            mu: T::of(1e-3),
            probes: 1,
            batch_size: 32,
            num_clients: 5,
            participation: 1.0,
            rounds: 50,
            algorithm,
            optimizer: ClientOptimizer::Sgd,
            seed: 0,
            drift_bins: None,
        }
    }

    /// Every violated invariant, as human-readable strings.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.local_steps == 0 {
            v.push("local steps must be at least 1".to_string());
        }
        if self.upload_period == 0 {
            v.push("upload period must be at least 1".to_string());
        } else if self.upload_period > self.local_steps {
            v.push("upload period exceeds local steps".to_string());
        }
        if self.num_clients == 0 {
            v.push("need at least one client".to_string());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            v.push(format!(
                "participation fraction must be in (0, 1], got {}",
                self.participation
            ));
        }
        if self.batch_size == 0 {
            v.push("batch size must be at least 1".to_string());
        }
        if self.probes == 0 {
            v.push("need at least one perturbation probe".to_string());
        }
        if !(self.mu > T::zero() && self.mu.is_finite()) {
            v.push(format!("perturbation radius mu must be positive, got {}", self.mu));
        }
        for (name, lr) in [("client", self.lr_client), ("server", self.lr_server)] {
            if !(lr >= T::zero() && lr.is_finite()) {
                v.push(format!("{name} learning rate must be finite and non-negative"));
            }
        }
        if let ClientOptimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                v.push("Adam needs beta1, beta2 in [0, 1) and eps > 0".to_string());
            }
        }
        if let Some(b) = self.drift_bins {
            if b.bins == 0 || !(b.hi > b.lo) {
                v.push("drift bins need hi > lo and at least one bin".to_string());
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(config(v.join("; ")))
        }
    }

    /// Smashed-data uploads per client per round.
    pub fn uploads_per_round(&self) -> usize {
        match self.algorithm {
            Algorithm::Sflv2 => self.local_steps,
            _ => self.local_steps / self.upload_period,
        }
    }
}
