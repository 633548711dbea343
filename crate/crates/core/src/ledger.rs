//! Client-side resource accounting: closed-form costs and measured counters.
//!
//! Costs are counted in scalars (communication) and multiply-accumulates
//! (compute). Forward cost `F` of a dense net is `Σ outputs·inputs·B` over its
//! layers; a backward pass costs `2F`.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::protocol::Algorithm;

/// Inputs of the per-update cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModelInput {
    /// Samples in one local batch.
    pub p: u64,
    /// Cut-layer width.
    pub q: u64,
    pub size_c: u64,
    pub size_a: u64,
    pub f_c: u64,
    pub f_a: u64,
    /// Forward evaluations per zeroth-order update (probes plus the shared base).
    pub n_p: u64,
}

impl CostModelInput {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("p", self.p),
            ("q", self.q),
            ("size_c", self.size_c),
            ("size_a", self.size_a),
            ("f_c", self.f_c),
            ("f_a", self.f_a),
            ("n_p", self.n_p),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(config(format!("cost input {name} must be positive"))),
            None => Ok(()),
        }
    }
}

/// Scalars exchanged per local update, as tabulated: smashed data plus the
/// full parameter exchange.
pub fn comm_per_update(algorithm: Algorithm, inputs: &CostModelInput) -> Result<u64> {
    inputs.validate()?;
    let i = inputs;
    Ok(match algorithm {
        Algorithm::Sflv2 => 2 * i.p * i.q + 2 * i.size_c,
        Algorithm::CseFslFo | Algorithm::Heron => i.p * i.q + 2 * (i.size_c + i.size_a),
    })
}

pub fn flops_per_update(algorithm: Algorithm, inputs: &CostModelInput) -> Result<u64> {
    inputs.validate()?;
    let i = inputs;
    Ok(match algorithm {
        Algorithm::Sflv2 => 3 * i.f_c,
        Algorithm::CseFslFo => 3 * (i.f_c + i.f_a),
        Algorithm::Heron => i.n_p * (i.f_c + i.f_a),
    })
}

/// Cost-model entry point for textual algorithm tags.
pub fn comm_per_update_tag(tag: &str, inputs: &CostModelInput) -> Result<u64> {
    comm_per_update(tag.parse()?, inputs)
}

pub fn flops_per_update_tag(tag: &str, inputs: &CostModelInput) -> Result<u64> {
    flops_per_update(tag.parse()?, inputs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryClass {
    /// Grows with the trained parameters (activation caching for backprop).
    ParameterScaled,
    /// Inference-level, independent of the trained parameters.
    Constant,
}

pub fn peak_memory_class(algorithm: Algorithm) -> MemoryClass {
    match algorithm {
        Algorithm::Sflv2 | Algorithm::CseFslFo => MemoryClass::ParameterScaled,
        Algorithm::Heron => MemoryClass::Constant,
    }
}

/// Communication of one client over one round, split by direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundComm {
    pub uploaded: u64,
    pub downloaded: u64,
}

impl RoundComm {
    pub fn total(&self) -> u64 {
        self.uploaded + self.downloaded
    }

    /// Per-round total spread over the `h` local updates.
    pub fn amortized_per_update(&self, local_steps: usize) -> f64 {
        self.total() as f64 / local_steps as f64
    }
}

/// Per-round communication of one participating client with `h` local steps
/// and upload period `k`. The parameter exchange is charged once: the
/// download at broadcast, the upload at aggregation.
pub fn comm_per_round(
    algorithm: Algorithm,
    inputs: &CostModelInput,
    local_steps: usize,
    upload_period: usize,
) -> Result<RoundComm> {
    inputs.validate()?;
    if local_steps == 0 || upload_period == 0 || upload_period > local_steps {
        return Err(config("need 1 <= k <= h"));
    }
    let pq = inputs.p * inputs.q;
    Ok(match algorithm {
        Algorithm::Sflv2 => {
            let exchange = local_steps as u64 * pq;
            RoundComm {
                uploaded: exchange + inputs.size_c,
                downloaded: exchange + inputs.size_c,
            }
        }
        Algorithm::CseFslFo | Algorithm::Heron => {
            let uploads = (local_steps / upload_period) as u64;
            let params = inputs.size_c + inputs.size_a;
            RoundComm {
                uploaded: uploads * pq + params,
                downloaded: params,
            }
        }
    })
}

/// Cumulative counters for one party.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerCounters {
    pub uploaded_scalars: u64,
    pub downloaded_scalars: u64,
    pub forward_ops: u64,
    pub backward_ops: u64,
    /// Largest activation cache held at any instant.
    pub activation_cache_hwm: u64,
    pub backward_calls: u64,
}

impl LedgerCounters {
    pub fn charge_upload(&mut self, scalars: u64) {
        self.uploaded_scalars += scalars;
    }

    pub fn charge_download(&mut self, scalars: u64) {
        self.downloaded_scalars += scalars;
    }

    /// Records a forward pass and the cache it left alive.
    pub fn record_forward(&mut self, macs: u64, cache_scalars: u64) {
        self.forward_ops += macs;
        self.activation_cache_hwm = self.activation_cache_hwm.max(cache_scalars);
    }

    pub fn record_backward(&mut self, macs: u64) {
        self.backward_ops += macs;
        self.backward_calls += 1;
    }

    /// Counter growth since `earlier`; the high-water mark is carried as is.
    pub fn since(&self, earlier: &LedgerCounters) -> LedgerCounters {
        LedgerCounters {
            uploaded_scalars: self.uploaded_scalars - earlier.uploaded_scalars,
            downloaded_scalars: self.downloaded_scalars - earlier.downloaded_scalars,
            forward_ops: self.forward_ops - earlier.forward_ops,
            backward_ops: self.backward_ops - earlier.backward_ops,
            activation_cache_hwm: self.activation_cache_hwm,
            backward_calls: self.backward_calls - earlier.backward_calls,
        }
    }

    /// Sums counters and takes the max of high-water marks.
    pub fn merge(&self, other: &LedgerCounters) -> LedgerCounters {
        LedgerCounters {
            uploaded_scalars: self.uploaded_scalars + other.uploaded_scalars,
            downloaded_scalars: self.downloaded_scalars + other.downloaded_scalars,
            forward_ops: self.forward_ops + other.forward_ops,
            backward_ops: self.backward_ops + other.backward_ops,
            activation_cache_hwm: self.activation_cache_hwm.max(other.activation_cache_hwm),
            backward_calls: self.backward_calls + other.backward_calls,
        }
    }
}

/// Relative discrepancy per category; all zero after a successful reconcile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconcileReport {
    pub uploaded_scalars: f64,
    pub downloaded_scalars: f64,
    pub forward_ops: f64,
    pub backward_ops: f64,
    pub activation_cache_hwm: f64,
}

fn rel(measured: u64, predicted: u64) -> f64 {
    if measured == predicted {
        0.0
    } else {
        (measured as f64 - predicted as f64).abs() / (predicted.max(1) as f64)
    }
}

/// Compares measured counters with their prediction. Every category must match
/// exactly; the first mismatch is returned as an error naming the category.
pub fn reconcile(measured: &LedgerCounters, predicted: &LedgerCounters) -> Result<ReconcileReport> {
    let report = ReconcileReport {
        uploaded_scalars: rel(measured.uploaded_scalars, predicted.uploaded_scalars),
        downloaded_scalars: rel(measured.downloaded_scalars, predicted.downloaded_scalars),
        forward_ops: rel(measured.forward_ops, predicted.forward_ops),
        backward_ops: rel(measured.backward_ops, predicted.backward_ops),
        activation_cache_hwm: rel(measured.activation_cache_hwm, predicted.activation_cache_hwm),
    };
    let checks = [
        (
            "uploaded_scalars",
            measured.uploaded_scalars,
            predicted.uploaded_scalars,
        ),
        (
            "downloaded_scalars",
            measured.downloaded_scalars,
            predicted.downloaded_scalars,
        ),
        ("forward_ops", measured.forward_ops, predicted.forward_ops),
        ("backward_ops", measured.backward_ops, predicted.backward_ops),
        (
            "activation_cache_hwm",
            measured.activation_cache_hwm,
            predicted.activation_cache_hwm,
        ),
    ];
    for (category, m, p) in checks {
        if m != p {
            return Err(Error::Reconcile {
                category,
                measured: m,
                predicted: p,
            });
        }
    }
    Ok(report)
}
