//! Metrics CSV and ledger JSON.

use std::fmt::Write as _;

use heron_sfl::ledger::{
    comm_per_update, flops_per_update, peak_memory_class, CostModelInput, LedgerCounters, MemoryClass,
};
use heron_sfl::protocol::{Algorithm, ModelPartition, RoundMetrics, TrainingRun};
use serde::Serialize;

/// Column names of the metrics CSV, in order.
pub const CSV_COLUMNS: [&str; 10] = [
    "round",
    "train_loss",
    "eval_acc",
    "uploaded_scalars",
    "downloaded_scalars",
    "forward_ops",
    "backward_ops",
    "cache_hwm",
    "participants",
    "rounds_to_threshold",
];

pub fn csv_header() -> String {
    CSV_COLUMNS.join(",")
}

/// One row per round. Ledger columns are the client-side growth during the
/// round summed over clients; `cache_hwm` is the largest client cache so far.
/// `rounds_to_threshold` is the first round whose accuracy reached the
/// threshold, counted in rounds (index + 1), or empty while not yet reached.
pub fn metrics_csv(metrics: &[RoundMetrics<f64>], threshold: f64) -> String {
    let mut out = csv_header();
    out.push('\n');
    let mut reached: Option<usize> = None;
    for m in metrics {
        if reached.is_none() && m.eval_accuracy >= threshold {
            reached = Some(m.round + 1);
        }
        let participants: Vec<String> = m.participants.iter().map(|p| p.to_string()).collect();
        let l = &m.ledger;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            m.round,
            m.train_loss,
            m.eval_accuracy,
            l.uploaded_scalars,
            l.downloaded_scalars,
            l.forward_ops,
            l.backward_ops,
            l.activation_cache_hwm,
            participants.join(";"),
            reached.map(|r| r.to_string()).unwrap_or_default(),
        )
        .expect("writing to a String");
    }
    out
}

/// Column names of the per-client CSV, in order.
pub const CLIENT_CSV_COLUMNS: [&str; 4] = ["round", "client", "local_loss", "drift"];

/// One row per participant per round. `drift` is empty unless drift tracking
/// is enabled.
pub fn clients_csv(metrics: &[RoundMetrics<f64>]) -> String {
    let mut out = CLIENT_CSV_COLUMNS.join(",");
    out.push('\n');
    for m in metrics {
        for &(id, loss) in &m.client_losses {
            let drift = m
                .drift
                .as_ref()
                .and_then(|d| d.iter().find(|(c, _)| *c == id))
                .map(|(_, v)| v.to_string())
                .unwrap_or_default();
            writeln!(out, "{},{id},{loss},{drift}", m.round).expect("writing to a String");
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosedForm {
    pub inputs: CostModelInput,
    pub comm_per_update: u64,
    pub flops_per_update: u64,
    pub peak_memory: MemoryClass,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientLedger {
    pub id: usize,
    pub rounds_participated: usize,
    pub measured: LedgerCounters,
    pub predicted: LedgerCounters,
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerReport {
    pub algorithm: Algorithm,
    pub rounds: usize,
    /// Per-update costs at the configured batch size.
    pub closed_form: ClosedForm,
    pub clients: Vec<ClientLedger>,
    pub server: LedgerCounters,
    /// Whether every client's measured counters equal the prediction.
    pub reconciled: bool,
}

impl LedgerReport {
    pub fn new(
        algorithm: Algorithm,
        model: &ModelPartition<f64>,
        batch_size: usize,
        probes: usize,
        run: &TrainingRun<f64>,
    ) -> heron_sfl::Result<Self> {
        let inputs = CostModelInput {
            p: batch_size as u64,
            q: model.cut_width() as u64,
            size_c: model.client.param_count() as u64,
            size_a: model.aux.param_count() as u64,
            f_c: model.client.topology().forward_macs(batch_size),
            f_a: model.aux.topology().forward_macs(batch_size),
            n_p: probes as u64 + 1,
        };
        let mut counts = vec![0usize; run.client_ledgers.len()];
        for m in &run.metrics {
            for &p in &m.participants {
                counts[p] += 1;
            }
        }
        let clients: Vec<ClientLedger> = run
            .client_ledgers
            .iter()
            .zip(&run.predicted_ledgers)
            .enumerate()
            .map(|(id, (m, p))| ClientLedger {
                id,
                rounds_participated: counts[id],
                measured: *m,
                predicted: *p,
            })
            .collect();
        Ok(Self {
            algorithm,
            rounds: run.metrics.len(),
            closed_form: ClosedForm {
                inputs,
                comm_per_update: comm_per_update(algorithm, &inputs)?,
                flops_per_update: flops_per_update(algorithm, &inputs)?,
                peak_memory: peak_memory_class(algorithm),
            },
            reconciled: clients.iter().all(|c| c.measured == c.predicted),
            clients,
            server: run.server_ledger,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("ledger report serializes");
        s.push('\n');
        s
    }
}
