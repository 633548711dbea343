//! The split federated round: broadcast, local updates with smashed-data
//! uploads, sequential server updates, and aggregation.
//!
//! Rounds are simulated serially in client-id order. Within round `t`:
//!
//! 1. the participants for `t` are drawn and receive the global `θ_c` (and `θ_a`);
//! 2. each participant runs `h` local steps, uploading smashed data every `k`
//!    steps (SFLV2 instead exchanges activations and cut gradients every step);
//! 3. the Main-Server drains its queue in arrival order, one update per batch;
//! 4. the Fed-Server averages the participants' local models.
//!
//! Every random choice is derived from the master seed and the round, client
//! and step indices, never from the algorithm, so paired runs of different
//! algorithms see the same participants and the same mini-batches.

mod client;
mod config;
mod fed;
mod model;
mod server;

use serde::Serialize;

pub use client::{ClientRoundOutput, ClientState};
pub use config::{Algorithm, BinSpec, ClientOptimizer, RoundConfig};
pub use fed::{average_params, broadcast_init, drift_statistic, fed_aggregate, select_participants};
pub use model::{ArchSpec, ModelPartition};
pub use server::{MainServerState, ServerRoundStats, ServerStep, SmashedBatch};

use crate::data::{LabeledDataset, PartitionPlan};
use crate::error::{config as config_err, Result};
use crate::ledger::{comm_per_round, flops_per_update, CostModelInput, LedgerCounters};
use crate::scalar::Scalar;
use crate::seed;

/// Zeroth-order local round (the client must hold an auxiliary head).
pub fn client_local_round<T: Scalar>(
    client: &mut ClientState<T>,
    data: &LabeledDataset<T>,
    cfg: &RoundConfig<T>,
    round: usize,
) -> Result<ClientRoundOutput<T>> {
    client.local_round_zo(data, cfg, round)
}

/// First-order decoupled local round.
pub fn client_local_round_fo<T: Scalar>(
    client: &mut ClientState<T>,
    data: &LabeledDataset<T>,
    cfg: &RoundConfig<T>,
    round: usize,
) -> Result<ClientRoundOutput<T>> {
    client.local_round_fo(data, cfg, round)
}

/// Enqueues `queue` behind anything already pending and drains it.
pub fn server_process_queue<T: Scalar>(
    server: &mut MainServerState<T>,
    queue: Vec<SmashedBatch<T>>,
) -> Result<ServerRoundStats<T>> {
    for b in queue {
        server.enqueue(b);
    }
    server.process_queue()
}

/// Per-round record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics<T> {
    pub round: usize,
    /// Composite-model loss on the union of the client shards.
    pub train_loss: T,
    /// Composite-model accuracy on the evaluation set.
    pub eval_accuracy: f64,
    pub participants: Vec<usize>,
    /// `(client, mean local loss)` for each participant.
    pub client_losses: Vec<(usize, T)>,
    pub client_grad_norm: T,
    pub server_grad_norm: T,
    /// Client-side counter growth this round, summed over clients. The
    /// high-water mark is the maximum over clients since the start of the run.
    pub ledger: LedgerCounters,
    /// `(client, drift)` against each client's first snapshot, when enabled.
    pub drift: Option<Vec<(usize, T)>>,
}

/// State of a full simulation.
#[derive(Debug, Clone)]
pub struct Simulation<'a, T> {
    cfg: RoundConfig<T>,
    train: &'a LabeledDataset<T>,
    eval: &'a LabeledDataset<T>,
    global: ModelPartition<T>,
    clients: Vec<ClientState<T>>,
    server: MainServerState<T>,
    drift_reference: Vec<Option<Vec<T>>>,
    participation: Vec<usize>,
    round: usize,
}

impl<'a, T: Scalar> Simulation<'a, T> {
    pub fn new(
        cfg: RoundConfig<T>,
        model: ModelPartition<T>,
        train: &'a LabeledDataset<T>,
        plan: &PartitionPlan,
        eval: &'a LabeledDataset<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        if plan.num_clients() != cfg.num_clients {
            return Err(config_err(format!(
                "partition has {} shards for {} clients",
                plan.num_clients(),
                cfg.num_clients
            )));
        }
        if model.client.topology().input_width() != train.n_inputs()
            || model.server.topology().output_width() != train.n_classes
        {
            return Err(config_err("model shape does not match the dataset"));
        }
        let clients = plan
            .shards
            .iter()
            .enumerate()
            .map(|(id, shard)| ClientState::new(id, &model, cfg.algorithm, cfg.optimizer, shard.clone(), cfg.seed))
            .collect::<Result<Vec<_>>>()?;
        let server = MainServerState::new(model.server.clone(), cfg.lr_server);
        Ok(Self {
            drift_reference: vec![None; cfg.num_clients],
            participation: vec![0; cfg.num_clients],
            cfg,
            train,
            eval,
            global: model,
            clients,
            server,
            round: 0,
        })
    }

    pub fn config(&self) -> &RoundConfig<T> {
        &self.cfg
    }

    pub fn global_model(&self) -> &ModelPartition<T> {
        &self.global
    }

    pub fn clients(&self) -> &[ClientState<T>] {
        &self.clients
    }

    pub fn server(&self) -> &MainServerState<T> {
        &self.server
    }

    /// Rounds each client took part in so far.
    pub fn participation_counts(&self) -> &[usize] {
        &self.participation
    }

    pub fn rounds_completed(&self) -> usize {
        self.round
    }

    /// The broadcast vector: `θ_c ++ θ_a`, or `θ_c` for SFLV2.
    fn global_local_params(&self) -> Vec<T> {
        if self.cfg.algorithm.uses_aux() {
            self.global.local_params()
        } else {
            self.global.client.params().to_vec()
        }
    }

    /// Runs one round and returns its metrics.
    pub fn step_round(&mut self) -> Result<RoundMetrics<T>> {
        let t = self.round;
        let cfg = self.cfg.clone();
        let before: Vec<LedgerCounters> = self.clients.iter().map(|c| c.ledger).collect();

        let participants = select_participants(
            cfg.num_clients,
            cfg.participation,
            seed::derive(cfg.seed, &[seed::TAG_PARTICIPANTS, t as u64]),
        )?;
        let broadcast = self.global_local_params();
        broadcast_init(&broadcast, &mut self.clients, &participants)?;

        let mut client_losses = Vec::with_capacity(participants.len());
        let mut grad_norm = T::zero();
        let mut server_norm = T::zero();
        for &id in &participants {
            let client = &mut self.clients[id];
            let out = match cfg.algorithm {
                Algorithm::Heron => client.local_round_zo(self.train, &cfg, t)?,
                Algorithm::CseFslFo => client.local_round_fo(self.train, &cfg, t)?,
                Algorithm::Sflv2 => client.local_round_sflv2(self.train, &cfg, t, &mut self.server)?,
            };
            for b in out.uploads {
                self.server.enqueue(b);
            }
            client_losses.push((id, out.mean_loss));
            grad_norm += out.mean_grad_norm;
            self.participation[id] += 1;
        }

        let stats = self.server.process_queue()?;
        if stats.batches > 0 {
            server_norm = stats.mean_grad_norm;
        }

        let drift = match cfg.drift_bins {
            Some(bins) => Some(self.drift_snapshot(&participants, &bins)?),
            None => None,
        };

        let mean = fed_aggregate(&mut self.clients, &participants)?;
        self.global.set_local_params(&mean)?;
        self.global.server = self.server.net.clone();

        let (train_loss, _) = self.global.evaluate(self.train)?;
        let (_, eval_accuracy) = self.global.evaluate(self.eval)?;
        let mut ledger = LedgerCounters::default();
        for (c, b) in self.clients.iter().zip(&before) {
            ledger = ledger.merge(&c.ledger.since(b));
        }
        self.round += 1;
        Ok(RoundMetrics {
            round: t,
            train_loss,
            eval_accuracy,
            client_grad_norm: grad_norm / T::of_usize(participants.len()),
            server_grad_norm: server_norm,
            participants,
            client_losses,
            ledger,
            drift,
        })
    }

    fn drift_snapshot(&mut self, participants: &[usize], bins: &BinSpec) -> Result<Vec<(usize, T)>> {
        let mut out = Vec::with_capacity(participants.len());
        for &id in participants {
            let client = &self.clients[id];
            let idx = client.probe_indices(self.cfg.batch_size);
            let current = client.smashed_outputs(self.train, &idx)?.into_vec();
            let reference = self.drift_reference[id].get_or_insert_with(|| current.clone());
            out.push((id, drift_statistic(&current, reference, bins)?));
        }
        Ok(out)
    }

    /// Runs the remaining configured rounds.
    pub fn run(&mut self) -> Result<Vec<RoundMetrics<T>>> {
        let mut metrics = Vec::with_capacity(self.cfg.rounds.saturating_sub(self.round));
        while self.round < self.cfg.rounds {
            metrics.push(self.step_round()?);
        }
        Ok(metrics)
    }

    /// Closed-form client ledger given how often the client participated.
    pub fn predicted_client_ledger(&self, id: usize) -> Result<LedgerCounters> {
        let client = self
            .clients
            .get(id)
            .ok_or_else(|| config_err(format!("no client with id {id}")))?;
        predict_client_ledger(
            &self.cfg,
            &self.global,
            client.effective_batch(self.cfg.batch_size),
            self.participation[id],
        )
    }
}

/// Closed-form prediction of one client's ledger after `rounds` participated
/// rounds with batch size `p`.
pub fn predict_client_ledger<T: Scalar>(
    cfg: &RoundConfig<T>,
    model: &ModelPartition<T>,
    p: usize,
    rounds: usize,
) -> Result<LedgerCounters> {
    if rounds == 0 {
        return Ok(LedgerCounters::default());
    }
    let alg = cfg.algorithm;
    let (client_topo, aux_topo) = (model.client.topology(), model.aux.topology());
    let inputs = CostModelInput {
        p: p as u64,
        q: model.cut_width() as u64,
        size_c: model.client.param_count() as u64,
        size_a: model.aux.param_count() as u64,
        f_c: client_topo.forward_macs(p),
        f_a: aux_topo.forward_macs(p),
        n_p: (cfg.probes + 1) as u64,
    };
    let mut comm = comm_per_round(alg, &inputs, cfg.local_steps, cfg.upload_period)?;
    let flops = flops_per_update(alg, &inputs)?;
    let (forward, backward) = match alg {
        Algorithm::Heron => (flops, 0),
        Algorithm::CseFslFo | Algorithm::Sflv2 => (flops / 3, 2 * flops / 3),
    };
    let hwm = match alg {
        Algorithm::Heron => 0,
        Algorithm::CseFslFo => client_topo.then(aux_topo)?.cache_scalars(p),
        Algorithm::Sflv2 => client_topo.cache_scalars(p),
    };
    let r = rounds as u64;
    let h = cfg.local_steps as u64;
    comm.uploaded *= r;
    comm.downloaded *= r;
    Ok(LedgerCounters {
        uploaded_scalars: comm.uploaded,
        downloaded_scalars: comm.downloaded,
        forward_ops: forward * h * r,
        backward_ops: backward * h * r,
        activation_cache_hwm: hwm,
        backward_calls: if alg == Algorithm::Heron { 0 } else { h * r },
    })
}

/// Outcome of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainingRun<T> {
    pub metrics: Vec<RoundMetrics<T>>,
    pub model: ModelPartition<T>,
    pub client_ledgers: Vec<LedgerCounters>,
    pub predicted_ledgers: Vec<LedgerCounters>,
    pub server_ledger: LedgerCounters,
}

/// Runs `cfg.rounds` rounds from `model` and collects metrics and ledgers.
pub fn run_training<T: Scalar>(
    cfg: &RoundConfig<T>,
    model: ModelPartition<T>,
    train: &LabeledDataset<T>,
    plan: &PartitionPlan,
    eval: &LabeledDataset<T>,
) -> Result<TrainingRun<T>> {
    let mut sim = Simulation::new(cfg.clone(), model, train, plan, eval)?;
    let metrics = sim.run()?;
    let predicted_ledgers = (0..cfg.num_clients)
        .map(|i| sim.predicted_client_ledger(i))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingRun {
        metrics,
        client_ledgers: sim.clients().iter().map(|c| c.ledger).collect(),
        predicted_ledgers,
        server_ledger: sim.server().ledger,
        model: sim.global_model().clone(),
    })
}
