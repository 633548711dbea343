use crate::data::{LabeledDataset, ShardSampler};
use crate::error::{config, Error, Result};
use crate::ledger::LedgerCounters;
use crate::matrix::Matrix;
use crate::nn::{cross_entropy, cross_entropy_loss, CacheMode, DenseNet, Topology};
use crate::scalar::{norm2, Scalar};
use crate::seed;
use crate::zo::{zo_estimate, PerturbationTicket};

use super::config::{Algorithm, ClientOptimizer, RoundConfig};
use super::model::ModelPartition;
use super::server::{MainServerState, SmashedBatch};

/// SGD or Adam over a flat parameter vector.
#[derive(Debug, Clone)]
struct LocalOptimizer<T> {
    kind: ClientOptimizer,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> LocalOptimizer<T> {
    fn new(kind: ClientOptimizer, d: usize) -> Self {
        let (m, v) = match kind {
            ClientOptimizer::Sgd => (Vec::new(), Vec::new()),
            ClientOptimizer::Adam { .. } => (vec![T::zero(); d], vec![T::zero(); d]),
        };
        Self { kind, m, v, t: 0 }
    }

    fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = T::zero());
        self.v.iter_mut().for_each(|x| *x = T::zero());
        self.t = 0;
    }

    fn step(&mut self, params: &mut [T], grad: &[T], lr: T) {
        match self.kind {
            ClientOptimizer::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            ClientOptimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
                let c1 = T::one() - b1.powi(self.t);
                let c2 = T::one() - b2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
                    self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

/// What one client produced during one round.
#[derive(Debug, Clone)]
pub struct ClientRoundOutput<T> {
    pub uploads: Vec<SmashedBatch<T>>,
    /// Mean local loss over the round's steps (auxiliary head, or the server
    /// loss for SFLV2).
    pub mean_loss: T,
    pub mean_grad_norm: T,
}

/// One federated client: its local copy of `θ_c` (and `θ_a`), its shard and
/// its resource ledger.
#[derive(Debug, Clone)]
pub struct ClientState<T> {
    pub id: usize,
    /// `θ_c ++ θ_a` as one network; just `θ_c` for SFLV2.
    local: DenseNet<T>,
    client_topology: Topology,
    aux_topology: Option<Topology>,
    client_len: usize,
    sampler: ShardSampler,
    seed: u64,
    optimizer: LocalOptimizer<T>,
    pub ledger: LedgerCounters,
}

impl<T: Scalar> ClientState<T> {
    pub fn new(
        id: usize,
        model: &ModelPartition<T>,
        algorithm: Algorithm,
        optimizer: ClientOptimizer,
        shard: Vec<usize>,
        master_seed: u64,
    ) -> Result<Self> {
        if shard.is_empty() {
            return Err(config(format!("client {id} has an empty shard")));
        }
        let client_topology = model.client.topology().clone();
        let (local, aux_topology) = if algorithm.uses_aux() {
            let topo = client_topology.then(model.aux.topology())?;
            (
                DenseNet::from_params(topo, model.local_params())?,
                Some(model.aux.topology().clone()),
            )
        } else {
            (model.client.clone(), None)
        };
        let d = local.param_count();
        Ok(Self {
            id,
            client_len: model.client.param_count(),
            local,
            client_topology,
            aux_topology,
            sampler: ShardSampler::new(shard, seed::derive(master_seed, &[seed::TAG_SHUFFLE, id as u64]))?,
            seed: master_seed,
            optimizer: LocalOptimizer::new(optimizer, d),
            ledger: LedgerCounters::default(),
        })
    }

    /// `θ_l`: client parameters followed by auxiliary parameters.
    pub fn local_params(&self) -> &[T] {
        self.local.params()
    }

    pub fn client_params(&self) -> &[T] {
        &self.local.params()[..self.client_len]
    }

    pub fn aux_params(&self) -> &[T] {
        &self.local.params()[self.client_len..]
    }

    pub fn client_net(&self) -> DenseNet<T> {
        DenseNet::from_params(self.client_topology.clone(), self.client_params().to_vec())
            .expect("client slice matches its topology")
    }

    pub fn aux_net(&self) -> Option<DenseNet<T>> {
        self.aux_topology.as_ref().map(|t| {
            DenseNet::from_params(t.clone(), self.aux_params().to_vec()).expect("aux slice matches its topology")
        })
    }

    pub fn cut_width(&self) -> usize {
        self.client_topology.output_width()
    }

    pub fn shard_len(&self) -> usize {
        self.sampler.shard_len()
    }

    /// Batch size this client actually uses (`p`).
    pub fn effective_batch(&self, batch_size: usize) -> usize {
        self.sampler.effective_batch(batch_size)
    }

    pub fn client_topology(&self) -> &Topology {
        &self.client_topology
    }

    pub fn aux_topology(&self) -> Option<&Topology> {
        self.aux_topology.as_ref()
    }

    /// Overwrites the local model with broadcast parameters and resets the
    /// local optimizer state. Does not touch the ledger.
    pub fn load(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.local.param_count() {
            return Err(config(format!(
                "client {} expects {} parameters, broadcast has {}",
                self.id,
                self.local.param_count(),
                params.len()
            )));
        }
        self.local.set_params(params)?;
        self.optimizer.reset();
        Ok(())
    }

    /// Cut-layer outputs of the current client submodel on the given rows.
    pub fn smashed_outputs(&self, data: &LabeledDataset<T>, idx: &[usize]) -> Result<Matrix<T>> {
        let inputs = data.inputs.select_rows(idx);
        Ok(self
            .client_topology
            .forward(self.client_params(), &inputs, CacheMode::Disabled)?
            .0)
    }

    /// First `n` indices of the shard in ascending order.
    pub fn probe_indices(&self, n: usize) -> Vec<usize> {
        self.sampler.sorted_prefix(n)
    }

    /// `h` zeroth-order local steps: forward passes only, no activation cache.
    pub fn local_round_zo(
        &mut self,
        data: &LabeledDataset<T>,
        cfg: &RoundConfig<T>,
        round: usize,
    ) -> Result<ClientRoundOutput<T>> {
        let aux_topology = self
            .aux_topology
            .as_ref()
            .ok_or_else(|| config("zeroth-order clients need an auxiliary head"))?;
        let backward_before = self.ledger.backward_calls;
        let q = self.cut_width();
        let mut uploads = Vec::with_capacity(cfg.uploads_per_round());
        let (mut loss_sum, mut norm_sum) = (T::zero(), T::zero());
        for step in 1..=cfg.local_steps {
            let idx = self.sampler.next_batch(cfg.batch_size);
            let batch = data.batch(&idx)?;
            let ticket = PerturbationTicket::new(
                seed::derive(
                    self.seed,
                    &[seed::TAG_PERTURB, round as u64, self.id as u64, step as u64],
                ),
                cfg.mu,
                cfg.probes,
                self.local.param_count(),
            )?;
            let client_topology = &self.client_topology;
            let client_len = self.client_len;
            let (_, params) = self.local.split_mut();
            let mut macs = 0u64;
            let mut smashed: Option<Matrix<T>> = None;
            let estimate = zo_estimate(params, &ticket, |p| {
                let (s, c1) = client_topology.forward(&p[..client_len], &batch.inputs, CacheMode::Disabled)?;
                let (logits, c2) = aux_topology.forward(&p[client_len..], &s, CacheMode::Disabled)?;
                macs += c1.macs + c2.macs;
                // The first evaluation is the unperturbed point.
                if smashed.is_none() {
                    smashed = Some(s);
                }
                cross_entropy_loss(&logits, &batch.labels)
            })
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("client {}: {msg}", self.id)),
                other => other,
            })?;
            self.ledger.record_forward(macs, 0);
            self.optimizer.step(params, &estimate.vector, cfg.lr_client);
            loss_sum += estimate.base_loss;
            norm_sum += norm2(&estimate.vector);
            if step % cfg.upload_period == 0 {
                let activations = smashed.expect("base evaluation ran");
                self.ledger.charge_upload((activations.rows() * q) as u64);
                uploads.push(SmashedBatch {
                    client: self.id,
                    activations,
                    labels: batch.labels,
                    round,
                    step,
                });
            }
        }
        assert_eq!(
            self.ledger.backward_calls, backward_before,
            "zeroth-order client ran a backward pass"
        );
        let h = T::of_usize(cfg.local_steps);
        Ok(ClientRoundOutput {
            uploads,
            mean_loss: loss_sum / h,
            mean_grad_norm: norm_sum / h,
        })
    }

    /// `h` first-order local steps through the auxiliary head; same upload
    /// schedule as the zeroth-order round.
    pub fn local_round_fo(
        &mut self,
        data: &LabeledDataset<T>,
        cfg: &RoundConfig<T>,
        round: usize,
    ) -> Result<ClientRoundOutput<T>> {
        if self.aux_topology.is_none() {
            return Err(config("decoupled first-order clients need an auxiliary head"));
        }
        let cut_layer = self.client_topology.layers().len() - 1;
        let q = self.cut_width();
        let mut uploads = Vec::with_capacity(cfg.uploads_per_round());
        let (mut loss_sum, mut norm_sum) = (T::zero(), T::zero());
        for step in 1..=cfg.local_steps {
            let idx = self.sampler.next_batch(cfg.batch_size);
            let batch = data.batch(&idx)?;
            let (logits, cache) = self.local.forward(&batch.inputs, CacheMode::Enabled)?;
            self.ledger.record_forward(cache.macs, cache.scalar_count);
            let (loss, dlogits) = cross_entropy(&logits, &batch.labels)
                .map_err(|e| Error::Numeric(format!("client {}: {e}", self.id)))?;
            let grads = self.local.backward(&cache, &dlogits)?;
            self.ledger.record_backward(grads.macs);
            self.optimizer
                .step(self.local.params_mut(), &grads.params, cfg.lr_client);
            loss_sum += loss;
            norm_sum += norm2(&grads.params);
            if step % cfg.upload_period == 0 {
                let activations = cache
                    .layer_output(cut_layer)
                    .expect("cache holds the cut layer")
                    .clone();
                self.ledger.charge_upload((activations.rows() * q) as u64);
                uploads.push(SmashedBatch {
                    client: self.id,
                    activations,
                    labels: batch.labels,
                    round,
                    step,
                });
            }
        }
        let h = T::of_usize(cfg.local_steps);
        Ok(ClientRoundOutput {
            uploads,
            mean_loss: loss_sum / h,
            mean_grad_norm: norm_sum / h,
        })
    }

    /// SFLV2 round: every step uploads smashed data, the server updates
    /// immediately and returns the cut-layer gradient, the client backprops it.
    pub fn local_round_sflv2(
        &mut self,
        data: &LabeledDataset<T>,
        cfg: &RoundConfig<T>,
        round: usize,
        server: &mut MainServerState<T>,
    ) -> Result<ClientRoundOutput<T>> {
        let q = self.cut_width();
        let (mut loss_sum, mut norm_sum) = (T::zero(), T::zero());
        for step in 1..=cfg.local_steps {
            let idx = self.sampler.next_batch(cfg.batch_size);
            let batch = data.batch(&idx)?;
            let (smashed, cache) = self.local.forward(&batch.inputs, CacheMode::Enabled)?;
            self.ledger.record_forward(cache.macs, cache.scalar_count);
            let payload = (smashed.rows() * q) as u64;
            self.ledger.charge_upload(payload);
            let outcome = server.step(&SmashedBatch {
                client: self.id,
                activations: smashed,
                labels: batch.labels,
                round,
                step,
            })?;
            self.ledger.charge_download(payload);
            let grads = self.local.backward(&cache, &outcome.cut_gradient)?;
            self.ledger.record_backward(grads.macs);
            self.optimizer
                .step(self.local.params_mut(), &grads.params, cfg.lr_client);
            loss_sum += outcome.loss;
            norm_sum += norm2(&grads.params);
        }
        let h = T::of_usize(cfg.local_steps);
        Ok(ClientRoundOutput {
            uploads: Vec::new(),
            mean_loss: loss_sum / h,
            mean_grad_norm: norm_sum / h,
        })
    }
}
