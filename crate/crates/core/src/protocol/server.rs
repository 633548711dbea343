use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::ledger::LedgerCounters;
use crate::matrix::Matrix;
use crate::nn::{cross_entropy, CacheMode, DenseNet};
use crate::scalar::{norm2, Scalar};

/// Cut-layer activations and labels of one mini-batch, as uploaded by a client.
#[derive(Debug, Clone, PartialEq)]
pub struct SmashedBatch<T> {
    pub client: usize,
    pub activations: Matrix<T>,
    pub labels: Vec<usize>,
    pub round: usize,
    /// Local step (1-based) at which the batch was produced.
    pub step: usize,
}

impl<T: Scalar> SmashedBatch<T> {
    pub fn scalars(&self) -> u64 {
        self.activations.len() as u64
    }
}

#[derive(Debug, Clone)]
pub struct ServerStep<T> {
    pub loss: T,
    /// Gradient of the server loss with respect to the smashed data.
    pub cut_gradient: Matrix<T>,
    pub grad_norm: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerRoundStats<T> {
    pub batches: usize,
    pub mean_loss: T,
    pub mean_grad_norm: T,
}

/// Main-Server: the server submodel and a FIFO queue of smashed batches.
#[derive(Debug, Clone)]
pub struct MainServerState<T> {
    pub net: DenseNet<T>,
    pub lr: T,
    queue: VecDeque<SmashedBatch<T>>,
    pub ledger: LedgerCounters,
}

impl<T: Scalar> MainServerState<T> {
    pub fn new(net: DenseNet<T>, lr: T) -> Self {
        Self {
            net,
            lr,
            queue: VecDeque::new(),
            ledger: LedgerCounters::default(),
        }
    }

    pub fn enqueue(&mut self, batch: SmashedBatch<T>) {
        self.queue.push_back(batch);
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// One SGD step on one smashed batch.
    pub fn step(&mut self, batch: &SmashedBatch<T>) -> Result<ServerStep<T>> {
        let width = self.net.topology().input_width();
        if batch.activations.cols() != width {
            return Err(Error::Protocol {
                client: batch.client,
                reason: format!(
                    "smashed data width {} does not match server input width {width}",
                    batch.activations.cols()
                ),
            });
        }
        if !batch.activations.is_finite() {
            return Err(Error::Protocol {
                client: batch.client,
                reason: "smashed data contains non-finite values".into(),
            });
        }
        let (logits, cache) = self.net.forward(&batch.activations, CacheMode::Enabled)?;
        self.ledger.record_forward(cache.macs, cache.scalar_count);
        let (loss, dlogits) = cross_entropy(&logits, &batch.labels)?;
        let grads = self.net.backward(&cache, &dlogits)?;
        self.ledger.record_backward(grads.macs);
        self.net.params_add_inplace(&grads.params, -self.lr)?;
        Ok(ServerStep {
            loss,
            grad_norm: norm2(&grads.params),
            cut_gradient: grads.input,
        })
    }

    /// Drains the queue in arrival order, one update per batch.
    ///
    /// On error the offending batch is dropped and the rest stay queued.
    pub fn process_queue(&mut self) -> Result<ServerRoundStats<T>> {
        let mut stats = ServerRoundStats {
            batches: 0,
            mean_loss: T::zero(),
            mean_grad_norm: T::zero(),
        };
        while let Some(batch) = self.queue.pop_front() {
            let s = self.step(&batch)?;
            stats.batches += 1;
            stats.mean_loss += s.loss;
            stats.mean_grad_norm += s.grad_norm;
        }
        if stats.batches > 0 {
            let n = T::of_usize(stats.batches);
            stats.mean_loss /= n;
            stats.mean_grad_norm /= n;
        }
        Ok(stats)
    }
}
