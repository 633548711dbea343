//! Synthetic datasets and federated partitioning.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{config, Error, Result};
use crate::matrix::Matrix;
use crate::nn::Batch;
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    pub inputs: Matrix<T>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(inputs: Matrix<T>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(config(format!(
                "{} input rows for {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if n_classes < 2 {
            return Err(config("need at least two classes"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(config(format!("label {y} out of range for {n_classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.cols()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch<T>> {
        Batch::new(
            self.inputs.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn full_batch(&self) -> Result<Batch<T>> {
        Batch::new(self.inputs.clone(), self.labels.clone())
    }

    pub fn class_counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &i in idx {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    /// Writes the text exchange format: a header line `M n_in n_classes`, then
    /// one line per sample with `n_in` values followed by the integer label.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.len(), self.n_inputs(), self.n_classes);
        for r in 0..self.len() {
            for v in self.inputs.row(r) {
                write!(out, "{} ", v.as_f64()).expect("writing to a String");
            }
            writeln!(out, "{}", self.labels[r]).expect("writing to a String");
        }
        out
    }

    pub fn from_text<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let header = lines.next().ok_or_else(|| config("empty dataset file"))??;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| config(format!("bad header token '{t}'"))))
            .collect::<Result<_>>()?;
        let [m, n_in, n_classes] = dims[..] else {
            return Err(config("header must be 'M n_in n_classes'"));
        };
        let mut data = Vec::with_capacity(m * n_in);
        let mut labels = Vec::with_capacity(m);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != n_in + 1 {
                return Err(config(format!(
                    "line {}: expected {} fields, found {}",
                    lineno + 2,
                    n_in + 1,
                    toks.len()
                )));
            }
            for t in &toks[..n_in] {
                let v: f64 = t
                    .parse()
                    .map_err(|_| config(format!("line {}: bad value '{t}'", lineno + 2)))?;
                data.push(T::of(v));
            }
            labels.push(
                toks[n_in]
                    .parse()
                    .map_err(|_| config(format!("line {}: bad label", lineno + 2)))?,
            );
        }
        if labels.len() != m {
            return Err(config(format!("header declares {m} samples, found {}", labels.len())));
        }
        Self::new(Matrix::from_vec(m, n_in, data)?, labels, n_classes)
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub n_samples: usize,
    pub n_inputs: usize,
    pub n_classes: usize,
    /// Norm of every class mean.
    pub class_separation: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

/// Gaussian blobs. Class means are random directions scaled to
/// `class_separation`; labels are assigned round-robin so class counts differ
/// by at most one.
pub fn make_synthetic<T: Scalar>(spec: &BlobSpec) -> Result<LabeledDataset<T>> {
    if spec.n_classes < 2 {
        return Err(config("need at least two classes"));
    }
    if spec.n_samples == 0 || spec.n_inputs == 0 {
        return Err(config("dataset needs at least one sample and one feature"));
    }
    if !(spec.noise_sd >= 0.0) || !spec.class_separation.is_finite() {
        return Err(config("noise_sd must be non-negative and separation finite"));
    }
    let mut rng = seed::rng(seed::derive(spec.seed, &[seed::TAG_DATA]));
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            let z: Vec<f64> = (0..spec.n_inputs).map(|_| rng.sample(StandardNormal)).collect();
            let n = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            z.into_iter().map(|v| spec.class_separation * v / n).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(spec.n_samples * spec.n_inputs);
    let mut labels = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let y = i % spec.n_classes;
        for &m in &means[y] {
            let e: f64 = rng.sample(StandardNormal);
            data.push(T::of(m + spec.noise_sd * e));
        }
        labels.push(y);
    }
    LabeledDataset::new(
        Matrix::from_vec(spec.n_samples, spec.n_inputs, data)?,
        labels,
        spec.n_classes,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionMode {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub shards: Vec<Vec<usize>>,
    pub mode: PartitionMode,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    /// True when the shards are pairwise disjoint and cover `0..m`.
    pub fn is_disjoint_cover(&self, m: usize) -> bool {
        let mut seen = vec![false; m];
        for &i in self.shards.iter().flatten() {
            if i >= m || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

/// Maximum Dirichlet re-draws before giving up on non-empty shards.
pub const MAX_PARTITION_RETRIES: usize = 100;

pub fn partition<T: Scalar>(
    dataset: &LabeledDataset<T>,
    num_clients: usize,
    mode: PartitionMode,
    seed_value: u64,
) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return Err(config("need at least one client"));
    }
    if dataset.len() < num_clients {
        return Err(config(format!(
            "{} samples cannot fill {num_clients} non-empty shards",
            dataset.len()
        )));
    }
    let mut rng = seed::rng(seed::derive(seed_value, &[seed::TAG_PARTITION]));
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for c in &mut by_class {
        c.shuffle(&mut rng);
    }

    let shards = match mode {
        PartitionMode::Iid => {
            // Deal class-by-class round-robin; the running offset keeps totals
            // balanced as well as per-class counts.
            let mut shards = vec![Vec::new(); num_clients];
            let mut next = 0;
            for idx in by_class.iter().flatten() {
                shards[next].push(*idx);
                next = (next + 1) % num_clients;
            }
            shards
        }
        PartitionMode::Dirichlet { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(config(format!("Dirichlet alpha must be positive, got {alpha}")));
            }
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| config(e.to_string()))?;
            let mut attempt = 0;
            loop {
                let shards = dirichlet_split(&by_class, num_clients, &gamma, &mut rng);
                if shards.iter().all(|s| !s.is_empty()) {
                    break shards;
                }
                attempt += 1;
                if attempt >= MAX_PARTITION_RETRIES {
                    return Err(Error::Partition(format!(
                        "no Dirichlet(alpha={alpha}) draw gave every one of {num_clients} clients a \
                         sample after {MAX_PARTITION_RETRIES} attempts; use a larger dataset or alpha"
                    )));
                }
            }
        }
    };
    let mut shards = shards;
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(PartitionPlan {
        shards,
        mode,
        seed: seed_value,
    })
}

fn dirichlet_split<R: Rng + ?Sized>(
    by_class: &[Vec<usize>],
    num_clients: usize,
    gamma: &Gamma<f64>,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut shards = vec![Vec::new(); num_clients];
    for idx in by_class {
        let draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // Cut points from the cumulative proportions; the last client takes the rest.
        let n = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (client, &g) in draws.iter().enumerate() {
            cum += g;
            let end = if client + 1 == num_clients || total <= 0.0 {
                n
            } else {
                ((cum / total) * n as f64).floor() as usize
            }
            .clamp(start, n);
            shards[client].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    shards
}

/// Endless sequence of mini-batches over one shard: sequential passes over a
/// seeded shuffle, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct ShardSampler {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl ShardSampler {
    pub fn new(shard: Vec<usize>, seed: u64) -> Result<Self> {
        if shard.is_empty() {
            return Err(config("cannot sample from an empty shard"));
        }
        let mut s = Self {
            order: shard,
            pos: 0,
            epoch: 0,
            seed,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        let mut rng = seed::rng(seed::derive(self.seed, &[seed::TAG_SHUFFLE, self.epoch]));
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
    }

    pub fn shard_len(&self) -> usize {
        self.order.len()
    }

    /// The `n` smallest shard indices; a fixed probe set for diagnostics.
    pub fn sorted_prefix(&self, n: usize) -> Vec<usize> {
        let mut all = self.order.clone();
        all.sort_unstable();
        all.truncate(n);
        all
    }

    /// Batch size actually used: the configured size capped by the shard size.
    pub fn effective_batch(&self, batch_size: usize) -> usize {
        batch_size.min(self.order.len())
    }

    /// Next `effective_batch(batch_size)` indices, continuing into a freshly
    /// shuffled epoch when the current one runs out.
    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let b = self.effective_batch(batch_size);
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.pos = 0;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
