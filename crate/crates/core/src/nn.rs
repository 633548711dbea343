//! Feed-forward dense networks with exact backpropagation.
//!
//! A [`DenseNet`] is a [`Topology`] (layer shapes and activations) plus one
//! flat parameter vector. Keeping the parameters flat lets the zeroth-order
//! estimator perturb them in place and lets the protocol average them without
//! any reshaping. Per layer, the layout is the weight matrix (`outputs × inputs`,
//! row-major) followed by the bias vector.
//!
//! The forward pass can run with the activation cache disabled. That is the
//! mode used by zeroth-order clients: nothing beyond the current layer's output
//! is kept alive, and the returned [`ForwardCache`] is empty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(T::zero()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre- and post-activation values.
    fn derivative<T: Scalar>(self, pre: T, post: T) -> T {
        match self {
            Activation::Identity => T::one(),
            // Subgradient 0 at the kink.
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - post * post,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(config(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    pub fn new(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.outputs * self.inputs + self.outputs
    }
}

/// Whether a forward pass keeps the activations needed by [`Topology::backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheMode {
    Enabled,
    Disabled,
}

/// Ordered, dimension-checked list of dense layers.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Topology {
    layers: Vec<LayerShape>,
}

impl Topology {
    pub fn new(layers: Vec<LayerShape>) -> Result<Self> {
        if layers.is_empty() {
            return Err(config("a network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(config(format!("layer {i} has a zero dimension")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(config(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].outputs,
                    i + 1,
                    pair[1].inputs
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Convenience constructor from a width chain, e.g. `[4, 8, 3]` with one
    /// activation per layer.
    pub fn chain(widths: &[usize], activations: &[Activation]) -> Result<Self> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 {
            return Err(config("need n+1 widths for n activations"));
        }
        Self::new(
            widths
                .windows(2)
                .zip(activations)
                .map(|(w, &a)| LayerShape::new(w[0], w[1], a))
                .collect(),
        )
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerShape::param_count).sum()
    }

    /// Multiply-accumulate count of one forward pass over `batch` samples.
    /// Bias additions and activations are not counted.
    pub fn forward_macs(&self, batch: usize) -> u64 {
        self.layers.iter().map(|l| (l.outputs * l.inputs * batch) as u64).sum()
    }

    /// Scalars held by an enabled cache: the batch input plus pre- and
    /// post-activations of every layer.
    pub fn cache_scalars(&self, batch: usize) -> u64 {
        let acts: usize = self.layers.iter().map(|l| 2 * l.outputs).sum();
        ((self.input_width() + acts) * batch) as u64
    }

    /// Concatenates two topologies, `self` first.
    pub fn then(&self, next: &Topology) -> Result<Topology> {
        let mut layers = self.layers.clone();
        layers.extend_from_slice(&next.layers);
        Topology::new(layers)
    }

    fn check_params<T>(&self, params: &[T]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(config(format!(
                "parameter vector has {} entries, network expects {}",
                params.len(),
                self.param_count()
            )));
        }
        Ok(())
    }

    /// Runs the network on `inputs` using externally supplied parameters.
    pub fn forward<T: Scalar>(
        &self,
        params: &[T],
        inputs: &Matrix<T>,
        mode: CacheMode,
    ) -> Result<(Matrix<T>, ForwardCache<T>)> {
        self.check_params(params)?;
        if inputs.cols() != self.input_width() {
            return Err(config(format!(
                "input width {} does not match network input width {}",
                inputs.cols(),
                self.input_width()
            )));
        }
        let batch = inputs.rows();
        let mut cache = ForwardCache::empty();
        if mode == CacheMode::Enabled {
            cache.enabled = true;
            cache.input = inputs.clone();
            cache.fingerprint = fingerprint(self, params);
            cache.scalar_count = self.cache_scalars(batch);
        }

        let mut offset = 0;
        let mut current: Option<Matrix<T>> = None;
        for layer in &self.layers {
            let (w, b) = layer_params(params, offset, layer);
            offset += layer.param_count();
            let x = current.as_ref().unwrap_or(inputs);
            let mut pre = Matrix::zeros(batch, layer.outputs);
            for r in 0..batch {
                let xr = x.row(r);
                let zr = pre.row_mut(r);
                for (o, z) in zr.iter_mut().enumerate() {
                    let wr = &w[o * layer.inputs..(o + 1) * layer.inputs];
                    let mut acc = b[o];
                    for (&wi, &xi) in wr.iter().zip(xr) {
                        acc += wi * xi;
                    }
                    *z = acc;
                }
            }
            cache.macs += (batch * layer.outputs * layer.inputs) as u64;
            let post = match mode {
                CacheMode::Disabled => {
                    let mut post = pre;
                    if layer.activation != Activation::Identity {
                        for v in post.as_mut_slice() {
                            *v = layer.activation.apply(*v);
                        }
                    }
                    post
                }
                CacheMode::Enabled => {
                    let mut post = pre.clone();
                    for v in post.as_mut_slice() {
                        *v = layer.activation.apply(*v);
                    }
                    cache.pre.push(pre);
                    post
                }
            };
            if mode == CacheMode::Enabled {
                cache.post.push(post.clone());
            }
            current = Some(post);
        }
        Ok((current.expect("non-empty topology"), cache))
    }

    /// Exact gradients of a scalar loss given `dlogits = dL/d(outputs)`.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &ForwardCache<T>,
        dlogits: &Matrix<T>,
    ) -> Result<Gradients<T>> {
        self.check_params(params)?;
        if !cache.enabled {
            return Err(Error::State(
                "backward needs a cache produced with caching enabled".into(),
            ));
        }
        if cache.post.len() != self.layers.len() || cache.fingerprint != fingerprint(self, params) {
            return Err(Error::State(
                "cache is stale: it was produced by a different network or parameters".into(),
            ));
        }
        let batch = cache.input.rows();
        if dlogits.rows() != batch || dlogits.cols() != self.output_width() {
            return Err(config(format!(
                "dlogits is {}×{}, expected {}×{}",
                dlogits.rows(),
                dlogits.cols(),
                batch,
                self.output_width()
            )));
        }

        let mut grads = vec![T::zero(); params.len()];
        let mut macs = 0u64;
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.param_count();
                Some(o)
            })
            .collect();

        let mut upstream = dlogits.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[li];
            let post = &cache.post[li];
            let x = if li == 0 { &cache.input } else { &cache.post[li - 1] };
            let mut dz = upstream;
            for ((d, &p), &a) in dz.as_mut_slice().iter_mut().zip(pre.as_slice()).zip(post.as_slice()) {
                *d *= layer.activation.derivative(p, a);
            }

            let (w, _) = layer_params(params, offsets[li], layer);
            let (gw, gb) =
                grads[offsets[li]..offsets[li] + layer.param_count()].split_at_mut(layer.outputs * layer.inputs);
            let mut dx = Matrix::zeros(batch, layer.inputs);
            for r in 0..batch {
                let xr = x.row(r);
                let dzr = dz.row(r);
                let dxr = dx.row_mut(r);
                for (o, &g) in dzr.iter().enumerate() {
                    gb[o] += g;
                    let wr = &w[o * layer.inputs..(o + 1) * layer.inputs];
                    let gwr = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    for i in 0..layer.inputs {
                        gwr[i] += g * xr[i];
                        dxr[i] += g * wr[i];
                    }
                }
            }
            macs += 2 * (batch * layer.outputs * layer.inputs) as u64;
            upstream = dx;
        }

        Ok(Gradients {
            params: grads,
            input: upstream,
            macs,
        })
    }
}

fn layer_params<'a, T>(params: &'a [T], offset: usize, layer: &LayerShape) -> (&'a [T], &'a [T]) {
    let nw = layer.outputs * layer.inputs;
    (
        &params[offset..offset + nw],
        &params[offset + nw..offset + nw + layer.outputs],
    )
}

/// FNV-1a over topology and parameter bits; identifies the network a cache
/// belongs to.
fn fingerprint<T: Scalar>(topology: &Topology, params: &[T]) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01B3;
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    let mut feed = |v: u64| {
        h ^= v;
        h = h.wrapping_mul(PRIME);
    };
    for l in &topology.layers {
        feed(l.inputs as u64);
        feed(l.outputs as u64);
        feed(l.activation as u64);
    }
    for p in params {
        feed(p.as_f64().to_bits());
    }
    h
}

/// Activations kept by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    enabled: bool,
    input: Matrix<T>,
    pre: Vec<Matrix<T>>,
    post: Vec<Matrix<T>>,
    fingerprint: u64,
    /// Activation scalars retained; zero when caching was disabled.
    pub scalar_count: u64,
    /// Multiply-accumulates executed by the pass that produced this cache.
    pub macs: u64,
}

impl<T: Scalar> ForwardCache<T> {
    fn empty() -> Self {
        Self {
            enabled: false,
            input: Matrix::zeros(0, 0),
            pre: Vec::new(),
            post: Vec::new(),
            fingerprint: 0,
            scalar_count: 0,
            macs: 0,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// Post-activation output of layer `index`, if cached.
    pub fn layer_output(&self, index: usize) -> Option<&Matrix<T>> {
        self.post.get(index)
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// Flat gradient, same layout as the parameter vector.
    pub params: Vec<T>,
    /// Gradient with respect to the network input (the cut-layer gradient
    /// when the network is a server submodel).
    pub input: Matrix<T>,
    pub macs: u64,
}

/// Inputs plus integer class labels for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Matrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(config("batch must contain at least one sample"));
        }
        if labels.len() != inputs.rows() {
            return Err(config(format!("{} labels for {} inputs", labels.len(), inputs.rows())));
        }
        Ok(Self { inputs, labels })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// A topology together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet<T> {
    topology: Topology,
    params: Vec<T>,
}

impl<T: Scalar> DenseNet<T> {
    pub fn zeros(topology: Topology) -> Self {
        let d = topology.param_count();
        Self {
            topology,
            params: vec![T::zero(); d],
        }
    }

    pub fn from_params(topology: Topology, params: Vec<T>) -> Result<Self> {
        topology.check_params(&params)?;
        Ok(Self { topology, params })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random<R: Rng + ?Sized>(topology: Topology, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(topology.param_count());
        for l in topology.layers() {
            let limit = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            params.extend((0..l.inputs * l.outputs).map(|_| T::of(rng.random_range(-limit..limit))));
            params.extend(std::iter::repeat_n(T::zero(), l.outputs));
        }
        Self { topology, params }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Disjoint borrows of the topology and the parameters, for evaluating the
    /// network while its parameters are perturbed in place.
    pub fn split_mut(&mut self) -> (&Topology, &mut [T]) {
        (&self.topology, &mut self.params)
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        self.topology.check_params(params)?;
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// `params += scale * delta`.
    pub fn params_add_inplace(&mut self, delta: &[T], scale: T) -> Result<()> {
        self.topology.check_params(delta)?;
        for (p, &d) in self.params.iter_mut().zip(delta) {
            *p += scale * d;
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &Matrix<T>, mode: CacheMode) -> Result<(Matrix<T>, ForwardCache<T>)> {
        self.topology.forward(&self.params, inputs, mode)
    }

    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Matrix<T>) -> Result<Gradients<T>> {
        self.topology.backward(&self.params, cache, dlogits)
    }
}

/// Mean cross-entropy of `softmax(logits)` against `labels`, with its exact
/// gradient.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    let (loss, probs) = softmax_nll(logits, labels)?;
    let batch = T::of_usize(labels.len());
    let mut d = probs;
    for (r, &y) in labels.iter().enumerate() {
        let row = d.row_mut(r);
        row[y] -= T::one();
        for v in row.iter_mut() {
            *v /= batch;
        }
    }
    Ok((loss, d))
}

/// Loss only; used on forward-only paths.
pub fn cross_entropy_loss<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<T> {
    check_logits(logits, labels)?;
    let mut total = T::zero();
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        total += lse - row[y];
    }
    Ok(total / T::of_usize(labels.len()))
}

fn check_logits<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<()> {
    if logits.cols() < 2 {
        return Err(config("cross-entropy needs at least two classes"));
    }
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(config(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(config(format!("label {y} out of range for {} classes", logits.cols())));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(())
}

fn softmax_nll<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    check_logits(logits, labels)?;
    let mut probs = logits.clone();
    let mut total = T::zero();
    for (r, &y) in labels.iter().enumerate() {
        let row = probs.row_mut(r);
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        total += s.ln() + m - logits.get(r, y);
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok((total / T::of_usize(labels.len()), probs))
}

/// Fraction of rows whose arg-max equals the label.
pub fn accuracy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(logits.row(r)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
