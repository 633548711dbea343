//! Seeded perturbation directions and the two-point zeroth-order estimator.
//!
//! Directions are unit vectors `u = z / ‖z‖` with `z ~ N(0, I_d)`. A direction
//! is never stored beyond the probe that uses it; it is regenerated from
//! `(seed, probe_index)` whenever it is needed again. The estimator for `n_p`
//! probes sharing one base evaluation is
//!
//! ```text
//! g = 1/n_p · Σ_k  (d / μ) · [L(θ + μ u_k) − L(θ)] · u_k
//! ```
//!
//! which is unbiased for the gradient of the sphere-smoothed loss
//! `L^μ(θ) = E_u[L(θ + μ u)]`.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config, Error, Result};
use crate::scalar::{axpy, Scalar};

/// Everything needed to regenerate the perturbations of one estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationTicket<T> {
    pub seed: u64,
    pub mu: T,
    /// Number of two-point probes averaged.
    pub probes: usize,
    pub dim: usize,
}

impl<T: Scalar> PerturbationTicket<T> {
    pub fn new(seed: u64, mu: T, probes: usize, dim: usize) -> Result<Self> {
        if !(mu > T::zero() && mu.is_finite()) {
            return Err(config(format!("perturbation radius must be positive, got {mu}")));
        }
        if probes == 0 {
            return Err(config("at least one probe is required"));
        }
        if dim == 0 {
            return Err(config("dimension must be at least 1"));
        }
        Ok(Self { seed, mu, probes, dim })
    }

    /// Loss evaluations consumed by one estimate: one per probe plus the shared base.
    pub fn evals(&self) -> usize {
        self.probes + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZoGradEstimate<T> {
    pub vector: Vec<T>,
    pub evals_used: usize,
    /// `L(θ)` at the unperturbed point.
    pub base_loss: T,
}

fn direction_rng(seed: u64, probe_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(probe_index);
    rng
}

/// Writes the unit direction for `(seed, probe_index)` into `out`.
///
/// Two passes over the same stream: the first measures `‖z‖`, the second
/// writes `z / ‖z‖`. No buffer beyond `out` is used.
pub fn fill_direction<T: Scalar>(seed: u64, probe_index: u64, out: &mut [T]) -> Result<()> {
    if out.is_empty() {
        return Err(config("direction dimension must be at least 1"));
    }
    let mut rng = direction_rng(seed, probe_index);
    let norm = (0..out.len())
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * z
        })
        .sum::<f64>()
        .sqrt();
    // ‖z‖ = 0 has probability zero; this is unreachable in practice.
    if norm == 0.0 {
        return Err(Error::Numeric("degenerate direction draw".into()));
    }
    let mut rng = direction_rng(seed, probe_index);
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = T::of(z / norm);
    }
    Ok(())
}

pub fn sample_direction<T: Scalar>(seed: u64, probe_index: u64, d: usize) -> Result<Vec<T>> {
    let mut u = vec![T::zero(); d];
    fill_direction(seed, probe_index, &mut u)?;
    Ok(u)
}

/// Two-point estimate of `∇L` at `theta`.
///
/// `loss_fn` is called with the base point first and then once per probe with
/// `theta` perturbed in place. `theta` is restored bit-exactly from a saved
/// copy after every probe, including when `loss_fn` fails.
///
/// Transient memory is three `d`-vectors: the saved parameters, the current
/// direction and the accumulator.
pub fn zo_estimate<T, F>(theta: &mut [T], ticket: &PerturbationTicket<T>, mut loss_fn: F) -> Result<ZoGradEstimate<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T>,
{
    let d = theta.len();
    if d != ticket.dim {
        return Err(config(format!(
            "ticket dimension {} does not match parameter count {d}",
            ticket.dim
        )));
    }
    let base = loss_fn(theta)?;
    if !base.is_finite() {
        return Err(Error::Numeric("non-finite loss at the base point".into()));
    }

    let saved = theta.to_vec();
    let mut u = vec![T::zero(); d];
    let mut acc = vec![T::zero(); d];
    let scale = T::of_usize(d) / ticket.mu;
    for k in 0..ticket.probes {
        fill_direction(ticket.seed, k as u64, &mut u)?;
        for ((t, &s), &ui) in theta.iter_mut().zip(&saved).zip(&u) {
            *t = s + ticket.mu * ui;
        }
        let perturbed = loss_fn(theta);
        theta.copy_from_slice(&saved);
        let perturbed = perturbed?;
        if !perturbed.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss under probe {k}")));
        }
        axpy(scale * (perturbed - base), &u, &mut acc);
    }
    let n = T::of_usize(ticket.probes);
    for v in &mut acc {
        *v /= n;
    }
    Ok(ZoGradEstimate {
        vector: acc,
        evals_used: ticket.evals(),
        base_loss: base,
    })
}

/// Monte-Carlo estimate of `∇L^μ(θ)` with per-coordinate standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedGradient<T> {
    pub mean: Vec<T>,
    pub std_error: Vec<T>,
    pub samples: usize,
}

/// Reference estimate of the smoothed gradient.
///
/// Uses its own generator (`StdRng`), evaluates on a perturbed copy instead of
/// in place, and accumulates with Welford's update, so it shares no code path
/// with [`zo_estimate`] beyond the loss function.
pub fn smoothed_grad_oracle<T, F>(
    mut loss_fn: F,
    theta: &[T],
    mu: T,
    n_samples: usize,
    seed: u64,
) -> Result<SmoothedGradient<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T>,
{
    if n_samples == 0 {
        return Err(config("n_samples must be at least 1"));
    }
    if !(mu > T::zero() && mu.is_finite()) {
        return Err(config(format!("perturbation radius must be positive, got {mu}")));
    }
    let d = theta.len();
    if d == 0 {
        return Err(config("dimension must be at least 1"));
    }
    let base = loss_fn(theta)?;
    if !base.is_finite() {
        return Err(Error::Numeric("non-finite loss at the base point".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut z = vec![0f64; d];
    let mut x = theta.to_vec();
    let mut mean = vec![0f64; d];
    let mut m2 = vec![0f64; d];
    let df = d as f64;
    let muf = mu.as_f64();
    for n in 1..=n_samples {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        for ((xi, &ti), &zi) in x.iter_mut().zip(theta).zip(&z) {
            *xi = ti + mu * T::of(zi / norm);
        }
        let f = loss_fn(&x)?;
        if !f.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss under sample {}", n - 1)));
        }
        let coef = df * (f - base).as_f64() / muf;
        for i in 0..d {
            let sample = coef * z[i] / norm;
            let delta = sample - mean[i];
            mean[i] += delta / n as f64;
            m2[i] += delta * (sample - mean[i]);
        }
    }
    let std_error = m2
        .iter()
        .map(|&s| {
            if n_samples > 1 {
                T::of((s / (n_samples - 1) as f64 / n_samples as f64).sqrt())
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(SmoothedGradient {
        mean: mean.into_iter().map(T::of).collect(),
        std_error,
        samples: n_samples,
    })
}
