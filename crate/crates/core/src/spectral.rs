//! Hessian-vector products, stochastic Lanczos quadrature and effective rank.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{config, Error, Result};
use crate::scalar::{dot, norm2, Scalar};
use crate::seed;

/// Symmetric finite-difference Hessian-vector product
/// `(∇L(θ + εv) − ∇L(θ − εv)) / 2ε`. `theta` is only read.
pub fn hvp<T, G>(mut grad_fn: G, theta: &[T], v: &[T], eps: T) -> Result<Vec<T>>
where
    T: Scalar,
    G: FnMut(&[T]) -> Result<Vec<T>>,
{
    if v.len() != theta.len() {
        return Err(config(format!(
            "direction has {} entries, parameters {}",
            v.len(),
            theta.len()
        )));
    }
    if !(eps > T::zero()) {
        return Err(config("eps must be positive"));
    }
    let shifted = |sign: T| -> Vec<T> { theta.iter().zip(v).map(|(&t, &vi)| t + sign * eps * vi).collect() };
    let plus = grad_fn(&shifted(T::one()))?;
    let minus = grad_fn(&shifted(-T::one()))?;
    if plus.len() != theta.len() || minus.len() != theta.len() {
        return Err(config("gradient length does not match parameter count"));
    }
    let two_eps = eps + eps;
    let out: Vec<T> = plus.iter().zip(&minus).map(|(&a, &b)| (a - b) / two_eps).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite Hessian-vector product".into()));
    }
    Ok(out)
}

/// Ritz values and quadrature weights from one Lanczos run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpectrum<T> {
    pub nodes: Vec<T>,
    /// Squared first components of the Ritz vectors; they sum to one.
    pub weights: Vec<T>,
    /// Lanczos steps completed (fewer than requested after a breakdown).
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumEstimate<T> {
    pub per_probe: Vec<ProbeSpectrum<T>>,
    pub dim: usize,
    pub requested_steps: usize,
}

impl<T: Scalar> SpectrumEstimate<T> {
    pub fn probes(&self) -> usize {
        self.per_probe.len()
    }

    /// True if any probe stopped early on an invariant subspace.
    pub fn broke_down(&self) -> bool {
        self.per_probe.iter().any(|p| p.steps < self.requested_steps)
    }

    /// All nodes with weights averaged over probes.
    pub fn density(&self) -> Vec<(T, T)> {
        let n = T::of_usize(self.per_probe.len());
        self.per_probe
            .iter()
            .flat_map(|p| p.nodes.iter().zip(&p.weights).map(move |(&x, &w)| (x, w / n)))
            .collect()
    }

    /// Estimate of `tr(H^k) / d`.
    pub fn moment(&self, k: i32) -> T {
        self.density().into_iter().map(|(x, w)| w * x.powi(k)).sum()
    }

    pub fn max_node(&self) -> T {
        self.per_probe
            .iter()
            .flat_map(|p| p.nodes.iter().copied())
            .fold(T::neg_infinity(), T::max)
    }

    /// Two whitespace-separated columns, `node weight`, one line per node.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (x, w) in self.density() {
            writeln!(out, "{:.12e} {:.12e}", x.as_f64(), w.as_f64()).expect("writing to a String");
        }
        out
    }
}

/// Stochastic Lanczos quadrature of the spectral density of a symmetric
/// operator given as a matrix-vector product.
///
/// Each probe starts from a normalized Rademacher vector and runs up to `m`
/// steps with full reorthogonalization.
pub fn lanczos_density<T, F>(
    mut op: F,
    d: usize,
    m: usize,
    n_probe: usize,
    seed_value: u64,
) -> Result<SpectrumEstimate<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<Vec<T>>,
{
    if d == 0 || m == 0 || m > d {
        return Err(config(format!("need 1 <= m <= d, got m={m}, d={d}")));
    }
    if n_probe == 0 {
        return Err(config("need at least one probe"));
    }
    let per_probe = (0..n_probe)
        .map(|probe| {
            let mut rng = seed::rng(seed::derive(seed_value, &[probe as u64]));
            let scale = T::one() / T::of_usize(d).sqrt();
            let start: Vec<T> = (0..d)
                .map(|_| if rng.random::<bool>() { scale } else { -scale })
                .collect();
            lanczos_probe(&mut op, start, m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectrumEstimate {
        per_probe,
        dim: d,
        requested_steps: m,
    })
}

fn lanczos_probe<T, F>(op: &mut F, start: Vec<T>, m: usize) -> Result<ProbeSpectrum<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<Vec<T>>,
{
    let d = start.len();
    let mut basis: Vec<Vec<T>> = vec![start];
    let mut alphas: Vec<T> = Vec::with_capacity(m);
    let mut betas: Vec<T> = Vec::with_capacity(m);
    let mut scale = T::zero();
    for j in 0..m {
        let v = &basis[j];
        let mut w = op(v)?;
        if w.len() != d {
            return Err(config("operator output length does not match d"));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite operator output".into()));
        }
        let alpha = dot(&w, v);
        alphas.push(alpha);
        scale = scale.max(alpha.abs()).max(norm2(&w));
        // Two passes of classical Gram-Schmidt against the whole basis.
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                for (wi, &bi) in w.iter_mut().zip(b) {
                    *wi -= c * bi;
                }
            }
        }
        if j + 1 == m {
            break;
        }
        let beta = norm2(&w);
        if beta <= T::of(1e-10) * scale.max(T::min_positive_value()) {
            break;
        }
        for wi in &mut w {
            *wi /= beta;
        }
        betas.push(beta);
        basis.push(w);
    }
    let steps = alphas.len();
    let (nodes, first) = tridiagonal_eigen(alphas, betas)?;
    Ok(ProbeSpectrum {
        nodes,
        weights: first.into_iter().map(|z| z * z).collect(),
        steps,
    })
}

/// Eigenvalues of the symmetric tridiagonal matrix with diagonal `diag` and
/// off-diagonal `off`, plus the first component of each eigenvector.
/// Implicit QL with Wilkinson shifts, tracking only the first row of the
/// eigenvector matrix.
pub fn tridiagonal_eigen<T: Scalar>(mut diag: Vec<T>, off: Vec<T>) -> Result<(Vec<T>, Vec<T>)> {
    let n = diag.len();
    if off.len() + 1 != n.max(1) {
        return Err(config("off-diagonal must have n-1 entries"));
    }
    let mut e = off;
    e.push(T::zero());
    let mut z0 = vec![T::zero(); n];
    if n > 0 {
        z0[0] = T::one();
    }
    let two = T::of(2.0);
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = diag[m].abs() + diag[m + 1].abs();
                if e[m].abs() <= T::epsilon() * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 100 {
                return Err(Error::Spectral("tridiagonal QL did not converge".into()));
            }
            let mut g = (diag[l + 1] - diag[l]) / (two * e[l]);
            let mut r = g.hypot(T::one());
            g = diag[m] - diag[l] + e[l] / (g + if g >= T::zero() { r.abs() } else { -r.abs() });
            let (mut s, mut c, mut p) = (T::one(), T::one(), T::zero());
            let mut deflated = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == T::zero() {
                    diag[i + 1] -= p;
                    e[m] = T::zero();
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = diag[i + 1] - p;
                r = (diag[i] - g) * s + two * c * b;
                p = s * r;
                diag[i + 1] = g + p;
                g = c * r - b;
                let zf = z0[i + 1];
                z0[i + 1] = s * z0[i] + c * zf;
                z0[i] = c * z0[i] - s * zf;
            }
            if deflated {
                continue;
            }
            diag[l] -= p;
            e[l] = g;
            e[m] = T::zero();
        }
    }
    Ok((diag, z0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveRankReport<T> {
    pub trace: T,
    pub top: T,
    /// `trace / top`.
    pub kappa: T,
}

/// Effective rank from a density estimate; the trace is `d · E[λ]`.
pub fn effective_rank<T: Scalar>(spectrum: &SpectrumEstimate<T>) -> Result<EffectiveRankReport<T>> {
    let trace = T::of_usize(spectrum.dim) * spectrum.moment(1);
    rank_report(trace, spectrum.max_node())
}

/// Exact effective rank `Σλ / max λ` from explicit eigenvalues.
pub fn effective_rank_exact<T: Scalar>(eigenvalues: &[T]) -> Result<EffectiveRankReport<T>> {
    let top = eigenvalues.iter().copied().fold(T::neg_infinity(), T::max);
    rank_report(eigenvalues.iter().copied().sum(), top)
}

fn rank_report<T: Scalar>(trace: T, top: T) -> Result<EffectiveRankReport<T>> {
    if !(top > T::zero()) {
        return Err(Error::Spectral(
            "effective rank is undefined without a positive top eigenvalue".into(),
        ));
    }
    Ok(EffectiveRankReport {
        trace,
        top,
        kappa: trace / top,
    })
}
