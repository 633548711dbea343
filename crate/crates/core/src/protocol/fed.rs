//! Fed-Server: broadcast, averaging and participant sampling.

use rand::seq::index;

use crate::error::{config, Error, Result};
use crate::scalar::Scalar;
use crate::seed;

use super::client::ClientState;
use super::config::BinSpec;

/// Loads the global local-model parameters into each listed client and charges
/// the download.
pub fn broadcast_init<T: Scalar>(global: &[T], clients: &mut [ClientState<T>], participants: &[usize]) -> Result<()> {
    for &id in participants {
        let client = clients
            .get_mut(id)
            .ok_or_else(|| config(format!("no client with id {id}")))?;
        client.load(global)?;
        client.ledger.charge_download(global.len() as u64);
    }
    Ok(())
}

/// Coordinate-wise mean, summed in the given order.
pub fn average_params<T: Scalar>(params: &[&[T]]) -> Result<Vec<T>> {
    let first = params.first().ok_or_else(|| config("need at least one participant"))?;
    let d = first.len();
    let mut sum = vec![T::zero(); d];
    for (k, p) in params.iter().enumerate() {
        if p.len() != d {
            return Err(Error::Protocol {
                client: k,
                reason: format!("parameter vector has {} entries, expected {d}", p.len()),
            });
        }
        for (s, &v) in sum.iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    let n = T::of_usize(params.len());
    for s in &mut sum {
        *s /= n;
    }
    Ok(sum)
}

/// Averages the participants' local models in ascending id order and charges
/// each participant the upload of its parameters.
pub fn fed_aggregate<T: Scalar>(clients: &mut [ClientState<T>], participants: &[usize]) -> Result<Vec<T>> {
    let mut ids = participants.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.iter().any(|&i| i >= clients.len()) {
        return Err(config("participant id out of range"));
    }
    let views: Vec<&[T]> = ids.iter().map(|&i| clients[i].local_params()).collect();
    let mean = average_params(&views).map_err(|e| match e {
        Error::Protocol { client, reason } => Error::Protocol {
            client: ids[client],
            reason,
        },
        other => other,
    })?;
    for &i in &ids {
        let n = clients[i].local_params().len() as u64;
        clients[i].ledger.charge_upload(n);
    }
    Ok(mean)
}

/// `max(1, round(fraction · n))` distinct ids drawn uniformly, sorted.
pub fn select_participants(n: usize, fraction: f64, round_seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(config("need at least one client"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(config(format!(
            "participation fraction must be in (0, 1], got {fraction}"
        )));
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    if k == n {
        return Ok((0..n).collect());
    }
    let mut rng = seed::rng(seed::derive(round_seed, &[seed::TAG_PARTICIPANTS]));
    let mut ids = index::sample(&mut rng, n, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// L1 distance between normalized histograms of two activation samples.
/// Values outside `[lo, hi)` fall into the edge bins. Ranges from 0
/// (identical histograms) to 2 (disjoint support).
pub fn drift_statistic<T: Scalar>(current: &[T], reference: &[T], bins: &BinSpec) -> Result<T> {
    if current.is_empty() || reference.is_empty() {
        return Err(config("drift needs non-empty samples"));
    }
    if bins.bins == 0 || !(bins.hi > bins.lo) {
        return Err(config("drift bins need hi > lo and at least one bin"));
    }
    let h = |xs: &[T]| -> Vec<f64> {
        let mut counts = vec![0f64; bins.bins];
        let width = (bins.hi - bins.lo) / bins.bins as f64;
        for &x in xs {
            let pos = ((x.as_f64() - bins.lo) / width).floor();
            let b = if pos.is_nan() {
                0.0
            } else {
                pos.clamp(0.0, (bins.bins - 1) as f64)
            };
            counts[b as usize] += 1.0;
        }
        let n = xs.len() as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        counts
    };
    let (a, b) = (h(current), h(reference));
    Ok(T::of(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()))
}
