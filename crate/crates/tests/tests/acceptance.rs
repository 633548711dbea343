//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit when any
//! criterion fails. Runs without the libtest harness so every line prints.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use heron_sfl::error::Error;
use heron_sfl::ledger::{comm_per_update, flops_per_update, reconcile, CostModelInput};
use heron_sfl::matrix::Matrix;
use heron_sfl::nn::{cross_entropy, cross_entropy_loss, Activation, CacheMode, DenseNet, Topology};
use heron_sfl::protocol::Algorithm;
use heron_sfl::seed;
use heron_sfl::spectral::{effective_rank, effective_rank_exact, lanczos_density};
use heron_sfl::zo::{smoothed_grad_oracle, zo_estimate, PerturbationTicket};
use heron_sfl_cli::{prepare, run_arm, run_experiment, ArmOutput, ExperimentConfig, PartitionSection};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ALPHAS: [f64; 2] = [0.5, 5.0];

type Verdict = Result<String, String>;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name)).expect("shipped config parses")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- training runs

/// One experiment config run on every arm it lists.
struct Done {
    label: String,
    cfg: ExperimentConfig,
    shard_lens: Vec<usize>,
    arms: Vec<ArmOutput>,
}

impl Done {
    fn arm(&self, alg: Algorithm) -> &ArmOutput {
        self.arms.iter().find(|a| a.algorithm == alg).expect("arm was run")
    }
}

fn run_all(jobs: Vec<(String, ExperimentConfig)>) -> Vec<Done> {
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .into_iter()
            .map(|(label, cfg)| {
                s.spawn(move || {
                    let prepared = prepare(&cfg).unwrap_or_else(|e| panic!("{label}: {e}"));
                    let arms = cfg
                        .arms
                        .iter()
                        .map(|&alg| run_arm(&cfg, &prepared, alg).unwrap_or_else(|e| panic!("{label} {alg}: {e}")))
                        .collect();
                    Done {
                        shard_lens: prepared.plan.shards.iter().map(Vec::len).collect(),
                        label,
                        cfg,
                        arms,
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("run thread")).collect()
    })
}

fn parity_config(seed_value: u64, partition: PartitionSection) -> ExperimentConfig {
    let mut cfg = load("parity.toml");
    cfg.seed = seed_value;
    cfg.partition = partition;
    cfg.spectrum = None;
    cfg
}

fn partition_label(p: PartitionSection) -> String {
    match p {
        PartitionSection::Iid => "iid".to_string(),
        PartitionSection::Dirichlet { alpha } => format!("alpha={alpha}"),
    }
}

fn paired_jobs(partition: PartitionSection) -> Vec<(String, ExperimentConfig)> {
    SEEDS
        .iter()
        .map(|&s| {
            (
                format!("seed {s} {}", partition_label(partition)),
                parity_config(s, partition),
            )
        })
        .collect()
}

fn final_acc(done: &Done, alg: Algorithm) -> f64 {
    done.arm(alg).final_accuracy().expect("at least one round")
}

/// Small runs over every algorithm, client count, schedule and participation.
fn ledger_grid() -> Vec<Done> {
    let mut jobs = Vec::new();
    for clients in [1usize, 3, 5] {
        for (h, k) in [(1usize, 1usize), (4, 2), (6, 3)] {
            for participation in [1.0, 0.6] {
                let mut cfg = parity_config(7, PartitionSection::Iid);
                cfg.arms = vec![Algorithm::Heron, Algorithm::CseFslFo, Algorithm::Sflv2];
                cfg.round.rounds = 3;
                cfg.round.num_clients = clients;
                cfg.round.local_steps = h;
                cfg.round.upload_period = k;
                cfg.round.participation = participation;
                cfg.dataset.n_samples = 30 * clients;
                cfg.round.batch_size = 16;
                jobs.push((format!("N={clients} h={h} k={k} f={participation}"), cfg));
            }
        }
    }
    run_all(jobs)
}

// ------------------------------------------------------- independent cost model

/// Weights plus biases of a dense chain.
fn chain_params(widths: &[usize]) -> u64 {
    widths.windows(2).map(|w| ((w[0] + 1) * w[1]) as u64).sum()
}

/// Batch input plus pre- and post-activation of every layer.
fn chain_cache(widths: &[usize], batch: usize) -> u64 {
    (batch * (widths[0] + 2 * widths[1..].iter().sum::<usize>())) as u64
}

fn client_chain(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut w = vec![cfg.dataset.n_inputs];
    w.extend(&cfg.model.client_widths);
    w
}

fn aux_chain(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut w = vec![*cfg.model.client_widths.last().unwrap()];
    w.extend(&cfg.model.aux_hidden);
    w.push(cfg.dataset.n_classes);
    w
}

fn local_chain(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut w = client_chain(cfg);
    w.extend(&aux_chain(cfg)[1..]);
    w
}

/// Per-round `(upload, download)` scalars of one participating client.
fn round_comm(cfg: &ExperimentConfig, alg: Algorithm, shard_len: usize) -> (u64, u64) {
    let r = &cfg.round;
    let p = r.batch_size.min(shard_len) as u64;
    let q = *cfg.model.client_widths.last().unwrap() as u64;
    let sc = chain_params(&client_chain(cfg));
    let sa = chain_params(&aux_chain(cfg));
    match alg {
        Algorithm::Heron | Algorithm::CseFslFo => {
            let uploads = (r.local_steps / r.upload_period) as u64;
            (uploads * p * q + sc + sa, sc + sa)
        }
        Algorithm::Sflv2 => {
            let steps = r.local_steps as u64;
            (steps * p * q + sc, steps * p * q + sc)
        }
    }
}

// ------------------------------------------------------------------- criteria

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let d = 10;
    let c: Vec<f64> = (0..d).map(|i| (i as f64 - 4.5) * 0.3 + 0.05).collect();
    let c_inf = c.iter().fold(0f64, |m, v| m.max(v.abs()));
    let n = 200_000u64;
    let mut theta = vec![0.25; d];
    let mut mean = vec![0.0; d];
    for s in 0..n {
        let ticket = PerturbationTicket::new(seed::derive(11, &[s]), 1e-2, 1, d).map_err(|e| e.to_string())?;
        let g = zo_estimate(&mut theta, &ticket, |t: &[f64]| {
            Ok(c.iter().zip(t).map(|(a, b)| a * b).sum())
        })
        .map_err(|e| e.to_string())?;
        for (m, v) in mean.iter_mut().zip(&g.vector) {
            *m += v / n as f64;
        }
    }
    let worst = mean.iter().zip(&c).map(|(m, ci)| (m - ci).abs()).fold(0f64, f64::max) / c_inf;
    let elapsed = start.elapsed();
    check(
        worst <= 0.02 && elapsed < Duration::from_secs(30),
        format!(
            "linear loss d=10, {n} single-probe estimates: max |mean - c| = {:.3}% of |c|inf (limit 2%), {:.1}s (limit 30s)",
            100.0 * worst,
            elapsed.as_secs_f64()
        ),
    )
}

/// `½ θᵀAθ` with `A` diagonal plus a uniform coupling.
fn quadratic(t: &[f64]) -> heron_sfl::Result<f64> {
    let s: f64 = t.iter().sum();
    Ok(0.5
        * t.iter()
            .enumerate()
            .map(|(i, &x)| ((1.0 + i as f64) * x + 0.1 * s) * x)
            .sum::<f64>())
}

fn criterion_2() -> Verdict {
    let d = 10;
    let n = 1_000_000usize;
    let theta0: Vec<f64> = (0..d).map(|i| 0.5 - 0.1 * i as f64).collect();
    let mut parts = Vec::new();
    let mut ok = true;
    for (j, mu) in [1e-3, 1e-2].into_iter().enumerate() {
        let mut theta = theta0.clone();
        let mut mean = vec![0.0; d];
        for s in 0..n {
            let ticket = PerturbationTicket::new(seed::derive(22, &[j as u64, s as u64]), mu, 1, d)
                .map_err(|e| e.to_string())?;
            let g = zo_estimate(&mut theta, &ticket, quadratic).map_err(|e| e.to_string())?;
            for (m, v) in mean.iter_mut().zip(&g.vector) {
                *m += v / n as f64;
            }
        }
        let oracle = smoothed_grad_oracle(quadratic, &theta0, mu, n, 33 + j as u64).map_err(|e| e.to_string())?;
        let diff: f64 = mean
            .iter()
            .zip(&oracle.mean)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = oracle.mean.iter().map(|b| b * b).sum::<f64>().sqrt();
        let rel = diff / norm;
        ok &= rel < 0.01;
        parts.push(format!("mu={mu:e}: {:.3}%", 100.0 * rel));
    }
    check(
        ok,
        format!(
            "quadratic d=10, {n} samples each side, relative l2 gap {} (limit 1%)",
            parts.join(", ")
        ),
    )
}

fn fd_error(net: &DenseNet<f64>, x: &Matrix<f64>, y: &[usize]) -> f64 {
    const STEP: f64 = 1e-6;
    const FLOOR: f64 = 1e-8;
    let rel = |a: f64, b: f64| {
        let scale = a.abs().max(b.abs());
        if scale < FLOOR {
            0.0
        } else {
            (a - b).abs() / scale
        }
    };
    let loss = |n: &DenseNet<f64>, x: &Matrix<f64>| {
        let (logits, _) = n.forward(x, CacheMode::Disabled).unwrap();
        cross_entropy_loss(&logits, y).unwrap()
    };
    let (logits, cache) = net.forward(x, CacheMode::Enabled).unwrap();
    let (_, dlogits) = cross_entropy(&logits, y).unwrap();
    let grads = net.backward(&cache, &dlogits).unwrap();
    let mut worst = 0f64;
    let mut probe = net.clone();
    for i in 0..net.param_count() {
        let orig = net.params()[i];
        probe.params_mut()[i] = orig + STEP;
        let up = loss(&probe, x);
        probe.params_mut()[i] = orig - STEP;
        let down = loss(&probe, x);
        probe.params_mut()[i] = orig;
        worst = worst.max(rel((up - down) / (2.0 * STEP), grads.params[i]));
    }
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = x.as_slice()[i];
        xp.as_mut_slice()[i] = orig + STEP;
        let up = loss(net, &xp);
        xp.as_mut_slice()[i] = orig - STEP;
        let down = loss(net, &xp);
        xp.as_mut_slice()[i] = orig;
        worst = worst.max(rel((up - down) / (2.0 * STEP), grads.input.as_slice()[i]));
    }
    worst
}

fn criterion_3() -> Verdict {
    use Activation::*;
    let archs: Vec<(Vec<usize>, Vec<Activation>)> = vec![
        (vec![3, 2], vec![Identity]),
        (vec![4, 3], vec![Tanh]),
        (vec![5, 6, 4], vec![Tanh, Identity]),
        (vec![5, 4, 3], vec![Relu, Identity]),
        (vec![6, 8, 5, 4], vec![Tanh, Relu, Identity]),
        (vec![4, 6, 6, 6, 2], vec![Relu, Tanh, Relu, Identity]),
        (vec![10, 1, 3], vec![Tanh, Identity]),
        (vec![2, 16, 3], vec![Relu, Tanh]),
        (vec![10, 2, 4], vec![Tanh, Identity]),
    ];
    let mut worst = 0f64;
    let mut failing = Vec::new();
    for (n, (widths, acts)) in archs.iter().enumerate() {
        let topo = Topology::chain(widths, acts).map_err(|e| e.to_string())?;
        let classes = topo.output_width();
        let net = DenseNet::<f64>::random(topo, &mut seed::rng(100 + n as u64));
        let mut rng = seed::rng(200 + n as u64);
        let data = (0..5 * widths[0]).map(|_| rng.random_range(-1.5..1.5)).collect();
        let x = Matrix::from_vec(5, widths[0], data).map_err(|e| e.to_string())?;
        let y: Vec<usize> = (0..5).map(|_| rng.random_range(0..classes)).collect();
        let err = fd_error(&net, &x, &y);
        if err > 1e-4 {
            failing.push(format!("{widths:?}"));
        }
        worst = worst.max(err);
    }
    check(
        failing.is_empty(),
        format!(
            "{} architectures, worst per-coordinate rel err {worst:.2e} (limit 1e-4){}",
            archs.len(),
            if failing.is_empty() {
                String::new()
            } else {
                format!(", failing {}", failing.join(" "))
            }
        ),
    )
}

fn criterion_4() -> Verdict {
    let mut grid = Vec::new();
    for (a, p) in [1u64, 2, 32, 256].into_iter().enumerate() {
        for (b, q) in [1u64, 3, 64].into_iter().enumerate() {
            for n_p in [1u64, 2, 3, 11] {
                let k = (a * 12 + b * 4) as u64 + n_p;
                grid.push(CostModelInput {
                    p,
                    q,
                    size_c: 5 + 7 * k,
                    size_a: 1 + 3 * k,
                    f_c: 10 * k + 1,
                    f_a: 2 * k + 1,
                    n_p,
                });
            }
        }
    }
    let mut mismatches = 0;
    for i in &grid {
        let comm = |alg| comm_per_update(alg, i).unwrap();
        let flops = |alg| flops_per_update(alg, i).unwrap();
        let expected = [
            (comm(Algorithm::Sflv2), 2 * i.p * i.q + 2 * i.size_c),
            (comm(Algorithm::CseFslFo), i.p * i.q + 2 * (i.size_c + i.size_a)),
            (comm(Algorithm::Heron), i.p * i.q + 2 * (i.size_c + i.size_a)),
            (flops(Algorithm::Sflv2), 3 * i.f_c),
            (flops(Algorithm::CseFslFo), 3 * (i.f_c + i.f_a)),
            (flops(Algorithm::Heron), i.n_p * (i.f_c + i.f_a)),
            (comm(Algorithm::Heron), comm(Algorithm::CseFslFo)),
        ];
        mismatches += expected.iter().filter(|(got, want)| got != want).count();
    }
    check(
        grid.len() >= 20 && mismatches == 0,
        format!(
            "{} input tuples x 6 expressions plus HERON == CSE communication: {mismatches} mismatches",
            grid.len()
        ),
    )
}

fn criterion_5(runs: &[&Done]) -> Verdict {
    let mut checked = [0usize; 3];
    let mut problems = Vec::new();
    for done in runs {
        for arm in &done.arms {
            let alg = arm.algorithm;
            for (id, l) in arm.run.client_ledgers.iter().enumerate() {
                let participated = arm.ledger.clients[id].rounds_participated > 0;
                let p = done.cfg.round.batch_size.min(done.shard_lens[id]);
                let want_cache = match (alg, participated) {
                    (_, false) | (Algorithm::Heron, true) => 0,
                    (Algorithm::CseFslFo, true) => chain_cache(&local_chain(&done.cfg), p),
                    (Algorithm::Sflv2, true) => chain_cache(&client_chain(&done.cfg), p),
                };
                let backward_ok = alg != Algorithm::Heron || l.backward_ops == 0;
                if l.activation_cache_hwm != want_cache || !backward_ok {
                    problems.push(format!(
                        "{} {alg} client {id}: cache {} (want {want_cache}), backward {}",
                        done.label, l.activation_cache_hwm, l.backward_ops
                    ));
                }
                checked[match alg {
                    Algorithm::Heron => 0,
                    Algorithm::CseFslFo => 1,
                    Algorithm::Sflv2 => 2,
                }] += 1;
            }
        }
    }
    check(
        problems.is_empty() && checked.iter().all(|&c| c > 0),
        format!(
            "client ledgers checked: {} HERON (backward 0, cache 0), {} CSE_FSL_FO and {} SFLV2 (cache = analytic size){}",
            checked[0],
            checked[1],
            checked[2],
            problems.first().map(|p| format!("; first problem: {p}")).unwrap_or_default()
        ),
    )
}

fn criterion_6(grid: &[Done]) -> Verdict {
    let mut checked = 0;
    let mut problems = Vec::new();
    for done in grid {
        for arm in &done.arms {
            for (id, (m, p)) in arm
                .run
                .client_ledgers
                .iter()
                .zip(&arm.run.predicted_ledgers)
                .enumerate()
            {
                let rounds = arm.ledger.clients[id].rounds_participated as u64;
                let (up, down) = round_comm(&done.cfg, arm.algorithm, done.shard_lens[id]);
                if m.uploaded_scalars != rounds * up || m.downloaded_scalars != rounds * down {
                    problems.push(format!(
                        "{} {} client {id}: measured {}/{} vs {}/{}",
                        done.label,
                        arm.algorithm,
                        m.uploaded_scalars,
                        m.downloaded_scalars,
                        rounds * up,
                        rounds * down
                    ));
                }
                if let Err(e) = reconcile(m, p) {
                    problems.push(format!("{} {} client {id}: {e}", done.label, arm.algorithm));
                }
                checked += 1;
            }
        }
    }
    check(
        problems.is_empty(),
        format!(
            "{} configs (N in 1,3,5; (h,k) in (1,1),(4,2),(6,3); 3 algorithms; participation 1.0 and 0.6), \
             {checked} client ledgers equal the closed forms{}",
            grid.len(),
            problems
                .first()
                .map(|p| format!("; first mismatch: {p}"))
                .unwrap_or_default()
        ),
    )
}

fn criterion_7(iid: &[Done], frozen: &[Done], elapsed: Duration) -> Verdict {
    let fo = median(iid.iter().map(|d| final_acc(d, Algorithm::CseFslFo)).collect());
    let heron = median(iid.iter().map(|d| final_acc(d, Algorithm::Heron)).collect());
    let control = median(frozen.iter().map(|d| final_acc(d, Algorithm::Heron)).collect());
    let gap = (heron - fo).abs();
    check(
        gap <= 0.03 && elapsed < Duration::from_secs(300),
        format!(
            "T=300, N=5 IID, median of 5 seeds: CSE_FSL_FO {fo:.3}, HERON {heron:.3}, gap {:.1}pp (limit 3pp); \
             frozen-client control {control:.3}; {:.1}s (limit 300s)",
            100.0 * gap,
            elapsed.as_secs_f64()
        ),
    )
}

/// Median over seeds of the paired accuracy drop from IID, floored at zero.
fn degradation(iid: &[Done], skewed: &[Done], alg: Algorithm) -> f64 {
    let drops = iid
        .iter()
        .zip(skewed)
        .map(|(a, b)| {
            assert_eq!(a.cfg.seed, b.cfg.seed);
            final_acc(a, alg) - final_acc(b, alg)
        })
        .collect();
    median(drops).max(0.0)
}

fn criterion_8(iid: &[Done], skewed: &[Vec<Done>]) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (alpha, runs) in ALPHAS.iter().zip(skewed) {
        let h = degradation(iid, runs, Algorithm::Heron);
        let f = degradation(iid, runs, Algorithm::CseFslFo);
        ok &= h <= 2.0 * f;
        let heron_acc = median(runs.iter().map(|d| final_acc(d, Algorithm::Heron)).collect());
        let fo_acc = median(runs.iter().map(|d| final_acc(d, Algorithm::CseFslFo)).collect());
        parts.push(format!(
            "alpha={alpha}: HERON drop {:.1}pp vs 2 x FO drop {:.1}pp (accuracy {heron_acc:.3} vs {fo_acc:.3})",
            100.0 * h,
            200.0 * f
        ));
    }
    check(ok, format!("median of 5 paired seeds; {}", parts.join("; ")))
}

fn upload_column(csv: &str) -> Vec<&str> {
    let mut lines = csv.lines();
    let i = lines
        .next()
        .unwrap()
        .split(',')
        .position(|c| c == "uploaded_scalars")
        .expect("uploaded_scalars column");
    lines.map(|l| l.split(',').nth(i).unwrap()).collect()
}

fn criterion_9(runs: &[&Done]) -> Verdict {
    let mut pairs = 0;
    let mut rows = 0;
    let mut unequal = Vec::new();
    for done in runs {
        let heron = upload_column(&done.arm(Algorithm::Heron).csv);
        let fo = upload_column(&done.arm(Algorithm::CseFslFo).csv);
        if heron != fo || heron.is_empty() {
            unequal.push(done.label.clone());
        }
        pairs += 1;
        rows += heron.len();
    }
    check(
        unequal.is_empty(),
        format!(
            "{pairs} paired runs, {rows} rounds: HERON and CSE_FSL_FO uploaded_scalars columns identical{}",
            if unequal.is_empty() {
                String::new()
            } else {
                format!("; differ in {}", unequal.join(", "))
            }
        ),
    )
}

fn criterion_10() -> Verdict {
    let d = 100;
    let mut rng = seed::rng(1010);
    // Shifted Wigner matrix: 10 I plus symmetric noise of unit spectral radius.
    let mut a = DMatrix::<f64>::identity(d, d) * 10.0;
    for i in 0..d {
        for j in i..d {
            let sd = if i == j {
                (2.0 / d as f64).sqrt()
            } else {
                (1.0 / d as f64).sqrt()
            };
            let w = sd * rng.sample::<f64, _>(StandardNormal);
            a[(i, j)] += w;
            if i != j {
                a[(j, i)] += w;
            }
        }
    }
    let eigs: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
    let op = |v: &[f64]| Ok((&a * DMatrix::from_column_slice(v.len(), 1, v)).as_slice().to_vec());
    let est = lanczos_density(op, d, 40, 8, seed::derive(1010, &[1])).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = Vec::new();
    let mut power = DMatrix::<f64>::identity(d, d);
    for k in 1..=3 {
        power = &power * &a;
        let exact = eigs.iter().map(|l| l.powi(k)).sum::<f64>() / d as f64;
        let rel = (est.moment(k) - exact).abs() / exact.abs();
        // Per-moment Rademacher trace standard error, for scale.
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| power[(i, j)].powi(2))
            .sum();
        let se = (2.0 * off / 8.0).sqrt() / d as f64 / exact.abs();
        ok &= rel < 0.05;
        parts.push(format!("k={k} {:.2}% (trace SE {:.2}%)", 100.0 * rel, 100.0 * se));
    }
    let identity = lanczos_density(|v: &[f64]| Ok(v.to_vec()), 10, 10, 4, 5).map_err(|e| e.to_string())?;
    let kappa = effective_rank(&identity).map_err(|e| e.to_string())?.kappa;
    let kappa_exact = effective_rank_exact(&[1.0; 10]).map_err(|e| e.to_string())?.kappa;
    ok &= kappa == 10.0 && kappa_exact == 10.0;
    check(
        ok,
        format!(
            "100x100 symmetric, m=40, 8 probes: moment rel err {} (limit 5%); kappa(I_10) = {kappa} (exact {kappa_exact})",
            parts.join(", ")
        ),
    )
}

fn criterion_11() -> Verdict {
    let calls = 10_000;
    let mut rng = seed::rng(1111);
    let mut errors = 0;
    let mut changed = 0;
    for _ in 0..calls {
        let d = rng.random_range(1..=64usize);
        let theta: Vec<f64> = (0..d)
            .map(|_| match rng.random_range(0..8) {
                0 => 0.0,
                1 => f64::MIN_POSITIVE * rng.random_range(-4.0..4.0),
                _ => {
                    let sign = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
                    sign * 10f64.powf(rng.random_range(-8.0..8.0)) * rng.random_range(1.0..10.0)
                }
            })
            .collect();
        let mu = 10f64.powf(rng.random_range(-8.0..0.0));
        let probes = rng.random_range(1..=4usize);
        let fail_at = rng.random_bool(0.2).then(|| rng.random_range(1..=probes + 1));
        let shape = rng.random_range(0..3);
        let ticket = PerturbationTicket::new(rng.random(), mu, probes, d).map_err(|e| e.to_string())?;
        let mut work = theta.clone();
        let mut n = 0;
        let result = zo_estimate(&mut work, &ticket, |x: &[f64]| {
            n += 1;
            if Some(n) == fail_at {
                return Err(Error::Numeric("injected".into()));
            }
            Ok(match shape {
                0 => x.iter().map(|v| v.sin()).sum(),
                1 => x.iter().map(|v| v * v).sum::<f64>() * 1e-20,
                _ => x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v).sum(),
            })
        });
        errors += usize::from(result.is_err());
        let same = theta.iter().zip(&work).all(|(a, b)| a.to_ne_bytes() == b.to_ne_bytes());
        changed += usize::from(!same);
    }
    check(
        changed == 0,
        format!("{calls} randomized calls ({errors} ending in an error): {changed} left parameters changed"),
    )
}

fn arm_files(cfg: &ExperimentConfig) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for alg in &cfg.arms {
        for name in ["metrics.csv", "clients.csv", "ledger.json", "spectrum.txt"] {
            let path = heron_sfl_cli::arm_dir(cfg, *alg).join(name);
            if let Ok(bytes) = std::fs::read(&path) {
                out.push((format!("{alg}/{name}"), bytes));
            }
        }
    }
    out
}

fn criterion_12(twice: &[(String, Vec<Done>)], tmp: &Path) -> Verdict {
    let mut compared = 0;
    let mut differing = Vec::new();
    for (name, runs) in twice {
        let files: Vec<_> = runs.iter().map(|d| arm_files(&d.cfg)).collect();
        if files[0].is_empty() || files[0] != files[1] {
            differing.push(name.clone());
        }
        if runs[0].arms.iter().zip(&runs[1].arms).any(|(a, b)| a.csv != b.csv) {
            differing.push(format!("{name} (in memory)"));
        }
        compared += files[0].len();
    }
    // A separate process must reproduce the in-process bytes.
    let parity = &twice.iter().find(|(n, _)| n == "parity.toml").expect("parity rerun").1[0];
    let process_dir = tmp.join("process");
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let child = std::process::Command::new(exe)
        .env(CHILD_OUTPUT_DIR, &process_dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !child.status.success() {
        return Err(format!("child run failed: {}", String::from_utf8_lossy(&child.stderr)));
    }
    for arm in &parity.arms {
        let bytes =
            std::fs::read(process_dir.join(arm.algorithm.tag()).join("metrics.csv")).map_err(|e| e.to_string())?;
        if bytes != arm.csv.as_bytes() {
            differing.push(format!("parity.toml {} across processes", arm.algorithm));
        }
        compared += 1;
    }
    check(
        differing.is_empty(),
        format!(
            "{} shipped configs rerun with the same seed, {compared} output files byte-identical{}",
            twice.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!("; differ: {}", differing.join(", "))
            }
        ),
    )
}

// ------------------------------------------------------------------------ main

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(payload) => Err(format!(
            "panicked: {}",
            payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

fn report(n: usize, verdict: Verdict) -> bool {
    let (tag, detail, ok) = match verdict {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("{tag} criterion {n:>2}: {detail}");
    ok
}

fn rerun_shipped(tmp: &Path) -> Vec<(String, Vec<Done>)> {
    ["reference.toml", "parity.toml", "non_iid.toml"]
        .iter()
        .map(|name| {
            let runs = ["a", "b"]
                .iter()
                .map(|copy| {
                    let mut cfg = load(name);
                    cfg.output_dir = tmp.join(name).join(copy);
                    let arms = run_experiment(&cfg).unwrap_or_else(|e| panic!("{name}: {e}"));
                    let prepared = prepare(&cfg).expect("prepared above");
                    Done {
                        label: format!("{name} {copy}"),
                        shard_lens: prepared.plan.shards.iter().map(Vec::len).collect(),
                        cfg,
                        arms,
                    }
                })
                .collect();
            (name.to_string(), runs)
        })
        .collect()
}

/// Set in a child process: run `parity.toml` into this directory and exit.
const CHILD_OUTPUT_DIR: &str = "HERON_ACCEPTANCE_CHILD_OUTPUT";

fn main() {
    if let Some(dir) = std::env::var_os(CHILD_OUTPUT_DIR) {
        let mut cfg = load("parity.toml");
        cfg.output_dir = dir.into();
        run_experiment(&cfg).expect("child run");
        return;
    }
    let mut passed = vec![
        report(1, guarded(criterion_1)),
        report(2, guarded(criterion_2)),
        report(3, guarded(criterion_3)),
        report(4, guarded(criterion_4)),
    ];

    let start = Instant::now();
    let iid = run_all(paired_jobs(PartitionSection::Iid));
    let iid_elapsed = start.elapsed();
    let frozen = run_all(
        SEEDS
            .iter()
            .map(|&s| {
                let mut cfg = parity_config(s, PartitionSection::Iid);
                cfg.arms = vec![Algorithm::Heron];
                cfg.round.lr_client = 0.0;
                (format!("seed {s} frozen"), cfg)
            })
            .collect(),
    );
    let skewed: Vec<Vec<Done>> = ALPHAS
        .iter()
        .map(|&alpha| run_all(paired_jobs(PartitionSection::Dirichlet { alpha })))
        .collect();
    let grid = ledger_grid();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let twice = rerun_shipped(tmp.path());

    let paired: Vec<&Done> = iid
        .iter()
        .chain(skewed.iter().flatten())
        .chain(twice.iter().flat_map(|(_, r)| r))
        .collect();
    let every: Vec<&Done> = paired.iter().copied().chain(&grid).chain(&frozen).collect();

    passed.push(report(5, guarded(|| criterion_5(&every))));
    passed.push(report(6, guarded(|| criterion_6(&grid))));
    passed.push(report(7, guarded(|| criterion_7(&iid, &frozen, iid_elapsed))));
    passed.push(report(8, guarded(|| criterion_8(&iid, &skewed))));
    passed.push(report(9, guarded(|| criterion_9(&paired))));
    passed.push(report(10, guarded(criterion_10)));
    passed.push(report(11, guarded(criterion_11)));
    passed.push(report(12, guarded(|| criterion_12(&twice, tmp.path()))));

    let n_pass = passed.iter().filter(|&&p| p).count();
    println!("acceptance: {n_pass}/{} criteria pass", passed.len());
    if n_pass != passed.len() {
        std::process::exit(1);
    }
}
