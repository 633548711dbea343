//! Batch experiment driver: reads a TOML config, builds the dataset, partition
//! and initial model, runs each algorithm arm on identical seeds and writes
//! per-arm metrics, ledgers and spectra.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod report;

use std::path::{Path, PathBuf};

use heron_sfl::data::{make_synthetic, partition, BlobSpec, LabeledDataset, PartitionPlan};
use heron_sfl::nn::{cross_entropy, CacheMode, DenseNet};
use heron_sfl::protocol::{run_training, Algorithm, ModelPartition, TrainingRun};
use heron_sfl::seed;
use heron_sfl::spectral::{effective_rank, hvp, lanczos_density, EffectiveRankReport, SpectrumEstimate};

pub use config::{DatasetSection, ExperimentConfig, ModelSection, PartitionSection, RoundSection, SpectrumSection};
pub use report::{
    clients_csv, csv_header, metrics_csv, ClientLedger, ClosedForm, LedgerReport, CLIENT_CSV_COLUMNS, CSV_COLUMNS,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] heron_sfl::Error),
}

/// Everything shared by the arms of one experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: LabeledDataset<f64>,
    pub eval: LabeledDataset<f64>,
    pub plan: PartitionPlan,
    pub model: ModelPartition<f64>,
}

fn read_dataset(path: &Path) -> Result<LabeledDataset<f64>, CliError> {
    let file = std::fs::File::open(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    LabeledDataset::from_text(std::io::BufReader::new(file)).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Builds data, partition and initial model from the master seed.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(CliError::Invalid(v));
    }
    let d = &cfg.dataset;
    // Generated train and eval rows come from one call so they share class means.
    let n_train = if d.train_path.is_none() { d.n_samples } else { 0 };
    let n_eval = if d.eval_path.is_none() { d.n_eval } else { 0 };
    let synthetic = if n_train + n_eval > 0 {
        Some(make_synthetic::<f64>(&BlobSpec {
            n_samples: n_train + n_eval,
            n_inputs: d.n_inputs,
            n_classes: d.n_classes,
            class_separation: d.class_separation,
            noise_sd: d.noise_sd,
            seed: seed::derive(cfg.seed, &[seed::TAG_DATA]),
        })?)
    } else {
        None
    };
    let rows = |range: std::ops::Range<usize>| -> Result<LabeledDataset<f64>, CliError> {
        let all = synthetic.as_ref().expect("generated when a path is missing");
        let idx: Vec<usize> = range.collect();
        let labels = idx.iter().map(|&i| all.labels[i]).collect();
        Ok(LabeledDataset::new(
            all.inputs.select_rows(&idx),
            labels,
            all.n_classes,
        )?)
    };
    let train = match &d.train_path {
        Some(p) => read_dataset(p)?,
        None => rows(0..n_train)?,
    };
    let eval = match &d.eval_path {
        Some(p) => read_dataset(p)?,
        None => rows(n_train..n_train + n_eval)?,
    };
    for (name, ds) in [("train", &train), ("eval", &eval)] {
        if ds.n_inputs() != d.n_inputs || ds.n_classes != d.n_classes {
            return Err(CliError::Invalid(vec![format!(
                "{name} data has {} inputs and {} classes, config says {} and {}",
                ds.n_inputs(),
                ds.n_classes,
                d.n_inputs,
                d.n_classes
            )]));
        }
    }
    let plan = partition(
        &train,
        cfg.round.num_clients,
        cfg.partition.mode(),
        seed::derive(cfg.seed, &[seed::TAG_PARTITION]),
    )?;
    let model = ModelPartition::random(&cfg.arch(), &mut seed::rng(seed::derive(cfg.seed, &[seed::TAG_INIT])))?;
    Ok(Prepared {
        train,
        eval,
        plan,
        model,
    })
}

/// Result of one arm.
#[derive(Debug, Clone)]
pub struct ArmOutput {
    pub algorithm: Algorithm,
    pub run: TrainingRun<f64>,
    pub csv: String,
    pub clients_csv: String,
    pub ledger: LedgerReport,
    pub spectrum: Option<(SpectrumEstimate<f64>, EffectiveRankReport<f64>)>,
}

impl ArmOutput {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.run.metrics.last().map(|m| m.eval_accuracy)
    }
}

pub fn run_arm(cfg: &ExperimentConfig, prepared: &Prepared, algorithm: Algorithm) -> Result<ArmOutput, CliError> {
    let rc = cfg.round_config(algorithm);
    let run = run_training(
        &rc,
        prepared.model.clone(),
        &prepared.train,
        &prepared.plan,
        &prepared.eval,
    )?;
    let csv = metrics_csv(&run.metrics, cfg.accuracy_threshold);
    let clients_csv = clients_csv(&run.metrics);
    let ledger = LedgerReport::new(algorithm, &prepared.model, rc.batch_size, rc.probes, &run)?;
    let spectrum = match cfg.spectrum {
        Some(s) => Some(local_spectrum(&run.model, &prepared.train, &s, cfg.seed)?),
        None => None,
    };
    Ok(ArmOutput {
        algorithm,
        run,
        csv,
        clients_csv,
        ledger,
        spectrum,
    })
}

/// Spectral density of the Hessian of the client-side loss (client submodel
/// plus auxiliary head) on the first `samples` training rows.
pub fn local_spectrum(
    model: &ModelPartition<f64>,
    train: &LabeledDataset<f64>,
    section: &SpectrumSection,
    master_seed: u64,
) -> Result<(SpectrumEstimate<f64>, EffectiveRankReport<f64>), CliError> {
    let topo = model.client.topology().then(model.aux.topology())?;
    let net = DenseNet::from_params(topo, model.local_params())?;
    let idx: Vec<usize> = (0..section.samples.min(train.len())).collect();
    let batch = train.batch(&idx)?;
    let theta = net.params().to_vec();
    let mut probe = net.clone();
    let mut grad = |p: &[f64]| -> heron_sfl::Result<Vec<f64>> {
        probe.set_params(p)?;
        let (logits, cache) = probe.forward(&batch.inputs, CacheMode::Enabled)?;
        let (_, dlogits) = cross_entropy(&logits, &batch.labels)?;
        Ok(probe.backward(&cache, &dlogits)?.params)
    };
    let op = |v: &[f64]| hvp(&mut grad, &theta, v, section.eps);
    let estimate = lanczos_density(
        op,
        theta.len(),
        section.steps,
        section.probes,
        seed::derive(master_seed, &[seed::TAG_SPECTRUM]),
    )?;
    let rank = effective_rank(&estimate)?;
    Ok((estimate, rank))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Where one arm's files go: `<output_dir>/<ALGORITHM>/`.
pub fn arm_dir(cfg: &ExperimentConfig, algorithm: Algorithm) -> PathBuf {
    cfg.output_dir.join(algorithm.tag())
}

/// Runs every arm (concurrently) and writes `metrics.csv`, `clients.csv`,
/// `ledger.json` and, when configured, `spectrum.txt` into each arm's directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ArmOutput>, CliError> {
    let prepared = prepare(cfg)?;
    let outputs: Vec<Result<ArmOutput, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .arms
            .iter()
            .map(|&alg| {
                let prepared = &prepared;
                s.spawn(move || run_arm(cfg, prepared, alg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("arm thread panicked"))
            .collect()
    });
    let outputs = outputs.into_iter().collect::<Result<Vec<_>, _>>()?;
    for out in &outputs {
        let dir = arm_dir(cfg, out.algorithm);
        create_dir(&dir)?;
        write(&dir.join("metrics.csv"), &out.csv)?;
        write(&dir.join("clients.csv"), &out.clients_csv)?;
        write(&dir.join("ledger.json"), &out.ledger.to_json())?;
        if let Some((spectrum, _)) = &out.spectrum {
            write(&dir.join("spectrum.txt"), &spectrum.to_text())?;
        }
    }
    Ok(outputs)
}

/// Diagnostic-only run: the local-loss spectrum at the initial model, written
/// to `<output_dir>/spectrum.txt`.
pub fn spectrum_experiment(cfg: &ExperimentConfig) -> Result<EffectiveRankReport<f64>, CliError> {
    let section = cfg
        .spectrum
        .ok_or_else(|| CliError::Invalid(vec!["the spectrum section is missing".to_string()]))?;
    let prepared = prepare(cfg)?;
    let (estimate, rank) = local_spectrum(&prepared.model, &prepared.train, &section, cfg.seed)?;
    create_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join("spectrum.txt"), &estimate.to_text())?;
    Ok(rank)
}
