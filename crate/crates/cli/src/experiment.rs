//! The sweep over arms × pretraining iterations × trials, with an
//! append-only results file that a rerun resumes from.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::path::Path;
use std::time::Instant;

use annealdbn::dbn::{evaluate, finetune, initial_layers, pretrain, DbnModel, TrainSchedule};
use annealdbn::mnist::{split_training_sets, CgDataset};
use annealdbn::rbm::RbmParams;
use annealdbn::sampler::{derive_seed, Estimator};
use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::{DataError, UsageError};

pub const RESULTS_SCHEMA: &str = "annealdbn-results/1";
pub const RESULTS_COLUMNS: [&str; 11] = [
    "arm",
    "n_pretrain",
    "checkpoint",
    "trial",
    "train_accuracy",
    "test_accuracy",
    "wall_time_s",
    "seed",
    "config_digest",
    "init_digest",
    "error",
];

/// One row of the results file. Accuracies are empty when the job failed
/// before reaching the checkpoint; `error` then says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub arm: String,
    pub n_pretrain: usize,
    pub checkpoint: usize,
    pub trial: usize,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub wall_time_s: f64,
    pub seed: u64,
    pub config_digest: String,
    pub init_digest: String,
    pub error: String,
}

pub struct Datasets {
    pub splits: Vec<CgDataset>,
    pub test: CgDataset,
    pub train_digest: String,
    pub test_digest: String,
}

fn read_dataset(path: &Path, what: &str) -> anyhow::Result<CgDataset> {
    if !path.exists() {
        return Err(DataError(format!(
            "{what} set {} not found; run `annealdbn prepare-data` first",
            path.display()
        ))
        .into());
    }
    CgDataset::read(path).with_context(|| format!("reading {what} set {}", path.display()))
}

/// Reads the prepared data sets and cuts the training splits.
pub fn load_datasets(cfg: &ExperimentConfig) -> anyhow::Result<Datasets> {
    let train = read_dataset(&cfg.train_path(), "training")?;
    let test = read_dataset(&cfg.test_path(), "test")?;
    datasets_from(cfg, &train, test)
}

pub fn datasets_from(cfg: &ExperimentConfig, train: &CgDataset, test: CgDataset) -> anyhow::Result<Datasets> {
    let mut splits = split_training_sets(train, cfg.data.splits, cfg.data.shuffle_seed)?;
    if let Some(k) = cfg.data.train_subset {
        splits = splits.iter().map(|s| s.head(k)).collect();
    }
    let test = match cfg.data.test_subset {
        Some(k) => test.head(k),
        None => test,
    };
    if let Some(&l) = train.labels.iter().chain(&test.labels).find(|&&l| l >= cfg.classes()) {
        return Err(UsageError(format!("label {l} needs more than {} classes", cfg.classes())).into());
    }
    Ok(Datasets {
        splits,
        train_digest: train.digest(),
        test_digest: test.digest(),
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Job {
    pub n_pretrain: usize,
    pub trial: usize,
    pub arm: usize,
}

/// Jobs in execution order: sweep value, then trial, then arm.
pub fn jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for &n_pretrain in &cfg.pretrain_sweep {
        for trial in 0..cfg.trials {
            for arm in 0..cfg.arms.len() {
                out.push(Job { n_pretrain, trial, arm });
            }
        }
    }
    out
}

/// Shared by every arm and sweep value of a trial, so both arms start from
/// the same weights and see minibatches in the same order.
pub fn trial_seed(cfg: &ExperimentConfig, trial: usize) -> u64 {
    derive_seed(cfg.seed, &[trial as u64])
}

pub fn trial_schedule(cfg: &ExperimentConfig, n_pretrain: usize, trial: usize) -> TrainSchedule {
    TrainSchedule {
        pretrain_iters: n_pretrain,
        seed: trial_seed(cfg, trial),
        ..cfg.schedule.clone()
    }
}

/// Short hash of layer shapes and weight/bias bits.
pub fn layers_digest(layers: &[RbmParams]) -> String {
    let mut h = Sha256::new();
    for p in layers {
        h.update((p.n_visible() as u64).to_le_bytes());
        h.update((p.n_hidden() as u64).to_le_bytes());
        for x in p.weights.iter().chain(&p.visible_bias).chain(&p.hidden_bias) {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())[..16].to_string()
}

/// Pretrain, fit the least-squares head, fine-tune; one record per
/// checkpoint. Failures become records rather than errors.
pub fn run_job(
    cfg: &ExperimentConfig,
    estimator: &dyn Estimator,
    job: Job,
    train: &CgDataset,
    test: &CgDataset,
    config_digest: &str,
) -> Vec<ResultRecord> {
    let start = Instant::now();
    let schedule = trial_schedule(cfg, job.n_pretrain, job.trial);
    let init_digest = initial_layers(cfg.rbm_sizes(), &schedule)
        .map(|l| layers_digest(&l))
        .unwrap_or_default();
    let record = |checkpoint: usize, acc: Option<(f64, f64)>, error: String| ResultRecord {
        arm: cfg.arms[job.arm].name.clone(),
        n_pretrain: job.n_pretrain,
        checkpoint,
        trial: job.trial,
        train_accuracy: acc.map(|a| a.0),
        test_accuracy: acc.map(|a| a.1),
        wall_time_s: (start.elapsed().as_secs_f64() * 1000.0).round() / 1000.0,
        seed: schedule.seed,
        config_digest: config_digest.to_string(),
        init_digest: init_digest.clone(),
        error,
    };

    let mut records = Vec::new();
    let outcome = (|| -> annealdbn::Result<()> {
        let x = train.features.view();
        let layers = pretrain(cfg.rbm_sizes(), x, estimator, &schedule, &mut |_| {})?;
        let model = DbnModel::with_least_squares_head(layers, x, &train.labels, cfg.classes(), schedule.ridge)?;
        finetune(&model, x, &train.labels, &schedule, &cfg.checkpoints, &mut |k, m| {
            let acc = (
                evaluate(m, x, &train.labels)?,
                evaluate(m, test.features.view(), &test.labels)?,
            );
            records.push(record(k, Some(acc), String::new()));
            Ok(())
        })?;
        Ok(())
    })();
    if let Err(e) = outcome {
        let done = records.len();
        for &k in &cfg.checkpoints[done..] {
            records.push(record(k, None, e.to_string()));
        }
    }
    records
}

pub fn read_results(path: &Path) -> anyhow::Result<Vec<ResultRecord>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row.with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(out)
}

/// Rows that parse; a torn final line from an interrupted run is dropped.
fn read_results_lenient(path: &Path) -> anyhow::Result<Vec<ResultRecord>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    if headers.iter().ne(RESULTS_COLUMNS) {
        return Err(DataError(format!("{} does not have the {RESULTS_SCHEMA} columns", path.display())).into());
    }
    Ok(reader.deserialize().filter_map(|r| r.ok()).collect())
}

fn write_results(path: &Path, records: &[ResultRecord]) -> anyhow::Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&tmp)?;
        w.write_record(RESULTS_COLUMNS)?;
        for r in records {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path).with_context(|| format!("replacing {}", path.display()))?;
    Ok(())
}

fn write_schema_sidecar(path: &Path) -> anyhow::Result<()> {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    let meta = serde_json::json!({ "schema": RESULTS_SCHEMA, "columns": RESULTS_COLUMNS });
    std::fs::write(&name, serde_json::to_string_pretty(&meta)? + "\n")
        .with_context(|| format!("writing {}", Path::new(&name).display()))
}

#[derive(Debug)]
pub struct CompareOutcome {
    pub records: Vec<ResultRecord>,
    pub ran: usize,
    pub resumed: usize,
    pub config_digest: String,
}

/// Runs every job not already complete in `results_path`. Finished jobs are
/// appended as they complete; at the end the file is rewritten in job
/// order, so an interrupted-then-resumed run matches an uninterrupted one.
pub fn run_comparison(
    cfg: &ExperimentConfig,
    data: &Datasets,
    results_path: &Path,
    fresh: bool,
    progress: &mut dyn FnMut(&str),
) -> anyhow::Result<CompareOutcome> {
    let config_digest = cfg.digest(&data.train_digest, &data.test_digest);
    if let Some(dir) = results_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let all_jobs = jobs(cfg);
    let job_index: HashMap<(String, usize, usize), usize> = all_jobs
        .iter()
        .enumerate()
        .map(|(k, j)| ((cfg.arms[j.arm].name.clone(), j.n_pretrain, j.trial), k))
        .collect();

    let mut done: BTreeMap<usize, Vec<ResultRecord>> = BTreeMap::new();
    if results_path.exists() && !fresh {
        let mut partial: BTreeMap<usize, Vec<ResultRecord>> = BTreeMap::new();
        for r in read_results_lenient(results_path)? {
            if r.config_digest != config_digest {
                return Err(UsageError(format!(
                    "{} holds results for configuration {}, not {config_digest}; pass --fresh to start over",
                    results_path.display(),
                    r.config_digest
                ))
                .into());
            }
            if let Some(&k) = job_index.get(&(r.arm.clone(), r.n_pretrain, r.trial)) {
                partial.entry(k).or_default().push(r);
            }
        }
        for (k, mut rows) in partial {
            rows.sort_by_key(|r| r.checkpoint);
            rows.dedup_by_key(|r| r.checkpoint);
            if rows.iter().map(|r| r.checkpoint).eq(cfg.checkpoints.iter().copied()) {
                done.insert(k, rows);
            }
        }
    }
    let resumed = done.len();
    let flat = |done: &BTreeMap<usize, Vec<ResultRecord>>| done.values().flatten().cloned().collect::<Vec<_>>();
    write_results(results_path, &flat(&done))?;
    write_schema_sidecar(results_path)?;

    let estimators = cfg
        .arms
        .iter()
        .map(|a| {
            let sampler = annealdbn::sampler::SamplerConfig {
                seed: cfg.seed,
                ..cfg.sampler.clone()
            };
            a.estimator.build(&sampler, &cfg.chip, &cfg.gibbs)
        })
        .collect::<annealdbn::Result<Vec<_>>>()?;

    let mut ran = 0;
    let total = all_jobs.len();
    for (k, &job) in all_jobs.iter().enumerate() {
        if done.contains_key(&k) {
            continue;
        }
        let split = &data.splits[job.trial];
        let rows = run_job(
            cfg,
            estimators[job.arm].as_ref(),
            job,
            split,
            &data.test,
            &config_digest,
        );
        {
            let file = OpenOptions::new().append(true).open(results_path)?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        let last = rows.last().expect("at least one checkpoint");
        progress(&match (&last.test_accuracy, last.error.is_empty()) {
            (Some(acc), true) => format!(
                "[{}/{total}] {} N={} trial={}: test accuracy {acc:.4} after {} backprop iterations ({:.1} s)",
                k + 1,
                last.arm,
                job.n_pretrain,
                job.trial,
                last.checkpoint,
                last.wall_time_s
            ),
            _ => format!(
                "[{}/{total}] {} N={} trial={}: failed: {}",
                k + 1,
                last.arm,
                job.n_pretrain,
                job.trial,
                last.error
            ),
        });
        done.insert(k, rows);
        ran += 1;
    }

    let records = flat(&done);
    write_results(results_path, &records)?;
    Ok(CompareOutcome {
        records,
        ran,
        resumed,
        config_digest,
    })
}
