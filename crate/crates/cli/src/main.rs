use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use annealdbn::calibration::{calibrate, BetaProbe, ChimeraProbe, ExactBoltzmannOracle};
use annealdbn::chimera::embed_rbm;
use annealdbn::dbn::{evaluate, finetune, initial_layers, pretrain_from, DbnModel};
use annealdbn::ising::{apply_gauge, apply_noise, make_gauges, rescale_to_hardware, GaugeName};
use annealdbn::mnist::{load_idx_with_digests, CgDataset};
use annealdbn::rbm::RbmParams;
use annealdbn::sampler::{hardware_model, stream, EstimatorKind};
use annealdbn_cli::config::ExperimentConfig;
use annealdbn_cli::experiment::{layers_digest, load_datasets, run_comparison, trial_schedule, Datasets};
use annealdbn_cli::summary::{plot_script, summarize, write_summary};
use annealdbn_cli::{exit_code, DataError, UsageError, EXIT_OK, EXIT_USAGE};
use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "annealdbn",
    version,
    about = "DBN pretraining with contrastive divergence or a simulated annealer"
)]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set sampler.beta_eff=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Same as `--set output_dir=DIR`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Same as `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Coarse-grain the MNIST IDX files into the 32-feature data sets.
    PrepareData {
        #[arg(long)]
        mnist_dir: Option<PathBuf>,
    },
    /// Pick beta_eff for an RBM size by grid search.
    CalibrateBeta {
        #[arg(long)]
        visible: usize,
        #[arg(long)]
        hidden: usize,
        /// Use an exact Boltzmann sampler at this inverse temperature instead
        /// of the simulated annealer.
        #[arg(long)]
        oracle_beta: Option<f64>,
    },
    /// Layerwise generative training, then a least-squares output head.
    Pretrain {
        #[arg(long, value_parser = parse_estimator, default_value = "cd1")]
        estimator: EstimatorKind,
        /// Defaults to `schedule.pretrain_iters`.
        #[arg(long)]
        iters: Option<usize>,
        /// Training split to use.
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// Continue from this model's layers instead of a fresh initialization.
        #[arg(long)]
        model_in: Option<PathBuf>,
        #[arg(long)]
        model_out: PathBuf,
    },
    /// Backpropagation from a saved model.
    Finetune {
        #[arg(long)]
        model_in: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
        /// Defaults to `schedule.backprop_iters`.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Accuracy of a saved model.
    Evaluate {
        #[arg(long)]
        model_in: PathBuf,
        /// Defaults to the prepared test set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run every arm over the pretraining sweep and all trials.
    Compare {
        /// Discard existing results instead of resuming.
        #[arg(long)]
        fresh: bool,
        /// Defaults to `<output>/results.csv`.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Means and standard deviations over trials, plus a plotting script.
    Summarize {
        #[arg(long)]
        results: Option<PathBuf>,
        /// Defaults to `summary.csv` next to the results.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Chip description.
    Topology {
        #[command(subcommand)]
        action: TopologyAction,
    },
    /// Hardware Ising models.
    Ising {
        #[command(subcommand)]
        action: IsingAction,
    },
}

#[derive(Subcommand)]
enum TopologyAction {
    /// Edge list of the configured chip.
    Dump {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum IsingAction {
    /// Embedded Ising model of an RBM: a random one, or a layer of a model.
    Dump {
        #[arg(long, default_value_t = 4)]
        visible: usize,
        #[arg(long, default_value_t = 4)]
        hidden: usize,
        #[arg(long)]
        model_in: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Apply this gauge (I, G, -G, -I), rescale and add noise: the model
        /// as programmed on the device.
        #[arg(long, allow_hyphen_values = true)]
        gauge: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_estimator(s: &str) -> Result<EstimatorKind, String> {
    s.parse().map_err(|e: annealdbn::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                EXIT_USAGE as u8
            } else {
                EXIT_OK as u8
            });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

/// The error chain joined by ": ", skipping causes whose text the message
/// already contains.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg = format!("{msg}: {c}");
        }
    }
    msg
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(dir) = &cli.output_dir {
        overrides.push(format!("output_dir={}", toml::Value::String(dir.display().to_string())));
    }
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    match cli.command {
        Command::PrepareData { mnist_dir } => prepare_data(&cfg, mnist_dir.as_deref().unwrap_or(&cfg.data.mnist_dir)),
        Command::CalibrateBeta {
            visible,
            hidden,
            oracle_beta,
        } => calibrate_beta(&cfg, visible, hidden, oracle_beta),
        Command::Pretrain {
            estimator,
            iters,
            trial,
            model_in,
            model_out,
        } => pretrain_cmd(&cfg, estimator, iters, trial, model_in.as_deref(), &model_out),
        Command::Finetune {
            model_in,
            model_out,
            iters,
            trial,
        } => finetune_cmd(&cfg, &model_in, &model_out, iters, trial),
        Command::Evaluate { model_in, data } => evaluate_cmd(&cfg, &model_in, data.as_deref()),
        Command::Compare { fresh, results } => compare(&cfg, fresh, results),
        Command::Summarize { results, out } => summarize_cmd(&cfg, results, out),
        Command::Topology {
            action: TopologyAction::Dump { out },
        } => emit(out.as_deref(), &cfg.chip.build()?.edge_list()),
        Command::Ising {
            action:
                IsingAction::Dump {
                    visible,
                    hidden,
                    model_in,
                    layer,
                    gauge,
                    out,
                },
        } => ising_dump(
            &cfg,
            visible,
            hidden,
            model_in.as_deref(),
            layer,
            gauge.as_deref(),
            out.as_deref(),
        ),
    }
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn prepare_data(cfg: &ExperimentConfig, mnist_dir: &Path) -> anyhow::Result<()> {
    for (images, labels, out) in [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", cfg.train_path()),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", cfg.test_path()),
    ] {
        let (img, lbl) = (mnist_dir.join(images), mnist_dir.join(labels));
        for p in [&img, &lbl] {
            if !p.exists() {
                return Err(DataError(format!("{} not found", p.display())).into());
            }
        }
        let (raw, provenance) = load_idx_with_digests(&img, &lbl)?;
        let data = CgDataset::from_raw(&raw, Some(provenance));
        create_parent(&out)?;
        data.write(&out)?;
        println!(
            "{}: {} rows, digest {}",
            out.display(),
            data.len(),
            &data.digest()[..16]
        );
    }
    Ok(())
}

fn calibrate_beta(
    cfg: &ExperimentConfig,
    visible: usize,
    hidden: usize,
    oracle_beta: Option<f64>,
) -> anyhow::Result<()> {
    let probe: Box<dyn BetaProbe> = match oracle_beta {
        Some(b) if b > 0.0 && b.is_finite() => Box::new(ExactBoltzmannOracle { device_beta: b }),
        Some(b) => return Err(UsageError(format!("oracle beta {b} must be positive")).into()),
        None => Box::new(ChimeraProbe::new(&cfg.sampler, cfg.chip.build()?, visible, hidden)?),
    };
    let settings = annealdbn::calibration::CalibrationSettings {
        seed: cfg.seed,
        ..cfg.calibration.clone()
    };
    let report = calibrate(visible, hidden, &settings, probe.as_ref())?;
    print!("{}", report.table());
    let out = cfg.output_dir().join(format!("calibration-{visible}x{hidden}.json"));
    create_parent(&out)?;
    std::fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
    eprintln!("report written to {}", out.display());
    Ok(())
}

fn training_split(cfg: &ExperimentConfig, trial: usize) -> anyhow::Result<(Datasets, CgDataset)> {
    let data = load_datasets(cfg)?;
    let split = data
        .splits
        .get(trial)
        .cloned()
        .ok_or_else(|| UsageError(format!("trial {trial} is outside the {} splits", data.splits.len())))?;
    Ok((data, split))
}

fn pretrain_cmd(
    cfg: &ExperimentConfig,
    kind: EstimatorKind,
    iters: Option<usize>,
    trial: usize,
    model_in: Option<&Path>,
    model_out: &Path,
) -> anyhow::Result<()> {
    let (data, split) = training_split(cfg, trial)?;
    let n = iters.unwrap_or(cfg.schedule.pretrain_iters);
    let schedule = trial_schedule(cfg, n, trial);
    let start = match model_in {
        Some(p) => DbnModel::load(p)?.0.layers,
        None => initial_layers(cfg.rbm_sizes(), &schedule)?,
    };
    let sampler = annealdbn::sampler::SamplerConfig {
        seed: cfg.seed,
        ..cfg.sampler.clone()
    };
    let estimator = kind.build(&sampler, &cfg.chip, &cfg.gibbs)?;
    let init_digest = layers_digest(&start);
    let x = split.features.view();
    let layers = pretrain_from(start, x, estimator.as_ref(), &schedule, &mut |s| {
        if s.iteration == schedule.pretrain_iters {
            eprintln!("layer {} done after {} iterations", s.layer, s.iteration);
        }
    })?;
    let model = DbnModel::with_least_squares_head(layers, x, &split.labels, cfg.classes(), schedule.ridge)?;
    let train_acc = evaluate(&model, x, &split.labels)?;
    let test_acc = evaluate(&model, data.test.features.view(), &data.test.labels)?;
    println!(
        "{}: train accuracy {train_acc:.4}, test accuracy {test_acc:.4}",
        kind.name()
    );
    let meta = BTreeMap::from([
        ("estimator".to_string(), json!(kind.name())),
        ("pretrain_iters".to_string(), json!(n)),
        ("trial".to_string(), json!(trial)),
        ("init_digest".to_string(), json!(init_digest)),
        (
            "config_digest".to_string(),
            json!(cfg.digest(&data.train_digest, &data.test_digest)),
        ),
        ("schedule".to_string(), serde_json::to_value(&schedule)?),
    ]);
    create_parent(model_out)?;
    model.save(model_out, meta)?;
    Ok(())
}

fn finetune_cmd(
    cfg: &ExperimentConfig,
    model_in: &Path,
    model_out: &Path,
    iters: Option<usize>,
    trial: usize,
) -> anyhow::Result<()> {
    let (model, mut meta) = DbnModel::load(model_in)?;
    let (data, split) = training_split(cfg, trial)?;
    let mut schedule = trial_schedule(cfg, 0, trial);
    if let Some(k) = iters {
        schedule.backprop_iters = k;
    }
    let mut checkpoints: Vec<usize> = cfg
        .checkpoints
        .iter()
        .copied()
        .filter(|&k| k <= schedule.backprop_iters)
        .collect();
    if checkpoints.last() != Some(&schedule.backprop_iters) {
        checkpoints.push(schedule.backprop_iters);
    }
    let x = split.features.view();
    let tuned = finetune(&model, x, &split.labels, &schedule, &checkpoints, &mut |k, m| {
        let train = evaluate(m, x, &split.labels)?;
        let test = evaluate(m, data.test.features.view(), &data.test.labels)?;
        println!("iteration {k}: train accuracy {train:.4}, test accuracy {test:.4}");
        Ok(())
    })?;
    meta.insert("backprop_iters".to_string(), json!(schedule.backprop_iters));
    create_parent(model_out)?;
    tuned.save(model_out, meta)?;
    Ok(())
}

fn evaluate_cmd(cfg: &ExperimentConfig, model_in: &Path, data: Option<&Path>) -> anyhow::Result<()> {
    let (model, _) = DbnModel::load(model_in)?;
    let path = data.map(Path::to_path_buf).unwrap_or_else(|| cfg.test_path());
    if !path.exists() {
        return Err(DataError(format!("{} not found", path.display())).into());
    }
    let set = CgDataset::read(&path)?;
    let acc = evaluate(&model, set.features.view(), &set.labels)?;
    println!("{acc:.6}");
    Ok(())
}

fn compare(cfg: &ExperimentConfig, fresh: bool, results: Option<PathBuf>) -> anyhow::Result<()> {
    let out_dir = cfg.output_dir();
    let results = results.unwrap_or_else(|| out_dir.join("results.csv"));
    let data = load_datasets(cfg)?;
    create_parent(&results)?;
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    let outcome = run_comparison(cfg, &data, &results, fresh, &mut |line| eprintln!("{line}"))?;
    eprintln!(
        "{} jobs run, {} resumed, config {}; results in {}",
        outcome.ran,
        outcome.resumed,
        outcome.config_digest,
        results.display()
    );
    write_summary_files(&outcome.records, &results, None)
}

fn write_summary_files(
    records: &[annealdbn_cli::experiment::ResultRecord],
    results: &Path,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let (rows, warnings) = summarize(records)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let out = out.unwrap_or_else(|| results.with_file_name("summary.csv"));
    write_summary(&out, &rows)?;
    let name = out.file_name().and_then(|s| s.to_str()).unwrap_or("summary.csv");
    let script = out.with_file_name("plot_summary.py");
    std::fs::write(&script, plot_script(name))?;
    eprintln!("summary in {}, plot script {}", out.display(), script.display());
    Ok(())
}

fn summarize_cmd(cfg: &ExperimentConfig, results: Option<PathBuf>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let results = results.unwrap_or_else(|| cfg.output_dir().join("results.csv"));
    if !results.exists() {
        return Err(DataError(format!("{} not found", results.display())).into());
    }
    let records = annealdbn_cli::experiment::read_results(&results)?;
    write_summary_files(&records, &results, out)
}

fn ising_dump(
    cfg: &ExperimentConfig,
    visible: usize,
    hidden: usize,
    model_in: Option<&Path>,
    layer: usize,
    gauge: Option<&str>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let params = match model_in {
        Some(p) => {
            let (model, _) = DbnModel::load(p)?;
            model
                .layers
                .get(layer)
                .cloned()
                .ok_or_else(|| UsageError(format!("model has {} layers", model.layers.len())))?
        }
        None => RbmParams::random_uniform(visible, hidden, cfg.calibration.spread, &mut stream(cfg.seed, &[])),
    };
    let graph = cfg.chip.build()?;
    let embedding = embed_rbm(params.n_visible(), params.n_hidden(), &graph)?;
    let params = params.with_mask(embedding.missing_mask())?;
    let mut model = hardware_model(&params, &cfg.sampler, &embedding)?;
    if let Some(symbol) = gauge {
        let k = GaugeName::ALL
            .iter()
            .position(|g| g.symbol() == symbol)
            .ok_or_else(|| UsageError(format!("unknown gauge '{symbol}' (expected I, G, -G or -I)")))?;
        let gauged = apply_gauge(&model, &make_gauges(&graph)[k]);
        let (scaled, _) = rescale_to_hardware(&gauged, cfg.sampler.ranges)?;
        model = apply_noise(
            &scaled,
            &cfg.sampler.noise,
            cfg.sampler.ranges,
            &mut stream(cfg.seed, &[k as u64]),
        )?;
    }
    emit(out, &model.dump())
}
