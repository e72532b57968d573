//! Acceptance suite. Runs without the libtest harness so that every criterion
//! prints exactly one PASS / FAIL / SKIPPED line, even when all pass.
//!
//! Criteria 7 and 8 need the MNIST IDX files in `$MNIST_DIR` (default
//! `data/mnist` at the workspace root) and are skipped without them. Set
//! `ACCEPTANCE_ONLY=1,5,6` to run a subset.
//!
//! Criterion 8 is a trend check: its line and summary CSV are produced
//! either way, but a FAIL there does not fail the suite.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use annealdbn::calibration::{calibrate, CalibrationSettings, ExactBoltzmannOracle};
use annealdbn::chimera::{embed_rbm, ChimeraGraph};
use annealdbn::dbn::{pretrain, TrainSchedule};
use annealdbn::ising::{apply_gauge, apply_noise, make_gauges, rescale_to_hardware, GaugeName, NoiseModel};
use annealdbn::mnist::{coarse_grain, load_idx, split_training_sets, CgDataset, FEATURES};
use annealdbn::rbm::{clamped_expectations, exact_expectations, log_likelihood, RbmParams};
use annealdbn::sampler::{
    decode_chains, estimate_expectations_chimera, hardware_model, sample_gauges, stream, ChimeraEstimator, ChipConfig,
    SamplerConfig,
};
use annealdbn_cli::config::{Arm, ExperimentConfig};
use annealdbn_cli::experiment::{datasets_from, run_comparison};
use annealdbn_cli::summary::{summarize, SummaryRow};
use ndarray::Array2;
use rand::Rng;

/// Outcome of one criterion: `Ok(detail)` passes, `Err(detail)` fails,
/// `None` means skipped.
type Outcome = Option<Result<String, String>>;

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // (number, name, check, enforced)
    let criteria: [(usize, &str, fn() -> Outcome, bool); 9] = [
        (1, "gradient fidelity", gradient_fidelity, true),
        (2, "annealer matches exact expectations", oracle_equivalence, true),
        (3, "gauge averaging mitigates noise", gauge_mitigation, true),
        (4, "beta_eff calibration recovery", calibration_recovery, true),
        (5, "fault arithmetic and masked training", fault_robustness, true),
        (6, "voting threshold monotonicity", voting_threshold, true),
        (7, "CG-MNIST pipeline", cg_mnist_pipeline, true),
        (8, "end-to-end trend", end_to_end_trend, false),
        (9, "rerun determinism", determinism, true),
    ];
    let mut failed = 0;
    for (k, name, run, enforced) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&k)) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let line = match outcome {
            Some(Ok(d)) => format!("PASS     criterion {k} ({name}) [{secs:.1} s]: {d}"),
            Some(Err(d)) => {
                failed += usize::from(enforced);
                let note = if enforced { "" } else { " (trend check, reported only)" };
                format!("FAIL     criterion {k} ({name}){note} [{secs:.1} s]: {d}")
            }
            None => format!(
                "SKIPPED  criterion {k} ({name}): MNIST files not found in {}",
                mnist_dir().display()
            ),
        };
        let mut out = std::io::stdout().lock();
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    Some(if ok { Ok(detail) } else { Err(detail) })
}

fn random_rbm(n: usize, m: usize, spread: f64, seed: u64) -> RbmParams {
    RbmParams::random_uniform(n, m, spread, &mut stream(seed, &[]))
}

fn random_binary(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, &[]);
    Array2::from_shape_simple_fn((rows, cols), || f64::from(u8::from(rng.random::<bool>())))
}

fn gradient_fidelity() -> Outcome {
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut where_worst = String::new();
    for seed in 0..50u64 {
        let mut rng = stream(seed, &[1]);
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let p = random_rbm(n, m, 2.0, seed);
        let batch = random_binary(rng.random_range(1..=8), n, seed + 1000);
        let data = clamped_expectations(&p, batch.view()).unwrap();
        let model = exact_expectations(&p).unwrap();
        let fd = |bump: &dyn Fn(&mut RbmParams, f64)| {
            let (mut plus, mut minus) = (p.clone(), p.clone());
            bump(&mut plus, step);
            bump(&mut minus, -step);
            (log_likelihood(&plus, batch.view()).unwrap() - log_likelihood(&minus, batch.view()).unwrap())
                / (2.0 * step)
        };
        let mut record = |name: String, numeric: f64, analytic: f64| {
            // Relative error with a 1e-3 floor on the scale, so gradients that
            // are exactly zero are held to an absolute 1e-8.
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
            if rel > worst {
                worst = rel;
                where_worst = format!("{name} of RBM {seed} ({n}x{m})");
            }
        };
        for i in 0..n {
            for j in 0..m {
                let g = data.vh[[i, j]] - model.vh[[i, j]];
                record(format!("W[{i},{j}]"), fd(&|q, d| q.weights[[i, j]] += d), g);
            }
            record(
                format!("b[{i}]"),
                fd(&|q, d| q.visible_bias[i] += d),
                data.v[i] - model.v[i],
            );
        }
        for j in 0..m {
            record(
                format!("c[{j}]"),
                fd(&|q, d| q.hidden_bias[j] += d),
                data.h[j] - model.h[j],
            );
        }
    }
    check(
        worst < 1e-5,
        format!("50 RBMs, worst relative error {worst:.2e} at {where_worst}"),
    )
}

fn oracle_equivalence() -> Outcome {
    let graph = ChimeraGraph::new(2, 2, 4, &[]).unwrap();
    let embedding = embed_rbm(4, 4, &graph).unwrap();
    if let Some(c) = embedding.chains().find(|c| c.len() != 2) {
        return check(false, format!("embedding has a chain of length {}", c.len()));
    }
    let cfg = SamplerConfig {
        reads_per_gauge: 100_000,
        voting_threshold: 1.0,
        j_fm: 10.0,
        noise: NoiseModel::disabled(),
        mcmc_sweeps: 10,
        seed: 2,
        ..SamplerConfig::default()
    };
    let mut errors = Vec::new();
    for k in 0..20u64 {
        let p = random_rbm(4, 4, 1.0, 200 + k);
        let est = estimate_expectations_chimera(&p, &cfg, &graph, &embedding, &mut stream(cfg.seed, &[k])).unwrap();
        errors.push(est.expectations.l1_vh(&exact_expectations(&p).unwrap()));
    }
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    check(
        worst < 0.02,
        format!("20 RBMs, 4 gauges x 1e5 reads, vh L1 mean {mean:.4}, worst {worst:.4} (limit 0.02)"),
    )
}

fn gauge_mitigation() -> Outcome {
    let graph = ChimeraGraph::new(2, 2, 4, &[]).unwrap();
    let embedding = embed_rbm(4, 4, &graph).unwrap();
    let base = SamplerConfig {
        beta_eff: 1.0,
        voting_threshold: 1.0,
        j_fm: 1.0,
        noise: NoiseModel::hardware(),
        mcmc_sweeps: 5,
        seed: 3,
        ..SamplerConfig::default()
    };
    // Equal total reads in both arms.
    let four = SamplerConfig {
        reads_per_gauge: 10_000,
        gauges: GaugeName::ALL.to_vec(),
        ..base.clone()
    };
    let identity = SamplerConfig {
        reads_per_gauge: 40_000,
        gauges: vec![GaugeName::Identity],
        ..base.clone()
    };
    let (mut err4, mut err1) = (0.0, 0.0);
    let mut wins = 0;
    for k in 0..20u64 {
        let p = random_rbm(4, 4, 1.0, 300 + k);
        let exact = exact_expectations(&p).unwrap();
        let e4 = estimate_expectations_chimera(&p, &four, &graph, &embedding, &mut stream(base.seed, &[k]))
            .unwrap()
            .expectations
            .l1_vh(&exact);
        let e1 = estimate_expectations_chimera(&p, &identity, &graph, &embedding, &mut stream(base.seed, &[k]))
            .unwrap()
            .expectations
            .l1_vh(&exact);
        err4 += e4 / 20.0;
        err1 += e1 / 20.0;
        wins += usize::from(e4 < e1);
    }

    // Leakage bias each gauge adds, pulled back to the original spin frame.
    let p = random_rbm(4, 4, 1.0, 399);
    let hardware = hardware_model(&p, &base, &embedding).unwrap();
    let gauges = make_gauges(&graph);
    let quantize_only = NoiseModel {
        leakage_fraction: 0.0,
        ..NoiseModel::hardware()
    };
    let pulled_back_leak = |g: usize| -> Vec<f64> {
        let (scaled, _) = rescale_to_hardware(&apply_gauge(&hardware, &gauges[g]), base.ranges).unwrap();
        let rng = &mut stream(0, &[]);
        let leaky = apply_noise(&scaled, &NoiseModel::hardware(), base.ranges, rng).unwrap();
        let clean = apply_noise(&scaled, &quantize_only, base.ranges, rng).unwrap();
        scaled
            .labels
            .iter()
            .enumerate()
            .map(|(k, &q)| f64::from(gauges[g].sign(q)) * (leaky.fields[k] - clean.fields[k]))
            .collect()
    };
    let position = |name| GaugeName::ALL.iter().position(|&g| g == name).unwrap();
    let (g, neg_g) = (
        pulled_back_leak(position(GaugeName::BasketWeave)),
        pulled_back_leak(position(GaugeName::NegBasketWeave)),
    );
    let mismatch = g.iter().zip(&neg_g).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
    let nonzero = g.iter().any(|x| x.abs() > 1e-6);
    check(
        err4 < err1 && mismatch <= 1e-12 && nonzero,
        format!(
            "mean vh L1 4 gauges {err4:.4} vs I only {err1:.4} ({wins}/20 RBMs better); \
             G vs -G leakage max |sum| {mismatch:.1e}"
        ),
    )
}

fn calibration_recovery() -> Outcome {
    let settings = CalibrationSettings {
        candidates: vec![2.0, 3.0, 4.5],
        repetitions: 10,
        seed: 4,
        ..CalibrationSettings::default()
    };
    let report = calibrate(4, 4, &settings, &ExactBoltzmannOracle { device_beta: 3.0 }).unwrap();
    let picks = report.chosen_per_repetition();
    let hits = picks.iter().filter(|&&b| b == 3.0).count();
    check(
        hits == 10 && report.chosen == 3.0,
        format!("chose 3.0 in {hits}/10 repetitions, overall {}", report.chosen),
    )
}

fn fault_robustness() -> Outcome {
    let graph = ChipConfig::default().build().unwrap();
    let faults = graph.faulty_qubits().count();
    let embedding = embed_rbm(FEATURES, 32, &graph).unwrap();
    let mask = embedding.missing_mask();
    let missing = mask.iter().filter(|&&m| m).count();
    let sampler = SamplerConfig {
        reads_per_gauge: 25,
        mcmc_sweeps: 5,
        ..SamplerConfig::default()
    };
    let estimator = ChimeraEstimator::new(sampler, graph).unwrap();
    let schedule = TrainSchedule {
        pretrain_iters: 8,
        seed: 5,
        ..TrainSchedule::default()
    };
    let data = random_binary(60, FEATURES, 5);
    let (mut steps, mut leaks) = (0, 0);
    pretrain(&[FEATURES, 32], data.view(), &estimator, &schedule, &mut |s| {
        steps += 1;
        leaks += ndarray::Zip::from(&s.params.weights)
            .and(&mask)
            .fold(0, |n, &w, &m| n + usize::from(m && w != 0.0));
    })
    .unwrap();
    check(
        faults == 8 && missing == 32 && mask.len() == 1024 && steps == 8 && leaks == 0,
        format!(
            "{faults} faults, {missing} of {} pairs missing; {steps} chimera training steps, \
             {leaks} nonzero masked weights seen",
            mask.len()
        ),
    )
}

fn voting_threshold() -> Outcome {
    let graph = ChipConfig::default().build().unwrap();
    let embedding = embed_rbm(FEATURES, 32, &graph).unwrap();
    let mut counts = Vec::new();
    let mut ok = true;
    // Chains from weak to strong, so some reads have broken chains.
    for (k, j_fm) in [1.0, 3.0, 10.0].into_iter().enumerate() {
        let cfg = SamplerConfig {
            reads_per_gauge: 200,
            j_fm,
            mcmc_sweeps: 5,
            ..SamplerConfig::default()
        };
        let p = random_rbm(FEATURES, 32, 1.0, 600 + k as u64);
        let p = p.with_mask(embedding.missing_mask()).unwrap();
        let hardware = hardware_model(&p, &cfg, &embedding).unwrap();
        let (batch, _) = sample_gauges(&hardware, &cfg, &graph, 6 + k as u64).unwrap();
        let accepted: Vec<usize> = [0.5, 0.75, 1.0]
            .iter()
            .map(|&r| {
                decode_chains(&batch, &embedding, r, &mut stream(7, &[k as u64]))
                    .unwrap()
                    .accepted_count()
            })
            .collect();
        ok &= accepted[0] == batch.num_reads() && accepted[0] >= accepted[1] && accepted[1] >= accepted[2];
        counts.push(format!("j_fm {j_fm}: {accepted:?} of {}", batch.num_reads()));
    }
    check(ok, format!("accepted at r = 0.5, 0.75, 1.0: {}", counts.join("; ")))
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn mnist() -> Option<(CgDataset, CgDataset)> {
    let dir = mnist_dir();
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
    .ok()?;
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte")).ok()?;
    Some((CgDataset::from_raw(&train, None), CgDataset::from_raw(&test, None)))
}

fn cg_mnist_pipeline() -> Outcome {
    let dir = mnist_dir();
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
    .ok()?;
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte")).ok()?;
    let features = coarse_grain(&train.images[0]);
    let in_range = train
        .images
        .iter()
        .take(1000)
        .all(|img| coarse_grain(img).iter().all(|x| (0.0..=1.0).contains(x)));
    let cg = CgDataset::from_raw(&train, None);
    let sizes: Vec<usize> = split_training_sets(&cg, 10, None)
        .unwrap()
        .iter()
        .map(CgDataset::len)
        .collect();
    check(
        train.len() == 60_000
            && test.len() == 10_000
            && train.labels[0] == 5
            && features.len() == 32
            && in_range
            && sizes == vec![6000; 10],
        format!(
            "{} train / {} test items, first label {}, {} features in [0,1], splits {sizes:?}",
            train.len(),
            test.len(),
            train.labels[0],
            features.len()
        ),
    )
}

fn end_to_end_trend() -> Outcome {
    let (train, test) = mnist()?;
    let mut cfg = ExperimentConfig {
        seed: 8,
        layer_sizes: vec![FEATURES, 32, 32, 10],
        pretrain_sweep: vec![1, 5, 10, 20],
        checkpoints: vec![100, 200, 400, 800],
        trials: 5,
        arms: vec![
            Arm {
                name: "cd".into(),
                estimator: annealdbn::sampler::EstimatorKind::Cd1,
            },
            Arm {
                name: "chimera-sim".into(),
                estimator: annealdbn::sampler::EstimatorKind::Chimera,
            },
        ],
        ..ExperimentConfig::default()
    };
    cfg.schedule.backprop_iters = 800;
    cfg.data.train_subset = Some(1000);
    let data = datasets_from(&cfg, &train, test).unwrap();
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-trend");
    std::fs::create_dir_all(&dir).unwrap();
    let results = dir.join("results.csv");
    let outcome = run_comparison(&cfg, &data, &results, true, &mut |_| {}).unwrap();
    let (rows, _) = summarize(&outcome.records).unwrap();
    annealdbn_cli::summary::write_summary(&dir.join("summary.csv"), &rows).unwrap();
    let at = |arm: &str, checkpoint: usize| -> Option<&SummaryRow> {
        rows.iter()
            .find(|r| r.arm == arm && r.n_pretrain == 20 && r.checkpoint == checkpoint)
    };
    let (Some(cd200), Some(q200), Some(cd800), Some(q800)) = (
        at("cd", 200),
        at("chimera-sim", 200),
        at("cd", 800),
        at("chimera-sim", 800),
    ) else {
        return check(false, format!("missing summary rows; see {}", results.display()));
    };
    let a = q200.test_mean >= cd200.test_mean - 0.02;
    let b = q800.test_sd <= cd800.test_sd;
    check(
        a && b,
        format!(
            "(a) {}: test mean at N=20/200 chimera-sim {:.4} vs cd {:.4}; \
             (b) {}: test sd at N=20/800 chimera-sim {:.4} vs cd {:.4}; results in {}",
            if a { "met" } else { "not met" },
            q200.test_mean,
            cd200.test_mean,
            if b { "met" } else { "not met" },
            q800.test_sd,
            cd800.test_sd,
            dir.display()
        ),
    )
}

/// Runs the binary with `args` under `dir` and returns stdout.
fn annealdbn(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_annealdbn"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "annealdbn {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

/// The results file with the wall-time column removed.
fn without_wall_time(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap_or("").split(',').collect();
    let drop = header.iter().position(|&c| c == "wall_time_s");
    text.lines()
        .map(|line| {
            line.split(',')
                .enumerate()
                .filter(|(k, _)| Some(*k) != drop)
                .map(|(_, x)| x)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    // Synthetic labelled data keeps this criterion independent of MNIST.
    let mut rng = stream(9, &[]);
    let mut make = |rows: usize, path: &Path| {
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..10)).collect();
        let x = Array2::from_shape_fn((rows, FEATURES), |(r, c)| {
            let on = (labels[r] + c) % 3 == 0;
            if on == rng.random_bool(0.85) {
                1.0
            } else {
                0.0
            }
        });
        CgDataset::new(x, labels).unwrap().write(path).unwrap();
    };
    make(400, &root.join("train.csv"));
    make(200, &root.join("test.csv"));
    std::fs::write(
        root.join("cfg.toml"),
        "seed = 11\ntrials = 2\npretrain_sweep = [1, 3]\ncheckpoints = [20, 50]\n\
         [data]\ntrain = \"train.csv\"\ntest = \"test.csv\"\n\
         [schedule]\nbackprop_iters = 50\n[sampler]\nreads_per_gauge = 50\nmcmc_sweeps = 5\n",
    )
    .unwrap();
    let run = |out: &str| -> Result<(), String> {
        annealdbn(root, &["--config", "cfg.toml", "--output-dir", out, "compare"])?;
        annealdbn(
            root,
            &[
                "--config",
                "cfg.toml",
                "--output-dir",
                out,
                "pretrain",
                "--estimator",
                "chimera",
                "--iters",
                "2",
                "--model-out",
            ]
            .into_iter()
            .chain([format!("{out}/model.json").as_str()])
            .collect::<Vec<_>>(),
        )?;
        Ok(())
    };
    if let Err(e) = run("a").and_then(|_| run("b")) {
        return check(false, e);
    }
    let results_equal =
        without_wall_time(&root.join("a/results.csv")) == without_wall_time(&root.join("b/results.csv"));
    let read = |p: &str| std::fs::read(root.join(p)).unwrap();
    let summary_equal = read("a/summary.csv") == read("b/summary.csv");
    let model_equal = read("a/model.json") == read("b/model.json");
    let rows = std::fs::read_to_string(root.join("a/results.csv"))
        .unwrap()
        .lines()
        .count()
        - 1;
    check(
        results_equal && summary_equal && model_equal,
        format!(
            "two runs of compare ({rows} result rows) and pretrain: results equal {results_equal}, \
             summary equal {summary_equal}, saved model equal {model_equal}"
        ),
    )
}
