//! Per-(arm, N, checkpoint) means and sample standard deviations over trials.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::experiment::ResultRecord;
use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: String,
    pub n_pretrain: usize,
    pub checkpoint: usize,
    pub trials: usize,
    pub train_mean: f64,
    pub train_sd: f64,
    pub test_mean: f64,
    pub test_sd: f64,
    /// Only one trial: the standard deviations are reported as 0 but are not
    /// estimates.
    pub single_trial: bool,
}

/// Mean and sample (n − 1) standard deviation; the deviation is 0 for a
/// single value.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups successful records. Arms keep their order of first appearance.
/// Returns the rows and a warning per group left with no usable records.
pub fn summarize(records: &[ResultRecord]) -> anyhow::Result<(Vec<SummaryRow>, Vec<String>)> {
    if records.is_empty() {
        return Err(UsageError("no result records to summarize".into()).into());
    }
    let mut arm_order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<(usize, usize, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut empty = Vec::new();
    for r in records {
        let arm = match arm_order.iter().position(|a| *a == r.arm) {
            Some(k) => k,
            None => {
                arm_order.push(&r.arm);
                arm_order.len() - 1
            }
        };
        let key = (arm, r.n_pretrain, r.checkpoint);
        match (r.train_accuracy, r.test_accuracy) {
            (Some(train), Some(test)) if r.error.is_empty() => {
                let g = groups.entry(key).or_default();
                g.0.push(train);
                g.1.push(test);
            }
            _ => empty.push(key),
        }
    }
    let mut warnings = Vec::new();
    empty.sort_unstable();
    empty.dedup();
    for key in empty {
        if !groups.contains_key(&key) {
            warnings.push(format!(
                "no successful trials for arm {} N={} checkpoint {}; group omitted",
                arm_order[key.0], key.1, key.2
            ));
        }
    }
    let rows = groups
        .into_iter()
        .map(|((arm, n_pretrain, checkpoint), (train, test))| {
            let (train_mean, train_sd) = mean_sd(&train);
            let (test_mean, test_sd) = mean_sd(&test);
            SummaryRow {
                arm: arm_order[arm].to_string(),
                n_pretrain,
                checkpoint,
                trials: train.len(),
                train_mean,
                train_sd,
                test_mean,
                test_sd,
                single_trial: train.len() == 1,
            }
        })
        .collect();
    Ok((rows, warnings))
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> anyhow::Result<Vec<SummaryRow>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    reader
        .deserialize()
        .map(|r| r.with_context(|| format!("reading {}", path.display())))
        .collect()
}

/// A matplotlib script drawing one figure per checkpoint with one panel per
/// arm: accuracy against pretraining iterations, train dashed, test solid,
/// ±1 standard deviation error bars.
pub fn plot_script(summary_file: &str) -> String {
    PLOT_TEMPLATE.replace("@SUMMARY@", summary_file)
}

const PLOT_TEMPLATE: &str = r#"#!/usr/bin/env python3
# Generated by `annealdbn summarize`. Usage: python3 plot_summary.py [summary.csv]
import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = Path(__file__).resolve().parent
source = Path(sys.argv[1]) if len(sys.argv) > 1 else here / "@SUMMARY@"
rows = list(csv.DictReader(open(source, newline="")))
arms = list(dict.fromkeys(r["arm"] for r in rows))
colors = ["tab:red", "tab:blue", "tab:green", "tab:purple"]

series = defaultdict(list)
for r in rows:
    series[(int(r["checkpoint"]), r["arm"])].append(r)

for checkpoint in sorted({int(r["checkpoint"]) for r in rows}):
    fig, axes = plt.subplots(1, len(arms), figsize=(5 * len(arms), 4), sharey=True, squeeze=False)
    for k, arm in enumerate(arms):
        ax = axes[0][k]
        pts = sorted(series[(checkpoint, arm)], key=lambda r: int(r["n_pretrain"]))
        n = [int(r["n_pretrain"]) for r in pts]
        color = colors[k % len(colors)]
        ax.errorbar(n, [float(r["train_mean"]) for r in pts], yerr=[float(r["train_sd"]) for r in pts],
                    linestyle="--", color=color, capsize=3, label="train")
        ax.errorbar(n, [float(r["test_mean"]) for r in pts], yerr=[float(r["test_sd"]) for r in pts],
                    linestyle="-", color=color, capsize=3, label="test")
        ax.set_title(f"{arm}, {checkpoint} backprop iterations")
        ax.set_xlabel("pretraining iterations")
        ax.set_ylabel("accuracy")
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    out = source.with_name(f"accuracy_backprop{checkpoint}.png")
    fig.savefig(out, dpi=120)
    print(out)
"#;
