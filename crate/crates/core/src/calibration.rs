//! Choosing `β_eff` for an RBM size by matching sampled statistics against a
//! reference over a grid of candidates.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chimera::{embed_rbm, ChimeraGraph, Embedding};
use crate::error::{Error, Result};
use crate::rbm::{exact_expectations, ExpectationSet, RbmParams, DEFAULT_ENUMERATION_LIMIT};
use crate::sampler::{estimate_expectations_chimera, estimate_expectations_gibbs, stream, GibbsConfig, SamplerConfig};

pub const DEFAULT_CANDIDATES: [f64; 3] = [2.0, 3.0, 4.5];

/// Operating points reported for a physical annealer, keyed by square RBM
/// size. These are defaults for configuration, not simulator outcomes.
pub fn reference_beta_eff(n_visible: usize, n_hidden: usize) -> Option<f64> {
    match (n_visible, n_hidden) {
        (5, 5) | (8, 8) => Some(4.5),
        (12, 12) | (14, 14) | (16, 16) => Some(3.0),
        (32, 32) => Some(2.0),
        _ => None,
    }
}

/// A sampler whose output depends on the `β_eff` folded into the programmed
/// coefficients.
pub trait BetaProbe: Sync {
    fn reads(&self) -> usize;

    fn estimate(&self, params: &RbmParams, beta_eff: f64, rng: &mut ChaCha8Rng) -> Result<ExpectationSet>;
}

/// The simulated annealer. Its physical temperature is fixed by the template:
/// `device_beta` if set, otherwise the template's `beta_eff`.
pub struct ChimeraProbe {
    template: SamplerConfig,
    graph: ChimeraGraph,
    embedding: Embedding,
}

impl ChimeraProbe {
    pub fn new(template: &SamplerConfig, graph: ChimeraGraph, n_visible: usize, n_hidden: usize) -> Result<Self> {
        template.validate()?;
        let embedding = embed_rbm(n_visible, n_hidden, &graph)?;
        let mut template = template.clone();
        template.device_beta = Some(template.effective_device_beta());
        Ok(Self {
            template,
            graph,
            embedding,
        })
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }
}

impl BetaProbe for ChimeraProbe {
    fn reads(&self) -> usize {
        self.template.total_reads()
    }

    fn estimate(&self, params: &RbmParams, beta_eff: f64, rng: &mut ChaCha8Rng) -> Result<ExpectationSet> {
        let cfg = SamplerConfig {
            beta_eff,
            ..self.template.clone()
        };
        let params = params.clone().with_mask(self.embedding.missing_mask())?;
        Ok(estimate_expectations_chimera(&params, &cfg, &self.graph, &self.embedding, rng)?.expectations)
    }
}

/// An ideal Boltzmann sampler at inverse temperature `device_beta`.
/// Programming with `β_eff` and sampling at `β*` yields the RBM distribution
/// with all parameters multiplied by `β*/β_eff`, computed here exactly.
pub struct ExactBoltzmannOracle {
    pub device_beta: f64,
}

impl BetaProbe for ExactBoltzmannOracle {
    fn reads(&self) -> usize {
        0
    }

    fn estimate(&self, params: &RbmParams, beta_eff: f64, _rng: &mut ChaCha8Rng) -> Result<ExpectationSet> {
        let ratio = self.device_beta / beta_eff;
        let mut scaled = params.clone();
        scaled.weights *= ratio;
        scaled.visible_bias *= ratio;
        scaled.hidden_bias *= ratio;
        exact_expectations(&scaled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMethod {
    Exact,
    Mcmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSettings {
    pub candidates: Vec<f64>,
    pub repetitions: usize,
    /// Random RBMs have weights and biases uniform in `[-spread, spread]`.
    pub spread: f64,
    /// Used for the reference when the RBM is too large to enumerate.
    pub reference_gibbs: GibbsConfig,
    pub seed: u64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            candidates: DEFAULT_CANDIDATES.to_vec(),
            repetitions: 10,
            spread: 1.0,
            reference_gibbs: GibbsConfig {
                chains: 200,
                burn_in: 200,
                samples: 200_000,
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_visible: usize,
    pub n_hidden: usize,
    pub candidates: Vec<f64>,
    /// Mean `vh` L1 error per candidate.
    pub l1_errors: Vec<f64>,
    /// `per_repetition[r][c]`: error of candidate `c` on random RBM `r`.
    pub per_repetition: Vec<Vec<f64>>,
    pub chosen: f64,
    pub repetitions: usize,
    pub reads: usize,
    pub reference: ReferenceMethod,
}

impl CalibrationReport {
    /// The best candidate on each repetition taken alone.
    pub fn chosen_per_repetition(&self) -> Vec<f64> {
        self.per_repetition
            .iter()
            .map(|errors| self.candidates[argmin(errors)])
            .collect()
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "beta_eff calibration for {}x{} RBM ({} repetitions, {} reads, {} reference)\n",
            self.n_visible,
            self.n_hidden,
            self.repetitions,
            self.reads,
            match self.reference {
                ReferenceMethod::Exact => "exact",
                ReferenceMethod::Mcmc => "mcmc",
            }
        );
        out.push_str("candidate  mean_l1_vh\n");
        for (c, e) in self.candidates.iter().zip(&self.l1_errors) {
            let mark = if *c == self.chosen { "  <- chosen" } else { "" };
            out.push_str(&format!("{c:>9}  {e:.6}{mark}\n"));
        }
        out
    }
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = k;
        }
    }
    best
}

/// Grid search for the `β_eff` that makes `probe` best reproduce the true
/// model expectations of random RBMs of the given size.
pub fn calibrate(
    n_visible: usize,
    n_hidden: usize,
    settings: &CalibrationSettings,
    probe: &dyn BetaProbe,
) -> Result<CalibrationReport> {
    if settings.candidates.is_empty() {
        return Err(Error::InvalidArgument("no beta_eff candidates given".into()));
    }
    if let Some(bad) = settings.candidates.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "beta_eff candidate {bad} is not positive"
        )));
    }
    if settings.repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be at least 1".into()));
    }
    let reference = if n_visible + n_hidden <= DEFAULT_ENUMERATION_LIMIT {
        ReferenceMethod::Exact
    } else {
        ReferenceMethod::Mcmc
    };

    let per_repetition: Vec<Vec<f64>> = (0..settings.repetitions)
        .into_par_iter()
        .map(|rep| -> Result<Vec<f64>> {
            let r = rep as u64;
            let params =
                RbmParams::random_uniform(n_visible, n_hidden, settings.spread, &mut stream(settings.seed, &[r]));
            let truth = match reference {
                ReferenceMethod::Exact => exact_expectations(&params)?,
                ReferenceMethod::Mcmc => estimate_expectations_gibbs(
                    &params,
                    &settings.reference_gibbs,
                    &mut stream(settings.seed, &[r, u64::MAX]),
                )?,
            };
            settings
                .candidates
                .iter()
                .enumerate()
                .map(|(c, &beta)| {
                    let est = probe.estimate(&params, beta, &mut stream(settings.seed, &[r, c as u64]))?;
                    Ok(est.l1_vh(&truth))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let reps = settings.repetitions as f64;
    let l1_errors: Vec<f64> = (0..settings.candidates.len())
        .map(|c| per_repetition.iter().map(|errs| errs[c]).sum::<f64>() / reps)
        .collect();
    let chosen = settings.candidates[argmin(&l1_errors)];
    Ok(CalibrationReport {
        n_visible,
        n_hidden,
        candidates: settings.candidates.clone(),
        l1_errors,
        per_repetition,
        chosen,
        repetitions: settings.repetitions,
        reads: probe.reads(),
        reference,
    })
}
