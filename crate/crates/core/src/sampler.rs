//! Expectation estimators: exact enumeration, CD-1, block Gibbs, and a
//! simulated annealer that samples the embedded Ising model on a Chimera
//! graph.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chimera::{embed_rbm, ChimeraGraph, Embedding, QubitId};
use crate::error::{Error, Result};
use crate::ising::{
    apply_gauge, apply_noise, embed_ising, make_gauges, qubo_to_ising, rbm_to_qubo, rescale_to_hardware, GaugeName,
    HardwareRanges, IsingModel, NoiseModel,
};
use crate::rbm::{cd_expectations, exact_expectations, sigmoid, ExpectationSet, RbmParams};

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed for stream `path` under `seed`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Scale folded into the programmed coefficients.
    pub beta_eff: f64,
    /// Inverse temperature at which the simulated device actually samples,
    /// in the same units as `beta_eff`. Defaults to `beta_eff`, which makes
    /// the sampler reproduce the RBM distribution exactly up to chain and
    /// noise effects.
    pub device_beta: Option<f64>,
    pub reads_per_gauge: usize,
    pub gauges: Vec<GaugeName>,
    pub voting_threshold: f64,
    pub j_fm: f64,
    pub noise: NoiseModel,
    pub ranges: HardwareRanges,
    pub mcmc_sweeps: usize,
    /// Adds one Swendsen-Wang cluster update per sweep, needed to move
    /// strongly coupled chains.
    pub cluster_moves: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            beta_eff: 2.0,
            device_beta: None,
            reads_per_gauge: 100,
            gauges: GaugeName::ALL.to_vec(),
            voting_threshold: 0.5,
            j_fm: 1.0,
            noise: NoiseModel::hardware(),
            ranges: HardwareRanges::default(),
            mcmc_sweeps: 20,
            cluster_moves: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.beta_eff > 0.0 && self.beta_eff.is_finite()) {
            return bad(format!("beta_eff must be positive, got {}", self.beta_eff));
        }
        if let Some(b) = self.device_beta {
            if !(b > 0.0 && b.is_finite()) {
                return bad(format!("device_beta must be positive, got {b}"));
            }
        }
        if self.reads_per_gauge == 0 {
            return bad("reads_per_gauge must be at least 1".into());
        }
        if self.gauges.is_empty() {
            return bad("at least one gauge is required".into());
        }
        for (k, g) in self.gauges.iter().enumerate() {
            if self.gauges[..k].contains(g) {
                return bad(format!("gauge {} listed twice", g.symbol()));
            }
        }
        if !(0.5..=1.0).contains(&self.voting_threshold) {
            return bad(format!(
                "voting_threshold must be in [0.5, 1], got {}",
                self.voting_threshold
            ));
        }
        if !(self.j_fm > 0.0 && self.j_fm.is_finite()) {
            return bad(format!("j_fm must be positive, got {}", self.j_fm));
        }
        if self.mcmc_sweeps == 0 {
            return bad("mcmc_sweeps must be at least 1".into());
        }
        self.noise.validate()
    }

    pub fn effective_device_beta(&self) -> f64 {
        self.device_beta.unwrap_or(self.beta_eff)
    }

    pub fn total_reads(&self) -> usize {
        self.reads_per_gauge * self.gauges.len()
    }
}

/// Raw spin reads over a fixed qubit set.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// Column labels (qubit ids).
    pub qubits: Vec<QubitId>,
    /// One row per read, entries ±1.
    pub spins: Array2<i8>,
    /// Gauge each read was taken under, if any.
    pub gauges: Vec<Option<GaugeName>>,
}

impl SampleBatch {
    pub fn num_reads(&self) -> usize {
        self.spins.nrows()
    }

    /// Concatenates batches over the same qubit set.
    pub fn concat(batches: Vec<SampleBatch>) -> Result<SampleBatch> {
        let mut iter = batches.into_iter();
        let Some(first) = iter.next() else {
            return Err(Error::EmptyBatch);
        };
        let qubits = first.qubits.clone();
        let mut rows: Vec<i8> = first.spins.iter().copied().collect();
        let mut gauges = first.gauges;
        let mut count = first.spins.nrows();
        for b in iter {
            if b.qubits != qubits {
                return Err(Error::Dimension("batches cover different qubits".into()));
            }
            rows.extend(b.spins.iter().copied());
            gauges.extend(b.gauges);
            count += b.spins.nrows();
        }
        let spins = Array2::from_shape_vec((count, qubits.len()), rows).map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(SampleBatch { qubits, spins, gauges })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepOptions {
    pub sweeps: usize,
    pub cluster_moves: bool,
}

/// Neighbor lists in compressed form.
struct Adjacency {
    start: Vec<usize>,
    neighbor: Vec<usize>,
    coupling: Vec<f64>,
}

impl Adjacency {
    fn new(model: &IsingModel) -> Self {
        let n = model.len();
        let mut degree = vec![0usize; n];
        for &(a, b, _) in &model.couplings {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut start = vec![0usize; n + 1];
        for i in 0..n {
            start[i + 1] = start[i] + degree[i];
        }
        let mut fill = start.clone();
        let mut neighbor = vec![0usize; start[n]];
        let mut coupling = vec![0.0; start[n]];
        for &(a, b, j) in &model.couplings {
            neighbor[fill[a]] = b;
            coupling[fill[a]] = j;
            fill[a] += 1;
            neighbor[fill[b]] = a;
            coupling[fill[b]] = j;
            fill[b] += 1;
        }
        Self {
            start,
            neighbor,
            coupling,
        }
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

struct Chain<'a> {
    model: &'a IsingModel,
    adj: &'a Adjacency,
    bond_prob: &'a [f64],
    beta: f64,
}

impl Chain<'_> {
    fn gibbs_sweep(&self, spins: &mut [i8], order: &mut [usize], rng: &mut ChaCha8Rng) {
        order.shuffle(rng);
        for &i in order.iter() {
            let mut field = self.model.fields[i];
            for k in self.adj.start[i]..self.adj.start[i + 1] {
                field += self.adj.coupling[k] * f64::from(spins[self.adj.neighbor[k]]);
            }
            spins[i] = if rng.random::<f64>() < sigmoid(2.0 * self.beta * field) {
                1
            } else {
                -1
            };
        }
    }

    fn cluster_move(&self, spins: &mut [i8], parent: &mut [usize], drive: &mut [f64], rng: &mut ChaCha8Rng) {
        for (i, p) in parent.iter_mut().enumerate() {
            *p = i;
        }
        for (&(a, b, j), &p) in self.model.couplings.iter().zip(self.bond_prob) {
            let satisfied = j * f64::from(spins[a] * spins[b]) > 0.0;
            if satisfied && rng.random::<f64>() < p {
                let (ra, rb) = (find(parent, a), find(parent, b));
                if ra != rb {
                    parent[ra] = rb;
                }
            }
        }
        drive.iter_mut().for_each(|d| *d = 0.0);
        for i in 0..spins.len() {
            let r = find(parent, i);
            drive[r] += self.model.fields[i] * f64::from(spins[i]);
        }
        // Heat-bath choice between the cluster as is and flipped; reuse
        // `drive` to store the decision (+1 keep, -1 flip) at each root.
        for i in 0..spins.len() {
            if parent[i] == i {
                let flip = rng.random::<f64>() < sigmoid(-2.0 * self.beta * drive[i]);
                drive[i] = if flip { -1.0 } else { 1.0 };
            }
        }
        for i in 0..spins.len() {
            let r = find(parent, i);
            if drive[r] < 0.0 {
                spins[i] = -spins[i];
            }
        }
    }

    fn read(&self, opts: SweepOptions, rng: &mut ChaCha8Rng) -> Vec<i8> {
        let n = self.model.len();
        let mut spins: Vec<i8> = (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut parent = vec![0usize; n];
        let mut drive = vec![0.0; n];
        for _ in 0..opts.sweeps {
            if opts.cluster_moves {
                self.cluster_move(&mut spins, &mut parent, &mut drive, rng);
            }
            self.gibbs_sweep(&mut spins, &mut order, rng);
        }
        spins
    }
}

/// Draws `n_reads` independent reads from `P(S) ∝ exp(-β E'(S))`.
///
/// Each read restarts from a uniformly random state and runs `opts.sweeps`
/// sweeps of single-site heat-bath updates in random order, each optionally
/// preceded by a Swendsen-Wang cluster update. Reads use independent streams
/// seeded from `seed`, so the result does not depend on thread scheduling.
pub fn sample_ising_seeded(
    model: &IsingModel,
    beta: f64,
    n_reads: usize,
    opts: SweepOptions,
    seed: u64,
) -> Result<SampleBatch> {
    model.check_finite()?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be non-negative, got {beta}")));
    }
    let adj = Adjacency::new(model);
    let bond_prob: Vec<f64> = model
        .couplings
        .iter()
        .map(|c| -(-2.0 * beta * c.2.abs()).exp_m1())
        .collect();
    let chain = Chain {
        model,
        adj: &adj,
        bond_prob: &bond_prob,
        beta,
    };
    let reads: Vec<Vec<i8>> = (0..n_reads)
        .into_par_iter()
        .map(|r| chain.read(opts, &mut stream(seed, &[r as u64])))
        .collect();
    let n = model.len();
    let flat: Vec<i8> = reads.into_iter().flatten().collect();
    Ok(SampleBatch {
        qubits: model.labels.clone(),
        spins: Array2::from_shape_vec((n_reads, n), flat).expect("row lengths match"),
        gauges: vec![None; n_reads],
    })
}

pub fn sample_ising<R: Rng + ?Sized>(
    model: &IsingModel,
    beta: f64,
    n_reads: usize,
    opts: SweepOptions,
    rng: &mut R,
) -> Result<SampleBatch> {
    let seed = rng.random();
    sample_ising_seeded(model, beta, n_reads, opts, seed)
}

/// Reads that survived chain voting, as logical spins.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedBatch {
    /// One row per accepted read; columns are logical nodes.
    pub logical: Array2<i8>,
    /// Index of each accepted read in the source batch.
    pub accepted_reads: Vec<usize>,
    pub rejected_count: usize,
}

impl DecodedBatch {
    pub fn accepted_count(&self) -> usize {
        self.accepted_reads.len()
    }
}

/// Majority-vote decoding of every chain in every read.
///
/// A chain decodes to its majority spin when the majority's share of the
/// chain is at least `threshold`; exact ties go to a fair coin. A read is
/// kept only if every chain decodes.
pub fn decode_chains<R: Rng + ?Sized>(
    batch: &SampleBatch,
    embedding: &Embedding,
    threshold: f64,
    rng: &mut R,
) -> Result<DecodedBatch> {
    if !(0.5..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "voting threshold must be in [0.5, 1], got {threshold}"
        )));
    }
    let column: std::collections::HashMap<QubitId, usize> =
        batch.qubits.iter().enumerate().map(|(k, &q)| (q, k)).collect();
    let chains: Vec<Vec<usize>> = embedding
        .chains()
        .map(|chain| {
            chain
                .iter()
                .map(|q| {
                    column
                        .get(q)
                        .copied()
                        .ok_or_else(|| Error::Dimension(format!("qubit {q} is not in the sample batch")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let nodes = chains.len();
    let mut logical = Vec::new();
    let mut accepted_reads = Vec::new();
    let mut decoded = vec![0i8; nodes];
    for (r, read) in batch.spins.outer_iter().enumerate() {
        let mut ok = true;
        for (node, chain) in chains.iter().enumerate() {
            let up = chain.iter().filter(|&&c| read[c] == 1).count();
            let down = chain.len() - up;
            let majority = up.max(down);
            if (majority as f64) < threshold * chain.len() as f64 {
                ok = false;
                break;
            }
            decoded[node] = match up.cmp(&down) {
                std::cmp::Ordering::Greater => 1,
                std::cmp::Ordering::Less => -1,
                std::cmp::Ordering::Equal => {
                    if rng.random::<bool>() {
                        1
                    } else {
                        -1
                    }
                }
            };
        }
        if ok {
            logical.extend_from_slice(&decoded);
            accepted_reads.push(r);
        }
    }
    let accepted = accepted_reads.len();
    Ok(DecodedBatch {
        logical: Array2::from_shape_vec((accepted, nodes), logical).expect("row lengths match"),
        accepted_reads,
        rejected_count: batch.num_reads() - accepted,
    })
}

/// Sample means of `v_i h_j`, `v_i`, `h_j` over decoded logical reads, with
/// `x = (S + 1)/2`.
pub fn logical_statistics(logical: ArrayView2<i8>, n_visible: usize, n_hidden: usize) -> Result<ExpectationSet> {
    if logical.ncols() != n_visible + n_hidden {
        return Err(Error::Dimension(format!(
            "decoded reads have {} nodes, expected {}",
            logical.ncols(),
            n_visible + n_hidden
        )));
    }
    let count = logical.nrows();
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let x = logical.mapv(|s| if s > 0 { 1.0 } else { 0.0 });
    let v = x.slice(ndarray::s![.., ..n_visible]);
    let h = x.slice(ndarray::s![.., n_visible..]);
    let scale = 1.0 / count as f64;
    Ok(ExpectationSet {
        vh: v.t().dot(&h) * scale,
        v: v.sum_axis(ndarray::Axis(0)) * scale,
        h: h.sum_axis(ndarray::Axis(0)) * scale,
    })
}

/// Output of one annealer-backed estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ChimeraEstimate {
    pub expectations: ExpectationSet,
    /// Connections with no coupler; their `vh` entries are reported as 0.
    pub masked: Array2<bool>,
    pub accepted: usize,
    pub rejected: usize,
    /// Rescale factor applied to fit the hardware ranges (same for every gauge).
    pub scale: f64,
}

/// The embedded, unscaled, ungauged hardware model for `params`.
pub fn hardware_model(params: &RbmParams, cfg: &SamplerConfig, embedding: &Embedding) -> Result<IsingModel> {
    if embedding.n_visible != params.n_visible() || embedding.n_hidden != params.n_hidden() {
        return Err(Error::Dimension(format!(
            "embedding is for a {}x{} RBM, params are {}x{}",
            embedding.n_visible,
            embedding.n_hidden,
            params.n_visible(),
            params.n_hidden()
        )));
    }
    params.check_finite()?;
    let logical = qubo_to_ising(&rbm_to_qubo(params, cfg.beta_eff)?);
    embed_ising(&logical, embedding, cfg.j_fm)
}

/// Collects reads from every configured gauge, returned in the original
/// (ungauged) spin frame, together with the rescale factor.
pub fn sample_gauges(
    hardware: &IsingModel,
    cfg: &SamplerConfig,
    graph: &ChimeraGraph,
    seed: u64,
) -> Result<(SampleBatch, f64)> {
    cfg.validate()?;
    let all = make_gauges(graph);
    let opts = SweepOptions {
        sweeps: cfg.mcmc_sweeps,
        cluster_moves: cfg.cluster_moves,
    };
    let mut batches = Vec::with_capacity(cfg.gauges.len());
    let mut scale = 1.0;
    for &name in &cfg.gauges {
        let g = GaugeName::ALL.iter().position(|&n| n == name).expect("known gauge");
        let gauge = &all[g];
        let (scaled, s) = rescale_to_hardware(&apply_gauge(hardware, gauge), cfg.ranges)?;
        scale = s;
        let programmed = apply_noise(
            &scaled,
            &cfg.noise,
            cfg.ranges,
            &mut stream(seed, &[g as u64, u64::MAX]),
        )?;
        let beta = cfg.effective_device_beta() / s;
        let mut batch = sample_ising_seeded(
            &programmed,
            beta,
            cfg.reads_per_gauge,
            opts,
            derive_seed(seed, &[g as u64]),
        )?;
        let signs: Vec<i8> = batch.qubits.iter().map(|&q| gauge.sign(q)).collect();
        for mut row in batch.spins.outer_iter_mut() {
            row.iter_mut().zip(&signs).for_each(|(x, s)| *x *= s);
        }
        batch.gauges = vec![Some(name); batch.num_reads()];
        batches.push(batch);
    }
    Ok((SampleBatch::concat(batches)?, scale))
}

/// Model expectations from the simulated annealer: embed, sample every gauge,
/// undo the gauges, vote chains, and pool all accepted reads.
pub fn estimate_expectations_chimera<R: Rng + ?Sized>(
    params: &RbmParams,
    cfg: &SamplerConfig,
    graph: &ChimeraGraph,
    embedding: &Embedding,
    rng: &mut R,
) -> Result<ChimeraEstimate> {
    let hardware = hardware_model(params, cfg, embedding)?;
    let seed = derive_seed(cfg.seed, &[rng.random()]);
    let (batch, scale) = sample_gauges(&hardware, cfg, graph, seed)?;
    let decoded = decode_chains(&batch, embedding, cfg.voting_threshold, &mut stream(seed, &[u64::MAX]))?;
    if decoded.accepted_count() == 0 {
        return Err(Error::NoAcceptedSamples {
            total: batch.num_reads(),
        });
    }
    let mut expectations = logical_statistics(decoded.logical.view(), params.n_visible(), params.n_hidden())?;
    let masked = embedding.missing_mask();
    ndarray::Zip::from(&mut expectations.vh).and(&masked).for_each(|x, &m| {
        if m {
            *x = 0.0;
        }
    });
    Ok(ChimeraEstimate {
        expectations,
        masked,
        accepted: decoded.accepted_count(),
        rejected: decoded.rejected_count,
        scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GibbsConfig {
    pub chains: usize,
    pub burn_in: usize,
    /// Total number of recorded samples across all chains.
    pub samples: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self {
            chains: 100,
            burn_in: 50,
            samples: 10_000,
        }
    }
}

/// Block Gibbs estimate of the model expectations.
///
/// Independent chains start from uniform random visible states. After
/// burn-in, every sweep contributes the conditional means `P(h|v)` and
/// `P(v|h)` of the current state rather than the sampled bits.
pub fn estimate_expectations_gibbs<R: Rng + ?Sized>(
    params: &RbmParams,
    cfg: &GibbsConfig,
    rng: &mut R,
) -> Result<ExpectationSet> {
    params.check_finite()?;
    if cfg.chains == 0 || cfg.samples == 0 {
        return Err(Error::InvalidArgument(
            "Gibbs sampling needs at least one chain and one sample".into(),
        ));
    }
    let (n, m) = (params.n_visible(), params.n_hidden());
    let chains = cfg.chains.min(cfg.samples);
    let seed: u64 = rng.random();
    let per_chain: Vec<(ExpectationSet, usize)> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let samples = cfg.samples / chains + usize::from(c < cfg.samples % chains);
            let mut rng = stream(seed, &[c as u64]);
            let mut sum = ExpectationSet::zeros(n, m);
            let mut v: Array1<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
            let mut h = Array1::<f64>::zeros(m);
            for step in 0..cfg.burn_in + samples {
                let ph = sigmoid_vec(&(v.dot(&params.weights) + &params.hidden_bias));
                for (x, &p) in h.iter_mut().zip(&ph) {
                    *x = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
                }
                let pv = sigmoid_vec(&(params.weights.dot(&h) + &params.visible_bias));
                if step >= cfg.burn_in {
                    // Average of the two conditional estimators:
                    // E[v h | v] = v ⊗ P(h|v) and E[v h | h] = P(v|h) ⊗ h.
                    for i in 0..n {
                        for j in 0..m {
                            sum.vh[[i, j]] += 0.5 * (v[i] * ph[j] + pv[i] * h[j]);
                        }
                    }
                    sum.v.scaled_add(0.5, &v);
                    sum.v.scaled_add(0.5, &pv);
                    sum.h.scaled_add(0.5, &h);
                    sum.h.scaled_add(0.5, &ph);
                }
                for (x, &p) in v.iter_mut().zip(&pv) {
                    *x = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
                }
            }
            (sum, samples)
        })
        .collect();
    let mut total = ExpectationSet::zeros(n, m);
    for (s, _) in &per_chain {
        total.vh += &s.vh;
        total.v += &s.v;
        total.h += &s.h;
    }
    let count = per_chain.iter().map(|(_, c)| c).sum::<usize>() as f64;
    total.vh /= count;
    total.v /= count;
    total.h /= count;
    Ok(total)
}

fn sigmoid_vec(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(sigmoid)
}

/// A source of model expectations for RBM training.
pub trait Estimator: Send + Sync {
    fn name(&self) -> &'static str;

    /// Connections this backend cannot represent for an `n × m` RBM
    /// (`true` = absent). Training keeps those weights at zero.
    fn mask(&self, n_visible: usize, n_hidden: usize) -> Result<Option<Array2<bool>>> {
        let _ = (n_visible, n_hidden);
        Ok(None)
    }

    /// `data` is the current training batch; only CD uses it.
    fn model_expectations(
        &self,
        params: &RbmParams,
        data: ArrayView2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ExpectationSet>;
}

pub struct ExactEstimator;

impl Estimator for ExactEstimator {
    fn name(&self) -> &'static str {
        "exact"
    }

    fn model_expectations(
        &self,
        params: &RbmParams,
        _data: ArrayView2<f64>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<ExpectationSet> {
        exact_expectations(params)
    }
}

pub struct Cd1Estimator;

impl Estimator for Cd1Estimator {
    fn name(&self) -> &'static str {
        "cd1"
    }

    fn model_expectations(
        &self,
        params: &RbmParams,
        data: ArrayView2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ExpectationSet> {
        cd_expectations(params, data, rng)
    }
}

pub struct GibbsEstimator(pub GibbsConfig);

impl Estimator for GibbsEstimator {
    fn name(&self) -> &'static str {
        "gibbs"
    }

    fn model_expectations(
        &self,
        params: &RbmParams,
        _data: ArrayView2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ExpectationSet> {
        estimate_expectations_gibbs(params, &self.0, rng)
    }
}

/// Annealer-backed estimator. Embeddings are built on demand per RBM shape.
pub struct ChimeraEstimator {
    pub config: SamplerConfig,
    pub graph: ChimeraGraph,
}

impl ChimeraEstimator {
    pub fn new(config: SamplerConfig, graph: ChimeraGraph) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, graph })
    }

    pub fn estimate(&self, params: &RbmParams, rng: &mut ChaCha8Rng) -> Result<ChimeraEstimate> {
        let embedding = embed_rbm(params.n_visible(), params.n_hidden(), &self.graph)?;
        estimate_expectations_chimera(params, &self.config, &self.graph, &embedding, rng)
    }
}

impl Estimator for ChimeraEstimator {
    fn name(&self) -> &'static str {
        "chimera"
    }

    fn mask(&self, n_visible: usize, n_hidden: usize) -> Result<Option<Array2<bool>>> {
        Ok(Some(embed_rbm(n_visible, n_hidden, &self.graph)?.missing_mask()))
    }

    fn model_expectations(
        &self,
        params: &RbmParams,
        _data: ArrayView2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ExpectationSet> {
        Ok(self.estimate(params, rng)?.expectations)
    }
}

/// Chip description used to build a [`ChimeraEstimator`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChipConfig {
    pub rows: usize,
    pub cols: usize,
    pub cell_size: usize,
    /// Use the built-in eight-fault placement (requires an 8×8, k=4 chip).
    pub synthetic_faults: bool,
}

impl Default for ChipConfig {
    fn default() -> Self {
        Self {
            rows: 8,
            cols: 8,
            cell_size: 4,
            synthetic_faults: true,
        }
    }
}

impl ChipConfig {
    pub fn build(&self) -> Result<ChimeraGraph> {
        let faults = if self.synthetic_faults {
            if (self.rows, self.cols, self.cell_size) != (8, 8, 4) {
                return Err(Error::InvalidArgument(
                    "synthetic faults are defined for an 8x8, k=4 chip only".into(),
                ));
            }
            crate::chimera::synthetic_faults()
        } else {
            Vec::new()
        };
        ChimeraGraph::new(self.rows, self.cols, self.cell_size, &faults)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Exact,
    Cd1,
    Gibbs,
    Chimera,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Exact => "exact",
            EstimatorKind::Cd1 => "cd1",
            EstimatorKind::Gibbs => "gibbs",
            EstimatorKind::Chimera => "chimera",
        }
    }

    pub fn build(self, sampler: &SamplerConfig, chip: &ChipConfig, gibbs: &GibbsConfig) -> Result<Box<dyn Estimator>> {
        Ok(match self {
            EstimatorKind::Exact => Box::new(ExactEstimator),
            EstimatorKind::Cd1 => Box::new(Cd1Estimator),
            EstimatorKind::Gibbs => Box::new(GibbsEstimator(*gibbs)),
            EstimatorKind::Chimera => Box::new(ChimeraEstimator::new(sampler.clone(), chip.build()?)?),
        })
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(EstimatorKind::Exact),
            "cd1" => Ok(EstimatorKind::Cd1),
            "gibbs" => Ok(EstimatorKind::Gibbs),
            "chimera" => Ok(EstimatorKind::Chimera),
            other => Err(Error::InvalidArgument(format!(
                "unknown estimator '{other}' (expected exact, cd1, gibbs or chimera)"
            ))),
        }
    }
}
