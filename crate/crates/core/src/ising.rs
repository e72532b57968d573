//! From RBM parameters to programmable Ising coefficients.
//!
//! Sign convention, used everywhere in this crate:
//!
//! ```text
//! E'(S) = -Σ_i H_i S_i - Σ_(i,j) J_ij S_i S_j,     P(S) ∝ exp(-β E'(S))
//! ```
//!
//! so `J > 0` is ferromagnetic and chain couplers carry `+j_fm`. The QUBO is
//! `Q = (1/β_eff)·[[B, W], [0, C]]`, which makes `xᵀQx = -E(v, h)/β_eff` for the
//! RBM energy `E`. [`qubo_to_ising`] returns an offset with
//! `E'(S) + offset = -xᵀQx` for `x = (S + 1)/2`, so sampling the Ising model at
//! `β = β_eff` reproduces the RBM's Boltzmann distribution.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::chimera::{ChimeraGraph, Embedding, Orientation};
use crate::error::{Error, Result};
use crate::rbm::RbmParams;

/// Upper-triangular QUBO matrix over `x = [v, h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuboMatrix {
    pub q: Array2<f64>,
    pub beta_eff: f64,
    pub n_visible: usize,
    pub n_hidden: usize,
}

impl QuboMatrix {
    /// `xᵀ Q x` for a 0/1 vector.
    pub fn value(&self, x: &[u8]) -> f64 {
        let d = self.q.nrows();
        let mut total = 0.0;
        for i in 0..d {
            if x[i] == 0 {
                continue;
            }
            for j in i..d {
                if x[j] == 1 {
                    total += self.q[[i, j]];
                }
            }
        }
        total
    }
}

pub fn rbm_to_qubo(params: &RbmParams, beta_eff: f64) -> Result<QuboMatrix> {
    if !(beta_eff > 0.0 && beta_eff.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "beta_eff must be positive, got {beta_eff}"
        )));
    }
    let (n, m) = (params.n_visible(), params.n_hidden());
    let mut q = Array2::zeros((n + m, n + m));
    for i in 0..n {
        q[[i, i]] = params.visible_bias[i] / beta_eff;
        for j in 0..m {
            q[[i, n + j]] = params.weights[[i, j]] / beta_eff;
        }
    }
    for j in 0..m {
        q[[n + j, n + j]] = params.hidden_bias[j] / beta_eff;
    }
    Ok(QuboMatrix {
        q,
        beta_eff,
        n_visible: n,
        n_hidden: m,
    })
}

/// Ising model on an arbitrary node set.
///
/// `labels[k]` names node `k`: a logical unit index for logical models, a
/// qubit id for hardware models. Couplings use local node indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsingModel {
    pub labels: Vec<usize>,
    pub fields: Vec<f64>,
    pub couplings: Vec<(usize, usize, f64)>,
    pub offset: f64,
}

impl IsingModel {
    pub fn zeros(labels: Vec<usize>) -> Self {
        let n = labels.len();
        Self {
            labels,
            fields: vec![0.0; n],
            couplings: Vec::new(),
            offset: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `E'(S)`, excluding the offset.
    pub fn energy(&self, spins: &[i8]) -> f64 {
        let field: f64 = self.fields.iter().zip(spins).map(|(h, &s)| h * f64::from(s)).sum();
        let coupling: f64 = self
            .couplings
            .iter()
            .map(|&(a, b, j)| j * f64::from(spins[a] * spins[b]))
            .sum();
        -field - coupling
    }

    pub fn max_abs_field(&self) -> f64 {
        self.fields.iter().fold(0.0, |acc, h| acc.max(h.abs()))
    }

    pub fn max_abs_coupling(&self) -> f64 {
        self.couplings.iter().fold(0.0, |acc, c| acc.max(c.2.abs()))
    }

    pub fn check_finite(&self) -> Result<()> {
        let ok = self.fields.iter().all(|h| h.is_finite())
            && self.couplings.iter().all(|c| c.2.is_finite())
            && self.offset.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite("Ising coefficients".into()))
        }
    }

    /// Human-readable field and coupling list.
    pub fn dump(&self) -> String {
        let mut out = format!(
            "# ising nodes={} couplings={} offset={}\n",
            self.len(),
            self.couplings.len(),
            self.offset
        );
        for (label, h) in self.labels.iter().zip(&self.fields) {
            out.push_str(&format!("h {label} {h}\n"));
        }
        for &(a, b, j) in &self.couplings {
            out.push_str(&format!("J {} {} {j}\n", self.labels[a], self.labels[b]));
        }
        out
    }
}

/// Substitutes `x = (S + 1)/2` into the QUBO.
pub fn qubo_to_ising(qubo: &QuboMatrix) -> IsingModel {
    let d = qubo.q.nrows();
    let mut model = IsingModel::zeros((0..d).collect());
    let mut constant = 0.0;
    for i in 0..d {
        let diag = qubo.q[[i, i]];
        model.fields[i] += diag / 2.0;
        constant += diag / 2.0;
        for j in (i + 1)..d {
            let w = qubo.q[[i, j]];
            if w == 0.0 {
                continue;
            }
            model.fields[i] += w / 4.0;
            model.fields[j] += w / 4.0;
            model.couplings.push((i, j, w / 4.0));
            constant += w / 4.0;
        }
    }
    model.offset = -constant;
    model
}

/// Places a logical visible/hidden Ising model on the hardware qubits of an
/// embedding. Each logical field is split evenly over its chain, each logical
/// coupling goes on the crossing coupler, and every chain coupler gets the
/// ferromagnetic strength `j_fm`. Node order follows
/// [`Embedding::active_qubits`].
pub fn embed_ising(logical: &IsingModel, embedding: &Embedding, j_fm: f64) -> Result<IsingModel> {
    if !(j_fm > 0.0 && j_fm.is_finite()) {
        return Err(Error::InvalidArgument(format!("j_fm must be positive, got {j_fm}")));
    }
    let n = embedding.n_visible;
    if logical.len() != embedding.num_logical() {
        return Err(Error::Dimension(format!(
            "logical model has {} nodes, embedding expects {}",
            logical.len(),
            embedding.num_logical()
        )));
    }

    let qubits = embedding.active_qubits();
    let index_of: std::collections::HashMap<usize, usize> = qubits.iter().enumerate().map(|(k, &q)| (q, k)).collect();
    let mut model = IsingModel::zeros(qubits);
    model.offset = logical.offset;

    for node in 0..embedding.num_logical() {
        let chain = embedding.chain(node);
        let share = logical.fields[node] / chain.len() as f64;
        for q in chain {
            model.fields[index_of[q]] += share;
        }
        for &(a, b) in &embedding.chain_couplers[node] {
            model.couplings.push((index_of[&a], index_of[&b], j_fm));
        }
    }

    for &(a, b, j) in &logical.couplings {
        let (v, h) = if a < n && b >= n {
            (a, b - n)
        } else if b < n && a >= n {
            (b, a - n)
        } else {
            return Err(Error::InvalidArgument(format!(
                "logical coupling ({a}, {b}) is not between a visible and a hidden unit"
            )));
        };
        match embedding.logical_couplers.get(&(v, h)) {
            Some(&(qa, qb)) => model.couplings.push((index_of[&qa], index_of[&qb], j)),
            None if j == 0.0 => {}
            None => {
                return Err(Error::InvalidArgument(format!(
                    "coupling W[{v}][{h}] = {j} has no usable coupler; mask it first"
                )))
            }
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GaugeName {
    #[serde(rename = "I")]
    Identity,
    #[serde(rename = "G")]
    BasketWeave,
    #[serde(rename = "-G")]
    NegBasketWeave,
    #[serde(rename = "-I")]
    NegIdentity,
}

impl GaugeName {
    pub const ALL: [GaugeName; 4] = [
        GaugeName::Identity,
        GaugeName::BasketWeave,
        GaugeName::NegBasketWeave,
        GaugeName::NegIdentity,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            GaugeName::Identity => "I",
            GaugeName::BasketWeave => "G",
            GaugeName::NegBasketWeave => "-G",
            GaugeName::NegIdentity => "-I",
        }
    }
}

/// Per-qubit spin relabeling `S → s·S`, indexed by qubit id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gauge {
    pub name: GaugeName,
    pub signs: Vec<i8>,
}

impl Gauge {
    pub fn sign(&self, label: usize) -> i8 {
        self.signs[label]
    }
}

/// The identity, the checkerboard ("basket weave") gauge, its negation, and
/// the global flip. The checkerboard flips horizontal qubits in cells with
/// even `row + col` and vertical qubits in odd cells, which reverses the sign
/// of every coupler on the chip.
pub fn make_gauges(graph: &ChimeraGraph) -> [Gauge; 4] {
    let basket: Vec<i8> = (0..graph.num_qubits())
        .map(|id| {
            let q = graph.qubit(id);
            let even = (q.cell_row + q.cell_col).is_multiple_of(2);
            let flipped = match q.orientation {
                Orientation::Horizontal => even,
                Orientation::Vertical => !even,
            };
            if flipped {
                -1
            } else {
                1
            }
        })
        .collect();
    let n = graph.num_qubits();
    [
        Gauge {
            name: GaugeName::Identity,
            signs: vec![1; n],
        },
        Gauge {
            name: GaugeName::BasketWeave,
            signs: basket.clone(),
        },
        Gauge {
            name: GaugeName::NegBasketWeave,
            signs: basket.iter().map(|s| -s).collect(),
        },
        Gauge {
            name: GaugeName::NegIdentity,
            signs: vec![-1; n],
        },
    ]
}

/// `H_i → s_i H_i`, `J_ij → s_i s_j J_ij`. A configuration `S` of the gauged
/// model corresponds to `s ⊙ S` of the original.
pub fn apply_gauge(model: &IsingModel, gauge: &Gauge) -> IsingModel {
    let s: Vec<f64> = model.labels.iter().map(|&l| f64::from(gauge.sign(l))).collect();
    IsingModel {
        labels: model.labels.clone(),
        fields: model.fields.iter().zip(&s).map(|(h, s)| h * s).collect(),
        couplings: model
            .couplings
            .iter()
            .map(|&(a, b, j)| (a, b, s[a] * s[b] * j))
            .collect(),
        offset: model.offset,
    }
}

/// Symmetric programming ranges `[-h_max, h_max]` and `[-j_max, j_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareRanges {
    pub h_max: f64,
    pub j_max: f64,
}

impl Default for HardwareRanges {
    fn default() -> Self {
        Self { h_max: 2.0, j_max: 1.0 }
    }
}

/// Shrinks all coefficients by one factor `≤ 1` so that they fit the
/// programming ranges. Returns the model and the factor applied.
pub fn rescale_to_hardware(model: &IsingModel, ranges: HardwareRanges) -> Result<(IsingModel, f64)> {
    if !(ranges.h_max > 0.0 && ranges.j_max > 0.0) {
        return Err(Error::InvalidArgument("hardware ranges must be non-empty".into()));
    }
    let mut scale = 1.0f64;
    let h = model.max_abs_field();
    if h > ranges.h_max {
        scale = scale.min(ranges.h_max / h);
    }
    let j = model.max_abs_coupling();
    if j > ranges.j_max {
        scale = scale.min(ranges.j_max / j);
    }
    if scale == 1.0 {
        return Ok((model.clone(), 1.0));
    }
    let scaled = IsingModel {
        labels: model.labels.clone(),
        fields: model
            .fields
            .iter()
            .map(|h| (h * scale).clamp(-ranges.h_max, ranges.h_max))
            .collect(),
        couplings: model
            .couplings
            .iter()
            .map(|&(a, b, j)| (a, b, (j * scale).clamp(-ranges.j_max, ranges.j_max)))
            .collect(),
        offset: model.offset * scale,
    };
    Ok((scaled, scale))
}

/// Intrinsic control error of the programmed coefficients. Fields left out
/// of a serialized model take their [`NoiseModel::hardware`] values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default = "NoiseModel::hardware")]
pub struct NoiseModel {
    pub enabled: bool,
    pub precision_bits: u32,
    pub leakage_fraction: f64,
    pub jitter_sd: f64,
}

impl NoiseModel {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::hardware()
        }
    }

    /// Four-bit programming precision with 3% coupler-to-bias leakage.
    pub fn hardware() -> Self {
        Self {
            enabled: true,
            precision_bits: 4,
            leakage_fraction: 0.03,
            jitter_sd: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.precision_bits < 2 || self.precision_bits > 52 {
            return Err(Error::InvalidArgument(format!(
                "precision_bits must be in 2..=52, got {}",
                self.precision_bits
            )));
        }
        if !(self.leakage_fraction >= 0.0) || !(self.jitter_sd >= 0.0) {
            return Err(Error::InvalidArgument("leakage and jitter must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::disabled()
    }
}

/// Snaps `x` to the zero-centred grid `k·step`, `step = 2·max/(2^bits - 1)`.
/// Levels saturate at `|k| = 2^(bits-1) - 1`, the outermost grid point
/// inside `[-max, max]`.
pub fn quantize(x: f64, max: f64, bits: u32) -> f64 {
    let step = 2.0 * max / ((1u64 << bits) - 1) as f64;
    let top = ((1u64 << (bits - 1)) - 1) as f64;
    (x / step).round().clamp(-top, top) * step
}

/// Bias each node picks up from its programmed couplers: `fraction·J` from
/// every incident coupling, with the sign of `J`.
pub fn leakage_bias(model: &IsingModel, fraction: f64) -> Vec<f64> {
    let mut bias = vec![0.0; model.len()];
    for &(a, b, j) in &model.couplings {
        bias[a] += fraction * j;
        bias[b] += fraction * j;
    }
    bias
}

/// Quantize, then leak coupler strength into endpoint biases, then jitter.
pub fn apply_noise<R: Rng + ?Sized>(
    model: &IsingModel,
    noise: &NoiseModel,
    ranges: HardwareRanges,
    rng: &mut R,
) -> Result<IsingModel> {
    if !noise.enabled {
        return Ok(model.clone());
    }
    noise.validate()?;
    let bits = noise.precision_bits;
    let mut out = IsingModel {
        labels: model.labels.clone(),
        fields: model.fields.iter().map(|&h| quantize(h, ranges.h_max, bits)).collect(),
        couplings: model
            .couplings
            .iter()
            .map(|&(a, b, j)| (a, b, quantize(j, ranges.j_max, bits)))
            .collect(),
        offset: model.offset,
    };
    if noise.leakage_fraction > 0.0 {
        let leak = leakage_bias(&out, noise.leakage_fraction);
        for (h, leak) in out.fields.iter_mut().zip(leak) {
            *h += leak;
        }
    }
    if noise.jitter_sd > 0.0 {
        let normal = Normal::new(0.0, noise.jitter_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for h in &mut out.fields {
            *h += normal.sample(rng);
        }
        for c in &mut out.couplings {
            c.2 += normal.sample(rng);
        }
    }
    Ok(out)
}

/// Exact Boltzmann probabilities `P(S) ∝ exp(-β E'(S))` over all `2^n`
/// configurations; bit `k` of the state index is node `k` (1 ↦ +1).
pub fn boltzmann_distribution(model: &IsingModel, beta: f64) -> Result<Vec<f64>> {
    let n = model.len();
    if n > 24 {
        return Err(Error::TooLargeForEnumeration { size: n, limit: 24 });
    }
    let mut spins = vec![0i8; n];
    let log_weights: Vec<f64> = (0..1usize << n)
        .map(|state| {
            fill_spins(state, &mut spins);
            -beta * model.energy(&spins)
        })
        .collect();
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Writes the spin configuration encoded by `state` into `spins`.
pub fn fill_spins(state: usize, spins: &mut [i8]) {
    for (k, s) in spins.iter_mut().enumerate() {
        *s = if (state >> k) & 1 == 1 { 1 } else { -1 };
    }
}
