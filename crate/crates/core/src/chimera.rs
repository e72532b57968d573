//! Chimera hardware topology and the fixed row/column chain embedding of
//! bipartite RBMs.
//!
//! A Chimera graph is a `rows × cols` lattice of unit cells. Each cell holds
//! `k` vertical and `k` horizontal qubits joined as a complete bipartite
//! `K_{k,k}`. Vertical qubits also couple to the same-index vertical qubit in
//! the cells above and below; horizontal qubits to the same-index horizontal
//! qubit in the cells left and right.
//!
//! Visible RBM units are laid out along columns of vertical qubits and hidden
//! units along rows of horizontal qubits, so every visible/hidden pair crosses
//! in exactly one cell where an intra-cell coupler realizes its weight.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Vertical,
    Horizontal,
}

/// Coordinates of one physical qubit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Qubit {
    pub cell_row: usize,
    pub cell_col: usize,
    pub orientation: Orientation,
    pub index: usize,
}

impl Qubit {
    pub fn new(cell_row: usize, cell_col: usize, orientation: Orientation, index: usize) -> Self {
        Self {
            cell_row,
            cell_col,
            orientation,
            index,
        }
    }
}

impl fmt::Display for Qubit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = match self.orientation {
            Orientation::Vertical => 'V',
            Orientation::Horizontal => 'H',
        };
        write!(f, "({},{},{o},{})", self.cell_row, self.cell_col, self.index)
    }
}

pub type QubitId = usize;
pub type Coupler = (QubitId, QubitId);

#[derive(Debug, Clone)]
pub struct ChimeraGraph {
    rows: usize,
    cols: usize,
    k: usize,
    couplers: Vec<Coupler>,
    coupler_set: HashSet<Coupler>,
    faulty: Vec<bool>,
}

impl ChimeraGraph {
    pub fn new(rows: usize, cols: usize, k: usize, faulty: &[Qubit]) -> Result<Self> {
        if rows == 0 || cols == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "Chimera dimensions must be positive, got {rows}x{cols} with k={k}"
            )));
        }
        let mut graph = Self {
            rows,
            cols,
            k,
            couplers: Vec::new(),
            coupler_set: HashSet::new(),
            faulty: vec![false; rows * cols * 2 * k],
        };

        for r in 0..rows {
            for c in 0..cols {
                for a in 0..k {
                    for b in 0..k {
                        graph.add_coupler(
                            Qubit::new(r, c, Orientation::Vertical, a),
                            Qubit::new(r, c, Orientation::Horizontal, b),
                        );
                    }
                }
                for t in 0..k {
                    if r + 1 < rows {
                        graph.add_coupler(
                            Qubit::new(r, c, Orientation::Vertical, t),
                            Qubit::new(r + 1, c, Orientation::Vertical, t),
                        );
                    }
                    if c + 1 < cols {
                        graph.add_coupler(
                            Qubit::new(r, c, Orientation::Horizontal, t),
                            Qubit::new(r, c + 1, Orientation::Horizontal, t),
                        );
                    }
                }
            }
        }

        for q in faulty {
            let id = graph.id_checked(q)?;
            if graph.faulty[id] {
                return Err(Error::InvalidArgument(format!("faulty qubit {q} listed twice")));
            }
            graph.faulty[id] = true;
        }
        Ok(graph)
    }

    fn add_coupler(&mut self, a: Qubit, b: Qubit) {
        let (a, b) = (self.id(&a), self.id(&b));
        let edge = (a.min(b), a.max(b));
        self.couplers.push(edge);
        self.coupler_set.insert(edge);
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_size(&self) -> usize {
        self.k
    }

    pub fn num_qubits(&self) -> usize {
        self.faulty.len()
    }

    pub fn id(&self, q: &Qubit) -> QubitId {
        let o = match q.orientation {
            Orientation::Vertical => 0,
            Orientation::Horizontal => 1,
        };
        ((q.cell_row * self.cols + q.cell_col) * 2 + o) * self.k + q.index
    }

    fn id_checked(&self, q: &Qubit) -> Result<QubitId> {
        if q.cell_row >= self.rows || q.cell_col >= self.cols || q.index >= self.k {
            return Err(Error::InvalidArgument(format!(
                "qubit {q} is outside the {}x{} grid with k={}",
                self.rows, self.cols, self.k
            )));
        }
        Ok(self.id(q))
    }

    pub fn qubit(&self, id: QubitId) -> Qubit {
        let index = id % self.k;
        let rest = id / self.k;
        let orientation = if rest.is_multiple_of(2) {
            Orientation::Vertical
        } else {
            Orientation::Horizontal
        };
        let cell = rest / 2;
        Qubit::new(cell / self.cols, cell % self.cols, orientation, index)
    }

    pub fn is_faulty(&self, id: QubitId) -> bool {
        self.faulty[id]
    }

    pub fn faulty_qubits(&self) -> impl Iterator<Item = QubitId> + '_ {
        self.faulty.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i)
    }

    /// Every coupler of the lattice, usable or not, with endpoints ordered.
    pub fn couplers(&self) -> &[Coupler] {
        &self.couplers
    }

    pub fn is_usable(&self, a: QubitId, b: QubitId) -> bool {
        let edge = (a.min(b), a.max(b));
        self.coupler_set.contains(&edge) && !self.faulty[a] && !self.faulty[b]
    }

    pub fn usable_couplers(&self) -> impl Iterator<Item = Coupler> + '_ {
        self.couplers
            .iter()
            .copied()
            .filter(|&(a, b)| !self.faulty[a] && !self.faulty[b])
    }

    /// Number of usable couplers incident to `id`.
    pub fn degree(&self, id: QubitId) -> usize {
        if self.faulty[id] {
            return 0;
        }
        self.usable_couplers().filter(|&(a, b)| a == id || b == id).count()
    }

    /// Edge list for inspection: one line per coupler, faulty endpoints flagged.
    pub fn edge_list(&self) -> String {
        let mut out = format!(
            "# chimera rows={} cols={} k={} qubits={} couplers={} faulty={}\n",
            self.rows,
            self.cols,
            self.k,
            self.num_qubits(),
            self.couplers.len(),
            self.faulty_qubits().count()
        );
        for &(a, b) in &self.couplers {
            let usable = if self.is_usable(a, b) { "usable" } else { "unusable" };
            out.push_str(&format!("{a} {b} {} {} {usable}\n", self.qubit(a), self.qubit(b)));
        }
        out
    }
}

/// Logical-unit to qubit-chain map for an `n_visible × n_hidden` RBM.
///
/// Logical nodes are numbered visible first (`0..n`), then hidden (`n..n+m`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Embedding {
    pub n_visible: usize,
    pub n_hidden: usize,
    pub visible_chains: Vec<Vec<QubitId>>,
    pub hidden_chains: Vec<Vec<QubitId>>,
    /// Couplers joining consecutive usable members, indexed by logical node.
    pub chain_couplers: Vec<Vec<Coupler>>,
    /// `(i, j)` to the `(visible qubit, hidden qubit)` coupler realizing `W_ij`.
    pub logical_couplers: BTreeMap<(usize, usize), Coupler>,
    pub missing_pairs: BTreeSet<(usize, usize)>,
}

impl Embedding {
    pub fn num_logical(&self) -> usize {
        self.n_visible + self.n_hidden
    }

    /// Chain of logical node `node` (visible first, then hidden).
    pub fn chain(&self, node: usize) -> &[QubitId] {
        if node < self.n_visible {
            &self.visible_chains[node]
        } else {
            &self.hidden_chains[node - self.n_visible]
        }
    }

    pub fn chains(&self) -> impl Iterator<Item = &Vec<QubitId>> {
        self.visible_chains.iter().chain(self.hidden_chains.iter())
    }

    /// All qubits used by the embedding, in logical-node order.
    pub fn active_qubits(&self) -> Vec<QubitId> {
        self.chains().flatten().copied().collect()
    }

    /// Number of connected pieces the chain of `node` is split into.
    pub fn segment_count(&self, node: usize) -> usize {
        self.chain(node).len() - self.chain_couplers[node].len()
    }

    /// `mask[[i, j]]` is true exactly when `(i, j)` has no usable coupler.
    pub fn missing_mask(&self) -> Array2<bool> {
        let mut mask = Array2::from_elem((self.n_visible, self.n_hidden), false);
        for &(i, j) in &self.missing_pairs {
            mask[[i, j]] = true;
        }
        mask
    }
}

/// Lays out the RBM: visible unit `i` takes vertical position `i % k` down
/// cell column `i / k`; hidden unit `j` takes horizontal position `j % k`
/// along cell row `j / k`. Faulty qubits are skipped, leaving the chain in
/// segments that still decode as one unit.
pub fn embed_rbm(n_visible: usize, n_hidden: usize, graph: &ChimeraGraph) -> Result<Embedding> {
    let k = graph.cell_size();
    if n_visible == 0 || n_hidden == 0 {
        return Err(Error::InvalidArgument("RBM layers must be non-empty".into()));
    }
    if n_visible > k * graph.cols() || n_hidden > k * graph.rows() {
        return Err(Error::Capacity(format!(
            "a {n_visible}x{n_hidden} RBM needs at most {}x{} on a {}x{} grid with k={k}",
            k * graph.cols(),
            k * graph.rows(),
            graph.rows(),
            graph.cols()
        )));
    }

    let mut chain_couplers = Vec::with_capacity(n_visible + n_hidden);
    let mut build_chain = |positions: Vec<Qubit>, label: String| -> Result<Vec<QubitId>> {
        let chain: Vec<QubitId> = positions
            .iter()
            .map(|q| graph.id(q))
            .filter(|&id| !graph.is_faulty(id))
            .collect();
        if chain.is_empty() {
            return Err(Error::Capacity(format!("every qubit of the {label} chain is faulty")));
        }
        let links = chain
            .windows(2)
            .filter(|w| graph.is_usable(w[0], w[1]))
            .map(|w| (w[0], w[1]))
            .collect();
        chain_couplers.push(links);
        Ok(chain)
    };

    let visible_chains = (0..n_visible)
        .map(|i| {
            let positions = (0..graph.rows())
                .map(|r| Qubit::new(r, i / k, Orientation::Vertical, i % k))
                .collect();
            build_chain(positions, format!("visible {i}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let hidden_chains = (0..n_hidden)
        .map(|j| {
            let positions = (0..graph.cols())
                .map(|c| Qubit::new(j / k, c, Orientation::Horizontal, j % k))
                .collect();
            build_chain(positions, format!("hidden {j}"))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut logical_couplers = BTreeMap::new();
    let mut missing_pairs = BTreeSet::new();
    for i in 0..n_visible {
        for j in 0..n_hidden {
            let (row, col) = (j / k, i / k);
            let a = graph.id(&Qubit::new(row, col, Orientation::Vertical, i % k));
            let b = graph.id(&Qubit::new(row, col, Orientation::Horizontal, j % k));
            if graph.is_usable(a, b) {
                logical_couplers.insert((i, j), (a, b));
            } else {
                missing_pairs.insert((i, j));
            }
        }
    }

    Ok(Embedding {
        n_visible,
        n_hidden,
        visible_chains,
        hidden_chains,
        chain_couplers,
        logical_couplers,
        missing_pairs,
    })
}

/// Mask for [`crate::rbm::RbmParams::with_mask`] from an embedding.
pub fn missing_mask(embedding: &Embedding, n_visible: usize, n_hidden: usize) -> Result<Array2<bool>> {
    if embedding.n_visible != n_visible || embedding.n_hidden != n_hidden {
        return Err(Error::Dimension(format!(
            "embedding is for a {}x{} RBM, asked for {n_visible}x{n_hidden}",
            embedding.n_visible, embedding.n_hidden
        )));
    }
    Ok(embedding.missing_mask())
}

/// Eight faulty qubits on the 8×8, k=4 chip, each in a different unit cell and
/// each on a distinct chain, so that every fault removes exactly `k` crossings:
/// 32 of the 1024 visible/hidden pairs of a 32×32 RBM.
pub fn synthetic_faults() -> Vec<Qubit> {
    vec![
        Qubit::new(0, 3, Orientation::Vertical, 1),
        Qubit::new(1, 6, Orientation::Horizontal, 2),
        Qubit::new(2, 1, Orientation::Vertical, 0),
        Qubit::new(3, 4, Orientation::Horizontal, 3),
        Qubit::new(4, 7, Orientation::Vertical, 2),
        Qubit::new(5, 2, Orientation::Horizontal, 0),
        Qubit::new(6, 5, Orientation::Vertical, 3),
        Qubit::new(7, 0, Orientation::Horizontal, 1),
    ]
}
