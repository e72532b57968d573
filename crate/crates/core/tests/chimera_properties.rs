use std::collections::HashSet;

use annealdbn::chimera::{embed_rbm, ChimeraGraph, Orientation, Qubit};
use proptest::prelude::*;

fn qubit(rows: usize, cols: usize) -> impl Strategy<Value = Qubit> {
    (0..rows, 0..cols, prop::bool::ANY, 0..4usize).prop_map(|(r, c, vertical, t)| {
        let o = if vertical {
            Orientation::Vertical
        } else {
            Orientation::Horizontal
        };
        Qubit::new(r, c, o, t)
    })
}

fn distinct_faults(rows: usize, cols: usize, max: usize) -> impl Strategy<Value = Vec<Qubit>> {
    prop::collection::vec(qubit(rows, cols), 0..=max).prop_map(|qs| {
        let mut seen = HashSet::new();
        qs.into_iter().filter(|q| seen.insert(*q)).collect()
    })
}

/// A grid shape plus an RBM size that fits on it.
fn layout() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1..=4usize, 1..=4usize).prop_flat_map(|(rows, cols)| (Just(rows), Just(cols), 1..=4 * cols, 1..=4 * rows))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chains_never_share_qubits(
        ((rows, cols, n, m), faults) in layout().prop_flat_map(|l| (Just(l), distinct_faults(l.0, l.1, 6)))
    ) {
        let g = ChimeraGraph::new(rows, cols, 4, &faults).unwrap();
        let Ok(e) = embed_rbm(n, m, &g) else { return Ok(()) };
        let mut seen = HashSet::new();
        for q in e.active_qubits() {
            prop_assert!(seen.insert(q), "qubit {q} is in two chains");
            prop_assert!(!g.is_faulty(q));
        }
    }

    #[test]
    fn fault_free_embedding_has_every_crossing((rows, cols, n, m) in layout()) {
        let g = ChimeraGraph::new(rows, cols, 4, &[]).unwrap();
        let e = embed_rbm(n, m, &g).unwrap();
        prop_assert_eq!(e.logical_couplers.len(), n * m);
        prop_assert!(e.missing_pairs.is_empty());
    }

    #[test]
    fn adding_a_fault_never_helps(
        ((rows, cols, n, m), faults, extra) in layout()
            .prop_flat_map(|l| (Just(l), distinct_faults(l.0, l.1, 5), qubit(l.0, l.1)))
    ) {
        prop_assume!(!faults.contains(&extra));
        let before = ChimeraGraph::new(rows, cols, 4, &faults).unwrap();
        let mut more = faults.clone();
        more.push(extra);
        let after = ChimeraGraph::new(rows, cols, 4, &more).unwrap();
        let (Ok(a), Ok(b)) = (embed_rbm(n, m, &before), embed_rbm(n, m, &after)) else { return Ok(()) };
        prop_assert!(a.missing_pairs.is_subset(&b.missing_pairs));
        prop_assert!(b.logical_couplers.len() <= a.logical_couplers.len());
    }
}

#[test]
fn degree_law_on_fault_free_grids() {
    for size in [3usize, 4, 8] {
        let g = ChimeraGraph::new(size, size, 4, &[]).unwrap();
        let last = size - 1;
        for t in 0..4 {
            for o in [Orientation::Vertical, Orientation::Horizontal] {
                for (r, c) in [(1, 1), (last - 1, last - 1)] {
                    assert_eq!(g.degree(g.id(&Qubit::new(r, c, o, t))), 6);
                }
                for (r, c) in [(0, 0), (0, last), (last, 0), (last, last)] {
                    assert_eq!(g.degree(g.id(&Qubit::new(r, c, o, t))), 5);
                }
            }
        }
    }
}
