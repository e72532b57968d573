mod common;

use annealdbn::rbm::{
    apply_update, clamped_expectations, exact_expectations, log_likelihood, sigmoid, softplus, ExpectationSet,
    RbmParams, UpdateState,
};
use common::{binary_states, rbm};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-3)
}

fn finite_difference(p: &RbmParams, batch: &Array2<f64>, bump: impl Fn(&mut RbmParams, f64)) -> f64 {
    let step = 1e-5;
    let mut plus = p.clone();
    bump(&mut plus, step);
    let mut minus = p.clone();
    bump(&mut minus, -step);
    (log_likelihood(&plus, batch.view()).unwrap() - log_likelihood(&minus, batch.view()).unwrap()) / (2.0 * step)
}

fn batch_strategy(n: usize) -> impl Strategy<Value = Array2<f64>> {
    (1usize..6).prop_flat_map(move |rows| {
        prop::collection::vec(prop::bool::ANY, rows * n)
            .prop_map(move |bits| Array2::from_shape_vec((rows, n), bits.into_iter().map(f64::from).collect()).unwrap())
    })
}

fn expectation_set(n: usize, m: usize) -> impl Strategy<Value = ExpectationSet> {
    (
        prop::collection::vec(0.0..1.0f64, n * m),
        prop::collection::vec(0.0..1.0f64, n),
        prop::collection::vec(0.0..1.0f64, m),
    )
        .prop_map(move |(vh, v, h)| ExpectationSet {
            vh: Array2::from_shape_vec((n, m), vh).unwrap(),
            v: Array1::from(v),
            h: Array1::from(h),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradient_equals_finite_difference(
        (p, batch) in rbm(6, 6, 2.0).prop_flat_map(|p| { let n = p.n_visible(); (Just(p), batch_strategy(n)) })
    ) {
        let data = clamped_expectations(&p, batch.view()).unwrap();
        let model = exact_expectations(&p).unwrap();
        let grad_w = &data.vh - &model.vh;
        for ((i, j), g) in grad_w.indexed_iter() {
            let fd = finite_difference(&p, &batch, |q, d| q.weights[[i, j]] += d);
            prop_assert!(close(fd, *g, 1e-5), "W[{i},{j}]: {fd} vs {g}");
        }
        for i in 0..p.n_visible() {
            let fd = finite_difference(&p, &batch, |q, d| q.visible_bias[i] += d);
            let g = data.v[i] - model.v[i];
            prop_assert!(close(fd, g, 1e-5), "b[{i}]: {fd} vs {g}");
        }
        for j in 0..p.n_hidden() {
            let fd = finite_difference(&p, &batch, |q, d| q.hidden_bias[j] += d);
            let g = data.h[j] - model.h[j];
            prop_assert!(close(fd, g, 1e-5), "c[{j}]: {fd} vs {g}");
        }
    }

    #[test]
    fn joint_probabilities_sum_to_one(p in rbm(6, 6, 2.0)) {
        let log_z = p.log_partition().unwrap();
        let hidden: Vec<_> = binary_states(p.n_hidden()).collect();
        let total: f64 = binary_states(p.n_visible())
            .flat_map(|v| hidden.iter().map(move |h| (v.clone(), h.clone())))
            .map(|(v, h)| (-p.energy(v.view(), h.view()).unwrap() - log_z).exp())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn hidden_means_follow_tower_property(p in rbm(7, 5, 2.0)) {
        let log_z = p.log_partition().unwrap();
        let exact = exact_expectations(&p).unwrap();
        let mut tower = Array1::<f64>::zeros(p.n_hidden());
        for v in binary_states(p.n_visible()) {
            let act = v.dot(&p.weights) + &p.hidden_bias;
            let log_pv = p.visible_bias.dot(&v) + act.iter().map(|&x| softplus(x)).sum::<f64>() - log_z;
            tower.scaled_add(log_pv.exp(), &act.mapv(sigmoid));
        }
        for j in 0..p.n_hidden() {
            prop_assert!((tower[j] - exact.h[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_weights_stay_zero(
        (p, mask, steps) in rbm(5, 5, 1.0).prop_flat_map(|p| {
            let (n, m) = (p.n_visible(), p.n_hidden());
            (
                Just(p),
                prop::collection::vec(prop::bool::ANY, n * m).prop_map(move |b| Array2::from_shape_vec((n, m), b).unwrap()),
                prop::collection::vec((expectation_set(n, m), expectation_set(n, m), 0.0..0.99f64), 1..8),
            )
        })
    ) {
        let mut p = p.with_mask(mask.clone()).unwrap();
        let mut state = UpdateState::new(&p, 0.5, 0.0).unwrap();
        for (data, model, momentum) in &steps {
            state.momentum = *momentum;
            apply_update(&mut p, &mut state, data, model).unwrap();
            for ((i, j), &masked) in mask.indexed_iter() {
                if masked {
                    prop_assert_eq!(p.weights[[i, j]], 0.0);
                    prop_assert_eq!(state.weights_velocity[[i, j]], 0.0);
                }
            }
        }
    }

    #[test]
    fn transposing_layers_preserves_partition_function(p in rbm(6, 6, 2.0)) {
        let t = p.transpose();
        prop_assert!((p.log_partition().unwrap() - t.log_partition().unwrap()).abs() < 1e-12);
        let a = exact_expectations(&p).unwrap();
        let b = exact_expectations(&t).unwrap();
        for ((i, j), x) in a.vh.indexed_iter() {
            prop_assert!((x - b.vh[[j, i]]).abs() < 1e-12);
        }
        prop_assert!((&a.v - &b.h).iter().all(|d| d.abs() < 1e-12));
        prop_assert!((&a.h - &b.v).iter().all(|d| d.abs() < 1e-12));
    }
}
