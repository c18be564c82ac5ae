use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usbd_core::adapt::predict;
use usbd_core::gnn::{init_params, predict_logits, train, GnnDims, Optimizer, Sample, TrainConfig};
use usbd_core::{Graph, Tensor};

const DIMS: GnnDims = GnnDims {
    d_in: 3,
    d_hidden: 8,
    layers: 2,
    classes: 2,
};

/// Random sparse graphs whose label is the sign of the mean first feature.
fn separable(count: usize, seed: u64) -> Vec<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let n = rng.random_range(3..7);
            let label = i % 2;
            let shift = if label == 0 { 1.0 } else { -1.0 };
            let mut edges = Vec::new();
            for a in 0..n {
                for b in a + 1..n {
                    if b == a + 1 || rng.random_bool(0.3) {
                        edges.push((a, b));
                    }
                }
            }
            let x = Tensor::from_fn(n, DIMS.d_in, |_, j| {
                let noise = rng.random_range(-0.3..0.3);
                if j == 0 {
                    shift + noise
                } else {
                    noise
                }
            });
            Graph::from_edges(n, &edges, x, Some(label)).unwrap()
        })
        .collect()
}

fn samples(graphs: &[Graph], weight: f64) -> Vec<Sample<'_>> {
    graphs
        .iter()
        .map(|g| Sample {
            adjacency: &g.adjacency,
            features: &g.features,
            label: g.label.unwrap(),
            weight,
        })
        .collect()
}

fn accuracy(graphs: &[Graph], pred: &[usize]) -> f64 {
    let hits = graphs.iter().zip(pred).filter(|(g, p)| g.label == Some(**p)).count();
    hits as f64 / graphs.len() as f64
}

#[test]
fn separable_toy_is_fit_exactly() {
    let graphs = separable(24, 1);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        steps: 200,
        ..TrainConfig::default()
    };
    let out = train(&init_params(DIMS, 3).unwrap(), &samples(&graphs, 1.0), &cfg).unwrap();
    assert_eq!(accuracy(&graphs, &predict(&out.params, &graphs).unwrap()), 1.0);
}

#[test]
fn doubled_weights_with_halved_lr_match() {
    let graphs = separable(10, 2);
    let theta = init_params(DIMS, 4).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.02,
        steps: 15,
        optimizer: Optimizer::Sgd,
        ..TrainConfig::default()
    };
    let half = TrainConfig {
        learning_rate: 0.01,
        ..cfg.clone()
    };
    let a = train(&theta, &samples(&graphs, 1.0), &cfg).unwrap().params;
    let b = train(&theta, &samples(&graphs, 2.0), &half).unwrap().params;
    for (x, y) in a.tensors.iter().zip(&b.tensors) {
        assert!(x.max_abs_diff(y) <= 1e-12);
    }
}

#[test]
fn sgd_loss_is_monotone_at_small_lr() {
    let graphs = separable(16, 3);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        steps: 30,
        optimizer: Optimizer::Sgd,
        ..TrainConfig::default()
    };
    let out = train(&init_params(DIMS, 5).unwrap(), &samples(&graphs, 1.0), &cfg).unwrap();
    for (step, w) in out.losses.windows(2).enumerate() {
        assert!(w[1] <= w[0] + 1e-15, "loss rose at step {step}: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn training_is_deterministic() {
    let graphs = separable(8, 4);
    let cfg = TrainConfig::default();
    let run = || {
        train(&init_params(DIMS, 6).unwrap(), &samples(&graphs, 1.0), &cfg)
            .unwrap()
            .params
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logits_are_permutation_invariant(seed in 0u64..1000, shift in 0usize..7) {
        let g = &separable(1, seed)[0];
        let n = g.num_nodes();
        let mut perm: Vec<usize> = (0..n).rev().collect();
        perm.rotate_left(shift % n);
        let p = g.permuted(&perm);
        let theta = init_params(DIMS, seed).unwrap();
        let a = predict_logits(&theta, std::slice::from_ref(g)).unwrap();
        let b = predict_logits(&theta, &[p.clone()]).unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            prop_assert!((x - y).abs() <= 1e-8);
        }
        prop_assert_eq!(predict(&theta, std::slice::from_ref(g)).unwrap(), predict(&theta, &[p]).unwrap());
    }
}
