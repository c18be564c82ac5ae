use usbd_core::adapt::fingerprint;
use usbd_core::datagen::{gen_domain, Regime, ShiftSpec};

fn mean_energy(regime: Regime, seed: u64) -> f64 {
    let d = gen_domain(&ShiftSpec {
        regime,
        n_graphs: 50,
        seed,
        ..ShiftSpec::default()
    })
    .unwrap();
    fingerprint(&d.graphs).unwrap().value
}

#[test]
fn energy_tiers_hold_across_seeds() {
    for seed in 0..5 {
        let c = mean_energy(Regime::Clustered, seed);
        let m = mean_energy(Regime::Mixed, seed);
        let h = mean_energy(Regime::Chain, seed);
        assert!(c < 0.3 && h > 0.9, "seed {seed}: {c} {h}");
        assert!(c < m && m < h, "seed {seed}: {c} {m} {h}");
    }
}

#[test]
fn generated_graphs_are_valid() {
    for regime in [Regime::Clustered, Regime::Mixed, Regime::Chain] {
        let spec = ShiftSpec {
            regime,
            n_graphs: 30,
            min_nodes: 4,
            max_nodes: 25,
            classes: 3,
            feature_dim: 5,
            seed: 11,
            ..ShiftSpec::default()
        };
        let d = gen_domain(&spec).unwrap();
        d.validate().unwrap();
        for g in &d.graphs {
            g.validate().unwrap();
            assert!((4..=25).contains(&g.num_nodes()));
        }
    }
}

#[test]
fn zero_signal_removes_the_class_mean() {
    let spec = ShiftSpec {
        regime: Regime::Chain,
        n_graphs: 400,
        label_signal: 0.0,
        seed: 3,
        ..ShiftSpec::default()
    };
    let d = gen_domain(&spec).unwrap();
    let mut sums = [[0.0; 4]; 2];
    let mut counts = [0.0; 2];
    for g in &d.graphs {
        let y = g.label.unwrap();
        counts[y] += g.num_nodes() as f64;
        for i in 0..g.num_nodes() {
            for j in 0..4 {
                sums[y][j] += g.features.get(i, j);
            }
        }
    }
    for j in 0..4 {
        let gap = sums[0][j] / counts[0] - sums[1][j] / counts[1];
        assert!(gap.abs() < 0.05, "feature {j}: {gap}");
    }
}
