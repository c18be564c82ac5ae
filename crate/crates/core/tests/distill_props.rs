use usbd_core::datagen::{gen_domain, Regime, ShiftSpec};
use usbd_core::distill::{
    covering_residual, distill, sem_loss, span_loss, worst_probe_gap, BasisInit, BasisSpec,
    BasisVars, DistillConfig, MetaMode, SyntheticBasis,
};
use usbd_core::gnn::{init_params, Optimizer, TrainConfig};
use usbd_core::tape::Tape;
use usbd_core::{Domain, Tensor};

fn small_source(regime: Regime, seed: u64) -> Domain {
    gen_domain(&ShiftSpec {
        regime,
        n_graphs: 40,
        min_nodes: 6,
        max_nodes: 9,
        seed,
        ..ShiftSpec::default()
    })
    .unwrap()
}

fn small_cfg() -> DistillConfig {
    DistillConfig {
        outer_iters: 4,
        source_batch: 16,
        hidden: 8,
        basis: BasisSpec {
            k: 4,
            n_proto: 6,
            ..BasisSpec::default()
        },
        ..DistillConfig::default()
    }
}

#[test]
fn span_loss_is_squared_gap() {
    let source = small_source(Regime::Clustered, 0);
    let cfg = small_cfg();
    let basis = SyntheticBasis::init_from_source(&cfg.basis, &source, 1).unwrap();
    let e = basis.energies().unwrap();
    let tape = Tape::new();
    let vars = BasisVars::attach(&tape, &basis).unwrap();
    assert!(span_loss(&vars, &e).unwrap().item().abs() < 1e-20);
    let mut shifted = e.clone();
    shifted[2] -= 0.2;
    assert!((span_loss(&vars, &shifted).unwrap().item() - 0.04).abs() < 1e-12);
}

#[test]
fn uniform_proxy_scores_ln2() {
    let source = small_source(Regime::Mixed, 1);
    let mut cfg = small_cfg();
    cfg.inner.steps = 1;
    let mut basis = SyntheticBasis::init(&cfg.basis, 4, 2, 2).unwrap();
    // Zero features and balanced labels give zero classifier gradients.
    for x in basis.features.iter_mut() {
        *x = Tensor::zeros(x.rows(), x.cols());
    }
    let mut theta0 = init_params(cfg.dims(4, 2), 3).unwrap();
    let head = theta0.tensors.len() - 2;
    theta0.tensors[head] = Tensor::zeros(theta0.tensors[head].rows(), theta0.tensors[head].cols());
    let batch: Vec<_> = source.graphs.iter().take(10).collect();
    for mode in [MetaMode::Unrolled, MetaMode::FirstOrder] {
        let cfg = DistillConfig { meta_mode: mode, ..cfg.clone() };
        let tape = Tape::new();
        let vars = BasisVars::attach(&tape, &basis).unwrap();
        let l = sem_loss(&vars, &basis.labels, &batch, &theta0, &cfg).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12, "{mode:?}: {l}");
    }
}

#[test]
fn basis_copied_from_source_is_nearly_perfect() {
    let source = small_source(Regime::Clustered, 2);
    let mut cfg = small_cfg();
    cfg.inner = TrainConfig {
        learning_rate: 0.05,
        steps: 20,
        ..TrainConfig::default()
    };
    cfg.basis.k = 8;
    let mut basis = SyntheticBasis::init(&cfg.basis, 4, 2, 0).unwrap();
    for k in 0..basis.k() {
        let g = source.graphs.iter().filter(|g| g.label == Some(basis.labels[k])).nth(k).unwrap();
        let n = basis.n_proto;
        basis.features[k] = Tensor::from_fn(n, 4, |i, j| g.features.get(i % g.num_nodes(), j));
    }
    let batch: Vec<_> = source.graphs.iter().collect();
    let tape = Tape::new();
    let vars = BasisVars::attach(&tape, &basis).unwrap();
    let theta0 = init_params(cfg.dims(4, 2), 1).unwrap();
    let l = sem_loss(&vars, &basis.labels, &batch, &theta0, &cfg).unwrap().item();
    assert!(l <= 0.05, "{l}");
}

#[test]
fn meta_modes_give_different_gradients() {
    let source = small_source(Regime::Clustered, 3);
    let cfg = small_cfg();
    let basis = SyntheticBasis::init_from_source(&cfg.basis, &source, 4).unwrap();
    let batch: Vec<_> = source.graphs.iter().take(8).collect();
    let theta0 = init_params(cfg.dims(4, 2), 5).unwrap();
    let grad = |mode| {
        let cfg = DistillConfig { meta_mode: mode, ..cfg.clone() };
        let tape = Tape::new();
        let vars = BasisVars::attach(&tape, &basis).unwrap();
        let l = sem_loss(&vars, &basis.labels, &batch, &theta0, &cfg).unwrap();
        tape.gradients(l, &vars.features).unwrap()
    };
    let a = grad(MetaMode::Unrolled);
    let b = grad(MetaMode::FirstOrder);
    let gap = a.iter().zip(&b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max);
    assert!(gap > 1e-6, "{gap}");
}

#[test]
fn semantic_only_run_improves() {
    let source = small_source(Regime::Clustered, 4);
    let cfg = DistillConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        outer_iters: 20,
        outer_lr: 0.01,
        outer_optimizer: Optimizer::Adam,
        ..small_cfg()
    };
    let basis = SyntheticBasis::init(&cfg.basis, 4, 2, 6).unwrap();
    let (_, trace) = distill(&source, &cfg, basis).unwrap();
    let sem: Vec<f64> = trace.iter().map(|r| r.l_sem).collect();
    let avg: Vec<f64> = sem.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    let half = &avg[avg.len() / 2..];
    assert!(half.last().unwrap() <= half.first().unwrap(), "{sem:?}");
    assert!(sem[sem.len() - 1] < sem[0], "{sem:?}");
}

#[test]
fn span_weighted_run_meets_residual_and_covers() {
    let source = gen_domain(&ShiftSpec {
        regime: Regime::Mixed,
        n_graphs: 60,
        seed: 7,
        ..ShiftSpec::default()
    })
    .unwrap();
    let mut cfg = DistillConfig {
        lambda1: 10.0,
        outer_lr: 0.01,
        outer_optimizer: Optimizer::Adam,
        ..DistillConfig::default()
    };
    cfg.basis.init = BasisInit::Spectral;
    let basis = SyntheticBasis::init_from_source(&cfg.basis, &source, 0).unwrap();
    let (basis, _) = distill(&source, &cfg, basis).unwrap();
    let report = covering_residual(&basis).unwrap();
    assert!(report.epsilon_resid <= 0.05, "{}", report.epsilon_resid);
    let probes: Vec<f64> = (0..100).map(|i| 1.2 * i as f64 / 99.0).collect();
    assert!(worst_probe_gap(&report.energies, &probes) <= report.radius + 1e-12);
}

#[test]
fn short_runs_are_deterministic_and_symmetric() {
    let source = small_source(Regime::Mixed, 5);
    let cfg = DistillConfig {
        outer_lr: 0.05,
        outer_optimizer: Optimizer::Adam,
        ..small_cfg()
    };
    let init = SyntheticBasis::init_from_source(&cfg.basis, &source, 8).unwrap();
    let (a, ta) = distill(&source, &cfg, init.clone()).unwrap();
    let (b, tb) = distill(&source, &cfg, init.clone()).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    assert_ne!(a, init);
    for k in 0..a.k() {
        let adj = a.adjacency(k);
        for i in 0..a.n_proto {
            assert_eq!(adj.get(i, i), 0.0);
            for j in 0..a.n_proto {
                assert_eq!(adj.get(i, j), adj.get(j, i));
            }
        }
    }
}

#[test]
fn ablation_configs_produce_valid_bases() {
    let source = small_source(Regime::Chain, 6);
    let base = DistillConfig {
        outer_iters: 2,
        ..small_cfg()
    };
    let variants = [
        DistillConfig { lambda1: 0.0, ..base.clone() },
        DistillConfig { lambda2: 0.0, ..base.clone() },
        DistillConfig { no_sem: true, ..base.clone() },
    ];
    for cfg in variants {
        let init = SyntheticBasis::init_from_source(&cfg.basis, &source, 9).unwrap();
        let (b, trace) = distill(&source, &cfg, init).unwrap();
        b.validate().unwrap();
        assert_eq!(trace.len(), 2);
    }
}
