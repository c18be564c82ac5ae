use proptest::prelude::*;
use usbd_core::gw::{entropic_gw, gw_cost, GwConfig};
use usbd_core::Tensor;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn permutation_coupling(perm: &[usize]) -> Tensor {
    let n = perm.len();
    Tensor::from_fn(n, n, |i, j| if perm[i] == j { 1.0 / n as f64 } else { 0.0 })
}

fn permute(a: &Tensor, perm: &[usize]) -> Tensor {
    let n = a.rows();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(perm[i], perm[j], a.get(i, j));
        }
    }
    out
}

fn graph_strategy(max_n: usize) -> impl Strategy<Value = Tensor> {
    (2..=max_n).prop_flat_map(|n| {
        proptest::collection::vec(proptest::bool::weighted(0.5), n * (n - 1) / 2).prop_map(
            move |bits| {
                let mut a = Tensor::zeros(n, n);
                let mut it = bits.into_iter();
                for i in 0..n {
                    for j in i + 1..n {
                        if it.next().unwrap() {
                            a.set(i, j, 1.0);
                            a.set(j, i, 1.0);
                        }
                    }
                }
                a
            },
        )
    })
}

#[test]
fn k3_vs_p3_bounded_by_best_permutation() {
    let k3 = Tensor::from_rows(&[vec![0., 1., 1.], vec![1., 0., 1.], vec![1., 1., 0.]]);
    let p3 = Tensor::from_rows(&[vec![0., 1., 0.], vec![1., 0., 1.], vec![0., 1., 0.]]);
    let best = permutations(3)
        .iter()
        .map(|p| gw_cost(&k3, &p3, &permutation_coupling(p)))
        .fold(f64::INFINITY, f64::min);
    let r = entropic_gw(&k3, &p3, &GwConfig::default()).unwrap();
    assert!(r.distance > 0.0);
    assert!(r.distance <= best + 1e-9, "{} vs {}", r.distance, best);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutation_invariance(a in graph_strategy(5), seed in any::<u64>()) {
        let n = a.rows();
        let perms = permutations(n);
        let perm = &perms[(seed % perms.len() as u64) as usize];
        let b = permute(&a, perm);
        let r = entropic_gw(&a, &b, &GwConfig::default()).unwrap();
        prop_assert!(r.distance <= 1e-4, "{} for {:?} perm {:?}", r.distance, a, perm);
    }

    #[test]
    fn symmetric_and_nonnegative(a in graph_strategy(5), b in graph_strategy(5)) {
        let cfg = GwConfig::default();
        let ab = entropic_gw(&a, &b, &cfg).unwrap().distance;
        let ba = entropic_gw(&b, &a, &cfg).unwrap().distance;
        prop_assert!((ab - ba).abs() <= 1e-8);
        prop_assert!(ab >= -1e-10);
    }

    #[test]
    fn more_iterations_never_worse(a in graph_strategy(5), b in graph_strategy(5)) {
        let short = GwConfig { outer_iters: 10, ..GwConfig::default() };
        let long = GwConfig { outer_iters: 50, ..GwConfig::default() };
        let s = entropic_gw(&a, &b, &short).unwrap().distance;
        let l = entropic_gw(&a, &b, &long).unwrap().distance;
        prop_assert!(l <= s + long.tol);
    }

    #[test]
    fn identity_near_zero(a in graph_strategy(6)) {
        let r = entropic_gw(&a, &a, &GwConfig::default()).unwrap();
        prop_assert!(r.distance <= 1e-6, "{}", r.distance);
    }
}
