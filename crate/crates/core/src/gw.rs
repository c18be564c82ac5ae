//! Entropic Gromov-Wasserstein discrepancy between weighted adjacency matrices.
//!
//! Square loss, uniform marginals. Each outer iteration builds the pseudo-cost
//! `C(T) = c_A 1^T + 1 c_B^T - 2 A T B` of the current coupling and projects the
//! kernel `T ⊙ exp(-C / epsilon)` back onto the transport polytope with log-domain
//! Sinkhorn. The KL-proximal form converges to sharp couplings, so identical
//! inputs reach a cost near zero despite the entropic smoothing.
//!
//! Uniform couplings are stationary for vertex-transitive inputs, so the solver
//! also starts from a greedy structural node matching and keeps the cheaper result.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GwConfig {
    pub epsilon: f64,
    pub outer_iters: usize,
    pub sinkhorn_iters: usize,
    pub tol: f64,
}

impl Default for GwConfig {
    fn default() -> Self {
        GwConfig {
            epsilon: 0.05,
            outer_iters: 50,
            sinkhorn_iters: 100,
            tol: 1e-7,
        }
    }
}

impl GwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gw epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.outer_iters == 0 || self.sinkhorn_iters == 0 {
            return Err(Error::InvalidConfig(
                "gw iteration counts must be at least 1".into(),
            ));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidConfig("gw tol must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GwResult {
    pub distance: f64,
    pub coupling: Tensor,
}

const SYMMETRY_TOL: f64 = 1e-10;

fn check_symmetric(a: &Tensor) -> Result<()> {
    if a.rows() != a.cols() {
        return Err(Error::NonSymmetricInput);
    }
    for i in 0..a.rows() {
        for j in i + 1..a.cols() {
            if (a.get(i, j) - a.get(j, i)).abs() > SYMMETRY_TOL {
                return Err(Error::NonSymmetricInput);
            }
        }
    }
    Ok(())
}

/// `sum_{ijkl} (A_ik - B_jl)^2 T_ij T_kl` for an arbitrary coupling.
pub fn gw_cost(a: &Tensor, b: &Tensor, t: &Tensor) -> f64 {
    let c = pseudo_cost(a, b, t);
    c.data().iter().zip(t.data()).map(|(x, y)| x * y).sum()
}

/// `C_ij = sum_kl (A_ik - B_jl)^2 T_kl`.
fn pseudo_cost(a: &Tensor, b: &Tensor, t: &Tensor) -> Tensor {
    let (n, m) = t.shape();
    let row: Vec<f64> = (0..n).map(|k| t.row(k).iter().sum()).collect();
    let col: Vec<f64> = (0..m).map(|l| (0..n).map(|k| t.get(k, l)).sum()).collect();
    let ca: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|k| a.get(i, k).powi(2) * row[k]).sum())
        .collect();
    let cb: Vec<f64> = (0..m)
        .map(|j| (0..m).map(|l| b.get(j, l).powi(2) * col[l]).sum())
        .collect();
    let atb = a
        .matmul(t)
        .and_then(|x| x.matmul(b))
        .expect("shapes checked by caller");
    Tensor::from_fn(n, m, |i, j| ca[i] + cb[j] - 2.0 * atb.get(i, j))
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Sinkhorn projection of `exp(log_kernel)` onto uniform marginals.
///
/// Runs in the scaling domain on a row-shifted kernel and falls back to the log
/// domain when a scaling underflows.
fn sinkhorn(log_kernel: &Tensor, iters: usize) -> Result<Tensor> {
    match sinkhorn_scaling(log_kernel, iters) {
        Some(t) => Ok(t),
        None => sinkhorn_log(log_kernel, iters),
    }
}

const CHECK_EVERY: usize = 10;
const MARGINAL_TOL: f64 = 1e-12;

fn sinkhorn_scaling(log_kernel: &Tensor, iters: usize) -> Option<Tensor> {
    let (n, m) = log_kernel.shape();
    let (p, q) = (1.0 / n as f64, 1.0 / m as f64);
    let mut k = log_kernel.clone();
    for i in 0..n {
        let row = &mut k.data_mut()[i * m..(i + 1) * m];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return None;
        }
        row.iter_mut().for_each(|x| *x = (*x - max).exp());
    }
    let kd = k.data();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = vec![0.0; n];
    let mut ku = vec![0.0; m];
    for it in 0..iters {
        for i in 0..n {
            let row = &kd[i * m..(i + 1) * m];
            kv[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            u[i] = p / kv[i];
        }
        ku.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            let row = &kd[i * m..(i + 1) * m];
            for j in 0..m {
                ku[j] += row[j] * u[i];
            }
        }
        for j in 0..m {
            v[j] = q / ku[j];
        }
        if !u.iter().chain(&v).all(|x| x.is_finite() && *x > 0.0) {
            return None;
        }
        if (it + 1) % CHECK_EVERY == 0 || it + 1 == iters {
            let row_err = (0..n)
                .map(|i| {
                    let s: f64 = kd[i * m..(i + 1) * m].iter().zip(&v).map(|(a, b)| a * b).sum();
                    (u[i] * s - p).abs()
                })
                .fold(0.0, f64::max);
            if row_err < MARGINAL_TOL {
                break;
            }
        }
    }
    let t = Tensor::from_fn(n, m, |i, j| u[i] * kd[i * m + j] * v[j]);
    t.is_finite().then_some(t)
}

fn sinkhorn_log(log_kernel: &Tensor, iters: usize) -> Result<Tensor> {
    let (n, m) = log_kernel.shape();
    let log_p = -(n as f64).ln();
    let log_q = -(m as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    for it in 0..iters {
        for i in 0..n {
            f[i] = log_p - logsumexp((0..m).map(|j| log_kernel.get(i, j) + g[j]));
        }
        for j in 0..m {
            g[j] = log_q - logsumexp((0..n).map(|i| log_kernel.get(i, j) + f[i]));
        }
        if !f.iter().chain(&g).all(|v| v.is_finite()) {
            return Err(Error::SinkhornDiverged);
        }
        if (it + 1) % CHECK_EVERY == 0 {
            let row_err = (0..n)
                .map(|i| {
                    let s: f64 =
                        (0..m).map(|j| (log_kernel.get(i, j) + f[i] + g[j]).exp()).sum();
                    (s - 1.0 / n as f64).abs()
                })
                .fold(0.0, f64::max);
            if row_err < MARGINAL_TOL {
                break;
            }
        }
    }
    let t = Tensor::from_fn(n, m, |i, j| (log_kernel.get(i, j) + f[i] + g[j]).exp());
    if !t.is_finite() {
        return Err(Error::SinkhornDiverged);
    }
    Ok(t)
}

/// Node order by degree, refined by sorted neighbour degrees.
fn structural_order(a: &Tensor) -> Vec<usize> {
    let n = a.rows();
    let degree: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    let signature: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut s: Vec<f64> = (0..n).map(|k| a.get(i, k) * degree[k]).collect();
            s.sort_by(|x, y| y.total_cmp(x));
            s
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        degree[j]
            .total_cmp(&degree[i])
            .then_with(|| {
                signature[j]
                    .iter()
                    .zip(&signature[i])
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then(i.cmp(&j))
    });
    order
}

/// Greedy node matching for equal-size graphs: walk `a` breadth first and pair each
/// node with the free node of `b` that agrees best on degree and on adjacency to
/// the pairs already fixed.
fn greedy_matching(a: &Tensor, b: &Tensor) -> Vec<usize> {
    let n = a.rows();
    let oa = structural_order(a);
    let ob = structural_order(b);
    let rank_b: Vec<usize> = {
        let mut r = vec![0; n];
        for (pos, &j) in ob.iter().enumerate() {
            r[j] = pos;
        }
        r
    };
    let deg = |t: &Tensor, i: usize| t.row(i).iter().sum::<f64>();

    let mut walk = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for &root in &oa {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(i) = queue.pop_front() {
            walk.push(i);
            for &k in &oa {
                if !seen[k] && a.get(i, k) > 0.0 {
                    seen[k] = true;
                    queue.push_back(k);
                }
            }
        }
    }

    let mut matched: Vec<(usize, usize)> = Vec::with_capacity(n);
    let mut free = vec![true; n];
    let mut out = vec![0; n];
    for &i in &walk {
        let score = |j: usize| {
            let agree: f64 = matched
                .iter()
                .map(|&(pi, pj)| -(a.get(i, pi) - b.get(j, pj)).abs())
                .sum();
            (-(deg(a, i) - deg(b, j)).abs(), agree)
        };
        let best = (0..n)
            .filter(|&j| free[j])
            .max_by(|&x, &y| {
                let (dx, ax) = score(x);
                let (dy, ay) = score(y);
                dx.total_cmp(&dy)
                    .then(ax.total_cmp(&ay))
                    .then(rank_b[y].cmp(&rank_b[x]))
            })
            .expect("a free node remains");
        free[best] = false;
        matched.push((i, best));
        out[i] = best;
    }
    out
}

/// Structure-aware starting coupling, mixed with a little uniform mass so the
/// proximal updates can still move it.
fn structural_init(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (a.rows(), b.rows());
    let mut t = Tensor::zeros(n, m);
    if n == m {
        for (i, j) in greedy_matching(a, b).into_iter().enumerate() {
            t.set(i, j, 1.0 / n as f64);
        }
    } else {
        // North-west corner rule along the structural orders.
        let oa = structural_order(a);
        let ob = structural_order(b);
        let (mut i, mut j) = (0, 0);
        let mut supply = 1.0 / n as f64;
        let mut demand = 1.0 / m as f64;
        while i < n && j < m {
            let mass = supply.min(demand);
            t.set(oa[i], ob[j], t.get(oa[i], ob[j]) + mass);
            supply -= mass;
            demand -= mass;
            if supply <= 1e-15 {
                i += 1;
                supply = 1.0 / n as f64;
            }
            if demand <= 1e-15 {
                j += 1;
                demand = 1.0 / m as f64;
            }
        }
    }
    let uniform = 1.0 / (n * m) as f64;
    t.map(|v| 0.9 * v + 0.1 * uniform)
}

fn solve_from(a: &Tensor, b: &Tensor, init: Tensor, cfg: &GwConfig) -> Result<GwResult> {
    let mut t = init;
    let mut cost = gw_cost(a, b, &t);
    for _ in 0..cfg.outer_iters {
        let c = pseudo_cost(a, b, &t);
        let log_kernel = Tensor::from_fn(t.rows(), t.cols(), |i, j| {
            let prior = t.get(i, j);
            let lp = if prior > 0.0 { prior.ln() } else { f64::NEG_INFINITY };
            lp - c.get(i, j) / cfg.epsilon
        });
        let next = sinkhorn(&log_kernel, cfg.sinkhorn_iters)?;
        let next_cost = gw_cost(a, b, &next);
        if !next_cost.is_finite() {
            return Err(Error::SinkhornDiverged);
        }
        let change = next.max_abs_diff(&t);
        // Keep the better coupling; a proximal step can overshoot by rounding.
        if next_cost <= cost {
            t = next;
            cost = next_cost;
        } else {
            break;
        }
        if change < cfg.tol {
            break;
        }
    }
    Ok(GwResult {
        distance: cost,
        coupling: t,
    })
}

/// Whether `a` should be the row side of a canonical problem.
fn canonical_first(a: &Tensor, b: &Tensor) -> bool {
    if a.rows() != b.rows() {
        return a.rows() < b.rows();
    }
    for (x, y) in a.data().iter().zip(b.data()) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    true
}

/// Entropic GW between symmetric nonnegative matrices `a` (n x n) and `b` (m x m).
///
/// The problem is solved in a canonical argument order, so swapping the inputs
/// returns the same distance and the transposed coupling.
pub fn entropic_gw(a: &Tensor, b: &Tensor, cfg: &GwConfig) -> Result<GwResult> {
    cfg.validate()?;
    check_symmetric(a)?;
    check_symmetric(b)?;
    if a.data().iter().chain(b.data()).any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidConfig(
            "gw inputs must be finite and nonnegative".into(),
        ));
    }
    if !canonical_first(a, b) {
        let r = entropic_gw(b, a, cfg)?;
        return Ok(GwResult {
            distance: r.distance,
            coupling: r.coupling.transpose(),
        });
    }
    let (n, m) = (a.rows(), b.rows());
    let uniform = Tensor::full(n, m, 1.0 / (n * m) as f64);
    let plain = solve_from(a, b, uniform, cfg)?;
    let structured = solve_from(a, b, structural_init(a, b), cfg)?;
    Ok(if structured.distance < plain.distance {
        structured
    } else {
        plain
    })
}

/// `d GW / d A` with the coupling held fixed: `2 sum_jl (A_ik - B_jl) T_ij T_kl`.
pub fn envelope_grad(a: &Tensor, b: &Tensor, t: &Tensor) -> Tensor {
    let n = a.rows();
    let row: Vec<f64> = (0..n).map(|k| t.row(k).iter().sum()).collect();
    let tbt = t
        .matmul(b)
        .and_then(|x| x.matmul(&t.transpose()))
        .expect("coupling shape matches inputs");
    Tensor::from_fn(n, n, |i, k| 2.0 * (a.get(i, k) * row[i] * row[k] - tbt.get(i, k)))
}

/// Pairwise distances and couplings for every `i < j`, in lexicographic order.
pub fn pairwise(adjacencies: &[Tensor], cfg: &GwConfig) -> Result<Vec<(usize, usize, GwResult)>> {
    let pairs: Vec<(usize, usize)> = (0..adjacencies.len())
        .flat_map(|i| (i + 1..adjacencies.len()).map(move |j| (i, j)))
        .collect();
    pairs
        .par_iter()
        .map(|&(i, j)| {
            entropic_gw(&adjacencies[i], &adjacencies[j], cfg)
                .map(|r| (i, j, r))
                .map_err(|e| Error::PairFailed {
                    i,
                    j,
                    source: Box::new(e),
                })
        })
        .collect()
}

/// `-sum_{i<j} GW(A_i, A_j)`, differentiable through the envelope gradient.
///
/// The returned var carries the exact loss value; its gradient with respect to
/// each `A_i` is the negated sum of envelope gradients over the pairs touching `i`.
pub fn div_loss<'t>(adjacencies: &[Var<'t>], cfg: &GwConfig) -> Result<Var<'t>> {
    if adjacencies.len() < 2 {
        return Err(Error::KTooSmall(adjacencies.len()));
    }
    let tape = adjacencies[0].tape();
    let values: Vec<Tensor> = adjacencies.iter().map(|a| (*a.value()).clone()).collect();
    let results = pairwise(&values, cfg)?;
    let mut grads: Vec<Tensor> = values
        .iter()
        .map(|a| Tensor::zeros(a.rows(), a.cols()))
        .collect();
    let mut total = 0.0;
    for (i, j, r) in &results {
        total += r.distance;
        let gi = envelope_grad(&values[*i], &values[*j], &r.coupling);
        let gj = envelope_grad(&values[*j], &values[*i], &r.coupling.transpose());
        grads[*i] = grads[*i].add(&gi)?;
        grads[*j] = grads[*j].add(&gj)?;
    }
    let mut loss = tape.scalar(-total);
    for (a, g) in adjacencies.iter().zip(grads) {
        // Zero-valued term whose gradient is -g.
        let shift = a.sub(a.detach())?;
        let term = shift.mul(tape.constant(g.scale(-1.0)))?.sum();
        loss = loss.add(term)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k3() -> Tensor {
        Tensor::from_rows(&[
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ])
    }

    fn p3() -> Tensor {
        Tensor::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ])
    }

    #[test]
    fn identical_inputs_near_zero() {
        let cfg = GwConfig::default();
        for a in [k3(), p3()] {
            let r = entropic_gw(&a, &a, &cfg).unwrap();
            assert!(r.distance <= 1e-6, "{}", r.distance);
        }
    }

    #[test]
    fn marginals_are_uniform() {
        let r = entropic_gw(&k3(), &p3(), &GwConfig::default()).unwrap();
        for i in 0..3 {
            let row: f64 = r.coupling.row(i).iter().sum();
            let col: f64 = (0..3).map(|k| r.coupling.get(k, i)).sum();
            assert!((row - 1.0 / 3.0).abs() < 1e-6);
            assert!((col - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_asymmetric() {
        let mut a = p3();
        a.set(0, 1, 0.5);
        assert!(matches!(
            entropic_gw(&a, &p3(), &GwConfig::default()),
            Err(Error::NonSymmetricInput)
        ));
    }

    #[test]
    fn tiny_epsilon_diverges_or_succeeds_finitely() {
        let cfg = GwConfig {
            epsilon: 1e-300,
            ..GwConfig::default()
        };
        match entropic_gw(&k3(), &p3(), &cfg) {
            Ok(r) => assert!(r.distance.is_finite()),
            Err(e) => assert!(matches!(e, Error::SinkhornDiverged)),
        }
    }

    #[test]
    fn div_loss_value_and_gradient() {
        use crate::tape::Tape;
        let tape = Tape::new();
        let a = tape.param(k3());
        let b = tape.param(p3());
        let loss = div_loss(&[a, b], &GwConfig::default()).unwrap();
        let r = entropic_gw(&k3(), &p3(), &GwConfig::default()).unwrap();
        assert!((loss.item() + r.distance).abs() < 1e-12);
        let g = tape.gradients(loss, &[a]).unwrap();
        let expect = envelope_grad(&k3(), &p3(), &r.coupling).scale(-1.0);
        assert!(g[0].max_abs_diff(&expect) < 1e-12);
    }
}
