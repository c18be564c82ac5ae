//! Finite-difference gradient oracles.
//!
//! [`grad_check`] compares tape gradients with central differences. The
//! [`registry`] collects one oracle per primitive plus one per training loss; the
//! command-line `grad-check` runs them all, optionally on tapes with a deliberately
//! broken backward rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapt::basis_weights;
use crate::distill::{
    sem_loss, span_loss, BasisSpec, BasisVars, DistillConfig, MetaMode, SyntheticBasis,
};
use crate::error::{Error, Result};
use crate::gnn::{
    cross_entropy, forward, forward_batch, init_params, train, weighted_cross_entropy, GnnDims,
    GnnParams, GraphInput, Sample, TrainConfig,
};
use crate::graph::{energy_var, Graph, DEGREE_EPS};
use crate::gw::{div_loss, entropic_gw, GwConfig};
use crate::tape::{Primitive, Tape, Var};
use crate::tensor::Tensor;

/// `|analytic - numeric| / max(1, |numeric|)`, maximized over coordinates.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of a plain function of several tensors.
pub fn numeric_gradient(
    f: &dyn Fn(&[Tensor]) -> Result<f64>,
    x0: &[Tensor],
    h: f64,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(x0.len());
    let mut x = x0.to_vec();
    for p in 0..x0.len() {
        let mut g = Tensor::zeros(x0[p].rows(), x0[p].cols());
        for i in 0..x0[p].len() {
            let base = x0[p].data()[i];
            x[p].data_mut()[i] = base + h;
            let up = f(&x)?;
            x[p].data_mut()[i] = base - h;
            let down = f(&x)?;
            x[p].data_mut()[i] = base;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Loss builder over parameter vars living on the supplied tape.
pub type LossFn<'a> = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + 'a;

/// Maximum relative error between tape gradients on `tape` and central
/// differences of the same loss evaluated on fresh tapes.
pub fn grad_check_on(tape: &Tape, f: &LossFn<'_>, x0: &[Tensor], h: f64) -> Result<f64> {
    let params: Vec<Var<'_>> = x0.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(tape, &params)?;
    let analytic = tape.gradients(loss, &params)?;
    let value = |x: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let vars: Vec<Var<'_>> = x.iter().map(|v| t.constant(v.clone())).collect();
        Ok(f(&t, &vars)?.item())
    };
    let numeric = numeric_gradient(&value, x0, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Single-tensor form of [`grad_check_on`] on a fresh tape.
pub fn grad_check(f: &LossFn<'_>, x0: &Tensor, h: f64) -> Result<f64> {
    grad_check_on(&Tape::new(), f, std::slice::from_ref(x0), h)
}

/// Outcome of one oracle.
#[derive(Clone, Debug, Serialize)]
pub struct OracleResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type OracleFn = fn(&Tape) -> Result<f64>;

pub struct Oracle {
    pub name: String,
    pub tolerance: f64,
    run: OracleFn,
}

impl Oracle {
    pub fn new(name: impl Into<String>, tolerance: f64, run: OracleFn) -> Self {
        Oracle {
            name: name.into(),
            tolerance,
            run,
        }
    }

    /// Runs on a fresh tape, or on one whose `fault` backward rule is flipped.
    pub fn run(&self, fault: Option<Primitive>) -> OracleResult {
        let tape = match fault {
            Some(p) => Tape::with_fault(p),
            None => Tape::new(),
        };
        let err = (self.run)(&tape).unwrap_or(f64::INFINITY);
        OracleResult {
            name: self.name.clone(),
            max_rel_err: err,
            tolerance: self.tolerance,
            passed: err <= self.tolerance,
        }
    }
}

pub fn run_oracles(oracles: &[Oracle], fault: Option<Primitive>) -> Result<Vec<OracleResult>> {
    if oracles.is_empty() {
        return Err(Error::InvalidConfig("gradient oracle registry is empty".into()));
    }
    Ok(oracles.iter().map(|o| o.run(fault)).collect())
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const GW_TOL: f64 = 5e-2;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(r: usize, c: usize, seed: u64) -> Tensor {
    let mut g = rng(seed);
    Tensor::from_fn(r, c, |_, _| g.random_range(-1.0..1.0))
}

fn positive(r: usize, c: usize, seed: u64) -> Tensor {
    let mut g = rng(seed);
    Tensor::from_fn(r, c, |_, _| g.random_range(0.5..2.0))
}

/// `sum(v * R)` for a fixed random `R`, so every output entry gets its own weight.
fn probe<'t>(v: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let (r, c) = v.shape();
    v.mul(v.tape().constant(random(r, c, seed)))
        .map(Var::sum)
}

fn unary(tape: &Tape, x0: Tensor, op: fn(Var<'_>) -> Result<Var<'_>>) -> Result<f64> {
    grad_check_on(tape, &|_, v| probe(op(v[0])?, 99), &[x0], H)
}

fn binary(
    tape: &Tape,
    a: Tensor,
    b: Tensor,
    op: for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>,
) -> Result<f64> {
    grad_check_on(tape, &|_, v| probe(op(v[0], v[1])?, 98), &[a, b], H)
}

fn primitive_oracles() -> Vec<Oracle> {
    vec![
        Oracle::new("matmul", TOL, |t| binary(t, random(5, 4, 1), random(4, 3, 2), |a, b| a.matmul(b))),
        Oracle::new("transpose", TOL, |t| unary(t, random(3, 6, 3), |a| Ok(a.t()))),
        Oracle::new("add", TOL, |t| binary(t, random(4, 4, 4), random(4, 4, 5), |a, b| a.add(b))),
        Oracle::new("sub", TOL, |t| binary(t, random(4, 4, 6), random(4, 4, 7), |a, b| a.sub(b))),
        Oracle::new("mul", TOL, |t| binary(t, random(6, 2, 8), random(6, 2, 9), |a, b| a.mul(b))),
        Oracle::new("div", TOL, |t| binary(t, random(3, 3, 10), positive(3, 3, 11), |a, b| a.div(b))),
        Oracle::new("scale", TOL, |t| unary(t, random(8, 8, 12), |a| Ok(a.scale(-2.5)))),
        Oracle::new("add_scalar", TOL, |t| unary(t, random(2, 5, 13), |a| Ok(a.add_scalar(0.7)))),
        Oracle::new("mul_scalar_var", TOL, |t| {
            binary(t, random(4, 3, 14), random(1, 1, 15), |a, s| a.mul_scalar(s))
        }),
        Oracle::new("sum", TOL, |t| unary(t, random(5, 5, 16), |a| Ok(a.sum()))),
        Oracle::new("expand", TOL, |t| unary(t, random(1, 1, 17), |a| a.expand(3, 4))),
        Oracle::new("trace", TOL, |t| unary(t, random(6, 6, 18), |a| a.trace())),
        Oracle::new("frobenius_norm_sq", TOL, |t| {
            unary(t, random(7, 3, 19), |a| Ok(a.frobenius_norm_sq()))
        }),
        Oracle::new("sigmoid", TOL, |t| unary(t, random(4, 5, 20).scale(3.0), |a| Ok(a.sigmoid()))),
        Oracle::new("relu", TOL, |t| unary(t, random(6, 4, 21), |a| Ok(a.relu()))),
        Oracle::new("clamp_min", TOL, |t| unary(t, random(6, 4, 22), |a| Ok(a.clamp_min(0.1)))),
        Oracle::new("exp", TOL, |t| unary(t, random(3, 4, 23), |a| Ok(a.exp()))),
        Oracle::new("log", TOL, |t| unary(t, positive(3, 4, 24), |a| Ok(a.ln()))),
        Oracle::new("sqrt", TOL, |t| unary(t, positive(4, 2, 25), |a| Ok(a.sqrt()))),
        Oracle::new("powf", TOL, |t| unary(t, positive(4, 2, 26), |a| Ok(a.powf(-0.5)))),
        Oracle::new("log_softmax_rows", TOL, |t| {
            unary(t, random(5, 4, 27).scale(3.0), |a| Ok(a.log_softmax_rows()))
        }),
        Oracle::new("gather_rows", TOL, |t| {
            unary(t, random(4, 3, 28), |a| a.gather_rows(&[3, 0, 0, 2, 3]))
        }),
        Oracle::new("segment_sum", TOL, |t| {
            unary(t, random(6, 3, 29), |a| a.segment_sum(&[0, 1, 1, 2, 0, 2], 3))
        }),
        Oracle::new("mean_rows", TOL, |t| unary(t, random(6, 5, 30), |a| Ok(a.mean_rows()))),
        Oracle::new("slice_rows", TOL, |t| unary(t, random(7, 2, 31), |a| a.slice_rows(2, 4))),
        Oracle::new("pad_rows", TOL, |t| unary(t, random(3, 2, 32), |a| a.pad_rows(1, 6))),
        Oracle::new("concat_rows", TOL, |t| {
            binary(t, random(2, 3, 33), random(4, 3, 34), |a, b| {
                a.tape().concat_rows(&[a, b, a])
            })
        }),
        Oracle::new("pick_cols", TOL, |t| unary(t, random(4, 5, 35), |a| a.pick_cols(&[4, 0, 2, 2]))),
        Oracle::new("scatter_cols", TOL, |t| {
            unary(t, random(3, 1, 36), |a| a.scatter_cols(&[2, 0, 1], 4))
        }),
    ]
}

fn random_graph(n: usize, d: usize, seed: u64) -> Graph {
    let mut g = rng(seed);
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let w = if g.random_bool(0.6) { g.random_range(0.2..1.0) } else { 0.0 };
            a.set(i, j, w);
            a.set(j, i, w);
        }
    }
    Graph {
        adjacency: a,
        features: random(n, d, seed + 1000),
        label: Some((seed % 2) as usize),
    }
}

fn tiny_dims(d_in: usize) -> GnnDims {
    GnnDims {
        d_in,
        d_hidden: 5,
        layers: 2,
        classes: 2,
    }
}

fn energy_oracle(tape: &Tape) -> Result<f64> {
    let g = random_graph(4, 3, 40);
    grad_check_on(
        tape,
        &|_, v| energy_var(v[0], v[1], DEGREE_EPS),
        &[g.adjacency, g.features],
        H,
    )
}

fn cross_entropy_oracle(tape: &Tape) -> Result<f64> {
    let g = random_graph(5, 3, 41);
    let params = init_params(tiny_dims(3), 41)?;
    grad_check_on(
        tape,
        &|t, v| {
            let pv = crate::gnn::ParamVars {
                dims: params.dims,
                vars: v.to_vec(),
            };
            let logits = forward(&pv, GraphInput::constant(t, &g))?;
            cross_entropy(logits, 1)
        },
        &params.tensors,
        H,
    )
}

fn small_basis(seed: u64) -> Result<SyntheticBasis> {
    let spec = BasisSpec {
        k: 2,
        n_proto: 4,
        feature_std: 0.5,
        logit_std: 0.5,
        ..BasisSpec::default()
    };
    SyntheticBasis::init(&spec, 3, 2, seed)
}

/// Basis tensors in `[logits.., features..]` order.
fn basis_tensors(basis: &SyntheticBasis) -> Vec<Tensor> {
    let mut x0 = basis.adj_logits.clone();
    x0.extend(basis.features.iter().cloned());
    x0
}

fn basis_vars<'t>(v: &[Var<'t>], k: usize) -> Result<BasisVars<'t>> {
    let adjacency = v[..k]
        .iter()
        .map(|&l| crate::distill::realize_adjacency(l))
        .collect::<Result<_>>()?;
    Ok(BasisVars {
        logits: v[..k].to_vec(),
        features: v[k..].to_vec(),
        adjacency,
    })
}

fn span_oracle(tape: &Tape) -> Result<f64> {
    let basis = small_basis(42)?;
    let k = basis.k();
    grad_check_on(
        tape,
        &|_, v| span_loss(&basis_vars(v, k)?, &basis.anchors),
        &basis_tensors(&basis),
        H,
    )
}

fn sem_setup() -> Result<(SyntheticBasis, Vec<Graph>, GnnParams, DistillConfig)> {
    let basis = small_basis(43)?;
    let batch: Vec<Graph> = (0..3).map(|i| random_graph(5, 3, 50 + i)).collect();
    let theta0 = init_params(tiny_dims(3), 44)?;
    let cfg = DistillConfig {
        inner: TrainConfig {
            learning_rate: 0.05,
            steps: 3,
            ..TrainConfig::default()
        },
        ..DistillConfig::default()
    };
    Ok((basis, batch, theta0, cfg))
}

fn sem_unrolled_oracle(tape: &Tape) -> Result<f64> {
    let (basis, batch, theta0, cfg) = sem_setup()?;
    let refs: Vec<&Graph> = batch.iter().collect();
    let k = basis.k();
    grad_check_on(
        tape,
        &|_, v| sem_loss(&basis_vars(v, k)?, &basis.labels, &refs, &theta0, &cfg),
        &basis_tensors(&basis),
        H,
    )
}

/// The first-order semantic gradient is the exact gradient of
/// `-lr <g_out, d L_inner(theta*, S) / d theta>` with `theta*` and `g_out` frozen;
/// that function is differenced here.
fn sem_first_order_oracle(tape: &Tape) -> Result<f64> {
    let (basis, batch, theta0, mut cfg) = sem_setup()?;
    cfg.meta_mode = MetaMode::FirstOrder;
    let refs: Vec<&Graph> = batch.iter().collect();
    let k = basis.k();

    let graphs = basis.graphs();
    let samples: Vec<Sample<'_>> = graphs
        .iter()
        .map(|g| Sample {
            adjacency: &g.adjacency,
            features: &g.features,
            label: g.label.unwrap_or(0),
            weight: 1.0 / k as f64,
        })
        .collect();
    let theta_star = train(&theta0, &samples, &cfg.inner)?.params;
    let g_out = {
        let t = Tape::new();
        let pv = theta_star.to_vars(&t);
        let inputs: Vec<GraphInput<'_>> = refs.iter().map(|g| GraphInput::constant(&t, *g)).collect();
        let labels: Vec<usize> = refs.iter().map(|g| g.label.unwrap_or(0)).collect();
        let w = vec![1.0 / refs.len() as f64; refs.len()];
        let loss = weighted_cross_entropy(forward_batch(&pv, &inputs)?, &labels, &w)?;
        t.gradients(loss, &pv.vars)?
    };
    let labels = basis.labels.clone();
    let lr = cfg.inner.learning_rate;
    let surrogate = |x: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let logits: Vec<Var<'_>> = x[..k].iter().map(|v| t.constant(v.clone())).collect();
        let features: Vec<Var<'_>> = x[k..].iter().map(|v| t.constant(v.clone())).collect();
        let inputs: Vec<GraphInput<'_>> = logits
            .iter()
            .zip(&features)
            .map(|(&l, &f)| {
                Ok(GraphInput {
                    adjacency: crate::distill::realize_adjacency(l)?,
                    features: f,
                })
            })
            .collect::<Result<_>>()?;
        let pv = theta_star.to_vars(&t);
        let w = vec![1.0 / k as f64; k];
        let loss = weighted_cross_entropy(forward_batch(&pv, &inputs)?, &labels, &w)?;
        let g_in = t.gradients(loss, &pv.vars)?;
        let dot: f64 = g_out
            .iter()
            .zip(&g_in)
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        Ok(-lr * dot)
    };

    let x0 = basis_tensors(&basis);
    let params: Vec<Var<'_>> = x0.iter().map(|x| tape.param(x.clone())).collect();
    let vars = basis_vars(&params, k)?;
    let loss = sem_loss(&vars, &basis.labels, &refs, &theta0, &cfg)?;
    let analytic = tape.gradients(loss, &params)?;
    let numeric = numeric_gradient(&surrogate, &x0, H)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

fn gw_envelope_oracle(tape: &Tape) -> Result<f64> {
    let cfg = GwConfig::default();
    let a = random_graph(3, 1, 60).adjacency;
    let b = random_graph(3, 1, 61).adjacency;
    let pa = tape.param(a.clone());
    let pb = tape.param(b.clone());
    let loss = div_loss(&[pa, pb], &cfg)?;
    let analytic = tape.gradients(loss, &[pa])?;
    // Symmetric perturbations: the solver only accepts symmetric inputs.
    let n = a.rows();
    let mut numeric = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let at = |delta: f64| -> Result<f64> {
                let mut x = a.clone();
                x.set(i, j, x.get(i, j) + delta);
                x.set(j, i, x.get(j, i) + delta);
                Ok(-entropic_gw(&x, &b, &cfg)?.distance)
            };
            let d = (at(H)? - at(-H)?) / (2.0 * H);
            numeric.set(i, j, d);
        }
    }
    let g = &analytic[0];
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let a_ij = g.get(i, j) + g.get(j, i);
            let n_ij = numeric.get(i, j);
            worst = worst.max((a_ij - n_ij).abs() / n_ij.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn weighted_proxy_oracle(tape: &Tape) -> Result<f64> {
    let graphs: Vec<Graph> = (0..3).map(|i| random_graph(4, 3, 70 + i)).collect();
    let weights = basis_weights(0.4, &[0.0, 0.6, 1.2], 1.0)?;
    let labels: Vec<usize> = vec![0, 1, 0];
    let params = init_params(tiny_dims(3), 71)?;
    grad_check_on(
        tape,
        &|t, v| {
            let pv = crate::gnn::ParamVars {
                dims: params.dims,
                vars: v.to_vec(),
            };
            let inputs: Vec<GraphInput<'_>> =
                graphs.iter().map(|g| GraphInput::constant(t, g)).collect();
            weighted_cross_entropy(forward_batch(&pv, &inputs)?, &labels, &weights)
        },
        &params.tensors,
        H,
    )
}

/// `U` steps of gradient descent on `0.5 theta^T H theta - s^T theta`, outer loss
/// `0.5 ||theta_U - t||^2`. The hypergradient with respect to `s` is
/// `(sum_i M^i) alpha (theta_U - t)` with `M = I - alpha H` (diagonal here).
fn unrolled_quadratic_oracle(tape: &Tape) -> Result<f64> {
    let h = [2.0, 0.5];
    let alpha = 0.3;
    let steps = 6;
    let theta0 = [1.0, -1.0];
    let s0 = [0.4, 0.7];
    let target = [0.2, 0.1];

    let s = tape.param(Tensor::from_vec(2, 1, s0.to_vec())?);
    let hm = tape.constant(Tensor::from_vec(2, 1, h.to_vec())?);
    let mut theta = tape.param(Tensor::from_vec(2, 1, theta0.to_vec())?);
    for _ in 0..steps {
        let inner = theta.mul(theta)?.mul(hm)?.sum().scale(0.5).sub(s.mul(theta)?.sum())?;
        let g = tape.grad(inner, &[theta], true)?[0];
        theta = theta.sub(g.scale(alpha))?;
    }
    let t = tape.constant(Tensor::from_vec(2, 1, target.to_vec())?);
    let outer = theta.sub(t)?.frobenius_norm_sq().scale(0.5);
    let analytic = tape.gradients(outer, &[s])?;

    let mut expect = Tensor::zeros(2, 1);
    for i in 0..2 {
        let m = 1.0 - alpha * h[i];
        let mut theta_u = m.powi(steps) * theta0[i];
        let mut geo = 0.0;
        for p in 0..steps {
            geo += m.powi(p);
        }
        theta_u += geo * alpha * s0[i];
        expect.set(i, 0, geo * alpha * (theta_u - target[i]));
    }
    let scale = expect.data().iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    Ok(analytic[0].max_abs_diff(&expect) / scale)
}

/// Every registered oracle: primitives first, then the training losses.
pub fn registry() -> Vec<Oracle> {
    let mut all = primitive_oracles();
    all.extend([
        Oracle::new("dirichlet_energy", TOL, energy_oracle),
        Oracle::new("cross_entropy", TOL, cross_entropy_oracle),
        Oracle::new("span_loss", TOL, span_oracle),
        Oracle::new("sem_loss_unrolled", TOL, sem_unrolled_oracle),
        Oracle::new("sem_loss_first_order", TOL, sem_first_order_oracle),
        Oracle::new("gw_envelope", GW_TOL, gw_envelope_oracle),
        Oracle::new("weighted_proxy", TOL, weighted_proxy_oracle),
        Oracle::new("unrolled_quadratic", TOL, unrolled_quadratic_oracle),
    ]);
    all
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_sigmoid() {
        let x0 = random(3, 3, 1);
        let e = grad_check(&|_, v| Ok(v[0].frobenius_norm_sq()), &x0, H).unwrap();
        assert!(e <= 1e-8, "{e}");
        let e = grad_check(&|_, v| Ok(v[0].sigmoid().sum()), &x0, H).unwrap();
        assert!(e <= 1e-6, "{e}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(random(2, 2, 2));
        let loss = tape.scalar(3.0).add(x.scale(0.0).sum()).unwrap();
        let g = tape.gradients(loss, &[x]).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_registry_is_an_error() {
        assert!(run_oracles(&[], None).is_err());
    }

    #[test]
    fn sigmoid_fault_is_caught_by_name() {
        let results = run_oracles(&registry(), Some(Primitive::Sigmoid)).unwrap();
        let sig = results.iter().find(|r| r.name == "sigmoid").unwrap();
        assert!(!sig.passed);
        let mm = results.iter().find(|r| r.name == "matmul").unwrap();
        assert!(mm.passed);
    }
}
