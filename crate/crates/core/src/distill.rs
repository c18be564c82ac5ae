//! Universal basis distillation.
//!
//! A [`SyntheticBasis`] holds `K` small learnable prototype graphs. Each outer
//! iteration trains a fresh proxy GNN on the prototypes, scores it on a batch of
//! real source graphs, and moves the prototypes along
//! `L_sem + lambda1 * L_span + lambda2 * L_div`:
//!
//! * `L_sem` is the source cross entropy of the proxy trained on the basis,
//!   differentiated through the inner training run;
//! * `L_span = sum_k (E(G_k) - mu_k)^2` pins prototype `k` to the energy anchor `mu_k`;
//! * `L_div = -sum_{i<j} GW(A_i, A_j) / n^2` pushes prototype topologies apart.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{
    forward_batch, init_params, train, train_on_tape, weighted_cross_entropy, GnnDims, GnnParams,
    GraphInput, Optimizer, Sample, TrainConfig,
};
use crate::graph::{energy_of, energy_var, Domain, Graph, DEGREE_EPS};
use crate::gw::{div_loss, GwConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BASIS_SCHEMA_VERSION: u32 = 1;

/// Evenly spaced anchors `mu_k = e_max * k / (K - 1)` and their spacing `delta`.
pub fn make_anchors(k: usize, e_max: f64) -> Result<(Vec<f64>, f64)> {
    if k < 2 {
        return Err(Error::KTooSmall(k));
    }
    if !(e_max > 0.0 && e_max.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "e_max must be positive, got {e_max}"
        )));
    }
    let delta = e_max / (k - 1) as f64;
    let anchors = (0..k)
        .map(|i| if i == k - 1 { e_max } else { e_max * i as f64 / (k - 1) as f64 })
        .collect();
    Ok((anchors, delta))
}

/// `K` learnable prototype graphs with fixed labels and energy anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBasis {
    pub n_proto: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub e_max: f64,
    pub adj_logits: Vec<Tensor>,
    pub features: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub anchors: Vec<f64>,
}

/// How prototype tensors are drawn before distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisInit {
    /// Gaussian features and near-zero logits (edge probability about 0.5).
    Gaussian,
    /// Two-block logits scaled with the anchor, and a blend of a smooth and an
    /// alternating feature pattern chosen so each prototype starts at its anchor.
    Spectral,
    /// Spectral logits with node features copied from a source graph of the
    /// prototype's class, sign-modulated per node to start at the anchor.
    Source,
}

/// Shape of a freshly initialized basis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub k: usize,
    pub n_proto: usize,
    pub e_max: f64,
    pub feature_std: f64,
    pub logit_std: f64,
    pub init: BasisInit,
    /// Block logit magnitude used by the spectral init at the top anchor.
    pub block_logit: f64,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            k: 20,
            n_proto: 12,
            e_max: 1.2,
            feature_std: 0.1,
            logit_std: 0.01,
            init: BasisInit::Gaussian,
            block_logit: 4.0,
        }
    }
}

fn symmetrize_zero_diag(t: &Tensor) -> Tensor {
    Tensor::from_fn(t.rows(), t.cols(), |i, j| {
        if i == j {
            0.0
        } else {
            0.5 * (t.get(i, j) + t.get(j, i))
        }
    })
}

fn unit_direction(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

fn realized(logits: &Tensor) -> Tensor {
    let tape = Tape::new();
    let adjacency = realize_adjacency(tape.constant(logits.clone())).expect("square logits");
    (*adjacency.value()).clone()
}

fn alternating(i: usize) -> f64 {
    if i % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Bisects `phi` in `[0, pi/2]` so the energy of `blend(phi)` on `logits` matches
/// `mu` as closely as the blend allows. Energy is assumed to grow with `phi`.
fn anchored(logits: &Tensor, mu: f64, blend: impl Fn(f64) -> Tensor) -> Tensor {
    let adjacency = realized(logits);
    let energy = |phi: f64| energy_of(&adjacency, &blend(phi), DEGREE_EPS).unwrap_or(0.0);
    let (mut lo, mut hi) = (0.0, std::f64::consts::FRAC_PI_2);
    if energy(hi) <= mu {
        return blend(hi);
    }
    if energy(lo) >= mu {
        return blend(lo);
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if energy(mid) < mu {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    blend(0.5 * (lo + hi))
}

/// `cos(phi) * smooth + sin(phi) * alternating + 0.1 * noise` in random directions.
fn anchored_features(
    logits: &Tensor,
    noise: Tensor,
    mu: f64,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let (n, d) = noise.shape();
    let v = unit_direction(d, rng);
    let w = unit_direction(d, rng);
    let amp = scale * (d as f64).sqrt();
    anchored(logits, mu, |phi| {
        Tensor::from_fn(n, d, |i, j| {
            amp * (phi.cos() * v[j] + phi.sin() * alternating(i) * w[j]) + 0.1 * noise.get(i, j)
        })
    })
}

/// Rows of a real graph scaled per node by `cos(phi) + sin(phi) * (+-1)`.
fn anchored_rows(logits: &Tensor, rows: Tensor, mu: f64) -> Tensor {
    let (n, d) = rows.shape();
    anchored(logits, mu, |phi| {
        Tensor::from_fn(n, d, |i, j| rows.get(i, j) * (phi.cos() + phi.sin() * alternating(i)))
    })
}

fn block_logits(raw: &Tensor, alpha: f64) -> Tensor {
    let block = Tensor::from_fn(raw.rows(), raw.cols(), |i, j| {
        let sign = if i % 2 == j % 2 { -1.0 } else { 1.0 };
        raw.get(i, j) + sign * alpha
    });
    symmetrize_zero_diag(&block)
}

fn off_diagonal_mask(n: usize) -> Tensor {
    Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
}

/// `sigmoid(sym(logits))` with the diagonal zeroed, as a tape var.
pub fn realize_adjacency<'t>(logits: Var<'t>) -> Result<Var<'t>> {
    let n = logits.shape().0;
    let mask = logits.tape().constant(off_diagonal_mask(n));
    logits.add(logits.t())?.scale(0.5).sigmoid().mul(mask)
}

impl SyntheticBasis {
    /// Gaussian features, near-zero adjacency logits, round-robin labels.
    pub fn init(
        spec: &BasisSpec,
        feature_dim: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let (anchors, _) = make_anchors(spec.k, spec.e_max)?;
        if spec.n_proto < 2 || feature_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidConfig(format!(
                "basis needs n_proto >= 2, feature_dim >= 1, classes >= 1 (got {}, {}, {})",
                spec.n_proto, feature_dim, num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = Normal::new(0.0, spec.feature_std)
            .map_err(|e| Error::InvalidConfig(format!("feature_std: {e}")))?;
        let logit = Normal::new(0.0, spec.logit_std)
            .map_err(|e| Error::InvalidConfig(format!("logit_std: {e}")))?;
        let n = spec.n_proto;
        let mut adj_logits = Vec::with_capacity(spec.k);
        let mut features = Vec::with_capacity(spec.k);
        for &mu in &anchors {
            let raw = Tensor::from_fn(n, n, |_, _| logit.sample(&mut rng));
            let noise = Tensor::from_fn(n, feature_dim, |_, _| feat.sample(&mut rng));
            match spec.init {
                BasisInit::Gaussian => {
                    adj_logits.push(symmetrize_zero_diag(&raw));
                    features.push(noise);
                }
                BasisInit::Spectral => {
                    let logits = block_logits(&raw, spec.block_logit * mu / spec.e_max);
                    let x = anchored_features(&logits, noise, mu, spec.feature_std, &mut rng);
                    adj_logits.push(logits);
                    features.push(x);
                }
                BasisInit::Source => {
                    return Err(Error::InvalidConfig(
                        "source init needs a source domain; use init_from_source".into(),
                    ))
                }
            }
        }
        let basis = SyntheticBasis {
            n_proto: n,
            feature_dim,
            num_classes,
            e_max: spec.e_max,
            adj_logits,
            features,
            labels: (0..spec.k).map(|k| k % num_classes).collect(),
            anchors,
        };
        basis.validate()?;
        Ok(basis)
    }

    /// Like [`SyntheticBasis::init`], reading dims from `source`. With
    /// [`BasisInit::Source`] each prototype copies node rows from a random source
    /// graph of its class (cycling when the graph is smaller than `n_proto`).
    pub fn init_from_source(spec: &BasisSpec, source: &Domain, seed: u64) -> Result<Self> {
        let (d, c) = (source.feature_dim, source.num_classes);
        if spec.init != BasisInit::Source {
            return Self::init(spec, d, c, seed);
        }
        let structural = BasisSpec {
            init: BasisInit::Spectral,
            ..*spec
        };
        let mut basis = Self::init(&structural, d, c, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3, 0));
        for k in 0..basis.k() {
            let y = basis.labels[k];
            let pool: Vec<&Graph> = source.graphs.iter().filter(|g| g.label == Some(y)).collect();
            if pool.is_empty() {
                return Err(Error::InvalidDomain(format!("no source graph of class {y}")));
            }
            let g = pool[rng.random_range(0..pool.len())];
            let rows = Tensor::from_fn(basis.n_proto, d, |i, j| {
                g.features.get(i % g.features.rows(), j)
            });
            basis.features[k] = anchored_rows(&basis.adj_logits[k], rows, basis.anchors[k]);
        }
        basis.validate()?;
        Ok(basis)
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn delta(&self) -> f64 {
        self.e_max / (self.k() - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let corrupt = |field: &str, reason: String| Error::CorruptField {
            field: field.into(),
            reason,
        };
        if k < 2 {
            return Err(corrupt("k", format!("need at least two prototypes, got {k}")));
        }
        if self.adj_logits.len() != k || self.features.len() != k || self.anchors.len() != k {
            return Err(corrupt(
                "prototypes",
                "adjacency, feature, label and anchor counts differ".into(),
            ));
        }
        let (expected, _) = make_anchors(k, self.e_max)
            .map_err(|e| corrupt("e_max", e.to_string()))?;
        for (i, (a, b)) in self.anchors.iter().zip(&expected).enumerate() {
            if (a - b).abs() > 1e-12 * self.e_max.max(1.0) {
                return Err(corrupt(
                    "anchors",
                    format!("anchor {i} is {a}, grid gives {b}"),
                ));
            }
        }
        let n = self.n_proto;
        for i in 0..k {
            let l = &self.adj_logits[i];
            if l.shape() != (n, n) || !l.is_finite() {
                return Err(corrupt("adj_logits", format!("prototype {i} malformed")));
            }
            let x = &self.features[i];
            if x.shape() != (n, self.feature_dim) || !x.is_finite() {
                return Err(corrupt("features", format!("prototype {i} malformed")));
            }
            if self.labels[i] >= self.num_classes {
                return Err(corrupt(
                    "labels",
                    format!("label {} >= {} classes", self.labels[i], self.num_classes),
                ));
            }
        }
        Ok(())
    }

    /// Realized (continuous) adjacency of prototype `k`.
    pub fn adjacency(&self, k: usize) -> Tensor {
        let tape = Tape::new();
        let logits = tape.constant(self.adj_logits[k].clone());
        let a = realize_adjacency(logits).expect("square logits");
        (*a.value()).clone()
    }

    /// Prototypes as labeled graphs with continuous adjacency.
    pub fn graphs(&self) -> Vec<Graph> {
        (0..self.k())
            .map(|k| Graph {
                adjacency: self.adjacency(k),
                features: self.features[k].clone(),
                label: Some(self.labels[k]),
            })
            .collect()
    }

    /// Prototype adjacency thresholded at 0.5, for export and inspection only.
    pub fn binarized(&self, k: usize) -> Tensor {
        self.adjacency(k).map(|v| if v > 0.5 { 1.0 } else { 0.0 })
    }

    pub fn energies(&self) -> Result<Vec<f64>> {
        (0..self.k())
            .map(|k| {
                energy_of(&self.adjacency(k), &self.features[k], DEGREE_EPS)
                    .map_err(|_| Error::PrototypeZeroFeatures { index: k })
            })
            .collect()
    }
}

/// Basis tensors attached to a tape as parameters.
pub struct BasisVars<'t> {
    pub logits: Vec<Var<'t>>,
    pub features: Vec<Var<'t>>,
    pub adjacency: Vec<Var<'t>>,
}

impl<'t> BasisVars<'t> {
    pub fn attach(tape: &'t Tape, basis: &SyntheticBasis) -> Result<Self> {
        let logits: Vec<Var<'t>> = basis.adj_logits.iter().map(|t| tape.param(t.clone())).collect();
        let features = basis.features.iter().map(|t| tape.param(t.clone())).collect();
        let adjacency = logits
            .iter()
            .map(|&l| realize_adjacency(l))
            .collect::<Result<_>>()?;
        Ok(BasisVars {
            logits,
            features,
            adjacency,
        })
    }

    pub fn inputs(&self) -> Vec<GraphInput<'t>> {
        self.adjacency
            .iter()
            .zip(&self.features)
            .map(|(&adjacency, &features)| GraphInput {
                adjacency,
                features,
            })
            .collect()
    }
}

/// `sum_k (E(G_k) - mu_k)^2`.
pub fn span_loss<'t>(vars: &BasisVars<'t>, anchors: &[f64]) -> Result<Var<'t>> {
    let tape = vars.features[0].tape();
    let mut total = tape.scalar(0.0);
    for (k, ((&a, &x), &mu)) in vars
        .adjacency
        .iter()
        .zip(&vars.features)
        .zip(anchors)
        .enumerate()
    {
        let e = energy_var(a, x, DEGREE_EPS).map_err(|err| match err {
            Error::ZeroFeatures { .. } => Error::PrototypeZeroFeatures { index: k },
            other => other,
        })?;
        let gap = e.add_scalar(-mu);
        total = total.add(gap.mul(gap)?)?;
    }
    Ok(total)
}

/// How the semantic loss reaches the basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMode {
    /// Back-propagate through every recorded inner step.
    Unrolled,
    /// Hold the trained proxy fixed and differentiate one virtual gradient step
    /// taken from it.
    FirstOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Drop the semantic loss entirely.
    pub no_sem: bool,
    pub outer_iters: usize,
    pub outer_lr: f64,
    pub outer_optimizer: Optimizer,
    pub inner: TrainConfig,
    pub source_batch: usize,
    pub meta_mode: MetaMode,
    /// Differentiate only the last `horizon` inner steps.
    pub horizon: Option<usize>,
    pub hidden: usize,
    pub layers: usize,
    pub basis: BasisSpec,
    pub gw: GwConfig,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda1: 0.9,
            lambda2: 0.5,
            no_sem: false,
            outer_iters: 20,
            outer_lr: 1e-3,
            outer_optimizer: Optimizer::Sgd,
            inner: TrainConfig::default(),
            source_batch: 64,
            meta_mode: MetaMode::Unrolled,
            horizon: None,
            hidden: 32,
            layers: 2,
            basis: BasisSpec::default(),
            gw: GwConfig::default(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidConfig(
                "lambda1 and lambda2 must be nonnegative".into(),
            ));
        }
        if self.outer_iters == 0 {
            return Err(Error::InvalidConfig("outer_iters must be at least 1".into()));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return Err(Error::InvalidConfig("outer_lr must be positive".into()));
        }
        if self.source_batch == 0 {
            return Err(Error::InvalidConfig("source_batch must be at least 1".into()));
        }
        if self.horizon == Some(0) {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        self.inner.validate()?;
        self.gw.validate()?;
        make_anchors(self.basis.k, self.basis.e_max)?;
        Ok(())
    }

    pub fn dims(&self, feature_dim: usize, classes: usize) -> GnnDims {
        GnnDims {
            d_in: feature_dim,
            d_hidden: self.hidden,
            layers: self.layers,
            classes,
        }
    }
}

/// Mean source cross entropy of a proxy trained on the basis.
///
/// In [`MetaMode::Unrolled`] the result back-propagates through the whole inner
/// run. In [`MetaMode::FirstOrder`] the trained proxy `theta*` is constant; the
/// returned var has the true loss value and the gradient of
/// `-lr * <dL/dtheta*, d L_inner(theta*, S)/dtheta>`.
pub fn sem_loss<'t>(
    vars: &BasisVars<'t>,
    labels: &[usize],
    batch: &[&Graph],
    theta0: &GnnParams,
    cfg: &DistillConfig,
) -> Result<Var<'t>> {
    let tape = vars.features[0].tape();
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty source batch".into()));
    }
    let k = labels.len();
    let weights = vec![1.0 / k as f64; k];
    let source_inputs: Vec<GraphInput<'t>> =
        batch.iter().map(|g| GraphInput::constant(tape, *g)).collect();
    let source_labels: Vec<usize> = batch
        .iter()
        .map(|g| {
            g.label
                .ok_or_else(|| Error::InvalidDomain("source graph without a label".into()))
        })
        .collect::<Result<_>>()?;
    let source_weights = vec![1.0 / batch.len() as f64; batch.len()];
    let proto_inputs = vars.inputs();

    match cfg.meta_mode {
        MetaMode::Unrolled => {
            let init = theta0.to_constants(tape);
            let theta = train_on_tape(
                &init,
                &proto_inputs,
                labels,
                &weights,
                &cfg.inner,
                cfg.horizon,
            )?;
            let logits = forward_batch(&theta, &source_inputs)?;
            weighted_cross_entropy(logits, &source_labels, &source_weights)
        }
        MetaMode::FirstOrder => {
            let protos: Vec<(Tensor, Tensor)> = vars
                .adjacency
                .iter()
                .zip(&vars.features)
                .map(|(a, x)| ((*a.value()).clone(), (*x.value()).clone()))
                .collect();
            let samples: Vec<Sample<'_>> = protos
                .iter()
                .zip(labels)
                .map(|((a, x), &label)| Sample {
                    adjacency: a,
                    features: x,
                    label,
                    weight: 1.0 / k as f64,
                })
                .collect();
            let theta_star = train(theta0, &samples, &cfg.inner)?.params;

            let outer = theta_star.to_vars(tape);
            let logits = forward_batch(&outer, &source_inputs)?;
            let value = weighted_cross_entropy(logits, &source_labels, &source_weights)?;
            let g_out = tape.grad(value, &outer.vars, false)?;

            let inner = theta_star.to_vars(tape);
            let inner_logits = forward_batch(&inner, &proto_inputs)?;
            let inner_loss = weighted_cross_entropy(inner_logits, labels, &weights)?;
            let g_in = tape.grad(inner_loss, &inner.vars, true)?;
            let mut dot = tape.scalar(0.0);
            for (go, gi) in g_out.iter().zip(&g_in) {
                dot = dot.add(go.mul(*gi)?.sum())?;
            }
            let surrogate = dot.scale(-cfg.inner.learning_rate);
            Ok(value.detach().add(surrogate.sub(surrogate.detach())?)?)
        }
    }
}

/// Losses of one outer iteration, evaluated before its update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub l_sem: f64,
    pub l_span: f64,
    pub l_div: f64,
    pub l_meta: f64,
    pub epsilon_resid: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iteration,l_sem,l_span,l_div,l_meta,epsilon_resid\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            r.iteration, r.l_sem, r.l_span, r.l_div, r.l_meta, r.epsilon_resid
        ));
    }
    out
}

fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 16);
    rand::RngCore::next_u64(&mut rng)
}

/// Deterministic source batch for outer iteration `iteration`.
pub fn source_batch<'a>(source: &'a Domain, size: usize, seed: u64, iteration: usize) -> Vec<&'a Graph> {
    let n = source.len();
    if size >= n {
        return source.graphs.iter().collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, iteration as u64));
    let mut idx = sample(&mut rng, n, size).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| &source.graphs[i]).collect()
}

struct OuterAdam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OuterAdam {
    fn new(shapes: &[&Tensor]) -> Self {
        let z: Vec<Tensor> = shapes.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        OuterAdam { m: z.clone(), v: z }
    }
}

fn outer_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OuterAdam,
    cfg: &DistillConfig,
    step: usize,
) {
    let lr = cfg.outer_lr;
    match cfg.outer_optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *x -= lr * d;
                }
            }
        }
        Optimizer::Adam => {
            let (b1, b2) = (cfg.inner.beta1, cfg.inner.beta2);
            let c1 = 1.0 / (1.0 - b1.powi(step as i32));
            let c2 = 1.0 / (1.0 - b2.powi(step as i32));
            let eps = cfg.inner.adam_eps;
            for ((p, g), (m, v)) in params
                .iter_mut()
                .zip(grads)
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                for (((x, d), mi), vi) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mi = b1 * *mi + (1.0 - b1) * d;
                    *vi = b2 * *vi + (1.0 - b2) * d * d;
                    *x -= lr * (*mi * c1) / ((*vi * c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Losses and gradients of the meta objective at the current basis.
pub struct MetaEval {
    pub row: TraceRow,
    pub logit_grads: Vec<Tensor>,
    pub feature_grads: Vec<Tensor>,
}

/// Evaluates `L_sem + lambda1 L_span + lambda2 L_div` and its basis gradients.
pub fn meta_objective(
    basis: &SyntheticBasis,
    batch: &[&Graph],
    theta0: &GnnParams,
    cfg: &DistillConfig,
    iteration: usize,
) -> Result<MetaEval> {
    let tape = Tape::new();
    let vars = BasisVars::attach(&tape, basis)?;
    let span = span_loss(&vars, &basis.anchors)?;
    let n2 = (basis.n_proto * basis.n_proto) as f64;
    let div = div_loss(&vars.adjacency, &cfg.gw)?.scale(1.0 / n2);
    let mut meta = span.scale(cfg.lambda1).add(div.scale(cfg.lambda2))?;
    let l_sem = if cfg.no_sem {
        0.0
    } else {
        let sem = sem_loss(&vars, &basis.labels, batch, theta0, cfg)?;
        meta = meta.add(sem)?;
        sem.item()
    };
    let energies = basis.energies()?;
    let epsilon_resid = energies
        .iter()
        .zip(&basis.anchors)
        .map(|(e, mu)| (e - mu).abs())
        .fold(0.0, f64::max);
    let row = TraceRow {
        iteration,
        l_sem,
        l_span: span.item(),
        l_div: div.item(),
        l_meta: meta.item(),
        epsilon_resid,
    };
    if ![row.l_sem, row.l_span, row.l_div, row.l_meta].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("meta objective".into()));
    }
    let mut wrt = vars.logits.clone();
    wrt.extend_from_slice(&vars.features);
    let mut grads = tape.gradients(meta, &wrt)?;
    if !grads.iter().all(Tensor::is_finite) {
        return Err(Error::NonFinite("basis gradient".into()));
    }
    let feature_grads = grads.split_off(basis.k());
    Ok(MetaEval {
        row,
        logit_grads: grads,
        feature_grads,
    })
}

/// Runs the outer loop and returns the distilled basis with its loss trace.
pub fn distill(
    source: &Domain,
    cfg: &DistillConfig,
    basis_init: SyntheticBasis,
) -> Result<(SyntheticBasis, Vec<TraceRow>)> {
    cfg.validate()?;
    basis_init.validate()?;
    if !source.is_labeled() {
        return Err(Error::InvalidDomain("distillation needs a labeled source".into()));
    }
    if source.feature_dim != basis_init.feature_dim {
        return Err(Error::FeatureDimMismatch {
            expected: basis_init.feature_dim,
            found: source.feature_dim,
        });
    }
    let dims = cfg.dims(source.feature_dim, basis_init.num_classes);
    let mut basis = basis_init;
    let mut state = {
        let all: Vec<&Tensor> = basis.adj_logits.iter().chain(&basis.features).collect();
        OuterAdam::new(&all)
    };
    let mut trace = Vec::with_capacity(cfg.outer_iters);
    for t in 0..cfg.outer_iters {
        let mut step = || -> Result<TraceRow> {
            let batch = source_batch(source, cfg.source_batch, cfg.seed, t);
            let theta0 = init_params(dims, derive_seed(cfg.seed, 2, t as u64))?;
            let eval = meta_objective(&basis, &batch, &theta0, cfg, t)?;
            let mut grads = eval.logit_grads;
            grads.extend(eval.feature_grads);
            let mut params: Vec<&mut Tensor> = basis
                .adj_logits
                .iter_mut()
                .chain(basis.features.iter_mut())
                .collect();
            outer_step(&mut params, &grads, &mut state, cfg, t + 1);
            for l in basis.adj_logits.iter_mut() {
                *l = symmetrize_zero_diag(l);
            }
            Ok(eval.row)
        };
        trace.push(step().map_err(|e| Error::at_iteration(t, e))?);
    }
    Ok((basis, trace))
}

/// Certified covering of the energy interval by the realized prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoveringReport {
    pub epsilon_resid: f64,
    pub delta: f64,
    pub radius: f64,
    pub energies: Vec<f64>,
}

/// `max_k |E(G_k) - mu_k|` and the radius `delta / 2 + epsilon`.
pub fn covering_residual(basis: &SyntheticBasis) -> Result<CoveringReport> {
    let energies = basis.energies()?;
    Ok(covering_from_energies(&energies, &basis.anchors, basis.delta()))
}

pub fn covering_from_energies(energies: &[f64], anchors: &[f64], delta: f64) -> CoveringReport {
    let epsilon_resid = energies
        .iter()
        .zip(anchors)
        .map(|(e, mu)| (e - mu).abs())
        .fold(0.0, f64::max);
    CoveringReport {
        epsilon_resid,
        delta,
        radius: delta / 2.0 + epsilon_resid,
        energies: energies.to_vec(),
    }
}

/// Largest distance from any of `probes` to its nearest value in `energies`.
pub fn worst_probe_gap(energies: &[f64], probes: &[f64]) -> f64 {
    probes
        .iter()
        .map(|p| energies.iter().map(|e| (p - e).abs()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    rows: usize,
    cols: usize,
    values: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PrototypeFile {
    label: usize,
    adj_logits: MatrixFile,
    features: MatrixFile,
}

#[derive(Serialize, Deserialize)]
struct BasisFile {
    schema_version: u32,
    k: usize,
    n_proto: usize,
    feature_dim: usize,
    num_classes: usize,
    e_max: String,
    anchors: Vec<String>,
    prototypes: Vec<PrototypeFile>,
}

fn encode(v: f64) -> String {
    format!("{v:.17e}")
}

fn decode(field: &str, s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|e| Error::CorruptField {
        field: field.into(),
        reason: format!("{s:?}: {e}"),
    })
}

fn matrix_file(t: &Tensor) -> MatrixFile {
    MatrixFile {
        rows: t.rows(),
        cols: t.cols(),
        values: t.data().iter().map(|&v| encode(v)).collect(),
    }
}

fn matrix_from(field: &str, m: &MatrixFile) -> Result<Tensor> {
    let values = m
        .values
        .iter()
        .map(|s| decode(field, s))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_vec(m.rows, m.cols, values).map_err(|_| Error::CorruptField {
        field: field.into(),
        reason: format!("{} values for {}x{}", m.values.len(), m.rows, m.cols),
    })
}

impl SyntheticBasis {
    /// JSON text with every double written as a 18-significant-digit decimal string.
    pub fn to_json(&self) -> Result<String> {
        let file = BasisFile {
            schema_version: BASIS_SCHEMA_VERSION,
            k: self.k(),
            n_proto: self.n_proto,
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
            e_max: encode(self.e_max),
            anchors: self.anchors.iter().map(|&v| encode(v)).collect(),
            prototypes: (0..self.k())
                .map(|k| PrototypeFile {
                    label: self.labels[k],
                    adj_logits: matrix_file(&self.adj_logits[k]),
                    features: matrix_file(&self.features[k]),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BasisFile = serde_json::from_str(text).map_err(|e| Error::CorruptField {
            field: "document".into(),
            reason: e.to_string(),
        })?;
        if file.schema_version != BASIS_SCHEMA_VERSION {
            return Err(Error::SchemaVersionMismatch {
                found: file.schema_version,
                expected: BASIS_SCHEMA_VERSION,
            });
        }
        if file.k < 2 || file.prototypes.len() != file.k || file.anchors.len() != file.k {
            return Err(Error::CorruptField {
                field: "k".into(),
                reason: format!(
                    "k = {} with {} prototypes and {} anchors",
                    file.k,
                    file.prototypes.len(),
                    file.anchors.len()
                ),
            });
        }
        let basis = SyntheticBasis {
            n_proto: file.n_proto,
            feature_dim: file.feature_dim,
            num_classes: file.num_classes,
            e_max: decode("e_max", &file.e_max)?,
            anchors: file
                .anchors
                .iter()
                .map(|s| decode("anchors", s))
                .collect::<Result<_>>()?,
            labels: file.prototypes.iter().map(|p| p.label).collect(),
            adj_logits: file
                .prototypes
                .iter()
                .map(|p| matrix_from("adj_logits", &p.adj_logits))
                .collect::<Result<_>>()?,
            features: file
                .prototypes
                .iter()
                .map(|p| matrix_from("features", &p.features))
                .collect::<Result<_>>()?,
        };
        basis.validate()?;
        Ok(basis)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Inner-trained proxy on a basis, for inspection and baselines.
pub fn train_on_basis(basis: &SyntheticBasis, theta0: &GnnParams, cfg: &TrainConfig) -> Result<GnnParams> {
    let graphs = basis.graphs();
    let k = graphs.len();
    let samples: Vec<Sample<'_>> = graphs
        .iter()
        .map(|g| Sample {
            adjacency: &g.adjacency,
            features: &g.features,
            label: g.label.unwrap_or(0),
            weight: 1.0 / k as f64,
        })
        .collect();
    Ok(train(theta0, &samples, cfg)?.params)
}
