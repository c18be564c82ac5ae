//! GIN-style graph classifier.
//!
//! Layer `l` maps `H -> MLP_l((1 + eps_l) H + A H)` where the MLP is
//! `linear -> relu -> linear`. The graph embedding is the mean of the last node
//! representations, followed by an affine classifier head. Adjacency may be
//! weighted, so synthetic prototypes with relaxed edges are differentiable end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphData;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

const TENSORS_PER_LAYER: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnDims {
    pub d_in: usize,
    pub d_hidden: usize,
    pub layers: usize,
    pub classes: usize,
}

impl GnnDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_hidden == 0 || self.layers == 0 || self.classes == 0 {
            return Err(Error::InvalidConfig(format!(
                "gnn dims must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        for l in 0..self.layers {
            let fan_in = if l == 0 { self.d_in } else { self.d_hidden };
            out.push((format!("layer{l}.w1"), (fan_in, self.d_hidden)));
            out.push((format!("layer{l}.b1"), (1, self.d_hidden)));
            out.push((format!("layer{l}.w2"), (self.d_hidden, self.d_hidden)));
            out.push((format!("layer{l}.b2"), (1, self.d_hidden)));
            out.push((format!("layer{l}.eps"), (1, 1)));
        }
        out.push(("head.w".into(), (self.d_hidden, self.classes)));
        out.push(("head.b".into(), (1, self.classes)));
        out
    }
}

/// Encoder and classifier weights, stored flat in [`GnnDims::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnParams {
    pub dims: GnnDims,
    pub tensors: Vec<Tensor>,
}

/// Uniform `±1/sqrt(fan_in)` weights, zero biases, zero `eps`.
pub fn init_params(dims: GnnDims, seed: u64) -> Result<GnnParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = dims
        .layout()
        .into_iter()
        .map(|(name, (r, c))| {
            if name.ends_with(".w1") || name.ends_with(".w2") || name == "head.w" {
                let bound = 1.0 / (r as f64).sqrt();
                Tensor::from_fn(r, c, |_, _| rng.random_range(-bound..bound))
            } else {
                Tensor::zeros(r, c)
            }
        })
        .collect();
    Ok(GnnParams { dims, tensors })
}

impl GnnParams {
    pub fn named(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.dims
            .layout()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.tensors.iter())
    }

    pub fn layer_eps(&self, layer: usize) -> f64 {
        self.tensors[layer * TENSORS_PER_LAYER + 4].item()
    }

    pub fn head_bias(&self) -> &Tensor {
        &self.tensors[self.tensors.len() - 1]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Attaches every tensor to `tape` as a parameter leaf.
    pub fn to_vars<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            dims: self.dims,
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Attaches every tensor to `tape` as a constant.
    pub fn to_constants<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            dims: self.dims,
            vars: self
                .tensors
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            dims: self.dims,
            tensors: self
                .named()
                .map(|(name, t)| NamedTensor {
                    name,
                    rows: t.rows(),
                    cols: t.cols(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::SchemaVersionMismatch {
                found: ck.schema_version,
                expected: CHECKPOINT_SCHEMA_VERSION,
            });
        }
        ck.dims.validate()?;
        let layout = ck.dims.layout();
        if layout.len() != ck.tensors.len() {
            return Err(Error::CorruptField {
                field: "tensors".into(),
                reason: format!("expected {} tensors, found {}", layout.len(), ck.tensors.len()),
            });
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for ((name, shape), nt) in layout.into_iter().zip(ck.tensors) {
            if nt.name != name || (nt.rows, nt.cols) != shape {
                return Err(Error::CorruptField {
                    field: nt.name,
                    reason: format!("expected {name} with shape {shape:?}"),
                });
            }
            tensors.push(Tensor::from_vec(nt.rows, nt.cols, nt.values).map_err(|_| {
                Error::CorruptField {
                    field: name.clone(),
                    reason: "value count does not match shape".into(),
                }
            })?);
        }
        Ok(GnnParams {
            dims: ck.dims,
            tensors,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_checkpoint())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(text)?)
    }
}

/// On-disk form of [`GnnParams`]; key order is fixed by field order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub dims: GnnDims,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Parameters living on a tape.
#[derive(Clone)]
pub struct ParamVars<'t> {
    pub dims: GnnDims,
    pub vars: Vec<Var<'t>>,
}

impl<'t> ParamVars<'t> {
    pub fn to_params(&self) -> GnnParams {
        GnnParams {
            dims: self.dims,
            tensors: self.vars.iter().map(|v| (*v.value()).clone()).collect(),
        }
    }

    pub fn detach(&self) -> ParamVars<'t> {
        ParamVars {
            dims: self.dims,
            vars: self.vars.iter().map(Var::detach).collect(),
        }
    }

    fn layer(&self, l: usize) -> &[Var<'t>] {
        &self.vars[l * TENSORS_PER_LAYER..(l + 1) * TENSORS_PER_LAYER]
    }

    fn head(&self) -> (Var<'t>, Var<'t>) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

/// One graph as tape vars.
#[derive(Clone, Copy)]
pub struct GraphInput<'t> {
    pub adjacency: Var<'t>,
    pub features: Var<'t>,
}

impl<'t> GraphInput<'t> {
    pub fn constant<G: GraphData + ?Sized>(tape: &'t Tape, g: &G) -> Self {
        GraphInput {
            adjacency: tape.constant(g.adjacency().clone()),
            features: tape.constant(g.features().clone()),
        }
    }
}

/// Logits for a batch of graphs, one row per graph.
pub fn forward_batch<'t>(params: &ParamVars<'t>, graphs: &[GraphInput<'t>]) -> Result<Var<'t>> {
    let dims = params.dims;
    let first = graphs.first().ok_or_else(|| {
        Error::InvalidConfig("forward_batch needs at least one graph".into())
    })?;
    let tape = first.features.tape();
    let mut sizes = Vec::with_capacity(graphs.len());
    for g in graphs {
        let (n, d) = g.features.shape();
        if d != dims.d_in {
            return Err(Error::FeatureDimMismatch {
                expected: dims.d_in,
                found: d,
            });
        }
        sizes.push(n);
    }
    let features: Vec<Var<'t>> = graphs.iter().map(|g| g.features).collect();
    let mut h = if graphs.len() == 1 {
        features[0]
    } else {
        tape.concat_rows(&features)?
    };

    for l in 0..dims.layers {
        let [w1, b1, w2, b2, eps] = params.layer(l) else {
            unreachable!("layer slice has fixed length")
        };
        let aggregated = if graphs.len() == 1 {
            graphs[0].adjacency.matmul(h)?
        } else {
            let mut parts = Vec::with_capacity(graphs.len());
            let mut offset = 0;
            for (g, &n) in graphs.iter().zip(&sizes) {
                parts.push(g.adjacency.matmul(h.slice_rows(offset, n)?)?);
                offset += n;
            }
            tape.concat_rows(&parts)?
        };
        let z = h.add(h.mul_scalar(*eps)?)?.add(aggregated)?;
        let hidden = z.matmul(*w1)?.add_row(*b1)?.relu();
        h = hidden.matmul(*w2)?.add_row(*b2)?;
    }

    let membership: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(gi, &n)| std::iter::repeat_n(gi, n))
        .collect();
    let inv_sizes = tape.constant(Tensor::from_fn(graphs.len(), dims.d_hidden, |i, _| {
        1.0 / sizes[i] as f64
    }));
    let pooled = h.segment_sum(&membership, graphs.len())?.mul(inv_sizes)?;
    let (head_w, head_b) = params.head();
    pooled.matmul(head_w)?.add_row(head_b)
}

/// Logits of a single graph, shape 1 x classes.
pub fn forward<'t>(params: &ParamVars<'t>, graph: GraphInput<'t>) -> Result<Var<'t>> {
    forward_batch(params, &[graph])
}

/// Plain logits for any graph collection, evaluated in chunks.
pub fn predict_logits<G: GraphData>(params: &GnnParams, graphs: &[G]) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(CHUNK) {
        let tape = Tape::new();
        let pv = params.to_constants(&tape);
        let inputs: Vec<GraphInput<'_>> =
            chunk.iter().map(|g| GraphInput::constant(&tape, g)).collect();
        let logits = forward_batch(&pv, &inputs)?.value();
        for i in 0..logits.rows() {
            out.push(logits.row(i).to_vec());
        }
    }
    Ok(out)
}

/// `-log softmax(logits)[label]` for a 1 x C logit row.
pub fn cross_entropy<'t>(logits: Var<'t>, label: usize) -> Result<Var<'t>> {
    weighted_cross_entropy(logits, &[label], &[1.0])
}

/// `sum_i w_i * CE(logits_i, labels_i)`.
pub fn weighted_cross_entropy<'t>(
    logits: Var<'t>,
    labels: &[usize],
    weights: &[f64],
) -> Result<Var<'t>> {
    let (rows, classes) = logits.shape();
    if labels.len() != rows || weights.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "weighted_cross_entropy",
            lhs: (rows, classes),
            rhs: (labels.len(), weights.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let tape = logits.tape();
    let w = tape.constant(Tensor::from_vec(rows, 1, weights.to_vec())?);
    Ok(logits
        .log_softmax_rows()
        .pick_cols(labels)?
        .mul(w)?
        .sum()
        .scale(-1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            steps: 20,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::InvalidConfig("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

/// One labeled, weighted training graph.
#[derive(Clone, Copy)]
pub struct Sample<'a> {
    pub adjacency: &'a Tensor,
    pub features: &'a Tensor,
    pub label: usize,
    pub weight: f64,
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidConfig(format!(
            "sample weights must be nonnegative, got {w}"
        )));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::AllZeroWeights);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: GnnParams,
    /// Loss before each step.
    pub losses: Vec<f64>,
}

/// Full-batch training with detached gradients.
pub fn train(params: &GnnParams, data: &[Sample<'_>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let weights: Vec<f64> = data.iter().map(|s| s.weight).collect();
    check_weights(&weights)?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let mut current = params.clone();
    let mut state = AdamState::zeros(params);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let tape = Tape::new();
        let pv = current.to_vars(&tape);
        let inputs: Vec<GraphInput<'_>> = data
            .iter()
            .map(|s| GraphInput {
                adjacency: tape.constant(s.adjacency.clone()),
                features: tape.constant(s.features.clone()),
            })
            .collect();
        let logits = forward_batch(&pv, &inputs)?;
        let loss = weighted_cross_entropy(logits, &labels, &weights)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        losses.push(value);
        let grads = tape.gradients(loss, &pv.vars)?;
        state.apply(&mut current, &grads, cfg, step);
    }
    Ok(TrainOutcome {
        params: current,
        losses,
    })
}

struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    fn zeros(params: &GnnParams) -> Self {
        let z: Vec<Tensor> = params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        AdamState {
            m: z.clone(),
            v: z,
        }
    }

    fn apply(&mut self, params: &mut GnnParams, grads: &[Tensor], cfg: &TrainConfig, step: usize) {
        let lr = cfg.learning_rate;
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.tensors.iter_mut().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * d;
                    }
                }
            }
            Optimizer::Adam => {
                let c1 = 1.0 / (1.0 - cfg.beta1.powi(step as i32));
                let c2 = 1.0 / (1.0 - cfg.beta2.powi(step as i32));
                let eps_sq = cfg.adam_eps * cfg.adam_eps;
                for ((p, g), (m, v)) in params
                    .tensors
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for (((x, d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * d;
                        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * d * d;
                        *x -= lr * (*mi * c1) / (*vi * c2 + eps_sq).sqrt();
                    }
                }
            }
        }
    }
}

/// Training recorded on the tape so the result can be differentiated with respect
/// to whatever the graphs depend on.
///
/// `horizon = Some(u)` keeps only the last `u` steps differentiable; earlier steps
/// run detached. `None` unrolls everything.
pub fn train_on_tape<'t>(
    init: &ParamVars<'t>,
    graphs: &[GraphInput<'t>],
    labels: &[usize],
    weights: &[f64],
    cfg: &TrainConfig,
    horizon: Option<usize>,
) -> Result<ParamVars<'t>> {
    cfg.validate()?;
    check_weights(weights)?;
    let tape = graphs
        .first()
        .ok_or_else(|| Error::InvalidConfig("no training graphs".into()))?
        .features
        .tape();
    let dims = init.dims;
    let mut theta = init.vars.clone();
    let zeros: Vec<Var<'t>> = theta
        .iter()
        .map(|v| {
            let (r, c) = v.shape();
            tape.constant(Tensor::zeros(r, c))
        })
        .collect();
    let mut m = zeros.clone();
    let mut v = zeros;
    let lr = cfg.learning_rate;
    for step in 1..=cfg.steps {
        let live = horizon.is_none_or(|u| step + u > cfg.steps);
        // Gradients need tracked leaves; a detached step restarts from fresh ones.
        theta = theta
            .iter()
            .map(|p| {
                if live && p.is_tracked() {
                    *p
                } else {
                    tape.param((*p.value()).clone())
                }
            })
            .collect();
        if !live {
            m = m.iter().map(Var::detach).collect();
            v = v.iter().map(Var::detach).collect();
        }
        let pv = ParamVars {
            dims,
            vars: theta.clone(),
        };
        let logits = forward_batch(&pv, graphs)?;
        let loss = weighted_cross_entropy(logits, labels, weights)?;
        if !loss.item().is_finite() {
            return Err(Error::NonFinite(format!("inner loss at step {step}")));
        }
        let grads = tape.grad(loss, &theta, live)?;
        let mut next = Vec::with_capacity(theta.len());
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in theta.iter().zip(&grads) {
                    next.push(p.sub(g.scale(lr))?);
                }
            }
            Optimizer::Adam => {
                let c1 = 1.0 / (1.0 - cfg.beta1.powi(step as i32));
                let c2 = 1.0 / (1.0 - cfg.beta2.powi(step as i32));
                let eps_sq = cfg.adam_eps * cfg.adam_eps;
                for i in 0..theta.len() {
                    let g = grads[i];
                    m[i] = m[i].scale(cfg.beta1).add(g.scale(1.0 - cfg.beta1))?;
                    v[i] = v[i]
                        .scale(cfg.beta2)
                        .add(g.mul(g)?.scale(1.0 - cfg.beta2))?;
                    let denom = v[i].scale(c2).add_scalar(eps_sq).sqrt();
                    let stepv = m[i].scale(c1 * lr).div(denom)?;
                    next.push(theta[i].sub(stepv)?);
                }
            }
        }
        theta = next;
    }
    Ok(ParamVars { dims, vars: theta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn dims() -> GnnDims {
        GnnDims {
            d_in: 4,
            d_hidden: 8,
            layers: 3,
            classes: 2,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_params(dims(), 7).unwrap();
        let b = init_params(dims(), 7).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.named() {
            if name.contains(".b") || name.ends_with("eps") {
                assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            }
        }
        for l in 0..3 {
            assert_eq!(a.layer_eps(l), 0.0);
        }
        assert_ne!(a, init_params(dims(), 8).unwrap());
    }

    #[test]
    fn logits_shape_and_zero_input() {
        let mut p = init_params(dims(), 1).unwrap();
        let n = p.tensors.len();
        p.tensors[n - 1] = Tensor::from_rows(&[vec![0.25, -0.5]]);
        let g = Graph::new(Tensor::zeros(3, 3), Tensor::zeros(3, 4), None).unwrap();
        let logits = predict_logits(&p, &[g]).unwrap();
        assert_eq!(logits, vec![vec![0.25, -0.5]]);
    }

    #[test]
    fn cross_entropy_values() {
        let tape = Tape::new();
        let ce = |row: Vec<f64>, y: usize| {
            let l = tape.constant(Tensor::from_rows(&[row]));
            cross_entropy(l, y).unwrap().item()
        };
        assert!((ce(vec![0.0, 0.0], 0) - 2f64.ln()).abs() < 1e-12);
        let big = ce(vec![1000.0, 0.0], 0);
        assert!(big.is_finite() && big.abs() < 1e-12);
        assert!((ce(vec![0.0, 0.0, 0.0], 2) - 3f64.ln()).abs() < 1e-12);
        let l = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]));
        assert!(matches!(
            cross_entropy(l, 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn feature_dim_mismatch() {
        let p = init_params(dims(), 1).unwrap();
        let g = Graph::new(Tensor::zeros(2, 2), Tensor::full(2, 3, 1.0), None).unwrap();
        assert!(matches!(
            predict_logits(&p, &[g]),
            Err(Error::FeatureDimMismatch { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn zero_steps_rejected() {
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn all_zero_weights_rejected() {
        let p = init_params(dims(), 1).unwrap();
        let a = Tensor::zeros(2, 2);
        let x = Tensor::full(2, 4, 1.0);
        let data = [Sample {
            adjacency: &a,
            features: &x,
            label: 0,
            weight: 0.0,
        }];
        assert!(matches!(
            train(&p, &data, &TrainConfig::default()),
            Err(Error::AllZeroWeights)
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_params(dims(), 3).unwrap();
        let json = p.to_json().unwrap();
        assert_eq!(GnnParams::from_json(&json).unwrap(), p);
        let mut ck = p.to_checkpoint();
        ck.schema_version = 99;
        assert!(matches!(
            GnnParams::from_checkpoint(ck),
            Err(Error::SchemaVersionMismatch { .. })
        ));
    }
}
