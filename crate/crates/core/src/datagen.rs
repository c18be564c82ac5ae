//! Deterministic generator of structurally shifted graph domains.
//!
//! Node features are `m_y + beta * s_v * u + noise`. The class mean `m_y` is the
//! same for every node of a graph, so labels are a structure-free feature rule.
//! The sign pattern `s_v` follows the structure: constant over dense clusters
//! (low energy), random over sparse random graphs (intermediate), alternating
//! along near-bipartite chains (high).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Domain, Graph, UnlabeledDomain};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Clustered,
    Mixed,
    Chain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftSpec {
    pub regime: Regime,
    pub n_graphs: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub label_signal: f64,
    /// Amplitude `beta` of the structural sign component.
    pub structure_amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            regime: Regime::Clustered,
            n_graphs: 200,
            min_nodes: 10,
            max_nodes: 20,
            classes: 2,
            feature_dim: 4,
            label_signal: 1.0,
            structure_amplitude: 1.1,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n_graphs == 0 {
            return bad("n_graphs must be at least 1");
        }
        if self.classes < 2 {
            return bad("classes must be at least 2");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1");
        }
        if self.min_nodes < 4 || self.max_nodes < self.min_nodes {
            return bad("node range must satisfy 4 <= min_nodes <= max_nodes");
        }
        if !(self.label_signal >= 0.0) || !(self.noise_std >= 0.0) {
            return bad("label_signal and noise_std must be nonnegative");
        }
        if !(self.structure_amplitude >= 0.0) {
            return bad("structure_amplitude must be nonnegative");
        }
        Ok(())
    }
}

/// Orthonormal DCT-II vector `index` of length `d`. Index 0 is the constant vector.
fn dct(index: usize, d: usize) -> Vec<f64> {
    let scale = if index == 0 { (1.0 / d as f64).sqrt() } else { (2.0 / d as f64).sqrt() };
    (0..d)
        .map(|j| {
            scale * (std::f64::consts::PI * index as f64 * (j as f64 + 0.5) / d as f64).cos()
        })
        .collect()
}

/// Class mean direction. Shared by every domain with the same `(classes, d)`.
pub fn class_direction(class: usize, d: usize) -> Vec<f64> {
    if d == 1 {
        return vec![if class % 2 == 0 { 1.0 } else { -1.0 }];
    }
    dct(1 + class % (d - 1), d)
}

fn structure(regime: Regime, n: usize, rng: &mut ChaCha8Rng) -> (Vec<(usize, usize)>, Vec<f64>) {
    let mut edges = Vec::new();
    let signs;
    match regime {
        Regime::Clustered => {
            let clusters = rng.random_range(2..=3).min(n / 2);
            let bounds: Vec<usize> = (0..=clusters).map(|c| c * n / clusters).collect();
            for c in 0..clusters {
                let (lo, hi) = (bounds[c], bounds[c + 1]);
                for i in lo..hi {
                    for j in i + 1..hi {
                        if j == i + 1 || rng.random_bool(0.7) {
                            edges.push((i, j));
                        }
                    }
                }
                if c + 1 < clusters {
                    edges.push((hi - 1, hi));
                }
            }
            signs = vec![1.0; n];
        }
        Regime::Mixed => {
            for i in 0..n {
                for j in i + 1..n {
                    if j == i + 1 || rng.random_bool(0.2) {
                        edges.push((i, j));
                    }
                }
            }
            signs = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        }
        Regime::Chain => {
            for i in 0..n - 1 {
                edges.push((i, i + 1));
            }
            // Odd-length chords keep the graph bipartite.
            for _ in 0..n / 5 {
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                let (i, j) = (i.min(j), i.max(j));
                if j > i + 2 && (j - i) % 2 == 1 {
                    edges.push((i, j));
                }
            }
            signs = (0..n).map(|v| if v % 2 == 0 { 1.0 } else { -1.0 }).collect();
        }
    }
    (edges, signs)
}

fn sub_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

fn gen_graph(spec: &ShiftSpec, label: usize, seed: u64) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(spec.min_nodes..=spec.max_nodes);
    let (edges, signs) = structure(spec.regime, n, &mut rng);
    let d = spec.feature_dim;
    let u = dct(0, d);
    let m = class_direction(label, d);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidConfig(format!("noise_std: {e}")))?;
    let features = Tensor::from_fn(n, d, |v, j| {
        let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        spec.label_signal * m[j] + spec.structure_amplitude * signs[v] * u[j] + eps
    });
    Graph::from_edges(n, &edges, features, Some(label))
}

/// Labeled domain drawn from `spec`. Labels are balanced and shuffled.
pub fn gen_domain(spec: &ShiftSpec) -> Result<Domain> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..spec.n_graphs).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let graphs = labels
        .par_iter()
        .enumerate()
        .map(|(i, &y)| gen_graph(spec, y, sub_seed(spec.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Domain::new(graphs, spec.feature_dim, spec.classes)
}

/// Source and target domains plus the target labels, kept apart from the target.
#[derive(Clone, Debug)]
pub struct ShiftPair {
    pub source: Domain,
    pub target: UnlabeledDomain,
    pub target_labels: Vec<usize>,
}

pub fn gen_shift_pair(src: &ShiftSpec, tgt: &ShiftSpec) -> Result<ShiftPair> {
    if src.classes != tgt.classes || src.feature_dim != tgt.feature_dim {
        return Err(Error::SpecMismatch(format!(
            "source has {} classes / {} features, target has {} / {}",
            src.classes, src.feature_dim, tgt.classes, tgt.feature_dim
        )));
    }
    let source = gen_domain(src)?;
    let target = gen_domain(tgt)?;
    let target_labels = target
        .graphs
        .iter()
        .map(|g| g.label.expect("generated graphs are labeled"))
        .collect();
    Ok(ShiftPair {
        source,
        target: target.into_unlabeled(),
        target_labels,
    })
}
