//! Label-free adaptation on the distilled basis.
//!
//! The target domain is summarized by one number, its mean Dirichlet energy. A
//! Gaussian kernel around that fingerprint weights the prototypes, a fresh proxy
//! is trained on the weighted prototypes only, and the proxy classifies the
//! original target graphs.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::SyntheticBasis;
use crate::error::{Error, Result};
use crate::gnn::{init_params, predict_logits, train, GnnDims, GnnParams, Sample, TrainConfig};
use crate::graph::{energy_of, GraphData, UnlabeledDomain, ZERO_FEATURE_NORM_SQ, DEGREE_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralFingerprint {
    pub value: f64,
    pub n_graphs: usize,
    pub skipped: usize,
}

fn energies<G: GraphData + Sync>(graphs: &[G]) -> Vec<Option<f64>> {
    graphs
        .par_iter()
        .map(|g| {
            if g.features().frobenius_norm_sq() < ZERO_FEATURE_NORM_SQ {
                None
            } else {
                energy_of(g.adjacency(), g.features(), DEGREE_EPS).ok()
            }
        })
        .collect()
}

/// Mean normalized Dirichlet energy, skipping zero-feature graphs.
pub fn fingerprint<G: GraphData + Sync>(graphs: &[G]) -> Result<SpectralFingerprint> {
    let all = energies(graphs);
    let used: Vec<f64> = all.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::AllGraphsDegenerate);
    }
    let value = used.iter().sum::<f64>() / used.len() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("fingerprint".into()));
    }
    Ok(SpectralFingerprint {
        value,
        n_graphs: used.len(),
        skipped: all.len() - used.len(),
    })
}

/// `softmax_k(-(e - mu_k)^2 / (2 sigma^2))`.
pub fn basis_weights(e: f64, anchors: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    if anchors.is_empty() {
        return Err(Error::InvalidConfig("no anchors".into()));
    }
    let scores: Vec<f64> = anchors
        .iter()
        .map(|mu| -(e - mu).powi(2) / (2.0 * sigma * sigma))
        .collect();
    Ok(softmax(&scores))
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|x| x / total).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub sigma: f64,
    pub proxy: TrainConfig,
    /// Start the proxy from supplied weights instead of a fresh initialization.
    pub warm_start: bool,
    /// Replace the kernel weights by `1/K` (the no-attention ablation).
    pub uniform_weights: bool,
    pub hidden: usize,
    pub layers: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            sigma: 1.0,
            proxy: TrainConfig::default(),
            warm_start: false,
            uniform_weights: false,
            hidden: 32,
            layers: 2,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        self.proxy.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptTimings {
    pub fingerprint_ms: f64,
    pub proxy_train_ms: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub phi: GnnParams,
    pub weights: Vec<f64>,
    pub fingerprint: SpectralFingerprint,
    pub timings: AdaptTimings,
}

/// Trains the proxy on kernel-weighted prototypes.
///
/// Only the unlabeled target view is accepted. `warm` supplies starting weights
/// when `cfg.warm_start` is set.
pub fn adapt(
    basis: &SyntheticBasis,
    target: &UnlabeledDomain,
    cfg: &AdaptConfig,
    warm: Option<&GnnParams>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if basis.feature_dim != target.feature_dim {
        return Err(Error::FeatureDimMismatch {
            expected: basis.feature_dim,
            found: target.feature_dim,
        });
    }
    let started = Instant::now();
    let fp = fingerprint(&target.graphs)?;
    let fingerprint_ms = started.elapsed().as_secs_f64() * 1e3;

    let started = Instant::now();
    let weights = if cfg.uniform_weights {
        vec![1.0 / basis.k() as f64; basis.k()]
    } else {
        basis_weights(fp.value, &basis.anchors, cfg.sigma)?
    };
    let dims = GnnDims {
        d_in: basis.feature_dim,
        d_hidden: cfg.hidden,
        layers: cfg.layers,
        classes: basis.num_classes,
    };
    let phi0 = match (cfg.warm_start, warm) {
        (true, Some(p)) if p.dims == dims => p.clone(),
        (true, Some(p)) => {
            return Err(Error::InvalidConfig(format!(
                "warm start dims {:?} differ from proxy dims {:?}",
                p.dims, dims
            )))
        }
        (true, None) => {
            return Err(Error::InvalidConfig("warm_start set without weights".into()))
        }
        (false, _) => init_params(dims, cfg.seed)?,
    };
    let graphs = basis.graphs();
    let samples: Vec<Sample<'_>> = graphs
        .iter()
        .zip(&weights)
        .map(|(g, &w)| Sample {
            adjacency: &g.adjacency,
            features: &g.features,
            label: g.label.expect("prototypes are labeled"),
            weight: w,
        })
        .collect();
    let phi = train(&phi0, &samples, &cfg.proxy)?.params;
    let proxy_train_ms = started.elapsed().as_secs_f64() * 1e3;

    Ok(AdaptOutcome {
        phi,
        weights,
        fingerprint: fp,
        timings: AdaptTimings {
            fingerprint_ms,
            proxy_train_ms,
        },
    })
}

/// Argmax class per graph; ties go to the smaller index.
pub fn predict<G: GraphData>(phi: &GnnParams, graphs: &[G]) -> Result<Vec<usize>> {
    Ok(predict_logits(phi, graphs)?
        .iter()
        .map(|row| argmax(row))
        .collect())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean over target graphs of the gap to the nearest realized prototype energy.
pub fn covering_discrepancy<G: GraphData + Sync>(
    basis: &SyntheticBasis,
    graphs: &[G],
) -> Result<f64> {
    let protos = basis.energies()?;
    discrepancy_from_energies(&protos, &energies(graphs))
}

pub fn discrepancy_from_energies(protos: &[f64], target: &[Option<f64>]) -> Result<f64> {
    let used: Vec<f64> = target
        .iter()
        .flatten()
        .map(|e| protos.iter().map(|p| (e - p).abs()).fold(f64::INFINITY, f64::min))
        .collect();
    if used.is_empty() {
        return Err(Error::AllGraphsDegenerate);
    }
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}
