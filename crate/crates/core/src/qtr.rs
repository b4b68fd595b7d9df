//! Triplet sampling, the quantitative-relativity triplet loss, cross-entropy,
//! the combined objective and latent/prior alignment measurement.
//!
//! For a triplet `(a, b, c)` with latent distances `dz(a,b)`, `dz(a,c)` and
//! prior distances `D(a,b)`, `D(a,c)` the loss is
//!
//! ```text
//! |dz(a,b) * D(a,c) - dz(a,c) * D(a,b)|
//! ```
//!
//! which vanishes exactly when `dz(a,b) / D(a,b) == dz(a,c) / D(a,c)`, i.e.
//! when latent distances are a common multiple of the prior distances. There
//! is no margin. Any constant scale on `D` can be folded into `alpha`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ExprGraph, NodeId, Tensor};
use crate::knowledge::DistanceMatrix;
use crate::latent::{latent_distance, standardize, LatentError, LatentVector, EXPONENT_RANGE};
use crate::rng::Pcg32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("cannot sample from an empty dataset")]
    EmptyDataset,
    #[error("distance inputs must be nonnegative, got {0}")]
    NegativeDistance(f64),
    #[error("label {label} outside 0..{classes}")]
    BadLabel { label: usize, classes: usize },
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("alignment needs at least 2 classes with latents, got {0}")]
    TooFewClasses(usize),
    #[error(transparent)]
    Latent(#[from] LatentError),
}

/// Reference to one dataset sample and its class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub index: usize,
    pub label: usize,
}

/// Anchor plus two pairing samples; members may repeat.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: SampleRef,
    pub pairing_b: SampleRef,
    pub pairing_c: SampleRef,
}

impl Triplet {
    pub fn members(&self) -> [SampleRef; 3] {
        [self.anchor, self.pairing_b, self.pairing_c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the quantitative-relativity term.
    pub alpha: f64,
    /// Latent distance exponent.
    pub ell: f64,
    /// Average both terms over all three anchor rotations of the triplet.
    pub symmetrized: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            ell: 1.0,
            symmetrized: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(ObjectiveError::Config(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(EXPONENT_RANGE.0..=EXPONENT_RANGE.1).contains(&self.ell) {
            return Err(ObjectiveError::Config(format!("ell {} outside [1, 4]", self.ell)));
        }
        Ok(())
    }
}

/// Three independent uniform draws over sample indices, with replacement.
pub fn sample_triplet(labels: &[usize], rng: &mut Pcg32) -> Result<Triplet, ObjectiveError> {
    if labels.is_empty() {
        return Err(ObjectiveError::EmptyDataset);
    }
    let mut draw = || {
        let index = rng.gen_range(0..labels.len());
        SampleRef {
            index,
            label: labels[index],
        }
    };
    Ok(Triplet {
        anchor: draw(),
        pairing_b: draw(),
        pairing_c: draw(),
    })
}

/// `|dz_ab * d_ac - dz_ac * d_ab|` on plain numbers.
pub fn qtr_loss(dz_ab: f64, dz_ac: f64, d_ab: f64, d_ac: f64) -> Result<f64, ObjectiveError> {
    for v in [dz_ab, dz_ac, d_ab, d_ac] {
        if !(v >= 0.0) {
            return Err(ObjectiveError::NegativeDistance(v));
        }
    }
    Ok((dz_ab * d_ac - dz_ac * d_ab).abs())
}

/// `-log softmax(logits)[label]`, stabilized by subtracting the maximum.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64, ObjectiveError> {
    if label >= logits.len() {
        return Err(ObjectiveError::BadLabel {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Graph node for the latent distance between two `[1, m]` latent nodes.
pub fn latent_distance_node(g: &mut ExprGraph, za: NodeId, zb: NodeId, ell: f64) -> NodeId {
    let sa = g.standardize(za);
    let sb = g.standardize(zb);
    let diff = g.sub(sa, sb);
    let gap = g.abs(diff);
    let powered = if ell == 1.0 { gap } else { g.pow(gap, ell) };
    g.sum_all(powered)
}

/// Graph node for the QTR loss of latent nodes `za, zb, zc` given the prior
/// distances from the anchor.
pub fn qtr_node(
    g: &mut ExprGraph,
    [za, zb, zc]: [NodeId; 3],
    d_ab: f64,
    d_ac: f64,
    ell: f64,
) -> NodeId {
    let dz_ab = latent_distance_node(g, za, zb, ell);
    let dz_ac = latent_distance_node(g, za, zc, ell);
    let left = g.scale(dz_ab, d_ac);
    let right = g.scale(dz_ac, d_ab);
    let diff = g.sub(left, right);
    g.abs(diff)
}

/// Graph node for the cross-entropy of one `[1, K]` logits node.
pub fn cross_entropy_node(g: &mut ExprGraph, logits: NodeId, label: usize) -> NodeId {
    let y = g.constant(Tensor::vector(&[label as f64]));
    let nll = g.softmax_nll(logits, y);
    g.sum_all(nll)
}

/// Cross-entropy and QTR parts of the triplet objective, unweighted.
#[derive(Clone, Copy, Debug)]
pub struct TripletTerms {
    /// Anchor cross-entropy, or its mean over rotations when symmetrized.
    pub ce: NodeId,
    /// QTR loss (rotation mean when symmetrized); `None` when `alpha == 0`.
    pub qtr: Option<NodeId>,
}

/// Builds the two terms of the triplet objective over per-member `[1, m]`
/// latent and `[1, K]` logit nodes. `labels` index rows of `prior`, which is
/// never consulted when `alpha == 0`.
pub fn triplet_terms(
    g: &mut ExprGraph,
    latents: [NodeId; 3],
    logits: [NodeId; 3],
    labels: [usize; 3],
    prior: &DistanceMatrix,
    cfg: &LossConfig,
) -> Result<TripletTerms, ObjectiveError> {
    cfg.validate()?;
    let rotations: &[[usize; 3]] = if cfg.symmetrized {
        &[[0, 1, 2], [1, 2, 0], [2, 0, 1]]
    } else {
        &[[0, 1, 2]]
    };
    let with_qtr = cfg.alpha > 0.0;
    if with_qtr {
        if let Some(&bad) = labels.iter().find(|&&l| l >= prior.len()) {
            return Err(ObjectiveError::BadLabel {
                label: bad,
                classes: prior.len(),
            });
        }
    }
    let mut ces = Vec::new();
    let mut qtrs = Vec::new();
    for &[a, b, c] in rotations {
        ces.push(cross_entropy_node(g, logits[a], labels[a]));
        if with_qtr {
            let d_ab = prior.get(labels[a], labels[b]);
            let d_ac = prior.get(labels[a], labels[c]);
            qtrs.push(qtr_node(g, [latents[a], latents[b], latents[c]], d_ab, d_ac, cfg.ell));
        }
    }
    let ce = mean_of(g, &ces);
    let qtr = (!qtrs.is_empty()).then(|| mean_of(g, &qtrs));
    Ok(TripletTerms { ce, qtr })
}

fn mean_of(g: &mut ExprGraph, nodes: &[NodeId]) -> NodeId {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n);
    }
    if nodes.len() > 1 {
        g.scale(acc, 1.0 / nodes.len() as f64)
    } else {
        acc
    }
}

/// Builds `CE(anchor) + alpha * QTR(a, b, c)`; see [`triplet_terms`].
pub fn total_objective(
    g: &mut ExprGraph,
    latents: [NodeId; 3],
    logits: [NodeId; 3],
    labels: [usize; 3],
    prior: &DistanceMatrix,
    cfg: &LossConfig,
) -> Result<NodeId, ObjectiveError> {
    let terms = triplet_terms(g, latents, logits, labels, prior, cfg)?;
    Ok(match terms.qtr {
        Some(q) => {
            let weighted = g.scale(q, cfg.alpha);
            g.add(terms.ce, weighted)
        }
        None => terms.ce,
    })
}

/// Best-fit scale between latent and prior distances plus fit quality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Least-squares `lambda` in `dz ~ lambda * D`.
    pub lambda: f64,
    /// Root mean square of `dz - lambda * D`.
    pub residual: f64,
    /// Pearson correlation of `dz` and `D` over class pairs; 0 when either
    /// side has no spread.
    pub pearson: f64,
    pub pairs: usize,
}

/// Fits `dz ~ lambda * prior` over matched distance pairs.
pub fn fit_alignment(dz: &[f64], prior: &[f64]) -> AlignmentReport {
    assert_eq!(dz.len(), prior.len());
    let n = dz.len() as f64;
    let sxy: f64 = dz.iter().zip(prior).map(|(a, b)| a * b).sum();
    let sxx: f64 = prior.iter().map(|b| b * b).sum();
    let lambda = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let residual = (dz
        .iter()
        .zip(prior)
        .map(|(a, b)| (a - lambda * b).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let (mx, my) = (dz.iter().sum::<f64>() / n, prior.iter().sum::<f64>() / n);
    let cov: f64 = dz.iter().zip(prior).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = dz.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = prior.iter().map(|b| (b - my).powi(2)).sum();
    let pearson = if vx > 0.0 && vy > 0.0 {
        (cov / (vx * vy).sqrt()).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    AlignmentReport {
        lambda,
        residual,
        pearson,
        pairs: dz.len(),
    }
}

/// Per-class centroid of standardized latents.
pub fn class_centroid(latents: &[LatentVector]) -> Result<LatentVector, ObjectiveError> {
    let first = latents.first().ok_or(LatentError::EmptyBatch)?;
    let mut sum = vec![0.0; first.dim()];
    for z in latents {
        if z.dim() != first.dim() {
            return Err(LatentError::LengthMismatch(first.dim(), z.dim()).into());
        }
        for (s, v) in sum.iter_mut().zip(standardize(z).values()) {
            *s += v;
        }
    }
    let n = latents.len() as f64;
    Ok(LatentVector::new(sum.into_iter().map(|s| s / n).collect())?)
}

/// Alignment between class-centroid latent distances and the prior over all
/// unordered class pairs. `class_latents[i]` holds the latents of the class
/// in row `i` of `prior`; classes with no latents are skipped.
pub fn measure_alignment(
    class_latents: &[Vec<LatentVector>],
    prior: &DistanceMatrix,
    ell: f64,
) -> Result<AlignmentReport, ObjectiveError> {
    let present: Vec<usize> = (0..class_latents.len().min(prior.len()))
        .filter(|&i| !class_latents[i].is_empty())
        .collect();
    if present.len() < 2 {
        return Err(ObjectiveError::TooFewClasses(present.len()));
    }
    let centroids = present
        .iter()
        .map(|&i| class_centroid(&class_latents[i]))
        .collect::<Result<Vec<_>, _>>()?;
    let mut dz = Vec::new();
    let mut dt = Vec::new();
    for a in 0..present.len() {
        for b in a + 1..present.len() {
            dz.push(latent_distance(&centroids[a], &centroids[b], ell)?);
            dt.push(prior.get(present[a], present[b]));
        }
    }
    Ok(fit_alignment(&dz, &dt))
}
