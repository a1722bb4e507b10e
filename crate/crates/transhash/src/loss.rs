//! Similarity-preserving Bayesian objective: weighted Cauchy cross-entropy
//! over all in-batch pairs plus a Cauchy quantization penalty, summed over
//! the global and local hash streams.

use serde::{Deserialize, Serialize};

use crate::data::LabelSet;
use crate::dual_stream::HashVectorIds;
use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

/// Pair-probability function used by the cross-entropy term.
///
/// `Sigmoid` exists for ablation comparisons only; `Cauchy` is the method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SigmaKind {
    #[default]
    Cauchy,
    Sigmoid,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Cauchy scale parameter.
    pub gamma: f64,
    /// Weight of the quantization term.
    pub lambda: f64,
    /// Lower clamp on the surrogate distance; keeps the log terms finite.
    pub distance_floor: f64,
    pub sigma: SigmaKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 10.0,
            lambda: 0.1,
            distance_floor: 1e-6,
            sigma: SigmaKind::Cauchy,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::config(format!(
                "loss.gamma must be positive, got {}",
                self.gamma
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::config(format!(
                "loss.lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !self.distance_floor.is_finite() || self.distance_floor <= 0.0 {
            return Err(Error::config(format!(
                "loss.distance_floor must be positive, got {}",
                self.distance_floor
            )));
        }
        Ok(())
    }
}

// ── Similarity structure ────────────────────────────────────────────

/// True when two label sets share at least one label.
pub fn labels_overlap(a: &LabelSet, b: &LabelSet) -> Result<bool> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("similarity over an empty label set"));
    }
    Ok(a.intersection(b).next().is_some())
}

/// All unordered in-batch pairs with their similarity bits and
/// imbalance-correcting weights.
///
/// Weights are `|S|/|S1|` for similar and `|S|/|S0|` for dissimilar pairs,
/// computed over this batch's own pairs. A batch with only one class of
/// pairs cannot estimate imbalance; those pairs get weight 1 and a warning
/// is logged.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBatch {
    /// Index pairs (i, j) with i < j, in lexicographic order.
    pub pairs: Vec<(usize, usize)>,
    pub similar: Vec<bool>,
    pub weights: Vec<f64>,
    pub num_similar: usize,
    pub num_dissimilar: usize,
}

impl SimilarityBatch {
    pub fn from_labels(labels: &[LabelSet]) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::contract(format!(
                "similarity batch needs at least 2 items, got {}",
                labels.len()
            )));
        }
        let mut pairs = Vec::new();
        let mut similar = Vec::new();
        for i in 0..labels.len() {
            for j in i + 1..labels.len() {
                pairs.push((i, j));
                similar.push(labels_overlap(&labels[i], &labels[j])?);
            }
        }
        let num_similar = similar.iter().filter(|&&s| s).count();
        let num_dissimilar = similar.len() - num_similar;
        let total = similar.len() as f64;
        if num_similar == 0 || num_dissimilar == 0 {
            log::warn!(
                "batch has {} similar / {} dissimilar pairs; falling back to unit pair weights",
                num_similar,
                num_dissimilar
            );
        }
        let w_sim = if num_similar > 0 { total / num_similar as f64 } else { 1.0 };
        let w_dis = if num_dissimilar > 0 { total / num_dissimilar as f64 } else { 1.0 };
        let weights = similar
            .iter()
            .map(|&s| if s { w_sim } else { w_dis })
            .collect();
        Ok(SimilarityBatch {
            pairs,
            similar,
            weights,
            num_similar,
            num_dissimilar,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

// ── Distance and probability ────────────────────────────────────────

/// Continuous surrogate for the Hamming distance of two hash vectors:
/// `(dim/2) * (1 - cos(a, b))`, clamped to at least `floor`.
///
/// `dim` is the length of the vectors at hand (per stream), so the surrogate
/// ranges over `[0, dim]` like a Hamming distance on `dim` bits would.
pub fn ds_distance(tape: &mut Tape, a: TensorId, b: TensorId, floor: f64) -> Result<TensorId> {
    for (side, id) in [("first", a), ("second", b)] {
        if tape.data(id).iter().all(|&v| v == 0.0) {
            return Err(Error::numeric(format!(
                "surrogate distance: {side} hash vector is all zeros (shape {:?})",
                tape.shape(id)
            )));
        }
    }
    let dim = tape.data(a).len() as f64;
    let cos = tape.cosine(a, b)?;
    let gap = tape.affine(cos, -1.0, 1.0);
    let d = tape.scale(gap, dim / 2.0);
    Ok(tape.clamp_min(d, floor))
}

/// Cauchy match probability `gamma / (gamma + d)`.
pub fn cauchy_prob(d: f64, gamma: f64) -> f64 {
    gamma / (gamma + d)
}

/// Weighted Cauchy cross-entropy for one pair of same-stream hash vectors:
/// `w * (s * ln(d/gamma) + ln(1 + gamma/d))`.
pub fn cauchy_ce_loss(
    tape: &mut Tape,
    h_i: TensorId,
    h_j: TensorId,
    similar: bool,
    weight: f64,
    cfg: &LossConfig,
) -> Result<TensorId> {
    let d = ds_distance(tape, h_i, h_j, cfg.distance_floor)?;
    let ln_d = tape.ln(d);
    let d_plus_gamma = tape.affine(d, 1.0, cfg.gamma);
    let ln_dg = tape.ln(d_plus_gamma);
    // ln(1 + gamma/d) = ln(d + gamma) - ln(d)
    let tail = tape.sub(ln_dg, ln_d)?;
    let term = if similar {
        let ratio = tape.affine(ln_d, 1.0, -cfg.gamma.ln()); // ln(d/gamma)
        tape.add(ratio, tail)?
    } else {
        tail
    };
    Ok(tape.scale(term, weight))
}

/// Ablation-only logistic cross-entropy over the scaled cosine similarity.
///
/// Uses `sigma = logistic((dim/2) * cos)` and the stable softplus form
/// `w * (softplus(sim) - s * sim)`.
pub fn sigmoid_ce_loss(
    tape: &mut Tape,
    h_i: TensorId,
    h_j: TensorId,
    similar: bool,
    weight: f64,
) -> Result<TensorId> {
    let dim = tape.data(h_i).len() as f64;
    let cos = tape.cosine(h_i, h_j)?;
    let sim = tape.scale(cos, dim / 2.0);
    // softplus(x) = max(x, 0) + ln(1 + exp(-|x|))
    let pos = tape.clamp_min(sim, 0.0);
    let abs = tape.abs(sim);
    let neg_abs = tape.scale(abs, -1.0);
    let e = tape.exp(neg_abs);
    let one_plus = tape.affine(e, 1.0, 1.0);
    let ln_term = tape.ln(one_plus);
    let softplus = tape.add(pos, ln_term)?;
    let term = if similar {
        tape.sub(softplus, sim)?
    } else {
        softplus
    };
    Ok(tape.scale(term, weight))
}

fn pair_ce_loss(
    tape: &mut Tape,
    h_i: TensorId,
    h_j: TensorId,
    similar: bool,
    weight: f64,
    cfg: &LossConfig,
) -> Result<TensorId> {
    match cfg.sigma {
        SigmaKind::Cauchy => cauchy_ce_loss(tape, h_i, h_j, similar, weight, cfg),
        SigmaKind::Sigmoid => sigmoid_ce_loss(tape, h_i, h_j, similar, weight),
    }
}

/// Cauchy quantization penalty `ln(1 + D_S(|h|, 1)/gamma)`.
///
/// Zero (up to the distance floor) exactly when every entry has the same
/// magnitude, i.e. `|h|` is positively proportional to the all-ones vector.
pub fn quantization_loss(tape: &mut Tape, h: TensorId, cfg: &LossConfig) -> Result<TensorId> {
    if tape.data(h).iter().all(|&v| v == 0.0) {
        return Err(Error::numeric(format!(
            "quantization loss: hash vector is all zeros (shape {:?})",
            tape.shape(h)
        )));
    }
    let magnitudes = tape.abs(h);
    let ones = tape.constant(vec![1.0; tape.data(h).len()], tape.shape(h).to_vec())?;
    let d = ds_distance(tape, magnitudes, ones, cfg.distance_floor)?;
    let inner = tape.affine(d, 1.0 / cfg.gamma, 1.0);
    Ok(tape.ln(inner))
}

// ── Batch objective ─────────────────────────────────────────────────

/// The assembled objective for one batch, with component values for logging.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Scalar loss node: `L_B_global + L_B_local + lambda * (L_Q_global + L_Q_local)`.
    pub total: TensorId,
    pub bayes_global: f64,
    pub bayes_local: f64,
    pub quant_global: f64,
    pub quant_local: f64,
}

impl BatchLoss {
    pub fn bayes(&self) -> f64 {
        self.bayes_global + self.bayes_local
    }

    pub fn quant(&self) -> f64 {
        self.quant_global + self.quant_local
    }
}

fn sum_terms(tape: &mut Tape, terms: &[TensorId]) -> Result<TensorId> {
    let mut acc = *terms
        .first()
        .ok_or_else(|| Error::contract("summing zero loss terms"))?;
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Builds the full objective over a batch of per-image hash vector sets.
///
/// The cross-entropy runs per stream with that stream's own width feeding
/// the surrogate distance; local Bayes and quantization terms sum over all
/// K streams. With `lambda == 0` the quantization nodes are still evaluated
/// for logging but stay disconnected from `total`, so they contribute
/// nothing to gradients.
pub fn total_loss(
    tape: &mut Tape,
    hash_sets: &[HashVectorIds],
    batch: &SimilarityBatch,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::contract("loss over an empty pair batch"));
    }
    let n = hash_sets.len();
    if batch.pairs.iter().any(|&(i, j)| i >= n || j >= n) {
        return Err(Error::contract(format!(
            "similarity batch references images beyond the {n} provided"
        )));
    }
    let k = hash_sets
        .first()
        .map(|h| h.locals.len())
        .ok_or_else(|| Error::contract("loss over an empty image batch"))?;

    let mut global_terms = Vec::with_capacity(batch.len());
    let mut local_terms = Vec::with_capacity(batch.len() * k);
    for (idx, &(i, j)) in batch.pairs.iter().enumerate() {
        let s = batch.similar[idx];
        let w = batch.weights[idx];
        global_terms.push(pair_ce_loss(
            tape,
            hash_sets[i].global,
            hash_sets[j].global,
            s,
            w,
            cfg,
        )?);
        for g in 0..k {
            local_terms.push(pair_ce_loss(
                tape,
                hash_sets[i].locals[g],
                hash_sets[j].locals[g],
                s,
                w,
                cfg,
            )?);
        }
    }
    let bayes_global = sum_terms(tape, &global_terms)?;
    let bayes_local = sum_terms(tape, &local_terms)?;

    let mut quant_global_terms = Vec::with_capacity(n);
    let mut quant_local_terms = Vec::with_capacity(n * k);
    for h in hash_sets {
        quant_global_terms.push(quantization_loss(tape, h.global, cfg)?);
        for &l in &h.locals {
            quant_local_terms.push(quantization_loss(tape, l, cfg)?);
        }
    }
    let quant_global = sum_terms(tape, &quant_global_terms)?;
    let quant_local = sum_terms(tape, &quant_local_terms)?;

    let bayes = tape.add(bayes_global, bayes_local)?;
    let total = if cfg.lambda > 0.0 {
        let quant = tape.add(quant_global, quant_local)?;
        let scaled = tape.scale(quant, cfg.lambda);
        tape.add(bayes, scaled)?
    } else {
        bayes
    };

    Ok(BatchLoss {
        total,
        bayes_global: tape.scalar(bayes_global)?,
        bayes_local: tape.scalar(bayes_local)?,
        quant_global: tape.scalar(quant_global)?,
        quant_local: tape.scalar(quant_local)?,
    })
}
