//! Training losses.
//!
//! Each loss has a value-only form (the public contract) and a `*_grad` form
//! returning the gradient with respect to the logits that produced it, which
//! the trainer chains through the network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{argmax, sigmoid, softplus, OpenSetScores};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs in
/// the domain loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Stable `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn closed_set_ce_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

pub fn closed_set_ce(logits: &[f64], label: usize) -> Result<f64> {
    closed_set_ce_grad(logits, label).map(|(l, _)| l)
}

/// The `min(k, K-1)` classes other than `label` with the largest known
/// probability, ties broken toward the lower index.
pub fn hard_negatives(known_prob: &[f64], label: usize, k: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..known_prob.len()).filter(|&j| j != label).collect();
    candidates.sort_by(|&a, &b| known_prob[b].total_cmp(&known_prob[a]).then(a.cmp(&b)));
    candidates.truncate(k);
    candidates
}

fn check_ova(scores: &OpenSetScores, label: usize, k: usize) -> Result<()> {
    if label >= scores.num_classes() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: scores.num_classes(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("top_k must be >= 1".into()));
    }
    Ok(())
}

/// One-vs-all loss with the top-`k` hardest negatives averaged:
/// `-log p_label - mean_{j in N_k} log(1 - p_j)`.
///
/// Gradient is with respect to each class's `(z_pos, z_neg)` pair. The
/// negative selection is piecewise constant and does not contribute.
pub fn ova_loss_topk_grad(
    scores: &OpenSetScores,
    label: usize,
    k: usize,
) -> Result<(f64, Vec<[f64; 2]>)> {
    check_ova(scores, label, k)?;
    let mut grad = vec![[0.0; 2]; scores.num_classes()];

    let u = scores.margin(label);
    let mut loss = softplus(-u);
    let d = -sigmoid(-u);
    grad[label] = [d, -d];

    let negatives = hard_negatives(scores.known_prob(), label, k);
    if !negatives.is_empty() {
        let inv_m = 1.0 / negatives.len() as f64;
        for &j in &negatives {
            let u = scores.margin(j);
            loss += inv_m * softplus(u);
            let d = inv_m * sigmoid(u);
            grad[j] = [d, -d];
        }
    }
    Ok((loss, grad))
}

pub fn ova_loss_topk(scores: &OpenSetScores, label: usize, k: usize) -> Result<f64> {
    ova_loss_topk_grad(scores, label, k).map(|(l, _)| l)
}

fn weighted(weight: f64, neg_log: f64) -> f64 {
    // 0 · ln 0 := 0
    if weight == 0.0 {
        0.0
    } else {
        weight * neg_log
    }
}

/// Mean binary entropy over the K one-vs-all heads.
pub fn open_entropy_grad(scores: &OpenSetScores) -> (f64, Vec<[f64; 2]>) {
    let k = scores.num_classes();
    if k == 0 {
        return (0.0, Vec::new());
    }
    let inv_k = 1.0 / k as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(k);
    for (j, &p) in scores.known_prob().iter().enumerate() {
        let u = scores.margin(j);
        total += weighted(p, softplus(-u)) + weighted(1.0 - p, softplus(u));
        // dH/du = -u p (1 - p)
        let d = if p == 0.0 || p == 1.0 {
            0.0
        } else {
            -inv_k * u * p * (1.0 - p)
        };
        grad.push([d, -d]);
    }
    (total * inv_k, grad)
}

pub fn open_entropy(scores: &OpenSetScores) -> f64 {
    open_entropy_grad(scores).0
}

/// `w^t(x) = 1 - known_prob[argmax closed logits]`. Used as a constant: no
/// gradient flows through it.
pub fn unknown_weight(scores: &OpenSetScores, closed_logits: &[f64]) -> f64 {
    let predicted = argmax(closed_logits);
    scores.unknown_prob(predicted)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn check_domain_inputs(n_source: usize, n_target: usize, n_weights: usize) -> Result<()> {
    if n_target != n_weights {
        return Err(Error::LengthMismatch {
            left: n_target,
            right: n_weights,
        });
    }
    if n_source == 0 || n_target == 0 {
        return Err(Error::InvalidArgument(
            "domain loss needs source and target samples".into(),
        ));
    }
    Ok(())
}

/// `-mean_s log D - mean_t w log(1 - D)` over discriminator outputs.
pub fn domain_adversarial_loss(d_source: &[f64], d_target: &[f64], w_target: &[f64]) -> Result<f64> {
    check_domain_inputs(d_source.len(), d_target.len(), w_target.len())?;
    let src = d_source.iter().map(|&d| -clamp_prob(d).ln()).sum::<f64>() / d_source.len() as f64;
    let tgt = d_target
        .iter()
        .zip(w_target)
        .map(|(&d, &w)| -w * (1.0 - clamp_prob(d)).ln())
        .sum::<f64>()
        / d_target.len() as f64;
    Ok(src + tgt)
}

/// Domain loss evaluated from discriminator logits (`D = sigmoid(a)`), with
/// gradients with respect to those logits. Clamped outputs get zero gradient,
/// which is the exact derivative of the clamped loss.
pub fn domain_adversarial_grad(
    source_logits: &[f64],
    target_logits: &[f64],
    w_target: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_domain_inputs(source_logits.len(), target_logits.len(), w_target.len())?;
    let d_source: Vec<f64> = source_logits.iter().map(|&a| sigmoid(a)).collect();
    let d_target: Vec<f64> = target_logits.iter().map(|&a| sigmoid(a)).collect();
    let loss = domain_adversarial_loss(&d_source, &d_target, w_target)?;
    let inside = |d: f64| (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&d);

    let ns = d_source.len() as f64;
    let g_source = d_source
        .iter()
        .map(|&d| if inside(d) { -(1.0 - d) / ns } else { 0.0 })
        .collect();
    let nt = d_target.len() as f64;
    let g_target = d_target
        .iter()
        .zip(w_target)
        .map(|(&d, &w)| if inside(d) { w * d / nt } else { 0.0 })
        .collect();
    Ok((loss, g_source, g_target))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ova: f64,
    pub entropy: f64,
    pub domain: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ova: 1.0,
            entropy: 0.1,
            domain: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub closed_ce: f64,
    pub ova: f64,
    pub entropy: f64,
    pub domain_adv: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn compose(closed_ce: f64, ova: f64, entropy: f64, domain_adv: f64, weights: LossWeights) -> Self {
        let total = closed_ce + weights.ova * ova + weights.entropy * entropy + weights.domain * domain_adv;
        Self {
            closed_ce,
            ova,
            entropy,
            domain_adv,
            total,
            weights,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.closed_ce, self.ova, self.entropy, self.domain_adv, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}
