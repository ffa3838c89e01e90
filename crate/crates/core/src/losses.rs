//! Supervised cross entropy, thresholded pseudo-label cross entropy and the
//! multi-positive margin contrastive loss, each with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, sigmoid, softmax_unchecked, softplus, Distribution};
use crate::scalar::Scalar;

/// Loss value with one gradient row per batch entry.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss<T: Scalar> {
    pub value: T,
    pub grads: Vec<Vec<T>>,
}

impl<T: Scalar> BatchLoss<T> {
    pub fn zero(rows: usize, width: usize) -> Self {
        Self {
            value: T::zero(),
            grads: vec![vec![T::zero(); width]; rows],
        }
    }
}

/// `H(target, softmax(logits))` and its logit gradient `softmax - target`.
pub fn cross_entropy<T: Scalar>(target: &[T], logits: &[T]) -> Result<(T, Vec<T>)> {
    if target.len() != logits.len() {
        return Err(Error::DimensionMismatch {
            expected: target.len(),
            got: logits.len(),
        });
    }
    let lse = log_sum_exp(logits)?;
    let mut value = T::zero();
    for (&t, &x) in target.iter().zip(logits) {
        if t != T::zero() {
            value -= t * (x - lse);
        }
    }
    let p = softmax_unchecked(logits);
    let grad = p.iter().zip(target).map(|(&pi, &ti)| pi - ti).collect();
    Ok((value, grad))
}

/// Mean one-hot cross entropy over the labeled batch. An empty batch yields
/// zero loss and no gradient rows.
pub fn sup_loss<T: Scalar>(targets: &[usize], logits: &[Vec<T>]) -> Result<BatchLoss<T>> {
    if targets.len() != logits.len() {
        return Err(Error::DimensionMismatch {
            expected: targets.len(),
            got: logits.len(),
        });
    }
    if logits.is_empty() {
        return Ok(BatchLoss::zero(0, 0));
    }
    let scale = T::one() / T::lit(logits.len() as f64);
    let mut value = T::zero();
    let mut grads = Vec::with_capacity(logits.len());
    for (&y, l) in targets.iter().zip(logits) {
        if y >= l.len() {
            return Err(Error::InvalidParameter(format!(
                "class {y} out of range for {} logits",
                l.len()
            )));
        }
        let target = Distribution::<T>::one_hot(l.len(), y);
        let (v, g) = cross_entropy(target.probs(), l)?;
        value += v;
        grads.push(g.into_iter().map(|x| x * scale).collect());
    }
    Ok(BatchLoss {
        value: value * scale,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelLoss<T: Scalar> {
    pub loss: BatchLoss<T>,
    /// Entries whose largest pseudo-label probability reached the threshold.
    pub kept: usize,
}

/// Cross entropy against constant pseudo labels, masked by
/// `max p̂ ≥ tau` and normalized by the full batch size.
pub fn pseudo_label_loss<T: Scalar>(
    pseudo: &[Distribution<T>],
    tau: T,
    strong_logits: &[Vec<T>],
) -> Result<PseudoLabelLoss<T>> {
    if pseudo.len() != strong_logits.len() {
        return Err(Error::DimensionMismatch {
            expected: pseudo.len(),
            got: strong_logits.len(),
        });
    }
    if !(tau > T::zero() && tau <= T::one()) {
        return Err(Error::InvalidParameter(format!("threshold {tau} outside (0, 1]")));
    }
    let n = pseudo.len();
    if n == 0 {
        return Ok(PseudoLabelLoss {
            loss: BatchLoss::zero(0, 0),
            kept: 0,
        });
    }
    let scale = T::one() / T::lit(n as f64);
    let mut value = T::zero();
    let mut kept = 0;
    let mut grads = Vec::with_capacity(n);
    for (target, logits) in pseudo.iter().zip(strong_logits) {
        if target.argmax().1 >= tau {
            let (v, g) = cross_entropy(target.probs(), logits)?;
            value += v;
            kept += 1;
            grads.push(g.into_iter().map(|x| x * scale).collect());
        } else {
            grads.push(vec![T::zero(); logits.len()]);
        }
    }
    Ok(PseudoLabelLoss {
        loss: BatchLoss {
            value: value * scale,
            grads,
        },
        kept,
    })
}

/// Similarities and hyperparameters of one contrastive query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ContrastiveInputs<T: Scalar> {
    /// Positive similarities in `[-1, 1]`.
    pub s_p: Vec<T>,
    /// Self-paced weight of every positive, in `[0, 1]`.
    pub alpha_p: Vec<T>,
    /// Negative similarities in `[-1, 1]`.
    pub s_n: Vec<T>,
    /// Scale, the inverse temperature.
    pub gamma: T,
    pub margin: T,
}

impl<T: Scalar> ContrastiveInputs<T> {
    pub fn validate(&self) -> Result<()> {
        if self.s_p.is_empty() {
            return Err(Error::DegenerateContrastiveBatch("no positives"));
        }
        if self.s_n.is_empty() {
            return Err(Error::DegenerateContrastiveBatch("no negatives"));
        }
        if self.alpha_p.len() != self.s_p.len() {
            return Err(Error::DimensionMismatch {
                expected: self.s_p.len(),
                got: self.alpha_p.len(),
            });
        }
        let one = T::one();
        if let Some(s) = self.s_p.iter().chain(&self.s_n).find(|s| !(**s >= -one && **s <= one)) {
            return Err(Error::InvalidParameter(format!("similarity {s} outside [-1, 1]")));
        }
        if let Some(a) = self.alpha_p.iter().find(|a| !(**a >= T::zero() && **a <= one)) {
            return Err(Error::InvalidParameter(format!("self-paced weight {a} outside [0, 1]")));
        }
        if !(self.gamma > T::zero()) || !self.gamma.is_finite() {
            return Err(Error::NonpositiveScale(self.gamma.as_f64()));
        }
        if !self.margin.is_finite() {
            return Err(Error::NonFinite(format!("margin {}", self.margin)));
        }
        Ok(())
    }

    /// Positive logits `γ(α_p s_p - m)`.
    pub fn positive_logits(&self) -> Vec<T> {
        self.s_p
            .iter()
            .zip(&self.alpha_p)
            .map(|(&s, &a)| self.gamma * (a * s - self.margin))
            .collect()
    }

    /// Negative logits `γ s_n`.
    pub fn negative_logits(&self) -> Vec<T> {
        self.s_n.iter().map(|&s| self.gamma * s).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T: Scalar> {
    pub value: T,
    pub grad_sp: Vec<T>,
    pub grad_sn: Vec<T>,
}

/// Log-space pieces shared by the production loss and its logit gradients.
struct SoftplusTerms<T> {
    /// `log Σ_- exp(γ(s_n + m)) + log Σ_+ exp(-γ α_p s_p)`.
    arg: T,
    neg_weights: Vec<T>,
    pos_weights: Vec<T>,
}

fn softplus_terms<T: Scalar>(inp: &ContrastiveInputs<T>) -> Result<SoftplusTerms<T>> {
    let neg: Vec<T> = inp.s_n.iter().map(|&s| inp.gamma * (s + inp.margin)).collect();
    let pos: Vec<T> = inp
        .s_p
        .iter()
        .zip(&inp.alpha_p)
        .map(|(&s, &a)| -inp.gamma * a * s)
        .collect();
    Ok(SoftplusTerms {
        arg: log_sum_exp(&neg)? + log_sum_exp(&pos)?,
        neg_weights: softmax_unchecked(&neg),
        pos_weights: softmax_unchecked(&pos),
    })
}

/// Multi-positive margin contrastive loss
/// `log(1 + Σ_- exp(γ(s_n + m)) · Σ_+ exp(-γ α_p s_p))`,
/// evaluated as a softplus of two log-sum-exps. `α_p` and `γ` are constants
/// for the gradient.
///
/// With one positive this equals both softmax-ratio forms below. With
/// several it exceeds them, since `Σ e^{-x} · Σ e^{x} ≥ K⁺²`.
pub fn contrastive_loss<T: Scalar>(inp: &ContrastiveInputs<T>) -> Result<LossOutput<T>> {
    inp.validate()?;
    let t = softplus_terms(inp)?;
    let w = sigmoid(t.arg);
    let grad_sn = t.neg_weights.iter().map(|&q| w * inp.gamma * q).collect();
    let grad_sp = t
        .pos_weights
        .iter()
        .zip(&inp.alpha_p)
        .map(|(&q, &a)| -w * inp.gamma * a * q)
        .collect();
    Ok(LossOutput {
        value: softplus(t.arg),
        grad_sp,
        grad_sn,
    })
}

/// Gradients of the loss with respect to the positive logits
/// `a_k = γ(α_p s_p,k - m)` and negative logits `b_k = γ s_n,k`.
/// The two sums are equal and opposite.
pub fn contrastive_logit_grads<T: Scalar>(inp: &ContrastiveInputs<T>) -> Result<(Vec<T>, Vec<T>)> {
    inp.validate()?;
    let t = softplus_terms(inp)?;
    let w = sigmoid(t.arg);
    Ok((
        t.pos_weights.iter().map(|&q| -w * q).collect(),
        t.neg_weights.iter().map(|&q| w * q).collect(),
    ))
}

/// Softmax-ratio form with the margin on the positives:
/// `-log(Σ_+ e^{γ(α_p s_p - m)} / (Σ_+ e^{γ(α_p s_p - m)} + Σ_- e^{γ s_n}))`.
pub fn contrastive_loss_margin_on_positives<T: Scalar>(inp: &ContrastiveInputs<T>) -> Result<T> {
    inp.validate()?;
    let pos = inp.positive_logits();
    let all: Vec<T> = pos.iter().chain(&inp.negative_logits()).copied().collect();
    Ok(log_sum_exp(&all)? - log_sum_exp(&pos)?)
}

/// Softmax-ratio form with the margin moved onto the negatives:
/// `-log(Σ_+ e^{γ α_p s_p} / (Σ_+ e^{γ α_p s_p} + Σ_- e^{γ(s_n + m)}))`.
pub fn contrastive_loss_margin_on_negatives<T: Scalar>(inp: &ContrastiveInputs<T>) -> Result<T> {
    inp.validate()?;
    let pos: Vec<T> = inp
        .s_p
        .iter()
        .zip(&inp.alpha_p)
        .map(|(&s, &a)| inp.gamma * a * s)
        .collect();
    let neg = inp.s_n.iter().map(|&s| inp.gamma * (s + inp.margin));
    let all: Vec<T> = pos.iter().copied().chain(neg).collect();
    Ok(log_sum_exp(&all)? - log_sum_exp(&pos)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pl: f64,
    pub lambda_ctr: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pl >= 0.0 && self.lambda_ctr >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "loss weights must be >= 0 (got {}, {})",
                self.lambda_pl, self.lambda_ctr
            )));
        }
        Ok(())
    }
}

/// Weighted sum of the three terms and the gradient streams that feed the
/// encoder backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss<T: Scalar> {
    pub value: T,
    pub labeled_logits: Vec<Vec<T>>,
    pub unlabeled_logits: Vec<Vec<T>>,
    pub unlabeled_embeddings: Vec<Vec<T>>,
}

fn scaled<T: Scalar>(rows: &[Vec<T>], s: T) -> Vec<Vec<T>> {
    rows.iter().map(|r| r.iter().map(|&v| s * v).collect()).collect()
}

/// `sup + λ_pl·pl + λ_ctr·ctr`. `sup` carries labeled logit gradients,
/// `pl` unlabeled logit gradients, `ctr` unlabeled embedding gradients.
pub fn total_loss<T: Scalar>(
    sup: &BatchLoss<T>,
    pl: &BatchLoss<T>,
    ctr: &BatchLoss<T>,
    w: &LossWeights,
) -> TotalLoss<T> {
    let (lp, lc) = (T::lit(w.lambda_pl), T::lit(w.lambda_ctr));
    TotalLoss {
        value: sup.value + lp * pl.value + lc * ctr.value,
        labeled_logits: sup.grads.clone(),
        unlabeled_logits: scaled(&pl.grads, lp),
        unlabeled_embeddings: scaled(&ctr.grads, lc),
    }
}
