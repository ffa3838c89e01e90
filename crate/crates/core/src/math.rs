//! Scalar and vector primitives: log-sum-exp in both directions, softplus,
//! softmax, cosine similarity, normalization and Beta sampling.

use rand::Rng;
use rand_distr::{Distribution as _, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Norm below which a vector has no usable direction.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Distribution<T: Scalar> {
    probs: Vec<T>,
}

impl<T: Scalar> Distribution<T> {
    /// Wraps `probs` after checking nonnegativity and unit sum (within 1e-6
    /// for `f32`-friendly tolerance; producers in this crate hit 1e-12).
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyVector);
        }
        let mut sum = 0.0;
        for &p in &probs {
            let p = p.as_f64();
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidParameter(format!("probability entry {p} outside [0, 1]")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        let p = T::one() / T::lit(n as f64);
        Self { probs: vec![p; n] }
    }

    /// One-hot distribution at `class`.
    pub fn one_hot(n: usize, class: usize) -> Self {
        let mut probs = vec![T::zero(); n];
        probs[class] = T::one();
        Self { probs }
    }

    /// Internal constructor for vectors normalized by the caller.
    pub(crate) fn from_normalized(probs: Vec<T>) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index and value of the largest probability; ties resolve to the
    /// lowest index.
    pub fn argmax(&self) -> (usize, T) {
        argmax(&self.probs)
    }

    pub fn into_inner(self) -> Vec<T> {
        self.probs
    }
}

fn check_finite<T: Scalar>(x: &[T]) -> Result<()> {
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{v}")));
    }
    Ok(())
}

fn check_scale<T: Scalar>(gamma: T) -> Result<()> {
    if !(gamma > T::zero()) || !gamma.is_finite() {
        return Err(Error::NonpositiveScale(gamma.as_f64()));
    }
    Ok(())
}

pub fn argmax<T: Scalar>(x: &[T]) -> (usize, T) {
    let mut best = (0, x[0]);
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

pub fn max<T: Scalar>(x: &[T]) -> T {
    x.iter().copied().fold(T::neg_infinity(), T::max)
}

pub fn min<T: Scalar>(x: &[T]) -> T {
    x.iter().copied().fold(T::infinity(), T::min)
}

/// `log Σ exp(x_i)` with the maximum factored out.
pub fn log_sum_exp<T: Scalar>(x: &[T]) -> Result<T> {
    if x.is_empty() {
        return Err(Error::EmptyVector);
    }
    let hi = max(x);
    if hi == T::infinity() {
        return Ok(hi);
    }
    let sum: T = x.iter().map(|&v| (v - hi).exp()).sum();
    Ok(hi + sum.ln())
}

/// Smooth maximum `(1/γ) log Σ exp(γ x_i)`.
///
/// Bounded by `max(x) ≤ lse ≤ max(x) + ln(n)/γ`.
pub fn lse<T: Scalar>(x: &[T], gamma: T) -> Result<T> {
    check_scale(gamma)?;
    if x.is_empty() {
        return Err(Error::EmptyVector);
    }
    let scaled: Vec<T> = x.iter().map(|&v| gamma * v).collect();
    Ok(log_sum_exp(&scaled)? / gamma)
}

/// Smooth minimum `-(1/γ) log Σ exp(-γ x_i)`.
///
/// Bounded by `min(x) - ln(n)/γ ≤ neg_lse ≤ min(x)`.
pub fn neg_lse<T: Scalar>(x: &[T], gamma: T) -> Result<T> {
    check_scale(gamma)?;
    if x.is_empty() {
        return Err(Error::EmptyVector);
    }
    let scaled: Vec<T> = x.iter().map(|&v| -gamma * v).collect();
    Ok(-log_sum_exp(&scaled)? / gamma)
}

/// `log(1 + exp(x))` evaluated as `max(x, 0) + log1p(exp(-|x|))`.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, the derivative of [`softplus`].
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax<T: Scalar>(x: &[T]) -> Result<Distribution<T>> {
    if x.is_empty() {
        return Err(Error::EmptyVector);
    }
    check_finite(x)?;
    Ok(Distribution::from_normalized(softmax_unchecked(x)))
}

pub(crate) fn softmax_unchecked<T: Scalar>(x: &[T]) -> Vec<T> {
    let hi = max(x);
    let mut out: Vec<T> = x.iter().map(|&v| (v - hi).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for v in &mut out {
        *v = *v / sum;
    }
    out
}

pub fn dot<T: Scalar>(u: &[T], v: &[T]) -> T {
    debug_assert_eq!(u.len(), v.len());
    let mut acc = T::zero();
    for (&a, &b) in u.iter().zip(v) {
        acc += a * b;
    }
    acc
}

pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    if u.is_empty() {
        return Err(Error::EmptyVector);
    }
    let (nu, nv) = (norm(u), norm(v));
    let eps = T::lit(DEGENERATE_NORM);
    if !(nu > eps) {
        return Err(Error::DegenerateVector(nu.as_f64()));
    }
    if !(nv > eps) {
        return Err(Error::DegenerateVector(nv.as_f64()));
    }
    let c = dot(u, v) / (nu * nv);
    Ok(c.max(-T::one()).min(T::one()))
}

pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::EmptyVector);
    }
    let n = norm(v);
    if !(n > T::lit(DEGENERATE_NORM)) {
        return Err(Error::DegenerateVector(n.as_f64()));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

/// Draws `λ ~ Beta(α, α)`.
///
/// `α = 1` is a plain uniform draw. Below one, Jöhnk's rejection method is
/// used; above one, the ratio `G1 / (G1 + G2)` of two Gamma(α) draws.
pub fn beta_sample<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "beta parameter must be positive, got {alpha}"
        )));
    }
    if alpha == 1.0 {
        return Ok(rng.random::<f64>());
    }
    if alpha < 1.0 {
        let inv = 1.0 / alpha;
        loop {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            let x = u.powf(inv);
            let y = v.powf(inv);
            let s = x + y;
            if s <= 1.0 && s > 0.0 {
                return Ok(x / s);
            }
        }
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidParameter(format!("gamma({alpha}): {e}")))?;
    let a = gamma.sample(rng);
    let b = gamma.sample(rng);
    Ok(a / (a + b))
}
