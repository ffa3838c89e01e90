//! Co-calibration between the classifier branch and the contrastive branch.
//!
//! Class prototypes (normalized mean features of labeled plus mixed samples)
//! produce a per-sample similarity distribution. Its running average over
//! recent batches rescales the classifier's pseudo labels; the calibrated
//! pseudo labels in turn decide which keys act as positives for every
//! unlabeled query, weighted by the query's similarity to its prototype.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::encoder::{forward, EncoderParams, KeyQueue};
use crate::error::{Error, Result};
use crate::math::{argmax, beta_sample, cosine_similarity, l2_normalize, softmax, Distribution};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Floor applied to the running similarity before it scales pseudo labels.
pub const CALIBRATION_FLOOR: f64 = 1e-12;

/// Rows per forward pass when encoding whole pools.
const ENCODE_CHUNK: usize = 256;

pub const DUMP_HEADER: &str = "SSCL-CALIB v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Prototype<T: Scalar> {
    pub class_id: usize,
    /// Unit-norm mean feature.
    pub vector: Vec<T>,
    /// Labeled plus mixed samples averaged into `vector`.
    pub support_count: usize,
}

/// Mean of per-batch similarity distributions over the last `capacity`
/// batches, renormalized to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RunningSimilarity<T: Scalar> {
    capacity: usize,
    window: VecDeque<Vec<T>>,
    current: Distribution<T>,
}

impl<T: Scalar> RunningSimilarity<T> {
    /// Empty window; `current` starts uniform over `classes`.
    pub fn new(capacity: usize, classes: usize) -> Result<Self> {
        if capacity == 0 || classes == 0 {
            return Err(Error::InvalidParameter(format!(
                "running window and class count must be >= 1 (got {capacity}, {classes})"
            )));
        }
        Ok(Self {
            capacity,
            window: VecDeque::with_capacity(capacity),
            current: Distribution::uniform(classes),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn current(&self) -> &Distribution<T> {
        &self.current
    }

    pub fn update(&mut self, batch_mean: &Distribution<T>) -> Result<()> {
        if batch_mean.len() != self.current.len() {
            return Err(Error::DimensionMismatch {
                expected: self.current.len(),
                got: batch_mean.len(),
            });
        }
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(batch_mean.probs().to_vec());
        let mut mean = vec![T::zero(); self.current.len()];
        for row in &self.window {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let total: T = mean.iter().copied().sum();
        self.current = Distribution::from_normalized(mean.into_iter().map(|v| v / total).collect());
        Ok(())
    }
}

/// Cached assignment of one unlabeled sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PseudoEntry<T: Scalar> {
    pub class: usize,
    pub confidence: T,
    /// Self-paced weight applied to the sample's mined positives.
    pub alpha: T,
}

/// A convex combination of a labeled sample and a mined unlabeled sample.
/// Only ever used to compute prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedSample {
    pub class: usize,
    pub x: Vec<f64>,
    pub labeled_parent: u64,
    pub unlabeled_parent: u64,
    pub lambda: f64,
}

/// How the self-paced weight is derived from the cosine similarity to the
/// assigned prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfPaced {
    /// `clamp(cos, 0, 1)`.
    Clamped,
    /// `(1 + cos) / 2`.
    Affine,
    /// Constant 1.
    Off,
}

impl SelfPaced {
    pub fn weight<T: Scalar>(self, cos: T) -> T {
        match self {
            SelfPaced::Clamped => cos.max(T::zero()).min(T::one()),
            SelfPaced::Affine => ((T::one() + cos) / T::lit(2.0)).max(T::zero()).min(T::one()),
            SelfPaced::Off => T::one(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// Temperature turning prototype cosines into a distribution.
    pub gamma_s: f64,
    /// Rescale pseudo labels by the running similarity.
    pub calibrate: bool,
    pub self_paced: SelfPaced,
    /// Enrich prototypes with mixed samples.
    pub mixture: bool,
    /// Beta parameter of the mixing coefficient.
    pub mix_alpha: f64,
    /// Mixed samples per class; defaults to the class's labeled count.
    pub mix_cap: Option<usize>,
    /// Mining pool size per class, as a multiple of the cap.
    pub mining_factor: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            gamma_s: 5.0,
            calibrate: true,
            self_paced: SelfPaced::Clamped,
            mixture: true,
            mix_alpha: 1.0,
            mix_cap: None,
            mining_factor: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct CalibrationState<T: Scalar> {
    pub prototypes: Vec<Prototype<T>>,
    pub mixed_pool: Vec<Vec<MixedSample>>,
    pub running: RunningSimilarity<T>,
    pub pseudo_cache: BTreeMap<u64, PseudoEntry<T>>,
    pub epoch_of_last_refresh: Option<usize>,
    pub refresh_period: usize,
}

impl<T: Scalar> CalibrationState<T> {
    pub fn new(classes: usize, window: usize, refresh_period: usize) -> Result<Self> {
        if refresh_period == 0 {
            return Err(Error::InvalidParameter("refresh period must be >= 1".into()));
        }
        Ok(Self {
            prototypes: Vec::new(),
            mixed_pool: vec![Vec::new(); classes],
            running: RunningSimilarity::new(window, classes)?,
            pseudo_cache: BTreeMap::new(),
            epoch_of_last_refresh: None,
            refresh_period,
        })
    }

    pub fn classes(&self) -> usize {
        self.mixed_pool.len()
    }

    /// Whether the schedule asks for a refresh before `epoch`.
    pub fn refresh_due(&self, epoch: usize) -> bool {
        match self.epoch_of_last_refresh {
            None => true,
            Some(last) => epoch >= last + self.refresh_period,
        }
    }
}

pub(crate) fn to_scalar<T: Scalar>(x: &[f64]) -> Vec<T> {
    x.iter().map(|&v| T::lit(v)).collect()
}

/// Backbone features of `xs` under `params`, encoded in chunks.
pub fn encode_features<T: Scalar>(params: &EncoderParams<T>, xs: &[&[f64]]) -> Result<Vec<Vec<T>>> {
    Ok(encode(params, xs)?.0)
}

/// Features and classifier logits of `xs`.
/// Backbone features and classifier logits, row by row.
pub type Encoded<T> = (Vec<Vec<T>>, Vec<Vec<T>>);

pub fn encode<T: Scalar>(params: &EncoderParams<T>, xs: &[&[f64]]) -> Result<Encoded<T>> {
    let mut feats = Vec::with_capacity(xs.len());
    let mut logits = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(ENCODE_CHUNK) {
        let batch: Vec<Vec<T>> = chunk.iter().map(|x| to_scalar(x)).collect();
        let out = forward(params, &batch)?;
        feats.extend(out.features);
        logits.extend(out.logits);
    }
    Ok((feats, logits))
}

/// Normalized per-class mean of `features[c]`.
pub fn prototypes_from_features<T: Scalar>(features: &[Vec<Vec<T>>]) -> Result<Vec<Prototype<T>>> {
    features
        .iter()
        .enumerate()
        .map(|(c, rows)| {
            let first = rows.first().ok_or(Error::InsufficientSamples {
                class: c,
                requested: 1,
                available: 0,
            })?;
            let mut mean = vec![T::zero(); first.len()];
            for r in rows {
                if r.len() != mean.len() {
                    return Err(Error::DimensionMismatch {
                        expected: mean.len(),
                        got: r.len(),
                    });
                }
                for (m, &v) in mean.iter_mut().zip(r) {
                    *m += v;
                }
            }
            let n = T::lit(rows.len() as f64);
            mean.iter_mut().for_each(|m| *m = *m / n);
            Ok(Prototype {
                class_id: c,
                vector: l2_normalize(&mean)?,
                support_count: rows.len(),
            })
        })
        .collect()
}

/// Prototype of every class from the encoder features of its labeled and
/// mixed samples.
pub fn compute_prototypes<T: Scalar>(
    params: &EncoderParams<T>,
    labeled: &[Vec<&Sample>],
    mixed_pool: &[Vec<MixedSample>],
) -> Result<Vec<Prototype<T>>> {
    let mut per_class = Vec::with_capacity(labeled.len());
    for (c, members) in labeled.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::InsufficientSamples {
                class: c,
                requested: 1,
                available: 0,
            });
        }
        let mut xs: Vec<&[f64]> = members.iter().map(|s| s.x.as_slice()).collect();
        if let Some(mixed) = mixed_pool.get(c) {
            xs.extend(mixed.iter().map(|m| m.x.as_slice()));
        }
        per_class.push(encode_features(params, &xs)?);
    }
    prototypes_from_features(&per_class)
}

/// Cosine similarities to every prototype.
pub fn prototype_similarities<T: Scalar>(feature: &[T], prototypes: &[Prototype<T>]) -> Result<Vec<T>> {
    prototypes
        .iter()
        .map(|p| cosine_similarity(feature, &p.vector))
        .collect()
}

/// `softmax(γ_s · cos(feature, prototype_k))`.
pub fn similarity_distribution<T: Scalar>(
    feature: &[T],
    prototypes: &[Prototype<T>],
    gamma_s: T,
) -> Result<Distribution<T>> {
    if prototypes.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least two prototypes, got {}",
            prototypes.len()
        )));
    }
    let sims = prototype_similarities(feature, prototypes)?;
    let scaled: Vec<T> = sims.into_iter().map(|s| gamma_s * s).collect();
    softmax(&scaled)
}

/// Elementwise mean of the similarity distributions of a batch of features.
pub fn batch_mean_similarity<T: Scalar>(
    features: &[Vec<T>],
    prototypes: &[Prototype<T>],
    gamma_s: T,
) -> Result<Distribution<T>> {
    if features.is_empty() {
        return Err(Error::EmptyVector);
    }
    let mut mean = vec![T::zero(); prototypes.len()];
    for f in features {
        let d = similarity_distribution(f, prototypes, gamma_s)?;
        for (m, &p) in mean.iter_mut().zip(d.probs()) {
            *m += p;
        }
    }
    let total: T = mean.iter().copied().sum();
    Ok(Distribution::from_normalized(
        mean.into_iter().map(|v| v / total).collect(),
    ))
}

/// Class whose prototype is most similar to `feature`.
pub fn nearest_prototype<T: Scalar>(feature: &[T], prototypes: &[Prototype<T>]) -> Result<usize> {
    let sims = prototype_similarities(feature, prototypes)?;
    Ok(prototypes[argmax(&sims).0].class_id)
}

/// `p̂_b ∝ p_b ⊙ max(p̂_s, floor)`. A uniform `p̂_s` returns `p_b` as is,
/// which the renormalized product equals only up to rounding.
pub fn calibrate<T: Scalar>(p_b: &Distribution<T>, p_hat_s: &Distribution<T>) -> Result<Distribution<T>> {
    if p_b.len() != p_hat_s.len() {
        return Err(Error::DimensionMismatch {
            expected: p_b.len(),
            got: p_hat_s.len(),
        });
    }
    let s = p_hat_s.probs();
    if s.iter().all(|&v| v == s[0]) {
        if !(p_b.probs().iter().copied().sum::<T>() > T::zero()) {
            return Err(Error::CalibrationCollapse);
        }
        return Ok(p_b.clone());
    }
    let floor = T::lit(CALIBRATION_FLOOR);
    let scaled: Vec<T> = p_b
        .probs()
        .iter()
        .zip(p_hat_s.probs())
        .map(|(&a, &b)| a * b.max(floor))
        .collect();
    let total: T = scaled.iter().copied().sum();
    if !(total > T::zero()) || !total.is_finite() {
        return Err(Error::CalibrationCollapse);
    }
    Ok(Distribution::from_normalized(
        scaled.into_iter().map(|v| v / total).collect(),
    ))
}

/// `clamp(cos(feature, prototype), 0, 1)`.
pub fn self_paced_weight<T: Scalar>(feature: &[T], proto: &Prototype<T>) -> Result<T> {
    Ok(SelfPaced::Clamped.weight(cosine_similarity(feature, &proto.vector)?))
}

/// Recomputes the pseudo-label cache of the whole unlabeled pool from clean
/// inputs. Replaces the cache only if every sample succeeds.
pub fn refresh_pseudo_labels<T: Scalar>(
    state: &mut CalibrationState<T>,
    unlabeled: &[Sample],
    params: &EncoderParams<T>,
    opts: &CalibrationOptions,
) -> Result<()> {
    if state.prototypes.len() != state.classes() {
        return Err(Error::InvalidParameter("prototypes are not current".into()));
    }
    let xs: Vec<&[f64]> = unlabeled.iter().map(|s| s.x.as_slice()).collect();
    let (feats, logits) = encode(params, &xs)?;
    let mut cache = BTreeMap::new();
    for ((s, f), l) in unlabeled.iter().zip(&feats).zip(&logits) {
        let p_b = softmax(l)?;
        let p_hat = if opts.calibrate {
            calibrate(&p_b, state.running.current())?
        } else {
            p_b
        };
        let (class, confidence) = p_hat.argmax();
        let cos = cosine_similarity(f, &state.prototypes[class].vector)?;
        cache.insert(
            s.id,
            PseudoEntry {
                class,
                confidence,
                alpha: opts.self_paced.weight(cos),
            },
        );
    }
    state.pseudo_cache = cache;
    Ok(())
}

/// Positives of one unlabeled query.
#[derive(Debug, Clone, PartialEq)]
pub struct Positives<'a, T: Scalar> {
    /// The sample's own key from its other view.
    pub instance: &'a [T],
    /// Keys sharing the query's assigned class, labeled keys first.
    pub class_keys: Vec<&'a [T]>,
    /// Queue positions of class keys drawn from the queue.
    pub queue_indices: Vec<usize>,
    /// Self-paced weight of the class keys.
    pub alpha: T,
}

/// Selects up to `n_pos` class positives for sample `u_id`: ground-truth
/// keys from `labeled_keys` first, then pseudo-labeled queue keys, newest
/// first in both. The instance key is always included.
pub fn select_positives<'a, T: Scalar>(
    u_id: u64,
    instance: &'a [T],
    cache: &BTreeMap<u64, PseudoEntry<T>>,
    queue: &'a KeyQueue<T>,
    labeled_keys: &'a KeyQueue<T>,
    n_pos: usize,
) -> Result<Positives<'a, T>> {
    let mut out = Positives {
        instance,
        class_keys: Vec::new(),
        queue_indices: Vec::new(),
        alpha: T::one(),
    };
    if n_pos == 0 {
        return Ok(out);
    }
    let entry = cache.get(&u_id).ok_or(Error::StalePseudoCache(u_id))?;
    out.alpha = entry.alpha;
    for k in labeled_keys.entries().rev() {
        if out.class_keys.len() == n_pos {
            return Ok(out);
        }
        if k.assigned_class == Some(entry.class) {
            out.class_keys.push(&k.embedding);
        }
    }
    for (i, k) in queue.entries().enumerate().rev() {
        if out.class_keys.len() == n_pos {
            break;
        }
        if k.assigned_class == Some(entry.class) && k.source_id != u_id {
            out.class_keys.push(&k.embedding);
            out.queue_indices.push(i);
        }
    }
    Ok(out)
}

/// `λ x_c + (1 - λ) x_nearest`.
pub fn mix(x_c: &[f64], x_nearest: &[f64], lambda: f64) -> Vec<f64> {
    x_c.iter()
        .zip(x_nearest)
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect()
}

/// Mining pool of class `c`: unlabeled ids assigned to `c`, most confident
/// first (ties by id), truncated to `limit`.
pub fn mining_pool<T: Scalar>(cache: &BTreeMap<u64, PseudoEntry<T>>, class: usize, limit: usize) -> Vec<u64> {
    let mut members: Vec<(u64, T)> = cache
        .iter()
        .filter(|(_, e)| e.class == class)
        .map(|(&id, e)| (id, e.confidence))
        .collect();
    members.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    members.truncate(limit);
    members.into_iter().map(|(id, _)| id).collect()
}

/// Rebuilds every class's mixed pool from labeled samples and the mined
/// pool of confident unlabeled samples of that class.
pub fn refine_prototypes_mixup<T: Scalar>(
    state: &mut CalibrationState<T>,
    labeled: &[Vec<&Sample>],
    unlabeled: &[Sample],
    opts: &CalibrationOptions,
    rng: &mut Rng,
) -> Result<()> {
    if labeled.len() != state.classes() {
        return Err(Error::DimensionMismatch {
            expected: state.classes(),
            got: labeled.len(),
        });
    }
    let by_id: HashMap<u64, &Sample> = unlabeled.iter().map(|s| (s.id, s)).collect();
    let mut pools = Vec::with_capacity(labeled.len());
    for (c, members) in labeled.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::InsufficientSamples {
                class: c,
                requested: 1,
                available: 0,
            });
        }
        let cap = opts.mix_cap.unwrap_or(members.len());
        let omega: Vec<&Sample> = mining_pool(&state.pseudo_cache, c, opts.mining_factor * cap)
            .into_iter()
            .filter_map(|id| by_id.get(&id).copied())
            .collect();
        let mut pool = Vec::new();
        if opts.mixture && !omega.is_empty() {
            pool.reserve(cap);
            for _ in 0..cap {
                let xc = members[rng.random_range(0..members.len())];
                let xn = omega[rng.random_range(0..omega.len())];
                let lambda = beta_sample(opts.mix_alpha, rng)?;
                pool.push(MixedSample {
                    class: c,
                    x: mix(&xc.x, &xn.x, lambda),
                    labeled_parent: xc.id,
                    unlabeled_parent: xn.id,
                    lambda,
                });
            }
        }
        pools.push(pool);
    }
    state.mixed_pool = pools;
    Ok(())
}

/// Debug dump: one `proto` line per class and one `pseudo` line per cached
/// sample.
pub fn write_dump<T: Scalar, W: Write>(state: &CalibrationState<T>, mut w: W) -> Result<()> {
    writeln!(w, "{DUMP_HEADER}")?;
    for p in &state.prototypes {
        write!(w, "proto,{},{}", p.class_id, p.support_count)?;
        for v in &p.vector {
            write!(w, ",{v}")?;
        }
        w.write_all(b"\n")?;
    }
    for (id, e) in &state.pseudo_cache {
        writeln!(w, "pseudo,{id},{},{},{}", e.class, e.confidence, e.alpha)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderShape, KeyEntry};
    use crate::math::norm;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;

    fn proto(class_id: usize, v: &[f64]) -> Prototype<f64> {
        Prototype {
            class_id,
            vector: l2_normalize(v).unwrap(),
            support_count: 1,
        }
    }

    fn dist(p: &[f64]) -> Distribution<f64> {
        Distribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn prototype_of_single_sample_is_its_direction() {
        let protos = prototypes_from_features(&[vec![vec![3.0, 4.0]], vec![vec![0.0, -2.0]]]).unwrap();
        assert_eq!(protos[0].vector, vec![0.6, 0.8]);
        assert_eq!(protos[1].vector, vec![0.0, -1.0]);
    }

    #[test]
    fn prototype_of_orthogonal_pair() {
        let protos = prototypes_from_features(&[vec![vec![1.0, 0.0], vec![0.0, 1.0]]]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((protos[0].vector[0] - h).abs() < 1e-15 && (protos[0].vector[1] - h).abs() < 1e-15);
        assert_eq!(protos[0].support_count, 2);
    }

    #[test]
    fn prototype_ignores_duplication() {
        let rows = vec![vec![1.0, 2.0, 0.5], vec![-0.3, 1.0, 2.0]];
        let doubled: Vec<Vec<f64>> = rows.iter().chain(&rows).cloned().collect();
        let a = prototypes_from_features(&[rows]).unwrap();
        let b = prototypes_from_features(&[doubled]).unwrap();
        for (x, y) in a[0].vector.iter().zip(&b[0].vector) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn prototype_empty_class_errors() {
        assert!(matches!(
            prototypes_from_features::<f64>(&[vec![vec![1.0]], vec![]]),
            Err(Error::InsufficientSamples { class: 1, .. })
        ));
    }

    #[test]
    fn compute_prototypes_uses_encoder_and_mixed_pool() {
        let p: EncoderParams<f64> = init_params(&[2, 6, 4], 2, 3, 1).unwrap();
        let s = |id, x: Vec<f64>| Sample { id, x, y: Some(0) };
        let a = s(0, vec![1.0, 0.5]);
        let b = s(1, vec![-1.0, 0.5]);
        let labeled = vec![vec![&a], vec![&b]];
        let protos = compute_prototypes(&p, &labeled, &[vec![], vec![]]).unwrap();
        let fa = encode_features(&p, &[a.x.as_slice()]).unwrap();
        assert_eq!(protos[0].vector, l2_normalize(&fa[0]).unwrap());
        let mixed = MixedSample {
            class: 0,
            x: vec![0.0, 2.0],
            labeled_parent: 0,
            unlabeled_parent: 9,
            lambda: 0.5,
        };
        let with_mix = compute_prototypes(&p, &labeled, &[vec![mixed], vec![]]).unwrap();
        assert_eq!(with_mix[0].support_count, 2);
        assert_eq!(with_mix[1], protos[1]);
    }

    #[test]
    fn similarity_distribution_examples() {
        let protos = vec![proto(0, &[1.0, 0.0]), proto(1, &[0.0, 1.0])];
        let d = similarity_distribution(&[2.0, 0.0], &protos, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((d.probs()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((d.probs()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);

        let sharp = similarity_distribution(&[1.0, 0.0], &protos, 200.0).unwrap();
        assert!(sharp.probs()[0] > 1.0 - 1e-12);

        let same = vec![proto(0, &[1.0, 1.0]), proto(1, &[1.0, 1.0]), proto(2, &[1.0, 1.0])];
        let u = similarity_distribution(&[0.3, -2.0], &same, 5.0).unwrap();
        assert!(u.probs().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));

        assert!(similarity_distribution(&[0.0, 0.0], &protos, 1.0).is_err());
    }

    #[test]
    fn running_average_examples() {
        let mut rs = RunningSimilarity::<f64>::new(128, 2).unwrap();
        assert_eq!(rs.current().probs(), &[0.5, 0.5]);
        rs.update(&dist(&[0.8, 0.2])).unwrap();
        assert_eq!(rs.current().probs(), &[0.8, 0.2]);
        rs.update(&dist(&[0.2, 0.8])).unwrap();
        assert!((rs.current().probs()[0] - 0.5).abs() < 1e-15);

        let mut fixed = RunningSimilarity::<f64>::new(4, 2).unwrap();
        for _ in 0..10 {
            fixed.update(&dist(&[0.3, 0.7])).unwrap();
            assert!((fixed.current().probs()[0] - 0.3).abs() < 1e-15);
        }
        assert_eq!(fixed.len(), 4);
    }

    #[test]
    fn running_window_evicts_oldest() {
        let mut rs = RunningSimilarity::<f64>::new(2, 2).unwrap();
        rs.update(&dist(&[1.0, 0.0])).unwrap();
        rs.update(&dist(&[0.0, 1.0])).unwrap();
        rs.update(&dist(&[0.0, 1.0])).unwrap();
        assert_eq!(rs.current().probs(), &[0.0, 1.0]);
    }

    #[test]
    fn calibrate_examples() {
        let p = dist(&[0.6, 0.4]);
        assert_eq!(calibrate(&p, &Distribution::uniform(2)).unwrap().probs(), p.probs());
        let out = calibrate(&Distribution::uniform(2), &dist(&[0.8, 0.2])).unwrap();
        assert!((out.probs()[0] - 0.8).abs() < 1e-15 && (out.probs()[1] - 0.2).abs() < 1e-15);
        assert!(calibrate(&p, &Distribution::uniform(3)).is_err());
    }

    #[test]
    fn calibrate_floor_prevents_lockout() {
        let out = calibrate(&dist(&[0.0, 1.0]), &dist(&[1.0, 0.0])).unwrap();
        assert_eq!(out.probs(), &[0.0, 1.0]);
    }

    #[test]
    fn calibrate_collapse() {
        let p = Distribution::from_normalized(vec![0.0, 0.0]);
        assert!(matches!(
            calibrate(&p, &dist(&[0.5, 0.5])),
            Err(Error::CalibrationCollapse)
        ));
    }

    #[test]
    fn self_paced_examples() {
        let pr = proto(0, &[1.0, 0.0]);
        assert_eq!(self_paced_weight(&[2.0, 0.0], &pr).unwrap(), 1.0);
        assert_eq!(self_paced_weight(&[0.0, 3.0], &pr).unwrap(), 0.0);
        assert_eq!(self_paced_weight(&[-1.0, 0.1], &pr).unwrap(), 0.0);
        let half = self_paced_weight(&[0.5, 0.75f64.sqrt()], &pr).unwrap();
        assert!((half - 0.5).abs() < 1e-15);
        assert!(self_paced_weight(&[0.0, 0.0], &pr).is_err());
        assert_eq!(SelfPaced::Affine.weight(0.0f64), 0.5);
        assert_eq!(SelfPaced::Off.weight(-0.7f64), 1.0);
    }

    fn key(v: &[f64], class: Option<usize>, id: u64) -> KeyEntry<f64> {
        KeyEntry {
            embedding: l2_normalize(v).unwrap(),
            assigned_class: class,
            source_id: id,
        }
    }

    fn cache_with(id: u64, class: usize, alpha: f64) -> BTreeMap<u64, PseudoEntry<f64>> {
        BTreeMap::from([(
            id,
            PseudoEntry {
                class,
                confidence: 0.9,
                alpha,
            },
        )])
    }

    #[test]
    fn select_positives_fallback_to_instance() {
        let queue = KeyQueue::<f64>::new(8, 2).unwrap();
        let labeled = KeyQueue::<f64>::new(8, 2).unwrap();
        let inst = [1.0, 0.0];
        let pos = select_positives(7, &inst, &cache_with(7, 1, 0.4), &queue, &labeled, 1).unwrap();
        assert!(pos.class_keys.is_empty());
        assert_eq!(pos.instance, &inst);
    }

    #[test]
    fn select_positives_prefers_recent_labeled_keys() {
        let queue = {
            let mut q = KeyQueue::<f64>::new(8, 2).unwrap();
            q.push(vec![key(&[1.0, 1.0], Some(2), 50)]).unwrap();
            q
        };
        let mut labeled = KeyQueue::<f64>::new(16, 2).unwrap();
        for i in 0..5 {
            labeled.push(vec![key(&[1.0, i as f64], Some(2), 100 + i)]).unwrap();
            labeled.push(vec![key(&[-1.0, i as f64], Some(0), 200 + i)]).unwrap();
        }
        let inst = [0.0, 1.0];
        let cache = cache_with(7, 2, 0.6);
        let pos = select_positives(7, &inst, &cache, &queue, &labeled, 3).unwrap();
        let expected: Vec<Vec<f64>> = [4.0, 3.0, 2.0]
            .iter()
            .map(|&i| l2_normalize(&[1.0, i]).unwrap())
            .collect();
        let got: Vec<Vec<f64>> = pos.class_keys.iter().map(|k| k.to_vec()).collect();
        assert_eq!(got, expected);
        assert!(pos.queue_indices.is_empty());
        assert_eq!(pos.alpha, 0.6);

        // labeled keys run out, queue fills the rest but never the sample itself
        let mut q = queue.clone();
        q.push(vec![key(&[2.0, 1.0], Some(2), 7)]).unwrap();
        let pos = select_positives(7, &inst, &cache, &q, &labeled, 7).unwrap();
        assert_eq!(pos.class_keys.len(), 6);
        assert_eq!(pos.queue_indices, vec![0]);
    }

    #[test]
    fn select_positives_stale_cache_and_zero_positives() {
        let q = KeyQueue::<f64>::new(4, 2).unwrap();
        let inst = [1.0, 0.0];
        let err = select_positives(3, &inst, &BTreeMap::new(), &q, &q, 2).unwrap_err();
        assert!(err.to_string().starts_with("stale pseudo cache"));
        let none = select_positives(3, &inst, &BTreeMap::new(), &q, &q, 0).unwrap();
        assert!(none.class_keys.is_empty());
        assert_eq!(none.alpha, 1.0);
    }

    #[test]
    fn mix_endpoints_and_convexity() {
        let a = [1.0, -2.0, 3.5];
        let b = [0.25, 4.0, -1.0];
        assert_eq!(mix(&a, &b, 1.0), a.to_vec());
        assert_eq!(mix(&a, &b, 0.0), b.to_vec());
        let m = mix(&a, &b, 0.3);
        for ((x, lo), hi) in m.iter().zip(&a).zip(&b) {
            assert!(*x >= lo.min(*hi) - 1e-15 && *x <= lo.max(*hi) + 1e-15);
        }
    }

    fn toy_pools() -> (Vec<Sample>, Vec<Sample>) {
        let labeled = (0..4)
            .map(|i| Sample {
                id: i,
                x: vec![i as f64, (i % 2) as f64],
                y: Some((i % 2) as usize),
            })
            .collect();
        let unlabeled = (10..30)
            .map(|i| Sample {
                id: i,
                x: vec![0.1 * i as f64, -(i as f64)],
                y: None,
            })
            .collect();
        (labeled, unlabeled)
    }

    #[test]
    fn mixup_pools_are_rebuilt_and_convex() {
        let (labeled, unlabeled) = toy_pools();
        let by_class: Vec<Vec<&Sample>> = (0..2)
            .map(|c| labeled.iter().filter(|s| s.y == Some(c)).collect())
            .collect();
        let mut state = CalibrationState::<f64>::new(2, 8, 5).unwrap();
        for s in &unlabeled {
            state.pseudo_cache.insert(
                s.id,
                PseudoEntry {
                    class: (s.id % 2) as usize,
                    confidence: 0.5,
                    alpha: 1.0,
                },
            );
        }
        let opts = CalibrationOptions::default();
        let mut rng = stream_rng(0, Stream::Mixup, 0);
        refine_prototypes_mixup(&mut state, &by_class, &unlabeled, &opts, &mut rng).unwrap();
        let lab: HashMap<u64, &Sample> = labeled.iter().map(|s| (s.id, s)).collect();
        let unl: HashMap<u64, &Sample> = unlabeled.iter().map(|s| (s.id, s)).collect();
        for (c, pool) in state.mixed_pool.iter().enumerate() {
            assert_eq!(pool.len(), 2);
            for m in pool {
                assert_eq!(m.class, c);
                assert_eq!(lab[&m.labeled_parent].y, Some(c));
                assert_eq!(state.pseudo_cache[&m.unlabeled_parent].class, c);
                let expect = mix(&lab[&m.labeled_parent].x, &unl[&m.unlabeled_parent].x, m.lambda);
                assert_eq!(m.x, expect);
            }
        }
        refine_prototypes_mixup(&mut state, &by_class, &unlabeled, &opts, &mut rng).unwrap();
        assert!(state.mixed_pool.iter().all(|p| p.len() == 2));
    }

    #[test]
    fn mixup_with_empty_mining_pool_leaves_class_empty() {
        let (labeled, unlabeled) = toy_pools();
        let by_class: Vec<Vec<&Sample>> = (0..2)
            .map(|c| labeled.iter().filter(|s| s.y == Some(c)).collect())
            .collect();
        let mut state = CalibrationState::<f64>::new(2, 8, 5).unwrap();
        for s in &unlabeled {
            state.pseudo_cache.insert(
                s.id,
                PseudoEntry {
                    class: 0,
                    confidence: 0.5,
                    alpha: 1.0,
                },
            );
        }
        let mut rng = stream_rng(0, Stream::Mixup, 0);
        refine_prototypes_mixup(
            &mut state,
            &by_class,
            &unlabeled,
            &CalibrationOptions::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(state.mixed_pool[0].len(), 2);
        assert!(state.mixed_pool[1].is_empty());

        let off = CalibrationOptions {
            mixture: false,
            ..Default::default()
        };
        refine_prototypes_mixup(&mut state, &by_class, &unlabeled, &off, &mut rng).unwrap();
        assert!(state.mixed_pool.iter().all(Vec::is_empty));
    }

    #[test]
    fn mining_pool_ranks_by_confidence() {
        let mut cache = BTreeMap::new();
        for (id, conf) in [(1u64, 0.3), (2, 0.9), (3, 0.9), (4, 0.5)] {
            cache.insert(
                id,
                PseudoEntry {
                    class: 0,
                    confidence: conf,
                    alpha: 1.0,
                },
            );
        }
        cache.insert(
            5,
            PseudoEntry {
                class: 1,
                confidence: 1.0,
                alpha: 1.0,
            },
        );
        assert_eq!(mining_pool(&cache, 0, 3), vec![2, 3, 4]);
        assert_eq!(mining_pool(&cache, 1, 3), vec![5]);
    }

    fn refresh_fixture() -> (EncoderParams<f64>, Vec<Sample>, Vec<Sample>, CalibrationState<f64>) {
        let p: EncoderParams<f64> =
            crate::encoder::init_with_shape(&EncoderShape::new(vec![2, 8, 6], 2, 3), 4).unwrap();
        let (labeled, unlabeled) = toy_pools();
        let by_class: Vec<Vec<&Sample>> = (0..2)
            .map(|c| labeled.iter().filter(|s| s.y == Some(c)).collect())
            .collect();
        let mut state = CalibrationState::<f64>::new(2, 8, 5).unwrap();
        state.prototypes = compute_prototypes(&p, &by_class, &state.mixed_pool).unwrap();
        (p, labeled, unlabeled, state)
    }

    #[test]
    fn refresh_covers_pool_and_is_deterministic() {
        let (p, _, unlabeled, mut state) = refresh_fixture();
        let opts = CalibrationOptions::default();
        refresh_pseudo_labels(&mut state, &unlabeled, &p, &opts).unwrap();
        let keys: Vec<u64> = state.pseudo_cache.keys().copied().collect();
        let ids: Vec<u64> = unlabeled.iter().map(|s| s.id).collect();
        assert_eq!(keys, ids);
        let first = state.pseudo_cache.clone();
        refresh_pseudo_labels(&mut state, &unlabeled, &p, &opts).unwrap();
        assert_eq!(first, state.pseudo_cache);
        for e in first.values() {
            assert!((0.0..=1.0).contains(&e.alpha));
        }
    }

    #[test]
    fn refresh_with_uniform_running_matches_plain_argmax() {
        let (p, _, unlabeled, mut state) = refresh_fixture();
        refresh_pseudo_labels(&mut state, &unlabeled, &p, &CalibrationOptions::default()).unwrap();
        let xs: Vec<&[f64]> = unlabeled.iter().map(|s| s.x.as_slice()).collect();
        let (_, logits) = encode(&p, &xs).unwrap();
        for (s, l) in unlabeled.iter().zip(&logits) {
            assert_eq!(state.pseudo_cache[&s.id].class, argmax(l).0);
        }
    }

    #[test]
    fn refresh_requires_prototypes() {
        let (p, _, unlabeled, mut state) = refresh_fixture();
        state.prototypes.clear();
        assert!(refresh_pseudo_labels(&mut state, &unlabeled, &p, &CalibrationOptions::default()).is_err());
    }

    #[test]
    fn dump_format() {
        let (p, _, unlabeled, mut state) = refresh_fixture();
        refresh_pseudo_labels(&mut state, &unlabeled, &p, &CalibrationOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_dump(&state, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], DUMP_HEADER);
        assert_eq!(lines.len(), 1 + 2 + unlabeled.len());
        assert!(lines[1].starts_with("proto,0,2,"));
        assert!(lines[3].starts_with("pseudo,10,"));
    }

    fn distribution_of_len(n: usize) -> impl Strategy<Value = Distribution<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| Distribution::from_normalized(v.iter().map(|x| x / s).collect()))
        })
    }

    fn distribution() -> impl Strategy<Value = Distribution<f64>> {
        (2usize..10).prop_flat_map(distribution_of_len)
    }

    fn distribution_pair() -> impl Strategy<Value = (Distribution<f64>, Distribution<f64>)> {
        (2usize..10).prop_flat_map(|n| (distribution_of_len(n), distribution_of_len(n)))
    }

    proptest! {
        #[test]
        fn calibrate_output_is_distribution((p, q) in distribution_pair()) {
            let out = calibrate(&p, &q).unwrap();
            prop_assert!((out.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(out.probs().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn uniform_calibration_is_identity(p in distribution()) {
            let out = calibrate(&p, &Distribution::uniform(p.len())).unwrap();
            prop_assert_eq!(out.probs(), p.probs());
        }

        #[test]
        fn self_paced_monotone(theta1 in 0.0f64..std::f64::consts::PI, theta2 in 0.0f64..std::f64::consts::PI) {
            let pr = proto(0, &[1.0, 0.0]);
            let (small, large) = if theta1 <= theta2 { (theta1, theta2) } else { (theta2, theta1) };
            let near = self_paced_weight(&[small.cos(), small.sin()], &pr).unwrap();
            let far = self_paced_weight(&[large.cos(), large.sin()], &pr).unwrap();
            prop_assert!((0.0..=1.0).contains(&near) && (0.0..=1.0).contains(&far));
            prop_assert!(near >= far);
        }

        #[test]
        fn prototype_scale_invariance(rows in prop::collection::vec(prop::collection::vec(0.1f64..5.0, 3), 1..6), c in 0.1f64..10.0) {
            let a = prototypes_from_features(std::slice::from_ref(&rows)).unwrap();
            let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
            let b = prototypes_from_features(&[scaled]).unwrap();
            prop_assert!((norm(&a[0].vector) - 1.0).abs() < 1e-12);
            for (x, y) in a[0].vector.iter().zip(&b[0].vector) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
