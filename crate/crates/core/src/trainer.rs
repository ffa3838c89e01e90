//! End-to-end optimization: SGD with momentum under a cosine schedule, the
//! per-batch composition of the three losses, periodic co-calibration
//! refreshes, evaluation metrics and checkpoints.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cocalibration::{
    batch_mean_similarity, calibrate, compute_prototypes, encode, refine_prototypes_mixup, refresh_pseudo_labels,
    select_positives, to_scalar, CalibrationOptions, CalibrationState, SelfPaced,
};
use crate::data::{
    make_gaussian_mixture, make_two_moons, split_labeled, AugmentConfig, Batch, BatchConfig, Dataset, EpochBatches,
};
use crate::encoder::{
    backward, forward, init_with_shape, momentum_update, EncoderParams, EncoderShape, KeyEntry, KeyQueue,
};
use crate::error::{Error, Result, ResultExt};
use crate::losses::{
    contrastive_loss, pseudo_label_loss, sup_loss, total_loss, BatchLoss, ContrastiveInputs, LossWeights,
};
use crate::math::{argmax, cosine_similarity, dot, softmax};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

pub const METRICS_HEADER: &str =
    "epoch,loss_sup,loss_pl,loss_ctr,kept_frac,top1,pl_acc,proto_acc,overlap,intra_sim,pos_sel_acc";

/// Classical momentum with weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct OptimizerState<T: Scalar> {
    pub velocity: EncoderParams<T>,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &EncoderParams<T>, lr0: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr0 >= 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "optimizer needs lr0 >= 0, momentum in [0, 1), weight decay >= 0 \
                 (got {lr0}, {momentum}, {weight_decay})"
            )));
        }
        Ok(Self {
            velocity: params.zeros_like(),
            lr0,
            momentum,
            weight_decay,
        })
    }
}

/// `v ← βv + g + wd·θ`, then `θ ← θ - lr·v`.
pub fn sgd_step<T: Scalar>(
    params: &mut EncoderParams<T>,
    grads: &EncoderParams<T>,
    opt: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&opt.velocity) {
        return Err(Error::DimensionMismatch {
            expected: params.num_params(),
            got: grads.num_params(),
        });
    }
    let (beta, wd, lr) = (T::lit(opt.momentum), T::lit(opt.weight_decay), T::lit(lr));
    for ((p, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(opt.velocity.tensors_mut())
    {
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = beta * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// `lr0 · (1 + cos(π·epoch/total)) / 2`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64) -> Result<f64> {
    if epoch >= total {
        return Err(Error::InvalidParameter(format!(
            "epoch {epoch} outside schedule of {total}"
        )));
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    GaussianMixture,
    TwoMoons,
}

/// Synthetic dataset recipe; the run seed drives generation and the split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub class_sep: f64,
    /// Two-moons noise level.
    pub noise: f64,
    pub labels_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::GaussianMixture,
            classes: 8,
            dim: 8,
            samples_per_class: 631,
            class_sep: 3.0,
            noise: 0.1,
            labels_per_class: 5,
        }
    }
}

impl DataConfig {
    pub fn build(&self, seed: u64) -> Result<Dataset> {
        let full = match self.kind {
            DataKind::GaussianMixture => {
                make_gaussian_mixture(self.classes, self.dim, self.samples_per_class, self.class_sep, seed)?
            }
            DataKind::TwoMoons => make_two_moons(self.samples_per_class * 2, self.noise, seed)?,
        };
        split_labeled(&full, self.labels_per_class, seed)
    }

    /// Input dimension and class count of the datasets this recipe builds.
    pub fn geometry(&self) -> (usize, usize) {
        match self.kind {
            DataKind::GaussianMixture => (self.dim, self.classes),
            DataKind::TwoMoons => (2, 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden backbone widths between the input and the feature layer.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            feature_dim: 64,
            embed_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn shape(&self, input_dim: usize, classes: usize) -> EncoderShape {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.feature_dim);
        EncoderShape::new(dims, classes, self.embed_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSet {
    pub labeled: AugmentConfig,
    pub weak: AugmentConfig,
    pub strong: AugmentConfig,
}

impl Default for AugmentSet {
    fn default() -> Self {
        Self {
            labeled: AugmentConfig::weak(),
            weak: AugmentConfig::weak(),
            strong: AugmentConfig::strong(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mu: usize,
    /// Confidence threshold of the pseudo-label mask.
    pub tau: f64,
    /// Contrastive scale.
    pub gamma: f64,
    pub margin: f64,
    pub lambda_pl: f64,
    pub lambda_ctr: f64,
    /// Class positives per unlabeled query.
    pub n_pos: usize,
    pub queue_size: usize,
    /// Key encoder momentum.
    pub key_momentum: f64,
    pub lr0: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub refresh_period: usize,
    pub t_window: usize,
    /// Temperature of the prototype similarity distribution.
    pub gamma_s: f64,
    pub calibration: bool,
    pub self_paced: SelfPaced,
    pub mixture: bool,
    pub mix_alpha: f64,
    /// Mixed samples per class; 0 uses the class's labeled count.
    pub mix_cap: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub augment: AugmentSet,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 60,
            batch_size: 16,
            mu: 4,
            tau: 0.95,
            gamma: 5.0,
            margin: -0.25,
            lambda_pl: 1.0,
            lambda_ctr: 1.0,
            n_pos: 3,
            queue_size: 512,
            key_momentum: 0.99,
            lr0: 0.03,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            refresh_period: 5,
            t_window: 128,
            gamma_s: 5.0,
            calibration: true,
            self_paced: SelfPaced::Clamped,
            mixture: true,
            mix_alpha: 1.0,
            mix_cap: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentSet::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if self.batch_size == 0 || self.mu == 0 {
            return bad("batch_size and mu must be >= 1");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) || !(self.gamma_s > 0.0 && self.gamma_s.is_finite()) {
            return bad("gamma and gamma_s must be positive and finite");
        }
        if !self.margin.is_finite() {
            return bad("margin must be finite");
        }
        LossWeights {
            lambda_pl: self.lambda_pl,
            lambda_ctr: self.lambda_ctr,
        }
        .validate()?;
        if self.queue_size == 0 || self.refresh_period == 0 || self.t_window == 0 {
            return bad("queue_size, refresh_period and t_window must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.key_momentum) {
            return bad("key_momentum must lie in [0, 1]");
        }
        if !(self.mix_alpha > 0.0 && self.mix_alpha.is_finite()) {
            return bad("mix_alpha must be positive");
        }
        self.batch_config().validate()?;
        let (d, c) = self.data.geometry();
        self.model.shape(d, c).validate()?;
        OptimizerState::<f64>::new(
            &EncoderParams::zeros(&self.model.shape(d, c)),
            self.lr0,
            self.sgd_momentum,
            self.weight_decay,
        )
        .map(|_| ())
    }

    pub fn batch_config(&self) -> BatchConfig {
        BatchConfig {
            batch_size: self.batch_size,
            mu: self.mu,
            weak: self.augment.weak.clone(),
            strong: self.augment.strong.clone(),
            labeled: self.augment.labeled.clone(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_pl: self.lambda_pl,
            lambda_ctr: self.lambda_ctr,
        }
    }

    pub fn calibration_options(&self) -> CalibrationOptions {
        CalibrationOptions {
            gamma_s: self.gamma_s,
            calibrate: self.calibration,
            self_paced: self.self_paced,
            mixture: self.mixture,
            mix_alpha: self.mix_alpha,
            mix_cap: (self.mix_cap > 0).then_some(self.mix_cap),
            mining_factor: 5,
        }
    }
}

/// Metrics of one completed epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_sup: f64,
    pub loss_pl: f64,
    pub loss_ctr: f64,
    /// Share of unlabeled samples that passed the confidence mask.
    pub kept_frac: f64,
    pub top1: f64,
    pub pl_acc: f64,
    pub proto_acc: f64,
    pub overlap: f64,
    pub intra_sim: f64,
    pub pos_sel_acc: f64,
}

pub fn write_metrics_csv<W: Write>(rows: &[EpochMetrics], mut w: W) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.epoch,
            r.loss_sup,
            r.loss_pl,
            r.loss_ctr,
            r.kept_frac,
            r.top1,
            r.pl_acc,
            r.proto_acc,
            r.overlap,
            r.intra_sim,
            r.pos_sel_acc
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss_sup: f64,
    pub loss_pl: f64,
    pub loss_ctr: f64,
    pub kept: usize,
    pub unlabeled: usize,
    /// Queries that had at least one negative.
    pub scored: usize,
}

/// Evaluation-only metrics, see [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalMetrics {
    pub top1: f64,
    pub pl_acc: f64,
    pub proto_acc: f64,
    pub overlap: f64,
    pub intra_sim: f64,
    pub pos_sel_acc: f64,
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// `|A ∩ B| / |A ∪ B|` of two correctness masks; 0 when both are empty.
pub fn overlap(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    fraction(inter, union)
}

/// Mean over classes of the mean pairwise cosine similarity among the
/// class's embeddings. Classes with fewer than two members are skipped.
pub fn intra_class_similarity<T: Scalar>(embeddings: &[Vec<T>], labels: &[usize], classes: usize) -> Result<f64> {
    let mut per_class: Vec<Vec<&[T]>> = vec![Vec::new(); classes];
    for (e, &y) in embeddings.iter().zip(labels) {
        per_class[y].push(e);
    }
    let mut total = 0.0;
    let mut counted = 0;
    for members in per_class.iter().filter(|m| m.len() >= 2) {
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                sum += cosine_similarity(members[i], members[j])?.as_f64();
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

/// Evaluation of the query encoder; does not mutate any state.
///
/// `top1` is measured on the test pool. Over the unlabeled pool, `pl_acc`
/// scores the calibrated classifier prediction the pseudo-label loss would
/// use now, `proto_acc` the nearest prototype (rebuilt from the current
/// encoder), `overlap` the agreement of their correct sets and
/// `pos_sel_acc` the cached class that drives positive selection.
/// `intra_sim` uses test-pool projection embeddings.
pub fn evaluate<T: Scalar>(
    params: &EncoderParams<T>,
    ds: &Dataset,
    calib: &CalibrationState<T>,
    opts: &CalibrationOptions,
) -> Result<EvalMetrics> {
    if ds.test().is_empty() {
        return Err(Error::InvalidParameter("test pool is empty".into()));
    }
    let classes = ds.num_classes();

    let test_x: Vec<Vec<T>> = ds.test().iter().map(|s| to_scalar(&s.x)).collect();
    let test_y: Vec<usize> = ds
        .test()
        .iter()
        .map(|s| s.y.expect("test samples are labeled"))
        .collect();
    let mut test_hits = 0;
    let mut test_emb = Vec::with_capacity(test_x.len());
    for chunk in test_x.chunks(256) {
        let out = forward(params, chunk)?;
        let start = test_emb.len();
        test_emb.extend(out.embeddings);
        test_hits += out
            .logits
            .iter()
            .enumerate()
            .filter(|(k, l)| argmax(l).0 == test_y[start + k])
            .count();
    }
    let intra_sim = intra_class_similarity(&test_emb, &test_y, classes)?;

    let mut m = EvalMetrics {
        top1: fraction(test_hits, test_y.len()),
        intra_sim,
        ..Default::default()
    };
    let unlabeled = ds.unlabeled();
    if unlabeled.is_empty() {
        return Ok(m);
    }
    let truth: Vec<usize> = ds.hidden_labels().iter().map(|y| y.expect("hidden label")).collect();
    let xs: Vec<&[f64]> = unlabeled.iter().map(|s| s.x.as_slice()).collect();
    let (feats, logits) = encode(params, &xs)?;
    let protos = compute_prototypes(params, &ds.labeled_by_class(), &calib.mixed_pool)?;

    let mut fc_correct = Vec::with_capacity(unlabeled.len());
    let mut proto_correct = Vec::with_capacity(unlabeled.len());
    let (mut pl_hits, mut sel_hits) = (0, 0);
    for (((s, f), l), &y) in unlabeled.iter().zip(&feats).zip(&logits).zip(&truth) {
        let p_b = softmax(l)?;
        fc_correct.push(p_b.argmax().0 == y);
        let target = if opts.calibrate {
            calibrate(&p_b, calib.running.current())?
        } else {
            p_b
        };
        pl_hits += usize::from(target.argmax().0 == y);
        let sims: Vec<T> = protos
            .iter()
            .map(|p| cosine_similarity(f, &p.vector))
            .collect::<Result<_>>()?;
        proto_correct.push(argmax(&sims).0 == y);
        sel_hits += usize::from(calib.pseudo_cache.get(&s.id).is_some_and(|e| e.class == y));
    }
    let n = unlabeled.len();
    m.pl_acc = fraction(pl_hits, n);
    m.proto_acc = fraction(proto_correct.iter().filter(|c| **c).count(), n);
    m.overlap = overlap(&fc_correct, &proto_correct);
    m.pos_sel_acc = fraction(sel_hits, n);
    Ok(m)
}

/// Serialized training state at an epoch boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Checkpoint<T: Scalar> {
    pub version: u32,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub query: EncoderParams<T>,
    pub key: EncoderParams<T>,
    pub optimizer: OptimizerState<T>,
    pub queue: KeyQueue<T>,
    pub labeled_keys: KeyQueue<T>,
    pub calibration: CalibrationState<T>,
    pub history: Vec<EpochMetrics>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidParameter(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}

/// Keys of the clean `xs` under the key encoder.
fn encode_keys<T: Scalar>(key: &EncoderParams<T>, xs: &[&[f64]]) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(256) {
        let batch: Vec<Vec<T>> = chunk.iter().map(|x| to_scalar(x)).collect();
        out.extend(forward(key, &batch)?.embeddings);
    }
    Ok(out)
}

/// Fills the negative queue with key-encoder keys of up to `capacity`
/// unlabeled samples, drawn in a seeded order.
pub fn prefill_queue<T: Scalar>(
    queue: &mut KeyQueue<T>,
    key: &EncoderParams<T>,
    ds: &Dataset,
    seed: u64,
) -> Result<()> {
    let mut order: Vec<usize> = (0..ds.unlabeled().len()).collect();
    order.shuffle(&mut stream_rng(seed, Stream::QueueFill, 0));
    order.truncate(queue.capacity());
    let xs: Vec<&[f64]> = order.iter().map(|&i| ds.unlabeled()[i].x.as_slice()).collect();
    let keys = encode_keys(key, &xs)?;
    queue.push(
        order
            .iter()
            .zip(keys)
            .map(|(&i, embedding)| KeyEntry {
                embedding,
                assigned_class: None,
                source_id: ds.unlabeled()[i].id,
            })
            .collect(),
    )
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}

/// Encoders, optimizer, key stores and calibration state of one run.
pub struct Trainer<T: Scalar> {
    cfg: TrainConfig,
    ds: Dataset,
    query: EncoderParams<T>,
    key: EncoderParams<T>,
    opt: OptimizerState<T>,
    queue: KeyQueue<T>,
    labeled_keys: KeyQueue<T>,
    calib: CalibrationState<T>,
    epoch: usize,
    history: Vec<EpochMetrics>,
}

impl<T: Scalar> Trainer<T> {
    /// Builds the dataset described by `cfg` and initializes a run.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let ds = cfg.data.build(cfg.seed).with_context(|| "building dataset".into())?;
        Self::with_dataset(cfg, ds)
    }

    /// Initializes a run on `ds`: seeded encoders (the key encoder starts as
    /// a copy), the first calibration refresh, then queue and labeled key
    /// pool filled from clean samples.
    pub fn with_dataset(cfg: TrainConfig, ds: Dataset) -> Result<Self> {
        cfg.validate()?;
        let shape = cfg.model.shape(ds.dim(), ds.num_classes());
        let query: EncoderParams<T> = init_with_shape(&shape, cfg.seed)?;
        let key = query.clone();
        let opt = OptimizerState::new(&query, cfg.lr0, cfg.sgd_momentum, cfg.weight_decay)?;
        let mut queue = KeyQueue::new(cfg.queue_size, shape.embed_dim)?;
        let mut labeled_keys = KeyQueue::new(ds.labeled().len().max(cfg.batch_size), shape.embed_dim)?;
        let calib = CalibrationState::new(ds.num_classes(), cfg.t_window, cfg.refresh_period)?;
        let mut t = Self {
            cfg,
            ds,
            query,
            key,
            opt,
            queue: KeyQueue::new(1, 1)?,
            labeled_keys: KeyQueue::new(1, 1)?,
            calib,
            epoch: 0,
            history: Vec::new(),
        };
        t.refresh(0).with_context(|| "initial calibration refresh".into())?;
        prefill_queue(&mut queue, &t.key, &t.ds, t.cfg.seed)?;
        let xs: Vec<&[f64]> = t.ds.labeled().iter().map(|s| s.x.as_slice()).collect();
        let keys = encode_keys(&t.key, &xs)?;
        labeled_keys.push(
            t.ds.labeled()
                .iter()
                .zip(keys)
                .map(|(s, embedding)| KeyEntry {
                    embedding,
                    assigned_class: s.y,
                    source_id: s.id,
                })
                .collect(),
        )?;
        t.queue = queue;
        t.labeled_keys = labeled_keys;
        Ok(t)
    }

    /// Resumes from a checkpoint on the dataset it was trained on.
    pub fn from_checkpoint(ck: Checkpoint<T>, ds: Dataset) -> Result<Self> {
        ck.config.validate()?;
        let shape = ck.config.model.shape(ds.dim(), ds.num_classes());
        if ck.query.shape() != shape || ck.key.shape() != shape {
            return Err(Error::InvalidParameter(
                "checkpoint does not match dataset geometry".into(),
            ));
        }
        Ok(Self {
            cfg: ck.config,
            ds,
            query: ck.query,
            key: ck.key,
            opt: ck.optimizer,
            queue: ck.queue,
            labeled_keys: ck.labeled_keys,
            calib: ck.calibration,
            epoch: ck.epoch,
            history: ck.history,
        })
    }

    /// Loads a checkpoint and rebuilds its dataset from the stored config.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let ds = ck.config.data.build(ck.config.seed)?;
        Self::from_checkpoint(ck, ds)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            epoch: self.epoch,
            query: self.query.clone(),
            key: self.key.clone(),
            optimizer: self.opt.clone(),
            queue: self.queue.clone(),
            labeled_keys: self.labeled_keys.clone(),
            calibration: self.calib.clone(),
            history: self.history.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &Dataset {
        &self.ds
    }

    pub fn query(&self) -> &EncoderParams<T> {
        &self.query
    }

    pub fn key(&self) -> &EncoderParams<T> {
        &self.key
    }

    pub fn queue(&self) -> &KeyQueue<T> {
        &self.queue
    }

    pub fn labeled_keys(&self) -> &KeyQueue<T> {
        &self.labeled_keys
    }

    pub fn calibration(&self) -> &CalibrationState<T> {
        &self.calib
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    /// Mixed pools, then prototypes, then the pseudo-label cache.
    fn refresh(&mut self, epoch: usize) -> Result<()> {
        let opts = self.cfg.calibration_options();
        let labeled = self.ds.labeled_by_class();
        let mut rng = stream_rng(self.cfg.seed, Stream::Mixup, epoch as u64);
        refine_prototypes_mixup(&mut self.calib, &labeled, self.ds.unlabeled(), &opts, &mut rng)?;
        self.calib.prototypes = compute_prototypes(&self.query, &labeled, &self.calib.mixed_pool)?;
        refresh_pseudo_labels(&mut self.calib, self.ds.unlabeled(), &self.query, &opts)?;
        self.calib.epoch_of_last_refresh = Some(epoch);
        Ok(())
    }

    /// Contrastive loss of every query embedding against its positives and
    /// the queue. Gradients are with respect to the query embeddings.
    fn contrastive(&self, ids: &[u64], queries: &[Vec<T>], instance: &[Vec<T>]) -> Result<(BatchLoss<T>, usize)> {
        let e = queries.first().map_or(0, Vec::len);
        let mut loss = BatchLoss::zero(queries.len(), e);
        let mut scored = 0;
        let mut total = T::zero();
        for (i, ((&id, q), inst)) in ids.iter().zip(queries).zip(instance).enumerate() {
            let pos = select_positives(
                id,
                inst,
                &self.calib.pseudo_cache,
                &self.queue,
                &self.labeled_keys,
                self.cfg.n_pos,
            )?;
            let used: HashSet<usize> = pos.queue_indices.iter().copied().collect();
            let negatives: Vec<&[T]> = self
                .queue
                .entries()
                .enumerate()
                .filter(|(j, k)| k.source_id != id && !used.contains(j))
                .map(|(_, k)| k.embedding.as_slice())
                .collect();
            if negatives.is_empty() {
                continue;
            }
            let pos_keys: Vec<&[T]> = std::iter::once(pos.instance)
                .chain(pos.class_keys.iter().copied())
                .collect();
            let mut alpha_p = vec![T::one()];
            alpha_p.resize(pos_keys.len(), pos.alpha);
            let clamp = |s: T| s.max(-T::one()).min(T::one());
            let inp = ContrastiveInputs {
                s_p: pos_keys.iter().map(|k| clamp(dot(q, k))).collect(),
                alpha_p,
                s_n: negatives.iter().map(|k| clamp(dot(q, k))).collect(),
                gamma: T::lit(self.cfg.gamma),
                margin: T::lit(self.cfg.margin),
            };
            let out = contrastive_loss(&inp)?;
            total += out.value;
            let g = &mut loss.grads[i];
            for (k, &w) in pos_keys
                .iter()
                .zip(&out.grad_sp)
                .chain(negatives.iter().zip(&out.grad_sn))
            {
                for (gj, &kj) in g.iter_mut().zip(k.iter()) {
                    *gj += w * kj;
                }
            }
            scored += 1;
        }
        if scored > 0 {
            let scale = T::one() / T::lit(scored as f64);
            loss.value = total * scale;
            for g in &mut loss.grads {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
        Ok((loss, scored))
    }

    /// One optimization step on `batch` at learning rate `lr`.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<StepStats> {
        let cfg = &self.cfg;
        let weights = cfg.loss_weights();

        let lab_x: Vec<Vec<T>> = batch.labeled.iter().map(|s| to_scalar(&s.x)).collect();
        let lab_y: Vec<usize> = batch
            .labeled
            .iter()
            .map(|s| {
                s.y.ok_or_else(|| Error::InvalidParameter(format!("labeled sample {} has no label", s.id)))
            })
            .collect::<Result<_>>()?;
        let lab_out = forward(&self.query, &lab_x)?;
        let sup = sup_loss(&lab_y, &lab_out.logits).with_context(|| "supervised loss".into())?;

        let n_u = batch.unlabeled.len();
        let ids: Vec<u64> = batch.unlabeled.iter().map(|p| p.id).collect();
        let weak_x: Vec<Vec<T>> = batch.unlabeled.iter().map(|p| to_scalar(&p.weak)).collect();
        let strong_x: Vec<Vec<T>> = batch.unlabeled.iter().map(|p| to_scalar(&p.strong)).collect();

        let mut pl = BatchLoss::zero(0, 0);
        let mut ctr = BatchLoss::zero(0, 0);
        let mut kept = 0;
        let mut scored = 0;
        let mut unl_keys = Vec::new();
        let mut weak_features = Vec::new();
        let mut strong_cache = None;
        if n_u > 0 {
            // Targets come from the weak view through the query encoder and
            // carry no gradient.
            let weak_q = forward(&self.query, &weak_x)?;
            let targets = weak_q
                .logits
                .iter()
                .map(|l| {
                    let p = softmax(l)?;
                    if cfg.calibration {
                        calibrate(&p, self.calib.running.current())
                    } else {
                        Ok(p)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            weak_features = weak_q.features;
            let strong = forward(&self.query, &strong_x)?;
            let plr = pseudo_label_loss(&targets, T::lit(cfg.tau), &strong.logits)
                .with_context(|| "pseudo-label loss".into())?;
            kept = plr.kept;
            pl = plr.loss;
            unl_keys = forward(&self.key, &weak_x)?.embeddings;
            let (c, s) = self
                .contrastive(&ids, &strong.embeddings, &unl_keys)
                .with_context(|| "contrastive loss".into())?;
            ctr = c;
            scored = s;
            strong_cache = Some(strong.cache);
        }

        let stats = StepStats {
            loss_sup: sup.value.as_f64(),
            loss_pl: pl.value.as_f64(),
            loss_ctr: ctr.value.as_f64(),
            kept,
            unlabeled: n_u,
            scored,
        };
        check_finite("supervised loss", stats.loss_sup)?;
        check_finite("pseudo-label loss", stats.loss_pl)?;
        check_finite("contrastive loss", stats.loss_ctr)?;

        // Zero-weighted terms are dropped so they cannot perturb the others.
        let total = total_loss(&sup, &pl, &ctr, &weights);
        let mut grads = backward(&self.query, &lab_out.cache, &total.labeled_logits, &[])?;
        if let Some(cache) = &strong_cache {
            let g_logits: &[Vec<T>] = if weights.lambda_pl > 0.0 {
                &total.unlabeled_logits
            } else {
                &[]
            };
            let g_emb: &[Vec<T>] = if weights.lambda_ctr > 0.0 {
                &total.unlabeled_embeddings
            } else {
                &[]
            };
            if !g_logits.is_empty() || !g_emb.is_empty() {
                let g_u = backward(&self.query, cache, g_logits, g_emb)?;
                grads.add_scaled(&g_u, T::one())?;
            }
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        sgd_step(&mut self.query, &grads, &mut self.opt, lr)?;

        let lab_keys = forward(&self.key, &lab_x)?.embeddings;
        momentum_update(&mut self.key, &self.query, T::lit(self.cfg.key_momentum))?;

        self.queue.push(
            ids.iter()
                .zip(unl_keys)
                .map(|(&id, embedding)| KeyEntry {
                    embedding,
                    assigned_class: None,
                    source_id: id,
                })
                .collect(),
        )?;
        self.labeled_keys.push(
            batch
                .labeled
                .iter()
                .zip(lab_keys)
                .map(|(s, embedding)| KeyEntry {
                    embedding,
                    assigned_class: s.y,
                    source_id: s.id,
                })
                .collect(),
        )?;

        if !weak_features.is_empty() && !self.calib.prototypes.is_empty() {
            let mean = batch_mean_similarity(&weak_features, &self.calib.prototypes, T::lit(self.cfg.gamma_s))?;
            self.calib.running.update(&mean)?;
        }
        Ok(stats)
    }

    /// Runs the next epoch: scheduled refresh, every batch, then evaluation.
    pub fn train_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        if epoch >= self.cfg.epochs {
            return Err(Error::InvalidParameter(format!(
                "run already finished {} epochs",
                self.cfg.epochs
            )));
        }
        if epoch > 0 && self.calib.refresh_due(epoch) {
            self.refresh(epoch)
                .with_context(|| format!("refresh before epoch {epoch}"))?;
        }
        let lr = cosine_lr(epoch, self.cfg.epochs, self.cfg.lr0)?;
        let bcfg = self.cfg.batch_config();
        let ds = self.ds.clone();
        let batches = EpochBatches::new(&ds, &bcfg, self.cfg.seed, epoch as u64)?;
        let (mut sup, mut pl, mut ctr) = (0.0, 0.0, 0.0);
        let (mut steps, mut kept, mut seen) = (0usize, 0usize, 0usize);
        for (b, batch) in batches.enumerate() {
            let s = self
                .train_step(&batch, lr)
                .with_context(|| format!("epoch {epoch}, batch {b}"))?;
            sup += s.loss_sup;
            pl += s.loss_pl;
            ctr += s.loss_ctr;
            kept += s.kept;
            seen += s.unlabeled;
            steps += 1;
        }
        let eval = evaluate(&self.query, &self.ds, &self.calib, &self.cfg.calibration_options())
            .with_context(|| format!("evaluation after epoch {epoch}"))?;
        let steps_f = steps.max(1) as f64;
        let m = EpochMetrics {
            epoch,
            loss_sup: sup / steps_f,
            loss_pl: pl / steps_f,
            loss_ctr: ctr / steps_f,
            kept_frac: fraction(kept, seen),
            top1: eval.top1,
            pl_acc: eval.pl_acc,
            proto_acc: eval.proto_acc,
            overlap: eval.overlap,
            intra_sim: eval.intra_sim,
            pos_sel_acc: eval.pos_sel_acc,
        };
        self.history.push(m);
        self.epoch += 1;
        Ok(m)
    }

    /// Trains until the configured number of epochs.
    pub fn run(&mut self) -> Result<&[EpochMetrics]> {
        while self.epoch < self.cfg.epochs {
            self.train_epoch()?;
        }
        Ok(&self.history)
    }
}

/// Trains a fresh run of `cfg` to completion.
pub fn run_experiment<T: Scalar>(cfg: TrainConfig) -> Result<Trainer<T>> {
    let mut t = Trainer::new(cfg)?;
    t.run()?;
    Ok(t)
}
