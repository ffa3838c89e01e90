//! Synthetic datasets, labeled/unlabeled splits, vector-space augmentation
//! and the `B` labeled / `μB` unlabeled batch stream.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng, Stream};

/// Fraction of every class held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

pub const SNAPSHOT_HEADER: &str = "SSCL-DATA v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub x: Vec<f64>,
    /// Present for labeled and test samples only.
    pub y: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Labeled,
    Unlabeled,
    Test,
}

impl Pool {
    fn tag(self) -> char {
        match self {
            Pool::Labeled => 'L',
            Pool::Unlabeled => 'U',
            Pool::Test => 'T',
        }
    }
}

/// Labeled, unlabeled and test pools.
///
/// Ground truth of unlabeled samples is kept behind [`Dataset::hidden_labels`],
/// which counts every read so tests can assert that training never looks.
#[derive(Debug)]
pub struct Dataset {
    labeled: Vec<Sample>,
    unlabeled: Vec<Sample>,
    hidden: Vec<Option<usize>>,
    test: Vec<Sample>,
    num_classes: usize,
    dim: usize,
    hidden_reads: AtomicU64,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            labeled: self.labeled.clone(),
            unlabeled: self.unlabeled.clone(),
            hidden: self.hidden.clone(),
            test: self.test.clone(),
            num_classes: self.num_classes,
            dim: self.dim,
            hidden_reads: AtomicU64::new(self.hidden_reads.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.labeled == other.labeled
            && self.unlabeled == other.unlabeled
            && self.hidden == other.hidden
            && self.test == other.test
            && self.num_classes == other.num_classes
            && self.dim == other.dim
    }
}

impl Dataset {
    fn new(
        labeled: Vec<Sample>,
        unlabeled: Vec<Sample>,
        hidden: Vec<Option<usize>>,
        test: Vec<Sample>,
        num_classes: usize,
        dim: usize,
    ) -> Result<Self> {
        debug_assert_eq!(unlabeled.len(), hidden.len());
        let ds = Self {
            labeled,
            unlabeled,
            hidden,
            test,
            num_classes,
            dim,
            hidden_reads: AtomicU64::new(0),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for s in self.labeled.iter().chain(&self.unlabeled).chain(&self.test) {
            if !ids.insert(s.id) {
                return Err(Error::InvalidParameter(format!("duplicate sample id {}", s.id)));
            }
            if s.x.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: s.x.len(),
                });
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sample {}", s.id)));
            }
        }
        for s in self.labeled.iter().chain(&self.test) {
            match s.y {
                Some(c) if c < self.num_classes => {}
                _ => {
                    return Err(Error::InvalidParameter(format!(
                        "sample {} needs a class id below {}",
                        s.id, self.num_classes
                    )))
                }
            }
        }
        if let Some(s) = self.unlabeled.iter().find(|s| s.y.is_some()) {
            return Err(Error::InvalidParameter(format!(
                "unlabeled sample {} carries a visible label",
                s.id
            )));
        }
        let mut seen = vec![false; self.num_classes];
        for s in &self.labeled {
            seen[s.y.unwrap()] = true;
        }
        if let Some(c) = seen.iter().position(|&v| !v) {
            return Err(Error::InsufficientSamples {
                class: c,
                requested: 1,
                available: 0,
            });
        }
        Ok(())
    }

    pub fn labeled(&self) -> &[Sample] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[Sample] {
        &self.unlabeled
    }

    pub fn test(&self) -> &[Sample] {
        &self.test
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Ground truth of the unlabeled pool, aligned with [`Dataset::unlabeled`].
    /// Metric evaluation only; every call is counted.
    pub fn hidden_labels(&self) -> &[Option<usize>] {
        self.hidden_reads.fetch_add(1, Ordering::Relaxed);
        &self.hidden
    }

    /// Number of [`Dataset::hidden_labels`] calls so far.
    pub fn hidden_label_reads(&self) -> u64 {
        self.hidden_reads.load(Ordering::Relaxed)
    }

    /// Labeled samples grouped by class.
    pub fn labeled_by_class(&self) -> Vec<Vec<&Sample>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for s in &self.labeled {
            out[s.y.unwrap()].push(s);
        }
        out
    }
}

fn gaussian_vec(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn stratified_split(samples: Vec<Sample>, num_classes: usize, rng: &mut Rng) -> (Vec<Sample>, Vec<Sample>) {
    let mut by_class: Vec<Vec<Sample>> = vec![Vec::new(); num_classes];
    for s in samples {
        by_class[s.y.unwrap()].push(s);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut class in by_class {
        class.shuffle(rng);
        let n_test = (class.len() as f64 * TEST_FRACTION).floor() as usize;
        let rest = class.split_off(n_test);
        test.extend(class);
        train.extend(rest);
    }
    train.sort_by_key(|s| s.id);
    test.sort_by_key(|s| s.id);
    (train, test)
}

/// Isotropic unit-variance Gaussian clusters.
///
/// Class means lie on the sphere of radius `class_sep` with pairwise
/// distance at least `class_sep`, placed by seeded rejection sampling.
pub fn make_gaussian_mixture(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    class_sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || dim < 2 || samples_per_class < 10 || !(class_sep > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gaussian mixture needs classes >= 2, dim >= 2, samples >= 10, sep > 0 \
             (got {num_classes}, {dim}, {samples_per_class}, {class_sep})"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Dataset, 0);
    let means = place_means(num_classes, dim, class_sep, &mut rng)?;
    let mut samples = Vec::with_capacity(num_classes * samples_per_class);
    for (c, mean) in means.iter().enumerate() {
        for i in 0..samples_per_class {
            let noise = gaussian_vec(dim, &mut rng);
            samples.push(Sample {
                id: (c * samples_per_class + i) as u64,
                x: mean.iter().zip(&noise).map(|(m, n)| m + n).collect(),
                y: Some(c),
            });
        }
    }
    let mut split_rng = stream_rng(seed, Stream::Split, 0);
    let (train, test) = stratified_split(samples, num_classes, &mut split_rng);
    Dataset::new(train, Vec::new(), Vec::new(), test, num_classes, dim)
}

fn place_means(num_classes: usize, dim: usize, sep: f64, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    const RESTARTS: usize = 200;
    const DRAWS: usize = 1000;
    'restart: for _ in 0..RESTARTS {
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
        for _ in 0..num_classes {
            let mut placed = false;
            for _ in 0..DRAWS {
                let dir = gaussian_vec(dim, rng);
                let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < 1e-12 {
                    continue;
                }
                let cand: Vec<f64> = dir.iter().map(|v| v / n * sep).collect();
                let ok = means
                    .iter()
                    .all(|m| m.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= sep);
                if ok {
                    means.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return Ok(means);
    }
    Err(Error::InfeasibleGeometry(format!(
        "cannot place {num_classes} class means pairwise {sep} apart on a radius-{sep} sphere in {dim} dimensions"
    )))
}

/// Two interleaved half circles in 2D (class 0 outer arc, class 1 inner arc).
pub fn make_two_moons(samples: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if samples < 100 || !(noise >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "two moons needs samples >= 100 and noise >= 0 (got {samples}, {noise})"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Dataset, 0);
    let n_outer = samples / 2;
    let n_inner = samples - n_outer;
    let arc = |i: usize, n: usize| std::f64::consts::PI * i as f64 / (n - 1) as f64;
    let mut out = Vec::with_capacity(samples);
    for i in 0..n_outer {
        let t = arc(i, n_outer);
        out.push((vec![t.cos(), t.sin()], 0));
    }
    for i in 0..n_inner {
        let t = arc(i, n_inner);
        out.push((vec![1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    let samples: Vec<Sample> = out
        .into_iter()
        .enumerate()
        .map(|(i, (mut x, c))| {
            if noise > 0.0 {
                for v in &mut x {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += noise * z;
                }
            }
            Sample {
                id: i as u64,
                x,
                y: Some(c),
            }
        })
        .collect();
    let mut split_rng = stream_rng(seed, Stream::Split, 0);
    let (train, test) = stratified_split(samples, 2, &mut split_rng);
    Dataset::new(train, Vec::new(), Vec::new(), test, 2, 2)
}

/// Keeps `labels_per_class` labeled samples per class and moves the rest
/// of the labeled pool to the unlabeled pool, hiding their labels.
pub fn split_labeled(ds: &Dataset, labels_per_class: usize, seed: u64) -> Result<Dataset> {
    if labels_per_class == 0 {
        return Err(Error::InvalidParameter("labels_per_class must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, Stream::Split, 1);
    let mut keep = Vec::new();
    let mut moved = Vec::new();
    for (class, members) in ds.labeled_by_class().into_iter().enumerate() {
        if members.len() < labels_per_class {
            return Err(Error::InsufficientSamples {
                class,
                requested: labels_per_class,
                available: members.len(),
            });
        }
        let mut members: Vec<Sample> = members.into_iter().cloned().collect();
        members.shuffle(&mut rng);
        let rest = members.split_off(labels_per_class);
        keep.extend(members);
        moved.extend(rest);
    }
    keep.sort_by_key(|s| s.id);
    moved.sort_by_key(|s| s.id);

    let mut pairs: Vec<(Sample, Option<usize>)> = ds.unlabeled.iter().cloned().zip(ds.hidden.iter().copied()).collect();
    pairs.extend(moved.into_iter().map(|mut s| {
        let y = s.y.take();
        (s, y)
    }));
    pairs.sort_by_key(|(s, _)| s.id);
    let (unlabeled, hidden) = pairs.into_iter().unzip();
    Dataset::new(keep, unlabeled, hidden, ds.test.clone(), ds.num_classes, ds.dim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Rotate consecutive coordinate pairs `(0,1), (2,3), ...` by random angles.
    pub rotate: bool,
    /// Rotation angles are uniform in `[-max_angle, max_angle]` radians.
    pub max_angle: f64,
    pub dropout_prob: f64,
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            rotate: false,
            max_angle: 0.0,
            dropout_prob: 0.0,
        }
    }

    /// Low-noise view used for predictions and keys.
    pub fn weak() -> Self {
        Self {
            noise_sigma: 0.05,
            ..Self::identity()
        }
    }

    /// High-noise view with dropout and rotation, used for training targets.
    pub fn strong() -> Self {
        Self {
            noise_sigma: 0.2,
            scale_lo: 1.0,
            scale_hi: 1.0,
            rotate: true,
            max_angle: 0.3,
            dropout_prob: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi && self.scale_hi.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "scale range [{}, {}] must satisfy 0 < lo <= hi",
                self.scale_lo, self.scale_hi
            )));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.max_angle) {
            return Err(Error::InvalidParameter(format!(
                "max_angle must lie in [0, pi], got {}",
                self.max_angle
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::InvalidParameter(format!(
                "dropout_prob must lie in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        Ok(())
    }
}

/// Rotation, then scale, then additive noise, then coordinate dropout.
pub fn augment(s: &Sample, cfg: &AugmentConfig, rng: &mut Rng) -> Sample {
    let mut x = s.x.clone();
    if cfg.rotate {
        for pair in x.chunks_exact_mut(2) {
            let theta = rng.random_range(-cfg.max_angle..=cfg.max_angle);
            let (sin, cos) = theta.sin_cos();
            let (a, b) = (pair[0], pair[1]);
            pair[0] = cos * a - sin * b;
            pair[1] = sin * a + cos * b;
        }
    }
    let scale = if cfg.scale_lo == cfg.scale_hi {
        cfg.scale_lo
    } else {
        rng.random_range(cfg.scale_lo..=cfg.scale_hi)
    };
    if scale != 1.0 {
        for v in &mut x {
            *v *= scale;
        }
    }
    if cfg.noise_sigma > 0.0 {
        for v in &mut x {
            let z: f64 = StandardNormal.sample(rng);
            *v += cfg.noise_sigma * z;
        }
    }
    if cfg.dropout_prob > 0.0 {
        for v in &mut x {
            if rng.random::<f64>() < cfg.dropout_prob {
                *v = 0.0;
            }
        }
    }
    Sample { id: s.id, x, y: s.y }
}

/// Two augmented views of one unlabeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledPair {
    pub id: u64,
    pub weak: Vec<f64>,
    pub strong: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `B` weakly augmented labeled samples.
    pub labeled: Vec<Sample>,
    /// `μB` unlabeled samples, or none when the unlabeled pool is empty.
    pub unlabeled: Vec<UnlabeledPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub mu: usize,
    pub weak: AugmentConfig,
    pub strong: AugmentConfig,
    /// Augmentation of labeled samples; the weak view by default.
    pub labeled: AugmentConfig,
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.mu == 0 {
            return Err(Error::InvalidParameter(format!(
                "batch size and mu must be >= 1 (got {}, {})",
                self.batch_size, self.mu
            )));
        }
        self.weak.validate()?;
        self.strong.validate()?;
        self.labeled.validate()
    }
}

/// Batches of one epoch.
///
/// Both pools are shuffled independently at the start of the epoch. The
/// labeled pool is reshuffled and cycled whenever it runs out; the final
/// partial unlabeled batch is dropped.
pub struct EpochBatches<'a> {
    ds: &'a Dataset,
    cfg: &'a BatchConfig,
    rng: Rng,
    labeled_order: Vec<usize>,
    labeled_pos: usize,
    unlabeled_order: Vec<usize>,
    remaining: usize,
    cursor: usize,
}

impl<'a> EpochBatches<'a> {
    /// Batch stream for `epoch` of a run seeded with `seed`.
    pub fn new(ds: &'a Dataset, cfg: &'a BatchConfig, seed: u64, epoch: u64) -> Result<Self> {
        cfg.validate()?;
        if ds.labeled.is_empty() {
            return Err(Error::InvalidParameter("labeled pool is empty".into()));
        }
        let mut rng = stream_rng(seed, Stream::Batches, epoch);
        let mut labeled_order: Vec<usize> = (0..ds.labeled.len()).collect();
        labeled_order.shuffle(&mut rng);
        let mut unlabeled_order: Vec<usize> = (0..ds.unlabeled.len()).collect();
        unlabeled_order.shuffle(&mut rng);
        let remaining = batches_per_epoch(ds, cfg);
        Ok(Self {
            ds,
            cfg,
            rng,
            labeled_order,
            labeled_pos: 0,
            unlabeled_order,
            remaining,
            cursor: 0,
        })
    }

    fn next_labeled(&mut self) -> usize {
        if self.labeled_pos == self.labeled_order.len() {
            self.labeled_order.shuffle(&mut self.rng);
            self.labeled_pos = 0;
        }
        let i = self.labeled_order[self.labeled_pos];
        self.labeled_pos += 1;
        i
    }
}

/// Full batches per epoch: `|U| / (μB)`, or `max(1, |L| / B)` labeled-only
/// batches when the unlabeled pool is empty.
pub fn batches_per_epoch(ds: &Dataset, cfg: &BatchConfig) -> usize {
    if ds.unlabeled.is_empty() {
        (ds.labeled.len() / cfg.batch_size).max(1)
    } else {
        ds.unlabeled.len() / (cfg.mu * cfg.batch_size)
    }
}

impl Iterator for EpochBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let mut labeled = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let i = self.next_labeled();
            labeled.push(augment(&self.ds.labeled[i], &self.cfg.labeled, &mut self.rng));
        }
        let mut unlabeled = Vec::new();
        if !self.ds.unlabeled.is_empty() {
            let n = self.cfg.mu * self.cfg.batch_size;
            unlabeled.reserve(n);
            for k in self.cursor..self.cursor + n {
                let s = &self.ds.unlabeled[self.unlabeled_order[k]];
                let weak = augment(s, &self.cfg.weak, &mut self.rng).x;
                let strong = augment(s, &self.cfg.strong, &mut self.rng).x;
                unlabeled.push(UnlabeledPair { id: s.id, weak, strong });
            }
            self.cursor += n;
        }
        Some(Batch { labeled, unlabeled })
    }
}

/// Writes the `SSCL-DATA v1` snapshot: one `id,pool,class_or_-1,x...` line
/// per sample. Unlabeled records carry their hidden class.
pub fn write_snapshot<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    writeln!(w, "{SNAPSHOT_HEADER}")?;
    let records = ds
        .labeled
        .iter()
        .map(|s| (s, Pool::Labeled, s.y))
        .chain(
            ds.unlabeled
                .iter()
                .zip(&ds.hidden)
                .map(|(s, &h)| (s, Pool::Unlabeled, h)),
        )
        .chain(ds.test.iter().map(|s| (s, Pool::Test, s.y)));
    for (s, pool, class) in records {
        let class = class.map_or(-1, |c| c as i64);
        write!(w, "{},{},{}", s.id, pool.tag(), class)?;
        for v in &s.x {
            write!(w, ",{v}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header != SNAPSHOT_HEADER {
        return Err(Error::Format {
            line: 1,
            msg: format!("expected header {SNAPSHOT_HEADER:?}, found {header:?}"),
        });
    }
    let (mut labeled, mut unlabeled, mut hidden, mut test) = (vec![], vec![], vec![], vec![]);
    let mut dim = None;
    let mut max_class = None::<usize>;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        let bad = |msg: String| Error::Format { line: lineno, msg };
        let mut fields = line.split(',');
        let id: u64 = fields
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|e| bad(format!("id: {e}")))?;
        let pool = match fields.next() {
            Some("L") => Pool::Labeled,
            Some("U") => Pool::Unlabeled,
            Some("T") => Pool::Test,
            other => return Err(bad(format!("unknown pool {other:?}"))),
        };
        let class: i64 = fields
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|e| bad(format!("class: {e}")))?;
        let class = match class {
            -1 => None,
            c if c >= 0 => Some(c as usize),
            c => return Err(bad(format!("class {c} is negative"))),
        };
        let x = fields
            .map(|f| f.parse::<f64>().map_err(|e| bad(format!("value {f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        match dim {
            None => dim = Some(x.len()),
            Some(d) if d != x.len() => return Err(bad(format!("expected {d} values, found {}", x.len()))),
            _ => {}
        }
        if let Some(c) = class {
            max_class = Some(max_class.map_or(c, |m| m.max(c)));
        }
        match pool {
            Pool::Labeled | Pool::Test => {
                if class.is_none() {
                    return Err(bad("labeled and test records need a class".into()));
                }
                let s = Sample { id, x, y: class };
                if pool == Pool::Labeled {
                    labeled.push(s);
                } else {
                    test.push(s);
                }
            }
            Pool::Unlabeled => {
                unlabeled.push(Sample { id, x, y: None });
                hidden.push(class);
            }
        }
    }
    let dim = dim.ok_or(Error::Format {
        line: 1,
        msg: "snapshot has no records".into(),
    })?;
    Dataset::new(labeled, unlabeled, hidden, test, max_class.map_or(0, |c| c + 1), dim)
}
