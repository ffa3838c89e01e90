//! MLP backbone with a classifier head and a normalized projection head,
//! written with explicit forward caches and analytic backward passes, plus
//! the momentum key encoder update and the negative key queue.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::norm;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;

/// Norm floor of the embedding normalization.
const EMBED_EPS: f64 = 1e-12;

/// Fully connected layer; `weight` is `out_dim × in_dim`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Dense<T: Scalar> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    fn forward_into(&self, input: &[T], out: &mut Vec<T>) {
        let rows = input.len() / self.in_dim;
        out.clear();
        out.reserve(rows * self.out_dim);
        for x in input.chunks_exact(self.in_dim) {
            for (w, &b) in self.weight.chunks_exact(self.in_dim).zip(&self.bias) {
                let mut acc = b;
                for (&wi, &xi) in w.iter().zip(x) {
                    acc += wi * xi;
                }
                out.push(acc);
            }
        }
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input` is set.
    fn backward(&self, input: &[T], grad_out: &[T], grad: &mut Dense<T>, need_input: bool) -> Vec<T> {
        let mut grad_in = if need_input {
            vec![T::zero(); input.len()]
        } else {
            Vec::new()
        };
        for ((x, g), gi) in input
            .chunks_exact(self.in_dim)
            .zip(grad_out.chunks_exact(self.out_dim))
            .zip(
                grad_in
                    .chunks_mut(self.in_dim)
                    .map(Some)
                    .chain(std::iter::repeat_with(|| None)),
            )
        {
            for (o, &go) in g.iter().enumerate() {
                if go == T::zero() {
                    continue;
                }
                grad.bias[o] += go;
                let row = o * self.in_dim;
                for (dw, &xi) in grad.weight[row..row + self.in_dim].iter_mut().zip(x) {
                    *dw += go * xi;
                }
            }
            if let Some(gi) = gi {
                for (o, &go) in g.iter().enumerate() {
                    if go == T::zero() {
                        continue;
                    }
                    let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                    for (d, &wi) in gi.iter_mut().zip(w) {
                        *d += wi * go;
                    }
                }
            }
        }
        grad_in
    }
}

/// Layer sizes of an encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    /// Backbone sizes from input to feature dimension, e.g. `[D, 64, 64]`.
    pub dims: Vec<usize>,
    pub classes: usize,
    pub projection_hidden: usize,
    pub embed_dim: usize,
}

impl EncoderShape {
    pub fn new(dims: Vec<usize>, classes: usize, embed_dim: usize) -> Self {
        let projection_hidden = dims.last().copied().unwrap_or(0);
        Self {
            dims,
            classes,
            projection_hidden,
            embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "backbone dims {:?} need at least input and feature sizes, all nonzero",
                self.dims
            )));
        }
        if self.classes < 2 || self.embed_dim < 2 || self.projection_hidden == 0 {
            return Err(Error::InvalidParameter(format!(
                "need classes >= 2, embed_dim >= 2, projection_hidden >= 1 (got {}, {}, {})",
                self.classes, self.embed_dim, self.projection_hidden
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }
}

/// Backbone, classifier head and two-layer projection head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EncoderParams<T: Scalar> {
    pub backbone: Vec<Dense<T>>,
    pub classifier: Dense<T>,
    pub projection: Vec<Dense<T>>,
}

impl<T: Scalar> EncoderParams<T> {
    /// All-zero parameters of `shape`; also the zero gradient.
    pub fn zeros(shape: &EncoderShape) -> Self {
        let backbone = shape.dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        let f = shape.feature_dim();
        Self {
            backbone,
            classifier: Dense::zeros(f, shape.classes),
            projection: vec![
                Dense::zeros(f, shape.projection_hidden),
                Dense::zeros(shape.projection_hidden, shape.embed_dim),
            ],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape())
    }

    pub fn shape(&self) -> EncoderShape {
        let mut dims: Vec<usize> = self.backbone.iter().map(|l| l.in_dim).collect();
        dims.push(self.backbone.last().map_or(0, |l| l.out_dim));
        EncoderShape {
            dims,
            classes: self.classifier.out_dim,
            projection_hidden: self.projection[0].out_dim,
            embed_dim: self.projection[1].out_dim,
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense<T>> {
        self.backbone
            .iter()
            .chain(std::iter::once(&self.classifier))
            .chain(&self.projection)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense<T>> {
        self.backbone
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .chain(&mut self.projection)
    }

    /// Every parameter tensor in a fixed order: per layer weight then bias,
    /// backbone first, then classifier, then projection.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters flattened in [`EncoderParams::tensors`] order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors().concat()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers()
            .zip(other.layers())
            .all(|(a, b)| a.in_dim == b.in_dim && a.out_dim == b.out_dim)
            && self.backbone.len() == other.backbone.len()
            && self.projection.len() == other.projection.len()
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: other.num_params(),
            })
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Seeded He-uniform initialization: weights of a fan-in `n` layer are
/// drawn from `U(-√(6/n), √(6/n))`, biases start at zero.
pub fn init_params<T: Scalar>(dims: &[usize], classes: usize, embed_dim: usize, seed: u64) -> Result<EncoderParams<T>> {
    let shape = EncoderShape::new(dims.to_vec(), classes, embed_dim);
    init_with_shape(&shape, seed)
}

pub fn init_with_shape<T: Scalar>(shape: &EncoderShape, seed: u64) -> Result<EncoderParams<T>> {
    shape.validate()?;
    let mut params = EncoderParams::zeros(shape);
    let mut rng = stream_rng(seed, Stream::Init, 0);
    for layer in params.layers_mut() {
        let bound = (6.0 / layer.in_dim as f64).sqrt();
        for w in &mut layer.weight {
            *w = T::lit(rng.random_range(-bound..=bound));
        }
    }
    Ok(params)
}

/// Intermediate values of one forward pass, sufficient for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar> {
    rows: usize,
    input: Vec<T>,
    /// Pre-activation of every backbone layer; the last one is the feature.
    backbone_pre: Vec<Vec<T>>,
    /// ReLU outputs feeding backbone layers `1..`.
    backbone_act: Vec<Vec<T>>,
    proj_hidden_pre: Vec<T>,
    proj_hidden_act: Vec<T>,
    proj_out: Vec<T>,
    proj_norm: Vec<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Sign pattern of every ReLU input; finite-difference checks use it to
    /// detect a step across a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let n = self.backbone_pre.len();
        self.backbone_pre[..n - 1]
            .iter()
            .chain(std::iter::once(&self.proj_hidden_pre))
            .flat_map(|z| z.iter().map(|&v| v > T::zero()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Scalar> {
    pub features: Vec<Vec<T>>,
    pub logits: Vec<Vec<T>>,
    /// Unit-norm projections (zero when the projection itself vanishes).
    pub embeddings: Vec<Vec<T>>,
    pub cache: ForwardCache<T>,
}

fn relu<T: Scalar>(z: &[T]) -> Vec<T> {
    z.iter().map(|&v| v.max(T::zero())).collect()
}

fn split_rows<T: Scalar>(flat: &[T], width: usize) -> Vec<Vec<T>> {
    flat.chunks_exact(width).map(<[T]>::to_vec).collect()
}

/// Runs a batch through the encoder. ReLU sits between backbone layers;
/// the last backbone layer is linear and yields the features.
pub fn forward<T: Scalar>(p: &EncoderParams<T>, xs: &[Vec<T>]) -> Result<ForwardOutput<T>> {
    let d = p.backbone[0].in_dim;
    let mut input = Vec::with_capacity(xs.len() * d);
    for x in xs {
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        input.extend_from_slice(x);
    }
    let rows = xs.len();

    let mut backbone_pre = Vec::with_capacity(p.backbone.len());
    let mut backbone_act = Vec::with_capacity(p.backbone.len().saturating_sub(1));
    for (i, layer) in p.backbone.iter().enumerate() {
        let src = if i == 0 { &input } else { &backbone_act[i - 1] };
        let mut z = Vec::new();
        layer.forward_into(src, &mut z);
        if i + 1 < p.backbone.len() {
            backbone_act.push(relu(&z));
        }
        backbone_pre.push(z);
    }
    let feats = backbone_pre.last().unwrap();

    let mut logits = Vec::new();
    p.classifier.forward_into(feats, &mut logits);
    let mut proj_hidden_pre = Vec::new();
    p.projection[0].forward_into(feats, &mut proj_hidden_pre);
    let proj_hidden_act = relu(&proj_hidden_pre);
    let mut proj_out = Vec::new();
    p.projection[1].forward_into(&proj_hidden_act, &mut proj_out);

    let e = p.projection[1].out_dim;
    let eps = T::lit(EMBED_EPS);
    let mut proj_norm = Vec::with_capacity(rows);
    let mut embeddings = Vec::with_capacity(rows);
    for u in proj_out.chunks_exact(e) {
        let n = norm(u).max(eps);
        proj_norm.push(n);
        embeddings.push(u.iter().map(|&v| v / n).collect());
    }

    let f = p.classifier.in_dim;
    Ok(ForwardOutput {
        features: split_rows(feats, f),
        logits: split_rows(&logits, p.classifier.out_dim),
        embeddings,
        cache: ForwardCache {
            rows,
            input,
            backbone_pre,
            backbone_act,
            proj_hidden_pre,
            proj_hidden_act,
            proj_out,
            proj_norm,
        },
    })
}

fn flatten_grad<T: Scalar>(g: &[Vec<T>], rows: usize, width: usize, what: &str) -> Result<Vec<T>> {
    if g.is_empty() {
        return Ok(vec![T::zero(); rows * width]);
    }
    if g.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            got: g.len(),
        })
        .map_err(|e| e.context(format!("{what} batch size")));
    }
    let mut out = Vec::with_capacity(rows * width);
    for row in g {
        if row.len() != width {
            return Err(Error::DimensionMismatch {
                expected: width,
                got: row.len(),
            }
            .context(format!("{what} width")));
        }
        out.extend_from_slice(row);
    }
    Ok(out)
}

fn relu_backward<T: Scalar>(grad: &mut [T], pre: &[T]) {
    for (g, &z) in grad.iter_mut().zip(pre) {
        if z <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Parameter gradient of a scalar loss given its gradients with respect to
/// the logits and the normalized embeddings. An empty slice stands for an
/// all-zero stream. Both heads feed one shared backbone gradient; batch
/// rows are accumulated in order.
pub fn backward<T: Scalar>(
    p: &EncoderParams<T>,
    cache: &ForwardCache<T>,
    grad_logits: &[Vec<T>],
    grad_embeddings: &[Vec<T>],
) -> Result<EncoderParams<T>> {
    let rows = cache.rows;
    let c = p.classifier.out_dim;
    let e = p.projection[1].out_dim;
    let f = p.classifier.in_dim;
    let gl = flatten_grad(grad_logits, rows, c, "logit gradient")?;
    let ge = flatten_grad(grad_embeddings, rows, e, "embedding gradient")?;

    let mut grads = p.zeros_like();
    let feats = cache.backbone_pre.last().unwrap();

    let mut grad_feat = p.classifier.backward(feats, &gl, &mut grads.classifier, true);

    // d/du of u/|u| is (I - ê êᵀ)/|u| above the norm floor, I/eps below it.
    let eps = T::lit(EMBED_EPS);
    let mut grad_u = Vec::with_capacity(rows * e);
    for ((u, g), &n) in cache
        .proj_out
        .chunks_exact(e)
        .zip(ge.chunks_exact(e))
        .zip(&cache.proj_norm)
    {
        if norm(u) > eps {
            let proj: T = u.iter().zip(g).map(|(&ui, &gi)| ui * gi).sum::<T>() / (n * n);
            grad_u.extend(u.iter().zip(g).map(|(&ui, &gi)| (gi - ui * proj) / n));
        } else {
            grad_u.extend(g.iter().map(|&gi| gi / eps));
        }
    }
    let (proj0, proj1) = grads.projection.split_at_mut(1);
    let mut grad_hidden = p.projection[1].backward(&cache.proj_hidden_act, &grad_u, &mut proj1[0], true);
    relu_backward(&mut grad_hidden, &cache.proj_hidden_pre);
    let grad_feat_proj = p.projection[0].backward(feats, &grad_hidden, &mut proj0[0], true);
    for (a, b) in grad_feat.iter_mut().zip(&grad_feat_proj) {
        *a += *b;
    }
    debug_assert_eq!(grad_feat.len(), rows * f);

    let mut upstream = grad_feat;
    for i in (0..p.backbone.len()).rev() {
        let src = if i == 0 {
            &cache.input
        } else {
            &cache.backbone_act[i - 1]
        };
        let mut g = p.backbone[i].backward(src, &upstream, &mut grads.backbone[i], i > 0);
        if i > 0 {
            relu_backward(&mut g, &cache.backbone_pre[i - 1]);
        }
        upstream = g;
    }
    Ok(grads)
}

/// `θ_k ← m θ_k + (1 - m) θ_q` for every parameter.
pub fn momentum_update<T: Scalar>(key: &mut EncoderParams<T>, query: &EncoderParams<T>, m: T) -> Result<()> {
    key.check_same_shape(query)?;
    if !(m >= T::zero() && m <= T::one()) {
        return Err(Error::InvalidParameter(format!("momentum {m} outside [0, 1]")));
    }
    let rest = T::one() - m;
    for (k, q) in key.tensors_mut().into_iter().zip(query.tensors()) {
        for (a, &b) in k.iter_mut().zip(q) {
            *a = m * *a + rest * b;
        }
    }
    Ok(())
}

/// A key-encoder embedding and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct KeyEntry<T: Scalar> {
    pub embedding: Vec<T>,
    /// Ground-truth class for labeled sources, pseudo class (if any) for
    /// unlabeled ones.
    pub assigned_class: Option<usize>,
    pub source_id: u64,
}

/// Fixed-capacity FIFO of unit-norm keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct KeyQueue<T: Scalar> {
    capacity: usize,
    dim: usize,
    entries: VecDeque<KeyEntry<T>>,
    /// Total keys ever pushed; the write cursor is `pushed % capacity`.
    pushed: u64,
}

impl<T: Scalar> KeyQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "queue capacity and key dim must be >= 1 (got {capacity}, {dim})"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
            pushed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn cursor(&self) -> usize {
        (self.pushed % self.capacity as u64) as usize
    }

    /// Entries from oldest to newest.
    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &KeyEntry<T>> + ExactSizeIterator {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&KeyEntry<T>> {
        self.entries.get(i)
    }

    /// Appends `keys` in order, evicting the oldest entries beyond
    /// capacity. Rejects the whole push if any key is off the unit sphere.
    pub fn push(&mut self, keys: Vec<KeyEntry<T>>) -> Result<()> {
        for k in &keys {
            if k.embedding.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: k.embedding.len(),
                });
            }
            let n = norm(&k.embedding).as_f64();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::NonNormalizedKey(n));
            }
        }
        for k in keys {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(k);
            self.pushed += 1;
        }
        Ok(())
    }
}
