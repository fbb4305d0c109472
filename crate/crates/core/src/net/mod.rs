//! Residual convolutional network for tile classification.
//!
//! The architecture is the `6n + 2` family: a 3x3 stem convolution, three
//! stages of `n` basic blocks each (the second and third stages halve the
//! spatial size and use a 1x1 projection shortcut), global average pooling and
//! a fully connected classifier. Depth 8 (`n = 1`) at input 200 has 77,234
//! trainable parameters.
//!
//! Parameters live in one flat buffer described by [`Model::manifest`];
//! gradients use the same layout and batch-norm running statistics are kept
//! in a second buffer described by [`Model::stats_manifest`].

mod checkpoint;
mod loss;
pub(crate) mod ops;

use std::borrow::Cow;

use ndarray::{Array2, ArrayView2, ArrayView4};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::store::CorpusLabel;
use ops::{BnCache, BnParams, ConvGeom};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, EpochMetrics, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{softmax, softmax_cross_entropy};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
/// Class index whose probability [`Model::predict_proba`] returns.
pub const WAVES_INDEX: usize = CorpusLabel::Waves as usize;
/// Samples per chunk in evaluation-mode forward passes.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("unsupported depth {0}: expected 6n + 2 with n in 1..=3 (8, 14 or 20)")]
    UnsupportedDepth(usize),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, got {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward called without a cached train-mode forward pass")]
    NoForwardCache,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub stage_widths: [usize; 3],
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            stage_widths: [16, 32, 64],
            in_channels: 1,
            num_classes: 2,
            input_size: 200,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(depth: usize, input_size: usize, seed: u64) -> Self {
        Self {
            depth,
            input_size,
            seed,
            ..Default::default()
        }
    }

    /// Best configuration reported for the field data: depth 14 on 200x200 tiles.
    pub fn field_preset() -> Self {
        Self::new(14, 200, 0)
    }

    pub fn blocks_per_stage(&self) -> Result<usize> {
        match self.depth {
            8 | 14 | 20 => Ok((self.depth - 2) / 6),
            d => Err(NetError::UnsupportedDepth(d)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.blocks_per_stage()?;
        if self.stage_widths.contains(&0) || self.in_channels == 0 || self.input_size == 0 {
            return Err(NetError::InvalidConfig("widths, channels and input size must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(NetError::InvalidConfig(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }

    /// Whether two configs describe the same architecture (seeds may differ).
    pub fn same_architecture(&self, other: &Self) -> bool {
        (self.depth, self.stage_widths, self.in_channels, self.num_classes, self.input_size)
            == (other.depth, other.stage_widths, other.in_channels, other.num_classes, other.input_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// How batch norm normalizes in train-mode forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Batch statistics, running statistics updated.
    Batch,
    /// Running statistics, left untouched; makes the model a per-sample function.
    Frozen,
}

/// Named slice of a flat buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// One row of the layer summary table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub layer: String,
    /// Output shape with `-1` for the batch dimension.
    pub output_shape: Vec<i64>,
    pub params: usize,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    geom: ConvGeom,
    weight: usize,
}

#[derive(Debug, Clone)]
struct BnLayer {
    channels: usize,
    /// Offset of gamma; beta follows immediately.
    gamma: usize,
    /// Offset of the running mean; the running variance follows immediately.
    stats: usize,
}

impl BnLayer {
    fn beta(&self) -> usize {
        self.gamma + self.channels
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv1: ConvLayer,
    bn1: BnLayer,
    conv2: ConvLayer,
    bn2: BnLayer,
    shortcut: Option<(ConvLayer, BnLayer)>,
}

#[derive(Debug, Clone)]
struct Fc {
    d_in: usize,
    d_out: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Arch {
    stem: ConvLayer,
    stem_bn: BnLayer,
    blocks: Vec<Block>,
    fc: Fc,
    manifest: Vec<TensorEntry>,
    stats_manifest: Vec<TensorEntry>,
    summary: Vec<SummaryRow>,
}

struct Layout {
    manifest: Vec<TensorEntry>,
    stats_manifest: Vec<TensorEntry>,
    summary: Vec<SummaryRow>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.manifest.last().map_or(0, |e| e.offset + e.len());
        self.manifest.push(TensorEntry { name, shape, offset });
        offset
    }

    fn push_stats(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.stats_manifest.last().map_or(0, |e| e.offset + e.len());
        self.stats_manifest.push(TensorEntry { name, shape, offset });
        offset
    }

    fn row(&mut self, layer: &str, shape: &[usize], params: usize) {
        let mut output_shape = vec![-1];
        output_shape.extend(shape.iter().map(|&d| d as i64));
        self.summary.push(SummaryRow {
            layer: layer.into(),
            output_shape,
            params,
        });
    }

    fn conv(&mut self, name: &str, geom: ConvGeom) -> ConvLayer {
        let weight = self.push(format!("{name}.weight"), vec![geom.c_out, geom.c_in, geom.k, geom.k]);
        self.row("Conv2d", &[geom.c_out, geom.h_out, geom.w_out], geom.weight_len());
        ConvLayer { geom, weight }
    }

    fn bn(&mut self, name: &str, channels: usize, hw: (usize, usize)) -> BnLayer {
        let gamma = self.push(format!("{name}.weight"), vec![channels]);
        self.push(format!("{name}.bias"), vec![channels]);
        let stats = self.push_stats(format!("{name}.running_mean"), vec![channels]);
        self.push_stats(format!("{name}.running_var"), vec![channels]);
        self.row("BatchNorm2d", &[channels, hw.0, hw.1], 2 * channels);
        BnLayer { channels, gamma, stats }
    }
}

impl Arch {
    fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let n_blocks = config.blocks_per_stage()?;
        let mut l = Layout {
            manifest: Vec::new(),
            stats_manifest: Vec::new(),
            summary: Vec::new(),
        };
        let s = config.input_size;
        let w0 = config.stage_widths[0];
        let stem = l.conv("stem.conv", ConvGeom::new(config.in_channels, w0, 3, 1, 1, s, s));
        let stem_bn = l.bn("stem.bn", w0, (s, s));
        l.row("ReLU", &[w0, s, s], 0);

        let mut blocks = Vec::new();
        let (mut c, mut h, mut w) = (w0, s, s);
        for (stage, &width) in config.stage_widths.iter().enumerate() {
            for b in 0..n_blocks {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let name = format!("stage{}.block{b}", stage + 1);
                let conv1 = l.conv(&format!("{name}.conv1"), ConvGeom::new(c, width, 3, stride, 1, h, w));
                let (ho, wo) = (conv1.geom.h_out, conv1.geom.w_out);
                let bn1 = l.bn(&format!("{name}.bn1"), width, (ho, wo));
                l.row("ReLU", &[width, ho, wo], 0);
                let conv2 = l.conv(&format!("{name}.conv2"), ConvGeom::new(width, width, 3, 1, 1, ho, wo));
                let bn2 = l.bn(&format!("{name}.bn2"), width, (ho, wo));
                let shortcut = (stride != 1 || c != width).then(|| {
                    let conv = l.conv(&format!("{name}.shortcut.conv"), ConvGeom::new(c, width, 1, stride, 0, h, w));
                    let bn = l.bn(&format!("{name}.shortcut.bn"), width, (ho, wo));
                    (conv, bn)
                });
                l.row("ReLU", &[width, ho, wo], 0);
                l.row("BasicBlock", &[width, ho, wo], 0);
                blocks.push(Block {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    shortcut,
                });
                (c, h, w) = (width, ho, wo);
            }
        }
        l.row("AdaptiveAvgPool2d", &[c, 1, 1], 0);
        let weight = l.push("fc.weight".into(), vec![config.num_classes, c]);
        let bias = l.push("fc.bias".into(), vec![config.num_classes]);
        l.row("Linear", &[config.num_classes], c * config.num_classes + config.num_classes);
        Ok(Self {
            stem,
            stem_bn,
            blocks,
            fc: Fc {
                d_in: c,
                d_out: config.num_classes,
                weight,
                bias,
            },
            manifest: l.manifest,
            stats_manifest: l.stats_manifest,
            summary: l.summary,
        })
    }

    fn param_len(&self) -> usize {
        self.manifest.last().map_or(0, |e| e.offset + e.len())
    }

    fn stats_len(&self) -> usize {
        self.stats_manifest.last().map_or(0, |e| e.offset + e.len())
    }

    fn last_hw(&self) -> usize {
        self.blocks.last().map_or(self.stem.geom.out_hw(), |b| b.conv2.geom.out_hw())
    }
}

enum Stats<'a, T> {
    Fixed(&'a [T]),
    Update(&'a mut [T]),
}

#[derive(Default)]
struct BlockCache<T> {
    bn1: BnCache<T>,
    a1: Vec<T>,
    bn2: BnCache<T>,
    shortcut_bn: BnCache<T>,
    out: Vec<T>,
}

/// State recorded by a train-mode forward pass. Buffers are reused between
/// steps.
#[derive(Default)]
struct ForwardCache<T> {
    n: usize,
    valid: bool,
    input: Vec<T>,
    stem_bn: BnCache<T>,
    stem_out: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    pooled: Vec<T>,
}

/// Scratch buffers shared by forward and backward passes.
#[derive(Default)]
struct Workspace<T> {
    col: Vec<T>,
    dcol: Vec<T>,
    t: Vec<T>,
    u: Vec<T>,
    d: Vec<T>,
    dshort: Vec<T>,
    da1: Vec<T>,
    dx: Vec<T>,
    cur: Vec<T>,
    a1: Vec<T>,
    out: Vec<T>,
}

/// Resizes without reallocating when the capacity suffices; callers overwrite
/// the contents.
fn fit<T: Scalar>(v: &mut Vec<T>, len: usize) {
    if v.len() != len {
        v.resize(len, T::zero());
    }
}

impl Arch {
    fn conv<T: Scalar>(&self, layer: &ConvLayer, params: &[T], x: &[T], n: usize, col: &mut Vec<T>, y: &mut Vec<T>) {
        let g = &layer.geom;
        fit(y, n * g.out_len());
        ops::conv_forward(g, &params[layer.weight..layer.weight + g.weight_len()], x, y, n, col);
    }

    #[allow(clippy::too_many_arguments)]
    fn bn<T: Scalar>(&self, layer: &BnLayer, params: &[T], stats: &mut Stats<'_, T>, x: &[T], n: usize, hw: usize, cache: Option<&mut BnCache<T>>, y: &mut Vec<T>) {
        let c = layer.channels;
        let p = BnParams {
            gamma: &params[layer.gamma..layer.gamma + c],
            beta: &params[layer.beta()..layer.beta() + c],
            eps: BN_EPS,
        };
        fit(y, x.len());
        match stats {
            Stats::Update(s) => {
                let (mean, var) = s[layer.stats..layer.stats + 2 * c].split_at_mut(c);
                let cache = cache.expect("batch statistics are only used while caching");
                ops::bn_forward_batch(&p, mean, var, BN_MOMENTUM, x, y, n, hw, cache);
            }
            Stats::Fixed(s) => {
                let (mean, var) = s[layer.stats..layer.stats + 2 * c].split_at(c);
                ops::bn_forward_fixed(&p, mean, var, x, y, n, hw, cache);
            }
        }
    }

    /// One residual block: `out = relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`.
    #[allow(clippy::too_many_arguments)]
    fn block_forward<T: Scalar>(
        &self,
        block: &Block,
        params: &[T],
        stats: &mut Stats<'_, T>,
        input: &[T],
        n: usize,
        a1: &mut Vec<T>,
        out: &mut Vec<T>,
        caches: Option<[&mut BnCache<T>; 3]>,
        ws: &mut Workspace<T>,
    ) {
        let hw = block.conv1.geom.out_hw();
        let [c1, c2, c3] = match caches {
            Some([a, b, c]) => [Some(a), Some(b), Some(c)],
            None => [None, None, None],
        };
        self.conv(&block.conv1, params, input, n, &mut ws.col, &mut ws.t);
        self.bn(&block.bn1, params, stats, &ws.t, n, hw, c1, a1);
        ops::relu_inplace(a1);
        self.conv(&block.conv2, params, a1, n, &mut ws.col, &mut ws.t);
        self.bn(&block.bn2, params, stats, &ws.t, n, hw, c2, out);
        match &block.shortcut {
            Some((conv, bn)) => {
                self.conv(conv, params, input, n, &mut ws.col, &mut ws.t);
                let mut u = std::mem::take(&mut ws.u);
                self.bn(bn, params, stats, &ws.t, n, hw, c3, &mut u);
                out.iter_mut().zip(&u).for_each(|(o, v)| *o += *v);
                ws.u = u;
            }
            None => out.iter_mut().zip(input).for_each(|(o, v)| *o += *v),
        }
        ops::relu_inplace(out);
    }

    fn classify<T: Scalar>(&self, params: &[T], features: &[T], n: usize) -> (Vec<T>, Vec<T>) {
        let fc = &self.fc;
        let pooled = ops::avg_pool(features, n, fc.d_in, self.last_hw());
        let logits = ops::linear(
            &pooled,
            &params[fc.weight..fc.weight + fc.d_in * fc.d_out],
            &params[fc.bias..fc.bias + fc.d_out],
            n,
            fc.d_in,
            fc.d_out,
        );
        (pooled, logits)
    }

    /// Evaluation pass with fixed statistics.
    fn forward_eval<T: Scalar>(&self, params: &[T], stats: &[T], x: &[T], n: usize, ws: &mut Workspace<T>) -> Vec<T> {
        let mut stats = Stats::Fixed(stats);
        let mut cur = std::mem::take(&mut ws.cur);
        let mut a1 = std::mem::take(&mut ws.a1);
        let mut out = std::mem::take(&mut ws.out);
        self.conv(&self.stem, params, x, n, &mut ws.col, &mut ws.t);
        self.bn(&self.stem_bn, params, &mut stats, &ws.t, n, self.stem.geom.out_hw(), None, &mut cur);
        ops::relu_inplace(&mut cur);
        for block in &self.blocks {
            self.block_forward(block, params, &mut stats, &cur, n, &mut a1, &mut out, None, ws);
            std::mem::swap(&mut cur, &mut out);
        }
        let (_, logits) = self.classify(params, &cur, n);
        (ws.cur, ws.a1, ws.out) = (cur, a1, out);
        logits
    }

    /// Train-mode pass recording everything [`Arch::backward`] needs.
    fn forward_train<T: Scalar>(&self, params: &[T], mut stats: Stats<'_, T>, x: &[T], n: usize, cache: &mut ForwardCache<T>, ws: &mut Workspace<T>) -> Vec<T> {
        cache.n = n;
        cache.input.clear();
        cache.input.extend_from_slice(x);
        self.conv(&self.stem, params, x, n, &mut ws.col, &mut ws.t);
        self.bn(&self.stem_bn, params, &mut stats, &ws.t, n, self.stem.geom.out_hw(), Some(&mut cache.stem_bn), &mut cache.stem_out);
        ops::relu_inplace(&mut cache.stem_out);
        cache.blocks.resize_with(self.blocks.len(), BlockCache::default);
        for (i, block) in self.blocks.iter().enumerate() {
            let (done, rest) = cache.blocks.split_at_mut(i);
            let input = done.last().map_or(&cache.stem_out, |b| &b.out);
            let bc = &mut rest[0];
            self.block_forward(
                block,
                params,
                &mut stats,
                input,
                n,
                &mut bc.a1,
                &mut bc.out,
                Some([&mut bc.bn1, &mut bc.bn2, &mut bc.shortcut_bn]),
                ws,
            );
        }
        let features = cache.blocks.last().map_or(&cache.stem_out, |b| &b.out);
        let (pooled, logits) = self.classify(params, features, n);
        cache.pooled = pooled;
        cache.valid = true;
        logits
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_grad<T: Scalar>(&self, layer: &ConvLayer, params: &[T], grads: &mut [T], x: &[T], dy: &[T], n: usize, dx: Option<&mut Vec<T>>, col: &mut Vec<T>, dcol: &mut Vec<T>) {
        let g = &layer.geom;
        let r = layer.weight..layer.weight + g.weight_len();
        let dx = dx.map(|d| {
            fit(d, n * g.in_len());
            d.as_mut_slice()
        });
        ops::conv_backward(g, &params[r.clone()], x, dy, &mut grads[r], dx, n, col, dcol);
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_grad<T: Scalar>(&self, layer: &BnLayer, params: &[T], grads: &mut [T], cache: &BnCache<T>, dy: &mut [T], n: usize, hw: usize) {
        let c = layer.channels;
        let (dg, db) = grads[layer.gamma..layer.gamma + 2 * c].split_at_mut(c);
        ops::bn_backward(&params[layer.gamma..layer.gamma + c], cache, dy, dg, db, n, hw);
    }

    fn backward<T: Scalar>(&self, params: &[T], grads: &mut [T], cache: &ForwardCache<T>, dlogits: &[T], ws: &mut Workspace<T>) {
        let n = cache.n;
        grads.fill(T::zero());
        let fc = &self.fc;
        let (dw, db) = grads[fc.weight..fc.bias + fc.d_out].split_at_mut(fc.d_in * fc.d_out);
        let dpooled = ops::linear_backward(&cache.pooled, &params[fc.weight..fc.weight + fc.d_in * fc.d_out], dlogits, dw, db, n, fc.d_in, fc.d_out);
        ops::avg_pool_backward(&dpooled, self.last_hw(), &mut ws.d);

        let Workspace {
            col, dcol, d, dshort, da1, dx, ..
        } = ws;
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let input = if i == 0 { &cache.stem_out } else { &cache.blocks[i - 1].out };
            let bc = &cache.blocks[i];
            let hw = block.conv1.geom.out_hw();
            ops::relu_backward(&bc.out, d);
            dshort.clear();
            dshort.extend_from_slice(d);
            self.bn_grad(&block.bn2, params, grads, &bc.bn2, d, n, hw);
            self.conv_grad(&block.conv2, params, grads, &bc.a1, d, n, Some(da1), col, dcol);
            ops::relu_backward(&bc.a1, da1);
            self.bn_grad(&block.bn1, params, grads, &bc.bn1, da1, n, hw);
            self.conv_grad(&block.conv1, params, grads, input, da1, n, Some(dx), col, dcol);
            match &block.shortcut {
                Some((conv, bn)) => {
                    self.bn_grad(bn, params, grads, &bc.shortcut_bn, dshort, n, hw);
                    // The projection's input gradient goes to `d`, which is free now.
                    self.conv_grad(conv, params, grads, input, dshort, n, Some(d), col, dcol);
                    dx.iter_mut().zip(d.iter()).for_each(|(a, b)| *a += *b);
                }
                None => dx.iter_mut().zip(dshort.iter()).for_each(|(a, b)| *a += *b),
            }
            std::mem::swap(d, dx);
        }

        ops::relu_backward(&cache.stem_out, d);
        self.bn_grad(&self.stem_bn, params, grads, &cache.stem_bn, d, n, self.stem.geom.out_hw());
        self.conv_grad(&self.stem, params, grads, &cache.input, d, n, None, col, dcol);
    }
}

/// Residual CNN with parameters, gradients and running statistics.
pub struct Model<T: Scalar> {
    config: ModelConfig,
    arch: Arch,
    params: Vec<T>,
    stats: Vec<T>,
    grads: Vec<T>,
    bn_mode: BnMode,
    cache: ForwardCache<T>,
    ws: Workspace<T>,
}

impl<T: Scalar> Clone for Model<T> {
    /// Clones the weights and statistics; cached forward state is not copied.
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.clone(),
            stats: self.stats.clone(),
            grads: self.grads.clone(),
            bn_mode: self.bn_mode,
            cache: ForwardCache::default(),
            ws: Workspace::default(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("scalar", &T::NAME)
            .field("params", &self.params.len())
            .field("bn_mode", &self.bn_mode)
            .finish()
    }
}

/// Builds a model with seeded initialization: convolutions
/// `N(0, sqrt(2 / fan_in))`, classifier weights `N(0, sqrt(1 / fan_in))`,
/// classifier bias zero, batch-norm scale 1, shift 0, running mean 0 and
/// running variance 1.
pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<Model<T>> {
    let arch = Arch::new(config)?;
    let mut params = vec![T::zero(); arch.param_len()];
    let mut stats = vec![T::zero(); arch.stats_len()];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    for e in &arch.manifest {
        let slot = &mut params[e.range()];
        if e.shape.len() == 4 || e.name == "fc.weight" {
            let fan_in: usize = e.shape[1..].iter().product();
            let gain = if e.shape.len() == 4 { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
            slot.iter_mut().for_each(|v| *v = T::lit(normal.sample(&mut rng)));
        } else if e.shape.len() == 1 && e.name.ends_with(".weight") {
            slot.fill(T::one());
        }
    }
    for e in &arch.stats_manifest {
        if e.name.ends_with("running_var") {
            stats[e.range()].fill(T::one());
        }
    }
    Ok(Model {
        config: config.clone(),
        grads: vec![T::zero(); params.len()],
        arch,
        params,
        stats,
        bn_mode: BnMode::Batch,
        cache: ForwardCache::default(),
        ws: Workspace::default(),
    })
}

fn batch_slice<'a, T: Scalar>(batch: &'a ArrayView4<'_, T>) -> Cow<'a, [T]> {
    match batch.as_slice() {
        Some(s) => Cow::Borrowed(s),
        None => Cow::Owned(batch.iter().cloned().collect()),
    }
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Gradients from the last [`Model::backward`], laid out like [`Model::params`].
    pub fn grads(&self) -> &[T] {
        &self.grads
    }

    pub fn running_stats(&self) -> &[T] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [T] {
        &mut self.stats
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Sum of channels over all batch-norm layers.
    pub fn bn_channels(&self) -> usize {
        self.stats.len() / 2
    }

    pub fn manifest(&self) -> &[TensorEntry] {
        &self.arch.manifest
    }

    pub fn stats_manifest(&self) -> &[TensorEntry] {
        &self.arch.stats_manifest
    }

    /// Layer table: per layer type, output shape and parameter count.
    pub fn summary(&self) -> &[SummaryRow] {
        &self.arch.summary
    }

    pub fn summary_table(&self) -> String {
        let mut out = format!("{:>18}  {:>22}  {:>8}\n", "Layer (type)", "Output Shape", "Param #");
        for r in &self.arch.summary {
            let shape = format!("{:?}", r.output_shape);
            out.push_str(&format!("{:>18}  {:>22}  {:>8}\n", r.layer, shape, r.params));
        }
        out.push_str(&format!("Total params: {}\n", self.param_count()));
        out
    }

    pub fn bn_mode(&self) -> BnMode {
        self.bn_mode
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.bn_mode = mode;
    }

    /// Sets the classifier weights and bias to zero.
    pub fn zero_classifier(&mut self) {
        let fc = &self.arch.fc;
        self.params[fc.weight..fc.bias + fc.d_out].fill(T::zero());
    }

    /// SHA-256 over parameters and running statistics (as f64 bit patterns).
    pub fn parameter_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.params.iter().chain(&self.stats) {
            h.update(v.to_f64_lossy().to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn sample_len(&self) -> usize {
        self.config.in_channels * self.config.input_size * self.config.input_size
    }

    fn check_batch(&self, batch: &ArrayView4<'_, T>) -> Result<usize> {
        let (b, c, h, w) = batch.dim();
        let s = self.config.input_size;
        if c != self.config.in_channels || h != s || w != s {
            return Err(NetError::ShapeMismatch {
                expected: format!("[B, {}, {s}, {s}]", self.config.in_channels),
                found: format!("[{b}, {c}, {h}, {w}]"),
            });
        }
        Ok(b)
    }

    fn check_flat(&self, data: &[T], n: usize) -> Result<()> {
        if data.len() != n * self.sample_len() {
            return Err(NetError::ShapeMismatch {
                expected: format!("{} values", n * self.sample_len()),
                found: format!("{} values", data.len()),
            });
        }
        Ok(())
    }

    fn logits(&self, flat: Vec<T>, n: usize) -> Array2<T> {
        Array2::from_shape_vec((n, self.config.num_classes), flat).expect("logit buffer matches shape")
    }

    /// Evaluation-mode logits `[B, num_classes]`; a pure function of the input.
    pub fn forward_eval(&self, batch: ArrayView4<'_, T>) -> Result<Array2<T>> {
        let n = self.check_batch(&batch)?;
        let data = batch_slice(&batch);
        Ok(self.logits(self.forward_eval_flat(&data, n)?, n))
    }

    /// Train-mode logits; records the state needed by [`Model::backward`].
    pub fn forward_train(&mut self, batch: ArrayView4<'_, T>) -> Result<Array2<T>> {
        let n = self.check_batch(&batch)?;
        let data = batch_slice(&batch);
        let flat = self.forward_train_flat(&data, n)?;
        Ok(self.logits(flat, n))
    }

    pub fn forward(&mut self, batch: ArrayView4<'_, T>, mode: Mode) -> Result<Array2<T>> {
        match mode {
            Mode::Train => self.forward_train(batch),
            Mode::Eval => self.forward_eval(batch),
        }
    }

    /// Evaluation-mode logits for `n` samples stored contiguously.
    pub fn forward_eval_flat(&self, data: &[T], n: usize) -> Result<Vec<T>> {
        self.check_flat(data, n)?;
        let per = self.sample_len();
        let mut ws = Workspace::default();
        let mut out = Vec::with_capacity(n * self.config.num_classes);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let m = EVAL_CHUNK.min(n - start);
            let chunk = &data[start * per..(start + m) * per];
            out.extend(self.arch.forward_eval(&self.params, &self.stats, chunk, m, &mut ws));
        }
        Ok(out)
    }

    pub fn forward_train_flat(&mut self, data: &[T], n: usize) -> Result<Vec<T>> {
        self.check_flat(data, n)?;
        if n == 0 {
            return Err(NetError::ShapeMismatch {
                expected: "at least one sample".into(),
                found: "empty batch".into(),
            });
        }
        let stats = match self.bn_mode {
            BnMode::Batch => Stats::Update(&mut self.stats),
            BnMode::Frozen => Stats::Fixed(&self.stats),
        };
        Ok(self.arch.forward_train(&self.params, stats, data, n, &mut self.cache, &mut self.ws))
    }

    /// Computes gradients of the loss for every parameter from `dL/dlogits`,
    /// overwriting [`Model::grads`]. Consumes the cached forward state.
    pub fn backward(&mut self, dlogits: ArrayView2<'_, T>) -> Result<()> {
        if !self.cache.valid {
            return Err(NetError::NoForwardCache);
        }
        let want = (self.cache.n, self.config.num_classes);
        if dlogits.dim() != want {
            return Err(NetError::ShapeMismatch {
                expected: format!("{want:?}"),
                found: format!("{:?}", dlogits.dim()),
            });
        }
        let d: Vec<T> = dlogits.iter().cloned().collect();
        self.arch.backward(&self.params, &mut self.grads, &self.cache, &d, &mut self.ws);
        self.cache.valid = false;
        Ok(())
    }

    /// Probability of the waves class for each tile.
    pub fn predict_proba(&self, tiles: ArrayView4<'_, T>) -> Result<Vec<T>> {
        let n = self.check_batch(&tiles)?;
        let data = batch_slice(&tiles);
        self.predict_proba_flat(&data, n)
    }

    pub fn predict_proba_flat(&self, data: &[T], n: usize) -> Result<Vec<T>> {
        let logits = self.logits(self.forward_eval_flat(data, n)?, n);
        Ok(softmax(logits.view()).column(WAVES_INDEX).to_vec())
    }
}

#[cfg(test)]
mod tests;
