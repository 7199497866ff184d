//! Vision Transformer for variable-width spectrograms.
//!
//! Every image is placed on a fixed canvas (384 x 1152 for the full model)
//! and cut into square patches in row-major grid order; a learned class
//! token is prepended, so the sequence length is fixed. Patches that only
//! cover padding are masked out as attention keys, which makes the class
//! logits independent of whatever the padded canvas contains.

mod checkpoint;
mod model;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, MDVT_MAGIC, MDVT_VERSION};
pub(crate) use model::argmax;
pub use model::{forward, forward_compact, loss_and_gradients, raw_attention_map, AttentionMaps, Heatmap, Mode, ModelOutput};

/// Multiply-accumulate convention used by [`count_macs`].
pub const MAC_CONVENTION: &str = "one MAC per scalar product term in patch projection, QKV and output projections, \
attention scores and mixing, MLP and head matmuls; LayerNorm, softmax, GELU, biases and residual adds excluded; \
all seq_len tokens counted";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    /// Square patch edge in pixels.
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub te_layers: usize,
    pub mlp_dim: usize,
    pub n_classes: usize,
    pub canvas_height: usize,
    pub canvas_width: usize,
    pub dropout_rate: f64,
    /// Mask padded patches out of attention. Turning this off feeds the zero
    /// padding through as ordinary tokens.
    pub mask_padding: bool,
}

impl ViTConfig {
    /// The five-layer model at full width.
    pub fn full() -> Self {
        ViTConfig {
            patch: 32,
            embed_dim: 384,
            heads: 6,
            te_layers: 5,
            mlp_dim: 1536,
            n_classes: 3,
            canvas_height: 384,
            canvas_width: 1152,
            dropout_rate: 0.10,
            mask_padding: true,
        }
    }

    /// Small model that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        ViTConfig { embed_dim: 64, heads: 4, te_layers: 2, mlp_dim: 256, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.patch == 0 || self.embed_dim == 0 || self.heads == 0 || self.te_layers == 0 || self.mlp_dim == 0 {
            return bad("patch, embed_dim, heads, te_layers and mlp_dim must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.canvas_height == 0
            || self.canvas_width == 0
            || !self.canvas_height.is_multiple_of(self.patch)
            || !self.canvas_width.is_multiple_of(self.patch)
        {
            return bad(format!("canvas {}x{} is not a positive multiple of patch {}", self.canvas_height, self.canvas_width, self.patch));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn grid_rows(&self) -> usize {
        self.canvas_height / self.patch
    }

    pub fn grid_cols(&self) -> usize {
        self.canvas_width / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// Patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Length of a flattened RGB patch.
    pub fn patch_dim(&self) -> usize {
        Spectrogram::CHANNELS * self.patch * self.patch
    }
}

/// Weights of one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    /// `[d x 3d]`, columns ordered query | key | value, heads contiguous.
    pub qkv_weight: Tensor<T>,
    pub qkv_bias: Tensor<T>,
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub mlp1_weight: Tensor<T>,
    pub mlp1_bias: Tensor<T>,
    pub mlp2_weight: Tensor<T>,
    pub mlp2_bias: Tensor<T>,
}

/// All learnable arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams<T> {
    /// `[3 * patch^2 x d]`; rows follow the channel-major patch flattening
    /// `(channel, y, x)`.
    pub patch_weight: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub cls_token: Tensor<T>,
    /// `[seq_len x d]`, row 0 for the class token.
    pub pos_embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head_ln_gain: Tensor<T>,
    pub head_ln_bias: Tensor<T>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

/// Whether weight decay applies to a parameter array.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// A projection matrix; receives L2 decay.
    Matrix,
    /// Bias, LayerNorm gain/bias, class token or position table.
    Other,
}

impl<T: Scalar> ViTParams<T> {
    /// Arrays in declaration order, the order used by checkpoints and the
    /// optimizer.
    pub fn arrays(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.patch_weight, &self.patch_bias, &self.cls_token, &self.pos_embed];
        for l in &self.layers {
            v.extend([
                &l.ln1_gain,
                &l.ln1_bias,
                &l.qkv_weight,
                &l.qkv_bias,
                &l.out_weight,
                &l.out_bias,
                &l.ln2_gain,
                &l.ln2_bias,
                &l.mlp1_weight,
                &l.mlp1_bias,
                &l.mlp2_weight,
                &l.mlp2_bias,
            ]);
        }
        v.extend([&self.head_ln_gain, &self.head_ln_bias, &self.head_weight, &self.head_bias]);
        v
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.patch_weight, &mut self.patch_bias, &mut self.cls_token, &mut self.pos_embed];
        for l in &mut self.layers {
            v.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.qkv_weight,
                &mut l.qkv_bias,
                &mut l.out_weight,
                &mut l.out_bias,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.mlp1_weight,
                &mut l.mlp1_bias,
                &mut l.mlp2_weight,
                &mut l.mlp2_bias,
            ]);
        }
        v.extend([&mut self.head_ln_gain, &mut self.head_ln_bias, &mut self.head_weight, &mut self.head_bias]);
        v
    }

    /// Names parallel to [`ViTParams::arrays`].
    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["patch.weight", "patch.bias", "cls_token", "pos_embed"].map(String::from).to_vec();
        for i in 0..self.layers.len() {
            for n in [
                "ln1.gain",
                "ln1.bias",
                "qkv.weight",
                "qkv.bias",
                "out.weight",
                "out.bias",
                "ln2.gain",
                "ln2.bias",
                "mlp1.weight",
                "mlp1.bias",
                "mlp2.weight",
                "mlp2.bias",
            ] {
                v.push(format!("layers.{i}.{n}"));
            }
        }
        v.extend(["head.ln.gain", "head.ln.bias", "head.weight", "head.bias"].map(String::from));
        v
    }

    /// Decay classes parallel to [`ViTParams::arrays`].
    pub fn kinds(&self) -> Vec<ParamKind> {
        self.names().iter().map(|n| if n.ends_with(".weight") { ParamKind::Matrix } else { ParamKind::Other }).collect()
    }

    pub fn count(&self) -> usize {
        self.arrays().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ViTParams<U> {
        let arrays = self.arrays().into_iter().map(|t| t.cast()).collect();
        ViTParams::assemble(self.layers.len(), arrays).expect("same layout")
    }

    /// Moves arrays given in declaration order into place.
    pub fn from_arrays(cfg: &ViTConfig, arrays: Vec<Tensor<T>>) -> Result<Self> {
        let layout = param_layout(cfg);
        if arrays.len() != layout.len() {
            return Err(Error::shape(format!("{} arrays, config implies {}", arrays.len(), layout.len())));
        }
        for ((name, shape), t) in layout.iter().zip(&arrays) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!("{name}: shape {:?}, config implies {shape:?}", t.shape())));
            }
        }
        Self::assemble(cfg.te_layers, arrays)
    }

    fn assemble(layers: usize, arrays: Vec<Tensor<T>>) -> Result<Self> {
        if arrays.len() != 8 + 12 * layers {
            return Err(Error::shape(format!("{} arrays for {layers} layers", arrays.len())));
        }
        let mut it = arrays.into_iter();
        let mut next = || it.next().expect("length checked");
        let (patch_weight, patch_bias, cls_token, pos_embed) = (next(), next(), next(), next());
        let layers = (0..layers)
            .map(|_| LayerParams {
                ln1_gain: next(),
                ln1_bias: next(),
                qkv_weight: next(),
                qkv_bias: next(),
                out_weight: next(),
                out_bias: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                mlp1_weight: next(),
                mlp1_bias: next(),
                mlp2_weight: next(),
                mlp2_bias: next(),
            })
            .collect();
        Ok(ViTParams {
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            layers,
            head_ln_gain: next(),
            head_ln_bias: next(),
            head_weight: next(),
            head_bias: next(),
        })
    }

    /// Checks every array against the shapes `cfg` implies.
    pub fn check_shapes(&self, cfg: &ViTConfig) -> Result<()> {
        let layout = param_layout(cfg);
        if layout.len() != self.arrays().len() {
            return Err(Error::shape(format!("{} layers, config has {}", self.layers.len(), cfg.te_layers)));
        }
        for ((name, shape), got) in layout.iter().zip(self.arrays()) {
            if got.shape() != shape.as_slice() {
                return Err(Error::shape(format!("{name}: shape {:?}, config implies {shape:?}", got.shape())));
            }
        }
        Ok(())
    }
}

/// Name and shape of every parameter array in declaration order.
pub fn param_layout(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let (d, m) = (cfg.embed_dim, cfg.mlp_dim);
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("patch.weight".into(), vec![cfg.patch_dim(), d]),
        ("patch.bias".into(), vec![d]),
        ("cls_token".into(), vec![1, d]),
        ("pos_embed".into(), vec![cfg.seq_len(), d]),
    ];
    for i in 0..cfg.te_layers {
        let shapes: [(&str, Vec<usize>); 12] = [
            ("ln1.gain", vec![d]),
            ("ln1.bias", vec![d]),
            ("qkv.weight", vec![d, 3 * d]),
            ("qkv.bias", vec![3 * d]),
            ("out.weight", vec![d, d]),
            ("out.bias", vec![d]),
            ("ln2.gain", vec![d]),
            ("ln2.bias", vec![d]),
            ("mlp1.weight", vec![d, m]),
            ("mlp1.bias", vec![m]),
            ("mlp2.weight", vec![m, d]),
            ("mlp2.bias", vec![d]),
        ];
        v.extend(shapes.into_iter().map(|(n, s)| (format!("layers.{i}.{n}"), s)));
    }
    v.extend([
        ("head.ln.gain".into(), vec![d]),
        ("head.ln.bias".into(), vec![d]),
        ("head.weight".into(), vec![d, cfg.n_classes]),
        ("head.bias".into(), vec![cfg.n_classes]),
    ]);
    v
}

const INIT_STD: f64 = 0.02;

/// Normal draw truncated to two standard deviations.
fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Fresh parameters: truncated-normal projections, normal position table,
/// zero biases and class token, unit LayerNorm gains.
pub fn init_params<T: Scalar>(cfg: &ViTConfig, seed: u64) -> Result<ViTParams<T>> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let arrays = param_layout(cfg)
        .into_iter()
        .map(|(name, shape)| {
            if name.ends_with(".weight") {
                Tensor::from_fn(&shape, |_| T::from_f64(trunc_normal(&mut rng, INIT_STD)))
            } else if name == "pos_embed" {
                Tensor::from_fn(&shape, |_| T::from_f64(INIT_STD * rng.sample::<f64, _>(StandardNormal)))
            } else if name.ends_with(".gain") {
                Tensor::from_fn(&shape, |_| T::ONE)
            } else {
                Tensor::zeros(&shape)
            }
        })
        .collect();
    ViTParams::from_arrays(cfg, arrays)
}

/// Learnable scalars implied by `cfg`.
pub fn count_params(cfg: &ViTConfig) -> usize {
    let d = cfg.embed_dim;
    let embed = cfg.patch_dim() * d + d + d + cfg.seq_len() * d;
    let layer = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * cfg.mlp_dim + cfg.mlp_dim) + (cfg.mlp_dim * d + d);
    let head = 2 * d + d * cfg.n_classes + cfg.n_classes;
    embed + cfg.te_layers * layer + head
}

/// Multiply-accumulates of one forward pass under [`MAC_CONVENTION`].
pub fn count_macs(cfg: &ViTConfig) -> u64 {
    let (p, d, m) = (cfg.seq_len() as u64, cfg.embed_dim as u64, cfg.mlp_dim as u64);
    let patches = cfg.n_patches() as u64 * cfg.patch_dim() as u64 * d;
    let layer = p * d * 3 * d + 2 * p * p * d + p * d * d + 2 * p * d * m;
    patches + cfg.te_layers as u64 * layer + d * cfg.n_classes as u64
}

/// A spectrogram placed on the model canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedInput {
    /// `[canvas_height x canvas_width]` grey plane; all three colour
    /// channels of the canvas equal it.
    pub canvas: Vec<f32>,
    pub canvas_height: usize,
    pub canvas_width: usize,
    /// Width of the real content, left-aligned.
    pub content_width: usize,
    pub patch: usize,
    /// One flag per patch in row-major grid order; `true` for real content.
    pub patch_mask: Vec<bool>,
}

impl PaddedInput {
    pub fn valid_patches(&self) -> usize {
        self.patch_mask.iter().filter(|&&v| v).count()
    }

    pub fn grid_cols(&self) -> usize {
        self.canvas_width / self.patch
    }

    /// Grey values of patch `index` flattened row-major (`y`, `x`).
    pub fn patch_pixels(&self, index: usize) -> impl Iterator<Item = f32> + '_ {
        let gc = self.grid_cols();
        let (gy, gx) = (index / gc, index % gc);
        (0..self.patch).flat_map(move |y| {
            let row = (gy * self.patch + y) * self.canvas_width + gx * self.patch;
            self.canvas[row..row + self.patch].iter().copied()
        })
    }
}

/// Left-aligns `img` on a zero canvas and flags the patches it covers.
pub fn pad_and_mask(img: &Spectrogram, cfg: &ViTConfig) -> Result<PaddedInput> {
    cfg.validate()?;
    if img.height != cfg.canvas_height {
        return Err(Error::shape(format!("image height {} vs canvas {}", img.height, cfg.canvas_height)));
    }
    if img.width == 0 || img.width > cfg.canvas_width || !img.width.is_multiple_of(cfg.patch) {
        return Err(Error::shape(format!("image width {} must be a positive multiple of {} up to {}", img.width, cfg.patch, cfg.canvas_width)));
    }
    if img.gray.len() != img.height * img.width {
        return Err(Error::shape("spectrogram pixel count does not match its shape"));
    }
    let mut canvas = vec![0.0f32; cfg.canvas_height * cfg.canvas_width];
    for (r, row) in img.gray.chunks(img.width).enumerate() {
        canvas[r * cfg.canvas_width..r * cfg.canvas_width + img.width].copy_from_slice(row);
    }
    let valid_cols = img.width / cfg.patch;
    let patch_mask = (0..cfg.n_patches()).map(|i| i % cfg.grid_cols() < valid_cols).collect();
    Ok(PaddedInput {
        canvas,
        canvas_height: cfg.canvas_height,
        canvas_width: cfg.canvas_width,
        content_width: img.width,
        patch: cfg.patch,
        patch_mask,
    })
}
