use rand_chacha::ChaCha8Rng;

use super::{PaddedInput, ViTConfig, ViTParams};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, seeded.
    Train,
    Eval,
}

/// Post-softmax attention of every layer and head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps<T> {
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    /// Patch index of each token; `None` for the class token at 0.
    pub token_patch: Vec<Option<usize>>,
    /// `[layers x heads x tokens x tokens]`, query-major.
    pub data: Vec<T>,
}

impl<T: Scalar> AttentionMaps<T> {
    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[T] {
        let t = self.tokens;
        let start = ((layer * self.heads + head) * t + query) * t;
        &self.data[start..start + t]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T> {
    pub logits: Vec<T>,
    pub attention: Option<AttentionMaps<T>>,
}

impl<T: Scalar> ModelOutput<T> {
    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Token subset and key mask for one pass.
struct Plan {
    patches: Vec<usize>,
    key_mask: Option<Vec<bool>>,
}

impl Plan {
    /// Every canvas patch, with padded keys masked when configured.
    fn full(input: &PaddedInput, cfg: &ViTConfig) -> Self {
        let patches = (0..cfg.n_patches()).collect();
        let key_mask = cfg.mask_padding.then(|| std::iter::once(true).chain(input.patch_mask.iter().copied()).collect());
        Plan { patches, key_mask }
    }

    /// Only the real patches. With masking on, padded tokens can influence
    /// nothing that reaches the class token, so dropping them gives the same
    /// logits at a fraction of the cost.
    fn compact(input: &PaddedInput, cfg: &ViTConfig) -> Self {
        if !cfg.mask_padding {
            return Self::full(input, cfg);
        }
        let patches = (0..cfg.n_patches()).filter(|&i| input.patch_mask[i]).collect();
        Plan { patches, key_mask: None }
    }
}

fn check_input(input: &PaddedInput, cfg: &ViTConfig) -> Result<()> {
    cfg.validate()?;
    if input.canvas_height != cfg.canvas_height
        || input.canvas_width != cfg.canvas_width
        || input.patch != cfg.patch
        || input.patch_mask.len() != cfg.n_patches()
        || input.canvas.len() != cfg.canvas_height * cfg.canvas_width
    {
        return Err(Error::shape("padded input does not match the model canvas"));
    }
    if input.valid_patches() == 0 {
        return Err(Error::invalid("input has no real patches"));
    }
    Ok(())
}

struct Built {
    logits: Var,
    attention: Vec<Var>,
}

/// Records the parameters on `g`; trainable ones keep gradients.
fn register<T: Scalar>(g: &mut Graph<T>, params: &ViTParams<T>, trainable: bool) -> Vec<Var> {
    params.arrays().into_iter().map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) }).collect()
}

fn build<T: Scalar>(
    g: &mut Graph<T>,
    pv: &[Var],
    cfg: &ViTConfig,
    input: &PaddedInput,
    plan: &Plan,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Built> {
    let d = cfg.embed_dim;
    let pp = cfg.patch * cfg.patch;
    let n = plan.patches.len();

    // The three colour planes are identical, so projecting the grey patch
    // with the channel-summed weight equals projecting the RGB patch.
    let mut pixels = Vec::with_capacity(n * pp);
    for &p in &plan.patches {
        pixels.extend(input.patch_pixels(p).map(|v| T::from_f64(v as f64)));
    }
    let x = g.constant(Tensor::new(vec![n, pp], pixels)?);
    let w0 = g.slice_rows(pv[0], 0, pp)?;
    let w1 = g.slice_rows(pv[0], pp, pp)?;
    let w2 = g.slice_rows(pv[0], 2 * pp, pp)?;
    let w01 = g.add(w0, w1)?;
    let w = g.add(w01, w2)?;
    let emb = g.matmul(x, w)?;
    let emb = g.add_row(emb, pv[1])?;
    let tokens = g.concat_rows(&[pv[2], emb])?;
    let pos_rows: Vec<usize> = std::iter::once(0).chain(plan.patches.iter().map(|p| p + 1)).collect();
    let pos = g.gather_rows(pv[3], &pos_rows)?;
    let mut h = g.add(tokens, pos)?;
    h = g.dropout(h, cfg.dropout_rate, rng.as_deref_mut())?;

    let hd = cfg.head_dim();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut attention = Vec::new();
    for layer in 0..cfg.te_layers {
        let b = 4 + 12 * layer;
        let a = g.layer_norm(h, pv[b], pv[b + 1])?;
        let qkv = g.matmul(a, pv[b + 2])?;
        let qkv = g.add_row(qkv, pv[b + 3])?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let q = g.slice_cols(qkv, head * hd, hd)?;
            let k = g.slice_cols(qkv, d + head * hd, hd)?;
            let v = g.slice_cols(qkv, 2 * d + head * hd, hd)?;
            let s = g.matmul_t(q, k, false, true)?;
            let s = g.scale(s, scale);
            let p = g.masked_softmax(s, plan.key_mask.as_deref())?;
            attention.push(p);
            heads.push(g.matmul(p, v)?);
        }
        let cat = g.concat_cols(&heads)?;
        let o = g.matmul(cat, pv[b + 4])?;
        let o = g.add_row(o, pv[b + 5])?;
        h = g.add(h, o)?;

        let a = g.layer_norm(h, pv[b + 6], pv[b + 7])?;
        let m = g.matmul(a, pv[b + 8])?;
        let m = g.add_row(m, pv[b + 9])?;
        let m = g.gelu(m);
        let m = g.matmul(m, pv[b + 10])?;
        let m = g.add_row(m, pv[b + 11])?;
        let m = g.dropout(m, cfg.dropout_rate, rng.as_deref_mut())?;
        h = g.add(h, m)?;
    }
    let b = 4 + 12 * cfg.te_layers;
    let cls = g.slice_rows(h, 0, 1)?;
    let cls = g.layer_norm(cls, pv[b], pv[b + 1])?;
    let logits = g.matmul(cls, pv[b + 2])?;
    let logits = g.add_row(logits, pv[b + 3])?;
    Ok(Built { logits, attention })
}

fn run<T: Scalar>(
    input: &PaddedInput,
    params: &ViTParams<T>,
    cfg: &ViTConfig,
    mode: Mode,
    seed: u64,
    plan: Plan,
    want_attention: bool,
) -> Result<ModelOutput<T>> {
    check_input(input, cfg)?;
    let mut g = Graph::new();
    let pv = register(&mut g, params, false);
    let mut rng = rng_from_seed(seed);
    let built = build(&mut g, &pv, cfg, input, &plan, (mode == Mode::Train).then_some(&mut rng))?;
    let logits = g.value(built.logits).data().to_vec();
    let attention = want_attention.then(|| {
        let mut data = Vec::new();
        for &a in &built.attention {
            data.extend_from_slice(g.value(a).data());
        }
        AttentionMaps {
            layers: cfg.te_layers,
            heads: cfg.heads,
            tokens: plan.patches.len() + 1,
            token_patch: std::iter::once(None).chain(plan.patches.iter().map(|&p| Some(p))).collect(),
            data,
        }
    });
    Ok(ModelOutput { logits, attention })
}

/// Forward pass over the complete canvas (all `seq_len` tokens), returning
/// logits and every attention tensor.
pub fn forward<T: Scalar>(input: &PaddedInput, params: &ViTParams<T>, cfg: &ViTConfig, mode: Mode, seed: u64) -> Result<ModelOutput<T>> {
    run(input, params, cfg, mode, seed, Plan::full(input, cfg), true)
}

/// Forward pass that skips padded patches entirely when masking is on.
/// Eval-mode logits equal [`forward`]'s up to rounding.
pub fn forward_compact<T: Scalar>(
    input: &PaddedInput,
    params: &ViTParams<T>,
    cfg: &ViTConfig,
    mode: Mode,
    seed: u64,
    want_attention: bool,
) -> Result<ModelOutput<T>> {
    run(input, params, cfg, mode, seed, Plan::compact(input, cfg), want_attention)
}

/// Cross-entropy of one sample and its gradient for every parameter array,
/// in declaration order. Uses the compact token set.
pub fn loss_and_gradients<T: Scalar>(
    input: &PaddedInput,
    label: usize,
    params: &ViTParams<T>,
    cfg: &ViTConfig,
    mode: Mode,
    seed: u64,
) -> Result<(T, Vec<T>, Vec<Vec<T>>)> {
    check_input(input, cfg)?;
    let mut g = Graph::new();
    let pv = register(&mut g, params, true);
    let mut rng = rng_from_seed(seed);
    let plan = Plan::compact(input, cfg);
    let built = build(&mut g, &pv, cfg, input, &plan, (mode == Mode::Train).then_some(&mut rng))?;
    let loss = g.cross_entropy(built.logits, &[label])?;
    g.backward(loss)?;
    let grads = pv.iter().map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![T::ZERO; g.value(v).len()])).collect();
    Ok((g.value(loss).data()[0], g.value(built.logits).data().to_vec(), grads))
}

/// Attention heatmap over the real image area.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major, values in `[0, 1]`.
    pub data: Vec<f32>,
}

/// Class-token attention of the last layer, averaged over heads, over the
/// real patches, upsampled bilinearly to pixel resolution and min-max
/// normalized. A flat map normalizes to all zeros.
pub fn raw_attention_map<T: Scalar>(attn: &AttentionMaps<T>, input: &PaddedInput) -> Result<Heatmap> {
    if attn.layers == 0 || attn.heads == 0 || attn.token_patch.len() != attn.tokens {
        return Err(Error::shape("empty attention maps"));
    }
    let gc = input.grid_cols();
    let rows = input.canvas_height / input.patch;
    let cols = input.content_width / input.patch;
    let mut grid = vec![f64::NAN; rows * cols];
    let last = attn.layers - 1;
    for (key, patch) in attn.token_patch.iter().enumerate() {
        let Some(p) = *patch else { continue };
        if !input.patch_mask.get(p).copied().unwrap_or(false) {
            continue;
        }
        let (gy, gx) = (p / gc, p % gc);
        let mean = (0..attn.heads).map(|h| attn.row(last, h, 0)[key].to_f64()).sum::<f64>() / attn.heads as f64;
        grid[gy * cols + gx] = mean;
    }
    if grid.iter().any(|v| v.is_nan()) {
        return Err(Error::shape("attention maps do not cover every real patch"));
    }

    let (height, width) = (input.canvas_height, input.content_width);
    let s = input.patch as f64;
    let coord = |i: usize, n: usize| {
        let c = ((i as f64 + 0.5) / s - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(n - 1), c - lo as f64)
    };
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, rows);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, cols);
            let top = grid[y0 * cols + x0] * (1.0 - fx) + grid[y0 * cols + x1] * fx;
            let bottom = grid[y1 * cols + x0] * (1.0 - fx) + grid[y1 * cols + x1] * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    let data = data.iter().map(|&v| if range > 0.0 { ((v - lo) / range) as f32 } else { 0.0 }).collect();
    Ok(Heatmap { height, width, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::Spectrogram;
    use crate::vit::{init_params, pad_and_mask};
    use rand::Rng;

    fn small() -> ViTConfig {
        ViTConfig {
            patch: 8,
            embed_dim: 16,
            heads: 2,
            te_layers: 2,
            mlp_dim: 32,
            n_classes: 3,
            canvas_height: 16,
            canvas_width: 48,
            dropout_rate: 0.1,
            mask_padding: true,
        }
    }

    fn image(width: usize, seed: u64) -> Spectrogram {
        let mut rng = rng_from_seed(seed);
        Spectrogram { gray: (0..16 * width).map(|_| rng.gen::<f32>()).collect(), height: 16, width, duration_s: 0.1, class_id: None, db_floor: 0.0 }
    }

    /// Larger random weights so the test is not dominated by near-zero init.
    fn params(cfg: &ViTConfig) -> ViTParams<f64> {
        let mut p = init_params::<f64>(cfg, 8).unwrap();
        let mut rng = rng_from_seed(99);
        for t in p.arrays_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.3 * (rng.gen::<f64>() - 0.5));
        }
        p
    }

    #[test]
    fn eval_is_deterministic_and_train_differs() {
        let cfg = small();
        let p = params(&cfg);
        let x = pad_and_mask(&image(16, 1), &cfg).unwrap();
        let a = forward(&x, &p, &cfg, Mode::Eval, 1).unwrap();
        let b = forward(&x, &p, &cfg, Mode::Eval, 2).unwrap();
        assert_eq!(a.logits, b.logits);
        let t1 = forward(&x, &p, &cfg, Mode::Train, 5).unwrap();
        let t2 = forward(&x, &p, &cfg, Mode::Train, 5).unwrap();
        assert_eq!(t1.logits, t2.logits);
        assert_ne!(t1.logits, a.logits);
    }

    #[test]
    fn padded_content_cannot_change_logits() {
        let cfg = small();
        let p = params(&cfg);
        let clean = pad_and_mask(&image(16, 2), &cfg).unwrap();
        let mut noisy = clean.clone();
        let mut rng = rng_from_seed(3);
        for r in 0..16 {
            for c in 16..48 {
                noisy.canvas[r * 48 + c] = rng.gen::<f32>() * 5.0;
            }
        }
        let a = forward(&clean, &p, &cfg, Mode::Eval, 0).unwrap();
        let b = forward(&noisy, &p, &cfg, Mode::Eval, 0).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() <= 1e-12);
        }
        let unmasked = ViTConfig { mask_padding: false, ..cfg.clone() };
        let c = forward(&clean, &p, &unmasked, Mode::Eval, 0).unwrap();
        let d = forward(&noisy, &p, &unmasked, Mode::Eval, 0).unwrap();
        assert!(c.logits.iter().zip(&d.logits).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn compact_path_matches_full_path() {
        let cfg = small();
        let p = params(&cfg);
        for w in [8, 16, 48] {
            let x = pad_and_mask(&image(w, w as u64), &cfg).unwrap();
            let a = forward(&x, &p, &cfg, Mode::Eval, 0).unwrap();
            let b = forward_compact(&x, &p, &cfg, Mode::Eval, 0, false).unwrap();
            for (u, v) in a.logits.iter().zip(&b.logits) {
                assert!((u - v).abs() <= 1e-10, "width {w}");
            }
            let (_, logits, _) = loss_and_gradients(&x, 0, &p, &cfg, Mode::Eval, 0).unwrap();
            assert_eq!(logits, b.logits);
        }
    }

    #[test]
    fn attention_rows_are_masked_distributions() {
        let cfg = small();
        let p = params(&cfg).cast::<f32>();
        let x = pad_and_mask(&image(16, 4), &cfg).unwrap();
        let out = forward(&x, &p, &cfg, Mode::Eval, 0).unwrap();
        let attn = out.attention.unwrap();
        assert_eq!(attn.tokens, cfg.seq_len());
        assert_eq!(attn.token_patch[0], None);
        for l in 0..attn.layers {
            for h in 0..attn.heads {
                for q in 0..attn.tokens {
                    let row = attn.row(l, h, q);
                    let s: f32 = row.iter().sum();
                    assert!((s - 1.0).abs() <= 1e-5);
                    for (k, &w) in row.iter().enumerate().skip(1) {
                        if !x.patch_mask[k - 1] {
                            assert_eq!(w, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn heatmap_shape_and_flat_case() {
        let cfg = small();
        let p = params(&cfg);
        let x = pad_and_mask(&image(16, 5), &cfg).unwrap();
        let attn = forward(&x, &p, &cfg, Mode::Eval, 0).unwrap().attention.unwrap();
        let map = raw_attention_map(&attn, &x).unwrap();
        assert_eq!((map.height, map.width), (16, 16));
        assert!(map.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(map.data.contains(&1.0) && map.data.contains(&0.0));

        let mut flat = attn.clone();
        flat.data.iter_mut().for_each(|v| *v = 0.25);
        let map = raw_attention_map(&flat, &x).unwrap();
        assert!(map.data.iter().all(|&v| v == 0.0));

        let compact = forward_compact(&x, &p, &cfg, Mode::Eval, 0, true).unwrap().attention.unwrap();
        let cmap = raw_attention_map(&compact, &x).unwrap();
        let full = raw_attention_map(&attn, &x).unwrap();
        for (a, b) in cmap.data.iter().zip(&full.data) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn sampled_gradients_match_finite_differences() {
        let cfg = small();
        let p = params(&cfg);
        let x = pad_and_mask(&image(32, 6), &cfg).unwrap();
        let (_, _, grads) = loss_and_gradients(&x, 2, &p, &cfg, Mode::Train, 7).unwrap();
        let h = 1e-5;
        let loss = |q: &ViTParams<f64>| loss_and_gradients(&x, 2, q, &cfg, Mode::Train, 7).unwrap().0;
        let n_arrays = p.arrays().len();
        for a in 0..n_arrays {
            let len = p.arrays()[a].len();
            for e in [0, len / 2, len - 1] {
                let mut plus = p.clone();
                plus.arrays_mut()[a].data_mut()[e] += h;
                let mut minus = p.clone();
                minus.arrays_mut()[a].data_mut()[e] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grads[a][e];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-5, "{} [{e}]: analytic {an} fd {fd}", p.names()[a]);
            }
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let cfg = small();
        let p = params(&cfg);
        let x = pad_and_mask(&image(16, 1), &cfg).unwrap();
        let other = ViTConfig { canvas_width: 64, ..cfg.clone() };
        assert!(forward(&x, &p, &other, Mode::Eval, 0).is_err());
        assert!(loss_and_gradients(&x, 3, &p, &cfg, Mode::Eval, 0).is_err());
    }
}
