//! Vision-transformer backbone: patch extraction, embeddings, encoder blocks.
//!
//! Layout conventions, fixed for reproducibility:
//! - images are `[H, W, 3]`, row-major, channels interleaved;
//! - patches are scanned row-major over the patch grid and flattened in
//!   (row, col, channel) order;
//! - token sequences are `[N+1, D]` with the class token at row 0.
//!
//! Blocks are pre-norm with residuals: `x <- x + msa(ln(x))` then
//! `x <- x + mlp(ln(x))`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Epsilon for every layer norm in the network.
pub const LN_EPS: f64 = 1e-6;

/// Initialization scale for projection weights and position embeddings.
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Square input size in pixels (H = W).
    pub image_size: usize,
    /// Patch side in pixels; must divide `image_size`.
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    /// Total transformer layers, including the dual-stream layer.
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// Shared layer norm applied after the encoder stack.
    pub final_layer_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        // Desk-scale defaults; the paper-scale geometry (224px, P=32, D=1024,
        // 24 blocks, 16 heads) stays expressible through the same fields.
        BackboneConfig {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 32,
            num_blocks: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            final_layer_norm: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "backbone.patch_size {} must divide backbone.image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.channels != 3 {
            return Err(Error::config(format!(
                "backbone.channels must be 3, got {}",
                self.channels
            )));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "backbone.embed_dim {} must be divisible by backbone.num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_blocks < 2 {
            return Err(Error::config(format!(
                "backbone.num_blocks must be at least 2 (one layer is reserved \
                 for the dual-stream branches), got {}",
                self.num_blocks
            )));
        }
        if self.mlp_hidden() == 0 {
            return Err(Error::config(format!(
                "backbone.mlp_ratio {} too small for embed_dim {}",
                self.mlp_ratio, self.embed_dim
            )));
        }
        Ok(())
    }

    /// Number of patch tokens N = (H/P)^2.
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Flattened patch width P^2 * channels.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Encoder depth: all blocks except the dual-stream layer.
    pub fn encoder_blocks(&self) -> usize {
        self.num_blocks - 1
    }
}

// ── Parameters ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        LayerNormParams {
            gain: Tensor::full(vec![dim], 1.0).with_grad(),
            bias: Tensor::zeros(vec![dim]).with_grad(),
        }
    }
}

/// Patch projection, class token, and position embeddings.
#[derive(Debug, Clone)]
pub struct PatchEmbedder {
    pub projection: Tensor,
    pub proj_bias: Tensor,
    pub class_token: Tensor,
    pub pos_embedding: Tensor,
}

impl PatchEmbedder {
    pub fn init(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let (n, d, pd) = (cfg.num_patches(), cfg.embed_dim, cfg.patch_dim());
        PatchEmbedder {
            projection: trunc_normal(vec![pd, d], INIT_STD, rng).with_grad(),
            proj_bias: Tensor::zeros(vec![d]).with_grad(),
            class_token: Tensor::zeros(vec![1, d]).with_grad(),
            pos_embedding: trunc_normal(vec![n + 1, d], INIT_STD, rng).with_grad(),
        }
    }
}

/// One pre-norm transformer block: multi-head attention + MLP.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl EncoderBlock {
    pub fn init(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.mlp_hidden();
        let proj = |rng: &mut dyn rand::RngCore| trunc_normal(vec![d, d], INIT_STD, rng).with_grad();
        EncoderBlock {
            wq: proj(rng),
            bq: Tensor::zeros(vec![d]).with_grad(),
            wk: proj(rng),
            bk: Tensor::zeros(vec![d]).with_grad(),
            wv: proj(rng),
            bv: Tensor::zeros(vec![d]).with_grad(),
            wo: proj(rng),
            bo: Tensor::zeros(vec![d]).with_grad(),
            mlp_w1: trunc_normal(vec![d, h], INIT_STD, rng).with_grad(),
            mlp_b1: Tensor::zeros(vec![h]).with_grad(),
            mlp_w2: trunc_normal(vec![h, d], INIT_STD, rng).with_grad(),
            mlp_b2: Tensor::zeros(vec![d]).with_grad(),
            ln1: LayerNormParams::identity(d),
            ln2: LayerNormParams::identity(d),
        }
    }
}

/// Truncated-normal tensor: N(0, std) resampled beyond two standard deviations.
pub(crate) fn trunc_normal(shape: Vec<usize>, std: f64, rng: &mut (impl Rng + ?Sized)) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid normal");
    let numel = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            data.push(v);
        }
    }
    Tensor::new(data, shape).expect("shape matches generated data")
}

// ── Tape bindings ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct BoundLayerNorm {
    pub gain: TensorId,
    pub bias: TensorId,
}

impl LayerNormParams {
    pub fn bind(&self, tape: &mut Tape) -> BoundLayerNorm {
        BoundLayerNorm {
            gain: tape.leaf_from(&self.gain),
            bias: tape.leaf_from(&self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundEmbedder {
    pub projection: TensorId,
    pub proj_bias: TensorId,
    pub class_token: TensorId,
    pub pos_embedding: TensorId,
}

impl PatchEmbedder {
    pub fn bind(&self, tape: &mut Tape) -> BoundEmbedder {
        BoundEmbedder {
            projection: tape.leaf_from(&self.projection),
            proj_bias: tape.leaf_from(&self.proj_bias),
            class_token: tape.leaf_from(&self.class_token),
            pos_embedding: tape.leaf_from(&self.pos_embedding),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub mlp_w1: TensorId,
    pub mlp_b1: TensorId,
    pub mlp_w2: TensorId,
    pub mlp_b2: TensorId,
    pub ln1: BoundLayerNorm,
    pub ln2: BoundLayerNorm,
}

impl EncoderBlock {
    pub fn bind(&self, tape: &mut Tape) -> BoundBlock {
        BoundBlock {
            wq: tape.leaf_from(&self.wq),
            bq: tape.leaf_from(&self.bq),
            wk: tape.leaf_from(&self.wk),
            bk: tape.leaf_from(&self.bk),
            wv: tape.leaf_from(&self.wv),
            bv: tape.leaf_from(&self.bv),
            wo: tape.leaf_from(&self.wo),
            bo: tape.leaf_from(&self.bo),
            mlp_w1: tape.leaf_from(&self.mlp_w1),
            mlp_b1: tape.leaf_from(&self.mlp_b1),
            mlp_w2: tape.leaf_from(&self.mlp_w2),
            mlp_b2: tape.leaf_from(&self.mlp_b2),
            ln1: self.ln1.bind(tape),
            ln2: self.ln2.bind(tape),
        }
    }
}

// ── Forward operations ──────────────────────────────────────────────

/// Cuts an `[H, W, C]` image into flattened `P x P` patches.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    if image.shape.len() != 3 {
        return Err(Error::contract(format!(
            "patchify expects an [H, W, C] image, got {:?}",
            image.shape
        )));
    }
    let (h, w, c) = (image.shape[0], image.shape[1], image.shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!(
            "patch size {patch} must divide image dimensions {h}x{w}"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w * c);
    for pr in 0..ph {
        for pc in 0..pw {
            for r in 0..patch {
                for col in 0..patch {
                    let base = ((pr * patch + r) * w + pc * patch + col) * c;
                    data.extend_from_slice(&image.data[base..base + c]);
                }
            }
        }
    }
    Tensor::new(data, vec![ph * pw, patch * patch * c])
}

/// Inverse of [`patchify`]; reassembles the original image.
pub fn unpatchify(patches: &Tensor, image_size: usize, patch: usize, channels: usize) -> Result<Tensor> {
    let per_side = image_size / patch;
    let expect = vec![per_side * per_side, patch * patch * channels];
    if patches.shape != expect {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            lhs: patches.shape.clone(),
            rhs: expect,
        });
    }
    let mut data = vec![0.0; image_size * image_size * channels];
    for (k, row) in patches.data.chunks_exact(patch * patch * channels).enumerate() {
        let (pr, pc) = (k / per_side, k % per_side);
        let mut it = row.iter();
        for r in 0..patch {
            for col in 0..patch {
                let base = ((pr * patch + r) * image_size + pc * patch + col) * channels;
                for ch in 0..channels {
                    data[base + ch] = *it.next().unwrap();
                }
            }
        }
    }
    Tensor::new(data, vec![image_size, image_size, channels])
}

/// Projects patches and prepends the class token: `z_0 = [cls; X W + b] + E_pos`.
pub fn embed(tape: &mut Tape, patches: TensorId, e: &BoundEmbedder) -> Result<TensorId> {
    let proj = tape.matmul(patches, e.projection)?;
    let proj = tape.add_row(proj, e.proj_bias)?;
    let seq = tape.concat(&[e.class_token, proj], 0)?;
    tape.add(seq, e.pos_embedding)
}

/// Multi-head scaled dot-product self-attention over a `[T, D]` sequence.
pub fn msa(tape: &mut Tape, x: TensorId, blk: &BoundBlock, num_heads: usize) -> Result<TensorId> {
    let d = *tape
        .shape(x)
        .last()
        .ok_or_else(|| Error::contract("msa on empty tensor"))?;
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::config(format!(
            "embed dim {d} not divisible by {num_heads} heads"
        )));
    }
    let head_dim = d / num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = tape.matmul(x, blk.wq)?;
    let q = tape.add_row(q, blk.bq)?;
    let k = tape.matmul(x, blk.wk)?;
    let k = tape.add_row(k, blk.bk)?;
    let v = tape.matmul(x, blk.wv)?;
    let v = tape.add_row(v, blk.bv)?;

    let sizes = vec![head_dim; num_heads];
    let qs = tape.split(q, 1, &sizes)?;
    let ks = tape.split(k, 1, &sizes)?;
    let vs = tape.split(v, 1, &sizes)?;

    let mut ctx = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let kt = tape.transpose(ks[h])?;
        let scores = tape.matmul(qs[h], kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores);
        ctx.push(tape.matmul(attn, vs[h])?);
    }
    let merged = tape.concat(&ctx, 1)?;
    let out = tape.matmul(merged, blk.wo)?;
    tape.add_row(out, blk.bo)
}

fn mlp(tape: &mut Tape, x: TensorId, blk: &BoundBlock) -> Result<TensorId> {
    let h = tape.matmul(x, blk.mlp_w1)?;
    let h = tape.add_row(h, blk.mlp_b1)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, blk.mlp_w2)?;
    tape.add_row(out, blk.mlp_b2)
}

/// One pre-norm block: `x + msa(ln(x))`, then `x + mlp(ln(x))`.
pub fn block_forward(
    tape: &mut Tape,
    x: TensorId,
    blk: &BoundBlock,
    num_heads: usize,
) -> Result<TensorId> {
    let normed = tape.layer_norm(x, blk.ln1.gain, blk.ln1.bias, LN_EPS)?;
    let attended = msa(tape, normed, blk, num_heads)?;
    let x = tape.add(x, attended)?;
    let normed = tape.layer_norm(x, blk.ln2.gain, blk.ln2.bias, LN_EPS)?;
    let expanded = mlp(tape, normed, blk)?;
    tape.add(x, expanded)
}

/// Runs the shared encoder stack (all blocks before the dual-stream layer).
pub fn encoder_forward(
    tape: &mut Tape,
    z0: TensorId,
    blocks: &[BoundBlock],
    num_heads: usize,
) -> Result<TensorId> {
    let mut x = z0;
    for blk in blocks {
        x = block_forward(tape, x, blk, num_heads)?;
    }
    Ok(x)
}
