//! Miniature visual transformers for the color and depth branches, fusion of
//! patch tokens across viewpoints, learnable prompt assembly around fixed
//! quality-adjective embeddings, and the frozen textual encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{DiffError, NdArray, Param, Tape, Var};
use crate::projection::ViewImage;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("bad encoder config: {0}")]
    BadConfig(String),
    #[error("middle insertion needs an even context length, got {0}")]
    OddContextLength(usize),
    #[error("expected image {expected}x{expected}, got {h}x{w}")]
    ImageSize { expected: usize, h: usize, w: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Fixed seeds for the parameter groups that stand in for pretrained,
/// shared-across-experiments weights.
const ADJECTIVE_TABLE_SEED: u64 = 0x5143_4A41_4454_4221;
const TEXT_ENCODER_SEED: u64 = 0x5458_5446_524F_5A4E;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiniViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl MiniViTConfig {
    /// Desk-scale default: 64px images in 8px patches, width 32, two blocks.
    pub fn desk_default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            dim: 32,
            blocks: 2,
            heads: 4,
            mlp_ratio: 4.0,
        }
    }

    /// The full-scale preset (224px, 16px patches, width 768, twelve blocks).
    /// Provided as configuration only; tests run the desk-scale sizes.
    pub fn full_scale() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            dim: 768,
            blocks: 12,
            heads: 12,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(EncoderError::BadConfig(format!(
                "image {} not divisible by patch {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim == 0 || self.dim % self.heads != 0 {
            return Err(EncoderError::BadConfig(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.blocks == 0 || self.mlp_ratio <= 0.0 {
            return Err(EncoderError::BadConfig("need blocks >= 1 and mlp_ratio > 0".into()));
        }
        Ok(())
    }

    /// Patches per image.
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

/// One pre-norm transformer block: attention and MLP sublayers, each behind
/// a layer norm with a residual connection.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gain: Param,
    pub ln1_bias: Param,
    pub qkv_w: Param,
    pub qkv_b: Param,
    pub proj_w: Param,
    pub proj_b: Param,
    pub ln2_gain: Param,
    pub ln2_bias: Param,
    pub mlp_w1: Param,
    pub mlp_b1: Param,
    pub mlp_w2: Param,
    pub mlp_b2: Param,
}

const LN_EPS: f64 = 1e-5;

fn mk(value: NdArray, trainable: bool) -> Param {
    if trainable {
        Param::trainable(value)
    } else {
        Param::frozen(value)
    }
}

impl BlockParams {
    fn init<R: Rng>(rng: &mut R, dim: usize, hidden: usize, trainable: bool) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        let sh = 1.0 / (hidden as f64).sqrt();
        Self {
            ln1_gain: mk(NdArray::filled(&[dim], 1.0), trainable),
            ln1_bias: mk(NdArray::zeros(&[dim]), trainable),
            qkv_w: mk(NdArray::randn(rng, &[dim, 3 * dim], s), trainable),
            qkv_b: mk(NdArray::zeros(&[3 * dim]), trainable),
            proj_w: mk(NdArray::randn(rng, &[dim, dim], s), trainable),
            proj_b: mk(NdArray::zeros(&[dim]), trainable),
            ln2_gain: mk(NdArray::filled(&[dim], 1.0), trainable),
            ln2_bias: mk(NdArray::zeros(&[dim]), trainable),
            mlp_w1: mk(NdArray::randn(rng, &[dim, hidden], s), trainable),
            mlp_b1: mk(NdArray::zeros(&[hidden]), trainable),
            mlp_w2: mk(NdArray::randn(rng, &[hidden, dim], sh), trainable),
            mlp_b2: mk(NdArray::zeros(&[dim]), trainable),
        }
    }

    /// `(G, T, C) -> (G, T, C)`.
    fn forward_t(
        &self,
        t: &Tape,
        x: Var,
        heads: usize,
        bind: &mut dyn FnMut(&str, &Param) -> Var,
    ) -> Result<Var, DiffError> {
        let shape = t.shape_of(x);
        let (g, tok, c) = (shape[0], shape[1], shape[2]);
        let hd = c / heads;

        let ln1 = t.layer_norm(x, bind("ln1_gain", &self.ln1_gain), bind("ln1_bias", &self.ln1_bias), LN_EPS)?;
        let qkv = t.matmul(ln1, bind("qkv_w", &self.qkv_w))?;
        let qkv = t.add_broadcast(qkv, bind("qkv_b", &self.qkv_b))?;
        let split = |start: usize| -> Result<Var, DiffError> {
            let part = t.narrow(qkv, 2, start * c, c)?;
            let part = t.reshape(part, vec![g, tok, heads, hd])?;
            t.permute_axes(part, &[0, 2, 1, 3])
        };
        let q = split(0)?;
        let k = split(1)?;
        let v = split(2)?;
        let scores = t.matmul_nt(q, k)?;
        let probs = t.softmax_scaled_lastdim(scores, 1.0 / (hd as f64).sqrt())?;
        let ctx = t.matmul(probs, v)?;
        let ctx = t.permute_axes(ctx, &[0, 2, 1, 3])?;
        let ctx = t.reshape(ctx, vec![g, tok, c])?;
        let attn = t.matmul(ctx, bind("proj_w", &self.proj_w))?;
        let attn = t.add_broadcast(attn, bind("proj_b", &self.proj_b))?;
        let x = t.add(x, attn)?;

        let ln2 = t.layer_norm(x, bind("ln2_gain", &self.ln2_gain), bind("ln2_bias", &self.ln2_bias), LN_EPS)?;
        let h = t.matmul(ln2, bind("mlp_w1", &self.mlp_w1))?;
        let h = t.add_broadcast(h, bind("mlp_b1", &self.mlp_b1))?;
        let h = t.gelu(h)?;
        let y = t.matmul(h, bind("mlp_w2", &self.mlp_w2))?;
        let y = t.add_broadcast(y, bind("mlp_b2", &self.mlp_b2))?;
        t.add(x, y)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (name, p) in [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("qkv_w", &self.qkv_w),
            ("qkv_b", &self.qkv_b),
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("mlp_w1", &self.mlp_w1),
            ("mlp_b1", &self.mlp_b1),
            ("mlp_w2", &self.mlp_w2),
            ("mlp_b2", &self.mlp_b2),
        ] {
            f(format!("{prefix}.{name}"), p);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (name, p) in [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("qkv_w", &mut self.qkv_w),
            ("qkv_b", &mut self.qkv_b),
            ("proj_w", &mut self.proj_w),
            ("proj_b", &mut self.proj_b),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("mlp_w1", &mut self.mlp_w1),
            ("mlp_b1", &mut self.mlp_b1),
            ("mlp_w2", &mut self.mlp_w2),
            ("mlp_b2", &mut self.mlp_b2),
        ] {
            f(format!("{prefix}.{name}"), p);
        }
    }
}

/// Parameters of one miniature vision transformer branch.
#[derive(Debug, Clone)]
pub struct MiniViTParams {
    pub config: MiniViTConfig,
    pub channels: usize,
    pub patch_embed_w: Param,
    pub patch_embed_b: Param,
    pub class_token: Param,
    pub pos_embed: Param,
    pub blocks: Vec<BlockParams>,
}

impl MiniViTParams {
    pub fn init<R: Rng>(rng: &mut R, config: MiniViTConfig, channels: usize) -> Result<Self, EncoderError> {
        config.validate()?;
        let din = config.patch_size * config.patch_size * channels;
        let n = config.tokens();
        let c = config.dim;
        let blocks = (0..config.blocks)
            .map(|_| BlockParams::init(rng, c, config.mlp_hidden(), true))
            .collect();
        Ok(Self {
            config,
            channels,
            patch_embed_w: Param::trainable(NdArray::randn(rng, &[din, c], 1.0 / (din as f64).sqrt())),
            patch_embed_b: Param::trainable(NdArray::zeros(&[c])),
            class_token: Param::trainable(NdArray::randn(rng, &[c], 0.02)),
            pos_embed: Param::trainable(NdArray::randn(rng, &[n + 1, c], 0.02)),
            blocks,
        })
    }

    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        self.visit("vit", &mut |_, p| total += p.value.len());
        total
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(format!("{prefix}.patch_embed_w"), &self.patch_embed_w);
        f(format!("{prefix}.patch_embed_b"), &self.patch_embed_b);
        f(format!("{prefix}.class_token"), &self.class_token);
        f(format!("{prefix}.pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.patch_embed_w"), &mut self.patch_embed_w);
        f(format!("{prefix}.patch_embed_b"), &mut self.patch_embed_b);
        f(format!("{prefix}.class_token"), &mut self.class_token);
        f(format!("{prefix}.pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i}"), f);
        }
    }
}

/// Flattens the color plane into `(N, P*P*3)` patch rows scaled to `[0, 1]`.
pub fn patchify_color(view: &ViewImage, patch: usize) -> Result<NdArray, EncoderError> {
    patchify(view, patch, 3)
}

/// Flattens the depth plane into `(N, P*P)` patch rows (already in `[0, 1]`).
pub fn patchify_depth(view: &ViewImage, patch: usize) -> Result<NdArray, EncoderError> {
    patchify(view, patch, 1)
}

fn patchify(view: &ViewImage, patch: usize, channels: usize) -> Result<NdArray, EncoderError> {
    if view.height != view.width || view.height % patch != 0 {
        return Err(EncoderError::ImageSize {
            expected: patch,
            h: view.height,
            w: view.width,
        });
    }
    let side = view.height / patch;
    let n = side * side;
    let din = patch * patch * channels;
    let mut data = Vec::with_capacity(n * din);
    for pr in 0..side {
        for pc in 0..side {
            for py in 0..patch {
                for px in 0..patch {
                    let idx = (pr * patch + py) * view.width + pc * patch + px;
                    if channels == 3 {
                        for ch in 0..3 {
                            data.push(view.color[idx * 3 + ch] as f64 / 255.0);
                        }
                    } else {
                        data.push(view.depth[idx] as f64);
                    }
                }
            }
        }
    }
    Ok(NdArray::from_vec(vec![n, din], data)?)
}

/// Batched transformer forward: `(G, N, P*P*ch)` patch rows to `(G, N, C)`
/// output tokens, class token dropped.
pub fn vit_forward_t(
    t: &Tape,
    vit: &MiniViTParams,
    images: Var,
    bind: &mut dyn FnMut(&str, &Param) -> Var,
) -> Result<Var, DiffError> {
    let n = vit.config.tokens();
    let x = t.matmul(images, bind("patch_embed_w", &vit.patch_embed_w))?;
    let x = t.add_broadcast(x, bind("patch_embed_b", &vit.patch_embed_b))?;
    let x = t.prepend_row_broadcast(x, bind("class_token", &vit.class_token))?;
    let mut x = t.add_broadcast(x, bind("pos_embed", &vit.pos_embed))?;
    for (i, block) in vit.blocks.iter().enumerate() {
        let prefix = format!("block{i}");
        x = block.forward_t(t, x, vit.config.heads, &mut |name, p| {
            bind(&format!("{prefix}.{name}"), p)
        })?;
    }
    // all patch tokens, class token dropped
    t.narrow(x, 1, 1, n)
}

/// Single-image forward pass; `patches` is `(N, P*P*ch)`.
pub fn vit_forward(vit: &MiniViTParams, patches: &NdArray) -> Result<NdArray, EncoderError> {
    let n = vit.config.tokens();
    let din = vit.config.patch_size * vit.config.patch_size * vit.channels;
    if patches.shape() != [n, din] {
        return Err(EncoderError::Diff(DiffError::ShapeMismatch {
            op: "vit_forward",
            detail: format!("patches {:?}, expected [{n}, {din}]", patches.shape()),
        }));
    }
    let t = Tape::new();
    let x = t.constant(patches.reshaped(vec![1, n, din])?);
    let out = vit_forward_t(&t, vit, x, &mut |_, p| t.constant(p.value.clone()))?;
    let c = vit.config.dim;
    Ok(t.value_cloned(out).reshaped(vec![n, c])?)
}

/// Mean of `(color + depth)` tokens over both modalities, all patches, and
/// all viewpoints: `(B, M*N, C) x 2 -> (B, C)`.
pub fn fuse_visual_t(t: &Tape, color_tokens: Var, depth_tokens: Var) -> Result<Var, DiffError> {
    let sum = t.add(color_tokens, depth_tokens)?;
    let half = t.scale(sum, 0.5)?;
    t.mean_axis(half, 1)
}

/// Pure fusion of `(M, N, C)` token maps into a `C`-vector.
pub fn fuse_visual(color_tokens: &NdArray, depth_tokens: &NdArray) -> Result<NdArray, EncoderError> {
    if color_tokens.shape() != depth_tokens.shape() || color_tokens.rank() != 3 {
        return Err(EncoderError::Diff(DiffError::ShapeMismatch {
            op: "fuse_visual",
            detail: format!("{:?} vs {:?}", color_tokens.shape(), depth_tokens.shape()),
        }));
    }
    let (m, n, c) = (
        color_tokens.shape()[0],
        color_tokens.shape()[1],
        color_tokens.shape()[2],
    );
    let t = Tape::new();
    let fc = t.constant(color_tokens.reshaped(vec![1, m * n, c])?);
    let fd = t.constant(depth_tokens.reshaped(vec![1, m * n, c])?);
    let fused = fuse_visual_t(&t, fc, fd)?;
    Ok(t.value_cloned(fused).reshaped(vec![c])?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertPosition {
    Begin,
    Middle,
    End,
}

impl InsertPosition {
    pub fn name(self) -> &'static str {
        match self {
            Self::Begin => "begin",
            Self::Middle => "middle",
            Self::End => "end",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "begin" => Some(Self::Begin),
            "middle" => Some(Self::Middle),
            "end" => Some(Self::End),
            _ => None,
        }
    }
}

/// `W` learnable context embeddings shared by all quality levels plus `K`
/// frozen adjective embeddings, one of which is inserted per level.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub context: Param,
    pub adjectives: Param,
    pub insert_position: InsertPosition,
}

impl PromptSet {
    /// Context tokens come from the run seed; the adjective table is drawn
    /// from a fixed internal seed so it is shared across experiments, like
    /// the word embeddings it stands in for.
    pub fn init<R: Rng>(
        rng: &mut R,
        context_tokens: usize,
        dim: usize,
        k: usize,
        insert_position: InsertPosition,
    ) -> Self {
        let context = Param::trainable(NdArray::randn(rng, &[context_tokens, dim], 0.02));
        let mut table_rng = ChaCha8Rng::seed_from_u64(ADJECTIVE_TABLE_SEED);
        let adjectives = Param::frozen(NdArray::randn(&mut table_rng, &[k, dim], 1.0));
        Self {
            context,
            adjectives,
            insert_position,
        }
    }

    pub fn context_tokens(&self) -> usize {
        self.context.value.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.adjectives.value.shape()[0]
    }

    /// Row index the adjective is inserted at.
    pub fn insert_index(&self) -> Result<usize, EncoderError> {
        let w = self.context_tokens();
        Ok(match self.insert_position {
            InsertPosition::Begin => 0,
            InsertPosition::End => w,
            InsertPosition::Middle => {
                if w % 2 != 0 {
                    return Err(EncoderError::OddContextLength(w));
                }
                w / 2
            }
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(format!("{prefix}.context"), &self.context);
        f(format!("{prefix}.adjectives"), &self.adjectives);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.context"), &mut self.context);
        f(format!("{prefix}.adjectives"), &mut self.adjectives);
    }
}

/// Tape form of prompt assembly: `(K, W+1, C)` sequences sharing the context
/// rows, differing only at the inserted adjective row.
pub fn build_prompts_t(
    t: &Tape,
    prompts: &PromptSet,
    bind: &mut dyn FnMut(&str, &Param) -> Var,
) -> Result<Var, EncoderError> {
    let at = prompts.insert_index()?;
    let ctx = bind("context", &prompts.context);
    let adj = bind("adjectives", &prompts.adjectives);
    Ok(t.insert_rows(ctx, adj, at)?)
}

/// The `K` assembled prompt sequences, each `(W+1, C)`.
pub fn build_prompts(prompts: &PromptSet) -> Result<Vec<NdArray>, EncoderError> {
    let t = Tape::new();
    let all = build_prompts_t(&t, prompts, &mut |_, p| t.constant(p.value.clone()))?;
    let (k, rows, c) = {
        let s = t.shape_of(all);
        (s[0], s[1], s[2])
    };
    let value = t.value_cloned(all);
    (0..k)
        .map(|i| {
            Ok(NdArray::from_vec(
                vec![rows, c],
                value.data()[i * rows * c..(i + 1) * rows * c].to_vec(),
            )?)
        })
        .collect()
}

/// A small frozen transformer with a fixed projection; only the context
/// embeddings that pass through it receive gradients.
#[derive(Debug, Clone)]
pub struct FrozenTextEncoder {
    pub dim: usize,
    pub heads: usize,
    pub pos_embed: Param,
    pub blocks: Vec<BlockParams>,
    pub proj_w: Param,
    pub proj_b: Param,
}

impl FrozenTextEncoder {
    /// Weights come from a fixed internal seed: the encoder is identical
    /// across runs and never trains.
    pub fn init(dim: usize, heads: usize, blocks: usize, max_tokens: usize, out_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TEXT_ENCODER_SEED);
        let hidden = dim * 4;
        let blocks = (0..blocks)
            .map(|_| BlockParams::init(&mut rng, dim, hidden, false))
            .collect();
        Self {
            dim,
            heads,
            pos_embed: Param::frozen(NdArray::randn(&mut rng, &[max_tokens, dim], 0.02)),
            blocks,
            proj_w: Param::frozen(NdArray::randn(
                &mut rng,
                &[dim, out_dim],
                1.0 / (dim as f64).sqrt(),
            )),
            proj_b: Param::frozen(NdArray::zeros(&[out_dim])),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(format!("{prefix}.pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
        f(format!("{prefix}.proj_w"), &self.proj_w);
        f(format!("{prefix}.proj_b"), &self.proj_b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i}"), f);
        }
        f(format!("{prefix}.proj_w"), &mut self.proj_w);
        f(format!("{prefix}.proj_b"), &mut self.proj_b);
    }
}

/// `(K, T, C_t)` prompt sequences to `(K, C)` textual features: transformer
/// blocks, the output token at the inserted-adjective position `pool_index`,
/// then the fixed output projection. Pooling at the distinct position keeps
/// the per-level features well separated; a mean over all tokens would be
/// dominated by the shared context rows and collapse the anchors.
pub fn text_forward_t(
    t: &Tape,
    enc: &FrozenTextEncoder,
    prompts: Var,
    pool_index: usize,
    bind: &mut dyn FnMut(&str, &Param) -> Var,
) -> Result<Var, DiffError> {
    let shape = t.shape_of(prompts);
    if shape.len() != 3 || shape[1] != enc.pos_embed.value.shape()[0] || shape[2] != enc.dim {
        return Err(DiffError::ShapeMismatch {
            op: "text_forward",
            detail: format!(
                "prompts {:?}, encoder expects (_, {}, {})",
                shape,
                enc.pos_embed.value.shape()[0],
                enc.dim
            ),
        });
    }
    let mut x = t.add_broadcast(prompts, bind("pos_embed", &enc.pos_embed))?;
    for (i, block) in enc.blocks.iter().enumerate() {
        let prefix = format!("block{i}");
        x = block.forward_t(t, x, enc.heads, &mut |name, p| {
            bind(&format!("{prefix}.{name}"), p)
        })?;
    }
    let picked = t.narrow(x, 1, pool_index, 1)?;
    let k = t.shape_of(picked)[0];
    let pooled = t.reshape(picked, vec![k, enc.dim])?;
    let y = t.matmul(pooled, bind("proj_w", &enc.proj_w))?;
    t.add_broadcast(y, bind("proj_b", &enc.proj_b))
}

/// Feature of a single prompt sequence `(T, C_t)` pooled at `pool_index`.
pub fn text_forward(
    enc: &FrozenTextEncoder,
    prompt: &NdArray,
    pool_index: usize,
) -> Result<NdArray, EncoderError> {
    let (rows, c) = (prompt.shape()[0], prompt.shape()[1]);
    let t = Tape::new();
    let x = t.constant(prompt.reshaped(vec![1, rows, c])?);
    let out = text_forward_t(&t, enc, x, pool_index, &mut |_, p| {
        t.constant(p.value.clone())
    })?;
    let out_dim = enc.proj_w.value.shape()[1];
    Ok(t.value_cloned(out).reshaped(vec![out_dim])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> MiniViTConfig {
        MiniViTConfig {
            image_size: 16,
            patch_size: 8,
            dim: 16,
            blocks: 2,
            heads: 4,
            mlp_ratio: 2.0,
        }
    }

    #[test]
    fn forward_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny_config();
        let vit = MiniViTParams::init(&mut rng, cfg, 3).unwrap();
        let patches = NdArray::randn(&mut rng, &[cfg.tokens(), 8 * 8 * 3], 0.5);
        let out = vit_forward(&vit, &patches).unwrap();
        assert_eq!(out.shape(), &[cfg.tokens(), cfg.dim]);
    }

    #[test]
    fn permuting_patches_and_positions_permutes_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny_config();
        let vit = MiniViTParams::init(&mut rng, cfg, 1).unwrap();
        let n = cfg.tokens();
        let din = 8 * 8;
        let patches = NdArray::randn(&mut rng, &[n, din], 0.5);
        let base = vit_forward(&vit, &patches).unwrap();

        // swap patches 0 and 3 together with their position rows (offset by
        // the class token at row 0)
        let mut swapped = patches.clone();
        for j in 0..din {
            swapped.data_mut().swap(j, 3 * din + j);
        }
        let mut vit2 = vit.clone();
        let c = cfg.dim;
        for j in 0..c {
            vit2.pos_embed.value.data_mut().swap(c + j, 4 * c + j);
        }
        let out = vit_forward(&vit2, &swapped).unwrap();
        for j in 0..c {
            assert!((out.data()[j] - base.data()[3 * c + j]).abs() < 1e-12);
            assert!((out.data()[3 * c + j] - base.data()[j]).abs() < 1e-12);
        }
        for row in [1usize, 2] {
            for j in 0..c {
                assert!((out.data()[row * c + j] - base.data()[row * c + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_inputs_give_identical_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny_config();
        let mut vit = MiniViTParams::init(&mut rng, cfg, 1).unwrap();
        vit.pos_embed.value.data_mut().fill(0.0);
        vit.class_token.value.data_mut().fill(0.0);
        let patches = NdArray::zeros(&[cfg.tokens(), 64]);
        let out = vit_forward(&vit, &patches).unwrap();
        let c = cfg.dim;
        let first = &out.data()[..c];
        for row in 1..cfg.tokens() {
            for j in 0..c {
                assert!((out.data()[row * c + j] - first[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_identical_tokens_is_identity() {
        let v: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let mut data = Vec::new();
        for _ in 0..2 * 4 {
            data.extend_from_slice(&v);
        }
        let tokens = NdArray::from_vec(vec![2, 4, 8], data).unwrap();
        let fused = fuse_visual(&tokens, &tokens).unwrap();
        for (a, b) in fused.data().iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_opposite_tokens_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = NdArray::randn(&mut rng, &[2, 4, 8], 1.0);
        let neg = u.map(|v| -v);
        let fused = fuse_visual(&u, &neg).unwrap();
        for &v in fused.data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_matches_double_loop_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let color = NdArray::randn(&mut rng, &[2, 4, 8], 1.0);
        let depth = NdArray::randn(&mut rng, &[2, 4, 8], 1.0);
        let fused = fuse_visual(&color, &depth).unwrap();
        for j in 0..8 {
            let mut acc = 0.0;
            for m in 0..2 {
                for n in 0..4 {
                    acc += color.data()[(m * 4 + n) * 8 + j] + depth.data()[(m * 4 + n) * 8 + j];
                }
            }
            let want = acc / (2.0 * 2.0 * 4.0);
            assert!((fused.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn prompt_middle_insertion_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prompts = PromptSet::init(&mut rng, 2, 8, 5, InsertPosition::Middle);
        let built = build_prompts(&prompts).unwrap();
        assert_eq!(built.len(), 5);
        for (k, seq) in built.iter().enumerate() {
            assert_eq!(seq.shape(), &[3, 8]);
            assert_eq!(&seq.data()[..8], &prompts.context.value.data()[..8]);
            assert_eq!(
                &seq.data()[8..16],
                &prompts.adjectives.value.data()[k * 8..(k + 1) * 8]
            );
            assert_eq!(&seq.data()[16..], &prompts.context.value.data()[8..]);
        }
    }

    #[test]
    fn prompts_pairwise_differ_in_one_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prompts = PromptSet::init(&mut rng, 4, 8, 5, InsertPosition::Middle);
        let built = build_prompts(&prompts).unwrap();
        let again = build_prompts(&prompts).unwrap();
        assert_eq!(built, again); // deterministic
        for a in 0..5 {
            for b in (a + 1)..5 {
                let mut differing_rows = 0;
                for row in 0..5 {
                    let ra = &built[a].data()[row * 8..(row + 1) * 8];
                    let rb = &built[b].data()[row * 8..(row + 1) * 8];
                    if ra != rb {
                        differing_rows += 1;
                    }
                }
                assert_eq!(differing_rows, 1, "prompts {a} and {b}");
            }
        }
    }

    #[test]
    fn begin_and_end_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let begin = PromptSet::init(&mut rng, 3, 4, 2, InsertPosition::Begin);
        let built = build_prompts(&begin).unwrap();
        assert_eq!(
            &built[0].data()[..4],
            &begin.adjectives.value.data()[..4]
        );
        let end = PromptSet {
            insert_position: InsertPosition::End,
            ..begin.clone()
        };
        let built = build_prompts(&end).unwrap();
        assert_eq!(
            &built[1].data()[12..],
            &end.adjectives.value.data()[4..8]
        );
    }

    #[test]
    fn middle_rejects_odd_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prompts = PromptSet::init(&mut rng, 3, 4, 2, InsertPosition::Middle);
        assert!(matches!(
            build_prompts(&prompts),
            Err(EncoderError::OddContextLength(3))
        ));
    }

    #[test]
    fn text_encoder_is_pure_and_seed_fixed() {
        let enc = FrozenTextEncoder::init(16, 4, 2, 5, 16);
        let enc2 = FrozenTextEncoder::init(16, 4, 2, 5, 16);
        assert_eq!(enc.proj_w.value, enc2.proj_w.value);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let prompt = NdArray::randn(&mut rng, &[5, 16], 0.5);
        let a = text_forward(&enc, &prompt, 2).unwrap();
        let b = text_forward(&enc, &prompt, 2).unwrap();
        assert_eq!(a, b);
        assert!(enc.blocks.iter().all(|b| !b.qkv_w.trainable));
    }

    #[test]
    fn context_perturbation_moves_all_features_adjective_only_its_own() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prompts = PromptSet::init(&mut rng, 4, 16, 3, InsertPosition::Middle);
        let enc = FrozenTextEncoder::init(16, 4, 2, 5, 16);
        let pool = prompts.insert_index().unwrap();
        let features = |ps: &PromptSet| -> Vec<NdArray> {
            build_prompts(ps)
                .unwrap()
                .iter()
                .map(|seq| text_forward(&enc, seq, pool).unwrap())
                .collect()
        };
        let base = features(&prompts);

        let mut ctx_bumped = prompts.clone();
        ctx_bumped.context.value.data_mut()[0] += 0.5;
        let moved = features(&ctx_bumped);
        for (a, b) in base.iter().zip(&moved) {
            assert!(a != b, "context perturbation must move every feature");
        }

        let mut adj_bumped = prompts.clone();
        adj_bumped.adjectives.value.data_mut()[16] += 0.5; // row 1
        let moved = features(&adj_bumped);
        assert_eq!(base[0], moved[0]);
        assert!(base[1] != moved[1]);
        assert_eq!(base[2], moved[2]);
    }

    #[test]
    fn patchify_layout_and_scaling() {
        let mut view = crate::projection::ViewImage {
            height: 16,
            width: 16,
            color: vec![0; 16 * 16 * 3],
            depth: vec![1.0; 16 * 16],
            mask: vec![false; 16 * 16],
            view_index: 0,
        };
        // mark pixel (row 8, col 9) which falls in patch (1, 1)
        let idx = 8 * 16 + 9;
        view.color[idx * 3] = 255;
        view.depth[idx] = 0.25;
        let color = patchify_color(&view, 8).unwrap();
        assert_eq!(color.shape(), &[4, 192]);
        // patch 3 = (pr 1, pc 1); within patch: py 0, px 1, channel 0
        let within = (1usize * 3) + 0;
        assert!((color.data()[3 * 192 + within] - 1.0).abs() < 1e-12);
        let depth = patchify_depth(&view, 8).unwrap();
        assert_eq!(depth.shape(), &[4, 64]);
        assert!((depth.data()[3 * 64 + 1] - 0.25).abs() < 1e-12);
        // everything else at background values
        assert!((depth.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(MiniViTConfig::desk_default().validate().is_ok());
        assert!(MiniViTConfig::full_scale().validate().is_ok());
        let mut bad = tiny_config();
        bad.patch_size = 5;
        assert!(bad.validate().is_err());
        let mut bad = tiny_config();
        bad.heads = 3;
        assert!(bad.validate().is_err());
        assert_eq!(MiniViTConfig::desk_default().tokens(), 64);
    }
}
