//! Assembly of the full quality model: two visual branches, prompt-driven
//! textual features, and the similarity/softmax head (or the MLP regression
//! head when the text branch is off), with gradient routing back into the
//! named parameter groups.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::alignment::{
    score_from_osd, similarities_t, AlignError, OpinionScoreDistribution, QualityLevels,
    RegressionHead,
};
use crate::diffcore::{DiffError, Gradients, NdArray, Param, Tape, Var};
use crate::encoders::{
    build_prompts_t, fuse_visual_t, patchify_color, patchify_depth, text_forward_t,
    vit_forward_t, EncoderError, FrozenTextEncoder, InsertPosition, MiniViTConfig, MiniViTParams,
    PromptSet,
};
use crate::projection::{crop_patch, CropMode, ProjError, ViewImage};
use crate::seeding::derive_seed;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("all modality branches are disabled")]
    NoBranches,
    #[error("batch is empty")]
    EmptyBatch,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Proj(#[from] ProjError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// How raw cosine similarities are sharpened before the softmax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleMode {
    /// Multiply by a constant; `Fixed(1.0)` applies the softmax to the raw
    /// cosines.
    Fixed(f64),
    /// A single trainable scale, starting from the given value.
    Learnable(f64),
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub vit: MiniViTConfig,
    pub text_blocks: usize,
    pub text_heads: usize,
    pub context_tokens: usize,
    pub insert_position: InsertPosition,
    pub levels: QualityLevels,
    pub scale_mode: ScaleMode,
    pub use_color: bool,
    pub use_depth: bool,
    pub use_text: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vit: MiniViTConfig::desk_default(),
            text_blocks: 2,
            text_heads: 4,
            context_tokens: 16,
            insert_position: InsertPosition::Middle,
            levels: QualityLevels::default(),
            scale_mode: ScaleMode::Learnable(10.0),
            use_color: true,
            use_depth: true,
            use_text: true,
            seed: 7,
        }
    }
}

/// All trainable and frozen parameter groups of one model instance.
#[derive(Debug, Clone)]
pub struct QualityModel {
    pub config: ModelConfig,
    pub color_vit: MiniViTParams,
    pub depth_vit: MiniViTParams,
    pub prompts: PromptSet,
    pub text_encoder: FrozenTextEncoder,
    pub logit_scale: Param,
    pub reg_head: RegressionHead,
}

impl QualityModel {
    /// Builds a model from the run seed. The adjective table and the text
    /// encoder weights come from fixed internal seeds instead (they stand in
    /// for shared pretrained weights), so they do not vary with the run.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.vit.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let color_vit = MiniViTParams::init(&mut rng, config.vit, 3)?;
        let depth_vit = MiniViTParams::init(&mut rng, config.vit, 1)?;
        let c = config.vit.dim;
        let prompts = PromptSet::init(
            &mut rng,
            config.context_tokens,
            c,
            config.levels.k(),
            config.insert_position,
        );
        let text_encoder = FrozenTextEncoder::init(
            c,
            config.text_heads,
            config.text_blocks,
            config.context_tokens + 1,
            c,
        );
        let reg_head = RegressionHead::init(&mut rng, c);
        let logit_scale = match config.scale_mode {
            ScaleMode::Fixed(v) => Param::frozen(NdArray::scalar(v)),
            ScaleMode::Learnable(v) => Param::trainable(NdArray::scalar(v)),
        };
        Ok(Self {
            config,
            color_vit,
            depth_vit,
            prompts,
            text_encoder,
            logit_scale,
            reg_head,
        })
    }

    /// Enumerates every parameter in a stable order.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Param)) {
        self.color_vit.visit("color_vit", f);
        self.depth_vit.visit("depth_vit", f);
        self.prompts.visit("prompts", f);
        self.text_encoder.visit("text", f);
        f("logit_scale".to_string(), &self.logit_scale);
        f("reg_head.w1".to_string(), &self.reg_head.w1);
        f("reg_head.b1".to_string(), &self.reg_head.b1);
        f("reg_head.w2".to_string(), &self.reg_head.w2);
        f("reg_head.b2".to_string(), &self.reg_head.b2);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        self.color_vit.visit_mut("color_vit", f);
        self.depth_vit.visit_mut("depth_vit", f);
        self.prompts.visit_mut("prompts", f);
        self.text_encoder.visit_mut("text", f);
        f("logit_scale".to_string(), &mut self.logit_scale);
        f("reg_head.w1".to_string(), &mut self.reg_head.w1);
        f("reg_head.b1".to_string(), &mut self.reg_head.b1);
        f("reg_head.w2".to_string(), &mut self.reg_head.w2);
        f("reg_head.b2".to_string(), &mut self.reg_head.b2);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    /// Textual feature matrix `(K, C)` on the tape.
    pub fn text_features_t(
        &self,
        t: &Tape,
        registry: &mut VarRegistry,
    ) -> Result<Var, ModelError> {
        let pool_index = self.prompts.insert_index()?;
        let prompts = {
            let mut bind = registry.binder(t, "prompts");
            build_prompts_t(t, &self.prompts, &mut bind)?
        };
        let mut bind = registry.binder(t, "text");
        Ok(text_forward_t(
            t,
            &self.text_encoder,
            prompts,
            pool_index,
            &mut bind,
        )?)
    }

    /// Full batched forward pass. `color_patches`/`depth_patches` are
    /// `(B*M, N, D)` patch rows covering `b` samples with `m` views each.
    pub fn forward_batch(
        &self,
        t: &Tape,
        registry: &mut VarRegistry,
        color_patches: Option<&NdArray>,
        depth_patches: Option<&NdArray>,
        b: usize,
        m: usize,
    ) -> Result<ForwardOutput, ModelError> {
        if b == 0 || m == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let n = self.config.vit.tokens();
        let c = self.config.vit.dim;

        let color_tokens = match (self.config.use_color, color_patches) {
            (true, Some(patches)) => {
                let x = t.constant(patches.clone());
                let mut bind = registry.binder(t, "color_vit");
                Some(vit_forward_t(t, &self.color_vit, x, &mut bind)?)
            }
            _ => None,
        };
        let depth_tokens = match (self.config.use_depth, depth_patches) {
            (true, Some(patches)) => {
                let x = t.constant(patches.clone());
                let mut bind = registry.binder(t, "depth_vit");
                Some(vit_forward_t(t, &self.depth_vit, x, &mut bind)?)
            }
            _ => None,
        };

        let fused = match (color_tokens, depth_tokens) {
            (Some(ct), Some(dt)) => {
                let cr = t.reshape(ct, vec![b, m * n, c])?;
                let dr = t.reshape(dt, vec![b, m * n, c])?;
                fuse_visual_t(t, cr, dr)?
            }
            (Some(ct), None) => {
                let cr = t.reshape(ct, vec![b, m * n, c])?;
                t.mean_axis(cr, 1)?
            }
            (None, Some(dt)) => {
                let dr = t.reshape(dt, vec![b, m * n, c])?;
                t.mean_axis(dr, 1)?
            }
            (None, None) => return Err(ModelError::NoBranches),
        };

        let osd_probs = if self.config.use_text {
            let text_feats = self.text_features_t(t, registry)?;
            let sims = similarities_t(t, fused, text_feats)?;
            let scaled = match self.config.scale_mode {
                ScaleMode::Fixed(v) => t.scale(sims, v)?,
                ScaleMode::Learnable(_) => {
                    let s = registry.bind(t, "logit_scale", &self.logit_scale);
                    t.mul_scalar_var(sims, s)?
                }
            };
            Some(t.softmax_lastdim(scaled)?)
        } else {
            None
        };

        let reg_scores = if self.config.use_text {
            None
        } else {
            let mut bind = registry.binder(t, "reg_head");
            Some(self.reg_head.forward_t(t, fused, &mut bind)?)
        };

        Ok(ForwardOutput {
            color_tokens,
            depth_tokens,
            fused,
            osd_probs,
            reg_scores,
        })
    }

    /// Pure single-sample prediction from pre-cut patches `(M, N, D)`.
    pub fn predict_sample(&self, patches: &SamplePatches) -> Result<Prediction, ModelError> {
        let t = Tape::new();
        let mut registry = VarRegistry::frozen();
        let m = patches.m;
        let (n, dc) = (self.config.vit.tokens(), patches_dim(&patches.color));
        let color = patches
            .color
            .as_ref()
            .map(|p| p.reshaped(vec![m, n, dc]))
            .transpose()?;
        let dd = patches_dim(&patches.depth);
        let depth = patches
            .depth
            .as_ref()
            .map(|p| p.reshaped(vec![m, n, dd]))
            .transpose()?;
        let out = self.forward_batch(
            &t,
            &mut registry,
            color.as_ref(),
            depth.as_ref(),
            1,
            m,
        )?;
        let fused = t.value_cloned(out.fused).reshaped(vec![self.config.vit.dim])?;
        if let Some(probs) = out.osd_probs {
            let row = t.value_cloned(probs).into_data();
            let osd = OpinionScoreDistribution::new(row, self.config.levels.q.clone())?;
            let score = score_from_osd(&osd, &self.config.levels)?;
            Ok(Prediction {
                osd: Some(osd),
                score,
                fused,
            })
        } else {
            let score = t.value_cloned(out.reg_scores.expect("one head is always active")).item();
            Ok(Prediction {
                osd: None,
                score,
                fused,
            })
        }
    }
}

fn patches_dim(p: &Option<NdArray>) -> usize {
    p.as_ref().map(|a| *a.shape().last().unwrap()).unwrap_or(1)
}

/// Output handles of a batched forward pass.
pub struct ForwardOutput {
    /// `(B*M, N, C)` per-view color tokens, when the color branch ran.
    pub color_tokens: Option<Var>,
    /// `(B*M, N, C)` per-view depth tokens, when the depth branch ran.
    pub depth_tokens: Option<Var>,
    /// `(B, C)` fused visual features.
    pub fused: Var,
    /// `(B, K)` opinion score distributions (text branch).
    pub osd_probs: Option<Var>,
    /// `(B, 1)` scores (regression ablation).
    pub reg_scores: Option<Var>,
}

/// Single-sample prediction.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub osd: Option<OpinionScoreDistribution>,
    pub score: f64,
    pub fused: NdArray,
}

/// Records which tape node each named parameter was bound to, so gradients
/// can be routed back after the backward sweep.
pub struct VarRegistry {
    entries: Vec<(String, Var)>,
    record: bool,
}

impl VarRegistry {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            record: true,
        }
    }

    /// For pure inference: parameters are bound as constants, nothing is
    /// recorded, and no gradients flow.
    pub fn frozen() -> Self {
        Self {
            entries: Vec::new(),
            record: false,
        }
    }

    pub fn bind(&mut self, t: &Tape, name: &str, p: &Param) -> Var {
        if !self.record {
            return t.constant(p.value.clone());
        }
        let v = if p.trainable {
            t.leaf(p.value.clone())
        } else {
            t.constant(p.value.clone())
        };
        self.entries.push((name.to_string(), v));
        v
    }

    /// A binder closure that prefixes names with the group name.
    pub fn binder<'a>(
        &'a mut self,
        t: &'a Tape,
        prefix: &'a str,
    ) -> impl FnMut(&str, &Param) -> Var + 'a {
        move |name, p| self.bind(t, &format!("{prefix}.{name}"), p)
    }

    /// Accumulates the gradients of every recorded trainable parameter into
    /// the model. Parameters bound as constants have no gradient by
    /// construction.
    pub fn apply_gradients(&self, grads: &mut Gradients, model: &mut QualityModel) {
        let mut by_name: HashMap<&str, NdArray> = HashMap::new();
        for (name, var) in &self.entries {
            if let Some(g) = grads.take(*var) {
                by_name.insert(name.as_str(), g);
            }
        }
        model.visit_params_mut(&mut |name, p| {
            if let Some(g) = by_name.remove(name.as_str()) {
                p.accumulate(&g);
            }
        });
        debug_assert!(by_name.is_empty(), "unrouted gradients: {:?}", by_name.keys());
    }
}

impl Default for VarRegistry {
    fn default() -> Self {
        Self::new()
    }
}

/// Crops every view of a sample with a shared window mode and patchifies the
/// color and depth planes. Random windows draw one stream per view from
/// `seed` and the view index. Returns `(M, N, D)` stacks.
pub struct SamplePatches {
    pub color: Option<NdArray>,
    pub depth: Option<NdArray>,
    pub m: usize,
}

pub fn patches_from_views(
    views: &[ViewImage],
    patch_size: usize,
    crop_size: usize,
    mode: CropMode,
    seed: u64,
    want_color: bool,
    want_depth: bool,
) -> Result<SamplePatches, ModelError> {
    let m = views.len();
    let mut color_rows: Vec<NdArray> = Vec::new();
    let mut depth_rows: Vec<NdArray> = Vec::new();
    for view in views {
        let window = crop_patch(
            view,
            crop_size,
            mode,
            derive_seed(seed, view.view_index as u64),
        )?;
        if want_color {
            color_rows.push(patchify_color(&window, patch_size)?);
        }
        if want_depth {
            depth_rows.push(patchify_depth(&window, patch_size)?);
        }
    }
    let stack = |rows: Vec<NdArray>| -> Result<NdArray, DiffError> {
        let (n, d) = (rows[0].shape()[0], rows[0].shape()[1]);
        let mut data = Vec::with_capacity(m * n * d);
        for r in &rows {
            data.extend_from_slice(r.data());
        }
        NdArray::from_vec(vec![m, n, d], data)
    };
    Ok(SamplePatches {
        color: if want_color { Some(stack(color_rows)?) } else { None },
        depth: if want_depth { Some(stack(depth_rows)?) } else { None },
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::PointCloud;
    use crate::projection::render_views;
    use rand::Rng;

    fn tiny_model_config(seed: u64) -> ModelConfig {
        ModelConfig {
            vit: MiniViTConfig {
                image_size: 16,
                patch_size: 8,
                dim: 16,
                blocks: 1,
                heads: 2,
                mlp_ratio: 2.0,
            },
            text_blocks: 1,
            text_heads: 2,
            context_tokens: 4,
            insert_position: InsertPosition::Middle,
            levels: QualityLevels::default(),
            scale_mode: ScaleMode::Learnable(10.0),
            use_color: true,
            use_depth: true,
            use_text: true,
            seed,
        }
    }

    fn random_views(seed: u64, m: usize) -> Vec<ViewImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 400;
        let positions: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let colors: Vec<[u8; 3]> = (0..n)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let cloud = PointCloud::new(positions, colors).unwrap();
        render_views(&cloud, m, 32, 32, 1).unwrap().views
    }

    #[test]
    fn end_to_end_prediction_is_deterministic_and_in_range() {
        let model = QualityModel::init(tiny_model_config(3)).unwrap();
        let views = random_views(5, 6);
        let patches = patches_from_views(&views, 8, 16, CropMode::Center, 0, true, true).unwrap();
        let a = model.predict_sample(&patches).unwrap();
        let b = model.predict_sample(&patches).unwrap();
        assert_eq!(a.score, b.score);
        let osd = a.osd.unwrap();
        let sum: f64 = osd.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(a.score >= 1.0 && a.score <= 5.0);
    }

    #[test]
    fn gradients_reach_context_but_not_frozen_text() {
        let mut model = QualityModel::init(tiny_model_config(4)).unwrap();
        let views = random_views(6, 2);
        let patches =
            patches_from_views(&views, 8, 16, CropMode::Random, 11, true, true).unwrap();
        let t = Tape::new();
        let mut registry = VarRegistry::new();
        let color = patches.color.as_ref().unwrap().reshaped(vec![2, 4, 192]).unwrap();
        let depth = patches.depth.as_ref().unwrap().reshaped(vec![2, 4, 64]).unwrap();
        let out = model
            .forward_batch(&t, &mut registry, Some(&color), Some(&depth), 1, 2)
            .unwrap();
        let probs = out.osd_probs.unwrap();
        // pick a non-uniform functional of the distribution
        let w = t
            .constant(NdArray::from_vec(vec![1, 5], vec![0.9, -0.3, 0.1, 0.7, -0.2]).unwrap());
        let prod = t.mul(probs, w).unwrap();
        let loss = t.mean_all(prod).unwrap();
        let mut grads = t.backward(loss).unwrap();
        model.zero_grads();
        registry.apply_gradients(&mut grads, &mut model);

        let ctx_norm: f64 = model.prompts.context.grad.data().iter().map(|v| v * v).sum();
        assert!(ctx_norm > 0.0, "context tokens must receive gradient");
        // frozen groups stay at zero
        let mut frozen_norm = 0.0;
        model.text_encoder.visit("text", &mut |_, p| {
            frozen_norm += p.grad.data().iter().map(|v| v * v).sum::<f64>();
        });
        assert_eq!(frozen_norm, 0.0);
        let adj_norm: f64 = model.prompts.adjectives.grad.data().iter().map(|v| v * v).sum();
        assert_eq!(adj_norm, 0.0);
        // visual branches train
        let pe_norm: f64 = model.color_vit.patch_embed_w.grad.data().iter().map(|v| v * v).sum();
        assert!(pe_norm > 0.0);
        let scale_norm: f64 = model.logit_scale.grad.data().iter().map(|v| v * v).sum();
        assert!(scale_norm > 0.0);
    }

    #[test]
    fn regression_path_used_when_text_disabled() {
        let mut cfg = tiny_model_config(5);
        cfg.use_text = false;
        let model = QualityModel::init(cfg).unwrap();
        let views = random_views(7, 2);
        let patches = patches_from_views(&views, 8, 16, CropMode::Center, 0, true, true).unwrap();
        let pred = model.predict_sample(&patches).unwrap();
        assert!(pred.osd.is_none());
        assert!(pred.score.is_finite());
    }

    #[test]
    fn single_modality_branches_work() {
        for (use_color, use_depth) in [(true, false), (false, true)] {
            let mut cfg = tiny_model_config(6);
            cfg.use_color = use_color;
            cfg.use_depth = use_depth;
            let model = QualityModel::init(cfg).unwrap();
            let views = random_views(8, 2);
            let patches =
                patches_from_views(&views, 8, 16, CropMode::Center, 0, use_color, use_depth)
                    .unwrap();
            let pred = model.predict_sample(&patches).unwrap();
            assert!(pred.score.is_finite());
        }
    }

    #[test]
    fn same_seed_same_model() {
        let a = QualityModel::init(tiny_model_config(9)).unwrap();
        let b = QualityModel::init(tiny_model_config(9)).unwrap();
        let mut names = Vec::new();
        a.visit_params(&mut |name, p| names.push((name, p.value.clone())));
        let mut identical = true;
        let mut idx = 0;
        b.visit_params(&mut |name, p| {
            if names[idx].0 != name || names[idx].1 != p.value {
                identical = false;
            }
            idx += 1;
        });
        assert!(identical);
        assert_eq!(names.len(), idx);
    }

    #[test]
    fn different_seeds_share_frozen_tables() {
        let a = QualityModel::init(tiny_model_config(1)).unwrap();
        let b = QualityModel::init(tiny_model_config(2)).unwrap();
        assert_eq!(a.prompts.adjectives.value, b.prompts.adjectives.value);
        assert_eq!(a.text_encoder.proj_w.value, b.text_encoder.proj_w.value);
        assert!(a.color_vit.patch_embed_w.value != b.color_vit.patch_embed_w.value);
    }
}
