//! Deterministic mini-batch training: batching over samples and views,
//! distribution supervision (or MSE in the regression ablation), a
//! cross-modal contrastive term, Adam updates, content-grouped splits, and
//! resumable checkpoints.

mod adam;
mod checkpoint;
mod kfold;

pub use adam::{adam_step, adam_update, AdamHyper, AdamState};
pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_bytes, save_checkpoint, TrainProgress,
    CKPT_MAGIC, CKPT_VERSION,
};
pub use kfold::kfold_split;

use std::path::Path;

use thiserror::Error;

use crate::alignment::AlignError;
use crate::diffcore::{DiffError, NdArray, Tape, Var};
use crate::evaluation::{evaluate, EvalError, EvalReport};
use crate::losses::{
    contrastive_loss_t, emd_loss_t, quantile_loss_t, total_loss_t, LossError, LossWeights,
};
use crate::model::{
    patches_from_views, ModelConfig, ModelError, QualityModel, SamplePatches, VarRegistry,
};
use crate::pointcloud::CorpusSample;
use crate::projection::{auto_splat_radius, render_views, CropMode, ProjError, ViewSet};
use crate::seeding::derive_seed2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least {k} references for {k}-fold splitting, found {references}")]
    TooFewReferences { references: usize, k: usize },
    #[error("empty training split")]
    EmptySplit,
    #[error("bad magic in checkpoint")]
    BadMagic,
    #[error("checkpoint was written under a different configuration")]
    HashMismatch,
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Proj(#[from] ProjError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub exclude_positive: bool,
    pub thetas: Vec<f64>,
    pub views: usize,
    pub render_size: usize,
    /// 0 selects a radius from the render size and point count.
    pub splat_radius: usize,
    pub crop: usize,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 30,
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            seed: 7,
            weights: LossWeights::default(),
            exclude_positive: false,
            thetas: vec![0.25, 0.5, 0.75],
            views: 6,
            render_size: 256,
            splat_radius: 0,
            crop: 64,
            folds: 5,
        }
    }
}

/// Rendered views of corpus samples, computed once per sample and reused
/// across epochs and folds.
pub struct ViewCache {
    views: usize,
    render_size: usize,
    splat_radius: usize,
    slots: Vec<Option<ViewSet>>,
}

impl ViewCache {
    pub fn new(corpus_len: usize, tcfg: &TrainConfig) -> Self {
        Self {
            views: tcfg.views,
            render_size: tcfg.render_size,
            splat_radius: tcfg.splat_radius,
            slots: vec![None; corpus_len],
        }
    }

    pub fn get(
        &mut self,
        corpus: &[CorpusSample],
        idx: usize,
    ) -> Result<&ViewSet, TrainError> {
        if self.slots[idx].is_none() {
            let sample = &corpus[idx];
            let radius = if self.splat_radius == 0 {
                auto_splat_radius(self.render_size, sample.cloud.len())
            } else {
                self.splat_radius
            };
            let set = render_views(
                &sample.cloud,
                self.views,
                self.render_size,
                self.render_size,
                radius,
            )?;
            self.slots[idx] = Some(set);
        }
        Ok(self.slots[idx].as_ref().expect("just rendered"))
    }
}

/// One optimization step of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// Distribution term; holds the MSE term when the text branch is off.
    pub l_emd: f64,
    pub l_quan: f64,
    pub l_con: f64,
    pub total: f64,
}

/// Finished (or checkpoint-resumed) training run.
pub struct TrainOutcome {
    pub model: QualityModel,
    pub adam: AdamState,
    pub trace: Vec<StepRecord>,
    /// Epoch with the lowest mean training loss, and the state back then.
    pub best_epoch: usize,
    pub best_model: QualityModel,
    pub best_adam: AdamState,
}

/// State to continue a run from a loaded checkpoint.
pub struct ResumePoint {
    pub model: QualityModel,
    pub adam: AdamState,
    pub start_epoch: usize,
}

fn stack_batch(per_sample: &[SamplePatches], color: bool) -> Result<Option<NdArray>, DiffError> {
    let first = match per_sample.first() {
        Some(p) => p,
        None => return Ok(None),
    };
    let template = if color { &first.color } else { &first.depth };
    let Some(template) = template else {
        return Ok(None);
    };
    let (m, n, d) = (
        template.shape()[0],
        template.shape()[1],
        template.shape()[2],
    );
    let b = per_sample.len();
    let mut data = Vec::with_capacity(b * m * n * d);
    for p in per_sample {
        let t = if color { &p.color } else { &p.depth };
        data.extend_from_slice(t.as_ref().expect("uniform batch").data());
    }
    NdArray::from_vec(vec![b * m, n, d], data).map(Some)
}

/// Ascending-anchor view of the configured quality scale.
fn ascending_anchors(q: &[f64]) -> (Vec<f64>, bool) {
    if q.len() >= 2 && q[0] > q[1] {
        (q.iter().rev().cloned().collect(), true)
    } else {
        (q.to_vec(), false)
    }
}

/// Runs (or continues) the training loop over `train_idx`. Deterministic:
/// the same seeds produce bit-identical traces and final parameters, and the
/// per-sample crop streams depend only on `(seed, sample_id, epoch)`, never
/// on batch composition.
pub fn train(
    model_cfg: &ModelConfig,
    tcfg: &TrainConfig,
    corpus: &[CorpusSample],
    train_idx: &[usize],
    cache: &mut ViewCache,
    resume: Option<ResumePoint>,
) -> Result<TrainOutcome, TrainError> {
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let (mut model, mut adam, start_epoch) = match resume {
        Some(r) => (r.model, r.adam, r.start_epoch),
        None => {
            let model = QualityModel::init(model_cfg.clone())?;
            let adam = AdamState::init(&model);
            (model, adam, 0)
        }
    };
    let hyper = AdamHyper::new(tcfg.learning_rate, tcfg.weight_decay);
    let (anchors_asc, reversed) = ascending_anchors(&model.config.levels.q);

    let mut trace = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = start_epoch;
    let mut best_model = model.clone();
    let mut best_adam = adam.clone();

    for epoch in start_epoch..tcfg.epochs {
        let mut order = train_idx.to_vec();
        shuffle_indices(&mut order, derive_seed2(tcfg.seed, 0xE0, epoch as u64));
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0usize;
        for (step, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let record = train_step(
                &mut model,
                &mut adam,
                &hyper,
                tcfg,
                corpus,
                batch,
                cache,
                epoch,
                step,
                &anchors_asc,
                reversed,
            )?;
            epoch_total += record.total;
            epoch_steps += 1;
            trace.push(record);
        }
        let mean_total = epoch_total / epoch_steps.max(1) as f64;
        if mean_total < best_loss {
            best_loss = mean_total;
            best_epoch = epoch;
            best_model = model.clone();
            best_adam = adam.clone();
        }
    }
    Ok(TrainOutcome {
        model,
        adam,
        trace,
        best_epoch,
        best_model,
        best_adam,
    })
}

/// Fisher-Yates with a dedicated stream, independent of the rand crate's
/// shuffle implementation details.
fn shuffle_indices(v: &mut [usize], seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut QualityModel,
    adam: &mut AdamState,
    hyper: &AdamHyper,
    tcfg: &TrainConfig,
    corpus: &[CorpusSample],
    batch: &[usize],
    cache: &mut ViewCache,
    epoch: usize,
    step: usize,
    anchors_asc: &[f64],
    reversed: bool,
) -> Result<StepRecord, TrainError> {
    let b = batch.len();
    let m = tcfg.views;
    let patch = model.config.vit.patch_size;

    let mut per_sample = Vec::with_capacity(b);
    for &idx in batch {
        let views = cache.get(corpus, idx)?;
        let crop_seed = derive_seed2(tcfg.seed, corpus[idx].sample_id as u64, epoch as u64);
        per_sample.push(patches_from_views(
            &views.views,
            patch,
            tcfg.crop,
            CropMode::Random,
            crop_seed,
            model.config.use_color,
            model.config.use_depth,
        )?);
    }
    let color = stack_batch(&per_sample, true)?;
    let depth = stack_batch(&per_sample, false)?;

    let t = Tape::new();
    let mut registry = VarRegistry::new();
    let out = model.forward_batch(&t, &mut registry, color.as_ref(), depth.as_ref(), b, m)?;

    // supervision terms
    let (l_emd, l_quan) = if let Some(probs) = out.osd_probs {
        let k = model.config.levels.k();
        let mut emd_sum: Option<Var> = None;
        let mut quan_sum: Option<Var> = None;
        for (bi, &idx) in batch.iter().enumerate() {
            let row = t.narrow(probs, 0, bi, 1)?;
            let row = t.reshape(row, vec![k])?;
            let row_asc = if reversed { t.reverse_lastdim(row)? } else { row };
            let e = emd_loss_t(&t, row_asc, anchors_asc, &corpus[idx].osd_label)?;
            let q = quantile_loss_t(&t, row_asc, anchors_asc, &corpus[idx].osd_label, &tcfg.thetas)?;
            emd_sum = Some(match emd_sum {
                Some(acc) => t.add(acc, e)?,
                None => e,
            });
            quan_sum = Some(match quan_sum {
                Some(acc) => t.add(acc, q)?,
                None => q,
            });
        }
        let scale = 1.0 / b as f64;
        let emd = t.scale(emd_sum.expect("nonempty batch"), scale)?;
        let quan = t.scale(quan_sum.expect("nonempty batch"), scale)?;
        (emd, quan)
    } else {
        // regression ablation: MSE against the oracle score
        let scores = out.reg_scores.expect("one head is always active");
        let targets: Vec<f64> = batch.iter().map(|&i| corpus[i].true_score).collect();
        let tv = t.constant(NdArray::from_vec(vec![b, 1], targets)?);
        let diff = t.sub(scores, tv)?;
        let sq = t.mul(diff, diff)?;
        let mse = t.mean_all(sq)?;
        let zero = t.constant(NdArray::scalar(0.0));
        (mse, zero)
    };

    let contrastive = match (&out.color_tokens, &out.depth_tokens) {
        (Some(ct), Some(dt)) if tcfg.weights.beta > 0.0 && b * m >= 2 => {
            let n = model.config.vit.tokens();
            let c = model.config.vit.dim;
            let cf = t.reshape(*ct, vec![b * m, n * c])?;
            let df = t.reshape(*dt, vec![b * m, n * c])?;
            Some(contrastive_loss_t(
                &t,
                cf,
                df,
                tcfg.weights.tau1,
                tcfg.exclude_positive,
            )?)
        }
        _ => None,
    };

    let total = total_loss_t(&t, l_emd, l_quan, contrastive, &tcfg.weights)?;
    let record = StepRecord {
        epoch,
        step,
        l_emd: t.item_of(l_emd),
        l_quan: t.item_of(l_quan),
        l_con: contrastive.map(|v| t.item_of(v)).unwrap_or(0.0),
        total: t.item_of(total),
    };

    let mut grads = t.backward(total)?;
    model.zero_grads();
    registry.apply_gradients(&mut grads, model);
    adam_step(model, adam, hyper);
    Ok(record)
}

/// Center-crop prediction for every index; returns `(sample_id, prediction,
/// oracle score)` triples.
pub fn predict_scores(
    model: &QualityModel,
    tcfg: &TrainConfig,
    corpus: &[CorpusSample],
    indices: &[usize],
    cache: &mut ViewCache,
) -> Result<Vec<(usize, f64, f64)>, TrainError> {
    let patch = model.config.vit.patch_size;
    let mut rows = Vec::with_capacity(indices.len());
    for &idx in indices {
        let views = cache.get(corpus, idx)?;
        let patches = patches_from_views(
            &views.views,
            patch,
            tcfg.crop,
            CropMode::Center,
            0,
            model.config.use_color,
            model.config.use_depth,
        )?;
        let pred = model.predict_sample(&patches)?;
        rows.push((corpus[idx].sample_id, pred.score, corpus[idx].true_score));
    }
    Ok(rows)
}

/// Held-out agreement between predicted and oracle scores.
pub fn evaluate_fold(
    model: &QualityModel,
    tcfg: &TrainConfig,
    corpus: &[CorpusSample],
    test_idx: &[usize],
    cache: &mut ViewCache,
) -> Result<(EvalReport, Vec<(usize, f64, f64)>), TrainError> {
    let rows = predict_scores(model, tcfg, corpus, test_idx, cache)?;
    let pred: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let mos: Vec<f64> = rows.iter().map(|r| r.2).collect();
    Ok((evaluate(&pred, &mos)?, rows))
}

/// Writes the loss trace as `epoch,step,l_emd,l_quan,l_con,total`.
pub fn write_trace(path: &Path, trace: &[StepRecord]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| TrainError::CorruptCheckpoint(e.to_string()))?;
    w.write_record(["epoch", "step", "l_emd", "l_quan", "l_con", "total"])
        .map_err(|e| TrainError::CorruptCheckpoint(e.to_string()))?;
    for r in trace {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            format!("{}", r.l_emd),
            format!("{}", r.l_quan),
            format!("{}", r.l_con),
            format!("{}", r.total),
        ])
        .map_err(|e| TrainError::CorruptCheckpoint(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
