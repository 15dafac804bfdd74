//! Source training, style-injected fine-tuning, inference and checkpoints.

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou_raw, BBox};
use crate::datagen::{derive_seed, DatasetHandle};
use crate::error::{PgstError, Result};
use crate::evalkit::evaluate;
use crate::groundnet::{
    load_checkpoint, save_checkpoint, ForwardInput, GradRequest, GroundTruth, GroundingModel, ImageTensor,
    LayerStyle, ModelGrads, ParamGroup, PhraseEmbedding,
};
use crate::prompts::Prompt;
use crate::scalar::{sigmoid, Scalar};
use crate::styleengine::{sample_style, StyleBank};

pub const NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    /// Both encoders are updated.
    Full,
    /// Only the text encoder is updated.
    PromptOnly,
}

impl std::str::FromStr for TuningMode {
    type Err = PgstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "prompt" | "prompt_only" => Ok(Self::PromptOnly),
            other => Err(PgstError::Config(format!("unknown tuning mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tuning_mode: TuningMode,
    pub hook_layer: usize,
    pub seed: u64,
    /// Caps the number of optimizer steps per epoch.
    pub max_steps_per_epoch: Option<usize>,
    /// When false, fine-tuning ignores the bank (used to compare against source training).
    pub inject_styles: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 12,
            batch_size: 8,
            tuning_mode: TuningMode::Full,
            hook_layer: 1,
            seed: 0,
            max_steps_per_epoch: None,
            inject_styles: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(PgstError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(PgstError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(PgstError::Config("lr and weight_decay must be non-negative".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err(PgstError::Config("invalid Adam parameters".into()));
        }
        Ok(())
    }

    fn grad_request(&self) -> GradRequest {
        match self.tuning_mode {
            TuningMode::Full => GradRequest::FULL,
            TuningMode::PromptOnly => GradRequest::TEXT_ONLY,
        }
    }
}

/// AdamW with decoupled weight decay, restricted to some parameter groups.
pub struct AdamW<T> {
    cfg: TrainConfig,
    active: Vec<bool>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(model: &GroundingModel<T>, cfg: &TrainConfig) -> Self {
        let active = model
            .param_groups()
            .into_iter()
            .map(|g| cfg.tuning_mode == TuningMode::Full || g == ParamGroup::TextEncoder)
            .collect();
        let zeros: Vec<Vec<T>> = model.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self { cfg: cfg.clone(), active, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, model: &mut GroundingModel<T>, grads: &ModelGrads<T>) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = T::of(self.cfg.lr);
        let decay = T::of(1.0 - self.cfg.lr * self.cfg.weight_decay);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let (c1t, c2t, eps) = (T::of(c1), T::of(c2), T::of(self.cfg.adam_eps));
        for (i, p) in model.params_mut().into_iter().enumerate() {
            if !self.active[i] {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.tensors[i]);
            for k in 0..p.len() {
                m[k] = b1t * m[k] + ob1 * g[k];
                v[k] = b2t * v[k] + ob2 * g[k] * g[k];
                let mhat = m[k] / c1t;
                let vhat = v[k] / c2t;
                p[k] = p[k] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_loc: f64,
    pub mean_ground: f64,
    /// Source-validation mAP; `None` without a validation set.
    pub val_map50: Option<f64>,
}

/// Selected weights plus training history.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: GroundingModel<T>,
    /// Epoch the weights come from (0 = the initial weights).
    pub epoch: usize,
    pub val_map50: Option<f64>,
    pub history: Vec<EpochRecord>,
    /// Set when training stopped on a non-finite loss.
    pub diverged: Option<String>,
    /// Per-step total loss, for reproducibility checks.
    pub step_losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    val_map50: Option<f64>,
    history: Vec<EpochRecord>,
    diverged: Option<String>,
    #[serde(default)]
    extra: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            epoch: self.epoch,
            val_map50: self.val_map50,
            history: self.history.clone(),
            diverged: self.diverged.clone(),
            extra,
        };
        save_checkpoint(&self.model, &serde_json::to_value(meta)?, path)
    }

    /// Loads weights and training metadata; also accepts bare model files.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (model, meta) = load_checkpoint::<T>(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta).unwrap_or(CheckpointMeta {
            epoch: 0,
            val_map50: None,
            history: Vec::new(),
            diverged: None,
            extra: serde_json::Value::Null,
        });
        Ok((
            Self {
                model,
                epoch: meta.epoch,
                val_map50: meta.val_map50,
                history: meta.history,
                diverged: meta.diverged,
                step_losses: Vec::new(),
            },
            meta.extra,
        ))
    }
}

/// Index of the best validation score; ties go to the earliest entry.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Shared loop of every training stage.
///
/// Visits `train` in a per-epoch shuffled order. With a bank, every batch
/// element gets its own uniformly drawn style injected at the bank's
/// layers. Styles come from a separate RNG stream, so the visiting order
/// does not depend on whether a bank is used.
pub fn train_stage<T: Scalar>(
    model: &GroundingModel<T>,
    train: &DatasetHandle<T>,
    val: &DatasetHandle<T>,
    prompt: &Prompt,
    bank: Option<&StyleBank<T>>,
    cfg: &TrainConfig,
) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(PgstError::InvalidInput("training set is empty".into()));
    }
    if prompt.len() != train.classes.len() {
        return Err(PgstError::InvalidInput(format!(
            "prompt has {} phrases but the dataset has {} classes",
            prompt.len(),
            train.classes.len()
        )));
    }
    let mut model = model.clone();
    let mut opt = AdamW::new(&model, cfg);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "order"));
    let mut style_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "style"));
    let request = cfg.grad_request();
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = Checkpoint {
        model: model.clone(),
        epoch: 0,
        val_map50: None,
        history: Vec::new(),
        diverged: None,
        step_losses: Vec::new(),
    };
    let mut best_score: Option<f64> = None;
    let mut history = Vec::new();
    let mut step_losses = Vec::new();

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut sum, mut sum_loc, mut sum_ground, mut steps, mut seen) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps_per_epoch.is_some_and(|m| steps >= m) {
                break;
            }
            let phrases = model.encode_prompt(prompt)?;
            let mut grads = ModelGrads::zeros_like(&model);
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &train.samples[i];
                let styles: Vec<LayerStyle<T>> = match bank {
                    Some(b) => sample_style(b, &mut style_rng)?.layer_styles(b.hook_layer),
                    None => Vec::new(),
                };
                let gt = GroundTruth { boxes: &s.boxes, labels: &s.labels };
                let out = match model.objective(ForwardInput::Image(&s.image), gt, &phrases, &styles, request) {
                    Ok(o) => o,
                    Err(PgstError::Diverged { loss, .. }) => {
                        let msg = format!("non-finite loss {loss} at epoch {epoch}, step {steps}");
                        warn!("{msg}; keeping the last good checkpoint");
                        best.diverged = Some(msg);
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                batch_loss += out.loss.total;
                sum_loc += out.loss.loc;
                sum_ground += out.loss.ground;
                grads.add_assign(out.model_grads.as_ref().expect("model gradients requested"));
            }
            grads.scale(T::one() / T::of(batch.len() as f64));
            opt.step(&mut model, &grads);
            if !model.is_finite() {
                let msg = format!("non-finite weights at epoch {epoch}, step {steps}");
                warn!("{msg}; keeping the last good checkpoint");
                best.diverged = Some(msg);
                break 'epochs;
            }
            sum += batch_loss;
            seen += batch.len();
            steps += 1;
            step_losses.push(batch_loss / batch.len() as f64);
        }
        let n = seen.max(1) as f64;
        let val_map50 = if val.is_empty() { None } else { Some(evaluate(&model, val, prompt)?.map50) };
        info!(
            "epoch {epoch}: loss {:.4} (loc {:.4}, ground {:.4}) val map50 {}",
            sum / n,
            sum_loc / n,
            sum_ground / n,
            val_map50.map_or("-".into(), |v| format!("{v:.4}"))
        );
        history.push(EpochRecord {
            epoch,
            steps,
            mean_loss: sum / n,
            mean_loc: sum_loc / n,
            mean_ground: sum_ground / n,
            val_map50,
        });
        // Without validation data the latest epoch wins.
        let score = val_map50.unwrap_or(epoch as f64);
        if best_score.is_none_or(|b| score > b) {
            best_score = Some(score);
            best.model = model.clone();
            best.epoch = epoch;
            best.val_map50 = val_map50;
        }
    }
    best.history = history;
    best.step_losses = step_losses;
    Ok(best)
}

/// Full-model training on the source domain with the source prompt.
pub fn train_source_aug<T: Scalar>(
    model: &GroundingModel<T>,
    train: &DatasetHandle<T>,
    val: &DatasetHandle<T>,
    prompt_s: &Prompt,
    cfg: &TrainConfig,
) -> Result<Checkpoint<T>> {
    train_stage(model, train, val, prompt_s, None, cfg)
}

/// Fine-tuning on source images restyled with bank styles, using the target prompt.
pub fn finetune_with_pgst<T: Scalar>(
    model: &GroundingModel<T>,
    train: &DatasetHandle<T>,
    val: &DatasetHandle<T>,
    prompt_t: &Prompt,
    bank: &StyleBank<T>,
    cfg: &TrainConfig,
) -> Result<Checkpoint<T>> {
    if bank.is_empty() {
        return Err(PgstError::InvalidInput("style bank is empty".into()));
    }
    bank.validate()?;
    if bank.hook_layer != cfg.hook_layer {
        return Err(PgstError::Config(format!(
            "bank was fitted at layer {} but training hooks layer {}",
            bank.hook_layer, cfg.hook_layer
        )));
    }
    let want = model.level_channels(bank.hook_layer)?;
    if bank.channels() != Some(want) {
        return Err(PgstError::Shape(format!("bank styles have {:?} channels, layer has {want}", bank.channels())));
    }
    train_stage(model, train, val, prompt_t, cfg.inject_styles.then_some(bank), cfg)
}

/// One detection: box, class (phrase index) and score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// Greedy per-class non-maximum suppression; output sorted by score.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal).then(a.class.cmp(&b.class)));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep.iter().all(|k| k.class != d.class || iou_raw(&k.bbox, &d.bbox) <= iou_thresh) {
            keep.push(d);
        }
    }
    keep
}

pub fn infer_with_embedding<T: Scalar>(
    model: &GroundingModel<T>,
    image: &ImageTensor<T>,
    phrases: &PhraseEmbedding<T>,
    score_thresh: f64,
) -> Result<Vec<Detection>> {
    let feats = model.trace(ForwardInput::Image(image), &[])?;
    let regions = model.propose_regions(std::slice::from_ref(feats.top()))?;
    let align = model.align(&regions, phrases);
    let mut cands = Vec::new();
    for r in 0..regions.len() {
        for w in 0..phrases.rows() {
            let score = sigmoid(align.get(r, w)).to_f64_lossy();
            if score > score_thresh {
                cands.push(Detection { bbox: regions.boxes[r], class: w, score });
            }
        }
    }
    Ok(nms(cands, NMS_IOU))
}

/// Detections above `score_thresh`, best first. Classes index the prompt's phrases.
pub fn infer<T: Scalar>(
    model: &GroundingModel<T>,
    image: &ImageTensor<T>,
    prompt: &Prompt,
    score_thresh: f64,
) -> Result<Vec<Detection>> {
    let phrases = model.encode_prompt(prompt)?;
    infer_with_embedding(model, image, &phrases, score_thresh)
}
