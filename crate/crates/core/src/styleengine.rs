//! Per-image fitting of target styles against a frozen model, and the
//! resulting style bank.

use std::fs;
use std::path::Path;

use log::{debug, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetHandle, DetectionSample};
use crate::error::{PgstError, Result};
use crate::featstats::{channel_stats, ChannelStyle};
use crate::groundnet::{ForwardInput, GradRequest, GroundTruth, GroundingModel, LayerStyle, PhraseEmbedding};
use crate::prompts::Prompt;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleFitConfig {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub hook_layer: usize,
    /// Further layers fitted jointly with `hook_layer`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_layers: Vec<usize>,
    pub seed: u64,
}

impl Default for StyleFitConfig {
    fn default() -> Self {
        Self { iterations: 100, lr: 1.0, momentum: 0.9, weight_decay: 1e-4, hook_layer: 1, extra_layers: Vec::new(), seed: 0 }
    }
}

impl StyleFitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(PgstError::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PgstError::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(PgstError::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        let mut layers = self.layers();
        layers.sort_unstable();
        if layers.windows(2).any(|w| w[0] == w[1]) {
            return Err(PgstError::Config("style layers must be distinct".into()));
        }
        Ok(())
    }

    /// `hook_layer` followed by `extra_layers`.
    pub fn layers(&self) -> Vec<usize> {
        std::iter::once(self.hook_layer).chain(self.extra_layers.iter().copied()).collect()
    }
}

/// Total loss at initialization and after every step.
pub type LossTrace = Vec<f64>;

/// PyTorch-style SGD with momentum and coupled weight decay.
struct MomentumSgd<T> {
    lr: T,
    momentum: T,
    weight_decay: T,
    buf: Option<Vec<T>>,
}

impl<T: Scalar> MomentumSgd<T> {
    fn new(cfg: &StyleFitConfig) -> Self {
        Self { lr: T::of(cfg.lr), momentum: T::of(cfg.momentum), weight_decay: T::of(cfg.weight_decay), buf: None }
    }

    fn step(&mut self, params: &mut [T], grad: &[T]) {
        let d: Vec<T> = params.iter().zip(grad).map(|(&p, &g)| g + self.weight_decay * p).collect();
        let buf = match self.buf.take() {
            None => d,
            Some(mut b) => {
                for (bv, dv) in b.iter_mut().zip(&d) {
                    *bv = self.momentum * *bv + *dv;
                }
                b
            }
        };
        for (p, &b) in params.iter_mut().zip(&buf) {
            *p -= self.lr * b;
        }
        self.buf = Some(buf);
    }
}

fn flatten_styles<T: Scalar>(styles: &[LayerStyle<T>]) -> Vec<T> {
    styles.iter().flat_map(|s| s.style.mu.iter().chain(&s.style.sigma).copied()).collect()
}

fn unflatten_styles<T: Scalar>(styles: &mut [LayerStyle<T>], flat: &[T]) {
    let mut off = 0;
    for s in styles {
        let c = s.style.channels();
        s.style.mu.copy_from_slice(&flat[off..off + c]);
        s.style.sigma.copy_from_slice(&flat[off + c..off + 2 * c]);
        s.style.clamp_sigma();
        off += 2 * c;
    }
}

/// Fits one style per configured layer for `sample`.
///
/// Styles start at the sample's own statistics. The returned trace has
/// `iterations + 1` entries.
pub fn fit_styles<T: Scalar>(
    model: &GroundingModel<T>,
    sample: &DetectionSample<T>,
    phrases: &PhraseEmbedding<T>,
    cfg: &StyleFitConfig,
) -> Result<(Vec<LayerStyle<T>>, LossTrace)> {
    cfg.validate()?;
    let layers = cfg.layers();
    for &l in &layers {
        model.level_channels(l)?;
    }
    let start = *layers.iter().min().expect("at least the hook layer");
    let plain = model.trace(ForwardInput::Image(&sample.image), &[])?;
    let mut styles = Vec::with_capacity(layers.len());
    for &l in &layers {
        let act = plain.activation(l).expect("plain pass computes every level");
        styles.push(LayerStyle::new(l, channel_stats(act)?));
    }
    let base = plain.activation(start).expect("computed").clone();
    drop(plain);

    let gt = GroundTruth { boxes: &sample.boxes, labels: &sample.labels };
    let mut opt = MomentumSgd::new(cfg);
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..=cfg.iterations {
        let request = if it < cfg.iterations { GradRequest::STYLES } else { GradRequest::NONE };
        let out = model
            .objective(ForwardInput::Activation { layer: start, map: &base }, gt, phrases, &styles, request)
            .map_err(|e| match e {
                PgstError::Diverged { loss, .. } => PgstError::Diverged { iteration: it, loss },
                other => other,
            })?;
        trace.push(out.loss.total);
        if it == cfg.iterations {
            break;
        }
        let grad: Vec<T> = out.style_grads.iter().flat_map(|g| g.mu.iter().chain(&g.sigma).copied()).collect();
        let mut flat = flatten_styles(&styles);
        opt.step(&mut flat, &grad);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(PgstError::Diverged { iteration: it + 1, loss: f64::NAN });
        }
        unflatten_styles(&mut styles, &flat);
    }
    Ok((styles, trace))
}

/// Fits the hook-layer style of one sample; see [`fit_styles`].
pub fn fit_style<T: Scalar>(
    model: &GroundingModel<T>,
    sample: &DetectionSample<T>,
    prompt: &Prompt,
    cfg: &StyleFitConfig,
) -> Result<(ChannelStyle<T>, LossTrace)> {
    let cfg = StyleFitConfig { extra_layers: Vec::new(), ..cfg.clone() };
    let phrases = model.encode_prompt(prompt)?;
    let (mut styles, trace) = fit_styles(model, sample, &phrases, &cfg)?;
    Ok((styles.remove(0).style, trace))
}

/// One fitted entry of a bank.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleEntry<T> {
    pub image_id: String,
    pub style: ChannelStyle<T>,
    /// Styles of `extra_layers`, in config order.
    pub extra: Vec<LayerStyle<T>>,
    /// Loss at initialization and after the last step.
    pub loss_start: f64,
    pub loss_end: f64,
}

impl<T: Scalar> StyleEntry<T> {
    /// Every style of the entry ready for injection.
    pub fn layer_styles(&self, hook_layer: usize) -> Vec<LayerStyle<T>> {
        std::iter::once(LayerStyle::new(hook_layer, self.style.clone())).chain(self.extra.iter().cloned()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleBank<T> {
    pub domain_tag: String,
    pub hook_layer: usize,
    pub fit_config: StyleFitConfig,
    pub entries: Vec<StyleEntry<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ExtraRecord<T> {
    layer: usize,
    mu: Vec<T>,
    sigma: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct EntryRecord<T> {
    mu: Vec<T>,
    sigma: Vec<T>,
    image_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    extra: Vec<ExtraRecord<T>>,
    #[serde(default)]
    loss_start: f64,
    #[serde(default)]
    loss_end: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct BankRecord<T> {
    domain_tag: String,
    hook_layer: usize,
    fit_config: StyleFitConfig,
    styles: Vec<EntryRecord<T>>,
}

impl<T: Scalar> StyleBank<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn styles(&self) -> impl Iterator<Item = &ChannelStyle<T>> {
        self.entries.iter().map(|e| &e.style)
    }

    pub fn channels(&self) -> Option<usize> {
        self.entries.first().map(|e| e.style.channels())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.channels() {
            if self.entries.iter().any(|e| e.style.channels() != c) {
                return Err(PgstError::Shape("bank styles disagree on channel count".into()));
            }
        }
        if self.fit_config.hook_layer != self.hook_layer {
            return Err(PgstError::Config("bank hook_layer differs from its fit config".into()));
        }
        for e in &self.entries {
            let layers: Vec<usize> = e.extra.iter().map(|s| s.layer).collect();
            if layers != self.fit_config.extra_layers {
                return Err(PgstError::Config(format!("entry {} does not match the configured layers", e.image_id)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = BankRecord {
            domain_tag: self.domain_tag.clone(),
            hook_layer: self.hook_layer,
            fit_config: self.fit_config.clone(),
            styles: self
                .entries
                .iter()
                .map(|e| EntryRecord {
                    mu: e.style.mu.clone(),
                    sigma: e.style.sigma.clone(),
                    image_id: e.image_id.clone(),
                    extra: e
                        .extra
                        .iter()
                        .map(|s| ExtraRecord { layer: s.layer, mu: s.style.mu.clone(), sigma: s.style.sigma.clone() })
                        .collect(),
                    loss_start: e.loss_start,
                    loss_end: e.loss_end,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: BankRecord<T> = serde_json::from_str(text)?;
        let mut entries = Vec::with_capacity(rec.styles.len());
        for e in rec.styles {
            let mut extra = Vec::with_capacity(e.extra.len());
            for x in e.extra {
                extra.push(LayerStyle::new(x.layer, ChannelStyle::new(x.mu, x.sigma)?));
            }
            entries.push(StyleEntry {
                image_id: e.image_id,
                style: ChannelStyle::new(e.mu, e.sigma)?,
                extra,
                loss_start: e.loss_start,
                loss_end: e.loss_end,
            });
        }
        let bank = Self { domain_tag: rec.domain_tag, hook_layer: rec.hook_layer, fit_config: rec.fit_config, entries };
        bank.validate()?;
        Ok(bank)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| PgstError::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PgstError::io(path, e))?;
        Self::from_json(&text).map_err(|e| PgstError::parse(path, e.to_string()))
    }
}

/// Fits every sample of `data` and collects the results in dataset order.
///
/// Samples without boxes or whose fit diverges are skipped with a warning.
pub fn build_style_bank<T: Scalar>(
    model: &GroundingModel<T>,
    data: &DatasetHandle<T>,
    prompt: &Prompt,
    cfg: &StyleFitConfig,
    parallel: bool,
) -> Result<StyleBank<T>> {
    if data.is_empty() {
        return Err(PgstError::InvalidInput("cannot build a style bank from an empty dataset".into()));
    }
    cfg.validate()?;
    let phrases = model.encode_prompt(prompt)?;
    let fit_one = |s: &DetectionSample<T>| -> Result<Option<StyleEntry<T>>> {
        if s.boxes.is_empty() {
            warn!("skipping {}: no boxes", s.id);
            return Ok(None);
        }
        match fit_styles(model, s, &phrases, cfg) {
            Ok((mut styles, trace)) => {
                debug!("{}: loss {:.5} -> {:.5}", s.id, trace[0], trace[trace.len() - 1]);
                let first = styles.remove(0);
                Ok(Some(StyleEntry {
                    image_id: s.id.clone(),
                    style: first.style,
                    extra: styles,
                    loss_start: trace[0],
                    loss_end: *trace.last().expect("non-empty trace"),
                }))
            }
            Err(PgstError::Diverged { iteration, loss }) => {
                warn!("skipping {}: diverged at iteration {iteration} (loss {loss})", s.id);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    };
    let results: Vec<Result<Option<StyleEntry<T>>>> = if parallel {
        data.samples.par_iter().map(fit_one).collect()
    } else {
        data.samples.iter().map(fit_one).collect()
    };
    let mut entries = Vec::with_capacity(results.len());
    for r in results {
        if let Some(e) = r? {
            entries.push(e);
        }
    }
    Ok(StyleBank { domain_tag: prompt.domain_tag().to_string(), hook_layer: cfg.hook_layer, fit_config: cfg.clone(), entries })
}

/// Uniform draw with replacement.
pub fn sample_style<'a, T: Scalar, R: Rng>(bank: &'a StyleBank<T>, rng: &mut R) -> Result<&'a StyleEntry<T>> {
    if bank.is_empty() {
        return Err(PgstError::InvalidInput("style bank is empty".into()));
    }
    Ok(&bank.entries[rng.random_range(0..bank.len())])
}
