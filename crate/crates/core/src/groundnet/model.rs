use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{conv_out_len, normal_vec, Conv2d, Dense};
use super::loss::{
    assign_targets, grounding_loss_with_grad, grounding_targets, localization_loss_with_grad, AlignmentMatrix,
    LossBreakdown,
};
use crate::boxes::{decode_deltas, BBox};
use crate::error::{PgstError, Result};
use crate::featstats::{pgst_backward, pgst_forward, ChannelStyle, FeatureMap, InjectionCache};
use crate::prompts::{Prompt, Vocab, UNK_ID};
use crate::scalar::{matmul, matmul_nt, matmul_tn, Scalar};

/// Positive-match IoU used for targets.
pub const POSITIVE_IOU: f64 = 0.5;

/// A 3×H×W image with values in `[0, 1]`.
pub type ImageTensor<T> = FeatureMap<T>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Output channels of each encoder level; its length is the level count.
    pub level_channels: Vec<usize>,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub top_k: usize,
    /// Anchor `(width, height)` pairs tiled on every top-level cell.
    pub anchor_shapes: Vec<(f64, f64)>,
    pub positive_iou: f64,
    /// Initial logit offset, so that untrained scores start near `sigmoid(prior_logit)`.
    pub prior_logit: f64,
    pub init_seed: u64,
    pub vocab: Vocab,
}

impl ModelConfig {
    /// 128×128 input, five levels, d = 64, 4×4×4 = 64 anchors.
    pub fn standard(vocab: Vocab) -> Self {
        Self {
            image_height: 128,
            image_width: 128,
            level_channels: vec![16, 16, 32, 48, 64],
            embed_dim: 64,
            token_dim: 32,
            top_k: 64,
            anchor_shapes: vec![(30.0, 30.0), (50.0, 50.0), (60.0, 30.0), (24.0, 46.0)],
            positive_iou: POSITIVE_IOU,
            prior_logit: -4.0,
            init_seed: 0,
            vocab,
        }
    }

    pub fn levels(&self) -> usize {
        self.level_channels.len()
    }

    /// Spatial size after `level` stride-2 convolutions (level 0 is the image).
    pub fn level_size(&self, level: usize) -> (usize, usize) {
        let (mut h, mut w) = (self.image_height, self.image_width);
        for _ in 0..level {
            h = conv_out_len(h, 2);
            w = conv_out_len(w, 2);
        }
        (h, w)
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_shapes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PgstError::Config(m.to_string()));
        if self.image_height == 0 || self.image_width == 0 {
            return bad("image size must be positive");
        }
        if self.level_channels.is_empty() || self.level_channels.contains(&0) {
            return bad("every encoder level needs at least one channel");
        }
        if self.embed_dim == 0 || self.token_dim == 0 {
            return bad("embedding sizes must be positive");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.anchor_shapes.is_empty() || self.anchor_shapes.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return bad("anchor shapes must be positive");
        }
        if !(self.positive_iou > 0.0 && self.positive_iou <= 1.0) {
            return bad("positive_iou must be in (0, 1]");
        }
        if !self.prior_logit.is_finite() {
            return bad("prior_logit must be finite");
        }
        if self.vocab.is_empty() {
            return bad("vocabulary is empty");
        }
        Ok(())
    }
}

/// Style injected after the ReLU of encoder level `layer` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStyle<T> {
    pub layer: usize,
    pub style: ChannelStyle<T>,
}

impl<T> LayerStyle<T> {
    pub fn new(layer: usize, style: ChannelStyle<T>) -> Self {
        Self { layer, style }
    }
}

/// Where a forward pass starts.
#[derive(Debug)]
pub enum ForwardInput<'a, T> {
    Image(&'a ImageTensor<T>),
    /// Post-ReLU, pre-injection activation of level `layer`. Levels below are skipped.
    Activation { layer: usize, map: &'a FeatureMap<T> },
}

#[derive(Debug, Clone)]
struct LevelTrace<T> {
    /// Post-ReLU output before any injection.
    activation: FeatureMap<T>,
    /// Injected output, when the level is hooked.
    injected: Option<(FeatureMap<T>, InjectionCache<T>)>,
    /// im2col of the level input; absent for levels below the start.
    cols: Option<Vec<T>>,
}

impl<T> LevelTrace<T> {
    fn output(&self) -> &FeatureMap<T> {
        self.injected.as_ref().map_or(&self.activation, |(f, _)| f)
    }
}

/// Intermediate values of one image forward pass.
#[derive(Debug, Clone)]
pub struct ImageTrace<T> {
    /// `levels[l - 1]` is level `l`; `None` below the start level.
    levels: Vec<Option<LevelTrace<T>>>,
    /// Style index by level, for the backward pass.
    hooked: Vec<Option<usize>>,
}

impl<T: Scalar> ImageTrace<T> {
    /// Output of level `layer` (after injection), if computed.
    pub fn output(&self, layer: usize) -> Option<&FeatureMap<T>> {
        self.levels.get(layer.checked_sub(1)?)?.as_ref().map(LevelTrace::output)
    }

    /// Pre-injection activation of level `layer`, if computed.
    pub fn activation(&self, layer: usize) -> Option<&FeatureMap<T>> {
        self.levels.get(layer.checked_sub(1)?)?.as_ref().map(|l| &l.activation)
    }

    pub fn top(&self) -> &FeatureMap<T> {
        self.levels.last().and_then(Option::as_ref).map(LevelTrace::output).expect("top level computed")
    }

    /// Every computed level output, lowest first.
    pub fn outputs(&self) -> Vec<FeatureMap<T>> {
        self.levels.iter().flatten().map(|l| l.output().clone()).collect()
    }
}

/// Top-K anchors with their features, decoded boxes and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet<T> {
    pub embed_dim: usize,
    /// `Nr × d`, row-major.
    pub features: Vec<T>,
    /// `Nr × 4` predicted deltas relative to `anchors`.
    pub deltas: Vec<T>,
    pub boxes: Vec<BBox>,
    pub anchors: Vec<BBox>,
    pub objectness: Vec<T>,
    /// Index of each region in the full anchor grid.
    pub anchor_index: Vec<usize>,
}

impl<T> RegionSet<T> {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhraseEmbedding<T> {
    pub dim: usize,
    /// `Nw × d`, row-major, in prompt order.
    pub matrix: Vec<T>,
    /// First row of each distinct phrase.
    pub phrase_index: BTreeMap<String, usize>,
    tokens: Vec<Vec<u32>>,
    pooled: Vec<T>,
}

impl<T: Scalar> PhraseEmbedding<T> {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }
}

/// Ground-truth boxes and per-box phrase indices for one image.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    pub boxes: &'a [BBox],
    pub labels: &'a [usize],
}

/// Which gradients a loss evaluation should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub styles: bool,
    pub image_encoder: bool,
    pub text_encoder: bool,
}

impl GradRequest {
    pub const NONE: Self = Self { styles: false, image_encoder: false, text_encoder: false };
    pub const STYLES: Self = Self { styles: true, image_encoder: false, text_encoder: false };
    pub const FULL: Self = Self { styles: false, image_encoder: true, text_encoder: true };
    pub const TEXT_ONLY: Self = Self { styles: false, image_encoder: false, text_encoder: true };
}

/// Parameter-shaped gradient buffers, in [`GroundingModel::param_names`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn zeros_like(model: &GroundingModel<T>) -> Self {
        Self { tensors: model.params().iter().map(|p| vec![T::zero(); p.len()]).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            for x in t {
                *x *= s;
            }
        }
    }
}

/// Gradient of the objective w.r.t. one injected style.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleGrad<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput<T> {
    pub loss: LossBreakdown,
    /// Present when model gradients were requested.
    pub model_grads: Option<ModelGrads<T>>,
    /// One entry per style, when style gradients were requested.
    pub style_grads: Vec<StyleGrad<T>>,
}

/// Parameter groups for partial fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    ImageEncoder,
    TextEncoder,
}

/// Small grounded detector: conv pyramid, anchor head, bag-of-tokens text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingModel<T> {
    config: ModelConfig,
    convs: Vec<Conv2d<T>>,
    /// 1×1 head from the top level to `A · (d + 4)` channels.
    head: Dense<T>,
    /// `vocab × token_dim`.
    token_embedding: Vec<T>,
    text_proj: Dense<T>,
}

impl<T: Scalar> GroundingModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut convs = Vec::with_capacity(config.levels());
        let mut in_ch = 3;
        for &out in &config.level_channels {
            convs.push(Conv2d::new_he(&mut rng, in_ch, out, 2));
            in_ch = out;
        }
        let d = config.embed_dim;
        let per_anchor = d + 4;
        let head_out = config.anchors_per_cell() * per_anchor;
        // Region features and phrase embeddings each start near d^-1/4 per
        // coordinate, which keeps initial logits O(1).
        let mut head = Dense::new(&mut rng, in_ch, head_out, 0.5 / (in_ch as f64).sqrt());
        for a in 0..config.anchors_per_cell() {
            for k in 0..4 {
                let row = a * per_anchor + d + k;
                head.weight[row * in_ch..(row + 1) * in_ch].iter_mut().for_each(|w| *w *= T::of(0.1));
            }
            head.bias[a * per_anchor] = T::one();
        }
        let e = config.token_dim;
        let token_embedding = normal_vec(&mut rng, config.vocab.len() * e, 1.0);
        let mut text_proj = Dense::new(&mut rng, e, d, 0.5 / (e as f64).sqrt());
        text_proj.weight[..e].iter_mut().for_each(|w| *w = T::zero());
        text_proj.bias[0] = T::of(config.prior_logit);
        Ok(Self { config, convs, head, token_embedding, text_proj })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn levels(&self) -> usize {
        self.config.levels()
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Channel count of encoder level `layer` (1-based).
    pub fn level_channels(&self, layer: usize) -> Result<usize> {
        self.check_layer(layer)?;
        Ok(self.config.level_channels[layer - 1])
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.levels() {
            return Err(PgstError::Config(format!("hook layer {layer} outside [1, {}]", self.levels())));
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("conv{}.weight", i + 1));
            names.push(format!("conv{}.bias", i + 1));
        }
        for n in ["head.weight", "head.bias", "token_embedding", "text_proj.weight", "text_proj.bias"] {
            names.push(n.to_string());
        }
        names
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out.push(&self.token_embedding);
        out.push(&self.text_proj.weight);
        out.push(&self.text_proj.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out.push(&mut self.token_embedding);
        out.push(&mut self.text_proj.weight);
        out.push(&mut self.text_proj.bias);
        out
    }

    /// Group of each tensor in [`Self::params`] order.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let image = 2 * self.convs.len() + 2;
        (0..image + 3).map(|i| if i < image { ParamGroup::ImageEncoder } else { ParamGroup::TextEncoder }).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Replaces every weight tensor; shapes must match.
    pub(crate) fn set_params(&mut self, tensors: Vec<Vec<T>>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != tensors.len() {
            return Err(PgstError::Checkpoint(format!("expected {} tensors, got {}", slots.len(), tensors.len())));
        }
        for (i, (slot, t)) in slots.iter_mut().zip(tensors).enumerate() {
            if slot.len() != t.len() {
                return Err(PgstError::Checkpoint(format!(
                    "tensor {i} has {} values, expected {}",
                    t.len(),
                    slot.len()
                )));
            }
            **slot = t;
        }
        Ok(())
    }

    fn fingerprint_of(&self, group: Option<ParamGroup>) -> String {
        let mut h = Sha256::new();
        h.update(T::DTYPE.as_bytes());
        let mut buf = Vec::new();
        for ((name, p), g) in self.param_names().iter().zip(self.params()).zip(self.param_groups()) {
            if group.is_some_and(|want| want != g) {
                continue;
            }
            h.update(name.as_bytes());
            h.update((p.len() as u64).to_le_bytes());
            buf.clear();
            for v in p {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over every weight, hex encoded.
    pub fn parameter_fingerprint(&self) -> String {
        self.fingerprint_of(None)
    }

    pub fn image_encoder_fingerprint(&self) -> String {
        self.fingerprint_of(Some(ParamGroup::ImageEncoder))
    }

    pub fn text_encoder_fingerprint(&self) -> String {
        self.fingerprint_of(Some(ParamGroup::TextEncoder))
    }

    fn check_image(&self, image: &ImageTensor<T>) -> Result<()> {
        let want = (3, self.config.image_height, self.config.image_width);
        if image.shape() != want {
            return Err(PgstError::Shape(format!("image is {:?}, model expects {:?}", image.shape(), want)));
        }
        Ok(())
    }

    fn check_styles(&self, styles: &[LayerStyle<T>]) -> Result<Vec<Option<usize>>> {
        let mut hooked = vec![None; self.levels()];
        for (i, s) in styles.iter().enumerate() {
            self.check_layer(s.layer)?;
            let ch = self.config.level_channels[s.layer - 1];
            if s.style.channels() != ch {
                return Err(PgstError::Shape(format!(
                    "style has {} channels, layer {} has {ch}",
                    s.style.channels(),
                    s.layer
                )));
            }
            if hooked[s.layer - 1].replace(i).is_some() {
                return Err(PgstError::Config(format!("two styles target layer {}", s.layer)));
            }
        }
        Ok(hooked)
    }

    /// Runs the encoder from `input`, injecting `styles` after their levels.
    pub fn trace(&self, input: ForwardInput<'_, T>, styles: &[LayerStyle<T>]) -> Result<ImageTrace<T>> {
        let hooked = self.check_styles(styles)?;
        let mut levels: Vec<Option<LevelTrace<T>>> = vec![None; self.levels()];
        let (start, first) = match input {
            ForwardInput::Image(img) => {
                self.check_image(img)?;
                let (act, cols) = self.convs[0].forward(img);
                (1, LevelTrace { activation: act, injected: None, cols: Some(cols) })
            }
            ForwardInput::Activation { layer, map } => {
                self.check_layer(layer)?;
                let (h, w) = self.config.level_size(layer);
                let want = (self.config.level_channels[layer - 1], h, w);
                if map.shape() != want {
                    return Err(PgstError::Shape(format!(
                        "layer {layer} activation is {:?}, expected {want:?}",
                        map.shape()
                    )));
                }
                (layer, LevelTrace { activation: map.clone(), injected: None, cols: None })
            }
        };
        if styles.iter().any(|s| s.layer < start) {
            return Err(PgstError::Config(format!("style below the start layer {start}")));
        }
        let mut current = first;
        for l in start..=self.levels() {
            if let Some(si) = hooked[l - 1] {
                current.injected = Some(pgst_forward(&current.activation, &styles[si].style)?);
            }
            let next = if l < self.levels() {
                let (act, cols) = self.convs[l].forward(current.output());
                Some(LevelTrace { activation: act, injected: None, cols: Some(cols) })
            } else {
                None
            };
            levels[l - 1] = Some(current);
            match next {
                Some(n) => current = n,
                None => break,
            }
        }
        Ok(ImageTrace { levels, hooked })
    }

    /// Encoder outputs of every level, with an optional style injected at `hook_layer`.
    pub fn encode_image(
        &self,
        image: &ImageTensor<T>,
        style: Option<&ChannelStyle<T>>,
        hook_layer: Option<usize>,
    ) -> Result<Vec<FeatureMap<T>>> {
        if let Some(l) = hook_layer {
            self.check_layer(l)?;
        }
        let styles: Vec<LayerStyle<T>> = match (style, hook_layer) {
            (Some(s), Some(l)) => vec![LayerStyle::new(l, s.clone())],
            (Some(s), None) => vec![LayerStyle::new(1, s.clone())],
            (None, _) => Vec::new(),
        };
        Ok(self.trace(ForwardInput::Image(image), &styles)?.outputs())
    }

    /// Every anchor of the top-level grid, cell-major then shape.
    pub fn anchors(&self) -> Vec<BBox> {
        let (gh, gw) = self.config.level_size(self.levels());
        let sy = self.config.image_height as f64 / gh as f64;
        let sx = self.config.image_width as f64 / gw as f64;
        let mut out = Vec::with_capacity(gh * gw * self.config.anchors_per_cell());
        for gy in 0..gh {
            for gx in 0..gw {
                let (cx, cy) = ((gx as f64 + 0.5) * sx, (gy as f64 + 0.5) * sy);
                for &(w, h) in &self.config.anchor_shapes {
                    out.push(BBox::from_center(cx, cy, w, h));
                }
            }
        }
        out
    }

    fn head_forward(&self, top: &FeatureMap<T>) -> Vec<T> {
        self.head.forward_cols(top.data(), top.plane_len())
    }

    fn select_regions(&self, top: &FeatureMap<T>, head_out: &[T]) -> RegionSet<T> {
        let g = top.plane_len();
        let a_per = self.config.anchors_per_cell();
        let d = self.config.embed_dim;
        let per_anchor = d + 4;
        let c = top.channels().max(1);
        let inv_c = T::one() / T::of(c as f64);
        // Mean top-level activation of each cell; no gradient flows through it.
        let cell_score: Vec<T> = (0..g).map(|i| (0..top.channels()).map(|ch| top.data()[ch * g + i]).sum::<T>() * inv_c).collect();
        let anchors = self.anchors();
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        order.sort_by(|&i, &j| {
            cell_score[j / a_per].partial_cmp(&cell_score[i / a_per]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j))
        });
        order.truncate(self.config.top_k.min(anchors.len()));

        let n = order.len();
        let mut features = Vec::with_capacity(n * d);
        let mut deltas = Vec::with_capacity(n * 4);
        let mut boxes = Vec::with_capacity(n);
        let mut region_anchors = Vec::with_capacity(n);
        let mut objectness = Vec::with_capacity(n);
        let (w, h) = (self.config.image_width as f64, self.config.image_height as f64);
        for &idx in &order {
            let (cell, a) = (idx / a_per, idx % a_per);
            let base = a * per_anchor;
            features.extend((0..d).map(|j| head_out[(base + j) * g + cell]));
            let dl: [T; 4] = std::array::from_fn(|k| head_out[(base + d + k) * g + cell]);
            deltas.extend_from_slice(&dl);
            let anchor = anchors[idx];
            boxes.push(decode_deltas(&anchor, dl.map(|v| v.to_f64_lossy())).clipped(w, h));
            region_anchors.push(anchor);
            objectness.push(cell_score[cell]);
        }
        RegionSet { embed_dim: d, features, deltas, boxes, anchors: region_anchors, objectness, anchor_index: order }
    }

    /// Top-K regions from encoder outputs; only the last map is used.
    pub fn propose_regions(&self, features: &[FeatureMap<T>]) -> Result<RegionSet<T>> {
        let top = features.last().ok_or_else(|| PgstError::InvalidInput("no feature maps".into()))?;
        let (h, w) = self.config.level_size(self.levels());
        let want = (*self.config.level_channels.last().expect("validated"), h, w);
        if top.shape() != want {
            return Err(PgstError::Shape(format!("top feature map is {:?}, expected {want:?}", top.shape())));
        }
        Ok(self.select_regions(top, &self.head_forward(top)))
    }

    pub fn encode_prompt(&self, prompt: &Prompt) -> Result<PhraseEmbedding<T>> {
        if prompt.is_empty() {
            return Err(PgstError::InvalidInput("prompt has no phrases".into()));
        }
        let e = self.config.token_dim;
        let tokens: Vec<Vec<u32>> = self
            .config
            .vocab
            .tokenize(prompt)
            .into_iter()
            .map(|t| if t.is_empty() { vec![UNK_ID] } else { t })
            .collect();
        let mut pooled = vec![T::zero(); tokens.len() * e];
        for (row, toks) in pooled.chunks_mut(e).zip(&tokens) {
            let inv = T::one() / T::of(toks.len() as f64);
            for &t in toks {
                let emb = &self.token_embedding[t as usize * e..(t as usize + 1) * e];
                for (o, &v) in row.iter_mut().zip(emb) {
                    *o += v * inv;
                }
            }
        }
        let matrix = self.text_proj.forward_rows(&pooled, tokens.len());
        let mut phrase_index = BTreeMap::new();
        for (i, p) in prompt.phrases().iter().enumerate() {
            phrase_index.entry(p.clone()).or_insert(i);
        }
        Ok(PhraseEmbedding { dim: self.config.embed_dim, matrix, phrase_index, tokens, pooled })
    }

    /// Region-phrase logits for `regions` against `phrases`.
    pub fn align(&self, regions: &RegionSet<T>, phrases: &PhraseEmbedding<T>) -> AlignmentMatrix<T> {
        AlignmentMatrix::from_features(&regions.features, &phrases.matrix, regions.len(), phrases.rows(), self.embed_dim())
    }

    /// Localization plus grounding loss for one image, with requested gradients.
    pub fn objective(
        &self,
        input: ForwardInput<'_, T>,
        gt: GroundTruth<'_>,
        phrases: &PhraseEmbedding<T>,
        styles: &[LayerStyle<T>],
        request: GradRequest,
    ) -> Result<ObjectiveOutput<T>> {
        if gt.boxes.len() != gt.labels.len() {
            return Err(PgstError::Shape(format!(
                "{} boxes but {} labels",
                gt.boxes.len(),
                gt.labels.len()
            )));
        }
        let trace = self.trace(input, styles)?;
        let top = trace.top();
        let head_out = self.head_forward(top);
        let regions = self.select_regions(top, &head_out);
        let align = self.align(&regions, phrases);
        let assigned = assign_targets(&regions.anchors, gt.boxes, self.config.positive_iou);
        let target = grounding_targets(&assigned, gt.labels, phrases.rows())?;
        let (ground, d_align) = grounding_loss_with_grad(&align, &target)?;
        let (loc, d_deltas) = localization_loss_with_grad(&regions, &assigned, gt.boxes);
        let loss = LossBreakdown::new(loc, ground);
        if !loss.total.is_finite() {
            return Err(PgstError::Diverged { iteration: 0, loss: loss.total });
        }

        let want_model = request.image_encoder || request.text_encoder;
        let mut out = ObjectiveOutput { loss, model_grads: None, style_grads: Vec::new() };
        if !want_model && !request.styles {
            return Ok(out);
        }
        let mut grads = want_model.then(|| ModelGrads::zeros_like(self));
        let (nr, nw, d) = (regions.len(), phrases.rows(), self.embed_dim());

        if request.text_encoder {
            // dW = d_alignᵀ · R
            let mut d_phr = vec![T::zero(); nw * d];
            matmul_tn(nw, nr, d, &d_align, &regions.features, T::zero(), &mut d_phr);
            self.text_backward(phrases, &d_phr, grads.as_mut().expect("allocated"));
        }

        let need_image = request.image_encoder || request.styles;
        if need_image {
            // dR = d_align · W
            let mut d_feat = vec![T::zero(); nr * d];
            matmul(nr, nw, d, &d_align, &phrases.matrix, T::zero(), &mut d_feat);
            let g = top.plane_len();
            let a_per = self.config.anchors_per_cell();
            let per_anchor = d + 4;
            let mut d_head = vec![T::zero(); self.head.outputs * g];
            for (r, &idx) in regions.anchor_index.iter().enumerate() {
                let (cell, a) = (idx / a_per, idx % a_per);
                let base = a * per_anchor;
                for j in 0..d {
                    d_head[(base + j) * g + cell] += d_feat[r * d + j];
                }
                for k in 0..4 {
                    d_head[(base + d + k) * g + cell] += d_deltas[r * 4 + k];
                }
            }
            let image_grads = if request.image_encoder { grads.as_mut() } else { None };
            out.style_grads = self.image_backward(&trace, styles, d_head, image_grads, request.styles);
        }
        out.model_grads = grads;
        Ok(out)
    }

    fn text_backward(&self, phrases: &PhraseEmbedding<T>, d_matrix: &[T], grads: &mut ModelGrads<T>) {
        let (nw, d, e) = (phrases.rows(), self.embed_dim(), self.config.token_dim);
        let base = 2 * self.convs.len() + 2;
        {
            let dw = &mut grads.tensors[base + 1];
            matmul_tn(d, nw, e, d_matrix, &phrases.pooled, T::one(), dw);
        }
        {
            let db = &mut grads.tensors[base + 2];
            for row in d_matrix.chunks(d) {
                for (b, &g) in db.iter_mut().zip(row) {
                    *b += g;
                }
            }
        }
        let mut d_pooled = vec![T::zero(); nw * e];
        matmul(nw, d, e, d_matrix, &self.text_proj.weight, T::zero(), &mut d_pooled);
        let demb = &mut grads.tensors[base];
        for (row, toks) in d_pooled.chunks(e).zip(&phrases.tokens) {
            let inv = T::one() / T::of(toks.len() as f64);
            for &t in toks {
                let dst = &mut demb[t as usize * e..(t as usize + 1) * e];
                for (o, &g) in dst.iter_mut().zip(row) {
                    *o += g * inv;
                }
            }
        }
    }

    /// Back-propagates `d_head` down the encoder. Stops as soon as nothing
    /// below is needed.
    fn image_backward(
        &self,
        trace: &ImageTrace<T>,
        styles: &[LayerStyle<T>],
        d_head: Vec<T>,
        mut grads: Option<&mut ModelGrads<T>>,
        want_styles: bool,
    ) -> Vec<StyleGrad<T>> {
        let top = trace.top();
        let g = top.plane_len();
        let l_count = self.levels();
        let head_idx = 2 * l_count;
        if let Some(gr) = grads.as_deref_mut() {
            matmul_nt(self.head.outputs, g, self.head.inputs, &d_head, top.data(), T::one(), &mut gr.tensors[head_idx]);
            for (b, row) in gr.tensors[head_idx + 1].iter_mut().zip(d_head.chunks(g)) {
                *b += row.iter().copied().sum::<T>();
            }
        }
        let mut style_grads: Vec<StyleGrad<T>> = if want_styles {
            styles
                .iter()
                .map(|s| StyleGrad { mu: vec![T::zero(); s.style.channels()], sigma: vec![T::zero(); s.style.channels()] })
                .collect()
        } else {
            Vec::new()
        };
        let lowest_style = if want_styles { styles.iter().map(|s| s.layer).min() } else { None };
        let lowest_needed = match (grads.is_some(), lowest_style) {
            (true, _) => 1,
            (false, Some(l)) => l,
            (false, None) => return style_grads,
        };

        let mut d_out = vec![T::zero(); top.data().len()];
        matmul_tn(self.head.inputs, self.head.outputs, g, &self.head.weight, &d_head, T::zero(), &mut d_out);

        for l in (1..=l_count).rev() {
            let Some(level) = trace.levels[l - 1].as_ref() else { break };
            // d_out is w.r.t. the level output; undo the injection first.
            let d_act = match (&level.injected, trace.hooked[l - 1]) {
                (Some((_, cache)), Some(si)) => {
                    let ig = pgst_backward(cache, &styles[si].style, &d_out);
                    if want_styles {
                        style_grads[si] = StyleGrad { mu: ig.mu, sigma: ig.sigma };
                    }
                    ig.input
                }
                _ => d_out,
            };
            if l <= lowest_needed && grads.is_none() {
                break;
            }
            let Some(cols) = level.cols.as_ref() else { break };
            let input_shape = if l > 1 && (l > lowest_needed || grads.is_some()) {
                trace.levels[l - 2].as_ref().map(|p| p.output().shape())
            } else {
                None
            };
            let wg = grads.as_deref_mut().map(|gr| {
                let (lo, hi) = gr.tensors.split_at_mut(2 * (l - 1) + 1);
                (lo[2 * (l - 1)].as_mut_slice(), hi[0].as_mut_slice())
            });
            match self.convs[l - 1].backward(&level.activation, cols, d_act, wg, input_shape) {
                Some(dx) => d_out = dx,
                None => break,
            }
        }
        style_grads
    }

    /// Loss of `image` under `styles`, with style gradients if `with_grad`.
    pub fn style_objective(
        &self,
        image: &ImageTensor<T>,
        gt: GroundTruth<'_>,
        prompt: &Prompt,
        style: &ChannelStyle<T>,
        hook_layer: usize,
    ) -> Result<LossBreakdown> {
        let phrases = self.encode_prompt(prompt)?;
        let styles = [LayerStyle::new(hook_layer, style.clone())];
        Ok(self.objective(ForwardInput::Image(image), gt, &phrases, &styles, GradRequest::NONE)?.loss)
    }

    /// Loss and gradient of [`Self::style_objective`] w.r.t. `(mu, sigma)`.
    pub fn style_objective_with_grad(
        &self,
        image: &ImageTensor<T>,
        gt: GroundTruth<'_>,
        prompt: &Prompt,
        style: &ChannelStyle<T>,
        hook_layer: usize,
    ) -> Result<(LossBreakdown, StyleGrad<T>)> {
        let phrases = self.encode_prompt(prompt)?;
        let styles = [LayerStyle::new(hook_layer, style.clone())];
        let mut out = self.objective(ForwardInput::Image(image), gt, &phrases, &styles, GradRequest::STYLES)?;
        Ok((out.loss, out.style_grads.remove(0)))
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> GroundingModel<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            stride: c.stride,
            weight: cast_vec(&c.weight),
            bias: cast_vec(&c.bias),
        };
        let dense = |d: &Dense<T>| Dense { inputs: d.inputs, outputs: d.outputs, weight: cast_vec(&d.weight), bias: cast_vec(&d.bias) };
        GroundingModel {
            config: self.config.clone(),
            convs: self.convs.iter().map(conv).collect(),
            head: dense(&self.head),
            token_embedding: cast_vec(&self.token_embedding),
            text_proj: dense(&self.text_proj),
        }
    }
}

fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| U::of(x.to_f64_lossy())).collect()
}
