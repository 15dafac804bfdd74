//! Detection metrics, evaluation reports, sweeps and feature export.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use crate::boxes::iou;
use crate::boxes::{iou_raw, BBox};
use crate::datagen::{DatasetHandle, DetectionSample};
use crate::error::{PgstError, Result};
use crate::featstats::channel_stats;
use crate::groundnet::{ForwardInput, GroundingModel, LayerStyle};
use crate::prompts::Prompt;
use crate::scalar::Scalar;
use crate::styleengine::StyleBank;
use crate::trainer::{infer_with_embedding, NMS_IOU};

/// Score threshold used by [`evaluate`].
pub const EVAL_SCORE_THRESH: f64 = 0.05;
pub const MAP_IOU: f64 = 0.5;

/// A scored prediction of one class in image `image`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedDetection {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// A ground-truth box of one class in image `image`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub image: usize,
    pub bbox: BBox,
}

/// All-points interpolated AP of one class.
///
/// Predictions are processed by descending score (stable for ties). Each
/// takes the unmatched ground-truth box of the same image with the highest
/// IoU, provided it reaches `iou_thresh`. Returns 0 when there is no ground
/// truth.
pub fn average_precision(preds: &[RankedDetection], gts: &[GtBox], iou_thresh: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap_or(std::cmp::Ordering::Equal));
    let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, g) in gts.iter().enumerate() {
        by_image.entry(g.image).or_default().push(j);
    }
    let mut used = vec![false; gts.len()];
    let mut precision = Vec::with_capacity(preds.len());
    let mut recall = Vec::with_capacity(preds.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        let p = &preds[i];
        let mut best: Option<(f64, usize)> = None;
        for &j in by_image.get(&p.image).map(Vec::as_slice).unwrap_or(&[]) {
            if used[j] {
                continue;
            }
            let v = iou_raw(&p.bbox, &gts[j].bbox);
            if v >= iou_thresh && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, j));
            }
        }
        if let Some((_, j)) = best {
            used[j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    // Monotone envelope from the right, then sum over recall steps.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = *r;
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain_tag: String,
    pub n_images: usize,
    /// AP of every class with at least one ground-truth instance.
    pub per_class_ap: BTreeMap<String, f64>,
    pub map50: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub model_fingerprint: String,
    pub prompt_fingerprint: String,
    /// Hash of the evaluation settings, model and prompt.
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| PgstError::io(path, e))
    }
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// mAP over classes present in `gts`, from per-image detections.
pub fn map_from_detections(
    class_names: &[String],
    detections: &[Vec<crate::trainer::Detection>],
    samples_gt: &[(Vec<BBox>, Vec<usize>)],
) -> (BTreeMap<String, f64>, f64) {
    let nc = class_names.len();
    let mut preds: Vec<Vec<RankedDetection>> = vec![Vec::new(); nc];
    let mut gts: Vec<Vec<GtBox>> = vec![Vec::new(); nc];
    for (i, dets) in detections.iter().enumerate() {
        for d in dets {
            if d.class < nc {
                preds[d.class].push(RankedDetection { image: i, bbox: d.bbox, score: d.score });
            }
        }
    }
    for (i, (boxes, labels)) in samples_gt.iter().enumerate() {
        for (b, &l) in boxes.iter().zip(labels) {
            if l < nc {
                gts[l].push(GtBox { image: i, bbox: *b });
            }
        }
    }
    let mut per_class = BTreeMap::new();
    for c in 0..nc {
        if gts[c].is_empty() {
            continue;
        }
        per_class.insert(class_names[c].clone(), average_precision(&preds[c], &gts[c], MAP_IOU));
    }
    let map = if per_class.is_empty() { 0.0 } else { per_class.values().sum::<f64>() / per_class.len() as f64 };
    (per_class, map)
}

/// Scores `model` on every image of `data` with `prompt`.
pub fn evaluate<T: Scalar>(model: &GroundingModel<T>, data: &DatasetHandle<T>, prompt: &Prompt) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(PgstError::InvalidInput("no images".into()));
    }
    if prompt.len() != data.classes.len() {
        return Err(PgstError::InvalidInput(format!(
            "prompt has {} phrases but the dataset has {} classes",
            prompt.len(),
            data.classes.len()
        )));
    }
    let phrases = model.encode_prompt(prompt)?;
    let mut detections = Vec::with_capacity(data.len());
    for s in &data.samples {
        detections.push(infer_with_embedding(model, &s.image, &phrases, EVAL_SCORE_THRESH)?);
    }
    let gt: Vec<(Vec<BBox>, Vec<usize>)> = data.samples.iter().map(|s| (s.boxes.clone(), s.labels.clone())).collect();
    let (per_class_ap, map50) = map_from_detections(data.classes.names(), &detections, &gt);
    let model_fingerprint = model.parameter_fingerprint();
    let prompt_fingerprint = sha_hex(&[prompt.joined().as_bytes()]);
    let settings = format!("score_thresh={EVAL_SCORE_THRESH};nms_iou={NMS_IOU};iou={MAP_IOU}");
    let config_fingerprint =
        sha_hex(&[settings.as_bytes(), model_fingerprint.as_bytes(), prompt_fingerprint.as_bytes()]);
    Ok(EvalReport {
        domain_tag: data.domain_tag.clone(),
        n_images: data.len(),
        per_class_ap,
        map50,
        score_thresh: EVAL_SCORE_THRESH,
        nms_iou: NMS_IOU,
        model_fingerprint,
        prompt_fingerprint,
        config_fingerprint,
    })
}

/// One row of an iteration sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub iters: usize,
    pub map50: f64,
    pub domain: String,
    pub seed: u64,
}

pub const SWEEP_HEADER: &str = "iters,map50,domain,seed";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{:.6},{},{}\n", r.iters, r.map50, r.domain, r.seed));
    }
    out
}

/// Runs `cycle(iters)` for each grid point, in grid order.
///
/// `cycle` performs the fit, fine-tune and evaluation for one iteration
/// count and returns the target mAP.
pub fn sweep_iterations<F>(grid: &[usize], domain: &str, seed: u64, mut cycle: F) -> Result<Vec<SweepRow>>
where
    F: FnMut(usize) -> Result<f64>,
{
    if grid.is_empty() || grid[0] != 0 || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PgstError::InvalidInput("iteration grid must be strictly ascending and start at 0".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &iters in grid {
        let map50 = cycle(iters)?;
        rows.push(SweepRow { iters, map50, domain: domain.to_string(), seed });
    }
    Ok(rows)
}

/// One exported row: hook-layer channel statistics of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub image_id: String,
    pub domain_tag: String,
    pub styled: bool,
    /// `mu` followed by `sigma`.
    pub stats: Vec<f64>,
}

fn hook_stats<T: Scalar>(
    model: &GroundingModel<T>,
    s: &DetectionSample<T>,
    hook_layer: usize,
    style: Option<&LayerStyle<T>>,
) -> Result<Vec<f64>> {
    let styles: Vec<LayerStyle<T>> = style.into_iter().cloned().collect();
    let trace = model.trace(ForwardInput::Image(&s.image), &styles)?;
    let f = trace.output(hook_layer).expect("hook level computed");
    Ok(channel_stats(f)?.flatten().iter().map(|v| v.to_f64_lossy()).collect())
}

/// Hook-layer statistics per image, plus a styled row per image when a bank
/// is given (style `i mod len` for image `i`).
pub fn export_features<T: Scalar>(
    model: &GroundingModel<T>,
    data: &DatasetHandle<T>,
    hook_layer: usize,
    bank: Option<&StyleBank<T>>,
) -> Result<Vec<FeatureRow>> {
    model.level_channels(hook_layer)?;
    if let Some(b) = bank {
        if b.is_empty() {
            return Err(PgstError::InvalidInput("style bank is empty".into()));
        }
    }
    let mut rows = Vec::with_capacity(data.len() * if bank.is_some() { 2 } else { 1 });
    for (i, s) in data.samples.iter().enumerate() {
        rows.push(FeatureRow {
            image_id: s.id.clone(),
            domain_tag: s.domain_tag.clone(),
            styled: false,
            stats: hook_stats(model, s, hook_layer, None)?,
        });
        if let Some(b) = bank {
            let entry = &b.entries[i % b.len()];
            let style = LayerStyle::new(hook_layer, entry.style.clone());
            rows.push(FeatureRow {
                image_id: s.id.clone(),
                domain_tag: b.domain_tag.clone(),
                styled: true,
                stats: hook_stats(model, s, hook_layer, Some(&style))?,
            });
        }
    }
    Ok(rows)
}

pub fn write_features_csv(rows: &[FeatureRow], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| PgstError::io(path, e))?;
    let dim = rows.first().map_or(0, |r| r.stats.len());
    let c = dim / 2;
    let mut header = String::from("image_id,domain_tag,styled");
    for i in 0..c {
        header.push_str(&format!(",mu{i}"));
    }
    for i in 0..c {
        header.push_str(&format!(",sigma{i}"));
    }
    let mut out = header;
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}", r.image_id, r.domain_tag, r.styled));
        for v in &r.stats {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    f.write_all(out.as_bytes()).map_err(|e| PgstError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image: usize, b: [f64; 4], score: f64) -> RankedDetection {
        RankedDetection { image, bbox: BBox::from(b), score }
    }

    fn gt(image: usize, b: [f64; 4]) -> GtBox {
        GtBox { image, bbox: BBox::from(b) }
    }

    #[test]
    fn perfect_single_match() {
        let g = [gt(0, [0.0, 0.0, 10.0, 10.0])];
        assert_eq!(average_precision(&[det(0, [0.0, 0.0, 10.0, 10.0], 0.9)], &g, 0.5), 1.0);
    }

    #[test]
    fn false_positive_first_halves_ap() {
        let g = [gt(0, [0.0, 0.0, 10.0, 10.0])];
        let p = [det(0, [50.0, 50.0, 60.0, 60.0], 0.9), det(0, [0.0, 0.0, 10.0, 10.0], 0.8)];
        assert!((average_precision(&p, &g, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_ground_truth_is_zero() {
        assert_eq!(average_precision(&[det(0, [0.0, 0.0, 1.0, 1.0], 0.5)], &[], 0.5), 0.0);
    }

    #[test]
    fn each_gt_is_matched_once() {
        let g = [gt(0, [0.0, 0.0, 10.0, 10.0])];
        let p = [det(0, [0.0, 0.0, 10.0, 10.0], 0.9), det(0, [0.0, 0.0, 10.0, 10.0], 0.8)];
        assert_eq!(average_precision(&p, &g, 0.5), 1.0);
        let g2 = [gt(0, [0.0, 0.0, 10.0, 10.0]), gt(1, [0.0, 0.0, 10.0, 10.0])];
        assert!((average_precision(&p, &g2, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sweep_grid_contract() {
        let rows = sweep_iterations(&[0], "daytime_foggy", 3, |_| Ok(0.25)).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(sweep_csv(&rows).starts_with("iters,map50,domain,seed\n0,0.250000,daytime_foggy,3"));
        assert!(sweep_iterations(&[25, 100], "x", 0, |_| Ok(0.0)).is_err());
    }
}
