//! Synthetic driving-scene benchmark.
//!
//! Scenes are flat-colored class glyphs on a sky/road background. Target
//! domains are image-level corruptions of freshly generated scenes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::{iou_raw, BBox};
use crate::error::{PgstError, Result};
use crate::featstats::FeatureMap;
use crate::prompts::ClassList;
use crate::scalar::Scalar;

pub const SOURCE_DOMAIN: &str = "daytime_sunny";
pub const TARGET_DOMAINS: [&str; 4] = ["night_sunny", "dusk_rainy", "night_rainy", "daytime_foggy"];
pub const BENCHMARK_DOMAINS: [&str; 5] = [SOURCE_DOMAIN, "night_sunny", "dusk_rainy", "night_rainy", "daytime_foggy"];

/// Smallest canvas side accepted by [`generate_scene`].
pub const MIN_CANVAS: usize = 64;
pub const MIN_BOX_AREA: f64 = 64.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample<T> {
    pub id: String,
    pub domain_tag: String,
    pub image: FeatureMap<T>,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> DetectionSample<T> {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn cast<U: Scalar>(&self) -> DetectionSample<U> {
        DetectionSample {
            id: self.id.clone(),
            domain_tag: self.domain_tag.clone(),
            image: self.image.cast(),
            boxes: self.boxes.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Rounds every pixel to the nearest multiple of 1/255.
    pub fn quantize(&mut self) {
        for v in self.image.data_mut() {
            *v = T::of(quantize_u8(v.to_f64_lossy()) as f64 / 255.0);
        }
    }
}

fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub tag: String,
    pub brightness_scale: f64,
    pub fog_blend: f64,
    pub fog_blur_sigma: f64,
    pub rain_streak_density: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// Gray level fog blends towards.
pub const FOG_COLOR: [f64; 3] = [0.78, 0.78, 0.8];

impl DomainSpec {
    pub fn identity(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            brightness_scale: 1.0,
            fog_blend: 0.0,
            fog_blur_sigma: 0.0,
            rain_streak_density: 0.0,
            noise_std: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.brightness_scale > 0.0
            && self.brightness_scale <= 1.0
            && (0.0..=1.0).contains(&self.fog_blend)
            && self.fog_blur_sigma >= 0.0
            && (0.0..=1.0).contains(&self.rain_streak_density)
            && self.noise_std >= 0.0;
        if !ok {
            return Err(PgstError::Config(format!("domain spec {:?} has out-of-range parameters", self.tag)));
        }
        Ok(())
    }

    /// Corruption settings of the five benchmark domains.
    pub fn benchmark(tag: &str) -> Option<Self> {
        let base = Self::identity(tag);
        let spec = match tag {
            SOURCE_DOMAIN => base,
            "night_sunny" => Self { brightness_scale: 0.35, noise_std: 0.03, seed: 11, ..base },
            "dusk_rainy" => {
                Self { brightness_scale: 0.6, fog_blend: 0.15, rain_streak_density: 0.3, noise_std: 0.02, seed: 12, ..base }
            }
            "night_rainy" => Self { brightness_scale: 0.3, rain_streak_density: 0.35, noise_std: 0.04, seed: 13, ..base },
            "daytime_foggy" => Self { fog_blend: 0.45, fog_blur_sigma: 1.0, noise_std: 0.01, seed: 14, ..base },
            _ => return None,
        };
        Some(spec)
    }
}

/// Glyph appearance: relative aspect (w/h) and base color.
fn glyph_style(class_index: usize) -> (f64, [f64; 3]) {
    const STYLES: [(f64, [f64; 3]); 7] = [
        (1.9, [0.95, 0.8, 0.1]),
        (1.0, [0.1, 0.75, 0.2]),
        (1.5, [0.85, 0.1, 0.1]),
        (1.1, [1.0, 0.5, 0.0]),
        (0.45, [0.15, 0.3, 0.95]),
        (0.6, [0.85, 0.15, 0.85]),
        (2.2, [0.1, 0.8, 0.85]),
    ];
    STYLES[class_index % STYLES.len()]
}

/// Whether normalized glyph coordinates `(u, v)` in `[0, 1]²` are inside the glyph.
fn glyph_mask(shape: usize, u: f64, v: f64) -> bool {
    let (cu, cv) = (2.0 * u - 1.0, 2.0 * v - 1.0);
    let r2 = cu * cu + cv * cv;
    match shape % 7 {
        0 => true,
        1 => (0.36..=1.0).contains(&r2),
        2 | 4 => r2 <= 1.0,
        3 => cu.abs() <= v,
        5 => cu.abs() <= 0.3 || cv.abs() <= 0.3,
        _ => !(u < 0.3 && v < 0.4),
    }
}

/// Darker band drawn inside buses.
fn glyph_detail(shape: usize, v: f64) -> bool {
    shape.is_multiple_of(7) && (0.2..0.42).contains(&v)
}

fn paint_background<R: Rng>(rng: &mut R, h: usize, w: usize) -> Vec<f64> {
    let horizon = rng.random_range(0.35..0.6) * h as f64;
    let sky: [f64; 3] = [rng.random_range(0.55..0.75), rng.random_range(0.7..0.85), rng.random_range(0.85..1.0)];
    let ground: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.5));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.06),
                rng.random_range(0.02..0.15),
                rng.random_range(0.02..0.15),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let plane = h * w;
    let mut img = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64, x as f64);
            let tex: f64 = waves.iter().map(|&(a, fx, fy, p)| a * (fx * xf + fy * yf + p).sin()).sum();
            let base = if yf < horizon { sky } else { ground };
            for c in 0..3 {
                img[c * plane + y * w + x] = base[c] + tex;
            }
        }
    }
    // A few gray buildings on the horizon act as distractors.
    for _ in 0..rng.random_range(0..4) {
        let bw = rng.random_range(8..28).min(w - 1);
        let bh = rng.random_range(10..40).min(h - 1);
        let bx = rng.random_range(0..w - bw);
        let by = ((horizon as usize).saturating_sub(bh)).min(h - bh);
        let g = rng.random_range(0.35..0.65);
        for y in by..by + bh {
            for x in bx..bx + bw {
                for c in 0..3 {
                    img[c * plane + y * w + x] = g;
                }
            }
        }
    }
    img
}

/// Renders one clean scene with 1 to 6 glyphs.
pub fn generate_scene<R: Rng, T: Scalar>(
    rng: &mut R,
    canvas: (usize, usize),
    classes: &ClassList,
) -> Result<DetectionSample<T>> {
    let (h, w) = canvas;
    if h < MIN_CANVAS || w < MIN_CANVAS {
        return Err(PgstError::InvalidInput(format!("canvas {h}x{w} is below {MIN_CANVAS}x{MIN_CANVAS}")));
    }
    if classes.is_empty() {
        return Err(PgstError::InvalidInput("no classes".into()));
    }
    let plane = h * w;
    let mut img = paint_background(rng, h, w);
    let count = rng.random_range(1..=6);
    let scale = (h.min(w) as f64) / 128.0;
    let mut boxes: Vec<BBox> = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..count {
        for _attempt in 0..20 {
            let label = rng.random_range(0..classes.len());
            let (aspect, color) = glyph_style(label);
            let s = rng.random_range(22.0..50.0) * scale;
            let gw = (s * aspect.sqrt()).round().clamp(8.0, (w - 2) as f64) as usize;
            let gh = (s / aspect.sqrt()).round().clamp(8.0, (h - 2) as f64) as usize;
            let x1 = rng.random_range(0..=w - gw);
            let y1 = rng.random_range(0..=h - gh);
            let b = BBox::new(x1 as f64, y1 as f64, (x1 + gw) as f64, (y1 + gh) as f64);
            if b.area() < MIN_BOX_AREA || boxes.iter().any(|o| iou_raw(o, &b) > 0.3) {
                continue;
            }
            let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.06..0.06));
            for y in y1..y1 + gh {
                let v = (y - y1) as f64 / (gh - 1) as f64;
                for x in x1..x1 + gw {
                    let u = (x - x1) as f64 / (gw - 1) as f64;
                    if !glyph_mask(label, u, v) {
                        continue;
                    }
                    let dim = if glyph_detail(label, v) { 0.45 } else { 1.0 };
                    for c in 0..3 {
                        img[c * plane + y * w + x] = (color[c] + jitter[c]) * dim;
                    }
                }
            }
            boxes.push(b);
            labels.push(label);
            break;
        }
    }
    let noise = Normal::new(0.0, 0.015).expect("valid std");
    for v in &mut img {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    let image = FeatureMap::new(3, h, w, img.into_iter().map(T::of).collect())?;
    Ok(DetectionSample { id: String::new(), domain_tag: SOURCE_DOMAIN.to_string(), image, boxes, labels })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from a base seed and a string key.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    key.bytes().fold(splitmix(seed), |acc, b| splitmix(acc ^ b as u64))
}

fn gaussian_blur(img: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for plane in img.chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * plane[y * w + clamp(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
}

fn draw_rain<R: Rng>(rng: &mut R, img: &mut [f64], h: usize, w: usize, density: f64) {
    let plane = h * w;
    let streaks = (density * (h * w) as f64 / 40.0).round() as usize;
    for _ in 0..streaks {
        let len = rng.random_range(6..13);
        let x0 = rng.random_range(0..w) as f64;
        let y0 = rng.random_range(0..h) as f64;
        for t in 0..len {
            let (x, y) = ((x0 + 0.3 * t as f64) as usize, (y0 + t as f64) as usize);
            if x >= w || y >= h {
                break;
            }
            for (c, tone) in [0.75, 0.78, 0.85].into_iter().enumerate() {
                let p = &mut img[c * plane + y * w + x];
                *p = 0.5 * *p + 0.5 * tone;
            }
        }
    }
}

/// Applies a domain corruption. Annotations are copied unchanged.
pub fn apply_domain<T: Scalar>(sample: &DetectionSample<T>, spec: &DomainSpec) -> Result<DetectionSample<T>> {
    spec.validate()?;
    let (ch, h, w) = sample.image.shape();
    let plane = h * w;
    let mut img: Vec<f64> = sample.image.data().iter().map(|v| v.to_f64_lossy()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &sample.id));
    if spec.brightness_scale != 1.0 {
        img.iter_mut().for_each(|v| *v *= spec.brightness_scale);
    }
    if spec.rain_streak_density > 0.0 && ch == 3 {
        draw_rain(&mut rng, &mut img, h, w, spec.rain_streak_density);
    }
    if spec.fog_blend > 0.0 {
        for (c, p) in img.chunks_mut(plane).enumerate() {
            let fog = FOG_COLOR[c % 3];
            p.iter_mut().for_each(|v| *v = (1.0 - spec.fog_blend) * *v + spec.fog_blend * fog);
        }
    }
    if spec.fog_blur_sigma > 0.0 {
        gaussian_blur(&mut img, h, w, spec.fog_blur_sigma);
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
        img.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    let image = FeatureMap::new(ch, h, w, img.into_iter().map(|v| T::of(v.clamp(0.0, 1.0))).collect())?;
    Ok(DetectionSample {
        id: sample.id.clone(),
        domain_tag: spec.tag.clone(),
        image,
        boxes: sample.boxes.clone(),
        labels: sample.labels.clone(),
    })
}

/// Samples of one domain and split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle<T> {
    pub domain_tag: String,
    pub split: String,
    pub classes: ClassList,
    pub samples: Vec<DetectionSample<T>>,
}

impl<T: Scalar> DatasetHandle<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Self {
        Self { samples: self.samples.iter().take(n).cloned().collect(), ..self.clone_meta() }
    }

    fn clone_meta(&self) -> Self {
        Self { domain_tag: self.domain_tag.clone(), split: self.split.clone(), classes: self.classes.clone(), samples: Vec::new() }
    }

    pub fn cast<U: Scalar>(&self) -> DatasetHandle<U> {
        DatasetHandle {
            domain_tag: self.domain_tag.clone(),
            split: self.split.clone(),
            classes: self.classes.clone(),
            samples: self.samples.iter().map(DetectionSample::cast).collect(),
        }
    }
}

/// Sizes and seed of a generated benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { seed: 0, n_train: 512, n_val: 128, n_test: 128, height: 128, width: 128 }
    }
}

/// Generates one split of one domain. Pixels are quantized to 8 bits so the
/// PNG round trip is exact.
pub fn generate_split<T: Scalar>(
    cfg: &BenchmarkConfig,
    classes: &ClassList,
    spec: &DomainSpec,
    split: &str,
    count: usize,
) -> Result<DatasetHandle<T>> {
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{}_{split}_{i:05}", spec.tag);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &id));
        let mut clean: DetectionSample<T> = generate_scene(&mut rng, (cfg.height, cfg.width), classes)?;
        clean.id = id;
        let mut s = apply_domain(&clean, spec)?;
        s.quantize();
        samples.push(s);
    }
    Ok(DatasetHandle { domain_tag: spec.tag.clone(), split: split.to_string(), classes: classes.clone(), samples })
}

/// Source train/val and a test split for every target domain.
pub fn generate_benchmark<T: Scalar>(cfg: &BenchmarkConfig, classes: &ClassList) -> Result<Vec<DatasetHandle<T>>> {
    let src = DomainSpec::benchmark(SOURCE_DOMAIN).expect("source spec");
    let mut out = vec![
        generate_split(cfg, classes, &src, "train", cfg.n_train)?,
        generate_split(cfg, classes, &src, "val", cfg.n_val)?,
    ];
    for tag in TARGET_DOMAINS {
        let spec = DomainSpec::benchmark(tag).expect("benchmark spec");
        out.push(generate_split(cfg, classes, &spec, "test", cfg.n_test)?);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageRecord {
    id: usize,
    file_name: String,
    width: usize,
    height: usize,
    sample_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    id: usize,
    image_id: usize,
    category_id: usize,
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct CategoryRecord {
    id: usize,
    name: String,
}

#[derive(Debug, Serialize)]
struct AnnotationFile<'a> {
    domain_tag: &'a str,
    split: &'a str,
    images: Vec<ImageRecord>,
    annotations: Vec<AnnotationRecord>,
    categories: Vec<CategoryRecord>,
}

pub const ANNOTATION_FILE: &str = "annotations.json";

/// `<root>/<domain_tag>/<split>`.
pub fn split_dir(root: &Path, domain_tag: &str, split: &str) -> PathBuf {
    root.join(domain_tag).join(split)
}

pub fn write_dataset<T: Scalar>(root: &Path, data: &DatasetHandle<T>) -> Result<PathBuf> {
    let dir = split_dir(root, &data.domain_tag, &data.split);
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| PgstError::io(&images_dir, e))?;
    let mut images = Vec::with_capacity(data.len());
    let mut annotations = Vec::new();
    for (i, s) in data.samples.iter().enumerate() {
        let file_name = format!("{}.png", s.id);
        let path = images_dir.join(&file_name);
        write_png(&path, &s.image)?;
        images.push(ImageRecord { id: i, file_name, width: s.width(), height: s.height(), sample_id: s.id.clone() });
        for (b, &l) in s.boxes.iter().zip(&s.labels) {
            annotations.push(AnnotationRecord { id: annotations.len(), image_id: i, category_id: l, bbox: (*b).into() });
        }
    }
    let categories =
        data.classes.names().iter().enumerate().map(|(id, n)| CategoryRecord { id, name: n.clone() }).collect();
    let file = AnnotationFile { domain_tag: &data.domain_tag, split: &data.split, images, annotations, categories };
    let path = dir.join(ANNOTATION_FILE);
    let json = serde_json::to_vec_pretty(&file)?;
    fs::write(&path, json).map_err(|e| PgstError::io(&path, e))?;
    Ok(dir)
}

pub fn write_png<T: Scalar>(path: &Path, img: &FeatureMap<T>) -> Result<()> {
    let (c, h, w) = img.shape();
    if c != 3 {
        return Err(PgstError::Shape(format!("PNG export needs 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = img.data();
    let mut raw = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            raw.push(quantize_u8(d[ch * plane + i].to_f64_lossy()));
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| PgstError::Image { path: path.to_path_buf(), message: e.to_string() })
}

pub fn read_png<T: Scalar>(path: &Path) -> Result<FeatureMap<T>> {
    let img = image::open(path).map_err(|e| PgstError::Image { path: path.to_path_buf(), message: e.to_string() })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = h * w;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::of(px.0[c] as f64 / 255.0);
        }
    }
    FeatureMap::new(3, h, w, data)
}

fn field<'a>(v: &'a serde_json::Value, key: &str, path: &Path) -> Result<&'a Vec<serde_json::Value>> {
    match v.get(key) {
        Some(serde_json::Value::Array(a)) => Ok(a),
        None => Ok(EMPTY.get_or_init(Vec::new)),
        Some(_) => Err(PgstError::parse(path, format!("\"{key}\" must be an array"))),
    }
}

static EMPTY: std::sync::OnceLock<Vec<serde_json::Value>> = std::sync::OnceLock::new();

/// Reads `<root>/<domain_tag>/<split>`. A missing directory or annotation
/// file yields an empty handle.
pub fn read_dataset<T: Scalar>(root: &Path, domain_tag: &str, split: &str) -> Result<DatasetHandle<T>> {
    let dir = split_dir(root, domain_tag, split);
    read_dataset_dir(&dir, domain_tag, split)
}

pub fn read_dataset_dir<T: Scalar>(dir: &Path, domain_tag: &str, split: &str) -> Result<DatasetHandle<T>> {
    let path = dir.join(ANNOTATION_FILE);
    if !path.exists() {
        return Ok(DatasetHandle {
            domain_tag: domain_tag.to_string(),
            split: split.to_string(),
            classes: ClassList::driving(),
            samples: Vec::new(),
        });
    }
    let text = fs::read_to_string(&path).map_err(|e| PgstError::io(&path, e))?;
    let root: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| PgstError::parse(&path, format!("invalid JSON: {e}")))?;

    let mut cats: Vec<CategoryRecord> = Vec::new();
    for (i, c) in field(&root, "categories", &path)?.iter().enumerate() {
        cats.push(
            serde_json::from_value(c.clone()).map_err(|e| PgstError::parse(&path, format!("categories[{i}]: {e}")))?,
        );
    }
    cats.sort_by_key(|c| c.id);
    if cats.iter().enumerate().any(|(i, c)| c.id != i) {
        return Err(PgstError::parse(&path, "category ids must be 0..n"));
    }
    let classes = if cats.is_empty() {
        ClassList::driving()
    } else {
        ClassList::new(cats.iter().map(|c| c.name.clone()))
            .map_err(|e| PgstError::parse(&path, format!("categories: {e}")))?
    };

    let mut samples = Vec::new();
    let mut by_image = std::collections::HashMap::new();
    for (i, rec) in field(&root, "images", &path)?.iter().enumerate() {
        let r: ImageRecord =
            serde_json::from_value(rec.clone()).map_err(|e| PgstError::parse(&path, format!("images[{i}]: {e}")))?;
        let img_path = dir.join("images").join(&r.file_name);
        if !img_path.is_file() {
            return Err(PgstError::parse(&path, format!("images[{i}]: missing image file {}", img_path.display())));
        }
        let image: FeatureMap<T> = read_png(&img_path)?;
        if image.height() != r.height || image.width() != r.width {
            return Err(PgstError::parse(&path, format!("images[{i}]: size does not match {}", r.file_name)));
        }
        if by_image.insert(r.id, samples.len()).is_some() {
            return Err(PgstError::parse(&path, format!("images[{i}]: duplicate id {}", r.id)));
        }
        samples.push(DetectionSample {
            id: r.sample_id,
            domain_tag: domain_tag.to_string(),
            image,
            boxes: Vec::new(),
            labels: Vec::new(),
        });
    }
    for (i, rec) in field(&root, "annotations", &path)?.iter().enumerate() {
        let a: AnnotationRecord = serde_json::from_value(rec.clone())
            .map_err(|e| PgstError::parse(&path, format!("annotations[{i}]: {e}")))?;
        let &si = by_image
            .get(&a.image_id)
            .ok_or_else(|| PgstError::parse(&path, format!("annotations[{i}]: unknown image_id {}", a.image_id)))?;
        let s = &mut samples[si];
        let b = BBox::from(a.bbox);
        if !b.is_valid() || !b.within(s.width() as f64, s.height() as f64) {
            return Err(PgstError::parse(&path, format!("annotations[{i}]: invalid box {:?}", a.bbox)));
        }
        if a.category_id >= classes.len() {
            return Err(PgstError::parse(&path, format!("annotations[{i}]: unknown category {}", a.category_id)));
        }
        s.boxes.push(b);
        s.labels.push(a.category_id);
    }
    Ok(DatasetHandle { domain_tag: domain_tag.to_string(), split: split.to_string(), classes, samples })
}

/// Mean of each image channel over a dataset.
pub fn channel_means<T: Scalar>(data: &DatasetHandle<T>) -> Vec<f64> {
    let mut sums = [0.0; 3];
    let mut n = 0usize;
    for s in &data.samples {
        for (c, sum) in sums.iter_mut().enumerate().take(s.image.channels()) {
            *sum += s.image.channel(c).iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        }
        n += s.image.plane_len();
    }
    sums.iter().map(|s| s / n.max(1) as f64).collect()
}
