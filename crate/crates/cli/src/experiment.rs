//! Stage composition shared by the subcommands and the acceptance suite.

use log::info;
use serde::{Deserialize, Serialize};

use pgst_core::datagen::{BenchmarkConfig, DatasetHandle, BENCHMARK_DOMAINS};
use pgst_core::evalkit::evaluate;
use pgst_core::groundnet::{GroundingModel, ModelConfig};
use pgst_core::prompts::{
    build_source_prompt, build_unrelated_prompt, general_prompt, prompt_for_domain, ClassList, Prompt, UnrelatedVariant,
    Vocab,
};
use pgst_core::styleengine::{build_style_bank, StyleBank, StyleFitConfig};
use pgst_core::trainer::{finetune_with_pgst, train_source_aug, Checkpoint, TrainConfig};
use pgst_core::{PgstError, Result, Scalar};

/// Layer sets compared by `ablate-layers`, in output order.
pub const LAYER_SETS: [&[usize]; 3] = [&[1], &[1, 5], &[1, 3, 5]];

/// Prompt kinds compared by `ablate-prompts`, in output order.
pub const PROMPT_KINDS: [&str; 4] = ["general", "domain_specific", "unrelated_A", "unrelated_B"];

pub const DETERMINISM_ENV: &str = "PGST_DETERMINISTIC";

pub fn deterministic() -> bool {
    std::env::var(DETERMINISM_ENV).is_ok_and(|v| v == "1")
}

/// Every knob of the experiment lifecycle. Missing fields in a config file
/// fall back to these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: BenchmarkConfig,
    pub source: TrainConfig,
    pub style: StyleFitConfig,
    /// Number of source training images the style bank is fitted on.
    pub bank_size: usize,
    pub finetune: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: BenchmarkConfig::default(),
            source: TrainConfig { lr: 1e-3, epochs: 12, ..TrainConfig::default() },
            style: StyleFitConfig::default(),
            bank_size: 128,
            finetune: TrainConfig { lr: 1e-4, epochs: 4, seed: 1, ..TrainConfig::default() },
        }
    }
}

impl ExperimentConfig {
    /// Points every stage at one experiment seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.source.seed = seed;
        self.style.seed = seed;
        self.finetune.seed = seed.wrapping_add(1);
        self
    }

    pub fn with_layers(mut self, layers: &[usize]) -> Self {
        if let Some((&first, rest)) = layers.split_first() {
            self.style.hook_layer = first;
            self.style.extra_layers = rest.to_vec();
            self.finetune.hook_layer = first;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.finetune.validate()?;
        self.style.validate()?;
        if self.bank_size == 0 {
            return Err(PgstError::Config("bank_size must be at least 1".into()));
        }
        if self.style.hook_layer != self.finetune.hook_layer {
            return Err(PgstError::Config("style.hook_layer and finetune.hook_layer differ".into()));
        }
        Ok(())
    }
}

pub fn new_model<T: Scalar>(classes: &ClassList, seed: u64) -> Result<GroundingModel<T>> {
    let mut mc = ModelConfig::standard(Vocab::benchmark(classes));
    mc.init_seed = seed;
    GroundingModel::new(mc)
}

/// Resolves a prompt kind name for a target domain.
pub fn prompt_of_kind(classes: &ClassList, kind: &str, domain: &str) -> Result<Prompt> {
    match kind.to_ascii_lowercase().as_str() {
        "domain_specific" | "domain" => prompt_for_domain(classes, domain),
        "general" => general_prompt(classes),
        "source" => build_source_prompt(classes),
        "unrelated_a" => build_unrelated_prompt(classes, UnrelatedVariant::A),
        "unrelated_b" => build_unrelated_prompt(classes, UnrelatedVariant::B),
        other => Err(PgstError::Config(format!("unknown prompt kind {other:?}"))),
    }
}

/// Full domain tag for `tag`, which may also be one unambiguous word of it
/// (`foggy` for `daytime_foggy`).
pub fn resolve_domain(tag: &str) -> Result<&'static str> {
    if let Some(d) = BENCHMARK_DOMAINS.iter().find(|d| **d == tag) {
        return Ok(d);
    }
    let hits: Vec<&'static str> =
        BENCHMARK_DOMAINS.iter().copied().filter(|d| d.split('_').any(|w| w == tag)).collect();
    match hits.as_slice() {
        [d] => Ok(d),
        [] => Err(PgstError::Config(format!("unknown domain {tag:?}"))),
        _ => Err(PgstError::Config(format!("domain {tag:?} is ambiguous: {}", hits.join(", ")))),
    }
}

pub fn train_source<T: Scalar>(
    model: &GroundingModel<T>,
    train: &DatasetHandle<T>,
    val: &DatasetHandle<T>,
    cfg: &ExperimentConfig,
) -> Result<Checkpoint<T>> {
    let prompt = build_source_prompt(&train.classes)?;
    let ck = train_source_aug(model, train, val, &prompt, &cfg.source)?;
    info!("source training kept epoch {} (val map50 {:?})", ck.epoch, ck.val_map50);
    Ok(ck)
}

pub fn fit_bank<T: Scalar>(
    model: &GroundingModel<T>,
    train: &DatasetHandle<T>,
    prompt: &Prompt,
    cfg: &ExperimentConfig,
) -> Result<StyleBank<T>> {
    let subset = train.take(cfg.bank_size);
    build_style_bank(model, &subset, prompt, &cfg.style, !deterministic())
}

/// Result of one fit, fine-tune and evaluate pass.
pub struct Cycle<T> {
    pub bank: StyleBank<T>,
    pub checkpoint: Checkpoint<T>,
    pub map50: f64,
}

/// Fits a bank with `prompt`, fine-tunes on restyled source images and
/// evaluates on `test` with the same prompt.
pub fn pgst_cycle<T: Scalar>(
    model: &GroundingModel<T>,
    train: &DatasetHandle<T>,
    val: &DatasetHandle<T>,
    test: &DatasetHandle<T>,
    prompt: &Prompt,
    cfg: &ExperimentConfig,
) -> Result<Cycle<T>> {
    cfg.validate()?;
    let bank = fit_bank(model, train, prompt, cfg)?;
    let checkpoint = finetune_with_pgst(model, train, val, prompt, &bank, &cfg.finetune)?;
    let map50 = evaluate(&checkpoint.model, test, prompt)?.map50;
    info!(
        "{} with {:?} prompt, layers {:?}, {} iters: map50 {map50:.4}",
        test.domain_tag,
        prompt.kind(),
        cfg.style.layers(),
        cfg.style.iterations
    );
    Ok(Cycle { bank, checkpoint, map50 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layers: Vec<usize>,
    pub map50: f64,
}

pub fn ablate_layers<T: Scalar>(
    model: &GroundingModel<T>,
    train: &DatasetHandle<T>,
    val: &DatasetHandle<T>,
    test: &DatasetHandle<T>,
    prompt: &Prompt,
    cfg: &ExperimentConfig,
    sets: &[&[usize]],
) -> Result<Vec<LayerRow>> {
    sets.iter()
        .map(|set| {
            let c = cfg.clone().with_layers(set);
            let cycle = pgst_cycle(model, train, val, test, prompt, &c)?;
            Ok(LayerRow { layers: set.to_vec(), map50: cycle.map50 })
        })
        .collect()
}

pub fn layers_csv(rows: &[LayerRow]) -> String {
    let mut out = String::from("layers,map50\n");
    for r in rows {
        let names: Vec<String> = r.layers.iter().map(|l| l.to_string()).collect();
        out.push_str(&format!("{},{:.6}\n", names.join("+"), r.map50));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRow {
    pub kind: String,
    pub map50: f64,
}

/// One cycle per prompt kind; every kind runs even if an earlier one scores poorly.
pub fn ablate_prompts<T: Scalar>(
    model: &GroundingModel<T>,
    train: &DatasetHandle<T>,
    val: &DatasetHandle<T>,
    test: &DatasetHandle<T>,
    cfg: &ExperimentConfig,
) -> Result<Vec<PromptRow>> {
    PROMPT_KINDS
        .iter()
        .map(|&kind| {
            let prompt = prompt_of_kind(&train.classes, kind, &test.domain_tag)?;
            let cycle = pgst_cycle(model, train, val, test, &prompt, cfg)?;
            Ok(PromptRow { kind: kind.to_string(), map50: cycle.map50 })
        })
        .collect()
}

pub fn prompts_csv(rows: &[PromptRow]) -> String {
    let mut out = String::from("kind,map50\n");
    for r in rows {
        out.push_str(&format!("{},{:.6}\n", r.kind, r.map50));
    }
    out
}
