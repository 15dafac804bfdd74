use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use pgst_cli::experiment::{
    ablate_layers, ablate_prompts, deterministic, fit_bank, layers_csv, new_model, pgst_cycle, prompt_of_kind,
    prompts_csv, resolve_domain, train_source, ExperimentConfig, LAYER_SETS,
};
use pgst_cli::manifest::{write_atomic, Run};
use pgst_cli::report::{eval_file_name, EvalRecord, Stage, Summary};
use pgst_core::datagen::{generate_benchmark, read_dataset, read_png, write_dataset, DatasetHandle, SOURCE_DOMAIN};
use pgst_core::evalkit::{evaluate, export_features, sweep_csv, sweep_iterations, write_features_csv, EVAL_SCORE_THRESH};
use pgst_core::prompts::{build_source_prompt, ClassList, Prompt};
use pgst_core::styleengine::StyleBank;
use pgst_core::trainer::{finetune_with_pgst, infer, Checkpoint, TuningMode};

type Real = f32;

#[derive(Parser)]
#[command(name = "pgst", version, about = "Style-transfer fine-tuning experiments for a small grounded detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source and target datasets.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        /// Image side length in pixels.
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train on the source domain with the source prompt (0 epochs saves the initial weights).
    TrainSource {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a style bank for a target domain on source training images.
    FitStyle {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: String,
        /// Run directory, or a `.json` bank path inside one.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        fit_lr: Option<f64>,
        /// Comma-separated conv levels, hook layer first.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long)]
        bank_size: Option<usize>,
        /// domain_specific, general, source, unrelated_A or unrelated_B.
        #[arg(long, default_value = "domain_specific")]
        prompt_kind: String,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune on source images restyled with a style bank.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prompt JSON; defaults to the prompt file written beside the bank.
        #[arg(long, alias = "prompt-file")]
        prompt: Option<PathBuf>,
        /// Use this domain's domain-specific prompt instead of a prompt file.
        #[arg(long, conflicts_with = "prompt")]
        domain: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// full or prompt_only.
        #[arg(long, alias = "mode")]
        tuning: Option<TuningMode>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Train on plain source images with the bank's prompt.
        #[arg(long)]
        no_styles: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on one domain.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = SOURCE_DOMAIN)]
        domain: String,
        /// Defaults to val for the source domain and test otherwise.
        #[arg(long)]
        split: Option<String>,
        /// Prompt JSON; defaults to the prompt stored in the checkpoint.
        #[arg(long, alias = "prompt-file")]
        prompt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Target mAP over a grid of style-fit iteration counts.
    SweepIters {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long, value_delimiter = ',', default_value = "0,25,50,100,150,200")]
        grid: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare style injection at layers {1}, {1,5} and {1,3,5}.
    AblateLayers {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare general, domain-specific and unrelated prompts.
    AblatePrompts {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Detect objects in one PNG image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, alias = "prompt-file")]
        prompt: Option<PathBuf>,
        #[arg(long, default_value_t = EVAL_SCORE_THRESH)]
        score_thresh: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export hook-layer channel statistics as CSV.
    ExportFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        hook: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collate eval files under a directory into the ablation table.
    Report {
        runs: PathBuf,
        /// Where report.txt and report.csv go; defaults to RUNS.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn default_split(domain: &str) -> &'static str {
    if domain == SOURCE_DOMAIN {
        "val"
    } else {
        "test"
    }
}

fn load_split(root: &Path, domain: &str, split: &str) -> Result<DatasetHandle<Real>> {
    let d = read_dataset(root, domain, split)?;
    if d.is_empty() {
        bail!("no images for {domain}/{split} under {}", root.display());
    }
    Ok(d)
}

fn load_ckpt(path: &Path) -> Result<(Checkpoint<Real>, Stage, Option<Prompt>)> {
    let (ck, extra) = Checkpoint::<Real>::load(path).with_context(|| format!("loading {}", path.display()))?;
    let stage = extra.get("stage").and_then(|v| serde_json::from_value(v.clone()).ok()).unwrap_or_default();
    let prompt = extra.get("prompt").and_then(|v| serde_json::from_value(v.clone()).ok());
    Ok((ck, stage, prompt))
}

fn save_ckpt(ck: &Checkpoint<Real>, path: &Path, stage: Stage, prompt: &Prompt) -> Result<()> {
    ck.save(path, json!({ "stage": stage, "prompt": prompt }))?;
    Ok(())
}

fn read_prompt(path: &Path) -> Result<Prompt> {
    Prompt::from_json_file(path).with_context(|| format!("reading prompt {}", path.display()))
}

/// `--out` of fit-style: a directory (bank.json inside) or a `.json` file.
fn bank_location(out: &Path) -> (PathBuf, String) {
    match (out.extension(), out.file_name()) {
        (Some(ext), Some(name)) if ext == "json" => {
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            (dir.to_path_buf(), name.to_string_lossy().into_owned())
        }
        _ => (out.to_path_buf(), "bank.json".to_string()),
    }
}

/// The prompt fit-style stores next to a bank: `bank.json` -> `bank.prompt.json`.
fn prompt_beside(bank: &Path) -> PathBuf {
    bank.with_extension("prompt.json")
}

fn to_value<S: serde::Serialize>(v: &S) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, n_train, n_val, n_test, size, common } => {
            let mut cfg = load_config(&common)?;
            let d = &mut cfg.data;
            d.n_train = n_train.unwrap_or(d.n_train);
            d.n_val = n_val.unwrap_or(d.n_val);
            d.n_test = n_test.unwrap_or(d.n_test);
            if let Some(s) = size {
                d.height = s;
                d.width = s;
            }
            let mut run = Run::start(&out, "gen-data", vec![])?;
            let sets = generate_benchmark::<Real>(&cfg.data, &ClassList::driving())?;
            for s in &sets {
                let dir = write_dataset(&out, s)?;
                info!("wrote {} {} images to {}", s.len(), s.domain_tag, dir.display());
                run.record_output(dir);
            }
            let bench = run.output("benchmark.json");
            write_atomic(&bench, serde_json::to_string_pretty(&cfg.data)?.as_bytes())?;
            run.finish(to_value(&cfg.data), Some(cfg.data.seed))?;
        }
        Command::TrainSource { data, out, epochs, lr, batch_size, max_steps, common } => {
            let mut cfg = load_config(&common)?;
            let s = &mut cfg.source;
            s.epochs = epochs.unwrap_or(s.epochs);
            s.lr = lr.unwrap_or(s.lr);
            s.batch_size = batch_size.unwrap_or(s.batch_size);
            s.max_steps_per_epoch = max_steps.or(s.max_steps_per_epoch);
            let mut run = Run::start(&out, "train-source", vec![data.clone()])?;
            let train = load_split(&data, SOURCE_DOMAIN, "train")?;
            let model = new_model::<Real>(&train.classes, cfg.seed)?;
            let prompt = build_source_prompt(&train.classes)?;
            let (ck, stage) = if cfg.source.epochs == 0 {
                let ck = Checkpoint {
                    model,
                    epoch: 0,
                    val_map50: None,
                    history: Vec::new(),
                    diverged: None,
                    step_losses: Vec::new(),
                };
                (ck, Stage::default())
            } else {
                let val = read_dataset(&data, SOURCE_DOMAIN, "val")?;
                (train_source(&model, &train, &val, &cfg)?, Stage { src_aug: true, pgst: false })
            };
            if let Some(why) = &ck.diverged {
                log::warn!("training diverged: {why}");
            }
            save_ckpt(&ck, &run.output("model.ckpt"), stage, &prompt)?;
            run.finish(to_value(&cfg), Some(cfg.seed))?;
        }
        Command::FitStyle { ckpt, data, domain, out, iters, fit_lr, layers, bank_size, prompt_kind, common } => {
            let mut cfg = load_config(&common)?;
            if let Some(l) = layers {
                cfg = cfg.with_layers(&l);
            }
            cfg.style.iterations = iters.unwrap_or(cfg.style.iterations);
            cfg.style.lr = fit_lr.unwrap_or(cfg.style.lr);
            cfg.bank_size = bank_size.unwrap_or(cfg.bank_size);
            let domain = resolve_domain(&domain)?;
            let (dir, bank_name) = bank_location(&out);
            let mut run = Run::start(&dir, "fit-style", vec![ckpt.clone(), data.clone()])?;
            let (ck, _, _) = load_ckpt(&ckpt)?;
            let train = load_split(&data, SOURCE_DOMAIN, "train")?;
            let prompt = prompt_of_kind(&train.classes, &prompt_kind, domain)?;
            let bank = fit_bank(&ck.model, &train, &prompt, &cfg)?;
            info!("fitted {} styles for {domain}", bank.len());
            let bank_path = run.output(&bank_name);
            bank.write_file(&bank_path)?;
            let prompt_path = prompt_beside(&bank_path);
            prompt.write_json_file(&prompt_path)?;
            run.record_output(prompt_path);
            run.finish(to_value(&cfg), Some(cfg.seed))?;
        }
        Command::Finetune { ckpt, bank, data, out, prompt, domain, epochs, lr, tuning, max_steps, no_styles, common } => {
            let mut cfg = load_config(&common)?;
            let f = &mut cfg.finetune;
            f.epochs = epochs.unwrap_or(f.epochs);
            f.lr = lr.unwrap_or(f.lr);
            f.tuning_mode = tuning.unwrap_or(f.tuning_mode);
            f.max_steps_per_epoch = max_steps.or(f.max_steps_per_epoch);
            if no_styles {
                f.inject_styles = false;
            }
            let domain = domain.as_deref().map(resolve_domain).transpose()?;
            let prompt_path = match (prompt, domain) {
                (Some(p), _) => Some(p),
                (None, Some(_)) => None,
                (None, None) => Some(prompt_beside(&bank)),
            };
            let mut inputs = vec![ckpt.clone(), bank.clone(), data.clone()];
            inputs.extend(prompt_path.clone());
            let mut run = Run::start(&out, "finetune", inputs)?;
            let (ck, stage, _) = load_ckpt(&ckpt)?;
            let bank = StyleBank::<Real>::read_file(&bank)?;
            cfg.finetune.hook_layer = bank.hook_layer;
            let train = load_split(&data, SOURCE_DOMAIN, "train")?;
            let prompt = match (prompt_path, domain) {
                (Some(p), _) => read_prompt(&p)?,
                (None, Some(d)) => prompt_of_kind(&train.classes, "domain_specific", d)?,
                (None, None) => unreachable!(),
            };
            let val = read_dataset(&data, SOURCE_DOMAIN, "val")?;
            let tuned = finetune_with_pgst(&ck.model, &train, &val, &prompt, &bank, &cfg.finetune)?;
            let stage = Stage { src_aug: stage.src_aug, pgst: cfg.finetune.inject_styles };
            save_ckpt(&tuned, &run.output("model.ckpt"), stage, &prompt)?;
            run.finish(to_value(&cfg), Some(cfg.seed))?;
        }
        Command::Eval { ckpt, data, domain, split, prompt, out, common } => {
            let domain = resolve_domain(&domain)?.to_string();
            let cfg = load_config(&common)?;
            let split = split.unwrap_or_else(|| default_split(&domain).to_string());
            let mut inputs = vec![ckpt.clone(), data.clone()];
            inputs.extend(prompt.clone());
            let mut run = Run::start(&out, "eval", inputs)?;
            let (ck, stage, stored) = load_ckpt(&ckpt)?;
            let test = load_split(&data, &domain, &split)?;
            let prompt = match prompt {
                Some(p) => read_prompt(&p)?,
                None => match stored {
                    Some(p) => p,
                    None => build_source_prompt(&test.classes)?,
                },
            };
            let report = evaluate(&ck.model, &test, &prompt)?;
            println!("{domain}/{split}: map50 {:.4}", report.map50);
            let rec = EvalRecord { stage, checkpoint: ckpt.display().to_string(), report };
            let path = run.output(&eval_file_name(&domain));
            write_atomic(&path, serde_json::to_string_pretty(&rec)?.as_bytes())?;
            run.finish(to_value(&cfg), Some(cfg.seed))?;
        }
        Command::SweepIters { ckpt, data, domain, grid, out, common } => {
            let domain = resolve_domain(&domain)?.to_string();
            let cfg = load_config(&common)?;
            let mut run = Run::start(&out, "sweep-iters", vec![ckpt.clone(), data.clone()])?;
            let (ck, _, _) = load_ckpt(&ckpt)?;
            let (train, val, test) = experiment_sets(&data, &domain)?;
            let prompt = prompt_of_kind(&train.classes, "domain_specific", &domain)?;
            let rows = sweep_iterations(&grid, &domain, cfg.seed, |iters| {
                let mut c = cfg.clone();
                c.style.iterations = iters;
                Ok(pgst_cycle(&ck.model, &train, &val, &test, &prompt, &c)?.map50)
            })?;
            let csv = sweep_csv(&rows);
            print!("{csv}");
            write_atomic(&run.output("sweep.csv"), csv.as_bytes())?;
            run.finish(to_value(&cfg), Some(cfg.seed))?;
        }
        Command::AblateLayers { ckpt, data, domain, out, common } => {
            let domain = resolve_domain(&domain)?.to_string();
            let cfg = load_config(&common)?;
            let mut run = Run::start(&out, "ablate-layers", vec![ckpt.clone(), data.clone()])?;
            let (ck, _, _) = load_ckpt(&ckpt)?;
            let (train, val, test) = experiment_sets(&data, &domain)?;
            let prompt = prompt_of_kind(&train.classes, "domain_specific", &domain)?;
            let rows = ablate_layers(&ck.model, &train, &val, &test, &prompt, &cfg, &LAYER_SETS)?;
            let csv = layers_csv(&rows);
            print!("{csv}");
            write_atomic(&run.output("ablate_layers.csv"), csv.as_bytes())?;
            run.finish(to_value(&cfg), Some(cfg.seed))?;
        }
        Command::AblatePrompts { ckpt, data, domain, out, common } => {
            let domain = resolve_domain(&domain)?.to_string();
            let cfg = load_config(&common)?;
            let mut run = Run::start(&out, "ablate-prompts", vec![ckpt.clone(), data.clone()])?;
            let (ck, _, _) = load_ckpt(&ckpt)?;
            let (train, val, test) = experiment_sets(&data, &domain)?;
            let rows = ablate_prompts(&ck.model, &train, &val, &test, &cfg)?;
            let csv = prompts_csv(&rows);
            print!("{csv}");
            write_atomic(&run.output("ablate_prompts.csv"), csv.as_bytes())?;
            run.finish(to_value(&cfg), Some(cfg.seed))?;
        }
        Command::Infer { ckpt, image, prompt, score_thresh, out } => {
            let mut inputs = vec![ckpt.clone(), image.clone()];
            inputs.extend(prompt.clone());
            let mut run = Run::start(&out, "infer", inputs)?;
            let (ck, _, stored) = load_ckpt(&ckpt)?;
            let prompt = match (prompt, stored) {
                (Some(p), _) => read_prompt(&p)?,
                (None, Some(p)) => p,
                (None, None) => bail!("checkpoint stores no prompt; pass --prompt"),
            };
            let img = read_png::<Real>(&image)?;
            let dets = infer(&ck.model, &img, &prompt, score_thresh)?;
            let rows: Vec<_> = dets
                .iter()
                .map(|d| json!({ "bbox": d.bbox, "class": d.class, "phrase": prompt.phrases()[d.class], "score": d.score }))
                .collect();
            println!("{} detections", rows.len());
            write_atomic(&run.output("detections.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?;
            run.finish(json!({ "score_thresh": score_thresh }), None)?;
        }
        Command::ExportFeatures { ckpt, data, domain, split, bank, hook, out } => {
            let domain = resolve_domain(&domain)?.to_string();
            let split = split.unwrap_or_else(|| default_split(&domain).to_string());
            let mut inputs = vec![ckpt.clone(), data.clone()];
            inputs.extend(bank.clone());
            let mut run = Run::start(&out, "export-features", inputs)?;
            let (ck, _, _) = load_ckpt(&ckpt)?;
            let set = load_split(&data, &domain, &split)?;
            let bank = bank.map(|b| StyleBank::<Real>::read_file(&b)).transpose()?;
            let rows = export_features(&ck.model, &set, hook, bank.as_ref())?;
            write_features_csv(&rows, &run.output("features.csv"))?;
            run.finish(json!({ "hook_layer": hook, "split": split }), None)?;
        }
        Command::Report { runs, out } => {
            let out = out.unwrap_or_else(|| runs.clone());
            let summary = Summary::collect(&runs)?;
            let mut run = Run::start(&out, "report", vec![])?;
            let text = summary.text();
            print!("{text}");
            write_atomic(&run.output("report.txt"), text.as_bytes())?;
            write_atomic(&run.output("report.csv"), summary.csv().as_bytes())?;
            run.finish(json!({ "runs": runs.display().to_string() }), None)?;
        }
    }
    Ok(())
}

fn experiment_sets(
    data: &Path,
    domain: &str,
) -> Result<(DatasetHandle<Real>, DatasetHandle<Real>, DatasetHandle<Real>)> {
    let train = load_split(data, SOURCE_DOMAIN, "train")?;
    let val = read_dataset(data, SOURCE_DOMAIN, "val")?;
    let test = load_split(data, domain, default_split(domain))?;
    Ok((train, val, test))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if deterministic() {
        info!("deterministic mode: sequential execution");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
