//! Collation of evaluation files into the ablation summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use pgst_core::datagen::BENCHMARK_DOMAINS;
use pgst_core::evalkit::EvalReport;

use crate::manifest::list_files;

/// Which training stages produced a checkpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Stage {
    pub src_aug: bool,
    pub pgst: bool,
}

impl Stage {
    pub const ROWS: [Stage; 4] = [
        Stage { src_aug: false, pgst: false },
        Stage { src_aug: true, pgst: false },
        Stage { src_aug: false, pgst: true },
        Stage { src_aug: true, pgst: true },
    ];

    pub fn label(self) -> &'static str {
        match (self.src_aug, self.pgst) {
            (false, false) => "baseline",
            (true, false) => "+SrcAug",
            (false, true) => "+PGST",
            (true, true) => "full",
        }
    }
}

/// Contents of an `eval_<domain>.json` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub stage: Stage,
    pub checkpoint: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

pub fn eval_file_name(domain: &str) -> String {
    format!("eval_{domain}.json")
}

/// Mean map50 per stage and domain over every evaluation file found.
#[derive(Debug, Clone, Default)]
pub struct Summary {
    pub cells: BTreeMap<(Stage, String), (f64, usize)>,
}

impl Summary {
    pub fn add(&mut self, rec: &EvalRecord) {
        let cell = self.cells.entry((rec.stage, rec.report.domain_tag.clone())).or_default();
        cell.0 += rec.report.map50;
        cell.1 += 1;
    }

    pub fn get(&self, stage: Stage, domain: &str) -> Option<f64> {
        self.cells.get(&(stage, domain.to_string())).map(|&(s, n)| s / n as f64)
    }

    pub fn collect(root: &Path) -> Result<Self> {
        let mut s = Self::default();
        for f in list_files(root)? {
            let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if !(name.starts_with("eval_") && name.ends_with(".json")) {
                continue;
            }
            let text = fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?;
            let rec: EvalRecord = serde_json::from_str(&text).with_context(|| format!("parsing {}", f.display()))?;
            s.add(&rec);
        }
        Ok(s)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("row,src_aug,pgst");
        for d in BENCHMARK_DOMAINS {
            out.push(',');
            out.push_str(d);
        }
        out.push('\n');
        for st in Stage::ROWS {
            out.push_str(&format!("{},{},{}", st.label(), st.src_aug, st.pgst));
            for d in BENCHMARK_DOMAINS {
                match self.get(st, d) {
                    Some(v) => out.push_str(&format!(",{v:.6}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Fixed-width table; mAP values in percent, `-` for missing cells.
    pub fn text(&self) -> String {
        let mut out = format!("{:<10}{:>9}{:>6}", "row", "src_aug", "pgst");
        for d in BENCHMARK_DOMAINS {
            out.push_str(&format!("{d:>15}"));
        }
        out.push('\n');
        for st in Stage::ROWS {
            let mark = |b: bool| if b { "x" } else { "" };
            out.push_str(&format!("{:<10}{:>9}{:>6}", st.label(), mark(st.src_aug), mark(st.pgst)));
            for d in BENCHMARK_DOMAINS {
                match self.get(st, d) {
                    Some(v) => out.push_str(&format!("{:>15.1}", 100.0 * v)),
                    None => out.push_str(&format!("{:>15}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}
