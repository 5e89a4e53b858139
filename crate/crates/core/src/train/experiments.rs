//! Multi-seed runs, the component ablation table and the prompt-mode
//! comparison, with their CSV forms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::MetricsReport;
use super::trainer::{evaluate, train};
use crate::augment::PromptMode;
use crate::data::Dataset;
use crate::error::{Error, Result};

pub const ABLATION_FILE: &str = "ablation.csv";
pub const PROMPT_COMPARISON_FILE: &str = "prompt_comparison.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Full,
    NoSbma,
    NoMap,
    NoTcl,
    /// No prompt and zeroed video/audio.
    TextOnly,
}

impl Setting {
    pub const ABLATIONS: [Setting; 4] = [Setting::Full, Setting::NoSbma, Setting::NoMap, Setting::NoTcl];

    pub fn name(self) -> &'static str {
        match self {
            Setting::Full => "full",
            Setting::NoSbma => "no_sbma",
            Setting::NoMap => "no_map",
            Setting::NoTcl => "no_tcl",
            Setting::TextOnly => "text_only",
        }
    }

    /// `base` with this setting's component switched off.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Setting::Full => {}
            Setting::NoSbma => cfg.sbma_on = false,
            Setting::NoMap => cfg.map_on = false,
            Setting::NoTcl => cfg.tcl_on = false,
            Setting::TextOnly => {
                cfg.map_on = false;
                cfg.text_only = true;
            }
        }
        cfg
    }
}

/// Mean and sample standard deviation of test metrics across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub setting: String,
    pub acc: f64,
    pub wf1: f64,
    pub wp: f64,
    pub r: f64,
    pub acc_std: f64,
    pub wf1_std: f64,
    pub wp_std: f64,
    pub r_std: f64,
    pub seeds: usize,
}

/// Trains with seeds `cfg.seed .. cfg.seed + seeds` on the same data and
/// returns each run's test metrics.
pub fn run_seeds(cfg: &TrainConfig, dataset: &Dataset, seeds: usize) -> Result<Vec<MetricsReport>> {
    if seeds == 0 {
        return Err(Error::config("seeds must be at least 1"));
    }
    (0..seeds as u64)
        .map(|i| {
            let run = TrainConfig {
                seed: cfg.seed + i,
                ..cfg.clone()
            };
            let outcome = train(&run, dataset)?;
            evaluate(&outcome.checkpoint, &dataset.test)
        })
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(setting: &str, reports: &[MetricsReport]) -> Result<SummaryRow> {
    if reports.is_empty() {
        return Err(Error::Degenerate("no runs to summarize".into()));
    }
    let col = |f: fn(&MetricsReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let (acc, acc_std) = col(|m| m.acc);
    let (wf1, wf1_std) = col(|m| m.wf1);
    let (wp, wp_std) = col(|m| m.wp);
    let (r, r_std) = col(|m| m.r);
    Ok(SummaryRow {
        setting: setting.to_string(),
        acc,
        wf1,
        wp,
        r,
        acc_std,
        wf1_std,
        wp_std,
        r_std,
        seeds: reports.len(),
    })
}

/// Full model and the three single-component removals.
pub fn ablate(cfg: &TrainConfig, dataset: &Dataset, seeds: usize) -> Result<Vec<SummaryRow>> {
    Setting::ABLATIONS
        .iter()
        .map(|s| summarize(s.name(), &run_seeds(&s.apply(cfg), dataset, seeds)?))
        .collect()
}

/// Identical pipelines that differ only in how the prompt rows are made.
pub fn compare_prompts(cfg: &TrainConfig, dataset: &Dataset, seeds: usize) -> Result<Vec<SummaryRow>> {
    PromptMode::ALL
        .iter()
        .map(|&mode| {
            let run = TrainConfig {
                prompt_mode: mode,
                map_on: true,
                ..cfg.clone()
            };
            summarize(mode.name(), &run_seeds(&run, dataset, seeds)?)
        })
        .collect()
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<SummaryRow>, _>>()?;
    if rows.is_empty() {
        return Err(Error::Format {
            file: path.display().to_string(),
            reason: "no data rows".into(),
        });
    }
    Ok(rows)
}
