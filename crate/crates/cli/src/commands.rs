use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};

use promptfuse::train::{
    read_summary_csv, write_history, write_summary_csv, SummaryRow, ABLATION_FILE, HISTORY_FILE,
    PROMPT_COMPARISON_FILE,
};
use promptfuse::{
    ablate, compare_prompts, evaluate, generate_synthetic, read_feature_archive, train, validate_archive,
    write_feature_archive, Checkpoint, DataSource, Dataset, ExperimentConfig,
};

use crate::args::{Cli, Command, ConfigArgs, SplitArg};
use crate::plot::bar_chart_svg;
use crate::UserError;

pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.json";

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let mut overrides = config.overrides.clone();
            if let Some(s) = seed {
                overrides.push(format!("data.synthetic.seed={s}"));
            }
            let Some(cfg) = resolve(&config, &overrides)? else { return Ok(()) };
            let DataSource::Synthetic(synth) = &cfg.data else {
                return Err(UserError::new("gen-data needs a synthetic data source").into());
            };
            let data = generate_synthetic(synth)?;
            write_feature_archive(&data.dataset, &out)?;
            write_run(&out, "gen-data", &cfg)?;
            eprintln!("wrote archive with {} samples to {}", total(&data.dataset), out.display());
            Ok(())
        }
        Command::Train { config, seed, out } => {
            let Some(cfg) = resolve(&config, &with_seed(&config, seed))? else { return Ok(()) };
            let dataset = load_data(&cfg.data)?;
            create_dir(&out)?;
            write_run(&out, "train", &cfg)?;
            let outcome = train(&cfg.train, &dataset)?;
            outcome.checkpoint.save(&out)?;
            write_history(&outcome.history, &out.join(HISTORY_FILE))?;
            if !dataset.test.is_empty() {
                let metrics = evaluate(&outcome.checkpoint, &dataset.test)?;
                write_json(&out.join(METRICS_FILE), &serde_json::to_value(&metrics)?)?;
                println!(
                    "epoch {} test acc {:.4} wf1 {:.4} wp {:.4} r {:.4}",
                    outcome.checkpoint.epoch, metrics.acc, metrics.wf1, metrics.wp, metrics.r
                );
            }
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            out,
        } => {
            let Some(cfg) = resolve(&config, &config.overrides)? else { return Ok(()) };
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = load_data(&cfg.data)?;
            if dataset.manifest.dims != ckpt.manifest.dims || dataset.manifest.max_lens != ckpt.manifest.max_lens {
                return Err(UserError::new("the configured data does not match the checkpoint's dimensions").into());
            }
            let samples = dataset.split(split.into());
            if samples.is_empty() {
                return Err(UserError::new(format!("the {} split is empty", split_name(split))).into());
            }
            let metrics = evaluate(&ckpt, samples)?;
            let value = serde_json::to_value(&metrics)?;
            if let Some(dir) = out {
                create_dir(&dir)?;
                write_json(&dir.join(METRICS_FILE), &value)?;
                write_run(&dir, "eval", &cfg)?;
            }
            println!("{}", serde_json::to_string_pretty(&value)?);
            Ok(())
        }
        Command::Ablate {
            config,
            seed,
            seeds,
            out,
        } => table(&config, seed, seeds, &out, "ablate", ABLATION_FILE, ablate),
        Command::ComparePrompts {
            config,
            seed,
            seeds,
            out,
        } => table(
            &config,
            seed,
            seeds,
            &out,
            "compare-prompts",
            PROMPT_COMPARISON_FILE,
            compare_prompts,
        ),
        Command::Plot { results, out } => plot(&results, out.as_deref().unwrap_or(&results)),
        Command::ValidateArchive { path } => {
            let report = validate_archive(&path)?;
            println!("{}: {} samples, {} warnings", path.display(), report.samples, report.warnings.len());
            for w in &report.warnings {
                println!("warning: {w}");
            }
            Ok(())
        }
    }
}

fn with_seed(config: &ConfigArgs, seed: Option<u64>) -> Vec<String> {
    let mut overrides = config.overrides.clone();
    if let Some(s) = seed {
        overrides.push(format!("train.seed={s}"));
    }
    overrides
}

/// Loads the config file (or defaults), applies overrides and validates.
/// Returns `None` after printing when `--print-config` was given.
fn resolve(args: &ConfigArgs, overrides: &[String]) -> Result<Option<ExperimentConfig>> {
    let base = match &args.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.with_overrides(overrides)?;
    for warning in cfg.validate()? {
        eprintln!("warning: {warning}");
    }
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(None);
    }
    Ok(Some(cfg))
}

/// Accepts a bare experiment config or a `run.json` record wrapping one.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| UserError::new(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| UserError::new(format!("{} is not valid JSON: {e}", path.display())))?;
    if let Some(obj) = value.as_object_mut() {
        if obj.contains_key("command") {
            if let Some(inner) = obj.remove("config") {
                value = inner;
            }
        }
    }
    serde_json::from_value(value).map_err(|e| UserError::new(format!("{}: {e}", path.display())).into())
}

fn load_data(source: &DataSource) -> Result<Dataset> {
    Ok(match source {
        DataSource::Synthetic(s) => generate_synthetic(s)?.dataset,
        DataSource::Archive(path) => read_feature_archive(path)?,
    })
}

fn table(
    config: &ConfigArgs,
    seed: Option<u64>,
    seeds: Option<usize>,
    out: &Path,
    command: &str,
    file: &str,
    run: fn(&promptfuse::TrainConfig, &Dataset, usize) -> promptfuse::Result<Vec<SummaryRow>>,
) -> Result<()> {
    let mut overrides = with_seed(config, seed);
    if let Some(n) = seeds {
        overrides.push(format!("seeds={n}"));
    }
    let Some(cfg) = resolve(config, &overrides)? else { return Ok(()) };
    let dataset = load_data(&cfg.data)?;
    create_dir(out)?;
    write_run(out, command, &cfg)?;
    let rows = run(&cfg.train, &dataset, cfg.seeds)?;
    write_summary_csv(&rows, &out.join(file))?;
    for r in &rows {
        println!(
            "{:<14} acc {:.4}±{:.4} wf1 {:.4} wp {:.4} r {:.4}",
            r.setting, r.acc, r.acc_std, r.wf1, r.wp, r.r
        );
    }
    Ok(())
}

fn plot(results: &Path, out: &Path) -> Result<()> {
    let mut drawn = 0;
    for (file, title) in [
        (ABLATION_FILE, "Component ablation"),
        (PROMPT_COMPARISON_FILE, "Prompt comparison"),
    ] {
        let csv = results.join(file);
        if !csv.exists() {
            continue;
        }
        let rows = read_summary_csv(&csv)?;
        create_dir(out)?;
        let svg_path = out.join(Path::new(file).with_extension("svg"));
        fs::write(&svg_path, bar_chart_svg(title, &rows))
            .with_context(|| format!("writing {}", svg_path.display()))?;
        println!("wrote {}", svg_path.display());
        drawn += 1;
    }
    if drawn == 0 {
        return Err(UserError::new(format!(
            "no {ABLATION_FILE} or {PROMPT_COMPARISON_FILE} in {}",
            results.display()
        ))
        .into());
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| UserError::new(format!("cannot create {}: {e}", dir.display())).into())
}

fn write_json(path: &PathBuf, value: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_run(dir: &Path, command: &str, cfg: &ExperimentConfig) -> Result<()> {
    create_dir(dir)?;
    let record = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.train.seed,
        "config": cfg,
    });
    write_json(&dir.join(RUN_FILE), &record)
}

fn total(ds: &Dataset) -> usize {
    ds.train.len() + ds.val.len() + ds.test.len()
}

fn split_name(s: SplitArg) -> &'static str {
    promptfuse::Split::from(s).name()
}
