use std::path::{Path, PathBuf};
use std::time::Instant;

use lscnn_core::arch::ModelParams;
use lscnn_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use lscnn_core::compose::{verify_block_independence, PATCHES};
use lscnn_core::data::{load_folder, write_dataset, Dataset, Label, Manifest, NormalizationStats, Split};
use lscnn_core::eval::{score_videos, write_roc_csv, EvalReport};
use lscnn_core::synth::synth_dataset;
use lscnn_core::train::{self, prepare_dataset, TrainOutcome};
use lscnn_core::{Error, Rng};
use serde_json::{json, Value};

use crate::config::Resolved;
use crate::CliError;

pub struct Context {
    pub run: Resolved,
    pub threads: usize,
    pub force: bool,
}

impl Context {
    fn stage_dir(&self, name: &str) -> PathBuf {
        self.run.out.join(name)
    }

    /// Creates `dir`, refusing to touch existing contents unless forced.
    fn fresh_dir(&self, dir: &Path) -> Result<(), CliError> {
        let occupied = dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
        if occupied {
            if !self.force {
                return Err(CliError::usage(format!(
                    "{} is not empty; pass --force to replace it",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(dir).map_err(|e| Error::Io {
                path: dir.into(),
                source: e,
            })?;
        }
        create_dir(dir)
    }

    fn write_summary(&self, dir: &Path, command: &str, metrics: Value) -> Result<(), CliError> {
        let doc = json!({
            "command": command,
            "config_digest": self.run.digest,
            "config": self.run.config,
            "metrics": metrics,
        });
        let path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&doc).expect("summary serializes");
        std::fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))?;
        log::info!("summary written to {}", path.display());
        Ok(())
    }

    /// Loads the configured dataset and applies the validation policy.
    fn dataset(&self) -> Result<(Dataset, NormalizationStats), CliError> {
        let manifest = Manifest::read(&self.run.manifest)?;
        let spec = self.run.config.train.whole_spec();
        let root = self.run.manifest.parent().unwrap_or(Path::new("."));
        let report = load_folder(root, &manifest, spec.input_channels, spec.input_size)?;
        for (path, why) in &report.failures {
            log::warn!("skipped {}: {why}", path.display());
        }
        let mut dataset = report.dataset;
        let stats = prepare_dataset(&mut dataset, &self.run.config.train)?;
        Ok((dataset, stats))
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    Error::Io {
        path: path.into(),
        source,
    }
    .into()
}

fn counts(dataset: &Dataset) -> Value {
    let mut out = serde_json::Map::new();
    for split in Split::ALL {
        if dataset.has_split(split) {
            out.insert(
                split.as_str().into(),
                json!({
                    "real": dataset.count(split, Label::Real),
                    "attack": dataset.count(split, Label::Attack),
                }),
            );
        }
    }
    Value::Object(out)
}

pub fn gen_synth(ctx: &Context) -> Result<(), CliError> {
    let dir = &ctx.run.dataset;
    ctx.fresh_dir(dir)?;
    let dataset = synth_dataset(&ctx.run.config.synth)?;
    write_dataset(&dataset, dir)?;
    let counts = counts(&dataset);
    for split in Split::ALL {
        if let Some(c) = counts.get(split.as_str()) {
            println!("{:<10} real {:>6}  attack {:>6}", split.as_str(), c["real"], c["attack"]);
        }
    }
    ctx.write_summary(dir, "gen-synth", json!({ "frames": counts }))
}

fn outcome_metrics(out: &TrainOutcome) -> Value {
    let last = out.history.records.last();
    let best = out.history.records.iter().find(|r| r.iteration == out.best_iteration);
    json!({
        "iterations": last.map_or(0, |r| r.iteration),
        "final_train_loss": last.map(|r| r.train_loss),
        "best_iteration": out.best_iteration,
        "best_val_eer": out.best_val_eer,
        "best_val_accuracy": best.and_then(|r| r.val_accuracy),
        "train_accuracy": out.train_accuracy,
    })
}

pub fn train_patchnets(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.run.config.train;
    let dir = ctx.stage_dir("patchnets");
    ctx.fresh_dir(&dir)?;
    let (dataset, stats) = ctx.dataset()?;
    let start = Instant::now();
    let outcomes = train::train_patchnets(&dataset, &cfg.grid()?, cfg, &stats, ctx.threads)?;
    log::info!("PatchNets trained in {:.1?}", start.elapsed());
    let mut metrics = serde_json::Map::new();
    for (k, out) in outcomes.iter().enumerate() {
        let name = format!("p{}", k + 1);
        save_checkpoint(&out.best, &dir.join(format!("{name}.ckpt")))?;
        out.history.write_csv(&dir.join(format!("{name}_history.csv")))?;
        println!(
            "{name}: training accuracy {:.4}, final loss {:.4}",
            out.train_accuracy.unwrap_or(f64::NAN),
            out.history.records.last().map_or(f64::NAN, |r| r.train_loss)
        );
        metrics.insert(name, outcome_metrics(out));
    }
    ctx.write_summary(&dir, "train-patchnets", Value::Object(metrics))
}

pub fn compose(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.run.config.train;
    let source = ctx.stage_dir("patchnets");
    let paths: Vec<PathBuf> = (1..=PATCHES).map(|k| source.join(format!("p{k}.ckpt"))).collect();
    let missing: Vec<String> = paths
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.is_file())
        .map(|(k, _)| format!("p{}", k + 1))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::data(format!(
            "missing PatchNet checkpoints in {}: {}",
            source.display(),
            missing.join(", ")
        )));
    }
    let patch_spec = cfg.patch_spec();
    let whole_spec = cfg.whole_spec();
    let mut stats: Option<NormalizationStats> = None;
    let mut patchnets: Vec<ModelParams> = Vec::with_capacity(PATCHES);
    for (k, path) in paths.iter().enumerate() {
        let ckpt = load_checkpoint(path, Some(&patch_spec))?;
        let s = ckpt.normalization();
        match (&stats, s) {
            (None, s) => stats = s,
            (Some(a), Some(b)) if *a != b => {
                return Err(CliError::data(format!("p{} was trained with different normalization", k + 1)));
            }
            _ => {}
        }
        patchnets.push(ckpt.params(&patch_spec)?);
    }
    let composed = train::compose_patchnets(&patchnets, cfg)?;
    let mut rng = Rng::with_stream(cfg.seed, 0);
    let report = verify_block_independence(&composed, &patch_spec, &whole_spec, 2, &mut rng)?.into_result()?;
    log::info!("block independence holds for all {} blocks", report.blocks.len());

    let dir = ctx.stage_dir("composed");
    ctx.fresh_dir(&dir)?;
    let ckpt = Checkpoint::from_params(&whole_spec, &composed, 0, stats.as_ref(), None)?;
    save_checkpoint(&ckpt, &dir.join("composed.ckpt"))?;
    println!("composed {} from p1..p{PATCHES}", whole_spec.name);
    ctx.write_summary(&dir, "compose", json!({ "blocks_verified": report.blocks.len() }))
}

fn write_outcome(ctx: &Context, dir: &Path, command: &str, out: &TrainOutcome, stats: &NormalizationStats) -> Result<(), CliError> {
    let spec = ctx.run.config.train.whole_spec();
    save_checkpoint(&out.best, &dir.join("best.ckpt"))?;
    let last = out.history.records.last().map_or(0, |r| r.iteration);
    let final_ckpt = Checkpoint::from_params(&spec, &out.final_params, last as u64, Some(stats), None)?;
    save_checkpoint(&final_ckpt, &dir.join("final.ckpt"))?;
    out.history.write_csv(&dir.join("history.csv"))?;
    println!(
        "best iteration {} with validation EER {:.4}",
        out.best_iteration,
        out.best_val_eer.unwrap_or(f64::NAN)
    );
    ctx.write_summary(dir, command, outcome_metrics(out))
}

pub fn finetune(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.run.config.train;
    let spec = cfg.whole_spec();
    let source = ctx.stage_dir("composed").join("composed.ckpt");
    if !source.is_file() {
        return Err(CliError::data(format!("missing composed checkpoint {}", source.display())));
    }
    let ckpt = load_checkpoint(&source, Some(&spec))?;
    let dir = ctx.stage_dir("finetune");
    ctx.fresh_dir(&dir)?;
    let (dataset, computed) = ctx.dataset()?;
    let stats = ckpt.normalization().unwrap_or(computed);
    let start = Instant::now();
    let out = train::finetune(&spec, ckpt.params(&spec)?, &dataset, cfg, &stats)?;
    log::info!("fine-tuning took {:.1?}", start.elapsed());
    write_outcome(ctx, &dir, "finetune", &out, &stats)
}

pub fn train_baseline(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.run.config.train;
    let spec = cfg.whole_spec();
    let dir = ctx.stage_dir("baseline");
    ctx.fresh_dir(&dir)?;
    let (dataset, stats) = ctx.dataset()?;
    let start = Instant::now();
    let out = train::train_baseline(&spec, &dataset, cfg, &stats)?;
    log::info!("baseline training took {:.1?}", start.elapsed());
    write_outcome(ctx, &dir, "train-baseline", &out, &stats)
}

pub fn eval(ctx: &Context, checkpoint: Option<&Path>, split: Split, threshold: Option<f64>) -> Result<(), CliError> {
    let cfg = &ctx.run.config.train;
    let spec = cfg.whole_spec();
    let path = checkpoint.map_or_else(|| ctx.stage_dir("finetune").join("best.ckpt"), Path::to_path_buf);
    if let Some(t) = threshold {
        if !t.is_finite() {
            return Err(CliError::usage(format!("--threshold must be finite, got {t}")));
        }
    }
    let ckpt = load_checkpoint(&path, Some(&spec))?;
    let (dataset, computed) = ctx.dataset()?;
    if !dataset.has_split(split) {
        return Err(CliError::data(format!("dataset has no {} split", split.as_str())));
    }
    let stats = ckpt.normalization().unwrap_or(computed);
    let params = ckpt.params(&spec)?;
    let scores = score_videos(&spec, &params, &dataset, split, &stats, cfg.eval_batch, cfg.tie_rule)?;
    let report = EvalReport::build(split, &scores, threshold)?;

    let dir = ctx.stage_dir("eval");
    create_dir(&dir)?;
    let stem = match (path.parent().and_then(Path::file_name), path.file_stem()) {
        (Some(parent), Some(stem)) => format!("{}_{}", parent.to_string_lossy(), stem.to_string_lossy()),
        (_, Some(stem)) => stem.to_string_lossy().into_owned(),
        _ => "checkpoint".into(),
    };
    let json_path = dir.join(format!("{stem}_{}.json", split.as_str()));
    let roc_path = dir.join(format!("{stem}_{}_roc.csv", split.as_str()));
    for p in [&json_path, &roc_path] {
        if p.exists() && !ctx.force {
            return Err(CliError::usage(format!("{} exists; pass --force to replace it", p.display())));
        }
    }
    report.write_json(&json_path)?;
    write_roc_csv(&report.roc, &roc_path)?;
    println!("split {}: {} videos, {} frames", split.as_str(), report.videos, report.frames);
    println!("EER {:.4} at threshold {:.6}", report.eer, report.eer_threshold);
    println!("frame-level EER {:.4}", report.frame_eer);
    if let (Some(t), Some(h)) = (report.threshold, report.hter) {
        println!("HTER {h:.4} at threshold {t:.6}");
    }
    println!("majority-vote accuracy {:.4}", report.vote_accuracy);
    log::info!("report written to {}", json_path.display());
    Ok(())
}
