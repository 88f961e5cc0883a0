//! Phase 1 (nine PatchNets on fixed patches), phase 2 (fine-tuning the
//! composed network) and the randomly initialized baseline.
//!
//! One iteration is one Adam step on one mini-batch. Training indices are
//! drawn from an epoch-wise seeded shuffle; each drawn sample is replaced by
//! one uniformly chosen augmented version when augmentation is on. The data
//! order, augmentation and dropout draw from separate streams of the run
//! seed, so runs that differ only in initialization see identical batches.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{self, ArchitectureSpec, Family, ModelParams};
use crate::augment::{self, AugmentConfig, Variant};
use crate::checkpoint::Checkpoint;
use crate::compose::{PatchGrid, PATCHES};
use crate::data::{normalize_in_place, Dataset, NormalizationStats, Split};
use crate::error::{Error, Result};
use crate::eval::{self, TieRule};
use crate::nn::{self, Mode};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{derive_seed, Rng, Tensor};

const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
/// Tag for per-PatchNet seeds.
const TAG_PATCHNET: u64 = 0x5041_5443;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub patchnet_iters: usize,
    pub finetune_iters: usize,
    /// Validation is run every `eval_every` iterations and after the last one.
    pub eval_every: usize,
    pub seed: u64,
    pub architecture: Family,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Weight std for PatchNets and the baseline.
    pub init_std: f64,
    /// Weight std for the fully connected layers of a composed network.
    pub fc_std: f64,
    /// Share of training videos held out when the dataset has no validation
    /// split; `None` makes a missing validation split fatal.
    pub validation_holdout: Option<f64>,
    pub eval_batch: usize,
    /// Stop once frame-level validation accuracy reaches this value.
    pub stop_at_val_accuracy: Option<f64>,
    pub tie_rule: TieRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 64,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            patchnet_iters: 5000,
            finetune_iters: 100_000,
            eval_every: 500,
            seed: 0,
            architecture: Family::Lscnn,
            augment: true,
            augmentation: AugmentConfig::default(),
            init_std: 1e-4,
            fc_std: 0.01,
            validation_holdout: Some(0.2),
            eval_batch: 64,
            stop_at_val_accuracy: None,
            tie_rule: TieRule::Attack,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        self.augmentation.validate()?;
        // batch norm needs two values per channel
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        for (name, v) in [
            ("patchnet_iters", self.patchnet_iters),
            ("finetune_iters", self.finetune_iters),
            ("eval_every", self.eval_every),
            ("eval_batch", self.eval_batch),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.init_std > 0.0 && self.fc_std > 0.0) {
            return Err(Error::Config("init_std and fc_std must be > 0".into()));
        }
        if let Some(a) = self.stop_at_val_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("stop_at_val_accuracy {a} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn whole_spec(&self) -> ArchitectureSpec {
        self.architecture.whole()
    }

    pub fn patch_spec(&self) -> ArchitectureSpec {
        self.architecture.patch()
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.whole_spec().input_size)
    }

    /// Seed of PatchNet `k`'s run.
    pub fn patchnet_seed(&self, k: usize) -> u64 {
        derive_seed(self.seed, TAG_PATCHNET, k as u64)
    }
}

/// Ensures a validation split (holding out training videos if configured)
/// and returns the training-split normalization statistics.
pub fn prepare_dataset(dataset: &mut Dataset, cfg: &TrainConfig) -> Result<NormalizationStats> {
    if !dataset.has_split(Split::Train) {
        return Err(Error::Data("training split is empty".into()));
    }
    if !dataset.has_split(Split::Validation) {
        match cfg.validation_holdout {
            Some(frac) => dataset.hold_out_validation(frac, derive_seed(cfg.seed, 0x484f4c44, 0))?,
            None => return Err(Error::Config("dataset has no validation split and no hold-out is configured".into())),
        }
    }
    dataset.check_video_splits()?;
    NormalizationStats::from_training(dataset)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_eer: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<HistoryRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Evaluation with the lowest validation EER; ties go to the earliest.
    pub fn best(&self) -> Option<&HistoryRecord> {
        self.records
            .iter()
            .filter(|r| r.val_eer.is_some())
            .fold(None, |best: Option<&HistoryRecord>, r| match best {
                Some(b) if b.val_eer <= r.val_eer => Some(b),
                _ => Some(r),
            })
    }

    /// First iteration whose validation accuracy is at least `target`.
    pub fn first_reaching(&self, target: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.val_accuracy.is_some_and(|a| a >= target))
            .map(|r| r.iteration)
    }

    /// `iteration,train_loss,val_eer`, with `val_eer` empty between evaluations.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        w.write_record(["iteration", "train_loss", "val_eer"]).map_err(err)?;
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                r.train_loss.to_string(),
                r.val_eer.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        w.into_inner()
            .map_err(|e| Error::Data(e.to_string()))?
            .flush()
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best validation checkpoint, or the final one when nothing was validated.
    pub best: Checkpoint,
    pub best_iteration: usize,
    pub best_val_eer: Option<f64>,
    pub final_params: ModelParams,
    pub history: History,
    /// Inference-mode frame accuracy on the training split, PatchNets only.
    pub train_accuracy: Option<f64>,
}

/// Which part of each face a network sees.
#[derive(Clone, Copy, Debug)]
enum View {
    Whole,
    Patch(PatchGrid, usize),
}

struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Sampler {
    fn new(indices: Vec<usize>, mut rng: Rng) -> Self {
        let mut order = indices;
        rng.shuffle(&mut order);
        Self { order, pos: 0, rng }
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.rng.shuffle(&mut self.order);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn input(
    dataset: &Dataset,
    i: usize,
    stats: &NormalizationStats,
    view: View,
    aug: Option<(&[Variant], &mut Rng)>,
) -> Result<Tensor> {
    let raw = &dataset.samples[i].image;
    let mut img = match aug {
        Some((variants, rng)) => {
            let v = variants[rng.below(variants.len())];
            augment::apply(raw, v, rng)?
        }
        None => raw.clone(),
    };
    normalize_in_place(&mut img, stats)?;
    match view {
        View::Whole => Ok(img),
        View::Patch(grid, k) => grid.extract(&img, k),
    }
}

struct Validation<'a> {
    dataset: &'a Dataset,
    stats: &'a NormalizationStats,
}

struct RunSetup<'a> {
    spec: &'a ArchitectureSpec,
    dataset: &'a Dataset,
    stats: &'a NormalizationStats,
    view: View,
    iters: usize,
    seed: u64,
    validation: Option<Validation<'a>>,
}

fn run(setup: RunSetup, mut params: ModelParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let RunSetup {
        spec,
        dataset,
        stats,
        view,
        iters,
        seed,
        validation,
    } = setup;
    params.validate(spec)?;
    let train = dataset.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let variants = cfg.augmentation.variants();
    let mut sampler = Sampler::new(train, Rng::with_stream(seed, STREAM_ORDER));
    let mut aug_rng = Rng::with_stream(seed, STREAM_AUGMENT);
    let mut drop_rng = Rng::with_stream(seed, STREAM_DROPOUT);
    let adam = cfg.adam();
    let mut states: Vec<AdamState> = params
        .trainable()
        .iter()
        .map(|t| AdamState::new(t.shape()))
        .collect::<Result<_>>()?;
    let mut history = History::default();
    let mut best: Option<(usize, f64, ModelParams)> = None;

    for iteration in 1..=iters {
        let batch_idx = sampler.next_batch(cfg.batch_size);
        let mut labels = Vec::with_capacity(batch_idx.len());
        let mut items = Vec::with_capacity(batch_idx.len());
        for &i in &batch_idx {
            let aug = cfg.augment.then_some((variants.as_slice(), &mut aug_rng));
            items.push(input(dataset, i, stats, view, aug)?);
            labels.push(dataset.samples[i].label.index());
        }
        let batch = Tensor::stack(&items)?;
        drop(items);
        let out = arch::forward(spec, &mut params, &batch, Mode::Train, &mut drop_rng)?;
        let xent = nn::softmax_xent(&out.logits, &labels)?;
        if !xent.loss.is_finite() {
            return Err(Error::Divergence(format!(
                "{}: loss is {} at iteration {iteration}",
                spec.name, xent.loss
            )));
        }
        let grads = arch::backward(spec, &params, out.cache, &xent.grad_logits)?;
        for ((p, g), st) in params.trainable_mut().into_iter().zip(&grads.tensors).zip(&mut states) {
            adam_step(p, g, st, &adam)?;
        }
        let mut record = HistoryRecord {
            iteration,
            train_loss: xent.loss,
            val_eer: None,
            val_accuracy: None,
        };
        let mut stop = false;
        if let Some(v) = &validation {
            if iteration % cfg.eval_every == 0 || iteration == iters {
                let scores = eval::score_videos(
                    spec,
                    &params,
                    v.dataset,
                    Split::Validation,
                    v.stats,
                    cfg.eval_batch,
                    cfg.tie_rule,
                )?;
                let eer = eval::roc_eer(&scores.videos)?.eer;
                let acc = eval::accuracy(&scores.frames, 0.5);
                log::info!(
                    "{} it {iteration}: loss {:.4}, val EER {:.4}, val acc {:.4}",
                    spec.name,
                    xent.loss,
                    eer,
                    acc
                );
                record.val_eer = Some(eer);
                record.val_accuracy = Some(acc);
                if best.as_ref().is_none_or(|(_, b, _)| eer < *b) {
                    best = Some((iteration, eer, params.clone()));
                }
                stop = cfg.stop_at_val_accuracy.is_some_and(|target| acc >= target);
            }
        } else if iteration % cfg.eval_every == 0 {
            log::info!("{} it {iteration}: loss {:.4}", spec.name, xent.loss);
        }
        history.records.push(record);
        if stop {
            log::info!("{}: validation accuracy target reached at iteration {iteration}", spec.name);
            break;
        }
    }

    let last = history.records.last().map_or(0, |r| r.iteration);
    let (best_iteration, best_val_eer, best_params) = match best {
        Some((it, eer, p)) => (it, Some(eer), p),
        None => (last, None, params.clone()),
    };
    Ok(TrainOutcome {
        best: Checkpoint::from_params(spec, &best_params, best_iteration as u64, Some(stats), None)?,
        best_iteration,
        best_val_eer,
        final_params: params,
        history,
        train_accuracy: None,
    })
}

/// Inference-mode frame accuracy of PatchNet `k` on patch `k` of `split`.
pub fn patch_accuracy(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    dataset: &Dataset,
    split: Split,
    grid: &PatchGrid,
    k: usize,
    stats: &NormalizationStats,
) -> Result<f64> {
    let idx = dataset.indices(split);
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let items = chunk
            .iter()
            .map(|&i| input(dataset, i, stats, View::Patch(*grid, k), None))
            .collect::<Result<Vec<_>>>()?;
        let (_, probs) = arch::infer(spec, params, &Tensor::stack(&items)?)?;
        for (row, &i) in chunk.iter().enumerate() {
            let real = probs.data()[row * 2] >= 0.5;
            correct += usize::from(real == (dataset.samples[i].label.index() == 0));
        }
    }
    Ok(correct as f64 / idx.len().max(1) as f64)
}

/// Trains PatchNet `k` (0-based) on patch `k` of every training face.
pub fn train_patchnet(
    dataset: &Dataset,
    grid: &PatchGrid,
    k: usize,
    cfg: &TrainConfig,
    stats: &NormalizationStats,
) -> Result<TrainOutcome> {
    if k >= PATCHES {
        return Err(Error::Bounds(format!("patch index {k} outside 0..9")));
    }
    let spec = cfg.patch_spec();
    if grid.patch_size() != spec.input_size {
        return Err(Error::Config(format!(
            "{}-pixel patches do not fit {} input {}",
            grid.patch_size(),
            spec.name,
            spec.input_size
        )));
    }
    let seed = cfg.patchnet_seed(k);
    let params = arch::init_params(&spec, cfg.init_std, &mut Rng::with_stream(seed, STREAM_INIT))?;
    let setup = RunSetup {
        spec: &spec,
        dataset,
        stats,
        view: View::Patch(*grid, k),
        iters: cfg.patchnet_iters,
        seed,
        validation: None,
    };
    let mut out = run(setup, params, cfg)?;
    let acc = patch_accuracy(&spec, &out.final_params, dataset, Split::Train, grid, k, stats)?;
    log::info!("PatchNet p{}: training accuracy {acc:.4}", k + 1);
    out.train_accuracy = Some(acc);
    Ok(out)
}

/// All nine PatchNets, in order p1..p9. Each run depends only on its own
/// derived seed, so `threads > 1` yields the same networks as sequential
/// training.
pub fn train_patchnets(
    dataset: &Dataset,
    grid: &PatchGrid,
    cfg: &TrainConfig,
    stats: &NormalizationStats,
    threads: usize,
) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    if threads <= 1 {
        return (0..PATCHES).map(|k| train_patchnet(dataset, grid, k, cfg, stats)).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        (0..PATCHES)
            .into_par_iter()
            .map(|k| train_patchnet(dataset, grid, k, cfg, stats))
            .collect()
    })
}

fn whole_run(
    spec: &ArchitectureSpec,
    params: ModelParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    stats: &NormalizationStats,
) -> Result<TrainOutcome> {
    if !dataset.has_split(Split::Validation) {
        return Err(Error::Config("whole-image training needs a validation split".into()));
    }
    let setup = RunSetup {
        spec,
        dataset,
        stats,
        view: View::Whole,
        iters: cfg.finetune_iters,
        seed: cfg.seed,
        validation: Some(Validation { dataset, stats }),
    };
    run(setup, params, cfg)
}

/// Fine-tunes composed (or any shape-valid) parameters on whole faces,
/// keeping the checkpoint with the best validation EER.
pub fn finetune(
    spec: &ArchitectureSpec,
    composed: ModelParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    stats: &NormalizationStats,
) -> Result<TrainOutcome> {
    whole_run(spec, composed, dataset, cfg, stats)
}

/// Random initialization of the baseline run.
pub fn baseline_init(spec: &ArchitectureSpec, cfg: &TrainConfig) -> Result<ModelParams> {
    arch::init_params(spec, cfg.init_std, &mut Rng::with_stream(cfg.seed, STREAM_INIT))
}

/// Same as [`finetune`] from [`baseline_init`]; batches, augmentation and
/// dropout masks match a fine-tuning run with the same seed.
pub fn train_baseline(
    spec: &ArchitectureSpec,
    dataset: &Dataset,
    cfg: &TrainConfig,
    stats: &NormalizationStats,
) -> Result<TrainOutcome> {
    whole_run(spec, baseline_init(spec, cfg)?, dataset, cfg, stats)
}

/// Composes nine trained PatchNets with the configured fc std.
pub fn compose_patchnets(patchnets: &[ModelParams], cfg: &TrainConfig) -> Result<ModelParams> {
    let mut rng = Rng::with_stream(derive_seed(cfg.seed, 0x434f4d50, 0), STREAM_INIT);
    crate::compose::compose(patchnets, &cfg.patch_spec(), &cfg.whole_spec(), cfg.fc_std, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(iteration: usize, eer: Option<f64>, acc: Option<f64>) -> HistoryRecord {
        HistoryRecord {
            iteration,
            train_loss: 0.5,
            val_eer: eer,
            val_accuracy: acc,
        }
    }

    #[test]
    fn best_prefers_earliest_minimum() {
        let h = History {
            records: vec![
                rec(1, None, None),
                rec(2, Some(0.3), Some(0.6)),
                rec(3, None, None),
                rec(4, Some(0.1), Some(0.96)),
                rec(5, Some(0.1), Some(0.97)),
                rec(6, Some(0.2), Some(0.99)),
            ],
        };
        assert_eq!(h.best().unwrap().iteration, 4);
        assert_eq!(h.first_reaching(0.95), Some(4));
        assert_eq!(h.first_reaching(0.995), None);
        assert!(History::default().best().is_none());
    }

    #[test]
    fn history_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        History {
            records: vec![rec(1, None, None), rec(2, Some(0.25), Some(0.9))],
        }
        .write_csv(&path)
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "iteration,train_loss,val_eer\n1,0.5,\n2,0.5,0.25\n");
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { patchnet_iters: 0, ..ok.clone() },
            TrainConfig { batch_size: 1, ..ok.clone() },
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { stop_at_val_accuracy: Some(1.5), ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = Sampler::new((0..10).collect(), Rng::new(3));
        let mut first: Vec<usize> = s.next_batch(10);
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let mut rest = s.next_batch(4);
        rest.extend(s.next_batch(6));
        rest.sort();
        assert_eq!(rest, (0..10).collect::<Vec<_>>());
    }
}
