//! ROC, equal error rate, half-total error rate and per-video voting.
//!
//! Scores are real-class probabilities. At threshold `t` an item is accepted
//! as real when `score >= t`, so FAR(t) is the fraction of attacks with
//! `score >= t` and FRR(t) the fraction of real items with `score < t`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{self, ArchitectureSpec, ModelParams};
use crate::data::{normalize, Dataset, Label, NormalizationStats, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub id: String,
    pub score: f64,
    pub label: Label,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    #[serde(with = "sentinel")]
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocEer {
    /// Ascending thresholds: `-inf`, every distinct score, `+inf`.
    pub roc: Vec<RocPoint>,
    pub eer: f64,
    pub eer_threshold: f64,
}

/// JSON has no infinities; the sentinels travel as `"-inf"` and `"inf"`.
mod sentinel {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Finite(f64),
        Named(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            f64::INFINITY => "inf".serialize(s),
            f64::NEG_INFINITY => "-inf".serialize(s),
            v => v.serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Finite(v) => Ok(v),
            Repr::Named(n) if n == "inf" => Ok(f64::INFINITY),
            Repr::Named(n) if n == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Named(n) => Err(serde::de::Error::custom(format!("invalid threshold `{n}`"))),
        }
    }
}

fn class_scores(items: &[ScoredItem]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut real = Vec::new();
    let mut attack = Vec::new();
    for it in items {
        if !(0.0..=1.0).contains(&it.score) {
            return Err(Error::InvalidInput(format!("score {} of `{}` outside [0, 1]", it.score, it.id)));
        }
        match it.label {
            Label::Real => real.push(it.score),
            Label::Attack => attack.push(it.score),
        }
    }
    if real.is_empty() || attack.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {} real and {} attack items",
            real.len(),
            attack.len()
        )));
    }
    real.sort_by(f64::total_cmp);
    attack.sort_by(f64::total_cmp);
    Ok((real, attack))
}

/// `(FAR, FRR)` at `t` over sorted score lists.
fn rates(real: &[f64], attack: &[f64], t: f64) -> (f64, f64) {
    let accepted_attacks = attack.len() - attack.partition_point(|&s| s < t);
    let rejected_reals = real.partition_point(|&s| s < t);
    (
        accepted_attacks as f64 / attack.len() as f64,
        rejected_reals as f64 / real.len() as f64,
    )
}

/// ROC over every distinct score and the equal error rate.
///
/// The EER is taken at the first ROC point with `FAR == FRR`; otherwise it
/// is interpolated linearly between the two adjacent points where
/// `FAR − FRR` changes sign, and so is the threshold. An interpolated
/// threshold falling between a score and an infinite sentinel is replaced by
/// the adjacent representable value of that score.
pub fn roc_eer(items: &[ScoredItem]) -> Result<RocEer> {
    let (real, attack) = class_scores(items)?;
    let mut thresholds: Vec<f64> = real.iter().chain(&attack).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);
    let roc: Vec<RocPoint> = thresholds
        .iter()
        .map(|&t| {
            let (far, frr) = rates(&real, &attack, t);
            RocPoint { threshold: t, far, frr }
        })
        .collect();
    let gap = |p: &RocPoint| p.far - p.frr;
    if let Some(p) = roc.iter().find(|p| gap(p) == 0.0) {
        return Ok(RocEer {
            eer: p.far,
            eer_threshold: p.threshold,
            roc,
        });
    }
    // gap is +1 at -inf and -1 at +inf and non-increasing, so one sign change exists
    let i = roc
        .windows(2)
        .position(|w| gap(&w[0]) > 0.0 && gap(&w[1]) < 0.0)
        .expect("FAR − FRR changes sign");
    let (a, b) = (roc[i], roc[i + 1]);
    let alpha = gap(&a) / (gap(&a) - gap(&b));
    let eer = a.far + alpha * (b.far - a.far);
    let eer_threshold = match (a.threshold.is_finite(), b.threshold.is_finite()) {
        (true, true) => a.threshold + alpha * (b.threshold - a.threshold),
        (false, true) => b.threshold.next_down(),
        (true, false) => a.threshold.next_up(),
        (false, false) => unreachable!("a finite score lies between the sentinels"),
    };
    Ok(RocEer { roc, eer, eer_threshold })
}

/// `(FAR + FRR) / 2` at a fixed, typically transferred, threshold.
pub fn hter(items: &[ScoredItem], threshold: f64) -> Result<f64> {
    if !threshold.is_finite() {
        return Err(Error::InvalidInput(format!("HTER threshold must be finite, got {threshold}")));
    }
    let (real, attack) = class_scores(items)?;
    let (far, frr) = rates(&real, &attack, threshold);
    Ok((far + frr) / 2.0)
}

/// Decision on an exact tie in the frame vote.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieRule {
    #[default]
    Attack,
    Real,
}

/// Majority class of a video's frame decisions.
pub fn video_vote(video_id: &str, frames: &[Label], tie: TieRule) -> Result<Label> {
    if frames.is_empty() {
        return Err(Error::Undecidable(video_id.to_owned()));
    }
    let real = frames.iter().filter(|&&l| l == Label::Real).count();
    let attack = frames.len() - real;
    Ok(match real.cmp(&attack) {
        std::cmp::Ordering::Greater => Label::Real,
        std::cmp::Ordering::Less => Label::Attack,
        std::cmp::Ordering::Equal => match tie {
            TieRule::Attack => Label::Attack,
            TieRule::Real => Label::Real,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoDecision {
    pub video_id: String,
    pub label: Label,
    pub frames: usize,
    /// Mean real-class probability over the frames.
    pub score: f64,
    pub vote: Label,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    /// One item per video, scored by mean frame probability.
    pub videos: Vec<ScoredItem>,
    /// One item per frame; ids are `<video>#<frame>`.
    pub frames: Vec<ScoredItem>,
    pub decisions: Vec<VideoDecision>,
    /// Videos without any scored frame.
    pub skipped: Vec<String>,
}

/// Groups frame scores (id `<video>#<frame>`) by video. Frames vote with
/// `probability >= 0.5` as real. Videos listed in `expected` without frames
/// are skipped with a warning and reported.
pub fn aggregate_videos(frames: Vec<ScoredItem>, expected: &[(String, Label)], tie: TieRule) -> Result<VideoScores> {
    let mut groups: BTreeMap<&str, Vec<&ScoredItem>> = BTreeMap::new();
    for f in &frames {
        let video = f.id.rsplit_once('#').map_or(f.id.as_str(), |(v, _)| v);
        groups.entry(video).or_default().push(f);
    }
    let mut out = VideoScores::default();
    for (video, label) in expected {
        let Some(items) = groups.get(video.as_str()) else {
            log::warn!("video `{video}` has no scored frames; skipped");
            out.skipped.push(video.clone());
            continue;
        };
        let score = items.iter().map(|f| f.score).sum::<f64>() / items.len() as f64;
        let votes: Vec<Label> = items
            .iter()
            .map(|f| if f.score >= 0.5 { Label::Real } else { Label::Attack })
            .collect();
        out.videos.push(ScoredItem {
            id: video.clone(),
            score,
            label: *label,
        });
        out.decisions.push(VideoDecision {
            video_id: video.clone(),
            label: *label,
            frames: items.len(),
            score,
            vote: video_vote(video, &votes, tie)?,
        });
    }
    out.frames = frames;
    Ok(out)
}

/// Inference-mode real-class probability for every frame of `split`.
pub fn score_frames(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    dataset: &Dataset,
    split: Split,
    stats: &NormalizationStats,
    batch_size: usize,
) -> Result<Vec<ScoredItem>> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("split `{}` is empty", split.as_str())));
    }
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let images = chunk
            .iter()
            .map(|&i| normalize(&dataset.samples[i].image, stats))
            .collect::<Result<Vec<Tensor>>>()?;
        let (_, probs) = arch::infer(spec, params, &Tensor::stack(&images)?)?;
        for (row, &i) in chunk.iter().enumerate() {
            let s = &dataset.samples[i];
            let p = probs.data()[row * 2 + Label::Real.index()] as f64;
            if !p.is_finite() {
                return Err(Error::Divergence(format!("non-finite probability for `{}`", s.video_id)));
            }
            out.push(ScoredItem {
                id: format!("{}#{}", s.video_id, s.frame_index),
                score: p.clamp(0.0, 1.0),
                label: s.label,
            });
        }
    }
    Ok(out)
}

/// Frame and video scores for one split in a single inference pass.
pub fn score_videos(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    dataset: &Dataset,
    split: Split,
    stats: &NormalizationStats,
    batch_size: usize,
    tie: TieRule,
) -> Result<VideoScores> {
    let frames = score_frames(spec, params, dataset, split, stats, batch_size)?;
    let mut expected: Vec<(String, Label)> = Vec::new();
    for &i in &dataset.indices(split) {
        let s = &dataset.samples[i];
        if !expected.iter().any(|(v, _)| *v == s.video_id) {
            expected.push((s.video_id.clone(), s.label));
        }
    }
    aggregate_videos(frames, &expected, tie)
}

/// Fraction of items whose `score >= threshold` decision matches the label.
pub fn accuracy(items: &[ScoredItem], threshold: f64) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let ok = items
        .iter()
        .filter(|it| (it.score >= threshold) == (it.label == Label::Real))
        .count();
    ok as f64 / items.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub videos: usize,
    pub frames: usize,
    /// Video-level ROC (mean frame probability).
    pub roc: Vec<RocPoint>,
    pub eer: f64,
    pub eer_threshold: f64,
    pub frame_eer: f64,
    /// Threshold supplied for HTER, usually the validation EER threshold.
    pub threshold: Option<f64>,
    pub hter: Option<f64>,
    /// Share of videos whose majority vote matches the label.
    pub vote_accuracy: f64,
    pub per_video_decisions: Vec<VideoDecision>,
    pub skipped_videos: Vec<String>,
}

impl EvalReport {
    pub fn build(split: Split, scores: &VideoScores, threshold: Option<f64>) -> Result<Self> {
        let video = roc_eer(&scores.videos)?;
        let frame = roc_eer(&scores.frames)?;
        let hter = threshold.map(|t| hter(&scores.videos, t)).transpose()?;
        let correct = scores.decisions.iter().filter(|d| d.vote == d.label).count();
        Ok(Self {
            split,
            videos: scores.videos.len(),
            frames: scores.frames.len(),
            roc: video.roc,
            eer: video.eer,
            eer_threshold: video.eer_threshold,
            frame_eer: frame.eer,
            threshold,
            hter,
            vote_accuracy: correct as f64 / scores.decisions.len().max(1) as f64,
            per_video_decisions: scores.decisions.clone(),
            skipped_videos: scores.skipped.clone(),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// `threshold,far,frr` rows; sentinels are written as `-inf` / `inf`.
pub fn write_roc_csv(roc: &[RocPoint], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["threshold", "far", "frr"]).map_err(io)?;
    for p in roc {
        w.write_record([p.threshold.to_string(), p.far.to_string(), p.frr.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    w.into_inner()
        .map_err(|e| Error::Data(e.to_string()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}
