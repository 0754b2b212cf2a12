//! FB-IoU and evaluation reports.

use std::fmt::Write as _;

use camseg_tensor::TensorError;

use crate::data::{build_eval_set, DatasetIndex, Episode, Mask, RenderedEpisode, StageSplit};
use crate::error::{Error, Result};
use crate::model::FewShotSegmenter;

/// IoU of the pixels labelled `label` in each mask; 1 when neither has any.
pub fn class_iou(pred: &Mask, gt: &Mask, label: bool) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        let (p, g) = (p == label, g == label);
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean of foreground and background IoU.
pub fn fb_iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok((class_iou(pred, gt, true)? + class_iou(pred, gt, false)?) / 2.0)
}

fn check_same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Tensor(TensorError::Shape {
            op: "fb_iou",
            detail: format!("prediction {}×{} vs ground truth {}×{}", a.height(), a.width(), b.height(), b.width()),
        }));
    }
    Ok(())
}

/// Anything that maps an episode to a query mask.
pub trait Segmenter {
    fn segment(&self, episode: &RenderedEpisode) -> Result<Mask>;
}

impl Segmenter for FewShotSegmenter {
    fn segment(&self, episode: &RenderedEpisode) -> Result<Mask> {
        Ok(self.predict(episode)?.mask)
    }
}

/// Returns the query's ground truth.
pub struct OracleSegmenter;

impl Segmenter for OracleSegmenter {
    fn segment(&self, episode: &RenderedEpisode) -> Result<Mask> {
        Ok(episode.query.mask.clone())
    }
}

/// Predicts background everywhere.
pub struct BackgroundSegmenter;

impl Segmenter for BackgroundSegmenter {
    fn segment(&self, episode: &RenderedEpisode) -> Result<Mask> {
        Ok(Mask::filled(episode.query.mask.height(), episode.query.mask.width(), false))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub episode_id: usize,
    pub class_id: usize,
    pub fg_iou: f64,
    pub bg_iou: f64,
}

impl EpisodeRecord {
    pub fn fb_iou(&self) -> f64 {
        (self.fg_iou + self.bg_iou) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub records: Vec<EpisodeRecord>,
}

impl FoldReport {
    /// Arithmetic mean of per-episode FB-IoU.
    pub fn fb_iou(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(EpisodeRecord::fb_iou).sum::<f64>() / self.records.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub folds: Vec<FoldReport>,
}

impl EvalReport {
    pub fn per_fold_fb_iou(&self) -> Vec<(usize, f64)> {
        self.folds.iter().map(|f| (f.fold, f.fb_iou())).collect()
    }

    /// Mean over the folds present.
    pub fn mean_fb_iou(&self) -> f64 {
        if self.folds.is_empty() {
            return 0.0;
        }
        self.folds.iter().map(FoldReport::fb_iou).sum::<f64>() / self.folds.len() as f64
    }

    /// Human-readable summary followed by one line per episode.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}-shot FB-IoU\n", self.k);
        for (fold, v) in self.per_fold_fb_iou() {
            writeln!(out, "fold {fold}: {v:.4}").unwrap();
        }
        writeln!(out, "mean: {:.4}", self.mean_fb_iou()).unwrap();
        out.push_str("# fold episode class_id fg_iou bg_iou fb_iou\n");
        for f in &self.folds {
            for r in &f.records {
                writeln!(out, "{} {} {} {:.6} {:.6} {:.6}", f.fold, r.episode_id, r.class_id, r.fg_iou, r.bg_iou, r.fb_iou())
                    .unwrap();
            }
        }
        out
    }

    /// `key = value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = format!("k = {}\n", self.k);
        for f in &self.folds {
            writeln!(out, "fold{}.fb_iou = {:?}", f.fold, f.fb_iou()).unwrap();
            writeln!(out, "fold{}.episodes = {}", f.fold, f.records.len()).unwrap();
        }
        writeln!(out, "mean_fb_iou = {:?}", self.mean_fb_iou()).unwrap();
        out
    }
}

/// Supports drawn per evaluation episode; one-shot scoring uses the first.
pub const EVAL_SUPPORTS: usize = 5;

/// The fixed evaluation episodes of a fold: `pairs` test-class episodes from
/// the held-out pool, each carrying five supports so one- and five-shot runs
/// share their queries.
pub fn eval_episodes(index: &DatasetIndex, split: &StageSplit, pairs: usize, seed: u64) -> Result<Vec<Episode>> {
    build_eval_set(index, &split.test_classes, pairs, EVAL_SUPPORTS, seed)
}

/// Score `model` on every episode of `eval_set`, restricted to `k` shots.
pub fn evaluate(
    model: &impl Segmenter,
    index: &DatasetIndex,
    eval_set: &[Episode],
    fold: usize,
    k: usize,
) -> Result<FoldReport> {
    let records = eval_set
        .iter()
        .map(|ep| {
            let rendered = ep.with_shots(k)?.render(index)?;
            let pred = model.segment(&rendered)?;
            let gt = &rendered.query.mask;
            Ok(EpisodeRecord {
                episode_id: ep.id,
                class_id: ep.class_id,
                fg_iou: class_iou(&pred, gt, true)?,
                bg_iou: class_iou(&pred, gt, false)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FoldReport { fold, records })
}
