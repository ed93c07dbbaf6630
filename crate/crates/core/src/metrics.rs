//! Segmentation and retrieval metrics.
//!
//! Per-class IOU is `n_ii / (Σ_j n_ij + Σ_j n_ji − n_ii)` over a confusion
//! matrix whose rows are ground truth. A sketch scores the mean class IOU over
//! the labels present in its ground truth, and a test set scores the
//! unweighted mean over sketches.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{LabelMap, BACKGROUND};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    classes: usize,
    /// Row-major `classes × classes`; `n[i * classes + j]` = gt `i`, pred `j`.
    n: Vec<u64>,
}

impl ConfusionCounts {
    pub fn zeros(classes: usize) -> Self {
        Self { classes, n: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.n[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.n.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.n[i * self.classes..(i + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, i: usize) -> u64 {
        (0..self.classes).map(|j| self.get(j, i)).sum()
    }

    pub fn add(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::DimensionMismatch(format!("confusion {} vs {} classes", self.classes, other.classes)));
        }
        for (a, b) in self.n.iter_mut().zip(&other.n) {
            *a += b;
        }
        Ok(())
    }
}

fn check_pair(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.width() != gt.width() || pred.height() != gt.height() || pred.classes() != gt.classes() {
        return Err(Error::DimensionMismatch(format!(
            "pred {}x{}/{} vs gt {}x{}/{}",
            pred.width(),
            pred.height(),
            pred.classes(),
            gt.width(),
            gt.height(),
            gt.classes()
        )));
    }
    Ok(())
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap) -> Result<ConfusionCounts> {
    check_pair(pred, gt)?;
    let mut c = ConfusionCounts::zeros(gt.classes());
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        c.n[g as usize * c.classes + p as usize] += 1;
    }
    Ok(c)
}

/// IOU of class `i`; `None` when the class is absent from both maps.
pub fn class_iou(counts: &ConfusionCounts, i: usize) -> Option<f64> {
    if i >= counts.classes {
        return None;
    }
    let inter = counts.get(i, i);
    let union = counts.row_sum(i) + counts.col_sum(i) - inter;
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Whether the background class counts toward a sketch's part labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackgroundMode {
    #[default]
    Include,
    Exclude,
}

/// Mean class IOU over the distinct labels of `gt`.
///
/// With [`BackgroundMode::Exclude`] and an all-background ground truth there
/// is nothing to average and the result is an error.
pub fn sketch_iou_with(pred: &LabelMap, gt: &LabelMap, mode: BackgroundMode) -> Result<f64> {
    let counts = confusion(pred, gt)?;
    let labels: Vec<u8> =
        gt.present_classes().into_iter().filter(|&c| mode == BackgroundMode::Include || c != BACKGROUND).collect();
    if labels.is_empty() {
        return Err(Error::Empty("ground-truth part labels"));
    }
    let sum: f64 = labels.iter().map(|&c| class_iou(&counts, c as usize).expect("present in ground truth")).sum();
    Ok(sum / labels.len() as f64)
}

pub fn sketch_iou(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    sketch_iou_with(pred, gt, BackgroundMode::Include)
}

pub fn average_iou_with(pairs: &[(LabelMap, LabelMap)], mode: BackgroundMode) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("sketch list"));
    }
    let scores: Vec<f64> = pairs.par_iter().map(|(p, g)| sketch_iou_with(p, g, mode)).collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean sketch IOU over `(pred, gt)` pairs.
pub fn average_iou(pairs: &[(LabelMap, LabelMap)]) -> Result<f64> {
    average_iou_with(pairs, BackgroundMode::Include)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalRun {
    /// Candidate ids per query, best first.
    pub rankings: Vec<Vec<usize>>,
    /// Correct candidate per query.
    pub truth: Vec<usize>,
}

impl RetrievalRun {
    pub fn new(rankings: Vec<Vec<usize>>, truth: Vec<usize>) -> Result<Self> {
        if rankings.len() != truth.len() {
            return Err(Error::DimensionMismatch(format!("{} rankings for {} queries", rankings.len(), truth.len())));
        }
        for (r, &t) in rankings.iter().zip(&truth) {
            if r.iter().filter(|&&c| c == t).count() > 1 {
                return Err(Error::InvalidArgument(format!("truth id {t} ranked twice")));
            }
        }
        Ok(Self { rankings, truth })
    }

    pub fn queries(&self) -> usize {
        self.truth.len()
    }
}

/// Fraction of queries whose truth is among the first `k` candidates.
/// `k` beyond a ranking's length covers the whole ranking.
pub fn top_k_accuracy(run: &RetrievalRun, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if run.queries() == 0 {
        return Err(Error::Empty("retrieval queries"));
    }
    let hits = run.rankings.iter().zip(&run.truth).filter(|(r, t)| r.iter().take(k).any(|c| c == *t)).count();
    Ok(hits as f64 / run.queries() as f64)
}
