//! Window scoring, threshold selection and point-level predictions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::WindowBatch;
use crate::error::{CocaError, Result};
use crate::metrics::{self, Protocol};
use crate::model::{CocaModel, PairRoute};
use crate::objective::{anomaly_scores, nearest_rank_quantile, Center};

/// Windows scored per forward pass; eval mode is per-sample, so this only
/// bounds memory.
const SCORE_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub window_scores: Vec<f64>,
    pub threshold: f64,
    /// First point covered by `point_predictions`.
    pub origin: usize,
    pub point_predictions: Vec<u8>,
    pub selected_rate: Option<f64>,
}

impl Detection {
    pub fn window_predictions(&self) -> Vec<u8> {
        self.window_scores
            .iter()
            .map(|&s| (s > self.threshold) as u8)
            .collect()
    }
}

/// Anomaly score of every window against a frozen center.
pub fn score_dataset(
    model: &CocaModel,
    center: &Center,
    windows: &WindowBatch,
    route: PairRoute,
) -> Result<Vec<f64>> {
    if !center.frozen {
        return Err(CocaError::CenterNotFrozen);
    }
    let mut scores = Vec::with_capacity(windows.len());
    let idx: Vec<usize> = (0..windows.len()).collect();
    for chunk in idx.chunks(SCORE_CHUNK) {
        let part = windows.select(chunk);
        let out = model.forward_eval(&part, route)?;
        scores.extend(anomaly_scores(&out.q, &out.q_prime, center)?);
    }
    Ok(scores)
}

/// `S > tau` per window, broadcast to the points of its span. Points of
/// `range` not covered by any window stay 0.
pub fn classify(
    scores: &[f64],
    tau: f64,
    spans: &[(usize, usize)],
    range: (usize, usize),
) -> Detection {
    assert_eq!(scores.len(), spans.len(), "one span per score");
    let (origin, end) = range;
    let mut preds = vec![0u8; end - origin];
    for (&s, &(a, b)) in scores.iter().zip(spans) {
        if s > tau {
            preds[a - origin..b - origin]
                .iter_mut()
                .for_each(|p| *p = 1);
        }
    }
    Detection {
        window_scores: scores.to_vec(),
        threshold: tau,
        origin,
        point_predictions: preds,
        selected_rate: None,
    }
}

/// Anomaly-rate grid 0.01% .. 0.30% in steps of 0.01%.
pub fn default_p_grid() -> Vec<f64> {
    (1..=30).map(|k| k as f64 / 10_000.0).collect()
}

/// Threshold at the `(1 - p)` nearest-rank quantile of the scores.
pub fn rate_threshold(scores: &[f64], p: f64) -> Result<f64> {
    nearest_rank_quantile(scores, 1.0 - p)
}

/// One scored object with the labels of its evaluated point range.
#[derive(Debug, Clone)]
pub struct ScoredObject {
    pub id: String,
    pub scores: Vec<f64>,
    pub spans: Vec<(usize, usize)>,
    pub range: (usize, usize),
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub p: f64,
    /// Per-object thresholds, in input order.
    pub thresholds: Vec<f64>,
    pub f1: f64,
}

/// Searches the rate grid for the best aggregated RPA F1. Each object gets
/// its own quantile threshold for the shared rate; ties go to the smaller `p`.
pub fn select_threshold(objects: &[ScoredObject], p_grid: &[f64]) -> Result<ThresholdChoice> {
    if p_grid.is_empty() {
        return Err(CocaError::Config("empty anomaly-rate grid".into()));
    }
    let mut grid = p_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut best: Option<ThresholdChoice> = None;
    for &p in &grid {
        let mut thresholds = Vec::with_capacity(objects.len());
        let mut counts = Vec::with_capacity(objects.len());
        for o in objects {
            let tau = rate_threshold(&o.scores, p)?;
            let det = classify(&o.scores, tau, &o.spans, o.range);
            counts.push(metrics::rpa_counts(&o.labels, &det.point_predictions)?);
            thresholds.push(tau);
        }
        let f1 = metrics::f1(&metrics::aggregate(Protocol::Rpa, &counts)?);
        if best.as_ref().map_or(true, |b| f1 > b.f1) {
            best = Some(ThresholdChoice { p, thresholds, f1 });
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Threshold that flags only the top-scoring window(s): the largest score
/// strictly below the maximum, or -1 when every score ties.
pub fn max_score_threshold(scores: &[f64]) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    scores
        .iter()
        .cloned()
        .filter(|&s| s < max)
        .fold(None, |acc: Option<f64>, s| {
            Some(acc.map_or(s, |a| a.max(s)))
        })
        .unwrap_or(-1.0)
}

/// One row of a scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub window_index: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub predicted: u8,
}

/// Rows for one detection, numbering windows from `first_index`.
pub fn score_lines(
    det: &Detection,
    spans: &[(usize, usize)],
    first_index: usize,
) -> Vec<ScoreLine> {
    det.window_scores
        .iter()
        .zip(spans)
        .enumerate()
        .map(|(i, (&s, &(a, b)))| ScoreLine {
            window_index: first_index + i,
            start: a,
            end: b,
            score: s,
            predicted: (s > det.threshold) as u8,
        })
        .collect()
}

pub fn write_score_lines(path: impl AsRef<Path>, lines: &[ScoreLine]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| CocaError::io(path, e.into()))?;
    for line in lines {
        w.serialize(line)
            .map_err(|e| CocaError::io(path, e.into()))?;
    }
    w.flush().map_err(|e| CocaError::io(path, e))
}

pub fn write_scores_csv(
    path: impl AsRef<Path>,
    det: &Detection,
    spans: &[(usize, usize)],
) -> Result<()> {
    write_score_lines(path, &score_lines(det, spans, 0))
}

/// Scores and predictions of a scores CSV, as `(scores, spans, predicted)`.
pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<(Vec<f64>, Vec<(usize, usize)>, Vec<u8>)> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| CocaError::io(path, e.into()))?;
    let (mut scores, mut spans, mut preds) = (Vec::new(), Vec::new(), Vec::new());
    for (i, row) in r.deserialize::<ScoreLine>().enumerate() {
        let row = row.map_err(|e| CocaError::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        scores.push(row.score);
        spans.push((row.start, row.end));
        preds.push(row.predicted);
    }
    Ok((scores, spans, preds))
}
