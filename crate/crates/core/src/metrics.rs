//! Point-wise (PW), point-adjusted (PA) and revised point-adjusted (RPA)
//! counting, and F1 over counts aggregated across objects.

use serde::{Deserialize, Serialize};

use crate::error::{CocaError, Result};

/// Maximal run of ones, inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn overlaps(&self, other: &Segment) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Protocol {
    Pw,
    Pa,
    Rpa,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Pw, Protocol::Pa, Protocol::Rpa];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Pw => "PW",
            Protocol::Pa => "PA",
            Protocol::Rpa => "RPA",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pw" => Ok(Protocol::Pw),
            "pa" => Ok(Protocol::Pa),
            "rpa" => Ok(Protocol::Rpa),
            other => Err(CocaError::Usage(format!(
                "unknown protocol `{other}` (pw, pa, rpa)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub protocol: Protocol,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MetricCounts {
    pub fn zero(protocol: Protocol) -> Self {
        MetricCounts {
            protocol,
            tp: 0,
            fp: 0,
            fn_: 0,
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn segments(labels: &[u8]) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &l) in labels.iter().enumerate() {
        match (l != 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Segment {
                    start: s,
                    end: i - 1,
                });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Segment {
            start: s,
            end: labels.len() - 1,
        });
    }
    out
}

fn check_len(labels: &[u8], preds: &[u8]) -> Result<()> {
    if labels.len() != preds.len() {
        return Err(CocaError::LengthMismatch {
            left: labels.len(),
            right: preds.len(),
        });
    }
    Ok(())
}

fn pointwise(protocol: Protocol, labels: &[u8], preds: &[u8]) -> MetricCounts {
    let mut c = MetricCounts::zero(protocol);
    for (&l, &p) in labels.iter().zip(preds) {
        match (l != 0, p != 0) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c
}

pub fn pw_counts(labels: &[u8], preds: &[u8]) -> Result<MetricCounts> {
    check_len(labels, preds)?;
    Ok(pointwise(Protocol::Pw, labels, preds))
}

/// Any hit inside a true segment marks the whole segment as detected.
pub fn pa_counts(labels: &[u8], preds: &[u8]) -> Result<MetricCounts> {
    check_len(labels, preds)?;
    let mut adjusted = preds.to_vec();
    for seg in segments(labels) {
        if preds[seg.start..=seg.end].iter().any(|&p| p != 0) {
            adjusted[seg.start..=seg.end]
                .iter_mut()
                .for_each(|p| *p = 1);
        }
    }
    Ok(pointwise(Protocol::Pa, labels, &adjusted))
}

/// One TP per true segment overlapped by a predicted run, one FN per missed
/// true segment, one FP per predicted run touching no true segment.
pub fn rpa_counts(labels: &[u8], preds: &[u8]) -> Result<MetricCounts> {
    check_len(labels, preds)?;
    let truth = segments(labels);
    let predicted = segments(preds);
    let mut c = MetricCounts::zero(Protocol::Rpa);
    for t in &truth {
        if predicted.iter().any(|p| p.overlaps(t)) {
            c.tp += 1;
        } else {
            c.fn_ += 1;
        }
    }
    c.fp = predicted
        .iter()
        .filter(|p| !truth.iter().any(|t| t.overlaps(p)))
        .count();
    Ok(c)
}

pub fn counts(protocol: Protocol, labels: &[u8], preds: &[u8]) -> Result<MetricCounts> {
    match protocol {
        Protocol::Pw => pw_counts(labels, preds),
        Protocol::Pa => pa_counts(labels, preds),
        Protocol::Rpa => rpa_counts(labels, preds),
    }
}

/// `2tp / (2tp + fp + fn)`, zero when nothing was counted.
pub fn f1(c: &MetricCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

pub fn aggregate(protocol: Protocol, items: &[MetricCounts]) -> Result<MetricCounts> {
    let mut total = MetricCounts::zero(protocol);
    for c in items {
        if c.protocol != protocol {
            return Err(CocaError::MixedProtocols(
                protocol.name().into(),
                c.protocol.name().into(),
            ));
        }
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn_ += c.fn_;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub protocol: Protocol,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<MetricCounts> for ScoreRow {
    fn from(c: MetricCounts) -> Self {
        ScoreRow {
            protocol: c.protocol,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision: c.precision(),
            recall: c.recall(),
            f1: f1(&c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectScores {
    pub object: String,
    pub rows: Vec<ScoreRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scorecard {
    pub objects: Vec<ObjectScores>,
    pub aggregate: Vec<ScoreRow>,
}

impl Scorecard {
    /// All three protocols per object, plus dataset-level sums.
    pub fn build(objects: &[(String, Vec<u8>, Vec<u8>)]) -> Result<Self> {
        Self::build_for(&Protocol::ALL, objects)
    }

    pub fn build_for(
        protocols: &[Protocol],
        objects: &[(String, Vec<u8>, Vec<u8>)],
    ) -> Result<Self> {
        let mut per = Vec::new();
        let mut all: Vec<Vec<MetricCounts>> = vec![Vec::new(); protocols.len()];
        for (id, labels, preds) in objects {
            let mut rows = Vec::new();
            for (k, &p) in protocols.iter().enumerate() {
                let c = counts(p, labels, preds)?;
                all[k].push(c);
                rows.push(c.into());
            }
            per.push(ObjectScores {
                object: id.clone(),
                rows,
            });
        }
        let aggregate = protocols
            .iter()
            .zip(&all)
            .map(|(&p, cs)| aggregate(p, cs).map(ScoreRow::from))
            .collect::<Result<_>>()?;
        Ok(Scorecard {
            objects: per,
            aggregate,
        })
    }

    pub fn aggregate_f1(&self, protocol: Protocol) -> Option<f64> {
        self.aggregate
            .iter()
            .find(|r| r.protocol == protocol)
            .map(|r| r.f1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LABELS: [u8; 10] = [0, 1, 1, 0, 0, 1, 1, 1, 0, 0];
    const PREDS: [u8; 10] = [0, 1, 0, 0, 1, 0, 0, 0, 0, 0];

    fn seg(start: usize, end: usize) -> Segment {
        Segment { start, end }
    }

    #[test]
    fn segment_extraction() {
        assert_eq!(segments(&[0, 1, 1, 0, 1]), vec![seg(1, 2), seg(4, 4)]);
        assert!(segments(&[0; 5]).is_empty());
        assert_eq!(segments(&[1; 5]), vec![seg(0, 4)]);
    }

    #[test]
    fn worked_example_all_protocols() {
        let pw = pw_counts(&LABELS, &PREDS).unwrap();
        assert_eq!((pw.tp, pw.fp, pw.fn_), (1, 1, 4));
        assert_eq!(f1(&pw), 2.0 / 7.0);
        let pa = pa_counts(&LABELS, &PREDS).unwrap();
        assert_eq!((pa.tp, pa.fp, pa.fn_), (2, 1, 3));
        assert_eq!(f1(&pa), 0.5);
        let rpa = rpa_counts(&LABELS, &PREDS).unwrap();
        assert_eq!((rpa.tp, rpa.fp, rpa.fn_), (1, 1, 1));
        assert_eq!(f1(&rpa), 0.5);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let pw = pw_counts(&LABELS, &LABELS).unwrap();
        assert_eq!((pw.fp, pw.fn_), (0, 0));
        let none = pw_counts(&LABELS, &[0; 10]).unwrap();
        assert_eq!((none.tp, none.fn_), (0, 5));
        let pa = pa_counts(&LABELS, &[0; 10]).unwrap();
        assert_eq!((pa.tp, pa.fn_), (0, 5));
        let rpa = rpa_counts(&LABELS, &LABELS).unwrap();
        assert_eq!((rpa.tp, rpa.fp, rpa.fn_), (2, 0, 0));
    }

    #[test]
    fn pa_single_hit_credits_whole_segment() {
        let mut labels = vec![0u8; 120];
        labels[10..110].iter_mut().for_each(|l| *l = 1);
        let mut preds = vec![0u8; 120];
        preds[57] = 1;
        assert_eq!(pa_counts(&labels, &preds).unwrap().tp, 100);
    }

    #[test]
    fn rpa_one_prediction_spanning_two_segments() {
        let labels = [1, 1, 0, 1, 1, 0];
        let preds = [0, 1, 1, 1, 0, 0];
        let c = rpa_counts(&labels, &preds).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (2, 0, 0));
    }

    #[test]
    fn f1_conventions() {
        let c = |tp, fp, fn_| MetricCounts {
            protocol: Protocol::Pw,
            tp,
            fp,
            fn_,
        };
        assert_eq!(f1(&c(1, 1, 1)), 0.5);
        assert_eq!(f1(&c(0, 0, 0)), 0.0);
        assert_eq!(f1(&c(2, 2, 1)), 4.0 / 7.0);
    }

    #[test]
    fn aggregation() {
        let c = |tp, fp, fn_| MetricCounts {
            protocol: Protocol::Rpa,
            tp,
            fp,
            fn_,
        };
        let total = aggregate(Protocol::Rpa, &[c(1, 0, 1), c(1, 2, 0)]).unwrap();
        assert_eq!((total.tp, total.fp, total.fn_), (2, 2, 1));
        assert_eq!(aggregate(Protocol::Rpa, &[c(3, 1, 4)]).unwrap(), c(3, 1, 4));
        assert_eq!(aggregate(Protocol::Rpa, &[]).unwrap(), c(0, 0, 0));
        let pw = MetricCounts::zero(Protocol::Pw);
        assert!(matches!(
            aggregate(Protocol::Rpa, &[pw]),
            Err(CocaError::MixedProtocols(..))
        ));
    }

    #[test]
    fn length_mismatch() {
        assert!(pw_counts(&[0, 1], &[0]).is_err());
        assert!(pa_counts(&[0, 1], &[0]).is_err());
        assert!(rpa_counts(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn scorecard_rows() {
        let card = Scorecard::build(&[("a".into(), LABELS.to_vec(), PREDS.to_vec())]).unwrap();
        assert_eq!(card.aggregate.len(), 3);
        assert_eq!(card.aggregate_f1(Protocol::Pw), Some(2.0 / 7.0));
    }

    fn bits(max: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (1..=max).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..=1, n),
                proptest::collection::vec(0u8..=1, n),
            )
        })
    }

    proptest! {
        #[test]
        fn rpa_partitions_true_segments((labels, preds) in bits(30)) {
            let c = rpa_counts(&labels, &preds).unwrap();
            prop_assert_eq!(c.tp + c.fn_, segments(&labels).len());
        }

        #[test]
        fn pa_dominates_pw_dominates_rpa((labels, preds) in bits(20)) {
            let pw = pw_counts(&labels, &preds).unwrap();
            let pa = pa_counts(&labels, &preds).unwrap();
            let rpa = rpa_counts(&labels, &preds).unwrap();
            prop_assert!(pa.tp >= pw.tp);
            prop_assert!(pw.tp >= rpa.tp);
        }

        #[test]
        fn isolated_points_agree(n in 1usize..30, seed in any::<u64>()) {
            // labels and preds only at even positions, so every run has length 1
            let labels: Vec<u8> = (0..n).map(|i| (i % 2 == 0 && (seed >> (i % 64)) & 1 == 1) as u8).collect();
            let preds: Vec<u8> = (0..n).map(|i| (i % 2 == 0 && (seed >> ((i + 7) % 64)) & 1 == 1) as u8).collect();
            let pw = pw_counts(&labels, &preds).unwrap();
            let pa = pa_counts(&labels, &preds).unwrap();
            let rpa = rpa_counts(&labels, &preds).unwrap();
            prop_assert_eq!((pw.tp, pw.fp, pw.fn_), (pa.tp, pa.fp, pa.fn_));
            prop_assert_eq!((pw.tp, pw.fp, pw.fn_), (rpa.tp, rpa.fp, rpa.fn_));
        }
    }
}
