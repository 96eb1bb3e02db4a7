//! Seeded synthetic series with labelled point and subsequence anomalies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesObject;
use crate::error::{CocaError, Result};

pub const AR_COEFFICIENT: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaseSignal {
    Sine {
        period: f64,
        amplitude: f64,
    },
    /// `x_t = 0.9 x_{t-1} + e_t`, unit innovations.
    Ar1,
    /// Sine plus an AR(1) component scaled by `ar_weight`.
    Mixture {
        period: f64,
        amplitude: f64,
        ar_weight: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SubsequenceShape {
    /// Sine of the same amplitude at `factor` times the base frequency.
    Frequency(f64),
    /// Hold the value at the start of the span.
    Flat,
    /// Add a constant offset of `k` base amplitudes.
    Shift(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Injection {
    /// Value `magnitude` times the base range away from the series mean.
    GlobalPoint { at: usize, magnitude: f64 },
    /// Value just outside the range of the `radius` neighbours on each side.
    LocalPoint {
        at: usize,
        radius: usize,
        magnitude: f64,
    },
    Subsequence {
        start: usize,
        len: usize,
        shape: SubsequenceShape,
    },
}

impl Injection {
    /// Half-open labelled span.
    pub fn span(&self) -> (usize, usize) {
        match *self {
            Injection::GlobalPoint { at, .. } | Injection::LocalPoint { at, .. } => (at, at + 1),
            Injection::Subsequence { start, len, .. } => (start, start + len),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub id: String,
    pub length: usize,
    pub channels: usize,
    pub base: BaseSignal,
    /// Std of white observation noise added on top of the base.
    pub noise_std: f64,
    pub anomalies: Vec<Injection>,
    /// First test index; anomalies are normally placed after it.
    pub train_end: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.channels == 0 {
            return Err(CocaError::Config(
                "synthetic length and channels must be >= 1".into(),
            ));
        }
        let mut spans: Vec<(usize, (usize, usize))> = self
            .anomalies
            .iter()
            .map(|a| a.span())
            .enumerate()
            .collect();
        for (i, (s, e)) in &spans {
            if s >= e || *e > self.length {
                return Err(CocaError::Config(format!(
                    "injection {i} span [{s}, {e}) outside series of length {}",
                    self.length
                )));
            }
        }
        spans.sort_by_key(|(_, s)| *s);
        for pair in spans.windows(2) {
            if pair[1].1 .0 < pair[0].1 .1 {
                return Err(CocaError::OverlappingInjections(pair[0].0, pair[1].0));
            }
        }
        Ok(())
    }

    /// Fraction of labelled points.
    pub fn anomaly_rate(&self) -> f64 {
        let n: usize = self.anomalies.iter().map(|a| a.span().1 - a.span().0).sum();
        n as f64 / self.length as f64
    }
}

fn base_scale(base: &BaseSignal) -> f64 {
    match *base {
        BaseSignal::Sine { amplitude, .. } => amplitude,
        // stationary std of the AR(1) process
        BaseSignal::Ar1 => 1.0 / (1.0 - AR_COEFFICIENT * AR_COEFFICIENT).sqrt(),
        BaseSignal::Mixture {
            amplitude,
            ar_weight,
            ..
        } => amplitude + ar_weight / (1.0 - AR_COEFFICIENT * AR_COEFFICIENT).sqrt(),
    }
}

fn sine_at(t: usize, period: f64, amplitude: f64, phase: f64) -> f64 {
    amplitude * (2.0 * std::f64::consts::PI * t as f64 / period + phase).sin()
}

pub fn generate(spec: &SynthSpec) -> Result<TimeSeriesObject> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, d) = (spec.length, spec.channels);
    let mut values = vec![0.0; n * d];
    for c in 0..d {
        let phase = c as f64 * 0.7;
        let mut ar = 0.0;
        for t in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            ar = AR_COEFFICIENT * ar + e;
            let v = match spec.base {
                BaseSignal::Sine { period, amplitude } => sine_at(t, period, amplitude, phase),
                BaseSignal::Ar1 => ar,
                BaseSignal::Mixture {
                    period,
                    amplitude,
                    ar_weight,
                } => sine_at(t, period, amplitude, phase) + ar_weight * ar,
            };
            let noise: f64 = StandardNormal.sample(&mut rng);
            values[t * d + c] = v + spec.noise_std * noise;
        }
    }

    let scale = base_scale(&spec.base);
    let mut labels = vec![0u8; n];
    for inj in &spec.anomalies {
        let (s, e) = inj.span();
        labels[s..e].iter_mut().for_each(|l| *l = 1);
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        for c in 0..d {
            match *inj {
                Injection::GlobalPoint { at, magnitude } => {
                    values[at * d + c] = sign * magnitude * scale;
                }
                Injection::LocalPoint {
                    at,
                    radius,
                    magnitude,
                } => {
                    let lo = at.saturating_sub(radius);
                    let hi = (at + radius + 1).min(n);
                    let neigh = (lo..hi).filter(|&t| t != at).map(|t| values[t * d + c]);
                    let max = neigh.clone().fold(f64::NEG_INFINITY, f64::max);
                    let min = neigh.fold(f64::INFINITY, f64::min);
                    let range = (max - min).max(1e-6);
                    values[at * d + c] = if sign > 0.0 {
                        max + magnitude * range
                    } else {
                        min - magnitude * range
                    };
                }
                Injection::Subsequence { start, len, shape } => {
                    let hold = values[start * d + c];
                    for t in start..start + len {
                        let v = &mut values[t * d + c];
                        *v = match shape {
                            SubsequenceShape::Frequency(f) => {
                                let period = match spec.base {
                                    BaseSignal::Sine { period, .. }
                                    | BaseSignal::Mixture { period, .. } => period,
                                    BaseSignal::Ar1 => 16.0,
                                };
                                sine_at(t, period / f, scale, c as f64 * 0.7)
                            }
                            SubsequenceShape::Flat => hold,
                            SubsequenceShape::Shift(k) => *v + sign * k * scale,
                        };
                    }
                }
            }
        }
    }
    TimeSeriesObject::new(spec.id.clone(), values, labels, d, spec.train_end)
}

/// A clean sine series and an AR(1) series, each with `train_windows / 2`
/// training windows of length `window_len` and a short anomaly-free test tail.
pub fn standard_suite(seed: u64, train_windows: usize, window_len: usize) -> Vec<SynthSpec> {
    let per = train_windows.div_ceil(2) * window_len;
    let length = per + 4 * window_len;
    vec![
        SynthSpec {
            id: "sine".into(),
            length,
            channels: 1,
            base: BaseSignal::Sine {
                period: 24.0,
                amplitude: 1.0,
            },
            noise_std: 0.05,
            anomalies: Vec::new(),
            train_end: per,
            seed,
        },
        SynthSpec {
            id: "ar1".into(),
            length,
            channels: 1,
            base: BaseSignal::Ar1,
            noise_std: 0.0,
            anomalies: Vec::new(),
            train_end: per,
            seed: seed.wrapping_add(1),
        },
    ]
}

/// Long clean training prefix followed by a test part with long subsequence
/// anomalies and a few global spikes; `rate` of the test points are labelled.
pub fn detection_spec(
    seed: u64,
    period: f64,
    train_len: usize,
    test_len: usize,
    subsequences: usize,
    spikes: usize,
    rate: f64,
) -> SynthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1CE);
    let budget = (rate * test_len as f64).round() as usize;
    let sub_len = (budget.saturating_sub(spikes) / subsequences.max(1)).max(1);
    let slots = subsequences + spikes;
    let slot = test_len / slots.max(1);
    let mut anomalies = Vec::new();
    let mut kinds: Vec<bool> = (0..slots).map(|i| i < subsequences).collect();
    // interleave deterministically by seed
    for i in (1..kinds.len()).rev() {
        kinds.swap(i, rng.gen_range(0..=i));
    }
    let mut placed_subs = 0;
    for (i, is_sub) in kinds.into_iter().enumerate() {
        let lo = train_len + i * slot;
        if is_sub {
            let room = slot.saturating_sub(sub_len + 2).max(1);
            let start = lo + 1 + rng.gen_range(0..room);
            placed_subs += 1;
            let shape = if placed_subs % 2 == 1 {
                SubsequenceShape::Frequency(3.0)
            } else {
                SubsequenceShape::Shift(1.5)
            };
            anomalies.push(Injection::Subsequence {
                start,
                len: sub_len,
                shape,
            });
        } else {
            let at = lo + 1 + rng.gen_range(0..slot.saturating_sub(2).max(1));
            anomalies.push(Injection::GlobalPoint {
                at,
                magnitude: 10.0,
            });
        }
    }
    SynthSpec {
        id: format!("detect-{seed}"),
        length: train_len + test_len,
        channels: 1,
        base: BaseSignal::Sine {
            period,
            amplitude: 1.0,
        },
        noise_std: 0.05,
        anomalies,
        train_end: train_len,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::segments;

    fn sine_spec(anomalies: Vec<Injection>) -> SynthSpec {
        SynthSpec {
            id: "s".into(),
            length: 1000,
            channels: 1,
            base: BaseSignal::Sine {
                period: 50.0,
                amplitude: 1.0,
            },
            noise_std: 0.0,
            anomalies,
            train_end: 400,
            seed: 3,
        }
    }

    #[test]
    fn global_point_labels_one_point() {
        let ts = generate(&sine_spec(vec![Injection::GlobalPoint {
            at: 500,
            magnitude: 10.0,
        }]))
        .unwrap();
        assert_eq!(ts.labels.iter().filter(|&&l| l == 1).count(), 1);
        assert_eq!(ts.labels[500], 1);
        assert_eq!(ts.values[500].abs(), 10.0);
    }

    #[test]
    fn subsequence_labels_one_run() {
        let spec = sine_spec(vec![Injection::Subsequence {
            start: 600,
            len: 40,
            shape: SubsequenceShape::Frequency(3.0),
        }]);
        let ts = generate(&spec).unwrap();
        let segs = segments(&ts.labels);
        assert_eq!(segs.len(), 1);
        assert_eq!((segs[0].start, segs[0].end), (600, 639));
    }

    #[test]
    fn local_point_leaves_neighbourhood_range() {
        let ts = generate(&sine_spec(vec![Injection::LocalPoint {
            at: 700,
            radius: 5,
            magnitude: 0.5,
        }]))
        .unwrap();
        let v = ts.values[700];
        let neigh: Vec<f64> = (695..706)
            .filter(|&t| t != 700)
            .map(|t| ts.values[t])
            .collect();
        let max = neigh.iter().cloned().fold(f64::MIN, f64::max);
        let min = neigh.iter().cloned().fold(f64::MAX, f64::min);
        assert!(v > max || v < min);
        assert!(v.abs() < 2.0, "local anomaly stays near the global range");
    }

    #[test]
    fn same_seed_same_object() {
        let spec = SynthSpec {
            base: BaseSignal::Mixture {
                period: 30.0,
                amplitude: 1.0,
                ar_weight: 0.3,
            },
            noise_std: 0.1,
            ..sine_spec(vec![])
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn overlapping_injections_rejected() {
        let spec = sine_spec(vec![
            Injection::Subsequence {
                start: 500,
                len: 20,
                shape: SubsequenceShape::Flat,
            },
            Injection::GlobalPoint {
                at: 510,
                magnitude: 10.0,
            },
        ]);
        assert!(matches!(
            generate(&spec),
            Err(CocaError::OverlappingInjections(0, 1))
        ));
    }

    #[test]
    fn detection_spec_hits_rate() {
        let spec = detection_spec(1, 16.0, 3200, 32000, 4, 8, 0.02);
        let ts = generate(&spec).unwrap();
        let labelled = ts.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(labelled as f64 / ts.len() as f64, spec.anomaly_rate());
        let test_rate = labelled as f64 / 32000.0;
        assert!((test_rate - 0.02).abs() < 0.001, "{test_rate}");
        assert!(ts.labels[..3200].iter().all(|&l| l == 0));
    }

    #[test]
    fn standard_suite_window_budget() {
        let specs = standard_suite(0, 200, 16);
        let windows: usize = specs.iter().map(|s| s.train_end / 16).sum();
        assert_eq!(windows, 200);
    }
}
