//! The contrastive one-class objective: center, anomaly score, invariance
//! (hard and soft-boundary), variance hinge, and the ablation variants.
//!
//! Projections enter raw; every loss normalises them onto the unit sphere
//! first. [`coca_loss_with_grad`] also returns the gradient with respect to
//! the raw projections, treating the center as a constant.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CocaError, Result};
use crate::model::PairRoute;

/// Components smaller than this are pushed away from zero before the center
/// is normalised.
pub const CENTER_MIN_COMPONENT: f64 = 1e-6;

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn l2_normalize(u: &[f64]) -> Result<Vec<f64>> {
    let n = norm(u);
    if n == 0.0 || !n.is_finite() {
        return Err(CocaError::ZeroVector);
    }
    Ok(u.iter().map(|v| v / n).collect())
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(CocaError::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Unit-norm one-class center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Center {
    pub values: Vec<f64>,
    pub frozen: bool,
}

impl Center {
    /// Short hex digest of the center's bits, used to track immutability.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        format!("{:x}", h.finalize())[..16].to_string()
    }
}

/// Mean of all `2N` (already normalised) projections, with the nonzero
/// guard, renormalised.
pub fn compute_center(q: &[Vec<f64>], q_prime: &[Vec<f64>]) -> Result<Center> {
    if q.is_empty() {
        return Err(CocaError::EmptyBatch("center of zero projections".into()));
    }
    if q.len() != q_prime.len() {
        return Err(CocaError::LengthMismatch {
            left: q.len(),
            right: q_prime.len(),
        });
    }
    let dim = q[0].len();
    let mut c = vec![0.0; dim];
    for v in q.iter().chain(q_prime) {
        if v.len() != dim {
            return Err(CocaError::DimensionMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        c.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    let denom = (2 * q.len()) as f64;
    for x in c.iter_mut() {
        *x /= denom;
        if x.abs() < CENTER_MIN_COMPONENT {
            *x = if *x < 0.0 {
                -CENTER_MIN_COMPONENT
            } else {
                CENTER_MIN_COMPONENT
            };
        }
    }
    Ok(Center {
        values: l2_normalize(&c)?,
        frozen: false,
    })
}

/// `S_i = 2 - sim(q_i, Ce) - sim(q'_i, Ce)`, each in `[0, 4]`.
pub fn anomaly_scores(q: &[Vec<f64>], q_prime: &[Vec<f64>], center: &Center) -> Result<Vec<f64>> {
    if q.len() != q_prime.len() {
        return Err(CocaError::LengthMismatch {
            left: q.len(),
            right: q_prime.len(),
        });
    }
    q.iter()
        .zip(q_prime)
        .map(|(a, b)| Ok(2.0 - cosine_sim(a, &center.values)? - cosine_sim(b, &center.values)?))
        .collect()
}

/// Mean score over the batch.
pub fn invariance(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(CocaError::EmptyBatch("invariance of zero scores".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Index (into `scores`) of the nearest-rank `(1 - eta)` quantile.
fn quantile_index(scores: &[f64], eta: f64) -> usize {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let rank = ((1.0 - eta) * n as f64).ceil() as isize - 1;
    order[rank.clamp(0, n as isize - 1) as usize]
}

/// Nearest-rank empirical quantile: element `ceil(level * N) - 1` of the
/// ascending sort (clamped to the valid range).
pub fn nearest_rank_quantile(values: &[f64], level: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CocaError::EmptyBatch("quantile of no values".into()));
    }
    Ok(values[quantile_index(values, 1.0 - level)])
}

/// Soft-boundary invariance. Returns `(d_soft, boundary)` where `boundary`
/// is the `(1 - eta)` quantile of the scores.
pub fn soft_boundary_invariance(scores: &[f64], nu: f64, eta: f64) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(CocaError::EmptyBatch(
            "soft invariance of zero scores".into(),
        ));
    }
    let boundary = scores[quantile_index(scores, eta)];
    let hinge: f64 = scores.iter().map(|s| (s - boundary).max(0.0)).sum();
    Ok((boundary + hinge / (nu * scores.len() as f64), boundary))
}

/// Per-dimension batch std (population), hinged at `gamma` and averaged over
/// dimensions.
pub fn variance_term(q: &[Vec<f64>], gamma: f64, eps: f64) -> Result<f64> {
    Ok(variance_with_grad(q, gamma, eps, false)?.0)
}

fn variance_with_grad(
    q: &[Vec<f64>],
    gamma: f64,
    eps: f64,
    want_grad: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = q.len();
    if n < 2 {
        return Err(CocaError::VarianceUndefined(n));
    }
    let dim = q[0].len();
    let nf = n as f64;
    let mut mean = vec![0.0; dim];
    for v in q {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut var = vec![0.0; dim];
    for v in q {
        for j in 0..dim {
            let c = v[j] - mean[j];
            var[j] += c * c;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / nf + eps).sqrt()).collect();
    let value = std.iter().map(|s| (gamma - s).max(0.0)).sum::<f64>() / dim as f64;
    let mut grad = Vec::new();
    if want_grad {
        grad = q
            .iter()
            .map(|v| {
                (0..dim)
                    .map(|j| {
                        if gamma > std[j] {
                            -(v[j] - mean[j]) / (dim as f64 * nf * std[j])
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    Hard,
    Soft,
}

/// Model variants. `NoAug` shares the full objective and only disables
/// augmentation; the others change the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    NoAug,
    NoOC,
    NoCL,
    NoVar,
    CocaVi,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoAug,
        Variant::NoOC,
        Variant::NoCL,
        Variant::NoVar,
        Variant::CocaVi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAug => "noaug",
            Variant::NoOC => "nooc",
            Variant::NoCL => "nocl",
            Variant::NoVar => "novar",
            Variant::CocaVi => "coca-vi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| {
                v.name() == key
                    || (key == "cocavi" && *v == Variant::CocaVi)
                    || (key == "coca" && *v == Variant::Full)
            })
            .ok_or_else(|| CocaError::Usage(format!("unknown variant `{s}`")))
    }

    pub fn route(self) -> PairRoute {
        match self {
            Variant::CocaVi => PairRoute::Views,
            _ => PairRoute::Sequence,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub mu: f64,
    pub gamma: f64,
    pub eps: f64,
    pub nu: f64,
    /// Quantile parameter of the soft boundary; `None` means `eta = nu`.
    pub eta: Option<f64>,
    pub mode: BoundaryMode,
    pub variant: Variant,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: 1.0,
            mu: 0.1,
            gamma: 1.0,
            eps: 1e-4,
            nu: 0.01,
            eta: None,
            mode: BoundaryMode::Hard,
            variant: Variant::Full,
        }
    }
}

impl ObjectiveConfig {
    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or(self.nu)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(CocaError::Config(format!(
                "nu = {} must be in (0, 1]",
                self.nu
            )));
        }
        let eta = self.eta();
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(CocaError::Config(format!("eta = {eta} must be in (0, 1]")));
        }
        if !(self.gamma > 0.0) {
            return Err(CocaError::Config(format!(
                "gamma = {} must be > 0",
                self.gamma
            )));
        }
        if !(self.eps > 0.0) || !(self.lambda >= 0.0) || !(self.mu >= 0.0) {
            return Err(CocaError::Config(
                "eps must be > 0; lambda and mu must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub invariance: f64,
    pub variance_q: f64,
    pub variance_q_prime: f64,
    pub total: f64,
    /// Soft-boundary quantile; `None` in hard mode.
    pub boundary: Option<f64>,
}

/// Loss value only.
pub fn coca_loss(
    q_raw: &[Vec<f64>],
    q_prime_raw: &[Vec<f64>],
    center: &Center,
    cfg: &ObjectiveConfig,
    route: PairRoute,
) -> Result<LossBreakdown> {
    Ok(evaluate(q_raw, q_prime_raw, center, cfg, route, false)?.0)
}

/// Loss and its gradient with respect to the raw projections.
pub fn coca_loss_with_grad(
    q_raw: &[Vec<f64>],
    q_prime_raw: &[Vec<f64>],
    center: &Center,
    cfg: &ObjectiveConfig,
    route: PairRoute,
) -> Result<(LossBreakdown, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    evaluate(q_raw, q_prime_raw, center, cfg, route, true)
}

/// Backprop through `u / |u|`.
fn normalize_backward(raw: &[f64], unit: &[f64], d_unit: &[f64]) -> Vec<f64> {
    let n = norm(raw);
    let proj = dot(unit, d_unit);
    d_unit
        .iter()
        .zip(unit)
        .map(|(d, u)| (d - u * proj) / n)
        .collect()
}

fn evaluate(
    q_raw: &[Vec<f64>],
    q_prime_raw: &[Vec<f64>],
    center: &Center,
    cfg: &ObjectiveConfig,
    route: PairRoute,
    want_grad: bool,
) -> Result<(LossBreakdown, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if (cfg.variant == Variant::CocaVi) != (route == PairRoute::Views) {
        return Err(CocaError::VariantMismatch {
            variant: cfg.variant.name().into(),
            source_kind: match route {
                PairRoute::Views => "augmented-view".into(),
                PairRoute::Sequence => "sequence".into(),
            },
        });
    }
    let n = q_raw.len();
    if n == 0 {
        return Err(CocaError::EmptyBatch("loss over zero projections".into()));
    }
    if q_prime_raw.len() != n {
        return Err(CocaError::LengthMismatch {
            left: n,
            right: q_prime_raw.len(),
        });
    }
    let q: Vec<Vec<f64>> = q_raw
        .iter()
        .map(|v| l2_normalize(v))
        .collect::<Result<_>>()?;
    let qp: Vec<Vec<f64>> = q_prime_raw
        .iter()
        .map(|v| l2_normalize(v))
        .collect::<Result<_>>()?;
    let ce = &center.values;
    let nf = n as f64;
    let dim = ce.len();

    // Gradients with respect to the normalised vectors.
    let mut dq = vec![vec![0.0; dim]; if want_grad { n } else { 0 }];
    let mut dqp = vec![vec![0.0; dim]; if want_grad { n } else { 0 }];
    let mut boundary = None;

    let invariance_value = match cfg.variant {
        Variant::NoOC => {
            let v = q.iter().zip(&qp).map(|(a, b)| 1.0 - dot(a, b)).sum::<f64>() / nf;
            if want_grad {
                for i in 0..n {
                    for j in 0..dim {
                        dq[i][j] -= cfg.lambda * qp[i][j] / nf;
                        dqp[i][j] -= cfg.lambda * q[i][j] / nf;
                    }
                }
            }
            v
        }
        Variant::NoCL => {
            let v = q.iter().map(|a| 1.0 - dot(a, ce)).sum::<f64>() / nf;
            if want_grad {
                for row in dq.iter_mut() {
                    for j in 0..dim {
                        row[j] -= cfg.lambda * ce[j] / nf;
                    }
                }
            }
            v
        }
        Variant::Full | Variant::NoAug | Variant::NoVar | Variant::CocaVi => {
            let scores: Vec<f64> = q
                .iter()
                .zip(&qp)
                .map(|(a, b)| 2.0 - dot(a, ce) - dot(b, ce))
                .collect();
            let (value, dscore) = match cfg.mode {
                BoundaryMode::Hard => (invariance(&scores)?, vec![1.0 / nf; n]),
                BoundaryMode::Soft => {
                    let eta = cfg.eta();
                    let b = quantile_index(&scores, eta);
                    let (v, bound) = soft_boundary_invariance(&scores, cfg.nu, eta)?;
                    boundary = Some(bound);
                    let w = 1.0 / (cfg.nu * nf);
                    let mut ds = vec![0.0; n];
                    let mut above = 0usize;
                    for i in 0..n {
                        if scores[i] > bound {
                            ds[i] = w;
                            above += 1;
                        }
                    }
                    ds[b] += 1.0 - above as f64 * w;
                    (v, ds)
                }
            };
            if want_grad {
                for i in 0..n {
                    let s = cfg.lambda * dscore[i];
                    for j in 0..dim {
                        dq[i][j] -= s * ce[j];
                        dqp[i][j] -= s * ce[j];
                    }
                }
            }
            value
        }
    };

    let use_variance = cfg.variant != Variant::NoVar;
    let half_mu = cfg.mu / 2.0;
    let (variance_q, variance_qp) = if use_variance {
        let (vq, gq) = variance_with_grad(&q, cfg.gamma, cfg.eps, want_grad)?;
        let (vqp, gqp) = if cfg.variant == Variant::NoCL {
            (0.0, Vec::new())
        } else {
            variance_with_grad(&qp, cfg.gamma, cfg.eps, want_grad)?
        };
        if want_grad {
            for (row, g) in dq.iter_mut().zip(&gq) {
                row.iter_mut().zip(g).for_each(|(a, b)| *a += half_mu * b);
            }
            for (row, g) in dqp.iter_mut().zip(&gqp) {
                row.iter_mut().zip(g).for_each(|(a, b)| *a += half_mu * b);
            }
        }
        (vq, vqp)
    } else {
        (0.0, 0.0)
    };

    let total = if use_variance {
        cfg.lambda * invariance_value + half_mu * (variance_q + variance_qp)
    } else {
        cfg.lambda * invariance_value
    };

    let (gq, gqp) = if want_grad {
        (
            (0..n)
                .map(|i| normalize_backward(&q_raw[i], &q[i], &dq[i]))
                .collect(),
            (0..n)
                .map(|i| normalize_backward(&q_prime_raw[i], &qp[i], &dqp[i]))
                .collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Ok((
        LossBreakdown {
            invariance: invariance_value,
            variance_q,
            variance_q_prime: variance_qp,
            total,
            boundary,
        },
        gq,
        gqp,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(dim: usize, axis: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        v
    }

    fn center_of(v: Vec<f64>) -> Center {
        Center {
            values: v,
            frozen: true,
        }
    }

    #[test]
    fn cosine_basic_cases() {
        assert!((cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_sim(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(CocaError::ZeroVector)
        ));
    }

    #[test]
    fn center_fixed_point() {
        let e = l2_normalize(&[1.0, 2.0, 2.0]).unwrap();
        let c = compute_center(&vec![e.clone(); 3], &vec![e.clone(); 3]).unwrap();
        for (a, b) in c.values.iter().zip(&e) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn center_of_orthogonal_pair() {
        let c = compute_center(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]]).unwrap();
        let h = 2f64.sqrt() / 2.0;
        assert!((c.values[0] - h).abs() < 1e-12 && (c.values[1] - h).abs() < 1e-12);
    }

    #[test]
    fn center_guard_fires_on_zero_coordinate() {
        let c = compute_center(&[vec![1.0, 0.0, 1.0]], &[vec![1.0, 0.0, -1.0]]).unwrap();
        // pre-guard mean (1, 0, 0) -> (1, 1e-6, 1e-6) before normalisation
        let n = (1.0f64 + 2e-12).sqrt();
        assert!((c.values[1] - 1e-6 / n).abs() < 1e-18);
        assert!((c.values[2] - 1e-6 / n).abs() < 1e-18);
        assert!((norm(&c.values) - 1.0).abs() < 1e-12);
        let neg = compute_center(&[vec![1.0, -1e-9]], &[vec![1.0, -1e-9]]).unwrap();
        assert!(neg.values[1] < 0.0);
    }

    #[test]
    fn center_rejects_empty() {
        assert!(compute_center(&[], &[]).is_err());
    }

    #[test]
    fn score_extremes() {
        let ce = center_of(unit(3, 0));
        let s = anomaly_scores(
            &[unit(3, 0), vec![-1.0, 0.0, 0.0], unit(3, 0)],
            &[unit(3, 0), vec![-1.0, 0.0, 0.0], unit(3, 1)],
            &ce,
        )
        .unwrap();
        assert!((s[0] - 0.0).abs() < 1e-12);
        assert!((s[1] - 4.0).abs() < 1e-12);
        assert!((s[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invariance_is_mean() {
        assert_eq!(invariance(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(invariance(&[1.0, 3.0]).unwrap(), 2.0);
        assert!(invariance(&[]).is_err());
    }

    #[test]
    fn soft_boundary_hand_example() {
        let (d, b) = soft_boundary_invariance(&[1.0, 1.0, 1.0, 5.0], 1.0, 0.25).unwrap();
        assert_eq!(b, 1.0);
        assert_eq!(d, 2.0);
        // hinge doubles when nu halves
        let (d2, _) = soft_boundary_invariance(&[1.0, 1.0, 1.0, 5.0], 0.5, 0.25).unwrap();
        assert_eq!(d2 - b, 2.0 * (d - b));
    }

    #[test]
    fn soft_boundary_inactive_hinge() {
        let (d, b) = soft_boundary_invariance(&[0.5, 0.2, 0.1], 0.3, 0.01).unwrap();
        assert_eq!(b, 0.5);
        assert_eq!(d, 0.5);
    }

    #[test]
    fn variance_collapse_case() {
        let q = vec![vec![0.6, 0.8]; 5];
        let v = variance_term(&q, 1.0, 1e-4).unwrap();
        assert!((v - 0.99).abs() < 1e-12);
        assert_eq!(variance_term(&q, 0.0, 1e-4).unwrap(), 0.0);
        assert!(matches!(
            variance_term(&q[..1], 1.0, 1e-4),
            Err(CocaError::VarianceUndefined(1))
        ));
    }

    #[test]
    fn variance_closed_hinge() {
        let q = vec![vec![2.0, -3.0], vec![-2.0, 3.0]];
        assert_eq!(variance_term(&q, 1.0, 1e-4).unwrap(), 0.0);
    }

    #[test]
    fn full_loss_composition() {
        let ce = center_of(unit(4, 2));
        let q = vec![unit(4, 2); 3];
        let cfg = ObjectiveConfig::default();
        let l = coca_loss(&q, &q, &ce, &cfg, PairRoute::Sequence).unwrap();
        assert!(l.invariance.abs() < 1e-12);
        assert!((l.variance_q - 0.99).abs() < 1e-12);
        assert!((l.total - 0.099).abs() < 1e-12);
        let novar = ObjectiveConfig {
            variant: Variant::NoVar,
            ..cfg.clone()
        };
        assert!(
            coca_loss(&q, &q, &ce, &novar, PairRoute::Sequence)
                .unwrap()
                .total
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn vi_needs_views() {
        let ce = center_of(unit(2, 0));
        let q = vec![unit(2, 0); 2];
        let cfg = ObjectiveConfig {
            variant: Variant::CocaVi,
            ..ObjectiveConfig::default()
        };
        assert!(matches!(
            coca_loss(&q, &q, &ce, &cfg, PairRoute::Sequence),
            Err(CocaError::VariantMismatch { .. })
        ));
        assert!(coca_loss(&q, &q, &ce, &cfg, PairRoute::Views).is_ok());
    }

    #[test]
    fn nu_domain_checked() {
        let cfg = ObjectiveConfig {
            nu: 0.0,
            ..ObjectiveConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert_eq!(Variant::parse("NoVar").unwrap(), Variant::NoVar);
        assert_eq!(Variant::parse("COCA-vi").unwrap(), Variant::CocaVi);
        assert!(Variant::parse("bogus").is_err());
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    /// Central differences of the loss value against the analytic gradient.
    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for variant in Variant::ALL {
            for mode in [BoundaryMode::Hard, BoundaryMode::Soft] {
                let q = random_batch(&mut rng, 5, 4);
                let qp = random_batch(&mut rng, 5, 4);
                let ce = compute_center(
                    &q.iter()
                        .map(|v| l2_normalize(v).unwrap())
                        .collect::<Vec<_>>(),
                    &qp.iter()
                        .map(|v| l2_normalize(v).unwrap())
                        .collect::<Vec<_>>(),
                )
                .unwrap();
                let cfg = ObjectiveConfig {
                    variant,
                    mode,
                    nu: 0.5,
                    eta: Some(0.3),
                    ..ObjectiveConfig::default()
                };
                let route = variant.route();
                let (_, gq, gqp) = coca_loss_with_grad(&q, &qp, &ce, &cfg, route).unwrap();
                let h = 1e-6;
                for (which, grad) in [(0, &gq), (1, &gqp)] {
                    for i in 0..5 {
                        for j in 0..4 {
                            let mut a = q.clone();
                            let mut b = qp.clone();
                            let target = if which == 0 { &mut a } else { &mut b };
                            target[i][j] += h;
                            let up = coca_loss(&a, &b, &ce, &cfg, route).unwrap().total;
                            let target = if which == 0 { &mut a } else { &mut b };
                            target[i][j] -= 2.0 * h;
                            let down = coca_loss(&a, &b, &ce, &cfg, route).unwrap().total;
                            let fd = (up - down) / (2.0 * h);
                            assert!(
                                (fd - grad[i][j]).abs() <= 1e-6 + 1e-4 * fd.abs(),
                                "{variant} {mode:?} branch {which} [{i}][{j}]: fd {fd} vs {}",
                                grad[i][j]
                            );
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn scores_stay_in_range(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_batch(&mut rng, 6, 5);
            let qp = random_batch(&mut rng, 6, 5);
            let ce = Center { values: l2_normalize(&random_batch(&mut rng, 1, 5)[0]).unwrap(), frozen: true };
            for s in anomaly_scores(&q, &qp, &ce).unwrap() {
                prop_assert!((-1e-12..=4.0 + 1e-12).contains(&s));
            }
        }

        #[test]
        fn soft_boundary_monotone_above_boundary(
            mut scores in proptest::collection::vec(0.0f64..4.0, 3..20),
            bump in 0.01f64..1.0,
        ) {
            let (d0, b) = soft_boundary_invariance(&scores, 0.5, 0.2).unwrap();
            prop_assert!(d0 >= b);
            let top = scores.iter().cloned().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
            if scores[top] > b {
                scores[top] += bump;
                let (d1, _) = soft_boundary_invariance(&scores, 0.5, 0.2).unwrap();
                prop_assert!(d1 > d0);
            }
        }
    }
}
