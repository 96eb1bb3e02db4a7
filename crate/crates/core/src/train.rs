//! Training loop: augmentation, batching, the center schedule, AdamW updates
//! and early stopping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig};
use crate::data::{normalized_windows, Split, TimeSeriesObject, WindowBatch};
use crate::error::{CocaError, Result};
use crate::model::{CocaModel, ModelConfig, PairOutput, PairRoute};
use crate::objective::{
    coca_loss_with_grad, compute_center, cosine_sim, l2_normalize, Center, ObjectiveConfig, Variant,
};
use crate::optim::AdamW;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epoch count `e` after which the center stops moving.
    pub center_freeze_epoch: usize,
    pub early_stop_patience: usize,
    pub min_delta: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            weight_decay: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            batch_size: 32,
            max_epochs: 50,
            center_freeze_epoch: 10,
            early_stop_patience: 10,
            min_delta: 1e-5,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CocaError::Config(m));
        if self.center_freeze_epoch == 0 {
            return bad("center_freeze_epoch must be >= 1".into());
        }
        if self.center_freeze_epoch > self.max_epochs {
            return bad(format!(
                "center_freeze_epoch {} exceeds max_epochs {}",
                self.center_freeze_epoch, self.max_epochs
            ));
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2".into());
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("learning_rate and grad_clip must be > 0, weight_decay >= 0".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must be in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub invariance: f64,
    pub variance_q: f64,
    pub variance_q_prime: f64,
    pub sim_q_center: f64,
    pub sim_q_prime_center: f64,
    pub sim_q_q_prime: f64,
    /// Mean over dimensions of the batch std of the normalised projections.
    pub projection_std: f64,
    pub center_hash: String,
    pub center_frozen: bool,
    pub batches: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: CocaModel,
    pub center: Center,
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Concatenated, standardised training windows of all objects.
pub fn training_windows(objects: &[TimeSeriesObject], window_len: usize) -> Result<WindowBatch> {
    let mut all: Option<WindowBatch> = None;
    for ts in objects {
        let w = normalized_windows(ts, window_len, Split::Train)?;
        match all.as_mut() {
            None => all = Some(w),
            Some(a) => a.extend(&w)?,
        }
    }
    all.ok_or_else(|| CocaError::EmptyBatch("no training objects".into()))
}

fn unit_rows(v: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    v.iter().map(|x| l2_normalize(x)).collect()
}

fn mean_std(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let dim = rows[0].len();
    let mut total = 0.0;
    for j in 0..dim {
        let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let v = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
        total += v.sqrt();
    }
    total / dim as f64
}

struct Diagnostics {
    sim_q_center: f64,
    sim_q_prime_center: f64,
    sim_q_q_prime: f64,
    projection_std: f64,
}

fn diagnostics(out: &PairOutput, center: &Center) -> Result<Diagnostics> {
    let n = out.q.len() as f64;
    let mut s = [0.0; 3];
    for (a, b) in out.q.iter().zip(&out.q_prime) {
        s[0] += cosine_sim(a, &center.values)?;
        s[1] += cosine_sim(b, &center.values)?;
        s[2] += cosine_sim(a, b)?;
    }
    Ok(Diagnostics {
        sim_q_center: s[0] / n,
        sim_q_prime_center: s[1] / n,
        sim_q_q_prime: s[2] / n,
        projection_std: mean_std(&unit_rows(&out.q)?),
    })
}

fn eval_center(out: &PairOutput) -> Result<Center> {
    compute_center(&unit_rows(&out.q)?, &unit_rows(&out.q_prime)?)
}

pub fn train(
    objects: &[TimeSeriesObject],
    model_cfg: &ModelConfig,
    obj_cfg: &ObjectiveConfig,
    train_cfg: &TrainConfig,
    aug_cfg: &AugmentConfig,
) -> Result<TrainedModel> {
    train_with_observer(objects, model_cfg, obj_cfg, train_cfg, aug_cfg, |_| {})
}

/// As [`train`], calling `observe` after each epoch.
pub fn train_with_observer(
    objects: &[TimeSeriesObject],
    model_cfg: &ModelConfig,
    obj_cfg: &ObjectiveConfig,
    train_cfg: &TrainConfig,
    aug_cfg: &AugmentConfig,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    model_cfg.validate()?;
    obj_cfg.validate()?;
    train_cfg.validate()?;
    aug_cfg.validate()?;
    let base = training_windows(objects, model_cfg.window_length)?;
    train_on_windows(&base, model_cfg, obj_cfg, train_cfg, aug_cfg, &mut observe)
}

pub fn train_on_windows(
    base: &WindowBatch,
    model_cfg: &ModelConfig,
    obj_cfg: &ObjectiveConfig,
    train_cfg: &TrainConfig,
    aug_cfg: &AugmentConfig,
    observe: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    if base.len() < 2 {
        return Err(CocaError::EmptyBatch(format!(
            "{} training windows; at least 2 are needed",
            base.len()
        )));
    }
    let variant = obj_cfg.variant;
    let route = variant.route();
    let augment_on = aug_cfg.enabled && variant != Variant::NoAug;
    let aug = AugmentConfig {
        enabled: augment_on,
        ..aug_cfg.clone()
    };

    let mut model = CocaModel::new(model_cfg.clone(), train_cfg.seed)?;
    let mut opt = AdamW::new(
        &model.params,
        train_cfg.learning_rate,
        train_cfg.adam_beta1,
        train_cfg.adam_beta2,
        train_cfg.weight_decay,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(
        aug_cfg.seed ^ train_cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );

    let freeze_at = train_cfg.center_freeze_epoch - 1;
    let mut frozen: Option<Center> = None;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, CocaModel)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 0..train_cfg.max_epochs {
        // Pair sources for this epoch.
        let (set_a, set_b) = match route {
            PairRoute::Sequence => (augment::expand_training_set(base, &aug, &mut aug_rng), None),
            PairRoute::Views => {
                let a = augment::jitter(base, aug.jitter_ratio, &mut aug_rng);
                let b = augment::scale(base, aug.scale_ratio, &mut aug_rng);
                (a, Some(b))
            }
        };
        let mut order: Vec<usize> = (0..set_a.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        let mut batches = 0usize;
        for (b_idx, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let dropout_seed: u64 = rng.gen();
            let xa = set_a.select(chunk);
            let xb = set_b.as_ref().map(|b| b.select(chunk));
            let (out, cache) = model.forward_train(&xa, xb.as_ref(), dropout_seed)?;
            let center = match &frozen {
                Some(c) => c.clone(),
                None => compute_center(&unit_rows(&out.q)?, &unit_rows(&out.q_prime)?)?,
            };
            let (loss, dq, dqp) =
                coca_loss_with_grad(&out.q, &out.q_prime, &center, obj_cfg, out.route)?;
            if !loss.total.is_finite() {
                return Err(CocaError::Divergence {
                    epoch,
                    batch: b_idx,
                    loss: loss.total,
                });
            }
            let mut grads = model.backward(&cache, &dq, &dqp);
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(CocaError::Divergence {
                    epoch,
                    batch: b_idx,
                    loss: norm,
                });
            }
            if norm > train_cfg.grad_clip {
                grads.scale(train_cfg.grad_clip / norm);
            }
            opt.step(&mut model.params, &grads);
            model.apply_running_updates(&cache);

            let w = chunk.len() as f64;
            sums[0] += w * loss.total;
            sums[1] += w * loss.invariance;
            sums[2] += w * loss.variance_q;
            sums[3] += w * loss.variance_q_prime;
            seen += chunk.len();
            batches += 1;
        }
        if seen == 0 {
            return Err(CocaError::EmptyBatch(
                "no batch of size >= 2 in epoch".into(),
            ));
        }

        let eval = model.forward_eval(base, route)?;
        if epoch == freeze_at {
            let mut c = eval_center(&eval)?;
            c.frozen = true;
            frozen = Some(c);
        }
        let center = match &frozen {
            Some(c) => c.clone(),
            None => eval_center(&eval)?,
        };
        let diag = diagnostics(&eval, &center)?;
        let s = seen as f64;
        let record = EpochRecord {
            epoch,
            loss: sums[0] / s,
            invariance: sums[1] / s,
            variance_q: sums[2] / s,
            variance_q_prime: sums[3] / s,
            sim_q_center: diag.sim_q_center,
            sim_q_prime_center: diag.sim_q_prime_center,
            sim_q_q_prime: diag.sim_q_q_prime,
            projection_std: diag.projection_std,
            center_hash: center.fingerprint(),
            center_frozen: center.frozen,
            batches,
        };
        observe(&record);
        let loss = record.loss;
        history.records.push(record);

        // Losses before the freeze are measured against moving centers, so
        // model selection and early stopping start at the freeze epoch.
        if epoch >= freeze_at {
            let improved = best
                .as_ref()
                .map_or(true, |(b, _, _)| loss < b - train_cfg.min_delta);
            if improved {
                best = Some((loss, epoch, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= train_cfg.early_stop_patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let (_, best_epoch, model) = best.expect("max_epochs >= center_freeze_epoch");
    Ok(TrainedModel {
        model,
        center: frozen.expect("center frozen at freeze epoch"),
        history,
        best_epoch,
        stopped_early,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    /// `None` when the history is too short to judge.
    pub collapsed: Option<bool>,
    pub projection_std: f64,
    pub loss: f64,
}

/// Flags hypersphere collapse: projections nearly constant while the loss is
/// nearly zero at the end of training.
pub fn collapse_probe(history: &TrainHistory, gamma: f64) -> CollapseReport {
    match history.records.last() {
        Some(last) if history.records.len() >= 2 => CollapseReport {
            collapsed: Some(last.projection_std < 0.01 * gamma && last.loss < 1e-3),
            projection_std: last.projection_std,
            loss: last.loss,
        },
        last => CollapseReport {
            collapsed: None,
            projection_std: last.map_or(f64::NAN, |r| r.projection_std),
            loss: last.map_or(f64::NAN, |r| r.loss),
        },
    }
}
