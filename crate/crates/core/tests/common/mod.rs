//! Shared helpers for the integration tests.
#![allow(dead_code)]

use coca::data::WindowBatch;
use coca::model::{CocaModel, ModelConfig, PairRoute};
use coca::objective::{
    coca_loss, coca_loss_with_grad, compute_center, l2_normalize, BoundaryMode, Center,
    ObjectiveConfig, Variant,
};
use coca::parallel;

pub const H: f64 = 1e-6;
pub const RTOL: f64 = 1e-3;
pub const ATOL: f64 = 1e-5;
pub const DROPOUT_SEED: u64 = 99;

pub fn toy_config(conv_channels: Vec<usize>) -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        conv_channels,
        kernel_size: 4,
        dropout: 0.45,
        hidden_size: 6,
        seq_layers: 3,
        project_hidden: 3,
        project_channels: 6,
        window_length: 8,
    }
}

pub fn toy_batch(n: usize, shift: f64) -> WindowBatch {
    let mut b = WindowBatch::empty(8, 1, "toy");
    for i in 0..n {
        for t in 0..8 {
            b.windows
                .push(((i * 8 + t) as f64 * 0.7 + shift).sin() * (1.0 + 0.3 * i as f64));
        }
        b.window_labels.push(0);
        b.spans.push((i * 8, i * 8 + 8));
    }
    b
}

fn loss_at(
    model: &CocaModel,
    batch: &WindowBatch,
    views: Option<&WindowBatch>,
    center: &Center,
    cfg: &ObjectiveConfig,
) -> f64 {
    let (out, _) = model.forward_train(batch, views, DROPOUT_SEED).unwrap();
    coca_loss(&out.q, &out.q_prime, center, cfg, out.route)
        .unwrap()
        .total
}

/// Compares every trainable scalar's analytic gradient with a central finite
/// difference on a batch of `n` toy windows. Returns the mismatches.
pub fn gradient_mismatches(
    conv_channels: Vec<usize>,
    variant: Variant,
    mode: BoundaryMode,
    n: usize,
) -> Result<usize, String> {
    let model = CocaModel::new(toy_config(conv_channels), 11).unwrap();
    let batch = toy_batch(n, 0.0);
    let view_b = toy_batch(n, 0.4);
    let views = (variant.route() == PairRoute::Views).then_some(&view_b);
    let cfg = ObjectiveConfig {
        variant,
        mode,
        nu: 0.5,
        eta: Some(0.4),
        ..ObjectiveConfig::default()
    };

    let (out, cache) = model.forward_train(&batch, views, DROPOUT_SEED).unwrap();
    let unit = |v: &Vec<Vec<f64>>| {
        v.iter()
            .map(|x| l2_normalize(x).unwrap())
            .collect::<Vec<_>>()
    };
    let center = compute_center(&unit(&out.q), &unit(&out.q_prime)).unwrap();
    let (_, dq, dqp) = coca_loss_with_grad(&out.q, &out.q_prime, &center, &cfg, out.route).unwrap();
    let grads = model.backward(&cache, &dq, &dqp).dense(&model.params);

    let total = model.params.num_scalars();
    // Encoder and projector sit on every variant's path.
    let shared: Vec<f64> = model
        .params
        .tensors
        .iter()
        .zip(&grads)
        .filter(|(t, _)| !t.name.starts_with("seq2seq"))
        .flat_map(|(_, g)| g.iter().copied())
        .collect();
    let nonzero = shared.iter().filter(|g| g.abs() > 1e-6).count();
    if nonzero * 2 <= shared.len() {
        return Err(format!(
            "{variant}: only {nonzero} of {} shared gradients are nonzero",
            shared.len()
        ));
    }
    let failures: Vec<String> = parallel::map(total, |k| {
        let (ti, j) = model.params.flat_index(k);
        let mut m = model.clone();
        m.params.tensors[ti].data[j] += H;
        let up = loss_at(&m, &batch, views, &center, &cfg);
        m.params.tensors[ti].data[j] -= 2.0 * H;
        let down = loss_at(&m, &batch, views, &center, &cfg);
        let fd = (up - down) / (2.0 * H);
        let an = grads[ti][j];
        if (fd - an).abs() > ATOL + RTOL * fd.abs().max(an.abs()) {
            Some(format!(
                "{}[{j}]: analytic {an:.8e} vs numeric {fd:.8e}",
                model.params.tensors[ti].name
            ))
        } else {
            None
        }
    })
    .into_iter()
    .flatten()
    .collect();
    if failures.is_empty() {
        Ok(total)
    } else {
        Err(format!(
            "{variant} {mode:?}: {} of {total} mismatches\n{}",
            failures.len(),
            failures
                .iter()
                .take(20)
                .cloned()
                .collect::<Vec<_>>()
                .join("\n")
        ))
    }
}
