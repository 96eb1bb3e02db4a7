use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use coca::config::RunConfig;
use coca::data::{normalized_windows, Split};
use coca::detect::score_dataset;
use coca::model::{CocaModel, PairRoute};
use coca::objective::{coca_loss_with_grad, compute_center, l2_normalize, ObjectiveConfig};
use coca::parallel;
use coca::synth::{generate, standard_suite};

fn bench(c: &mut Criterion) {
    let cfg = RunConfig::default().desk_scale();
    let spec = &standard_suite(0, 400, cfg.model.window_length)[0];
    let ts = generate(spec).unwrap();
    let windows = normalized_windows(&ts, cfg.model.window_length, Split::Train).unwrap();
    let batch = windows.select(&(0..64).collect::<Vec<_>>());
    let model = CocaModel::new(cfg.model.clone(), 0).unwrap();
    let out = model.forward_eval(&windows, PairRoute::Sequence).unwrap();
    let unit = |v: &[Vec<f64>]| {
        v.iter()
            .map(|x| l2_normalize(x).unwrap())
            .collect::<Vec<_>>()
    };
    let mut center = compute_center(&unit(&out.q), &unit(&out.q_prime)).unwrap();
    center.frozen = true;
    let obj = ObjectiveConfig::default();

    let mut group = c.benchmark_group("coca");
    group.sample_size(10);
    for (label, on) in [("parallel", true), ("sequential", false)] {
        group.bench_with_input(BenchmarkId::new("train_step", label), &on, |b, &on| {
            parallel::set_enabled(on);
            b.iter(|| {
                let (out, cache) = model.forward_train(&batch, None, 7).unwrap();
                let (_, dq, dqp) =
                    coca_loss_with_grad(&out.q, &out.q_prime, &center, &obj, PairRoute::Sequence)
                        .unwrap();
                model.backward(&cache, &dq, &dqp)
            });
        });
        group.bench_with_input(BenchmarkId::new("score_windows", label), &on, |b, &on| {
            parallel::set_enabled(on);
            b.iter(|| score_dataset(&model, &center, &windows, PairRoute::Sequence).unwrap());
        });
    }
    parallel::set_enabled(true);
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
