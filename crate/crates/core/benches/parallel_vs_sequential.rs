use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sspa_core::config::RunConfig;
use sspa_core::data::FeatureBundle;
use sspa_core::model::SspaParams;
use sspa_core::parallel::Exec;
use sspa_core::train::{batch_gradient, predict, Split, TaskData};

fn setup() -> (RunConfig, TaskData, SspaParams) {
    let mut run = RunConfig::default();
    run.data.synthetic.n_train = 64;
    run.data.synthetic.n_test = 128;
    let data = TaskData::load(&run).expect("synthetic data");
    let params = SspaParams::new(&run.model).expect("params");
    (run, data, params)
}

fn executors() -> Vec<(&'static str, Exec)> {
    let mut v = vec![("sequential", Exec::Sequential)];
    if cfg!(feature = "parallel") {
        v.push(("parallel", Exec::Parallel(None)));
    }
    v
}

fn batch_gradients(c: &mut Criterion) {
    let (run, data, params) = setup();
    let idx: Vec<usize> = (0..run.train.batch_size).collect();
    let samples: Vec<&FeatureBundle> = idx.iter().map(|&i| &data.train.samples[i]).collect();
    let mut group = c.benchmark_group("batch_gradient");
    for (name, exec) in executors() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| batch_gradient(&run.model, &params, black_box(&samples), &idx, &data.semantics, exec).unwrap())
        });
    }
    group.finish();
}

fn test_set_prediction(c: &mut Criterion) {
    let (run, data, params) = setup();
    let mut group = c.benchmark_group("predict");
    for (name, exec) in executors() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| predict(&run.model, &params, black_box(&data.test), &data.semantics, Split::Test, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = batch_gradients, test_set_prediction
}
criterion_main!(benches);
