use cgr_core::model::{Activation, Hyperbox, Model};
use cgr_core::par::available_workers;
use cgr_core::rmi::{run_experiment, ExperimentConfig};
use cgr_core::search::{BabVerifier, BimFalsifier, SearchConfig, Searcher};
use cgr_core::spec::{InputSet, Property, SatisfactionFn};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn worker_counts() -> Vec<usize> {
    let n = available_workers().max(2);
    vec![1, n]
}

fn instance() -> (Model, Property) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Model::random_fcnn(&mut rng, &[2, 16, 16, 1], Activation::Relu).unwrap();
    // Just below a grid minimum so the verifier has to split to prove it.
    let mut t = f64::INFINITY;
    for i in 0..=100 {
        for j in 0..=100 {
            let x = [i as f64 / 50.0 - 1.0, j as f64 / 50.0 - 1.0];
            t = t.min(model.forward(&x).unwrap()[0]);
        }
    }
    let t = t - 0.01;
    let prop = Property::new(
        "p",
        InputSet::Box(Hyperbox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap()),
        SatisfactionFn::affine(vec![1.0], -t),
    );
    (model, prop)
}

fn bab(c: &mut Criterion) {
    let (model, prop) = instance();
    let mut g = c.benchmark_group("bab");
    g.sample_size(10);
    for w in worker_counts() {
        let v = BabVerifier::new(SearchConfig { workers: w, ..SearchConfig::default() });
        g.bench_with_input(BenchmarkId::from_parameter(w), &w, |b, _| {
            b.iter(|| v.search(&model, &prop).unwrap())
        });
    }
    g.finish();
}

fn bim(c: &mut Criterion) {
    let (model, prop) = instance();
    let mut g = c.benchmark_group("bim");
    for w in worker_counts() {
        let f = BimFalsifier::new(SearchConfig { workers: w, restarts: 16, ..SearchConfig::default() });
        g.bench_with_input(BenchmarkId::from_parameter(w), &w, |b, _| {
            b.iter(|| f.search(&model, &prop).unwrap())
        });
    }
    g.finish();
}

fn rmi_cells(c: &mut Criterion) {
    let mut g = c.benchmark_group("rmi_experiment");
    g.sample_size(10);
    for w in worker_counts() {
        let cfg = ExperimentConfig {
            num_rmis: 1,
            n_keys: 2000,
            k: 4,
            epsilons: vec![10.0],
            workers: w,
            ..ExperimentConfig::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(w), &w, |b, _| {
            b.iter(|| run_experiment(&cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bab, bim, rmi_cells);
criterion_main!(benches);
