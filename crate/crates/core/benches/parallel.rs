//! Sequential vs rayon execution of the data-parallel hot paths.
//!
//! Both modes produce bit-identical results; only wall time differs. With a
//! single available core the two are expected to match closely.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gait_core::dataset::{render, DatasetSpec};
use gait_core::exec;
use gait_core::kernels::conv_valid;
use gait_core::kid::kid_score;
use gait_core::losses::LossWeights;
use gait_core::training::{train_step, AdamState, Networks, TrainConfig};
use gait_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn both_modes(c: &mut Criterion, group: &str, mut work: impl FnMut()) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10).measurement_time(Duration::from_secs(5));
    for (name, parallel) in MODES {
        exec::set_parallel(parallel);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(&mut work));
    }
    exec::set_parallel(true);
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::rand_uniform(vec![4, 32, 18, 18], -1.0, 1.0, &mut rng);
    let k = Tensor::rand_uniform(vec![32, 32, 3, 3], -0.1, 0.1, &mut rng);
    both_modes(c, "conv_3x3_32ch_16px_batch4", || {
        conv_valid(&x, &k, 1).unwrap();
    });
}

fn training_step(c: &mut Criterion) {
    let config = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::rand_uniform(vec![4, 1, 32, 32], -1.0, 1.0, &mut rng);
    let y = Tensor::rand_uniform(vec![4, 1, 32, 32], -1.0, 1.0, &mut rng);
    let mut nets = Networks::init(&config).unwrap();
    let mut adam_g = AdamState::new(config.adam, &[&nets.g_st.params, &nets.g_ts.params]);
    let mut adam_d = AdamState::new(config.adam, &[&nets.d_s.params, &nets.d_t.params]);
    let w = LossWeights::default();
    both_modes(c, "train_step_32px_batch4", || {
        train_step(&x, &y, &mut nets, &mut adam_g, &mut adam_d, &w).unwrap();
    });
}

fn kid(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let real = Tensor::rand_uniform(vec![400, 64], -1.0, 1.0, &mut rng);
    let fake = Tensor::rand_uniform(vec![100, 64], -1.0, 1.0, &mut rng);
    both_modes(c, "kid_block50_x100", || {
        kid_score(&real, &fake, 50, 100, 0).unwrap();
    });
}

fn dataset(c: &mut Criterion) {
    let spec = DatasetSpec {
        n_images: 100,
        ..DatasetSpec::default()
    };
    both_modes(c, "render_100_per_domain", || {
        render(&spec).unwrap();
    });
}

criterion_group!(benches, conv, training_step, kid, dataset);
criterion_main!(benches);
