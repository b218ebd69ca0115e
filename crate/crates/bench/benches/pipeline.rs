use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use facecascade::features::extract_shape_features;
use facecascade::regression::{solve_weighted_ridge_ls, WeightedRow};
use facecascade::synth::make_shape_family;
use facecascade::{
    generate_dataset, predict, solve_pose_deform, train, DescriptorSpec, GenConfig, OcclusionMode,
    SolverConfig, TrainConfig, VisibilityVector,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ridge(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<WeightedRow> = (0..2000)
        .map(|_| WeightedRow {
            target: (0..40).map(|_| rng.random_range(-1.0..1.0)).collect(),
            features: (0..256).map(|_| rng.random_range(-1.0..1.0)).collect(),
            weight: rng.random_range(0.5..1.5),
        })
        .collect();
    c.bench_function("ridge_ls_2000x256x40", |b| {
        b.iter(|| solve_weighted_ridge_ls(black_box(&rows), 0.256).unwrap())
    });
}

fn descriptor(c: &mut Criterion) {
    let data = generate_dataset(&GenConfig {
        n_samples: 1,
        ..GenConfig::default()
    })
    .unwrap();
    let s = &data.samples[0];
    let spec = DescriptorSpec::default();
    c.bench_function("grad_hist_shape_features_d20", |b| {
        b.iter(|| extract_shape_features(black_box(&s.image), black_box(&s.x_true), &spec).unwrap())
    });
}

fn pose(c: &mut Criterion) {
    let cfg = GenConfig {
        n_samples: 1,
        ..GenConfig::default()
    };
    let (_, model) = make_shape_family(&cfg).unwrap();
    let data = generate_dataset(&cfg).unwrap();
    let x = &data.samples[0].x_true;
    let w = VisibilityVector::ones(x.len());
    let solver = SolverConfig::default();
    c.bench_function("solve_pose_deform_d20_k4", |b| {
        b.iter(|| solve_pose_deform(black_box(x), &w, &model, &solver).unwrap())
    });
}

fn cascade(c: &mut Criterion) {
    let data = generate_dataset(&GenConfig {
        n_samples: 40,
        occlusion: OcclusionMode::Random { rate: 0.2 },
        ..GenConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        descriptor: DescriptorSpec {
            patch_radius: 8,
            cells: 2,
            bins: 8,
            ..DescriptorSpec::default()
        },
        ..TrainConfig::default()
    };
    let model = train(&data, &cfg).unwrap();
    let s = &data.samples[0];
    c.bench_function("predict_4_stages", |b| {
        b.iter(|| predict(&model, black_box(&s.image), &s.face_box).unwrap())
    });
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("train_40x8_states_4_stages", |b| {
        b.iter_batched(
            || data.clone(),
            |d| train(&d, &cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, ridge, descriptor, pose, cascade);
criterion_main!(benches);
