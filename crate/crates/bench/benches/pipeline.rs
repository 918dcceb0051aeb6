use criterion::{criterion_group, criterion_main, Criterion};
use mkt_core::config::RunConfig;
use mkt_core::head::HeadMode;
use mkt_core::metrics::{mean_ap, GroundTruthMatrix};
use mkt_core::model::Model;
use mkt_core::objectives::TrainConfig;
use mkt_core::synthworld::{Dataset, WorldConfig};
use mkt_core::train::{score_samples, train_stage1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_dataset() -> (RunConfig, Dataset) {
    let mut cfg = RunConfig::default();
    cfg.world = WorldConfig { train_images: 32, test_images: 32, ..WorldConfig::default() };
    let ds = Dataset::generate(cfg.world, 0).unwrap();
    (cfg, ds)
}

fn bench_scoring(c: &mut Criterion) {
    let (cfg, ds) = small_dataset();
    let model = Model::init(cfg.vit_config(), ds.world.config.embed_dim(), &ds.world.prompt.context, 0).unwrap();
    c.bench_function("score_32_images_20_labels", |b| {
        b.iter(|| score_samples(&model, &ds.world, &ds.test, 3, HeadMode::Both).unwrap())
    });
}

fn bench_stage1_epoch(c: &mut Criterion) {
    let (cfg, ds) = small_dataset();
    let model = Model::init(cfg.vit_config(), ds.world.config.embed_dim(), &ds.world.prompt.context, 0).unwrap();
    let tc = TrainConfig { epochs_stage1: 1, ..TrainConfig::default() };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("stage1_epoch_32_images", |b| {
        b.iter(|| {
            let mut m = model.clone();
            train_stage1(&mut m, &ds, &tc, &mut |_| {}).unwrap();
            m
        })
    });
    group.finish();
}

fn bench_map(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (b, d) = (1000, 50);
    let scores: Vec<Vec<f64>> = (0..b).map(|_| (0..d).map(|_| rng.random()).collect()).collect();
    let y: Vec<bool> = (0..b * d).map(|_| rng.random_bool(0.2)).collect();
    let labels: Vec<String> = (0..d).map(|i| format!("l{i}")).collect();
    let gt = GroundTruthMatrix::new(y, b, labels.clone()).unwrap();
    let flat: Vec<f64> = scores.concat();
    let matrix = mkt_core::head::ScoreMatrix::new(mkt_core::Tensor::new(vec![b, d], flat).unwrap(), labels).unwrap();
    c.bench_function("map_1000x50", |bch| bch.iter(|| mean_ap(&matrix, &gt, None).unwrap()));
}

criterion_group!(benches, bench_scoring, bench_stage1_epoch, bench_map);
criterion_main!(benches);
