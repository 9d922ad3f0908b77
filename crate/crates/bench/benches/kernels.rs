use criterion::{black_box, criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};

use rovi_core::curation::{dedup, phash64};
use rovi_core::fixtures::{chain_hash_set, dense_instances, dense_scene, random_hash_set};
use rovi_core::geometry::nms_per_category;
use rovi_core::resample::{resample_image, ResampleConfig};

fn nms(c: &mut Criterion) {
    let mut g = c.benchmark_group("nms_per_category");
    for boxes in [50, 107, 400] {
        let (scene, _, _) = dense_scene(7, boxes / 4, boxes);
        g.bench_with_input(BenchmarkId::from_parameter(boxes), &scene, |b, s| {
            b.iter(|| nms_per_category(black_box(s), 0.4))
        });
    }
    g.finish();
}

fn dedup_bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("dedup");
    for n in [1_000, 10_000] {
        let records = random_hash_set(3, n);
        g.bench_with_input(BenchmarkId::new("random", n), &records, |b, r| b.iter(|| dedup(black_box(r), 10).unwrap()));
    }
    let chains = chain_hash_set(5, 100, 50, 8);
    g.bench_function("chains/5000", |b| b.iter(|| dedup(black_box(&chains), 10).unwrap()));
    g.finish();
}

fn resample(c: &mut Criterion) {
    let cfg = ResampleConfig::default();
    let (inst, w, h) = dense_instances(3, 25, 107);
    c.bench_function("resample_image/107", |b| {
        b.iter_batched(|| inst.clone(), |i| resample_image(&i, w, h, "bench", &cfg), BatchSize::SmallInput)
    });
}

fn phash(c: &mut Criterion) {
    let img = image::RgbImage::from_fn(640, 480, |x, y| {
        image::Rgb([(x % 251) as u8, (y % 241) as u8, ((x ^ y) % 255) as u8])
    });
    c.bench_function("phash64/640x480", |b| b.iter(|| phash64(black_box(&img))));
}

criterion_group!(benches, nms, dedup_bench, resample, phash);
criterion_main!(benches);
