use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use tkd_core::distill::{nms_loss, tkd_loss, DistillConfig};
use tkd_core::eval::bench_tensors;

fn losses(c: &mut Criterion) {
    let cfg = DistillConfig::default();
    let mut group = c.benchmark_group("loss");
    for n in [1usize, 10, 25, 50] {
        let (student, oracle, gt) = bench_tensors(n, 7).unwrap();
        let gt: Vec<_> = gt.iter().map(|g| g.as_detection()).collect();
        group.bench_with_input(BenchmarkId::new("tkd", n), &n, |b, _| {
            b.iter(|| tkd_loss(black_box(&student), &oracle, &cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("nms", n), &n, |b, _| {
            b.iter(|| nms_loss(black_box(&student), &oracle, &gt, 0.5, 0.45).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, losses);
criterion_main!(benches);
