use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use orefsdet::tensor::{conv2d, depthwise_xcorr, no_grad, roi_align, Conv2dSpec, RoiBox};
use orefsdet_bench::filled;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for &(ch, hw) in &[(64, 40), (64, 80)] {
        let x = filled(&[ch, hw, hw], 1);
        let w = filled(&[ch, ch, 3, 3], 2);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{ch}x{hw}x{hw}")), &(), |b, _| {
            b.iter(|| no_grad(|| conv2d(&x, &w, None, Conv2dSpec { stride: 1, padding: 1 }).unwrap()))
        });
    }
    g.finish();
}

fn xcorr(c: &mut Criterion) {
    let y = filled(&[64, 40, 40], 3);
    let k33 = filled(&[64, 3, 3], 4);
    let k31 = filled(&[64, 3, 1], 5);
    let k13 = filled(&[64, 1, 3], 6);
    let mut g = c.benchmark_group("depthwise_xcorr");
    g.bench_function("dense_3x3", |b| b.iter(|| no_grad(|| depthwise_xcorr(&y, &k33).unwrap())));
    g.bench_function("strip_3x1_1x3", |b| {
        b.iter(|| no_grad(|| depthwise_xcorr(&depthwise_xcorr(&y, &k31).unwrap(), &k13).unwrap()))
    });
    g.finish();
}

fn roi(c: &mut Criterion) {
    let f = filled(&[64, 40, 40], 7);
    let boxes: Vec<RoiBox> = (0..256)
        .map(|i| {
            let o = (i % 16) as f32 * 16.0;
            RoiBox::new(o, o * 0.5, o + 48.0, o * 0.5 + 64.0)
        })
        .collect();
    let mut g = c.benchmark_group("roi_align_256");
    for res in [4, 8] {
        g.bench_with_input(BenchmarkId::from_parameter(res), &res, |b, &r| {
            b.iter(|| no_grad(|| roi_align(&f, &boxes, 1.0 / 8.0, r).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, conv, xcorr, roi);
criterion_main!(benches);
