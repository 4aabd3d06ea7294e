use std::hint::black_box;

use aggdet_bench::{activations, proposals};
use aggdet_core::anchors::{assign_anchors, generate_anchors, MatchConfig};
use aggdet_core::infer::{nms_3d, NmsConfig};
use aggdet_core::model::{Detector, ModelConfig};
use aggdet_core::nn::{conv3d_forward, deconv3d_x2_forward, ConvConfig, Mode, Tensor};
use aggdet_core::roi::{roi_align_3d, AlignConfig, RoiBox};
use aggdet_core::Box3D;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3d_3x3x3");
    for &(ch, s) in &[(8usize, 16usize), (32, 8), (32, 16)] {
        let x = activations(1, ch, s, 1);
        let w = Tensor::<f32>::randn(&[ch, ch, 3, 3, 3], 0.1, &mut aggdet_bench::rng(2));
        let cfg = ConvConfig::same(ch, ch, 3);
        g.bench_with_input(BenchmarkId::from_parameter(format!("c{ch}_s{s}")), &(), |b, _| {
            b.iter(|| conv3d_forward(black_box(&x), &w, None, &cfg).unwrap())
        });
    }
    g.finish();

    let x = activations(1, 32, 8, 3);
    let w = Tensor::<f32>::randn(&[32, 32, 2, 2, 2], 0.1, &mut aggdet_bench::rng(4));
    c.bench_function("deconv3d_x2_c32_s8", |b| b.iter(|| deconv3d_x2_forward(black_box(&x), &w, None).unwrap()));
}

fn roi_align(c: &mut Criterion) {
    let feat = activations(1, 32, 5, 5);
    let roi = RoiBox::centered([2.5, 2.5, 2.5], 1.08);
    let mut g = c.benchmark_group("roi_align_3d");
    for samples in [1usize, 2, 4] {
        let cfg = AlignConfig { out_size: 2, samples };
        g.bench_with_input(BenchmarkId::from_parameter(samples), &cfg, |b, cfg| {
            b.iter(|| roi_align_3d(black_box(&feat), &roi, cfg).unwrap())
        });
    }
    g.finish();
}

fn nms(c: &mut Criterion) {
    let mut g = c.benchmark_group("nms_3d");
    for n in [64usize, 256, 1024] {
        let props = proposals(n, 64.0, n as u64);
        let cfg = NmsConfig::default();
        g.bench_with_input(BenchmarkId::from_parameter(n), &props, |b, p| b.iter(|| nms_3d(black_box(p), &cfg)));
    }
    g.finish();
}

fn anchors(c: &mut Criterion) {
    let anchors = generate_anchors([16, 16, 16], 4, &[4.0, 6.0]);
    let gts = vec![Box3D::new(20.0, 31.0, 40.5, 7.0), Box3D::new(50.2, 10.0, 12.0, 11.0)];
    let cfg = MatchConfig::default();
    c.bench_function("assign_anchors_8192x2", |b| b.iter(|| assign_anchors(black_box(&anchors), &gts, &cfg)));
}

fn detector(c: &mut Criterion) {
    let mut det = Detector::<f32>::new(ModelConfig::default(), 1).unwrap();
    let x = activations(1, 1, 32, 6);
    let mut g = c.benchmark_group("detector");
    g.sample_size(10);
    g.bench_function("rpn_forward_eval_32", |b| b.iter(|| det.forward_rpn(black_box(&x), Mode::Eval).unwrap()));
    g.finish();
}

criterion_group!(benches, conv, roi_align, nms, anchors, detector);
criterion_main!(benches);
