use aggdet_core::synth::{scan_spec, DatasetSpec};
use aggdet_core::{generate_phantom, infer_scan, Box3D, DetectorLike, InferConfig, Proposal, Result, Tensor};

/// Flags strict 3x3x3 intensity maxima; the score depends only on that
/// neighborhood, so the receptive field is one voxel.
struct LocalPeaks;

impl DetectorLike for LocalPeaks {
    fn detect(&mut self, x: &Tensor<f32>, _with_fprn: bool) -> Result<Vec<Proposal>> {
        let [_, _, d, h, w] = x.dims5()?;
        let v = |z: usize, y: usize, x_: usize| x.data()[(z * h + y) * w + x_];
        let mut out = Vec::new();
        for z in 1..d - 1 {
            for y in 1..h - 1 {
                for xx in 1..w - 1 {
                    let c = v(z, y, xx);
                    let mut sum = 0.0f64;
                    let mut peak = c > 0.5;
                    for (dz, dy, dx) in (0..27).map(|k| (k / 9, k / 3 % 3, k % 3)) {
                        let n = v(z + dz - 1, y + dy - 1, xx + dx - 1);
                        sum += n as f64;
                        peak &= (dz, dy, dx) == (1, 1, 1) || n < c;
                    }
                    if peak {
                        let score = 1.0 / (1.0 + (-sum / 27.0).exp());
                        out.push(Proposal::from_rpn(Box3D::new(z as f64 + 0.5, y as f64 + 0.5, xx as f64 + 0.5, 4.0), score, 0));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn keyed(props: &[Proposal]) -> Vec<([u64; 3], u64)> {
    let mut k: Vec<_> = props.iter().map(|p| (p.box3d.center().map(f64::to_bits), p.score.to_bits())).collect();
    k.sort();
    k
}

#[test]
fn tiling_is_exact_for_a_local_detector() {
    let ds = DatasetSpec::default();
    for i in 0..4 {
        let vol = generate_phantom(&scan_spec(77, i, &ds)).unwrap().volume;
        let whole = InferConfig {
            tile: None,
            ..InferConfig::default()
        };
        let tiled = InferConfig {
            tile: Some(32),
            margin: 16,
            ..InferConfig::default()
        };
        let a = infer_scan(&mut [&mut LocalPeaks], &vol, &whole).unwrap();
        let b = infer_scan(&mut [&mut LocalPeaks], &vol, &tiled).unwrap();
        assert!(!a.fused.is_empty());
        assert_eq!(keyed(&a.fused), keyed(&b.fused), "scan {i}");
    }
}
