//! Central finite-difference checks of every analytic backward pass, run in
//! 64-bit precision on randomized small shapes.

use super::CheckReport;
use crate::anchors::{AnchorLabels, Label};
use crate::error::Result;
use crate::loss::{self, FocalConfig, FocusShiftState, LevelBatch};
use crate::model::{Backbone, BackboneConfig, Fprn, FprnConfig, Magnify, RoiRequest, RpnHead};
use crate::nn::{self, BatchNorm3d, ConvConfig, HasParams, Mode, Param, PoolMode, Tensor};
use crate::rng::{self, DetRng};
use crate::roi::{roi_align_slice, roi_align_slice_backward, AlignConfig, Proposal, RoiBox};
use crate::volume::Box3D;

/// Relative step: `h = STEP * max(1, |x|)`.
pub const STEP: f64 = 1e-4;

/// Deep ReLU stacks: a smaller step makes crossing a kink unlikely.
const COMPOSITE_STEP: f64 = 1e-6;

/// Losses have steep higher derivatives at large focusing exponents, so
/// they use a smaller step to keep truncation error down.
const LOSS_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared in absolute terms.
const FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Indices to probe: all of them, or a seeded sample of `max`.
fn coords(n: usize, max: usize, rng: &mut DetRng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|_| rng::index(rng, n)).collect()
    }
}

/// Worst relative error between `analytic` and central differences of `f`
/// at the probed coordinates of `x`.
pub fn check_fn(f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], analytic: &[f64], probe: &[usize], step: f64) -> Result<f64> {
    check_fn_inner(f, x, analytic, probe, step, false)
}

/// As [`check_fn`], but errors within the rounding noise of the objective are
/// not counted. For large composite objectives whose structurally zero
/// gradients (a bias feeding straight into a normalization) would
/// otherwise be judged on pure rounding noise.
pub fn check_fn_noisy(f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], analytic: &[f64], probe: &[usize], step: f64) -> Result<f64> {
    check_fn_inner(f, x, analytic, probe, step, true)
}

fn check_fn_inner(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    probe: &[usize],
    step: f64,
    discount_rounding: bool,
) -> Result<f64> {
    let mut xs = x.to_vec();
    let mut worst: f64 = 0.0;
    for &i in probe {
        let h = step * x[i].abs().max(1.0);
        xs[i] = x[i] + h;
        let fp = f(&xs)?;
        xs[i] = x[i] - h;
        let fm = f(&xs)?;
        xs[i] = x[i];
        let numeric = (fp - fm) / (2.0 * h);
        let mut err = rel_err(analytic[i], numeric);
        if discount_rounding {
            // Rounding in the two function values bounds how well the
            // difference quotient can be resolved.
            let noise = 64.0 * f64::EPSILON * (fp.abs() + fm.abs()) / (2.0 * h);
            let slack = (analytic[i] - numeric).abs().min(noise);
            err -= slack / analytic[i].abs().max(numeric.abs()).max(FLOOR);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

fn randn(shape: &[usize], rng: &mut DetRng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Random values bounded away from zero, so ReLU kinks and max-pool ties
/// are not crossed by the finite-difference step.
fn away_from_zero(shape: &[usize], rng: &mut DetRng) -> Tensor<f64> {
    Tensor::<f64>::randn(shape, 1.0, rng).map(|v: f64| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

fn flat_params<M: HasParams<f64> + ?Sized>(m: &mut M, grads: bool) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit_params(&mut |p: &mut Param<f64>| {
        if p.trainable {
            out.extend_from_slice(if grads { p.grad.data() } else { p.value.data() });
        }
    });
    out
}

fn set_flat<M: HasParams<f64> + ?Sized>(m: &mut M, values: &[f64]) {
    let mut off = 0;
    m.visit_params(&mut |p: &mut Param<f64>| {
        if p.trainable {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
    });
}

/// Moves every bias off its zero initialization so that no ReLU input sits
/// exactly on the kink.
fn jitter_biases<M: HasParams<f64> + ?Sized>(m: &mut M, rng: &mut DetRng) {
    m.visit_params(&mut |p: &mut Param<f64>| {
        if p.trainable && p.name.ends_with("bias") {
            for v in p.value.data_mut() {
                *v += 0.2 * rng::normal(rng);
            }
        }
    });
}

/// Checks input and parameter gradients of a stateful module under the
/// loss `<forward(x), r>`. Steps below [`STEP`] discount rounding noise.
fn check_module<M: HasParams<f64>>(
    m: &mut M,
    x: &Tensor<f64>,
    fwd: impl Fn(&mut M, &Tensor<f64>) -> Result<Tensor<f64>>,
    bwd: impl Fn(&mut M, &Tensor<f64>) -> Result<Tensor<f64>>,
    max_coords: usize,
    step: f64,
    rng: &mut DetRng,
) -> Result<f64> {
    let discount = step < STEP;
    jitter_biases(m, rng);
    m.zero_grad();
    let y = fwd(m, x)?;
    let r = randn(y.shape(), rng);
    let gx = bwd(m, &r)?;
    let gp = flat_params(m, true);
    let p0 = flat_params(m, false);
    let probe_x = coords(x.len(), max_coords, rng);
    let ex = check_fn_inner(
        |xs| {
            let t = Tensor::from_vec(x.shape(), xs.to_vec())?;
            Ok(fwd(m, &t)?.dot(&r))
        },
        x.data(),
        gx.data(),
        &probe_x,
        step,
        discount,
    )?;
    let probe_p = coords(p0.len(), max_coords, rng);
    let ep = check_fn_inner(
        |ps| {
            set_flat(m, ps);
            Ok(fwd(m, x)?.dot(&r))
        },
        &p0,
        &gp,
        &probe_p,
        step,
        discount,
    )?;
    set_flat(m, &p0);
    Ok(ex.max(ep))
}

fn dims3(rng: &mut DetRng, lo: usize, hi: usize) -> [usize; 3] {
    [0; 3].map(|_| lo + rng::index(rng, hi - lo + 1))
}

pub fn conv3d(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("conv3d", 1e-6);
    let mut rng = rng::derive(seed, 1);
    for case in 0..cases {
        let k = 1 + rng::index(&mut rng, 3);
        let stride = 1 + rng::index(&mut rng, 2);
        let pad = rng::index(&mut rng, k / 2 + 1);
        let cfg = ConvConfig {
            in_ch: 1 + rng::index(&mut rng, 3),
            out_ch: 1 + rng::index(&mut rng, 3),
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [pad; 3],
            bias: true,
        };
        let sp = if case == 0 { [4, 4, 4] } else { dims3(&mut rng, k.max(2), 5) };
        let in_ch = if case == 0 { 2 } else { cfg.in_ch };
        let cfg = ConvConfig { in_ch, ..cfg };
        let x = randn(&[1 + rng::index(&mut rng, 2), in_ch, sp[0], sp[1], sp[2]], &mut rng);
        let w = randn(&[cfg.out_ch, in_ch, k, k, k], &mut rng);
        let b = randn(&[cfg.out_ch], &mut rng);
        let y = nn::conv3d_forward(&x, &w, Some(&b), &cfg)?;
        let r = randn(y.shape(), &mut rng);
        let (gx, gw, gb) = nn::conv3d_backward(&x, &w, &cfg, &r)?;
        let px = coords(x.len(), 200, &mut rng);
        let e1 = check_fn(
            |v| Ok(nn::conv3d_forward(&Tensor::from_vec(x.shape(), v.to_vec())?, &w, Some(&b), &cfg)?.dot(&r)),
            x.data(),
            gx.data(),
            &px,
            STEP,
        )?;
        let pw = coords(w.len(), 200, &mut rng);
        let e2 = check_fn(
            |v| Ok(nn::conv3d_forward(&x, &Tensor::from_vec(w.shape(), v.to_vec())?, Some(&b), &cfg)?.dot(&r)),
            w.data(),
            gw.data(),
            &pw,
            STEP,
        )?;
        let pb: Vec<usize> = (0..b.len()).collect();
        let e3 = check_fn(
            |v| Ok(nn::conv3d_forward(&x, &w, Some(&Tensor::from_vec(b.shape(), v.to_vec())?), &cfg)?.dot(&r)),
            b.data(),
            gb.data(),
            &pb,
            STEP,
        )?;
        rep.record(e1.max(e2).max(e3));
    }
    Ok(rep)
}

pub fn deconv3d(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("deconv3d_x2", 1e-6);
    let mut rng = rng::derive(seed, 2);
    for _ in 0..cases {
        let (cin, cout) = (1 + rng::index(&mut rng, 3), 1 + rng::index(&mut rng, 3));
        let sp = dims3(&mut rng, 1, 3);
        let x = randn(&[1 + rng::index(&mut rng, 2), cin, sp[0], sp[1], sp[2]], &mut rng);
        let w = randn(&[cin, cout, 2, 2, 2], &mut rng);
        let b = randn(&[cout], &mut rng);
        let y = nn::deconv3d_x2_forward(&x, &w, Some(&b))?;
        let r = randn(y.shape(), &mut rng);
        let (gx, gw, gb) = nn::deconv3d_x2_backward(&x, &w, &r)?;
        let all = |n: usize| (0..n).collect::<Vec<_>>();
        let e1 = check_fn(
            |v| Ok(nn::deconv3d_x2_forward(&Tensor::from_vec(x.shape(), v.to_vec())?, &w, Some(&b))?.dot(&r)),
            x.data(),
            gx.data(),
            &all(x.len()),
            STEP,
        )?;
        let e2 = check_fn(
            |v| Ok(nn::deconv3d_x2_forward(&x, &Tensor::from_vec(w.shape(), v.to_vec())?, Some(&b))?.dot(&r)),
            w.data(),
            gw.data(),
            &all(w.len()),
            STEP,
        )?;
        let e3 = check_fn(
            |v| Ok(nn::deconv3d_x2_forward(&x, &w, Some(&Tensor::from_vec(b.shape(), v.to_vec())?))?.dot(&r)),
            b.data(),
            gb.data(),
            &all(b.len()),
            STEP,
        )?;
        rep.record(e1.max(e2).max(e3));
    }
    Ok(rep)
}

pub fn pool_avg(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("pool3d_avg", 1e-6);
    let mut rng = rng::derive(seed, 3);
    for _ in 0..cases {
        let sp = dims3(&mut rng, 1, 3).map(|v| 2 * v);
        let x = randn(&[1 + rng::index(&mut rng, 2), 1 + rng::index(&mut rng, 2), sp[0], sp[1], sp[2]], &mut rng);
        let (y, _) = nn::pool3d_forward(&x, PoolMode::Avg)?;
        let r = randn(y.shape(), &mut rng);
        let gx = nn::pool3d_backward(x.shape(), PoolMode::Avg, &[], &r)?;
        let probe = coords(x.len(), 200, &mut rng);
        let e = check_fn(
            |v| Ok(nn::pool3d_forward(&Tensor::from_vec(x.shape(), v.to_vec())?, PoolMode::Avg)?.0.dot(&r)),
            x.data(),
            gx.data(),
            &probe,
            STEP,
        )?;
        rep.record(e);
    }
    Ok(rep)
}

/// Max pooling: the gradient must land exactly on the first argmax.
pub fn pool_max_routing(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("pool3d_max routing", 0.0);
    let mut rng = rng::derive(seed, 4);
    for _ in 0..cases {
        let sp = dims3(&mut rng, 1, 2).map(|v| 2 * v);
        // Quantized values force ties.
        let x = randn(&[1, 2, sp[0], sp[1], sp[2]], &mut rng).map(|v| (v * 2.0).round());
        let (y, arg) = nn::pool3d_forward(&x, PoolMode::Max)?;
        let r = randn(y.shape(), &mut rng);
        let gx = nn::pool3d_backward(x.shape(), PoolMode::Max, &arg, &r)?;
        let mut expect = vec![0.0; x.len()];
        let [_, c, d, h, w] = x.dims5()?;
        let mut oi = 0;
        for ch in 0..c {
            for z in 0..d / 2 {
                for yy in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let mut best: Option<(usize, f64)> = None;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = ((ch * d + 2 * z + dz) * h + 2 * yy + dy) * w + 2 * xx + dx;
                                    if best.map_or(true, |(_, v)| x.data()[i] > v) {
                                        best = Some((i, x.data()[i]));
                                    }
                                }
                            }
                        }
                        expect[best.expect("non-empty window").0] += r.data()[oi];
                        oi += 1;
                    }
                }
            }
        }
        rep.record_match(gx.data() == expect.as_slice());
    }
    Ok(rep)
}

pub fn batchnorm(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("batchnorm3d", 1e-5);
    let mut rng = rng::derive(seed, 5);
    for _ in 0..cases {
        let c = 1 + rng::index(&mut rng, 3);
        let sp = dims3(&mut rng, 1, 3);
        // Batch statistics need at least two values per channel.
        let n = if sp == [1, 1, 1] { 2 } else { 1 + rng::index(&mut rng, 2) };
        let x = randn(&[n, c, sp[0], sp[1], sp[2]], &mut rng).map(|v| 2.0 * v + 0.5);
        let mut bn = BatchNorm3d::<f64>::new("bn", c);
        bn.gamma.value = randn(&[c], &mut rng);
        bn.beta.value = randn(&[c], &mut rng);
        let e = check_module(&mut bn, &x, |m, t| m.forward(t, Mode::Train), |m, g| m.backward(g), 200, STEP, &mut rng)?;
        rep.record(e);
    }
    Ok(rep)
}

pub fn relu(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("relu", 1e-6);
    let mut rng = rng::derive(seed, 6);
    for _ in 0..cases {
        let x = away_from_zero(&[1, 2, 3, 2, 3], &mut rng);
        let r = randn(x.shape(), &mut rng);
        let g = nn::relu_backward(&x, &r)?;
        let probe: Vec<usize> = (0..x.len()).collect();
        let e = check_fn(
            |v| Ok(nn::relu_forward(&Tensor::from_vec(x.shape(), v.to_vec())?).dot(&r)),
            x.data(),
            g.data(),
            &probe,
            STEP,
        )?;
        rep.record(e);
    }
    Ok(rep)
}

pub fn linear(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("linear", 1e-6);
    let mut rng = rng::derive(seed, 7);
    for _ in 0..cases {
        let (n, fin, fout) = (1 + rng::index(&mut rng, 3), 1 + rng::index(&mut rng, 12), 1 + rng::index(&mut rng, 6));
        let mut layer = nn::Linear::<f64>::new("fc", fin, fout, &mut rng);
        layer.bias.value = randn(&[fout], &mut rng);
        let x = randn(&[n, fin], &mut rng);
        let e = check_module(&mut layer, &x, |m, t| m.forward(t, Mode::Train), |m, g| m.backward(g), 200, STEP, &mut rng)?;
        rep.record(e);
    }
    Ok(rep)
}

pub fn magnify(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("magnify stack", 1e-5);
    let mut rng = rng::derive(seed, 8);
    for case in 0..cases {
        let ch = 2 + 2 * rng::index(&mut rng, 2);
        let side = 1 + case % 3;
        let mut m = Magnify::<f64>::new("mag", ch, true, &mut rng);
        let x = randn(&[1 + rng::index(&mut rng, 2), ch, side, side, side], &mut rng);
        let e = check_module(&mut m, &x, |m, t| m.forward(t, Mode::Train), |m, g| m.backward(g), 60, COMPOSITE_STEP, &mut rng)?;
        rep.record(e);
    }
    Ok(rep)
}

pub fn roi_align(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("roi_align_3d", 1e-6);
    let mut rng = rng::derive(seed, 9);
    for _ in 0..cases {
        let c = 1 + rng::index(&mut rng, 3);
        let dims = dims3(&mut rng, 2, 6);
        let side = rng::uniform(&mut rng, 0.3, 4.0);
        let center = dims.map(|n| rng::uniform(&mut rng, 0.0, n as f64));
        let roi = RoiBox::centered(center, side);
        let cfg = AlignConfig {
            out_size: 1 + rng::index(&mut rng, 2),
            samples: 1 + rng::index(&mut rng, 2),
        };
        let n = c * dims.iter().product::<usize>();
        let feat = randn(&[n], &mut rng);
        let out = roi_align_slice(feat.data(), c, dims, &roi, &cfg);
        let r = randn(&[out.len()], &mut rng);
        let mut g = vec![0.0; n];
        roi_align_slice_backward(r.data(), c, dims, &roi, &cfg, &mut g);
        let probe: Vec<usize> = (0..n).collect();
        let e = check_fn(
            |v| Ok(roi_align_slice(v, c, dims, &roi, &cfg).iter().zip(r.data()).map(|(a, b)| a * b).sum()),
            feat.data(),
            &g,
            &probe,
            STEP,
        )?;
        rep.record(e);
    }
    Ok(rep)
}

/// The 768 -> 256 -> 1 classifier on aggregated features.
pub fn classifier_head(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("classifier head", 1e-6);
    let mut rng = rng::derive(seed, 10);
    for _ in 0..cases {
        let mut fprn = Fprn::<f64>::new(FprnConfig::default(), 32, 3, &mut rng)?;
        fprn.fc1.bias.value = randn(&[256], &mut rng).map(|v| 0.1 * v);
        let n = 1 + rng::index(&mut rng, 3);
        let feats = randn(&[n, fprn.feature_len()], &mut rng);
        struct Head<'a>(&'a mut Fprn<f64>);
        impl HasParams<f64> for Head<'_> {
            fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
                self.0.fc1.visit_params(f);
                self.0.fc2.visit_params(f);
            }
        }
        let mut h = Head(&mut fprn);
        let e = check_module(
            &mut h,
            &feats,
            |m, t| {
                let logits = m.0.head_forward(t, Mode::Train)?;
                Tensor::from_vec(&[logits.len()], logits)
            },
            |m, g| m.0.head_backward(g.data()),
            64,
            STEP,
            &mut rng,
        )?;
        rep.record(e);
    }
    Ok(rep)
}

fn random_proposal(rng: &mut DetRng, extent: f64) -> Proposal {
    let level = [4, 8, 16][rng::index(rng, 3)];
    let d = rng::uniform(rng, 3.0, 20.0);
    let c = [0; 3].map(|_| rng::uniform(rng, 0.0, extent));
    Proposal::from_rpn(Box3D::new(c[0], c[1], c[2], d), 0.5, level)
}

/// Crop, optional magnification, RoI Align and classifier, end to end,
/// differentiated with respect to pyramid features and all parameters.
pub fn fprn_path(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("fprn end-to-end", 1e-4);
    let mut rng = rng::derive(seed, 11);
    for case in 0..cases {
        let ch = 2;
        let cfg = FprnConfig {
            crop_side: if case % 2 == 0 { 3 } else { 5 },
            magnify: case % 3 != 2,
            magnify_bias: true,
            align: AlignConfig::default(),
            hidden: 8,
        };
        let mut fprn = Fprn::<f64>::new(cfg, ch, 3, &mut rng)?;
        jitter_biases(&mut fprn, &mut rng);
        let batch = 1 + rng::index(&mut rng, 2);
        let pyramid: Vec<Tensor<f64>> = [4usize, 2, 1].iter().map(|&n| randn(&[batch, ch, n, n, n], &mut rng)).collect();
        let rois: Vec<RoiRequest> = (0..1 + rng::index(&mut rng, 3))
            .map(|_| RoiRequest {
                batch: rng::index(&mut rng, batch),
                proposal: random_proposal(&mut rng, 16.0),
            })
            .collect();
        let strides = [4, 8, 16];
        fprn.zero_grad();
        let logits = fprn.forward(&pyramid, &strides, &rois, Mode::Train)?;
        let r = randn(&[logits.len()], &mut rng);
        let gp = fprn.backward(r.data(), true)?.expect("pyramid gradients requested");
        let gparams = flat_params(&mut fprn, true);
        let p0 = flat_params(&mut fprn, false);
        let mut worst: f64 = 0.0;
        for l in 0..3 {
            let probe = coords(pyramid[l].len(), 40, &mut rng);
            let e = check_fn(
                |v| {
                    let mut p = pyramid.clone();
                    p[l] = Tensor::from_vec(pyramid[l].shape(), v.to_vec())?;
                    let z = fprn.forward(&p, &strides, &rois, Mode::Train)?;
                    Ok(z.iter().zip(r.data()).map(|(a, b)| a * b).sum())
                },
                pyramid[l].data(),
                gp[l].data(),
                &probe,
                COMPOSITE_STEP,
            )?;
            worst = worst.max(e);
        }
        let probe = coords(p0.len(), 60, &mut rng);
        let e = check_fn(
            |v| {
                set_flat(&mut fprn, v);
                let z = fprn.forward(&pyramid, &strides, &rois, Mode::Train)?;
                Ok(z.iter().zip(r.data()).map(|(a, b)| a * b).sum())
            },
            &p0,
            &gparams,
            &probe,
            COMPOSITE_STEP,
        )?;
        rep.record(worst.max(e));
    }
    Ok(rep)
}

/// Backbone plus the three detection heads, differentiated with respect to
/// a sample of all parameters.
pub fn backbone_heads(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("backbone+heads", 1e-4);
    let mut rng = rng::derive(seed, 12);
    let cfg = BackboneConfig {
        crop: 16,
        pre_channels: 2,
        growth: 2,
        bottleneck: 3,
        encode_layers: [1, 1, 1],
        decode_layers: [1, 1],
        pyramid_channels: 3,
    };
    for _ in 0..cases {
        struct Net {
            bb: Backbone<f64>,
            heads: Vec<RpnHead<f64>>,
        }
        impl HasParams<f64> for Net {
            fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
                self.bb.visit_params(f);
                for h in &mut self.heads {
                    h.visit_params(f);
                }
            }
        }
        let mut net = Net {
            bb: Backbone::new(cfg.clone(), &mut rng)?,
            heads: (0..3).map(|i| RpnHead::new(&format!("h{i}"), 3, 2, 3, 2, &mut rng)).collect(),
        };
        jitter_biases(&mut net, &mut rng);
        let x = randn(&[2, 1, 16, 16, 16], &mut rng);
        let run = |net: &mut Net| -> Result<Vec<(Vec<f64>, Vec<[f64; 4]>)>> {
            let pyr = net.bb.forward(&x, Mode::Train)?;
            net.heads
                .iter_mut()
                .zip(&pyr)
                .map(|(h, p)| h.forward(p, Mode::Train).map(|o| (o.logits, o.regs)))
                .collect()
        };
        net.zero_grad();
        let outs = run(&mut net)?;
        let weights: Vec<(Vec<f64>, Vec<[f64; 4]>)> = outs
            .iter()
            .map(|(l, g)| {
                (
                    (0..l.len()).map(|_| rng::normal(&mut rng)).collect(),
                    (0..g.len()).map(|_| [0; 4].map(|_| rng::normal(&mut rng))).collect(),
                )
            })
            .collect();
        let mut pyr_grads = Vec::new();
        for (h, (wl, wr)) in net.heads.iter_mut().zip(&weights) {
            pyr_grads.push(h.backward(wl, wr)?);
        }
        net.bb.backward(&pyr_grads)?;
        let objective = |outs: &[(Vec<f64>, Vec<[f64; 4]>)]| -> f64 {
            outs.iter()
                .zip(&weights)
                .map(|((l, g), (wl, wr))| {
                    l.iter().zip(wl).map(|(a, b)| a * b).sum::<f64>()
                        + g.iter().zip(wr).map(|(a, b)| (0..4).map(|k| a[k] * b[k]).sum::<f64>()).sum::<f64>()
                })
                .sum()
        };
        let gparams = flat_params(&mut net, true);
        let p0 = flat_params(&mut net, false);
        let probe = coords(p0.len(), 40, &mut rng);
        let e = check_fn_noisy(
            |v| {
                set_flat(&mut net, v);
                Ok(objective(&run(&mut net)?))
            },
            &p0,
            &gparams,
            &probe,
            COMPOSITE_STEP,
        )?;
        rep.record(e);
    }
    Ok(rep)
}

fn random_logits(n: usize, rng: &mut DetRng) -> Vec<f64> {
    // Keep away from 0 so the true-negative count is locally constant.
    (0..n)
        .map(|_| {
            let v = 2.5 * rng::normal(rng);
            if v.abs() < 0.05 {
                v + 0.1
            } else {
                v
            }
        })
        .collect()
}

fn random_labels(n: usize, rng: &mut DetRng) -> Vec<Label> {
    (0..n)
        .map(|_| match rng::index(rng, 5) {
            0 => Label::Positive,
            1 => Label::Ignore,
            _ => Label::Negative,
        })
        .collect()
}

pub fn losses(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("losses", 1e-6);
    let mut rng = rng::derive(seed, 13);
    for _ in 0..cases {
        let n = 2 + rng::index(&mut rng, 30);
        let z = random_logits(n, &mut rng);
        let cfg = FocalConfig {
            alpha: rng::uniform(&mut rng, 0.1, 0.9),
            gamma: [0.0, 1.0, 2.0, 5.0][rng::index(&mut rng, 4)],
        };
        let all: Vec<usize> = (0..n).collect();
        let mut worst: f64 = 0.0;

        let mut bools: Vec<bool> = (0..n).map(|_| rng::coin(&mut rng, 0.3)).collect();
        bools[0] = true;
        let (_, g) = loss::focal_vanilla(&z, &bools, &cfg)?;
        worst = worst.max(check_fn(|v| Ok(loss::focal_vanilla(v, &bools, &cfg)?.0), &z, &g, &all, LOSS_STEP)?);

        let labels = random_labels(n, &mut rng);
        let state = FocusShiftState::new(rng::index(&mut rng, 100), 100);
        let out = loss::focal_adaptive(&z, &labels, &cfg, &state)?;
        worst = worst.max(check_fn(|v| Ok(loss::focal_adaptive(v, &labels, &cfg, &state)?.loss), &z, &out.grad, &all, LOSS_STEP)?);

        let (_, g) = loss::fprn_loss(&z, &bools)?;
        worst = worst.max(check_fn(|v| Ok(loss::fprn_loss(v, &bools)?.0), &z, &g, &all, LOSS_STEP)?);

        let pred = [0; 4].map(|_| 2.0 * rng::normal(&mut rng));
        let target = [0; 4].map(|_| 2.0 * rng::normal(&mut rng));
        let (_, g) = loss::smooth_l1(&pred, &target, 1.0);
        let gap_ok = pred.iter().zip(&target).all(|(p, t)| ((p - t).abs() - 1.0).abs() > 1e-3);
        if gap_ok {
            worst = worst.max(check_fn(
                |v| Ok(loss::smooth_l1(&[v[0], v[1], v[2], v[3]], &target, 1.0).0),
                &pred,
                &g,
                &[0, 1, 2, 3],
                LOSS_STEP,
            )?);
        }

        // Two-level RPN composition, differentiated in logits and regressions.
        let levels: Vec<(Vec<f64>, Vec<[f64; 4]>, AnchorLabels)> = (0..2)
            .map(|_| {
                let m = 3 + rng::index(&mut rng, 8);
                let labels = random_labels(m, &mut rng);
                let targets = (0..m).map(|_| [0; 4].map(|_| rng::normal(&mut rng))).collect();
                let anchors = AnchorLabels {
                    matched: labels.iter().map(|&l| (l == Label::Positive).then_some(0)).collect(),
                    labels,
                    targets,
                };
                let regs = (0..m).map(|_| [0; 4].map(|_| rng::normal(&mut rng))).collect();
                (random_logits(m, &mut rng), regs, anchors)
            })
            .collect();
        let batches: Vec<LevelBatch> = levels
            .iter()
            .map(|(l, r, a)| LevelBatch {
                logits: l,
                regs: r,
                labels: a,
            })
            .collect();
        let out = loss::rpn_loss(&batches, &cfg, &state, 1.0)?;
        for li in 0..2 {
            let probe: Vec<usize> = (0..levels[li].0.len()).collect();
            worst = worst.max(check_fn(
                |v| {
                    let mut b = batches.clone();
                    b[li].logits = v;
                    Ok(loss::rpn_loss(&b, &cfg, &state, 1.0)?.total)
                },
                &levels[li].0,
                &out.grad_logits[li],
                &probe,
                LOSS_STEP,
            )?);
            let flat: Vec<f64> = levels[li].1.iter().flatten().copied().collect();
            let gflat: Vec<f64> = out.grad_regs[li].iter().flatten().copied().collect();
            let near_kink = flat
                .iter()
                .zip(levels[li].2.targets.iter().flatten())
                .any(|(p, t)| ((p - t).abs() - 1.0).abs() < 1e-3);
            if !near_kink {
                let probe: Vec<usize> = (0..flat.len()).collect();
                worst = worst.max(check_fn(
                    |v| {
                        let regs: Vec<[f64; 4]> = v.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
                        let mut b = batches.clone();
                        b[li].regs = &regs;
                        Ok(loss::rpn_loss(&b, &cfg, &state, 1.0)?.total)
                    },
                    &flat,
                    &gflat,
                    &probe,
                    LOSS_STEP,
                )?);
            }
        }
        rep.record(worst);
    }
    Ok(rep)
}

/// Every suite with `cases` random shapes each.
pub fn run_all(cases: usize, seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        conv3d(cases, seed)?,
        deconv3d(cases, seed)?,
        pool_avg(cases, seed)?,
        pool_max_routing(cases, seed)?,
        batchnorm(cases, seed)?,
        relu(cases, seed)?,
        linear(cases, seed)?,
        magnify(cases, seed)?,
        roi_align(cases, seed)?,
        classifier_head(cases, seed)?,
        fprn_path(cases, seed)?,
        backbone_heads(cases, seed)?,
        losses(cases, seed)?,
    ])
}
