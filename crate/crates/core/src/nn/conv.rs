//! 3-D cross-correlation (im2col + GEMM) and the stride-2 transposed
//! convolution used for upsampling.

use super::tensor::{HasParams, Mode, Param, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::DetRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvConfig {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub bias: bool,
}

impl ConvConfig {
    /// Cubic kernel, stride 1, "same" padding.
    pub fn same(in_ch: usize, out_ch: usize, k: usize) -> Self {
        ConvConfig {
            in_ch,
            out_ch,
            kernel: [k; 3],
            stride: [1; 3],
            padding: [k / 2; 3],
            bias: true,
        }
    }

    pub fn with_bias(self, bias: bool) -> Self {
        ConvConfig { bias, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::invalid("channels", "must be >= 1"));
        }
        if self.kernel.iter().chain(&self.stride).any(|&v| v == 0) {
            return Err(Error::invalid("kernel/stride", "must be >= 1"));
        }
        Ok(())
    }

    pub fn out_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            if span < self.kernel[a] {
                return Err(Error::shape(
                    format!("spatial axis {a}"),
                    format!(">= {} after padding", self.kernel[a]),
                    span,
                ));
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }
}

/// Range of output indices whose sampled input index `o * s + k - p` lies in
/// `[0, n)`.
#[inline]
fn valid_range(out: usize, n: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    let (k, p, s, n) = (k as isize, p as isize, s as isize, n as isize);
    let lo = if p - k > 0 { (p - k + s - 1) / s } else { 0 };
    let hi = if n + p - k > 0 { (n + p - k + s - 1) / s } else { 0 };
    (lo.min(out as isize) as usize, hi.clamp(lo, out as isize) as usize)
}

fn im2col<T: Scalar>(x: &[T], dims: [usize; 3], cfg: &ConvConfig, od: [usize; 3], col: &mut [T]) {
    let [d, h, w] = dims;
    let [kd, kh, kw] = cfg.kernel;
    let [sd, sh, sw] = cfg.stride;
    let [pd, ph, pw] = cfg.padding;
    let n_out = od[0] * od[1] * od[2];
    let mut row = 0;
    for c in 0..cfg.in_ch {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            let (z_lo, z_hi) = valid_range(od[0], d, sd, kz, pd);
            for ky in 0..kh {
                let (y_lo, y_hi) = valid_range(od[1], h, sh, ky, ph);
                for kx in 0..kw {
                    let (x_lo, x_hi) = valid_range(od[2], w, sw, kx, pw);
                    let dst = &mut col[row * n_out..(row + 1) * n_out];
                    dst.fill(T::zero());
                    for oz in z_lo..z_hi {
                        let iz = oz * sd + kz - pd;
                        for oy in y_lo..y_hi {
                            let iy = oy * sh + ky - ph;
                            let src = (iz * h + iy) * w;
                            let o = (oz * od[1] + oy) * od[2];
                            if sw == 1 {
                                let ix0 = x_lo + kx - pw;
                                dst[o + x_lo..o + x_hi].copy_from_slice(&xc[src + ix0..src + ix0 + (x_hi - x_lo)]);
                            } else {
                                for ox in x_lo..x_hi {
                                    dst[o + ox] = xc[src + ox * sw + kx - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], dims: [usize; 3], cfg: &ConvConfig, od: [usize; 3], gx: &mut [T]) {
    let [d, h, w] = dims;
    let [kd, kh, kw] = cfg.kernel;
    let [sd, sh, sw] = cfg.stride;
    let [pd, ph, pw] = cfg.padding;
    let n_out = od[0] * od[1] * od[2];
    let mut row = 0;
    for c in 0..cfg.in_ch {
        let gc = &mut gx[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            let (z_lo, z_hi) = valid_range(od[0], d, sd, kz, pd);
            for ky in 0..kh {
                let (y_lo, y_hi) = valid_range(od[1], h, sh, ky, ph);
                for kx in 0..kw {
                    let (x_lo, x_hi) = valid_range(od[2], w, sw, kx, pw);
                    let src = &col[row * n_out..(row + 1) * n_out];
                    for oz in z_lo..z_hi {
                        let iz = oz * sd + kz - pd;
                        for oy in y_lo..y_hi {
                            let iy = oy * sh + ky - ph;
                            let base = (iz * h + iy) * w;
                            let o = (oz * od[1] + oy) * od[2];
                            for ox in x_lo..x_hi {
                                gc[base + ox * sw + kx - pw] += src[o + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn check_conv_input<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, cfg: &ConvConfig) -> Result<([usize; 5], [usize; 3])> {
    cfg.validate()?;
    let dims = x.dims5()?;
    if dims[1] != cfg.in_ch {
        return Err(Error::shape("input channels", cfg.in_ch, dims[1]));
    }
    let expect = [cfg.out_ch, cfg.in_ch, cfg.kernel[0], cfg.kernel[1], cfg.kernel[2]];
    if w.shape() != expect {
        return Err(Error::shape("weight shape", format!("{expect:?}"), format!("{:?}", w.shape())));
    }
    let od = cfg.out_dims([dims[2], dims[3], dims[4]])?;
    Ok((dims, od))
}

/// Direct cross-correlation. Weight layout `[out, in, kz, ky, kx]`.
pub fn conv3d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, cfg: &ConvConfig) -> Result<Tensor<T>> {
    let (dims, od) = check_conv_input(x, w, cfg)?;
    let [n, _, d, h, wd] = dims;
    let n_out = od[0] * od[1] * od[2];
    let k = cfg.patch();
    let mut out = Tensor::zeros(&[n, cfg.out_ch, od[0], od[1], od[2]]);
    let mut col = if cfg.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n_out] };
    for bi in 0..n {
        let xb = x.batch_item(bi);
        let src: &[T] = if cfg.is_pointwise() {
            xb
        } else {
            im2col(xb, [d, h, wd], cfg, od, &mut col);
            &col
        };
        let ob = out.batch_item_mut(bi);
        T::gemm(cfg.out_ch, k, n_out, T::one(), w.data(), k, 1, src, n_out, 1, T::zero(), ob, n_out, 1);
        if let Some(b) = b {
            for (co, chunk) in ob.chunks_mut(n_out).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv3d_forward`]: `(grad_input, grad_weight, grad_bias)`.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    cfg: &ConvConfig,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (dims, od) = check_conv_input(x, w, cfg)?;
    let [n, _, d, h, wd] = dims;
    let expect = [n, cfg.out_ch, od[0], od[1], od[2]];
    if gy.shape() != expect {
        return Err(Error::shape("grad_output", format!("{expect:?}"), format!("{:?}", gy.shape())));
    }
    let n_out = od[0] * od[1] * od[2];
    let k = cfg.patch();
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[cfg.out_ch]);
    let pointwise = cfg.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * n_out] };
    let mut gcol = if pointwise { Vec::new() } else { vec![T::zero(); k * n_out] };
    for bi in 0..n {
        let xb = x.batch_item(bi);
        let gyb = gy.batch_item(bi);
        for (co, chunk) in gyb.chunks(n_out).enumerate() {
            let mut s = T::zero();
            chunk.iter().for_each(|&v| s += v);
            gb.data_mut()[co] += s;
        }
        let src: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, [d, h, wd], cfg, od, &mut col);
            &col
        };
        // gW += gy · colᵀ
        T::gemm(cfg.out_ch, n_out, k, T::one(), gyb, n_out, 1, src, 1, n_out, T::one(), gw.data_mut(), k, 1);
        // gcol = Wᵀ · gy
        if pointwise {
            let gxb = gx.batch_item_mut(bi);
            T::gemm(k, cfg.out_ch, n_out, T::one(), w.data(), 1, k, gyb, n_out, 1, T::zero(), gxb, n_out, 1);
        } else {
            T::gemm(k, cfg.out_ch, n_out, T::one(), w.data(), 1, k, gyb, n_out, 1, T::zero(), &mut gcol, n_out, 1);
            col2im(&gcol, [d, h, wd], cfg, od, gx.batch_item_mut(bi));
        }
    }
    Ok((gx, gw, gb))
}

/// Convolution layer owning its weights and the cached input.
#[derive(Debug, Clone)]
pub struct Conv3d<T: Scalar = f32> {
    pub cfg: ConvConfig,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv3d<T> {
    /// He-normal initialization (std = sqrt(2 / fan_in)), zero bias.
    pub fn new(name: &str, cfg: ConvConfig, rng: &mut DetRng) -> Self {
        let fan_in = cfg.patch() as f64;
        let shape = [cfg.out_ch, cfg.in_ch, cfg.kernel[0], cfg.kernel[1], cfg.kernel[2]];
        Conv3d {
            cfg,
            weight: Param::new(format!("{name}.weight"), Tensor::randn(&shape, (2.0 / fan_in).sqrt(), rng)),
            bias: cfg
                .bias
                .then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[cfg.out_ch]))),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = conv3d_forward(x, &self.weight.value, self.bias.as_ref().map(|b| &b.value), &self.cfg)?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::invalid("backward", "conv3d has no cached forward"))?;
        let (gx, gw, gb) = conv3d_backward(&x, &self.weight.value, &self.cfg, gy)?;
        self.weight.grad.add_assign(&gw)?;
        if let Some(b) = &mut self.bias {
            b.grad.add_assign(&gb)?;
        }
        Ok(gx)
    }
}

impl<T: Scalar> HasParams<T> for Conv3d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

fn check_deconv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<([usize; 5], usize)> {
    let dims = x.dims5()?;
    let ws = w.shape();
    if ws.len() != 5 || ws[2..] != [2, 2, 2] {
        return Err(Error::shape("deconv weight", "[in, out, 2, 2, 2]", format!("{ws:?}")));
    }
    if ws[0] != dims[1] {
        return Err(Error::shape("input channels", ws[0], dims[1]));
    }
    Ok((dims, ws[1]))
}

/// Transposed convolution with a 2³ kernel and stride 2 (exact ×2
/// upsampling). Weight layout `[in, out, 2, 2, 2]`.
pub fn deconv3d_x2_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (dims, cout) = check_deconv(x, w)?;
    let [n, cin, d, h, wd] = dims;
    let n_in = d * h * wd;
    let r = cout * 8;
    let mut out = Tensor::zeros(&[n, cout, 2 * d, 2 * h, 2 * wd]);
    let mut tmp = vec![T::zero(); r * n_in];
    let (oh, ow) = (2 * h, 2 * wd);
    let plane = 8 * n_in;
    for bi in 0..n {
        // tmp (cout·8 × n_in) = Wᵀ · x
        T::gemm(r, cin, n_in, T::one(), w.data(), 1, r, x.batch_item(bi), n_in, 1, T::zero(), &mut tmp, n_in, 1);
        let ob = out.batch_item_mut(bi);
        for co in 0..cout {
            let bias = b.map(|b| b.data()[co]).unwrap_or_else(T::zero);
            let oc = &mut ob[co * plane..(co + 1) * plane];
            for off in 0..8 {
                let (a, bb, c) = (off >> 2, (off >> 1) & 1, off & 1);
                let src = &tmp[(co * 8 + off) * n_in..(co * 8 + off + 1) * n_in];
                for z in 0..d {
                    for y in 0..h {
                        let base = ((2 * z + a) * oh + 2 * y + bb) * ow + c;
                        let s = (z * h + y) * wd;
                        for xx in 0..wd {
                            oc[base + 2 * xx] = src[s + xx] + bias;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn deconv3d_x2_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (dims, cout) = check_deconv(x, w)?;
    let [n, cin, d, h, wd] = dims;
    let expect = [n, cout, 2 * d, 2 * h, 2 * wd];
    if gy.shape() != expect {
        return Err(Error::shape("grad_output", format!("{expect:?}"), format!("{:?}", gy.shape())));
    }
    let n_in = d * h * wd;
    let r = cout * 8;
    let (oh, ow) = (2 * h, 2 * wd);
    let plane = 8 * n_in;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let mut tmp = vec![T::zero(); r * n_in];
    for bi in 0..n {
        let gyb = gy.batch_item(bi);
        for co in 0..cout {
            let gc = &gyb[co * plane..(co + 1) * plane];
            let mut s = T::zero();
            gc.iter().for_each(|&v| s += v);
            gb.data_mut()[co] += s;
            for off in 0..8 {
                let (a, bb, c) = (off >> 2, (off >> 1) & 1, off & 1);
                let dst = &mut tmp[(co * 8 + off) * n_in..(co * 8 + off + 1) * n_in];
                for z in 0..d {
                    for y in 0..h {
                        let base = ((2 * z + a) * oh + 2 * y + bb) * ow + c;
                        let s = (z * h + y) * wd;
                        for xx in 0..wd {
                            dst[s + xx] = gc[base + 2 * xx];
                        }
                    }
                }
            }
        }
        let xb = x.batch_item(bi);
        // gx = W · tmp ; gW += x · tmpᵀ
        T::gemm(cin, r, n_in, T::one(), w.data(), r, 1, &tmp, n_in, 1, T::zero(), gx.batch_item_mut(bi), n_in, 1);
        T::gemm(cin, n_in, r, T::one(), xb, n_in, 1, &tmp, 1, n_in, T::one(), gw.data_mut(), r, 1);
    }
    Ok((gx, gw, gb))
}

#[derive(Debug, Clone)]
pub struct Deconv3dX2<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Deconv3dX2<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, bias: bool, rng: &mut DetRng) -> Self {
        // Each output voxel receives exactly in_ch contributions.
        let std = (2.0 / in_ch as f64).sqrt();
        Deconv3dX2 {
            weight: Param::new(format!("{name}.weight"), Tensor::randn(&[in_ch, out_ch, 2, 2, 2], std, rng)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[out_ch]))),
            input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = deconv3d_x2_forward(x, &self.weight.value, self.bias.as_ref().map(|b| &b.value))?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::invalid("backward", "deconv has no cached forward"))?;
        let (gx, gw, gb) = deconv3d_x2_backward(&x, &self.weight.value, gy)?;
        self.weight.grad.add_assign(&gw)?;
        if let Some(b) = &mut self.bias {
            b.grad.add_assign(&gb)?;
        }
        Ok(gx)
    }
}

impl<T: Scalar> HasParams<T> for Deconv3dX2<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// Naive 7-loop reference convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, cfg: &ConvConfig) -> Tensor<f64> {
        let [n, cin, d, h, wd] = x.dims5().unwrap();
        let od = cfg.out_dims([d, h, wd]).unwrap();
        let mut out = Tensor::zeros(&[n, cfg.out_ch, od[0], od[1], od[2]]);
        for b in 0..n {
            for co in 0..cfg.out_ch {
                for oz in 0..od[0] {
                    for oy in 0..od[1] {
                        for ox in 0..od[2] {
                            let mut s = 0.0;
                            for ci in 0..cin {
                                for kz in 0..cfg.kernel[0] {
                                    for ky in 0..cfg.kernel[1] {
                                        for kx in 0..cfg.kernel[2] {
                                            let iz = (oz * cfg.stride[0] + kz) as isize - cfg.padding[0] as isize;
                                            let iy = (oy * cfg.stride[1] + ky) as isize - cfg.padding[1] as isize;
                                            let ix = (ox * cfg.stride[2] + kx) as isize - cfg.padding[2] as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((b * cin + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                            let wi = (((co * cin + ci) * cfg.kernel[0] + kz) * cfg.kernel[1] + ky) * cfg.kernel[2] + kx;
                                            s += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            let oi = (((b * cfg.out_ch + co) * od[0] + oz) * od[1] + oy) * od[2] + ox;
                            out.data_mut()[oi] = s;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_for_assorted_configs() {
        let mut rng = seeded(3);
        let cases = [
            ([2, 3, 5, 4, 6], ConvConfig::same(3, 2, 3)),
            (
                [1, 2, 6, 6, 6],
                ConvConfig { in_ch: 2, out_ch: 3, kernel: [2, 3, 2], stride: [2, 1, 2], padding: [0, 1, 1], bias: false },
            ),
            ([1, 4, 3, 3, 3], ConvConfig::same(4, 5, 1)),
        ];
        for (shape, cfg) in cases {
            let x = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[cfg.out_ch, cfg.in_ch, cfg.kernel[0], cfg.kernel[1], cfg.kernel[2]], 1.0, &mut rng);
            let got = conv3d_forward(&x, &w, None, &cfg).unwrap();
            let want = naive_conv(&x, &w, &cfg);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = seeded(1);
        let x = Tensor::<f32>::randn(&[1, 1, 3, 4, 5], 1.0, &mut rng);
        let cfg = ConvConfig::same(1, 1, 1);
        let w = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv3d_forward(&x, &w, Some(&b), &cfg).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_zero_output_and_grad() {
        let mut rng = seeded(2);
        let cfg = ConvConfig::same(2, 3, 3);
        let x = Tensor::<f64>::randn(&[1, 2, 4, 4, 4], 1.0, &mut rng);
        let w = Tensor::zeros(&[3, 2, 3, 3, 3]);
        let y = conv3d_forward(&x, &w, None, &cfg).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let gy = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
        let (gx, _, _) = conv3d_backward(&x, &w, &cfg, &gy).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3, 3]);
        let err = conv3d_forward(&x, &w, None, &ConvConfig::same(3, 1, 3)).unwrap_err();
        assert!(err.to_string().contains("input channels"));
    }

    #[test]
    fn deconv_impulse_response() {
        let mut x = Tensor::<f32>::zeros(&[1, 1, 1, 1, 1]);
        x.data_mut()[0] = 2.5;
        let w = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let y = deconv3d_x2_forward(&x, &w, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn deconv_doubles_spatial_dims() {
        let mut rng = seeded(4);
        let x = Tensor::<f32>::randn(&[2, 3, 2, 3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 5, 2, 2, 2], 1.0, &mut rng);
        let y = deconv3d_x2_forward(&x, &w, None).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4, 6, 8]);
    }
}
