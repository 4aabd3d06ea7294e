//! Elementwise activation, fully connected layer, and channel concatenation.

use super::tensor::{HasParams, Mode, Param, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::DetRng;

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != gy.shape() {
        return Err(Error::shape("relu grad_output", format!("{:?}", x.shape()), format!("{:?}", gy.shape())));
    }
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// ReLU layer. Caches its output, which carries the same sign pattern as the
/// input for positive values.
#[derive(Debug, Clone, Default)]
pub struct Relu<T: Scalar = f32> {
    out: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Relu { out: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = relu_forward(x);
        self.out = (mode == Mode::Train).then(|| y.clone());
        y
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self
            .out
            .take()
            .ok_or_else(|| Error::invalid("backward", "relu has no cached forward"))?;
        relu_backward(&y, gy)
    }
}

/// `y = x · Wᵀ + b` for `x` of shape `[n, in]` and `W` of shape `[out, in]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, fin) = match x.shape() {
        &[n, f] => (n, f),
        s => return Err(Error::shape("linear input rank", "2 (n, features)", format!("{s:?}"))),
    };
    let (fout, win) = match w.shape() {
        &[o, i] => (o, i),
        s => return Err(Error::shape("linear weight rank", 2, format!("{s:?}"))),
    };
    if fin != win {
        return Err(Error::shape("linear input features", win, fin));
    }
    let mut y = Tensor::zeros(&[n, fout]);
    T::gemm(n, fin, fout, T::one(), x.data(), fin, 1, w.data(), 1, fin, T::zero(), y.data_mut(), fout, 1);
    if let Some(b) = b {
        for row in y.data_mut().chunks_mut(fout) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    if gy.shape() != [n, fout] {
        return Err(Error::shape("linear grad_output", format!("[{n}, {fout}]"), format!("{:?}", gy.shape())));
    }
    let mut gx = Tensor::zeros(&[n, fin]);
    let mut gw = Tensor::zeros(&[fout, fin]);
    let mut gb = Tensor::zeros(&[fout]);
    T::gemm(n, fout, fin, T::one(), gy.data(), fout, 1, w.data(), fin, 1, T::zero(), gx.data_mut(), fin, 1);
    T::gemm(fout, n, fin, T::one(), gy.data(), 1, fout, x.data(), fin, 1, T::zero(), gw.data_mut(), fin, 1);
    for row in gy.data().chunks(fout) {
        for (g, &v) in gb.data_mut().iter_mut().zip(row) {
            *g += v;
        }
    }
    Ok((gx, gw, gb))
}

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// He-normal weights, zero bias.
    pub fn new(name: &str, fin: usize, fout: usize, rng: &mut DetRng) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), Tensor::randn(&[fout, fin], (2.0 / fin as f64).sqrt(), rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[fout])),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = linear_forward(x, &self.weight.value, Some(&self.bias.value))?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::invalid("backward", "linear has no cached forward"))?;
        let (gx, gw, gb) = linear_backward(&x, &self.weight.value, gy)?;
        self.weight.grad.add_assign(&gw)?;
        self.bias.grad.add_assign(&gb)?;
        Ok(gx)
    }
}

impl<T: Scalar> HasParams<T> for Linear<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Concatenates 5-D tensors along the channel axis in argument order.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("inputs", "need at least one tensor"))?
        .dims5()?;
    let mut total_c = 0;
    for t in inputs {
        let d = t.dims5()?;
        for (axis, name) in [(0, "batch"), (2, "z"), (3, "y"), (4, "x")] {
            if d[axis] != first[axis] {
                return Err(Error::shape(format!("concat {name} axis"), first[axis], d[axis]));
            }
        }
        total_c += d[1];
    }
    let [n, _, z, y, x] = first;
    let sp = z * y * x;
    let mut out = Vec::with_capacity(n * total_c * sp);
    for b in 0..n {
        for t in inputs {
            out.extend_from_slice(t.batch_item(b));
        }
    }
    Tensor::from_vec(&[n, total_c, z, y, x], out)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn split_channels<T: Scalar>(g: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let [n, c, z, y, x] = g.dims5()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::shape("split channels", c, channels.iter().sum::<usize>()));
    }
    let sp = z * y * x;
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&k| Vec::with_capacity(n * k * sp)).collect();
    for b in 0..n {
        let item = g.batch_item(b);
        let mut off = 0;
        for (part, &k) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&item[off * sp..(off + k) * sp]);
            off += k;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(data, &k)| Tensor::from_vec(&[n, k, z, y, x], data))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn relu_values() {
        let x = Tensor::<f64>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut w = Tensor::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 4] = 1.0;
        }
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap();
        assert_eq!(linear_forward(&x, &w, None).unwrap(), x);
        let b = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = linear_forward(&Tensor::zeros(&[1, 3]), &w, Some(&b)).unwrap();
        assert_eq!(y.data(), b.data());
    }

    #[test]
    fn concat_then_split_roundtrip() {
        let mut rng = seeded(8);
        let a = Tensor::<f32>::randn(&[2, 1, 2, 3, 2], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[2, 3, 2, 3, 2], 1.0, &mut rng);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 3, 2]);
        assert_eq!(&c.batch_item(1)[..12], a.batch_item(1));
        let parts = split_channels(&c, &[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 1, 2, 2, 2]);
        let b = Tensor::<f32>::zeros(&[1, 1, 2, 2, 4]);
        let err = concat_channels(&[&a, &b]).unwrap_err();
        assert!(err.to_string().contains("x axis"));
    }
}
