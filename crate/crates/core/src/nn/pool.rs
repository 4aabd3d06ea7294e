//! 2³ stride-2 pooling.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

fn half_dims(dims: [usize; 5]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        let n = dims[2 + a];
        if n == 0 || n % 2 != 0 {
            return Err(Error::shape(format!("spatial axis {a}"), "even", n));
        }
        out[a] = n / 2;
    }
    Ok(out)
}

/// Offsets of the 8 window cells in scan order (z, then y, then x).
fn window(h: usize, w: usize) -> [usize; 8] {
    let mut o = [0; 8];
    for (k, v) in o.iter_mut().enumerate() {
        *v = ((k >> 2) * h + ((k >> 1) & 1)) * w + (k & 1);
    }
    o
}

/// Forward pass. For max pooling the second value holds, per output cell,
/// the flat input index of the first maximal element in scan order.
pub fn pool3d_forward<T: Scalar>(x: &Tensor<T>, mode: PoolMode) -> Result<(Tensor<T>, Vec<usize>)> {
    let dims = x.dims5()?;
    let [n, c, _, h, w] = dims;
    let od = half_dims(dims)?;
    let mut out = Tensor::zeros(&[n, c, od[0], od[1], od[2]]);
    let mut arg = if mode == PoolMode::Max { vec![0; out.len()] } else { Vec::new() };
    let win = window(h, w);
    let eighth = T::of(0.125);
    let src = x.data();
    let mut oi = 0;
    for plane in 0..n * c {
        let base = plane * dims[2] * h * w;
        for z in 0..od[0] {
            for y in 0..od[1] {
                for xx in 0..od[2] {
                    let corner = base + ((2 * z) * h + 2 * y) * w + 2 * xx;
                    match mode {
                        PoolMode::Max => {
                            let mut best = corner;
                            for &o in &win[1..] {
                                if src[corner + o] > src[best] {
                                    best = corner + o;
                                }
                            }
                            out.data_mut()[oi] = src[best];
                            arg[oi] = best;
                        }
                        PoolMode::Avg => {
                            let mut s = T::zero();
                            for &o in &win {
                                s += src[corner + o];
                            }
                            out.data_mut()[oi] = s * eighth;
                        }
                    }
                    oi += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn pool3d_backward<T: Scalar>(
    input_shape: &[usize],
    mode: PoolMode,
    argmax: &[usize],
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut gx = Tensor::zeros(input_shape);
    let dims = gx.dims5()?;
    let od = half_dims(dims)?;
    let expect = [dims[0], dims[1], od[0], od[1], od[2]];
    if gy.shape() != expect {
        return Err(Error::shape("pool grad_output", format!("{expect:?}"), format!("{:?}", gy.shape())));
    }
    match mode {
        PoolMode::Max => {
            if argmax.len() != gy.len() {
                return Err(Error::shape("argmax length", gy.len(), argmax.len()));
            }
            let g = gx.data_mut();
            for (&i, &v) in argmax.iter().zip(gy.data()) {
                g[i] += v;
            }
        }
        PoolMode::Avg => {
            let [_, _, _, h, w] = dims;
            let win = window(h, w);
            let eighth = T::of(0.125);
            let g = gx.data_mut();
            let mut oi = 0;
            for plane in 0..dims[0] * dims[1] {
                let base = plane * dims[2] * h * w;
                for z in 0..od[0] {
                    for y in 0..od[1] {
                        for xx in 0..od[2] {
                            let corner = base + ((2 * z) * h + 2 * y) * w + 2 * xx;
                            let v = gy.data()[oi] * eighth;
                            for &o in &win {
                                g[corner + o] += v;
                            }
                            oi += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Pooling layer caching what its backward pass needs.
#[derive(Debug, Clone)]
pub struct Pool3d {
    pub mode: PoolMode,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl Pool3d {
    pub fn new(mode: PoolMode) -> Self {
        Pool3d { mode, cache: None }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, mode: super::Mode) -> Result<Tensor<T>> {
        let (y, arg) = pool3d_forward(x, self.mode)?;
        self.cache = (mode == super::Mode::Train).then(|| (x.shape().to_vec(), arg));
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, arg) = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("backward", "pool has no cached forward"))?;
        pool3d_backward(&shape, self.mode, &arg, gy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_max_and_avg() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(pool3d_forward(&x, PoolMode::Max).unwrap().0.data(), &[7.0]);
        assert_eq!(pool3d_forward(&x, PoolMode::Avg).unwrap().0.data(), &[3.5]);
    }

    #[test]
    fn constant_input_constant_output() {
        let x = Tensor::<f32>::full(&[2, 3, 4, 2, 6], 1.25);
        for mode in [PoolMode::Max, PoolMode::Avg] {
            let (y, _) = pool3d_forward(&x, mode).unwrap();
            assert_eq!(y.shape(), &[2, 3, 2, 1, 3]);
            assert!(y.data().iter().all(|&v| v == 1.25));
        }
    }

    #[test]
    fn max_routes_to_first_argmax() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2, 2], vec![1.0, 5.0, 5.0, 0.0, 5.0, 0.0, 0.0, 0.0]).unwrap();
        let (_, arg) = pool3d_forward(&x, PoolMode::Max).unwrap();
        let gx = pool3d_backward(x.shape(), PoolMode::Max, &arg, &Tensor::full(&[1, 1, 1, 1, 1], 2.0)).unwrap();
        assert_eq!(gx.data(), &[0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn odd_dim_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 2, 2]);
        let err = pool3d_forward(&x, PoolMode::Avg).unwrap_err();
        assert!(err.to_string().contains("spatial axis 0"));
    }
}
