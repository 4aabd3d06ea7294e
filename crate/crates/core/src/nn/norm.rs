//! Per-channel batch normalization over (batch, z, y, x).

use super::tensor::{HasParams, Mode, Param, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConfig {
    pub eps: f64,
    /// Weight of the new batch statistic in the running average.
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig { eps: 1e-5, momentum: 0.1 }
    }
}

#[derive(Debug, Clone)]
struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm3d<T: Scalar = f32> {
    pub cfg: NormConfig,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<NormCache<T>>,
}

impl<T: Scalar> BatchNorm3d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm3d {
            cfg: NormConfig::default(),
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [n, c, z, y, w] = x.dims5()?;
        if c != self.channels() {
            return Err(Error::shape("batchnorm channels", self.channels(), c));
        }
        let sp = z * y * w;
        let count = n * sp;
        let mut out = Tensor::zeros(x.shape());
        let mut xhat = match mode {
            Mode::Train => Tensor::zeros(x.shape()),
            Mode::Eval => Tensor::zeros(&[0]),
        };
        let mut inv_stds = vec![0.0; c];
        for ch in 0..c {
            let (mean, inv_std) = match mode {
                Mode::Train => {
                    let mut s = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * sp;
                        s += x.data()[off..off + sp].iter().map(|v| v.f64()).sum::<f64>();
                    }
                    let mean = s / count as f64;
                    let mut v = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * sp;
                        v += x.data()[off..off + sp].iter().map(|&t| (t.f64() - mean).powi(2)).sum::<f64>();
                    }
                    let var = v / count as f64;
                    let m = self.cfg.momentum;
                    let unbiased = if count > 1 { var * count as f64 / (count - 1) as f64 } else { var };
                    let rm = &mut self.running_mean.value.data_mut()[ch];
                    *rm = T::of((1.0 - m) * rm.f64() + m * mean);
                    let rv = &mut self.running_var.value.data_mut()[ch];
                    *rv = T::of((1.0 - m) * rv.f64() + m * unbiased);
                    (mean, 1.0 / (var + self.cfg.eps).sqrt())
                }
                Mode::Eval => {
                    let mean = self.running_mean.value.data()[ch].f64();
                    let var = self.running_var.value.data()[ch].f64();
                    (mean, 1.0 / (var + self.cfg.eps).sqrt())
                }
            };
            inv_stds[ch] = inv_std;
            let g = self.gamma.value.data()[ch];
            let bt = self.beta.value.data()[ch];
            let (mean_t, inv_t) = (T::of(mean), T::of(inv_std));
            for b in 0..n {
                let off = (b * c + ch) * sp;
                for i in off..off + sp {
                    let h = (x.data()[i] - mean_t) * inv_t;
                    if mode == Mode::Train {
                        xhat.data_mut()[i] = h;
                    }
                    out.data_mut()[i] = g * h + bt;
                }
            }
        }
        self.cache = (mode == Mode::Train).then_some(NormCache { xhat, inv_std: inv_stds });
        Ok(out)
    }

    /// Full batch-statistics gradient:
    /// `dx = γ·inv_std/m · (m·dy − Σdy − x̂·Σ(dy·x̂))`.
    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("backward", "batchnorm has no cached forward"))?;
        if gy.shape() != cache.xhat.shape() {
            return Err(Error::shape(
                "batchnorm grad_output",
                format!("{:?}", cache.xhat.shape()),
                format!("{:?}", gy.shape()),
            ));
        }
        let [n, c, z, y, w] = gy.dims5()?;
        let sp = z * y * w;
        let m = (n * sp) as f64;
        let mut gx = Tensor::zeros(gy.shape());
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for b in 0..n {
                let off = (b * c + ch) * sp;
                for i in off..off + sp {
                    let d = gy.data()[i].f64();
                    sum_dy += d;
                    sum_dy_xhat += d * cache.xhat.data()[i].f64();
                }
            }
            self.gamma.grad.data_mut()[ch] += T::of(sum_dy_xhat);
            self.beta.grad.data_mut()[ch] += T::of(sum_dy);
            let k = self.gamma.value.data()[ch].f64() * cache.inv_std[ch] / m;
            for b in 0..n {
                let off = (b * c + ch) * sp;
                for i in off..off + sp {
                    let v = m * gy.data()[i].f64() - sum_dy - cache.xhat.data()[i].f64() * sum_dy_xhat;
                    gx.data_mut()[i] = T::of(k * v);
                }
            }
        }
        Ok(gx)
    }
}

impl<T: Scalar> HasParams<T> for BatchNorm3d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn train_output_is_standardized() {
        let mut rng = seeded(5);
        let x = Tensor::<f64>::randn(&[3, 2, 3, 4, 2], 3.0, &mut rng).map(|v| v + 7.0);
        let mut bn = BatchNorm3d::new("bn", 2);
        let y = bn.forward(&x, Mode::Train).unwrap();
        let sp = 24;
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| y.data()[(b * 2 + ch) * sp..(b * 2 + ch + 1) * sp].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut bn = BatchNorm3d::<f64>::new("bn", 1);
        bn.running_mean.value.data_mut()[0] = 2.0;
        bn.running_var.value.data_mut()[0] = 4.0 - 1e-5;
        let x = Tensor::full(&[1, 1, 1, 1, 2], 6.0);
        let y = bn.forward(&x, Mode::Eval).unwrap();
        assert!(y.data().iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn running_stats_move_by_momentum() {
        let mut bn = BatchNorm3d::<f64>::new("bn", 1);
        let x = Tensor::from_vec(&[1, 1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        assert!((bn.running_mean.value.data()[0] - 0.2).abs() < 1e-12);
        // unbiased variance of {1, 3} is 2
        assert!((bn.running_var.value.data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut bn = BatchNorm3d::<f32>::new("bn", 3);
        assert!(bn.forward(&Tensor::zeros(&[1, 2, 2, 2, 2]), Mode::Train).is_err());
    }
}
