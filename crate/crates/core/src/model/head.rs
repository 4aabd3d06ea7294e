//! Per-level detection head: two dense layers, then a 1³ conv emitting one
//! logit and four regression values per anchor diameter.

use super::blocks::{BnReluConv, DenseBlock};
use crate::error::{Error, Result};
use crate::nn::{HasParams, Mode, Param, Scalar, Tensor};
use crate::rng::DetRng;

/// Initial objectness probability encoded in the logit bias.
pub const PRIOR_PROB: f64 = 0.01;

/// Head outputs flattened to anchor order: index
/// `((b·nz + z)·ny + y)·nx + x)·A + a` for batch item `b` and diameter `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub logits: Vec<f64>,
    pub regs: Vec<[f64; 4]>,
    pub dims: [usize; 3],
    pub batch: usize,
    pub n_diam: usize,
}

impl HeadOutput {
    pub fn per_item(&self) -> usize {
        self.dims.iter().product::<usize>() * self.n_diam
    }
}

#[derive(Debug, Clone)]
pub struct RpnHead<T: Scalar> {
    pub dense: DenseBlock<T>,
    pub out: BnReluConv<T>,
    n_diam: usize,
    out_shape: Option<Vec<usize>>,
}

impl<T: Scalar> RpnHead<T> {
    pub fn new(name: &str, in_ch: usize, growth: usize, bottleneck: usize, n_diam: usize, rng: &mut DetRng) -> Self {
        let dense = DenseBlock::new(&format!("{name}.dense"), in_ch, 2, bottleneck, growth, rng);
        let mut out = BnReluConv::new(&format!("{name}.out"), dense.out_channels, n_diam * 5, 1, rng);
        // Small weights and a rare-object prior keep early losses bounded.
        out.conv.weight.value = out.conv.weight.value.map(|v| v * T::of(0.1));
        let prior = T::of(-((1.0 - PRIOR_PROB) / PRIOR_PROB).ln());
        if let Some(b) = &mut out.conv.bias {
            for a in 0..n_diam {
                b.value.data_mut()[a * 5] = prior;
            }
        }
        RpnHead {
            dense,
            out,
            n_diam,
            out_shape: None,
        }
    }

    pub fn n_diam(&self) -> usize {
        self.n_diam
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<HeadOutput> {
        let h = self.dense.forward(x, mode)?;
        let y = self.out.forward(&h, mode)?;
        let [n, c, d, hh, w] = y.dims5()?;
        let sp = d * hh * w;
        let a_n = self.n_diam;
        let mut logits = vec![0.0; n * sp * a_n];
        let mut regs = vec![[0.0; 4]; n * sp * a_n];
        for b in 0..n {
            let item = y.batch_item(b);
            for a in 0..a_n {
                for v in 0..sp {
                    let idx = (b * sp + v) * a_n + a;
                    logits[idx] = item[(a * 5) * sp + v].f64();
                    for k in 0..4 {
                        regs[idx][k] = item[(a * 5 + 1 + k) * sp + v].f64();
                    }
                }
            }
        }
        debug_assert_eq!(c, a_n * 5);
        self.out_shape = (mode == Mode::Train).then(|| y.shape().to_vec());
        Ok(HeadOutput {
            logits,
            regs,
            dims: [d, hh, w],
            batch: n,
            n_diam: a_n,
        })
    }

    /// Takes gradients in anchor order and returns the input gradient.
    pub fn backward(&mut self, grad_logits: &[f64], grad_regs: &[[f64; 4]]) -> Result<Tensor<T>> {
        let shape = self
            .out_shape
            .take()
            .ok_or_else(|| Error::invalid("backward", "head has no cached forward"))?;
        let (n, sp) = (shape[0], shape[2] * shape[3] * shape[4]);
        let a_n = self.n_diam;
        if grad_logits.len() != n * sp * a_n || grad_regs.len() != n * sp * a_n {
            return Err(Error::shape("head gradient length", n * sp * a_n, grad_logits.len()));
        }
        let mut g = Tensor::zeros(&shape);
        for b in 0..n {
            let item = g.batch_item_mut(b);
            for a in 0..a_n {
                for v in 0..sp {
                    let idx = (b * sp + v) * a_n + a;
                    item[(a * 5) * sp + v] = T::of(grad_logits[idx]);
                    for k in 0..4 {
                        item[(a * 5 + 1 + k) * sp + v] = T::of(grad_regs[idx][k]);
                    }
                }
            }
        }
        let g = self.out.backward(&g)?;
        self.dense.backward(&g)
    }
}

impl<T: Scalar> HasParams<T> for RpnHead<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.dense.visit_params(f);
        self.out.visit_params(f);
    }
}
