//! Encoder/decoder backbone producing 32-channel maps at strides 4, 8, 16.

use super::blocks::{ConvBnRelu, DenseBlock, Transition, UpBlock};
use crate::error::{Error, Result};
use crate::nn::{HasParams, Mode, Param, Pool3d, PoolMode, Scalar, Tensor};
use crate::rng::DetRng;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Training crop side; inference accepts any side divisible by 16.
    pub crop: usize,
    pub pre_channels: usize,
    pub growth: usize,
    /// Width of the 1³ bottleneck inside dense layers.
    pub bottleneck: usize,
    pub encode_layers: [usize; 3],
    pub decode_layers: [usize; 2],
    pub pyramid_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            crop: 32,
            pre_channels: 8,
            growth: 16,
            bottleneck: 32,
            encode_layers: [1, 1, 1],
            decode_layers: [1, 1],
            pyramid_channels: 32,
        }
    }
}

impl BackboneConfig {
    /// Full-size layout: 128³ crops, 24 input channels, two dense layers per
    /// stage and a 4·growth bottleneck.
    pub fn paper_scale() -> Self {
        BackboneConfig {
            crop: 128,
            pre_channels: 24,
            growth: 16,
            bottleneck: 64,
            encode_layers: [2, 2, 2],
            decode_layers: [2, 2],
            pyramid_channels: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop % 16 != 0 {
            return Err(Error::invalid("crop", format!("must be a positive multiple of 16, got {}", self.crop)));
        }
        if self.pre_channels == 0 || self.growth == 0 || self.bottleneck == 0 || self.pyramid_channels == 0 {
            return Err(Error::invalid("backbone widths", "must be >= 1"));
        }
        Ok(())
    }
}

pub const STRIDES: [usize; 3] = [4, 8, 16];

/// Maps at strides 4, 8 and 16, in that order.
pub type FeaturePyramid<T> = Vec<Tensor<T>>;

#[derive(Debug, Clone)]
pub struct Backbone<T: Scalar> {
    pub cfg: BackboneConfig,
    pre1: ConvBnRelu<T>,
    pre2: ConvBnRelu<T>,
    pre_pool: Pool3d,
    enc: [DenseBlock<T>; 3],
    trans: [Transition<T>; 3],
    up3: UpBlock<T>,
    dec2: DenseBlock<T>,
    dtrans2: Transition<T>,
    up2: UpBlock<T>,
    dec1: DenseBlock<T>,
    dtrans1: Transition<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(cfg: BackboneConfig, rng: &mut DetRng) -> Result<Self> {
        cfg.validate()?;
        let (g, b, pc) = (cfg.growth, cfg.bottleneck, cfg.pyramid_channels);
        let pre1 = ConvBnRelu::new("pre.0", 1, cfg.pre_channels, rng);
        let pre2 = ConvBnRelu::new("pre.1", cfg.pre_channels, cfg.pre_channels, rng);
        let enc1 = DenseBlock::new("enc1", cfg.pre_channels, cfg.encode_layers[0], b, g, rng);
        let trans1 = Transition::new("trans1", enc1.out_channels, pc, true, rng);
        let enc2 = DenseBlock::new("enc2", pc, cfg.encode_layers[1], b, g, rng);
        let trans2 = Transition::new("trans2", enc2.out_channels, pc, true, rng);
        let enc3 = DenseBlock::new("enc3", pc, cfg.encode_layers[2], b, g, rng);
        let trans3 = Transition::new("trans3", enc3.out_channels, pc, true, rng);
        let up3 = UpBlock::new("up3", pc, enc3.out_channels, pc, rng);
        let dec2 = DenseBlock::new("dec2", pc, cfg.decode_layers[1], b, g, rng);
        let dtrans2 = Transition::new("dtrans2", dec2.out_channels, pc, false, rng);
        let up2 = UpBlock::new("up2", pc, enc2.out_channels, pc, rng);
        let dec1 = DenseBlock::new("dec1", pc, cfg.decode_layers[0], b, g, rng);
        let dtrans1 = Transition::new("dtrans1", dec1.out_channels, pc, false, rng);
        Ok(Backbone {
            cfg,
            pre1,
            pre2,
            pre_pool: Pool3d::new(PoolMode::Max),
            enc: [enc1, enc2, enc3],
            trans: [trans1, trans2, trans3],
            up3,
            dec2,
            dtrans2,
            up2,
            dec1,
            dtrans1,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<FeaturePyramid<T>> {
        let [_, c, d, h, w] = x.dims5()?;
        if c != 1 {
            return Err(Error::shape("backbone input channels", 1, c));
        }
        for (axis, n) in [("z", d), ("y", h), ("x", w)] {
            if n == 0 || n % 16 != 0 {
                return Err(Error::shape(format!("backbone input {axis} axis"), "multiple of 16", n));
            }
        }
        let h0 = self.pre1.forward(x, mode)?;
        let h0 = self.pre2.forward(&h0, mode)?;
        let e0 = self.pre_pool.forward(&h0, mode)?;
        let e1 = self.enc[0].forward(&e0, mode)?;
        let t1 = self.trans[0].forward(&e1, mode)?;
        let e2 = self.enc[1].forward(&t1, mode)?;
        let t2 = self.trans[1].forward(&e2, mode)?;
        let e3 = self.enc[2].forward(&t2, mode)?;
        let p16 = self.trans[2].forward(&e3, mode)?;
        let u8 = self.up3.forward(&p16, &e3, mode)?;
        let d8 = self.dec2.forward(&u8, mode)?;
        let p8 = self.dtrans2.forward(&d8, mode)?;
        let u4 = self.up2.forward(&p8, &e2, mode)?;
        let d4 = self.dec1.forward(&u4, mode)?;
        let p4 = self.dtrans1.forward(&d4, mode)?;
        Ok(vec![p4, p8, p16])
    }

    /// Backpropagates gradients arriving at each pyramid level (all three
    /// must be present, zeros where unused). Input gradient is discarded.
    pub fn backward(&mut self, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != 3 {
            return Err(Error::shape("pyramid gradients", 3, grads.len()));
        }
        let g_d4 = self.dtrans1.backward(&grads[0])?;
        let g_u4 = self.dec1.backward(&g_d4)?;
        let (mut g_p8, g_e2_skip) = self.up2.backward(&g_u4)?;
        g_p8.add_assign(&grads[1])?;
        let g_d8 = self.dtrans2.backward(&g_p8)?;
        let g_u8 = self.dec2.backward(&g_d8)?;
        let (mut g_p16, g_e3_skip) = self.up3.backward(&g_u8)?;
        g_p16.add_assign(&grads[2])?;
        let mut g_e3 = self.trans[2].backward(&g_p16)?;
        g_e3.add_assign(&g_e3_skip)?;
        let g_t2 = self.enc[2].backward(&g_e3)?;
        let mut g_e2 = self.trans[1].backward(&g_t2)?;
        g_e2.add_assign(&g_e2_skip)?;
        let g_t1 = self.enc[1].backward(&g_e2)?;
        let g_e1 = self.trans[0].backward(&g_t1)?;
        let g_e0 = self.enc[0].backward(&g_e1)?;
        let g_h0 = self.pre_pool.backward(&g_e0)?;
        let g_h0 = self.pre2.backward(&g_h0)?;
        self.pre1.backward(&g_h0)?;
        Ok(())
    }
}

impl<T: Scalar> HasParams<T> for Backbone<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.pre1.visit_params(f);
        self.pre2.visit_params(f);
        for (e, t) in self.enc.iter_mut().zip(self.trans.iter_mut()) {
            e.visit_params(f);
            t.visit_params(f);
        }
        self.up3.visit_params(f);
        self.dec2.visit_params(f);
        self.dtrans2.visit_params(f);
        self.up2.visit_params(f);
        self.dec1.visit_params(f);
        self.dtrans1.visit_params(f);
    }
}
