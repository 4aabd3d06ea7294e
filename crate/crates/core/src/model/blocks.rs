//! Composite layers shared by the backbone, the detection heads and the
//! magnification stack.

use crate::error::Result;
use crate::nn::{
    concat_channels, split_channels, BatchNorm3d, Conv3d, ConvConfig, Deconv3dX2, HasParams, Mode, Param, Pool3d, PoolMode, Relu,
    Scalar, Tensor,
};
use crate::rng::DetRng;

/// Pre-activation unit: normalization, ReLU, then convolution.
#[derive(Debug, Clone)]
pub struct BnReluConv<T: Scalar> {
    pub bn: BatchNorm3d<T>,
    relu: Relu<T>,
    pub conv: Conv3d<T>,
}

impl<T: Scalar> BnReluConv<T> {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, rng: &mut DetRng) -> Self {
        BnReluConv {
            bn: BatchNorm3d::new(&format!("{name}.bn"), cin),
            relu: Relu::new(),
            conv: Conv3d::new(&format!("{name}.conv"), ConvConfig::same(cin, cout, k), rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.bn.forward(x, mode)?;
        let h = self.relu.forward(&h, mode);
        self.conv.forward(&h, mode)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.conv.backward(g)?;
        let g = self.relu.backward(&g)?;
        self.bn.backward(&g)
    }
}

impl<T: Scalar> HasParams<T> for BnReluConv<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.bn.visit_params(f);
        self.conv.visit_params(f);
    }
}

/// Post-activation unit used at the input: convolution, normalization, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu<T: Scalar> {
    pub conv: Conv3d<T>,
    pub bn: BatchNorm3d<T>,
    relu: Relu<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut DetRng) -> Self {
        ConvBnRelu {
            conv: Conv3d::new(&format!("{name}.conv"), ConvConfig::same(cin, cout, 3).with_bias(false), rng),
            bn: BatchNorm3d::new(&format!("{name}.bn"), cout),
            relu: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.conv.forward(x, mode)?;
        let h = self.bn.forward(&h, mode)?;
        Ok(self.relu.forward(&h, mode))
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.relu.backward(g)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }
}

impl<T: Scalar> HasParams<T> for ConvBnRelu<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }
}

/// Dense layer: 1³ bottleneck then 3³ conv producing `growth` new channels,
/// concatenated after the input.
#[derive(Debug, Clone)]
pub struct DenseLayer<T: Scalar> {
    pub bottleneck: BnReluConv<T>,
    pub conv: BnReluConv<T>,
    cin: usize,
    growth: usize,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(name: &str, cin: usize, bottleneck: usize, growth: usize, rng: &mut DetRng) -> Self {
        DenseLayer {
            bottleneck: BnReluConv::new(&format!("{name}.b"), cin, bottleneck, 1, rng),
            conv: BnReluConv::new(&format!("{name}.c"), bottleneck, growth, 3, rng),
            cin,
            growth,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.bottleneck.forward(x, mode)?;
        let h = self.conv.forward(&h, mode)?;
        concat_channels(&[x, &h])
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mut parts = split_channels(g, &[self.cin, self.growth])?;
        let gh = self.conv.backward(&parts[1])?;
        let gx = self.bottleneck.backward(&gh)?;
        parts[0].add_assign(&gx)?;
        Ok(parts.swap_remove(0))
    }
}

impl<T: Scalar> HasParams<T> for DenseLayer<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.bottleneck.visit_params(f);
        self.conv.visit_params(f);
    }
}

#[derive(Debug, Clone)]
pub struct DenseBlock<T: Scalar> {
    pub layers: Vec<DenseLayer<T>>,
    pub out_channels: usize,
}

impl<T: Scalar> DenseBlock<T> {
    pub fn new(name: &str, cin: usize, n_layers: usize, bottleneck: usize, growth: usize, rng: &mut DetRng) -> Self {
        let layers = (0..n_layers)
            .map(|i| DenseLayer::new(&format!("{name}.{i}"), cin + i * growth, bottleneck, growth, rng))
            .collect();
        DenseBlock {
            layers,
            out_channels: cin + n_layers * growth,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = g.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }
}

impl<T: Scalar> HasParams<T> for DenseBlock<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in &mut self.layers {
            l.visit_params(f);
        }
    }
}

/// 1³ compression, optionally followed by 2³ average pooling.
#[derive(Debug, Clone)]
pub struct Transition<T: Scalar> {
    pub unit: BnReluConv<T>,
    pool: Option<Pool3d>,
}

impl<T: Scalar> Transition<T> {
    pub fn new(name: &str, cin: usize, cout: usize, downsample: bool, rng: &mut DetRng) -> Self {
        Transition {
            unit: BnReluConv::new(name, cin, cout, 1, rng),
            pool: downsample.then(|| Pool3d::new(PoolMode::Avg)),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.unit.forward(x, mode)?;
        match &mut self.pool {
            Some(p) => p.forward(&h, mode),
            None => Ok(h),
        }
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = match &mut self.pool {
            Some(p) => p.backward(g)?,
            None => g.clone(),
        };
        self.unit.backward(&g)
    }
}

impl<T: Scalar> HasParams<T> for Transition<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.unit.visit_params(f);
    }
}

/// Decoder step: ×2 transposed convolution of the coarse map, concatenation
/// with the encoder skip map, and 1³ compression.
#[derive(Debug, Clone)]
pub struct UpBlock<T: Scalar> {
    pub deconv: Deconv3dX2<T>,
    pub fuse: BnReluConv<T>,
    up_ch: usize,
    skip_ch: usize,
}

impl<T: Scalar> UpBlock<T> {
    pub fn new(name: &str, coarse_ch: usize, skip_ch: usize, out_ch: usize, rng: &mut DetRng) -> Self {
        UpBlock {
            deconv: Deconv3dX2::new(&format!("{name}.deconv"), coarse_ch, coarse_ch, true, rng),
            fuse: BnReluConv::new(&format!("{name}.fuse"), coarse_ch + skip_ch, out_ch, 1, rng),
            up_ch: coarse_ch,
            skip_ch,
        }
    }

    pub fn forward(&mut self, coarse: &Tensor<T>, skip: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let up = self.deconv.forward(coarse, mode)?;
        let cat = concat_channels(&[&up, skip])?;
        self.fuse.forward(&cat, mode)
    }

    /// Returns `(grad_coarse, grad_skip)`.
    pub fn backward(&mut self, g: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let gcat = self.fuse.backward(g)?;
        let mut parts = split_channels(&gcat, &[self.up_ch, self.skip_ch])?;
        let gskip = parts.pop().expect("two parts");
        let gcoarse = self.deconv.backward(&parts[0])?;
        Ok((gcoarse, gskip))
    }
}

impl<T: Scalar> HasParams<T> for UpBlock<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.deconv.visit_params(f);
        self.fuse.visit_params(f);
    }
}

/// Residual bottleneck without normalization:
/// `x + conv3(relu(conv1(relu(x))))`. A zero input maps to zero when the
/// convolutions carry no bias.
#[derive(Debug, Clone)]
pub struct ResBottleneck<T: Scalar> {
    relu1: Relu<T>,
    pub reduce: Conv3d<T>,
    relu2: Relu<T>,
    pub expand: Conv3d<T>,
}

impl<T: Scalar> ResBottleneck<T> {
    pub fn new(name: &str, ch: usize, mid: usize, bias: bool, rng: &mut DetRng) -> Self {
        let mut expand = Conv3d::new(&format!("{name}.expand"), ConvConfig::same(mid, ch, 3).with_bias(bias), rng);
        // Start close to the identity so stacked blocks stay well scaled.
        expand.weight.value = expand.weight.value.map(|v| v * T::of(0.5));
        ResBottleneck {
            relu1: Relu::new(),
            reduce: Conv3d::new(&format!("{name}.reduce"), ConvConfig::same(ch, mid, 1).with_bias(bias), rng),
            relu2: Relu::new(),
            expand,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.relu1.forward(x, mode);
        let h = self.reduce.forward(&h, mode)?;
        let h = self.relu2.forward(&h, mode);
        let mut y = self.expand.forward(&h, mode)?;
        y.add_assign(x)?;
        Ok(y)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let gh = self.expand.backward(g)?;
        let gh = self.relu2.backward(&gh)?;
        let gh = self.reduce.backward(&gh)?;
        let mut gx = self.relu1.backward(&gh)?;
        gx.add_assign(g)?;
        Ok(gx)
    }
}

impl<T: Scalar> HasParams<T> for ResBottleneck<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.reduce.visit_params(f);
        self.expand.visit_params(f);
    }
}
