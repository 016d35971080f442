//! Feature backbones: the digit LeNet variants, torchvision-layout ResNets,
//! and a small perceptron for synthetic tasks.

use candle_core::Tensor;

use super::layers::{dropout2d, BatchNorm, BnInit, Conv, Dense, DenseInit, Mode};
use super::params::{Init, ParamStore};
use crate::config::BackboneKind;
use crate::data::ImageShape;
use crate::error::{contract, Result};

pub enum Backbone {
    LeNet(LeNet),
    Dtn(Dtn),
    ResNet(ResNet),
    Mlp(Mlp),
}

impl Backbone {
    pub fn build(
        kind: BackboneKind,
        input: ImageShape,
        mlp_hidden: usize,
        store: &mut ParamStore,
        init: &mut Init,
    ) -> Result<Self> {
        Ok(match kind {
            BackboneKind::LeNet => Backbone::LeNet(LeNet::new(input, store, init)?),
            BackboneKind::Dtn => Backbone::Dtn(Dtn::new(input, store, init)?),
            BackboneKind::ResNet18 => Backbone::ResNet(ResNet::new(ResNetDepth::R18, input, store, init)?),
            BackboneKind::ResNet34 => Backbone::ResNet(ResNet::new(ResNetDepth::R34, input, store, init)?),
            BackboneKind::ResNet50 => Backbone::ResNet(ResNet::new(ResNetDepth::R50, input, store, init)?),
            BackboneKind::ResNet101 => Backbone::ResNet(ResNet::new(ResNetDepth::R101, input, store, init)?),
            BackboneKind::Mlp => Backbone::Mlp(Mlp::new(input, mlp_hidden, store, init)?),
        })
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Backbone::LeNet(n) => n.out_dim,
            Backbone::Dtn(n) => n.out_dim,
            Backbone::ResNet(n) => n.out_dim,
            Backbone::Mlp(n) => n.out_dim,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        match self {
            Backbone::LeNet(n) => n.forward(x, mode),
            Backbone::Dtn(n) => n.forward(x, mode),
            Backbone::ResNet(n) => n.forward(x, mode),
            Backbone::Mlp(n) => n.forward(x, mode),
        }
    }
}

/// conv(20,5) → pool → relu → conv(50,5) → dropout2d(0.5) → pool → relu.
pub struct LeNet {
    conv1: Conv,
    conv2: Conv,
    out_dim: usize,
}

impl LeNet {
    fn new(input: ImageShape, store: &mut ParamStore, init: &mut Init) -> Result<Self> {
        if input.height != input.width || input.height < 16 {
            return Err(contract(format!("LeNet needs square input of side >= 16, got {input}")));
        }
        let conv1 = Conv::new(store, init, "conv1", input.channels, 20, 5, 1, 0, true, false)?;
        let conv2 = Conv::new(store, init, "conv2", 20, 50, 5, 1, 0, true, false)?;
        let side = ((input.height - 4) / 2 - 4) / 2;
        Ok(Self { conv1, conv2, out_dim: 50 * side * side })
    }

    fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.max_pool2d(2)?.relu()?;
        let h = self.conv2.forward(&h)?;
        let h = dropout2d(&h, 0.5, mode)?.max_pool2d(2)?.relu()?;
        Ok(h.flatten_from(1)?)
    }
}

/// Three stride-2 5x5 convolutions (64, 128, 256) with batch norm and
/// increasing channel dropout.
pub struct Dtn {
    convs: Vec<(Conv, BatchNorm, f64)>,
    out_dim: usize,
}

impl Dtn {
    fn new(input: ImageShape, store: &mut ParamStore, init: &mut Init) -> Result<Self> {
        if input.height != input.width || input.height % 8 != 0 {
            return Err(contract(format!("DTN needs square input with side divisible by 8, got {input}")));
        }
        let widths = [(input.channels, 64, 0.1), (64, 128, 0.3), (128, 256, 0.5)];
        let mut convs = Vec::new();
        for (i, (cin, cout, p)) in widths.into_iter().enumerate() {
            let conv = Conv::new(store, init, &format!("conv{}", i + 1), cin, cout, 5, 2, 2, true, false)?;
            let bn = BatchNorm::new(store, init, &format!("bn{}", i + 1), cout, BnInit::Ones)?;
            convs.push((conv, bn, p));
        }
        let side = input.height / 8;
        Ok(Self { convs, out_dim: 256 * side * side })
    }

    fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for (conv, bn, p) in &self.convs {
            h = bn.forward(&conv.forward(&h)?, mode)?;
            h = dropout2d(&h, *p, mode)?.relu()?;
        }
        Ok(h.flatten_from(1)?)
    }
}

/// Flatten → dense → relu → dense → relu.
pub struct Mlp {
    fc1: Dense,
    fc2: Dense,
    out_dim: usize,
}

impl Mlp {
    fn new(input: ImageShape, hidden: usize, store: &mut ParamStore, init: &mut Init) -> Result<Self> {
        let fc1 = Dense::new(store, init, "fc1", input.len(), hidden, DenseInit::Default)?;
        let fc2 = Dense::new(store, init, "fc2", hidden, hidden, DenseInit::Default)?;
        Ok(Self { fc1, fc2, out_dim: hidden })
    }

    fn forward(&self, x: &Tensor, _mode: &mut Mode) -> Result<Tensor> {
        let h = self.fc1.forward(&x.flatten_from(1)?)?.relu()?;
        Ok(self.fc2.forward(&h)?.relu()?)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ResNetDepth {
    R18,
    R34,
    R50,
    R101,
}

impl ResNetDepth {
    fn blocks(self) -> [usize; 4] {
        match self {
            ResNetDepth::R18 => [2, 2, 2, 2],
            ResNetDepth::R34 | ResNetDepth::R50 => [3, 4, 6, 3],
            ResNetDepth::R101 => [3, 4, 23, 3],
        }
    }

    fn bottleneck(self) -> bool {
        matches!(self, ResNetDepth::R50 | ResNetDepth::R101)
    }
}

struct Block {
    convs: Vec<(Conv, BatchNorm)>,
    downsample: Option<(Conv, BatchNorm)>,
}

impl Block {
    fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            h = bn.forward(&conv.forward(&h)?, mode)?;
            if i != last {
                h = h.relu()?;
            }
        }
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// ResNet with parameter names following the torchvision layout, so
/// converted ImageNet weights load by name. The final fc layer is omitted.
pub struct ResNet {
    conv1: Conv,
    bn1: BatchNorm,
    layers: Vec<Block>,
    out_dim: usize,
}

impl ResNet {
    fn new(depth: ResNetDepth, input: ImageShape, store: &mut ParamStore, init: &mut Init) -> Result<Self> {
        if input.height < 32 || input.width < 32 {
            return Err(contract(format!("ResNet input must be at least 32x32, got {input}")));
        }
        let conv1 = Conv::new(store, init, "conv1", input.channels, 64, 7, 2, 3, false, true)?;
        let bn1 = BatchNorm::new(store, init, "bn1", 64, BnInit::Ones)?;
        let expansion = if depth.bottleneck() { 4 } else { 1 };
        let mut in_c = 64;
        let mut layers = Vec::new();
        for (stage, (&count, width)) in depth.blocks().iter().zip([64, 128, 256, 512]).enumerate() {
            for b in 0..count {
                let stride = if b == 0 && stage > 0 { 2 } else { 1 };
                let name = format!("layer{}.{b}", stage + 1);
                let out_c = width * expansion;
                let mut convs = Vec::new();
                if depth.bottleneck() {
                    let specs = [(in_c, width, 1, 1, 0), (width, width, 3, stride, 1), (width, out_c, 1, 1, 0)];
                    for (i, (ci, co, k, s, p)) in specs.into_iter().enumerate() {
                        let conv = Conv::new(store, init, &format!("{name}.conv{}", i + 1), ci, co, k, s, p, false, true)?;
                        let bn = BatchNorm::new(store, init, &format!("{name}.bn{}", i + 1), co, BnInit::Ones)?;
                        convs.push((conv, bn));
                    }
                } else {
                    let specs = [(in_c, width, stride), (width, width, 1)];
                    for (i, (ci, co, s)) in specs.into_iter().enumerate() {
                        let conv = Conv::new(store, init, &format!("{name}.conv{}", i + 1), ci, co, 3, s, 1, false, true)?;
                        let bn = BatchNorm::new(store, init, &format!("{name}.bn{}", i + 1), co, BnInit::Ones)?;
                        convs.push((conv, bn));
                    }
                }
                let downsample = if stride != 1 || in_c != out_c {
                    let conv = Conv::new(store, init, &format!("{name}.downsample.0"), in_c, out_c, 1, stride, 0, false, true)?;
                    let bn = BatchNorm::new(store, init, &format!("{name}.downsample.1"), out_c, BnInit::Ones)?;
                    Some((conv, bn))
                } else {
                    None
                };
                layers.push(Block { convs, downsample });
                in_c = out_c;
            }
        }
        Ok(Self { conv1, bn1, layers, out_dim: in_c })
    }

    fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        // inputs are post-relu (>= 0), so zero padding matches -inf padding for the max
        let h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut h = max_pool_3x3_s2(&h)?;
        for block in &self.layers {
            h = block.forward(&h, mode)?;
        }
        Ok(h.mean((2, 3))?)
    }
}

/// 3x3 stride-2 max pool (no padding) as the max of four shifted 2x2 pools,
/// which candle can differentiate.
fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (ho, wo) = ((h - 3) / 2 + 1, (w - 3) / 2 + 1);
    let mut out: Option<Tensor> = None;
    for di in 0..2 {
        for dj in 0..2 {
            let p = x.narrow(2, di, 2 * ho)?.narrow(3, dj, 2 * wo)?.max_pool2d(2)?;
            out = Some(match out {
                Some(o) => o.maximum(&p)?,
                None => p,
            });
        }
    }
    Ok(out.expect("four views"))
}
