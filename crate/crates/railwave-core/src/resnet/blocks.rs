use crate::nn::{
    batchnorm2d, batchnorm2d_backward, batchnorm2d_eval, conv2d, conv2d_backward, relu,
    relu_backward, BatchNormCache, BatchNormParams, ConvParams, NnError, Tensor,
};

/// Convolution followed by batch normalization, the unit both block kinds
/// are assembled from. The activation stays outside so the residual sum
/// can sit between normalization and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: ConvParams,
    pub bn: BatchNormParams,
}

#[derive(Debug)]
pub(crate) struct ConvBnCache {
    /// Layer input; its grad accumulates the gradient w.r.t. that input.
    pub input: Tensor,
    conv_out: Tensor,
    bn: BatchNormCache,
}

impl ConvBn {
    pub(crate) fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, padding: usize) -> Self {
        ConvBn {
            conv: ConvParams::new(out_ch, in_ch, k, k, stride, padding),
            bn: BatchNormParams::new(out_ch),
        }
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, ConvBnCache), NnError> {
        let conv_out = conv2d(x, &self.conv)?;
        let (out, cache) = batchnorm2d(&conv_out, &mut self.bn, true)?;
        Ok((
            out,
            ConvBnCache {
                input: x.clone(),
                conv_out,
                bn: cache.expect("training mode returns a cache"),
            },
        ))
    }

    pub(crate) fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        batchnorm2d_eval(&conv2d(x, &self.conv)?, &self.bn)
    }

    /// Backward through bn then conv; `g` is the gradient w.r.t. the bn
    /// output. Returns the total gradient accumulated on the layer input,
    /// so shortcut contributions added to `cache.input.grad` beforehand
    /// are folded in.
    pub(crate) fn backward(
        &mut self,
        cache: &mut ConvBnCache,
        g: &Tensor,
    ) -> Result<Tensor, NnError> {
        batchnorm2d_backward(&mut cache.conv_out, &mut self.bn, &cache.bn, g)?;
        let g_conv = Tensor::new(
            cache.conv_out.shape.clone(),
            cache.conv_out.grad.clone().expect("bn backward filled grad"),
        )?;
        conv2d_backward(&mut cache.input, &mut self.conv, &g_conv)?;
        Tensor::new(
            cache.input.shape.clone(),
            cache.input.grad.clone().expect("conv backward filled grad"),
        )
    }
}

/// Two 3x3 convolutions; the first carries the stage stride.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub projection: Option<ConvParams>,
    pub stride: usize,
}

/// 1x1 reduce, 3x3 (carrying the stride), 1x1 expand by 4.
#[derive(Debug, Clone)]
pub struct BottleneckBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub conv3: ConvBn,
    pub projection: Option<ConvParams>,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub enum ResidualBlock {
    Basic(BasicBlock),
    Bottleneck(BottleneckBlock),
}

/// Everything the backward pass replays: per-layer caches, the inputs of
/// each ReLU, and the pre-activation residual sum.
#[derive(Debug)]
pub struct BlockCache {
    c1: ConvBnCache,
    b1_out: Tensor,
    c2: ConvBnCache,
    // Bottleneck only: second inner activation and third layer.
    b2_out: Option<Tensor>,
    c3: Option<ConvBnCache>,
    sum: Tensor,
}

fn projection_for(in_ch: usize, out_ch: usize, stride: usize) -> Option<ConvParams> {
    // Identity shortcut whenever shapes already line up; a 1x1 strided
    // convolution otherwise.
    (in_ch != out_ch || stride > 1).then(|| ConvParams::new(out_ch, in_ch, 1, 1, stride, 0))
}

impl BasicBlock {
    /// A projection shortcut appears automatically whenever `in_ch`,
    /// `width`, or the stride would make the identity shape-incompatible.
    pub fn new(in_ch: usize, width: usize, stride: usize) -> Self {
        BasicBlock {
            conv1: ConvBn::new(in_ch, width, 3, stride, 1),
            conv2: ConvBn::new(width, width, 3, 1, 1),
            projection: projection_for(in_ch, width, stride),
            stride,
        }
    }
}

impl BottleneckBlock {
    /// Output channel count is `4 * width`; the projection rule matches
    /// [`BasicBlock::new`].
    pub fn new(in_ch: usize, width: usize, stride: usize) -> Self {
        BottleneckBlock {
            conv1: ConvBn::new(in_ch, width, 1, 1, 0),
            conv2: ConvBn::new(width, width, 3, stride, 1),
            conv3: ConvBn::new(width, width * 4, 1, 1, 0),
            projection: projection_for(in_ch, width * 4, stride),
            stride,
        }
    }
}

fn add_shortcut(main: &Tensor, shortcut: &Tensor) -> Result<Tensor, NnError> {
    if main.shape != shortcut.shape {
        return Err(NnError::ShapeMismatch {
            op: "residual_add",
            detail: format!(
                "main path {:?} vs shortcut {:?}",
                main.shape, shortcut.shape
            ),
        });
    }
    let mut sum = main.clone();
    sum.grad = None;
    for (s, x) in sum.data.iter_mut().zip(&shortcut.data) {
        *s += x;
    }
    Ok(sum)
}

impl ResidualBlock {
    pub fn out_channels(&self) -> usize {
        match self {
            ResidualBlock::Basic(b) => b.conv2.conv.kernels.shape[0],
            ResidualBlock::Bottleneck(b) => b.conv3.conv.kernels.shape[0],
        }
    }

    /// The 1x1 shortcut parameters, when the shapes force a projection.
    pub fn projection(&self) -> Option<&ConvParams> {
        match self {
            ResidualBlock::Basic(b) => b.projection.as_ref(),
            ResidualBlock::Bottleneck(b) => b.projection.as_ref(),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BlockCache), NnError> {
        match self {
            ResidualBlock::Basic(b) => {
                let (b1, c1) = b.conv1.forward_train(x)?;
                let a1 = relu(&b1);
                let (b2, c2) = b.conv2.forward_train(&a1)?;
                let shortcut = match &b.projection {
                    Some(p) => conv2d(x, p)?,
                    None => x.clone(),
                };
                let sum = add_shortcut(&b2, &shortcut)?;
                let out = relu(&sum);
                Ok((
                    out,
                    BlockCache {
                        c1,
                        b1_out: b1,
                        c2,
                        b2_out: None,
                        c3: None,
                        sum,
                    },
                ))
            }
            ResidualBlock::Bottleneck(b) => {
                let (b1, c1) = b.conv1.forward_train(x)?;
                let a1 = relu(&b1);
                let (b2, c2) = b.conv2.forward_train(&a1)?;
                let a2 = relu(&b2);
                let (b3, c3) = b.conv3.forward_train(&a2)?;
                let shortcut = match &b.projection {
                    Some(p) => conv2d(x, p)?,
                    None => x.clone(),
                };
                let sum = add_shortcut(&b3, &shortcut)?;
                let out = relu(&sum);
                Ok((
                    out,
                    BlockCache {
                        c1,
                        b1_out: b1,
                        c2,
                        b2_out: Some(b2),
                        c3: Some(c3),
                        sum,
                    },
                ))
            }
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let (main, projection) = match self {
            ResidualBlock::Basic(b) => {
                let a1 = relu(&b.conv1.forward_eval(x)?);
                (b.conv2.forward_eval(&a1)?, &b.projection)
            }
            ResidualBlock::Bottleneck(b) => {
                let a1 = relu(&b.conv1.forward_eval(x)?);
                let a2 = relu(&b.conv2.forward_eval(&a1)?);
                (b.conv3.forward_eval(&a2)?, &b.projection)
            }
        };
        let shortcut = match projection {
            Some(p) => conv2d(x, p)?,
            None => x.clone(),
        };
        Ok(relu(&add_shortcut(&main, &shortcut)?))
    }

    /// `g_out` is the gradient w.r.t. the block output. Returns the
    /// gradient w.r.t. the block input, combining the main path and the
    /// (possibly projected) shortcut.
    pub fn backward(&mut self, cache: &mut BlockCache, g_out: &Tensor) -> Result<Tensor, NnError> {
        relu_backward(&mut cache.sum, g_out)?;
        let g_sum = Tensor::new(cache.sum.shape.clone(), cache.sum.grad.clone().unwrap())?;
        match self {
            ResidualBlock::Basic(b) => {
                let g_a1 = b.conv2.backward(&mut cache.c2, &g_sum)?;
                relu_backward(&mut cache.b1_out, &g_a1)?;
                let g_b1 =
                    Tensor::new(cache.b1_out.shape.clone(), cache.b1_out.grad.clone().unwrap())?;
                // Shortcut gradient lands on the shared input tensor first
                // so conv1's backward returns the combined total.
                match &mut b.projection {
                    Some(p) => conv2d_backward(&mut cache.c1.input, p, &g_sum)?,
                    None => {
                        let grad = cache.c1.input.grad_mut();
                        for (gi, gs) in grad.iter_mut().zip(&g_sum.data) {
                            *gi += gs;
                        }
                    }
                }
                b.conv1.backward(&mut cache.c1, &g_b1)
            }
            ResidualBlock::Bottleneck(b) => {
                let c3 = cache.c3.as_mut().expect("bottleneck cache has conv3");
                let b2_out = cache.b2_out.as_mut().expect("bottleneck cache has b2");
                let g_a2 = b.conv3.backward(c3, &g_sum)?;
                relu_backward(b2_out, &g_a2)?;
                let g_b2 = Tensor::new(b2_out.shape.clone(), b2_out.grad.clone().unwrap())?;
                let g_a1 = b.conv2.backward(&mut cache.c2, &g_b2)?;
                relu_backward(&mut cache.b1_out, &g_a1)?;
                let g_b1 =
                    Tensor::new(cache.b1_out.shape.clone(), cache.b1_out.grad.clone().unwrap())?;
                match &mut b.projection {
                    Some(p) => conv2d_backward(&mut cache.c1.input, p, &g_sum)?,
                    None => {
                        let grad = cache.c1.input.grad_mut();
                        for (gi, gs) in grad.iter_mut().zip(&g_sum.data) {
                            *gi += gs;
                        }
                    }
                }
                b.conv1.backward(&mut cache.c1, &g_b1)
            }
        }
    }
}
