use crate::error::{Error, Result};
use crate::nn::conv::{ConvLayer, TransposedConvLayer};
use crate::tensor::{Scalar, Shape, Tensor};

/// Fully connected layer, `y = W x + b` with `W` of shape `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weights.shape().rank() != 2 || bias.dims() != [weights.dims()[0]] {
            return Err(Error::shape(format!(
                "dense weights {} / bias {}",
                weights.shape(),
                bias.shape()
            )));
        }
        Ok(DenseLayer { weights, bias })
    }

    pub fn in_units(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn out_units(&self) -> usize {
        self.weights.dims()[0]
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.dims() != [self.in_units()] {
            return Err(Error::shape(format!(
                "dense layer expects [{}], got {}",
                self.in_units(),
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let mut y = self.bias.data().to_vec();
        T::gemm(false, false, self.out_units(), 1, self.in_units(), T::ONE, self.weights.data(), x.data(), T::ONE, &mut y);
        Tensor::from_dims(&[self.out_units()], y)
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
        self.check(x)?;
        if dy.dims() != [self.out_units()] {
            return Err(Error::shape(format!("dense upstream gradient {}", dy.shape())));
        }
        let (o, i) = (self.out_units(), self.in_units());
        let mut dw = vec![T::ZERO; o * i];
        T::gemm(false, false, o, i, 1, T::ONE, dy.data(), x.data(), T::ZERO, &mut dw);
        let dx = if need_dx {
            let mut dx = vec![T::ZERO; i];
            T::gemm(true, false, i, 1, o, T::ONE, self.weights.data(), dy.data(), T::ZERO, &mut dx);
            Some(Tensor::from_dims(&[i], dx)?)
        } else {
            None
        };
        Ok((dx, Tensor::new(self.weights.shape().clone(), dw)?, dy.clone()))
    }
}

/// One stage of a [`Sequential`](crate::nn::Sequential) stack.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(ConvLayer<T>),
    ConvTranspose(TransposedConvLayer<T>),
    Dense(DenseLayer<T>),
    Relu,
    /// Output activation: clamp into `[lo, hi]`.
    Clamp { lo: f64, hi: f64 },
    Reshape(Shape),
    /// Origin-anchored crop.
    Crop(Shape),
}

/// Gradient of one layer's input plus its parameter gradients, in
/// [`Layer::params`] order.
pub(crate) type LayerGrad<T> = (Option<Tensor<T>>, Vec<Tensor<T>>);

impl<T: Scalar> Layer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::ConvTranspose(_) => "conv_transpose",
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::Clamp { .. } => "clamp",
            Layer::Reshape(_) => "reshape",
            Layer::Crop(_) => "crop",
        }
    }

    /// Compact description used in checkpoint headers.
    pub fn describe(&self) -> String {
        fn list(v: &[usize]) -> String {
            v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
        }
        match self {
            Layer::Conv(c) => format!(
                "conv {}->{} k{} s{} p{}",
                c.in_channels(),
                c.out_channels(),
                list(c.kernel()),
                list(&c.stride),
                list(&c.padding)
            ),
            Layer::ConvTranspose(c) => format!(
                "conv_transpose {}->{} k{} s{}",
                c.in_channels(),
                c.out_channels(),
                list(c.kernel()),
                list(&c.stride)
            ),
            Layer::Dense(d) => format!("dense {}->{}", d.in_units(), d.out_units()),
            Layer::Relu => "relu".into(),
            Layer::Clamp { lo, hi } => format!("clamp {lo:?} {hi:?}"),
            Layer::Reshape(s) => format!("reshape {s}"),
            Layer::Crop(s) => format!("crop {s}"),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&c.weights, &c.bias],
            Layer::ConvTranspose(c) => vec![&c.weights, &c.bias],
            Layer::Dense(d) => vec![&d.weights, &d.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weights, &mut c.bias],
            Layer::ConvTranspose(c) => vec![&mut c.weights, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weights, &mut d.bias],
            _ => Vec::new(),
        }
    }

    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        match self {
            Layer::Conv(c) => c.output_shape(input),
            Layer::ConvTranspose(c) => c.output_shape(input),
            Layer::Dense(d) => {
                if input.dims() != [d.in_units()] {
                    return Err(Error::shape(format!(
                        "dense layer expects [{}], got {input}",
                        d.in_units()
                    )));
                }
                Shape::new(vec![d.out_units()])
            }
            Layer::Relu | Layer::Clamp { .. } => Ok(input.clone()),
            Layer::Reshape(s) => {
                if s.numel() != input.numel() {
                    return Err(Error::shape(format!("cannot reshape {input} into {s}")));
                }
                Ok(s.clone())
            }
            Layer::Crop(s) => {
                if s.rank() != input.rank() || s.dims().iter().zip(input.dims()).any(|(t, i)| t > i) {
                    return Err(Error::shape(format!("cannot crop {input} to {s}")));
                }
                Ok(s.clone())
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::ConvTranspose(c) => c.forward(x),
            Layer::Dense(d) => d.forward(x),
            Layer::Relu => {
                let mut y = x.clone();
                for v in y.data_mut() {
                    if !(*v > T::ZERO) {
                        *v = T::ZERO;
                    }
                }
                Ok(y)
            }
            Layer::Clamp { lo, hi } => {
                let (lo, hi) = (T::from_f64(*lo), T::from_f64(*hi));
                let mut y = x.clone();
                for v in y.data_mut() {
                    if *v < lo {
                        *v = lo;
                    } else if *v > hi {
                        *v = hi;
                    }
                }
                Ok(y)
            }
            Layer::Reshape(s) => x.reshape(s.clone()),
            Layer::Crop(s) => x.crop_to(s),
        }
    }

    /// Backpropagates `dy` through the layer given its forward input `x`.
    pub(crate) fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Result<LayerGrad<T>> {
        let param = |(dx, dw, db): (Option<Tensor<T>>, Tensor<T>, Tensor<T>)| (dx, vec![dw, db]);
        Ok(match self {
            Layer::Conv(c) => param(c.backward(x, dy, need_dx)?),
            Layer::ConvTranspose(c) => param(c.backward(x, dy, need_dx)?),
            Layer::Dense(d) => param(d.backward(x, dy, need_dx)?),
            Layer::Relu => {
                let mut dx = dy.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if !(v > T::ZERO) {
                        *g = T::ZERO;
                    }
                }
                (Some(dx), Vec::new())
            }
            Layer::Clamp { lo, hi } => {
                let (lo, hi) = (T::from_f64(*lo), T::from_f64(*hi));
                let mut dx = dy.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if !(v > lo && v < hi) {
                        *g = T::ZERO;
                    }
                }
                (Some(dx), Vec::new())
            }
            Layer::Reshape(_) => (Some(dy.reshape(x.shape().clone())?), Vec::new()),
            Layer::Crop(_) => (Some(dy.pad_to(x.shape())?), Vec::new()),
        })
    }
}
