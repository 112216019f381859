//! Layer stacks and the three autoencoder configurations.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::conv::{ConvLayer, TransposedConvLayer};
use crate::nn::layer::{DenseLayer, Layer};
use crate::tensor::{mse, Scalar, Shape, Tensor};

/// Ordered stack of layers evaluated front to back.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Input followed by every layer's output.
    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward(acts.last().expect("non-empty"))?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// MSE between `forward(x)` and `target` and its gradient with respect
    /// to every parameter, in [`params`](Self::params) order.
    pub fn loss_and_grad(&self, x: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
        let acts = self.forward_trace(x)?;
        let out = acts.last().expect("non-empty");
        let loss = mse(out, target)?;
        let scale = T::from_f64(2.0 / out.len() as f64);
        let diff: Vec<T> = out
            .data()
            .iter()
            .zip(target.data())
            .map(|(&o, &t)| (o - t) * scale)
            .collect();
        let mut dy = Tensor::new(out.shape().clone(), diff)?;

        let first_param_layer = self.layers.iter().position(|l| !l.params().is_empty());
        let mut grads_rev: Vec<Tensor<T>> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need_dx = first_param_layer.is_some_and(|f| i > f);
            let (dx, mut pgrads) = layer.backward(&acts[i], &dy, need_dx)?;
            while let Some(g) = pgrads.pop() {
                grads_rev.push(g);
            }
            match dx {
                Some(dx) => dy = dx,
                None => break,
            }
        }
        grads_rev.reverse();
        Ok((loss, grads_rev))
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// `layer<i>.weight` / `layer<i>.bias`, aligned with [`params`](Self::params).
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if !l.params().is_empty() {
                names.push(format!("layer{i}.weight"));
                names.push(format!("layer{i}.bias"));
            }
        }
        names
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// The three autoencoder configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConfigId {
    /// Per-frame 2D model for the vortex-street ensemble.
    Karman2d,
    /// 3D model over depth-3 temporal stacks of frames.
    Karman3dStack,
    /// Shallow 3D model for volumetric droplet fields.
    Droplet3d,
}

impl ConfigId {
    pub fn as_str(self) -> &'static str {
        match self {
            ConfigId::Karman2d => "karman-2d",
            ConfigId::Karman3dStack => "karman-3d-stack",
            ConfigId::Droplet3d => "droplet-3d",
        }
    }
}

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConfigId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "karman-2d" => Ok(ConfigId::Karman2d),
            "karman-3d-stack" | "karman-3d" => Ok(ConfigId::Karman3dStack),
            "droplet-3d" | "droplet" => Ok(ConfigId::Droplet3d),
            other => Err(Error::format(format!("unknown config id `{other}`"))),
        }
    }
}

/// Everything needed to rebuild a model's layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub config: ConfigId,
    /// `[channels, spatial...]`.
    pub input_shape: Shape,
    /// Filters per encoder conv (Kármán configs).
    pub filters: usize,
    pub hidden_units: usize,
    pub latent_units: usize,
    /// Widths of the two droplet encoder convs.
    pub droplet_widths: [usize; 2],
    /// Clamp range of the output activation, i.e. the data scale.
    pub output_range: (f64, f64),
}

impl ArchSpec {
    /// 64 filters, dense 256 → 128, output in `[0, 1]`.
    pub fn karman_2d(height: usize, width: usize) -> Self {
        ArchSpec {
            config: ConfigId::Karman2d,
            input_shape: Shape::new(vec![1, height, width]).expect("positive extents"),
            filters: 64,
            hidden_units: 256,
            latent_units: 128,
            droplet_widths: [32, 64],
            output_range: (0.0, 1.0),
        }
    }

    pub fn karman_3d_stack(height: usize, width: usize) -> Self {
        ArchSpec {
            config: ConfigId::Karman3dStack,
            input_shape: Shape::new(vec![1, 3, height, width]).expect("positive extents"),
            ..Self::karman_2d(height, width)
        }
    }

    /// Widths 32/64 and byte-range output.
    pub fn droplet_3d(side: usize) -> Self {
        ArchSpec {
            config: ConfigId::Droplet3d,
            input_shape: Shape::new(vec![1, side, side, side]).expect("positive extents"),
            output_range: (0.0, 255.0),
            ..Self::karman_2d(side, side)
        }
    }

    pub fn with_filters(mut self, filters: usize) -> Self {
        self.filters = filters;
        self
    }

    pub fn with_dense(mut self, hidden: usize, latent: usize) -> Self {
        self.hidden_units = hidden;
        self.latent_units = latent;
        self
    }

    pub fn with_droplet_widths(mut self, widths: [usize; 2]) -> Self {
        self.droplet_widths = widths;
        self
    }

    pub fn with_output_range(mut self, lo: f64, hi: f64) -> Self {
        self.output_range = (lo, hi);
        self
    }

    pub fn with_input_shape(mut self, shape: Shape) -> Self {
        self.input_shape = shape;
        self
    }
}

/// He-style uniform initializer over a seeded stream.
struct Init {
    rng: Option<ChaCha8Rng>,
}

impl Init {
    fn weights<T: Scalar>(&mut self, dims: Vec<usize>, fan_in: usize) -> Result<Tensor<T>> {
        let shape = Shape::new(dims)?;
        match &mut self.rng {
            None => Ok(Tensor::zeros(shape)),
            Some(rng) => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let data = (0..shape.numel())
                    .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                    .collect();
                Tensor::new(shape, data)
            }
        }
    }

    fn bias<T: Scalar>(&mut self, n: usize) -> Result<Tensor<T>> {
        Ok(Tensor::zeros(Shape::new(vec![n])?))
    }
}

struct Builder<T> {
    layers: Vec<Layer<T>>,
    shape: Shape,
    init: Init,
}

impl<T: Scalar> Builder<T> {
    fn push(&mut self, layer: Layer<T>) -> Result<()> {
        self.shape = layer.output_shape(&self.shape)?;
        self.layers.push(layer);
        Ok(())
    }

    fn conv(&mut self, out_ch: usize, stride: &[usize], relu: bool) -> Result<()> {
        let rank = stride.len();
        let in_ch = self.shape.dims()[0];
        let mut dims = vec![out_ch, in_ch];
        dims.extend(vec![3; rank]);
        let fan_in = in_ch * 3usize.pow(rank as u32);
        let w = self.init.weights(dims, fan_in)?;
        let b = self.init.bias(out_ch)?;
        self.push(Layer::Conv(ConvLayer::new(w, b, stride.to_vec(), vec![1; rank])?))?;
        if relu {
            self.push(Layer::Relu)?;
        }
        Ok(())
    }

    fn conv_transpose(&mut self, out_ch: usize, stride: &[usize], relu: bool) -> Result<()> {
        let rank = stride.len();
        let in_ch = self.shape.dims()[0];
        let mut dims = vec![in_ch, out_ch];
        dims.extend(vec![3; rank]);
        let taps = 3usize.pow(rank as u32) / stride.iter().product::<usize>();
        let w = self.init.weights(dims, in_ch * taps.max(1))?;
        let b = self.init.bias(out_ch)?;
        self.push(Layer::ConvTranspose(TransposedConvLayer::new(w, b, stride.to_vec())?))?;
        if relu {
            self.push(Layer::Relu)?;
        }
        Ok(())
    }

    fn dense(&mut self, out: usize, relu: bool) -> Result<()> {
        let n_in = self.shape.numel();
        let w = self.init.weights(vec![out, n_in], n_in)?;
        let b = self.init.bias(out)?;
        self.push(Layer::Dense(DenseLayer::new(w, b)?))?;
        if relu {
            self.push(Layer::Relu)?;
        }
        Ok(())
    }
}

/// Autoencoder: a layer stack plus the configuration it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderModel<T> {
    spec: ArchSpec,
    net: Sequential<T>,
    /// Index of the layer whose output is the latent representation.
    latent_index: usize,
}

impl<T: Scalar> AutoencoderModel<T> {
    /// Builds the stack with seeded fan-in uniform weights and zero biases.
    pub fn new(spec: ArchSpec, seed: u64) -> Result<Self> {
        Self::build(spec, Some(ChaCha8Rng::seed_from_u64(seed)))
    }

    /// Same stack with every parameter zero.
    pub fn zeroed(spec: ArchSpec) -> Result<Self> {
        Self::build(spec, None)
    }

    fn build(spec: ArchSpec, rng: Option<ChaCha8Rng>) -> Result<Self> {
        let input = spec.input_shape.clone();
        let in_ch = input.dims()[0];
        let rank = input.rank() - 1;
        let mut b = Builder {
            layers: Vec::new(),
            shape: input.clone(),
            init: Init { rng },
        };
        let latent_index;
        match spec.config {
            ConfigId::Karman2d | ConfigId::Karman3dStack => {
                let stride: Vec<usize> = match (spec.config, rank) {
                    (ConfigId::Karman2d, 2) => vec![2, 2],
                    // temporal axis keeps its extent
                    (ConfigId::Karman3dStack, 3) => vec![1, 2, 2],
                    _ => {
                        return Err(Error::shape(format!(
                            "{} does not accept input {input}",
                            spec.config
                        )))
                    }
                };
                for _ in 0..4 {
                    b.conv(spec.filters, &stride, true)?;
                }
                let feature = b.shape.clone();
                b.push(Layer::Reshape(Shape::new(vec![feature.numel()])?))?;
                b.dense(spec.hidden_units, true)?;
                b.dense(spec.latent_units, false)?;
                latent_index = b.layers.len() - 1;
                b.dense(feature.numel(), true)?;
                b.push(Layer::Reshape(feature))?;
                for i in 0..4 {
                    let last = i == 3;
                    b.conv_transpose(if last { in_ch } else { spec.filters }, &stride, !last)?;
                }
            }
            ConfigId::Droplet3d => {
                if rank != 3 {
                    return Err(Error::shape(format!("droplet-3d does not accept input {input}")));
                }
                let stride = [2, 2, 2];
                let [w1, w2] = spec.droplet_widths;
                b.conv(w1, &stride, true)?;
                b.conv(w2, &stride, true)?;
                b.conv(1, &stride, false)?;
                latent_index = b.layers.len() - 1;
                b.conv_transpose(w2, &stride, true)?;
                b.conv_transpose(w1, &stride, true)?;
                b.conv_transpose(in_ch, &stride, false)?;
            }
        }
        b.push(Layer::Crop(input))?;
        let (lo, hi) = spec.output_range;
        b.push(Layer::Clamp { lo, hi })?;
        Ok(AutoencoderModel {
            spec,
            net: Sequential::new(b.layers),
            latent_index,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn config(&self) -> ConfigId {
        self.spec.config
    }

    pub fn input_shape(&self) -> &Shape {
        &self.spec.input_shape
    }

    pub fn network(&self) -> &Sequential<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Sequential<T> {
        &mut self.net
    }

    pub fn latent_index(&self) -> usize {
        self.latent_index
    }

    pub fn latent_shape(&self) -> Result<Shape> {
        let mut s = self.spec.input_shape.clone();
        for l in &self.net.layers[..=self.latent_index] {
            s = l.output_shape(&s)?;
        }
        Ok(s)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != &self.spec.input_shape {
            return Err(Error::shape(format!(
                "model expects {}, got {}",
                self.spec.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Reconstruction and latent representation of `x`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut latent = None;
        for (i, layer) in self.net.layers.iter().enumerate() {
            cur = layer.forward(&cur)?;
            if i == self.latent_index {
                latent = Some(cur.clone());
            }
        }
        Ok((cur, latent.expect("latent layer is inside the stack")))
    }

    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.net.forward(x)
    }

    /// Reconstruction MSE against `target` and its parameter gradients.
    pub fn backward(&self, x: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
        self.check_input(x)?;
        if target.shape() != x.shape() {
            return Err(Error::shape(format!(
                "target {} differs from input {}",
                target.shape(),
                x.shape()
            )));
        }
        self.net.loss_and_grad(x, target)
    }

    /// Loads parameters in [`Sequential::params`] order.
    pub fn set_params(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        let mut slots = self.net.params_mut();
        if slots.len() != values.len() {
            return Err(Error::shape(format!(
                "{} parameter tensors for {} slots",
                values.len(),
                slots.len()
            )));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::shape(format!(
                    "parameter {} does not fit slot {}",
                    v.shape(),
                    slot.shape()
                )));
            }
            **slot = v;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> AutoencoderModel<U> {
        let mut out = AutoencoderModel::<U>::zeroed(self.spec.clone()).expect("spec already validated");
        let vals = self.net.params().into_iter().map(|p| p.cast()).collect();
        out.set_params(vals).expect("identical architecture");
        out
    }
}
