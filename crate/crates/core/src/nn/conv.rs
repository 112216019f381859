//! Strided 2D/3D convolution and its adjoint (transposed convolution).
//!
//! Both layers lower to im2col + GEMM. Rank-2 layers run through the same
//! code with a unit depth axis.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Extents of one convolution lowered to three spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geom {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

/// Output extent of a strided, zero-padded convolution along one axis.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Output extent of a padding-free transposed convolution along one axis.
pub fn conv_transpose_out_extent(n: usize, k: usize, stride: usize) -> usize {
    (n - 1) * stride + k
}

fn lift(v: &[usize], fill: usize) -> [usize; 3] {
    match v.len() {
        2 => [fill, v[0], v[1]],
        3 => [v[0], v[1], v[2]],
        _ => unreachable!("spatial rank validated on construction"),
    }
}

impl Geom {
    fn new(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_out_extent(input[a], kernel[a], stride[a], pad[a]).ok_or_else(|| {
                Error::shape(format!(
                    "kernel {kernel:?} does not fit input {input:?} with padding {pad:?}"
                ))
            })?;
        }
        Ok(Geom {
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn k_len(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Source index along one axis for output position `o` and kernel tap `k`.
#[inline]
fn src(o: usize, k: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    if i >= 0 && (i as usize) < n {
        Some(i as usize)
    } else {
        None
    }
}

/// Unfolds `x` (`channels` × input positions) into `col`
/// (`channels·K` × output positions).
pub(crate) fn im2col<T: Scalar>(x: &[T], channels: usize, g: &Geom, col: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let p = g.out_len();
    let in_len = g.in_len();
    for c in 0..channels {
        let xc = &x[c * in_len..(c + 1) * in_len];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut j = 0;
                    for zo in 0..od {
                        let zi = src(zo, a, sd, pd, id);
                        for yo in 0..oh {
                            let yi = zi.and_then(|z| src(yo, b, sh, ph, ih).map(|y| (z * ih + y) * iw));
                            match yi {
                                None => {
                                    dst[j..j + ow].fill(T::ZERO);
                                }
                                Some(base) => {
                                    for xo in 0..ow {
                                        dst[j + xo] = match src(xo, e, sw, pw, iw) {
                                            Some(xi) => xc[base + xi],
                                            None => T::ZERO,
                                        };
                                    }
                                }
                            }
                            j += ow;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `col` back onto `x`.
pub(crate) fn col2im_add<T: Scalar>(col: &[T], channels: usize, g: &Geom, x: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let p = g.out_len();
    let in_len = g.in_len();
    for c in 0..channels {
        let xc = &mut x[c * in_len..(c + 1) * in_len];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let srcrow = &col[row * p..(row + 1) * p];
                    let mut j = 0;
                    for zo in 0..od {
                        let zi = src(zo, a, sd, pd, id);
                        for yo in 0..oh {
                            if let Some(base) =
                                zi.and_then(|z| src(yo, b, sh, ph, ih).map(|y| (z * ih + y) * iw))
                            {
                                for xo in 0..ow {
                                    if let Some(xi) = src(xo, e, sw, pw, iw) {
                                        xc[base + xi] += srcrow[j + xo];
                                    }
                                }
                            }
                            j += ow;
                        }
                    }
                }
            }
        }
    }
}

fn spatial_rank(weights: &Tensor<impl Scalar>) -> Result<usize> {
    match weights.shape().rank() {
        4 => Ok(2),
        5 => Ok(3),
        r => Err(Error::shape(format!(
            "convolution weights must have rank 4 or 5, got {r}"
        ))),
    }
}

fn check_bias<T: Scalar>(bias: &Tensor<T>, n: usize) -> Result<()> {
    if bias.dims() != [n] {
        return Err(Error::shape(format!(
            "bias shape {} does not match {n} channels",
            bias.shape()
        )));
    }
    Ok(())
}

fn check_input<T: Scalar>(x: &Tensor<T>, rank: usize, channels: usize) -> Result<()> {
    if x.shape().rank() != rank + 1 || x.dims()[0] != channels {
        return Err(Error::shape(format!(
            "input {} incompatible with {channels}-channel rank-{rank} layer",
            x.shape()
        )));
    }
    Ok(())
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    let per = out.len() / bias.len();
    for (chunk, &b) in out.chunks_mut(per).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums<T: Scalar>(dy: &[T], channels: usize) -> Vec<T> {
    let per = dy.len() / channels;
    dy.chunks(per)
        .map(|c| c.iter().fold(T::ZERO, |s, &v| s + v))
        .collect()
}

/// Strided convolution with zero padding. Weights are
/// `[out_ch, in_ch, k...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, stride: Vec<usize>, padding: Vec<usize>) -> Result<Self> {
        let rank = spatial_rank(&weights)?;
        check_bias(&bias, weights.dims()[0])?;
        if stride.len() != rank || padding.len() != rank || stride.contains(&0) {
            return Err(Error::shape(format!(
                "stride {stride:?} / padding {padding:?} do not fit rank {rank}"
            )));
        }
        Ok(ConvLayer {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn rank(&self) -> usize {
        self.weights.shape().rank() - 2
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn kernel(&self) -> &[usize] {
        &self.weights.dims()[2..]
    }

    fn geom(&self, spatial: &[usize]) -> Result<Geom> {
        Geom::new(
            lift(spatial, 1),
            lift(self.kernel(), 1),
            lift(&self.stride, 1),
            lift(&self.padding, 0),
        )
    }

    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        if input.rank() != self.rank() + 1 || input.dims()[0] != self.in_channels() {
            return Err(Error::shape(format!(
                "input {input} incompatible with {}-channel rank-{} layer",
                self.in_channels(),
                self.rank()
            )));
        }
        let g = self.geom(&input.dims()[1..])?;
        let mut dims = vec![self.out_channels()];
        dims.extend_from_slice(&g.output[3 - self.rank()..]);
        Shape::new(dims)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_input(x, self.rank(), self.in_channels())?;
        let out_shape = self.output_shape(x.shape())?;
        let g = self.geom(&x.dims()[1..])?;
        let ck = self.in_channels() * g.k_len();
        let p = g.out_len();
        let mut col = vec![T::ZERO; ck * p];
        im2col(x.data(), self.in_channels(), &g, &mut col);
        let mut out = vec![T::ZERO; self.out_channels() * p];
        T::gemm(false, false, self.out_channels(), p, ck, T::ONE, self.weights.data(), &col, T::ZERO, &mut out);
        add_channel_bias(&mut out, self.bias.data());
        Tensor::new(out_shape, out)
    }

    /// Returns `(dx, dweights, dbias)`; `dx` is skipped when not needed.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
        check_input(x, self.rank(), self.in_channels())?;
        let out_shape = self.output_shape(x.shape())?;
        if dy.shape() != &out_shape {
            return Err(Error::shape(format!(
                "upstream gradient {} != layer output {out_shape}",
                dy.shape()
            )));
        }
        let g = self.geom(&x.dims()[1..])?;
        let ck = self.in_channels() * g.k_len();
        let p = g.out_len();
        let oc = self.out_channels();
        let mut col = vec![T::ZERO; ck * p];
        im2col(x.data(), self.in_channels(), &g, &mut col);

        let mut dw = vec![T::ZERO; oc * ck];
        T::gemm(false, true, oc, ck, p, T::ONE, dy.data(), &col, T::ZERO, &mut dw);
        let db = channel_sums(dy.data(), oc);

        let dx = if need_dx {
            T::gemm(true, false, ck, p, oc, T::ONE, self.weights.data(), dy.data(), T::ZERO, &mut col);
            let mut dx = vec![T::ZERO; x.len()];
            col2im_add(&col, self.in_channels(), &g, &mut dx);
            Some(Tensor::new(x.shape().clone(), dx)?)
        } else {
            None
        };
        Ok((
            dx,
            Tensor::new(self.weights.shape().clone(), dw)?,
            Tensor::from_dims(&[oc], db)?,
        ))
    }
}

/// Padding-free strided transposed convolution. Weights are
/// `[in_ch, out_ch, k...]`, so the layer is the exact adjoint of a
/// [`ConvLayer`] holding the same buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TransposedConvLayer<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: Vec<usize>,
}

impl<T: Scalar> TransposedConvLayer<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, stride: Vec<usize>) -> Result<Self> {
        let rank = spatial_rank(&weights)?;
        check_bias(&bias, weights.dims()[1])?;
        if stride.len() != rank || stride.contains(&0) {
            return Err(Error::shape(format!("stride {stride:?} does not fit rank {rank}")));
        }
        Ok(TransposedConvLayer {
            weights,
            bias,
            stride,
        })
    }

    pub fn rank(&self) -> usize {
        self.weights.shape().rank() - 2
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn kernel(&self) -> &[usize] {
        &self.weights.dims()[2..]
    }

    /// Geometry of the forward convolution this layer is the adjoint of.
    fn geom(&self, spatial: &[usize]) -> Result<Geom> {
        let n = lift(spatial, 1);
        let k = lift(self.kernel(), 1);
        let s = lift(&self.stride, 1);
        let mut big = [0; 3];
        for a in 0..3 {
            big[a] = conv_transpose_out_extent(n[a], k[a], s[a]);
        }
        let g = Geom::new(big, k, s, [0; 3])?;
        debug_assert_eq!(g.output, n);
        Ok(g)
    }

    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        if input.rank() != self.rank() + 1 || input.dims()[0] != self.in_channels() {
            return Err(Error::shape(format!(
                "input {input} incompatible with {}-channel rank-{} transposed layer",
                self.in_channels(),
                self.rank()
            )));
        }
        let g = self.geom(&input.dims()[1..])?;
        let mut dims = vec![self.out_channels()];
        dims.extend_from_slice(&g.input[3 - self.rank()..]);
        Shape::new(dims)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_input(x, self.rank(), self.in_channels())?;
        let out_shape = self.output_shape(x.shape())?;
        let g = self.geom(&x.dims()[1..])?;
        let ck = self.out_channels() * g.k_len();
        let p = g.out_len();
        let mut col = vec![T::ZERO; ck * p];
        T::gemm(true, false, ck, p, self.in_channels(), T::ONE, self.weights.data(), x.data(), T::ZERO, &mut col);
        let mut out = vec![T::ZERO; out_shape.numel()];
        col2im_add(&col, self.out_channels(), &g, &mut out);
        add_channel_bias(&mut out, self.bias.data());
        Tensor::new(out_shape, out)
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
        check_input(x, self.rank(), self.in_channels())?;
        let out_shape = self.output_shape(x.shape())?;
        if dy.shape() != &out_shape {
            return Err(Error::shape(format!(
                "upstream gradient {} != layer output {out_shape}",
                dy.shape()
            )));
        }
        let g = self.geom(&x.dims()[1..])?;
        let ck = self.out_channels() * g.k_len();
        let p = g.out_len();
        let ic = self.in_channels();
        let mut col = vec![T::ZERO; ck * p];
        im2col(dy.data(), self.out_channels(), &g, &mut col);

        let mut dw = vec![T::ZERO; ic * ck];
        T::gemm(false, true, ic, ck, p, T::ONE, x.data(), &col, T::ZERO, &mut dw);
        let db = channel_sums(dy.data(), self.out_channels());
        let dx = if need_dx {
            let mut dx = vec![T::ZERO; ic * p];
            T::gemm(false, false, ic, p, ck, T::ONE, self.weights.data(), &col, T::ZERO, &mut dx);
            Some(Tensor::new(x.shape().clone(), dx)?)
        } else {
            None
        };
        Ok((
            dx,
            Tensor::new(self.weights.shape().clone(), dw)?,
            Tensor::from_dims(&[self.out_channels()], db)?,
        ))
    }
}


#[cfg(test)]
mod tests {
    use super::reference::naive_conv;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_dims(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn ones_kernel_stride2_pad1() {
        let x = Tensor::<f64>::from_dims(&[1, 3, 3], vec![1.0; 9]).unwrap();
        let w = Tensor::from_dims(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let layer = ConvLayer::new(w, Tensor::from_dims(&[1], vec![0.0]).unwrap(), vec![2, 2], vec![1, 1]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let x = Tensor::<f64>::from_dims(&[2, 5, 4], (0..40).map(f64::from).collect()).unwrap();
        let w = Tensor::zeros(Shape::new(vec![3, 2, 3, 3]).unwrap());
        let b = Tensor::from_dims(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = ConvLayer::new(w, b, vec![2, 2], vec![1, 1]).unwrap().forward(&x).unwrap();
        assert_eq!(y.dims(), &[3, 3, 2]);
        for (c, chunk) in y.data().chunks(6).enumerate() {
            assert!(chunk.iter().all(|&v| v == [0.5, -1.0, 2.0][c]));
        }
    }

    #[test]
    fn extent_formula_six_to_three() {
        assert_eq!(conv_out_extent(6, 3, 2, 1), Some(3));
        assert_eq!(conv_out_extent(1, 3, 2, 0), None);
        assert_eq!(conv_transpose_out_extent(4, 3, 2), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[1, 6, 6]);
        let w = rand_tensor(&mut rng, &[1, 1, 3, 3]);
        let b = rand_tensor(&mut rng, &[1]);
        let layer = ConvLayer::new(w.clone(), b.clone(), vec![2, 2], vec![1, 1]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 3, 3]);
        let oracle = naive_conv(&x, &w, &b, &[2, 2], &[1, 1]);
        assert_eq!(oracle.dims(), y.dims());
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let x = Tensor::<f64>::from_dims(&[1, 1, 1], vec![1.0]).unwrap();
        let w = Tensor::from_dims(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let layer = ConvLayer::new(w, Tensor::from_dims(&[1], vec![0.0]).unwrap(), vec![1, 1], vec![0, 0]).unwrap();
        assert!(matches!(layer.forward(&x), Err(Error::ShapeMismatch(_))));
        let wrong_ch = Tensor::<f64>::from_dims(&[2, 3, 3], vec![0.0; 18]).unwrap();
        assert!(layer.forward(&wrong_ch).is_err());
    }

    #[test]
    fn transposed_zero_input_gives_bias() {
        let w = Tensor::<f64>::from_dims(&[2, 1, 3, 3], vec![0.3; 18]).unwrap();
        let b = Tensor::from_dims(&[1], vec![1.25]).unwrap();
        let layer = TransposedConvLayer::new(w, b, vec![2, 2]).unwrap();
        let x = Tensor::zeros(Shape::new(vec![2, 4, 3]).unwrap());
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 9, 7]);
        assert!(y.data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn matches_naive_reference_exhaustively() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cases = 0;
        for rank in [2usize, 3] {
            for ext in 1..=5usize {
                for ic in 1..=3usize {
                    for oc in [1usize, 3] {
                        for (stride, pad) in [(1usize, 0usize), (1, 1), (2, 1), (2, 0)] {
                            let k = 3usize;
                            if ext + 2 * pad < k {
                                continue;
                            }
                            let mut xd = vec![ic];
                            xd.extend(std::iter::repeat_n(ext, rank));
                            // vary one axis so the axes are not interchangeable
                            xd[1] = (ext + 1).min(5);
                            let mut wd = vec![oc, ic];
                            wd.extend(std::iter::repeat_n(k, rank));
                            let x = rand_tensor(&mut rng, &xd);
                            let w = rand_tensor(&mut rng, &wd);
                            let b = rand_tensor(&mut rng, &[oc]);
                            let s = vec![stride; rank];
                            let p = vec![pad; rank];
                            let layer = ConvLayer::new(w.clone(), b.clone(), s.clone(), p.clone()).unwrap();
                            let got = layer.forward(&x).unwrap();
                            let want = naive_conv(&x, &w, &b, &s, &p);
                            assert_eq!(got.shape(), want.shape());
                            for (g, r) in got.data().iter().zip(want.data()) {
                                assert!((g - r).abs() <= 1e-12, "{g} vs {r}");
                            }
                            cases += 1;
                        }
                    }
                }
            }
        }
        assert!(cases > 100);
    }

    #[test]
    fn transposed_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..40 {
            let rank = 2 + case % 2;
            let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let stride: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..3)).collect();
            let small: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..5)).collect();
            let big: Vec<usize> = (0..rank).map(|a| (small[a] - 1) * stride[a] + 3).collect();
            let mut wd = vec![co, ci];
            wd.extend(vec![3; rank]);
            let w = rand_tensor(&mut rng, &wd);
            let zero_o = Tensor::zeros(Shape::new(vec![co]).unwrap());
            let zero_i = Tensor::zeros(Shape::new(vec![ci]).unwrap());
            let conv = ConvLayer::new(w.clone(), zero_o, stride.clone(), vec![0; rank]).unwrap();
            let convt = TransposedConvLayer::new(w, zero_i, stride).unwrap();
            let mut xd = vec![ci];
            xd.extend(&big);
            let mut yd = vec![co];
            yd.extend(&small);
            let x = rand_tensor(&mut rng, &xd);
            let y = rand_tensor(&mut rng, &yd);
            let lhs = dot(&conv.forward(&x).unwrap(), &y);
            let rhs = dot(&x, &convt.forward(&y).unwrap());
            assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
        }
    }
}
