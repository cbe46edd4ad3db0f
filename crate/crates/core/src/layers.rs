//! Forward and backward kernels for the network's operators, plus stateful
//! layer wrappers that cache what their backward pass needs.
//!
//! Image tensors are `[N, C, H, W]`. Convolution is "valid" (no padding) and
//! implemented as per-image patch extraction followed by a GEMM.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape()).expect("shape already validated");
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }

    fn accumulate(&mut self, g: &[T]) {
        for (acc, &v) in self.grad.data_mut().iter_mut().zip(g) {
            *acc += v;
        }
    }
}

/// Uniform init in `+-sqrt(6 / fan_in)`.
pub fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}

fn dims4(x: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(format!("{what} expects [N, C, H, W], got {s:?}"))),
    }
}

fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, cols: &mut [T]) {
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let mut row = 0;
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for i in 0..ho {
                    let src = &plane[(i + u) * w + v..(i + u) * w + v + wo];
                    dst[i * wo..(i + 1) * wo].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, img: &mut [T]) {
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for i in 0..ho {
                    let dst = &mut plane[(i + u) * w + v..(i + u) * w + v + wo];
                    for (d, &s) in dst.iter_mut().zip(&src[i * wo..(i + 1) * wo]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out[n,o,i,j] = bias[o] + sum_{c,u,v} kernels[o,c,u,v] * x[n,c,i+u,j+v]`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "conv2d")?;
    let (o, kc, kh, kw) = dims4(kernels, "conv2d kernels")?;
    if kc != c {
        return Err(Error::shape(format!("input has {c} channels, kernels expect {kc}")));
    }
    if bias.shape() != [o] {
        return Err(Error::shape(format!("bias {:?} for {o} output channels", bias.shape())));
    }
    if h < kh || w < kw {
        return Err(Error::shape(format!("{h}x{w} input is smaller than the {kh}x{kw} kernel")));
    }
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let (patch, spatial) = (c * kh * kw, ho * wo);
    let mut cols = vec![T::zero(); patch * spatial];
    let mut out = vec![T::zero(); n * o * spatial];
    for (img, dst) in x.data().chunks_exact(c * h * w).zip(out.chunks_exact_mut(o * spatial)) {
        im2col(img, c, h, w, kh, kw, &mut cols);
        for (plane, &b) in dst.chunks_exact_mut(spatial).zip(bias.data()) {
            plane.fill(b);
        }
        T::gemm(o, patch, spatial, T::one(), kernels.data(), (patch, 1), &cols, (spatial, 1), T::one(), dst, (spatial, 1));
    }
    Tensor::from_vec(&[n, o, ho, wo], out)
}

/// Gradients of [`conv2d_forward`] with respect to input, kernels and bias.
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(x: &Tensor<T>, kernels: &Tensor<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let (n, c, h, w) = dims4(x, "conv2d")?;
    let (o, _, kh, kw) = dims4(kernels, "conv2d kernels")?;
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    if grad_out.shape() != [n, o, ho, wo] {
        return Err(Error::shape(format!(
            "grad_out {:?} does not match forward output [{n}, {o}, {ho}, {wo}]",
            grad_out.shape()
        )));
    }
    let (patch, spatial) = (c * kh * kw, ho * wo);
    let mut cols = vec![T::zero(); patch * spatial];
    let mut gcols = vec![T::zero(); patch * spatial];
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); kernels.len()];
    let mut gb = vec![T::zero(); o];
    let images = x.data().chunks_exact(c * h * w);
    let grads = grad_out.data().chunks_exact(o * spatial);
    for ((img, gout), gimg) in images.zip(grads).zip(gx.chunks_exact_mut(c * h * w)) {
        im2col(img, c, h, w, kh, kw, &mut cols);
        // gk += gout [o, spatial] * cols^T [spatial, patch]
        T::gemm(o, spatial, patch, T::one(), gout, (spatial, 1), &cols, (1, spatial), T::one(), &mut gk, (patch, 1));
        // gcols = kernels^T [patch, o] * gout [o, spatial]
        T::gemm(patch, o, spatial, T::one(), kernels.data(), (1, patch), gout, (spatial, 1), T::zero(), &mut gcols, (spatial, 1));
        col2im_add(&gcols, c, h, w, kh, kw, gimg);
        for (b, plane) in gb.iter_mut().zip(gout.chunks_exact(spatial)) {
            *b += plane.iter().fold(T::zero(), |acc, &v| acc + v);
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(x.shape(), gx)?,
        kernels: Tensor::from_vec(kernels.shape(), gk)?,
        bias: Tensor::from_vec(&[o], gb)?,
    })
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v.max(T::zero())).collect())
        .expect("same shape")
}

/// Passes gradient where `x > 0`; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape(format!("relu grad {:?} vs input {:?}", grad_out.shape(), x.shape())));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Spatial max pooling output with the flat input offset of every maximum.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = dims4(x, "maxpool")?;
    if h < kernel || w < kernel {
        return Err(Error::shape(format!("{h}x{w} input is smaller than the pooling window {kernel}")));
    }
    let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best_off = base + i * stride * w + j * stride;
                let mut best = data[best_off];
                // row-major scan, strict comparison keeps the first maximum
                for u in 0..kernel {
                    for v in 0..kernel {
                        let off = base + (i * stride + u) * w + j * stride + v;
                        if data[off] > best {
                            best = data[off];
                            best_off = off;
                        }
                    }
                }
                out.push(best);
                arg.push(best_off);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, ho, wo], out)?, arg))
}

/// Routes each output gradient to its argmax input position, summing
/// collisions from overlapping windows.
pub fn maxpool_backward<T: Scalar>(grad_out: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape("pooling gradient does not match cached argmax"));
    }
    let mut gx = Tensor::zeros(input_shape)?;
    let buf = gx.data_mut();
    for (&g, &off) in grad_out.data().iter().zip(argmax) {
        buf[off] += g;
    }
    Ok(gx)
}

fn as_matrix<T: Scalar>(x: &Tensor<T>) -> (usize, usize) {
    let n = x.shape()[0];
    (n, x.len() / n)
}

/// `y = x W^T + b` for `x: [N, in]` (trailing axes are flattened),
/// `W: [out, in]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, inp) = as_matrix(x);
    let (out, w_in) = (weight.shape()[0], weight.shape()[1]);
    if inp != w_in {
        return Err(Error::shape(format!("input width {inp} but weight expects {w_in}")));
    }
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(bias.data());
    }
    T::gemm(n, inp, out, T::one(), x.data(), (inp, 1), weight.data(), (1, inp), T::one(), &mut y, (out, 1));
    Tensor::from_vec(&[n, out], y)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (n, inp) = as_matrix(x);
    let out = weight.shape()[0];
    if grad_out.shape() != [n, out] {
        return Err(Error::shape(format!("grad_out {:?} for output [{n}, {out}]", grad_out.shape())));
    }
    let mut gx = vec![T::zero(); n * inp];
    T::gemm(n, out, inp, T::one(), grad_out.data(), (out, 1), weight.data(), (inp, 1), T::zero(), &mut gx, (inp, 1));
    let mut gw = vec![T::zero(); out * inp];
    T::gemm(out, n, inp, T::one(), grad_out.data(), (1, out), x.data(), (inp, 1), T::zero(), &mut gw, (inp, 1));
    let mut gb = vec![T::zero(); out];
    for row in grad_out.data().chunks_exact(out) {
        for (b, &g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(LinearGrads {
        input: Tensor::from_vec(x.shape(), gx)?,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        bias: Tensor::from_vec(&[out], gb)?,
    })
}

/// Numerically stable softmax over the last axis of `[N, C]` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!("softmax expects [N, C], got {:?}", logits.shape())));
    }
    let c = logits.shape()[1];
    let mut p = logits.data().to_vec();
    for row in p.chunks_exact_mut(c) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_vec(logits.shape(), p)
}

/// Mean cross-entropy of softmax probabilities against class labels.
pub fn softmax_xent_forward<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let probs = softmax(logits)?;
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut loss = T::zero();
    for (&label, logit_row) in labels.iter().zip(logits.data().chunks_exact(c)) {
        if label >= c {
            return Err(Error::invalid(format!("label {label} out of range for {c} classes")));
        }
        // log p = z_label - max - log(sum exp(z - max)), exact for saturated rows
        let m = logit_row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = logit_row.iter().fold(T::zero(), |a, &z| a + (z - m).exp()).ln();
        loss -= logit_row[label] - m - lse;
    }
    Ok((loss / T::from_usize(n).expect("batch size fits"), probs))
}

/// `(p - onehot) / N`.
pub fn softmax_xent_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    let scale = T::one() / T::from_usize(n).expect("batch size fits");
    let mut g = probs.data().to_vec();
    for (row, &label) in g.chunks_exact_mut(c).zip(labels) {
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Tensor::from_vec(probs.shape(), g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub kernels: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        if kernel == 0 {
            return Err(Error::invalid("kernel size must be at least 1"));
        }
        let fan_in = in_channels * kernel * kernel;
        let kernels = he_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng)?;
        Ok(Self::from_params(kernels, Tensor::zeros(&[out_channels])?))
    }

    pub fn from_params(kernels: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            kernels: Param::new(kernels),
            bias: Param::new(bias),
            input: None,
        }
    }

    pub fn forward(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        let y = conv2d_forward(&x, &self.kernels.value, &self.bias.value)?;
        self.input = Some(x);
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or(Error::State("conv backward"))?;
        let g = conv2d_backward(&x, &self.kernels.value, grad_out)?;
        self.kernels.accumulate(g.kernels.data());
        self.bias.accumulate(g.bias.data());
        Ok(g.input)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn forward(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        let y = relu_forward(&x);
        self.input = Some(x);
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or(Error::State("relu backward"))?;
        relu_backward(&x, grad_out)
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("pooling kernel and stride must be at least 1"));
        }
        Ok(Self { kernel, stride, cache: None })
    }

    pub fn forward<T: Scalar>(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        let (y, arg) = maxpool_forward(&x, self.kernel, self.stride)?;
        self.cache = Some((arg, x.shape().to_vec()));
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (arg, shape) = self.cache.take().ok_or(Error::State("maxpool backward"))?;
        maxpool_backward(grad_out, &arg, &shape)
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        let weight = he_uniform(&[outputs, inputs], inputs, rng)?;
        Ok(Self::from_params(weight, Tensor::zeros(&[outputs])?))
    }

    pub fn from_params(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            input: None,
        }
    }

    pub fn forward(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        let y = linear_forward(&x, &self.weight.value, &self.bias.value)?;
        self.input = Some(x);
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or(Error::State("linear backward"))?;
        let g = linear_backward(&x, &self.weight.value, grad_out)?;
        self.weight.accumulate(g.weight.data());
        self.bias.accumulate(g.bias.data());
        Ok(g.input)
    }
}

/// Inverted dropout: surviving activations are scaled by `1 / (1 - rate)`
/// at train time, so eval mode is the identity.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    pub rate: f64,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate, mask: None })
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, x: Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        if mode == Mode::Eval || self.rate == 0.0 {
            self.mask = Some(vec![T::one(); x.len()]);
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - self.rate));
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.gen::<f64>() >= self.rate { keep } else { T::zero() })
            .collect();
        let mut y = x;
        for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.mask = Some(mask);
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.take().ok_or(Error::State("dropout backward"))?;
        if mask.len() != grad_out.len() {
            return Err(Error::shape("dropout gradient does not match cached mask"));
        }
        let data = grad_out.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
        Tensor::from_vec(grad_out.shape(), data)
    }
}

/// Softmax followed by mean cross-entropy.
#[derive(Debug, Clone, Default)]
pub struct SoftmaxXent<T> {
    cache: Option<(Tensor<T>, Vec<usize>)>,
}

impl<T: Scalar> SoftmaxXent<T> {
    pub fn forward(&mut self, logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let (loss, probs) = softmax_xent_forward(logits, labels)?;
        self.cache = Some((probs, labels.to_vec()));
        Ok(loss)
    }

    pub fn probabilities(&self) -> Option<&Tensor<T>> {
        self.cache.as_ref().map(|(p, _)| p)
    }

    pub fn backward(&mut self) -> Result<Tensor<T>> {
        let (probs, labels) = self.cache.take().ok_or(Error::State("softmax backward"))?;
        softmax_xent_backward(&probs, &labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0)).unwrap()
    }

    /// Central-difference derivative of `loss` along every element of `x`.
    fn numeric_grad(x: &Tensor<f64>, mut loss: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let h = 1e-5;
        let mut probe = x.clone();
        let mut g = vec![0.0; x.len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = loss(&probe);
            probe.data_mut()[i] = orig - h;
            let down = loss(&probe);
            probe.data_mut()[i] = orig;
            *gi = (up - down) / (2.0 * h);
        }
        Tensor::from_vec(x.shape(), g).unwrap()
    }

    fn assert_close(analytic: &Tensor<f64>, numeric: &Tensor<f64>, tol: f64) {
        assert_eq!(analytic.shape(), numeric.shape());
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
            assert!(rel <= tol, "element {i}: analytic {a} numeric {n}");
        }
    }

    /// Weighted sum of an output with fixed random weights, as a scalar loss.
    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    fn conv_loop(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (n, c, h, w) = dims4(x, "").unwrap();
        let (o, _, kh, kw) = dims4(k, "").unwrap();
        let (ho, wo) = (h - kh + 1, w - kw + 1);
        let mut out = Tensor::zeros(&[n, o, ho, wo]).unwrap();
        for ni in 0..n {
            for oi in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = b.data()[oi];
                        for ci in 0..c {
                            for u in 0..kh {
                                for v in 0..kw {
                                    acc += k.get(&[oi, ci, u, v]).unwrap() * x.get(&[ni, ci, i + u, j + v]).unwrap();
                                }
                            }
                        }
                        let off = out.offset(&[ni, oi, i, j]).unwrap();
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_delta_kernel_sifts_center() {
        let x = random(&[1, 1, 3, 3], 1);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        k.data_mut()[4] = 1.0;
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[1]).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], x.data()[4]);
    }

    #[test]
    fn conv_constant_input() {
        let x = Tensor::new(&[1, 1, 5, 5], 2.0f64).unwrap();
        let k = Tensor::new(&[1, 1, 3, 3], 1.0).unwrap();
        let b = Tensor::new(&[1], 0.5).unwrap();
        let y = conv2d_forward(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0 * 2.0 + 0.5));
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = random(&[2, 3, 5, 6], 2);
        let k = random(&[2, 3, 3, 2], 3);
        let b = random(&[2], 4);
        let fast = conv2d_forward(&x, &k, &b).unwrap();
        let slow = conv_loop(&x, &k, &b);
        assert_close(&fast, &slow, 1e-6);
        let x = random(&[1, 1, 5, 5], 5);
        let k = random(&[2, 1, 3, 3], 6);
        assert_close(&conv2d_forward(&x, &k, &b).unwrap(), &conv_loop(&x, &k, &b), 1e-6);
    }

    #[test]
    fn conv_rejects_small_input() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]).unwrap();
        let k = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        assert!(matches!(conv2d_forward(&x, &k, &Tensor::zeros(&[1]).unwrap()), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let x = random(&[2, 2, 4, 4], 7);
        let k = random(&[3, 2, 3, 3], 8);
        let g = conv2d_backward(&x, &k, &Tensor::zeros(&[2, 3, 2, 2]).unwrap()).unwrap();
        assert!(g.input.data().iter().chain(g.kernels.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_unit_kernel() {
        let x = random(&[1, 1, 4, 4], 9);
        let k = Tensor::new(&[1, 1, 1, 1], 0.7).unwrap();
        let gout = random(&[1, 1, 4, 4], 10);
        let g = conv2d_backward(&x, &k, &gout).unwrap();
        for (gi, go) in g.input.data().iter().zip(gout.data()) {
            assert!((gi - go * 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_backward_before_forward_is_state_error() {
        let mut layer = Conv2d::<f64>::new(1, 1, 3, &mut rng(0)).unwrap();
        let g = Tensor::zeros(&[1, 1, 1, 1]).unwrap();
        assert!(matches!(layer.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = random(&[2, 2, 6, 5], 11);
        let k = random(&[3, 2, 3, 3], 12);
        let b = random(&[3], 13);
        let w = random(&[2, 3, 4, 3], 14);
        let g = conv2d_backward(&x, &k, &w).unwrap();
        assert_close(&g.input, &numeric_grad(&x, |xp| dot(&conv2d_forward(xp, &k, &b).unwrap(), &w)), 1e-4);
        assert_close(&g.kernels, &numeric_grad(&k, |kp| dot(&conv2d_forward(&x, kp, &b).unwrap(), &w)), 1e-4);
        assert_close(&g.bias, &numeric_grad(&b, |bp| dot(&conv2d_forward(&x, &k, bp).unwrap(), &w)), 1e-4);
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::from_vec(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::new(&[3], 1.0).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_matches_finite_differences_away_from_kink() {
        let mut x = random(&[50], 15);
        for v in x.data_mut() {
            if v.abs() < 1e-3 {
                *v = 0.5;
            }
        }
        let w = random(&[50], 16);
        let g = relu_backward(&x, &w).unwrap();
        assert_close(&g, &numeric_grad(&x, |xp| dot(&relu_forward(xp), &w)), 1e-4);
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool_backward(&Tensor::new(&[1, 1, 1, 1], 1.0).unwrap(), &arg, x.shape()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);

        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![5.0f32, 5.0, 0.0, 0.0]).unwrap();
        let (y, arg) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(arg, vec![0]);

        let x = Tensor::<f32>::zeros(&[1, 1, 15, 15]).unwrap();
        assert_eq!(maxpool_forward(&x, 2, 2).unwrap().0.shape(), &[1, 1, 7, 7]);
    }

    #[test]
    fn maxpool_overlapping_windows_sum() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 4 { 9.0f64 } else { 0.0 }).unwrap();
        let (y, arg) = maxpool_forward(&x, 2, 1).unwrap();
        assert_eq!(y.data(), &[9.0; 4]);
        let g = maxpool_backward(&Tensor::new(&[1, 1, 2, 2], 1.0).unwrap(), &arg, x.shape()).unwrap();
        assert_eq!(g.data()[4], 4.0);
        assert_eq!(g.sum(), 4.0);
    }

    #[test]
    fn maxpool_matches_finite_differences() {
        let x = random(&[2, 2, 5, 4], 17);
        let w = random(&[2, 2, 2, 2], 18);
        let (_, arg) = maxpool_forward(&x, 2, 2).unwrap();
        let g = maxpool_backward(&w, &arg, x.shape()).unwrap();
        assert_close(&g, &numeric_grad(&x, |xp| dot(&maxpool_forward(xp, 2, 2).unwrap().0, &w)), 1e-4);
    }

    #[test]
    fn linear_examples() {
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0f64 } else { 0.0 }).unwrap();
        let x = random(&[2, 3], 19);
        assert_eq!(linear_forward(&x, &eye, &Tensor::zeros(&[3]).unwrap()).unwrap(), x);

        let gout = random(&[2, 3], 20);
        let g = linear_backward(&x, &eye, &gout).unwrap();
        for j in 0..3 {
            assert_eq!(g.bias.data()[j], gout.data()[j] + gout.data()[3 + j]);
        }
        let bad = Tensor::<f64>::zeros(&[2, 4]).unwrap();
        assert!(matches!(linear_forward(&bad, &eye, &Tensor::zeros(&[3]).unwrap()), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_matches_finite_differences() {
        let x = random(&[5, 3], 21);
        let wt = random(&[4, 3], 22);
        let b = random(&[4], 23);
        let w = random(&[5, 4], 24);
        let g = linear_backward(&x, &wt, &w).unwrap();
        assert_close(&g.input, &numeric_grad(&x, |p| dot(&linear_forward(p, &wt, &b).unwrap(), &w)), 1e-4);
        assert_close(&g.weight, &numeric_grad(&wt, |p| dot(&linear_forward(&x, p, &b).unwrap(), &w)), 1e-4);
        assert_close(&g.bias, &numeric_grad(&b, |p| dot(&linear_forward(&x, &wt, p).unwrap(), &w)), 1e-4);
    }

    #[test]
    fn dropout_identity_cases() {
        let x = random(&[10], 25);
        let mut d = Dropout::new(0.0).unwrap();
        assert_eq!(d.forward(x.clone(), Mode::Train, &mut rng(1)).unwrap(), x);
        let mut d = Dropout::new(0.5).unwrap();
        assert_eq!(d.forward(x.clone(), Mode::Eval, &mut rng(1)).unwrap(), x);
        assert_eq!(d.backward(&x).unwrap(), x);
        assert!(matches!(Dropout::<f32>::new(1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dropout_preserves_mean() {
        let n = 100_000;
        let x = Tensor::from_fn(&[n], |i| 1.0 + (i % 7) as f64).unwrap();
        let mut d = Dropout::new(0.5).unwrap();
        let y = d.forward(x.clone(), Mode::Train, &mut rng(42)).unwrap();
        let survived = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((survived - 0.5).abs() < 0.01, "survival {survived}");
        let (mx, my) = (x.sum() / n as f64, y.sum() / n as f64);
        assert!((my - mx).abs() / mx < 0.02);
        let g = d.backward(&Tensor::new(&[n], 1.0).unwrap()).unwrap();
        for (gv, yv) in g.data().iter().zip(y.data()) {
            assert_eq!(*gv == 0.0, *yv == 0.0);
        }
    }

    #[test]
    fn softmax_xent_examples() {
        let logits = Tensor::new(&[3, 10], 0.25f64).unwrap();
        let (loss, probs) = softmax_xent_forward(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        for row in probs.data().chunks(10) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let sat = Tensor::from_vec(&[1, 2], vec![100.0f64, 0.0]).unwrap();
        assert!(softmax_xent_forward(&sat, &[0]).unwrap().0 < 1e-6);
        assert!(matches!(softmax_xent_forward(&sat, &[2]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn softmax_xent_matches_finite_differences() {
        let logits = random(&[4, 10], 26).map(|v| 3.0 * v).unwrap();
        let labels = [3, 0, 9, 3];
        let (_, probs) = softmax_xent_forward(&logits, &labels).unwrap();
        let g = softmax_xent_backward(&probs, &labels).unwrap();
        assert_close(&g, &numeric_grad(&logits, |p| softmax_xent_forward(p, &labels).unwrap().0), 1e-4);
    }

    #[test]
    fn stateful_layers_accumulate() {
        let mut r = rng(3);
        let mut layer = Linear::<f64>::new(3, 2, &mut r).unwrap();
        let x = random(&[4, 3], 27);
        let gout = random(&[4, 2], 28);
        for _ in 0..2 {
            layer.forward(x.clone()).unwrap();
            layer.backward(&gout).unwrap();
        }
        let once = linear_backward(&x, &layer.weight.value, &gout).unwrap();
        for (a, b) in layer.weight.grad.data().iter().zip(once.weight.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
        layer.weight.zero_grad();
        assert!(layer.weight.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_bounded() {
        let mut r = rng(4);
        let layer = Conv2d::<f32>::new(2, 4, 3, &mut r).unwrap();
        let bound = (6.0f32 / 18.0).sqrt();
        assert!(layer.kernels.value.data().iter().all(|v| v.abs() <= bound));
        assert!(layer.bias.value.data().iter().all(|&v| v == 0.0));
    }
}
