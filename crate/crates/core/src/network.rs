//! Siamese trunk with transformation-invariant pooling.
//!
//! Every transformed instance of a sample runs through the same trunk
//! parameters. The trunk ends in a flat feature vector per instance; the
//! network then keeps, per feature, the maximum over the transformation axis
//! and feeds those invariant features to the head. The MIL baseline instead
//! runs trunk and head per instance and takes the maximum over class logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Dropout, Linear, MaxPool2d, Mode, Param, Relu};
use crate::scalar::Scalar;
use crate::tensor::{IndexTensor, Tensor};
use crate::transform::TransformSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { channels: usize, kernel: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Linear { units: usize },
    Dropout { rate: f64 },
}

/// Declarative layer stack, split at the pooling-over-transformations step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkTopology {
    /// Side length of the square single-channel input.
    pub input_size: usize,
    pub trunk: Vec<LayerSpec>,
    pub head: Vec<LayerSpec>,
    pub n_classes: usize,
}

impl NetworkTopology {
    /// conv/relu/pool blocks with the given widths, a `features`-unit linear
    /// layer with relu, then dropout and the class layer.
    pub fn conv_stack(input_size: usize, channels: &[usize], features: usize, dropout: f64, n_classes: usize) -> Self {
        let mut trunk = Vec::new();
        for &c in channels {
            trunk.push(LayerSpec::Conv { channels: c, kernel: 3 });
            trunk.push(LayerSpec::Relu);
            trunk.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
        }
        trunk.push(LayerSpec::Linear { units: features });
        trunk.push(LayerSpec::Relu);
        Self {
            input_size,
            trunk,
            head: vec![LayerSpec::Dropout { rate: dropout }, LayerSpec::Linear { units: n_classes }],
            n_classes,
        }
    }

    /// The full-size rotated-MNIST network: 40/80/160 channels, 5120 features.
    pub fn table1(n_classes: usize) -> Self {
        Self::conv_stack(32, &[40, 80, 160], 5120, 0.5, n_classes)
    }

    /// Same layer sequence with 8/16/32 channels and 256 features.
    pub fn desk(n_classes: usize) -> Self {
        Self::conv_stack(32, &[8, 16, 32], 256, 0.5, n_classes)
    }

    /// 12x12 input network small enough for exhaustive finite differences.
    pub fn mini(n_classes: usize) -> Self {
        Self::conv_stack(12, &[2, 3], 6, 0.5, n_classes)
    }

    pub fn without_dropout(mut self) -> Self {
        self.head.retain(|l| !matches!(l, LayerSpec::Dropout { .. }));
        self
    }

    /// Per-instance activation shapes (without the batch axis) after every
    /// trunk layer, starting with the input `[1, S, S]`.
    pub fn trunk_trace(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = vec![1, self.input_size, self.input_size];
        let mut trace = vec![shape.clone()];
        for spec in &self.trunk {
            shape = next_shape(spec, &shape)?;
            trace.push(shape.clone());
        }
        Ok(trace)
    }

    /// Width of the trunk's flat feature vector.
    pub fn n_features(&self) -> Result<usize> {
        let trace = self.trunk_trace()?;
        Ok(trace.last().expect("trace starts with the input").iter().product())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.n_classes == 0 {
            return Err(Error::invalid("input size and class count must be positive"));
        }
        let trace = self.trunk_trace()?;
        let last = trace.last().expect("non-empty");
        if last.len() != 1 && last[1..].iter().any(|&d| d != 1) {
            return Err(Error::invalid(format!(
                "trunk must end in a flat feature vector, ends in {last:?}"
            )));
        }
        let mut width = vec![self.n_features()?];
        for spec in &self.head {
            if matches!(spec, LayerSpec::Conv { .. } | LayerSpec::MaxPool { .. }) {
                return Err(Error::invalid("head layers must act on flat vectors"));
            }
            width = next_shape(spec, &width)?;
        }
        if width != [self.n_classes] {
            return Err(Error::invalid(format!(
                "head ends with width {width:?}, expected {} classes",
                self.n_classes
            )));
        }
        Ok(())
    }
}

fn next_shape(spec: &LayerSpec, shape: &[usize]) -> Result<Vec<usize>> {
    Ok(match spec {
        LayerSpec::Conv { channels, kernel } => {
            let [_, h, w] = *shape else {
                return Err(Error::invalid("convolution after a flat layer"));
            };
            if h < *kernel || w < *kernel || *kernel == 0 || *channels == 0 {
                return Err(Error::invalid(format!("{kernel}x{kernel} convolution on {h}x{w}")));
            }
            vec![*channels, h - kernel + 1, w - kernel + 1]
        }
        LayerSpec::MaxPool { kernel, stride } => {
            let [c, h, w] = *shape else {
                return Err(Error::invalid("pooling after a flat layer"));
            };
            if h < *kernel || w < *kernel || *kernel == 0 || *stride == 0 {
                return Err(Error::invalid(format!("{kernel}x{kernel} pooling on {h}x{w}")));
            }
            vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
        }
        LayerSpec::Linear { units } => {
            if *units == 0 {
                return Err(Error::invalid("linear layer with zero units"));
            }
            vec![*units]
        }
        LayerSpec::Relu => shape.to_vec(),
        LayerSpec::Dropout { rate } => {
            if !(0.0..1.0).contains(rate) {
                return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
            }
            shape.to_vec()
        }
    })
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Relu(Relu<T>),
    MaxPool(MaxPool2d),
    Linear(Linear<T>),
    Dropout(Dropout<T>),
}

impl<T: Scalar> Layer<T> {
    fn build<R: Rng + ?Sized>(spec: &LayerSpec, input: &[usize], rng: &mut R) -> Result<Self> {
        Ok(match spec {
            LayerSpec::Conv { channels, kernel } => Layer::Conv(Conv2d::new(input[0], *channels, *kernel, rng)?),
            LayerSpec::Relu => Layer::Relu(Relu::default()),
            LayerSpec::MaxPool { kernel, stride } => Layer::MaxPool(MaxPool2d::new(*kernel, *stride)?),
            LayerSpec::Linear { units } => Layer::Linear(Linear::new(input.iter().product(), *units, rng)?),
            LayerSpec::Dropout { rate } => Layer::Dropout(Dropout::new(*rate)?),
        })
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, x: Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::Relu(l) => l.forward(x),
            Layer::MaxPool(l) => l.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::Dropout(l) => l.forward(x, mode, rng),
        }
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::MaxPool(l) => l.backward(grad),
            Layer::Linear(l) => l.backward(grad),
            Layer::Dropout(l) => l.backward(grad),
        }
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        match self {
            Layer::Conv(l) => vec![("kernels", &l.kernels), ("bias", &l.bias)],
            Layer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            _ => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(l) => vec![&mut l.kernels, &mut l.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => vec![],
        }
    }
}

/// `g[n, k] = max_phi features[n, phi, k]` with the lowest maximizing index.
pub fn ti_pool_forward<T: Scalar>(features: &Tensor<T>) -> Result<(Tensor<T>, IndexTensor)> {
    if features.rank() != 3 {
        return Err(Error::shape(format!(
            "expected [N, |Phi|, K] features, got {:?}",
            features.shape()
        )));
    }
    features.reduce_max(1)
}

/// Routes `grad_g[n, k]` to branch `argmax[n, k]`; every other branch gets 0.
pub fn ti_pool_backward<T: Scalar>(grad_g: &Tensor<T>, argmax: &IndexTensor, n_phi: usize) -> Result<Tensor<T>> {
    if grad_g.shape() != argmax.shape() || grad_g.rank() != 2 {
        return Err(Error::shape(format!(
            "gradient {:?} does not match argmax {:?}",
            grad_g.shape(),
            argmax.shape()
        )));
    }
    let (n, k) = (grad_g.shape()[0], grad_g.shape()[1]);
    let mut out = Tensor::zeros(&[n, n_phi, k])?;
    let buf = out.data_mut();
    for (i, (&g, &phi)) in grad_g.data().iter().zip(argmax.data()).enumerate() {
        if phi >= n_phi {
            return Err(Error::invalid(format!("argmax {phi} >= |Phi| = {n_phi}")));
        }
        let (s, f) = (i / k, i % k);
        buf[(s * n_phi + phi) * k + f] = g;
    }
    Ok(out)
}

/// Where the maximum over transformed instances is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Per trunk feature, before the head (TI-pooling).
    Features,
    /// Per class logit, after the whole network (MIL).
    Outputs,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    pooling: Pooling,
    n_phi: usize,
    trunk_out_shape: Vec<usize>,
    argmax: IndexTensor,
}

/// Transform-invariant output of one requested feature.
#[derive(Debug, Clone)]
pub struct CanonicalInstance<T> {
    pub feature: usize,
    pub transform_index: usize,
    pub activation: T,
    pub image: Tensor<T>,
}

/// Network with one trunk parameter set shared across all transform branches.
#[derive(Debug, Clone)]
pub struct Network<T> {
    topology: NetworkTopology,
    transforms: TransformSet,
    trunk: Vec<Layer<T>>,
    head: Vec<Layer<T>>,
    mode: Mode,
    cache: Option<ForwardCache>,
}

impl<T: Scalar> Network<T> {
    pub fn new<R: Rng + ?Sized>(topology: NetworkTopology, transforms: TransformSet, rng: &mut R) -> Result<Self> {
        topology.validate()?;
        let trace = topology.trunk_trace()?;
        let trunk = topology
            .trunk
            .iter()
            .zip(&trace)
            .map(|(spec, shape)| Layer::build(spec, shape, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut width = vec![topology.n_features()?];
        let mut head = Vec::with_capacity(topology.head.len());
        for spec in &topology.head {
            head.push(Layer::build(spec, &width, rng)?);
            width = next_shape(spec, &width)?;
        }
        Ok(Self {
            topology,
            transforms,
            trunk,
            head,
            mode: Mode::Train,
            cache: None,
        })
    }

    pub fn topology(&self) -> &NetworkTopology {
        &self.topology
    }

    pub fn transforms(&self) -> &TransformSet {
        &self.transforms
    }

    pub fn n_phi(&self) -> usize {
        self.transforms.len()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn trunk_layers(&self) -> &[Layer<T>] {
        &self.trunk
    }

    pub fn head_layers(&self) -> &[Layer<T>] {
        &self.head
    }

    /// Named parameters in a fixed order: trunk layers, then head layers.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (part, layers) in [("trunk", &self.trunk), ("head", &self.head)] {
            for (i, layer) in layers.iter().enumerate() {
                for (name, p) in layer.params() {
                    out.push((format!("{part}.{i}.{name}"), p));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.trunk
            .iter_mut()
            .chain(self.head.iter_mut())
            .flat_map(Layer::params_mut)
            .collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<(usize, usize)> {
        let s = self.topology.input_size;
        match *batch.shape() {
            [n, p, 1, h, w] if p == self.n_phi() && h == s && w == s => Ok((n, p)),
            ref shape => Err(Error::shape(format!(
                "batch {shape:?} does not match [N, {}, 1, {s}, {s}]",
                self.n_phi()
            ))),
        }
    }

    fn run_trunk<R: Rng + ?Sized>(&mut self, batch: Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        let [n, p, c, h, w] = *batch.shape() else { unreachable!("checked by caller") };
        let mut x = batch.reshape(&[n * p, c, h, w])?;
        for layer in &mut self.trunk {
            x = layer.forward(x, self.mode, rng)?;
        }
        Ok(x)
    }

    fn run_head<R: Rng + ?Sized>(&mut self, mut x: Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        for layer in &mut self.head {
            x = layer.forward(x, self.mode, rng)?;
        }
        Ok(x)
    }

    /// Trunk features `[N, |Phi|, K]` of every transformed instance.
    pub fn features<R: Rng + ?Sized>(&mut self, batch: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        let (n, p) = self.check_batch(batch)?;
        self.cache = None;
        let f = self.run_trunk(batch.clone(), rng)?;
        let k = f.len() / (n * p);
        f.reshape(&[n, p, k])
    }

    /// TI-pooling forward pass: `[N, |Phi|, 1, H, W]` to logits `[N, C]`.
    pub fn forward<R: Rng + ?Sized>(&mut self, batch: Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        let (n, p) = self.check_batch(&batch)?;
        self.cache = None;
        let f = self.run_trunk(batch, rng)?;
        let trunk_out_shape = f.shape().to_vec();
        let k = f.len() / (n * p);
        let (g, argmax) = ti_pool_forward(&f.reshape(&[n, p, k])?)?;
        let logits = self.run_head(g, rng)?;
        self.cache = Some(ForwardCache {
            pooling: Pooling::Features,
            n_phi: p,
            trunk_out_shape,
            argmax,
        });
        Ok(logits)
    }

    /// MIL forward pass: the whole network per instance, then the maximum of
    /// each class logit over instances.
    pub fn forward_mil<R: Rng + ?Sized>(&mut self, batch: Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        let (n, p) = self.check_batch(&batch)?;
        self.cache = None;
        let f = self.run_trunk(batch, rng)?;
        let trunk_out_shape = f.shape().to_vec();
        let k = f.len() / (n * p);
        let out = self.run_head(f.reshape(&[n * p, k])?, rng)?;
        let c = out.shape()[1];
        let (logits, argmax) = out.reshape(&[n, p, c])?.reduce_max(1)?;
        self.cache = Some(ForwardCache {
            pooling: Pooling::Outputs,
            n_phi: p,
            trunk_out_shape,
            argmax,
        });
        Ok(logits)
    }

    pub fn forward_with<R: Rng + ?Sized>(&mut self, pooling: Pooling, batch: Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        match pooling {
            Pooling::Features => self.forward(batch, rng),
            Pooling::Outputs => self.forward_mil(batch, rng),
        }
    }

    /// Branch indices chosen by the last forward pass: `[N, K]` for
    /// TI-pooling, `[N, C]` for MIL.
    pub fn last_argmax(&self) -> Option<&IndexTensor> {
        self.cache.as_ref().map(|c| &c.argmax)
    }

    /// Back-propagates `grad_logits` and accumulates into every parameter's
    /// gradient. Trunk parameters only receive gradient through each
    /// sample's maximizing branches.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<()> {
        let cache = self.cache.take().ok_or(Error::State("network backward"))?;
        let n = cache.argmax.shape()[0];
        let grad_trunk = match cache.pooling {
            Pooling::Features => {
                let mut g = grad_logits.clone();
                for layer in self.head.iter_mut().rev() {
                    g = layer.backward(&g)?;
                }
                ti_pool_backward(&g, &cache.argmax, cache.n_phi)?
            }
            Pooling::Outputs => {
                let routed = ti_pool_backward(grad_logits, &cache.argmax, cache.n_phi)?;
                let c = grad_logits.shape()[1];
                let mut g = routed.reshape(&[n * cache.n_phi, c])?;
                for layer in self.head.iter_mut().rev() {
                    g = layer.backward(&g)?;
                }
                g
            }
        };
        let mut g = grad_trunk.reshape(&cache.trunk_out_shape)?;
        for layer in self.trunk.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(())
    }

    /// For each requested feature, the transformed copy of `image` on which
    /// that feature responds most strongly.
    pub fn canonical_instances<R: Rng + ?Sized>(
        &mut self,
        image: &Tensor<T>,
        feature_ids: &[usize],
        rng: &mut R,
    ) -> Result<Vec<CanonicalInstance<T>>> {
        let s = self.topology.input_size;
        if image.shape() != [s, s] {
            return Err(Error::shape(format!("image {:?} is not {s}x{s}", image.shape())));
        }
        let k = self.topology.n_features()?;
        if let Some(&bad) = feature_ids.iter().find(|&&f| f >= k) {
            return Err(Error::invalid(format!("feature id {bad} >= {k} features")));
        }
        let batch = self.transforms.stack(&image.clone().reshape(&[1, s, s])?)?;
        let mode = self.mode;
        self.mode = Mode::Eval;
        let features = self.features(&batch, rng);
        self.mode = mode;
        let (g, argmax) = ti_pool_forward(&features?)?;
        feature_ids
            .iter()
            .map(|&f| {
                let idx = argmax.data()[f];
                let t = self.transforms.get(idx).expect("argmax below |Phi|");
                Ok(CanonicalInstance {
                    feature: f,
                    transform_index: idx,
                    activation: g.data()[f],
                    image: t.apply(image)?,
                })
            })
            .collect()
    }
}
