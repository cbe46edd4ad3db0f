//! Double-precision finite-difference verification of every layer's
//! backward pass and of a whole two-branch network.
//!
//! Points where the loss has a kink inside the probe interval (a relu or a
//! max changing its selection) have no derivative to compare against.
//! Elementwise relu inputs with |x| < 1e-3 are skipped outright; elsewhere a
//! probe is skipped when its forward and backward one-sided slopes disagree.

use std::fmt;

use rand::{seq::index::sample, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tipool::layers::{Conv2d, Dropout, Linear, MaxPool2d, Relu, SoftmaxXent};
use tipool::{Mode, Network64, NetworkTopology, Tensor64, Transform, TransformSet};

use crate::error::Result;

pub const TOLERANCE: f64 = 1e-4;
const H: f64 = 1e-5;
const RELU_KINK: f64 = 1e-3;
const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scale {
    /// Every element of every block on a 12x12, two-branch network.
    #[default]
    Mini,
    /// A sample of elements per block on the full-width network.
    Full,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheckOptions {
    pub scale: Scale,
    pub seed: u64,
    /// Negate the convolution kernel gradients before comparing; the check
    /// must then fail.
    pub corrupt_conv: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(BlockReport::passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<32} {:>12} {:>8} {:>8}  status", "block", "max_rel_err", "checked", "skipped")?;
        for b in &self.blocks {
            let status = if b.passed() { "ok" } else { "FAIL" };
            writeln!(f, "{:<32} {:>12.3e} {:>8} {:>8}  {status}", b.name, b.max_rel_err, b.checked, b.skipped)?;
        }
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR)
}

/// Compares `analytic` against central differences of `loss` with respect to
/// the elements `which` of a value reached through `value`.
fn probe(
    name: &str,
    analytic: &[f64],
    which: &[usize],
    mut value: impl FnMut(usize, Option<f64>) -> f64,
    mut loss: impl FnMut() -> f64,
    skip: impl Fn(usize) -> bool,
) -> BlockReport {
    let base = loss();
    let mut report = BlockReport { name: name.to_string(), max_rel_err: 0.0, checked: 0, skipped: 0 };
    for &i in which {
        if skip(i) {
            report.skipped += 1;
            continue;
        }
        let orig = value(i, None);
        value(i, Some(orig + H));
        let up = loss();
        value(i, Some(orig - H));
        let down = loss();
        value(i, Some(orig));
        let (s_up, s_down) = ((up - base) / H, (base - down) / H);
        if (s_up - s_down).abs() > 1e-3 * (s_up.abs() + s_down.abs()) + 1e-8 {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel_err(analytic[i], (up - down) / (2.0 * H)));
    }
    report
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).expect("valid shape")
}

fn dot(a: &Tensor64, b: &Tensor64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Checks one stateful layer under the loss `<w, layer(x)>` for a fixed
/// random `w`: the input gradient plus each parameter block.
macro_rules! layer_check {
    ($out:expr, $rng:expr, $name:expr, $layer:expr, $x:expr, params: [$($pname:literal => $field:ident),*]) => {{
        let mut layer = $layer;
        let mut x: Tensor64 = $x;
        let y = layer.forward(x.clone()).expect("forward");
        let w = random(y.shape(), $rng);
        let gx = layer.backward(&w).expect("backward");
        let gx = gx.data().to_vec();
        $(let $field = layer.$field.grad.data().to_vec();)*
        let n = x.len();
        let cell = std::cell::RefCell::new((&mut layer, &mut x));
        $out.push(probe(
            &format!("{}.input", $name),
            &gx,
            &all(n),
            |i, v| {
                let mut c = cell.borrow_mut();
                if let Some(v) = v { c.1.data_mut()[i] = v; }
                c.1.data()[i]
            },
            || {
                let mut c = cell.borrow_mut();
                let x = c.1.clone();
                dot(&c.0.forward(x).expect("forward"), &w)
            },
            |_| false,
        ));
        $(
            let n = cell.borrow().0.$field.value.len();
            $out.push(probe(
                &format!("{}.{}", $name, $pname),
                &$field,
                &all(n),
                |i, v| {
                    let mut c = cell.borrow_mut();
                    if let Some(v) = v { c.0.$field.value.data_mut()[i] = v; }
                    c.0.$field.value.data()[i]
                },
                || {
                    let mut c = cell.borrow_mut();
                    let x = c.1.clone();
                    dot(&c.0.forward(x).expect("forward"), &w)
                },
                |_| false,
            ));
        )*
    }};
}

fn layer_blocks(rng: &mut ChaCha8Rng) -> Vec<BlockReport> {
    let mut out = Vec::new();
    let conv = Conv2d::<f64>::new(2, 3, 3, rng).expect("conv");
    layer_check!(out, rng, "conv", conv, random(&[2, 2, 6, 6], rng), params: ["kernels" => kernels, "bias" => bias]);
    let linear = Linear::<f64>::new(8, 5, rng).expect("linear");
    layer_check!(out, rng, "linear", linear, random(&[3, 2, 2, 2], rng), params: ["weight" => weight, "bias" => bias]);
    layer_check!(out, rng, "maxpool", MaxPool2d::new(2, 2).expect("pool"), random(&[2, 2, 6, 6], rng), params: []);

    // relu: skip the kink neighborhood explicitly
    let x = random(&[2, 3, 4, 4], rng);
    let mut relu = Relu::<f64>::default();
    let y = relu.forward(x.clone()).expect("relu");
    let w = random(y.shape(), rng);
    let gx = relu.backward(&w).expect("relu").into_vec();
    let cell = std::cell::RefCell::new(x.clone());
    out.push(probe(
        "relu.input",
        &gx,
        &all(x.len()),
        |i, v| {
            let mut c = cell.borrow_mut();
            if let Some(v) = v {
                c.data_mut()[i] = v;
            }
            c.data()[i]
        },
        || dot(&Relu::default().forward(cell.borrow().clone()).expect("relu"), &w),
        |i| x.data()[i].abs() < RELU_KINK,
    ));

    // dropout: the same generator state on every call fixes the mask
    let x = random(&[3, 10], rng);
    let mut drop = Dropout::<f64>::new(0.5).expect("dropout");
    let y = drop.forward(x.clone(), Mode::Train, &mut ChaCha8Rng::seed_from_u64(5)).expect("dropout");
    let w = random(y.shape(), rng);
    let gx = drop.backward(&w).expect("dropout").into_vec();
    let cell = std::cell::RefCell::new(x.clone());
    out.push(probe(
        "dropout.input",
        &gx,
        &all(x.len()),
        |i, v| {
            let mut c = cell.borrow_mut();
            if let Some(v) = v {
                c.data_mut()[i] = v;
            }
            c.data()[i]
        },
        || {
            let y = Dropout::new(0.5)
                .expect("dropout")
                .forward(cell.borrow().clone(), Mode::Train, &mut ChaCha8Rng::seed_from_u64(5))
                .expect("dropout");
            dot(&y, &w)
        },
        |_| false,
    ));

    let logits = random(&[4, 5], rng);
    let labels = [0, 3, 4, 1];
    let mut xent = SoftmaxXent::<f64>::default();
    xent.forward(&logits, &labels).expect("xent");
    let g = xent.backward().expect("xent").into_vec();
    let cell = std::cell::RefCell::new(logits.clone());
    out.push(probe(
        "softmax_xent.logits",
        &g,
        &all(logits.len()),
        |i, v| {
            let mut c = cell.borrow_mut();
            if let Some(v) = v {
                c.data_mut()[i] = v;
            }
            c.data()[i]
        },
        || SoftmaxXent::default().forward(&cell.borrow(), &labels).expect("xent"),
        |_| false,
    ));
    out
}

fn network_blocks(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<BlockReport>> {
    let (topology, size, per_block) = match opts.scale {
        Scale::Mini => (NetworkTopology::mini(3), 12, None),
        Scale::Full => (NetworkTopology::table1(10), 32, Some(12)),
    };
    let n_classes = topology.n_classes;
    let phi = TransformSet::new(vec![Transform::Identity, Transform::rot90(1)])?;
    let mut net = Network64::new(topology, phi.clone(), rng)?;
    net.set_mode(Mode::Train);
    let n = 2;
    let images = random(&[n, size, size], rng).map(f64::abs)?;
    let batch = phi.stack(&images)?;
    let labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    const DROP_SEED: u64 = 17;

    let loss = |net: &mut Network64| -> f64 {
        let logits = net.forward(batch.clone(), &mut ChaCha8Rng::seed_from_u64(DROP_SEED)).expect("forward");
        SoftmaxXent::default().forward(&logits, &labels).expect("loss")
    };

    net.zero_grad();
    let logits = net.forward(batch.clone(), &mut ChaCha8Rng::seed_from_u64(DROP_SEED))?;
    let mut xent = SoftmaxXent::default();
    xent.forward(&logits, &labels)?;
    net.backward(&xent.backward()?)?;
    let named: Vec<(String, Vec<f64>)> = net
        .params()
        .into_iter()
        .map(|(name, p)| {
            let mut g = p.grad.data().to_vec();
            if opts.corrupt_conv && name.ends_with("kernels") {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            (name, g)
        })
        .collect();

    let cell = std::cell::RefCell::new(net);
    let mut out = Vec::new();
    for (pi, (name, analytic)) in named.iter().enumerate() {
        let which = match per_block {
            Some(k) if analytic.len() > k => sample(rng, analytic.len(), k).into_vec(),
            _ => all(analytic.len()),
        };
        out.push(probe(
            &format!("network.{name}"),
            analytic,
            &which,
            |i, v| {
                let mut net = cell.borrow_mut();
                let mut params = net.params_mut();
                if let Some(v) = v {
                    params[pi].value.data_mut()[i] = v;
                }
                params[pi].value.data()[i]
            },
            || loss(&mut cell.borrow_mut()),
            |_| false,
        ));
    }
    Ok(out)
}

pub fn cmd_grad_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut blocks = layer_blocks(&mut rng);
    blocks.extend(network_blocks(opts, &mut rng)?);
    Ok(GradCheckReport { blocks })
}
