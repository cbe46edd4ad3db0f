use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tipool::layers::{Conv2d, Dropout, Linear, MaxPool2d, Relu, SoftmaxXent};
use tipool::network::{ti_pool_backward, ti_pool_forward, Layer};
use tipool::transform::ReflectAxis;
use tipool::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_images(n: usize, size: usize, seed: u64) -> Tensor64 {
    let mut r = rng(seed);
    Tensor::from_fn(&[n, size, size], |_| r.gen::<f64>()).unwrap()
}

fn mini_net(transforms: TransformSet, seed: u64) -> Network64 {
    Network::new(NetworkTopology::mini(3), transforms, &mut rng(seed)).unwrap()
}

#[test]
fn ti_pool_forward_examples() {
    let f = Tensor::from_vec(&[1, 2, 2], vec![1.0f32, 3.0, 2.0, 0.0]).unwrap();
    let (g, arg) = ti_pool_forward(&f).unwrap();
    assert_eq!(g.shape(), &[1, 2]);
    assert_eq!(g.data(), &[2.0, 3.0]);
    assert_eq!(arg.data(), &[1, 0]);

    // features [[ [1,3],[2,0] ]] read as branch rows: branch 0 = [1,3], branch 1 = [2,0]
    let f = Tensor::from_vec(&[1, 2, 2], vec![1.0f32, 3.0, 2.0, 0.0]).unwrap();
    let (g, arg) = ti_pool_forward(&f).unwrap();
    assert_eq!((g.data(), arg.data()), (&[2.0f32, 3.0][..], &[1usize, 0][..]));

    let single = Tensor::from_vec(&[2, 1, 3], vec![1.0f32, -2.0, 0.5, 4.0, 0.0, 1.0]).unwrap();
    let (g, arg) = ti_pool_forward(&single).unwrap();
    assert_eq!(g.data(), single.data());
    assert!(arg.data().iter().all(|&i| i == 0));

    let dup = Tensor::from_vec(&[1, 2, 3], vec![0.1f32, 0.2, 0.3, 0.1, 0.2, 0.3]).unwrap();
    let (g, arg) = ti_pool_forward(&dup).unwrap();
    assert_eq!(g.data(), &[0.1, 0.2, 0.3]);
    assert!(arg.data().iter().all(|&i| i == 0));
}

#[test]
fn ti_pool_backward_examples() {
    let grad = Tensor::from_vec(&[1, 2], vec![1.0f32, 1.0]).unwrap();
    let arg = IndexTensor::from_vec(vec![1, 2], vec![1, 0]).unwrap();
    let routed = ti_pool_backward(&grad, &arg, 2).unwrap();
    assert_eq!(routed.shape(), &[1, 2, 2]);
    // [n, phi, k]: phi 0 gets feature 1, phi 1 gets feature 0
    assert_eq!(routed.data(), &[0.0, 1.0, 1.0, 0.0]);

    let zero = Tensor::<f32>::zeros(&[1, 2]).unwrap();
    assert!(ti_pool_backward(&zero, &arg, 2).unwrap().data().iter().all(|&v| v == 0.0));
}

fn loss_of(net: &mut Network64, batch: &Tensor64, labels: &[usize], pooling: Pooling) -> f64 {
    let logits = net.forward_with(pooling, batch.clone(), &mut rng(99)).unwrap();
    SoftmaxXent::default().forward(&logits, labels).unwrap()
}

/// Central differences on every parameter element; returns the worst relative
/// error.
fn max_param_error(net: &mut Network64, batch: &Tensor64, labels: &[usize], pooling: Pooling) -> f64 {
    net.zero_grad();
    let logits = net.forward_with(pooling, batch.clone(), &mut rng(99)).unwrap();
    let mut xent = SoftmaxXent::default();
    xent.forward(&logits, labels).unwrap();
    net.backward(&xent.backward().unwrap()).unwrap();
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|(_, p)| p.grad.data().to_vec()).collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let orig = net.params_mut()[pi].value.data()[ei];
            net.params_mut()[pi].value.data_mut()[ei] = orig + h;
            let up = loss_of(net, batch, labels, pooling);
            net.params_mut()[pi].value.data_mut()[ei] = orig - h;
            let down = loss_of(net, batch, labels, pooling);
            net.params_mut()[pi].value.data_mut()[ei] = orig;
            let n = (up - down) / (2.0 * h);
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
        }
    }
    worst
}

#[test]
fn two_branch_network_matches_finite_differences() {
    let transforms = TransformSet::new(vec![Transform::Identity, Transform::rot90(1)]).unwrap();
    let mut net = mini_net(transforms.clone(), 5);
    net.set_mode(Mode::Train);
    let batch = transforms.stack(&random_images(3, 12, 6)).unwrap();
    let err = max_param_error(&mut net, &batch, &[0, 2, 1], Pooling::Features);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn mil_network_matches_finite_differences() {
    let transforms = TransformSet::new(vec![Transform::Identity, Transform::rot90(2)]).unwrap();
    let mut net = mini_net(transforms.clone(), 7);
    let batch = transforms.stack(&random_images(2, 12, 8)).unwrap();
    let err = max_param_error(&mut net, &batch, &[1, 0], Pooling::Outputs);
    assert!(err <= 1e-4, "max relative error {err}");
}

/// Reference single-branch CNN assembled directly from layers.
struct PlainCnn {
    layers: Vec<Layer<f64>>,
}

impl PlainCnn {
    fn from_network(net: &Network64) -> Self {
        let layers = net
            .trunk_layers()
            .iter()
            .chain(net.head_layers())
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(Conv2d::from_params(c.kernels.value.clone(), c.bias.value.clone())),
                Layer::Linear(c) => Layer::Linear(Linear::from_params(c.weight.value.clone(), c.bias.value.clone())),
                Layer::Relu(_) => Layer::Relu(Relu::default()),
                Layer::MaxPool(p) => Layer::MaxPool(MaxPool2d::new(p.kernel, p.stride).unwrap()),
                Layer::Dropout(d) => Layer::Dropout(Dropout::new(d.rate).unwrap()),
            })
            .collect();
        Self { layers }
    }

    fn forward(&mut self, images: &Tensor64, mode: Mode, r: &mut ChaCha8Rng) -> Tensor64 {
        let [n, h, w] = *images.shape() else { panic!() };
        let mut x = images.clone().reshape(&[n, 1, h, w]).unwrap();
        for l in &mut self.layers {
            x = l.forward(x, mode, r).unwrap();
        }
        x
    }

    fn backward(&mut self, g: &Tensor64) {
        let mut g = g.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g).unwrap();
        }
    }

    fn grads(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Conv(c) => vec![c.kernels.grad.data().to_vec(), c.bias.grad.data().to_vec()],
                Layer::Linear(c) => vec![c.weight.grad.data().to_vec(), c.bias.grad.data().to_vec()],
                _ => vec![],
            })
            .collect()
    }
}

#[test]
fn singleton_set_is_a_plain_cnn() {
    let mut net = mini_net(TransformSet::identity(), 11);
    let mut plain = PlainCnn::from_network(&net);
    let images = random_images(4, 12, 12);
    let batch = TransformSet::identity().stack(&images).unwrap();

    let a = net.forward(batch, &mut rng(3)).unwrap();
    let b = plain.forward(&images, Mode::Train, &mut rng(3));
    assert_eq!(a, b);

    let labels = [0, 1, 2, 1];
    let mut xent = SoftmaxXent::default();
    xent.forward(&a, &labels).unwrap();
    let g = xent.backward().unwrap();
    net.zero_grad();
    net.backward(&g).unwrap();
    plain.backward(&g);
    let net_grads: Vec<Vec<f64>> = net.params().iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    assert_eq!(net_grads, plain.grads());
}

#[test]
fn branch_order_does_not_matter() {
    let a = TransformSet::new(vec![Transform::Identity, Transform::rot90(1), Transform::rotate(0.4)]).unwrap();
    let b = TransformSet::new(vec![Transform::rotate(0.4), Transform::Identity, Transform::rot90(1)]).unwrap();
    let mut net_a = mini_net(a.clone(), 13);
    let mut net_b = mini_net(b.clone(), 13);
    net_a.set_mode(Mode::Eval);
    net_b.set_mode(Mode::Eval);
    let images = random_images(5, 12, 14);
    let la = net_a.forward(a.stack(&images).unwrap(), &mut rng(0)).unwrap();
    let lb = net_b.forward(b.stack(&images).unwrap(), &mut rng(0)).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn quarter_turn_invariance_ti_and_mil() {
    let c4 = TransformSet::quarter_turns();
    let mut net = Network::<f64>::new(NetworkTopology::desk(10), c4.clone(), &mut rng(15)).unwrap();
    net.set_mode(Mode::Eval);
    let images = random_images(3, 32, 16);
    for pooling in [Pooling::Features, Pooling::Outputs] {
        let base = net.forward_with(pooling, c4.stack(&images).unwrap(), &mut rng(0)).unwrap();
        for k in 1..4 {
            let rotated: Vec<Tensor64> = (0..3)
                .map(|i| {
                    let img = images.clone().into_vec()[i * 1024..(i + 1) * 1024].to_vec();
                    Transform::rot90(k).apply(&Tensor::from_vec(&[32, 32], img).unwrap()).unwrap()
                })
                .collect();
            let stacked = Tensor::from_vec(&[3, 32, 32], rotated.into_iter().flat_map(Tensor::into_vec).collect()).unwrap();
            let out = net.forward_with(pooling, c4.stack(&stacked).unwrap(), &mut rng(0)).unwrap();
            for (x, y) in base.data().iter().zip(out.data()) {
                assert!((x - y).abs() <= 1e-12, "{pooling:?} k={k}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn reflection_pair_invariance() {
    let flips = TransformSet::new(vec![Transform::Identity, Transform::reflect(ReflectAxis::Horizontal)]).unwrap();
    let mut net = mini_net(flips.clone(), 17);
    net.set_mode(Mode::Eval);
    let images = random_images(2, 12, 18);
    let mirrored = Tensor::from_vec(
        &[2, 12, 12],
        (0..2)
            .flat_map(|i| {
                let img = Tensor::from_vec(&[12, 12], images.data()[i * 144..(i + 1) * 144].to_vec()).unwrap();
                Transform::reflect(ReflectAxis::Horizontal).apply(&img).unwrap().into_vec()
            })
            .collect(),
    )
    .unwrap();
    let a = net.forward(flips.stack(&images).unwrap(), &mut rng(0)).unwrap();
    let b = net.forward(flips.stack(&mirrored).unwrap(), &mut rng(0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let set = TransformSet::quarter_turns();
    let mut net = mini_net(set.clone(), 19);
    let logits = net.forward(set.stack(&random_images(2, 12, 20)).unwrap(), &mut rng(0)).unwrap();
    net.zero_grad();
    net.backward(&Tensor::zeros(logits.shape()).unwrap()).unwrap();
    assert!(net.params().iter().all(|(_, p)| p.grad.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn backward_without_forward_is_state_error() {
    let mut net = mini_net(TransformSet::identity(), 21);
    let g = Tensor::zeros(&[1, 3]).unwrap();
    assert!(matches!(net.backward(&g), Err(Error::State(_))));
}

#[test]
fn wrong_branch_count_is_shape_error() {
    let mut net = mini_net(TransformSet::quarter_turns(), 22);
    let batch = TransformSet::identity().stack(&random_images(1, 12, 23)).unwrap();
    assert!(matches!(net.forward(batch, &mut rng(0)), Err(Error::Shape(_))));
}

#[test]
fn argmax_indices_are_in_range() {
    let set = TransformSet::rotations(5, RotationRange::Full).unwrap();
    let mut net = mini_net(set.clone(), 24);
    net.forward(set.stack(&random_images(4, 12, 25)).unwrap(), &mut rng(0)).unwrap();
    let arg = net.last_argmax().unwrap();
    assert_eq!(arg.shape(), &[4, 6]);
    assert!(arg.data().iter().all(|&i| i < 5));
}

#[test]
fn parameter_count_is_independent_of_phi() {
    let one = Network::<f32>::new(NetworkTopology::desk(10), TransformSet::identity(), &mut rng(1)).unwrap();
    let many = Network::<f32>::new(
        NetworkTopology::desk(10),
        TransformSet::rotations(24, RotationRange::Full).unwrap(),
        &mut rng(1),
    )
    .unwrap();
    assert_eq!(one.n_parameters(), many.n_parameters());
    assert_eq!(one.params().len(), many.params().len());
    for ((na, pa), (nb, pb)) in one.params().iter().zip(many.params()) {
        assert_eq!(na, &nb);
        assert_eq!(pa.value, pb.value);
    }
}

#[test]
fn table1_spatial_trace() {
    let topo = NetworkTopology::table1(10);
    let trace = topo.trunk_trace().unwrap();
    let sides: Vec<usize> = trace.iter().filter(|s| s.len() == 3).map(|s| s[1]).collect();
    // input, then per block: conv, relu, pool
    assert_eq!(sides, vec![32, 30, 30, 15, 13, 13, 6, 4, 4, 2]);
    assert_eq!(trace[9], vec![160, 2, 2]);
    assert_eq!(trace[9].iter().product::<usize>(), 640);
    assert_eq!(topo.n_features().unwrap(), 5120);
    topo.validate().unwrap();
}

#[test]
fn nested_sets_only_raise_features() {
    let small = TransformSet::rotations(4, RotationRange::Full).unwrap();
    let large = TransformSet::rotations(8, RotationRange::Full).unwrap();
    let mut net_s = mini_net(small.clone(), 26);
    let mut net_l = mini_net(large.clone(), 26);
    let images = random_images(3, 12, 27);
    let fs = net_s.features(&small.stack(&images).unwrap(), &mut rng(0)).unwrap();
    let fl = net_l.features(&large.stack(&images).unwrap(), &mut rng(0)).unwrap();
    let (gs, _) = ti_pool_forward(&fs).unwrap();
    let (gl, _) = ti_pool_forward(&fl).unwrap();
    for (a, b) in gs.data().iter().zip(gl.data()) {
        assert!(b >= a);
    }
}

fn smooth_probe(n: usize) -> Tensor64 {
    let c = (n as f64 - 1.0) / 2.0;
    Tensor::from_fn(&[1, n, n], |i| {
        let (r, col) = ((i / n) as f64, (i % n) as f64);
        (-((r - c + 4.0).powi(2) + (col - c - 2.0).powi(2)) / 18.0).exp()
            + 0.6 * (-((r - c - 3.0).powi(2) + (col - c + 3.0).powi(2)) / 12.0).exp()
    })
    .unwrap()
}

#[test]
fn resampled_rotations_are_nearly_invariant() {
    let set = TransformSet::rotations(24, RotationRange::Full).unwrap();
    let mut net = Network::<f64>::new(NetworkTopology::desk(10), set.clone(), &mut rng(28)).unwrap();
    let probe = smooth_probe(32);
    let (g0, _) = ti_pool_forward(&net.features(&set.stack(&probe).unwrap(), &mut rng(0)).unwrap()).unwrap();
    let range = g0.data().iter().cloned().fold(f64::MIN, f64::max) - g0.data().iter().cloned().fold(f64::MAX, f64::min);
    for t in set.iter().step_by(5) {
        let img = t.apply(&probe.clone().reshape(&[32, 32]).unwrap()).unwrap().reshape(&[1, 32, 32]).unwrap();
        let (g, _) = ti_pool_forward(&net.features(&set.stack(&img).unwrap(), &mut rng(0)).unwrap()).unwrap();
        let worst = g.data().iter().zip(g0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.05 * range, "{t:?}: {worst} vs range {range}");
    }
}

fn set_params(net: &mut Network64, values: &[&[f64]]) {
    for (p, v) in net.params_mut().into_iter().zip(values) {
        p.value.data_mut().copy_from_slice(v);
    }
}

#[test]
fn mil_and_ti_differ_on_crafted_instance() {
    // 2x2 input, trunk = linear 4 -> 2 picking pixels 0 and 1, head sums features.
    let topo = NetworkTopology {
        input_size: 2,
        trunk: vec![LayerSpec::Linear { units: 2 }],
        head: vec![LayerSpec::Linear { units: 1 }],
        n_classes: 1,
    };
    let set = TransformSet::new(vec![Transform::Identity, Transform::rot90(2)]).unwrap();
    let mut net = Network::<f64>::new(topo, set, &mut rng(0)).unwrap();
    let w = 0.75;
    set_params(
        &mut net,
        &[&[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[0.0, 0.0], &[w, w], &[0.0]],
    );
    // branch 0 features [1, 0], branch 1 features [0, 1]
    let batch = Tensor::from_vec(&[1, 2, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let ti = net.forward(batch.clone(), &mut rng(0)).unwrap();
    let mil = net.forward_mil(batch, &mut rng(0)).unwrap();
    assert_eq!(ti.data(), &[2.0 * w]);
    assert_eq!(mil.data(), &[w]);
}

#[test]
fn mil_with_singleton_set_matches_ti() {
    let set = TransformSet::identity();
    let mut net = mini_net(set.clone(), 29);
    net.set_mode(Mode::Eval);
    let batch = set.stack(&random_images(3, 12, 30)).unwrap();
    let a = net.forward(batch.clone(), &mut rng(0)).unwrap();
    let b = net.forward_mil(batch, &mut rng(0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn canonical_with_identity_returns_input() {
    let mut net = mini_net(TransformSet::identity(), 31);
    let img = random_images(1, 12, 32).reshape(&[12, 12]).unwrap();
    let out = net.canonical_instances(&img, &[0, 3, 5], &mut rng(0)).unwrap();
    assert_eq!(out.len(), 3);
    for c in out {
        assert_eq!(c.transform_index, 0);
        assert_eq!(c.image, img);
    }
    assert!(matches!(
        net.canonical_instances(&img, &[6], &mut rng(0)),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn canonical_index_matches_ti_argmax() {
    let set = TransformSet::rotations(6, RotationRange::Full).unwrap();
    let mut net = mini_net(set.clone(), 33);
    net.set_mode(Mode::Eval);
    let img = random_images(1, 12, 34);
    net.forward(set.stack(&img).unwrap(), &mut rng(0)).unwrap();
    let arg = net.last_argmax().unwrap().clone();
    let ids: Vec<usize> = (0..6).collect();
    let out = net.canonical_instances(&img.reshape(&[12, 12]).unwrap(), &ids, &mut rng(0)).unwrap();
    for c in out {
        assert_eq!(c.transform_index, arg.data()[c.feature]);
    }
}

#[test]
fn vertical_edge_feature_prefers_quarter_turn() {
    let n = 16;
    let topo = NetworkTopology {
        input_size: n,
        trunk: vec![
            LayerSpec::Conv { channels: 1, kernel: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: n - 2, stride: n - 2 },
        ],
        head: vec![LayerSpec::Linear { units: 2 }],
        n_classes: 2,
    };
    let set = TransformSet::rotations(24, RotationRange::Full).unwrap();
    let mut net = Network::<f64>::new(topo, set.clone(), &mut rng(0)).unwrap();
    set_params(
        &mut net,
        &[&[-1.0, 0.0, 1.0, -1.0, 0.0, 1.0, -1.0, 0.0, 1.0], &[0.0], &[0.0, 0.0], &[0.0, 0.0]],
    );
    // horizontal edge under a smooth radial window: the only sharp contrast
    // is the straight edge through the center
    let c = (n as f64 - 1.0) / 2.0;
    let img = Tensor::from_fn(&[n, n], |i| {
        let (r, col) = ((i / n) as f64, (i % n) as f64);
        let window = (1.0 - ((r - c).powi(2) + (col - c).powi(2)) / 49.0).max(0.0);
        if r > c { window } else { 0.0 }
    })
    .unwrap();

    // oracle: the feature on every rotated copy, evaluated one at a time
    let mut single = Network::<f64>::new(net.topology().clone(), TransformSet::identity(), &mut rng(0)).unwrap();
    for (dst, src) in single.params_mut().into_iter().zip(net.params()) {
        dst.value = src.1.value.clone();
    }
    let responses: Vec<f64> = set
        .iter()
        .map(|t| {
            let rotated = t.apply(&img).unwrap().reshape(&[1, n, n]).unwrap();
            let batch = TransformSet::identity().stack(&rotated).unwrap();
            single.features(&batch, &mut rng(0)).unwrap().data()[0]
        })
        .collect();
    let mut best = 0;
    for (i, &r) in responses.iter().enumerate() {
        if r > responses[best] {
            best = i;
        }
    }

    let out = net.canonical_instances(&img, &[0], &mut rng(0)).unwrap();
    assert_eq!(out[0].transform_index, best);
    let t = set.get(best).unwrap();
    assert!(matches!(t, Transform::Rot90 { k: 1 } | Transform::Rot90 { k: 3 }), "{t:?}: {responses:?}");
}
