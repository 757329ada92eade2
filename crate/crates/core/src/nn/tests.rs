use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

fn unet(base: usize) -> Network {
    Network::build(NetSpec::Unet(UNetSpec::with_base(base)), &mut rng()).unwrap()
}

fn small_vnet() -> VNetSpec {
    VNetSpec { base_channels: 2, kernel: 3, ..VNetSpec::default() }
}

fn vnet(spec: VNetSpec) -> Network {
    Network::build(NetSpec::Vnet(spec), &mut rng()).unwrap()
}

fn input(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rand::Rng::random_range(&mut r, -1.0..1.0))
}

fn run(net: &mut Network, x: &Tensor<f32>, mode: Mode) -> (Graph<f32>, Forward) {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let fwd = net.forward(&mut g, v, mode, &mut rng()).unwrap();
    (g, fwd)
}

#[test]
fn unet_keeps_resolution() {
    let mut net = unet(4);
    for (h, w) in [(256, 256), (16, 48), (64, 32)] {
        let (g, fwd) = run(&mut net, &Tensor::zeros(&[1, 3, h, w]), Mode::Eval);
        assert_eq!(g.shape(fwd.scores), &[1, 3, h, w]);
    }
}

#[test]
fn unet_base8_bottleneck_shape() {
    let mut net = unet(8);
    let (g, fwd) = run(&mut net, &input(&[1, 3, 64, 64], 1), Mode::Eval);
    assert_eq!(fwd.trace_shape("bottleneck"), Some(&[1, 128, 4, 4][..]));
    assert_eq!(g.shape(fwd.scores), &[1, 3, 64, 64]);
    let levels: Vec<usize> = (0..4).map(|l| fwd.trace_shape(&format!("enc{l}")).unwrap()[1]).collect();
    assert_eq!(levels, vec![8, 16, 32, 64]);
}

#[test]
fn unet_base64_parameter_count() {
    // layer walk: 3x3 conv pairs per level, 2x2 up-convs, 1x1 head, biases
    let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
    let ch = |l: usize| 64usize << l;
    let mut want = 0;
    for l in 0..4 {
        let cin = if l == 0 { 3 } else { ch(l - 1) };
        want += conv(cin, ch(l), 3) + conv(ch(l), ch(l), 3);
        want += ch(l + 1) * ch(l) * 4 + ch(l) + conv(2 * ch(l), ch(l), 3) + conv(ch(l), ch(l), 3);
    }
    want += conv(ch(3), ch(4), 3) + conv(ch(4), ch(4), 3) + conv(ch(0), 3, 1);
    assert_eq!(want, 31_031_875);
    let (plan, buffers) = NetSpec::Unet(UNetSpec::default()).plan();
    let total: usize = plan.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    assert_eq!(total, want);
    assert!(buffers.is_empty());
}

#[test]
fn unet_rejects_indivisible_input() {
    let mut net = unet(2);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 32, 40]));
    let err = net.forward(&mut g, x, Mode::Eval, &mut rng()).unwrap_err();
    assert!(err.to_string().contains("width 40"), "{err}");
    let x = g.constant(Tensor::zeros(&[1, 2, 32, 32]));
    assert!(net.forward(&mut g, x, Mode::Eval, &mut rng()).is_err());
}

#[test]
fn vnet_default_depth_schedule() {
    let mut net = vnet(VNetSpec::default());
    let (g, fwd) = run(&mut net, &input(&[1, 3, 24, 64, 64], 2), Mode::Eval);
    assert_eq!(g.shape(fwd.scores), &[1, 3, 24, 64, 64]);
    let depth = |n: &str| fwd.trace_shape(n).unwrap()[2];
    let enc: Vec<usize> = (0..5).map(|l| depth(&format!("enc{l}"))).collect();
    assert_eq!(enc, vec![24, 24, 12, 12, 6]);
    let dec: Vec<usize> = (0..4).rev().map(|l| depth(&format!("dec{l}"))).collect();
    assert_eq!(dec, vec![12, 12, 24, 24]);
    assert!(g.value(fwd.scores).all_finite());
}

#[test]
fn vnet_rejects_wrong_depth() {
    let mut net = vnet(small_vnet());
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 20, 16, 16]));
    let err = net.forward(&mut g, x, Mode::Eval, &mut rng()).unwrap_err();
    assert!(err.to_string().contains("depth 20"), "{err}");
}

/// Collects every node reachable backwards from `v`.
fn ancestors(g: &Graph<f32>, v: Var) -> Vec<Var> {
    let mut seen = vec![v];
    let mut stack = vec![v];
    while let Some(n) = stack.pop() {
        for i in g.inputs(n) {
            if !seen.contains(&i) {
                seen.push(i);
                stack.push(i);
            }
        }
    }
    seen
}

#[test]
fn vnet_first_block_has_no_add_and_others_are_residual() {
    let mut net = vnet(small_vnet());
    let (g, fwd) = run(&mut net, &input(&[1, 3, 24, 16, 16], 3), Mode::Eval);
    let enc0 = fwd.trace.iter().find(|t| t.name == "enc0").unwrap().var;
    assert!(ancestors(&g, enc0).iter().all(|&v| g.op_name(v) != "add"));
    for l in 1..5 {
        let out = fwd.trace.iter().find(|t| t.name == format!("enc{l}")).unwrap().var;
        assert_eq!(g.op_name(out), "add");
        let [stack, block_in] = g.inputs(out)[..] else { panic!("add has two inputs") };
        assert_eq!(g.op_name(stack), "prelu");
        let (o, s, x) = (g.value(out).data(), g.value(stack).data(), g.value(block_in).data());
        for i in 0..o.len() {
            assert!((o[i] - s[i] - x[i]).abs() <= 1e-5 * (1.0 + x[i].abs()));
        }
    }
}

#[test]
fn first_block_residual_uses_projection() {
    let spec = VNetSpec { first_block_residual: true, ..small_vnet() };
    let (plan, _) = NetSpec::Vnet(spec.clone()).plan();
    assert!(plan.iter().any(|p| p.key == "enc0.proj.weight"));
    let mut net = vnet(spec);
    let (g, fwd) = run(&mut net, &input(&[1, 3, 24, 16, 16], 3), Mode::Eval);
    let enc0 = fwd.trace.iter().find(|t| t.name == "enc0").unwrap().var;
    assert_eq!(g.op_name(enc0), "add");
}

#[test]
fn eval_forward_is_finite_deterministic_and_batch_equivariant() {
    for mut net in [unet(4), vnet(small_vnet())] {
        let shape: Vec<usize> = match net.spec() {
            NetSpec::Unet(_) => vec![1, 3, 32, 32],
            NetSpec::Vnet(_) => vec![1, 3, 24, 16, 16],
        };
        let zeros = net.predict(&Tensor::zeros(&shape)).unwrap();
        assert!(zeros.all_finite());

        let a = input(&shape, 5);
        let b = input(&shape, 6);
        assert_eq!(net.predict(&a).unwrap(), net.predict(&a).unwrap());

        let mut pair_shape = shape.clone();
        pair_shape[0] = 2;
        let cat = |x: &Tensor<f32>, y: &Tensor<f32>| {
            Tensor::new(pair_shape.clone(), [x.data(), y.data()].concat()).unwrap()
        };
        let ab = net.predict(&cat(&a, &b)).unwrap();
        let ba = net.predict(&cat(&b, &a)).unwrap();
        let half = ab.numel() / 2;
        assert_eq!(&ab.data()[..half], &ba.data()[half..]);
        assert_eq!(&ab.data()[half..], &ba.data()[..half]);
        // train-mode side effects are absent from predict
        let before = net.buffers().clone();
        let (_g, _f) = run(&mut net, &a, Mode::Eval);
        assert_eq!(net.buffers(), &before);
    }
}

#[test]
fn every_parameter_bound_once_and_used_once() {
    for mut net in [unet(2), vnet(small_vnet())] {
        let x = match net.spec() {
            NetSpec::Unet(_) => input(&[1, 3, 16, 16], 1),
            NetSpec::Vnet(_) => input(&[1, 3, 24, 16, 16], 1),
        };
        let (g, fwd) = run(&mut net, &x, Mode::Train);
        assert_eq!(fwd.bindings.len(), net.params().len());
        for &(i, v) in &fwd.bindings {
            assert_eq!(g.consumers(v).len(), 1, "{} shared", net.params().key(i));
        }
    }
}

#[test]
fn train_mode_updates_running_stats_and_uses_dropout() {
    let mut net = vnet(small_vnet());
    let before = net.buffers().clone();
    let x = input(&[1, 3, 24, 16, 16], 9);
    let (g, fwd) = run(&mut net, &x, Mode::Train);
    assert_ne!(net.buffers(), &before);
    let drops = ancestors(&g, fwd.scores).into_iter().filter(|&v| g.op_name(v) == "dropout").count();
    assert_eq!(drops, 2);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    for net in [unet(2), vnet(small_vnet())] {
        let x = match net.spec() {
            NetSpec::Unet(_) => input(&[1, 3, 16, 16], 4),
            NetSpec::Vnet(_) => input(&[1, 3, 24, 16, 16], 4),
        };
        let mut r = rng();
        rand::Rng::random::<u64>(&mut r);
        let mut ck = Checkpoint::new(&net, 17, &r);
        ck.optimizer_step = 17;
        ck.optimizer.insert("adam.m.head.weight", Tensor::full(&[2], 0.5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.asck");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
        assert_eq!(&back.to_bytes()[..4], b"ASCK");
        let restored = back.network().unwrap();
        let (p, q) = (net.predict(&x).unwrap(), restored.predict(&x).unwrap());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
        let mut rr = back.rng.restore();
        assert_eq!(rand::Rng::random::<u64>(&mut rr), rand::Rng::random::<u64>(&mut r));
    }
}

#[test]
fn checkpoint_rejects_mismatched_tables() {
    let net = unet(2);
    let ck = Checkpoint::new(&net, 0, &rng());
    let bytes = ck.to_bytes();
    let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");
    assert!(Checkpoint::from_bytes(b"NOPE").is_err());

    let mut params = ParamStore::new();
    for (k, t) in net.params().iter() {
        let key = if k == "head.bias" { "head.b".to_string() } else { k.to_string() };
        params.insert(key, t.clone()).unwrap();
    }
    let bad = Checkpoint { params, ..ck.clone() };
    let err = Checkpoint::from_bytes(&bad.to_bytes()).unwrap_err();
    assert!(err.to_string().contains("expected head.bias"), "{err}");

    let other = Checkpoint { spec: NetSpec::Unet(UNetSpec::with_base(4)), ..ck };
    assert!(Checkpoint::from_bytes(&other.to_bytes()).unwrap_err().to_string().contains("shape"));
}

#[test]
fn spec_json_is_tagged_by_architecture() {
    let s = serde_json::to_string(&NetSpec::Unet(UNetSpec::with_base(8))).unwrap();
    assert!(s.starts_with("{\"arch\":\"unet\""), "{s}");
    let v: NetSpec = serde_json::from_str(&serde_json::to_string(&NetSpec::Vnet(VNetSpec::default())).unwrap()).unwrap();
    assert_eq!(v, NetSpec::Vnet(VNetSpec::default()));
}

#[test]
fn initialization_is_seeded_and_scaled() {
    let a = unet(8);
    assert_eq!(a, unet(8));
    let w = a.params().get("enc1.conv1.weight").unwrap();
    let n = w.numel() as f64;
    let var = w.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n;
    let want = 1.0 / (8.0 * 9.0);
    assert!((var / want - 1.0).abs() < 0.1, "variance {var} vs {want}");
    assert!(a.params().get("enc1.conv1.bias").unwrap().data().iter().all(|&b| b == 0.0));
    let nb = Network::build(NetSpec::Unet(UNetSpec { bias: false, ..UNetSpec::with_base(2) }), &mut rng()).unwrap();
    assert!(nb.params().keys().iter().all(|k| !k.ends_with(".bias")));
}
