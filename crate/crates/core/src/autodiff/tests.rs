use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i as f64 * 0.618).fract() - 0.5) * scale)
}

/// Central finite differences of `f` at every element of every input.
fn fd_check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let eval = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    let h = 1e-5;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).expect("grad populated");
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            assert!(err <= 1e-4, "input {k} element {i}: analytic {a} numeric {numeric}");
        }
    }
}

/// Contracts a tensor output to a scalar with fixed non-uniform weights.
fn probe(g: &mut Graph<f64>, y: Var) -> Var {
    let w = ramp(g.shape(y), 2.0).map(|v| v + 0.3);
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

#[test]
fn conv_ones_kernel_counts_window_overlap() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0f64));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv(x, w, None, &[1, 1], &[1, 1]).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), &[1, 1, 4, 4]);
    let d = out.data();
    for (r, c) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        assert_eq!(d[r * 4 + c], 9.0);
    }
    for (r, c) in [(0, 0), (0, 3), (3, 0), (3, 3)] {
        assert_eq!(d[r * 4 + c], 4.0);
    }
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::new();
    let input = ramp(&[1, 1, 3, 3], 4.0);
    let x = g.constant(input.clone());
    let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let b = g.constant(t(&[1], &[0.0]));
    let y = g.conv(x, w, Some(b), &[1, 1], &[0, 0]).unwrap();
    assert_eq!(g.value(y), &input);
}

#[test]
fn conv3d_anisotropic_stride_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 24, 8, 8]));
    let w = g.constant(Tensor::zeros(&[1, 1, 2, 2, 2]));
    let y = g.conv(x, w, None, &[1, 2, 2], &[0, 0, 0]).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 23, 4, 4]);
    let y = g.conv(x, w, None, &[2, 2, 2], &[0, 0, 0]).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 12, 4, 4]);
}

#[test]
fn conv_rejects_channel_mismatch_and_empty_output() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 5, 5]));
    let w = g.constant(Tensor::zeros(&[2, 4, 3, 3]));
    let err = g.conv(x, w, None, &[1, 1], &[1, 1]).unwrap_err();
    assert!(err.to_string().contains("channel dimension C"), "{err}");
    let w = g.constant(Tensor::zeros(&[2, 3, 7, 3]));
    let err = g.conv(x, w, None, &[1, 1], &[0, 0]).unwrap_err();
    assert!(err.to_string().contains("height"), "{err}");
}

#[test]
fn transposed_conv_block_replicates() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let w = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.conv_transpose(x, w, None, &[2, 2]).unwrap();
    let want = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
    assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
    assert_eq!(g.value(y).data(), &want);
}

#[test]
fn transposed_conv_identity_and_inverse_shape() {
    let mut g = Graph::new();
    let input = ramp(&[1, 1, 3, 3], 1.0);
    let x = g.constant(input.clone());
    let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = g.conv_transpose(x, w, None, &[1, 1]).unwrap();
    assert_eq!(g.value(y), &input);

    let x = g.constant(Tensor::zeros(&[1, 1, 12, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 1, 2, 2, 2]));
    let y = g.conv_transpose(x, w, None, &[2, 2, 2]).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 24, 8, 8]);
}

#[test]
fn max_pool_values_and_tie_routing() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.max_pool(x, &[2, 2], &[2, 2]).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[1, 1, 4, 4], 7.0f64));
    let y = g.max_pool(x, &[2, 2], &[2, 2]).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 7.0));
    let s = g.sum(y);
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap().data();
    let hot: Vec<usize> = (0..16).filter(|&i| grad[i] == 1.0).collect();
    assert_eq!(hot, vec![0, 2, 8, 10]);
    assert_eq!(grad.iter().sum::<f64>(), 4.0);
}

#[test]
fn max_pool_halves_four_times() {
    let mut g = Graph::<f32>::new();
    let mut v = g.constant(Tensor::zeros(&[1, 1, 256, 256]));
    for want in [128, 64, 32, 16] {
        v = g.max_pool(v, &[2, 2], &[2, 2]).unwrap();
        assert_eq!(g.shape(v), &[1, 1, want, want]);
    }
    assert!(g.max_pool(v, &[32, 32], &[1, 1]).is_err());
}

fn channel_moments(x: &Tensor<f64>, ch: usize) -> (f64, f64) {
    let (n, c, s) = split_axis(x.shape(), 1);
    let vals: Vec<f64> = (0..n).flat_map(|b| x.data()[(b * c + ch) * s..(b * c + ch + 1) * s].to_vec()).collect();
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
    (m, v.sqrt())
}

#[test]
fn batch_norm_train_standardizes_and_affine() {
    // channel values 3 and 7 alternate: mean 5, std 2
    let data: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 3.0 } else { 7.0 }).collect();
    let input = t(&[2, 1, 2, 4], &data);
    for (gamma, beta) in [(1.0, 0.0), (2.0, 3.0)] {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let gm = g.param(t(&[1], &[gamma]));
        let bt = g.param(t(&[1], &[beta]));
        let mut stats = BatchNormStats::new(1);
        let y = g.batch_norm(x, gm, bt, &mut stats, Mode::Train, BatchNormConfig::default()).unwrap();
        let (m, s) = channel_moments(g.value(y), 0);
        assert!((m - beta).abs() < 1e-6);
        assert!((s - gamma).abs() < 1e-5 * gamma.max(1.0));
        // running stats moved 10% towards (5, unbiased var 4 * 16/15)
        assert!((stats.mean[0] - 0.5).abs() < 1e-12);
        assert!((stats.var[0] - (0.9 + 0.1 * 4.0 * 16.0 / 15.0)).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let stats = BatchNormStats { mean: vec![1.0, -2.0], var: vec![4.0, 0.25] };
    let config = BatchNormConfig::default();
    let gamma = [1.5, 0.5];
    let beta = [0.1, -0.3];
    for seed in [0.3, 11.0] {
        let input = ramp(&[2, 2, 3], seed);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let gm = g.constant(t(&[2], &gamma));
        let bt = g.constant(t(&[2], &beta));
        let mut st = stats.clone();
        let y = g.batch_norm(x, gm, bt, &mut st, Mode::Eval, config).unwrap();
        assert_eq!(st, stats, "eval mode must not touch running stats");
        for (i, &v) in g.value(y).data().iter().enumerate() {
            let ch = (i / 3) % 2;
            let want = gamma[ch] * (input.data()[i] - stats.mean[ch]) / (stats.var[ch] + config.epsilon).sqrt()
                + beta[ch];
            assert!((v - want).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_norm_constant_channel_is_finite() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[1, 2, 3, 3], 4.0f64));
    let gm = g.param(Tensor::full(&[2], 1.0));
    let bt = g.param(Tensor::full(&[2], 0.0));
    let mut stats = BatchNormStats::new(2);
    let y = g.batch_norm(x, gm, bt, &mut stats, Mode::Train, BatchNormConfig::default()).unwrap();
    assert!(g.value(y).all_finite());
    let s = probe(&mut g, y);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().all_finite());
}

#[test]
fn dropout_identity_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = ramp(&[4, 5], 3.0);
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let a = g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
    let b = g.dropout(x, 0.7, Mode::Eval, &mut rng).unwrap();
    assert_eq!(g.value(a), &input);
    assert_eq!(g.value(b), &input);
    assert!(g.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
}

#[test]
fn dropout_mask_follows_rng_state() {
    let input = Tensor::full(&[1000], 1.0f32);
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
    assert!(run(9).data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn activations() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

    let z = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let s = g.softmax(z, 0).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = g.constant(t(&[1], &[-2.0]));
    let a = g.constant(t(&[1], &[0.25]));
    let p = g.prelu(x, a).unwrap();
    assert_eq!(g.value(p).data(), &[-0.5]);
    assert!(g.softmax(x, 1).is_err());
}

#[test]
fn concat_add_and_slice_round_trip() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::from_fn(&[1, 64, 2, 2], |i| i as f32));
    let b = g.constant(Tensor::from_fn(&[1, 64, 2, 2], |i| -(i as f32)));
    let c = g.concat(a, b, 1).unwrap();
    assert_eq!(g.shape(c), &[1, 128, 2, 2]);
    let a2 = g.slice(c, 1, 0, 64).unwrap();
    let b2 = g.slice(c, 1, 64, 64).unwrap();
    assert_eq!(g.value(a2), g.value(a));
    assert_eq!(g.value(b2), g.value(b));

    let zero = g.constant(Tensor::zeros(&[1, 64, 2, 2]));
    let s = g.add(a, zero).unwrap();
    assert_eq!(g.value(s), g.value(a));

    let odd = g.constant(Tensor::zeros(&[1, 64, 3, 2]));
    assert!(g.add(a, odd).is_err());
    assert!(g.concat(a, odd, 1).is_err());
}

#[test]
fn backward_basic_cases() {
    let xv = t(&[4], &[1.0, -2.0, 3.0, 0.5]);
    let mut g = Graph::new();
    let w = g.param(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
    let x = g.constant(xv.clone());
    let p = g.mul(w, x).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), &xv);
    assert!(g.grad(x).is_none());

    let mut g = Graph::new();
    let x = g.param(t(&[3], &[-1.0, -0.5, -3.0]));
    let r = g.relu(x);
    let s = g.sum(r);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));

    let err = g.backward(r).unwrap_err();
    assert!(matches!(err, TensorError::NonScalarLoss(_)));
}

#[test]
fn gradients_match_finite_differences() {
    fd_check(&[ramp(&[2, 2, 5, 4], 2.0), ramp(&[3, 2, 3, 2], 1.0), ramp(&[3], 1.0)], |g, v| {
        let y = g.conv(v[0], v[1], Some(v[2]), &[2, 1], &[1, 1]).unwrap();
        probe(g, y)
    });
    fd_check(&[ramp(&[1, 2, 4, 3, 3], 2.0), ramp(&[2, 2, 2, 2, 2], 1.0), ramp(&[2], 1.0)], |g, v| {
        let y = g.conv(v[0], v[1], Some(v[2]), &[1, 2, 2], &[0, 1, 0]).unwrap();
        probe(g, y)
    });
    fd_check(&[ramp(&[2, 3, 2, 3], 2.0), ramp(&[3, 2, 2, 3], 1.0), ramp(&[2], 1.0)], |g, v| {
        let y = g.conv_transpose(v[0], v[1], Some(v[2]), &[2, 2]).unwrap();
        probe(g, y)
    });
    fd_check(&[ramp(&[1, 2, 3, 4, 4], 5.0)], |g, v| {
        let y = g.max_pool(v[0], &[1, 2, 2], &[1, 2, 2]).unwrap();
        probe(g, y)
    });
    fd_check(&[ramp(&[2, 3, 2, 2], 3.0), ramp(&[3], 1.0).map(|v| v + 1.0), ramp(&[3], 1.0)], |g, v| {
        let mut st = BatchNormStats::new(3);
        let y = g.batch_norm(v[0], v[1], v[2], &mut st, Mode::Train, BatchNormConfig::default()).unwrap();
        probe(g, y)
    });
    fd_check(&[ramp(&[2, 3, 4], 3.0), ramp(&[3], 0.5)], |g, v| {
        let y = g.prelu(v[0], v[1]).unwrap();
        let y = g.relu(y);
        probe(g, y)
    });
    fd_check(&[ramp(&[2, 3, 4], 3.0)], |g, v| {
        let y = g.softmax(v[0], 1).unwrap();
        probe(g, y)
    });
    fd_check(&[ramp(&[2, 3, 2], 3.0), ramp(&[2, 1, 2], 1.0)], |g, v| {
        let c = g.concat(v[0], v[1], 1).unwrap();
        let s = g.slice(c, 1, 1, 3).unwrap();
        let a = g.add(s, v[0]).unwrap();
        probe(g, a)
    });
}

#[test]
fn losses_match_finite_differences() {
    let target = [0u8, 2, 1, 1, 0, 2, 2, 0];
    fd_check(&[ramp(&[2, 3, 2, 2], 4.0)], |g, v| g.cross_entropy(v[0], &target, &[1.0, 2.0, 0.5]).unwrap());
    fd_check(&[ramp(&[2, 3, 2, 2], 4.0)], |g, v| {
        let p = g.softmax(v[0], 1).unwrap();
        g.soft_dice(p, &target, &[1, 2], 0.1).unwrap()
    });
}

#[test]
fn loss_argument_errors() {
    let mut g = Graph::<f64>::new();
    let s = g.constant(Tensor::zeros(&[1, 3, 2]));
    assert!(g.cross_entropy(s, &[0, 3], &[1.0; 3]).is_err());
    assert!(g.cross_entropy(s, &[0], &[1.0; 3]).is_err());
    assert!(g.soft_dice(s, &[0, 1], &[1], 0.0).is_err());
    assert!(g.soft_dice(s, &[0, 1], &[5], 0.1).is_err());
}

#[test]
fn introspection_reports_ops_and_consumers() {
    let mut g = Graph::<f32>::new();
    let a = g.param(Tensor::zeros(&[2]));
    let b = g.param(Tensor::zeros(&[2]));
    let c = g.add(a, b).unwrap();
    let d = g.mul(c, a).unwrap();
    assert_eq!(g.op_name(c), "add");
    assert_eq!(g.inputs(d), vec![c, a]);
    assert_eq!(g.consumers(a), vec![c, d]);
    assert_eq!(g.len(), 4);
}
