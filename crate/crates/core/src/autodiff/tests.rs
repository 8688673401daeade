use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn check_gradients(shapes: &[&[usize]], scale: f64, tol: f64, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    check_gradients_step(shapes, scale, tol, 1e-6, build)
}

/// Compares the tape gradient of `r . f(x)` against central differences
/// with step `h`.
fn check_gradients_step(shapes: &[&[usize]], scale: f64, tol: f64, h: f64, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs: Vec<Vec<f64>> = shapes.iter().map(|s| random(&mut rng, s.iter().product(), scale)).collect();
    let eval = |inputs: &[Vec<f64>]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            shapes.iter().zip(inputs).map(|(s, d)| tape.input(Tensor::new(s, d.clone()).unwrap())).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = eval(&inputs);
    let r = random(&mut rng, tape.value(out).len(), 1.0);
    let back = tape.backward(&[(out, &r)]).unwrap();
    for (k, var) in vars.iter().enumerate() {
        let analytic = back.grad(*var).map(<[f64]>::to_vec).unwrap_or(vec![0.0; inputs[k].len()]);
        let mut num = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k][i] += h;
            let mut minus = inputs.clone();
            minus[k][i] -= h;
            let f = |x: &[Vec<f64>]| {
                let (t, _, o) = eval(x);
                t.value(o).data().iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
            };
            num[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        assert!(diff / norm < tol, "input {k}: relative error {}", diff / norm);
    }
}

#[test]
fn conv2d_gradients() {
    check_gradients(&[&[2, 6, 6], &[3, 2, 4, 4], &[3]], 1.0, 1e-3, |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap()
    });
    check_gradients(&[&[2, 5, 5], &[2, 2, 3, 3]], 1.0, 1e-3, |t, v| t.conv2d(v[0], v[1], None, 1, 1).unwrap());
}

#[test]
fn conv_transpose2d_gradients() {
    check_gradients(&[&[2, 3, 3], &[2, 3, 4, 4], &[3]], 1.0, 1e-3, |t, v| {
        t.conv_transpose2d(v[0], v[1], Some((v[2], BiasMode::PerChannel)), 2, 1).unwrap()
    });
    check_gradients(&[&[2, 3, 3], &[2, 1, 4, 4], &[1, 6, 6]], 1.0, 1e-3, |t, v| {
        t.conv_transpose2d(v[0], v[1], Some((v[2], BiasMode::Spatial)), 2, 1).unwrap()
    });
}

#[test]
fn conv_down_gradients_on_five_channels() {
    check_gradients_step(&[&[5, 8, 8], &[4, 5, 4, 4], &[4]], 1.0, 1e-3, 1e-4, |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap()
    });
}

#[test]
fn conv_up_spatial_bias_alone_on_zero_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let b = random(&mut rng, 2 * 8 * 8, 1.0);
    let mut t = Tape::new();
    let x = t.input(Tensor::zeros(&[3, 4, 4]));
    let w = t.input(Tensor::new(&[3, 2, 4, 4], random(&mut rng, 96, 1.0)).unwrap());
    let bias = t.input(Tensor::new(&[2, 8, 8], b.clone()).unwrap());
    let y = t.conv_transpose2d(x, w, Some((bias, BiasMode::Spatial)), 2, 1).unwrap();
    assert_eq!(t.value(y).shape(), &[2, 8, 8]);
    assert_eq!(t.value(y).data(), &b[..]);
}

#[test]
fn conv_up_per_channel_bias_is_additive() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xs = random(&mut rng, 3 * 4 * 4, 1.0);
    let ws = random(&mut rng, 3 * 2 * 16, 1.0);
    let run = |bias: Option<[f64; 2]>| {
        let mut t = Tape::new();
        let x = t.input(Tensor::new(&[3, 4, 4], xs.clone()).unwrap());
        let w = t.input(Tensor::new(&[3, 2, 4, 4], ws.clone()).unwrap());
        let b = bias.map(|b| (t.input(Tensor::new(&[2], b.to_vec()).unwrap()), BiasMode::PerChannel));
        let y = t.conv_transpose2d(x, w, b, 2, 1).unwrap();
        t.value(y).data().to_vec()
    };
    let plain = run(None);
    let biased = run(Some([0.5, -1.25]));
    for (i, (p, q)) in plain.iter().zip(&biased).enumerate() {
        let c = if i < 64 { 0.5 } else { -1.25 };
        assert!((q - p - c).abs() < 1e-12);
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, 2 * 8 * 8, 1.0);
    let y = random(&mut rng, 3 * 4 * 4, 1.0);
    let w = random(&mut rng, 3 * 2 * 16, 1.0);
    let g = ConvGeometry::conv(&[2, 8, 8], &[3, 2, 4, 4], 2, 1).unwrap();
    let cx = conv::conv2d_forward(&g, &x, &w, None);
    // the same buffer read as [Cin=3, Cout=2, k, k] after swapping roles
    let mut wt = vec![0.0; w.len()];
    for co in 0..3 {
        for ci in 0..2 {
            for k in 0..16 {
                wt[(co * 2 + ci) * 16 + k] = w[(co * 2 + ci) * 16 + k];
            }
        }
    }
    let gt = ConvGeometry::transposed(&[3, 4, 4], &[3, 2, 4, 4], 2, 1).unwrap();
    let ty = conv::conv_transpose2d_forward(&gt, &y, &wt);
    let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
}

#[test]
fn linear_and_pointwise_gradients() {
    check_gradients(&[&[5], &[4, 5], &[4]], 1.0, 1e-3, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
        let y = t.leaky_relu(y, 0.2);
        let y = t.scale(y, 1.7);
        t.add(y, v[2]).unwrap()
    });
    check_gradients(&[&[6]], 1.0, 1e-3, |t, v| {
        let a = t.affine_const(v[0], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0], &[0.1; 6]).unwrap();
        let s = t.slice(a, 2, &[2, 2]).unwrap();
        let r = t.reshape(s, &[4]).unwrap();
        t.concat(&[r, v[0]])
    });
}

#[test]
fn leaky_relu_slope() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
    let y = tape.leaky_relu(x, 0.2);
    assert_eq!(tape.value(y).data(), &[-0.2, 2.0]);
}

#[test]
fn reparameterize_and_kl_gradients() {
    let noise = vec![0.3, -1.2, 0.8, 2.0];
    check_gradients(&[&[4], &[4]], 0.5, 1e-3, |t, v| t.reparameterize(v[0], v[1], noise.clone()).unwrap());
    check_gradients(&[&[4], &[4]], 0.5, 1e-4, |t, v| t.kl(v[0], v[1]).unwrap());
}

#[test]
fn kl_of_standard_normal_is_zero() {
    assert_eq!(kl_divergence(&[0.0; 8], &[0.0; 8]), 0.0);
    // one dimension with mean 1 and unit variance
    assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
}

#[test]
fn warp_op_gradients() {
    check_gradients(&[&[2, 5, 5]], 1.0, 1e-3, |t, v| t.integrate_warp(v[0]).unwrap());
    check_gradients(&[&[3, 5, 5], &[2, 5, 5]], 1.0, 1e-3, |t, v| {
        let grid = t.integrate_warp(v[1]).unwrap();
        t.sample_warp(v[0], grid).unwrap()
    });
}

#[test]
fn color_rigid_mse_gradients() {
    check_gradients(&[&[3, 2, 2], &[3], &[3]], 1.0, 1e-3, |t, v| t.color_correct(v[0], v[1], v[2]).unwrap());
    let rot: Matrix3<f64> = *Rotation3::from_euler_angles(0.3, -0.2, 0.9).matrix();
    check_gradients(&[&[6]], 1.0, 1e-3, |t, v| t.rigid(v[0], rot, Vector3::new(1.0, 2.0, 3.0)).unwrap());
    check_gradients(&[&[5], &[5]], 1.0, 1e-3, |t, v| {
        let a = t.mse(v[0], vec![0.5; 5]).unwrap();
        let b = t.mse(v[1], vec![-0.2; 5]).unwrap();
        t.weighted_sum(&[(a, 1.0), (b, 0.25)]).unwrap()
    });
}

#[test]
fn parameter_gradients_accumulate_across_uses() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&store, id);
    let b = tape.param(&store, id);
    let s = tape.add(a, b).unwrap();
    let l = tape.mse(s, vec![0.0, 0.0]).unwrap();
    let back = tape.backward(&[(l, &[1.0])]).unwrap();
    // l = mean((2w)^2), dl/dw = 4w
    assert_eq!(back.params.get(id).unwrap(), &[4.0, -8.0]);
}

#[test]
fn stride_two_downsampling_reaches_four_by_four() {
    let mut size = 1024;
    let mut tape = Tape::new();
    let mut x = tape.constant(Tensor::zeros(&[3, size, size]));
    let mut cin = 3;
    while size > 4 {
        let w = tape.constant(Tensor::zeros(&[1, cin, 4, 4]));
        x = tape.conv2d(x, w, None, 2, 1).unwrap();
        cin = 1;
        size /= 2;
    }
    assert_eq!(tape.value(x).shape(), &[1, 4, 4]);
}

#[test]
fn delta_kernel_subsamples() {
    let n = 8;
    let data: Vec<f64> = (0..n * n).map(|i| i as f64).collect();
    let mut kernel = vec![0.0; 16];
    kernel[4 + 1] = 1.0;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, n, n], data.clone()).unwrap());
    let w = tape.constant(Tensor::new(&[1, 1, 4, 4], kernel).unwrap());
    let y = tape.conv2d(x, w, None, 2, 1).unwrap();
    for oy in 0..4 {
        for ox in 0..4 {
            assert_eq!(tape.value(y).data()[oy * 4 + ox], data[2 * oy * n + 2 * ox]);
        }
    }
}

#[test]
fn odd_input_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 7, 7]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
    assert!(matches!(tape.conv2d(x, w, None, 2, 1), Err(crate::Error::Shape { .. })));
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let mut grads = Gradients::new();
    grads.accumulate(id, &[0.0; 3]);
    let mut adam = Adam::new(0.1);
    adam.step(&mut store, &grads).unwrap();
    assert_eq!(store.get(id).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn adam_first_step_has_learning_rate_magnitude() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::new(&[2], vec![0.0, 0.0]).unwrap()).unwrap();
    let mut grads = Gradients::new();
    grads.accumulate(id, &[5.0, -0.01]);
    let mut adam = Adam::new(0.1);
    adam.step(&mut store, &grads).unwrap();
    let d = store.get(id).data();
    assert!((d[0] + 0.1).abs() < 1e-6);
    assert!((d[1] - 0.1).abs() < 1e-4);
}

#[test]
fn adam_minimizes_quadratic() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(0.0)).unwrap();
    let mut adam = Adam::new(0.1);
    for _ in 0..200 {
        let x = store.get(id).item();
        let mut g = Gradients::new();
        g.accumulate(id, &[2.0 * (x - 3.0)]);
        adam.step(&mut store, &g).unwrap();
    }
    assert!((store.get(id).item() - 3.0).abs() < 1e-2);
}

#[test]
fn adam_rejects_nan() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(1.0)).unwrap();
    let mut g = Gradients::new();
    g.accumulate(id, &[f64::NAN]);
    assert!(matches!(Adam::new(0.1).step(&mut store, &g), Err(crate::Error::NonFinite(_))));
    assert_eq!(store.get(id).item(), 1.0);
}

#[test]
fn duplicate_parameter_name_is_rejected() {
    let mut store = ParamStore::new();
    store.add_zeros("a", &[1]).unwrap();
    assert!(matches!(store.add_zeros("a", &[1]), Err(crate::Error::Duplicate(_))));
}
