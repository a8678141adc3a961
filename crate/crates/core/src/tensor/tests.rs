use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: Shape, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    t(shape, (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Direct nested-loop cross-correlation.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let ho = (xs.height + 2 * pad - ws.height) / stride + 1;
    let wo = (xs.width + 2 * pad - ws.width) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(xs.batch, ws.batch, ho, wo));
    for n in 0..xs.batch {
        for co in 0..ws.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[co];
                    for ci in 0..xs.channels {
                        for ky in 0..ws.height {
                            for kx in 0..ws.width {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs.height as isize || ix >= xs.width as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((n * xs.channels + ci) * xs.height + iy as usize) * xs.width + ix as usize];
                                let wv = w.data()[((co * ws.channels + ci) * ws.height + ky) * ws.width + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((n * ws.batch + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Max relative deviation between tape gradients and central differences
/// of `f` w.r.t. every element of every input.
fn fd_max_rel(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let root = f(&mut tape, &vars);
    tape.backward(root).unwrap();
    let signature = tape.branch_signature();
    let eval = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let root = f(&mut tape, &vars);
        (tape.value(root).item().unwrap(), tape.branch_signature())
    };
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = tape.grad_tensor(vars[k]);
        for i in 0..x.shape().numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let (fp, sp) = eval(&plus);
            let (fm, sm) = eval(&minus);
            if sp != signature || sm != signature {
                continue; // straddles a kink
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn conv_of_ones_counts_neighbors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(Shape::new(1, 1, 4, 4), 1.0f64));
    let w = tape.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
    let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    let y = tape.value(y).data();
    assert_eq!(y[5], 9.0);
    assert_eq!(y[0], 4.0);
    assert_eq!(y[3], 4.0);
    assert_eq!(y[15], 4.0);
    assert_eq!(y[1], 6.0);
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let xin = random(Shape::new(2, 1, 5, 7), &mut rng);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let x = tape.constant(xin.clone());
    let w = tape.constant(t(Shape::new(1, 1, 3, 3), k));
    let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    assert_eq!(tape.value(y), &xin);
}

#[test]
fn stride_two_halves_resolution() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(Shape::new(1, 1, 256, 256)));
    let w = tape.constant(Tensor::zeros(Shape::new(4, 1, 3, 3)));
    let b = tape.constant(Tensor::zeros(Shape::new(1, 4, 1, 1)));
    let y = tape.conv2d(x, w, b, 2, 1).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 4, 128, 128));
    assert_eq!(conv_output_size(5, 3, 2, 1), Some(3));
    assert_eq!(conv_output_size(1, 3, 1, 0), None);
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(stride, pad, h, w) in &[(1, 1, 6, 5), (2, 1, 8, 8), (2, 1, 7, 9), (1, 0, 5, 5), (2, 0, 6, 7)] {
        let x = random(Shape::new(2, 3, h, w), &mut rng);
        let wt = random(Shape::new(4, 3, 3, 3), &mut rng);
        let b = random(Shape::new(1, 4, 1, 1), &mut rng);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant(x.clone()),
            tape.constant(wt.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        let want = naive_conv(&x, &wt, &b, stride, pad);
        assert_eq!(tape.shape(y), want.shape());
        for (a, b) in tape.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_shape_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
    let w = tape.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
    let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
    assert!(matches!(tape.conv2d(x, w, b, 1, 1), Err(crate::Error::Config(_))));
    let w = tape.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
    assert!(tape.conv2d(x, w, b, 3, 1).is_err());
}

#[test]
fn upsample_examples() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(Shape::new(1, 1, 1, 1), 7.0f64));
    let y = tape.upsample_nearest2x(x);
    assert_eq!(tape.value(y).data(), &[7.0; 4]);
    let z = tape.param(Tensor::zeros(Shape::new(1, 3, 2, 5)));
    let u = tape.upsample_nearest2x(z);
    assert_eq!(tape.shape(u), Shape::new(1, 3, 4, 10));

    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(Shape::new(1, 2, 3, 3)));
    let y = tape.upsample_nearest2x(x);
    // target well below y, so d/dy of the scaled mean is exactly 1
    let target = tape.constant(Tensor::full(Shape::new(1, 2, 6, 6), -10.0));
    let l = tape.l1_mean(y, target, None).unwrap();
    let s = tape.scale_shift(l, 72.0, 0.0);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| (g - 4.0).abs() < 1e-12));
}

#[test]
fn concat_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let a_val = random(Shape::new(1, 2, 4, 4), &mut rng);
    let a = tape.param(a_val.clone());
    let b = tape.param(Tensor::zeros(Shape::new(1, 3, 4, 4)));
    let c = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.shape(c), Shape::new(1, 5, 4, 4));
    assert_eq!(&tape.value(c).data()[..32], a_val.data());
    let first = tape.slice_channels(c, 0, 2).unwrap();
    assert_eq!(tape.value(first), &a_val);
    let target = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
    let l = tape.l1_mean(first, target, None).unwrap();
    tape.backward(l).unwrap();
    let ga = tape.grad(a).unwrap();
    for (g, x) in ga.iter().zip(a_val.data()) {
        assert_eq!(*g, x.signum() / 32.0);
    }
    assert!(tape.grad(b).unwrap().iter().all(|&g| g == 0.0));

    let bad = tape.param(Tensor::zeros(Shape::new(1, 1, 2, 4)));
    assert!(tape.concat_channels(a, bad).is_err());
}

#[test]
fn activation_examples() {
    let mut tape = Tape::new();
    let x = tape.param(t(Shape::new(1, 1, 1, 1), vec![-1.0]));
    let y = tape.leaky_relu(x, 0.2);
    assert!((tape.value(y).data()[0] + 0.2).abs() < 1e-15);

    let z = tape.param(Tensor::scalar(0.0f64));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item(), Some(0.5));
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(z).unwrap()[0], 0.25);

    let big = tape.constant(t(Shape::new(1, 1, 1, 3), vec![-800.0, 0.0, 800.0]));
    let sb = tape.sigmoid(big);
    assert!(tape.value(sb).is_finite());

    let q = tape.param(Tensor::scalar(2.0f64));
    let r = tape.scale_shift(q, 3.0, 1.0);
    assert_eq!(tape.value(r).item(), Some(7.0));
    tape.backward(r).unwrap();
    assert_eq!(tape.grad(q).unwrap()[0], 3.0);
}

#[test]
fn l1_mean_examples() {
    let mut tape = Tape::new();
    let s = Shape::new(1, 1, 1, 2);
    let p = tape.param(t(s, vec![1.0, 3.0]));
    let q = tape.constant(t(s, vec![2.0, 1.0]));
    let l = tape.l1_mean(p, q, None).unwrap();
    assert_eq!(tape.value(l).item(), Some(1.5));
    let mask = t(s, vec![1.0, 0.0]);
    let lm = tape.l1_mean(p, q, Some(&mask)).unwrap();
    assert_eq!(tape.value(lm).item(), Some(1.0));
    let same = tape.l1_mean(p, p, None).unwrap();
    assert_eq!(tape.value(same).item(), Some(0.0));
    tape.backward(lm).unwrap();
    assert_eq!(tape.grad(p).unwrap(), &[-1.0, 0.0]);

    let zero = t(s, vec![0.0, 0.0]);
    assert!(matches!(
        tape.l1_mean(p, q, Some(&zero)),
        Err(crate::Error::Degenerate(_))
    ));
    let nonbinary = t(s, vec![0.5, 1.0]);
    assert!(tape.l1_mean(p, q, Some(&nonbinary)).is_err());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0f64));
    let y = tape.scale_shift(x, 3.0, 0.0);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap()[0], 3.0);

    // two consumers: z = 2x + 5x
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.0f64));
    let a = tape.scale_shift(x, 2.0, 0.0);
    let b = tape.scale_shift(x, 5.0, 0.0);
    let z = tape.weighted_sum(&[(a, 1.0), (b, 1.0)]).unwrap();
    tape.backward(z).unwrap();
    assert_eq!(tape.grad(x).unwrap()[0], 7.0);

    let v = tape.param(Tensor::zeros(Shape::new(1, 1, 1, 2)));
    assert!(matches!(tape.backward(v), Err(crate::Error::Contract(_))));

    // unreachable tensors get zero gradients
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.0f64));
    let unused = tape.param(Tensor::scalar(4.0f64));
    let y = tape.sigmoid(x);
    tape.backward(y).unwrap();
    assert!(tape.grad(unused).is_none());
    assert_eq!(tape.grad_tensor(unused).data(), &[0.0]);
}

#[test]
fn gradcheck_conv_relu_l1_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(Shape::new(2, 2, 6, 6), &mut rng);
    let w = random(Shape::new(3, 2, 3, 3), &mut rng);
    let b = random(Shape::new(1, 3, 1, 1), &mut rng);
    let target = random(Shape::new(2, 3, 3, 3), &mut rng);
    let worst = fd_max_rel(&[x, w, b], |tape, v| {
        let y = tape.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
        let y = tape.relu(y);
        let tg = tape.constant(target.clone());
        tape.l1_mean(y, tg, None).unwrap()
    });
    assert!(worst < 1e-3, "worst relative deviation {worst}");
}

#[test]
fn gradcheck_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(Shape::new(1, 2, 3, 3), &mut rng);
    let b = random(Shape::new(1, 1, 3, 3), &mut rng);
    let w = random(Shape::new(2, 3, 3, 3), &mut rng);
    let bias = random(Shape::new(1, 2, 1, 1), &mut rng);
    let target = random(Shape::new(1, 2, 6, 6), &mut rng);
    let mask_vals: Vec<f64> = (0..72).map(|i| ((i * 7) % 3 != 0) as u8 as f64).collect();
    let mask = t(Shape::new(1, 2, 6, 6), mask_vals);
    let worst = fd_max_rel(&[a, b, w, bias, target], |tape, v| {
        let c = tape.concat_channels(v[0], v[1]).unwrap();
        let c = tape.leaky_relu(c, 0.2);
        let c = tape.conv2d(c, v[2], v[3], 1, 1).unwrap();
        let c = tape.upsample_nearest2x(c);
        let c = tape.sigmoid(c);
        let c = tape.scale_shift(c, 3.0, -1.0);
        let l1 = tape.l1_mean(c, v[4], Some(&mask)).unwrap();
        let s = tape.slice_channels(c, 1, 1).unwrap();
        let t1 = tape.slice_channels(v[4], 0, 1).unwrap();
        let l2 = tape.l1_mean(s, t1, None).unwrap();
        tape.weighted_sum(&[(l1, 0.7), (l2, 1.3)]).unwrap()
    });
    assert!(worst < 1e-3, "worst relative deviation {worst}");
}

#[test]
fn forward_is_deterministic_and_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(Shape::new(1, 3, 8, 8), &mut rng).cast::<f32>();
    let w = random(Shape::new(4, 3, 3, 3), &mut rng).cast::<f32>();
    let b = random(Shape::new(1, 4, 1, 1), &mut rng).cast::<f32>();
    let run = || {
        let mut tape = Tape::new();
        let v = [tape.constant(x.clone()), tape.param(w.clone()), tape.param(b.clone())];
        let y = tape.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
        tape.value(y).clone()
    };
    let a = run();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        run().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    let w_before = w.clone();
    let _ = run();
    assert_eq!(w, w_before);
}

#[test]
fn non_finite_values_are_located() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.0f64));
    let y = tape.scale_shift(x, f64::INFINITY, 0.0);
    let _ = tape.sigmoid(y);
    assert_eq!(tape.first_non_finite(), Some((y, "scale_shift")));
}
