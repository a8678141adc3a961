use super::*;
use proptest::prelude::*;
use rand::Rng;

fn input<T: Real>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel())
        .map(|_| T::from_f64(rng.random_range(0.0..1.0)))
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn small(head: OutputHead) -> UNetConfig {
    let mut cfg = UNetConfig::desk_depth(16, 16, 10.0);
    cfg.head = head;
    cfg
}

#[test]
fn reference_square_bottleneck() {
    let s = UNetConfig::reference_square(OutputHead::Depth)
        .shape_schedule()
        .unwrap();
    let b = s.bottleneck();
    assert_eq!((b.channels, b.height, b.width), (1024, 1, 1));
    assert_eq!(
        s.output,
        ActShape {
            channels: 1,
            height: 256,
            width: 256
        }
    );
    assert_eq!(s.encoder[0].height, 256);
}

#[test]
fn reference_wide_bottleneck() {
    let s = UNetConfig::reference_wide(OutputHead::Depth).shape_schedule().unwrap();
    let b = s.bottleneck();
    assert_eq!((b.channels, b.height, b.width), (512, 1, 3));
    assert_eq!(
        s.output,
        ActShape {
            channels: 1,
            height: 256,
            width: 768
        }
    );
}

#[test]
fn desk_bottleneck_is_8x8() {
    let s = UNetConfig::desk_depth(64, 64, 10.0).shape_schedule().unwrap();
    let b = s.bottleneck();
    assert_eq!((b.height, b.width), (8, 8));
    assert_eq!(b.channels, 64);
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = UNetConfig::desk_depth(60, 64, 10.0);
    assert!(matches!(build_unet::<f32>(cfg.clone(), 0), Err(Error::Config(_))));
    cfg.input_height = 64;
    cfg.levels = 0;
    cfg.channels = vec![8];
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = UNetConfig::desk_depth(64, 64, 0.0);
    assert!(cfg.validate().is_err());
    cfg.max_depth = 10.0;
    cfg.channels.pop();
    assert!(cfg.validate().is_err());
}

#[test]
fn runtime_input_must_be_divisible() {
    let net = build_unet::<f32>(small(OutputHead::Depth), 1).unwrap();
    let err = net.infer(&input(Shape::new(1, 3, 12, 16), 0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let err = net.infer(&input(Shape::new(1, 2, 16, 16), 0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn parameter_count_matches_built_network() {
    for cfg in [
        small(OutputHead::Depth),
        small(OutputHead::Rgb),
        UNetConfig::desk_depth(64, 64, 80.0),
    ] {
        let net = build_unet::<f32>(cfg.clone(), 3).unwrap();
        assert_eq!(net.parameter_count(), cfg.parameter_count());
    }
}

#[test]
fn initialization_is_deterministic_and_he_bounded() {
    let a = build_unet::<f32>(small(OutputHead::Depth), 7).unwrap();
    let b = build_unet::<f32>(small(OutputHead::Depth), 7).unwrap();
    let c = build_unet::<f32>(small(OutputHead::Depth), 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for p in a.params() {
        let s = p.value.shape();
        if p.name.ends_with(".bias") {
            assert!(p.value.data().iter().all(|&v| v == 0.0));
        } else {
            let bound = (6.0 / (s.channels * 9) as f32).sqrt();
            assert!(p.value.data().iter().all(|v| v.abs() <= bound), "{}", p.name);
        }
    }
}

#[test]
fn depnet_range_shape_and_determinism() {
    let net = build_unet::<f32>(UNetConfig::desk_depth(32, 32, 10.0), 2).unwrap();
    let x = input::<f32>(Shape::new(2, 3, 32, 32), 4);
    let run = || {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let v = tape.constant(x.clone());
        let y = depnet_forward(&net, &mut tape, &bound, v).unwrap();
        tape.value(y).clone()
    };
    let y1 = run();
    let y2 = run();
    assert_eq!(y1.shape(), Shape::new(2, 1, 32, 32));
    assert!(y1.data().iter().all(|&d| d > 0.0 && d < 10.0));
    assert_eq!(y1.data(), y2.data());
    assert_eq!(net.forward_calls(), 2);
}

#[test]
fn synnet_range_and_shape() {
    let net = build_unet::<f32>(UNetConfig::desk_rgb(16, 32), 5).unwrap();
    let x = input::<f32>(Shape::new(1, 3, 16, 32), 1);
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let v = tape.constant(x);
    let y = synnet_forward(&net, &mut tape, &bound, v).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 3, 16, 32));
    assert!(tape.value(y).data().iter().all(|&c| c > 0.0 && c < 1.0));
}

#[test]
fn head_mismatch_is_contract_error() {
    let dep = build_unet::<f32>(small(OutputHead::Depth), 0).unwrap();
    let syn = build_unet::<f32>(small(OutputHead::Rgb), 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(input(Shape::new(1, 3, 16, 16), 0));
    let bd = dep.bind(&mut tape);
    let bs = syn.bind(&mut tape);
    assert!(matches!(
        synnet_forward(&dep, &mut tape, &bd, x),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        depnet_forward(&syn, &mut tape, &bs, x),
        Err(Error::Contract(_))
    ));
    let partial = BoundParams {
        vars: bd.vars()[..4].to_vec(),
    };
    assert!(matches!(dep.forward(&mut tape, &partial, x), Err(Error::Contract(_))));
}

fn check_trace(cfg: &UNetConfig, batch: usize) {
    let net = build_unet::<f32>(cfg.clone(), 9).unwrap();
    let schedule = cfg.shape_schedule().unwrap();
    let mut tape = Tape::new();
    let bound = net.bind_frozen(&mut tape);
    let x = tape.constant(input(
        Shape::new(batch, cfg.in_channels, cfg.input_height, cfg.input_width),
        2,
    ));
    let trace = net.forward_traced(&mut tape, &bound, x).unwrap();
    let as_shape = |a: ActShape| Shape::new(batch, a.channels, a.height, a.width);
    for (i, (&v, &a)) in trace.encoder.iter().zip(&schedule.encoder).enumerate() {
        assert_eq!(tape.shape(v), as_shape(a), "encoder {i}");
        assert_eq!(a.height, cfg.input_height >> i);
    }
    for (i, (&v, &a)) in trace.decoder.iter().zip(&schedule.decoder).enumerate() {
        assert_eq!(tape.shape(v), as_shape(a), "decoder {i}");
    }
    assert_eq!(tape.shape(trace.output), as_shape(schedule.output));
    for i in 0..cfg.levels {
        let enc = tape.value(trace.encoder[i]);
        let cat = tape.value(trace.concat[i]);
        let item = enc.shape().item();
        for b in 0..batch {
            assert_eq!(&cat.batch_item(b)[..item], enc.batch_item(b), "skip {i}");
        }
    }
}

#[test]
fn traced_shapes_and_skips_desk() {
    check_trace(&UNetConfig::desk_depth(16, 24, 10.0), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn schedule_matches_runtime(levels in 1usize..4, base in 1usize..5, hm in 1usize..3, wm in 1usize..3, rgb in any::<bool>()) {
        let f = 1 << levels;
        let head = if rgb { OutputHead::Rgb } else { OutputHead::Depth };
        let cfg = UNetConfig::with_schedule(levels, base, 16, 3, head, 5.0, f * hm, f * wm);
        check_trace(&cfg, 1);
    }

    #[test]
    fn header_round_trip(levels in 1usize..9, base in 1usize..32, cap in 1usize..2048, rgb in any::<bool>(), md in 0.5f64..100.0) {
        let head = if rgb { OutputHead::Rgb } else { OutputHead::Depth };
        let cfg = UNetConfig::with_schedule(levels, base, cap, 3, head, md, 256, 768);
        prop_assert_eq!(UNetConfig::from_header(&cfg.to_header()).unwrap(), cfg);
    }
}

#[test]
fn section_round_trip_and_mismatch() {
    let net = build_unet::<f32>(small(OutputHead::Rgb), 11).unwrap();
    let section = net.to_section("synnet", None);
    let back = Network::<f32>::from_section(&section).unwrap();
    assert_eq!(back, net);

    let mut broken = section.clone();
    broken.params.pop();
    assert!(Network::<f32>::from_section(&broken).is_err());
    let mut renamed = section;
    renamed.params[0].0 = "bogus".into();
    assert!(Network::<f32>::from_section(&renamed).is_err());
    assert!(UNetConfig::from_header("levels=3\nwhat=1\n").is_err());
}

type Perturbed<'a> = &'a dyn Fn(&[(usize, usize, f64)]) -> (f64, u64);

/// Central differences on a handful of scalars, skipping samples whose
/// perturbation crosses a ReLU/L1 kink.
fn fd_check(eval: Perturbed, analytic: &dyn Fn(usize, usize) -> f64, picks: &[(usize, usize)]) -> usize {
    let h = 1e-6;
    let (_, sig0) = eval(&[]);
    let mut checked = 0;
    for &(p, i) in picks {
        let (lp, sp) = eval(&[(p, i, h)]);
        let (lm, sm) = eval(&[(p, i, -h)]);
        if sp != sig0 || sm != sig0 {
            continue;
        }
        let num = (lp - lm) / (2.0 * h);
        let ana = analytic(p, i);
        let scale = num.abs().max(ana.abs()).max(1e-7);
        assert!(
            (num - ana).abs() / scale < 1e-3,
            "param {p}[{i}]: numeric {num} analytic {ana}"
        );
        checked += 1;
    }
    checked
}

#[test]
fn weight_gradients_match_finite_differences() {
    let net = build_unet::<f64>(small(OutputHead::Depth), 21).unwrap();
    let x = input::<f64>(Shape::new(1, 3, 16, 16), 5);
    let target = input::<f64>(Shape::new(1, 1, 16, 16), 6);
    let target = Tensor::new(target.shape(), target.data().iter().map(|v| v * 10.0).collect()).unwrap();

    let run = |net: &Network<f64>| {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let t = tape.constant(target.clone());
        let y = depnet_forward(net, &mut tape, &bound, xv).unwrap();
        let loss = tape.l1_mean(y, t, None).unwrap();
        (tape, bound, loss)
    };
    let (mut tape, bound, loss) = run(&net);
    tape.backward(loss).unwrap();
    let grads = net.gradients(&tape, &bound);

    let eval = |delta: &[(usize, usize, f64)]| {
        let mut n = net.clone();
        for &(p, i, d) in delta {
            n.params_mut()[p].value.data_mut()[i] += d;
        }
        let (tape, _, loss) = run(&n);
        (tape.value(loss).item().unwrap(), tape.branch_signature())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let picks: Vec<(usize, usize)> = (0..40)
        .map(|_| {
            let p = rng.random_range(0..net.params().len());
            (p, rng.random_range(0..net.params()[p].value.data().len()))
        })
        .collect();
    let checked = fd_check(&eval, &|p, i| grads[p].data()[i], &picks);
    assert!(checked >= 10, "only {checked} kink-free samples");
}

#[test]
fn synnet_gradient_reaches_input() {
    let net = build_unet::<f64>(small(OutputHead::Rgb), 4).unwrap();
    let x = input::<f64>(Shape::new(1, 3, 16, 16), 8);
    let target = input::<f64>(Shape::new(1, 3, 16, 16), 9);
    let run = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let bound = net.bind_frozen(&mut tape);
        let xv = tape.param(x.clone());
        let t = tape.constant(target.clone());
        let y = synnet_forward(&net, &mut tape, &bound, xv).unwrap();
        let loss = tape.l1_mean(y, t, None).unwrap();
        (tape, xv, loss)
    };
    let (mut tape, xv, loss) = run(&x);
    tape.backward(loss).unwrap();
    let g = tape.grad_tensor(xv);
    assert!(g.data().iter().any(|&v| v != 0.0));

    let eval = |delta: &[(usize, usize, f64)]| {
        let mut xx = x.clone();
        for &(_, i, d) in delta {
            xx.data_mut()[i] += d;
        }
        let (tape, _, loss) = run(&xx);
        (tape.value(loss).item().unwrap(), tape.branch_signature())
    };
    let picks: Vec<(usize, usize)> = (0..20).map(|k| (0, k * 37 % x.data().len())).collect();
    let checked = fd_check(&eval, &|_, i| g.data()[i], &picks);
    assert!(checked >= 5);
}
