//! Acceptance gate: ten criteria, one pass/fail line each, run sequentially
//! in a single test so timing-sensitive checks own the machine.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines
//! on success; on failure they are printed by the harness.

use std::time::{Duration, Instant};

use denseflow::data::{
    gen_toy_pair, kitti_flow_from_u16, read_flo, write_flo, FlowSample, ToyConfig,
};
use denseflow::eval::{epe, zero_flow_baseline};
use denseflow::flow::FlowField;
use denseflow::gradcheck::{gradcheck, run_primitive_suite};
use denseflow::loss::{charbonnier_value, multiscale_loss, CharbonnierParams, LossWeights};
use denseflow::net::{Network, NetworkConfig};
use denseflow::rng::StreamRng;
use denseflow::tape::Tape;
use denseflow::train::{
    eval_epe, load_checkpoint, save_checkpoint, train, AdamState, Checkpoint, TrainConfig,
};
use denseflow::Tensor;

fn rand_image(shape: &[usize], rng: &mut StreamRng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_in(0.1, 0.9))
}

/// Fractional flow values bounded away from integer sampling offsets.
fn fractional_flow(shape: &[usize], rng: &mut StreamRng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        sign * rng.uniform_in(0.15, 0.45)
    })
}

fn random_field(rng: &mut StreamRng, w: usize, h: usize) -> FlowField {
    FlowField::new(
        w,
        h,
        (0..w * h).map(|_| rng.uniform_in(-8.0, 8.0) as f32).collect(),
        (0..w * h).map(|_| rng.uniform_in(-8.0, 8.0) as f32).collect(),
    )
    .unwrap()
}

fn toy_set(cfg: &ToyConfig, root: &StreamRng, label: &str, count: usize) -> Vec<FlowSample> {
    (0..count)
        .map(|i| gen_toy_pair(cfg, &root.child(label).child_indexed("sample", i as u64)).unwrap())
        .collect()
}

// ---- criteria -------------------------------------------------------------

fn criterion_1_gradients() -> Result<(), String> {
    let start = Instant::now();
    for report in run_primitive_suite(0).map_err(|e| e.to_string())? {
        if !report.passed() {
            return Err(format!(
                "primitive {} max_rel_err {:.3e} exceeds {:.0e}",
                report.name,
                report.max_rel_err(),
                report.tol
            ));
        }
    }
    let mut rng = StreamRng::new(41);
    let i1 = rand_image(&[1, 3, 8, 8], &mut rng);
    let i2 = rand_image(&[1, 3, 8, 8], &mut rng);
    let f_coarse = fractional_flow(&[1, 2, 4, 4], &mut rng);
    let f_fine = fractional_flow(&[1, 2, 8, 8], &mut rng);
    let weights = LossWeights::new(vec![0.08, 0.01]).unwrap();
    let composed = gradcheck(
        "multiscale_loss",
        |tape, vars| {
            let loss = multiscale_loss(
                tape,
                &[vars[2], vars[3]],
                vars[0],
                vars[1],
                &weights,
                &CharbonnierParams::default(),
            )?;
            Ok(loss.total)
        },
        &[i1, i2, f_coarse, f_fine],
        1e-4,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    if !composed.passed() {
        return Err(format!(
            "composed multiscale loss max_rel_err {:.3e}",
            composed.max_rel_err()
        ));
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(300) {
        return Err(format!("gradient suite took {elapsed:?}, budget 5 min"));
    }
    Ok(())
}

fn criterion_2_warp_identities() -> Result<(), String> {
    let mut rng = StreamRng::new(42);
    let (h, w) = (8, 10);
    let image = rand_image(&[1, 3, h, w], &mut rng);

    let warp = |flow: &Tensor<f64>| -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let img = tape.constant(image.clone());
        let fl = tape.constant(flow.clone());
        let out = tape.bilinear_warp(img, fl).unwrap();
        tape.value(out).data().to_vec()
    };

    let zero = warp(&Tensor::zeros(vec![1, 2, h, w]));
    for (a, b) in zero.iter().zip(image.data()) {
        if (a - b).abs() > 1e-6 {
            return Err(format!("zero-flow warp error {:.3e}", (a - b).abs()));
        }
    }

    // u = 1: interior output column x must equal image column x + 1 exactly
    let shift = Tensor::from_fn(vec![1, 2, h, w], |i| if i < h * w { 1.0 } else { 0.0 });
    let shifted = warp(&shift);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w - 1 {
                let got = shifted[(c * h + y) * w + x];
                let want = image.data()[(c * h + y) * w + x + 1];
                if got != want {
                    return Err(format!("integer shift differs at ({c},{y},{x})"));
                }
            }
        }
    }

    // ramp image I(x) = x sampled at x + 0.5 must read x + 0.5
    let ramp = Tensor::from_fn(vec![1, 1, h, w], |i| (i % w) as f64);
    let half = Tensor::from_fn(vec![1, 2, h, w], |i| if i < h * w { 0.5 } else { 0.0 });
    let mut tape = Tape::<f64>::new();
    let img = tape.constant(ramp);
    let fl = tape.constant(half);
    let out = tape.bilinear_warp(img, fl).unwrap();
    let data = tape.value(out).data().to_vec();
    for y in 0..h {
        for x in 0..w - 1 {
            let got = data[y * w + x];
            if (got - (x as f64 + 0.5)).abs() > 1e-6 {
                return Err(format!("fractional ramp sample at ({y},{x}) reads {got}"));
            }
        }
    }
    Ok(())
}

fn criterion_3_charbonnier_constants() -> Result<(), String> {
    let p = CharbonnierParams::default();
    let at0 = charbonnier_value(0.0, &p);
    let at1 = charbonnier_value(1.0, &p);
    if (at0 - 0.0316228).abs() > 1e-7 {
        return Err(format!("rho(0) = {at0}"));
    }
    if (at1 - 1.00000025).abs() > 1e-7 {
        return Err(format!("rho(1) = {at1}"));
    }
    Ok(())
}

fn criterion_4_channel_laws() -> Result<(), String> {
    let cfg = NetworkConfig {
        growth_rate: 12,
        layers_per_block: 4,
        initial_channels: 16,
        num_blocks_down: 2,
        num_blocks_up: 2,
        flow_levels: 3,
        ..NetworkConfig::default()
    };
    let net = Network::build(&cfg, 0).map_err(|e| e.to_string())?;
    let mut shapes = Vec::new();
    net.visit_params(&mut |name, t| shapes.push((name.to_string(), t.shape().to_vec())));
    let shape_of = |name: &str| -> Result<Vec<usize>, String> {
        shapes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.clone())
            .ok_or_else(|| format!("parameter {name} missing"))
    };
    // first contracting block: 16 in, 16 + 4*12 = 64 out, witnessed by the
    // channel-preserving transition convolution that consumes it
    let td = shape_of("td0.conv.w")?;
    if td != vec![64, 64, 1, 1] {
        return Err(format!("td0 conv shape {td:?}, contracting output is not 64"));
    }
    // expanding blocks emit layers*growth = 48 channels, witnessed by the
    // flow heads that consume them
    for head in ["head1.w", "head2.w"] {
        let s = shape_of(head)?;
        if s != vec![2, 48, 3, 3] {
            return Err(format!("{head} shape {s:?}, expanding output is not 48"));
        }
    }
    Ok(())
}

fn criterion_5_parameter_count() -> Result<(), String> {
    let default = Network::build(&NetworkConfig::default(), 0).map_err(|e| e.to_string())?;
    let n = default.param_count();
    if !(1_500_000..=2_500_000).contains(&n) {
        return Err(format!("default parameter count {n}"));
    }
    let deeper_cfg = NetworkConfig::deeper();
    let deeper = Network::build(&deeper_cfg, 0).map_err(|e| e.to_string())?;
    let mut rng = StreamRng::new(5);
    let i1 = Tensor::from_fn(vec![1, 3, 64, 64], |_| rng.uniform_in(0.0, 1.0) as f32);
    let i2 = Tensor::from_fn(vec![1, 3, 64, 64], |_| rng.uniform_in(0.0, 1.0) as f32);
    let flows = deeper.forward(&i1, &i2).map_err(|e| e.to_string())?;
    let extents: Vec<(usize, usize)> = flows.iter().map(|f| (f.width, f.height)).collect();
    let want: Vec<(usize, usize)> = (0..deeper_cfg.flow_levels)
        .map(|l| {
            let s = 64 >> (deeper_cfg.flow_levels - 1 - l);
            (s, s)
        })
        .collect();
    if extents != want {
        return Err(format!("deeper pyramid extents {extents:?}, want {want:?}"));
    }
    Ok(())
}

fn criterion_6_pyramid_geometry() -> Result<(), String> {
    let net = Network::build(&NetworkConfig::default(), 3).map_err(|e| e.to_string())?;
    let mut rng = StreamRng::new(6);
    let frame = Tensor::from_fn(vec![1, 3, 64, 64], |_| rng.uniform_in(0.1, 0.9) as f32);
    let flows = net.forward(&frame, &frame).map_err(|e| e.to_string())?;
    let extents: Vec<usize> = flows.iter().map(|f| f.width).collect();
    if extents != [4, 8, 16, 32, 64] {
        return Err(format!("pyramid extents {extents:?}"));
    }
    for (l, f) in flows.iter().enumerate() {
        if f.u.iter().chain(&f.v).any(|&x| x != 0.0) {
            return Err(format!("freshly built network emits nonzero flow at level {l}"));
        }
    }
    // identical frames and zero flow: every level contributes w[l]*rho(0)
    let weights = LossWeights::default_for(5);
    let p = CharbonnierParams::default();
    let mut tape = Tape::<f64>::new();
    let i1 = tape.constant(frame.cast::<f64>());
    let i2 = tape.constant(frame.cast::<f64>());
    let flow_vars: Vec<_> = flows
        .iter()
        .map(|f| tape.constant(Tensor::zeros(vec![1, 2, f.height, f.width])))
        .collect();
    let loss = multiscale_loss(&mut tape, &flow_vars, i1, i2, &weights, &p)
        .map_err(|e| e.to_string())?;
    let got = tape.value(loss.total).item();
    let want: f64 = weights.weights.iter().map(|w| w * charbonnier_value(0.0, &p)).sum();
    if (got - want).abs() > 1e-6 {
        return Err(format!("zero-pyramid loss {got}, want {want}"));
    }
    Ok(())
}

fn criterion_7_toy_training() -> Result<(), String> {
    let start = Instant::now();
    let toy = ToyConfig {
        max_displacement: 5.0,
        texture_smoothing: 10,
        ..ToyConfig::default()
    };
    let root = StreamRng::new(700);
    let train_set = toy_set(&toy, &root, "train", 200);
    let held_out = toy_set(&toy, &root, "held", 20);

    let cfg = TrainConfig {
        base_lr: 2e-3,
        halve_every: 500,
        max_iters: 2_000,
        batch_size: 8,
        seed: 7,
        checkpoint_every: 2_000,
        augmentation: denseflow::train::AugmentationConfig::none(),
        loss_weights: Some(LossWeights::new(vec![0.16, 0.08, 0.04, 0.02]).unwrap()),
        ..TrainConfig::default()
    };
    let mut net = Network::build(&NetworkConfig::desk(), cfg.seed).map_err(|e| e.to_string())?;
    let mut adam = AdamState::new(&net);
    let out = train(
        &mut net,
        &mut adam,
        0,
        &train_set,
        None,
        &cfg,
        None,
        &mut |_| {},
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(30 * 60) {
        return Err(format!("training took {elapsed:?}, budget 30 min"));
    }

    // exponentially smoothed loss, compared between iteration 10 and the end
    let mut ema = out.losses[0];
    let mut early = f64::NAN;
    for (i, &l) in out.losses.iter().enumerate() {
        ema = 0.95 * ema + 0.05 * l;
        if i == 10 {
            early = ema;
        }
    }
    let late = ema;
    if late >= 0.7 * early {
        return Err(format!("loss only fell from {early:.6} to {late:.6}"));
    }

    let trained = eval_epe(&net, &held_out).map_err(|e| e.to_string())?;
    let baseline = zero_flow_baseline(&held_out).map_err(|e| e.to_string())?.mean_epe;
    if trained > 0.5 * baseline {
        return Err(format!("held-out epe {trained:.4} vs zero-flow baseline {baseline:.4}"));
    }
    println!(
        "  (loss {early:.4} -> {late:.4}, epe {trained:.4} vs baseline {baseline:.4}, {:.0?})",
        elapsed
    );
    Ok(())
}

fn criterion_8_format_round_trips() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = StreamRng::new(88);
    for i in 0..100 {
        let w = rng.below(30) + 1;
        let h = rng.below(30) + 1;
        let field = random_field(&mut rng, w, h);
        let path = dir.path().join(format!("{i}.flo"));
        write_flo(&path, &field).map_err(|e| e.to_string())?;
        let back = read_flo(&path).map_err(|e| e.to_string())?;
        let same = field.u.iter().zip(&back.u).all(|(a, b)| a.to_bits() == b.to_bits())
            && field.v.iter().zip(&back.v).all(|(a, b)| a.to_bits() == b.to_bits());
        if (back.width, back.height) != (w, h) || !same {
            return Err(format!("flo round trip {i} differs"));
        }
    }

    let net = Network::build(&NetworkConfig::desk(), 8).map_err(|e| e.to_string())?;
    let adam = AdamState::new(&net);
    let ckpt = Checkpoint::capture(&net, &adam, 17, 8);
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(&p1, &ckpt).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&p1).map_err(|e| e.to_string())?;
    save_checkpoint(&p2, &loaded).map_err(|e| e.to_string())?;
    let (b1, b2) = (
        std::fs::read(&p1).map_err(|e| e.to_string())?,
        std::fs::read(&p2).map_err(|e| e.to_string())?,
    );
    if b1 != b2 {
        return Err("checkpoint save-load-save not byte-identical".into());
    }

    // hand-computed KITTI pixels: (u16 - 32768) / 64, third channel validity
    let pixels: [u16; 9] = [
        32768, 32768, 1, // exactly zero flow, valid
        32768 + 64, 32768 - 128, 1, // u = +1.0, v = -2.0, valid
        40000, 20000, 0, // invalid: decoded as (0, 0)
    ];
    let (field, valid) = kitti_flow_from_u16(3, 1, &pixels).map_err(|e| e.to_string())?;
    let want = [(0.0, 0.0, true), (1.0, -2.0, true), (0.0, 0.0, false)];
    for (p, &(u, v, m)) in want.iter().enumerate() {
        if field.u[p] != u || field.v[p] != v || valid[p] != m {
            return Err(format!(
                "kitti pixel {p}: got ({}, {}, {})",
                field.u[p], field.v[p], valid[p]
            ));
        }
    }
    Ok(())
}

fn criterion_9_epe_oracle() -> Result<(), String> {
    let mut rng = StreamRng::new(99);
    for trial in 0..100 {
        let w = rng.below(20) + 2;
        let h = rng.below(20) + 2;
        let pred = random_field(&mut rng, w, h);
        let gt = random_field(&mut rng, w, h);
        let masked = trial % 2 == 1;
        let mask: Vec<bool> = (0..w * h).map(|_| rng.bernoulli(0.6)).collect();
        if masked && !mask.iter().any(|&m| m) {
            continue;
        }
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for p in 0..w * h {
            if masked && !mask[p] {
                continue;
            }
            let du = (pred.u[p] - gt.u[p]) as f64;
            let dv = (pred.v[p] - gt.v[p]) as f64;
            sum += (du * du + dv * dv).sqrt();
            n += 1;
        }
        let report = epe(&pred, &gt, if masked { Some(&mask) } else { None })
            .map_err(|e| e.to_string())?;
        if (report.mean_epe - sum / n as f64).abs() > 1e-6 {
            return Err(format!("trial {trial}: {} vs {}", report.mean_epe, sum / n as f64));
        }
    }
    Ok(())
}

fn criterion_10_determinism() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let toy = ToyConfig {
        max_displacement: 5.0,
        ..ToyConfig::default()
    };
    let dataset = toy_set(&toy, &StreamRng::new(1000), "det", 16);
    let cfg = TrainConfig {
        max_iters: 60,
        batch_size: 4,
        seed: 10,
        checkpoint_every: 25,
        augmentation: Default::default(),
        ..TrainConfig::default()
    };
    let run = |path: &std::path::Path| -> Result<Vec<String>, String> {
        let mut net = Network::build(&NetworkConfig::desk(), cfg.seed).map_err(|e| e.to_string())?;
        let mut adam = AdamState::new(&net);
        let mut lines = Vec::new();
        train(
            &mut net,
            &mut adam,
            0,
            &dataset,
            None,
            &cfg,
            Some(path),
            &mut |l| lines.push(l.to_string()),
        )
        .map_err(|e| e.to_string())?;
        Ok(lines)
    };
    let pa = dir.path().join("a.ckpt");
    let pb = dir.path().join("b.ckpt");
    let la = run(&pa)?;
    let lb = run(&pb)?;
    if la != lb {
        return Err("training logs differ between identical runs".into());
    }
    let (ba, bb) = (
        std::fs::read(&pa).map_err(|e| e.to_string())?,
        std::fs::read(&pb).map_err(|e| e.to_string())?,
    );
    if ba != bb {
        return Err("final checkpoints differ between identical runs".into());
    }
    Ok(())
}

#[test]
fn acceptance_gate() {
    let criteria: Vec<(&str, fn() -> Result<(), String>)> = vec![
        ("1 gradient suite", criterion_1_gradients),
        ("2 warp identities", criterion_2_warp_identities),
        ("3 charbonnier constants", criterion_3_charbonnier_constants),
        ("4 channel laws", criterion_4_channel_laws),
        ("5 parameter count", criterion_5_parameter_count),
        ("6 pyramid geometry", criterion_6_pyramid_geometry),
        ("7 toy training", criterion_7_toy_training),
        ("8 format round trips", criterion_8_format_round_trips),
        ("9 epe oracle", criterion_9_epe_oracle),
        ("10 determinism", criterion_10_determinism),
    ];
    let mut failures = Vec::new();
    for (name, check) in criteria {
        match check() {
            Ok(()) => println!("PASS criterion {name}"),
            Err(why) => {
                println!("FAIL criterion {name}: {why}");
                failures.push(name);
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
