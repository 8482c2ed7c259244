mod common;

use common::{assert_close, naive_conv, naive_depthwise, rand_tensor};
use d3net::cdda::Prompts;
use d3net::ddm::{
    adb_forward, adb_macs, decision_unit, du_macs, flop_report, gated_first_order, gumbel_softmax,
    gumbel_softmax_with_noise, run_decomposition, sample_gumbel, stage_prefix, NORM_EPS, stage_update, temperature_at, Ddm,
    DdmConfig, GateMode, GateOptions, GateOverride, GateRng, Mode,
};
use d3net::nn::{ParamStore, Session, SpecBuilder};
use d3net::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn ddm_params(c: usize, cs: usize, stages: usize, seed: u64) -> (Ddm, ParamStore) {
    let ddm = Ddm::new(DdmConfig { channels: c, strategy_dim: cs, stages });
    let mut b = SpecBuilder::new();
    ddm.declare(&mut b);
    let mut p = ParamStore::init(&b.finish(), seed);
    let names: Vec<String> = p.names().filter(|n| n.ends_with(".b")).cloned().collect();
    for (i, n) in names.iter().enumerate() {
        let shape = p.get(n).unwrap().shape().to_vec();
        p.insert(n.clone(), rand_tensor(&shape, seed + 77 + i as u64).map(|v| 0.2 * v));
    }
    (ddm, p)
}

/// `[suppress, activate]` biases large enough to pin the gate.
fn pin_gate(p: &mut ParamStore, stage: usize, open: bool) {
    let b = if open { [-40.0, 40.0] } else { [40.0, -40.0] };
    p.insert(format!("{}.du.fc.b", stage_prefix(stage)), Tensor::from_f64([2], &b).unwrap());
}

fn pointwise(w: &Tensor, b: &Tensor, x: &Tensor) -> Tensor {
    let (ci, h, wd) = x.dims3().unwrap();
    let co = w.shape()[0];
    Tensor::from_fn([co, h, wd], |i| {
        let (o, px) = (i / (h * wd), i % (h * wd));
        b.data()[o] + (0..ci).map(|k| w.data()[o * ci + k] * x.data()[k * h * wd + px]).sum::<f64>()
    })
}

pub fn first_order_interaction_matches_window_loop() {
    let mut r = common::rng(13);
    for seed in 0..20u64 {
        let c = r.random_range(1..=4);
        let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
        let mut b = SpecBuilder::new();
        b.conv("g.proj", 2 * c, 2 * c, 1, true);
        b.depthwise("g.dw1", c, 3);
        let mut params = ParamStore::init(&b.finish(), seed);
        params.insert("g.proj.b", rand_tensor(&[2 * c], seed + 1));
        let y = rand_tensor(&[c, h, w], seed + 2);
        let ct = rand_tensor(&[c, h, w], seed + 3);

        let mut sess = Session::new(&params, false);
        let (yv, cv) = (sess.constant(y.clone()).unwrap(), sess.constant(ct.clone()).unwrap());
        let fo = gated_first_order(&mut sess, "g", yv, cv).unwrap();
        let got = sess.value(fo.p1).clone();

        // Explicit per-pixel evaluation.
        let wp = params.get("g.proj.w").unwrap();
        let bp = params.get("g.proj.b").unwrap();
        let dw = params.get("g.dw1.w").unwrap();
        let raw = |k: usize, i: usize, j: usize| if k < c { y.at(&[k, i, j]) } else { ct.at(&[k - c, i, j]) };
        let rms = |i: usize, j: usize| ((0..2 * c).map(|k| raw(k, i, j).powi(2)).sum::<f64>() / (2 * c) as f64 + NORM_EPS).sqrt();
        let x = |k: usize, i: usize, j: usize| raw(k, i, j) / rms(i, j);
        let proj = |o: usize, i: usize, j: usize| bp.data()[o] + (0..2 * c).map(|k| wp.at(&[o, k, 0, 0]) * x(k, i, j)).sum::<f64>();
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                acc += dw.at(&[ch, di, dj]) * proj(c + ch, ii as usize, jj as usize);
                            }
                        }
                    }
                    let want = proj(ch, i, j) * acc;
                    let diff = (got.at(&[ch, i, j]) - want).abs();
                    assert!(diff < 1e-10, "seed {seed} c={c} {h}x{w} at ({ch},{i},{j}): {diff:e}");
                }
            }
        }
    }
}

#[test]
fn decision_unit_matches_composition() {
    let (c, cs) = (3, 2);
    let (_, params) = ddm_params(c, cs, 1, 4);
    let y = rand_tensor(&[c, 6, 8], 1);
    let s = rand_tensor(&[cs], 2);
    let mut sess = Session::new(&params, false);
    let (yv, sv) = (sess.constant(y.clone()).unwrap(), sess.constant(s.clone()).unwrap());
    let du = decision_unit(&mut sess, "ddm.s01", yv, sv).unwrap();
    let got = sess.value(du).clone();

    let p = |n: &str| params.get(&format!("ddm.s01.du.{n}")).unwrap();
    let x = Tensor::from_fn([c + cs, 6, 8], |i| if i < c * 48 { y.data()[i] } else { s.data()[(i - c * 48) / 48] });
    let relu = |t: Tensor| t.map(|v| v.max(0.0));
    let bias = |t: Tensor, b: &Tensor| {
        let hw = t.numel() / b.numel();
        Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i] + b.data()[i / hw])
    };
    let h1 = relu(bias(naive_conv(&x, p("conv1.w"), 1, 1), p("conv1.b")));
    let pooled = Tensor::from_fn([c, 3, 4], |i| {
        let (ch, r) = (i / 12, i % 12);
        let (oy, ox) = (r / 4, r % 4);
        (0..4).map(|k| h1.at(&[ch, 2 * oy + k / 2, 2 * ox + k % 2])).fold(f64::NEG_INFINITY, f64::max)
    });
    let h2 = relu(bias(naive_conv(&pooled, p("conv2.w"), 1, 1), p("conv2.b")));
    let gap: Vec<f64> = (0..c).map(|ch| (0..12).map(|k| h2.data()[ch * 12 + k]).sum::<f64>() / 12.0).collect();
    let want: Vec<f64> = (0..2)
        .map(|j| p("fc.b").data()[j] + (0..c).map(|k| gap[k] * p("fc.w").at(&[k, j])).sum::<f64>())
        .collect();
    assert_close(&got, &Tensor::from_f64([2], &want).unwrap(), 1e-12, "decision unit");
}

#[test]
fn gated_conv_matches_composition() {
    let c = 2;
    let (_, params) = ddm_params(c, 1, 1, 9);
    let y = rand_tensor(&[c, 5, 4], 1);
    let ct = rand_tensor(&[c, 5, 4], 2);
    let pre = "ddm.s01.adb.g1";
    let p = |n: &str| params.get(&format!("{pre}.{n}")).unwrap();
    let mut sess = Session::new(&params, false);
    let (yv, cv) = (sess.constant(y.clone()).unwrap(), sess.constant(ct.clone()).unwrap());
    let g = d3net::ddm::gated_conv(&mut sess, pre, yv, cv).unwrap();
    let got = sess.value(g).clone();

    let x = Tensor::from_fn([2 * c, 5, 4], |i| if i < c * 20 { y.data()[i] } else { ct.data()[i - c * 20] });
    let z = pointwise(p("proj.w"), p("proj.b"), &common::rms_norm_reference(&x, NORM_EPS));
    let split = |t: &Tensor, start: usize| Tensor::from_fn([c, 5, 4], |i| t.data()[start * 20 + i]);
    let mut pk = split(&z, 0);
    let mut q = split(&z, c);
    for j in 1..=3 {
        let f = naive_depthwise(&q, p(&format!("dw{j}.w")), 1);
        pk = f.zip_map(&pk, |a, b| a * b).unwrap();
        if j < 3 {
            q = pointwise(p(&format!("lin{j}.w")), p(&format!("lin{j}.b")), &pk);
        }
    }
    let want = pointwise(p("out.w"), p("out.b"), &pk);
    assert_close(&got, &want, 1e-12, "gated conv");
}

fn prompts(sess: &mut Session, c: usize, cs: usize, h: usize, w: usize, seed: u64) -> Prompts {
    Prompts {
        correction: sess.constant(rand_tensor(&[c, h, w], seed)).unwrap(),
        strategy: sess.constant(rand_tensor(&[cs], seed + 1)).unwrap(),
    }
}

pub fn forced_closed_gates_are_exact_identity() {
    let (ddm, params) = ddm_params(3, 2, 4, 1);
    for mode in [Mode::Train, Mode::Infer] {
        for gate_mode in [GateMode::Hard, GateMode::Soft] {
            let mut sess = Session::new(&params, false);
            let y0 = sess.constant(rand_tensor(&[3, 6, 6], 5)).unwrap();
            let pr = prompts(&mut sess, 3, 2, 6, 6, 6);
            let opts = GateOptions { mode, gate_mode, tau: 0.5, force: GateOverride::Closed };
            let mut rng = GateRng::seed_from_u64(0);
            let (y, traces) = ddm.run(&mut sess, y0, &pr, &opts, &mut rng).unwrap();
            assert!(sess.value(y).bitwise_eq(sess.value(y0)));
            assert!(traces.iter().all(|t| !t.activated && t.flops == t.du_flops));
        }
    }
}

#[test]
fn stage_update_two_branch_oracle() {
    let (c, cs, h, w) = (3, 2, 6, 4);
    for (open, gate_mode) in [(false, GateMode::Hard), (true, GateMode::Hard), (false, GateMode::Soft), (true, GateMode::Soft)] {
        let (_, mut params) = ddm_params(c, cs, 1, 3);
        pin_gate(&mut params, 1, open);
        let mut sess = Session::new(&params, false);
        let y0 = sess.constant(rand_tensor(&[c, h, w], 8)).unwrap();
        let pr = prompts(&mut sess, c, cs, h, w, 9);
        let opts = GateOptions { mode: Mode::Infer, gate_mode, tau: 1.0, force: GateOverride::Learned };
        let mut rng = GateRng::seed_from_u64(0);
        let (y1, trace) = stage_update(&mut sess, 1, y0, &pr, &opts, &mut rng).unwrap();
        let rho1 = trace.gate.rho[1];
        assert_eq!(trace.activated, open);
        let y1 = sess.value(y1).clone();
        let base = sess.value(y0).clone();
        if !open && gate_mode == GateMode::Hard {
            assert!(y1.bitwise_eq(&base), "closed hard gate must pass features through");
            assert_eq!(trace.flops, trace.du_flops);
            continue;
        }
        let a = adb_forward(&mut sess, &stage_prefix(1), y0, pr.correction).unwrap();
        let want = base.zip_map(sess.value(a), |y, a| y + a * rho1).unwrap();
        assert_close(&y1, &want, 1e-12, "stage update");
    }

    // Forced open adds the block unscaled.
    let (_, params) = ddm_params(c, cs, 1, 3);
    let mut sess = Session::new(&params, false);
    let y0 = sess.constant(rand_tensor(&[c, h, w], 8)).unwrap();
    let pr = prompts(&mut sess, c, cs, h, w, 9);
    let opts = GateOptions { mode: Mode::Infer, gate_mode: GateMode::Hard, tau: 1.0, force: GateOverride::Open };
    let (y1, _) = stage_update(&mut sess, 1, y0, &pr, &opts, &mut GateRng::seed_from_u64(0)).unwrap();
    let a = adb_forward(&mut sess, &stage_prefix(1), y0, pr.correction).unwrap();
    let want = sess.value(y0).zip_map(sess.value(a), |y, a| y + a).unwrap();
    assert_close(sess.value(y1), &want, 1e-12, "forced open");
}

#[test]
fn analytic_macs_match_measured() {
    let (c, cs, h, w) = (4, 3, 8, 6);
    let (_, params) = ddm_params(c, cs, 1, 2);
    let mut sess = Session::new(&params, false);
    let y = sess.constant(rand_tensor(&[c, h, w], 1)).unwrap();
    let pr = prompts(&mut sess, c, cs, h, w, 2);
    let m0 = sess.graph.macs();
    adb_forward(&mut sess, "ddm.s01", y, pr.correction).unwrap();
    let m1 = sess.graph.macs();
    decision_unit(&mut sess, "ddm.s01", y, pr.strategy).unwrap();
    let m2 = sess.graph.macs();
    assert_eq!(m1 - m0, adb_macs(c, h, w));
    assert_eq!(m2 - m1, du_macs(c, cs, h, w));
}

pub fn skipped_stages_save_their_block_share() {
    let (c, cs, h, w, n) = (4, 3, 8, 8, 6);
    let run = |closed: &[usize]| {
        let (ddm, mut params) = ddm_params(c, cs, n, 5);
        for s in 1..=n {
            pin_gate(&mut params, s, !closed.contains(&s));
        }
        let mut sess = Session::new(&params, false);
        let y0 = sess.constant(rand_tensor(&[c, h, w], 1)).unwrap();
        let pr = prompts(&mut sess, c, cs, h, w, 2);
        let (_, traces) = ddm.run(&mut sess, y0, &pr, &GateOptions::infer(GateMode::Hard), &mut GateRng::seed_from_u64(0)).unwrap();
        traces
    };
    let full = run(&[]);
    let full_macs: u64 = full.iter().map(|t| t.flops).sum();
    for closed in [vec![2], vec![1, 4], vec![2, 3, 5]] {
        let t = run(&closed);
        let measured: u64 = t.iter().map(|t| t.flops).sum();
        let saved = 1.0 - measured as f64 / full_macs as f64;
        let predicted = closed.len() as f64 * adb_macs(c, h, w) as f64 / full_macs as f64;
        assert!((saved - predicted).abs() <= 0.02 * predicted, "{closed:?}: {saved} vs {predicted}");
        let report = flop_report(&t).unwrap();
        assert_eq!(report.active_stage_count, n - closed.len());
        assert!((report.savings_fraction - saved).abs() < 1e-12);
    }
}

pub fn temperature_schedule_endpoints() {
    assert_eq!(temperature_at(0, 500), 1.0);
    assert_eq!(temperature_at(500, 500), 0.1);
    assert_eq!(temperature_at(900, 500), 0.1);
    assert!((temperature_at(250, 500) - 0.55).abs() < 1e-15);
    for s in 1..=500 {
        assert!(temperature_at(s, 500) < temperature_at(s - 1, 500));
    }
}

pub fn low_temperature_concentrates_on_noisy_argmax() {
    let mut rng = GateRng::seed_from_u64(3);
    let tau = 0.01;
    for _ in 0..2000 {
        let h = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let g = sample_gumbel(&mut rng);
        let rho = gumbel_softmax_with_noise(h, g, tau).unwrap();
        let z = [h[0] + g[0], h[1] + g[1]];
        let arg = if z[1] > z[0] { 1 } else { 0 };
        let gap = (z[1] - z[0]).abs();
        assert!(rho[arg] >= rho[1 - arg]);
        // Closed form of a two-way softmax.
        assert!((rho[arg] - 1.0 / (1.0 + (-gap / tau).exp())).abs() < 1e-12);
        if gap > tau * 999f64.ln() {
            assert!(rho[arg] > 0.999);
        }
    }
}

/// Seeded sweep of the gate laws over random logits and temperatures.
pub fn gate_distribution_laws() {
    let mut r = common::rng(77);
    for i in 0..5000u64 {
        let h = [r.random_range(-60.0..60.0), r.random_range(-60.0..60.0)];
        let tau = 10f64.powf(r.random_range(-2.0..1.0));
        for mode in [Mode::Train, Mode::Infer] {
            let rho = gumbel_softmax(h, tau, mode, &mut GateRng::seed_from_u64(i)).unwrap();
            assert!((rho[0] + rho[1] - 1.0).abs() <= 1e-12, "{h:?} tau {tau}: {rho:?}");
            assert!(rho.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let a = gumbel_softmax(h, tau, Mode::Infer, &mut GateRng::seed_from_u64(i)).unwrap();
        let b = gumbel_softmax(h, tau, Mode::Infer, &mut GateRng::seed_from_u64(i + 1)).unwrap();
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
    }
}

proptest! {
    #[test]
    fn gumbel_softmax_is_a_distribution(h0 in -50.0f64..50.0, h1 in -50.0f64..50.0, tau in 0.01f64..10.0, seed in 0u64..1000, train in any::<bool>()) {
        let mode = if train { Mode::Train } else { Mode::Infer };
        let rho = gumbel_softmax([h0, h1], tau, mode, &mut GateRng::seed_from_u64(seed)).unwrap();
        prop_assert!((rho[0] + rho[1] - 1.0).abs() <= 1e-12);
        prop_assert!(rho.iter().all(|&r| (0.0..=1.0).contains(&r)));
    }

    #[test]
    fn inference_gate_ignores_the_rng(h0 in -5.0f64..5.0, h1 in -5.0f64..5.0, tau in 0.05f64..5.0, s1 in 0u64..1000, s2 in 0u64..1000) {
        let a = gumbel_softmax([h0, h1], tau, Mode::Infer, &mut GateRng::seed_from_u64(s1)).unwrap();
        let b = gumbel_softmax([h0, h1], tau, Mode::Infer, &mut GateRng::seed_from_u64(s2)).unwrap();
        prop_assert_eq!(a[0].to_bits(), b[0].to_bits());
        prop_assert_eq!(a[1].to_bits(), b[1].to_bits());
    }
}

#[test]
fn decomposition_is_deterministic_per_seed() {
    let (ddm, params) = ddm_params(3, 2, 3, 4);
    let run = |seed: u64, opts: GateOptions| {
        let mut sess = Session::new(&params, false);
        let y0 = sess.constant(rand_tensor(&[3, 6, 6], 5)).unwrap();
        let pr = prompts(&mut sess, 3, 2, 6, 6, 6);
        let (y, _) = run_decomposition(&mut sess, ddm.config.stages, y0, &pr, &opts, &mut GateRng::seed_from_u64(seed)).unwrap();
        sess.value(y).clone()
    };
    assert!(run(1, GateOptions::train(0.5)).bitwise_eq(&run(1, GateOptions::train(0.5))));
    assert!(run(1, GateOptions::infer(GateMode::Hard)).bitwise_eq(&run(2, GateOptions::infer(GateMode::Hard))));
}

#[cfg(test)]
mod cases {
    #[test]
    fn gate_distribution_laws() {
        super::gate_distribution_laws();
    }

    #[test]
    fn first_order_interaction_matches_window_loop() {
        super::first_order_interaction_matches_window_loop();
    }

    #[test]
    fn forced_closed_gates_are_exact_identity() {
        super::forced_closed_gates_are_exact_identity();
    }

    #[test]
    fn skipped_stages_save_their_block_share() {
        super::skipped_stages_save_their_block_share();
    }

    #[test]
    fn temperature_schedule_endpoints() {
        super::temperature_schedule_endpoints();
    }

    #[test]
    fn low_temperature_concentrates_on_noisy_argmax() {
        super::low_temperature_concentrates_on_noisy_argmax();
    }
}
