//! Reverse-mode gradients against central finite differences, 64-bit.

mod common;

use common::{rand_tensor, tiny_net};
use d3net::autodiff::{Graph, Var};
use d3net::cdda::{freq_feature_extract, nonlinear_proj, Prompts};
use d3net::ddm::{adb_forward, decision_unit, gated_conv, GateRng};
use d3net::gradcheck::{grad_check, norm_rel_error, param_grad_check};
use d3net::net::{loss_l1, ForwardOptions};
use d3net::nn::{ParamStore, SpecBuilder};
use d3net::{Result, Tensor};
use rand::SeedableRng;

const SEEDS: u64 = 20;
const EPS: f64 = 1e-6;
const PRIMITIVE_TOL: f64 = 1e-4;
/// Composite blocks have longer rounding chains; a wider step keeps
/// small gradients above the noise.
const MODULE_EPS: f64 = 1e-5;

/// Contracts `y` with fixed random weights so every output element matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = rand_tensor(g.shape(y), seed ^ 0x5eed);
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check_unary(name: &str, shape: &[usize], f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    for seed in 0..SEEDS {
        let x = rand_tensor(shape, seed);
        let err = grad_check(
            |g, x| {
                let y = f(g, x)?;
                project(g, y, seed)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < PRIMITIVE_TOL, "{name} seed {seed}: rel err {err:e}");
    }
}

/// Checks both arguments of a binary op; `other` is held fixed while one varies.
fn check_binary(name: &str, a_shape: &[usize], b_shape: &[usize], f: impl Fn(&mut Graph, Var, Var) -> Result<Var>) {
    for seed in 0..SEEDS {
        let a = rand_tensor(a_shape, seed);
        let b = rand_tensor(b_shape, seed + 1000);
        let wrt_a = grad_check(
            |g, x| {
                let bv = g.constant(b.clone())?;
                let y = f(g, x, bv)?;
                project(g, y, seed)
            },
            &a,
            EPS,
        )
        .unwrap();
        let wrt_b = grad_check(
            |g, x| {
                let av = g.constant(a.clone())?;
                let y = f(g, av, x)?;
                project(g, y, seed)
            },
            &b,
            EPS,
        )
        .unwrap();
        assert!(wrt_a < PRIMITIVE_TOL, "{name} (lhs) seed {seed}: {wrt_a:e}");
        assert!(wrt_b < PRIMITIVE_TOL, "{name} (rhs) seed {seed}: {wrt_b:e}");
    }
}

pub fn convolutions() {
    check_binary("conv2d pad1", &[2, 5, 5], &[3, 2, 3, 3], |g, x, w| g.conv2d(x, w, 1, 1));
    check_binary("conv2d stride2", &[2, 6, 5], &[2, 2, 3, 3], |g, x, w| g.conv2d(x, w, 0, 2));
    check_binary("conv2d 1x1", &[3, 4, 4], &[2, 3, 1, 1], |g, x, w| g.conv2d(x, w, 0, 1));
    check_binary("depthwise", &[3, 5, 4], &[3, 3, 3], |g, x, w| g.depthwise_conv2d(x, w, 1));
}

pub fn pooling_and_resampling() {
    check_unary("max_pool2d", &[2, 6, 6], |g, x| g.max_pool2d(x, 2, 2));
    check_unary("avg_pool2d", &[2, 8, 4], |g, x| g.avg_pool2d(x, 4));
    check_unary("upsample_nearest", &[2, 3, 2], |g, x| g.upsample_nearest(x, 2));
    check_unary("resize_bilinear up", &[2, 2, 3], |g, x| g.resize_bilinear(x, 7, 8));
    check_unary("resize_bilinear down", &[1, 6, 6], |g, x| g.resize_bilinear(x, 4, 3));
    check_unary("global_avg_pool", &[3, 4, 5], |g, x| g.global_avg_pool(x));
}

pub fn softmax_axes() {
    check_unary("softmax axis 0", &[4, 3], |g, x| g.softmax(x, 0));
    check_unary("softmax axis 1", &[4, 3], |g, x| g.softmax(x, 1));
    check_unary("softmax axis 1 of 3", &[2, 3, 4], |g, x| g.softmax(x, 1));
    check_unary("rms_norm_channels", &[4, 3, 2], |g, x| g.rms_norm_channels(x, 1e-6));
    check_unary("rms_norm_channels single", &[1, 2, 2], |g, x| g.rms_norm_channels(x, 1e-3));
}

pub fn elementwise() {
    check_binary("add", &[2, 3, 3], &[2, 3, 3], |g, a, b| g.add(a, b));
    check_binary("sub", &[2, 3, 3], &[2, 3, 3], |g, a, b| g.sub(a, b));
    check_binary("mul", &[2, 3, 3], &[2, 3, 3], |g, a, b| g.mul(a, b));
    check_binary("mul broadcast", &[2, 3, 3], &[1], |g, a, b| g.mul(a, b));
    check_binary("sub broadcast lhs", &[1], &[4, 2], |g, a, b| g.sub(a, b));
    check_unary("scale", &[5], |g, x| g.scale(x, -2.5));
    check_unary("add_scalar", &[5], |g, x| g.add_scalar(x, 0.75));
    check_unary("relu", &[3, 4, 4], |g, x| g.relu(x));
    check_unary("abs", &[3, 4, 4], |g, x| g.abs(x));
}

pub fn reductions_and_linear_algebra() {
    check_unary("sum", &[3, 4], |g, x| g.sum(x));
    check_unary("mean", &[3, 4], |g, x| g.mean(x));
    check_binary("matmul", &[3, 4], &[4, 5], |g, a, b| g.matmul(a, b));
    check_unary("transpose", &[3, 4], |g, x| g.transpose(x));
    check_unary("reshape", &[2, 6], |g, x| g.reshape(x, [3, 4]));
    check_unary("index", &[6], |g, x| g.index(x, 4));
}

pub fn channel_ops() {
    check_binary("concat_channels", &[2, 3, 3], &[1, 3, 3], |g, a, b| g.concat_channels(a, b));
    check_unary("slice_channels", &[4, 3, 3], |g, x| g.slice_channels(x, 1, 2));
    check_binary("add_channel_bias", &[3, 2, 4], &[3], |g, x, b| g.add_channel_bias(x, b));
    check_binary("add_row_bias", &[5, 3], &[3], |g, x, b| g.add_row_bias(x, b));
    check_unary("broadcast_channels", &[4], |g, v| g.broadcast_channels(v, 3, 2));
}

/// Norm-wise agreement over the tensor, plus element-wise agreement for
/// every element within three decades of the tensor's largest gradient.
fn assert_module_grads(r: &d3net::gradcheck::GradCheckReport, what: &str) {
    let norm = r.norm_rel_error();
    assert!(norm < PRIMITIVE_TOL, "{what}: norm-wise {norm:e}");
    let top = r.samples.iter().map(|s| s.1.abs()).fold(0.0, f64::max);
    for &(i, a, n) in &r.samples {
        if a.abs().max(n.abs()) >= 1e-3 * top {
            let rel = (a - n).abs() / a.abs().max(n.abs());
            assert!(rel < PRIMITIVE_TOL, "{what}[{i}]: analytic {a:e} numeric {n:e}");
        }
    }
}

fn module_params(declare: impl FnOnce(&mut SpecBuilder), seed: u64) -> ParamStore {
    let mut b = SpecBuilder::new();
    declare(&mut b);
    generic_point(ParamStore::init(&b.finish(), seed), seed, 1.0)
}

/// Re-draws every weight in `[-scale, scale)` and every bias in `[-0.1, 0.1)`.
/// Zero biases park ReLUs exactly on their kink, where finite differences
/// and any one-sided derivative disagree; unit-scale weights keep the
/// multiplicative gating chains away from vanishing gradients.
fn generic_point(mut p: ParamStore, seed: u64, scale: f64) -> ParamStore {
    let names: Vec<String> = p.names().cloned().collect();
    for (i, n) in names.iter().enumerate() {
        let shape = p.get(n).unwrap().shape().to_vec();
        let k = if n.ends_with(".b") { 0.1 } else { scale };
        p.insert(n.clone(), rand_tensor(&shape, seed * 1000 + i as u64).map(|v| k * v));
    }
    p
}

fn declare_adb(b: &mut SpecBuilder, c: usize) {
    for g in ["blk.adb.g1", "blk.adb.g2"] {
        b.conv(&format!("{g}.proj"), 2 * c, 2 * c, 1, true);
        for j in 1..=3 {
            b.depthwise(&format!("{g}.dw{j}"), c, 3);
        }
        for j in 1..3 {
            b.conv(&format!("{g}.lin{j}"), c, c, 1, true);
        }
        b.conv(&format!("{g}.out"), c, c, 1, true);
    }
    b.conv("blk.adb.mix1", c, c, 1, true);
    b.conv("blk.adb.mix2", c, c, 1, true);
    b.conv("blk.adb.out", c, c, 3, true);
}

pub fn adaptive_decomposition_block() {
    let c = 2;
    for seed in 0..5 {
        let params = module_params(|b| declare_adb(b, c), seed);
        let y = rand_tensor(&[c, 4, 4], seed + 1);
        let ct = rand_tensor(&[c, 4, 4], seed + 2);
        let run = |sess: &mut d3net::nn::Session| {
            let yv = sess.constant(y.clone())?;
            let cv = sess.constant(ct.clone())?;
            let out = adb_forward(sess, "blk", yv, cv)?;
            project(&mut sess.graph, out, seed)
        };
        let names: Vec<String> = params.names().cloned().collect();
        for name in &names {
            let r = param_grad_check(&params, name, run, MODULE_EPS, None).unwrap();
            assert!(r.max_rel_error < PRIMITIVE_TOL, "{name} seed {seed}: {r:?}");
        }
        // Inputs: features and correction prompt.
        for which in 0..2 {
            let x = if which == 0 { &y } else { &ct };
            let err = grad_check(
                |g, xv| {
                    let mut sess = d3net::nn::Session::new(&params, false);
                    sess.graph = std::mem::take(g);
                    let other = sess.constant(if which == 0 { ct.clone() } else { y.clone() })?;
                    let (a, b) = if which == 0 { (xv, other) } else { (other, xv) };
                    let out = adb_forward(&mut sess, "blk", a, b)?;
                    let l = project(&mut sess.graph, out, seed);
                    *g = std::mem::take(&mut sess.graph);
                    l
                },
                x,
                MODULE_EPS,
            )
            .unwrap();
            assert!(err < PRIMITIVE_TOL, "adb input {which} seed {seed}: {err:e}");
        }
    }
}

pub fn gated_conv_decision_unit_and_projections() {
    let c = 3;
    let cs = 2;
    let params = module_params(
        |b| {
            b.conv("g.proj", 2 * c, 2 * c, 1, true);
            for j in 1..=3 {
                b.depthwise(&format!("g.dw{j}"), c, 3);
            }
            for j in 1..3 {
                b.conv(&format!("g.lin{j}"), c, c, 1, true);
            }
            b.conv("g.out", c, c, 1, true);
            b.conv("s.du.conv1", c + cs, c, 3, true);
            b.conv("s.du.conv2", c, c, 3, true);
            b.linear("s.du.fc", c, 2);
            b.conv("phi.conv1", 1, 4, 3, true);
            b.conv("phi.conv2", 4, 4, 3, true);
            b.conv("phi.conv3", 4, 4, 3, true);
            b.conv("cdda.freq.conv1", 1, 3, 3, true);
            b.conv("cdda.freq.conv2", 3, 3, 3, true);
        },
        11,
    );
    let y = rand_tensor(&[c, 4, 6], 1);
    let ct = rand_tensor(&[c, 4, 6], 2);
    let s = rand_tensor(&[cs], 3);
    let m = rand_tensor(&[1, 8, 8], 4);
    for name in params.names() {
        let r = if name.starts_with("g.") {
            param_grad_check(
                &params,
                name,
                |sess| {
                    let (yv, cv) = (sess.constant(y.clone())?, sess.constant(ct.clone())?);
                    let o = gated_conv(sess, "g", yv, cv)?;
                    project(&mut sess.graph, o, 1)
                },
                MODULE_EPS,
                None,
            )
        } else if name.starts_with("s.") {
            param_grad_check(
                &params,
                name,
                |sess| {
                    let (yv, sv) = (sess.constant(y.clone())?, sess.constant(s.clone())?);
                    let o = decision_unit(sess, "s", yv, sv)?;
                    project(&mut sess.graph, o, 2)
                },
                MODULE_EPS,
                None,
            )
        } else if name.starts_with("phi.") {
            param_grad_check(
                &params,
                name,
                |sess| {
                    let mv = sess.constant(m.clone())?;
                    let o = nonlinear_proj(sess, mv, "phi")?;
                    project(&mut sess.graph, o, 3)
                },
                MODULE_EPS,
                None,
            )
        } else {
            param_grad_check(
                &params,
                name,
                |sess| {
                    let mv = sess.constant(m.clone())?;
                    let o = freq_feature_extract(sess, mv)?;
                    project(&mut sess.graph, o, 4)
                },
                MODULE_EPS,
                None,
            )
        }
        .unwrap();
        assert!(r.max_rel_error < PRIMITIVE_TOL, "{name}: {r:?}");
    }
}

/// Loss of the full network in training mode with a fixed Gumbel stream.
pub fn end_to_end_loss<'a>(
    net: &'a d3net::net::D3Net,
    image: &Tensor,
    target: &Tensor,
) -> impl Fn(&mut d3net::nn::Session) -> Result<Var> + 'a {
    let (image, target) = (image.clone(), target.clone());
    move |sess| {
        let mut rng = GateRng::seed_from_u64(7);
        let x = sess.constant(image.clone())?;
        let t = sess.constant(target.clone())?;
        let out = net.forward(sess, x, &ForwardOptions::train(0.5), &mut rng)?;
        loss_l1(sess, out.restored, t)
    }
}

/// Whole-model check: sampled elements of every parameter tensor, compared
/// norm-wise. Deep strategy-prompt paths carry gradients near 1e-9 whose
/// central differences are dominated by rounding noise in the loss, so a
/// per-element figure would measure floating point rather than the tape.
fn check_end_to_end(net: &d3net::net::D3Net, params: &ParamStore, image: &Tensor, target: &Tensor) -> (f64, f64) {
    let loss = end_to_end_loss(net, image, target);
    let mut pairs = Vec::new();
    let mut worst_big = 0.0f64;
    for name in params.names() {
        let n = params.get(name).unwrap().numel();
        let idx: Vec<usize> = (0..n).step_by((n / 4).max(1)).collect();
        let r = param_grad_check(params, name, &loss, 1e-5, Some(&idx)).unwrap();
        for &(_, a, num) in &r.samples {
            if a.abs().max(num.abs()) > 1e-4 {
                worst_big = worst_big.max((a - num).abs() / a.abs().max(num.abs()));
            }
        }
        pairs.extend(r.samples.iter().map(|&(_, a, n)| (a, n)));
    }
    (norm_rel_error(pairs), worst_big)
}

pub fn end_to_end_tiny_network() {
    let net = tiny_net();
    for seed in 0..3 {
        let params = generic_point(net.init_params::<f64>(seed), seed, 0.5);
        let image = common::rand_image(&[3, 8, 8], seed + 10);
        let target = common::rand_image(&[3, 8, 8], seed + 20);
        let (norm, worst_big) = check_end_to_end(&net, &params, &image, &target);
        println!("seed {seed}: norm-wise {norm:e}, worst element with |g| > 1e-4 {worst_big:e}");
        assert!(norm < 1e-3, "seed {seed}: {norm:e}");
        assert!(worst_big < 1e-3, "seed {seed}: {worst_big:e}");
    }
}

pub fn prompts_are_differentiable_inputs_to_stages() {
    let net = tiny_net();
    let params = generic_point(net.init_params::<f64>(5), 5, 0.3);
    let y = rand_tensor(&[4, 8, 8], 1);
    let ct = rand_tensor(&[4, 8, 8], 2);
    let err = grad_check(
        |g, sv| {
            let mut sess = d3net::nn::Session::new(&params, false);
            sess.graph = std::mem::take(g);
            let yv = sess.constant(y.clone())?;
            let cv = sess.constant(ct.clone())?;
            let prompts = Prompts { correction: cv, strategy: sv };
            let mut rng = GateRng::seed_from_u64(1);
            let (out, _) = net.ddm.run(&mut sess, yv, &prompts, &d3net::ddm::GateOptions::train(0.7), &mut rng)?;
            let l = project(&mut sess.graph, out, 9);
            *g = std::mem::take(&mut sess.graph);
            l
        },
        &rand_tensor(&[4], 3),
        MODULE_EPS,
    )
    .unwrap();
    assert!(err < PRIMITIVE_TOL, "{err:e}");
}

pub fn cross_domain_analyzer_all_presets() {
    use d3net::cdda::{AttentionPreset, Cdda, CddaConfig};
    for preset in AttentionPreset::ALL {
        let cdda = Cdda::new(CddaConfig {
            image_channels: 3,
            feature_channels: 3,
            freq_channels: 2,
            prompt_dim: 4,
            strategy_dim: 2,
            preset,
        });
        let params = module_params(|b| cdda.declare(b), 21);
        let image = common::rand_image(&[3, 8, 8], 4);
        let run = |sess: &mut d3net::nn::Session| {
            let x = sess.constant(image.clone())?;
            let p = cdda.forward(sess, x)?;
            let a = project(&mut sess.graph, p.correction, 1)?;
            let b = project(&mut sess.graph, p.strategy, 2)?;
            sess.graph.add(a, b)
        };
        for name in params.names() {
            let r = param_grad_check(&params, name, run, MODULE_EPS, None).unwrap();
            if name.ends_with(".k.b") {
                // Adding a constant to every key shifts each softmax row uniformly.
                assert!(r.samples.iter().all(|&(_, a, n)| a.abs() < 1e-12 && n.abs() < 1e-6), "{name}: {r:?}");
                continue;
            }
            assert_module_grads(&r, &format!("preset {preset} {name}"));
        }
    }
}

pub const PRIMITIVE_SUITES: [(&str, fn()); 6] = [
    ("convolutions", convolutions),
    ("pooling and resampling", pooling_and_resampling),
    ("softmax", softmax_axes),
    ("elementwise", elementwise),
    ("reductions and linear algebra", reductions_and_linear_algebra),
    ("channel ops", channel_ops),
];

pub const MODULE_SUITES: [(&str, fn()); 5] = [
    ("decomposition block", adaptive_decomposition_block),
    ("gated conv, decision unit, projections", gated_conv_decision_unit_and_projections),
    ("prompt inputs", prompts_are_differentiable_inputs_to_stages),
    ("analyzer presets", cross_domain_analyzer_all_presets),
    ("end to end", end_to_end_tiny_network),
];

#[test]
fn primitives() {
    for (_, f) in PRIMITIVE_SUITES {
        f();
    }
}

#[test]
fn modules() {
    for (_, f) in &MODULE_SUITES[..4] {
        f();
    }
}

#[test]
fn end_to_end() {
    end_to_end_tiny_network();
}
