//! Dynamic decomposition: a chain of stages, each a decision unit that
//! gates an adaptive decomposition block through a Gumbel-Softmax
//! probability.
//!
//! During training every block runs and its output is scaled by the soft
//! activation probability `rho_1`. At inference the noise is zero and, in
//! hard gate mode, a block whose `rho_1 <= 0.5` is not executed at all, which
//! is where the compute savings come from.

use std::fmt;
use std::str::FromStr;

use rand::distr::{Distribution, Open01};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::cdda::Prompts;
use crate::error::{arg_err, shape_err, Result};
use crate::nn::{Init, Session, SpecBuilder};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TAU_START: f64 = 1.0;
pub const TAU_END: f64 = 0.1;
/// Interaction order of each gated convolution block.
pub const GATED_ORDER: usize = 3;
pub const DEPTHWISE_KERNEL: usize = 3;
/// Stabilizer of the RMS normalization applied to `[Y, C_t]` ahead of the projection.
pub const NORM_EPS: f64 = 1e-6;
/// Init bound of the gating filters. Each recursion step multiplies by a
/// filter response, so fan-in scaling would shrink the block output by
/// orders of magnitude per step.
pub const GATE_FILTER_BOUND: f64 = 1.0;

pub type GateRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// How inference applies the gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GateMode {
    /// Skip the block when `rho_1 <= 0.5`.
    #[default]
    Hard,
    /// Always run the block and scale it by `rho_1`.
    Soft,
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Hard => "hard",
            GateMode::Soft => "soft",
        })
    }
}

impl FromStr for GateMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hard" => Ok(GateMode::Hard),
            "soft" => Ok(GateMode::Soft),
            other => Err(arg_err("gate_mode", format!("expected hard|soft, got {other:?}"))),
        }
    }
}

/// Overrides the learned decision, for ablations and tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GateOverride {
    #[default]
    Learned,
    /// `rho_1 = 0`: the block is skipped and the stage is the identity.
    Closed,
    /// `rho_1 = 1`: the block output is added unscaled.
    Open,
}

#[derive(Clone, Copy, Debug)]
pub struct GateOptions {
    pub mode: Mode,
    pub gate_mode: GateMode,
    pub tau: f64,
    pub force: GateOverride,
}

impl GateOptions {
    pub fn infer(gate_mode: GateMode) -> Self {
        GateOptions {
            mode: Mode::Infer,
            gate_mode,
            tau: TAU_END,
            force: GateOverride::Learned,
        }
    }

    pub fn train(tau: f64) -> Self {
        GateOptions {
            mode: Mode::Train,
            gate_mode: GateMode::Soft,
            tau,
            force: GateOverride::Learned,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateState {
    /// `[suppress, activate]` logits.
    pub logits: [f64; 2],
    pub rho: [f64; 2],
    pub noise: [f64; 2],
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTrace {
    /// 1-based stage index.
    pub stage: usize,
    pub gate: GateState,
    pub activated: bool,
    /// Multiply-accumulates actually executed by the stage.
    pub flops: u64,
    /// Executed by the decision unit alone.
    pub du_flops: u64,
    /// Cost of the stage's decomposition block whether or not it ran.
    pub adb_flops: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopReport {
    pub total_flops: u64,
    pub all_active_flops: u64,
    pub active_stage_count: usize,
    pub savings_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdmConfig {
    pub channels: usize,
    pub strategy_dim: usize,
    pub stages: usize,
}

pub const PREFIX: &str = "ddm";

pub fn stage_prefix(i: usize) -> String {
    format!("{PREFIX}.s{i:02}")
}

#[derive(Clone, Debug)]
pub struct Ddm {
    pub config: DdmConfig,
}

impl Ddm {
    pub fn new(config: DdmConfig) -> Self {
        Ddm { config }
    }

    pub fn declare(&self, b: &mut SpecBuilder) {
        let DdmConfig { channels: c, strategy_dim: cs, stages } = self.config;
        for i in 1..=stages {
            let p = stage_prefix(i);
            b.conv(&format!("{p}.du.conv1"), c + cs, c, 3, true);
            b.conv(&format!("{p}.du.conv2"), c, c, 3, true);
            b.linear(&format!("{p}.du.fc"), c, 2);
            declare_gated(b, &format!("{p}.adb.g1"), c);
            b.conv(&format!("{p}.adb.mix1"), c, c, 1, true);
            declare_gated(b, &format!("{p}.adb.g2"), c);
            b.conv(&format!("{p}.adb.mix2"), c, c, 1, true);
            b.conv(&format!("{p}.adb.out"), c, c, 3, true);
        }
    }

    /// Runs all stages in order. `rng` supplies Gumbel noise in training mode.
    pub fn run<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        y0: Var,
        prompts: &Prompts,
        opts: &GateOptions,
        rng: &mut GateRng,
    ) -> Result<(Var, Vec<StageTrace>)> {
        run_decomposition(sess, self.config.stages, y0, prompts, opts, rng)
    }
}

fn declare_gated(b: &mut SpecBuilder, prefix: &str, c: usize) {
    b.conv(&format!("{prefix}.proj"), 2 * c, 2 * c, 1, true);
    for j in 1..=GATED_ORDER {
        b.push(format!("{prefix}.dw{j}.w"), [c, DEPTHWISE_KERNEL, DEPTHWISE_KERNEL], Init::Uniform(GATE_FILTER_BOUND));
    }
    for j in 1..GATED_ORDER {
        b.conv(&format!("{prefix}.lin{j}"), c, c, 1, true);
    }
    b.conv(&format!("{prefix}.out"), c, c, 1, true);
}

/// Decision unit: `[Y, tile(S_t)]` through conv3x3, ReLU, 2x2 max-pool,
/// conv3x3, ReLU, global average pool and a linear map to two logits.
pub fn decision_unit<S: Scalar>(sess: &mut Session<S>, prefix: &str, y: Var, strategy: Var) -> Result<Var> {
    let (_, h, w) = sess.value(y).dims3()?;
    if h < 2 || w < 2 {
        return Err(shape_err("decision_unit", format!("features {h}x{w} smaller than 2x2")));
    }
    let tiled = sess.graph.broadcast_channels(strategy, h, w)?;
    let x = sess.graph.concat_channels(y, tiled)?;
    let x = sess.conv_relu(x, &format!("{prefix}.du.conv1"), 1)?;
    let x = sess.graph.max_pool2d(x, 2, 2)?;
    let x = sess.conv_relu(x, &format!("{prefix}.du.conv2"), 1)?;
    let x = sess.graph.global_avg_pool(x)?;
    let c = sess.value(x).numel();
    let x = sess.graph.reshape(x, [1, c])?;
    let logits = sess.linear(x, &format!("{prefix}.du.fc"))?;
    sess.graph.reshape(logits, [2])
}

/// Standard Gumbel(0, 1) draws `-ln(-ln U)`, `U ~ Uniform(0, 1)` (open).
pub fn sample_gumbel(rng: &mut GateRng) -> [f64; 2] {
    let mut draw = || {
        let u: f64 = Open01.sample(rng);
        -(-u.ln()).ln()
    };
    [draw(), draw()]
}

/// `rho_m = exp((h_m + g_m)/tau) / sum_k exp((h_k + g_k)/tau)`, with `g`
/// sampled in training mode and zero at inference.
pub fn gumbel_softmax(logits: [f64; 2], tau: f64, mode: Mode, rng: &mut GateRng) -> Result<[f64; 2]> {
    let noise = match mode {
        Mode::Train => sample_gumbel(rng),
        Mode::Infer => [0.0, 0.0],
    };
    gumbel_softmax_with_noise(logits, noise, tau)
}

pub fn gumbel_softmax_with_noise(logits: [f64; 2], noise: [f64; 2], tau: f64) -> Result<[f64; 2]> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(arg_err("gumbel_softmax", format!("temperature must be positive, got {tau}")));
    }
    let z = [(logits[0] + noise[0]) / tau, (logits[1] + noise[1]) / tau];
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    Ok([e[0] / s, e[1] / s])
}

/// Differentiable gate on the tape: softmax of `(h + noise) / tau`.
pub fn gumbel_gate<S: Scalar>(g: &mut Graph<S>, logits: Var, noise: [f64; 2], tau: f64) -> Result<Var> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(arg_err("gumbel_softmax", format!("temperature must be positive, got {tau}")));
    }
    let n = g.constant(Tensor::from_f64([2], &noise)?)?;
    let z = g.add(logits, n)?;
    let z = g.scale(z, S::lit(1.0 / tau))?;
    g.softmax(z, 0)
}

/// Intermediate values of the first interaction order, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct FirstOrder {
    pub p0: Var,
    pub q0: Var,
    pub p1: Var,
}

/// `[p0, q0] = proj(norm([Y, C_t]))`, `p1 = dw1(q0) * p0`.
pub fn gated_first_order<S: Scalar>(sess: &mut Session<S>, prefix: &str, y: Var, correction: Var) -> Result<FirstOrder> {
    let (c, h, w) = sess.value(y).dims3()?;
    if sess.graph.shape(correction) != [c, h, w] {
        return Err(shape_err(
            "adb_forward",
            format!("features {:?} vs correction prompt {:?}", [c, h, w], sess.graph.shape(correction)),
        ));
    }
    let x = sess.graph.concat_channels(y, correction)?;
    let x = sess.graph.rms_norm_channels(x, S::lit(NORM_EPS))?;
    let z = sess.conv(x, &format!("{prefix}.proj"), 0)?;
    let p0 = sess.graph.slice_channels(z, 0, c)?;
    let q0 = sess.graph.slice_channels(z, c, c)?;
    let f = sess.depthwise(q0, &format!("{prefix}.dw1"), DEPTHWISE_KERNEL / 2)?;
    let p1 = sess.graph.mul(f, p0)?;
    Ok(FirstOrder { p0, q0, p1 })
}

/// Prompt-conditioned recursive gated convolution of order [`GATED_ORDER`]:
/// `p_j = dw_j(q_{j-1}) * p_{j-1}`, `q_j = lin_j(p_j)`, output `out(p_3)`.
pub fn gated_conv<S: Scalar>(sess: &mut Session<S>, prefix: &str, y: Var, correction: Var) -> Result<Var> {
    let FirstOrder { p1, .. } = gated_first_order(sess, prefix, y, correction)?;
    let mut p = p1;
    for j in 2..=GATED_ORDER {
        let q = sess.conv(p, &format!("{prefix}.lin{}", j - 1), 0)?;
        let f = sess.depthwise(q, &format!("{prefix}.dw{j}"), DEPTHWISE_KERNEL / 2)?;
        p = sess.graph.mul(f, p)?;
    }
    sess.conv(p, &format!("{prefix}.out"), 0)
}

/// Adaptive decomposition block: gated conv, 1x1, gated conv, 1x1, 3x3
/// output layer, with ReLU between sub-blocks.
pub fn adb_forward<S: Scalar>(sess: &mut Session<S>, prefix: &str, y: Var, correction: Var) -> Result<Var> {
    let h = gated_conv(sess, &format!("{prefix}.adb.g1"), y, correction)?;
    let h = sess.graph.relu(h)?;
    let h = sess.conv_relu(h, &format!("{prefix}.adb.mix1"), 0)?;
    let h = gated_conv(sess, &format!("{prefix}.adb.g2"), h, correction)?;
    let h = sess.graph.relu(h)?;
    let h = sess.conv_relu(h, &format!("{prefix}.adb.mix2"), 0)?;
    sess.conv(h, &format!("{prefix}.adb.out"), 1)
}

/// MACs of one gated conv block on `[c, h, w]` features.
pub fn gated_conv_macs(c: usize, h: usize, w: usize) -> u64 {
    let hw = (h * w) as u64;
    let c = c as u64;
    let k2 = (DEPTHWISE_KERNEL * DEPTHWISE_KERNEL) as u64;
    let order = GATED_ORDER as u64;
    (4 * c * c + order * k2 * c + (order - 1) * c * c + c * c) * hw
}

/// MACs of one adaptive decomposition block on `[c, h, w]` features.
pub fn adb_macs(c: usize, h: usize, w: usize) -> u64 {
    let hw = (h * w) as u64;
    let cc = (c * c) as u64;
    2 * gated_conv_macs(c, h, w) + 2 * cc * hw + 9 * cc * hw
}

/// MACs of one decision unit on `[c, h, w]` features with a `strategy_dim` prompt.
pub fn du_macs(c: usize, strategy_dim: usize, h: usize, w: usize) -> u64 {
    let first = ((c + strategy_dim) * c * 9 * h * w) as u64;
    let second = (c * c * 9 * (h / 2) * (w / 2)) as u64;
    first + second + (c * 2) as u64
}

/// One stage: `Y_i = Y_{i-1} + ADB(Y_{i-1}, C_t) * rho_1`.
pub fn stage_update<S: Scalar>(
    sess: &mut Session<S>,
    stage: usize,
    y_prev: Var,
    prompts: &Prompts,
    opts: &GateOptions,
    rng: &mut GateRng,
) -> Result<(Var, StageTrace)> {
    let prefix = stage_prefix(stage);
    let (c, h, w) = sess.value(y_prev).dims3()?;
    let macs_start = sess.graph.macs();

    let logits = decision_unit(sess, &prefix, y_prev, prompts.strategy)?;
    let noise = match opts.mode {
        Mode::Train => sample_gumbel(rng),
        Mode::Infer => [0.0, 0.0],
    };
    let rho = gumbel_gate(&mut sess.graph, logits, noise, opts.tau)?;
    let du_flops = sess.graph.macs() - macs_start;

    let lv = sess.value(logits).data();
    let rv = sess.value(rho).data();
    let gate = GateState {
        logits: [lv[0].as_f64(), lv[1].as_f64()],
        rho: [rv[0].as_f64(), rv[1].as_f64()],
        noise,
        tau: opts.tau,
    };
    let rho1 = gate.rho[1];

    let (y_next, activated) = match opts.force {
        GateOverride::Closed => (y_prev, false),
        GateOverride::Open => {
            let a = adb_forward(sess, &prefix, y_prev, prompts.correction)?;
            (sess.graph.add(y_prev, a)?, true)
        }
        GateOverride::Learned => {
            let run = opts.mode == Mode::Train || opts.gate_mode == GateMode::Soft || rho1 > 0.5;
            if run {
                let a = adb_forward(sess, &prefix, y_prev, prompts.correction)?;
                let r1 = sess.graph.index(rho, 1)?;
                let gated = sess.graph.mul(a, r1)?;
                (sess.graph.add(y_prev, gated)?, rho1 > 0.5)
            } else {
                (y_prev, false)
            }
        }
    };

    let trace = StageTrace {
        stage,
        gate,
        activated,
        flops: sess.graph.macs() - macs_start,
        du_flops,
        adb_flops: adb_macs(c, h, w),
    };
    Ok((y_next, trace))
}

/// Applies stages `1..=stages` in sequence.
pub fn run_decomposition<S: Scalar>(
    sess: &mut Session<S>,
    stages: usize,
    y0: Var,
    prompts: &Prompts,
    opts: &GateOptions,
    rng: &mut GateRng,
) -> Result<(Var, Vec<StageTrace>)> {
    if stages == 0 {
        return Err(arg_err("run_decomposition", "need at least one stage"));
    }
    let mut y = y0;
    let mut traces = Vec::with_capacity(stages);
    for i in 1..=stages {
        let (next, trace) = stage_update(sess, i, y, prompts, opts, rng)?;
        y = next;
        traces.push(trace);
    }
    Ok((y, traces))
}

/// Linear anneal from 1.0 at step 0 to 0.1 at `total_steps`; later steps stay at 0.1.
pub fn temperature_at(step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return TAU_END;
    }
    TAU_START + (TAU_END - TAU_START) * step as f64 / total_steps as f64
}

/// Executed versus all-active MACs over a run.
pub fn flop_report(traces: &[StageTrace]) -> Result<FlopReport> {
    if traces.is_empty() {
        return Err(arg_err("flop_report", "no stages"));
    }
    let total: u64 = traces.iter().map(|t| t.flops).sum();
    let all_active: u64 = traces.iter().map(|t| t.du_flops + t.adb_flops).sum();
    Ok(FlopReport {
        total_flops: total,
        all_active_flops: all_active,
        active_stage_count: traces.iter().filter(|t| t.activated).count(),
        savings_fraction: 1.0 - total as f64 / all_active as f64,
    })
}
