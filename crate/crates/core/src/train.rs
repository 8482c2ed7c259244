//! Adam, the cosine schedule and the end-to-end training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::Manifest;
use crate::ddm::{temperature_at, GateRng};
use crate::error::{arg_err, io_err, Error, Result};
use crate::net::{loss_l1, D3Net, ForwardOptions};
use crate::nn::{ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LOSS_CSV_HEADER: &str = "step,loss,lr,tau,active_stage_rate";

/// `lr_final + (lr_init - lr_final) (1 + cos(pi step / total)) / 2`, with
/// `step` clamped to `total`. A zero-length schedule sits at `lr_final`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, lr_final: f64) -> f64 {
    if total_steps == 0 {
        return lr_final;
    }
    let p = step.min(total_steps) as f64 / total_steps as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Weights plus optimizer moments; `t` counts applied updates.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<S: Scalar = f64> {
    pub params: ParamStore<S>,
    pub m: ParamStore<S>,
    pub v: ParamStore<S>,
    pub t: u64,
}

impl<S: Scalar> ModelState<S> {
    pub fn new(params: ParamStore<S>) -> Self {
        let zeros = |p: &ParamStore<S>| {
            let mut z = ParamStore::new();
            for (k, t) in p.iter() {
                z.insert(k.clone(), Tensor::zeros(t.shape().to_vec()));
            }
            z
        };
        ModelState { m: zeros(&params), v: zeros(&params), params, t: 0 }
    }

    /// One bias-corrected Adam update. Parameters without a gradient are left alone.
    pub fn adam_update(&mut self, grads: &BTreeMap<String, Tensor<S>>, lr: f64, adam: &Adam) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (adam.beta1, adam.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, g) in grads {
            let p = self.params.get(name).ok_or_else(|| arg_err("adam", format!("unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(arg_err("adam", format!("{name}: gradient shape {:?} vs {:?}", g.shape(), p.shape())));
            }
            let m = self.m.get(name).expect("moment per parameter");
            let v = self.v.get(name).expect("moment per parameter");
            let n = p.numel();
            let (mut pn, mut mn, mut vn) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for i in 0..n {
                let gi = g.data()[i].as_f64();
                let mi = b1 * m.data()[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i].as_f64() + (1.0 - b2) * gi * gi;
                let step = lr * (mi / c1) / ((vi / c2).sqrt() + adam.eps);
                pn.push(S::lit(p.data()[i].as_f64() - step));
                mn.push(S::lit(mi));
                vn.push(S::lit(vi));
            }
            let shape = p.shape().to_vec();
            self.params.insert(name.clone(), Tensor::new(shape.clone(), pn)?);
            self.m.insert(name.clone(), Tensor::new(shape.clone(), mn)?);
            self.v.insert(name.clone(), Tensor::new(shape, vn)?);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    /// Fraction of (sample, stage) gates with `rho_1 > 0.5`.
    pub active_stage_rate: f64,
}

/// Gate-noise seed for one sample of one step.
pub fn sample_seed(seed: u64, step: usize, index: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((step as u64) << 20) ^ index as u64);
    r.random()
}

/// Forward, L1 loss and parameter gradients for one (degraded, clean) pair.
pub fn sample_gradients<S: Scalar>(
    net: &D3Net,
    params: &ParamStore<S>,
    degraded: &Tensor<S>,
    clean: &Tensor<S>,
    opts: &ForwardOptions,
    rng: &mut GateRng,
) -> Result<(f64, BTreeMap<String, Tensor<S>>, usize)> {
    let mut sess = Session::new(params, true);
    let x = sess.constant(degraded.clone())?;
    let y = sess.constant(clean.clone())?;
    let out = net.forward(&mut sess, x, opts, rng)?;
    let loss = loss_l1(&mut sess, out.restored, y)?;
    let value = sess.value(loss).data()[0].as_f64();
    let active = out.traces.iter().filter(|t| t.activated).count();
    Ok((value, sess.param_grads(loss)?, active))
}

/// One optimizer step on a batch of (degraded, clean) pairs. Samples run
/// on independent tapes in parallel and their gradients are averaged in
/// batch order, so the result does not depend on thread scheduling.
#[allow(clippy::too_many_arguments)]
pub fn train_step<S: Scalar>(
    net: &D3Net,
    state: &mut ModelState<S>,
    batch: &[(Tensor<S>, Tensor<S>)],
    step: usize,
    total_steps: usize,
    lr_range: (f64, f64),
    adam: &Adam,
    seed: u64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(arg_err("train_step", "empty batch"));
    }
    let tau = temperature_at(step, total_steps);
    let lr = cosine_lr(step, total_steps, lr_range.0, lr_range.1);
    let opts = ForwardOptions::train(tau);
    let params = &state.params;
    let results = batch
        .par_iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let mut rng = GateRng::seed_from_u64(sample_seed(seed, step, i));
            sample_gradients(net, params, x, y, &opts, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = batch.len() as f64;
    let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "train_step loss" });
    }
    let mut total: BTreeMap<String, Tensor<S>> = BTreeMap::new();
    for (_, grads, _) in &results {
        for (k, g) in grads {
            match total.get_mut(k) {
                Some(acc) => *acc = acc.zip_map(g, |a, b| a + b)?,
                None => {
                    total.insert(k.clone(), g.clone());
                }
            }
        }
    }
    let inv = S::lit(1.0 / n);
    for g in total.values_mut() {
        *g = g.map(|v| v * inv);
        g.ensure_finite("train_step gradient")?;
    }
    state.adam_update(&total, lr, adam)?;
    let active: usize = results.iter().map(|r| r.2).sum();
    Ok(StepReport {
        loss,
        lr,
        tau,
        active_stage_rate: active as f64 / (n * net.config.stages as f64),
    })
}

/// Random aligned crop of the same window from both images.
pub fn random_crop<S: Scalar>(pair: &(Tensor<S>, Tensor<S>), size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<S>, Tensor<S>)> {
    let (c, h, w) = pair.0.dims3()?;
    if pair.1.shape() != pair.0.shape() {
        return Err(arg_err("random_crop", "degraded and clean shapes differ"));
    }
    if h < size || w < size {
        return Err(arg_err("random_crop", format!("image {h}x{w} smaller than patch {size}")));
    }
    let y0 = rng.random_range(0..=h - size);
    let x0 = rng.random_range(0..=w - size);
    let crop = |t: &Tensor<S>| {
        Tensor::from_fn([c, size, size], |i| {
            let (ch, r) = (i / (size * size), i % (size * size));
            t.data()[ch * h * w + (y0 + r / size) * w + x0 + r % size]
        })
    };
    Ok((crop(&pair.0), crop(&pair.1)))
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn loss_csv(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.dir.join(format!("ckpt_{step:06}.d3nt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.d3nt")
    }
}

/// Steps between periodic checkpoints.
pub fn checkpoint_interval(total_steps: usize) -> usize {
    (total_steps / 10).max(1)
}

/// The lr and temperature schedules run over `max(T - 1, 1)` so the last
/// executed step (index `T - 1`) lands exactly on their final values.
pub fn schedule_length(total_steps: usize) -> usize {
    total_steps.saturating_sub(1).max(1)
}

pub struct TrainSummary {
    pub reports: Vec<StepReport>,
    pub state: ModelState,
}

/// Full run driven by `cfg`: pairs from `cfg.train_manifest`, random crops,
/// a loss CSV, checkpoints every `checkpoint_interval` steps plus a final one.
/// With zero steps only the initial checkpoint is written.
pub fn train(cfg: &RunConfig, out: &TrainOutputs, mut on_step: impl FnMut(usize, &StepReport)) -> Result<TrainSummary> {
    cfg.validate()?;
    if cfg.train_manifest.as_os_str().is_empty() {
        return Err(Error::Config("train_manifest is not set".into()));
    }
    let manifest = Manifest::read(&cfg.train_manifest)?;
    if manifest.rows.is_empty() {
        return Err(Error::Runtime("training manifest has no rows".into()));
    }
    let pairs = (0..manifest.rows.len()).map(|i| manifest.load_pair(i)).collect::<Result<Vec<_>>>()?;
    train_on_pairs(cfg, &pairs, out, &mut on_step)
}

pub fn train_on_pairs(
    cfg: &RunConfig,
    pairs: &[(Tensor, Tensor)],
    out: &TrainOutputs,
    on_step: &mut dyn FnMut(usize, &StepReport),
) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(&out.dir).map_err(io_err(&out.dir))?;
    let net = D3Net::new(cfg.network.clone())?;
    let seed = cfg.network.seed;
    let mut state = ModelState::new(net.init_params::<f64>(seed));
    let adam = Adam { beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps };
    let save = |state: &ModelState, path: &Path| Checkpoint { config: cfg.clone(), state: state.clone() }.save(path);

    let total = cfg.total_steps;
    let mut csv = format!("{LOSS_CSV_HEADER}\n");
    let csv_path = out.loss_csv();
    fs::write(&csv_path, &csv).map_err(io_err(&csv_path))?;
    if total == 0 {
        save(&state, &out.checkpoint(0))?;
        save(&state, &out.final_checkpoint())?;
        return Ok(TrainSummary { reports: Vec::new(), state });
    }
    let mut crop_rng = ChaCha8Rng::seed_from_u64(seed);
    crop_rng.set_stream(1);
    let sched = schedule_length(total);
    let every = checkpoint_interval(total);
    let mut reports = Vec::with_capacity(total);
    for step in 0..total {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let i = crop_rng.random_range(0..pairs.len());
                random_crop(&pairs[i], cfg.patch_size, &mut crop_rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let r = train_step(&net, &mut state, &batch, step, sched, (cfg.lr_init, cfg.lr_final), &adam, seed)
            .map_err(|e| Error::Runtime(format!("step {step}: {e}")))?;
        let _ = writeln!(csv, "{step},{},{},{},{}", r.loss, r.lr, r.tau, r.active_stage_rate);
        fs::write(&csv_path, &csv).map_err(io_err(&csv_path))?;
        on_step(step, &r);
        reports.push(r);
        if (step + 1) % every == 0 {
            save(&state, &out.checkpoint(step + 1))?;
        }
    }
    save(&state, &out.final_checkpoint())?;
    Ok(TrainSummary { reports, state })
}
