use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use d3net::checkpoint::Checkpoint;
use d3net::config::RunConfig;
use d3net::corpus::{generate_corpus, CleanSource, Manifest};
use d3net::ddm::{flop_report, GateMode};
use d3net::degradations::Degradation;
use d3net::image_io::{read_image, write_image, write_normalized_pgm};
use d3net::metrics::{cap_psnr, psnr, ssim, MetricReport};
use d3net::net::{D3Net, ForwardOptions};
use d3net::spectral::{amplitude_map, band_energy_profile, log_compress};
use d3net::train::{train, TrainOutputs};
use d3net::Tensor;

#[derive(Parser, Debug)]
#[command(name = "d3net", version, about = "All-in-one image restoration: corpus, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write degraded/clean PPM pairs and a manifest.
    GenerateCorpus {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// `kind[:key=value;...]`, repeatable; pairs cycle through the list.
        #[arg(long = "degradation", required = true)]
        degradations: Vec<Degradation>,
        /// Directory of clean PPM/PGM images. Procedural images when absent.
        #[arg(long)]
        source: Option<PathBuf>,
        /// Procedural image size.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a config file, writing a loss CSV and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        total_steps: Option<usize>,
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// PSNR/SSIM over a manifest, per image and mean.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Scores the degraded inputs themselves when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Metrics CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "hard")]
        gate_mode: GateMode,
    },
    /// Restore one image.
    Restore {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "hard")]
        gate_mode: GateMode,
    },
    /// Log-amplitude spectrum PGM and radial band profile CSV.
    AnalyzeSpectrum {
        #[arg(long)]
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        bands: usize,
    },
    /// Per-stage gate activation rates over a manifest.
    GateStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> Result<(D3Net, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let net = D3Net::new(ck.config.network.clone())?;
    Ok((net, ck))
}

fn generate(out: &Path, count: usize, specs: &[Degradation], source: Option<PathBuf>, size: usize, seed: u64) -> Result<()> {
    let source = match source {
        Some(dir) => CleanSource::Dir(dir),
        None => CleanSource::Procedural { height: size, width: size },
    };
    let report = generate_corpus(specs, &source, out, count, seed)?;
    for (path, why) in &report.skipped {
        eprintln!("skipped {}: {why}", path.display());
    }
    println!("wrote {} pairs to {}", report.manifest.rows.len(), out.display());
    Ok(())
}

fn run_train(config: &Path, out: &Path, total_steps: Option<usize>, manifest: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::read(config)?;
    if let Some(t) = total_steps {
        cfg.total_steps = t;
    }
    if let Some(m) = manifest {
        cfg.train_manifest = m;
    } else if cfg.train_manifest.is_relative() && !cfg.train_manifest.as_os_str().is_empty() {
        // Relative manifest paths are relative to the config file.
        if let Some(dir) = config.parent() {
            cfg.train_manifest = dir.join(&cfg.train_manifest);
        }
    }
    if let Some(s) = seed {
        cfg.network.seed = s;
    }
    cfg.apply_env()?;
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("run.cfg"), cfg.emit()).context("writing run.cfg")?;
    let total = cfg.total_steps;
    let every = (total / 20).max(1);
    let summary = train(&cfg, &TrainOutputs { dir: out.into() }, |step, r| {
        if step % every == 0 || step + 1 == total {
            eprintln!("step {step:>6}  loss {:.5}  lr {:.3e}  tau {:.3}  active {:.2}", r.loss, r.lr, r.tau, r.active_stage_rate);
        }
    })?;
    println!("trained {} steps; checkpoints in {}", summary.reports.len(), out.display());
    Ok(())
}

fn eval(manifest: &Path, checkpoint: Option<&Path>, out: Option<&Path>, gate_mode: GateMode) -> Result<()> {
    let m = Manifest::read(manifest)?;
    if m.rows.is_empty() {
        bail!("manifest {} has no rows", manifest.display());
    }
    let model = checkpoint.map(load_model).transpose()?;
    let opts = ForwardOptions::infer(gate_mode);
    let scores = (0..m.rows.len())
        .into_par_iter()
        .map(|i| {
            let (degraded, clean) = m.load_pair(i)?;
            let candidate = match &model {
                Some((net, ck)) => net.restore_any(&ck.state.params, &degraded, &opts)?.0.map(|v| v.clamp(0.0, 1.0)),
                None => degraded,
            };
            Ok((cap_psnr(psnr(&candidate, &clean, 1.0)?), ssim(&candidate, &clean)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = MetricReport::default();
    let mut csv = String::from("degraded,kind,psnr_db,ssim\n");
    for (row, &(p, s)) in m.rows.iter().zip(&scores) {
        report.push(p, s);
        let _ = writeln!(csv, "{},{},{p:.6},{s:.6}", row.degraded.display(), row.kind);
    }
    let _ = writeln!(csv, "mean,,{:.6},{:.6}", report.mean_psnr(), report.mean_ssim());
    emit(out, &csv)?;
    if out.is_some() {
        println!("mean psnr {:.4} dB, mean ssim {:.4} over {} images", report.mean_psnr(), report.mean_ssim(), scores.len());
    }
    Ok(())
}

fn restore(checkpoint: &Path, input: &Path, output: &Path, gate_mode: GateMode) -> Result<()> {
    let (net, ck) = load_model(checkpoint)?;
    let image: Tensor = d3net::corpus::to_rgb(read_image(input)?)?;
    let (out, traces) = net.restore_any(&ck.state.params, &image, &ForwardOptions::infer(gate_mode))?;
    write_image(output, &out.map(|v| v.clamp(0.0, 1.0)))?;
    let active = traces.iter().filter(|t| t.activated).count();
    println!("restored {} ({active} of {} stages active)", output.display(), traces.len());
    Ok(())
}

fn analyze_spectrum(input: &Path, out: &Path, bands: usize) -> Result<()> {
    let image: Tensor = read_image(input)?;
    let amp = amplitude_map(&image)?;
    let profile = band_energy_profile(&amp, bands)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_normalized_pgm(out.join("amplitude.pgm"), &log_compress(&amp))?;
    let mut csv = String::from("band,r_lo,r_hi,energy_fraction\n");
    for (i, e) in profile.iter().enumerate() {
        let _ = writeln!(csv, "{i},{:.6},{:.6},{e:.9}", i as f64 / bands as f64, (i + 1) as f64 / bands as f64);
    }
    emit(Some(&out.join("bands.csv")), &csv)?;
    println!("wrote amplitude.pgm and bands.csv to {}", out.display());
    Ok(())
}

fn gate_stats(checkpoint: &Path, manifest: &Path, out: Option<&Path>) -> Result<()> {
    let (net, ck) = load_model(checkpoint)?;
    let m = Manifest::read(manifest)?;
    if m.rows.is_empty() {
        bail!("manifest {} has no rows", manifest.display());
    }
    let opts = ForwardOptions::infer(GateMode::Hard);
    let traces = (0..m.rows.len())
        .into_par_iter()
        .map(|i| {
            let (degraded, _) = m.load_pair(i)?;
            Ok(net.restore_any(&ck.state.params, &degraded, &opts)?.1)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = traces.len() as f64;
    let stages = net.config.stages;
    let mut csv = String::from("stage,activation_rate,mean_rho1\n");
    for s in 0..stages {
        let rate = traces.iter().filter(|t| t[s].activated).count() as f64 / n;
        let rho = traces.iter().map(|t| t[s].gate.rho[1]).sum::<f64>() / n;
        let _ = writeln!(csv, "{},{rate:.6},{rho:.6}", s + 1);
    }
    let savings = traces.iter().map(|t| flop_report(t).map(|r| r.savings_fraction)).sum::<d3net::Result<f64>>()? / n;
    let _ = writeln!(csv, "all,{:.6},", traces.iter().flatten().filter(|t| t.activated).count() as f64 / (n * stages as f64));
    emit(out, &csv)?;
    eprintln!("mean decomposition-branch FLOP savings {:.2}%", 100.0 * savings);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateCorpus { out, count, degradations, source, size, seed } => generate(&out, count, &degradations, source, size, seed),
        Command::Train { config, out, total_steps, train_manifest, seed } => run_train(&config, &out, total_steps, train_manifest, seed),
        Command::Eval { manifest, checkpoint, out, gate_mode } => eval(&manifest, checkpoint.as_deref(), out.as_deref(), gate_mode),
        Command::Restore { checkpoint, input, output, gate_mode } => restore(&checkpoint, &input, &output, gate_mode),
        Command::AnalyzeSpectrum { input, out, bands } => analyze_spectrum(&input, &out, bands),
        Command::GateStats { checkpoint, manifest, out } => gate_stats(&checkpoint, &manifest, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their cause; skip repeats.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
