mod common;

use std::fs;

use common::{rand_image, tiny_config};
use d3net::cdda::AttentionPreset;
use d3net::checkpoint::Checkpoint;
use d3net::config::RunConfig;
use d3net::ddm::GateMode;
use d3net::net::{D3Net, ForwardOptions};
use d3net::train::{train_on_pairs, ModelState, TrainOutputs, LOSS_CSV_HEADER};
use d3net::{Error, Tensor};
use proptest::prelude::*;

fn tiny_run(steps: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig { total_steps: steps, batch_size: 2, patch_size: 8, lr_init: 1e-3, lr_final: 1e-5, ..Default::default() };
    cfg.network = d3net::net::NetworkConfig { seed, ..tiny_config() };
    cfg
}

fn pairs() -> Vec<(Tensor, Tensor)> {
    (0..3)
        .map(|i| {
            let clean = rand_image(&[3, 12, 12], i);
            let noisy = clean.map(|v| (v + 0.05).min(1.0));
            (noisy, clean)
        })
        .collect()
}

fn trained_checkpoint() -> Checkpoint {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(3, 1);
    let s = train_on_pairs(&cfg, &pairs(), &TrainOutputs { dir: dir.path().into() }, &mut |_, _| {}).unwrap();
    Checkpoint { config: cfg, state: s.state }
}

#[test]
fn checkpoint_bytes_round_trip_exactly() {
    let ck = trained_checkpoint();
    assert_eq!(ck.state.t, 3);
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"D3NT");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.config, ck.config);
    assert_eq!(back.state.t, 3);
    for (store, other) in [(&ck.state.params, &back.state.params), (&ck.state.m, &back.state.m), (&ck.state.v, &back.state.v)] {
        assert_eq!(store.len(), other.len());
        for (n, t) in store.iter() {
            assert!(t.bitwise_eq(other.get(n).unwrap()), "{n}");
        }
    }
    assert_eq!(back.to_bytes().unwrap(), bytes);
}

pub fn save_load_forward_is_bitwise_stable() {
    let ck = trained_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.d3nt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let net = D3Net::new(ck.config.network.clone()).unwrap();
    let image = rand_image(&[3, 8, 8], 9);
    for mode in [GateMode::Hard, GateMode::Soft] {
        let (a, _) = net.restore(&ck.state.params, &image, &ForwardOptions::infer(mode)).unwrap();
        let (b, _) = net.restore(&loaded.state.params, &image, &ForwardOptions::infer(mode)).unwrap();
        assert!(a.bitwise_eq(&b));
    }
}

#[test]
fn corrupt_checkpoints_are_rejected_with_offsets() {
    let bytes = trained_checkpoint().to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    let cut = bytes.len() - 3;
    match Checkpoint::<f64>::from_bytes(&bytes[..cut]) {
        Err(Error::Format { offset, .. }) => assert!(offset <= cut),
        other => panic!("expected a format error, got {other:?}"),
    }
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(Checkpoint::<f64>::from_bytes(&nan).is_err());
}

pub fn training_runs_are_byte_reproducible() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutputs { dir: dir.path().into() };
        train_on_pairs(&tiny_run(4, 5), &pairs(), &out, &mut |_, _| {}).unwrap();
        let csv = fs::read(out.loss_csv()).unwrap();
        let ck = fs::read(out.final_checkpoint()).unwrap();
        (csv, ck, dir)
    };
    let (csv_a, ck_a, dir) = run();
    let (csv_b, ck_b, _) = run();
    assert_eq!(csv_a, csv_b);
    assert_eq!(ck_a, ck_b);

    let text = String::from_utf8(csv_a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOSS_CSV_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,") && lines[4].starts_with("3,"));
    let last: Vec<f64> = lines[4].split(',').map(|f| f.parse().unwrap()).collect();
    assert_eq!(last[2], 1e-5);
    assert_eq!(last[3], 0.1);
    for step in 1..=4 {
        assert!(dir.path().join(format!("ckpt_{step:06}.d3nt")).exists());
    }

    let other = tempfile::tempdir().unwrap();
    let out = TrainOutputs { dir: other.path().into() };
    train_on_pairs(&tiny_run(4, 6), &pairs(), &out, &mut |_, _| {}).unwrap();
    assert_ne!(fs::read(out.loss_csv()).unwrap(), fs::read(dir.path().join("loss.csv")).unwrap());
}

#[test]
fn zero_step_run_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutputs { dir: dir.path().into() };
    let cfg = tiny_run(0, 2);
    let s = train_on_pairs(&cfg, &pairs(), &out, &mut |_, _| {}).unwrap();
    assert!(s.reports.is_empty());
    assert_eq!(fs::read_to_string(out.loss_csv()).unwrap(), format!("{LOSS_CSV_HEADER}\n"));
    let ck = Checkpoint::load(out.final_checkpoint()).unwrap();
    assert_eq!(ck.state.t, 0);
    let init = ModelState::new(D3Net::new(cfg.network.clone()).unwrap().init_params::<f64>(2));
    for (n, t) in init.params.iter() {
        assert!(t.bitwise_eq(ck.state.params.get(n).unwrap()));
    }
    assert!(out.checkpoint(0).exists());
}

#[test]
fn checkpoint_cadence_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutputs { dir: dir.path().into() };
    train_on_pairs(&tiny_run(20, 3), &pairs(), &out, &mut |_, _| {}).unwrap();
    let mut names: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    let want: Vec<String> = (1..=10)
        .map(|k| format!("ckpt_{:06}.d3nt", 2 * k))
        .chain(["final.d3nt".to_string(), "loss.csv".to_string()])
        .collect();
    assert_eq!(names, want);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn config_text_is_a_fixpoint(
        base in 1usize..64, depth in 1usize..4, stages in 1usize..20, preset in 0usize..6, soft in any::<bool>(),
        seed in any::<u64>(), steps in 0usize..100_000, batch in 1usize..32, k in 1usize..8,
        lr in 1e-7f64..1e-1, ratio in 1e-4f64..1.0, beta in 0.0f64..0.999_999,
    ) {
        let mut cfg = RunConfig { total_steps: steps, batch_size: batch, lr_init: lr, lr_final: lr * ratio, adam_beta2: beta, ..Default::default() };
        cfg.network.base_channels = base;
        cfg.network.unet_depth = depth;
        cfg.network.stages = stages;
        cfg.network.attention_preset = AttentionPreset::ALL[preset];
        cfg.network.gate_mode = if soft { GateMode::Soft } else { GateMode::Hard };
        cfg.network.seed = seed;
        cfg.patch_size = k << depth;
        cfg.train_manifest = "data/train/manifest.csv".into();
        let text = cfg.emit();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.emit(), text);
    }
}

#[cfg(test)]
mod cases {
    #[test]
    fn training_runs_are_byte_reproducible() {
        super::training_runs_are_byte_reproducible();
    }

    #[test]
    fn save_load_forward_is_bitwise_stable() {
        super::save_load_forward_is_bitwise_stable();
    }
}
