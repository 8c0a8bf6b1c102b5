use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use wcomp::analysis::{snapshot_layer, trace_epoch, DistributionTrace};
use wcomp::harness::data::{decode_cifar10, decode_mnist};
use wcomp::harness::report::grid_cell_config;
use wcomp::harness::{
    grid_search_on, load_dataset, split_for_seed, train_on, write_run_outputs, CheckpointFile,
    ExperimentConfig, RunStatus, Trainer,
};
use wcomp::{Error, Tensor};

fn synthetic(epochs: usize, reparam: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{
          "model": {{"type": "mlp", "sizes": [2, 8, 2]}},
          "dataset": {{"type": "synthetic", "classes": 2, "per_class": 100, "dim": 2, "separation": 5.0}},
          "seeds": [0, 1, 2],
          "epochs": {epochs},
          "batch_size": 16,
          "optimizer": {{"type": "sgd", "lr": 0.05, "momentum": 0.9}},
          "lambda": 0.0005,
          "reparam": {reparam}
        }}"#
    ))
    .unwrap()
}

const ARCTAN: &str = r#"{"kind": "arctan", "a": 1.5, "b": 1.0}"#;

#[test]
fn separable_blobs_are_learned() {
    for reparam in [ARCTAN, r#"{"kind": "identity"}"#] {
        let c = synthetic(20, reparam);
        let (pool, test) = load_dataset(&c.dataset, c.data_seed).unwrap();
        let r = train_on(&c, &pool, &test).unwrap();
        for s in &r.seeds {
            assert_eq!(s.status, RunStatus::Completed);
            assert!(s.test_acc.unwrap() >= 0.95, "seed {}: {:?}", s.seed, s.test_acc);
            assert_eq!(s.curves.len(), 20);
            assert!(s.best_epoch.unwrap() >= 1);
        }
    }
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let mut c = synthetic(2, ARCTAN);
    c.optimizer = c.optimizer.with_lr(0.0);
    let (pool, test) = load_dataset(&c.dataset, 0).unwrap();
    let splits = || split_for_seed(&pool, &test, c.validation_split, 0);
    let start = Trainer::<f64>::new(&c, 0, splits()).unwrap();
    let mut t = Trainer::<f64>::new(&c, 0, splits()).unwrap();
    while t.step().unwrap() {}
    for (p, q) in start.model().params().iter().zip(t.model().params()) {
        assert!(p.latent().bitwise_eq(q.latent()), "{} moved", p.spec.name);
    }
}

#[test]
fn grid_cells_match_standalone_runs() {
    let mut c = synthetic(3, ARCTAN);
    c.seeds = vec![4];
    let (pool, test) = load_dataset(&c.dataset, 0).unwrap();
    let grid = grid_search_on(&c, &[1.2, 1.5], &[0.5, 1.0], &pool, &test).unwrap();
    assert_eq!(grid.cells.len(), 4);
    assert_eq!(grid.seed, 4);
    let csv = grid.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("a,b,val_acc"));
    for cell in &grid.cells {
        let alone = train_on(&grid_cell_config(&c, cell.a, cell.b), &pool, &test).unwrap();
        assert_eq!(alone.seeds[0].best_val_acc, cell.val_acc);
    }
    let (a, b, acc) = grid.best.unwrap();
    assert!(grid.cells.iter().all(|g| g.val_acc.unwrap() <= acc));
    assert!(grid.cells.iter().any(|g| (g.a, g.b) == (a, b)));
}

#[test]
fn grid_search_needs_fixed_ab() {
    let c = synthetic(1, r#"{"kind": "identity"}"#);
    let (pool, test) = load_dataset(&c.dataset, 0).unwrap();
    assert!(matches!(grid_search_on(&c, &[1.0], &[1.0], &pool, &test), Err(Error::Config(_))));
}

#[test]
fn run_outputs_are_written() {
    let mut c = synthetic(2, ARCTAN);
    c.seeds = vec![0];
    let (pool, test) = load_dataset(&c.dataset, 0).unwrap();
    let r = train_on(&c, &pool, &test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run_outputs(&r, dir.path()).unwrap();
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("seed,epoch,split,loss,accuracy,lr"));
    assert_eq!(metrics.lines().count(), 1 + 2 * 2);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(json["seeds"][0]["curves"].as_array().unwrap().len(), 2);
    let trace = std::fs::read_to_string(dir.path().join("seed_0/trace_layer0.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3);
}

#[test]
fn config_errors_are_precise() {
    let mut c = synthetic(1, ARCTAN);
    c.validation_split = 1.0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = synthetic(1, ARCTAN);
    c.epochs = 0;
    assert!(c.validate().is_err());
    // Fan-in 2 gives weights beyond the image of a small arctan.
    let c = synthetic(1, r#"{"kind": "arctan", "a": 0.5, "b": 1.0}"#);
    let (pool, test) = load_dataset(&c.dataset, 0).unwrap();
    let err = Trainer::<f64>::new(&c, 0, split_for_seed(&pool, &test, 0.1, 0)).err().unwrap();
    assert!(matches!(err, Error::InitDomain { .. }), "{err}");
    assert!(ExperimentConfig::from_json(r#"{"model": {"type": "mlp"}}"#).is_err());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let c = synthetic(1, ARCTAN);
    let (pool, test) = load_dataset(&c.dataset, 0).unwrap();
    let t = Trainer::<f64>::new(&c, 0, split_for_seed(&pool, &test, 0.1, 0)).unwrap();
    let bytes = t.checkpoint().unwrap().to_bytes();
    assert!(CheckpointFile::from_bytes(&bytes).is_ok());
    for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(CheckpointFile::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(CheckpointFile::from_bytes(&bad).is_err());
}

fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out.extend(payload);
    out
}

fn tiny_mnist() -> (Vec<u8>, Vec<u8>) {
    let pixels: Vec<u8> = (0..3 * 4 * 4).map(|i| (i * 5) as u8).collect();
    (idx(0x0803, &[3, 4, 4], &pixels), idx(0x0801, &[3], &[1, 7, 9]))
}

#[test]
fn mnist_decoding() {
    let (im, lb) = tiny_mnist();
    let p = Path::new("x");
    let d = decode_mnist(&im, &lb, p, p).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.sample_shape, vec![4, 4]);
    assert_eq!(d.labels, vec![1, 7, 9]);
    assert_eq!(d.sample(1)[0], 80.0 / 255.0);
    let bad_label = idx(0x0801, &[3], &[1, 7, 10]);
    assert!(matches!(decode_mnist(&im, &bad_label, p, p), Err(Error::Dataset { .. })));
    let short = idx(0x0801, &[2], &[1, 7]);
    assert!(matches!(decode_mnist(&im, &short, p, p), Err(Error::Dataset { .. })));
}

proptest! {
    #[test]
    fn truncated_idx_never_panics(cut_images in 0usize..100, cut_labels in 0usize..11) {
        let (im, lb) = tiny_mnist();
        let p = Path::new("x");
        let (ci, cl) = (cut_images.min(im.len()), cut_labels.min(lb.len()));
        let r = decode_mnist(&im[..ci], &lb[..cl], p, p);
        if ci < im.len() || cl < lb.len() {
            let is_dataset_err = matches!(r, Err(Error::Dataset { .. }));
            prop_assert!(is_dataset_err);
        } else {
            prop_assert!(r.is_ok());
        }
    }

    #[test]
    fn truncated_cifar_never_panics(records in 1usize..3, cut in 0usize..3073) {
        let mut bytes = Vec::new();
        for r in 0..records {
            bytes.push((r % 10) as u8);
            bytes.extend(std::iter::repeat_n(7u8, 3072));
        }
        let keep = bytes.len() - cut;
        let r = decode_cifar10(&bytes[..keep], Path::new("c"));
        prop_assert_eq!(r.is_ok(), cut == 0);
    }

    #[test]
    fn random_bytes_are_rejected_or_parsed(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let p = Path::new("x");
        // Never panics; any success must be self-consistent.
        if let Ok(d) = decode_mnist(&bytes, &bytes, p, p) {
            prop_assert_eq!(d.labels.len(), d.len());
        }
    }
}

#[test]
fn traces_and_snapshots() {
    let w = Tensor::new(vec![2, 3], vec![-0.5, -0.001, 0.0, 0.004, 0.2, 0.5]).unwrap();
    let s = snapshot_layer(&w, 0.01, Some(1.0)).unwrap();
    assert_eq!(s.histogram.counts.iter().sum::<u64>(), 6);
    assert_eq!(s.histogram.edges.len(), 102);
    assert_eq!(s.near_zero_fraction, 0.5);
    assert_eq!(s.bound_utilization, Some(0.5 / std::f64::consts::FRAC_PI_2));
    assert!(snapshot_layer(&w, 0.0, None).is_err());

    let mut t = DistributionTrace::new("layer0");
    trace_epoch(&mut t, 0, &w).unwrap();
    trace_epoch(&mut t, 1, &w).unwrap();
    assert!(matches!(trace_epoch(&mut t, 1, &w), Err(Error::Contract(_))));
    assert_eq!(t.extremes(), Some((-0.5, 0.5)));
    let dir = tempfile::tempdir().unwrap();
    let path = t.write_csv(dir.path()).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 3);
}

fn wcomp(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_wcomp")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "wcomp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn cli_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut c = synthetic(2, ARCTAN);
    c.seeds = vec![0];
    let cfg = d.join("cfg.json");
    std::fs::write(&cfg, c.to_json()).unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = d.join("run");
    let out_s = out.to_str().unwrap();

    let text = wcomp(&["train", "--config", cfg, "--seed", "1", "--epochs", "3", "--out", out_s, "--save-checkpoints"]);
    assert!(text.contains("seed 1"), "{text}");
    let ck = out.join("seed_1/checkpoint.wck");
    assert!(ck.is_file() && out.join("metrics.csv").is_file());
    let ck_s = ck.to_str().unwrap();

    let analysis: serde_json::Value =
        serde_json::from_str(&wcomp(&["analyze", "--checkpoint", ck_s, "--layers", "0,2", "--delta", "0.01"])).unwrap();
    assert_eq!(analysis.as_array().unwrap().len(), 2);

    let baked = d.join("baked.wck");
    wcomp(&["bake", "--checkpoint", ck_s, "--out", baked.to_str().unwrap()]);
    assert_eq!(CheckpointFile::load(&baked).unwrap().kind(), "plain");

    let ds = serde_json::to_string(&c.dataset).unwrap();
    let e1 = wcomp(&["eval", "--checkpoint", ck_s, "--dataset", &ds]);
    let e2 = wcomp(&["eval", "--checkpoint", baked.to_str().unwrap(), "--dataset", &ds]);
    assert_eq!(e1, e2);
    assert!(e1.contains("accuracy"));

    let grid = wcomp(&["grid-search", "--config", cfg, "--epochs", "1", "--a", "1.2,1.5", "--b", "1.0", "--out", out_s]);
    assert!(grid.contains("best: a="), "{grid}");
    assert!(out.join("grid.csv").is_file());

    let overhead = wcomp(&["overhead", "--config", cfg, "--steps", "5"]);
    assert!(overhead.contains("ratio"), "{overhead}");

    let fail = Command::new(env!("CARGO_BIN_EXE_wcomp"))
        .args(["analyze", "--checkpoint", cfg])
        .output()
        .unwrap();
    assert!(!fail.status.success());
    assert!(String::from_utf8_lossy(&fail.stderr).contains("checkpoint"));
}
