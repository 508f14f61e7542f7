use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use taskvec::harness::{read_metrics_csv, write_metrics_csv, MetricsRecord};
use taskvec::manifest::RunManifest;
use taskvec::task_vectors::{block_partition, derive_task_vector, write_checkpoint, ParamSet, PartitionScheme, TaskVectorPool};
use taskvec::Tensor;

const SMALL: &str = "seed = 3
[suite]
n_train = 200
n_test = 60
dim = 8
[base]
finetune_steps = 30
[experiment]
seeds = [0]
[train]
epochs = 2
";

fn taskvec(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taskvec"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("TASKVEC_LOG", "error")
        .output()
        .expect("binary runs")
}

fn config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn with_config(cmd: &str, cfg: &Path, out: &Path) -> Output {
    taskvec(&[cmd, "--config", cfg.to_str().unwrap()], out)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn make_suite_writes_manifest_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = with_config("make-suite", &cfg, out);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let ma = RunManifest::read(&RunManifest::path_for(&a, "make-suite")).unwrap();
    let mb = RunManifest::read(&RunManifest::path_for(&b, "make-suite")).unwrap();
    assert!(ma.artifacts.contains_key("suite/manifest.json"));
    assert!(ma.artifacts.keys().any(|k| k.ends_with("task0_train_x.f32")));
    assert_eq!(ma.artifacts, mb.artifacts);
    assert_eq!(ma.config_sha256, mb.config_sha256);
}

#[test]
fn config_errors_exit_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "[suite]\nn_tasks = 1\n");
    let o = with_config("make-suite", &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_tasks must be ≥ 2"), "{}", stderr(&o));

    let cfg = config(dir.path(), "[experiment]\nregimes = [\"task_level_magic\"]\n");
    let o = with_config("train", &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("task_level_magic"));

    let o = taskvec(&["frobnicate"], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let o = taskvec(&["--help"], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    assert_eq!(taskvec(&["finetune"], &out).status.code(), Some(3));
    assert_eq!(taskvec(&["train"], &out).status.code(), Some(3));
    assert_eq!(taskvec(&["analyze"], &out).status.code(), Some(3));
    assert_eq!(taskvec(&["report"], &out).status.code(), Some(3));
    fs::create_dir_all(out.join("results")).unwrap();
    assert_eq!(taskvec(&["report"], &out).status.code(), Some(3));
    let cfg = dir.path().join("nope.toml");
    assert_eq!(with_config("make-suite", &cfg, &out).status.code(), Some(3));
}

#[test]
fn divergent_finetune_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &SMALL.replace("finetune_steps = 30", "finetune_steps = 30\nfinetune_lr = 1e308"));
    let out = dir.path().join("out");
    assert_eq!(with_config("make-suite", &cfg, &out).status.code(), Some(0));
    let o = with_config("finetune", &cfg, &out);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn zero_step_finetune_gives_zero_task_vectors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &SMALL.replace("finetune_steps = 30", "finetune_steps = 0"));
    let out = dir.path().join("out");
    assert_eq!(with_config("make-suite", &cfg, &out).status.code(), Some(0));
    assert_eq!(with_config("finetune", &cfg, &out).status.code(), Some(0));
    let pool = TaskVectorPool::load(&out.join("checkpoints/pool.ckpt")).unwrap();
    assert_eq!(pool.n_tasks(), 4);
    assert!(pool.vectors().iter().all(|v| v.delta.flatten().iter().all(|&x| x == 0.0)));
    // an all-zero pool has no energy spectrum
    assert_eq!(taskvec(&["analyze"], &out).status.code(), Some(2));
}

#[test]
fn full_pipeline_and_rerun_reproduce_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("out");
    for cmd in ["make-suite", "finetune", "train", "analyze", "report"] {
        let o = with_config(cmd, &cfg, &out);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
    }
    let results = out.join("results");
    let first: Vec<(String, Vec<u8>)> = {
        let mut v: Vec<_> = fs::read_dir(&results)
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        v.sort();
        v
    };
    // 4 regimes plus the filtered task-level row
    assert_eq!(first.len(), 5);
    assert_eq!(with_config("train", &cfg, &out).status.code(), Some(0));
    for (name, bytes) in &first {
        assert_eq!(&fs::read(results.join(name)).unwrap(), bytes, "{name} changed on rerun");
    }

    let energy = fs::read_to_string(out.join("analysis/energy.csv")).unwrap();
    let last: f64 = energy.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((last - 1.0).abs() < 1e-10);
    let table = fs::read_to_string(out.join("report/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 6);
    assert!(table.starts_with("regime,prior,gated,seeds,avg_accuracy"));
}

fn pool_with(vectors: Vec<Vec<f64>>) -> TaskVectorPool {
    let theta = ParamSet::new(vec![("w".into(), Tensor::zeros(&[1, vectors[0].len()]))]).unwrap();
    let blocks = block_partition(&theta, &PartitionScheme::Single).unwrap();
    let tvs = vectors
        .into_iter()
        .enumerate()
        .map(|(t, v)| derive_task_vector(&theta.with_flat(&v).unwrap(), &theta, t).unwrap())
        .collect();
    TaskVectorPool::new(tvs, blocks).unwrap()
}

fn energy_rows(path: &Path) -> Vec<f64> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
}

#[test]
fn analyze_synthetic_pools() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let rank_one = dir.path().join("rank1.ckpt");
    pool_with(vec![vec![1.0, 2.0, 3.0], vec![-2.0, -4.0, -6.0], vec![0.5, 1.0, 1.5]]).save(&rank_one).unwrap();
    let o = taskvec(&["analyze", "--pool", rank_one.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let e = energy_rows(&out.join("analysis/energy.csv"));
    assert!((e[0] - 1.0).abs() < 1e-10);

    let orth = dir.path().join("orth.ckpt");
    let eye: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 2.0 } else { 0.0 }).collect()).collect();
    pool_with(eye).save(&orth).unwrap();
    assert_eq!(taskvec(&["analyze", "--pool", orth.to_str().unwrap()], &out).status.code(), Some(0));
    let e = energy_rows(&out.join("analysis/energy.csv"));
    for (k, v) in e.iter().enumerate() {
        assert!((v - (k + 1) as f64 / 4.0).abs() < 1e-10);
    }

    let empty = dir.path().join("empty.ckpt");
    let layout = block_partition(&ParamSet::new(vec![("w".into(), Tensor::zeros(&[1, 2]))]).unwrap(), &PartitionScheme::Single).unwrap();
    let meta = serde_json::json!({"n_tasks": 0, "tasks": [], "tensor_names": ["w"], "blocks": layout});
    write_checkpoint(&empty, "task_vector_pool", &ParamSet::new(vec![]).unwrap(), meta).unwrap();
    assert_eq!(taskvec(&["analyze", "--pool", empty.to_str().unwrap()], &out).status.code(), Some(2));
}

fn record(regime: &str, seed: u64, acc: f64) -> MetricsRecord {
    MetricsRecord {
        regime: regime.into(),
        prior: "none".into(),
        gated: false,
        seed,
        task_accuracies: vec![acc, acc],
        avg_accuracy: acc,
        gated_ratio: 1.0,
        elbo_trace: vec![-1.0, -0.5],
    }
}

#[test]
fn report_aggregates_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results");
    write_metrics_csv(&results.join("one.csv"), &[record("task_level_det", 0, 0.5)]).unwrap();
    let o = taskvec(&["report", "--results", results.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("report/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);

    let regimes = ["task_level_det", "sample_specific_det", "task_level_vi", "sample_specific_vi"];
    for (i, regime) in regimes.iter().enumerate() {
        for seed in 0..3u64 {
            let acc = 0.1 * i as f64 + 0.01 * seed as f64;
            write_metrics_csv(&results.join(format!("{regime}-{seed}.csv")), &[record(regime, seed, acc)]).unwrap();
        }
    }
    fs::remove_file(results.join("one.csv")).unwrap();
    assert_eq!(taskvec(&["report", "--results", results.to_str().unwrap()], dir.path()).status.code(), Some(0));
    let table = fs::read_to_string(dir.path().join("report/table.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], regimes[i]);
        assert_eq!(row[3], "3");
        let mean: f64 = row[4].parse().unwrap();
        assert!((mean - (0.1 * i as f64 + 0.01)).abs() < 1e-4);
    }
    let text = String::from_utf8_lossy(&taskvec(&["report", "--results", results.to_str().unwrap()], dir.path()).stdout).into_owned();
    assert!(text.lines().next().unwrap().starts_with("regime"));

    fs::write(results.join("zz-bad.csv"), "regime,oops\nx,y\n").unwrap();
    let o = taskvec(&["report", "--results", results.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("zz-bad.csv"));
    assert!(read_metrics_csv(&results.join("zz-bad.csv")).is_err());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = taskvec(&["make-suite", "--config", cfg.to_str().unwrap(), "--seed", "9"], &out);
    assert_eq!(o.status.code(), Some(0));
    let suite = taskvec::harness::load_suite(&out.join("suite")).unwrap();
    assert_eq!(suite.seed, 9);
}
