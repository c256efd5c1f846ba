use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use prvr_core::data::write_features;
use prvr_core::numeric::Tensor;

const TINY: &str = r#"
seed = 5
[data]
eval_videos = 12
[data.synth]
n_videos = 10
frames_per_video = 20
events_per_video = 2
queries_per_video = 2
words_per_query = 3
d_v = 12
d_q = 12
concepts = 4
[encoder]
d_model = 8
mlp_hidden = 16
[merge]
clip_target = 8
[train]
epochs = 2
batch_size = 8
learning_rate = 0.005
"#;

fn prvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prvr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

fn trained(dir: &Path, cfg: &str) -> String {
    let out = dir.join("run");
    let o = prvr(&["train", "--config", cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("checkpoint.prvf").to_string_lossy().into_owned()
}

#[test]
fn merge_prints_the_schedule_for_128_frames() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("feats.prvf");
    let rows: Vec<Vec<f64>> = (0..128)
        .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), 1.0])
        .collect();
    write_features(&p, &Tensor::from_rows(&rows).unwrap()).unwrap();
    let o = prvr(&[
        "merge",
        "--input",
        p.to_str().unwrap(),
        "--rate",
        "75",
        "--target",
        "32",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().next().unwrap(), "lengths 128 -> 80 -> 50 -> 32");
    assert_eq!(text.lines().filter(|l| l.starts_with("clip ")).count(), 32);
}

#[test]
fn missing_checkpoint_exits_2_naming_the_path() {
    let o = prvr(&["eval", "--checkpoint", "/no/such/ckpt.prvf"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/ckpt.prvf"));
}

#[test]
fn unknown_subcommand_prints_usage() {
    let o = prvr(&["frobnicate"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn bad_override_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = prvr(&["gen-synth", "--out", out.to_str().unwrap(), "--set", "merge.nope=1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = prvr(&["gen-synth", "--out", out.to_str().unwrap(), "--tau", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn gen_synth_then_train_from_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let o = prvr(&["gen-synth", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let train_m = data.join("train/manifest.json");
    let eval_m = data.join("eval/manifest.json");
    assert!(train_m.exists() && eval_m.exists());

    let out = dir.path().join("run");
    let o = prvr(&[
        "train",
        "--config",
        &cfg,
        "--set",
        &format!("data.train_manifest=\"{}\"", train_m.display()),
        "--set",
        &format!("data.eval_manifest=\"{}\"", eval_m.display()),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,epoch,base,tcpl_e,tcpl_a,cbva,total\n"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["lambda_a"], 30.0);
}

#[test]
fn eval_analyze_bench_and_sweep_on_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = trained(dir.path(), &cfg);
    let out = dir.path().join("reports");
    let out_s = out.to_str().unwrap();

    let o = prvr(&["eval", "--config", &cfg, "--checkpoint", &ckpt, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("SumR,"));
    assert!(out.join("index.prvf").exists());

    let o = prvr(&[
        "analyze",
        "--config",
        &cfg,
        "--checkpoint",
        &ckpt,
        "--baseline",
        &ckpt,
        "--out",
        out_s,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let conf = fs::read_to_string(out.join("confusion.csv")).unwrap();
    let row: Vec<f64> = conf
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .skip(1)
        .map(|x| x.parse().unwrap())
        .collect();
    assert_eq!((row[1], row[2]), (0.0, 0.0));
    assert!(out.join("collapse.csv").exists() && out.join("spearman.csv").exists());

    let index = out.join("index.prvf");
    let o = prvr(&[
        "bench",
        "--config",
        &cfg,
        "--checkpoint",
        &ckpt,
        "--index",
        index.to_str().unwrap(),
        "--sizes",
        "4,8,12",
        "--runs",
        "2",
        "--out",
        out_s,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    assert_eq!(csv.lines().next().unwrap(), "size,time_ms,memory_mb");
    assert_eq!(csv.lines().count(), 4);

    let o = prvr(&[
        "sweep-tau",
        "0.5",
        "0.6",
        "0.7",
        "0.8",
        "--config",
        &cfg,
        "--checkpoint",
        &ckpt,
        "--out",
        out_s,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep_tau.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "dataset,tau,r1,r5,r10,r100,sumr,mean_omega,frac_merged");
    assert_eq!(lines.len(), 5);
    let omegas: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(7).unwrap().parse().unwrap())
        .collect();
    assert!(omegas.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn bench_rejects_sizes_beyond_the_index() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = trained(dir.path(), &cfg);
    let out = dir.path().join("b");
    let o = prvr(&[
        "bench",
        "--config",
        &cfg,
        "--checkpoint",
        &ckpt,
        "--sizes",
        "13",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
