use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lapran::sensing::{derive_stage_dims, Beta};

fn lapran(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lapran"))
        .args(args)
        .env("LAPRAN_RUN_DIR", root.join("runs"))
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// 24 smooth 16x16 grayscale PNGs.
fn write_dataset(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..24u32 {
        let img = image::GrayImage::from_fn(16, 16, |x, y| {
            let v = 128.0 + 100.0 * ((x as f64 * 0.3 + i as f64).sin() * (y as f64 * 0.2 + 0.1 * i as f64).cos());
            image::Luma([v as u8])
        });
        img.save(dir.join(format!("img{i:02}.png"))).unwrap();
    }
}

fn write_config(root: &Path, extra: &str) -> PathBuf {
    let path = root.join("exp.toml");
    let text = format!(
        r#"
[sensing]
m = 16
beta = 2
k = 2
n = 256
channels = 1
seed = 3

[model]
encoder_filters = 4
fused_map_channels = 2
residual_filters = 4
disc_filters = 4

[train]
batch_size = 8
max_epochs = 2
learning_rate = 1e-3
seed = 5

[data]
name = "synthetic"
path = "data"
stride = 16
splits = [0.5, 0.25, 0.25]

[eval]
compression_ratios = [8.0, 16.0]
ablation_seeds = [1]
{extra}"#
    );
    fs::write(&path, text).unwrap();
    write_dataset(&root.join("data"));
    path
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    dirs
}

#[test]
fn budget_prints_the_stage_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lapran(tmp.path(), &["budget", "--m", "128", "--beta", "2", "--k", "4", "--N", "4096"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let dims = derive_stage_dims(128, Beta::integer(2), 4, Some(4096)).unwrap();
    let rows: Vec<(usize, f64)> = text
        .lines()
        .filter_map(|l| {
            let cols: Vec<&str> = l.split_whitespace().collect();
            (cols.len() == 4 && cols[0].parse::<usize>().is_ok()).then(|| (cols[2].parse().unwrap(), cols[3].parse().unwrap()))
        })
        .collect();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), dims);
    assert_eq!(rows.iter().map(|r| r.1).collect::<Vec<_>>(), vec![32.0, 16.0, 8.0, 4.0]);
    assert!(!text.contains("upper bound"));

    let four = lapran(tmp.path(), &["budget", "--m", "8", "--beta", "4", "--k", "3", "--N", "1024", "--sparsity", "10"]);
    assert!(four.status.success());
    assert!(stdout(&four).contains("upper bound"));
    assert!(stdout(&four).contains("rip bound for sparsity 10: 13 measurements"));

    let five = lapran(tmp.path(), &["budget", "--m", "8", "--beta", "5"]);
    assert_eq!(five.status.code(), Some(2));
    assert!(stderr(&five).contains("beta"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = lapran(tmp.path(), &["train"]);
    assert_eq!(missing.status.code(), Some(2));
    let cfg = write_config(tmp.path(), "[train.extra]\nfoo = 1\n");
    let unknown = lapran(tmp.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(unknown.status.code(), Some(2), "{}", stderr(&unknown));
    let usage = lapran(tmp.path(), &["frobnicate"]);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn data_and_numeric_failures_have_their_own_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    fs::remove_dir_all(tmp.path().join("data")).unwrap();
    let out = lapran(tmp.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));

    let cfg = write_config(tmp.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("learning_rate = 1e-3", "learning_rate = 3e38");
    fs::write(&cfg, text).unwrap();
    let out = lapran(tmp.path(), &["--config", cfg.to_str().unwrap(), "--quiet", "train", "--stages", "1"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn train_resume_encode_reconstruct_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();

    let first = lapran(tmp.path(), &["--config", cfg, "train", "--stages", "1"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let runs = run_dirs(tmp.path());
    assert_eq!(runs.len(), 1);
    let run = &runs[0];
    assert!(run.join("stage1/weights.bin").exists() && !run.join("stage2").exists());
    let stage1 = fs::read(run.join("stage1/weights.bin")).unwrap();

    let second = lapran(tmp.path(), &["--config", cfg, "train", "--stages", "2"]);
    assert!(second.status.success(), "{}", stderr(&second));
    assert_eq!(run_dirs(tmp.path()).len(), 1);
    assert!(stderr(&second).contains("stage 1: reusing completed checkpoint"));
    assert_eq!(fs::read(run.join("stage1/weights.bin")).unwrap(), stage1);
    let hash_line = fs::read_to_string(run.join("config.toml")).unwrap().lines().next().unwrap().to_string();
    let hash = hash_line.trim_start_matches("# config_hash = ").trim_matches('"').to_string();
    for artifact in ["stage2/metrics.csv", "stage2/manifest.json", "bundle.json", "dataset_train.json"] {
        assert!(fs::read_to_string(run.join(artifact)).unwrap().contains(&hash), "{artifact}");
    }

    let mrcs = tmp.path().join("x.mrcs");
    let image = tmp.path().join("data/img03.png");
    let enc = lapran(tmp.path(), &["--config", cfg, "encode", "--input", image.to_str().unwrap(), "--output", mrcs.to_str().unwrap(), "--keep", "20"]);
    assert!(enc.status.success(), "{}", stderr(&enc));
    let out_dir = tmp.path().join("recon");
    let rec = lapran(
        tmp.path(),
        &["reconstruct", "--measurements", mrcs.to_str().unwrap(), "--bundle", run.to_str().unwrap(), "--output", out_dir.to_str().unwrap()],
    );
    assert!(rec.status.success(), "{}", stderr(&rec));
    assert!(stderr(&rec).contains("enable 1 of 2 stages"));
    assert!(out_dir.join("level1.png").exists() && !out_dir.join("level2.png").exists());
    let timing = fs::read_to_string(out_dir.join("timing.csv")).unwrap();
    assert!(timing.contains(&hash));

    let eval = lapran(tmp.path(), &["--config", cfg, "eval"]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let report = fs::read_to_string(run.join("eval/quality.csv")).unwrap();
    assert!(report.contains(&hash));
    assert_eq!(report.lines().filter(|l| l.starts_with("synthetic,")).count(), 3);
}

#[test]
fn reruns_reproduce_metrics_and_untrained_eval_works() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    for _ in 0..2 {
        let out = lapran(tmp.path(), &["--config", cfg, "--quiet", "train", "--fresh", "--stages", "1"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let runs = run_dirs(tmp.path());
    assert_eq!(runs.len(), 2);
    let strip = |p: &Path| -> Vec<String> {
        fs::read_to_string(p.join("stage1/metrics.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').map_or(l.to_string(), |(head, _)| head.to_string()))
            .collect()
    };
    assert_eq!(strip(&runs[0]), strip(&runs[1]));
    assert_eq!(fs::read(runs[0].join("stage1/weights.bin")).unwrap(), fs::read(runs[1].join("stage1/weights.bin")).unwrap());

    let out = lapran(tmp.path(), &["--config", cfg, "eval", "--untrained"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("synthetic cr 8: 2 stages"));
}

#[test]
fn ablation_writes_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = lapran(tmp.path(), &["--config", cfg.to_str().unwrap(), "--quiet", "ablate"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let dir = &run_dirs(tmp.path())[0];
    let csv = fs::read_to_string(dir.join("ablation/ablation.csv")).unwrap();
    assert!(csv.contains("fused,full,mean,2,") && csv.contains("no_fusion,own_level,mean,2,"));
    // Both variants share stage 1.
    let stage1 = |variant: &str| -> String {
        let prefix = format!("{variant},full,1,1,");
        csv.lines().find_map(|l| l.strip_prefix(&prefix)).unwrap().to_string()
    };
    assert_eq!(stage1("fused"), stage1("no_fusion"));
}
