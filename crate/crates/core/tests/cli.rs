use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_illumkit"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn synth(dir: &Path, n: &str) {
    std::fs::write(dir.join("s.ini"), "[synth]\nwidth = 48\nheight = 48\nnoise_std = 0.01\n").unwrap();
    let o = run(dir, &["synth", "--spec", "s.ini", "--n", n, "--out", "data"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["synth", "sample", "train", "eval", "infer", "ablate"] {
        assert!(text.contains(sub), "{sub}");
        assert_eq!(run(dir.path(), &[sub, "--help"]).status.code(), Some(0));
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(d, &["nonsense"]).status.code(), Some(1));
    assert_eq!(run(d, &["eval", "--method", "gray_world", "--manifest", "missing.csv"]).status.code(), Some(2));
    std::fs::write(d.join("bad.ini"), "[train]\nbatch = 3\n").unwrap();
    let o = run(d, &["train", "--config", "bad.ini"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    assert_eq!(run(d, &["eval", "--method", "purple_world", "--manifest", "x.csv"]).status.code(), Some(1));
}

#[test]
fn baseline_eval_writes_metrics_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "6");
    let o = run(d, &["eval", "--method", "gray_world", "--method", "white_patch", "--manifest", "data/manifest.csv", "--out", "ev"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("method,mean,med,tri,best25,worst25,pct95"));
    assert!(lines.next().unwrap().starts_with("gray_world,"));
    assert!(lines.next().unwrap().starts_with("white_patch,"));
    let errors = std::fs::read_to_string(d.join("ev/errors_gray_world.csv")).unwrap();
    assert_eq!(errors.lines().next(), Some("image_id,fold,error_deg"));
    assert_eq!(errors.lines().count(), 7);
}

#[test]
fn sample_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "3");
    for out in ["a", "b"] {
        let o = run(d, &["sample", "--manifest", "data/manifest.csv", "--out", out, "--num-patches", "5"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["patches.csv", "patches.illk"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap());
    }
    let csv = std::fs::read_to_string(d.join("a/patches.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("image_id,center_x,center_y,d_used,mode"));
    assert_eq!(csv.lines().count(), 16);
}

#[test]
fn staged_training_resume_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "4");
    let small = ["--steps", "3", "--set", "arch.block_channels=4,4", "--set", "arch.head=8,3", "--set", "sampler.patch_size=16", "--num-patches", "4"];
    let train = |extra: &[&str]| {
        let mut a = vec!["train", "--manifest", "data/manifest.csv", "--out", "run"];
        a.extend_from_slice(&small);
        a.extend_from_slice(extra);
        run(d, &a)
    };
    // Stage 2 without its predecessor is a chain error.
    assert_eq!(train(&["--stage", "2"]).status.code(), Some(1));
    assert!(train(&["--stage", "1a"]).status.success());
    assert!(train(&["--stage", "1b", "--resume", "run/stage_1a.ckpt"]).status.success());
    let o = train(&["--stage", "all", "--resume", "run/stage_1b.ckpt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for s in ["2", "3", "4"] {
        assert!(d.join(format!("run/stage_{s}.ckpt")).exists());
        let loss = std::fs::read_to_string(d.join(format!("run/loss_{s}.csv"))).unwrap();
        assert_eq!(loss.lines().next(), Some("step,loss,lr"));
        assert_eq!(loss.lines().count(), 4);
    }
    let o = run(d, &["infer", "--checkpoint", "run/stage_4.ckpt", "--image", "data/scene_0000.pfm"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rgb: Vec<f64> = String::from_utf8_lossy(&o.stdout).split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(rgb.len(), 3);
    assert!((rgb.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
    let img = std::fs::read(d.join("data/scene_0000_corrected.ppm")).unwrap();
    assert!(img.starts_with(b"P6"));
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "2");
    let o = run(
        d,
        &["train", "--manifest", "data/manifest.csv", "--stage", "1a", "--out", "run", "--steps", "50", "--set", "sgd.base_lr=1e30",
          "--set", "arch.block_channels=4", "--set", "arch.head=8,3", "--set", "sampler.patch_size=16"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("run/last_good.ckpt").exists());
}
