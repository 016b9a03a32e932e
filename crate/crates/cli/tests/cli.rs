use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lne_core::model::load_checkpoint;
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 5

[generator]
n_subjects = 30
image_size = 16

[architecture]
encoder_channels = [4, 8, 8]
decoder_channels = [8, 8, 4]
input_size = 16

[training]
epochs = 3
batch_size = 16
n_nb = 3

[evaluation]
folds = 3
head_epochs = 20
finetune_epochs = 2
"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Workspace { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        let (cfg, data, runs) = (self.path("small.toml"), self.path("data"), self.path("runs"));
        Command::new(env!("CARGO_BIN_EXE_lne"))
            .args(["-c", cfg.to_str().unwrap(), "--data-dir", data.to_str().unwrap(), "--run-dir", runs.to_str().unwrap()])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn with_data() -> Self {
        let w = Workspace::new();
        w.ok(&["gen-data"]);
        w
    }
}

fn code(out: &Output) -> Option<i32> {
    out.status.code()
}

/// Loss columns of an epoch log; wall time is dropped.
fn losses(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            [f[0], f[1], f[2], f[3], f[4], f[6]].join(",")
        })
        .collect()
}

fn param_bits(dir: &Path) -> Vec<u32> {
    let ck = load_checkpoint(dir).unwrap();
    ck.params.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn gen_data_refuses_to_overwrite_without_force() {
    let w = Workspace::new();
    let first = w.ok(&["gen-data"]);
    assert!(first.contains("subjects    30"));
    assert!(w.path("data/config.toml").is_file() && w.path("data/VERSION").is_file());
    assert_eq!(code(&w.run(&["gen-data"])), Some(2));
    assert_eq!(w.ok(&["gen-data", "--force"]), first);
}

#[test]
fn gen_data_will_not_clobber_foreign_directories() {
    let w = Workspace::new();
    fs::create_dir_all(w.path("data")).unwrap();
    fs::write(w.path("data/notes.txt"), "keep me").unwrap();
    assert_eq!(code(&w.run(&["gen-data", "--force"])), Some(2));
    assert_eq!(fs::read_to_string(w.path("data/notes.txt")).unwrap(), "keep me");
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let w = Workspace::new();
    // no dataset yet: I/O error
    assert_eq!(code(&w.run(&["train"])), Some(3));
    // unknown flag: usage error
    assert_eq!(code(&w.run(&["train", "--bogus"])), Some(2));
    // unknown config key: configuration error
    fs::write(w.path("bad.toml"), "[training]\nlearning_rat = 0.1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lne")).args(["-c", w.path("bad.toml").to_str().unwrap(), "gen-data"]).output().unwrap();
    assert_eq!(code(&out), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn gradcheck_flags_a_corrupted_gradient() {
    let w = Workspace::new();
    let good = w.ok(&["gradcheck", "--seeds", "2", "--filter", "mse"]);
    assert!(good.contains("0 failed"));
    let bad = w.run(&["gradcheck", "--seeds", "2", "--filter", "mse", "--corrupt", "mse"]);
    assert_eq!(code(&bad), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
    assert_eq!(code(&w.run(&["gradcheck", "--filter", "no-such-check"])), Some(2));
}

#[test]
fn autoencoder_matches_lne_without_the_direction_term() {
    let w = Workspace::with_data();
    w.ok(&["train", "--method", "ae"]);
    w.ok(&["train", "--method", "lne", "--lambda-dir", "0", "--name", "lne-nodir"]);
    assert_eq!(losses(&w.path("runs/ae-fold0/epochs.csv")), losses(&w.path("runs/lne-nodir/epochs.csv")));
    assert_eq!(param_bits(&w.path("runs/ae-fold0/final")), param_bits(&w.path("runs/lne-nodir/final")));
}

#[test]
fn resume_continues_the_same_trajectory() {
    let w = Workspace::with_data();
    w.ok(&["train", "--epochs", "4", "--name", "straight"]);
    w.ok(&["train", "--epochs", "2", "--name", "split"]);
    w.ok(&["train", "--epochs", "4", "--name", "split", "--resume"]);
    assert_eq!(losses(&w.path("runs/straight/epochs.csv")), losses(&w.path("runs/split/epochs.csv")));
    assert_eq!(param_bits(&w.path("runs/straight/final")), param_bits(&w.path("runs/split/final")));
    // a changed objective is refused
    assert_eq!(code(&w.run(&["train", "--epochs", "4", "--name", "split", "--resume", "--lambda-dir", "0.5"])), Some(2));
}

#[test]
fn eval_reports_feature_dimensions_and_writes_metrics() {
    let w = Workspace::with_data();
    w.ok(&["train"]);
    let age = w.ok(&["eval", "--checkpoint", w.path("runs/lne-fold0/best").to_str().unwrap()]);
    assert!(age.contains("features z (dim 32) for task age"), "{age}");
    let group = w.ok(&["eval", "--checkpoint", w.path("runs/lne-fold0/best").to_str().unwrap(), "--task", "group", "--mode", "finetune"]);
    assert!(group.contains("features z+dz (dim 64) for task group"), "{group}");

    let csv = fs::read_to_string(w.path("runs/lne-fold0/eval-age-frozen/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "task,method,mode,fold,r2,rmse,bacc,n_samples");
    let f: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(&f[..4], &["age", "LNE", "frozen", "0"]);
    assert!(f[4].parse::<f64>().unwrap().is_finite() && f[5].parse::<f64>().unwrap() > 0.0);

    let g = fs::read_to_string(w.path("runs/lne-fold0/eval-group-finetune/metrics.csv")).unwrap();
    let row: Vec<&str> = g.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..3], &["group", "LNE", "finetune"]);
    let bacc: f64 = row[6].parse().unwrap();
    assert!((0.0..=1.0).contains(&bacc));
}

#[test]
fn plot_outputs_are_deterministic() {
    let w = Workspace::with_data();
    w.ok(&["train"]);
    let ckpt = w.path("runs/lne-fold0/final");
    for out in ["p1", "p2"] {
        let res = w.run(&["plot", "--checkpoint", ckpt.to_str().unwrap(), "--color", "group", "--out", w.path(out).to_str().unwrap()]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        // 30 subjects are too few for the Welch comparison; the plot is still written
        assert!(String::from_utf8_lossy(&res.stderr).contains("groups.csv not written"));
    }
    for f in ["field.svg", "field.csv", "curve.json"] {
        assert_eq!(fs::read(w.path("p1").join(f)).unwrap(), fs::read(w.path("p2").join(f)).unwrap(), "{f}");
    }
    let pairs = fs::read_to_string(w.path("p1/field.csv")).unwrap().lines().count() - 1;
    let svg = fs::read_to_string(w.path("p1/field.svg")).unwrap();
    assert_eq!(svg.matches("class=\"arrow\"").count(), pairs);
    let curve: serde_json::Value = serde_json::from_str(&fs::read_to_string(w.path("p1/curve.json")).unwrap()).unwrap();
    for k in ["a", "b", "c"] {
        assert!(curve[k].as_f64().unwrap().is_finite());
    }
    assert!(w.path("p1/VERSION").is_file() && w.path("p1/config.toml").is_file());
}
