//! End-to-end runs of the `uwf` binary on a small synthetic dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const ARCHS: [&str; 4] = ["lightweight_cnn", "residual_cnn", "patch_transformer", "retinal_foundation"];

fn uwf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uwf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("UWF_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = uwf(args);
    assert!(
        out.status.success(),
        "uwf {args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> Option<i32> {
    uwf(args).status.code()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn write_config(root: &Path) -> PathBuf {
    let path = root.join("run.toml");
    fs::write(
        &path,
        format!(
            r#"manifest = {:?}
task = 1
domain = "rgb"
output_dir = {:?}
seed = 3

[model]
scale = "compact"
input_size = 32
foundation_checkpoint = {:?}

[spatial]
crop_size = 64

[train]
max_epochs = 2
batch_size = 8
learning_rate = 1e-3

[explain]
max_images = 3
"#,
            root.join("data/manifest.csv"),
            root.join("run"),
            root.join("encoder.uwfckpt")
        ),
    )
    .unwrap();
    path
}

#[test]
fn synth_is_deterministic_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "-o", s(d), "--n", "12", "--image-size", "48", "--seed", "9"]);
    }
    let (fa, fb) = (files(&a.join("images")), files(&b.join("images")));
    assert_eq!(fa.len(), 12);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    assert_eq!(fs::read(a.join("manifest.csv")).unwrap(), fs::read(b.join("manifest.csv")).unwrap());

    // a second call keeps existing output; --force regenerates it
    fs::write(a.join("manifest.csv"), "sentinel").unwrap();
    ok(&["synth", "-o", s(&a), "--n", "12", "--image-size", "48", "--seed", "9"]);
    assert_eq!(fs::read_to_string(a.join("manifest.csv")).unwrap(), "sentinel");
    ok(&["synth", "-o", s(&a), "--n", "12", "--image-size", "48", "--seed", "9", "--force"]);
    assert_eq!(fs::read(a.join("manifest.csv")).unwrap(), fs::read(b.join("manifest.csv")).unwrap());
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&[
        "synth",
        "-o",
        s(&root.join("data")),
        "--n",
        "60",
        "--image-size",
        "64",
        "--encoder",
        s(&root.join("encoder.uwfckpt")),
        "--encoder-input",
        "32",
    ]);
    let config = write_config(root);
    let cfg = s(&config);
    let run = root.join("run");

    // stages out of order fail as data errors
    assert_eq!(code(&["train", "-c", cfg]), Some(3));
    assert_eq!(code(&["fuse", "-c", cfg]), Some(3));

    ok(&["split", "-c", cfg]);
    assert!(run.join("splits.csv").exists());
    let effective = fs::read_to_string(run.join("effective_config.toml")).unwrap();
    assert!(effective.contains("seed = 3"));

    let out = ok(&["train", "-c", cfg, "--set", "train.max_epochs=1"]);
    let checkpoints: Vec<&str> = out.lines().collect();
    assert_eq!(checkpoints.len(), 4);
    for (line, arch) in checkpoints.iter().zip(ARCHS) {
        assert!(line.contains(arch) && line.contains("rgb"), "{line}");
        assert!(Path::new(line).exists());
    }
    let effective = fs::read_to_string(run.join("effective_config.toml")).unwrap();
    assert!(effective.contains("max_epochs = 1"), "{effective}");

    // existing checkpoints are kept without --force
    let ckpt = PathBuf::from(checkpoints[0]);
    let stamp = fs::metadata(&ckpt).unwrap().modified().unwrap();
    let histories = files(&run.join("histories"));
    assert_eq!(histories.len(), 4);
    let before: Vec<Vec<u8>> = histories.iter().map(|h| fs::read(h).unwrap()).collect();
    ok(&["train", "-c", cfg, "--set", "train.max_epochs=1"]);
    assert_eq!(fs::metadata(&ckpt).unwrap().modified().unwrap(), stamp);

    // retraining with the same seed reproduces every history byte for byte
    ok(&["train", "-c", cfg, "--set", "train.max_epochs=1", "--force"]);
    assert_ne!(fs::metadata(&ckpt).unwrap().modified().unwrap(), stamp);
    let after: Vec<Vec<u8>> = histories.iter().map(|h| fs::read(h).unwrap()).collect();
    assert_eq!(before, after);

    let fusion = ok(&["fuse", "-c", cfg]);
    assert!(Path::new(fusion.trim()).exists());
    assert_eq!(files(&run.join("features")).len(), 4 * 3);

    let table = ok(&["evaluate", "-c", cfg]);
    assert!(table.contains("--- Task 1"), "{table}");
    let csv = fs::read_to_string(run.join("eval/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);

    let report = ok(&["explain", "-c", cfg, "--arch", "lightweight_cnn"]);
    assert!(Path::new(report.trim()).exists());
    let panels: Vec<PathBuf> = files(&run.join("explain/panels"))
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    assert_eq!(panels.len(), 3);
    let first = fs::read(&panels[0]).unwrap();
    ok(&["explain", "-c", cfg, "--arch", "lightweight_cnn", "--force"]);
    assert_eq!(fs::read(&panels[0]).unwrap(), first);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = write_config(root);
    let cfg = s(&config);

    let bad = root.join("bad.toml");
    fs::write(&bad, "manifest = \"m.csv\"\ntask = 1\ndomain = \"rgb\"\noutput_dir = \"o\"\nunknown_key = 1\n").unwrap();
    assert_eq!(code(&["split", "-c", s(&bad)]), Some(2));
    assert_eq!(code(&["split", "-c", cfg, "--task", "7"]), Some(2));
    assert_eq!(code(&["split", "-c", cfg, "--set", "split.ratios=[0.5, 0.5, 0.5]"]), Some(2));
    assert_eq!(code(&["split", "-c", s(&root.join("absent.toml"))]), Some(3));
    assert_eq!(code(&["synth", "-o", s(&root.join("d")), "--image-size", "8"]), Some(2));

    // manifest does not exist yet
    assert_eq!(code(&["split", "-c", cfg]), Some(3));
}
