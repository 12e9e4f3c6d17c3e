use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset]
image_size = 8
n_images = 6

[train]
batch_size = 2
steps = 3

[train.generator]
base_channels = 2
n_res_blocks = 1
image_size = 8

[train.discriminator]
base_channels = 2
n_layers = 2
"#;

fn gait(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gait")).args(args).output().expect("spawn gait")
}

fn ok(args: &[&str]) -> String {
    let out = gait(args);
    assert!(
        out.status.success(),
        "gait {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the tiny config and a dataset into `dir`.
fn tiny_setup(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    ok(&["make-dataset", "--config", s(&cfg), "--out", s(&data)]);
    (cfg, data)
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn make_dataset_creates_missing_dirs_and_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a/b/data");
    let stdout = ok(&["make-dataset", "--out", s(&out), "--n-images", "5", "--image-size", "16"]);
    assert!(stdout.contains("wrote 5 S and 5 T images"), "{stdout}");
    for d in ["S", "T"] {
        assert_eq!(fs::read_dir(out.join(d)).unwrap().count(), 5);
    }
    let resolved = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(resolved.contains("n_images = 5") && resolved.contains("image_size = 16"), "{resolved}");
}

#[test]
fn unknown_config_key_is_a_user_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[dataset]\nn_imagez = 3\n").unwrap();
    let out = gait(&["make-dataset", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_imagez"));
}

#[test]
fn bad_arguments_exit_with_one_and_help_with_zero() {
    assert_eq!(gait(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(gait(&["translate", "--direction", "sideways"]).status.code(), Some(1));
    assert_eq!(gait(&["--help"]).status.code(), Some(0));
}

#[test]
fn one_step_run_writes_one_row_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_setup(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--steps", "1", "--seed", "5"]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(csv_rows(&a.join("losses.csv")).len(), 1);
    assert_eq!(fs::read(a.join("losses.csv")).unwrap(), fs::read(b.join("losses.csv")).unwrap());
    assert_eq!(fs::read(a.join("final.gait")).unwrap(), fs::read(b.join("final.gait")).unwrap());
    let resolved = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(resolved.contains("steps = 1") && resolved.contains("seed = 5"), "{resolved}");
}

#[test]
fn zero_lambda_grad_still_reports_the_grad_column() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_setup(dir.path());
    let out = dir.path().join("base");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--lambda-grad", "0"]);
    let header = fs::read_to_string(out.join("losses.csv")).unwrap();
    assert!(header.starts_with("step,adv_f_s,adv_f_t,adv_d_s,adv_d_t,cyc,grad,total_f,total_d"));
    for r in csv_rows(&out.join("losses.csv")) {
        assert!(r[6] > 0.0);
        assert!((r[7] - (r[1] + r[2] + 10.0 * r[5])).abs() < 1e-12);
    }
}

#[test]
fn resume_continues_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_setup(dir.path());
    let full = dir.path().join("full");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&full), "--steps", "4"]);

    let cut = dir.path().join("cut");
    fs::create_dir_all(&cut).unwrap();
    let part = dir.path().join("part.toml");
    fs::write(&part, TINY.replace("steps = 3", "steps = 4\ncheckpoint_every = 2")).unwrap();
    ok(&["train", "--config", s(&part), "--data", s(&data), "--out", s(&cut)]);
    // pretend the run died after step 2
    let log = fs::read_to_string(cut.join("losses.csv")).unwrap();
    let truncated: Vec<&str> = log.lines().take(3).collect();
    fs::write(cut.join("losses.csv"), truncated.join("\n") + "\n").unwrap();
    fs::remove_file(cut.join("final.gait")).unwrap();

    let out = gait(&["train", "--resume", s(&cut.join("ckpt_000002.gait")), "--steps", "9"]);
    assert_eq!(out.status.code(), Some(1), "overrides are refused on resume");
    let stdout = ok(&["train", "--resume", s(&cut.join("ckpt_000002.gait")), "--data", s(&data)]);
    assert!(stdout.contains("resumed at step 2, finished at step 4"), "{stdout}");
    assert_eq!(csv_rows(&cut.join("losses.csv")), csv_rows(&full.join("losses.csv")));
}

#[test]
fn translate_keeps_names_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_setup(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--steps", "1"]);
    let out = dir.path().join("fake_t");
    let stdout = ok(&[
        "translate",
        "--checkpoint",
        s(&run.join("final.gait")),
        "--input",
        s(&data.join("S")),
        "--output",
        s(&out),
        "--direction",
        "s2t",
    ]);
    assert!(stdout.contains("translated 6 images"), "{stdout}");
    let names = |d: &Path| {
        let mut v: Vec<String> = fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".png"))
            .collect();
        v.sort();
        v
    };
    assert_eq!(names(&out), names(&data.join("S")));
    assert!(out.join("config.toml").exists());

    // wrong image size for the checkpoint
    let big = dir.path().join("big");
    ok(&["make-dataset", "--out", s(&big), "--n-images", "2", "--image-size", "16"]);
    let o = gait(&[
        "translate",
        "--checkpoint",
        s(&run.join("final.gait")),
        "--input",
        s(&big.join("T")),
        "--output",
        s(&dir.path().join("x")),
        "--direction",
        "t2s",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("16x16"));
}

#[test]
fn eval_kid_output_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["make-dataset", "--out", s(&data), "--n-images", "400", "--image-size", "8"]);
    let t = data.join("T");
    let args = [
        "eval-kid",
        "--image-size",
        "8",
        "--real",
        s(&t),
        "--fake",
        s(&t),
        "--extractor",
        "flatten",
        "--block-size",
        "10",
        "--n-blocks",
        "50",
    ];
    let first = ok(&args);
    assert_eq!(first, ok(&args), "fixed seed gives identical text");
    let nums: Vec<f64> = first
        .trim()
        .trim_start_matches("KID x100: ")
        .split(" +/- ")
        .map(|v| v.parse().unwrap())
        .collect();
    assert!(nums[0].abs() < 3.0 * nums[1] / 50f64.sqrt(), "{first}");

    let s_dir = data.join("S");
    let versus = ok(&["eval-kid", "--image-size", "8", "--real", s(&t), "--fake", s(&s_dir), "--block-size", "50", "--n-blocks", "10"]);
    assert!(versus.starts_with("KID x100: "), "{versus}");

    let o = gait(&["eval-kid", "--image-size", "8", "--real", s(&t), "--fake", s(&t), "--block-size", "401"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("block_size 401"));
}

#[test]
fn gradcheck_subset_passes_and_unknown_ops_are_rejected() {
    let out = ok(&["gradcheck", "--only", "add", "--only", "conv2d", "--instances", "3"]);
    assert!(out.contains("PASS add") && out.contains("PASS conv2d") && out.contains("all 2 checks passed"), "{out}");
    assert_eq!(gait(&["gradcheck", "--only", "nope"]).status.code(), Some(1));
}

#[test]
fn non_finite_training_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_setup(dir.path());
    let out = gait(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("r")),
        "--lambda-grad",
        "1e308",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
