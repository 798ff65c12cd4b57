use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cprn(args: &[&str], root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cprn"));
    cmd.args(args).env_remove("CPRN_OUTPUT_ROOT");
    if let Some(r) = root {
        cmd.env("CPRN_OUTPUT_ROOT", r);
    }
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn generate_small(dir: &Path) {
    let d = dir.to_str().unwrap();
    let out = cprn(
        &["generate", "--out", d, "--seed", "4", "--train", "8", "--val", "6", "--height", "32", "--width", "32"],
        None,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

const TINY: [&str; 8] = ["--stages", "2", "--channels", "8", "--epochs", "1", "--batch_size", "4"];

#[test]
fn generate_train_evaluate_export_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data);
    assert_eq!(fs::read_dir(data.join("val/masks")).unwrap().count(), 6);

    let run = tmp.path().join("run");
    let mut args = vec!["train", "--dataset", data.to_str().unwrap(), "--output", run.to_str().unwrap()];
    args.extend(TINY);
    let out = cprn(&args, None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["best.ckpt", "config.txt", "loss_curve.csv", "val_metrics.txt", "val_metrics.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let curve = fs::read_to_string(run.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 2);
    assert!(curve.starts_with("epoch,train_loss"));

    let out = cprn(&["evaluate", "--run", run.to_str().unwrap(), "--data", data.join("val").to_str().unwrap()], None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read_to_string(run.join("evaluation.txt")).unwrap(),
        fs::read_to_string(run.join("val_metrics.txt")).unwrap()
    );

    let masks = tmp.path().join("masks");
    let out = cprn(
        &["export-masks", "--run", run.to_str().unwrap(), "--data", data.join("val").to_str().unwrap(), "--out", masks.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_dir(&masks).unwrap().count(), 6);
}

#[test]
fn validation_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data);
    let d = data.to_str().unwrap();
    let r = tmp.path().join("r");
    for extra in [
        vec!["--lr", "-1"],
        vec!["--variant", "nonsense"],
        vec!["--set", "no_such_key=3"],
        vec!["--set", "missing_equals"],
        vec!["--stages", "4"],
        vec!["--bogus-flag"],
    ] {
        let mut args = vec!["train", "--dataset", d, "--output", r.to_str().unwrap()];
        args.extend(TINY);
        args.extend(&extra);
        let out = cprn(&args, None);
        assert_eq!(code(&out), 1, "{extra:?}: {}", stderr(&out));
    }
    assert_eq!(code(&cprn(&["generate", "--out", d, "--height", "8"], None)), 1);
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let m = missing.to_str().unwrap();
    let out = cprn(&["evaluate", "--run", m, "--data", m], None);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let mut args = vec!["train", "--dataset", m, "--output", m];
    args.extend(TINY);
    assert_eq!(code(&cprn(&args, None)), 2);
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&cprn(&["--help"], None)), 0);
    assert_eq!(code(&cprn(&["--version"], None)), 0);
}

#[test]
fn config_file_then_set_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data);
    let file = tmp.path().join("cfg.txt");
    fs::write(
        &file,
        format!(
            "# tiny run\nvariant = serial\nstages = 2\nchannels = 8\nepochs = 3\nbatch_size = 4\nlr = 0.002\ndataset = {}\n",
            data.display()
        ),
    )
    .unwrap();
    let run = tmp.path().join("run");
    let out = cprn(
        &[
            "train",
            "--config",
            file.to_str().unwrap(),
            "--set",
            "epochs=1",
            "--set",
            "lr=0.004",
            "--lr",
            "0.005",
            "--output",
            run.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let saved = fs::read_to_string(run.join("config.txt")).unwrap();
    for line in ["variant=serial", "epochs=1", "lr=0.005", "channels=8"] {
        assert!(saved.lines().any(|l| l == line), "{line} missing from\n{saved}");
    }
}

#[test]
fn output_root_prefixes_relative_paths() {
    let root = tempfile::tempdir().unwrap();
    let out = cprn(&["generate", "--out", "rel/data", "--train", "2", "--val", "2", "--height", "32", "--width", "32"], Some(root.path()));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(root.path().join("rel/data/train/meta.json").is_file());

    let data = root.path().join("rel/data");
    let mut args = vec!["train", "--dataset", data.to_str().unwrap(), "--output", "runs/x"];
    args.extend(TINY);
    let out = cprn(&args, Some(root.path()));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(root.path().join("runs/x/best.ckpt").is_file());
}

#[test]
fn ablate_writes_table_and_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data);
    let out_dir = tmp.path().join("abl");
    let mut args = vec![
        "ablate",
        "--dataset",
        data.to_str().unwrap(),
        "--output",
        out_dir.to_str().unwrap(),
        "--arms",
        "holi_star,parallel_guided,f3",
        "--seeds",
        "0,1",
    ];
    args.extend(TINY);
    let out = cprn(&args, None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let md = fs::read_to_string(out_dir.join("ablation.md")).unwrap();
    assert!(md.contains("| Method | P@0.5 | P@0.7 | P@0.9 | Overall IoU | Mean IoU |"));
    assert!(md.contains("| f3 |"));
    assert!(md.contains("parallel_guided - holi_star [all] overall_iou"));
    assert!(out_dir.join("ablation.json").is_file());
    assert_eq!(code(&cprn(&["ablate", "--arms", "holi_star", "--dataset", data.to_str().unwrap()], None)), 1);
}
