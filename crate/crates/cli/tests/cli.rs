use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn defectkan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defectkan"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_gen_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = defectkan(&["synth-gen", "--out", out.to_str().unwrap(), "--per-class", "3", "--size", "16x24", "--seed", "9"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (a, b) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    assert_eq!(a.len(), 18);
    assert!(a.iter().all(|(_, bytes)| bytes.starts_with(b"P5\n24 16\n255\n")));
    assert_eq!(a, b);
}

#[test]
fn params_prints_only_the_count() {
    let o = defectkan(&["params", "--model", "SingleLayerLinearNet", "--input", "3x200x200", "--classes", "6"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout), "720006\n");
    assert!(stderr(&o).starts_with("config {"));
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        vec!["params", "--model", "NoSuchNet"],
        vec!["params", "--model", "FourLayerConvKAN", "--input", "3x200x200"],
        vec!["train", "--model", "TwoLayerConvKAN", "--out", "/tmp/x"],
        vec!["frobnicate"],
    ] {
        let o = defectkan(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = stderr(&o);
        let errors: Vec<&str> = err.lines().filter(|l| l.starts_with("error")).collect();
        assert_eq!(errors.len(), 1, "{args:?}: {err}");
        assert!(errors[0].starts_with("error[usage]: "), "{args:?}: {err}");
        assert_eq!(err.lines().last(), Some(errors[0]));
    }
}

#[test]
fn runtime_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let o = defectkan(&[
        "train", "--model", "TwoLayerConvNet", "--data", missing.to_str().unwrap(),
        "--out", tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    let (data_s, out_s) = (data.to_str().unwrap(), out.to_str().unwrap());
    assert!(defectkan(&["synth-gen", "--out", data_s, "--per-class", "10", "--size", "16x16"]).status.success());
    let config = tmp.path().join("c.json");
    fs::write(&config, r#"{"epochs": 2, "batch": 8, "input": "1x16x16", "seed": 4}"#).unwrap();
    let o = defectkan(&[
        "train", "--model", "TwoLayerConvKAN", "--config", config.to_str().unwrap(),
        "--data", data_s, "--out", out_s, "--epochs", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(text.starts_with("config {"));
    assert_eq!(text.lines().filter(|l| l.starts_with("epoch")).count(), 3);
    for f in ["config.json", "split.json", "metrics.csv", "report.json", "checkpoint.bin"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let effective: serde_json::Value = serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(effective["train"]["epochs"], 3);
    assert_eq!(effective["train"]["batch_size"], 8);

    let ckpt = out.join("checkpoint.bin");
    let o = defectkan(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let acc: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn gradcheck_passes() {
    let o = defectkan(&["gradcheck", "--points", "10", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).lines().all(|l| l.ends_with(" ok")));
}
