use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dybnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dybnn"))
        .args(args)
        .env_remove("DYBNN_DATA")
        .output()
        .expect("spawn dybnn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn mnist_mini() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/mnist-mini")
}

fn total_record(out: &str) -> serde_json::Value {
    let last = out.lines().last().expect("some output");
    let v: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(v["name"], "total");
    v
}

fn train_small(out: &Path, extra: &[&str]) -> Output {
    let data = mnist_mini();
    let mut args = vec![
        "train",
        "mnist-dynamic",
        "--data",
        data.to_str().unwrap(),
        "--limit",
        "16",
        "--set",
        "train.epochs=1",
        "--set",
        "train.batch_size=8",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    dybnn(&args)
}

#[test]
fn count_ops_mobilenet_totals() {
    for (preset, expected) in [("mobilenet-reactnet-static", 0.97e8), ("mobilenet-reactnet-dynamic", 0.99e8)] {
        let o = dybnn(&["count-ops", preset, "--format", "structured"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let ops = total_record(&stdout(&o))["ops"].as_f64().unwrap();
        assert!((ops - expected).abs() / expected < 0.05, "{preset}: {ops}");
    }
}

#[test]
fn count_ops_text_lists_layers() {
    let o = dybnn(&["count-ops", "mnist-static"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("stem.conv"), "{out}");
    assert!(out.contains("classifier"), "{out}");
}

#[test]
fn count_ops_empty_model_is_zero() {
    let o = dybnn(&["count-ops", "empty", "--format", "structured"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = total_record(&stdout(&o));
    assert_eq!(t["bops"], 0);
    assert_eq!(t["flops"].as_f64(), Some(0.0));
    assert_eq!(t["ops"].as_f64(), Some(0.0));
}

#[test]
fn compare_ops_reports_increase() {
    let o = dybnn(&[
        "compare-ops",
        "mobilenet-reactnet-static",
        "mobilenet-reactnet-dynamic",
        "--format",
        "structured",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = total_record(&stdout(&o));
    assert_eq!(t["delta_ops_exact"], "2386432");
    let pct = t["percent_change"].as_f64().unwrap();
    assert!(pct > 2.0 && pct < 3.0, "{pct}");
}

#[test]
fn unknown_override_key_exits_2() {
    let o = dybnn(&["count-ops", "mnist-dynamic", "--set", "model.stem.kernal=5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.stem.kernal"), "{}", stderr(&o));
}

#[test]
fn unknown_config_exits_2() {
    let o = dybnn(&["count-ops", "no-such-config"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_data_dir_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = dybnn(&[
        "train",
        "mnist-dynamic",
        "--data",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn no_data_configured_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = dybnn(&["train", "mnist-dynamic", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn corrupt_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    for f in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
        std::fs::write(dir.path().join(f), [0u8; 16]).unwrap();
    }
    let o = dybnn(&[
        "train",
        "mnist-dynamic",
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("ubyte"), "{}", stderr(&o));
}

#[test]
fn two_step_run_writes_both_phases() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train_small(&out, &["--protocol", "two-step"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("step1/model.dybnn").is_file());
    assert!(out.join("step2/model.dybnn").is_file());
    assert!(out.join("config.resolved.toml").is_file());
    let log = std::fs::read_to_string(out.join("metrics.log")).unwrap();
    assert!(log.contains("phase=step1"), "{log}");
    assert!(log.contains("phase=step2"), "{log}");

    let inspect = dybnn(&["inspect", out.join("step1/model.dybnn").to_str().unwrap()]);
    assert!(inspect.status.success());
    assert!(stdout(&inspect).contains("weight mode: real"), "{}", stdout(&inspect));
    let inspect = dybnn(&["inspect", out.join("step2/model.dybnn").to_str().unwrap()]);
    assert!(stdout(&inspect).contains("weight mode: binary"), "{}", stdout(&inspect));
}

#[test]
fn same_seed_gives_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(train_small(&a, &["--seed", "11"]).status.success());
    assert!(train_small(&b, &["--seed", "11"]).status.success());
    let la = std::fs::read_to_string(a.join("metrics.log")).unwrap();
    let lb = std::fs::read_to_string(b.join("metrics.log")).unwrap();
    assert!(!la.is_empty());
    assert_eq!(la, lb);
    assert_eq!(
        std::fs::read(a.join("model.dybnn")).unwrap(),
        std::fs::read(b.join("model.dybnn")).unwrap()
    );
}

#[test]
fn eval_matches_final_test_metric() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(train_small(&out, &[]).status.success());
    let log = std::fs::read_to_string(out.join("metrics.log")).unwrap();
    let last_test = log.lines().filter(|l| l.contains("split=test")).last().unwrap();
    let top1 = last_test.split("top1=").nth(1).unwrap().trim();

    let data = mnist_mini();
    let o = dybnn(&[
        "eval",
        out.join("model.dybnn").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--limit",
        "16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains(&format!("top1={top1}")), "{s} vs {last_test}");
    assert!(s.contains("samples=16"), "{s}");
}

#[test]
fn eval_missing_checkpoint_exits_2() {
    let o = dybnn(&["eval", "/nonexistent/model.dybnn", "--data", mnist_mini().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

fn write_cifar_dir(dir: &Path) {
    let record: Vec<u8> = std::iter::once(3u8).chain(std::iter::repeat(100u8).take(3072)).collect();
    let file: Vec<u8> = record.repeat(2);
    for i in 1..=5 {
        std::fs::write(dir.join(format!("data_batch_{i}.bin")), &file).unwrap();
    }
    std::fs::write(dir.join("test_batch.bin"), &file).unwrap();
}

#[test]
fn eval_on_mismatched_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(train_small(&out, &[]).status.success());
    let cifar = dir.path().join("cifar");
    std::fs::create_dir(&cifar).unwrap();
    write_cifar_dir(&cifar);
    let o = dybnn(&[
        "eval",
        out.join("model.dybnn").to_str().unwrap(),
        "--data",
        cifar.to_str().unwrap(),
        "--dataset",
        "cifar10",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("input shape mismatch"), "{}", stderr(&o));
}

#[test]
fn export_lists_and_writes_configs() {
    let o = dybnn(&["export", "--list"]);
    assert!(o.status.success());
    let list = stdout(&o);
    for name in ["mnist-static", "cifar-dynamic", "mobilenet-reactnet-dynamic", "empty"] {
        assert!(list.lines().any(|l| l == name), "{list}");
    }

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    let o = dybnn(&["export", "cifar-static", "--set", "train.epochs=4", "--out", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let again = dir.path().join("d.toml");
    let o = dybnn(&["export", p.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = std::fs::read_to_string(&p).unwrap();
    assert!(a.contains("epochs = 4"), "{a}");
    assert_eq!(a, std::fs::read_to_string(&again).unwrap());
}

#[test]
fn resolved_config_replays() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    assert!(train_small(&a, &["--seed", "5"]).status.success());
    let snapshot = a.join("config.resolved.toml");
    let b = dir.path().join("b");
    let o = dybnn(&["train", snapshot.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(a.join("metrics.log")).unwrap(),
        std::fs::read_to_string(b.join("metrics.log")).unwrap()
    );
}

#[test]
fn export_checkpoint_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(train_small(&out, &[]).status.success());
    let o = dybnn(&["export", out.join("model.dybnn").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["weight_mode"], "binary");
    let params = v["parameters"].as_array().unwrap();
    assert!(!params.is_empty());
    for p in params {
        let n: u64 = p["dims"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).product();
        assert_eq!(n as usize, p["data"].as_array().unwrap().len(), "{}", p["name"]);
    }
}

#[test]
fn inspect_config() {
    let o = dybnn(&["inspect", "mnist-dynamic"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("input: 1x28x28"), "{s}");
    assert!(s.contains("trainable parameters:"), "{s}");
}
