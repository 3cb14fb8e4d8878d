use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use dybnn::checkpoint::{load_model, MAGIC};
use dybnn::config::ModelConfig;
use dybnn::cost::{
    compare_configs_with, count_ops_with, format_exact, render_comparison, render_report, to_f64,
    CountingConvention, LayerKind,
};
use dybnn::data::{self, DatasetKind, Splits, DATA_ENV};
use dybnn::network::{build_model, Model};
use dybnn::presets::PRESETS;
use dybnn::train::{evaluate, run, TrainConfig};
use dybnn::Error;
use serde_json::json;

use crate::run_config::{load_run_config, RunConfig};
use crate::CliError;

fn io_err(code: u8, path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code,
        message: format!("{}: {e}", path.display()),
    }
}

/// `explicit`, else `$DYBNN_DATA/<dataset>` if present, else `$DYBNN_DATA`.
fn data_dir(explicit: Option<&Path>, kind: DatasetKind) -> Result<PathBuf, CliError> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => {
            let root = std::env::var_os(DATA_ENV).map(PathBuf::from).ok_or_else(|| {
                CliError::data(format!(
                    "no dataset directory: pass --data, set data.dir, or set {DATA_ENV}"
                ))
            })?;
            let sub = root.join(kind.as_str());
            if sub.is_dir() {
                sub
            } else {
                root
            }
        }
    };
    if !dir.is_dir() {
        return Err(CliError::data(format!("dataset directory {} does not exist", dir.display())));
    }
    Ok(dir)
}

fn load_data(kind: DatasetKind, dir: &Path) -> Result<Splits, CliError> {
    data::load(kind, dir).map_err(|e| match e {
        Error::Io { .. } => CliError::data(e.to_string()),
        other => CliError::from_core(other),
    })
}

fn check_input(model: &ModelConfig, splits: &Splits) -> Result<(), CliError> {
    let i = model.input;
    let got = splits.test.sample_shape();
    if (i.channels, i.height, i.width) != got {
        return Err(CliError::config(format!(
            "input shape mismatch: model expects {}x{}x{}, data has {}x{}x{}",
            i.channels, i.height, i.width, got.0, got.1, got.2
        )));
    }
    Ok(())
}

pub fn train(source: &str, overrides: &[String], out: Option<&Path>) -> Result<(), CliError> {
    let cfg: RunConfig = load_run_config(source, overrides)?;
    if let Some(t) = &cfg.train.teacher {
        if !t.is_file() {
            return Err(CliError::config(format!("train.teacher: {} not found", t.display())));
        }
    }
    let kind = cfg.dataset()?;
    let dir = data_dir(cfg.data.dir.as_deref(), kind)?;
    let mut splits = load_data(kind, &dir)?;
    if let Some(n) = cfg.data.train_limit {
        splits.train = splits.train.take(n);
    }
    if let Some(n) = cfg.data.test_limit {
        splits.test = splits.test.take(n);
    }
    check_input(&cfg.model, &splits)?;

    let name = if cfg.model.name.is_empty() { "model" } else { &cfg.model.name };
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| Path::new("runs").join(name));
    fs::create_dir_all(&out).map_err(|e| io_err(1, &out, e))?;
    let snapshot = out.join("config.resolved.toml");
    fs::write(&snapshot, cfg.snapshot()?).map_err(|e| io_err(1, &snapshot, e))?;
    let log_path = out.join("metrics.log");
    let mut log = File::create(&log_path).map_err(|e| io_err(1, &log_path, e))?;

    let train_cfg: &TrainConfig = &cfg.train;
    let result = run(&cfg.model, train_cfg, &splits, Some(&out), &mut |r| {
        println!("{r}");
        writeln!(log, "{r}").map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })
    });
    match result {
        Ok(_) => {
            println!("run written to {}", out.display());
            Ok(())
        }
        Err(e @ Error::NonFiniteLoss { .. }) => {
            let diag = out.join("diagnostics.txt");
            let _ = fs::write(&diag, e.to_string());
            let mut err = CliError::from_core(e);
            err.message = format!("{} (layer statistics in {})", err.message, diag.display());
            Err(err)
        }
        Err(e @ Error::Io { .. }) => Err(CliError::other(e.to_string())),
        Err(e) => Err(CliError::from_core(e)),
    }
}

fn load_checkpoint(path: &Path) -> Result<Model, CliError> {
    load_model(path).map_err(|e| match e {
        Error::Io { .. } => CliError::config(e.to_string()),
        other => CliError::from_core(other),
    })
}

pub fn eval(
    checkpoint: &Path,
    data_flag: Option<&Path>,
    dataset: Option<&str>,
    limit: Option<usize>,
    batch_size: usize,
) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint)?;
    let mut probe = RunConfig {
        model: model.config().clone(),
        train: TrainConfig::default(),
        data: Default::default(),
    };
    probe.data.dataset = dataset.map(str::to_string);
    let kind = probe.dataset()?;
    let dir = data_dir(data_flag, kind)?;
    let mut splits = load_data(kind, &dir)?;
    if let Some(n) = limit {
        splits.test = splits.test.take(n);
    }
    check_input(model.config(), &splits)?;
    let (loss, top1) = evaluate(&model, &splits.test, batch_size.max(1)).map_err(CliError::from_core)?;
    println!("loss={loss:.6} top1={top1:.4} samples={}", splits.test.len());
    Ok(())
}

fn convention(bn: i128, prelu: i128) -> CountingConvention {
    CountingConvention {
        bn_flops_per_element: bn,
        prelu_flops_per_element: prelu,
    }
}

fn kind_str(k: Option<LayerKind>) -> serde_json::Value {
    k.map_or(serde_json::Value::Null, |k| json!(k.as_str()))
}

pub fn count_ops(
    source: &str,
    overrides: &[String],
    structured: bool,
    bn: i128,
    prelu: i128,
) -> Result<(), CliError> {
    let cfg = load_run_config(source, overrides)?;
    let report = count_ops_with(&cfg.model, convention(bn, prelu)).map_err(CliError::from_core)?;
    if !structured {
        print!("{}", render_report(&report));
        return Ok(());
    }
    let rows = report
        .layers
        .iter()
        .map(|l| (l.name.as_str(), Some(l.kind), l.count))
        .chain(std::iter::once(("total", None, report.total)));
    for (name, kind, c) in rows {
        let rec = json!({
            "name": name,
            "kind": kind.map_or("total", |k| k.as_str()),
            "bops": c.bops as i64,
            "flops": to_f64(c.flops),
            "ops": to_f64(c.ops()),
            "flops_exact": format_exact(c.flops),
            "ops_exact": format_exact(c.ops()),
        });
        println!("{rec}");
    }
    Ok(())
}

pub fn compare_ops(a: &str, b: &str, structured: bool, bn: i128, prelu: i128) -> Result<(), CliError> {
    let ca = load_run_config(a, &[])?;
    let cb = load_run_config(b, &[])?;
    let cmp = compare_configs_with(&ca.model, &cb.model, convention(bn, prelu)).map_err(CliError::from_core)?;
    if !structured {
        print!("{}", render_comparison(&cmp));
        return Ok(());
    }
    for r in &cmp.rows {
        let rec = json!({
            "name": r.name,
            "kind_a": kind_str(r.kind_a),
            "kind_b": kind_str(r.kind_b),
            "ops_a": to_f64(r.a.ops()),
            "ops_b": to_f64(r.b.ops()),
            "delta_ops": to_f64(r.delta.ops()),
            "delta_ops_exact": format_exact(r.delta.ops()),
        });
        println!("{rec}");
    }
    let total = json!({
        "name": "total",
        "ops_a": to_f64(cmp.total_a.ops()),
        "ops_b": to_f64(cmp.total_b.ops()),
        "delta_ops": to_f64(cmp.delta.ops()),
        "delta_ops_exact": format_exact(cmp.delta.ops()),
        "percent_change": cmp.percent_change(),
    });
    println!("{total}");
    Ok(())
}

pub fn list_presets() -> Result<(), CliError> {
    for (name, _) in PRESETS {
        println!("{name}");
    }
    Ok(())
}

fn is_checkpoint(path: &Path) -> bool {
    let mut head = [0u8; 8];
    File::open(path)
        .and_then(|mut f| std::io::Read::read_exact(&mut f, &mut head))
        .is_ok()
        && &head == MAGIC
}

fn checkpoint_json(model: &Model) -> serde_json::Value {
    let params: Vec<serde_json::Value> = model
        .named_params()
        .into_iter()
        .map(|(name, kind, p)| json!({"name": name, "kind": format!("{kind:?}"), "dims": p.dims, "data": p.data}))
        .collect();
    json!({
        "config": model.config().to_toml(),
        "weight_mode": model.weight_mode().as_str(),
        "parameters": params,
    })
}

pub fn export(source: &str, overrides: &[String], out: Option<&Path>) -> Result<(), CliError> {
    let text = if is_checkpoint(Path::new(source)) {
        let model = load_checkpoint(Path::new(source))?;
        format!("{:#}\n", checkpoint_json(&model))
    } else {
        load_run_config(source, overrides)?.snapshot()?
    };
    match out {
        Some(p) => fs::write(p, text).map_err(|e| io_err(1, p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn inspect(source: &str) -> Result<(), CliError> {
    let model = if is_checkpoint(Path::new(source)) {
        load_checkpoint(Path::new(source))?
    } else {
        let cfg = load_run_config(source, &[])?;
        build_model(&cfg.model).map_err(CliError::from_core)?
    };
    let cfg = model.config();
    let i = cfg.input;
    println!("name: {}", if cfg.name.is_empty() { "-" } else { &cfg.name });
    println!("input: {}x{}x{}", i.channels, i.height, i.width);
    println!("weight mode: {}", model.weight_mode().as_str());
    let stages = cfg.validate().map_err(CliError::from_core)?;
    for (b, (spec, st)) in cfg.blocks.iter().zip(&stages).enumerate() {
        println!(
            "block {b}: {} -> {} stride {}, input {}x{} ({:?})",
            spec.in_channels,
            spec.out_channels,
            spec.stride,
            st.height,
            st.width,
            cfg.block_activation(b)
        );
    }
    let params = model.named_params();
    let width = params.iter().map(|p| p.0.len()).max().unwrap_or(4);
    let mut trainable = 0;
    for (name, kind, p) in &params {
        println!("{name:<width$}  {:<12}  {:>16}  {:>9}", format!("{kind:?}"), format!("{:?}", p.dims), p.len());
        if kind.trainable() {
            trainable += p.len();
        }
    }
    println!("trainable parameters: {trainable}");
    let ops = count_ops_with(cfg, CountingConvention::default()).map_err(CliError::from_core)?;
    println!("OPs: {:.4e}", to_f64(ops.total.ops()));
    Ok(())
}
