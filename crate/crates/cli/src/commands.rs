use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use defectkan::data::{generate_synthetic, load_image_folder, stratified_split, synth_class_names, write_image_folder};
use defectkan::gradcheck::{run_suite, REL_TOL};
use defectkan::train::{benchmark as run_benchmark, train_model_with, EpochMetrics, TrainOutcome};
use defectkan::{build_model, checkpoint, DatasetSplit, ModelName, ModelSpec};

use crate::config::{self, ImageSize, InputShape, RunSettings, UsageError};
use crate::RunFlags;

/// Error kind for the stderr line and the exit code.
pub fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    if e.downcast_ref::<UsageError>().is_some() {
        return ("usage", 2);
    }
    if let Some(err) = e.downcast_ref::<defectkan::Error>() {
        return (err.kind(), 1);
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return ("io", 1);
    }
    ("runtime", 1)
}

fn echo_config(value: &impl Serialize) -> Result<String> {
    let line = serde_json::to_string(value)?;
    Ok(format!("config {line}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn spec_for(name: ModelName, settings: &RunSettings, classes: usize) -> Result<ModelSpec, UsageError> {
    let mut spec = ModelSpec::new(name, settings.input.0, classes);
    spec.kan = settings.kan.clone();
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(spec)
}

/// Loads and splits the data folder; class count comes from the folder.
fn load_split(settings: &RunSettings) -> Result<DatasetSplit> {
    let [c, h, w] = settings.input.0;
    let folder = load_image_folder(&settings.data, [h, w], c)
        .with_context(|| format!("loading {}", settings.data.display()))?;
    let split = stratified_split(
        &folder.images,
        &folder.class_names,
        settings.split_fractions,
        settings.split_seed,
    )?;
    Ok(split)
}

#[derive(Serialize)]
struct Effective<'a> {
    #[serde(flatten)]
    settings: &'a RunSettings,
    classes: usize,
    class_names: &'a [String],
}

fn prepare_out(settings: &RunSettings, split: &DatasetSplit) -> Result<String> {
    fs::create_dir_all(&settings.out).with_context(|| format!("creating {}", settings.out.display()))?;
    let effective = Effective {
        settings,
        classes: split.class_names.len(),
        class_names: &split.class_names,
    };
    write_json(&settings.out.join("config.json"), &effective)?;
    write_json(
        &settings.out.join("split.json"),
        &split.manifest(settings.split_seed, settings.split_fractions),
    )?;
    echo_config(&effective)
}

fn write_run(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("metrics.csv"), outcome.report.metrics_csv())?;
    write_json(&dir.join("report.json"), &outcome.report)?;
    checkpoint::save(&outcome.model, &dir.join("checkpoint.bin"))?;
    Ok(())
}

fn epoch_line(m: &EpochMetrics) -> String {
    let val = m.val_acc.map(|v| format!(" val_acc {v:.4}")).unwrap_or_default();
    format!(
        "epoch {:>3} loss {:.6} train_acc {:.4}{val}",
        m.epoch, m.train_loss, m.train_acc
    )
}

pub fn synth_gen(out: &Path, per_class: usize, size: ImageSize, seed: u64) -> Result<ExitCode> {
    if per_class == 0 {
        return Err(UsageError("--per-class must be at least 1".into()).into());
    }
    println!(
        "{}",
        echo_config(&json!({
            "command": "synth-gen",
            "out": out,
            "per_class": per_class,
            "size": size,
            "seed": seed,
        }))?
    );
    let images = generate_synthetic(per_class, size.0, seed);
    write_image_folder(out, &images, &synth_class_names())?;
    println!("wrote {} images to {}", images.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train(model: Option<ModelName>, flags: RunFlags) -> Result<ExitCode> {
    let settings = config::resolve("train", model.into_iter().collect(), None, flags)?;
    let name = settings.models[0];
    spec_for(name, &settings, 1)?;
    let split = load_split(&settings)?;
    let spec = spec_for(name, &settings, split.class_names.len())?;
    println!("{}", prepare_out(&settings, &split)?);
    let outcome = train_model_with(&spec, &split, &settings.train, |m| println!("{}", epoch_line(m)))?;
    write_run(&settings.out, &outcome)?;
    let r = &outcome.report;
    println!(
        "{} seed {} test_acc {:.4} params {} seconds {:.2}",
        r.model, r.seed, r.test_accuracy, r.param_count, r.wall_clock_seconds
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(checkpoint_path: &Path, data: &Path) -> Result<ExitCode> {
    eprintln!(
        "{}",
        echo_config(&json!({ "command": "eval", "checkpoint": checkpoint_path, "data": data }))?
    );
    let model = checkpoint::load(checkpoint_path)
        .with_context(|| format!("loading {}", checkpoint_path.display()))?;
    let [c, h, w] = model.spec.input_shape;
    let folder =
        load_image_folder(data, [h, w], c).with_context(|| format!("loading {}", data.display()))?;
    if folder.class_names.len() != model.spec.n_classes {
        bail!(defectkan::Error::InvalidConfig(format!(
            "{} has {} classes, the checkpoint expects {}",
            data.display(),
            folder.class_names.len(),
            model.spec.n_classes
        )));
    }
    let accuracy = defectkan::train::evaluate(&model, &folder.images)?;
    println!("{accuracy}");
    Ok(ExitCode::SUCCESS)
}

pub fn params(model: ModelName, input: InputShape, classes: usize) -> Result<ExitCode> {
    eprintln!(
        "{}",
        echo_config(&json!({ "command": "params", "model": model, "input": input, "classes": classes }))?
    );
    let spec = ModelSpec::new(model, input.0, classes);
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    println!("{}", build_model(&spec, 0)?.param_count());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(points: usize, seed: u64) -> Result<ExitCode> {
    if points == 0 {
        return Err(UsageError("--points must be at least 1".into()).into());
    }
    eprintln!(
        "{}",
        echo_config(&json!({ "command": "gradcheck", "points": points, "seed": seed, "tolerance": REL_TOL }))?
    );
    let reports = run_suite(points, seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<22} {:>5} {:.3e} {status}", r.op, r.points, r.max_rel_error);
        if !r.passed() {
            failed.push(r.op);
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn benchmark(models: Vec<ModelName>, repeats: Option<usize>, flags: RunFlags) -> Result<ExitCode> {
    let settings = config::resolve("benchmark", models, repeats, flags)?;
    for &name in &settings.models {
        spec_for(name, &settings, 1)?;
    }
    let split = load_split(&settings)?;
    let specs = settings
        .models
        .iter()
        .map(|&n| spec_for(n, &settings, split.class_names.len()))
        .collect::<Result<Vec<_>, _>>()?;
    println!("{}", prepare_out(&settings, &split)?);
    let runs = settings.out.join("runs");
    let table = run_benchmark(&specs, &split, &settings.train, |spec, outcome| {
        let r = &outcome.report;
        let dir = runs.join(format!("{}-seed{}", spec.name, r.seed));
        write_run(&dir, outcome).map_err(|e| defectkan::Error::Checkpoint(format!("{e:#}")))?;
        println!(
            "run {} seed {} test_acc {:.4} seconds {:.2}",
            r.model, r.seed, r.test_accuracy, r.wall_clock_seconds
        );
        Ok(())
    })?;
    write_json(&settings.out.join("aggregate.json"), &table)?;
    fs::write(settings.out.join("aggregate.csv"), table.to_csv())?;
    for row in &table.rows {
        println!(
            "{}, {}, {:.2}, {}",
            row.model,
            row.summary(),
            row.mean_seconds,
            row.param_count
        );
    }
    Ok(ExitCode::SUCCESS)
}
