//! Adam optimization, per-epoch metrics and multi-seed benchmarking.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{GradMap, Tape};
use crate::data::{batch_iter, stack, DatasetSplit, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelSpec};
use crate::tensor::Tensor;

/// KAN grids are refit every this many epochs...
pub const GRID_UPDATE_EVERY: usize = 5;
/// ...and only before this epoch.
pub const GRID_UPDATE_UNTIL: usize = 50;

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub grid_update: bool,
    pub repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            grid_update: false,
            repeats: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1");
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Per-parameter gradient accumulators. They are only cleared by
/// [`GradBuffer::zero`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn new(params: &[&Tensor]) -> Self {
        GradBuffer {
            grads: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn accumulate(&mut self, grads: &GradMap) {
        for (id, g) in grads.iter() {
            self.grads[id.0].add_assign(g);
        }
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn zero_frozen(&mut self, frozen: &[bool]) {
        for (g, &f) in self.grads.iter_mut().zip(frozen) {
            if f {
                g.fill(0.0);
            }
        }
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub test_accuracy: f64,
    pub param_count: usize,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    /// `epoch,train_loss,train_acc,val_acc` lines with a header.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_acc\n");
        for e in &self.epochs {
            let val = e.val_acc.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.train_acc, val));
        }
        out
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Fraction of images whose argmax logit equals the label.
pub fn evaluate(model: &Model, images: &[LabeledImage]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0;
    for chunk in images.chunks(EVAL_BATCH) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let logits = model.logits(&stack(&refs)?)?;
        let labels: Vec<usize> = chunk.iter().map(|i| i.label).collect();
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f64 / images.len() as f64)
}

/// A trained model and its report.
pub struct TrainOutcome {
    pub model: Model,
    pub report: RunReport,
}

pub fn train_model(spec: &ModelSpec, split: &DatasetSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    train_model_with(spec, split, config, |_| {})
}

/// [`train_model`] with a callback after every epoch.
pub fn train_model_with(
    spec: &ModelSpec,
    split: &DatasetSplit,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let started = Instant::now();
    let mut model = build_model(spec, config.seed)?;
    let frozen = model.frozen();
    let mut state = AdamState::new(&model.params());
    let mut buffer = GradBuffer::new(&model.params());
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let grid_epoch = config.grid_update
            && spec.name.uses_kan()
            && epoch % GRID_UPDATE_EVERY == 0
            && epoch < GRID_UPDATE_UNTIL;
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut seen = 0;
        for (step, (images, labels)) in
            batch_iter(&split.train, config.batch_size, config.seed, epoch as u64).enumerate()
        {
            if grid_epoch && step == 0 {
                model.update_kan_grids(&images)?;
            }
            let mut tape = Tape::new();
            let x = tape.constant(images);
            let logits = model.forward(&mut tape, x)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            correct += count_correct(tape.value(logits), &labels);
            seen += labels.len();
            loss_sum += loss_value * labels.len() as f64;

            let grads = tape.backward(loss)?;
            buffer.accumulate(&grads);
            buffer.zero_frozen(&frozen);
            adam_step(&mut model.params_mut(), buffer.grads(), &mut state, config)?;
            buffer.zero();
        }
        let val_acc = if split.val.is_empty() {
            None
        } else {
            Some(evaluate(&model, &split.val)?)
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_acc,
        };
        on_epoch(&metrics);
        history.push(metrics);
    }

    let test_accuracy = evaluate(&model, &split.test)?;
    let report = RunReport {
        model: spec.name.to_string(),
        seed: config.seed,
        epochs: history,
        test_accuracy,
        param_count: model.param_count(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { model, report })
}

/// Left-to-right mean and sample (n-1) standard deviation; 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().fold(0.0, |a, v| a + v) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss = values.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean));
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: String,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_seconds: f64,
    pub param_count: usize,
}

impl AggregateRow {
    pub fn from_reports(reports: &[&RunReport]) -> Result<Self> {
        let first = reports.first().ok_or(Error::EmptyDataset)?;
        let accuracies: Vec<f64> = reports.iter().map(|r| r.test_accuracy).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&accuracies);
        let seconds: Vec<f64> = reports.iter().map(|r| r.wall_clock_seconds).collect();
        Ok(AggregateRow {
            model: first.model.clone(),
            runs: reports.len(),
            seeds: reports.iter().map(|r| r.seed).collect(),
            accuracies,
            mean_accuracy,
            std_accuracy,
            mean_seconds: mean_std(&seconds).0,
            param_count: first.param_count,
        })
    }

    /// `mean +/- std` with three decimals.
    pub fn summary(&self) -> String {
        format!("{:.3} +/- {:.3}", self.mean_accuracy, self.std_accuracy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub base_seed: u64,
    pub repeats: usize,
    pub rows: Vec<AggregateRow>,
}

pub const AGGREGATE_CSV_HEADER: &str =
    "model,accuracy,mean_accuracy,std_accuracy,mean_seconds,params,runs";

impl BenchmarkTable {
    /// One row per model. Numeric columns use round-trip precision; the
    /// `accuracy` column is the human-readable `mean +/- std`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{AGGREGATE_CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.model,
                r.summary(),
                r.mean_accuracy,
                r.std_accuracy,
                r.mean_seconds,
                r.param_count,
                r.runs
            ));
        }
        out
    }
}

/// Trains every spec `config.repeats` times with seeds `seed + r` and
/// aggregates test accuracy. `on_run` sees each finished run.
pub fn benchmark(
    specs: &[ModelSpec],
    split: &DatasetSplit,
    config: &TrainConfig,
    mut on_run: impl FnMut(&ModelSpec, &TrainOutcome) -> Result<()>,
) -> Result<BenchmarkTable> {
    config.validate()?;
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut reports = Vec::with_capacity(config.repeats);
        for r in 0..config.repeats {
            let run_config = TrainConfig {
                seed: config.seed + r as u64,
                ..config.clone()
            };
            let outcome = train_model(spec, split, &run_config)?;
            on_run(spec, &outcome)?;
            reports.push(outcome.report);
        }
        let refs: Vec<&RunReport> = reports.iter().collect();
        rows.push(AggregateRow::from_reports(&refs)?);
    }
    Ok(BenchmarkTable {
        base_seed: config.seed,
        repeats: config.repeats,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let g = Tensor::new(vec![3], vec![0.3, -4.0, 0.0]).unwrap();
        let mut state = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[g], &mut state, &cfg).unwrap();
        assert!((p.data()[0] - (0.5 - 1e-3 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
        assert!((p.data()[1] - (-1.0 + 1e-3)).abs() < 1e-10);
        assert_eq!(p.data()[2], 2.0);
    }

    #[test]
    fn adam_shape_mismatch() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::zeros(&[2]);
        let mut state = AdamState::new(&[&p]);
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut state, &cfg).is_err());
    }

    #[test]
    fn argmax_tie_goes_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 6]), 0);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[0.9, 1.0]);
        assert!((m - 0.95).abs() < 1e-15);
        assert!((s - 0.070710678118654).abs() < 1e-12);
        assert_eq!(mean_std(&[0.42]), (0.42, 0.0));
    }

    #[test]
    fn summary_row_format() {
        let report = |acc: f64, seed| RunReport {
            model: "TwoLayerConvKAN".into(),
            seed,
            epochs: vec![],
            test_accuracy: acc,
            param_count: 10,
            wall_clock_seconds: 1.0,
        };
        let (a, b) = (report(0.9, 0), report(1.0, 1));
        let row = AggregateRow::from_reports(&[&a, &b]).unwrap();
        assert_eq!(row.summary(), "0.950 +/- 0.071");
    }
}
