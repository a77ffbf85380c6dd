//! Datasets, experiment runs and transform comparisons.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{attack, AttackParams};
use crate::clever::{clever_score, select_targets, ScoreOrder, ScoreParams, TargetMode, Targets};
use crate::error::{Error, Result};
use crate::evt::{mix_seed, substream, SamplePlan};
use crate::network::Model;
use crate::report::{compute_aggregates, CleverReport, ReportFormat, ReportRow, ReportSettings};
use crate::tensor::Tensor;
use crate::transforms::TransformSpec;

const TARGET_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub values: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    /// Parses a json list of `{id, values, label}` records and checks each
    /// against the model's input dimension and class count.
    pub fn from_json(text: &str, input_dim: usize, num_classes: usize) -> Result<Self> {
        let raw: Vec<serde_json::Value> = serde_json::from_str(text)?;
        let mut records = Vec::with_capacity(raw.len());
        for (i, value) in raw.into_iter().enumerate() {
            let bad = |message: String| Error::InvalidDataset { record: i, message };
            let rec: Record = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            if rec.values.len() != input_dim {
                return Err(bad(format!(
                    "expected {input_dim} values, got {}",
                    rec.values.len()
                )));
            }
            if let Some(v) = rec.values.iter().find(|v| !v.is_finite()) {
                return Err(bad(format!("non-finite value {v}")));
            }
            if rec.label >= num_classes {
                return Err(bad(format!("label {} out of range", rec.label)));
            }
            records.push(rec);
        }
        Ok(Dataset { records })
    }

    pub fn load(path: impl AsRef<Path>, model: &Model) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, model.input_dim(), model.num_classes())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.records).expect("dataset serializes")
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSettings {
    pub transform: TransformSpec,
    pub target_modes: Vec<TargetMode>,
    pub orders: Vec<ScoreOrder>,
    /// The plan's seed is the experiment seed; each (input, target mode) pair
    /// gets a derived one.
    pub plan: SamplePlan,
    pub power_iters: usize,
    pub power_tol: f64,
    pub attack: Option<AttackParams>,
    pub max_inputs: Option<usize>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            transform: TransformSpec::identity(),
            target_modes: TargetMode::ALL.to_vec(),
            orders: vec![ScoreOrder::First, ScoreOrder::Second],
            plan: SamplePlan::default(),
            power_iters: 100,
            power_tol: 1e-6,
            attack: None,
            max_inputs: None,
        }
    }
}

impl ExperimentSettings {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.target_modes.is_empty() {
            return Err(Error::InvalidParameter("no target modes".into()));
        }
        if self.orders.is_empty() {
            return Err(Error::InvalidParameter("no score orders".into()));
        }
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        self.score_params(ScoreOrder::First).validate()
    }

    fn score_params(&self, order: ScoreOrder) -> ScoreParams {
        ScoreParams {
            power_iters: self.power_iters,
            power_tol: self.power_tol,
            ..ScoreParams::new(order, self.plan)
        }
    }
}

/// Everything `clever score` needs.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model_path: PathBuf,
    pub dataset_path: PathBuf,
    pub settings: ExperimentSettings,
    pub output: Option<PathBuf>,
    pub format: ReportFormat,
}

impl ExperimentConfig {
    /// Loads inputs, runs the experiment and writes the report if an output
    /// path is set.
    pub fn run(&self) -> Result<CleverReport> {
        for (what, path) in [("model", &self.model_path), ("dataset", &self.dataset_path)] {
            if path.as_os_str().is_empty() {
                return Err(Error::InvalidParameter(format!("empty {what} path")));
            }
        }
        self.settings.validate()?;
        let model = Model::load(&self.model_path)?;
        let dataset = Dataset::load(&self.dataset_path, &model)?;
        let report = run_experiment(&model, &dataset, &self.settings)?;
        if let Some(out) = &self.output {
            report.write(out, self.format)?;
        }
        Ok(report)
    }
}

fn targets_for(
    model: &Model,
    spec: &TransformSpec,
    x: &Tensor,
    seed: u64,
    index: usize,
) -> Result<Targets> {
    let mut rng = substream(mix_seed(seed, index as u64), TARGET_STREAM);
    select_targets(model, spec, x, &mut rng)
}

fn plan_for(plan: &SamplePlan, index: usize, mode: TargetMode) -> SamplePlan {
    plan.with_seed(mix_seed(mix_seed(plan.seed, index as u64), mode as u64))
}

/// Inputs correctly classified under every spec in `specs`, and how many
/// records were examined before `limit` was reached.
fn correctly_classified(
    model: &Model,
    dataset: &Dataset,
    specs: &[TransformSpec],
    limit: Option<usize>,
) -> Result<(Vec<usize>, usize)> {
    let mut keep = Vec::new();
    let mut visited = 0;
    for (i, rec) in dataset.records.iter().enumerate() {
        if limit.is_some_and(|n| keep.len() >= n) {
            break;
        }
        visited += 1;
        let x = Tensor::vector(rec.values.clone())?;
        let mut ok = true;
        for spec in specs {
            ok &= model.predict(&spec.apply(&x))? == rec.label;
        }
        if ok {
            keep.push(i);
        }
    }
    Ok((keep, visited))
}

/// Scores every correctly classified input against each requested target
/// mode and order. Misclassified inputs are skipped and counted.
pub fn run_experiment(
    model: &Model,
    dataset: &Dataset,
    settings: &ExperimentSettings,
) -> Result<CleverReport> {
    settings.validate()?;
    let (lo, hi) = model.input_range();
    let spec = settings.transform.with_range(lo, hi)?;
    let (inputs, visited) = correctly_classified(
        model,
        dataset,
        std::slice::from_ref(&spec),
        settings.max_inputs,
    )?;

    let per_input: Vec<Vec<ReportRow>> = inputs
        .par_iter()
        .map(|&i| score_input(model, &spec, &dataset.records[i], i, settings))
        .collect::<Result<_>>()?;
    let rows: Vec<ReportRow> = per_input.into_iter().flatten().collect();

    Ok(CleverReport {
        model: model.name().to_string(),
        settings: ReportSettings {
            transform: spec.to_string(),
            plan: settings.plan,
            power_iters: settings.power_iters,
            power_tol: settings.power_tol,
            attack: settings.attack,
        },
        dataset_size: dataset.len(),
        evaluated: inputs.len(),
        skipped: visited - inputs.len(),
        truncated: dataset.len() - visited,
        aggregates: compute_aggregates(&rows),
        rows,
    })
}

fn score_input(
    model: &Model,
    spec: &TransformSpec,
    rec: &Record,
    index: usize,
    settings: &ExperimentSettings,
) -> Result<Vec<ReportRow>> {
    let x = Tensor::vector(rec.values.clone())?;
    let targets = targets_for(model, spec, &x, settings.plan.seed, index)?;
    let mut attacks = HashMap::new();
    let mut rows = Vec::new();

    for &mode in &settings.target_modes {
        let target = targets.get(mode);
        let attack_result = settings.attack.as_ref().map(|params| {
            attacks
                .entry(target)
                .or_insert_with(|| {
                    attack(model, spec, &x, target, params).map_err(|e| e.to_string())
                })
                .clone()
        });
        let plan = plan_for(&settings.plan, index, mode);

        for &order in &settings.orders {
            let started = Instant::now();
            let params = ScoreParams {
                plan,
                ..settings.score_params(order)
            };
            let mut row = ReportRow {
                input_id: rec.id.clone(),
                true_class: targets.predicted,
                target_class: target,
                target_mode: mode,
                order,
                gamma: None,
                lipschitz: None,
                a: None,
                b: None,
                score: None,
                evt_location: None,
                evt_scale: None,
                evt_shape: None,
                evt_log_likelihood: None,
                evt_degenerate: None,
                attack_success: attack_result
                    .as_ref()
                    .and_then(|a| a.as_ref().ok())
                    .map(|a| a.success),
                attack_distortion: attack_result
                    .as_ref()
                    .and_then(|a| a.as_ref().ok())
                    .map(|a| a.distortion),
                error: attack_result
                    .as_ref()
                    .and_then(|a| a.as_ref().err())
                    .map(|e| format!("attack: {e}")),
                fit: None,
                wall_time_ms: 0.0,
            };
            match clever_score(model, spec, &x, target, &params) {
                Ok(out) => {
                    row.gamma = Some(out.bounds.gamma);
                    match order {
                        ScoreOrder::First => row.lipschitz = Some(out.bounds.lipschitz),
                        ScoreOrder::Second => {
                            row.a = Some(out.bounds.a);
                            row.b = Some(out.bounds.b);
                        }
                    }
                    row.score = Some(out.score);
                    row.evt_location = Some(out.fit.location);
                    row.evt_scale = Some(out.fit.scale);
                    row.evt_shape = Some(out.fit.shape);
                    row.evt_log_likelihood = Some(out.fit.log_likelihood);
                    row.evt_degenerate = Some(out.fit.degenerate);
                    if out.unconverged_power_iterations > 0 {
                        push_error(
                            &mut row,
                            format!(
                                "{} power iterations hit the cap",
                                out.unconverged_power_iterations
                            ),
                        );
                    }
                    row.fit = Some(out.fit);
                }
                Err(e) => push_error(&mut row, e.to_string()),
            }
            row.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
            rows.push(row);
        }
    }
    Ok(rows)
}

fn push_error(row: &mut ReportRow, message: String) {
    row.error = Some(match row.error.take() {
        Some(prev) => format!("{prev}; {message}"),
        None => message,
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformAverage {
    pub transform: String,
    pub avg_score: f64,
    /// Relative to the first transform in the comparison.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub target_mode: TargetMode,
    pub transforms: Vec<TransformAverage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformComparison {
    pub inputs: usize,
    pub modes: Vec<ModeComparison>,
}

/// Average first-order scores under each spec, over the inputs every spec
/// classifies correctly, with the same targets and seeds throughout. Targets
/// come from the first spec, which serves as the baseline.
pub fn compare_transforms(
    model: &Model,
    dataset: &Dataset,
    specs: &[TransformSpec],
    settings: &ExperimentSettings,
) -> Result<TransformComparison> {
    settings.validate()?;
    if specs.len() < 2 {
        return Err(Error::InvalidParameter(
            "comparison needs a baseline and at least one other transform".into(),
        ));
    }
    let (lo, hi) = model.input_range();
    let specs: Vec<TransformSpec> = specs
        .iter()
        .map(|s| s.with_range(lo, hi))
        .collect::<Result<_>>()?;
    let (inputs, _) = correctly_classified(model, dataset, &specs, settings.max_inputs)?;

    // scores[input][mode][spec]
    let scores: Vec<Vec<Vec<f64>>> = inputs
        .par_iter()
        .map(|&i| {
            let x = Tensor::vector(dataset.records[i].values.clone())?;
            let targets = targets_for(model, &specs[0], &x, settings.plan.seed, i)?;
            settings
                .target_modes
                .iter()
                .map(|&mode| {
                    let params = ScoreParams {
                        plan: plan_for(&settings.plan, i, mode),
                        ..settings.score_params(ScoreOrder::First)
                    };
                    specs
                        .iter()
                        .map(|spec| {
                            clever_score(model, spec, &x, targets.get(mode), &params)
                                .map(|o| o.score)
                        })
                        .collect()
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let n = inputs.len() as f64;
    let modes = settings
        .target_modes
        .iter()
        .enumerate()
        .map(|(m, &mode)| {
            let avgs: Vec<f64> = (0..specs.len())
                .map(|s| scores.iter().map(|per| per[m][s]).sum::<f64>() / n)
                .collect();
            ModeComparison {
                target_mode: mode,
                transforms: specs
                    .iter()
                    .zip(&avgs)
                    .map(|(spec, &avg)| TransformAverage {
                        transform: spec.to_string(),
                        avg_score: avg,
                        ratio: avg / avgs[0],
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(TransformComparison {
        inputs: inputs.len(),
        modes,
    })
}
