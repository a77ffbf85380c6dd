//! First- and second-order robustness scores.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{default_hvp_step, ScalarField};
use crate::error::{Error, Result};
use crate::evt::{estimate_max, EvtFit, SamplePlan, SampleRng};
use crate::network::Model;
use crate::tensor::{argmax, norm_l2, Tensor};
use crate::transforms::{TransformSpec, Transformed};

/// Below this the Hessian bound is treated as zero.
const ZERO_CURVATURE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreOrder {
    First,
    Second,
}

impl fmt::Display for ScoreOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreOrder::First => "first",
            ScoreOrder::Second => "second",
        })
    }
}

impl FromStr for ScoreOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "first" | "1" => Ok(ScoreOrder::First),
            "second" | "2" => Ok(ScoreOrder::Second),
            other => Err(Error::Parse(format!("unknown score order {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreParams {
    pub order: ScoreOrder,
    /// Sampling plan; its radius also caps the score.
    pub plan: SamplePlan,
    pub power_iters: usize,
    /// Relative change in the spectral estimate that ends power iteration.
    pub power_tol: f64,
    /// Finite-difference step for Hessian-vector products; `None` scales
    /// with the evaluation point.
    pub hvp_step: Option<f64>,
}

impl ScoreParams {
    pub fn new(order: ScoreOrder, plan: SamplePlan) -> Self {
        Self {
            order,
            plan,
            power_iters: 100,
            power_tol: 1e-6,
            hvp_step: None,
        }
    }

    pub fn radius(&self) -> f64 {
        self.plan.radius
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.power_iters < 1 {
            return Err(Error::InvalidParameter(
                "power_iters must be at least 1".into(),
            ));
        }
        if self.power_tol.is_nan() || self.power_tol <= 0.0 {
            return Err(Error::InvalidParameter("power_tol must be positive".into()));
        }
        if let Some(h) = self.hvp_step {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "hvp_step must be positive, got {h}"
                )));
            }
        }
        Ok(())
    }
}

/// Quantities entering the closed-form bounds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Margin at the input.
    pub gamma: f64,
    /// Margin-gradient norm at the input.
    pub b: f64,
    /// Largest Hessian spectral norm over the ball.
    pub a: f64,
    /// Largest margin-gradient norm over the ball.
    pub lipschitz: f64,
}

fn check_margin(gamma: f64) -> Result<()> {
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::Misclassified { margin: gamma });
    }
    Ok(())
}

fn check_radius(radius: f64) -> Result<()> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "radius must be positive, got {radius}"
        )));
    }
    Ok(())
}

/// `min(γ / L, R)`.
pub fn first_order_score(gamma: f64, lipschitz: f64, radius: f64) -> Result<f64> {
    check_margin(gamma)?;
    check_radius(radius)?;
    if lipschitz.is_nan() || lipschitz < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "Lipschitz estimate must be nonnegative, got {lipschitz}"
        )));
    }
    if gamma == 0.0 {
        return Ok(0.0);
    }
    if lipschitz == 0.0 {
        return Ok(radius);
    }
    Ok((gamma / lipschitz).min(radius))
}

/// `min((−b + √(b² + 2aγ)) / a, R)`, falling back to `min(γ / b, R)` as `a → 0`.
pub fn second_order_score(bounds: &BoundInputs, radius: f64) -> Result<f64> {
    let BoundInputs { gamma, b, a, .. } = *bounds;
    check_margin(gamma)?;
    check_radius(radius)?;
    if b.is_nan() || b < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "gradient norm must be nonnegative, got {b}"
        )));
    }
    let a = a.max(0.0);
    if gamma == 0.0 {
        return Ok(0.0);
    }
    if a < ZERO_CURVATURE {
        if b < ZERO_CURVATURE {
            return Ok(radius);
        }
        return Ok((gamma / b).min(radius));
    }
    // Rationalized form of the positive root; avoids cancellation when b² ≫ aγ.
    let root = 2.0 * gamma / (b + (b * b + 2.0 * a * gamma).sqrt());
    Ok(root.min(radius))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralNorm {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest-magnitude Hessian eigenvalue of `field` at `x` by power iteration
/// on Hessian-vector products.
///
/// The estimate at each step is `‖Hv‖` for the current unit vector `v`,
/// which converges to `‖H‖₂` even when the two extreme eigenvalues have
/// opposite signs and equal magnitude.
pub fn hessian_spectral_norm<F: ScalarField, R: Rng + ?Sized>(
    field: &mut F,
    x: &[f64],
    params: &ScoreParams,
    rng: &mut R,
) -> Result<SpectralNorm> {
    if !field.is_twice_differentiable() {
        return Err(Error::NotTwiceDifferentiable(
            "Hessian of a piecewise-linear activation".into(),
        ));
    }
    let step = params.hvp_step.unwrap_or_else(|| default_hvp_step(x));
    let mut v = random_unit(x.len(), rng);
    let mut estimate = 0.0;
    for k in 1..=params.power_iters {
        let hv = field.hvp(x, &v, step)?;
        let norm = norm_l2(&hv);
        if norm == 0.0 {
            return Ok(SpectralNorm {
                value: 0.0,
                iterations: k,
                converged: k == 1,
            });
        }
        let previous = estimate;
        estimate = norm;
        v = hv.into_iter().map(|h| h / norm).collect();
        if k > 1 && (estimate - previous).abs() <= params.power_tol * estimate {
            return Ok(SpectralNorm {
                value: estimate,
                iterations: k,
                converged: true,
            });
        }
    }
    Ok(SpectralNorm {
        value: estimate,
        iterations: params.power_iters,
        converged: false,
    })
}

fn random_unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n = norm_l2(&g);
        if n > 0.0 {
            return g.into_iter().map(|v| v / n).collect();
        }
    }
}

/// A scored (input, target) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOutcome {
    pub order: ScoreOrder,
    pub bounds: BoundInputs,
    pub score: f64,
    pub fit: EvtFit,
    /// Samples whose power iteration hit the iteration cap.
    pub unconverged_power_iterations: usize,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Scores a scalar margin field behind an input transform.
///
/// `field` is the untransformed margin; gradients and Hessians are taken at
/// `h(x)` for every ball sample `x` and at `h(x0)` for the input itself.
pub fn score_field<F>(
    field: &F,
    spec: &TransformSpec,
    x0: &[f64],
    params: &ScoreParams,
) -> Result<ScoreOutcome>
where
    F: ScalarField + Sync,
{
    params.validate()?;
    if x0.len() != field.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![field.dim()],
            actual: vec![x0.len()],
        });
    }
    let started = Instant::now();
    let mut transformed = Transformed::new(field.clone(), *spec);
    let gamma = transformed.value(x0)?;
    check_margin(gamma)?;
    let radius = params.radius();

    match params.order {
        ScoreOrder::First => {
            let est = estimate_max(
                || {
                    let mut f = Transformed::new(field.clone(), *spec);
                    move |x: &[f64], _: &mut SampleRng| Ok(norm_l2(&f.gradient(x)?))
                },
                x0,
                &params.plan,
            )?;
            let bounds = BoundInputs {
                gamma,
                lipschitz: est.estimate,
                ..Default::default()
            };
            Ok(ScoreOutcome {
                order: ScoreOrder::First,
                score: first_order_score(gamma, est.estimate, radius)?,
                bounds,
                fit: est.fit,
                unconverged_power_iterations: 0,
                wall_time: started.elapsed(),
            })
        }
        ScoreOrder::Second => {
            if !field.is_twice_differentiable() {
                return Err(Error::NotTwiceDifferentiable(
                    "second-order score requested on a ReLU model".into(),
                ));
            }
            let b = norm_l2(&transformed.gradient(x0)?);
            let unconverged = AtomicUsize::new(0);
            let est = estimate_max(
                || {
                    let mut f = field.clone();
                    let unconverged = &unconverged;
                    move |x: &[f64], rng: &mut SampleRng| {
                        let xh = spec.apply_slice(x);
                        let s = hessian_spectral_norm(&mut f, &xh, params, rng)?;
                        if !s.converged {
                            unconverged.fetch_add(1, Ordering::Relaxed);
                        }
                        Ok(s.value)
                    }
                },
                x0,
                &params.plan,
            )?;
            let bounds = BoundInputs {
                gamma,
                b,
                a: est.estimate.max(0.0),
                lipschitz: 0.0,
            };
            Ok(ScoreOutcome {
                order: ScoreOrder::Second,
                score: second_order_score(&bounds, radius)?,
                bounds,
                fit: est.fit,
                unconverged_power_iterations: unconverged.into_inner(),
                wall_time: started.elapsed(),
            })
        }
    }
}

/// Scores `model` behind `spec` at `x0` against `target`. The true class is
/// the defended model's prediction at `x0`.
pub fn clever_score(
    model: &Model,
    spec: &TransformSpec,
    x0: &Tensor,
    target: usize,
    params: &ScoreParams,
) -> Result<ScoreOutcome> {
    let predicted = model.predict(&spec.apply(x0))?;
    if target >= model.num_classes() {
        return Err(Error::InvalidParameter(format!(
            "target {target} out of range"
        )));
    }
    if predicted == target {
        return Err(Error::Misclassified { margin: 0.0 });
    }
    if params.order == ScoreOrder::Second && !model.is_twice_differentiable() {
        return Err(Error::NotTwiceDifferentiable(format!(
            "model {:?} contains ReLU activations",
            model.name()
        )));
    }
    let margin = model.margin_fn(predicted, target)?;
    score_field(&margin, spec, x0.data(), params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    RunnerUp,
    Random,
    LeastLikely,
}

impl TargetMode {
    pub const ALL: [TargetMode; 3] = [
        TargetMode::RunnerUp,
        TargetMode::Random,
        TargetMode::LeastLikely,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TargetMode::RunnerUp => "runner_up",
            TargetMode::Random => "random",
            TargetMode::LeastLikely => "least_likely",
        }
    }
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "runner_up" | "top2" => Ok(TargetMode::RunnerUp),
            "random" => Ok(TargetMode::Random),
            "least_likely" => Ok(TargetMode::LeastLikely),
            other => Err(Error::Parse(format!("unknown target mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Targets {
    pub predicted: usize,
    pub runner_up: usize,
    pub random: usize,
    pub least_likely: usize,
}

impl Targets {
    pub fn get(&self, mode: TargetMode) -> usize {
        match mode {
            TargetMode::RunnerUp => self.runner_up,
            TargetMode::Random => self.random,
            TargetMode::LeastLikely => self.least_likely,
        }
    }
}

/// Runner-up, random and least-likely targets from the defended logits at `x0`.
pub fn select_targets<R: Rng + ?Sized>(
    model: &Model,
    spec: &TransformSpec,
    x0: &Tensor,
    rng: &mut R,
) -> Result<Targets> {
    let logits = model.logits(&spec.apply(x0))?;
    Ok(targets_from_logits(logits.data(), rng))
}

pub fn targets_from_logits<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> Targets {
    let predicted = argmax(logits);
    let others: Vec<usize> = (0..logits.len()).filter(|&i| i != predicted).collect();
    let mut runner_up = others[0];
    let mut least_likely = others[0];
    for &i in &others[1..] {
        if logits[i] > logits[runner_up] {
            runner_up = i;
        }
        if logits[i] < logits[least_likely] {
            least_likely = i;
        }
    }
    let random = others[rng.random_range(0..others.len())];
    Targets {
        predicted,
        runner_up,
        random,
        least_likely,
    }
}
