//! Attack-agnostic robustness scores for small differentiable classifiers.
//!
//! The first-order score bounds the targeted robustness radius by
//! `min(γ / L, R)` where `γ` is the logit margin at the input and `L` an
//! extreme-value estimate of the largest margin-gradient norm over the ball
//! of radius `R`. The second-order score uses the gradient norm `b` at the
//! input and an estimate `a` of the largest Hessian spectral norm over the
//! ball: `min((−b + √(b² + 2aγ)) / a, R)`.
//!
//! Classifiers guarded by a non-differentiable input transform are scored
//! with BPDA gradients taken at the transformed point.
//!
//! ```
//! use clever_core::{clever_score, Model, SamplePlan, ScoreOrder, ScoreParams, Tensor, TransformSpec};
//!
//! # fn main() -> clever_core::Result<()> {
//! let model = Model::load("fixtures/mlp_tanh.json")?;
//! let x0 = Tensor::vector(vec![0.5; 8])?;
//! let target = (model.predict(&x0)? + 1) % model.num_classes();
//! let plan = SamplePlan::new(20, 50, 2.0, 42)?;
//! let spec: TransformSpec = "bitdepth:3".parse()?;
//! let out = clever_score(&model, &spec, &x0, target, &ScoreParams::new(ScoreOrder::Second, plan))?;
//! assert!(out.score > 0.0 && out.score <= 2.0);
//! # Ok(())
//! # }
//! ```

pub mod attack;
pub mod autodiff;
pub mod clever;
pub mod error;
pub mod evt;
pub mod harness;
pub mod network;
pub mod report;
pub mod simplex;
pub mod tensor;
pub mod transforms;

pub use attack::{attack, untargeted_attack, AttackOutcome, AttackParams};
pub use autodiff::{Activation, Graph, GraphBuilder, OutputSelector, ScalarField, ScalarGraph};
pub use clever::{
    clever_score, first_order_score, hessian_spectral_norm, score_field, second_order_score,
    select_targets, BoundInputs, ScoreOrder, ScoreOutcome, ScoreParams, TargetMode, Targets,
};
pub use error::{Error, Result};
pub use evt::{EvtFit, MaxEstimate, SamplePlan};
pub use harness::{
    compare_transforms, run_experiment, Dataset, ExperimentConfig, ExperimentSettings, Record,
    TransformComparison,
};
pub use network::{Layer, MarginFn, Model};
pub use report::{parse_csv_report, Aggregate, CleverReport, ReportFormat, ReportRow};
pub use tensor::Tensor;
pub use transforms::TransformSpec;
