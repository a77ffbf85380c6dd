//! Targeted ℓ2 penalty attack in the style of Carlini–Wagner.
//!
//! The attack yields an upper bound on the robustness radius: any
//! successful adversarial example is at least as far as the nearest one.
//! The box constraint is enforced by optimizing in `tanh` space, gradients
//! through a transform use BPDA, and success is always judged on the true
//! defended forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::{argmax, Tensor};
use crate::transforms::TransformSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackParams {
    pub binary_search_steps: usize,
    pub max_iterations: usize,
    pub initial_const: f64,
    pub learning_rate: f64,
    pub confidence: f64,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            binary_search_steps: 5,
            max_iterations: 500,
            initial_const: 0.01,
            learning_rate: 0.01,
            confidence: 0.0,
        }
    }
}

impl AttackParams {
    pub fn validate(&self) -> Result<()> {
        if self.binary_search_steps < 1 || self.max_iterations < 1 {
            return Err(Error::InvalidParameter(
                "attack step counts must be at least 1".into(),
            ));
        }
        if self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || self.initial_const.is_nan()
            || self.initial_const <= 0.0
        {
            return Err(Error::InvalidParameter(
                "attack learning rate and initial constant must be positive".into(),
            ));
        }
        if self.confidence.is_nan() || self.confidence < 0.0 {
            return Err(Error::InvalidParameter(
                "attack confidence must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub success: bool,
    pub target: usize,
    pub x_adv: Vec<f64>,
    /// `‖x_adv − x0‖₂`, or `+inf` when the attack failed.
    pub distortion: f64,
}

impl AttackOutcome {
    fn failure(target: usize, x0: &[f64]) -> Self {
        Self {
            success: false,
            target,
            x_adv: x0.to_vec(),
            distortion: f64::INFINITY,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const UPPER_UNSET: f64 = 1e10;

struct Evaluator<'a> {
    graph: crate::autodiff::Graph,
    spec: &'a TransformSpec,
    target: usize,
}

impl Evaluator<'_> {
    /// Defended logits at `x`.
    fn logits(&mut self, x: &[f64]) -> Vec<f64> {
        let xh = self.spec.apply_slice(x);
        self.graph.forward_slice(&xh).to_vec()
    }

    fn succeeds(&mut self, x: &[f64]) -> bool {
        argmax(&self.logits(x)) == self.target
    }
}

/// Targeted attack on `model` behind `spec`, starting from `x0`.
pub fn attack(
    model: &Model,
    spec: &TransformSpec,
    x0: &Tensor,
    target: usize,
    params: &AttackParams,
) -> Result<AttackOutcome> {
    params.validate()?;
    if x0.len() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![model.input_dim()],
            actual: x0.shape().to_vec(),
        });
    }
    if target >= model.num_classes() {
        return Err(Error::InvalidParameter(format!(
            "target {target} out of range"
        )));
    }
    let x0 = x0.data();
    let mut eval = Evaluator {
        graph: model.logits_graph(),
        spec,
        target,
    };
    if eval.succeeds(x0) {
        return Ok(AttackOutcome {
            success: true,
            target,
            x_adv: x0.to_vec(),
            distortion: 0.0,
        });
    }

    let (lo, hi) = model.input_range();
    let half_span = (hi - lo) / 2.0;
    let to_box = |w: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|&v| lo + half_span * (v.tanh() + 1.0))
            .collect()
    };
    let w0: Vec<f64> = x0
        .iter()
        .map(|&v| {
            let unit = ((v - lo) / half_span - 1.0).clamp(-1.0, 1.0);
            (unit * 0.999_999).atanh()
        })
        .collect();

    let d = x0.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut constant = params.initial_const;
    let (mut lower, mut upper) = (0.0, UPPER_UNSET);

    for _ in 0..params.binary_search_steps {
        let mut w = w0.clone();
        let mut m = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut found = false;

        for iter in 0..=params.max_iterations {
            let x = to_box(&w);
            let logits = eval.logits(&x);
            let dist2: f64 = x.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum();
            if argmax(&logits) == target {
                found = true;
                let dist = dist2.sqrt();
                if best.as_ref().is_none_or(|(bd, _)| dist < *bd) {
                    best = Some((dist, x.clone()));
                }
            }
            if iter == params.max_iterations {
                break;
            }

            let rival = (0..logits.len())
                .filter(|&i| i != target)
                .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
                .expect("at least two classes");
            let gap = logits[rival] - logits[target];
            let mut grad_x: Vec<f64> = x.iter().zip(x0).map(|(a, b)| 2.0 * (a - b)).collect();
            if gap > -params.confidence {
                // BPDA: the cached forward pass is at h(x).
                let seed: Vec<f64> = (0..logits.len())
                    .map(|i| {
                        if i == rival {
                            1.0
                        } else if i == target {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let g = eval.graph.backward_seeded(&seed)?;
                for (gx, gi) in grad_x.iter_mut().zip(g.data()) {
                    *gx += constant * gi;
                }
            }

            let t = (iter + 1) as i32;
            for i in 0..d {
                let th = w[i].tanh();
                let gw = grad_x[i] * half_span * (1.0 - th * th);
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gw;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gw * gw;
                let m_hat = m[i] / (1.0 - ADAM_BETA1.powi(t));
                let v_hat = v[i] / (1.0 - ADAM_BETA2.powi(t));
                w[i] -= params.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }

        if found {
            upper = upper.min(constant);
            constant = (lower + upper) / 2.0;
        } else {
            lower = lower.max(constant);
            constant = if upper < UPPER_UNSET {
                (lower + upper) / 2.0
            } else {
                constant * 10.0
            };
        }
    }

    match best {
        // Re-checked on the defended model rather than trusted from the loop.
        Some((distortion, x_adv)) if eval.succeeds(&x_adv) => Ok(AttackOutcome {
            success: true,
            target,
            x_adv,
            distortion,
        }),
        _ => Ok(AttackOutcome::failure(target, x0)),
    }
}

/// Best targeted attack over every class other than the defended prediction.
pub fn untargeted_attack(
    model: &Model,
    spec: &TransformSpec,
    x0: &Tensor,
    params: &AttackParams,
) -> Result<AttackOutcome> {
    let predicted = model.predict(&spec.apply(x0))?;
    let mut best: Option<AttackOutcome> = None;
    for t in (0..model.num_classes()).filter(|&t| t != predicted) {
        let out = attack(model, spec, x0, t, params)?;
        let better = match &best {
            None => true,
            Some(b) => out.success && out.distortion < b.distortion,
        };
        if better {
            best = Some(out);
        }
    }
    Ok(best.expect("at least two classes"))
}
