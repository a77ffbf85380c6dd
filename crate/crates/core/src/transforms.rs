//! Non-differentiable input transformations and BPDA gradients through them.
//!
//! BPDA replaces the gradient of `g(h(x))`, which is zero almost everywhere
//! for a staircase `h`, with the gradient of `g` evaluated at `h(x)`.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::ScalarField;
use crate::error::{Error, Result};
use crate::network::MarginFn;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Identity,
    /// Quantize to an 8-bit byte, then keep only the top `bits` bits.
    BitDepth {
        bits: u8,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformSpec {
    kind: TransformKind,
    lo: f64,
    hi: f64,
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self {
            kind: TransformKind::Identity,
            lo: 0.0,
            hi: 1.0,
        }
    }

    pub fn bit_depth(bits: u8, lo: f64, hi: f64) -> Result<Self> {
        if !(1..=16).contains(&bits) {
            return Err(Error::InvalidTransform(format!(
                "bit depth must be in 1..=16, got {bits}"
            )));
        }
        Self::identity().with_range(lo, hi).map(|s| Self {
            kind: TransformKind::BitDepth { bits },
            ..s
        })
    }

    /// Sets the value range the quantization levels are defined over.
    pub fn with_range(self, lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidTransform(format!(
                "range [{lo}, {hi}] is not valid"
            )));
        }
        Ok(Self { lo, hi, ..self })
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn is_identity(&self) -> bool {
        self.kind == TransformKind::Identity
    }

    pub fn apply_value(&self, v: f64) -> f64 {
        match self.kind {
            TransformKind::Identity => v,
            TransformKind::BitDepth { bits } => {
                let span = self.hi - self.lo;
                let clamped = v.clamp(self.lo, self.hi);
                let byte = ((clamped - self.lo) / span * 255.0)
                    .floor()
                    .clamp(0.0, 255.0) as u32;
                // Depths above 8 keep every bit of the byte.
                let dropped = 8u32.saturating_sub(u32::from(bits));
                let masked = (byte >> dropped) << dropped;
                self.lo + (f64::from(masked) / 255.0) * span
            }
        }
    }

    /// Pointwise derivative of [`apply_value`](Self::apply_value): zero on
    /// the flat parts of the staircase, NaN within `1e-12` of a step edge.
    pub fn derivative_value(&self, v: f64) -> f64 {
        match self.kind {
            TransformKind::Identity => 1.0,
            TransformKind::BitDepth { .. } => {
                let eps = (self.hi - self.lo) * 1e-12;
                if self.apply_value(v - eps) != self.apply_value(v + eps) {
                    f64::NAN
                } else {
                    0.0
                }
            }
        }
    }

    pub fn apply_slice(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.apply_value(v)).collect()
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        Tensor::from_raw(x.shape().to_vec(), self.apply_slice(x.data()))
    }

    /// Sup-norm bound on `apply(x) - clamp(x)`.
    pub fn max_quantization_error(&self) -> f64 {
        match self.kind {
            TransformKind::Identity => 0.0,
            TransformKind::BitDepth { bits } => {
                let dropped = 8u32.saturating_sub(u32::from(bits));
                (self.hi - self.lo) * f64::from(1u32 << dropped) / 255.0
            }
        }
    }
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TransformKind::Identity => write!(f, "identity"),
            TransformKind::BitDepth { bits } => write!(f, "bitdepth:{bits}"),
        }
    }
}

/// Parses `identity` or `bitdepth:k`; the range defaults to `[0, 1]`.
impl FromStr for TransformSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "identity" {
            return Ok(Self::identity());
        }
        if let Some(k) = s.strip_prefix("bitdepth:") {
            let bits = k
                .parse::<u8>()
                .map_err(|_| Error::InvalidTransform(format!("bad bit depth {k:?}")))?;
            return Self::bit_depth(bits, 0.0, 1.0);
        }
        Err(Error::InvalidTransform(format!(
            "expected identity or bitdepth:k, got {s:?}"
        )))
    }
}

/// Gradient of the margin at the transformed point `h(x)`.
pub fn bpda_gradient(spec: &TransformSpec, margin: &mut MarginFn, x: &Tensor) -> Result<Tensor> {
    if spec.is_identity() {
        return margin.margin_grad(x);
    }
    margin.margin_grad(&spec.apply(x))
}

/// Chain-rule gradient of `g(h(x))` taking the staircase derivative
/// literally. Components at a step edge are NaN.
pub fn true_composed_gradient(
    spec: &TransformSpec,
    margin: &mut MarginFn,
    x: &Tensor,
) -> Result<Tensor> {
    let outer = margin.margin_grad(&spec.apply(x))?;
    let data = outer
        .data()
        .iter()
        .zip(x.data())
        .map(|(g, &v)| g * spec.derivative_value(v))
        .collect();
    Ok(Tensor::from_raw(x.shape().to_vec(), data))
}

/// A scalar field evaluated through a transform, with BPDA gradients.
#[derive(Debug, Clone)]
pub struct Transformed<F> {
    inner: F,
    spec: TransformSpec,
}

impl<F: ScalarField> Transformed<F> {
    pub fn new(inner: F, spec: TransformSpec) -> Self {
        Self { inner, spec }
    }

    pub fn inner_mut(&mut self) -> &mut F {
        &mut self.inner
    }

    pub fn spec(&self) -> &TransformSpec {
        &self.spec
    }
}

impl<F: ScalarField> ScalarField for Transformed<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&mut self, x: &[f64]) -> Result<f64> {
        if self.spec.is_identity() {
            return self.inner.value(x);
        }
        self.inner.value(&self.spec.apply_slice(x))
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        if self.spec.is_identity() {
            return self.inner.gradient(x);
        }
        self.inner.gradient(&self.spec.apply_slice(x))
    }

    fn is_twice_differentiable(&self) -> bool {
        self.inner.is_twice_differentiable()
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::Activation;
    use crate::network::{Layer, Model};

    fn bits3() -> TransformSpec {
        TransformSpec::bit_depth(3, 0.0, 1.0).unwrap()
    }

    fn tanh_net() -> Model {
        let w1 = vec![
            vec![0.8, -1.2, 0.5],
            vec![-0.3, 0.9, 1.4],
            vec![1.1, 0.2, -0.7],
            vec![0.4, -0.6, 0.3],
        ];
        let w2 = vec![vec![1.0, -0.5, 0.7, 0.2], vec![-0.8, 1.3, -0.1, 0.6]];
        Model::new(
            "tanh",
            3,
            2,
            (0.0, 1.0),
            vec![
                Layer::Affine {
                    weight: Arc::new(Tensor::matrix(w1).unwrap()),
                    bias: Arc::new(Tensor::vector(vec![0.1, -0.2, 0.05, 0.0]).unwrap()),
                },
                Layer::Activation(Activation::Tanh),
                Layer::Affine {
                    weight: Arc::new(Tensor::matrix(w2).unwrap()),
                    bias: Arc::new(Tensor::zeros(vec![2])),
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn parses_cli_syntax() {
        assert_eq!(
            "identity".parse::<TransformSpec>().unwrap(),
            TransformSpec::identity()
        );
        assert_eq!("bitdepth:3".parse::<TransformSpec>().unwrap(), bits3());
        assert_eq!(bits3().to_string(), "bitdepth:3");
        for bad in ["bitdepth:0", "bitdepth:17", "bitdepth:x", "jpeg", ""] {
            assert!(bad.parse::<TransformSpec>().is_err(), "{bad}");
        }
        assert!(TransformSpec::bit_depth(3, 1.0, 1.0).is_err());
    }

    #[test]
    fn bit_depth_examples() {
        let s = bits3();
        // 200 = 0b1100_1000 -> 0b1100_0000 = 192
        assert_eq!(s.apply_value(200.0 / 255.0), 192.0 / 255.0);
        assert!((s.apply_value(200.0 / 255.0) - 0.75294).abs() < 1e-5);
        assert_eq!(s.apply_value(0.0), 0.0);
        assert_eq!(s.apply_value(-3.0), 0.0);
        assert_eq!(s.apply_value(7.0), 224.0 / 255.0);
        let id = TransformSpec::identity();
        assert_eq!(id.apply_value(-3.25), -3.25);
    }

    #[test]
    fn eight_bits_fix_the_byte_grid() {
        let s = TransformSpec::bit_depth(8, 0.0, 1.0).unwrap();
        for j in 0..=255u32 {
            let v = f64::from(j) / 255.0;
            assert_eq!(s.apply_value(v).to_bits(), v.to_bits(), "level {j}");
        }
    }

    #[test]
    fn bpda_examples() {
        let model = tanh_net();
        let mut g = model.margin_fn(0, 1).unwrap();
        let x = Tensor::vector(vec![0.31, 0.77, 0.52]).unwrap();

        let id = TransformSpec::identity();
        assert_eq!(
            bpda_gradient(&id, &mut g, &x).unwrap(),
            g.margin_grad(&x).unwrap()
        );
        assert_eq!(
            true_composed_gradient(&id, &mut g, &x).unwrap(),
            g.margin_grad(&x).unwrap()
        );

        let s = bits3();
        let quantized = Tensor::vector(s.apply_slice(x.data())).unwrap();
        let direct = g.margin_grad(&quantized).unwrap();
        assert_eq!(bpda_gradient(&s, &mut g, &x).unwrap(), direct);
        assert!(bpda_gradient(&s, &mut g, &x).unwrap().norm_l2() > 0.0);
        assert_eq!(
            true_composed_gradient(&s, &mut g, &x).unwrap().norm_l2(),
            0.0
        );
    }

    #[test]
    fn bpda_of_linear_model_is_constant() {
        let w = Tensor::matrix(vec![vec![3.0, 1.0], vec![-1.0, 2.0]]).unwrap();
        let model = Model::new(
            "lin",
            2,
            2,
            (0.0, 1.0),
            vec![Layer::Affine {
                weight: Arc::new(w),
                bias: Arc::new(Tensor::zeros(vec![2])),
            }],
        )
        .unwrap();
        let mut g = model.margin_fn(0, 1).unwrap();
        for x in [[0.1, 0.9], [0.5, 0.5], [1.7, -0.3]] {
            let x = Tensor::vector(x.to_vec()).unwrap();
            assert_eq!(
                bpda_gradient(&bits3(), &mut g, &x).unwrap().data(),
                &[4.0, -1.0]
            );
        }
    }

    proptest! {
        #[test]
        fn bit_depth_is_idempotent(bits in 1u8..=16, v in -2.0f64..3.0) {
            let s = TransformSpec::bit_depth(bits, 0.0, 1.0).unwrap();
            let once = s.apply_value(v);
            prop_assert_eq!(s.apply_value(once).to_bits(), once.to_bits());
        }

        #[test]
        fn quantization_error_is_bounded(bits in 1u8..=8, lo in -5.0f64..5.0, span in 0.1f64..10.0, u in -0.5f64..1.5) {
            let s = TransformSpec::bit_depth(bits, lo, lo + span).unwrap();
            let v = lo + u * span;
            let err = (s.apply_value(v) - v.clamp(lo, lo + span)).abs();
            prop_assert!(err <= s.max_quantization_error() * (1.0 + 1e-12));
        }
    }
}
