//! Extreme-value estimation of the maximum of a function over an ℓ2 ball.
//!
//! The ball is sampled in `N_b` batches of `N_s` points. The per-batch maxima
//! are fitted with a reverse Weibull distribution by maximum likelihood, and
//! the fitted location (the right end of the support) is the estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::{self, SimplexOptions};
use crate::tensor::norm_l2;

pub type SampleRng = ChaCha20Rng;

/// An RNG on stream `stream` of `seed`. Distinct streams never overlap.
pub fn substream(seed: u64, stream: u64) -> SampleRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer, for deriving child seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BallNorm {
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub batches: usize,
    pub samples_per_batch: usize,
    pub radius: f64,
    pub norm: BallNorm,
    pub seed: u64,
}

impl SamplePlan {
    pub fn new(batches: usize, samples_per_batch: usize, radius: f64, seed: u64) -> Result<Self> {
        let plan = Self {
            batches,
            samples_per_batch,
            radius,
            norm: BallNorm::L2,
            seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batches < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 batches, got {}",
                self.batches
            )));
        }
        if self.samples_per_batch < 1 {
            return Err(Error::InvalidParameter(
                "need at least 1 sample per batch".into(),
            ));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "radius must be positive, got {}",
                self.radius
            )));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

impl Default for SamplePlan {
    fn default() -> Self {
        Self {
            batches: 100,
            samples_per_batch: 200,
            radius: 2.0,
            norm: BallNorm::L2,
            seed: 0,
        }
    }
}

/// One point uniformly distributed in the ℓ2 ball of radius `radius` about `center`.
pub fn sample_point<R: Rng + ?Sized>(center: &[f64], radius: f64, rng: &mut R) -> Vec<f64> {
    let d = center.len();
    let mut direction: Vec<f64>;
    let mut norm;
    loop {
        direction = (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        norm = norm_l2(&direction);
        if norm > 0.0 {
            break;
        }
    }
    let u: f64 = rng.random();
    let r = radius * u.powf(1.0 / d as f64);
    center
        .iter()
        .zip(&direction)
        .map(|(c, g)| c + r * g / norm)
        .collect()
}

pub fn sample_ball<R: Rng + ?Sized>(
    center: &[f64],
    radius: f64,
    n: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    (0..n).map(|_| sample_point(center, radius, rng)).collect()
}

/// Per-batch maxima of `value` over fresh ball samples.
///
/// `make_value` builds one evaluator per worker; each evaluator receives the
/// sample and the batch's RNG (which it may draw from further). Batch `b`
/// uses RNG stream `b` of the plan seed, so results do not depend on how
/// batches are scheduled.
pub fn batch_maxima<M, V>(make_value: M, center: &[f64], plan: &SamplePlan) -> Result<Vec<f64>>
where
    M: Fn() -> V + Sync + Send,
    V: FnMut(&[f64], &mut SampleRng) -> Result<f64>,
{
    plan.validate()?;
    (0..plan.batches)
        .into_par_iter()
        .map_init(&make_value, |value, batch| {
            let mut rng = substream(plan.seed, batch as u64);
            let mut best = f64::NEG_INFINITY;
            for sample in 0..plan.samples_per_batch {
                let x = sample_point(center, plan.radius, &mut rng);
                let v = value(&x, &mut rng)?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteSample {
                        batch,
                        sample,
                        value: v,
                    });
                }
                best = best.max(v);
            }
            Ok(best)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvtFit {
    /// Right end of the fitted support; the extreme-value estimate.
    pub location: f64,
    pub scale: f64,
    pub shape: f64,
    pub log_likelihood: f64,
    pub batch_maxima: Vec<f64>,
    pub degenerate: bool,
    pub iterations: usize,
}

impl EvtFit {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit serializes")
    }
}

/// Reverse Weibull log-density summed over `xs`.
pub fn reverse_weibull_log_likelihood(xs: &[f64], location: f64, scale: f64, shape: f64) -> f64 {
    let (ln_a, ln_s) = (shape.ln(), scale.ln());
    xs.iter()
        .map(|&x| {
            let y = location - x;
            if y <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ln_a - shape * ln_s + (shape - 1.0) * y.ln() - (y / scale).powf(shape)
        })
        .sum()
}

// Bounds on the standardized log-parameters; the likelihood is unbounded as
// the location approaches the sample maximum when the shape is below one.
const LOG_OFFSET_RANGE: (f64, f64) = (-23.0, 9.0);
const LOG_SCALE_RANGE: (f64, f64) = (-23.0, 9.0);
const LOG_SHAPE_RANGE: (f64, f64) = (-5.0, 5.0);

fn within(v: f64, (lo, hi): (f64, f64)) -> bool {
    v >= lo && v <= hi
}

/// Maximum-likelihood reverse Weibull fit with the location constrained
/// above the largest observation.
pub fn fit_reverse_weibull(maxima: &[f64]) -> Result<EvtFit> {
    if maxima.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 maxima, got {}",
            maxima.len()
        )));
    }
    if let Some(v) = maxima.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite maximum {v}")));
    }
    let n = maxima.len() as f64;
    let top = maxima.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bottom = maxima.iter().copied().fold(f64::INFINITY, f64::min);
    if top - bottom <= 1e-12 {
        return Ok(EvtFit {
            location: top,
            scale: 0.0,
            shape: 1.0,
            log_likelihood: 0.0,
            batch_maxima: maxima.to_vec(),
            degenerate: true,
            iterations: 0,
        });
    }

    // Work on z = (x - top) / sd so the optimizer sees unit-scale data.
    let mean = maxima.iter().sum::<f64>() / n;
    let sd = (maxima.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let z: Vec<f64> = maxima.iter().map(|x| (x - top) / sd).collect();

    let nll = |p: &[f64]| -> f64 {
        let (m, ls, la) = (p[0], p[1], p[2]);
        if !(within(m, LOG_OFFSET_RANGE)
            && within(ls, LOG_SCALE_RANGE)
            && within(la, LOG_SHAPE_RANGE))
        {
            return f64::INFINITY;
        }
        let (mu, sigma, alpha) = (m.exp(), ls.exp(), la.exp());
        let mut total = 0.0;
        for &zi in &z {
            let y = mu - zi;
            total += la - alpha * ls + (alpha - 1.0) * y.ln() - (y / sigma).powf(alpha);
        }
        -total
    };

    let offset0 = 0.1f64.max(1e-6 / sd).ln();
    let starts = [
        [offset0, 0.0, 0.0],
        [offset0 + 10f64.ln(), 0.0, 3f64.ln()],
        [offset0 - 10f64.ln(), 0.5f64.ln(), 0.5f64.ln()],
    ];
    let runs: Vec<_> = starts
        .iter()
        .map(|s| simplex::minimize(nll, s, SimplexOptions::default()))
        .collect();

    let to_fit = |r: &simplex::SimplexResult| {
        let location = top + sd * r.point[0].exp();
        let scale = sd * r.point[1].exp();
        let shape = r.point[2].exp();
        EvtFit {
            location,
            scale,
            shape,
            log_likelihood: reverse_weibull_log_likelihood(maxima, location, scale, shape),
            batch_maxima: maxima.to_vec(),
            degenerate: false,
            iterations: r.iterations,
        }
    };

    let best_of = |converged_only: bool| {
        runs.iter()
            .filter(|r| r.converged || !converged_only)
            .min_by(|a, b| a.value.total_cmp(&b.value))
    };
    match best_of(true) {
        Some(r) => Ok(to_fit(r)),
        None => {
            let r = best_of(false).expect("at least one start");
            Err(Error::FitNotConverged {
                best: Box::new(to_fit(r)),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxEstimate {
    pub estimate: f64,
    pub fit: EvtFit,
}

/// Extreme-value estimate of `max value(x)` over the plan's ball about `center`.
pub fn estimate_max<M, V>(make_value: M, center: &[f64], plan: &SamplePlan) -> Result<MaxEstimate>
where
    M: Fn() -> V + Sync + Send,
    V: FnMut(&[f64], &mut SampleRng) -> Result<f64>,
{
    let maxima = batch_maxima(make_value, center, plan)?;
    let fit = fit_reverse_weibull(&maxima)?;
    Ok(MaxEstimate {
        estimate: fit.location,
        fit,
    })
}
