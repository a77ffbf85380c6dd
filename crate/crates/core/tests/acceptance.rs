//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

mod common;

use std::sync::Arc;
use std::time::Instant;

use clever_core::clever::targets_from_logits;
use clever_core::evt::{fit_reverse_weibull, sample_point, substream};
use clever_core::report::{compute_aggregates, parse_csv_report};
use clever_core::transforms::{bpda_gradient, true_composed_gradient};
use clever_core::{
    clever_score, compare_transforms, hessian_spectral_norm, run_experiment, score_field,
    second_order_score, Activation, AttackParams, BoundInputs, ExperimentSettings, GraphBuilder,
    Layer, Model, SamplePlan, ScalarGraph, ScoreOrder, ScoreParams, TargetMode, Tensor,
    TransformSpec,
};
use common::{fixture_dataset, fixture_model, rel_err, verdict};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn uniform_point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random::<f64>()).collect()
}

fn flat(m: &DMatrix<f64>) -> Tensor {
    let n = m.nrows();
    Tensor::matrix(
        (0..n)
            .map(|i| (0..n).map(|j| m[(i, j)]).collect())
            .collect(),
    )
    .unwrap()
}

/// `γ + b·(x − c) + ½ (x − c)ᵀ D (x − c)` as a graph.
fn quadratic_margin(center: &[f64], gamma: f64, b: &[f64], d: &DMatrix<f64>) -> ScalarGraph {
    let n = center.len();
    let mut gb = GraphBuilder::new();
    let x = gb.input(vec![n]).unwrap();
    let c = gb.constant(Tensor::vector(center.to_vec()).unwrap());
    let delta = gb.sub(x, c).unwrap();
    let row = Tensor::matrix(vec![b.to_vec()]).unwrap();
    let lin = gb.matvec(Arc::new(row), delta).unwrap();
    let d_delta = gb.matvec(Arc::new(flat(d)), delta).unwrap();
    let prod = gb.mul(delta, d_delta).unwrap();
    let quad = gb.sum(prod);
    let half = gb.scale(quad, 0.5);
    let g0 = gb.constant(Tensor::vector(vec![gamma]).unwrap());
    let s = gb.add(lin, half).unwrap();
    let out = gb.add(s, g0).unwrap();
    ScalarGraph::new(gb.build(out).unwrap()).unwrap()
}

#[test]
fn linear_exactness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for m in 0..20 {
        let d = rng.random_range(1..=20);
        let k = rng.random_range(2..=5);
        let w = gaussian_matrix(&mut rng, k, d, 1.0);
        let bias: Vec<f64> = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
        let model = Model::new(
            format!("linear-{m}"),
            d,
            k,
            (0.0, 1.0),
            vec![Layer::Affine {
                weight: Arc::new(Tensor::matrix(w.clone()).unwrap()),
                bias: Arc::new(Tensor::vector(bias.clone()).unwrap()),
            }],
        )
        .unwrap();
        let x0 = uniform_point(&mut rng, d);
        let logits: Vec<f64> = (0..k)
            .map(|i| w[i].iter().zip(&x0).map(|(a, b)| a * b).sum::<f64>() + bias[i])
            .collect();
        let c = (0..k)
            .max_by(|&i, &j| logits[i].total_cmp(&logits[j]).then(j.cmp(&i)))
            .unwrap();
        let t = loop {
            let t = rng.random_range(0..k);
            if t != c {
                break t;
            }
        };
        let gap: f64 = w[c]
            .iter()
            .zip(&w[t])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let radius = 2.0;
        let expected = ((logits[c] - logits[t]) / gap).min(radius);

        let plan = SamplePlan::new(100, 200, radius, m).unwrap();
        let params = ScoreParams::new(ScoreOrder::First, plan);
        let x = Tensor::vector(x0).unwrap();
        let got = clever_score(&model, &TransformSpec::identity(), &x, t, &params)
            .unwrap()
            .score;
        worst = worst.max(rel_err(got, expected));
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = worst < 1e-9 && elapsed < 10.0;
    verdict(
        "linear exactness",
        pass,
        format!("max relative error {worst:.3e}, {elapsed:.2} s"),
    );
    assert!(pass);
}

#[test]
fn second_order_exactness_on_quadratics() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = 10;
    let radius = 2.0;
    let mut worst: f64 = 0.0;

    let random_orthogonal = |rng: &mut ChaCha8Rng| {
        DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal))
            .qr()
            .q()
    };

    for case in 0..10 {
        let q = random_orthogonal(&mut rng);
        let top: f64 = rng.random_range(0.5..5.0);
        let mut eig: Vec<f64> = (0..d).map(|_| top * rng.random_range(-0.8..0.8)).collect();
        eig[0] = if rng.random() { top } else { -top };
        let dmat = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig)) * q.transpose();
        let dmat = (&dmat + dmat.transpose()) * 0.5;

        let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let b_len = rng.random_range(0.5..3.0);
        let b: Vec<f64> = dir.iter().map(|v| v / norm * b_len).collect();
        let gamma = rng.random_range(0.2..2.0);
        let x0 = uniform_point(&mut rng, d);

        let field = quadratic_margin(&x0, gamma, &b, &dmat);
        let plan = SamplePlan::new(50, 50, radius, case).unwrap();
        let out = score_field(
            &field,
            &TransformSpec::identity(),
            &x0,
            &ScoreParams::new(ScoreOrder::Second, plan),
        )
        .unwrap();
        let expected = ((-b_len + (b_len * b_len + 2.0 * top * gamma).sqrt()) / top).min(radius);
        worst = worst.max(rel_err(out.score, expected));
    }

    // a = 0: the bound reduces to γ / b.
    let x0 = vec![0.3; d];
    let b: Vec<f64> = (0..d).map(|i| 0.1 * (i as f64 + 1.0)).collect();
    let b_len = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let flat_field = quadratic_margin(&x0, 0.5, &b, &DMatrix::zeros(d, d));
    let plan = SamplePlan::new(20, 20, radius, 1).unwrap();
    let out = score_field(
        &flat_field,
        &TransformSpec::identity(),
        &x0,
        &ScoreParams::new(ScoreOrder::Second, plan),
    )
    .unwrap();
    let a_zero_field = out.bounds.a == 0.0 && rel_err(out.score, 0.5 / b_len) < 1e-12;
    let a_zero_exact = second_order_score(
        &BoundInputs {
            gamma: 0.5,
            b: 2.0,
            a: 0.0,
            lipschitz: 0.0,
        },
        radius,
    )
    .unwrap()
        == 0.25;

    // b = 0: the bound reduces to √(2γ / a).
    let b_zero_exact = rel_err(
        second_order_score(
            &BoundInputs {
                gamma: 0.5,
                b: 0.0,
                a: 4.0,
                lipschitz: 0.0,
            },
            radius,
        )
        .unwrap(),
        0.5,
    ) < 1e-15;
    let dmat = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(d, |i, _| {
        if i == 0 {
            4.0
        } else {
            1.0
        }
    }));
    let bowl = quadratic_margin(&x0, 0.5, &vec![0.0; d], &dmat);
    let out = score_field(
        &bowl,
        &TransformSpec::identity(),
        &x0,
        &ScoreParams::new(ScoreOrder::Second, plan),
    )
    .unwrap();
    let b_zero_field = out.bounds.b == 0.0 && rel_err(out.score, 0.5) < 1e-2;

    let pass = worst < 1e-2 && a_zero_field && a_zero_exact && b_zero_exact && b_zero_field;
    verdict(
        "second-order exactness on quadratics",
        pass,
        format!(
            "max relative error {worst:.3e}; a=0 field {a_zero_field}, closed form {a_zero_exact}; \
             b=0 field {b_zero_field}, closed form {b_zero_exact}"
        ),
    );
    assert!(pass);
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let activations = [Activation::Tanh, Activation::Sigmoid, Activation::Softplus];
    let mut worst: f64 = 0.0;
    for probe in 0..100 {
        let act = activations[probe % 3];
        let d = rng.random_range(1..=50);
        let k = rng.random_range(2..=5);
        let depth = rng.random_range(1..=4);
        let mut layers = Vec::new();
        let mut fan_in = d;
        for l in 0..depth {
            let width = if l + 1 == depth {
                k
            } else {
                rng.random_range(2..=20)
            };
            let scale = 1.5 / (fan_in as f64).sqrt();
            layers.push(Layer::Affine {
                weight: Arc::new(
                    Tensor::matrix(gaussian_matrix(&mut rng, width, fan_in, scale)).unwrap(),
                ),
                bias: Arc::new(
                    Tensor::vector((0..width).map(|_| rng.random_range(-0.5..0.5)).collect())
                        .unwrap(),
                ),
            });
            if l + 1 < depth {
                layers.push(Layer::Activation(act));
            }
            fan_in = width;
        }
        let model = Model::new("probe", d, k, (0.0, 1.0), layers).unwrap();
        let c = rng.random_range(0..k);
        let t = (c + rng.random_range(1..k)) % k;
        let mut margin = model.margin_fn(c, t).unwrap();
        let x0 = uniform_point(&mut rng, d);
        let ad = margin
            .margin_grad(&Tensor::vector(x0.clone()).unwrap())
            .unwrap();

        let h = 1e-5;
        let mut diff = 0.0;
        let mut norm = 0.0;
        for i in 0..d {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus[i] += h;
            minus[i] -= h;
            let fp = margin.margin(&Tensor::vector(plus).unwrap()).unwrap();
            let fm = margin.margin(&Tensor::vector(minus).unwrap()).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            diff += (ad.data()[i] - fd).powi(2);
            norm += fd * fd;
        }
        worst = worst.max(diff.sqrt() / norm.sqrt().max(1e-12));
    }
    let pass = worst < 1e-5;
    verdict(
        "gradient vs finite differences",
        pass,
        format!("100 probes, max relative error {worst:.3e}"),
    );
    assert!(pass);
}

#[test]
fn spectral_norm_matches_eigendecomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let d = 50;
    let mut worst: f64 = 0.0;
    for form in 0..20 {
        let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = (&g + g.transpose()) * 0.5;
        let oracle = SymmetricEigen::new(a.clone())
            .eigenvalues
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));

        let mut field = quadratic_margin(&vec![0.0; d], 0.0, &vec![0.0; d], &a);
        let x = uniform_point(&mut rng, d);
        let params = ScoreParams {
            power_iters: 20_000,
            power_tol: 1e-13,
            ..ScoreParams::new(ScoreOrder::Second, SamplePlan::default())
        };
        let mut prng = substream(form, 0);
        let est = hessian_spectral_norm(&mut field, &x, &params, &mut prng).unwrap();
        worst = worst.max(rel_err(est.value, oracle));
    }
    let pass = worst < 1e-3;
    verdict(
        "spectral norm vs dense eigendecomposition",
        pass,
        format!("20 forms, d = 50, max relative error {worst:.3e}"),
    );
    assert!(pass);
}

#[test]
fn reverse_weibull_recovery() {
    let (mu, sigma, alpha) = (2.0, 0.5, 3.0);
    let draw = |seed: u64, n: usize| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random_range(f64::EPSILON..1.0);
                mu - sigma * (-u.ln()).powf(1.0 / alpha)
            })
            .collect()
    };

    let samples = draw(15, 500);
    let fit = fit_reverse_weibull(&samples).unwrap();
    let recovered = (fit.location - mu).abs() <= 0.05;

    let mut constraint_held = true;
    for seed in 0..40 {
        let xs = draw(100 + seed, 20 + 10 * seed as usize);
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        match fit_reverse_weibull(&xs) {
            Ok(f) => constraint_held &= f.location >= max,
            Err(clever_core::Error::FitNotConverged { best }) => {
                constraint_held &= best.location >= max
            }
            Err(e) => panic!("unexpected fit error {e}"),
        }
    }
    let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    constraint_held &= fit.location >= max;

    let pass = recovered && constraint_held;
    verdict(
        "reverse Weibull recovery",
        pass,
        format!(
            "location {:.4} (true {mu}), scale {:.4}, shape {:.4}; location >= max on all fits: {constraint_held}",
            fit.location, fit.scale, fit.shape
        ),
    );
    assert!(pass);
}

#[test]
fn soundness_against_attack() {
    let started = Instant::now();
    let model = fixture_model();
    let dataset = fixture_dataset(&model);
    let settings = ExperimentSettings {
        plan: SamplePlan::new(100, 200, 2.0, 2017).unwrap(),
        attack: Some(AttackParams::default()),
        max_inputs: Some(50),
        ..Default::default()
    };
    let report = run_experiment(&model, &dataset, &settings).unwrap();
    let elapsed = started.elapsed().as_secs_f64();

    let mut cases = 0;
    let mut sound = 0;
    let mut location_ok = true;
    for row in &report.rows {
        if let Some(fit) = &row.fit {
            let max = fit
                .batch_maxima
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            location_ok &= fit.location >= max;
        }
        if let (Some(score), Some(true), Some(dist)) =
            (row.score, row.attack_success, row.attack_distortion)
        {
            cases += 1;
            if score <= dist {
                sound += 1;
            }
        }
    }
    let rate = sound as f64 / cases.max(1) as f64;
    let pass =
        report.evaluated == 50 && cases > 0 && rate >= 0.95 && location_ok && elapsed < 600.0;
    verdict(
        "soundness vs attack",
        pass,
        format!(
            "{sound}/{cases} scores below the attack distortion ({:.1} %), {} inputs, {elapsed:.1} s",
            rate * 100.0,
            report.evaluated
        ),
    );
    assert!(pass);
}

fn bpda_settings() -> ExperimentSettings {
    ExperimentSettings {
        orders: vec![ScoreOrder::First],
        plan: SamplePlan::new(100, 200, 2.0, 4).unwrap(),
        max_inputs: Some(50),
        ..Default::default()
    }
}

#[test]
fn bpda_coarse_depth_keeps_scores_close() {
    let model = fixture_model();
    let dataset = fixture_dataset(&model);
    let specs = [
        TransformSpec::identity(),
        TransformSpec::bit_depth(3, 0.0, 1.0).unwrap(),
    ];
    let cmp = compare_transforms(&model, &dataset, &specs, &bpda_settings()).unwrap();
    let ratios: Vec<f64> = cmp.modes.iter().map(|m| m.transforms[1].ratio).collect();
    let pass = cmp.inputs > 0 && ratios.iter().all(|r| (0.5..=1.1).contains(r));
    verdict(
        "BPDA consistency, bitdepth:3 within [0.5, 1.1] of baseline",
        pass,
        format!("{} inputs, ratios per target mode {ratios:.4?}", cmp.inputs),
    );
    assert!(pass);
}

#[test]
fn bpda_full_depth_matches_baseline_bitwise() {
    let model = fixture_model();
    let dataset = fixture_dataset(&model);
    let base = run_experiment(&model, &dataset, &bpda_settings()).unwrap();
    let full = run_experiment(
        &model,
        &dataset,
        &ExperimentSettings {
            transform: TransformSpec::bit_depth(8, 0.0, 1.0).unwrap(),
            ..bpda_settings()
        },
    )
    .unwrap();

    let on_grid = dataset.records.iter().all(|r| {
        r.values.iter().all(|v| {
            TransformSpec::bit_depth(8, 0.0, 1.0)
                .unwrap()
                .apply_value(*v)
                == *v
        })
    });
    let mut identical = 0;
    let mut worst: f64 = 0.0;
    for (a, b) in base.rows.iter().zip(&full.rows) {
        let (sa, sb) = (a.score.unwrap(), b.score.unwrap());
        if sa.to_bits() == sb.to_bits() {
            identical += 1;
        }
        worst = worst.max(rel_err(sb, sa));
    }
    let same_gamma = base
        .rows
        .iter()
        .zip(&full.rows)
        .all(|(a, b)| a.gamma == b.gamma && a.target_class == b.target_class);
    let pass = on_grid && base.rows.len() == full.rows.len() && identical == base.rows.len();
    verdict(
        "BPDA consistency, bitdepth:8 bit-identical to baseline",
        pass,
        format!(
            "inputs on byte grid {on_grid}, margins identical {same_gamma}, \
             {identical}/{} scores bit-identical, max relative difference {worst:.3e}",
            base.rows.len()
        ),
    );
    assert!(pass);
}

#[test]
fn gradient_masking_demonstration() {
    let model = fixture_model();
    let spec = TransformSpec::bit_depth(3, 0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let points = 1000;
    let mut masked = 0;
    let mut bpda_alive = 0;
    for _ in 0..points {
        let x = Tensor::vector(uniform_point(&mut rng, model.input_dim())).unwrap();
        let logits = model.logits(&spec.apply(&x)).unwrap();
        let targets = targets_from_logits(logits.data(), &mut rng);
        let mut margin = model
            .margin_fn(targets.predicted, targets.runner_up)
            .unwrap();
        let true_grad = true_composed_gradient(&spec, &mut margin, &x).unwrap();
        let bpda = bpda_gradient(&spec, &mut margin, &x).unwrap();
        if true_grad.data().iter().all(|&g| g == 0.0) {
            masked += 1;
        }
        if bpda.norm_l2() > 0.0 {
            bpda_alive += 1;
        }
    }
    let share = masked as f64 / points as f64;
    let pass = share >= 0.99 && bpda_alive == points;
    verdict(
        "gradient masking demonstration",
        pass,
        format!(
            "composed gradient zero at {masked}/{points} points, BPDA gradient nonzero at {bpda_alive}/{points}"
        ),
    );
    assert!(pass);
}

#[test]
fn certified_ball_spot_check() {
    let model = fixture_model();
    let dataset = fixture_dataset(&model);
    let spec = TransformSpec::identity();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = f64::INFINITY;
    let mut checked = 0;
    for (i, rec) in dataset.records.iter().take(10).enumerate() {
        let x0 = Tensor::vector(rec.values.clone()).unwrap();
        let logits = model.logits(&x0).unwrap();
        let targets = targets_from_logits(logits.data(), &mut rng);
        let mode = TargetMode::ALL[i % 3];
        let t = targets.get(mode);
        let mut margin = model.margin_fn(targets.predicted, t).unwrap();
        for order in [ScoreOrder::First, ScoreOrder::Second] {
            let plan = SamplePlan::new(100, 200, 2.0, i as u64).unwrap();
            let score = clever_score(&model, &spec, &x0, t, &ScoreParams::new(order, plan))
                .unwrap()
                .score;
            for _ in 0..100 {
                let p = sample_point(x0.data(), score, &mut rng);
                let g = margin.margin(&Tensor::vector(p).unwrap()).unwrap();
                worst = worst.min(g);
                checked += 1;
            }
        }
    }
    let pass = worst >= -1e-6;
    verdict(
        "certified-ball spot check",
        pass,
        format!("{checked} perturbations over 10 pairs and both orders, min margin {worst:.4e}"),
    );
    assert!(pass);
}

#[test]
fn report_fidelity() {
    let model = fixture_model();
    let dataset = fixture_dataset(&model);
    let settings = ExperimentSettings {
        plan: SamplePlan::new(30, 50, 2.0, 99).unwrap(),
        attack: Some(AttackParams {
            max_iterations: 200,
            ..Default::default()
        }),
        max_inputs: Some(12),
        ..Default::default()
    };
    let first = run_experiment(&model, &dataset, &settings).unwrap();
    let csv = first.to_csv().unwrap();
    let parsed = parse_csv_report(&csv).unwrap();
    let recomputed = compute_aggregates(&parsed.rows);
    let aggregates_exact = parsed.aggregates == recomputed && recomputed == first.aggregates;

    let dir = tempfile::tempdir().unwrap();
    let path_a = dir.path().join("a.csv");
    let path_b = dir.path().join("b.csv");
    first
        .write(&path_a, clever_core::ReportFormat::Csv)
        .unwrap();
    run_experiment(&model, &dataset, &settings)
        .unwrap()
        .write(&path_b, clever_core::ReportFormat::Csv)
        .unwrap();
    let identical = std::fs::read(&path_a).unwrap() == std::fs::read(&path_b).unwrap();

    let pass = aggregates_exact && identical && !parsed.rows.is_empty();
    verdict(
        "report fidelity",
        pass,
        format!(
            "{} rows, aggregates equal recomputation {aggregates_exact}, rerun byte-identical {identical}",
            parsed.rows.len()
        ),
    );
    assert!(pass);
}
