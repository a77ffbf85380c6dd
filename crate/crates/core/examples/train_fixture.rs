//! Trains the small tanh classifier used by the test fixtures.
//!
//! Usage: cargo run -p clever-core --example train_fixture -- [OUT_DIR]
//!
//! Writes `mlp_tanh.json` and `dataset.json`. Inputs lie on the byte grid
//! `k / 255` so that bit-depth reduction at 8 bits leaves them unchanged.

use std::path::PathBuf;
use std::sync::Arc;

use clever_core::{Activation, Dataset, Layer, Model, Record, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

const DIM: usize = 8;
const HIDDEN: usize = 12;
const CLASSES: usize = 4;
const TRAIN: usize = 400;
const TEST: usize = 60;
const EPOCHS: usize = 300;
const LR: f64 = 0.05;

fn to_byte_grid(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn sample(rng: &mut ChaCha20Rng, centers: &[Vec<f64>], n: usize) -> Vec<(Vec<f64>, usize)> {
    let noise = Normal::new(0.0, 0.12).unwrap();
    (0..n)
        .map(|i| {
            let c = i % CLASSES;
            let x = centers[c]
                .iter()
                .map(|m| to_byte_grid(m + noise.sample(rng)))
                .collect();
            (x, c)
        })
        .collect()
}

struct Net {
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
}

impl Net {
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h: Vec<f64> = self
            .w1
            .iter()
            .zip(&self.b1)
            .map(|(row, b)| (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b).tanh())
            .collect();
        let z = self
            .w2
            .iter()
            .zip(&self.b2)
            .map(|(row, b)| row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect();
        (h, z)
    }

    #[allow(clippy::needless_range_loop)]
    fn step(&mut self, x: &[f64], label: usize) {
        let (h, z) = self.forward(x);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        let dz: Vec<f64> = exp
            .iter()
            .enumerate()
            .map(|(k, e)| e / total - if k == label { 1.0 } else { 0.0 })
            .collect();
        let mut dh = [0.0; HIDDEN];
        for k in 0..CLASSES {
            for j in 0..HIDDEN {
                dh[j] += dz[k] * self.w2[k][j];
                self.w2[k][j] -= LR * dz[k] * h[j];
            }
            self.b2[k] -= LR * dz[k];
        }
        for j in 0..HIDDEN {
            let da = dh[j] * (1.0 - h[j] * h[j]);
            for i in 0..DIM {
                self.w1[j][i] -= LR * da * x[i];
            }
            self.b1[j] -= LR * da;
        }
    }

    fn predict(&self, x: &[f64]) -> usize {
        let (_, z) = self.forward(x);
        clever_core::tensor::argmax(&z)
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures"));
    std::fs::create_dir_all(&out_dir)?;

    let mut rng = ChaCha20Rng::seed_from_u64(20170101);
    let centers: Vec<Vec<f64>> = (0..CLASSES)
        .map(|_| (0..DIM).map(|_| rng.random_range(0.15..0.85)).collect())
        .collect();
    let train = sample(&mut rng, &centers, TRAIN);
    let test = sample(&mut rng, &centers, TEST);

    let init = Normal::new(0.0, 0.5).unwrap();
    let mut net = Net {
        w1: (0..HIDDEN)
            .map(|_| (0..DIM).map(|_| init.sample(&mut rng)).collect())
            .collect(),
        b1: vec![0.0; HIDDEN],
        w2: (0..CLASSES)
            .map(|_| (0..HIDDEN).map(|_| init.sample(&mut rng)).collect())
            .collect(),
        b2: vec![0.0; CLASSES],
    };
    for _ in 0..EPOCHS {
        for (x, y) in &train {
            net.step(x, *y);
        }
    }

    let accuracy = |set: &[(Vec<f64>, usize)]| {
        set.iter().filter(|(x, y)| net.predict(x) == *y).count() as f64 / set.len() as f64
    };
    eprintln!(
        "train accuracy {:.3}, test accuracy {:.3}",
        accuracy(&train),
        accuracy(&test)
    );

    let model = Model::new(
        "mlp_tanh",
        DIM,
        CLASSES,
        (0.0, 1.0),
        vec![
            Layer::Affine {
                weight: Arc::new(Tensor::matrix(net.w1.clone())?),
                bias: Arc::new(Tensor::vector(net.b1.clone())?),
            },
            Layer::Activation(Activation::Tanh),
            Layer::Affine {
                weight: Arc::new(Tensor::matrix(net.w2.clone())?),
                bias: Arc::new(Tensor::vector(net.b2.clone())?),
            },
        ],
    )?;
    model.save(out_dir.join("mlp_tanh.json"))?;

    let dataset = Dataset {
        records: test
            .into_iter()
            .enumerate()
            .map(|(i, (values, label))| Record {
                id: format!("test-{i:03}"),
                values,
                label,
            })
            .collect(),
    };
    std::fs::write(out_dir.join("dataset.json"), dataset.to_json())?;
    eprintln!("wrote fixtures to {}", out_dir.display());
    Ok(())
}
