//! Derivative-free Nelder–Mead minimization.

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    pub max_iterations: usize,
    /// Converged when every vertex lies within this distance of the best.
    pub diameter_tol: f64,
    pub initial_step: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            diameter_tol: 1e-9,
            initial_step: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub point: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Minimizes `f` from `start`. `f` may return `+inf` to mark infeasible
/// points; the start must be feasible.
pub fn minimize<F>(mut f: F, start: &[f64], opts: SimplexOptions) -> SimplexResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = start.len();
    let mut eval = |p: &[f64]| {
        let v = f(p);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut vertices: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    vertices.push((start.to_vec(), eval(start)));
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += opts.initial_step;
        let v = eval(&p);
        vertices.push((p, v));
    }

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        vertices.sort_by(|a, b| a.1.total_cmp(&b.1));
        if diameter(&vertices) < opts.diameter_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n)
            .map(|j| vertices[..n].iter().map(|v| v.0[j]).sum::<f64>() / n as f64)
            .collect();
        let worst = vertices[n].clone();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let reflected = along(REFLECT);
        let fr = eval(&reflected);
        if fr < vertices[0].1 {
            let expanded = along(EXPAND);
            let fe = eval(&expanded);
            vertices[n] = if fe < fr {
                (expanded, fe)
            } else {
                (reflected, fr)
            };
            continue;
        }
        if fr < vertices[n - 1].1 {
            vertices[n] = (reflected, fr);
            continue;
        }
        let (contracted, fc) = if fr < worst.1 {
            let p = along(REFLECT * CONTRACT);
            let v = eval(&p);
            (p, v)
        } else {
            let p = along(-CONTRACT);
            let v = eval(&p);
            (p, v)
        };
        if fc < worst.1.min(fr) {
            vertices[n] = (contracted, fc);
            continue;
        }
        let best = vertices[0].0.clone();
        for vertex in vertices.iter_mut().skip(1) {
            let p: Vec<f64> = best
                .iter()
                .zip(&vertex.0)
                .map(|(b, x)| b + SHRINK * (x - b))
                .collect();
            let v = eval(&p);
            *vertex = (p, v);
        }
    }
    vertices.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (point, value) = vertices.swap_remove(0);
    SimplexResult {
        point,
        value,
        iterations,
        converged,
    }
}

fn diameter(vertices: &[(Vec<f64>, f64)]) -> f64 {
    let best = &vertices[0].0;
    vertices[1..]
        .iter()
        .map(|(p, _)| {
            p.iter()
                .zip(best)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}
