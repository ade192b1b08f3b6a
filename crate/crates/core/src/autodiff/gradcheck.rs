use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Graph, Mask, Matrix, Var};
use crate::seeding::mix_seed;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// (input index, flat coordinate) where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Checks `f`'s gradients at `point` against central differences with step
/// `epsilon`, perturbing every coordinate of every input.
///
/// `f` receives a fresh graph and one parameter node per input and must
/// return a 1x1 node.
pub fn grad_check<F>(f: F, point: &[Matrix<f64>], epsilon: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |inputs: &[Matrix<f64>]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|m| g.param(m.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Matrix<f64>> = vars.iter().map(|&v| g.grad(v)).collect::<Result<_, _>>()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut work: Vec<Matrix<f64>> = point.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for coord in 0..grad.len() {
            let orig = work[which].data()[coord];
            work[which].data_mut()[coord] = orig + epsilon;
            let up = eval(&work)?;
            work[which].data_mut()[coord] = orig - epsilon;
            let down = eval(&work)?;
            work[which].data_mut()[coord] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = grad.data()[coord];
            let mut rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel.is_nan() {
                rel = f64::INFINITY;
            }
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((which, coord));
            }
        }
    }
    Ok(report)
}

/// Worst gradient-check result for one operator across random trials.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorCheck {
    pub name: &'static str,
    pub trials: usize,
    pub report: GradCheckReport,
}

type Inputs = fn(&mut ChaCha8Rng) -> Vec<Matrix<f64>>;
type Op = fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..6))
}

fn one(rng: &mut ChaCha8Rng) -> Vec<Matrix<f64>> {
    let (r, c) = dims(rng);
    vec![random(rng, r, c, 1.0)]
}

fn two(rng: &mut ChaCha8Rng) -> Vec<Matrix<f64>> {
    let (r, c) = dims(rng);
    vec![random(rng, r, c, 1.0), random(rng, r, c, 1.0)]
}

fn wide(rng: &mut ChaCha8Rng) -> Vec<Matrix<f64>> {
    let (r, c) = dims(rng);
    vec![random(rng, r, c, 3.0)]
}

fn bce_targets(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i * 7 % 3 == 0) as u8 as f64).collect()
}

const SUITE: &[(&str, Inputs, Op)] = &[
    ("add", two, |g, v| g.add(v[0], v[1])),
    ("sub", two, |g, v| g.sub(v[0], v[1])),
    ("mul", two, |g, v| g.mul(v[0], v[1])),
    (
        "matmul",
        |rng| {
            let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            vec![random(rng, m, k, 1.0), random(rng, k, n, 1.0)]
        },
        |g, v| g.matmul(v[0], v[1]),
    ),
    ("transpose", one, |g, v| Ok(g.transpose(v[0]))),
    (
        "add_row_bias",
        |rng| {
            let (r, c) = dims(rng);
            vec![random(rng, r, c, 1.0), random(rng, 1, c, 1.0)]
        },
        |g, v| g.add_row_bias(v[0], v[1]),
    ),
    ("scale", one, |g, v| Ok(g.scale(v[0], -2.5))),
    ("neg", one, |g, v| Ok(g.neg(v[0]))),
    ("affine", one, |g, v| Ok(g.affine(v[0], -2.0, 1.0))),
    (
        "mul_scalar",
        |rng| {
            let (r, c) = dims(rng);
            vec![random(rng, r, c, 1.0), random(rng, 1, 1, 1.0)]
        },
        |g, v| g.mul_scalar(v[0], v[1]),
    ),
    (
        "scale_rows",
        |rng| {
            let (r, c) = dims(rng);
            vec![random(rng, r, c, 1.0), random(rng, r, 1, 1.0)]
        },
        |g, v| g.scale_rows(v[0], v[1]),
    ),
    ("softmax_rows", wide, |g, v| g.softmax_rows(v[0])),
    (
        "masked_fill",
        |rng| {
            let r = 2 * rng.gen_range(1..4);
            vec![random(rng, r, 3, 2.0)]
        },
        |g, v| {
            let mask = Mask::new(2, 3, vec![true, false, true, false, true, true])?;
            let f = g.masked_fill(v[0], &mask)?;
            g.softmax_rows(f)
        },
    ),
    ("gelu", wide, |g, v| Ok(g.gelu(v[0]))),
    (
        "layer_norm",
        |rng| {
            let (r, c) = (rng.gen_range(1..5), rng.gen_range(2..7));
            vec![random(rng, r, c, 2.0), random(rng, 1, c, 1.5), random(rng, 1, c, 1.0)]
        },
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    ),
    ("sigmoid", wide, |g, v| Ok(g.sigmoid(v[0]))),
    ("tanh", one, |g, v| Ok(g.tanh(v[0]))),
    ("log", one, |g, v| {
        let pos = g.affine(v[0], 0.5, 1.0);
        Ok(g.log(pos))
    }),
    ("clamp", one, |g, v| Ok(g.clamp(v[0], -2.0, 2.0))),
    ("sum", one, |g, v| Ok(g.sum(v[0]))),
    ("mean", one, |g, v| Ok(g.mean(v[0]))),
    (
        "bce_with_logits",
        |rng| {
            let (r, c) = dims(rng);
            vec![random(rng, r, c, 6.0)]
        },
        |g, v| {
            let n = g.value(v[0]).len();
            g.bce_with_logits(v[0], &bce_targets(n))
        },
    ),
    (
        "concat_cols",
        |rng| {
            let r = rng.gen_range(1..5);
            let (a, b) = (rng.gen_range(1..4), rng.gen_range(1..4));
            vec![random(rng, r, a, 1.0), random(rng, r, b, 1.0)]
        },
        |g, v| g.concat_cols(&[v[0], v[1], v[0]]),
    ),
    (
        "concat_rows",
        |rng| {
            let c = rng.gen_range(1..5);
            let (a, b) = (rng.gen_range(1..4), rng.gen_range(1..4));
            vec![random(rng, a, c, 1.0), random(rng, b, c, 1.0)]
        },
        |g, v| g.concat_rows(&[v[1], v[0]]),
    ),
    ("slice_cols", one, |g, v| {
        let c = g.shape(v[0]).1;
        g.slice_cols(v[0], c / 2, c - c / 2)
    }),
    ("reshape", one, |g, v| {
        let (r, c) = g.shape(v[0]);
        g.reshape(v[0], 1, r * c)
    }),
    ("tile_rows", one, |g, v| Ok(g.tile_rows(v[0], 3))),
    (
        "block_matmul_nt",
        |rng| {
            let (p, q, c) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..5));
            vec![random(rng, 3 * p, c, 1.0), random(rng, 3 * q, c, 1.0)]
        },
        |g, v| g.block_matmul_nt(v[0], v[1], 3),
    ),
    (
        "block_matmul",
        |rng| {
            let (p, q, c) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..5));
            vec![random(rng, 2 * p, q, 1.0), random(rng, 2 * q, c, 1.0)]
        },
        |g, v| g.block_matmul(v[0], v[1], 2),
    ),
    (
        "parity_product",
        |rng| {
            let r = rng.gen_range(1..5);
            vec![random(rng, r, 5, 1.0)]
        },
        |g, v| g.parity_product(v[0], Arc::new(vec![vec![0, 2, 3], vec![1], vec![0, 1, 2, 3, 4]])),
    ),
];

/// Gradient-checks every differentiable operator on `trials` random inputs
/// each. Outputs are contracted with fixed random weights so every output
/// entry contributes. `abs_detached` is excluded: it has no gradient.
pub fn operator_suite(trials: usize, seed: u64, epsilon: f64) -> Result<Vec<OperatorCheck>, AutodiffError> {
    let mut out = Vec::with_capacity(SUITE.len());
    for (idx, &(name, inputs, op)) in SUITE.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, idx as u64, 0));
        let mut worst: Option<GradCheckReport> = None;
        for trial in 0..trials {
            let point = inputs(&mut rng);
            let wseed = mix_seed(seed, idx as u64, trial as u64 + 1);
            let report = grad_check(
                |g, v| {
                    let y = op(g, v)?;
                    let (r, c) = g.shape(y);
                    let mut wr = ChaCha8Rng::seed_from_u64(wseed);
                    let w = g.constant(random(&mut wr, r, c, 1.0));
                    let prod = g.mul(y, w)?;
                    Ok(g.sum(prod))
                },
                &point,
                epsilon,
            )?;
            if worst.as_ref().is_none_or(|w| report.max_rel_error > w.max_rel_error) {
                worst = Some(report);
            }
        }
        out.push(OperatorCheck {
            name,
            trials,
            report: worst.unwrap_or(GradCheckReport {
                max_rel_error: 0.0,
                worst: None,
                coordinates: 0,
            }),
        });
    }
    Ok(out)
}
