//! Central-difference gradient verification and the built-in check suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Largest `|analytic − numeric| / max(1, |numeric|)` over coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let input = g.param(x.clone());
    let out = f(&mut g, input)?;
    if g.value(out).len() != 1 {
        return Err(Error::NonScalarOutput(g.value(out).shape().to_vec()));
    }
    let analytic = g.backward(out)?.take(input).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let input = g.constant(t);
        let out = f(&mut g, input)?;
        Ok(g.scalar_value(out))
    };
    compare_with_central_differences(eval, analytic.data(), x, h)
}

/// Same metric as [`grad_check`] for an externally supplied gradient.
pub fn compare_with_central_differences<E>(eval: E, analytic: &[f64], x: &Tensor, h: f64) -> Result<f64>
where
    E: Fn(Tensor) -> Result<f64>,
{
    if analytic.len() != x.len() {
        return Err(Error::shape(
            "grad_check",
            format!("gradient has {} entries, input has {}", analytic.len(), x.len()),
        ));
    }
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (a - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub(crate) fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_raw(shape.to_vec(), data)
}

type BinaryOp = fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>;

pub struct CheckCase {
    pub name: String,
    pub tolerance: f64,
    run: Box<dyn Fn() -> Result<f64> + Send + Sync>,
}

impl CheckCase {
    pub fn new(name: impl Into<String>, tolerance: f64, run: impl Fn() -> Result<f64> + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            tolerance,
            run: Box::new(run),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_error: std::result::Result<f64, String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        matches!(self.max_rel_error, Ok(e) if e < self.tolerance)
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        match &self.max_rel_error {
            Ok(e) => write!(
                f,
                "{status} {:<40} max_rel_err={e:.3e} tol={:.0e}",
                self.name, self.tolerance
            ),
            Err(msg) => write!(f, "{status} {:<40} error: {msg} tol={:.0e}", self.name, self.tolerance),
        }
    }
}

pub fn run_suite(cases: &[CheckCase]) -> Vec<CheckOutcome> {
    cases
        .iter()
        .map(|c| CheckOutcome {
            name: c.name.clone(),
            tolerance: c.tolerance,
            max_rel_error: (c.run)().map_err(|e| e.to_string()),
        })
        .collect()
}

type Unary = fn(&mut Graph, NodeId) -> Result<NodeId>;

/// Scalarizes a tensor-valued node with fixed pseudo-random weights so that
/// every output coordinate contributes to the checked gradient.
pub(crate) fn weighted_sum(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, g.value(y).shape(), 1.0);
    let w = g.constant(w);
    let p = g.elementwise_mul(y, w)?;
    g.sum(p)
}

fn primitive_cases(tol: f64) -> Vec<CheckCase> {
    let shapes: [&[usize]; 3] = [&[3, 3], &[4, 2], &[2, 5]];
    let mut cases = Vec::new();

    let unary: [(&str, Unary, f64); 12] = [
        ("relu", |g, x| g.relu(x), 1.0),
        ("exp", |g, x| g.exp(x), 1.0),
        ("sum", |g, x| g.sum(x), 1.0),
        ("mean", |g, x| g.mean(x), 1.0),
        ("scalar_mul", |g, x| g.scalar_mul(x, -1.7), 1.0),
        ("add_scalar", |g, x| g.add_scalar(x, 0.3), 1.0),
        ("frobenius_norm", |g, x| g.frobenius_norm(x), 1.0),
        ("pairwise_sq_dists", |g, x| g.pairwise_sq_dists(x), 1.0),
        ("transpose", |g, x| g.transpose(x), 1.0),
        (
            "center",
            |g, x| {
                let t = g.transpose(x)?;
                let k = g.matmul(x, t)?;
                g.center(k)
            },
            1.0,
        ),
        (
            "sq_l2_distance",
            |g, x| {
                let r = Tensor::filled(g.value(x).shape(), 0.25);
                g.sq_l2_distance(x, &r)
            },
            1.0,
        ),
        (
            "softmax_cross_entropy",
            |g, x| {
                let shape = g.value(x).shape().to_vec();
                let mut y = Tensor::zeros(&shape);
                for i in 0..shape[0] {
                    y.data_mut()[i * shape[1] + i % shape[1]] = 1.0;
                }
                g.softmax_cross_entropy(x, &y)
            },
            1.0,
        ),
    ];

    for (si, shape) in shapes.iter().enumerate() {
        for (ui, &(name, f, scale)) in unary.iter().enumerate() {
            let shape = shape.to_vec();

            let seed = (si * 100 + ui) as u64;
            cases.push(CheckCase::new(format!("{name} {shape:?}"), tol, move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut x = random_tensor(&mut rng, &shape, scale);
                if name == "relu" {
                    // keep coordinates away from the kink
                    for v in x.data_mut() {
                        if v.abs() < 0.05 {
                            *v += 0.1;
                        }
                    }
                }
                grad_check(
                    move |g, x| {
                        let y = f(g, x)?;
                        if g.value(y).len() == 1 {
                            Ok(y)
                        } else {
                            weighted_sum(g, y, seed + 7)
                        }
                    },
                    &x,
                    DEFAULT_STEP,
                )
            }));
        }

        let binary: [(&str, BinaryOp); 4] = [
            ("add", |g, a, b| g.add(a, b)),
            ("sub", |g, a, b| g.sub(a, b)),
            ("elementwise_mul", |g, a, b| g.elementwise_mul(a, b)),
            ("div", |g, a, b| {
                let b = g.exp(b)?;
                g.div(a, b)
            }),
        ];
        for (bi, (name, f)) in binary.iter().enumerate() {
            let shape = shape.to_vec();
            let f = *f;
            let seed = (si * 100 + 50 + bi) as u64;
            cases.push(CheckCase::new(format!("{name} {shape:?}"), tol, move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let other = random_tensor(&mut rng, &shape, 1.0);
                let x = random_tensor(&mut rng, &shape, 1.0);
                let first = grad_check(
                    |g, x| {
                        let o = g.constant(other.clone());
                        let y = f(g, x, o)?;
                        weighted_sum(g, y, seed)
                    },
                    &x,
                    DEFAULT_STEP,
                )?;
                let second = grad_check(
                    |g, x| {
                        let o = g.constant(other.clone());
                        let y = f(g, o, x)?;
                        weighted_sum(g, y, seed)
                    },
                    &x,
                    DEFAULT_STEP,
                )?;
                Ok(first.max(second))
            }));
        }

        let shape = shape.to_vec();
        let seed = (si * 100 + 90) as u64;
        cases.push(CheckCase::new(format!("matmul {shape:?}"), tol, {
            let shape = shape.clone();
            move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let right = random_tensor(&mut rng, &[shape[1], 3], 1.0);
                let left = random_tensor(&mut rng, &[4, shape[0]], 1.0);
                let x = random_tensor(&mut rng, &shape, 1.0);
                let a = grad_check(
                    |g, x| {
                        let r = g.constant(right.clone());
                        let y = g.matmul(x, r)?;
                        weighted_sum(g, y, seed)
                    },
                    &x,
                    DEFAULT_STEP,
                )?;
                let b = grad_check(
                    |g, x| {
                        let l = g.constant(left.clone());
                        let y = g.matmul(l, x)?;
                        weighted_sum(g, y, seed)
                    },
                    &x,
                    DEFAULT_STEP,
                )?;
                Ok(a.max(b))
            }
        }));
        cases.push(CheckCase::new(format!("trace_product {shape:?}"), tol, {
            let shape = shape.clone();
            move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
                let other = random_tensor(&mut rng, &[shape[1], shape[0]], 1.0);
                let x = random_tensor(&mut rng, &shape, 1.0);
                grad_check(
                    |g, x| {
                        let o = g.constant(other.clone());
                        g.trace_product(x, o)
                    },
                    &x,
                    DEFAULT_STEP,
                )
            }
        }));
        cases.push(CheckCase::new(format!("add_row {shape:?}"), tol, {
            let shape = shape.clone();
            move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
                let base = random_tensor(&mut rng, &shape, 1.0);
                let row = random_tensor(&mut rng, &[shape[1]], 1.0);
                let a = grad_check(
                    |g, r| {
                        let b = g.constant(base.clone());
                        let y = g.add_row(b, r)?;
                        weighted_sum(g, y, seed)
                    },
                    &row,
                    DEFAULT_STEP,
                )?;
                let b = grad_check(
                    |g, x| {
                        let r = g.constant(row.clone());
                        let y = g.add_row(x, r)?;
                        weighted_sum(g, y, seed)
                    },
                    &base,
                    DEFAULT_STEP,
                )?;
                Ok(a.max(b))
            }
        }));
    }
    cases
}

/// Every registered check: primitives, nHSIC and the full local-training loss.
pub fn builtin_suite() -> Vec<CheckCase> {
    let tol = 1e-4;
    let mut cases = primitive_cases(tol);
    cases.extend(crate::kernel::gradient_checks(tol));
    cases.extend(crate::curriculum::gradient_checks(tol));
    cases
}
