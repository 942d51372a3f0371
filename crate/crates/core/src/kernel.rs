//! Empirical HSIC and normalized HSIC over activation batches.
//!
//! Everything here is expressed on an autodiff [`Graph`] so the same code
//! path serves as a training loss and as instrumentation. The normalized
//! estimator is the centered-kernel-alignment form
//! `tr(K̄x·K̄y) / (‖K̄x‖_F·‖K̄y‖_F + ε)`, which lies in `[0, 1]` for PSD kernels.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::diagnostics::Warning;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, random_tensor, CheckCase, DEFAULT_STEP};
use crate::tensor::Tensor;

/// Centered Gram matrices with a Frobenius norm at or below this are treated as zero.
const ZERO_GRAM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median of the nonzero pairwise distances in the batch.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelKind,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: Bandwidth,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_bandwidth() -> Bandwidth {
    Bandwidth::Median
}

fn default_epsilon() -> f64 {
    1e-9
}

impl KernelConfig {
    pub fn gaussian_median() -> Self {
        Self {
            kind: KernelKind::Gaussian,
            bandwidth: Bandwidth::Median,
            epsilon: default_epsilon(),
        }
    }

    pub fn gaussian(sigma: f64) -> Self {
        Self {
            kind: KernelKind::Gaussian,
            bandwidth: Bandwidth::Fixed(sigma),
            epsilon: default_epsilon(),
        }
    }

    pub fn linear() -> Self {
        Self {
            kind: KernelKind::Linear,
            bandwidth: Bandwidth::Median,
            epsilon: default_epsilon(),
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(format!("fixed bandwidth must be > 0, got {s}"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// Median pairwise distance between rows, `None` when all rows coincide.
pub fn median_sigma(x: &Tensor) -> Option<f64> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let d = g.pairwise_sq_dists(xn).ok()?;
    median_of_nonzero(g.value(d))
}

fn median_bandwidth(g: &mut Graph, dists: NodeId) -> f64 {
    match median_of_nonzero(g.value(dists)) {
        Some(s) => s,
        None => {
            g.warn(Warning::MedianBandwidthFallback);
            1.0
        }
    }
}

fn median_of_nonzero(d: &Tensor) -> Option<f64> {
    let m = d.rows();
    let mut nonzero: Vec<f64> = (0..m)
        .flat_map(|i| ((i + 1)..m).map(move |j| (i, j)))
        .map(|(i, j)| d.at(i, j))
        .filter(|&v| v > 0.0)
        .map(f64::sqrt)
        .collect();
    if nonzero.is_empty() {
        return None;
    }
    nonzero.sort_by(f64::total_cmp);
    let n = nonzero.len();
    Some(if n % 2 == 1 {
        nonzero[n / 2]
    } else {
        0.5 * (nonzero[n / 2 - 1] + nonzero[n / 2])
    })
}

/// Kernel matrix over the rows of an `m×d` batch, `m ≥ 2`.
///
/// The median bandwidth is read off the forward values and enters the graph
/// as a constant.
pub fn gram(g: &mut Graph, x: NodeId, cfg: &KernelConfig) -> Result<NodeId> {
    let xv = g.value(x);
    if !xv.is_matrix() {
        return Err(Error::shape(
            "gram",
            format!("expected an m×d batch, got {:?}", xv.shape()),
        ));
    }
    if xv.rows() < 2 {
        return Err(Error::BatchTooSmall { got: xv.rows(), min: 2 });
    }
    match cfg.kind {
        KernelKind::Gaussian => {
            let d = g.pairwise_sq_dists(x)?;
            let sigma = match cfg.bandwidth {
                Bandwidth::Fixed(s) => s,
                Bandwidth::Median => median_bandwidth(g, d),
            };
            let scaled = g.scalar_mul(d, -1.0 / (2.0 * sigma * sigma))?;
            g.exp(scaled)
        }
        KernelKind::Linear => {
            let xt = g.transpose(x)?;
            g.matmul(x, xt)
        }
    }
}

pub fn center(g: &mut Graph, k: NodeId) -> Result<NodeId> {
    g.center(k)
}

fn same_size(op: &'static str, g: &Graph, a: NodeId, b: NodeId) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", g.value(a).shape(), g.value(b).shape()),
        ));
    }
    Ok(())
}

/// `tr(K̄x·K̄y) / (m−1)²`.
pub fn hsic(g: &mut Graph, kx: NodeId, ky: NodeId) -> Result<NodeId> {
    same_size("hsic", g, kx, ky)?;
    let m = g.value(kx).rows() as f64;
    let cx = g.center(kx)?;
    let cy = g.center(ky)?;
    let tr = g.trace_product(cx, cy)?;
    g.scalar_mul(tr, 1.0 / ((m - 1.0) * (m - 1.0)))
}

/// Normalized HSIC. Emits [`Warning::DegenerateBatch`] when either centered
/// Gram matrix vanishes; the value is then 0.
pub fn nhsic(g: &mut Graph, kx: NodeId, ky: NodeId, epsilon: f64) -> Result<NodeId> {
    same_size("nhsic", g, kx, ky)?;
    let cx = g.center(kx)?;
    let cy = g.center(ky)?;
    let tr = g.trace_product(cx, cy)?;
    let nx = g.frobenius_norm(cx)?;
    let ny = g.frobenius_norm(cy)?;
    if g.scalar_value(nx) <= ZERO_GRAM || g.scalar_value(ny) <= ZERO_GRAM {
        g.warn(Warning::DegenerateBatch);
    }
    let denom = g.elementwise_mul(nx, ny)?;
    let denom = g.add_scalar(denom, epsilon)?;
    g.div(tr, denom)
}

/// `nhsic(gram(a), gram(b))` with the ridge taken from `cfg_a`.
pub fn nhsic_between(
    g: &mut Graph,
    a: NodeId,
    cfg_a: &KernelConfig,
    b: NodeId,
    cfg_b: &KernelConfig,
) -> Result<NodeId> {
    let ka = gram(g, a, cfg_a)?;
    let kb = gram(g, b, cfg_b)?;
    nhsic(g, ka, kb, cfg_a.epsilon)
}

/// Forward-only evaluation for instrumentation.
pub fn nhsic_value(a: &Tensor, cfg_a: &KernelConfig, b: &Tensor, cfg_b: &KernelConfig) -> Result<(f64, Vec<Warning>)> {
    let mut g = Graph::new();
    let an = g.constant(a.clone());
    let bn = g.constant(b.clone());
    let v = nhsic_between(&mut g, an, cfg_a, bn, cfg_b)?;
    Ok((g.scalar_value(v), g.take_warnings()))
}

/// Forward-only `hsic(gram(a), gram(b))`.
pub fn hsic_value(a: &Tensor, cfg_a: &KernelConfig, b: &Tensor, cfg_b: &KernelConfig) -> Result<f64> {
    let mut g = Graph::new();
    let an = g.constant(a.clone());
    let bn = g.constant(b.clone());
    let ka = gram(&mut g, an, cfg_a)?;
    let kb = gram(&mut g, bn, cfg_b)?;
    let v = hsic(&mut g, ka, kb)?;
    Ok(g.scalar_value(v))
}

pub(crate) fn one_hot_rows(m: usize, classes: usize) -> Tensor {
    let mut y = Tensor::zeros(&[m, classes]);
    for i in 0..m {
        y.data_mut()[i * classes + (i * 7 + 3) % classes] = 1.0;
    }
    y
}

pub(crate) fn gradient_checks(tol: f64) -> Vec<CheckCase> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut cases = Vec::new();
    cases.push(CheckCase::new("nhsic(X; onehot Y) linear 8x2", tol, move || {
        let mut rng = ChaCha8Rng::seed_from_u64(801);
        let x = random_tensor(&mut rng, &[8, 2], 1.0);
        let y = one_hot_rows(8, 3);
        grad_check(
            |g, x| {
                let yn = g.constant(y.clone());
                let kx = gram(g, x, &KernelConfig::linear())?;
                let ky = gram(g, yn, &KernelConfig::linear())?;
                nhsic(g, kx, ky, 1e-9)
            },
            &x,
            DEFAULT_STEP,
        )
    }));
    cases.push(CheckCase::new(
        "nhsic(X; onehot Y) gaussian-median 8x2",
        tol,
        move || {
            let mut rng = ChaCha8Rng::seed_from_u64(802);
            let x = random_tensor(&mut rng, &[8, 2], 1.0);
            let y = one_hot_rows(8, 3);
            // the bandwidth is a constant of the backward pass; hold it fixed for the differences too
            let sigma = median_sigma(&x).unwrap_or(1.0);
            grad_check(
                |g, x| {
                    let yn = g.constant(y.clone());
                    nhsic_between(g, x, &KernelConfig::gaussian(sigma), yn, &KernelConfig::linear())
                },
                &x,
                DEFAULT_STEP,
            )
        },
    ));
    cases.push(CheckCase::new("nhsic(X; Z) gaussian sigma=1 8x2", tol, move || {
        let mut rng = ChaCha8Rng::seed_from_u64(803);
        let x = random_tensor(&mut rng, &[8, 2], 1.0);
        let z = random_tensor(&mut rng, &[8, 4], 1.0);
        grad_check(
            |g, x| {
                let zn = g.constant(z.clone());
                nhsic_between(g, zn, &KernelConfig::gaussian(1.0), x, &KernelConfig::gaussian(1.0))
            },
            &x,
            DEFAULT_STEP,
        )
    }));
    cases.push(CheckCase::new("hsic(X; X) gaussian sigma=1.5 6x3", tol, move || {
        let mut rng = ChaCha8Rng::seed_from_u64(804);
        let x = random_tensor(&mut rng, &[6, 3], 1.0);
        grad_check(
            |g, x| {
                let cfg = KernelConfig::gaussian(1.5);
                let k = gram(g, x, &cfg)?;
                let t = g.transpose(x)?;
                let k2 = g.matmul(x, t)?;
                hsic(g, k, k2)
            },
            &x,
            DEFAULT_STEP,
        )
    }));
    cases
}
