//! Per-block loss weights and the curriculum-aware local training loss.
//!
//! For block `t` the loss is
//! `CE − λ1,t · nHSIC(X; Z_t) − λ2,t · nHSIC(Y; P(Z_t)) + (μ/2)·‖θ − θ_ref‖²`,
//! where `Z_t` is the block output, `P` the projection head and `θ_ref` the
//! latest global values of the proximal set.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::gradcheck::{compare_with_central_differences, CheckCase, DEFAULT_STEP};
use crate::kernel::{self, KernelConfig};
use crate::model::{Binding, ParamKey, ParamStore, ProjectionSpec, StageModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProximalScope {
    /// Everything the client uploads: boundary layers, block, output module, head.
    Uploaded,
    BlockOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub lambda1_max: f64,
    pub lambda1_min: f64,
    pub lambda2_min: f64,
    pub lambda2_max: f64,
    pub mu: f64,
    #[serde(default = "default_scope")]
    pub proximal_scope: ProximalScope,
    #[serde(default = "KernelConfig::gaussian_median")]
    pub kernel_x: KernelConfig,
    #[serde(default = "KernelConfig::linear")]
    pub kernel_y: KernelConfig,
    #[serde(default = "KernelConfig::gaussian_median")]
    pub kernel_z: KernelConfig,
    /// Head mapping block outputs to the space where the label term is measured.
    #[serde(default)]
    pub projection: ProjectionSpec,
}

fn default_scope() -> ProximalScope {
    ProximalScope::Uploaded
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            lambda1_max: 1.0,
            lambda1_min: 0.1,
            lambda2_min: 0.1,
            lambda2_max: 1.0,
            mu: 0.1,
            proximal_scope: ProximalScope::Uploaded,
            kernel_x: KernelConfig::gaussian_median(),
            kernel_y: KernelConfig::linear(),
            kernel_z: KernelConfig::gaussian_median(),
            projection: ProjectionSpec::default(),
        }
    }
}

impl CurriculumSchedule {
    /// Schedule with both dependence terms switched off.
    pub fn without_dependence_terms(mut self) -> Self {
        self.lambda1_max = 0.0;
        self.lambda1_min = 0.0;
        self.lambda2_min = 0.0;
        self.lambda2_max = 0.0;
        self
    }

    pub fn validate(&self) -> Vec<(String, String)> {
        let mut issues = Vec::new();
        let mut bad = |field: &str, msg: String| issues.push((field.to_string(), msg));
        for (name, v) in [
            ("lambda1_max", self.lambda1_max),
            ("lambda1_min", self.lambda1_min),
            ("lambda2_min", self.lambda2_min),
            ("lambda2_max", self.lambda2_max),
            ("mu", self.mu),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bad(name, format!("must be a finite value ≥ 0, got {v}"));
            }
        }
        if self.lambda1_max < self.lambda1_min {
            bad(
                "lambda1_max",
                format!("must be ≥ lambda1_min ({} < {})", self.lambda1_max, self.lambda1_min),
            );
        }
        if self.lambda2_max < self.lambda2_min {
            bad(
                "lambda2_max",
                format!("must be ≥ lambda2_min ({} < {})", self.lambda2_max, self.lambda2_min),
            );
        }
        for (name, k) in [
            ("kernel_x", &self.kernel_x),
            ("kernel_y", &self.kernel_y),
            ("kernel_z", &self.kernel_z),
        ] {
            if let Err(msg) = k.validate() {
                bad(name, msg);
            }
        }
        if self.projection.hidden == 0 || self.projection.out == 0 {
            bad("projection", "widths must be ≥ 1".into());
        }
        issues
    }

    /// Whether the label term is active anywhere in the schedule.
    pub fn uses_label_term(&self) -> bool {
        self.lambda2_max > 0.0 || self.lambda2_min > 0.0
    }

    pub fn kernels(&self) -> LossKernels {
        LossKernels {
            x: self.kernel_x,
            y: self.kernel_y,
            z: self.kernel_z,
            projected: self.kernel_z,
        }
    }
}

/// `(λ1, λ2)` for block `t` of `blocks`: λ1 falls linearly from its max, λ2 rises to its max.
pub fn lambda_at(schedule: &CurriculumSchedule, t: usize, blocks: usize) -> (f64, f64) {
    let frac = (t.saturating_sub(1)) as f64 / (blocks.saturating_sub(1)).max(1) as f64;
    let l1 = schedule.lambda1_max * (1.0 - frac) + schedule.lambda1_min * frac;
    let l2 = schedule.lambda2_min * (1.0 - frac) + schedule.lambda2_max * frac;
    (l1, l2)
}

/// Kernels for the two dependence terms; `projected` applies to the head output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossKernels {
    pub x: KernelConfig,
    pub y: KernelConfig,
    pub z: KernelConfig,
    pub projected: KernelConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub nhsic_x: f64,
    pub nhsic_y: f64,
    pub proximal: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

/// Cross entropy minus the weighted dependence terms, recorded on `g`.
#[allow(clippy::too_many_arguments)]
pub fn curriculum_loss(
    g: &mut Graph,
    stage: &StageModel,
    binding: &Binding,
    x: &Tensor,
    y: &Tensor,
    lambdas: (f64, f64),
    kernels: &LossKernels,
) -> Result<LossNodes> {
    if x.rows() < 2 {
        return Err(Error::BatchTooSmall { got: x.rows(), min: 2 });
    }
    let (l1, l2) = lambdas;
    let xn = g.constant(x.clone());
    let yn = g.constant(y.clone());
    let out = stage.forward(g, binding, xn)?;
    let ce = g.softmax_cross_entropy(out.logits, y)?;
    let dep_x = kernel::nhsic_between(g, xn, &kernels.x, out.z, &kernels.z)?;
    let (p, p_cfg) = match out.projected {
        Some(p) => (p, &kernels.projected),
        None => (out.z, &kernels.z),
    };
    let dep_y = kernel::nhsic_between(g, yn, &kernels.y, p, p_cfg)?;

    let wx = g.scalar_mul(dep_x, l1)?;
    let wy = g.scalar_mul(dep_y, l2)?;
    let partial = g.sub(ce, wx)?;
    let total = g.sub(partial, wy)?;
    Ok(LossNodes {
        total,
        breakdown: LossBreakdown {
            total: g.scalar_value(total),
            ce: g.scalar_value(ce),
            nhsic_x: g.scalar_value(dep_x),
            nhsic_y: g.scalar_value(dep_y),
            proximal: 0.0,
        },
    })
}

/// Adds `(μ/2)·Σ‖θ − θ_ref‖²` over `proximal` (node, reference) pairs.
pub fn augmented_loss(g: &mut Graph, loss: LossNodes, proximal: &[(NodeId, &Tensor)], mu: f64) -> Result<LossNodes> {
    if mu == 0.0 || proximal.is_empty() {
        return Ok(loss);
    }
    let mut acc: Option<NodeId> = None;
    for &(node, reference) in proximal {
        let d = g.sq_l2_distance(node, reference)?;
        acc = Some(match acc {
            Some(a) => g.add(a, d)?,
            None => d,
        });
    }
    let penalty = g.scalar_mul(acc.expect("nonempty"), mu / 2.0)?;
    let total = g.add(loss.total, penalty)?;
    let mut breakdown = loss.breakdown;
    breakdown.proximal = g.scalar_value(penalty);
    breakdown.total = g.scalar_value(total);
    Ok(LossNodes { total, breakdown })
}

/// Binding nodes paired with their reference values for the configured scope.
pub fn proximal_pairs<'a>(
    stage: &StageModel,
    binding: &Binding,
    reference: &'a ParamStore,
    scope: ProximalScope,
) -> Result<Vec<(NodeId, &'a Tensor)>> {
    let block_keys = stage.block_keys();
    let mut pairs = Vec::new();
    for (layer, &(w, b)) in stage.trainable_layers().zip(binding.trainable()) {
        for (key, node) in [(ParamKey::weight(layer.id), w), (ParamKey::bias(layer.id), b)] {
            if scope == ProximalScope::BlockOnly && !block_keys.contains(&key) {
                continue;
            }
            let r = reference
                .get(&key)
                .ok_or_else(|| Error::shape("augmented_loss", format!("no reference value for {key}")))?;
            pairs.push((node, r));
        }
    }
    Ok(pairs)
}

/// Full local objective for one batch: curriculum loss plus proximal term.
#[allow(clippy::too_many_arguments)]
pub fn local_objective(
    g: &mut Graph,
    stage: &StageModel,
    binding: &Binding,
    x: &Tensor,
    y: &Tensor,
    lambdas: (f64, f64),
    kernels: &LossKernels,
    reference: &ParamStore,
    mu: f64,
    scope: ProximalScope,
) -> Result<LossNodes> {
    let loss = curriculum_loss(g, stage, binding, x, y, lambdas, kernels)?;
    let pairs = proximal_pairs(stage, binding, reference, scope)?;
    augmented_loss(g, loss, &pairs, mu)
}

/// Kernels with every median bandwidth replaced by its value on this batch,
/// so finite differences see the same constants as the backward pass.
pub fn frozen_bandwidths(stage: &StageModel, x: &Tensor, kernels: &LossKernels) -> Result<LossKernels> {
    use crate::kernel::{Bandwidth, KernelKind};
    let mut g = Graph::new();
    let b = stage.bind(&mut g);
    let xn = g.constant(x.clone());
    let out = stage.forward(&mut g, &b, xn)?;
    let fix = |cfg: KernelConfig, data: &Tensor| {
        if cfg.kind == KernelKind::Gaussian && cfg.bandwidth == Bandwidth::Median {
            KernelConfig {
                bandwidth: Bandwidth::Fixed(kernel::median_sigma(data).unwrap_or(1.0)),
                ..cfg
            }
        } else {
            cfg
        }
    };
    let projected = out.projected.map(|p| g.value(p).clone());
    Ok(LossKernels {
        x: fix(kernels.x, x),
        y: kernels.y,
        z: fix(kernels.z, g.value(out.z)),
        projected: match &projected {
            Some(p) => fix(kernels.projected, p),
            None => kernels.projected,
        },
    })
}

/// Max relative error of the analytic gradient of [`local_objective`] over
/// every trainable coordinate of `stage`.
#[allow(clippy::too_many_arguments)]
pub fn check_stage_gradient(
    stage: &StageModel,
    x: &Tensor,
    y: &Tensor,
    lambdas: (f64, f64),
    kernels: &LossKernels,
    reference: &ParamStore,
    mu: f64,
    scope: ProximalScope,
) -> Result<f64> {
    let kernels = frozen_bandwidths(stage, x, kernels)?;
    let mut g = Graph::new();
    let binding = stage.bind(&mut g);
    let loss = local_objective(&mut g, stage, &binding, x, y, lambdas, &kernels, reference, mu, scope)?;
    let mut grads = g.backward(loss.total)?;

    let n_layers = stage.trainable_layers().count();
    let mut worst: f64 = 0.0;
    for li in 0..n_layers {
        for part in 0..2 {
            let node = if part == 0 {
                binding.trainable()[li].0
            } else {
                binding.trainable()[li].1
            };
            let analytic = grads.take(node).expect("trainable node has a gradient");
            let layer = stage.trainable_layers().nth(li).expect("index in range");
            let base = if part == 0 {
                layer.weight.value.clone()
            } else {
                layer.bias.value.clone()
            };
            let eval = |t: Tensor| -> Result<f64> {
                let mut perturbed = stage.clone();
                let l = perturbed.trainable_layers_mut().nth(li).expect("index in range");
                if part == 0 {
                    l.weight.value = t;
                } else {
                    l.bias.value = t;
                }
                let mut g = Graph::new();
                let b = perturbed.bind(&mut g);
                let loss = local_objective(&mut g, &perturbed, &b, x, y, lambdas, &kernels, reference, mu, scope)?;
                Ok(loss.breakdown.total)
            };
            worst = worst.max(compare_with_central_differences(
                eval,
                analytic.data(),
                &base,
                DEFAULT_STEP,
            )?);
        }
    }
    Ok(worst)
}

fn perturbed_reference(stage: &StageModel, rng: &mut impl rand::Rng) -> ParamStore {
    let mut r = stage.export_trainable();
    for v in r.values_mut() {
        for x in v.data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
    r
}

pub(crate) fn gradient_checks(tol: f64) -> Vec<CheckCase> {
    use crate::model::{assemble_stage, init_global, partition, GlobalModelSpec, StageOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    [1usize, 4]
        .into_iter()
        .map(|t| {
            CheckCase::new(format!("local objective stage {t}/4 (all trainable)"), tol, move || {
                let spec = GlobalModelSpec::desk_default();
                let p = partition(&spec, 4)?;
                let mut rng = ChaCha8Rng::seed_from_u64(900 + t as u64);
                let store = init_global(&spec, &mut rng);
                let opts = StageOptions {
                    boundary_width: 1,
                    projection: Some(ProjectionSpec::default()),
                };
                let stage = assemble_stage(&spec, &p, t, &store, &opts, &mut rng)?;
                let x = crate::gradcheck::random_tensor(&mut rng, &[8, 16], 1.5);
                let y = kernel::one_hot_rows(8, 8);
                let schedule = CurriculumSchedule::default();
                let reference = perturbed_reference(&stage, &mut rng);
                check_stage_gradient(
                    &stage,
                    &x,
                    &y,
                    lambda_at(&schedule, t, 4),
                    &schedule.kernels(),
                    &reference,
                    schedule.mu,
                    schedule.proximal_scope,
                )
            })
        })
        .collect()
}
