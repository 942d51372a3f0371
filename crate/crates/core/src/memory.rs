//! Analytic peak training-memory accounting.
//!
//! Charges every parameter as weights, trainable parameters again for the
//! gradient and the momentum buffer, and the activations kept for backward:
//! the inputs and outputs of trainable layers at the given batch size. A
//! frozen prefix contributes only the activation it hands to the first
//! trainable layer. Transient temporaries are not modeled.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{
    assemble_stage, full_composition, init_global, partition, BlockPartition, GlobalModelSpec, StageOptions,
};

/// Bytes of one `f64`.
pub const BYTES_PER_SCALAR: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerFootprint {
    pub in_width: usize,
    pub out_width: usize,
    pub params: u64,
    pub trainable: bool,
}

impl LayerFootprint {
    pub fn dense(in_width: usize, out_width: usize, trainable: bool) -> Self {
        Self {
            in_width,
            out_width,
            params: (in_width * out_width + out_width) as u64,
            trainable,
        }
    }
}

/// Layers wired by activation tensors. Tensor 0 is the model input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Composition {
    tensor_widths: Vec<usize>,
    layers: Vec<(LayerFootprint, usize, usize)>,
}

impl Composition {
    pub fn new(input_width: usize) -> Self {
        Self {
            tensor_widths: vec![input_width],
            layers: Vec::new(),
        }
    }

    /// Appends a layer reading tensor `input`; returns its output tensor.
    pub fn push(&mut self, layer: LayerFootprint, input: usize) -> usize {
        debug_assert_eq!(self.tensor_widths[input], layer.in_width);
        self.tensor_widths.push(layer.out_width);
        let out = self.tensor_widths.len() - 1;
        self.layers.push((layer, input, out));
        out
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerFootprint> {
        self.layers.iter().map(|(l, _, _)| l)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Marks layer `index` trainable.
    pub fn make_trainable(&mut self, index: usize) {
        self.layers[index].0.trainable = true;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryEstimate {
    pub weights_bytes: u64,
    pub grads_bytes: u64,
    pub optimizer_bytes: u64,
    pub activations_bytes: u64,
    pub total_bytes: u64,
}

pub fn estimate(comp: &Composition, batch: usize, bytes_per_scalar: u64) -> MemoryEstimate {
    let all: u64 = comp.layers().map(|l| l.params).sum();
    let trainable: u64 = comp.layers().filter(|l| l.trainable).map(|l| l.params).sum();

    let mut retained = BTreeSet::new();
    for (l, input, output) in &comp.layers {
        if l.trainable {
            retained.insert(*input);
            retained.insert(*output);
        }
    }
    let act_scalars: u64 = retained.iter().map(|&t| comp.tensor_widths[t] as u64).sum::<u64>() * batch as u64;

    let weights_bytes = all * bytes_per_scalar;
    let grads_bytes = trainable * bytes_per_scalar;
    let optimizer_bytes = trainable * bytes_per_scalar;
    let activations_bytes = act_scalars * bytes_per_scalar;
    MemoryEstimate {
        weights_bytes,
        grads_bytes,
        optimizer_bytes,
        activations_bytes,
        total_bytes: weights_bytes + grads_bytes + optimizer_bytes + activations_bytes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageMemory {
    pub stage: usize,
    pub estimate: MemoryEstimate,
    pub reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionReport {
    pub full: MemoryEstimate,
    pub stages: Vec<StageMemory>,
}

/// Composition of stage `t`; only shapes matter, so values are placeholders.
pub fn stage_composition(
    spec: &GlobalModelSpec,
    partition: &BlockPartition,
    t: usize,
    opts: &StageOptions,
) -> Result<Composition> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let store = init_global(spec, &mut rng);
    Ok(assemble_stage(spec, partition, t, &store, opts, &mut rng)?.composition())
}

/// Memory of training the whole model as one block under the same options,
/// i.e. the full model plus whatever projection head the loss attaches.
pub fn full_reference(spec: &GlobalModelSpec, opts: &StageOptions, batch: usize) -> Result<MemoryEstimate> {
    let single = partition(spec, 1)?;
    Ok(estimate(
        &stage_composition(spec, &single, 1, opts)?,
        batch,
        BYTES_PER_SCALAR,
    ))
}

/// Plain end-to-end training of the global model, no auxiliary heads.
pub fn full_model_estimate(spec: &GlobalModelSpec, batch: usize) -> MemoryEstimate {
    estimate(&full_composition(spec), batch, BYTES_PER_SCALAR)
}

pub fn reduction_report(
    spec: &GlobalModelSpec,
    partition: &BlockPartition,
    opts: &StageOptions,
    batch: usize,
) -> Result<ReductionReport> {
    let full = full_reference(spec, opts, batch)?;
    let stages = (1..=partition.num_blocks())
        .map(|t| {
            let e = estimate(&stage_composition(spec, partition, t, opts)?, batch, BYTES_PER_SCALAR);
            Ok(StageMemory {
                stage: t,
                estimate: e,
                reduction_pct: 100.0 * (1.0 - e.total_bytes as f64 / full.total_bytes as f64),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReductionReport { full, stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProjectionSpec;

    fn opts() -> StageOptions {
        StageOptions {
            boundary_width: 1,
            projection: Some(ProjectionSpec::default()),
        }
    }

    #[test]
    fn single_affine_layer() {
        let mut c = Composition::new(4);
        c.push(LayerFootprint::dense(4, 3, true), 0);
        let e = estimate(&c, 2, 8);
        assert_eq!(
            e,
            MemoryEstimate {
                weights_bytes: 120,
                grads_bytes: 120,
                optimizer_bytes: 120,
                activations_bytes: 112,
                total_bytes: 472,
            }
        );
    }

    #[test]
    fn frozen_layers_cost_only_weights() {
        let mut c = Composition::new(4);
        c.push(LayerFootprint::dense(4, 3, false), 0);
        let e = estimate(&c, 2, 8);
        assert_eq!((e.grads_bytes, e.optimizer_bytes, e.activations_bytes), (0, 0, 0));
        assert_eq!(e.weights_bytes, 120);
    }

    #[test]
    fn frozen_prefix_charges_one_boundary_activation() {
        let mut c = Composition::new(4);
        let h = c.push(LayerFootprint::dense(4, 6, false), 0);
        c.push(LayerFootprint::dense(6, 2, true), h);
        // boundary activation (6) + output (2), input X not retained
        assert_eq!(estimate(&c, 3, 1).activations_bytes, 3 * 8);
    }

    #[test]
    fn single_block_partition_equals_full_reference() {
        let spec = GlobalModelSpec::desk_default();
        let p = partition(&spec, 1).unwrap();
        let r = reduction_report(&spec, &p, &opts(), 16).unwrap();
        assert_eq!(r.stages.len(), 1);
        assert_eq!(r.stages[0].estimate, r.full);
        assert_eq!(r.stages[0].reduction_pct, 0.0);
    }

    #[test]
    fn every_early_stage_is_cheaper() {
        let spec = GlobalModelSpec::desk_default();
        let p = partition(&spec, 4).unwrap();
        let r = reduction_report(&spec, &p, &opts(), 16).unwrap();
        for s in &r.stages[..3] {
            assert!(s.reduction_pct > 0.0, "{s:?}");
        }
        assert!(r.stages.iter().all(|s| s.reduction_pct < 100.0));
    }

    #[test]
    fn widening_last_block_raises_stage_one_reduction() {
        let narrow = GlobalModelSpec::desk_default();
        let wide = GlobalModelSpec::mlp(&[16, 32, 32, 32, 32, 32, 32, 96, 8]).unwrap();
        let pn = partition(&narrow, 4).unwrap();
        let pw = partition(&wide, 4).unwrap();
        let rn = reduction_report(&narrow, &pn, &opts(), 16).unwrap();
        let rw = reduction_report(&wide, &pw, &opts(), 16).unwrap();
        assert!(rw.full.total_bytes > rn.full.total_bytes);
        assert!(rw.stages[0].reduction_pct > rn.stages[0].reduction_pct);
    }
}
