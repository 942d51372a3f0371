//! Global model description, block partitioning and stage assembly.
//!
//! A stage model for block `t` is the frozen prefix (blocks `1..t`), the
//! trainable boundary layers at the tail of block `t−1`, the trainable block
//! itself, an output module standing in for the blocks after `t`, and the
//! projection head used by the label-dependence term.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::memory::{Composition, LayerFootprint};
use crate::optim::Parameter;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub in_width: usize,
    pub out_width: usize,
    pub relu: bool,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.in_width * self.out_width + self.out_width
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalModelSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl GlobalModelSpec {
    /// Dense chain over `widths` with ReLU after every layer but the last.
    pub fn mlp(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Model("an MLP needs at least input and output widths".into()));
        }
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                in_width: w[0],
                out_width: w[1],
                relu: i + 1 < n,
            })
            .collect();
        let spec = Self {
            input_dim: widths[0],
            num_classes: widths[n],
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Eight dense layers, 16 inputs, hidden width 32, eight classes.
    pub fn desk_default() -> Self {
        Self::mlp(&[16, 32, 32, 32, 32, 32, 32, 32, 8]).expect("valid default")
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Model("model has no layers".into()))?;
        if first.in_width != self.input_dim {
            return Err(Error::Model(format!(
                "first layer takes {} inputs, input_dim is {}",
                first.in_width, self.input_dim
            )));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_width != pair[1].in_width {
                return Err(Error::Model(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    pair[0].out_width,
                    i + 1,
                    pair[1].in_width
                )));
            }
        }
        if self.layers.iter().any(|l| l.in_width == 0 || l.out_width == 0) {
            return Err(Error::Model("layer widths must be positive".into()));
        }
        let last = self.layers.last().expect("nonempty");
        if last.out_width != self.num_classes {
            return Err(Error::Model(format!(
                "last layer outputs {} but num_classes is {}",
                last.out_width, self.num_classes
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }
}

/// Contiguous, ordered, covering split of the layer list. Blocks are 1-indexed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    ranges: Vec<Range<usize>>,
}

impl BlockPartition {
    pub fn num_blocks(&self) -> usize {
        self.ranges.len()
    }

    pub fn block(&self, t: usize) -> Range<usize> {
        self.ranges[t - 1].clone()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    pub fn block_of_layer(&self, layer: usize) -> Option<usize> {
        self.ranges.iter().position(|r| r.contains(&layer)).map(|i| i + 1)
    }
}

/// Splits the layers into `blocks` near-equal runs, earlier blocks taking the remainder.
pub fn partition(spec: &GlobalModelSpec, blocks: usize) -> Result<BlockPartition> {
    let n = spec.layers.len();
    if blocks == 0 || blocks > n {
        return Err(Error::Partition { layers: n, blocks });
    }
    let (base, extra) = (n / blocks, n % blocks);
    let mut ranges = Vec::with_capacity(blocks);
    let mut start = 0;
    for b in 0..blocks {
        let len = base + usize::from(b < extra);
        ranges.push(start..start + len);
        start += len;
    }
    Ok(BlockPartition { ranges })
}

/// Last `min(k, |block t−1|)` layers of block `t−1`; empty for the first block.
pub fn boundary_layers(partition: &BlockPartition, t: usize, k: usize) -> Vec<usize> {
    if t <= 1 || k == 0 {
        return Vec::new();
    }
    let prev = partition.block(t - 1);
    let take = k.min(prev.len());
    (prev.end - take..prev.end).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HeadModule {
    /// Stand-in for global block `i`.
    Basic(usize),
    Classifier,
    Projection(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerId {
    Global(usize),
    Head { stage: usize, module: HeadModule },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Part {
    Weight,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: LayerId,
    pub part: Part,
}

impl ParamKey {
    pub fn weight(layer: LayerId) -> Self {
        Self {
            layer,
            part: Part::Weight,
        }
    }

    pub fn bias(layer: LayerId) -> Self {
        Self {
            layer,
            part: Part::Bias,
        }
    }
}

impl std::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let part = match self.part {
            Part::Weight => "w",
            Part::Bias => "b",
        };
        match self.layer {
            LayerId::Global(i) => write!(f, "layer{i}.{part}"),
            LayerId::Head { stage, module } => match module {
                HeadModule::Basic(b) => write!(f, "stage{stage}.basic{b}.{part}"),
                HeadModule::Classifier => write!(f, "stage{stage}.classifier.{part}"),
                HeadModule::Projection(j) => write!(f, "stage{stage}.proj{j}.{part}"),
            },
        }
    }
}

/// Flat parameter store keyed by layer and part.
pub type ParamStore = BTreeMap<ParamKey, Tensor>;

/// Uniform Glorot weights, zero bias.
pub fn init_layer(rng: &mut impl Rng, in_width: usize, out_width: usize) -> (Tensor, Tensor) {
    let a = (6.0 / (in_width + out_width) as f64).sqrt();
    let data = (0..in_width * out_width).map(|_| rng.random_range(-a..a)).collect();
    (
        Tensor::from_raw(vec![in_width, out_width], data),
        Tensor::zeros(&[out_width]),
    )
}

/// Fresh values for every global layer, in layer order.
pub fn init_global(spec: &GlobalModelSpec, rng: &mut impl Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for (i, l) in spec.layers.iter().enumerate() {
        let (w, b) = init_layer(rng, l.in_width, l.out_width);
        store.insert(ParamKey::weight(LayerId::Global(i)), w);
        store.insert(ParamKey::bias(LayerId::Global(i)), b);
    }
    store
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub id: LayerId,
    pub weight: Parameter,
    pub bias: Parameter,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenDense {
    pub id: LayerId,
    pub weight: Tensor,
    pub bias: Tensor,
    pub relu: bool,
}

impl Dense {
    fn new(id: LayerId, weight: Tensor, bias: Tensor, relu: bool) -> Self {
        Self {
            id,
            weight: Parameter::new(weight),
            bias: Parameter::new(bias),
            relu,
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.value.len() + self.bias.value.len()
    }
}

fn affine(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId, relu: bool) -> Result<NodeId> {
    let h = g.matmul(x, w)?;
    let h = g.add_row(h, b)?;
    if relu {
        g.relu(h)
    } else {
        Ok(h)
    }
}

/// Forward-only affine layer.
pub(crate) fn apply_layer(x: &Tensor, w: &Tensor, b: &Tensor, relu: bool) -> Result<Tensor> {
    let mut h = x.matmul(w)?;
    let n = h.cols();
    for (i, v) in h.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % n];
        if relu && *v <= 0.0 {
            *v = 0.0;
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputModule {
    /// One stand-in layer per block after the current one.
    pub basic_layers: Vec<Dense>,
    /// `None` at the last stage: block T ends in the global classifier.
    pub classifier: Option<Dense>,
}

impl OutputModule {
    pub fn param_count(&self) -> usize {
        self.basic_layers.iter().map(Dense::param_count).sum::<usize>()
            + self.classifier.as_ref().map_or(0, Dense::param_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSpec {
    pub hidden: usize,
    pub out: usize,
}

impl Default for ProjectionSpec {
    fn default() -> Self {
        Self { hidden: 32, out: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageOptions {
    pub boundary_width: usize,
    pub projection: Option<ProjectionSpec>,
}

fn take_or_init(
    store: &ParamStore,
    id: LayerId,
    in_width: usize,
    out_width: usize,
    relu: bool,
    rng: &mut impl Rng,
) -> Dense {
    let wk = ParamKey::weight(id);
    let bk = ParamKey::bias(id);
    match (store.get(&wk), store.get(&bk)) {
        (Some(w), Some(b)) if w.shape() == [in_width, out_width] && b.shape() == [out_width] => {
            Dense::new(id, w.clone(), b.clone(), relu)
        }
        _ => {
            let (w, b) = init_layer(rng, in_width, out_width);
            Dense::new(id, w, b, relu)
        }
    }
}

/// Builds the output module for stage `t`: an affine+ReLU stand-in for each
/// later block followed by a classifier, loading values from `store` where
/// present and drawing fresh ones from `rng` otherwise.
pub fn build_output_module(
    spec: &GlobalModelSpec,
    partition: &BlockPartition,
    t: usize,
    store: &ParamStore,
    rng: &mut impl Rng,
) -> Result<OutputModule> {
    let blocks = partition.num_blocks();
    if t == 0 || t > blocks {
        return Err(Error::Model(format!("stage {t} outside 1..={blocks}")));
    }
    if t == blocks {
        return Ok(OutputModule {
            basic_layers: Vec::new(),
            classifier: None,
        });
    }
    let mut basic_layers = Vec::with_capacity(blocks - t);
    for i in (t + 1)..=blocks {
        let r = partition.block(i);
        let in_width = spec.layers[r.start].in_width;
        let out_width = spec.layers[r.end - 1].out_width;
        basic_layers.push(take_or_init(
            store,
            LayerId::Head {
                stage: t,
                module: HeadModule::Basic(i),
            },
            in_width,
            out_width,
            true,
            rng,
        ));
    }
    let final_width = basic_layers.last().expect("t < blocks").out_width();
    let classifier = take_or_init(
        store,
        LayerId::Head {
            stage: t,
            module: HeadModule::Classifier,
        },
        final_width,
        spec.num_classes,
        false,
        rng,
    );
    Ok(OutputModule {
        basic_layers,
        classifier: Some(classifier),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageModel {
    pub stage: usize,
    pub num_blocks: usize,
    pub frozen_prefix: Vec<FrozenDense>,
    pub boundary_layers: Vec<Dense>,
    pub trainable_block: Vec<Dense>,
    pub output_module: OutputModule,
    pub projection_head: Option<Vec<Dense>>,
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone)]
pub struct Binding {
    frozen: Vec<(NodeId, NodeId)>,
    trainable: Vec<(NodeId, NodeId)>,
}

impl Binding {
    /// Weight/bias nodes of trainable layers, in [`StageModel::trainable_layers`] order.
    pub fn trainable(&self) -> &[(NodeId, NodeId)] {
        &self.trainable
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StageOutputs {
    /// Output of the trainable block.
    pub z: NodeId,
    pub logits: NodeId,
    pub projected: Option<NodeId>,
}

/// Assembles the stage-`t` model from the global store.
///
/// Layers of blocks before `t` must already be present. Block `t`, the stage's
/// output module and projection head are initialized from `rng` when absent.
pub fn assemble_stage(
    spec: &GlobalModelSpec,
    partition: &BlockPartition,
    t: usize,
    store: &ParamStore,
    opts: &StageOptions,
    rng: &mut impl Rng,
) -> Result<StageModel> {
    let blocks = partition.num_blocks();
    if t == 0 || t > blocks {
        return Err(Error::Model(format!("stage {t} outside 1..={blocks}")));
    }
    let boundary = boundary_layers(partition, t, opts.boundary_width);
    let prefix_end = partition.block(t).start;

    let mut frozen_prefix = Vec::new();
    let mut boundary_layers = Vec::new();
    for layer in 0..prefix_end {
        let id = LayerId::Global(layer);
        let (Some(w), Some(b)) = (store.get(&ParamKey::weight(id)), store.get(&ParamKey::bias(id))) else {
            return Err(Error::MissingParameters { stage: t, layer });
        };
        let relu = spec.layers[layer].relu;
        if boundary.contains(&layer) {
            boundary_layers.push(Dense::new(id, w.clone(), b.clone(), relu));
        } else {
            frozen_prefix.push(FrozenDense {
                id,
                weight: w.clone(),
                bias: b.clone(),
                relu,
            });
        }
    }

    let trainable_block = partition
        .block(t)
        .map(|layer| {
            let l = spec.layers[layer];
            take_or_init(store, LayerId::Global(layer), l.in_width, l.out_width, l.relu, rng)
        })
        .collect::<Vec<_>>();

    let output_module = build_output_module(spec, partition, t, store, rng)?;

    let projection_head = opts.projection.map(|p| {
        let z_width = trainable_block.last().expect("nonempty block").out_width();
        let widths = [z_width, p.hidden, p.hidden, p.out];
        (0..3)
            .map(|j| {
                take_or_init(
                    store,
                    LayerId::Head {
                        stage: t,
                        module: HeadModule::Projection(j),
                    },
                    widths[j],
                    widths[j + 1],
                    j < 2,
                    rng,
                )
            })
            .collect()
    });

    Ok(StageModel {
        stage: t,
        num_blocks: blocks,
        frozen_prefix,
        boundary_layers,
        trainable_block,
        output_module,
        projection_head,
    })
}

impl StageModel {
    /// Trainable layers in upload order: boundary, block, output module, projection head.
    pub fn trainable_layers(&self) -> impl Iterator<Item = &Dense> {
        self.boundary_layers
            .iter()
            .chain(&self.trainable_block)
            .chain(&self.output_module.basic_layers)
            .chain(self.output_module.classifier.iter())
            .chain(self.projection_head.iter().flatten())
    }

    pub fn trainable_layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.boundary_layers
            .iter_mut()
            .chain(&mut self.trainable_block)
            .chain(&mut self.output_module.basic_layers)
            .chain(self.output_module.classifier.iter_mut())
            .chain(self.projection_head.iter_mut().flatten())
    }

    pub fn trainable_param_count(&self) -> usize {
        self.trainable_layers().map(Dense::param_count).sum()
    }

    pub fn frozen_param_count(&self) -> usize {
        self.frozen_prefix.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.trainable_param_count() + self.frozen_param_count()
    }

    /// Current values of everything this stage uploads.
    pub fn export_trainable(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for l in self.trainable_layers() {
            out.insert(ParamKey::weight(l.id), l.weight.value.clone());
            out.insert(ParamKey::bias(l.id), l.bias.value.clone());
        }
        out
    }

    /// Keys of everything this stage uploads.
    pub fn trainable_keys(&self) -> Vec<ParamKey> {
        self.trainable_layers()
            .flat_map(|l| [ParamKey::weight(l.id), ParamKey::bias(l.id)])
            .collect()
    }

    /// Keys belonging to block `t` only.
    pub fn block_keys(&self) -> Vec<ParamKey> {
        self.trainable_block
            .iter()
            .flat_map(|l| [ParamKey::weight(l.id), ParamKey::bias(l.id)])
            .collect()
    }

    pub fn bind(&self, g: &mut Graph) -> Binding {
        let frozen = self
            .frozen_prefix
            .iter()
            .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
            .collect();
        let trainable = self
            .trainable_layers()
            .map(|l| (g.param(l.weight.value.clone()), g.param(l.bias.value.clone())))
            .collect();
        Binding { frozen, trainable }
    }

    pub fn forward(&self, g: &mut Graph, binding: &Binding, x: NodeId) -> Result<StageOutputs> {
        let mut h = x;
        for (l, &(w, b)) in self.frozen_prefix.iter().zip(&binding.frozen) {
            h = affine(g, h, w, b, l.relu)?;
        }
        let mut nodes = binding.trainable.iter();
        for l in self.boundary_layers.iter().chain(&self.trainable_block) {
            let &(w, b) = nodes.next().expect("binding matches model");
            h = affine(g, h, w, b, l.relu)?;
        }
        let z = h;
        for l in self
            .output_module
            .basic_layers
            .iter()
            .chain(self.output_module.classifier.iter())
        {
            let &(w, b) = nodes.next().expect("binding matches model");
            h = affine(g, h, w, b, l.relu)?;
        }
        let logits = h;
        let projected = match &self.projection_head {
            Some(head) => {
                let mut p = z;
                for l in head {
                    let &(w, b) = nodes.next().expect("binding matches model");
                    p = affine(g, p, w, b, l.relu)?;
                }
                Some(p)
            }
            None => None,
        };
        Ok(StageOutputs { z, logits, projected })
    }

    /// Forward-only logits.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.frozen_prefix {
            h = apply_layer(&h, &l.weight, &l.bias, l.relu)?;
        }
        for l in self
            .boundary_layers
            .iter()
            .chain(&self.trainable_block)
            .chain(&self.output_module.basic_layers)
            .chain(self.output_module.classifier.iter())
        {
            h = apply_layer(&h, &l.weight.value, &l.bias.value, l.relu)?;
        }
        Ok(h)
    }

    /// Layer graph for memory accounting: the main chain plus the projection
    /// branch off the block output.
    pub fn composition(&self) -> Composition {
        let mut comp = Composition::new(
            self.frozen_prefix
                .first()
                .map(|l| l.weight.shape()[0])
                .or_else(|| self.trainable_layers().next().map(Dense::in_width))
                .unwrap_or(0),
        );
        let mut cur = 0;
        for l in &self.frozen_prefix {
            let (i, o) = (l.weight.shape()[0], l.weight.shape()[1]);
            cur = comp.push(LayerFootprint::dense(i, o, false), cur);
        }
        for l in self.boundary_layers.iter().chain(&self.trainable_block) {
            cur = comp.push(LayerFootprint::dense(l.in_width(), l.out_width(), true), cur);
        }
        let z = cur;
        for l in self
            .output_module
            .basic_layers
            .iter()
            .chain(self.output_module.classifier.iter())
        {
            cur = comp.push(LayerFootprint::dense(l.in_width(), l.out_width(), true), cur);
        }
        if let Some(head) = &self.projection_head {
            let mut p = z;
            for l in head {
                p = comp.push(LayerFootprint::dense(l.in_width(), l.out_width(), true), p);
            }
        }
        comp
    }
}

/// Forward pass of the full global model, returning every layer's output.
pub fn global_layer_outputs(spec: &GlobalModelSpec, store: &ParamStore, x: &Tensor) -> Result<Vec<Tensor>> {
    let mut outs = Vec::with_capacity(spec.layers.len());
    let mut h = x.clone();
    for (i, l) in spec.layers.iter().enumerate() {
        let id = LayerId::Global(i);
        let (Some(w), Some(b)) = (store.get(&ParamKey::weight(id)), store.get(&ParamKey::bias(id))) else {
            return Err(Error::MissingParameters {
                stage: spec.layers.len(),
                layer: i,
            });
        };
        h = apply_layer(&h, w, b, l.relu)?;
        outs.push(h.clone());
    }
    Ok(outs)
}

/// Full model trained end to end with every layer trainable.
pub fn full_composition(spec: &GlobalModelSpec) -> Composition {
    let mut comp = Composition::new(spec.input_dim);
    let mut cur = 0;
    for l in &spec.layers {
        cur = comp.push(LayerFootprint::dense(l.in_width, l.out_width, true), cur);
    }
    comp
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn opts(k: usize) -> StageOptions {
        StageOptions {
            boundary_width: k,
            projection: Some(ProjectionSpec::default()),
        }
    }

    #[test]
    fn partition_sizes() {
        let spec = GlobalModelSpec::desk_default();
        assert_eq!(partition(&spec, 4).unwrap().sizes(), vec![2, 2, 2, 2]);
        assert_eq!(partition(&spec, 1).unwrap().block(1), 0..8);
        let seven = GlobalModelSpec::mlp(&[4, 5, 5, 5, 5, 5, 5, 3]).unwrap();
        assert_eq!(partition(&seven, 3).unwrap().sizes(), vec![3, 2, 2]);
        assert_eq!(
            partition(&seven, 8).unwrap_err(),
            Error::Partition { layers: 7, blocks: 8 }
        );
    }

    #[test]
    fn boundary_selection() {
        let spec = GlobalModelSpec::desk_default();
        let p = partition(&spec, 4).unwrap();
        assert!(boundary_layers(&p, 1, 3).is_empty());
        assert!(boundary_layers(&p, 3, 0).is_empty());
        // 0-based layer 1 is the second layer of block 1
        assert_eq!(boundary_layers(&p, 2, 1), vec![1]);
        assert_eq!(boundary_layers(&p, 2, 5), vec![0, 1]);
    }

    #[test]
    fn output_module_shapes() {
        let spec = GlobalModelSpec::desk_default();
        let p = partition(&spec, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = ParamStore::new();
        let om = build_output_module(&spec, &p, 1, &store, &mut rng).unwrap();
        assert_eq!(om.basic_layers.len(), 3);
        assert!(om.classifier.is_some());
        let om = build_output_module(&spec, &p, 3, &store, &mut rng).unwrap();
        assert_eq!(om.basic_layers.len(), 1);
        assert_eq!(om.basic_layers[0].in_width(), 32);
        assert_eq!(om.basic_layers[0].out_width(), 8);
        let om = build_output_module(&spec, &p, 4, &store, &mut rng).unwrap();
        assert!(om.basic_layers.is_empty() && om.classifier.is_none());
    }

    #[test]
    fn first_stage_has_no_prefix() {
        let spec = GlobalModelSpec::desk_default();
        let p = partition(&spec, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stage = assemble_stage(&spec, &p, 1, &ParamStore::new(), &opts(1), &mut rng).unwrap();
        assert!(stage.frozen_prefix.is_empty());
        assert!(stage.boundary_layers.is_empty());
        assert_eq!(stage.trainable_block.len(), 2);
    }

    #[test]
    fn later_stage_needs_prefix() {
        let spec = GlobalModelSpec::desk_default();
        let p = partition(&spec, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = assemble_stage(&spec, &p, 2, &ParamStore::new(), &opts(1), &mut rng).unwrap_err();
        assert_eq!(err, Error::MissingParameters { stage: 2, layer: 0 });
    }

    #[test]
    fn prefix_loads_server_values_exactly() {
        let spec = GlobalModelSpec::desk_default();
        let p = partition(&spec, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = init_global(&spec, &mut rng);
        let stage = assemble_stage(&spec, &p, 2, &store, &opts(1), &mut rng).unwrap();
        assert_eq!(stage.frozen_prefix.len(), 1);
        assert!(stage.frozen_prefix[0]
            .weight
            .bit_eq(&store[&ParamKey::weight(LayerId::Global(0))]));
        assert_eq!(stage.boundary_layers[0].id, LayerId::Global(1));
        assert!(stage.boundary_layers[0]
            .weight
            .value
            .bit_eq(&store[&ParamKey::weight(LayerId::Global(1))]));
    }

    #[test]
    fn last_stage_is_full_depth() {
        let spec = GlobalModelSpec::desk_default();
        let p = partition(&spec, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = init_global(&spec, &mut rng);
        let stage = assemble_stage(&spec, &p, 4, &store, &opts(1), &mut rng).unwrap();
        let head: usize = stage
            .projection_head
            .as_ref()
            .unwrap()
            .iter()
            .map(Dense::param_count)
            .sum();
        assert_eq!(stage.output_module.param_count(), 0);
        assert_eq!(stage.param_count(), spec.param_count() + head);
    }

    #[test]
    fn every_stage_maps_inputs_to_class_logits() {
        let spec = GlobalModelSpec::desk_default();
        let p = partition(&spec, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let store = init_global(&spec, &mut rng);
        let x = crate::gradcheck::random_tensor(&mut rng, &[5, 16], 1.0);
        for t in 1..=4 {
            let stage = assemble_stage(&spec, &p, t, &store, &opts(1), &mut rng).unwrap();
            assert_eq!(stage.predict(&x).unwrap().shape(), &[5, 8]);
            let mut g = Graph::new();
            let b = stage.bind(&mut g);
            let xn = g.constant(x.clone());
            let out = stage.forward(&mut g, &b, xn).unwrap();
            assert_eq!(g.value(out.logits), &stage.predict(&x).unwrap());
            assert_eq!(g.value(out.projected.unwrap()).shape(), &[5, 8]);
        }
    }

    #[test]
    fn stages_train_fewer_parameters_than_full_model() {
        let spec = GlobalModelSpec::desk_default();
        let p = partition(&spec, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let store = init_global(&spec, &mut rng);
        for t in 1..4 {
            let stage = assemble_stage(&spec, &p, t, &store, &opts(1), &mut rng).unwrap();
            assert!(stage.trainable_param_count() < spec.param_count(), "stage {t}");
        }
    }

    #[test]
    fn frozen_prefix_gets_no_gradient() {
        let spec = GlobalModelSpec::desk_default();
        let p = partition(&spec, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let store = init_global(&spec, &mut rng);
        let stage = assemble_stage(&spec, &p, 3, &store, &opts(1), &mut rng).unwrap();
        let x = crate::gradcheck::random_tensor(&mut rng, &[4, 16], 1.0);
        let mut g = Graph::new();
        let b = stage.bind(&mut g);
        let xn = g.constant(x);
        let out = stage.forward(&mut g, &b, xn).unwrap();
        let s = g.sum(out.logits).unwrap();
        let grads = g.backward(s).unwrap();
        for &(w, bias) in &b.frozen {
            assert!(grads.get(w).is_none() && grads.get(bias).is_none());
        }
        // boundary layer (layer 3) receives a gradient
        assert!(grads.get(b.trainable()[0].0).is_some());
    }

    #[test]
    fn mlp_validation() {
        let mut spec = GlobalModelSpec::desk_default();
        spec.layers[3].in_width = 7;
        assert!(spec.validate().is_err());
        let mut spec = GlobalModelSpec::desk_default();
        spec.num_classes = 3;
        assert!(spec.validate().is_err());
    }
}
