//! Federated rounds: memory-aware client selection, local training,
//! weighted aggregation and per-round instrumentation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::config::{CapacityTier, DataSource, ExperimentConfig, DEFAULT_BLOCKS};
use crate::curriculum::{lambda_at, local_objective, CurriculumSchedule, LossBreakdown, LossKernels, ProximalScope};
use crate::data::{self, Dataset};
use crate::diagnostics::Warning;
use crate::error::{Error, Result};
use crate::harmonizer::{Mode, OutputModulePolicy, Scheduler, TrainingPlan};
use crate::kernel;
use crate::memory::{self, estimate, BYTES_PER_SCALAR};
use crate::model::{
    assemble_stage, global_layer_outputs, init_global, partition, BlockPartition, Dense, GlobalModelSpec, LayerId,
    ParamStore, StageModel, StageOptions,
};
use crate::optim::{clip_grad_norm, sgd_step, SgdConfig};
use crate::tensor::Tensor;

/// Independent generator streams, so no draw depends on execution order.
pub mod streams {
    pub const SPLIT: u64 = u64::MAX;
    pub const PARTITION: u64 = u64::MAX - 1;
    pub const CAPACITIES: u64 = u64::MAX - 2;
    pub const INIT: u64 = u64::MAX - 3;
    pub const SELECT: u64 = u64::MAX - 4;
    pub const HEADS: u64 = u64::MAX - 5;
    pub const PROBE: u64 = u64::MAX - 6;
    pub const DATA: u64 = u64::MAX - 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `(seed, round, stream)`; client ids are used directly as streams.
pub fn stream_rng(seed: u64, round: usize, stream: u64) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(splitmix64(seed) ^ round as u64) ^ stream);
    ChaCha8Rng::seed_from_u64(s)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientState {
    pub id: usize,
    pub indices: Vec<usize>,
    pub memory_capacity: u64,
}

/// Exact-quota assignment: tier `i` gets its share of `n` clients by largest
/// remainder, then the capacities are shuffled across client ids.
pub fn assign_capacities(n: usize, tiers: &[CapacityTier], rng: &mut impl Rng) -> Vec<u64> {
    let total: f64 = tiers.iter().map(|t| t.share).sum();
    let quotas: Vec<f64> = tiers.iter().map(|t| t.share / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..tiers.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[i] += 1;
        missing -= 1;
    }
    let mut caps: Vec<u64> = tiers
        .iter()
        .zip(&counts)
        .flat_map(|(t, &c)| std::iter::repeat_n(t.bytes, c))
        .collect();
    caps.shuffle(rng);
    caps
}

/// Ids of clients whose capacity covers `requirement`, ascending.
pub fn eligible_pool(clients: &[ClientState], requirement: u64) -> Vec<usize> {
    clients
        .iter()
        .filter(|c| c.memory_capacity >= requirement)
        .map(|c| c.id)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub clients: Vec<usize>,
    pub eligible: usize,
    pub warning: Option<Warning>,
}

/// Uniform sample of `ceil(fraction·N)` eligible clients, sorted by id.
pub fn select_clients(
    clients: &[ClientState],
    requirement: u64,
    fraction: f64,
    stage: usize,
    rng: &mut impl Rng,
) -> Result<Selection> {
    let pool = eligible_pool(clients, requirement);
    if pool.is_empty() {
        return Err(Error::EmptyEligiblePool {
            stage,
            required: requirement,
            largest: clients.iter().map(|c| c.memory_capacity).max().unwrap_or(0),
        });
    }
    let want = ((fraction * clients.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    if pool.len() <= want {
        let warning = (pool.len() < want).then_some(Warning::SmallEligiblePool {
            stage,
            eligible: pool.len(),
            requested: want,
        });
        return Ok(Selection {
            eligible: pool.len(),
            clients: pool,
            warning,
        });
    }
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, pool.len(), want)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    chosen.sort_unstable();
    Ok(Selection {
        clients: chosen,
        eligible: pool.len(),
        warning: None,
    })
}

/// Everything the local objective needs besides the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub lambdas: (f64, f64),
    pub kernels: LossKernels,
    pub mu: f64,
    pub scope: ProximalScope,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Joint gradient-norm ceiling applied before each step.
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub client: usize,
    pub params: ParamStore,
    pub samples: usize,
    /// Mean over local steps.
    pub loss: LossBreakdown,
    pub steps: usize,
    pub warnings: BTreeSet<Warning>,
}

impl Upload {
    pub fn new(client: usize, params: ParamStore, samples: usize) -> Self {
        Self {
            client,
            params,
            samples,
            loss: LossBreakdown::default(),
            steps: 0,
            warnings: BTreeSet::new(),
        }
    }
}

fn layer_params(l: &mut Dense) -> [&mut crate::optim::Parameter; 2] {
    let Dense { weight, bias, .. } = l;
    [weight, bias]
}

/// `E` epochs of minibatch SGD on the local objective over the stage's
/// trainable layers. Each epoch reshuffles the client's samples; trailing
/// batches smaller than two samples are skipped.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    round: usize,
    client: usize,
    data: &Dataset,
    indices: &[usize],
    mut stage: StageModel,
    reference: &ParamStore,
    loss: &LossSettings,
    cfg: &LocalConfig,
    rng: &mut impl Rng,
) -> Result<Upload> {
    if indices.is_empty() {
        return Err(Error::Dataset(format!("client {client} has no samples")));
    }
    let mut order = indices.to_vec();
    let mut sum = LossBreakdown::default();
    let mut steps = 0;
    let mut warnings = BTreeSet::new();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = data.batch(chunk);
            let mut g = Graph::new();
            let binding = stage.bind(&mut g);
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    round,
                    client,
                    step: steps + 1,
                },
                e => e,
            };
            let l = local_objective(
                &mut g,
                &stage,
                &binding,
                &x,
                &y,
                loss.lambdas,
                &loss.kernels,
                reference,
                loss.mu,
                loss.scope,
            )
            .map_err(diverged)?;
            let mut grads = g.backward(l.total).map_err(diverged)?;
            warnings.extend(g.take_warnings());
            for (layer, &(w, b)) in stage.trainable_layers_mut().zip(binding.trainable()) {
                layer.weight.set_grad(grads.take(w).expect("trainable weight"))?;
                layer.bias.set_grad(grads.take(b).expect("trainable bias"))?;
            }
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(stage.trainable_layers_mut().flat_map(layer_params), max);
            }
            sgd_step(stage.trainable_layers_mut().flat_map(layer_params), cfg.sgd)?;
            steps += 1;
            sum.total += l.breakdown.total;
            sum.ce += l.breakdown.ce;
            sum.nhsic_x += l.breakdown.nhsic_x;
            sum.nhsic_y += l.breakdown.nhsic_y;
            sum.proximal += l.breakdown.proximal;
        }
    }
    let n = steps.max(1) as f64;
    Ok(Upload {
        client,
        params: stage.export_trainable(),
        samples: indices.len(),
        loss: LossBreakdown {
            total: sum.total / n,
            ce: sum.ce / n,
            nhsic_x: sum.nhsic_x / n,
            nhsic_y: sum.nhsic_y / n,
            proximal: sum.proximal / n,
        },
        steps,
        warnings,
    })
}

/// Coordinate-wise mean weighted by sample counts, summed in ascending client
/// order whatever the order of `uploads`.
pub fn aggregate(uploads: &[Upload]) -> Result<ParamStore> {
    if uploads.is_empty() {
        return Err(Error::Aggregation("no uploads".into()));
    }
    let mut sorted: Vec<&Upload> = uploads.iter().collect();
    sorted.sort_by_key(|u| u.client);
    if sorted.windows(2).any(|w| w[0].client == w[1].client) {
        return Err(Error::Aggregation("duplicate client id among uploads".into()));
    }
    let total: usize = sorted.iter().map(|u| u.samples).sum();
    if total == 0 {
        return Err(Error::Aggregation("uploads carry zero samples in total".into()));
    }
    let first = sorted[0];
    for u in &sorted[1..] {
        if u.params.len() != first.params.len()
            || u.params
                .iter()
                .zip(&first.params)
                .any(|((ka, va), (kb, vb))| ka != kb || va.shape() != vb.shape())
        {
            return Err(Error::Aggregation(format!(
                "client {} uploaded parameters that do not align with client {}",
                u.client, first.client
            )));
        }
    }
    let weights: Vec<f64> = sorted.iter().map(|u| u.samples as f64 / total as f64).collect();
    let mut out = ParamStore::new();
    for key in first.params.keys() {
        let mut acc = first.params[key].map(|v| weights[0] * v);
        for (u, &w) in sorted.iter().zip(&weights).skip(1) {
            acc.add_assign_scaled(&u.params[key], w);
        }
        out.insert(*key, acc);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlanePoint {
    pub block: usize,
    pub nhsic_x: f64,
    pub nhsic_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub stage: usize,
    pub clients: Vec<usize>,
    pub loss: LossBreakdown,
    pub accuracy: f64,
    pub nhsic_plane: Vec<PlanePoint>,
    pub peak_memory_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoundWarning {
    pub round: usize,
    #[serde(flatten)]
    pub warning: Warning,
}

/// Per-block dependence of global block outputs on the probe inputs and labels.
pub fn nhsic_plane(
    spec: &GlobalModelSpec,
    partition: &BlockPartition,
    store: &ParamStore,
    x: &Tensor,
    y: &Tensor,
    schedule: &CurriculumSchedule,
) -> Result<(Vec<PlanePoint>, Vec<Warning>)> {
    let outs = global_layer_outputs(spec, store, x)?;
    let mut warnings = Vec::new();
    let mut points = Vec::with_capacity(partition.num_blocks());
    for i in 1..=partition.num_blocks() {
        let z = &outs[partition.block(i).end - 1];
        let (nx, wx) = kernel::nhsic_value(x, &schedule.kernel_x, z, &schedule.kernel_z)?;
        let (ny, wy) = kernel::nhsic_value(y, &schedule.kernel_y, z, &schedule.kernel_z)?;
        warnings.extend(wx);
        warnings.extend(wy);
        points.push(PlanePoint {
            block: i,
            nhsic_x: nx,
            nhsic_y: ny,
        });
    }
    Ok((points, warnings))
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let pred = logits.argmax_rows();
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Server state plus the fixed experiment context.
pub struct Simulation {
    seed: u64,
    spec: GlobalModelSpec,
    partition: BlockPartition,
    /// Block boundaries for the dependence probe. Equal to `partition`
    /// except under e2e, which trains one block but is probed at the same
    /// boundaries as the progressive modes.
    probe_partition: BlockPartition,
    plan: TrainingPlan,
    schedule: CurriculumSchedule,
    local: LocalConfig,
    fraction: f64,
    memory_constrained: bool,
    data: Dataset,
    held_out: Vec<usize>,
    probe: (Tensor, Tensor),
    clients: Vec<ClientState>,
    store: ParamStore,
    scheduler: Scheduler,
    round: usize,
    last_stage: Option<usize>,
    pool: rayon::ThreadPool,
    warnings: Vec<RoundWarning>,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset.source {
        DataSource::Synthetic(s) => Ok(data::gaussian_mixture(
            s,
            stream_rng(cfg.seed, 0, streams::DATA).random(),
        )),
        DataSource::Csv { path, label_column } => data::load_csv(path, label_column),
    }
}

impl Simulation {
    /// Validates `cfg`, builds data, clients and the initial global model.
    /// `threads == 0` lets the pool pick its own size.
    pub fn new(cfg: &ExperimentConfig, threads: usize) -> Result<Self> {
        let dataset = load_dataset(cfg)?;
        Self::with_dataset(cfg, dataset, threads)
    }

    pub fn with_dataset(cfg: &ExperimentConfig, dataset: Dataset, threads: usize) -> Result<Self> {
        let config_warnings = cfg.validate()?;
        let spec = cfg.model_spec()?;
        if dataset.dim() != spec.input_dim || dataset.num_classes() > spec.num_classes {
            return Err(Error::Dataset(format!(
                "dataset has {} features and {} classes, model expects {} and {}",
                dataset.dim(),
                dataset.num_classes(),
                spec.input_dim,
                spec.num_classes
            )));
        }
        let plan = cfg.plan();
        let partition = partition(&spec, plan.effective_blocks())?;
        let probe_partition = crate::model::partition(&spec, cfg.plan.blocks.unwrap_or(DEFAULT_BLOCKS))?;
        let seed = cfg.seed;

        let (train, held_out) = data::stratified_split(
            dataset.labels(),
            dataset.num_classes(),
            cfg.dataset.holdout_fraction,
            &mut stream_rng(seed, 0, streams::SPLIT),
        );
        if held_out.len() < 2 {
            return Err(Error::Dataset("held-out split has fewer than 2 samples".into()));
        }
        let parts = data::dirichlet_partition(
            &train,
            dataset.labels(),
            dataset.num_classes(),
            cfg.fl.clients,
            cfg.fl.alpha,
            &mut stream_rng(seed, 0, streams::PARTITION),
        )?;
        let caps = assign_capacities(
            cfg.fl.clients,
            &cfg.fl.capacities,
            &mut stream_rng(seed, 0, streams::CAPACITIES),
        );
        let clients = parts
            .into_iter()
            .zip(caps)
            .enumerate()
            .map(|(id, (indices, memory_capacity))| ClientState {
                id,
                indices,
                memory_capacity,
            })
            .collect();

        let mut probe_idx = held_out.clone();
        probe_idx.shuffle(&mut stream_rng(seed, 0, streams::PROBE));
        probe_idx.truncate(cfg.instrumentation.probe_batch.min(held_out.len()));
        probe_idx.sort_unstable();
        let probe = dataset.batch(&probe_idx);

        let store = init_global(&spec, &mut stream_rng(seed, 0, streams::INIT));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Io(format!("thread pool: {e}")))?;

        Ok(Self {
            seed,
            spec,
            partition,
            probe_partition,
            plan,
            schedule: cfg.curriculum,
            local: LocalConfig {
                epochs: cfg.fl.epochs,
                batch_size: cfg.fl.batch_size,
                grad_clip: cfg.fl.grad_clip,
                sgd: SgdConfig {
                    lr: cfg.fl.lr,
                    weight_decay: cfg.fl.weight_decay,
                    momentum: cfg.fl.momentum,
                },
            },
            fraction: cfg.fl.fraction,
            memory_constrained: plan.mode != Mode::E2e || cfg.fl.e2e_memory_constrained,
            data: dataset,
            held_out,
            probe,
            clients,
            store,
            scheduler: Scheduler::new(plan),
            round: 0,
            last_stage: None,
            pool,
            warnings: config_warnings
                .into_iter()
                .map(|warning| RoundWarning { round: 0, warning })
                .collect(),
        })
    }

    pub fn spec(&self) -> &GlobalModelSpec {
        &self.spec
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn plan(&self) -> &TrainingPlan {
        &self.plan
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn held_out(&self) -> &[usize] {
        &self.held_out
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn local_config(&self) -> &LocalConfig {
        &self.local
    }

    pub fn take_warnings(&mut self) -> Vec<RoundWarning> {
        std::mem::take(&mut self.warnings)
    }

    /// Stage options for this experiment: boundary layers and, when the label
    /// term is in use, the projection head.
    pub fn stage_options(&self) -> StageOptions {
        let e2e = self.plan.mode == Mode::E2e;
        StageOptions {
            boundary_width: if e2e { 0 } else { self.plan.boundary_width },
            projection: (!e2e && self.schedule.uses_label_term()).then_some(self.schedule.projection),
        }
    }

    pub fn loss_settings(&self, t: usize) -> LossSettings {
        LossSettings {
            lambdas: match self.plan.mode {
                Mode::E2e => (0.0, 0.0),
                _ => lambda_at(&self.schedule, t, self.partition.num_blocks()),
            },
            kernels: self.schedule.kernels(),
            mu: self.schedule.mu,
            scope: self.schedule.proximal_scope,
        }
    }

    /// Analytic peak memory of training stage `t` at the configured batch size.
    pub fn stage_requirement(&self, t: usize) -> Result<u64> {
        let comp = memory::stage_composition(&self.spec, &self.partition, t, &self.stage_options())?;
        Ok(estimate(&comp, self.local.batch_size, BYTES_PER_SCALAR).total_bytes)
    }

    /// Requirement used for admission this round; zero when selection ignores memory.
    fn admission_requirement(&self, t: usize) -> Result<u64> {
        if self.memory_constrained {
            self.stage_requirement(t)
        } else {
            Ok(0)
        }
    }

    fn evaluate(&self, stage: &StageModel, full: bool) -> Result<f64> {
        let (x, _) = self.data.batch(&self.held_out);
        let labels: Vec<usize> = self.held_out.iter().map(|&i| self.data.labels()[i]).collect();
        let logits = if full {
            global_layer_outputs(&self.spec, &self.store, &x)?
                .pop()
                .expect("model has layers")
        } else {
            stage.predict(&x)?
        };
        Ok(accuracy(&logits, &labels))
    }

    /// Runs one round and returns its metrics.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        let r = self.round + 1;
        self.step_inner(r).map_err(|e| e.in_round(r))
    }

    fn step_inner(&mut self, r: usize) -> Result<RoundMetrics> {
        let t = self.scheduler.stage_for(r);
        if self.plan.output_module_policy == OutputModulePolicy::ReinitPerStage && self.last_stage != Some(t) {
            self.store
                .retain(|k, _| !matches!(k.layer, LayerId::Head { stage, .. } if stage == t));
        }
        let opts = self.stage_options();
        let stage = assemble_stage(
            &self.spec,
            &self.partition,
            t,
            &self.store,
            &opts,
            &mut stream_rng(self.seed, r, streams::HEADS),
        )?;
        let reference = stage.export_trainable();
        self.store.extend(reference.clone());

        let requirement = self.admission_requirement(t)?;
        let selection = select_clients(
            &self.clients,
            requirement,
            self.fraction,
            t,
            &mut stream_rng(self.seed, r, streams::SELECT),
        )?;
        let mut round_warnings: BTreeSet<Warning> = selection.warning.iter().cloned().collect();

        let loss = self.loss_settings(t);
        let seed = self.seed;
        let (data, clients, local) = (&self.data, &self.clients, &self.local);
        let uploads: Vec<Upload> = self.pool.install(|| {
            selection
                .clients
                .par_iter()
                .map(|&id| {
                    local_train(
                        r,
                        id,
                        data,
                        &clients[id].indices,
                        stage.clone(),
                        &reference,
                        &loss,
                        local,
                        &mut stream_rng(seed, r, id as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for u in &uploads {
            round_warnings.extend(u.warnings.iter().cloned());
        }
        let merged = aggregate(&uploads)?;
        self.store.extend(merged);

        let full = self.scheduler.full_model_ready() || t == self.partition.num_blocks();
        let trained = assemble_stage(
            &self.spec,
            &self.partition,
            t,
            &self.store,
            &opts,
            &mut stream_rng(self.seed, r, streams::HEADS),
        )?;
        let acc = self.evaluate(&trained, full)?;
        self.scheduler.observe(t, acc);

        let (plane, plane_warnings) = nhsic_plane(
            &self.spec,
            &self.probe_partition,
            &self.store,
            &self.probe.0,
            &self.probe.1,
            &self.schedule,
        )?;
        round_warnings.extend(plane_warnings);

        let peak = estimate(&trained.composition(), self.local.batch_size, BYTES_PER_SCALAR).total_bytes;
        let n = uploads.len() as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| uploads.iter().map(|u| f(&u.loss)).sum::<f64>() / n;
        let metrics = RoundMetrics {
            round: r,
            stage: t,
            clients: selection.clients,
            loss: LossBreakdown {
                total: mean(|l| l.total),
                ce: mean(|l| l.ce),
                nhsic_x: mean(|l| l.nhsic_x),
                nhsic_y: mean(|l| l.nhsic_y),
                proximal: mean(|l| l.proximal),
            },
            accuracy: acc,
            nhsic_plane: plane,
            peak_memory_bytes: peak,
        };
        self.warnings.extend(
            round_warnings
                .into_iter()
                .map(|warning| RoundWarning { round: r, warning }),
        );
        self.round = r;
        self.last_stage = Some(t);
        Ok(metrics)
    }

    /// Runs the remaining rounds, handing each record to `sink` as it completes.
    pub fn run_with(&mut self, mut sink: impl FnMut(&RoundMetrics) -> Result<()>) -> Result<Vec<RoundMetrics>> {
        let mut all = Vec::with_capacity(self.plan.rounds.saturating_sub(self.round));
        while self.round < self.plan.rounds {
            let m = self.step()?;
            sink(&m)?;
            all.push(m);
        }
        Ok(all)
    }

    pub fn run(&mut self) -> Result<Vec<RoundMetrics>> {
        self.run_with(|_| Ok(()))
    }
}

/// Headline numbers of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub rounds: usize,
    pub final_accuracy: f64,
    /// Mean held-out accuracy over the last 10 rounds (fewer if the run is shorter).
    pub mean_last10_accuracy: f64,
    pub peak_memory_bytes: u64,
}

impl Summary {
    pub fn from_metrics(metrics: &[RoundMetrics]) -> Self {
        let tail = &metrics[metrics.len().saturating_sub(10)..];
        Self {
            rounds: metrics.len(),
            final_accuracy: metrics.last().map_or(0.0, |m| m.accuracy),
            mean_last10_accuracy: tail.iter().map(|m| m.accuracy).sum::<f64>() / tail.len().max(1) as f64,
            peak_memory_bytes: metrics.iter().map(|m| m.peak_memory_bytes).max().unwrap_or(0),
        }
    }
}

/// Clients admitted at each stage and for the full model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Participation {
    pub full_model: Vec<usize>,
    pub stages: BTreeMap<usize, Vec<usize>>,
}

pub fn participation(
    spec: &GlobalModelSpec,
    partition: &BlockPartition,
    opts: &StageOptions,
    batch: usize,
    clients: &[ClientState],
) -> Result<Participation> {
    let full = memory::full_model_estimate(spec, batch).total_bytes;
    let mut stages = BTreeMap::new();
    for t in 1..=partition.num_blocks() {
        let comp = memory::stage_composition(spec, partition, t, opts)?;
        let req = estimate(&comp, batch, BYTES_PER_SCALAR).total_bytes;
        stages.insert(t, eligible_pool(clients, req));
    }
    Ok(Participation {
        full_model: eligible_pool(clients, full),
        stages,
    })
}
