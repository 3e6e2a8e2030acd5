//! Per-domain adaptation: structure search, plugging search and the final
//! finetune over a frozen trunk, plus the head-only and full-finetune
//! references.
//!
//! Both search phases alternate one architecture step on a validation batch
//! with one parameter step on a training batch. Architecture gradients are
//! first order: the current parameters are treated as constants.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterCell, FixedAdapter};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::nn::{self, CosineSchedule, DecaySchedule, LossKind, Mode, Optimizer, ParamKind, Parameterized};
use crate::plugging::{
    baseline_mask, mask_bits, mixed_plug_forward, plug_param_usage, plugged_forward, plugged_locations, PluggingState,
    StrategyKind,
};
use crate::rng::{derive_seed, seeded, Rng};
use crate::trunk::{evaluate_accuracy, Checksum, DomainHead, TrunkModel, EVAL_BATCH};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchOptimHyper {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
}

impl Default for ArchOptimHyper {
    fn default() -> Self {
        ArchOptimHyper { learning_rate: 3e-4, weight_decay: 1e-3, beta1: 0.5, beta2: 0.999 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamOptimHyper {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for ParamOptimHyper {
    fn default() -> Self {
        ParamOptimHyper { learning_rate: 1e-2, momentum: 0.9, weight_decay: 5e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneHyper {
    pub steps: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Fractions of `steps` at which the rate is divided by `decay_factor`.
    pub milestones: Vec<f32>,
    pub decay_factor: f32,
}

impl Default for FinetuneHyper {
    fn default() -> Self {
        FinetuneHyper {
            steps: 600,
            learning_rate: 5e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![0.25, 0.5, 0.75],
            decay_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchHyper {
    /// Alternating iterations per search phase.
    pub t_max: usize,
    pub batch_size: usize,
    pub cell_nodes: usize,
    pub arch: ArchOptimHyper,
    pub params: ParamOptimHyper,
    pub finetune: FinetuneHyper,
    pub loss: LossKind,
    pub divergence_threshold: f32,
}

impl Default for SearchHyper {
    fn default() -> Self {
        SearchHyper {
            t_max: 400,
            batch_size: 32,
            cell_nodes: 3,
            arch: ArchOptimHyper::default(),
            params: ParamOptimHyper::default(),
            finetune: FinetuneHyper::default(),
            loss: LossKind::default(),
            divergence_threshold: 1e4,
        }
    }
}

impl SearchHyper {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(2..=4).contains(&self.cell_nodes) {
            return Err(Error::Config("cell_nodes must be between 2 and 4".into()));
        }
        if self.finetune.decay_factor <= 0.0 {
            return Err(Error::Config("finetune decay_factor must be positive".into()));
        }
        Ok(())
    }
}

/// A domain's labelled data.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub id: String,
    pub train: Dataset,
    pub test: Dataset,
    pub complexity_rank: Option<u32>,
}

impl DomainData {
    /// Normalizes both splits with the training statistics.
    pub fn new(id: &str, train: Dataset, test: Dataset, complexity_rank: Option<u32>) -> Result<Self> {
        if train.shape() != test.shape() || train.num_classes() != test.num_classes() {
            return Err(Error::Data(format!("domain {id}: train and test layouts differ")));
        }
        let stats = train.compute_stats();
        Ok(DomainData {
            id: id.to_string(),
            train: train.with_stats(stats.clone()),
            test: test.with_stats(stats),
            complexity_rank,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes()
    }
}

/// Stratified half split; classes with an odd count give the extra sample to
/// the training half.
pub fn split_train_val(data: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    use rand::seq::SliceRandom;
    let mut by_class = vec![Vec::new(); data.num_classes()];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = seeded(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Data(format!("class {c} has fewer than 2 samples")));
        }
        idx.shuffle(&mut rng);
        let n_train = idx.len().div_ceil(2);
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((data.subset(&train), data.subset(&val)))
}

/// Update and data-routing counters of one phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounters {
    pub arch_steps: usize,
    pub param_steps: usize,
    pub arch_batches_from_val: usize,
    pub arch_batches_from_train: usize,
    pub param_batches_from_train: usize,
    pub param_batches_from_val: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Val,
}

impl PhaseCounters {
    fn record(&mut self, arch: bool, split: Split) {
        match (arch, split) {
            (true, Split::Val) => self.arch_batches_from_val += 1,
            (true, Split::Train) => self.arch_batches_from_train += 1,
            (false, Split::Train) => self.param_batches_from_train += 1,
            (false, Split::Val) => self.param_batches_from_val += 1,
        }
        if arch {
            self.arch_steps += 1;
        } else {
            self.param_steps += 1;
        }
    }
}

/// Anything that maps a batch to logits on top of the shared trunk.
pub trait DomainModel: Parameterized {
    fn logits(&mut self, trunk: &TrunkModel, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var>;
}

fn set_trainable_where<M: Parameterized + ?Sized>(model: &mut M, keep: impl Fn(ParamKind) -> bool) {
    model.visit_params(&mut |t, k| t.set_requires_grad(keep(k)));
}

fn is_arch(k: ParamKind) -> bool {
    k == ParamKind::Arch
}

fn not_arch(k: ParamKind) -> bool {
    k != ParamKind::Arch
}

/// One forward/backward on a batch; returns the loss value.
fn loss_and_grads<M: DomainModel>(
    model: &mut M,
    trunk: &TrunkModel,
    data: &Dataset,
    idx: &[usize],
    mode: Mode,
    hyper: &SearchHyper,
    phase: &'static str,
) -> Result<f32> {
    let [c, h, w] = data.shape();
    let (x, y) = data.batch(idx);
    let mut tape = Tape::new();
    let xv = tape.constant(&[idx.len(), c, h, w], x)?;
    let logits = model.logits(trunk, &mut tape, xv, mode)?;
    let l = nn::loss(&mut tape, logits, &y, hyper.loss)?;
    let lv = tape.value(l)[0];
    if !lv.is_finite() || lv > hyper.divergence_threshold {
        return Err(Error::Divergence { phase, loss: lv });
    }
    tape.backward(l)?;
    model.collect_grads(&tape)?;
    Ok(lv)
}

/// Mean loss over a dataset in eval mode.
pub fn dataset_loss<M: DomainModel>(model: &mut M, trunk: &TrunkModel, data: &Dataset, kind: LossKind) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::Data("loss of an empty dataset".into()));
    }
    let [c, h, w] = data.shape();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0f64;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let mut tape = Tape::new();
        let xv = tape.constant(&[chunk.len(), c, h, w], x)?;
        let logits = model.logits(trunk, &mut tape, xv, Mode::Eval)?;
        let l = nn::loss(&mut tape, logits, &y, kind)?;
        total += tape.value(l)[0] as f64 * chunk.len() as f64;
    }
    Ok((total / data.len() as f64) as f32)
}

pub fn model_accuracy<M: DomainModel>(model: &mut M, trunk: &TrunkModel, data: &Dataset) -> Result<f32> {
    evaluate_accuracy(data, |tape, x| model.logits(trunk, tape, x, Mode::Eval))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub train_loss: Vec<f32>,
    pub val_loss: Vec<f32>,
}

/// The alternating bilevel loop shared by both search phases.
fn alternating_search<M: DomainModel>(
    model: &mut M,
    trunk: &TrunkModel,
    train: &Dataset,
    val: &Dataset,
    hyper: &SearchHyper,
    phase: &'static str,
    rng: &mut Rng,
) -> Result<(PhaseCounters, SearchTrace)> {
    let a = hyper.arch;
    let mut arch_opt = Optimizer::adam(a.learning_rate, a.beta1, a.beta2, a.weight_decay);
    let p = hyper.params;
    let mut param_opt = Optimizer::sgd(p.learning_rate, p.momentum, p.weight_decay);
    let schedule = CosineSchedule::new(p.learning_rate, hyper.t_max)?;
    let mut train_sampler = BatchSampler::new(train.len(), hyper.batch_size)?;
    let mut val_sampler = BatchSampler::new(val.len(), hyper.batch_size)?;
    let mut counters = PhaseCounters::default();
    let mut trace = SearchTrace::default();
    let frozen = Mode::Train { update_stats: false };
    for t in 0..hyper.t_max {
        set_trainable_where(model, is_arch);
        let idx = val_sampler.next_batch(rng);
        let lv = loss_and_grads(model, trunk, val, &idx, frozen, hyper, phase)?;
        arch_opt.step(model, &is_arch)?;
        model.zero_grad();
        counters.record(true, Split::Val);
        trace.val_loss.push(lv);

        set_trainable_where(model, not_arch);
        let idx = train_sampler.next_batch(rng);
        let lt = loss_and_grads(model, trunk, train, &idx, Mode::TRAIN, hyper, phase)?;
        param_opt.learning_rate = schedule.lr(t)?;
        param_opt.step(model, &not_arch)?;
        model.zero_grad();
        counters.record(false, Split::Train);
        trace.train_loss.push(lt);
    }
    set_trainable_where(model, |_| true);
    Ok((counters, trace))
}

/// Every location carries a searchable cell.
#[derive(Debug, Clone)]
pub struct StructureSearchModel {
    pub cells: Vec<AdapterCell>,
    pub head: DomainHead,
}

impl DomainModel for StructureSearchModel {
    fn logits(&mut self, trunk: &TrunkModel, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let mut slots: Vec<Option<&mut AdapterCell>> = self.cells.iter_mut().map(Some).collect();
        let f = plugged_forward_refs(trunk, &mut slots, tape, x, mode)?;
        self.head.forward(tape, f)
    }
}

fn plugged_forward_refs<A: Adapter>(
    trunk: &TrunkModel,
    slots: &mut [Option<&mut A>],
    tape: &mut Tape,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let mut h = x;
    for (n, slot) in slots.iter_mut().enumerate() {
        h = trunk.block_forward(tape, n, h)?;
        if let Some(a) = slot {
            h = a.forward(tape, h, mode)?;
        }
    }
    Ok(h)
}

impl Parameterized for StructureSearchModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind)) {
        for c in &mut self.cells {
            c.visit_params(f);
        }
        self.head.visit_params(f);
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind)) {
        for c in &self.cells {
            c.visit_params_ref(f);
        }
        self.head.visit_params_ref(f);
    }
}

#[derive(Debug, Clone)]
pub struct StructureSearchOutcome {
    pub model: StructureSearchModel,
    pub structures: Vec<FixedAdapter>,
    pub counters: PhaseCounters,
    pub trace: SearchTrace,
    pub val_loss_initial: f32,
    pub val_loss_final: f32,
}

fn require_frozen(trunk: &TrunkModel) -> Result<()> {
    if !trunk.is_frozen() {
        return Err(Error::Invalid("adaptation requires a frozen trunk".into()));
    }
    Ok(())
}

/// Searches the adapter structure of every location, all locations plugged.
pub fn search_adapter_structures(
    trunk: &TrunkModel,
    train: &Dataset,
    val: &Dataset,
    head: DomainHead,
    hyper: &SearchHyper,
    rng: &mut Rng,
) -> Result<StructureSearchOutcome> {
    require_frozen(trunk)?;
    hyper.validate()?;
    let cells = trunk
        .widths()
        .iter()
        .map(|&c| AdapterCell::new(hyper.cell_nodes, c, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut model = StructureSearchModel { cells, head };
    let val_loss_initial = dataset_loss(&mut model, trunk, val, hyper.loss)?;
    let (counters, trace) = alternating_search(&mut model, trunk, train, val, hyper, "structure-search", rng)?;
    let val_loss_final = dataset_loss(&mut model, trunk, val, hyper.loss)?;
    let structures = model.cells.iter().map(|c| c.discretize()).collect();
    Ok(StructureSearchOutcome { model, structures, counters, trace, val_loss_initial, val_loss_final })
}

/// Fixed structures behind relaxed identity/adapter gates.
#[derive(Debug, Clone)]
pub struct PlugSearchModel {
    pub adapters: Vec<FixedAdapter>,
    pub state: PluggingState,
    pub head: DomainHead,
}

impl DomainModel for PlugSearchModel {
    fn logits(&mut self, trunk: &TrunkModel, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let f = mixed_plug_forward(trunk, &mut self.adapters, &self.state, tape, x, mode)?;
        self.head.forward(tape, f)
    }
}

impl Parameterized for PlugSearchModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind)) {
        self.state.visit_params(f);
        for a in &mut self.adapters {
            a.visit_params(f);
        }
        self.head.visit_params(f);
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind)) {
        self.state.visit_params_ref(f);
        for a in &self.adapters {
            a.visit_params_ref(f);
        }
        self.head.visit_params_ref(f);
    }
}

#[derive(Debug, Clone)]
pub struct PlugSearchOutcome {
    pub model: PlugSearchModel,
    pub mask: Vec<bool>,
    pub counters: PhaseCounters,
    pub trace: SearchTrace,
}

/// Searches where to plug; the given structures are re-initialized first.
pub fn search_plugging(
    trunk: &TrunkModel,
    train: &Dataset,
    val: &Dataset,
    structures: &[FixedAdapter],
    head: DomainHead,
    hyper: &SearchHyper,
    rng: &mut Rng,
) -> Result<PlugSearchOutcome> {
    require_frozen(trunk)?;
    hyper.validate()?;
    let adapters = structures.iter().map(|s| s.reinitialized(rng)).collect::<Result<Vec<_>>>()?;
    let mut model = PlugSearchModel { adapters, state: PluggingState::new(trunk.n_layers())?, head };
    let (counters, trace) = alternating_search(&mut model, trunk, train, val, hyper, "plugging-search", rng)?;
    let mask = model.state.discretize();
    Ok(PlugSearchOutcome { model, mask, counters, trace })
}

/// A domain's deployable model: adapters at plugged locations, and a head.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationModel {
    pub slots: Vec<Option<FixedAdapter>>,
    pub head: DomainHead,
}

impl AdaptationModel {
    /// Keeps the adapters selected by `mask`; the others are dropped.
    pub fn new(adapters: Vec<FixedAdapter>, mask: &[bool], head: DomainHead) -> Result<Self> {
        if adapters.len() != mask.len() {
            return Err(Error::shape("adaptation", format!("{} adapters, mask of {}", adapters.len(), mask.len())));
        }
        let slots = adapters.into_iter().zip(mask).map(|(a, &m)| m.then_some(a)).collect();
        Ok(AdaptationModel { slots, head })
    }

    pub fn head_only(locations: usize, head: DomainHead) -> Self {
        AdaptationModel { slots: vec![None; locations], head }
    }

    pub fn mask(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }

    /// Adapter parameters, classifier excluded.
    pub fn adapter_param_count(&self) -> usize {
        self.slots.iter().flatten().map(FixedAdapter::param_count).sum()
    }

    /// Pre-classifier feature map.
    pub fn features(&mut self, trunk: &TrunkModel, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        plugged_forward(trunk, &mut self.slots, tape, x, mode)
    }
}

impl DomainModel for AdaptationModel {
    fn logits(&mut self, trunk: &TrunkModel, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let f = self.features(trunk, tape, x, mode)?;
        self.head.forward(tape, f)
    }
}

impl Parameterized for AdaptationModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind)) {
        for a in self.slots.iter_mut().flatten() {
            a.visit_params(f);
        }
        self.head.visit_params(f);
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind)) {
        for a in self.slots.iter().flatten() {
            a.visit_params_ref(f);
        }
        self.head.visit_params_ref(f);
    }
}

/// Unfrozen trunk copy plus head, trained end to end.
#[derive(Debug, Clone)]
pub struct FullFinetuneModel {
    pub trunk: TrunkModel,
    pub head: DomainHead,
}

impl DomainModel for FullFinetuneModel {
    fn logits(&mut self, _shared: &TrunkModel, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for n in 0..self.trunk.n_layers() {
            h = self.trunk.block_forward_mut(tape, n, h, mode)?;
        }
        self.head.forward(tape, h)
    }
}

impl Parameterized for FullFinetuneModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind)) {
        self.trunk.visit_params(f);
        self.head.visit_params(f);
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind)) {
        self.trunk.visit_params_ref(f);
        self.head.visit_params_ref(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub test_accuracy: f32,
    pub param_steps: usize,
    pub loss_trace: Vec<f32>,
}

/// Trains every trainable parameter of `model` on `train` with the decayed
/// SGD schedule, then reports test accuracy.
pub fn finetune<M: DomainModel>(
    model: &mut M,
    trunk: &TrunkModel,
    train: &Dataset,
    test: &Dataset,
    hyper: &SearchHyper,
    rng: &mut Rng,
) -> Result<FinetuneOutcome> {
    hyper.validate()?;
    let ft = &hyper.finetune;
    let schedule = DecaySchedule {
        initial_lr: ft.learning_rate,
        total_steps: ft.steps,
        milestones: ft.milestones.clone(),
        factor: ft.decay_factor,
    };
    let mut opt = Optimizer::sgd(ft.learning_rate, ft.momentum, ft.weight_decay);
    let mut sampler = BatchSampler::new(train.len(), hyper.batch_size)?;
    let mut trace = Vec::with_capacity(ft.steps);
    for step in 0..ft.steps {
        let idx = sampler.next_batch(rng);
        let l = loss_and_grads(model, trunk, train, &idx, Mode::TRAIN, hyper, "finetune")?;
        opt.learning_rate = schedule.lr(step);
        opt.step(model, &|_| true)?;
        model.zero_grad();
        trace.push(l);
    }
    let test_accuracy = model_accuracy(model, trunk, test)?;
    Ok(FinetuneOutcome { test_accuracy, param_steps: ft.steps, loss_trace: trace })
}

/// Finetunes the plugged adapters and the head on the full training data.
/// Adapter BN running statistics are re-estimated from scratch.
pub fn finetune_adapters(
    model: &mut AdaptationModel,
    trunk: &TrunkModel,
    train: &Dataset,
    test: &Dataset,
    hyper: &SearchHyper,
    rng: &mut Rng,
) -> Result<FinetuneOutcome> {
    require_frozen(trunk)?;
    for a in model.slots.iter_mut().flatten() {
        a.reset_running_stats();
    }
    finetune(model, trunk, train, test, hyper, rng)
}

/// Test accuracy with only a fresh head trained on frozen trunk features.
pub fn head_only_baseline(data: &DomainData, trunk: &TrunkModel, hyper: &SearchHyper, seed: u64) -> Result<f32> {
    let mut rng = seeded(derive_seed(seed, "head-only"));
    let head = DomainHead::new(&data.id, trunk.feature_dim(), data.num_classes(), &mut rng)?;
    let mut model = AdaptationModel::head_only(trunk.n_layers(), head);
    Ok(finetune_adapters(&mut model, trunk, &data.train, &data.test, hyper, &mut rng)?.test_accuracy)
}

/// Test error of a fully finetuned trunk copy; the reference for the score.
pub fn full_finetune_baseline(data: &DomainData, trunk: &TrunkModel, hyper: &SearchHyper, seed: u64) -> Result<f32> {
    let mut rng = seeded(derive_seed(seed, "full-finetune"));
    let head = DomainHead::new(&data.id, trunk.feature_dim(), data.num_classes(), &mut rng)?;
    let mut model = FullFinetuneModel { trunk: trunk.unfrozen_copy(), head };
    let out = finetune(&mut model, trunk, &data.train, &data.test, hyper, &mut rng)?;
    Ok(1.0 - out.test_accuracy)
}

/// Discretized search artifacts and accuracy of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainResult {
    pub domain: String,
    pub complexity_rank: Option<u32>,
    pub num_classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Searched structure at every location, plugged or not.
    pub signatures: Vec<String>,
    /// Bit-string, location 1 leftmost.
    pub mask: String,
    pub plugged_locations: Vec<usize>,
    /// Per location, per edge logits over the candidate ops.
    pub alpha: Vec<Vec<Vec<f32>>>,
    pub beta: Vec<[f32; 2]>,
    /// Parameter count of each location's structure.
    pub structure_params: Vec<usize>,
    pub adapter_params: usize,
    pub adapter_params_percent: f64,
    pub test_accuracy: f32,
    pub flops: u64,
    pub counters: PhaseReport,
    pub losses: LossReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub structure_search: PhaseCounters,
    pub plugging_search: PhaseCounters,
    pub finetune_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub structure_val_initial: f32,
    pub structure_val_final: f32,
    pub structure_search: SearchTrace,
    pub plugging_search: SearchTrace,
    pub finetune: Vec<f32>,
}

/// Everything produced for one domain.
#[derive(Debug, Clone)]
pub struct DomainRun {
    pub result: DomainResult,
    pub model: AdaptationModel,
    pub structures: Vec<FixedAdapter>,
}

/// Runs the three phases on one domain. The seed fully determines the
/// outcome.
pub fn run_domain(data: &DomainData, trunk: &TrunkModel, hyper: &SearchHyper, seed: u64) -> Result<DomainRun> {
    require_frozen(trunk)?;
    let mut rng = seeded(seed);
    let (train, val) = split_train_val(&data.train, derive_seed(seed, "split"))?;
    let head = DomainHead::new(&data.id, trunk.feature_dim(), data.num_classes(), &mut rng)?;

    let s1 = search_adapter_structures(trunk, &train, &val, head, hyper, &mut rng)?;
    let alpha = s1
        .model
        .cells
        .iter()
        .map(|c| c.edges.iter().map(|e| e.alpha.data().to_vec()).collect())
        .collect();
    let s2 = search_plugging(trunk, &train, &val, &s1.structures, s1.model.head.clone(), hyper, &mut rng)?;
    let beta = (0..s2.model.state.locations()).map(|n| s2.model.state.logits(n)).collect();

    let mut model = AdaptationModel::new(s2.model.adapters.clone(), &s2.mask, s2.model.head.clone())?;
    let ft = finetune_adapters(&mut model, trunk, &data.train, &data.test, hyper, &mut rng)?;

    let structure_params: Vec<usize> = s1.structures.iter().map(FixedAdapter::param_count).collect();
    let (adapter_params, pct) = plug_param_usage(&s2.mask, &structure_params)?;
    let flops = crate::metrics::flop_estimate(trunk, &model);
    let result = DomainResult {
        domain: data.id.clone(),
        complexity_rank: data.complexity_rank,
        num_classes: data.num_classes(),
        train_samples: data.train.len(),
        test_samples: data.test.len(),
        signatures: s1.structures.iter().map(FixedAdapter::signature).collect(),
        mask: mask_bits(&s2.mask),
        plugged_locations: plugged_locations(&s2.mask),
        alpha,
        beta,
        structure_params,
        adapter_params,
        adapter_params_percent: pct,
        test_accuracy: ft.test_accuracy,
        flops,
        counters: PhaseReport {
            structure_search: s1.counters,
            plugging_search: s2.counters,
            finetune_steps: ft.param_steps,
        },
        losses: LossReport {
            structure_val_initial: s1.val_loss_initial,
            structure_val_final: s1.val_loss_final,
            structure_search: s1.trace,
            plugging_search: s2.trace,
            finetune: ft.loss_trace,
        },
    };
    Ok(DomainRun { result, model, structures: s1.structures })
}

/// The shared trunk and every domain's adaptation.
#[derive(Debug, Clone)]
pub struct MdlModel<'a> {
    pub trunk: &'a TrunkModel,
    pub domains: Vec<DomainRun>,
}

impl MdlModel<'_> {
    /// Trunk plus all adapter parameters; classifiers excluded.
    pub fn total_params(&self) -> usize {
        self.trunk.param_count() + self.domains.iter().map(|d| d.model.adapter_param_count()).sum::<usize>()
    }

    pub fn classifier_params(&self) -> usize {
        self.domains.iter().map(|d| d.model.head.param_count_where(&|_| true)).sum()
    }
}

/// Per-domain seed; independent of domain order.
pub fn domain_seed(seed: u64, domain_id: &str) -> u64 {
    derive_seed(seed, &format!("domain/{domain_id}"))
}

/// Adapts every domain (in parallel on the current rayon pool). Results are
/// in input order; the trunk checksum is verified afterwards.
pub fn run_mdl<'a>(
    domains: &[DomainData],
    trunk: &'a TrunkModel,
    hyper: &SearchHyper,
    seed: u64,
) -> Result<MdlModel<'a>> {
    require_frozen(trunk)?;
    if domains.is_empty() {
        return Err(Error::Invalid("no domains to adapt".into()));
    }
    let before: Checksum = trunk.checksum();
    let runs = domains
        .par_iter()
        .map(|d| run_domain(d, trunk, hyper, domain_seed(seed, &d.id)).map_err(|e| e.in_domain(&d.id)))
        .collect::<Result<Vec<_>>>()?;
    let after = trunk.checksum();
    if before != after {
        return Err(Error::Checksum { expected: hex::encode(before), found: hex::encode(after) });
    }
    Ok(MdlModel { trunk, domains: runs })
}

/// Plugging search alone over given structures, as in the second phase of
/// `run_domain`. Returns the discretized mask.
pub fn search_mask(data: &DomainData, trunk: &TrunkModel, structures: &[FixedAdapter], hyper: &SearchHyper, seed: u64) -> Result<Vec<bool>> {
    let mut rng = seeded(seed);
    let (train, val) = split_train_val(&data.train, derive_seed(seed, "split"))?;
    let head = DomainHead::new(&data.id, trunk.feature_dim(), data.num_classes(), &mut rng)?;
    Ok(search_plugging(trunk, &train, &val, structures, head, hyper, &mut rng)?.mask)
}

/// One finetune-only run of a plugging strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRun {
    pub domain: String,
    pub strategy: StrategyKind,
    /// Random-mask seed index; 0 for deterministic strategies.
    pub replicate: usize,
    pub mask: String,
    pub test_accuracy: f32,
    pub adapter_params: usize,
    pub adapter_params_percent: f64,
    pub flops: u64,
}

/// Finetunes the searched structures under every plugging strategy at the
/// searched budget. Each run starts from the same adapter and head
/// initialization and sees the same batch order.
pub fn compare_strategies(
    data: &DomainData,
    trunk: &TrunkModel,
    structures: &[FixedAdapter],
    searched_mask: &[bool],
    hyper: &SearchHyper,
    random_masks: usize,
    seed: u64,
) -> Result<Vec<StrategyRun>> {
    require_frozen(trunk)?;
    let total = trunk.n_layers();
    if structures.len() != total || searched_mask.len() != total {
        return Err(Error::shape("compare", format!("{} structures, mask of {}", structures.len(), searched_mask.len())));
    }
    let budget = searched_mask.iter().filter(|&&m| m).count();
    let mut plans = vec![(StrategyKind::Searched, 0, searched_mask.to_vec())];
    for kind in [StrategyKind::All, StrategyKind::TopDown, StrategyKind::BottomUp] {
        plans.push((kind, 0, baseline_mask(kind, budget, total, 0)?));
    }
    for r in 0..random_masks {
        let mask_seed = derive_seed(seed, &format!("random-mask/{r}"));
        plans.push((StrategyKind::Random, r, baseline_mask(StrategyKind::Random, budget, total, mask_seed)?));
    }
    let counts: Vec<usize> = structures.iter().map(FixedAdapter::param_count).collect();
    let mut init_rng = seeded(derive_seed(seed, "compare/init"));
    let adapters = structures.iter().map(|s| s.reinitialized(&mut init_rng)).collect::<Result<Vec<_>>>()?;
    let head = DomainHead::new(&data.id, trunk.feature_dim(), data.num_classes(), &mut init_rng)?;
    // every plan shares init and batch order, so equal masks give equal runs
    let mut done: Vec<(Vec<bool>, f32, u64)> = Vec::new();
    plans
        .into_iter()
        .map(|(strategy, replicate, mask)| {
            let (test_accuracy, flops) = match done.iter().find(|(m, ..)| *m == mask) {
                Some(&(_, acc, flops)) => (acc, flops),
                None => {
                    let mut model = AdaptationModel::new(adapters.clone(), &mask, head.clone())?;
                    let mut rng = seeded(derive_seed(seed, "compare/batches"));
                    let out = finetune_adapters(&mut model, trunk, &data.train, &data.test, hyper, &mut rng)?;
                    let flops = crate::metrics::flop_estimate(trunk, &model);
                    done.push((mask.clone(), out.test_accuracy, flops));
                    (out.test_accuracy, flops)
                }
            };
            let (adapter_params, adapter_params_percent) = plug_param_usage(&mask, &counts)?;
            Ok(StrategyRun {
                domain: data.id.clone(),
                strategy,
                replicate,
                mask: mask_bits(&mask),
                test_accuracy,
                adapter_params,
                adapter_params_percent,
                flops,
            })
        })
        .collect()
}
