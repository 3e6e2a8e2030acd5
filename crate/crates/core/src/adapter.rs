//! Searchable adapter cells and their discretized fixed structures.
//!
//! A cell has `M` nodes. Node 0 is the cell input, node `j` averages the
//! mixed-edge outputs from every node `i < j`, and node `M − 1` is the output.
//! Each mixed edge blends the four candidate operations with the softmax of
//! its four architecture logits.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, Conv2dLayer, Mode, ParamKind, Parameterized};
use crate::rng::Rng;

/// Standard deviation of freshly initialized adapter conv kernels (around
/// identity for the plain 1×1 conv, around zero inside the shortcut).
pub const CONV_INIT_SCALE: f32 = 1e-3;

/// Candidate operations, in the order of the logits on every edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv1x1,
    #[serde(rename = "bn")]
    BatchNorm,
    Skip,
    IdentityShortcut,
}

impl OpKind {
    pub const ALL: [OpKind; 4] = [OpKind::Conv1x1, OpKind::BatchNorm, OpKind::Skip, OpKind::IdentityShortcut];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv1x1 => "conv1x1",
            OpKind::BatchNorm => "bn",
            OpKind::Skip => "skip",
            OpKind::IdentityShortcut => "identity_shortcut",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn index(self) -> usize {
        OpKind::ALL.iter().position(|&k| k == self).expect("listed")
    }

    /// Tie-break order, cheapest first.
    pub fn cost_rank(self) -> u8 {
        match self {
            OpKind::Skip => 0,
            OpKind::BatchNorm => 1,
            OpKind::Conv1x1 => 2,
            OpKind::IdentityShortcut => 3,
        }
    }

    pub fn param_count(self, channels: usize) -> usize {
        match self {
            OpKind::Conv1x1 | OpKind::IdentityShortcut => channels * channels + channels,
            OpKind::BatchNorm => 2 * channels,
            OpKind::Skip => 0,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CandidateOp {
    Conv1x1(Conv2dLayer),
    BatchNorm(BatchNormLayer),
    Skip,
    /// `x + conv1x1(x)`.
    IdentityShortcut(Conv2dLayer),
}

impl CandidateOp {
    pub fn new(kind: OpKind, channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(match kind {
            OpKind::Conv1x1 => CandidateOp::Conv1x1(Conv2dLayer::pointwise(channels, CONV_INIT_SCALE, true, rng)?),
            OpKind::BatchNorm => CandidateOp::BatchNorm(BatchNormLayer::new(channels)),
            OpKind::Skip => CandidateOp::Skip,
            OpKind::IdentityShortcut => {
                CandidateOp::IdentityShortcut(Conv2dLayer::pointwise(channels, CONV_INIT_SCALE, false, rng)?)
            }
        })
    }

    pub fn kind(&self) -> OpKind {
        match self {
            CandidateOp::Conv1x1(_) => OpKind::Conv1x1,
            CandidateOp::BatchNorm(_) => OpKind::BatchNorm,
            CandidateOp::Skip => OpKind::Skip,
            CandidateOp::IdentityShortcut(_) => OpKind::IdentityShortcut,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        match self {
            CandidateOp::Conv1x1(c) => c.forward(tape, x),
            CandidateOp::BatchNorm(b) => b.forward(tape, x, mode),
            CandidateOp::Skip => Ok(x),
            CandidateOp::IdentityShortcut(c) => {
                let y = c.forward(tape, x)?;
                tape.add(x, y)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_count_where(&|_| true)
    }

    fn reset_running_stats(&mut self) {
        if let CandidateOp::BatchNorm(b) = self {
            b.reset_running_stats();
        }
    }
}

impl Parameterized for CandidateOp {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind)) {
        match self {
            CandidateOp::Conv1x1(c) | CandidateOp::IdentityShortcut(c) => c.visit_params(f),
            CandidateOp::BatchNorm(b) => b.visit_params(f),
            CandidateOp::Skip => {}
        }
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind)) {
        match self {
            CandidateOp::Conv1x1(c) | CandidateOp::IdentityShortcut(c) => c.visit_params_ref(f),
            CandidateOp::BatchNorm(b) => b.visit_params_ref(f),
            CandidateOp::Skip => {}
        }
    }
}

/// Softmax of edge logits, evaluated in f64.
pub fn mixture_weights(alpha: &[f32]) -> Vec<f32> {
    let m = alpha.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = alpha.iter().map(|&a| (a as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| (v / s) as f32).collect()
}

/// Edges `(i, j)` with `i < j` in lexicographic order.
fn edge_list(nodes: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..nodes {
        for j in i + 1..nodes {
            out.push((i, j));
        }
    }
    out
}

fn check_nodes(nodes: usize) -> Result<()> {
    if !(2..=4).contains(&nodes) {
        return Err(Error::Invalid(format!("adapter cells have 2 to 4 nodes, got {nodes}")));
    }
    Ok(())
}

fn check_channels(tape: &Tape, x: Var, channels: usize) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 4 || s[1] != channels {
        return Err(Error::shape("adapter", format!("input {s:?} for {channels} channels")));
    }
    Ok(())
}

/// Evaluates a cell DAG given a per-edge forward.
fn run_dag(
    tape: &mut Tape,
    x: Var,
    nodes: usize,
    edges: &[(usize, usize)],
    mut edge_forward: impl FnMut(&mut Tape, usize, Var) -> Result<Var>,
) -> Result<Var> {
    let mut values = vec![x];
    for j in 1..nodes {
        let mut acc: Option<Var> = None;
        let mut fan_in = 0;
        for (e, &(from, to)) in edges.iter().enumerate() {
            if to != j {
                continue;
            }
            let y = edge_forward(tape, e, values[from])?;
            acc = Some(match acc {
                None => y,
                Some(a) => tape.add(a, y)?,
            });
            fan_in += 1;
        }
        let sum = acc.expect("every node has a predecessor");
        values.push(if fan_in > 1 { tape.scale(sum, 1.0 / fan_in as f32)? } else { sum });
    }
    Ok(values[nodes - 1])
}

/// Shape-preserving module applied at a plugging location.
pub trait Adapter: Parameterized {
    fn channels(&self) -> usize;
    fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedEdge {
    pub from: usize,
    pub to: usize,
    /// Logits over [`OpKind::ALL`].
    pub alpha: Tensor,
    pub ops: Vec<CandidateOp>,
}

impl MixedEdge {
    pub fn new(from: usize, to: usize, channels: usize, rng: &mut Rng) -> Result<Self> {
        let ops = OpKind::ALL.iter().map(|&k| CandidateOp::new(k, channels, rng)).collect::<Result<_>>()?;
        Ok(MixedEdge { from, to, alpha: Tensor::zeros(&[OpKind::ALL.len()]).trainable(true), ops })
    }

    pub fn weights(&self) -> Vec<f32> {
        mixture_weights(self.alpha.data())
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let a = tape.param(&self.alpha);
        self.forward_with_logits(tape, x, a, mode)
    }

    /// Forward with externally supplied logits in place of `alpha`.
    pub fn forward_with_logits(&mut self, tape: &mut Tape, x: Var, logits: Var, mode: Mode) -> Result<Var> {
        let w = tape.softmax(logits, 0)?;
        let mut acc: Option<Var> = None;
        for (k, op) in self.ops.iter_mut().enumerate() {
            let y = op.forward(tape, x, mode)?;
            let y = tape.scale_by(y, w, k)?;
            acc = Some(match acc {
                None => y,
                Some(s) => tape.add(s, y)?,
            });
        }
        Ok(acc.expect("four candidate ops"))
    }

    /// Highest-logit op; exact ties go to the cheaper op.
    pub fn selected(&self) -> OpKind {
        let a = self.alpha.data();
        let mut best = OpKind::ALL[0];
        for &k in &OpKind::ALL[1..] {
            let (va, vb) = (a[k.index()], a[best.index()]);
            if va > vb || (va == vb && k.cost_rank() < best.cost_rank()) {
                best = k;
            }
        }
        best
    }
}

impl Parameterized for MixedEdge {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind)) {
        f(&mut self.alpha, ParamKind::Arch);
        for op in &mut self.ops {
            op.visit_params(f);
        }
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind)) {
        f(&self.alpha, ParamKind::Arch);
        for op in &self.ops {
            op.visit_params_ref(f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCell {
    nodes: usize,
    channels: usize,
    pub edges: Vec<MixedEdge>,
}

impl AdapterCell {
    pub fn new(nodes: usize, channels: usize, rng: &mut Rng) -> Result<Self> {
        check_nodes(nodes)?;
        let edges = edge_list(nodes)
            .into_iter()
            .map(|(i, j)| MixedEdge::new(i, j, channels, rng))
            .collect::<Result<_>>()?;
        Ok(AdapterCell { nodes, channels, edges })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Per-edge selection by highest logit, carrying the trained parameters.
    pub fn discretize(&self) -> FixedAdapter {
        let edges = self
            .edges
            .iter()
            .map(|e| {
                let k = e.selected();
                FixedEdge { from: e.from, to: e.to, op: e.ops[k.index()].clone() }
            })
            .collect();
        FixedAdapter { nodes: self.nodes, channels: self.channels, edges }
    }
}

impl Adapter for AdapterCell {
    fn channels(&self) -> usize {
        self.channels
    }

    fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        check_channels(tape, x, self.channels)?;
        let pairs: Vec<_> = self.edges.iter().map(|e| (e.from, e.to)).collect();
        let edges = &mut self.edges;
        run_dag(tape, x, self.nodes, &pairs, |tape, e, v| edges[e].forward(tape, v, mode))
    }
}

impl Parameterized for AdapterCell {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind)) {
        for e in &mut self.edges {
            e.visit_params(f);
        }
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind)) {
        for e in &self.edges {
            e.visit_params_ref(f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedEdge {
    pub from: usize,
    pub to: usize,
    pub op: CandidateOp,
}

/// A discretized cell: one operation per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedAdapter {
    nodes: usize,
    channels: usize,
    pub edges: Vec<FixedEdge>,
}

impl FixedAdapter {
    /// Fresh parameters for the given per-edge operations (lexicographic
    /// edge order).
    pub fn from_ops(nodes: usize, channels: usize, ops: &[OpKind], rng: &mut Rng) -> Result<Self> {
        check_nodes(nodes)?;
        let pairs = edge_list(nodes);
        if ops.len() != pairs.len() {
            return Err(Error::Invalid(format!("{nodes}-node cell has {} edges, got {} ops", pairs.len(), ops.len())));
        }
        let edges = pairs
            .into_iter()
            .zip(ops)
            .map(|((from, to), &k)| Ok(FixedEdge { from, to, op: CandidateOp::new(k, channels, rng)? }))
            .collect::<Result<_>>()?;
        Ok(FixedAdapter { nodes, channels, edges })
    }

    pub fn from_signature(signature: &str, channels: usize, rng: &mut Rng) -> Result<Self> {
        let (nodes, ops) = parse_signature(signature)?;
        Self::from_ops(nodes, channels, &ops, rng)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn ops(&self) -> Vec<OpKind> {
        self.edges.iter().map(|e| e.op.kind()).collect()
    }

    /// `"bn"` for a single edge, `"edge(0,1)=conv1x1;edge(0,2)=skip;..."`
    /// otherwise.
    pub fn signature(&self) -> String {
        if self.nodes == 2 {
            return self.edges[0].op.kind().name().to_string();
        }
        self.edges
            .iter()
            .map(|e| format!("edge({},{})={}", e.from, e.to, e.op.kind().name()))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn param_count(&self) -> usize {
        count_adapter_params(self)
    }

    /// Same structure, fresh parameters.
    pub fn reinitialized(&self, rng: &mut Rng) -> Result<Self> {
        Self::from_ops(self.nodes, self.channels, &self.ops(), rng)
    }

    pub fn reset_running_stats(&mut self) {
        for e in &mut self.edges {
            e.op.reset_running_stats();
        }
    }

    /// Parameter-free structure: every edge is a skip.
    pub fn is_identity(&self) -> bool {
        self.edges.iter().all(|e| e.op.kind() == OpKind::Skip)
    }
}

impl Adapter for FixedAdapter {
    fn channels(&self) -> usize {
        self.channels
    }

    fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        check_channels(tape, x, self.channels)?;
        let pairs: Vec<_> = self.edges.iter().map(|e| (e.from, e.to)).collect();
        let edges = &mut self.edges;
        run_dag(tape, x, self.nodes, &pairs, |tape, e, v| edges[e].op.forward(tape, v, mode))
    }
}

impl Parameterized for FixedAdapter {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind)) {
        for e in &mut self.edges {
            e.op.visit_params(f);
        }
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind)) {
        for e in &self.edges {
            e.op.visit_params_ref(f);
        }
    }
}

/// Parses a structure signature into `(nodes, per-edge ops)`.
pub fn parse_signature(signature: &str) -> Result<(usize, Vec<OpKind>)> {
    let bad = || Error::Invalid(format!("malformed adapter signature {signature:?}"));
    if let Some(k) = OpKind::from_name(signature) {
        return Ok((2, vec![k]));
    }
    let mut parsed = Vec::new();
    for part in signature.split(';') {
        let rest = part.strip_prefix("edge(").ok_or_else(bad)?;
        let (pair, name) = rest.split_once(")=").ok_or_else(bad)?;
        let (i, j) = pair.split_once(',').ok_or_else(bad)?;
        let i: usize = i.trim().parse().map_err(|_| bad())?;
        let j: usize = j.trim().parse().map_err(|_| bad())?;
        parsed.push(((i, j), OpKind::from_name(name).ok_or_else(bad)?));
    }
    let nodes = parsed.iter().map(|((_, j), _)| j + 1).max().ok_or_else(bad)?;
    check_nodes(nodes)?;
    let expected = edge_list(nodes);
    if parsed.iter().map(|(p, _)| *p).collect::<Vec<_>>() != expected {
        return Err(bad());
    }
    Ok((nodes, parsed.into_iter().map(|(_, k)| k).collect()))
}

/// Handcrafted single-edge adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineAdapter {
    BnAdapt,
    Conv1x1Adapt,
    ResAdapt,
}

impl BaselineAdapter {
    pub const ALL: [BaselineAdapter; 3] = [BaselineAdapter::BnAdapt, BaselineAdapter::Conv1x1Adapt, BaselineAdapter::ResAdapt];

    pub fn op(self) -> OpKind {
        match self {
            BaselineAdapter::BnAdapt => OpKind::BatchNorm,
            BaselineAdapter::Conv1x1Adapt => OpKind::Conv1x1,
            BaselineAdapter::ResAdapt => OpKind::IdentityShortcut,
        }
    }
}

pub fn make_baseline_adapter(kind: BaselineAdapter, channels: usize, rng: &mut Rng) -> Result<FixedAdapter> {
    FixedAdapter::from_ops(2, channels, &[kind.op()], rng)
}

/// Trainable parameter elements; BN running statistics are not counted.
pub fn count_adapter_params(adapter: &FixedAdapter) -> usize {
    adapter.param_count_where(&|_| true)
}
