use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use super::tensor::{numel, Tensor, TensorId};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Primitive kinds accepted by [`Tape::record`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Mul,
    MatMul,
    Reshape(Vec<usize>),
    Concat(usize),
    Sum,
    Mean,
    Max,
    Exp,
    Log,
    Relu,
    Softmax(usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    ScaleBy { x: usize, s: usize, k: usize },
    AddRow { x: usize, b: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Sum(usize),
    Mean(usize),
    Max { x: usize, arg: usize },
    Exp(usize),
    Log(usize),
    Relu(usize),
    Softmax { x: usize, axis: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, batch: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f32>, inv_std: Vec<f32> },
    ChannelAffine { x: usize, scale: usize, shift: usize },
    AvgPool2(usize),
    GlobalAvgPool(usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    requires_grad: bool,
    op: Op,
}

/// Batch statistics produced by [`Tape::batch_norm`].
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f32>,
    pub count: usize,
}

/// Reverse-mode tape: an append-only list of primitive applications.
///
/// Entries are in topological order by construction since every op only
/// refers to values already on the tape.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f32>>>,
    params: HashMap<TensorId, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// (N, C, spatial size) for a channel-major tensor of rank ≥ 2.
fn channel_split(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, requires_grad, op });
        self.leaf_grads.push(None);
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::ForeignTensor);
        }
        self.nodes.get(v.idx).ok_or(Error::ForeignTensor)
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a leaf holding a copy of `data`.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f32>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() || shape.is_empty() {
            return Err(Error::shape("leaf", format!("{shape:?} vs {} values", data.len())));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    /// Binds a tensor as a leaf. Binding the same tensor twice returns the
    /// same variable.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(&idx) = self.params.get(&t.id()) {
            return Var { tape: self.id, idx };
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf);
        self.params.insert(t.id(), v.idx);
        v
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).expect("var from this tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).expect("var from this tape").shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v).expect("var from this tape");
        Tensor::new(n.shape.clone(), n.value.clone()).expect("consistent node")
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.node(v).ok()?;
        self.leaf_grads[v.idx].as_deref()
    }

    /// Adds the gradient recorded for `t` into `t.grad`.
    pub fn accumulate_grad(&self, t: &mut Tensor) -> Result<()> {
        if let Some(&idx) = self.params.get(&t.id()) {
            if let Some(g) = &self.leaf_grads[idx] {
                t.accumulate(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // --- generic entry point ------------------------------------------------

    pub fn record(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Invalid(format!("{prim:?} expects {n} inputs, got {}", inputs.len())))
            }
        };
        match prim {
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Reshape(ref shape) => {
                arity(1)?;
                self.reshape(inputs[0], shape)
            }
            Primitive::Concat(axis) => self.concat(inputs, axis),
            Primitive::Sum => {
                arity(1)?;
                self.sum(inputs[0])
            }
            Primitive::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
            Primitive::Max => {
                arity(1)?;
                self.max(inputs[0])
            }
            Primitive::Exp => {
                arity(1)?;
                self.exp(inputs[0])
            }
            Primitive::Log => {
                arity(1)?;
                self.log(inputs[0])
            }
            Primitive::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            Primitive::Softmax(axis) => {
                arity(1)?;
                self.softmax(inputs[0], axis)
            }
        }
    }

    // --- elementwise ----------------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape != nb.shape {
            return Err(Error::shape(name, format!("{:?} vs {:?}", na.shape, nb.shape)));
        }
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let shape = na.shape.clone();
        let rg = self.rg(&[a.idx, b.idx]);
        Ok(self.push(shape, value, rg, op(a.idx, b.idx)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let n = self.node(x)?;
        let value = n.value.iter().map(|&v| f(v)).collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        Ok(self.push(shape, value, rg, op(x.idx)))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        self.unary(x, |v| v * c, |i| Op::Scale(i, c))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f32::exp, Op::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f32::ln, Op::Log)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    /// `x · s[k]`: scales a whole tensor by one coordinate of another.
    pub fn scale_by(&mut self, x: Var, s: Var, k: usize) -> Result<Var> {
        let factor = {
            let ns = self.node(s)?;
            *ns.value
                .get(k)
                .ok_or_else(|| Error::shape("scale_by", format!("index {k} into {:?}", ns.shape)))?
        };
        let n = self.node(x)?;
        let value = n.value.iter().map(|v| v * factor).collect();
        let shape = n.shape.clone();
        let rg = self.rg(&[x.idx, s.idx]);
        Ok(self.push(shape, value, rg, Op::ScaleBy { x: x.idx, s: s.idx, k }))
    }

    /// Adds a vector along the last axis.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (nx, nb) = (self.node(x)?, self.node(b)?);
        let k = *nx.shape.last().unwrap();
        if nb.value.len() != k {
            return Err(Error::shape("add_row", format!("{:?} vs {:?}", nx.shape, nb.shape)));
        }
        let value = nx
            .value
            .chunks(k)
            .flat_map(|row| row.iter().zip(&nb.value).map(|(a, b)| a + b))
            .collect();
        let shape = nx.shape.clone();
        let rg = self.rg(&[x.idx, b.idx]);
        Ok(self.push(shape, value, rg, Op::AddRow { x: x.idx, b: b.idx }))
    }

    // --- structural -----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(Error::shape("matmul", format!("{:?} vs {:?}", na.shape, nb.shape)));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut value = vec![0.0; m * n];
        kernels::gemm(m, k, n, &na.value, false, &nb.value, false, &mut value, false);
        let rg = self.rg(&[a.idx, b.idx]);
        Ok(self.push(vec![m, n], value, rg, Op::MatMul { a: a.idx, b: b.idx, m, k, n }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(x)?;
        if numel(shape) != n.value.len() || shape.is_empty() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", n.shape)));
        }
        let value = n.value.clone();
        let rg = n.requires_grad;
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(x.idx)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.node(*inputs.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?)?;
        let base = first.shape.clone();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = &self.node(v)?.shape;
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut value = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let n = &self.nodes[v.idx];
                let chunk = n.shape[axis] * inner;
                value.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let idx: Vec<usize> = inputs.iter().map(|v| v.idx).collect();
        let rg = self.rg(&idx);
        Ok(self.push(shape, value, rg, Op::Concat { inputs: idx, axis }))
    }

    // --- reductions -----------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let s = n.value.iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = n.requires_grad;
        Ok(self.push(vec![1], vec![s], rg, Op::Sum(x.idx)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let s = (n.value.iter().map(|&v| v as f64).sum::<f64>() / n.value.len() as f64) as f32;
        let rg = n.requires_grad;
        Ok(self.push(vec![1], vec![s], rg, Op::Mean(x.idx)))
    }

    /// Global maximum; the gradient flows to the first maximizing entry.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let (arg, &m) = n
            .value
            .iter()
            .enumerate()
            .fold((0, &f32::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        let rg = n.requires_grad;
        Ok(self.push(vec![1], vec![m], rg, Op::Max { x: x.idx, arg }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.node(x)?;
        if axis >= n.shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", n.shape)));
        }
        let (outer, len, inner) = axis_split(&n.shape, axis);
        let mut value = n.value.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| value[at(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (value[at(j)] - m).exp();
                    value[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    value[at(j)] /= z;
                }
            }
        }
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        Ok(self.push(shape, value, rg, Op::Softmax { x: x.idx, axis }))
    }

    // --- neural primitives ----------------------------------------------------

    /// 2-D convolution of `x: [N,C,H,W]` with `w: [O,C,k,k]` and optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (nx, nw) = (self.node(x)?, self.node(w)?);
        let (xs, ws) = (&nx.shape, &nw.shape);
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::shape("conv2d", format!("input {xs:?} vs kernel {ws:?}")));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::shape("conv2d", format!("kernel {ws:?} larger than input {xs:?}")));
        }
        let geom = ConvGeom { in_ch: xs[1], out_ch: ws[0], h: xs[2], w: xs[3], k: ws[2], stride, pad };
        if let Some(b) = b {
            let nb = self.node(b)?;
            if nb.value.len() != geom.out_ch {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", nb.shape, geom.out_ch)));
            }
        }
        let batch = xs[0];
        let bias = b.map(|b| self.nodes[b.idx].value.as_slice());
        let value = kernels::conv2d_forward(&geom, batch, &nx.value, &nw.value, bias);
        let (ho, wo) = geom.out_hw();
        let mut idx = vec![x.idx, w.idx];
        idx.extend(b.map(|b| b.idx));
        let rg = self.rg(&idx);
        Ok(self.push(
            vec![batch, geom.out_ch, ho, wo],
            value,
            rg,
            Op::Conv2d { x: x.idx, w: w.idx, b: b.map(|b| b.idx), geom, batch },
        ))
    }

    /// Normalizes over every axis except 1 using batch statistics, then applies
    /// the per-channel affine map.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, BatchStats)> {
        let nx = self.node(x)?;
        if nx.shape.len() < 2 {
            return Err(Error::shape("batch_norm", format!("{:?}", nx.shape)));
        }
        let (n, c, sp) = channel_split(&nx.shape);
        let (ng, nb) = (self.node(gamma)?, self.node(beta)?);
        if ng.value.len() != c || nb.value.len() != c {
            return Err(Error::shape("batch_norm", format!("{:?} with gamma {:?}", nx.shape, ng.shape)));
        }
        let count = n * sp;
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for b in 0..n {
                s += nx.value[(b * c + ch) * sp..(b * c + ch + 1) * sp].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mu = s / count as f64;
            let mut q = 0.0f64;
            for b in 0..n {
                q += nx.value[(b * c + ch) * sp..(b * c + ch + 1) * sp]
                    .iter()
                    .map(|&v| (v as f64 - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = mu as f32;
            var[ch] = (q / count as f64) as f32;
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; nx.value.len()];
        let mut value = vec![0.0; nx.value.len()];
        for b in 0..n {
            for ch in 0..c {
                for s in 0..sp {
                    let i = (b * c + ch) * sp + s;
                    xhat[i] = (nx.value[i] - mean[ch]) * inv_std[ch];
                    value[i] = ng.value[ch] * xhat[i] + nb.value[ch];
                }
            }
        }
        let shape = nx.shape.clone();
        let rg = self.rg(&[x.idx, gamma.idx, beta.idx]);
        let out = self.push(
            shape,
            value,
            rg,
            Op::BatchNorm { x: x.idx, gamma: gamma.idx, beta: beta.idx, xhat, inv_std },
        );
        Ok((out, BatchStats { mean, var, count }))
    }

    /// `y[:, c, ...] = x[:, c, ...] · scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (nx, na, nb) = (self.node(x)?, self.node(scale)?, self.node(shift)?);
        if nx.shape.len() < 2 || na.value.len() != nx.shape[1] || nb.value.len() != nx.shape[1] {
            return Err(Error::shape("channel_affine", format!("{:?} with {:?}", nx.shape, na.shape)));
        }
        let (n, c, sp) = channel_split(&nx.shape);
        let mut value = vec![0.0; nx.value.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * sp;
                for s in 0..sp {
                    value[base + s] = nx.value[base + s] * na.value[ch] + nb.value[ch];
                }
            }
        }
        let shape = nx.shape.clone();
        let rg = self.rg(&[x.idx, scale.idx, shift.idx]);
        Ok(self.push(shape, value, rg, Op::ChannelAffine { x: x.idx, scale: scale.idx, shift: shift.idx }))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let nx = self.node(x)?;
        let s = &nx.shape;
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("{s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut value = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            let src = &nx.value[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = 2 * oy * w + 2 * ox;
                    value[(p * ho + oy) * wo + ox] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let shape = vec![s[0], s[1], ho, wo];
        let rg = nx.requires_grad;
        Ok(self.push(shape, value, rg, Op::AvgPool2(x.idx)))
    }

    /// Mean over spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let nx = self.node(x)?;
        if nx.shape.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{:?}", nx.shape)));
        }
        let (n, c, sp) = channel_split(&nx.shape);
        let value = nx.value.chunks(sp).map(|p| p.iter().sum::<f32>() / sp as f32).collect();
        let rg = nx.requires_grad;
        Ok(self.push(vec![n, c], value, rg, Op::GlobalAvgPool(x.idx)))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let nl = self.node(logits)?;
        if nl.shape.len() != 2 || nl.shape[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} vs {} labels", nl.shape, labels.len()),
            ));
        }
        let (n, k) = (nl.shape[0], nl.shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &nl.value[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / z;
            }
            loss += (z.ln() + m - row[label]) as f64;
        }
        let value = vec![(loss / n as f64) as f32];
        let rg = nl.requires_grad;
        Ok(self.push(
            vec![1],
            value,
            rg,
            Op::CrossEntropy { logits: logits.idx, labels: labels.to_vec(), probs },
        ))
    }

    // --- backward -------------------------------------------------------------

    /// Propagates d(loss)/d(node) to every leaf that requires gradients.
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.node(loss)?;
        if n.value.len() != 1 {
            return Err(Error::NonScalarLoss(n.shape.clone()));
        }
        if !n.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(vec![1.0]);
        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        // Lazily allocates the gradient slot of `j` when it needs one.
        let mut slot = |j: usize, f: &mut dyn FnMut(&mut [f32])| {
            if nodes[j].requires_grad {
                let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
                f(buf);
            }
        };
        let add_into = |buf: &mut [f32], src: &[f32]| buf.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                slot(*a, &mut |buf| add_into(buf, g));
                slot(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                slot(*a, &mut |buf| add_into(buf, g));
                slot(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                slot(*a, &mut |buf| {
                    buf.iter_mut().zip(g.iter().zip(vb)).for_each(|(x, (d, y))| *x += d * y)
                });
                slot(*b, &mut |buf| {
                    buf.iter_mut().zip(g.iter().zip(va)).for_each(|(x, (d, y))| *x += d * y)
                });
            }
            Op::Scale(x, c) => slot(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(a, d)| *a += d * c)),
            Op::ScaleBy { x, s, k } => {
                let factor = nodes[*s].value[*k];
                let vx = &nodes[*x].value;
                slot(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(a, d)| *a += d * factor));
                slot(*s, &mut |buf| {
                    buf[*k] += g.iter().zip(vx).map(|(d, v)| (d * v) as f64).sum::<f64>() as f32
                });
            }
            Op::AddRow { x, b } => {
                slot(*x, &mut |buf| add_into(buf, g));
                let k = nodes[*b].value.len();
                slot(*b, &mut |buf| {
                    for row in g.chunks(k) {
                        add_into(buf, row);
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                // dA = G·Bᵀ, dB = Aᵀ·G
                slot(*a, &mut |buf| kernels::gemm(*m, *n, *k, g, false, vb, true, buf, true));
                slot(*b, &mut |buf| kernels::gemm(*k, *m, *n, va, true, g, false, buf, true));
            }
            Op::Reshape(x) => slot(*x, &mut |buf| add_into(buf, g)),
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(&node.shape, *axis);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &j in inputs {
                    let chunk = nodes[j].shape[*axis] * inner;
                    slot(j, &mut |buf| {
                        for o in 0..outer {
                            add_into(
                                &mut buf[o * chunk..(o + 1) * chunk],
                                &g[o * total + offset..o * total + offset + chunk],
                            );
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Sum(x) => slot(*x, &mut |buf| buf.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let d = g[0] / nodes[*x].value.len() as f32;
                slot(*x, &mut |buf| buf.iter_mut().for_each(|a| *a += d))
            }
            Op::Max { x, arg } => slot(*x, &mut |buf| buf[*arg] += g[0]),
            Op::Exp(x) => {
                let y = &node.value;
                slot(*x, &mut |buf| buf.iter_mut().zip(g.iter().zip(y)).for_each(|(a, (d, y))| *a += d * y))
            }
            Op::Log(x) => {
                let v = &nodes[*x].value;
                slot(*x, &mut |buf| buf.iter_mut().zip(g.iter().zip(v)).for_each(|(a, (d, v))| *a += d / v))
            }
            Op::Relu(x) => {
                let v = &nodes[*x].value;
                slot(*x, &mut |buf| {
                    buf.iter_mut()
                        .zip(g.iter().zip(v))
                        .for_each(|(a, (d, v))| if *v > 0.0 { *a += d })
                })
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                slot(*x, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f32 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                buf[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                })
            }
            Op::Conv2d { x, w, b, geom, batch } => {
                let (vx, vw) = (&nodes[*x].value, &nodes[*w].value);
                let want = |j: usize| nodes[j].requires_grad;
                let mut dx = want(*x).then(|| vec![0.0; vx.len()]);
                let mut dw = want(*w).then(|| vec![0.0; vw.len()]);
                let mut db = b.filter(|&j| want(j)).map(|_| vec![0.0; geom.out_ch]);
                kernels::conv2d_backward(
                    geom,
                    *batch,
                    vx,
                    vw,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    slot(*x, &mut |buf| add_into(buf, &d));
                }
                if let Some(d) = dw {
                    slot(*w, &mut |buf| add_into(buf, &d));
                }
                if let (Some(d), Some(j)) = (db, b) {
                    slot(*j, &mut |buf| add_into(buf, &d));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c, sp) = channel_split(&node.shape);
                let m = (n * sp) as f32;
                let vg = &nodes[*gamma].value;
                let mut sum_g = vec![0.0f32; c];
                let mut sum_gx = vec![0.0f32; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * sp;
                        for s in 0..sp {
                            sum_g[ch] += g[base + s];
                            sum_gx[ch] += g[base + s] * xhat[base + s];
                        }
                    }
                }
                slot(*beta, &mut |buf| add_into(buf, &sum_g));
                slot(*gamma, &mut |buf| add_into(buf, &sum_gx));
                slot(*x, &mut |buf| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let k = vg[ch] * inv_std[ch] / m;
                            for s in 0..sp {
                                let i = base + s;
                                buf[i] += k * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                });
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (n, c, sp) = channel_split(&node.shape);
                let (vx, va) = (&nodes[*x].value, &nodes[*scale].value);
                slot(*x, &mut |buf| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            for s in 0..sp {
                                buf[base + s] += g[base + s] * va[ch];
                            }
                        }
                    }
                });
                slot(*scale, &mut |buf| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            buf[ch] += (0..sp).map(|s| g[base + s] * vx[base + s]).sum::<f32>();
                        }
                    }
                });
                slot(*shift, &mut |buf| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            buf[ch] += g[base..base + sp].iter().sum::<f32>();
                        }
                    }
                });
            }
            Op::AvgPool2(x) => {
                let s = &nodes[*x].shape;
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                slot(*x, &mut |buf| {
                    for p in 0..planes {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let d = 0.25 * g[(p * ho + oy) * wo + ox];
                                let i = p * h * w + 2 * oy * w + 2 * ox;
                                buf[i] += d;
                                buf[i + 1] += d;
                                buf[i + w] += d;
                                buf[i + w + 1] += d;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, sp) = channel_split(&nodes[*x].shape);
                slot(*x, &mut |buf| {
                    for (plane, d) in buf.chunks_mut(sp).zip(g) {
                        let d = d / sp as f32;
                        plane.iter_mut().for_each(|a| *a += d);
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f32;
                slot(*logits, &mut |buf| {
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == label { 1.0 } else { 0.0 };
                            buf[i * k + j] += scale * (probs[i * k + j] - target);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(tape: &mut Tape, shape: &[usize], data: &[f32]) -> Var {
        tape.leaf(shape, data.to_vec(), true).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut t = Tape::new();
        let a = v(&mut t, &[2], &[1.0, 2.0]);
        let b = v(&mut t, &[2], &[3.0, 4.0]);
        let c = t.record(Primitive::Add, &[a, b]).unwrap();
        assert_eq!(t.value(c), &[4.0, 6.0]);
        assert!(t.requires_grad(c));
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[3, 4], (0..12).map(|i| i as f32 - 3.3).collect()).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 4]);
        assert!(t.value(c).iter().all(|&x| x == 0.0));
        assert!(!t.requires_grad(c));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let a = t.constant(&[4], vec![0.0; 4]).unwrap();
        let s = t.softmax(a, 0).unwrap();
        assert_eq!(t.value(s), &[0.25; 4]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = t.constant(&[3], vec![0.0; 3]).unwrap();
        assert!(t.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = v(&mut t, &[3], &[0.5, -1.0, 2.0]);
        let l = t.sum(x).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = v(&mut t, &[2], &[1.0, 2.0]);
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_doubles() {
        let mut t = Tape::new();
        let x = v(&mut t, &[2], &[1.0, -3.0]);
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq).unwrap();
        t.backward(l).unwrap();
        let once = t.grad(x).unwrap().to_vec();
        t.backward(l).unwrap();
        let twice = t.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn non_scalar_and_foreign_losses_rejected() {
        let mut t = Tape::new();
        let x = v(&mut t, &[2], &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
        let mut other = Tape::new();
        let y = v(&mut other, &[1], &[1.0]);
        assert!(matches!(t.backward(y), Err(Error::ForeignTensor)));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = v(&mut t, &[3], &[-1.0, 0.0, 1.0]);
        let r = t.relu(x).unwrap();
        let l = t.sum(r).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn params_bind_once_and_route_gradients() {
        let mut w = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap().trainable(true);
        let frozen = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let mut t = Tape::new();
        let a = t.param(&w);
        let b = t.param(&w);
        assert_eq!(a, b);
        let f = t.param(&frozen);
        let p = t.mul(a, f).unwrap();
        let l = t.sum(p).unwrap();
        t.backward(l).unwrap();
        t.accumulate_grad(&mut w).unwrap();
        assert_eq!(w.grad().unwrap(), &[1.0, 1.0]);
        assert!(t.grad(f).is_none());
    }

    #[test]
    fn concat_and_reshape_layout() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = t.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let r = t.reshape(c, &[3, 2]).unwrap();
        assert_eq!(t.shape(r), &[3, 2]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut t = Tape::new();
        let z = t.constant(&[2, 4], vec![0.0; 8]).unwrap();
        let l = t.softmax_cross_entropy(z, &[0, 3]).unwrap();
        assert!((t.value(l)[0] - 4f32.ln()).abs() < 1e-6);
        assert!(t.softmax_cross_entropy(z, &[0, 4]).is_err());
    }
}
