//! The shared convolutional trunk: conv3x3 → BN → ReLU blocks with 2× average
//! pooling after every second block (except the last). Each block output is a
//! plugging location for a domain adapter.
//!
//! # Checkpoint layout
//!
//! All integers are little-endian `u32` unless noted.
//!
//! | field            | size                                  |
//! |------------------|---------------------------------------|
//! | magic `MDLTRUNK` | 8 bytes                               |
//! | version (= 1)    | 4                                     |
//! | n_layers, base   | 4 + 4                                 |
//! | input C, H, W    | 12                                    |
//! | widths           | 4 · n_layers                          |
//! | downsample flags | 1 byte per layer                      |
//! | frozen flag      | 1 byte                                |
//! | parameter blob   | fp32 LE, see [`TrunkModel::checksum`] |
//! | checksum         | 32 bytes, SHA-256 of the blob         |

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::nn::{self, BatchNormLayer, Conv2dLayer, CosineSchedule, Linear, LossKind, Mode, Optimizer, ParamKind, Parameterized};
use crate::rng::Rng;

const MAGIC: &[u8; 8] = b"MDLTRUNK";
const VERSION: u32 = 1;

pub type Checksum = [u8; 32];

#[derive(Debug, Clone, PartialEq)]
pub struct TrunkBlock {
    pub conv: Conv2dLayer,
    pub bn: BatchNormLayer,
    pub downsample: bool,
}

impl TrunkBlock {
    fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, y, mode)?;
        self.finish(tape, y)
    }

    fn forward_eval(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward_eval(tape, y)?;
        self.finish(tape, y)
    }

    fn finish(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        let y = tape.relu(y)?;
        if self.downsample {
            tape.avg_pool2(y)
        } else {
            Ok(y)
        }
    }
}

impl Parameterized for TrunkBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind)) {
        self.conv.visit_params_ref(f);
        self.bn.visit_params_ref(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrunkModel {
    blocks: Vec<TrunkBlock>,
    input_shape: [usize; 3],
    base_channels: usize,
    frozen: bool,
}

/// Width of 0-based block `n`: doubles every two blocks.
fn block_width(base: usize, n: usize) -> usize {
    base << (n / 2)
}

impl TrunkModel {
    pub fn build(n_layers: usize, base_channels: usize, input_shape: [usize; 3], rng: &mut Rng) -> Result<Self> {
        if n_layers < 2 {
            return Err(Error::Invalid(format!("trunk needs at least 2 layers, got {n_layers}")));
        }
        if base_channels == 0 || input_shape.contains(&0) {
            return Err(Error::Invalid(format!(
                "invalid trunk shape: base {base_channels}, input {input_shape:?}"
            )));
        }
        if n_layers > 24 {
            return Err(Error::Invalid(format!("{n_layers} layers is beyond the supported depth")));
        }
        let [mut c, mut h, mut w] = input_shape;
        let mut blocks = Vec::with_capacity(n_layers);
        for n in 0..n_layers {
            let out = block_width(base_channels, n);
            let downsample = (n + 1) % 2 == 0 && n + 1 < n_layers;
            if downsample {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Invalid(format!(
                        "input {input_shape:?} cannot be halved after block {} ({h}x{w})",
                        n + 1
                    )));
                }
                h /= 2;
                w /= 2;
            }
            blocks.push(TrunkBlock {
                conv: Conv2dLayer::new(c, out, 3, 1, 1, rng)?,
                bn: BatchNormLayer::new(out),
                downsample,
            });
            c = out;
        }
        Ok(TrunkModel { blocks, input_shape, base_channels, frozen: false })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn blocks(&self) -> &[TrunkBlock] {
        &self.blocks
    }

    pub fn widths(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.conv.out_channels()).collect()
    }

    /// `[C, H, W]` of each block output.
    pub fn location_shapes(&self) -> Vec<[usize; 3]> {
        let [_, mut h, mut w] = self.input_shape;
        self.blocks
            .iter()
            .map(|b| {
                if b.downsample {
                    h /= 2;
                    w /= 2;
                }
                [b.conv.out_channels(), h, w]
            })
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.conv.out_channels())
    }

    /// Trainable trunk parameters; running statistics are not counted.
    pub fn param_count(&self) -> usize {
        self.param_count_where(&|_| true)
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::shape("trunk", format!("input {:?} for trunk input {:?}", s, self.input_shape)));
        }
        Ok(())
    }

    /// Applies block `n` (0-based) in eval mode.
    pub fn block_forward(&self, tape: &mut Tape, n: usize, x: Var) -> Result<Var> {
        if n == 0 {
            self.check_input(tape, x)?;
        }
        self.blocks[n].forward_eval(tape, x)
    }

    /// Applies block `n` in the given mode. Train mode is refused once frozen.
    pub fn block_forward_mut(&mut self, tape: &mut Tape, n: usize, x: Var, mode: Mode) -> Result<Var> {
        if let Mode::Train { .. } = mode {
            if self.frozen {
                return Err(Error::Invalid("train-mode forward through a frozen trunk".into()));
            }
        }
        if n == 0 {
            self.check_input(tape, x)?;
        }
        self.blocks[n].forward(tape, x, mode)
    }

    /// Eval-mode outputs of every block, in order.
    pub fn forward_collect(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.n_layers());
        let mut h = x;
        for n in 0..self.n_layers() {
            h = self.block_forward(tape, n, h)?;
            outs.push(h);
        }
        Ok(outs)
    }

    /// Marks the trunk frozen; its parameters stop receiving gradients but
    /// still pass gradients through to upstream inputs.
    pub fn freeze(&mut self) -> Checksum {
        self.set_trainable(false);
        self.frozen = true;
        self.checksum()
    }

    /// Unfrozen copy, for full-network finetuning.
    pub fn unfrozen_copy(&self) -> TrunkModel {
        let mut t = self.clone();
        t.set_trainable(true);
        t.frozen = false;
        t
    }

    /// Per block: conv weight, conv bias, BN gamma, beta, running mean,
    /// running var, each as little-endian fp32.
    fn param_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut put = |v: &[f32]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for b in &self.blocks {
            put(b.conv.weight.data());
            put(b.conv.bias.data());
            put(b.bn.gamma.data());
            put(b.bn.beta.data());
            put(&b.bn.running_mean);
            put(&b.bn.running_var);
        }
        out
    }

    pub fn checksum(&self) -> Checksum {
        Sha256::digest(self.param_blob()).into()
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let u = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        u(&mut out, VERSION as usize);
        u(&mut out, self.n_layers());
        u(&mut out, self.base_channels);
        for d in self.input_shape {
            u(&mut out, d);
        }
        for w in self.widths() {
            u(&mut out, w);
        }
        out.extend(self.blocks.iter().map(|b| b.downsample as u8));
        out.push(self.frozen as u8);
        let blob = self.param_blob();
        let sum: Checksum = Sha256::digest(&blob).into();
        out.extend_from_slice(&blob);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a trunk checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let n_layers = r.u32()? as usize;
        let base = r.u32()? as usize;
        let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let widths: Vec<usize> = (0..n_layers).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let flags = r.take(n_layers)?.to_vec();
        let frozen = r.take(1)?[0] != 0;
        let blob_start = r.pos;

        // Rebuild the architecture, then overwrite every tensor from the blob.
        let mut trunk = TrunkModel::build(n_layers, base, input_shape, &mut crate::rng::seeded(0))?;
        if trunk.widths() != widths || trunk.blocks.iter().map(|b| b.downsample as u8).collect::<Vec<_>>() != flags {
            return Err(Error::Data("checkpoint header is inconsistent with its architecture".into()));
        }
        for b in &mut trunk.blocks {
            r.fill(b.conv.weight.data_mut())?;
            r.fill(b.conv.bias.data_mut())?;
            r.fill(b.bn.gamma.data_mut())?;
            r.fill(b.bn.beta.data_mut())?;
            r.fill(&mut b.bn.running_mean)?;
            r.fill(&mut b.bn.running_var)?;
        }
        let blob = &bytes[blob_start..r.pos];
        let stored = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint checksum".into()));
        }
        let found: Checksum = Sha256::digest(blob).into();
        if found[..] != stored[..] {
            return Err(Error::Checksum { expected: hex::encode(stored), found: hex::encode(found) });
        }
        if frozen {
            trunk.freeze();
        }
        Ok(trunk)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

impl Parameterized for TrunkModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind)) {
        for b in &mut self.blocks {
            b.visit_params(f);
        }
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind)) {
        for b in &self.blocks {
            b.visit_params_ref(f);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn fill(&mut self, dst: &mut [f32]) -> Result<()> {
        let src = self.take(4 * dst.len())?;
        for (d, c) in dst.iter_mut().zip(src.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }
}

/// Per-domain linear classifier over globally average-pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainHead {
    pub domain_id: String,
    pub linear: Linear,
}

impl DomainHead {
    pub fn new(domain_id: &str, features: usize, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        Ok(DomainHead { domain_id: domain_id.to_string(), linear: Linear::new(features, num_classes, rng)? })
    }

    pub fn num_classes(&self) -> usize {
        self.linear.output_dim()
    }

    /// Logits from a `[N, C, H, W]` feature map.
    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(features)?;
        self.linear.forward(tape, pooled)
    }
}

impl Parameterized for DomainHead {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind)) {
        self.linear.visit_params(f);
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind)) {
        self.linear.visit_params_ref(f);
    }
}

/// Row-wise argmax of a `[N, K]` logit block.
pub fn argmax_rows(logits: &[f32], k: usize) -> Vec<usize> {
    logits
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Evaluation batch size; only affects memory, not results.
pub const EVAL_BATCH: usize = 128;

/// Runs `logits_of` over `data` in chunks and returns the fraction of
/// argmax-correct predictions.
pub fn evaluate_accuracy(
    data: &Dataset,
    mut logits_of: impl FnMut(&mut Tape, Var) -> Result<Var>,
) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::Data("accuracy of an empty dataset".into()));
    }
    let [c, h, w] = data.shape();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let mut tape = Tape::new();
        let xv = tape.constant(&[chunk.len(), c, h, w], x)?;
        let logits = logits_of(&mut tape, xv)?;
        let k = tape.shape(logits)[1];
        let pred = argmax_rows(tape.value(logits), k);
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f32 / data.len() as f32)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PretrainHyper {
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        PretrainHyper { epochs: 5, learning_rate: 0.05, momentum: 0.9, weight_decay: 5e-4, batch_size: 32 }
    }
}

/// Trains the trunk jointly with an anchor head. Returns the held-out
/// accuracy and the head; the trunk stays unfrozen.
pub fn pretrain_trunk(
    trunk: &mut TrunkModel,
    train: &Dataset,
    test: &Dataset,
    hyper: &PretrainHyper,
    rng: &mut Rng,
) -> Result<(f32, DomainHead)> {
    if trunk.is_frozen() {
        return Err(Error::Invalid("cannot pretrain a frozen trunk".into()));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("pretraining needs non-empty train and test sets".into()));
    }
    let mut head = DomainHead::new("anchor", trunk.feature_dim(), train.num_classes(), rng)?;
    let bs = hyper.batch_size.min(train.len()).max(2);
    let steps_per_epoch = train.len().div_ceil(bs);
    let total = hyper.epochs * steps_per_epoch;
    let [c, h, w] = train.shape();
    if total > 0 {
        let schedule = CosineSchedule::new(hyper.learning_rate, total)?;
        let mut opt = Optimizer::sgd(hyper.learning_rate, hyper.momentum, hyper.weight_decay);
        let mut sampler = BatchSampler::new(train.len(), bs)?;
        let mut model = (&mut *trunk, &mut head);
        for step in 0..total {
            let idx = sampler.next_batch(rng);
            let (x, y) = train.batch(&idx);
            let mut tape = Tape::new();
            let mut hv = tape.constant(&[idx.len(), c, h, w], x)?;
            for n in 0..model.0.n_layers() {
                hv = model.0.block_forward_mut(&mut tape, n, hv, Mode::TRAIN)?;
            }
            let logits = model.1.forward(&mut tape, hv)?;
            let l = nn::loss(&mut tape, logits, &y, LossKind::CrossEntropy)?;
            let lv = tape.value(l)[0];
            if !lv.is_finite() || lv > 1e4 {
                return Err(Error::Divergence { phase: "pretrain", loss: lv });
            }
            tape.backward(l)?;
            model.collect_grads(&tape)?;
            opt.learning_rate = schedule.lr(step)?;
            opt.step(&mut model, &|_| true)?;
            model.zero_grad();
        }
    }
    let acc = evaluate_accuracy(test, |tape, x| {
        let feats = trunk.forward_collect(tape, x)?;
        head.forward(tape, *feats.last().expect("at least two blocks"))
    })?;
    Ok((acc, head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain, GeneratorKind, SyntheticDomainSpec};
    use crate::rng::seeded;

    #[test]
    fn widths_follow_doubling_rule() {
        let t = TrunkModel::build(6, 16, [3, 16, 16], &mut seeded(0)).unwrap();
        assert_eq!(t.widths(), vec![16, 16, 32, 32, 64, 64]);
        assert_eq!(t.n_layers(), 6);
        let shapes = t.location_shapes();
        assert_eq!(shapes[1], [16, 8, 8]);
        assert_eq!(shapes[3], [32, 4, 4]);
        assert_eq!(shapes[5], [64, 4, 4]);
        let t2 = TrunkModel::build(2, 4, [3, 16, 16], &mut seeded(0)).unwrap();
        assert_eq!(t2.widths(), vec![4, 4]);
        assert!(!t2.blocks()[1].downsample);
        assert!(TrunkModel::build(1, 4, [3, 16, 16], &mut seeded(0)).is_err());
        assert!(TrunkModel::build(4, 4, [3, 5, 5], &mut seeded(0)).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = TrunkModel::build(4, 8, [3, 16, 16], &mut seeded(3)).unwrap();
        let b = TrunkModel::build(4, 8, [3, 16, 16], &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn param_count_excludes_running_stats() {
        let t = TrunkModel::build(2, 4, [3, 8, 8], &mut seeded(0)).unwrap();
        // conv 3→4: 108 + 4, bn 8; conv 4→4: 144 + 4, bn 8
        assert_eq!(t.param_count(), 112 + 8 + 148 + 8);
    }

    #[test]
    fn forward_collect_shapes_and_determinism() {
        let mut t = TrunkModel::build(6, 4, [3, 16, 16], &mut seeded(1)).unwrap();
        t.freeze();
        let x: Vec<f32> = normal(2 * 3 * 256, 9);
        let run = |t: &TrunkModel| {
            let mut tape = Tape::new();
            let xv = tape.constant(&[2, 3, 16, 16], x.clone()).unwrap();
            let outs = t.forward_collect(&mut tape, xv).unwrap();
            outs.iter().map(|&o| (tape.shape(o).to_vec(), tape.value(o).to_vec())).collect::<Vec<_>>()
        };
        let a = run(&t);
        assert_eq!(a.len(), 6);
        for (o, s) in a.iter().zip(t.location_shapes()) {
            assert_eq!(o.0[1..], s);
            assert!(o.1.iter().all(|v| v.is_finite()));
        }
        assert_eq!(a, run(&t));

        let mut tape = Tape::new();
        let bad = tape.constant(&[1, 3, 8, 8], vec![0.0; 192]).unwrap();
        assert!(t.forward_collect(&mut tape, bad).is_err());
    }

    fn normal(n: usize, seed: u64) -> Vec<f32> {
        crate::nn::normal_vec(&mut seeded(seed), n, 1.0)
    }

    #[test]
    fn freeze_is_idempotent_and_blocks_training() {
        let mut t = TrunkModel::build(2, 4, [3, 8, 8], &mut seeded(0)).unwrap();
        let a = t.freeze();
        assert_eq!(a, t.freeze());
        assert!(t.is_frozen());
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 3, 8, 8], normal(384, 1)).unwrap();
        assert!(t.block_forward_mut(&mut tape, 0, x, Mode::TRAIN).is_err());

        // gradients pass through to the input but not into the trunk
        let x = tape.leaf(&[2, 3, 8, 8], normal(384, 1), true).unwrap();
        let outs = t.forward_collect(&mut tape, x).unwrap();
        let l = tape.sum(outs[1]).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().iter().any(|g| *g != 0.0));
        t.collect_grads(&tape).unwrap();
        let mut any = false;
        t.visit_params_ref(&mut |p, _| any |= p.grad().is_some());
        assert!(!any);
        assert_eq!(a, t.checksum());
    }

    #[test]
    fn checkpoint_round_trip_and_tamper_detection() {
        let mut t = TrunkModel::build(4, 4, [3, 8, 8], &mut seeded(5)).unwrap();
        let sum = t.freeze();
        let bytes = t.to_checkpoint_bytes();
        let back = TrunkModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.checksum(), sum);
        assert!(back.is_frozen());
        assert_eq!(back, t);

        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        assert!(matches!(TrunkModel::from_checkpoint_bytes(&bad), Err(Error::Checksum { .. })));
        assert!(TrunkModel::from_checkpoint_bytes(&bytes[..20]).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(TrunkModel::from_checkpoint_bytes(&magic), Err(Error::Data(_))));
    }

    #[test]
    fn zero_epochs_is_chance_and_runs_repeat() {
        let spec = SyntheticDomainSpec::new(GeneratorKind::Shapes, 4, 10, 10);
        let (train, test) = generate_domain(&spec, 0).unwrap();
        let hyper = PretrainHyper { epochs: 0, ..Default::default() };
        let mut t = TrunkModel::build(2, 4, [3, 16, 16], &mut seeded(0)).unwrap();
        let (acc, _) = pretrain_trunk(&mut t, &train, &test, &hyper, &mut seeded(1)).unwrap();
        assert!(acc <= 0.5, "{acc}");

        let hyper = PretrainHyper { epochs: 1, batch_size: 8, ..Default::default() };
        let run = || {
            let mut t = TrunkModel::build(2, 4, [3, 16, 16], &mut seeded(0)).unwrap();
            let (acc, _) = pretrain_trunk(&mut t, &train, &test, &hyper, &mut seeded(1)).unwrap();
            (acc, t.checksum())
        };
        assert_eq!(run(), run());
    }
}
