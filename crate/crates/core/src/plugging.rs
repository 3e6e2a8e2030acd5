//! Where adapters are plugged: relaxed per-location gates over
//! (identity, adapter), their discretized masks, and handcrafted baselines.
//!
//! Locations are 0-based in code and 1-based in reports; mask bit-strings put
//! location 1 leftmost with `1` meaning plugged.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::adapter::{mixture_weights, Adapter};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Mode, ParamKind, Parameterized};
use crate::rng::seeded;
use crate::trunk::TrunkModel;

/// Per-location logits `[N, 2]`: column 0 identity, column 1 adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct PluggingState {
    pub beta: Tensor,
    mask: Option<Vec<bool>>,
}

impl PluggingState {
    pub fn new(locations: usize) -> Result<Self> {
        if locations == 0 {
            return Err(Error::Invalid("plugging state needs at least one location".into()));
        }
        Ok(PluggingState { beta: Tensor::zeros(&[locations, 2]).trainable(true), mask: None })
    }

    pub fn from_logits(logits: &[[f32; 2]]) -> Result<Self> {
        let mut s = Self::new(logits.len())?;
        s.beta.data_mut().copy_from_slice(&logits.concat());
        Ok(s)
    }

    pub fn locations(&self) -> usize {
        self.beta.shape()[0]
    }

    pub fn logits(&self, n: usize) -> [f32; 2] {
        let d = self.beta.data();
        [d[2 * n], d[2 * n + 1]]
    }

    /// `(w_identity, w_adapter)` at location `n`.
    pub fn weights(&self, n: usize) -> (f32, f32) {
        let w = mixture_weights(&self.logits(n));
        (w[0], w[1])
    }

    /// Derives and stores the mask.
    pub fn discretize(&mut self) -> Vec<bool> {
        let m = discretize_plugging(self);
        self.mask = Some(m.clone());
        m
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }
}

impl Parameterized for PluggingState {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind)) {
        f(&mut self.beta, ParamKind::Arch);
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind)) {
        f(&self.beta, ParamKind::Arch);
    }
}

/// Plugged iff the adapter logit is strictly larger; ties stay identity.
pub fn discretize_plugging(state: &PluggingState) -> Vec<bool> {
    (0..state.locations())
        .map(|n| {
            let [id, ad] = state.logits(n);
            ad > id
        })
        .collect()
}

fn check_adapters<A: Adapter>(trunk: &TrunkModel, adapters: &[A]) -> Result<()> {
    if adapters.len() != trunk.n_layers() {
        return Err(Error::shape(
            "plugging",
            format!("{} adapters for {} locations", adapters.len(), trunk.n_layers()),
        ));
    }
    for (n, (a, w)) in adapters.iter().zip(trunk.widths()).enumerate() {
        if a.channels() != w {
            return Err(Error::shape(
                "plugging",
                format!("adapter {} has {} channels, location width {w}", n + 1, a.channels()),
            ));
        }
    }
    Ok(())
}

/// Trunk forward where every location mixes identity and adapter by the
/// softmax of its gate logits. Returns the final feature map.
pub fn mixed_plug_forward<A: Adapter>(
    trunk: &TrunkModel,
    adapters: &mut [A],
    state: &PluggingState,
    tape: &mut Tape,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    check_adapters(trunk, adapters)?;
    if state.locations() != trunk.n_layers() {
        return Err(Error::shape(
            "plugging",
            format!("{} gates for {} locations", state.locations(), trunk.n_layers()),
        ));
    }
    let b = tape.param(&state.beta);
    let w = tape.softmax(b, 1)?;
    let mut h = x;
    for (n, adapter) in adapters.iter_mut().enumerate() {
        h = trunk.block_forward(tape, n, h)?;
        let a = adapter.forward(tape, h, mode)?;
        let keep = tape.scale_by(h, w, 2 * n)?;
        let plug = tape.scale_by(a, w, 2 * n + 1)?;
        h = tape.add(keep, plug)?;
    }
    Ok(h)
}

/// Trunk forward with adapters applied where present.
pub fn plugged_forward<A: Adapter>(
    trunk: &TrunkModel,
    adapters: &mut [Option<A>],
    tape: &mut Tape,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    if adapters.len() != trunk.n_layers() {
        return Err(Error::shape(
            "plugging",
            format!("{} slots for {} locations", adapters.len(), trunk.n_layers()),
        ));
    }
    let widths = trunk.widths();
    let mut h = x;
    for (n, slot) in adapters.iter_mut().enumerate() {
        h = trunk.block_forward(tape, n, h)?;
        if let Some(a) = slot {
            if a.channels() != widths[n] {
                return Err(Error::shape("plugging", format!("adapter {} width mismatch", n + 1)));
            }
            h = a.forward(tape, h, mode)?;
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    All,
    TopDown,
    BottomUp,
    Random,
    Searched,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::All => "all",
            StrategyKind::TopDown => "top-down",
            StrategyKind::BottomUp => "bottom-up",
            StrategyKind::Random => "random",
            StrategyKind::Searched => "searched",
        }
    }
}

/// Handcrafted mask with `n` of `total` locations plugged.
pub fn baseline_mask(kind: StrategyKind, n: usize, total: usize, seed: u64) -> Result<Vec<bool>> {
    if n > total {
        return Err(Error::Invalid(format!("budget {n} exceeds {total} locations")));
    }
    Ok(match kind {
        StrategyKind::All => vec![true; total],
        StrategyKind::TopDown => (0..total).map(|i| i < n).collect(),
        StrategyKind::BottomUp => (0..total).map(|i| i >= total - n).collect(),
        StrategyKind::Random => {
            let mut m = vec![false; total];
            for i in sample(&mut seeded(seed), total, n) {
                m[i] = true;
            }
            m
        }
        StrategyKind::Searched => {
            return Err(Error::Invalid("the searched strategy has no handcrafted mask".into()));
        }
    })
}

pub fn mask_bits(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

pub fn parse_mask_bits(bits: &str) -> Result<Vec<bool>> {
    bits.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(Error::Invalid(format!("mask bit-string {bits:?} must contain only 0 and 1"))),
        })
        .collect()
}

/// 1-based indices of plugged locations.
pub fn plugged_locations(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i + 1).collect()
}

/// Parameters used by the plugged adapters, absolute and as a percentage of
/// plugging every location.
pub fn plug_param_usage(mask: &[bool], counts: &[usize]) -> Result<(usize, f64)> {
    if counts.is_empty() {
        return Err(Error::Invalid("no adapters to account for".into()));
    }
    if mask.len() != counts.len() {
        return Err(Error::shape("plug_param_usage", format!("mask {} vs {} adapters", mask.len(), counts.len())));
    }
    let used: usize = mask.iter().zip(counts).filter(|(&m, _)| m).map(|(_, c)| c).sum();
    let all: usize = counts.iter().sum();
    let pct = if all == 0 { 0.0 } else { 100.0 * used as f64 / all as f64 };
    Ok((used, pct))
}
