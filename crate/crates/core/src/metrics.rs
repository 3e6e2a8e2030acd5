//! Evaluation metrics: accuracy, the per-domain error score, parameter and
//! multiply-add accounting, and ablation statistics over repeated runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{parse_signature, FixedAdapter, OpKind};
use crate::error::{Error, Result};
use crate::trainer::{model_accuracy, AdaptationModel, MdlModel};
use crate::data::Dataset;
use crate::trunk::TrunkModel;

/// Eval-mode test accuracy of an adapted domain model.
pub fn accuracy(model: &mut AdaptationModel, trunk: &TrunkModel, test: &Dataset) -> Result<f32> {
    model_accuracy(model, trunk, test)
}

/// Per-domain test errors against full-finetune reference errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreInput {
    pub errors: Vec<f64>,
    pub baseline_errors: Vec<f64>,
}

impl ScoreInput {
    pub fn max_errors(&self) -> Vec<f64> {
        self.baseline_errors.iter().map(|e| 2.0 * e).collect()
    }

    /// `1000 / E_max²`: a zero-error domain scores exactly 1000.
    pub fn lambdas(&self) -> Vec<f64> {
        self.max_errors().iter().map(|m| 1000.0 / (m * m)).collect()
    }
}

/// `Σ λ_d · max(0, E_max_d − E_d)²` with `E_max_d = 2·E_base_d`.
pub fn decathlon_score(input: &ScoreInput) -> Result<f64> {
    if input.errors.len() != input.baseline_errors.len() {
        return Err(Error::shape(
            "score",
            format!("{} errors, {} baselines", input.errors.len(), input.baseline_errors.len()),
        ));
    }
    for (d, (&e, &b)) in input.errors.iter().zip(&input.baseline_errors).enumerate() {
        if !(0.0..=1.0).contains(&e) {
            return Err(Error::Invalid(format!("domain {d}: error {e} outside [0, 1]")));
        }
        if !(b > 0.0 && b <= 1.0) {
            return Err(Error::Invalid(format!("domain {d}: baseline error {b} must be in (0, 1]")));
        }
    }
    Ok(input
        .errors
        .iter()
        .zip(input.max_errors())
        .zip(input.lambdas())
        .map(|((&e, m), l)| l * (m - e).max(0.0).powi(2))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub domain: String,
    pub adapter_params: usize,
    /// Relative to the same structures plugged at every location.
    pub percent_of_all_plugged: f64,
}

/// Trunk-relative model size; classifiers are reported but not counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub trunk_params: usize,
    pub domains: Vec<DomainParams>,
    pub classifier_params: usize,
    pub total_params: usize,
    pub total_ratio: f64,
}

impl ParamReport {
    pub fn new(trunk_params: usize, domains: Vec<DomainParams>, classifier_params: usize) -> Result<Self> {
        if trunk_params == 0 {
            return Err(Error::Invalid("trunk has no parameters".into()));
        }
        let total_params = trunk_params + domains.iter().map(|d| d.adapter_params).sum::<usize>();
        Ok(ParamReport {
            trunk_params,
            domains,
            classifier_params,
            total_params,
            total_ratio: total_params as f64 / trunk_params as f64,
        })
    }
}

pub fn param_report(mdl: &MdlModel) -> Result<ParamReport> {
    let domains = mdl
        .domains
        .iter()
        .map(|d| DomainParams {
            domain: d.result.domain.clone(),
            adapter_params: d.model.adapter_param_count(),
            percent_of_all_plugged: d.result.adapter_params_percent,
        })
        .collect();
    ParamReport::new(mdl.trunk.param_count(), domains, mdl.classifier_params())
}

fn op_macs(kind: OpKind, [c, h, w]: [usize; 3]) -> u64 {
    let map = (c * h * w) as u64;
    match kind {
        OpKind::Conv1x1 | OpKind::IdentityShortcut => c as u64 * map,
        OpKind::BatchNorm => map,
        OpKind::Skip => 0,
    }
}

/// Multiply-adds of one adapter on a `[C, H, W]` map.
pub fn adapter_flops(adapter: &FixedAdapter, shape: [usize; 3]) -> u64 {
    adapter.ops().into_iter().map(|k| op_macs(k, shape)).sum()
}

/// Multiply-adds of the frozen trunk for one sample: convs, BN and ReLU.
pub fn trunk_flops(trunk: &TrunkModel) -> u64 {
    let [_, mut h, mut w] = trunk.input_shape();
    let mut total = 0u64;
    for b in trunk.blocks() {
        let (ho, wo) = b.conv.output_hw(h, w);
        let k = b.conv.kernel();
        let co = b.conv.out_channels() as u64;
        let map = co * (ho * wo) as u64;
        total += map * (b.conv.in_channels() * k * k) as u64 + 2 * map;
        h = ho;
        w = wo;
        if b.downsample {
            h /= 2;
            w /= 2;
        }
    }
    total
}

/// Per-sample multiply-adds of trunk, plugged adapters and head.
pub fn flop_estimate(trunk: &TrunkModel, model: &AdaptationModel) -> u64 {
    let adapters: u64 = model
        .slots
        .iter()
        .zip(trunk.location_shapes())
        .filter_map(|(s, shape)| s.as_ref().map(|a| adapter_flops(a, shape)))
        .sum();
    let head = (model.head.linear.input_dim() * model.head.linear.output_dim()) as u64;
    trunk_flops(trunk) + adapters + head
}

/// Fraction of runs plugging each location.
pub fn location_frequency(run_masks: &[Vec<bool>]) -> Result<Vec<f64>> {
    let first = run_masks.first().ok_or_else(|| Error::Invalid("no runs".into()))?;
    let n = first.len();
    if let Some(r) = run_masks.iter().position(|m| m.len() != n) {
        return Err(Error::shape("location frequency", format!("run {r} has {} locations, expected {n}", run_masks[r].len())));
    }
    let r = run_masks.len() as f64;
    Ok((0..n).map(|i| run_masks.iter().filter(|m| m[i]).count() as f64 / r).collect())
}

/// Parameter count of a structure signature at `channels` width.
pub fn signature_param_count(signature: &str, channels: usize) -> Result<usize> {
    let (_, ops) = parse_signature(signature)?;
    Ok(ops.iter().map(|k| k.param_count(channels)).sum())
}

/// Searched structures of one domain over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStructureRuns {
    pub domain: String,
    pub complexity_rank: Option<u32>,
    /// `[R][N]` signatures.
    pub runs: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDistribution {
    pub domain: String,
    pub complexity_rank: u32,
    /// Signature counts at each location; each sums to the run count.
    pub per_location: Vec<BTreeMap<String, usize>>,
    /// Mean over runs and locations of the structure parameter count.
    pub mean_param_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureDistribution {
    pub domains: Vec<DomainDistribution>,
    /// `None` when either ranking has zero variance.
    pub spearman: Option<f64>,
}

/// Histograms per domain and the rank correlation between complexity rank
/// and structure cost. `widths` are the location channel counts.
pub fn structure_distribution(runs: &[DomainStructureRuns], widths: &[usize]) -> Result<StructureDistribution> {
    if runs.len() < 2 {
        return Err(Error::Invalid("structure distribution needs at least 2 domains".into()));
    }
    let mut domains = Vec::with_capacity(runs.len());
    for d in runs {
        let rank = d
            .complexity_rank
            .ok_or_else(|| Error::Invalid(format!("domain {} has no complexity rank", d.domain)))?;
        if d.runs.is_empty() {
            return Err(Error::Invalid(format!("domain {} has no runs", d.domain)));
        }
        let mut per_location = vec![BTreeMap::new(); widths.len()];
        let mut cost = 0.0;
        for (r, sigs) in d.runs.iter().enumerate() {
            if sigs.len() != widths.len() {
                return Err(Error::shape("structure distribution", format!("{} run {r}: {} signatures", d.domain, sigs.len())));
            }
            for ((sig, hist), &c) in sigs.iter().zip(&mut per_location).zip(widths) {
                cost += signature_param_count(sig, c)? as f64;
                *hist.entry(sig.clone()).or_insert(0) += 1;
            }
        }
        let mean_param_count = cost / (d.runs.len() * widths.len().max(1)) as f64;
        domains.push(DomainDistribution { domain: d.domain.clone(), complexity_rank: rank, per_location, mean_param_count });
    }
    let ranks: Vec<f64> = domains.iter().map(|d| d.complexity_rank as f64).collect();
    let costs: Vec<f64> = domains.iter().map(|d| d.mean_param_count).collect();
    Ok(StructureDistribution { spearman: spearman(&ranks, &costs), domains })
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks; `None` on zero variance or
/// mismatched lengths.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::trunk::DomainHead;

    fn score(e: &[f64], b: &[f64]) -> Result<f64> {
        decathlon_score(&ScoreInput { errors: e.to_vec(), baseline_errors: b.to_vec() })
    }

    #[test]
    fn score_boundaries_and_hand_case() {
        assert_eq!(score(&[0.5, 0.2], &[0.25, 0.1]).unwrap(), 0.0);
        assert!((score(&[0.0], &[0.3]).unwrap() - 1000.0).abs() < 1e-9);
        assert!((score(&[0.2], &[0.25]).unwrap() - 360.0).abs() < 1e-9);
        assert_eq!(score(&[0.9], &[0.25]).unwrap(), 0.0);
        assert!(score(&[0.1], &[0.0]).is_err());
        assert!(score(&[0.1, 0.2], &[0.3]).is_err());
    }

    #[test]
    fn param_ratio_arithmetic() {
        let d = DomainParams { domain: "a".into(), adapter_params: 84_000, percent_of_all_plugged: 60.0 };
        let r = ParamReport::new(100_000, vec![d.clone()], 0).unwrap();
        assert!((r.total_ratio - 1.84).abs() < 1e-12);
        let with_heads = ParamReport::new(100_000, vec![d], 12_345).unwrap();
        assert_eq!(with_heads.total_ratio, r.total_ratio);
        assert_eq!(ParamReport::new(100_000, vec![], 0).unwrap().total_ratio, 1.0);
    }

    #[test]
    fn op_mac_counts() {
        let mut rng = seeded(0);
        let conv = FixedAdapter::from_ops(2, 4, &[OpKind::Conv1x1], &mut rng).unwrap();
        assert_eq!(adapter_flops(&conv, [4, 8, 8]), 1024);
        let skip = FixedAdapter::from_ops(2, 4, &[OpKind::Skip], &mut rng).unwrap();
        assert_eq!(adapter_flops(&skip, [4, 8, 8]), 0);
        let bn = FixedAdapter::from_ops(2, 4, &[OpKind::BatchNorm], &mut rng).unwrap();
        assert_eq!(adapter_flops(&bn, [4, 8, 8]), 256);
    }

    #[test]
    fn trunk_flops_by_hand() {
        let trunk = TrunkModel::build(2, 2, [1, 4, 4], &mut seeded(0)).unwrap();
        // 1->2 then 2->2, both on 4x4; the last block never pools
        let b1 = 2 * 16 * 9 + 2 * 32;
        let b2 = 2 * 16 * 2 * 9 + 2 * 32;
        assert_eq!(trunk_flops(&trunk), (b1 + b2) as u64);
    }

    #[test]
    fn unplugging_reduces_flops() {
        let mut rng = seeded(0);
        let trunk = TrunkModel::build(4, 4, [3, 8, 8], &mut rng).unwrap();
        let head = DomainHead::new("d", trunk.feature_dim(), 3, &mut rng).unwrap();
        let adapters: Vec<_> = trunk
            .widths()
            .iter()
            .map(|&c| FixedAdapter::from_ops(2, c, &[OpKind::Conv1x1], &mut rng).unwrap())
            .collect();
        let all = AdaptationModel::new(adapters.clone(), &[true; 4], head.clone()).unwrap();
        let some = AdaptationModel::new(adapters, &[true, false, true, false], head.clone()).unwrap();
        let none = AdaptationModel::head_only(4, head);
        let (fa, fs, fnone) = (flop_estimate(&trunk, &all), flop_estimate(&trunk, &some), flop_estimate(&trunk, &none));
        assert!(fnone < fs && fs < fa);
    }

    #[test]
    fn location_frequencies() {
        let runs: Vec<Vec<bool>> = (0..10).map(|r| vec![r < 7, false]).collect();
        assert_eq!(location_frequency(&runs).unwrap(), vec![0.7, 0.0]);
        assert!(location_frequency(&[vec![true], vec![true, false]]).is_err());
        assert!(location_frequency(&[]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[4.0, 4.0]), None);
    }

    fn runs(domain: &str, rank: u32, sig: &str, r: usize) -> DomainStructureRuns {
        DomainStructureRuns { domain: domain.into(), complexity_rank: Some(rank), runs: vec![vec![sig.to_string(); 2]; r] }
    }

    #[test]
    fn structure_correlation_cases() {
        let widths = [4, 8];
        let d = structure_distribution(
            &[runs("a", 1, "bn", 3), runs("b", 2, "conv1x1", 3), runs("c", 3, "edge(0,1)=conv1x1;edge(0,2)=conv1x1;edge(1,2)=bn", 3)],
            &widths,
        )
        .unwrap();
        assert!((d.spearman.unwrap() - 1.0).abs() < 1e-12);
        for dom in &d.domains {
            assert!(dom.per_location.iter().all(|h| h.values().sum::<usize>() == 3));
        }
        let skip = structure_distribution(&[runs("a", 1, "skip", 2), runs("b", 2, "skip", 2)], &widths).unwrap();
        assert_eq!(skip.spearman, None);
        let mut unranked = runs("a", 1, "bn", 1);
        unranked.complexity_rank = None;
        assert!(structure_distribution(&[unranked, runs("b", 2, "bn", 1)], &widths).is_err());
    }
}
