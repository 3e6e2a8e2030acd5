use nas_mdl::adapter::{mixture_weights, FixedAdapter, OpKind};
use nas_mdl::autodiff::{grad_check_many, Tape, Tensor, Var};
use nas_mdl::metrics::{average_ranks, decathlon_score, flop_estimate, spearman, ScoreInput};
use nas_mdl::nn::CosineSchedule;
use nas_mdl::plugging::{baseline_mask, discretize_plugging, plug_param_usage, PluggingState, StrategyKind};
use nas_mdl::rng::seeded;
use nas_mdl::trainer::AdaptationModel;
use nas_mdl::trunk::{DomainHead, TrunkModel};
use proptest::prelude::*;

/// One step of a random graph over a `[3, 4]` working value.
#[derive(Debug, Clone, Copy)]
enum Step {
    Add(usize),
    Sub(usize),
    Mul(usize),
    Softmax,
    LogSoftmax,
    Exp,
    MatMul,
    AddRow,
    Scale(f32),
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        (0usize..8).prop_map(Step::Add),
        (0usize..8).prop_map(Step::Sub),
        (0usize..8).prop_map(Step::Mul),
        Just(Step::Softmax),
        Just(Step::LogSoftmax),
        Just(Step::Exp),
        Just(Step::MatMul),
        Just(Step::AddRow),
        (-1.5f32..1.5).prop_map(Step::Scale),
    ]
}

/// Leaves: a, b `[3, 4]`, w `[4, 4]`, bias `[4]`. Earlier values are reused
/// by index, so the graph is a DAG with fan-out.
fn build(tape: &mut Tape, v: &[Var], steps: &[Step], proj: &[f32]) -> nas_mdl::Result<Var> {
    let mut values = vec![v[0], v[1]];
    let mut h = v[0];
    for s in steps {
        let pick = |i: usize| values[i % values.len()];
        h = match *s {
            Step::Add(i) => tape.add(h, pick(i))?,
            Step::Sub(i) => tape.sub(h, pick(i))?,
            Step::Mul(i) => {
                let other = pick(i);
                let m = tape.mul(h, other)?;
                tape.scale(m, 0.5)?
            }
            Step::Softmax => tape.softmax(h, 1)?,
            Step::LogSoftmax => {
                let s = tape.softmax(h, 1)?;
                tape.log(s)?
            }
            Step::Exp => {
                let small = tape.scale(h, 0.3)?;
                tape.exp(small)?
            }
            Step::MatMul => tape.matmul(h, v[2])?,
            Step::AddRow => tape.add_row(h, v[3])?,
            Step::Scale(c) => tape.scale(h, c)?,
        };
        values.push(h);
    }
    let r = tape.constant(&[3, 4], proj.to_vec())?;
    let p = tape.mul(h, r)?;
    let s = tape.sum(p)?;
    let logits = tape.add(h, v[1])?;
    let ce = tape.softmax_cross_entropy(logits, &[0, 3, 1])?;
    tape.add(s, ce)
}

fn vec_of(n: usize, scale: f32) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-scale..scale, n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn random_graphs_match_finite_differences(
        steps in prop::collection::vec(step(), 1..7),
        a in vec_of(12, 1.0),
        b in vec_of(12, 1.0),
        w in vec_of(16, 0.6),
        bias in vec_of(4, 0.5),
        proj in vec_of(12, 0.3),
    ) {
        let points = vec![
            Tensor::new(vec![3, 4], a).unwrap(),
            Tensor::new(vec![3, 4], b).unwrap(),
            Tensor::new(vec![4, 4], w).unwrap(),
            Tensor::new(vec![4], bias).unwrap(),
        ];
        let value = {
            let mut t = Tape::new();
            let vars: Vec<Var> = points.iter().map(|p| t.leaf(p.shape(), p.data().to_vec(), true).unwrap()).collect();
            let out = build(&mut t, &vars, &steps, &proj).unwrap();
            t.value(out)[0]
        };
        // values this large put central differences below the fp32 noise floor
        prop_assume!(value.is_finite() && value.abs() < 50.0);
        let err = grad_check_many(|t, v| build(t, v, &steps, &proj), &points, 1e-3).unwrap();
        prop_assert!(err < 1e-3, "error {err} for {steps:?}");
    }

    #[test]
    fn mixture_weights_normalize(alpha in vec_of(4, 30.0)) {
        let w = mixture_weights(&alpha);
        let s: f64 = w.iter().map(|&x| x as f64).sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn plugging_mask_ignores_shared_offsets(logits in prop::collection::vec((-5.0f32..5.0, -5.0f32..5.0), 1..16), shift in -10.0f32..10.0) {
        let pairs: Vec<[f32; 2]> = logits.iter().map(|&(a, b)| [a, b]).collect();
        let shifted: Vec<[f32; 2]> = pairs.iter().map(|&[a, b]| [a + shift, b + shift]).collect();
        let mut s = PluggingState::from_logits(&pairs).unwrap();
        let base = discretize_plugging(&s);
        let again = s.discretize();
        prop_assert_eq!(&base, &again);
        prop_assert_eq!(s.mask().unwrap(), &base[..]);
        // exact float addition can flip a near tie; only compare clear margins
        let clear: Vec<usize> = (0..pairs.len()).filter(|&i| (pairs[i][0] - pairs[i][1]).abs() > 1e-3).collect();
        let moved = discretize_plugging(&PluggingState::from_logits(&shifted).unwrap());
        for i in clear {
            prop_assert_eq!(base[i], moved[i]);
        }
    }

    #[test]
    fn baseline_masks_have_the_budget(total in 1usize..20, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let n = (frac * total as f64).round() as usize;
        for kind in [StrategyKind::TopDown, StrategyKind::BottomUp, StrategyKind::Random] {
            let m = baseline_mask(kind, n, total, seed).unwrap();
            prop_assert_eq!(m.len(), total);
            prop_assert_eq!(m.iter().filter(|&&b| b).count(), n);
        }
        prop_assert_eq!(baseline_mask(StrategyKind::Random, n, total, seed).unwrap(), baseline_mask(StrategyKind::Random, n, total, seed).unwrap());
        // top-down reversed is bottom-up at the same budget
        let mut td = baseline_mask(StrategyKind::TopDown, n, total, 0).unwrap();
        td.reverse();
        prop_assert_eq!(td, baseline_mask(StrategyKind::BottomUp, n, total, 0).unwrap());
        if 2 * n == total {
            let td = baseline_mask(StrategyKind::TopDown, n, total, 0).unwrap();
            let bu = baseline_mask(StrategyKind::BottomUp, n, total, 0).unwrap();
            prop_assert!(td.iter().zip(&bu).all(|(a, b)| a != b));
        }
        prop_assert!(baseline_mask(StrategyKind::TopDown, total + 1, total, 0).is_err());
    }

    #[test]
    fn param_usage_grows_with_the_mask(counts in prop::collection::vec(0usize..500, 1..12), bits in any::<u16>(), extra in any::<u16>()) {
        let n = counts.len();
        let mask: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
        let wider: Vec<bool> = (0..n).map(|i| mask[i] || extra >> i & 1 == 1).collect();
        let (a, pa) = plug_param_usage(&mask, &counts).unwrap();
        let (b, pb) = plug_param_usage(&wider, &counts).unwrap();
        prop_assert!(a <= b && pa <= pb + 1e-12);
        prop_assert!((0.0..=100.0).contains(&pa));
        let (all, pall) = plug_param_usage(&vec![true; n], &counts).unwrap();
        prop_assert_eq!(all, counts.iter().sum::<usize>());
        if all > 0 {
            prop_assert!((pall - 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn score_falls_as_error_rises(base in 0.01f64..0.5, e1 in 0.0f64..1.0, e2 in 0.0f64..1.0) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let s = |e: f64| decathlon_score(&ScoreInput { errors: vec![e], baseline_errors: vec![base] }).unwrap();
        prop_assert!(s(lo) >= s(hi));
        prop_assert!(s(lo) <= 1000.0 + 1e-9);
        if hi >= 2.0 * base {
            prop_assert_eq!(s(hi), 0.0);
        }
    }

    #[test]
    fn cosine_schedule_is_monotone(lr in 1e-4f32..1.0, total in 1usize..500) {
        let s = CosineSchedule::new(lr, total).unwrap();
        prop_assert_eq!(s.lr(0).unwrap(), lr);
        prop_assert_eq!(s.lr(total).unwrap(), 0.0);
        let mut prev = f32::INFINITY;
        for step in 0..=total {
            let v = s.lr(step).unwrap();
            prop_assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn ranks_and_correlation_are_bounded(x in prop::collection::vec(-5i32..5, 2..12)) {
        let v: Vec<f64> = x.iter().map(|&a| a as f64).collect();
        let r = average_ranks(&v);
        let n = v.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        let y: Vec<f64> = v.iter().map(|a| 2.0 * a + 1.0).collect();
        match spearman(&v, &y) {
            Some(rho) => prop_assert!((rho - 1.0).abs() < 1e-9),
            None => prop_assert!(v.iter().all(|&a| a == v[0])),
        }
        let neg: Vec<f64> = v.iter().map(|a| -a).collect();
        if let Some(rho) = spearman(&v, &neg) {
            prop_assert!((rho + 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn flops_grow_with_plugged_adapters() {
    let mut rng = seeded(4);
    let mut trunk = TrunkModel::build(4, 4, [3, 8, 8], &mut rng).unwrap();
    trunk.freeze();
    let adapters: Vec<FixedAdapter> = trunk
        .widths()
        .iter()
        .map(|&c| FixedAdapter::from_ops(3, c, &[OpKind::Conv1x1, OpKind::BatchNorm, OpKind::Skip], &mut rng).unwrap())
        .collect();
    let head = DomainHead::new("f", trunk.feature_dim(), 3, &mut rng).unwrap();
    let flops = |bits: u8| {
        let mask: Vec<bool> = (0..4).map(|i| bits >> i & 1 == 1).collect();
        flop_estimate(&trunk, &AdaptationModel::new(adapters.clone(), &mask, head.clone()).unwrap())
    };
    for bits in 0u8..16 {
        for extra in 0u8..16 {
            assert!(flops(bits) <= flops(bits | extra));
        }
        if bits != 0 {
            assert!(flops(bits) > flops(0));
        }
    }
}
