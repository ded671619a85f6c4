use proptest::prelude::*;

use super::*;
use crate::config::{Config, DecouplerKind};
use crate::data::CompositionSpace;
use crate::encoders::{generate_world, SyntheticWorldConfig};
use crate::tensor::DType;

fn space_2x2() -> CompositionSpace {
    CompositionSpace::with_counts(2, 2, vec![Pair(0, 0), Pair(0, 1)], vec![Pair(1, 0), Pair(1, 1)]).unwrap()
}

/// Four samples over candidates [(0,0), (0,1) | (1,0), (1,1)] with dyadic scores.
fn hand_table() -> ScoreTable {
    let sp = space_2x2();
    let ps = sp.prediction_space(Mode::Closed);
    let scores = vec![
        vec![0.875, 0.125, 0.5, 0.25],
        vec![0.25, 0.625, 0.75, 0.125],
        vec![0.75, 0.125, 0.5, 0.25],
        vec![0.375, 0.5, 0.25, 0.625],
    ];
    let labels = [Pair(0, 0), Pair(0, 1), Pair(1, 0), Pair(1, 1)];
    ScoreTable::new(scores, &labels, &ps, |p| sp.is_seen(p)).unwrap()
}

/// Full-row argmax with `bias` added to unseen entries, scanning in flat order.
fn naive_argmax(t: &ScoreTable, r: usize, bias: f64) -> usize {
    let mut order: Vec<usize> = (0..t.flat.len()).collect();
    order.sort_by_key(|&k| t.flat[k]);
    // An infinite bias removes the other group from contention.
    order.retain(|&k| match bias {
        b if b == f64::INFINITY => t.unseen_mask[k],
        b if b == f64::NEG_INFINITY => !t.unseen_mask[k],
        _ => true,
    });
    let val = |k: usize| {
        if t.unseen_mask[k] && bias.is_finite() {
            t.scores[r][k] + bias
        } else {
            t.scores[r][k]
        }
    };
    let mut best = order[0];
    for &k in &order[1..] {
        if val(k) > val(best) {
            best = k;
        }
    }
    best
}

fn naive_acc(t: &ScoreTable, bias: f64) -> (f64, f64) {
    let mut hit = [0.0; 2];
    let mut n = [0.0; 2];
    for r in 0..t.len() {
        let g = t.label_unseen[r] as usize;
        n[g] += 1.0;
        if naive_argmax(t, r, bias) == t.truth[r] {
            hit[g] += 1.0;
        }
    }
    (hit[0] / n[0], hit[1] / n[1])
}

#[test]
fn hand_enumerated_sweep() {
    let r = metric_sweep(&hand_table(), Mode::Closed).unwrap();
    // Critical biases -0.125, 0.25, 0.375 plus midpoints and sentinels.
    let biases: Vec<f64> = r.curve.iter().map(|p| p.bias).collect();
    assert_eq!(biases, [f64::NEG_INFINITY, -0.125, 0.0625, 0.25, 0.3125, 0.375, f64::INFINITY]);
    let pts: Vec<(f64, f64)> = r.curve.iter().map(|p| (p.seen_acc, p.unseen_acc)).collect();
    assert_eq!(pts, [(1.0, 0.0), (1.0, 0.0), (0.5, 0.5), (0.5, 0.5), (0.5, 1.0), (0.5, 1.0), (0.0, 1.0)]);
    assert_eq!((r.seen, r.unseen), (1.0, 1.0));
    assert_eq!(r.hm, 2.0 / 3.0);
    assert_eq!(r.auc, 0.625);
    assert_eq!((r.seen_at_zero, r.unseen_at_zero), (0.5, 0.5));
    assert_eq!((r.n_seen, r.n_unseen), (2, 2));
}

#[test]
fn perfect_classifier_scores_one_everywhere() {
    let sp = space_2x2();
    let ps = sp.prediction_space(Mode::Closed);
    let scores = vec![
        vec![1.0, 0.0, -5.0, -5.0],
        vec![0.0, 1.0, -5.0, -5.0],
        vec![0.0, 0.0, 1.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0],
    ];
    let labels = [Pair(0, 0), Pair(0, 1), Pair(1, 0), Pair(1, 1)];
    let r = metric_sweep(&ScoreTable::new(scores, &labels, &ps, |p| sp.is_seen(p)).unwrap(), Mode::Closed).unwrap();
    assert_eq!((r.seen, r.unseen, r.hm, r.auc), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn sweep_needs_both_label_groups() {
    let sp = space_2x2();
    let ps = sp.prediction_space(Mode::Closed);
    let t = ScoreTable::new(vec![vec![0.0; 4]], &[Pair(0, 0)], &ps, |p| sp.is_seen(p)).unwrap();
    assert!(matches!(metric_sweep(&t, Mode::Closed), Err(Error::Contract(_))));
    assert!(ScoreTable::new(vec![vec![0.0; 3]], &[Pair(0, 0)], &ps, |p| sp.is_seen(p)).is_err());
}

#[test]
fn doubling_scores_keeps_best_accuracies() {
    let t = hand_table();
    let mut t2 = t.clone();
    for row in &mut t2.scores {
        row.iter_mut().for_each(|x| *x *= 2.0);
    }
    let (a, b) = (metric_sweep(&t, Mode::Closed).unwrap(), metric_sweep(&t2, Mode::Closed).unwrap());
    assert_eq!((a.seen, a.unseen), (b.seen, b.unseen));
    assert_ne!(a.curve[1].bias, b.curve[1].bias);
}

#[test]
fn auc_independent_of_curve_order() {
    let r = metric_sweep(&hand_table(), Mode::Closed).unwrap();
    let mut rev = r.curve.clone();
    rev.reverse();
    assert_eq!(curve_auc(&rev), r.auc);
}

#[test]
fn report_round_trips_with_infinite_biases() {
    let r = metric_sweep(&hand_table(), Mode::Closed).unwrap();
    let text = serde_json::to_string(&r).unwrap();
    assert!(text.contains("\"-inf\"") && text.contains("\"inf\""));
    let back: EvalReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, r);
}

fn arb_table() -> impl Strategy<Value = ScoreTable> {
    // 2 x 3 space with two unseen pairs; scores on a coarse grid to force ties.
    (2usize..10).prop_flat_map(|n| {
        (
            proptest::collection::vec(proptest::collection::vec(0i32..8, 6), n),
            proptest::collection::vec(0usize..6, n),
        )
    })
    .prop_map(|(rows, labels)| {
        let sp = CompositionSpace::with_counts(
            2,
            3,
            vec![Pair(0, 0), Pair(0, 1), Pair(1, 0), Pair(1, 2)],
            vec![Pair(0, 2), Pair(1, 1)],
        )
        .unwrap();
        let ps = sp.prediction_space(Mode::Open);
        let mut labels: Vec<Pair> = labels.iter().map(|&k| ps.pairs[k]).collect();
        labels[0] = Pair(0, 0);
        labels[1] = Pair(1, 1);
        let scores = rows.into_iter().map(|r| r.into_iter().map(|v| v as f64 / 8.0).collect()).collect();
        ScoreTable::new(scores, &labels, &ps, |p| sp.is_seen(p)).unwrap()
    })
}

proptest! {
    #[test]
    fn sweep_agrees_with_naive_argmax(t in arb_table()) {
        let r = metric_sweep(&t, Mode::Open).unwrap();
        for p in &r.curve {
            prop_assert_eq!((p.seen_acc, p.unseen_acc), naive_acc(&t, p.bias));
        }
    }

    #[test]
    fn no_decision_changes_between_adjacent_candidates(t in arb_table(), frac in 0.01f64..0.99) {
        let biases = candidate_biases(&t);
        for w in biases.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let (lo_f, hi_f) = (if lo.is_finite() { lo } else { hi - 10.0 }, if hi.is_finite() { hi } else { lo + 10.0 });
            if !(lo_f.is_finite() && hi_f.is_finite()) { continue; }
            let b = lo_f + (hi_f - lo_f) * frac;
            if b <= lo || b >= hi { continue; }
            let mid = if lo.is_finite() && hi.is_finite() { lo + (hi - lo) / 2.0 } else { b };
            for r in 0..t.len() {
                prop_assert_eq!(naive_argmax(&t, r, b), naive_argmax(&t, r, mid));
            }
        }
    }

    #[test]
    fn report_fields_are_fractions(t in arb_table()) {
        let r = metric_sweep(&t, Mode::Open).unwrap();
        for v in [r.seen, r.unseen, r.hm, r.auc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let mut rev = r.curve.clone();
        rev.reverse();
        prop_assert_eq!(curve_auc(&rev), r.auc);
    }

    #[test]
    fn restricting_candidates_never_lowers_seen_accuracy(t in arb_table()) {
        // Drop the seen candidate (1,2) to mimic a smaller candidate set.
        let keep: Vec<usize> = (0..t.flat.len()).filter(|&k| t.flat[k] != 5).collect();
        let labels_ok = t.truth.iter().all(|&k| t.flat[k] != 5);
        prop_assume!(labels_ok);
        let closed = ScoreTable {
            scores: t.scores.iter().map(|r| keep.iter().map(|&k| r[k]).collect()).collect(),
            truth: t.truth.iter().map(|&k| keep.iter().position(|&q| q == k).unwrap()).collect(),
            label_unseen: t.label_unseen.clone(),
            unseen_mask: keep.iter().map(|&k| t.unseen_mask[k]).collect(),
            flat: keep.iter().map(|&k| t.flat[k]).collect(),
        };
        prop_assert!(accuracies_at(&closed, 0.0).0 >= accuracies_at(&t, 0.0).0);
    }
}

#[test]
fn hand_built_prediction() {
    let sp = CompositionSpace::with_counts(2, 2, vec![Pair(0, 0), Pair(0, 1), Pair(1, 0)], vec![Pair(1, 1)]).unwrap();
    let ps = sp.prediction_space(Mode::Open);
    let probs = BranchProbs {
        a: Tensor::from_rows(&[vec![0.6f64, 0.4]]).unwrap(),
        o: Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap(),
        c: Tensor::from_rows(&[vec![0.4, 0.3, 0.2, 0.1]]).unwrap(),
    };
    let s = composition_scores(&probs, &ps).unwrap();
    assert_eq!(argmax_pairs(&s, &ps), [Pair(0, 0)]);
    assert!((s.row(0)[0] - 1.5).abs() < 1e-12);
}

#[test]
fn ties_go_to_lowest_flat_index() {
    // Closed order puts the unseen (0,0) last; it still wins a tie.
    let sp = CompositionSpace::with_counts(1, 2, vec![Pair(0, 1)], vec![Pair(0, 0)]).unwrap();
    let ps = sp.prediction_space(Mode::Closed);
    assert_eq!(ps.pairs, [Pair(0, 1), Pair(0, 0)]);
    let s = Tensor::from_rows(&[vec![1.0f64, 1.0]]).unwrap();
    assert_eq!(argmax_pairs(&s, &ps), [Pair(0, 0)]);
    assert_eq!(biased_argmax(s.row(0), &ps.unseen_mask, &[1, 0], 0.0), 1);
}

#[test]
fn fusion_identities() {
    let pt = BranchProbs {
        a: Tensor::from_rows(&[vec![0.3f64, 0.7]]).unwrap(),
        o: Tensor::from_rows(&[vec![0.1, 0.2, 0.7]]).unwrap(),
        c: Tensor::from_rows(&[vec![0.25, 0.25, 0.5]]).unwrap(),
    };
    let pv = BranchProbs {
        a: Tensor::from_rows(&[vec![0.9f64, 0.1]]).unwrap(),
        o: Tensor::from_rows(&[vec![0.6, 0.3, 0.1]]).unwrap(),
        c: Tensor::from_rows(&[vec![0.2, 0.3, 0.5]]).unwrap(),
    };
    let zero = fuse(&pt, &pv, 0.0).unwrap();
    assert!(zero.a.bit_eq(&pt.a) && zero.o.bit_eq(&pt.o) && zero.c.bit_eq(&pt.c));
    let one = fuse(&pt, &pv, 1.0).unwrap();
    for t in [&one.a, &one.o, &one.c] {
        assert!((t.row(0).iter().sum::<f64>() - 2.0).abs() < 1e-6);
    }
    let mut bad = pv.clone();
    bad.c = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
    assert!(matches!(fuse(&pt, &bad, 1.0), Err(Error::Shape(_))));
    assert!(combine_paths(Some(pt.clone()), None, Fusion::VisualOnly).is_err());
    assert_eq!(combine_paths(Some(pt.clone()), None, Fusion::Joint { lambda: 1.0 }).unwrap(), pt);
}

fn toy_world(seed: u64) -> crate::data::World {
    let cfg = SyntheticWorldConfig {
        n_attrs: 3,
        n_objs: 4,
        d: 16,
        raw_dim: 12,
        latent_dim: 2,
        samples_per_pair: 6,
        seed,
        ..Default::default()
    };
    generate_world(&cfg).unwrap().0
}

fn toy_config(i2t: DecouplerKind) -> Config {
    Config {
        vocab_size: 16,
        d_tok: 8,
        i2t,
        tau_v: 0.05,
        ..Default::default()
    }
}

fn check_oracle<T: Element>(cfg: &Config, w: &crate::data::World) {
    let m = Model::<T>::for_world(cfg, w).unwrap();
    let raw: Tensor<T> = w.test.features.cast();
    for mode in [Mode::Closed, Mode::Open] {
        for fusion in [Fusion::Joint { lambda: 1.0 }, Fusion::Joint { lambda: 0.5 }, Fusion::VisualOnly] {
            let a = predict(&m, &raw, mode, fusion).unwrap();
            let b = predict_oracle(&m, &raw, mode, fusion).unwrap();
            assert_eq!(a, b, "{mode} {fusion:?}");
        }
    }
}

#[test]
fn oracle_matches_batched_prediction() {
    let w = toy_world(4);
    for kind in [DecouplerKind::Ca, DecouplerKind::Mlp] {
        let mut cfg = toy_config(kind);
        check_oracle::<f32>(&cfg, &w);
        cfg.dtype = DType::F64;
        check_oracle::<f64>(&cfg, &w);
    }
}

#[test]
fn singleton_space_always_predicts_its_pair() {
    let sp = CompositionSpace::with_counts(1, 1, vec![Pair(0, 0)], vec![]);
    // A one-pair space has no unseen side; scoring still has a single winner.
    if let Ok(sp) = sp {
        let ps = sp.prediction_space(Mode::Open);
        let s = Tensor::from_rows(&[vec![0.3f64], vec![-2.0]]).unwrap();
        assert_eq!(argmax_pairs(&s, &ps), [Pair(0, 0), Pair(0, 0)]);
    }
}

#[test]
fn split_scoring_is_thread_count_invariant() {
    let w = toy_world(5);
    let m = Model::<f32>::for_world(&toy_config(DecouplerKind::Ca), &w).unwrap();
    let one = score_split(&m, &w.test, Mode::Open, Fusion::Joint { lambda: 1.0 }, 1).unwrap();
    let four = score_split(&m, &w.test, Mode::Open, Fusion::Joint { lambda: 1.0 }, 4).unwrap();
    assert_eq!(one.scores, four.scores);
    let r = metric_sweep(&one, Mode::Open).unwrap();
    assert_eq!(r.n_seen + r.n_unseen, w.test.len());
}

#[test]
fn sweep_and_curve_csv() {
    let dir = tempfile::tempdir().unwrap();
    let r = metric_sweep(&hand_table(), Mode::Closed).unwrap();
    write_report(&dir.path().join("report.json"), &r).unwrap();
    assert_eq!(read_report(&dir.path().join("report.json")).unwrap(), r);
    write_sweep_csv(&dir.path().join("sweep.csv"), &r).unwrap();
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "bias,seen_acc,unseen_acc");
    assert_eq!(lines[1], "-inf,1,0");
    assert_eq!(lines.len(), 8);
    write_curve_csv(&dir.path().join("curve.csv"), &r).unwrap();
    let text = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);
}
