use serde::{Deserialize, Serialize};

use crate::data::{Mode, Pair, PredictionSpace};
use crate::error::{Error, Result};

/// Fused composition scores of labelled samples over a prediction space.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    /// `[n_samples][|pred|]`
    pub scores: Vec<Vec<f64>>,
    /// Position of each sample's label in the prediction space.
    pub truth: Vec<usize>,
    /// Whether each sample's label is an unseen composition.
    pub label_unseen: Vec<bool>,
    /// Per-candidate unseen flag.
    pub unseen_mask: Vec<bool>,
    /// Per-candidate flat index, used for tie-breaking.
    pub flat: Vec<usize>,
}

impl ScoreTable {
    pub fn new(scores: Vec<Vec<f64>>, labels: &[Pair], ps: &PredictionSpace, is_seen: impl Fn(Pair) -> bool) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!("{} score rows for {} labels", scores.len(), labels.len())));
        }
        if let Some(r) = scores.iter().position(|r| r.len() != ps.len()) {
            return Err(Error::Shape(format!(
                "score row {r} has {} entries for {} candidates",
                scores[r].len(),
                ps.len()
            )));
        }
        let truth = labels
            .iter()
            .map(|&l| {
                ps.position(l)
                    .ok_or_else(|| Error::Contract(format!("label {l} not in the {} prediction space", ps.mode)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoreTable {
            scores,
            truth,
            label_unseen: labels.iter().map(|&l| !is_seen(l)).collect(),
            unseen_mask: ps.unseen_mask.clone(),
            flat: ps.pairs.iter().map(|p| p.flat(ps.n_objs())).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Highest score within one candidate group, ties to the lowest flat index.
fn group_best(row: &[f64], flat: &[usize], keep: impl Fn(usize) -> bool) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &s) in row.iter().enumerate() {
        if !keep(k) {
            continue;
        }
        best = match best {
            Some((b, bs)) if bs > s || (bs == s && flat[b] < flat[k]) => Some((b, bs)),
            _ => Some((k, s)),
        };
    }
    best
}

/// Argmax of one row with `bias` added to unseen candidates.
pub fn biased_argmax(row: &[f64], unseen_mask: &[bool], flat: &[usize], bias: f64) -> usize {
    let seen = group_best(row, flat, |k| !unseen_mask[k]);
    let unseen = group_best(row, flat, |k| unseen_mask[k]);
    match (seen, unseen) {
        (Some((s, _)), None) => s,
        (None, Some((u, _))) => u,
        (Some((s, ss)), Some((u, us))) => {
            if bias == f64::INFINITY {
                return u;
            }
            if bias == f64::NEG_INFINITY {
                return s;
            }
            let ub = us + bias;
            if ub > ss || (ub == ss && flat[u] < flat[s]) {
                u
            } else {
                s
            }
        }
        (None, None) => 0,
    }
}

mod bias_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(b: &f64, s: S) -> Result<S::Ok, S::Error> {
        if b.is_finite() {
            Repr::Num(*b).serialize(s)
        } else {
            Repr::Text(if *b > 0.0 { "inf" } else { "-inf" }.into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    #[serde(with = "bias_serde")]
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
}

/// Accuracy summary plus the full seen/unseen tradeoff curve (fractions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
    pub auc: f64,
    /// Seen/unseen accuracy with no calibration bias.
    pub seen_at_zero: f64,
    pub unseen_at_zero: f64,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub curve: Vec<SweepPoint>,
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

/// Trapezoid area under seen accuracy as a function of unseen accuracy.
///
/// Points are sorted internally, so the result does not depend on input order.
pub fn curve_auc(points: &[SweepPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.unseen_acc, p.seen_acc)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Candidate biases: every per-sample critical difference, the midpoints
/// between neighbours, and both infinities.
pub fn candidate_biases(table: &ScoreTable) -> Vec<f64> {
    let mut crit: Vec<f64> = table
        .scores
        .iter()
        .filter_map(|row| {
            let s = group_best(row, &table.flat, |k| !table.unseen_mask[k])?;
            let u = group_best(row, &table.flat, |k| table.unseen_mask[k])?;
            Some(s.1 - u.1)
        })
        .filter(|c| c.is_finite())
        .collect();
    crit.sort_by(f64::total_cmp);
    crit.dedup();
    let mut out = Vec::with_capacity(2 * crit.len() + 1);
    out.push(f64::NEG_INFINITY);
    for (k, &c) in crit.iter().enumerate() {
        if k > 0 {
            let mid = crit[k - 1] + (c - crit[k - 1]) / 2.0;
            if mid > crit[k - 1] && mid < c {
                out.push(mid);
            }
        }
        out.push(c);
    }
    out.push(f64::INFINITY);
    out
}

/// Seen and unseen accuracy at one bias.
pub fn accuracies_at(table: &ScoreTable, bias: f64) -> (f64, f64) {
    let (mut hit, mut n) = ([0usize; 2], [0usize; 2]);
    for (r, row) in table.scores.iter().enumerate() {
        let g = table.label_unseen[r] as usize;
        n[g] += 1;
        if biased_argmax(row, &table.unseen_mask, &table.flat, bias) == table.truth[r] {
            hit[g] += 1;
        }
    }
    let frac = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    (frac(hit[0], n[0]), frac(hit[1], n[1]))
}

pub fn metric_sweep(table: &ScoreTable, mode: Mode) -> Result<EvalReport> {
    let n_unseen = table.label_unseen.iter().filter(|&&u| u).count();
    let n_seen = table.len() - n_unseen;
    if n_seen == 0 || n_unseen == 0 {
        return Err(Error::Contract(format!(
            "metric sweep needs seen and unseen samples, got {n_seen} seen and {n_unseen} unseen"
        )));
    }
    if !table.unseen_mask.iter().any(|&u| u) || table.unseen_mask.iter().all(|&u| u) {
        return Err(Error::Contract("prediction space lacks seen or unseen candidates".into()));
    }
    let curve: Vec<SweepPoint> = candidate_biases(table)
        .into_iter()
        .map(|bias| {
            let (seen_acc, unseen_acc) = accuracies_at(table, bias);
            SweepPoint {
                bias,
                seen_acc,
                unseen_acc,
            }
        })
        .collect();
    let (seen_at_zero, unseen_at_zero) = accuracies_at(table, 0.0);
    Ok(EvalReport {
        mode,
        seen: curve.iter().map(|p| p.seen_acc).fold(0.0, f64::max),
        unseen: curve.iter().map(|p| p.unseen_acc).fold(0.0, f64::max),
        hm: curve.iter().map(|p| harmonic(p.seen_acc, p.unseen_acc)).fold(0.0, f64::max),
        auc: curve_auc(&curve),
        seen_at_zero,
        unseen_at_zero,
        n_seen,
        n_unseen,
        curve,
    })
}
