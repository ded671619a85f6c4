//! Fusion inference, the scalar prediction oracle and accuracy metrics.

pub mod ablation;
mod sweep;
#[cfg(test)]
mod tests;

use std::path::Path;

use crate::data::{Mode, Pair, PredictionSpace, Split};
use crate::error::{Error, Result};
use crate::model::{BranchProbs, Model, ScoringInputs};
use crate::tensor::{scalar, Element, Tensor};

pub use sweep::{
    accuracies_at, biased_argmax, candidate_biases, curve_auc, metric_sweep, EvalReport, ScoreTable, SweepPoint,
};

/// Rows scored per forward pass during evaluation.
pub const SCORE_CHUNK: usize = 256;

/// How the two paths are combined at inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fusion {
    /// `p_t + λ·p_v`, falling back to whichever path the model has.
    Joint { lambda: f64 },
    TextOnly,
    VisualOnly,
}

pub fn fuse<T: Element>(p_t: &BranchProbs<T>, p_v: &BranchProbs<T>, lambda: T) -> Result<BranchProbs<T>> {
    let add = |t: &Tensor<T>, v: &Tensor<T>, branch: &str| -> Result<Tensor<T>> {
        if t.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "cannot fuse {branch} branch: text {:?} vs visual {:?}",
                t.shape(),
                v.shape()
            )));
        }
        let data = t.data().iter().zip(v.data()).map(|(&a, &b)| a + b * lambda).collect();
        Tensor::new(t.shape().to_vec(), data)
    };
    Ok(BranchProbs {
        a: add(&p_t.a, &p_v.a, "attribute")?,
        o: add(&p_t.o, &p_v.o, "object")?,
        c: add(&p_t.c, &p_v.c, "composition")?,
    })
}

/// Select or fuse the available path distributions.
pub fn combine_paths<T: Element>(
    text: Option<BranchProbs<T>>,
    visual: Option<BranchProbs<T>>,
    fusion: Fusion,
) -> Result<BranchProbs<T>> {
    match (fusion, text, visual) {
        (Fusion::Joint { lambda }, Some(t), Some(v)) => fuse(&t, &v, T::lit(lambda)),
        (Fusion::Joint { .. } | Fusion::TextOnly, Some(t), _) => Ok(t),
        (Fusion::Joint { .. } | Fusion::VisualOnly, _, Some(v)) => Ok(v),
        (f, _, _) => Err(Error::Contract(format!("{f:?} needs a path the model does not have"))),
    }
}

/// `p'(c_ij) = p(c_ij) + p(a_i) + p(o_j)` for every candidate, `[B, |pred|]`.
pub fn composition_scores<T: Element>(probs: &BranchProbs<T>, ps: &PredictionSpace) -> Result<Tensor<T>> {
    let b = probs.c.rows();
    if probs.c.shape() != [b, ps.len()] || probs.a.rows() != b || probs.o.rows() != b {
        return Err(Error::Shape(format!(
            "branch shapes a {:?} o {:?} c {:?} do not match {} candidates",
            probs.a.shape(),
            probs.o.shape(),
            probs.c.shape(),
            ps.len()
        )));
    }
    let mut out = Vec::with_capacity(b * ps.len());
    for r in 0..b {
        let (pa, po, pc) = (probs.a.row(r), probs.o.row(r), probs.c.row(r));
        out.extend(ps.pairs.iter().zip(pc).map(|(p, &c)| c + pa[p.0] + po[p.1]));
    }
    Tensor::new(vec![b, ps.len()], out)
}

/// Per-row argmax over candidates, ties to the lowest flat pair index.
pub fn argmax_pairs<T: Element>(scores: &Tensor<T>, ps: &PredictionSpace) -> Vec<Pair> {
    let n_objs = ps.n_objs();
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for k in 1..row.len() {
                let flat = |i: usize| ps.pairs[i].flat(n_objs);
                if row[k] > row[best] || (row[k] == row[best] && flat(k) < flat(best)) {
                    best = k;
                }
            }
            ps.pairs[best]
        })
        .collect()
}

fn to_model_dtype<T: Element>(raw: &Tensor<f32>) -> Tensor<T> {
    raw.cast()
}

/// Fused composition scores of a raw feature batch.
pub fn score_batch<T: Element>(model: &Model<T>, raw: &Tensor<T>, ps: &PredictionSpace, fusion: Fusion) -> Result<Tensor<T>> {
    let d = model.distributions(raw, &ps.pairs)?;
    composition_scores(&combine_paths(d.text, d.visual, fusion)?, ps)
}

pub fn predict<T: Element>(model: &Model<T>, raw: &Tensor<T>, mode: Mode, fusion: Fusion) -> Result<Vec<Pair>> {
    let ps = model.space().prediction_space(mode);
    Ok(argmax_pairs(&score_batch(model, raw, &ps, fusion)?, &ps))
}

fn branch_rows<T: Element>(f: &[T], classes: &Tensor<T>, s: Option<&[T]>, mul: T) -> Vec<T> {
    let z: Vec<T> = (0..classes.rows())
        .map(|i| {
            let sim = scalar::dot(f, classes.row(i));
            match s {
                Some(s) => (sim + s[i]) * mul,
                None => sim * mul,
            }
        })
        .collect();
    scalar::softmax_row(&z)
}

/// Recompute predictions with explicit per-sample loops over attributes and
/// objects, starting from the detached decoupled features.
pub fn predict_oracle_from_inputs<T: Element>(
    inputs: &ScoringInputs<T>,
    ps: &PredictionSpace,
    n_attrs: usize,
    fusion: Fusion,
) -> Result<Vec<Pair>> {
    if inputs.pairs != ps.pairs {
        return Err(Error::Contract("scoring inputs were built for a different candidate list".into()));
    }
    let n_objs = ps.n_objs();
    let mut preds = Vec::with_capacity(inputs.f.rows());
    for r in 0..inputs.f.rows() {
        let f = inputs.f.row(r);
        let text = inputs.text.as_ref().map(|t| {
            let it = inputs.inv_tau_t;
            (
                branch_rows(t.f_a.row(r), &t.t_a, t.s_a.as_ref().map(|s| s.row(r)), it),
                branch_rows(t.f_o.row(r), &t.t_o, t.s_o.as_ref().map(|s| s.row(r)), it),
                branch_rows(f, &t.t_c, None, it),
            )
        });
        let visual = inputs.visual.as_ref().map(|v| {
            (
                branch_rows(v.f_a.row(r), &v.v_a, None, v.inv_tau),
                branch_rows(v.f_o.row(r), &v.v_o, None, v.inv_tau),
                branch_rows(f, &v.v_c, None, v.inv_tau),
            )
        });
        let (pa, po, pc) = match (fusion, text, visual) {
            (Fusion::Joint { lambda }, Some(t), Some(v)) => {
                let lam = T::lit(lambda);
                let mix = |x: Vec<T>, y: Vec<T>| -> Vec<T> { x.iter().zip(&y).map(|(&a, &b)| a + b * lam).collect() };
                (mix(t.0, v.0), mix(t.1, v.1), mix(t.2, v.2))
            }
            (Fusion::Joint { .. } | Fusion::TextOnly, Some(t), _) => t,
            (Fusion::Joint { .. } | Fusion::VisualOnly, _, Some(v)) => v,
            (f, _, _) => return Err(Error::Contract(format!("{f:?} needs a path the model does not have"))),
        };
        let mut best: Option<(Pair, T)> = None;
        for i in 0..n_attrs {
            for j in 0..n_objs {
                let Some(k) = ps.position(Pair(i, j)) else {
                    continue;
                };
                let score = pc[k] + pa[i] + po[j];
                if best.is_none_or(|(_, b)| score > b) {
                    best = Some((Pair(i, j), score));
                }
            }
        }
        preds.push(best.ok_or_else(|| Error::Contract("empty prediction space".into()))?.0);
    }
    Ok(preds)
}

pub fn predict_oracle<T: Element>(model: &Model<T>, raw: &Tensor<T>, mode: Mode, fusion: Fusion) -> Result<Vec<Pair>> {
    let ps = model.space().prediction_space(mode);
    let inputs = model.scoring_inputs(raw, &ps.pairs)?;
    predict_oracle_from_inputs(&inputs, &ps, model.space().n_attrs(), fusion)
}

/// Worker count for a `threads` setting, where 0 means all available cores.
pub fn worker_count(threads: usize) -> usize {
    if threads > 0 {
        threads
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

/// Score every sample of a split; chunks are spread across `threads` workers.
pub fn score_split<T: Element>(model: &Model<T>, split: &Split, mode: Mode, fusion: Fusion, threads: usize) -> Result<ScoreTable> {
    let ps = model.space().prediction_space(mode);
    let n = split.len();
    let chunks: Vec<(usize, usize)> = (0..n).step_by(SCORE_CHUNK).map(|s| (s, (s + SCORE_CHUNK).min(n))).collect();
    let workers = worker_count(threads).min(chunks.len()).max(1);
    let score_chunk = |&(s, e): &(usize, usize)| -> Result<Vec<Vec<f64>>> {
        let rows: Vec<usize> = (s..e).collect();
        let raw: Tensor<T> = to_model_dtype(&split.features.select_rows(&rows)?);
        let scores = score_batch(model, &raw, &ps, fusion)?;
        Ok((0..scores.rows()).map(|r| scores.row(r).iter().map(|x| x.as_f64()).collect()).collect())
    };
    let mut parts: Vec<Result<Vec<Vec<f64>>>> = Vec::with_capacity(chunks.len());
    if workers == 1 {
        parts.extend(chunks.iter().map(score_chunk));
    } else {
        let results = std::thread::scope(|sc| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let chunks = &chunks;
                    let score_chunk = &score_chunk;
                    sc.spawn(move || {
                        chunks
                            .iter()
                            .enumerate()
                            .filter(|(k, _)| k % workers == w)
                            .map(|(k, c)| (k, score_chunk(c)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("scoring worker panicked")).collect::<Vec<_>>()
        });
        let mut results = results;
        results.sort_by_key(|(k, _)| *k);
        parts.extend(results.into_iter().map(|(_, r)| r));
    }
    let mut scores = Vec::with_capacity(n);
    for p in parts {
        scores.extend(p?);
    }
    ScoreTable::new(scores, &split.labels, &ps, |p| model.space().is_seen(p))
}

/// Score a split and run the bias sweep over it.
pub fn evaluate<T: Element>(model: &Model<T>, split: &Split, mode: Mode, fusion: Fusion, threads: usize) -> Result<EvalReport> {
    metric_sweep(&score_split(model, split, mode, fusion, threads)?, mode)
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// `bias,seen_acc,unseen_acc` in sweep order.
pub fn write_sweep_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["bias", "seen_acc", "unseen_acc"]).map_err(|e| csv_err(path, e))?;
    for p in &report.curve {
        w.write_record([p.bias.to_string(), p.seen_acc.to_string(), p.unseen_acc.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Tradeoff curve sorted by unseen accuracy, with the harmonic mean per point.
pub fn write_curve_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut pts = report.curve.clone();
    pts.sort_by(|a, b| a.unseen_acc.total_cmp(&b.unseen_acc).then(b.seen_acc.total_cmp(&a.seen_acc)));
    pts.dedup_by(|a, b| a.unseen_acc == b.unseen_acc && a.seen_acc == b.seen_acc);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["unseen_acc", "seen_acc", "hm", "bias"]).map_err(|e| csv_err(path, e))?;
    for p in &pts {
        let s = p.seen_acc + p.unseen_acc;
        let hm = if s > 0.0 { 2.0 * p.seen_acc * p.unseen_acc / s } else { 0.0 };
        w.write_record([p.unseen_acc.to_string(), p.seen_acc.to_string(), hm.to_string(), p.bias.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
