//! Component-removal and decoupler-exchange grids.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{evaluate, worker_count, EvalReport, Fusion};
use crate::config::{Config, DecouplerKind};
use crate::data::{Checkpoint, Mode, World};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Element;
use crate::train::{model_from_checkpoint, train};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `components` or `decouplers`.
    pub group: String,
    pub variant: String,
    /// `train`, `inference`, or `none`.
    pub removal: String,
    pub i2t: DecouplerKind,
    pub i2v: DecouplerKind,
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
    pub auc: f64,
}

/// Training runs of the grid, in a fixed order. The first is the full model.
pub fn ablation_runs(base: &Config) -> Vec<(&'static str, Config)> {
    let with = |f: &dyn Fn(&mut Config)| {
        let mut c = base.clone();
        c.no_vp = false;
        c.no_tp = false;
        c.i2t = DecouplerKind::Ca;
        c.i2v = DecouplerKind::Mlp;
        f(&mut c);
        c
    };
    vec![
        ("full", with(&|_| {})),
        ("no-vp", with(&|c| c.no_vp = true)),
        ("no-tp", with(&|c| c.no_tp = true)),
        ("ca-ca", with(&|c| c.i2v = DecouplerKind::Ca)),
        ("mlp-ca", with(&|c| {
            c.i2t = DecouplerKind::Mlp;
            c.i2v = DecouplerKind::Ca;
        })),
        ("mlp-mlp", with(&|c| c.i2t = DecouplerKind::Mlp)),
    ]
}

pub struct AblationOutcome<T: Element> {
    pub rows: Vec<AblationRow>,
    /// Best-validation checkpoint of each training run, in [`ablation_runs`] order.
    pub checkpoints: Vec<(String, Checkpoint<T>)>,
}

impl<T: Element> AblationOutcome<T> {
    pub fn row(&self, group: &str, variant: &str, removal: &str) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.variant == variant && r.removal == removal)
    }

    pub fn full_model(&self, world: &World) -> Result<Model<T>> {
        model_from_checkpoint(&self.checkpoints[0].1, world)
    }
}

fn row(group: &str, variant: &str, removal: &str, cfg: &Config, r: &EvalReport) -> AblationRow {
    AblationRow {
        group: group.into(),
        variant: variant.into(),
        removal: removal.into(),
        i2t: cfg.i2t,
        i2v: cfg.i2v,
        seen: r.seen,
        unseen: r.unseen,
        hm: r.hm,
        auc: r.auc,
    }
}

/// Train every grid cell with the same seed and evaluate on the closed-world test split.
///
/// Runs are spread over `base.threads` workers; each run scores on one thread.
pub fn run_ablation<T: Element>(world: &World, base: &Config) -> Result<AblationOutcome<T>> {
    let runs = ablation_runs(base);
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<Option<Result<Checkpoint<T>>>>> = Mutex::new((0..runs.len()).map(|_| None).collect());
    let workers = worker_count(base.threads).min(runs.len());
    std::thread::scope(|sc| {
        for _ in 0..workers {
            sc.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some((_, cfg)) = runs.get(k) else { break };
                let mut cfg = cfg.clone();
                cfg.threads = 1;
                let out = train::<T>(&cfg, world).map(|tr| tr.best_checkpoint());
                done.lock().expect("ablation results lock")[k] = Some(out);
            });
        }
    });
    let mut checkpoints = Vec::with_capacity(runs.len());
    for ((name, _), slot) in runs.iter().zip(done.into_inner().expect("ablation results lock")) {
        let ck = slot.ok_or_else(|| Error::Contract(format!("ablation run {name} did not finish")))??;
        checkpoints.push((name.to_string(), ck));
    }
    let joint = Fusion::Joint { lambda: base.lambda };
    let eval_run = |k: usize| -> Result<EvalReport> {
        let m = model_from_checkpoint(&checkpoints[k].1, world)?;
        evaluate(&m, &world.test, Mode::Closed, joint, base.threads)
    };
    let full_cfg = &runs[0].1;
    let mut rows = vec![
        row("components", "no-vp", "train", &runs[1].1, &eval_run(1)?),
        row("components", "no-tp", "train", &runs[2].1, &eval_run(2)?),
    ];
    let full_model = model_from_checkpoint(&checkpoints[0].1, world)?;
    let at_inference = |fusion: Fusion| evaluate(&full_model, &world.test, Mode::Closed, fusion, base.threads);
    rows.push(row("components", "no-vp", "inference", full_cfg, &at_inference(Fusion::Joint { lambda: 0.0 })?));
    rows.push(row("components", "no-tp", "inference", full_cfg, &at_inference(Fusion::VisualOnly)?));
    for k in [0, 3, 4, 5] {
        let cfg = &runs[k].1;
        rows.push(row("decouplers", &format!("{}-{}", cfg.i2t, cfg.i2v), "none", cfg, &eval_run(k)?));
    }
    Ok(AblationOutcome { rows, checkpoints })
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for r in rows {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
