//! Mini-batch training with best-epoch selection and resumable checkpoints.

mod adamw;
#[cfg(test)]
mod tests;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{Checkpoint, Mode, World};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Fusion};
use crate::model::{LossBreakdown, Model};
use crate::rng;
use crate::tensor::{Element, Graph, Tensor};

pub use adamw::AdamW;

/// Smallest visual temperature the optimizer may reach.
pub const MIN_TAU: f64 = 1e-4;

const LOG_TAU_PARAM: &str = "log_tau_v";

/// Sample-weighted mean losses and validation metrics for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_t_a: f64,
    pub loss_t_o: f64,
    pub loss_t_c: f64,
    pub loss_v_a: f64,
    pub loss_v_o: f64,
    pub loss_v_c: f64,
    pub loss_kl: f64,
    #[serde(rename = "val_S")]
    pub val_s: f64,
    #[serde(rename = "val_U")]
    pub val_u: f64,
    #[serde(rename = "val_HM")]
    pub val_hm: f64,
    #[serde(rename = "val_AUC")]
    pub val_auc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Seconds per epoch in this process. Not persisted.
    #[serde(skip)]
    pub wall_clock: Vec<f64>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let to_err = |e: csv::Error| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other:?}", path.display())),
        };
        let mut w = csv::Writer::from_path(path).map_err(to_err)?;
        for rec in &self.epochs {
            w.serialize(rec).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    step: u64,
    best_epoch: Option<usize>,
    best_auc: Option<f64>,
    log: Vec<EpochRecord>,
}

/// Build a model for `world` and load the parameters stored in `ckpt`.
pub fn model_from_checkpoint<T: Element>(ckpt: &Checkpoint<T>, world: &World) -> Result<Model<T>> {
    let cfg = Config::from_json(&ckpt.config)?;
    if cfg.dtype != T::DTYPE {
        return Err(Error::Format(format!("checkpoint config says {:?}, tensors are {:?}", cfg.dtype, T::DTYPE)));
    }
    let mut model = Model::for_world(&cfg, world)?;
    let names: Vec<String> = model.params().names().to_vec();
    let items: Vec<(String, Tensor<T>)> = names
        .iter()
        .map(|n| {
            ckpt.get(n)
                .cloned()
                .map(|t| (n.clone(), t))
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{n}`")))
        })
        .collect::<Result<_>>()?;
    model.params_mut().assign(&items)?;
    Ok(model)
}

pub struct Trainer<'w, T: Element> {
    world: &'w World,
    model: Model<T>,
    opt: AdamW<T>,
    epoch: usize,
    best: Option<(usize, f64, Vec<Tensor<T>>)>,
    log: TrainLog,
}

impl<'w, T: Element> Trainer<'w, T> {
    pub fn new(cfg: &Config, world: &'w World) -> Result<Self> {
        cfg.validate()?;
        if cfg.dtype != T::DTYPE {
            return Err(Error::Config(format!("config dtype {:?} does not match trainer", cfg.dtype)));
        }
        let model = Model::for_world(cfg, world)?;
        let shapes: Vec<&[usize]> = model.params().values().iter().map(|t| t.shape()).collect();
        let opt = AdamW::new(&shapes, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps);
        Ok(Trainer {
            world,
            model,
            opt,
            epoch: 0,
            best: None,
            log: TrainLog::default(),
        })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`], optionally
    /// raising the total epoch count.
    pub fn resume(ckpt: &Checkpoint<T>, world: &'w World, epochs: Option<usize>) -> Result<Self> {
        let mut cfg = Config::from_json(&ckpt.config)?;
        if let Some(n) = epochs {
            cfg.epochs = n;
        }
        let mut tr = Trainer::new(&cfg, world)?;
        let base = model_from_checkpoint(ckpt, world)?;
        let items: Vec<(String, Tensor<T>)> = base.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        tr.model.params_mut().assign(&items)?;
        let state: TrainState = serde_json::from_value(ckpt.state.clone())
            .map_err(|e| Error::Format(format!("checkpoint training state: {e}")))?;
        let names: Vec<String> = tr.model.params().names().to_vec();
        let fetch = |prefix: &str, n: &str| {
            ckpt.get(&format!("{prefix}.{n}"))
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{prefix}.{n}`")))
        };
        for (k, n) in names.iter().enumerate() {
            tr.opt.m[k] = fetch("adam.m", n)?;
            tr.opt.v[k] = fetch("adam.v", n)?;
        }
        tr.opt.step = state.step;
        tr.best = match (state.best_epoch, state.best_auc) {
            (Some(e), Some(a)) => Some((e, a, names.iter().map(|n| fetch("best", n)).collect::<Result<_>>()?)),
            _ => None,
        };
        tr.epoch = ckpt.epoch;
        tr.log.epochs = state.log;
        if tr.log.epochs.len() != tr.epoch {
            return Err(Error::Format(format!(
                "checkpoint at epoch {} carries {} log rows",
                tr.epoch,
                tr.log.epochs.len()
            )));
        }
        Ok(tr)
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.model.config().epochs
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.0)
    }

    fn step_batch(&mut self, rows: &[usize]) -> Result<LossBreakdown> {
        let train = &self.world.train;
        let raw: Tensor<T> = train.features.select_rows(rows)?.cast();
        let labels: Vec<_> = rows.iter().map(|&r| train.labels[r]).collect();
        let g = Graph::new();
        let p = self.model.params().bind(&g);
        let fail = |what: &str| {
            let node = g.first_non_finite().unwrap_or_else(|| "unknown node".into());
            Error::Divergence(format!("{what} at epoch {} step {}: first non-finite is {node}", self.epoch + 1, self.opt.step + 1))
        };
        let (loss, parts, _) = match self.model.total_loss(&g, &p, &raw, &labels) {
            Ok(out) => out,
            // Ops that validate their inputs reject non-finite values before the loss does.
            Err(e) if g.first_non_finite().is_some() => return Err(fail(&format!("forward failed ({e})"))),
            Err(e) => return Err(e),
        };
        if !parts.total.is_finite() {
            return Err(fail("non-finite loss"));
        }
        g.backward(loss)?;
        let grads: Vec<Tensor<T>> = p
            .vars()
            .iter()
            .zip(self.model.params().values())
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        if let Some(k) = grads.iter().position(|t| !t.all_finite()) {
            let name = &self.model.params().names()[k];
            return Err(Error::Divergence(format!("non-finite gradient for parameter `{name}`")));
        }
        drop(p);
        self.opt.step(self.model.params_mut().values_mut(), &grads)?;
        if let Some(t) = self.model.params_mut().get_mut(LOG_TAU_PARAM) {
            let floor = T::lit(MIN_TAU.ln());
            t.data_mut().iter_mut().for_each(|x| *x = x.max(floor));
        }
        if let Some((n, _)) = self.model.params().iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::Divergence(format!("parameter `{n}` became non-finite")));
        }
        Ok(parts)
    }

    /// One pass over the shuffled training split followed by validation.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let started = Instant::now();
        let cfg = self.model.config().clone();
        let n = self.world.train.len();
        let mut order_rng = rng::stream_indexed(cfg.seed, "train.shuffle", self.epoch as u64);
        let order = rng::permutation(&mut order_rng, n);
        let mut sum = LossBreakdown::default();
        for rows in order.chunks(cfg.batch_size) {
            let parts = self.step_batch(rows)?;
            let w = rows.len() as f64;
            sum.total += parts.total * w;
            sum.t_a += parts.t_a * w;
            sum.t_o += parts.t_o * w;
            sum.t_c += parts.t_c * w;
            sum.v_a += parts.v_a * w;
            sum.v_o += parts.v_o * w;
            sum.v_c += parts.v_c * w;
            sum.kl += parts.kl * w;
        }
        let n = n as f64;
        let report = evaluate(&self.model, &self.world.val, Mode::Closed, Fusion::Joint { lambda: cfg.lambda }, cfg.threads)?;
        self.epoch += 1;
        let rec = EpochRecord {
            epoch: self.epoch,
            loss_total: sum.total / n,
            loss_t_a: sum.t_a / n,
            loss_t_o: sum.t_o / n,
            loss_t_c: sum.t_c / n,
            loss_v_a: sum.v_a / n,
            loss_v_o: sum.v_o / n,
            loss_v_c: sum.v_c / n,
            loss_kl: sum.kl / n,
            val_s: report.seen,
            val_u: report.unseen,
            val_hm: report.hm,
            val_auc: report.auc,
        };
        // Earlier epochs win ties.
        if self.best.as_ref().is_none_or(|b| rec.val_auc > b.1) {
            self.best = Some((self.epoch, rec.val_auc, self.model.params().values().to_vec()));
        }
        self.log.epochs.push(rec);
        self.log.wall_clock.push(started.elapsed().as_secs_f64());
        Ok(rec)
    }

    /// Run the remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        while !self.finished() {
            let rec = self.run_epoch()?;
            on_epoch(&rec);
        }
        Ok(())
    }

    /// Full resumable state at the current epoch.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let params = self.model.params();
        let mut tensors: Vec<(String, Tensor<T>)> = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (k, n) in params.names().iter().enumerate() {
            tensors.push((format!("adam.m.{n}"), self.opt.m[k].clone()));
            tensors.push((format!("adam.v.{n}"), self.opt.v[k].clone()));
        }
        if let Some((_, _, best)) = &self.best {
            for (n, t) in params.names().iter().zip(best) {
                tensors.push((format!("best.{n}"), t.clone()));
            }
        }
        let state = TrainState {
            step: self.opt.step,
            best_epoch: self.best.as_ref().map(|b| b.0),
            best_auc: self.best.as_ref().map(|b| b.1),
            log: self.log.epochs.clone(),
        };
        Checkpoint {
            epoch: self.epoch,
            seed: self.model.config().seed,
            config: self.model.config().to_json(),
            state: serde_json::to_value(state).expect("state serializes"),
            tensors,
        }
    }

    /// Parameters of the best-validation epoch, or the current ones before any epoch.
    pub fn best_checkpoint(&self) -> Checkpoint<T> {
        let params = self.model.params();
        let (epoch, values) = match &self.best {
            Some((e, _, v)) => (*e, v.clone()),
            None => (self.epoch, params.values().to_vec()),
        };
        Checkpoint {
            epoch,
            seed: self.model.config().seed,
            config: self.model.config().to_json(),
            state: serde_json::json!({ "best_auc": self.best.as_ref().map(|b| b.1) }),
            tensors: params.names().iter().cloned().zip(values).collect(),
        }
    }

    /// Model holding the best-validation parameters.
    pub fn best_model(&self) -> Result<Model<T>> {
        model_from_checkpoint(&self.best_checkpoint(), self.world)
    }
}

/// Train from scratch for `cfg.epochs` epochs.
pub fn train<'w, T: Element>(cfg: &Config, world: &'w World) -> Result<Trainer<'w, T>> {
    let mut tr = Trainer::new(cfg, world)?;
    tr.run(|_| {})?;
    Ok(tr)
}
