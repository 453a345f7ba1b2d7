use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LossConfig;
use crate::datagen::Dataset;
use crate::error::{invalid, Error, Result};
use crate::model::CamoeModel;
use crate::tensorcore::{softplus, BnMode, Graph, ParamStore, Tensor};

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub early_stopping: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled decay applied to weight matrices (not biases or norms).
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 20,
            batch_size: 1024,
            patience: 4,
            early_stopping: true,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size < 2 {
            return Err(Error::Config("lr must be positive and batch_size at least 2".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and adam_eps be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients currently held by `store`.
    /// Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = p.take_grad() else { continue };
            let decay = if p.value.rows() > 1 {
                self.lr * self.weight_decay
            } else {
                0.0
            };
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps) + decay * *w;
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean matched-example BCE per task over the epoch's batches.
    pub train_loss: BTreeMap<String, f64>,
    pub val_loss: Option<BTreeMap<String, f64>>,
    /// Configured objective, averaged over the epoch's batches.
    pub train_objective: f64,
    pub val_objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, when validation data was given.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub wall_time_secs: f64,
}

struct Prepared {
    x: Tensor,
    labels: Vec<f64>,
    tasks: Vec<usize>,
}

fn prepare(model: &CamoeModel, d: &Dataset) -> Result<Prepared> {
    let idx: Vec<usize> = (0..d.len()).collect();
    Ok(Prepared {
        x: d.features(&idx)?,
        labels: d.labels(),
        tasks: d.slots().into_iter().map(|s| model.grouping().task_of(s)).collect(),
    })
}

/// Per-task mean BCE over the examples routed to each task; tasks with no
/// examples are absent.
pub(crate) fn matched_bce(model: &CamoeModel, sums: &[(f64, usize)]) -> BTreeMap<String, f64> {
    model
        .grouping()
        .tasks()
        .iter()
        .zip(sums)
        .filter(|(_, (_, n))| *n > 0)
        .map(|(t, (s, n))| (t.name.clone(), s / *n as f64))
        .collect()
}

fn accumulate_matched(sums: &mut [(f64, usize)], logits: &[&[f64]], labels: &[f64], tasks: &[usize]) {
    for (i, (&y, &t)) in labels.iter().zip(tasks).enumerate() {
        sums[t].0 += softplus(-(2.0 * y - 1.0) * logits[t][i]);
        sums[t].1 += 1;
    }
}

/// Splits a permutation into batches; a trailing batch of one row is merged
/// into its predecessor because training-mode batch norm needs two rows.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("non-empty") = &order[start..];
    }
    out
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, batch },
        other => other,
    }
}

/// Trains `model` in place with Adam on mini-batches.
///
/// Batch order is a ChaCha permutation keyed by `(seed, epoch)`. With a
/// validation set the configured objective is tracked on it, training stops
/// after `patience` epochs without improvement (when enabled) and the best
/// epoch's parameters are restored.
pub fn train(
    model: &mut CamoeModel,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    loss: &LossConfig,
) -> Result<TrainReport> {
    let started = Instant::now();
    let cfg = &loss.optimizer;
    cfg.validate()?;
    let objective = loss.objective(model.num_tasks())?;
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        stopped_early: false,
        wall_time_secs: 0.0,
    };
    if cfg.epochs == 0 {
        return Ok(report);
    }
    if train_set.len() < 2 {
        return Err(invalid("train: need at least 2 training impressions"));
    }
    let tr = prepare(model, train_set)?;
    let va = val_set
        .filter(|v| !v.is_empty())
        .map(|v| prepare(model, v))
        .transpose()?;

    let mut adam = Adam::new(model.params(), cfg);
    let mut best: Option<(f64, CamoeModel)> = None;
    let mut stale = 0;
    let tasks = model.num_tasks();
    let n = tr.labels.len();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut sums = vec![(0.0, 0usize); tasks];
        let mut objective_sum = 0.0;
        for (b, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let yb: Vec<f64> = idx.iter().map(|&i| tr.labels[i]).collect();
            let tb: Vec<usize> = idx.iter().map(|&i| tr.tasks[i]).collect();
            let step = (|| -> Result<_> {
                let mut g = Graph::new();
                let vars = g.bind(model.params())?;
                let xb = g.leaf(tr.x.select_rows(idx))?;
                let fw = model.forward_graph(&mut g, &vars, xb, BnMode::Train, None)?;
                let root = objective.on_forward(&mut g, &fw, &yb, &tb)?;
                let grads = g.backward(root)?;
                let logits: Vec<Vec<f64>> = fw.logits.iter().map(|&l| g.value(l).data().to_vec()).collect();
                Ok((g.value(root).item(), grads, logits, fw.batch_stats))
            })();
            let (value, grads, logits, stats) = step.map_err(|e| diverged(e, epoch, b))?;
            let store = model.params_mut();
            store.zero_grad();
            grads.accumulate_into(store);
            adam.step(store);
            if store.iter().any(|p| !p.value.all_finite()) {
                return Err(Error::Diverged { epoch, batch: b });
            }
            if let Some(s) = stats {
                model.update_running_stats(&s);
            }
            objective_sum += value * idx.len() as f64;
            let views: Vec<&[f64]> = logits.iter().map(Vec::as_slice).collect();
            accumulate_matched(&mut sums, &views, &yb, &tb);
        }

        let mut record = EpochRecord {
            epoch,
            train_loss: matched_bce(model, &sums),
            val_loss: None,
            train_objective: objective_sum / n as f64,
            val_objective: None,
        };
        if let Some(va) = &va {
            let logits = model.logits(&va.x, None).map_err(|e| diverged(e, epoch, usize::MAX))?;
            let mut vsums = vec![(0.0, 0usize); tasks];
            let views: Vec<&[f64]> = logits.iter().map(Vec::as_slice).collect();
            accumulate_matched(&mut vsums, &views, &va.labels, &va.tasks);
            let val = objective.value(&logits, &va.labels, &va.tasks)?;
            record.val_loss = Some(matched_bce(model, &vsums));
            record.val_objective = Some(val);
            if best.as_ref().is_none_or(|(b, _)| val < *b) {
                best = Some((val, model.clone()));
                report.best_epoch = Some(epoch);
                stale = 0;
            } else {
                stale += 1;
            }
        }
        report.epochs.push(record);
        if cfg.early_stopping && va.is_some() && stale >= cfg.patience {
            report.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    if let Some((_, snapshot)) = best {
        *model = snapshot;
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Writes one JSON object per epoch.
pub fn write_train_report(report: &TrainReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in &report.epochs {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_train_report(path: &Path) -> Result<Vec<EpochRecord>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b, vec![&order[0..4], &order[4..9]]);
        let b = batches(&order, 3);
        assert_eq!(b.len(), 3);
        assert_eq!(batches(&order[..1], 4), vec![&order[..1]]);
    }
}
