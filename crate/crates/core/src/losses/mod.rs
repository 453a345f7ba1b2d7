//! Training objectives and the training loop.
//!
//! Every objective is a weighted sum of per-head, per-example terms from the
//! head logits. With adaptive loss masking an example only feeds the head of
//! its own task; without it every example feeds every head.

mod train;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::Forward;
use crate::tensorcore::{Graph, Tensor, Var};

pub use train::{read_train_report, train, write_train_report, Adam, EpochRecord, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Binary cross-entropy with adaptive loss masking.
    Alm,
    Bce,
    Focal,
    WeightedBce,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alm" => Ok(LossKind::Alm),
            "bce" => Ok(LossKind::Bce),
            "focal" => Ok(LossKind::Focal),
            "weighted-bce" => Ok(LossKind::WeightedBce),
            _ => Err(invalid(format!("unknown loss kind `{s}`"))),
        }
    }
}

/// Per-example loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Criterion {
    Bce,
    Focal { gamma: f64, alpha: f64 },
    WeightedBce { pos: f64, neg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Masking {
    /// Example `i` contributes only to the head of its own task.
    Adaptive,
    /// Every example contributes to every head.
    None,
}

/// Resolved objective: criterion, masking and head weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub criterion: Criterion,
    pub masking: Masking,
    pub lambdas: Vec<f64>,
}

/// User-facing loss settings.
///
/// `masking` decides adaptive loss masking for every kind; `alm` is plain BCE
/// with masking and refuses `masking = false`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub masking: bool,
    /// Head weights; uniform when absent.
    pub lambdas: Option<Vec<f64>>,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub pos_weight: f64,
    pub neg_weight: f64,
    pub optimizer: TrainConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Alm,
            masking: true,
            lambdas: None,
            focal_gamma: 2.0,
            focal_alpha: 1.0,
            pos_weight: 1.0,
            neg_weight: 1.0,
            optimizer: TrainConfig::default(),
        }
    }
}

impl LossConfig {
    /// Resolves the objective for a model with `tasks` heads.
    pub fn objective(&self, tasks: usize) -> Result<Objective> {
        let criterion = match self.kind {
            LossKind::Alm | LossKind::Bce => Criterion::Bce,
            LossKind::Focal => Criterion::Focal {
                gamma: self.focal_gamma,
                alpha: self.focal_alpha,
            },
            LossKind::WeightedBce => Criterion::WeightedBce {
                pos: self.pos_weight,
                neg: self.neg_weight,
            },
        };
        if self.kind == LossKind::Alm && !self.masking {
            return Err(Error::Config(
                "loss kind `alm` always masks; use `bce` with masking = false".into(),
            ));
        }
        if !(self.focal_gamma >= 0.0) || !(self.focal_alpha > 0.0) {
            return Err(Error::Config("focal_gamma must be >= 0 and focal_alpha > 0".into()));
        }
        if !(self.pos_weight > 0.0) || !(self.neg_weight > 0.0) {
            return Err(Error::Config("class weights must be positive".into()));
        }
        let lambdas = match &self.lambdas {
            Some(l) => l.clone(),
            None => vec![1.0 / tasks as f64; tasks],
        };
        check_lambdas(&lambdas, tasks)?;
        Ok(Objective {
            criterion,
            masking: if self.masking { Masking::Adaptive } else { Masking::None },
            lambdas,
        })
    }
}

fn check_lambdas(lambdas: &[f64], tasks: usize) -> Result<()> {
    if lambdas.len() != tasks {
        return Err(Error::Config(format!("{} lambdas for {tasks} tasks", lambdas.len())));
    }
    let total: f64 = lambdas.iter().sum();
    if lambdas.iter().any(|l| !(*l >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "lambdas must be non-negative and sum to 1, got {lambdas:?}"
        )));
    }
    Ok(())
}

impl Objective {
    /// Records the objective on `g` from per-head `[n, 1]` logits. Returns
    /// the scalar loss node. Head weights are divided by `n`, so the loss is
    /// a per-example mean.
    pub fn graph(&self, g: &mut Graph, logits: &[Var], labels: &[f64], tasks: &[usize]) -> Result<Var> {
        let n = labels.len();
        if n == 0 || tasks.len() != n {
            return Err(invalid(format!("objective: {n} labels, {} task tags", tasks.len())));
        }
        if logits.len() != self.lambdas.len() {
            return Err(invalid(format!(
                "objective: {} heads, {} lambdas",
                logits.len(),
                self.lambdas.len()
            )));
        }
        if let Some(i) = tasks.iter().position(|&t| t >= logits.len()) {
            return Err(invalid(format!(
                "example {i} maps to task {} which does not exist",
                tasks[i]
            )));
        }
        let mut total: Option<Var> = None;
        for (m, &z) in logits.iter().enumerate() {
            let lambda = self.lambdas[m] / n as f64;
            let weights: Vec<f64> = (0..n)
                .map(|i| {
                    let routed = self.masking == Masking::None || tasks[i] == m;
                    if !routed {
                        return 0.0;
                    }
                    match self.criterion {
                        Criterion::WeightedBce { pos, neg } => lambda * if labels[i] == 1.0 { pos } else { neg },
                        _ => lambda,
                    }
                })
                .collect();
            let term = match self.criterion {
                Criterion::Focal { gamma, alpha } => g.focal_logits(z, labels, &weights, gamma, alpha)?,
                _ => g.bce_logits(z, labels, &weights)?,
            };
            total = Some(match total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one head"))
    }

    /// Builds the objective over a model forward pass.
    pub fn on_forward(&self, g: &mut Graph, fw: &Forward, labels: &[f64], tasks: &[usize]) -> Result<Var> {
        self.graph(g, &fw.logits, labels, tasks)
    }

    /// Plain evaluation from per-head logit vectors.
    pub fn value(&self, logits: &[Vec<f64>], labels: &[f64], tasks: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let vars = logits
            .iter()
            .map(|l| g.leaf(Tensor::column(l)?))
            .collect::<Result<Vec<_>>>()?;
        let v = self.graph(&mut g, &vars, labels, tasks)?;
        Ok(g.value(v).item())
    }
}

/// Adaptive-loss-masked multi-task BCE:
/// `−(1/N) Σᵢ Σₘ λₘ 𝕀{task(i) = m} [yᵢ log ŷᵢ(m) + (1 − yᵢ) log(1 − ŷᵢ(m))]`.
pub fn alm_loss(logits: &[Vec<f64>], labels: &[f64], tasks: &[usize], lambdas: &[f64]) -> Result<f64> {
    check_lambdas(lambdas, logits.len())?;
    Objective {
        criterion: Criterion::Bce,
        masking: Masking::Adaptive,
        lambdas: lambdas.to_vec(),
    }
    .value(logits, labels, tasks)
}

/// Multi-task BCE where every example feeds every head.
pub fn unmasked_mtl_loss(logits: &[Vec<f64>], labels: &[f64], lambdas: &[f64]) -> Result<f64> {
    check_lambdas(lambdas, logits.len())?;
    let tasks = vec![0; labels.len()];
    Objective {
        criterion: Criterion::Bce,
        masking: Masking::None,
        lambdas: lambdas.to_vec(),
    }
    .value(logits, labels, &tasks)
}

fn prob_to_logit(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("probability {p} outside [0, 1]")));
    }
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    Ok((p / (1.0 - p)).ln())
}

fn prob_objective(probs: &[f64], labels: &[f64], criterion: Criterion) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(invalid(format!(
            "{} probabilities, {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let z = probs.iter().map(|&p| prob_to_logit(p)).collect::<Result<Vec<_>>>()?;
    Objective {
        criterion,
        masking: Masking::Adaptive,
        lambdas: vec![1.0],
    }
    .value(&[z], labels, &vec![0; probs.len()])
}

/// Mean binary cross-entropy of probabilities, clamped to `[1e-12, 1 − 1e-12]`.
pub fn bce_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    prob_objective(probs, labels, Criterion::Bce)
}

/// Mean focal loss `−α (1 − p_t)^γ log p_t` of probabilities.
pub fn focal_loss(probs: &[f64], labels: &[f64], gamma: f64, alpha: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(invalid("focal_loss: gamma must be non-negative"));
    }
    prob_objective(probs, labels, Criterion::Focal { gamma, alpha })
}
