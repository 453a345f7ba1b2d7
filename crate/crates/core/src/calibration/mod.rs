//! Per-task temperature scaling and expected calibration error.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{invalid, Error, Result};
use crate::model::CamoeModel;
use crate::tensorcore::{sigmoid, softplus};

/// Log-space search interval for the temperature.
const LOG_T_MIN: f64 = -4.0 * std::f64::consts::LN_10;
const LOG_T_MAX: f64 = 4.0 * std::f64::consts::LN_10;
const GRID_POINTS: usize = 161;
const GOLDEN_TOL: f64 = 1e-10;

/// `1 / (1 + exp(−z / t))`.
pub fn apply_temperature(z: f64, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {t}")));
    }
    Ok(sigmoid(z / t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationHead {
    pub task: String,
    pub temperature: f64,
    /// Objective evaluations spent (grid plus refinement).
    pub iterations: usize,
    /// Mean negative log-likelihood at the fitted temperature.
    pub nll: f64,
}

/// Mean NLL of temperature-scaled logits.
pub fn temperature_nll(logits: &[f64], labels: &[f64], t: f64) -> f64 {
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| softplus(-(2.0 * y - 1.0) * z / t))
        .sum();
    sum / logits.len() as f64
}

/// Fits `T` by minimising NLL: a log-spaced grid over `[1e-4, 1e4]` picks a
/// bracket, golden-section search refines inside it.
pub fn fit_temperature(logits: &[f64], labels: &[f64]) -> Result<CalibrationHead> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(invalid(format!(
            "fit_temperature: {} logits, {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite { op: "fit_temperature" });
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 || positives == labels.len() {
        return Err(invalid("fit_temperature: labels contain a single class"));
    }
    let f = |log_t: f64| temperature_nll(logits, labels, log_t.exp());

    let step = (LOG_T_MAX - LOG_T_MIN) / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| LOG_T_MIN + step * i as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&g| f(g)).collect();
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(GRID_POINTS - 1)]);

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut evals = GRID_POINTS + 2;
    while b - a > GOLDEN_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        evals += 1;
    }
    let mut log_t = 0.5 * (a + b);
    let mut nll = f(log_t);
    if values[best] < nll {
        log_t = grid[best];
        nll = values[best];
    }
    Ok(CalibrationHead {
        task: String::new(),
        temperature: log_t.exp(),
        iterations: evals + 1,
        nll,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinScheme {
    EqualWidth,
    /// Edges at sample quantiles of the predictions; tied values share a bin.
    EqualMass,
}

impl FromStr for BinScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal-width" => Ok(BinScheme::EqualWidth),
            "equal-mass" => Ok(BinScheme::EqualMass),
            _ => Err(invalid(format!("unknown bin scheme `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean predicted probability; absent for an empty bin.
    pub mean_confidence: Option<f64>,
    /// Observed click rate; absent for an empty bin.
    pub empirical_ctr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub scheme: BinScheme,
    pub bins: Vec<Bin>,
}

/// Expected calibration error `Σ (|B_m| / n) |acc(B_m) − conf(B_m)|` and the
/// bins it was computed from. Pairs are accumulated in sorted order, so the
/// result does not depend on input order.
pub fn ece(probs: &[f64], labels: &[f64], scheme: BinScheme, m: usize) -> Result<(f64, ReliabilityBins)> {
    let n = probs.len();
    if n == 0 || labels.len() != n || m == 0 {
        return Err(invalid(format!(
            "ece: {n} probabilities, {} labels, {m} bins",
            labels.len()
        )));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(invalid("ece: probabilities must lie in [0, 1]"));
    }
    let mut pairs: Vec<(f64, f64)> = probs.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    // edges[j] is the lower bound of bin j
    let edges: Vec<f64> = match scheme {
        BinScheme::EqualWidth => (0..m).map(|j| j as f64 / m as f64).collect(),
        BinScheme::EqualMass => std::iter::once(0.0)
            .chain((1..m).map(|j| pairs[((j * n).div_ceil(m)).min(n - 1)].0))
            .collect(),
    };
    let bin_of = |p: f64| -> usize {
        match scheme {
            BinScheme::EqualWidth => ((p * m as f64).floor() as usize).min(m - 1),
            BinScheme::EqualMass => edges[1..].partition_point(|&e| e <= p),
        }
    };

    let mut sums = vec![(0usize, 0.0, 0.0); m];
    for &(p, y) in &pairs {
        let s = &mut sums[bin_of(p)];
        s.0 += 1;
        s.1 += p;
        s.2 += y;
    }
    let mut total = 0.0;
    let mut bins = Vec::with_capacity(m);
    for (j, &(count, conf, acc)) in sums.iter().enumerate() {
        let hi = edges.get(j + 1).copied().unwrap_or(1.0);
        let (mean_confidence, empirical_ctr) = if count > 0 {
            let (c, a) = (conf / count as f64, acc / count as f64);
            total += (count as f64 / n as f64) * (a - c).abs();
            (Some(c), Some(a))
        } else {
            (None, None)
        };
        bins.push(Bin {
            lo: edges[j],
            hi,
            count,
            mean_confidence,
            empirical_ctr,
        });
    }
    Ok((total, ReliabilityBins { scheme, bins }))
}

/// Fits one temperature per task on the impressions routed to it and stores
/// the temperatures in the model.
pub fn calibrate_model(model: &mut CamoeModel, validation: &Dataset) -> Result<Vec<CalibrationHead>> {
    let mut raw = model.clone();
    for t in 0..raw.num_tasks() {
        raw.set_temperature(t, 1.0)?;
    }
    let logits = raw.routed_logits(validation, None)?;
    let mut heads = Vec::with_capacity(model.num_tasks());
    for (t, task) in model.grouping().tasks().iter().enumerate() {
        let (z, y): (Vec<f64>, Vec<f64>) = validation
            .impressions()
            .iter()
            .zip(&logits)
            .filter(|(imp, _)| model.grouping().task_of(imp.slot) == t)
            .map(|(imp, &z)| (z, imp.label as f64))
            .unzip();
        let mut head =
            fit_temperature(&z, &y).map_err(|e| invalid(format!("calibrating task `{}`: {e}", task.name)))?;
        head.task = task.name.clone();
        heads.push(head);
    }
    for (t, h) in heads.iter().enumerate() {
        model.set_temperature(t, h.temperature)?;
    }
    Ok(heads)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

pub fn reliability_csv(bins: &ReliabilityBins) -> String {
    let mut out = String::from("bin,lo,hi,count,mean_confidence,empirical_ctr\n");
    for (j, b) in bins.bins.iter().enumerate() {
        let _ = writeln!(
            out,
            "{j},{:.17e},{:.17e},{},{},{}",
            b.lo,
            b.hi,
            b.count,
            opt(b.mean_confidence),
            opt(b.empirical_ctr)
        );
    }
    out
}

pub fn write_reliability_csv(bins: &ReliabilityBins, path: &Path) -> Result<()> {
    std::fs::write(path, reliability_csv(bins))?;
    Ok(())
}

#[cfg(test)]
mod tests;
