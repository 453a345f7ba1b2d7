//! Ranking metrics, per-slot reports, relative change against a baseline and
//! Pareto analysis over configurations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibration::{ece, BinScheme};
use crate::datagen::{AdSlot, Dataset};
use crate::error::{invalid, Error, Result};
use crate::model::{CamoeModel, ExpertMask};
use crate::par;

/// Area under the precision-recall curve by step integration over recall.
///
/// Thresholds sit at the distinct scores; all examples sharing a score enter
/// together, so tied blocks contribute their pooled precision.
pub fn auc_pr(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid(format!(
            "auc_pr: {} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "auc_pr" });
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 {
        return Err(invalid("auc_pr: no positive labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let pos = positives as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Metrics of one ad slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotCell {
    pub count: usize,
    pub positives: usize,
    /// Absent when the slot has no positive example.
    pub auc_pr: Option<f64>,
    pub ece: f64,
    /// `100 (x − b) / b` against the baseline, when both cells exist.
    pub auc_pr_change: Option<f64>,
    pub ece_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotReport {
    pub ece_scheme: BinScheme,
    pub ece_bins: usize,
    /// Name of the report the changes are relative to.
    pub baseline: Option<String>,
    pub slots: BTreeMap<AdSlot, SlotCell>,
}

pub const REPORT_ECE_BINS: usize = 15;

fn pct_change(x: f64, b: f64) -> Option<f64> {
    (b != 0.0).then(|| 100.0 * (x - b) / b)
}

impl SlotReport {
    /// Fills the change columns relative to `baseline`. The two reports must
    /// cover the same slots.
    pub fn compare(&mut self, name: &str, baseline: &SlotReport) -> Result<()> {
        if !self.slots.keys().eq(baseline.slots.keys()) {
            let ours: Vec<_> = self.slots.keys().map(|s| s.name()).collect();
            let theirs: Vec<_> = baseline.slots.keys().map(|s| s.name()).collect();
            return Err(invalid(format!(
                "slot mismatch: report has {ours:?}, baseline `{name}` has {theirs:?}"
            )));
        }
        for (slot, cell) in self.slots.iter_mut() {
            let b = &baseline.slots[slot];
            cell.auc_pr_change = match (cell.auc_pr, b.auc_pr) {
                (Some(x), Some(b)) => pct_change(x, b),
                _ => None,
            };
            cell.ece_change = pct_change(cell.ece, b.ece);
        }
        self.baseline = Some(name.to_owned());
        Ok(())
    }

    pub fn total_count(&self) -> usize {
        self.slots.values().map(|c| c.count).sum()
    }
}

/// Per-slot AUC-PR and equal-mass ECE of `probs` over `data`.
pub fn evaluate(probs: &[f64], data: &Dataset, baseline: Option<(&str, &SlotReport)>) -> Result<SlotReport> {
    evaluate_ranked(probs, probs, data, baseline)
}

/// As [`evaluate`], with AUC-PR taken over `scores` instead of `probs`.
/// `scores` must order each slot's rows as `probs` does; passing pre-sigmoid
/// logits keeps AUC-PR free of ties that rounding in the sigmoid (or its
/// clamp) would introduce.
pub fn evaluate_ranked(
    scores: &[f64],
    probs: &[f64],
    data: &Dataset,
    baseline: Option<(&str, &SlotReport)>,
) -> Result<SlotReport> {
    if probs.len() != data.len() || scores.len() != data.len() {
        return Err(invalid(format!(
            "evaluate: {} scores and {} probabilities for {} impressions",
            scores.len(),
            probs.len(),
            data.len()
        )));
    }
    if data.is_empty() {
        return Err(invalid("evaluate: empty dataset"));
    }
    let present: Vec<AdSlot> = data.count_by_slot().into_keys().collect();
    let cells = par::map(&present, |&slot| -> Result<(AdSlot, SlotCell)> {
        let (mut z, mut p, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for ((imp, &s), &q) in data.impressions().iter().zip(scores).zip(probs) {
            if imp.slot == slot {
                z.push(s);
                p.push(q);
                y.push(f64::from(imp.label));
            }
        }
        let positives = y.iter().filter(|&&v| v == 1.0).count();
        let auc = if positives > 0 { Some(auc_pr(&z, &y)?) } else { None };
        let (e, _) = ece(&p, &y, BinScheme::EqualMass, REPORT_ECE_BINS)?;
        Ok((
            slot,
            SlotCell {
                count: p.len(),
                positives,
                auc_pr: auc,
                ece: e,
                auc_pr_change: None,
                ece_change: None,
            },
        ))
    });
    let mut report = SlotReport {
        ece_scheme: BinScheme::EqualMass,
        ece_bins: REPORT_ECE_BINS,
        baseline: None,
        slots: cells.into_iter().collect::<Result<_>>()?,
    };
    if let Some((name, b)) = baseline {
        report.compare(name, b)?;
    }
    Ok(report)
}

/// Evaluates a model's calibrated, routed probabilities. AUC-PR ranks by the
/// routed logit, so it does not move when temperatures change.
pub fn evaluate_model(
    model: &CamoeModel,
    data: &Dataset,
    mask: Option<&ExpertMask>,
    baseline: Option<(&str, &SlotReport)>,
) -> Result<SlotReport> {
    let logits = model.routed_logits(data, mask)?;
    let probs = model.probs_from_routed(data, &logits);
    evaluate_ranked(&logits, &probs, data, baseline)
}

/// A configuration placed in objective space; higher is better on every axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectivePoint {
    pub label: String,
    pub coordinates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    /// Labels of the non-dominated points, in input order.
    pub front: Vec<String>,
    /// Each dominated label with the front members that dominate it.
    pub dominated: BTreeMap<String, Vec<String>>,
}

/// `a` dominates `b`: at least as good everywhere and strictly better once.
pub fn dominates(a: &ObjectivePoint, b: &ObjectivePoint) -> bool {
    let mut strict = false;
    for (k, &x) in &a.coordinates {
        let y = b.coordinates[k];
        if x < y {
            return false;
        }
        strict |= x > y;
    }
    strict
}

pub fn pareto_front(points: &[ObjectivePoint]) -> Result<ParetoFront> {
    if let Some(first) = points.first() {
        for p in points {
            if !p.coordinates.keys().eq(first.coordinates.keys()) {
                return Err(invalid(format!(
                    "point `{}` has axes {:?}, expected {:?}",
                    p.label,
                    p.coordinates.keys().collect::<Vec<_>>(),
                    first.coordinates.keys().collect::<Vec<_>>()
                )));
            }
            if p.coordinates.values().any(|v| !v.is_finite()) {
                return Err(invalid(format!("point `{}` has a non-finite coordinate", p.label)));
            }
        }
    }
    let mut labels: Vec<&str> = points.iter().map(|p| p.label.as_str()).collect();
    labels.sort_unstable();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid("pareto_front: point labels must be unique"));
    }
    let on_front: Vec<bool> = points.iter().map(|p| !points.iter().any(|q| dominates(q, p))).collect();
    let front_pts: Vec<&ObjectivePoint> = points
        .iter()
        .zip(&on_front)
        .filter(|(_, &f)| f)
        .map(|(p, _)| p)
        .collect();
    let dominated = points
        .iter()
        .zip(&on_front)
        .filter(|(_, &f)| !f)
        .map(|(p, _)| {
            let by = front_pts
                .iter()
                .filter(|q| dominates(q, p))
                .map(|q| q.label.clone())
                .collect();
            (p.label.clone(), by)
        })
        .collect();
    Ok(ParetoFront {
        front: front_pts.iter().map(|p| p.label.clone()).collect(),
        dominated,
    })
}

/// Two-sided exact sign test on paired differences; zeros are dropped.
/// Returns 1 when no difference is non-zero.
pub fn sign_test(deltas: &[f64]) -> f64 {
    let pos = deltas.iter().filter(|&&d| d > 0.0).count();
    let neg = deltas.iter().filter(|&&d| d < 0.0).count();
    let n = pos + neg;
    if n == 0 {
        return 1.0;
    }
    let k = pos.min(neg);
    // Σ_{i ≤ k} C(n, i) / 2ⁿ, built incrementally
    let mut term = 0.5f64.powi(n as i32);
    let mut tail = term;
    for i in 1..=k {
        term *= (n - i + 1) as f64 / i as f64;
        tail += term;
    }
    (2.0 * tail).min(1.0)
}
