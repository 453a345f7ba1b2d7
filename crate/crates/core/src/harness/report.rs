//! Reduction of per-job artifacts into comparison tables.
//!
//! Each cell is a mean over seeds of `100 (x − b) / b`, where `x` and `b` are
//! values read back from the jobs' JSON reports. Nothing is recomputed from
//! models here.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{job_dir, read_json, write_json, ExperimentConfig, JobFailure, MaskedEval};
use crate::auction::SimReport;
use crate::datagen::{AdSlot, Modality};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::metrics::{pareto_front, sign_test, ObjectivePoint, SlotCell, SlotReport};
use crate::model::{CamoeModel, ExpertKind, GroupingKind, TaskGrouping};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    AucPr,
    Ece,
}

impl Metric {
    fn of(self, cell: &SlotCell) -> Option<f64> {
        match self {
            Metric::AucPr => cell.auc_pr,
            Metric::Ece => Some(cell.ece),
        }
    }
}

/// Artifacts read back from the job directories, keyed by `(arm, seed)`.
#[derive(Debug, Clone, Default)]
pub struct JobOutputs {
    pub slot_reports: BTreeMap<(String, u64), SlotReport>,
    pub masked: BTreeMap<(String, u64), MaskedEval>,
    pub sims: BTreeMap<(String, u64), SimReport>,
}

/// Loads every report present under `out`; missing files are skipped.
pub fn read_job_outputs(cfg: &ExperimentConfig, out: &Path) -> Result<JobOutputs> {
    let mut o = JobOutputs::default();
    for arm in &cfg.arms {
        for &seed in &cfg.seeds {
            let dir = job_dir(out, &arm.name, seed);
            let key = (arm.name.clone(), seed);
            if dir.join("slot_report.json").exists() {
                o.slot_reports
                    .insert(key.clone(), read_json(&dir.join("slot_report.json"))?);
            }
            if dir.join("masked_eval.json").exists() {
                o.masked.insert(key.clone(), read_json(&dir.join("masked_eval.json"))?);
            }
            if dir.join("sim_report.json").exists() {
                o.sims.insert(key, read_json(&dir.join("sim_report.json"))?);
            }
        }
    }
    Ok(o)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedValue {
    pub seed: u64,
    pub value: f64,
    pub baseline: f64,
    /// `100 (value − baseline) / baseline`
    pub change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    /// Mean of the per-seed changes; absent when no seed has both values.
    pub mean: Option<f64>,
    pub seeds: Vec<SeedValue>,
    /// Two-sided sign test on the per-seed changes.
    pub p_value: Option<f64>,
}

impl TableCell {
    fn from_seeds(seeds: Vec<SeedValue>) -> Self {
        let changes: Vec<f64> = seeds.iter().map(|s| s.change).collect();
        let (mean, p_value) = if changes.is_empty() {
            (None, None)
        } else {
            (
                Some(changes.iter().sum::<f64>() / changes.len() as f64),
                Some(sign_test(&changes)),
            )
        };
        Self { mean, seeds, p_value }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub cells: Vec<TableCell>,
}

/// Rows are arms (or masks), columns slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub name: String,
    pub metric: Metric,
    /// Arm, or mask row, the changes are relative to.
    pub baseline: String,
    pub columns: Vec<AdSlot>,
    pub rows: Vec<TableRow>,
}

fn change(x: f64, b: f64) -> Option<f64> {
    (b != 0.0).then(|| 100.0 * (x - b) / b)
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn cell(&self, label: &str, slot: AdSlot) -> Option<&TableCell> {
        let c = self.columns.iter().position(|&s| s == slot)?;
        self.row(label).map(|r| &r.cells[c])
    }

    /// Mean changes, one row per label; empty fields for absent cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm");
        for c in &self.columns {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.label);
            for cell in &r.cells {
                s.push(',');
                if let Some(m) = cell.mean {
                    write!(s, "{m}").unwrap();
                }
            }
            s.push('\n');
        }
        s
    }

    /// Long format: one line per (row, slot, seed) with both raw values.
    pub fn detail_csv(&self) -> String {
        let mut s = String::from("arm,slot,seed,value,baseline,change\n");
        for r in &self.rows {
            for (slot, cell) in self.columns.iter().zip(&r.cells) {
                for v in &cell.seeds {
                    writeln!(
                        s,
                        "{},{slot},{},{},{},{}",
                        r.label, v.seed, v.value, v.baseline, v.change
                    )
                    .unwrap();
                }
            }
        }
        s
    }

    pub fn sign_test_csv(&self) -> String {
        let mut s = String::from("arm,slot,seeds,positive,negative,p_value\n");
        for r in &self.rows {
            for (slot, cell) in self.columns.iter().zip(&r.cells) {
                let Some(p) = cell.p_value else { continue };
                let pos = cell.seeds.iter().filter(|v| v.change > 0.0).count();
                let neg = cell.seeds.iter().filter(|v| v.change < 0.0).count();
                writeln!(s, "{},{slot},{},{pos},{neg},{p}", r.label, cell.seeds.len()).unwrap();
            }
        }
        s
    }
}

/// Per-slot changes of `arms` against `baseline`, paired by seed.
pub fn ablation_table(
    name: &str,
    metric: Metric,
    arms: &[String],
    baseline: &str,
    seeds: &[u64],
    reports: &BTreeMap<(String, u64), SlotReport>,
) -> AblationTable {
    let mut columns: Vec<AdSlot> = seeds
        .iter()
        .filter_map(|&s| reports.get(&(baseline.to_owned(), s)))
        .flat_map(|r| r.slots.keys().copied())
        .collect();
    columns.sort_unstable();
    columns.dedup();
    let rows = arms
        .iter()
        .map(|arm| TableRow {
            label: arm.clone(),
            cells: columns
                .iter()
                .map(|slot| {
                    let vals = seeds
                        .iter()
                        .filter_map(|&seed| {
                            let x = metric.of(reports.get(&(arm.clone(), seed))?.slots.get(slot)?)?;
                            let b = metric.of(reports.get(&(baseline.to_owned(), seed))?.slots.get(slot)?)?;
                            Some(SeedValue {
                                seed,
                                value: x,
                                baseline: b,
                                change: change(x, b)?,
                            })
                        })
                        .collect();
                    TableCell::from_seeds(vals)
                })
                .collect(),
        })
        .collect();
    AblationTable {
        name: name.to_owned(),
        metric,
        baseline: baseline.to_owned(),
        columns,
        rows,
    }
}

/// Masked-inference table of one arm: rows are masks, columns video slots,
/// changes relative to the unmasked row of the same seed.
pub fn masked_table(
    name: &str,
    arm: &str,
    seeds: &[u64],
    masked: &BTreeMap<(String, u64), MaskedEval>,
) -> AblationTable {
    let evals: Vec<(u64, &MaskedEval)> = seeds
        .iter()
        .filter_map(|&s| masked.get(&(arm.to_owned(), s)).map(|m| (s, m)))
        .collect();
    let mut labels: Vec<String> = Vec::new();
    let mut columns: Vec<AdSlot> = Vec::new();
    for (_, m) in &evals {
        for r in &m.rows {
            if !labels.contains(&r.name) {
                labels.push(r.name.clone());
            }
            columns.extend(r.report.slots.keys().copied());
        }
    }
    columns.sort_unstable();
    columns.dedup();
    let rows = labels
        .iter()
        .map(|label| TableRow {
            label: label.clone(),
            cells: columns
                .iter()
                .map(|slot| {
                    let vals = evals
                        .iter()
                        .filter_map(|&(seed, m)| {
                            let get =
                                |name: &str| m.rows.iter().find(|r| r.name == name)?.report.slots.get(slot)?.auc_pr;
                            let (x, b) = (get(label)?, get("none")?);
                            Some(SeedValue {
                                seed,
                                value: x,
                                baseline: b,
                                change: change(x, b)?,
                            })
                        })
                        .collect();
                    TableCell::from_seeds(vals)
                })
                .collect(),
        })
        .collect();
    AblationTable {
        name: name.to_owned(),
        metric: Metric::AucPr,
        baseline: "none".into(),
        columns,
        rows,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub grouping: GroupingKind,
    pub expert_kind: ExpertKind,
    pub loss: LossKind,
    pub masking: bool,
    pub parameters: usize,
    pub completed_seeds: Vec<u64>,
    pub failures: Vec<JobFailure>,
    pub mean_auc_pr: BTreeMap<AdSlot, f64>,
    pub mean_ece: BTreeMap<AdSlot, f64>,
}

fn mean_by_slot<'a>(
    reports: impl Iterator<Item = &'a SlotReport>,
    f: impl Fn(&SlotCell) -> Option<f64>,
) -> BTreeMap<AdSlot, f64> {
    let mut acc: BTreeMap<AdSlot, (f64, usize)> = BTreeMap::new();
    for r in reports {
        for (&slot, cell) in &r.slots {
            if let Some(v) = f(cell) {
                let e = acc.entry(slot).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Mean simulation outcome of an arm for one modality, with changes against
/// the baseline arm paired by seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub arm: String,
    pub modality: String,
    pub seeds: usize,
    pub ctr: Option<f64>,
    pub ecpc: Option<f64>,
    pub ctr_change: Option<f64>,
    pub ecpc_change: Option<f64>,
}

fn sim_rows(cfg: &ExperimentConfig, sims: &BTreeMap<(String, u64), SimReport>) -> Vec<SimRow> {
    fn mean(v: &[f64]) -> Option<f64> {
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
    let scopes: [(&str, Option<Modality>); 3] = [
        ("Audio", Some(Modality::Audio)),
        ("Video", Some(Modality::Video)),
        ("Total", None),
    ];
    let mut rows = Vec::new();
    for arm in &cfg.arms {
        for (label, m) in scopes {
            let stats = |a: &str, seed: u64| {
                let r = sims.get(&(a.to_owned(), seed))?;
                match m {
                    Some(m) => r.by_modality.get(&m),
                    None => Some(&r.total),
                }
            };
            let (mut ctr, mut ecpc, mut dctr, mut decpc, mut n) = (vec![], vec![], vec![], vec![], 0);
            for &seed in &cfg.seeds {
                let Some(s) = stats(&arm.name, seed) else { continue };
                n += 1;
                ctr.extend(s.ctr);
                ecpc.extend(s.ecpc);
                if let Some(b) = stats(&cfg.baseline, seed) {
                    dctr.extend(s.ctr.zip(b.ctr).and_then(|(x, b)| change(x, b)));
                    decpc.extend(s.ecpc.zip(b.ecpc).and_then(|(x, b)| change(x, b)));
                }
            }
            if n > 0 {
                rows.push(SimRow {
                    arm: arm.name.clone(),
                    modality: label.into(),
                    seeds: n,
                    ctr: mean(&ctr),
                    ecpc: mean(&ecpc),
                    ctr_change: mean(&dctr),
                    ecpc_change: mean(&decpc),
                });
            }
        }
    }
    rows
}

fn sim_csv(rows: &[SimRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("arm,modality,seeds,ctr,ecpc,ctr_change,ecpc_change\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.arm,
            r.modality,
            r.seeds,
            opt(r.ctr),
            opt(r.ecpc),
            opt(r.ctr_change),
            opt(r.ecpc_change)
        )
        .unwrap();
    }
    s
}

/// Arms placed by their mean AUC-PR change on each objective slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoReport {
    pub baseline: String,
    pub axes: Vec<String>,
    pub points: Vec<ObjectivePoint>,
    pub front: Vec<String>,
    pub dominated: BTreeMap<String, Vec<String>>,
    /// Arms lacking a value on some axis.
    pub skipped: Vec<String>,
}

pub fn pareto_axis(slot: AdSlot) -> String {
    format!("{slot} auc_pr change")
}

pub fn pareto_report(cfg: &ExperimentConfig, outputs: &JobOutputs) -> Result<ParetoReport> {
    let arms: Vec<String> = cfg.arms.iter().map(|a| a.name.clone()).collect();
    let t = ablation_table(
        "pareto",
        Metric::AucPr,
        &arms,
        &cfg.baseline,
        &cfg.seeds,
        &outputs.slot_reports,
    );
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for arm in &arms {
        let coords: Option<BTreeMap<String, f64>> = cfg
            .pareto_slots
            .iter()
            .map(|&s| Some((pareto_axis(s), t.cell(arm, s)?.mean?)))
            .collect();
        match coords {
            Some(coordinates) => points.push(ObjectivePoint {
                label: arm.clone(),
                coordinates,
            }),
            None => skipped.push(arm.clone()),
        }
    }
    let f = pareto_front(&points)?;
    Ok(ParetoReport {
        baseline: cfg.baseline.clone(),
        axes: cfg.pareto_slots.iter().map(|&s| pareto_axis(s)).collect(),
        points,
        front: f.front,
        dominated: f.dominated,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    pub tables: Vec<AblationTable>,
    pub arms: Vec<ArmSummary>,
    pub simulation: Vec<SimRow>,
    pub pareto: ParetoReport,
}

impl Reduction {
    pub fn table(&self, name: &str) -> Option<&AblationTable> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        for t in &self.tables {
            std::fs::write(out.join(format!("{}.csv", t.name)), t.to_csv())?;
            std::fs::write(out.join(format!("{}_detail.csv", t.name)), t.detail_csv())?;
            std::fs::write(out.join(format!("{}_sign_test.csv", t.name)), t.sign_test_csv())?;
        }
        write_json(&out.join("arms.json"), &self.arms)?;
        if !self.simulation.is_empty() {
            std::fs::write(out.join("simulation.csv"), sim_csv(&self.simulation))?;
        }
        write_json(&out.join("pareto.json"), &self.pareto)
    }
}

/// Builds every configured table, the arm summaries, the simulation rows and
/// the Pareto report.
pub fn reduce(cfg: &ExperimentConfig, outputs: &JobOutputs, failures: &[JobFailure]) -> Result<Reduction> {
    let mut tables: Vec<AblationTable> = cfg
        .tables
        .iter()
        .map(|t| {
            ablation_table(
                &t.name,
                t.metric,
                &t.arms,
                &cfg.baseline,
                &cfg.seeds,
                &outputs.slot_reports,
            )
        })
        .collect();
    tables.extend(
        cfg.masked_tables
            .iter()
            .map(|t| masked_table(&t.name, &t.arm, &cfg.seeds, &outputs.masked)),
    );

    let arms = cfg
        .arms
        .iter()
        .map(|a| {
            let r = a.resolved();
            let model = CamoeModel::build(TaskGrouping::new(r.grouping), r.model.clone(), 0)
                .map_err(|e| Error::Config(format!("arm `{}`: {e}", a.name)))?;
            let reports: Vec<&SlotReport> = cfg
                .seeds
                .iter()
                .filter_map(|&s| outputs.slot_reports.get(&(a.name.clone(), s)))
                .collect();
            Ok(ArmSummary {
                name: a.name.clone(),
                grouping: r.grouping,
                expert_kind: r.model.expert_kind,
                loss: r.loss.kind,
                masking: r.loss.masking,
                parameters: model.param_count(),
                completed_seeds: cfg
                    .seeds
                    .iter()
                    .copied()
                    .filter(|&s| outputs.slot_reports.contains_key(&(a.name.clone(), s)))
                    .collect(),
                failures: failures.iter().filter(|f| f.arm == a.name).cloned().collect(),
                mean_auc_pr: mean_by_slot(reports.iter().copied(), |c| c.auc_pr),
                mean_ece: mean_by_slot(reports.iter().copied(), |c| Some(c.ece)),
            })
        })
        .collect::<Result<_>>()?;

    Ok(Reduction {
        tables,
        arms,
        simulation: sim_rows(cfg, &outputs.sims),
        pareto: pareto_report(cfg, outputs)?,
    })
}
