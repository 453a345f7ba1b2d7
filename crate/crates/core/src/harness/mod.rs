//! Configuration-driven experiment runner.
//!
//! An experiment is a set of arms (model + loss variants) crossed with seeds.
//! Every (arm, seed) job runs train → calibrate → evaluate → optional
//! simulation against one held-out test split shared by all arms, and leaves
//! its artifacts in `<out>/<arm>/<seed>/`. The directory is self-contained:
//! `job.toml` plus `checkpoint.json` are enough to re-run any later stage.
//! Tables are reduced afterwards, single-threaded, from the files on disk.

mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::auction::{ModelScorer, SimConfig, SimReport, Simulation};
use crate::calibration::{calibrate_model, ece, write_reliability_csv, BinScheme};
use crate::datagen::{downsample_majority, generate, load_csv, split, AdSlot, Dataset, GeneratorConfig, Modality};
use crate::error::{invalid, Error, Result};
use crate::losses::{train, write_train_report, LossConfig};
use crate::metrics::{evaluate_model, SlotReport};
use crate::model::{
    load_checkpoint, save_checkpoint, CamoeModel, ExpertKind, ExpertMask, GroupingKind, ModelConfig, TaskGrouping,
};
use crate::par;

pub use report::{
    ablation_table, masked_table, pareto_axis, pareto_report, read_job_outputs, reduce, AblationTable, ArmSummary,
    JobOutputs, Metric, ParetoReport, Reduction, SeedValue, SimRow, TableCell, TableRow,
};

/// Bins in the per-task reliability CSVs.
pub const RELIABILITY_BINS: usize = 20;

/// Held-out and validation split settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
    /// Share of the non-test pool used for validation.
    pub val_fraction: f64,
    /// Seeds the test split only; it is the same for every arm and seed.
    pub test_seed: u64,
    /// Audio:video cap applied to the training portion.
    pub downsample_ratio: Option<f64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            val_fraction: 0.125,
            test_seed: 99,
            downsample_ratio: None,
        }
    }
}

/// One model/loss variant.
///
/// `expert_kind` and `masking` are shorthands; when present they override
/// `model.expert_kind` and `loss.masking`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    pub grouping: GroupingKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_kind: Option<ExpertKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masking: Option<bool>,
    /// Inference masks to evaluate; empty means every drop-one mask when the
    /// arm appears in a masked table.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masks: Vec<ExpertMask>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
}

impl ArmConfig {
    /// Folds the shorthands into the nested sections.
    pub fn resolved(&self) -> ArmConfig {
        let mut a = self.clone();
        if let Some(k) = a.expert_kind {
            a.model.expert_kind = k;
        }
        if let Some(m) = a.masking {
            a.loss.masking = m;
        }
        a
    }
}

/// A table of per-slot changes against the baseline arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    pub name: String,
    pub arms: Vec<String>,
    #[serde(default)]
    pub metric: Metric,
}

/// A masked-inference table for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskedTableSpec {
    pub name: String,
    pub arm: String,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_pareto_slots() -> Vec<AdSlot> {
    vec![AdSlot::StreamAudio, AdSlot::StreamVideo]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    /// Arm every table is relative to.
    pub baseline: String,
    /// Slots whose AUC-PR changes span the Pareto objective space.
    #[serde(default = "default_pareto_slots")]
    pub pareto_slots: Vec<AdSlot>,
    /// Reads impressions from a CSV instead of generating them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_csv: Option<PathBuf>,
    #[serde(default)]
    pub data: GeneratorConfig,
    #[serde(default)]
    pub split: SplitConfig,
    /// Traffic is drawn from `data`; the simulation seed is the job seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimConfig>,
    pub arms: Vec<ArmConfig>,
    #[serde(default)]
    pub tables: Vec<TableSpec>,
    #[serde(default)]
    pub masked_tables: Vec<MaskedTableSpec>,
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn arm(&self, name: &str) -> Option<&ArmConfig> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.arms.is_empty() {
            return bad("at least one arm is required".into());
        }
        let mut names = BTreeMap::new();
        for a in &self.arms {
            if a.name.is_empty() || a.name.contains(['/', '\\']) || a.name.starts_with('.') {
                return bad(format!("arm name `{}` is not usable as a directory name", a.name));
            }
            if names.insert(a.name.as_str(), ()).is_some() {
                return bad(format!("duplicate arm name `{}`", a.name));
            }
            let r = a.resolved();
            r.model
                .validate()
                .map_err(|e| Error::Config(format!("arm `{}`: {e}", a.name)))?;
            r.loss
                .optimizer
                .validate()
                .map_err(|e| Error::Config(format!("arm `{}`: {e}", a.name)))?;
            if r.model.feature_dim != self.data.feature_dim && self.data_csv.is_none() {
                return bad(format!(
                    "arm `{}`: model.feature_dim {} does not match data.feature_dim {}",
                    a.name, r.model.feature_dim, self.data.feature_dim
                ));
            }
            for m in &a.masks {
                if m.len() != r.model.experts {
                    return bad(format!(
                        "arm `{}`: mask of length {} for {} experts",
                        a.name,
                        m.len(),
                        r.model.experts
                    ));
                }
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate seed".into());
        }
        if self.arm(&self.baseline).is_none() {
            return bad(format!("baseline `{}` is not an arm", self.baseline));
        }
        let mut outputs = BTreeMap::new();
        for t in &self.tables {
            if let Some(missing) = t.arms.iter().find(|a| self.arm(a).is_none()) {
                return bad(format!("table `{}` names unknown arm `{missing}`", t.name));
            }
            if outputs.insert(t.name.as_str(), ()).is_some() {
                return bad(format!("duplicate table name `{}`", t.name));
            }
        }
        for t in &self.masked_tables {
            if self.arm(&t.arm).is_none() {
                return bad(format!("masked table `{}` names unknown arm `{}`", t.name, t.arm));
            }
            if outputs.insert(t.name.as_str(), ()).is_some() {
                return bad(format!("duplicate table name `{}`", t.name));
            }
        }
        let s = &self.split;
        if !(s.test_fraction > 0.0 && s.test_fraction < 1.0) || !(s.val_fraction > 0.0 && s.val_fraction < 1.0) {
            return bad("split fractions must lie strictly between 0 and 1".into());
        }
        if self.data_csv.is_none() {
            self.data.validate().map_err(|e| Error::Config(format!("data: {e}")))?;
        }
        if let Some(sim) = &self.simulation {
            sim.validate()?;
        }
        Ok(())
    }

    /// Masks evaluated for `arm`, or `None` if it is in no masked table and
    /// lists none.
    pub fn masks_for(&self, arm: &ArmConfig) -> Option<Vec<ExpertMask>> {
        let in_table = self.masked_tables.iter().any(|t| t.arm == arm.name);
        if !arm.masks.is_empty() {
            Some(arm.masks.clone())
        } else if in_table {
            Some(drop_one_masks(arm.resolved().model.experts))
        } else {
            None
        }
    }
}

/// Reads and validates a config file. A missing file is a config error
/// naming the path.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config file `{}`: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text).map_err(|e| Error::Config(format!("`{}`: {e}", path.display())))
}

/// Masks that each drop exactly one of `k` experts. Empty for `k = 1`.
pub fn drop_one_masks(k: usize) -> Vec<ExpertMask> {
    if k < 2 {
        return Vec::new();
    }
    (0..k)
        .map(|drop| ExpertMask::new((0..k).map(|i| u8::from(i != drop)).collect()).expect("keeps k - 1 experts"))
        .collect()
}

/// Row label of a mask: `none` keeps everything; with two experts, `left`
/// drops expert 0 and `right` drops expert 1.
pub fn mask_name(m: &ExpertMask) -> String {
    match m.entries() {
        e if e.iter().all(|&v| v == 1) => "none".into(),
        [0, 1] => "left".into(),
        [1, 0] => "right".into(),
        e => format!("keep-{}", e.iter().map(|v| v.to_string()).collect::<String>()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub name: String,
    pub mask: ExpertMask,
    /// Video slots only; changes are relative to the `none` row.
    pub report: SlotReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedEval {
    pub rows: Vec<MaskRow>,
}

/// Evaluates the video-slot impressions of `data` with no mask and with each
/// of `masks`. The first row is always `none`; all-ones masks in `masks` are
/// not repeated.
pub fn masked_eval(model: &CamoeModel, data: &Dataset, masks: &[ExpertMask]) -> Result<MaskedEval> {
    let k = model.num_experts();
    if let Some(m) = masks.iter().find(|m| m.len() != k) {
        return Err(invalid(format!(
            "masked_eval: mask of length {} for a model with {k} experts",
            m.len()
        )));
    }
    let keep: Vec<usize> = (0..data.len())
        .filter(|&i| data.impressions()[i].slot.modality() == Modality::Video)
        .collect();
    if keep.is_empty() {
        return Err(invalid("masked_eval: no video impressions"));
    }
    let video = data.subset(&keep, "video slots");
    let none = evaluate_model(model, &video, None, None)?;
    let mut rows = vec![MaskRow {
        name: "none".into(),
        mask: ExpertMask::all_ones(k),
        report: evaluate_model(model, &video, None, Some(("none", &none)))?,
    }];
    for m in masks {
        if m.entries().iter().all(|&v| v == 1) {
            continue;
        }
        rows.push(MaskRow {
            name: mask_name(m),
            mask: m.clone(),
            report: evaluate_model(model, &video, Some(m), Some(("none", &none)))?,
        });
    }
    Ok(MaskedEval { rows })
}

/// Everything one (arm, seed) job needs; written as `job.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<ExpertMask>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_csv: Option<PathBuf>,
    pub data: GeneratorConfig,
    pub split: SplitConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimConfig>,
    /// Resolved: the shorthands are already folded in.
    pub arm: ArmConfig,
}

impl JobSpec {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("job.toml"))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", dir.join("job.toml").display())))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join("job.toml"), text)?;
        Ok(())
    }

    fn loss(&self) -> LossConfig {
        let mut loss = self.arm.loss.clone();
        loss.optimizer.seed = self.seed;
        loss
    }
}

/// The impressions of an experiment and its shared test split.
#[derive(Debug, Clone)]
pub struct Splits {
    pub pool: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn load(data_csv: Option<&Path>, data: &GeneratorConfig, split_cfg: &SplitConfig) -> Result<Self> {
        let all = match data_csv {
            Some(p) => load_csv(p)?,
            None => generate(data)?,
        };
        let (pool, test) = split(&all, 1.0 - split_cfg.test_fraction, split_cfg.test_seed)?;
        Ok(Self { pool, test })
    }

    pub fn for_job(job: &JobSpec) -> Result<Self> {
        Self::load(job.data_csv.as_deref(), &job.data, &job.split)
    }

    /// `(train, validation)` for one seed; down-sampling touches train only.
    pub fn train_val(&self, split_cfg: &SplitConfig, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train_set, val) = split(&self.pool, 1.0 - split_cfg.val_fraction, seed)?;
        let train_set = match split_cfg.downsample_ratio {
            Some(r) => downsample_majority(&train_set, r, seed)?,
            None => train_set,
        };
        Ok((train_set, val))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Train,
    Calibrate,
    Evaluate,
    Simulate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Evaluate => "evaluate",
            Stage::Simulate => "simulate",
        }
    }
}

pub fn job_dir(out: &Path, arm: &str, seed: u64) -> PathBuf {
    out.join(arm).join(seed.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Wall-clock seconds per stage; the only non-deterministic artifact.
fn record_timing(dir: &Path, stage: Stage, secs: f64) -> Result<()> {
    let path = dir.join("timing.json");
    let mut t: BTreeMap<String, f64> = if path.exists() {
        read_json(&path)?
    } else {
        BTreeMap::new()
    };
    t.insert(stage.as_str().into(), secs);
    write_json(&path, &t)
}

/// Builds and trains the model; writes `job.toml`, an uncalibrated
/// `checkpoint.json` and `train_report.jsonl`.
pub fn train_stage(job: &JobSpec, splits: &Splits, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    job.write(dir)?;
    let (train_set, val) = splits.train_val(&job.split, job.seed)?;
    let grouping = TaskGrouping::new(job.arm.grouping);
    let mut model = CamoeModel::build(grouping, job.arm.model.clone(), job.seed)?;
    let report = train(&mut model, &train_set, Some(&val), &job.loss())?;
    save_checkpoint(&model, &dir.join("checkpoint.json"))?;
    write_train_report(&report, &dir.join("train_report.jsonl"))?;
    record_timing(dir, Stage::Train, report.wall_time_secs)
}

/// Fits per-task temperatures on the job's validation split and rewrites the
/// checkpoint; the fitted heads go to `calibration.json`.
pub fn calibrate_stage(job: &JobSpec, splits: &Splits, dir: &Path) -> Result<()> {
    let t0 = Instant::now();
    let (_, val) = splits.train_val(&job.split, job.seed)?;
    let mut model = load_checkpoint(&dir.join("checkpoint.json"))?;
    let heads = calibrate_model(&mut model, &val)?;
    save_checkpoint(&model, &dir.join("checkpoint.json"))?;
    write_json(&dir.join("calibration.json"), &heads)?;
    record_timing(dir, Stage::Calibrate, t0.elapsed().as_secs_f64())
}

/// Writes `slot_report.json`, `reliability_<task>.csv` and, when masks are
/// configured, `masked_eval.json`, all on the shared test split.
pub fn evaluate_stage(job: &JobSpec, splits: &Splits, dir: &Path) -> Result<()> {
    let t0 = Instant::now();
    let model = load_checkpoint(&dir.join("checkpoint.json"))?;
    let test = &splits.test;
    write_json(
        &dir.join("slot_report.json"),
        &evaluate_model(&model, test, None, None)?,
    )?;

    let probs = model.routed_probs(test, None)?;
    let grouping = model.grouping();
    for (t, task) in grouping.tasks().iter().enumerate() {
        let (p, y): (Vec<f64>, Vec<f64>) = test
            .impressions()
            .iter()
            .zip(&probs)
            .filter(|(imp, _)| grouping.task_of(imp.slot) == t)
            .map(|(imp, &p)| (p, f64::from(imp.label)))
            .unzip();
        if p.is_empty() {
            continue;
        }
        let (_, bins) = ece(&p, &y, BinScheme::EqualMass, RELIABILITY_BINS)?;
        write_reliability_csv(&bins, &dir.join(format!("reliability_{}.csv", task.name)))?;
    }
    if let Some(masks) = &job.masks {
        write_json(&dir.join("masked_eval.json"), &masked_eval(&model, test, masks)?)?;
    }
    record_timing(dir, Stage::Evaluate, t0.elapsed().as_secs_f64())
}

/// Runs the auction simulation with the calibrated model as the only arm.
pub fn simulate_stage(job: &JobSpec, dir: &Path) -> Result<()> {
    let Some(sim_cfg) = &job.simulation else {
        return Err(Error::Config("simulate: the config has no [simulation] section".into()));
    };
    let t0 = Instant::now();
    let model = load_checkpoint(&dir.join("checkpoint.json"))?;
    let sim = Simulation::new(
        &job.data,
        SimConfig {
            seed: job.seed,
            ..sim_cfg.clone()
        },
    )?;
    let scorer = ModelScorer(&model);
    let mut reports = sim.run(&[(job.arm.name.as_str(), &scorer)], None)?;
    let report: SimReport = reports.remove(0);
    write_json(&dir.join("sim_report.json"), &report)?;
    record_timing(dir, Stage::Simulate, t0.elapsed().as_secs_f64())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobFailure {
    pub arm: String,
    pub seed: u64,
    pub stage: Stage,
    pub error: String,
}

/// An experiment bound to an output directory.
#[derive(Debug, Clone)]
pub struct Runner {
    config: ExperimentConfig,
    out: PathBuf,
}

impl Runner {
    pub fn new(config: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            out: out.into(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    /// Jobs in config order: arms outer, seeds inner.
    pub fn jobs(&self) -> Vec<JobSpec> {
        let c = &self.config;
        c.arms
            .iter()
            .flat_map(|arm| {
                c.seeds.iter().map(move |&seed| JobSpec {
                    seed,
                    masks: c.masks_for(arm),
                    data_csv: c.data_csv.clone(),
                    data: c.data.clone(),
                    split: c.split.clone(),
                    simulation: c.simulation.clone(),
                    arm: arm.resolved(),
                })
            })
            .collect()
    }

    fn snapshot(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join("experiment.toml"), self.config.to_toml()?)?;
        Ok(())
    }

    /// Runs `stages` for every job, in parallel across jobs. A failing stage
    /// ends its own job only; the failures come back in job order.
    pub fn run_stages(&self, stages: &[Stage]) -> Result<Vec<JobFailure>> {
        self.snapshot()?;
        let c = &self.config;
        let splits = Splits::load(c.data_csv.as_deref(), &c.data, &c.split)?;
        let jobs = self.jobs();
        let results = par::map(&jobs, |job| {
            let dir = job_dir(&self.out, &job.arm.name, job.seed);
            for &stage in stages {
                let r = match stage {
                    Stage::Train => train_stage(job, &splits, &dir),
                    Stage::Calibrate => calibrate_stage(job, &splits, &dir),
                    Stage::Evaluate => evaluate_stage(job, &splits, &dir),
                    Stage::Simulate if job.simulation.is_none() => Ok(()),
                    Stage::Simulate => simulate_stage(job, &dir),
                };
                if let Err(e) = r {
                    return Some(JobFailure {
                        arm: job.arm.name.clone(),
                        seed: job.seed,
                        stage,
                        error: e.to_string(),
                    });
                }
            }
            None
        });
        Ok(results.into_iter().flatten().collect())
    }

    /// Reduces whatever job outputs exist into tables and writes them, along
    /// with `failures.json`.
    pub fn write_tables(&self, failures: &[JobFailure]) -> Result<Reduction> {
        let outputs = read_job_outputs(&self.config, &self.out)?;
        let red = reduce(&self.config, &outputs, failures)?;
        red.write(&self.out)?;
        write_json(&self.out.join("failures.json"), &failures)?;
        Ok(red)
    }

    /// Full pipeline: every stage for every job, then the tables and the
    /// Pareto report.
    pub fn ablate(&self) -> Result<(Reduction, Vec<JobFailure>)> {
        let failures = self.run_stages(&[Stage::Train, Stage::Calibrate, Stage::Evaluate, Stage::Simulate])?;
        let red = self.write_tables(&failures)?;
        Ok((red, failures))
    }
}
