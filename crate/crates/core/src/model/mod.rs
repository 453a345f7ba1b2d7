//! Multi-gate mixture of experts with deep-cross experts.
//!
//! Features pass through a shared linear embedding and batch norm. `K`
//! experts read the embedding; every task owns a softmax gate over the
//! experts (also fed by the embedding) and a tower ending in one logit. Which
//! slots feed which task is decided by a [`TaskGrouping`].

mod checkpoint;
mod grouping;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{invalid, Error, Result};
use crate::par;
use crate::tensorcore::{sigmoid, BatchStats, BnMode, Graph, ParamId, ParamStore, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use grouping::{GroupingKind, Task, TaskGrouping};

/// Rows per graph when running inference over a large batch.
const INFER_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    Dcn,
    Mlp,
}

impl std::str::FromStr for ExpertKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dcn" => Ok(ExpertKind::Dcn),
            "mlp" => Ok(ExpertKind::Mlp),
            _ => Err(invalid(format!("unknown expert kind `{s}`"))),
        }
    }
}

/// Architecture hyperparameters.
///
/// Each expert holds `branches` parallel branches. A DCN branch is a stack of
/// `cross_layers` low-rank cross layers next to a deep ReLU MLP, both reading
/// the expert input; an MLP branch is the deep part alone. Branch outputs are
/// concatenated and linearly projected to `expert_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub experts: usize,
    pub expert_kind: ExpertKind,
    pub expert_dim: usize,
    pub branches: usize,
    pub cross_layers: usize,
    pub cross_rank: usize,
    pub deep_layers: Vec<usize>,
    /// Hidden tower widths; a final 1-wide logit layer is always appended.
    pub tower_layers: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            embed_dim: 32,
            experts: 2,
            expert_kind: ExpertKind::Dcn,
            expert_dim: 32,
            branches: 3,
            cross_layers: 2,
            cross_rank: 8,
            deep_layers: vec![32, 32],
            tower_layers: vec![16],
            bn_eps: 1e-5,
            bn_momentum: 0.99,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("experts", self.experts),
            ("expert_dim", self.expert_dim),
            ("branches", self.branches),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.expert_kind == ExpertKind::Dcn && (self.cross_layers == 0 || self.cross_rank == 0) {
            return Err(Error::Config(
                "dcn experts need cross_layers >= 1 and cross_rank >= 1".into(),
            ));
        }
        if self.expert_kind == ExpertKind::Mlp && self.deep_layers.is_empty() {
            return Err(Error::Config("mlp experts need at least one deep layer".into()));
        }
        if self.deep_layers.iter().chain(&self.tower_layers).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(
                "bn_eps must be positive and bn_momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Inference-time expert mask; entry `k` is 0 to drop expert `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct ExpertMask(Vec<u8>);

impl TryFrom<Vec<u8>> for ExpertMask {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        ExpertMask::new(v)
    }
}

impl From<ExpertMask> for Vec<u8> {
    fn from(m: ExpertMask) -> Self {
        m.0
    }
}

impl ExpertMask {
    pub fn new(entries: Vec<u8>) -> Result<Self> {
        if entries.iter().any(|&e| e > 1) {
            return Err(invalid("expert mask entries must be 0 or 1"));
        }
        if !entries.contains(&1) {
            return Err(invalid("expert mask must keep at least one expert"));
        }
        Ok(Self(entries))
    }

    pub fn all_ones(k: usize) -> Self {
        Self(vec![1; k])
    }

    pub fn entries(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn keeps(&self, k: usize) -> bool {
        self.0[k] == 1
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct Cross {
    w1: ParamId,
    w2: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Branch {
    cross: Vec<Cross>,
    deep: Vec<Linear>,
}

#[derive(Debug, Clone)]
struct Expert {
    branches: Vec<Branch>,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Linear,
    bn_gamma: ParamId,
    bn_beta: ParamId,
    experts: Vec<Expert>,
    gates: Vec<Linear>,
    towers: Vec<Vec<Linear>>,
}

struct Alloc<'a> {
    store: &'a mut ParamStore,
    init: &'a mut dyn FnMut([usize; 2], usize) -> Tensor,
}

impl Alloc<'_> {
    fn add(&mut self, name: String, shape: [usize; 2], fan_in: usize) -> ParamId {
        let t = (self.init)(shape, fan_in);
        self.store.add(name, t)
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize, bias: bool) -> Linear {
        Linear {
            w: self.add(format!("{name}.w"), [out, inp], inp),
            b: bias.then(|| self.add(format!("{name}.b"), [1, out], 0)),
        }
    }
}

/// Allocates every parameter in a fixed order; `init(shape, fan_in)` supplies
/// each value.
fn allocate(
    cfg: &ModelConfig,
    tasks: usize,
    store: &mut ParamStore,
    init: &mut dyn FnMut([usize; 2], usize) -> Tensor,
) -> Layout {
    let mut a = Alloc { store, init };
    let e = cfg.embed_dim;
    let embed = a.linear("embed", e, cfg.feature_dim, false);
    let bn_gamma = a.store.add("embed.bn.gamma", Tensor::filled(&[1, e], 1.0));
    let bn_beta = a.store.add("embed.bn.beta", Tensor::zeros(&[1, e]));

    let mut experts = Vec::with_capacity(cfg.experts);
    for k in 0..cfg.experts {
        let mut branches = Vec::with_capacity(cfg.branches);
        let mut concat_width = 0;
        for j in 0..cfg.branches {
            let prefix = format!("expert{k}.branch{j}");
            let mut cross = Vec::new();
            if cfg.expert_kind == ExpertKind::Dcn {
                for l in 0..cfg.cross_layers {
                    let name = format!("{prefix}.cross{l}");
                    let w1 = a.add(format!("{name}.w1"), [cfg.cross_rank, e], e);
                    let w2 = a.add(format!("{name}.w2"), [e, cfg.cross_rank], cfg.cross_rank);
                    let b = a.add(format!("{name}.b"), [1, cfg.cross_rank], 0);
                    cross.push(Cross { w1, w2, b });
                }
                concat_width += e;
            }
            let mut deep = Vec::new();
            let mut width = e;
            for (l, &out) in cfg.deep_layers.iter().enumerate() {
                deep.push(a.linear(&format!("{prefix}.deep{l}"), out, width, true));
                width = out;
            }
            concat_width += width;
            branches.push(Branch { cross, deep });
        }
        let proj = a.linear(&format!("expert{k}.proj"), cfg.expert_dim, concat_width, true);
        experts.push(Expert { branches, proj });
    }

    let gates = (0..tasks)
        .map(|t| a.linear(&format!("gate{t}"), cfg.experts, e, true))
        .collect();
    let towers = (0..tasks)
        .map(|t| {
            let mut width = cfg.expert_dim;
            let mut layers = Vec::new();
            for (l, &out) in cfg.tower_layers.iter().chain(std::iter::once(&1)).enumerate() {
                layers.push(a.linear(&format!("tower{t}.l{l}"), out, width, true));
                width = out;
            }
            layers
        })
        .collect();

    Layout {
        embed,
        bn_gamma,
        bn_beta,
        experts,
        gates,
        towers,
    }
}

/// Nodes produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// One `[n, 1]` logit node per task.
    pub logits: Vec<Var>,
    /// One `[n, K]` gate node per task.
    pub gates: Vec<Var>,
    /// Batch statistics of the embedding batch norm in training mode.
    pub batch_stats: Option<BatchStats>,
}

/// Batched cross layer: `xl + x0 ⊙ (relu(xl·W1ᵀ + b)·W2ᵀ)` with `W1: [r, d]`,
/// `W2: [d, r]`, `b: [1, r]`.
pub fn cross_layer_graph(g: &mut Graph, x0: Var, xl: Var, w1: Var, w2: Var, b: Var) -> Result<Var> {
    let h = g.matmul_t(xl, w1)?;
    let h = g.add_bias(h, b)?;
    let h = g.relu(h)?;
    let u = g.matmul_t(h, w2)?;
    let u = g.hadamard(x0, u)?;
    g.add(xl, u)
}

/// Single-vector cross layer. `w1` is `r×d`, `w2` is `d×r`, `b` has length r.
pub fn cross_layer(x0: &[f64], xl: &[f64], w1: &Tensor, w2: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let d = x0.len();
    let r = b.len();
    if xl.len() != d || w1.shape() != [r, d] || w2.shape() != [d, r] {
        return Err(Error::Shape {
            op: "cross_layer",
            lhs: vec![d, xl.len(), r],
            rhs: [w1.shape(), w2.shape()].concat(),
        });
    }
    let mut g = Graph::new();
    let x0 = g.leaf(Tensor::row(x0)?)?;
    let xl = g.leaf(Tensor::row(xl)?)?;
    let w1 = g.leaf(w1.clone())?;
    let w2 = g.leaf(w2.clone())?;
    let b = g.leaf(Tensor::row(b)?)?;
    let out = cross_layer_graph(&mut g, x0, xl, w1, w2, b)?;
    Ok(g.value(out).data().to_vec())
}

fn apply_linear(g: &mut Graph, vars: &[Var], l: &Linear, x: Var) -> Result<Var> {
    let y = g.matmul_t(x, vars[l.w.0])?;
    match l.b {
        Some(b) => g.add_bias(y, vars[b.0]),
        None => Ok(y),
    }
}

/// The trained model: parameters, batch-norm running estimates and one
/// temperature per task.
#[derive(Debug, Clone)]
pub struct CamoeModel {
    config: ModelConfig,
    grouping: TaskGrouping,
    params: ParamStore,
    layout: Layout,
    bn_mean: Vec<f64>,
    bn_var: Vec<f64>,
    temperatures: Vec<f64>,
}

impl CamoeModel {
    /// Gaussian init with std `1/sqrt(fan_in)`, zero biases. Deterministic
    /// per seed.
    pub fn build(grouping: TaskGrouping, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = allocate(&config, grouping.len(), &mut params, &mut |shape, fan_in| {
            if fan_in == 0 {
                return Tensor::zeros(&shape);
            }
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            let data = (0..shape[0] * shape[1]).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches data")
        });
        let e = config.embed_dim;
        let tasks = grouping.len();
        Ok(Self {
            config,
            grouping,
            params,
            layout,
            bn_mean: vec![0.0; e],
            bn_var: vec![1.0; e],
            temperatures: vec![1.0; tasks],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grouping(&self) -> &TaskGrouping {
        &self.grouping
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn num_tasks(&self) -> usize {
        self.grouping.len()
    }

    pub fn num_experts(&self) -> usize {
        self.config.experts
    }

    pub fn running_stats(&self) -> (&[f64], &[f64]) {
        (&self.bn_mean, &self.bn_var)
    }

    pub fn temperatures(&self) -> &[f64] {
        &self.temperatures
    }

    pub fn set_temperature(&mut self, task: usize, t: f64) -> Result<()> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(invalid(format!("temperature must be positive, got {t}")));
        }
        self.temperatures[task] = t;
        Ok(())
    }

    /// Exponential update of the batch-norm running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let m = self.config.bn_momentum;
        for (r, b) in self.bn_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.bn_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }

    /// Parameter ids of task `t`'s tower.
    pub fn tower_param_ids(&self, t: usize) -> Vec<ParamId> {
        self.layout.towers[t]
            .iter()
            .flat_map(|l| std::iter::once(l.w).chain(l.b))
            .collect()
    }

    /// Parameter ids of expert `k`.
    pub fn expert_param_ids(&self, k: usize) -> Vec<ParamId> {
        let prefix = format!("expert{k}.");
        (0..self.params.len())
            .map(ParamId)
            .filter(|&id| self.params.get(id).name.starts_with(&prefix))
            .collect()
    }

    fn expert_graph(&self, g: &mut Graph, vars: &[Var], k: usize, x0: Var) -> Result<Var> {
        let expert = &self.layout.experts[k];
        let mut parts = Vec::with_capacity(2 * expert.branches.len());
        for branch in &expert.branches {
            if !branch.cross.is_empty() {
                let mut xl = x0;
                for c in &branch.cross {
                    xl = cross_layer_graph(g, x0, xl, vars[c.w1.0], vars[c.w2.0], vars[c.b.0])?;
                }
                parts.push(xl);
            }
            let mut h = x0;
            for l in &branch.deep {
                h = apply_linear(g, vars, l, h)?;
                h = g.relu(h)?;
            }
            if !branch.deep.is_empty() {
                parts.push(h);
            }
        }
        let cat = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_cols(&parts)?
        };
        apply_linear(g, vars, &expert.proj, cat)
    }

    fn embed_graph(&self, g: &mut Graph, vars: &[Var], x: Var, mode: BnMode) -> Result<(Var, Option<BatchStats>)> {
        let h = apply_linear(g, vars, &self.layout.embed, x)?;
        g.batchnorm(
            h,
            vars[self.layout.bn_gamma.0],
            vars[self.layout.bn_beta.0],
            mode,
            (&self.bn_mean, &self.bn_var),
            self.config.bn_eps,
        )
    }

    /// Records the full forward pass on `g`. `vars` holds one node per
    /// parameter, indexed by `ParamId` (see [`Graph::bind`]).
    ///
    /// With `mask = None` every expert contributes unscaled; with a mask,
    /// dropped experts are not evaluated at all and kept ones are scaled
    /// by 1.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &[Var],
        x: Var,
        mode: BnMode,
        mask: Option<&ExpertMask>,
    ) -> Result<Forward> {
        let xt = g.value(x);
        if xt.shape().len() != 2 || xt.cols() != self.config.feature_dim {
            return Err(Error::Shape {
                op: "forward",
                lhs: xt.shape().to_vec(),
                rhs: vec![self.config.feature_dim],
            });
        }
        if let Some(m) = mask {
            if m.len() != self.config.experts {
                return Err(invalid(format!(
                    "expert mask has {} entries, model has {} experts",
                    m.len(),
                    self.config.experts
                )));
            }
        }

        let (emb, batch_stats) = self.embed_graph(g, vars, x, mode)?;
        let mut experts = Vec::with_capacity(self.config.experts);
        for k in 0..self.config.experts {
            let out = match mask {
                Some(m) if !m.keeps(k) => None,
                Some(_) => {
                    let e = self.expert_graph(g, vars, k, emb)?;
                    Some(g.scale(e, 1.0)?)
                }
                None => Some(self.expert_graph(g, vars, k, emb)?),
            };
            experts.push(out);
        }

        let mut logits = Vec::with_capacity(self.num_tasks());
        let mut gates = Vec::with_capacity(self.num_tasks());
        for t in 0..self.num_tasks() {
            let z = apply_linear(g, vars, &self.layout.gates[t], emb)?;
            let gate = g.softmax_rows(z)?;
            let mut mix: Option<Var> = None;
            for (k, e) in experts.iter().enumerate() {
                let Some(e) = *e else { continue };
                let w = g.column(gate, k)?;
                let term = g.row_scale(e, w)?;
                mix = Some(match mix {
                    Some(acc) => g.add(acc, term)?,
                    None => term,
                });
            }
            let mut h = mix.expect("mask keeps at least one expert");
            let tower = &self.layout.towers[t];
            for (i, l) in tower.iter().enumerate() {
                h = apply_linear(g, vars, l, h)?;
                if i + 1 < tower.len() {
                    h = g.relu(h)?;
                }
            }
            logits.push(h);
            gates.push(gate);
        }
        Ok(Forward {
            logits,
            gates,
            batch_stats,
        })
    }

    fn chunked<T: Send>(
        &self,
        x: &Tensor,
        f: impl Fn(&mut Graph, &Forward) -> Vec<T> + Sync,
        mask: Option<&ExpertMask>,
    ) -> Result<Vec<Vec<T>>> {
        if x.shape().len() != 2 || x.rows() == 0 {
            return Err(invalid("inference needs a non-empty [n, feature_dim] batch"));
        }
        let n = x.rows();
        let starts: Vec<usize> = (0..n).step_by(INFER_CHUNK).collect();
        let parts = par::map(&starts, |&s| -> Result<Vec<T>> {
            let idx: Vec<usize> = (s..(s + INFER_CHUNK).min(n)).collect();
            let mut g = Graph::new();
            let vars = g.bind(&self.params)?;
            let xv = g.leaf(x.select_rows(&idx))?;
            let fw = self.forward_graph(&mut g, &vars, xv, BnMode::Infer, mask)?;
            Ok(f(&mut g, &fw))
        });
        let mut out = Vec::with_capacity(starts.len());
        for p in parts {
            out.push(p?);
        }
        Ok(out)
    }

    /// Raw tower logits per task, each of length `x.rows()`.
    pub fn logits(&self, x: &Tensor, mask: Option<&ExpertMask>) -> Result<Vec<Vec<f64>>> {
        let tasks = self.num_tasks();
        let chunks = self.chunked(
            x,
            |g, fw| {
                fw.logits
                    .iter()
                    .map(|&l| g.value(l).data().to_vec())
                    .collect::<Vec<_>>()
            },
            mask,
        )?;
        let mut out = vec![Vec::with_capacity(x.rows()); tasks];
        for chunk in chunks {
            for (t, v) in chunk.into_iter().enumerate() {
                out[t].extend(v);
            }
        }
        Ok(out)
    }

    /// Temperature-scaled click probabilities per task, strictly inside (0, 1).
    pub fn predict(&self, x: &Tensor, mask: Option<&ExpertMask>) -> Result<Vec<Vec<f64>>> {
        let mut out = self.logits(x, mask)?;
        for (t, row) in out.iter_mut().enumerate() {
            let temp = self.temperatures[t];
            for z in row.iter_mut() {
                *z = sigmoid(*z / temp).clamp(1e-12, 1.0 - 1e-12);
            }
        }
        Ok(out)
    }

    /// Per-task gate weights, each `[n, K]`.
    pub fn gate_weights(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let chunks = self.chunked(x, |g, fw| fw.gates.iter().map(|&v| g.value(v).clone()).collect(), None)?;
        let k = self.config.experts;
        let mut data = vec![Vec::new(); self.num_tasks()];
        for chunk in chunks {
            for (t, v) in chunk.into_iter().enumerate() {
                data[t].extend_from_slice(v.data());
            }
        }
        data.into_iter().map(|d| Tensor::matrix(x.rows(), k, d)).collect()
    }

    /// Output of expert `k` for a batch already in embedding space.
    pub fn expert_forward(&self, k: usize, x0: &Tensor) -> Result<Tensor> {
        if k >= self.config.experts {
            return Err(invalid(format!("expert {k} does not exist")));
        }
        if x0.shape().len() != 2 || x0.cols() != self.config.embed_dim {
            return Err(Error::Shape {
                op: "expert_forward",
                lhs: x0.shape().to_vec(),
                rhs: vec![self.config.embed_dim],
            });
        }
        let mut g = Graph::new();
        let vars = g.bind(&self.params)?;
        let x = g.leaf(x0.clone())?;
        let out = self.expert_graph(&mut g, &vars, k, x)?;
        Ok(g.value(out).clone())
    }

    /// Each impression's logit from the task its slot belongs to.
    pub fn routed_logits(&self, d: &Dataset, mask: Option<&ExpertMask>) -> Result<Vec<f64>> {
        let idx: Vec<usize> = (0..d.len()).collect();
        let all = self.logits(&d.features(&idx)?, mask)?;
        Ok(d.impressions()
            .iter()
            .enumerate()
            .map(|(i, imp)| all[self.grouping.task_of(imp.slot)][i])
            .collect())
    }

    /// Each impression's calibrated probability from its own task.
    pub fn routed_probs(&self, d: &Dataset, mask: Option<&ExpertMask>) -> Result<Vec<f64>> {
        let logits = self.routed_logits(d, mask)?;
        Ok(self.probs_from_routed(d, &logits))
    }

    /// Applies each impression's task temperature to output of [`Self::routed_logits`].
    pub fn probs_from_routed(&self, d: &Dataset, logits: &[f64]) -> Vec<f64> {
        d.impressions()
            .iter()
            .zip(logits)
            .map(|(imp, &z)| {
                let t = self.temperatures[self.grouping.task_of(imp.slot)];
                sigmoid(z / t).clamp(1e-12, 1.0 - 1e-12)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
