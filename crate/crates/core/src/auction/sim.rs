use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{compute_bid, run_pod_auction, serve, Bid, CampaignId, PodChoice};
use crate::datagen::{AdSlot, Content, CtrWorld, Dataset, Focus, GeneratorConfig, Modality};
use crate::error::{invalid, Error, Result};
use crate::model::CamoeModel;
use crate::tensorcore::Tensor;

/// Trailing CTR floor; keeps the bid formula finite.
const MIN_TRAILING_CTR: f64 = 1e-6;

/// One (slot, focus, features) triple to be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub slot: AdSlot,
    pub focus: Focus,
    pub features: Vec<f64>,
}

/// Predicted CTR source for one simulation arm.
pub trait Scorer {
    fn score(&self, rows: &[ScoreRow]) -> Result<Vec<f64>>;
}

/// Scores with the generator's own click probability.
#[derive(Debug, Clone)]
pub struct OracleScorer(pub CtrWorld);

impl Scorer for OracleScorer {
    fn score(&self, rows: &[ScoreRow]) -> Result<Vec<f64>> {
        Ok(rows
            .iter()
            .map(|r| self.0.true_ctr(r.slot, r.focus, &r.features))
            .collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score(&self, rows: &[ScoreRow]) -> Result<Vec<f64>> {
        Ok(vec![self.0; rows.len()])
    }
}

/// Feature-blind scorer: the observed click rate of each (slot, focus) cell,
/// falling back to the overall rate for cells absent from the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseRateScorer {
    rates: BTreeMap<(AdSlot, Focus), f64>,
    overall: f64,
}

impl BaseRateScorer {
    pub fn from_dataset(d: &Dataset) -> Result<Self> {
        if d.is_empty() {
            return Err(invalid("base-rate scorer needs a non-empty sample"));
        }
        let mut acc: BTreeMap<(AdSlot, Focus), (u64, u64)> = BTreeMap::new();
        for imp in d.impressions() {
            let e = acc.entry((imp.slot, imp.focus)).or_default();
            e.0 += u64::from(imp.label);
            e.1 += 1;
        }
        let clicks: u64 = acc.values().map(|v| v.0).sum();
        Ok(Self {
            overall: clicks as f64 / d.len() as f64,
            rates: acc.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect(),
        })
    }

    pub fn rate(&self, slot: AdSlot, focus: Focus) -> f64 {
        self.rates.get(&(slot, focus)).copied().unwrap_or(self.overall)
    }
}

impl Scorer for BaseRateScorer {
    fn score(&self, rows: &[ScoreRow]) -> Result<Vec<f64>> {
        Ok(rows.iter().map(|r| self.rate(r.slot, r.focus)).collect())
    }
}

/// Calibrated probability from the head owning each row's slot.
#[derive(Debug, Clone, Copy)]
pub struct ModelScorer<'a>(pub &'a CamoeModel);

impl Scorer for ModelScorer<'_> {
    fn score(&self, rows: &[ScoreRow]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let data = rows.iter().flat_map(|r| r.features.iter().copied()).collect();
        let x = Tensor::matrix(rows.len(), rows[0].features.len(), data)?;
        let probs = self.0.predict(&x, None)?;
        Ok(rows
            .iter()
            .enumerate()
            .map(|(i, r)| probs[self.0.grouping().task_of(r.slot)][i])
            .collect())
    }
}

/// How the campaign pool is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub per_modality: usize,
    pub min_max_bid: u64,
    pub max_max_bid: u64,
    /// Pacing multipliers are uniform on `[0, max_pacing]`.
    pub max_pacing: f64,
    pub budget: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            per_modality: 8,
            min_max_bid: 500_000,
            max_max_bid: 2_000_000,
            max_pacing: 1.0,
            budget: 1_000_000_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub steps: usize,
    pub seed: u64,
    pub reserve_price: u64,
    pub pod_size: usize,
    /// Trailing CTR half-life, in steps.
    pub half_life_steps: f64,
    /// Pseudo-impressions behind the initial trailing CTR.
    pub prior_impressions: f64,
    pub campaigns: CampaignConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            seed: 0,
            reserve_price: 1,
            pod_size: 1,
            half_life_steps: 10_000.0,
            prior_impressions: 100.0,
            campaigns: CampaignConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.campaigns;
        if self.pod_size == 0 || c.per_modality == 0 {
            return Err(Error::Config(
                "pod_size and campaigns.per_modality must be at least 1".into(),
            ));
        }
        if c.min_max_bid == 0 || c.min_max_bid > c.max_max_bid {
            return Err(Error::Config(
                "need 0 < campaigns.min_max_bid <= campaigns.max_max_bid".into(),
            ));
        }
        if !(c.max_pacing >= 0.0) || !(self.half_life_steps > 0.0) || !(self.prior_impressions > 0.0) {
            return Err(Error::Config(
                "max_pacing must be >= 0, half_life_steps and prior_impressions positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub id: CampaignId,
    pub modality: Modality,
    pub ad: Vec<f64>,
    pub max_bid: u64,
    pub pacing: f64,
    pub budget: u64,
    /// Starting trailing CTR.
    pub prior_ctr: f64,
}

/// Per-arm mutable state of one campaign.
#[derive(Debug, Clone)]
struct CampaignState {
    budget_left: u64,
    clicks: f64,
    impressions: f64,
    last_step: usize,
}

impl CampaignState {
    fn trailing_ctr(&self) -> f64 {
        (self.clicks / self.impressions).max(MIN_TRAILING_CTR)
    }

    /// Exponentially decayed counts; decay is applied lazily on update, and
    /// scales both counts alike, so the ratio is unaffected between updates.
    fn record(&mut self, step: usize, click: bool, half_life: f64) {
        let decay = 0.5f64.powf((step - self.last_step) as f64 / half_life);
        self.clicks = self.clicks * decay + f64::from(u8::from(click));
        self.impressions = self.impressions * decay + 1.0;
        self.last_step = step;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    pub impressions: u64,
    pub clicks: u64,
    pub spend: u64,
    pub no_fill: u64,
    /// Sum of the true click probabilities of served impressions.
    pub expected_clicks: f64,
    pub ctr: Option<f64>,
    /// Spend per click; absent without clicks.
    pub ecpc: Option<f64>,
    /// Inventory-weighted mean true CTR of served impressions.
    pub mean_true_ctr: Option<f64>,
}

impl ModalityStats {
    fn finish(&mut self) {
        let imps = self.impressions as f64;
        self.ctr = (self.impressions > 0).then(|| self.clicks as f64 / imps);
        self.mean_true_ctr = (self.impressions > 0).then(|| self.expected_clicks / imps);
        self.ecpc = (self.clicks > 0).then(|| self.spend as f64 / self.clicks as f64);
    }

    fn absorb(&mut self, other: &ModalityStats) {
        self.impressions += other.impressions;
        self.clicks += other.clicks;
        self.spend += other.spend;
        self.no_fill += other.no_fill;
        self.expected_clicks += other.expected_clicks;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub arm: String,
    pub steps: usize,
    pub by_modality: BTreeMap<Modality, ModalityStats>,
    pub total: ModalityStats,
}

/// One JSONL event-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub step: usize,
    pub arm: String,
    pub focus: Focus,
    pub slot: AdSlot,
    pub winner: Option<CampaignId>,
    pub bid: Option<u64>,
    pub price: Option<u64>,
    pub click: Option<bool>,
}

struct Request {
    focus: Focus,
    content: Content,
    user: Vec<f64>,
    /// Click uniforms shared by every arm, one per pod position.
    uniforms: Vec<f64>,
}

/// A traffic stream and campaign pool that several arms are run against.
#[derive(Debug, Clone)]
pub struct Simulation {
    world: CtrWorld,
    traffic: GeneratorConfig,
    config: SimConfig,
    campaigns: Vec<Campaign>,
    music_share: f64,
}

impl Simulation {
    pub fn new(traffic: &GeneratorConfig, config: SimConfig) -> Result<Self> {
        config.validate()?;
        let world = traffic.world()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2);
        let c = &config.campaigns;
        let mut campaigns = Vec::with_capacity(2 * c.per_modality);
        for modality in [Modality::Audio, Modality::Video] {
            let prior_ctr = traffic.base_ctr.get(AdSlot::primary(modality, Content::Music));
            for _ in 0..c.per_modality {
                campaigns.push(Campaign {
                    id: campaigns.len() as CampaignId,
                    modality,
                    ad: (0..world.ad_dim()).map(|_| StandardNormal.sample(&mut rng)).collect(),
                    max_bid: rng.gen_range(c.min_max_bid..=c.max_max_bid),
                    pacing: rng.gen_range(0.0..=c.max_pacing),
                    budget: c.budget,
                    prior_ctr,
                });
            }
        }
        let mix = &traffic.slot_mix;
        let music = mix.stream_audio + mix.stream_video + mix.embedded_music;
        let podcast = mix.podcast + mix.podcast_video;
        let music_share = if music + podcast > 0.0 {
            music / (music + podcast)
        } else {
            1.0
        };
        Ok(Self {
            world,
            traffic: traffic.clone(),
            config,
            campaigns,
            music_share,
        })
    }

    pub fn world(&self) -> &CtrWorld {
        &self.world
    }

    pub fn campaigns(&self) -> &[Campaign] {
        &self.campaigns
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    fn fresh_state(&self) -> Vec<CampaignState> {
        self.campaigns
            .iter()
            .map(|c| CampaignState {
                budget_left: c.budget,
                clicks: self.config.prior_impressions * c.prior_ctr,
                impressions: self.config.prior_impressions,
                last_step: 0,
            })
            .collect()
    }

    fn draw_request(&self, rng: &mut ChaCha8Rng) -> Request {
        let focus = if rng.gen_bool(self.traffic.out_of_focus_fraction) {
            Focus::Out
        } else {
            Focus::In
        };
        let content = if rng.gen_bool(self.music_share) {
            Content::Music
        } else {
            Content::Podcast
        };
        let user = (0..self.world.user_dim()).map(|_| StandardNormal.sample(rng)).collect();
        let uniforms = (0..self.config.pod_size).map(|_| rng.gen()).collect();
        Request {
            focus,
            content,
            user,
            uniforms,
        }
    }

    /// Runs every arm against the same request stream. Each arm keeps its own
    /// budgets and trailing CTRs; arms are stepped in the given order but
    /// never read each other's state, so reports do not depend on that order.
    pub fn run(&self, arms: &[(&str, &dyn Scorer)], mut log: Option<&mut dyn Write>) -> Result<Vec<SimReport>> {
        if arms.is_empty() {
            return Err(invalid("simulate: need at least one arm"));
        }
        let mut traffic = ChaCha8Rng::seed_from_u64(self.config.seed);
        traffic.set_stream(1);
        let mut states: Vec<Vec<CampaignState>> = arms.iter().map(|_| self.fresh_state()).collect();
        let mut stats: Vec<BTreeMap<Modality, ModalityStats>> = arms
            .iter()
            .map(|_| {
                [Modality::Audio, Modality::Video]
                    .into_iter()
                    .map(|m| (m, ModalityStats::default()))
                    .collect()
            })
            .collect();

        for step in 0..self.config.steps {
            let req = self.draw_request(&mut traffic);
            for (a, (name, scorer)) in arms.iter().enumerate() {
                let events = self.step(step, &req, name, *scorer, &mut states[a], &mut stats[a])?;
                if let Some(w) = log.as_deref_mut() {
                    for e in events {
                        serde_json::to_writer(&mut *w, &e)?;
                        w.write_all(b"\n")?;
                    }
                }
            }
        }

        Ok(arms
            .iter()
            .zip(stats)
            .map(|((name, _), mut by_modality)| {
                let mut total = ModalityStats::default();
                for s in by_modality.values_mut() {
                    s.finish();
                    total.absorb(s);
                }
                total.finish();
                SimReport {
                    arm: (*name).to_owned(),
                    steps: self.config.steps,
                    by_modality,
                    total,
                }
            })
            .collect())
    }

    fn step(
        &self,
        step: usize,
        req: &Request,
        arm: &str,
        scorer: &dyn Scorer,
        state: &mut [CampaignState],
        stats: &mut BTreeMap<Modality, ModalityStats>,
    ) -> Result<Vec<SimEvent>> {
        let eligible: Vec<&Campaign> = self
            .campaigns
            .iter()
            .filter(|c| state[c.id as usize].budget_left > 0)
            .collect();
        let rows: Vec<ScoreRow> = eligible
            .iter()
            .map(|c| ScoreRow {
                slot: AdSlot::primary(c.modality, req.content),
                focus: req.focus,
                features: self.world.compose(&req.user, &c.ad, req.focus),
            })
            .collect();
        let scores = scorer.score(&rows)?;
        if scores.len() != rows.len() || scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteScore {
                arm: arm.to_owned(),
                step,
            });
        }

        let mut pods = [None, None];
        for (m, modality) in [Modality::Audio, Modality::Video].into_iter().enumerate() {
            let bids = eligible
                .iter()
                .zip(&scores)
                .filter(|(c, _)| c.modality == modality)
                .map(|(c, &s)| {
                    let amount = compute_bid(c.max_bid, c.pacing, s, state[c.id as usize].trailing_ctr())
                        .map_err(|e| invalid(format!("arm `{arm}` step {step}: {e}")))?;
                    Ok(Bid { campaign: c.id, amount })
                })
                .collect::<Result<Vec<_>>>()?;
            if !bids.is_empty() {
                pods[m] = Some(run_pod_auction(&bids, self.config.reserve_price, self.config.pod_size)?);
            }
        }

        let mut events = Vec::new();
        match serve(req.focus, pods[0].as_ref(), pods[1].as_ref()) {
            PodChoice::NoFill { modality } => {
                stats.get_mut(&modality).expect("both modalities").no_fill += 1;
                events.push(SimEvent {
                    step,
                    arm: arm.to_owned(),
                    focus: req.focus,
                    slot: AdSlot::primary(modality, req.content),
                    winner: None,
                    bid: None,
                    price: None,
                    click: None,
                });
            }
            PodChoice::Served { modality, outcome } => {
                let slot = AdSlot::primary(modality, req.content);
                let s = stats.get_mut(&modality).expect("both modalities");
                for (place, &u) in outcome.placements.iter().zip(&req.uniforms) {
                    let c = &self.campaigns[place.campaign as usize];
                    let ctr = self
                        .world
                        .true_ctr(slot, req.focus, &self.world.compose(&req.user, &c.ad, req.focus));
                    let click = u < ctr;
                    let st = &mut state[c.id as usize];
                    s.impressions += 1;
                    s.expected_clicks += ctr;
                    if click {
                        let charged = place.price.min(st.budget_left);
                        st.budget_left -= charged;
                        s.clicks += 1;
                        s.spend += charged;
                    }
                    st.record(step, click, self.config.half_life_steps);
                    events.push(SimEvent {
                        step,
                        arm: arm.to_owned(),
                        focus: req.focus,
                        slot,
                        winner: Some(c.id),
                        bid: Some(place.bid),
                        price: Some(place.price),
                        click: Some(click),
                    });
                }
            }
        }
        Ok(events)
    }
}
