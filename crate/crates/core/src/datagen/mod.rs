//! Synthetic multi-modal impressions, splitting and imbalance handling.
//!
//! The generator reproduces an audio-dominated inventory: seven ad slots
//! with a heavily skewed mix, video slots clicking roughly ten times more
//! often than audio slots, and an in-focus CTR about ten times the
//! out-of-focus CTR. Slot identity is deliberately *not* part of the feature
//! vector; a model only learns about modality through how tasks are grouped.

mod io;
mod world;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensorcore::Tensor;

pub use io::{load_csv, save_csv};
pub use world::CtrWorld;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdSlot {
    StreamAudio,
    Podcast,
    StreamVideo,
    EmbeddedMusic,
    PodcastVideo,
    StreamAudioLeavebehind,
    PodcastLeavebehind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Audio,
    Video,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Content {
    Music,
    Podcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Focus {
    In,
    Out,
}

impl AdSlot {
    pub const ALL: [AdSlot; 7] = [
        AdSlot::StreamAudio,
        AdSlot::Podcast,
        AdSlot::StreamVideo,
        AdSlot::EmbeddedMusic,
        AdSlot::PodcastVideo,
        AdSlot::StreamAudioLeavebehind,
        AdSlot::PodcastLeavebehind,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Leavebehind display cards fold into the audio modality.
    pub fn modality(self) -> Modality {
        match self {
            AdSlot::StreamVideo | AdSlot::EmbeddedMusic | AdSlot::PodcastVideo => Modality::Video,
            _ => Modality::Audio,
        }
    }

    pub fn content(self) -> Content {
        match self {
            AdSlot::StreamAudio | AdSlot::StreamVideo | AdSlot::EmbeddedMusic | AdSlot::StreamAudioLeavebehind => {
                Content::Music
            }
            AdSlot::Podcast | AdSlot::PodcastVideo | AdSlot::PodcastLeavebehind => Content::Podcast,
        }
    }

    pub fn is_leavebehind(self) -> bool {
        matches!(self, AdSlot::StreamAudioLeavebehind | AdSlot::PodcastLeavebehind)
    }

    pub fn name(self) -> &'static str {
        match self {
            AdSlot::StreamAudio => "StreamAudio",
            AdSlot::Podcast => "Podcast",
            AdSlot::StreamVideo => "StreamVideo",
            AdSlot::EmbeddedMusic => "EmbeddedMusic",
            AdSlot::PodcastVideo => "PodcastVideo",
            AdSlot::StreamAudioLeavebehind => "StreamAudioLeavebehind",
            AdSlot::PodcastLeavebehind => "PodcastLeavebehind",
        }
    }

    /// The slot an ad of `modality` fills next to `content` when not a
    /// leavebehind.
    pub fn primary(modality: Modality, content: Content) -> AdSlot {
        match (modality, content) {
            (Modality::Audio, Content::Music) => AdSlot::StreamAudio,
            (Modality::Audio, Content::Podcast) => AdSlot::Podcast,
            (Modality::Video, Content::Music) => AdSlot::StreamVideo,
            (Modality::Video, Content::Podcast) => AdSlot::PodcastVideo,
        }
    }
}

impl fmt::Display for AdSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdSlot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdSlot::ALL
            .into_iter()
            .find(|slot| slot.name() == s)
            .ok_or_else(|| invalid(format!("unknown ad slot `{s}`")))
    }
}

impl Focus {
    pub fn indicator(self) -> f64 {
        match self {
            Focus::In => 1.0,
            Focus::Out => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Focus::In => "in",
            Focus::Out => "out",
        }
    }
}

impl FromStr for Focus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" => Ok(Focus::In),
            "out" => Ok(Focus::Out),
            _ => Err(invalid(format!("focus must be `in` or `out`, got `{s}`"))),
        }
    }
}

/// One real value per slot, keyed by slot name in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase", deny_unknown_fields)]
pub struct PerSlot {
    pub stream_audio: f64,
    pub podcast: f64,
    pub stream_video: f64,
    pub embedded_music: f64,
    pub podcast_video: f64,
    pub stream_audio_leavebehind: f64,
    pub podcast_leavebehind: f64,
}

impl PerSlot {
    pub fn get(&self, slot: AdSlot) -> f64 {
        self.as_array()[slot.index()]
    }

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.stream_audio,
            self.podcast,
            self.stream_video,
            self.embedded_music,
            self.podcast_video,
            self.stream_audio_leavebehind,
            self.podcast_leavebehind,
        ]
    }

    pub fn from_fn(f: impl Fn(AdSlot) -> f64) -> Self {
        Self {
            stream_audio: f(AdSlot::StreamAudio),
            podcast: f(AdSlot::Podcast),
            stream_video: f(AdSlot::StreamVideo),
            embedded_music: f(AdSlot::EmbeddedMusic),
            podcast_video: f(AdSlot::PodcastVideo),
            stream_audio_leavebehind: f(AdSlot::StreamAudioLeavebehind),
            podcast_leavebehind: f(AdSlot::PodcastLeavebehind),
        }
    }
}

/// Knobs of the synthetic generator.
///
/// `base_ctr` is each slot's marginal CTR across focus states; the generator
/// splits it into out-of-focus and in-focus levels whose ratio is
/// `focus_ctr_multiplier`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n: usize,
    pub slot_mix: PerSlot,
    pub base_ctr: PerSlot,
    pub focus_ctr_multiplier: f64,
    pub out_of_focus_fraction: f64,
    pub feature_dim: usize,
    pub signal_strength: f64,
    /// Weight of the user×ad interaction term relative to the linear term.
    pub cross_strength: f64,
    /// Correlation between the audio and video weight vectors.
    pub modality_correlation: f64,
    /// Leavebehind cards are on-screen, so they are always in focus.
    pub leavebehind_in_focus: bool,
    pub seed: u64,
    /// Seeds the click model itself; fixed across sampling seeds.
    pub world_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n: 100_000,
            slot_mix: PerSlot {
                stream_audio: 0.70,
                podcast: 0.10,
                stream_video: 0.08,
                embedded_music: 0.04,
                podcast_video: 0.02,
                stream_audio_leavebehind: 0.04,
                podcast_leavebehind: 0.02,
            },
            // audio 0.0074 marginal is 0.002 out of focus at the default split
            base_ctr: PerSlot {
                stream_audio: 0.0074,
                podcast: 0.0074,
                stream_video: 0.074,
                embedded_music: 0.074,
                podcast_video: 0.074,
                stream_audio_leavebehind: 0.02,
                podcast_leavebehind: 0.02,
            },
            focus_ctr_multiplier: 10.0,
            out_of_focus_fraction: 0.7,
            feature_dim: 16,
            signal_strength: 1.0,
            cross_strength: 1.0,
            modality_correlation: 0.3,
            leavebehind_in_focus: true,
            seed: 0,
            world_seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let mix = self.slot_mix.as_array();
        let total: f64 = mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("slot_mix sums to {total}, expected 1")));
        }
        if mix.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Config("slot_mix entries must be non-negative".into()));
        }
        if self.base_ctr.as_array().iter().any(|c| !(*c > 0.0 && *c < 1.0)) {
            return Err(Error::Config("base_ctr entries must lie in (0, 1)".into()));
        }
        if !(self.focus_ctr_multiplier > 0.0) {
            return Err(Error::Config("focus_ctr_multiplier must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.out_of_focus_fraction) {
            return Err(Error::Config("out_of_focus_fraction must lie in [0, 1]".into()));
        }
        if self.feature_dim < 3 {
            return Err(Error::Config("feature_dim must be at least 3".into()));
        }
        if !(self.signal_strength >= 0.0) || !(self.cross_strength >= 0.0) {
            return Err(Error::Config("signal and cross strengths must be non-negative".into()));
        }
        if !(-1.0..=1.0).contains(&self.modality_correlation) {
            return Err(Error::Config("modality_correlation must lie in [-1, 1]".into()));
        }
        Ok(())
    }

    pub fn world(&self) -> Result<CtrWorld> {
        self.validate()?;
        Ok(CtrWorld::new(self))
    }
}

/// One ad-serving event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub features: Vec<f64>,
    pub slot: AdSlot,
    pub focus: Focus,
    pub label: u8,
    /// Generator-side click probability; never shown to a model.
    pub true_ctr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Generated(Box<GeneratorConfig>),
    File(PathBuf),
    Derived(String),
}

/// Immutable collection of impressions sharing a feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    impressions: Vec<Impression>,
    feature_dim: usize,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(impressions: Vec<Impression>, feature_dim: usize, provenance: Provenance) -> Result<Self> {
        if let Some(bad) = impressions.iter().position(|i| i.features.len() != feature_dim) {
            return Err(invalid(format!(
                "impression {bad} has {} features, dataset width is {feature_dim}",
                impressions[bad].features.len()
            )));
        }
        Ok(Self {
            impressions,
            feature_dim,
            provenance,
        })
    }

    pub fn impressions(&self) -> &[Impression] {
        &self.impressions
    }

    pub fn len(&self) -> usize {
        self.impressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.impressions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn labels(&self) -> Vec<f64> {
        self.impressions.iter().map(|i| i.label as f64).collect()
    }

    pub fn slots(&self) -> Vec<AdSlot> {
        self.impressions.iter().map(|i| i.slot).collect()
    }

    /// Feature rows for the given indices as a `[len, feature_dim]` tensor.
    pub fn features(&self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.feature_dim);
        for &i in idx {
            data.extend_from_slice(&self.impressions[i].features);
        }
        Tensor::matrix(idx.len(), self.feature_dim, data)
    }

    pub fn count_by_slot(&self) -> BTreeMap<AdSlot, usize> {
        let mut out = BTreeMap::new();
        for imp in &self.impressions {
            *out.entry(imp.slot).or_insert(0) += 1;
        }
        out
    }

    pub fn count_modality(&self, m: Modality) -> usize {
        self.impressions.iter().filter(|i| i.slot.modality() == m).count()
    }

    pub(crate) fn subset(&self, keep: &[usize], note: &str) -> Dataset {
        Dataset {
            impressions: keep.iter().map(|&i| self.impressions[i].clone()).collect(),
            feature_dim: self.feature_dim,
            provenance: Provenance::Derived(note.to_string()),
        }
    }
}

/// Draws `config.n` impressions. Deterministic for a fixed `seed`.
pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    let world = config.world()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let slot_dist =
        WeightedIndex::new(config.slot_mix.as_array()).map_err(|e| Error::Config(format!("slot_mix: {e}")))?;
    let cont = config.feature_dim - 1;
    let mut impressions = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let slot = AdSlot::ALL[slot_dist.sample(&mut rng)];
        let focus = if slot.is_leavebehind() && config.leavebehind_in_focus {
            Focus::In
        } else if rng.gen_bool(config.out_of_focus_fraction) {
            Focus::Out
        } else {
            Focus::In
        };
        let mut features: Vec<f64> = (0..cont).map(|_| StandardNormal.sample(&mut rng)).collect();
        features.push(focus.indicator());
        let true_ctr = world.true_ctr(slot, focus, &features);
        let label = u8::from(rng.gen_bool(true_ctr));
        impressions.push(Impression {
            features,
            slot,
            focus,
            label,
            true_ctr,
        });
    }
    Ok(Dataset {
        impressions,
        feature_dim: config.feature_dim,
        provenance: Provenance::Generated(Box::new(config.clone())),
    })
}

/// Uniformly drops audio impressions until `audio / video <= target_ratio`.
/// Video impressions and the relative order of survivors are untouched.
pub fn downsample_majority(d: &Dataset, target_ratio: f64, seed: u64) -> Result<Dataset> {
    if !(target_ratio > 0.0) {
        return Err(invalid("downsample_majority: target_ratio must be positive"));
    }
    let video = d.count_modality(Modality::Video);
    if video == 0 {
        return Err(invalid("downsample_majority: dataset has no video impressions"));
    }
    let audio_idx: Vec<usize> = (0..d.len())
        .filter(|&i| d.impressions[i].slot.modality() == Modality::Audio)
        .collect();
    let allowed = (target_ratio * video as f64).floor();
    if target_ratio.is_infinite() || audio_idx.len() as f64 <= allowed {
        return Ok(d.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep_audio = rand::seq::index::sample(&mut rng, audio_idx.len(), allowed as usize);
    let mut keep = vec![false; d.len()];
    for k in keep_audio.iter() {
        keep[audio_idx[k]] = true;
    }
    for (i, imp) in d.impressions.iter().enumerate() {
        if imp.slot.modality() == Modality::Video {
            keep[i] = true;
        }
    }
    let idx: Vec<usize> = (0..d.len()).filter(|&i| keep[i]).collect();
    Ok(d.subset(&idx, &format!("downsample_majority(ratio={target_ratio}, seed={seed})")))
}

/// Stratified split by slot. Returns `(train, rest)`; both keep the input
/// order.
pub fn split(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid("split: train_fraction must lie strictly between 0 and 1"));
    }
    let mut by_slot: BTreeMap<AdSlot, Vec<usize>> = BTreeMap::new();
    for (i, imp) in d.impressions.iter().enumerate() {
        by_slot.entry(imp.slot).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; d.len()];
    for (slot, mut idx) in by_slot {
        if idx.len() < 2 {
            return Err(invalid(format!(
                "split: slot {slot} has {} impression(s), need at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let take = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..take] {
            in_train[i] = true;
        }
    }
    let train: Vec<usize> = (0..d.len()).filter(|&i| in_train[i]).collect();
    let rest: Vec<usize> = (0..d.len()).filter(|&i| !in_train[i]).collect();
    let note = format!("split(fraction={train_fraction}, seed={seed})");
    Ok((d.subset(&train, &note), d.subset(&rest, &note)))
}

#[cfg(test)]
mod tests;
