use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AdSlot, Focus, GeneratorConfig, Modality};
use crate::tensorcore::sigmoid;

/// Draws used to estimate expected CTR when placing slot offsets.
const OFFSET_SAMPLES: usize = 20_000;
/// Upper clamp on any cell's target CTR.
const MAX_CTR: f64 = 0.95;

/// Ground-truth click model behind generated impressions.
///
/// Features are laid out as `[user.., ad.., focus]`: the continuous block is
/// split into a user half and an ad half and the last entry is a 0/1 focus
/// indicator. Each modality has its own linear weights and its own user×ad
/// interaction matrix; the two modalities' weights are correlated by
/// `modality_correlation`.
#[derive(Debug, Clone)]
pub struct CtrWorld {
    feature_dim: usize,
    user_dim: usize,
    ad_dim: usize,
    signal_strength: f64,
    cross_strength: f64,
    linear: [Vec<f64>; 2],
    cross: [Vec<f64>; 2],
    offset_out: [f64; 7],
    offset_in: [f64; 7],
}

fn modality_index(m: Modality) -> usize {
    match m {
        Modality::Audio => 0,
        Modality::Video => 1,
    }
}

fn correlated_pair(rng: &mut ChaCha8Rng, len: usize, rho: f64, scale: f64) -> [Vec<f64>; 2] {
    let base: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    let other: Vec<f64> = base
        .iter()
        .map(|b| {
            let fresh: f64 = StandardNormal.sample(rng);
            rho * b + (1.0 - rho * rho).sqrt() * fresh
        })
        .collect();
    [
        base.iter().map(|v| v * scale).collect(),
        other.iter().map(|v| v * scale).collect(),
    ]
}

/// Solves `mean(sigmoid(a + s)) = target` for `a` by bisection.
fn solve_offset(signals: &[f64], target: f64) -> f64 {
    let mean_ctr = |a: f64| signals.iter().map(|s| sigmoid(a + s)).sum::<f64>() / signals.len() as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_ctr(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl CtrWorld {
    /// Builds the world for a validated config. Depends only on
    /// `world_seed` and the CTR/shape knobs, never on the sampling seed.
    pub fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        let cont = cfg.feature_dim - 1;
        let user_dim = cont.div_ceil(2);
        let ad_dim = cont - user_dim;
        let rho = cfg.modality_correlation;
        let linear = correlated_pair(&mut rng, cont, rho, 1.0 / (cont as f64).sqrt());
        let cross = correlated_pair(
            &mut rng,
            user_dim * ad_dim,
            rho,
            1.0 / ((user_dim * ad_dim).max(1) as f64).sqrt(),
        );
        let mut world = Self {
            feature_dim: cfg.feature_dim,
            user_dim,
            ad_dim,
            signal_strength: cfg.signal_strength,
            cross_strength: cfg.cross_strength,
            linear,
            cross,
            offset_out: [0.0; 7],
            offset_in: [0.0; 7],
        };

        let mut draws = [Vec::with_capacity(OFFSET_SAMPLES), Vec::with_capacity(OFFSET_SAMPLES)];
        let mut x = vec![0.0; cfg.feature_dim];
        for _ in 0..OFFSET_SAMPLES {
            for v in x.iter_mut().take(cont) {
                *v = StandardNormal.sample(&mut rng);
            }
            for m in [Modality::Audio, Modality::Video] {
                draws[modality_index(m)].push(world.signal(m, &x));
            }
        }

        let f = cfg.out_of_focus_fraction;
        let mult = cfg.focus_ctr_multiplier;
        for slot in AdSlot::ALL {
            let base = cfg.base_ctr.get(slot);
            let (c_out, c_in) = if slot.is_leavebehind() && cfg.leavebehind_in_focus {
                (base / mult, base)
            } else {
                let c_out = base / (f + (1.0 - f) * mult);
                (c_out, c_out * mult)
            };
            let s = &draws[modality_index(slot.modality())];
            world.offset_out[slot.index()] = solve_offset(s, c_out.min(MAX_CTR));
            world.offset_in[slot.index()] = solve_offset(s, c_in.min(MAX_CTR));
        }
        world
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn user_dim(&self) -> usize {
        self.user_dim
    }

    pub fn ad_dim(&self) -> usize {
        self.ad_dim
    }

    /// Assembles a feature vector from its user part, ad part and focus.
    pub fn compose(&self, user: &[f64], ad: &[f64], focus: Focus) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.feature_dim);
        x.extend_from_slice(user);
        x.extend_from_slice(ad);
        x.push(focus.indicator());
        x
    }

    /// Feature-driven part of the logit for one modality.
    pub fn signal(&self, modality: Modality, x: &[f64]) -> f64 {
        let m = modality_index(modality);
        let cont = self.user_dim + self.ad_dim;
        let lin: f64 = self.linear[m].iter().zip(&x[..cont]).map(|(w, v)| w * v).sum();
        let (user, ad) = x[..cont].split_at(self.user_dim);
        let mut quad = 0.0;
        for (i, u) in user.iter().enumerate() {
            let row = &self.cross[m][i * self.ad_dim..(i + 1) * self.ad_dim];
            quad += u * row.iter().zip(ad).map(|(a, v)| a * v).sum::<f64>();
        }
        self.signal_strength * (lin + self.cross_strength * quad)
    }

    /// Slot- and focus-dependent intercept.
    pub fn offset(&self, slot: AdSlot, focus: Focus) -> f64 {
        match focus {
            Focus::In => self.offset_in[slot.index()],
            Focus::Out => self.offset_out[slot.index()],
        }
    }

    pub fn logit(&self, slot: AdSlot, focus: Focus, x: &[f64]) -> f64 {
        self.offset(slot, focus) + self.signal(slot.modality(), x)
    }

    pub fn true_ctr(&self, slot: AdSlot, focus: Focus, x: &[f64]) -> f64 {
        sigmoid(self.logit(slot, focus, x)).clamp(1e-12, 1.0 - 1e-12)
    }
}
