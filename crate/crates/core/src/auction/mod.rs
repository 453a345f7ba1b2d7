//! Bid computation, generalized second-price ranking, focus-conditioned pod
//! serving and a multi-arm traffic simulator.
//!
//! Money is integer micro-currency throughout.

mod sim;

use num::{BigRational, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::datagen::{Focus, Modality};
use crate::error::{invalid, Result};

pub use sim::{
    BaseRateScorer, Campaign, CampaignConfig, ConstantScorer, ModalityStats, ModelScorer, OracleScorer, ScoreRow,
    Scorer, SimConfig, SimEvent, SimReport, Simulation,
};

pub type CampaignId = u32;

/// Final bid `min(⌈(o / (1 + p)) · (c / b)⌉, o)`.
///
/// `o` is the max bid, `p` the pacing multiplier, `c` the predicted CTR and
/// `b` the campaign's trailing CTR. The ceiling is exact: near integers the
/// float result is re-derived in rational arithmetic.
pub fn compute_bid(o: u64, p: f64, c: f64, b: f64) -> Result<u64> {
    if o == 0 {
        return Err(invalid("compute_bid: max bid must be positive"));
    }
    if !(p >= 0.0) || !p.is_finite() {
        return Err(invalid(format!(
            "compute_bid: pacing multiplier {p} must be finite and >= 0"
        )));
    }
    if !(b > 0.0) || !b.is_finite() {
        return Err(invalid(format!("compute_bid: trailing CTR {b} must be positive")));
    }
    if !(0.0..=1.0).contains(&c) {
        return Err(invalid(format!("compute_bid: predicted CTR {c} outside [0, 1]")));
    }
    let v = (o as f64 / (1.0 + p)) * (c / b);
    if v >= o as f64 + 1.0 {
        return Ok(o);
    }
    let nearest = v.round();
    if (v - nearest).abs() > 1e-9 * nearest.max(1.0) {
        return Ok((v.ceil() as u64).min(o));
    }
    let q =
        BigRational::from_integer(o.into()) * exact(c) / ((BigRational::from_integer(1.into()) + exact(p)) * exact(b));
    let ceil = q.ceil().to_integer().to_u64().unwrap_or(u64::MAX);
    Ok(ceil.min(o))
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite input")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bid {
    pub campaign: CampaignId,
    pub amount: u64,
}

/// One filled pod position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub campaign: CampaignId,
    pub bid: u64,
    pub price: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuctionOutcome {
    /// All bids, highest first, ties broken by lower campaign id.
    pub ranked: Vec<Bid>,
    /// The top `pod_size` positions with their prices.
    pub placements: Vec<Placement>,
}

impl AuctionOutcome {
    pub fn winner(&self) -> CampaignId {
        self.placements[0].campaign
    }

    pub fn price(&self) -> u64 {
        self.placements[0].price
    }
}

/// Single-position generalized second-price auction.
pub fn run_auction(bids: &[Bid], reserve: u64) -> Result<AuctionOutcome> {
    run_pod_auction(bids, reserve, 1)
}

/// Ranks bids and fills up to `pod_size` positions. Position `i` pays the
/// next bid down, floored at `reserve` and capped at its own bid.
pub fn run_pod_auction(bids: &[Bid], reserve: u64, pod_size: usize) -> Result<AuctionOutcome> {
    if bids.is_empty() {
        return Err(invalid("run_auction: no bids"));
    }
    if pod_size == 0 {
        return Err(invalid("run_auction: pod size must be at least 1"));
    }
    let mut ranked = bids.to_vec();
    ranked.sort_by(|a, b| b.amount.cmp(&a.amount).then(a.campaign.cmp(&b.campaign)));
    let placements = ranked
        .iter()
        .take(pod_size)
        .enumerate()
        .map(|(i, b)| {
            let next = ranked.get(i + 1).map_or(0, |n| n.amount);
            Placement {
                campaign: b.campaign,
                bid: b.amount,
                price: next.max(reserve).min(b.amount),
            }
        })
        .collect();
    Ok(AuctionOutcome { ranked, placements })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PodChoice<'a> {
    Served {
        modality: Modality,
        outcome: &'a AuctionOutcome,
    },
    /// The modality required by the focus state had no eligible bidder.
    NoFill { modality: Modality },
}

/// Video pod for in-focus users, audio pod otherwise.
pub fn serve<'a>(focus: Focus, audio: Option<&'a AuctionOutcome>, video: Option<&'a AuctionOutcome>) -> PodChoice<'a> {
    let (modality, pick) = match focus {
        Focus::In => (Modality::Video, video),
        Focus::Out => (Modality::Audio, audio),
    };
    match pick {
        Some(outcome) => PodChoice::Served { modality, outcome },
        None => PodChoice::NoFill { modality },
    }
}

#[cfg(test)]
mod tests;
