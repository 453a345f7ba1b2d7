use num::BigRational;
use proptest::prelude::*;

use super::*;
use crate::datagen::{AdSlot, GeneratorConfig, PerSlot};

/// Straight evaluation of the bid formula in exact rationals.
fn rational_bid(o: u64, p: f64, c: f64, b: f64) -> u64 {
    let r = |x: f64| BigRational::from_float(x).unwrap();
    let q = BigRational::from_integer(o.into()) / (BigRational::from_integer(1.into()) + r(p)) * (r(c) / r(b));
    let ceil = q.ceil().to_integer();
    let o_big: num::BigInt = o.into();
    if ceil > o_big {
        o
    } else {
        ceil.to_u64().unwrap()
    }
}

#[test]
fn bid_hand_examples() {
    assert_eq!(compute_bid(100, 0.0, 0.03, 0.03).unwrap(), 100);
    assert_eq!(compute_bid(100, 1.0, 0.01, 0.02).unwrap(), 25);
    assert_eq!(compute_bid(100, 0.0, 0.04, 0.01).unwrap(), 100);
    assert_eq!(compute_bid(100, 0.0, 0.0, 0.01).unwrap(), 0);
    // 0.1 / 0.3 is not exactly 1/3 in binary; the ceiling follows the exact value
    assert_eq!(compute_bid(3, 0.0, 0.1, 0.3).unwrap(), rational_bid(3, 0.0, 0.1, 0.3));
}

#[test]
fn bid_rejects_invalid_inputs() {
    assert!(compute_bid(100, 0.0, 0.5, 0.0).is_err());
    assert!(compute_bid(0, 0.0, 0.5, 0.1).is_err());
    assert!(compute_bid(100, -0.1, 0.5, 0.1).is_err());
    assert!(compute_bid(100, 0.0, 1.5, 0.1).is_err());
    assert!(compute_bid(100, 0.0, f64::NAN, 0.1).is_err());
    assert!(compute_bid(100, f64::INFINITY, 0.5, 0.1).is_err());
}

fn bids(xs: &[(CampaignId, u64)]) -> Vec<Bid> {
    xs.iter().map(|&(campaign, amount)| Bid { campaign, amount }).collect()
}

#[test]
fn gsp_hand_examples() {
    let out = run_auction(&bids(&[(1, 100), (2, 60), (3, 30)]), 1).unwrap();
    assert_eq!((out.winner(), out.price()), (1, 60));
    assert_eq!(out.ranked.iter().map(|b| b.amount).collect::<Vec<_>>(), [100, 60, 30]);
    let out = run_auction(&bids(&[(1, 100)]), 1).unwrap();
    assert_eq!((out.winner(), out.price()), (1, 1));
    let out = run_auction(&bids(&[(7, 50), (3, 50)]), 1).unwrap();
    assert_eq!((out.winner(), out.price()), (3, 50));
    assert!(run_auction(&[], 1).is_err());
    // the reserve floors the price but never lifts it above the bid
    let out = run_auction(&bids(&[(1, 5), (2, 0)]), 10).unwrap();
    assert_eq!(out.price(), 5);
}

#[test]
fn pod_auction_prices_each_position() {
    let out = run_pod_auction(&bids(&[(1, 100), (2, 60), (3, 30)]), 1, 2).unwrap();
    let got: Vec<(CampaignId, u64)> = out.placements.iter().map(|p| (p.campaign, p.price)).collect();
    assert_eq!(got, [(1, 60), (2, 30)]);
    let out = run_pod_auction(&bids(&[(1, 100), (2, 60)]), 1, 5).unwrap();
    assert_eq!(out.placements.len(), 2);
    assert_eq!(out.placements[1].price, 1);
    assert!(run_pod_auction(&bids(&[(1, 1)]), 1, 0).is_err());
}

#[test]
fn serve_follows_focus() {
    let a = run_auction(&bids(&[(1, 10)]), 1).unwrap();
    let v = run_auction(&bids(&[(2, 10)]), 1).unwrap();
    match serve(Focus::In, Some(&a), Some(&v)) {
        PodChoice::Served { modality, outcome } => {
            assert_eq!(modality, Modality::Video);
            assert_eq!(outcome.winner(), 2);
        }
        other => panic!("{other:?}"),
    }
    match serve(Focus::Out, Some(&a), Some(&v)) {
        PodChoice::Served { modality, outcome } => {
            assert_eq!(modality, Modality::Audio);
            assert_eq!(outcome.winner(), 1);
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(
        serve(Focus::In, Some(&a), None),
        PodChoice::NoFill {
            modality: Modality::Video
        }
    );
    assert_eq!(
        serve(Focus::Out, None, Some(&v)),
        PodChoice::NoFill {
            modality: Modality::Audio
        }
    );
}

/// Traffic with click rates high enough for tight CTR estimates.
fn busy_traffic() -> GeneratorConfig {
    GeneratorConfig {
        base_ctr: PerSlot::from_fn(|s| if s.modality() == Modality::Audio { 0.1 } else { 0.2 }),
        focus_ctr_multiplier: 3.0,
        ..Default::default()
    }
}

fn sim(steps: usize, seed: u64) -> Simulation {
    Simulation::new(
        &busy_traffic(),
        SimConfig {
            steps,
            seed,
            ..Default::default()
        },
    )
    .unwrap()
}

#[test]
fn zero_steps_is_an_empty_report() {
    let s = sim(0, 1);
    let r = s.run(&[("c", &ConstantScorer(0.1))], None).unwrap();
    assert_eq!(r[0].total, ModalityStats::default());
    for m in r[0].by_modality.values() {
        assert_eq!(m, &ModalityStats::default());
    }
    assert!(s.run(&[], None).is_err());
}

#[test]
fn identical_arms_give_identical_reports() {
    let s = sim(3_000, 2);
    let oracle = OracleScorer(s.world().clone());
    let r = s.run(&[("a", &oracle), ("b", &oracle)], None).unwrap();
    assert_eq!(r[0].by_modality, r[1].by_modality);
    assert_eq!(r[0].total, r[1].total);
    assert_eq!(s.run(&[("a", &oracle)], None).unwrap()[0], r[0]);
}

#[test]
fn arm_order_does_not_matter() {
    let s = sim(5_000, 3);
    let oracle = OracleScorer(s.world().clone());
    let constant = ConstantScorer(0.1);
    let low = ConstantScorer(0.01);
    let fwd = s.run(&[("o", &oracle), ("c", &constant), ("l", &low)], None).unwrap();
    let rev = s.run(&[("l", &low), ("o", &oracle), ("c", &constant)], None).unwrap();
    assert_eq!(fwd[0], rev[1]);
    assert_eq!(fwd[1], rev[2]);
    assert_eq!(fwd[2], rev[0]);
}

#[test]
fn oracle_beats_constant_and_matches_true_ctr() {
    let s = sim(100_000, 4);
    let oracle = OracleScorer(s.world().clone());
    let constant = ConstantScorer(0.1);
    let r = s.run(&[("oracle", &oracle), ("constant", &constant)], None).unwrap();
    assert!(r[0].total.ctr.unwrap() > r[1].total.ctr.unwrap());
    for m in r[0].by_modality.values() {
        let (ctr, truth) = (m.ctr.unwrap(), m.mean_true_ctr.unwrap());
        assert!(((ctr - truth) / truth).abs() < 0.05, "{ctr} vs {truth}");
    }
    let t = &r[0].total;
    assert_eq!(t.impressions, 100_000);
    assert_eq!(t.ecpc.unwrap(), t.spend as f64 / t.clicks as f64);
}

#[test]
fn event_log_matches_report() {
    let s = sim(2_000, 5);
    let oracle = OracleScorer(s.world().clone());
    let mut buf = Vec::new();
    let r = s.run(&[("o", &oracle)], Some(&mut buf)).unwrap();
    let events: Vec<SimEvent> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(events.len(), 2_000);
    let clicks = events.iter().filter(|e| e.click == Some(true)).count() as u64;
    assert_eq!(clicks, r[0].total.clicks);
    for e in &events {
        assert!(e.price.unwrap() <= e.bid.unwrap());
        let want = if e.focus == Focus::In {
            Modality::Video
        } else {
            Modality::Audio
        };
        assert_eq!(e.slot.modality(), want);
        let c: &Campaign = &s.campaigns()[e.winner.unwrap() as usize];
        assert_eq!(c.modality, want);
    }
}

#[test]
fn base_rates_follow_the_sample() {
    let d = crate::datagen::generate(&GeneratorConfig {
        n: 50_000,
        ..busy_traffic()
    })
    .unwrap();
    let prior = BaseRateScorer::from_dataset(&d).unwrap();
    let cell: Vec<_> = d
        .impressions()
        .iter()
        .filter(|i| i.slot == AdSlot::StreamVideo && i.focus == Focus::In)
        .collect();
    let rate = cell.iter().map(|i| f64::from(i.label)).sum::<f64>() / cell.len() as f64;
    assert_eq!(prior.rate(AdSlot::StreamVideo, Focus::In), rate);
    // leavebehinds are never out of focus: falls back to the overall rate
    let overall = d.labels().iter().sum::<f64>() / d.len() as f64;
    assert_eq!(prior.rate(AdSlot::PodcastLeavebehind, Focus::Out), overall);
    let rows = [ScoreRow {
        slot: AdSlot::StreamVideo,
        focus: Focus::In,
        features: vec![],
    }];
    assert_eq!(prior.score(&rows).unwrap(), [rate]);
}

struct Broken;

impl Scorer for Broken {
    fn score(&self, rows: &[ScoreRow]) -> crate::Result<Vec<f64>> {
        Ok(vec![f64::NAN; rows.len()])
    }
}

#[test]
fn non_finite_score_names_arm_and_step() {
    let s = sim(10, 6);
    let err = s
        .run(&[("ok", &ConstantScorer(0.1)), ("bad", &Broken)], None)
        .unwrap_err();
    assert!(
        matches!(err, crate::Error::NonFiniteScore { ref arm, step: 0 } if arm == "bad"),
        "{err}"
    );
}

#[test]
fn exhausted_budgets_cause_no_fill() {
    let cfg = SimConfig {
        steps: 2_000,
        seed: 7,
        campaigns: CampaignConfig {
            per_modality: 1,
            budget: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    let s = Simulation::new(&busy_traffic(), cfg).unwrap();
    let r = s.run(&[("c", &ConstantScorer(0.2))], None).unwrap();
    let t = &r[0].total;
    assert!(t.no_fill > 0);
    assert_eq!(t.impressions + t.no_fill, 2_000);
    assert!(t.spend <= 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn bid_matches_rational_oracle(
        o in 1u64..5_000_000,
        p in 0.0f64..3.0,
        c in 0.0f64..=1.0,
        b in 1e-4f64..=1.0,
    ) {
        prop_assert_eq!(compute_bid(o, p, c, b).unwrap(), rational_bid(o, p, c, b));
    }

    #[test]
    fn bid_matches_oracle_on_integer_ratios(o in 1u64..1000, k in 0u64..2000, p in 0u8..4) {
        // c / b lands on a ratio that makes the product near an integer
        let b = 0.5f64;
        let c = (k as f64 / o as f64 * b * (1.0 + f64::from(p))).min(1.0);
        prop_assert_eq!(compute_bid(o, f64::from(p), c, b).unwrap(), rational_bid(o, f64::from(p), c, b));
    }

    #[test]
    fn bid_is_monotone(o in 1u64..100_000, p in 0.0f64..3.0, dp in 0.0f64..3.0, c in 0.0f64..=1.0, dc in 0.0f64..=1.0, b in 1e-3f64..1.0) {
        let c2 = (c + dc).min(1.0);
        prop_assert!(compute_bid(o, p, c2, b).unwrap() >= compute_bid(o, p, c, b).unwrap());
        prop_assert!(compute_bid(o, p + dp, c, b).unwrap() <= compute_bid(o, p, c, b).unwrap());
        prop_assert!(compute_bid(o, p, c, b).unwrap() <= o);
    }

    #[test]
    fn price_never_exceeds_bid_and_drops_with_fewer_bidders(
        raw in prop::collection::vec(0u64..1000, 1..12),
        drop in any::<prop::sample::Index>(),
        reserve in 0u64..50,
    ) {
        let all: Vec<Bid> = raw.iter().enumerate().map(|(i, &a)| Bid { campaign: i as CampaignId, amount: a }).collect();
        let out = run_auction(&all, reserve).unwrap();
        prop_assert!(out.price() <= out.placements[0].bid);
        prop_assert!(out.ranked.windows(2).all(|w| w[0].amount >= w[1].amount));
        let losers: Vec<&Bid> = out.ranked[1..].iter().collect();
        if !losers.is_empty() {
            let gone = losers[drop.index(losers.len())].campaign;
            let rest: Vec<Bid> = all.iter().copied().filter(|b| b.campaign != gone).collect();
            let again = run_auction(&rest, reserve).unwrap();
            prop_assert_eq!(again.winner(), out.winner());
            prop_assert!(again.price() <= out.price());
        }
    }
}
