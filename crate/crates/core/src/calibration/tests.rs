use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::datagen::{generate, GeneratorConfig};
use crate::model::{GroupingKind, ModelConfig, TaskGrouping};

/// Logits `z ~ N(0, 2²)` with labels drawn from `σ(z)`, so `T = 1` is the
/// population optimum.
fn self_consistent(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 2.0).unwrap();
    (0..n)
        .map(|_| {
            let z: f64 = normal.sample(&mut rng);
            let y = if rng.gen::<f64>() < sigmoid(z) { 1.0 } else { 0.0 };
            (z, y)
        })
        .unzip()
}

#[test]
fn apply_temperature_basics() {
    for z in [-3.0, -0.1, 0.0, 2.5] {
        assert_eq!(apply_temperature(z, 1.0).unwrap(), sigmoid(z));
        assert_eq!(apply_temperature(0.0, 0.3 + z.abs()).unwrap(), 0.5);
        assert!((apply_temperature(z, 1e12).unwrap() - 0.5).abs() < 1e-9);
    }
    assert!(apply_temperature(1.0, 0.0).is_err());
    assert!(apply_temperature(1.0, -2.0).is_err());
    assert!(apply_temperature(1.0, f64::NAN).is_err());
}

#[test]
fn fit_recovers_unit_temperature_on_self_consistent_data() {
    let (z, y) = self_consistent(100_000, 1);
    let head = fit_temperature(&z, &y).unwrap();
    assert!((0.9..=1.1).contains(&head.temperature), "T = {}", head.temperature);
    assert!(head.iterations > GRID_POINTS);
}

#[test]
fn fit_scales_with_logits() {
    let (z, y) = self_consistent(20_000, 2);
    let base = fit_temperature(&z, &y).unwrap().temperature;
    let doubled: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
    let t2 = fit_temperature(&doubled, &y).unwrap().temperature;
    let ratio = t2 / base;
    assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");
}

#[test]
fn fit_matches_dense_scan() {
    let (z, y) = self_consistent(3_000, 3);
    let z: Vec<f64> = z.iter().map(|v| 0.4 * v + 0.3).collect();
    let head = fit_temperature(&z, &y).unwrap();
    // dense scan in log T around the fitted value
    let best = (-4000..=4000)
        .map(|i| (head.temperature.ln() + i as f64 * 1e-5).exp())
        .min_by(|a, b| temperature_nll(&z, &y, *a).total_cmp(&temperature_nll(&z, &y, *b)))
        .unwrap();
    assert!((best.ln() - head.temperature.ln()).abs() < 1e-4);
    assert_eq!(head.nll, temperature_nll(&z, &y, head.temperature));
}

#[test]
fn fit_rejects_degenerate_inputs() {
    assert!(fit_temperature(&[0.1, 0.2], &[1.0, 1.0]).is_err());
    assert!(fit_temperature(&[0.1, 0.2], &[0.0, 0.0]).is_err());
    assert!(fit_temperature(&[], &[]).is_err());
    assert!(matches!(
        fit_temperature(&[f64::INFINITY, 0.2], &[0.0, 1.0]),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn ece_hand_examples() {
    let (e, _) = ece(&[1.0; 5], &[1.0; 5], BinScheme::EqualWidth, 15).unwrap();
    assert_eq!(e, 0.0);
    let (e, bins) = ece(&[0.8; 4], &[1.0, 1.0, 1.0, 0.0], BinScheme::EqualWidth, 1).unwrap();
    assert!((e - 0.05).abs() < 1e-12);
    assert_eq!(bins.bins.len(), 1);
    assert_eq!(bins.bins[0].count, 4);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let labels: Vec<f64> = (0..999).map(|_| f64::from(rng.gen_bool(0.3) as u8)).collect();
    let rate = labels.iter().sum::<f64>() / labels.len() as f64;
    for scheme in [BinScheme::EqualWidth, BinScheme::EqualMass] {
        let (e, bins) = ece(&vec![0.5; labels.len()], &labels, scheme, 15).unwrap();
        assert!((e - (rate - 0.5).abs()).abs() < 1e-12);
        assert_eq!(bins.bins.iter().filter(|b| b.count > 0).count(), 1);
    }
}

#[test]
fn ece_bins_cover_the_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p: Vec<f64> = (0..1234).map(|_| rng.gen::<f64>().powi(3)).collect();
    let y: Vec<f64> = p.iter().map(|&q| f64::from((rng.gen::<f64>() < q) as u8)).collect();
    for scheme in [BinScheme::EqualWidth, BinScheme::EqualMass] {
        let (_, bins) = ece(&p, &y, scheme, 15).unwrap();
        assert_eq!(bins.bins.len(), 15);
        assert_eq!(bins.bins.iter().map(|b| b.count).sum::<usize>(), p.len());
        for b in &bins.bins {
            for v in [b.mean_confidence, b.empirical_ctr].into_iter().flatten() {
                assert!((0.0..=1.0).contains(&v));
            }
            assert!(b.lo <= b.hi);
        }
    }
    let (_, mass) = ece(&p, &y, BinScheme::EqualMass, 15).unwrap();
    // distinct values: every equal-mass bin holds close to n / M
    for b in &mass.bins {
        assert!((80..=84).contains(&b.count), "{}", b.count);
    }
    // p = 1 lands in the last equal-width bin
    let (_, w) = ece(&[1.0, 0.0], &[1.0, 0.0], BinScheme::EqualWidth, 10).unwrap();
    assert_eq!(w.bins[9].count, 1);
    assert_eq!(w.bins[0].count, 1);
}

#[test]
fn ece_rejects_bad_input() {
    assert!(ece(&[], &[], BinScheme::EqualMass, 15).is_err());
    assert!(ece(&[0.5], &[1.0], BinScheme::EqualMass, 0).is_err());
    assert!(ece(&[1.5], &[1.0], BinScheme::EqualWidth, 3).is_err());
    assert!("equal-mass".parse::<BinScheme>().is_ok());
    assert!("quantile".parse::<BinScheme>().is_err());
}

#[test]
fn reliability_csv_layout() {
    let (_, bins) = ece(&[0.1, 0.9], &[0.0, 1.0], BinScheme::EqualWidth, 3).unwrap();
    let csv = reliability_csv(&bins);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "bin,lo,hi,count,mean_confidence,empirical_ctr");
    assert_eq!(lines.len(), 4);
    assert!(lines[2].ends_with(",0,,"), "{}", lines[2]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_reliability_csv(&bins, &path).unwrap();
    assert_eq!(std::fs::read_to_string(path).unwrap(), csv);
}

fn tiny_model(kind: GroupingKind) -> CamoeModel {
    let config = ModelConfig {
        feature_dim: 5,
        embed_dim: 6,
        expert_dim: 4,
        branches: 1,
        cross_rank: 2,
        deep_layers: vec![4],
        tower_layers: vec![3],
        ..Default::default()
    };
    CamoeModel::build(TaskGrouping::new(kind), config, 11).unwrap()
}

fn data(n: usize, seed: u64) -> Dataset {
    generate(&GeneratorConfig {
        n,
        feature_dim: 5,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn calibrate_model_sets_one_temperature_per_task() {
    let mut model = tiny_model(GroupingKind::Modality);
    let val = data(20_000, 1);
    let heads = calibrate_model(&mut model, &val).unwrap();
    assert_eq!(heads.len(), 2);
    assert_eq!(heads[0].task, "audio");
    assert_eq!(heads[1].task, "video");
    for (h, &t) in heads.iter().zip(model.temperatures()) {
        assert!(h.temperature > 0.0);
        assert_eq!(h.temperature, t);
    }
    // fitting again from the calibrated model gives the same answer
    let again = calibrate_model(&mut model.clone(), &val).unwrap();
    assert_eq!(again, heads);
}

#[test]
fn calibrate_model_names_single_class_task() {
    let mut model = tiny_model(GroupingKind::Modality);
    let mut imps = data(3_000, 2).impressions().to_vec();
    for imp in imps
        .iter_mut()
        .filter(|i| i.slot.modality() != crate::datagen::Modality::Audio)
    {
        imp.label = 0;
    }
    let val = Dataset::new(imps, 5, crate::datagen::Provenance::Derived("test".into())).unwrap();
    let err = calibrate_model(&mut model, &val).unwrap_err().to_string();
    assert!(err.contains("`video`"), "{err}");
}

proptest! {
    #[test]
    fn ece_is_permutation_invariant(
        pairs in prop::collection::vec((0.0f64..=1.0, prop::bool::ANY), 1..60),
        seed in any::<u64>(),
        m in 1usize..20,
    ) {
        let (p, y): (Vec<f64>, Vec<f64>) = pairs.iter().map(|&(p, b)| (p, f64::from(b as u8))).unzip();
        let mut idx: Vec<usize> = (0..p.len()).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let ps: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        for scheme in [BinScheme::EqualWidth, BinScheme::EqualMass] {
            let a = ece(&p, &y, scheme, m).unwrap();
            let b = ece(&ps, &ys, scheme, m).unwrap();
            prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
            prop_assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn single_bin_ece_is_mean_gap(
        pairs in prop::collection::vec((0.0f64..=1.0, prop::bool::ANY), 1..80),
    ) {
        let (p, y): (Vec<f64>, Vec<f64>) = pairs.iter().map(|&(p, b)| (p, f64::from(b as u8))).unzip();
        let n = p.len() as f64;
        let want = (y.iter().sum::<f64>() / n - p.iter().sum::<f64>() / n).abs();
        for scheme in [BinScheme::EqualWidth, BinScheme::EqualMass] {
            let (e, _) = ece(&p, &y, scheme, 1).unwrap();
            prop_assert!((e - want).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_is_strictly_monotone(a in -30.0f64..30.0, d in 1e-6f64..5.0, t in 0.05f64..20.0) {
        let (lo, hi) = (apply_temperature(a, t).unwrap(), apply_temperature(a + d, t).unwrap());
        prop_assert!(hi >= lo);
        // strict wherever the sigmoid has not saturated in f64
        if (a / t).abs() < 15.0 && ((a + d) / t).abs() < 15.0 {
            prop_assert!(hi > lo);
        }
    }
}
