use std::collections::BTreeMap;

use super::*;

fn imp(slot: AdSlot, label: u8, tag: f64) -> Impression {
    Impression {
        features: vec![tag, -tag, 1.0],
        slot,
        focus: Focus::In,
        label,
        true_ctr: 0.5,
    }
}

fn dataset(imps: Vec<Impression>) -> Dataset {
    Dataset::new(imps, 3, Provenance::Derived("test".into())).unwrap()
}

#[test]
fn slot_taxonomy() {
    use AdSlot::*;
    for s in [StreamVideo, EmbeddedMusic, PodcastVideo] {
        assert_eq!(s.modality(), Modality::Video);
    }
    for s in [StreamAudio, Podcast, StreamAudioLeavebehind, PodcastLeavebehind] {
        assert_eq!(s.modality(), Modality::Audio);
    }
    for s in [StreamAudio, StreamVideo, EmbeddedMusic, StreamAudioLeavebehind] {
        assert_eq!(s.content(), Content::Music);
    }
    for s in [Podcast, PodcastVideo, PodcastLeavebehind] {
        assert_eq!(s.content(), Content::Podcast);
    }
    for s in AdSlot::ALL {
        assert_eq!(s.name().parse::<AdSlot>().unwrap(), s);
    }
}

#[test]
fn empty_generation() {
    let cfg = GeneratorConfig {
        n: 0,
        ..Default::default()
    };
    let d = generate(&cfg).unwrap();
    assert!(d.is_empty());
    assert_eq!(d.feature_dim(), 16);
}

#[test]
fn slot_mix_must_sum_to_one() {
    let mut cfg = GeneratorConfig::default();
    cfg.slot_mix.stream_audio = 0.71;
    assert!(generate(&cfg).is_err());
}

#[test]
fn generation_is_deterministic() {
    let cfg = GeneratorConfig {
        n: 500,
        seed: 9,
        ..Default::default()
    };
    assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    let other = GeneratorConfig {
        seed: 10,
        ..cfg.clone()
    };
    assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
}

#[test]
fn default_skew_and_focus_gap() {
    let cfg = GeneratorConfig {
        n: 100_000,
        seed: 1,
        ..Default::default()
    };
    let d = generate(&cfg).unwrap();
    let share = d.count_by_slot()[&AdSlot::StreamAudio] as f64 / d.len() as f64;
    assert!((share - 0.70).abs() <= 0.01, "StreamAudio share {share}");

    let rate = |f: Focus| {
        let cell: Vec<_> = d.impressions().iter().filter(|i| i.focus == f).collect();
        cell.iter().map(|i| i.label as f64).sum::<f64>() / cell.len() as f64
    };
    let ratio = rate(Focus::In) / rate(Focus::Out);
    assert!((8.0..=12.0).contains(&ratio), "in/out CTR ratio {ratio}");
}

#[test]
fn zero_signal_matches_base_ctr_per_slot() {
    let cfg = GeneratorConfig {
        n: 2_000_000,
        feature_dim: 3,
        signal_strength: 0.0,
        seed: 2,
        ..Default::default()
    };
    let d = generate(&cfg).unwrap();
    let mut clicks: BTreeMap<AdSlot, (f64, f64)> = BTreeMap::new();
    for i in d.impressions() {
        let e = clicks.entry(i.slot).or_default();
        e.0 += i.label as f64;
        e.1 += 1.0;
    }
    for (slot, (c, n)) in clicks {
        let base = cfg.base_ctr.get(slot);
        let rel = (c / n - base).abs() / base;
        assert!(rel < 0.10, "{slot}: empirical {} vs base {base}", c / n);
    }
}

#[test]
fn labels_track_true_ctr_per_cell() {
    let cfg = GeneratorConfig {
        n: 2_000_000,
        feature_dim: 6,
        seed: 3,
        ..Default::default()
    };
    let d = generate(&cfg).unwrap();
    let mut cells: BTreeMap<(AdSlot, bool), (f64, f64, f64)> = BTreeMap::new();
    for i in d.impressions() {
        let e = cells.entry((i.slot, i.focus == Focus::In)).or_default();
        e.0 += i.label as f64;
        e.1 += i.true_ctr;
        e.2 += i.true_ctr * (1.0 - i.true_ctr);
    }
    for ((slot, inf), (clicks, expected, var)) in cells {
        let se = var.sqrt();
        assert!(
            (clicks - expected).abs() <= 4.0 * se,
            "{slot} in={inf}: {clicks} clicks vs {expected} expected"
        );
        if expected >= 4000.0 {
            assert!((clicks - expected).abs() / expected < 0.05, "{slot} in={inf}");
        }
    }
}

#[test]
fn downsample_noop_cases() {
    let d = dataset(vec![
        imp(AdSlot::StreamAudio, 0, 1.0),
        imp(AdSlot::StreamVideo, 1, 2.0),
        imp(AdSlot::Podcast, 0, 3.0),
        imp(AdSlot::PodcastVideo, 0, 4.0),
    ]);
    let same = downsample_majority(&d, 1.0, 3).unwrap();
    assert_eq!(same.impressions(), d.impressions());
    let inf = downsample_majority(&d, f64::INFINITY, 3).unwrap();
    assert_eq!(inf.impressions(), d.impressions());
}

#[test]
fn downsample_to_ratio_keeps_minority() {
    let mut imps = Vec::new();
    for i in 0..950 {
        imps.push(imp(AdSlot::StreamAudio, (i % 7 == 0) as u8, i as f64));
    }
    for i in 0..50 {
        imps.push(imp(AdSlot::EmbeddedMusic, (i % 3 == 0) as u8, 1000.0 + i as f64));
    }
    let d = dataset(imps);
    let out = downsample_majority(&d, 4.0, 17).unwrap();
    let audio = out.count_modality(Modality::Audio);
    let video = out.count_modality(Modality::Video);
    assert_eq!(video, 50);
    assert!(audio as f64 / video as f64 <= 4.0);
    assert_eq!(audio, 200);

    // retained rows are untouched and keep their original order
    let mut cursor = d.impressions().iter();
    for kept in out.impressions() {
        assert!(cursor.any(|orig| orig == kept));
    }
    assert_eq!(out, downsample_majority(&d, 4.0, 17).unwrap());
}

#[test]
fn downsample_requires_video() {
    let d = dataset(vec![imp(AdSlot::StreamAudio, 0, 1.0), imp(AdSlot::Podcast, 1, 2.0)]);
    assert!(downsample_majority(&d, 2.0, 0).is_err());
    assert!(downsample_majority(&d, 0.0, 0).is_err());
}

fn balanced(per_slot: usize) -> Dataset {
    let mut imps = Vec::new();
    for (k, slot) in AdSlot::ALL.into_iter().enumerate() {
        for i in 0..per_slot {
            imps.push(imp(slot, (i % 5 == 0) as u8, (k * 10_000 + i) as f64));
        }
    }
    dataset(imps)
}

#[test]
fn split_sizes_partition_and_determinism() {
    let d = balanced(143); // 1001 rows
    let (a, b) = split(&d, 0.8, 5).unwrap();
    assert!((a.len() as i64 - 800).abs() <= 7, "{}", a.len());
    assert_eq!(a.len() + b.len(), d.len());

    let key = |i: &Impression| i.features[0] as i64;
    let mut union: Vec<i64> = a.impressions().iter().chain(b.impressions()).map(key).collect();
    let mut orig: Vec<i64> = d.impressions().iter().map(key).collect();
    union.sort_unstable();
    orig.sort_unstable();
    assert_eq!(union, orig);

    for slot in AdSlot::ALL {
        let ca = a.count_by_slot()[&slot];
        assert!((ca as f64 - 143.0 * 0.8).abs() <= 1.0);
    }

    let (a2, b2) = split(&d, 0.8, 5).unwrap();
    assert_eq!((a, b), (a2, b2));
}

#[test]
fn split_rejects_singleton_slot() {
    let mut imps: Vec<_> = (0..10).map(|i| imp(AdSlot::StreamAudio, 0, i as f64)).collect();
    imps.push(imp(AdSlot::PodcastLeavebehind, 1, 99.0));
    let err = split(&dataset(imps), 0.5, 0).unwrap_err();
    assert!(err.to_string().contains("PodcastLeavebehind"));
    assert!(split(&balanced(3), 1.0, 0).is_err());
}

#[test]
fn csv_round_trip_is_exact() {
    let cfg = GeneratorConfig {
        n: 300,
        seed: 4,
        ..Default::default()
    };
    let d = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    save_csv(&d, &p).unwrap();
    let back = load_csv(&p).unwrap();
    assert_eq!(back.impressions(), d.impressions());
    assert_eq!(back.feature_dim(), d.feature_dim());
}

#[test]
fn csv_header_only_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.csv");
    std::fs::write(&p, "slot,focus,label,true_ctr,f0,f1\n").unwrap();
    let d = load_csv(&p).unwrap();
    assert!(d.is_empty());
    assert_eq!(d.feature_dim(), 2);

    std::fs::write(
        &p,
        "slot,focus,label,true_ctr,f0\nStreamAudio,in,0,0.1,1.0\nBannerAd,out,1,0.2,0.5\n",
    )
    .unwrap();
    match load_csv(&p).unwrap_err() {
        Error::Parse { line, msg } => {
            assert_eq!(line, 3);
            assert!(msg.contains("BannerAd"));
        }
        e => panic!("unexpected {e:?}"),
    }

    std::fs::write(&p, "slot,focus,label,true_ctr,f0\nStreamAudio,in,0,0.1\n").unwrap();
    match load_csv(&p).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 2),
        e => panic!("unexpected {e:?}"),
    }
}
