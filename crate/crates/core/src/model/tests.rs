use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datagen::{AdSlot, Modality};

fn small_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 5,
        embed_dim: 6,
        experts: 2,
        expert_dim: 4,
        branches: 2,
        cross_layers: 2,
        cross_rank: 3,
        deep_layers: vec![5],
        tower_layers: vec![3],
        ..Default::default()
    }
}

fn random_batch(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn bits(v: &[Vec<f64>]) -> Vec<Vec<u64>> {
    v.iter().map(|r| r.iter().map(|x| x.to_bits()).collect()).collect()
}

#[test]
fn groupings_partition_slots() {
    let m = TaskGrouping::new(GroupingKind::Modality);
    assert_eq!(m.names(), ["audio", "video"]);
    for s in AdSlot::ALL {
        let want = if s.modality() == Modality::Audio { 0 } else { 1 };
        assert_eq!(m.task_of(s), want, "{s}");
    }
    assert_eq!(m.task_of(AdSlot::PodcastLeavebehind), 0);
    assert_eq!(TaskGrouping::new(GroupingKind::Single).len(), 1);
    assert_eq!(TaskGrouping::new(GroupingKind::Content).names(), ["music", "podcast"]);
    let p = TaskGrouping::new(GroupingKind::PerSlot);
    assert_eq!(p.len(), 7);
    for s in AdSlot::ALL {
        assert_eq!(p.tasks()[p.task_of(s)].slots, vec![s]);
    }
}

#[test]
fn grouping_rejects_overlap_and_gaps() {
    let overlap = vec![
        Task {
            name: "a".into(),
            slots: AdSlot::ALL.to_vec(),
        },
        Task {
            name: "b".into(),
            slots: vec![AdSlot::Podcast],
        },
    ];
    assert!(TaskGrouping::from_tasks(GroupingKind::Modality, overlap).is_err());
    let gap = vec![Task {
        name: "a".into(),
        slots: vec![AdSlot::Podcast],
    }];
    let err = TaskGrouping::from_tasks(GroupingKind::Single, gap).unwrap_err();
    assert!(err.to_string().contains("StreamAudio"));
}

#[test]
fn cross_layer_identities_and_hand_example() {
    let x0 = [0.3, -1.0, 2.0];
    let xl = [1.5, 0.25, -0.75];
    let w1 = Tensor::from_rows(&[[0.2, -0.4, 1.0], [0.5, 0.5, 0.5]]).unwrap();
    let w2_zero = Tensor::zeros(&[3, 2]);
    let w2 = Tensor::from_rows(&[[1.0, 0.0], [0.5, -1.0], [2.0, 1.0]]).unwrap();
    let b = [0.1, -0.2];
    assert_eq!(cross_layer(&x0, &xl, &w1, &w2_zero, &b).unwrap(), xl);
    assert_eq!(cross_layer(&[0.0; 3], &xl, &w1, &w2, &b).unwrap(), xl);

    let out = cross_layer(
        &[1.0, 2.0],
        &[1.0, 1.0],
        &Tensor::from_rows(&[[1.0, 0.0]]).unwrap(),
        &Tensor::from_rows(&[[1.0], [1.0]]).unwrap(),
        &[0.0],
    )
    .unwrap();
    assert_eq!(out, vec![2.0, 3.0]);

    let err = cross_layer(&x0, &xl[..2], &w1, &w2, &b).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "cross_layer", .. }));
}

#[test]
fn build_is_deterministic_and_structured() {
    let a = CamoeModel::build(TaskGrouping::new(GroupingKind::Modality), small_config(), 3).unwrap();
    let b = CamoeModel::build(TaskGrouping::new(GroupingKind::Modality), small_config(), 3).unwrap();
    assert_eq!(a.params().flatten(), b.params().flatten());
    assert_eq!(a.num_tasks(), 2);
    assert_eq!(a.params().iter().filter(|p| p.name.starts_with("gate")).count(), 2 * 2);
    assert_eq!(a.params().iter().filter(|p| p.name.ends_with(".l1.w")).count(), 2);

    let p = CamoeModel::build(TaskGrouping::new(GroupingKind::PerSlot), small_config(), 3).unwrap();
    assert_eq!(
        p.params()
            .iter()
            .filter(|p| p.name.starts_with("gate") && p.name.ends_with(".w"))
            .count(),
        7
    );
    assert_eq!(
        p.params()
            .iter()
            .filter(|p| p.name.starts_with("tower") && p.name.ends_with(".l1.w"))
            .count(),
        7
    );
    assert!(p.param_count() > a.param_count());

    let zero = ModelConfig {
        experts: 0,
        ..small_config()
    };
    assert!(CamoeModel::build(TaskGrouping::new(GroupingKind::PerSlot), zero, 0).is_err());
    let other = CamoeModel::build(TaskGrouping::new(GroupingKind::Modality), small_config(), 4).unwrap();
    assert_ne!(a.params().flatten(), other.params().flatten());
}

#[test]
fn mlp_experts_have_no_cross_parameters() {
    let cfg = ModelConfig {
        expert_kind: ExpertKind::Mlp,
        ..small_config()
    };
    let m = CamoeModel::build(TaskGrouping::new(GroupingKind::Modality), cfg, 0).unwrap();
    assert!(m.params().iter().all(|p| !p.name.contains("cross")));
}

#[test]
fn expert_with_zero_projection_outputs_zero() {
    let mut m = CamoeModel::build(TaskGrouping::new(GroupingKind::Modality), small_config(), 1).unwrap();
    for p in m.params_mut().iter_mut().filter(|p| p.name.starts_with("expert0.proj")) {
        p.value.data_mut().fill(0.0);
    }
    let x0 = random_batch(3, 6, 2);
    let out = m.expert_forward(0, &x0).unwrap();
    assert_eq!(out.shape(), [3, 4]);
    assert!(out.data().iter().all(|&v| v == 0.0));
    assert_eq!(m.expert_forward(1, &x0).unwrap().shape(), [3, 4]);
}

#[test]
fn single_cross_layer_expert_matches_manual_composition() {
    let cfg = ModelConfig {
        feature_dim: 3,
        embed_dim: 3,
        experts: 1,
        expert_dim: 2,
        branches: 1,
        cross_layers: 1,
        cross_rank: 2,
        deep_layers: vec![2],
        tower_layers: vec![],
        ..Default::default()
    };
    let m = CamoeModel::build(TaskGrouping::new(GroupingKind::Single), cfg, 11).unwrap();
    let p = |name: &str| m.params().by_name(name).unwrap().value.clone();
    let x0 = [0.7, -1.1, 0.4];

    let (w1, w2, cb) = (
        p("expert0.branch0.cross0.w1"),
        p("expert0.branch0.cross0.w2"),
        p("expert0.branch0.cross0.b"),
    );
    let hidden: Vec<f64> = (0..2)
        .map(|r| ((0..3).map(|j| w1.get(r, j) * x0[j]).sum::<f64>() + cb.data()[r]).max(0.0))
        .collect();
    let cross: Vec<f64> = (0..3)
        .map(|i| x0[i] + x0[i] * (0..2).map(|r| w2.get(i, r) * hidden[r]).sum::<f64>())
        .collect();
    let (dw, db) = (p("expert0.branch0.deep0.w"), p("expert0.branch0.deep0.b"));
    let deep: Vec<f64> = (0..2)
        .map(|o| ((0..3).map(|j| dw.get(o, j) * x0[j]).sum::<f64>() + db.data()[o]).max(0.0))
        .collect();
    let cat: Vec<f64> = cross.into_iter().chain(deep).collect();
    let (pw, pb) = (p("expert0.proj.w"), p("expert0.proj.b"));
    let want: Vec<f64> = (0..2)
        .map(|o| (0..5).map(|j| pw.get(o, j) * cat[j]).sum::<f64>() + pb.data()[o])
        .collect();

    let got = m.expert_forward(0, &Tensor::row(&x0).unwrap()).unwrap();
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn all_ones_mask_is_bit_identical() {
    let m = CamoeModel::build(TaskGrouping::new(GroupingKind::Modality), small_config(), 5).unwrap();
    let x = random_batch(64, 5, 6);
    let plain = m.predict(&x, None).unwrap();
    let ones = m.predict(&x, Some(&ExpertMask::all_ones(2))).unwrap();
    assert_eq!(bits(&plain), bits(&ones));
}

#[test]
fn masked_expert_parameters_do_not_matter() {
    let m = CamoeModel::build(TaskGrouping::new(GroupingKind::Modality), small_config(), 5).unwrap();
    let x = random_batch(16, 5, 7);
    let mask = ExpertMask::new(vec![1, 0]).unwrap();
    let before = m.predict(&x, Some(&mask)).unwrap();
    let mut changed = m.clone();
    for id in changed.expert_param_ids(1) {
        changed
            .params_mut()
            .get_mut(id)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = *v * 37.0 - 4.0);
    }
    assert_eq!(bits(&before), bits(&changed.predict(&x, Some(&mask)).unwrap()));
    assert_ne!(
        bits(&m.predict(&x, None).unwrap()),
        bits(&changed.predict(&x, None).unwrap())
    );
}

#[test]
fn mask_validation() {
    assert!(ExpertMask::new(vec![0, 0]).is_err());
    assert!(ExpertMask::new(vec![1, 2]).is_err());
    let m = CamoeModel::build(TaskGrouping::new(GroupingKind::Modality), small_config(), 5).unwrap();
    let x = random_batch(4, 5, 8);
    assert!(m.predict(&x, Some(&ExpertMask::all_ones(3))).is_err());
}

#[test]
fn two_task_forward_shapes_and_range() {
    let m = CamoeModel::build(TaskGrouping::new(GroupingKind::Modality), small_config(), 9).unwrap();
    let probs = m.predict(&random_batch(4, 5, 10), None).unwrap();
    assert_eq!(probs.len(), 2);
    for p in &probs {
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }
    assert!(m.predict(&random_batch(4, 4, 10), None).is_err());
}

#[test]
fn gates_are_distributions_and_shift_invariant() {
    let m = CamoeModel::build(TaskGrouping::new(GroupingKind::Modality), small_config(), 12).unwrap();
    let x = random_batch(50, 5, 13);
    let gates = m.gate_weights(&x).unwrap();
    for g in &gates {
        for r in 0..g.rows() {
            let s: f64 = g.row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    let mut shifted = m.clone();
    for p in shifted
        .params_mut()
        .iter_mut()
        .filter(|p| p.name.starts_with("gate") && p.name.ends_with(".b"))
    {
        p.value.data_mut().iter_mut().for_each(|v| *v += 3.25);
    }
    for (a, b) in gates.iter().zip(shifted.gate_weights(&x).unwrap()) {
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut m = CamoeModel::build(TaskGrouping::new(GroupingKind::Content), small_config(), 14).unwrap();
    m.set_temperature(1, 1.7).unwrap();
    m.update_running_stats(&BatchStats {
        mean: vec![0.1; 6],
        var: vec![1.0 / 3.0; 6],
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let bits_of = |m: &CamoeModel| m.params().flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits_of(&m), bits_of(&back));
    assert_eq!(back.temperatures(), m.temperatures());
    assert_eq!(back.running_stats(), m.running_stats());
    assert_eq!(back.grouping(), m.grouping());
    let x = random_batch(8, 5, 15);
    assert_eq!(
        bits(&m.predict(&x, None).unwrap()),
        bits(&back.predict(&x, None).unwrap())
    );
}

#[test]
fn chunked_inference_matches_single_graph() {
    let m = CamoeModel::build(TaskGrouping::new(GroupingKind::Modality), small_config(), 16).unwrap();
    let x = random_batch(INFER_CHUNK + 37, 5, 17);
    let chunked = m.logits(&x, None).unwrap();
    let mut g = Graph::new();
    let vars = g.bind(m.params()).unwrap();
    let xv = g.leaf(x.clone()).unwrap();
    let fw = m.forward_graph(&mut g, &vars, xv, BnMode::Infer, None).unwrap();
    for (t, l) in fw.logits.iter().enumerate() {
        for (a, b) in g.value(*l).data().iter().zip(&chunked[t]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_w2_stack_is_identity(depth in 1usize..=5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let r = 2;
        let mut vals = |n: usize| (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>();
        let x0 = vals(d);
        let xl0 = vals(d);
        let mut xl = xl0.clone();
        for _ in 0..depth {
            let w1 = Tensor::matrix(r, d, vals(r * d)).unwrap();
            let b = vals(r);
            xl = cross_layer(&x0, &xl, &w1, &Tensor::zeros(&[d, r]), &b).unwrap();
        }
        prop_assert_eq!(xl, xl0);
    }

    #[test]
    fn forward_is_permutation_equivariant(seed in 0u64..500) {
        let m = CamoeModel::build(TaskGrouping::new(GroupingKind::Modality), small_config(), seed).unwrap();
        let x = random_batch(12, 5, seed + 1);
        let mut perm: Vec<usize> = (0..12).collect();
        perm.rotate_left((seed % 11) as usize + 1);
        perm.swap(0, 5);
        let base = m.logits(&x, None).unwrap();
        let permuted = m.logits(&x.select_rows(&perm), None).unwrap();
        for t in 0..2 {
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((permuted[t][i] - base[t][p]).abs() < 1e-12);
            }
        }
    }
}
