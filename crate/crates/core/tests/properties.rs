// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use headlens::correct::{
    classify, knowledge_inject, mean_ablate, CorrectionPlan, DiscriminativeVectors,
};
use headlens::interpret::{
    shapley_text, spatial_heatmap, LinearProvider, ShapleyMethod, ShapleyOptions, StateKind,
};
use headlens::locate::{
    aggregate_importance, gamma_threshold, locate_states, partition_groups, raw_importance,
    select_pstar, ContributionMap, Normalization,
};
use headlens::metrics::{bias_metric, group_metrics, max_skew};
use headlens::vit::{forward_decomposed, Patches, ViTConfig, ViTWeights};
use headlens::{
    read_store, write_store, ActivationRecord, BankKind, DatasetManifest, HeadSet, HeadSetKind,
    HeadTensor, ModelSpec, ReadOptions, SampleMeta, Split, Subgroup, TextBank, TokenTensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const L: usize = 3;
const H: usize = 2;
const D: usize = 4;

fn vecf(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-2.0f32..2.0, n)
}

fn record(id: usize) -> impl Strategy<Value = ActivationRecord> {
    (vecf(L * H * D), vecf(D)).prop_map(move |(c, base)| {
        let contributions = HeadTensor::from_vec(L, H, D, c).unwrap();
        let mut full: Vec<f64> = contributions.sum_heads();
        full.iter_mut()
            .zip(&base)
            .for_each(|(a, &b)| *a += f64::from(b));
        ActivationRecord {
            sample_id: format!("r{id:03}"),
            contributions,
            token_contributions: None,
            residual_base: base,
            full_embedding: full.into_iter().map(|x| x as f32).collect(),
        }
    })
}

fn records(n: usize) -> impl Strategy<Value = Vec<ActivationRecord>> {
    (0..n).map(record).collect::<Vec<_>>()
}

fn one_hot_maps() -> impl Strategy<Value = Vec<ContributionMap>> {
    prop::collection::vec(0..L * H, 1..30).prop_map(|idx| {
        idx.into_iter()
            .map(|i| {
                let mut values = vec![0.0; L * H];
                values[i] = 1.0;
                ContributionMap {
                    layers: L,
                    heads: H,
                    values,
                    normalization: Normalization::OneHot,
                }
            })
            .collect()
    })
}

fn positions() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::sample::subsequence(
        (0..L)
            .flat_map(|l| (0..H).map(move |h| (l, h)))
            .collect::<Vec<_>>(),
        0..=L * H,
    )
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn meta(classes: &[(usize, usize)]) -> Vec<SampleMeta> {
    classes
        .iter()
        .enumerate()
        .map(|(i, &(c, s))| SampleMeta {
            sample_id: format!("{i:03}"),
            class_index: c,
            spurious_index: s,
            split: Split::Test,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn importance_ignores_positive_scaling(r in record(0), ty in vecf(D), tb in vecf(D), scale in 0.1f32..10.0) {
        let a = raw_importance(&r, &ty, &tb).unwrap();
        let mut scaled = r.clone();
        let data: Vec<f32> = r.contributions.as_slice().iter().map(|x| x * scale).collect();
        scaled.contributions = HeadTensor::from_vec(L, H, D, data).unwrap();
        let b = raw_importance(&scaled, &ty, &tb).unwrap();
        // the argmax only moves under exact ties broken by rounding
        let gap = {
            let mut v = a.values.clone();
            v.sort_by(|x, y| y.total_cmp(x));
            v[0] - v[1]
        };
        prop_assume!(gap > 1e-3);
        prop_assert_eq!(a.one_hot(), b.one_hot());
    }

    #[test]
    fn aggregate_sums_to_one(maps in one_hot_maps()) {
        let agg = aggregate_importance(&maps).unwrap();
        prop_assert!((agg.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(agg.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn located_sets_are_disjoint_and_threshold_monotone(a in one_hot_maps(), b in one_hot_maps(), extra in 0.0f64..0.5) {
        let (va, vb) = (aggregate_importance(&a).unwrap(), aggregate_importance(&b).unwrap());
        let gamma = gamma_threshold(&select_pstar(&va), &select_pstar(&vb)).unwrap();
        let (ps, py) = locate_states(&va, &vb, gamma).unwrap();
        prop_assert!(ps.positions.iter().all(|p| !py.contains(*p)));
        let (ps2, py2) = locate_states(&va, &vb, gamma + extra).unwrap();
        prop_assert!(ps2.positions.iter().all(|p| ps.contains(*p)));
        prop_assert!(py2.positions.iter().all(|p| py.contains(*p)));
        // swapping the subgroups swaps the sets
        let (qs, qy) = locate_states(&vb, &va, gamma).unwrap();
        prop_assert_eq!(qs.positions, py.positions);
        prop_assert_eq!(qy.positions, ps.positions);
    }

    #[test]
    fn partition_covers_every_sample(cells in prop::collection::vec((0usize..2, 0usize..2), 1..40), preds in prop::collection::vec(prop::option::of(0usize..2), 40)) {
        let samples = meta(&cells);
        let n = samples.len();
        let manifest = DatasetManifest::new(samples, vec!["a".into(), "b".into()], vec!["x".into(), "y".into()]).unwrap();
        let groups = partition_groups(&manifest, &preds[..n], &[0, 1]).unwrap();
        prop_assert_eq!(groups.len(), n);
        for (g, p) in groups.iter().zip(&preds) {
            let expect = match (g.spurious_index == g.class_index, p.map(|p| p == g.class_index)) {
                (_, None) => Subgroup::Unknown,
                (true, Some(true)) => Subgroup::PositiveCorrect,
                (true, Some(false)) => Subgroup::PositiveWrong,
                (false, Some(true)) => Subgroup::NegativeCorrect,
                (false, Some(false)) => Subgroup::NegativeWrong,
            };
            prop_assert_eq!(g.subgroup, expect);
        }
    }

    #[test]
    fn mean_ablation_is_idempotent_and_keeps_the_mean(rs in records(6), ps in positions()) {
        let p_s = HeadSet::new(HeadSetKind::Spurious, ps.clone(), L, H).unwrap();
        let vectors = DiscriminativeVectors { vectors: vec![], source_labels: vec![] };
        let plan = CorrectionPlan::new(p_s, HeadSet::empty(HeadSetKind::Target), &rs, vectors.clone()).unwrap();
        let once: Vec<_> = rs.iter().map(|r| mean_ablate(r, &plan).unwrap()).collect();
        let twice: Vec<_> = once.iter().map(|r| mean_ablate(r, &plan).unwrap()).collect();
        prop_assert_eq!(&once, &twice);
        for &pos in &ps {
            for k in 0..D {
                let before: f64 = rs.iter().map(|r| f64::from(r.contributions.get(pos)[k])).sum::<f64>() / 6.0;
                let after: f64 = once.iter().map(|r| f64::from(r.contributions.get(pos)[k])).sum::<f64>() / 6.0;
                prop_assert!((before - after).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn injection_touches_only_targets(rs in records(2), py in positions(), u in vecf(D)) {
        let u: Vec<f64> = u.into_iter().map(f64::from).collect();
        prop_assume!(u.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let p_y = HeadSet::new(HeadSetKind::Target, py, L, H).unwrap();
        let vectors = DiscriminativeVectors { vectors: vec![unit(&u)], source_labels: vec![("a".into(), "b".into())] };
        let plan = CorrectionPlan::new(HeadSet::empty(HeadSetKind::Spurious), p_y.clone(), &rs, vectors).unwrap();
        let out = knowledge_inject(&rs[0], &plan).unwrap();
        for (pos, before) in rs[0].contributions.iter() {
            if !p_y.contains(pos) {
                prop_assert_eq!(before, out.contributions.get(pos));
            }
        }
        prop_assert_eq!(&out.residual_base, &rs[0].residual_base);
    }

    #[test]
    fn classification_ignores_embedding_scale(e in vecf(D), scale in 0.01f32..100.0, bank in prop::collection::vec(vecf(D), 3)) {
        prop_assume!(e.iter().map(|x| x * x).sum::<f32>() > 1e-2);
        prop_assume!(bank.iter().all(|v| v.iter().map(|x| x * x).sum::<f32>() > 1e-2));
        let bank = TextBank::new(BankKind::ClassPrompt, bank.into_iter().enumerate().map(|(i, v)| (format!("c{i}"), v)).collect()).unwrap();
        let a = classify("x", &e, &bank, 1.0).unwrap();
        let scaled: Vec<f32> = e.iter().map(|x| x * scale).collect();
        let b = classify("x", &scaled, &bank, 1.0).unwrap();
        let mut sorted = a.logits.clone();
        sorted.sort_by(|x, y| y.total_cmp(x));
        prop_assume!(sorted[0] - sorted[1] > 1e-4);
        prop_assert_eq!(a.predicted, b.predicted);
        prop_assert!((a.margin - b.margin).abs() < 1e-4);
    }

    #[test]
    fn group_metrics_ignore_sample_order(cells in prop::collection::vec((0usize..3, 0usize..2, 0usize..3), 1..40), seed in any::<u64>()) {
        let samples = meta(&cells.iter().map(|&(c, s, _)| (c, s)).collect::<Vec<_>>());
        let preds: Vec<usize> = cells.iter().map(|c| c.2).collect();
        let a = group_metrics(&samples, &preds, 3, 2).unwrap();
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(&mut idx[..], &mut rng);
        let s2: Vec<_> = idx.iter().map(|&i| samples[i].clone()).collect();
        let p2: Vec<_> = idx.iter().map(|&i| preds[i]).collect();
        let b = group_metrics(&s2, &p2, 3, 2).unwrap();
        prop_assert_eq!(a.worst_group, b.worst_group);
        prop_assert!((a.average - b.average).abs() < 1e-12);
    }

    #[test]
    fn bias_is_symmetric_in_gender(cells in prop::collection::vec((0usize..3, 0usize..2, 0usize..3), 4..40)) {
        let samples = meta(&cells.iter().map(|&(c, s, _)| (c, s)).collect::<Vec<_>>());
        let preds: Vec<usize> = cells.iter().map(|c| c.2).collect();
        let swapped: Vec<_> = samples.iter().map(|m| SampleMeta { spurious_index: 1 - m.spurious_index, ..m.clone() }).collect();
        match (bias_metric(&samples, &preds, 3, 2), bias_metric(&swapped, &preds, 3, 2)) {
            (Ok(a), Ok(b)) => {
                prop_assert!((a.overall_bias - b.overall_bias).abs() < 1e-9);
                prop_assert!((0.0..=100.0).contains(&a.overall_bias));
            }
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn skew_is_bounded(groups in prop::collection::vec(0usize..3, 1..30), k in 1usize..30) {
        let ids: Vec<String> = (0..groups.len()).map(|i| i.to_string()).collect();
        let k = k.min(ids.len());
        let of: HashMap<String, usize> = ids.iter().cloned().zip(groups.iter().copied()).collect();
        let r = max_skew(std::slice::from_ref(&ids), &of, k, 3).unwrap();
        prop_assert!(r.mean_skew >= -1e-12);
        prop_assert!(r.mean_skew <= 100.0 * 3f64.ln() + 1e-9);
    }

    #[test]
    fn heatmaps_are_linear_in_text(tokens in vecf(L * H * 5 * D), t1 in vecf(D), t2 in vecf(D), a in -3.0f32..3.0) {
        let tt = TokenTensor::from_vec(L, H, 5, D, tokens).unwrap();
        let r = ActivationRecord {
            sample_id: "x".into(),
            contributions: HeadTensor::zeros(L, H, D),
            token_contributions: Some(tt),
            residual_base: vec![0.0; D],
            full_embedding: vec![1.0; D],
        };
        let heads = HeadSet::new(HeadSetKind::Target, vec![(0, 1), (2, 0)], L, H).unwrap();
        let mix: Vec<f32> = t1.iter().zip(&t2).map(|(x, y)| a * x + y).collect();
        let h1 = spatial_heatmap(&r, &heads, &t1, StateKind::Target).unwrap();
        let h2 = spatial_heatmap(&r, &heads, &t2, StateKind::Target).unwrap();
        let hm = spatial_heatmap(&r, &heads, &mix, StateKind::Target).unwrap();
        for ((x, y), m) in h1.values.iter().zip(&h2.values).zip(&hm.values) {
            prop_assert!((f64::from(a) * x + y - m).abs() < 1e-3);
        }
    }

    #[test]
    fn sampled_shapley_is_deterministic(tokens in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..12), state in prop::collection::vec(-1.0f64..1.0, 3), seed in any::<u64>()) {
        let p = LinearProvider { token_vectors: tokens };
        let opts = ShapleyOptions { method: ShapleyMethod::Sampled, n_permutations: 50, seed };
        let a = shapley_text("s", &state, &p, StateKind::Full, opts).unwrap();
        let b = shapley_text("s", &state, &p, StateKind::Full, opts).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn store_round_trips(rs in records(5)) {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec { n_layers: L, n_heads: H, n_tokens: 4, embed_dim: H * 2, joint_dim: D };
        write_store(&rs, &spec, dir.path()).unwrap();
        let back = read_store(dir.path(), ReadOptions::default()).unwrap();
        prop_assert_eq!(back.spec, spec);
        prop_assert_eq!(back.records, rs);
    }

    #[test]
    fn decomposition_sums_to_the_embedding(seed in any::<u64>(), layers in 1usize..4, heads in 1usize..4, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ViTConfig { n_layers: layers, n_heads: heads, d_model: heads * 4, d_ff: 8, patch_dim: 3, joint_dim: 5, layer_norm: true };
        let w = ViTWeights::random(cfg, &mut rng);
        let p = Patches::random(n, 3, &mut rng);
        let (_, r) = forward_decomposed(&w, &p, "x", true).unwrap();
        prop_assert!(r.reconstruction_error() < 1e-4);
        prop_assert!(r.token_sum_error().unwrap() < 1e-5);
    }
}
