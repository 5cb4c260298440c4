mod common;

use std::collections::BTreeSet;

use fcrseg_core::activation::EmbeddingMap;
use fcrseg_core::graph::build_adjacency;
use fcrseg_core::loss::{
    inter_similarity, intra_similarity, loss_on_logits, mean_feature, total_loss, total_loss_grad, LossConfig,
};
use fcrseg_core::LabelImage;
use proptest::prelude::*;

fn edge_set(g: &fcrseg_core::ObjectGraph) -> BTreeSet<(u32, u32)> {
    g.edges().into_iter().collect()
}

#[test]
fn intra_matches_pairwise_oracle() {
    let mut r = common::rng(21);
    for _ in 0..50 {
        let lbl = common::random_labels(&mut r, 16, 16, 5);
        let emb = common::random_embedding(&mut r, 16, 16, 4, -1.0, 1.0);
        let fast = intra_similarity(&emb, &lbl).unwrap();
        let slow = common::intra_pairwise(&emb, &lbl, false);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    }
}

#[test]
fn intra_with_background_matches_oracle() {
    let mut r = common::rng(22);
    for _ in 0..20 {
        let lbl = common::random_labels(&mut r, 12, 12, 4);
        let emb = common::random_embedding(&mut r, 12, 12, 4, 0.0, 1.0);
        let g = build_adjacency(&lbl, 2, true).unwrap();
        let b = total_loss(&emb, &lbl, &g, &LossConfig::default()).unwrap();
        let with_bg = lbl.labels().contains(&0);
        assert!((b.l_intra - common::intra_pairwise(&emb, &lbl, with_bg)).abs() < 1e-6);
    }
}

#[test]
fn inter_matches_direct_formula() {
    let mut r = common::rng(23);
    for i in 0..40 {
        let lbl = common::random_labels(&mut r, 12, 12, 5);
        let emb = common::random_embedding(&mut r, 12, 12, 4, 0.0, 1.0);
        let bg = i % 2 == 0;
        let g = build_adjacency(&lbl, 1 + i % 3, bg).unwrap();
        let fast = inter_similarity(&emb, &lbl, &g, true).unwrap();
        let slow = common::inter_direct(&emb, &lbl, &edge_set(&g), bg && lbl.labels().contains(&0));
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }
}

#[test]
fn three_object_chain() {
    // 1 - 2 - 3 in a row, no background
    let lbl = LabelImage::from_rows(&[&[1, 1, 2, 2, 3, 3]]).unwrap();
    let g = build_adjacency(&lbl, 1, false).unwrap();
    assert_eq!(g.edges(), vec![(1, 2), (2, 3)]);
    let emb = EmbeddingMap::new(
        1,
        6,
        2,
        vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0],
    )
    .unwrap();
    // μ1 = [1,0], μ2 = [1,1], μ3 = [0,1]; cos(μ1, μ2) = cos(μ2, μ3) = 1/√2
    let c = 0.5 * (1.0 + 1.0 / 2f64.sqrt());
    let expect = (c + c + c) / 3.0;
    assert!((inter_similarity(&emb, &lbl, &g, true).unwrap() - expect).abs() < 1e-7);
}

#[test]
fn mean_feature_matches_summation() {
    let mut r = common::rng(24);
    for _ in 0..10 {
        let lbl = common::random_labels(&mut r, 10, 10, 4);
        let emb = common::random_embedding(&mut r, 10, 10, 4, -2.0, 2.0);
        for id in lbl.instance_ids() {
            let mu = mean_feature(&emb, &lbl, id).unwrap();
            let expect = common::mean_by_sum(&emb, &lbl, id);
            assert!(mu.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }
}

#[test]
fn breakdown_reports_object_means() {
    let lbl = LabelImage::from_rows(&[&[0, 1, 1], &[0, 2, 0]]).unwrap();
    let g = build_adjacency(&lbl, 1, true).unwrap();
    let emb = common::random_embedding(&mut common::rng(2), 2, 3, 4, 0.0, 1.0);
    let b = total_loss(&emb, &lbl, &g, &LossConfig::default()).unwrap();
    let ids: Vec<u32> = b.per_object_means.iter().map(|(id, _)| *id).collect();
    assert_eq!(ids, vec![0, 1, 2]);
    for (id, mu) in &b.per_object_means {
        let expect = common::mean_by_sum(&emb, &lbl, *id);
        assert!(mu.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}

#[test]
fn background_only_sample_is_flagged() {
    let lbl = LabelImage::background(4, 4);
    let g = build_adjacency(&lbl, 1, true).unwrap();
    let emb = common::random_embedding(&mut common::rng(3), 4, 4, 4, 0.0, 1.0);
    let (b, grad) = total_loss_grad(&emb, &lbl, &g, &LossConfig::default()).unwrap();
    assert!(b.background_only);
    assert_eq!(b.total, 0.0);
    assert!(grad.values().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_mismatch_is_rejected() {
    let lbl = LabelImage::background(4, 4);
    let g = build_adjacency(&lbl, 1, true).unwrap();
    let emb = EmbeddingMap::zeros(4, 5, 4);
    assert!(total_loss(&emb, &lbl, &g, &LossConfig::default()).is_err());
}

/// Worst per-entry relative error between two gradients, with entries under
/// `floor` compared on an absolute scale of `floor`.
fn worst_relative(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[test]
fn activated_loss_gradient_matches_central_differences() {
    let mut r = common::rng(25);
    let cfg = LossConfig::default();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let lbl = common::random_labels_at_most(&mut r, 8, 8, 3);
        let g = build_adjacency(&lbl, 1 + case % 3, case % 4 != 0).unwrap();
        let raw = common::normal_embedding(&mut r, 8, 8, 4);
        let alpha = [2.0, 4.0, 8.0][case % 3];
        let (_, grad) = loss_on_logits(&raw, &lbl, &g, &cfg, alpha).unwrap();
        let mut numeric = vec![0.0; raw.values().len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let mut p = raw.clone();
            p.values_mut()[i] += step;
            let mut m = raw.clone();
            m.values_mut()[i] -= step;
            let fp = loss_on_logits(&p, &lbl, &g, &cfg, alpha).unwrap().0.total;
            let fm = loss_on_logits(&m, &lbl, &g, &cfg, alpha).unwrap().0.total;
            *n = (fp - fm) / (2.0 * step);
        }
        let scale = numeric.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        worst = worst.max(worst_relative(grad.values(), &numeric, 1e-3 * scale));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

fn one_hot_map(lbl: &LabelImage, color: &dyn Fn(u32) -> usize, k: usize) -> EmbeddingMap {
    let mut v = vec![0.0; lbl.labels().len() * k];
    for (i, &id) in lbl.labels().iter().enumerate() {
        v[i * k + color(id)] = 1.0;
    }
    EmbeddingMap::new(lbl.height(), lbl.width(), k, v).unwrap()
}

#[test]
fn hard_coloring_minima_are_the_proper_colorings() {
    let mut r = common::rng(26);
    let k = 4;
    let mut checked = 0;
    while checked < 25 {
        let lbl = common::random_labels_at_most(&mut r, 10, 10, 6);
        let g = build_adjacency(&lbl, 1, true).unwrap();
        let nodes: Vec<u32> = common::participant_ids(&lbl, true);
        let edges = edge_set(&g);
        if !common::exhaustive_colorable(&nodes, &edges, k) {
            continue;
        }
        let proper: BTreeSet<Vec<usize>> = common::all_colorings(&nodes, &edges, k)
            .into_iter()
            .map(|c| c.values().copied().collect())
            .collect();
        let mut best = f64::INFINITY;
        let mut totals = Vec::new();
        for code in 0..k.pow(nodes.len() as u32) {
            let mut c = code;
            let assignment: Vec<usize> = nodes
                .iter()
                .map(|_| {
                    let v = c % k;
                    c /= k;
                    v
                })
                .collect();
            let slot = |id: u32| nodes.iter().position(|&n| n == id).unwrap();
            let emb = one_hot_map(&lbl, &|id| assignment[slot(id)], k);
            let t = total_loss(&emb, &lbl, &g, &LossConfig::default()).unwrap().total;
            best = best.min(t);
            totals.push((assignment, t));
        }
        let minima: BTreeSet<Vec<usize>> = totals
            .into_iter()
            .filter(|(_, t)| *t <= best + 1e-12)
            .map(|(a, _)| a)
            .collect();
        assert_eq!(minima, proper);
        checked += 1;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scale_invariance(seed in 0u64..10_000, c in 0.01f64..100.0) {
        let mut r = common::rng(seed);
        let lbl = common::random_labels(&mut r, 8, 8, 4);
        let g = build_adjacency(&lbl, 1, true).unwrap();
        let emb = common::random_embedding(&mut r, 8, 8, 4, 0.05, 1.0);
        let scaled = EmbeddingMap::new(8, 8, 4, emb.values().iter().map(|v| v * c).collect()).unwrap();
        let a = total_loss(&emb, &lbl, &g, &LossConfig::default()).unwrap();
        let b = total_loss(&scaled, &lbl, &g, &LossConfig::default()).unwrap();
        prop_assert!((a.l_intra - b.l_intra).abs() < 1e-6);
        prop_assert!((a.l_inter - b.l_inter).abs() < 1e-6);
    }

    #[test]
    fn channel_permutation_invariance(seed in 0u64..10_000, perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
        let mut r = common::rng(seed);
        let lbl = common::random_labels(&mut r, 8, 8, 4);
        let g = build_adjacency(&lbl, 2, true).unwrap();
        let emb = common::random_embedding(&mut r, 8, 8, 4, -1.0, 1.0);
        let permuted = emb.map_pixels(|v| perm.iter().map(|&c| v[c]).collect());
        let a = total_loss(&emb, &lbl, &g, &LossConfig::default()).unwrap().total;
        let b = total_loss(&permuted, &lbl, &g, &LossConfig::default()).unwrap().total;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn remapped_inter_is_bounded(seed in 0u64..10_000) {
        let mut r = common::rng(seed);
        let lbl = common::random_labels(&mut r, 8, 8, 5);
        let g = build_adjacency(&lbl, 1, true).unwrap();
        let emb = common::random_embedding(&mut r, 8, 8, 4, -1.0, 1.0);
        let v = inter_similarity(&emb, &lbl, &g, true).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
    }
}
