//! Embedding objective: pixels of one object should point the same way
//! (cosine similarity), while the mean vectors of neighbouring objects should
//! not. The minimised quantity is `w_inter · l_inter − w_intra · l_intra`.
//!
//! Both terms are averaged: pairwise terms per object, object terms per image.
//! `l_intra` uses raw cosine; `l_inter` optionally remaps cosine to `[0, 1]`
//! via `(1 + cos) / 2`. When the graph includes the background pseudo-object
//! (id 0), it takes part in both terms like any other object.

use crate::activation::{activate, activate_vjp, EmbeddingMap};
use crate::error::{Error, Result};
use crate::graph::ObjectGraph;
use crate::imgdata::LabelImage;

/// Added to vector norms inside every cosine.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub w_intra: f64,
    pub w_inter: f64,
    /// Map inter-object cosine through `(1 + cos) / 2`.
    pub remap_inter: bool,
    /// Apply the loss after the output activation rather than to raw logits.
    pub post_activation: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_intra: 1.0,
            w_inter: 1.0,
            remap_inter: true,
            post_activation: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_intra: f64,
    pub l_inter: f64,
    pub total: f64,
    /// `(id, μ(id))` for every object taking part, in id order.
    pub per_object_means: Vec<(u32, Vec<f64>)>,
    /// Set when the image has no foreground objects; all terms are then 0.
    pub background_only: bool,
}

impl LossBreakdown {
    fn empty() -> Self {
        LossBreakdown {
            l_intra: 0.0,
            l_inter: 0.0,
            total: 0.0,
            per_object_means: Vec::new(),
            background_only: true,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a·b / ((‖a‖ + ε)(‖b‖ + ε))`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / ((norm(a) + NORM_EPS) * (norm(b) + NORM_EPS))
}

/// ∂cosine(x, y)/∂x.
fn cosine_grad(x: &[f64], y: &[f64]) -> Vec<f64> {
    let nx = norm(x);
    let fx = nx + NORM_EPS;
    let fy = norm(y) + NORM_EPS;
    let xy = dot(x, y);
    let radial = if nx > 0.0 { xy / (fx * fx * fy * nx) } else { 0.0 };
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| yi / (fx * fy) - radial * xi)
        .collect()
}

fn check_shapes(emb: &EmbeddingMap, lbl: &LabelImage) -> Result<()> {
    if emb.height() != lbl.height() || emb.width() != lbl.width() {
        return Err(Error::Shape {
            expected: format!("{}x{}", lbl.height(), lbl.width()),
            got: format!("{}x{}", emb.height(), emb.width()),
        });
    }
    Ok(())
}

/// Pixel indices per id `0..=max_id`.
fn pixel_lists(lbl: &LabelImage) -> Vec<Vec<usize>> {
    let mut lists = vec![Vec::new(); lbl.max_id() as usize + 1];
    for (i, &l) in lbl.labels().iter().enumerate() {
        lists[l as usize].push(i);
    }
    lists
}

fn mean_of(emb: &EmbeddingMap, pixels: &[usize]) -> Vec<f64> {
    let mut mu = vec![0.0; emb.k()];
    for &p in pixels {
        for (m, v) in mu.iter_mut().zip(emb.pixel(p)) {
            *m += v;
        }
    }
    let n = pixels.len() as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    mu
}

/// Mean embedding over the pixels of `object_id`.
pub fn mean_feature(emb: &EmbeddingMap, lbl: &LabelImage, object_id: u32) -> Result<Vec<f64>> {
    check_shapes(emb, lbl)?;
    let pixels: Vec<usize> = lbl
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == object_id)
        .map(|(i, _)| i)
        .collect();
    if pixels.is_empty() {
        return Err(Error::Data(format!("object {object_id} has no pixels")));
    }
    Ok(mean_of(emb, &pixels))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let f = norm(v) + NORM_EPS;
    v.iter().map(|x| x / f).collect()
}

/// Mean pairwise cosine over ordered pixel pairs `p ≠ q`, via
/// `(‖Σ û‖² − Σ ‖û‖²) / (n(n − 1))`. Single-pixel objects score 1.
fn object_intra(emb: &EmbeddingMap, pixels: &[usize]) -> f64 {
    let n = pixels.len();
    if n < 2 {
        return 1.0;
    }
    let mut sum = vec![0.0; emb.k()];
    let mut self_sq = 0.0;
    for &p in pixels {
        let u = unit(emb.pixel(p));
        self_sq += dot(&u, &u);
        for (s, x) in sum.iter_mut().zip(&u) {
            *s += x;
        }
    }
    (dot(&sum, &sum) - self_sq) / (n * (n - 1)) as f64
}

/// Objects that take part in the loss: present foreground ids, plus the
/// background when the graph carries it and it has pixels.
fn participants(lists: &[Vec<usize>], with_background: bool) -> Vec<u32> {
    lists
        .iter()
        .enumerate()
        .filter(|(id, px)| !px.is_empty() && (*id > 0 || with_background))
        .map(|(id, _)| id as u32)
        .collect()
}

/// `l_intra` over the foreground objects of `lbl`.
pub fn intra_similarity(emb: &EmbeddingMap, lbl: &LabelImage) -> Result<f64> {
    check_shapes(emb, lbl)?;
    let lists = pixel_lists(lbl);
    let objects = participants(&lists, false);
    if objects.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = objects
        .iter()
        .map(|&id| object_intra(emb, &lists[id as usize]))
        .sum();
    Ok(s / objects.len() as f64)
}

fn pair_score(c: f64, remap: bool) -> f64 {
    if remap {
        0.5 * (1.0 + c)
    } else {
        c
    }
}

/// Present neighbours of every participant (same order as `objects`).
fn present_neighbors(g: &ObjectGraph, objects: &[u32], lists: &[Vec<usize>]) -> Vec<Vec<u32>> {
    objects
        .iter()
        .map(|&i| {
            g.neighbors(i)
                .iter()
                .copied()
                .filter(|&j| {
                    (j as usize) < lists.len()
                        && !lists[j as usize].is_empty()
                        && (j > 0 || g.includes_background())
                })
                .collect()
        })
        .collect()
}

fn inter_value(
    means: &[Vec<f64>],
    slot: &[usize],
    objects: &[u32],
    nbrs: &[Vec<u32>],
    remap: bool,
) -> f64 {
    let mut s = 0.0;
    for (a, ns) in nbrs.iter().enumerate() {
        if ns.is_empty() {
            continue;
        }
        let mut t = 0.0;
        for &j in ns {
            t += pair_score(cosine(&means[a], &means[slot[j as usize]]), remap);
        }
        s += t / ns.len() as f64;
    }
    s / objects.len() as f64
}

/// `l_inter`: per object, mean similarity between its mean feature and each
/// neighbour's; objects without neighbours add 0; averaged over objects.
pub fn inter_similarity(emb: &EmbeddingMap, lbl: &LabelImage, g: &ObjectGraph, remap: bool) -> Result<f64> {
    check_shapes(emb, lbl)?;
    let lists = pixel_lists(lbl);
    let objects = participants(&lists, g.includes_background());
    if objects.is_empty() {
        return Ok(0.0);
    }
    let (means, slot) = object_means(emb, &lists, &objects);
    let nbrs = present_neighbors(g, &objects, &lists);
    Ok(inter_value(&means, &slot, &objects, &nbrs, remap))
}

fn object_means(emb: &EmbeddingMap, lists: &[Vec<usize>], objects: &[u32]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut slot = vec![usize::MAX; lists.len()];
    let means = objects
        .iter()
        .enumerate()
        .map(|(a, &id)| {
            slot[id as usize] = a;
            mean_of(emb, &lists[id as usize])
        })
        .collect();
    (means, slot)
}

/// Loss value and its gradient with respect to `emb`.
pub fn total_loss_grad(
    emb: &EmbeddingMap,
    lbl: &LabelImage,
    g: &ObjectGraph,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, EmbeddingMap)> {
    check_shapes(emb, lbl)?;
    if cfg.w_intra < 0.0 || cfg.w_inter < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    let k = emb.k();
    let mut grad = EmbeddingMap::zeros(emb.height(), emb.width(), k);
    let lists = pixel_lists(lbl);
    if lists.iter().skip(1).all(Vec::is_empty) {
        return Ok((LossBreakdown::empty(), grad));
    }
    let objects = participants(&lists, g.includes_background());
    let n_obj = objects.len() as f64;
    let gv = grad.values_mut();

    // intra
    let mut l_intra = 0.0;
    for &id in &objects {
        let pixels = &lists[id as usize];
        l_intra += object_intra(emb, pixels);
        let n = pixels.len();
        if n < 2 {
            continue;
        }
        let units: Vec<Vec<f64>> = pixels.iter().map(|&p| unit(emb.pixel(p))).collect();
        let mut sum = vec![0.0; k];
        for u in &units {
            for (s, x) in sum.iter_mut().zip(u) {
                *s += x;
            }
        }
        let scale = -cfg.w_intra / n_obj * 2.0 / (n * (n - 1)) as f64;
        for (&p, u) in pixels.iter().zip(&units) {
            let a = emb.pixel(p);
            let du: Vec<f64> = sum.iter().zip(u).map(|(s, x)| scale * (s - x)).collect();
            let r = norm(a);
            let f = r + NORM_EPS;
            let radial = if r > 0.0 { dot(a, &du) / (r * f * f) } else { 0.0 };
            for c in 0..k {
                gv[p * k + c] += du[c] / f - radial * a[c];
            }
        }
    }
    l_intra /= n_obj;

    // inter
    let (means, slot) = object_means(emb, &lists, &objects);
    let nbrs = present_neighbors(g, &objects, &lists);
    let l_inter = inter_value(&means, &slot, &objects, &nbrs, cfg.remap_inter);
    let ds_dc = if cfg.remap_inter { 0.5 } else { 1.0 };
    for (a, ns) in nbrs.iter().enumerate() {
        if ns.is_empty() {
            continue;
        }
        let mut dmu = vec![0.0; k];
        for &j in ns {
            let b = slot[j as usize];
            let weight = 1.0 / ns.len() as f64 + 1.0 / nbrs[b].len() as f64;
            let dc = cosine_grad(&means[a], &means[b]);
            for (d, x) in dmu.iter_mut().zip(dc) {
                *d += weight * ds_dc * x;
            }
        }
        let pixels = &lists[objects[a] as usize];
        let scale = cfg.w_inter / n_obj / pixels.len() as f64;
        for &p in pixels {
            for c in 0..k {
                gv[p * k + c] += scale * dmu[c];
            }
        }
    }

    let breakdown = LossBreakdown {
        l_intra,
        l_inter,
        total: cfg.w_inter * l_inter - cfg.w_intra * l_intra,
        per_object_means: objects.iter().copied().zip(means).collect(),
        background_only: false,
    };
    Ok((breakdown, grad))
}

/// Loss value only.
pub fn total_loss(emb: &EmbeddingMap, lbl: &LabelImage, g: &ObjectGraph, cfg: &LossConfig) -> Result<LossBreakdown> {
    total_loss_grad(emb, lbl, g, cfg).map(|(b, _)| b)
}

/// Loss on raw network logits: activates with `alpha` first when
/// `cfg.post_activation` is set. Returns the gradient w.r.t. the raw logits.
pub fn loss_on_logits(
    raw: &EmbeddingMap,
    lbl: &LabelImage,
    g: &ObjectGraph,
    cfg: &LossConfig,
    alpha: f64,
) -> Result<(LossBreakdown, EmbeddingMap)> {
    if cfg.post_activation {
        let act = activate(raw, alpha);
        let (b, grad) = total_loss_grad(&act, lbl, g, cfg)?;
        Ok((b, activate_vjp(raw, alpha, &grad)))
    } else {
        total_loss_grad(raw, lbl, g, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_adjacency;

    fn map(h: usize, w: usize, px: &[[f64; 4]]) -> EmbeddingMap {
        EmbeddingMap::new(h, w, 4, px.concat()).unwrap()
    }

    #[test]
    fn singleton_and_pair_means() {
        let lbl = LabelImage::from_rows(&[&[1, 2, 2]]).unwrap();
        let emb = map(1, 3, &[[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]);
        assert_eq!(mean_feature(&emb, &lbl, 1).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(mean_feature(&emb, &lbl, 2).unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
        assert!(mean_feature(&emb, &lbl, 3).is_err());
    }

    #[test]
    fn intra_identical_and_orthogonal() {
        let lbl = LabelImage::from_rows(&[&[1, 1]]).unwrap();
        let same = map(1, 2, &[[0.3, 0.1, 0.0, 0.2]; 2]);
        assert!((intra_similarity(&same, &lbl).unwrap() - 1.0).abs() < 1e-7);
        let orth = map(1, 2, &[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]);
        assert!(intra_similarity(&orth, &lbl).unwrap().abs() < 1e-12);
    }

    #[test]
    fn inter_identical_and_orthogonal() {
        let lbl = LabelImage::from_rows(&[&[1, 2]]).unwrap();
        let g = build_adjacency(&lbl, 1, false).unwrap();
        let same = map(1, 2, &[[0.0, 1.0, 0.0, 0.0]; 2]);
        assert!((inter_similarity(&same, &lbl, &g, true).unwrap() - 1.0).abs() < 1e-7);
        let orth = map(1, 2, &[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]);
        assert!((inter_similarity(&orth, &lbl, &g, true).unwrap() - 0.5).abs() < 1e-12);
        assert!(inter_similarity(&orth, &lbl, &g, false).unwrap().abs() < 1e-12);
    }

    #[test]
    fn constant_map_total_zero() {
        let lbl = LabelImage::from_rows(&[&[0, 1, 1], &[2, 2, 0]]).unwrap();
        let g = build_adjacency(&lbl, 1, true).unwrap();
        let emb = map(2, 3, &[[0.1, 0.4, 0.3, 0.2]; 6]);
        let b = total_loss(&emb, &lbl, &g, &LossConfig::default()).unwrap();
        assert!((b.l_intra - 1.0).abs() < 1e-7);
        assert!((b.l_inter - 1.0).abs() < 1e-7);
        assert!(b.total.abs() < 1e-7);
    }

    #[test]
    fn zero_objects() {
        let lbl = LabelImage::background(2, 2);
        let g = build_adjacency(&lbl, 1, true).unwrap();
        let emb = map(2, 2, &[[0.5, 0.1, 0.2, 0.2]; 4]);
        let b = total_loss(&emb, &lbl, &g, &LossConfig::default()).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(b.background_only);
    }

    #[test]
    fn negative_weights_rejected() {
        let lbl = LabelImage::from_rows(&[&[1]]).unwrap();
        let g = build_adjacency(&lbl, 1, true).unwrap();
        let emb = map(1, 1, &[[1.0, 0.0, 0.0, 0.0]]);
        let cfg = LossConfig {
            w_intra: -1.0,
            ..Default::default()
        };
        assert!(total_loss(&emb, &lbl, &g, &cfg).is_err());
    }
}
