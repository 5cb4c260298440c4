//! Fixtures and brute-force reference implementations shared by the
//! integration tests. Nothing here calls the code under test except to build
//! inputs.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use fcrseg_core::activation::EmbeddingMap;
use fcrseg_core::LabelImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Up to `max_objects` random rectangles painted in order, then split into
/// 4-connected instances with ids `1..=M`.
pub fn random_labels(r: &mut ChaCha8Rng, h: usize, w: usize, max_objects: usize) -> LabelImage {
    let mut px = vec![0u32; h * w];
    let n = r.random_range(1..=max_objects);
    for id in 1..=n as u32 {
        let rh = r.random_range(1..=h.div_ceil(2));
        let rw = r.random_range(1..=w.div_ceil(2));
        let y0 = r.random_range(0..=h - rh);
        let x0 = r.random_range(0..=w - rw);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                px[y * w + x] = id;
            }
        }
    }
    LabelImage::new(h, w, px).unwrap().relabel_connected()
}

/// Like [`random_labels`] but retries until there are between 1 and `max`
/// instances after splitting.
pub fn random_labels_at_most(r: &mut ChaCha8Rng, h: usize, w: usize, max: usize) -> LabelImage {
    loop {
        let l = random_labels(r, h, w, max);
        if (1..=max).contains(&l.num_instances()) {
            return l;
        }
    }
}

pub fn random_embedding(r: &mut ChaCha8Rng, h: usize, w: usize, k: usize, lo: f64, hi: f64) -> EmbeddingMap {
    EmbeddingMap::new(h, w, k, (0..h * w * k).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn normal_embedding(r: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> EmbeddingMap {
    use rand_distr::{Distribution, StandardNormal};
    let v = (0..h * w * k).map(|_| StandardNormal.sample(r)).collect();
    EmbeddingMap::new(h, w, k, v).unwrap()
}

// ---------------------------------------------------------------------------
// loss

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / ((na + 1e-8) * (nb + 1e-8))
}

fn pixels_of(lbl: &LabelImage, id: u32) -> Vec<usize> {
    (0..lbl.labels().len()).filter(|&i| lbl.labels()[i] == id).collect()
}

pub fn mean_by_sum(emb: &EmbeddingMap, lbl: &LabelImage, id: u32) -> Vec<f64> {
    let px = pixels_of(lbl, id);
    (0..emb.k())
        .map(|c| px.iter().map(|&p| emb.pixel(p)[c]).sum::<f64>() / px.len() as f64)
        .collect()
}

/// Object ids taking part: foreground ids with pixels, plus 0 if asked and present.
pub fn participant_ids(lbl: &LabelImage, with_background: bool) -> Vec<u32> {
    let present: BTreeSet<u32> = lbl.labels().iter().copied().collect();
    present.into_iter().filter(|&id| id > 0 || with_background).collect()
}

/// Mean cosine over ordered pairs `p ≠ q`, per object, averaged over objects.
pub fn intra_pairwise(emb: &EmbeddingMap, lbl: &LabelImage, with_background: bool) -> f64 {
    let ids = participant_ids(lbl, with_background);
    let mut total = 0.0;
    for &id in &ids {
        let px = pixels_of(lbl, id);
        if px.len() < 2 {
            total += 1.0;
            continue;
        }
        let mut s = 0.0;
        for &p in &px {
            for &q in &px {
                if p != q {
                    s += cos(emb.pixel(p), emb.pixel(q));
                }
            }
        }
        total += s / (px.len() * (px.len() - 1)) as f64;
    }
    total / ids.len() as f64
}

/// `Σ_i (1/|N(i)|) Σ_j (1 + cos(μ_i, μ_j))/2`, divided by the object count.
pub fn inter_direct(
    emb: &EmbeddingMap,
    lbl: &LabelImage,
    edges: &BTreeSet<(u32, u32)>,
    with_background: bool,
) -> f64 {
    let ids = participant_ids(lbl, with_background);
    let mut total = 0.0;
    for &i in &ids {
        let nbrs: Vec<u32> = ids
            .iter()
            .copied()
            .filter(|&j| edges.contains(&(i.min(j), i.max(j))) && i != j)
            .collect();
        if nbrs.is_empty() {
            continue;
        }
        let mi = mean_by_sum(emb, lbl, i);
        let s: f64 = nbrs
            .iter()
            .map(|&j| 0.5 * (1.0 + cos(&mi, &mean_by_sum(emb, lbl, j))))
            .sum();
        total += s / nbrs.len() as f64;
    }
    total / ids.len() as f64
}

// ---------------------------------------------------------------------------
// graph

/// Every pair of differing labels that occur within Chebyshev distance `r`.
pub fn brute_adjacency(lbl: &LabelImage, r: usize, with_background: bool) -> BTreeSet<(u32, u32)> {
    let (h, w) = (lbl.height(), lbl.width());
    let mut out = BTreeSet::new();
    for y1 in 0..h {
        for x1 in 0..w {
            for y2 in 0..h {
                for x2 in 0..w {
                    if y1.abs_diff(y2) > r || x1.abs_diff(x2) > r {
                        continue;
                    }
                    let (a, b) = (lbl.get(y1, x1), lbl.get(y2, x2));
                    if a == b || (!with_background && (a == 0 || b == 0)) {
                        continue;
                    }
                    out.insert((a.min(b), a.max(b)));
                }
            }
            // pixels just outside the frame are background
            let a = lbl.get(y1, x1);
            let near_edge = y1 < r || x1 < r || y1 + r >= h || x1 + r >= w;
            if with_background && a != 0 && near_edge {
                out.insert((0, a));
            }
        }
    }
    out
}

/// All proper `k`-colourings of the graph on `nodes`, by enumeration.
pub fn all_colorings(nodes: &[u32], edges: &BTreeSet<(u32, u32)>, k: usize) -> Vec<BTreeMap<u32, usize>> {
    let n = nodes.len();
    let total = k.pow(n as u32);
    let mut out = Vec::new();
    for code in 0..total {
        let mut c = code;
        let mut asg = BTreeMap::new();
        for &v in nodes {
            asg.insert(v, c % k);
            c /= k;
        }
        if edges.iter().all(|(a, b)| asg[a] != asg[b]) {
            out.push(asg);
        }
    }
    out
}

pub fn exhaustive_colorable(nodes: &[u32], edges: &BTreeSet<(u32, u32)>, k: usize) -> bool {
    let n = nodes.len();
    (0..k.pow(n as u32)).any(|code| {
        let mut c = code;
        let mut asg = BTreeMap::new();
        for &v in nodes {
            asg.insert(v, c % k);
            c /= k;
        }
        edges.iter().all(|(a, b)| asg[a] != asg[b])
    })
}

// ---------------------------------------------------------------------------
// connected components

/// Breadth-first flood fill of equal values; ids in discovery order.
pub fn flood_fill(values: &[u32], h: usize, w: usize, eight: bool) -> Vec<u32> {
    let mut out = vec![0u32; values.len()];
    let mut next = 0;
    let mut q = VecDeque::new();
    for start in 0..values.len() {
        if out[start] != 0 {
            continue;
        }
        next += 1;
        out[start] = next;
        q.push_back(start);
        while let Some(i) = q.pop_front() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dy == 0 && dx == 0) || (!eight && dy != 0 && dx != 0) {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if out[j] == 0 && values[j] == values[i] {
                        out[j] = next;
                        q.push_back(j);
                    }
                }
            }
        }
    }
    out
}

/// True when the two labelings induce the same partition, with 0 meaning
/// "unlabelled" in both.
pub fn same_partition(a: &[u32], b: &[u32]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut fwd = BTreeMap::new();
    let mut back = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if (x == 0) != (y == 0) {
            return false;
        }
        if x == 0 {
            continue;
        }
        if *fwd.entry(x).or_insert(y) != y || *back.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

// ---------------------------------------------------------------------------
// metrics, straight from the definitions with per-pixel masks

fn mask(lbl: &LabelImage, id: u32) -> Vec<bool> {
    lbl.labels().iter().map(|&v| v == id).collect()
}

fn inter_union(a: &[bool], b: &[bool]) -> (usize, usize) {
    let i = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let u = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    (i, u)
}

fn ids(lbl: &LabelImage) -> Vec<u32> {
    participant_ids(lbl, false)
}

/// Pairs with IoU > 0.5 (unique by the pigeonhole argument).
fn half_matches(pred: &LabelImage, gt: &LabelImage) -> Vec<f64> {
    let mut out = Vec::new();
    for g in ids(gt) {
        for p in ids(pred) {
            let (i, u) = inter_union(&mask(gt, g), &mask(pred, p));
            if u > 0 && i as f64 / u as f64 > 0.5 {
                out.push(i as f64 / u as f64);
            }
        }
    }
    out
}

pub fn f1_oracle(pred: &LabelImage, gt: &LabelImage) -> f64 {
    let tp = half_matches(pred, gt).len() as f64;
    let (ng, np) = (ids(gt).len() as f64, ids(pred).len() as f64);
    if ng + np == 0.0 {
        return 1.0;
    }
    2.0 * tp / (ng + np)
}

pub fn pq_oracle(pred: &LabelImage, gt: &LabelImage) -> f64 {
    let m = half_matches(pred, gt);
    let tp = m.len() as f64;
    let fp = ids(pred).len() as f64 - tp;
    let fn_ = ids(gt).len() as f64 - tp;
    if tp + fp + fn_ == 0.0 {
        return 1.0;
    }
    m.iter().sum::<f64>() / (tp + 0.5 * fp + 0.5 * fn_)
}

/// Kumar et al.: each ground-truth object takes its best-IoU prediction;
/// intersections and unions accumulate; unused predictions join the union.
pub fn aji_oracle(pred: &LabelImage, gt: &LabelImage) -> f64 {
    let (gs, ps) = (ids(gt), ids(pred));
    if gs.is_empty() && ps.is_empty() {
        return 1.0;
    }
    let mut c = 0usize;
    let mut u = 0usize;
    let mut used = BTreeSet::new();
    for g in &gs {
        let gm = mask(gt, *g);
        let mut best: Option<(f64, u32, usize, usize)> = None;
        for p in &ps {
            let (i, un) = inter_union(&gm, &mask(pred, *p));
            if i == 0 {
                continue;
            }
            let iou = i as f64 / un as f64;
            if best.is_none_or(|b| iou > b.0) {
                best = Some((iou, *p, i, un));
            }
        }
        match best {
            Some((_, p, i, un)) => {
                c += i;
                u += un;
                used.insert(p);
            }
            None => u += gm.iter().filter(|&&b| b).count(),
        }
    }
    for p in &ps {
        if !used.contains(p) {
            u += mask(pred, *p).iter().filter(|&&b| b).count();
        }
    }
    c as f64 / u as f64
}

fn dice_side(from: &LabelImage, to: &LabelImage) -> f64 {
    let fs = ids(from);
    let mut s = 0.0;
    for a in &fs {
        let am = mask(from, *a);
        let mut best_i = 0;
        let mut best_d = 0.0;
        for b in ids(to) {
            let bm = mask(to, b);
            let (i, _) = inter_union(&am, &bm);
            if i > best_i {
                best_i = i;
                let sa = am.iter().filter(|&&x| x).count();
                let sb = bm.iter().filter(|&&x| x).count();
                best_d = 2.0 * i as f64 / (sa + sb) as f64;
            }
        }
        s += best_d;
    }
    s / fs.len() as f64
}

/// Object Dice against the maximal-overlap partner, averaged both ways.
pub fn dice2_oracle(pred: &LabelImage, gt: &LabelImage) -> f64 {
    let (ng, np) = (ids(gt).len(), ids(pred).len());
    if ng == 0 && np == 0 {
        return 1.0;
    }
    if ng == 0 || np == 0 {
        return 0.0;
    }
    0.5 * (dice_side(gt, pred) + dice_side(pred, gt))
}
