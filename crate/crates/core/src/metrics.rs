//! Instance-segmentation scores: ensemble Dice (Dice2), Aggregated Jaccard
//! Index, detection F1 and Panoptic Quality. Background (id 0) never counts
//! as an instance. Two empty label maps score 1 on every metric.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imgdata::LabelImage;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Areas and pairwise intersections of two label maps.
#[derive(Clone, Debug)]
pub struct Overlap {
    pub gt_area: BTreeMap<u32, usize>,
    pub pred_area: BTreeMap<u32, usize>,
    /// `(gt, pred) -> |G ∩ P|` for overlapping pairs.
    pub inter: BTreeMap<(u32, u32), usize>,
}

impl Overlap {
    pub fn new(pred: &LabelImage, gt: &LabelImage) -> Result<Self> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::Shape {
                expected: format!("{}x{}", gt.height(), gt.width()),
                got: format!("{}x{}", pred.height(), pred.width()),
            });
        }
        let mut gt_area = BTreeMap::new();
        let mut pred_area = BTreeMap::new();
        let mut inter = BTreeMap::new();
        for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
            if g != 0 {
                *gt_area.entry(g).or_insert(0) += 1;
            }
            if p != 0 {
                *pred_area.entry(p).or_insert(0) += 1;
            }
            if g != 0 && p != 0 {
                *inter.entry((g, p)).or_insert(0) += 1;
            }
        }
        Ok(Overlap {
            gt_area,
            pred_area,
            inter,
        })
    }

    pub fn iou(&self, g: u32, p: u32) -> f64 {
        let i = self.inter.get(&(g, p)).copied().unwrap_or(0);
        if i == 0 {
            return 0.0;
        }
        i as f64 / (self.gt_area[&g] + self.pred_area[&p] - i) as f64
    }

    /// Overlapping predictions for each ground-truth id.
    fn partners(&self) -> BTreeMap<u32, Vec<(u32, usize)>> {
        let mut out: BTreeMap<u32, Vec<(u32, usize)>> = BTreeMap::new();
        for (&(g, p), &i) in &self.inter {
            out.entry(g).or_default().push((p, i));
        }
        out
    }
}

/// One-to-one instance matching.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// `(gt id, pred id, IoU)`.
    pub pairs: Vec<(u32, u32, f64)>,
    pub n_gt: usize,
    pub n_pred: usize,
}

impl Matching {
    pub fn true_positives(&self) -> usize {
        self.pairs.len()
    }

    pub fn false_positives(&self) -> usize {
        self.n_pred - self.pairs.len()
    }

    pub fn false_negatives(&self) -> usize {
        self.n_gt - self.pairs.len()
    }
}

fn match_overlap(ov: &Overlap, iou_threshold: f64) -> Matching {
    let mut cands: Vec<(f64, u32, u32)> = ov
        .inter
        .keys()
        .map(|&(g, p)| (ov.iou(g, p), g, p))
        .filter(|&(iou, _, _)| iou > iou_threshold)
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_g = BTreeMap::new();
    let mut used_p = BTreeMap::new();
    let mut pairs = Vec::new();
    for (iou, g, p) in cands {
        if used_g.contains_key(&g) || used_p.contains_key(&p) {
            continue;
        }
        used_g.insert(g, ());
        used_p.insert(p, ());
        pairs.push((g, p, iou));
    }
    pairs.sort_by_key(|&(g, p, _)| (g, p));
    Matching {
        pairs,
        n_gt: ov.gt_area.len(),
        n_pred: ov.pred_area.len(),
    }
}

/// Greedy one-to-one matching by descending IoU, keeping pairs with
/// IoU strictly above `iou_threshold`. Above 0.5 every match is unique.
pub fn match_instances(pred: &LabelImage, gt: &LabelImage, iou_threshold: f64) -> Result<Matching> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::Config(format!(
            "IoU threshold {iou_threshold} outside (0, 1)"
        )));
    }
    Ok(match_overlap(&Overlap::new(pred, gt)?, iou_threshold))
}

/// `2TP / (2TP + FP + FN)`.
pub fn f1_score(m: &Matching) -> f64 {
    let tp = m.true_positives() as f64;
    let denom = 2.0 * tp + m.false_positives() as f64 + m.false_negatives() as f64;
    if denom == 0.0 {
        1.0
    } else {
        2.0 * tp / denom
    }
}

fn pq_of(m: &Matching) -> f64 {
    let denom =
        m.true_positives() as f64 + 0.5 * (m.false_positives() + m.false_negatives()) as f64;
    if denom == 0.0 {
        return 1.0;
    }
    m.pairs.iter().map(|p| p.2).sum::<f64>() / denom
}

/// `Σ IoU(matched) / (TP + ½FP + ½FN)` at IoU > 0.5.
pub fn panoptic_quality(pred: &LabelImage, gt: &LabelImage) -> Result<f64> {
    Ok(pq_of(&match_instances(pred, gt, DEFAULT_IOU_THRESHOLD)?))
}

fn aji_of(ov: &Overlap) -> f64 {
    let partners = ov.partners();
    let mut c = 0usize;
    let mut u = 0usize;
    let mut used: BTreeMap<u32, ()> = BTreeMap::new();
    for (&g, &ga) in &ov.gt_area {
        let best = partners.get(&g).and_then(|ps| {
            ps.iter()
                .map(|&(p, _)| (ov.iou(g, p), p))
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
        });
        match best {
            Some((_, p)) => {
                let i = ov.inter[&(g, p)];
                c += i;
                u += ga + ov.pred_area[&p] - i;
                used.insert(p, ());
            }
            None => u += ga,
        }
    }
    for (p, &a) in &ov.pred_area {
        if !used.contains_key(p) {
            u += a;
        }
    }
    if u == 0 {
        1.0
    } else {
        c as f64 / u as f64
    }
}

/// Aggregated Jaccard Index.
pub fn aggregated_jaccard(pred: &LabelImage, gt: &LabelImage) -> Result<f64> {
    Ok(aji_of(&Overlap::new(pred, gt)?))
}

fn dice2_of(ov: &Overlap) -> f64 {
    let (n_g, n_p) = (ov.gt_area.len(), ov.pred_area.len());
    if n_g == 0 && n_p == 0 {
        return 1.0;
    }
    if n_g == 0 || n_p == 0 {
        return 0.0;
    }
    // best partner by intersection size, ties to the lowest id
    let mut best_for_g: BTreeMap<u32, (usize, u32)> = BTreeMap::new();
    let mut best_for_p: BTreeMap<u32, (usize, u32)> = BTreeMap::new();
    for (&(g, p), &i) in &ov.inter {
        let e = best_for_g.entry(g).or_insert((i, p));
        if i > e.0 {
            *e = (i, p);
        }
        let e = best_for_p.entry(p).or_insert((i, g));
        if i > e.0 {
            *e = (i, g);
        }
    }
    let dice = |i: usize, a: usize, b: usize| 2.0 * i as f64 / (a + b) as f64;
    let g_side: f64 = best_for_g
        .iter()
        .map(|(g, &(i, p))| dice(i, ov.gt_area[g], ov.pred_area[&p]))
        .sum::<f64>()
        / n_g as f64;
    let p_side: f64 = best_for_p
        .iter()
        .map(|(p, &(i, g))| dice(i, ov.gt_area[&g], ov.pred_area[p]))
        .sum::<f64>()
        / n_p as f64;
    0.5 * (g_side + p_side)
}

/// Ensemble Dice: object-wise Dice against the maximal-overlap partner,
/// averaged over ground truth and over predictions, then the two averaged.
pub fn dice2(pred: &LabelImage, gt: &LabelImage) -> Result<f64> {
    Ok(dice2_of(&Overlap::new(pred, gt)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ImageScores {
    pub dice2: f64,
    pub aji: f64,
    pub f1: f64,
    pub pq: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub matched: usize,
    pub missed: usize,
    pub spurious: usize,
}

/// All four scores for one image, plus detection counts at IoU > 0.5.
pub fn score_image(pred: &LabelImage, gt: &LabelImage) -> Result<(ImageScores, Counts)> {
    let ov = Overlap::new(pred, gt)?;
    let m = match_overlap(&ov, DEFAULT_IOU_THRESHOLD);
    Ok((
        ImageScores {
            dice2: dice2_of(&ov),
            aji: aji_of(&ov),
            f1: f1_score(&m),
            pq: pq_of(&m),
        },
        Counts {
            matched: m.true_positives(),
            missed: m.false_negatives(),
            spurious: m.false_positives(),
        },
    ))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub per_image: Vec<(String, ImageScores)>,
    pub means: ImageScores,
    pub counts: Counts,
}

impl EvalReport {
    pub fn from_scores(per_image: Vec<(String, ImageScores)>, counts: Counts) -> Self {
        let n = per_image.len().max(1) as f64;
        let mut means = ImageScores::default();
        for (_, s) in &per_image {
            means.dice2 += s.dice2;
            means.aji += s.aji;
            means.f1 += s.f1;
            means.pq += s.pq;
        }
        means.dice2 /= n;
        means.aji /= n;
        means.f1 /= n;
        means.pq /= n;
        EvalReport {
            per_image,
            means,
            counts,
        }
    }

    /// Scores matching `(name, pred, gt)` triples.
    pub fn evaluate<'a>(items: impl IntoIterator<Item = (String, &'a LabelImage, &'a LabelImage)>) -> Result<Self> {
        let mut per_image = Vec::new();
        let mut counts = Counts::default();
        for (name, pred, gt) in items {
            let (s, c) = score_image(pred, gt)?;
            counts.matched += c.matched;
            counts.missed += c.missed;
            counts.spurious += c.spurious;
            per_image.push((name, s));
        }
        Ok(Self::from_scores(per_image, counts))
    }

    /// `image,dice2,aji,f1,pq` rows plus a final `mean` row, 4 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,dice2,aji,f1,pq\n");
        let row = |out: &mut String, name: &str, s: &ImageScores| {
            let _ = writeln!(out, "{name},{:.4},{:.4},{:.4},{:.4}", s.dice2, s.aji, s.f1, s.pq);
        };
        for (name, s) in &self.per_image {
            row(&mut out, name, s);
        }
        row(&mut out, "mean", &self.means);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parses the CSV produced by [`EvalReport::to_csv`]. Counts are not
    /// stored in the CSV and come back as zero.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("image,dice2,aji,f1,pq") {
            return Err(Error::Data(format!("{}: unexpected CSV header", path.display())));
        }
        let mut per_image = Vec::new();
        let mut means = None;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(Error::Data(format!("bad report row `{line}`")));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("bad number `{s}` in report")))
            };
            let s = ImageScores {
                dice2: num(cols[1])?,
                aji: num(cols[2])?,
                f1: num(cols[3])?,
                pq: num(cols[4])?,
            };
            if cols[0] == "mean" {
                means = Some(s);
            } else {
                per_image.push((cols[0].to_string(), s));
            }
        }
        let mut report = Self::from_scores(per_image, Counts::default());
        if let Some(m) = means {
            report.means = m;
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lbl(rows: &[&[u32]]) -> LabelImage {
        LabelImage::from_rows(rows).unwrap()
    }

    #[test]
    fn identical_maps_score_one() {
        let gt = lbl(&[&[1, 1, 0, 2], &[1, 0, 0, 2], &[3, 3, 0, 0]]);
        // same partition, different ids
        let pred = lbl(&[&[7, 7, 0, 1], &[7, 0, 0, 1], &[2, 2, 0, 0]]);
        let (s, c) = score_image(&pred, &gt).unwrap();
        assert_eq!((s.dice2, s.aji, s.f1, s.pq), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(c, Counts { matched: 3, missed: 0, spurious: 0 });
    }

    #[test]
    fn empty_prediction() {
        let gt = lbl(&[&[1, 1], &[0, 2]]);
        let pred = LabelImage::background(2, 2);
        let (s, _) = score_image(&pred, &gt).unwrap();
        assert_eq!((s.dice2, s.aji, s.f1, s.pq), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn disjoint_maps_match_nothing() {
        let gt = lbl(&[&[1, 0], &[0, 0]]);
        let pred = lbl(&[&[0, 0], &[0, 1]]);
        let m = match_instances(&pred, &gt, 0.5).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(f1_score(&m), 0.0);
    }

    #[test]
    fn f1_formula() {
        let m = Matching {
            pairs: vec![(1, 1, 0.9), (2, 2, 0.8)],
            n_gt: 3,
            n_pred: 3,
        };
        assert!((f1_score(&m) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pq_four_pixel_square() {
        // gt: 2x2 square; pred covers 3 of its pixels plus one outside -> IoU 3/5
        let gt = lbl(&[&[1, 1, 0], &[1, 1, 0], &[0, 0, 0]]);
        let pred = lbl(&[&[1, 1, 0], &[1, 0, 0], &[1, 0, 0]]);
        assert!((panoptic_quality(&pred, &gt).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn threshold_validation() {
        let a = LabelImage::background(2, 2);
        assert!(match_instances(&a, &a, 0.0).is_err());
        assert!(match_instances(&a, &a, 1.0).is_err());
        assert!(match_instances(&a, &LabelImage::background(3, 2), 0.5).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let r = EvalReport::from_scores(
            vec![
                ("a".into(), ImageScores { dice2: 0.5, aji: 0.25, f1: 1.0, pq: 0.125 }),
                ("b".into(), ImageScores { dice2: 1.0, aji: 0.75, f1: 0.0, pq: 0.875 }),
            ],
            Counts::default(),
        );
        let csv = r.to_csv();
        assert!(csv.ends_with("mean,0.7500,0.5000,0.5000,0.5000\n"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        r.write_csv(&p).unwrap();
        let back = EvalReport::read_csv(&p).unwrap();
        assert_eq!(back.per_image.len(), 2);
        assert!((back.means.aji - 0.5).abs() < 1e-12);
    }
}
