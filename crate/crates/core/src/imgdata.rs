//! Image and label containers, file I/O, normalisation, resizing and the
//! synthetic packed-blob generator.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::postprocess::{label_components, Connectivity};

/// Fraction of samples assigned to the training split (604 of 768).
pub const TRAIN_FRACTION: f64 = 604.0 / 768.0;

/// Smallest edge accepted for images loaded from disk.
pub const MIN_LOADED_EDGE: usize = 32;

/// Single-channel intensity image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(Error::Shape {
                expected: format!("{} pixels", height * width),
                got: format!("{} pixels", pixels.len()),
            });
        }
        Ok(RawImage {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        RawImage {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let mean = self.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .pixels
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }
}

/// Per-pixel instance ids; 0 is background, instances are `1..=M`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelImage {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelImage {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!("empty label map {height}x{width}")));
        }
        if labels.len() != height * width {
            return Err(Error::Shape {
                expected: format!("{} labels", height * width),
                got: format!("{} labels", labels.len()),
            });
        }
        Ok(LabelImage {
            height,
            width,
            labels,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        LabelImage {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    /// Builds a label map from rows; convenient for small fixtures.
    pub fn from_rows(rows: &[&[u32]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Data("ragged label rows".into()));
        }
        Self::new(height, width, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, id: u32) {
        self.labels[y * self.width + x] = id;
    }

    /// Largest id present, i.e. `M` for a canonical map.
    pub fn max_id(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Pixel count per id, indexed `0..=max_id`.
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.max_id() as usize + 1];
        for &l in &self.labels {
            areas[l as usize] += 1;
        }
        areas
    }

    /// Distinct nonzero ids in increasing order.
    pub fn instance_ids(&self) -> Vec<u32> {
        self.areas()
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, &a)| a > 0)
            .map(|(i, _)| i as u32)
            .collect()
    }

    pub fn num_instances(&self) -> usize {
        self.instance_ids().len()
    }

    /// True when ids are exactly `1..=M` and every instance is 4-connected.
    pub fn is_canonical(&self) -> bool {
        let areas = self.areas();
        if areas.iter().skip(1).any(|&a| a == 0) {
            return false;
        }
        let (_, count) = label_components(
            &self.labels,
            self.height,
            self.width,
            Connectivity::Four,
            Some(0),
        );
        count == areas.len() - 1
    }

    /// Splits every id into its 4-connected parts and compacts ids to `1..=M`.
    ///
    /// The first part (in scanline order) of each surviving id keeps its rank
    /// among surviving ids; extra parts are appended after, so a map that is
    /// already canonical comes back unchanged.
    pub fn relabel_connected(&self) -> LabelImage {
        let (comp, count) = label_components(
            &self.labels,
            self.height,
            self.width,
            Connectivity::Four,
            Some(0),
        );
        // component index -> original id, component indices follow scan order
        let mut owner = vec![0u32; count + 1];
        for (c, &l) in comp.iter().zip(&self.labels) {
            if *c != 0 {
                owner[*c as usize] = l;
            }
        }
        let mut primary: BTreeMap<u32, u32> = BTreeMap::new();
        let mut extras = Vec::new();
        for (c, &id) in owner.iter().enumerate().skip(1) {
            if primary.contains_key(&id) {
                extras.push(c as u32);
            } else {
                primary.insert(id, c as u32);
            }
        }
        let mut remap = vec![0u32; count + 1];
        let mut next = 1u32;
        for (_, &c) in primary.iter() {
            remap[c as usize] = next;
            next += 1;
        }
        for c in extras {
            remap[c as usize] = next;
            next += 1;
        }
        let labels = comp.iter().map(|&c| remap[c as usize]).collect();
        LabelImage {
            height: self.height,
            width: self.width,
            labels,
        }
    }

    /// Removes instances smaller than `min_area` and compacts the ids.
    pub fn without_small(&self, min_area: usize) -> LabelImage {
        let areas = self.areas();
        let mut remap = vec![0u32; areas.len()];
        let mut next = 1;
        for (id, &a) in areas.iter().enumerate().skip(1) {
            if a >= min_area && a > 0 {
                remap[id] = next;
                next += 1;
            }
        }
        LabelImage {
            height: self.height,
            width: self.width,
            labels: self.labels.iter().map(|&l| remap[l as usize]).collect(),
        }
    }
}

/// A named image/label pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: RawImage,
    pub label: LabelImage,
}

/// Disjoint train and evaluation samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.eval.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(self.eval.iter())
    }
}

/// Per-image z-score. Constant images map to zeros.
pub fn normalize(img: &RawImage) -> RawImage {
    let (mean, std) = img.mean_std();
    let pixels = if std <= f64::EPSILON * mean.abs().max(1.0) {
        vec![0.0; img.pixels.len()]
    } else {
        img.pixels
            .iter()
            .map(|&v| ((v as f64 - mean) / std) as f32)
            .collect()
    };
    RawImage {
        height: img.height,
        width: img.width,
        pixels,
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &RawImage, height: usize, width: usize) -> RawImage {
    if img.height == height && img.width == width {
        return img.clone();
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let taps = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut pixels = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = taps(y, sy, img.height);
        for x in 0..width {
            let (x0, x1, fx) = taps(x, sx, img.width);
            let top = img.get(y0, x0) as f64 * (1.0 - fx) + img.get(y0, x1) as f64 * fx;
            let bot = img.get(y1, x0) as f64 * (1.0 - fx) + img.get(y1, x1) as f64 * fx;
            pixels.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    RawImage {
        height,
        width,
        pixels,
    }
}

/// Nearest-neighbour resize of a label map followed by connectivity repair.
pub fn resize_labels(lbl: &LabelImage, height: usize, width: usize) -> LabelImage {
    if lbl.height == height && lbl.width == width {
        return lbl.clone();
    }
    let pick = |dst: usize, src_len: usize, dst_len: usize| {
        (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize).min(src_len - 1)
    };
    let mut labels = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = pick(y, lbl.height, height);
        for x in 0..width {
            labels.push(lbl.get(sy, pick(x, lbl.width, width)));
        }
    }
    LabelImage {
        height,
        width,
        labels,
    }
    .relabel_connected()
}

/// Resizes an image/label pair to `(height, width)`.
pub fn resize_pair(
    img: &RawImage,
    lbl: &LabelImage,
    size: (usize, usize),
) -> Result<(RawImage, LabelImage)> {
    let (height, width) = size;
    if height < 8 || width < 8 {
        return Err(Error::Config(format!(
            "resize target {height}x{width} below 8x8"
        )));
    }
    if img.height != lbl.height || img.width != lbl.width {
        return Err(Error::Shape {
            expected: format!("{}x{}", img.height, img.width),
            got: format!("{}x{}", lbl.height, lbl.width),
        });
    }
    Ok((
        resize_bilinear(img, height, width),
        resize_labels(lbl, height, width),
    ))
}

// ---------------------------------------------------------------------------
// File I/O

pub fn read_image(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let gray = match img {
        DynamicImage::ImageLuma8(b) => {
            let (w, h) = b.dimensions();
            (h, w, b.into_raw().into_iter().map(f32::from).collect())
        }
        DynamicImage::ImageLuma16(b) => {
            let (w, h) = b.dimensions();
            (h, w, b.into_raw().into_iter().map(f32::from).collect())
        }
        other => {
            let b = other.into_luma16();
            let (w, h) = b.dimensions();
            (h, w, b.into_raw().into_iter().map(f32::from).collect())
        }
    };
    RawImage::new(gray.0 as usize, gray.1 as usize, gray.2)
}

/// Reads a label map; raw pixel values are the ids.
pub fn read_labels(path: &Path) -> Result<LabelImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let (w, h, labels): (u32, u32, Vec<u32>) = match img {
        DynamicImage::ImageLuma8(b) => {
            let (w, h) = b.dimensions();
            (w, h, b.into_raw().into_iter().map(u32::from).collect())
        }
        DynamicImage::ImageLuma16(b) => {
            let (w, h) = b.dimensions();
            (w, h, b.into_raw().into_iter().map(u32::from).collect())
        }
        other => {
            let b = other.into_luma16();
            let (w, h) = b.dimensions();
            (w, h, b.into_raw().into_iter().map(u32::from).collect())
        }
    };
    LabelImage::new(h as usize, w as usize, labels)
}

/// Writes a 16-bit single-channel PNG whose pixel values are instance ids.
pub fn write_labels(path: &Path, lbl: &LabelImage) -> Result<()> {
    let max = lbl.max_id();
    if max > u16::MAX as u32 {
        return Err(Error::Data(format!(
            "{}: id {max} does not fit a 16-bit label PNG",
            path.display()
        )));
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        lbl.width as u32,
        lbl.height as u32,
        lbl.labels.iter().map(|&l| l as u16).collect(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Writes a 16-bit grayscale PNG, min-max scaled to the full range.
pub fn write_image(path: &Path, img: &RawImage) -> Result<()> {
    let lo = img.pixels.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.pixels.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = img
        .pixels
        .iter()
        .map(|&v| (((v - lo) / span) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, data)
            .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// FNV-1a, used for the filename-ordered split.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Number of training samples out of `n`.
pub fn train_count(n: usize) -> usize {
    (n as f64 * TRAIN_FRACTION).round() as usize
}

/// Deterministic split: order samples by filename hash, take the first
/// [`train_count`] for training.
pub fn split_by_name_hash(mut samples: Vec<Sample>) -> DatasetSplit {
    samples.sort_by(|a, b| {
        (fnv1a64(a.name.as_bytes()), &a.name).cmp(&(fnv1a64(b.name.as_bytes()), &b.name))
    });
    let n_train = train_count(samples.len());
    let eval = samples.split_off(n_train);
    let mut split = DatasetSplit {
        train: samples,
        eval,
    };
    split.train.sort_by(|a, b| a.name.cmp(&b.name));
    split.eval.sort_by(|a, b| a.name.cmp(&b.name));
    split
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "tif" | "tiff")
    )
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_file(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Turns a loaded label map into canonical instances: binary masks become
/// connected components, and any disconnected id is split.
pub fn canonical_labels(lbl: &LabelImage) -> LabelImage {
    let mut values: Vec<u32> = lbl.labels.iter().copied().filter(|&v| v != 0).collect();
    values.sort_unstable();
    values.dedup();
    if values.len() == 1 {
        let mask = lbl.labels.iter().map(|&v| u32::from(v != 0)).collect();
        LabelImage {
            height: lbl.height,
            width: lbl.width,
            labels: mask,
        }
        .relabel_connected()
    } else {
        lbl.relabel_connected()
    }
}

/// Loads a BBBC006-style directory tree at one focal plane.
///
/// Images are searched in `BBBC006_v1_images_z_{plane:02}/`, `images_z_{plane:02}/`
/// or `images/`; labels in `BBBC006_v1_labels/` or `labels/`. An image pairs
/// with the label whose stem equals its own stem, or its stem with the trailing
/// `_w…` channel suffix removed.
pub fn load_bbbc006(root: &Path, focal_plane: u32) -> Result<DatasetSplit> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        ));
    }
    let image_dir = [
        format!("BBBC006_v1_images_z_{focal_plane:02}"),
        format!("images_z_{focal_plane:02}"),
        "images".to_string(),
    ]
    .iter()
    .map(|d| root.join(d))
    .find(|d| d.is_dir());
    let label_dir = ["BBBC006_v1_labels", "labels"]
        .iter()
        .map(|d| root.join(d))
        .find(|d| d.is_dir());
    let (Some(image_dir), Some(label_dir)) = (image_dir, label_dir) else {
        return Err(Error::Data(format!(
            "{}: no image/label directories found",
            root.display()
        )));
    };
    let labels: BTreeMap<String, PathBuf> = list_images(&label_dir)?
        .into_iter()
        .map(|p| (stem(&p), p))
        .collect();
    let mut pairs = Vec::new();
    for img_path in list_images(&image_dir)? {
        let s = stem(&img_path);
        let key = if labels.contains_key(&s) {
            Some(s.clone())
        } else {
            s.rfind("_w")
                .map(|i| s[..i].to_string())
                .filter(|k| labels.contains_key(k))
        };
        if let Some(k) = key {
            pairs.push((img_path, labels[&k].clone()));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "{}: no image/label pairs",
            root.display()
        )));
    }
    let samples = pairs
        .into_iter()
        .map(|(ip, lp)| {
            let image = read_image(&ip)?;
            let label = read_labels(&lp)?;
            if image.height != label.height || image.width != label.width {
                return Err(Error::Data(format!(
                    "{}: image is {}x{} but label {} is {}x{}",
                    ip.display(),
                    image.height,
                    image.width,
                    lp.display(),
                    label.height,
                    label.width
                )));
            }
            if image.height < MIN_LOADED_EDGE || image.width < MIN_LOADED_EDGE {
                return Err(Error::Data(format!(
                    "{}: image smaller than {MIN_LOADED_EDGE}x{MIN_LOADED_EDGE}",
                    ip.display()
                )));
            }
            let name = ip
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(Sample {
                name,
                image,
                label: canonical_labels(&label),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(split_by_name_hash(samples))
}

/// Writes a dataset as `images/`, `labels/` and a `manifest.txt` of
/// `split image label` lines (paths relative to `dir`).
pub fn write_dataset(dir: &Path, data: &DatasetSplit) -> Result<()> {
    let img_dir = dir.join("images");
    let lbl_dir = dir.join("labels");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    fs::create_dir_all(&lbl_dir).map_err(|e| Error::io(&lbl_dir, e))?;
    let manifest_path = dir.join("manifest.txt");
    let mut manifest = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for (split, samples) in [("train", &data.train), ("eval", &data.eval)] {
        for s in samples {
            let file = format!("{}.png", s.name);
            write_image(&img_dir.join(&file), &s.image)?;
            write_labels(&lbl_dir.join(&file), &s.label)?;
            writeln!(manifest, "{split} images/{file} labels/{file}")
                .map_err(|e| Error::io(&manifest_path, e))?;
        }
    }
    Ok(())
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<DatasetSplit> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut split = DatasetSplit::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [which, img, lbl] = parts[..] else {
            return Err(Error::Data(format!(
                "{}:{}: expected `split image label`",
                manifest_path.display(),
                lineno + 1
            )));
        };
        let image = read_image(&dir.join(img))?;
        let label = read_labels(&dir.join(lbl))?;
        if image.height != label.height || image.width != label.width {
            return Err(Error::Data(format!("{img}: image/label shape mismatch")));
        }
        let name = Path::new(img)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let sample = Sample {
            name,
            image,
            label: canonical_labels(&label),
        };
        match which {
            "train" => split.train.push(sample),
            "eval" => split.eval.push(sample),
            other => {
                return Err(Error::Data(format!("unknown split `{other}` in manifest")));
            }
        }
    }
    if split.is_empty() {
        return Err(Error::Data(format!("{}: empty manifest", dir.display())));
    }
    Ok(split)
}

// ---------------------------------------------------------------------------
// Synthetic blobs

/// Fragments left smaller than this after carving are returned to background.
pub const MIN_FRAGMENT_AREA: usize = 8;

const BACKGROUND_LEVEL: f32 = 0.1;
const NOISE_SIGMA: f32 = 0.04;

#[derive(Clone, Copy, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    peak: f64,
}

impl Blob {
    /// Squared normalised elliptical radius; `< 1` inside.
    fn rho2(&self, y: f64, x: f64) -> f64 {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    fn intensity(&self, rho2: f64) -> f64 {
        self.peak * (0.3 + 0.7 * (-1.6 * rho2).exp())
    }
}

/// Generates one synthetic image with ground truth.
pub fn synth_image(height: usize, width: usize, density: f64, rng: &mut ChaCha8Rng) -> (RawImage, LabelImage) {
    let scale = height.min(width) as f64 / 128.0;
    let (r_lo, r_hi) = (5.0 * scale, 10.0 * scale);
    let mean_area = std::f64::consts::PI * ((r_lo + r_hi) / 2.0).powi(2);
    let n_blobs = (density.clamp(0.0, 1.0) * (height * width) as f64 / mean_area).round() as usize;

    let mut owner = vec![usize::MAX; height * width];
    let mut blobs = Vec::with_capacity(n_blobs);
    for bi in 0..n_blobs {
        let a = rng.random_range(r_lo..r_hi);
        let b = rng.random_range(r_lo..r_hi);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let blob = Blob {
            cy: rng.random_range(0.0..height as f64),
            cx: rng.random_range(0.0..width as f64),
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
            peak: rng.random_range(0.55..1.0),
        };
        let reach = a.max(b).ceil() as isize + 1;
        let y0 = (blob.cy as isize - reach).max(0) as usize;
        let y1 = ((blob.cy as isize + reach) as usize).min(height - 1);
        let x0 = (blob.cx as isize - reach).max(0) as usize;
        let x1 = ((blob.cx as isize + reach) as usize).min(width - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if blob.rho2(y as f64 + 0.5, x as f64 + 0.5) < 1.0 {
                    owner[y * width + x] = bi;
                }
            }
        }
        blobs.push(blob);
    }

    let raw = LabelImage {
        height,
        width,
        labels: owner
            .iter()
            .map(|&o| if o == usize::MAX { 0 } else { o as u32 + 1 })
            .collect(),
    };
    let mut labels = raw.relabel_connected().without_small(MIN_FRAGMENT_AREA);
    for _ in 0..8 {
        let next = break_four_corners(&fill_enclosed_background(&labels))
            .relabel_connected()
            .without_small(MIN_FRAGMENT_AREA);
        if next == labels {
            break;
        }
        labels = next;
    }

    let noise = Normal::new(0.0f32, NOISE_SIGMA).expect("valid sigma");
    let mut pixels = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let base = if labels.labels[i] == 0 || owner[i] == usize::MAX {
                BACKGROUND_LEVEL
            } else {
                let blob = &blobs[owner[i]];
                BACKGROUND_LEVEL
                    + blob.intensity(blob.rho2(y as f64 + 0.5, x as f64 + 0.5)) as f32
            };
            pixels.push(base + noise.sample(rng));
        }
    }
    (
        RawImage {
            height,
            width,
            pixels,
        },
        labels,
    )
}

/// Where four different labels meet in a 2x2 block the two diagonal contacts
/// cross; the lower-right pixel is handed to the pixel above it.
fn break_four_corners(lbl: &LabelImage) -> LabelImage {
    let (h, w) = (lbl.height, lbl.width);
    let mut out = lbl.clone();
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let l = &out.labels;
            let (p, q, r, s) = (l[y * w + x], l[y * w + x + 1], l[(y + 1) * w + x], l[(y + 1) * w + x + 1]);
            if p != q && p != r && p != s && q != r && q != s && r != s {
                out.labels[(y + 1) * w + x + 1] = q;
            }
        }
    }
    out
}

/// Gives every background pocket cut off from the image border to the
/// neighbouring instance sharing the longest boundary with it. Pockets would
/// join the single background node to objects inside a cluster and break
/// planarity of the adjacency graph.
fn fill_enclosed_background(lbl: &LabelImage) -> LabelImage {
    let (h, w) = (lbl.height, lbl.width);
    let mask: Vec<u32> = lbl.labels.iter().map(|&v| u32::from(v != 0)).collect();
    let (comp, count) = label_components(&mask, h, w, Connectivity::Four, Some(1));
    let mut open = vec![false; count + 1];
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                open[comp[y * w + x] as usize] = true;
            }
        }
    }
    if open.iter().skip(1).all(|&o| o) {
        return lbl.clone();
    }
    let mut border: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); count + 1];
    for y in 0..h {
        for x in 0..w {
            let c = comp[y * w + x] as usize;
            if c == 0 || open[c] {
                continue;
            }
            let mut visit = |ny: usize, nx: usize| {
                let v = lbl.labels[ny * w + nx];
                if v != 0 {
                    *border[c].entry(v).or_default() += 1;
                }
            };
            if y > 0 {
                visit(y - 1, x);
            }
            if y + 1 < h {
                visit(y + 1, x);
            }
            if x > 0 {
                visit(y, x - 1);
            }
            if x + 1 < w {
                visit(y, x + 1);
            }
        }
    }
    let fill: Vec<u32> = border
        .iter()
        .map(|b| b.iter().max_by_key(|(id, n)| (**n, std::cmp::Reverse(**id))).map_or(0, |(id, _)| *id))
        .collect();
    let mut out = lbl.clone();
    for (v, &c) in out.labels.iter_mut().zip(&comp) {
        if c != 0 && !open[c as usize] {
            *v = fill[c as usize];
        }
    }
    out
}

/// Generates `n_images` synthetic samples and splits them 80/20 in generation
/// order. Identical seeds give bitwise identical output.
pub fn synth_blobs(
    n_images: usize,
    size: (usize, usize),
    density: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if n_images == 0 {
        return Err(Error::Config("synth_blobs needs at least one image".into()));
    }
    let (height, width) = size;
    if height == 0 || width == 0 {
        return Err(Error::Config(format!("bad synthetic size {height}x{width}")));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!("density {density} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width_digits = n_images.to_string().len().max(4);
    let mut samples: Vec<Sample> = (0..n_images)
        .map(|i| {
            let (image, label) = synth_image(height, width, density, &mut rng);
            Sample {
                name: format!("synth_{i:0width_digits$}"),
                image,
                label,
            }
        })
        .collect();
    let n_train = (n_images as f64 * 0.8).round() as usize;
    let eval = samples.split_off(n_train);
    Ok(DatasetSplit {
        train: samples,
        eval,
    })
}
