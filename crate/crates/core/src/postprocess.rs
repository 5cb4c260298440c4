//! Converts a K-channel activation map into instances: harden each pixel to
//! its argmax channel, then label connected regions inside every channel.

use std::str::FromStr;

use crate::activation::{hard_argmax_index, EmbeddingMap};
use crate::error::{Error, Result};
use crate::graph::Coloring;
use crate::imgdata::LabelImage;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "4" | "four" => Ok(Connectivity::Four),
            "8" | "eight" => Ok(Connectivity::Eight),
            _ => Err(Error::Config(format!("connectivity must be 4 or 8, got `{s}`"))),
        }
    }
}

/// How the background region is identified among the channel components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackgroundPolicy {
    /// Components touching the image border in the channel that holds most
    /// border pixels are background.
    #[default]
    BorderMajority,
    /// The single largest component is background.
    LargestComponent,
    /// Every component is an instance.
    None,
}

impl FromStr for BackgroundPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "border_majority" => Ok(BackgroundPolicy::BorderMajority),
            "largest_component" => Ok(BackgroundPolicy::LargestComponent),
            "none" => Ok(BackgroundPolicy::None),
            _ => Err(Error::Config(format!("unknown background policy `{s}`"))),
        }
    }
}

impl std::fmt::Display for BackgroundPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackgroundPolicy::BorderMajority => "border_majority",
            BackgroundPolicy::LargestComponent => "largest_component",
            BackgroundPolicy::None => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PostprocessConfig {
    pub min_area: usize,
    pub policy: BackgroundPolicy,
    pub connectivity: Connectivity,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            min_area: 10,
            policy: BackgroundPolicy::BorderMajority,
            connectivity: Connectivity::Four,
        }
    }
}

/// Per-pixel winning channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMap {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub data: Vec<u32>,
}

impl ChannelMap {
    pub fn new(height: usize, width: usize, k: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                expected: format!("{} pixels", height * width),
                got: format!("{}", data.len()),
            });
        }
        if let Some(&bad) = data.iter().find(|&&c| c as usize >= k) {
            return Err(Error::Data(format!("channel {bad} outside 0..{k}")));
        }
        Ok(ChannelMap {
            height,
            width,
            k,
            data,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceResult {
    pub labels: LabelImage,
    /// `channel_of[i]` is the source channel of instance `i + 1`.
    pub channel_of: Vec<usize>,
    pub background_channel: Option<usize>,
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn with_capacity(n: usize) -> Self {
        UnionFind {
            parent: Vec::with_capacity(n),
        }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        while self.parent[x as usize] != root {
            let next = self.parent[x as usize];
            self.parent[x as usize] = root;
            x = next;
        }
        root
    }

    /// The smaller root wins so roots stay in creation (scanline) order.
    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

/// Two-pass union-find labelling of equal-valued regions.
///
/// Returns per-pixel component ids `1..=count` numbered by first pixel in
/// scanline order; pixels equal to `skip` get 0.
pub fn label_components(
    values: &[u32],
    height: usize,
    width: usize,
    connectivity: Connectivity,
    skip: Option<u32>,
) -> (Vec<u32>, usize) {
    debug_assert_eq!(values.len(), height * width);
    const NONE: u32 = u32::MAX;
    let mut prov = vec![NONE; values.len()];
    let mut uf = UnionFind::with_capacity(values.len() / 4 + 1);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let v = values[i];
            if Some(v) == skip {
                continue;
            }
            let mut current = NONE;
            let mut visit = |j: usize, uf: &mut UnionFind| {
                if values[j] == v && prov[j] != NONE {
                    current = if current == NONE {
                        uf.find(prov[j])
                    } else {
                        uf.union(current, prov[j])
                    };
                }
            };
            if x > 0 {
                visit(i - 1, &mut uf);
            }
            if y > 0 {
                visit(i - width, &mut uf);
                if connectivity == Connectivity::Eight {
                    if x > 0 {
                        visit(i - width - 1, &mut uf);
                    }
                    if x + 1 < width {
                        visit(i - width + 1, &mut uf);
                    }
                }
            }
            prov[i] = if current == NONE { uf.make() } else { current };
        }
    }
    let mut final_id = vec![0u32; uf.parent.len()];
    let mut count = 0u32;
    for p in 0..uf.parent.len() as u32 {
        let r = uf.find(p);
        if r == p {
            count += 1;
            final_id[p as usize] = count;
        }
    }
    let out = prov
        .iter()
        .map(|&p| {
            if p == NONE {
                0
            } else {
                final_id[uf.find(p) as usize]
            }
        })
        .collect();
    (out, count as usize)
}

/// Per-pixel argmax channel of the activation output.
pub fn harden(emb: &EmbeddingMap) -> ChannelMap {
    let data = emb
        .pixels()
        .map(|v| hard_argmax_index(v) as u32)
        .collect();
    ChannelMap {
        height: emb.height(),
        width: emb.width(),
        k: emb.k(),
        data,
    }
}

/// Labels the connected regions of every channel and drops background and
/// speckle; surviving components are numbered in (channel, scanline) order.
pub fn extract_instances(map: &ChannelMap, cfg: &PostprocessConfig) -> InstanceResult {
    let (h, w) = (map.height, map.width);
    let (comp, count) = label_components(&map.data, h, w, cfg.connectivity, None);
    let mut area = vec![0usize; count + 1];
    let mut channel = vec![0usize; count + 1];
    for (&c, &ch) in comp.iter().zip(&map.data) {
        area[c as usize] += 1;
        channel[c as usize] = ch as usize;
    }

    let mut is_background = vec![false; count + 1];
    let background_channel = match cfg.policy {
        BackgroundPolicy::BorderMajority => {
            let mut votes = vec![0usize; map.k.max(1)];
            let mut on_border = vec![false; count + 1];
            for y in 0..h {
                for x in 0..w {
                    if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                        votes[map.data[y * w + x] as usize] += 1;
                        on_border[comp[y * w + x] as usize] = true;
                    }
                }
            }
            let best = votes
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(c, _)| c)
                .unwrap_or(0);
            for c in 1..=count {
                // interior regions of that channel are objects coloured
                // like the background
                is_background[c] = channel[c] == best && on_border[c];
            }
            Some(best)
        }
        BackgroundPolicy::LargestComponent => {
            let largest = (1..=count).max_by(|&a, &b| area[a].cmp(&area[b]).then(b.cmp(&a)));
            largest.map(|c| {
                is_background[c] = true;
                channel[c]
            })
        }
        BackgroundPolicy::None => None,
    };

    let mut keep: Vec<usize> = (1..=count)
        .filter(|&c| !is_background[c] && area[c] >= cfg.min_area)
        .collect();
    keep.sort_by_key(|&c| (channel[c], c));
    let mut remap = vec![0u32; count + 1];
    let mut channel_of = Vec::with_capacity(keep.len());
    for (i, &c) in keep.iter().enumerate() {
        remap[c] = i as u32 + 1;
        channel_of.push(channel[c]);
    }
    let labels = comp.iter().map(|&c| remap[c as usize]).collect();
    InstanceResult {
        labels: LabelImage::new(h, w, labels).expect("shape preserved"),
        channel_of,
        background_channel,
    }
}

/// Hardens and extracts in one call.
pub fn postprocess(emb: &EmbeddingMap, cfg: &PostprocessConfig) -> InstanceResult {
    extract_instances(&harden(emb), cfg)
}

/// Paints a label map through a colouring: each pixel gets the channel of its
/// object (id 0 uses the colour of the background node, or channel 0 when the
/// colouring has none).
pub fn render_channels(lbl: &LabelImage, coloring: &Coloring, k: usize) -> ChannelMap {
    let data = lbl
        .labels()
        .iter()
        .map(|&id| coloring.color_of(id).unwrap_or(0) as u32)
        .collect();
    ChannelMap {
        height: lbl.height(),
        width: lbl.width(),
        k,
        data,
    }
}

/// One-hot embedding of a channel map.
pub fn one_hot(map: &ChannelMap) -> EmbeddingMap {
    let mut values = vec![0.0; map.data.len() * map.k];
    for (i, &c) in map.data.iter().enumerate() {
        values[i * map.k + c as usize] = 1.0;
    }
    EmbeddingMap::new(map.height, map.width, map.k, values).expect("shape preserved")
}
