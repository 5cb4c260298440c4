//! Object adjacency (`N(i)` of the inter-object loss term) and an exact
//! k-colouring search used to check that `K` output channels suffice.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::imgdata::LabelImage;

/// Node-count guard for the backtracking search.
pub const MAX_COLORING_NODES: usize = 1000;

/// Default adjacency radius in pixels (Chebyshev).
pub const DEFAULT_RADIUS: usize = 3;

/// Undirected adjacency over instance ids `1..=M`, plus id 0 when the
/// background takes part as a pseudo-object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectGraph {
    n_objects: u32,
    neighbors: Vec<Vec<u32>>,
    includes_background: bool,
}

impl ObjectGraph {
    pub fn empty(n_objects: u32, includes_background: bool) -> Self {
        ObjectGraph {
            n_objects,
            neighbors: vec![Vec::new(); n_objects as usize + 1],
            includes_background,
        }
    }

    /// Builds a graph from an edge list; self-loops are ignored.
    pub fn from_edges(n_objects: u32, edges: &[(u32, u32)], includes_background: bool) -> Result<Self> {
        let mut g = Self::empty(n_objects, includes_background);
        for &(a, b) in edges {
            g.add_edge(a, b)?;
        }
        Ok(g)
    }

    pub fn add_edge(&mut self, a: u32, b: u32) -> Result<()> {
        if a == b {
            return Ok(());
        }
        for id in [a, b] {
            if id > self.n_objects || (id == 0 && !self.includes_background) {
                return Err(Error::Data(format!("edge endpoint {id} is not a node")));
            }
        }
        if let Err(pos) = self.neighbors[a as usize].binary_search(&b) {
            self.neighbors[a as usize].insert(pos, b);
        }
        if let Err(pos) = self.neighbors[b as usize].binary_search(&a) {
            self.neighbors[b as usize].insert(pos, a);
        }
        Ok(())
    }

    pub fn n_objects(&self) -> u32 {
        self.n_objects
    }

    pub fn includes_background(&self) -> bool {
        self.includes_background
    }

    /// Node ids in increasing order.
    pub fn nodes(&self) -> impl Iterator<Item = u32> + '_ {
        let first = if self.includes_background { 0 } else { 1 };
        first..=self.n_objects
    }

    pub fn neighbors(&self, id: u32) -> &[u32] {
        self.neighbors
            .get(id as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn has_edge(&self, a: u32, b: u32) -> bool {
        self.neighbors(a).binary_search(&b).is_ok()
    }

    /// Edges as `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for (a, ns) in self.neighbors.iter().enumerate() {
            for &b in ns {
                if (a as u32) < b {
                    out.push((a as u32, b));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }
}

/// Objects `i`, `j` are adjacent iff a pixel of `i` lies within Chebyshev
/// distance `radius` of a pixel of `j`. With `include_background`, id 0 is a
/// node adjacent to every object near background; the area outside the frame
/// counts as background, so objects within `radius` of the image edge touch it.
pub fn build_adjacency(lbl: &LabelImage, radius: usize, include_background: bool) -> Result<ObjectGraph> {
    if radius == 0 {
        return Err(Error::Config("adjacency radius must be >= 1".into()));
    }
    let (h, w) = (lbl.height(), lbl.width());
    let labels = lbl.labels();
    let r = radius as isize;
    // half window: every unordered pixel pair within range is visited once
    let offsets: Vec<(isize, isize)> = (0..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy > 0 || dx > 0)
        .collect();
    let mut g = ObjectGraph::empty(lbl.max_id(), include_background);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let a = labels[(y as usize) * w + x as usize];
            if a == 0 && !include_background {
                continue;
            }
            if include_background
                && a != 0
                && (y < r || x < r || y >= h as isize - r || x >= w as isize - r)
                && !g.has_edge(0, a)
            {
                g.add_edge(0, a)?;
            }
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y + dy, x + dx);
                if yy >= h as isize || xx < 0 || xx >= w as isize {
                    continue;
                }
                let b = labels[(yy as usize) * w + xx as usize];
                if b == a || (b == 0 && !include_background) {
                    continue;
                }
                if !g.has_edge(a, b) {
                    g.add_edge(a, b)?;
                }
            }
        }
    }
    Ok(g)
}

/// Colour per node id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coloring {
    pub assignment: BTreeMap<u32, usize>,
}

impl Coloring {
    pub fn color_of(&self, id: u32) -> Option<usize> {
        self.assignment.get(&id).copied()
    }

    pub fn num_colors(&self) -> usize {
        self.assignment.values().max().map_or(0, |&c| c + 1)
    }

    /// Direct edge scan.
    pub fn is_proper(&self, g: &ObjectGraph) -> bool {
        g.nodes().all(|v| self.assignment.contains_key(&v))
            && g.edges()
                .iter()
                .all(|&(a, b)| self.assignment[&a] != self.assignment[&b])
    }
}

struct Search<'a> {
    adj: Vec<&'a [u32]>,
    index: Vec<usize>,
    k: usize,
    color: Vec<Option<usize>>,
    // per node, number of coloured neighbours holding each colour
    counts: Vec<Vec<u32>>,
    saturation: Vec<usize>,
}

impl<'a> Search<'a> {
    fn new(g: &'a ObjectGraph, nodes: &[u32], k: usize) -> Self {
        let mut index = vec![usize::MAX; g.n_objects() as usize + 1];
        for (i, &v) in nodes.iter().enumerate() {
            index[v as usize] = i;
        }
        Search {
            adj: nodes.iter().map(|&v| g.neighbors(v)).collect(),
            index,
            k,
            color: vec![None; nodes.len()],
            counts: vec![vec![0; k]; nodes.len()],
            saturation: vec![0; nodes.len()],
        }
    }

    fn assign(&mut self, v: usize, c: usize) {
        self.color[v] = Some(c);
        for &u in self.adj[v] {
            let u = self.index[u as usize];
            self.counts[u][c] += 1;
            if self.counts[u][c] == 1 {
                self.saturation[u] += 1;
            }
        }
    }

    fn unassign(&mut self, v: usize, c: usize) {
        self.color[v] = None;
        for &u in self.adj[v] {
            let u = self.index[u as usize];
            self.counts[u][c] -= 1;
            if self.counts[u][c] == 0 {
                self.saturation[u] -= 1;
            }
        }
    }

    /// Uncoloured node with highest saturation, then degree.
    fn pick(&self) -> Option<usize> {
        (0..self.color.len())
            .filter(|&v| self.color[v].is_none())
            .max_by(|&a, &b| {
                (self.saturation[a], self.adj[a].len(), b).cmp(&(self.saturation[b], self.adj[b].len(), a))
            })
    }

    fn greedy(&mut self) -> bool {
        while let Some(v) = self.pick() {
            match (0..self.k).find(|&c| self.counts[v][c] == 0) {
                Some(c) => self.assign(v, c),
                None => return false,
            }
        }
        true
    }

    fn reset(&mut self) {
        for v in 0..self.color.len() {
            if let Some(c) = self.color[v] {
                self.unassign(v, c);
            }
        }
    }

    fn backtrack(&mut self, max_used: usize) -> bool {
        let Some(v) = self.pick() else {
            return true;
        };
        // colours above max_used + 1 are interchangeable, try only one of them
        let limit = (max_used + 1).min(self.k);
        for c in 0..limit {
            if self.counts[v][c] == 0 {
                self.assign(v, c);
                if self.backtrack(max_used.max(c + 1)) {
                    return true;
                }
                self.unassign(v, c);
            }
        }
        false
    }
}

/// Exact k-colouring search: a DSATUR greedy pass, then DSATUR-ordered
/// backtracking if the greedy pass runs out of colours.
pub fn four_colorable(g: &ObjectGraph, k: usize) -> Result<Option<Coloring>> {
    let nodes: Vec<u32> = g.nodes().collect();
    if nodes.len() > MAX_COLORING_NODES {
        return Err(Error::Capacity(format!(
            "{} nodes exceed the colouring limit of {MAX_COLORING_NODES}",
            nodes.len()
        )));
    }
    if k == 0 {
        return Ok(if nodes.is_empty() {
            Some(Coloring {
                assignment: BTreeMap::new(),
            })
        } else {
            None
        });
    }
    let mut search = Search::new(g, &nodes, k);
    let found = search.greedy() || {
        search.reset();
        search.backtrack(0)
    };
    if !found {
        return Ok(None);
    }
    let assignment = nodes
        .iter()
        .zip(&search.color)
        .map(|(&v, c)| (v, c.expect("all nodes coloured")))
        .collect();
    Ok(Some(Coloring { assignment }))
}
