//! Path search over the atlas's free surface layers. A node is one layer of
//! one cell; edges join layers of 8-neighbouring cells whose altitudes differ
//! by at most the step limit.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::fusion::Atlas;
use crate::gaussian::SurfaceLayer;
use crate::grid::CellIndex;

pub const DEFAULT_MAX_STEP: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NavNode {
    pub cell: CellIndex,
    /// Index into the cell's layers (ascending altitude).
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavPath {
    pub nodes: Vec<NavNode>,
    /// Meters.
    pub cost: f64,
}

/// A layer is traversable when the 2D grids saw it as free.
pub fn is_free(layer: &SurfaceLayer) -> bool {
    layer.occupancy < 0.0
}

/// Implicit navigation graph over an atlas.
pub struct NavGraph<'a> {
    atlas: &'a Atlas,
    pub max_step: f64,
}

pub fn build_nav_graph(atlas: &Atlas, max_step: f64) -> Result<NavGraph<'_>> {
    if !(max_step.is_finite() && max_step >= 0.0) {
        return Err(Error::Config(format!("max_step must be nonnegative, got {max_step}")));
    }
    Ok(NavGraph { atlas, max_step })
}

impl<'a> NavGraph<'a> {
    fn layer(&self, n: NavNode) -> Option<&SurfaceLayer> {
        self.atlas.column(n.cell)?.layers.get(n.layer)
    }

    pub fn is_valid(&self, n: NavNode) -> bool {
        self.layer(n).is_some_and(is_free)
    }

    /// World position of a node: cell center at the layer's altitude.
    pub fn position(&self, n: NavNode) -> [f64; 3] {
        let [x, y] = self.atlas.grid().cell_center(n.cell);
        [x, y, self.layer(n).map_or(f64::NAN, |l| l.mu)]
    }

    pub fn neighbors(&self, n: NavNode, out: &mut Vec<(NavNode, f64)>) {
        out.clear();
        let Some(here) = self.layer(n) else { return };
        let p = self.position(n);
        for c in n.cell.neighbors8() {
            let Some(col) = self.atlas.column(c) else { continue };
            for (i, l) in col.layers.iter().enumerate() {
                if is_free(l) && (l.mu - here.mu).abs() <= self.max_step {
                    let m = NavNode { cell: c, layer: i };
                    out.push((m, distance(&p, &self.position(m))));
                }
            }
        }
    }

    /// Nodes reachable in the graph, in cell order.
    pub fn nodes(&self) -> Vec<NavNode> {
        let mut v: Vec<NavNode> = self
            .atlas
            .columns()
            .iter()
            .flat_map(|(c, col)| {
                col.layers
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| is_free(l))
                    .map(|(i, _)| NavNode { cell: *c, layer: i })
            })
            .collect();
        v.sort_unstable();
        v
    }

    /// The free layer of the cell under (x, y) closest in altitude to z,
    /// within `max_dz`.
    pub fn snap(&self, x: f64, y: f64, z: f64, max_dz: f64) -> Option<NavNode> {
        let cell = self.atlas.grid().cell_of(x, y);
        let col = self.atlas.column(cell)?;
        col.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| is_free(l) && (l.mu - z).abs() <= max_dz)
            .min_by(|a, b| (a.1.mu - z).abs().total_cmp(&(b.1.mu - z).abs()))
            .map(|(i, _)| NavNode { cell, layer: i })
    }

    /// Like [`NavGraph::snap`], but falls back to the horizontally nearest
    /// cell within `radius` that has a matching layer.
    pub fn snap_within(&self, x: f64, y: f64, z: f64, max_dz: f64, radius: f64) -> Option<NavNode> {
        let grid = self.atlas.grid();
        let center = grid.cell_of(x, y);
        let reach = (radius / grid.resolution).ceil().max(0.0) as i32;
        let mut best: Option<(f64, f64, NavNode)> = None;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                let cell = CellIndex {
                    ix: center.ix + dx,
                    iy: center.iy + dy,
                };
                let c = grid.cell_center(cell);
                let d = (c[0] - x).hypot(c[1] - y);
                if d > radius && (dx, dy) != (0, 0) {
                    continue;
                }
                let Some(col) = self.atlas.column(cell) else { continue };
                for (i, l) in col.layers.iter().enumerate() {
                    let dz = (l.mu - z).abs();
                    if !is_free(l) || dz > max_dz {
                        continue;
                    }
                    let key = (d, dz);
                    if best.is_none_or(|(bd, bz, _)| key < (bd, bz)) {
                        best = Some((d, dz, NavNode { cell, layer: i }));
                    }
                }
            }
        }
        best.map(|b| b.2)
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(PartialEq)]
struct Entry {
    priority: f64,
    cost: f64,
    node: NavNode,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, o: &Self) -> Ordering {
        // Min-heap on priority, then prefer deeper (costlier) entries, then node order.
        o.priority
            .total_cmp(&self.priority)
            .then(self.cost.total_cmp(&o.cost))
            .then(o.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

fn search(graph: &NavGraph<'_>, start: NavNode, goal: NavNode, heuristic: bool) -> Result<Option<NavPath>> {
    for (what, n) in [("start", start), ("goal", goal)] {
        if !graph.is_valid(n) {
            return Err(Error::InvalidNode(format!("{what} {n:?} is not a free layer")));
        }
    }
    let target = graph.position(goal);
    let h = |n: NavNode| {
        if heuristic {
            distance(&graph.position(n), &target)
        } else {
            0.0
        }
    };
    let mut best: FxHashMap<NavNode, (f64, Option<NavNode>)> = FxHashMap::default();
    let mut closed = rustc_hash::FxHashSet::default();
    let mut heap = BinaryHeap::new();
    best.insert(start, (0.0, None));
    heap.push(Entry {
        priority: h(start),
        cost: 0.0,
        node: start,
    });
    let mut scratch = Vec::new();
    while let Some(Entry { cost, node, .. }) = heap.pop() {
        if !closed.insert(node) {
            continue;
        }
        if node == goal {
            let mut nodes = vec![node];
            let mut at = node;
            while let Some(prev) = best[&at].1 {
                nodes.push(prev);
                at = prev;
            }
            nodes.reverse();
            return Ok(Some(NavPath { nodes, cost }));
        }
        graph.neighbors(node, &mut scratch);
        for &(m, w) in &scratch {
            if closed.contains(&m) {
                continue;
            }
            let c = cost + w;
            if best.get(&m).is_none_or(|(old, _)| c < *old) {
                best.insert(m, (c, Some(node)));
                heap.push(Entry {
                    priority: c + h(m),
                    cost: c,
                    node: m,
                });
            }
        }
    }
    Ok(None)
}

/// Cost-minimal path under the straight-line 3D heuristic, or `None` when
/// the goal is unreachable.
pub fn astar(graph: &NavGraph<'_>, start: NavNode, goal: NavNode) -> Result<Option<NavPath>> {
    search(graph, start, goal, true)
}

/// Uninformed reference search.
pub fn dijkstra(graph: &NavGraph<'_>, start: NavNode, goal: NavNode) -> Result<Option<NavPath>> {
    search(graph, start, goal, false)
}

/// Checks the path's adjacency and step invariants.
pub fn validate_path(graph: &NavGraph<'_>, path: &NavPath) -> Result<()> {
    for n in &path.nodes {
        if !graph.is_valid(*n) {
            return Err(Error::InvalidNode(format!("{n:?} on path is not a free layer")));
        }
    }
    let mut scratch = Vec::new();
    for w in path.nodes.windows(2) {
        graph.neighbors(w[0], &mut scratch);
        if !scratch.iter().any(|(m, _)| *m == w[1]) {
            return Err(Error::InvalidNode(format!("{:?} -> {:?} is not an edge", w[0], w[1])));
        }
    }
    Ok(())
}

/// One "ix iy layer x y z" line per waypoint.
pub fn write_waypoints(path: &Path, graph: &NavGraph<'_>, nav: &NavPath) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for n in &nav.nodes {
        let [x, y, z] = graph.position(*n);
        writeln!(f, "{} {} {} {x} {y} {z}", n.cell.ix, n.cell.iy, n.layer).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
