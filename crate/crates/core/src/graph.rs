//! Spatial neighbour graphs over spots.
//!
//! Every builder produces symmetric, loop-free adjacencies stored as sorted
//! neighbour lists. Higher hop shells are derived from the base adjacency by
//! breadth-first search, so shell `k` holds exactly the pairs at graph
//! distance `k`.

use std::collections::{HashMap, VecDeque};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

/// Symmetric binary adjacency with zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            neighbors: vec![Vec::new(); n],
        }
    }

    /// Undirected edges; duplicates are merged, self-loops rejected.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for (i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge ({i}, {j}) out of range for {n} nodes"
                )));
            }
            if i == j {
                return Err(Error::InvalidArgument(format!("self-loop at node {i}")));
            }
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self { neighbors })
    }

    /// From a dense 0/1 matrix; must be symmetric with zero diagonal.
    pub fn from_dense(dense: ArrayView2<f64>) -> Result<Self> {
        let n = dense.nrows();
        if dense.ncols() != n {
            return Err(Error::Dimension("adjacency must be square".into()));
        }
        let mut edges = Vec::new();
        for i in 0..n {
            if dense[[i, i]] != 0.0 {
                return Err(Error::InvalidArgument(format!("nonzero diagonal at {i}")));
            }
            for j in (i + 1)..n {
                if dense[[i, j]] != dense[[j, i]] {
                    return Err(Error::NotSymmetric("adjacency".into()));
                }
                if dense[[i, j]] != 0.0 {
                    edges.push((i, j));
                }
            }
        }
        Self::from_edges(n, edges)
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Edges `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, list)| list.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.n_nodes();
        let mut out = Array2::zeros((n, n));
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                out[[i, j]] = 1.0;
            }
        }
        out
    }

    /// `J s`: row `i` is the sum of the rows of `s` at the neighbours of `i`.
    pub fn propagate(&self, s: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(s.raw_dim());
        for (i, list) in self.neighbors.iter().enumerate() {
            let mut row = out.row_mut(i);
            for &j in list {
                row += &s.row(j);
            }
        }
        out
    }

    /// Subgraph on `keep`, relabelled `0..keep.len()` in the given order.
    pub fn induced(&self, keep: &[usize]) -> Self {
        let index: HashMap<usize, usize> = keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let neighbors = keep
            .iter()
            .map(|&old| {
                let mut list: Vec<usize> =
                    self.neighbors[old].iter().filter_map(|j| index.get(j).copied()).collect();
                list.sort_unstable();
                list
            })
            .collect();
        Self { neighbors }
    }
}

/// Mean number of neighbours per node, `2 |E| / S`.
pub fn mean_degree(shell: &Adjacency) -> f64 {
    if shell.n_nodes() == 0 {
        return 0.0;
    }
    2.0 * shell.edge_count() as f64 / shell.n_nodes() as f64
}

/// Hop shells over a fixed set of spots, with optional planar coordinates (micrometres).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGraph {
    n_spots: usize,
    shells: Vec<Adjacency>,
    coordinates: Option<Array2<f64>>,
}

impl SpatialGraph {
    pub fn new(shells: Vec<Adjacency>, coordinates: Option<Array2<f64>>) -> Result<Self> {
        let Some(first) = shells.first() else {
            return Err(Error::InvalidArgument("a spatial graph needs at least one shell".into()));
        };
        let n = first.n_nodes();
        if shells.iter().any(|s| s.n_nodes() != n) {
            return Err(Error::Dimension("all shells must cover the same spots".into()));
        }
        for i in 0..n {
            let mut seen: Vec<usize> = shells.iter().flat_map(|s| s.neighbors(i).iter().copied()).collect();
            let total = seen.len();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != total {
                return Err(Error::InvalidArgument(format!(
                    "hop shells overlap at spot {i}"
                )));
            }
        }
        if let Some(c) = &coordinates {
            validate_coordinates(c.view())?;
            if c.nrows() != n {
                return Err(Error::Dimension(format!(
                    "{} coordinate rows for {n} spots",
                    c.nrows()
                )));
            }
        }
        Ok(Self {
            n_spots: n,
            shells,
            coordinates,
        })
    }

    pub fn n_spots(&self) -> usize {
        self.n_spots
    }

    pub fn n_shells(&self) -> usize {
        self.shells.len()
    }

    pub fn shells(&self) -> &[Adjacency] {
        &self.shells
    }

    pub fn base(&self) -> &Adjacency {
        &self.shells[0]
    }

    pub fn coordinates(&self) -> Option<&Array2<f64>> {
        self.coordinates.as_ref()
    }

    /// Mean degree of every shell.
    pub fn q_shells(&self) -> Vec<f64> {
        self.shells.iter().map(mean_degree).collect()
    }

    /// Graph on the spots `keep`. Shells above the first are re-derived by
    /// BFS on the induced base adjacency, so hop distances are measured
    /// within the subgraph.
    pub fn induced(&self, keep: &[usize]) -> Result<Self> {
        let base = self.base().induced(keep);
        let mut graph = khop_shells(&base, self.n_shells(), Execution::Sequential)?;
        graph.coordinates = self.coordinates.as_ref().map(|c| c.select(ndarray::Axis(0), keep));
        Ok(graph)
    }

    pub fn with_coordinates(mut self, coordinates: Array2<f64>) -> Result<Self> {
        validate_coordinates(coordinates.view())?;
        if coordinates.nrows() != self.n_spots {
            return Err(Error::Dimension("coordinate rows must match spots".into()));
        }
        self.coordinates = Some(coordinates);
        Ok(self)
    }
}

fn validate_coordinates(coords: ArrayView2<f64>) -> Result<()> {
    if coords.ncols() != 2 {
        return Err(Error::Dimension(format!(
            "coordinates must have 2 columns, got {}",
            coords.ncols()
        )));
    }
    if let Some(((i, j), v)) = coords.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("coordinate [{i}, {j}] = {v}")));
    }
    Ok(())
}

#[inline]
fn dist2(coords: ArrayView2<f64>, i: usize, j: usize) -> f64 {
    let dx = coords[[i, 0]] - coords[[j, 0]];
    let dy = coords[[i, 1]] - coords[[j, 1]];
    dx * dx + dy * dy
}

/// How to connect spots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "method")]
pub enum GraphMethod {
    /// Connect spots strictly closer than `radius`.
    Radius { radius: f64 },
    /// Union of each spot's `k` nearest neighbours.
    Knn { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    #[serde(flatten)]
    pub method: GraphMethod,
    pub max_shell: usize,
}

impl GraphConfig {
    pub fn radius(radius: f64) -> Self {
        Self {
            method: GraphMethod::Radius { radius },
            max_shell: 1,
        }
    }

    pub fn knn(k: usize) -> Self {
        Self {
            method: GraphMethod::Knn { k },
            max_shell: 1,
        }
    }

    pub fn with_max_shell(mut self, max_shell: usize) -> Self {
        self.max_shell = max_shell;
        self
    }
}

/// Build the base adjacency from `config.method`, then the hop shells.
pub fn build_graph(coords: ArrayView2<f64>, config: &GraphConfig, exec: Execution) -> Result<SpatialGraph> {
    let base = match config.method {
        GraphMethod::Radius { radius } => radius_adjacency(coords, radius, exec)?,
        GraphMethod::Knn { k } => knn_adjacency(coords, k, exec)?,
    };
    let graph = khop_shells(&base, config.max_shell, exec)?;
    graph.with_coordinates(coords.to_owned())
}

/// Radius graph with a single shell, carrying the coordinates.
pub fn radius_graph(coords: ArrayView2<f64>, radius: f64) -> Result<SpatialGraph> {
    let base = radius_adjacency(coords, radius, Execution::default())?;
    SpatialGraph::new(vec![base], Some(coords.to_owned()))
}

/// kNN graph with a single shell, carrying the coordinates.
pub fn knn_graph(coords: ArrayView2<f64>, k: usize) -> Result<SpatialGraph> {
    let base = knn_adjacency(coords, k, Execution::default())?;
    SpatialGraph::new(vec![base], Some(coords.to_owned()))
}

fn check_radius(coords: ArrayView2<f64>, radius: f64) -> Result<()> {
    validate_coordinates(coords)?;
    if coords.nrows() == 0 {
        return Err(Error::InvalidArgument("no spots".into()));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    Ok(())
}

/// Reference O(S^2) radius adjacency: edge iff `0 < d(i, j) < radius`.
pub fn radius_adjacency_brute(coords: ArrayView2<f64>, radius: f64, exec: Execution) -> Result<Adjacency> {
    check_radius(coords, radius)?;
    let n = coords.nrows();
    let r2 = radius * radius;
    let neighbors = exec.map(n, |i| {
        (0..n)
            .filter(|&j| {
                let d2 = dist2(coords, i, j);
                j != i && d2 > 0.0 && d2 < r2
            })
            .collect()
    });
    Ok(Adjacency { neighbors })
}

/// Radius adjacency using a uniform bucket grid with cell size `radius`.
/// Produces the same edge set as [`radius_adjacency_brute`].
pub fn radius_adjacency(coords: ArrayView2<f64>, radius: f64, exec: Execution) -> Result<Adjacency> {
    check_radius(coords, radius)?;
    let n = coords.nrows();
    let r2 = radius * radius;
    let (x0, y0) = coords
        .outer_iter()
        .fold((f64::INFINITY, f64::INFINITY), |(x, y), p| (x.min(p[0]), y.min(p[1])));
    let cell = |i: usize| -> (i64, i64) {
        (
            ((coords[[i, 0]] - x0) / radius).floor() as i64,
            ((coords[[i, 1]] - y0) / radius).floor() as i64,
        )
    };
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for i in 0..n {
        buckets.entry(cell(i)).or_default().push(i);
    }
    let neighbors = exec.map(n, |i| {
        let (cx, cy) = cell(i);
        let mut list = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(members) = buckets.get(&(cx + dx, cy + dy)) {
                    for &j in members {
                        let d2 = dist2(coords, i, j);
                        if j != i && d2 > 0.0 && d2 < r2 {
                            list.push(j);
                        }
                    }
                }
            }
        }
        list.sort_unstable();
        list
    });
    Ok(Adjacency { neighbors })
}

/// Symmetrised k-nearest-neighbour adjacency; distance ties go to the lower index.
pub fn knn_adjacency(coords: ArrayView2<f64>, k: usize, exec: Execution) -> Result<Adjacency> {
    validate_coordinates(coords)?;
    let n = coords.nrows();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "k must satisfy 1 <= k < {n}, got {k}"
        )));
    }
    let nearest: Vec<Vec<usize>> = exec.map(n, |i| {
        let mut others: Vec<(f64, usize)> =
            (0..n).filter(|&j| j != i).map(|j| (dist2(coords, i, j), j)).collect();
        // total order (distance, index), so the selected set is unique
        others.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        others.truncate(k);
        others.into_iter().map(|(_, j)| j).collect()
    });
    let edges = nearest
        .iter()
        .enumerate()
        .flat_map(|(i, list)| list.iter().map(move |&j| (i, j)));
    Adjacency::from_edges(n, edges)
}

/// Split a base adjacency into exact-distance shells `1..=max_shell`.
pub fn khop_shells(base: &Adjacency, max_shell: usize, exec: Execution) -> Result<SpatialGraph> {
    if max_shell == 0 {
        return Err(Error::InvalidArgument("max_shell must be at least 1".into()));
    }
    let n = base.n_nodes();
    if max_shell == 1 {
        return SpatialGraph::new(vec![base.clone()], None);
    }
    // per source: for each shell, the nodes at that distance
    let by_source: Vec<Vec<Vec<usize>>> = exec.map(n, |src| {
        let mut dist = vec![usize::MAX; n];
        let mut shells = vec![Vec::new(); max_shell];
        dist[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u];
            if d == max_shell {
                continue;
            }
            for &v in base.neighbors(u) {
                if dist[v] == usize::MAX {
                    dist[v] = d + 1;
                    shells[d].push(v);
                    queue.push_back(v);
                }
            }
        }
        for s in &mut shells {
            s.sort_unstable();
        }
        shells
    });
    let shells = (0..max_shell)
        .map(|k| Adjacency {
            neighbors: by_source.iter().map(|per| per[k].clone()).collect(),
        })
        .collect();
    SpatialGraph::new(shells, None)
}

/// `side x side` square lattice with the given spacing, row-major.
pub fn grid_coordinates(side: usize, spacing: f64) -> Array2<f64> {
    Array2::from_shape_fn((side * side, 2), |(i, c)| {
        let (r, col) = (i / side, i % side);
        spacing * if c == 0 { col as f64 } else { r as f64 }
    })
}
