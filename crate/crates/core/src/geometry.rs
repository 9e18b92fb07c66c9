//! Embedding storage and the distance primitives every other module builds on.
//!
//! `D` always denotes the squared Euclidean distance. Set diameters and
//! set-to-set distances use the unsquared norm.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// `n` points in `R^m`. Sample identities are the row indices `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    coords: Array2<f64>,
}

impl EmbeddingSet {
    pub fn new(coords: Array2<f64>) -> Result<Self> {
        let (n, m) = coords.dim();
        if n == 0 {
            return Err(Error::Empty("embedding has no samples"));
        }
        if m == 0 {
            return Err(Error::Empty("embedding has zero dimensions"));
        }
        check_finite(coords.view())?;
        Ok(Self { coords })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
            return Err(Error::Shape {
                expected: format!("{m} columns"),
                actual: format!("{} columns in row {i}", r.len()),
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let coords = Array2::from_shape_vec((n, m), flat).map_err(|e| Error::invalid(e.to_string()))?;
        Self::new(coords)
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn coords(&self) -> ArrayView2<'_, f64> {
        self.coords.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.coords.row(i)
    }

    pub fn into_coords(self) -> Array2<f64> {
        self.coords
    }

    /// Squared distance between two samples.
    pub fn sq_dist(&self, i: usize, j: usize) -> f64 {
        sq_dist_rows(self.coords.row(i), self.coords.row(j))
    }

    /// Copy with every row scaled to unit norm. Zero rows are left at zero.
    pub fn normalized(&self) -> Self {
        let mut coords = self.coords.clone();
        for mut row in coords.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
        Self { coords }
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let n = self.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        Self::new(self.coords.select(ndarray::Axis(0), idx))
    }

    pub(crate) fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            Err(Error::IndexOutOfRange { index: i, len: self.len() })
        } else {
            Ok(())
        }
    }
}

pub(crate) fn sq_dist_rows(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_finite(coords: ArrayView2<'_, f64>) -> Result<()> {
    for (sample, row) in coords.rows().into_iter().enumerate() {
        if let Some((dim, &value)) = row.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { sample, dim, value });
        }
    }
    Ok(())
}

/// Symmetric `n×n` matrix of squared distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    d2: Array2<f64>,
}

impl DistanceMatrix {
    /// Wraps a precomputed matrix after checking shape, symmetry, diagonal
    /// and sign.
    pub fn from_matrix(d2: Array2<f64>) -> Result<Self> {
        let (r, c) = d2.dim();
        if r != c {
            return Err(Error::Shape { expected: "square matrix".into(), actual: format!("{r}x{c}") });
        }
        for i in 0..r {
            if d2[[i, i]] != 0.0 {
                return Err(Error::invalid(format!("diagonal entry {i} is {}", d2[[i, i]])));
            }
            for j in 0..i {
                let v = d2[[i, j]];
                if !v.is_finite() || v < 0.0 || v != d2[[j, i]] {
                    return Err(Error::invalid(format!("entry ({i},{j}) = {v} is not a valid squared distance")));
                }
            }
        }
        Ok(Self { d2 })
    }

    pub fn len(&self) -> usize {
        self.d2.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.d2.nrows() == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d2[[i, j]]
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.d2.view()
    }
}

/// `d2[i][j] = Σ_k (x_ik − x_jk)²`.
pub fn pairwise_sq_dist(emb: &EmbeddingSet) -> Result<DistanceMatrix> {
    check_finite(emb.coords())?;
    let n = emb.len();
    let rows = par::map_range(n, |i| {
        let ri = emb.row(i);
        (0..n).map(|j| if j == i { 0.0 } else { sq_dist_rows(ri, emb.row(j)) }).collect::<Vec<f64>>()
    });
    let mut d2 = Array2::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            d2[[i, j]] = v;
        }
    }
    // (x-y)² and (y-x)² round identically, but force exact symmetry anyway.
    for i in 0..n {
        for j in 0..i {
            d2[[j, i]] = d2[[i, j]];
        }
    }
    Ok(DistanceMatrix { d2 })
}

/// Per-anchor ordering of the other samples by ascending distance, ties
/// broken by ascending index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborOrder {
    order: Vec<Vec<usize>>,
    rank: Vec<Vec<usize>>,
}

impl NeighborOrder {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Other samples, nearest first.
    pub fn of(&self, anchor: usize) -> &[usize] {
        &self.order[anchor]
    }

    /// Position of `j` in the anchor's order (0 = nearest). The anchor
    /// itself has rank `usize::MAX`.
    pub fn rank(&self, anchor: usize, j: usize) -> usize {
        self.rank[anchor][j]
    }

    /// Samples strictly closer to `anchor` than `j`.
    pub fn closer(&self, anchor: usize, j: usize) -> &[usize] {
        &self.order[anchor][..self.rank[anchor][j]]
    }
}

pub fn neighbor_order(dm: &DistanceMatrix) -> NeighborOrder {
    let n = dm.len();
    let order = par::map_range(n, |i| {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| dm.get(i, a).total_cmp(&dm.get(i, b)).then(a.cmp(&b)));
        others
    });
    let rank = order
        .iter()
        .map(|o| {
            let mut r = vec![usize::MAX; n];
            for (pos, &j) in o.iter().enumerate() {
                r[j] = pos;
            }
            r
        })
        .collect();
    NeighborOrder { order, rank }
}

/// Diameter of `a` and the distance between `a` and `b`, both unsquared.
pub fn set_geometry(emb: &EmbeddingSet, members_a: &[usize], members_b: &[usize]) -> Result<(f64, f64)> {
    if members_a.is_empty() || members_b.is_empty() {
        return Err(Error::Empty("set_geometry needs two non-empty sets"));
    }
    for &i in members_a.iter().chain(members_b) {
        emb.check_index(i)?;
    }
    if let Some(&dup) = members_a.iter().find(|i| members_b.contains(i)) {
        return Err(Error::DuplicateIndex(vec![dup]));
    }
    Ok((diameter(emb, members_a), set_distance(emb, members_a, members_b)))
}

pub(crate) fn diameter(emb: &EmbeddingSet, members: &[usize]) -> f64 {
    let mut best = 0.0f64;
    for (x, &i) in members.iter().enumerate() {
        for &j in &members[x + 1..] {
            best = best.max(emb.sq_dist(i, j));
        }
    }
    best.sqrt()
}

pub(crate) fn set_distance(emb: &EmbeddingSet, a: &[usize], b: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for &i in a {
        for &j in b {
            best = best.min(emb.sq_dist(i, j));
        }
    }
    best.sqrt()
}
