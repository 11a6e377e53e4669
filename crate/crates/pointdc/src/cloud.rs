//! Point clouds: XYZ positions, RGB colors, optional ground-truth labels.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    /// RGB in [0, 1], one triple per point.
    pub colors: Vec<[f64; 3]>,
    /// Ground-truth class per point, when known.
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(
        positions: Vec<[f64; 3]>,
        colors: Vec<[f64; 3]>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        if colors.len() != positions.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} positions vs {} colors",
                positions.len(),
                colors.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != positions.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} positions vs {} labels",
                    positions.len(),
                    l.len()
                )));
            }
        }
        Ok(Self {
            positions,
            colors,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Axis-aligned bounding box as (min, max); zero boxes for empty clouds.
    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if self.positions.is_empty() {
            ([0.0; 3], [0.0; 3])
        } else {
            (lo, hi)
        }
    }
}

/// K nearest neighbors per point, self excluded. Ties break by index; k is
/// clipped to the number of available neighbors. Large inputs go through a
/// uniform-grid index that returns exactly the brute-force answer.
pub fn knn_indices(positions: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    let n = positions.len();
    let k = k.min(n.saturating_sub(1));
    if k == 0 {
        return vec![Vec::new(); n];
    }
    if n < 256 {
        return knn_brute(positions, k);
    }
    match CellGrid::build(positions) {
        Some(grid) => (0..n).map(|i| grid.nearest(positions, i, k)).collect(),
        None => knn_brute(positions, k),
    }
}

fn knn_brute(positions: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    let n = positions.len();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let mut out = Vec::with_capacity(n);
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n {
        candidates.clear();
        candidates.extend((0..n).filter(|&j| j != i).map(|j| {
            (
                crate::matrix::squared_distance(&positions[i], &positions[j]),
                j,
            )
        }));
        if candidates.len() > k {
            candidates.select_nth_unstable_by(k - 1, cmp);
            candidates.truncate(k);
        }
        candidates.sort_by(cmp);
        out.push(candidates.iter().map(|&(_, j)| j).collect());
    }
    out
}

/// Uniform hash grid over the cloud's bounding box. Queries expand outward in
/// Chebyshev shells of cells; once the k-th best distance is within the shell
/// radius already scanned, no unscanned cell can hold a closer point, so the
/// result matches brute force exactly, tie-breaking included.
struct CellGrid {
    cells: std::collections::HashMap<[i64; 3], Vec<u32>>,
    origin: [f64; 3],
    cell: f64,
    max_coord: [i64; 3],
}

impl CellGrid {
    fn build(positions: &[[f64; 3]]) -> Option<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let diag = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
        if !diag.is_finite() || diag <= 0.0 {
            return None;
        }
        // Aim for a few points per cell so a one-shell scan usually suffices.
        let per_axis = ((positions.len() as f64) / 2.0).cbrt().ceil().max(1.0);
        let cell = diag / per_axis;
        let mut cells: std::collections::HashMap<[i64; 3], Vec<u32>> =
            std::collections::HashMap::new();
        let coord_of = |p: &[f64; 3]| {
            let mut c = [0i64; 3];
            for a in 0..3 {
                c[a] = ((p[a] - lo[a]) / cell).floor() as i64;
            }
            c
        };
        let mut max_coord = [0i64; 3];
        for (i, p) in positions.iter().enumerate() {
            let c = coord_of(p);
            for a in 0..3 {
                max_coord[a] = max_coord[a].max(c[a]);
            }
            cells.entry(c).or_default().push(i as u32);
        }
        Some(Self {
            cells,
            origin: lo,
            cell,
            max_coord,
        })
    }

    fn coord(&self, p: &[f64; 3]) -> [i64; 3] {
        let mut c = [0i64; 3];
        for a in 0..3 {
            c[a] = ((p[a] - self.origin[a]) / self.cell).floor() as i64;
        }
        c
    }

    fn nearest(&self, positions: &[[f64; 3]], i: usize, k: usize) -> Vec<usize> {
        let q = &positions[i];
        let home = self.coord(q);
        let max_ring = (0..3)
            .map(|a| home[a].max(self.max_coord[a] - home[a]))
            .max()
            .unwrap_or(0);
        // Max-heap of the best k (distance, index) pairs seen so far.
        let mut best: std::collections::BinaryHeap<Cand> = std::collections::BinaryHeap::new();
        let scan = |c: [i64; 3], best: &mut std::collections::BinaryHeap<Cand>| {
            let Some(members) = self.cells.get(&c) else {
                return;
            };
            for &j in members {
                let j = j as usize;
                if j == i {
                    continue;
                }
                let cand = Cand(crate::matrix::squared_distance(q, &positions[j]), j as u32);
                if best.len() < k {
                    best.push(cand);
                } else if cand < *best.peek().expect("non-empty heap") {
                    best.pop();
                    best.push(cand);
                }
            }
        };
        for ring in 0..=max_ring {
            for c in shell_coords(home, ring) {
                scan(c, &mut best);
            }
            if best.len() == k {
                // Any point in an unscanned shell lies strictly farther than
                // ring * cell from the query; shave a hair off the bound so
                // float rounding can only delay the stop, never fake it.
                let bound = ring as f64 * self.cell * (1.0 - 1e-9);
                if best.peek().expect("non-empty heap").0 <= bound * bound {
                    break;
                }
            }
        }
        let mut hits: Vec<Cand> = best.into_vec();
        hits.sort();
        hits.into_iter().map(|c| c.1 as usize).collect()
    }
}

/// Candidate neighbor ordered by squared distance, then index.
#[derive(PartialEq)]
struct Cand(f64, u32);

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// All cell coordinates at Chebyshev distance exactly `ring` from `center`.
fn shell_coords(center: [i64; 3], ring: i64) -> Vec<[i64; 3]> {
    if ring == 0 {
        return vec![center];
    }
    let r = ring;
    let mut out = Vec::new();
    for &dx in &[-r, r] {
        for dy in -r..=r {
            for dz in -r..=r {
                out.push([center[0] + dx, center[1] + dy, center[2] + dz]);
            }
        }
    }
    for &dy in &[-r, r] {
        for dx in (-r + 1)..r {
            for dz in -r..=r {
                out.push([center[0] + dx, center[1] + dy, center[2] + dz]);
            }
        }
    }
    for &dz in &[-r, r] {
        for dx in (-r + 1)..r {
            for dy in (-r + 1)..r {
                out.push([center[0] + dx, center[1] + dy, center[2] + dz]);
            }
        }
    }
    out
}
