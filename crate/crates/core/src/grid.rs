//! Sorted dyadic grids and the sparse inverse Cholesky factor of a Markov
//! kernel on them.
//!
//! Points `i / 2^ℓ` (odd `i`, `1 ≤ ℓ ≤ L`) are stored level by level: every
//! point of level ℓ comes after all points of coarser levels, and points
//! inside a level ascend. In this order the inverse of the upper Cholesky
//! factor of the Laplace Gram matrix has at most three nonzeros per column:
//! a point only interacts with its two nearest neighbours at coarser levels.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::kernels::LaplaceKernel;

/// Largest supported grid level (M = 2^24 − 1 points).
pub const MAX_LEVEL: u32 = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid level must be at least 1")]
    ZeroLevel,
    #[error("grid level {0} exceeds the supported maximum of {MAX_LEVEL}")]
    LevelTooLarge(u32),
    #[error("degenerate domain ({lo}, {hi}): need finite lo < hi")]
    DegenerateDomain { lo: f64, hi: f64 },
    #[error("singular local system at column {column}: kernel is not Markov or points repeat")]
    Singular { column: usize },
    #[error("non-positive diagonal coefficient {value} at column {column}")]
    NonPositivePivot { column: usize, value: f64 },
    #[error("dimension mismatch: factor is {expected}, vector has {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid factor layout: {0}")]
    Layout(String),
}

/// Open interval `(lo, hi)` that the unit-interval dyadic set is mapped onto.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    lo: f64,
    hi: f64,
}

impl Domain {
    pub fn new(lo: f64, hi: f64) -> Result<Self, GridError> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(GridError::DegenerateDomain { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    /// `(0, 1)`.
    pub fn unit() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }

    /// `(−1, 1)`.
    pub fn symmetric() -> Self {
        Self { lo: -1.0, hi: 1.0 }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn map(&self, t: f64) -> f64 {
        self.lo + (self.hi - self.lo) * t
    }

    pub fn contains_open(&self, x: f64) -> bool {
        x > self.lo && x < self.hi
    }
}

/// Level-`L` dyadic points in level order, mapped affinely onto a domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DyadicGrid {
    level: u32,
    domain: Domain,
    points: Vec<f64>,
    levels: Vec<u32>,
    odd: Vec<u64>,
    // Sorted position of k / 2^L for 0 < k < 2^L.
    index_of: Vec<usize>,
}

/// Builds the sorted level-`level` dyadic grid on `domain`.
pub fn sorted_dyadic(level: u32, domain: Domain) -> Result<DyadicGrid, GridError> {
    if level == 0 {
        return Err(GridError::ZeroLevel);
    }
    if level > MAX_LEVEL {
        return Err(GridError::LevelTooLarge(level));
    }
    let m = (1usize << level) - 1;
    let mut points = Vec::with_capacity(m);
    let mut levels = Vec::with_capacity(m);
    let mut odd = Vec::with_capacity(m);
    let mut index_of = vec![usize::MAX; m + 2];
    for l in 1..=level {
        let denom = (1u64 << l) as f64;
        for i in (1..(1u64 << l)).step_by(2) {
            index_of[(i << (level - l)) as usize] = points.len();
            points.push(domain.map(i as f64 / denom));
            levels.push(l);
            odd.push(i);
        }
    }
    Ok(DyadicGrid {
        level,
        domain,
        points,
        levels,
        odd,
        index_of,
    })
}

impl DyadicGrid {
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Number of points, `2^L − 1`.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Level ℓ at which the `j`-th stored point first appears.
    pub fn level_of(&self, j: usize) -> u32 {
        self.levels[j]
    }

    /// Odd numerator `i` of the `j`-th stored point `i / 2^ℓ`.
    pub fn odd_index(&self, j: usize) -> u64 {
        self.odd[j]
    }

    /// Storage position of the dyadic fraction `numerator / 2^level`, if it
    /// lies strictly inside the unit interval and `level ≤ L`.
    pub fn sorted_index(&self, numerator: u64, level: u32) -> Option<usize> {
        if level == 0 || level > self.level || numerator == 0 || numerator >= (1u64 << level) {
            return None;
        }
        let idx = self.index_of[(numerator << (self.level - level)) as usize];
        (idx != usize::MAX).then_some(idx)
    }
}

/// Sparse upper-triangular matrix in compressed-column form with rows
/// ascending inside each column.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpperFactor {
    dim: usize,
    col_start: Vec<usize>,
    rows: Vec<usize>,
    values: Vec<f64>,
}

impl SparseUpperFactor {
    /// Validating constructor from raw compressed-column arrays.
    pub fn from_parts(
        dim: usize,
        col_start: Vec<usize>,
        rows: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, GridError> {
        if col_start.len() != dim + 1 || col_start.first() != Some(&0) {
            return Err(GridError::Layout("column pointer length".into()));
        }
        if rows.len() != values.len() || col_start[dim] != rows.len() {
            return Err(GridError::Layout("entry count".into()));
        }
        for col in 0..dim {
            let (a, b) = (col_start[col], col_start[col + 1]);
            if b < a || b - a > 3 {
                return Err(GridError::Layout(format!("column {col} has bad extent")));
            }
            let col_rows = &rows[a..b];
            if col_rows.windows(2).any(|w| w[0] >= w[1]) {
                return Err(GridError::Layout(format!("column {col} rows not ascending")));
            }
            if col_rows.iter().any(|&r| r > col) {
                return Err(GridError::Layout(format!("column {col} below diagonal")));
            }
        }
        Ok(Self {
            dim,
            col_start,
            rows,
            values,
        })
    }

    pub fn into_parts(self) -> (usize, Vec<usize>, Vec<usize>, Vec<f64>) {
        (self.dim, self.col_start, self.rows, self.values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(row, value)` entries of column `col`, rows ascending.
    pub fn column(&self, col: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.col_start[col], self.col_start[col + 1]);
        self.rows[a..b].iter().copied().zip(self.values[a..b].iter().copied())
    }

    /// `(row, col, value)` for every stored entry, column-major.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim).flat_map(move |c| self.column(c).map(move |(r, v)| (r, c, v)))
    }

    /// Row vector times factor: `out = vᵀ R`.
    pub fn transpose_apply(&self, v: &[f64]) -> Result<Vec<f64>, GridError> {
        if v.len() != self.dim {
            return Err(GridError::Dimension {
                expected: self.dim,
                got: v.len(),
            });
        }
        let mut out = vec![0.0; self.dim];
        self.transpose_apply_into(v, &mut out);
        Ok(out)
    }

    /// Unchecked variant of [`transpose_apply`](Self::transpose_apply); both
    /// slices must have length `dim`.
    #[inline]
    pub fn transpose_apply_into(&self, v: &[f64], out: &mut [f64]) {
        for (col, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.col_start[col], self.col_start[col + 1]);
            let mut acc = 0.0;
            for k in a..b {
                acc += v[self.rows[k]] * self.values[k];
            }
            *o = acc;
        }
    }

    pub fn densify(&self) -> Tensor {
        let mut dense = Tensor::zeros(&[self.dim, self.dim]);
        let n = self.dim;
        for (r, c, v) in self.triplets() {
            dense.data_mut()[r * n + c] = v;
        }
        dense
    }

    /// Writes `row,col,value` lines with a header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "row,col,value")?;
        for (r, c, v) in self.triplets() {
            writeln!(out, "{r},{c},{v:e}")?;
        }
        Ok(())
    }
}

/// Solves `A c = e_target` for `n ≤ 3` by Gaussian elimination with
/// partial pivoting. Returns `None` on a (numerically) zero pivot.
fn solve_small(mut a: [[f64; 3]; 3], n: usize, target: usize) -> Option<[f64; 3]> {
    let mut b = [0.0; 3];
    b[target] = 1.0;
    let scale = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| a[i][j].abs())
        .fold(0.0, f64::max);
    let tol = scale * 1e-14;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() <= tol {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

/// Inverse of the upper Cholesky factor of `k(U, U)` for the sorted dyadic
/// grid `U`, built column by column from 3×3 neighbour systems in O(M).
///
/// `R` satisfies `Rᵀ k(U, U) R = I` with `R = [Lᵀ]⁻¹`, `L Lᵀ = k(U, U)`.
pub fn inverse_chol_factor(
    kernel: &LaplaceKernel,
    grid: &DyadicGrid,
) -> Result<SparseUpperFactor, GridError> {
    let m = grid.len();
    let top = grid.level();
    let mut col_start = Vec::with_capacity(m + 1);
    let mut rows = Vec::with_capacity(3 * m);
    let mut values = Vec::with_capacity(3 * m);
    col_start.push(0);

    for level in 1..=top {
        let last = (1u64 << level) - 1;
        for i in (1..=last).step_by(2) {
            let mid = grid.sorted_index(i, level).expect("grid holds every level");
            // Neighbours live at coarser levels; the outermost points of a
            // level have a missing neighbour, which contributes k(±∞, ·) = 0
            // and simply drops out of the local system.
            let left = if i > 1 { grid.sorted_index(i - 1, level) } else { None };
            let right = if i < last { grid.sorted_index(i + 1, level) } else { None };

            let mut local = [0usize; 3];
            let mut n = 0;
            if let Some(l) = left {
                local[n] = l;
                n += 1;
            }
            let mid_pos = n;
            local[n] = mid;
            n += 1;
            if let Some(r) = right {
                local[n] = r;
                n += 1;
            }

            let pts = grid.points();
            let mut a = [[0.0; 3]; 3];
            for r in 0..n {
                for c in 0..n {
                    a[r][c] = kernel.eval(pts[local[r]], pts[local[c]]);
                }
            }
            let coef = solve_small(a, n, mid_pos).ok_or(GridError::Singular { column: mid })?;
            let c_mid = coef[mid_pos];
            if !(c_mid > 0.0 && c_mid.is_finite()) {
                return Err(GridError::NonPositivePivot {
                    column: mid,
                    value: c_mid,
                });
            }
            let norm = c_mid.sqrt();

            let mut entries: [(usize, f64); 3] = [(0, 0.0); 3];
            for k in 0..n {
                entries[k] = (local[k], coef[k] / norm);
            }
            let entries = &mut entries[..n];
            entries.sort_unstable_by_key(|e| e.0);
            for &(r, v) in entries.iter() {
                rows.push(r);
                values.push(v);
            }
            col_start.push(rows.len());
        }
    }

    Ok(SparseUpperFactor {
        dim: m,
        col_start,
        rows,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reconstruction_error(kernel: &LaplaceKernel, grid: &DyadicGrid, r: &SparseUpperFactor) -> f64 {
        let m = grid.len();
        let k = kernel.cross_cov(grid.points(), grid);
        let rd = r.densify();
        // Rᵀ K R via two dense products
        let mut kr = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                kr[i * m + j] = (0..m).map(|p| k.at(i, p) * rd.at(p, j)).sum();
            }
        }
        let mut err = 0.0;
        for i in 0..m {
            for j in 0..m {
                let v: f64 = (0..m).map(|p| rd.at(p, i) * kr[p * m + j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                err += (v - target).powi(2);
            }
        }
        err.sqrt()
    }

    #[test]
    fn level_three_order() {
        let g = sorted_dyadic(3, Domain::unit()).unwrap();
        assert_eq!(
            g.points(),
            &[0.5, 0.25, 0.75, 0.125, 0.375, 0.625, 0.875]
        );
        assert_eq!(g.level_of(0), 1);
        assert_eq!(g.level_of(4), 3);
        assert_eq!(g.odd_index(4), 3);
        assert_eq!(g.sorted_index(3, 3), Some(4));
        assert_eq!(g.sorted_index(2, 2), Some(0));
        assert_eq!(g.sorted_index(0, 2), None);
        assert_eq!(g.sorted_index(8, 3), None);
    }

    #[test]
    fn level_one_and_symmetric_domain() {
        let g = sorted_dyadic(1, Domain::unit()).unwrap();
        assert_eq!(g.points(), &[0.5]);
        let g = sorted_dyadic(6, Domain::symmetric()).unwrap();
        assert_eq!(g.len(), 63);
        let min = g.points().iter().copied().fold(f64::INFINITY, f64::min);
        let max = g.points().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, -31.0 / 32.0);
        assert_eq!(max, 31.0 / 32.0);
    }

    #[test]
    fn levels_ascend_within_level() {
        let g = sorted_dyadic(5, Domain::new(-3.0, 2.0).unwrap()).unwrap();
        for j in 1..g.len() {
            assert!(g.level_of(j) >= g.level_of(j - 1));
            if g.level_of(j) == g.level_of(j - 1) {
                assert!(g.points()[j] > g.points()[j - 1]);
            }
        }
    }

    #[test]
    fn construction_errors() {
        assert_eq!(sorted_dyadic(0, Domain::unit()), Err(GridError::ZeroLevel));
        assert!(matches!(Domain::new(1.0, 1.0), Err(GridError::DegenerateDomain { .. })));
        assert!(matches!(Domain::new(2.0, 1.0), Err(GridError::DegenerateDomain { .. })));
        assert!(sorted_dyadic(MAX_LEVEL + 1, Domain::unit()).is_err());
    }

    #[test]
    fn single_point_factor_is_one() {
        let k = LaplaceKernel::new(1.0).unwrap();
        let g = sorted_dyadic(1, Domain::unit()).unwrap();
        let r = inverse_chol_factor(&k, &g).unwrap();
        assert_eq!(r.densify().data(), &[1.0]);
    }

    #[test]
    fn reconstruction_across_levels_and_lengthscales() {
        for level in 1..=8 {
            for theta in [0.3, 1.0, 3.0] {
                for domain in [Domain::unit(), Domain::symmetric()] {
                    let k = LaplaceKernel::new(theta).unwrap();
                    let g = sorted_dyadic(level, domain).unwrap();
                    let r = inverse_chol_factor(&k, &g).unwrap();
                    let m = g.len();
                    assert!(r.nnz() <= 3 * m - 2 || m == 1);
                    let err = reconstruction_error(&k, &g, &r);
                    assert!(err < 1e-8, "L={level} θ={theta} err={err}");
                }
            }
        }
    }

    #[test]
    fn sparsity_pattern_is_neighbour_indices() {
        let k = LaplaceKernel::new(1.0).unwrap();
        let g = sorted_dyadic(5, Domain::unit()).unwrap();
        let r = inverse_chol_factor(&k, &g).unwrap();
        for col in 0..g.len() {
            let (i, l) = (g.odd_index(col), g.level_of(col));
            let mut expected = vec![col];
            if i > 1 {
                expected.push(g.sorted_index(i - 1, l).unwrap());
            }
            if i < (1 << l) - 1 {
                expected.push(g.sorted_index(i + 1, l).unwrap());
            }
            expected.sort_unstable();
            let got: Vec<usize> = r.column(col).map(|(row, _)| row).collect();
            assert_eq!(got, expected);
            assert!(got.iter().all(|&row| row <= col));
        }
    }

    #[test]
    fn affine_invariance() {
        let g0 = sorted_dyadic(5, Domain::unit()).unwrap();
        let r0 = inverse_chol_factor(&LaplaceKernel::new(0.8).unwrap(), &g0).unwrap();
        let dom = Domain::new(-2.0, 3.0).unwrap();
        let g1 = sorted_dyadic(5, dom).unwrap();
        let r1 = inverse_chol_factor(&LaplaceKernel::new(0.8 * dom.width()).unwrap(), &g1).unwrap();
        for ((_, _, a), (_, _, b)) in r0.triplets().zip(r1.triplets()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_apply_matches_dense() {
        let k = LaplaceKernel::new(1.0).unwrap();
        let g = sorted_dyadic(3, Domain::unit()).unwrap();
        let r = inverse_chol_factor(&k, &g).unwrap();
        assert_eq!(r.transpose_apply(&[0.0; 7]).unwrap(), vec![0.0; 7]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = r.transpose_apply(&v).unwrap();
        let d = r.densify();
        for c in 0..7 {
            let dense: f64 = (0..7).map(|row| v[row] * d.at(row, c)).sum();
            assert!((fast[c] - dense).abs() < 1e-12);
        }
        assert!(matches!(
            r.transpose_apply(&[1.0; 6]),
            Err(GridError::Dimension { expected: 7, got: 6 })
        ));
        let one = SparseUpperFactor::from_parts(1, vec![0, 1], vec![0], vec![1.0]).unwrap();
        assert_eq!(one.transpose_apply(&[2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn from_parts_rejects_bad_layouts() {
        assert!(SparseUpperFactor::from_parts(2, vec![0, 1], vec![0], vec![1.0]).is_err());
        // lower-triangular entry
        assert!(SparseUpperFactor::from_parts(2, vec![0, 1, 2], vec![1, 1], vec![1.0, 1.0]).is_err());
        // unsorted rows
        assert!(SparseUpperFactor::from_parts(2, vec![0, 1, 3], vec![0, 1, 0], vec![1.0; 3]).is_err());
    }

    #[test]
    fn duplicated_points_are_singular() {
        let a = [[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(solve_small(a, 3, 1).is_none());
    }

    #[test]
    fn csv_dump_has_header_and_all_entries() {
        let k = LaplaceKernel::new(1.0).unwrap();
        let g = sorted_dyadic(2, Domain::unit()).unwrap();
        let r = inverse_chol_factor(&k, &g).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("row,col,value\n"));
        assert_eq!(text.lines().count(), r.nnz() + 1);
    }
}
