//! Dense linear algebra helpers shared by the solvers: LU solves with
//! explicit singularity reporting, SVD null spaces with a relative rank
//! cutoff, and a canonical form for kernel bases.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Row-major matrix payload for JSON reports, with explicit dimensions.
#[derive(Debug, Clone, Serialize)]
pub struct SerMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for SerMatrix {
    fn from(m: &DMatrix<f64>) -> SerMatrix {
        SerMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect(),
        }
    }
}

impl SerMatrix {
    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.rows, self.cols, self.data.iter().copied())
    }
}

/// Solves `a x = b` by LU with partial pivoting.
pub fn solve_lu(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let lu = a.clone().lu();
    lu.solve(b).ok_or_else(|| Error::Regularity {
        context: context.to_string(),
        min_sv: min_singular_value(a),
    })
}

/// Smallest singular value (0 for an empty matrix).
pub fn min_singular_value(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(f64::INFINITY, |m, s| m.min(*s))
}

/// Numerical rank with relative threshold `tol * sigma_max`.
pub fn rank(a: &DMatrix<f64>, tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.iter().fold(0.0f64, |m, s| m.max(*s));
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > tol * smax).count()
}

/// Orthonormal basis of the right null space of `a`, one column per kernel
/// direction. Singular values below `tol * sigma_max` count as zero.
///
/// An empty `a` (zero rows) returns the identity: everything is in the
/// kernel.
pub fn kernel_basis(a: &DMatrix<f64>, ncols: usize, tol: f64) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return DMatrix::identity(ncols, ncols);
    }
    debug_assert_eq!(a.ncols(), ncols);
    // Pad wide matrices square with zero rows: nalgebra's thin SVD only
    // returns min(nrows, ncols) right-singular vectors, and the kernel
    // lives in the ones it would drop.
    let a = if a.nrows() < ncols {
        let mut padded = DMatrix::zeros(ncols, ncols);
        padded.view_mut((0, 0), (a.nrows(), ncols)).copy_from(a);
        padded
    } else {
        a.clone()
    };
    let svd = a.clone().svd(false, true);
    let vt = svd.v_t.expect("svd requested v_t");
    let sv = &svd.singular_values;
    let smax = sv.iter().fold(0.0f64, |m, s| m.max(*s));
    let cutoff = if smax == 0.0 { f64::INFINITY } else { tol * smax };
    // Rows of v_t whose singular value vanishes, plus rows beyond the
    // decomposition's rank (nalgebra returns min(nrows, ncols) values).
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for (i, s) in sv.iter().enumerate() {
        if *s <= cutoff {
            cols.push(vt.row(i).transpose());
        }
    }
    for i in sv.len()..ncols {
        cols.push(vt.row(i).transpose());
    }
    let mut out = DMatrix::zeros(ncols, cols.len());
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    out
}

/// Reduced row echelon form in place; returns pivot column indices.
///
/// Entries within `snap_tol` of an integer in {-1, 0, 1} are snapped to it
/// afterwards. Kernel bases coming out of an SVD are only defined up to
/// rotation; RREF plus snapping gives a deterministic representative and
/// recovers exact unit vectors whenever the kernel is axis-aligned.
pub fn rref(m: &mut DMatrix<f64>, rank_tol: f64, snap_tol: f64) -> Vec<usize> {
    let (nr, nc) = m.shape();
    let scale = m.amax().max(1e-300);
    let mut pivots = Vec::new();
    let mut r = 0;
    for c in 0..nc {
        if r >= nr {
            break;
        }
        // Partial pivot within column c.
        let (ibest, vbest) = (r..nr)
            .map(|i| (i, m[(i, c)].abs()))
            .fold((r, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if vbest <= rank_tol * scale {
            continue;
        }
        m.swap_rows(r, ibest);
        let piv = m[(r, c)];
        for j in 0..nc {
            m[(r, j)] /= piv;
        }
        for i in 0..nr {
            if i != r {
                let f = m[(i, c)];
                if f != 0.0 {
                    for j in 0..nc {
                        m[(i, j)] -= f * m[(r, j)];
                    }
                }
            }
        }
        pivots.push(c);
        r += 1;
    }
    for v in m.iter_mut() {
        let rounded = v.round();
        if (rounded == -1.0 || rounded == 0.0 || rounded == 1.0) && (*v - rounded).abs() < snap_tol
        {
            *v = rounded;
        }
    }
    pivots
}

/// Canonicalizes a kernel basis (columns of `basis`): RREF over the
/// transposed basis so each returned column has a leading exact 1.
pub fn canonical_kernel(basis: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    if basis.ncols() == 0 {
        return basis.clone();
    }
    let mut rows = basis.transpose();
    rref(&mut rows, rank_tol, 1e-10);
    rows.transpose()
}

/// True if `row` lies in the row span of `rows` at relative tolerance `tol`.
pub fn in_row_span(rows: &DMatrix<f64>, row: &DVector<f64>, tol: f64) -> bool {
    if rows.nrows() == 0 {
        return row.amax() <= tol;
    }
    let r0 = rank(rows, tol);
    let mut stacked = rows.clone().insert_row(rows.nrows(), 0.0);
    stacked.set_row(rows.nrows(), &row.transpose());
    rank(&stacked, tol) == r0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_of_full_rank_square_is_empty() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(kernel_basis(&a, 2, 1e-9).ncols(), 0);
    }

    #[test]
    fn kernel_of_wide_matrix() {
        // Rows [1 0 0; 0 1 0]: kernel = span e3.
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let k = kernel_basis(&a, 3, 1e-9);
        assert_eq!(k.ncols(), 1);
        let k = canonical_kernel(&k, 1e-9);
        assert_eq!(k[(0, 0)], 0.0);
        assert_eq!(k[(1, 0)], 0.0);
        assert_eq!(k[(2, 0)], 1.0);
    }

    #[test]
    fn canonical_kernel_recovers_axis_vectors_from_rotated_basis() {
        // Kernel = span{e1, e3}, presented as a rotated orthonormal basis.
        let c = 0.6f64;
        let s = (1.0 - c * c).sqrt();
        let basis = DMatrix::from_row_slice(4, 2, &[c, -s, 0.0, 0.0, s, c, 0.0, 0.0]);
        let canon = canonical_kernel(&basis, 1e-9);
        assert_eq!(canon.ncols(), 2);
        let mut seen = [false; 2];
        for j in 0..2 {
            let col = canon.column(j);
            if col[0] == 1.0 && col[2] == 0.0 {
                seen[0] = true;
            }
            if col[2] == 1.0 && col[0] == 0.0 {
                seen[1] = true;
            }
            assert_eq!(col[1], 0.0);
            assert_eq!(col[3], 0.0);
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn empty_constraint_set_kernel_is_identity() {
        let a = DMatrix::zeros(0, 3);
        let k = kernel_basis(&a, 3, 1e-9);
        assert_eq!(k, DMatrix::identity(3, 3));
    }

    #[test]
    fn row_span_membership() {
        let rows = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let inside = DVector::from_vec(vec![2.0, -3.0, 2.0]);
        let outside = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        assert!(in_row_span(&rows, &inside, 1e-9));
        assert!(!in_row_span(&rows, &outside, 1e-9));
    }

    #[test]
    fn solve_lu_reports_singularity() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        match solve_lu(&a, &b, "test") {
            Err(Error::Regularity { min_sv, .. }) => assert!(min_sv < 1e-12),
            other => panic!("expected regularity error, got {other:?}"),
        }
    }
}
