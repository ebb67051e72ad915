//! Dense decompositions used across the pipeline.
//!
//! Arrays live in `ndarray`. Symmetric eigenproblems go through `faer`, which
//! is much faster on the large kernel matrices; small SVDs use `nalgebra`. Every routine here applies a fixed sign convention so results
//! are reproducible bit-for-bit.

use nalgebra::{DMatrix, SVD};
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut1, Axis};

/// Relative tolerance for treating two magnitudes as tied when choosing the
/// pivot entry of a singular vector.
const TIE_TOLERANCE: f64 = 1e-9;

pub(crate) fn to_nalgebra(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Index of the largest-magnitude entry; near-ties go to the lowest index.
fn pivot_index(v: &[f64]) -> Option<usize> {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return None;
    }
    v.iter().position(|x| x.abs() >= max * (1.0 - TIE_TOLERANCE))
}

/// Returns `true` when the vector must be negated so that its pivot entry is
/// positive.
pub(crate) fn needs_flip(v: &[f64]) -> bool {
    match pivot_index(v) {
        Some(i) => v[i] < 0.0,
        None => false,
    }
}

pub(crate) fn canonicalize_sign(mut v: ArrayViewMut1<'_, f64>) -> bool {
    let flip = match v.as_slice() {
        Some(s) => needs_flip(s),
        None => needs_flip(&v.to_vec()),
    };
    if flip {
        v.mapv_inplace(|x| -x);
    }
    flip
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order (stable for exact ties) and eigenvectors sign-normalized.
pub fn symmetric_eigen(a: ArrayView2<'_, f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    if n == 0 {
        return (Array1::zeros(0), Array2::zeros((0, 0)));
    }
    let m = faer::Mat::<f64>::from_fn(n, n, |i, j| a[[i, j]]);
    let (vals, vecs) = match m.self_adjoint_eigen(faer::Side::Lower) {
        Ok(eig) => {
            let s = eig.S().column_vector();
            let u = eig.U();
            (
                (0..n).map(|i| s[i]).collect::<Vec<_>>(),
                Array2::from_shape_fn((n, n), |(i, j)| u[(i, j)]),
            )
        }
        // The iterative solver did not converge; fall back to nalgebra.
        Err(_) => {
            let eig = nalgebra::SymmetricEigen::new(to_nalgebra(a));
            (eig.eigenvalues.iter().copied().collect(), from_nalgebra(&eig.eigenvectors))
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[j].partial_cmp(&vals[i]).unwrap_or(std::cmp::Ordering::Equal));
    let values = Array1::from_iter(order.iter().map(|&i| vals[i]));
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&vecs.column(src));
        canonicalize_sign(vectors.column_mut(dst));
    }
    (values, vectors)
}

/// Orthonormal polar factor `U Vᵀ` of a square matrix, computed from its SVD.
pub fn polar_rotation(h: ArrayView2<'_, f64>) -> Array2<f64> {
    let svd = SVD::new(to_nalgebra(h), true, true);
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    from_nalgebra(&(u * v_t))
}

pub fn frobenius(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// ‖AᵀA − I‖_F.
pub fn orthonormality_defect(a: ArrayView2<'_, f64>) -> f64 {
    let mut g = a.t().dot(&a);
    for i in 0..g.nrows() {
        g[[i, i]] -= 1.0;
    }
    frobenius(g.view())
}

pub fn column_means(a: ArrayView2<'_, f64>) -> Array1<f64> {
    a.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(a.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn eigen_is_sorted_and_signed() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let (vals, vecs) = symmetric_eigen(a.view());
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // (1,1)/√2 for the top pair; tie on magnitude resolves to index 0 > 0.
        assert!(vecs[[0, 0]] > 0.0 && vecs[[1, 0]] > 0.0);
        assert!(vecs[[0, 1]] > 0.0);
    }

    #[test]
    fn polar_of_rotation_is_itself() {
        let t: f64 = 0.3;
        let r = array![[t.cos(), -t.sin()], [t.sin(), t.cos()]];
        let p = polar_rotation((&r * 5.0).view());
        assert!(frobenius((&p - &r).view()) < 1e-12);
    }

    #[test]
    fn pivot_prefers_lowest_index_on_ties() {
        assert!(!needs_flip(&[0.5, -0.5]));
        assert!(needs_flip(&[-0.5, 0.5]));
        assert!(needs_flip(&[0.1, -0.9]));
        assert!(!needs_flip(&[0.0, 0.0]));
    }
}
