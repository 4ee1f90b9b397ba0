//! Thin bindings to the system LAPACK/BLAS for the two dense kernels the
//! tensor engine needs: complex singular value decomposition and complex
//! matrix products. Everything else in the crate uses plain `ndarray`
//! arithmetic.
//!
//! All public helpers take and return row-major arrays. LAPACK is
//! column-major, so a row-major matrix is handed over as its transpose;
//! for the SVD the transposed factors land exactly in the row-major
//! output buffers (A^T = U* S V^T implies U_A = (V^H)^T and V^H_A = U^T,
//! which are the raw LAPACK buffers reinterpreted), so no copies or
//! conjugations are needed beyond the input clone that LAPACK destroys.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::C64;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("lapack argument {0} had an illegal value")]
    BadArgument(i32),
    #[error("singular value decomposition did not converge")]
    SvdFailed,
}

#[allow(clippy::too_many_arguments)]
extern "C" {
    fn zgesdd_(
        jobz: *const u8,
        m: *const i32,
        n: *const i32,
        a: *mut C64,
        lda: *const i32,
        s: *mut f64,
        u: *mut C64,
        ldu: *const i32,
        vt: *mut C64,
        ldvt: *const i32,
        work: *mut C64,
        lwork: *const i32,
        rwork: *mut f64,
        iwork: *mut i32,
        info: *mut i32,
    );
    fn zgesvd_(
        jobu: *const u8,
        jobvt: *const u8,
        m: *const i32,
        n: *const i32,
        a: *mut C64,
        lda: *const i32,
        s: *mut f64,
        u: *mut C64,
        ldu: *const i32,
        vt: *mut C64,
        ldvt: *const i32,
        work: *mut C64,
        lwork: *const i32,
        rwork: *mut f64,
        info: *mut i32,
    );
    fn zgemm_(
        transa: *const u8,
        transb: *const u8,
        m: *const i32,
        n: *const i32,
        k: *const i32,
        alpha: *const C64,
        a: *const C64,
        lda: *const i32,
        b: *const C64,
        ldb: *const i32,
        beta: *const C64,
        c: *mut C64,
        ldc: *const i32,
    );
}

/// Factors `(u, s, vh)` of a thin SVD.
pub type SvdFactors = (Array2<C64>, Array1<f64>, Array2<C64>);

/// Thin SVD `a = u · diag(s) · vh` with `u: m×r`, `s: r`, `vh: r×n`,
/// `r = min(m, n)`. Singular values are nonnegative and descending.
///
/// Tries the divide-and-conquer driver first and falls back to the
/// QR-iteration driver on the rare convergence failure.
pub fn svd(a: &Array2<C64>) -> Result<SvdFactors, LinalgError> {
    let (m, n) = a.dim();
    assert!(m > 0 && n > 0, "svd of an empty matrix");
    let r = m.min(n);
    // LAPACK sees the row-major buffer as the n×m column-major transpose.
    let (lm, ln) = (n as i32, m as i32);
    let mut s = vec![0.0f64; r];
    // LAPACK's U (n×r) is our vh; LAPACK's VT (r×m) is our u.
    let mut vh_buf = vec![C64::new(0.0, 0.0); n * r];
    let mut u_buf = vec![C64::new(0.0, 0.0); r * m];
    let mut info: i32 = 0;

    let mut work_buf = a.as_slice().expect("contiguous row-major input").to_vec();
    let sdd_ok = unsafe {
        let jobz = b'S';
        let mut iwork = vec![0i32; 8 * r];
        let lrwork = r * (5 * r + 7).max(2 * m.max(n) + 2 * r + 1) + 16;
        let mut rwork = vec![0.0f64; lrwork];
        let mut lwork: i32 = -1;
        let mut query = [C64::new(0.0, 0.0)];
        zgesdd_(
            &jobz, &lm, &ln, work_buf.as_mut_ptr(), &lm, s.as_mut_ptr(),
            vh_buf.as_mut_ptr(), &lm, u_buf.as_mut_ptr(), &(r as i32),
            query.as_mut_ptr(), &lwork, rwork.as_mut_ptr(), iwork.as_mut_ptr(), &mut info,
        );
        if info == 0 {
            lwork = query[0].re as i32;
            let mut work = vec![C64::new(0.0, 0.0); lwork as usize];
            zgesdd_(
                &jobz, &lm, &ln, work_buf.as_mut_ptr(), &lm, s.as_mut_ptr(),
                vh_buf.as_mut_ptr(), &lm, u_buf.as_mut_ptr(), &(r as i32),
                work.as_mut_ptr(), &lwork, rwork.as_mut_ptr(), iwork.as_mut_ptr(), &mut info,
            );
        }
        if info < 0 {
            return Err(LinalgError::BadArgument(-info));
        }
        info == 0
    };

    if !sdd_ok {
        work_buf.copy_from_slice(a.as_slice().unwrap());
        unsafe {
            let jobu = b'S';
            let jobvt = b'S';
            let mut rwork = vec![0.0f64; 5 * r];
            let mut lwork: i32 = -1;
            let mut query = [C64::new(0.0, 0.0)];
            zgesvd_(
                &jobu, &jobvt, &lm, &ln, work_buf.as_mut_ptr(), &lm, s.as_mut_ptr(),
                vh_buf.as_mut_ptr(), &lm, u_buf.as_mut_ptr(), &(r as i32),
                query.as_mut_ptr(), &lwork, rwork.as_mut_ptr(), &mut info,
            );
            if info == 0 {
                lwork = query[0].re as i32;
                let mut work = vec![C64::new(0.0, 0.0); lwork as usize];
                zgesvd_(
                    &jobu, &jobvt, &lm, &ln, work_buf.as_mut_ptr(), &lm, s.as_mut_ptr(),
                    vh_buf.as_mut_ptr(), &lm, u_buf.as_mut_ptr(), &(r as i32),
                    work.as_mut_ptr(), &lwork, rwork.as_mut_ptr(), &mut info,
                );
            }
            if info < 0 {
                return Err(LinalgError::BadArgument(-info));
            }
            if info > 0 {
                return Err(LinalgError::SvdFailed);
            }
        }
    }

    let u = Array2::from_shape_vec((m, r), u_buf).unwrap();
    let vh = Array2::from_shape_vec((r, n), vh_buf).unwrap();
    Ok((u, Array1::from(s), vh))
}

/// Row-major complex matrix product `a · b`.
pub fn matmul(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "inner dimensions must agree");
    let mut c = Array2::<C64>::zeros((m, n));
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let a_std = a.as_standard_layout();
    let b_std = b.as_standard_layout();
    // Row-major product via the transposed column-major identity
    // C^T = B^T A^T.
    let one = C64::new(1.0, 0.0);
    let zero = C64::new(0.0, 0.0);
    unsafe {
        let trans = b'N';
        zgemm_(
            &trans, &trans,
            &(n as i32), &(m as i32), &(k as i32),
            &one,
            b_std.as_slice().expect("contiguous rhs").as_ptr(), &(n as i32),
            a_std.as_slice().expect("contiguous lhs").as_ptr(), &(k as i32),
            &zero,
            c.as_slice_mut().unwrap().as_mut_ptr(), &(n as i32),
        );
    }
    c
}

/// Whether the Hermitian matrix `m` is positive semidefinite up to `tol`,
/// decided by attempting a Cholesky factorization of `m + tol·I`. Success
/// certifies that every eigenvalue exceeds −tol.
pub fn is_positive_semidefinite(m: &Array2<C64>, tol: f64) -> bool {
    let (rows, cols) = m.dim();
    if rows != cols {
        return false;
    }
    let dim = rows;
    let mut l = vec![C64::new(0.0, 0.0); dim * dim];
    for r in 0..dim {
        for c in 0..=r {
            let mut sum = m[[r, c]];
            if r == c {
                sum += tol;
            }
            for k in 0..c {
                sum -= l[r * dim + k] * l[c * dim + k].conj();
            }
            if r == c {
                // A valid factor needs a strictly positive real pivot.
                if sum.re <= 0.0 || sum.re.is_nan() {
                    return false;
                }
                l[r * dim + c] = C64::new(sum.re.sqrt(), 0.0);
            } else {
                l[r * dim + c] = sum / l[c * dim + c];
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn test_matrix(m: usize, n: usize) -> Array2<C64> {
        Array2::from_shape_fn((m, n), |(i, j)| {
            C64::new(
                ((3 * i + 7 * j + 1) % 13) as f64 - 6.0,
                ((5 * i + 2 * j) % 11) as f64 - 5.0,
            )
        })
    }

    #[test]
    fn svd_reconstructs_wide_and_tall_matrices() {
        for (m, n) in [(3, 5), (5, 3), (4, 4), (1, 6), (6, 1)] {
            let a = test_matrix(m, n);
            let (u, s, vh) = svd(&a).unwrap();
            let r = m.min(n);
            assert_eq!(u.dim(), (m, r));
            assert_eq!(vh.dim(), (r, n));
            let mut us = u.clone();
            for (k, col) in us.columns_mut().into_iter().enumerate() {
                let mut col = col;
                col.map_inplace(|x| *x *= s[k]);
            }
            let recon = matmul(&us, &vh);
            for i in 0..m {
                for j in 0..n {
                    assert!(
                        (recon[[i, j]] - a[[i, j]]).norm() < 1e-12,
                        "reconstruction off at ({i},{j})"
                    );
                }
            }
        }
    }

    #[test]
    fn svd_values_descend_and_factors_are_isometries() {
        let a = test_matrix(6, 4);
        let (u, s, vh) = svd(&a).unwrap();
        for w in s.as_slice().unwrap().windows(2) {
            assert!(w[0] >= w[1] && w[1] >= 0.0);
        }
        for p in 0..4 {
            for q in 0..4 {
                let mut uhu = C64::new(0.0, 0.0);
                let mut vvh = C64::new(0.0, 0.0);
                for i in 0..6 {
                    uhu += u[[i, p]].conj() * u[[i, q]];
                }
                for j in 0..4 {
                    vvh += vh[[p, j]] * vh[[q, j]].conj();
                }
                let expect = if p == q { 1.0 } else { 0.0 };
                assert!((uhu - expect).norm() < 1e-13);
                assert!((vvh - expect).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn matmul_matches_naive_product() {
        let a = test_matrix(4, 3);
        let b = test_matrix(3, 5);
        let c = matmul(&a, &b);
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = C64::new(0.0, 0.0);
                for k in 0..3 {
                    acc += a[[i, k]] * b[[k, j]];
                }
                assert!((c[[i, j]] - acc).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn psd_check_accepts_gram_matrices_and_rejects_negative_directions() {
        // b†b is PSD by construction.
        let b = test_matrix(4, 4);
        let mut gram = Array2::<C64>::zeros((4, 4));
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    gram[[i, j]] += b[[k, i]].conj() * b[[k, j]];
                }
            }
        }
        assert!(is_positive_semidefinite(&gram, 1e-10));

        // Rank-deficient but PSD: zero eigenvalue sits inside the tolerance.
        let zero = Array2::<C64>::zeros((3, 3));
        assert!(is_positive_semidefinite(&zero, 1e-12));

        let mut indefinite = gram;
        indefinite[[0, 0]] = C64::new(-1.0, 0.0);
        assert!(!is_positive_semidefinite(&indefinite, 1e-10));
        let neg = Array2::from_diag_elem(2, C64::new(-1e-6, 0.0));
        assert!(!is_positive_semidefinite(&neg, 1e-8));
        assert!(is_positive_semidefinite(&neg, 1e-5));
    }

    #[test]
    fn matmul_identity_roundtrip() {
        let a = test_matrix(3, 3);
        let id = Array2::from_diag_elem(3, C64::new(1.0, 0.0));
        let c = matmul(&a, &id);
        assert_eq!(c, a);
        let rank1 = array![[C64::new(2.0, 1.0)]];
        let row = test_matrix(1, 4);
        let scaled = matmul(&rank1, &row);
        for j in 0..4 {
            assert!((scaled[[0, j]] - C64::new(2.0, 1.0) * row[[0, j]]).norm() < 1e-14);
        }
    }
}
