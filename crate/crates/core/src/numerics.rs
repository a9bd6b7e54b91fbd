//! Dense linear algebra and normal-distribution helpers.
//!
//! Cholesky, LU, QR and symmetric eigen factorizations come from
//! `nalgebra`. The SVD is a one-sided Jacobi iteration: it is accurate for
//! the small matrices used here and, unlike `nalgebra::SVD`, returns
//! consistent singular vectors for rank-deficient input with zero rows.
//!
//! Conventions: singular values sorted in decreasing order, full
//! orthogonal factors, a single rank threshold shared by [`pinv`] and
//! [`rank_estimate`], and conditioning checks before every SPD solve.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative rank threshold per unit of `max(m, n)`.
pub const DEFAULT_RTOL: f64 = 1e-12;

/// Full singular value decomposition `a = u * diag(s) * vt`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// m x m orthogonal.
    pub u: DMatrix<f64>,
    /// min(m, n) singular values, decreasing.
    pub s: DVector<f64>,
    /// n x n orthogonal.
    pub vt: DMatrix<f64>,
}

fn check_finite(a: &DMatrix<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput)
    }
}

/// One-sided Jacobi SVD of a tall matrix (m >= n).
///
/// Returns `(u, s, v)` with `a = u diag(s) v'`, `u` m x n with unit or
/// zero columns, `v` n x n orthogonal. Singular values are unsorted.
fn jacobi_tall(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let n = a.ncols();
    let mut u = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = u.column(p).norm_squared();
                let beta = u.column(q).norm_squared();
                let gamma = u.column(p).dot(&u.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (mat, rows) in [(&mut u, a.nrows()), (&mut v, n)] {
                    for i in 0..rows {
                        let (xp, xq) = (mat[(i, p)], mat[(i, q)]);
                        mat[(i, p)] = c * xp - s * xq;
                        mat[(i, q)] = s * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let s = DVector::from_fn(n, |j, _| u.column(j).norm());
    for j in 0..n {
        if s[j] > 0.0 {
            let sj = s[j];
            u.column_mut(j).scale_mut(1.0 / sj);
        }
    }
    (u, s, v)
}

/// Thin SVD `(u, s, vt)` with decreasing singular values. Columns of `u`
/// (rows of `vt`) paired with a zero singular value may be zero.
fn thin_sorted_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (m, n) = a.shape();
    let k = m.min(n);
    let (u, s, vt) = if m >= n {
        let (u, s, v) = jacobi_tall(a);
        (u, s, v.transpose())
    } else {
        let (u, s, v) = jacobi_tall(&a.transpose());
        (v, s, u.transpose())
    };
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let s_sorted = DVector::from_iterator(k, idx.iter().map(|&i| s[i]));
    let u_sorted = DMatrix::from_fn(m, k, |r, c| u[(r, idx[c])]);
    let vt_sorted = DMatrix::from_fn(k, n, |r, c| vt[(idx[r], c)]);
    (u_sorted, s_sorted, vt_sorted)
}

/// Extends orthonormal columns `q` (m x k) to an m x m orthogonal matrix.
fn complete_basis(q: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, k) = q.shape();
    if k == m {
        return q.clone();
    }
    let mut aug = DMatrix::zeros(m, k + m);
    aug.columns_mut(0, k).copy_from(q);
    aug.columns_mut(k, m).fill_with_identity();
    let mut full = aug.qr().q();
    full.columns_mut(0, k).copy_from(q);
    full
}

/// Full SVD with sorted singular values.
pub fn svd_full(a: &DMatrix<f64>) -> Result<SvdFactors> {
    check_finite(a)?;
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok(SvdFactors {
            u: DMatrix::identity(m, m),
            s: DVector::zeros(0),
            vt: DMatrix::identity(n, n),
        });
    }
    let (u, s, vt) = thin_sorted_svd(a);
    let positive = s.iter().filter(|&&v| v > 0.0).count();
    let u = complete_basis(&u.columns(0, positive).into_owned());
    let v = complete_basis(&vt.rows(0, positive).transpose());
    Ok(SvdFactors {
        u,
        s,
        vt: v.transpose(),
    })
}

/// Singular values in decreasing order.
pub fn singular_values(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_finite(a)?;
    if a.is_empty() {
        return Ok(DVector::zeros(0));
    }
    Ok(thin_sorted_svd(a).1)
}

fn threshold(s_max: f64, shape: (usize, usize), rtol: Option<f64>) -> f64 {
    let rel = rtol.unwrap_or(DEFAULT_RTOL * shape.0.max(shape.1) as f64);
    rel * s_max
}

/// Moore-Penrose pseudoinverse.
///
/// Singular values at or below `rtol * s_max` are treated as zero. The
/// default `rtol` is `1e-12 * max(m, n)`.
pub fn pinv(a: &DMatrix<f64>, rtol: Option<f64>) -> Result<DMatrix<f64>> {
    check_finite(a)?;
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok(DMatrix::zeros(n, m));
    }
    let (u, s, vt) = thin_sorted_svd(a);
    let tol = threshold(s[0], (m, n), rtol);
    let mut out = DMatrix::zeros(n, m);
    for (k, &sk) in s.iter().enumerate() {
        if sk <= tol || sk == 0.0 {
            break;
        }
        out += (vt.row(k).transpose() / sk) * u.column(k).transpose();
    }
    Ok(out)
}

/// Number of singular values strictly above `rtol * s_max`.
pub fn rank_estimate(a: &DMatrix<f64>, rtol: Option<f64>) -> Result<usize> {
    let s = singular_values(a)?;
    if s.is_empty() || s[0] == 0.0 {
        return Ok(0);
    }
    let tol = threshold(s[0], a.shape(), rtol);
    Ok(s.iter().filter(|&&v| v > tol).count())
}

/// Returns `0.5 * (a + a')`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn is_symmetric(a: &DMatrix<f64>) -> bool {
    let scale = a.amax().max(1e-300);
    a.is_square() && (a - a.transpose()).amax() <= 1e-10 * scale
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eig_extremes(a: &DMatrix<f64>) -> (f64, f64) {
    let ev = SymmetricEigen::new(symmetrize(a)).eigenvalues;
    let lo = ev.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Solves `a x = rhs` for symmetric positive definite `a`.
///
/// Fails with [`Error::SingularSystem`] when the eigenvalue ratio is below
/// working precision.
pub fn spd_solve(a: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_finite(a)?;
    check_finite(rhs)?;
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, rhs.ncols()));
    }
    let (lo, hi) = eig_extremes(a);
    if hi.is_nan() || hi <= 0.0 || lo <= 4.0 * f64::EPSILON * n as f64 * hi {
        return Err(Error::SingularSystem);
    }
    let chol = Cholesky::new(symmetrize(a)).ok_or(Error::SingularSystem)?;
    Ok(chol.solve(rhs))
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_solve(a, &DMatrix::identity(a.nrows(), a.nrows()))
}

/// Symmetric square root factor `l` with `l * l' = a` for PSD `a`.
///
/// Negative eigenvalues within rounding are clamped to zero, so singular
/// covariance matrices are accepted.
pub fn psd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_finite(a)?;
    if !is_symmetric(a) {
        return Err(Error::Domain("covariance matrix is not symmetric".into()));
    }
    if a.is_empty() {
        return Ok(a.clone());
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let scale = eig.eigenvalues.amax().max(1e-300);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::Domain(
            "covariance matrix is not positive semidefinite".into(),
        ));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root))
}

/// Solves the penalized weighted normal equations
/// `(k' w k + lambda * penalty) theta = k' w b`
/// for symmetric positive definite `w` and symmetric semidefinite `penalty`.
pub fn penalized_solve(
    k: &DMatrix<f64>,
    w: &DMatrix<f64>,
    b: &DVector<f64>,
    lambda: f64,
    penalty: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let (m, p) = k.shape();
    if w.shape() != (m, m) || b.len() != m || penalty.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!(
            "k {m}x{p}, w {:?}, b {}, penalty {:?}",
            w.shape(),
            b.len(),
            penalty.shape()
        )));
    }
    check_finite(k)?;
    check_finite(w)?;
    check_finite(penalty)?;
    if !b.iter().all(|v| v.is_finite()) || !lambda.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    if lambda < 0.0 {
        return Err(Error::Domain(format!("negative regularization {lambda}")));
    }
    let lw = match is_symmetric(w)
        .then(|| Cholesky::new(symmetrize(w)))
        .flatten()
    {
        Some(c) => c.l(),
        None => return Err(Error::NonPositiveDefiniteWeight),
    };
    if !is_symmetric(penalty) {
        return Err(Error::Domain("penalty matrix is not symmetric".into()));
    }
    let Some(lp) = Cholesky::new(symmetrize(penalty)).map(|c| c.l()) else {
        // Semidefinite penalty: the normal equations are the only route.
        let kw = k.transpose() * w;
        let a = &kw * k + penalty * lambda;
        let rhs = &kw * b;
        let x = spd_solve(&a, &DMatrix::from_column_slice(p, 1, rhs.as_slice()))?;
        return Ok(x.column(0).into_owned());
    };
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    // With w = lw lw' and penalty = lp lp', substitute phi = lp' theta and
    // solve the ridge problem for lw' k lp^-T through its SVD, which avoids
    // squaring the condition number of k.
    let a = lp
        .solve_lower_triangular(&(k.transpose() * &lw))
        .ok_or(Error::SingularSystem)?
        .transpose();
    let rhs = lw.transpose() * b;
    let (u, s, vt) = thin_sorted_svd(&a);
    let s_max = s.iter().copied().fold(0.0, f64::max);
    let smallest = if m < p {
        0.0
    } else {
        s.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let hi = s_max * s_max + lambda;
    if hi.is_nan()
        || hi <= 0.0
        || smallest * smallest + lambda <= 4.0 * f64::EPSILON * p as f64 * hi
    {
        return Err(Error::SingularSystem);
    }
    // Directions below the pinv rank threshold are rounding noise; dropping
    // them keeps the lambda -> 0 limit equal to the pseudoinverse solution.
    let tol = threshold(s_max, a.shape(), None);
    let mut phi = DVector::zeros(p);
    for (j, &sj) in s.iter().enumerate() {
        if sj <= tol || sj == 0.0 {
            continue;
        }
        let coef = sj / (sj * sj + lambda) * u.column(j).dot(&rhs);
        phi += vt.row(j).transpose() * coef;
    }
    lp.transpose()
        .solve_upper_triangular(&phi)
        .ok_or(Error::SingularSystem)
}

/// Ridge-regularized weighted least squares: `(k' w k + lambda I)^-1 k' w b`.
pub fn ridge_solve(
    k: &DMatrix<f64>,
    w: &DMatrix<f64>,
    b: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    let p = k.ncols();
    penalized_solve(k, w, b, lambda, &DMatrix::identity(p, p))
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
///
/// Acklam's rational approximation followed by one Halley step against
/// the erfc-based distribution function.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "quantile probability {p} not in (0, 1)"
        )));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // Refine on the tail closer to p to avoid cancellation in cdf(x) - p.
    let e = if p < 0.5 {
        normal_cdf(x) - p
    } else {
        (1.0 - p) - 0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
    };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}
