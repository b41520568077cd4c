//! Dense kernels shared by the solvers: a deterministic thin SVD, the
//! orthonormal Procrustes maximiser, the diagonal-sandwich expectation and
//! Cholesky-based SPD inversion.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const SVD_MAX_ITERS: usize = 10_000;

/// Thin SVD `M = U·diag(S)·Vᵀ` with `r = min(p, q)` columns.
///
/// Singular values are sorted non-increasing and each column of `U` has its
/// largest-magnitude entry nonnegative, so identical inputs give identical
/// factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl ThinSvd {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.s) * self.v.transpose()
    }
}

pub fn thin_svd(m: &DMatrix<f64>) -> Result<ThinSvd> {
    let (p, q) = m.shape();
    let r = p.min(q);
    if r == 0 {
        return Ok(ThinSvd { u: DMatrix::zeros(p, 0), s: DVector::zeros(0), v: DMatrix::zeros(q, 0) });
    }
    let (u_raw, s_raw, v_raw) = raw_svd(m)?;

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| s_raw[b].partial_cmp(&s_raw[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));

    let mut u = DMatrix::zeros(p, r);
    let mut v = DMatrix::zeros(q, r);
    let mut s = DVector::zeros(r);
    for (dst, &src) in order.iter().enumerate() {
        s[dst] = s_raw[src].max(0.0);
        u.set_column(dst, &u_raw.column(src));
        v.set_column(dst, &v_raw.column(src));
        // sign convention: largest |entry| of each U column is nonnegative
        let mut best = 0;
        for i in 1..p {
            if u[(i, dst)].abs() > u[(best, dst)].abs() {
                best = i;
            }
        }
        if u[(best, dst)] < 0.0 {
            u.column_mut(dst).neg_mut();
            v.column_mut(dst).neg_mut();
        }
    }
    Ok(ThinSvd { u, s, v })
}

/// Unsorted thin factors. nalgebra's bidiagonal QR occasionally returns a
/// wrong factorisation for nearly rank-deficient wide inputs, so the result
/// is checked and recomputed by one-sided Jacobi when it does not reproduce
/// the input.
fn raw_svd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let (p, q) = m.shape();
    let tall = if p >= q { m.clone() } else { m.transpose() };
    let tol = 1e-10 * tall.norm().max(f64::MIN_POSITIVE);
    let ok = |u: &DMatrix<f64>, s: &DVector<f64>, v: &DMatrix<f64>| {
        let r = s.len();
        let orth = (u.transpose() * u - DMatrix::identity(r, r)).amax() < 1e-10
            && (v.transpose() * v - DMatrix::identity(r, r)).amax() < 1e-10;
        orth && (u * DMatrix::from_diagonal(s) * v.transpose() - &tall).norm() <= tol
    };
    let nal = nalgebra::SVD::try_new(tall.clone(), true, true, f64::EPSILON, SVD_MAX_ITERS)
        .and_then(|svd| Some((svd.u?, svd.singular_values, svd.v_t?.transpose())));
    let (u, s, v) = match nal {
        Some((u, s, v)) if s.iter().all(|x| x.is_finite() && *x >= 0.0) && ok(&u, &s, &v) => (u, s, v),
        _ => {
            let (u, s, v) = jacobi_svd(&tall);
            if !ok(&u, &s, &v) {
                return Err(Error::ConvergenceFailure);
            }
            (u, s, v)
        }
    };
    Ok(if p >= q { (u, s, v) } else { (v, s, u) })
}

/// One-sided (Hestenes) Jacobi SVD of a tall matrix.
fn jacobi_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (p, q) = a.shape();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(q, q);
    for _ in 0..100 {
        let mut rotated = false;
        for i in 0..q {
            for j in i + 1..q {
                let alpha = w.column(i).norm_squared();
                let beta = w.column(j).norm_squared();
                let gamma = w.column(i).dot(&w.column(j));
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut w, &mut v] {
                    for r in 0..mat.nrows() {
                        let (x, y) = (mat[(r, i)], mat[(r, j)]);
                        mat[(r, i)] = c * x - s * y;
                        mat[(r, j)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let s = DVector::from_fn(q, |i, _| w.column(i).norm());
    let smax = s.max();
    let mut u = DMatrix::zeros(p, q);
    let mut filled = vec![false; q];
    for i in 0..q {
        if s[i] > 1e-300 && s[i] > f64::EPSILON * smax * 1e-3 {
            u.set_column(i, &(w.column(i) / s[i]));
            filled[i] = true;
        }
    }
    // complete U with an orthonormal basis for the null directions
    let mut basis = 0;
    for i in 0..q {
        if filled[i] {
            continue;
        }
        loop {
            let mut e = DVector::zeros(p);
            e[basis % p] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for k in 0..q {
                    if filled[k] {
                        let proj = u.column(k).dot(&e);
                        e -= u.column(k) * proj;
                    }
                }
            }
            let n = e.norm();
            if n > 1e-8 {
                u.set_column(i, &(e / n));
                filled[i] = true;
                break;
            }
        }
    }
    (u, s, v)
}

/// Result of maximising `tr(G·P)` over column-orthonormal `P`.
#[derive(Debug, Clone)]
pub struct Procrustes {
    pub p: DMatrix<f64>,
    /// Sum of singular values of `G`, the attained maximum.
    pub objective: f64,
    /// Set when some singular value of `G` is below `1e-12·max(S)`; the
    /// maximiser is then not unique.
    pub rank_deficient: bool,
}

/// Maximises `tr(G·P)` over `J × M` matrices with orthonormal columns, for a
/// `M × J` matrix `G` with `J ≥ M`. The maximiser is `V·Uᵀ` where `G = U S Vᵀ`.
pub fn orthonormal_procrustes(g: &DMatrix<f64>) -> Result<Procrustes> {
    let (m, j) = g.shape();
    if j < m {
        return Err(Error::ShapeMismatch(0, format!("Procrustes needs J >= M, got {m}x{j}")));
    }
    let svd = thin_svd(g)?;
    let p = &svd.v * svd.u.transpose();
    let smax = svd.s.iter().cloned().fold(0.0, f64::max);
    let rank_deficient = smax == 0.0 || svd.s.iter().any(|&x| x < 1e-12 * smax);
    Ok(Procrustes { p, objective: svd.s.sum(), rank_deficient })
}

/// `E[D aᵀa D]` for independent Gaussian vectors `c ~ N(mean_c, cov_c)` and
/// `a ~ N(mean_a, cov_a)` with `D = diag(c)`: the Hadamard product of the two
/// second-moment matrices.
pub fn hadamard_outer_expectation(
    mean_c: &DVector<f64>,
    cov_c: &DMatrix<f64>,
    mean_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_symmetric(cov_c)?;
    check_symmetric(cov_a)?;
    let second_c = mean_c * mean_c.transpose() + cov_c;
    let second_a = mean_a * mean_a.transpose() + cov_a;
    Ok(second_c.component_mul(&second_a))
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-10 * scale {
        Err(Error::AsymmetricInput(asym))
    } else {
        Ok(())
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Inverse and log-determinant of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdInverse {
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
}

/// Inverts an SPD matrix by Cholesky, retrying once with `1e-10·trace` added
/// to the diagonal.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<SpdInverse> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let chol = match sym.clone().cholesky() {
        Some(c) => c,
        None => {
            let jitter = 1e-10 * sym.trace().abs().max(f64::MIN_POSITIVE);
            let n = sym.nrows();
            (sym + DMatrix::identity(n, n) * jitter)
                .cholesky()
                .ok_or_else(|| Error::CovarianceNotPd(what.to_string()))?
        }
    };
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let mut inverse = chol.inverse();
    symmetrize(&mut inverse);
    Ok(SpdInverse { inverse, log_det })
}

/// Log-determinant of an SPD matrix (no jitter).
pub fn spd_log_det(m: &DMatrix<f64>) -> Option<f64> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    sym.cholesky().map(|c| 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Solves `X·G = R` for `X` where `G` is a symmetric PSD Gram matrix, adding a
/// Tikhonov jitter of `1e-12·trace(G)` before factorising.
pub(crate) fn solve_right_gram(rhs: &DMatrix<f64>, gram: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = gram.nrows();
    let mut g = gram.clone();
    symmetrize(&mut g);
    let jitter = 1e-12 * g.trace().abs().max(f64::MIN_POSITIVE);
    let g = g + DMatrix::identity(n, n) * jitter;
    let sol = match g.clone().cholesky() {
        Some(c) => c.solve(&rhs.transpose()),
        None => g
            .lu()
            .solve(&rhs.transpose())
            .ok_or_else(|| Error::SingularDesign("normal equations".into()))?,
    };
    Ok(sol.transpose())
}

/// Moore-Penrose pseudo-inverse through the thin SVD. Returns `None` when the
/// matrix is numerically rank-deficient.
pub(crate) fn pinv_full_rank(m: &DMatrix<f64>) -> Result<Option<DMatrix<f64>>> {
    let svd = thin_svd(m)?;
    let smax = svd.s.iter().cloned().fold(0.0, f64::max);
    let tol = smax * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON;
    if smax == 0.0 || svd.s.iter().any(|&s| s <= tol) {
        return Ok(None);
    }
    let inv_s = svd.s.map(|s| 1.0 / s);
    Ok(Some(&svd.v * DMatrix::from_diagonal(&inv_s) * svd.u.transpose()))
}
