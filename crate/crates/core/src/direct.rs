//! Direct-fitting alternating least squares for PARAFAC2, with the fit
//! fraction R2 and the core-consistency diagnostic.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{orthonormal_procrustes, pinv_full_rank, solve_right_gram, thin_svd};
use crate::seed::{self, derive_seed, stream};
use crate::tensor::RaggedTensor3;

/// Point-estimate PARAFAC2 model: slab `k` is reconstructed as
/// `A·diag(C[k,:])·Fᵀ·P_kᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parafac2Point {
    pub a: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub p: Vec<DMatrix<f64>>,
}

impl Parafac2Point {
    pub fn n_components(&self) -> usize {
        self.a.ncols()
    }

    pub fn d(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.c.row(k).transpose())
    }

    /// `A·D_k·Fᵀ`, the slab in projected coordinates.
    pub fn core_slab(&self, k: usize) -> DMatrix<f64> {
        &self.a * self.d(k) * self.f.transpose()
    }

    pub fn reconstruct_slab(&self, k: usize) -> DMatrix<f64> {
        self.core_slab(k) * self.p[k].transpose()
    }

    pub fn reconstruct(&self) -> Vec<DMatrix<f64>> {
        (0..self.p.len()).map(|k| self.reconstruct_slab(k)).collect()
    }

    /// `Σ_k ‖X_k − A D_k Fᵀ P_kᵀ‖²`.
    pub fn sse(&self, t: &RaggedTensor3) -> Result<f64> {
        self.check_shapes(t)?;
        Ok((0..t.n_slabs()).map(|k| (t.slab(k) - self.reconstruct_slab(k)).norm_squared()).sum())
    }

    pub fn check_shapes(&self, t: &RaggedTensor3) -> Result<()> {
        let m = self.n_components();
        if self.a.nrows() != t.rows() || self.f.shape() != (m, m) || self.c.shape() != (t.n_slabs(), m) {
            return Err(Error::ShapeMismatch(0, "model factors do not match the tensor".into()));
        }
        if self.p.len() != t.n_slabs() {
            return Err(Error::ShapeMismatch(0, format!("{} projections for {} slabs", self.p.len(), t.n_slabs())));
        }
        for (k, p) in self.p.iter().enumerate() {
            if p.shape() != (t.width(k), m) {
                return Err(Error::ShapeMismatch(k + 1, format!("projection is {}x{}", p.nrows(), p.ncols())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectFitOptions {
    pub max_iters: usize,
    pub rel_tol_r2: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for DirectFitOptions {
    fn default() -> Self {
        DirectFitOptions { max_iters: 10_000, rel_tol_r2: 1e-12, restarts: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectFit {
    pub model: Parafac2Point,
    /// Least-squares objective at initialisation followed by one entry per
    /// iteration.
    pub objective_trace: Vec<f64>,
    pub r2: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Index of the restart that produced `model`.
    pub restart: usize,
    /// Number of projection updates whose Procrustes problem was rank deficient.
    pub rank_deficient_updates: usize,
}

/// Fits PARAFAC2 by alternating Procrustes projection updates with one CP
/// least-squares sweep on the projected data. Runs `opts.restarts` starts and
/// returns the one with the highest R2.
pub fn fit_direct(t: &RaggedTensor3, m: usize, opts: &DirectFitOptions) -> Result<DirectFit> {
    validate(t, m, opts)?;
    let restarts = opts.restarts.max(1);
    let fits: Vec<Result<DirectFit>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let init = initial_model(t, m, opts.seed, r)?;
            let mut fit = run_from(t, init, opts)?;
            fit.restart = r;
            Ok(fit)
        })
        .collect();
    let mut best: Option<DirectFit> = None;
    let mut failures = Vec::new();
    for (r, fit) in fits.into_iter().enumerate() {
        match fit {
            Ok(f) => {
                if best.as_ref().is_none_or(|b| f.r2 > b.r2) {
                    best = Some(f);
                }
            }
            Err(e) => failures.push(format!("restart {r}: {e}")),
        }
    }
    best.ok_or(Error::AllRestartsFailed(failures))
}

pub(crate) fn validate(t: &RaggedTensor3, m: usize, opts: &DirectFitOptions) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidConfig("model order must be at least 1".into()));
    }
    if m > t.min_width() {
        return Err(Error::ModelOrderTooLarge { requested: m, max: t.min_width() });
    }
    if opts.max_iters == 0 || !(opts.rel_tol_r2 > 0.0) {
        return Err(Error::InvalidConfig("max_iters must be >= 1 and rel_tol_r2 > 0".into()));
    }
    if t.frobenius_sq() == 0.0 {
        return Err(Error::DegenerateData);
    }
    Ok(())
}

/// Starting point: `A` from the leading left singular vectors of the
/// concatenated slabs, `C` all ones, `F = I`, projections by Procrustes.
/// Restart `r ≥ 1` adds N(0, 0.1²) jitter to `A`.
pub fn initial_model(t: &RaggedTensor3, m: usize, seed: u64, restart: usize) -> Result<Parafac2Point> {
    let i = t.rows();
    let total: usize = t.widths().iter().sum();
    let mut concat = DMatrix::zeros(i, total);
    let mut off = 0;
    for x in t.slabs() {
        concat.view_mut((0, off), (i, x.ncols())).copy_from(x);
        off += x.ncols();
    }
    let svd = thin_svd(&concat)?;
    let mut a = DMatrix::zeros(i, m);
    let avail = svd.u.ncols().min(m);
    a.view_mut((0, 0), (i, avail)).copy_from(&svd.u.columns(0, avail));
    let mut rng = seed::rng(derive_seed(seed, stream::RESTART, restart as u64));
    if avail < m {
        // more components than rows: fill the rest with Gaussian columns
        let extra = seed::gaussian_matrix(&mut rng, i, m - avail);
        a.view_mut((0, avail), (i, m - avail)).copy_from(&extra);
    }
    if restart > 0 {
        a += seed::gaussian_matrix(&mut rng, i, m) * 0.1;
    }
    let mut model = Parafac2Point {
        a,
        f: DMatrix::identity(m, m),
        c: DMatrix::from_element(t.n_slabs(), m, 1.0),
        p: Vec::new(),
    };
    model.p = t.widths().iter().map(|&j| DMatrix::zeros(j, m)).collect();
    model.p = update_projections(&model, t)?.0;
    Ok(model)
}

/// Runs the ALS iteration from a given starting model.
pub fn run_from(t: &RaggedTensor3, mut model: Parafac2Point, opts: &DirectFitOptions) -> Result<DirectFit> {
    model.check_shapes(t)?;
    let total = t.frobenius_sq();
    if total == 0.0 {
        return Err(Error::DegenerateData);
    }
    let mut trace = vec![model.sse(t)?];
    let mut r2_prev = 1.0 - trace[0] / total;
    let mut converged = false;
    let mut iterations = 0;
    let mut rank_deficient_updates = 0;
    for _ in 0..opts.max_iters {
        let (p, flags) = update_projections(&model, t)?;
        rank_deficient_updates += flags;
        model.p = p;
        let y = t.project_slabs(&model.p)?;
        model = cp_als_sweep(&y, &model)?;
        iterations += 1;
        let sse = model.sse(t)?;
        trace.push(sse);
        let r2_new = 1.0 - sse / total;
        if (r2_new - r2_prev).abs() < opts.rel_tol_r2 * r2_prev.abs() {
            converged = true;
            r2_prev = r2_new;
            break;
        }
        r2_prev = r2_new;
    }
    Ok(DirectFit { model, objective_trace: trace, r2: r2_prev, iterations, converged, restart: 0, rank_deficient_updates })
}

/// Procrustes update `P_k = argmax tr(F D_k Aᵀ X_k P_k)` for every slab.
/// Also returns how many of the K problems were rank deficient.
pub fn update_projections(model: &Parafac2Point, t: &RaggedTensor3) -> Result<(Vec<DMatrix<f64>>, usize)> {
    let mut out = Vec::with_capacity(t.n_slabs());
    let mut flags = 0;
    for k in 0..t.n_slabs() {
        let g = &model.f * model.d(k) * model.a.transpose() * t.slab(k);
        let sol = orthonormal_procrustes(&g)?;
        flags += sol.rank_deficient as usize;
        out.push(sol.p);
    }
    Ok((out, flags))
}

/// One least-squares pass A → C → F of the CP model `Y_k ≈ A D_k Fᵀ`.
pub fn cp_als_sweep(y: &[DMatrix<f64>], model: &Parafac2Point) -> Result<Parafac2Point> {
    let m = model.n_components();
    let mut out = model.clone();

    // A
    let ftf = out.f.transpose() * &out.f;
    let mut rhs = DMatrix::zeros(out.a.nrows(), m);
    let mut gram = DMatrix::zeros(m, m);
    for (k, yk) in y.iter().enumerate() {
        let d = out.d(k);
        rhs += yk * &out.f * &d;
        gram += &d * &ftf * &d;
    }
    out.a = solve_right_gram(&rhs, &gram)?;

    // C, one slab at a time
    let ata = out.a.transpose() * &out.a;
    let h = ata.component_mul(&ftf);
    for (k, yk) in y.iter().enumerate() {
        let r = DMatrix::from_row_slice(1, m, (out.a.transpose() * yk * &out.f).diagonal().as_slice());
        let ck = solve_right_gram(&r, &h)?;
        out.c.row_mut(k).copy_from(&ck.row(0));
    }

    // F
    let mut rhs = DMatrix::zeros(m, m);
    let mut gram = DMatrix::zeros(m, m);
    for (k, yk) in y.iter().enumerate() {
        let d = out.d(k);
        rhs += yk.transpose() * &out.a * &d;
        gram += &d * &ata * &d;
    }
    out.f = solve_right_gram(&rhs, &gram)?;
    Ok(out)
}

/// CP least-squares objective `Σ_k ‖Y_k − A D_k Fᵀ‖²`.
pub fn cp_objective(y: &[DMatrix<f64>], model: &Parafac2Point) -> f64 {
    y.iter().enumerate().map(|(k, yk)| (yk - model.core_slab(k)).norm_squared()).sum()
}

/// Fit fraction `1 − Σ‖X_k − X̂_k‖² / Σ‖X_k‖²`.
pub fn r2(model: &Parafac2Point, t: &RaggedTensor3) -> Result<f64> {
    r2_of_reconstruction(&model.reconstruct(), t)
}

pub fn r2_of_reconstruction(recon: &[DMatrix<f64>], t: &RaggedTensor3) -> Result<f64> {
    let total = t.frobenius_sq();
    if total == 0.0 {
        return Err(Error::ZeroDataNorm);
    }
    if recon.len() != t.n_slabs() {
        return Err(Error::ShapeMismatch(0, "reconstruction has the wrong number of slabs".into()));
    }
    let mut sse = 0.0;
    for (k, r) in recon.iter().enumerate() {
        if r.shape() != t.slab(k).shape() {
            return Err(Error::ShapeMismatch(k + 1, "reconstruction slab shape".into()));
        }
        sse += (t.slab(k) - r).norm_squared();
    }
    Ok(1.0 - sse / total)
}

/// Least-squares Tucker core of the projected data with the loadings fixed,
/// `G = Y ×₁ A⁺ ×₂ F⁺ ×₃ C⁺`, stored as `g[c]` = the `M × M` frontal slice
/// for third-mode index `c`.
pub fn estimate_core(model: &Parafac2Point, t: &RaggedTensor3) -> Result<Vec<DMatrix<f64>>> {
    model.check_shapes(t)?;
    let y = t.project_slabs(&model.p)?;
    let pinv = |m: &DMatrix<f64>, name: &str| -> Result<DMatrix<f64>> {
        pinv_full_rank(m)?.ok_or_else(|| Error::SingularDesign(format!("{name} is rank deficient")))
    };
    let a_p = pinv(&model.a, "A")?;
    let f_p = pinv(&model.f, "F")?;
    let c_p = pinv(&model.c, "C")?;
    let m = model.n_components();
    let z: Vec<DMatrix<f64>> = y.iter().map(|yk| &a_p * yk * f_p.transpose()).collect();
    let mut g = vec![DMatrix::zeros(m, m); m];
    for (c, gc) in g.iter_mut().enumerate() {
        for (k, zk) in z.iter().enumerate() {
            *gc += zk * c_p[(c, k)];
        }
    }
    Ok(g)
}

/// CCD `= 100·(1 − ‖G − I‖² / M)` for a superdiagonal identity core `I`.
pub fn ccd_from_core(g: &[DMatrix<f64>]) -> f64 {
    let m = g.len();
    let mut dev = 0.0;
    for (c, gc) in g.iter().enumerate() {
        for a in 0..m {
            for b in 0..m {
                let target = if a == b && b == c { 1.0 } else { 0.0 };
                dev += (gc[(a, b)] - target).powi(2);
            }
        }
    }
    100.0 * (1.0 - dev / m as f64)
}

pub fn core_consistency(model: &Parafac2Point, t: &RaggedTensor3) -> Result<f64> {
    Ok(ccd_from_core(&estimate_core(model, t)?))
}

/// Builds slab data `Y[i,j,k] = Σ G[a,b,c] A[i,a] F[j,b] C[k,c]` from a core
/// stored as in [`estimate_core`]; used to construct test cases.
pub fn tucker_slabs(g: &[DMatrix<f64>], a: &DMatrix<f64>, f: &DMatrix<f64>, c: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    (0..c.nrows())
        .map(|k| {
            let mut core = DMatrix::zeros(a.ncols(), f.ncols());
            for (ci, gc) in g.iter().enumerate() {
                core += gc * c[(k, ci)];
            }
            a * core * f.transpose()
        })
        .collect()
}
