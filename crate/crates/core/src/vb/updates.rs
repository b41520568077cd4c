//! Coordinate-ascent updates of the variational factors.

use nalgebra::{DMatrix, DVector};

use super::moments::{expected_ata, expected_cc, expected_fkft, Moments};
use super::{GammaFactor, Noise, Orthogonality, PFactor, VariationalState, VmfFactor};
use crate::error::{Error, Result};
use crate::linalg::{orthonormal_procrustes, spd_inverse};
use crate::tensor::RaggedTensor3;

fn diag_c(state: &VariationalState, k: usize) -> DMatrix<f64> {
    DMatrix::from_diagonal(&state.mu_c.row(k).transpose())
}

/// `q(A)`: `Σ_A = (Σ_k E[τ_k] (E[c_k c_kᵀ] ∘ E[FᵀP_kᵀP_kF]) + I)⁻¹` and
/// `μ_A = (Σ_k E[τ_k] X_k E[P_k] E[F] E[D_k]) Σ_A`.
pub fn update_qa(state: &mut VariationalState, t: &RaggedTensor3) -> Result<()> {
    let mom = Moments::compute(state)?;
    let m = state.config.m;
    let mut prec = DMatrix::identity(m, m);
    let mut lin = DMatrix::zeros(t.rows(), m);
    for k in 0..t.n_slabs() {
        let tau = mom.e_tau[k];
        prec += mom.e_cc[k].component_mul(&mom.e_ftqf[k]) * tau;
        lin += t.slab(k) * &mom.e_p[k] * &state.mu_f * diag_c(state, k) * tau;
    }
    let inv = spd_inverse(&prec, "q(A)")?;
    state.mu_a = lin * &inv.inverse;
    state.sigma_a = inv.inverse;
    Ok(())
}

/// `q(c_k)`: `Σ_{c_k} = (E[τ_k] (E[AᵀA] ∘ E[FᵀP_kᵀP_kF]) + diag(α))⁻¹` and
/// `μ_{c_k} = Σ_{c_k} E[τ_k] diag(E[A]ᵀ X_k E[P_k] E[F])`.
pub fn update_qc(state: &mut VariationalState, t: &RaggedTensor3) -> Result<()> {
    let mom = Moments::compute(state)?;
    let alpha = DMatrix::from_diagonal(&state.alpha);
    for k in 0..t.n_slabs() {
        let tau = mom.e_tau[k];
        let prec = mom.e_ata.component_mul(&mom.e_ftqf[k]) * tau + &alpha;
        let inv = spd_inverse(&prec, &format!("q(c_{})", k + 1))?;
        let lin = (state.mu_a.transpose() * t.slab(k) * &mom.e_p[k] * &state.mu_f).diagonal() * tau;
        let mean = &inv.inverse * lin;
        state.mu_c.row_mut(k).copy_from(&mean.transpose());
        state.sigma_c[k] = inv.inverse;
    }
    Ok(())
}

/// Rows of `q(F)`, updated in order `m = 1…M`, each using the current means
/// of the other rows:
/// `Σ_{f_m} = (Σ_k E[τ_k] Q_k[m,m] K_k + I)⁻¹`,
/// `μ_{f_m} = (Σ_k E[τ_k] (y_{k,m} − Σ_{m'≠m} Q_k[m,m'] μ_{f_m'} K_k)) Σ_{f_m}`
/// with `K_k = E[c_k c_kᵀ] ∘ E[AᵀA]`, `Q_k = E[P_kᵀP_k]` and `y_{k,m}` row
/// `m` of `E[P_k]ᵀ X_kᵀ E[A] E[D_k]`.
pub fn update_qf(state: &mut VariationalState, t: &RaggedTensor3) -> Result<()> {
    let mom = Moments::compute(state)?;
    let m = state.config.m;
    let kk = t.n_slabs();
    let kmats: Vec<DMatrix<f64>> = (0..kk).map(|k| mom.e_cc[k].component_mul(&mom.e_ata)).collect();
    let ys: Vec<DMatrix<f64>> =
        (0..kk).map(|k| mom.e_p[k].transpose() * t.slab(k).transpose() * &state.mu_a * diag_c(state, k)).collect();
    for row in 0..m {
        let mut prec = DMatrix::identity(m, m);
        let mut lin = DMatrix::zeros(1, m);
        for k in 0..kk {
            let tau = mom.e_tau[k];
            let q = &mom.q[k];
            prec += &kmats[k] * (tau * q[(row, row)]);
            let mut other = DMatrix::zeros(1, m);
            for o in 0..m {
                if o != row && q[(row, o)] != 0.0 {
                    other += state.mu_f.row(o) * q[(row, o)];
                }
            }
            lin += (ys[k].row(row) - other * &kmats[k]) * tau;
        }
        let inv = spd_inverse(&prec, &format!("q(f_{})", row + 1))?;
        let mean = lin * &inv.inverse;
        state.mu_f.row_mut(row).copy_from(&mean);
        state.sigma_f[row] = inv.inverse;
    }
    Ok(())
}

/// vMF update for slab `k`: `B_k = E[τ_k] X_kᵀ E[A] E[D_k] E[F]ᵀ`.
pub fn update_qp_vmf(state: &mut VariationalState, t: &RaggedTensor3, k: usize) -> Result<()> {
    let tau = state.tau_factor(k).mean();
    let b = t.slab(k).transpose() * &state.mu_a * diag_c(state, k) * state.mu_f.transpose() * tau;
    if b.iter().any(|x| !x.is_finite()) {
        return Err(Error::ApproximationOutOfRange(format!("vMF parameter of slab {} is not finite", k + 1)));
    }
    state.p[k] = PFactor::Vmf(VmfFactor::new(b)?);
    Ok(())
}

/// cMN update for slab `k`: the mean maximises
/// `tr(E[F] E[D_k] E[A]ᵀ X_k M)` over orthonormal `M`, and the column
/// covariance is `(E[τ_k] E[F K_k Fᵀ] + I)⁻¹`. Returns whether the
/// Procrustes problem was rank deficient.
pub fn update_qp_cmn(state: &mut VariationalState, t: &RaggedTensor3, k: usize) -> Result<bool> {
    let tau = state.tau_factor(k).mean();
    let g = &state.mu_f * diag_c(state, k) * state.mu_a.transpose() * t.slab(k);
    let sol = orthonormal_procrustes(&g)?;
    let kmat = expected_cc(state, k).component_mul(&expected_ata(state));
    let m = state.config.m;
    let prec = expected_fkft(state, &kmat) * tau + DMatrix::identity(m, m);
    let inv = spd_inverse(&prec, &format!("q(P_{})", k + 1))?;
    state.p[k] = PFactor::Cmn { mean: sol.p, sigma: inv.inverse };
    Ok(sol.rank_deficient)
}

/// Updates every `q(P_k)` for the configured variant; returns the number of
/// rank-deficient Procrustes problems (always 0 for vMF).
pub fn update_qp(state: &mut VariationalState, t: &RaggedTensor3) -> Result<usize> {
    let mut flags = 0;
    for k in 0..t.n_slabs() {
        match state.config.orthogonality {
            Orthogonality::Vmf => update_qp_vmf(state, t, k)?,
            Orthogonality::Cmn => flags += update_qp_cmn(state, t, k)? as usize,
        }
    }
    Ok(flags)
}

/// `q(τ)`: shape `a_τ + I·J_k/2`, scale `(1/b_τ + E‖X_k − A D_k Fᵀ P_kᵀ‖²/2)⁻¹`,
/// pooled over slabs in the homoscedastic variant. Returns the number of
/// expected residuals clamped at `1e-15`.
pub fn update_qtau(state: &mut VariationalState, t: &RaggedTensor3) -> Result<usize> {
    let mom = Moments::compute(state)?;
    let a0 = state.config.tau_shape_prior;
    let inv_b0 = 1.0 / state.config.tau_scale_prior;
    let mut clamps = 0;
    let mut residuals = Vec::with_capacity(t.n_slabs());
    for k in 0..t.n_slabs() {
        let r = mom.expected_residual(state, t, k);
        if r < 0.0 {
            clamps += 1;
            residuals.push(1e-15);
        } else {
            residuals.push(r);
        }
    }
    let i = t.rows() as f64;
    match state.config.noise {
        Noise::Homo => {
            let n: f64 = (0..t.n_slabs()).map(|k| i * t.width(k) as f64).sum();
            let r: f64 = residuals.iter().sum();
            state.tau = vec![GammaFactor { shape: a0 + n / 2.0, scale: 1.0 / (inv_b0 + r / 2.0) }];
        }
        Noise::Hetero => {
            state.tau = residuals
                .iter()
                .enumerate()
                .map(|(k, r)| GammaFactor { shape: a0 + i * t.width(k) as f64 / 2.0, scale: 1.0 / (inv_b0 + r / 2.0) })
                .collect();
        }
    }
    Ok(clamps)
}

/// ARD precisions `α_m = K / Σ_k E[c_km²]`.
pub fn update_alpha(state: &mut VariationalState) {
    let kk = state.n_slabs() as f64;
    let energy = state.component_energy();
    state.alpha = DVector::from_fn(state.config.m, |m, _| kk / energy[m]);
}

