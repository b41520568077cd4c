//! Expectations under the variational factors.

use nalgebra::DMatrix;

use super::{PFactor, VariationalState};
use crate::error::Result;
use crate::tensor::RaggedTensor3;

/// First and second moments of the current factors.
#[derive(Debug, Clone)]
pub struct Moments {
    /// `E[AᵀA] = μ_Aᵀμ_A + I·Σ_A`.
    pub e_ata: DMatrix<f64>,
    /// `E[P_k]`.
    pub e_p: Vec<DMatrix<f64>>,
    /// `E[P_kᵀP_k]`.
    pub q: Vec<DMatrix<f64>>,
    /// `E[c_k c_kᵀ]`.
    pub e_cc: Vec<DMatrix<f64>>,
    /// `E[Fᵀ E[P_kᵀP_k] F]`.
    pub e_ftqf: Vec<DMatrix<f64>>,
    pub e_tau: Vec<f64>,
    pub e_log_tau: Vec<f64>,
    /// `E[P_kᵀP_k] − E[P_k]ᵀE[P_k]`, formed without cancellation.
    pub gram_gap: Vec<DMatrix<f64>>,
}

/// `E[P_kᵀP_k]`: the identity for vMF factors, `MᵀM + J_k·Σ_P` for cMN.
pub fn expected_gram_p(state: &VariationalState, k: usize) -> DMatrix<f64> {
    let m = state.config.m;
    match &state.p[k] {
        PFactor::Vmf(_) => DMatrix::identity(m, m),
        PFactor::Cmn { mean, sigma } => mean.transpose() * mean + sigma * mean.nrows() as f64,
    }
}

/// `E[F K Fᵀ]` for a fixed symmetric `K`: entry `(m, m')` is
/// `μ_m K μ_m'ᵀ + δ_{mm'} tr(K Σ_m)`.
pub fn expected_fkft(state: &VariationalState, kmat: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = &state.mu_f * kmat * state.mu_f.transpose();
    for (m, sig) in state.sigma_f.iter().enumerate() {
        out[(m, m)] += (kmat * sig).trace();
    }
    out
}

/// `E[Fᵀ Q F] = μ_Fᵀ Q μ_F + Σ_m Q_mm Σ_m`.
pub fn expected_ftqf(state: &VariationalState, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = state.mu_f.transpose() * q * &state.mu_f;
    for (m, sig) in state.sigma_f.iter().enumerate() {
        out += sig * q[(m, m)];
    }
    out
}

pub fn expected_ata(state: &VariationalState) -> DMatrix<f64> {
    state.mu_a.transpose() * &state.mu_a + &state.sigma_a * state.mu_a.nrows() as f64
}

pub fn expected_cc(state: &VariationalState, k: usize) -> DMatrix<f64> {
    let c = state.mu_c.row(k).transpose();
    &c * c.transpose() + &state.sigma_c[k]
}

impl Moments {
    pub fn compute(state: &VariationalState) -> Result<Moments> {
        let kk = state.n_slabs();
        let mut e_p = Vec::with_capacity(kk);
        for pf in &state.p {
            match pf {
                PFactor::Vmf(v) => e_p.push(v.mean().clone()),
                PFactor::Cmn { mean, .. } => e_p.push(mean.clone()),
            }
        }
        let q: Vec<_> = (0..kk).map(|k| expected_gram_p(state, k)).collect();
        let e_ftqf = q.iter().map(|qk| expected_ftqf(state, qk)).collect();
        let gram_gap = state
            .p
            .iter()
            .map(|pf| match pf {
                PFactor::Vmf(v) => v.gram_gap().clone(),
                PFactor::Cmn { mean, sigma } => sigma * mean.nrows() as f64,
            })
            .collect();
        Ok(Moments {
            gram_gap,
            e_ata: expected_ata(state),
            e_p,
            q,
            e_cc: (0..kk).map(|k| expected_cc(state, k)).collect(),
            e_ftqf,
            e_tau: (0..kk).map(|k| state.tau_factor(k).mean()).collect(),
            e_log_tau: (0..kk).map(|k| state.tau_factor(k).mean_log()).collect(),
        })
    }

    /// `E‖X_k − A D_k Fᵀ P_kᵀ‖²`, split as
    /// `‖X_k − Z E[P_k]ᵀ‖² + tr(ZᵀZ (Q_k − E[P_k]ᵀE[P_k])) + (variance terms)`
    /// with `Z = μ_A D_k μ_Fᵀ`. Every piece is non-negative, so the value
    /// stays accurate when the residual is tiny next to `‖X_k‖²`.
    pub fn expected_residual(&self, state: &VariationalState, t: &RaggedTensor3, k: usize) -> f64 {
        let d = DMatrix::from_diagonal(&state.mu_c.row(k).transpose());
        let z = &state.mu_a * d * state.mu_f.transpose();
        let fit = (t.slab(k) - &z * self.e_p[k].transpose()).norm_squared();
        let gap = (z.transpose() * &z).component_mul(&self.gram_gap[k]).sum();
        // (Ā+V_A)∘(C̄+V_C)∘(F̄+V_F) minus Ā∘C̄∘F̄
        let a_mean = state.mu_a.transpose() * &state.mu_a;
        let a_var = &state.sigma_a * state.mu_a.nrows() as f64;
        let c = state.mu_c.row(k).transpose();
        let c_mean = &c * c.transpose();
        let c_var = &state.sigma_c[k];
        let q = &self.q[k];
        let f_mean = state.mu_f.transpose() * q * &state.mu_f;
        let mut f_var = DMatrix::zeros(q.nrows(), q.ncols());
        for (m, sig) in state.sigma_f.iter().enumerate() {
            f_var += sig * q[(m, m)];
        }
        let c_all = &c_mean + c_var;
        let var = a_var.component_mul(&c_all).component_mul(&(&f_mean + &f_var)).sum()
            + a_mean.component_mul(c_var).component_mul(&(&f_mean + &f_var)).sum()
            + a_mean.component_mul(&c_mean).component_mul(&f_var).sum();
        fit + gap + var
    }
}
