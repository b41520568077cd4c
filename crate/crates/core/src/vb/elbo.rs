//! Evidence lower bound, split into expected log-joint and entropy terms.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::moments::Moments;
use super::{Noise, PFactor, VariationalState};
use crate::error::{Error, Result};
use crate::linalg::spd_log_det;
use crate::tensor::RaggedTensor3;
use crate::vmf::stiefel_log_volume;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub data: f64,
    pub prior_a: f64,
    pub prior_c: f64,
    pub prior_f: f64,
    pub prior_p: f64,
    pub prior_tau: f64,
    pub entropy_a: f64,
    pub entropy_c: f64,
    pub entropy_f: f64,
    pub entropy_p: f64,
    pub entropy_tau: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.data
            + self.prior_a
            + self.prior_c
            + self.prior_f
            + self.prior_p
            + self.prior_tau
            + self.entropy_a
            + self.entropy_c
            + self.entropy_f
            + self.entropy_p
            + self.entropy_tau
    }

    fn named(&self) -> [(&'static str, f64); 11] {
        [
            ("data", self.data),
            ("prior A", self.prior_a),
            ("prior C", self.prior_c),
            ("prior F", self.prior_f),
            ("prior P", self.prior_p),
            ("prior tau", self.prior_tau),
            ("entropy A", self.entropy_a),
            ("entropy C", self.entropy_c),
            ("entropy F", self.entropy_f),
            ("entropy P", self.entropy_p),
            ("entropy tau", self.entropy_tau),
        ]
    }
}

fn gaussian_entropy(cov: &nalgebra::DMatrix<f64>, what: &str) -> Result<f64> {
    let d = cov.nrows() as f64;
    let ld = spd_log_det(cov).ok_or_else(|| Error::CovarianceNotPd(what.to_string()))?;
    Ok(0.5 * d * (1.0 + LN_2PI) + 0.5 * ld)
}

/// All ELBO terms for the current state. `α` is a point estimate, so its
/// (flat) prior contributes a constant that is omitted.
pub fn elbo_terms(state: &VariationalState, t: &RaggedTensor3) -> Result<ElboTerms> {
    state.check_shapes(t)?;
    let mom = Moments::compute(state)?;
    let m = state.config.m;
    let mf = m as f64;
    let kk = t.n_slabs();
    let i = t.rows() as f64;
    let mut terms = ElboTerms::default();

    for k in 0..kk {
        let n = i * t.width(k) as f64;
        let r = mom.expected_residual(state, t, k);
        terms.data += 0.5 * n * (mom.e_log_tau[k] - LN_2PI) - 0.5 * mom.e_tau[k] * r;
    }

    terms.prior_a = -0.5 * i * mf * LN_2PI - 0.5 * mom.e_ata.trace();
    terms.entropy_a = i * gaussian_entropy(&state.sigma_a, "q(A)")?;

    let log_alpha: f64 = state.alpha.iter().map(|a| a.ln()).sum();
    for k in 0..kk {
        let quad: f64 = (0..m).map(|c| state.alpha[c] * mom.e_cc[k][(c, c)]).sum();
        terms.prior_c += -0.5 * mf * LN_2PI + 0.5 * log_alpha - 0.5 * quad;
        terms.entropy_c += gaussian_entropy(&state.sigma_c[k], "q(C)")?;
    }

    for row in 0..m {
        terms.prior_f += -0.5 * mf * LN_2PI - 0.5 * (state.mu_f.row(row).norm_squared() + state.sigma_f[row].trace());
        terms.entropy_f += gaussian_entropy(&state.sigma_f[row], "q(F)")?;
    }

    for k in 0..kk {
        let j = t.width(k);
        match &state.p[k] {
            PFactor::Vmf(v) => {
                terms.prior_p -= stiefel_log_volume(j, m);
                terms.entropy_p += v.entropy();
            }
            PFactor::Cmn { sigma, .. } => {
                let jf = j as f64;
                terms.prior_p += -0.5 * jf * mf * LN_2PI - 0.5 * (mf + jf * sigma.trace());
                let ld = spd_log_det(sigma).ok_or_else(|| Error::CovarianceNotPd(format!("q(P_{})", k + 1)))?;
                terms.entropy_p += 0.5 * jf * mf * (1.0 + LN_2PI) + 0.5 * jf * ld;
            }
        }
    }

    let a0 = state.config.tau_shape_prior;
    let b0 = state.config.tau_scale_prior;
    let n_tau = if state.config.noise == Noise::Homo { 1 } else { kk };
    for idx in 0..n_tau {
        let f = &state.tau[idx];
        terms.prior_tau += -ln_gamma(a0) - a0 * b0.ln() + (a0 - 1.0) * f.mean_log() - f.mean() / b0;
        terms.entropy_tau += f.entropy();
    }

    for (name, v) in terms.named() {
        if !v.is_finite() {
            return Err(Error::NonFiniteElbo(name.to_string()));
        }
    }
    Ok(terms)
}

pub fn elbo(state: &VariationalState, t: &RaggedTensor3) -> Result<f64> {
    Ok(elbo_terms(state, t)?.total())
}
