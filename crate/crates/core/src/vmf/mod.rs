//! Matrix von Mises-Fisher distribution on the Stiefel manifold,
//! `p(P) ∝ exp(tr(BᵀP))` with respect to the Hausdorff measure.

pub mod hypergeometric;
pub mod sampling;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{thin_svd, ThinSvd};

pub use sampling::{vmf_sample, vmf_sample_gibbs, vmf_sample_sequential, GibbsOptions, RejectionStats};

/// How `log ₀F₁` and its gradient are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HypergeometricMethod {
    /// Zonal series for up to two singular values no larger than 8 (gradient by
    /// central differences), closed form otherwise.
    #[default]
    Auto,
    ClosedForm,
    Series,
}

/// Log-volume of the Stiefel manifold of `J × M` orthonormal frames,
/// `log(2^M π^{JM/2} / Γ_M(J/2))`.
pub fn stiefel_log_volume(j: usize, m: usize) -> f64 {
    assert!(j >= m && m >= 1, "stiefel_log_volume needs J >= M >= 1");
    let (jf, mf) = (j as f64, m as f64);
    let log_pi = std::f64::consts::PI.ln();
    // Γ_M(a) = π^{M(M−1)/4} Π_{i=0}^{M−1} Γ(a − i/2)
    let log_mgamma = mf * (mf - 1.0) / 4.0 * log_pi + (0..m).map(|i| ln_gamma(jf / 2.0 - i as f64 / 2.0)).sum::<f64>();
    mf * 2f64.ln() + jf * mf / 2.0 * log_pi - log_mgamma
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmfMatrix {
    b: DMatrix<f64>,
    svd: ThinSvd,
}

/// First moment and normaliser of a [`VmfMatrix`].
#[derive(Debug, Clone)]
pub struct VmfMoments {
    pub mean: DMatrix<f64>,
    /// `g_m = ∂ log ₀F₁ / ∂S_m`, so that `E[P] = U·diag(g)·Vᵀ`.
    pub g: Vec<f64>,
    /// `log ₀F₁(J/2; S²/4) + log v_{J,M}`.
    pub log_norm_const: f64,
}

impl VmfMatrix {
    pub fn new(b: DMatrix<f64>) -> Result<Self> {
        let (j, m) = b.shape();
        if m == 0 || j < m {
            return Err(Error::InvalidConfig(format!("vMF parameter must be J x M with J >= M >= 1, got {j}x{m}")));
        }
        if b.iter().any(|x| !x.is_finite()) {
            return Err(Error::ApproximationOutOfRange("vMF parameter has non-finite entries".into()));
        }
        let svd = thin_svd(&b)?;
        Ok(VmfMatrix { b, svd })
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn svd(&self) -> &ThinSvd {
        &self.svd
    }

    pub fn singular_values(&self) -> Vec<f64> {
        self.svd.s.iter().copied().collect()
    }

    pub fn rows(&self) -> usize {
        self.b.nrows()
    }

    pub fn cols(&self) -> usize {
        self.b.ncols()
    }

    pub fn log_0f1(&self, method: HypergeometricMethod) -> Result<f64> {
        let s = self.singular_values();
        let j = self.rows();
        match method {
            HypergeometricMethod::ClosedForm => hypergeometric::log_0f1_closed(j, &s),
            HypergeometricMethod::Series => hypergeometric::log_0f1_series_sv(j, &s),
            HypergeometricMethod::Auto => {
                if hypergeometric::series_preferred(&s) {
                    hypergeometric::log_0f1_series_sv(j, &s)
                } else {
                    hypergeometric::log_0f1_closed(j, &s)
                }
            }
        }
    }

    pub fn log_norm_const(&self) -> Result<f64> {
        self.log_norm_const_with(HypergeometricMethod::Auto)
    }

    pub fn log_norm_const_with(&self, method: HypergeometricMethod) -> Result<f64> {
        Ok(self.log_0f1(method)? + stiefel_log_volume(self.rows(), self.cols()))
    }

    fn gradient(&self, method: HypergeometricMethod) -> Result<Vec<f64>> {
        let s = self.singular_values();
        let j = self.rows();
        match method {
            HypergeometricMethod::ClosedForm => hypergeometric::grad_log_0f1_closed(j, &s),
            HypergeometricMethod::Series => hypergeometric::grad_log_0f1_series(j, &s),
            HypergeometricMethod::Auto => {
                if hypergeometric::series_preferred(&s) {
                    hypergeometric::grad_log_0f1_series(j, &s)
                } else {
                    hypergeometric::grad_log_0f1_closed(j, &s)
                }
            }
        }
    }

    pub fn moments(&self) -> Result<VmfMoments> {
        self.moments_with(HypergeometricMethod::Auto)
    }

    /// `E[P] = U·diag(g)·Vᵀ`. The second moment `E[PᵀP]` is the identity.
    pub fn moments_with(&self, method: HypergeometricMethod) -> Result<VmfMoments> {
        let g = self.gradient(method)?;
        let gd = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(g.clone()));
        let mean = &self.svd.u * gd * self.svd.v.transpose();
        Ok(VmfMoments { mean, g, log_norm_const: self.log_norm_const_with(method)? })
    }

    /// `I − E[P]ᵀE[P] = V·diag(1 − g²)·Vᵀ`. With the closed form, `1 − g` is
    /// evaluated directly so the result stays accurate at high concentration.
    pub fn gram_gap(&self, method: HypergeometricMethod) -> Result<DMatrix<f64>> {
        let g = self.gradient(method)?;
        let comp = match method {
            HypergeometricMethod::ClosedForm => hypergeometric::grad_complement_closed(self.rows(), &self.singular_values())?,
            _ => g.iter().map(|x| 1.0 - x).collect(),
        };
        let w: Vec<f64> = comp.iter().zip(&g).map(|(c, g)| c * (1.0 + g)).collect();
        let v = &self.svd.v;
        Ok(v * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(w)) * v.transpose())
    }

    /// `U·Vᵀ`, the maximiser of `tr(BᵀP)`.
    pub fn mode(&self) -> DMatrix<f64> {
        &self.svd.u * self.svd.v.transpose()
    }

    /// `log κ − tr(Bᵀ E[P]) = log κ − Σ S_m g_m`.
    pub fn entropy_with(&self, method: HypergeometricMethod) -> Result<f64> {
        if method == HypergeometricMethod::ClosedForm {
            let core = hypergeometric::log_0f1_minus_sg_closed(self.rows(), &self.singular_values())?;
            return Ok(core + stiefel_log_volume(self.rows(), self.cols()));
        }
        let mom = self.moments_with(method)?;
        let lin: f64 = self.svd.s.iter().zip(&mom.g).map(|(s, g)| s * g).sum();
        Ok(mom.log_norm_const - lin)
    }

    pub fn entropy(&self) -> Result<f64> {
        self.entropy_with(HypergeometricMethod::Auto)
    }
}
