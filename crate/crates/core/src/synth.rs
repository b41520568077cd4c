//! Synthetic PARAFAC2 data: Gaussian `A`, correlated `F`, uniform `C`,
//! random orthonormal projections and Gaussian noise at an exact SNR.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::direct::Parafac2Point;
use crate::error::{Error, Result};
use crate::seed::{self, gaussian_matrix, uniform_stiefel};
use crate::tensor::RaggedTensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Homo,
    Hetero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub m_true: usize,
    /// Frobenius power ratio in dB; `+∞` means no noise.
    #[serde(with = "crate::serde_float")]
    pub snr_db: f64,
    pub noise_mode: NoiseMode,
    pub offdiag: f64,
    pub c_range: (f64, f64),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            i: 50,
            j: 50,
            k: 10,
            m_true: 4,
            snr_db: f64::INFINITY,
            noise_mode: NoiseMode::Homo,
            offdiag: 0.4,
            c_range: (0.0, 30.0),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.i == 0 || self.j == 0 || self.k == 0 || self.m_true == 0 {
            return Err(Error::InvalidConfig("dimensions and m_true must be positive".into()));
        }
        if self.m_true > self.i.min(self.j) {
            return Err(Error::InvalidConfig(format!("m_true {} exceeds min(I, J)", self.m_true)));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::InvalidConfig("snr_db must be finite or +inf".into()));
        }
        if !(0.0..1.0).contains(&self.offdiag) {
            return Err(Error::InvalidConfig("offdiag must lie in [0, 1)".into()));
        }
        if !(self.c_range.0 < self.c_range.1) {
            return Err(Error::InvalidConfig("c_range must be an increasing interval".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthTruth {
    pub a: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub p: Vec<DMatrix<f64>>,
    pub clean: RaggedTensor3,
    pub noise: RaggedTensor3,
    /// Realised noise variance per slab, `‖E_k‖² / (I·J_k)`.
    pub noise_variances: Vec<f64>,
    /// Per-slab standard-deviation factors before the global rescale (all
    /// ones for homoscedastic noise).
    pub hetero_factors: Vec<f64>,
}

impl SynthTruth {
    pub fn as_point(&self) -> Parafac2Point {
        Parafac2Point { a: self.a.clone(), f: self.f.clone(), c: self.c.clone(), p: self.p.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub observed: RaggedTensor3,
    pub noise: RaggedTensor3,
    pub variances: Vec<f64>,
    pub factors: Vec<f64>,
}

/// `F = Lᵀ` for the Cholesky factor `L` of the matrix with unit diagonal and
/// `offdiag` elsewhere, so `FᵀF` equals that matrix.
pub fn correlated_f(m: usize, offdiag: f64) -> Result<DMatrix<f64>> {
    let target = DMatrix::from_fn(m, m, |a, b| if a == b { 1.0 } else { offdiag });
    let chol = target.cholesky().ok_or_else(|| Error::InvalidConfig("offdiag gives an indefinite Gram".into()))?;
    Ok(chol.l().transpose())
}

pub fn generate<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<(RaggedTensor3, SynthTruth)> {
    spec.validate()?;
    let m = spec.m_true;
    let a = gaussian_matrix(rng, spec.i, m);
    let f = correlated_f(m, spec.offdiag)?;
    let (lo, hi) = spec.c_range;
    let mut c = DMatrix::zeros(spec.k, m);
    for col in 0..m {
        for row in 0..spec.k {
            c[(row, col)] = rng.random_range(lo..hi);
        }
    }
    let p: Vec<DMatrix<f64>> = (0..spec.k).map(|_| uniform_stiefel(rng, spec.j, m)).collect();
    let point = Parafac2Point { a: a.clone(), f: f.clone(), c: c.clone(), p: p.clone() };
    let clean = RaggedTensor3::new(point.reconstruct())?;
    let draw = add_noise(&clean, spec.snr_db, spec.noise_mode, rng)?;
    let truth = SynthTruth {
        a,
        f,
        c,
        p,
        clean,
        noise: draw.noise,
        noise_variances: draw.variances,
        hetero_factors: draw.factors,
    };
    Ok((draw.observed, truth))
}

/// Generates with an rng seeded from `spec.seed`.
pub fn generate_seeded(spec: &SynthSpec) -> Result<(RaggedTensor3, SynthTruth)> {
    let mut rng = seed::rng(spec.seed);
    generate(spec, &mut rng)
}

/// Adds Gaussian noise scaled so that `10·log10(‖clean‖² / ‖noise‖²)` equals
/// `snr_db`. Heteroscedastic noise multiplies each slab's standard deviation by
/// a log-uniform factor on `[1/3, 3]` before the global rescale.
pub fn add_noise<R: Rng + ?Sized>(clean: &RaggedTensor3, snr_db: f64, mode: NoiseMode, rng: &mut R) -> Result<NoiseDraw> {
    let signal = clean.frobenius_sq();
    if signal == 0.0 {
        return Err(Error::ZeroSignal);
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidConfig("snr_db must be finite or +inf".into()));
    }
    let kk = clean.n_slabs();
    let factors: Vec<f64> = match mode {
        NoiseMode::Homo => vec![1.0; kk],
        NoiseMode::Hetero => {
            let span = 3.0f64.ln();
            (0..kk).map(|_| rng.random_range(-span..span).exp()).collect()
        }
    };
    if snr_db == f64::INFINITY {
        let noise = RaggedTensor3::new(clean.slabs().iter().map(|x| DMatrix::zeros(x.nrows(), x.ncols())).collect())?;
        return Ok(NoiseDraw { observed: clean.clone(), noise, variances: vec![0.0; kk], factors });
    }
    let mut raw: Vec<DMatrix<f64>> = clean
        .slabs()
        .iter()
        .zip(&factors)
        .map(|(x, &s)| gaussian_matrix(rng, x.nrows(), x.ncols()) * s)
        .collect();
    let raw_power: f64 = raw.iter().map(|e| e.norm_squared()).sum();
    let target = signal / 10f64.powf(snr_db / 10.0);
    let scale = (target / raw_power).sqrt();
    for e in raw.iter_mut() {
        *e *= scale;
    }
    let variances = raw.iter().map(|e| e.norm_squared() / (e.nrows() * e.ncols()) as f64).collect();
    let noise = RaggedTensor3::new(raw)?;
    let observed = clean.add(&noise)?;
    Ok(NoiseDraw { observed, noise, variances, factors })
}

/// Realised SNR in dB of a clean/noise pair.
pub fn realized_snr_db(clean: &RaggedTensor3, noise: &RaggedTensor3) -> f64 {
    10.0 * (clean.frobenius_sq() / noise.frobenius_sq()).log10()
}
