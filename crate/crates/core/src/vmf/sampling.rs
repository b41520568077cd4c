//! Monte Carlo samplers for the matrix von Mises-Fisher distribution.
//!
//! The uniform-proposal rejection sampler is exact but its acceptance rate
//! decays like `₀F₁/exp(ΣS)`, so it is only practical for weak concentration.
//! [`vmf_sample_sequential`] is also exact and proposes each column from a
//! sphere vMF on the complement of the earlier ones, which keeps the
//! acceptance rate bounded away from zero as `S` grows. The Gibbs sampler
//! updates one column at a time from its full conditional.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use super::VmfMatrix;
use crate::error::{Error, Result};
use crate::seed::uniform_stiefel;

pub const DEFAULT_REJECTION_BUDGET: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RejectionStats {
    pub proposals: u64,
    pub accepted: u64,
}

impl RejectionStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

/// Draws `n` exact samples by rejection from the uniform Stiefel proposal,
/// accepting with probability `exp(tr(BᵀP) − ΣS)`. At most `budget`
/// proposals are made in total.
pub fn vmf_sample_many<R: Rng + ?Sized>(
    d: &VmfMatrix,
    n: usize,
    rng: &mut R,
    budget: u64,
) -> Result<(Vec<DMatrix<f64>>, RejectionStats)> {
    let (j, m) = (d.rows(), d.cols());
    let envelope: f64 = d.svd().s.sum();
    let mut stats = RejectionStats::default();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if stats.proposals >= budget {
            return Err(Error::RejectionBudgetExceeded { proposals: stats.proposals, accepted: stats.accepted });
        }
        stats.proposals += 1;
        let p = uniform_stiefel(rng, j, m);
        let log_ratio = d.b().dot(&p) - envelope;
        let u: f64 = rng.random();
        if u.ln() < log_ratio {
            stats.accepted += 1;
            out.push(p);
        }
    }
    Ok((out, stats))
}

/// One exact sample with the default proposal budget.
pub fn vmf_sample<R: Rng + ?Sized>(d: &VmfMatrix, rng: &mut R) -> Result<DMatrix<f64>> {
    let (mut v, _) = vmf_sample_many(d, 1, rng, DEFAULT_REJECTION_BUDGET)?;
    Ok(v.pop().expect("one sample"))
}

/// `log ₀F₁(c; x)` for scalar `x ≥ 0`, summed in scaled form.
fn log_0f1_scalar(c: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    // terms t_k = x^k / ((c)_k k!); sum relative to the largest one
    let mut logs = Vec::new();
    let mut lt = 0.0;
    let mut k = 0.0;
    loop {
        logs.push(lt);
        lt += x.ln() - ((c + k) * (k + 1.0)).ln();
        k += 1.0;
        let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if lt < peak - 40.0 && (c + k) * (k + 1.0) > x {
            break;
        }
    }
    let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    peak + logs.iter().map(|l| (l - peak).exp()).sum::<f64>().ln()
}

/// Exact rejection sampler with a sequential proposal. With `B = U S Vᵀ`,
/// column `m` of `P' = P V` is proposed from the sphere vMF on the complement
/// of columns `1..m` with parameter the projection `z_m` of `S_m u_m`. The
/// target-to-proposal ratio is `∏ₘ ₀F₁(d_m/2; ‖z_m‖²/4)` up to a constant,
/// which is largest at `‖z_m‖ = S_m`; accepting with the ratio of the two
/// gives exact draws.
pub fn vmf_sample_sequential<R: Rng + ?Sized>(
    d: &VmfMatrix,
    n: usize,
    rng: &mut R,
    budget: u64,
) -> Result<(Vec<DMatrix<f64>>, RejectionStats)> {
    let (j, m) = (d.rows(), d.cols());
    let svd = d.svd();
    let s = &svd.s;
    let bound: Vec<f64> = (0..m).map(|c| log_0f1_scalar((j - c) as f64 / 2.0, s[c] * s[c] / 4.0)).collect();
    let mut stats = RejectionStats::default();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if stats.proposals >= budget {
            return Err(Error::RejectionBudgetExceeded { proposals: stats.proposals, accepted: stats.accepted });
        }
        stats.proposals += 1;
        // columns 0..c of q span the drawn columns, the rest their complement
        let mut q = DMatrix::<f64>::identity(j, j);
        let mut x = DMatrix::zeros(j, m);
        let mut log_acc = 0.0;
        for c in 0..m {
            let dim = j - c;
            let basis = q.columns(c, dim).into_owned();
            let z = basis.transpose() * svd.u.column(c) * s[c];
            let kappa = z.norm();
            log_acc += log_0f1_scalar(dim as f64 / 2.0, kappa * kappa / 4.0) - bound[c];
            let y = sphere_vmf(&z, rng);
            x.set_column(c, &(&basis * &y));
            // Householder H with H e₁ = y, so that basis·H starts with the new column
            let mut v = y.clone();
            v[0] -= 1.0;
            let vn2 = v.norm_squared();
            let rotated = if vn2 > 0.0 { &basis - (&basis * &v) * (v.transpose() * (2.0 / vn2)) } else { basis };
            q.columns_mut(c, dim).copy_from(&rotated);
        }
        let u: f64 = rng.random();
        if u.ln() < log_acc {
            stats.accepted += 1;
            out.push(x * svd.v.transpose());
        }
    }
    Ok((out, stats))
}

/// Sample from the von Mises-Fisher distribution on the unit sphere in
/// `R^dim` with density `∝ exp(zᵀy)` (Wood's algorithm).
pub fn sphere_vmf<R: Rng + ?Sized>(z: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    let dim = z.len();
    let kappa = z.norm();
    if dim == 1 {
        // two-point sphere {−1, +1}
        let p_plus = 1.0 / (1.0 + (-2.0 * z[0]).exp());
        let u: f64 = rng.random();
        return DVector::from_element(1, if u < p_plus { 1.0 } else { -1.0 });
    }
    if kappa == 0.0 {
        let g = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        return &g / g.norm();
    }
    let mu = z / kappa;
    let dm1 = (dim - 1) as f64;
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("valid beta parameters");
    let w = loop {
        let zb: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * zb) / (1.0 - (1.0 - b) * zb);
        let u: f64 = rng.random();
        if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            break w;
        }
    };
    // uniform direction orthogonal to mu
    let mut v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let proj = v.dot(&mu);
    v -= &mu * proj;
    let vn = v.norm();
    let v = if vn > 0.0 { v / vn } else { v };
    &mu * w + v * (1.0 - w * w).max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct GibbsOptions {
    pub burn_in: usize,
    /// Full sweeps between retained samples.
    pub thin: usize,
}

impl Default for GibbsOptions {
    fn default() -> Self {
        GibbsOptions { burn_in: 1_000, thin: 1 }
    }
}

/// Orthonormal basis of the orthogonal complement of the columns of `x`
/// other than `skip`.
fn complement_basis(x: &DMatrix<f64>, skip: usize) -> DMatrix<f64> {
    let (j, m) = x.shape();
    let mut proj = DMatrix::<f64>::identity(j, j);
    for c in 0..m {
        if c != skip {
            let col = x.column(c);
            proj -= &col * col.transpose();
        }
    }
    let eig = proj.symmetric_eigen();
    let mut idx: Vec<usize> = (0..j).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let dim = j - m + 1;
    DMatrix::from_fn(j, dim, |r, c| eig.eigenvectors[(r, idx[c])])
}

/// Column-wise Gibbs sampler started at the mode. Returns `n` retained
/// states; successive states are correlated, so standard errors must account
/// for autocorrelation (see [`mean_with_batch_se`]).
pub fn vmf_sample_gibbs<R: Rng + ?Sized>(d: &VmfMatrix, n: usize, rng: &mut R, opts: GibbsOptions) -> Vec<DMatrix<f64>> {
    let m = d.cols();
    let b = d.b();
    let mut x = d.mode();
    let mut out = Vec::with_capacity(n);
    let total = opts.burn_in + n * opts.thin.max(1);
    for sweep in 0..total {
        for col in 0..m {
            let basis = complement_basis(&x, col);
            let z = basis.transpose() * b.column(col);
            let y = sphere_vmf(&z, rng);
            x.set_column(col, &(&basis * y));
        }
        if sweep >= opts.burn_in && (sweep - opts.burn_in) % opts.thin.max(1) == 0 {
            out.push(x.clone());
        }
    }
    out
}

/// Entrywise sample mean and batch-means standard error.
pub fn mean_with_batch_se(samples: &[DMatrix<f64>], batches: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = samples.len();
    assert!(n >= batches && batches >= 2, "need at least two batches");
    let (r, c) = samples[0].shape();
    let per = n / batches;
    let mut batch_means = Vec::with_capacity(batches);
    for bi in 0..batches {
        let mut acc = DMatrix::zeros(r, c);
        for s in &samples[bi * per..(bi + 1) * per] {
            acc += s;
        }
        batch_means.push(acc / per as f64);
    }
    let mean = batch_means.iter().fold(DMatrix::zeros(r, c), |a, b| a + b) / batches as f64;
    let mut var = DMatrix::zeros(r, c);
    for bm in &batch_means {
        let d = bm - &mean;
        var += d.component_mul(&d);
    }
    let var = var / (batches as f64 - 1.0);
    let se = var.map(|v| (v / batches as f64).sqrt());
    (mean, se)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn uniform_case_has_zero_mean() {
        let d = VmfMatrix::new(DMatrix::zeros(4, 2)).unwrap();
        let mut rng = seed::rng(1);
        let (samples, stats) = vmf_sample_many(&d, 20_000, &mut rng, DEFAULT_REJECTION_BUDGET).unwrap();
        assert_eq!(stats.proposals, stats.accepted);
        let (mean, se) = mean_with_batch_se(&samples, 50);
        for (m, s) in mean.iter().zip(se.iter()) {
            assert!(m.abs() <= 3.5 * s, "{m} vs se {s}");
        }
    }

    #[test]
    fn samples_are_orthonormal() {
        let mut rng = seed::rng(2);
        let b = seed::gaussian_matrix(&mut rng, 6, 3);
        let d = VmfMatrix::new(b).unwrap();
        let p = vmf_sample(&d, &mut rng).unwrap();
        assert!((p.transpose() * &p - DMatrix::<f64>::identity(3, 3)).amax() < 1e-10);
        for p in vmf_sample_gibbs(&d, 50, &mut rng, GibbsOptions { burn_in: 10, thin: 1 }) {
            assert!((p.transpose() * &p - DMatrix::<f64>::identity(3, 3)).amax() < 1e-10);
        }
    }

    #[test]
    fn budget_exhaustion_reports_counts() {
        let d = VmfMatrix::new(DMatrix::from_fn(10, 2, |i, j| if i == j { 50.0 } else { 0.0 })).unwrap();
        let mut rng = seed::rng(3);
        match vmf_sample_many(&d, 1, &mut rng, 1000) {
            Err(Error::RejectionBudgetExceeded { proposals, accepted }) => {
                assert_eq!(proposals, 1000);
                assert_eq!(accepted, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sphere_sampler_mean_resultant_matches_bessel_ratio() {
        // on S², E[μᵀy] = coth κ − 1/κ
        let mut rng = seed::rng(4);
        let kappa = 3.0;
        let z = DVector::from_vec(vec![0.0, kappa, 0.0]);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| sphere_vmf(&z, &mut rng)[1]).sum::<f64>() / n as f64;
        let want = 1.0 / kappa.tanh() - 1.0 / kappa;
        assert!((mean - want).abs() < 0.005);
    }

    #[test]
    fn scalar_0f1_matches_bessel_forms() {
        // ₀F₁(3/2; κ²/4) = sinh κ / κ and ₀F₁(1/2; κ²/4) = cosh κ
        for kappa in [0.1f64, 1.0, 7.5, 40.0, 300.0] {
            let x = kappa * kappa / 4.0;
            let want = kappa - (2.0 * kappa).ln() + (1.0 - (-2.0 * kappa).exp()).ln();
            assert!((log_0f1_scalar(1.5, x) - (want + 0.0)).abs() < 1e-10 * want.abs().max(1.0));
            let want = kappa + (0.5 * (1.0 + (-2.0 * kappa).exp())).ln();
            assert!((log_0f1_scalar(0.5, x) - want).abs() < 1e-10 * want.abs().max(1.0));
        }
    }

    #[test]
    fn sequential_sampler_agrees_with_uniform_proposal() {
        let mut rng = seed::rng(6);
        let b = seed::gaussian_matrix(&mut rng, 5, 2) * 0.8;
        let d = VmfMatrix::new(b).unwrap();
        let (a, _) = vmf_sample_many(&d, 40_000, &mut rng, DEFAULT_REJECTION_BUDGET).unwrap();
        let (s, stats) = vmf_sample_sequential(&d, 40_000, &mut rng, DEFAULT_REJECTION_BUDGET).unwrap();
        assert!(stats.acceptance_rate() > 0.5);
        for p in s.iter().take(100) {
            assert!((p.transpose() * p - DMatrix::<f64>::identity(2, 2)).amax() < 1e-10);
        }
        let (m1, s1) = mean_with_batch_se(&a, 40);
        let (m2, s2) = mean_with_batch_se(&s, 40);
        for i in 0..m1.len() {
            let tol = 4.0 * (s1[i] * s1[i] + s2[i] * s2[i]).sqrt() + 1e-3;
            assert!((m1[i] - m2[i]).abs() < tol, "entry {i}: {} vs {}", m1[i], m2[i]);
        }
    }

    #[test]
    fn sequential_sampler_stays_efficient_at_high_concentration() {
        let d = VmfMatrix::new(DMatrix::from_fn(20, 3, |i, j| if i == j { 20.0 } else { 0.0 })).unwrap();
        let mut rng = seed::rng(7);
        let (_, stats) = vmf_sample_sequential(&d, 2000, &mut rng, DEFAULT_REJECTION_BUDGET).unwrap();
        assert!(stats.acceptance_rate() > 0.05, "{}", stats.acceptance_rate());
    }

    #[test]
    fn gibbs_and_rejection_agree_at_weak_concentration() {
        let mut rng = seed::rng(5);
        let u = seed::uniform_stiefel(&mut rng, 5, 2);
        let d = VmfMatrix::new(&u * 1.5).unwrap();
        let (rej, _) = vmf_sample_many(&d, 40_000, &mut rng, DEFAULT_REJECTION_BUDGET).unwrap();
        let gibbs = vmf_sample_gibbs(&d, 40_000, &mut rng, GibbsOptions::default());
        let (m1, s1) = mean_with_batch_se(&rej, 40);
        let (m2, s2) = mean_with_batch_se(&gibbs, 40);
        for i in 0..m1.len() {
            let tol = 4.0 * (s1[i] * s1[i] + s2[i] * s2[i]).sqrt() + 1e-3;
            assert!((m1[i] - m2[i]).abs() < tol, "entry {i}: {} vs {}", m1[i], m2[i]);
        }
    }
}
