//! Variational Bayes PARAFAC2.
//!
//! Generative model: rows of `A` and `F` are standard normal, row `k` of `C`
//! is `N(0, diag(α)⁻¹)`, each `P_k` is uniform on the Stiefel manifold (vMF
//! variant) or matrix normal `MN(0, I, I)` (cMN variant), and
//! `X_k ~ N(A D_k Fᵀ P_kᵀ, τ_k⁻¹ I)` with Gamma priors on `τ_k` (one shared
//! `τ` in the homoscedastic variant). The posterior is approximated by
//! `q(A) q(C) Π_m q(f_m) Π_k q(P_k) q(τ)` and fitted by coordinate ascent.

mod elbo;
mod moments;
mod updates;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::direct::{self, DirectFitOptions, Parafac2Point};
use crate::error::{Error, Result};
use crate::tensor::RaggedTensor3;
use crate::vmf::{HypergeometricMethod, VmfMatrix};

pub use elbo::{elbo, elbo_terms, ElboTerms};
pub use moments::{expected_gram_p, Moments};
pub use updates::{update_alpha, update_qa, update_qc, update_qf, update_qp, update_qp_cmn, update_qp_vmf, update_qtau};

/// The `₀F₁` evaluator used inside the engine. Moments and entropies must
/// come from the same function for coordinate ascent to be monotone.
pub const VB_HYPERGEOMETRIC: HypergeometricMethod = HypergeometricMethod::ClosedForm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orthogonality {
    Vmf,
    Cmn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Noise {
    Homo,
    Hetero,
}

impl std::fmt::Display for Orthogonality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Orthogonality::Vmf => "vmf",
            Orthogonality::Cmn => "cmn",
        })
    }
}

impl std::fmt::Display for Noise {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Noise::Homo => "homo",
            Noise::Hetero => "hetero",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeConfig {
    pub m: usize,
    pub orthogonality: Orthogonality,
    pub noise: Noise,
    pub tau_shape_prior: f64,
    pub tau_scale_prior: f64,
}

impl GenerativeConfig {
    pub fn new(m: usize, orthogonality: Orthogonality, noise: Noise) -> Self {
        GenerativeConfig { m, orthogonality, noise, tau_shape_prior: 1.0, tau_scale_prior: 1e32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidConfig("M must be at least 1".into()));
        }
        if !(self.tau_shape_prior > 0.0 && self.tau_scale_prior > 0.0) {
            return Err(Error::InvalidConfig("Gamma prior parameters must be positive".into()));
        }
        Ok(())
    }

    /// `vb-vmf-hetero` style label.
    pub fn label(&self) -> String {
        format!("vb-{}-{}", self.orthogonality, self.noise)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VbOptions {
    pub max_iters: usize,
    #[serde(with = "crate::serde_float")]
    pub rel_tol_elbo: f64,
    pub restarts: usize,
    /// Iterations during which `q(τ)` is held at its initial value.
    pub ard_delay_iters: usize,
    pub seed: u64,
    /// Record the ELBO after every single coordinate update.
    pub trace_updates: bool,
    /// Abort a fit when the ELBO drops by more than `monotonicity_slack`
    /// (relative) after an update or iteration.
    pub strict_monotonicity: bool,
    pub monotonicity_slack: f64,
    /// Scale of the initial vMF parameter, `B_k = κ₀·P_k`.
    pub kappa0: f64,
    /// Initial covariance scale for `q(A)`, `q(C)`, `q(F)` and cMN `q(P_k)`.
    pub init_cov: f64,
    pub direct: DirectFitOptions,
}

impl Default for VbOptions {
    fn default() -> Self {
        VbOptions {
            max_iters: 10_000,
            rel_tol_elbo: 1e-9,
            restarts: 5,
            ard_delay_iters: 50,
            seed: 0,
            trace_updates: false,
            strict_monotonicity: true,
            monotonicity_slack: 1e-8,
            kappa0: 10.0,
            init_cov: 1e-4,
            direct: DirectFitOptions::default(),
        }
    }
}

impl VbOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.restarts == 0 || !(self.rel_tol_elbo > 0.0) {
            return Err(Error::InvalidConfig("max_iters, restarts and rel_tol_elbo must be positive".into()));
        }
        if !(self.kappa0 >= 0.0 && self.init_cov > 0.0 && self.monotonicity_slack >= 0.0) {
            return Err(Error::InvalidConfig("kappa0 >= 0, init_cov > 0 and slack >= 0 required".into()));
        }
        Ok(())
    }
}

/// Gamma factor with shape `a` and scale `b` (mean `a·b`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaFactor {
    pub shape: f64,
    pub scale: f64,
}

impl GammaFactor {
    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    pub fn mean_log(&self) -> f64 {
        digamma(self.shape) + self.scale.ln()
    }

    pub fn entropy(&self) -> f64 {
        self.shape + self.scale.ln() + ln_gamma(self.shape) + (1.0 - self.shape) * digamma(self.shape)
    }
}

/// Matrix von Mises-Fisher factor with its moments evaluated once, at
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfFactor {
    b: DMatrix<f64>,
    mean: DMatrix<f64>,
    mode: DMatrix<f64>,
    s: Vec<f64>,
    g: Vec<f64>,
    log_norm_const: f64,
    gram_gap: DMatrix<f64>,
    entropy: f64,
}

impl VmfFactor {
    pub fn new(b: DMatrix<f64>) -> Result<Self> {
        let d = VmfMatrix::new(b)?;
        let mom = d.moments_with(VB_HYPERGEOMETRIC)?;
        Ok(VmfFactor {
            gram_gap: d.gram_gap(VB_HYPERGEOMETRIC)?,
            entropy: d.entropy_with(VB_HYPERGEOMETRIC)?,
            mode: d.mode(),
            s: d.singular_values(),
            g: mom.g,
            log_norm_const: mom.log_norm_const,
            mean: mom.mean,
            b: d.b().clone(),
        })
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// `E[P]`.
    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    pub fn mode(&self) -> &DMatrix<f64> {
        &self.mode
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.s
    }

    /// `∂ log ₀F₁ / ∂S_m`.
    pub fn g(&self) -> &[f64] {
        &self.g
    }

    pub fn log_norm_const(&self) -> f64 {
        self.log_norm_const
    }

    /// `I − E[P]ᵀE[P]`.
    pub fn gram_gap(&self) -> &DMatrix<f64> {
        &self.gram_gap
    }

    /// `log κ − Σ S_m g_m`, evaluated without cancellation.
    pub fn entropy(&self) -> f64 {
        self.entropy
    }
}

/// Variational factor of one projection matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PFactor {
    /// Matrix von Mises-Fisher with parameter `B` (`J_k × M`).
    Vmf(VmfFactor),
    /// Matrix normal with orthonormal mean, identity row covariance and
    /// column covariance `sigma` (`M × M`).
    Cmn { mean: DMatrix<f64>, sigma: DMatrix<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub config: GenerativeConfig,
    /// Row `i` is the mean of `a_i`.
    pub mu_a: DMatrix<f64>,
    /// Covariance shared by every row of `A`.
    pub sigma_a: DMatrix<f64>,
    /// Row `k` is the mean of `c_k`, the diagonal of `D_k`.
    pub mu_c: DMatrix<f64>,
    pub sigma_c: Vec<DMatrix<f64>>,
    /// Row `m` is the mean of `f_m`.
    pub mu_f: DMatrix<f64>,
    pub sigma_f: Vec<DMatrix<f64>>,
    pub p: Vec<PFactor>,
    /// One factor (homoscedastic) or one per slab (heteroscedastic).
    pub tau: Vec<GammaFactor>,
    pub alpha: DVector<f64>,
}

impl VariationalState {
    pub fn n_components(&self) -> usize {
        self.config.m
    }

    pub fn n_slabs(&self) -> usize {
        self.mu_c.nrows()
    }

    pub fn tau_factor(&self, k: usize) -> &GammaFactor {
        if self.tau.len() == 1 {
            &self.tau[0]
        } else {
            &self.tau[k]
        }
    }

    pub fn check_shapes(&self, t: &RaggedTensor3) -> Result<()> {
        let m = self.config.m;
        let kk = t.n_slabs();
        let ok = self.mu_a.shape() == (t.rows(), m)
            && self.sigma_a.shape() == (m, m)
            && self.mu_c.shape() == (kk, m)
            && self.sigma_c.len() == kk
            && self.mu_f.shape() == (m, m)
            && self.sigma_f.len() == m
            && self.p.len() == kk
            && self.alpha.len() == m
            && self.tau.len() == if self.config.noise == Noise::Homo { 1 } else { kk };
        if !ok {
            return Err(Error::ShapeMismatch(0, "variational state does not match the tensor".into()));
        }
        for (k, pf) in self.p.iter().enumerate() {
            let rows = match pf {
                PFactor::Vmf(v) => v.b().shape(),
                PFactor::Cmn { mean, .. } => (mean.nrows(), mean.ncols()),
            };
            if rows != (t.width(k), m) {
                return Err(Error::ShapeMismatch(k + 1, "projection factor shape".into()));
            }
        }
        Ok(())
    }

    /// Posterior mean of each projection.
    pub fn mean_p(&self) -> Result<Vec<DMatrix<f64>>> {
        self.p
            .iter()
            .map(|pf| match pf {
                PFactor::Vmf(v) => Ok(v.mean().clone()),
                PFactor::Cmn { mean, .. } => Ok(mean.clone()),
            })
            .collect()
    }

    /// Orthonormal point summary of each projection: the vMF mode or the
    /// cMN mean.
    pub fn point_p(&self) -> Result<Vec<DMatrix<f64>>> {
        self.p
            .iter()
            .map(|pf| match pf {
                PFactor::Vmf(v) => Ok(v.mode().clone()),
                PFactor::Cmn { mean, .. } => Ok(mean.clone()),
            })
            .collect()
    }

    /// Point model built from the posterior means of `A`, `C`, `F` and the
    /// orthonormal projection summaries.
    pub fn point_estimate(&self) -> Result<Parafac2Point> {
        Ok(Parafac2Point { a: self.mu_a.clone(), f: self.mu_f.clone(), c: self.mu_c.clone(), p: self.point_p()? })
    }

    /// Posterior mean of each reconstructed slab,
    /// `E[A] E[D_k] E[F]ᵀ E[P_k]ᵀ`.
    pub fn mean_reconstruction(&self) -> Result<Vec<DMatrix<f64>>> {
        let ep = self.mean_p()?;
        Ok(ep
            .iter()
            .enumerate()
            .map(|(k, p)| &self.mu_a * DMatrix::from_diagonal(&self.mu_c.row(k).transpose()) * self.mu_f.transpose() * p.transpose())
            .collect())
    }

    /// `Σ_k E[c_km²]` for each component.
    pub fn component_energy(&self) -> DVector<f64> {
        let m = self.config.m;
        DVector::from_fn(m, |c, _| (0..self.n_slabs()).map(|k| self.mu_c[(k, c)].powi(2) + self.sigma_c[k][(c, c)]).sum())
    }
}

/// Per-iteration and per-update bookkeeping of one fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub iteration: usize,
    pub update: String,
    pub elbo: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Expected residuals clamped at `1e-15` in the `q(τ)` update.
    pub tau_clamps: usize,
    /// cMN mean updates whose Procrustes problem was rank deficient.
    pub rank_deficient_procrustes: usize,
    /// How `₀F₁` and its gradient were evaluated.
    pub hypergeometric: String,
    /// Largest relative ELBO decrease observed (0 when monotone).
    pub max_relative_decrease: f64,
    /// Orthonormality error of cMN means, `max ‖MᵀM − I‖_∞` over all updates.
    pub max_cmn_orthonormality_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub config: GenerativeConfig,
    /// ELBO at initialisation followed by one value per iteration.
    pub elbo_trace: Vec<f64>,
    pub update_trace: Vec<UpdateRecord>,
    pub elbo: f64,
    pub r2: f64,
    pub ccd: Option<f64>,
    pub effective_components: usize,
    pub iterations: usize,
    pub converged: bool,
    pub restart: usize,
    /// Final ELBO of every restart (`None` for failed restarts).
    pub restart_elbos: Vec<Option<f64>>,
    pub restart_errors: Vec<String>,
    pub diagnostics: FitDiagnostics,
}

/// Relative energy above which a component counts as active.
pub const EFFECTIVE_THRESHOLD: f64 = 1e-3;

/// Number of components whose energy `Σ_k E[c_km²]`, relative to the largest
/// one, exceeds `threshold`.
pub fn effective_components(energy: &DVector<f64>, threshold: f64) -> usize {
    let max = energy.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0;
    }
    energy.iter().filter(|&&e| e / max > threshold).count()
}

/// Variational state initialised from a direct-fit point estimate.
pub fn state_from_point(
    t: &RaggedTensor3,
    point: &Parafac2Point,
    cfg: &GenerativeConfig,
    opts: &VbOptions,
) -> Result<VariationalState> {
    cfg.validate()?;
    point.check_shapes(t)?;
    let m = cfg.m;
    if point.n_components() != m {
        return Err(Error::InvalidConfig("point estimate has a different model order".into()));
    }
    let kk = t.n_slabs();
    let i = t.rows() as f64;
    let cov = DMatrix::identity(m, m) * opts.init_cov;
    let sse: Vec<f64> = (0..kk).map(|k| (t.slab(k) - point.reconstruct_slab(k)).norm_squared().max(1e-15)).collect();
    let counts: Vec<f64> = (0..kk).map(|k| i * t.width(k) as f64).collect();
    let make_tau = |n: f64, rss: f64| {
        let shape = cfg.tau_shape_prior + n / 2.0;
        let mean = n / rss;
        GammaFactor { shape, scale: mean / shape }
    };
    let tau = match cfg.noise {
        Noise::Homo => vec![make_tau(counts.iter().sum(), sse.iter().sum())],
        Noise::Hetero => (0..kk).map(|k| make_tau(counts[k], sse[k])).collect(),
    };
    let p = point
        .p
        .iter()
        .map(|pk| match cfg.orthogonality {
            Orthogonality::Vmf => Ok(PFactor::Vmf(VmfFactor::new(pk * opts.kappa0)?)),
            Orthogonality::Cmn => Ok(PFactor::Cmn { mean: pk.clone(), sigma: cov.clone() }),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VariationalState {
        config: cfg.clone(),
        mu_a: point.a.clone(),
        sigma_a: cov.clone(),
        mu_c: point.c.clone(),
        sigma_c: vec![cov.clone(); kk],
        mu_f: point.f.clone(),
        sigma_f: vec![cov.clone(); m],
        p,
        tau,
        alpha: DVector::from_element(m, 1.0),
    })
}

/// Initialises at the direct-fit solution. Restart `r` runs the direct fit
/// from its own restart `r`, whose starting `A` carries N(0, 0.1²) jitter
/// for `r ≥ 1`, so restarts begin at different solutions.
pub fn init_from_direct(t: &RaggedTensor3, cfg: &GenerativeConfig, opts: &VbOptions, restart: usize) -> Result<VariationalState> {
    let dopts = DirectFitOptions { restarts: 1, seed: opts.seed, ..opts.direct.clone() };
    direct::validate(t, cfg.m, &dopts)?;
    let fit = direct::run_from(t, direct::initial_model(t, cfg.m, opts.seed, restart)?, &dopts)?;
    state_from_point(t, &fit.model, cfg, opts)
}

/// Result of one coordinate-ascent run.
#[derive(Debug, Clone)]
pub struct SingleFit {
    pub state: VariationalState,
    pub elbo_trace: Vec<f64>,
    pub update_trace: Vec<UpdateRecord>,
    pub iterations: usize,
    pub converged: bool,
    pub diagnostics: FitDiagnostics,
}

struct Monitor<'a> {
    opts: &'a VbOptions,
    slab_norms: Vec<f64>,
    last: f64,
    iteration: usize,
    trace: Vec<UpdateRecord>,
    diag: FitDiagnostics,
}

impl Monitor<'_> {
    /// Rounding error of `E[τ_k]‖X_k − Z E[P_k]ᵀ‖²`, about
    /// `ε² E[τ_k] ‖X_k‖²` per slab. It only matters once `E[τ]` reaches
    /// `1/ε²`-like values (near-noiseless data).
    fn rounding_floor(&self, state: &VariationalState) -> f64 {
        let m = state.config.m as f64;
        64.0 * m * f64::EPSILON * f64::EPSILON * self.slab_norms.iter().enumerate().map(|(k, n)| state.tau_factor(k).mean() * n).sum::<f64>()
    }

    fn check(&mut self, update: &str, value: f64, state: &VariationalState) -> Result<()> {
        let drop = self.last - value;
        let relative = drop / self.last.abs().max(f64::MIN_POSITIVE);
        if drop > 0.0 && relative > self.diag.max_relative_decrease {
            self.diag.max_relative_decrease = relative;
        }
        let allowed = self.opts.monotonicity_slack * self.last.abs() + self.rounding_floor(state);
        if self.opts.strict_monotonicity && drop > allowed {
            return Err(Error::ElboDecrease { update: update.to_string(), iteration: self.iteration, drop, relative });
        }
        self.last = value;
        Ok(())
    }

    fn after_update(&mut self, update: &str, state: &VariationalState, t: &RaggedTensor3) -> Result<()> {
        if !self.opts.trace_updates {
            return Ok(());
        }
        let value = elbo(state, t)?;
        self.trace.push(UpdateRecord { iteration: self.iteration, update: update.to_string(), elbo: value });
        self.check(update, value, state)
    }
}

fn cmn_orthonormality_error(state: &VariationalState) -> f64 {
    state
        .p
        .iter()
        .map(|pf| match pf {
            PFactor::Cmn { mean, .. } => {
                let m = mean.ncols();
                (mean.transpose() * mean - DMatrix::<f64>::identity(m, m)).amax()
            }
            PFactor::Vmf(_) => 0.0,
        })
        .fold(0.0, f64::max)
}

/// Coordinate ascent from a given state: each iteration updates `q(A)`,
/// `q(C)`, the rows of `q(F)`, every `q(P_k)`, `q(τ)` (after the delay) and
/// `α`, and stops when the relative ELBO change falls below `rel_tol_elbo`.
pub fn run_from(t: &RaggedTensor3, mut state: VariationalState, opts: &VbOptions) -> Result<SingleFit> {
    opts.validate()?;
    state.check_shapes(t)?;
    let start = elbo(&state, t)?;
    let mut mon = Monitor {
        opts,
        slab_norms: t.slab_norms_sq(),
        last: start,
        iteration: 0,
        trace: Vec::new(),
        diag: FitDiagnostics { hypergeometric: "closed-form, analytic gradient".into(), ..FitDiagnostics::default() },
    };
    if opts.trace_updates {
        mon.trace.push(UpdateRecord { iteration: 0, update: "init".into(), elbo: start });
    }
    let mut elbo_trace = vec![start];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iters {
        mon.iteration = it;
        update_qa(&mut state, t)?;
        mon.after_update("qA", &state, t)?;
        update_qc(&mut state, t)?;
        mon.after_update("qC", &state, t)?;
        update_qf(&mut state, t)?;
        mon.after_update("qF", &state, t)?;
        mon.diag.rank_deficient_procrustes += update_qp(&mut state, t)?;
        mon.diag.max_cmn_orthonormality_error = mon.diag.max_cmn_orthonormality_error.max(cmn_orthonormality_error(&state));
        mon.after_update("qP", &state, t)?;
        if it > opts.ard_delay_iters {
            mon.diag.tau_clamps += update_qtau(&mut state, t)?;
            mon.after_update("qtau", &state, t)?;
        }
        update_alpha(&mut state);
        let value = elbo(&state, t)?;
        let prev = *elbo_trace.last().expect("trace has the initial value");
        if opts.trace_updates {
            mon.trace.push(UpdateRecord { iteration: it, update: "alpha".into(), elbo: value });
            mon.check("alpha", value, &state)?;
        } else {
            mon.check("iteration", value, &state)?;
        }
        elbo_trace.push(value);
        iterations = it;
        // q(τ) must have been updated at least once before stopping
        let tau_active = it > opts.ard_delay_iters;
        if opts.rel_tol_elbo.is_infinite() || (tau_active && (value - prev).abs() < opts.rel_tol_elbo * prev.abs()) {
            converged = true;
            break;
        }
    }
    Ok(SingleFit { state, elbo_trace, update_trace: mon.trace, iterations, converged, diagnostics: mon.diag })
}

/// Fits `opts.restarts` coordinate-ascent runs from the direct-fit
/// initialisation and returns the one with the highest final ELBO.
pub fn fit_vb(t: &RaggedTensor3, cfg: &GenerativeConfig, opts: &VbOptions) -> Result<(VariationalState, FitReport)> {
    cfg.validate()?;
    opts.validate()?;
    direct::validate(t, cfg.m, &opts.direct)?;
    let runs: Vec<Result<SingleFit>> =
        (0..opts.restarts).into_par_iter().map(|r| run_from(t, init_from_direct(t, cfg, opts, r)?, opts)).collect();
    let mut best: Option<(usize, SingleFit)> = None;
    let mut restart_elbos = Vec::with_capacity(runs.len());
    let mut errors = Vec::new();
    for (r, run) in runs.into_iter().enumerate() {
        match run {
            Ok(fit) => {
                let last = *fit.elbo_trace.last().expect("non-empty trace");
                restart_elbos.push(Some(last));
                let better = match &best {
                    None => true,
                    Some((_, b)) => last > *b.elbo_trace.last().expect("non-empty trace"),
                };
                if better {
                    best = Some((r, fit));
                }
            }
            Err(e) => {
                restart_elbos.push(None);
                errors.push(format!("restart {r}: {e}"));
            }
        }
    }
    let (restart, fit) = best.ok_or_else(|| Error::AllRestartsFailed(errors.clone()))?;
    let report = build_report(t, &fit, restart, restart_elbos, errors)?;
    Ok((fit.state, report))
}

fn build_report(
    t: &RaggedTensor3,
    fit: &SingleFit,
    restart: usize,
    restart_elbos: Vec<Option<f64>>,
    restart_errors: Vec<String>,
) -> Result<FitReport> {
    let state = &fit.state;
    let r2 = direct::r2_of_reconstruction(&state.mean_reconstruction()?, t)?;
    let ccd = direct::core_consistency(&state.point_estimate()?, t).ok();
    Ok(FitReport {
        config: state.config.clone(),
        elbo_trace: fit.elbo_trace.clone(),
        update_trace: fit.update_trace.clone(),
        elbo: *fit.elbo_trace.last().expect("non-empty trace"),
        r2,
        ccd,
        effective_components: effective_components(&state.component_energy(), EFFECTIVE_THRESHOLD),
        iterations: fit.iterations,
        converged: fit.converged,
        restart,
        restart_elbos,
        restart_errors,
        diagnostics: fit.diagnostics.clone(),
    })
}
