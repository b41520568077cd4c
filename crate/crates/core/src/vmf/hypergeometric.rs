//! `₀F₁(J/2; S²/4)` for the matrix von Mises-Fisher normaliser, as a
//! function of the singular values `S` of the concentration matrix.
//!
//! Two evaluators are provided. The zonal (Jack, α = 2) series is exact up to
//! truncation and serves as the reference for few, small singular values.
//! The closed form is used everywhere else:
//!
//! `Σ_m φ(S_m) − ½ Σ_{i<j} log((r_i + r_j)/(2e))`,  `r = √(e² + S²)`, `e = J/2`,
//!
//! where `φ` integrates the Amos-type Bessel-ratio approximation
//! `φ'(s) = s/(a + √(b² + s²))` with `a = (J − M)/2`. `b` is set so that the
//! quadratic term at the origin is the exact `Σ S²/(2J)`; at large `S` the
//! expression follows the Laplace asymptotics
//! `Σ S_m − (J−M)/2·Σ log S_m − ½ Σ_{i<j} log(S_i + S_j)`. For `M = 1` it is
//! the usual Bessel-ratio approximation. Its gradient is analytic and the
//! function is convex, so variational updates built on it are exact
//! maximisers of the bound they feed.

use std::collections::HashMap;

use crate::error::{Error, Result};

const ALPHA: f64 = 2.0;
const SERIES_MAX_DEGREE: usize = 160;

/// Parameters of the closed form for `J` rows and `M` singular values.
#[derive(Debug, Clone, Copy)]
struct ClosedForm {
    a: f64,
    b: f64,
    e: f64,
}

impl ClosedForm {
    fn new(j: usize, m: usize) -> Self {
        let n = j as f64;
        let a = (n - m as f64) / 2.0;
        let e = n / 2.0;
        let ab = 1.0 / (1.0 / n + (m as f64 - 1.0) / (4.0 * e * e));
        ClosedForm { a, b: ab - a, e }
    }

    fn phi(&self, s: f64) -> f64 {
        let r = self.b.hypot(s);
        r - self.b - self.a * ((self.a + r) / (self.a + self.b)).ln()
    }
}

fn check_args(j: usize, s: &[f64]) -> Result<()> {
    if s.is_empty() || j < s.len() {
        return Err(Error::InvalidConfig(format!("need J >= M >= 1, got J={j}, M={}", s.len())));
    }
    if let Some(bad) = s.iter().find(|x| !x.is_finite()) {
        return Err(Error::ApproximationOutOfRange(format!("singular value {bad} is not finite")));
    }
    Ok(())
}

/// Closed-form approximation of `log ₀F₁(J/2; S²/4)`.
pub fn log_0f1_closed(j: usize, s: &[f64]) -> Result<f64> {
    check_args(j, s)?;
    let cf = ClosedForm::new(j, s.len());
    let r: Vec<f64> = s.iter().map(|x| cf.e.hypot(*x)).collect();
    let mut total: f64 = s.iter().map(|&x| cf.phi(x)).sum();
    for i in 0..s.len() {
        for k in (i + 1)..s.len() {
            total -= 0.5 * ((r[i] + r[k]) / (2.0 * cf.e)).ln();
        }
    }
    Ok(total)
}

/// Analytic gradient of [`log_0f1_closed`] with respect to `S`.
pub fn grad_log_0f1_closed(j: usize, s: &[f64]) -> Result<Vec<f64>> {
    check_args(j, s)?;
    let cf = ClosedForm::new(j, s.len());
    let r: Vec<f64> = s.iter().map(|x| cf.e.hypot(*x)).collect();
    let mut g = Vec::with_capacity(s.len());
    for m in 0..s.len() {
        let sm = s[m];
        let mut v = sm / (cf.a + cf.b.hypot(sm));
        for k in 0..s.len() {
            if k != m {
                v -= 0.5 * (sm / r[m]) / (r[m] + r[k]);
            }
        }
        g.push(v);
    }
    Ok(g)
}

/// `log ₀F₁ − Σ S_m g_m` for the closed form, the `S`-dependent part of the
/// vMF entropy. Both terms grow like `Σ S_m`; the difference is formed
/// analytically so it keeps full precision at high concentration.
pub fn log_0f1_minus_sg_closed(j: usize, s: &[f64]) -> Result<f64> {
    check_args(j, s)?;
    let cf = ClosedForm::new(j, s.len());
    let (a, b) = (cf.a, cf.b);
    let r: Vec<f64> = s.iter().map(|x| cf.e.hypot(*x)).collect();
    let mut total = 0.0;
    for m in 0..s.len() {
        let h = b.hypot(s[m]);
        // φ(s) − s²/(a + h) with h(a + h) − s² = a·h + b²
        total += (a * h + b * b) / (a + h) - b - a * ((a + h) / (a + b)).ln();
        for k in 0..s.len() {
            if k != m {
                total += 0.5 * s[m] * (s[m] / r[m]) / (r[m] + r[k]);
            }
            if k > m {
                total -= 0.5 * ((r[m] + r[k]) / (2.0 * cf.e)).ln();
            }
        }
    }
    Ok(total)
}

/// `1 − g_m` for the closed-form gradient, without the cancellation of
/// `1 − g` as `g → 1`.
pub fn grad_complement_closed(j: usize, s: &[f64]) -> Result<Vec<f64>> {
    check_args(j, s)?;
    let cf = ClosedForm::new(j, s.len());
    let r: Vec<f64> = s.iter().map(|x| cf.e.hypot(*x)).collect();
    let mut out = Vec::with_capacity(s.len());
    for m in 0..s.len() {
        let sm = s[m];
        let h = cf.b.hypot(sm);
        // 1 − s/(a + h) with h − s = b²/(h + s)
        let mut v = (cf.a + cf.b * cf.b / (h + sm)) / (cf.a + h);
        for k in 0..s.len() {
            if k != m {
                v += 0.5 * (s[m] / r[m]) / (r[m] + r[k]);
            }
        }
        out.push(v);
    }
    Ok(out)
}

type Partition = Vec<usize>;

fn conjugate(k: &[usize]) -> Vec<usize> {
    match k.first() {
        None => Vec::new(),
        Some(&first) => (0..first).map(|j| k.iter().filter(|&&p| p > j).count()).collect(),
    }
}

fn upper_hook(k: &[usize], kc: &[usize], i: usize, j: usize) -> f64 {
    kc[j] as f64 - i as f64 - 1.0 + ALPHA * (k[i] - j) as f64
}

fn lower_hook(k: &[usize], kc: &[usize], i: usize, j: usize) -> f64 {
    kc[j] as f64 - i as f64 + ALPHA * (k[i] - j - 1) as f64
}

fn log_j_norm(k: &[usize]) -> f64 {
    let kc = conjugate(k);
    let mut acc = 0.0;
    for i in 0..k.len() {
        for j in 0..k[i] {
            acc += (upper_hook(k, &kc, i, j) * lower_hook(k, &kc, i, j)).ln();
        }
    }
    acc
}

fn beta(k: &[usize], mu: &[usize]) -> f64 {
    let kc = conjugate(k);
    let mc = conjugate(mu);
    let same_col = |j: usize| kc[j] == mc.get(j).copied().unwrap_or(0);
    let mut p = 1.0;
    for i in 0..k.len() {
        for j in 0..k[i] {
            p *= if same_col(j) { upper_hook(k, &kc, i, j) } else { lower_hook(k, &kc, i, j) };
        }
    }
    for i in 0..mu.len() {
        for j in 0..mu[i] {
            p /= if same_col(j) { upper_hook(mu, &mc, i, j) } else { lower_hook(mu, &mc, i, j) };
        }
    }
    p
}

/// Partitions `μ ⊆ κ` such that `κ/μ` is a horizontal strip.
fn horizontal_strips(k: &[usize]) -> Vec<Partition> {
    let mut out = vec![Vec::new()];
    for i in 0..k.len() {
        let lo = k.get(i + 1).copied().unwrap_or(0);
        let mut next = Vec::new();
        for prefix in &out {
            for v in lo..=k[i] {
                let mut p = prefix.clone();
                p.push(v);
                next.push(p);
            }
        }
        out = next;
    }
    out.into_iter()
        .map(|mut p| {
            p.retain(|&x| x > 0);
            p
        })
        .collect()
}

struct JackCache<'a> {
    x: &'a [f64],
    memo: HashMap<(Partition, usize), f64>,
}

impl JackCache<'_> {
    /// Jack polynomial `J_κ^{(α)}(x_1, …, x_n)` via the branching rule.
    fn jack(&mut self, k: &[usize], n: usize) -> f64 {
        if k.is_empty() {
            return 1.0;
        }
        if k.len() > n {
            return 0.0;
        }
        if let Some(&v) = self.memo.get(&(k.to_vec(), n)) {
            return v;
        }
        let v = if n == 1 {
            let mut p = self.x[0].powi(k[0] as i32);
            for i in 1..k[0] {
                p *= 1.0 + ALPHA * i as f64;
            }
            p
        } else {
            let deg: usize = k.iter().sum();
            let xn = self.x[n - 1];
            let mut acc = 0.0;
            for mu in horizontal_strips(k) {
                if mu.len() > n - 1 {
                    continue;
                }
                let dm: usize = mu.iter().sum();
                let pow = xn.powi((deg - dm) as i32);
                if pow == 0.0 {
                    continue;
                }
                acc += self.jack(&mu, n - 1) * pow * beta(k, &mu);
            }
            acc
        };
        self.memo.insert((k.to_vec(), n), v);
        v
    }
}

fn partitions(n: usize, max_parts: usize, max_val: usize, prefix: &mut Partition, out: &mut Vec<Partition>) {
    if n == 0 {
        out.push(prefix.clone());
        return;
    }
    if max_parts == 0 {
        return;
    }
    for first in (1..=n.min(max_val)).rev() {
        prefix.push(first);
        partitions(n - first, max_parts - 1, first, prefix, out);
        prefix.pop();
    }
}

fn log_pochhammer(c: f64, k: &[usize]) -> f64 {
    let mut acc = 0.0;
    for (i, &ki) in k.iter().enumerate() {
        for j in 0..ki {
            acc += (c - i as f64 / ALPHA + j as f64).ln();
        }
    }
    acc
}

/// `log ₀F₁(c; diag(x))` by summing the zonal series degree by degree until
/// a degree contributes less than `1e-17` of the running total. Intended for
/// a handful of moderate arguments; raises `ApproximationOutOfRange` if the
/// series has not settled by degree 160.
pub fn log_0f1_series(c: f64, x: &[f64]) -> Result<f64> {
    if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::ApproximationOutOfRange("series arguments must be finite and nonnegative".into()));
    }
    let xmax = x.iter().cloned().fold(0.0, f64::max);
    if xmax == 0.0 {
        return Ok(0.0);
    }
    // Jack polynomials are homogeneous, so evaluate at x / xmax and carry the
    // scale in the log weight to keep every factor in range.
    let y: Vec<f64> = x.iter().map(|v| v / xmax).collect();
    let mut cache = JackCache { x: &y, memo: HashMap::new() };
    let n = x.len();
    let mut total = 1.0;
    let mut small_run = 0;
    for deg in 1..=SERIES_MAX_DEGREE {
        let mut parts = Vec::new();
        partitions(deg, n, deg, &mut Vec::new(), &mut parts);
        let log_fact: f64 = (1..=deg).map(|i| (i as f64).ln()).sum();
        let mut term = 0.0;
        for k in &parts {
            let jv = cache.jack(k, n);
            if jv <= 0.0 {
                continue;
            }
            let log_c = deg as f64 * ALPHA.ln() + log_fact - log_j_norm(k) + jv.ln() + deg as f64 * xmax.ln();
            term += (log_c - log_pochhammer(c, k) - log_fact).exp();
        }
        total += term;
        if term < 1e-17 * total {
            small_run += 1;
            if small_run >= 2 {
                return Ok(total.ln());
            }
        } else {
            small_run = 0;
        }
    }
    Err(Error::ApproximationOutOfRange(format!("zonal series did not settle by degree {SERIES_MAX_DEGREE}")))
}

/// Series evaluation of `log ₀F₁(J/2; S²/4)`.
pub fn log_0f1_series_sv(j: usize, s: &[f64]) -> Result<f64> {
    check_args(j, s)?;
    let x: Vec<f64> = s.iter().map(|v| v * v / 4.0).collect();
    log_0f1_series(j as f64 / 2.0, &x)
}

/// Central-difference gradient step for singular value `s`.
pub fn fd_step(s: f64) -> f64 {
    (1e-5f64).max(1e-5 * s)
}

/// Gradient of the series evaluation by central differences.
pub fn grad_log_0f1_series(j: usize, s: &[f64]) -> Result<Vec<f64>> {
    let mut g = Vec::with_capacity(s.len());
    for m in 0..s.len() {
        let h = fd_step(s[m]);
        let mut plus = s.to_vec();
        let mut minus = s.to_vec();
        plus[m] += h;
        // log ₀F₁ is even in each singular value, so crossing zero is harmless
        minus[m] = (minus[m] - h).abs();
        let fp = log_0f1_series_sv(j, &plus)?;
        let fm = log_0f1_series_sv(j, &minus)?;
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

/// Whether the series evaluator is used under [`super::HypergeometricMethod::Auto`].
pub fn series_preferred(s: &[f64]) -> bool {
    s.len() <= 2 && s.iter().all(|&v| v <= 8.0)
}
