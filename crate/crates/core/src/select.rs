//! Model-order sweeps and evaluation metrics: noiseless R², CCD, ELBO
//! curves, congruence matching against ground truth and ARD counts.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::direct::{self, DirectFitOptions, Parafac2Point};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, stream};
use crate::synth::{generate_seeded, SynthSpec, SynthTruth};
use crate::tensor::RaggedTensor3;
use crate::vb::{self, GenerativeConfig, Noise, Orthogonality, VariationalState, VbOptions};

pub use crate::vb::{effective_components, EFFECTIVE_THRESHOLD};

/// Fraction of the first marginal gain below which the elbow rule stops.
pub const ELBOW_FRACTION: f64 = 0.1;
/// CCD level a model order must reach to count as appropriate.
pub const CCD_THRESHOLD: f64 = 80.0;

/// Fitting method of a sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Direct,
    Vb(Orthogonality, Noise),
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Direct,
        Method::Vb(Orthogonality::Vmf, Noise::Homo),
        Method::Vb(Orthogonality::Vmf, Noise::Hetero),
        Method::Vb(Orthogonality::Cmn, Noise::Homo),
        Method::Vb(Orthogonality::Cmn, Noise::Hetero),
    ];

    pub fn is_vb(&self) -> bool {
        matches!(self, Method::Vb(..))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Direct => write!(f, "direct"),
            Method::Vb(o, n) => write!(f, "vb-{o}-{n}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// R² of a reconstruction against the noise-free tensor.
pub fn noiseless_r2(recon: &[DMatrix<f64>], truth: &SynthTruth) -> Result<f64> {
    direct::r2_of_reconstruction(recon, &truth.clean)
}

pub fn noiseless_r2_point(model: &Parafac2Point, truth: &SynthTruth) -> Result<f64> {
    noiseless_r2(&model.reconstruct(), truth)
}

/// Uses the posterior-mean reconstruction.
pub fn noiseless_r2_state(state: &VariationalState, truth: &SynthTruth) -> Result<f64> {
    noiseless_r2(&state.mean_reconstruction()?, truth)
}

/// Tucker congruence `cos(est_m, ref_m')` between raw columns. Pairs involving
/// a zero column are 0.
pub fn congruence_matrix(est: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if est.nrows() != reference.nrows() {
        return Err(Error::ShapeMismatch(0, format!("{} rows vs {} rows", est.nrows(), reference.nrows())));
    }
    let norms_e: Vec<f64> = est.column_iter().map(|c| c.norm()).collect();
    let norms_r: Vec<f64> = reference.column_iter().map(|c| c.norm()).collect();
    Ok(DMatrix::from_fn(est.ncols(), reference.ncols(), |i, j| {
        let d = norms_e[i] * norms_r[j];
        if d == 0.0 {
            0.0
        } else {
            (est.column(i).dot(&reference.column(j)) / d).clamp(-1.0, 1.0)
        }
    }))
}

/// Pearson correlation between columns (congruence of mean-centred columns).
pub fn pearson_matrix(est: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let centre = |m: &DMatrix<f64>| {
        let mut out = m.clone();
        for mut c in out.column_iter_mut() {
            let mean = c.mean();
            c.add_scalar_mut(-mean);
        }
        out
    };
    congruence_matrix(&centre(est), &centre(reference))
}

/// Maximum-weight assignment of rows to columns. Returns, for each row, its
/// column (`None` for surplus rows of a tall matrix).
pub fn hungarian_max(weights: &DMatrix<f64>) -> Vec<Option<usize>> {
    let (r, c) = weights.shape();
    let n = r.max(c);
    if n == 0 {
        return Vec::new();
    }
    let top = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cost = |i: usize, j: usize| if i < r && j < c { top - weights[(i, j)] } else { 0.0 };
    // potentials and augmenting paths, 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; r];
    for j in 1..=n {
        if p[j] >= 1 && p[j] <= r && j <= c {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Matching of estimated to reference components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMatch {
    /// `(estimated, reference)` index pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Signed score of each pair.
    pub scores: Vec<f64>,
    /// Mean of `|score|` over the pairs.
    pub mean_abs: f64,
}

/// Hungarian matching on `|scores|`, rows are estimated components.
pub fn match_scores(scores: &DMatrix<f64>) -> ComponentMatch {
    let assign = hungarian_max(&scores.abs());
    let pairs: Vec<(usize, usize)> = assign.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))).collect();
    let s: Vec<f64> = pairs.iter().map(|&(i, j)| scores[(i, j)]).collect();
    let mean_abs = if s.is_empty() { 0.0 } else { s.iter().map(|x| x.abs()).sum::<f64>() / s.len() as f64 };
    ComponentMatch { pairs, scores: s, mean_abs }
}

pub fn match_components(est: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<ComponentMatch> {
    Ok(match_scores(&congruence_matrix(est, reference)?))
}

/// Stacks the slab loadings `B_k = P_k F` of every slab.
fn stacked_b(model: &Parafac2Point) -> DMatrix<f64> {
    let m = model.n_components();
    let rows: usize = model.p.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, m);
    let mut at = 0;
    for p in &model.p {
        let b = p * &model.f;
        out.view_mut((at, 0), b.shape()).copy_from(&b);
        at += b.nrows();
    }
    out
}

/// Component congruence of two PARAFAC2 models: the product of the Tucker
/// congruences of `A`, `C` and the stacked `P_k F`, matched by Hungarian
/// assignment on its magnitude.
pub fn model_congruence(est: &Parafac2Point, reference: &Parafac2Point) -> Result<ComponentMatch> {
    let ca = congruence_matrix(&est.a, &reference.a)?;
    let cc = congruence_matrix(&est.c, &reference.c)?;
    let (be, br) = (stacked_b(est), stacked_b(reference));
    let cb = congruence_matrix(&be, &br)?;
    Ok(match_scores(&ca.component_mul(&cc).component_mul(&cb)))
}

/// Smallest order whose marginal gain `v(M+1) − v(M)` drops below
/// `fraction` times the first gain. `orders` must be increasing. Returns the
/// largest order when every gain stays above the cut, `None` with fewer than
/// two points.
pub fn elbow(orders: &[usize], values: &[f64], fraction: f64) -> Option<usize> {
    if orders.len() < 2 || orders.len() != values.len() {
        return None;
    }
    let first = values[1] - values[0];
    if !(first > 0.0) {
        return Some(orders[0]);
    }
    for i in 0..orders.len() - 1 {
        if values[i + 1] - values[i] < fraction * first {
            return Some(orders[i]);
        }
    }
    orders.last().copied()
}

/// Largest order whose CCD is at least `threshold`.
pub fn ccd_rule(orders: &[usize], ccd: &[Option<f64>], threshold: f64) -> Option<usize> {
    orders.iter().zip(ccd).filter(|(_, c)| c.is_some_and(|c| c >= threshold)).map(|(m, _)| *m).max()
}

/// A dataset entering a sweep.
#[derive(Debug, Clone)]
pub struct SweepDataset {
    pub name: String,
    pub tensor: RaggedTensor3,
    pub truth: Option<SynthTruth>,
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub vb: VbOptions,
    pub direct: DirectFitOptions,
    pub master_seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { vb: VbOptions::default(), direct: DirectFitOptions { restarts: 5, ..DirectFitOptions::default() }, master_seed: 0 }
    }
}

/// One `(dataset, method, M)` result. Metrics that do not apply to the method
/// or could not be computed are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub dataset: String,
    pub snr_db: Option<f64>,
    pub method: Method,
    pub m: usize,
    pub seed: u64,
    pub r2: Option<f64>,
    pub noiseless_r2: Option<f64>,
    pub ccd: Option<f64>,
    pub elbo: Option<f64>,
    pub effective_components: Option<usize>,
    pub congruence: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub orders: Vec<usize>,
    pub methods: Vec<Method>,
    pub cells: Vec<SweepCell>,
}

fn opt_num<T: fmt::Display>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_else(|| "NA".into())
}

fn csv_string(rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("CSV of UTF-8 fields")
}

impl SweepReport {
    /// One row per cell. Wall time is left out so the file depends on the
    /// inputs and seeds only.
    pub fn to_csv(&self) -> String {
        let header = "dataset,snr_db,method,M,seed,r2,noiseless_r2,ccd,elbo,effective_components,congruence,iterations,converged,error";
        let rows = self.cells.iter().map(|c| {
            vec![
                c.dataset.clone(),
                opt_num(c.snr_db),
                c.method.to_string(),
                c.m.to_string(),
                c.seed.to_string(),
                opt_num(c.r2),
                opt_num(c.noiseless_r2),
                opt_num(c.ccd),
                opt_num(c.elbo),
                opt_num(c.effective_components),
                opt_num(c.congruence),
                opt_num(c.iterations),
                opt_num(c.converged),
                c.error.clone().unwrap_or_default(),
            ]
        });
        csv_string(std::iter::once(header.split(',').map(String::from).collect()).chain(rows))
    }

    /// Long format: `dataset,method,M,snr_db,seed,metric,value`, one row per
    /// available metric.
    pub fn to_long_csv(&self) -> String {
        let header = ["dataset", "method", "M", "snr_db", "seed", "metric", "value"].map(String::from).to_vec();
        let mut rows = vec![header];
        for c in &self.cells {
            let metrics: [(&str, Option<f64>); 6] = [
                ("r2", c.r2),
                ("noiseless_r2", c.noiseless_r2),
                ("ccd", c.ccd),
                ("elbo", c.elbo),
                ("effective_components", c.effective_components.map(|e| e as f64)),
                ("congruence", c.congruence),
            ];
            for (name, v) in metrics {
                if let Some(v) = v {
                    rows.push(vec![
                        c.dataset.clone(),
                        c.method.to_string(),
                        c.m.to_string(),
                        opt_num(c.snr_db),
                        c.seed.to_string(),
                        name.to_string(),
                        v.to_string(),
                    ]);
                }
            }
        }
        csv_string(rows)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn cells_for<'a>(&'a self, dataset: &'a str, method: Method) -> impl Iterator<Item = &'a SweepCell> + 'a {
        self.cells.iter().filter(move |c| c.dataset == dataset && c.method == method)
    }

    /// `(M, metric)` pairs of one dataset and method in increasing `M`.
    pub fn curve(&self, dataset: &str, method: Method, metric: impl Fn(&SweepCell) -> Option<f64>) -> (Vec<usize>, Vec<Option<f64>>) {
        let mut pts: Vec<(usize, Option<f64>)> = self.cells_for(dataset, method).map(|c| (c.m, metric(c))).collect();
        pts.sort_by_key(|p| p.0);
        pts.into_iter().unzip()
    }
}

fn empty_cell(ds: &SweepDataset, method: Method, m: usize, seed: u64) -> SweepCell {
    SweepCell {
        dataset: ds.name.clone(),
        snr_db: ds.snr_db,
        method,
        m,
        seed,
        r2: None,
        noiseless_r2: None,
        ccd: None,
        elbo: None,
        effective_components: None,
        congruence: None,
        iterations: None,
        converged: None,
        wall_time_s: 0.0,
        error: None,
    }
}

fn fill_cell(cell: &mut SweepCell, ds: &SweepDataset, opts: &SweepOptions) -> Result<()> {
    let t = &ds.tensor;
    let seed = cell.seed;
    let point = match cell.method {
        Method::Direct => {
            let fit = direct::fit_direct(t, cell.m, &DirectFitOptions { seed, ..opts.direct.clone() })?;
            cell.r2 = Some(fit.r2);
            cell.ccd = direct::core_consistency(&fit.model, t).ok();
            cell.iterations = Some(fit.iterations);
            cell.converged = Some(fit.converged);
            if let Some(truth) = &ds.truth {
                cell.noiseless_r2 = Some(noiseless_r2_point(&fit.model, truth)?);
            }
            fit.model
        }
        Method::Vb(o, n) => {
            let cfg = GenerativeConfig::new(cell.m, o, n);
            let (state, rep) = vb::fit_vb(t, &cfg, &VbOptions { seed, ..opts.vb.clone() })?;
            cell.r2 = Some(rep.r2);
            cell.ccd = rep.ccd;
            cell.elbo = Some(rep.elbo);
            cell.effective_components = Some(rep.effective_components);
            cell.iterations = Some(rep.iterations);
            cell.converged = Some(rep.converged);
            if let Some(truth) = &ds.truth {
                cell.noiseless_r2 = Some(noiseless_r2_state(&state, truth)?);
            }
            state.point_estimate()?
        }
    };
    if let Some(truth) = &ds.truth {
        cell.congruence = Some(model_congruence(&point, &truth.as_point())?.mean_abs);
    }
    Ok(())
}

/// Fits every `(dataset, method, M)` cell. Cells of dataset `d` share the
/// seed `derive_seed(master, CELL, d)`; failures are recorded per cell.
pub fn sweep(datasets: &[SweepDataset], orders: &[usize], methods: &[Method], opts: &SweepOptions) -> Result<SweepReport> {
    if datasets.is_empty() || orders.is_empty() || methods.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one dataset, order and method".into()));
    }
    opts.vb.validate()?;
    let mut jobs = Vec::new();
    for (d, _) in datasets.iter().enumerate() {
        for &method in methods {
            for &m in orders {
                jobs.push((d, method, m));
            }
        }
    }
    let cells = jobs
        .into_par_iter()
        .map(|(d, method, m)| {
            let ds = &datasets[d];
            let mut cell = empty_cell(ds, method, m, derive_seed(opts.master_seed, stream::CELL, d as u64));
            let start = Instant::now();
            if let Err(e) = fill_cell(&mut cell, ds, opts) {
                cell.error = Some(e.to_string());
            }
            cell.wall_time_s = start.elapsed().as_secs_f64();
            cell
        })
        .collect();
    Ok(SweepReport { orders: orders.to_vec(), methods: methods.to_vec(), cells })
}

/// Synthetic datasets over an SNR grid, `repeats` draws per level. Draw `i`
/// (SNR-major order) uses seed `derive_seed(master, DATASET, i)`.
pub fn snr_datasets(base: &SynthSpec, snrs: &[f64], repeats: usize, master_seed: u64) -> Result<Vec<SweepDataset>> {
    let mut out = Vec::with_capacity(snrs.len() * repeats);
    for (si, &snr) in snrs.iter().enumerate() {
        for r in 0..repeats {
            let idx = (si * repeats + r) as u64;
            let spec = SynthSpec { snr_db: snr, seed: derive_seed(master_seed, stream::DATASET, idx), ..base.clone() };
            let (tensor, truth) = generate_seeded(&spec)?;
            out.push(SweepDataset { name: format!("snr{snr}-r{r}"), tensor, truth: Some(truth), snr_db: Some(snr) });
        }
    }
    Ok(out)
}

/// Noiseless R² against SNR for each method: [`snr_datasets`] followed by
/// [`sweep`].
pub fn snr_study(
    base: &SynthSpec,
    snrs: &[f64],
    repeats: usize,
    orders: &[usize],
    methods: &[Method],
    opts: &SweepOptions,
) -> Result<SweepReport> {
    if snrs.is_empty() || repeats == 0 {
        return Err(Error::InvalidConfig("SNR study needs at least one level and one repeat".into()));
    }
    let data = snr_datasets(base, snrs, repeats, opts.master_seed)?;
    sweep(&data, orders, methods, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{gaussian_matrix, rng};

    #[test]
    fn method_labels_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert_eq!(Method::Vb(Orthogonality::Vmf, Noise::Hetero).to_string(), "vb-vmf-hetero");
        assert!("vb-foo".parse::<Method>().is_err());
    }

    #[test]
    fn congruence_of_identical_matrix() {
        let a = gaussian_matrix(&mut rng(1), 8, 3);
        let c = congruence_matrix(&a, &a).unwrap();
        for i in 0..3 {
            assert!((c[(i, i)] - 1.0).abs() < 1e-12);
        }
        assert!(c.iter().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn orthogonal_column_gives_zero_row() {
        let reference = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let est = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 2.0]);
        assert_eq!(congruence_matrix(&est, &reference).unwrap().amax(), 0.0);
        let zero = DMatrix::zeros(3, 1);
        assert_eq!(congruence_matrix(&zero, &reference).unwrap().amax(), 0.0);
    }

    #[test]
    fn rows_must_agree() {
        assert!(congruence_matrix(&DMatrix::zeros(3, 1), &DMatrix::zeros(4, 1)).is_err());
    }

    #[test]
    fn hungarian_rectangular() {
        let w = DMatrix::from_row_slice(2, 3, &[0.1, 0.9, 0.2, 0.8, 0.85, 0.1]);
        assert_eq!(hungarian_max(&w), vec![Some(1), Some(0)]);
        let tall = w.transpose();
        assert_eq!(hungarian_max(&tall), vec![Some(1), Some(0), None]);
    }

    #[test]
    fn elbow_picks_first_small_gain() {
        let orders = [2, 3, 4, 5, 6];
        assert_eq!(elbow(&orders, &[0.0, 10.0, 18.0, 18.5, 18.7], 0.1), Some(4));
        assert_eq!(elbow(&orders, &[0.0, 10.0, 20.0, 30.0, 40.0], 0.1), Some(6));
        assert_eq!(elbow(&orders, &[0.0, -1.0, 0.0, 0.0, 0.0], 0.1), Some(2));
        assert_eq!(elbow(&[2], &[1.0], 0.1), None);
    }

    #[test]
    fn ccd_rule_takes_largest_passing_order() {
        let ccd = [Some(100.0), Some(95.0), Some(85.0), Some(20.0), None];
        assert_eq!(ccd_rule(&[2, 3, 4, 5, 6], &ccd, 80.0), Some(4));
        assert_eq!(ccd_rule(&[2], &[Some(10.0)], 80.0), None);
    }
}
