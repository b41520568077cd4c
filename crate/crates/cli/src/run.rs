//! Resolved command configurations, their execution and the `run.json` record.

use std::fs;
use std::path::{Path, PathBuf};

use parafac2::direct::{core_consistency, fit_direct, DirectFitOptions, Parafac2Point};
use parafac2::io::{self, load_dataset, matrix_to_csv, save_dataset, save_model, SavedModel};
use parafac2::seed::{derive_seed, stream};
use parafac2::select::{
    ccd_rule, elbow, model_congruence, noiseless_r2_point, noiseless_r2_state, snr_datasets, sweep, Method, SweepDataset, SweepOptions,
    SweepReport, CCD_THRESHOLD, ELBOW_FRACTION,
};
use parafac2::synth::{generate_seeded, SynthSpec};
use parafac2::vb::{fit_vb, GenerativeConfig, VbOptions};
use parafac2::{Error, Result};
use serde::{Deserialize, Serialize};

pub const RUN_FILE: &str = "run.json";

/// Everything needed to repeat a command exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub tool_version: String,
    #[serde(flatten)]
    pub command: RunCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunCommand {
    Generate(GenerateConfig),
    Fit(FitConfig),
    Select(ExperimentConfig),
    SnrStudy(SnrStudyConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub spec: SynthSpec,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Direct,
    Vb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub data: PathBuf,
    pub method: FitMethod,
    pub model: GenerativeConfig,
    pub direct: DirectFitOptions,
    pub vb: VbOptions,
    pub out: PathBuf,
}

/// Where the datasets of a sweep come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Directories { paths: Vec<PathBuf> },
    /// Replicate `r` is drawn with seed `derive_seed(master, DATASET, r)`.
    Synthetic { spec: SynthSpec, replicates: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub methods: Vec<Method>,
    pub orders: Vec<usize>,
    pub vb: VbOptions,
    pub direct: DirectFitOptions,
    pub out: PathBuf,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrStudyConfig {
    pub base: SynthSpec,
    #[serde(with = "parafac2::serde_float::vec")]
    pub snrs: Vec<f64>,
    pub repeats: usize,
    pub methods: Vec<Method>,
    pub orders: Vec<usize>,
    pub vb: VbOptions,
    pub direct: DirectFitOptions,
    pub out: PathBuf,
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.orders.is_empty() {
            return Err(Error::InvalidConfig("methods and model orders must be non-empty".into()));
        }
        if self.orders.contains(&0) {
            return Err(Error::InvalidConfig("model orders must be positive".into()));
        }
        match &self.data {
            DataSource::Directories { paths } if paths.is_empty() => {
                Err(Error::InvalidConfig("no dataset directories given".into()))
            }
            DataSource::Synthetic { replicates: 0, .. } => Err(Error::InvalidConfig("replicates must be positive".into())),
            _ => Ok(()),
        }
    }
}

impl RunCommand {
    pub fn out(&self) -> &Path {
        match self {
            RunCommand::Generate(c) => &c.out,
            RunCommand::Fit(c) => &c.out,
            RunCommand::Select(c) => &c.out,
            RunCommand::SnrStudy(c) => &c.out,
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            RunCommand::Generate(c) => c.out = out,
            RunCommand::Fit(c) => c.out = out,
            RunCommand::Select(c) => c.out = out,
            RunCommand::SnrStudy(c) => c.out = out,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Error::Io(e.to_string()))
}

pub fn load_record(path: &Path) -> Result<RunRecord> {
    if !path.is_file() {
        return Err(Error::ManifestMissing(path.display().to_string()));
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let rec: RunRecord = serde_json::from_str(&text).map_err(|e| Error::ParseError {
        file: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if rec.format_version != io::FORMAT_VERSION {
        return Err(Error::SchemaVersionUnsupported(rec.format_version));
    }
    Ok(rec)
}

/// Executes a resolved command and writes its `run.json` next to the outputs.
pub fn execute(command: &RunCommand) -> Result<()> {
    match command {
        RunCommand::Generate(c) => generate(c)?,
        RunCommand::Fit(c) => fit(c)?,
        RunCommand::Select(c) => select(c)?,
        RunCommand::SnrStudy(c) => snr_study(c)?,
    }
    let record = RunRecord {
        format_version: io::FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: command.clone(),
    };
    write(&command.out().join(RUN_FILE), to_json(&record)?)
}

fn generate(c: &GenerateConfig) -> Result<()> {
    let (t, truth) = generate_seeded(&c.spec)?;
    save_dataset(&c.out, &t, Some((&c.spec, &truth)))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct FitSummary<'a, R: Serialize> {
    method: String,
    components: usize,
    r2: f64,
    ccd: Option<f64>,
    elbo: Option<f64>,
    effective_components: Option<usize>,
    noiseless_r2: Option<f64>,
    congruence: Option<f64>,
    iterations: usize,
    converged: bool,
    report: &'a R,
}

fn write_factors(dir: &Path, p: &Parafac2Point) -> Result<()> {
    write(&dir.join("A.csv"), matrix_to_csv(&p.a))?;
    write(&dir.join("F.csv"), matrix_to_csv(&p.f))?;
    write(&dir.join("C.csv"), matrix_to_csv(&p.c))?;
    for (k, pk) in p.p.iter().enumerate() {
        write(&dir.join(format!("P_{:03}.csv", k + 1)), matrix_to_csv(pk))?;
    }
    Ok(())
}

fn fit(c: &FitConfig) -> Result<()> {
    let data = load_dataset(&c.data)?;
    let t = &data.tensor;
    let m = c.model.m;
    let truth_metrics = |p: &Parafac2Point| -> Result<(Option<f64>, Option<f64>)> {
        match &data.truth {
            Some(truth) => Ok((Some(noiseless_r2_point(p, truth)?), Some(model_congruence(p, &truth.as_point())?.mean_abs))),
            None => Ok((None, None)),
        }
    };
    match c.method {
        FitMethod::Direct => {
            let fit = fit_direct(t, m, &c.direct)?;
            let ccd = core_consistency(&fit.model, t).ok();
            let (noiseless_r2, congruence) = truth_metrics(&fit.model)?;
            let summary = FitSummary {
                method: Method::Direct.to_string(),
                components: m,
                r2: fit.r2,
                ccd,
                elbo: None,
                effective_components: None,
                noiseless_r2,
                congruence,
                iterations: fit.iterations,
                converged: fit.converged,
                report: &fit,
            };
            write_factors(&c.out.join("factors"), &fit.model)?;
            write(&c.out.join("report.json"), to_json(&summary)?)?;
            save_model(&c.out.join("model.json"), &SavedModel::Direct { model: fit.model.clone(), fit: Some(fit) })
        }
        FitMethod::Vb => {
            let (state, report) = fit_vb(t, &c.model, &c.vb)?;
            let point = state.point_estimate()?;
            let (_, congruence) = truth_metrics(&point)?;
            let noiseless_r2 = data.truth.as_ref().map(|truth| noiseless_r2_state(&state, truth)).transpose()?;
            let summary = FitSummary {
                method: c.model.label(),
                components: m,
                r2: report.r2,
                ccd: report.ccd,
                elbo: Some(report.elbo),
                effective_components: Some(report.effective_components),
                noiseless_r2,
                congruence,
                iterations: report.iterations,
                converged: report.converged,
                report: &report,
            };
            write_factors(&c.out.join("factors"), &point)?;
            write(&c.out.join("report.json"), to_json(&summary)?)?;
            save_model(&c.out.join("model.json"), &SavedModel::Vb { state, report: Some(report) })
        }
    }
}

fn load_sources(src: &DataSource, master: u64) -> Result<Vec<SweepDataset>> {
    match src {
        DataSource::Directories { paths } => paths
            .iter()
            .map(|p| {
                let d = load_dataset(p)?;
                let snr_db = d.manifest.provenance.as_ref().map(|p| p.generator.snr_db);
                Ok(SweepDataset { name: p.display().to_string(), tensor: d.tensor, truth: d.truth, snr_db })
            })
            .collect(),
        DataSource::Synthetic { spec, replicates } => (0..*replicates)
            .map(|r| {
                let s = SynthSpec { seed: derive_seed(master, stream::DATASET, r as u64), ..spec.clone() };
                let (tensor, truth) = generate_seeded(&s)?;
                Ok(SweepDataset { name: format!("rep{r}"), tensor, truth: Some(truth), snr_db: Some(s.snr_db) })
            })
            .collect(),
    }
}

/// Orders chosen by the R2 elbow, the ELBO elbow and the CCD rule, one row
/// per dataset, method and rule.
pub fn selection_csv(rep: &SweepReport, datasets: &[String]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["dataset", "method", "rule", "selected_M"]).expect("writing to memory");
    for d in datasets {
        for &method in &rep.methods {
            let complete = |(orders, vals): (Vec<usize>, Vec<Option<f64>>)| -> Option<usize> {
                let vals: Option<Vec<f64>> = vals.into_iter().collect();
                elbow(&orders, &vals?, ELBOW_FRACTION)
            };
            let mut rules = vec![("r2_elbow", complete(rep.curve(d, method, |c| c.r2)))];
            if method.is_vb() {
                rules.push(("elbo_elbow", complete(rep.curve(d, method, |c| c.elbo))));
            }
            let (orders, ccd) = rep.curve(d, method, |c| c.ccd);
            rules.push(("ccd80", ccd_rule(&orders, &ccd, CCD_THRESHOLD)));
            for (rule, pick) in rules {
                let pick = pick.map_or("NA".to_string(), |m| m.to_string());
                w.write_record([d.as_str(), &method.to_string(), rule, &pick]).expect("writing to memory");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("UTF-8 fields")
}

fn write_sweep(out: &Path, stem: &str, rep: &SweepReport) -> Result<()> {
    write(&out.join(format!("{stem}.csv")), rep.to_csv())?;
    write(&out.join(format!("{stem}_long.csv")), rep.to_long_csv())?;
    write(&out.join(format!("{stem}.json")), rep.to_json()? + "\n")
}

fn select(c: &ExperimentConfig) -> Result<()> {
    c.validate()?;
    let data = load_sources(&c.data, c.master_seed)?;
    let names: Vec<String> = data.iter().map(|d| d.name.clone()).collect();
    let opts = SweepOptions { vb: c.vb.clone(), direct: c.direct.clone(), master_seed: c.master_seed };
    let rep = sweep(&data, &c.orders, &c.methods, &opts)?;
    write_sweep(&c.out, "sweep", &rep)?;
    write(&c.out.join("selection.csv"), selection_csv(&rep, &names))
}

/// Mean noiseless R2 per method, order and SNR level.
pub fn snr_summary_csv(rep: &SweepReport) -> String {
    let mut keys: Vec<(String, usize, u64)> = Vec::new();
    for c in &rep.cells {
        let key = (c.method.to_string(), c.m, c.snr_db.unwrap_or(f64::NAN).to_bits());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "M", "snr_db", "n", "mean_noiseless_r2"]).expect("writing to memory");
    for (method, m, snr_bits) in keys {
        let vals: Vec<f64> = rep
            .cells
            .iter()
            .filter(|c| c.method.to_string() == method && c.m == m && c.snr_db.unwrap_or(f64::NAN).to_bits() == snr_bits)
            .filter_map(|c| c.noiseless_r2)
            .collect();
        let mean = if vals.is_empty() { "NA".to_string() } else { (vals.iter().sum::<f64>() / vals.len() as f64).to_string() };
        w.write_record([method, m.to_string(), f64::from_bits(snr_bits).to_string(), vals.len().to_string(), mean])
            .expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("UTF-8 fields")
}

fn snr_study(c: &SnrStudyConfig) -> Result<()> {
    if c.snrs.is_empty() || c.repeats == 0 || c.methods.is_empty() || c.orders.is_empty() {
        return Err(Error::InvalidConfig("SNR study needs levels, repeats, methods and orders".into()));
    }
    let data = snr_datasets(&c.base, &c.snrs, c.repeats, c.master_seed)?;
    let opts = SweepOptions { vb: c.vb.clone(), direct: c.direct.clone(), master_seed: c.master_seed };
    let rep = sweep(&data, &c.orders, &c.methods, &opts)?;
    write_sweep(&c.out, "snr", &rep)?;
    write(&c.out.join("snr_summary.csv"), snr_summary_csv(&rep))
}
