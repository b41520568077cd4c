//! On-disk formats: dataset directories (JSON manifest plus CSV slabs) and
//! versioned JSON model files.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::direct::{DirectFit, Parafac2Point};
use crate::error::{Error, Result};
use crate::synth::{SynthSpec, SynthTruth};
use crate::tensor::RaggedTensor3;
use crate::vb::{FitReport, Orthogonality, VariationalState};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

/// How the generator defines SNR and heteroscedastic noise.
pub const SNR_CONVENTION: &str = "10*log10(||clean||_F^2 / ||noise||_F^2) over the whole tensor, exact by rescaling";
pub const HETERO_CONVENTION: &str =
    "per-slab noise std factors exp(U(-ln 3, ln 3)), then one global rescale to the requested SNR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: SynthSpec,
    pub snr_convention: String,
    pub hetero_convention: String,
    #[serde(with = "crate::serde_float::vec")]
    pub noise_variances: Vec<f64>,
    #[serde(with = "crate::serde_float::vec")]
    pub hetero_factors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFiles {
    pub a: String,
    pub f: String,
    pub c: String,
    pub p: Vec<String>,
    pub clean: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub i: usize,
    pub k: usize,
    pub widths: Vec<usize>,
    pub slabs: Vec<String>,
    pub provenance: Option<Provenance>,
    pub truth: Option<TruthFiles>,
}

/// A loaded dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub tensor: RaggedTensor3,
    pub truth: Option<SynthTruth>,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn json_err(file: &Path, e: serde_json::Error) -> Error {
    Error::ParseError { file: file.display().to_string(), line: e.line(), msg: e.to_string() }
}

/// Row-major CSV with 17 significant digits per value.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::with_capacity(m.len() * 25);
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.16e}", m[(r, c)]));
        }
        out.push('\n');
    }
    out
}

/// Parses CSV written by [`matrix_to_csv`]; `name` labels errors.
pub fn matrix_from_csv(text: &str, name: &str) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::ParseError {
            file: name.to_string(),
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row = rec
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| Error::ParseError { file: name.to_string(), line, msg: format!("`{v}`: {e}") }))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, |r| r.len());
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

fn write_matrix(dir: &Path, name: &str, m: &DMatrix<f64>) -> Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(&path, matrix_to_csv(m)).map_err(|e| io_err(&path, e))
}

fn read_matrix(dir: &Path, name: &str, shape: Option<(usize, usize)>, index: usize) -> Result<DMatrix<f64>> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::ManifestMissing(path.display().to_string()));
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let m = matrix_from_csv(&text, &path.display().to_string())?;
    if let Some((r, c)) = shape {
        if m.shape() != (r, c) {
            return Err(Error::ShapeMismatch(
                index,
                format!("{} is {}x{}, manifest says {r}x{c}", path.display(), m.nrows(), m.ncols()),
            ));
        }
    }
    Ok(m)
}

fn slab_name(prefix: &str, k: usize) -> String {
    format!("{prefix}{:03}.csv", k + 1)
}

/// Writes `manifest.json`, `slab_001.csv`… and, with a generator record, the
/// true factors and clean slabs under `truth/`.
pub fn save_dataset(dir: &Path, t: &RaggedTensor3, synthetic: Option<(&SynthSpec, &SynthTruth)>) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let slabs: Vec<String> = (0..t.n_slabs()).map(|k| slab_name("slab_", k)).collect();
    for (k, name) in slabs.iter().enumerate() {
        write_matrix(dir, name, t.slab(k))?;
    }
    let (provenance, truth) = match synthetic {
        None => (None, None),
        Some((spec, truth)) => {
            let files = TruthFiles {
                a: "truth/A.csv".into(),
                f: "truth/F.csv".into(),
                c: "truth/C.csv".into(),
                p: (0..t.n_slabs()).map(|k| slab_name("truth/P_", k)).collect(),
                clean: (0..t.n_slabs()).map(|k| slab_name("truth/clean_", k)).collect(),
            };
            write_matrix(dir, &files.a, &truth.a)?;
            write_matrix(dir, &files.f, &truth.f)?;
            write_matrix(dir, &files.c, &truth.c)?;
            for k in 0..t.n_slabs() {
                write_matrix(dir, &files.p[k], &truth.p[k])?;
                write_matrix(dir, &files.clean[k], truth.clean.slab(k))?;
            }
            let prov = Provenance {
                generator: spec.clone(),
                snr_convention: SNR_CONVENTION.into(),
                hetero_convention: HETERO_CONVENTION.into(),
                noise_variances: truth.noise_variances.clone(),
                hetero_factors: truth.hetero_factors.clone(),
            };
            (Some(prov), Some(files))
        }
    };
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        i: t.rows(),
        k: t.n_slabs(),
        widths: t.widths(),
        slabs,
        provenance,
        truth,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::ManifestMissing(path.display().to_string()));
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| json_err(&path, e))?;
    let version = value.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| Error::ParseError {
        file: path.display().to_string(),
        line: 1,
        msg: "missing integer `format_version`".into(),
    })?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::SchemaVersionUnsupported(version.min(u32::MAX as u64) as u32));
    }
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| json_err(&path, e))?;
    if manifest.slabs.len() != manifest.k || manifest.widths.len() != manifest.k {
        return Err(Error::ShapeMismatch(
            0,
            format!("manifest lists {} slabs and {} widths for K = {}", manifest.slabs.len(), manifest.widths.len(), manifest.k),
        ));
    }
    Ok(manifest)
}

/// Reads and validates a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let i = manifest.i;
    let slabs = manifest
        .slabs
        .iter()
        .enumerate()
        .map(|(k, name)| read_matrix(dir, name, Some((i, manifest.widths[k])), k + 1))
        .collect::<Result<Vec<_>>>()?;
    let tensor = RaggedTensor3::new(slabs)?;
    let truth = match (&manifest.truth, &manifest.provenance) {
        (Some(files), Some(prov)) => {
            let m = prov.generator.m_true;
            let a = read_matrix(dir, &files.a, Some((i, m)), 0)?;
            let f = read_matrix(dir, &files.f, Some((m, m)), 0)?;
            let c = read_matrix(dir, &files.c, Some((manifest.k, m)), 0)?;
            let p = (0..manifest.k)
                .map(|k| read_matrix(dir, &files.p[k], Some((manifest.widths[k], m)), k + 1))
                .collect::<Result<Vec<_>>>()?;
            let clean = (0..manifest.k)
                .map(|k| read_matrix(dir, &files.clean[k], Some((i, manifest.widths[k])), k + 1))
                .collect::<Result<Vec<_>>>()?;
            let clean = RaggedTensor3::new(clean)?;
            let noise = tensor.sub(&clean)?;
            Some(SynthTruth {
                a,
                f,
                c,
                p,
                clean,
                noise,
                noise_variances: prov.noise_variances.clone(),
                hetero_factors: prov.hetero_factors.clone(),
            })
        }
        _ => None,
    };
    Ok(Dataset { manifest, tensor, truth })
}

/// Contents of a model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum SavedModel {
    Direct { model: Parafac2Point, fit: Option<DirectFit> },
    Vb { state: VariationalState, report: Option<FitReport> },
}

impl SavedModel {
    pub fn variant(&self) -> String {
        match self {
            SavedModel::Direct { .. } => "direct".into(),
            SavedModel::Vb { state, .. } => format!("vb-{}", state.config.orthogonality),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    #[serde(flatten)]
    model: SavedModel,
}

pub fn save_model(path: &Path, model: &SavedModel) -> Result<()> {
    let file = ModelFile { format_version: FORMAT_VERSION, model: model.clone() };
    let text = serde_json::to_string(&file).map_err(|e| Error::Io(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    if !path.is_file() {
        return Err(Error::ManifestMissing(path.display().to_string()));
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| json_err(path, e))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(Error::SchemaVersionUnsupported(v.min(u32::MAX as u64) as u32)),
        None => {
            return Err(Error::ParseError {
                file: path.display().to_string(),
                line: 1,
                msg: "missing integer `format_version`".into(),
            })
        }
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| json_err(path, e))?;
    Ok(file.model)
}

/// Loads a direct-fit point estimate.
pub fn load_point(path: &Path) -> Result<Parafac2Point> {
    match load_model(path)? {
        SavedModel::Direct { model, .. } => Ok(model),
        other => Err(Error::VariantMismatch { found: other.variant(), requested: "direct".into() }),
    }
}

/// Loads a variational state, optionally requiring its projection family.
pub fn load_state(path: &Path, orthogonality: Option<Orthogonality>) -> Result<VariationalState> {
    match load_model(path)? {
        SavedModel::Vb { state, .. } => match orthogonality {
            Some(o) if o != state.config.orthogonality => {
                Err(Error::VariantMismatch { found: format!("vb-{}", state.config.orthogonality), requested: format!("vb-{o}") })
            }
            _ => Ok(state),
        },
        other => Err(Error::VariantMismatch {
            found: other.variant(),
            requested: orthogonality.map_or("vb".into(), |o| format!("vb-{o}")),
        }),
    }
}
