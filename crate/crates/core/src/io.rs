//! On-disk formats.
//!
//! * DTF-1 tensors: one JSON header line `{"dims":[..],"dtype":"f64","mask":b}`,
//!   then little-endian `f64` data in row-major order, then (when `mask` is
//!   true) one 0/1 byte per entry.
//! * CPM-1 models: a JSON document with canonical factors and floats written
//!   with 17 significant digits.
//! * Dataset manifests: JSON listing the covariate, response and ground-truth
//!   files of a dataset, relative to the manifest's directory.
//!
//! Every writer goes through [`atomic_write`].

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CpModel, RegressionDataset};
use crate::sim::{GroundTruth, SimSpec};
use crate::tensor::{DenseTensor, ObservationMask};

pub const CPM_SCHEMA: &str = "CPM-1";
pub const MANIFEST_SCHEMA: &str = "ptreg-dataset/1";

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn encode_dtf(tensor: &DenseTensor, mask: Option<&ObservationMask>) -> Result<Vec<u8>> {
    if let Some(m) = mask {
        if m.dims() != tensor.dims() {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} vs tensor {:?}",
                m.dims(),
                tensor.dims()
            )));
        }
    }
    let dims: Vec<String> = tensor.dims().iter().map(|d| d.to_string()).collect();
    let header = format!(
        "{{\"dims\":[{}],\"dtype\":\"f64\",\"mask\":{}}}\n",
        dims.join(","),
        mask.is_some()
    );
    let mut out = Vec::with_capacity(header.len() + 9 * tensor.len());
    out.extend_from_slice(header.as_bytes());
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(m) = mask {
        out.extend(m.observed().iter().map(|&o| u8::from(o)));
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DtfHeader {
    dims: Vec<usize>,
    dtype: String,
    mask: bool,
}

/// Parses a DTF-1 payload. Returns the stored mask, if any.
pub fn decode_dtf(bytes: &[u8]) -> Result<(DenseTensor, Option<ObservationMask>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing DTF-1 header line".into()))?;
    let header: DtfHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("bad DTF-1 header: {e}")))?;
    if header.dtype != "f64" {
        return Err(Error::Format(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    if header.dims.is_empty() || header.dims.contains(&0) {
        return Err(Error::Format(format!("invalid dims {:?}", header.dims)));
    }
    let len = header
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dims overflow".into()))?;
    let body = &bytes[nl + 1..];
    let want = len * 8 + if header.mask { len } else { 0 };
    if body.len() != want {
        return Err(Error::Format(format!(
            "DTF-1 body has {} bytes, expected {want}",
            body.len()
        )));
    }
    let data: Vec<f64> = body[..len * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mask = if header.mask {
        let observed = body[len * 8..]
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format(format!("mask byte {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        Some(ObservationMask::new(header.dims.clone(), observed)?)
    } else {
        None
    };
    Ok((DenseTensor::new(header.dims, data)?, mask))
}

pub fn write_dtf(path: &Path, tensor: &DenseTensor, mask: Option<&ObservationMask>) -> Result<()> {
    atomic_write(path, &encode_dtf(tensor, mask)?)
}

pub fn read_dtf(path: &Path) -> Result<(DenseTensor, Option<ObservationMask>)> {
    decode_dtf(&fs::read(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|&x| fmt_float(x)).collect();
    format!("[{}]", parts.join(", "))
}

/// CPM-1 text of the canonical form of `model`.
pub fn model_to_cpm(model: &CpModel) -> String {
    let model = model.clone().canonicalized();
    let dims: Vec<String> = model
        .response_dims()
        .iter()
        .map(|d| d.to_string())
        .collect();
    let mut out = String::new();
    out.push_str("{\n");
    writeln!(out, "  \"schema\": \"{CPM_SCHEMA}\",").unwrap();
    writeln!(out, "  \"dims\": [{}],", dims.join(", ")).unwrap();
    writeln!(out, "  \"q\": {},", model.q()).unwrap();
    writeln!(out, "  \"r\": {},", model.rank()).unwrap();
    writeln!(out, "  \"weights\": {},", fmt_vec(model.weights())).unwrap();
    out.push_str("  \"factors\": [\n");
    for (k, comp) in model.factors().iter().enumerate() {
        out.push_str("    [\n");
        for (j, f) in comp.iter().enumerate() {
            let sep = if j + 1 < comp.len() { "," } else { "" };
            writeln!(out, "      {}{sep}", fmt_vec(f)).unwrap();
        }
        let sep = if k + 1 < model.rank() { "," } else { "" };
        writeln!(out, "    ]{sep}").unwrap();
    }
    out.push_str("  ]\n}\n");
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CpmDoc {
    schema: String,
    dims: Vec<usize>,
    q: usize,
    r: usize,
    weights: Vec<f64>,
    factors: Vec<Vec<Vec<f64>>>,
}

pub fn model_from_cpm(text: &str) -> Result<CpModel> {
    let doc: CpmDoc = serde_json::from_str(text)
        .map_err(|e| Error::Format(format!("bad CPM-1 document: {e}")))?;
    if doc.schema != CPM_SCHEMA {
        return Err(Error::Format(format!(
            "schema {:?}, expected {CPM_SCHEMA:?}",
            doc.schema
        )));
    }
    if doc.r != doc.weights.len() {
        return Err(Error::Format(format!(
            "r = {} but {} weights",
            doc.r,
            doc.weights.len()
        )));
    }
    CpModel::new(doc.dims, doc.q, doc.weights, doc.factors)
}

pub fn write_model(path: &Path, model: &CpModel) -> Result<()> {
    atomic_write(path, model_to_cpm(model).as_bytes())
}

pub fn read_model(path: &Path) -> Result<CpModel> {
    model_from_cpm(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema: String,
    pub n: usize,
    pub q: usize,
    pub response_dims: Vec<usize>,
    /// `n x q` DTF-1 matrix.
    pub covariates: String,
    /// One masked DTF-1 file per sample.
    pub responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SimSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_coefficient: Option<String>,
}

/// Writes a dataset (and optional ground truth) under `dir`, manifest last.
pub fn save_dataset(
    dir: &Path,
    data: &RegressionDataset,
    spec: Option<&SimSpec>,
    truth: Option<&GroundTruth>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("responses"))?;
    let cov = DenseTensor::new(vec![data.n(), data.q()], data.covariates().concat())?;
    write_dtf(&dir.join("covariates.dtf"), &cov, None)?;
    let width = data.n().to_string().len().max(4);
    let mut responses = Vec::with_capacity(data.n());
    for (i, (y, mask)) in data.responses().iter().zip(data.masks()).enumerate() {
        let rel = format!("responses/y_{i:0width$}.dtf");
        let mut stored = y.clone();
        for (v, &o) in stored.data_mut().iter_mut().zip(mask.observed()) {
            if !o {
                *v = f64::NAN;
            }
        }
        write_dtf(&dir.join(&rel), &stored, Some(mask))?;
        responses.push(rel);
    }
    let mut manifest = DatasetManifest {
        schema: MANIFEST_SCHEMA.into(),
        n: data.n(),
        q: data.q(),
        response_dims: data.response_dims().to_vec(),
        covariates: "covariates.dtf".into(),
        responses,
        spec: spec.cloned(),
        seed: spec.map(|s| s.seed),
        truth_model: None,
        truth_coefficient: None,
    };
    if let Some(t) = truth {
        match &t.model {
            Some(m) => {
                write_model(&dir.join("truth_model.json"), m)?;
                manifest.truth_model = Some("truth_model.json".into());
            }
            None => {
                write_dtf(&dir.join("truth_coefficient.dtf"), &t.coefficient, None)?;
                manifest.truth_coefficient = Some("truth_coefficient.dtf".into());
            }
        }
    }
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    atomic_write(&path, text.as_bytes())?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("bad manifest {}: {e}", path.display())))?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(Error::Format(format!(
            "manifest schema {:?}, expected {MANIFEST_SCHEMA:?}",
            manifest.schema
        )));
    }
    if manifest.responses.len() != manifest.n {
        return Err(Error::Format(format!(
            "manifest lists {} responses for n = {}",
            manifest.responses.len(),
            manifest.n
        )));
    }
    Ok(manifest)
}

/// Loaded dataset plus whatever ground truth the manifest references.
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub data: RegressionDataset,
    pub truth: Option<GroundTruth>,
}

/// Reads a dataset through its manifest. A response stored without a mask is
/// observed exactly where its value is not NaN.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let (cov, _) = read_dtf(&dir.join(&manifest.covariates))?;
    if cov.dims() != [manifest.n, manifest.q] {
        return Err(Error::Format(format!(
            "covariates have dims {:?}, expected [{}, {}]",
            cov.dims(),
            manifest.n,
            manifest.q
        )));
    }
    let covariates: Vec<Vec<f64>> = cov.data().chunks(manifest.q).map(|c| c.to_vec()).collect();
    let mut responses = Vec::with_capacity(manifest.n);
    let mut masks = Vec::with_capacity(manifest.n);
    for rel in &manifest.responses {
        let (y, mask) = read_dtf(&dir.join(rel))?;
        if y.dims() != manifest.response_dims.as_slice() {
            return Err(Error::Format(format!(
                "{rel} has dims {:?}, expected {:?}",
                y.dims(),
                manifest.response_dims
            )));
        }
        let mask = match mask {
            Some(m) => m,
            None => ObservationMask::new(
                y.dims().to_vec(),
                y.data().iter().map(|v| !v.is_nan()).collect(),
            )?,
        };
        responses.push(y);
        masks.push(mask);
    }
    let data = RegressionDataset::new(covariates, responses, masks)?;
    let truth = match (&manifest.truth_model, &manifest.truth_coefficient) {
        (Some(p), _) => Some(GroundTruth::from_model(read_model(&dir.join(p))?)),
        (None, Some(p)) => {
            let (coefficient, _) = read_dtf(&dir.join(p))?;
            Some(GroundTruth {
                model: None,
                coefficient,
                supports: Vec::new(),
                runs: Vec::new(),
                images: None,
            })
        }
        (None, None) => None,
    };
    Ok(LoadedDataset {
        manifest,
        data,
        truth,
    })
}
