//! On-disk datasets, checkpoints and metrics.
//!
//! A directory holds `manifest.json` plus one raw little-endian `f32`
//! payload per record (`<name>.f32`, row-major).

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Array4, Array5, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{DomainSpec, Split, StationLayout, VariableSpec};

pub const FORMAT_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
pub const METRICS_HEADER: &str = "method,variable,mse,mae,n_stations,n_times";

/// Named `f32` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "record `{name}`: shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(TensorRecord { name, shape, data })
    }

    pub fn from_array<D: ndarray::Dimension>(name: &str, a: &ndarray::Array<f32, D>) -> Self {
        TensorRecord {
            name: name.to_string(),
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn from_f64<D: ndarray::Dimension>(name: &str, a: &ndarray::Array<f64, D>) -> Self {
        TensorRecord {
            name: name.to_string(),
            shape: a.shape().to_vec(),
            data: a.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_array(&self) -> ArrayD<f32> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone()).expect("validated shape")
    }

    pub fn to_f64(&self) -> ArrayD<f64> {
        self.to_array().mapv(f64::from)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

impl RecordEntry {
    fn byte_len(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * 4
    }
}

/// Exclusive writer lock, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked {
                path: dir.to_path_buf(),
            }),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Creates `dir` if needed; refuses a non-empty directory unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::DirectoryNotEmpty {
                path: dir.to_path_buf(),
            });
        }
    } else {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_payload(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_records(dir: &Path, records: &[TensorRecord]) -> Result<Vec<RecordEntry>> {
    let mut seen = BTreeSet::new();
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.name.as_str()) {
            return Err(Error::Schema(format!("duplicate record name `{}`", r.name)));
        }
        let file = format!("{}.f32", r.name);
        write_payload(&dir.join(&file), &r.data)?;
        entries.push(RecordEntry {
            name: r.name.clone(),
            file,
            shape: r.shape.clone(),
            dtype: "f32le".into(),
        });
    }
    Ok(entries)
}

/// Checks existence and byte length of every payload before reading any.
fn check_payloads(dir: &Path, entries: &[RecordEntry]) -> Result<()> {
    for e in entries {
        let path = dir.join(&e.file);
        let meta = fs::metadata(&path).map_err(|err| match err.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile { path: path.clone() },
            _ => Error::io(&path, err),
        })?;
        if meta.len() != e.byte_len() {
            return Err(Error::LengthMismatch {
                path,
                expected: e.byte_len(),
                found: meta.len(),
            });
        }
        if e.dtype != "f32le" {
            return Err(Error::Schema(format!("record `{}` has dtype `{}`", e.name, e.dtype)));
        }
    }
    Ok(())
}

fn read_record(dir: &Path, e: &RecordEntry) -> Result<TensorRecord> {
    let path = dir.join(&e.file);
    let mut bytes = Vec::with_capacity(e.byte_len() as usize);
    File::open(&path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|err| Error::io(&path, err))?;
    if bytes.len() as u64 != e.byte_len() {
        return Err(Error::LengthMismatch {
            path,
            expected: e.byte_len(),
            found: bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    TensorRecord::new(&e.name, e.shape.clone(), data)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads the manifest and checks its version without touching payloads.
fn read_manifest<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile { path: path.clone() },
        _ => Error::io(&path, e),
    })?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_str())
        .unwrap_or("<missing>")
        .to_string();
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: FORMAT_VERSION.into(),
        });
    }
    Ok(serde_json::from_value(raw)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shapes {
    pub n_vars: usize,
    pub lr_h: usize,
    pub lr_w: usize,
    pub hr_h: usize,
    pub hr_w: usize,
    pub sat_h: usize,
    pub sat_w: usize,
    pub frames: usize,
    pub channels: usize,
    pub n_times: usize,
    pub n_stations: usize,
    pub n_station_vars: usize,
}

/// Half-open time-index ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSplits {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

impl TimeSplits {
    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        let (a, b) = match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        };
        a..b
    }

    pub fn validate(&self, n_times: usize) -> Result<()> {
        let ranges = [self.train, self.val, self.test];
        for (a, b) in ranges {
            if a >= b || b > n_times {
                return Err(Error::Schema(format!("bad time range [{a}, {b}) for {n_times} steps")));
            }
        }
        let mut sorted = ranges;
        sorted.sort();
        if sorted[0].1 > sorted[1].0 || sorted[1].1 > sorted[2].0 {
            return Err(Error::Schema("time splits overlap".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub kind: String,
    pub domain: DomainSpec,
    pub grid_variables: Vec<VariableSpec>,
    pub station_variables: Vec<VariableSpec>,
    pub shapes: Shapes,
    pub time_splits: TimeSplits,
    /// Train, val, test station counts.
    pub station_counts: [usize; 3],
    /// Generator configuration, echoed for provenance.
    pub scenario: Option<serde_json::Value>,
    pub records: Vec<RecordEntry>,
}

impl DatasetManifest {
    pub fn new(
        domain: DomainSpec,
        grid_variables: Vec<VariableSpec>,
        station_variables: Vec<VariableSpec>,
        shapes: Shapes,
        time_splits: TimeSplits,
        station_counts: [usize; 3],
        scenario: Option<serde_json::Value>,
    ) -> Self {
        DatasetManifest {
            format_version: FORMAT_VERSION.into(),
            kind: "dataset".into(),
            domain,
            grid_variables,
            station_variables,
            shapes,
            time_splits,
            station_counts,
            scenario,
            records: Vec::new(),
        }
    }
}

/// Fully materialized dataset. Grids and station values are physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// `(T, V, LH, LW)`
    pub lr: Array4<f64>,
    /// `(T, V, TH, TW)`
    pub hr: Array4<f64>,
    /// `(T, 2, C, SH, SW)`, already normalized.
    pub satellite: Array5<f32>,
    pub stations: StationLayout,
    /// `(T, V_s, M)`
    pub station_values: Array3<f64>,
    /// `(T, V_s, M)`
    pub station_mask: Array3<bool>,
    /// `(T,)` time stamps.
    pub times: Array1<f64>,
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        manifest: DatasetManifest,
        lr: Array4<f64>,
        hr: Array4<f64>,
        satellite: Array5<f32>,
        stations: StationLayout,
        station_values: Array3<f64>,
        station_mask: Array3<bool>,
        times: Array1<f64>,
    ) -> Result<Self> {
        let ds = Dataset {
            manifest,
            lr,
            hr,
            satellite,
            stations,
            station_values,
            station_mask,
            times,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.manifest.shapes;
        let check = |what: &str, got: &[usize], want: &[usize]| {
            if got != want {
                Err(Error::Shape(format!("{what}: expected {want:?}, found {got:?}")))
            } else {
                Ok(())
            }
        };
        check("lr", self.lr.shape(), &[s.n_times, s.n_vars, s.lr_h, s.lr_w])?;
        check("hr", self.hr.shape(), &[s.n_times, s.n_vars, s.hr_h, s.hr_w])?;
        check(
            "satellite",
            self.satellite.shape(),
            &[s.n_times, s.frames, s.channels, s.sat_h, s.sat_w],
        )?;
        check(
            "station_values",
            self.station_values.shape(),
            &[s.n_times, s.n_station_vars, s.n_stations],
        )?;
        check("station_mask", self.station_mask.shape(), self.station_values.shape())?;
        check("times", self.times.shape(), &[s.n_times])?;
        if self.stations.len() != s.n_stations {
            return Err(Error::Shape("station layout size disagrees with manifest".into()));
        }
        if self.manifest.grid_variables.len() != s.n_vars
            || self.manifest.station_variables.len() != s.n_station_vars
        {
            return Err(Error::Shape("variable specs disagree with shapes".into()));
        }
        self.manifest.time_splits.validate(s.n_times)?;
        let counts = Split::ALL.map(|sp| self.stations.count(sp));
        if counts != self.manifest.station_counts {
            return Err(Error::Schema(format!(
                "station split counts {counts:?} disagree with manifest {:?}",
                self.manifest.station_counts
            )));
        }
        Ok(())
    }

    pub fn n_times(&self) -> usize {
        self.manifest.shapes.n_times
    }

    fn records(&self) -> Vec<TensorRecord> {
        let split_codes = Array1::from_iter(self.stations.splits.iter().map(|s| match s {
            Split::Train => 0.0f64,
            Split::Val => 1.0,
            Split::Test => 2.0,
        }));
        vec![
            TensorRecord::from_f64("lr", &self.lr),
            TensorRecord::from_f64("hr", &self.hr),
            TensorRecord::from_array("satellite", &self.satellite),
            TensorRecord::from_f64("station_coords", &self.stations.coords),
            TensorRecord::from_f64("station_split", &split_codes),
            TensorRecord::from_f64("station_values", &self.station_values),
            TensorRecord::from_f64("station_mask", &self.station_mask.mapv(|m| if m { 1.0 } else { 0.0 })),
            TensorRecord::from_f64("times", &self.times),
        ]
    }
}

/// Persists a dataset; payloads are rounded to `f32`.
pub fn write_dataset(ds: &Dataset, dir: &Path, force: bool) -> Result<()> {
    ds.validate()?;
    prepare_dir(dir, force)?;
    let _lock = DirLock::acquire(dir)?;
    let mut manifest = ds.manifest.clone();
    manifest.records = write_records(dir, &ds.records())?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

fn take(records: &mut Vec<TensorRecord>, name: &str) -> Result<TensorRecord> {
    let pos = records
        .iter()
        .position(|r| r.name == name)
        .ok_or_else(|| Error::Schema(format!("dataset is missing record `{name}`")))?;
    Ok(records.swap_remove(pos))
}

fn fixed<D: ndarray::Dimension>(r: TensorRecord) -> Result<ndarray::Array<f64, D>> {
    let name = r.name.clone();
    r.to_f64()
        .into_dimensionality::<D>()
        .map_err(|_| Error::Shape(format!("record `{name}` has the wrong rank")))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_manifest(dir)?;
    if manifest.kind != "dataset" {
        return Err(Error::Schema(format!("{} holds a `{}`, not a dataset", dir.display(), manifest.kind)));
    }
    check_payloads(dir, &manifest.records)?;
    let mut recs = manifest
        .records
        .iter()
        .map(|e| read_record(dir, e))
        .collect::<Result<Vec<_>>>()?;
    let lr = fixed(take(&mut recs, "lr")?)?;
    let hr = fixed(take(&mut recs, "hr")?)?;
    let satellite = take(&mut recs, "satellite")?
        .to_array()
        .into_dimensionality()
        .map_err(|_| Error::Shape("record `satellite` has the wrong rank".into()))?;
    let coords: Array2<f64> = fixed(take(&mut recs, "station_coords")?)?;
    let codes: Array1<f64> = fixed(take(&mut recs, "station_split")?)?;
    let splits = codes
        .iter()
        .map(|&c| match c as i64 {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            other => Err(Error::Schema(format!("unknown station split code {other}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let stations = StationLayout::new(coords, splits, &manifest.domain)?;
    let station_values = fixed(take(&mut recs, "station_values")?)?;
    let mask: Array3<f64> = fixed(take(&mut recs, "station_mask")?)?;
    let times = fixed(take(&mut recs, "times")?)?;
    Dataset::new(
        manifest,
        lr,
        hr,
        satellite,
        stations,
        station_values,
        mask.mapv(|m| m != 0.0),
        times,
    )
}

/// Hex SHA-256 of a value's canonical JSON.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let text = serde_json::to_string(value)?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: String,
    pub kind: String,
    pub config_hash: String,
    /// Model configuration the parameters belong to.
    pub model: serde_json::Value,
    pub epoch: usize,
    pub val_station_loss: f64,
    pub records: Vec<RecordEntry>,
}

/// Model parameters plus selection metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub model: serde_json::Value,
    pub config_hash: String,
    pub epoch: usize,
    pub val_station_loss: f64,
    pub tensors: Vec<TensorRecord>,
}

impl CheckpointBundle {
    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Fails with every name in `required` that the bundle lacks.
    pub fn require(&self, required: &[String]) -> Result<()> {
        let have: BTreeSet<&str> = self.tensors.iter().map(|t| t.name.as_str()).collect();
        let missing: Vec<&str> = required
            .iter()
            .map(String::as_str)
            .filter(|n| !have.contains(n))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(format!("checkpoint is missing parameters: {}", missing.join(", "))))
        }
    }
}

/// Payload files are numbered; the manifest maps them back to parameter names.
fn param_file_name(i: usize) -> String {
    format!("p{i:04}")
}

pub fn write_checkpoint(bundle: &CheckpointBundle, dir: &Path) -> Result<()> {
    prepare_dir(dir, true)?;
    let _lock = DirLock::acquire(dir)?;
    let mut seen = BTreeSet::new();
    let mut entries = Vec::with_capacity(bundle.tensors.len());
    for (i, t) in bundle.tensors.iter().enumerate() {
        if !seen.insert(t.name.as_str()) {
            return Err(Error::Schema(format!("duplicate parameter `{}`", t.name)));
        }
        let file = format!("{}.f32", param_file_name(i));
        write_payload(&dir.join(&file), &t.data)?;
        entries.push(RecordEntry {
            name: t.name.clone(),
            file,
            shape: t.shape.clone(),
            dtype: "f32le".into(),
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION.into(),
        kind: "checkpoint".into(),
        config_hash: bundle.config_hash.clone(),
        model: bundle.model.clone(),
        epoch: bundle.epoch,
        val_station_loss: bundle.val_station_loss,
        records: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_checkpoint(dir: &Path) -> Result<CheckpointBundle> {
    let m: CheckpointManifest = read_manifest(dir)?;
    if m.kind != "checkpoint" {
        return Err(Error::Schema(format!("{} holds a `{}`, not a checkpoint", dir.display(), m.kind)));
    }
    check_payloads(dir, &m.records)?;
    let tensors = m
        .records
        .iter()
        .map(|e| read_record(dir, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckpointBundle {
        model: m.model,
        config_hash: m.config_hash,
        epoch: m.epoch,
        val_station_loss: m.val_station_loss,
        tensors,
    })
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub variable: String,
    pub mse: f64,
    pub mae: f64,
    pub n_stations: usize,
    pub n_times: usize,
}

pub fn format_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:e},{:e},{},{}\n",
            r.method, r.variable, r.mse, r.mae, r.n_stations, r.n_times
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, format_metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Schema(format!("metrics CSV must start with `{METRICS_HEADER}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Schema(format!("malformed metrics line `{l}`"));
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(MetricsRow {
                method: f[0].to_string(),
                variable: f[1].to_string(),
                mse: f[2].parse().map_err(|_| bad())?,
                mae: f[3].parse().map_err(|_| bad())?,
                n_stations: f[4].parse().map_err(|_| bad())?,
                n_times: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile { path: path.to_path_buf() },
        _ => Error::io(path, e),
    })?;
    parse_metrics_csv(&text)
}
