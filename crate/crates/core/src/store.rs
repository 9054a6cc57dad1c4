//! Versioned, checksummed persistence.
//!
//! JSON artifacts share one envelope:
//! `{"magic": "TOMO", "format_version": 1, "kind": ..., "checksum": ..., "payload": ...}`
//! where `checksum` is the SHA-256 of the compact payload text. Floats are
//! written in shortest round-trip form, so reloading is bit-exact.
//!
//! Datasets are JSON lines (a header line, then one record per line) and
//! model checkpoints are a small binary container with raw `f64` parameters.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::cgan::{EpochRecord, ModelSnapshot, RunReport, TrainConfig, TrainingPair};
use crate::fock::DensityMatrix;
use crate::measure::{DataVector, MeasurementRecipe, MeasurementSet};
use crate::{Error, Result};

pub const MAGIC: &str = "TOMO";
pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TOMOCKPT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    State,
    MeasurementSet,
    Data,
    Report,
    Config,
    Dataset,
    Manifest,
    Benchmark,
}

impl ArtifactKind {
    fn name(self) -> &'static str {
        match self {
            ArtifactKind::State => "state",
            ArtifactKind::MeasurementSet => "measurement_set",
            ArtifactKind::Data => "data",
            ArtifactKind::Report => "report",
            ArtifactKind::Config => "config",
            ArtifactKind::Dataset => "dataset",
            ArtifactKind::Manifest => "manifest",
            ArtifactKind::Benchmark => "benchmark",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    magic: String,
    format_version: u32,
    kind: ArtifactKind,
    checksum: String,
    payload: Value,
}

fn malformed(e: impl std::fmt::Display) -> Error {
    Error::MalformedPayload(e.to_string())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn payload_checksum(payload: &Value) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(payload).map_err(malformed)?.as_bytes()))
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error.to_string()))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn check_header(magic: &str, version: u32) -> Result<()> {
    if magic != MAGIC {
        return Err(malformed(format!("bad magic tag {magic:?}")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

/// Serializes `value` as a `kind` artifact.
pub fn to_artifact_string<T: Serialize>(kind: ArtifactKind, value: &T) -> Result<String> {
    let payload = serde_json::to_value(value).map_err(malformed)?;
    let envelope = Envelope {
        magic: MAGIC.into(),
        format_version: FORMAT_VERSION,
        kind,
        checksum: payload_checksum(&payload)?,
        payload,
    };
    serde_json::to_string_pretty(&envelope).map_err(malformed)
}

/// Parses a `kind` artifact, checking magic, version, kind and checksum.
pub fn from_artifact_str<T: DeserializeOwned>(kind: ArtifactKind, text: &str) -> Result<T> {
    let raw: Value = serde_json::from_str(text).map_err(malformed)?;
    let magic = raw.get("magic").and_then(Value::as_str).unwrap_or_default();
    let version = raw
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| malformed("missing format_version"))?;
    check_header(magic, u32::try_from(version).unwrap_or(u32::MAX))?;
    let envelope: Envelope = serde_json::from_value(raw).map_err(malformed)?;
    if envelope.kind != kind {
        return Err(malformed(format!(
            "expected a {} artifact, found {}",
            kind.name(),
            envelope.kind.name()
        )));
    }
    if payload_checksum(&envelope.payload)? != envelope.checksum {
        return Err(Error::Checksum);
    }
    serde_json::from_value(envelope.payload).map_err(malformed)
}

pub fn save_artifact<T: Serialize>(path: &Path, kind: ArtifactKind, value: &T) -> Result<()> {
    write_atomic(path, to_artifact_string(kind, value)?.as_bytes())
}

pub fn load_artifact<T: DeserializeOwned>(path: &Path, kind: ArtifactKind) -> Result<T> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(malformed)?;
    from_artifact_str(kind, text)
}

pub fn save_state(path: &Path, rho: &DensityMatrix) -> Result<()> {
    save_artifact(path, ArtifactKind::State, rho)
}

pub fn load_state(path: &Path) -> Result<DensityMatrix> {
    load_artifact(path, ArtifactKind::State)
}

/// Stores the recipe only; operators are rebuilt on load.
pub fn save_measurement_set(path: &Path, ms: &MeasurementSet) -> Result<()> {
    save_artifact(path, ArtifactKind::MeasurementSet, &ms.recipe())
}

pub fn load_measurement_set(path: &Path) -> Result<MeasurementSet> {
    let recipe: MeasurementRecipe = load_artifact(path, ArtifactKind::MeasurementSet)?;
    MeasurementSet::from_recipe(&recipe)
}

/// Data values together with the recipe of the set that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataFile {
    pub measurement: MeasurementRecipe,
    pub data: DataVector,
}

impl DataFile {
    pub fn validate(&self) -> Result<()> {
        let expected = self.measurement.operator_count();
        if self.data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{} data values for {expected} operators",
                self.data.len()
            )));
        }
        Ok(())
    }
}

pub fn save_data(path: &Path, file: &DataFile) -> Result<()> {
    file.validate()?;
    save_artifact(path, ArtifactKind::Data, file)
}

pub fn load_data(path: &Path) -> Result<DataFile> {
    let file: DataFile = load_artifact(path, ArtifactKind::Data)?;
    file.validate()?;
    Ok(file)
}

pub fn save_report(path: &Path, report: &RunReport) -> Result<()> {
    save_artifact(path, ArtifactKind::Report, report)
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    load_artifact(path, ArtifactKind::Report)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV with columns `iteration, fidelity, g_loss, d_loss, l1, wall_ms`;
/// missing values are left empty.
pub fn report_csv(report: &RunReport) -> String {
    let mut out = String::from("iteration,fidelity,g_loss,d_loss,l1,wall_ms\n");
    for e in &report.entries {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.iteration,
            opt(e.fidelity),
            opt(e.g_loss),
            opt(e.d_loss),
            opt(e.l1),
            e.wall_ms
        ));
    }
    out
}

pub fn write_report_csv(path: &Path, report: &RunReport) -> Result<()> {
    write_atomic(path, report_csv(report).as_bytes())
}

pub fn pretrain_history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_g_loss,mean_d_loss,mean_l1,validation_fidelity,wall_ms\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.mean_g_loss, r.mean_d_loss, r.mean_l1, r.validation_fidelity, r.wall_ms
        ));
    }
    out
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    magic: String,
    format_version: u32,
    kind: ArtifactKind,
    measurement: MeasurementRecipe,
    count: usize,
    /// SHA-256 over the record lines, each terminated by `\n`.
    checksum: String,
}

/// One header line followed by one [`TrainingPair`] per line.
pub fn save_dataset(path: &Path, measurement: &MeasurementRecipe, pairs: &[TrainingPair]) -> Result<()> {
    let mut body = String::new();
    for p in pairs {
        body.push_str(&serde_json::to_string(p).map_err(malformed)?);
        body.push('\n');
    }
    let header = DatasetHeader {
        magic: MAGIC.into(),
        format_version: FORMAT_VERSION,
        kind: ArtifactKind::Dataset,
        measurement: measurement.clone(),
        count: pairs.len(),
        checksum: sha256_hex(body.as_bytes()),
    };
    let mut text = serde_json::to_string(&header).map_err(malformed)?;
    text.push('\n');
    text.push_str(&body);
    write_atomic(path, text.as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<(MeasurementRecipe, Vec<TrainingPair>)> {
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().ok_or_else(|| malformed("empty dataset file"))??;
    let raw: Value = serde_json::from_str(&first).map_err(malformed)?;
    let magic = raw.get("magic").and_then(Value::as_str).unwrap_or_default();
    let version = raw.get("format_version").and_then(Value::as_u64).unwrap_or(0);
    check_header(magic, u32::try_from(version).unwrap_or(u32::MAX))?;
    let header: DatasetHeader = serde_json::from_value(raw).map_err(malformed)?;
    if header.kind != ArtifactKind::Dataset {
        return Err(malformed("not a dataset file"));
    }
    let mut hasher = Sha256::new();
    let mut pairs = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
        pairs.push(line);
    }
    if pairs.len() != header.count {
        return Err(malformed(format!(
            "header announces {} records, found {}",
            header.count,
            pairs.len()
        )));
    }
    if hex::encode(hasher.finalize()) != header.checksum {
        return Err(Error::Checksum);
    }
    let pairs = pairs
        .iter()
        .map(|l| serde_json::from_str(l).map_err(malformed))
        .collect::<Result<Vec<TrainingPair>>>()?;
    let ms_dim = header.measurement.dim;
    for p in &pairs {
        if p.state.dim() != ms_dim {
            return Err(Error::DimensionMismatch(format!(
                "dataset state of dimension {} for operators of dimension {ms_dim}",
                p.state.dim()
            )));
        }
    }
    Ok((header.measurement, pairs))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    measurement: MeasurementRecipe,
    config: TrainConfig,
    generator_len: usize,
    discriminator_len: usize,
}

/// Layout: magic, `u32` version, `u64` header length, JSON header,
/// generator then discriminator parameters as little-endian `f64`, and a
/// SHA-256 trailer over everything before it.
pub fn checkpoint_bytes(snapshot: &ModelSnapshot) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader {
        measurement: snapshot.measurement.clone(),
        config: snapshot.config.clone(),
        generator_len: snapshot.generator.len(),
        discriminator_len: snapshot.discriminator.len(),
    })
    .map_err(malformed)?;
    let params = snapshot.generator.len() + snapshot.discriminator.len();
    let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + 8 * params + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in snapshot.generator.iter().chain(&snapshot.discriminator) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| malformed("checkpoint is truncated"))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn read_f64s(raw: &[u8]) -> Vec<f64> {
    raw.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelSnapshot> {
    let mut at = 0;
    if take(bytes, &mut at, 8)? != CHECKPOINT_MAGIC {
        return Err(malformed("not a model checkpoint"));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(malformed)?;
    let header: CheckpointHeader = serde_json::from_slice(take(bytes, &mut at, header_len)?).map_err(malformed)?;
    let params = header
        .generator_len
        .checked_add(header.discriminator_len)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| malformed("parameter count overflows"))?;
    let raw = take(bytes, &mut at, params)?;
    let body_end = at;
    let trailer = take(bytes, &mut at, 32)?;
    if at != bytes.len() {
        return Err(malformed("trailing bytes after checkpoint"));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != trailer {
        return Err(Error::Checksum);
    }
    let mut values = read_f64s(raw);
    let discriminator = values.split_off(header.generator_len);
    Ok(ModelSnapshot {
        measurement: header.measurement,
        config: header.config,
        generator: values,
        discriminator,
    })
}

pub fn save_checkpoint(path: &Path, snapshot: &ModelSnapshot) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(snapshot)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelSnapshot> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

/// Writes rows of `(re β, im β, value)` with a header line.
pub fn write_grid_csv(path: &Path, rows: &[(f64, f64, f64)]) -> Result<()> {
    let mut buf = BufWriter::new(Vec::new());
    writeln!(buf, "re_beta,im_beta,value")?;
    for (x, y, v) in rows {
        writeln!(buf, "{x},{y},{v}")?;
    }
    let bytes = buf.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    write_atomic(path, &bytes)
}
