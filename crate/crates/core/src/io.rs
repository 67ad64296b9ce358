//! Binary field and checkpoint formats, trajectory files and CSV output.
//!
//! # Field file
//!
//! ```text
//! "MSWF" | version u32 | rank u32 | extents u64 × rank | dtype u8 (0 = f64) | payload
//! ```
//!
//! All integers and values little-endian, payload row-major.
//!
//! # Checkpoint file
//!
//! ```text
//! "MSWC" | version u32 | header_len u64 | header JSON
//! | count u32 | (name_len u32 | name UTF-8 | field block) × count
//! | has_optimizer u8 | [step u64 | m blocks × count | v blocks × count]
//! ```
//!
//! Parameter blocks are sorted by name; optimizer blocks follow the same order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::coordinate_channels;
use crate::error::{Error, FormatError, Result};
use crate::gradcheck::ParamMap;
use crate::metrics::ClimatologyReport;
use crate::model::{ModelConfig, ModelParameters, Mswt};
use crate::rollout::Trajectory;
use crate::spectral::SpectrumSeries;
use crate::tensor::Tensor;
use crate::training::{LossRecord, Normalization, OptimizerState, RngState, TrainConfig};

pub const FIELD_MAGIC: &[u8; 4] = b"MSWF";
pub const FIELD_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSWC";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Serializes one field block.
pub fn encode_field(t: &Tensor) -> Result<Vec<u8>> {
    if t.shape().is_empty() || t.shape().contains(&0) {
        return Err(Error::shape(format!(
            "cannot store a tensor with extents {:?}",
            t.shape()
        )));
    }
    let mut out = Vec::with_capacity(13 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&FIELD_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.push(DTYPE_F64);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Cursor over a byte buffer that reports truncation.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn field(&mut self) -> std::result::Result<Tensor, FormatError> {
        if self.take(4)? != FIELD_MAGIC {
            return Err(FormatError::BadMagic);
        }
        let version = self.u32()?;
        if version != FIELD_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 16 {
            return Err(FormatError::Malformed(format!("rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = usize::try_from(self.u64()?)
                .map_err(|_| FormatError::Malformed("extent overflows".into()))?;
            if e == 0 {
                return Err(FormatError::Malformed("zero extent".into()));
            }
            shape.push(e);
        }
        let dtype = self.u8()?;
        if dtype != DTYPE_F64 {
            return Err(FormatError::UnsupportedDtype(dtype));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| FormatError::Malformed("payload size overflows".into()))?;
        let payload = self.take(n)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_parts(shape, data))
    }
}

/// Parses a complete field file image.
pub fn decode_field(bytes: &[u8]) -> std::result::Result<Tensor, FormatError> {
    let mut r = Reader::new(bytes);
    let t = r.field()?;
    if !r.done() {
        return Err(FormatError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(t)
}

pub fn write_field(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_field(t)?)
}

pub fn read_field(path: &Path) -> Result<Tensor> {
    decode_field(&read_bytes(path)?).map_err(|k| Error::format(path, k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    model: ModelConfig,
    normalization: Normalization,
    iteration: usize,
    train_config: Option<TrainConfig>,
    rng: Option<RngState>,
    history: Vec<LossRecord>,
}

/// Optimizer-side state needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub history: Vec<LossRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Mswt,
    pub normalization: Normalization,
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn iteration(&self) -> usize {
        self.training.as_ref().map_or(0, |t| t.history.len())
    }
}

fn push_named(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&encode_field(t)?);
    Ok(())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let params = ck.model.params.map();
    let header = CheckpointHeader {
        model: ck.model.config.clone(),
        normalization: ck.normalization.clone(),
        iteration: ck.iteration(),
        train_config: ck.training.as_ref().map(|t| t.config.clone()),
        rng: ck.training.as_ref().map(|t| t.rng),
        history: ck
            .training
            .as_ref()
            .map(|t| t.history.clone())
            .unwrap_or_default(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::invalid(format!("checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        push_named(&mut out, name, t)?;
    }
    match &ck.training {
        None => out.push(0),
        Some(ts) => {
            out.push(1);
            out.extend_from_slice(&ts.optimizer.step.to_le_bytes());
            for moments in [&ts.optimizer.m, &ts.optimizer.v] {
                for name in params.keys() {
                    let t = moments
                        .get(name)
                        .ok_or_else(|| Error::invalid(format!("optimizer state lacks {name}")))?;
                    out.extend_from_slice(&encode_field(t)?);
                }
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, FormatError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let len = usize::try_from(r.u64()?).map_err(|_| FormatError::Truncated)?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)
        .map_err(|e| FormatError::Malformed(format!("header: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = ParamMap::new();
    let mut order = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| FormatError::Malformed("parameter name is not UTF-8".into()))?;
        let t = r.field()?;
        if params.insert(name.clone(), t).is_some() {
            return Err(FormatError::Malformed(format!(
                "duplicate parameter {name}"
            )));
        }
        order.push(name);
    }
    let training = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let mut moments = [ParamMap::new(), ParamMap::new()];
            for m in moments.iter_mut() {
                for name in &order {
                    m.insert(name.clone(), r.field()?);
                }
            }
            let [m, v] = moments;
            let config = header.train_config.clone().ok_or_else(|| {
                FormatError::Malformed("optimizer state without training config".into())
            })?;
            let rng = header.rng.ok_or_else(|| {
                FormatError::Malformed("optimizer state without RNG state".into())
            })?;
            Some(TrainingState {
                config,
                optimizer: OptimizerState { m, v, step },
                rng,
                history: header.history.clone(),
            })
        }
        f => return Err(FormatError::Malformed(format!("optimizer flag {f}"))),
    };
    if !r.done() {
        return Err(FormatError::Malformed(
            "trailing bytes after checkpoint".into(),
        ));
    }
    let params = ModelParameters::from_map(&header.model, params)
        .map_err(|e| FormatError::Malformed(e.to_string()))?;
    let model =
        Mswt::new(header.model, params).map_err(|e| FormatError::Malformed(e.to_string()))?;
    if header.iteration != training.as_ref().map_or(0, |t| t.history.len()) {
        return Err(FormatError::Malformed(
            "iteration counter disagrees with history".into(),
        ));
    }
    Ok(Checkpoint {
        model,
        normalization: header.normalization,
        training,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path)?).map_err(|k| Error::format(path, k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryMeta {
    dt: f64,
    snapshots: usize,
    unstable_at: Option<usize>,
}

/// Sidecar path `<file>.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Stores states as one `T×H×W×C` field plus a JSON sidecar.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let first = &traj.states[0];
    let (h, w, c) = first.hwc()?;
    let mut data = Vec::with_capacity(traj.len() * first.len());
    for s in &traj.states {
        data.extend_from_slice(s.data());
    }
    let stacked = Tensor::from_parts(vec![traj.len(), h, w, c], data);
    write_field(path, &stacked)?;
    let meta = TrajectoryMeta {
        dt: traj.dt,
        snapshots: traj.len(),
        unstable_at: traj.unstable_at,
    };
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(&meta_path(path), &json)
}

/// Reads a trajectory; coordinates are regenerated for the grid. A missing
/// sidecar yields `dt = 1` and no instability marker.
pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let t = read_field(path)?;
    let (steps, h, w, c) = match *t.shape() {
        [s, h, w, c] => (s, h, w, c),
        [h, w, c] => (1, h, w, c),
        _ => {
            return Err(Error::format(
                path,
                FormatError::Malformed(format!(
                    "trajectory must be rank 3 or 4, got {:?}",
                    t.shape()
                )),
            ))
        }
    };
    let per = h * w * c;
    let states = t
        .data()
        .chunks_exact(per)
        .map(|ch| Tensor::from_parts(vec![h, w, c], ch.to_vec()))
        .collect();
    let mp = meta_path(path);
    let meta = if mp.exists() {
        let m: TrajectoryMeta = serde_json::from_slice(&read_bytes(&mp)?)
            .map_err(|e| Error::format(&mp, FormatError::Malformed(e.to_string())))?;
        if m.snapshots != steps {
            return Err(Error::format(
                &mp,
                FormatError::Malformed(format!(
                    "sidecar lists {} snapshots, file has {steps}",
                    m.snapshots
                )),
            ));
        }
        m
    } else {
        TrajectoryMeta {
            dt: 1.0,
            snapshots: steps,
            unstable_at: None,
        }
    };
    let mut traj = Trajectory::new(states, coordinate_channels(h, w), meta.dt)?;
    traj.unstable_at = meta.unstable_at;
    Ok(traj)
}

/// Shortest round-trip decimal form.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner()
        .map_err(|e| Error::invalid(format!("csv: {e}")))
}

pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    write_atomic(path, &csv_bytes(header, rows)?)
}

pub const LOSS_COLUMNS: [&str; 3] = ["iteration", "lr", "train_loss"];

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    write_csv(
        path,
        &LOSS_COLUMNS,
        history
            .iter()
            .map(|r| vec![r.iteration.to_string(), fmt_f64(r.lr), fmt_f64(r.loss)]),
    )
}

pub const SPECTRUM_COLUMNS: [&str; 2] = ["k", "power"];

pub fn write_spectrum_csv(path: &Path, s: &SpectrumSeries) -> Result<()> {
    write_csv(
        path,
        &SPECTRUM_COLUMNS,
        s.power
            .iter()
            .enumerate()
            .map(|(k, p)| vec![k.to_string(), fmt_f64(*p)]),
    )
}

/// One evaluation row; `None` cells are written empty.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub rel_l2: Option<f64>,
    pub smae: Option<f64>,
    pub smlr: Option<f64>,
    pub emae: Option<f64>,
    pub emlr: Option<f64>,
}

pub const METRICS_COLUMNS: [&str; 6] = ["step", "rel_l2", "smae", "smlr", "emae", "emlr"];

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let cell = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    write_csv(
        path,
        &METRICS_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.step.to_string(),
                cell(r.rel_l2),
                cell(r.smae),
                cell(r.smlr),
                cell(r.emae),
                cell(r.emlr),
            ]
        }),
    )
}

pub const CLIMATOLOGY_COLUMNS: [&str; 5] = ["channel", "min_bias", "max_bias", "mean_bias", "rmse"];
pub const ZONAL_COLUMNS: [&str; 4] = ["channel", "row", "model", "reference"];

/// `climatology.csv`, `zonal_mean.csv` and `bias_c{channel}.mswf` under `dir`.
pub fn write_climatology(dir: &Path, report: &ClimatologyReport) -> Result<()> {
    write_csv(
        &dir.join("climatology.csv"),
        &CLIMATOLOGY_COLUMNS,
        report.channels.iter().enumerate().map(|(c, ch)| {
            vec![
                c.to_string(),
                fmt_f64(ch.min_bias),
                fmt_f64(ch.max_bias),
                fmt_f64(ch.mean_bias),
                fmt_f64(ch.rmse),
            ]
        }),
    )?;
    let mut zonal = Vec::new();
    for (c, ch) in report.channels.iter().enumerate() {
        for (row, (m, r)) in ch.model_zonal.iter().zip(&ch.reference_zonal).enumerate() {
            zonal.push(vec![
                c.to_string(),
                row.to_string(),
                fmt_f64(*m),
                fmt_f64(*r),
            ]);
        }
    }
    write_csv(&dir.join("zonal_mean.csv"), &ZONAL_COLUMNS, zonal)?;
    for (c, ch) in report.channels.iter().enumerate() {
        write_field(&dir.join(format!("bias_c{c}.mswf")), &ch.bias)?;
    }
    Ok(())
}

/// Parsed CSV: header and string rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let bytes = read_bytes(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let bad = |e: csv::Error| Error::format(path, FormatError::Malformed(e.to_string()));
    let header = r.headers().map_err(bad)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()
        .map_err(bad)?;
    Ok((header, rows))
}
