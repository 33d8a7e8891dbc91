//! Dataset files and model checkpoints.
//!
//! Datasets are JSON lines, one user per line; lines starting with `#` carry
//! the configuration that produced the file and are skipped by the reader.
//!
//! Checkpoints are a small binary container (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "CQCKPT\0\0"
//! 8       4     u32 header length H
//! 12      H     UTF-8 JSON header (format_version, model, schedule,
//!               norm_stats, train, seed — in that order)
//! 12+H    4     u32 blob count B
//! then B times:
//!         2     u16 name length L
//!         L     UTF-8 parameter name
//!         4     u32 rows
//!         4     u32 cols
//!         4·rows·cols  f32 values, row-major
//! ```
//!
//! Nothing may follow the last blob. Files are written to a temporary
//! sibling and renamed into place.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{parameter_layout, DenoiserConfig, DenoiserModel, NormStats};
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::propagation::Aoi;
use crate::scenario::{ConditionSeries, DatasetRecord, TargetSeries};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"CQCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetLine {
    pub user_id: usize,
    pub aoi: Aoi,
    pub t: Vec<usize>,
    pub d_m: Vec<f64>,
    pub h_bs_m: Vec<f64>,
    pub f_hz: Vec<f64>,
    pub pt_dbm: Vec<f64>,
    pub rsrp_dbm: Vec<f64>,
    pub sinr_db: Vec<f64>,
    pub theo_rsrp_dbm: Vec<f64>,
    pub serving_id: Vec<usize>,
}

impl From<&DatasetRecord> for DatasetLine {
    fn from(r: &DatasetRecord) -> Self {
        let c = &r.conditions;
        Self {
            user_id: r.user_id,
            aoi: c.aoi,
            t: (0..r.len()).collect(),
            d_m: c.d_m.clone(),
            h_bs_m: c.h_bs_m.clone(),
            f_hz: c.f_hz.clone(),
            pt_dbm: c.pt_dbm.clone(),
            rsrp_dbm: r.real.rsrp_dbm.clone(),
            sinr_db: r.real.sinr_db.clone(),
            theo_rsrp_dbm: r.theoretical_rsrp_dbm.clone(),
            serving_id: r.serving_ids.clone(),
        }
    }
}

impl DatasetLine {
    pub fn into_record(self) -> Result<DatasetRecord> {
        let n = self.t.len();
        let lens = [
            ("d_m", self.d_m.len()),
            ("h_bs_m", self.h_bs_m.len()),
            ("f_hz", self.f_hz.len()),
            ("pt_dbm", self.pt_dbm.len()),
            ("rsrp_dbm", self.rsrp_dbm.len()),
            ("sinr_db", self.sinr_db.len()),
            ("theo_rsrp_dbm", self.theo_rsrp_dbm.len()),
            ("serving_id", self.serving_id.len()),
        ];
        if let Some((name, len)) = lens.iter().find(|(_, l)| *l != n) {
            return Err(Error::Schema(format!("`{name}` has {len} entries but `t` has {n}")));
        }
        if self.t.iter().enumerate().any(|(i, &t)| i != t) {
            return Err(Error::Schema("`t` must list 0, 1, ..., T-1".into()));
        }
        let conditions = ConditionSeries {
            d_m: self.d_m,
            h_bs_m: self.h_bs_m,
            f_hz: self.f_hz,
            pt_dbm: self.pt_dbm,
            aoi: self.aoi,
        };
        conditions.validate()?;
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.rsrp_dbm) || !finite(&self.sinr_db) || !finite(&self.theo_rsrp_dbm) {
            return Err(Error::Schema("target values must be finite".into()));
        }
        Ok(DatasetRecord {
            user_id: self.user_id,
            conditions,
            real: TargetSeries {
                rsrp_dbm: self.rsrp_dbm,
                sinr_db: self.sinr_db,
            },
            theoretical_rsrp_dbm: self.theo_rsrp_dbm,
            serving_ids: self.serving_id,
        })
    }
}

/// Writes `tmp` via `fill`, then renames it over `path`.
fn write_atomic(path: &Path, fill: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("`{}` is not a file path", path.display())))?;
    tmp.set_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let result = (|| {
        let file = fs::File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        fill(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes records as JSON lines, preceded by `# ` comment lines.
pub fn write_dataset(path: &Path, records: &[DatasetRecord], comments: &str) -> Result<()> {
    let lines = records
        .iter()
        .map(|r| serde_json::to_string(&DatasetLine::from(r)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Schema(e.to_string()))?;
    write_atomic(path, |w| {
        for c in comments.lines() {
            writeln!(w, "# {c}")?;
        }
        for l in &lines {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parsed: DatasetLine = serde_json::from_str(trimmed)
            .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(
            parsed
                .into_record()
                .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    if out.is_empty() {
        return Err(Error::Schema(format!("{} contains no records", path.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub norm_stats: NormStats,
    /// Echo of the training configuration; opaque to the loader.
    pub train: serde_json::Value,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
}

pub fn save_checkpoint(
    path: &Path,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    train: serde_json::Value,
    seed: u64,
) -> Result<()> {
    let schedule = *schedule
        .params()
        .ok_or_else(|| Error::Validation("only parameterized schedules can be saved".into()))?;
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        schedule,
        norm_stats: model.norm().clone(),
        train,
        seed,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Schema(e.to_string()))?;
    let lossy = model
        .params()
        .iter()
        .filter(|(_, t)| t.data().iter().any(|x| (*x as f32) as f64 != *x))
        .count();
    if lossy > 0 {
        log::warn!("{lossy} parameter tensors are rounded to 32-bit floats on save");
    }
    write_atomic(path, |w| {
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(model.params().len() as u32).to_le_bytes())?;
        for (name, t) in model.params().iter() {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rows() as u32).to_le_bytes())?;
            w.write_all(&(t.cols() as u32).to_le_bytes())?;
            for &x in t.data() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                reason: format!("truncated while reading {what} at byte {}", self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let mut cur = Cursor {
        buf: &bytes,
        pos: 0,
        path,
    };
    if cur.take(8, "magic")? != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)".into()));
    }
    let hlen = cur.u32("header length")? as usize;
    let raw = cur.take(hlen, "header")?;
    let value: serde_json::Value =
        serde_json::from_slice(raw).map_err(|e| corrupt(format!("header is not JSON: {e}")))?;
    let found = value.get("format_version").and_then(|v| v.as_u64());
    if found != Some(FORMAT_VERSION as u64) {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: found.unwrap_or(0) as u32,
            expected: FORMAT_VERSION,
        });
    }
    let header: CheckpointHeader =
        serde_json::from_value(value).map_err(|e| corrupt(format!("malformed header: {e}")))?;
    header.model.validate()?;

    let expected = parameter_layout(&header.model);
    let mut blobs: Vec<(String, Tensor)> = Vec::new();
    let count = cur.u32("blob count")?;
    for _ in 0..count {
        let nlen = cur.u16("blob name length")? as usize;
        let name = std::str::from_utf8(cur.take(nlen, "blob name")?)
            .map_err(|_| corrupt("blob name is not UTF-8".into()))?
            .to_string();
        let rows = cur.u32("blob rows")? as usize;
        let cols = cur.u32("blob cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt(format!("blob `{name}` shape overflows")))?;
        let data = cur
            .take(n, &format!("blob `{name}`"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if blobs.iter().any(|(b, _)| *b == name) {
            return Err(corrupt(format!("blob `{name}` appears twice")));
        }
        blobs.push((name, Tensor::from_vec(rows, cols, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(corrupt(format!("{} unexpected trailing bytes", bytes.len() - cur.pos)));
    }

    let mut params = ParamSet::new();
    for (name, shape) in &expected {
        let idx = blobs
            .iter()
            .position(|(b, _)| b == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing blob `{name}`", path.display())))?;
        let (_, t) = blobs.swap_remove(idx);
        if t.shape() != *shape {
            return Err(Error::Shape(format!(
                "{}: blob `{name}` has shape {:?}, expected {shape:?}",
                path.display(),
                t.shape()
            )));
        }
        params.add(name.clone(), t);
    }
    for (name, _) in &blobs {
        log::warn!("{}: ignoring unknown blob `{name}`", path.display());
    }
    let schedule = make_schedule(&header.schedule)?;
    let model = DenoiserModel::from_parts(header.model.clone(), header.norm_stats.clone(), params)?;
    Ok(Checkpoint {
        header,
        model,
        schedule,
    })
}

/// Generated-vs-real curves: one row per (record, step, sample).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub record_id: usize,
    pub t: usize,
    pub sample: usize,
    pub real_rsrp: f64,
    pub gen_rsrp: f64,
    pub real_sinr: f64,
    pub gen_sinr: f64,
}

pub const SAMPLE_COLUMNS: [&str; 6] = ["record_id", "t", "real_rsrp", "gen_rsrp", "real_sinr", "gen_sinr"];

pub fn sample_rows(real: &[TargetSeries], generated: &[Vec<TargetSeries>]) -> Vec<SampleRow> {
    let mut rows = Vec::new();
    for (id, (r, gens)) in real.iter().zip(generated).enumerate() {
        for (s, g) in gens.iter().enumerate() {
            for t in 0..r.len() {
                rows.push(SampleRow {
                    record_id: id,
                    t,
                    sample: s,
                    real_rsrp: r.rsrp_dbm[t],
                    gen_rsrp: g.rsrp_dbm[t],
                    real_sinr: r.sinr_db[t],
                    gen_sinr: g.sinr_db[t],
                });
            }
        }
    }
    rows
}

pub fn write_samples(path: &Path, rows: &[SampleRow], comments: &str) -> Result<()> {
    let mut body = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut body);
        for r in rows {
            w.serialize(r).map_err(|e| Error::Schema(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    write_atomic(path, |w| {
        for c in comments.lines() {
            writeln!(w, "# {c}")?;
        }
        w.write_all(&body)
    })
}

/// Reads a sample file back into per-record real series and samples.
/// Only the six curve columns are required; rows of one record are grouped
/// by step, in file order, to recover the individual samples.
pub fn read_samples(path: &Path) -> Result<(Vec<TargetSeries>, Vec<Vec<TargetSeries>>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let headers = rdr.headers().map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?.clone();
    let mut col = [0usize; 6];
    for (slot, name) in col.iter_mut().zip(SAMPLE_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column `{name}`", path.display())))?;
    }
    // record -> step -> (real rsrp, real sinr, generated pairs)
    let mut recs: std::collections::BTreeMap<usize, std::collections::BTreeMap<usize, (f64, f64, Vec<(f64, f64)>)>> =
        Default::default();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        let field = |k: usize| -> Result<&str> {
            row.get(col[k])
                .ok_or_else(|| Error::Schema(format!("{}: row {} is short", path.display(), i + 1)))
        };
        let num = |k: usize| -> Result<f64> {
            field(k)?.trim().parse::<f64>().map_err(|_| {
                Error::Schema(format!("{}: row {}: `{}` is not a number", path.display(), i + 1, SAMPLE_COLUMNS[k]))
            })
        };
        let int = |k: usize| -> Result<usize> {
            field(k)?.trim().parse::<usize>().map_err(|_| {
                Error::Schema(format!("{}: row {}: `{}` is not an index", path.display(), i + 1, SAMPLE_COLUMNS[k]))
            })
        };
        let entry = recs
            .entry(int(0)?)
            .or_default()
            .entry(int(1)?)
            .or_insert((num(2)?, num(4)?, Vec::new()));
        entry.2.push((num(3)?, num(5)?));
    }
    if recs.is_empty() {
        return Err(Error::Schema(format!("{} contains no rows", path.display())));
    }
    let mut real = Vec::with_capacity(recs.len());
    let mut generated = Vec::with_capacity(recs.len());
    for (id, steps) in recs {
        let n = steps.values().next().map_or(0, |s| s.2.len());
        if steps.values().any(|s| s.2.len() != n) {
            return Err(Error::Schema(format!("record {id}: steps carry different sample counts")));
        }
        if steps.keys().enumerate().any(|(i, &t)| i != t) {
            return Err(Error::Schema(format!("record {id}: steps are not 0..T")));
        }
        real.push(TargetSeries {
            rsrp_dbm: steps.values().map(|s| s.0).collect(),
            sinr_db: steps.values().map(|s| s.1).collect(),
        });
        generated.push(
            (0..n)
                .map(|k| TargetSeries {
                    rsrp_dbm: steps.values().map(|s| s.2[k].0).collect(),
                    sinr_db: steps.values().map(|s| s.2[k].1).collect(),
                })
                .collect(),
        );
    }
    Ok((real, generated))
}
