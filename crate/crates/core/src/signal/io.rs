//! Dataset files.
//!
//! **CSV** — header `subject,label,rate,channel_0,...,channel_{c-1}`, optionally
//! followed by `joint_0,...,joint_{J-1}` for regression recordings. One sample
//! per row; a blank line ends a recording. `label` is the class id, or `-` when
//! joint columns are present.
//!
//! **raw-f64** — all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "STETRAW1"
//! version      u32      1
//! n_records    u64
//! per record:
//!   c          u32
//!   rate_hz    f64
//!   n_samples  u64
//!   label_kind u8       0 = class, 1 = trajectory
//!   label      u64 class id | u32 n_joints + n_samples*n_joints f64
//!   subject    u32 byte length + UTF-8 bytes
//!   samples    n_samples*c f64, row-major
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{Label, Recording};
use crate::error::{Result, StetError};
use crate::tensor::Tensor;

pub const RAW_MAGIC: &[u8; 8] = b"STETRAW1";
pub const RAW_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Csv,
    RawF64,
}

impl DatasetFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::RawF64,
        }
    }
}

pub fn save_dataset(path: &Path, recordings: &[Recording], format: DatasetFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| StetError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match format {
        DatasetFormat::Csv => write_csv(&mut w, recordings),
        DatasetFormat::RawF64 => write_raw(&mut w, recordings),
    };
    res.and_then(|_| w.flush()).map_err(|e| StetError::io(path, e))
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<Recording>> {
    let file = fs::File::open(path).map_err(|e| StetError::io(path, e))?;
    let recs = match format {
        DatasetFormat::Csv => read_csv(BufReader::new(file))?,
        DatasetFormat::RawF64 => read_raw(BufReader::new(file), path)?,
    };
    if recs.is_empty() {
        warn!("{} contains no recordings", path.display());
    }
    Ok(recs)
}

// ---- CSV -------------------------------------------------------------------

fn write_csv(w: &mut impl Write, recordings: &[Recording]) -> std::io::Result<()> {
    let Some(first) = recordings.first() else {
        return Ok(());
    };
    let c = first.n_channels();
    let joints = match &first.label {
        Label::Trajectory(tr) => tr.cols(),
        Label::Class(_) => 0,
    };
    write!(w, "subject,label,rate")?;
    for ch in 0..c {
        write!(w, ",channel_{ch}")?;
    }
    for j in 0..joints {
        write!(w, ",joint_{j}")?;
    }
    writeln!(w)?;
    for (k, rec) in recordings.iter().enumerate() {
        if k > 0 {
            writeln!(w)?;
        }
        let label = match &rec.label {
            Label::Class(id) => id.to_string(),
            Label::Trajectory(_) => "-".to_string(),
        };
        for r in 0..rec.n_samples() {
            write!(w, "{},{},{}", rec.subject_id, label, rec.sample_rate_hz)?;
            for v in rec.samples.row(r) {
                write!(w, ",{v}")?;
            }
            if let Label::Trajectory(tr) = &rec.label {
                for v in tr.row(r) {
                    write!(w, ",{v}")?;
                }
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

struct PendingRecording {
    subject: String,
    label: Option<usize>,
    rate: f64,
    samples: Vec<f64>,
    joints: Vec<f64>,
    rows: usize,
}

fn read_csv(reader: impl BufRead) -> Result<Vec<Recording>> {
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Ok(Vec::new()),
            Some((i, line)) => {
                let line = line.map_err(|e| StetError::Parse { line: i + 1, msg: e.to_string() })?;
                if !line.trim().is_empty() {
                    break (i + 1, line);
                }
            }
        }
    };
    let (header_line, header) = header;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    if cols.len() < 4 || cols[0] != "subject" || cols[1] != "label" || cols[2] != "rate" {
        return Err(StetError::Parse {
            line: header_line,
            msg: "header must start with subject,label,rate,channel_0".into(),
        });
    }
    let mut c = 0;
    let mut joints = 0;
    for (k, name) in cols[3..].iter().enumerate() {
        if *name == format!("channel_{c}") && joints == 0 {
            c += 1;
        } else if *name == format!("joint_{joints}") && c > 0 {
            joints += 1;
        } else {
            return Err(StetError::Parse {
                line: header_line,
                msg: format!("unexpected column {name:?} at position {}", k + 3),
            });
        }
    }
    if c == 0 {
        return Err(StetError::Parse { line: header_line, msg: "no channel columns".into() });
    }
    let width = 3 + c + joints;

    let mut out = Vec::new();
    let mut pending: Option<PendingRecording> = None;
    let finish = |p: PendingRecording, out: &mut Vec<Recording>, line: usize| -> Result<()> {
        let samples = Tensor::new(vec![p.rows, c], p.samples)?;
        let label = if joints > 0 {
            Label::Trajectory(Tensor::new(vec![p.rows, joints], p.joints)?)
        } else {
            Label::Class(p.label.ok_or_else(|| StetError::Parse {
                line,
                msg: "classification recording without a label".into(),
            })?)
        };
        out.push(Recording::new(samples, p.rate, label, p.subject).map_err(|e| StetError::Parse {
            line,
            msg: e.to_string(),
        })?);
        Ok(())
    };
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| StetError::Parse { line: lineno, msg: e.to_string() })?;
        if line.trim().is_empty() {
            if let Some(p) = pending.take() {
                finish(p, &mut out, lineno)?;
            }
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != width {
            return Err(StetError::Parse {
                line: lineno,
                msg: format!("expected {width} cells, found {}", cells.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| StetError::Parse {
                line: lineno,
                msg: format!("non-numeric {what} {s:?}"),
            })
        };
        let label = if joints > 0 {
            None
        } else {
            Some(cells[1].parse::<usize>().map_err(|_| StetError::Parse {
                line: lineno,
                msg: format!("invalid class label {:?}", cells[1]),
            })?)
        };
        let rate = num(cells[2], "rate")?;
        let p = pending.get_or_insert_with(|| PendingRecording {
            subject: cells[0].to_string(),
            label,
            rate,
            samples: Vec::new(),
            joints: Vec::new(),
            rows: 0,
        });
        if p.subject != cells[0] || p.label != label {
            return Err(StetError::Parse {
                line: lineno,
                msg: "subject/label changed inside a recording (missing blank line?)".into(),
            });
        }
        for s in &cells[3..3 + c] {
            p.samples.push(num(s, "sample")?);
        }
        for s in &cells[3 + c..] {
            p.joints.push(num(s, "joint angle")?);
        }
        p.rows += 1;
    }
    if let Some(p) = pending.take() {
        finish(p, &mut out, 0)?;
    }
    Ok(out)
}

// ---- raw-f64 -----------------------------------------------------------------

fn write_raw(w: &mut impl Write, recordings: &[Recording]) -> std::io::Result<()> {
    w.write_all(RAW_MAGIC)?;
    w.write_all(&RAW_VERSION.to_le_bytes())?;
    w.write_all(&(recordings.len() as u64).to_le_bytes())?;
    for rec in recordings {
        w.write_all(&(rec.n_channels() as u32).to_le_bytes())?;
        w.write_all(&rec.sample_rate_hz.to_le_bytes())?;
        w.write_all(&(rec.n_samples() as u64).to_le_bytes())?;
        match &rec.label {
            Label::Class(id) => {
                w.write_all(&[0u8])?;
                w.write_all(&(*id as u64).to_le_bytes())?;
            }
            Label::Trajectory(tr) => {
                w.write_all(&[1u8])?;
                w.write_all(&(tr.cols() as u32).to_le_bytes())?;
                for v in tr.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        let subject = rec.subject_id.as_bytes();
        w.write_all(&(subject.len() as u32).to_le_bytes())?;
        w.write_all(subject)?;
        for v in rec.samples.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub(crate) struct LeReader<R> {
    inner: R,
    pub(crate) offset: usize,
}

impl<R: Read> LeReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> std::io::Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf)?;
        self.offset += n;
        Ok(buf)
    }

    pub(crate) fn u8(&mut self) -> std::io::Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> std::io::Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> std::io::Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> std::io::Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> std::io::Result<Vec<f64>> {
        let raw = self.bytes(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

fn read_raw(reader: impl Read, path: &Path) -> Result<Vec<Recording>> {
    let mut r = LeReader::new(reader);
    let bad = |offset: usize, msg: String| StetError::Parse { line: offset, msg };
    let io = |e: std::io::Error| StetError::io(path, e);
    let magic = match r.bytes(8) {
        Ok(m) => m,
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(Vec::new()),
        Err(e) => return Err(io(e)),
    };
    if magic != RAW_MAGIC {
        return Err(bad(0, "bad magic bytes (byte offset)".into()));
    }
    let version = r.u32().map_err(io)?;
    if version != RAW_VERSION {
        return Err(bad(8, format!("unsupported version {version}")));
    }
    let n = r.u64().map_err(io)?;
    let mut out = Vec::with_capacity(n.min(1 << 20) as usize);
    for _ in 0..n {
        let c = r.u32().map_err(io)? as usize;
        let rate = r.f64().map_err(io)?;
        let ns = r.u64().map_err(io)? as usize;
        let label = match r.u8().map_err(io)? {
            0 => Label::Class(r.u64().map_err(io)? as usize),
            1 => {
                let nj = r.u32().map_err(io)? as usize;
                Label::Trajectory(Tensor::new(vec![ns, nj], r.f64s(ns * nj).map_err(io)?)?)
            }
            k => return Err(bad(r.offset, format!("unknown label kind {k}"))),
        };
        let len = r.u32().map_err(io)? as usize;
        let subject = String::from_utf8(r.bytes(len).map_err(io)?)
            .map_err(|_| bad(r.offset, "subject is not UTF-8".into()))?;
        let samples = Tensor::new(vec![ns, c], r.f64s(ns * c).map_err(io)?)?;
        out.push(Recording::new(samples, rate, label, subject)?);
    }
    Ok(out)
}
