//! Per-iteration trace records and their CSV form.
//!
//! Columns: `iter,phase,R,G,y_r,y_g,true_Jr,true_Jg,safe_set_size,alpha_r,alpha_g,violation,misfits`.
//! Missing values (no oracle, no confidence multiplier for seed evaluations)
//! are empty fields. Files start with `#` comment lines carrying the seeds.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Initial evaluation of the known-safe seed set.
    Seed,
    Exploration,
    Maximization,
    /// Summary row for the operating target return; not a new evaluation.
    Done,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Seed, Phase::Exploration, Phase::Maximization, Phase::Done];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Seed => "seed",
            Phase::Exploration => "exploration",
            Phase::Maximization => "maximization",
            Phase::Done => "done",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown phase `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub phase: Phase,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "G")]
    pub g: f64,
    pub y_r: f64,
    pub y_g: f64,
    #[serde(rename = "true_Jr")]
    pub true_jr: Option<f64>,
    #[serde(rename = "true_Jg")]
    pub true_jg: Option<f64>,
    pub safe_set_size: usize,
    pub alpha_r: Option<f64>,
    pub alpha_g: Option<f64>,
    #[serde(with = "bool_as_int")]
    pub violation: bool,
    pub misfits: usize,
}

mod bool_as_int {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!("violation must be 0/1, got {other}"))),
        }
    }
}

/// Writes `# key=value` header lines followed by the CSV body.
pub fn write_trace_csv<W: Write>(mut out: W, header: &[(String, String)], records: &[TraceRecord]) -> Result<()> {
    for (k, v) in header {
        writeln!(out, "# {k}={v}").map_err(|e| Error::io("<trace>", e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    for rec in records {
        w.serialize(rec)?;
    }
    if records.is_empty() {
        w.write_record([
            "iter",
            "phase",
            "R",
            "G",
            "y_r",
            "y_g",
            "true_Jr",
            "true_Jg",
            "safe_set_size",
            "alpha_r",
            "alpha_g",
            "violation",
            "misfits",
        ])?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

pub fn save_trace(path: &Path, header: &[(String, String)], records: &[TraceRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace_csv(std::io::BufWriter::new(file), header, records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: Vec<(String, String)>,
    pub records: Vec<TraceRecord>,
}

pub fn load_trace(path: &Path) -> Result<TraceFile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let Some(rest) = line.strip_prefix('#') else { break };
        if let Some((k, v)) = rest.trim().split_once('=') {
            header.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let records = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<TraceRecord>, _>>()?;
    Ok(TraceFile { header, records })
}
