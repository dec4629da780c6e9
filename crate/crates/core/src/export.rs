//! Estimate-stream and update-report serialisation.
//!
//! CSV output carries a header; every jsonl record carries a `type` field.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::appliance_db::ApplianceId;
use crate::disaggregator::{ApplianceState, DisaggregationEstimate};
use crate::pipeline::WindowReport;
use crate::{Error, Result};

pub const ESTIMATE_CSV_HEADER: [&str; 5] =
    ["timestamp", "appliance_id", "on_probability", "decided_state", "estimated_power_w"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(Error::Config(format!("unknown format `{other}`, expected csv or jsonl"))),
        }
    }
}

/// One `(second, appliance)` row of the estimate stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub timestamp: i64,
    pub appliance_id: ApplianceId,
    pub on_probability: f64,
    pub decided_state: ApplianceState,
    pub estimated_power_w: f64,
}

impl EstimateRecord {
    pub fn from_estimate(e: &DisaggregationEstimate) -> impl Iterator<Item = EstimateRecord> + '_ {
        e.per_appliance.iter().map(move |a| EstimateRecord {
            timestamp: e.timestamp,
            appliance_id: a.id,
            on_probability: a.on_probability,
            decided_state: a.state,
            estimated_power_w: a.estimated_power,
        })
    }
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    #[serde(rename = "type")]
    kind: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Deserialize)]
struct TaggedEstimate {
    #[serde(rename = "type")]
    kind: String,
    #[serde(flatten)]
    body: EstimateRecord,
}

/// Streams estimates to a writer in the chosen format.
pub struct EstimateWriter<W: Write> {
    format: Format,
    csv: Option<csv::Writer<W>>,
    raw: Option<W>,
}

impl<W: Write> EstimateWriter<W> {
    pub fn new(out: W, format: Format) -> Result<Self> {
        match format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(out);
                w.write_record(ESTIMATE_CSV_HEADER)?;
                Ok(Self { format, csv: Some(w), raw: None })
            }
            Format::Jsonl => Ok(Self { format, csv: None, raw: Some(out) }),
        }
    }

    pub fn write(&mut self, estimate: &DisaggregationEstimate) -> Result<()> {
        for r in EstimateRecord::from_estimate(estimate) {
            self.write_record(&r)?;
        }
        Ok(())
    }

    pub fn write_record(&mut self, r: &EstimateRecord) -> Result<()> {
        match self.format {
            Format::Csv => {
                let w = self.csv.as_mut().expect("csv writer present");
                w.write_record([
                    r.timestamp.to_string(),
                    r.appliance_id.to_string(),
                    r.on_probability.to_string(),
                    r.decided_state.to_string(),
                    r.estimated_power_w.to_string(),
                ])?;
            }
            Format::Jsonl => {
                let w = self.raw.as_mut().expect("raw writer present");
                serde_json::to_writer(&mut *w, &Tagged { kind: "estimate", body: r })?;
                w.write_all(b"\n").map_err(|e| Error::io("<estimate output>", e))?;
            }
        }
        Ok(())
    }

    /// Flushes and returns the inner writer.
    pub fn finish(self) -> Result<W> {
        match (self.csv, self.raw) {
            (Some(w), _) => w.into_inner().map_err(|e| Error::io("<estimate output>", e.into_error())),
            (None, Some(mut w)) => {
                w.flush().map_err(|e| Error::io("<estimate output>", e))?;
                Ok(w)
            }
            (None, None) => unreachable!("writer always holds one sink"),
        }
    }
}

/// Calls `f` for every record of an estimate file, sniffing the format from
/// its first non-blank character.
pub fn for_each_estimate(path: impl AsRef<Path>, mut f: impl FnMut(EstimateRecord) -> Result<()>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let jsonl = loop {
        let buf = reader.fill_buf().map_err(|e| Error::io(path, e))?;
        match buf.iter().position(|b| !b.is_ascii_whitespace()) {
            Some(i) => break buf[i] == b'{',
            None if buf.is_empty() => return Ok(()),
            None => {
                let n = buf.len();
                reader.consume(n);
            }
        }
    };
    if jsonl {
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TaggedEstimate = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.into(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if rec.kind == "estimate" {
                f(rec.body)?;
            }
        }
    } else {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().ne(ESTIMATE_CSV_HEADER) {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: format!("expected header {}", ESTIMATE_CSV_HEADER.join(",")),
            });
        }
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            let bad = |what: &str| Error::Parse {
                path: path.into(),
                line,
                message: format!("bad {what}"),
            };
            let num = |i: usize| row.get(i).and_then(|s| s.parse::<f64>().ok());
            let state = match row.get(3) {
                Some("on") => ApplianceState::On,
                Some("off") => ApplianceState::Off,
                _ => return Err(bad("decided_state")),
            };
            f(EstimateRecord {
                timestamp: row.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("timestamp"))?,
                appliance_id: ApplianceId(row.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("appliance_id"))?),
                on_probability: num(2).ok_or_else(|| bad("on_probability"))?,
                decided_state: state,
                estimated_power_w: num(4).ok_or_else(|| bad("estimated_power_w"))?,
            })?;
        }
    }
    Ok(())
}

/// Writes window reports as jsonl records tagged `update_report`.
pub fn write_reports_jsonl<W: Write>(reports: &[WindowReport], mut out: W) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, &Tagged { kind: "update_report", body: r })?;
        out.write_all(b"\n").map_err(|e| Error::io("<report output>", e))?;
    }
    out.flush().map_err(|e| Error::io("<report output>", e))
}

pub fn read_reports_jsonl(path: impl AsRef<Path>) -> Result<Vec<WindowReport>> {
    #[derive(Deserialize)]
    struct TaggedReport {
        #[serde(rename = "type")]
        kind: String,
        #[serde(flatten)]
        body: WindowReport,
    }
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: TaggedReport = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.kind == "update_report" {
            out.push(rec.body);
        }
    }
    Ok(out)
}

/// Writes window reports as CSV, one row per window.
pub fn write_reports_csv<W: Write>(reports: &[WindowReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "window", "day", "start", "end", "samples", "learned", "edges", "pairs", "states", "created", "merged",
        "absorbed", "pruned", "models",
    ])?;
    for r in reports {
        let (created, merged, absorbed, pruned, models) = r.update.as_ref().map_or((0, 0, 0, 0, 0), |u| {
            (u.created.len(), u.merged.len(), u.absorbed.len(), u.pruned.len(), u.models.len())
        });
        w.write_record([
            r.window.to_string(),
            r.day.to_string(),
            r.start.to_string(),
            r.end.to_string(),
            r.samples.to_string(),
            r.learned.to_string(),
            r.edges.to_string(),
            r.pairs.to_string(),
            r.states.len().to_string(),
            created.to_string(),
            merged.to_string(),
            absorbed.to_string(),
            pruned.to_string(),
            models.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<report output>", e))?;
    Ok(())
}
