//! Point observations from CSV (`lon,lat,time,value,category`).

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::difc::Label;

pub const CSV_HEADER: [&str; 5] = ["lon", "lat", "time", "value", "category"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub lon: f64,
    pub lat: f64,
    /// UTC, ISO-8601.
    pub time: String,
    pub value: f64,
    pub category: String,
}

/// A labeled point collection, stored as one CAS object. It is never served
/// raw unless its label permits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub kind: PointsKind,
    pub name: String,
    pub time_stamp: String,
    pub label: Label,
    pub records: Vec<PointRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointsKind {
    #[default]
    Points,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    /// 1-based line number in the source file (the header is line 1).
    pub line: usize,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error("header must be exactly lon,lat,time,value,category")]
    Header,
    #[error("{} malformed row(s); first at line {}: {}", .0.len(), .0[0].line, .0[0].message)]
    Rows(Vec<RowError>),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub fn normalize_time(s: &str) -> Option<String> {
    let t = DateTime::parse_from_rfc3339(s.trim()).ok()?.with_timezone(&Utc);
    Some(t.to_rfc3339_opts(SecondsFormat::AutoSi, true))
}

fn parse_row(rec: &csv::StringRecord) -> Result<PointRecord, String> {
    if rec.len() != 5 {
        return Err(format!("expected 5 fields, found {}", rec.len()));
    }
    let num = |i: usize, name: &str| -> Result<f64, String> {
        let v: f64 = rec[i].trim().parse().map_err(|_| format!("{name} {:?} is not a number", &rec[i]))?;
        if !v.is_finite() {
            return Err(format!("{name} must be finite"));
        }
        Ok(v)
    };
    let lon = num(0, "lon")?;
    let lat = num(1, "lat")?;
    if !(-180.0..=180.0).contains(&lon) {
        return Err(format!("lon {lon} outside [-180, 180]"));
    }
    if !(-90.0..=90.0).contains(&lat) {
        return Err(format!("lat {lat} outside [-90, 90]"));
    }
    let time = normalize_time(&rec[2]).ok_or_else(|| format!("time {:?} is not ISO-8601", &rec[2]))?;
    let value = num(3, "value")?;
    Ok(PointRecord { lon, lat, time, value, category: rec[4].to_string() })
}

/// Parses the whole file, collecting every malformed row with its line number.
pub fn parse_points_csv(text: &str) -> Result<Vec<PointRecord>, CsvError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(CsvError::Header);
    }
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for row in rdr.records() {
        match row {
            Ok(rec) => {
                let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
                match parse_row(&rec) {
                    Ok(p) => records.push(p),
                    Err(message) => errors.push(RowError { line, message }),
                }
            }
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                errors.push(RowError { line, message: e.to_string() });
            }
        }
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(CsvError::Rows(errors))
    }
}

/// Re-serializes records in the input schema; floats use shortest round-trip form.
pub fn export_points_csv(records: &[PointRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in records {
        w.write_record([
            r.lon.to_string(),
            r.lat.to_string(),
            r.time.clone(),
            r.value.to_string(),
            r.category.clone(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
