//! Check-in ingestion and export.
//!
//! Check-ins are UTF-8 CSV (header `user_id,platform,timestamp,lat,lon,poi_id`)
//! or JSON lines with the same field names. Timestamps are epoch seconds or
//! ISO-8601; offsets are converted to UTC and naive times are read as UTC.
//! Each row carries either `lat` and `lon` or `poi_id`. The identity map is a
//! two-column CSV `id_platform_a,id_platform_b`.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::{CheckinPoint, Location};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    user_id: String,
    platform: String,
    timestamp: serde_json::Value,
    #[serde(default)]
    lat: Option<f64>,
    #[serde(default)]
    lon: Option<f64>,
    #[serde(default)]
    poi_id: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    user_id: String,
    platform: String,
    timestamp: String,
    lat: Option<f64>,
    lon: Option<f64>,
    poi_id: Option<u64>,
}

pub fn parse_timestamp(s: &str) -> Result<i64> {
    let s = s.trim();
    if let Ok(secs) = s.parse::<i64>() {
        return Ok(secs);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    Err(Error::Validation(format!("unparseable timestamp {s:?}")))
}

fn to_point(
    user_id: String,
    platform: &str,
    timestamp: i64,
    lat: Option<f64>,
    lon: Option<f64>,
    poi_id: Option<u64>,
) -> Result<CheckinPoint> {
    let location = match (lat, lon, poi_id) {
        (Some(lat), Some(lon), _) => Location::Raw { lat, lon },
        (None, None, Some(id)) => Location::Poi(id),
        _ => {
            return Err(Error::Validation(format!(
                "check-in of {user_id} needs lat+lon or poi_id"
            )))
        }
    };
    let point = CheckinPoint {
        user_id,
        platform: platform.parse()?,
        timestamp,
        location,
    };
    point.validate()?;
    Ok(point)
}

/// Reads check-ins; `.jsonl`/`.json` files are JSON lines, anything else CSV.
pub fn read_checkins(path: &Path) -> Result<Vec<CheckinPoint>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if matches!(ext, "jsonl" | "json" | "ndjson") {
        read_jsonl(BufReader::new(File::open(path)?))
    } else {
        read_csv(File::open(path)?)
    }
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Vec<CheckinPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            to_point(
                row.user_id,
                &row.platform,
                parse_timestamp(&row.timestamp)?,
                row.lat,
                row.lon,
                row.poi_id,
            )
        })
        .collect()
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<CheckinPoint>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line)?;
        let ts = match &row.timestamp {
            serde_json::Value::Number(n) => n
                .as_i64()
                .ok_or_else(|| Error::Validation(format!("non-integer timestamp {n}")))?,
            serde_json::Value::String(s) => parse_timestamp(s)?,
            other => return Err(Error::Validation(format!("bad timestamp {other}"))),
        };
        out.push(to_point(row.user_id, &row.platform, ts, row.lat, row.lon, row.poi_id)?);
    }
    Ok(out)
}

/// Writes check-ins as CSV with epoch-second timestamps.
pub fn write_checkins_csv<W: Write>(writer: W, points: &[CheckinPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_id", "platform", "timestamp", "lat", "lon", "poi_id"])?;
    for p in points {
        let (lat, lon, poi) = match p.location {
            Location::Raw { lat, lon } => (lat.to_string(), lon.to_string(), String::new()),
            Location::Poi(id) => (String::new(), String::new(), id.to_string()),
        };
        w.write_record([
            p.user_id.as_str(),
            &p.platform.to_string(),
            &p.timestamp.to_string(),
            &lat,
            &lon,
            &poi,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_checkins_jsonl<W: Write>(mut writer: W, points: &[CheckinPoint]) -> Result<()> {
    for p in points {
        let (lat, lon, poi_id) = match p.location {
            Location::Raw { lat, lon } => (Some(lat), Some(lon), None),
            Location::Poi(id) => (None, None, Some(id)),
        };
        let row = Row {
            user_id: p.user_id.clone(),
            platform: p.platform.to_string(),
            timestamp: p.timestamp.into(),
            lat,
            lon,
            poi_id,
        };
        serde_json::to_writer(&mut writer, &row)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_identity_map(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(File::open(path)?);
    rdr.records()
        .map(|r| {
            let r = r?;
            match (r.get(0), r.get(1)) {
                (Some(a), Some(b)) => Ok((a.to_string(), b.to_string())),
                _ => Err(Error::Validation("identity map rows need two columns".into())),
            }
        })
        .collect()
}

pub fn write_identity_map<W: Write>(writer: W, links: &[(String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id_platform_a", "id_platform_b"])?;
    for (a, b) in links {
        w.write_record([a, b])?;
    }
    w.flush()?;
    Ok(())
}
