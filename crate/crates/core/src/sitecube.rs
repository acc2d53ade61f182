//! Per-site window time series and the on-disk site-cube directory format.
//!
//! A site directory holds:
//!
//! * `meta.json`: site metadata, per-cell geolocation and `format_version` (currently 1)
//! * `frames.bin`: magic `SCUB`, one version byte, then little-endian `f32` reflectances
//!   laid out `[time][row][col][channel]`
//! * `timestamps.bin`: little-endian `i64` UTC epoch seconds
//! * `power.csv` / `temperature.csv` (optional): header `timestamp_utc,value`, RFC-3339 times
//!
//! Missing reflectances are stored as NaN.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, SecondsFormat, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{self, GeoPoint};

pub const FORMAT_VERSION: u32 = 1;
pub const FRAMES_MAGIC: &[u8; 4] = b"SCUB";
const FRAMES_VERSION: u8 = 1;
const MAX_UTC_OFFSET_MINUTES: i32 = 14 * 60;

#[derive(Debug, Error)]
pub enum SiteCubeError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("format violation: {0}")]
    FormatViolation(String),
    #[error("target interval {target}s is not a multiple of the cadence {cadence}s")]
    CadenceMismatch { cadence: u32, target: u32 },
}

fn violation(msg: impl Into<String>) -> SiteCubeError {
    SiteCubeError::FormatViolation(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMeta {
    pub site_id: String,
    pub location: GeoPoint,
    pub utc_offset_minutes: i32,
    pub window_edge: usize,
    pub channel_ids: Vec<String>,
    pub cadence_seconds: u32,
    /// Row-major latitude of every window cell.
    pub lat_of: Vec<f64>,
    /// Row-major longitude of every window cell.
    pub lon_of: Vec<f64>,
}

pub fn default_channel_ids() -> Vec<String> {
    vec!["C01".into(), "C02".into(), "C03".into()]
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    format_version: u32,
    site_id: String,
    location: GeoPoint,
    utc_offset_minutes: i32,
    window_edge: usize,
    channel_ids: Vec<String>,
    cadence_seconds: u32,
    lat_of: Vec<f64>,
    lon_of: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesKind {
    PowerKw,
    TemperatureC,
}

/// Scalar observation series aligned with a site (power or temperature).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarSeries {
    pub kind: SeriesKind,
    pub timestamps: Vec<i64>,
    pub values: Vec<f64>,
}

impl ScalarSeries {
    pub fn new(kind: SeriesKind) -> Self {
        Self {
            kind,
            timestamps: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn as_map(&self) -> BTreeMap<i64, f64> {
        self.timestamps.iter().copied().zip(self.values.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteCube {
    pub meta: SiteMeta,
    pub timestamps: Vec<i64>,
    /// `[time][row][col][channel]` reflectances, NaN for missing.
    pub frames: Vec<f32>,
    pub power: Option<ScalarSeries>,
    pub temperature: Option<ScalarSeries>,
}

impl SiteCube {
    pub fn channels(&self) -> usize {
        self.meta.channel_ids.len()
    }

    pub fn frame_len(&self) -> usize {
        self.meta.window_edge * self.meta.window_edge * self.channels()
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn value(&self, t: usize, row: usize, col: usize, channel: usize) -> f32 {
        let w = self.meta.window_edge;
        let c = self.channels();
        self.frames[((t * w + row) * w + col) * c + channel]
    }

    /// Channel values at the site cell (window offset `floor(w/2)`).
    pub fn center_values(&self, t: usize) -> Vec<f32> {
        let mid = geo::window_center_offset(self.meta.window_edge);
        (0..self.channels()).map(|ch| self.value(t, mid, mid, ch)).collect()
    }

    pub fn index_of(&self, timestamp: i64) -> Option<usize> {
        self.timestamps.binary_search(&timestamp).ok()
    }

    /// Equality that compares float payloads bit-for-bit (so NaN == NaN).
    pub fn bit_eq(&self, other: &SiteCube) -> bool {
        fn series_eq(a: &Option<ScalarSeries>, b: &Option<ScalarSeries>) -> bool {
            match (a, b) {
                (None, None) => true,
                (Some(a), Some(b)) => {
                    a.kind == b.kind
                        && a.timestamps == b.timestamps
                        && a.values.len() == b.values.len()
                        && a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                _ => false,
            }
        }
        self.meta == other.meta
            && self.timestamps == other.timestamps
            && self.frames.len() == other.frames.len()
            && self.frames.iter().zip(&other.frames).all(|(a, b)| a.to_bits() == b.to_bits())
            && series_eq(&self.power, &other.power)
            && series_eq(&self.temperature, &other.temperature)
    }

    /// Sub-window of edge `w` keeping the site cell at offset `floor(w/2)`.
    pub fn crop(&self, w: usize) -> Result<SiteCube, geo::GeoError> {
        let src = self.meta.window_edge;
        let mid = geo::window_center_offset(src);
        let win = geo::extract_window(src, src, (mid, mid), w)?;
        let c = self.channels();
        let mut frames = Vec::with_capacity(self.len() * w * w * c);
        for t in 0..self.len() {
            for r in 0..w {
                let start = ((t * src + win.row_start + r) * src + win.col_start) * c;
                frames.extend_from_slice(&self.frames[start..start + w * c]);
            }
        }
        let mut lat_of = Vec::with_capacity(w * w);
        let mut lon_of = Vec::with_capacity(w * w);
        for r in 0..w {
            for col in 0..w {
                let i = (win.row_start + r) * src + win.col_start + col;
                lat_of.push(self.meta.lat_of[i]);
                lon_of.push(self.meta.lon_of[i]);
            }
        }
        Ok(SiteCube {
            meta: SiteMeta {
                window_edge: w,
                lat_of,
                lon_of,
                ..self.meta.clone()
            },
            timestamps: self.timestamps.clone(),
            frames,
            power: self.power.clone(),
            temperature: self.temperature.clone(),
        })
    }
}

/// One invariant breach found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn check_series(series: &ScalarSeries, field: &'static str, out: &mut Vec<Violation>) {
    if series.timestamps.len() != series.values.len() {
        out.push(Violation {
            field,
            message: format!(
                "{} timestamps but {} values",
                series.timestamps.len(),
                series.values.len()
            ),
        });
    }
    if let Some(i) = series.timestamps.windows(2).position(|p| p[1] <= p[0]) {
        out.push(Violation {
            field,
            message: format!("timestamps not strictly increasing at index {}", i + 1),
        });
    }
    for (i, &v) in series.values.iter().enumerate() {
        let bad = !v.is_finite() || (series.kind == SeriesKind::PowerKw && v < 0.0);
        if bad {
            out.push(Violation {
                field,
                message: format!("invalid value {v} at index {i}"),
            });
            break;
        }
    }
}

/// Check every structural invariant of a cube. Violations are reported in a fixed
/// order: metadata, geolocation, frame layout, timestamps, reflectances, series.
pub fn validate(cube: &SiteCube) -> Vec<Violation> {
    let mut out = Vec::new();
    let meta = &cube.meta;
    if meta.channel_ids.is_empty() {
        out.push(Violation {
            field: "channel_ids",
            message: "no channels".into(),
        });
    }
    if meta.window_edge == 0 {
        out.push(Violation {
            field: "window_edge",
            message: "window edge must be positive".into(),
        });
    }
    if meta.cadence_seconds == 0 {
        out.push(Violation {
            field: "cadence_seconds",
            message: "cadence must be positive".into(),
        });
    }
    if meta.utc_offset_minutes.abs() > MAX_UTC_OFFSET_MINUTES {
        out.push(Violation {
            field: "utc_offset_minutes",
            message: format!("offset {} outside ±{}", meta.utc_offset_minutes, MAX_UTC_OFFSET_MINUTES),
        });
    }
    if GeoPoint::new(meta.location.lat(), meta.location.lon()).is_err() {
        out.push(Violation {
            field: "location",
            message: "invalid site location".into(),
        });
    }
    let cells = meta.window_edge * meta.window_edge;
    if meta.lat_of.len() != cells || meta.lon_of.len() != cells {
        out.push(Violation {
            field: "lat_of/lon_of",
            message: format!(
                "expected {} cells, got {}/{}",
                cells,
                meta.lat_of.len(),
                meta.lon_of.len()
            ),
        });
    } else if let Some(i) = meta
        .lat_of
        .iter()
        .zip(&meta.lon_of)
        .position(|(&lat, &lon)| GeoPoint::new(lat, lon).is_err())
    {
        out.push(Violation {
            field: "lat_of/lon_of",
            message: format!("invalid geolocation at cell {i}"),
        });
    }

    let frame_len = cube.frame_len();
    if frame_len > 0 && cube.frames.len() != frame_len * cube.timestamps.len() {
        out.push(Violation {
            field: "frames",
            message: format!(
                "payload holds {} values, expected {} frames of {}",
                cube.frames.len(),
                cube.timestamps.len(),
                frame_len
            ),
        });
    }
    if let Some(i) = cube.timestamps.windows(2).position(|p| p[1] <= p[0]) {
        out.push(Violation {
            field: "timestamps",
            message: format!("timestamps not strictly increasing at index {}", i + 1),
        });
    }
    if let Some((i, v)) = cube
        .frames
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_nan() && !(0.0..=1.0).contains(*v))
    {
        out.push(Violation {
            field: "frames",
            message: format!("reflectance {v} out of [0, 1] at flat index {i}"),
        });
    }
    if let Some(p) = &cube.power {
        check_series(p, "power", &mut out);
    }
    if let Some(t) = &cube.temperature {
        check_series(t, "temperature", &mut out);
    }
    out
}

fn ensure_valid(cube: &SiteCube) -> Result<(), SiteCubeError> {
    match validate(cube).into_iter().next() {
        None => Ok(()),
        Some(v) => Err(violation(v.to_string())),
    }
}

fn rfc3339(ts: i64) -> Result<String, SiteCubeError> {
    DateTime::<Utc>::from_timestamp(ts, 0)
        .map(|d| d.to_rfc3339_opts(SecondsFormat::Secs, true))
        .ok_or_else(|| violation(format!("timestamp {ts} out of range")))
}

fn write_series(series: &ScalarSeries, path: &Path) -> Result<(), SiteCubeError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["timestamp_utc", "value"]).map_err(csv_err)?;
    for (&t, &v) in series.timestamps.iter().zip(&series.values) {
        w.write_record([rfc3339(t)?, format!("{v}")]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> SiteCubeError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => SiteCubeError::Io(io),
            other => violation(format!("{other:?}")),
        }
    } else {
        violation(e.to_string())
    }
}

fn read_series(path: &Path, kind: SeriesKind) -> Result<ScalarSeries, SiteCubeError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?;
    if headers.iter().collect::<Vec<_>>() != ["timestamp_utc", "value"] {
        return Err(violation(format!("{}: bad header", path.display())));
    }
    let mut out = ScalarSeries::new(kind);
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = || violation(format!("{}: malformed row {}", path.display(), line + 1));
        if rec.len() != 2 {
            return Err(bad());
        }
        let t = DateTime::parse_from_rfc3339(&rec[0]).map_err(|_| bad())?;
        let v: f64 = rec[1].parse().map_err(|_| bad())?;
        out.timestamps.push(t.timestamp());
        out.values.push(v);
    }
    Ok(out)
}

/// Write `cube` as a site directory at `dir` (created if missing).
pub fn write_sitecube(cube: &SiteCube, dir: &Path) -> Result<(), SiteCubeError> {
    ensure_valid(cube)?;
    fs::create_dir_all(dir)?;
    let meta = &cube.meta;
    let file = MetaFile {
        format_version: FORMAT_VERSION,
        site_id: meta.site_id.clone(),
        location: meta.location,
        utc_offset_minutes: meta.utc_offset_minutes,
        window_edge: meta.window_edge,
        channel_ids: meta.channel_ids.clone(),
        cadence_seconds: meta.cadence_seconds,
        lat_of: meta.lat_of.clone(),
        lon_of: meta.lon_of.clone(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| violation(e.to_string()))?;
    fs::write(dir.join("meta.json"), json)?;

    let mut frames = Vec::with_capacity(5 + cube.frames.len() * 4);
    frames.extend_from_slice(FRAMES_MAGIC);
    frames.push(FRAMES_VERSION);
    for v in &cube.frames {
        frames.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(dir.join("frames.bin"))?;
    f.write_all(&frames)?;

    let ts: Vec<u8> = cube.timestamps.iter().flat_map(|t| t.to_le_bytes()).collect();
    fs::write(dir.join("timestamps.bin"), ts)?;

    if let Some(p) = &cube.power {
        write_series(p, &dir.join("power.csv"))?;
    }
    if let Some(t) = &cube.temperature {
        write_series(t, &dir.join("temperature.csv"))?;
    }
    Ok(())
}

/// Read and validate a site directory.
pub fn read_sitecube(dir: &Path) -> Result<SiteCube, SiteCubeError> {
    let meta_text = fs::read_to_string(dir.join("meta.json"))?;
    let file: MetaFile =
        serde_json::from_str(&meta_text).map_err(|e| violation(format!("meta.json: {e}")))?;
    if file.format_version != FORMAT_VERSION {
        return Err(violation(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            file.format_version
        )));
    }
    let location = GeoPoint::new(file.location.lat(), file.location.lon())
        .map_err(|e| violation(format!("meta.json: {e}")))?;
    let meta = SiteMeta {
        site_id: file.site_id,
        location,
        utc_offset_minutes: file.utc_offset_minutes,
        window_edge: file.window_edge,
        channel_ids: file.channel_ids,
        cadence_seconds: file.cadence_seconds,
        lat_of: file.lat_of,
        lon_of: file.lon_of,
    };

    let raw = fs::read(dir.join("frames.bin"))?;
    if raw.len() < 5 || &raw[..4] != FRAMES_MAGIC {
        return Err(violation("frames.bin: bad magic"));
    }
    if raw[4] != FRAMES_VERSION {
        return Err(violation(format!("frames.bin: unsupported version {}", raw[4])));
    }
    let payload = &raw[5..];
    if payload.len() % 4 != 0 {
        return Err(violation("frames.bin: truncated payload"));
    }
    let frames: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let raw_ts = fs::read(dir.join("timestamps.bin"))?;
    if raw_ts.len() % 8 != 0 {
        return Err(violation("timestamps.bin: truncated payload"));
    }
    let timestamps: Vec<i64> = raw_ts
        .chunks_exact(8)
        .map(|b| i64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();

    let power_path = dir.join("power.csv");
    let temp_path = dir.join("temperature.csv");
    let power = if power_path.exists() {
        Some(read_series(&power_path, SeriesKind::PowerKw)?)
    } else {
        None
    };
    let temperature = if temp_path.exists() {
        Some(read_series(&temp_path, SeriesKind::TemperatureC)?)
    } else {
        None
    };

    let cube = SiteCube {
        meta,
        timestamps,
        frames,
        power,
        temperature,
    };
    ensure_valid(&cube)?;
    Ok(cube)
}

/// Local calendar date of a UTC timestamp at a fixed clock offset.
pub fn local_date(timestamp: i64, utc_offset_minutes: i32) -> NaiveDate {
    let local = timestamp + i64::from(utc_offset_minutes) * 60;
    DateTime::<Utc>::from_timestamp(local, 0)
        .expect("timestamp in chrono range")
        .date_naive()
}

/// Local clock hour (0..24) of a UTC timestamp at a fixed clock offset.
pub fn local_hour(timestamp: i64, utc_offset_minutes: i32) -> u32 {
    let local = timestamp + i64::from(utc_offset_minutes) * 60;
    DateTime::<Utc>::from_timestamp(local, 0)
        .expect("timestamp in chrono range")
        .hour()
}

/// Local month (1..=12).
pub fn local_month(timestamp: i64, utc_offset_minutes: i32) -> u32 {
    local_date(timestamp, utc_offset_minutes).month()
}

/// Indices of timestamps whose local hour `h` satisfies `start_hour <= h < end_hour`.
pub fn daytime_slice(timestamps: &[i64], utc_offset_minutes: i32, start_hour: u32, end_hour: u32) -> Vec<usize> {
    debug_assert!(start_hour < end_hour && end_hour <= 24);
    timestamps
        .iter()
        .enumerate()
        .filter(|(_, &t)| {
            let h = local_hour(t, utc_offset_minutes);
            h >= start_hour && h < end_hour
        })
        .map(|(i, _)| i)
        .collect()
}

fn bucket_start(t: i64, target: i64) -> i64 {
    t.div_euclid(target) * target
}

/// Bucket a series into `target_seconds` windows aligned to the UTC epoch and average.
pub fn resample_series_mean(series: &ScalarSeries, target_seconds: u32) -> ScalarSeries {
    let target = i64::from(target_seconds);
    let mut out = ScalarSeries::new(series.kind);
    let mut i = 0;
    while i < series.len() {
        let start = bucket_start(series.timestamps[i], target);
        let mut sum = 0.0;
        let mut n = 0usize;
        while i < series.len() && bucket_start(series.timestamps[i], target) == start {
            sum += series.values[i];
            n += 1;
            i += 1;
        }
        out.timestamps.push(start);
        out.values.push(sum / n as f64);
    }
    out
}

/// Average frames into `target_seconds` buckets aligned to UTC epoch multiples.
///
/// Each output cell is the mean of the non-missing inputs in `[start, start + target)`;
/// all-missing cells stay NaN and empty buckets are omitted. Power and temperature
/// series are resampled with the same buckets.
pub fn resample_mean(cube: &SiteCube, target_seconds: u32) -> Result<SiteCube, SiteCubeError> {
    let cadence = cube.meta.cadence_seconds;
    if target_seconds == 0 || cadence == 0 || target_seconds % cadence != 0 {
        return Err(SiteCubeError::CadenceMismatch {
            cadence,
            target: target_seconds,
        });
    }
    let target = i64::from(target_seconds);
    let n = cube.frame_len();
    let mut timestamps = Vec::new();
    let mut frames = Vec::new();
    let mut sums = vec![0f64; n];
    let mut counts = vec![0u32; n];
    let mut i = 0;
    while i < cube.len() {
        let start = bucket_start(cube.timestamps[i], target);
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        while i < cube.len() && bucket_start(cube.timestamps[i], target) == start {
            for (k, &v) in cube.frame(i).iter().enumerate() {
                if !v.is_nan() {
                    sums[k] += f64::from(v);
                    counts[k] += 1;
                }
            }
            i += 1;
        }
        timestamps.push(start);
        frames.extend(sums.iter().zip(&counts).map(|(&s, &c)| {
            if c == 0 {
                f32::NAN
            } else {
                // mean of values in [0,1] stays in [0,1]; clamp guards f32 rounding
                ((s / f64::from(c)) as f32).clamp(0.0, 1.0)
            }
        }));
    }
    Ok(SiteCube {
        meta: SiteMeta {
            cadence_seconds: target_seconds,
            ..cube.meta.clone()
        },
        timestamps,
        frames,
        power: cube.power.as_ref().map(|s| resample_series_mean(s, target_seconds)),
        temperature: cube.temperature.as_ref().map(|s| resample_series_mean(s, target_seconds)),
    })
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Cube of edge `w` with 3 channels, filled from `fill(t, row, col, ch)`.
    pub fn cube_with(
        w: usize,
        timestamps: Vec<i64>,
        cadence: u32,
        fill: impl Fn(usize, usize, usize, usize) -> f32,
    ) -> SiteCube {
        let mut frames = Vec::new();
        for t in 0..timestamps.len() {
            for r in 0..w {
                for c in 0..w {
                    for ch in 0..3 {
                        frames.push(fill(t, r, c, ch));
                    }
                }
            }
        }
        let mut lat_of = Vec::new();
        let mut lon_of = Vec::new();
        for r in 0..w {
            for c in 0..w {
                lat_of.push(40.0 + r as f64 * 0.01);
                lon_of.push(-105.0 + c as f64 * 0.01);
            }
        }
        SiteCube {
            meta: SiteMeta {
                site_id: "test".into(),
                location: GeoPoint::new(40.0, -105.0).unwrap(),
                utc_offset_minutes: -300,
                window_edge: w,
                channel_ids: default_channel_ids(),
                cadence_seconds: cadence,
                lat_of,
                lon_of,
            },
            timestamps,
            frames,
            power: None,
            temperature: None,
        }
    }
}
