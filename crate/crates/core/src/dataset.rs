//! Supervised sequence samples from site cubes, day-disjoint fold splits and
//! tolerance filtering of evaluation points.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo;
use crate::sitecube::{self, SiteCube, FRAMES_MAGIC};

pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.1;
const SAMPLES_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("window edge must be at least 1")]
    WindowTooSmall,
    #[error("sequence length must be at least 1")]
    NoSteps,
    #[error("cube cadence {cadence}s does not match the sequence interval {interval}s")]
    CadenceMismatch { cadence: u32, interval: u32 },
    #[error("expected 3 channels, cube has {0}")]
    ChannelCount(usize),
    #[error("need at least {folds} distinct days, found {days}")]
    NotEnoughDays { days: usize, folds: usize },
    #[error("fold count must be at least 2")]
    TooFewFolds,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format violation: {0}")]
    FormatViolation(String),
}

/// The three visible-channel reflectances at one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelTriple(pub [f64; 3]);

impl ChannelTriple {
    pub fn new(c01: f64, c02: f64, c03: f64) -> Self {
        Self([c01, c02, c03])
    }

    pub fn c01(&self) -> f64 {
        self.0[0]
    }

    pub fn channel(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn from_f32(v: &[f32]) -> Self {
        Self([f64::from(v[0]), f64::from(v[1]), f64::from(v[2])])
    }
}

/// `steps` consecutive windows plus the next-step channels at the site cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub site_id: String,
    pub utc_offset_minutes: i32,
    pub steps: usize,
    pub window: usize,
    /// `[step][row][col][channel]`, oldest frame first.
    pub input: Vec<f32>,
    pub target: ChannelTriple,
    pub target_timestamp: i64,
}

impl SequenceSample {
    pub fn frame_len(&self) -> usize {
        self.window * self.window * 3
    }

    pub fn frame(&self, step: usize) -> &[f32] {
        let n = self.frame_len();
        &self.input[step * n..(step + 1) * n]
    }

    pub fn last_frame(&self) -> &[f32] {
        self.frame(self.steps - 1)
    }

    /// Site-cell channels of the most recent input frame.
    pub fn last_center(&self) -> ChannelTriple {
        let mid = geo::window_center_offset(self.window);
        let off = (mid * self.window + mid) * 3;
        ChannelTriple::from_f32(&self.last_frame()[off..off + 3])
    }

    /// One channel of the most recent frame, flattened row-major.
    pub fn last_frame_channel(&self, channel: usize) -> Vec<f32> {
        self.last_frame().iter().skip(channel).step_by(3).copied().collect()
    }

    /// Keep only the last `steps` frames.
    pub fn truncate_history(&self, steps: usize) -> SequenceSample {
        assert!(steps >= 1 && steps <= self.steps);
        let n = self.frame_len();
        SequenceSample {
            steps,
            input: self.input[(self.steps - steps) * n..].to_vec(),
            site_id: self.site_id.clone(),
            ..*self
        }
    }

    /// Same sample seen through a smaller centered window.
    pub fn crop(&self, w: usize) -> Result<SequenceSample, geo::GeoError> {
        let mid = geo::window_center_offset(self.window);
        let win = geo::extract_window(self.window, self.window, (mid, mid), w)?;
        let mut input = Vec::with_capacity(self.steps * w * w * 3);
        for s in 0..self.steps {
            let f = self.frame(s);
            for r in 0..w {
                let start = ((win.row_start + r) * self.window + win.col_start) * 3;
                input.extend_from_slice(&f[start..start + w * 3]);
            }
        }
        Ok(SequenceSample {
            window: w,
            input,
            site_id: self.site_id.clone(),
            ..*self
        })
    }
}

/// Anything that belongs to one site-local calendar day.
pub trait DayKeyed {
    fn day(&self) -> NaiveDate;
}

impl DayKeyed for SequenceSample {
    fn day(&self) -> NaiveDate {
        sitecube::local_date(self.target_timestamp, self.utc_offset_minutes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub steps: usize,
    pub interval_seconds: u32,
    pub day_start_hour: u32,
    pub day_end_hour: u32,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            interval_seconds: 900,
            day_start_hour: 9,
            day_end_hour: 17,
        }
    }
}

/// Per-frame eligibility: inside the daytime window and free of NaN.
fn usable_frames(cube: &SiteCube, cfg: &SequenceConfig) -> Vec<bool> {
    let mut ok = vec![false; cube.len()];
    for i in sitecube::daytime_slice(
        &cube.timestamps,
        cube.meta.utc_offset_minutes,
        cfg.day_start_hour,
        cfg.day_end_hour,
    ) {
        ok[i] = cube.frame(i).iter().all(|v| !v.is_nan());
    }
    ok
}

/// Emit one sample per timestamp `t` whose history `t-(T-1)Δ ..= t` and target `t+Δ`
/// all exist, are NaN-free and fall inside the daytime window.
pub fn build_sequences(cube: &SiteCube, cfg: &SequenceConfig) -> Result<Vec<SequenceSample>, DatasetError> {
    let w = cube.meta.window_edge;
    if w < 1 {
        return Err(DatasetError::WindowTooSmall);
    }
    if cfg.steps < 1 {
        return Err(DatasetError::NoSteps);
    }
    if cube.channels() != 3 {
        return Err(DatasetError::ChannelCount(cube.channels()));
    }
    if cube.meta.cadence_seconds != cfg.interval_seconds {
        return Err(DatasetError::CadenceMismatch {
            cadence: cube.meta.cadence_seconds,
            interval: cfg.interval_seconds,
        });
    }
    let ok = usable_frames(cube, cfg);
    let dt = i64::from(cfg.interval_seconds);
    let mid = geo::window_center_offset(w);
    let mut out = Vec::new();
    'outer: for (i, &t) in cube.timestamps.iter().enumerate() {
        let mut idx = Vec::with_capacity(cfg.steps);
        for k in (0..cfg.steps).rev() {
            let ts = t - k as i64 * dt;
            match cube.index_of(ts) {
                Some(j) if ok[j] => idx.push(j),
                _ => continue 'outer,
            }
        }
        let next = match cube.index_of(t + dt) {
            Some(j) if ok[j] => j,
            _ => continue,
        };
        debug_assert_eq!(*idx.last().unwrap(), i);
        let mut input = Vec::with_capacity(cfg.steps * cube.frame_len());
        for j in idx {
            input.extend_from_slice(cube.frame(j));
        }
        let target = ChannelTriple::new(
            f64::from(cube.value(next, mid, mid, 0)),
            f64::from(cube.value(next, mid, mid, 1)),
            f64::from(cube.value(next, mid, mid, 2)),
        );
        out.push(SequenceSample {
            site_id: cube.meta.site_id.clone(),
            utc_offset_minutes: cube.meta.utc_offset_minutes,
            steps: cfg.steps,
            window: w,
            input,
            target,
            target_timestamp: t + dt,
        });
    }
    Ok(out)
}

/// Train/validation/test days of one fold.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldDays {
    pub train: BTreeSet<NaiveDate>,
    pub validation: BTreeSet<NaiveDate>,
    pub test: BTreeSet<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_count: usize,
    pub fold_of_day: BTreeMap<NaiveDate, usize>,
    pub folds: Vec<FoldDays>,
}

/// Borrowed train/validation/test partition of a sample list.
pub struct Partition<'a, S> {
    pub train: Vec<&'a S>,
    pub validation: Vec<&'a S>,
    pub test: Vec<&'a S>,
}

impl FoldSplit {
    pub fn partition<'a, S: DayKeyed>(&self, fold: usize, items: &'a [S]) -> Partition<'a, S> {
        let days = &self.folds[fold];
        let mut p = Partition {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        for it in items {
            let d = it.day();
            if days.test.contains(&d) {
                p.test.push(it);
            } else if days.validation.contains(&d) {
                p.validation.push(it);
            } else if days.train.contains(&d) {
                p.train.push(it);
            }
        }
        p
    }
}

/// Deal shuffled days round-robin into folds; carve validation days from the rest.
pub fn split_days(
    days: impl IntoIterator<Item = NaiveDate>,
    fold_count: usize,
    seed: u64,
    validation_fraction: f64,
) -> Result<FoldSplit, DatasetError> {
    if fold_count < 2 {
        return Err(DatasetError::TooFewFolds);
    }
    let mut days: Vec<NaiveDate> = days.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    if days.len() < fold_count {
        return Err(DatasetError::NotEnoughDays {
            days: days.len(),
            folds: fold_count,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    days.shuffle(&mut rng);
    let fold_of_day: BTreeMap<NaiveDate, usize> =
        days.iter().enumerate().map(|(i, &d)| (d, i % fold_count)).collect();

    let mut folds = Vec::with_capacity(fold_count);
    for k in 0..fold_count {
        let test: BTreeSet<NaiveDate> =
            fold_of_day.iter().filter(|(_, &f)| f == k).map(|(&d, _)| d).collect();
        let mut rest: Vec<NaiveDate> =
            fold_of_day.iter().filter(|(_, &f)| f != k).map(|(&d, _)| d).collect();
        let mut fold_rng = ChaCha8Rng::seed_from_u64(seed);
        fold_rng.set_stream(k as u64 + 1);
        rest.shuffle(&mut fold_rng);
        let n_val = ((rest.len() as f64 * validation_fraction).round() as usize).max(1).min(rest.len());
        let validation: BTreeSet<NaiveDate> = rest[..n_val].iter().copied().collect();
        let train: BTreeSet<NaiveDate> = rest[n_val..].iter().copied().collect();
        folds.push(FoldDays {
            train,
            validation,
            test,
        });
    }
    Ok(FoldSplit {
        fold_count,
        fold_of_day,
        folds,
    })
}

pub fn split_by_day<S: DayKeyed>(samples: &[S], fold_count: usize, seed: u64) -> Result<FoldSplit, DatasetError> {
    split_days(samples.iter().map(DayKeyed::day), fold_count, seed, DEFAULT_VALIDATION_FRACTION)
}

/// Whether the change from `prev` to `next` reaches the tolerance. `delta == 0` keeps all.
pub fn exceeds_tolerance(prev: f64, next: f64, delta: f64) -> bool {
    delta == 0.0 || (prev - next).abs() >= delta
}

/// Indices `i >= 1` with `|values[i-1] - values[i]| >= delta`.
pub fn tolerance_filter(values: &[f64], delta: f64) -> Vec<usize> {
    (1..values.len())
        .filter(|&i| exceeds_tolerance(values[i - 1], values[i], delta))
        .collect()
}

/// Relative change in percent between consecutive values; an increase from zero counts
/// as infinite, zero to zero as no change.
pub fn percent_change(prev: f64, next: f64) -> f64 {
    let diff = (next - prev).abs();
    if diff == 0.0 {
        0.0
    } else if prev == 0.0 {
        f64::INFINITY
    } else {
        diff / prev.abs() * 100.0
    }
}

/// Tolerance in percent of the previous value, used for power series.
pub fn exceeds_percent_tolerance(prev: f64, next: f64, delta_percent: f64) -> bool {
    delta_percent == 0.0 || percent_change(prev, next) >= delta_percent
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplesIndex {
    format_version: u32,
    steps: usize,
    window: usize,
    records: Vec<SampleRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    site_id: String,
    utc_offset_minutes: i32,
    target_timestamp: i64,
    target: [f32; 3],
}

/// Cache samples as `samples.bin` (frames encoding) plus a `samples.json` index.
pub fn write_samples(samples: &[SequenceSample], dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    let (steps, window) = samples.first().map(|s| (s.steps, s.window)).unwrap_or((0, 0));
    let mut bin = Vec::new();
    bin.extend_from_slice(FRAMES_MAGIC);
    bin.push(SAMPLES_VERSION);
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        if s.steps != steps || s.window != window {
            return Err(DatasetError::FormatViolation("mixed sample shapes".into()));
        }
        bin.extend(s.input.iter().flat_map(|v| v.to_le_bytes()));
        records.push(SampleRecord {
            site_id: s.site_id.clone(),
            utc_offset_minutes: s.utc_offset_minutes,
            target_timestamp: s.target_timestamp,
            target: s.target.0.map(|v| v as f32),
        });
    }
    fs::write(dir.join("samples.bin"), bin)?;
    let index = SamplesIndex {
        format_version: sitecube::FORMAT_VERSION,
        steps,
        window,
        records,
    };
    let json = serde_json::to_string(&index).map_err(|e| DatasetError::FormatViolation(e.to_string()))?;
    fs::write(dir.join("samples.json"), json)?;
    Ok(())
}

pub fn read_samples(dir: &Path) -> Result<Vec<SequenceSample>, DatasetError> {
    let bad = |m: &str| DatasetError::FormatViolation(m.to_string());
    let index: SamplesIndex = serde_json::from_str(&fs::read_to_string(dir.join("samples.json"))?)
        .map_err(|e| DatasetError::FormatViolation(e.to_string()))?;
    if index.format_version != sitecube::FORMAT_VERSION {
        return Err(bad("unsupported samples format_version"));
    }
    let raw = fs::read(dir.join("samples.bin"))?;
    if raw.len() < 5 || &raw[..4] != FRAMES_MAGIC || raw[4] != SAMPLES_VERSION {
        return Err(bad("samples.bin: bad header"));
    }
    let per = index.steps * index.window * index.window * 3;
    let payload = &raw[5..];
    if payload.len() != per * index.records.len() * 4 {
        return Err(bad("samples.bin: payload length does not match index"));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(index
        .records
        .into_iter()
        .enumerate()
        .map(|(i, r)| SequenceSample {
            site_id: r.site_id,
            utc_offset_minutes: r.utc_offset_minutes,
            steps: index.steps,
            window: index.window,
            input: values[i * per..(i + 1) * per].to_vec(),
            target: ChannelTriple(r.target.map(f64::from)),
            target_timestamp: r.target_timestamp,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sitecube::testutil::cube_with;

    // 2019-05-01T14:00:00Z, 09:00 local at -300
    const T0: i64 = 1_556_719_200;

    fn steps(n: usize) -> Vec<i64> {
        (0..n as i64).map(|i| T0 + i * 900).collect()
    }

    fn cfg(t: usize) -> SequenceConfig {
        SequenceConfig {
            steps: t,
            ..Default::default()
        }
    }

    #[test]
    fn six_frames_four_steps_one_sample() {
        let cube = cube_with(3, steps(6), 900, |t, _, _, _| t as f32 / 10.0);
        let s = build_sequences(&cube, &cfg(4)).unwrap();
        // t = 3 and t = 4 both have 4 frames of history and a next frame
        assert_eq!(s.len(), 2);
        let cube5 = cube_with(3, steps(5), 900, |t, _, _, _| t as f32 / 10.0);
        let s5 = build_sequences(&cube5, &cfg(4)).unwrap();
        assert_eq!(s5.len(), 1);
        assert_eq!(s5[0].target, ChannelTriple::new(0.4f32 as f64, 0.4f32 as f64, 0.4f32 as f64));
        assert_eq!(s5[0].target_timestamp, T0 + 4 * 900);
    }

    #[test]
    fn gap_breaks_sequences() {
        let mut ts = steps(8);
        ts.remove(3);
        let cube = cube_with(2, ts, 900, |_, _, _, _| 0.5);
        let s = build_sequences(&cube, &cfg(4)).unwrap();
        // any history/target window touching the missing bucket is skipped
        for x in &s {
            let first = x.target_timestamp - 4 * 900;
            assert!(first > T0 + 3 * 900 || x.target_timestamp < T0 + 3 * 900);
        }
        assert_eq!(s.len(), 0);
    }

    #[test]
    fn nan_frames_and_night_are_skipped() {
        let cube = cube_with(2, steps(6), 900, |t, _, _, _| if t == 5 { f32::NAN } else { 0.5 });
        assert_eq!(build_sequences(&cube, &cfg(4)).unwrap().len(), 1);
        // starting at 16:15 local: targets beyond 17:00 are dropped
        let late: Vec<i64> = (0..6).map(|i| T0 + 7 * 3600 + 15 * 60 + i * 900).collect();
        let cube = cube_with(2, late, 900, |_, _, _, _| 0.5);
        assert_eq!(build_sequences(&cube, &cfg(1)).unwrap().len(), 2);
    }

    #[test]
    fn default_shape_and_center() {
        let cube = cube_with(10, steps(6), 900, |t, r, c, ch| {
            if r == 5 && c == 5 {
                0.1 * ch as f32 + 0.01 * t as f32
            } else {
                0.9
            }
        });
        let s = build_sequences(&cube, &cfg(4)).unwrap();
        assert_eq!(s[0].input.len(), 4 * 10 * 10 * 3);
        let lc = s[0].last_center();
        assert!((lc.channel(1) - (0.1 + 0.03f64)).abs() < 1e-6);
        assert!((s[0].target.channel(2) - 0.24).abs() < 1e-6);
    }

    #[test]
    fn build_errors() {
        let cube = cube_with(2, steps(3), 900, |_, _, _, _| 0.5);
        assert!(matches!(build_sequences(&cube, &cfg(0)), Err(DatasetError::NoSteps)));
        let c = SequenceConfig {
            interval_seconds: 1800,
            ..cfg(1)
        };
        assert!(matches!(build_sequences(&cube, &c), Err(DatasetError::CadenceMismatch { .. })));
    }

    fn days(n: u32) -> Vec<NaiveDate> {
        (0..n).map(|i| NaiveDate::from_ymd_opt(2019, 5, 1).unwrap() + chrono::Days::new(i as u64)).collect()
    }

    #[test]
    fn ten_days_five_folds() {
        let split = split_days(days(10), 5, 7, 0.1).unwrap();
        for f in &split.folds {
            assert_eq!(f.test.len(), 2);
            assert_eq!(f.validation.len(), 1);
            assert_eq!(f.train.len(), 7);
            assert!(f.train.is_disjoint(&f.test));
            assert!(f.validation.is_disjoint(&f.test) && f.validation.is_disjoint(&f.train));
        }
        let all_test: BTreeSet<_> = split.folds.iter().flat_map(|f| f.test.iter().copied()).collect();
        assert_eq!(all_test.len(), 10);
    }

    #[test]
    fn split_is_seed_deterministic() {
        let a = split_days(days(20), 5, 42, 0.1).unwrap();
        let b = split_days(days(20), 5, 42, 0.1).unwrap();
        assert_eq!(a, b);
        let c = split_days(days(20), 5, 43, 0.1).unwrap();
        assert_ne!(a.fold_of_day, c.fold_of_day);
    }

    #[test]
    fn full_year_ratio() {
        // 365 days with 5 folds: 73 test days, 29 validation, 263 train
        let all: Vec<NaiveDate> = (0..365)
            .map(|i| NaiveDate::from_ymd_opt(2019, 1, 1).unwrap() + chrono::Days::new(i))
            .collect();
        let split = split_days(all, 5, 1, 0.1).unwrap();
        let f = &split.folds[0];
        assert_eq!(f.test.len(), 73);
        assert_eq!(f.validation.len() + f.train.len(), 292);
        assert!((f.validation.len() as i64 - 30).abs() <= 1);
    }

    #[test]
    fn not_enough_days() {
        assert!(matches!(split_days(days(3), 5, 0, 0.1), Err(DatasetError::NotEnoughDays { days: 3, folds: 5 })));
        assert!(matches!(split_days(days(3), 1, 0, 0.1), Err(DatasetError::TooFewFolds)));
    }

    #[test]
    fn tolerance_cases() {
        let v: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(tolerance_filter(&v, 0.0).len(), 99);
        assert_eq!(tolerance_filter(&[0.5, 0.5, 0.6], 0.05), vec![2]);
        assert!(tolerance_filter(&[0.5, 0.52, 0.51], 0.5).is_empty());
        assert_eq!(tolerance_filter(&[0.5, 0.5], 0.0), vec![1]);
    }

    #[test]
    fn percent_tolerance() {
        assert!(exceeds_percent_tolerance(100.0, 105.0, 5.0));
        assert!(!exceeds_percent_tolerance(100.0, 104.0, 5.0));
        assert!(exceeds_percent_tolerance(0.0, 1.0, 10.0));
        assert!(!exceeds_percent_tolerance(0.0, 0.0, 1.0));
        assert!(exceeds_percent_tolerance(0.0, 0.0, 0.0));
    }

    #[test]
    fn sample_cache_round_trip() {
        let cube = cube_with(3, steps(7), 900, |t, r, c, ch| ((t + r + c + ch) % 10) as f32 / 10.0);
        let s = build_sequences(&cube, &cfg(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_samples(&s, dir.path()).unwrap();
        assert_eq!(read_samples(dir.path()).unwrap(), s);
    }

    #[test]
    fn crop_and_truncate() {
        let cube = cube_with(10, steps(6), 900, |t, r, c, _| ((t * 7 + r * 3 + c) % 10) as f32 / 10.0);
        let s = &build_sequences(&cube, &cfg(4)).unwrap()[0];
        let small = s.crop(3).unwrap();
        assert_eq!(small.last_center(), s.last_center());
        let one = s.truncate_history(1);
        assert_eq!(one.input, s.last_frame());
        assert_eq!(one.last_center(), s.last_center());
    }
}
