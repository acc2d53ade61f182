//! Next-step power from current power, next-step channels and current
//! temperature, with a name-keyed registry of power regressors and the
//! four-model comparison (persistence, regressor on current channels,
//! regressor on forecast channels, regressor on true next channels).

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ChannelTriple, DayKeyed, SequenceSample};
use crate::metrics::{self, ErrorMetric, EvalPoint, EvalReport, MetricsError, ReportSpec, ToleranceMode};
pub use crate::metrics::Period;
use crate::models::{ChannelModel, Container, ModelError, ModelKind};
use crate::sitecube::{self, ScalarSeries, SiteCube};
use crate::svr::{svr_fit, SvrModel, SvrSpec};

#[derive(Debug, Error)]
pub enum NowcastError {
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("missing history: {0}")]
    MissingHistory(String),
    #[error("no nowcaster for site '{0}'")]
    UnknownSite(String),
    #[error("evaluation index sets differ between models")]
    IndexSetMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// One supervised step: observations at `t` and the truth at `t + Δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct NowcastSample {
    pub site_id: String,
    pub utc_offset_minutes: i32,
    pub timestamp: i64,
    pub interval_seconds: u32,
    pub power_kw: f64,
    pub temperature_c: f64,
    /// Site-cell channels at `t`.
    pub channels_now: ChannelTriple,
    /// Site-cell channels at `t + Δ`.
    pub channels_next: ChannelTriple,
    pub power_next_kw: f64,
}

impl NowcastSample {
    pub fn target_timestamp(&self) -> i64 {
        self.timestamp + i64::from(self.interval_seconds)
    }
}

impl DayKeyed for NowcastSample {
    fn day(&self) -> chrono::NaiveDate {
        sitecube::local_date(self.timestamp, self.utc_offset_minutes)
    }
}

/// Regressor input: `(P_t, c01, c02, c03, T_t)`.
pub fn feature_vector(power_kw: f64, channels: ChannelTriple, temperature_c: f64) -> [f64; 5] {
    [power_kw, channels.0[0], channels.0[1], channels.0[2], temperature_c]
}

pub const FEATURE_NAMES: [&str; 5] = ["power_kw", "c01", "c02", "c03", "temperature_c"];

/// Solar-hours window (local, `[start, end)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolarHours {
    pub start_hour: u32,
    pub end_hour: u32,
}

impl Default for SolarHours {
    fn default() -> Self {
        Self {
            start_hour: 9,
            end_hour: 15,
        }
    }
}

fn in_hours(ts: i64, offset: i32, h: SolarHours) -> bool {
    let hour = sitecube::local_hour(ts, offset);
    hour >= h.start_hour && hour < h.end_hour
}

fn series_map(s: &ScalarSeries, dt: i64, what: &str) -> Result<HashMap<i64, f64>, NowcastError> {
    if let Some(t) = s.timestamps.iter().find(|t| t.rem_euclid(dt) != 0) {
        return Err(NowcastError::Alignment(format!("{what} timestamp {t} is off the {dt}s grid")));
    }
    Ok(s.timestamps.iter().copied().zip(s.values.iter().copied()).collect())
}

/// One sample per `t` where power, temperature and channels at `t` and power
/// and channels at `t + Δ` exist and are finite, with both times inside the
/// solar hours. Ordered by time.
pub fn build_nowcast_features(
    cube: &SiteCube,
    power: &ScalarSeries,
    temperature: &ScalarSeries,
    interval_seconds: u32,
    hours: SolarHours,
) -> Result<Vec<NowcastSample>, NowcastError> {
    let dt = i64::from(interval_seconds);
    if interval_seconds == 0 || cube.meta.cadence_seconds != interval_seconds {
        return Err(NowcastError::Alignment(format!(
            "cube cadence {}s vs interval {interval_seconds}s",
            cube.meta.cadence_seconds
        )));
    }
    if let Some(t) = cube.timestamps.iter().find(|t| t.rem_euclid(dt) != 0) {
        return Err(NowcastError::Alignment(format!("frame timestamp {t} is off the {dt}s grid")));
    }
    let p = series_map(power, dt, "power")?;
    let temp = series_map(temperature, dt, "temperature")?;
    let offset = cube.meta.utc_offset_minutes;
    let center = |i: usize| -> Option<ChannelTriple> {
        let v = cube.center_values(i);
        v.iter().all(|x| x.is_finite()).then(|| ChannelTriple::from_f32(&v))
    };
    let mut out = Vec::new();
    for (i, &t) in cube.timestamps.iter().enumerate() {
        let next_t = t + dt;
        if !in_hours(t, offset, hours) || !in_hours(next_t, offset, hours) {
            continue;
        }
        let Some(j) = cube.index_of(next_t) else { continue };
        let (Some(now), Some(next)) = (center(i), center(j)) else { continue };
        let (Some(&pt), Some(&tt), Some(&pn)) = (p.get(&t), temp.get(&t), p.get(&next_t)) else {
            continue;
        };
        if !(pt.is_finite() && tt.is_finite() && pn.is_finite()) {
            continue;
        }
        out.push(NowcastSample {
            site_id: cube.meta.site_id.clone(),
            utc_offset_minutes: offset,
            timestamp: t,
            interval_seconds,
            power_kw: pt,
            temperature_c: tt,
            channels_now: now,
            channels_next: next,
            power_next_kw: pn,
        });
    }
    Ok(out)
}

/// A fitted next-step power regressor over [`feature_vector`] inputs.
pub trait PowerRegressor: Send + Sync + std::fmt::Debug {
    fn label(&self) -> &'static str;
    fn predict(&self, features: &[f64]) -> Result<f64, ModelError>;
    fn to_container(&self) -> Container;
}

impl PowerRegressor for SvrModel {
    fn label(&self) -> &'static str {
        "svr"
    }

    fn predict(&self, features: &[f64]) -> Result<f64, ModelError> {
        SvrModel::predict(self, features)
    }

    fn to_container(&self) -> Container {
        SvrModel::to_container(self)
    }
}

pub trait PowerTrainer: Send + Sync {
    fn name(&self) -> &'static str;
    fn fit(&self, x: &[Vec<f64>], y: &[f64]) -> Result<Box<dyn PowerRegressor>, ModelError>;
}

pub struct SvrTrainer {
    pub spec: SvrSpec,
}

impl PowerTrainer for SvrTrainer {
    fn name(&self) -> &'static str {
        "svr"
    }

    fn fit(&self, x: &[Vec<f64>], y: &[f64]) -> Result<Box<dyn PowerRegressor>, ModelError> {
        Ok(Box::new(svr_fit(x, y, &self.spec)?.0))
    }
}

/// Name-keyed power trainers, selected at runtime.
pub struct PowerRegistry {
    trainers: BTreeMap<&'static str, Box<dyn PowerTrainer>>,
}

impl PowerRegistry {
    pub fn empty() -> Self {
        Self {
            trainers: BTreeMap::new(),
        }
    }

    pub fn with_defaults(svr: SvrSpec) -> Self {
        let mut r = Self::empty();
        r.register(Box::new(SvrTrainer { spec: svr }));
        r
    }

    pub fn register(&mut self, t: Box<dyn PowerTrainer>) {
        self.trainers.insert(t.name(), t);
    }

    pub fn get(&self, name: &str) -> Result<&dyn PowerTrainer, ModelError> {
        self.trainers
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| ModelError::UnknownModel(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.trainers.keys().copied()
    }
}

pub fn power_regressor_from_container(c: &Container) -> Result<Box<dyn PowerRegressor>, ModelError> {
    match c.kind {
        ModelKind::Svr => Ok(Box::new(SvrModel::from_container(c)?)),
        k => Err(ModelError::FormatViolation(format!(
            "container holds a {} channel model, not a power regressor",
            k.name()
        ))),
    }
}

/// Which channels the regressor sees at train time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSource {
    /// Ground truth at `t + Δ` (the deployed protocol).
    Next,
    /// Observed at `t` (ablation).
    Current,
}

/// Fit one site's regressor on `(P_t, C, T_t) -> P_{t+Δ}`.
pub fn train_nowcaster(
    samples: &[NowcastSample],
    trainer: &dyn PowerTrainer,
    source: ChannelSource,
) -> Result<Box<dyn PowerRegressor>, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let x: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let c = match source {
                ChannelSource::Next => s.channels_next,
                ChannelSource::Current => s.channels_now,
            };
            feature_vector(s.power_kw, c, s.temperature_c).to_vec()
        })
        .collect();
    let y: Vec<f64> = samples.iter().map(|s| s.power_next_kw).collect();
    trainer.fit(&x, &y)
}

/// Regressor output at the given channels, floored at 0 kW.
pub fn predict_power(model: &dyn PowerRegressor, sample: &NowcastSample, channels: ChannelTriple) -> Result<f64, ModelError> {
    Ok(model.predict(&feature_vector(sample.power_kw, channels, sample.temperature_c))?.max(0.0))
}

/// Forecast `P_{t+Δ}` with channels supplied by a frozen channel model
/// applied to `history` (the sequence whose target is `t + Δ`).
pub fn forecast_step(
    model: &dyn PowerRegressor,
    channel_model: &dyn ChannelModel,
    history: &SequenceSample,
    sample: &NowcastSample,
) -> Result<f64, NowcastError> {
    if history.site_id != sample.site_id || history.target_timestamp != sample.target_timestamp() {
        return Err(NowcastError::Alignment(format!(
            "history for {} at {} does not end at {} {}",
            history.site_id,
            history.target_timestamp,
            sample.site_id,
            sample.target_timestamp()
        )));
    }
    if history.steps < channel_model.steps() {
        return Err(NowcastError::MissingHistory(format!(
            "{} needs {} frames, have {}",
            channel_model.label(),
            channel_model.steps(),
            history.steps
        )));
    }
    let c = channel_model.predict(history)?;
    Ok(predict_power(model, sample, c)?)
}

/// Names of the four compared predictors, in report order.
pub const PERSISTENCE: &str = "persistence";
pub const SVR_CURRENT: &str = "svr_current";
pub const SVR_FORECAST: &str = "svr_forecast";
pub const SVR_TRUTH: &str = "svr_truth";

/// Predictions of the four models on one evaluation set, plus the report.
#[derive(Debug, Clone)]
pub struct FourWayResult {
    pub samples: Vec<NowcastSample>,
    pub predictions: BTreeMap<String, Vec<f64>>,
    pub report: EvalReport,
}

/// Evaluate persistence, the per-site regressor on current channels, on
/// forecast channels and on true next channels over the same samples.
///
/// Samples without a history ending at their target time are skipped for all
/// four models alike. Tolerance is the percent change of power; skill is by
/// MAPE with a per-site floor of 1% of the site's mean power over `samples`.
pub fn compare_four_models(
    samples: &[NowcastSample],
    histories: &[SequenceSample],
    nowcasters: &BTreeMap<String, Box<dyn PowerRegressor>>,
    channel_model: &dyn ChannelModel,
    deltas: &[f64],
    period: Period,
) -> Result<FourWayResult, NowcastError> {
    let by_key: HashMap<(&str, i64), &SequenceSample> =
        histories.iter().map(|h| ((h.site_id.as_str(), h.target_timestamp), h)).collect();
    let mut kept = Vec::new();
    let mut hist = Vec::new();
    for s in samples {
        if !period.contains(s.timestamp, s.utc_offset_minutes) {
            continue;
        }
        if let Some(h) = by_key.get(&(s.site_id.as_str(), s.target_timestamp())) {
            kept.push(s.clone());
            hist.push((*h).clone());
        }
    }
    let forecast_channels = channel_model.predict_many(&hist)?;
    let mut preds: BTreeMap<String, Vec<f64>> = [PERSISTENCE, SVR_CURRENT, SVR_FORECAST, SVR_TRUTH]
        .into_iter()
        .map(|m| (m.to_string(), Vec::with_capacity(kept.len())))
        .collect();
    for (i, s) in kept.iter().enumerate() {
        let reg = nowcasters
            .get(&s.site_id)
            .ok_or_else(|| NowcastError::UnknownSite(s.site_id.clone()))?
            .as_ref();
        let push = |p: &mut BTreeMap<String, Vec<f64>>, m: &str, v: f64| p.get_mut(m).expect("model key").push(v);
        push(&mut preds, PERSISTENCE, s.power_kw);
        push(&mut preds, SVR_CURRENT, predict_power(reg, s, s.channels_now)?);
        push(&mut preds, SVR_FORECAST, predict_power(reg, s, forecast_channels[i])?);
        push(&mut preds, SVR_TRUTH, predict_power(reg, s, s.channels_next)?);
    }
    if preds.values().any(|v| v.len() != kept.len()) {
        return Err(NowcastError::IndexSetMismatch);
    }
    let points: Vec<EvalPoint> = kept
        .iter()
        .map(|s| EvalPoint {
            site_id: s.site_id.clone(),
            prev: s.power_kw,
            next: s.power_next_kw,
            actual: vec![s.power_next_kw],
        })
        .collect();
    let mut per_site: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in &kept {
        per_site.entry(s.site_id.clone()).or_default().push(s.power_next_kw);
    }
    let spec = ReportSpec {
        deltas: deltas.to_vec(),
        mode: ToleranceMode::Percent,
        skill_metric: ErrorMetric::Mape,
        baseline: PERSISTENCE.to_string(),
        period: period.tag().to_string(),
        mape_floor: per_site.iter().map(|(k, v)| (k.clone(), metrics::default_mape_floor(v))).collect(),
    };
    let wrapped: BTreeMap<String, Vec<Vec<f64>>> =
        preds.iter().map(|(k, v)| (k.clone(), v.iter().map(|&x| vec![x]).collect())).collect();
    let report = metrics::tolerance_report(&points, &wrapped, &spec)?;
    Ok(FourWayResult {
        samples: kept,
        predictions: preds,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Persistence, TruthLookup};
    use crate::sitecube::{testutil, SeriesKind};

    fn series(kind: SeriesKind, ts: &[i64], v: &[f64]) -> ScalarSeries {
        ScalarSeries {
            kind,
            timestamps: ts.to_vec(),
            values: v.to_vec(),
        }
    }

    /// Five 3x3 frames from 10:00 local at 15 minutes.
    fn day_cube() -> SiteCube {
        let mut c = testutil::cube_with(3, (0..5).map(|i| 15 * 3600 + i * 900).collect(), 900, |t, r, c, ch| {
            0.1 + 0.01 * ((t * 7 + r + c) % 5 + ch) as f32
        });
        c.meta.site_id = "a".into();
        c
    }

    #[test]
    fn aligned_day_gives_one_fewer_sample() {
        let cube = day_cube();
        let p = series(SeriesKind::PowerKw, &cube.timestamps, &[10.0, 11.0, 12.0, 13.0, 14.0]);
        let t = series(SeriesKind::TemperatureC, &cube.timestamps, &[20.0; 5]);
        let s = build_nowcast_features(&cube, &p, &t, 900, SolarHours::default()).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0].power_next_kw, 11.0);
        assert_eq!(
            feature_vector(s[0].power_kw, s[0].channels_next, s[0].temperature_c),
            [10.0, s[0].channels_next.0[0], s[0].channels_next.0[1], s[0].channels_next.0[2], 20.0]
        );
        let mut t2 = t.clone();
        t2.timestamps.remove(2);
        t2.values.remove(2);
        assert_eq!(build_nowcast_features(&cube, &p, &t2, 900, SolarHours::default()).unwrap().len(), 3);
        let mut off = p.clone();
        off.timestamps[0] += 7;
        assert!(matches!(
            build_nowcast_features(&cube, &off, &t, 900, SolarHours::default()),
            Err(NowcastError::Alignment(_))
        ));
    }

    #[test]
    fn constant_power_site() {
        let samples: Vec<NowcastSample> = (0..20)
            .map(|i| NowcastSample {
                site_id: "a".into(),
                utc_offset_minutes: 0,
                timestamp: i * 900,
                interval_seconds: 900,
                power_kw: 42.0,
                temperature_c: 20.0 + i as f64 * 0.1,
                channels_now: ChannelTriple::new(0.1 * (i % 3) as f64, 0.2, 0.3),
                channels_next: ChannelTriple::new(0.1 * (i % 4) as f64, 0.2, 0.3),
                power_next_kw: 42.0,
            })
            .collect();
        let reg = PowerRegistry::with_defaults(SvrSpec::default());
        let m = train_nowcaster(&samples, reg.get("svr").unwrap(), ChannelSource::Next).unwrap();
        for s in &samples {
            assert_eq!(predict_power(m.as_ref(), s, s.channels_next).unwrap(), 42.0);
        }
        assert!(matches!(reg.get("ridge"), Err(ModelError::UnknownModel(_))));
        assert!(matches!(
            train_nowcaster(&[], reg.get("svr").unwrap(), ChannelSource::Next),
            Err(ModelError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn negative_predictions_are_floored() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0, 0.0, 0.0, 0.0]).collect();
        let y: Vec<f64> = (0..10).map(|i| -5.0 - i as f64).collect();
        let m = SvrTrainer {
            spec: SvrSpec::default(),
        }
        .fit(&x, &y)
        .unwrap();
        let s = NowcastSample {
            site_id: "a".into(),
            utc_offset_minutes: 0,
            timestamp: 0,
            interval_seconds: 900,
            power_kw: 3.0,
            temperature_c: 0.0,
            channels_now: ChannelTriple::new(0.0, 0.0, 0.0),
            channels_next: ChannelTriple::new(0.0, 0.0, 0.0),
            power_next_kw: 0.0,
        };
        assert!(m.predict(&[3.0, 0.0, 0.0, 0.0, 0.0]).unwrap() < 0.0);
        assert_eq!(predict_power(m.as_ref(), &s, s.channels_now).unwrap(), 0.0);
    }

    #[test]
    fn forecast_identities() {
        let cube = day_cube();
        let p = series(SeriesKind::PowerKw, &cube.timestamps, &[10.0, 12.0, 11.0, 15.0, 14.0]);
        let t = series(SeriesKind::TemperatureC, &cube.timestamps, &[20.0, 21.0, 22.0, 23.0, 24.0]);
        let samples = build_nowcast_features(&cube, &p, &t, 900, SolarHours::default()).unwrap();
        let cfg = crate::dataset::SequenceConfig {
            steps: 2,
            interval_seconds: 900,
            day_start_hour: 9,
            day_end_hour: 17,
        };
        let seqs = crate::dataset::build_sequences(&cube, &cfg).unwrap();
        let reg = SvrTrainer {
            spec: SvrSpec::default(),
        };
        let m = train_nowcaster(&samples, &reg, ChannelSource::Next).unwrap();
        let mut truth = TruthLookup::new();
        for q in &seqs {
            truth.insert(&q.site_id, q.target_timestamp, q.target);
        }
        for h in &seqs {
            let s = samples.iter().find(|s| s.target_timestamp() == h.target_timestamp).unwrap();
            let pers = forecast_step(m.as_ref(), &Persistence, h, s).unwrap();
            assert_eq!(pers.to_bits(), predict_power(m.as_ref(), s, s.channels_now).unwrap().to_bits());
            let tr = forecast_step(m.as_ref(), &truth, h, s).unwrap();
            assert_eq!(tr.to_bits(), predict_power(m.as_ref(), s, s.channels_next).unwrap().to_bits());
        }
        let short = seqs[0].truncate_history(1);
        let s = samples.iter().find(|s| s.target_timestamp() == short.target_timestamp).unwrap();
        assert!(forecast_step(m.as_ref(), &Persistence, &short, s).is_ok());
    }
}
