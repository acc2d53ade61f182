//! Error metrics, persistence-relative skill and tolerance-bucketed reports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{exceeds_percent_tolerance, exceeds_tolerance, ChannelTriple, SequenceSample};
use crate::sitecube;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} actual vs {1} predicted")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("every point fell below the MAPE floor")]
    EmptyAfterFloor,
    #[error("baseline error is zero")]
    ZeroBaseline,
    #[error("model '{0}' has predictions for {1} points, expected {2}")]
    Coverage(String, usize, usize),
    #[error("baseline model '{0}' missing from predictions")]
    MissingBaseline(String),
}

fn check(actual: &[f64], predicted: &[f64]) -> Result<(), MetricsError> {
    if actual.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch(actual.len(), predicted.len()));
    }
    if actual.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(())
}

pub fn mae(actual: &[f64], predicted: &[f64]) -> Result<f64, MetricsError> {
    check(actual, predicted)?;
    Ok(actual.iter().zip(predicted).map(|(a, p)| (a - p).abs()).sum::<f64>() / actual.len() as f64)
}

/// Mean of `|A - P| / |A|` in percent over points with `|A| >= floor`.
pub fn mape(actual: &[f64], predicted: &[f64], floor: f64) -> Result<f64, MetricsError> {
    check(actual, predicted)?;
    let (sum, n) = actual
        .iter()
        .zip(predicted)
        .filter(|(a, _)| a.abs() >= floor && **a != 0.0)
        .fold((0.0, 0usize), |(s, n), (a, p)| (s + (a - p).abs() / a.abs(), n + 1));
    if n == 0 {
        return Err(MetricsError::EmptyAfterFloor);
    }
    Ok(sum / n as f64 * 100.0)
}

/// Default MAPE floor: 1% of mean daytime power.
pub fn default_mape_floor(daytime_power: &[f64]) -> f64 {
    if daytime_power.is_empty() {
        return 0.0;
    }
    0.01 * daytime_power.iter().sum::<f64>() / daytime_power.len() as f64
}

/// `(1 - prediction / baseline) * 100`.
pub fn skill_score(prediction: f64, baseline: f64) -> Result<f64, MetricsError> {
    if baseline <= 0.0 {
        return Err(MetricsError::ZeroBaseline);
    }
    Ok((1.0 - prediction / baseline) * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorMetric {
    Mae,
    Mape,
}

/// How δ is compared with the change of the keyed series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToleranceMode {
    /// `|next - prev| >= δ` (channel reflectance).
    Absolute,
    /// change of at least δ percent of `prev` (power).
    Percent,
}

/// One evaluation index: the keyed transition the tolerance looks at plus the
/// actual values every model is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub site_id: String,
    pub prev: f64,
    pub next: f64,
    pub actual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSpec {
    pub deltas: Vec<f64>,
    pub mode: ToleranceMode,
    pub skill_metric: ErrorMetric,
    pub baseline: String,
    pub period: String,
    /// Per-site MAPE floor; missing sites use 0.
    pub mape_floor: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scope: String,
    pub model: String,
    pub period: String,
    pub delta: f64,
    pub n: usize,
    pub kept_frac: f64,
    pub mae: f64,
    pub mape: Option<f64>,
    pub skill: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

pub const ALL_SCOPE: &str = "ALL";
pub const CSV_HEADER: [&str; 9] = ["scope", "model", "period", "delta", "n", "kept_frac", "mae", "mape", "skill"];

/// Indices kept at tolerance `delta`.
pub fn kept_indices(points: &[EvalPoint], delta: f64, mode: ToleranceMode) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            let p = &points[i];
            match mode {
                ToleranceMode::Absolute => exceeds_tolerance(p.prev, p.next, delta),
                ToleranceMode::Percent => exceeds_percent_tolerance(p.prev, p.next, delta),
            }
        })
        .collect()
}

#[derive(Default, Clone, Copy)]
struct Sums {
    n: usize,
    abs: f64,
    values: usize,
    ape: f64,
    ape_n: usize,
}

fn accumulate(points: &[EvalPoint], preds: &[Vec<f64>], idx: &[usize], floor: &BTreeMap<String, f64>) -> Sums {
    let mut s = Sums::default();
    for &i in idx {
        let p = &points[i];
        let f = floor.get(&p.site_id).copied().unwrap_or(0.0);
        s.n += 1;
        for (a, q) in p.actual.iter().zip(&preds[i]) {
            s.abs += (a - q).abs();
            s.values += 1;
            if a.abs() >= f && *a != 0.0 {
                s.ape += (a - q).abs() / a.abs();
                s.ape_n += 1;
            }
        }
    }
    s
}

impl Sums {
    fn mae(&self) -> f64 {
        if self.values > 0 {
            self.abs / self.values as f64
        } else {
            0.0
        }
    }

    fn mape(&self) -> Option<f64> {
        (self.ape_n > 0).then(|| self.ape / self.ape_n as f64 * 100.0)
    }
}

/// Per-site and pooled rows for every model and δ.
///
/// Rows are ordered by scope (sites ascending, then `ALL`), model name, δ as
/// given. Every model is scored on the same kept index set. Pooled MAE is the
/// count-weighted mean of the per-site MAEs.
pub fn tolerance_report(
    points: &[EvalPoint],
    predictions: &BTreeMap<String, Vec<Vec<f64>>>,
    spec: &ReportSpec,
) -> Result<EvalReport, MetricsError> {
    for (m, p) in predictions {
        if p.len() != points.len() {
            return Err(MetricsError::Coverage(m.clone(), p.len(), points.len()));
        }
    }
    if !predictions.contains_key(&spec.baseline) {
        return Err(MetricsError::MissingBaseline(spec.baseline.clone()));
    }
    let mut sites: BTreeMap<&str, usize> = BTreeMap::new();
    for p in points {
        *sites.entry(p.site_id.as_str()).or_default() += 1;
    }
    let kept: Vec<Vec<usize>> = spec.deltas.iter().map(|&d| kept_indices(points, d, spec.mode)).collect();
    let mut rows = Vec::new();
    // per (model, delta index): n-weighted sum of site MAEs, pooled sums
    let mut pooled: BTreeMap<(&str, usize), (f64, Sums)> = BTreeMap::new();
    for (&site, &total) in &sites {
        let mut cells = Vec::new();
        for (m, preds) in predictions {
            for (di, idx) in kept.iter().enumerate() {
                let idx: Vec<usize> = idx.iter().copied().filter(|&i| points[i].site_id == site).collect();
                let s = accumulate(points, preds, &idx, &spec.mape_floor);
                let e = pooled.entry((m.as_str(), di)).or_insert((0.0, Sums::default()));
                e.0 += s.n as f64 * s.mae();
                e.1.n += s.n;
                e.1.values += s.values;
                e.1.ape += s.ape;
                e.1.ape_n += s.ape_n;
                cells.push((m.as_str(), di, s.mae(), s.mape(), s.n));
            }
        }
        push_rows(&mut rows, site, total, &cells, spec);
    }
    let cells: Vec<_> = pooled
        .iter()
        .map(|(&(m, di), (weighted, s))| {
            let mae_v = if s.n > 0 { weighted / s.n as f64 } else { 0.0 };
            (m, di, mae_v, s.mape(), s.n)
        })
        .collect();
    push_rows(&mut rows, ALL_SCOPE, points.len(), &cells, spec);
    Ok(EvalReport { rows })
}

/// `(model, delta index, mae, mape, n)` cells of one scope become rows, skipping empty buckets.
fn push_rows(rows: &mut Vec<ReportRow>, scope: &str, total: usize, cells: &[(&str, usize, f64, Option<f64>, usize)], spec: &ReportSpec) {
    for &(m, di, mae_v, mape_v, n) in cells {
        if n == 0 {
            continue;
        }
        let base = cells
            .iter()
            .find(|c| c.0 == spec.baseline && c.1 == di)
            .expect("baseline checked present");
        let skill = match spec.skill_metric {
            ErrorMetric::Mae => skill_score(mae_v, base.2).ok(),
            ErrorMetric::Mape => mape_v.zip(base.3).and_then(|(p, b)| skill_score(p, b).ok()),
        };
        rows.push(ReportRow {
            scope: scope.to_string(),
            model: m.to_string(),
            period: spec.period.clone(),
            delta: spec.deltas[di],
            n,
            kept_frac: n as f64 / total as f64,
            mae: mae_v,
            mape: mape_v,
            skill,
        });
    }
}

/// Report period filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    /// May through September.
    Summer,
    Full,
}

impl Period {
    pub fn tag(self) -> &'static str {
        match self {
            Period::Summer => "summer",
            Period::Full => "full",
        }
    }

    pub fn contains(self, timestamp: i64, utc_offset_minutes: i32) -> bool {
        match self {
            Period::Full => true,
            Period::Summer => (5..=9).contains(&sitecube::local_month(timestamp, utc_offset_minutes)),
        }
    }
}

/// Channel-forecast report: tolerance on the absolute change of channel 1
/// between the last input frame and the target, MAE over all three channels,
/// skill by MAE against `persistence`.
pub fn channel_report(
    samples: &[SequenceSample],
    predictions: &BTreeMap<String, Vec<ChannelTriple>>,
    deltas: &[f64],
    period: Period,
) -> Result<EvalReport, MetricsError> {
    let keep: Vec<usize> = (0..samples.len())
        .filter(|&i| period.contains(samples[i].target_timestamp, samples[i].utc_offset_minutes))
        .collect();
    if keep.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let points: Vec<EvalPoint> = keep
        .iter()
        .map(|&i| {
            let s = &samples[i];
            EvalPoint {
                site_id: s.site_id.clone(),
                prev: s.last_center().c01(),
                next: s.target.c01(),
                actual: s.target.0.to_vec(),
            }
        })
        .collect();
    let preds = predictions
        .iter()
        .map(|(m, v)| {
            if v.len() != samples.len() {
                return Err(MetricsError::Coverage(m.clone(), v.len(), samples.len()));
            }
            Ok((m.clone(), keep.iter().map(|&i| v[i].0.to_vec()).collect()))
        })
        .collect::<Result<BTreeMap<_, _>, _>>()?;
    let spec = ReportSpec {
        deltas: deltas.to_vec(),
        mode: ToleranceMode::Absolute,
        skill_metric: ErrorMetric::Mae,
        baseline: "persistence".into(),
        period: period.tag().into(),
        mape_floor: BTreeMap::new(),
    };
    tolerance_report(&points, &preds, &spec)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    /// CSV with header `scope,model,period,delta,n,kept_frac,mae,mape,skill`;
    /// undefined MAPE or skill cells are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.scope.clone(),
                r.model.clone(),
                r.period.clone(),
                r.delta.to_string(),
                r.n.to_string(),
                r.kept_frac.to_string(),
                r.mae.to_string(),
                fmt_opt(r.mape),
                fmt_opt(r.skill),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn row(&self, scope: &str, model: &str, delta: f64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.scope == scope && r.model == model && r.delta == delta)
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mae(&[0.5], &[0.4]).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(mae(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5);
        assert_eq!(mae(&[1.0], &[]), Err(MetricsError::LengthMismatch(1, 0)));
        assert_eq!(mae(&[], &[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn mape_examples() {
        assert!((mape(&[100.0, 200.0], &[110.0, 180.0], 0.0).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(mape(&[3.0, 4.0], &[3.0, 4.0], 0.0).unwrap(), 0.0);
        let floor = default_mape_floor(&[0.0001, 100.0]);
        assert_eq!(mape(&[0.0001, 100.0], &[1.0, 100.0], floor).unwrap(), 0.0);
        assert_eq!(mape(&[0.0001], &[1.0], 1.0), Err(MetricsError::EmptyAfterFloor));
    }

    #[test]
    fn skill_examples() {
        assert_eq!(skill_score(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(skill_score(0.0, 3.0).unwrap(), 100.0);
        assert!((skill_score(0.8, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(skill_score(1.0, 0.0), Err(MetricsError::ZeroBaseline));
    }

    fn points() -> Vec<EvalPoint> {
        let mut v = Vec::new();
        for (i, (prev, next)) in [(0.1, 0.1), (0.1, 0.2), (0.5, 0.45), (0.3, 0.31), (0.2, 0.5)].into_iter().enumerate() {
            v.push(EvalPoint {
                site_id: if i % 2 == 0 { "a".into() } else { "b".into() },
                prev,
                next,
                actual: vec![next],
            });
        }
        v
    }

    fn spec() -> ReportSpec {
        ReportSpec {
            deltas: vec![0.0, 0.02, 0.05, 0.1],
            mode: ToleranceMode::Absolute,
            skill_metric: ErrorMetric::Mae,
            baseline: "persistence".into(),
            period: "full".into(),
            mape_floor: BTreeMap::new(),
        }
    }

    #[test]
    fn report_structure() {
        let pts = points();
        let mut preds = BTreeMap::new();
        preds.insert("persistence".to_string(), pts.iter().map(|p| vec![p.prev]).collect());
        preds.insert("twin".to_string(), pts.iter().map(|p| vec![p.prev]).collect());
        preds.insert("good".to_string(), pts.iter().map(|p| vec![p.next * 0.9 + p.prev * 0.1]).collect());
        let r = tolerance_report(&pts, &preds, &spec()).unwrap();
        let all0 = r.row(ALL_SCOPE, "good", 0.0).unwrap();
        assert_eq!(all0.n, 5);
        assert_eq!(all0.kept_frac, 1.0);
        for row in &r.rows {
            assert!(row.n > 0);
            if row.model == "twin" {
                assert_eq!(row.skill, Some(0.0));
            }
        }
        let fracs: Vec<f64> = spec().deltas.iter().map(|&d| r.row(ALL_SCOPE, "good", d).unwrap().kept_frac).collect();
        assert!(fracs.windows(2).all(|w| w[1] <= w[0]));
        let scopes: Vec<&str> = r.rows.iter().map(|x| x.scope.as_str()).collect();
        assert_eq!(scopes.first(), Some(&"a"));
        assert_eq!(scopes.last(), Some(&ALL_SCOPE));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("scope,model,period,delta,n,kept_frac,mae,mape,skill\n"));
    }

    #[test]
    fn missing_baseline_and_coverage() {
        let pts = points();
        let mut preds = BTreeMap::new();
        preds.insert("x".to_string(), pts.iter().map(|p| vec![p.prev]).collect());
        assert!(matches!(tolerance_report(&pts, &preds, &spec()), Err(MetricsError::MissingBaseline(_))));
        preds.insert("persistence".to_string(), vec![vec![0.0]]);
        assert!(matches!(tolerance_report(&pts, &preds, &spec()), Err(MetricsError::Coverage(..))));
    }
}
