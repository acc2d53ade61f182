//! The commands as library functions over a resolved [`RunConfig`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use helios_core::dataset::{build_sequences, read_samples, split_by_day, write_samples, FoldSplit, SequenceSample};
use helios_core::metrics::{channel_report, EvalReport, ReportRow};
use helios_core::models::{
    channel_model_from_container, read_container, write_container, ChannelModel, ChannelRegistry, EpochRecord, Persistence,
};
use helios_core::nowcast::{
    build_nowcast_features, compare_four_models, power_regressor_from_container, train_nowcaster, ChannelSource, NowcastSample,
    PowerRegistry, PowerRegressor,
};
use helios_core::sitecube::{read_sitecube, write_sitecube, SiteCube};
use helios_core::synth::generate_scene;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::svg::{emit_svg_chart, ChartLabels, Series};

pub const CHANNEL_REPORT: &str = "channel_report.csv";
pub const FOUR_WAY_REPORT: &str = "four_way.csv";
pub const MODEL_EXT: &str = "hnmd";

fn data_err(m: impl Into<String>) -> CliError {
    CliError::Data(m.into())
}

pub fn fold_model_dir(cfg: &RunConfig, fold: usize) -> PathBuf {
    cfg.paths.model_dir.join(format!("fold{fold}"))
}

pub fn fold_report_dir(cfg: &RunConfig, fold: usize) -> PathBuf {
    cfg.paths.report_dir.join(format!("fold{fold}"))
}

fn dataset_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_dir.join("dataset")
}

fn mkdir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(CliError::io(p))
}

/// Generate the synthetic scene into `out`: one site-cube directory per site and `scene.json`.
pub fn synth_gen(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let scenes = generate_scene(&cfg.scene)?;
    mkdir(out)?;
    let mut dirs = Vec::new();
    for s in &scenes {
        let dir = out.join(&s.cube.meta.site_id);
        write_sitecube(&s.cube, &dir)?;
        dirs.push(dir);
    }
    let json = serde_json::to_string_pretty(&cfg.scene).map_err(|e| data_err(e.to_string()))?;
    let p = out.join("scene.json");
    fs::write(&p, json + "\n").map_err(CliError::io(&p))?;
    Ok(dirs)
}

/// Every site-cube directory under `dir`, by name.
pub fn load_cubes(dir: &Path) -> Result<Vec<SiteCube>, CliError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(data_err(format!("no site cubes under {}", dir.display())));
    }
    dirs.iter().map(|d| Ok(read_sitecube(d)?)).collect()
}

fn fit_window(cube: SiteCube, w: usize) -> Result<SiteCube, CliError> {
    if cube.meta.window_edge == w {
        return Ok(cube);
    }
    cube.crop(w).map_err(|e| data_err(format!("{}: {e}", cube.meta.site_id)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub samples: usize,
    pub days: usize,
    pub sites: usize,
}

/// Build sequence samples for every site and the day-based fold split.
pub fn dataset_build(cfg: &RunConfig) -> Result<DatasetSummary, CliError> {
    let seq = cfg.dataset.sequence_config();
    let cubes = load_cubes(&cfg.paths.data_dir)?;
    let sites = cubes.len();
    let mut samples = Vec::new();
    for c in cubes {
        samples.extend(build_sequences(&fit_window(c, cfg.dataset.window)?, &seq)?);
    }
    if samples.is_empty() {
        return Err(data_err("no usable sequence samples"));
    }
    let split = split_by_day(&samples, cfg.dataset.folds, cfg.seed)?;
    let dir = dataset_dir(cfg);
    write_samples(&samples, &dir)?;
    let p = dir.join("split.json");
    let json = serde_json::to_string_pretty(&split).map_err(|e| data_err(e.to_string()))?;
    fs::write(&p, json + "\n").map_err(CliError::io(&p))?;
    Ok(DatasetSummary {
        samples: samples.len(),
        days: split.fold_of_day.len(),
        sites,
    })
}

pub fn load_dataset(cfg: &RunConfig) -> Result<(Vec<SequenceSample>, FoldSplit), CliError> {
    let dir = dataset_dir(cfg);
    let samples = read_samples(&dir)?;
    let p = dir.join("split.json");
    let text = fs::read_to_string(&p).map_err(CliError::io(&p))?;
    let split: FoldSplit = serde_json::from_str(&text).map_err(|e| data_err(format!("{}: {e}", p.display())))?;
    if let Some(s) = samples.first() {
        if s.steps != cfg.dataset.steps || s.window != cfg.dataset.window {
            return Err(data_err(format!(
                "dataset cache holds T={} w={}, config asks T={} w={}; rerun dataset-build",
                s.steps, s.window, cfg.dataset.steps, cfg.dataset.window
            )));
        }
    }
    Ok((samples, split))
}

fn check_fold(split: &FoldSplit, fold: usize) -> Result<(), CliError> {
    if fold >= split.fold_count {
        return Err(CliError::Config(format!("fold {fold} out of range (folds: {})", split.fold_count)));
    }
    Ok(())
}

/// Per-run overrides of the channel model input shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelOverrides {
    /// File stem; defaults to the model family name.
    pub name: Option<String>,
    pub steps: Option<usize>,
    pub window: Option<usize>,
}

fn reshape(samples: &[&SequenceSample], steps: usize, window: usize) -> Result<Vec<SequenceSample>, CliError> {
    samples
        .iter()
        .map(|s| {
            let s = if s.window == window {
                (*s).clone()
            } else {
                s.crop(window).map_err(|e| CliError::Config(e.to_string()))?
            };
            Ok(if s.steps == steps { s } else { s.truncate_history(steps) })
        })
        .collect()
}

/// Train one channel model family on a fold; writes `<name>.hnmd` and `<name>.curve.csv`.
pub fn train_channel(cfg: &RunConfig, model: &str, fold: usize, ov: &ChannelOverrides) -> Result<PathBuf, CliError> {
    let (samples, split) = load_dataset(cfg)?;
    check_fold(&split, fold)?;
    let steps = ov.steps.unwrap_or(cfg.dataset.steps);
    let window = ov.window.unwrap_or(cfg.dataset.window);
    if steps == 0 || steps > cfg.dataset.steps || window == 0 || window > cfg.dataset.window {
        return Err(CliError::Config(format!(
            "steps {steps} / window {window} must lie in 1..={} / 1..={}",
            cfg.dataset.steps, cfg.dataset.window
        )));
    }
    let mut specs = cfg.channel_specs();
    specs.cnnlstm.steps = steps;
    specs.cnnlstm.window = window;
    let registry = ChannelRegistry::with_defaults(&specs);
    let trainer = registry.get(model)?;
    let part = split.partition(fold, &samples);
    let train = reshape(&part.train, steps, window)?;
    let validation = reshape(&part.validation, steps, window)?;
    let fitted = trainer.fit(&train, &validation, cfg.seed.wrapping_add(fold as u64))?;
    let container = fitted
        .model
        .to_container()
        .ok_or_else(|| CliError::Config(format!("model '{model}' cannot be saved")))?;
    let dir = fold_model_dir(cfg, fold);
    mkdir(&dir)?;
    let stem = ov.name.clone().unwrap_or_else(|| model.to_string());
    let path = dir.join(format!("{stem}.{MODEL_EXT}"));
    write_container(&container, &path)?;
    write_curve(&fitted.curve, &dir.join(format!("{stem}.curve.csv")))?;
    Ok(path)
}

fn write_curve(curve: &[EpochRecord], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "validation_loss"])?;
    for r in curve {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.validation_loss.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(CliError::io(path))?;
    Ok(())
}

fn nowcast_samples(cfg: &RunConfig) -> Result<Vec<Vec<NowcastSample>>, CliError> {
    load_cubes(&cfg.paths.data_dir)?
        .iter()
        .map(|c| {
            let (Some(p), Some(t)) = (&c.power, &c.temperature) else {
                return Err(data_err(format!("site {} has no power or temperature series", c.meta.site_id)));
            };
            Ok(build_nowcast_features(c, p, t, cfg.dataset.interval_seconds, cfg.dataset.solar())?)
        })
        .collect()
}

/// Fit one power regressor per site on the fold's training and validation days,
/// with ground-truth next-step channels as inputs.
pub fn train_nowcast(cfg: &RunConfig, fold: usize) -> Result<PathBuf, CliError> {
    let (_, split) = load_dataset(cfg)?;
    check_fold(&split, fold)?;
    let registry = PowerRegistry::with_defaults(cfg.svr);
    let trainer = registry.get(&cfg.evaluation.power_model)?;
    let dir = fold_model_dir(cfg, fold).join("power");
    mkdir(&dir)?;
    for site in nowcast_samples(cfg)? {
        let Some(first) = site.first() else { continue };
        let part = split.partition(fold, &site);
        let train: Vec<NowcastSample> = part.train.into_iter().chain(part.validation).cloned().collect();
        if train.is_empty() {
            return Err(data_err(format!("site {} has no training days in fold {fold}", first.site_id)));
        }
        let model = train_nowcaster(&train, trainer, ChannelSource::Next)?;
        write_container(&model.to_container(), &dir.join(format!("{}.{MODEL_EXT}", first.site_id)))?;
    }
    Ok(dir)
}

fn model_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == MODEL_EXT))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Predictions of `model` on `samples`, cropping to the model's window when it is smaller.
fn predict_adapted(model: &dyn ChannelModel, samples: &[SequenceSample]) -> Result<Vec<helios_core::dataset::ChannelTriple>, CliError> {
    match model.window() {
        Some(w) if samples.first().is_some_and(|s| s.window != w) => {
            let cropped = samples
                .iter()
                .map(|s| s.crop(w).map_err(|e| data_err(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(model.predict_many(&cropped)?)
        }
        _ => Ok(model.predict_many(samples)?),
    }
}

/// Channel report on the fold's test days for persistence and every saved channel model.
pub fn evaluate_channels(cfg: &RunConfig, fold: usize) -> Result<EvalReport, CliError> {
    let (samples, split) = load_dataset(cfg)?;
    check_fold(&split, fold)?;
    let test: Vec<SequenceSample> = split.partition(fold, &samples).test.into_iter().cloned().collect();
    if test.is_empty() {
        return Err(data_err(format!("fold {fold} has no test samples")));
    }
    let mut preds = BTreeMap::new();
    preds.insert("persistence".to_string(), Persistence.predict_many(&test)?);
    for f in model_files(&fold_model_dir(cfg, fold))? {
        let model = channel_model_from_container(&read_container(&f)?)?;
        preds.insert(stem(&f), predict_adapted(model.as_ref(), &test)?);
    }
    let report = channel_report(&test, &preds, &cfg.evaluation.channel_deltas, cfg.evaluation.period)?;
    let dir = fold_report_dir(cfg, fold);
    mkdir(&dir)?;
    write_report(&report, &dir.join(CHANNEL_REPORT))?;
    channel_chart(&report, &dir)?;
    Ok(report)
}

/// Persistence vs the per-site regressor on current, forecast and true next channels.
pub fn evaluate_four_way(cfg: &RunConfig, fold: usize) -> Result<EvalReport, CliError> {
    let (samples, split) = load_dataset(cfg)?;
    check_fold(&split, fold)?;
    let model_dir = fold_model_dir(cfg, fold);
    let forecast_path = model_dir.join(format!("{}.{MODEL_EXT}", cfg.evaluation.forecast_model));
    let channel_model = channel_model_from_container(&read_container(&forecast_path)?)?;
    let histories = match channel_model.window() {
        Some(w) if w != cfg.dataset.window => samples
            .iter()
            .map(|s| s.crop(w).map_err(|e| data_err(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?,
        _ => samples,
    };
    let mut nowcasters: BTreeMap<String, Box<dyn PowerRegressor>> = BTreeMap::new();
    for f in model_files(&model_dir.join("power"))? {
        nowcasters.insert(stem(&f), power_regressor_from_container(&read_container(&f)?)?);
    }
    let mut test = Vec::new();
    for site in nowcast_samples(cfg)? {
        test.extend(split.partition(fold, &site).test.into_iter().cloned());
    }
    let result = compare_four_models(
        &test,
        &histories,
        &nowcasters,
        channel_model.as_ref(),
        &cfg.evaluation.power_deltas,
        cfg.evaluation.period,
    )?;
    let dir = fold_report_dir(cfg, fold);
    mkdir(&dir)?;
    write_report(&result.report, &dir.join(FOUR_WAY_REPORT))?;
    four_way_chart(&result.report, &dir)?;
    Ok(result.report)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<(), CliError> {
    let f = fs::File::create(path).map_err(CliError::io(path))?;
    report.write_csv(f)?;
    Ok(())
}

fn parse_opt(s: &str) -> Result<Option<f64>, CliError> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| data_err(format!("bad number '{s}'")))
    }
}

pub fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != helios_core::metrics::CSV_HEADER {
        return Err(data_err(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| data_err(format!("{}: bad number '{}'", path.display(), &rec[i])));
        rows.push(ReportRow {
            scope: rec[0].to_string(),
            model: rec[1].to_string(),
            period: rec[2].to_string(),
            delta: num(3)?,
            n: rec[4].parse().map_err(|_| data_err(format!("{}: bad count", path.display())))?,
            kept_frac: num(5)?,
            mae: num(6)?,
            mape: parse_opt(&rec[7])?,
            skill: parse_opt(&rec[8])?,
        });
    }
    Ok(EvalReport { rows })
}

fn pooled_series(report: &EvalReport, value: impl Fn(&ReportRow) -> Option<f64>) -> BTreeMap<String, Series> {
    let mut out: BTreeMap<String, Series> = BTreeMap::new();
    for r in report.rows.iter().filter(|r| r.scope == helios_core::metrics::ALL_SCOPE) {
        if let Some(v) = value(r) {
            let s = out.entry(r.model.clone()).or_insert(Series { x: Vec::new(), y: Vec::new() });
            s.x.push(r.delta);
            s.y.push(v);
        }
    }
    out
}

/// MAE x 100 against δ, one line per model.
pub fn channel_chart(report: &EvalReport, dir: &Path) -> Result<PathBuf, CliError> {
    let series = pooled_series(report, |r| Some(r.mae * 100.0));
    let labels = ChartLabels {
        title: "Channel forecast error by tolerance".into(),
        x: "tolerance delta (channel 1 reflectance)".into(),
        y: "MAE x 100".into(),
    };
    let p = dir.join("channel_mae.svg");
    emit_svg_chart(&series, &labels, &p)?;
    Ok(p)
}

/// MAE and MAPE against δ, one line per model.
pub fn four_way_chart(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mae = dir.join("four_way_mae.svg");
    emit_svg_chart(
        &pooled_series(report, |r| Some(r.mae)),
        &ChartLabels {
            title: "Power forecast MAE by tolerance".into(),
            x: "tolerance delta (% change in power)".into(),
            y: "MAE (kW)".into(),
        },
        &mae,
    )?;
    let mape = dir.join("four_way_mape.svg");
    emit_svg_chart(
        &pooled_series(report, |r| r.mape),
        &ChartLabels {
            title: "Power forecast MAPE by tolerance".into(),
            x: "tolerance delta (% change in power)".into(),
            y: "MAPE (%)".into(),
        },
        &mape,
    )?;
    Ok(vec![mae, mape])
}

/// Re-render every chart from the report CSVs under the report directory.
pub fn report(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let root = &cfg.paths.report_dir;
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(CliError::io(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        let c = d.join(CHANNEL_REPORT);
        if c.is_file() {
            out.push(channel_chart(&read_report(&c)?, &d)?);
        }
        let f = d.join(FOUR_WAY_REPORT);
        if f.is_file() {
            out.extend(four_way_chart(&read_report(&f)?, &d)?);
        }
    }
    if out.is_empty() {
        return Err(data_err(format!("no report CSVs under {}", root.display())));
    }
    Ok(out)
}
