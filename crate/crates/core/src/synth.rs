//! Synthetic cloud-advection world: Gaussian cloud blobs drifting over a
//! periodic field, seen through each site's window, with the site's power and
//! temperature derived from the cloud cover at its cell.
//!
//! Every site gets its own field and every day is a fresh episode: new blobs
//! and a velocity drawn as the base velocity plus Gaussian jitter. The clean
//! (noise-free) world is a pure function of `(spec, site, day, step)`, which is
//! what [`scene_oracle_next`] evaluates.

use chrono::{NaiveDate, NaiveTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{self, GeoPoint};
use crate::sitecube::{default_channel_ids, ScalarSeries, SeriesKind, SiteCube, SiteMeta};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("grid edge {grid} leaves margin {margin} cells, need {needed} (max speed {speed:.3} x {steps} steps)")]
    MarginTooSmall {
        grid: usize,
        margin: usize,
        needed: usize,
        speed: f64,
        steps: usize,
    },
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub sites: usize,
    pub days: usize,
    pub start_date: NaiveDate,
    pub utc_offset_minutes: i32,
    pub cadence_seconds: u32,
    /// Local hours `[start, end)` in which frames are produced.
    pub first_hour: u32,
    pub last_hour: u32,
    /// Edge of the periodic cloud field, in cells.
    pub grid_edge: usize,
    /// Edge of the window stored per site.
    pub window: usize,
    /// History length the margin must cover.
    pub margin_steps: usize,
    pub blob_count: usize,
    pub radius_range: [f64; 2],
    pub opacity_range: [f64; 2],
    /// `[columns, rows]` per step.
    pub velocity: [f64; 2],
    /// Per-episode Gaussian jitter of each velocity component.
    pub velocity_jitter: f64,
    /// Clear-sky reflectance of channel 1.
    pub clear_sky: f64,
    /// Channels 2 and 3 as `scale * channel1 + offset`.
    pub channel_affine: [[f64; 2]; 2],
    pub capacity_kw: f64,
    pub sunrise_hour: f64,
    pub sunset_hour: f64,
    pub temperature_mean_c: f64,
    pub temperature_amplitude_c: f64,
    /// Local hour of the daily temperature maximum.
    pub temperature_peak_hour: f64,
    /// Per-day Gaussian jitter of the mean temperature.
    pub temperature_day_jitter_c: f64,
    /// Fractional power loss per degree above 25 C.
    pub derate_per_c: f64,
    /// Reflectance noise standard deviation (then clamped to [0, 1]).
    pub noise_sigma: f64,
    /// Power noise standard deviation as a fraction of capacity.
    pub power_noise_frac: f64,
    /// Latitude/longitude of the first site and of one cell step.
    pub origin: [f64; 2],
    pub cell_degrees: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            sites: 10,
            days: 30,
            start_date: NaiveDate::from_ymd_opt(2021, 6, 1).expect("valid date"),
            utc_offset_minutes: 0,
            cadence_seconds: 900,
            first_hour: 9,
            last_hour: 17,
            grid_edge: 48,
            window: 10,
            margin_steps: 4,
            blob_count: 10,
            radius_range: [2.0, 5.0],
            opacity_range: [0.4, 0.9],
            velocity: [1.0, 0.0],
            velocity_jitter: 0.5,
            clear_sky: 0.1,
            channel_affine: [[0.9, 0.03], [0.7, 0.05]],
            capacity_kw: 100.0,
            sunrise_hour: 6.0,
            sunset_hour: 20.0,
            temperature_mean_c: 25.0,
            temperature_amplitude_c: 6.0,
            temperature_peak_hour: 15.0,
            temperature_day_jitter_c: 1.0,
            derate_per_c: 0.004,
            noise_sigma: 0.005,
            power_noise_frac: 0.0,
            origin: [35.0, -100.0],
            cell_degrees: 0.01,
        }
    }
}

impl SceneSpec {
    pub fn steps_per_day(&self) -> usize {
        ((self.last_hour - self.first_hour) * 3600 / self.cadence_seconds) as usize
    }

    /// Largest per-step displacement any episode is allowed to reach (base + 3 sigma jitter).
    pub fn max_speed(&self) -> f64 {
        let j = 3.0 * self.velocity_jitter;
        ((self.velocity[0].abs() + j).powi(2) + (self.velocity[1].abs() + j).powi(2)).sqrt()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.sites == 0 || self.days == 0 {
            return bad("sites and days must be positive");
        }
        if self.window == 0 || self.grid_edge == 0 {
            return bad("window and grid edge must be positive");
        }
        if self.cadence_seconds == 0 || self.first_hour >= self.last_hour || self.last_hour > 24 {
            return bad("need cadence > 0 and first_hour < last_hour <= 24");
        }
        if (self.last_hour - self.first_hour) * 3600 % self.cadence_seconds != 0 {
            return bad("cadence must divide the daily frame span");
        }
        let unit = |r: [f64; 2]| r[0] <= r[1] && r[0] >= 0.0;
        if !unit(self.radius_range) || self.radius_range[0] <= 0.0 {
            return bad("radius_range must be positive and ordered");
        }
        if !unit(self.opacity_range) || self.opacity_range[1] > 1.0 {
            return bad("opacity_range must lie in [0, 1] and be ordered");
        }
        if !(0.0..=1.0).contains(&self.clear_sky) {
            return bad("clear_sky must lie in [0, 1]");
        }
        if self.noise_sigma < 0.0 || self.velocity_jitter < 0.0 || self.power_noise_frac < 0.0 {
            return bad("noise levels must be non-negative");
        }
        if self.capacity_kw <= 0.0 || self.sunset_hour <= self.sunrise_hour {
            return bad("capacity must be positive and sunset after sunrise");
        }
        let margin = (self.grid_edge.saturating_sub(self.window)) / 2;
        let needed = (self.max_speed() * self.margin_steps as f64).ceil() as usize;
        if margin < needed {
            return Err(SynthError::MarginTooSmall {
                grid: self.grid_edge,
                margin,
                needed,
                speed: self.max_speed(),
                steps: self.margin_steps,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Blob {
    row: f64,
    col: f64,
    radius: f64,
    opacity: f64,
}

/// Clouds and velocity of one site-day.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    blobs: Vec<Blob>,
    /// `[columns, rows]` per step.
    pub velocity: [f64; 2],
    pub temperature_offset_c: f64,
}

const STREAMS_PER_SITE: u64 = 2;

fn episode_rng(spec: &SceneSpec, site: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
    r.set_stream(site as u64 * STREAMS_PER_SITE);
    r
}

fn noise_rng(spec: &SceneSpec, site: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
    r.set_stream(site as u64 * STREAMS_PER_SITE + 1);
    r
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated non-negative")
}

fn draw_episode(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Episode {
    let g = spec.grid_edge as f64;
    let uniform = |rng: &mut ChaCha8Rng, r: [f64; 2]| if r[1] > r[0] { rng.random_range(r[0]..r[1]) } else { r[0] };
    let blobs = (0..spec.blob_count)
        .map(|_| Blob {
            row: rng.random_range(0.0..g),
            col: rng.random_range(0.0..g),
            radius: uniform(rng, spec.radius_range),
            opacity: uniform(rng, spec.opacity_range),
        })
        .collect();
    let jitter = normal(spec.velocity_jitter);
    let velocity = [spec.velocity[0] + jitter.sample(rng), spec.velocity[1] + jitter.sample(rng)];
    let temperature_offset_c = normal(spec.temperature_day_jitter_c).sample(rng);
    Episode {
        blobs,
        velocity,
        temperature_offset_c,
    }
}

/// Episodes of days `0..=day` for one site; the last one is `day`'s.
pub fn episode(spec: &SceneSpec, site: usize, day: usize) -> Episode {
    let mut rng = episode_rng(spec, site);
    let mut ep = draw_episode(spec, &mut rng);
    for _ in 0..day {
        ep = draw_episode(spec, &mut rng);
    }
    ep
}

fn wrap(z: f64, period: f64) -> f64 {
    z - period * (z / period).round()
}

impl Episode {
    /// Combined cloud opacity at a field cell after `step` steps.
    pub fn opacity(&self, spec: &SceneSpec, row: usize, col: usize, step: usize) -> f64 {
        let p = spec.grid_edge as f64;
        let k = step as f64;
        // cell minus displacement first, so integer velocities give exact shifts
        let r0 = row as f64 - self.velocity[1] * k;
        let c0 = col as f64 - self.velocity[0] * k;
        let clear = self.blobs.iter().fold(1.0, |acc, b| {
            let dr = wrap(r0 - b.row, p);
            let dc = wrap(c0 - b.col, p);
            let e = (-(dr * dr + dc * dc) / (2.0 * b.radius * b.radius)).exp();
            acc * (1.0 - b.opacity * e)
        });
        1.0 - clear
    }
}

/// Site cell in field coordinates.
pub fn site_cell(spec: &SceneSpec) -> (usize, usize) {
    (spec.grid_edge / 2, spec.grid_edge / 2)
}

fn window_origin(spec: &SceneSpec) -> (usize, usize) {
    let (r, c) = site_cell(spec);
    let off = geo::window_center_offset(spec.window);
    (r - off, c - off)
}

/// Noise-free channel triple for a given channel-1 reflectance.
pub fn channels_from_c01(spec: &SceneSpec, c01: f64) -> [f64; 3] {
    let a = spec.channel_affine;
    [
        c01,
        (a[0][0] * c01 + a[0][1]).clamp(0.0, 1.0),
        (a[1][0] * c01 + a[1][1]).clamp(0.0, 1.0),
    ]
}

fn c01_from_opacity(spec: &SceneSpec, opacity: f64) -> f64 {
    (spec.clear_sky + (1.0 - spec.clear_sky) * opacity).clamp(0.0, 1.0)
}

/// Where a frame sits in the world.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneState {
    pub site: usize,
    pub day: usize,
    pub step: usize,
}

/// Noise-free observation at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanFrame {
    /// `[row][col][channel]` over the site window.
    pub frame: Vec<f64>,
    pub power_kw: f64,
    pub temperature_c: f64,
}

impl SceneSpec {
    fn local_hour(&self, step: usize) -> f64 {
        f64::from(self.first_hour) + step as f64 * f64::from(self.cadence_seconds) / 3600.0
    }

    fn diurnal(&self, hour: f64) -> f64 {
        if hour <= self.sunrise_hour || hour >= self.sunset_hour {
            return 0.0;
        }
        (std::f64::consts::PI * (hour - self.sunrise_hour) / (self.sunset_hour - self.sunrise_hour)).sin()
    }

    fn temperature(&self, ep: &Episode, hour: f64) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * (hour - self.temperature_peak_hour) / 24.0;
        self.temperature_mean_c + ep.temperature_offset_c + self.temperature_amplitude_c * phase.cos()
    }

    fn clean(&self, ep: &Episode, step: usize) -> CleanFrame {
        let (r0, c0) = window_origin(self);
        let w = self.window;
        let mut frame = Vec::with_capacity(w * w * 3);
        for r in 0..w {
            for c in 0..w {
                let c01 = c01_from_opacity(self, ep.opacity(self, r0 + r, c0 + c, step));
                frame.extend(channels_from_c01(self, c01));
            }
        }
        let (sr, sc) = site_cell(self);
        let hour = self.local_hour(step);
        let temperature_c = self.temperature(ep, hour);
        let cover = ep.opacity(self, sr, sc, step);
        let power_kw = (self.capacity_kw
            * self.diurnal(hour)
            * (1.0 - cover)
            * (1.0 - self.derate_per_c * (temperature_c - 25.0)))
            .max(0.0);
        CleanFrame {
            frame,
            power_kw,
            temperature_c,
        }
    }
}

/// Exact noise-free observation one step after `state`.
pub fn scene_oracle_next(spec: &SceneSpec, state: SceneState) -> CleanFrame {
    spec.clean(&episode(spec, state.site, state.day), state.step + 1)
}

/// Exact noise-free observation at `state`.
pub fn scene_oracle_at(spec: &SceneSpec, state: SceneState) -> CleanFrame {
    spec.clean(&episode(spec, state.site, state.day), state.step)
}

/// `E|clamp(x + n, 0, 1) - x|` for `n ~ N(0, sigma)` and `x` in `[0, 1]`.
pub fn expected_abs_noise(x: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let (a, b) = (x, 1.0 - x);
    let tail = |t: f64| 0.5 * libm::erfc(t / (sigma * std::f64::consts::SQRT_2));
    let core = sigma / (2.0 * std::f64::consts::PI).sqrt()
        * (2.0 - (-(a * a) / (2.0 * sigma * sigma)).exp() - (-(b * b) / (2.0 * sigma * sigma)).exp());
    core + a * tail(a) + b * tail(b)
}

/// Bayes floor of next-step channel MAE: mean expected noise magnitude over
/// the clean target values.
pub fn channel_noise_floor(spec: &SceneSpec, clean_targets: &[f64]) -> f64 {
    if clean_targets.is_empty() {
        return 0.0;
    }
    clean_targets.iter().map(|&x| expected_abs_noise(x, spec.noise_sigma)).sum::<f64>() / clean_targets.len() as f64
}

/// One generated site: window cube with power and temperature attached.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteScene {
    pub cube: SiteCube,
    pub velocities: Vec<[f64; 2]>,
}

pub fn site_id(site: usize) -> String {
    format!("site{site:02}")
}

fn site_meta(spec: &SceneSpec, site: usize) -> SiteMeta {
    let w = spec.window;
    let lat0 = spec.origin[0] + site as f64 * 0.5;
    let lon0 = spec.origin[1];
    let off = geo::window_center_offset(w) as f64;
    let mut lat_of = Vec::with_capacity(w * w);
    let mut lon_of = Vec::with_capacity(w * w);
    for r in 0..w {
        for c in 0..w {
            lat_of.push(lat0 - (r as f64 - off) * spec.cell_degrees);
            lon_of.push(lon0 + (c as f64 - off) * spec.cell_degrees);
        }
    }
    SiteMeta {
        site_id: site_id(site),
        location: GeoPoint::new(lat0, lon0).expect("origin in range"),
        utc_offset_minutes: spec.utc_offset_minutes,
        window_edge: w,
        channel_ids: default_channel_ids(),
        cadence_seconds: spec.cadence_seconds,
        lat_of,
        lon_of,
    }
}

fn day_start_utc(spec: &SceneSpec, day: usize) -> i64 {
    let date = spec.start_date + chrono::Days::new(day as u64);
    let local = date.and_time(NaiveTime::from_hms_opt(spec.first_hour, 0, 0).expect("hour < 24"));
    local.and_utc().timestamp() - i64::from(spec.utc_offset_minutes) * 60
}

/// Generate every site's cube. Noise-free when `noise_sigma` and
/// `power_noise_frac` are zero; bitwise reproducible per spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<Vec<SiteScene>, SynthError> {
    spec.validate()?;
    use rayon::prelude::*;
    Ok((0..spec.sites).into_par_iter().map(|s| generate_site(spec, s)).collect())
}

fn generate_site(spec: &SceneSpec, site: usize) -> SiteScene {
    let steps = spec.steps_per_day();
    let mut eps = episode_rng(spec, site);
    let mut noise = noise_rng(spec, site);
    let reflect = normal(spec.noise_sigma);
    let pnoise = normal(spec.power_noise_frac * spec.capacity_kw);
    let mut timestamps = Vec::with_capacity(spec.days * steps);
    let mut frames = Vec::with_capacity(spec.days * steps * spec.window * spec.window * 3);
    let mut power = ScalarSeries::new(SeriesKind::PowerKw);
    let mut temperature = ScalarSeries::new(SeriesKind::TemperatureC);
    let mut velocities = Vec::with_capacity(spec.days);
    for day in 0..spec.days {
        let ep = draw_episode(spec, &mut eps);
        velocities.push(ep.velocity);
        let t0 = day_start_utc(spec, day);
        for step in 0..steps {
            let ts = t0 + step as i64 * i64::from(spec.cadence_seconds);
            let clean = spec.clean(&ep, step);
            timestamps.push(ts);
            for v in clean.frame {
                let n = if spec.noise_sigma > 0.0 { reflect.sample(&mut noise) } else { 0.0 };
                frames.push((v + n).clamp(0.0, 1.0) as f32);
            }
            let pn = if spec.power_noise_frac > 0.0 { pnoise.sample(&mut noise) } else { 0.0 };
            power.timestamps.push(ts);
            power.values.push((clean.power_kw + pn).max(0.0));
            temperature.timestamps.push(ts);
            temperature.values.push(clean.temperature_c);
        }
    }
    SiteScene {
        cube: SiteCube {
            meta: site_meta(spec, site),
            timestamps,
            frames,
            power: Some(power),
            temperature: Some(temperature),
        },
        velocities,
    }
}
