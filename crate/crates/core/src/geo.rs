//! Geodesy helpers: Vincenty inverse distance on WGS84, nearest-pixel lookup on an
//! irregular latitude/longitude grid, and window placement around a site pixel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS84 semi-major axis in meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// Mean earth radius (IUGG R1) used by the spherical fallback.
pub const MEAN_EARTH_RADIUS_M: f64 = 6_371_008.8;

const VINCENTY_TOLERANCE: f64 = 1e-12;
const VINCENTY_MAX_ITERATIONS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid geographic point: lat {lat}, lon {lon}")]
    InvalidPoint { lat: f64, lon: f64 },
    #[error("Vincenty iteration failed to converge (near-antipodal pair)")]
    NonConvergence,
    #[error("invalid pixel grid: {0}")]
    InvalidGrid(String),
    #[error("window of edge {w} centered at ({row}, {col}) exceeds the {rows}x{cols} grid")]
    OutOfBounds {
        rows: usize,
        cols: usize,
        row: usize,
        col: usize,
        w: usize,
    },
}

/// A point on the ellipsoid, in degrees. Longitude is kept in (-180, 180].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::InvalidPoint { lat, lon });
        }
        Ok(Self {
            lat,
            lon: normalize_lon(lon),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

fn normalize_lon(lon: f64) -> f64 {
    let mut l = lon % 360.0;
    if l <= -180.0 {
        l += 360.0;
    } else if l > 180.0 {
        l -= 360.0;
    }
    l
}

/// Per-cell geolocation of a rectangular sensor grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    rows: usize,
    cols: usize,
    lat_of: Vec<f64>,
    lon_of: Vec<f64>,
}

impl PixelGrid {
    pub fn new(rows: usize, cols: usize, lat_of: Vec<f64>, lon_of: Vec<f64>) -> Result<Self, GeoError> {
        if rows == 0 || cols == 0 {
            return Err(GeoError::InvalidGrid("grid must be non-empty".into()));
        }
        if lat_of.len() != rows * cols || lon_of.len() != rows * cols {
            return Err(GeoError::InvalidGrid(format!(
                "expected {} cells, got {} latitudes and {} longitudes",
                rows * cols,
                lat_of.len(),
                lon_of.len()
            )));
        }
        for (&lat, &lon) in lat_of.iter().zip(&lon_of) {
            GeoPoint::new(lat, lon)?;
        }
        Ok(Self {
            rows,
            cols,
            lat_of,
            lon_of,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn point(&self, row: usize, col: usize) -> GeoPoint {
        let i = row * self.cols + col;
        GeoPoint::new(self.lat_of[i], self.lon_of[i]).expect("validated at construction")
    }
}

/// Window of edge `size` placed at (`row_start`, `col_start`) of its source grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowIndex {
    pub row_start: usize,
    pub col_start: usize,
    pub size: usize,
}

/// Offset of the site cell inside a window of edge `w`: `floor(w / 2)` on both axes.
pub fn window_center_offset(w: usize) -> usize {
    w / 2
}

/// Vincenty inverse distance in meters between two points on the WGS84 ellipsoid.
///
/// Arguments are put in a canonical order first so the result is bitwise symmetric.
pub fn vincenty_distance(a: GeoPoint, b: GeoPoint) -> Result<f64, GeoError> {
    let (p, q) = if (a.lat, a.lon) <= (b.lat, b.lon) { (a, b) } else { (b, a) };
    vincenty_inverse(p, q)
}

#[allow(non_snake_case)]
fn vincenty_inverse(p: GeoPoint, q: GeoPoint) -> Result<f64, GeoError> {
    let f = WGS84_F;
    let a = WGS84_A;
    let b = a * (1.0 - f);

    let L = normalize_lon(q.lon - p.lon).to_radians();
    let U1 = ((1.0 - f) * p.lat.to_radians().tan()).atan();
    let U2 = ((1.0 - f) * q.lat.to_radians().tan()).atan();
    let (sin_u1, cos_u1) = U1.sin_cos();
    let (sin_u2, cos_u2) = U2.sin_cos();

    let mut lambda = L;
    let mut converged = false;
    let (mut sin_sigma, mut cos_sigma, mut sigma) = (0.0, 0.0, 0.0);
    let (mut cos_sq_alpha, mut cos_2sigma_m) = (0.0, 0.0);

    for _ in 0..VINCENTY_MAX_ITERATIONS {
        let (sin_lambda, cos_lambda) = lambda.sin_cos();
        let t1 = cos_u2 * sin_lambda;
        let t2 = cos_u1 * sin_u2 - sin_u1 * cos_u2 * cos_lambda;
        sin_sigma = (t1 * t1 + t2 * t2).sqrt();
        if sin_sigma == 0.0 {
            // coincident points
            return Ok(0.0);
        }
        cos_sigma = sin_u1 * sin_u2 + cos_u1 * cos_u2 * cos_lambda;
        sigma = sin_sigma.atan2(cos_sigma);
        let sin_alpha = cos_u1 * cos_u2 * sin_lambda / sin_sigma;
        cos_sq_alpha = 1.0 - sin_alpha * sin_alpha;
        cos_2sigma_m = if cos_sq_alpha != 0.0 {
            cos_sigma - 2.0 * sin_u1 * sin_u2 / cos_sq_alpha
        } else {
            // equatorial line
            0.0
        };
        let C = f / 16.0 * cos_sq_alpha * (4.0 + f * (4.0 - 3.0 * cos_sq_alpha));
        let prev = lambda;
        lambda = L
            + (1.0 - C)
                * f
                * sin_alpha
                * (sigma
                    + C * sin_sigma
                        * (cos_2sigma_m + C * cos_sigma * (-1.0 + 2.0 * cos_2sigma_m * cos_2sigma_m)));
        if !lambda.is_finite() || lambda.abs() > std::f64::consts::PI {
            return Err(GeoError::NonConvergence);
        }
        if (lambda - prev).abs() < VINCENTY_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GeoError::NonConvergence);
    }

    let u_sq = cos_sq_alpha * (a * a - b * b) / (b * b);
    let A = 1.0 + u_sq / 16384.0 * (4096.0 + u_sq * (-768.0 + u_sq * (320.0 - 175.0 * u_sq)));
    let B = u_sq / 1024.0 * (256.0 + u_sq * (-128.0 + u_sq * (74.0 - 47.0 * u_sq)));
    let c2 = cos_2sigma_m * cos_2sigma_m;
    let delta_sigma = B
        * sin_sigma
        * (cos_2sigma_m
            + B / 4.0
                * (cos_sigma * (-1.0 + 2.0 * c2)
                    - B / 6.0 * cos_2sigma_m * (-3.0 + 4.0 * sin_sigma * sin_sigma) * (-3.0 + 4.0 * c2)));
    Ok(b * A * (sigma - delta_sigma))
}

/// Haversine great-circle distance on the mean-radius sphere.
pub fn great_circle_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (p, q) = if (a.lat, a.lon) <= (b.lat, b.lon) { (a, b) } else { (b, a) };
    let phi1 = p.lat.to_radians();
    let phi2 = q.lat.to_radians();
    let dphi = phi2 - phi1;
    let dlambda = normalize_lon(q.lon - p.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * MEAN_EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Vincenty distance, falling back to the spherical great circle for non-convergent pairs.
pub fn distance_with_fallback(a: GeoPoint, b: GeoPoint) -> f64 {
    vincenty_distance(a, b).unwrap_or_else(|_| great_circle_distance(a, b))
}

/// Cell nearest to `q`, as `(row, col, distance_m)`. Ties go to the smallest `(row, col)`.
pub fn nearest_pixel(grid: &PixelGrid, q: GeoPoint) -> (usize, usize, f64) {
    let mut best = (0, 0, f64::INFINITY);
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let d = distance_with_fallback(grid.point(row, col), q);
            // strict comparison keeps the first (lexicographically smallest) minimum
            if d < best.2 {
                best = (row, col, d);
            }
        }
    }
    best
}

/// Place a `w`-edge window so the `center` cell lands at offset `floor(w/2)` inside it.
pub fn extract_window(rows: usize, cols: usize, center: (usize, usize), w: usize) -> Result<WindowIndex, GeoError> {
    let (row, col) = center;
    let oob = GeoError::OutOfBounds { rows, cols, row, col, w };
    if w == 0 {
        return Err(oob);
    }
    let off = window_center_offset(w);
    if row < off || col < off || row - off + w > rows || col - off + w > cols {
        return Err(oob);
    }
    Ok(WindowIndex {
        row_start: row - off,
        col_start: col - off,
        size: w,
    })
}
