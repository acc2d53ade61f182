use geographiclib_rs::{Geodesic, InverseGeodesic};
use helios_core::geo::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn karney(a: GeoPoint, b: GeoPoint) -> f64 {
    let s12: f64 = Geodesic::wgs84().inverse(a.lat(), a.lon(), b.lat(), b.lon());
    s12
}

#[test]
fn vincenty_matches_reference_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < 1000 {
        let a = GeoPoint::new(rng.random_range(-89.0..89.0), rng.random_range(-180.0..180.0)).unwrap();
        let b = GeoPoint::new(rng.random_range(-89.0..89.0), rng.random_range(-180.0..180.0)).unwrap();
        let Ok(d) = vincenty_distance(a, b) else { continue };
        worst = worst.max((d - karney(a, b)).abs());
        n += 1;
    }
    assert!(worst < 1.0, "worst {worst} m");
}

#[test]
fn equator_degree() {
    let d = vincenty_distance(GeoPoint::new(0.0, 0.0).unwrap(), GeoPoint::new(0.0, 1.0).unwrap()).unwrap();
    assert!((d - 111_319.491).abs() <= 1e-3, "{d}");
}

/// Row-major grid around `origin` with jittered cells.
fn jittered_grid(rows: usize, cols: usize, origin: (f64, f64), step: f64, jitter: f64, seed: u64) -> PixelGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lat = Vec::new();
    let mut lon = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            lat.push(origin.0 - r as f64 * step + rng.random_range(-jitter..=jitter));
            lon.push(origin.1 + c as f64 * step + rng.random_range(-jitter..=jitter));
        }
    }
    PixelGrid::new(rows, cols, lat, lon).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nearest_pixel_matches_reference_scan(
        rows in 1usize..=50,
        cols in 1usize..=50,
        lat0 in -60.0f64..60.0,
        lon0 in -179.0f64..179.0,
        step in 0.005f64..0.05,
        seed in any::<u64>(),
        qr in 0.0f64..1.0,
        qc in 0.0f64..1.0,
    ) {
        let grid = jittered_grid(rows, cols, (lat0, lon0), step, step * 0.3, seed);
        let q = GeoPoint::new(lat0 - qr * rows as f64 * step, lon0 + qc * cols as f64 * step).unwrap();
        let (r, c, d) = nearest_pixel(&grid, q);
        let mut dists: Vec<(f64, usize, usize)> = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| (karney(grid.point(i, j), q), i, j))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let best = dists[0];
        prop_assert!((d - best.0).abs() < 1e-3);
        // Distinct cells closer than a millimeter apart are ties for either method.
        let tied = dists.len() > 1 && dists[1].0 - best.0 < 1e-3;
        if !tied {
            prop_assert_eq!((r, c), (best.1, best.2));
        }
    }

    #[test]
    fn exact_cell_query_finds_itself(rows in 1usize..=20, cols in 1usize..=20, seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let grid = jittered_grid(rows, cols, (35.0, -100.0), 0.02, 0.005, seed);
        let k = pick.index(rows * cols);
        let (r, c, d) = nearest_pixel(&grid, grid.point(k / cols, k % cols));
        prop_assert_eq!(d, 0.0);
        prop_assert_eq!((r, c), (k / cols, k % cols));
    }

    #[test]
    fn distance_is_symmetric(a in -89.0f64..89.0, b in -180.0f64..180.0, c in -89.0f64..89.0, d in -180.0f64..180.0) {
        let p = GeoPoint::new(a, b).unwrap();
        let q = GeoPoint::new(c, d).unwrap();
        prop_assert_eq!(distance_with_fallback(p, q).to_bits(), distance_with_fallback(q, p).to_bits());
    }

    #[test]
    fn window_contains_center(rows in 1usize..40, cols in 1usize..40, w in 1usize..12, r in 0usize..40, c in 0usize..40) {
        if let Ok(win) = extract_window(rows, cols, (r, c), w) {
            prop_assert_eq!(win.row_start + window_center_offset(w), r);
            prop_assert_eq!(win.col_start + window_center_offset(w), c);
            prop_assert!(win.row_start + w <= rows && win.col_start + w <= cols);
        }
    }
}
