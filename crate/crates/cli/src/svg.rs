//! Self-contained SVG 1.1 line charts with byte-stable output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ChartError {
    #[error("series '{series}' is unusable: {reason}")]
    EmptySeries { series: String, reason: String },
    #[error("io error writing chart: {0}")]
    Io(String),
}

/// x and y values of one line.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartLabels {
    pub title: String,
    pub x: String,
    pub y: String,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn check(series: &BTreeMap<String, Series>) -> Result<(), ChartError> {
    if series.is_empty() {
        return Err(ChartError::EmptySeries {
            series: String::new(),
            reason: "no series given".into(),
        });
    }
    for (name, s) in series {
        let bad = |reason: &str| ChartError::EmptySeries {
            series: name.clone(),
            reason: reason.into(),
        };
        if s.x.is_empty() {
            return Err(bad("no points"));
        }
        if s.x.len() != s.y.len() {
            return Err(bad(&format!("{} x values vs {} y values", s.x.len(), s.y.len())));
        }
        if s.x.iter().chain(&s.y).any(|v| !v.is_finite()) {
            return Err(bad("contains a non-finite value"));
        }
    }
    Ok(())
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 { lo.abs() * 0.1 } else { 1.0 };
        (lo - pad, hi + pad)
    } else {
        (lo, hi)
    }
}

/// Render the chart as an SVG document.
pub fn render_svg_chart(series: &BTreeMap<String, Series>, labels: &ChartLabels) -> Result<String, ChartError> {
    check(series)?;
    let (x0, x1) = span(series.values().flat_map(|s| s.x.iter().copied()));
    let (y0, y1) = span(series.values().flat_map(|s| s.y.iter().copied()).chain([0.0]));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;
    let mut o = String::new();
    let _ = writeln!(o, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(o, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        o,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(&labels.title)
    );
    let _ = writeln!(
        o,
        r#"<path d="M{LEFT:.2},{TOP:.2} L{LEFT:.2},{:.2} L{:.2},{:.2}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(
            o,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(xv),
            TOP + ph + 18.0,
            tick(xv)
        );
        let _ = writeln!(
            o,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        o,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(&labels.x)
    );
    let _ = writeln!(
        o,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&labels.y)
    );
    for (i, (name, s)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(o, r#"<g stroke="{color}" fill="{color}">"#);
        if s.x.len() > 1 {
            let pts: Vec<String> = s.x.iter().zip(&s.y).map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(o, r#"<polyline points="{}" fill="none" stroke-width="2"/>"#, pts.join(" "));
        }
        for (&x, &y) in s.x.iter().zip(&s.y) {
            let _ = writeln!(o, r#"<circle cx="{:.2}" cy="{:.2}" r="3"/>"#, sx(x), sy(y));
        }
        let ly = TOP + 10.0 + i as f64 * 18.0;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(o, r#"<rect x="{lx:.2}" y="{:.2}" width="12" height="4"/>"#, ly - 4.0);
        let _ = writeln!(
            o,
            r#"<text x="{:.2}" y="{:.2}" stroke="none" fill="black">{}</text>"#,
            lx + 18.0,
            ly + 2.0,
            escape(name)
        );
        let _ = writeln!(o, "</g>");
    }
    o.push_str("</svg>\n");
    Ok(o)
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

pub fn emit_svg_chart(series: &BTreeMap<String, Series>, labels: &ChartLabels, path: &Path) -> Result<(), ChartError> {
    let doc = render_svg_chart(series, labels)?;
    std::fs::write(path, doc).map_err(|e| ChartError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> ChartLabels {
        ChartLabels {
            title: "MAE vs tolerance".into(),
            x: "delta".into(),
            y: "MAE x 100".into(),
        }
    }

    fn one(name: &str, x: Vec<f64>, y: Vec<f64>) -> BTreeMap<String, Series> {
        [(name.to_string(), Series { x, y })].into_iter().collect()
    }

    #[test]
    fn single_point_has_one_marker() {
        let svg = render_svg_chart(&one("a", vec![0.0], vec![1.0]), &labels()).unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(!svg.contains("<polyline"));
        assert!(svg.starts_with("<?xml") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains(">delta<") && svg.contains(">MAE x 100<"));
    }

    #[test]
    fn deterministic_bytes() {
        let mut m = one("persistence", vec![0.0, 0.02, 0.05], vec![2.8, 5.2, 8.1]);
        m.insert("forest".into(), Series { x: vec![0.0, 0.02, 0.05], y: vec![1.8, 2.7, 3.3] });
        let a = render_svg_chart(&m, &labels()).unwrap();
        let b = render_svg_chart(&m, &labels()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.matches("<polyline").count(), 2);
    }

    #[test]
    fn nan_names_the_series() {
        let e = render_svg_chart(&one("cnnlstm", vec![0.0, 1.0], vec![1.0, f64::NAN]), &labels()).unwrap_err();
        assert!(matches!(&e, ChartError::EmptySeries { series, .. } if series == "cnnlstm"));
        assert!(matches!(render_svg_chart(&BTreeMap::new(), &labels()), Err(ChartError::EmptySeries { .. })));
        assert!(matches!(
            render_svg_chart(&one("x", vec![0.0, 1.0], vec![1.0]), &labels()),
            Err(ChartError::EmptySeries { .. })
        ));
        assert!(matches!(render_svg_chart(&one("x", vec![], vec![]), &labels()), Err(ChartError::EmptySeries { .. })));
    }

    #[test]
    fn labels_are_escaped() {
        let l = ChartLabels {
            title: "a < b & c".into(),
            ..labels()
        };
        let svg = render_svg_chart(&one("<m>", vec![0.0], vec![0.0]), &l).unwrap();
        assert!(svg.contains("a &lt; b &amp; c") && svg.contains("&lt;m&gt;"));
    }
}
