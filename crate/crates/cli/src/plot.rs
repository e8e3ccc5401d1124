//! Byte-deterministic SVG line charts from report CSVs.
//!
//! Recognised headers:
//!
//! | header | x | series |
//! |---|---|---|
//! | `epoch,train_loss,test_loss,penalty` | epoch | one per loss column |
//! | `alpha,beta,loss` | alpha | one per beta |
//! | `t,loss,d` | t | loss and d |
//! | `bit_width,variant,stressor_param,mean_loss,std_loss,n_seeds` | stressor_param | one per (variant, bits) |
//! | `bit_width,variant,mean,std,n_seeds` | bit_width | one per variant |
//! | `x,y` | x | one |
//! | `series,x,y` | x | one per series |

use std::fmt::Write as _;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Line,
    MultiLine,
}

impl PlotKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "line" => Some(PlotKind::Line),
            "multi-line" => Some(PlotKind::MultiLine),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;

fn mismatch(msg: impl Into<String>) -> CliError {
    CliError::config(format!("plot: {}", msg.into()))
}

fn num(s: &str) -> Result<f64> {
    match s.trim() {
        "nan" | "NaN" | "" => Ok(f64::NAN),
        t => t.parse().map_err(|_| mismatch(format!("'{}' is not a number", t))),
    }
}

/// Appends `(x, y)` to the series named `label`, creating it in first-seen order.
fn push(series: &mut Vec<Series>, label: &str, x: f64, y: f64) {
    match series.iter_mut().find(|s| s.label == label) {
        Some(s) => s.points.push((x, y)),
        None => series.push(Series { label: label.to_string(), points: vec![(x, y)] }),
    }
}

pub fn chart_from_csv(text: &str, title: &str) -> Result<Chart> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> =
        rdr.headers().map_err(|e| mismatch(e.to_string()))?.iter().map(|h| h.trim().to_string()).collect();
    let rows: Vec<csv::StringRecord> =
        rdr.records().collect::<std::result::Result<_, _>>().map_err(|e| mismatch(e.to_string()))?;
    if rows.is_empty() {
        return Err(mismatch("no data rows"));
    }
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut series = Vec::new();
    let (x_label, y_label) = match h.as_slice() {
        ["epoch", "train_loss", "test_loss", "penalty"] => {
            for r in &rows {
                let x = num(&r[0])?;
                for (c, name) in h.iter().enumerate().skip(1) {
                    push(&mut series, name, x, num(&r[c])?);
                }
            }
            ("epoch", "loss")
        }
        ["alpha", "beta", "loss"] => {
            let betas: Vec<f64> = rows.iter().map(|r| num(&r[1])).collect::<Result<_>>()?;
            let single = betas.iter().all(|&b| b == betas[0]);
            for r in &rows {
                let label = if single { "loss".to_string() } else { format!("beta={}", &r[1]) };
                push(&mut series, &label, num(&r[0])?, num(&r[2])?);
            }
            ("alpha", "loss")
        }
        ["t", "loss", "d"] => {
            for r in &rows {
                let t = num(&r[0])?;
                push(&mut series, "loss", t, num(&r[1])?);
                push(&mut series, "d", t, num(&r[2])?);
            }
            ("t", "loss")
        }
        ["bit_width", "variant", "stressor_param", "mean_loss", "std_loss", "n_seeds"] => {
            for r in &rows {
                push(&mut series, &format!("{} b{}", &r[1], &r[0]), num(&r[2])?, num(&r[3])?);
            }
            ("stressor level", "mean loss")
        }
        ["bit_width", "variant", "mean", "std", "n_seeds"] => {
            for r in &rows {
                push(&mut series, &r[1], num(&r[0])?, num(&r[2])?);
            }
            ("bit width", "mean over seeds")
        }
        ["x", "y"] => {
            for r in &rows {
                push(&mut series, "y", num(&r[0])?, num(&r[1])?);
            }
            ("x", "y")
        }
        ["series", "x", "y"] => {
            for r in &rows {
                push(&mut series, &r[0], num(&r[1])?, num(&r[2])?);
            }
            ("x", "y")
        }
        _ => return Err(mismatch(format!("unrecognised header '{}'", header.join(",")))),
    };
    Ok(Chart { title: title.to_string(), x_label: x_label.into(), y_label: y_label.into(), series })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{:.2e}", v)
    } else {
        let s = format!("{:.3}", v);
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" { "0".into() } else { s.to_string() }
    }
}

fn bounds(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return None;
    }
    Some(if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) })
}

/// Renders `chart`. `Line` requires exactly one series.
pub fn render_svg(chart: &Chart, kind: PlotKind) -> Result<String> {
    if kind == PlotKind::Line && chart.series.len() != 1 {
        return Err(mismatch(format!("line plot needs one series, CSV has {}", chart.series.len())));
    }
    let pts = || chart.series.iter().flat_map(|s| s.points.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (Some((x0, x1)), Some((y0, y1))) = (bounds(pts().map(|p| p.0)), bounds(pts().map(|p| p.1))) else {
        return Err(mismatch("no finite data points"));
    };
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="13">{}</text>"#, LEFT + pw / 2.0, escape(&chart.title));
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#, TOP + ph, LEFT + pw, TOP + ph);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}" stroke="black"/>"#, TOP + ph);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(s, r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, TOP + ph, TOP + ph + 4.0);
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, TOP + ph + 16.0, tick(xv));
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/>"#, LEFT - 4.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, py + 4.0, tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 10.0, escape(&chart.x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&chart.y_label)
    );
    for (i, ser) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let verts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, verts.join(" "));
        let ly = TOP + 8.0 + 16.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 24.0, ly + 4.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_plot(csv_text: &str, kind: PlotKind, title: &str) -> Result<String> {
    render_svg(&chart_from_csv(csv_text, title)?, kind)
}
