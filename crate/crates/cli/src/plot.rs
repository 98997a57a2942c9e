//! Static SVG line plots of emitted tables.

use std::fmt::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::output::Table;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Spectrum,
    Decay,
    Sweep,
    Fringe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSpec {
    pub kind: PlotKind,
    #[serde(default)]
    pub title: String,
    /// Defaults to the data file with an `.svg` extension.
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn unit_label(unit: &str) -> &str {
    match unit {
        "us" => "μs",
        "uT" => "μT",
        other => other,
    }
}

fn require_unit(t: &Table, i: usize, units: &[&str], kind: PlotKind) -> Result<()> {
    match t.columns.get(i) {
        Some(c) if units.contains(&c.unit.as_str()) => Ok(()),
        Some(c) => Err(CliError::Plot(format!(
            "{kind:?} plot needs column {i} in {units:?}, found `{}`",
            c.header()
        ))),
        None => Err(CliError::Plot(format!("{kind:?} plot needs at least {} columns", i + 1))),
    }
}

fn is_error_column(name: &str) -> bool {
    name == "stderr" || name.ends_with("_err")
}

/// Maps a table onto a figure, rejecting tables whose schema does not fit `kind`.
pub fn figure_from_table(t: &Table, kind: PlotKind, title: &str) -> Result<Figure> {
    let x_unit = |i: usize| unit_label(&t.columns[i].unit).to_string();
    match kind {
        PlotKind::Spectrum | PlotKind::Decay | PlotKind::Fringe => {
            let (x_units, x_name): (&[&str], &str) = match kind {
                PlotKind::Spectrum => (&["MHz"], "probe frequency"),
                PlotKind::Decay => (&["us"], "time"),
                _ => (&["rad"], "phase"),
            };
            require_unit(t, 0, x_units, kind)?;
            require_unit(t, 1, &["1"], kind)?;
            let x = t.column(0);
            let series = (1..t.columns.len())
                .filter(|&i| !is_error_column(&t.columns[i].name))
                .map(|i| Series {
                    name: t.columns[i].name.clone(),
                    points: x.iter().copied().zip(t.column(i)).collect(),
                })
                .collect();
            let y_label = if kind == PlotKind::Fringe { "probability" } else { "ΔPL/PL" };
            Ok(Figure {
                title: title.to_string(),
                x_label: format!("{x_name} ({})", x_unit(0)),
                y_label: y_label.to_string(),
                series,
            })
        }
        PlotKind::Sweep => {
            require_unit(t, 0, &["uT", "MHz"], kind)?;
            let col = |name: &str| {
                t.index(name)
                    .ok_or_else(|| CliError::Plot(format!("sweep plot needs a `{name}` column")))
            };
            let branches = [col("low")?, col("central")?, col("high")?];
            let fan = col("drive_frequency")?;
            let control_is_fan = t.columns[0].name == "drive_frequency";
            let mut fans: Vec<f64> = Vec::new();
            for r in &t.rows {
                let f = if control_is_fan { 0.0 } else { r[fan] };
                if !fans.iter().any(|v| v.to_bits() == f.to_bits()) {
                    fans.push(f);
                }
            }
            let mut series = Vec::new();
            for f in &fans {
                for (&bi, bname) in branches.iter().zip(["low", "central", "high"]) {
                    let name = if control_is_fan || fans.len() == 1 {
                        bname.to_string()
                    } else {
                        format!("{bname} @ {f:.2} MHz")
                    };
                    let points = t
                        .rows
                        .iter()
                        .filter(|r| control_is_fan || r[fan].to_bits() == f.to_bits())
                        .map(|r| (r[0], r[bi]))
                        .collect();
                    series.push(Series { name, points });
                }
            }
            let x_name = if control_is_fan { "drive frequency" } else { "drive amplitude" };
            Ok(Figure {
                title: title.to_string(),
                x_label: format!("{x_name} ({})", x_unit(0)),
                y_label: "peak frequency (MHz)".to_string(),
                series,
            })
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick positions and the number of decimals that distinguishes them.
fn ticks(lo: f64, hi: f64) -> (Vec<f64>, usize) {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    ((first..=last).map(|k| k as f64 * step).collect(), decimals)
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        return None;
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    Some((lo - pad, hi + pad))
}

/// Renders a figure; identical figures give identical bytes.
pub fn render_svg(fig: &Figure) -> String {
    let finite = |p: &&(f64, f64)| p.0.is_finite() && p.1.is_finite();
    let all = || fig.series.iter().flat_map(|s| s.points.iter().filter(finite));
    let empty = all().next().is_none();
    let (x0, x1) = range(all().map(|p| p.0)).unwrap_or((0.0, 1.0));
    let (y0, y1) = range(all().map(|p| p.1)).unwrap_or((0.0, 1.0));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(&fig.title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );

    let (xt, xd) = ticks(x0, x1);
    for v in xt {
        let x = sx(v);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{v:.xd$}</text>"#,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0
        );
    }
    let (yt, yd) = ticks(y0, y1);
    for v in yt {
        let y = sy(v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.yd$}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0,
        escape(&fig.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.1}" text-anchor="middle" transform="rotate(-90 20 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&fig.y_label)
    );

    if empty {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="gray">no data</text>"#,
            LEFT + pw / 2.0,
            TOP + ph / 2.0
        );
    }
    for (k, series) in fig.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = series
            .points
            .iter()
            .filter(finite)
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let ly = TOP + 10.0 + 16.0 * k as f64;
        let lx = WIDTH - RIGHT + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 18.0,
            lx + 22.0,
            ly + 4.0,
            escape(&series.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sweep_table() -> Table {
        let mut t = Table::new(&[
            ("b_drive", "uT"),
            ("drive_frequency", "MHz"),
            ("low", "MHz"),
            ("low_err", "MHz"),
            ("central", "MHz"),
            ("central_err", "MHz"),
            ("high", "MHz"),
            ("high_err", "MHz"),
        ]);
        for b in [10.0, 20.0, 30.0] {
            let w = 2837.05;
            let r = 0.028 * b;
            t.push(vec![b, w, w - r, 1e-3, w, 1e-3, w + r, 1e-3]);
        }
        t
    }

    #[test]
    fn empty_data_gives_annotated_axes() {
        let t = Table::new(&[("probe_frequency", "MHz"), ("contrast", "1"), ("stderr", "1")]);
        let svg = render_svg(&figure_from_table(&t, PlotKind::Spectrum, "empty").unwrap());
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("no data"));
        assert!(svg.contains("probe frequency (MHz)"));
        assert!(!svg.contains("<polyline"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let t = sweep_table();
        let a = render_svg(&figure_from_table(&t, PlotKind::Sweep, "fan").unwrap());
        let b = render_svg(&figure_from_table(&t.clone(), PlotKind::Sweep, "fan").unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn power_sweep_has_one_polyline_per_branch() {
        let svg = render_svg(&figure_from_table(&sweep_table(), PlotKind::Sweep, "fan").unwrap());
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("drive amplitude (μT)"));
    }

    #[test]
    fn decay_labels_and_error_columns() {
        let t = Table::from_columns(
            &[("time", "us"), ("signal", "1"), ("stderr", "1")],
            &[&[0.0, 1.0, 2.0], &[0.5, 0.3, 0.2], &[0.01, 0.01, 0.01]],
        );
        let f = figure_from_table(&t, PlotKind::Decay, "echo").unwrap();
        assert_eq!(f.series.len(), 1);
        assert_eq!(f.x_label, "time (μs)");
        assert_eq!(f.y_label, "ΔPL/PL");
    }

    #[test]
    fn schema_mismatch_rejected() {
        let t = Table::from_columns(&[("time", "us"), ("signal", "1")], &[&[0.0], &[1.0]]);
        assert!(figure_from_table(&t, PlotKind::Spectrum, "").is_err());
        assert!(figure_from_table(&t, PlotKind::Sweep, "").is_err());
    }

    #[test]
    fn tick_steps_are_round() {
        let (t, d) = ticks(2836.0, 2838.1);
        assert_eq!(t, vec![2836.0, 2836.5, 2837.0, 2837.5, 2838.0]);
        assert_eq!(d, 1);
    }
}
