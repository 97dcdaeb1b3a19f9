//! SVG charts of metrics CSVs: one chart per metric and x-axis, one series per file.

use std::path::{Path, PathBuf};

use plotters::coord::ranged1d::{AsRangedCoord, ValueFormatter};
use plotters::prelude::*;

use crate::error::{HarnessError, Result};
use crate::metrics::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XAxis {
    Samples,
    WallTime,
}

impl XAxis {
    pub const ALL: [XAxis; 2] = [XAxis::Samples, XAxis::WallTime];

    fn column(self) -> &'static str {
        match self {
            XAxis::Samples => "samples_seen",
            XAxis::WallTime => "wall_ms",
        }
    }

    fn label(self) -> &'static str {
        match self {
            XAxis::Samples => "samples",
            XAxis::WallTime => "wall_time",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub metrics: Vec<String>,
    pub log_wall_time: bool,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub path: PathBuf,
    pub metric: String,
    pub axis: XAxis,
    pub series: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotOutcome {
    pub charts: Vec<Chart>,
    pub skipped: Vec<String>,
}

pub fn emit_plots(csvs: &[PathBuf], spec: &PlotSpec) -> Result<PlotOutcome> {
    if csvs.is_empty() {
        return Err(HarnessError::Plot("no CSV files given".into()));
    }
    if spec.metrics.is_empty() {
        return Err(HarnessError::Plot("no metrics given".into()));
    }
    let tables = csvs.iter().map(|p| Table::read(p)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&spec.out_dir).map_err(|e| HarnessError::io(&spec.out_dir, e))?;
    let mut out = PlotOutcome::default();
    for metric in &spec.metrics {
        if !tables.iter().any(|t| t.headers.iter().any(|h| h == metric)) {
            log::warn!("metric `{metric}` is not a column of any input; chart skipped");
            out.skipped.push(metric.clone());
            continue;
        }
        for axis in XAxis::ALL {
            let series: Vec<(String, Vec<(f64, f64)>)> = tables
                .iter()
                .filter_map(|t| Some((series_name(&t.path), t.series(axis.column(), metric)?)))
                .collect();
            let path = spec.out_dir.join(format!("{metric}_vs_{}.svg", axis.label()));
            let log_x = axis == XAxis::WallTime && spec.log_wall_time;
            draw(&path, metric, axis, log_x, &series)?;
            out.charts.push(Chart { path, metric: metric.clone(), axis, series: series.len() });
        }
    }
    Ok(out)
}

fn series_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 * (1.0 + lo.abs()) {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.03 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn plot_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Plot(e.to_string())
}

fn draw(path: &Path, metric: &str, axis: XAxis, log_x: bool, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let points = || series.iter().flat_map(|(_, s)| s.iter());
    let (y0, y1) = bounds(points().map(|p| p.1));
    if log_x {
        let hi = points().map(|p| p.0).fold(1.0, f64::max).max(2.0);
        render(path, metric, axis, (1.0..hi).log_scale(), y0..y1, series, |x| x.max(1.0))
    } else {
        let (x0, x1) = bounds(points().map(|p| p.0));
        render(path, metric, axis, x0..x1, y0..y1, series, |x| x)
    }
}

fn render<X>(
    path: &Path,
    metric: &str,
    axis: XAxis,
    x_range: X,
    y_range: std::ops::Range<f64>,
    series: &[(String, Vec<(f64, f64)>)],
    clamp_x: impl Fn(f64) -> f64,
) -> Result<()>
where
    X: AsRangedCoord<Value = f64>,
    X::CoordDescType: ValueFormatter<f64>,
{
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{metric} vs {}", axis.label()), ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(x_range, y_range)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(match axis {
            XAxis::Samples => "samples seen",
            XAxis::WallTime => "wall time (ms)",
        })
        .y_desc(metric)
        .draw()
        .map_err(plot_err)?;
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().map(|&(x, y)| (clamp_x(x), y)), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
