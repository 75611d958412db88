//! SVG figures: tone curves, loss curves and radiance histograms.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tonemap::{CONTROL_POINTS, SEGMENTS};

const SIZE: (u32, u32) = (640, 480);
const CHANNEL_COLORS: [RGBColor; 3] = [RED, GREEN, BLUE];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Invariant(format!("plotting failed: {e}"))
}

fn save(path: &Path, svg: String) -> Result<String> {
    std::fs::write(path, &svg).map_err(|e| Error::io(path, e))?;
    Ok(svg)
}

/// Learned curve per channel, optionally over the `x^(1/gamma)` reference.
pub fn crf_svg(points: &[[f64; CONTROL_POINTS]; 3], gamma: Option<f64>) -> Result<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("tone curve", ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(40)
            .build_cartesian_2d(0.0..1.0, 0.0..1.0)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("exposed radiance").y_desc("LDR value").draw().map_err(plot_err)?;
        let grid = |k: usize| k as f64 / SEGMENTS as f64;
        for (c, ch) in points.iter().enumerate() {
            chart
                .draw_series(LineSeries::new((0..CONTROL_POINTS).map(|k| (grid(k), ch[k])), CHANNEL_COLORS[c]))
                .map_err(plot_err)?;
        }
        if let Some(g) = gamma {
            chart
                .draw_series(LineSeries::new((0..CONTROL_POINTS).map(|k| (grid(k), grid(k).powf(1.0 / g))), BLACK.stroke_width(1)))
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

pub fn write_crf_plot(path: &Path, points: &[[f64; CONTROL_POINTS]; 3], gamma: Option<f64>) -> Result<String> {
    save(path, crf_svg(points, gamma)?)
}

/// One line per loss term on a log scale; non-positive values are skipped.
pub fn loss_svg(series: &[(String, Vec<(usize, f64)>)]) -> Result<String> {
    let pts: Vec<(usize, f64)> = series.iter().flat_map(|(_, s)| s.iter().copied()).filter(|p| p.1 > 0.0 && p.1.is_finite()).collect();
    if pts.is_empty() {
        return Err(Error::input("loss log has no positive values to plot"));
    }
    let max_step = pts.iter().map(|p| p.0).max().unwrap_or(0).max(1) as f64;
    let (lo, hi) = pts.iter().fold((f64::INFINITY, 0.0f64), |(l, h), p| (l.min(p.1), h.max(p.1)));
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("loss terms", ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..max_step, (lo * 0.9..hi * 1.1).log_scale())
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("step").draw().map_err(plot_err)?;
        for (i, (name, s)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let line: Vec<(f64, f64)> = s.iter().filter(|p| p.1 > 0.0 && p.1.is_finite()).map(|p| (p.0 as f64, p.1)).collect();
            if line.is_empty() {
                continue;
            }
            chart
                .draw_series(LineSeries::new(line, color.stroke_width(1)))
                .map_err(plot_err)?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

pub fn write_loss_plot(path: &Path, series: &[(String, Vec<(usize, f64)>)]) -> Result<String> {
    save(path, loss_svg(series)?)
}

/// Kernel density estimates of `log10` radiance on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub grid: Vec<f64>,
    pub predicted: Vec<f64>,
    pub ground_truth: Vec<f64>,
}

impl Histogram {
    /// Plain-text table `log10(E) pred gt`, one row per grid point.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# log10_radiance predicted ground_truth\n");
        for k in 0..self.grid.len() {
            s.push_str(&format!("{:.6} {:.9e} {:.9e}\n", self.grid[k], self.predicted[k], self.ground_truth[k]));
        }
        s
    }
}

/// Radiance floor below which values are clamped before taking the log.
const LOG_FLOOR: f64 = 1e-4;
const GRID: usize = 200;

fn log_values(img: &Image) -> Vec<f64> {
    img.data().iter().map(|v| v.max(LOG_FLOOR).log10()).collect()
}

/// Gaussian KDE with Silverman's bandwidth.
fn kde(values: &[f64], grid: &[f64], bandwidth: f64) -> Vec<f64> {
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|g| norm * values.iter().map(|v| (-0.5 * ((g - v) / bandwidth).powi(2)).exp()).sum::<f64>())
        .collect()
}

fn silverman(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (1.06 * sd * n.powf(-0.2)).max(1e-3)
}

/// Smoothed distributions of predicted and ground-truth log radiance.
///
/// Both use the ground truth's bandwidth so identical inputs give identical curves.
pub fn radiance_histogram(pred: &Image, gt: &Image) -> Result<Histogram> {
    pred.ensure_same_shape(gt)?;
    if gt.data().is_empty() {
        return Err(Error::input("empty image"));
    }
    let (lp, lg) = (log_values(pred), log_values(gt));
    let (lo, hi) = lp.iter().chain(&lg).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let (lo, hi) = (lo - 0.5, hi + 0.5);
    let grid: Vec<f64> = (0..GRID).map(|k| lo + (hi - lo) * k as f64 / (GRID - 1) as f64).collect();
    let bw = silverman(&lg);
    Ok(Histogram {
        predicted: kde(&lp, &grid, bw),
        ground_truth: kde(&lg, &grid, bw),
        grid,
    })
}

pub fn histogram_svg(h: &Histogram) -> Result<String> {
    let top = h.predicted.iter().chain(&h.ground_truth).copied().fold(0.0, f64::max).max(1e-9);
    let (lo, hi) = (h.grid[0], h.grid[h.grid.len() - 1]);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("log radiance", ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(lo..hi, 0.0..top * 1.05)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("log10 E").y_desc("density").draw().map_err(plot_err)?;
        for (vals, color, name) in [(&h.ground_truth, BLACK, "ground truth"), (&h.predicted, RED, "predicted")] {
            chart
                .draw_series(LineSeries::new(h.grid.iter().copied().zip(vals.iter().copied()), color))
                .map_err(plot_err)?
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Writes `<stem>.svg` and the `<stem>.txt` data table; returns the histogram.
pub fn write_histogram(dir: &Path, stem: &str, pred: &Image, gt: &Image) -> Result<Histogram> {
    let h = radiance_histogram(pred, gt)?;
    save(&dir.join(format!("{stem}.svg")), histogram_svg(&h)?)?;
    save(&dir.join(format!("{stem}.txt")), h.to_text())?;
    Ok(h)
}
