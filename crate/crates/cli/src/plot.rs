use std::path::Path;

use anyhow::anyhow;
use plotters::prelude::*;

/// Metric against sweep value as an SVG line chart. Points sit at equal
/// spacing and are labelled with their values, since sweep lists are
/// roughly geometric.
pub fn sweep_curve(path: &Path, parameter: &str, metric: &str, points: &[(f64, f64)]) -> anyhow::Result<()> {
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let (lo, hi) = points
        .iter()
        .map(|p| p.1)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    let (lo, hi) = if points.is_empty() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.1 * (hi - lo);
        (lo - pad, hi + pad)
    };
    let n = points.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{metric} vs {parameter}"), ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(-0.5f64..(n as f64 - 0.5), lo..hi)
        .map_err(|e| anyhow!("{e}"))?;
    let labels: Vec<String> = points.iter().map(|p| format!("{}", p.0)).collect();
    chart
        .configure_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                labels.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .x_desc(parameter)
        .y_desc(metric)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    let series: Vec<(f64, f64)> = points.iter().enumerate().map(|(i, p)| (i as f64, p.1)).collect();
    chart
        .draw_series(LineSeries::new(series.clone(), &BLUE))
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .draw_series(series.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}
