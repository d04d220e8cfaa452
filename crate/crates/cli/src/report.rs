//! Static SVG plots of training logs.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use qyolop::trainer::EpochLog;
use qyolop::{Error, Result};

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("plotting failed: {e}"))
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn line_chart(path: &Path, title: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).filter(|v| v.is_finite()).collect();
    let x_max = xs.fold(1.0f64, f64::max);
    let (mut y_min, mut y_max) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_max - y_min < 1e-9 {
        y_max = y_min + 1.0;
    }
    let root = SVGBackend::new(path, (900, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..x_max, y_min..y_max)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("epoch (cumulative over stages)")
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes `loss.svg` and `metrics.svg` under `out`; returns their paths.
pub fn plot(runs: &[(String, Vec<EpochLog>)], out: &Path) -> Result<Vec<PathBuf>> {
    let mut loss = Vec::new();
    let mut metrics = Vec::new();
    for (name, logs) in runs {
        let x = |i: usize| (i + 1) as f64;
        loss.push(Series {
            label: format!("{name} total"),
            points: logs.iter().enumerate().map(|(i, l)| (x(i), l.loss.total)).collect(),
        });
        let evals: Vec<(usize, &qyolop::trainer::EvalSummary)> =
            logs.iter().enumerate().filter_map(|(i, l)| l.eval.as_ref().map(|e| (i, e))).collect();
        if !evals.is_empty() {
            metrics.push(Series {
                label: format!("{name} mAP@0.5"),
                points: evals.iter().map(|(i, e)| (x(*i), e.map50)).collect(),
            });
            metrics.push(Series {
                label: format!("{name} merged mIoU"),
                points: evals.iter().map(|(i, e)| (x(*i), e.merged_miou)).collect(),
            });
        }
    }
    let mut files = vec![out.join("loss.svg")];
    line_chart(&files[0], "training loss", "loss", &loss)?;
    if !metrics.is_empty() {
        let p = out.join("metrics.svg");
        line_chart(&p, "held-out metrics", "score", &metrics)?;
        files.push(p);
    }
    Ok(files)
}
