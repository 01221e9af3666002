//! Dice and loss curves from a metrics log. The bitmap backend is built
//! without fonts, so charts carry no text; the colour key is fixed (see
//! `SERIES_COLOURS`) and printed to stderr.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use c2p::trainer::{read_metrics, MetricReport};
use plotters::prelude::*;

const SERIES_COLOURS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

type Series = (String, Vec<(f64, f64)>);

fn series(rows: &[MetricReport], split: &str, name: &str, f: impl Fn(&MetricReport) -> f64) -> Series {
    let pts = rows
        .iter()
        .filter(|r| r.split == split && r.label.is_none())
        .map(|r| (r.epoch as f64, f(r)))
        .collect();
    (format!("{split} {name}"), pts)
}

fn draw(path: &Path, series: &[Series]) -> Result<()> {
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x1, mut y0, mut y1) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !y0.is_finite() {
        y0 = 0.0;
        y1 = 1.0;
    }
    if y1 - y0 < 1e-9 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let root = BitMapBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .build_cartesian_2d(0.0..x1, (y0 - pad)..(y1 + pad))?;
    chart
        .configure_mesh()
        .x_labels(0)
        .y_labels(0)
        .light_line_style(RGBColor(235, 235, 235))
        .draw()?;
    for (i, (_, pts)) in series.iter().enumerate() {
        let colour = SERIES_COLOURS[i % SERIES_COLOURS.len()];
        chart.draw_series(LineSeries::new(pts.iter().copied(), colour.stroke_width(2)))?;
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, colour.filled())))?;
    }
    root.present()?;
    Ok(())
}

fn colour_name(i: usize) -> &'static str {
    ["blue", "orange", "green", "red", "purple", "brown"][i % 6]
}

pub fn plot(metrics: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_metrics(metrics)?;
    if rows.iter().all(|r| r.label.is_some()) {
        bail!(c2p::Error::SchemaViolation(format!("{}: no per-epoch rows", metrics.display())));
    }
    std::fs::create_dir_all(out)?;
    let dice = vec![series(&rows, "train", "dice", |r| r.dice), series(&rows, "val", "dice", |r| r.dice)];
    let loss = vec![
        series(&rows, "train", "l_seg", |r| r.l_seg),
        series(&rows, "train", "l_geo", |r| r.l_geo),
        series(&rows, "train", "l_sem", |r| r.l_sem),
        series(&rows, "val", "l_seg", |r| r.l_seg),
        series(&rows, "val", "l_geo", |r| r.l_geo),
        series(&rows, "val", "l_sem", |r| r.l_sem),
    ];
    let mut written = Vec::new();
    for (file, s) in [("dice.png", &dice), ("loss.png", &loss)] {
        let p = out.join(file);
        draw(&p, s).map_err(|e| anyhow::anyhow!("drawing {}: {e}", p.display()))?;
        let key: Vec<String> = s.iter().enumerate().map(|(i, s)| format!("{}={}", colour_name(i), s.0)).collect();
        eprintln!("{}: x = epoch; {}", p.display(), key.join(", "));
        written.push(p);
    }
    Ok(written)
}
