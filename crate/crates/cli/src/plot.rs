//! Per-metric bar charts over evaluated datasets, as SVG.

use std::path::{Path, PathBuf};

use cotedit_core::evaluation::MetricReport;
use plotters::prelude::*;

const SLUGS: [&str; 5] = ["edit_success", "paraphrase", "locality", "neighborhood", "multihop"];

/// Writes `<dir>/<metric>.svg` for every metric present in at least one
/// report, with one bar per dataset, and returns the written paths.
pub fn metric_charts(dir: &Path, reports: &[MetricReport]) -> Result<Vec<PathBuf>, Box<dyn std::error::Error>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (m, slug) in SLUGS.iter().enumerate() {
        let bars: Vec<(&str, f64)> = reports
            .iter()
            .filter_map(|r| r.metrics()[m].1.map(|v| (r.dataset.as_str(), v.value * 100.0)))
            .collect();
        if bars.is_empty() {
            continue;
        }
        let title = reports[0].metrics()[m].0;
        let path = dir.join(format!("{slug}.svg"));
        bar_chart(&path, title, &bars)?;
        written.push(path);
    }
    Ok(written)
}

fn bar_chart(path: &Path, title: &str, bars: &[(&str, f64)]) -> Result<(), Box<dyn std::error::Error>> {
    let width = 160 + 120 * bars.len() as u32;
    let root = SVGBackend::new(path, (width, 400)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d((0..bars.len()).into_segmented(), 0.0..100.0)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc("%")
        .x_labels(bars.len())
        .x_label_formatter(&|x| match x {
            SegmentValue::CenterOf(i) => bars.get(*i).map_or_else(String::new, |b| b.0.to_string()),
            _ => String::new(),
        })
        .draw()?;
    chart.draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
        let mut bar = Rectangle::new(
            [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), *v)],
            BLUE.mix(0.6).filled(),
        );
        bar.set_margin(0, 0, 12, 12);
        bar
    }))?;
    root.present()?;
    Ok(())
}
