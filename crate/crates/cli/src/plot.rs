//! λ-sweep data file and SVG plot.

use std::path::Path;

use motiongen_core::metrics::{MetricReport, Stat};
use plotters::prelude::*;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub fid: Stat,
    pub multimodality: Option<Stat>,
    pub r_precision: Stat,
    pub mm_dist: Stat,
    pub diversity: Stat,
}

impl SweepRow {
    pub fn new(lambda: f64, r: &MetricReport) -> Self {
        Self {
            lambda,
            fid: r.fid,
            multimodality: r.multimodality,
            r_precision: r.r_precision_top3,
            mm_dist: r.mm_dist,
            diversity: r.diversity,
        }
    }

    pub fn csv(rows: &[SweepRow]) -> String {
        let mut out = String::from(
            "lambda,fid,fid_ci,multimodality,multimodality_ci,r_precision_top3,r_precision_ci,mm_dist,mm_dist_ci,diversity,diversity_ci\n",
        );
        for r in rows {
            let (mm, mm_ci) = r.multimodality.map_or((String::new(), String::new()), |s| {
                (format!("{:.6}", s.mean), format!("{:.6}", s.half_width))
            });
            out += &format!(
                "{},{:.6},{:.6},{mm},{mm_ci},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.lambda,
                r.fid.mean,
                r.fid.half_width,
                r.r_precision.mean,
                r.r_precision.half_width,
                r.mm_dist.mean,
                r.mm_dist.half_width,
                r.diversity.mean,
                r.diversity.half_width
            );
        }
        out
    }
}

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("plot: {e}"))
}

fn panel(
    area: &DrawingArea<SVGBackend, plotters::coord::Shift>,
    title: &str,
    points: &[(f64, Stat)],
) -> Result<(), CliError> {
    let lo = points
        .iter()
        .map(|(_, s)| s.mean - s.half_width)
        .fold(f64::INFINITY, f64::min);
    let hi = points
        .iter()
        .map(|(_, s)| s.mean + s.half_width)
        .fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.1).max(1e-3);
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(-0.05f64..1.05f64, (lo - pad)..(hi + pad))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("λ")
        .y_desc(title)
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(points.iter().map(|(l, s)| (*l, s.mean)), &BLUE))
        .map_err(plot_err)?;
    chart
        .draw_series(points.iter().map(|(l, s)| {
            ErrorBar::new_vertical(
                *l,
                s.mean - s.half_width,
                s.mean,
                s.mean + s.half_width,
                BLUE.filled(),
                6,
            )
        }))
        .map_err(plot_err)?;
    Ok(())
}

/// FID and multimodality against λ, with 95% intervals.
pub fn sweep_plot(path: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    if rows.is_empty() {
        return Err(CliError::Runtime("nothing to plot".into()));
    }
    let root = SVGBackend::new(path, (960, 380)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let halves = root.split_evenly((1, 2));
    panel(
        &halves[0],
        "FID",
        &rows.iter().map(|r| (r.lambda, r.fid)).collect::<Vec<_>>(),
    )?;
    let mm: Vec<(f64, Stat)> = rows
        .iter()
        .filter_map(|r| r.multimodality.map(|m| (r.lambda, m)))
        .collect();
    if !mm.is_empty() {
        panel(&halves[1], "Multimodality", &mm)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stat(mean: f64) -> Stat {
        Stat {
            mean,
            half_width: 0.01,
            runs: 3,
        }
    }

    #[test]
    fn csv_and_svg() {
        let rows: Vec<SweepRow> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&l| SweepRow {
                lambda: l,
                fid: stat(1.0 - l / 2.0),
                multimodality: Some(stat(0.9 - l / 10.0)),
                r_precision: stat(0.5),
                mm_dist: stat(1.0),
                diversity: stat(1.2),
            })
            .collect();
        let csv = SweepRow::csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv
            .lines()
            .nth(2)
            .unwrap()
            .starts_with("0.5,0.750000,0.010000,0.850000"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.svg");
        sweep_plot(&path, &rows).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("Multimodality"));
    }
}
