//! Report rendering: metric tables as CSV and simple line-plot SVGs for
//! sweeps, curves and per-run loss traces.

use std::path::{Path, PathBuf};

use crate::error::{CmcError, Result};
use crate::pipeline::artifact::read_metrics;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Svg,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(CmcError::Config(format!("unknown report format `{other}`"))),
        }
    }
}

/// Render reports for a run, sweep or curve directory into `<dir>/report/`.
/// Returns the files written.
pub fn report(run_dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    let report_dir = run_dir.join("report");
    std::fs::create_dir_all(&report_dir)?;
    let mut written = Vec::new();

    let metrics_path = run_dir.join("metrics.json");
    if metrics_path.exists() {
        match format {
            ReportFormat::Csv => {
                let metrics = read_metrics(&metrics_path)?;
                let out = report_dir.join("metrics.csv");
                let mut w = csv::Writer::from_path(&out)?;
                w.write_record(["split", "n", "acc2", "f1", "precision", "recall"])?;
                for (split, r) in &metrics {
                    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                    w.write_record([
                        split.clone(),
                        r.n.to_string(),
                        fmt(r.acc2),
                        fmt(r.f1),
                        fmt(r.precision),
                        fmt(r.recall),
                    ])?;
                }
                w.flush()?;
                written.push(out);
            }
            ReportFormat::Svg => {
                let losses = run_dir.join("losses.csv");
                if losses.exists() {
                    let series = loss_series(&losses)?;
                    let out = report_dir.join("losses.svg");
                    std::fs::write(&out, line_plot_svg("training loss", "step", "total", &series))?;
                    written.push(out);
                }
            }
        }
    }

    for name in ["sweep.csv", "curves.csv"] {
        let table = run_dir.join(name);
        if !table.exists() {
            continue;
        }
        match format {
            ReportFormat::Csv => {
                let out = report_dir.join(name);
                std::fs::copy(&table, &out)?;
                written.push(out);
            }
            ReportFormat::Svg => {
                let series = curve_series(&table)?;
                let out = report_dir.join(format!("{}.svg", name.trim_end_matches(".csv")));
                std::fs::write(&out, line_plot_svg("accuracy", "value", "acc2", &series))?;
                written.push(out);
            }
        }
    }

    if written.is_empty() {
        return Err(CmcError::Config(format!(
            "nothing to report in `{}`: no metrics.json, sweep.csv or curves.csv",
            run_dir.display()
        )));
    }
    Ok(written)
}

/// (stage, points) series of the total loss per step.
fn loss_series(path: &Path) -> Result<Vec<(String, Vec<(f64, f64)>)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let step_col = headers.iter().position(|h| h == "step");
    let stage_col = headers.iter().position(|h| h == "stage");
    let total_col = headers.iter().position(|h| h == "total");
    let (Some(step_col), Some(stage_col), Some(total_col)) = (step_col, stage_col, total_col)
    else {
        return Err(CmcError::Parse("losses.csv missing step/stage/total columns".into()));
    };
    let mut by_stage: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
    for record in reader.records() {
        let record = record?;
        let step: f64 = record[step_col].parse().unwrap_or(0.0);
        let total: f64 = record[total_col].parse().unwrap_or(f64::NAN);
        by_stage
            .entry(format!("stage {}", &record[stage_col]))
            .or_default()
            .push((step, total));
    }
    Ok(by_stage.into_iter().collect())
}

/// (variant/split, points) series of acc2 over the swept value, from the
/// wide one-row-per-value table.
fn curve_series(path: &Path) -> Result<Vec<(String, Vec<(f64, f64)>)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let Some(value_col) = col("value") else {
        return Err(CmcError::Parse("curve csv missing a value column".into()));
    };
    let variant_col = col("variant");
    let split_cols: Vec<(&str, usize)> = [("test", "test_acc2"), ("msc", "msc_acc2"), ("msi", "msi_acc2")]
        .into_iter()
        .filter_map(|(split, column)| col(column).map(|i| (split, i)))
        .collect();
    if split_cols.is_empty() {
        return Err(CmcError::Parse("curve csv has no *_acc2 columns".into()));
    }
    let mut by_key: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
    for record in reader.records() {
        let record = record?;
        let value: f64 = record[value_col]
            .parse()
            .map_err(|_| CmcError::Parse(format!("non-numeric sweep value `{}`", &record[value_col])))?;
        for &(split, ci) in &split_cols {
            let cell = &record[ci];
            if cell.is_empty() {
                continue;
            }
            let key = match variant_col {
                Some(vc) => format!("{}/{}", &record[vc], split),
                None => split.to_string(),
            };
            by_key.entry(key).or_default().push((value, cell.parse().unwrap_or(f64::NAN)));
        }
    }
    let mut out: Vec<(String, Vec<(f64, f64)>)> = by_key.into_iter().collect();
    for (_, points) in &mut out {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok(out)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Minimal multi-series line plot.
fn line_plot_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 40.0, 50.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);

    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in &all {
        if x.is_finite() && y.is_finite() {
            x0 = x0.min(*x);
            x1 = x1.max(*x);
            y0 = y0.min(*y);
            y1 = y1.max(*y);
        }
    }
    if !x0.is_finite() || x0 == x1 {
        x1 = x0 + 1.0;
    }
    if !y0.is_finite() || y0 == y1 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        w / 2.0
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph,
        ml + pw,
        mt + ph
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph
    ));
    for (frac, label_x) in [(0.0, x0), (0.5, (x0 + x1) / 2.0), (1.0, x1)] {
        let x = ml + frac * pw;
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{label_x:.3}</text>\n",
            mt + ph + 18.0
        ));
    }
    for (frac, label_y) in [(0.0, y0), (0.5, (y0 + y1) / 2.0), (1.0, y1)] {
        let y = mt + ph - frac * ph;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{label_y:.3}</text>\n",
            ml - 6.0,
            y + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>\n",
        ml + pw / 2.0,
        h - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0
    ));

    for (si, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        if path.len() > 1 {
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                path.join(" ")
            ));
        }
        for p in &path {
            let mut it = p.split(',');
            let (px, py) = (it.next().unwrap(), it.next().unwrap());
            svg.push_str(&format!(
                "<circle cx=\"{px}\" cy=\"{py}\" r=\"2.5\" fill=\"{color}\"/>\n"
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{name}</text>\n",
            ml + pw - 150.0,
            mt + 14.0 + 14.0 * si as f64
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_contains_polyline_per_series() {
        let series = vec![
            ("a".to_string(), vec![(0.0, 1.0), (1.0, 2.0), (2.0, 1.5)]),
            ("b".to_string(), vec![(0.0, 0.5), (1.0, 0.7), (2.0, 0.9)]),
        ];
        let svg = line_plot_svg("demo", "x", "y", &series);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("demo"));
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn report_on_empty_dir_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(report(tmp.path(), ReportFormat::Csv).is_err());
    }
}
