//! Table and plot emission: a phase-column CSV over the evaluation reports
//! plus simple SVG curves.

use std::path::Path;

use crate::harness::{io_err, EvalReport, HarnessError, TrainLogEntry};

/// Phase-column CSV: one row per (task, variant, seed) report, one column per
/// subscore name in first-appearance order, then overall percentage and mean
/// latency. Phases not applicable to a row's task stay empty.
pub fn grid_csv(reports: &[EvalReport]) -> String {
    let mut phase_names: Vec<String> = Vec::new();
    for r in reports {
        for (name, _) in &r.subscore_counts {
            if !phase_names.iter().any(|n| n == name) {
                phase_names.push(name.clone());
            }
        }
    }
    let mut out = String::from("task,variant,seed");
    for name in &phase_names {
        out.push_str(&format!(",{name}"));
    }
    out.push_str(",overall,latency_s\n");
    for r in reports {
        out.push_str(&format!("{},{},{}", r.task, r.variant, r.seed));
        for name in &phase_names {
            match r.subscore_rate(name) {
                Some(rate) => out.push_str(&format!(",{rate:.1}")),
                None => out.push(','),
            }
        }
        out.push_str(&format!(",{:.1},{:.5}\n", r.success_rate(), r.mean_latency_s));
    }
    out
}

fn svg_header(w: usize, h: usize) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

/// Loss-per-epoch polyline.
pub fn loss_curve_svg(log: &[TrainLogEntry]) -> String {
    let (w, h, pad) = (640usize, 360usize, 40.0f64);
    let mut svg = svg_header(w, h);
    if !log.is_empty() {
        let max_loss = log.iter().map(|e| e.mean_loss).fold(f64::MIN, f64::max);
        let min_loss = log.iter().map(|e| e.mean_loss).fold(f64::MAX, f64::min);
        let span = (max_loss - min_loss).max(1e-12);
        let n = log.len().max(2) as f64;
        let points: Vec<String> = log
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let x = pad + (w as f64 - 2.0 * pad) * i as f64 / (n - 1.0);
                let y = h as f64 - pad - (h as f64 - 2.0 * pad) * (e.mean_loss - min_loss) / span;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#c22\" stroke-width=\"2\"/>\n",
            points.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{pad}\" y=\"20\" font-size=\"14\">training loss per epoch (min {min_loss:.4}, max {max_loss:.4})</text>\n"
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Per-(task, variant) success bars, averaged over seeds.
pub fn success_chart_svg(reports: &[EvalReport]) -> String {
    let (w, h, pad) = (720usize, 400usize, 50.0f64);
    let mut svg = svg_header(w, h);
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for r in reports {
        let key = format!("{}/{}", r.task, r.variant);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, rates)) => rates.push(r.success_rate()),
            None => groups.push((key, vec![r.success_rate()])),
        }
    }
    let n = groups.len().max(1) as f64;
    let bar_w = ((w as f64 - 2.0 * pad) / n * 0.7).min(60.0);
    for (i, (key, rates)) in groups.iter().enumerate() {
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        let x = pad + (w as f64 - 2.0 * pad) * (i as f64 + 0.15) / n;
        let bar_h = (h as f64 - 2.0 * pad) * mean / 100.0;
        let y = h as f64 - pad - bar_h;
        svg.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{bar_h:.1}\" fill=\"#36c\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"10\" transform=\"rotate(30 {x:.1} {:.1})\">{key} {mean:.0}%</text>\n",
            h as f64 - pad + 14.0,
            h as f64 - pad + 14.0,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Emit the CSV plus SVG charts for a set of evaluation reports and optional
/// training logs.
pub fn write_reports(
    reports: &[EvalReport],
    logs: &[(String, Vec<TrainLogEntry>)],
    out_dir: &Path,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv_path = out_dir.join("table.csv");
    std::fs::write(&csv_path, grid_csv(reports)).map_err(io_err(&csv_path))?;
    let chart_path = out_dir.join("success.svg");
    std::fs::write(&chart_path, success_chart_svg(reports)).map_err(io_err(&chart_path))?;
    for (name, log) in logs {
        let path = out_dir.join(format!("loss_{name}.svg"));
        std::fs::write(&path, loss_curve_svg(log)).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Parse a training log written by [`crate::harness::train`].
pub fn parse_train_log(path: &Path) -> Result<Vec<TrainLogEntry>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue; // header
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(HarnessError::Config(format!("bad log line: {line}")));
        }
        let bad = || HarnessError::Config(format!("bad log line: {line}"));
        out.push(TrainLogEntry {
            epoch: parts[0].parse().map_err(|_| bad())?,
            mean_loss: parts[1].parse().map_err(|_| bad())?,
            mean_l1: parts[2].parse().map_err(|_| bad())?,
            mean_kl: parts[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
