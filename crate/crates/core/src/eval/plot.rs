use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::EvalReport;
use crate::error::{Error, Result};
use crate::train::MetricRecord;

/// Output names, in the order pseudo-label accuracy, unlabeled accuracy,
/// validation (EMA test) accuracy.
pub const PLOT_FILES: [&str; 3] = [
    "pseudo_label_accuracy.svg",
    "unlabeled_accuracy.svg",
    "validation_accuracy.svg",
];

const TITLES: [&str; 3] = ["Pseudo-label accuracy", "Unlabeled accuracy", "Validation accuracy"];
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

fn metric(report: &EvalReport, which: usize) -> Option<f64> {
    match which {
        0 => report.pseudo_label_accuracy,
        1 => report.unlabeled_accuracy,
        _ => Some(report.ema_accuracy),
    }
}

/// Trailing moving average over `window` points (1 keeps the raw values).
fn smooth(points: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    let w = window.max(1);
    (0..points.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let ys = &points[lo..=i];
            (points[i].0, ys.iter().map(|p| p.1).sum::<f64>() / ys.len() as f64)
        })
        .collect()
}

fn render(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let max_step = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
        .fold(1.0_f64, f64::max);
    let x = |s: f64| PAD + (W - 2.0 * PAD) * s / max_step;
    let y = |a: f64| H - PAD - (H - 2.0 * PAD) * a.clamp(0.0, 1.0);
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0).unwrap();
    writeln!(
        svg,
        r#"<path d="M{PAD},{PAD} L{PAD},{b} L{r},{b}" fill="none" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    )
    .unwrap();
    for tick in 0..=5 {
        let a = tick as f64 / 5.0;
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{a:.1}</text>"#,
            PAD - 6.0,
            y(a) + 4.0
        )
        .unwrap();
        let s = max_step * a;
        writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{s:.0}</text>"#, x(s), H - PAD + 16.0).unwrap();
    }
    writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, W / 2.0, H - 10.0).unwrap();
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if !pts.is_empty() {
            let d: Vec<String> = pts.iter().map(|&(s, a)| format!("{:.2},{:.2}", x(s), y(a))).collect();
            writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                d.join(" ")
            )
            .unwrap();
        }
        let ly = PAD + 16.0 * i as f64;
        writeln!(
            svg,
            r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#,
            W - PAD,
            escape(label)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes the three curve plots into `out_dir`, one polyline per run.
/// Runs without evaluation records produce axes only.
pub fn emit_plots(runs: &[(String, Vec<MetricRecord>)], out_dir: &Path, smoothing: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(PLOT_FILES.len());
    for (which, (file, title)) in PLOT_FILES.iter().zip(TITLES).enumerate() {
        let series: Vec<(String, Vec<(f64, f64)>)> = runs
            .iter()
            .map(|(label, records)| {
                let pts: Vec<(f64, f64)> = records
                    .iter()
                    .filter_map(|r| match r {
                        MetricRecord::Eval(e) => metric(e, which).map(|v| (e.step as f64, v)),
                        MetricRecord::Step(_) => None,
                    })
                    .collect();
                (label.clone(), smooth(&pts, smoothing))
            })
            .collect();
        let path = out_dir.join(file);
        std::fs::write(&path, render(title, &series)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
