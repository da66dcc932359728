//! Metric CSV files and SVG learning curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::training::MetricRow;
use crate::{Error, Result};

pub const CSV_HEADER: &str = "task,variant,seed,epoch,env_steps,metric,value";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.task, r.variant, r.seed, r.epoch, r.env_steps, r.metric, r.value
        )
        .expect("writing to a string");
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Invalid("metrics file does not start with the expected header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = || Error::Invalid(format!("metrics line {}: malformed row", i + 2));
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 7 {
                return Err(bad());
            }
            Ok(MetricRow {
                task: c[0].to_string(),
                variant: c[1].to_string(),
                seed: c[2].parse().map_err(|_| bad())?,
                epoch: c[3].parse().map_err(|_| bad())?,
                env_steps: c[4].parse().map_err(|_| bad())?,
                metric: c[5].to_string(),
                value: c[6].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Learning curve of `metric` against environment steps: one polyline per
/// seed and a band of mean ± one standard deviation across seeds, aligned
/// by epoch.
pub fn plot_svg(rows: &[MetricRow], metric: &str, title: &str) -> String {
    let mut per_seed: BTreeMap<u64, Vec<(usize, f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == metric && r.value.is_finite()) {
        per_seed.entry(r.seed).or_default().push((r.epoch, r.env_steps as f64, r.value));
    }
    let mut by_epoch: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for pts in per_seed.values() {
        for &(e, x, y) in pts {
            by_epoch.entry(e).or_default().push((x, y));
        }
    }
    let band: Vec<(f64, f64, f64)> = by_epoch
        .values()
        .map(|v| {
            let n = v.len() as f64;
            let x = v.iter().map(|p| p.0).sum::<f64>() / n;
            let mean = v.iter().map(|p| p.1).sum::<f64>() / n;
            let sd = (v.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / n).sqrt();
            (x, mean - sd, mean + sd)
        })
        .collect();

    let all = per_seed.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(_, x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    for &(_, lo, hi) in &band {
        y0 = y0.min(lo);
        y1 = y1.max(hi);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" stroke="black" fill="none"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">environment steps</text>"#,
        WIDTH / 2.0,
        HEIGHT - 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(metric)
    );
    for (v, anchor_y) in [(y0, bottom), (y1, top)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{:.3}</text>"#,
            left - 4.0,
            anchor_y + 4.0,
            v
        );
    }
    for (v, anchor_x) in [(x0, left), (x1, right)] {
        let _ = writeln!(
            s,
            r#"<text x="{anchor_x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="10">{v}</text>"#,
            bottom + 14.0
        );
    }
    if !band.is_empty() {
        let mut d = String::new();
        for (i, &(x, _, hi)) in band.iter().enumerate() {
            let _ = write!(d, "{}{:.2} {:.2} ", if i == 0 { "M" } else { "L" }, sx(x), sy(hi));
        }
        for &(x, lo, _) in band.iter().rev() {
            let _ = write!(d, "L{:.2} {:.2} ", sx(x), sy(lo));
        }
        d.push('Z');
        let _ = writeln!(s, r##"<path class="mean-band" d="{d}" fill="#888888" fill-opacity="0.25" stroke="none"/>"##);
    }
    for (k, (seed, pts)) in per_seed.iter().enumerate() {
        let points: Vec<String> = pts.iter().map(|&(_, x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<polyline class="seed" data-seed="{seed}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" fill="{color}">seed {seed}</text>"#,
            right - 60.0,
            top + 12.0 * (k as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `metrics.csv` plus one SVG per (task, variant, metric) into `dir`
/// and returns the written paths in a stable order.
pub fn emit_outputs(rows: &[MetricRow], dir: &Path, metrics: &[&str]) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join("metrics.csv");
    write_metrics_csv(rows, &csv)?;
    let mut written = vec![csv];
    let mut groups: BTreeMap<(String, String), Vec<MetricRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.task.clone(), r.variant.clone())).or_default().push(r.clone());
    }
    for ((task, variant), group) in &groups {
        for metric in metrics {
            if !group.iter().any(|r| r.metric == *metric) {
                continue;
            }
            let path = dir.join(format!("{task}_{variant}_{metric}.svg"));
            std::fs::write(&path, plot_svg(group, metric, &format!("{task} / {variant}: {metric}")))?;
            written.push(path);
        }
    }
    Ok(written)
}
