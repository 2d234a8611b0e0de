//! Static SVG charts: training curves and grouped ablation bars.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::ablate::{AblationResults, Table2Results};
use super::train::EpochMetrics;
use super::{write_text, RunPaths};
use crate::error::{Error, Result};
use crate::synthdata::read_json;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: [f64; 4] = [50.0, 20.0, 60.0, 70.0]; // top, right, bottom, left
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="28" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    s
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn axes(s: &mut String, xlabel: &str, ylabel: &str, y: (f64, f64)) {
    let [top, right, bottom, left] = MARGIN;
    let (x0, x1, y0, y1) = (left, W - right, H - bottom, top);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let v = y.0 + (y.1 - y.0) * k as f64 / 4.0;
        let py = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{py}" x2="{x1}" y2="{py}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.3}</text>"##,
            x0 - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 15.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

fn legend(s: &mut String, labels: &[&str]) {
    for (i, l) in labels.iter().enumerate() {
        let x = MARGIN[3] + 10.0 + 130.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="36" width="10" height="10" fill="{}"/><text x="{}" y="45">{}</text>"#,
            PALETTE[i % PALETTE.len()],
            x + 14.0,
            escape(l)
        );
    }
}

pub fn line_chart_svg(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut xlo, mut xhi, mut ylo, mut yhi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        xlo = xlo.min(x);
        xhi = xhi.max(x);
        ylo = ylo.min(y);
        yhi = yhi.max(y);
    }
    let (xlo, xhi) = if xlo.is_finite() && xhi > xlo { (xlo, xhi) } else { (0.0, 1.0) };
    let yr = nice_range(ylo, yhi);
    let [top, right, bottom, left] = MARGIN;
    let px = |x: f64| left + (x - xlo) / (xhi - xlo) * (W - left - right);
    let py = |y: f64| (H - bottom) - (y - yr.0) / (yr.1 - yr.0) * (H - bottom - top);
    let mut s = header(title);
    axes(&mut s, xlabel, ylabel, yr);
    for (i, se) in series.iter().enumerate() {
        let pts: Vec<String> = se
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            pts.join(" ")
        );
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    legend(&mut s, &labels);
    s.push_str("</svg>\n");
    s
}

/// Grouped bars: one group per category, one bar per series within it.
pub fn bar_chart_svg(title: &str, ylabel: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let ymax = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let yr = (0.0, if ymax > 0.0 { ymax * 1.1 } else { 1.0 });
    let [top, right, bottom, left] = MARGIN;
    let plot_w = W - left - right;
    let group_w = plot_w / categories.len().max(1) as f64;
    let bar_w = 0.8 * group_w / series.len().max(1) as f64;
    let py = |y: f64| (H - bottom) - (y - yr.0) / (yr.1 - yr.0) * (H - bottom - top);
    let mut s = header(title);
    axes(&mut s, "", ylabel, yr);
    for (c, cat) in categories.iter().enumerate() {
        let gx = left + group_w * c as f64;
        for (k, (_, values)) in series.iter().enumerate() {
            let Some(&v) = values.get(c) else { continue };
            if !v.is_finite() {
                continue;
            }
            let x = gx + 0.1 * group_w + bar_w * k as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{:.2}" width="{bar_w:.2}" height="{:.2}" fill="{}"/>"#,
                py(v),
                py(0.0) - py(v),
                PALETTE[k % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            gx + group_w / 2.0,
            H - bottom + 16.0,
            escape(cat)
        );
    }
    let labels: Vec<&str> = series.iter().map(|(l, _)| l.as_str()).collect();
    legend(&mut s, &labels);
    s.push_str("</svg>\n");
    s
}

/// Writes `plots/loss.svg` and `plots/dice.svg` for a run directory.
pub fn plot_run(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let paths = RunPaths::new(run_dir);
    let text = fs::read_to_string(paths.metrics()).map_err(|e| Error::io(paths.metrics(), e))?;
    let rows = EpochMetrics::parse_csv(&text)?;
    let curve = |label: &str, f: fn(&EpochMetrics) -> f64| Series {
        label: label.into(),
        points: rows.iter().map(|m| (m.epoch as f64, f(m))).collect(),
    };
    let loss = line_chart_svg(
        "Training loss",
        "epoch",
        "loss",
        &[
            curve("total", |m| m.train_loss),
            curve("dice term", |m| m.train_dice_term),
            curve("pixel term", |m| m.train_pixel_term),
        ],
    );
    let dice = line_chart_svg(
        "Held-out overlap",
        "epoch",
        "score",
        &[curve("mDice", |m| m.val_mdice), curve("mIoU", |m| m.val_miou)],
    );
    let out = vec![paths.plots().join("loss.svg"), paths.plots().join("dice.svg")];
    write_text(&out[0], &loss)?;
    write_text(&out[1], &dice)?;
    Ok(out)
}

/// Renders `fig4.svg` from `ablation.json` and `table2.svg` from
/// `table2.json`, whichever exist in `dir`.
pub fn plot_ablation(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let ablation = dir.join("ablation.json");
    if ablation.exists() {
        let res: AblationResults = read_json(&ablation)?;
        let data = res.chart_data();
        let mut cats: Vec<String> = Vec::new();
        let mut positions = Vec::new();
        for (p, l, _, _) in &data {
            if !cats.contains(&l.to_string()) {
                cats.push(l.to_string());
            }
            if !positions.contains(p) {
                positions.push(*p);
            }
        }
        let series: Vec<(String, Vec<f64>)> = positions
            .iter()
            .map(|p| {
                let values = cats
                    .iter()
                    .map(|c| {
                        data.iter()
                            .find(|(q, l, _, _)| q == p && &l.to_string() == c)
                            .map_or(f64::NAN, |d| d.3)
                    })
                    .collect();
                (format!("({}) {p}", p.letter()), values)
            })
            .collect();
        let path = dir.join("plots").join("fig4.svg");
        write_text(&path, &bar_chart_svg("mDice by SGPM depth and position", "mDice", &cats, &series))?;
        written.push(path);
    }
    let table2 = dir.join("table2.json");
    if table2.exists() {
        let res: Table2Results = read_json(&table2)?;
        let cats: Vec<String> = res.rows.iter().map(|r| r.label.clone()).collect();
        let series = vec![
            ("mIoU".to_string(), res.rows.iter().map(|r| r.mean_miou).collect()),
            ("mDice".to_string(), res.rows.iter().map(|r| r.mean_mdice).collect()),
        ];
        let path = dir.join("plots").join("table2.svg");
        write_text(&path, &bar_chart_svg("Component study", "score", &cats, &series))?;
        written.push(path);
    }
    if written.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no ablation.json or table2.json to plot",
            dir.display()
        )));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svgs_are_well_formed() {
        let s = line_chart_svg("t", "x", "y", &[Series { label: "a<b".into(), points: vec![(1.0, 2.0), (2.0, 1.0)] }]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b") && s.contains("polyline"));
        let b = bar_chart_svg("t", "y", &["1-1".into(), "1-2".into()], &[("a".into(), vec![0.5, 0.7])]);
        assert_eq!(b.matches("<rect").count(), 1 + 2 + 1);
    }
}
