use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_json, VariantSummary};
use crate::error::{Error, Result};

/// Reads `summary.json` from each run directory. Directories without a
/// readable summary are skipped and reported as warnings.
pub fn load_summaries(dirs: &[PathBuf]) -> (Vec<VariantSummary>, Vec<String>) {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for d in dirs {
        match read_json::<VariantSummary>(&d.join("summary.json")) {
            Ok(s) => out.push(s),
            Err(e) => warnings.push(format!("skipping {}: {e}", d.display())),
        }
    }
    (out, warnings)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub seeds: usize,
    pub alpha: f64,
    pub flashbacks_per_task: usize,
    pub old_before: f64,
    pub old_after: f64,
    pub old_delta: f64,
    pub new_after: f64,
    pub invariants: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    #[serde(skip)]
    curves: Vec<(String, Vec<(f64, f64)>)>,
}

/// One row per variant, in the given order.
pub fn compare(summaries: &[VariantSummary]) -> Comparison {
    Comparison {
        rows: summaries
            .iter()
            .map(|s| ComparisonRow {
                variant: s.variant.clone(),
                seeds: s.per_seed.len(),
                alpha: s.alpha,
                flashbacks_per_task: s.flashbacks_per_task,
                old_before: s.mean_old_before,
                old_after: s.mean_old_after,
                old_delta: s.mean_old_delta,
                new_after: s.mean_new_after,
                invariants: s.all_invariants_hold,
            })
            .collect(),
        curves: summaries
            .iter()
            .map(|s| (s.variant.clone(), s.curve.iter().map(|p| (p.epoch as f64, p.mean_old)).collect()))
            .collect(),
    }
}

/// Aligned plain-text table.
pub fn render_table(c: &Comparison) -> String {
    let header = ["variant", "seeds", "old before", "old after", "old delta", "new after", "invariants"];
    let rows: Vec<[String; 7]> = c
        .rows
        .iter()
        .map(|r| {
            [
                r.variant.clone(),
                r.seeds.to_string(),
                format!("{:.3}", r.old_before),
                format!("{:.3}", r.old_after),
                format!("{:+.3}", r.old_delta),
                format!("{:.3}", r.new_after),
                if r.invariants { "ok" } else { "VIOLATED" }.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for r in &rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let mut s = String::new();
    let line = |s: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        s.push_str(parts.join("  ").trim_end());
        s.push('\n');
    };
    line(&mut s, &header.map(String::from));
    line(&mut s, &widths.map(|w| "-".repeat(w)));
    for r in &rows {
        line(&mut s, r);
    }
    s
}

fn csv(c: &Comparison) -> String {
    let mut s = String::from("variant,seeds,alpha,flashbacks_per_task,old_before,old_after,old_delta,new_after,invariants\n");
    for r in &c.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.variant, r.seeds, r.alpha, r.flashbacks_per_task, r.old_before, r.old_after, r.old_delta, r.new_after, r.invariants
        );
    }
    s
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Line chart with y fixed to [0, 1].
fn svg_lines(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 170.0, 40.0, 50.0);
    let xs: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut x_max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(x_max > x_min) {
        x_max = x_min + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let px = |x: f64| left + (x - x_min) / (x_max - x_min) * pw;
    let py = |y: f64| top + (1.0 - y) * ph;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{title}</text>"#, left + pw / 2.0);
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/><text x="{2}" y="{3:.1}" text-anchor="end">{y:.1}</text>"##,
            py(y),
            left + pw,
            left - 6.0,
            py(y) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{0}" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, left + pw / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">old-task exact match</text>"#,
        top + ph / 2.0
    );
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in ticks {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{x}</text>"#, px(x), top + ph + 16.0);
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.1},{:.1}", px(*x), py(*y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for (x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(*x), py(*y));
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}">{name}</text>"#,
            left + pw + 12.0,
            left + pw + 32.0,
            left + pw + 38.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `comparison.txt`, `comparison.csv` and `forgetting.svg` to `out`,
/// plus `alpha_sweep.svg` or `flashback_sweep.svg` when the variants differ
/// only in that setting. Returns the written paths.
pub fn write_comparison(c: &Comparison, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = vec![
        (out.join("comparison.txt"), render_table(c)),
        (out.join("comparison.csv"), csv(c)),
        (
            out.join("forgetting.svg"),
            svg_lines("Old-task exact match during adaptation", "epoch", &c.curves),
        ),
    ];
    let distinct = |f: fn(&ComparisonRow) -> f64| {
        let mut v: Vec<f64> = c.rows.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    let sweep = |f: fn(&ComparisonRow) -> f64| -> Vec<(String, Vec<(f64, f64)>)> {
        let mut pts: Vec<(f64, f64)> = c.rows.iter().map(|r| (f(r), r.old_after)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        vec![("old after".to_string(), pts)]
    };
    if c.rows.len() > 1 && distinct(|r| r.alpha) == c.rows.len() {
        files.push((out.join("alpha_sweep.svg"), svg_lines("Retention against alpha", "alpha", &sweep(|r| r.alpha))));
    }
    if c.rows.len() > 1 && distinct(|r| r.flashbacks_per_task as f64) == c.rows.len() {
        files.push((
            out.join("flashback_sweep.svg"),
            svg_lines("Retention against flashbacks per task", "flashbacks per task", &sweep(|r| r.flashbacks_per_task as f64)),
        ));
    }
    for (p, text) in &files {
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}
