//! CSV and SVG reporting over a finished (or partial) manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluate::{flag_separable, kde_curve, KdeCurve, ModelResult, DEFAULT_FLAG_THRESHOLD};
use crate::pipeline::Manifest;

pub const RESULTS_CSV: &str = "results.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const KDE_CSV: &str = "kde.csv";
pub const FLAGS_CSV: &str = "flags.csv";
pub const KDE_SVG: &str = "kde.svg";

#[derive(Debug)]
pub struct ReportFiles {
    pub results: PathBuf,
    pub summary: PathBuf,
    pub kde: PathBuf,
    pub flags: PathBuf,
    pub svg: PathBuf,
    /// Windows with too few distinct AUCs for a density estimate.
    pub kde_skipped: Vec<u32>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn results_csv(manifest: &Manifest) -> String {
    let k = manifest.config.folds;
    let mut out = String::from("generic,window_days,n_pairs,n_features");
    for f in 1..=k {
        let _ = write!(out, ",fold_{f}");
    }
    out.push_str(",mean_auc,std_auc\n");
    for r in manifest.done() {
        let _ = write!(
            out,
            "{},{},{},{}",
            r.generic, r.window_days, r.n_pairs, r.n_features_postfilter
        );
        for a in &r.fold_aucs {
            let _ = write!(out, ",{a}");
        }
        let _ = writeln!(out, ",{},{}", r.mean_auc, r.std_auc);
    }
    out
}

pub fn summary_csv(manifest: &Manifest) -> String {
    let mut out = String::from("window_days,mean_auc,std_auc,n_models,n_skipped,n_failed\n");
    for s in manifest.summaries() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.window_days,
            opt(s.mean_auc),
            opt(s.std_auc),
            s.n_models,
            s.n_skipped,
            s.n_failed
        );
    }
    out
}

/// Per-window KDE of model AUCs; windows where no estimate exists are
/// returned separately.
pub fn window_curves(manifest: &Manifest) -> (Vec<(u32, KdeCurve)>, Vec<u32>) {
    let mut curves = Vec::new();
    let mut skipped = Vec::new();
    for &w in &manifest.config.windows {
        let aucs: Vec<f64> = manifest
            .done()
            .filter(|r| r.window_days == w)
            .map(|r| r.mean_auc)
            .collect();
        match kde_curve(&aucs, None) {
            Ok(c) => curves.push((w, c)),
            Err(_) => skipped.push(w),
        }
    }
    (curves, skipped)
}

pub fn kde_csv(curves: &[(u32, KdeCurve)]) -> String {
    let mut out = String::from("window_days,x,density\n");
    for (w, c) in curves {
        for (x, d) in c.grid.iter().zip(&c.density) {
            let _ = writeln!(out, "{w},{x},{d}");
        }
    }
    out
}

pub fn flags_csv(manifest: &Manifest) -> String {
    let mut out = String::from("generic,window_days,mean_auc\n");
    let Some(&w) = manifest.config.windows.first() else {
        return out;
    };
    let results: Vec<ModelResult> = manifest
        .done()
        .filter(|r| r.window_days == w)
        .cloned()
        .collect();
    for g in flag_separable(&results, DEFAULT_FLAG_THRESHOLD) {
        let r = results.iter().find(|r| r.generic == g).expect("flagged result");
        let _ = writeln!(out, "{g},{w},{}", r.mean_auc);
    }
    out
}

const PALETTE: [&str; 7] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b",
];

fn window_label(days: u32) -> String {
    match days {
        0 => "0 days".into(),
        30 => "1 month".into(),
        182 => "6 months".into(),
        d if d % 365 == 0 => format!("{} years", d / 365),
        d => format!("{d} days"),
    }
}

/// Overlaid KDE curves, one polyline per window, with a legend.
pub fn kde_svg(curves: &[(u32, KdeCurve)]) -> String {
    let (w, h, margin) = (720.0, 440.0, 50.0);
    let x_min = curves
        .iter()
        .map(|(_, c)| c.grid[0])
        .fold(f64::INFINITY, f64::min)
        .min(0.3);
    let x_max = curves
        .iter()
        .map(|(_, c)| *c.grid.last().unwrap())
        .fold(f64::NEG_INFINITY, f64::max)
        .max(1.0);
    let y_max = curves
        .iter()
        .flat_map(|(_, c)| c.density.iter().copied())
        .fold(0.0, f64::max)
        .max(1e-9);
    let sx = |x: f64| margin + (x - x_min) / (x_max - x_min) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - y / y_max * (h - 2.0 * margin);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{b}" x2="{m}" y2="{m}" stroke="black"/>"#,
        m = margin,
        b = h - margin,
        r = w - margin
    );
    let mut tick = (x_min * 10.0).ceil() / 10.0;
    while tick <= x_max + 1e-9 {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.1}</text>"#,
            sx(tick),
            h - margin + 16.0,
            tick
        );
        tick += 0.1;
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">AUC</text>"#,
        w / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">density</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, (days, c)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = c
            .grid
            .iter()
            .zip(&c.density)
            .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let ly = margin + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            w - margin - 120.0,
            w - margin - 95.0,
            w - margin - 88.0,
            ly + 4.0,
            window_label(*days)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Writes results, summary, kde, flags and the KDE overlay into `out_dir`.
pub fn report(manifest: &Manifest, out_dir: &Path) -> Result<ReportFiles> {
    if manifest.done().next().is_none() {
        return Err(Error::Empty("no Done jobs to report"));
    }
    fs::create_dir_all(out_dir)?;
    let (curves, kde_skipped) = window_curves(manifest);
    let files = ReportFiles {
        results: out_dir.join(RESULTS_CSV),
        summary: out_dir.join(SUMMARY_CSV),
        kde: out_dir.join(KDE_CSV),
        flags: out_dir.join(FLAGS_CSV),
        svg: out_dir.join(KDE_SVG),
        kde_skipped,
    };
    fs::write(&files.results, results_csv(manifest))?;
    fs::write(&files.summary, summary_csv(manifest))?;
    fs::write(&files.kde, kde_csv(&curves))?;
    fs::write(&files.flags, flags_csv(manifest))?;
    fs::write(&files.svg, kde_svg(&curves))?;
    Ok(files)
}
