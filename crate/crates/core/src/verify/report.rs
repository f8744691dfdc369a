use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{EerResult, RocCurve, VerificationScoreSet};
use crate::error::{Error, Result};

/// Formats `x` with `sig` significant digits, trimming trailing zeros;
/// scientific notation outside `1e-5 ≤ |x| < 10^sig`.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{:.*e}", sig - 1, x);
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= sig as i32 {
        let mant = trim_zeros(mant);
        return format!("{mant}e{exp}");
    }
    let decimals = (sig as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,far,gar\n");
    for i in 0..curve.len() {
        let _ = writeln!(
            out,
            "{},{},{}",
            format_sig(curve.thresholds[i], 12),
            format_sig(curve.far[i], 12),
            format_sig(curve.gar[i], 12)
        );
    }
    out
}

fn metrics_text(curve: &RocCurve, eer: &EerResult, scores: &VerificationScoreSet) -> String {
    format!(
        "eer={}\nthreshold={}\nauc={}\ngenuine={}\nimpostor={}\nthresholds={}\n",
        eer.eer,
        eer.threshold,
        curve.auc(),
        scores.genuine.len(),
        scores.impostor.len(),
        curve.len()
    )
}

/// Standalone 800×600 SVG line plot of the curve.
pub fn render_svg(curve: &RocCurve, eer: &EerResult) -> String {
    const W: f64 = 800.0;
    const H: f64 = 600.0;
    const L: f64 = 80.0;
    const R: f64 = 40.0;
    const T: f64 = 50.0;
    const B: f64 = 70.0;
    let px = |far: f64| L + far * (W - L - R);
    let py = |gar: f64| H - B - gar * (H - T - B);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 800 600" width="800" height="600" font-family="sans-serif">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="800" height="600" fill="white"/>"#);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#dddddd"/>"##,
            px(v),
            py(0.0),
            px(v),
            py(1.0)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#dddddd"/>"##,
            px(0.0),
            py(v),
            px(1.0),
            py(v)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="14" text-anchor="middle">{:.1}</text>"#,
            px(v),
            py(0.0) + 22.0,
            v
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="14" text-anchor="end">{:.1}</text>"#,
            px(0.0) - 8.0,
            py(v) + 5.0,
            v
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        px(0.0),
        py(1.0),
        px(1.0) - px(0.0),
        py(0.0) - py(1.0)
    );
    let mut points = format!("{:.2},{:.2}", px(0.0), py(0.0));
    for (&f, &g) in curve.far.iter().zip(&curve.gar) {
        let _ = write!(points, " {:.2},{:.2}", px(f), py(g));
    }
    let _ = writeln!(
        s,
        r##"<polyline points="{points}" fill="none" stroke="#1f4e9c" stroke-width="2"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="16" text-anchor="middle">FAR</text>"#,
        (px(0.0) + px(1.0)) / 2.0,
        H - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="24" y="{:.2}" font-size="16" text-anchor="middle" transform="rotate(-90 24 {:.2})">GAR</text>"#,
        (py(0.0) + py(1.0)) / 2.0,
        (py(0.0) + py(1.0)) / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="400" y="32" font-size="18" text-anchor="middle">ROC (EER {}%)</text>"#,
        format_sig(eer.eer * 100.0, 6)
    );
    s.push_str("</svg>\n");
    s
}

/// Files written by [`emit_report`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportPaths {
    pub roc_csv: PathBuf,
    pub metrics: PathBuf,
    pub svg: PathBuf,
}

/// Writes `roc.csv`, `metrics.txt` and `roc.svg` into `dir`.
pub fn emit_report(dir: &Path, curve: &RocCurve, eer: &EerResult, scores: &VerificationScoreSet) -> Result<ReportPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ReportPaths {
        roc_csv: dir.join("roc.csv"),
        metrics: dir.join("metrics.txt"),
        svg: dir.join("roc.svg"),
    };
    let write = |p: &Path, text: String| fs::write(p, text).map_err(|e| Error::io(p, e));
    write(&paths.roc_csv, roc_csv(curve))?;
    write(&paths.metrics, metrics_text(curve, eer, scores))?;
    write(&paths.svg, render_svg(curve, eer))?;
    Ok(paths)
}
