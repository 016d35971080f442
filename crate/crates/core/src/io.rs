//! File formats: prediction and label CSVs, per-epoch logs, embedding
//! exports and small SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Matrix, ProbabilityMatrix};

/// Rows whose sum is further than this from 1 are rejected on read; closer
/// rows are renormalized (external predictors often print few decimals).
pub const READ_SUM_TOLERANCE: f64 = 1e-3;

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Malformed { path: path.into(), reason: reason.into() }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            std::fs::create_dir_all(p)?;
        }
    }
    Ok(())
}

/// Writes `index,p_0,...,p_{K-1}`.
pub fn write_predictions(path: &Path, probs: &ProbabilityMatrix) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["index".to_string()];
    header.extend((0..probs.num_classes()).map(|k| format!("p_{k}")));
    w.write_record(&header)?;
    for (i, row) in probs.iter_rows().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<ProbabilityMatrix> {
    let mut r = csv::Reader::from_path(path).map_err(|e| malformed(path, e.to_string()))?;
    let header = r.headers().map_err(|e| malformed(path, e.to_string()))?.clone();
    let k = header.len().saturating_sub(1);
    let expected: Vec<String> = std::iter::once("index".to_string()).chain((0..k).map(|j| format!("p_{j}"))).collect();
    if k < 2 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(malformed(path, "header must be `index,p_0,...,p_{K-1}` with K >= 2"));
    }
    let mut data = Vec::new();
    let mut n = 0;
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| malformed(path, e.to_string()))?;
        let at = |msg: String| malformed(path, format!("row {}: {msg}", line + 1));
        let idx: usize = rec[0].trim().parse().map_err(|_| at(format!("bad index `{}`", &rec[0])))?;
        if idx != n {
            return Err(at(format!("index {idx} out of sequence (expected {n})")));
        }
        let row: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>().map_err(|_| at(format!("bad probability `{v}`"))))
            .collect::<Result<_>>()?;
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(at("probabilities must be finite and non-negative".into()));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > READ_SUM_TOLERANCE {
            return Err(at(format!("probabilities sum to {s}")));
        }
        data.extend(row.iter().map(|v| v / s));
        n += 1;
    }
    if n == 0 {
        return Err(malformed(path, "no prediction rows"));
    }
    ProbabilityMatrix::new(Matrix::new(n, k, data)?)
}

/// Writes `index,label`.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "label"])?;
    for (i, y) in labels.iter().enumerate() {
        w.write_record([i.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| malformed(path, e.to_string()))?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| malformed(path, e.to_string()))?;
        let label = rec
            .get(1)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| malformed(path, format!("row {}: expected `index,label`", line + 1)))?;
        out.push(label);
    }
    Ok(out)
}

/// Writes a CSV table with a header.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `f_0..f_{d-1},label`; unlabeled rows get an empty label.
pub fn write_embeddings(path: &Path, features: &FeatureMatrix, labels: &[Option<usize>]) -> Result<()> {
    if labels.len() != features.rows() {
        return Err(Error::Shape(format!("{} labels for {} feature rows", labels.len(), features.rows())));
    }
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..features.cols()).map(|j| format!("f_{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (row, y) in features.iter_rows().zip(labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.map(|y| y.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 48.0;

fn svg_frame(title: &str, body: &str, x_range: (f64, f64), y_max: f64) -> String {
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{cx}" y="20" text-anchor="middle" font-size="14">{title}</text>
<line x1="{PAD}" y1="{yb}" x2="{xr}" y2="{yb}" stroke="black"/>
<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{yb}" stroke="black"/>
<text x="{PAD}" y="{yl}" text-anchor="middle">{x0:.3}</text>
<text x="{xr}" y="{yl}" text-anchor="middle">{x1:.3}</text>
<text x="{xt}" y="{yt}" text-anchor="end">{y_max:.3}</text>
{body}</svg>
"##,
        cx = W / 2.0,
        yb = H - PAD,
        xr = W - PAD,
        yl = H - PAD + 16.0,
        x0 = x_range.0,
        x1 = x_range.1,
        xt = PAD - 4.0,
        yt = PAD + 4.0,
    )
}

/// Histogram of `values` with a dashed marker at `marker` (e.g. the mean).
pub fn histogram_svg(path: &Path, title: &str, values: &[f64], bins: usize, marker: Option<f64>) -> Result<()> {
    let bins = bins.max(1);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let max = *counts.iter().max().unwrap_or(&1) as f64;
    let (pw, ph) = (W - 2.0 * PAD, H - 2.0 * PAD);
    let bw = pw / bins as f64;
    let mut body = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let h = if max > 0.0 { ph * c as f64 / max } else { 0.0 };
        let _ = writeln!(
            body,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a7ab0"/>"##,
            PAD + i as f64 * bw,
            H - PAD - h,
            (bw - 1.0).max(0.5),
            h
        );
    }
    if let Some(m) = marker {
        let x = PAD + pw * (m - lo) / (hi - lo);
        let _ = writeln!(body, r##"<line x1="{x:.2}" y1="{PAD}" x2="{x:.2}" y2="{:.2}" stroke="#c03030" stroke-dasharray="4 3"/>"##, H - PAD);
    }
    ensure_parent(path)?;
    std::fs::write(path, svg_frame(title, &body, (lo, hi), max))?;
    Ok(())
}

/// One polyline per named series over a shared x axis.
pub fn curves_svg(path: &Path, title: &str, series: &[(&str, Vec<f64>)]) -> Result<()> {
    let colors = ["#4a7ab0", "#c03030", "#30a050", "#a060c0", "#d08020", "#606060"];
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let all = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let (pw, ph) = (W - 2.0 * PAD, H - 2.0 * PAD);
    let mut body = String::new();
    for (s, (name, values)) in series.iter().enumerate() {
        let color = colors[s % colors.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.2},{:.2}", PAD + pw * i as f64 / (n - 1) as f64, H - PAD - ph * (v - lo) / (hi - lo)))
            .collect();
        let _ = writeln!(body, r##"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"##, pts.join(" "));
        let _ = writeln!(body, r##"<text x="{:.2}" y="{:.2}" fill="{color}">{name}</text>"##, W - PAD - 120.0, PAD + 16.0 * s as f64);
    }
    ensure_parent(path)?;
    std::fs::write(path, svg_frame(title, &body, (1.0, n as f64), hi))?;
    Ok(())
}
