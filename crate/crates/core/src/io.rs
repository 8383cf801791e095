//! CSV and SVG input/output. Every write goes to a temporary file in the
//! target directory and is renamed into place, so a failed run never leaves a
//! partial file behind.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use tempfile::NamedTempFile;

use crate::error::{Error, Result};

/// Reads a headerless numeric CSV, one point per row.
pub fn read_points(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_points(&text).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::InvalidInput(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_points(text: &str) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::InvalidInput(format!("row {}: {e}", line + 1)))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(Error::InvalidInput(format!(
                    "row {} has {} columns, expected {c}",
                    line + 1,
                    record.len()
                )))
            }
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::InvalidInput(format!("row {}: cannot parse {field:?} as a number", line + 1)))?;
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "row {}: non-finite value {field}",
                    line + 1
                )));
            }
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::InvalidInput("no data rows".into()))?;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("shape"))
}

/// Writes `bytes` to `path` through a temporary file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Shortest round-trip form, switching to exponent notation for very large or
/// small magnitudes.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Headerless CSV of a matrix, full round-trip precision.
pub fn matrix_csv(m: ArrayView2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// CSV with a header line followed by `rows`.
pub fn table_csv(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::InvalidInput(e.to_string()))?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::InvalidInput(format!(
                "row has {} fields, header has {}",
                r.len(),
                header.len()
            )));
        }
        w.write_record(r).map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

pub fn write_matrix(path: &Path, m: ArrayView2<f64>) -> Result<()> {
    write_atomic(path, matrix_csv(m).as_bytes())
}

pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, table_csv(header, rows)?.as_bytes())
}

/// A named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}

/// Self-contained SVG line plot with one polyline per series. Log axes drop
/// nonpositive coordinates.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool, log_y: bool) -> String {
    let (width, height) = (720.0, 440.0);
    let (left, right, top, bottom) = (80.0, 180.0, 40.0, 60.0);
    let tx = |v: f64| if log_x { v.log10() } else { v };
    let ty = |v: f64| if log_y { v.log10() } else { v };
    let keep = |&(x, y): &(f64, f64)| x.is_finite() && y.is_finite() && (!log_x || x > 0.0) && (!log_y || y > 0.0);
    let mapped: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter(|p| keep(p))
                .map(|&(x, y)| (tx(x), ty(y)))
                .collect()
        })
        .collect();
    let all: Vec<(f64, f64)> = mapped.iter().flatten().copied().collect();
    let (mut x0, mut x1, mut y0, mut y1) = all.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 <= 0.0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 <= 0.0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = width - left - right;
    let ph = height - top - bottom;
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let vx = if log_x { 10f64.powf(fx) } else { fx };
        let vy = if log_y { 10f64.powf(fy) } else { fy };
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(fx),
            top + ph + 18.0,
            fmt_tick(vx)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            py(fy) + 4.0,
            fmt_tick(vy)
        );
    }
    let x_axis = if log_x {
        format!("{x_label} (log)")
    } else {
        x_label.to_string()
    };
    let y_axis = if log_y {
        format!("{y_label} (log)")
    } else {
        y_label.to_string()
    };
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        height - 16.0,
        escape(&x_axis)
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(&y_axis)
    );
    for (k, (s, pts)) in series.iter().zip(&mapped).enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = top + 14.0 + 18.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            left + pw + 12.0,
            left + pw + 32.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            left + pw + 38.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
