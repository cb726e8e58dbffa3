//! RD curves as `label,bpp,metric` CSV and as static SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use super::bd::{RDCurve, RDPoint};
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 3] = ["label", "bpp", "metric"];

/// Floats are written in shortest round-trip form, so parsing the output
/// gives back the same curve.
pub fn curve_to_csv(curve: &RDCurve) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for p in curve.points() {
        w.write_record([p.label.as_str(), &p.bpp.to_string(), &p.metric.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Parses a curve; points may come in any order.
pub fn curve_from_csv(text: &str) -> Result<RDCurve> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Parse(format!("csv header: {e}")))?;
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Parse(format!(
            "csv header must be {:?}, found {:?}",
            CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut points = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("csv row {}: {e}", i + 1)))?;
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse()
                .map_err(|_| Error::Parse(format!("csv row {}: {:?} is not a number", i + 1, &rec[j])))
        };
        points.push(RDPoint::new(&rec[0], num(1)?, num(2)?));
    }
    RDCurve::from_unsorted(points)
}

pub fn read_curve(path: &Path) -> Result<RDCurve> {
    curve_from_csv(&std::fs::read_to_string(path)?)
}

pub fn write_curve(path: &Path, curve: &RDCurve) -> Result<()> {
    std::fs::write(path, curve_to_csv(curve))?;
    Ok(())
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Metric against bpp, one polyline per named curve.
pub fn curves_to_svg(curves: &[(&str, &RDCurve)]) -> String {
    let (w, h, m) = (640.0, 420.0, 56.0);
    let pts = curves.iter().flat_map(|(_, c)| c.points());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.bpp);
        x1 = x1.max(p.bpp);
        y0 = y0.min(p.metric);
        y1 = y1.max(p.metric);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, b + 0.5) };
    let ((x0, x1), (y0, y1)) = (pad(x0, x1), pad(y0, y1));
    let sx = |v: f64| m + (v - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |v: f64| h - m - (v - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {} H{} M{m} {} V{m}" stroke="black" fill="none"/>"#,
        h - m,
        w - m,
        h - m
    );
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="{anchor}">{v:.4}</text>"#,
            sx(v),
            h - m + 16.0
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            m - 4.0,
            sy(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">bpp</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">metric</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, (name, c)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = c
            .points()
            .iter()
            .map(|p| format!("{:.1},{:.1}", sx(p.bpp), sy(p.metric)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            path.join(" ")
        );
        for p in c.points() {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                sx(p.bpp),
                sy(p.metric)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            m + 10.0,
            m + 16.0 * i as f64,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
