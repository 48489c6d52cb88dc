//! Latency report files: CSV rows, an SVG timeline and a text summary.

use std::fmt::Write as _;
use std::io::{self, Read, Write};

use securedirect_core::loadgen::{LatencyReport, RequestSample};
use thiserror::Error;

pub const CSV_HEADER: [&str; 3] = ["request_index", "start_ms", "latency_ms"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("csv row {row}: {reason}")]
    Row { row: usize, reason: String },
}

pub fn write_csv(report: &LatencyReport, out: impl Write) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for s in &report.samples {
        w.write_record([s.index.to_string(), s.start_ms.to_string(), s.latency_ms.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(input: impl Read) -> Result<Vec<RequestSample>, ReportError> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(CSV_HEADER) {
        return Err(ReportError::Row { row: 0, reason: "unexpected header".into() });
    }
    let mut samples = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| -> Result<u64, ReportError> {
            rec.get(k)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| ReportError::Row { row: i + 1, reason: format!("bad `{}`", CSV_HEADER[k]) })
        };
        samples.push(RequestSample { index: field(0)?, start_ms: field(1)?, latency_ms: field(2)? });
    }
    Ok(samples)
}

pub fn text_summary(report: &LatencyReport) -> String {
    let s = &report.summary;
    let mut t = String::new();
    let _ = writeln!(t, "rate_per_hour: {}", report.rate_per_hour);
    let _ = writeln!(t, "scheduled: {}", report.scheduled);
    let _ = writeln!(t, "completed: {}", report.completed());
    let _ = writeln!(t, "min_ms: {}", s.min);
    let _ = writeln!(t, "median_ms: {}", s.median);
    let _ = writeln!(t, "mean_ms: {:.3}", s.mean());
    let _ = writeln!(t, "p95_ms: {}", s.p95);
    let _ = writeln!(t, "max_ms: {}", s.max);
    let _ = writeln!(t, "sum_ms: {}", s.sum);
    t
}

const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Per-minute mean latency of each report, one polyline per report.
pub fn svg_timeline(reports: &[&LatencyReport]) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let max_minute = reports.iter().flat_map(|r| r.buckets.iter().map(|b| b.minute)).max().unwrap_or(0).max(1) as f64;
    let max_mean = reports.iter().flat_map(|r| r.buckets.iter().map(|b| b.mean())).fold(1.0, f64::max) * 1.1;
    let x = |m: f64| pad + m / max_minute * (w - 2.0 * pad);
    let y = |v: f64| h - pad - v / max_mean * (h - 2.0 * pad);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {top} V{bottom} H{right}" stroke="black" fill="none"/>"#,
        top = pad,
        bottom = h - pad,
        right = w - pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">minute</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">mean latency (ms)</text>"#,
        h / 2.0,
        h / 2.0
    );
    let _ =
        writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{:.1}</text>"#, pad - 4.0, pad, max_mean);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10">{}</text>"#, w - pad, h - pad + 14.0, max_minute);
    for (i, r) in reports.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let points: Vec<String> =
            r.buckets.iter().map(|b| format!("{:.1},{:.1}", x(b.minute as f64), y(b.mean()))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{colour}">{} pages/hour</text>"#,
            pad + 8.0,
            pad + 14.0 * (i as f64 + 1.0),
            r.rate_per_hour
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_report_has_zero_counts() {
        let r = LatencyReport::from_samples(0, 0, Vec::new());
        let t = text_summary(&r);
        assert!(t.contains("completed: 0\n"));
        assert!(t.contains("scheduled: 0\n"));
        assert!(t.contains("mean_ms: 0.000\n"));
        let mut buf = Vec::new();
        write_csv(&r, &mut buf).unwrap();
        assert_eq!(buf, b"request_index,start_ms,latency_ms\n");
        assert!(svg_timeline(&[&r]).ends_with("</svg>\n"));
    }

    #[test]
    fn bad_csv_is_rejected() {
        assert!(read_csv(&b"a,b,c\n1,2,3\n"[..]).is_err());
        assert!(matches!(
            read_csv(&b"request_index,start_ms,latency_ms\n1,x,3\n"[..]),
            Err(ReportError::Row { row: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn csv_round_trip_keeps_the_summary(rows in proptest::collection::vec((0u64..100_000, 0u64..5_000), 0..200)) {
            let samples: Vec<RequestSample> = rows
                .iter()
                .enumerate()
                .map(|(i, &(start_ms, latency_ms))| RequestSample { index: i as u64, start_ms, latency_ms })
                .collect();
            let r = LatencyReport::from_samples(3600, samples.len() as u64, samples);
            let mut buf = Vec::new();
            write_csv(&r, &mut buf).unwrap();
            let back = LatencyReport::from_samples(3600, r.scheduled, read_csv(&buf[..]).unwrap());
            prop_assert_eq!(back, r);
        }
    }
}
