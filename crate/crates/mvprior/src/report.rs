//! Result tables and plots: CSV writers/parsers and static SVG renders.
//!
//! Every CSV has a fixed header and uses the shortest round-trip decimal
//! form for floats, so identical results serialize to identical bytes.
//! The SVG renderers are pure functions of parsed CSV content — re-running
//! them over unchanged tables reproduces the files bit for bit. Plots are
//! self-contained static SVG: a precision/recall curve, a confusion
//! heatmap over azimuth bins, and per-method curves of the evaluation
//! measures against the training shot count.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::{ConfusionMatrix, PrPoint};
use crate::synth::ProtocolRow;
use crate::trainer::TrainLog;

/// One summary row of an evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub iou_thresh: f64,
    pub ap: f64,
    pub vp: f64,
    pub ap_vp_d: f64,
    pub ap_vp_c: f64,
    pub true_positives: u64,
    pub positives: u64,
}

pub const METRICS_HEADER: &str =
    "model,iou_thresh,ap,vp,ap_vp_d,ap_vp_c,true_positives,positives";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.model, r.iou_thresh, r.ap, r.vp, r.ap_vp_d, r.ap_vp_c, r.true_positives, r.positives
        )
        .expect("string write");
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    expect_header(lines.next(), METRICS_HEADER)?;
    lines
        .enumerate()
        .map(|(i, line)| {
            let f = split_fields(line, 8, i + 2)?;
            Ok(MetricsRow {
                model: f[0].to_string(),
                iou_thresh: parse_f64(f[1], i + 2)?,
                ap: parse_f64(f[2], i + 2)?,
                vp: parse_f64(f[3], i + 2)?,
                ap_vp_d: parse_f64(f[4], i + 2)?,
                ap_vp_c: parse_f64(f[5], i + 2)?,
                true_positives: parse_u64(f[6], i + 2)?,
                positives: parse_u64(f[7], i + 2)?,
            })
        })
        .collect()
}

pub const PR_HEADER: &str = "recall,precision";

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut out = String::from(PR_HEADER);
    out.push('\n');
    for p in points {
        writeln!(out, "{},{}", p.recall, p.precision).expect("string write");
    }
    out
}

pub fn parse_pr_csv(text: &str) -> Result<Vec<PrPoint>> {
    let mut lines = text.lines();
    expect_header(lines.next(), PR_HEADER)?;
    lines
        .enumerate()
        .map(|(i, line)| {
            let f = split_fields(line, 2, i + 2)?;
            Ok(PrPoint {
                recall: parse_f64(f[0], i + 2)?,
                precision: parse_f64(f[1], i + 2)?,
            })
        })
        .collect()
}

/// Confusion table over azimuth bins: one row per ground-truth bin, one
/// `est_<deg>` column per estimated bin.
pub fn confusion_csv(confusion: &ConfusionMatrix, bins_deg: &[f64]) -> String {
    assert_eq!(bins_deg.len(), confusion.views());
    let mut out = String::from("gt_bin_deg");
    for b in bins_deg {
        write!(out, ",est_{b}").expect("string write");
    }
    out.push('\n');
    for (gt, b) in bins_deg.iter().enumerate() {
        write!(out, "{b}").expect("string write");
        for est in 0..bins_deg.len() {
            write!(out, ",{}", confusion.at(gt, est)).expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Returns the bin centers (from the header) and the count rows.
pub fn parse_confusion_csv(text: &str) -> Result<(Vec<f64>, Vec<Vec<u64>>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty confusion table".into()))?;
    let mut cols = header.split(',');
    if cols.next() != Some("gt_bin_deg") {
        return Err(Error::Format(format!(
            "confusion table header must start with gt_bin_deg, got {header:?}"
        )));
    }
    let bins: Vec<f64> = cols
        .map(|c| {
            c.strip_prefix("est_")
                .ok_or_else(|| Error::Format(format!("bad confusion column {c:?}")))
                .and_then(|b| parse_f64(b, 1))
        })
        .collect::<Result<_>>()?;
    if bins.is_empty() {
        return Err(Error::Format("confusion table has no bins".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f = split_fields(line, bins.len() + 1, i + 2)?;
        let counts = f[1..]
            .iter()
            .map(|c| parse_u64(c, i + 2))
            .collect::<Result<Vec<_>>>()?;
        rows.push(counts);
    }
    if rows.len() != bins.len() {
        return Err(Error::Format(format!(
            "confusion table has {} rows for {} bins",
            rows.len(),
            bins.len()
        )));
    }
    Ok((bins, rows))
}

pub const TRAIN_LOG_HEADER: &str = "model,route,pass,primal,dual,gap,converged";

/// Per-pass solver trace of one or more trained models.
pub fn train_log_csv(entries: &[(String, TrainLog)]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for (model, log) in entries {
        for p in &log.passes {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                model,
                log.route,
                p.pass,
                p.primal,
                p.dual,
                p.gap,
                u8::from(log.converged)
            )
            .expect("string write");
        }
    }
    out
}

pub const PROTOCOL_HEADER: &str = "method,k,repetition,ap,vp,ap_vp_d,ap_vp_c,vp_withheld";

/// Parses the protocol results table (the inverse of its CSV writer).
pub fn parse_protocol_csv(text: &str) -> Result<Vec<ProtocolRow>> {
    let mut lines = text.lines();
    expect_header(lines.next(), PROTOCOL_HEADER)?;
    lines
        .enumerate()
        .map(|(i, line)| {
            let f = split_fields(line, 8, i + 2)?;
            Ok(ProtocolRow {
                method: f[0].to_string(),
                k: f[1].to_string(),
                repetition: f[2].to_string(),
                ap: parse_f64(f[3], i + 2)?,
                vp: parse_f64(f[4], i + 2)?,
                ap_vp_d: parse_f64(f[5], i + 2)?,
                ap_vp_c: parse_f64(f[6], i + 2)?,
                vp_withheld: if f[7].is_empty() {
                    None
                } else {
                    Some(parse_f64(f[7], i + 2)?)
                },
            })
        })
        .collect()
}

fn expect_header(line: Option<&str>, want: &str) -> Result<()> {
    match line {
        Some(h) if h == want => Ok(()),
        other => Err(Error::Format(format!(
            "expected header {want:?}, got {other:?}"
        ))),
    }
}

fn split_fields(line: &str, want: usize, lineno: usize) -> Result<Vec<&str>> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != want {
        return Err(Error::Format(format!(
            "line {lineno}: expected {want} fields, got {}",
            fields.len()
        )));
    }
    Ok(fields)
}

fn parse_f64(s: &str, lineno: usize) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Format(format!("line {lineno}: bad number {s:?}")))
}

fn parse_u64(s: &str, lineno: usize) -> Result<u64> {
    s.parse()
        .map_err(|_| Error::Format(format!("line {lineno}: bad count {s:?}")))
}

// ---------------------------------------------------------------------------
// SVG rendering

/// Fixed series palette; methods take colors in listed order.
const PALETTE: [&str; 8] = [
    "#1b6ca8", "#c2402a", "#3a8a3d", "#8a52a0", "#b8860b", "#2a9d9f", "#777777", "#d06090",
];

const FONT: &str = "font-family=\"Helvetica, Arial, sans-serif\"";

struct Panel {
    x0: f64,
    y0: f64,
    width: f64,
    height: f64,
}

impl Panel {
    /// Maps unit coordinates (u right, v up) to pixel coordinates.
    fn px(&self, u: f64) -> f64 {
        self.x0 + u * self.width
    }

    fn py(&self, v: f64) -> f64 {
        self.y0 + (1.0 - v) * self.height
    }

    fn frame(&self, out: &mut String, title: &str, x_label: &str, y_label: &str) {
        write!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
             fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>",
            self.x0, self.y0, self.width, self.height
        )
        .expect("string write");
        write!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" {FONT} font-size=\"13\" text-anchor=\"middle\">{}</text>",
            self.x0 + self.width / 2.0,
            self.y0 - 8.0,
            escape(title)
        )
        .expect("string write");
        write!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" {FONT} font-size=\"11\" text-anchor=\"middle\">{}</text>",
            self.x0 + self.width / 2.0,
            self.y0 + self.height + 28.0,
            escape(x_label)
        )
        .expect("string write");
        write!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" {FONT} font-size=\"11\" text-anchor=\"middle\" \
             transform=\"rotate(-90 {:.2} {:.2})\">{}</text>",
            self.x0 - 32.0,
            self.y0 + self.height / 2.0,
            self.x0 - 32.0,
            self.y0 + self.height / 2.0,
            escape(y_label)
        )
        .expect("string write");
    }

    /// Horizontal ticks at unit values with labels.
    fn y_ticks(&self, out: &mut String, ticks: &[f64]) {
        for &t in ticks {
            let y = self.py(t);
            write!(
                out,
                "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" \
                 stroke=\"#cccccc\" stroke-width=\"0.5\"/>\
                 <text x=\"{:.2}\" y=\"{:.2}\" {FONT} font-size=\"10\" text-anchor=\"end\">{t}</text>",
                self.x0,
                self.x0 + self.width,
                self.x0 - 4.0,
                y + 3.5,
            )
            .expect("string write");
        }
    }
}

fn svg_open(out: &mut String, width: f64, height: f64) {
    write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\">\
         <rect x=\"0\" y=\"0\" width=\"{width:.0}\" height=\"{height:.0}\" fill=\"#ffffff\"/>"
    )
    .expect("string write");
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Precision/recall curve over the unit square.
pub fn pr_svg(points: &[PrPoint]) -> String {
    let mut out = String::new();
    svg_open(&mut out, 460.0, 400.0);
    let panel = Panel {
        x0: 60.0,
        y0: 40.0,
        width: 360.0,
        height: 300.0,
    };
    panel.frame(&mut out, "precision / recall", "recall", "precision");
    panel.y_ticks(&mut out, &[0.0, 0.25, 0.5, 0.75, 1.0]);
    for &t in &[0.0, 0.25, 0.5, 0.75, 1.0] {
        let x = panel.px(t);
        write!(
            out,
            "<text x=\"{x:.2}\" y=\"{:.2}\" {FONT} font-size=\"10\" text-anchor=\"middle\">{t}</text>",
            panel.y0 + panel.height + 14.0
        )
        .expect("string write");
    }
    if !points.is_empty() {
        let coords: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", panel.px(p.recall), panel.py(p.precision)))
            .collect();
        write!(
            out,
            "<polyline id=\"pr-curve\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>",
            PALETTE[0],
            coords.join(" ")
        )
        .expect("string write");
        for p in points {
            write!(
                out,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{}\"/>",
                panel.px(p.recall),
                panel.py(p.precision),
                PALETTE[0]
            )
            .expect("string write");
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Confusion heatmap: ground-truth bins as rows, estimated bins as columns,
/// cell shade proportional to the count.
pub fn confusion_svg(bins_deg: &[f64], counts: &[Vec<u64>]) -> String {
    assert_eq!(bins_deg.len(), counts.len());
    let v = bins_deg.len();
    let cell = 40.0;
    let x0 = 90.0;
    let y0 = 60.0;
    let width = x0 + v as f64 * cell + 30.0;
    let height = y0 + v as f64 * cell + 50.0;
    let max = counts
        .iter()
        .flat_map(|r| r.iter().copied())
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    svg_open(&mut out, width, height);
    write!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" {FONT} font-size=\"13\" text-anchor=\"middle\">\
         estimated bin (deg)</text>",
        x0 + v as f64 * cell / 2.0,
        y0 - 36.0
    )
    .expect("string write");
    write!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" {FONT} font-size=\"13\" text-anchor=\"middle\" \
         transform=\"rotate(-90 {:.2} {:.2})\">ground-truth bin (deg)</text>",
        x0 - 64.0,
        y0 + v as f64 * cell / 2.0,
        x0 - 64.0,
        y0 + v as f64 * cell / 2.0
    )
    .expect("string write");
    for (i, b) in bins_deg.iter().enumerate() {
        write!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" {FONT} font-size=\"10\" text-anchor=\"middle\">{b}</text>",
            x0 + (i as f64 + 0.5) * cell,
            y0 - 8.0
        )
        .expect("string write");
        write!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" {FONT} font-size=\"10\" text-anchor=\"end\">{b}</text>",
            x0 - 8.0,
            y0 + (i as f64 + 0.5) * cell + 3.5
        )
        .expect("string write");
    }
    for (gt, row) in counts.iter().enumerate() {
        for (est, &count) in row.iter().enumerate() {
            let t = if max == 0 { 0.0 } else { count as f64 / max as f64 };
            // White at zero to a deep blue at the maximum.
            let lerp = |a: f64, b: f64| (a + t * (b - a)).round() as u8;
            let fill = format!("#{:02x}{:02x}{:02x}", lerp(255.0, 27.0), lerp(255.0, 108.0), lerp(255.0, 168.0));
            let x = x0 + est as f64 * cell;
            let y = y0 + gt as f64 * cell;
            write!(
                out,
                "<rect class=\"cm-cell\" x=\"{x:.2}\" y=\"{y:.2}\" width=\"{cell:.2}\" \
                 height=\"{cell:.2}\" fill=\"{fill}\" stroke=\"#999999\" stroke-width=\"0.5\"/>"
            )
            .expect("string write");
            let text_fill = if t > 0.55 { "#ffffff" } else { "#222222" };
            write!(
                out,
                "<text x=\"{:.2}\" y=\"{:.2}\" {FONT} font-size=\"11\" text-anchor=\"middle\" \
                 fill=\"{text_fill}\">{count}</text>",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            )
            .expect("string write");
        }
    }
    out.push_str("</svg>\n");
    out
}

/// One method's measure curves over the shot-count sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct KshotCurve {
    pub method: String,
    /// Mean AP per shot count, aligned with the label list.
    pub ap: Vec<f64>,
    /// Mean VP per shot count, aligned with the label list.
    pub vp: Vec<f64>,
}

/// Extracts per-method mean curves from protocol rows, preserving method
/// and shot-count order of first appearance.
pub fn kshot_curves(rows: &[ProtocolRow]) -> (Vec<String>, Vec<KshotCurve>) {
    let mut k_labels: Vec<String> = Vec::new();
    let mut curves: Vec<KshotCurve> = Vec::new();
    for row in rows.iter().filter(|r| r.repetition == "mean") {
        if !k_labels.contains(&row.k) {
            k_labels.push(row.k.clone());
        }
    }
    for row in rows.iter().filter(|r| r.repetition == "mean") {
        let idx = k_labels.iter().position(|k| *k == row.k).expect("collected above");
        let curve = match curves.iter_mut().find(|c| c.method == row.method) {
            Some(c) => c,
            None => {
                curves.push(KshotCurve {
                    method: row.method.clone(),
                    ap: vec![f64::NAN; k_labels.len()],
                    vp: vec![f64::NAN; k_labels.len()],
                });
                curves.last_mut().expect("just pushed")
            }
        };
        curve.ap[idx] = row.ap;
        curve.vp[idx] = row.vp;
    }
    (k_labels, curves)
}

/// Two panels sharing the shot-count axis: localization (AP) on the left,
/// viewpoint estimation (VP) on the right, one series per method.
pub fn kshot_svg(k_labels: &[String], curves: &[KshotCurve]) -> String {
    let mut out = String::new();
    svg_open(&mut out, 880.0, 400.0);
    let panels = [
        (
            "panel-ap",
            "2D localization (AP)",
            Panel {
                x0: 60.0,
                y0: 40.0,
                width: 330.0,
                height: 280.0,
            },
        ),
        (
            "panel-vp",
            "viewpoint estimation (VP)",
            Panel {
                x0: 490.0,
                y0: 40.0,
                width: 330.0,
                height: 280.0,
            },
        ),
    ];
    for (pi, (panel_id, title, panel)) in panels.iter().enumerate() {
        write!(out, "<g id=\"{panel_id}\">").expect("string write");
        panel.frame(&mut out, title, "training examples per view (k)", if pi == 0 { "AP" } else { "VP" });
        panel.y_ticks(&mut out, &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let x_of = |i: usize| {
            if k_labels.len() <= 1 {
                panel.px(0.5)
            } else {
                panel.px(i as f64 / (k_labels.len() - 1) as f64)
            }
        };
        for (i, k) in k_labels.iter().enumerate() {
            write!(
                out,
                "<text x=\"{:.2}\" y=\"{:.2}\" {FONT} font-size=\"10\" text-anchor=\"middle\">{}</text>",
                x_of(i),
                panel.y0 + panel.height + 14.0,
                escape(k)
            )
            .expect("string write");
        }
        for (ci, curve) in curves.iter().enumerate() {
            let values = if pi == 0 { &curve.ap } else { &curve.vp };
            let color = PALETTE[ci % PALETTE.len()];
            let coords: Vec<String> = values
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(i, v)| format!("{:.2},{:.2}", x_of(i), panel.py(v.clamp(0.0, 1.0))))
                .collect();
            let series = if pi == 0 { "ap" } else { "vp" };
            write!(
                out,
                "<polyline id=\"{series}-{}\" class=\"series\" fill=\"none\" stroke=\"{color}\" \
                 stroke-width=\"2\" points=\"{}\"/>",
                escape(&curve.method),
                coords.join(" ")
            )
            .expect("string write");
            for (i, v) in values.iter().enumerate().filter(|(_, v)| v.is_finite()) {
                write!(
                    out,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                    x_of(i),
                    panel.py(v.clamp(0.0, 1.0))
                )
                .expect("string write");
            }
            // Legend entry.
            let ly = panel.y0 + 14.0 + ci as f64 * 16.0;
            write!(
                out,
                "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" \
                 stroke-width=\"2\"/>\
                 <text x=\"{:.2}\" y=\"{:.2}\" {FONT} font-size=\"11\">{}</text>",
                panel.x0 + panel.width - 110.0,
                panel.x0 + panel.width - 88.0,
                panel.x0 + panel.width - 82.0,
                ly + 3.5,
                escape(&curve.method)
            )
            .expect("string write");
        }
        out.push_str("</g>");
    }
    out.push_str("</svg>\n");
    out
}
