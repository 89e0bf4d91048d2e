//! Static SVG bar charts of per-group signed bias.
//!
//! Output is a pure function of the input values: fixed geometry, fixed
//! number formatting, groups in report order.

use std::fmt::Write;

use thiserror::Error;

use crate::metrics::BiasReport;

const ROW_H: f64 = 22.0;
const LABEL_W: f64 = 150.0;
const PANEL_W: f64 = 420.0;
const BAR_W: f64 = 240.0;
const TOP: f64 = 48.0;
const POS_FILL: &str = "#c0504d";
const NEG_FILL: &str = "#4f81bd";

#[derive(Debug, Error)]
pub enum ChartError {
    #[error("report has no groups with a bias value")]
    Empty,
    #[error("before/after reports cover different groups: {0}")]
    GroupMismatch(String),
}

/// (group, γ) in report order, skipping groups without templates.
pub fn group_bars(report: &BiasReport) -> Vec<(String, f64)> {
    report
        .per_group
        .iter()
        .filter_map(|(g, v)| v.gamma.map(|x| (g.clone(), x)))
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Symmetric axis bound: the largest |value| rounded up to a 0.05 step.
fn axis_bound(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.fold(0.0f64, |a, v| a.max(v.abs()));
    ((m / 0.05 - 1e-9).ceil() * 0.05).max(0.05)
}

fn panel(out: &mut String, x0: f64, title: &str, bars: &[(String, f64)], bound: f64) {
    let zero = x0 + LABEL_W + BAR_W / 2.0;
    let half = BAR_W / 2.0;
    let bottom = TOP + ROW_H * bars.len() as f64;
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" font-size="14" font-weight="bold" text-anchor="middle">{}</text>"#,
        zero,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<line x1="{zero:.1}" y1="{:.1}" x2="{zero:.1}" y2="{bottom:.1}" stroke="black" stroke-width="1"/>"#,
        TOP - 4.0
    );
    for (i, (group, v)) in bars.iter().enumerate() {
        let y = TOP + ROW_H * i as f64;
        let len = half * v / bound;
        let (x, w, fill) = if *v >= 0.0 {
            (zero, len, POS_FILL)
        } else {
            (zero + len, -len, NEG_FILL)
        };
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="end">{}</text>"#,
            x0 + LABEL_W - 6.0,
            y + ROW_H * 0.65,
            escape(group)
        );
        let _ = writeln!(
            out,
            r#"<rect class="bar" data-group="{}" data-value="{v:.6}" x="{x:.1}" y="{:.1}" width="{w:.1}" height="{:.1}" fill="{fill}"/>"#,
            escape(group),
            y + 3.0,
            ROW_H - 6.0
        );
    }
    for tick in [-bound, 0.0, bound] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{tick:.2}</text>"#,
            zero + half * tick / bound,
            bottom + 14.0
        );
    }
}

fn document(width: f64, rows: usize, body: &str) -> String {
    let height = TOP + ROW_H * rows as f64 + 28.0;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

/// One panel of horizontal bars around a zero line; positive bars point right.
pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> Result<String, ChartError> {
    if bars.is_empty() {
        return Err(ChartError::Empty);
    }
    let bound = axis_bound(bars.iter().map(|b| b.1));
    let mut body = String::new();
    panel(&mut body, 0.0, title, bars, bound);
    Ok(document(PANEL_W, bars.len(), &body))
}

pub fn report_chart(title: &str, report: &BiasReport) -> Result<String, ChartError> {
    bar_chart(title, &group_bars(report))
}

/// Before (left) and after (right) panels on a shared axis.
pub fn paired_chart(
    titles: (&str, &str),
    before: &BiasReport,
    after: &BiasReport,
) -> Result<String, ChartError> {
    let b = group_bars(before);
    let a = group_bars(after);
    if b.is_empty() || a.is_empty() {
        return Err(ChartError::Empty);
    }
    let names = |v: &[(String, f64)]| v.iter().map(|x| x.0.clone()).collect::<Vec<_>>();
    if names(&b) != names(&a) {
        return Err(ChartError::GroupMismatch(format!(
            "{:?} vs {:?}",
            names(&b),
            names(&a)
        )));
    }
    let bound = axis_bound(b.iter().chain(&a).map(|x| x.1));
    let mut body = String::new();
    panel(&mut body, 0.0, titles.0, &b, bound);
    panel(&mut body, PANEL_W, titles.1, &a, bound);
    Ok(document(2.0 * PANEL_W, b.len(), &body))
}

/// CSV behind a chart: `group,gamma` or `group,gamma_before,gamma_after`.
pub fn chart_csv(before: &BiasReport, after: Option<&BiasReport>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let cell = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    match after {
        None => {
            w.write_record(["group", "gamma"]).expect("in-memory write");
            for (g, v) in &before.per_group {
                w.write_record([g.clone(), cell(v.gamma)]).expect("in-memory write");
            }
        }
        Some(after) => {
            w.write_record(["group", "gamma_before", "gamma_after"])
                .expect("in-memory write");
            for (g, v) in &before.per_group {
                let a = after.per_group.get(g).and_then(|x| x.gamma);
                w.write_record([g.clone(), cell(v.gamma), cell(a)])
                    .expect("in-memory write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}
