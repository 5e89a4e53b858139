//! Grouped bar charts as standalone SVG text.
//!
//! Every bar is a `<rect class="bar">` carrying `data-setting`,
//! `data-metric` and `data-value` attributes; its height is
//! `data-value × PLOT_HEIGHT`.

use std::fmt::Write;

use promptfuse::train::SummaryRow;

pub const PLOT_HEIGHT: f64 = 300.0;
const BAR_WIDTH: f64 = 18.0;
const GROUP_GAP: f64 = 30.0;
const LEFT: f64 = 60.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const METRICS: [(&str, &str); 4] = [
    ("acc", "#4c72b0"),
    ("wf1", "#dd8452"),
    ("wp", "#55a868"),
    ("r", "#c44e52"),
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn metric(row: &SummaryRow, name: &str) -> f64 {
    match name {
        "acc" => row.acc,
        "wf1" => row.wf1,
        "wp" => row.wp,
        _ => row.r,
    }
}

pub fn bar_chart_svg(title: &str, rows: &[SummaryRow]) -> String {
    let group_width = BAR_WIDTH * METRICS.len() as f64;
    let width = LEFT + rows.len() as f64 * (group_width + GROUP_GAP) + GROUP_GAP + 90.0;
    let height = TOP + PLOT_HEIGHT + BOTTOM;
    let base = TOP + PLOT_HEIGHT;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="15">{}</text>"#, width / 2.0, escape(title));
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = base - v * PLOT_HEIGHT;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" x2="{}" y1="{y}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.1}</text>"##,
            width - 90.0,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for (g, row) in rows.iter().enumerate() {
        let x0 = LEFT + GROUP_GAP + g as f64 * (group_width + GROUP_GAP);
        for (m, (name, color)) in METRICS.iter().enumerate() {
            let value = metric(row, name);
            let h = value * PLOT_HEIGHT;
            let _ = writeln!(
                s,
                r#"<rect class="bar" data-setting="{}" data-metric="{name}" data-value="{value}" x="{}" y="{}" width="{BAR_WIDTH}" height="{h}" fill="{color}"/>"#,
                escape(&row.setting),
                x0 + m as f64 * BAR_WIDTH,
                base - h,
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + group_width / 2.0,
            base + 18.0,
            escape(&row.setting)
        );
    }
    for (m, (name, color)) in METRICS.iter().enumerate() {
        let y = TOP + 14.0 * m as f64;
        let x = width - 80.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{y}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{name}</text>"#,
            x + 14.0,
            y + 9.0
        );
    }
    s.push_str("</svg>\n");
    s
}
