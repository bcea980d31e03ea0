//! Minimal grouped-bar charts as SVG text.

use std::fmt::Write;

#[derive(Debug, Clone)]
pub struct Bar {
    pub value: f64,
    /// Exact table text of `value`, stored in the element's `data-value`.
    pub text: String,
    pub whisker: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub y_label: String,
    pub groups: Vec<String>,
    pub series: Vec<String>,
    /// `values[group][series]`
    pub values: Vec<Vec<Option<Bar>>>,
    /// Decimals shown in the visible bar label.
    pub label_decimals: usize,
}

const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#9c755f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_bounds(lo: f64, hi: f64) -> (f64, f64) {
    let lo = lo.min(0.0);
    let hi = hi.max(0.0);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let step = 10f64.powf(span.log10().floor() - 1.0);
    ((lo / step).floor() * step, (hi / step).ceil() * step)
}

pub fn render(chart: &Chart) -> String {
    let n_series = chart.series.len().max(1);
    let bar_w = 18.0;
    let group_w = bar_w * n_series as f64 + 24.0;
    let left = 70.0;
    let top = 40.0;
    let plot_h = 260.0;
    let plot_w = (group_w * chart.groups.len().max(1) as f64).max(200.0);
    let legend_h = 18.0 * chart.series.len() as f64;
    let width = left + plot_w + 20.0;
    let height = top + plot_h + 70.0 + legend_h;

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for bar in chart.values.iter().flatten().flatten() {
        let (a, b) = bar.whisker.unwrap_or((bar.value, bar.value));
        lo = lo.min(a.min(bar.value));
        hi = hi.max(b.max(bar.value));
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let (lo, hi) = nice_bounds(lo, hi);
    let y = |v: f64| top + plot_h * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(&chart.title)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16,{}) rotate(-90)" text-anchor="middle">{}</text>"#,
        top + plot_h / 2.0,
        escape(&chart.y_label)
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{yy:.2}" x2="{}" y2="{yy:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            left + plot_w,
            left - 6.0,
            yy + 4.0,
            trim(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{:.2}" x2="{}" y2="{:.2}" stroke="black"/>"#,
        y(0.0),
        left + plot_w,
        y(0.0)
    );

    for (g, name) in chart.groups.iter().enumerate() {
        let gx = left + g as f64 * group_w + 12.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            gx + bar_w * n_series as f64 / 2.0,
            top + plot_h + 18.0,
            escape(name)
        );
        for (k, bar) in chart.values[g].iter().enumerate() {
            let Some(bar) = bar else { continue };
            let x = gx + k as f64 * bar_w;
            let (y0, y1) = (y(0.0), y(bar.value));
            let _ = writeln!(
                s,
                r#"<rect class="bar" x="{x:.2}" y="{:.2}" width="{}" height="{:.2}" fill="{}" data-value="{}"><title>{}: {}</title></rect>"#,
                y0.min(y1),
                bar_w - 2.0,
                (y0 - y1).abs(),
                PALETTE[k % PALETTE.len()],
                escape(&bar.text),
                escape(&chart.series[k]),
                escape(&bar.text)
            );
            if let Some((a, b)) = bar.whisker {
                let cx = x + (bar_w - 2.0) / 2.0;
                let _ = writeln!(
                    s,
                    r#"<path d="M{cx:.2} {:.2}V{:.2}M{:.2} {:.2}H{:.2}M{:.2} {:.2}H{:.2}" stroke="black"/>"#,
                    y(a),
                    y(b),
                    cx - 3.0,
                    y(a),
                    cx + 3.0,
                    cx - 3.0,
                    y(b),
                    cx + 3.0
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="8">{:.*}</text>"#,
                x + (bar_w - 2.0) / 2.0,
                y1.min(y0) - 3.0,
                chart.label_decimals,
                bar.value
            );
        }
    }

    for (k, name) in chart.series.iter().enumerate() {
        let ly = top + plot_h + 36.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{:.2}" width="12" height="12" fill="{}"/><text x="{}" y="{:.2}">{}</text>"#,
            ly - 10.0,
            PALETTE[k % PALETTE.len()],
            left + 18.0,
            ly,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn trim(v: f64) -> String {
    let t = format!("{v:.4}");
    let t = t.trim_end_matches('0').trim_end_matches('.');
    if t == "-0" { "0".into() } else { t.to_string() }
}
