//! Deterministic SVG bar and line charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

/// y-axis range covering every finite value and zero, padded by 5%.
pub fn axis_range(values: &[f64]) -> (f64, f64) {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi == lo {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (if lo < 0.0 { lo - pad } else { lo }, if hi > 0.0 { hi + pad } else { hi })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    lo: f64,
    hi: f64,
}

impl Frame {
    fn y(&self, v: f64) -> f64 {
        TOP + (HEIGHT - TOP - BOTTOM) * (self.hi - v) / (self.hi - self.lo)
    }
}

fn header(out: &mut String, title: &str, y_label: &str, f: &Frame) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for i in 0..=4 {
        let v = f.lo + (f.hi - f.lo) * i as f64 / 4.0;
        let y = f.y(v);
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"##,
            WIDTH - RIGHT,
            LEFT - 4.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        f.y(0.0f64.clamp(f.lo, f.hi)),
        WIDTH - RIGHT,
        f.y(0.0f64.clamp(f.lo, f.hi))
    );
}

/// One bar per label; non-finite values are drawn as empty slots.
pub fn bar_chart(title: &str, y_label: &str, labels: &[String], values: &[f64]) -> String {
    let (lo, hi) = axis_range(values);
    let f = Frame { lo, hi };
    let mut out = String::new();
    header(&mut out, title, y_label, &f);
    let n = labels.len().max(1) as f64;
    let slot = (WIDTH - LEFT - RIGHT) / n;
    let base = f.y(0.0f64.clamp(lo, hi));
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.15;
        if v.is_finite() {
            let y = f.y(v);
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{}: {v:.4}</title></rect>"#,
                y.min(base),
                slot * 0.7,
                (y - base).abs(),
                PALETTE[i % PALETTE.len()],
                escape(label)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + slot * (i as f64 + 0.5),
            HEIGHT - BOTTOM + 16.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Named series over shared x positions.
pub fn line_chart(title: &str, y_label: &str, xs: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let (lo, hi) = axis_range(&all);
    let f = Frame { lo, hi };
    let mut out = String::new();
    header(&mut out, title, y_label, &f);
    let (xmin, xmax) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if xmax > xmin { xmax - xmin } else { 1.0 };
    let px = |x: f64| LEFT + (WIDTH - LEFT - RIGHT) * (x - xmin) / span;
    for &x in xs {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x}</text>"#,
            px(x),
            HEIGHT - BOTTOM + 16.0
        );
    }
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), f.y(y)))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for p in &pts {
            let (x, y) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" fill="{color}">{}</text>"#,
            LEFT + 8.0 + 120.0 * k as f64,
            HEIGHT - 12.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Horizontal strip of per-atom importance, one row per molecule.
pub fn attribution_strips(rows: &[(String, Vec<f64>)]) -> String {
    let cell = 14.0;
    let label_w = 140.0;
    let max_atoms = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0) as f64;
    let w = label_w + cell * max_atoms.max(1.0) + 10.0;
    let h = cell * rows.len().max(1) as f64 + 20.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (r, (label, imp)) in rows.iter().enumerate() {
        let y = 10.0 + cell * r as f64;
        let peak = imp.iter().copied().fold(0.0f64, f64::max);
        let _ = writeln!(out, r#"<text x="4" y="{:.2}">{}</text>"#, y + cell * 0.75, escape(label));
        for (a, &v) in imp.iter().enumerate() {
            let t = if peak > 0.0 { v / peak } else { 0.0 };
            let shade = (255.0 * (1.0 - t)).round() as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{y:.2}" width="{cell}" height="{cell}" fill="rgb(255,{shade},{shade})" stroke="white"><title>atom {a}: {v:.6}</title></rect>"#,
                label_w + cell * a as f64
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
