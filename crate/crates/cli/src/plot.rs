//! Minimal SVG output: polylines on labelled axes, and a heat map.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Debug, Default)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<(String, Vec<(f64, f64)>)>,
    /// Draw points with a log10 x axis (non-positive x values are pinned to
    /// the left edge).
    pub log_x: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str, x_tick: impl Fn(f64) -> String) {
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(out, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let fx = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let fy = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let (px, py) = (f.px(fx), f.py(fy));
        let _ = writeln!(out, r#"<line x1="{px:.2}" y1="{b}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, b + 4.0);
        let _ = writeln!(out, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, b + 18.0, x_tick(fx));
        let _ = writeln!(out, r#"<line x1="{:.2}" y1="{py:.2}" x2="{l}" y2="{py:.2}" stroke="black"/>"#, l - 4.0);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, l - 6.0, py + 4.0, fmt_tick(fy));
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        H / 2.0,
        escape(y_label)
    );
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) { format!("{v:.1e}") } else { format!("{v:.2}") }
}

impl LinePlot {
    pub fn to_svg(&self) -> String {
        let floor = self
            .series
            .iter()
            .flat_map(|(_, p)| p.iter().map(|q| q.0))
            .filter(|&x| x > 0.0)
            .fold(f64::INFINITY, f64::min);
        let floor = if floor.is_finite() { floor.log10() - 1.0 } else { 0.0 };
        let tx = |x: f64| if !self.log_x { x } else if x > 0.0 { x.log10() } else { floor };
        let pts = || self.series.iter().flat_map(|(_, p)| p.iter());
        let f = Frame::new(pts().map(|p| tx(p.0)), pts().map(|p| p.1));
        let mut out = String::new();
        header(&mut out, &self.title);
        let log_x = self.log_x;
        axes(&mut out, &f, &self.x_label, &self.y_label, |v| if log_x { format!("1e{v:.1}") } else { fmt_tick(v) });
        for (i, (name, points)) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let d: Vec<String> = points
                .iter()
                .filter(|p| p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", f.px(tx(x)), f.py(y)))
                .collect();
            let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, d.join(" "));
            for p in &d {
                let (x, y) = p.split_once(',').expect("pair");
                let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
            }
            let ly = MARGIN + 16.0 * i as f64;
            let _ = writeln!(out, r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#, W - MARGIN - 120.0, escape(name));
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Heat map of `rows` (one row per x step, one column per y cell) in
/// grayscale, with an optional path overlaid as a red polyline.
pub fn heatmap_svg(title: &str, x_label: &str, y_label: &str, rows: &[Vec<f64>], path: &[(f64, f64)]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let n = rows.len().max(1);
    let f = Frame { x0: 0.0, x1: n as f64, y0: 0.0, y1: cols as f64 };
    let mut out = String::new();
    header(&mut out, title);
    let (cw, ch) = (f.px(1.0) - f.px(0.0), f.py(0.0) - f.py(1.0));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let shade = 255 - (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{cw:.2}" height="{ch:.2}" fill="rgb({shade},{shade},{shade})"/>"#,
                f.px(i as f64),
                f.py(j as f64 + 1.0)
            );
        }
    }
    axes(&mut out, &f, x_label, y_label, fmt_tick);
    if !path.is_empty() {
        let d: Vec<String> = path.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x + 0.5), f.py(y + 0.5))).collect();
        let _ = writeln!(out, r##"<polyline points="{}" fill="none" stroke="#d62728" stroke-width="2"/>"##, d.join(" "));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_plot_is_well_formed_and_deterministic() {
        let p = LinePlot {
            title: "a < b".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![("s".into(), vec![(0.0, 1.0), (1e-5, 2.0), (1e-3, 0.5)])],
            log_x: true,
        };
        let svg = p.to_svg();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a &lt; b"));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(svg, p.to_svg());
    }

    #[test]
    fn heatmap_has_one_cell_per_entry() {
        let svg = heatmap_svg("t", "x", "y", &[vec![0.0, 1.0], vec![0.5, 0.5], vec![1.0, 0.0]], &[(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(svg.matches("<rect").count(), 1 + 6);
        assert!(svg.contains("rgb(0,0,0)") && svg.contains("rgb(255,255,255)"));
        assert!(svg.contains("<polyline"));
    }
}
