//! Minimal SVG scatter and line charts.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 480.0;
const PAD: f64 = 40.0;
const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series<'a> {
    pub label: &'a str,
    pub points: &'a [(f64, f64)],
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(series: &[Series<'_>]) -> Self {
        let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let widen = |lo: f64, hi: f64| if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        let (x0, x1) = widen(x0, x1);
        let (y0, y1) = widen(y0, y1);
        Self { x0, x1, y0, y1 }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (
            PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD),
            H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD),
        )
    }
}

fn open(title: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="{}" font-size="10">x [{:.3}, {:.3}]  y [{:.3}, {:.3}]</text>"#,
        H - 10.0,
        f.x0,
        f.x1,
        f.y0,
        f.y1
    );
    s
}

fn legend(s: &mut String, series: &[Series<'_>]) {
    for (k, ser) in series.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{}">{}</text>"#,
            W - PAD - 100.0,
            PAD + 14.0 * (k + 1) as f64,
            COLOURS[k % COLOURS.len()],
            escape(ser.label)
        );
    }
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn scatter_svg(title: &str, series: &[Series<'_>]) -> String {
    let f = Frame::fit(series);
    let mut s = open(title, &f);
    for (k, ser) in series.iter().enumerate() {
        let c = COLOURS[k % COLOURS.len()];
        for &(x, y) in ser.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let (px, py) = f.map(x, y);
            let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="1.5" fill="{c}" fill-opacity="0.6"/>"#);
        }
    }
    legend(&mut s, series);
    s.push_str("</svg>\n");
    s
}

pub fn line_svg(title: &str, series: &[Series<'_>]) -> String {
    let f = Frame::fit(series);
    let mut s = open(title, &f);
    for (k, ser) in series.iter().enumerate() {
        let c = COLOURS[k % COLOURS.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| {
                let (px, py) = f.map(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, path.join(" "));
        for p in &path {
            let (px, py) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="2.5" fill="{c}"/>"#);
        }
    }
    legend(&mut s, series);
    s.push_str("</svg>\n");
    s
}
