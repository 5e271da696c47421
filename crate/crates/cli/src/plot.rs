//! Static log-log SVG of a sweep.

use std::fmt::Write;

use dyadic_lab::verify::{SlopeFit, SweepRow};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 64.0;

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    /// Decade-aligned bounds around `values` (already in log10).
    fn around(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        let (lo, hi) = (lo.floor(), hi.ceil());
        Self {
            lo,
            hi: if hi > lo { hi } else { lo + 1.0 },
        }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

fn x_px(axis: &Axis, v: f64) -> f64 {
    MARGIN + axis.frac(v) * (WIDTH - 2.0 * MARGIN)
}

fn y_px(axis: &Axis, v: f64) -> f64 {
    HEIGHT - MARGIN - axis.frac(v) * (HEIGHT - 2.0 * MARGIN)
}

pub fn sweep_svg(rows: &[SweepRow], fit: Option<&SlopeFit>, title: &str) -> String {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.is_ok() && r.a2 > 0.0 && r.norm > 0.0)
        .map(|r| (r.a2.log10(), r.norm.log10()))
        .collect();
    let xa = Axis::around(pts.iter().map(|p| p.0));
    let ya = Axis::around(pts.iter().map(|p| p.1));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, x1) = (MARGIN, WIDTH - MARGIN);
    let (y0, y1) = (HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for e in (xa.lo as i32)..=(xa.hi as i32) {
        let x = x_px(&xa, e as f64);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{}" stroke="black"/>"#, y0 + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">1e{e}</text>"#, y0 + 20.0);
    }
    for e in (ya.lo as i32)..=(ya.hi as i32) {
        let y = y_px(&ya, e as f64);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#, x0 - 5.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">1e{e}</text>"#, x0 - 8.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">A2 constant</text>"#,
        WIDTH / 2.0,
        HEIGHT - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">weighted norm</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    if let Some(fit) = fit {
        let line = |x: f64| fit.intercept / std::f64::consts::LN_10 + fit.slope * x;
        let (a, b) = (xa.lo, xa.hi);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="crimson" stroke-dasharray="6 4"/>"#,
            x_px(&xa, a),
            y_px(&ya, line(a)).clamp(y1, y0),
            x_px(&xa, b),
            y_px(&ya, line(b)).clamp(y1, y0)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="crimson">slope {:.4}, r2 {:.4}</text>"#,
            x0 + 10.0,
            y1 + 14.0,
            fit.slope,
            fit.r2
        );
    }
    for (x, y) in &pts {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="steelblue"/>"#,
            x_px(&xa, *x),
            y_px(&ya, *y)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
