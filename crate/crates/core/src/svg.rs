//! Minimal fixed-layout SVG line and scatter plots for the exported figures.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub color: String,
    pub width: f64,
    pub opacity: f64,
    pub dashed: bool,
    /// Draw markers instead of a polyline.
    pub markers: bool,
}

impl Series {
    pub fn line(x: Vec<f64>, y: Vec<f64>, color: &str) -> Self {
        Series {
            x,
            y,
            color: color.to_string(),
            width: 1.5,
            opacity: 1.0,
            dashed: false,
            markers: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }

    pub fn thin(mut self, width: f64, opacity: f64) -> Self {
        self.width = width;
        self.opacity = opacity;
        self
    }

    pub fn markers(mut self) -> Self {
        self.markers = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Horizontal reference lines `(y, color)`.
    pub hlines: Vec<(f64, String)>,
}

impl Plot {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Plot {
            title: title.to_string(),
            x_label: x_label.to_string(),
            y_label: y_label.to_string(),
            ..Plot::default()
        }
    }

    pub fn with(mut self, s: Series) -> Self {
        self.series.push(s);
        self
    }

    pub fn hline(mut self, y: f64, color: &str) -> Self {
        self.hlines.push((y, color.to_string()));
        self
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for (&x, &y) in s.x.iter().zip(&s.y) {
                if x.is_finite() && y.is_finite() {
                    b = (b.0.min(x), b.1.max(x), b.2.min(y), b.3.max(y));
                }
            }
        }
        for (y, _) in &self.hlines {
            b = (b.0, b.1, b.2.min(*y), b.3.max(*y));
        }
        if !b.0.is_finite() {
            return (0.0, 1.0, 0.0, 1.0);
        }
        let widen = |lo: f64, hi: f64| {
            if hi > lo {
                let pad = 0.04 * (hi - lo);
                (lo - pad, hi + pad)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        let (x0, x1) = widen(b.0, b.1);
        let (y0, y1) = widen(b.2, b.3);
        (x0, x1, y0, y1)
    }

    pub fn render(&self) -> String {
        let (x0, x1, y0, y1) = self.bounds();
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            let fy = y0 + (y1 - y0) * i as f64 / 4.0;
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                sx(fx),
                TOP + ph + 16.0,
                tick(fx)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                LEFT - 6.0,
                sy(fy) + 4.0,
                tick(fy)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (y, color) in &self.hlines {
            let _ = writeln!(
                out,
                r#"<line x1="{LEFT}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="{color}" stroke-dasharray="6 4"/>"#,
                LEFT + pw,
                sy(*y),
                sy(*y)
            );
        }
        for s in &self.series {
            if s.markers {
                for (&x, &y) in s.x.iter().zip(&s.y) {
                    if x.is_finite() && y.is_finite() {
                        let _ = writeln!(
                            out,
                            r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{}" fill-opacity="{}"/>"#,
                            sx(x),
                            sy(y),
                            s.color,
                            s.opacity
                        );
                    }
                }
                continue;
            }
            let pts: Vec<String> = s
                .x
                .iter()
                .zip(&s.y)
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|(&x, &y)| format!("{:.1},{:.1}", sx(x), sy(y)))
                .collect();
            let dash = if s.dashed { r#" stroke-dasharray="5 3""# } else { "" };
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="{}" stroke-opacity="{}"{dash}/>"#,
                pts.join(" "),
                s.color,
                s.width,
                s.opacity
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_deterministically() {
        let p = Plot::new("a < b", "x", "y")
            .with(Series::line(vec![0.0, 1.0], vec![0.0, 2.0], "red"))
            .hline(0.7, "gray");
        let a = p.render();
        assert_eq!(a, p.render());
        assert!(a.starts_with("<svg"));
        assert!(a.contains("a &lt; b"));
        assert!(a.contains("<polyline"));
    }
}
