//! Minimal static SVG line plots with logarithmic axes.

use std::fmt::Write;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub color: String,
}

#[derive(Debug, Clone)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_scale: Scale,
    pub y_scale: Scale,
    pub series: Vec<Series>,
}

const PALETTE: [&str; 6] = ["#1f5fbf", "#c0392b", "#27ae60", "#8e44ad", "#d68910", "#2c3e50"];

pub fn color(i: usize) -> String {
    PALETTE[i % PALETTE.len()].to_string()
}

const W: f64 = 640.0;
const H: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

struct Axis {
    scale: Scale,
    lo: f64,
    hi: f64,
}

impl Axis {
    fn new(scale: Scale, values: impl Iterator<Item = f64>) -> Self {
        let t = |v: f64| if scale == Scale::Log { v.log10() } else { v };
        let (mut lo, mut hi) = values
            .filter(|v| v.is_finite() && (scale == Scale::Linear || *v > 0.0))
            .map(t)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if scale == Scale::Log {
            (lo, hi) = (lo.floor(), hi.ceil());
        }
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        Self { scale, lo, hi }
    }

    /// Fraction of the axis length, or `None` if unplottable.
    fn frac(&self, v: f64) -> Option<f64> {
        let v = match self.scale {
            Scale::Log if v > 0.0 => v.log10(),
            Scale::Log => return None,
            Scale::Linear => v,
        };
        v.is_finite().then(|| (v - self.lo) / (self.hi - self.lo))
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        match self.scale {
            Scale::Log => {
                let step = ((self.hi - self.lo) / 8.0).ceil().max(1.0) as i32;
                (self.lo as i32..=self.hi as i32)
                    .step_by(step as usize)
                    .map(|e| (10f64.powi(e), format!("1e{e}")))
                    .collect()
            }
            Scale::Linear => (0..=5)
                .map(|k| {
                    let v = self.lo + (self.hi - self.lo) * k as f64 / 5.0;
                    (v, format!("{v:.4}").trim_end_matches('0').trim_end_matches('.').to_string())
                })
                .collect(),
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Plot {
    pub fn render(&self) -> String {
        let all = || self.series.iter().flat_map(|s| s.points.iter());
        let xa = Axis::new(self.x_scale, all().map(|p| p.0));
        let ya = Axis::new(self.y_scale, all().map(|p| p.1));
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let px = |v: f64| xa.frac(v).map(|f| LEFT + f * pw);
        let py = |v: f64| ya.frac(v).map(|f| TOP + (1.0 - f) * ph);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for (v, label) in xa.ticks() {
            if let Some(x) = px(v) {
                let _ = writeln!(
                    s,
                    r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"##,
                    TOP + ph,
                    TOP + ph + 18.0
                );
            }
        }
        for (v, label) in ya.ticks() {
            if let Some(y) = py(v) {
                let _ = writeln!(
                    s,
                    r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"##,
                    LEFT + pw,
                    LEFT - 6.0,
                    y + 4.0
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            H - 15.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let pts: Vec<(f64, f64)> = series
                .points
                .iter()
                .filter_map(|&(x, y)| Some((px(x)?, py(y)?)))
                .collect();
            if pts.len() > 1 {
                let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                    path.join(" "),
                    series.color
                );
            }
            if pts.len() <= 32 {
                for (x, y) in &pts {
                    let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{}"/>"#, series.color);
                }
            }
            let ly = TOP + 16.0 + 18.0 * i as f64;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                lx + 20.0,
                series.color,
                lx + 26.0,
                ly + 4.0,
                escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}
