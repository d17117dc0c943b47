//! Orthographic xy and xz projections of paths over the obstacles.

use std::fmt::Write;

use ddp_core::environment::{Cuboid, World};
use nalgebra::Vector3;

const PANEL: f64 = 360.0;
const MARGIN: f64 = 20.0;

pub struct Plot<'a> {
    world: &'a World,
    paths: Vec<(Vec<Vector3<f64>>, bool)>,
    markers: Vec<(Vector3<f64>, &'static str)>,
    title: String,
}

impl<'a> Plot<'a> {
    pub fn new(world: &'a World, title: impl Into<String>) -> Self {
        Self {
            world,
            paths: Vec::new(),
            markers: Vec::new(),
            title: title.into(),
        }
    }

    pub fn path(&mut self, points: Vec<Vector3<f64>>, highlight: bool) -> &mut Self {
        self.paths.push((points, highlight));
        self
    }

    pub fn marker(&mut self, at: Vector3<f64>, color: &'static str) -> &mut Self {
        self.markers.push((at, color));
        self
    }

    pub fn render(&self) -> String {
        let width = 2.0 * PANEL + 3.0 * MARGIN;
        let height = PANEL + 2.0 * MARGIN + 16.0;
        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
        )
        .unwrap();
        writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
        writeln!(
            s,
            r#"<text x="{MARGIN}" y="14" font-family="monospace" font-size="12">{}</text>"#,
            escape(&self.title)
        )
        .unwrap();
        for (panel, axes, label) in [(0, (0, 1), "xy"), (1, (0, 2), "xz")] {
            let ox = MARGIN + panel as f64 * (PANEL + MARGIN);
            self.panel(&mut s, ox, MARGIN + 16.0, axes, label);
        }
        s.push_str("</svg>\n");
        s
    }

    fn panel(&self, s: &mut String, ox: f64, oy: f64, (a, b): (usize, usize), label: &str) {
        let bounds = self.world.bounds();
        let (lo, hi) = (bounds.min_corner(), bounds.max_corner());
        let scale = PANEL / (hi[a] - lo[a]).max(hi[b] - lo[b]);
        // Second axis points up.
        let px = |p: &Vector3<f64>| (ox + (p[a] - lo[a]) * scale, oy + PANEL - (p[b] - lo[b]) * scale);
        let rect = |s: &mut String, c: &Cuboid, style: &str| {
            let (x0, y0) = px(&c.min_corner());
            let (x1, y1) = px(&c.max_corner());
            writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" {style}/>"#,
                x0.min(x1),
                y0.min(y1),
                (x1 - x0).abs(),
                (y1 - y0).abs()
            )
            .unwrap();
        };
        rect(s, bounds, r#"fill="none" stroke="black""#);
        for o in self.world.obstacles() {
            rect(s, o, r##"fill="#999" fill-opacity="0.6" stroke="#555""##);
        }
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="11">{label}</text>"#,
            ox + 4.0,
            oy + 12.0
        )
        .unwrap();
        for (points, highlight) in self.paths.iter().filter(|p| !p.1).chain(self.paths.iter().filter(|p| p.1)) {
            let pts: Vec<String> = points
                .iter()
                .map(|p| {
                    let (x, y) = px(p);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            let style = if *highlight {
                r##"stroke="#d62728" stroke-width="2.5""##
            } else {
                r##"stroke="#1f77b4" stroke-width="1" stroke-opacity="0.5""##
            };
            writeln!(s, r#"<polyline points="{}" fill="none" {style}/>"#, pts.join(" ")).unwrap();
        }
        for (at, color) in &self.markers {
            let (x, y) = px(at);
            writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}"/>"#).unwrap();
        }
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
