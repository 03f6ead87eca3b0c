//! Figure and data export. All output is deterministic text: exporting the
//! same inputs twice yields identical bytes.

use std::fmt::Write;

use serde::Serialize;

use crate::barrier::EnvironmentInfo;
use crate::dynamics::{LinearCtrlAffineSystem, Trajectory};
use crate::training::IterMetrics;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 20.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// World-to-pixel map with the y axis pointing up.
#[derive(Debug, Clone, Copy)]
struct View {
    x0: f64,
    y1: f64,
    scale: f64,
}

impl View {
    fn fit(points: impl Iterator<Item = [f64; 2]>) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points.filter(|p| p[0].is_finite() && p[1].is_finite()) {
            for i in 0..2 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        if !(lo[0] <= hi[0]) {
            lo = [-1.0; 2];
            hi = [1.0; 2];
        }
        let span = [(hi[0] - lo[0]).max(1e-6), (hi[1] - lo[1]).max(1e-6)];
        let scale = ((WIDTH - 2.0 * MARGIN) / span[0]).min((HEIGHT - 2.0 * MARGIN) / span[1]);
        Self { x0: lo[0], y1: hi[1], scale }
    }

    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        (MARGIN + (p[0] - self.x0) * self.scale, MARGIN + (self.y1 - p[1]) * self.scale)
    }
}

/// Center, semi-axes and rotation (degrees, SVG convention) of an obstacle.
/// The first semi-axis points along `(cos θ, −sin θ)` in the world frame,
/// which becomes a clockwise-positive `rotate(θ)` once y is flipped.
pub fn ellipse_geometry(e: &EnvironmentInfo<f64>) -> ([f64; 2], [f64; 2], f64) {
    (e.center, e.semi_axes(), e.theta.to_degrees())
}

fn ellipse_extent(e: &EnvironmentInfo<f64>) -> [[f64; 2]; 2] {
    let r = e.semi_axes()[0].max(e.semi_axes()[1]);
    [[e.center[0] - r, e.center[1] - r], [e.center[0] + r, e.center[1] + r]]
}

pub struct SceneTrace<'a> {
    pub label: &'a str,
    pub positions: Vec<[f64; 2]>,
}

impl<'a> SceneTrace<'a> {
    pub fn from_trajectory(label: &'a str, sys: &LinearCtrlAffineSystem<f64>, traj: &Trajectory<f64>) -> Self {
        Self {
            label,
            positions: traj.states.iter().map(|x| sys.position(x)).collect(),
        }
    }
}

/// Standalone SVG with one `<ellipse>` per obstacle, one polyline per trace
/// and start/goal markers.
pub fn scene_svg(envs: &[EnvironmentInfo<f64>], traces: &[SceneTrace<'_>], start: [f64; 2], goal: [f64; 2]) -> String {
    let pts = traces.iter().flat_map(|t| t.positions.iter().copied()).chain(envs.iter().flat_map(ellipse_extent)).chain([start, goal]);
    let view = View::fit(pts);
    let mut s = header();
    for (i, e) in envs.iter().enumerate() {
        let (c, ax, deg) = ellipse_geometry(e);
        let (cx, cy) = view.px(c);
        writeln!(
            s,
            r##"<ellipse id="obstacle-{i}" cx="{cx:.3}" cy="{cy:.3}" rx="{:.3}" ry="{:.3}" transform="rotate({deg:.4} {cx:.3} {cy:.3})" fill="#bbbbbb" stroke="#555555"/>"##,
            ax[0] * view.scale,
            ax[1] * view.scale
        )
        .unwrap();
    }
    for (i, t) in traces.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = t
            .positions
            .iter()
            .map(|&p| {
                let (x, y) = view.px(p);
                format!("{x:.3},{y:.3}")
            })
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
            points.join(" "),
            escape(t.label)
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" fill="{color}">{}</text>"#,
            WIDTH - 150.0,
            16.0 + 14.0 * i as f64,
            escape(t.label)
        )
        .unwrap();
    }
    let (sx, sy) = view.px(start);
    let (gx, gy) = view.px(goal);
    writeln!(s, r##"<circle id="start" cx="{sx:.3}" cy="{sy:.3}" r="4" fill="#000000"/>"##).unwrap();
    writeln!(s, r##"<rect id="goal" x="{:.3}" y="{:.3}" width="8" height="8" fill="#2ca02c"/>"##, gx - 4.0, gy - 4.0).unwrap();
    s.push_str("</svg>\n");
    s
}

/// Mean training loss per iteration as a polyline.
pub fn training_curve_svg(metrics: &[IterMetrics]) -> String {
    let pts: Vec<[f64; 2]> = metrics.iter().map(|m| [m.iter as f64, m.mean_loss]).collect();
    let mut s = header();
    if pts.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[1]), b.max(p[1])));
    let n = pts.last().map_or(1.0, |p| p[0].max(1.0));
    let span = (hi - lo).max(1e-12);
    let px = |p: [f64; 2]| (MARGIN + p[0] / n * (WIDTH - 2.0 * MARGIN), MARGIN + (hi - p[1]) / span * (HEIGHT - 2.0 * MARGIN));
    let points: Vec<String> = pts
        .iter()
        .map(|&p| {
            let (x, y) = px(p);
            format!("{x:.3},{y:.3}")
        })
        .collect();
    writeln!(s, r##"<polyline id="loss" fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##, points.join(" ")).unwrap();
    writeln!(s, r#"<text x="{MARGIN}" y="14" font-size="12">loss {hi:.4}</text>"#).unwrap();
    writeln!(s, r#"<text x="{MARGIN}" y="{:.1}" font-size="12">loss {lo:.4}</text>"#, HEIGHT - 4.0).unwrap();
    s.push_str("</svg>\n");
    s
}

/// Pretty JSON with a trailing newline.
pub fn to_json<S: Serialize>(value: &S) -> Result<String, serde_json::Error> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// One JSON object per line.
pub fn metrics_jsonl(metrics: &[IterMetrics]) -> Result<String, serde_json::Error> {
    let mut s = String::new();
    for m in metrics {
        s.push_str(&serde_json::to_string(m)?);
        s.push('\n');
    }
    Ok(s)
}

fn header() -> String {
    format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#) + "\n"
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
