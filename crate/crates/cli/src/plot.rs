//! Static SVG output: one panel per episode plus a duration bar chart.
//!
//! Trajectories are the only `<path>` elements; tubes, targets and bars use
//! polygons, polylines and rects.

use std::fmt::Write;

use hpl::dynamics::State;
use hpl::environment::TubeEnvironment;
use hpl::harness::{Mode, StepRecord};

use crate::config::PlotConfig;

pub struct PlotEpisode {
    pub id: String,
    pub env: TubeEnvironment,
    pub states: Vec<State>,
    pub records: Vec<StepRecord>,
    pub hpl_steps: Option<usize>,
    pub baseline_steps: Option<usize>,
}

const PAD: f64 = 12.0;
const TITLE: f64 = 18.0;
const BAR_ROW: f64 = 20.0;
const BAR_LABEL: f64 = 110.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// World-to-pixel map for one panel, y pointing up.
struct View {
    x0: f64,
    y1: f64,
    scale: f64,
    ox: f64,
    oy: f64,
}

impl View {
    fn fit(pts: &[[f64; 2]], ox: f64, oy: f64, w: f64, h: f64) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in pts {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let scale = ((w - 2.0 * PAD) / (x1 - x0).max(1e-9)).min((h - 2.0 * PAD - TITLE) / (y1 - y0).max(1e-9));
        View { x0, y1, scale, ox: ox + PAD, oy: oy + PAD + TITLE }
    }

    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        (self.ox + (p[0] - self.x0) * self.scale, self.oy + (self.y1 - p[1]) * self.scale)
    }

    fn points(&self, pts: &[[f64; 2]]) -> String {
        let mut s = String::new();
        for &p in pts {
            let (x, y) = self.px(p);
            let _ = write!(s, "{x:.2},{y:.2} ");
        }
        s.trim_end().to_string()
    }
}

fn boundary(env: &TubeEnvironment, h: f64) -> Vec<[f64; 2]> {
    let total = env.total_length();
    let mut ss: Vec<f64> = (0..=200).map(|i| total * i as f64 / 200.0).collect();
    ss.extend_from_slice(env.breakpoints());
    ss.sort_by(f64::total_cmp);
    ss.iter().map(|&s| env.frenet_to_point(s, h)).collect()
}

/// Outline of an `(s, h)` box, following the centerline between corners.
fn frenet_box(env: &TubeEnvironment, lo: &[f64], hi: &[f64]) -> Vec<[f64; 2]> {
    let edge = |h: f64, rev: bool| -> Vec<[f64; 2]> {
        let mut v: Vec<[f64; 2]> =
            (0..=8).map(|i| env.frenet_to_point(lo[0] + (hi[0] - lo[0]) * i as f64 / 8.0, h)).collect();
        if rev {
            v.reverse();
        }
        v
    };
    let mut pts = edge(lo[1], false);
    pts.extend(edge(hi[1], true));
    pts
}

fn panel(svg: &mut String, ep: &PlotEpisode, cfg: &PlotConfig, ox: f64, oy: f64) {
    let hw = ep.env.half_width();
    let left = boundary(&ep.env, hw);
    let right = boundary(&ep.env, -hw);
    let mut all = left.clone();
    all.extend(&right);
    all.extend(ep.states.iter().map(|s| s.position()));
    let view = View::fit(&all, ox, oy, cfg.panel_width, cfg.panel_height);

    let _ = writeln!(svg, r#"<g class="episode" id="ep-{}">"#, esc(&ep.id));
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="13">{}</text>"#, ox + PAD, oy + PAD + 4.0, esc(&ep.id));
    let mut outline = left;
    outline.extend(right.iter().rev());
    let _ = writeln!(svg, r##"<polygon class="tube" points="{}" fill="#eeeeee" stroke="#888888"/>"##, view.points(&outline));
    let center = boundary(&ep.env, 0.0);
    let _ = writeln!(
        svg,
        r##"<polyline class="centerline" points="{}" fill="none" stroke="#aaaaaa" stroke-dasharray="4 3"/>"##,
        view.points(&center)
    );
    for r in ep.records.iter().filter(|r| r.k % cfg.rect_every == 0) {
        if let Some(Some(rect)) = r.slots.last() {
            let _ = writeln!(
                svg,
                r##"<polygon class="target" points="{}" fill="#2ca02c" fill-opacity="0.25" stroke="#2ca02c"/>"##,
                view.points(&frenet_box(&ep.env, &rect.lo, &rect.hi))
            );
        }
    }
    if let Some((first, rest)) = ep.states.split_first() {
        let (x, y) = view.px(first.position());
        let mut d = format!("M{x:.2},{y:.2}");
        for s in rest {
            let (x, y) = view.px(s.position());
            let _ = write!(d, " L{x:.2},{y:.2}");
        }
        let _ = writeln!(svg, r##"<path class="trajectory" d="{d}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##);
    }
    for r in ep.records.iter().filter(|r| r.mode == Mode::Safety && r.k % 5 == 0) {
        let (x, y) = view.px(r.state.position());
        let _ = writeln!(svg, r##"<circle class="safety" cx="{x:.2}" cy="{y:.2}" r="1.5" fill="#d62728"/>"##);
    }
    let _ = writeln!(svg, "</g>");
}

fn bars(svg: &mut String, eps: &[PlotEpisode], x0: f64, y0: f64, width: f64) {
    let max = eps.iter().flat_map(|e| [e.hpl_steps, e.baseline_steps]).flatten().max().unwrap_or(1).max(1) as f64;
    let span = width - BAR_LABEL - 2.0 * PAD - 50.0;
    let _ = writeln!(svg, r#"<g class="durations">"#);
    let _ = writeln!(
        svg,
        r##"<text x="{:.1}" y="{:.1}" font-size="13">duration [steps]: HPL (blue), safety controller (grey)</text>"##,
        x0 + PAD,
        y0 + 14.0
    );
    for (i, ep) in eps.iter().enumerate() {
        let y = y0 + TITLE + 6.0 + i as f64 * BAR_ROW;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#, x0 + PAD, y + 12.0, esc(&ep.id));
        for (j, (steps, color)) in [(ep.hpl_steps, "#1f77b4"), (ep.baseline_steps, "#999999")].into_iter().enumerate() {
            let Some(steps) = steps else { continue };
            let w = span * steps as f64 / max;
            let by = y + j as f64 * 8.0;
            let bx = x0 + PAD + BAR_LABEL;
            let _ = writeln!(svg, r#"<rect class="bar" x="{bx:.1}" y="{by:.1}" width="{w:.1}" height="7" fill="{color}"/>"#);
            let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="8">{steps}</text>"#, bx + w + 3.0, by + 7.0);
        }
    }
    let _ = writeln!(svg, "</g>");
}

pub fn render(eps: &[PlotEpisode], cfg: &PlotConfig) -> String {
    let cols = cfg.columns.min(eps.len()).max(1);
    let rows = eps.len().div_ceil(cols);
    let width = (cols as f64 * cfg.panel_width).max(500.0);
    let bars_y = rows as f64 * cfg.panel_height;
    let height = bars_y + TITLE + 12.0 + eps.len() as f64 * BAR_ROW + PAD;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, ep) in eps.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        panel(&mut svg, ep, cfg, c as f64 * cfg.panel_width, r as f64 * cfg.panel_height);
    }
    bars(&mut svg, eps, 0.0, bars_y, width);
    svg.push_str("</svg>\n");
    svg
}
