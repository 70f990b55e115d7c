//! SVG figures: trajectory comparisons, joint-attention skeletons and
//! navigation traces.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::navsim::NavTick;
use crate::scene::Scene;
use crate::skeleton::{BONES, JOINT_NAMES, NUM_JOINTS};

pub const GROUND_TRUTH: &str = "#1a9641";
pub const BASELINE: &str = "#d7191c";
pub const POSE_MODEL: &str = "#2c7bb6";
const HISTORY: &str = "#555555";
const NEIGHBOR: &str = "#bbbbbb";

const SIZE: f64 = 480.0;
const MARGIN: f64 = 24.0;

/// Maps world coordinates into a square canvas with y pointing up.
struct Frame {
    min: [f64; 2],
    scale: f64,
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a [f64; 2]>) -> Frame {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for c in 0..2 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        if !lo[0].is_finite() {
            return Frame { min: [0.0, 0.0], scale: 1.0 };
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
        Frame { min: lo, scale: (SIZE - 2.0 * MARGIN) / span }
    }

    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        (MARGIN + (p[0] - self.min[0]) * self.scale, SIZE - MARGIN - (p[1] - self.min[1]) * self.scale)
    }
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{MARGIN}\" y=\"16\" font-family=\"sans-serif\" font-size=\"12\">{title}</text>\n"
    )
}

fn polyline(out: &mut String, f: &Frame, points: &[[f64; 2]], color: &str, width: f64, dashed: bool) {
    if points.is_empty() {
        return;
    }
    let coords: Vec<String> = points
        .iter()
        .map(|p| {
            let (x, y) = f.map(*p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let dash = if dashed { " stroke-dasharray=\"4 3\"" } else { "" };
    let _ = writeln!(
        out,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\"{dash}/>",
        coords.join(" ")
    );
}

/// Observed history, ground-truth future and up to two predictions for the
/// primary agent; other agents are drawn faintly.
pub fn trajectory_svg(scene: &Scene, baseline: Option<&[[f64; 2]]>, pose: Option<&[[f64; 2]]>) -> Result<String> {
    if scene.agents.is_empty() {
        return Err(Error::InvalidArgument("scene has no agents to plot".into()));
    }
    let primary = scene.primary_track();
    let all = scene.agents.iter().flat_map(|a| a.positions.iter()).chain(baseline.into_iter().flatten()).chain(pose.into_iter().flatten());
    let f = Frame::fit(all);
    let mut out = header(&format!("category {}", scene.category.name()));
    for (i, a) in scene.agents.iter().enumerate() {
        if i != scene.primary {
            polyline(&mut out, &f, &a.positions, NEIGHBOR, 1.0, false);
        }
    }
    let observed = &primary.positions[..scene.t_obs];
    polyline(&mut out, &f, observed, HISTORY, 2.0, false);
    let mut future = vec![observed[observed.len() - 1]];
    future.extend_from_slice(scene.future());
    polyline(&mut out, &f, &future, GROUND_TRUTH, 2.0, false);
    for (pred, color) in [(baseline, BASELINE), (pose, POSE_MODEL)] {
        if let Some(p) = pred {
            let mut line = vec![observed[observed.len() - 1]];
            line.extend_from_slice(p);
            polyline(&mut out, &f, &line, color, 2.0, true);
        }
    }
    out += "</svg>\n";
    Ok(out)
}

/// Front-view drawing positions of the joints, meters.
const LAYOUT: [[f64; 2]; NUM_JOINTS] = [
    [0.0, 1.0],
    [-0.12, 0.95],
    [-0.14, 0.5],
    [-0.15, 0.05],
    [0.12, 0.95],
    [0.14, 0.5],
    [0.15, 0.05],
    [0.0, 1.2],
    [0.0, 1.45],
    [0.0, 1.58],
    [0.0, 1.72],
    [0.2, 1.45],
    [0.3, 1.18],
    [0.35, 0.92],
    [-0.2, 1.45],
    [-0.3, 1.18],
    [-0.35, 0.92],
];

/// Skeleton with one marker per joint, sized and shaded by attention.
pub fn attention_svg(scores: &[f64]) -> Result<String> {
    if scores.len() != NUM_JOINTS {
        return Err(Error::InvalidArgument(format!("attention map has {} joints, expected {NUM_JOINTS}", scores.len())));
    }
    let max = scores.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::InvalidArgument("attention map is empty".into()));
    }
    let f = Frame::fit(LAYOUT.iter().chain([[-0.6, 0.0], [0.6, 1.8]].iter()));
    let mut out = header("joint attention");
    for (a, b) in BONES {
        let ((x1, y1), (x2, y2)) = (f.map(LAYOUT[a]), f.map(LAYOUT[b]));
        let _ = writeln!(out, "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" stroke=\"{NEIGHBOR}\" stroke-width=\"3\"/>");
    }
    for (j, &s) in scores.iter().enumerate() {
        let w = s / max;
        let (x, y) = f.map(LAYOUT[j]);
        let red = (255.0 * w).round() as u8;
        let blue = (255.0 * (1.0 - w)).round() as u8;
        let _ = writeln!(
            out,
            "<circle class=\"joint\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{:.2}\" fill=\"rgb({red},0,{blue})\"><title>{} {s:.4}</title></circle>",
            4.0 + 8.0 * w,
            JOINT_NAMES[j]
        );
    }
    out += "</svg>\n";
    Ok(out)
}

/// Robot path over replayed neighbor positions.
pub fn navigation_svg(ticks: &[NavTick], goal: Option<[f64; 2]>) -> Result<String> {
    if ticks.is_empty() {
        return Err(Error::InvalidArgument("episode log has no ticks".into()));
    }
    let robot: Vec<[f64; 2]> = ticks.iter().map(|t| t.position).collect();
    let f = Frame::fit(robot.iter().chain(ticks.iter().flat_map(|t| t.neighbors.iter())).chain(goal.iter()));
    let mut out = header("navigation");
    for t in ticks {
        for q in &t.neighbors {
            let (x, y) = f.map(*q);
            let _ = writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"1.5\" fill=\"{NEIGHBOR}\"/>");
        }
    }
    polyline(&mut out, &f, &robot, POSE_MODEL, 2.0, false);
    if let Some(g) = goal {
        let (x, y) = f.map(g);
        let _ = writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"5\" fill=\"none\" stroke=\"{GROUND_TRUTH}\" stroke-width=\"2\"/>");
    }
    out += "</svg>\n";
    Ok(out)
}
