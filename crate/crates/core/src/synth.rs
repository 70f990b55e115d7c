//! Synthetic pose-annotated crowds.
//!
//! Agents walk piecewise-straight paths with smoothed turns. The upper body
//! (shoulders, arms, neck, head) faces the heading the agent will have
//! `lead_time` seconds later, so observed pose carries information about
//! upcoming turns that the trajectory alone does not.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{categorize, AgentTrack, CategorizerConfig, PoseFrame, Scene, SceneCategory};
use crate::skeleton::*;

/// Pelvis height above ground, meters.
pub const PELVIS_HEIGHT: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitModel {
    pub step_frequency: f64,
    pub stride_amplitude: f64,
    pub limb_phase_offsets: Vec<f64>,
    pub lead_time: f64,
    pub noise_std: f64,
}

impl Default for GaitModel {
    fn default() -> Self {
        let mut offsets = vec![0.0; NUM_JOINTS];
        // left leg and right arm swing together, opposite the right leg
        for j in LEFT_LEG.iter().chain(&RIGHT_ARM) {
            offsets[*j] = PI;
        }
        GaitModel { step_frequency: 0.9, stride_amplitude: 0.35, limb_phase_offsets: offsets, lead_time: 0.8, noise_std: 0.0 }
    }
}

impl GaitModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_frequency > 0.0) {
            return Err(Error::InvalidArgument("gait.step_frequency must be positive".into()));
        }
        if !(self.lead_time >= 0.0) {
            return Err(Error::InvalidArgument("gait.lead_time must be non-negative".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::InvalidArgument("gait.noise_std must be non-negative".into()));
        }
        if self.limb_phase_offsets.len() != NUM_JOINTS {
            return Err(Error::InvalidArgument(format!("gait.limb_phase_offsets needs {NUM_JOINTS} entries")));
        }
        let diff = (self.limb_phase_offsets[L_ANKLE] - self.limb_phase_offsets[R_ANKLE]).rem_euclid(2.0 * PI);
        if (diff - PI).abs() > 1e-9 {
            return Err(Error::InvalidArgument("left and right ankle phases must differ by pi".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Inclusive range of agents per scene.
    pub n_agents: [usize; 2],
    /// Walking speed range, m/s.
    pub speed: [f64; 2],
    /// Expected number of spontaneous turns per second.
    pub turn_rate: f64,
    /// Turn magnitude range, radians.
    pub turn_angle: [f64; 2],
    /// Time a turn takes, seconds.
    pub turn_duration: f64,
    /// `[x_min, y_min, x_max, y_max]`, meters.
    pub arena: [f64; 4],
    pub frame_rate: f64,
    pub t_obs: usize,
    pub t_pred: usize,
    /// Neighbors closer than this steer apart; 0 disables avoidance.
    pub avoid_radius: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_agents: [2, 4],
            speed: [0.9, 1.5],
            turn_rate: 0.3,
            turn_angle: [0.6, 1.8],
            turn_duration: 0.6,
            arena: [0.0, 0.0, 20.0, 20.0],
            frame_rate: 2.5,
            t_obs: 9,
            t_pred: 12,
            avoid_radius: 1.5,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_agents[0] == 0 || self.n_agents[0] > self.n_agents[1] {
            return bad("world.n_agents must be a non-empty range starting at 1 or more");
        }
        if !(self.speed[0] > 0.0) || self.speed[1] < self.speed[0] {
            return bad("world.speed must be a positive range with max >= min");
        }
        if self.turn_angle[1] < self.turn_angle[0] || self.turn_rate < 0.0 || !(self.turn_duration > 0.0) {
            return bad("world turn settings are inconsistent");
        }
        if !(self.arena[2] > self.arena[0] && self.arena[3] > self.arena[1]) {
            return bad("world.arena bounds are degenerate");
        }
        if !(self.frame_rate > 0.0) || self.t_obs < 2 || self.t_pred == 0 {
            return bad("world frame settings are invalid");
        }
        Ok(())
    }
}

/// Internal simulation steps per frame.
const SUBSTEPS: usize = 8;

/// Dense path of one agent sampled every `dt` seconds.
#[derive(Clone, Debug)]
pub struct Path {
    pub dt: f64,
    pub positions: Vec<[f64; 2]>,
    pub headings: Vec<f64>,
    pub speed: f64,
}

impl Path {
    fn index_at(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.headings.len() - 1)
    }

    pub fn heading_at(&self, t: f64) -> f64 {
        self.headings[self.index_at(t)]
    }

    pub fn position_at(&self, t: f64) -> [f64; 2] {
        self.positions[self.index_at(t)]
    }

    /// Straight walk with turns given as `(center_time, angle)`, each
    /// smoothed over `turn_duration` and centered on its time.
    pub fn scripted(
        start: [f64; 2],
        heading: f64,
        speed: f64,
        turns: &[(f64, f64)],
        turn_duration: f64,
        dt: f64,
        duration: f64,
    ) -> Path {
        let steps = (duration / dt).round() as usize + 1;
        let mut positions = Vec::with_capacity(steps);
        let mut headings = Vec::with_capacity(steps);
        let mut pos = start;
        for k in 0..steps {
            let t = k as f64 * dt;
            let h = heading + turns.iter().map(|&(c, a)| a * turn_profile(t, c, turn_duration)).sum::<f64>();
            positions.push(pos);
            headings.push(h);
            pos = [pos[0] + speed * h.cos() * dt, pos[1] + speed * h.sin() * dt];
        }
        Path { dt, positions, headings, speed }
    }
}

/// Fraction of a turn centered at `center` completed by time `t`.
fn turn_profile(t: f64, center: f64, duration: f64) -> f64 {
    let x = ((t - center) / duration + 0.5).clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

fn unit(yaw: f64) -> [f64; 3] {
    [yaw.cos(), yaw.sin(), 0.0]
}

fn axpy(base: [f64; 3], s: f64, v: [f64; 3]) -> [f64; 3] {
    [base[0] + s * v[0], base[1] + s * v[1], base[2] + s * v[2]]
}

/// Pelvis-relative 3D joints of an agent at time `t`.
pub fn body_pose(path: &Path, gait: &GaitModel, t: f64, phase: f64) -> [[f64; 3]; NUM_JOINTS] {
    let lower = path.heading_at(t);
    let upper = path.heading_at(t + gait.lead_time);
    let (fl, ll) = (unit(lower), unit(lower + PI / 2.0));
    let (fu, lu) = (unit(upper), unit(upper + PI / 2.0));
    let amp = gait.stride_amplitude * (path.speed / 1.2);
    let swing = |j: usize| (2.0 * PI * gait.step_frequency * t + phase + gait.limb_phase_offsets[j]).sin();

    let mut p = [[0.0; 3]; NUM_JOINTS];
    for (hip, knee, ankle, side) in [(R_HIP, R_KNEE, R_ANKLE, -1.0), (L_HIP, L_KNEE, L_ANKLE, 1.0)] {
        p[hip] = axpy([0.0; 3], 0.1 * side, ll);
        p[knee] = axpy(axpy(p[hip], 0.5 * amp * swing(knee), fl), -0.45, [0.0, 0.0, 1.0]);
        p[ankle] = axpy(axpy(p[hip], amp * swing(ankle), fl), -0.9, [0.0, 0.0, 1.0]);
    }
    p[SPINE] = [0.0, 0.0, 0.25];
    p[THORAX] = [0.0, 0.0, 0.5];
    p[NECK] = axpy([0.0, 0.0, 0.6], 0.03, fu);
    p[HEAD] = axpy([0.0, 0.0, 0.75], 0.1, fu);
    for (sh, el, wr, side) in [(L_SHOULDER, L_ELBOW, L_WRIST, 1.0), (R_SHOULDER, R_ELBOW, R_WRIST, -1.0)] {
        p[sh] = axpy([0.0, 0.0, 0.5], 0.18 * side, lu);
        p[el] = axpy(axpy(p[sh], 0.25 * amp * swing(el), fu), -0.28, [0.0, 0.0, 1.0]);
        p[wr] = axpy(axpy(p[sh], 0.5 * amp * swing(wr), fu), -0.55, [0.0, 0.0, 1.0]);
    }
    p
}

/// Yaw of the direction the shoulders face, from a 3D pose frame.
pub fn shoulder_yaw(pose: &PoseFrame) -> f64 {
    let l = pose.joint(L_SHOULDER);
    let r = pose.joint(R_SHOULDER);
    let left = [l[0] - r[0], l[1] - r[1]];
    // facing direction is the shoulder line rotated by -90°
    (-left[0]).atan2(left[1])
}

struct AgentState {
    pos: [f64; 2],
    base_heading: f64,
    turns: Vec<(f64, f64)>,
    speed: f64,
}

impl AgentState {
    fn intent(&self, t: f64, duration: f64) -> f64 {
        self.base_heading + self.turns.iter().map(|&(c, a)| a * turn_profile(t, c, duration)).sum::<f64>()
    }

    fn turning(&self, t: f64, duration: f64) -> bool {
        self.turns.iter().any(|&(c, _)| t < c + duration / 2.0)
    }
}

fn simulate(world: &WorldConfig, duration: f64, rng: &mut ChaCha8Rng) -> Vec<Path> {
    let dt = 1.0 / (world.frame_rate * SUBSTEPS as f64);
    let [x0, y0, x1, y1] = world.arena;
    let (w, h) = (x1 - x0, y1 - y0);
    let n = rng.random_range(world.n_agents[0]..=world.n_agents[1]);
    let mut agents: Vec<AgentState> = (0..n)
        .map(|i| {
            // the primary starts in the central region so it meets neighbors
            let spread = if i == 0 { 0.25 } else { 0.45 };
            let pos = [
                x0 + w * (0.5 + rng.random_range(-spread..spread)),
                y0 + h * (0.5 + rng.random_range(-spread..spread)),
            ];
            let speed = rng.random_range(world.speed[0]..=world.speed[1]);
            AgentState { pos, base_heading: rng.random_range(-PI..PI), turns: Vec::new(), speed }
        })
        .collect();
    let steps = (duration / dt).ceil() as usize + 1;
    let mut paths: Vec<Path> = agents
        .iter()
        .map(|a| Path { dt, positions: Vec::with_capacity(steps), headings: Vec::with_capacity(steps), speed: a.speed })
        .collect();
    let margin = 2.0;
    let d = world.turn_duration;
    for k in 0..steps {
        let t = k as f64 * dt;
        // decide turns first so draws do not depend on neighbor state
        for a in agents.iter_mut() {
            let spontaneous = rng.random::<f64>() < world.turn_rate * dt;
            let mag = rng.random_range(world.turn_angle[0]..=world.turn_angle[1]);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            if a.turning(t, d) {
                continue;
            }
            let heading = a.intent(t, d);
            let out_x = (a.pos[0] < x0 + margin && heading.cos() < 0.0) || (a.pos[0] > x1 - margin && heading.cos() > 0.0);
            let out_y = (a.pos[1] < y0 + margin && heading.sin() < 0.0) || (a.pos[1] > y1 - margin && heading.sin() > 0.0);
            if out_x || out_y {
                let to_center = (y0 + h / 2.0 - a.pos[1]).atan2(x0 + w / 2.0 - a.pos[0]);
                a.turns.push((t + d / 2.0, wrap_angle(to_center - heading)));
            } else if spontaneous {
                a.turns.push((t + d / 2.0, sign * mag));
            }
        }
        let snapshot: Vec<[f64; 2]> = agents.iter().map(|a| a.pos).collect();
        for (i, a) in agents.iter_mut().enumerate() {
            let intent = a.intent(t, d);
            let mut dir = [intent.cos(), intent.sin()];
            if world.avoid_radius > 0.0 {
                for (j, q) in snapshot.iter().enumerate() {
                    if j == i {
                        continue;
                    }
                    let diff = [a.pos[0] - q[0], a.pos[1] - q[1]];
                    let dd = (diff[0] * diff[0] + diff[1] * diff[1]).sqrt();
                    if dd < world.avoid_radius && dd > 1e-9 {
                        let push = 1.5 * (1.0 - dd / world.avoid_radius);
                        dir[0] += push * diff[0] / dd;
                        dir[1] += push * diff[1] / dd;
                    }
                }
            }
            let heading = if dir[0] == 0.0 && dir[1] == 0.0 { intent } else { dir[1].atan2(dir[0]) };
            paths[i].positions.push(a.pos);
            paths[i].headings.push(heading);
            a.pos = [
                (a.pos[0] + a.speed * heading.cos() * dt).clamp(x0, x1),
                (a.pos[1] + a.speed * heading.sin() * dt).clamp(y0, y1),
            ];
        }
    }
    paths
}

fn render_track(
    id: String,
    path: &Path,
    gait: &GaitModel,
    phase: f64,
    frame_rate: f64,
    frames: usize,
    rng: &mut ChaCha8Rng,
) -> AgentTrack {
    let noise = (gait.noise_std > 0.0).then(|| Normal::new(0.0, gait.noise_std).expect("valid std"));
    let mut positions = Vec::with_capacity(frames);
    let mut poses = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f64 / frame_rate;
        positions.push(path.positions[f * SUBSTEPS]);
        let joints = body_pose(path, gait, t, phase);
        let mut coords: Vec<f64> = joints.iter().flatten().copied().collect();
        if let Some(dist) = &noise {
            for (j, c) in coords.iter_mut().enumerate() {
                if j >= 3 {
                    *c += dist.sample(rng);
                }
            }
        }
        poses.push(PoseFrame::new(3, coords, vec![true; NUM_JOINTS]));
    }
    AgentTrack::new(id, positions, poses, frame_rate)
}

/// Generates one scene per index from the world's seed and the index.
pub fn generate_scene(world: &WorldConfig, gait: &GaitModel, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);
    rng.set_stream(index);
    let frames = world.t_obs + world.t_pred;
    let duration = (frames - 1) as f64 / world.frame_rate + gait.lead_time + 0.5;
    let paths = simulate(world, duration, &mut rng);
    let agents = paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let phase = rng.random_range(0.0..2.0 * PI);
            render_track(format!("{index}-{i}"), p, gait, phase, world.frame_rate, frames, &mut rng)
        })
        .collect();
    let mut scene = Scene {
        frame_rate: world.frame_rate,
        t_obs: world.t_obs,
        t_pred: world.t_pred,
        primary: 0,
        category: SceneCategory::Other,
        pose_dims: 3,
        agents,
    };
    scene.category = categorize(&scene, &CategorizerConfig::default());
    scene
}

/// Generates scenes `offset..offset + n_scenes`.
pub fn generate_corpus_from(world: &WorldConfig, gait: &GaitModel, offset: u64, n_scenes: usize) -> Result<Vec<Scene>> {
    world.validate()?;
    gait.validate()?;
    if n_scenes == 0 {
        return Err(Error::InvalidArgument("n_scenes must be at least 1".into()));
    }
    Ok((0..n_scenes as u64).map(|i| generate_scene(world, gait, offset + i)).collect())
}

pub fn generate_corpus(world: &WorldConfig, gait: &GaitModel, n_scenes: usize) -> Result<Vec<Scene>> {
    generate_corpus_from(world, gait, 0, n_scenes)
}

/// Pinhole camera in world coordinates (z up).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub position: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    /// Focal length in normalized image units.
    pub focal: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig { position: [10.0, -8.0, 7.0], target: [10.0, 10.0, 0.0], up: [0.0, 0.0, 1.0], focal: 20.0 }
    }
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl CameraConfig {
    /// Image coordinates of a world point, or `None` when behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let forward = normalize(sub3(self.target, self.position));
        let right = normalize(cross(forward, self.up));
        let down = cross(forward, right);
        let rel = sub3(p, self.position);
        let depth = dot3(rel, forward);
        if depth <= 1e-6 {
            return None;
        }
        Some([self.focal * dot3(rel, right) / depth, self.focal * dot3(rel, down) / depth])
    }
}

/// Projects 3D poses to pelvis-relative image coordinates.
pub fn project_to_2d(scene: &Scene, cam: &CameraConfig) -> Result<Scene> {
    if scene.pose_dims != 3 {
        return Err(Error::InvalidArgument(format!("project_to_2d needs 3D poses, scene has {}", scene.pose_dims)));
    }
    let mut out = scene.clone();
    out.pose_dims = 2;
    for agent in &mut out.agents {
        for (f, pose) in agent.poses.iter_mut().enumerate() {
            let [x, y] = agent.positions[f];
            let pelvis_world = [x, y, PELVIS_HEIGHT];
            let j = pose.joints();
            let mut coords = vec![0.0; j * 2];
            let mut mask = pose.mask.clone();
            let pelvis_img = if pose.mask.get(PELVIS).copied().unwrap_or(false) { cam.project(pelvis_world) } else { None };
            match pelvis_img {
                None => mask.iter_mut().for_each(|m| *m = false),
                Some(origin) => {
                    for k in 0..j {
                        if !mask[k] {
                            continue;
                        }
                        let l = pose.joint(k);
                        match cam.project([pelvis_world[0] + l[0], pelvis_world[1] + l[1], pelvis_world[2] + l[2]]) {
                            Some(img) => {
                                coords[2 * k] = img[0] - origin[0];
                                coords[2 * k + 1] = img[1] - origin[1];
                            }
                            None => mask[k] = false,
                        }
                    }
                }
            }
            *pose = PoseFrame::new(2, coords, mask);
        }
    }
    Ok(out)
}

/// Accuracy of predicting the sign of the upcoming heading change from the
/// last observed shoulder yaw, over scenes whose heading changes by more
/// than `min_change` radians. Returns `(accuracy, scenes_evaluated)`.
pub fn pose_probe_accuracy(scenes: &[Scene], min_change: f64) -> (f64, usize) {
    let mut correct = 0;
    let mut total = 0;
    for s in scenes {
        if s.pose_dims != 3 || s.t_pred < 2 {
            continue;
        }
        let p = &s.primary_track().positions;
        let t = s.t_obs;
        let heading = |a: [f64; 2], b: [f64; 2]| (b[1] - a[1]).atan2(b[0] - a[0]);
        let now = heading(p[t - 2], p[t - 1]);
        let future = heading(p[t], p[t + 1]);
        let change = wrap_angle(future - now);
        if change.abs() < min_change {
            continue;
        }
        let cue = wrap_angle(shoulder_yaw(&s.primary_track().poses[t - 1]) - now);
        total += 1;
        if cue.signum() == change.signum() {
            correct += 1;
        }
    }
    (if total == 0 { 0.0 } else { correct as f64 / total as f64 }, total)
}
