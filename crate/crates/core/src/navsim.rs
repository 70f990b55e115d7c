//! Social-force robot navigation through replayed pedestrian scenes, with
//! optional extra repulsion from predicted pedestrian futures.

use serde::{Deserialize, Serialize};

use crate::backbone::Predictor;
use crate::error::{Error, Result};
use crate::scene::{AgentTrack, PoseFrame, Scene};
use crate::synth::{generate_scene, GaitModel, WorldConfig};

pub type Vec2 = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SFMParams {
    /// Relaxation time τ, seconds.
    pub tau: f64,
    /// Repulsion strength A, m/s².
    pub a: f64,
    /// Repulsion range B, meters.
    pub b: f64,
    /// Agent radius r, meters; collisions happen below 2r.
    pub radius: f64,
    /// Desired speed v0, m/s.
    pub v0: f64,
    pub dt: f64,
    /// Prediction force scale λ.
    pub lambda: f64,
    /// Predicted frames used per neighbor.
    pub horizon: usize,
    /// Per-frame discount γ of predicted repulsion.
    pub gamma: f64,
    pub timeout: f64,
    pub goal_tolerance: f64,
    /// Start and goal sit this far below and above the ego's last position.
    pub start_offset: f64,
}

impl Default for SFMParams {
    fn default() -> Self {
        SFMParams {
            tau: 0.5,
            a: 2.0,
            b: 0.8,
            radius: 0.3,
            v0: 1.2,
            dt: 0.1,
            lambda: 0.6,
            horizon: 12,
            gamma: 0.85,
            timeout: 30.0,
            goal_tolerance: 0.5,
            start_offset: 5.0,
        }
    }
}

impl SFMParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau", self.tau),
            ("a", self.a),
            ("b", self.b),
            ("radius", self.radius),
            ("v0", self.v0),
            ("dt", self.dt),
            ("gamma", self.gamma),
            ("timeout", self.timeout),
            ("goal_tolerance", self.goal_tolerance),
        ];
        if self.horizon == 0 {
            return Err(Error::Config { key: "navsim.horizon".into(), message: "must be at least 1".into() });
        }
        for (key, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config { key: format!("navsim.{key}"), message: "must be positive".into() });
            }
        }
        if self.dt > 0.4 {
            return Err(Error::Config { key: "navsim.dt".into(), message: "must not exceed 0.4 s".into() });
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config { key: "navsim.lambda".into(), message: "must be non-negative".into() });
        }
        Ok(())
    }
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: Vec2) -> f64 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

/// Repulsion on the robot at `robot` from a pedestrian at `other`, and
/// whether the two coincided.
fn repulsion(robot: Vec2, other: Vec2, p: &SFMParams, salt: usize) -> (Vec2, bool) {
    let diff = sub(robot, other);
    let d = norm(diff);
    let (n, coincident) = if d > 1e-12 {
        ([diff[0] / d, diff[1] / d], false)
    } else {
        // fixed direction, rotated per neighbor so stacked agents spread
        let angle = salt as f64 * 2.399_963_229_728_653;
        ([angle.cos(), angle.sin()], true)
    };
    let mag = p.a * ((2.0 * p.radius - d) / p.b).exp();
    ([mag * n[0], mag * n[1]], coincident)
}

/// Goal attraction plus pairwise repulsion from the current neighbors.
pub fn social_force_step(robot: Vec2, velocity: Vec2, neighbors: &[Vec2], goal: Vec2, p: &SFMParams) -> Vec2 {
    let to_goal = sub(goal, robot);
    let dg = norm(to_goal);
    let dir = if dg > 1e-12 { [to_goal[0] / dg, to_goal[1] / dg] } else { [0.0, 0.0] };
    let mut acc = [(p.v0 * dir[0] - velocity[0]) / p.tau, (p.v0 * dir[1] - velocity[1]) / p.tau];
    for (j, q) in neighbors.iter().enumerate() {
        let (f, coincident) = repulsion(robot, *q, p, j);
        if coincident {
            log::warn!("robot coincides with neighbor {j}; using a fixed repulsion direction");
        }
        acc[0] += f[0];
        acc[1] += f[1];
    }
    acc
}

/// Adds discounted repulsion from predicted neighbor positions. Frame `t`
/// (1-based) of each prediction is weighted by `γ^t`.
pub fn augment_with_predictions(force: Vec2, robot: Vec2, predicted: &[Vec<Vec2>], p: &SFMParams) -> Vec2 {
    let mut acc = force;
    for (j, track) in predicted.iter().enumerate() {
        let mut w = 1.0;
        for q in track.iter().take(p.horizon) {
            w *= p.gamma;
            let (f, _) = repulsion(robot, *q, p, j);
            acc[0] += p.lambda * w * f[0];
            acc[1] += p.lambda * w * f[1];
        }
    }
    acc
}

/// Which forecasts feed the prediction force.
pub enum PredictorChoice<'a> {
    None,
    Oracle,
    Model(&'a dyn Predictor),
}

impl PredictorChoice<'_> {
    pub fn name(&self) -> String {
        match self {
            PredictorChoice::None => "none".into(),
            PredictorChoice::Oracle => "oracle".into(),
            PredictorChoice::Model(m) => m.name(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavTick {
    pub t: f64,
    pub position: Vec2,
    pub velocity: Vec2,
    pub social_force: Vec2,
    pub prediction_force: Vec2,
    /// Replayed neighbor positions at this tick.
    pub neighbors: Vec<Vec2>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavEpisode {
    pub predictor: String,
    pub seed: u64,
    pub start: Vec2,
    pub goal: Vec2,
    pub ticks: Vec<NavTick>,
    /// Time of the first tick within the goal tolerance; `None` on timeout.
    pub completion_time: Option<f64>,
    pub collision: bool,
    pub min_distance: f64,
}

/// Replayed state of one pedestrian.
struct Replay<'a> {
    track: &'a AgentTrack,
}

impl Replay<'_> {
    fn frame(&self, f: usize) -> usize {
        f.min(self.track.len() - 1)
    }

    fn position(&self, f: usize) -> Vec2 {
        self.track.positions[self.frame(f)]
    }

    fn present(&self, f: usize) -> bool {
        self.track.present[self.frame(f)]
    }

    /// Linear interpolation between frames; holds the last frame after the
    /// track ends.
    fn position_at(&self, frame_time: f64) -> Vec2 {
        let f0 = frame_time.floor().max(0.0) as usize;
        let a = self.position(f0);
        let b = self.position(f0 + 1);
        let s = (frame_time - f0 as f64).clamp(0.0, 1.0);
        [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
    }
}

/// Window of the replay ending at frame `last` with `t_pred` future
/// frames, with agent `primary` as the prediction target.
fn window_scene(scene: &Scene, agents: &[usize], primary: usize, last: usize, t_obs: usize, t_pred: usize) -> Scene {
    let start = last + 1 - t_obs;
    let tracks = agents
        .iter()
        .map(|&i| {
            let r = Replay { track: &scene.agents[i] };
            let frames: Vec<usize> = (start..start + t_obs + t_pred).map(|f| r.frame(f)).collect();
            let poses: Vec<PoseFrame> = frames.iter().map(|&f| scene.agents[i].poses[f].clone()).collect();
            let mut track = AgentTrack::new(
                scene.agents[i].id.clone(),
                frames.iter().map(|&f| r.position(f)).collect(),
                poses,
                scene.frame_rate,
            );
            track.present = frames.iter().map(|&f| r.present(f)).collect();
            track
        })
        .collect();
    Scene {
        frame_rate: scene.frame_rate,
        t_obs,
        t_pred,
        primary,
        category: scene.category,
        pose_dims: scene.pose_dims,
        agents: tracks,
    }
}

/// Drives the robot from below the ego's last observed position to above
/// it while the other agents replay their recorded tracks.
pub fn run_episode(scene: &Scene, predictor: &PredictorChoice, p: &SFMParams, seed: u64) -> Result<NavEpisode> {
    if scene.agents.is_empty() || scene.t_obs == 0 {
        return Err(Error::Data("navigation scene needs an ego agent and an observed frame".into()));
    }
    let ego = scene.last_observed(scene.primary);
    let start = [ego[0], ego[1] - p.start_offset];
    let goal = [ego[0], ego[1] + p.start_offset];
    run_episode_between(scene, start, goal, predictor, p, seed)
}

/// Drives the robot from `start` to `goal` through the replayed scene.
///
/// Episode time 0 is the scene's last observed frame. Forecasts are
/// refreshed once per frame from the latest `t_obs` frames and cover
/// `p.horizon` frames.
pub fn run_episode_between(
    scene: &Scene,
    start: Vec2,
    goal: Vec2,
    predictor: &PredictorChoice,
    p: &SFMParams,
    seed: u64,
) -> Result<NavEpisode> {
    p.validate()?;
    if scene.t_obs < 2 || scene.agents.is_empty() {
        return Err(Error::Data("navigation scene needs an ego agent and two observed frames".into()));
    }
    let others: Vec<usize> = (0..scene.agents.len()).filter(|&i| i != scene.primary).collect();
    let replays: Vec<Replay> = others.iter().map(|&i| Replay { track: &scene.agents[i] }).collect();
    let fr = scene.frame_rate;
    let base = scene.t_obs - 1;
    let t_pred = p.horizon.max(1);
    let ticks_per_frame = ((1.0 / fr) / p.dt).round().max(1.0) as usize;

    let mut pos = start;
    let mut vel = [0.0, 0.0];
    let mut ticks = Vec::new();
    let mut completion = None;
    let mut min_distance = f64::INFINITY;
    let mut predictions: Vec<Vec<Vec2>> = Vec::new();
    let mut prediction_frame = 0usize;
    let max_ticks = (p.timeout / p.dt).round() as usize;

    for k in 0..=max_ticks {
        let t = k as f64 * p.dt;
        let frame_time = base as f64 + t * fr;
        let current_frame = base + k / ticks_per_frame;
        let live: Vec<(usize, Vec2)> = replays
            .iter()
            .enumerate()
            .filter(|(_, r)| r.present(frame_time.round() as usize))
            .map(|(j, r)| (j, r.position_at(frame_time)))
            .collect();
        let neighbors: Vec<Vec2> = live.iter().map(|(_, q)| *q).collect();
        for q in &neighbors {
            min_distance = min_distance.min(norm(sub(pos, *q)));
        }
        if norm(sub(goal, pos)) < p.goal_tolerance {
            completion = Some(t);
            ticks.push(NavTick { t, position: pos, velocity: vel, social_force: [0.0; 2], prediction_force: [0.0; 2], neighbors });
            break;
        }
        if k == max_ticks {
            ticks.push(NavTick { t, position: pos, velocity: vel, social_force: [0.0; 2], prediction_force: [0.0; 2], neighbors });
            break;
        }

        if k % ticks_per_frame == 0 && !matches!(predictor, PredictorChoice::None) {
            prediction_frame = current_frame;
            predictions = Vec::with_capacity(live.len());
            for &(j, _) in &live {
                let track = match predictor {
                    PredictorChoice::Oracle => {
                        (1..=t_pred).map(|s| replays[j].position(current_frame + s)).collect()
                    }
                    PredictorChoice::Model(m) => {
                        let window = window_scene(scene, &others, j, current_frame, scene.t_obs, t_pred);
                        m.predict(&window, 1)?.samples.swap_remove(0)
                    }
                    PredictorChoice::None => unreachable!(),
                };
                predictions.push(track);
            }
        }
        // drop forecast frames that are no longer in the future
        let elapsed = current_frame - prediction_frame;
        let upcoming: Vec<Vec<Vec2>> = predictions.iter().map(|tr| tr.iter().skip(elapsed).copied().collect()).collect();

        let social = social_force_step(pos, vel, &neighbors, goal, p);
        let total = augment_with_predictions(social, pos, &upcoming, p);
        let pred_force = sub(total, social);
        ticks.push(NavTick { t, position: pos, velocity: vel, social_force: social, prediction_force: pred_force, neighbors });

        vel = [vel[0] + total[0] * p.dt, vel[1] + total[1] * p.dt];
        let speed = norm(vel);
        let cap = 1.3 * p.v0;
        if speed > cap {
            vel = [vel[0] * cap / speed, vel[1] * cap / speed];
        }
        pos = [pos[0] + vel[0] * p.dt, pos[1] + vel[1] * p.dt];
        if !(pos[0].is_finite() && pos[1].is_finite()) {
            return Err(Error::NonFinite { location: format!("robot state at t = {t:.1} s") });
        }
    }
    Ok(NavEpisode {
        predictor: predictor.name(),
        seed,
        start,
        goal,
        ticks,
        completion_time: completion,
        collision: min_distance < 2.0 * p.radius,
        min_distance,
    })
}

/// World used for the navigation suite: denser than the training world,
/// with long scenes so the replay covers most of an episode.
pub fn suite_world(seed: u64) -> WorldConfig {
    WorldConfig { n_agents: [6, 10], t_pred: 40, seed, ..WorldConfig::default() }
}

/// Minimum distance between the robot's start and any replayed pedestrian
/// at episode time 0 for a scene to enter the suite.
pub const START_CLEARANCE: f64 = 1.0;

/// `n` navigation scenes drawn from [`suite_world`], skipping scenes where
/// a pedestrian stands within [`START_CLEARANCE`] of the robot's start.
pub fn navigation_suite(gait: &GaitModel, n: usize, seed: u64, p: &SFMParams) -> Result<Vec<Scene>> {
    let world = suite_world(seed);
    world.validate()?;
    let mut out = Vec::with_capacity(n);
    let mut index = 0u64;
    while out.len() < n {
        let scene = generate_scene(&world, gait, index);
        index += 1;
        let ego = scene.last_observed(scene.primary);
        let start = [ego[0], ego[1] - p.start_offset];
        let last = scene.t_obs - 1;
        let blocked = scene.agents.iter().enumerate().any(|(i, a)| {
            i != scene.primary && a.present[last] && norm(sub(a.positions[last], start)) < START_CLEARANCE
        });
        if !blocked {
            out.push(scene);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavSummary {
    pub n_episodes: usize,
    pub mean_completion_time: f64,
    /// Percentage of counted episodes with a collision.
    pub collision_rate: f64,
    pub collisions: usize,
    pub timeouts: usize,
}

/// Aggregates episodes; timeouts count as the timeout duration and leave
/// the collision denominator only when `exclude_timeouts` is set.
pub fn evaluate_navigation(episodes: &[NavEpisode], timeout: f64, exclude_timeouts: bool) -> Result<NavSummary> {
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("no episodes to evaluate".into()));
    }
    let timeouts = episodes.iter().filter(|e| e.completion_time.is_none()).count();
    let mean = episodes.iter().map(|e| e.completion_time.unwrap_or(timeout)).sum::<f64>() / episodes.len() as f64;
    let counted: Vec<&NavEpisode> =
        episodes.iter().filter(|e| !exclude_timeouts || e.completion_time.is_some()).collect();
    let collisions = counted.iter().filter(|e| e.collision).count();
    let rate = if counted.is_empty() { 0.0 } else { 100.0 * collisions as f64 / counted.len() as f64 };
    Ok(NavSummary { n_episodes: episodes.len(), mean_completion_time: mean, collision_rate: rate, collisions, timeouts })
}

/// One JSON line per tick.
pub fn episode_jsonl(episode: &NavEpisode) -> Result<String> {
    let mut out = String::new();
    for tick in &episode.ticks {
        out += &serde_json::to_string(tick)?;
        out.push('\n');
    }
    Ok(out)
}
