//! Pose perturbations, joint-attention maps and top-k joint selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::pose_encoder::Tokenization;
use crate::scene::Scene;
use crate::skeleton::{LIMBS, RIGHT_LEG};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionScheme {
    /// Each agent loses one random leg or arm with probability 0.5.
    #[serde(rename = "random_limb_50")]
    RandomLimb50,
    /// Right hip, knee and ankle masked in every observed frame.
    StructuredRightLeg,
    /// Each observed frame is dropped entirely with probability 0.5.
    #[serde(rename = "complete_frame_50")]
    CompleteFrame50,
}

impl OcclusionScheme {
    pub const ALL: [OcclusionScheme; 3] =
        [OcclusionScheme::RandomLimb50, OcclusionScheme::StructuredRightLeg, OcclusionScheme::CompleteFrame50];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    GaussianNoise { std: f64, fraction: f64, seed: u64 },
    Occlusion { scheme: OcclusionScheme, seed: u64 },
    StripPose,
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Adds i.i.d. Gaussian noise to every valid observed pose coordinate.
pub fn apply_noise(scene: &Scene, std: f64, seed: u64) -> Scene {
    let mut out = scene.clone();
    if std == 0.0 || scene.pose_dims == 0 {
        return out;
    }
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_obs, d) = (scene.t_obs, scene.pose_dims);
    for agent in &mut out.agents {
        for pose in agent.poses.iter_mut().take(t_obs) {
            for j in 0..pose.joints() {
                if pose.mask[j] {
                    for c in &mut pose.coords[j * d..(j + 1) * d] {
                        *c += normal.sample(&mut rng);
                    }
                }
            }
        }
    }
    out
}

/// Masks joints according to `scheme` in the observed frames.
pub fn occlude(scene: &Scene, scheme: OcclusionScheme, seed: u64) -> Scene {
    let mut out = scene.clone();
    if scene.pose_dims == 0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_obs = scene.t_obs;
    let joints = scene.joints();
    for agent in &mut out.agents {
        let frames = &mut agent.poses[..t_obs];
        match scheme {
            OcclusionScheme::RandomLimb50 => {
                let hit = rng.random::<f64>() < 0.5;
                let limb = LIMBS[rng.random_range(0..LIMBS.len())];
                if hit {
                    for f in frames.iter_mut() {
                        limb.iter().filter(|&&j| j < joints).for_each(|&j| f.mask_joint(j));
                    }
                }
            }
            OcclusionScheme::StructuredRightLeg => {
                for f in frames.iter_mut() {
                    RIGHT_LEG.iter().filter(|&&j| j < joints).for_each(|&j| f.mask_joint(j));
                }
            }
            OcclusionScheme::CompleteFrame50 => {
                for f in frames.iter_mut() {
                    if rng.random::<f64>() < 0.5 {
                        f.mask_all();
                    }
                }
            }
        }
    }
    out
}

/// Applies a perturbation to every scene; scene `i` draws from stream `i`
/// of the perturbation's seed.
pub fn perturb_corpus(scenes: &[Scene], p: &Perturbation) -> Vec<Scene> {
    match *p {
        Perturbation::StripPose => scenes
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.strip_pose();
                s
            })
            .collect(),
        Perturbation::GaussianNoise { std, fraction, seed } => {
            let mut pick = scene_rng(seed, u64::MAX);
            let chosen = choose_exact(scenes.len(), fraction, &mut pick);
            scenes
                .iter()
                .enumerate()
                .map(|(i, s)| if chosen[i] { apply_noise(s, std, seed.wrapping_add(i as u64 + 1)) } else { s.clone() })
                .collect()
        }
        Perturbation::Occlusion { scheme, seed } => {
            scenes.iter().enumerate().map(|(i, s)| occlude(s, scheme, seed.wrapping_add(i as u64 + 1))).collect()
        }
    }
}

/// Marks exactly `⌈fraction · n⌉` of `n` items, chosen uniformly.
pub fn choose_exact(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let m = ((fraction * n as f64).ceil() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    // partial Fisher-Yates
    for i in 0..m {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut out = vec![false; n];
    for &i in &idx[..m] {
        out[i] = true;
    }
    out
}

/// Normalized per-joint attention scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointAttentionMap {
    pub scores: Vec<f64>,
    pub n_scenes: usize,
}

/// Attention received by each joint's tokens in the primary agent's pose
/// encoder, averaged over layers, heads, queries and frames, then over
/// scenes, then normalized to sum to one.
pub fn joint_attention(model: &Model, corpus: &[Scene]) -> Result<JointAttentionMap> {
    let enc = model
        .pose_encoder
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("joint attention needs a model with the pose encoder enabled".into()))?;
    if enc.cfg.tokenization != Tokenization::PerFrameJoint {
        return Err(Error::InvalidArgument(
            "joint attention needs per-frame-joint tokenization; set pose.tokenization = \"per-frame-joint\"".into(),
        ));
    }
    if corpus.is_empty() {
        return Err(Error::Data("attention corpus is empty".into()));
    }
    let j = enc.joints;
    let mut totals = vec![0.0; j];
    for scene in corpus {
        model.prepare(scene)?;
        let frames = &scene.primary_track().poses[..scene.t_obs];
        let latent = enc.latent(&model.store, frames)?;
        let mut scene_scores = vec![0.0; j];
        let mut maps = 0usize;
        for layer in &latent.attention {
            for probs in layer {
                maps += 1;
                let n = probs.rows;
                for q in 0..n {
                    for (m, p) in probs.row(q).iter().enumerate() {
                        scene_scores[m % j] += p / n as f64;
                    }
                }
            }
        }
        for (t, s) in totals.iter_mut().zip(&scene_scores) {
            *t += s / maps as f64;
        }
    }
    let sum: f64 = totals.iter().sum();
    Ok(JointAttentionMap { scores: totals.iter().map(|v| v / sum).collect(), n_scenes: corpus.len() })
}

/// Indices of the `k` highest scores, ties to the lower index, returned in
/// ascending index order.
pub fn select_top_joints(map: &JointAttentionMap, k: usize) -> Result<Vec<usize>> {
    if k > map.scores.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {} joints", map.scores.len())));
    }
    let mut order: Vec<usize> = (0..map.scores.len()).collect();
    order.sort_by(|&a, &b| map.scores[b].total_cmp(&map.scores[a]).then(a.cmp(&b)));
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    Ok(top)
}
