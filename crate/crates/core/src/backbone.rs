//! Trajectory backbones: per-agent sequence encoders, interaction encoders
//! and autoregressive decoders for three architecture families, each
//! buildable with or without the pose encoder.
//!
//! All computation happens in coordinates relative to the primary agent's
//! last observed position, so translating a scene translates its
//! predictions by the same vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnSpec, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{EncoderBlock, Linear, LstmCell};
use crate::pose_encoder::{positional_encoding, positional_table, Fusion, PoseEncoder, PoseEncoderConfig};
use crate::scene::Scene;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Recurrent,
    Attention,
    Mlp,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Recurrent, Family::Attention, Family::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            Family::Recurrent => "recurrent",
            Family::Attention => "attention",
            Family::Mlp => "mlp",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interaction {
    None,
    DistancePool,
    SpatialAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub family: Family,
    pub traj_embed_dim: usize,
    pub hidden_dim: usize,
    pub interaction: Interaction,
    /// Context width without pose; doubled when pose is enabled.
    pub interaction_dim: usize,
    pub interaction_heads: usize,
    /// Distance-pool kernel width, meters.
    pub pool_sigma: f64,
    /// Attention-family encoder and decoder depth.
    pub layers: usize,
    pub heads: usize,
    pub k_samples: usize,
    pub noise_dim: usize,
    /// Scale of the decoder noise used by samples after the first.
    pub noise_scale: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            family: Family::Recurrent,
            traj_embed_dim: 64,
            hidden_dim: 128,
            interaction: Interaction::DistancePool,
            interaction_dim: 256,
            interaction_heads: 4,
            pool_sigma: 2.0,
            layers: 2,
            heads: 16,
            k_samples: 1,
            noise_dim: 8,
            noise_scale: 1.0,
        }
    }
}

impl BackboneConfig {
    pub fn effective_interaction_dim(&self, pose_enabled: bool) -> usize {
        if pose_enabled {
            2 * self.interaction_dim
        } else {
            self.interaction_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, message: &str| Err(Error::Config { key: format!("backbone.{key}"), message: message.into() });
        if self.hidden_dim == 0 || self.traj_embed_dim == 0 {
            return err("hidden_dim", "dimensions must be positive");
        }
        if self.interaction_dim == 0 {
            return err("interaction_dim", "must be positive");
        }
        if self.k_samples == 0 {
            return err("k_samples", "must be at least 1");
        }
        if !(self.pool_sigma > 0.0) {
            return err("pool_sigma", "must be positive");
        }
        if !(self.noise_scale >= 0.0) {
            return err("noise_scale", "must be non-negative");
        }
        if self.family == Family::Attention {
            if self.layers == 0 {
                return err("layers", "at least one layer is required");
            }
            if self.heads == 0 || self.hidden_dim % self.heads != 0 {
                return err("heads", "hidden_dim must be divisible by heads");
            }
        }
        if self.interaction == Interaction::SpatialAttention
            && (self.interaction_heads == 0 || self.interaction_dim % self.interaction_heads != 0)
        {
            return err("interaction_heads", "interaction_dim must be divisible by interaction_heads");
        }
        Ok(())
    }
}

/// Everything needed to build a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// `None` disables the pose branch.
    pub pose: Option<PoseEncoderConfig>,
    /// Coordinate count per joint the pose branch expects (2 or 3).
    pub pose_dims: usize,
    pub joints: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, pose: Option<PoseEncoderConfig>, seed: u64) -> Self {
        let pose_dims = if pose.is_some() { 3 } else { 0 };
        ModelConfig { backbone, pose, pose_dims, joints: crate::skeleton::NUM_JOINTS, t_obs: 9, t_pred: 12, seed }
    }

    pub fn pose_enabled(&self) -> bool {
        self.pose.is_some()
    }

    /// Per-agent latent width fed to the interaction encoder.
    pub fn fused_dim(&self) -> usize {
        self.backbone.hidden_dim + self.pose.as_ref().map_or(0, |p| p.dim)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.t_obs < 2 {
            return Err(Error::Config { key: "t_obs".into(), message: "at least 2 observed frames are required".into() });
        }
        if self.t_pred == 0 {
            return Err(Error::Config { key: "t_pred".into(), message: "decoder_steps must be at least 1".into() });
        }
        if let Some(p) = &self.pose {
            p.validate()?;
            if !(self.pose_dims == 2 || self.pose_dims == 3) || self.joints == 0 {
                return Err(Error::Config { key: "pose.dims".into(), message: "pose needs 2 or 3 dims and at least one joint".into() });
            }
        }
        Ok(())
    }
}

/// One agent's model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentInput {
    /// `(t_obs - 1) × 2` per-step displacements.
    pub disp: Mat,
    /// Last observed position relative to the primary's.
    pub rel_last: [f64; 2],
    /// `t_obs × (J·C)` pose matrix, masked joints zeroed; absent when pose is off.
    pub pose: Option<Mat>,
}

/// Scene converted to model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInput {
    pub agents: Vec<AgentInput>,
    pub primary: usize,
    /// Primary's last observed world position.
    pub anchor: [f64; 2],
    /// `t_pred × 2` ground-truth future displacements.
    pub target_disp: Mat,
    /// `t_pred × 2` ground-truth future positions relative to the anchor.
    pub target_rel: Mat,
}

/// Predicted primary futures for one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionBatch {
    /// `k × t_pred` world positions.
    pub samples: Vec<Vec<[f64; 2]>>,
}

impl PredictionBatch {
    pub fn k(&self) -> usize {
        self.samples.len()
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().flatten().all(|p| p[0].is_finite() && p[1].is_finite())
    }
}

/// Anything that can forecast the primary agent of a scene.
pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict(&self, scene: &Scene, k: usize) -> Result<PredictionBatch>;
}

/// Extrapolates the last observed velocity.
pub struct ConstantVelocity;

impl Predictor for ConstantVelocity {
    fn name(&self) -> String {
        "constant-velocity".into()
    }

    fn predict(&self, scene: &Scene, k: usize) -> Result<PredictionBatch> {
        let p = &scene.primary_track().positions;
        let last = p[scene.t_obs - 1];
        let prev = p[scene.t_obs - 2];
        let v = [last[0] - prev[0], last[1] - prev[1]];
        let path: Vec<[f64; 2]> =
            (1..=scene.t_pred).map(|t| [last[0] + v[0] * t as f64, last[1] + v[1] * t as f64]).collect();
        Ok(PredictionBatch { samples: vec![path; k.max(1)] })
    }
}

/// Returns the ground-truth future.
pub struct Oracle;

impl Predictor for Oracle {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, scene: &Scene, k: usize) -> Result<PredictionBatch> {
        Ok(PredictionBatch { samples: vec![scene.future().to_vec(); k.max(1)] })
    }
}

#[derive(Clone, Debug)]
enum TrajEncoder {
    Recurrent { embed: Linear, cell: LstmCell },
    Attention { embed: Linear, blocks: Vec<EncoderBlock> },
    Mlp { l1: Linear, l2: Linear, l3: Linear },
}

#[derive(Clone, Debug)]
enum InteractionEncoder {
    None,
    Pool { proj: Linear },
    Attention { wq: Linear, wk: Linear, wv: Linear, heads: usize },
}

#[derive(Clone, Debug)]
enum Decoder {
    Recurrent { ctx: Linear, init: Linear, embed: Linear, cell: LstmCell, out: Linear },
    Attention { ctx: Linear, embed: Linear, blocks: Vec<EncoderBlock>, out: Linear },
    Mlp { ctx: Linear, step: Linear, l2: Linear, out: Linear },
}

/// Width of the step encoding given to the mlp decoder.
const MLP_STEP_PE: usize = 8;
/// Seed salt for decoder noise.
const NOISE_SALT: u64 = 0x6e6f_6973_6500;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub pose_encoder: Option<PoseEncoder>,
    traj: TrajEncoder,
    interaction: InteractionEncoder,
    decoder: Decoder,
}

/// Builds a model with parameters initialized from `cfg.seed`.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let b = &cfg.backbone;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let (e, h) = (b.traj_embed_dim, b.hidden_dim);
    let steps = cfg.t_obs - 1;

    let traj = match b.family {
        Family::Recurrent => TrajEncoder::Recurrent {
            embed: Linear::new(&mut store, "traj.embed", 2, e, true, &mut rng),
            cell: LstmCell::new(&mut store, "traj.lstm", e, h, &mut rng),
        },
        Family::Attention => TrajEncoder::Attention {
            embed: Linear::new(&mut store, "traj.embed", 2, h, true, &mut rng),
            blocks: (0..b.layers)
                .map(|l| EncoderBlock::new(&mut store, &format!("traj.block{l}"), h, b.heads, 2 * h, &mut rng))
                .collect(),
        },
        Family::Mlp => TrajEncoder::Mlp {
            l1: Linear::new(&mut store, "traj.l1", 2 * steps, e, true, &mut rng),
            l2: Linear::new(&mut store, "traj.l2", e, h, true, &mut rng),
            l3: Linear::new(&mut store, "traj.l3", h, h, true, &mut rng),
        },
    };

    let pose_encoder = match &cfg.pose {
        Some(p) => Some(PoseEncoder::new(&mut store, p, cfg.joints, cfg.pose_dims, h, &mut rng)?),
        None => None,
    };

    let fused = cfg.fused_dim();
    let a = b.effective_interaction_dim(cfg.pose_enabled());
    let interaction = match b.interaction {
        Interaction::None => InteractionEncoder::None,
        Interaction::DistancePool => {
            InteractionEncoder::Pool { proj: Linear::new(&mut store, "inter.proj", fused, a, false, &mut rng) }
        }
        Interaction::SpatialAttention => InteractionEncoder::Attention {
            wq: Linear::new(&mut store, "inter.q", fused + 2, a, false, &mut rng),
            wk: Linear::new(&mut store, "inter.k", fused + 2, a, false, &mut rng),
            wv: Linear::new(&mut store, "inter.v", fused + 2, a, false, &mut rng),
            heads: b.interaction_heads,
        },
    };

    let dec_in = fused + a + b.noise_dim;
    let decoder = match b.family {
        Family::Recurrent => Decoder::Recurrent {
            ctx: Linear::new(&mut store, "dec.ctx", dec_in, e, true, &mut rng),
            init: Linear::new(&mut store, "dec.init", dec_in, h, true, &mut rng),
            embed: Linear::new(&mut store, "dec.embed", 2, e, true, &mut rng),
            cell: LstmCell::new(&mut store, "dec.lstm", 2 * e, h, &mut rng),
            out: Linear::new(&mut store, "dec.out", h, 2, true, &mut rng),
        },
        Family::Attention => Decoder::Attention {
            ctx: Linear::new(&mut store, "dec.ctx", dec_in, h, true, &mut rng),
            embed: Linear::new(&mut store, "dec.embed", 2, h, true, &mut rng),
            blocks: (0..b.layers)
                .map(|l| EncoderBlock::new(&mut store, &format!("dec.block{l}"), h, b.heads, 2 * h, &mut rng))
                .collect(),
            out: Linear::new(&mut store, "dec.out", h, 2, true, &mut rng),
        },
        Family::Mlp => Decoder::Mlp {
            ctx: Linear::new(&mut store, "dec.ctx", dec_in, h, true, &mut rng),
            step: Linear::new(&mut store, "dec.step", 2 + MLP_STEP_PE, h, false, &mut rng),
            l2: Linear::new(&mut store, "dec.l2", h, h, true, &mut rng),
            out: Linear::new(&mut store, "dec.out", h, 2, true, &mut rng),
        },
    };

    Ok(Model { cfg: cfg.clone(), store, pose_encoder, traj, interaction, decoder })
}

fn lower_triangular(n: usize) -> Mat {
    let mut m = Mat::zeros(n, n);
    for r in 0..n {
        for c in 0..=r {
            m.set(r, c, 1.0);
        }
    }
    m
}

impl Model {
    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Converts a scene into model inputs, checking it fits the model.
    pub fn prepare(&self, scene: &Scene) -> Result<SceneInput> {
        let cfg = &self.cfg;
        if scene.t_obs != cfg.t_obs || scene.t_pred != cfg.t_pred {
            return Err(Error::Data(format!(
                "scene window {}+{} does not match model window {}+{}",
                scene.t_obs, scene.t_pred, cfg.t_obs, cfg.t_pred
            )));
        }
        if scene.primary >= scene.agents.len() {
            return Err(Error::Data("primary index out of range".into()));
        }
        if self.pose_encoder.is_some() {
            if scene.pose_dims != cfg.pose_dims {
                return Err(Error::PoseDims { expected: cfg.pose_dims, found: scene.pose_dims });
            }
            if scene.joints() != cfg.joints {
                return Err(Error::InvalidArgument(format!(
                    "model expects {} joints, scene has {}",
                    cfg.joints,
                    scene.joints()
                )));
            }
        }
        let t = cfg.t_obs;
        let anchor = scene.last_observed(scene.primary);
        let mut agents = Vec::with_capacity(scene.agents.len());
        for (i, a) in scene.agents.iter().enumerate() {
            if a.positions.len() < t {
                return Err(Error::Data(format!("agent {} has fewer than {t} frames", a.id)));
            }
            let mut disp = Mat::zeros(t - 1, 2);
            for s in 0..t - 1 {
                disp.set(s, 0, a.positions[s + 1][0] - a.positions[s][0]);
                disp.set(s, 1, a.positions[s + 1][1] - a.positions[s][1]);
            }
            let last = scene.last_observed(i);
            let pose = match &self.pose_encoder {
                Some(enc) => Some(enc.input_matrix(&a.poses[..t])?),
                None => None,
            };
            agents.push(AgentInput { disp, rel_last: [last[0] - anchor[0], last[1] - anchor[1]], pose });
        }
        let p = &scene.primary_track().positions;
        let mut target_disp = Mat::zeros(cfg.t_pred, 2);
        let mut target_rel = Mat::zeros(cfg.t_pred, 2);
        for s in 0..cfg.t_pred {
            let (cur, prev) = (p[t + s], p[t + s - 1]);
            target_disp.set(s, 0, cur[0] - prev[0]);
            target_disp.set(s, 1, cur[1] - prev[1]);
            target_rel.set(s, 0, cur[0] - anchor[0]);
            target_rel.set(s, 1, cur[1] - anchor[1]);
        }
        let mut all_finite = target_rel.is_finite();
        for a in &agents {
            all_finite &= a.disp.is_finite() && a.pose.as_ref().is_none_or(Mat::is_finite);
        }
        if !all_finite {
            return Err(Error::NonFinite { location: "scene inputs".into() });
        }
        Ok(SceneInput { agents, primary: scene.primary, anchor, target_disp, target_rel })
    }

    fn encode_trajectory(&self, g: &mut Graph, disp: &Mat) -> Var {
        let h = self.cfg.backbone.hidden_dim;
        match &self.traj {
            TrajEncoder::Recurrent { embed, cell } => {
                let x = g.constant(disp.clone());
                let e = embed.forward(g, x);
                let e = g.relu(e);
                let mut hs = g.constant(Mat::zeros(1, h));
                let mut cs = g.constant(Mat::zeros(1, h));
                for s in 0..disp.rows {
                    let xs = g.slice_rows(e, s, 1);
                    (hs, cs) = cell.step(g, xs, hs, cs);
                }
                hs
            }
            TrajEncoder::Attention { embed, blocks } => {
                let x = g.constant(disp.clone());
                let e = embed.forward(g, x);
                let pe = g.constant(positional_table(1, disp.rows, h));
                let mut tokens = g.add(e, pe);
                for b in blocks {
                    tokens = b.forward(g, tokens, false).0;
                }
                g.mean_rows(tokens)
            }
            TrajEncoder::Mlp { l1, l2, l3 } => {
                let x = g.constant(Mat::from_vec(1, disp.len(), disp.data.clone()));
                let a = l1.forward(g, x);
                let a = g.relu(a);
                let a = l2.forward(g, a);
                let a = g.relu(a);
                l3.forward(g, a)
            }
        }
    }

    /// Per-agent latents `H_i`, pose fused in when enabled.
    pub fn encode_agents(&self, g: &mut Graph, input: &SceneInput) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(input.agents.len());
        for a in &input.agents {
            let h_traj = self.encode_trajectory(g, &a.disp);
            let h = match (&self.pose_encoder, &a.pose) {
                (Some(enc), Some(pose)) => {
                    let x = g.constant(pose.clone());
                    let tokens = enc.embed_sequence(g, x, None);
                    let encoded = enc.encode(g, tokens)?;
                    match (&enc.cross, enc.cfg.fusion) {
                        (Some(cross), Fusion::CrossAttention) => {
                            let c = cross.fuse(g, h_traj, encoded.tokens);
                            g.concat_cols(&[c, h_traj])
                        }
                        _ => g.concat_cols(&[encoded.pooled, h_traj]),
                    }
                }
                _ => h_traj,
            };
            out.push(h);
        }
        Ok(out)
    }

    /// Social context for the primary agent.
    pub fn interact(&self, g: &mut Graph, latents: &[Var], input: &SceneInput) -> Var {
        let a = self.cfg.backbone.effective_interaction_dim(self.cfg.pose_enabled());
        match &self.interaction {
            InteractionEncoder::None => g.constant(Mat::zeros(1, a)),
            InteractionEncoder::Pool { proj } => {
                let sigma = self.cfg.backbone.pool_sigma;
                let neighbors: Vec<usize> = (0..latents.len()).filter(|&j| j != input.primary).collect();
                if neighbors.is_empty() {
                    return g.constant(Mat::zeros(1, a));
                }
                let weights = neighbors
                    .iter()
                    .map(|&j| {
                        let r = input.agents[j].rel_last;
                        (-(r[0] * r[0] + r[1] * r[1]).sqrt() / sigma).exp()
                    })
                    .collect();
                let w = g.constant(Mat::from_vec(1, neighbors.len(), weights));
                let stacked: Vec<Var> = neighbors.iter().map(|&j| latents[j]).collect();
                let hs = g.concat_rows(&stacked);
                let pooled = g.matmul(w, hs);
                proj.forward(g, pooled)
            }
            InteractionEncoder::Attention { wq, wk, wv, heads } => {
                let rows: Vec<Var> = latents
                    .iter()
                    .zip(&input.agents)
                    .map(|(&h, ag)| {
                        let rel = g.constant(Mat::row_vector(ag.rel_last.to_vec()));
                        g.concat_cols(&[h, rel])
                    })
                    .collect();
                let x = g.concat_rows(&rows);
                let xp = rows[input.primary];
                let q = wq.forward(g, xp);
                let k = wk.forward(g, x);
                let v = wv.forward(g, x);
                g.attention(q, k, v, AttnSpec { heads: *heads, causal: false })
            }
        }
    }

    fn noise_row(&self, sample: usize) -> Mat {
        let n = self.cfg.backbone.noise_dim;
        if sample == 0 || n == 0 {
            return Mat::zeros(1, n);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ NOISE_SALT);
        rng.set_stream(sample as u64);
        let scale = self.cfg.backbone.noise_scale;
        Mat::row_vector((0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z }).collect::<Vec<f64>>())
    }

    /// Decoder input `H_p ⊕ context ⊕ z` for one sample.
    fn decoder_input(&self, g: &mut Graph, input: &SceneInput, sample: usize) -> Result<Var> {
        let latents = self.encode_agents(g, input)?;
        let ctx = self.interact(g, &latents, input);
        let z = g.constant(self.noise_row(sample));
        let d = g.concat_cols(&[latents[input.primary], ctx, z]);
        if !g.value(d).is_finite() {
            return Err(Error::NonFinite { location: "decoder input latent".into() });
        }
        Ok(d)
    }

    fn last_disp(input: &SceneInput) -> Mat {
        let d = &input.agents[input.primary].disp;
        d.slice_rows(d.rows - 1, 1)
    }

    /// `t_pred × 2` displacements. With `teacher`, each step sees the
    /// ground-truth previous displacement; otherwise its own output.
    fn decode(&self, g: &mut Graph, dec_in: Var, input: &SceneInput, teacher: bool) -> Var {
        let n = self.cfg.t_pred;
        let first = Self::last_disp(input);
        // previous-step inputs under teacher forcing
        let teacher_prev = || {
            let mut m = Mat::zeros(n, 2);
            m.row_mut(0).copy_from_slice(&first.data);
            for s in 1..n {
                m.row_mut(s).copy_from_slice(input.target_disp.row(s - 1));
            }
            m
        };
        match &self.decoder {
            Decoder::Recurrent { ctx, init, embed, cell, out } => {
                let c = ctx.forward(g, dec_in);
                let c = g.relu(c);
                let h0 = init.forward(g, dec_in);
                let mut h = g.tanh(h0);
                let mut cs = g.constant(Mat::zeros(1, self.cfg.backbone.hidden_dim));
                let tf = teacher.then(|| g.constant(teacher_prev()));
                let mut prev = g.constant(first.clone());
                let mut outs = Vec::with_capacity(n);
                for s in 0..n {
                    let p = match tf {
                        Some(m) => g.slice_rows(m, s, 1),
                        None => prev,
                    };
                    let e = embed.forward(g, p);
                    let e = g.relu(e);
                    let x = g.concat_cols(&[e, c]);
                    (h, cs) = cell.step(g, x, h, cs);
                    let d = out.forward(g, h);
                    outs.push(d);
                    prev = d;
                }
                g.concat_rows(&outs)
            }
            Decoder::Attention { ctx, embed, blocks, out } => {
                let hd = self.cfg.backbone.hidden_dim;
                let c = ctx.forward(g, dec_in);
                let run = |g: &mut Graph, prev: Var| {
                    let (len, _) = g.shape(prev);
                    let e = embed.forward(g, prev);
                    let pe = g.constant(positional_table(1, len, hd));
                    let x = g.add(e, pe);
                    let mut x = g.add_row(x, c);
                    for b in blocks {
                        x = b.forward(g, x, true).0;
                    }
                    out.forward(g, x)
                };
                if teacher {
                    let prev = g.constant(teacher_prev());
                    run(g, prev)
                } else {
                    let mut rows = vec![g.constant(first.clone())];
                    let mut outs = Vec::with_capacity(n);
                    for s in 0..n {
                        let prev = g.concat_rows(&rows);
                        let y = run(g, prev);
                        let d = g.slice_rows(y, s, 1);
                        outs.push(d);
                        rows.push(d);
                    }
                    g.concat_rows(&outs)
                }
            }
            Decoder::Mlp { ctx, step, l2, out } => {
                let base = ctx.forward(g, dec_in);
                let pe = positional_table(1, n, MLP_STEP_PE);
                let run = |g: &mut Graph, prev: Var, pe: Var| {
                    let x = g.concat_cols(&[prev, pe]);
                    let a = step.forward(g, x);
                    let a = g.add_row(a, base);
                    let a = g.relu(a);
                    let a = l2.forward(g, a);
                    let a = g.relu(a);
                    out.forward(g, a)
                };
                if teacher {
                    let prev = g.constant(teacher_prev());
                    let pe = g.constant(pe);
                    run(g, prev, pe)
                } else {
                    let mut prev = g.constant(first.clone());
                    let mut outs = Vec::with_capacity(n);
                    for s in 0..n {
                        let p = g.constant(Mat::row_vector(positional_encoding(s + 1, MLP_STEP_PE)));
                        let d = run(g, prev, p);
                        outs.push(d);
                        prev = d;
                    }
                    g.concat_rows(&outs)
                }
            }
        }
    }

    /// Relative predicted positions (`t_pred × 2`) as a graph node.
    pub fn forward(&self, g: &mut Graph, input: &SceneInput, teacher: bool, sample: usize) -> Result<Var> {
        let dec_in = self.decoder_input(g, input, sample)?;
        let disp = self.decode(g, dec_in, input, teacher);
        let l = g.constant(lower_triangular(self.cfg.t_pred));
        Ok(g.matmul(l, disp))
    }

    /// Mean squared position error of the first sample.
    pub fn loss(&self, g: &mut Graph, input: &SceneInput, teacher: bool) -> Result<Var> {
        let pred = self.forward(g, input, teacher, 0)?;
        let target = g.constant(input.target_rel.clone());
        let diff = g.sub(pred, target);
        let sq = g.mul(diff, diff);
        let total = g.sum_all(sq);
        Ok(g.scale(total, 1.0 / (2 * self.cfg.t_pred) as f64))
    }

    /// `k` autoregressive samples in world coordinates.
    pub fn predict_input(&self, input: &SceneInput, k: usize) -> Result<PredictionBatch> {
        let mut samples = Vec::with_capacity(k);
        for s in 0..k.max(1) {
            let mut g = Graph::new(&self.store);
            let rel = self.forward(&mut g, input, false, s)?;
            let rel = g.value(rel);
            if !rel.is_finite() {
                return Err(Error::NonFinite { location: "decoder output".into() });
            }
            samples.push((0..rel.rows).map(|t| [input.anchor[0] + rel.get(t, 0), input.anchor[1] + rel.get(t, 1)]).collect());
        }
        Ok(PredictionBatch { samples })
    }
}

impl Predictor for Model {
    fn name(&self) -> String {
        let pose = if self.cfg.pose_enabled() { "pose" } else { "no-pose" };
        format!("{}-{}", self.cfg.backbone.family.name(), pose)
    }

    fn predict(&self, scene: &Scene, k: usize) -> Result<PredictionBatch> {
        let input = self.prepare(scene)?;
        self.predict_input(&input, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose_encoder::Tokenization;
    use crate::synth::{generate_corpus, GaitModel, WorldConfig};

    pub(crate) fn small(family: Family, interaction: Interaction, pose: bool, seed: u64) -> ModelConfig {
        let backbone = BackboneConfig {
            family,
            traj_embed_dim: 8,
            hidden_dim: 8,
            interaction,
            interaction_dim: 8,
            interaction_heads: 2,
            layers: 1,
            heads: 2,
            noise_dim: 4,
            ..Default::default()
        };
        let pose = pose.then(|| PoseEncoderConfig {
            dim: 8,
            n_layers: 1,
            n_heads: 2,
            ff_hidden: 8,
            tokenization: Tokenization::PerFrame,
            ..Default::default()
        });
        ModelConfig::new(backbone, pose, seed)
    }

    fn corpus(n: usize) -> Vec<Scene> {
        generate_corpus(&WorldConfig { seed: 3, ..Default::default() }, &GaitModel::default(), n).unwrap()
    }

    fn translate(scene: &Scene, dx: f64, dy: f64) -> Scene {
        let mut s = scene.clone();
        for a in &mut s.agents {
            for p in &mut a.positions {
                p[0] += dx;
                p[1] += dy;
            }
        }
        s
    }

    #[test]
    fn default_dims_follow_the_doubling_rule() {
        let on = ModelConfig::new(BackboneConfig::default(), Some(PoseEncoderConfig::default()), 0);
        let off = ModelConfig::new(BackboneConfig::default(), None, 0);
        assert_eq!(on.fused_dim(), 256);
        assert_eq!(off.fused_dim(), 128);
        assert_eq!(on.backbone.effective_interaction_dim(true), 512);
        assert_eq!(off.backbone.effective_interaction_dim(false), 256);
    }

    #[test]
    fn latent_dimension_matches_hidden_for_every_family() {
        let scene = &corpus(1)[0];
        for family in Family::ALL {
            let cfg = ModelConfig::new(
                BackboneConfig { family, traj_embed_dim: 16, hidden_dim: 128, layers: 1, ..Default::default() },
                None,
                1,
            );
            let model = build_model(&cfg).unwrap();
            let input = model.prepare(scene).unwrap();
            let mut g = Graph::new(&model.store);
            let lat = model.encode_agents(&mut g, &input).unwrap();
            assert_eq!(lat.len(), scene.agents.len());
            for l in lat {
                assert_eq!(g.shape(l), (1, 128));
            }
        }
    }

    #[test]
    fn zero_displacements_erase_absolute_position() {
        for family in Family::ALL {
            let model = build_model(&small(family, Interaction::None, false, 2)).unwrap();
            let mut g = Graph::new(&model.store);
            let zero = Mat::zeros(8, 2);
            let a = model.encode_trajectory(&mut g, &zero);
            let b = model.encode_trajectory(&mut g, &zero);
            assert_eq!(g.value(a), g.value(b));
        }
    }

    #[test]
    fn predictions_are_translation_equivariant() {
        let scenes = corpus(3);
        for family in Family::ALL {
            for inter in [Interaction::DistancePool, Interaction::SpatialAttention] {
                let model = build_model(&small(family, inter, true, 4)).unwrap();
                for s in &scenes {
                    let a = model.predict(s, 2).unwrap();
                    let b = model.predict(&translate(s, 123.25, -47.5), 2).unwrap();
                    for (pa, pb) in a.samples.iter().flatten().zip(b.samples.iter().flatten()) {
                        assert!((pb[0] - pa[0] - 123.25).abs() < 1e-6 && (pb[1] - pa[1] + 47.5).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn k_samples_shape_and_determinism() {
        let scene = &corpus(1)[0];
        let model = build_model(&small(Family::Attention, Interaction::DistancePool, false, 5)).unwrap();
        let a = model.predict(scene, 20).unwrap();
        assert_eq!(a.k(), 20);
        assert!(a.samples.iter().all(|s| s.len() == 12));
        assert!(a.is_finite());
        assert_eq!(a, model.predict(scene, 20).unwrap());
        // the first sample does not depend on k
        assert_eq!(a.samples[0], model.predict(scene, 1).unwrap().samples[0]);
        assert_ne!(a.samples[0], a.samples[1]);
    }

    #[test]
    fn zero_decoder_predicts_the_last_position() {
        let scene = &corpus(1)[0];
        for family in Family::ALL {
            let mut model = build_model(&small(family, Interaction::DistancePool, false, 6)).unwrap();
            let out = match &model.decoder {
                Decoder::Recurrent { out, .. } | Decoder::Attention { out, .. } | Decoder::Mlp { out, .. } => out.clone(),
            };
            out.zero(&mut model.store);
            let pred = model.predict(scene, 1).unwrap();
            let last = scene.last_observed(scene.primary);
            assert!(pred.samples[0].iter().all(|p| *p == last));
        }
    }

    #[test]
    fn positions_are_cumulative_displacements() {
        let scene = &corpus(1)[0];
        let model = build_model(&small(Family::Mlp, Interaction::None, false, 7)).unwrap();
        let input = model.prepare(scene).unwrap();
        let mut g = Graph::new(&model.store);
        let dec_in = model.decoder_input(&mut g, &input, 0).unwrap();
        let disp = model.decode(&mut g, dec_in, &input, false);
        let d = g.value(disp).clone();
        let pred = model.predict_input(&input, 1).unwrap();
        let mut acc = input.anchor;
        for t in 0..12 {
            acc = [acc[0] + d.get(t, 0), acc[1] + d.get(t, 1)];
            assert!((pred.samples[0][t][0] - acc[0]).abs() < 1e-12 && (pred.samples[0][t][1] - acc[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_decoder_agrees_between_teacher_and_free_running_on_step_one() {
        let scene = &corpus(1)[0];
        let model = build_model(&small(Family::Attention, Interaction::None, false, 8)).unwrap();
        let input = model.prepare(scene).unwrap();
        let mut g = Graph::new(&model.store);
        let a = model.forward(&mut g, &input, true, 0).unwrap();
        let b = model.forward(&mut g, &input, false, 0).unwrap();
        assert!((g.value(a).get(0, 0) - g.value(b).get(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn interaction_contexts() {
        let scene = &corpus(1)[0];
        let model = build_model(&small(Family::Mlp, Interaction::DistancePool, false, 9)).unwrap();
        let base = model.prepare(scene).unwrap();
        let one = |input: &SceneInput| {
            let mut g = Graph::new(&model.store);
            let lat = model.encode_agents(&mut g, input).unwrap();
            let c = model.interact(&mut g, &lat, input);
            g.value(c).clone()
        };
        // no neighbors: zero context
        let mut alone = base.clone();
        alone.agents = vec![base.agents[base.primary].clone()];
        alone.primary = 0;
        assert!(one(&alone).data.iter().all(|v| *v == 0.0));

        // the context norm shrinks as a neighbor moves away
        let mut pair = alone.clone();
        pair.agents.push(base.agents[base.primary].clone());
        let mut last = f64::INFINITY;
        for d in [0.5, 1.0, 2.0, 4.0, 8.0] {
            pair.agents[1].rel_last = [d, 0.0];
            let n = one(&pair).squared_norm();
            assert!(n < last);
            last = n;
        }

        // neighbor order does not matter
        for inter in [Interaction::DistancePool, Interaction::SpatialAttention] {
            let model = build_model(&small(Family::Recurrent, inter, true, 10)).unwrap();
            let s = corpus(6).into_iter().find(|s| s.agents.len() >= 3).unwrap();
            let mut swapped = s.clone();
            let n = swapped.agents.len();
            swapped.agents.swap(n - 1, n - 2);
            if swapped.primary == n - 1 || swapped.primary == n - 2 {
                swapped.primary = if swapped.primary == n - 1 { n - 2 } else { n - 1 };
            }
            let a = model.predict(&s, 1).unwrap();
            let b = model.predict(&swapped, 1).unwrap();
            for (x, y) in a.samples[0].iter().zip(&b.samples[0]) {
                assert!((x[0] - y[0]).abs() < 1e-9 && (x[1] - y[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pose_off_ignores_pose_and_pose_on_checks_dims() {
        let scene = &corpus(1)[0];
        let off = build_model(&small(Family::Recurrent, Interaction::DistancePool, false, 11)).unwrap();
        let mut stripped = scene.clone();
        stripped.strip_pose();
        assert_eq!(off.predict(scene, 1).unwrap(), off.predict(&stripped, 1).unwrap());
        let on = build_model(&small(Family::Recurrent, Interaction::DistancePool, true, 11)).unwrap();
        assert!(matches!(on.predict(&stripped, 1), Err(Error::PoseDims { expected: 3, found: 0 })));
        assert!(on.parameter_count() > off.parameter_count());
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = small(Family::Attention, Interaction::SpatialAttention, true, 12);
        assert_eq!(build_model(&cfg).unwrap().store, build_model(&cfg).unwrap().store);
        let other = ModelConfig { seed: 13, ..cfg };
        assert_ne!(build_model(&other).unwrap().store.values(), build_model(&small(Family::Attention, Interaction::SpatialAttention, true, 12)).unwrap().store.values());
    }

    #[test]
    fn baselines() {
        let scene = &corpus(1)[0];
        let o = Oracle.predict(scene, 3).unwrap();
        assert_eq!(o.samples[2], scene.future());
        let cv = ConstantVelocity.predict(scene, 1).unwrap();
        assert_eq!(cv.samples[0].len(), scene.t_pred);
    }
}
