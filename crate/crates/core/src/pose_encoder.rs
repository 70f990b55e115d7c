//! Transformer encoder over observed body-pose sequences.
//!
//! Each observed frame (or each frame-joint pair) is linearly embedded,
//! offset by a sinusoidal temporal encoding, and passed through a stack of
//! self-attention blocks. The pooled output is the agent's pose latent,
//! which is concatenated with its trajectory latent before interaction
//! modeling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnSpec, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, EncoderBlock, Linear};
use crate::scene::PoseFrame;
use crate::tensor::Mat;

/// Sinusoidal temporal encoding for frame index `t` (frames count from 1).
///
/// Dimension `d` uses `sin(t / 10000^(d/D))` when `d` is even and
/// `cos(t / 10000^(d/D))` when odd.
pub fn positional_encoding(t: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|d| {
            let angle = t as f64 / 10000f64.powf(d as f64 / dim as f64);
            if d % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Rows `first..first + n` of the encoding table.
pub fn positional_table(first: usize, n: usize, dim: usize) -> Mat {
    let mut m = Mat::zeros(n, dim);
    for r in 0..n {
        m.row_mut(r).copy_from_slice(&positional_encoding(first + r, dim));
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tokenization {
    /// One token per frame from the flattened joints.
    PerFrame,
    /// One token per (frame, joint) with a learned joint-identity embedding.
    PerFrameJoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Mean,
    LastToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    Concat,
    CrossAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseEncoderConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_hidden: usize,
    pub tokenization: Tokenization,
    pub pooling: Pooling,
    pub fusion: Fusion,
    pub dropout: f64,
}

impl Default for PoseEncoderConfig {
    fn default() -> Self {
        PoseEncoderConfig {
            dim: 128,
            n_layers: 2,
            n_heads: 16,
            ff_hidden: 256,
            tokenization: Tokenization::PerFrameJoint,
            pooling: Pooling::Mean,
            fusion: Fusion::Concat,
            dropout: 0.0,
        }
    }
}

impl PoseEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config { key: "pose.n_layers".into(), message: "at least one layer is required".into() });
        }
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::Config {
                key: "pose.n_heads".into(),
                message: format!("dim {} is not divisible by {} heads", self.dim, self.n_heads),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config { key: "pose.dropout".into(), message: "must lie in [0, 1)".into() });
        }
        Ok(())
    }

    pub fn tokens(&self, frames: usize, joints: usize) -> usize {
        match self.tokenization {
            Tokenization::PerFrame => frames,
            Tokenization::PerFrameJoint => frames * joints,
        }
    }
}

/// Pooled pose latent plus the attention weights that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseLatent {
    pub h_pose: Vec<f64>,
    /// `attention[layer][head]` is a tokens × tokens row-stochastic matrix.
    pub attention: Vec<Vec<Mat>>,
}

/// Graph handles produced by one encoder pass.
pub struct EncodedPose {
    pub tokens: Var,
    pub pooled: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct PoseEncoder {
    pub cfg: PoseEncoderConfig,
    pub joints: usize,
    pub dims: usize,
    pub embed: Linear,
    pub joint_embed: Option<ParamId>,
    pub blocks: Vec<EncoderBlock>,
    pub cross: Option<CrossAttention>,
}

impl PoseEncoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &PoseEncoderConfig,
        joints: usize,
        dims: usize,
        traj_token_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let (embed, joint_embed) = match cfg.tokenization {
            Tokenization::PerFrame => (Linear::new(store, "pose.embed", joints * dims, d, true, rng), None),
            Tokenization::PerFrameJoint => {
                let e = Linear::new(store, "pose.embed", dims, d, true, rng);
                let je = store.add("pose.joint_embed", fan_in_uniform(joints, d, rng).scale(0.5));
                (e, Some(je))
            }
        };
        let blocks = (0..cfg.n_layers)
            .map(|l| EncoderBlock::new(store, &format!("pose.block{l}"), d, cfg.n_heads, cfg.ff_hidden, rng))
            .collect();
        let cross = (cfg.fusion == Fusion::CrossAttention)
            .then(|| CrossAttention::new(store, "pose.cross", traj_token_dim, d, d, rng));
        Ok(PoseEncoder { cfg: cfg.clone(), joints, dims, embed, joint_embed, blocks, cross })
    }

    /// Stacks observed frames into a `T × (J·C)` matrix with masked joints
    /// zeroed.
    pub fn input_matrix(&self, frames: &[PoseFrame]) -> Result<Mat> {
        pose_input_matrix(frames, self.joints, self.dims)
    }

    /// Token matrix: embedded pose plus the temporal encoding of each token's
    /// frame.
    pub fn embed_sequence(&self, g: &mut Graph, poses: Var, training_rng: Option<&mut ChaCha8Rng>) -> Var {
        let (frames, _) = g.shape(poses);
        let d = self.cfg.dim;
        let tokens = match self.cfg.tokenization {
            Tokenization::PerFrame => {
                let e = self.embed.forward(g, poses);
                let pe = g.constant(positional_table(1, frames, d));
                g.add(e, pe)
            }
            Tokenization::PerFrameJoint => {
                let j = self.joints;
                let flat = g.reshape(poses, frames * j, self.dims);
                let e = self.embed.forward(g, flat);
                let mut onehot = Mat::zeros(frames * j, j);
                let mut pe = Mat::zeros(frames * j, d);
                for t in 0..frames {
                    let enc = positional_encoding(t + 1, d);
                    for k in 0..j {
                        onehot.set(t * j + k, k, 1.0);
                        pe.row_mut(t * j + k).copy_from_slice(&enc);
                    }
                }
                let oh = g.constant(onehot);
                let je = g.param(self.joint_embed.expect("joint embedding"));
                let ident = g.matmul(oh, je);
                let e = g.add(e, ident);
                let pe = g.constant(pe);
                g.add(e, pe)
            }
        };
        match training_rng {
            Some(rng) if self.cfg.dropout > 0.0 => {
                let keep = 1.0 - self.cfg.dropout;
                let (r, c) = g.shape(tokens);
                let mask = (0..r * c).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                let m = g.constant(Mat::from_vec(r, c, mask));
                g.mul(tokens, m)
            }
            _ => tokens,
        }
    }

    /// Runs the attention blocks over a token matrix and pools the result.
    pub fn encode(&self, g: &mut Graph, tokens: Var) -> Result<EncodedPose> {
        let mut x = tokens;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for (layer, block) in self.blocks.iter().enumerate() {
            let (y, attn) = block.forward(g, x, false);
            if !g.value(y).is_finite() {
                return Err(Error::NonFinite { location: format!("pose encoder layer {layer}") });
            }
            attention.push(attn);
            x = y;
        }
        let pooled = match self.cfg.pooling {
            Pooling::Mean => g.mean_rows(x),
            Pooling::LastToken => {
                let (n, _) = g.shape(x);
                g.slice_rows(x, n - 1, 1)
            }
        };
        Ok(EncodedPose { tokens: x, pooled, attention })
    }

    /// Pose latent of one agent, outside of training.
    pub fn latent(&self, store: &ParamStore, frames: &[PoseFrame]) -> Result<PoseLatent> {
        let input = self.input_matrix(frames)?;
        let mut g = Graph::new(store);
        let x = g.constant(input);
        let tokens = self.embed_sequence(&mut g, x, None);
        let enc = self.encode(&mut g, tokens)?;
        let attention = enc.attention.iter().map(|a| g.attention_probs(*a).expect("attention node").to_vec()).collect();
        Ok(PoseLatent { h_pose: g.value(enc.pooled).data.clone(), attention })
    }
}

/// `T × (J·C)` input with masked joints zeroed; rejects ragged frames.
pub fn pose_input_matrix(frames: &[PoseFrame], joints: usize, dims: usize) -> Result<Mat> {
    let width = joints * dims;
    let mut m = Mat::zeros(frames.len(), width);
    for (t, f) in frames.iter().enumerate() {
        if f.joints() != joints || f.dims != dims {
            return Err(Error::InvalidArgument(format!(
                "pose frame {t} has {} joints × {} dims, expected {joints} × {dims}",
                f.joints(),
                f.dims
            )));
        }
        let row = m.row_mut(t);
        for j in 0..joints {
            if f.mask[j] {
                row[j * dims..(j + 1) * dims].copy_from_slice(f.joint(j));
            }
        }
    }
    Ok(m)
}

/// Embedding-wise fusion: `H_pose ⊕ H_traj`.
pub fn fuse(h_pose: &[f64], h_traj: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(h_pose.len() + h_traj.len());
    out.extend_from_slice(h_pose);
    out.extend_from_slice(h_traj);
    out
}

/// Trajectory tokens attending over pose tokens; an alternative to
/// concatenation.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        pose_dim: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        CrossAttention {
            wq: Linear::new(store, &format!("{name}.q"), query_dim, dim, false, rng),
            wk: Linear::new(store, &format!("{name}.k"), pose_dim, dim, false, rng),
            wv: Linear::new(store, &format!("{name}.v"), pose_dim, dim, false, rng),
        }
    }

    /// Per-query attention output, `Nq × dim`.
    pub fn attend(&self, g: &mut Graph, traj_tokens: Var, pose_tokens: Var) -> Var {
        let q = self.wq.forward(g, traj_tokens);
        let k = self.wk.forward(g, pose_tokens);
        let v = self.wv.forward(g, pose_tokens);
        g.attention(q, k, v, AttnSpec { heads: 1, causal: false })
    }

    /// Query-averaged attention output, `1 × dim`.
    pub fn fuse(&self, g: &mut Graph, traj_tokens: Var, pose_tokens: Var) -> Var {
        let a = self.attend(g, traj_tokens, pose_tokens);
        g.mean_rows(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn encoder(cfg: &PoseEncoderConfig, joints: usize, dims: usize, seed: u64) -> (ParamStore, PoseEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = PoseEncoder::new(&mut store, cfg, joints, dims, 8, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn encoding_at_zero_alternates() {
        for dim in [2, 7, 64] {
            let p = positional_encoding(0, dim);
            for (d, v) in p.iter().enumerate() {
                assert_eq!(*v, if d % 2 == 0 { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn encoding_examples() {
        let p = positional_encoding(1, 4);
        assert!((p[0] - 0.841471).abs() < 1e-6);
        // d = 1: cos(1 / 10000^(1/4)) = cos(0.1)
        assert!((p[1] - 0.1f64.cos()).abs() < 1e-15);
        for t in 1..=9 {
            assert!(positional_encoding(t, 128).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn token_counts() {
        let frames: Vec<PoseFrame> = (0..9).map(|_| PoseFrame::zeros(17, 3)).collect();
        for (tok, expect) in [(Tokenization::PerFrame, 9), (Tokenization::PerFrameJoint, 153)] {
            let cfg = PoseEncoderConfig { dim: 16, n_heads: 4, n_layers: 1, ff_hidden: 16, tokenization: tok, ..Default::default() };
            let (store, enc) = encoder(&cfg, 17, 3, 1);
            let mut g = Graph::new(&store);
            let x = g.constant(enc.input_matrix(&frames).unwrap());
            let t = enc.embed_sequence(&mut g, x, None);
            assert_eq!(g.shape(t), (expect, 16));
            assert_eq!(cfg.tokens(9, 17), expect);
        }
    }

    #[test]
    fn zero_pose_with_zero_embedding_gives_positional_tokens() {
        let cfg = PoseEncoderConfig { dim: 8, n_heads: 2, n_layers: 1, ff_hidden: 8, tokenization: Tokenization::PerFrame, ..Default::default() };
        let (mut store, enc) = encoder(&cfg, 4, 3, 2);
        enc.embed.zero(&mut store);
        let frames: Vec<PoseFrame> = (0..5).map(|_| PoseFrame::zeros(4, 3)).collect();
        let mut g = Graph::new(&store);
        let x = g.constant(enc.input_matrix(&frames).unwrap());
        let t = enc.embed_sequence(&mut g, x, None);
        assert_eq!(g.value(t), &positional_table(1, 5, 8));
    }

    #[test]
    fn ragged_frames_are_rejected() {
        let cfg = PoseEncoderConfig { dim: 8, n_heads: 2, n_layers: 1, ff_hidden: 8, ..Default::default() };
        let (_, enc) = encoder(&cfg, 4, 3, 2);
        let frames = vec![PoseFrame::zeros(4, 3), PoseFrame::zeros(3, 3)];
        assert!(enc.input_matrix(&frames).is_err());
    }

    #[test]
    fn invalid_configs() {
        let bad_heads = PoseEncoderConfig { dim: 10, n_heads: 3, ..Default::default() };
        assert!(bad_heads.validate().is_err());
        let no_layers = PoseEncoderConfig { n_layers: 0, ..Default::default() };
        assert!(no_layers.validate().is_err());
        PoseEncoderConfig::default().validate().unwrap();
    }

    #[test]
    fn equal_tokens_attend_uniformly() {
        let cfg = PoseEncoderConfig { dim: 8, n_heads: 2, n_layers: 2, ff_hidden: 8, tokenization: Tokenization::PerFrame, ..Default::default() };
        let (store, enc) = encoder(&cfg, 4, 3, 3);
        let mut g = Graph::new(&store);
        let tokens = g.constant(Mat::from_vec(6, 8, (0..48).map(|i| ((i % 8) as f64 * 0.3).sin()).collect()));
        let out = enc.encode(&mut g, tokens).unwrap();
        for a in &out.attention {
            for p in g.attention_probs(*a).unwrap() {
                assert!(p.data.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn single_block_hand_computed() {
        // one head, D = 2, identity projections, zero feed-forward output:
        // out = x + softmax(x xᵀ / √2) x, then mean-pooled
        let cfg = PoseEncoderConfig { dim: 2, n_heads: 1, n_layers: 1, ff_hidden: 2, tokenization: Tokenization::PerFrame, ..Default::default() };
        let (mut store, enc) = encoder(&cfg, 1, 2, 4);
        let b = &enc.blocks[0];
        for l in [&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo] {
            *store.get_mut(l.w) = Mat::identity(2);
        }
        b.ffn.outer.zero(&mut store);
        let x = [[1.0, 0.0], [0.0, 2.0]];
        let s = 1.0 / 2f64.sqrt();
        // scores: row0 = [1, 0]·s, row1 = [0, 4]·s
        let p0 = [1.0 / (1.0 + (-s).exp()), 0.0];
        let p0 = [p0[0], 1.0 - p0[0]];
        let p1b = 1.0 / (1.0 + (-4.0 * s).exp());
        let p1 = [1.0 - p1b, p1b];
        let o0 = [x[0][0] + p0[0] * x[0][0] + p0[1] * x[1][0], x[0][1] + p0[0] * x[0][1] + p0[1] * x[1][1]];
        let o1 = [x[1][0] + p1[0] * x[0][0] + p1[1] * x[1][0], x[1][1] + p1[0] * x[0][1] + p1[1] * x[1][1]];
        let expected = [(o0[0] + o1[0]) / 2.0, (o0[1] + o1[1]) / 2.0];

        let mut g = Graph::new(&store);
        let tokens = g.constant(Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 2.0]));
        let out = enc.encode(&mut g, tokens).unwrap();
        let got = &g.value(out.pooled).data;
        assert!((got[0] - expected[0]).abs() < 1e-12 && (got[1] - expected[1]).abs() < 1e-12, "{got:?} vs {expected:?}");
    }

    #[test]
    fn attention_rows_are_stochastic_on_random_input() {
        let cfg = PoseEncoderConfig { dim: 16, n_heads: 4, n_layers: 2, ff_hidden: 16, ..Default::default() };
        let (store, enc) = encoder(&cfg, 5, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames: Vec<PoseFrame> =
            (0..4).map(|_| PoseFrame::new(3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect(), vec![true; 5])).collect();
        let lat = enc.latent(&store, &frames).unwrap();
        assert_eq!(lat.h_pose.len(), 16);
        assert!(lat.h_pose.iter().all(|v| v.is_finite()));
        for layer in &lat.attention {
            for p in layer {
                assert_eq!(p.shape(), (20, 20));
                for r in 0..p.rows {
                    assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn fuse_is_concatenation() {
        assert_eq!(fuse(&[1.0, 2.0], &[3.0, 4.0]), vec![1.0, 2.0, 3.0, 4.0]);
        let h = fuse(&[0.1, -0.2, 0.3], &[9.0]);
        assert_eq!(&h[..3], &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn cross_attention_examples() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ca = CrossAttention::new(&mut store, "x", 2, 2, 2, &mut rng);
        let wv = store.get(ca.wv.w).clone();

        // single pose token: output is that token's value projection
        let pose = Mat::from_vec(1, 2, vec![0.4, -1.1]);
        let mut g = Graph::new(&store);
        let q = g.constant(Mat::from_vec(3, 2, vec![1.0, 2.0, -0.5, 0.3, 0.0, 0.9]));
        let k = g.constant(pose.clone());
        let out = ca.attend(&mut g, q, k);
        let vproj = pose.matmul(&wv);
        for r in 0..3 {
            assert!((g.value(out).get(r, 0) - vproj.data[0]).abs() < 1e-12);
            assert!((g.value(out).get(r, 1) - vproj.data[1]).abs() < 1e-12);
        }

        // equal keys: uniform attention
        let mut g = Graph::new(&store);
        let q = g.constant(Mat::from_vec(1, 2, vec![0.7, 0.2]));
        let k = g.constant(Mat::from_vec(3, 2, vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]));
        let out = ca.attend(&mut g, q, k);
        assert!(g.attention_probs(out).unwrap()[0].data.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));

        // two tokens against a manual 2×2 softmax
        let wq = store.get(ca.wq.w).clone();
        let wk = store.get(ca.wk.w).clone();
        let qm = Mat::from_vec(1, 2, vec![0.3, -0.8]);
        let km = Mat::from_vec(2, 2, vec![1.0, 0.2, -0.4, 0.6]);
        let qq = qm.matmul(&wq);
        let kk = km.matmul(&wk);
        let vv = km.matmul(&wv);
        let s0 = (qq.data[0] * kk.get(0, 0) + qq.data[1] * kk.get(0, 1)) / 2f64.sqrt();
        let s1 = (qq.data[0] * kk.get(1, 0) + qq.data[1] * kk.get(1, 1)) / 2f64.sqrt();
        let w0 = s0.exp() / (s0.exp() + s1.exp());
        let expect = [w0 * vv.get(0, 0) + (1.0 - w0) * vv.get(1, 0), w0 * vv.get(0, 1) + (1.0 - w0) * vv.get(1, 1)];
        let mut g = Graph::new(&store);
        let q = g.constant(qm);
        let k = g.constant(km);
        let out = ca.fuse(&mut g, q, k);
        assert!((g.value(out).data[0] - expect[0]).abs() < 1e-12);
        assert!((g.value(out).data[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn tiny_encoder_gradients_match_finite_differences() {
        let cfg = PoseEncoderConfig {
            dim: 8,
            n_heads: 2,
            n_layers: 1,
            ff_hidden: 8,
            tokenization: Tokenization::PerFrameJoint,
            ..Default::default()
        };
        let (store, enc) = encoder(&cfg, 4, 3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let input = Mat::from_vec(3, 12, (0..36).map(|_| rng.random_range(-1.0..1.0)).collect());
        let weights: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss_of = |store: &ParamStore, input: &Mat| -> f64 {
            let mut g = Graph::new(store);
            let x = g.constant(input.clone());
            let t = enc.embed_sequence(&mut g, x, None);
            let e = enc.encode(&mut g, t).unwrap();
            g.value(e.pooled).data.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new(&store);
        let x = g.constant(input.clone());
        let t = enc.embed_sequence(&mut g, x, None);
        let e = enc.encode(&mut g, t).unwrap();
        let w = g.constant(Mat::from_vec(8, 1, weights.clone()));
        let loss = g.matmul(e.pooled, w);
        let grads = g.backward(loss).params;

        let h = 1e-4;
        let mut checked = 0;
        for (pid, value) in store.values().iter().enumerate() {
            for i in (0..value.len()).step_by(5) {
                let mut plus = store.clone();
                plus.values_mut()[pid].data[i] += h;
                let mut minus = store.clone();
                minus.values_mut()[pid].data[i] -= h;
                let numeric = (loss_of(&plus, &input) - loss_of(&minus, &input)) / (2.0 * h);
                let analytic = grads.values[pid].data[i];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
                assert!(rel <= 1e-4, "param {pid}[{i}]: {analytic} vs {numeric}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn tiny_encoder_input_gradients_match_finite_differences() {
        let cfg = PoseEncoderConfig { dim: 8, n_heads: 2, n_layers: 2, ff_hidden: 8, ..Default::default() };
        let (store, enc) = encoder(&cfg, 4, 3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = Mat::from_vec(3, 12, (0..36).map(|_| rng.random_range(-1.0..1.0)).collect());
        let weights: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss_of = |input: &Mat| -> f64 {
            let mut g = Graph::new(&store);
            let x = g.constant(input.clone());
            let t = enc.embed_sequence(&mut g, x, None);
            let e = enc.encode(&mut g, t).unwrap();
            g.value(e.pooled).data.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new(&store);
        let x = g.input(input.clone());
        let t = enc.embed_sequence(&mut g, x, None);
        let e = enc.encode(&mut g, t).unwrap();
        let w = g.constant(Mat::from_vec(8, 1, weights.clone()));
        let loss = g.matmul(e.pooled, w);
        let grads = g.backward(loss);
        let analytic = grads.of(x).unwrap().clone();

        let h = 1e-5;
        for i in 0..input.data.len() {
            let mut plus = input.clone();
            plus.data[i] += h;
            let mut minus = input.clone();
            minus.data[i] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let rel = (numeric - analytic.data[i]).abs() / numeric.abs().max(analytic.data[i].abs()).max(1e-3);
            assert!(rel <= 1e-4, "input[{i}]: {} vs {numeric}", analytic.data[i]);
        }
    }
}
