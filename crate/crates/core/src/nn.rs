//! Layers built on the autodiff tape, plus the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnSpec, Grads, Graph, ParamId, ParamStore, Var};
use crate::tensor::Mat;

/// Uniform fan-in initialization: `U(-1/√fan_in, 1/√fan_in)`.
pub fn fan_in_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Mat::from_vec(rows, cols, data)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), fan_in_uniform(in_dim, out_dim, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Mat::zeros(1, out_dim)));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.affine(x, self.w, self.b)
    }

    /// Sets weights and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for v in &mut store.get_mut(self.w).data {
            *v = 0.0;
        }
        if let Some(b) = self.b {
            for v in &mut store.get_mut(b).data {
                *v = 0.0;
            }
        }
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.ff1"), dim, hidden, true, rng),
            outer: Linear::new(store, &format!("{name}.ff2"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.inner.forward(g, x);
        let h = g.relu(h);
        self.outer.forward(g, h)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.q"), q_dim, dim, false, rng),
            wk: Linear::new(store, &format!("{name}.k"), kv_dim, dim, false, rng),
            wv: Linear::new(store, &format!("{name}.v"), kv_dim, dim, false, rng),
            wo: Linear::new(store, &format!("{name}.o"), dim, dim, false, rng),
            heads,
        }
    }

    /// Returns the projected output and the raw attention node.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, causal: bool) -> (Var, Var) {
        let q = self.wq.forward(g, queries);
        let k = self.wk.forward(g, keys);
        let v = self.wv.forward(g, keys);
        let attn = g.attention(q, k, v, AttnSpec { heads: self.heads, causal });
        (self.wo.forward(g, attn), attn)
    }
}

/// Self-attention + residual, then feed-forward + residual.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        EncoderBlock {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, dim, heads, rng),
            ffn: FeedForward::new(store, name, dim, ff_hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, causal: bool) -> (Var, Var) {
        let (a, probs) = self.attn.forward(g, x, x, causal);
        let x = g.add(x, a);
        let f = self.ffn.forward(g, x);
        (g.add(x, f), probs)
    }
}

#[derive(Clone, Debug)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let wx = store.add(format!("{name}.wx"), fan_in_uniform(input, 4 * hidden, rng));
        let wh = store.add(format!("{name}.wh"), fan_in_uniform(hidden, 4 * hidden, rng));
        // gate order i, f, g, o; forget bias starts at 1
        let mut bias = Mat::zeros(1, 4 * hidden);
        for v in &mut bias.data[hidden..2 * hidden] {
            *v = 1.0;
        }
        let b = store.add(format!("{name}.b"), bias);
        LstmCell { wx, wh, b, hidden }
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> (Var, Var) {
        let hd = self.hidden;
        let zx = g.affine(x, self.wx, Some(self.b));
        let wh = g.param(self.wh);
        let zh = g.matmul(h, wh);
        let z = g.add(zx, zh);
        let i = g.slice_cols(z, 0, hd);
        let i = g.sigmoid(i);
        let f = g.slice_cols(z, hd, hd);
        let f = g.sigmoid(f);
        let gg = g.slice_cols(z, 2 * hd, hd);
        let gg = g.tanh(gg);
        let o = g.slice_cols(z, 3 * hd, hd);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let ig = g.mul(i, gg);
        let c_next = g.add(fc, ig);
        let tc = g.tanh(c_next);
        let h_next = g.mul(o, tc);
        (h_next, c_next)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub t: u64,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = store.zero_grads().values;
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState { m: zeros.clone(), v: zeros, t: 0 },
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.state.t += 1;
        let t = self.state.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, param) in store.values_mut().iter_mut().enumerate() {
            let g = &grads.values[i];
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            for j in 0..param.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m.data[j] / c1;
                let vh = v.data[j] / c2;
                param.data[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Mat::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(&store);
        for _ in 0..2000 {
            let grads = {
                let mut g = Graph::new(&store);
                let p = g.param(x);
                let sq = g.mul(p, p);
                let l = g.sum_all(sq);
                g.backward(l).params
            };
            opt.step(&mut store, &grads, 0.05);
        }
        assert!(store.get(x).squared_norm() < 1e-6);
    }

    #[test]
    fn lstm_state_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "lstm", 3, 5, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(Mat::zeros(2, 3));
        let h = g.constant(Mat::zeros(2, 5));
        let c = g.constant(Mat::zeros(2, 5));
        let (h, c) = cell.step(&mut g, x, h, c);
        assert_eq!(g.shape(h), (2, 5));
        assert_eq!(g.shape(c), (2, 5));
    }

    #[test]
    fn init_is_seeded() {
        let a = fan_in_uniform(4, 4, &mut ChaCha8Rng::seed_from_u64(9));
        let b = fan_in_uniform(4, 4, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| v.abs() <= 0.5));
    }
}
