//! Log-linear autoregressive token models with exact analytic gradients.
//!
//! One model class serves four roles: the trainable policy, the implicit
//! process reward model (PRM), a frozen reference, and a scalar value head.
//! A token distribution is `softmax(Wᵀf)` where `f` is a hand-crafted
//! context feature vector and `W` is a dense `D × V` matrix. Because the
//! model is log-linear, every gradient used downstream is available in
//! closed form: `∇_W log p(a|f) = f ⊗ (onehot(a) − p)`.

use serde::{Deserialize, Serialize};

use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Which role a parameter matrix plays. Stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Policy,
    Prm,
    Reference,
    Value,
}

impl ModelTag {
    fn to_u8(self) -> u8 {
        match self {
            ModelTag::Policy => 0,
            ModelTag::Prm => 1,
            ModelTag::Reference => 2,
            ModelTag::Value => 3,
        }
    }

    fn from_u8(b: u8) -> Result<Self> {
        Ok(match b {
            0 => ModelTag::Policy,
            1 => ModelTag::Prm,
            2 => ModelTag::Reference,
            3 => ModelTag::Value,
            _ => return Err(Error::Checkpoint(format!("unknown model tag {b}"))),
        })
    }
}

/// Deterministic encoder from a dialogue context to a fixed-size vector.
///
/// Layout (`D = 3V + K + 1` for vocabulary size `V` and `K` turns):
/// normalized bag-of-tokens over the conversation history, normalized
/// bag-of-tokens over the current user query, one-hot of the last response
/// token emitted so far (all zeros at the start of a response), one-hot of
/// the turn index, and a constant bias of 1. Every entry lies in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub vocab: usize,
    pub max_turns: usize,
}

impl FeatureMap {
    pub fn new(vocab: usize, max_turns: usize) -> Self {
        FeatureMap { vocab, max_turns }
    }

    pub fn dim(&self) -> usize {
        3 * self.vocab + self.max_turns + 1
    }

    /// Encode one token-generation context. `prefix` is the part of the
    /// current response already emitted; only its last token is used.
    pub fn features(
        &self,
        history: &[usize],
        query: &[usize],
        prefix: &[usize],
        turn_index: usize,
    ) -> Result<Vec<f64>> {
        let v = self.vocab;
        if turn_index < 1 || turn_index > self.max_turns {
            return Err(Error::Model(format!(
                "turn index {turn_index} outside [1, {}]",
                self.max_turns
            )));
        }
        let mut f = vec![0.0; self.dim()];
        fill_bag(&mut f[0..v], history)?;
        fill_bag(&mut f[v..2 * v], query)?;
        if let Some(&last) = prefix.last() {
            if last >= v {
                return Err(Error::Model(format!("token id {last} outside vocabulary")));
            }
            f[2 * v + last] = 1.0;
        }
        f[3 * v + (turn_index - 1)] = 1.0;
        f[3 * v + self.max_turns] = 1.0;
        Ok(f)
    }
}

fn fill_bag(slot: &mut [f64], tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Ok(());
    }
    let norm = 1.0 / tokens.len() as f64;
    for &t in tokens {
        if t >= slot.len() {
            return Err(Error::Model(format!("token id {t} outside vocabulary")));
        }
        slot[t] += norm;
    }
    Ok(())
}

/// Logits and probabilities of one token distribution.
#[derive(Clone, Debug)]
pub struct TokenDistribution {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Dense `rows × cols` weight matrix (row-major). `cols` is the vocabulary
/// size for token models and 1 for the value head.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMatrix {
    pub rows: usize,
    pub cols: usize,
    pub tag: ModelTag,
    pub w: Vec<f64>,
}

impl ParamMatrix {
    /// Zero initialization: a uniform token distribution in every context.
    pub fn zeros(rows: usize, cols: usize, tag: ModelTag) -> Self {
        ParamMatrix {
            rows,
            cols,
            tag,
            w: vec![0.0; rows * cols],
        }
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.w.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// `Wᵀf`. Skips zero feature entries; context vectors are mostly sparse.
    pub fn logits(&self, f: &[f64]) -> Vec<f64> {
        debug_assert_eq!(f.len(), self.rows);
        let v = self.cols;
        let mut out = vec![0.0; v];
        for (d, &x) in f.iter().enumerate() {
            if x != 0.0 {
                let row = &self.w[d * v..(d + 1) * v];
                for (o, &wv) in out.iter_mut().zip(row) {
                    *o += x * wv;
                }
            }
        }
        out
    }

    /// Log-softmax of the logits, computed with max subtraction.
    pub fn log_probs(&self, f: &[f64]) -> Result<Vec<f64>> {
        let mut l = self.logits(f);
        if !l.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("logits".to_string()));
        }
        log_softmax_in_place(&mut l);
        Ok(l)
    }

    pub fn log_prob(&self, f: &[f64], token: usize) -> Result<f64> {
        let lp = self.log_probs(f)?;
        lp.get(token)
            .copied()
            .ok_or_else(|| Error::Model(format!("token id {token} outside vocabulary")))
    }

    pub fn token_distribution(&self, f: &[f64]) -> Result<TokenDistribution> {
        let logits = self.logits(f);
        let lp = self.log_probs(f)?;
        let probabilities = lp.iter().map(|x| x.exp()).collect();
        Ok(TokenDistribution {
            logits,
            probabilities,
        })
    }

    /// `∇_W log p(token|f) = f ⊗ (onehot(token) − p)`, flattened row-major.
    pub fn grad_log_prob(&self, f: &[f64], token: usize) -> Result<Vec<f64>> {
        let probs = self.token_distribution(f)?.probabilities;
        let mut g = vec![0.0; self.rows * self.cols];
        accumulate_score_gradient(f, &probs, token, 1.0, &mut g);
        Ok(g)
    }

    /// Sample a token at temperature 1. Returns the token id and its
    /// log-probability (taken from the same log-softmax used for the draw,
    /// so it is bit-identical to [`ParamMatrix::log_prob`]).
    pub fn sample(&self, f: &[f64], rng: &mut Rng) -> Result<(usize, f64)> {
        let lp = self.log_probs(f)?;
        let probs: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        let token = rng.next_categorical(&probs);
        Ok((token, lp[token]))
    }

    /// Deterministic argmax decoding; ties resolve to the lowest token id.
    pub fn greedy(&self, f: &[f64]) -> Result<(usize, f64)> {
        let lp = self.log_probs(f)?;
        let mut best = 0;
        for (i, &x) in lp.iter().enumerate() {
            if x > lp[best] {
                best = i;
            }
        }
        Ok((best, lp[best]))
    }

    /// Scalar head `wᵀf`; only valid for `cols == 1`.
    pub fn value(&self, f: &[f64]) -> f64 {
        debug_assert_eq!(self.cols, 1);
        f.iter().zip(&self.w).map(|(x, w)| x * w).sum()
    }
}

/// `acc += scale · f ⊗ (onehot(token) − probs)`, the score-function gradient
/// shared by every loss in this crate. `probs` must be the token distribution
/// at `f` under the same parameters the accumulator updates.
pub fn accumulate_score_gradient(
    f: &[f64],
    probs: &[f64],
    token: usize,
    scale: f64,
    acc: &mut [f64],
) {
    let v = probs.len();
    debug_assert_eq!(acc.len(), f.len() * v);
    for (d, &x) in f.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let s = scale * x;
        let row = &mut acc[d * v..(d + 1) * v];
        for (r, &p) in row.iter_mut().zip(probs) {
            *r -= s * p;
        }
        row[token] += s;
    }
}

fn log_softmax_in_place(l: &mut [f64]) {
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = l.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    for x in l.iter_mut() {
        *x -= log_z;
    }
}

/// Per-token context features of one trajectory, cached so repeated scoring
/// passes (PRM gradients, PPO ratios, probe re-scoring) skip re-encoding.
/// `per_token[k][t]` is the feature vector in effect when response token `t`
/// of turn `k+1` was generated.
#[derive(Clone, Debug)]
pub struct TrajFeatures {
    pub per_token: Vec<Vec<Vec<f64>>>,
}

impl TrajFeatures {
    pub fn token_count(&self) -> usize {
        self.per_token.iter().map(|t| t.len()).sum()
    }

    /// Features at the start of turn `k` (1-based): the context of the
    /// turn's first response token. Used by the value head.
    pub fn turn_start(&self, k: usize) -> &[f64] {
        &self.per_token[k - 1][0]
    }
}

/// Encode every response-token context of a trajectory.
pub fn trajectory_features(fmap: &FeatureMap, traj: &Trajectory) -> Result<TrajFeatures> {
    let mut history: Vec<usize> = Vec::new();
    let mut per_token = Vec::with_capacity(traj.turns.len());
    for turn in &traj.turns {
        let mut turn_feats = Vec::with_capacity(turn.response_tokens.len());
        for t in 0..turn.response_tokens.len() {
            turn_feats.push(fmap.features(
                &history,
                &turn.user_tokens,
                &turn.response_tokens[..t],
                turn.index,
            )?);
        }
        per_token.push(turn_feats);
        history.extend_from_slice(&turn.user_tokens);
        history.extend_from_slice(&turn.response_tokens);
    }
    Ok(TrajFeatures { per_token })
}

/// Adam optimizer state for one parameter matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One update step: `w ← w − lr · m̂ / (√v̂ + eps)`.
    pub fn step(&mut self, w: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(w.len(), grad.len());
        debug_assert_eq!(w.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..w.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Scale `grad` down so its L2 norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

// --- checkpoint serialization -----------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"TWCKPT01";

/// Write a parameter matrix as flat little-endian binary. Round-trips are
/// bit-exact.
pub fn write_params(path: &std::path::Path, params: &ParamMatrix, step: u64) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 + 4 + 1 + 8 + params.w.len() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(params.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(params.cols as u32).to_le_bytes());
    buf.push(params.tag.to_u8());
    buf.extend_from_slice(&step.to_le_bytes());
    for x in &params.w {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_params(path: &std::path::Path) -> Result<(ParamMatrix, u64)> {
    let bytes = std::fs::read(path)?;
    let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 25 || &bytes[0..8] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let tag = ModelTag::from_u8(bytes[16])?;
    let step = u64::from_le_bytes(bytes[17..25].try_into().unwrap());
    let data = &bytes[25..];
    if data.len() != rows * cols * 8 {
        return Err(fail("truncated weight data"));
    }
    let w = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((ParamMatrix { rows, cols, tag, w }, step))
}
