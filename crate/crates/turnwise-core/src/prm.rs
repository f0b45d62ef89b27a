//! The implicit process reward model: a log-linear token model trained
//! online with binary cross-entropy against sparse episode outcomes.
//!
//! Each response token earns `β · (log π_φ − log π_ref)` where `π_φ` is the
//! reward model and `π_ref` a frozen copy of it at initialization. Summing
//! over a whole trajectory gives the scalar score `R_φ(τ)` that the BCE loss
//! pushes toward the observed outcome through a sigmoid; summing over one
//! turn gives the turn score the attribution stage converts into process
//! rewards. No step-level labels are ever used — turn-level credit emerges
//! purely from outcome supervision.

use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::model::{accumulate_score_gradient, clip_grad_norm, Adam, ParamMatrix, TrajFeatures};

/// Reward of one token: scaled log-probability ratio between the reward
/// model and the frozen reference.
pub fn token_reward(beta: f64, logp_prm: f64, logp_ref: f64) -> f64 {
    beta * (logp_prm - logp_ref)
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy between a soft target in `[0, 1]` and `sigmoid(score)`:
/// `−[y·log σ(s) + (1−y)·log(1−σ(s))]`, computed as `softplus(s) − y·s`.
pub fn bce_loss(score: f64, target: f64) -> f64 {
    softplus(score) - target * score
}

/// Derivative of [`bce_loss`] with respect to the score.
pub fn bce_grad_scalar(score: f64, target: f64) -> f64 {
    sigmoid(score) - target
}

/// Per-token rewards of a trajectory, recomputed from the *current* reward
/// model (not the rollout-time snapshots stored on the trajectory), shaped
/// `[turn][token]`.
pub fn token_rewards(
    beta: f64,
    prm: &ParamMatrix,
    reference: &ParamMatrix,
    feats: &TrajFeatures,
    traj: &Trajectory,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(traj.turns.len());
    for (k, turn) in traj.turns.iter().enumerate() {
        let mut row = Vec::with_capacity(turn.response_tokens.len());
        for (t, &tok) in turn.response_tokens.iter().enumerate() {
            let f = &feats.per_token[k][t];
            let lp_prm = prm.log_prob(f, tok)?;
            let lp_ref = reference.log_prob(f, tok)?;
            row.push(token_reward(beta, lp_prm, lp_ref));
        }
        out.push(row);
    }
    Ok(out)
}

/// Per-turn sums of token rewards: the turn scores `R^k_φ`.
pub fn turn_scores(rewards: &[Vec<f64>]) -> Vec<f64> {
    rewards.iter().map(|row| row.iter().sum()).collect()
}

/// Whole-trajectory score `R_φ(τ)`: the sum over all turns and tokens.
pub fn trajectory_score(rewards: &[Vec<f64>]) -> f64 {
    rewards.iter().flatten().sum()
}

/// One trajectory of a reward-model batch: the episode, its cached feature
/// encoding, and the outcome target the score is regressed toward.
pub struct PrmBatchItem<'a> {
    pub traj: &'a Trajectory,
    pub feats: &'a TrajFeatures,
    pub target: f64,
}

/// Telemetry from one reward-model update.
#[derive(Clone, Copy, Debug)]
pub struct PrmUpdateStats {
    /// Mean BCE over the batch, evaluated before the step.
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Whether the clip threshold rescaled the gradient.
    pub clipped: bool,
    /// Mean trajectory score before the step.
    pub mean_score: f64,
}

fn check_target(target: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Model(format!(
            "BCE target must lie in [0, 1], got {target}"
        )));
    }
    Ok(())
}

/// Mean BCE loss of a batch under the given reward model.
pub fn prm_loss(
    beta: f64,
    prm: &ParamMatrix,
    reference: &ParamMatrix,
    items: &[PrmBatchItem],
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Model("reward-model batch is empty".into()));
    }
    let mut total = 0.0;
    for item in items {
        check_target(item.target)?;
        let rewards = token_rewards(beta, prm, reference, item.feats, item.traj)?;
        total += bce_loss(trajectory_score(&rewards), item.target);
    }
    Ok(total / items.len() as f64)
}

/// Mean BCE loss and its gradient with respect to the reward-model weights.
///
/// Per trajectory the chain rule gives
/// `(σ(R_φ) − y) · β · Σ_tokens ∇ log π_φ`; the reference is a constant.
/// Per-item terms are computed in parallel but reduced sequentially in batch
/// order, so the result is bit-identical under any schedule.
pub fn prm_gradient(
    beta: f64,
    prm: &ParamMatrix,
    reference: &ParamMatrix,
    items: &[PrmBatchItem],
    par: Parallelism,
) -> Result<(f64, f64, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::Model("reward-model batch is empty".into()));
    }
    for item in items {
        check_target(item.target)?;
    }
    let n = items.len();
    let len = prm.w.len();
    let per_item = map_indexed(n, par, |i| -> Result<(f64, f64, Vec<f64>)> {
        let item = &items[i];
        let rewards = token_rewards(beta, prm, reference, item.feats, item.traj)?;
        let score = trajectory_score(&rewards);
        let coeff = bce_grad_scalar(score, item.target) * beta / n as f64;
        let mut grad = vec![0.0; len];
        for (k, turn) in item.traj.turns.iter().enumerate() {
            for (t, &tok) in turn.response_tokens.iter().enumerate() {
                let f = &item.feats.per_token[k][t];
                let dist = prm.token_distribution(f)?;
                accumulate_score_gradient(f, &dist.probabilities, tok, coeff, &mut grad);
            }
        }
        Ok((bce_loss(score, item.target), score, grad))
    });
    let mut loss = 0.0;
    let mut mean_score = 0.0;
    let mut grad = vec![0.0; len];
    for term in per_item {
        let (l, s, g) = term?;
        loss += l;
        mean_score += s;
        for (acc, x) in grad.iter_mut().zip(&g) {
            *acc += x;
        }
    }
    Ok((loss / n as f64, mean_score / n as f64, grad))
}

/// One Adam step of the reward model on a trajectory batch, with global
/// gradient-norm clipping. The reference stays untouched.
pub fn prm_update(
    beta: f64,
    prm: &mut ParamMatrix,
    reference: &ParamMatrix,
    items: &[PrmBatchItem],
    adam: &mut Adam,
    max_grad_norm: f64,
    par: Parallelism,
) -> Result<PrmUpdateStats> {
    let (loss, mean_score, mut grad) = prm_gradient(beta, prm, reference, items, par)?;
    let grad_norm = clip_grad_norm(&mut grad, max_grad_norm);
    adam.step(&mut prm.w, &grad);
    prm.assert_finite("reward-model weights after update")?;
    Ok(PrmUpdateStats {
        loss,
        grad_norm,
        clipped: grad_norm > max_grad_norm,
        mean_score,
    })
}
