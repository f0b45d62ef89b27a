//! Turn-level proximal policy optimization.
//!
//! The importance ratio of a turn is the product of its token ratios —
//! computed in log space as `exp(Σ_t [log π_θ − log π_old])` — and the
//! clipped surrogate takes, per credit cell, the minimum of the unclipped
//! and band-clipped terms. Cells are turns for turn-level attribution and
//! single response tokens for the token-granular baseline; the math is the
//! same. A per-token KL estimator against a frozen anchor policy
//! regularizes the update. Advantages are constants here: no gradient flows
//! back through reward attribution.

use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::model::{accumulate_score_gradient, clip_grad_norm, Adam, ParamMatrix, TrajFeatures};

/// Importance ratio of one turn under the current policy.
#[derive(Clone, Copy, Debug)]
pub struct TurnRatio {
    /// Summed per-token log-ratios `Σ_t [log π_θ − log π_old]`.
    pub log_ratio: f64,
    /// `exp(log_ratio)`.
    pub ratio: f64,
}

/// Per-cell summed log-ratios of one trajectory under `policy`, against the
/// rollout-time log-probabilities stored on the trajectory. One cell per
/// turn, or one per response token when `token_granular`.
pub fn cell_log_ratios(
    policy: &ParamMatrix,
    feats: &TrajFeatures,
    traj: &Trajectory,
    token_granular: bool,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (k, turn) in traj.turns.iter().enumerate() {
        let mut turn_sum = 0.0;
        for (t, &tok) in turn.response_tokens.iter().enumerate() {
            let lp_new = policy.log_prob(&feats.per_token[k][t], tok)?;
            let d = lp_new - turn.logp_policy[t];
            if token_granular {
                out.push(d);
            } else {
                turn_sum += d;
            }
        }
        if !token_granular {
            out.push(turn_sum);
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("cell log-ratios".into()));
    }
    Ok(out)
}

/// Importance ratio of turn `k` (1-based) of one trajectory.
pub fn turn_ratio(
    policy: &ParamMatrix,
    feats: &TrajFeatures,
    traj: &Trajectory,
    k: usize,
) -> Result<TurnRatio> {
    if k < 1 || k > traj.turns.len() {
        return Err(Error::Model(format!(
            "turn index {k} outside [1, {}]",
            traj.turns.len()
        )));
    }
    let log_ratio = cell_log_ratios(policy, feats, traj, false)?[k - 1];
    let ratio = log_ratio.exp();
    if !ratio.is_finite() || ratio <= 0.0 {
        return Err(Error::NonFinite(format!("turn ratio exp({log_ratio})")));
    }
    Ok(TurnRatio { log_ratio, ratio })
}

/// The clipped surrogate evaluated on explicit ratio/advantage grids.
#[derive(Clone, Debug)]
pub struct SurrogateEval {
    /// `mean_i Σ_c min(ρ·Â, clip(ρ, 1−ε, 1+ε)·Â)`.
    pub objective: f64,
    /// `−objective`.
    pub loss: f64,
    /// Whether each cell's gradient flows (the unclipped branch wins the
    /// min, or the two branches tie).
    pub active: Vec<Vec<bool>>,
    /// Cells whose gradient the clip suppressed.
    pub clipped_cells: usize,
    pub total_cells: usize,
}

/// Evaluate the clipped surrogate on a `G × C` grid of ratios and
/// advantages.
pub fn ppo_surrogate(
    ratios: &[Vec<f64>],
    advantages: &[Vec<f64>],
    eps_clip: f64,
) -> Result<SurrogateEval> {
    if !(0.0..1.0).contains(&eps_clip) || eps_clip == 0.0 {
        return Err(Error::Model(format!(
            "clip range must satisfy 0 < ε < 1, got {eps_clip}"
        )));
    }
    if ratios.len() != advantages.len() || ratios.is_empty() {
        return Err(Error::Model(format!(
            "ratio grid has {} rows, advantage grid {}",
            ratios.len(),
            advantages.len()
        )));
    }
    let mut objective = 0.0;
    let mut active = Vec::with_capacity(ratios.len());
    let mut clipped_cells = 0;
    let mut total_cells = 0;
    for (r_row, a_row) in ratios.iter().zip(advantages) {
        if r_row.len() != a_row.len() {
            return Err(Error::Model(format!(
                "ratio row has {} cells, advantage row {}",
                r_row.len(),
                a_row.len()
            )));
        }
        let mut row_active = Vec::with_capacity(r_row.len());
        for (&rho, &adv) in r_row.iter().zip(a_row) {
            if !rho.is_finite() || !adv.is_finite() {
                return Err(Error::NonFinite("surrogate inputs".into()));
            }
            let unclipped = rho * adv;
            let clipped = rho.clamp(1.0 - eps_clip, 1.0 + eps_clip) * adv;
            objective += unclipped.min(clipped);
            let is_active = unclipped <= clipped;
            if !is_active {
                clipped_cells += 1;
            }
            row_active.push(is_active);
            total_cells += 1;
        }
        active.push(row_active);
    }
    objective /= ratios.len() as f64;
    Ok(SurrogateEval {
        objective,
        loss: -objective,
        active,
        clipped_cells,
        total_cells,
    })
}

/// One trajectory of a policy-update batch: the episode, its cached feature
/// encoding, and its per-cell advantages (constant w.r.t. the policy).
pub struct PpoBatchItem<'a> {
    pub traj: &'a Trajectory,
    pub feats: &'a TrajFeatures,
    pub advantages: &'a [f64],
}

/// Telemetry from one policy loss/gradient evaluation.
#[derive(Clone, Copy, Debug)]
pub struct PolicyLossStats {
    /// Clipped surrogate objective (higher is better).
    pub objective: f64,
    /// Mean per-token KL estimate against the anchor.
    pub kl: f64,
    /// Total loss `−objective + kl_coeff·kl`.
    pub loss: f64,
    /// Fraction of cells whose gradient the clip suppressed.
    pub clip_fraction: f64,
}

/// Telemetry from one policy update step.
#[derive(Clone, Copy, Debug)]
pub struct PolicyUpdateStats {
    pub stats: PolicyLossStats,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Loss `−mean_i Σ_c min(ρÂ, clip(ρ)Â) + kl_coeff · mean_tokens(log π_θ −
/// log π_anchor)` and its exact gradient in the policy weights.
///
/// Per-item terms run in parallel; the reduction is sequential in batch
/// order, so results are bit-identical under any schedule.
pub fn policy_loss_and_gradient(
    policy: &ParamMatrix,
    anchor: &ParamMatrix,
    items: &[PpoBatchItem],
    token_granular: bool,
    eps_clip: f64,
    kl_coeff: f64,
    par: Parallelism,
) -> Result<(PolicyLossStats, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::Model("policy batch is empty".into()));
    }
    if !(0.0..1.0).contains(&eps_clip) || eps_clip == 0.0 {
        return Err(Error::Model(format!(
            "clip range must satisfy 0 < ε < 1, got {eps_clip}"
        )));
    }
    if kl_coeff < 0.0 {
        return Err(Error::Model("kl_coeff must be ≥ 0".into()));
    }
    let n = items.len();
    let total_tokens: usize = items.iter().map(|it| it.feats.token_count()).sum();
    let len = policy.w.len();

    struct ItemTerm {
        objective: f64,
        kl_sum: f64,
        clipped: usize,
        cells: usize,
        grad: Vec<f64>,
    }

    let per_item = map_indexed(n, par, |i| -> Result<ItemTerm> {
        let item = &items[i];
        let traj = item.traj;
        // Pass 1: score every token under the current policy and the anchor.
        let mut lp_new: Vec<Vec<f64>> = Vec::with_capacity(traj.turns.len());
        let mut probs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(traj.turns.len());
        let mut kl_sum = 0.0;
        for (k, turn) in traj.turns.iter().enumerate() {
            let mut lp_row = Vec::with_capacity(turn.response_tokens.len());
            let mut p_row = Vec::with_capacity(turn.response_tokens.len());
            for (t, &tok) in turn.response_tokens.iter().enumerate() {
                let f = &item.feats.per_token[k][t];
                let lp = policy.log_probs(f)?;
                let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
                let lp_tok = *lp.get(tok).ok_or_else(|| {
                    Error::Model(format!("token id {tok} outside vocabulary"))
                })?;
                kl_sum += lp_tok - anchor.log_prob(f, tok)?;
                lp_row.push(lp_tok);
                p_row.push(p);
            }
            lp_new.push(lp_row);
            probs.push(p_row);
        }
        // Per-cell ratios against the stored rollout log-probabilities.
        let mut cell_ratio: Vec<f64> = Vec::new();
        for (k, turn) in traj.turns.iter().enumerate() {
            if token_granular {
                for (t, _) in turn.response_tokens.iter().enumerate() {
                    cell_ratio.push((lp_new[k][t] - turn.logp_policy[t]).exp());
                }
            } else {
                let s: f64 = (0..turn.response_tokens.len())
                    .map(|t| lp_new[k][t] - turn.logp_policy[t])
                    .sum();
                cell_ratio.push(s.exp());
            }
        }
        if cell_ratio.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("importance ratios".into()));
        }
        if cell_ratio.len() != item.advantages.len() {
            return Err(Error::Model(format!(
                "trajectory has {} credit cells but {} advantages",
                cell_ratio.len(),
                item.advantages.len()
            )));
        }
        // Surrogate terms and the per-token gradient scales.
        let mut objective = 0.0;
        let mut clipped = 0;
        let mut cell_scale = Vec::with_capacity(cell_ratio.len());
        for (&rho, &adv) in cell_ratio.iter().zip(item.advantages) {
            if !adv.is_finite() {
                return Err(Error::NonFinite("advantages".into()));
            }
            let unclipped = rho * adv;
            let banded = rho.clamp(1.0 - eps_clip, 1.0 + eps_clip) * adv;
            objective += unclipped.min(banded);
            if unclipped <= banded {
                // d/dθ [ρÂ] = ρÂ · Σ_t ∇log π_θ; loss negates, mean divides.
                cell_scale.push(-(rho * adv) / n as f64);
            } else {
                clipped += 1;
                cell_scale.push(0.0);
            }
        }
        let kl_scale = kl_coeff / total_tokens as f64;
        let mut grad = vec![0.0; len];
        let mut cell = 0;
        for (k, turn) in traj.turns.iter().enumerate() {
            for (t, &tok) in turn.response_tokens.iter().enumerate() {
                let scale = if token_granular {
                    let s = cell_scale[cell] + kl_scale;
                    cell += 1;
                    s
                } else {
                    cell_scale[cell] + kl_scale
                };
                accumulate_score_gradient(
                    &item.feats.per_token[k][t],
                    &probs[k][t],
                    tok,
                    scale,
                    &mut grad,
                );
            }
            if !token_granular {
                cell += 1;
            }
        }
        Ok(ItemTerm {
            objective,
            kl_sum,
            clipped,
            cells: cell_ratio.len(),
            grad,
        })
    });

    let mut objective = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped = 0usize;
    let mut cells = 0usize;
    let mut grad = vec![0.0; len];
    for term in per_item {
        let t = term?;
        objective += t.objective;
        kl_sum += t.kl_sum;
        clipped += t.clipped;
        cells += t.cells;
        for (acc, x) in grad.iter_mut().zip(&t.grad) {
            *acc += x;
        }
    }
    objective /= n as f64;
    let kl = kl_sum / total_tokens as f64;
    Ok((
        PolicyLossStats {
            objective,
            kl,
            loss: -objective + kl_coeff * kl,
            clip_fraction: clipped as f64 / cells as f64,
        },
        grad,
    ))
}

/// One Adam step of the policy on a batch, with gradient-norm clipping.
/// Aborts (without stepping) if the gradient or the stepped weights are
/// non-finite.
pub fn policy_update(
    policy: &mut ParamMatrix,
    anchor: &ParamMatrix,
    items: &[PpoBatchItem],
    token_granular: bool,
    eps_clip: f64,
    kl_coeff: f64,
    adam: &mut Adam,
    max_grad_norm: f64,
    par: Parallelism,
) -> Result<PolicyUpdateStats> {
    let (stats, mut grad) = policy_loss_and_gradient(
        policy,
        anchor,
        items,
        token_granular,
        eps_clip,
        kl_coeff,
        par,
    )?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("policy gradient".into()));
    }
    let grad_norm = clip_grad_norm(&mut grad, max_grad_norm);
    adam.step(&mut policy.w, &grad);
    policy.assert_finite("policy weights after update")?;
    Ok(PolicyUpdateStats { stats, grad_norm })
}

/// Mean per-token KL estimate `mean_t (log π_θ − log π_anchor)` over every
/// response token in the batch.
pub fn mean_token_kl(
    policy: &ParamMatrix,
    anchor: &ParamMatrix,
    items: &[(&Trajectory, &TrajFeatures)],
    par: Parallelism,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Model("KL batch is empty".into()));
    }
    let per_item = map_indexed(items.len(), par, |i| -> Result<(f64, usize)> {
        let (traj, feats) = items[i];
        let mut sum = 0.0;
        let mut count = 0;
        for (k, turn) in traj.turns.iter().enumerate() {
            for (t, &tok) in turn.response_tokens.iter().enumerate() {
                let f = &feats.per_token[k][t];
                sum += policy.log_prob(f, tok)? - anchor.log_prob(f, tok)?;
                count += 1;
            }
        }
        Ok((sum, count))
    });
    let mut sum = 0.0;
    let mut count = 0usize;
    for term in per_item {
        let (s, c) = term?;
        sum += s;
        count += c;
    }
    Ok(sum / count as f64)
}
