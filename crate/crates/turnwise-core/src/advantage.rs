//! Turn-level advantage estimation over rollout groups.
//!
//! Three estimators share one tensor shape (`G` trajectories × `C` credit
//! cells): leave-one-out baselines, group standardization, and generalized
//! advantage estimation against a learned linear value head. A separate
//! mixing step combines the advantages of the attribution-reward channel
//! with those of the broadcast-outcome channel under configurable weights,
//! which is how the reward-model signal and the raw outcome signal are
//! blended for the policy update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamMatrix;

/// How per-cell rewards become per-cell advantages within a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Rloo,
    Grpo,
    Gae,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Rloo, Estimator::Grpo, Estimator::Gae];

    pub fn as_str(&self) -> &'static str {
        match self {
            Estimator::Rloo => "rloo",
            Estimator::Grpo => "grpo",
            Estimator::Gae => "gae",
        }
    }

    pub fn parse(s: &str) -> Result<Estimator> {
        Estimator::ALL
            .iter()
            .copied()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown estimator '{s}' (expected rloo, grpo, or gae)"
                ))
            })
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Advantages for one rollout group, shaped like the rewards that produced
/// them: one row per trajectory, one column per credit cell.
#[derive(Clone, Debug)]
pub struct AdvantageTensor {
    pub estimator: Estimator,
    pub values: Vec<Vec<f64>>,
    /// Per-cell group mean, for the estimators that compute one.
    pub group_mean: Option<Vec<f64>>,
    /// Per-cell group standard deviation (population), when computed.
    pub group_std: Option<Vec<f64>>,
}

/// Advantages after channel mixing:
/// `values = w_implicit · A_channel1 + w_outcome · A_channel2`.
#[derive(Clone, Debug)]
pub struct MixedAdvantage {
    pub w_implicit: f64,
    pub w_outcome: f64,
    pub values: Vec<Vec<f64>>,
}

fn check_group(rewards: &[Vec<f64>]) -> Result<usize> {
    if rewards.len() < 2 {
        return Err(Error::Model(format!(
            "group-relative estimators need G ≥ 2 trajectories, got {}",
            rewards.len()
        )));
    }
    let cells = rewards[0].len();
    if cells == 0 {
        return Err(Error::Model("advantage estimation over zero cells".into()));
    }
    for row in rewards {
        if row.len() != cells {
            return Err(Error::Model(format!(
                "ragged reward rows: {} vs {cells}",
                row.len()
            )));
        }
        if row.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("group rewards".into()));
        }
    }
    Ok(cells)
}

fn column_means(rewards: &[Vec<f64>], cells: usize) -> Vec<f64> {
    let g = rewards.len() as f64;
    let mut mu = vec![0.0; cells];
    for row in rewards {
        for (m, r) in mu.iter_mut().zip(row) {
            *m += r;
        }
    }
    for m in mu.iter_mut() {
        *m /= g;
    }
    mu
}

/// Leave-one-out advantages: each trajectory's reward minus the mean reward
/// of the other `G − 1` trajectories in its group, per cell.
pub fn rloo(rewards: &[Vec<f64>]) -> Result<AdvantageTensor> {
    let cells = check_group(rewards)?;
    let g = rewards.len() as f64;
    let mut sums = vec![0.0; cells];
    for row in rewards {
        for (s, r) in sums.iter_mut().zip(row) {
            *s += r;
        }
    }
    let values = rewards
        .iter()
        .map(|row| {
            row.iter()
                .zip(&sums)
                .map(|(&r, &s)| r - (s - r) / (g - 1.0))
                .collect()
        })
        .collect();
    Ok(AdvantageTensor {
        estimator: Estimator::Rloo,
        values,
        group_mean: Some(sums.iter().map(|s| s / g).collect()),
        group_std: None,
    })
}

/// Group-standardized advantages: `(r − μ) / (σ + eps_std)` with per-cell
/// group mean and population standard deviation.
pub fn grpo(rewards: &[Vec<f64>], eps_std: f64) -> Result<AdvantageTensor> {
    if eps_std <= 0.0 {
        return Err(Error::Model("eps_std must be positive".into()));
    }
    let cells = check_group(rewards)?;
    let g = rewards.len() as f64;
    let mu = column_means(rewards, cells);
    let mut var = vec![0.0; cells];
    for row in rewards {
        for ((v, r), m) in var.iter_mut().zip(row).zip(&mu) {
            let d = r - m;
            *v += d * d;
        }
    }
    let sigma: Vec<f64> = var.iter().map(|v| (v / g).sqrt()).collect();
    let values = rewards
        .iter()
        .map(|row| {
            row.iter()
                .zip(&mu)
                .zip(&sigma)
                .map(|((&r, &m), &s)| (r - m) / (s + eps_std))
                .collect()
        })
        .collect();
    Ok(AdvantageTensor {
        estimator: Estimator::Grpo,
        values,
        group_mean: Some(mu),
        group_std: Some(sigma),
    })
}

/// One regression sample for the value head: the feature vector of a turn
/// start and its Monte-Carlo return-to-go target.
pub struct ValueSample<'a> {
    pub features: &'a [f64],
    pub target: f64,
}

/// One plain gradient step of the linear value head toward its targets
/// under mean squared error. Returns the pre-step loss.
pub fn fit_value_head(value: &mut ParamMatrix, batch: &[ValueSample], lr: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Model("value-head batch is empty".into()));
    }
    if value.cols != 1 {
        return Err(Error::Model(format!(
            "value head must have one output column, got {}",
            value.cols
        )));
    }
    for s in batch {
        if !s.target.is_finite() {
            return Err(Error::NonFinite("value target".into()));
        }
        if s.features.len() != value.rows {
            return Err(Error::Model(format!(
                "value feature length {} does not match head rows {}",
                s.features.len(),
                value.rows
            )));
        }
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; value.rows];
    for s in batch {
        let v = value.value(s.features);
        let err = v - s.target;
        loss += err * err;
        let coeff = 2.0 * err / n;
        for (g, &f) in grad.iter_mut().zip(s.features) {
            *g += coeff * f;
        }
    }
    for (w, g) in value.w.iter_mut().zip(&grad) {
        *w -= lr * g;
    }
    value.assert_finite("value head after fit step")?;
    Ok(loss / n)
}

/// Discounted Monte-Carlo returns-to-go: `G_k = r_k + γ·G_{k+1}`, terminal
/// `G` zero. The independent oracle for checking the λ = 1 case below.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

/// Generalized advantage estimation over one trajectory's turn rewards.
///
/// `values` holds the critic's estimate at each turn start plus a terminal
/// entry (conventionally zero). Backward recursion:
/// `δ_k = r_k + γ·V_{k+1} − V_k`, `A_k = δ_k + γλ·A_{k+1}`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::Model(format!(
            "value vector must have one entry per turn plus a terminal entry: \
             {} rewards vs {} values",
            rewards.len(),
            values.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) || !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Model(format!(
            "gamma and lambda must lie in [0, 1], got γ = {gamma}, λ = {lambda}"
        )));
    }
    let k = rewards.len();
    let mut adv = vec![0.0; k];
    let mut acc = 0.0;
    for i in (0..k).rev() {
        let delta = rewards[i] + gamma * values[i + 1] - values[i];
        acc = delta + gamma * lambda * acc;
        adv[i] = acc;
    }
    Ok(adv)
}

/// Entrywise weighted sum of two advantage tensors of identical shape.
pub fn mix_advantages(
    implicit: &[Vec<f64>],
    outcome: &[Vec<f64>],
    w_implicit: f64,
    w_outcome: f64,
) -> Result<MixedAdvantage> {
    if w_implicit < 0.0 || w_outcome < 0.0 {
        return Err(Error::Model(format!(
            "mixing weights must be ≥ 0, got ({w_implicit}, {w_outcome})"
        )));
    }
    if implicit.len() != outcome.len() {
        return Err(Error::Model(format!(
            "channel shapes differ: {} vs {} rows",
            implicit.len(),
            outcome.len()
        )));
    }
    let values = implicit
        .iter()
        .zip(outcome)
        .map(|(a, b)| {
            if a.len() != b.len() {
                return Err(Error::Model(format!(
                    "channel shapes differ: {} vs {} cells",
                    a.len(),
                    b.len()
                )));
            }
            Ok(a.iter()
                .zip(b)
                .map(|(&x, &y)| w_implicit * x + w_outcome * y)
                .collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(MixedAdvantage {
        w_implicit,
        w_outcome,
        values,
    })
}
