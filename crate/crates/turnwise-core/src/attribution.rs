//! Credit attribution: converting trajectory-level signals into per-turn
//! (or per-token) scalar rewards.
//!
//! Five strategies are supported:
//! - `itpo`: each turn is rewarded with its own summed token log-ratio score.
//! - `norm_itpo`: turn scores pass through a temperature softmax and the
//!   resulting weights split the episode outcome across turns.
//! - `trajectory_share`: every turn receives the full outcome (broadcast
//!   credit, the coarsest baseline).
//! - `uniform_dirichlet`: the outcome is split by weights drawn from a flat
//!   Dirichlet — random credit with the right simplex geometry.
//! - `token_level`: token log-ratio rewards are used directly, one credit
//!   cell per response token instead of per turn.
//!
//! The softmax weights double as a posterior over which turn was decisive:
//! low temperature concentrates credit on the top-scoring turn, high
//! temperature spreads it uniformly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Smallest accepted softmax temperature; below this the weights are a
/// numerically meaningless one-hot and the configuration is rejected.
pub const MIN_ETA: f64 = 1e-8;

/// How trajectory-level signal is turned into per-cell rewards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Itpo,
    NormItpo,
    TrajectoryShare,
    UniformDirichlet,
    TokenLevel,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Itpo,
        Strategy::NormItpo,
        Strategy::TrajectoryShare,
        Strategy::UniformDirichlet,
        Strategy::TokenLevel,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Itpo => "itpo",
            Strategy::NormItpo => "norm_itpo",
            Strategy::TrajectoryShare => "trajectory_share",
            Strategy::UniformDirichlet => "uniform_dirichlet",
            Strategy::TokenLevel => "token_level",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy '{s}' (expected one of itpo, norm_itpo, \
                     trajectory_share, uniform_dirichlet, token_level)"
                ))
            })
    }

    /// Does this strategy consume reward-model token scores?
    pub fn uses_prm(&self) -> bool {
        matches!(
            self,
            Strategy::Itpo | Strategy::NormItpo | Strategy::TokenLevel
        )
    }

    /// One credit cell per response token rather than per turn?
    pub fn token_granular(&self) -> bool {
        matches!(self, Strategy::TokenLevel)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-cell rewards produced by one strategy for one trajectory, together
/// with the intermediates that produced them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributionResult {
    pub strategy: Strategy,
    /// One reward per credit cell: a turn, or a response token for the
    /// token-granular strategy.
    pub rewards: Vec<f64>,
    /// Simplex weights, when the strategy splits the outcome.
    pub weights: Option<Vec<f64>>,
    /// Softmax temperature, when one was used.
    pub eta: Option<f64>,
}

/// Temperature softmax over turn scores, computed with max-subtraction.
/// The result is a simplex vector: entries ≥ 0 summing to 1.
pub fn softmax_weights(scores: &[f64], eta: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Config("softmax over an empty score vector".into()));
    }
    if !eta.is_finite() || eta < MIN_ETA {
        return Err(Error::Config(format!(
            "softmax temperature must be ≥ {MIN_ETA}, got {eta}"
        )));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("turn scores".into()));
    }
    let exps: Vec<f64> = scores.iter().map(|&s| ((s - max) / eta).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Posterior probability that each turn was the decisive one, given the
/// scores. Identical arithmetic to [`softmax_weights`]; a separate entry
/// point so diagnostics can speak in posterior terms.
pub fn pivotal_posterior(scores: &[f64], eta: f64) -> Result<Vec<f64>> {
    softmax_weights(scores, eta)
}

/// Split a scalar outcome across cells by simplex weights.
pub fn distribute_outcome(weights: &[f64], outcome: f64) -> Vec<f64> {
    weights.iter().map(|w| w * outcome).collect()
}

/// The two temperature extremes evaluated on one score vector.
#[derive(Clone, Debug)]
pub struct LimitCheck {
    /// Rewards at temperature 1e-6: outcome concentrated on the argmax
    /// (split equally over exact ties).
    pub one_hot: Vec<f64>,
    /// Rewards at temperature 1e6: outcome spread uniformly.
    pub uniform: Vec<f64>,
    /// True when the maximum score is not unique, which makes the
    /// low-temperature branch a tie split rather than a true one-hot.
    pub degenerate_tie: bool,
}

/// Evaluate the softmax at both temperature extremes.
pub fn temperature_limit_check(scores: &[f64], outcome: f64) -> Result<LimitCheck> {
    let one_hot = distribute_outcome(&softmax_weights(scores, 1e-6)?, outcome);
    let uniform = distribute_outcome(&softmax_weights(scores, 1e6)?, outcome);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties = scores.iter().filter(|&&s| s == max).count();
    Ok(LimitCheck {
        one_hot,
        uniform,
        degenerate_tie: ties > 1,
    })
}

/// Broadcast credit: every one of `cells` cells receives the full outcome.
pub fn trajectory_share(outcome: f64, cells: usize) -> Vec<f64> {
    vec![outcome; cells]
}

/// Random credit: split the outcome by weights drawn from the flat
/// Dirichlet (normalized unit-rate exponentials).
pub fn uniform_dirichlet(outcome: f64, cells: usize, rng: &mut Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..cells).map(|_| rng.next_exp()).collect();
    let z: f64 = draws.iter().sum();
    draws.into_iter().map(|e| outcome * e / z).collect()
}

/// Token-granular credit: the token rewards themselves, flattened in
/// trajectory order.
pub fn token_level(token_rewards: &[Vec<f64>]) -> Vec<f64> {
    token_rewards.iter().flatten().copied().collect()
}

/// Dispatch one trajectory through the configured strategy.
///
/// `token_rewards` (shape `[turn][token]`) is required for the strategies
/// that consume the reward model and must have `turn_count` rows; `rng` is
/// drawn from only by the Dirichlet strategy.
pub fn attribute(
    strategy: Strategy,
    turn_count: usize,
    token_rewards: Option<&[Vec<f64>]>,
    outcome: f64,
    eta: f64,
    rng: &mut Rng,
) -> Result<AttributionResult> {
    if turn_count == 0 {
        return Err(Error::Config("attribution over zero turns".into()));
    }
    if strategy.uses_prm() {
        let tr = token_rewards.ok_or_else(|| {
            Error::Config(format!("strategy {strategy} requires token rewards"))
        })?;
        if tr.len() != turn_count {
            return Err(Error::Config(format!(
                "token rewards cover {} turns, trajectory has {turn_count}",
                tr.len()
            )));
        }
    }
    let result = match strategy {
        Strategy::Itpo => {
            let scores = crate::prm::turn_scores(token_rewards.unwrap());
            AttributionResult {
                strategy,
                rewards: scores,
                weights: None,
                eta: None,
            }
        }
        Strategy::NormItpo => {
            let scores = crate::prm::turn_scores(token_rewards.unwrap());
            let weights = softmax_weights(&scores, eta)?;
            AttributionResult {
                strategy,
                rewards: distribute_outcome(&weights, outcome),
                weights: Some(weights),
                eta: Some(eta),
            }
        }
        Strategy::TrajectoryShare => AttributionResult {
            strategy,
            rewards: trajectory_share(outcome, turn_count),
            weights: None,
            eta: None,
        },
        Strategy::UniformDirichlet => {
            let rewards = uniform_dirichlet(outcome, turn_count, rng);
            let weights = if outcome != 0.0 {
                Some(rewards.iter().map(|r| r / outcome).collect())
            } else {
                None
            };
            AttributionResult {
                strategy,
                rewards,
                weights,
                eta: None,
            }
        }
        Strategy::TokenLevel => AttributionResult {
            strategy,
            rewards: token_level(token_rewards.unwrap()),
            weights: None,
            eta: None,
        },
    };
    if result.rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("{strategy} rewards")));
    }
    Ok(result)
}
