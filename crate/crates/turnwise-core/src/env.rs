//! The Attribute-Elicitation game: a synthetic multi-turn collaborative POMDP
//! with a known, verifiable pivotal turn.
//!
//! The user holds `M` secret digits. Each turn the user emits a hint for
//! digit slot `k mod M`, corrupted to a NOISE token with probability
//! `p_noise`. Exactly one turn — the pivotal turn, drawn per goal — carries a
//! high-value hint that is withheld at every other opportunity and delivered
//! intact only if the agent's *previous* response contained the matching
//! CLARIFY token (the user announces the upcoming opportunity one turn
//! ahead). On the final turn the user recaps everything successfully
//! delivered so far and asks for the answer; the agent's response must start
//! with ANSWER followed by its `M` digit guesses. The outcome reward is the
//! fraction of positionally correct digits.
//!
//! The design makes turn importance measurable: replacing the response that
//! carried (or dropped) the CLARIFY changes the expected outcome, and a
//! brute-force counterfactual resampler ([`Environment::oracle_pivotal`])
//! recovers that ground truth for diagnostics.
//!
//! Token layout for vocabulary size `V` with `K` turns:
//! `0 .. V_goal` digit values, then `CLARIFY_1 .. CLARIFY_K`, then ANSWER,
//! NOISE, PAD, where `V_goal = V − K − 3`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::model::{FeatureMap, ParamMatrix};
use crate::rng::{Rng, Stream};

/// Environment shape and noise parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Number of turns K per episode.
    pub turns: usize,
    /// Number of secret digits M.
    pub digits: usize,
    /// Total vocabulary size V (digits + control tokens).
    pub vocab: usize,
    /// Per-hint corruption probability.
    pub p_noise: f64,
    /// Per-token length penalty applied to the combined score.
    pub gamma_len: f64,
    /// Seed for the goal-drawing stream.
    pub seed: u64,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.turns < 2 {
            return Err(Error::Env(format!("turns: K < 2 (got {})", self.turns)));
        }
        if self.digits < 1 {
            return Err(Error::Env("digits: M < 1".into()));
        }
        if self.turns < self.digits {
            return Err(Error::Env(format!(
                "turns: K = {} must be ≥ digits M = {} so every slot gets hinted",
                self.turns, self.digits
            )));
        }
        if !(0.0..1.0).contains(&self.p_noise) {
            return Err(Error::Env(format!(
                "p_noise: must lie in [0, 1), got {}",
                self.p_noise
            )));
        }
        if self.vocab < self.turns + 5 {
            return Err(Error::Env(format!(
                "vocab: V = {} leaves fewer than 2 digit values (need ≥ K + 5 = {})",
                self.vocab,
                self.turns + 5
            )));
        }
        if !self.gamma_len.is_finite() || self.gamma_len < 0.0 {
            return Err(Error::Env("gamma_len: must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// Number of digit-value tokens.
    pub fn v_goal(&self) -> usize {
        self.vocab - self.turns - 3
    }

    /// CLARIFY token for turn `k` (1-based).
    pub fn clarify_token(&self, k: usize) -> usize {
        debug_assert!((1..=self.turns).contains(&k));
        self.v_goal() + (k - 1)
    }

    pub fn answer_token(&self) -> usize {
        self.v_goal() + self.turns
    }

    pub fn noise_token(&self) -> usize {
        self.v_goal() + self.turns + 1
    }

    pub fn pad_token(&self) -> usize {
        self.v_goal() + self.turns + 2
    }

    /// Digit slot hinted at turn `k` (1-based turn, 0-based slot).
    pub fn slot_of_turn(&self, k: usize) -> usize {
        k % self.digits
    }

    /// Response length the environment accepts at every turn: `M + 1` tokens
    /// (ANSWER + digits on the final turn; CLARIFY/filler otherwise). Equal
    /// lengths keep per-turn reward sums comparable across turns — a shared
    /// per-token reward shift then cancels out of the softmax allocation
    /// instead of systematically disfavoring longer turns.
    pub fn response_len(&self, _k: usize) -> usize {
        self.digits + 1
    }

    /// Is `token` one of CLARIFY_1..CLARIFY_K? Returns the turn it names.
    pub fn clarify_turn_of(&self, token: usize) -> Option<usize> {
        let base = self.v_goal();
        if (base..base + self.turns).contains(&token) {
            Some(token - base + 1)
        } else {
            None
        }
    }
}

/// The user's secret state for one episode. Fully reconstructible from
/// `goal_id`, so serialized trajectories only carry the id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGoal {
    pub goal_id: u64,
    /// M digit values, each in `[0, V_goal)`.
    pub digits: Vec<usize>,
    /// The turn whose hint is withheld unless clarified; in `[2, K]` so a
    /// previous response always exists.
    pub pivotal_index: usize,
}

impl LatentGoal {
    pub fn from_id(goal_id: u64, cfg: &EnvConfig) -> Self {
        let mut rng = Stream::from_seed(goal_id).rng();
        let digits = (0..cfg.digits)
            .map(|_| rng.next_below(cfg.v_goal() as u64) as usize)
            .collect();
        let pivotal_index = 2 + rng.next_below(cfg.turns as u64 - 1) as usize;
        LatentGoal {
            goal_id,
            digits,
            pivotal_index,
        }
    }

    /// Digit slot carried by the pivotal turn.
    pub fn pivotal_slot(&self, cfg: &EnvConfig) -> usize {
        cfg.slot_of_turn(self.pivotal_index)
    }
}

/// One user-query / agent-response exchange with per-token log-probabilities
/// under the sampling policy, the PRM, and the frozen reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    pub index: usize,
    pub user_tokens: Vec<usize>,
    pub response_tokens: Vec<usize>,
    pub logp_policy: Vec<f64>,
    pub logp_prm: Vec<f64>,
    pub logp_ref: Vec<f64>,
}

/// A complete episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub goal: LatentGoal,
    pub turns: Vec<Turn>,
    /// Outcome reward R in [0, 1].
    pub outcome: f64,
    /// Total response tokens N.
    pub token_count: usize,
    /// Combined score S = R − gamma_len · N.
    pub combined_score: f64,
}

/// G trajectories sharing one goal; the unit for group-relative baselines.
#[derive(Clone, Debug)]
pub struct RolloutGroup {
    pub prompt_seed: u64,
    pub trajectories: Vec<Trajectory>,
}

/// Serialized form of a [`Turn`] (JSONL). The turn index is positional.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TurnRecord {
    pub user_tokens: Vec<usize>,
    pub response_tokens: Vec<usize>,
    pub logp_policy: Vec<f64>,
    pub logp_prm: Vec<f64>,
    pub logp_ref: Vec<f64>,
}

/// Serialized form of a [`Trajectory`] (one JSONL object per line).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub goal_id: u64,
    pub pivotal_index: usize,
    pub turns: Vec<TurnRecord>,
    pub outcome: f64,
    pub token_count: usize,
    pub combined_score: f64,
}

impl TrajectoryRecord {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        TrajectoryRecord {
            goal_id: traj.goal.goal_id,
            pivotal_index: traj.goal.pivotal_index,
            turns: traj
                .turns
                .iter()
                .map(|t| TurnRecord {
                    user_tokens: t.user_tokens.clone(),
                    response_tokens: t.response_tokens.clone(),
                    logp_policy: t.logp_policy.clone(),
                    logp_prm: t.logp_prm.clone(),
                    logp_ref: t.logp_ref.clone(),
                })
                .collect(),
            outcome: traj.outcome,
            token_count: traj.token_count,
            combined_score: traj.combined_score,
        }
    }

    /// Rebuild a full trajectory; the goal digits are re-derived from
    /// `goal_id` and cross-checked against the recorded pivotal index.
    pub fn into_trajectory(self, cfg: &EnvConfig) -> Result<Trajectory> {
        let goal = LatentGoal::from_id(self.goal_id, cfg);
        if goal.pivotal_index != self.pivotal_index {
            return Err(Error::Env(format!(
                "goal_id {} re-derives pivotal turn {} but record says {}",
                self.goal_id, goal.pivotal_index, self.pivotal_index
            )));
        }
        let turns = self
            .turns
            .into_iter()
            .enumerate()
            .map(|(i, t)| Turn {
                index: i + 1,
                user_tokens: t.user_tokens,
                response_tokens: t.response_tokens,
                logp_policy: t.logp_policy,
                logp_prm: t.logp_prm,
                logp_ref: t.logp_ref,
            })
            .collect();
        Ok(Trajectory {
            goal,
            turns,
            outcome: self.outcome,
            token_count: self.token_count,
            combined_score: self.combined_score,
        })
    }
}

/// Context handed to a [`TokenPolicy`] for one token decision.
pub struct TokenContext<'a> {
    /// All tokens of completed turns, user and response, in order.
    pub history: &'a [usize],
    /// The current user query.
    pub query: &'a [usize],
    /// Response tokens already emitted this turn.
    pub prefix: &'a [usize],
    /// 1-based turn index.
    pub turn_index: usize,
    /// Position within the response.
    pub position: usize,
}

/// Anything that can emit response tokens with honest log-probabilities.
pub trait TokenPolicy: Sync {
    fn sample_token(&self, ctx: &TokenContext, rng: &mut Rng) -> Result<(usize, f64)>;
}

/// A log-linear model acting as a policy, in stochastic or greedy mode.
pub struct ModelPolicy<'a> {
    pub params: &'a ParamMatrix,
    pub fmap: &'a FeatureMap,
    pub greedy: bool,
}

impl TokenPolicy for ModelPolicy<'_> {
    fn sample_token(&self, ctx: &TokenContext, rng: &mut Rng) -> Result<(usize, f64)> {
        let f = self
            .fmap
            .features(ctx.history, ctx.query, ctx.prefix, ctx.turn_index)?;
        if self.greedy {
            self.params.greedy(&f)
        } else {
            self.params.sample(&f, rng)
        }
    }
}

/// Hand-written baseline behavior used to build probe sets and frozen
/// training buffers: echo an announced CLARIFY with probability
/// `clarify_prob`, and copy recap digits into the answer, replacing each with
/// a uniformly random digit with probability `copy_noise`. All draws carry
/// exact log-probabilities.
pub struct ScriptedPolicy {
    pub cfg: EnvConfig,
    pub clarify_prob: f64,
    pub copy_noise: f64,
}

impl ScriptedPolicy {
    pub fn new(cfg: EnvConfig, clarify_prob: f64, copy_noise: f64) -> Self {
        ScriptedPolicy {
            cfg,
            clarify_prob,
            copy_noise,
        }
    }
}

impl TokenPolicy for ScriptedPolicy {
    fn sample_token(&self, ctx: &TokenContext, rng: &mut Rng) -> Result<(usize, f64)> {
        let cfg = &self.cfg;
        let pad = cfg.pad_token();
        if ctx.turn_index < cfg.turns {
            // Intermediate turn: maybe echo an announced CLARIFY, then pad.
            if ctx.position == 0 {
                let announced = ctx
                    .query
                    .iter()
                    .find_map(|&t| cfg.clarify_turn_of(t).map(|_| t));
                if let Some(clarify) = announced {
                    if rng.next_bool(self.clarify_prob) {
                        return Ok((clarify, self.clarify_prob.ln().min(0.0)));
                    }
                    return Ok((pad, (1.0 - self.clarify_prob).ln().min(0.0)));
                }
            }
            return Ok((pad, 0.0));
        }
        // Final turn: ANSWER, then copy the recap.
        if ctx.position == 0 {
            return Ok((cfg.answer_token(), 0.0));
        }
        let slot = ctx.position - 1;
        let target = ctx.query[slot];
        let v_goal = cfg.v_goal() as f64;
        let noisy = self.copy_noise > 0.0 && rng.next_bool(self.copy_noise);
        let tok = if noisy {
            rng.next_below(cfg.v_goal() as u64) as usize
        } else {
            target
        };
        // Probability of the emitted token under the mixture
        // (1 − copy_noise)·δ(target) + copy_noise·Uniform(digits).
        let mut p = if tok == target { 1.0 - self.copy_noise } else { 0.0 };
        if tok < cfg.v_goal() {
            p += self.copy_noise / v_goal;
        }
        Ok((tok, p.ln().min(0.0)))
    }
}

/// Models needed to record a trajectory: the acting policy plus the PRM and
/// reference used to snapshot per-token log-probabilities at rollout time.
pub struct RolloutModels<'a> {
    pub policy: &'a dyn TokenPolicy,
    pub prm: &'a ParamMatrix,
    pub reference: &'a ParamMatrix,
    pub fmap: &'a FeatureMap,
}

/// The game itself. Pure: every method is a function of its arguments and
/// the configured seed.
#[derive(Clone, Debug)]
pub struct Environment {
    pub cfg: EnvConfig,
    goal_root: Stream,
}

impl Environment {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let goal_root = Stream::from_seed(cfg.seed).derive_labeled("goal");
        Ok(Environment { cfg, goal_root })
    }

    /// Draw the goal for `goal_seed`. Equal configs yield equal goal
    /// sequences; the returned `goal_id` alone reconstructs the goal.
    pub fn goal(&self, goal_seed: u64) -> LatentGoal {
        let goal_id = self.goal_root.derive(goal_seed).rng().next_u64();
        LatentGoal::from_id(goal_id, &self.cfg)
    }

    /// Which slots have been delivered intact so far, replayed from the
    /// queries the user actually emitted. A hint token equal to the slot's
    /// true digit can only have been an intact delivery.
    fn delivered_state(&self, goal: &LatentGoal, prior: &[Turn]) -> Vec<bool> {
        let mut delivered = vec![false; self.cfg.digits];
        for turn in prior {
            let slot = self.cfg.slot_of_turn(turn.index);
            if turn.user_tokens.first() == Some(&goal.digits[slot]) {
                delivered[slot] = true;
            }
        }
        delivered
    }

    /// Emit the next user query given the exchanges so far.
    ///
    /// Intermediate queries carry one hint token (plus the CLARIFY
    /// announcement on the turn before the pivotal one); the final query
    /// recaps every delivered digit followed by ANSWER.
    pub fn user_step(&self, goal: &LatentGoal, prior: &[Turn], rng: &mut Rng) -> Vec<usize> {
        let cfg = &self.cfg;
        let k = prior.len() + 1;
        assert!(k <= cfg.turns, "user_step called on a complete trajectory");
        let mut delivered = self.delivered_state(goal, prior);
        let slot = cfg.slot_of_turn(k);
        let m_star = goal.pivotal_slot(cfg);

        let hint = if k == goal.pivotal_index {
            // Pivotal delivery: intact only if the previous response
            // contained the matching CLARIFY token.
            let clarified = prior
                .last()
                .map(|t| t.response_tokens.contains(&cfg.clarify_token(k)))
                .unwrap_or(false);
            if clarified {
                delivered[m_star] = true;
                goal.digits[m_star]
            } else {
                cfg.noise_token()
            }
        } else if slot == m_star {
            // The pivotal slot is withheld outside the pivotal turn.
            cfg.noise_token()
        } else if rng.next_bool(cfg.p_noise) {
            cfg.noise_token()
        } else {
            delivered[slot] = true;
            goal.digits[slot]
        };

        if k < cfg.turns {
            let mut q = vec![hint];
            if k + 1 == goal.pivotal_index {
                q.push(cfg.clarify_token(k + 1));
            }
            q
        } else {
            // Final turn: the hint above already updated `delivered`; the
            // recap reflects it, then asks for the answer.
            let mut q: Vec<usize> = (0..cfg.digits)
                .map(|m| {
                    if delivered[m] {
                        goal.digits[m]
                    } else {
                        cfg.noise_token()
                    }
                })
                .collect();
            q.push(cfg.answer_token());
            q
        }
    }

    /// Fraction of positionally correct digits after the first ANSWER token
    /// that has M followers; 0 if no such segment exists.
    pub fn answer_outcome(&self, goal: &LatentGoal, response: &[usize]) -> f64 {
        let m = self.cfg.digits;
        let answer = self.cfg.answer_token();
        for (i, &tok) in response.iter().enumerate() {
            if tok == answer {
                if i + 1 + m > response.len() {
                    return 0.0;
                }
                let guess = &response[i + 1..i + 1 + m];
                let hits = guess
                    .iter()
                    .zip(&goal.digits)
                    .filter(|(g, d)| g == d)
                    .count();
                return hits as f64 / m as f64;
            }
        }
        0.0
    }

    /// Outcome reward of a complete trajectory.
    pub fn outcome_reward(&self, goal: &LatentGoal, traj: &Trajectory) -> f64 {
        match traj.turns.last() {
            Some(last) => self.answer_outcome(goal, &last.response_tokens),
            None => 0.0,
        }
    }

    /// Assemble a trajectory from finished turns: fills outcome, token
    /// count, and the length-penalized combined score.
    pub fn complete(&self, goal: LatentGoal, turns: Vec<Turn>) -> Trajectory {
        let token_count: usize = turns.iter().map(|t| t.response_tokens.len()).sum();
        let outcome = match turns.last() {
            Some(last) => self.answer_outcome(&goal, &last.response_tokens),
            None => 0.0,
        };
        let combined_score = outcome - self.cfg.gamma_len * token_count as f64;
        Trajectory {
            goal,
            turns,
            outcome,
            token_count,
            combined_score,
        }
    }

    /// Roll one episode. Per-token log-probabilities are recorded under the
    /// sampling policy and under the supplied PRM/reference snapshots.
    pub fn rollout_one(
        &self,
        models: &RolloutModels,
        goal: &LatentGoal,
        stream: Stream,
    ) -> Result<Trajectory> {
        let cfg = &self.cfg;
        let user_root = stream.derive_labeled("user");
        let policy_root = stream.derive_labeled("policy");
        let mut turns: Vec<Turn> = Vec::with_capacity(cfg.turns);
        let mut history: Vec<usize> = Vec::new();
        for k in 1..=cfg.turns {
            let mut user_rng = user_root.derive(k as u64).rng();
            let query = self.user_step(goal, &turns, &mut user_rng);
            let mut policy_rng = policy_root.derive(k as u64).rng();
            let rlen = cfg.response_len(k);
            let mut response = Vec::with_capacity(rlen);
            let mut logp_policy = Vec::with_capacity(rlen);
            let mut logp_prm = Vec::with_capacity(rlen);
            let mut logp_ref = Vec::with_capacity(rlen);
            for t in 0..rlen {
                let ctx = TokenContext {
                    history: &history,
                    query: &query,
                    prefix: &response,
                    turn_index: k,
                    position: t,
                };
                let (tok, lp) = models.policy.sample_token(&ctx, &mut policy_rng)?;
                if tok >= cfg.vocab {
                    return Err(Error::Model(format!(
                        "policy emitted token {tok} outside vocabulary"
                    )));
                }
                let f = models.fmap.features(&history, &query, &response, k)?;
                logp_prm.push(models.prm.log_prob(&f, tok)?);
                logp_ref.push(models.reference.log_prob(&f, tok)?);
                logp_policy.push(lp);
                response.push(tok);
            }
            history.extend_from_slice(&query);
            history.extend_from_slice(&response);
            turns.push(Turn {
                index: k,
                user_tokens: query,
                response_tokens: response,
                logp_policy,
                logp_prm,
                logp_ref,
            });
        }
        Ok(self.complete(goal.clone(), turns))
    }

    /// Roll a group of `g` trajectories sharing the goal drawn from
    /// `goal_seed`. Trajectories own independent derived streams, so the
    /// result is identical under any parallel schedule.
    pub fn rollout(
        &self,
        models: &RolloutModels,
        goal_seed: u64,
        g: usize,
        stream: Stream,
        par: Parallelism,
    ) -> Result<RolloutGroup> {
        if g < 2 {
            return Err(Error::Env(format!("rollout group size G = {g} < 2")));
        }
        let goal = self.goal(goal_seed);
        let trajectories = map_indexed(g, par, |i| {
            self.rollout_one(models, &goal, stream.derive(i as u64))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(RolloutGroup {
            prompt_seed: goal.goal_id,
            trajectories,
        })
    }

    /// Sample a fresh response for turn `k` given completed prior turns.
    fn sample_response(
        &self,
        policy: &dyn TokenPolicy,
        prior: &[Turn],
        query: &[usize],
        k: usize,
        rng: &mut Rng,
    ) -> Result<Vec<usize>> {
        let history = flatten_turns(prior);
        let rlen = self.cfg.response_len(k);
        let mut response = Vec::with_capacity(rlen);
        for t in 0..rlen {
            let ctx = TokenContext {
                history: &history,
                query,
                prefix: &response,
                turn_index: k,
                position: t,
            };
            let (tok, _) = policy.sample_token(&ctx, rng)?;
            response.push(tok);
        }
        Ok(response)
    }

    /// Resume an episode whose first `turns.len()` exchanges are fixed,
    /// sampling the remaining user queries and policy responses from the
    /// given stream, and score the result.
    fn continue_and_score(
        &self,
        goal: &LatentGoal,
        mut turns: Vec<Turn>,
        policy: &dyn TokenPolicy,
        stream: Stream,
    ) -> Result<f64> {
        let user_root = stream.derive_labeled("user");
        let policy_root = stream.derive_labeled("policy");
        for k in (turns.len() + 1)..=self.cfg.turns {
            let mut user_rng = user_root.derive(k as u64).rng();
            let query = self.user_step(goal, &turns, &mut user_rng);
            let mut policy_rng = policy_root.derive(k as u64).rng();
            let response = self.sample_response(policy, &turns, &query, k, &mut policy_rng)?;
            turns.push(bare_turn(k, query, response));
        }
        Ok(self.answer_outcome(goal, &turns.last().unwrap().response_tokens))
    }

    /// Counterfactual value of turn `k`'s actual response:
    /// `Δ_k = E[outcome | y^k resampled] − E[outcome | y^k kept]`,
    /// estimated with `n_samples` paired continuations. Both arms of each
    /// pair share one continuation stream (common random numbers), so noise
    /// from future user corruption and future policy sampling cancels.
    pub fn counterfactual_turn_value(
        &self,
        goal: &LatentGoal,
        traj: &Trajectory,
        k: usize,
        policy: &dyn TokenPolicy,
        n_samples: usize,
        stream: Stream,
    ) -> Result<f64> {
        let kk = self.cfg.turns;
        if k < 1 || k > kk {
            return Err(Error::Env(format!("turn index {k} outside [1, {kk}]")));
        }
        if n_samples < 1 {
            return Err(Error::Env("n_samples must be ≥ 1".into()));
        }
        if traj.turns.len() != kk {
            return Err(Error::Env("counterfactual requires a complete trajectory".into()));
        }
        let mut acc = 0.0;
        for s in 0..n_samples {
            let ss = stream.derive(s as u64);
            // Arm A: resample y^k under the same query, then continue.
            let base = &traj.turns[..k - 1];
            let query = &traj.turns[k - 1].user_tokens;
            let mut resample_rng = ss.derive_labeled("resample").rng();
            let resampled = self.sample_response(policy, base, query, k, &mut resample_rng)?;
            let mut arm_a: Vec<Turn> = base.to_vec();
            arm_a.push(bare_turn(k, query.clone(), resampled));
            let r_resampled = self.continue_and_score(goal, arm_a, policy, ss)?;
            // Arm B: keep y^k, continue with the identical stream.
            let arm_b: Vec<Turn> = traj.turns[..k].to_vec();
            let r_kept = self.continue_and_score(goal, arm_b, policy, ss)?;
            acc += r_resampled - r_kept;
        }
        Ok(acc / n_samples as f64)
    }

    /// Ground-truth pivotal turn: the 1-based argmax of |Δ_k| (ties resolve
    /// to the earliest turn). Returns the index and all K deltas.
    pub fn oracle_pivotal(
        &self,
        goal: &LatentGoal,
        traj: &Trajectory,
        policy: &dyn TokenPolicy,
        n_samples: usize,
        stream: Stream,
    ) -> Result<(usize, Vec<f64>)> {
        let mut deltas = Vec::with_capacity(self.cfg.turns);
        for k in 1..=self.cfg.turns {
            deltas.push(self.counterfactual_turn_value(
                goal,
                traj,
                k,
                policy,
                n_samples,
                stream.derive(k as u64),
            )?);
        }
        let mut best = 0;
        for (i, d) in deltas.iter().enumerate() {
            if d.abs() > deltas[best].abs() {
                best = i;
            }
        }
        Ok((best + 1, deltas))
    }
}

/// All tokens of the given turns (user then response, per turn, in order).
pub fn flatten_turns(turns: &[Turn]) -> Vec<usize> {
    let mut out = Vec::new();
    for t in turns {
        out.extend_from_slice(&t.user_tokens);
        out.extend_from_slice(&t.response_tokens);
    }
    out
}

/// A turn without recorded log-probabilities (internal re-simulation only;
/// the zero placeholders keep the length invariants intact).
fn bare_turn(index: usize, user_tokens: Vec<usize>, response_tokens: Vec<usize>) -> Turn {
    let n = response_tokens.len();
    Turn {
        index,
        user_tokens,
        response_tokens,
        logp_policy: vec![0.0; n],
        logp_prm: vec![0.0; n],
        logp_ref: vec![0.0; n],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn default_cfg(seed: u64) -> EnvConfig {
        EnvConfig {
            turns: 4,
            digits: 3,
            vocab: 16,
            p_noise: 0.3,
            gamma_len: 5e-6,
            seed,
        }
    }

    fn zero_models(fmap: &FeatureMap) -> (ParamMatrix, ParamMatrix, ParamMatrix) {
        use crate::model::ModelTag;
        let d = fmap.dim();
        (
            ParamMatrix::zeros(d, fmap.vocab, ModelTag::Policy),
            ParamMatrix::zeros(d, fmap.vocab, ModelTag::Prm),
            ParamMatrix::zeros(d, fmap.vocab, ModelTag::Reference),
        )
    }

    #[test]
    fn constructor_validation() {
        assert!(Environment::new(default_cfg(7)).is_ok());
        let mut bad = default_cfg(7);
        bad.turns = 1;
        assert!(matches!(Environment::new(bad), Err(Error::Env(m)) if m.contains("K < 2")));
        let mut bad = default_cfg(7);
        bad.digits = 0;
        assert!(Environment::new(bad).is_err());
        let mut bad = default_cfg(7);
        bad.p_noise = 1.0;
        assert!(Environment::new(bad).is_err());
        let mut bad = default_cfg(7);
        bad.vocab = 8;
        assert!(Environment::new(bad).is_err());
    }

    #[test]
    fn token_layout() {
        let cfg = default_cfg(0);
        assert_eq!(cfg.v_goal(), 9);
        assert_eq!(cfg.clarify_token(1), 9);
        assert_eq!(cfg.clarify_token(4), 12);
        assert_eq!(cfg.answer_token(), 13);
        assert_eq!(cfg.noise_token(), 14);
        assert_eq!(cfg.pad_token(), 15);
        assert_eq!(cfg.clarify_turn_of(11), Some(3));
        assert_eq!(cfg.clarify_turn_of(8), None);
    }

    #[test]
    fn equal_configs_draw_identical_goal_sequences() {
        let a = Environment::new(default_cfg(7)).unwrap();
        let b = Environment::new(default_cfg(7)).unwrap();
        for i in 0..100 {
            assert_eq!(a.goal(i), b.goal(i));
        }
        let c = Environment::new(default_cfg(8)).unwrap();
        assert_ne!(a.goal(0), c.goal(0));
    }

    #[test]
    fn goal_reconstruction_from_id() {
        let env = Environment::new(default_cfg(3)).unwrap();
        let g = env.goal(12);
        assert_eq!(g, LatentGoal::from_id(g.goal_id, &env.cfg));
        assert!((2..=4).contains(&g.pivotal_index));
        assert!(g.digits.iter().all(|&d| d < 9));
    }

    #[test]
    fn scripted_policy_with_clarify_and_no_noise_scores_one() {
        let mut cfg = default_cfg(21);
        cfg.p_noise = 0.0;
        let env = Environment::new(cfg).unwrap();
        let fmap = FeatureMap::new(cfg.vocab, cfg.turns);
        let (_, prm, reference) = zero_models(&fmap);
        let scripted = ScriptedPolicy::new(cfg, 1.0, 0.0);
        let models = RolloutModels {
            policy: &scripted,
            prm: &prm,
            reference: &reference,
            fmap: &fmap,
        };
        let stream = Stream::from_seed(5);
        for i in 0..50 {
            let goal = env.goal(i);
            let traj = env.rollout_one(&models, &goal, stream.derive(i)).unwrap();
            assert_eq!(traj.outcome, 1.0, "goal {i}: {traj:?}");
            assert_eq!(traj.token_count, 4 * 4);
            assert!((traj.combined_score - (1.0 - 5e-6 * 16.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn skipping_clarify_strictly_lowers_expected_outcome() {
        let cfg = default_cfg(22);
        let env = Environment::new(cfg).unwrap();
        let fmap = FeatureMap::new(cfg.vocab, cfg.turns);
        let (_, prm, reference) = zero_models(&fmap);
        let mean_outcome = |clarify_prob: f64| {
            let scripted = ScriptedPolicy::new(cfg, clarify_prob, 0.0);
            let models = RolloutModels {
                policy: &scripted,
                prm: &prm,
                reference: &reference,
                fmap: &fmap,
            };
            let stream = Stream::from_seed(91);
            let mut total = 0.0;
            for i in 0..1000 {
                let goal = env.goal(i % 40);
                total += env
                    .rollout_one(&models, &goal, stream.derive(i))
                    .unwrap()
                    .outcome;
            }
            total / 1000.0
        };
        let with = mean_outcome(1.0);
        let without = mean_outcome(0.0);
        assert!(
            with > without + 0.1,
            "clarify gap too small: {with} vs {without}"
        );
    }

    #[test]
    fn hint_corruption_rate_matches_p_noise() {
        let cfg = default_cfg(30);
        let env = Environment::new(cfg).unwrap();
        // Turn 1 hints slot 1; pick a goal whose pivotal slot differs so the
        // hint goes through the plain corruption branch.
        let goal = LatentGoal {
            goal_id: 0,
            digits: vec![1, 2, 3],
            pivotal_index: 3, // slot 0
        };
        let stream = Stream::from_seed(17);
        let mut corrupted = 0;
        let n = 10_000;
        for i in 0..n {
            let q = env.user_step(&goal, &[], &mut stream.derive(i).rng());
            if q[0] == env.cfg.noise_token() {
                corrupted += 1;
            }
        }
        let rate = corrupted as f64 / n as f64;
        assert!((0.28..=0.32).contains(&rate), "corruption rate {rate}");
    }

    #[test]
    fn pivotal_hint_requires_clarify_in_previous_response() {
        let mut cfg = default_cfg(31);
        cfg.p_noise = 0.0;
        let env = Environment::new(cfg).unwrap();
        let goal = LatentGoal {
            goal_id: 0,
            digits: vec![4, 5, 6],
            pivotal_index: 2, // slot 2
        };
        let mk_turn = |resp: Vec<usize>| Turn {
            index: 1,
            user_tokens: vec![5, cfg.clarify_token(2)],
            response_tokens: resp.clone(),
            logp_policy: vec![0.0; resp.len()],
            logp_prm: vec![0.0; resp.len()],
            logp_ref: vec![0.0; resp.len()],
        };
        let mut rng = Rng::from_seed(1);
        // With CLARIFY_2 in the previous response the pivotal digit appears.
        let q = env.user_step(&goal, &[mk_turn(vec![cfg.clarify_token(2), cfg.pad_token()])], &mut rng);
        assert_eq!(q[0], 6);
        // Without it the hint is noise.
        let q = env.user_step(&goal, &[mk_turn(vec![cfg.pad_token(), cfg.pad_token()])], &mut rng);
        assert_eq!(q[0], env.cfg.noise_token());
    }

    #[test]
    fn announcement_precedes_pivotal_turn() {
        let mut cfg = default_cfg(32);
        cfg.p_noise = 0.0;
        let env = Environment::new(cfg).unwrap();
        let goal = LatentGoal {
            goal_id: 0,
            digits: vec![1, 2, 3],
            pivotal_index: 3,
        };
        let mut rng = Rng::from_seed(2);
        let q1 = env.user_step(&goal, &[], &mut rng);
        assert_eq!(q1.len(), 1, "no announcement on turn 1 for pivotal 3");
        let t1 = Turn {
            index: 1,
            user_tokens: q1,
            response_tokens: vec![cfg.pad_token(), cfg.pad_token()],
            logp_policy: vec![0.0; 2],
            logp_prm: vec![0.0; 2],
            logp_ref: vec![0.0; 2],
        };
        let q2 = env.user_step(&goal, &[t1], &mut rng);
        assert_eq!(q2.len(), 2);
        assert_eq!(q2[1], cfg.clarify_token(3));
    }

    #[test]
    fn outcome_counts_positional_matches() {
        let cfg = default_cfg(33);
        let env = Environment::new(cfg).unwrap();
        let goal = LatentGoal {
            goal_id: 0,
            digits: vec![1, 2, 3],
            pivotal_index: 2,
        };
        let score = |resp: Vec<usize>| env.answer_outcome(&goal, &resp);
        assert_eq!(score(vec![cfg.answer_token(), 1, 2, 3]), 1.0);
        let partial = score(vec![cfg.answer_token(), 1, 2, 0]);
        assert!((partial - 2.0 / 3.0).abs() < 1e-9);
        // No ANSWER segment, or ANSWER too late to have M followers → 0.
        assert_eq!(score(vec![cfg.pad_token(), 1, 2, 3]), 0.0);
        assert_eq!(score(vec![1, 2, 3, cfg.answer_token()]), 0.0);
    }

    #[test]
    fn rollout_is_reproducible_and_counts_tokens() {
        let cfg = default_cfg(40);
        let env = Environment::new(cfg).unwrap();
        let fmap = FeatureMap::new(cfg.vocab, cfg.turns);
        let (policy, prm, reference) = zero_models(&fmap);
        let mp = ModelPolicy {
            params: &policy,
            fmap: &fmap,
            greedy: false,
        };
        let models = RolloutModels {
            policy: &mp,
            prm: &prm,
            reference: &reference,
            fmap: &fmap,
        };
        let stream = Stream::from_seed(77);
        let a = env
            .rollout(&models, 5, 8, stream, Parallelism::Default)
            .unwrap();
        let b = env
            .rollout(&models, 5, 8, stream, Parallelism::Sequential)
            .unwrap();
        assert_eq!(a.prompt_seed, b.prompt_seed);
        assert_eq!(a.trajectories, b.trajectories);
        for traj in &a.trajectories {
            assert_eq!(traj.goal.goal_id, a.prompt_seed);
            let n: usize = traj.turns.iter().map(|t| t.response_tokens.len()).sum();
            assert_eq!(traj.token_count, n);
            assert!((traj.combined_score - (traj.outcome - cfg.gamma_len * n as f64)).abs() < 1e-15);
            for t in &traj.turns {
                assert!(t.logp_policy.iter().all(|&x| x <= 0.0));
                assert_eq!(t.logp_policy.len(), t.response_tokens.len());
                assert_eq!(t.logp_prm.len(), t.response_tokens.len());
                assert_eq!(t.logp_ref.len(), t.response_tokens.len());
            }
        }
        assert!(env.rollout(&models, 5, 1, stream, Parallelism::Default).is_err());
    }

    #[test]
    fn trajectory_record_round_trip() {
        let cfg = default_cfg(41);
        let env = Environment::new(cfg).unwrap();
        let fmap = FeatureMap::new(cfg.vocab, cfg.turns);
        let (_, prm, reference) = zero_models(&fmap);
        let scripted = ScriptedPolicy::new(cfg, 0.5, 0.2);
        let models = RolloutModels {
            policy: &scripted,
            prm: &prm,
            reference: &reference,
            fmap: &fmap,
        };
        let goal = env.goal(9);
        let traj = env
            .rollout_one(&models, &goal, Stream::from_seed(4))
            .unwrap();
        let record = TrajectoryRecord::from_trajectory(&traj);
        let json = serde_json::to_string(&record).unwrap();
        let back: TrajectoryRecord = serde_json::from_str(&json).unwrap();
        let rebuilt = back.into_trajectory(&cfg).unwrap();
        assert_eq!(rebuilt, traj);
    }

    #[test]
    fn counterfactual_of_ignored_turns_is_near_zero() {
        // A zero-weight policy is history-independent, so replacing any turn
        // changes nothing in expectation.
        let cfg = default_cfg(50);
        let env = Environment::new(cfg).unwrap();
        let fmap = FeatureMap::new(cfg.vocab, cfg.turns);
        let (policy, prm, reference) = zero_models(&fmap);
        let mp = ModelPolicy {
            params: &policy,
            fmap: &fmap,
            greedy: false,
        };
        let models = RolloutModels {
            policy: &mp,
            prm: &prm,
            reference: &reference,
            fmap: &fmap,
        };
        let goal = env.goal(3);
        let traj = env
            .rollout_one(&models, &goal, Stream::from_seed(8))
            .unwrap();
        for k in 1..=cfg.turns {
            let delta = env
                .counterfactual_turn_value(&goal, &traj, k, &mp, 256, Stream::from_seed(k as u64))
                .unwrap();
            assert!(delta.abs() < 0.05, "turn {k}: Δ = {delta}");
        }
        assert!(env
            .counterfactual_turn_value(&goal, &traj, 0, &mp, 4, Stream::from_seed(1))
            .is_err());
        assert!(env
            .counterfactual_turn_value(&goal, &traj, 1, &mp, 0, Stream::from_seed(1))
            .is_err());
    }

    #[test]
    fn oracle_isolates_the_clarify_turn() {
        // Deterministic game except for the clarify decision: the response
        // before the pivotal turn is the only one whose replacement can move
        // the outcome, so its |Δ| must dominate strictly.
        let mut cfg = default_cfg(51);
        cfg.p_noise = 0.0;
        let env = Environment::new(cfg).unwrap();
        let fmap = FeatureMap::new(cfg.vocab, cfg.turns);
        let (_, prm, reference) = zero_models(&fmap);
        let scripted = ScriptedPolicy::new(cfg, 0.5, 0.0);
        let models = RolloutModels {
            policy: &scripted,
            prm: &prm,
            reference: &reference,
            fmap: &fmap,
        };
        let stream = Stream::from_seed(60);
        let mut dominated = 0;
        let total = 100;
        for i in 0..total {
            let goal = env.goal(i);
            let traj = env
                .rollout_one(&models, &goal, stream.derive(i))
                .unwrap();
            let (_, deltas) = env
                .oracle_pivotal(&goal, &traj, &scripted, 64, stream.derive(1000 + i))
                .unwrap();
            let causal = goal.pivotal_index - 2; // 0-based: response before pivotal
            let ok = (0..cfg.turns)
                .all(|j| j == causal || deltas[causal].abs() > deltas[j].abs());
            if ok {
                dominated += 1;
            }
        }
        assert!(
            dominated >= 95,
            "clarify-turn delta dominated on only {dominated}/{total} trajectories"
        );
    }
}
