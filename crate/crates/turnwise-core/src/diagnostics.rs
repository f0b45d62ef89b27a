//! Analysis suite: rank correlations between implicit scores and outcomes,
//! stability of the turn-credit allocation across training steps, linear
//! score-vs-outcome calibration, and agreement between credited turns and a
//! counterfactual oracle — all computed over a frozen probe set that is
//! re-scored after every reward-model update.

use serde::{Deserialize, Serialize};

use crate::env::{
    Environment, LatentGoal, RolloutModels, TokenPolicy, Trajectory, TrajectoryRecord,
};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::model::{trajectory_features, FeatureMap, ModelTag, ParamMatrix, TrajFeatures};
use crate::rng::Stream;

/// Average (fractional) ranks, 1-based; tied values share the mean of the
/// positions they occupy.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// A rank correlation plus whether it was degenerate (zero rank variance on
/// either side, in which case the value is defined as 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankCorr {
    pub value: f64,
    pub degenerate: bool,
}

fn check_paired(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Diagnostics(format!(
            "paired series of different lengths: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Diagnostics(format!(
            "rank correlation needs ≥ 2 points, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank-correlation inputs".into()));
    }
    Ok(())
}

/// Tie-corrected Kendall rank correlation (the τ-b variant), computed by
/// direct pair enumeration. Fully tied input on either side yields 0 with
/// the degeneracy flag.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<RankCorr> {
    check_paired(xs, ys)?;
    let n = xs.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut tied_x = 0i64;
    let mut tied_y = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = xs[i] - xs[j];
            let dy = ys[i] - ys[j];
            if dx == 0.0 && dy == 0.0 {
                tied_x += 1;
                tied_y += 1;
            } else if dx == 0.0 {
                tied_x += 1;
            } else if dy == 0.0 {
                tied_y += 1;
            } else if dx * dy > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = (((n0 - tied_x) as f64) * ((n0 - tied_y) as f64)).sqrt();
    if denom == 0.0 {
        return Ok(RankCorr {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(RankCorr {
        value: (concordant - discordant) as f64 / denom,
        degenerate: false,
    })
}

/// Spearman rank correlation: Pearson correlation of average ranks. Zero
/// rank variance on either side yields 0 with the degeneracy flag.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<RankCorr> {
    check_paired(xs, ys)?;
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(RankCorr {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(RankCorr {
        value: cov / (vx * vy).sqrt(),
        degenerate: false,
    })
}

/// Per-step stability series of a probe's score snapshots.
#[derive(Clone, Debug)]
pub struct StabilityTrack {
    /// `conv[s]`: mean Spearman between step `s`'s per-trajectory scores and
    /// the converged allocation (their mean over the last `window` steps).
    pub conv: Vec<f64>,
    /// `adj[s]`: mean Spearman between steps `s − 1` and `s`; `adj[0]` is
    /// NaN (no predecessor).
    pub adj: Vec<f64>,
    /// Degenerate (zero-variance) trajectory pairs encountered; such pairs
    /// contribute 0 to the means.
    pub degenerate_pairs: usize,
}

/// Track the stability of per-trajectory score vectors across steps.
///
/// `snapshots[s][i]` is trajectory `i`'s score vector (one entry per turn,
/// or per token) at step `s`. All snapshots must agree on shape, and there
/// must be at least `window` of them.
pub fn stability_track(snapshots: &[Vec<Vec<f64>>], window: usize) -> Result<StabilityTrack> {
    if window < 1 {
        return Err(Error::Diagnostics("stability window must be ≥ 1".into()));
    }
    if snapshots.len() < window {
        return Err(Error::Diagnostics(format!(
            "stability needs ≥ {window} snapshots, got {}",
            snapshots.len()
        )));
    }
    let n_traj = snapshots[0].len();
    if n_traj == 0 {
        return Err(Error::Diagnostics("empty probe snapshot".into()));
    }
    for snap in snapshots {
        if snap.len() != n_traj {
            return Err(Error::Diagnostics("snapshot trajectory counts differ".into()));
        }
        for (row, first) in snap.iter().zip(&snapshots[0]) {
            if row.len() != first.len() {
                return Err(Error::Diagnostics("snapshot score shapes differ".into()));
            }
        }
    }
    // Converged allocation: per-trajectory mean over the last `window` steps.
    let tail = &snapshots[snapshots.len() - window..];
    let converged: Vec<Vec<f64>> = (0..n_traj)
        .map(|i| {
            let cells = snapshots[0][i].len();
            let mut mean = vec![0.0; cells];
            for snap in tail {
                for (m, v) in mean.iter_mut().zip(&snap[i]) {
                    *m += v;
                }
            }
            mean.iter().map(|m| m / window as f64).collect()
        })
        .collect();
    let mut degenerate_pairs = 0usize;
    let mut mean_rho = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in a.iter().zip(b) {
            let r = spearman(x, y)?;
            if r.degenerate {
                degenerate_pairs += 1;
            }
            total += r.value;
        }
        Ok(total / a.len() as f64)
    };
    let mut conv = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        conv.push(mean_rho(snap, &converged)?);
    }
    let mut adj = Vec::with_capacity(snapshots.len());
    adj.push(f64::NAN);
    for s in 1..snapshots.len() {
        adj.push(mean_rho(&snapshots[s - 1], &snapshots[s])?);
    }
    Ok(StabilityTrack {
        conv,
        adj,
        degenerate_pairs,
    })
}

/// Mean within-group Kendall τ between paired series, over consecutive
/// groups of `group_size`. Degenerate groups (fully tied on either side)
/// are skipped; returns the mean over the rest plus the skip count, or NaN
/// if every group was degenerate.
pub fn mean_group_kendall(xs: &[f64], ys: &[f64], group_size: usize) -> Result<(f64, usize)> {
    if group_size < 2 {
        return Err(Error::Diagnostics("group size must be ≥ 2".into()));
    }
    if xs.len() != ys.len() || xs.is_empty() || xs.len() % group_size != 0 {
        return Err(Error::Diagnostics(format!(
            "{} and {} values cannot form equal groups of {group_size}",
            xs.len(),
            ys.len()
        )));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for g in 0..xs.len() / group_size {
        let r = g * group_size..(g + 1) * group_size;
        let tau = kendall_tau(&xs[r.clone()], &ys[r])?;
        if tau.degenerate {
            skipped += 1;
        } else {
            total += tau.value;
            used += 1;
        }
    }
    if used == 0 {
        return Ok((f64::NAN, skipped));
    }
    Ok((total / used as f64, skipped))
}

/// Ordinary least-squares slope of `y` against `x` over one group's points.
/// Zero variance in `x` makes the slope undefined: the group is skipped
/// (`Ok(None)`).
pub fn slope_regression(points: &[(f64, f64)]) -> Result<Option<f64>> {
    if points.len() < 2 {
        return Err(Error::Diagnostics(format!(
            "slope needs ≥ 2 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite("regression points".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|(x, _)| x).sum::<f64>() / n;
    let my = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (x, y) in points {
        cov += (x - mx) * (y - my);
        var += (x - mx) * (x - mx);
    }
    if var == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / var))
}

/// Agreement between credited turns and oracle pivotal turns.
#[derive(Clone, Copy, Debug)]
pub struct Agreement {
    /// Fraction of trajectories whose reward argmax matches the oracle;
    /// ties count as agreement when the oracle turn is among the tied set.
    pub agreement: f64,
    /// Same fraction under a strict lowest-index tie-break.
    pub strict_agreement: f64,
    /// Fraction of trajectories whose reward argmax was tied.
    pub tie_rate: f64,
    /// Chance agreement of a uniformly random guess: 1/K.
    pub random_baseline: f64,
}

/// Compare per-turn reward argmaxes against 1-based oracle pivotal turns.
pub fn pivotal_agreement(per_turn_rewards: &[Vec<f64>], oracle: &[usize]) -> Result<Agreement> {
    if per_turn_rewards.is_empty() || per_turn_rewards.len() != oracle.len() {
        return Err(Error::Diagnostics(format!(
            "{} reward rows vs {} oracle labels",
            per_turn_rewards.len(),
            oracle.len()
        )));
    }
    let mut agree = 0usize;
    let mut strict = 0usize;
    let mut ties = 0usize;
    for (rewards, &pivot) in per_turn_rewards.iter().zip(oracle) {
        let k = rewards.len();
        if pivot < 1 || pivot > k {
            return Err(Error::Diagnostics(format!(
                "oracle turn {pivot} outside [1, {k}]"
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("per-turn rewards".into()));
        }
        let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = rewards
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == max)
            .map(|(i, _)| i + 1)
            .collect();
        if tied.len() > 1 {
            ties += 1;
        }
        if tied.contains(&pivot) {
            agree += 1;
        }
        if tied[0] == pivot {
            strict += 1;
        }
    }
    let n = per_turn_rewards.len() as f64;
    Ok(Agreement {
        agreement: agree as f64 / n,
        strict_agreement: strict as f64 / n,
        tie_rate: ties as f64 / n,
        random_baseline: 1.0 / per_turn_rewards[0].len() as f64,
    })
}

/// One re-scoring of the probe set under the reward model at `step`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeSnapshot {
    pub step: u64,
    /// Per-trajectory per-turn scores (pre-normalization, so every strategy's
    /// ranking can be derived from the same record).
    pub turn_scores: Vec<Vec<f64>>,
    /// Per-trajectory flattened token rewards.
    pub token_rewards: Vec<Vec<f64>>,
}

/// Serialized probe contents (`probe.json`).
#[derive(Serialize, Deserialize)]
struct ProbeFile {
    group_size: usize,
    oracle_pivotal: Vec<usize>,
    records: Vec<TrajectoryRecord>,
}

/// A frozen set of trajectories re-scored under the evolving reward model.
/// Trajectories are grouped (`group_size` consecutive rows share a goal) for
/// within-group rank statistics; snapshots are append-only with strictly
/// increasing steps.
pub struct ProbeSet {
    pub group_size: usize,
    pub trajectories: Vec<Trajectory>,
    pub features: Vec<TrajFeatures>,
    /// 1-based counterfactually decisive turn per trajectory.
    pub oracle_pivotal: Vec<usize>,
    pub snapshots: Vec<ProbeSnapshot>,
}

impl ProbeSet {
    /// Roll `prompts × rollouts` trajectories from `policy`, label each with
    /// the oracle's decisive turn (`oracle_samples` paired continuations per
    /// turn), and freeze the result. `goal_offset` shifts the goal-seed range
    /// away from the ranges other phases draw from.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        env: &Environment,
        fmap: &FeatureMap,
        policy: &dyn TokenPolicy,
        prompts: usize,
        rollouts: usize,
        oracle_samples: usize,
        goal_offset: u64,
        stream: Stream,
        par: Parallelism,
    ) -> Result<ProbeSet> {
        if prompts == 0 || rollouts == 0 {
            return Err(Error::Diagnostics("probe must be nonempty".into()));
        }
        let d = fmap.dim();
        let prm = ParamMatrix::zeros(d, fmap.vocab, ModelTag::Prm);
        let reference = ParamMatrix::zeros(d, fmap.vocab, ModelTag::Reference);
        let models = RolloutModels {
            policy,
            prm: &prm,
            reference: &reference,
            fmap,
        };
        let goals: Vec<LatentGoal> = (0..prompts)
            .map(|p| env.goal(goal_offset + p as u64))
            .collect();
        let roll_root = stream.derive_labeled("probe-roll");
        let oracle_root = stream.derive_labeled("probe-oracle");
        let n = prompts * rollouts;
        let rows = map_indexed(n, par, |i| -> Result<(Trajectory, TrajFeatures, usize)> {
            let goal = &goals[i / rollouts];
            let traj = env.rollout_one(&models, goal, roll_root.derive(i as u64))?;
            let feats = trajectory_features(fmap, &traj)?;
            let (pivot, _) = env.oracle_pivotal(
                goal,
                &traj,
                policy,
                oracle_samples,
                oracle_root.derive(i as u64),
            )?;
            Ok((traj, feats, pivot))
        });
        let mut trajectories = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n);
        let mut oracle_pivotal = Vec::with_capacity(n);
        for row in rows {
            let (t, f, p) = row?;
            trajectories.push(t);
            features.push(f);
            oracle_pivotal.push(p);
        }
        Ok(ProbeSet {
            group_size: rollouts,
            trajectories,
            features,
            oracle_pivotal,
            snapshots: Vec::new(),
        })
    }

    /// Score every probe trajectory under the current reward model and
    /// append the snapshot. Steps must strictly increase.
    pub fn rescore(
        &mut self,
        step: u64,
        beta: f64,
        prm: &ParamMatrix,
        reference: &ParamMatrix,
        par: Parallelism,
    ) -> Result<&ProbeSnapshot> {
        if let Some(last) = self.snapshots.last() {
            if step <= last.step {
                return Err(Error::Diagnostics(format!(
                    "snapshot steps must increase: {} after {}",
                    step, last.step
                )));
            }
        }
        let n = self.trajectories.len();
        let scored = map_indexed(n, par, |i| -> Result<(Vec<f64>, Vec<f64>)> {
            let rewards = crate::prm::token_rewards(
                beta,
                prm,
                reference,
                &self.features[i],
                &self.trajectories[i],
            )?;
            let turns = crate::prm::turn_scores(&rewards);
            let tokens = rewards.into_iter().flatten().collect();
            Ok((turns, tokens))
        });
        let mut turn_scores = Vec::with_capacity(n);
        let mut token_rewards = Vec::with_capacity(n);
        for row in scored {
            let (t, k) = row?;
            turn_scores.push(t);
            token_rewards.push(k);
        }
        self.snapshots.push(ProbeSnapshot {
            step,
            turn_scores,
            token_rewards,
        });
        Ok(self.snapshots.last().unwrap())
    }

    /// Trajectory-level scores `R_φ(τ)` of one snapshot.
    pub fn trajectory_scores(snapshot: &ProbeSnapshot) -> Vec<f64> {
        snapshot
            .turn_scores
            .iter()
            .map(|row| row.iter().sum())
            .collect()
    }

    /// Iterate group slices `(group_id, range)` over the probe rows.
    pub fn groups(&self) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
        let g = self.group_size;
        (0..self.trajectories.len() / g).map(move |i| (i, i * g..(i + 1) * g))
    }

    /// Persist the frozen contents as `probe.json` and the snapshots as
    /// `probe_snapshots.jsonl` under `dir`.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        let file = ProbeFile {
            group_size: self.group_size,
            oracle_pivotal: self.oracle_pivotal.clone(),
            records: self
                .trajectories
                .iter()
                .map(TrajectoryRecord::from_trajectory)
                .collect(),
        };
        crate::io::write_json(&dir.join("probe.json"), &file)?;
        let mut w = crate::io::JsonlWriter::create(&dir.join("probe_snapshots.jsonl"))?;
        for snap in &self.snapshots {
            w.append(snap)?;
        }
        w.flush()
    }

    /// Load a probe saved by [`ProbeSet::save`], rebuilding goals and
    /// feature caches from the environment configuration.
    pub fn load(dir: &std::path::Path, env: &Environment, fmap: &FeatureMap) -> Result<ProbeSet> {
        let file: ProbeFile = crate::io::read_json(&dir.join("probe.json"))?;
        let trajectories: Vec<Trajectory> = file
            .records
            .into_iter()
            .map(|r| r.into_trajectory(&env.cfg))
            .collect::<Result<_>>()?;
        let features = trajectories
            .iter()
            .map(|t| trajectory_features(fmap, t))
            .collect::<Result<_>>()?;
        let snap_path = dir.join("probe_snapshots.jsonl");
        let snapshots = if snap_path.exists() {
            crate::io::read_jsonl(&snap_path)?
        } else {
            Vec::new()
        };
        Ok(ProbeSet {
            group_size: file.group_size,
            trajectories,
            features,
            oracle_pivotal: file.oracle_pivotal,
            snapshots,
        })
    }
}
