//! The four-stage training loop: roll out groups of episodes, update the
//! implicit reward model online, attribute credit to turns, and take clipped
//! policy-gradient steps — emitting metrics, checkpoints, probe snapshots,
//! and trajectory/attribution logs under the run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advantage::{
    fit_value_head, gae, grpo, mix_advantages, returns_to_go, rloo, Estimator, ValueSample,
};
use crate::attribution::{attribute, trajectory_share, Strategy};
use crate::config::RunConfig;
use crate::diagnostics::{mean_group_kendall, ProbeSet};
use crate::env::{
    Environment, ModelPolicy, RolloutGroup, RolloutModels, ScriptedPolicy, Trajectory,
    TrajectoryRecord,
};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::io::{ensure_dir, float_cell, write_json, write_manifest, CsvWriter, JsonlWriter};
use crate::model::{
    trajectory_features, write_params, Adam, FeatureMap, ModelTag, ParamMatrix, TrajFeatures,
};
use crate::ppo::{mean_token_kl, policy_update, PpoBatchItem};
use crate::prm::{prm_update, PrmBatchItem};

/// Goal-seed range reserved for the frozen probe set, disjoint from the
/// training range (which counts up from 0 by iteration × group).
pub const PROBE_GOAL_OFFSET: u64 = 1 << 40;
/// Goal-seed range reserved for held-out evaluation prompts.
pub const EVAL_GOAL_OFFSET: u64 = 1 << 41;

/// Groups per policy-update minibatch (single epoch over the batch).
pub const MINIBATCH_GROUPS: usize = 4;

/// Columns of `metrics.csv`, one row per training iteration.
pub const METRICS_COLUMNS: [&str; 10] = [
    "step",
    "strategy",
    "estimator",
    "mean_outcome",
    "mean_token_count",
    "mean_combined_score",
    "bce_loss",
    "kendall_tau",
    "mean_kl",
    "clip_fraction",
];

/// Everything the loop mutates across iterations.
pub struct TrainState {
    pub cfg: RunConfig,
    pub env: Environment,
    pub fmap: FeatureMap,
    pub policy: ParamMatrix,
    /// Initial policy snapshot; the KL penalty anchors to it.
    pub anchor: ParamMatrix,
    pub prm: ParamMatrix,
    pub reference: ParamMatrix,
    pub value: ParamMatrix,
    pub adam_policy: Adam,
    pub adam_prm: Adam,
    pub root: crate::rng::Stream,
    pub step: u64,
}

/// Contents of `state.json` inside each checkpoint directory.
#[derive(Serialize, Deserialize)]
pub struct CheckpointState {
    pub step: u64,
    pub config: RunConfig,
}

/// One row of the attribution log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributionRow {
    pub traj_id: String,
    pub strategy: Strategy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Per-turn implicit scores, when the strategy consumes the reward model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// The attributed per-cell rewards (before length shaping).
    pub per_turn: Vec<f64>,
}

/// Scalar telemetry of one iteration; the source of one metrics row.
#[derive(Clone, Copy, Debug)]
pub struct IterationStats {
    pub step: u64,
    pub mean_outcome: f64,
    pub mean_token_count: f64,
    pub mean_combined_score: f64,
    /// NaN when the strategy does not train the reward model.
    pub bce_loss: f64,
    /// Mean within-group rank correlation of implicit trajectory scores
    /// against outcomes; NaN when unavailable or fully degenerate.
    pub kendall_tau: f64,
    /// Mean per-token KL against the anchor, measured after the update.
    pub mean_kl: f64,
    /// Fraction of credit cells whose gradient the clip suppressed.
    pub clip_fraction: f64,
}

impl IterationStats {
    pub fn csv_row(&self, strategy: Strategy, estimator: Estimator) -> Vec<String> {
        vec![
            self.step.to_string(),
            strategy.as_str().to_string(),
            estimator.as_str().to_string(),
            float_cell(self.mean_outcome),
            float_cell(self.mean_token_count),
            float_cell(self.mean_combined_score),
            float_cell(self.bce_loss),
            float_cell(self.kendall_tau),
            float_cell(self.mean_kl),
            float_cell(self.clip_fraction),
        ]
    }
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<TrainState> {
        cfg.validate()?;
        let env_cfg = cfg.env_config()?;
        let env = Environment::new(env_cfg)?;
        let fmap = FeatureMap::new(env_cfg.vocab, env_cfg.turns);
        let d = fmap.dim();
        let v = env_cfg.vocab;
        let policy = ParamMatrix::zeros(d, v, ModelTag::Policy);
        let anchor = policy.clone();
        let mut prm = ParamMatrix::zeros(d, v, ModelTag::Prm);
        prm.tag = ModelTag::Prm;
        let reference = ParamMatrix::zeros(d, v, ModelTag::Reference);
        let value = ParamMatrix::zeros(d, 1, ModelTag::Value);
        let adam_policy = Adam::new(d * v, cfg.lr_policy);
        let adam_prm = Adam::new(d * v, cfg.lr_prm);
        Ok(TrainState {
            cfg: cfg.clone(),
            env,
            fmap,
            policy,
            anchor,
            prm,
            reference,
            value,
            adam_policy,
            adam_prm,
            root: crate::rng::Stream::from_seed(cfg.seed),
            step: 0,
        })
    }

    /// Stage 1: roll out `groups × rollouts` episodes under the current
    /// policy. Training goal seeds count up deterministically by iteration.
    pub fn rollout_batch(&self, step: u64) -> Result<Vec<RolloutGroup>> {
        let b = self.cfg.groups;
        let g = self.cfg.rollouts;
        let policy = ModelPolicy {
            params: &self.policy,
            fmap: &self.fmap,
            greedy: false,
        };
        let models = RolloutModels {
            policy: &policy,
            prm: &self.prm,
            reference: &self.reference,
            fmap: &self.fmap,
        };
        let iter_stream = self.root.derive_labeled("train").derive(step);
        let groups = map_indexed(b, self.cfg.parallelism(), |i| {
            let goal_seed = (step - 1) * b as u64 + i as u64;
            self.env.rollout(
                &models,
                goal_seed,
                g,
                iter_stream.derive(i as u64),
                Parallelism::Sequential,
            )
        });
        groups.into_iter().collect()
    }

    /// Write `policy.bin`, `prm.bin`, `ref.bin`, `value.bin`, and
    /// `state.json` under `{run_dir}/step_{step}`.
    pub fn checkpoint(&self, run_dir: &Path, step: u64) -> Result<PathBuf> {
        let dir = run_dir.join(format!("step_{step}"));
        ensure_dir(&dir)?;
        write_params(&dir.join("policy.bin"), &self.policy, step)?;
        write_params(&dir.join("prm.bin"), &self.prm, step)?;
        write_params(&dir.join("ref.bin"), &self.reference, step)?;
        write_params(&dir.join("value.bin"), &self.value, step)?;
        write_json(
            &dir.join("state.json"),
            &CheckpointState {
                step,
                config: self.cfg.clone(),
            },
        )?;
        Ok(dir)
    }
}

/// Apply the configured estimator to one group's reward rows.
fn estimate_group(
    estimator: Estimator,
    rows: &[Vec<f64>],
    value: &ParamMatrix,
    feats: &[TrajFeatures],
    gamma: f64,
    lambda: f64,
    eps_std: f64,
) -> Result<Vec<Vec<f64>>> {
    match estimator {
        Estimator::Rloo => Ok(rloo(rows)?.values),
        Estimator::Grpo => Ok(grpo(rows, eps_std)?.values),
        Estimator::Gae => rows
            .iter()
            .zip(feats)
            .map(|(rewards, f)| {
                let k = rewards.len();
                let mut values = Vec::with_capacity(k + 1);
                for turn in 1..=k {
                    values.push(value.value(f.turn_start(turn)));
                }
                values.push(0.0);
                gae(rewards, &values, gamma, lambda)
            })
            .collect(),
    }
}

/// Stages 2–4 on one rolled-out batch: reward-model update, attribution with
/// per-cell length shaping, advantage estimation and mixing, minibatched
/// policy updates, and post-update telemetry.
pub fn process_batch(
    state: &mut TrainState,
    step: u64,
    batch: &[RolloutGroup],
) -> Result<(IterationStats, Vec<AttributionRow>)> {
    let TrainState {
        cfg,
        fmap,
        policy,
        anchor,
        prm,
        reference,
        value,
        adam_policy,
        adam_prm,
        root,
        ..
    } = state;
    let par = cfg.parallelism();
    let g = cfg.rollouts;
    let flat: Vec<&Trajectory> = batch.iter().flat_map(|gr| gr.trajectories.iter()).collect();
    let n = flat.len();
    if n == 0 {
        return Err(Error::Config("empty rollout batch".into()));
    }
    let feats: Vec<TrajFeatures> = map_indexed(n, par, |i| trajectory_features(fmap, flat[i]))
        .into_iter()
        .collect::<Result<_>>()?;

    let inv = 1.0 / n as f64;
    let mean_outcome = flat.iter().map(|t| t.outcome).sum::<f64>() * inv;
    let mean_token_count = flat.iter().map(|t| t.token_count as f64).sum::<f64>() * inv;
    let mean_combined_score = flat.iter().map(|t| t.combined_score).sum::<f64>() * inv;

    // Stage 2: online reward-model update from outcomes, then fresh token
    // rewards under the updated model.
    let mut bce_loss = f64::NAN;
    let mut kendall_tau = f64::NAN;
    let token_rewards_all: Option<Vec<Vec<Vec<f64>>>> = if cfg.strategy.uses_prm() {
        let items: Vec<PrmBatchItem> = flat
            .iter()
            .zip(&feats)
            .map(|(t, f)| PrmBatchItem {
                traj: t,
                feats: f,
                target: t.outcome,
            })
            .collect();
        let stats = prm_update(cfg.beta, prm, reference, &items, adam_prm, cfg.max_grad_norm, par)?;
        bce_loss = stats.loss;
        let rewards: Vec<Vec<Vec<f64>>> = map_indexed(n, par, |i| {
            crate::prm::token_rewards(cfg.beta, prm, reference, &feats[i], flat[i])
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let scores: Vec<f64> = rewards.iter().map(|r| crate::prm::trajectory_score(r)).collect();
        let outcomes: Vec<f64> = flat.iter().map(|t| t.outcome).collect();
        let (tau, _skipped) = mean_group_kendall(&scores, &outcomes, g)?;
        kendall_tau = tau;
        Some(rewards)
    } else {
        None
    };

    // Stage 3: per-trajectory credit attribution, then length shaping
    // (combined-score pressure): each cell pays γ_len per response token.
    let attr_root = root.derive_labeled("attr").derive(step);
    let mut attr_rows = Vec::with_capacity(n);
    let mut shaped: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut shaped_outcome: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (i, traj) in flat.iter().enumerate() {
        let turns = traj.turns.len();
        let tr = token_rewards_all.as_ref().map(|all| all[i].as_slice());
        let mut rng = attr_root.derive(i as u64).rng();
        let res = attribute(cfg.strategy, turns, tr, traj.outcome, cfg.eta, &mut rng)?;
        let cell_tokens: Vec<f64> = if cfg.strategy.token_granular() {
            vec![1.0; res.rewards.len()]
        } else {
            traj.turns
                .iter()
                .map(|t| t.response_tokens.len() as f64)
                .collect()
        };
        let shape = |rewards: &[f64]| -> Vec<f64> {
            rewards
                .iter()
                .zip(&cell_tokens)
                .map(|(r, c)| r - cfg.gamma_len * c)
                .collect()
        };
        shaped.push(shape(&res.rewards));
        shaped_outcome.push(shape(&trajectory_share(traj.outcome, res.rewards.len())));
        attr_rows.push(AttributionRow {
            traj_id: format!("step{step}_g{}_t{}", i / g, i % g),
            strategy: cfg.strategy,
            eta: res.eta,
            scores: tr.map(crate::prm::turn_scores),
            weights: res.weights,
            per_turn: res.rewards,
        });
    }

    // Stage 4a: advantages per group on both channels, mixed.
    let (w_implicit, w_outcome) = cfg.mixing_weights();
    let mut advantages: Vec<Vec<f64>> = Vec::with_capacity(n);
    for b in 0..batch.len() {
        let range = b * g..(b + 1) * g;
        let a_implicit = estimate_group(
            cfg.estimator,
            &shaped[range.clone()],
            value,
            &feats[range.clone()],
            cfg.gamma_disc,
            cfg.lambda_gae,
            cfg.eps_std,
        )?;
        let a_outcome = estimate_group(
            cfg.estimator,
            &shaped_outcome[range.clone()],
            value,
            &feats[range.clone()],
            cfg.gamma_disc,
            cfg.lambda_gae,
            cfg.eps_std,
        )?;
        let mixed = mix_advantages(&a_implicit, &a_outcome, w_implicit, w_outcome)?;
        advantages.extend(mixed.values);
    }

    // Critic regression toward Monte-Carlo returns-to-go of the shaped
    // rewards; stepped after advantages so this iteration's estimates use
    // the pre-step critic.
    if cfg.estimator == Estimator::Gae {
        let targets: Vec<Vec<f64>> = shaped
            .iter()
            .map(|r| returns_to_go(r, cfg.gamma_disc))
            .collect();
        let mut samples = Vec::with_capacity(n * cfg.turns);
        for i in 0..n {
            for k in 1..=flat[i].turns.len() {
                samples.push(ValueSample {
                    features: feats[i].turn_start(k),
                    target: targets[i][k - 1],
                });
            }
        }
        fit_value_head(value, &samples, cfg.lr_value)?;
    }

    // Stage 4b: one epoch of minibatched clipped policy updates.
    let token_granular = cfg.strategy.token_granular();
    let mut clipped_cells = 0.0;
    let mut total_cells = 0.0;
    let mut start = 0;
    while start < batch.len() {
        let end = (start + MINIBATCH_GROUPS).min(batch.len());
        let items: Vec<PpoBatchItem> = (start * g..end * g)
            .map(|i| PpoBatchItem {
                traj: flat[i],
                feats: &feats[i],
                advantages: &advantages[i],
            })
            .collect();
        let cells: usize = items.iter().map(|it| it.advantages.len()).sum();
        let update = policy_update(
            policy,
            anchor,
            &items,
            token_granular,
            cfg.eps_clip,
            cfg.kl_coeff,
            adam_policy,
            cfg.max_grad_norm,
            par,
        )?;
        clipped_cells += update.stats.clip_fraction * cells as f64;
        total_cells += cells as f64;
        start = end;
    }

    let pairs: Vec<(&Trajectory, &TrajFeatures)> =
        flat.iter().zip(&feats).map(|(t, f)| (*t, f)).collect();
    let mean_kl = mean_token_kl(policy, anchor, &pairs, par)?;

    state.step = step;
    Ok((
        IterationStats {
            step,
            mean_outcome,
            mean_token_count,
            mean_combined_score,
            bce_loss,
            kendall_tau,
            mean_kl,
            clip_fraction: clipped_cells / total_cells,
        },
        attr_rows,
    ))
}

/// A finished (or aborted-and-flushed) training run.
pub struct TrainRun {
    pub state: TrainState,
    pub history: Vec<IterationStats>,
    /// Present when the strategy trains the reward model.
    pub probe: Option<ProbeSet>,
    pub dir: PathBuf,
}

fn log_trajectories(dir: &Path, step: u64, batch: &[RolloutGroup]) -> Result<()> {
    let tdir = dir.join("trajectories");
    ensure_dir(&tdir)?;
    let mut w = JsonlWriter::create(&tdir.join(format!("step_{step}.jsonl")))?;
    for group in batch {
        for traj in &group.trajectories {
            w.append(&TrajectoryRecord::from_trajectory(traj))?;
        }
    }
    w.flush()
}

#[derive(Serialize)]
struct AbortReport<'a> {
    step: u64,
    error: String,
    dumped_batch: Option<&'a str>,
}

/// Run the full loop for `cfg.iterations` iterations, writing all artifacts
/// under `cfg.out_dir`. On any stage error the metrics written so far are
/// flushed, the offending batch (if rolled out) is dumped under `dump/`, and
/// the error is returned.
pub fn train_loop(cfg: &RunConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let dir = PathBuf::from(&cfg.out_dir);
    ensure_dir(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    let mut state = TrainState::new(cfg)?;
    let mut probe = if cfg.strategy.uses_prm() {
        let scripted = ScriptedPolicy::new(state.env.cfg, 0.5, 0.2);
        let mut p = ProbeSet::generate(
            &state.env,
            &state.fmap,
            &scripted,
            cfg.probe_prompts,
            cfg.probe_rollouts,
            cfg.probe_oracle_samples,
            PROBE_GOAL_OFFSET,
            state.root.derive_labeled("probe"),
            cfg.parallelism(),
        )?;
        p.rescore(0, cfg.beta, &state.prm, &state.reference, cfg.parallelism())?;
        Some(p)
    } else {
        None
    };

    let mut metrics = CsvWriter::create(&dir.join("metrics.csv"), &METRICS_COLUMNS)?;
    let mut attr_log = JsonlWriter::create(&dir.join("attribution.jsonl"))?;
    state.checkpoint(&dir, 0)?;

    let mut history = Vec::with_capacity(cfg.iterations);
    for step in 1..=cfg.iterations as u64 {
        let cadence = step % cfg.checkpoint_every as u64 == 0 || step == cfg.iterations as u64;
        let batch = match state.rollout_batch(step) {
            Ok(b) => b,
            Err(e) => return abort(dir, step, e, None, metrics, attr_log, probe),
        };
        let (stats, attr_rows) = match process_batch(&mut state, step, &batch) {
            Ok(out) => out,
            Err(e) => return abort(dir, step, e, Some(&batch), metrics, attr_log, probe),
        };
        metrics.row(&stats.csv_row(cfg.strategy, cfg.estimator))?;
        metrics.flush()?;
        history.push(stats);
        if let Some(p) = probe.as_mut() {
            p.rescore(step, cfg.beta, &state.prm, &state.reference, cfg.parallelism())?;
        }
        if cadence {
            state.checkpoint(&dir, step)?;
            log_trajectories(&dir, step, &batch)?;
            for row in &attr_rows {
                attr_log.append(row)?;
            }
            attr_log.flush()?;
        }
    }

    metrics.flush()?;
    attr_log.flush()?;
    if let Some(p) = probe.as_ref() {
        p.save(&dir)?;
    }
    write_manifest(&dir)?;
    Ok(TrainRun {
        state,
        history,
        probe,
        dir,
    })
}

/// Flush everything written so far, dump the offending batch, record the
/// error, and bubble it up.
fn abort<T>(
    dir: PathBuf,
    step: u64,
    err: Error,
    batch: Option<&[RolloutGroup]>,
    mut metrics: CsvWriter,
    mut attr_log: JsonlWriter,
    probe: Option<ProbeSet>,
) -> Result<T> {
    metrics.flush()?;
    attr_log.flush()?;
    if let Some(p) = probe.as_ref() {
        p.save(&dir)?;
    }
    let dump = dir.join("dump");
    ensure_dir(&dump)?;
    let mut dumped = None;
    if let Some(batch) = batch {
        let name = format!("batch_step_{step}.jsonl");
        let mut w = JsonlWriter::create(&dump.join(&name))?;
        for group in batch {
            for traj in &group.trajectories {
                w.append(&TrajectoryRecord::from_trajectory(traj))?;
            }
        }
        w.flush()?;
        dumped = Some(name);
    }
    write_json(
        &dump.join("error.json"),
        &AbortReport {
            step,
            error: err.to_string(),
            dumped_batch: dumped.as_deref(),
        },
    )?;
    Err(err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::file_sha256;
    use crate::model::read_params;

    fn tiny_cfg(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.groups = 4;
        cfg.rollouts = 4;
        cfg.iterations = 3;
        cfg.checkpoint_every = 2;
        cfg.probe_prompts = 2;
        cfg.probe_rollouts = 2;
        cfg.probe_oracle_samples = 2;
        cfg.eval_prompts = 2;
        cfg.eval_rollouts = 2;
        cfg.stability_window = 2;
        cfg.seed = 11;
        cfg.out_dir = dir.join("run").to_string_lossy().into_owned();
        cfg
    }

    #[test]
    fn loop_writes_all_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(tmp.path());
        let run = train_loop(&cfg).unwrap();
        assert_eq!(run.history.len(), 3);
        let steps: Vec<u64> = run.history.iter().map(|s| s.step).collect();
        assert_eq!(steps, vec![1, 2, 3]);
        for s in &run.history {
            assert!(s.mean_outcome.is_finite());
            assert!(s.mean_token_count > 0.0);
            assert!(s.bce_loss.is_finite(), "default strategy trains the PRM");
            assert!(s.mean_kl.is_finite());
            assert!((0.0..=1.0).contains(&s.clip_fraction));
        }
        let dir = &run.dir;
        assert!(dir.join("config.toml").exists());
        assert!(dir.join("metrics.csv").exists());
        assert!(dir.join("attribution.jsonl").exists());
        assert!(dir.join("manifest.txt").exists());
        // step_0 always; step_2 by cadence; step_3 as final.
        for s in [0u64, 2, 3] {
            let cdir = dir.join(format!("step_{s}"));
            for f in ["policy.bin", "prm.bin", "ref.bin", "value.bin", "state.json"] {
                assert!(cdir.join(f).exists(), "missing {f} at step {s}");
            }
        }
        assert!(!dir.join("step_1").exists());
        assert!(dir.join("trajectories/step_2.jsonl").exists());
        assert!(dir.join("trajectories/step_3.jsonl").exists());
        // Probe: snapshot at step 0 plus one per iteration.
        let probe = run.probe.as_ref().unwrap();
        assert_eq!(probe.snapshots.len(), 4);
        assert_eq!(probe.trajectories.len(), 4);
        assert!(dir.join("probe.json").exists());
        assert!(dir.join("probe_snapshots.jsonl").exists());
        // Checkpoint parameters round-trip bit-exactly.
        let (policy, step) = read_params(&dir.join("step_3/policy.bin")).unwrap();
        assert_eq!(step, 3);
        assert_eq!(policy, run.state.policy);
        let state: CheckpointState =
            crate::io::read_json(&dir.join("step_3/state.json")).unwrap();
        assert_eq!(state.step, 3);
        assert_eq!(state.config, cfg);
        // The manifest covers every file except itself.
        let manifest = std::fs::read_to_string(dir.join("manifest.txt")).unwrap();
        assert!(manifest.contains("metrics.csv"));
        assert!(manifest.contains("step_3/policy.bin"));
        assert!(!manifest.contains("manifest.txt"));
    }

    #[test]
    fn reruns_and_parallel_schedules_are_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let mut runs = Vec::new();
        for (name, par) in [("a", 0usize), ("b", 0), ("c", 1)] {
            let mut cfg = tiny_cfg(tmp.path());
            cfg.out_dir = tmp.path().join(name).to_string_lossy().into_owned();
            cfg.parallelism = par;
            train_loop(&cfg).unwrap();
            runs.push(PathBuf::from(cfg.out_dir));
        }
        let hash = |p: &Path| file_sha256(&p.join("metrics.csv")).unwrap();
        assert_eq!(hash(&runs[0]), hash(&runs[1]), "same-seed rerun diverged");
        assert_eq!(hash(&runs[0]), hash(&runs[2]), "parallel schedule changed results");
        let probe_hash = |p: &Path| file_sha256(&p.join("probe_snapshots.jsonl")).unwrap();
        assert_eq!(probe_hash(&runs[0]), probe_hash(&runs[2]));
    }

    #[test]
    fn zero_iterations_emit_header_and_initial_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(tmp.path());
        cfg.iterations = 0;
        let run = train_loop(&cfg).unwrap();
        assert!(run.history.is_empty());
        let metrics = std::fs::read_to_string(run.dir.join("metrics.csv")).unwrap();
        assert_eq!(metrics, format!("{}\n", METRICS_COLUMNS.join(",")));
        assert!(run.dir.join("step_0/policy.bin").exists());
        assert!(run.dir.join("manifest.txt").exists());
    }

    #[test]
    fn non_prm_strategy_skips_reward_model_and_probe() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(tmp.path());
        cfg.strategy = Strategy::TrajectoryShare;
        let run = train_loop(&cfg).unwrap();
        assert!(run.probe.is_none());
        assert!(!run.dir.join("probe.json").exists());
        for s in &run.history {
            assert!(s.bce_loss.is_nan());
            assert!(s.kendall_tau.is_nan());
        }
        // The reward model was never stepped.
        assert!(run.state.prm.w.iter().all(|&w| w == 0.0));
        let metrics = std::fs::read_to_string(run.dir.join("metrics.csv")).unwrap();
        assert!(metrics.contains("NaN"));
        assert!(metrics.contains("trajectory_share"));
    }

    #[test]
    fn token_level_and_dirichlet_strategies_run() {
        let tmp = tempfile::tempdir().unwrap();
        for (name, strategy, estimator) in [
            ("tok", Strategy::TokenLevel, Estimator::Grpo),
            ("dir", Strategy::UniformDirichlet, Estimator::Rloo),
            ("itpo", Strategy::Itpo, Estimator::Rloo),
        ] {
            let mut cfg = tiny_cfg(tmp.path());
            cfg.out_dir = tmp.path().join(name).to_string_lossy().into_owned();
            cfg.strategy = strategy;
            cfg.estimator = estimator;
            cfg.iterations = 2;
            let run = train_loop(&cfg).unwrap();
            assert_eq!(run.history.len(), 2);
        }
    }

    #[test]
    fn gae_path_trains_the_value_head() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(tmp.path());
        cfg.estimator = Estimator::Gae;
        let run = train_loop(&cfg).unwrap();
        assert!(
            run.state.value.w.iter().any(|&w| w != 0.0),
            "critic never moved"
        );
        let (value, _) = read_params(&run.dir.join("step_3/value.bin")).unwrap();
        assert_eq!(value, run.state.value);
    }

    #[test]
    fn divergence_aborts_with_a_batch_dump() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(tmp.path());
        cfg.estimator = Estimator::Gae;
        cfg.lr_value = 1e308;
        cfg.iterations = 6;
        let msg = match train_loop(&cfg) {
            Ok(_) => panic!("run with a divergent critic step should abort"),
            Err(e) => e.to_string(),
        };
        assert!(msg.contains("non-finite"), "unexpected error: {msg}");
        let dump = PathBuf::from(&cfg.out_dir).join("dump");
        assert!(dump.join("error.json").exists());
        let report: serde_json::Value =
            crate::io::read_json(&dump.join("error.json")).unwrap();
        let step = report["step"].as_u64().unwrap();
        assert!(step >= 1);
        let batch_file = dump.join(report["dumped_batch"].as_str().unwrap());
        assert!(batch_file.exists());
        let rows: Vec<TrajectoryRecord> = crate::io::read_jsonl(&batch_file).unwrap();
        assert_eq!(rows.len(), cfg.groups * cfg.rollouts);
        // Metrics for completed iterations were flushed before the abort.
        let metrics = std::fs::read_to_string(
            PathBuf::from(&cfg.out_dir).join("metrics.csv"),
        )
        .unwrap();
        assert_eq!(metrics.lines().count() as u64, step);
    }

    #[test]
    fn batch_is_shared_goal_grouped() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(tmp.path());
        let state = TrainState::new(&cfg).unwrap();
        let batch = state.rollout_batch(1).unwrap();
        assert_eq!(batch.len(), 4);
        for group in &batch {
            assert_eq!(group.trajectories.len(), 4);
            let goal = group.trajectories[0].goal.goal_id;
            assert!(group.trajectories.iter().all(|t| t.goal.goal_id == goal));
        }
        // Distinct groups draw distinct goals (seeds count up).
        let ids: std::collections::BTreeSet<u64> =
            batch.iter().map(|g| g.prompt_seed).collect();
        assert_eq!(ids.len(), 4);
    }
}
