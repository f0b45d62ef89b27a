//! Command-level entry points behind the CLI verbs: training runs,
//! checkpoint evaluation on held-out prompts, strategy × estimator sweeps
//! over shared seed lists, and post-hoc diagnostics over a run's probe
//! snapshots.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advantage::Estimator;
use crate::attribution::{softmax_weights, Strategy};
use crate::config::RunConfig;
use crate::diagnostics::{
    mean_group_kendall, pivotal_agreement, slope_regression, stability_track, Agreement, ProbeSet,
};
use crate::env::{Environment, ModelPolicy, RolloutModels, TokenContext, TokenPolicy};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::io::{ensure_dir, float_cell, read_json, write_manifest, CsvWriter, JsonlWriter};
use crate::model::{read_params, FeatureMap, ModelTag, ParamMatrix};
use crate::rng::{Rng, Stream};
use crate::train::{train_loop, CheckpointState, TrainRun, TrainState, EVAL_GOAL_OFFSET};

/// Run training end to end (alias kept at the command layer).
pub fn run_train(cfg: &RunConfig) -> Result<TrainRun> {
    train_loop(cfg)
}

/// Mean evaluation metrics over held-out prompts.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub prompts: usize,
    pub rollouts_per_prompt: usize,
    pub mean_outcome: f64,
    pub mean_token_count: f64,
    pub mean_combined_score: f64,
}

fn load_checkpoint_model(
    dir: &Path,
    file: &str,
    tag: ModelTag,
    rows: usize,
    cols: usize,
) -> Result<ParamMatrix> {
    let (params, _) = read_params(&dir.join(file))?;
    if params.rows != rows || params.cols != cols || params.tag != tag {
        return Err(Error::Checkpoint(format!(
            "{file}: shape {}×{} tagged {:?}, config expects {rows}×{cols} {tag:?}",
            params.rows, params.cols, params.tag
        )));
    }
    Ok(params)
}

/// Evaluate a checkpointed policy in greedy mode: `eval_prompts` held-out
/// goals × `eval_rollouts` episodes each. Writes `eval.csv` under the run
/// directory (one row per prompt plus an overall row) and refreshes the
/// manifest when one exists.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let env = Environment::new(cfg.env_config()?)?;
    let fmap = FeatureMap::new(cfg.vocab, cfg.turns);
    let d = fmap.dim();
    let policy_params =
        load_checkpoint_model(checkpoint, "policy.bin", ModelTag::Policy, d, cfg.vocab)?;
    let prm = load_checkpoint_model(checkpoint, "prm.bin", ModelTag::Prm, d, cfg.vocab)?;
    let reference =
        load_checkpoint_model(checkpoint, "ref.bin", ModelTag::Reference, d, cfg.vocab)?;
    let policy = ModelPolicy {
        params: &policy_params,
        fmap: &fmap,
        greedy: true,
    };
    let models = RolloutModels {
        policy: &policy,
        prm: &prm,
        reference: &reference,
        fmap: &fmap,
    };
    let stream = Stream::from_seed(cfg.seed).derive_labeled("eval");
    let prompts = cfg.eval_prompts;
    let rollouts = cfg.eval_rollouts;
    let per_prompt = map_indexed(prompts, cfg.parallelism(), |p| -> Result<(f64, f64, f64)> {
        let group = env.rollout(
            &models,
            EVAL_GOAL_OFFSET + p as u64,
            rollouts.max(2),
            stream.derive(p as u64),
            Parallelism::Sequential,
        )?;
        let taken = &group.trajectories[..rollouts.min(group.trajectories.len())];
        let inv = 1.0 / taken.len() as f64;
        Ok((
            taken.iter().map(|t| t.outcome).sum::<f64>() * inv,
            taken.iter().map(|t| t.token_count as f64).sum::<f64>() * inv,
            taken.iter().map(|t| t.combined_score).sum::<f64>() * inv,
        ))
    });
    let out_dir = PathBuf::from(&cfg.out_dir);
    ensure_dir(&out_dir)?;
    let mut csv = CsvWriter::create(
        &out_dir.join("eval.csv"),
        &[
            "scope",
            "mean_outcome",
            "mean_token_count",
            "mean_combined_score",
        ],
    )?;
    let mut sums = (0.0, 0.0, 0.0);
    for (p, row) in per_prompt.into_iter().enumerate() {
        let (o, n, s) = row?;
        csv.row(&[
            format!("prompt_{p}"),
            float_cell(o),
            float_cell(n),
            float_cell(s),
        ])?;
        sums = (sums.0 + o, sums.1 + n, sums.2 + s);
    }
    let inv = 1.0 / prompts as f64;
    let report = EvalReport {
        prompts,
        rollouts_per_prompt: rollouts,
        mean_outcome: sums.0 * inv,
        mean_token_count: sums.1 * inv,
        mean_combined_score: sums.2 * inv,
    };
    csv.row(&[
        "overall".to_string(),
        float_cell(report.mean_outcome),
        float_cell(report.mean_token_count),
        float_cell(report.mean_combined_score),
    ])?;
    csv.flush()?;
    if out_dir.join("manifest.txt").exists() {
        write_manifest(&out_dir)?;
    }
    Ok(report)
}

/// Monte-Carlo estimate of the uniform-random policy's mean outcome over
/// the evaluation goal range (`n` independent episodes, one goal each).
pub fn uniform_policy_baseline(cfg: &RunConfig, n: usize, par: Parallelism) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("baseline sample count must be ≥ 1".into()));
    }
    let env = Environment::new(cfg.env_config()?)?;
    let fmap = FeatureMap::new(cfg.vocab, cfg.turns);
    let d = fmap.dim();
    let params = ParamMatrix::zeros(d, cfg.vocab, ModelTag::Policy);
    let prm = ParamMatrix::zeros(d, cfg.vocab, ModelTag::Prm);
    let reference = ParamMatrix::zeros(d, cfg.vocab, ModelTag::Reference);
    let policy = ModelPolicy {
        params: &params,
        fmap: &fmap,
        greedy: false,
    };
    let models = RolloutModels {
        policy: &policy,
        prm: &prm,
        reference: &reference,
        fmap: &fmap,
    };
    let stream = Stream::from_seed(cfg.seed).derive_labeled("baseline");
    let outcomes = map_indexed(n, par, |i| -> Result<f64> {
        let goal = env.goal(EVAL_GOAL_OFFSET + i as u64);
        let traj = env.rollout_one(&models, &goal, stream.derive(i as u64))?;
        Ok(traj.outcome)
    });
    let mut sum = 0.0;
    for o in outcomes {
        sum += o?;
    }
    Ok(sum / n as f64)
}

/// Decodes the final turn greedily and every earlier turn by sampling.
///
/// Used for attribution probes: a sampled final turn injects answer-draw
/// luck into every counterfactual delta, drowning out the contribution of
/// the turns that gathered the information. Making the answer a
/// deterministic function of the context pins the final turn's own
/// counterfactual delta to zero, so the oracle ranks the earlier turns —
/// the same turns a per-turn credit allocation is supposed to rank.
struct GreedyFinalTurn<'a> {
    sampled: ModelPolicy<'a>,
    greedy: ModelPolicy<'a>,
    final_turn: usize,
}

impl TokenPolicy for GreedyFinalTurn<'_> {
    fn sample_token(&self, ctx: &TokenContext, rng: &mut Rng) -> Result<(usize, f64)> {
        if ctx.turn_index == self.final_turn {
            self.greedy.sample_token(ctx, rng)
        } else {
            self.sampled.sample_token(ctx, rng)
        }
    }
}

/// Agreement between the trained reward model's turn credit and the
/// counterfactual oracle, on a fresh probe rolled from the trained policy
/// with the final turn decoded greedily.
#[allow(clippy::too_many_arguments)]
pub fn convergence_agreement(
    state: &TrainState,
    prompts: usize,
    rollouts: usize,
    oracle_samples: usize,
    par: Parallelism,
) -> Result<Agreement> {
    // The probe rolls from the trained policy itself so the reward model is
    // scored on the data distribution it was fitted to; a hand-scripted probe
    // would measure extrapolation far off-distribution instead of learned
    // attribution. The counterfactual oracle runs under the same policy,
    // keeping the per-trajectory pivotal-turn definition self-consistent.
    let probe_policy = GreedyFinalTurn {
        sampled: ModelPolicy {
            params: &state.policy,
            fmap: &state.fmap,
            greedy: false,
        },
        greedy: ModelPolicy {
            params: &state.policy,
            fmap: &state.fmap,
            greedy: true,
        },
        final_turn: state.env.cfg.turns,
    };
    let mut probe = ProbeSet::generate(
        &state.env,
        &state.fmap,
        &probe_policy,
        prompts,
        rollouts,
        oracle_samples,
        crate::train::PROBE_GOAL_OFFSET + (1 << 20),
        state.root.derive_labeled("agreement"),
        par,
    )?;
    probe.rescore(state.step + 1, state.cfg.beta, &state.prm, &state.reference, par)?;
    let snap = probe.snapshots.last().unwrap();
    // Compare the allocation itself (softmax weights), not the distributed
    // rewards w·R: scaling by the outcome preserves the argmax whenever
    // R > 0 and collapses every zero-outcome row into an uninformative tie.
    let rows: Vec<Vec<f64>> = snap
        .turn_scores
        .iter()
        .map(|scores| softmax_weights(scores, state.cfg.eta))
        .collect::<Result<_>>()?;
    pivotal_agreement(&rows, &probe.oracle_pivotal)
}

/// One cell of a sweep matrix.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub strategy: Strategy,
    pub estimator: Estimator,
}

/// A sweep: every cell runs once per seed (seeds shared across cells, so
/// comparisons are paired).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub seeds: Vec<u64>,
    pub cells: Vec<SweepCell>,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<SweepSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let spec: SweepSpec = toml::from_str(&text)?;
        if spec.seeds.is_empty() || spec.cells.is_empty() {
            return Err(Error::Config(
                "sweep needs at least one seed and one cell".into(),
            ));
        }
        Ok(spec)
    }
}

/// Aggregated results of one sweep cell.
#[derive(Clone, Debug, Serialize)]
pub struct SweepCellResult {
    pub cell: SweepCell,
    pub seeds_completed: usize,
    pub failures: usize,
    pub mean_outcome: f64,
    pub std_outcome: f64,
    pub mean_token_count: f64,
    pub std_token_count: f64,
    pub mean_combined_score: f64,
    pub std_combined_score: f64,
}

#[derive(Serialize)]
struct SweepFailure<'a> {
    strategy: &'a str,
    estimator: &'a str,
    seed: u64,
    error: String,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Run every (cell × seed) training + final evaluation, aggregate per cell,
/// and write `sweep.csv` (and `failures.jsonl` when any run failed) under
/// `out_dir`. Individual failures are recorded and the sweep continues.
pub fn run_sweep(
    base: &RunConfig,
    spec: &SweepSpec,
    out_dir: &Path,
) -> Result<Vec<SweepCellResult>> {
    ensure_dir(out_dir)?;
    let mut results = Vec::with_capacity(spec.cells.len());
    let mut failures: Vec<(SweepCell, u64, Error)> = Vec::new();
    for cell in &spec.cells {
        let mut outcomes = Vec::new();
        let mut tokens = Vec::new();
        let mut combined = Vec::new();
        for &seed in &spec.seeds {
            let mut cfg = base.clone();
            cfg.strategy = cell.strategy;
            cfg.estimator = cell.estimator;
            cfg.seed = seed;
            cfg.out_dir = out_dir
                .join(format!(
                    "{}_{}/seed_{seed}",
                    cell.strategy.as_str(),
                    cell.estimator.as_str()
                ))
                .to_string_lossy()
                .into_owned();
            let attempt = train_loop(&cfg).and_then(|run| {
                let final_step = run.state.step;
                run_eval(&cfg, &run.dir.join(format!("step_{final_step}")))
            });
            match attempt {
                Ok(report) => {
                    outcomes.push(report.mean_outcome);
                    tokens.push(report.mean_token_count);
                    combined.push(report.mean_combined_score);
                }
                Err(e) => failures.push((*cell, seed, e)),
            }
        }
        let (mean_outcome, std_outcome) = mean_std(&outcomes);
        let (mean_token_count, std_token_count) = mean_std(&tokens);
        let (mean_combined_score, std_combined_score) = mean_std(&combined);
        results.push(SweepCellResult {
            cell: *cell,
            seeds_completed: outcomes.len(),
            failures: spec.seeds.len() - outcomes.len(),
            mean_outcome,
            std_outcome,
            mean_token_count,
            std_token_count,
            mean_combined_score,
            std_combined_score,
        });
    }
    let mut csv = CsvWriter::create(
        &out_dir.join("sweep.csv"),
        &[
            "strategy",
            "estimator",
            "seeds",
            "failures",
            "mean_outcome",
            "std_outcome",
            "mean_token_count",
            "std_token_count",
            "mean_combined_score",
            "std_combined_score",
        ],
    )?;
    for r in &results {
        csv.row(&[
            r.cell.strategy.as_str().to_string(),
            r.cell.estimator.as_str().to_string(),
            r.seeds_completed.to_string(),
            r.failures.to_string(),
            float_cell(r.mean_outcome),
            float_cell(r.std_outcome),
            float_cell(r.mean_token_count),
            float_cell(r.std_token_count),
            float_cell(r.mean_combined_score),
            float_cell(r.std_combined_score),
        ])?;
    }
    csv.flush()?;
    if !failures.is_empty() {
        let mut log = JsonlWriter::create(&out_dir.join("failures.jsonl"))?;
        for (cell, seed, err) in &failures {
            log.append(&SweepFailure {
                strategy: cell.strategy.as_str(),
                estimator: cell.estimator.as_str(),
                seed: *seed,
                error: err.to_string(),
            })?;
        }
        log.flush()?;
    }
    Ok(results)
}

/// Paths of the four diagnostics CSVs derived from a run directory.
#[derive(Clone, Debug)]
pub struct DiagnoseOutput {
    pub kendall: PathBuf,
    pub stability: PathBuf,
    pub slopes: PathBuf,
    pub agreement: PathBuf,
}

/// Re-derive analysis CSVs from a run's frozen probe and snapshots:
/// `kendall.csv` (within-group score/outcome rank correlation per step),
/// `stability.csv` (convergence and adjacency Spearman series),
/// `slopes.csv` (per-group score-vs-outcome OLS slope; NaN marks groups
/// with outcome-degenerate rows), and `agreement.csv` (credit argmax vs
/// counterfactual oracle, with tie rate and the 1/K chance baseline).
pub fn run_diagnose(run_dir: &Path) -> Result<DiagnoseOutput> {
    let state: CheckpointState = read_json(&run_dir.join("step_0/state.json")).map_err(|_| {
        Error::Diagnostics(format!(
            "{} does not look like a run directory (missing step_0/state.json)",
            run_dir.display()
        ))
    })?;
    let cfg = state.config;
    let env = Environment::new(cfg.env_config()?)?;
    let fmap = FeatureMap::new(cfg.vocab, cfg.turns);
    if !run_dir.join("probe.json").exists() {
        return Err(Error::Diagnostics(format!(
            "{} has no probe snapshots (strategy {} does not train the reward model)",
            run_dir.display(),
            cfg.strategy.as_str()
        )));
    }
    let probe = ProbeSet::load(run_dir, &env, &fmap)?;
    if probe.snapshots.is_empty() {
        return Err(Error::Diagnostics("probe has no snapshots".into()));
    }
    let outcomes: Vec<f64> = probe.trajectories.iter().map(|t| t.outcome).collect();

    let kendall_path = run_dir.join("kendall.csv");
    let mut kendall = CsvWriter::create(&kendall_path, &["step", "mean_tau"])?;
    for snap in &probe.snapshots {
        let scores = ProbeSet::trajectory_scores(snap);
        let (tau, _) = mean_group_kendall(&scores, &outcomes, probe.group_size)?;
        kendall.row(&[snap.step.to_string(), float_cell(tau)])?;
    }
    kendall.flush()?;

    let stability_path = run_dir.join("stability.csv");
    let mut stability = CsvWriter::create(
        &stability_path,
        &["step", "conv_spearman", "adj_spearman"],
    )?;
    if probe.snapshots.len() < cfg.stability_window {
        stability.comment(&format!(
            "warning: {} snapshots < stability window {}; series empty",
            probe.snapshots.len(),
            cfg.stability_window
        ))?;
    } else {
        let series: Vec<Vec<Vec<f64>>> = probe
            .snapshots
            .iter()
            .map(|s| s.turn_scores.clone())
            .collect();
        let track = stability_track(&series, cfg.stability_window)?;
        for (i, snap) in probe.snapshots.iter().enumerate() {
            stability.row(&[
                snap.step.to_string(),
                float_cell(track.conv[i]),
                float_cell(track.adj[i]),
            ])?;
        }
    }
    stability.flush()?;

    let slopes_path = run_dir.join("slopes.csv");
    let mut slopes = CsvWriter::create(&slopes_path, &["step", "group_id", "slope"])?;
    for snap in &probe.snapshots {
        let scores = ProbeSet::trajectory_scores(snap);
        for (gid, range) in probe.groups() {
            let points: Vec<(f64, f64)> = range
                .clone()
                .map(|i| (outcomes[i], scores[i]))
                .collect();
            let slope = slope_regression(&points)?;
            slopes.row(&[
                snap.step.to_string(),
                gid.to_string(),
                float_cell(slope.unwrap_or(f64::NAN)),
            ])?;
        }
    }
    slopes.flush()?;

    let agreement_path = run_dir.join("agreement.csv");
    let mut agreement = CsvWriter::create(
        &agreement_path,
        &["step", "strategy", "agreement", "tie_rate", "random_baseline"],
    )?;
    for snap in &probe.snapshots {
        // Compare the allocation itself (softmax weights), not the
        // distributed rewards w·R: scaling by the outcome preserves the
        // argmax whenever R > 0 and collapses every zero-outcome row into
        // an uninformative tie.
        let norm_rows: Vec<Vec<f64>> = snap
            .turn_scores
            .iter()
            .map(|scores| softmax_weights(scores, cfg.eta))
            .collect::<Result<_>>()?;
        for (label, rows) in [
            ("itpo", &snap.turn_scores),
            ("norm_itpo", &norm_rows),
        ] {
            let a = pivotal_agreement(rows, &probe.oracle_pivotal)?;
            agreement.row(&[
                snap.step.to_string(),
                label.to_string(),
                float_cell(a.agreement),
                float_cell(a.tie_rate),
                float_cell(a.random_baseline),
            ])?;
        }
    }
    agreement.flush()?;

    if run_dir.join("manifest.txt").exists() {
        write_manifest(run_dir)?;
    }
    Ok(DiagnoseOutput {
        kendall: kendall_path,
        stability: stability_path,
        slopes: slopes_path,
        agreement: agreement_path,
    })
}
