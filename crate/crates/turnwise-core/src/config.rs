//! Run configuration: a flat TOML document with every knob of the
//! environment, the models, the reward pipeline, the optimizer, and the
//! harness. Loading fills defaults, applies `TURNWISE_*` environment
//! overrides, rejects unknown keys, and re-validates every constraint the
//! owning modules impose, naming the offending field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::advantage::Estimator;
use crate::attribution::{Strategy, MIN_ETA};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::exec::Parallelism;

/// Prefix for environment-variable overrides; `TURNWISE_BETA=0.01`
/// overrides the `beta` key.
pub const ENV_PREFIX: &str = "TURNWISE_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // --- environment ---
    /// Turns per episode (K).
    pub turns: usize,
    /// Goal digits / answer length (M).
    pub digits: usize,
    /// Vocabulary size (V), including control tokens.
    pub vocab: usize,
    /// Per-token corruption probability of non-pivotal hints.
    pub p_noise: f64,
    /// Per-token length penalty on the combined score.
    pub gamma_len: f64,

    // --- reward pipeline ---
    /// Token reward scale on the log-likelihood ratio.
    pub beta: f64,
    /// Softmax temperature for outcome redistribution.
    pub eta: f64,
    /// Credit attribution strategy.
    pub strategy: Strategy,
    /// Advantage estimator.
    pub estimator: Estimator,
    /// Weight on the attribution-channel advantages; strategy-dependent
    /// default when omitted.
    pub w_implicit: Option<f64>,
    /// Weight on the broadcast-outcome-channel advantages; strategy-dependent
    /// default when omitted.
    pub w_outcome: Option<f64>,

    // --- optimization ---
    /// Discount on future per-turn rewards (GAE).
    pub gamma_disc: f64,
    /// GAE trace decay.
    pub lambda_gae: f64,
    /// PPO clip radius.
    pub eps_clip: f64,
    /// Standardization floor for the GRPO denominator.
    pub eps_std: f64,
    /// Coefficient of the mean-token KL penalty against the initial policy.
    pub kl_coeff: f64,
    pub lr_policy: f64,
    pub lr_prm: f64,
    pub lr_value: f64,
    /// Global-norm gradient clip for policy and reward-model updates.
    pub max_grad_norm: f64,

    // --- batching ---
    /// Rollout groups per iteration (B).
    pub groups: usize,
    /// Trajectories per group (G).
    pub rollouts: usize,
    /// Training iterations (N).
    pub iterations: usize,

    // --- harness ---
    pub seed: u64,
    /// Checkpoint/trajectory-log cadence in iterations.
    pub checkpoint_every: usize,
    /// Frozen probe set: prompts × rollouts trajectories.
    pub probe_prompts: usize,
    pub probe_rollouts: usize,
    /// Paired continuations per turn when labeling probe trajectories with
    /// the counterfactual oracle.
    pub probe_oracle_samples: usize,
    /// Evaluation: prompts × rollouts over a held-out goal-seed range.
    pub eval_prompts: usize,
    pub eval_rollouts: usize,
    /// Trailing steps averaged into the converged allocation for stability.
    pub stability_window: usize,
    /// 0 = default pool, 1 = sequential, n = dedicated pool of n threads.
    pub parallelism: usize,
    /// Run directory for metrics, checkpoints, probes, and logs.
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            turns: 4,
            digits: 3,
            vocab: 16,
            p_noise: 0.3,
            gamma_len: 5e-6,
            beta: 5e-3,
            eta: 0.4,
            strategy: Strategy::NormItpo,
            estimator: Estimator::Rloo,
            w_implicit: None,
            w_outcome: None,
            gamma_disc: 1.0,
            lambda_gae: 0.95,
            eps_clip: 0.2,
            eps_std: 1e-8,
            kl_coeff: 1e-3,
            lr_policy: 0.1,
            lr_prm: 1e-2,
            lr_value: 0.1,
            max_grad_norm: 10.0,
            groups: 16,
            rollouts: 8,
            iterations: 300,
            seed: 0,
            checkpoint_every: 100,
            probe_prompts: 50,
            probe_rollouts: 8,
            probe_oracle_samples: 8,
            eval_prompts: 16,
            eval_rollouts: 32,
            stability_window: 70,
            parallelism: 0,
            out_dir: "runs/default".into(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v <= 0.0 {
        return Err(Error::Config(format!("{name} must be finite and > 0, got {v}")));
    }
    Ok(())
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
    }
    Ok(())
}

impl RunConfig {
    /// The environment slice of the configuration (validated).
    pub fn env_config(&self) -> Result<EnvConfig> {
        let cfg = EnvConfig {
            turns: self.turns,
            digits: self.digits,
            vocab: self.vocab,
            p_noise: self.p_noise,
            gamma_len: self.gamma_len,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Effective `(w_implicit, w_outcome)` mixing weights. Strategies whose
    /// rewards already embed the outcome default to a pure implicit channel
    /// (5, 0); raw-score strategies blend in the outcome channel (5, 5).
    pub fn mixing_weights(&self) -> (f64, f64) {
        let (di, do_) = match self.strategy {
            Strategy::Itpo | Strategy::TokenLevel => (5.0, 5.0),
            Strategy::NormItpo | Strategy::TrajectoryShare | Strategy::UniformDirichlet => {
                (5.0, 0.0)
            }
        };
        (self.w_implicit.unwrap_or(di), self.w_outcome.unwrap_or(do_))
    }

    pub fn parallelism(&self) -> Parallelism {
        Parallelism::from_flag(self.parallelism)
    }

    /// Re-validate every module constraint, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        self.env_config()?;
        positive("beta", self.beta)?;
        if !self.eta.is_finite() || self.eta < MIN_ETA {
            return Err(Error::Config(format!(
                "eta must be finite and ≥ {MIN_ETA}, got {}",
                self.eta
            )));
        }
        if !self.gamma_disc.is_finite() || self.gamma_disc <= 0.0 || self.gamma_disc > 1.0 {
            return Err(Error::Config(format!(
                "gamma_disc must lie in (0, 1], got {}",
                self.gamma_disc
            )));
        }
        if !self.lambda_gae.is_finite() || !(0.0..=1.0).contains(&self.lambda_gae) {
            return Err(Error::Config(format!(
                "lambda_gae must lie in [0, 1], got {}",
                self.lambda_gae
            )));
        }
        if !self.eps_clip.is_finite() || self.eps_clip <= 0.0 || self.eps_clip >= 1.0 {
            return Err(Error::Config(format!(
                "eps_clip must lie in (0, 1), got {}",
                self.eps_clip
            )));
        }
        positive("eps_std", self.eps_std)?;
        nonnegative("kl_coeff", self.kl_coeff)?;
        positive("lr_policy", self.lr_policy)?;
        positive("lr_prm", self.lr_prm)?;
        positive("lr_value", self.lr_value)?;
        positive("max_grad_norm", self.max_grad_norm)?;
        let (wi, wo) = self.mixing_weights();
        nonnegative("w_implicit", wi)?;
        nonnegative("w_outcome", wo)?;
        if wi + wo == 0.0 {
            return Err(Error::Config(
                "w_implicit and w_outcome must not both be 0".into(),
            ));
        }
        if self.strategy == Strategy::TokenLevel && self.estimator == Estimator::Gae {
            return Err(Error::Config(
                "estimator = gae requires turn-shaped rewards; strategy = token_level \
                 produces token-shaped cells"
                    .into(),
            ));
        }
        if self.groups < 1 {
            return Err(Error::Config("groups must be ≥ 1".into()));
        }
        if self.rollouts < 2 {
            return Err(Error::Config(format!(
                "rollouts must be ≥ 2 for group-relative baselines, got {}",
                self.rollouts
            )));
        }
        if self.checkpoint_every < 1 {
            return Err(Error::Config("checkpoint_every must be ≥ 1".into()));
        }
        if self.probe_prompts < 1 || self.probe_rollouts < 2 {
            return Err(Error::Config(format!(
                "probe needs ≥ 1 prompts and ≥ 2 rollouts per prompt, got {} × {}",
                self.probe_prompts, self.probe_rollouts
            )));
        }
        if self.probe_oracle_samples < 1 {
            return Err(Error::Config("probe_oracle_samples must be ≥ 1".into()));
        }
        if self.eval_prompts < 1 || self.eval_rollouts < 1 {
            return Err(Error::Config(format!(
                "eval needs ≥ 1 prompts and ≥ 1 rollouts, got {} × {}",
                self.eval_prompts, self.eval_rollouts
            )));
        }
        if self.stability_window < 1 {
            return Err(Error::Config("stability_window must be ≥ 1".into()));
        }
        if self.out_dir.is_empty() {
            return Err(Error::Config("out_dir must not be empty".into()));
        }
        Ok(())
    }

    /// Parse a TOML document, apply `TURNWISE_*` overrides from `env_vars`,
    /// fill defaults, and validate.
    pub fn from_toml_with_env(text: &str, env_vars: &[(String, String)]) -> Result<RunConfig> {
        let mut table: toml::Table = text.parse()?;
        for (key, raw) in env_vars {
            let Some(suffix) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let field = suffix.to_ascii_lowercase();
            // Values parse as TOML literals; bare words (strategy names,
            // paths) fall back to strings.
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.clone()));
            table.insert(field, value);
        }
        let cfg: RunConfig = table.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from a file, applying overrides from the process environment.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let env_vars: Vec<(String, String)> = std::env::vars().collect();
        RunConfig::from_toml_with_env(&text, &env_vars)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_all_defaults() {
        let cfg = RunConfig::from_toml_with_env("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.rollouts, 8);
        assert_eq!(cfg.groups, 16);
        assert_eq!(cfg.beta, 5e-3);
        assert_eq!(cfg.eta, 0.4);
        assert_eq!(cfg.kl_coeff, 1e-3);
        assert_eq!(cfg.gamma_len, 5e-6);
        assert_eq!(cfg.gamma_disc, 1.0);
        assert_eq!(cfg.mixing_weights(), (5.0, 0.0));
    }

    #[test]
    fn mixing_defaults_follow_strategy() {
        let mut cfg = RunConfig::default();
        cfg.strategy = Strategy::Itpo;
        assert_eq!(cfg.mixing_weights(), (5.0, 5.0));
        cfg.strategy = Strategy::TokenLevel;
        assert_eq!(cfg.mixing_weights(), (5.0, 5.0));
        cfg.strategy = Strategy::TrajectoryShare;
        assert_eq!(cfg.mixing_weights(), (5.0, 0.0));
        cfg.w_outcome = Some(2.5);
        assert_eq!(cfg.mixing_weights(), (5.0, 2.5));
    }

    #[test]
    fn invalid_fields_are_named() {
        let err = RunConfig::from_toml_with_env("eta = -1.0", &[]).unwrap_err();
        assert!(err.to_string().contains("eta"), "{err}");
        let err = RunConfig::from_toml_with_env("beta = 0.0", &[]).unwrap_err();
        assert!(err.to_string().contains("beta"), "{err}");
        let err = RunConfig::from_toml_with_env("p_noise = 1.0", &[]).unwrap_err();
        assert!(err.to_string().contains("p_noise"), "{err}");
        let err = RunConfig::from_toml_with_env("rollouts = 1", &[]).unwrap_err();
        assert!(err.to_string().contains("rollouts"), "{err}");
        let err =
            RunConfig::from_toml_with_env("strategy = \"token_level\"\nestimator = \"gae\"", &[])
                .unwrap_err();
        assert!(err.to_string().contains("token_level"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_with_env("betta = 0.01", &[]).unwrap_err();
        assert!(err.to_string().contains("betta"), "{err}");
        let err = RunConfig::from_toml_with_env(
            "",
            &[("TURNWISE_BETTA".into(), "0.01".into())],
        )
        .unwrap_err();
        assert!(err.to_string().contains("betta"), "{err}");
    }

    #[test]
    fn env_overrides_beat_file_values() {
        let vars = vec![
            ("TURNWISE_BETA".to_string(), "0.05".to_string()),
            ("TURNWISE_STRATEGY".to_string(), "itpo".to_string()),
            ("TURNWISE_SEED".to_string(), "9".to_string()),
            ("TURNWISE_OUT_DIR".to_string(), "runs/x".to_string()),
            ("UNRELATED".to_string(), "ignored".to_string()),
        ];
        let cfg = RunConfig::from_toml_with_env("beta = 0.001\nseed = 1", &vars).unwrap();
        assert_eq!(cfg.beta, 0.05);
        assert_eq!(cfg.strategy, Strategy::Itpo);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.out_dir, "runs/x");
    }

    #[test]
    fn serialization_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.strategy = Strategy::UniformDirichlet;
        cfg.estimator = Estimator::Grpo;
        cfg.w_implicit = Some(3.0);
        cfg.beta = 1e-2;
        cfg.seed = 1234;
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml_with_env(&text, &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_fill_remaining_defaults() {
        let cfg =
            RunConfig::from_toml_with_env("iterations = 2\nout_dir = \"runs/smoke\"", &[]).unwrap();
        assert_eq!(cfg.iterations, 2);
        assert_eq!(cfg.out_dir, "runs/smoke");
        assert_eq!(cfg.turns, 4);
        assert_eq!(cfg.eval_rollouts, 32);
    }
}
