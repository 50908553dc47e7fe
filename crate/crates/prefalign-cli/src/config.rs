use std::path::{Path, PathBuf};

use prefalign::losses::LossKind;
use prefalign::prefmodel::LabelMode;
use prefalign::trainer::Batch;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<SpaceSpec>,
    pub reward: RewardSpec,
    pub reference: ReferenceSpec,
    pub dataset: DatasetSpec,
    pub beta: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "one")]
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<LimitsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge: Option<BridgeSection>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    pub prompts: usize,
    pub responses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    File {
        path: PathBuf,
    },
    Random {
        low: f64,
        high: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    pub base: BaseReference,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<Corruption>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseReference {
    Uniform,
    Random {
        scale: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Logits equal to `scale` times the reward.
    Aligned {
        scale: f64,
    },
    File {
        path: PathBuf,
    },
}

/// Pushes a seeded `fraction` of the pairs past the Assumption boundary by `depth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    pub fraction: f64,
    #[serde(default = "default_depth")]
    pub depth: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_depth() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Sampled {
        pairs_per_prompt: usize,
        #[serde(default = "one_usize")]
        repeats: usize,
        #[serde(default = "bt_mode")]
        label_mode: LabelMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Population,
    File {
        path: PathBuf,
    },
}

fn one_usize() -> usize {
    1
}

fn bt_mode() -> LabelMode {
    LabelMode::LabeledByBtMode
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub losses: Vec<LossKind>,
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default = "one_usize")]
    pub record_every: usize,
    #[serde(default = "full")]
    pub batch: Batch,
    /// Replaces γ by this multiple of γ* (CPO) or γ*_cons (E-CPOC).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_star_multiple: Option<f64>,
}

fn full() -> Batch {
    Batch::Full
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

impl Default for SolveSection {
    fn default() -> Self {
        SolveSection { tol: default_tol(), max_iters: default_max_iters() }
    }
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iters() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsSection {
    pub betas: Vec<f64>,
    #[serde(default = "all_losses")]
    pub losses: Vec<LossKind>,
    #[serde(default = "default_grid")]
    pub delta_theta: Grid,
}

impl Default for LimitsSection {
    fn default() -> Self {
        LimitsSection { betas: vec![10.0, 100.0, 1000.0], losses: all_losses(), delta_theta: default_grid() }
    }
}

fn all_losses() -> Vec<LossKind> {
    vec![LossKind::Dpo, LossKind::Cpo, LossKind::Ecpoc]
}

fn default_grid() -> Grid {
    Grid { min: -4.0, max: 4.0, points: 41 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.min];
        }
        let step = (self.max - self.min) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.min + step * i as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeSection {
    pub eps_loss: f64,
    pub r0: f64,
    #[serde(default)]
    pub eps_approx: f64,
    #[serde(default = "dpo")]
    pub loss: LossKind,
    /// Policy whose pair deltas stand in for δ* when the instance is too large
    /// for grid search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_star_policy: Option<PathBuf>,
}

fn dpo() -> LossKind {
    LossKind::Dpo
}

/// A parsed config together with where it came from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub hash: String,
}

impl Loaded {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let mut config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        if let Some(s) = seed_override {
            config.seed = s;
        }
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = Loaded { hash: config_hash(&config), config, dir };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        let bad = |field: &str, msg: &str| Err(CliError::validation(format!("config field `{field}`: {msg}")));
        if !(c.beta > 0.0 && c.beta.is_finite()) {
            return bad("beta", "must be positive and finite");
        }
        if !(c.gamma >= 0.0 && c.gamma.is_finite()) {
            return bad("gamma", "must be non-negative and finite");
        }
        if !(c.tau > 0.0) {
            return bad("tau", "must be positive");
        }
        match &c.reward {
            RewardSpec::Random { low, high, .. } => {
                if !(low < high) || !low.is_finite() || !high.is_finite() {
                    return bad("reward.random", "need finite low < high");
                }
                if c.space.is_none() {
                    return bad("space", "required when the reward is random");
                }
            }
            RewardSpec::File { path } => self.check_exists("reward.file.path", path)?,
        }
        if let BaseReference::File { path } = &c.reference.base {
            self.check_exists("reference.base.file.path", path)?;
        }
        if let Some(k) = &c.reference.corruption {
            if !(0.0..=1.0).contains(&k.fraction) {
                return bad("reference.corruption.fraction", "must lie in [0, 1]");
            }
            if !(k.depth > 0.0 && k.depth.is_finite()) {
                return bad("reference.corruption.depth", "must be positive");
            }
        }
        if let DatasetSpec::File { path } = &c.dataset {
            self.check_exists("dataset.file.path", path)?;
        }
        if let Some(t) = &c.train {
            if t.losses.is_empty() {
                return bad("train.losses", "must name at least one loss");
            }
            if let Some(m) = t.gamma_star_multiple {
                if !(m >= 0.0 && m.is_finite()) {
                    return bad("train.gamma_star_multiple", "must be non-negative");
                }
            }
        }
        if let Some(l) = &c.limits {
            if l.betas.is_empty() || l.betas.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
                return bad("limits.betas", "need at least one positive beta");
            }
            if l.delta_theta.points == 0 || !(l.delta_theta.min <= l.delta_theta.max) {
                return bad("limits.delta_theta", "need points >= 1 and min <= max");
            }
        }
        if let Some(b) = &c.bridge {
            if !(b.eps_loss >= 0.0) || !(b.r0 > 0.0) || !(b.eps_approx >= 0.0) {
                return bad("bridge", "need eps_loss >= 0, r0 > 0, eps_approx >= 0");
            }
        }
        Ok(())
    }

    fn check_exists(&self, field: &str, p: &Path) -> Result<(), CliError> {
        let full = self.resolve(p);
        if full.is_file() {
            Ok(())
        } else {
            Err(CliError::validation(format!("config field `{field}`: {} does not exist", full.display())))
        }
    }
}

/// sha256 of the canonical JSON form, taken after any seed override.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the fields that determine the `generate` artifacts; later
/// subcommands compare it to decide whether their inputs are current.
pub fn generation_hash(config: &ExperimentConfig) -> String {
    let v = serde_json::json!({
        "seed": config.seed,
        "space": config.space,
        "reward": config.reward,
        "reference": config.reference,
        "dataset": config.dataset,
        "beta": config.beta,
        "gamma": config.gamma,
        "tau": config.tau,
    });
    hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("json value serializes")))
}
