//! Run configuration: every default is embedded, any field can be set from a
//! TOML file and a few can be overridden from the command line.

use std::path::{Path, PathBuf};

use forcegain_core::datagen::{ForceAugment, ScriptedConfig};
use forcegain_core::envsim::TaskConfig;
use forcegain_core::seqmodel::{Backbone, ModelConfig, TrainConfig};
use forcegain_core::transfer::{FinetuneConfig, PolicyKind};
use serde::{Deserialize, Serialize};

use crate::{Failure, Result};

/// Offsets of the per-command episode-seed streams inside one run seed.
pub const SEED_STRIDE: u64 = 1_000_000;
pub const EVAL_SEEDS: u64 = 500_000;
pub const ABLATE_SEEDS: u64 = 600_000;
pub const FINETUNE_SEEDS: u64 = 700_000;
pub const FINETUNE_HELD_SEEDS: u64 = 710_000;
pub const FINETUNE_EVAL_SEEDS: u64 = 720_000;

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Dataset directory; defaults to `<out>/data`.
    pub data_dir: Option<PathBuf>,
    /// Checkpoint directory; defaults to `<out>/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
    pub task: TaskConfig,
    pub collect: CollectConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub finetune: FinetuneSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data_dir: None,
            checkpoint_dir: None,
            task: TaskConfig::default(),
            collect: CollectConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            finetune: FinetuneSection::default(),
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    /// Built-in preset name or path to a preset TOML file.
    pub preset: String,
    pub episodes: u64,
    pub scripted: ScriptedConfig,
    pub augment: ForceAugment,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            preset: "train_nominal".into(),
            episodes: 500,
            scripted: ScriptedConfig::default(),
            augment: ForceAugment::default(),
        }
    }
}

/// Architecture knobs; bounds on gains and motion come from `[task]`.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub window: usize,
    pub embed_width: usize,
    pub backbone: Backbone,
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection { window: m.window, embed_width: m.embed_width, backbone: m.backbone, hidden: m.hidden }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Also train the single-model baseline.
    pub joint: bool,
    /// Every n-th collected episode (with its augmented copies) is held out.
    pub held_out_every: usize,
    /// Cap on held-out rows scored at each log interval.
    pub held_out_rows: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            log_every: t.log_every,
            checkpoint_every: t.checkpoint_every,
            joint: true,
            held_out_every: 10,
            held_out_rows: 2_000,
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub presets: Vec<String>,
    pub policies: Vec<PolicyKind>,
    pub episodes: u64,
    /// Stiffness of the `fixed_gain` baseline (N/m).
    pub fixed_gain: f64,
    /// Conditioning return; unset uses the value stored with the checkpoints.
    pub target_return: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            presets: ["train_nominal", "shifted_scale_low", "shifted_scale_high", "shifted_friction", "clearance_005"]
                .map(String::from)
                .to_vec(),
            policies: vec![PolicyKind::FpGt, PolicyKind::JointDt, PolicyKind::FixedGain],
            episodes: 50,
            fixed_gain: 300.0,
            target_return: None,
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub preset: String,
    pub factors: Vec<f64>,
    pub seeds: u64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { preset: "train_nominal".into(), factors: vec![0.0, 0.5, 1.0, 1.5, 2.0], seeds: 20 }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub preset: String,
    /// Scripted trajectories collected on the preset for fine-tuning.
    pub trajectories: u64,
    /// Further scripted trajectories used only to score the force head.
    pub held_out: u64,
    /// Evaluation episodes before and after fine-tuning.
    pub episodes: u64,
    /// About as many passes over ten trajectories as the main run makes over
    /// its dataset; much longer runs overfit the small set.
    pub steps: u64,
    pub lr_divisor: f64,
    pub batch_size: usize,
    pub log_every: u64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        FinetuneSection {
            preset: "shifted_scale_high".into(),
            trajectories: 10,
            held_out: 10,
            episodes: 50,
            steps: f.steps,
            lr_divisor: f.lr_divisor,
            batch_size: f.batch_size,
            log_every: f.log_every,
        }
    }
}

/// Command-line values that replace configuration fields.
#[derive(Clone, Default, PartialEq, Debug)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub episodes: Option<u64>,
    pub steps: Option<u64>,
    pub presets: Option<Vec<String>>,
    pub policies: Option<Vec<PolicyKind>>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Command {
    Collect,
    Train,
    Eval,
    Ablate,
    Finetune,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Collect => "collect",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Finetune => "finetune",
        }
    }
}

fn single_preset(presets: &[String], cmd: Command) -> Result<String> {
    match presets {
        [one] => Ok(one.clone()),
        _ => Err(Failure::usage(format!("{} takes exactly one --preset", cmd.name()))),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Failure::usage(format!("invalid configuration: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Failure::Usage(err) => Failure::Usage(err.context(format!("in {}", path.display()))),
            other => other,
        })
    }

    /// Apply flags for `cmd`; flags that mean nothing for it are usage errors.
    pub fn apply(&mut self, cmd: Command, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(n) = o.episodes {
            match cmd {
                Command::Collect => self.collect.episodes = n,
                Command::Eval => self.eval.episodes = n,
                Command::Ablate => self.ablate.seeds = n,
                Command::Finetune => self.finetune.trajectories = n,
                Command::Train => return Err(Failure::usage("train does not take --episodes")),
            }
        }
        if let Some(n) = o.steps {
            match cmd {
                Command::Train => self.train.steps = n,
                Command::Finetune => self.finetune.steps = n,
                _ => return Err(Failure::usage(format!("{} does not take --steps", cmd.name()))),
            }
        }
        if let Some(p) = &o.presets {
            match cmd {
                Command::Collect => self.collect.preset = single_preset(p, cmd)?,
                Command::Eval => self.eval.presets = p.clone(),
                Command::Ablate => self.ablate.preset = single_preset(p, cmd)?,
                Command::Finetune => self.finetune.preset = single_preset(p, cmd)?,
                Command::Train => return Err(Failure::usage("train does not take --preset")),
            }
        }
        if let Some(p) = &o.policies {
            match cmd {
                Command::Eval => self.eval.policies = p.clone(),
                _ => return Err(Failure::usage(format!("{} does not take --policies", cmd.name()))),
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.train.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Failure::usage("batch_size must be positive"));
        }
        if !(self.train.lr > 0.0) || !(self.finetune.lr_divisor > 0.0) {
            return Err(Failure::usage("learning rates must be positive"));
        }
        if self.train.log_every == 0 || self.finetune.log_every == 0 {
            return Err(Failure::usage("log_every must be positive"));
        }
        if self.eval.presets.is_empty() || self.eval.policies.is_empty() {
            return Err(Failure::usage("eval needs at least one preset and one policy"));
        }
        if self.ablate.factors.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
            return Err(Failure::usage("ablation factors must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint_dir.clone().unwrap_or_else(|| self.out.join("checkpoints"))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            window: self.model.window,
            embed_width: self.model.embed_width,
            backbone: self.model.backbone,
            hidden: self.model.hidden.clone(),
            ..ModelConfig::for_task(&self.task)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            seed: self.seed,
            log_every: self.train.log_every,
            checkpoint_every: self.train.checkpoint_every,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            steps: self.finetune.steps,
            lr_divisor: self.finetune.lr_divisor,
            base_lr: self.train.lr,
            batch_size: self.finetune.batch_size,
            seed: self.seed ^ 0x6674,
            log_every: self.finetune.log_every,
        }
    }

    /// `n` consecutive episode seeds of one stream.
    pub fn seeds(&self, stream: u64, n: u64) -> Vec<u64> {
        let base = self.seed.wrapping_mul(SEED_STRIDE).wrapping_add(stream);
        (0..n).map(|i| base.wrapping_add(i)).collect()
    }

    pub fn augment_seed(&self) -> u64 {
        self.seed ^ 0x6175_676d
    }
}
