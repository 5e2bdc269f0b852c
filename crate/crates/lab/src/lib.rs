//! Host side of the insertion lab: run configuration, presets on disk,
//! trajectory and checkpoint files, CSV reports and the `forcegain` commands.
//!
//! A run lives in one output directory:
//!
//! ```text
//! <out>/config.<command>.toml      snapshot of the resolved configuration
//! <out>/data/raw.jsonl             scripted trajectories, one JSON object per line
//! <out>/data/augmented.jsonl       force-augmented copies
//! <out>/data/manifest.json         provenance and SHA-256 of the two files above
//! <out>/checkpoints/{gt,fp,joint}.json
//! <out>/train/loss_curve.csv       gain tuner and force planner
//! <out>/train/joint_loss_curve.csv
//! <out>/eval/{success_matrix,episodes}.csv
//! <out>/ablate/{traces,summary}.csv
//! <out>/finetune/{summary,loss_curve}.csv and checkpoints/fp_finetuned.json
//! ```
//!
//! Rerunning a command with its snapshot reproduces every CSV byte for byte.

pub mod commands;
pub mod config;
pub mod presets;
pub mod report;
pub mod store;

use std::fmt;

pub use config::RunConfig;

/// Error of a command, split by the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration (exit code 1).
    Usage(anyhow::Error),
    /// Anything that went wrong while running (exit code 2).
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Failure::Usage(anyhow::anyhow!("{msg}"))
    }

    pub fn runtime(msg: impl fmt::Display) -> Self {
        Failure::Runtime(anyhow::anyhow!("{msg}"))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<forcegain_core::Error> for Failure {
    fn from(e: forcegain_core::Error) -> Self {
        match e {
            forcegain_core::Error::Usage(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

pub type Result<T> = std::result::Result<T, Failure>;
