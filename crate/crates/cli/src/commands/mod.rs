//! Command implementations, callable in-process.

pub mod eval;
pub mod fdk;
pub mod fit;
pub mod gen_data;
pub mod gradcheck;
pub mod iterative;
pub mod report;
pub mod train;

use std::path::Path;
use std::time::Instant;

use anyhow::Result;
use serde::{Deserialize, Serialize};

/// Auxiliary per-reconstruction record consumed by `report`. Wall time lives
/// here, outside the primary (byte-reproducible) outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodMeta {
    pub method: String,
    pub scan: String,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

impl MethodMeta {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

pub(crate) struct Stopwatch(Instant);

impl Stopwatch {
    pub fn start() -> Self {
        Stopwatch(Instant::now())
    }

    pub fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Derive a stable sub-seed for (master seed, stream name, index).
pub(crate) fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    let mut h = cbnt_core::rng::mix(master);
    for b in stream.as_bytes() {
        h = cbnt_core::rng::mix(h ^ *b as u64);
    }
    cbnt_core::rng::mix(h ^ index)
}
