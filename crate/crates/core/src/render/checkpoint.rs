//! Parameter checkpoints as TOML key-value text.
//!
//! ```toml
//! kind = "fm"              # "fm" | "impact" | "latent"
//! voices = 4
//! log_fm_matrix = [ ... ]  # (voices + 1) * voices, row-major
//! raw_ratios = [ ... ]
//! raw_attacks = [ ... ]
//! raw_decays = [ ... ]
//! ```
//!
//! Impact checkpoints carry `amplitudes`, `dampings`, `frequencies`,
//! `reverb_amplitudes`, `reverb_dampings`, `reverb_centres`, `noise_seed`.
//! Latent checkpoints carry `channels`, `frames` and one `values` array per
//! source. All values are raw, pre-mapping parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FmParams, ImpactParams};
use crate::error::{Error, Result};
use crate::separation::LatentSourceParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RendererParams {
    Fm(FmParams),
    Impact(ImpactParams),
    Latent(LatentSourceParams),
}

impl RendererParams {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Configuration(format!("checkpoint encode: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Configuration(format!("checkpoint decode: {e}")))
    }
}

pub fn save_params(params: &RendererParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, params.to_toml()?)?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<RendererParams> {
    RendererParams::from_toml(&fs::read_to_string(path)?)
}
