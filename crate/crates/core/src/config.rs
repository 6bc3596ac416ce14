//! The single run configuration file and its hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::pretrain::PretrainConfig;
use crate::promptgen::PromptConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub prompt: PromptConfig,
    /// Seed of pretraining and of single-seed commands.
    pub seed: u64,
    /// Seeds of multi-seed evaluation.
    pub seeds: Vec<u64>,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            prompt: PromptConfig::default(),
            seed: 1,
            seeds: vec![1, 2, 3],
            output: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.encoder.validate(self.corpus.image_side)?;
        self.pretrain.validate()?;
        self.prompt.validate(self.encoder.d)?;
        if self.prompt.m + 1 > self.encoder.max_len {
            return Err(Error::config("prompt.m", format!("m + 1 must fit the text length {}", self.encoder.max_len)));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        Ok(())
    }

    /// Parses and validates a JSON config; absent fields take defaults,
    /// unknown ones are rejected.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|source| Error::Json { context: origin.to_string(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded. The output directory is
    /// excluded so moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
