use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sidrec_core::data::SyntheticParams;
use sidrec_core::eval::Sid2Rule;
use sidrec_core::inference::InferenceConfig;
use sidrec_core::model::ModelConfig;
use sidrec_core::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub catalog: Option<PathBuf>,
    pub sequences: Option<PathBuf>,
    pub assignments: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub k: usize,
    pub top_n: usize,
    pub iters: usize,
    /// Also fit each modality on its own and report it in the collision CSV.
    pub per_modality: bool,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            k: 256,
            top_n: 50,
            iters: 20,
            per_modality: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub sid2_rule: Sid2Rule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub layers: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { layers: vec![1, 2, 4] }
    }
}

/// Everything a subcommand may read. When `seed` is set it replaces the
/// per-section seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: PathBuf,
    pub paths: Paths,
    pub data: SyntheticParams,
    pub tokenizer: TokenizerSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            threads: None,
            out_dir: PathBuf::from("artifacts"),
            paths: Paths::default(),
            data: SyntheticParams::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Seed shared by data generation, tokenization, initialisation,
    /// splitting and shuffling.
    pub fn master_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.data.seed = s;
            self.train.seed = s;
        }
    }

    /// The tokenizer and the SID heads share one codebook size.
    pub fn set_codebook_size(&mut self, k: usize) {
        self.tokenizer.k = k;
        self.model.codebook_size = k;
    }

    pub fn check_codebook_size(&self) -> Result<()> {
        anyhow::ensure!(
            self.tokenizer.k == self.model.codebook_size,
            "tokenizer.k ({}) and model.codebook_size ({}) differ",
            self.tokenizer.k,
            self.model.codebook_size
        );
        Ok(())
    }

    pub fn catalog_path(&self) -> PathBuf {
        self.paths.catalog.clone().unwrap_or_else(|| self.out_dir.join("items.jsonl"))
    }

    pub fn sequences_path(&self) -> PathBuf {
        self.paths
            .sequences
            .clone()
            .unwrap_or_else(|| self.out_dir.join("sequences.jsonl"))
    }

    pub fn assignments_path(&self) -> PathBuf {
        self.paths
            .assignments
            .clone()
            .unwrap_or_else(|| self.out_dir.join("assignments.csv"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoint"))
    }

    /// Stem of the `.bin`/`.ids` pair.
    pub fn embeddings_stem(&self) -> PathBuf {
        self.paths
            .embeddings
            .clone()
            .unwrap_or_else(|| self.out_dir.join("item_embeddings"))
    }
}
