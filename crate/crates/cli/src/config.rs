use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use c2p::consensus::ConsensusConfig;
use c2p::model::ModelConfig;
use c2p::semknow::{HttpTextEncoder, MllmConfig, MockEncoder, TextEncoder, D_TEXT};
use c2p::synthdata::StyleSpec;
use c2p::trainer::{InferenceMode, TrainConfig};
use clap::Args;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Checkpoints, metrics and the resolved config go here.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub consensus: ConsensusConfig,
    pub semantic: SemanticConfig,
    pub mllm: MllmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            consensus: ConsensusConfig::default(),
            semantic: SemanticConfig::default(),
            mllm: MllmConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Folder datasets (`images/`, `masks/`, optional `embeddings/` and
    /// `manifest.jsonl`). Unset means an in-memory synthetic set.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    /// Square side images are generated at or resized to.
    pub size: usize,
    pub synthetic_train: usize,
    pub synthetic_val: usize,
    pub seed: u64,
    pub styles: Vec<StyleSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: None,
            val_dir: None,
            size: 64,
            synthetic_train: 2000,
            synthetic_val: 200,
            seed: 0,
            styles: StyleSpec::defaults(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Mock,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticConfig {
    pub encoder: EncoderKind,
    /// OpenAI-compatible embeddings endpoint for the `http` encoder.
    pub endpoint: Option<String>,
    pub model: String,
    pub dim: usize,
    pub timeout_secs: u64,
    pub api_key_env: String,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Mock,
            endpoint: None,
            model: "text-embedding-3-small".into(),
            dim: D_TEXT,
            timeout_secs: 60,
            api_key_env: "EMBEDDING_API_KEY".into(),
        }
    }
}

impl SemanticConfig {
    pub fn encoder(&self) -> Result<Box<dyn TextEncoder>> {
        Ok(match self.encoder {
            EncoderKind::Mock => Box::new(MockEncoder { dim: self.dim }),
            EncoderKind::Http => {
                let Some(ep) = &self.endpoint else {
                    bail!(c2p::Error::Config("semantic.endpoint is required for the http encoder".into()));
                };
                Box::new(HttpTextEncoder::new(
                    ep,
                    &self.model,
                    self.dim,
                    std::env::var(&self.api_key_env).ok(),
                    std::time::Duration::from_secs(self.timeout_secs),
                ))
            }
        })
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).map_err(|e| anyhow::anyhow!(c2p::Error::Config(format!("{}: {e}", path.display()))))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.consensus.validate()?;
        if self.data.size == 0 || self.data.size % 32 != 0 {
            bail!(c2p::Error::Config(format!("data.size must be a positive multiple of 32, got {}", self.data.size)));
        }
        if self.data.styles.is_empty() {
            bail!(c2p::Error::Config("data.styles must not be empty".into()));
        }
        for s in &self.data.styles {
            s.validate()?;
        }
        if self.model.encoder.input_size != self.data.size {
            bail!(c2p::Error::Config(format!(
                "model.encoder.input_size {} differs from data.size {}",
                self.model.encoder.input_size, self.data.size
            )));
        }
        Ok(())
    }
}

/// Flags that override config-file values.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// none, tta or geometry_aware.
    #[arg(long)]
    pub inference: Option<InferenceMode>,
    /// Consensus penalty sharpness.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Disable false-positive suppression in consensus.
    #[arg(long)]
    pub no_suppression: bool,
    #[arg(long)]
    pub train_dir: Option<PathBuf>,
    #[arg(long)]
    pub val_dir: Option<PathBuf>,
    /// Turn off GEO tokens.
    #[arg(long)]
    pub no_geo_tokens: bool,
    /// Turn off SEM tokens.
    #[arg(long)]
    pub no_sem_tokens: bool,
    /// Use the static head instead of dynamic kernels.
    #[arg(long)]
    pub static_head: bool,
}

impl Overrides {
    /// Defaults, then the file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.out {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.train.lr = v;
        }
        if let Some(v) = self.seed {
            c.train.seed = v;
        }
        if let Some(v) = self.max_steps {
            c.train.max_steps = Some(v);
        }
        if let Some(v) = self.inference {
            c.train.inference = v;
        }
        if let Some(v) = self.lambda {
            c.consensus.lambda = v;
        }
        if self.no_suppression {
            c.consensus.suppression = false;
        }
        if let Some(v) = &self.train_dir {
            c.data.train_dir = Some(v.clone());
        }
        if let Some(v) = &self.val_dir {
            c.data.val_dir = Some(v.clone());
        }
        if self.no_geo_tokens {
            c.model.ablation.use_geo_tokens = false;
        }
        if self.no_sem_tokens {
            c.model.ablation.use_sem_tokens = false;
        }
        if self.static_head {
            c.model.ablation.use_dynamic_head = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::parse("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(e.contains("learning_rate"), "{e}");
        let e = RunConfig::parse("colour = 1\n").unwrap_err();
        assert!(e.contains("colour"), "{e}");
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nlr = 0.01\nepochs = 3\n").unwrap();
        let o = Overrides {
            config: Some(p),
            epochs: Some(7),
            ..Default::default()
        };
        let c = o.resolve().unwrap();
        assert_eq!((c.train.lr, c.train.epochs, c.train.batch_size), (0.01, 7, 8));
    }
}
