//! Run configuration: every knob in one structured, serializable place.

use std::path::Path;

use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::metrics::LsdParams;
use crate::scrvq::ScRvqConfig;
use crate::velocity_net::UConformerConfig;
use crate::voicing::VoicingConfig;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub val_every: u64,
    pub save_every: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            steps: 500,
            batch_size: 4,
            lr: 1e-4,
            weight_decay: 0.0,
            val_every: 100,
            save_every: 100,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Early-stopping patience for stage 2, counted in validation rounds.
    pub stage2_patience: usize,
    pub stage3: StageConfig,
    /// Euler steps used when fine-tuning through the frozen converter.
    pub stage3_ode_steps: usize,
    /// Fine-tune through the frozen converter chain; when false, stage 3
    /// trains encoder/decoder on plain HR reconstruction instead.
    pub stage3_through_fec: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1: StageConfig { steps: 500, batch_size: 4, lr: 3e-4, ..StageConfig::default() },
            stage2: StageConfig { steps: 2000, batch_size: 8, lr: 1e-4, ..StageConfig::default() },
            stage2_patience: 5,
            stage3: StageConfig { steps: 500, batch_size: 2, lr: 1e-4, ..StageConfig::default() },
            stage3_ode_steps: 8,
            stage3_through_fec: true,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub train_utterances: usize,
    pub val_utterances: usize,
    pub test_utterances: usize,
    pub min_secs: f64,
    pub max_secs: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_utterances: 24,
            val_utterances: 4,
            test_utterances: 4,
            min_secs: 1.2,
            max_secs: 2.0,
        }
    }
}

/// Top-level configuration. Defaults describe the desk-scale profile;
/// [`RunConfig::paper_preset`] switches dimensions to the reference sizes.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Band limit used to synthesize LR inputs, Hz.
    pub lr_band_hz: f32,
    /// Training crop length in samples.
    pub crop_len: usize,
    pub codec: CodecConfig,
    pub scrvq: ScRvqConfig,
    pub velocity: UConformerConfig,
    pub flow: FlowConfig,
    pub voicing: VoicingConfig,
    pub metrics: LsdParams,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let codec = CodecConfig::default();
        let velocity = UConformerConfig {
            latent_dim: codec.latent_dim,
            cond_dim: codec.latent_dim,
            model_dim: 48,
            heads: 4,
            ffn_dim: 96,
            enc_layers: 2,
            dec_layers: 2,
            conv_kernel: 7,
            dropout: 0.0,
        };
        let scrvq = ScRvqConfig { latent_dim: codec.latent_dim, ..ScRvqConfig::default() };
        let voicing = VoicingConfig { hop: codec.hop(), ..VoicingConfig::default() };
        RunConfig {
            seed: 42,
            lr_band_hz: 4000.0,
            crop_len: 16_000,
            codec,
            scrvq,
            velocity,
            flow: FlowConfig::default(),
            voicing,
            metrics: LsdParams::default(),
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reference-scale dimensions (9x1024 quantizer, 1024-d latents,
    /// 256-wide 3+3 layer velocity network). Step counts stay configurable.
    pub fn paper_preset() -> Self {
        let mut cfg = RunConfig::default();
        cfg.codec.latent_dim = 1024;
        cfg.codec.channels = vec![32, 64, 128, 256];
        cfg.scrvq = ScRvqConfig {
            latent_dim: 1024,
            num_stages: 9,
            codebook_size: 1024,
            ..ScRvqConfig::default()
        };
        cfg.velocity = UConformerConfig::default();
        cfg
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("cannot parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.scrvq.validate()?;
        self.velocity.validate()?;
        self.flow.validate()?;
        if self.scrvq.latent_dim != self.codec.latent_dim {
            return Err(Error::config(format!(
                "quantizer latent dim {} != codec latent dim {}",
                self.scrvq.latent_dim, self.codec.latent_dim
            )));
        }
        if self.velocity.latent_dim != self.codec.latent_dim {
            return Err(Error::config(format!(
                "velocity latent dim {} != codec latent dim {}",
                self.velocity.latent_dim, self.codec.latent_dim
            )));
        }
        if self.voicing.hop != self.codec.hop() {
            return Err(Error::config(format!(
                "voicing hop {} != codec hop {}",
                self.voicing.hop,
                self.codec.hop()
            )));
        }
        if self.crop_len % self.codec.hop() != 0 {
            return Err(Error::config(format!(
                "crop length {} must be a multiple of the codec hop {}",
                self.crop_len,
                self.codec.hop()
            )));
        }
        if self.lr_band_hz <= 0.0 || self.lr_band_hz >= self.codec.sample_rate as f32 / 2.0 {
            return Err(Error::config("lr_band_hz must lie below Nyquist"));
        }
        if self.corpus.min_secs > self.corpus.max_secs {
            return Err(Error::config("corpus min_secs > max_secs"));
        }
        Ok(())
    }
}
