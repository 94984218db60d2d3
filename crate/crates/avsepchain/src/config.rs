//! Experiment configuration: presets, a flat `key = value` config file
//! format with strict key checking, and a stable hash for checkpoint
//! compatibility.

use crate::data::mix_seed;
use crate::error::{Error, Result};
use crate::fusion::{DominanceConfig, FusionStrategy, Modality};
use crate::losses::LossWeights;
use crate::separator::SeparatorConfig;
use crate::signal::N_MELS;
use crate::synthesizer::SynthesizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    pub initial_lr: f64,
    pub plateau_patience: u32,
    pub halving_factor: f64,
    pub stop_patience: u32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            initial_lr: 1.5e-4,
            plateau_patience: 3,
            halving_factor: 0.5,
            stop_patience: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationFlags {
    pub use_synthesizer: bool,
    pub use_matching_loss: bool,
    pub predict_complete: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { use_synthesizer: true, use_matching_loss: true, predict_complete: false }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub separator: SeparatorConfig,
    pub synthesizer: SynthesizerConfig,
    pub embed_dim: usize,
    pub frontend_seed: u64,
    pub n_units: usize,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub ablation: AblationFlags,
    /// Separator-only epochs before joint training.
    pub warm_start_epochs: usize,
}

impl ExperimentConfig {
    /// Desk-scale preset; trains in minutes on a small CPU.
    pub fn toy() -> Self {
        ExperimentConfig {
            separator: SeparatorConfig::toy(),
            synthesizer: SynthesizerConfig::toy(),
            embed_dim: 64,
            frontend_seed: 7,
            n_units: crate::frontends::DEFAULT_N_UNITS,
            weights: LossWeights::default(),
            optimizer: OptimizerConfig { initial_lr: 1e-3, ..OptimizerConfig::default() },
            batch_size: 8,
            max_epochs: 20,
            seed: 7,
            ablation: AblationFlags::default(),
            warm_start_epochs: 0,
        }
    }

    /// Published-scale preset.
    pub fn paper() -> Self {
        ExperimentConfig {
            separator: SeparatorConfig::paper(),
            synthesizer: SynthesizerConfig::paper(),
            embed_dim: 768,
            frontend_seed: 7,
            n_units: crate::frontends::DEFAULT_N_UNITS,
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 8,
            max_epochs: 200,
            seed: 7,
            ablation: AblationFlags::default(),
            warm_start_epochs: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.separator.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.synthesizer.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.embed_dim == 0 || self.n_units == 0 {
            return Err(Error::Config("embed_dim and n_units must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.optimizer.initial_lr > 0.0) || !(self.optimizer.halving_factor > 0.0) {
            return Err(Error::Config("optimizer rates must be positive".into()));
        }
        if self.ablation.predict_complete && !self.ablation.use_synthesizer {
            return Err(Error::Config(
                "predict_complete requires use_synthesizer".into(),
            ));
        }
        if self.weights.lambda < 0.0 || self.weights.margin < 0.0 || !(self.weights.epsilon > 0.0) {
            return Err(Error::Config("loss weights out of range".into()));
        }
        Ok(())
    }

    /// Canonical flat key-value rendering; also feeds the config hash.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let dom = |d: &DominanceConfig| (d.query.to_string(), d.kv.to_string());
        let (sq, skv) = dom(&self.separator.dominance);
        let (yq, ykv) = dom(&self.synthesizer.dominance);
        let strat = |s: FusionStrategy| match s {
            FusionStrategy::CrossAttention => "cross_attention",
            FusionStrategy::Concatenation => "concatenation",
            FusionStrategy::Summation => "summation",
        };
        vec![
            ("seed".into(), self.seed.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("max_epochs".into(), self.max_epochs.to_string()),
            ("warm_start_epochs".into(), self.warm_start_epochs.to_string()),
            ("separator.n_channels".into(), self.separator.n_channels.to_string()),
            ("separator.chunk_len".into(), self.separator.chunk_len.to_string()),
            ("separator.n_intra".into(), self.separator.n_intra.to_string()),
            ("separator.n_inter".into(), self.separator.n_inter.to_string()),
            ("separator.n_repeats".into(), self.separator.n_repeats.to_string()),
            ("separator.encoder_kernel".into(), self.separator.encoder_kernel.to_string()),
            ("separator.encoder_stride".into(), self.separator.encoder_stride.to_string()),
            ("separator.n_heads".into(), self.separator.n_heads.to_string()),
            ("separator.ff_dim".into(), self.separator.ff_dim.to_string()),
            ("separator.fusion".into(), strat(self.separator.fusion).into()),
            ("separator.query_modality".into(), sq),
            ("separator.kv_modality".into(), skv),
            ("synthesizer.proj_dim".into(), self.synthesizer.proj_dim.to_string()),
            (
                "synthesizer.conv_channels".into(),
                format!(
                    "{},{},{}",
                    self.synthesizer.conv_channels.0,
                    self.synthesizer.conv_channels.1,
                    self.synthesizer.conv_channels.2
                ),
            ),
            ("synthesizer.conv_kernel".into(), self.synthesizer.conv_kernel.to_string()),
            ("synthesizer.fusion".into(), strat(self.synthesizer.fusion).into()),
            ("synthesizer.query_modality".into(), yq),
            ("synthesizer.kv_modality".into(), ykv),
            ("frontend.embed_dim".into(), self.embed_dim.to_string()),
            ("frontend.seed".into(), self.frontend_seed.to_string()),
            ("frontend.n_units".into(), self.n_units.to_string()),
            ("loss.lambda".into(), fmt_f64(self.weights.lambda)),
            ("loss.margin".into(), fmt_f64(self.weights.margin)),
            ("loss.epsilon".into(), fmt_f64(self.weights.epsilon)),
            ("loss.clamp_db".into(), fmt_f64(self.weights.clamp_db)),
            ("optimizer.initial_lr".into(), fmt_f64(self.optimizer.initial_lr)),
            ("optimizer.plateau_patience".into(), self.optimizer.plateau_patience.to_string()),
            ("optimizer.halving_factor".into(), fmt_f64(self.optimizer.halving_factor)),
            ("optimizer.stop_patience".into(), self.optimizer.stop_patience.to_string()),
            ("ablation.use_synthesizer".into(), self.ablation.use_synthesizer.to_string()),
            ("ablation.use_matching_loss".into(), self.ablation.use_matching_loss.to_string()),
            ("ablation.predict_complete".into(), self.ablation.predict_complete.to_string()),
        ]
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_key_values() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Stable hash of the canonical rendering.
    pub fn config_hash(&self) -> u64 {
        let mut kv = self.to_key_values();
        kv.sort();
        let text: String = kv.into_iter().map(|(k, v)| format!("{k}={v};")).collect();
        mix_seed(0x4156_5345, &text)
    }

    /// Parse the flat config format. Lines are `key = value`, `#` starts a
    /// comment, `preset = toy|paper` resets every field, later keys override
    /// earlier ones, and unknown keys are errors.
    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::toy();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", ln + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", ln + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for {key}")))
        }
        let modality = |v: &str| -> Result<Modality> {
            match v {
                "audio" => Ok(Modality::Audio),
                "video" => Ok(Modality::Video),
                other => Err(Error::Config(format!("unknown modality `{other}`"))),
            }
        };
        let strategy = |v: &str| -> Result<FusionStrategy> {
            match v {
                "cross_attention" => Ok(FusionStrategy::CrossAttention),
                "concatenation" => Ok(FusionStrategy::Concatenation),
                "summation" => Ok(FusionStrategy::Summation),
                other => Err(Error::Config(format!("unknown fusion strategy `{other}`"))),
            }
        };
        match key {
            "preset" => {
                *self = match value {
                    "toy" => ExperimentConfig::toy(),
                    "paper" => ExperimentConfig::paper(),
                    other => return Err(Error::Config(format!("unknown preset `{other}`"))),
                };
            }
            "seed" => self.seed = p(value, key)?,
            "batch_size" => self.batch_size = p(value, key)?,
            "max_epochs" => self.max_epochs = p(value, key)?,
            "warm_start_epochs" => self.warm_start_epochs = p(value, key)?,
            "separator.n_channels" => self.separator.n_channels = p(value, key)?,
            "separator.chunk_len" => self.separator.chunk_len = p(value, key)?,
            "separator.n_intra" => self.separator.n_intra = p(value, key)?,
            "separator.n_inter" => self.separator.n_inter = p(value, key)?,
            "separator.n_repeats" => self.separator.n_repeats = p(value, key)?,
            "separator.encoder_kernel" => self.separator.encoder_kernel = p(value, key)?,
            "separator.encoder_stride" => self.separator.encoder_stride = p(value, key)?,
            "separator.n_heads" => self.separator.n_heads = p(value, key)?,
            "separator.ff_dim" => self.separator.ff_dim = p(value, key)?,
            "separator.fusion" => self.separator.fusion = strategy(value)?,
            "separator.query_modality" => self.separator.dominance.query = modality(value)?,
            "separator.kv_modality" => self.separator.dominance.kv = modality(value)?,
            "synthesizer.proj_dim" => self.synthesizer.proj_dim = p(value, key)?,
            "synthesizer.conv_channels" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::Config("conv_channels expects three values".into()));
                }
                self.synthesizer.conv_channels =
                    (p(parts[0], key)?, p(parts[1], key)?, p(parts[2], key)?);
            }
            "synthesizer.conv_kernel" => self.synthesizer.conv_kernel = p(value, key)?,
            "synthesizer.fusion" => self.synthesizer.fusion = strategy(value)?,
            "synthesizer.query_modality" => self.synthesizer.dominance.query = modality(value)?,
            "synthesizer.kv_modality" => self.synthesizer.dominance.kv = modality(value)?,
            "frontend.embed_dim" => self.embed_dim = p(value, key)?,
            "frontend.seed" => self.frontend_seed = p(value, key)?,
            "frontend.n_units" => self.n_units = p(value, key)?,
            "loss.lambda" => self.weights.lambda = p(value, key)?,
            "loss.margin" => self.weights.margin = p(value, key)?,
            "loss.epsilon" => self.weights.epsilon = p(value, key)?,
            "loss.clamp_db" => self.weights.clamp_db = p(value, key)?,
            "optimizer.initial_lr" => self.optimizer.initial_lr = p(value, key)?,
            "optimizer.plateau_patience" => self.optimizer.plateau_patience = p(value, key)?,
            "optimizer.halving_factor" => self.optimizer.halving_factor = p(value, key)?,
            "optimizer.stop_patience" => self.optimizer.stop_patience = p(value, key)?,
            "ablation.use_synthesizer" => self.ablation.use_synthesizer = p(value, key)?,
            "ablation.use_matching_loss" => self.ablation.use_matching_loss = p(value, key)?,
            "ablation.predict_complete" => self.ablation.predict_complete = p(value, key)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        // the synthesizer consumes the mel extractor's fixed band count
        self.synthesizer.mel_dim = N_MELS;
        Ok(())
    }

    /// Build the chain model and its parameter store.
    pub fn build(&self) -> Result<(crate::chain::ChainModel, crate::params::ParamStore)> {
        self.validate()?;
        let mut store = crate::params::ParamStore::new();
        let synth = if self.ablation.use_synthesizer { Some(self.synthesizer) } else { None };
        let model = crate::chain::ChainModel::new(
            self.separator,
            synth,
            crate::frontends::FrontendSpec::oracle_audio(self.embed_dim, self.frontend_seed),
            crate::frontends::FrontendSpec::oracle_video(self.embed_dim, self.frontend_seed),
            self.n_units,
            self.weights,
            self.ablation.use_matching_loss,
            self.ablation.predict_complete,
            self.seed,
            &mut store,
        )?;
        Ok((model, store))
    }
}

fn fmt_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v:e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_file_format() {
        let cfg = ExperimentConfig::toy();
        let text = cfg.to_file_string();
        let back = ExperimentConfig::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.config_hash(), back.config_hash());
    }

    #[test]
    fn unknown_key_is_error() {
        let err = ExperimentConfig::from_str("separator.n_channels = 64\nbogus_key = 1\n");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn bad_value_is_error() {
        assert!(ExperimentConfig::from_str("batch_size = many\n").is_err());
        assert!(ExperimentConfig::from_str("separator.fusion = wavelets\n").is_err());
    }

    #[test]
    fn preset_then_override() {
        let cfg = ExperimentConfig::from_str("preset = paper\nbatch_size = 2\n").unwrap();
        assert_eq!(cfg.separator.n_channels, 256);
        assert_eq!(cfg.batch_size, 2);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = ExperimentConfig::from_str("# hello\n\nseed = 99 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 99);
    }

    #[test]
    fn predict_complete_without_synth_rejected() {
        let err = ExperimentConfig::from_str(
            "ablation.use_synthesizer = false\nablation.predict_complete = true\n",
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn hash_changes_with_config() {
        let a = ExperimentConfig::toy();
        let mut b = a.clone();
        b.separator.n_channels = 128;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn paper_preset_matches_published_shapes() {
        let cfg = ExperimentConfig::paper();
        assert_eq!(cfg.separator.n_channels, 256);
        assert_eq!(cfg.separator.chunk_len, 160);
        assert_eq!(cfg.separator.n_intra, 8);
        assert_eq!(cfg.separator.n_inter, 7);
        assert_eq!(cfg.separator.n_repeats, 2);
        assert_eq!(cfg.synthesizer.proj_dim, 256);
        assert_eq!(cfg.synthesizer.conv_channels, (256, 128, 160));
        assert_eq!(cfg.synthesizer.conv_kernel, 7);
        assert_eq!(cfg.embed_dim, 768);
        assert_eq!(cfg.weights.margin, 0.5);
        assert_eq!(cfg.weights.lambda, 1.0);
        assert_eq!(cfg.optimizer.initial_lr, 1.5e-4);
    }
}
