use std::path::{Path, PathBuf};

use ganmark::{AugmentationConfig, CodecConfig, EmbedConfig, GanConfig, VerifyConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of training images.
    pub dataset: PathBuf,
    /// Where checkpoints, manifests and reports are written.
    pub output: PathBuf,
    /// Bilinearly resize dataset images of the wrong size instead of skipping them.
    pub resize: bool,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("out"),
            resize: false,
        }
    }
}

/// The whole pipeline configuration, one TOML document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Reference preset (`began`, `pggan`, `stylegan2`) applied to `embed`.
    pub preset: Option<String>,
    pub paths: Paths,
    pub codec: CodecConfig,
    pub gan: GanConfig,
    pub embed: EmbedConfig,
    pub augmentation: AugmentationConfig,
    pub verify: VerifyConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Failure::Validation(format!("config: {e}")))?;
        if let Some(p) = &cfg.preset {
            cfg.embed = cfg.embed.with_preset(p)?;
        }
        Ok(cfg)
    }

    /// Section-level checks plus cross-section consistency.
    pub fn validate(&self) -> Result<(), Failure> {
        self.codec.validate()?;
        self.gan.validate()?;
        self.embed.validate()?;
        self.augmentation.validate()?;
        self.verify.validate()?;
        if self.codec.image_size != self.gan.image_size {
            return Err(Failure::Validation(format!(
                "codec image_size {} differs from gan image_size {}",
                self.codec.image_size, self.gan.image_size
            )));
        }
        self.embed.watermark(self.codec.payload).map_err(|e| {
            Failure::Validation(format!("embed watermark does not fit a {}-bit payload: {e}", self.codec.payload))
        })?;
        Ok(())
    }
}
