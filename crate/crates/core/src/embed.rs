//! Watermark embedding: fine-tune a warmed-up generator so that a frozen
//! decoder reads the owner's bits from everything it produces.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::bits::{bit_accuracy, hard_threshold, BitString, SoftBits};
use crate::checkpoint::{self, Container};
use crate::codec::{bce, FrozenDecoder};
use crate::error::{invalid, Error, Result};
use crate::gan::{
    build_gan, reference_preset, sample_latent, BatchSampler, Gan, GanCheckpoint, GanConfig, GanTrainer,
    StepRecord,
    WatermarkTerm,
};
use crate::image::Image;
use crate::nn::AdamConfig;
use crate::rng::Rng;

/// `gl + γ·BCE(w_gt, w_hat)`; exactly `gl` when `γ = 0`.
pub fn combined_g_loss(gl: f64, w_hat: &SoftBits, w_gt: &BitString, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(invalid(format!("gamma must be ≥ 0, got {gamma}")));
    }
    let wm = bce(w_gt, w_hat)?;
    if gamma == 0.0 {
        return Ok(gl);
    }
    Ok(gl + gamma * wm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// Weight of the watermark term.
    pub gamma: f64,
    pub finetune_iterations: usize,
    /// The watermark is drawn from this key unless `watermark_hex` is set.
    pub owner_key: String,
    pub watermark_hex: Option<String>,
    pub use_augmentation: bool,
    pub batch_size: usize,
    pub g_optimizer: AdamConfig,
    pub d_optimizer: AdamConfig,
    /// Fresh latent draws used to score the final model.
    pub validation_samples: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        let gan = GanConfig::default();
        Self {
            gamma: 3.0,
            finetune_iterations: 1_000,
            owner_key: "owner".into(),
            watermark_hex: None,
            use_augmentation: false,
            batch_size: gan.batch_size,
            g_optimizer: gan.g_optimizer,
            d_optimizer: gan.d_optimizer,
            validation_samples: 500,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be finite and ≥ 0, got {}", self.gamma)));
        }
        if self.batch_size == 0 || self.validation_samples == 0 {
            return Err(Error::Config("batch size and validation samples must be positive".into()));
        }
        for o in [&self.g_optimizer, &self.d_optimizer] {
            if !(o.learning_rate > 0.0) {
                return Err(Error::Config("learning rates must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Take γ and the fine-tune length from a named reference preset.
    pub fn with_preset(mut self, name: &str) -> Result<Self> {
        let p = reference_preset(name)?;
        self.gamma = p.gamma;
        self.finetune_iterations = p.finetune_iterations;
        Ok(self)
    }

    /// The owner's `payload`-bit watermark.
    pub fn watermark(&self, payload: usize) -> Result<BitString> {
        match &self.watermark_hex {
            Some(h) => BitString::from_hex(h, payload),
            None => BitString::from_owner_key(&self.owner_key, payload),
        }
    }

    pub fn is_control(&self) -> bool {
        self.gamma == 0.0
    }
}

/// Scores of a generator against the owner's watermark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStats {
    pub samples: usize,
    pub bit_accuracy: f64,
    /// Binomial standard error `sqrt(p(1−p)/(samples·N))` at `p = 1/2`.
    pub chance_std_error: f64,
    /// Standard error of the mean over per-image accuracies.
    pub image_std_error: f64,
    /// Mean absolute pixel difference from the reference generator on the same latents.
    pub drift: Option<f64>,
}

/// Decode `num_samples` fresh images of `gan` and compare with `w_gt`.
/// When `reference` is given, also measures the pixel drift between the two
/// generators on shared latents.
pub fn validate_embedding(
    gan: &Gan,
    dec: &FrozenDecoder,
    w_gt: &BitString,
    num_samples: usize,
    reference: Option<&Gan>,
    rng: &mut Rng,
) -> Result<EmbeddingStats> {
    if num_samples == 0 {
        return Err(invalid("validation needs at least one sample"));
    }
    if w_gt.len() != dec.payload() {
        return Err(Error::LengthMismatch {
            left: w_gt.len(),
            right: dec.payload(),
        });
    }
    let z = sample_latent(&gan.latent(), num_samples, rng)?;
    let images = gan.generate(&z)?;
    let accs = dec
        .decode_batch(&images)?
        .iter()
        .map(|s| bit_accuracy(&hard_threshold(s), w_gt))
        .collect::<Result<Vec<_>>>()?;
    let m = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / m;
    let var = if accs.len() > 1 {
        accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    let drift = match reference {
        Some(r) => {
            let base = r.generate(&z)?;
            let d = images.tensor().data();
            let b = base.tensor().data();
            Some(d.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / d.len() as f64)
        }
        None => None,
    };
    Ok(EmbeddingStats {
        samples: num_samples,
        bit_accuracy: mean,
        chance_std_error: (0.25 / (m * w_gt.len() as f64)).sqrt(),
        image_std_error: (var / m).sqrt(),
        drift,
    })
}

/// Fine-tuned generator with its provenance.
#[derive(Debug, Clone)]
pub struct WatermarkedGanCheckpoint {
    pub gan: Gan,
    pub config: EmbedConfig,
    pub augmentation: AugmentationConfig,
    pub watermark: BitString,
    pub decoder_hash: String,
    /// Generator hash of the warm-up checkpoint this run started from.
    pub warmup_hash: String,
    pub curve: Vec<StepRecord>,
    pub validation: EmbeddingStats,
}

#[derive(Serialize, Deserialize)]
struct WatermarkedConfig {
    gan: GanConfig,
    embed: EmbedConfig,
    augmentation: AugmentationConfig,
}

#[derive(Serialize, Deserialize)]
struct WatermarkedMeta {
    watermark_hex: String,
    payload: usize,
    decoder_hash: String,
    warmup_hash: String,
    curve: Vec<StepRecord>,
    validation: EmbeddingStats,
}

const WATERMARKED_KIND: &str = "watermarked-gan";

impl WatermarkedGanCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(
            path,
            WATERMARKED_KIND,
            &[&self.gan.g_params, &self.gan.d_params],
            &WatermarkedConfig {
                gan: self.gan.config.clone(),
                embed: self.config.clone(),
                augmentation: self.augmentation.clone(),
            },
            &WatermarkedMeta {
                watermark_hex: self.watermark.to_hex(),
                payload: self.watermark.len(),
                decoder_hash: self.decoder_hash.clone(),
                warmup_hash: self.warmup_hash.clone(),
                curve: self.curve.clone(),
                validation: self.validation,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = checkpoint::load(path)?;
        Self::from_container(&mut c)
    }

    pub fn from_container(c: &mut Container) -> Result<Self> {
        c.expect_kind(WATERMARKED_KIND)?;
        let cfg: WatermarkedConfig = c.config()?;
        let meta: WatermarkedMeta = c.metrics()?;
        let mut gan = build_gan(&cfg.gan, &mut Rng::new(0))?;
        c.restore("generator", &mut gan.g_params)?;
        c.restore("discriminator", &mut gan.d_params)?;
        Ok(Self {
            gan,
            config: cfg.embed,
            augmentation: cfg.augmentation,
            watermark: BitString::from_hex(&meta.watermark_hex, meta.payload)?,
            decoder_hash: meta.decoder_hash,
            warmup_hash: meta.warmup_hash,
            curve: meta.curve,
            validation: meta.validation,
        })
    }

    /// Fail unless `dec` is the decoder this model was tuned against.
    pub fn check_decoder(&self, dec: &FrozenDecoder) -> Result<()> {
        dec.check_integrity()?;
        if dec.hash() != self.decoder_hash {
            return Err(Error::HashMismatch {
                expected: self.decoder_hash.clone(),
                got: dec.hash().to_string(),
            });
        }
        Ok(())
    }
}

/// Generator and config from either a warm-up or a watermarked checkpoint.
pub fn load_generator(path: &Path) -> Result<Gan> {
    let mut c = checkpoint::load(path)?;
    if c.kind == WATERMARKED_KIND {
        Ok(WatermarkedGanCheckpoint::from_container(&mut c)?.gan)
    } else {
        Ok(GanCheckpoint::from_container(&mut c)?.gan)
    }
}

/// Alternating D / G updates where G also minimises `γ·BCE(D_w(G(z)), w_gt)`.
/// The decoder input passes through the processing layer when
/// `cfg.use_augmentation` is set.
pub fn finetune(
    warm: &Gan,
    dec: &FrozenDecoder,
    dataset: &[Image],
    cfg: &EmbedConfig,
    aug: &AugmentationConfig,
    rng: &mut Rng,
) -> Result<WatermarkedGanCheckpoint> {
    cfg.validate()?;
    if cfg.use_augmentation {
        aug.validate()?;
    }
    let w_gt = cfg.watermark(dec.payload())?;
    dec.check_integrity()?;
    let decoder_hash = dec.hash().to_string();
    let s = warm.config.image_size;
    if let Some(bad) = dataset.iter().find(|im| im.shape() != [3, s, s]) {
        return Err(Error::ShapeMismatch {
            expected: vec![3, s, s],
            got: bad.shape().to_vec(),
        });
    }

    let mut gan = warm.clone();
    gan.config.batch_size = cfg.batch_size;
    gan.config.g_optimizer = cfg.g_optimizer;
    gan.config.d_optimizer = cfg.d_optimizer;
    let warmup_hash = warm.g_params.hash();
    let mut trainer = GanTrainer::new(gan, 0);
    let mut sampler = BatchSampler::new(dataset)?;
    let mut curve = Vec::with_capacity(cfg.finetune_iterations);
    for it in 0..cfg.finetune_iterations {
        let real = sampler.next(cfg.batch_size, rng)?;
        let term = WatermarkTerm {
            decoder: dec,
            target: &w_gt,
            gamma: cfg.gamma,
            augmentation: cfg.use_augmentation.then_some(aug),
        };
        let rec = trainer.step(&real, rng, Some(term))?;
        if (it + 1) % 250 == 0 {
            info!(
                "finetune {}/{}: d {:.4} g {:.4} wm {:.4} acc {:.3}",
                it + 1,
                cfg.finetune_iterations,
                rec.d_loss,
                rec.g_loss,
                rec.wm_bce.unwrap_or(f64::NAN),
                rec.bit_accuracy.unwrap_or(f64::NAN)
            );
        }
        curve.push(rec);
    }
    dec.check_integrity()?;
    if dec.hash() != decoder_hash {
        return Err(Error::HashMismatch {
            expected: decoder_hash,
            got: dec.hash().to_string(),
        });
    }

    let gan = trainer.gan;
    let validation = validate_embedding(&gan, dec, &w_gt, cfg.validation_samples, Some(warm), rng)?;
    info!(
        "finetune validation: acc {:.4} over {} draws, drift {:.4}",
        validation.bit_accuracy,
        validation.samples,
        validation.drift.unwrap_or(0.0)
    );
    Ok(WatermarkedGanCheckpoint {
        gan,
        config: cfg.clone(),
        augmentation: aug.clone(),
        watermark: w_gt,
        decoder_hash,
        warmup_hash,
        curve,
        validation,
    })
}
