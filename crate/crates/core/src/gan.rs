//! Small DCGAN-style generator and discriminator with the standard
//! adversarial losses, plus the alternating training loop shared by the
//! warm-up and watermark fine-tuning stages.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::augment::{pipeline_var, AugmentationConfig};
use crate::bits::BitString;
use crate::checkpoint::{self, Container};
use crate::codec::FrozenDecoder;
use crate::error::{invalid, Error, Result};
use crate::graph::{bce_term, sigmoid, Graph, Var, PROB_EPS};
use crate::image::{Image, ImageBatch};
use crate::nn::{Adam, AdamConfig, Bind, Conv2d, ConvTranspose2d, Linear, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

const LEAK: f32 = 0.2;
const PIXEL_NORM_EPS: f32 = 1e-8;

/// Latent prior: `dim` independent standard normals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSpec {
    pub dim: usize,
}

impl Default for LatentSpec {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

/// `[batch, dim]` standard-normal draws.
pub fn sample_latent(spec: &LatentSpec, batch: usize, rng: &mut Rng) -> Result<Tensor> {
    if batch == 0 {
        return Err(invalid("latent batch must be ≥ 1"));
    }
    if spec.dim == 0 {
        return Err(invalid("latent dimension must be ≥ 1"));
    }
    let mut t = Tensor::zeros(&[batch, spec.dim]);
    rng.fill_normal(t.data_mut(), 1.0);
    Ok(t)
}

/// Generator objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `−E log D(G(z))`
    #[default]
    NonSaturating,
    /// `E log(1 − D(G(z)))`, minimised directly.
    Saturating,
}

/// Training settings for the large reference architectures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePreset {
    pub name: &'static str,
    pub batch_size: usize,
    pub warmup_iterations: usize,
    pub finetune_iterations: usize,
    pub gamma: f64,
}

pub const REFERENCE_PRESETS: [ReferencePreset; 3] = [
    ReferencePreset {
        name: "began",
        batch_size: 64,
        warmup_iterations: 400_000,
        finetune_iterations: 3_000,
        gamma: 0.03,
    },
    ReferencePreset {
        name: "pggan",
        batch_size: 16,
        warmup_iterations: 360_000,
        finetune_iterations: 1_000,
        gamma: 3.0,
    },
    ReferencePreset {
        name: "stylegan2",
        batch_size: 64,
        warmup_iterations: 200_000,
        finetune_iterations: 1_000,
        gamma: 3.0,
    },
];

pub fn reference_preset(name: &str) -> Result<ReferencePreset> {
    REFERENCE_PRESETS
        .iter()
        .find(|p| p.name.eq_ignore_ascii_case(name))
        .copied()
        .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))
}

fn gan_adam() -> AdamConfig {
    AdamConfig {
        learning_rate: 2e-4,
        beta1: 0.5,
        ..AdamConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent: LatentSpec,
    pub batch_size: usize,
    pub warmup_iterations: usize,
    /// Channel width of the last generator stage and first discriminator stage.
    pub base_width: usize,
    pub pixel_norm: bool,
    pub g_optimizer: AdamConfig,
    pub d_optimizer: AdamConfig,
    pub generator_loss: GeneratorLoss,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            latent: LatentSpec::default(),
            batch_size: 32,
            warmup_iterations: 10_000,
            base_width: 16,
            pixel_norm: true,
            g_optimizer: gan_adam(),
            d_optimizer: gan_adam(),
            generator_loss: GeneratorLoss::NonSaturating,
        }
    }
}

impl GanConfig {
    fn stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.image_size < 8 || !self.image_size.is_power_of_two() {
            return cfg(format!("image_size {} must be a power of two ≥ 8", self.image_size));
        }
        if self.channels != 3 {
            return cfg(format!("only RGB output is supported, got {} channels", self.channels));
        }
        if self.latent.dim == 0 || self.batch_size == 0 || self.base_width == 0 {
            return cfg("latent dim, batch size and width must be positive".into());
        }
        for o in [&self.g_optimizer, &self.d_optimizer] {
            if !(o.learning_rate > 0.0) {
                return cfg("learning rates must be > 0".into());
            }
        }
        Ok(())
    }
}

/// Latent → `4×4` map → transposed-conv upsampling stages → sigmoid.
#[derive(Debug, Clone)]
pub struct Generator {
    latent: usize,
    top: usize,
    pixel_norm: bool,
    fc: Linear,
    ups: Vec<ConvTranspose2d>,
    out: ConvTranspose2d,
}

impl Generator {
    fn new(store: &mut ParamStore, cfg: &GanConfig, rng: &mut Rng) -> Self {
        let stages = cfg.stages();
        let top = cfg.base_width << (stages - 1);
        let fc = Linear::new(store, "fc", cfg.latent.dim, top * 16, rng);
        let mut ups = Vec::new();
        let mut c = top;
        for i in 0..stages - 1 {
            ups.push(ConvTranspose2d::new(store, &format!("up{i}"), c, c / 2, 4, 2, 1, rng));
            c /= 2;
        }
        let out = ConvTranspose2d::new(store, "out", c, cfg.channels, 4, 2, 1, rng);
        Self {
            latent: cfg.latent.dim,
            top,
            pixel_norm: cfg.pixel_norm,
            fc,
            ups,
            out,
        }
    }

    /// `z`: `[B, dim]` → images `[B, 3, S, S]` in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &Bind, z: Var) -> Var {
        let b = g.value(z).shape()[0];
        let h = self.fc.forward(g, p, z);
        let h = g.silu(h);
        let mut h = g.reshape(h, &[b, self.top, 4, 4]);
        if self.pixel_norm {
            h = g.pixel_norm(h, PIXEL_NORM_EPS);
        }
        for up in &self.ups {
            h = up.forward(g, p, h);
            h = g.silu(h);
            if self.pixel_norm {
                h = g.pixel_norm(h, PIXEL_NORM_EPS);
            }
        }
        let h = self.out.forward(g, p, h);
        g.sigmoid(h)
    }
}

/// Strided conv stack with a linear real/fake logit.
#[derive(Debug, Clone)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
    fc: Linear,
}

impl Discriminator {
    fn new(store: &mut ParamStore, cfg: &GanConfig, rng: &mut Rng) -> Self {
        let stages = cfg.stages();
        let mut convs = Vec::new();
        let mut c_in = cfg.channels;
        let mut c = cfg.base_width;
        for i in 0..stages {
            convs.push(Conv2d::new(store, &format!("c{i}"), c_in, c, 4, 2, 1, rng));
            c_in = c;
            c *= 2;
        }
        let fc = Linear::new(store, "fc", c_in * 16, 1, rng);
        Self { convs, fc }
    }

    /// Images `[B, 3, S, S]` → logits `[B, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &Bind, x: Var) -> Var {
        let b = g.value(x).shape()[0];
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, p, h);
            h = g.leaky_relu(h, LEAK);
        }
        let n = g.value(h).numel() / b;
        let h = g.reshape(h, &[b, n]);
        self.fc.forward(g, p, h)
    }
}

/// Generator, discriminator and their parameters.
#[derive(Debug, Clone)]
pub struct Gan {
    pub config: GanConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_params: ParamStore,
    pub d_params: ParamStore,
}

pub fn build_gan(config: &GanConfig, rng: &mut Rng) -> Result<Gan> {
    config.validate()?;
    let mut g_params = ParamStore::new("generator");
    let mut d_params = ParamStore::new("discriminator");
    let generator = Generator::new(&mut g_params, config, rng);
    let discriminator = Discriminator::new(&mut d_params, config, rng);
    Ok(Gan {
        config: config.clone(),
        generator,
        discriminator,
        g_params,
        d_params,
    })
}

const GEN_CHUNK: usize = 256;

impl Gan {
    pub fn latent(&self) -> LatentSpec {
        self.config.latent
    }

    /// Images for the latent batch `z` (`[B, dim]`).
    pub fn generate(&self, z: &Tensor) -> Result<ImageBatch> {
        self.generate_with(&self.g_params, z)
    }

    /// [`Gan::generate`] with generator parameters taken from `params`.
    pub fn generate_with(&self, params: &ParamStore, z: &Tensor) -> Result<ImageBatch> {
        let (b, d) = z.dims2()?;
        if d != self.generator.latent {
            return Err(Error::ShapeMismatch {
                expected: vec![b, self.generator.latent],
                got: z.shape().to_vec(),
            });
        }
        let s = self.config.image_size;
        let mut out = Vec::with_capacity(b * 3 * s * s);
        for start in (0..b).step_by(GEN_CHUNK) {
            let end = (start + GEN_CHUNK).min(b);
            let mut g = Graph::new();
            let zv = g.constant(z.narrow0(start, end));
            let y = self.generator.forward(&mut g, &params.constants(), zv);
            out.extend_from_slice(g.value(y).data());
        }
        ImageBatch::new(Tensor::new(&[b, 3, s, s], out)?)
    }

    /// Draw `n` fresh latents and generate.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<ImageBatch> {
        let z = sample_latent(&self.config.latent, n, rng)?;
        self.generate(&z)
    }

    /// Discriminator probabilities `D(x)` for each image.
    pub fn discriminate(&self, x: &ImageBatch) -> Result<Vec<f64>> {
        let s = self.config.image_size;
        if x.image_shape() != [3, s, s] {
            return Err(Error::ShapeMismatch {
                expected: vec![3, s, s],
                got: x.image_shape().to_vec(),
            });
        }
        let mut g = Graph::new();
        let xv = g.constant(x.tensor().clone());
        let l = self.discriminator.forward(&mut g, &self.d_params.constants(), xv);
        Ok(g.value(l).data().iter().map(|v| sigmoid(*v) as f64).collect())
    }

    /// Discriminator loss on real and generated batches.
    pub fn d_loss(&self, real: &ImageBatch, fake: &ImageBatch) -> Result<f64> {
        d_loss(&self.discriminate(real)?, &self.discriminate(fake)?)
    }

    pub fn g_loss(&self, fake: &ImageBatch) -> Result<f64> {
        g_loss(&self.discriminate(fake)?, self.config.generator_loss)
    }
}

fn clamp_prob(p: f64) -> Result<f64> {
    if !p.is_finite() {
        return Err(Error::NonFinite("discriminator output".into()));
    }
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS))
}

/// `mean(−log D(x_real)) + mean(−log(1 − D(x_fake)))` from probabilities.
pub fn d_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(invalid("discriminator loss needs non-empty batches"));
    }
    let mut r = 0.0;
    for p in real {
        r += bce_term(clamp_prob(*p)?, 1.0);
    }
    let mut f = 0.0;
    for p in fake {
        f += bce_term(clamp_prob(*p)?, 0.0);
    }
    Ok(r / real.len() as f64 + f / fake.len() as f64)
}

/// Generator loss from `D(G(z))` probabilities.
pub fn g_loss(fake: &[f64], variant: GeneratorLoss) -> Result<f64> {
    if fake.is_empty() {
        return Err(invalid("generator loss needs a non-empty batch"));
    }
    let mut total = 0.0;
    for p in fake {
        let p = clamp_prob(*p)?;
        total += match variant {
            GeneratorLoss::NonSaturating => -p.ln(),
            GeneratorLoss::Saturating => (1.0 - p).ln(),
        };
    }
    Ok(total / fake.len() as f64)
}

/// Graph form of [`d_loss`] on discriminator logits.
pub fn d_loss_var(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Var {
    let ones = vec![1.0; g.value(real_logits).numel()];
    let zeros = vec![0.0; g.value(fake_logits).numel()];
    let r = g.sigmoid_bce(real_logits, &ones);
    let f = g.sigmoid_bce(fake_logits, &zeros);
    g.add(r, f)
}

/// Graph form of [`g_loss`] on discriminator logits.
pub fn g_loss_var(g: &mut Graph, fake_logits: Var, variant: GeneratorLoss) -> Var {
    let n = g.value(fake_logits).numel();
    match variant {
        GeneratorLoss::NonSaturating => g.sigmoid_bce(fake_logits, &vec![1.0; n]),
        GeneratorLoss::Saturating => {
            let l = g.sigmoid_bce(fake_logits, &vec![0.0; n]);
            g.scale(l, -1.0)
        }
    }
}

/// Watermark term added to the generator objective during fine-tuning.
#[derive(Debug, Clone, Copy)]
pub struct WatermarkTerm<'a> {
    pub decoder: &'a FrozenDecoder,
    pub target: &'a BitString,
    pub gamma: f64,
    /// Processing layer on the decoder branch only.
    pub augmentation: Option<&'a AugmentationConfig>,
}

/// Losses of one training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub d_loss: f64,
    /// Adversarial part of the generator loss.
    pub g_loss: f64,
    /// Watermark BCE; absent during warm-up.
    pub wm_bce: Option<f64>,
    /// Bit accuracy of this batch on the decoder branch.
    pub bit_accuracy: Option<f64>,
}

/// Alternating D/G optimisation. A failed step leaves parameters untouched
/// unless the discriminator update already went through.
pub struct GanTrainer {
    pub gan: Gan,
    opt_g: Adam,
    opt_d: Adam,
    pub iteration: u64,
}

impl GanTrainer {
    pub fn new(gan: Gan, iteration: u64) -> Self {
        let opt_g = Adam::new(gan.config.g_optimizer, &gan.g_params);
        let opt_d = Adam::new(gan.config.d_optimizer, &gan.d_params);
        Self {
            gan,
            opt_g,
            opt_d,
            iteration,
        }
    }

    pub fn step(&mut self, real: &ImageBatch, rng: &mut Rng, wm: Option<WatermarkTerm>) -> Result<StepRecord> {
        let gan = &mut self.gan;
        let s = gan.config.image_size;
        if real.image_shape() != [3, s, s] {
            return Err(Error::ShapeMismatch {
                expected: vec![3, s, s],
                got: real.image_shape().to_vec(),
            });
        }
        let b = real.len();
        let z = sample_latent(&gan.config.latent, b, rng)?;
        let mut g = Graph::new();
        let zv = g.constant(z);
        let fake = gan.generator.forward(&mut g, &gan.g_params.trainable(), zv);

        let mut gd = Graph::new();
        let rv = gd.constant(real.tensor().clone());
        let fv = gd.constant(g.value(fake).clone());
        let rl = gan.discriminator.forward(&mut gd, &gan.d_params.trainable(), rv);
        let fl = gan.discriminator.forward(&mut gd, &gan.d_params.trainable(), fv);
        let dl = d_loss_var(&mut gd, rl, fl);
        let d_value = gd.scalar_f64(dl);
        if !d_value.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss at iteration {}", self.iteration)));
        }
        let grads = gd.backward(dl).for_store(gan.d_params.id(), gan.d_params.len());
        drop(gd);
        self.opt_d.step(&mut gan.d_params, &grads)?;

        let logits = gan.discriminator.forward(&mut g, &gan.d_params.constants(), fake);
        let adv = g_loss_var(&mut g, logits, gan.config.generator_loss);
        let g_value = g.scalar_f64(adv);
        let mut total = adv;
        let mut wm_bce = None;
        let mut bit_accuracy = None;
        if let Some(term) = wm {
            if term.target.len() != term.decoder.payload() {
                return Err(Error::LengthMismatch {
                    left: term.target.len(),
                    right: term.decoder.payload(),
                });
            }
            let seen = match term.augmentation {
                Some(cfg) => pipeline_var(&mut g, fake, cfg, rng)?.0,
                None => fake,
            };
            let wl = term.decoder.logits_var(&mut g, seen);
            let target: Vec<f32> = (0..b).flat_map(|_| term.target.as_f32()).collect();
            let correct = g
                .value(wl)
                .data()
                .iter()
                .zip(&target)
                .filter(|(l, t)| (**l >= 0.0) == (**t == 1.0))
                .count();
            bit_accuracy = Some(correct as f64 / target.len() as f64);
            let bce = g.sigmoid_bce(wl, &target);
            wm_bce = Some(g.scalar_f64(bce));
            let weighted = g.scale(bce, term.gamma as f32);
            total = g.add(adv, weighted);
        }
        let total_value = g.scalar_f64(total);
        if !total_value.is_finite() {
            return Err(Error::NonFinite(format!("generator loss at iteration {}", self.iteration)));
        }
        let grads = g.backward(total).for_store(gan.g_params.id(), gan.g_params.len());
        self.opt_g.step(&mut gan.g_params, &grads)?;
        self.iteration += 1;
        Ok(StepRecord {
            iteration: self.iteration,
            d_loss: d_value,
            g_loss: g_value,
            wm_bce,
            bit_accuracy,
        })
    }
}

/// Uniform mini-batch sampler over a fixed image set.
pub struct BatchSampler<'a> {
    images: &'a [Image],
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(images: &'a [Image]) -> Result<Self> {
        if images.is_empty() {
            return Err(invalid("training dataset is empty"));
        }
        Ok(Self {
            images,
            order: (0..images.len()).collect(),
            cursor: images.len(),
        })
    }

    /// Next batch, reshuffling after each pass.
    pub fn next(&mut self, batch: usize, rng: &mut Rng) -> Result<ImageBatch> {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if self.cursor == self.order.len() {
                rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            picked.push(self.images[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        ImageBatch::from_images(&picked)
    }
}

/// A GAN snapshot with its training history.
#[derive(Debug, Clone)]
pub struct GanCheckpoint {
    pub gan: Gan,
    pub iteration: u64,
    pub curve: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
struct GanMeta {
    iteration: u64,
    curve: Vec<StepRecord>,
}

const GAN_KIND: &str = "gan";

impl GanCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(
            path,
            GAN_KIND,
            &[&self.gan.g_params, &self.gan.d_params],
            &self.gan.config,
            &GanMeta {
                iteration: self.iteration,
                curve: self.curve.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = checkpoint::load(path)?;
        Self::from_container(&mut c)
    }

    pub fn from_container(c: &mut Container) -> Result<Self> {
        c.expect_kind(GAN_KIND)?;
        let config: GanConfig = c.config()?;
        let meta: GanMeta = c.metrics()?;
        let mut gan = build_gan(&config, &mut Rng::new(0))?;
        c.restore("generator", &mut gan.g_params)?;
        c.restore("discriminator", &mut gan.d_params)?;
        Ok(Self {
            gan,
            iteration: meta.iteration,
            curve: meta.curve,
        })
    }
}

/// Write `iteration,d_loss,g_loss` rows.
pub fn write_loss_csv(path: &Path, curve: &[StepRecord]) -> Result<()> {
    let mut s = String::from("iteration,d_loss,g_loss\n");
    for r in curve {
        s.push_str(&format!("{},{},{}\n", r.iteration, r.d_loss, r.g_loss));
    }
    checkpoint::write_atomic(path, s.as_bytes())
}

/// Conventional adversarial training for `config.warmup_iterations` steps.
pub fn train_gan_warmup(dataset: &[Image], config: &GanConfig, rng: &mut Rng) -> Result<GanCheckpoint> {
    config.validate()?;
    let s = config.image_size;
    if let Some(bad) = dataset.iter().find(|im| im.shape() != [3, s, s]) {
        return Err(Error::ShapeMismatch {
            expected: vec![3, s, s],
            got: bad.shape().to_vec(),
        });
    }
    let mut sampler = BatchSampler::new(dataset)?;
    let gan = build_gan(config, &mut rng.fork())?;
    let mut trainer = GanTrainer::new(gan, 0);
    let mut curve = Vec::with_capacity(config.warmup_iterations);
    for it in 0..config.warmup_iterations {
        let real = sampler.next(config.batch_size, rng)?;
        let rec = trainer.step(&real, rng, None)?;
        if (it + 1) % 500 == 0 {
            info!("warm-up {}/{}: d {:.4} g {:.4}", it + 1, config.warmup_iterations, rec.d_loss, rec.g_loss);
        }
        curve.push(rec);
    }
    Ok(GanCheckpoint {
        iteration: trainer.iteration,
        gan: trainer.gan,
        curve,
    })
}

/// Fraction of held-out real images and fresh samples the discriminator
/// classifies correctly at threshold 0.5.
pub fn discriminator_accuracy(gan: &Gan, held_out: &[Image], rng: &mut Rng) -> Result<f64> {
    let real = ImageBatch::from_images(held_out)?;
    let fake = gan.sample(held_out.len(), rng)?;
    let pr = gan.discriminate(&real)?;
    let pf = gan.discriminate(&fake)?;
    let correct = pr.iter().filter(|p| **p >= 0.5).count() + pf.iter().filter(|p| **p < 0.5).count();
    Ok(correct as f64 / (pr.len() + pf.len()) as f64)
}
