//! Watermark codec: an encoder that hides an N-bit payload in an image and a
//! decoder that reads it back, trained jointly on `MSE + λ·BCE`.

use log::info;
use serde::{Deserialize, Serialize};

use crate::augment::{pipeline_var, AugmentationConfig};
use crate::bits::{bit_accuracy, hard_threshold, BitString, SoftBits};
use crate::checkpoint::{self, Container};
use crate::error::{invalid, Error, Result};
use crate::graph::{bce_term, Graph, Var, PROB_EPS};
use crate::image::{hflip_var, resize_var, Image, ImageBatch};
use crate::metrics;
use crate::nn::{Adam, AdamConfig, Bind, Conv2d, Linear, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

const INFER_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Payload length N in bits.
    pub payload: usize,
    /// Weight of the decoder BCE term.
    pub lambda_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Fraction of the dataset kept aside for the final metrics.
    pub holdout_fraction: f64,
    /// Processing layer in front of the decoder while training; `None` trains on clean encodings.
    pub augmentation: Option<AugmentationConfig>,
    pub min_bit_accuracy: f64,
    pub min_psnr: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            payload: 50,
            lambda_weight: 0.01,
            epochs: 30,
            batch_size: 64,
            optimizer: AdamConfig::default(),
            holdout_fraction: 0.1,
            augmentation: Some(AugmentationConfig::default()),
            min_bit_accuracy: 0.99,
            min_psnr: 30.0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.payload == 0 {
            return cfg("payload must be at least one bit".into());
        }
        if self.channels != 3 {
            return cfg(format!("only RGB images are supported, got {} channels", self.channels));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return cfg(format!("image_size {} must be a positive multiple of 8", self.image_size));
        }
        if !(self.lambda_weight >= 0.0 && self.lambda_weight.is_finite()) {
            return cfg(format!("lambda_weight {} must be finite and ≥ 0", self.lambda_weight));
        }
        if self.batch_size == 0 {
            return cfg("batch_size must be ≥ 1".into());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return cfg("holdout_fraction must lie in (0, 1)".into());
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return cfg("learning rate must be > 0".into());
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }
}

/// Residual encoder: `x_w = clamp(x + tanh(pattern(w) + refine(x, pattern(w))))`.
#[derive(Debug, Clone)]
pub struct Encoder {
    size: usize,
    pattern: Linear,
    c1: Conv2d,
    c2: Conv2d,
    out: Conv2d,
}

impl Encoder {
    fn new(store: &mut ParamStore, size: usize, payload: usize, rng: &mut Rng) -> Self {
        Self {
            size,
            pattern: Linear::new(store, "pattern", payload, 3 * size * size, rng),
            c1: Conv2d::new(store, "c1", 6, 16, 3, 1, 1, rng),
            c2: Conv2d::new(store, "c2", 16, 16, 3, 1, 1, rng),
            out: Conv2d::new(store, "out", 16, 3, 3, 1, 1, rng),
        }
    }

    /// `x`: `[B, 3, S, S]`; `signs`: `[B, N]` holding `2w − 1`.
    pub fn forward(&self, g: &mut Graph, p: &Bind, x: Var, signs: Var) -> Var {
        let b = g.value(x).shape()[0];
        let s = self.size;
        let m = self.pattern.forward(g, p, signs);
        let m = g.reshape(m, &[b, 3, s, s]);
        let h = g.concat_channels(x, m);
        let h = self.c1.forward(g, p, h);
        let h = g.silu(h);
        let h = self.c2.forward(g, p, h);
        let h = g.silu(h);
        let h = self.out.forward(g, p, h);
        let r = g.add(h, m);
        let r = g.tanh(r);
        let y = g.add(x, r);
        g.clamp(y, 0.0, 1.0)
    }
}

/// Strided conv stack and a two-layer head over the flattened features.
/// Produces logits; probabilities are their sigmoid.
#[derive(Debug, Clone)]
pub struct Decoder {
    size: usize,
    payload: usize,
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    c4: Conv2d,
    fc1: Linear,
    fc2: Linear,
}

impl Decoder {
    fn new(store: &mut ParamStore, size: usize, payload: usize, rng: &mut Rng) -> Self {
        Self {
            size,
            payload,
            c1: Conv2d::new(store, "c1", 3, 32, 3, 2, 1, rng),
            c2: Conv2d::new(store, "c2", 32, 64, 3, 2, 1, rng),
            c3: Conv2d::new(store, "c3", 64, 128, 3, 2, 1, rng),
            c4: Conv2d::new(store, "c4", 128, 64, 3, 1, 1, rng),
            fc1: Linear::new(store, "fc1", 64 * (size / 8) * (size / 8), 256, rng),
            fc2: Linear::new(store, "fc2", 256, payload, rng),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn payload(&self) -> usize {
        self.payload
    }

    /// `x`: `[B, 3, S, S]` → logits `[B, N]`, antisymmetric under a
    /// left-right mirror of the input: `f(x) − f(mirror(x))`.
    pub fn forward(&self, g: &mut Graph, p: &Bind, x: Var) -> Var {
        let a = self.features(g, p, x);
        let m = hflip_var(g, x);
        let b = self.features(g, p, m);
        g.sub(a, b)
    }

    fn features(&self, g: &mut Graph, p: &Bind, x: Var) -> Var {
        let mut h = x;
        for c in [&self.c1, &self.c2, &self.c3, &self.c4] {
            h = c.forward(g, p, h);
            h = g.silu(h);
        }
        let b = g.value(h).shape()[0];
        let n = g.value(h).numel() / b;
        let h = g.reshape(h, &[b, n]);
        let h = self.fc1.forward(g, p, h);
        let h = g.silu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Encoder and decoder with their parameters.
#[derive(Debug, Clone)]
pub struct Codec {
    pub config: CodecConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub enc_params: ParamStore,
    pub dec_params: ParamStore,
}

pub fn build_codec(config: &CodecConfig, rng: &mut Rng) -> Result<Codec> {
    config.validate()?;
    let mut enc_params = ParamStore::new("encoder");
    let mut dec_params = ParamStore::new("decoder");
    let encoder = Encoder::new(&mut enc_params, config.image_size, config.payload, rng);
    let decoder = Decoder::new(&mut dec_params, config.image_size, config.payload, rng);
    Ok(Codec {
        config: config.clone(),
        encoder,
        decoder,
        enc_params,
        dec_params,
    })
}

fn signs_tensor(w: &[BitString], n: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(w.len() * n);
    for bits in w {
        if bits.len() != n {
            return Err(Error::LengthMismatch { left: bits.len(), right: n });
        }
        data.extend(bits.bits().iter().map(|b| 2.0 * *b as f32 - 1.0));
    }
    Tensor::new(&[w.len(), n], data)
}

fn targets(w: &[BitString]) -> Vec<f32> {
    w.iter().flat_map(|b| b.as_f32()).collect()
}

fn soft_rows(logits: &Tensor) -> Result<Vec<SoftBits>> {
    let (b, n) = logits.dims2()?;
    (0..b)
        .map(|i| SoftBits::from_logits(&logits.data()[i * n..(i + 1) * n]))
        .collect()
}

impl Codec {
    fn check_batch(&self, x: &ImageBatch) -> Result<()> {
        let s = self.config.image_size;
        if x.image_shape() != [3, s, s] {
            return Err(Error::ShapeMismatch {
                expected: vec![3, s, s],
                got: x.image_shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn encode_batch(&self, x: &ImageBatch, w: &[BitString]) -> Result<ImageBatch> {
        self.check_batch(x)?;
        if w.len() != x.len() {
            return Err(Error::LengthMismatch { left: w.len(), right: x.len() });
        }
        let signs = signs_tensor(w, self.config.payload)?;
        let mut out = Vec::with_capacity(x.tensor().numel());
        for start in (0..x.len()).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(x.len());
            let mut g = Graph::new();
            let xv = g.constant(x.tensor().narrow0(start, end));
            let sv = g.constant(signs.narrow0(start, end));
            let y = self.encoder.forward(&mut g, &self.enc_params.constants(), xv, sv);
            out.extend_from_slice(g.value(y).data());
        }
        ImageBatch::new(Tensor::new(x.tensor().shape(), out)?)
    }

    pub fn encode(&self, x: &Image, w: &BitString) -> Result<Image> {
        let batch = ImageBatch::from_images(std::slice::from_ref(x))?;
        Ok(self.encode_batch(&batch, std::slice::from_ref(w))?.get(0))
    }

    pub fn decode_batch(&self, x: &ImageBatch) -> Result<Vec<SoftBits>> {
        self.check_batch(x)?;
        decode_with(&self.decoder, &self.dec_params, x)
    }

    pub fn decode(&self, x: &Image) -> Result<SoftBits> {
        let batch = ImageBatch::from_images(std::slice::from_ref(x))?;
        Ok(self.decode_batch(&batch)?.remove(0))
    }

    /// Zero the pattern and output layers so the encoder returns its input unchanged.
    pub fn zero_residual(&mut self) -> Result<()> {
        self.scale_residual(0.0)
    }

    /// Multiply the pattern and output layers by `factor`, shrinking the
    /// residual the encoder adds.
    pub fn scale_residual(&mut self, factor: f32) -> Result<()> {
        let e = &self.encoder;
        for id in [e.out.weight, e.out.bias, e.pattern.weight, e.pattern.bias] {
            self.enc_params.get_mut(id)?.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
        Ok(())
    }

    /// Training loss for one batch, built inside `g` with trainable bindings.
    pub fn loss_var(
        &self,
        g: &mut Graph,
        x: &ImageBatch,
        w: &[BitString],
        aug: Option<(&AugmentationConfig, &mut Rng)>,
    ) -> Result<Var> {
        self.loss_var_with(g, &self.enc_params, x, w, aug)
    }

    /// [`Codec::loss_var`] with the encoder parameters taken from `enc_params`.
    pub fn loss_var_with(
        &self,
        g: &mut Graph,
        enc_params: &ParamStore,
        x: &ImageBatch,
        w: &[BitString],
        aug: Option<(&AugmentationConfig, &mut Rng)>,
    ) -> Result<Var> {
        self.check_batch(x)?;
        let xv = g.constant(x.tensor().clone());
        let sv = g.constant(signs_tensor(w, self.config.payload)?);
        let xw = self.encoder.forward(g, &enc_params.trainable(), xv, sv);
        let seen = match aug {
            Some((cfg, rng)) => pipeline_var(g, xw, cfg, rng)?.0,
            None => xw,
        };
        let logits = self.decoder.forward(g, &self.dec_params.trainable(), seen);
        let mse = g.mse(xw, xv);
        let bce = g.sigmoid_bce(logits, &targets(w));
        let weighted = g.scale(bce, self.config.lambda_weight as f32);
        Ok(g.add(mse, weighted))
    }

    pub fn freeze(&self) -> FrozenDecoder {
        FrozenDecoder::new(self.decoder.clone(), self.dec_params.clone())
    }
}

fn decode_with(dec: &Decoder, params: &ParamStore, x: &ImageBatch) -> Result<Vec<SoftBits>> {
    let mut out = Vec::with_capacity(x.len());
    for start in (0..x.len()).step_by(INFER_CHUNK) {
        let end = (start + INFER_CHUNK).min(x.len());
        let mut g = Graph::new();
        let mut xv = g.constant(x.tensor().narrow0(start, end));
        if x.size() != dec.size {
            xv = resize_var(&mut g, xv, dec.size);
        }
        let logits = dec.forward(&mut g, &params.constants(), xv);
        out.extend(soft_rows(g.value(logits))?);
    }
    Ok(out)
}

/// `mse(x, x_w) + λ · BCE(w, ŵ)` with mean-over-bits BCE.
pub fn codec_loss(x: &Image, x_w: &Image, w: &BitString, w_hat: &SoftBits, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(invalid(format!("lambda {lambda} must be ≥ 0")));
    }
    Ok(metrics::mse(x, x_w)? + lambda * bce(w, w_hat)?)
}

/// Mean binary cross-entropy between target bits and probabilities, with
/// probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce(w: &BitString, w_hat: &SoftBits) -> Result<f64> {
    if w.len() != w_hat.len() {
        return Err(Error::LengthMismatch { left: w.len(), right: w_hat.len() });
    }
    let total: f64 = w
        .bits()
        .iter()
        .zip(w_hat.values())
        .map(|(t, p)| bce_term((*p as f64).clamp(PROB_EPS, 1.0 - PROB_EPS), *t as f64))
        .sum();
    Ok(total / w.len() as f64)
}

/// Final metrics of a codec training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub bit_accuracy: f64,
    pub images: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStatus {
    Passed,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecRecord {
    pub metrics: CodecMetrics,
    pub status: TrainStatus,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub seed: u64,
}

/// A trained codec plus its held-out metrics.
#[derive(Debug, Clone)]
pub struct CodecCheckpoint {
    pub codec: Codec,
    pub record: CodecRecord,
}

const CODEC_KIND: &str = "codec";

impl CodecCheckpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(
            path,
            CODEC_KIND,
            &[&self.codec.enc_params, &self.codec.dec_params],
            &self.codec.config,
            &self.record,
        )
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut c = checkpoint::load(path)?;
        Self::from_container(&mut c)
    }

    pub fn from_container(c: &mut Container) -> Result<Self> {
        c.expect_kind(CODEC_KIND)?;
        let config: CodecConfig = c.config()?;
        let record: CodecRecord = c.metrics()?;
        let mut codec = build_codec(&config, &mut Rng::new(0))?;
        c.restore("encoder", &mut codec.enc_params)?;
        c.restore("decoder", &mut codec.dec_params)?;
        Ok(Self { codec, record })
    }
}

/// Encode each image with a fresh random payload, decode, and average the
/// fidelity and accuracy metrics.
pub fn evaluate(codec: &Codec, images: &[Image], rng: &mut Rng) -> Result<CodecMetrics> {
    if images.is_empty() {
        return Err(invalid("cannot evaluate on zero images"));
    }
    let n = codec.config.payload;
    let w: Vec<BitString> = (0..images.len())
        .map(|_| BitString::random(n, rng))
        .collect::<Result<_>>()?;
    let x = ImageBatch::from_images(images)?;
    let xw = codec.encode_batch(&x, &w)?;
    let decoded = codec.decode_batch(&xw)?;
    let (mut mse, mut psnr, mut ssim, mut acc) = (0.0, 0.0, 0.0, 0.0);
    for (i, img) in images.iter().enumerate() {
        let e = xw.get(i);
        mse += metrics::mse(img, &e)?;
        psnr += metrics::psnr(img, &e)?;
        ssim += metrics::ssim(img, &e)?;
        acc += bit_accuracy(&hard_threshold(&decoded[i]), &w[i])?;
    }
    let m = images.len() as f64;
    Ok(CodecMetrics {
        mse: mse / m,
        psnr: psnr / m,
        ssim: ssim / m,
        bit_accuracy: acc / m,
        images: images.len(),
    })
}

/// Train encoder and decoder jointly. The last `holdout_fraction` of
/// `dataset` is never trained on and provides the reported metrics; the run
/// is marked failed when those miss the configured thresholds.
pub fn train_codec(dataset: &[Image], config: &CodecConfig, rng: &mut Rng) -> Result<CodecCheckpoint> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(invalid("training dataset is empty"));
    }
    let s = config.image_size;
    if let Some(bad) = dataset.iter().find(|im| im.shape() != [3, s, s]) {
        return Err(Error::ShapeMismatch {
            expected: vec![3, s, s],
            got: bad.shape().to_vec(),
        });
    }
    let seed = rng.seed();
    let held = ((dataset.len() as f64 * config.holdout_fraction).round() as usize).max(1);
    if held >= dataset.len() {
        return Err(invalid("dataset too small to keep a held-out split"));
    }
    let (train, holdout) = dataset.split_at(dataset.len() - held);

    let mut codec = build_codec(config, &mut rng.fork())?;
    let mut enc_opt = Adam::new(config.optimizer, &codec.enc_params);
    let mut dec_opt = Adam::new(config.optimizer, &codec.dec_params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let imgs: Vec<Image> = chunk.iter().map(|&i| train[i].clone()).collect();
            let x = ImageBatch::from_images(&imgs)?;
            let w: Vec<BitString> = (0..chunk.len())
                .map(|_| BitString::random(config.payload, rng))
                .collect::<Result<_>>()?;
            let mut g = Graph::new();
            let loss = match &config.augmentation {
                Some(a) => codec.loss_var(&mut g, &x, &w, Some((a, rng)))?,
                None => codec.loss_var(&mut g, &x, &w, None)?,
            };
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("codec training, epoch {epoch}")));
            }
            let grads = g.backward(loss);
            let ge = grads.for_store(codec.enc_params.id(), codec.enc_params.len());
            let gd = grads.for_store(codec.dec_params.id(), codec.dec_params.len());
            enc_opt.step(&mut codec.enc_params, &ge)?;
            dec_opt.step(&mut codec.dec_params, &gd)?;
            total += value;
            batches += 1;
        }
        let mean = total / batches as f64;
        info!("codec epoch {}/{}: loss {mean:.5}", epoch + 1, config.epochs);
        epoch_loss.push(mean);
    }

    let metrics = evaluate(&codec, holdout, &mut rng.fork())?;
    let status = if metrics.bit_accuracy >= config.min_bit_accuracy && metrics.psnr >= config.min_psnr {
        TrainStatus::Passed
    } else {
        TrainStatus::Failed
    };
    info!(
        "codec held-out: acc {:.4}, psnr {:.2} dB, ssim {:.4} ({status:?})",
        metrics.bit_accuracy, metrics.psnr, metrics.ssim
    );
    Ok(CodecCheckpoint {
        codec,
        record: CodecRecord {
            metrics,
            status,
            epoch_loss,
            seed,
        },
    })
}

/// A decoder whose parameters can no longer change. Gradients still flow
/// through it to its input.
#[derive(Debug, Clone)]
pub struct FrozenDecoder {
    decoder: Decoder,
    params: ParamStore,
    hash: String,
}

impl FrozenDecoder {
    pub fn new(decoder: Decoder, mut params: ParamStore) -> Self {
        params.freeze();
        let hash = params.hash();
        Self { decoder, params, hash }
    }

    pub fn size(&self) -> usize {
        self.decoder.size
    }

    pub fn payload(&self) -> usize {
        self.decoder.payload
    }

    /// Hash recorded when the decoder was frozen.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Recompute the parameter hash and compare with the recorded one.
    pub fn check_integrity(&self) -> Result<()> {
        let now = self.params.hash();
        if now != self.hash {
            return Err(Error::HashMismatch {
                expected: self.hash.clone(),
                got: now,
            });
        }
        Ok(())
    }

    /// Always fails: frozen parameters cannot be updated.
    pub fn apply_update(&mut self, grads: &[Option<Tensor>]) -> Result<()> {
        Adam::new(AdamConfig::default(), &self.params).step(&mut self.params, grads)
    }

    /// Logits for a batch `[B, 3, H, H]`, resizing to the decoder size when
    /// needed.
    pub fn logits_var(&self, g: &mut Graph, x: Var) -> Var {
        let h = g.value(x).shape()[2];
        let x = if h != self.decoder.size {
            resize_var(g, x, self.decoder.size)
        } else {
            x
        };
        self.decoder.forward(g, &self.params.constants(), x)
    }

    pub fn decode_batch(&self, x: &ImageBatch) -> Result<Vec<SoftBits>> {
        if x.image_shape()[0] != 3 {
            return Err(invalid("decoder expects RGB images"));
        }
        decode_with(&self.decoder, &self.params, x)
    }

    pub fn decode(&self, x: &Image) -> Result<SoftBits> {
        let batch = ImageBatch::from_images(std::slice::from_ref(x))?;
        Ok(self.decode_batch(&batch)?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_shapes;

    fn small() -> CodecConfig {
        CodecConfig {
            image_size: 16,
            payload: 8,
            ..Default::default()
        }
    }

    #[test]
    fn batches_larger_than_one_chunk() {
        let mut rng = Rng::new(0);
        let codec = build_codec(&small(), &mut rng).unwrap();
        let imgs = synth_shapes(INFER_CHUNK + 3, 16, 1).unwrap();
        let w: Vec<BitString> = imgs.iter().map(|_| BitString::random(8, &mut rng).unwrap()).collect();
        let x = ImageBatch::from_images(&imgs).unwrap();
        let y = codec.encode_batch(&x, &w).unwrap();
        assert_eq!(y.len(), imgs.len());
        assert_eq!(y.get(INFER_CHUNK + 1), codec.encode(&imgs[INFER_CHUNK + 1], &w[INFER_CHUNK + 1]).unwrap());
        assert_eq!(codec.decode_batch(&y).unwrap().len(), imgs.len());
    }

    #[test]
    fn shapes_follow_config() {
        let mut rng = Rng::new(0);
        let codec = build_codec(&CodecConfig::default(), &mut rng).unwrap();
        let x = synth_shapes(1, 32, 1).unwrap().remove(0);
        let w = BitString::random(50, &mut rng).unwrap();
        let y = codec.encode(&x, &w).unwrap();
        assert_eq!(y.shape(), &[3, 32, 32]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let d = codec.decode(&y).unwrap();
        assert_eq!(d.len(), 50);
        assert!(d.values().iter().all(|p| *p > 0.0 && *p < 1.0));

        let big = CodecConfig {
            image_size: 64,
            payload: 100,
            ..Default::default()
        };
        let codec = build_codec(&big, &mut rng).unwrap();
        let x = Image::constant(3, 64, 0.3).unwrap();
        assert_eq!(codec.decode(&x).unwrap().len(), 100);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut rng = Rng::new(0);
        for cfg in [
            CodecConfig { payload: 0, ..Default::default() },
            CodecConfig { lambda_weight: -1.0, ..Default::default() },
            CodecConfig { image_size: 20, ..Default::default() },
        ] {
            assert!(build_codec(&cfg, &mut rng).is_err());
        }
    }

    #[test]
    fn payload_and_shape_mismatches_are_rejected() {
        let mut rng = Rng::new(0);
        let codec = build_codec(&small(), &mut rng).unwrap();
        let x = Image::constant(3, 16, 0.5).unwrap();
        let w = BitString::random(9, &mut rng).unwrap();
        assert!(codec.encode(&x, &w).is_err());
        assert!(codec.decode(&Image::constant(3, 24, 0.5).unwrap()).is_err());
    }

    #[test]
    fn zeroed_residual_is_identity() {
        let mut rng = Rng::new(3);
        let mut codec = build_codec(&small(), &mut rng).unwrap();
        codec.zero_residual().unwrap();
        let x = synth_shapes(1, 16, 2).unwrap().remove(0);
        let w = BitString::random(8, &mut rng).unwrap();
        assert_eq!(codec.encode(&x, &w).unwrap(), x);
    }

    #[test]
    fn codec_loss_closed_forms() {
        let x = Image::constant(3, 8, 0.5).unwrap();
        let w = BitString::new(vec![1, 0, 1, 1, 0]).unwrap();
        let perfect = SoftBits::new(
            w.bits()
                .iter()
                .map(|b| if *b == 1 { 1.0 - 1e-7 } else { 1e-7 })
                .collect(),
        )
        .unwrap();
        assert!(codec_loss(&x, &x, &w, &perfect, 1.0).unwrap() < 1e-5);
        let half = SoftBits::new(vec![0.5; 5]).unwrap();
        let l = codec_loss(&x, &x, &w, &half, 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-6);
        let shifted = Image::constant(3, 8, 0.6).unwrap();
        let l = codec_loss(&x, &shifted, &w, &half, 2.0).unwrap();
        assert!((l - 1.396294).abs() < 1e-6, "{l}");
        let short = SoftBits::new(vec![0.5; 4]).unwrap();
        assert!(codec_loss(&x, &x, &w, &short, 1.0).is_err());
    }

    #[test]
    fn training_rejects_empty_and_mismatched_data() {
        let mut rng = Rng::new(0);
        assert!(train_codec(&[], &small(), &mut rng).is_err());
        let wrong = synth_shapes(4, 32, 0).unwrap();
        assert!(train_codec(&wrong, &small(), &mut rng).is_err());
    }

    #[test]
    fn short_training_is_deterministic_and_checkpoints_round_trip() {
        let data = synth_shapes(40, 16, 5).unwrap();
        let cfg = CodecConfig {
            epochs: 1,
            batch_size: 16,
            ..small()
        };
        let a = train_codec(&data, &cfg, &mut Rng::new(11)).unwrap();
        let b = train_codec(&data, &cfg, &mut Rng::new(11)).unwrap();
        assert_eq!(a.record.metrics, b.record.metrics);
        assert_eq!(a.codec.dec_params.hash(), b.codec.dec_params.hash());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.safetensors");
        a.save(&path).unwrap();
        let back = CodecCheckpoint::load(&path).unwrap();
        assert_eq!(back.codec.enc_params.hash(), a.codec.enc_params.hash());
        assert_eq!(back.codec.dec_params.hash(), a.codec.dec_params.hash());
        assert_eq!(back.record.metrics, a.record.metrics);
        let path2 = dir.path().join("again.safetensors");
        back.save(&path2).unwrap();
        let again = CodecCheckpoint::load(&path2).unwrap();
        assert_eq!(again.codec.dec_params.hash(), a.codec.dec_params.hash());
    }

    #[test]
    fn frozen_decoder_passes_gradients_but_rejects_updates() {
        let mut rng = Rng::new(4);
        let codec = build_codec(&small(), &mut rng).unwrap();
        let mut frozen = codec.freeze();
        let before = frozen.hash().to_string();
        let x = synth_shapes(1, 16, 3).unwrap().remove(0);
        let w = BitString::random(8, &mut rng).unwrap();
        let mut g = Graph::new();
        let xv = g.input_with_grad(x.tensor().clone().reshape(&[1, 3, 16, 16]).unwrap());
        let logits = frozen.logits_var(&mut g, xv);
        let loss = g.sigmoid_bce(logits, &w.as_f32());
        let grads = g.backward(loss);
        let gx = grads.of(xv).unwrap();
        assert!(gx.data().iter().any(|v| *v != 0.0));
        let gp = grads.for_store(frozen.params().id(), frozen.params().len());
        assert!(gp.iter().all(|g| g.is_none()));
        let fake: Vec<Option<Tensor>> = frozen.params().tensors().iter().map(|t| Some(t.clone())).collect();
        assert!(matches!(frozen.apply_update(&fake), Err(Error::Frozen(_))));
        assert_eq!(frozen.hash(), before);
        frozen.check_integrity().unwrap();
    }

    #[test]
    fn frozen_decoder_resizes_other_sizes() {
        let mut rng = Rng::new(4);
        let frozen = build_codec(&small(), &mut rng).unwrap().freeze();
        let x = Image::constant(3, 32, 0.4).unwrap();
        assert_eq!(frozen.decode(&x).unwrap().len(), 8);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let mut codec = build_codec(&small(), &mut rng).unwrap();
        codec.scale_residual(0.2).unwrap();
        let x = ImageBatch::new(crate::gradcheck::random_tensor(&[2, 3, 16, 16], 0.3, 0.7, &mut rng)).unwrap();
        let w: Vec<BitString> = (0..2).map(|_| BitString::random(8, &mut rng).unwrap()).collect();
        let build = |g: &mut Graph, enc: &ParamStore| codec.loss_var_with(g, enc, &x, &w, None).unwrap();
        let errs = crate::gradcheck::param_rel_errors(&build, &codec.enc_params, 1e-3, 16, 3e-4, &mut rng);
        assert!(errs.len() >= 10);
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        assert!(worst < 1e-3, "{errs:?}");
    }
}
