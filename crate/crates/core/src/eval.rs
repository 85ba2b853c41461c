//! Robustness sweeps and quality tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{add_gaussian_noise, color_jitter, gaussian_blur, AugmentationConfig, Operator};
use crate::bits::{bit_accuracy, hard_threshold, BitString};
use crate::checkpoint::write_atomic;
use crate::codec::{evaluate, Codec, CodecMetrics, FrozenDecoder};
use crate::error::{invalid, Error, Result};
use crate::gan::{sample_latent, Gan};
use crate::image::{Image, ImageBatch};
use crate::jpeg::real_jpeg;
use crate::metrics::psnr;
use crate::rng::Rng;

pub const MIN_SWEEP_SAMPLES: usize = 30;

/// One operator swept over a strength grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub operator: Operator,
    /// Noise σ, blur kernel size, JPEG quality or brightness factor.
    pub grid: Vec<f64>,
    /// Images generated per grid point.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Blur standard deviation; ignored by the other operators.
    #[serde(default = "default_blur_sigma")]
    pub blur_sigma: f64,
}

fn default_samples() -> usize {
    100
}

fn default_blur_sigma() -> f64 {
    10.0
}

fn strictly_monotone(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1]) || v.windows(2).all(|w| w[0] > w[1])
}

impl SweepSpec {
    pub fn new(operator: Operator, grid: Vec<f64>) -> Self {
        Self {
            operator,
            grid,
            samples: default_samples(),
            blur_sigma: default_blur_sigma(),
        }
    }

    /// Noise, blur, JPEG and brightness sweeps spanning the training ranges
    /// plus harsher points.
    pub fn defaults() -> Vec<SweepSpec> {
        vec![
            Self::new(Operator::Noise, vec![0.02, 0.05, 0.08, 0.12, 0.15, 0.25]),
            Self::new(Operator::Blur, vec![3.0, 5.0, 7.0, 9.0]),
            Self::new(Operator::Jpeg, vec![90.0, 70.0, 50.0, 30.0, 20.0]),
            Self::new(Operator::Color, vec![1.0, 1.1, 1.2, 1.3]),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let op = self.operator.name();
        if self.grid.is_empty() {
            return Err(Error::Config(format!("{op} sweep has an empty grid")));
        }
        if !strictly_monotone(&self.grid) {
            return Err(Error::Config(format!("{op} grid {:?} is not strictly monotone", self.grid)));
        }
        if self.samples < MIN_SWEEP_SAMPLES {
            return Err(Error::Config(format!(
                "{op} sweep uses {} samples per point, at least {MIN_SWEEP_SAMPLES} required",
                self.samples
            )));
        }
        for &v in &self.grid {
            let ok = match self.operator {
                Operator::Noise => v >= 0.0 && v.is_finite(),
                Operator::Blur => v >= 1.0 && v.fract() == 0.0 && v as usize % 2 == 1,
                Operator::Jpeg => (1.0..=100.0).contains(&v) && v.fract() == 0.0,
                Operator::Color => v > 0.0 && v.is_finite(),
            };
            if !ok {
                return Err(Error::Config(format!("{v} is not a valid {op} strength")));
            }
        }
        if self.operator == Operator::Blur && !(self.blur_sigma > 0.0) {
            return Err(Error::Config("blur sigma must be > 0".into()));
        }
        Ok(())
    }
}

/// Applies the real (non-differentiable) version of an operator.
pub fn process(op: Operator, strength: f64, blur_sigma: f64, x: &Image, rng: &mut Rng) -> Result<Image> {
    match op {
        Operator::Noise => add_gaussian_noise(x, strength, rng),
        Operator::Blur => gaussian_blur(x, strength as usize, blur_sigma),
        Operator::Jpeg => real_jpeg(x, strength as u8),
        Operator::Color => color_jitter(x, strength, 1.0, 1.0),
    }
}

/// Whether `strength` lies inside the range the processing layer trains on.
pub fn in_training_range(cfg: &AugmentationConfig, op: Operator, strength: f64) -> bool {
    let within = |lo: f64, hi: f64| strength >= lo && strength <= hi;
    match op {
        Operator::Noise => within(cfg.noise_sigma[0], cfg.noise_sigma[1]),
        Operator::Blur => within(cfg.blur_kernel[0] as f64, cfg.blur_kernel[1] as f64),
        Operator::Jpeg => within(cfg.jpeg_quality[0] as f64, cfg.jpeg_quality[1] as f64),
        Operator::Color => within(cfg.color_factor[0], cfg.color_factor[1]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub operator: Operator,
    pub strength: f64,
    pub bit_accuracy: f64,
    /// Processed against unprocessed image.
    pub psnr: f64,
    pub samples: usize,
    /// Standard error of the mean over per-image accuracies.
    pub std_error: f64,
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Sweeps one operator. Grid point `i` draws its latents and noise from
/// `rng.split(i)`, so two models swept with equal seeds see identical inputs.
pub fn run_sweep(
    gan: &Gan,
    dec: &FrozenDecoder,
    w_gt: &BitString,
    spec: &SweepSpec,
    rng: &Rng,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    if w_gt.len() != dec.payload() {
        return Err(Error::LengthMismatch {
            left: w_gt.len(),
            right: dec.payload(),
        });
    }
    let mut rows = Vec::with_capacity(spec.grid.len());
    for (i, &strength) in spec.grid.iter().enumerate() {
        let mut r = rng.split(i as u64);
        let z = sample_latent(&gan.latent(), spec.samples, &mut r)?;
        let clean = gan.generate(&z)?;
        let mut processed = Vec::with_capacity(spec.samples);
        let mut psnrs = Vec::with_capacity(spec.samples);
        for x in clean.iter() {
            let y = process(spec.operator, strength, spec.blur_sigma, &x, &mut r)?;
            psnrs.push(psnr(&x, &y)?);
            processed.push(y);
        }
        let accs = dec
            .decode_batch(&ImageBatch::from_images(&processed)?)?
            .iter()
            .map(|s| bit_accuracy(&hard_threshold(s), w_gt))
            .collect::<Result<Vec<_>>>()?;
        let (acc, se) = mean_and_se(&accs);
        rows.push(SweepRow {
            operator: spec.operator,
            strength,
            bit_accuracy: acc,
            psnr: psnrs.iter().sum::<f64>() / psnrs.len() as f64,
            samples: spec.samples,
            std_error: se,
        });
    }
    Ok(rows)
}

/// Codec fidelity and accuracy over the first `m` images.
pub fn quality_table(codec: &Codec, images: &[Image], m: usize, rng: &mut Rng) -> Result<CodecMetrics> {
    if m == 0 {
        return Err(invalid("quality table needs at least one image"));
    }
    if m > images.len() {
        return Err(invalid(format!("{m} images requested, {} available", images.len())));
    }
    evaluate(codec, &images[..m], rng)
}

fn check_order(rows: &[SweepRow]) -> Result<()> {
    let mut start = 0;
    while start < rows.len() {
        let op = rows[start].operator;
        let end = start + rows[start..].iter().take_while(|r| r.operator == op).count();
        if rows[end..].iter().any(|r| r.operator == op) {
            return Err(invalid(format!("{} rows are not contiguous", op.name())));
        }
        let strengths: Vec<f64> = rows[start..end].iter().map(|r| r.strength).collect();
        if !strictly_monotone(&strengths) {
            return Err(invalid(format!("{} rows are out of strength order", op.name())));
        }
        start = end;
    }
    Ok(())
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(invalid("no sweep rows to report"));
    }
    check_order(rows)?;
    let mut s = String::from("operator,strength,bit_acc,psnr\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.operator.name(), r.strength, r.bit_accuracy, r.psnr);
    }
    Ok(s)
}

/// Writes `sweep.csv` for `rows` and one `<operator>.tsv` per operator with
/// columns `strength, acc_plain, acc_augmented, psnr`. The augmented column
/// holds `nan` when no augmented rows are given; otherwise they must cover
/// the same operators and strengths.
pub fn emit_report(rows: &[SweepRow], augmented: Option<&[SweepRow]>, dir: &Path) -> Result<Vec<PathBuf>> {
    let csv = sweep_csv(rows)?;
    if let Some(aug) = augmented {
        check_order(aug)?;
        let key = |r: &SweepRow| (r.operator, r.strength.to_bits());
        if aug.len() != rows.len() || aug.iter().zip(rows).any(|(a, b)| key(a) != key(b)) {
            return Err(invalid("augmented rows do not match the plain grid"));
        }
    }
    let mut written = Vec::new();
    let path = dir.join("sweep.csv");
    write_atomic(&path, csv.as_bytes())?;
    written.push(path);
    for op in Operator::ALL {
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].operator == op).collect();
        if idx.is_empty() {
            continue;
        }
        let mut s = String::from("strength\tacc_plain\tacc_augmented\tpsnr\n");
        for i in idx {
            let r = &rows[i];
            let a = augmented.map_or(f64::NAN, |aug| aug[i].bit_accuracy);
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.strength, r.bit_accuracy, a, r.psnr);
        }
        let path = dir.join(format!("{}.tsv", op.name()));
        write_atomic(&path, s.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}
