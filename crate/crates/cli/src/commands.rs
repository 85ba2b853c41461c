use std::path::{Path, PathBuf};

use clap::Args;
use ganmark::codec::{train_codec as fit_codec, TrainStatus};
use ganmark::dataset::{load_dir, synth_shapes, Ingest};
use ganmark::embed::{finetune as fit_watermark, load_generator};
use ganmark::eval::{emit_report, run_sweep};
use ganmark::gan::{sample_latent, train_gan_warmup, write_loss_csv};
use ganmark::verify::verify_ownership;
use ganmark::{
    BitString, CodecCheckpoint, GanCheckpoint, Image, Rng, SweepSpec, WatermarkedGanCheckpoint,
};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::{file_hash, RunManifest};
use crate::{Common, Failure};

const GENERATE_CHUNK: usize = 256;

struct Run {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

fn prepare(c: &Common) -> Result<Run, Failure> {
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.paths.output = o.clone();
    }
    cfg.validate()?;
    let out = cfg.paths.output.clone();
    std::fs::create_dir_all(&out)
        .map_err(|e| Failure::Validation(format!("cannot create {}: {e}", out.display())))?;
    Ok(Run {
        seed: cfg.seed,
        cfg,
        out,
    })
}

fn load_dataset(cfg: &RunConfig, size: usize) -> Result<Ingest, Failure> {
    let dir = &cfg.paths.dataset;
    if !dir.is_dir() {
        return Err(Failure::Validation(format!("dataset directory {} not found", dir.display())));
    }
    let ingest = load_dir(dir, Some(size), cfg.paths.resize)?;
    if ingest.images.is_empty() {
        return Err(Failure::Validation(format!("no usable {size}×{size} images in {}", dir.display())));
    }
    if !ingest.skipped.is_empty() {
        warn!("{} dataset files skipped", ingest.skipped.len());
    }
    info!("loaded {} images from {}", ingest.images.len(), dir.display());
    Ok(ingest)
}

pub fn train_codec(c: &Common) -> Result<(), Failure> {
    let run = prepare(c)?;
    let data = load_dataset(&run.cfg, run.cfg.codec.image_size)?;
    let mut manifest = RunManifest::new("train-codec", run.seed, &run.cfg);
    let ck = fit_codec(&data.images, &run.cfg.codec, &mut Rng::new(run.seed).split(1))?;
    let path = run.out.join("codec.safetensors");
    ck.save(&path)?;
    manifest.artifact("codec", file_hash(&path)?);
    manifest.artifact("decoder_params", ck.codec.freeze().hash().to_string());
    manifest.set_metrics(&ck.record);
    manifest.notes.push(format!("skipped_files: {}", data.skipped.len()));
    manifest.write(&run.out.join("codec_manifest.json"))?;
    let m = &ck.record.metrics;
    println!("codec: bit accuracy {:.4}, PSNR {:.2} dB, SSIM {:.4}", m.bit_accuracy, m.psnr, m.ssim);
    if ck.record.status == TrainStatus::Failed {
        return Err(Failure::Threshold(format!(
            "held-out bit accuracy {:.4} / PSNR {:.2} dB below {} / {} dB",
            m.bit_accuracy, m.psnr, run.cfg.codec.min_bit_accuracy, run.cfg.codec.min_psnr
        )));
    }
    Ok(())
}

pub fn warmup(c: &Common) -> Result<(), Failure> {
    let run = prepare(c)?;
    let data = load_dataset(&run.cfg, run.cfg.gan.image_size)?;
    let mut manifest = RunManifest::new("warmup", run.seed, &run.cfg);
    let ck = train_gan_warmup(&data.images, &run.cfg.gan, &mut Rng::new(run.seed).split(2))?;
    let path = run.out.join("gan.safetensors");
    ck.save(&path)?;
    write_loss_csv(&run.out.join("loss.csv"), &ck.curve)?;
    manifest.artifact("gan", file_hash(&path)?);
    manifest.artifact("generator_params", ck.gan.g_params.hash());
    let last = ck.curve.last();
    manifest.set_metrics(&serde_json::json!({
        "iterations": ck.iteration,
        "final_d_loss": last.map(|r| r.d_loss),
        "final_g_loss": last.map(|r| r.g_loss),
        "skipped_files": data.skipped.len(),
    }));
    manifest.notes.push(format!("skipped_files: {}", data.skipped.len()));
    manifest.write(&run.out.join("warmup_manifest.json"))?;
    println!("warm-up: {} iterations", ck.iteration);
    Ok(())
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    /// Codec checkpoint whose decoder is frozen.
    #[arg(long)]
    pub codec: PathBuf,
    /// Warm-up GAN checkpoint.
    #[arg(long)]
    pub gan: PathBuf,
    /// Watermark loss weight; overrides config and preset.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Reference preset for γ and fine-tune length.
    #[arg(long)]
    pub preset: Option<String>,
    /// Validation bit accuracy required for success (ignored for γ = 0).
    #[arg(long, default_value_t = 0.95)]
    pub min_accuracy: f64,
}

pub fn finetune(a: &FinetuneArgs) -> Result<(), Failure> {
    let mut run = prepare(&a.common)?;
    if let Some(p) = &a.preset {
        run.cfg.embed = run.cfg.embed.clone().with_preset(p)?;
    }
    if let Some(g) = a.gamma {
        run.cfg.embed.gamma = g;
    }
    run.cfg.embed.validate()?;
    let codec = CodecCheckpoint::load(&a.codec)?;
    let warm = GanCheckpoint::load(&a.gan)?;
    let dec = codec.codec.freeze();
    if dec.size() != warm.gan.config.image_size {
        return Err(Failure::Validation(format!(
            "decoder size {} does not match generator size {}",
            dec.size(),
            warm.gan.config.image_size
        )));
    }
    run.cfg.embed.watermark(dec.payload())?;
    let data = load_dataset(&run.cfg, warm.gan.config.image_size)?;
    let mut manifest = RunManifest::new("finetune", run.seed, &run.cfg);
    let wm = fit_watermark(
        &warm.gan,
        &dec,
        &data.images,
        &run.cfg.embed,
        &run.cfg.augmentation,
        &mut Rng::new(run.seed).split(3),
    )?;
    let path = run.out.join("watermarked.safetensors");
    wm.save(&path)?;
    manifest.artifact("watermarked_gan", file_hash(&path)?);
    manifest.artifact("codec", file_hash(&a.codec)?);
    manifest.artifact("decoder_params", wm.decoder_hash.clone());
    manifest.artifact("warmup_generator_params", wm.warmup_hash.clone());
    let control = wm.config.is_control();
    manifest.set_metrics(&serde_json::json!({
        "gamma": wm.config.gamma,
        "iterations": wm.config.finetune_iterations,
        "use_augmentation": wm.config.use_augmentation,
        "augmentation": wm.augmentation,
        "watermark_hex": wm.watermark.to_hex(),
        "control": control,
        "validation": wm.validation,
    }));
    if control {
        manifest.notes.push("gamma = 0: conventional-GAN control, chance-level accuracy expected".into());
    }
    manifest.write(&run.out.join("finetune_manifest.json"))?;
    let v = &wm.validation;
    println!(
        "fine-tune: γ={} bit accuracy {:.4} over {} draws{}",
        wm.config.gamma,
        v.bit_accuracy,
        v.samples,
        if control { " (control)" } else { "" }
    );
    if !control && v.bit_accuracy < a.min_accuracy {
        return Err(Failure::Threshold(format!(
            "validation bit accuracy {:.4} < {}",
            v.bit_accuracy, a.min_accuracy
        )));
    }
    Ok(())
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Warm-up or watermarked GAN checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn generate(a: &GenerateArgs) -> Result<(), Failure> {
    let gan = load_generator(&a.model)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    let mut rng = Rng::new(a.seed);
    let mut written = 0;
    while written < a.count {
        let n = GENERATE_CHUNK.min(a.count - written);
        let z = sample_latent(&gan.latent(), n, &mut rng)?;
        for img in gan.generate(&z)?.iter() {
            img.save_png(&a.out.join(format!("{written:05}.png")))?;
            written += 1;
        }
    }
    println!("wrote {written} images to {}", a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Codec checkpoint providing the decoder.
    #[arg(long)]
    pub decoder: PathBuf,
    /// Owner watermark as hex.
    #[arg(long)]
    pub watermark: String,
    /// Directory of images to check.
    #[arg(long)]
    pub images: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

pub fn verify(a: &VerifyArgs) -> Result<(), Failure> {
    let run = prepare(&a.common)?;
    let dec = CodecCheckpoint::load(&a.decoder)?.codec.freeze();
    let w_gt = BitString::from_hex(&a.watermark, dec.payload())?;
    if !a.images.is_dir() {
        return Err(Failure::Validation(format!("{} is not a directory", a.images.display())));
    }
    let ingest = load_dir(&a.images, None, false)?;
    if ingest.images.is_empty() {
        return Err(Failure::Validation(format!("no readable images in {}", a.images.display())));
    }
    let labels: Vec<String> = ingest
        .paths
        .iter()
        .map(|p| p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()))
        .collect();
    let report = verify_ownership(&dec, &ingest.images, &w_gt, &run.cfg.verify)?.with_labels(&labels)?;
    report.write(&run.out)?;
    println!(
        "decision: {} (accuracy {:.4}, p = {:e}, {} images)",
        report.decision,
        report.accuracy,
        report.p_value,
        ingest.images.len()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    sweep: Vec<SweepSpec>,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Model whose accuracy fills the `bit_acc` / `acc_plain` columns.
    #[arg(long)]
    pub model: PathBuf,
    /// Optional second model reported in the `acc_augmented` column.
    #[arg(long)]
    pub augmented: Option<PathBuf>,
    /// Codec checkpoint providing the decoder.
    #[arg(long)]
    pub decoder: PathBuf,
    /// Owner watermark as hex; read from the model when it is a watermarked checkpoint.
    #[arg(long)]
    pub watermark: Option<String>,
    /// TOML file with `[[sweep]]` tables; the default grids otherwise.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

fn load_specs(path: Option<&Path>) -> Result<Vec<SweepSpec>, Failure> {
    let specs = match path {
        None => SweepSpec::defaults(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", p.display())))?;
            let f: SweepFile = toml::from_str(&text).map_err(|e| Failure::Validation(format!("sweep spec: {e}")))?;
            f.sweep
        }
    };
    if specs.is_empty() {
        return Err(Failure::Validation("sweep spec lists no sweeps".into()));
    }
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

pub fn sweep(a: &SweepArgs) -> Result<(), Failure> {
    let run = prepare(&a.common)?;
    let specs = load_specs(a.spec.as_deref())?;
    let dec = CodecCheckpoint::load(&a.decoder)?.codec.freeze();
    let w_gt = match &a.watermark {
        Some(h) => BitString::from_hex(h, dec.payload())?,
        None => WatermarkedGanCheckpoint::load(&a.model)
            .map_err(|_| Failure::Validation("--watermark is required for non-watermarked models".into()))?
            .watermark,
    };
    let model = load_generator(&a.model)?;
    let augmented = a.augmented.as_deref().map(load_generator).transpose()?;
    let rng = Rng::new(run.seed);
    let mut rows = Vec::new();
    let mut aug_rows = Vec::new();
    for spec in &specs {
        rows.extend(run_sweep(&model, &dec, &w_gt, spec, &rng)?);
        if let Some(g) = &augmented {
            aug_rows.extend(run_sweep(g, &dec, &w_gt, spec, &rng)?);
        }
    }
    let files = emit_report(&rows, augmented.as_ref().map(|_| aug_rows.as_slice()), &run.out)?;
    for r in &rows {
        println!("{:>6} {:>6} acc {:.4} psnr {:.2}", r.operator.name(), r.strength, r.bit_accuracy, r.psnr);
    }
    println!("wrote {} files to {}", files.len(), run.out.display());
    Ok(())
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth_dataset(a: &SynthArgs) -> Result<(), Failure> {
    let images: Vec<Image> = synth_shapes(a.count, a.size, a.seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    for (i, img) in images.iter().enumerate() {
        img.save_png(&a.out.join(format!("{i:05}.png")))?;
    }
    println!("wrote {} images to {}", images.len(), a.out.display());
    Ok(())
}
