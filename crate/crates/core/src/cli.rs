//! The `layerseg` command line: synth, train, eval and infer.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::RunConfig;
use crate::encoder::MAX_STRIDE;
use crate::experiment::evaluate_model;
use crate::synthdata::{generate_dataset, load_dataset, save_dataset, DatasetSpec, Image, Mask, K_ATTR, K_CLS};
use crate::trainer::{run_training, TrainError, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "layerseg", version, about = "Layered instance segmentation with attribute recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run a checkpoint on one PNG image and export masks.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    #[arg(long, default_value_t = 128)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of instances drawn below the small-area threshold.
    #[arg(long, default_value_t = 0.0)]
    pub scale_mix: f64,
    #[arg(long, default_value_t = 4)]
    pub max_instances: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.iterations=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fixed attribute-F1 threshold for the joint metric.
    #[arg(long)]
    pub f1_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Pad images whose sides are not multiples of 32 instead of failing.
    #[arg(long)]
    pub pad: bool,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.to_string(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::usage(e)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Infer(a) => cmd_infer(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), Failure> {
    if a.scenes == 0 {
        return Err(Failure::usage("--scenes must be positive"));
    }
    if a.image_size < MAX_STRIDE {
        return Err(Failure::usage(format!("--image-size must be at least {MAX_STRIDE}")));
    }
    let spec = DatasetSpec {
        scenes: a.scenes,
        image_size: a.image_size,
        seed: a.seed,
        scale_mix: a.scale_mix,
        max_instances: a.max_instances,
    };
    let ds = generate_dataset(&spec).map_err(Failure::usage)?;
    save_dataset(&ds, &a.out).map_err(|e| Failure::usage(format!("{}: {e}", a.out.display())))?;
    eprintln!("wrote {} scenes to {}", ds.scenes.len(), a.out.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(&a.config, &a.overrides).map_err(Failure::usage)?;
    if cfg.data.dataset.as_os_str().is_empty() {
        return Err(Failure::usage("data.dataset is not set"));
    }
    if cfg.data.out_dir.as_os_str().is_empty() {
        cfg.data.out_dir = PathBuf::from("runs");
    }
    let dataset = load_dataset(&cfg.data.dataset)
        .map_err(|e| Failure::usage(format!("dataset {}: {e}", cfg.data.dataset.display())))?;
    let trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            Trainer::resume(cfg, &ckpt)?
        }
        None => Trainer::new(cfg)?,
    };
    let quiet = a.quiet;
    let start = std::time::Instant::now();
    let outcome = run_training(trainer, &dataset, &mut |e| {
        if !quiet && (e.iter + 1) % 50 == 0 {
            eprintln!(
                "iter {:>6}  loss {:>10.4}  lr {:.2e}  {:.0?}",
                e.iter + 1,
                e.total,
                e.lr,
                start.elapsed()
            );
        }
    })?;
    eprintln!(
        "finished at iteration {}; checkpoint {}",
        outcome.trainer.iteration,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

/// Loads a checkpoint and checks it against the fixed dataset schema.
fn load_model(path: &Path) -> Result<(Checkpoint, crate::model::Model), Failure> {
    let ckpt = Checkpoint::load(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let m = ckpt.config.model;
    if m.k_cls != K_CLS {
        return Err(Failure::usage(format!("schema mismatch on K_cls: dataset has {K_CLS}, checkpoint {}", m.k_cls)));
    }
    if m.k_attr != K_ATTR {
        return Err(Failure::usage(format!(
            "schema mismatch on K_attr: dataset has {K_ATTR}, checkpoint {}",
            m.k_attr
        )));
    }
    let model = ckpt.to_model()?;
    Ok((ckpt, model))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), Failure> {
    if let Some(f) = a.f1_threshold {
        if !(0.0..=1.0).contains(&f) {
            return Err(Failure::usage("--f1-threshold must lie in [0, 1]"));
        }
    }
    let (ckpt, model) = load_model(&a.checkpoint)?;
    let dataset = load_dataset(&a.dataset).map_err(|e| Failure::usage(format!("dataset {}: {e}", a.dataset.display())))?;
    if dataset.scenes.is_empty() {
        return Err(Failure::usage("dataset has no scenes"));
    }
    if dataset.image_size % MAX_STRIDE != 0 {
        return Err(Failure::usage(format!(
            "dataset image size {} is not a multiple of {MAX_STRIDE}",
            dataset.image_size
        )));
    }
    let fixed = a.f1_threshold.or(ckpt.config.eval.f1_threshold);
    let report = evaluate_model(&model, &dataset, fixed).map_err(|e| Failure {
        code: EXIT_NUMERIC,
        message: e.to_string(),
    })?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    std::fs::write(&a.out, json + "\n").map_err(|e| Failure::usage(format!("{}: {e}", a.out.display())))?;
    println!("ap_iou {:.4}  ap_iou_f1 {:.4}  ({} images)", report.ap_iou, report.ap_iou_f1, report.n_images);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarDetection {
    pub class_id: usize,
    pub score: f64,
    pub attributes: Vec<usize>,
    pub mask_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub detections: Vec<SidecarDetection>,
}

pub const SIDECAR_FILE: &str = "detections.json";

pub fn cmd_infer(a: &InferArgs) -> Result<(), Failure> {
    let image = read_png(&a.image).map_err(|e| Failure::usage(format!("{}: {e}", a.image.display())))?;
    let (h, w) = (image.height, image.width);
    let aligned = h % MAX_STRIDE == 0 && w % MAX_STRIDE == 0;
    if !aligned && !a.pad {
        return Err(Failure::usage(format!(
            "image is {w}x{h}; sides must be multiples of {MAX_STRIDE} (or pass --pad)"
        )));
    }
    let (_, model) = load_model(&a.checkpoint)?;
    let input = pad_image(&image, h.div_ceil(MAX_STRIDE) * MAX_STRIDE, w.div_ceil(MAX_STRIDE) * MAX_STRIDE);
    let detections = model.predict(&input.to_tensor()).map_err(|e| Failure {
        code: EXIT_NUMERIC,
        message: e.to_string(),
    })?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Failure::usage(format!("{}: {e}", a.out_dir.display())))?;
    let mut sidecar = Sidecar { detections: Vec::new() };
    for (k, det) in detections.iter().enumerate() {
        let name = format!("mask_{k:03}.png");
        let mask = crop_mask(&det.mask, h, w);
        write_mask_png(&a.out_dir.join(&name), &mask).map_err(|e| Failure::usage(format!("{name}: {e}")))?;
        sidecar.detections.push(SidecarDetection {
            class_id: det.class_id,
            score: det.score,
            attributes: det.attributes.clone(),
            mask_file: name,
        });
    }
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serialises");
    std::fs::write(a.out_dir.join(SIDECAR_FILE), json + "\n").map_err(Failure::usage)?;
    println!("{} detections written to {}", sidecar.detections.len(), a.out_dir.display());
    Ok(())
}

/// Extends the image to `h×w` with mid-grey on the bottom and right.
fn pad_image(image: &Image, h: usize, w: usize) -> Image {
    if (h, w) == (image.height, image.width) {
        return image.clone();
    }
    let mut out = Image::filled(h, w, 0.5);
    for c in 0..3 {
        for y in 0..image.height {
            for x in 0..image.width {
                out.set(c, y, x, image.get(c, y, x));
            }
        }
    }
    out
}

fn crop_mask(mask: &Mask, h: usize, w: usize) -> Mask {
    let mut out = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, mask.get(y, x));
        }
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum PngError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Decode(#[from] png::DecodingError),
    #[error(transparent)]
    Encode(#[from] png::EncodingError),
    #[error("unsupported PNG layout {0:?}")]
    Layout(png::ColorType),
}

/// Reads an 8-bit PNG (grey, grey+alpha, RGB or RGBA) as an RGB image in
/// `[0, 1]`; alpha is ignored.
pub fn read_png(path: &Path) -> Result<Image, PngError> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().expect("buffer size fits")];
    let info = reader.next_frame(&mut buf)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(PngError::Layout(other)),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut image = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let px = &buf[y * info.line_size + x * channels..];
            for c in 0..3 {
                let v = if channels < 3 { px[0] } else { px[c] };
                image.set(c, y, x, v as f32 / 255.0);
            }
        }
    }
    Ok(image)
}

pub fn write_rgb_png(path: &Path, image: &Image) -> Result<(), PngError> {
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut data = Vec::with_capacity(3 * image.height * image.width);
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..3 {
                data.push((image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    enc.write_header()?.write_image_data(&data)?;
    Ok(())
}

/// Writes a binary mask as an 8-bit greyscale PNG with values 0 and 255.
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<(), PngError> {
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), mask.width as u32, mask.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    enc.write_header()?.write_image_data(&data)?;
    Ok(())
}

/// Reads a mask written by [`write_mask_png`]; any non-zero pixel is set.
pub fn read_mask_png(path: &Path) -> Result<Mask, PngError> {
    let image = read_png(path)?;
    let bits = (0..image.height * image.width).map(|i| image.pixels[i] > 0.0).collect();
    Ok(Mask {
        height: image.height,
        width: image.width,
        bits,
    })
}
