use std::fmt;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};
use serde_json::json;

use supervessel::checkpoint::{load_checkpoint, save_checkpoint};
use supervessel::data::{
    default_train_count, generate_synthetic, image_to_map, load_manifest, read_mask, Dataset, DatasetManifest,
    ManifestEntry, Split, SyntheticConfig,
};
use supervessel::engine::{
    deterministic_requested, evaluate_model, predict_hr, run_ablation, train_with, write_run_dir, RunConfig,
    TrainConfig,
};
use supervessel::metrics::THRESHOLD;
use supervessel::model::{Branches, ModelConfig, ModelHandle, Phase};
use supervessel::overlay::{render_overlay, Background, OverlaySpec};
use supervessel::Error;

use crate::{AblationArgs, EvalArgs, OverlayArgs, ParamsArgs, PredictArgs, SplitArg, SynthArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad paths, refused overwrites, malformed files.
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Load { .. } | Error::Json(_) | Error::Validation(_) => 2,
                Error::Config(_) | Error::MissingBranch(_) => 3,
                Error::Diverged { .. } => 4,
                _ => 1,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Contents of a `--config` file. Both sections are optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: FileConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
    Ok(cfg)
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Usage(format!(
                "{} is not empty (pass --force to write into it)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn load_data(manifest: &Path) -> Result<(DatasetManifest, Dataset)> {
    let m = load_manifest(manifest)?;
    let data = Dataset::load(&m)?;
    Ok((m, data))
}

fn check_channels(model: &ModelConfig, manifest: &DatasetManifest) -> Result<()> {
    if model.in_channels != manifest.in_channels {
        return Err(Error::Config(format!(
            "model expects {} input channels, manifest provides {}",
            model.in_channels, manifest.in_channels
        ))
        .into());
    }
    Ok(())
}

/// Resolves the model and training configuration of a run from the config
/// file and command-line overrides. The model's branches follow
/// `train.ablation`.
fn run_configs(args: &TrainArgs) -> Result<(ModelConfig, TrainConfig)> {
    let FileConfig { model, mut train } = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        train.seed = seed;
    }
    if let Some(spec) = &args.ablation {
        train.ablation.apply_overrides(spec)?;
    }
    train.validate()?;
    let model = train.model_config(&model);
    model.validate()?;
    Ok((model, train))
}

pub fn train(args: TrainArgs) -> Result<()> {
    let (model_cfg, train_cfg) = run_configs(&args)?;
    let (manifest, data) = load_data(&args.manifest)?;
    check_channels(&model_cfg, &manifest)?;
    prepare_out_dir(&args.out, args.force)?;

    let model = supervessel::build_model(&model_cfg, train_cfg.seed)?;
    let steps_per_epoch = data.train.len().div_ceil(train_cfg.batch_size);
    let outcome = train_with(model, &data, &train_cfg, |rec| {
        if (rec.step + 1) % steps_per_epoch == 0 {
            eprintln!(
                "epoch {:>4}  step {:>6}  lr {:.3e}  loss {:.5}",
                rec.epoch, rec.step, rec.lr, rec.total
            );
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(Error::Diverged { step, term, last_good }) => {
            let path = args.out.join("checkpoints").join("last_good.ckpt");
            std::fs::create_dir_all(path.parent().expect("checkpoint dir"))?;
            save_checkpoint(&last_good, &path)?;
            eprintln!("saved last finite parameters to {}", path.display());
            return Err(Error::Diverged { step, term, last_good }.into());
        }
        Err(e) => return Err(e.into()),
    };

    let metrics = if data.test.is_empty() {
        None
    } else {
        Some(evaluate_model(&outcome.best, &data.test)?)
    };
    let run = RunConfig {
        model: model_cfg,
        train: train_cfg,
        dataset: args.manifest.display().to_string(),
        deterministic: deterministic_requested(),
    };
    let files = write_run_dir(&args.out, &run, &outcome, metrics.as_ref())?;
    if let Some(m) = &metrics {
        print!("{}", m.to_csv());
    }
    eprintln!("best checkpoint (epoch {}): {}", outcome.best_epoch, files.best.display());
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let (manifest, data) = load_data(&args.manifest)?;
    check_channels(&model.config, &manifest)?;
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(CliError::Usage(format!("manifest has no {split:?} entries").to_lowercase()));
    }
    let report = evaluate_model(&model, samples)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(args.out.join("metrics.csv"), report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn file_stem(path: &Path) -> Result<String> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| CliError::Usage(format!("{} has no file name", path.display())))
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{} does not exist", path.display())));
    }
    Ok(image::open(path)?)
}

/// Vessel probabilities of one LR image at `factor` times its size.
fn vessel_probability(model: &ModelHandle, path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = open_image(path)?;
    let x = image_to_map(&img, model.config.in_channels)?;
    let n = model.config.upscale_factor;
    let (h, w) = (x.height() * n, x.width() * n);
    let probs = predict_hr(model, &x, [h, w])?;
    Ok((h, w, probs.plane(0, 1).to_vec()))
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    std::fs::create_dir_all(&args.out)?;
    for path in &args.images {
        let stem = file_stem(path)?;
        let (h, w, p) = vessel_probability(&model, path)?;
        let mask: Vec<u8> = p.iter().map(|&v| if v >= THRESHOLD { 255 } else { 0 }).collect();
        let prob: Vec<u16> = p.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
        let mask = GrayImage::from_raw(w as u32, h as u32, mask).expect("mask buffer size");
        let prob: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(w as u32, h as u32, prob).expect("prob buffer size");
        let mask_path = args.out.join(format!("{stem}_mask.png"));
        mask.save(&mask_path)?;
        prob.save(args.out.join(format!("{stem}_prob.png")))?;
        println!("{}", mask_path.display());
    }
    Ok(())
}

fn read_mask_arg(path: &Path) -> Result<supervessel::data::Mask> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{} does not exist", path.display())));
    }
    Ok(read_mask(path)?)
}

pub fn overlay(args: OverlayArgs) -> Result<()> {
    let pred = read_mask_arg(&args.pred)?;
    let gt = read_mask_arg(&args.gt)?;
    let under = match &args.background {
        Some(p) => Some(image_to_map(&open_image(p)?, 3)?),
        None => None,
    };
    let spec = OverlaySpec {
        background: if under.is_some() { Background::Original } else { Background::Black },
        ..OverlaySpec::default()
    };
    let img = render_overlay(&pred, &gt, &spec, under.as_ref())?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save(&args.out)?;
    Ok(())
}

pub fn params(args: ParamsArgs) -> Result<()> {
    let (train, test) = match (&args.checkpoint, &args.config) {
        (Some(ckpt), _) => {
            let h = load_checkpoint(ckpt)?;
            let test = h.count_parameters(Phase::Test).expect("test count always available");
            (h.count_parameters(Phase::Train), test)
        }
        (None, Some(cfg)) => {
            let model = read_config(Some(cfg))?.model;
            model.validate()?;
            (
                Some(ModelHandle::expected_parameters(&model, Phase::Train)),
                ModelHandle::expected_parameters(&model, Phase::Test),
            )
        }
        (None, None) => unreachable!("clap requires one of --checkpoint/--config"),
    };
    let report = json!({
        "train": train,
        "test": test,
        "difference": train.map(|t| t - test),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_images: args.n,
        hr_size: [args.size, args.size],
        channels: args.channels,
        lr_factor: args.factor,
        seed: args.seed,
        ..SyntheticConfig::default()
    };
    cfg.validate()?;
    if args.n == 0 {
        return Err(Error::Config("--n must be >= 1".into()).into());
    }
    prepare_out_dir(&args.out, args.force)?;
    let samples = generate_synthetic(&cfg)?;
    std::fs::create_dir_all(args.out.join("images"))?;
    std::fs::create_dir_all(args.out.join("masks"))?;
    let n_train = default_train_count(samples.len());
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = (s.hr_image.height(), s.hr_image.width());
        let image = PathBuf::from("images").join(format!("{i:04}.png"));
        let mask = PathBuf::from("masks").join(format!("{i:04}.png"));
        let img = &s.hr_image;
        if args.channels == 1 {
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u16(img.get(0, 0, y as usize, x as usize))]));
            buf.save(args.out.join(&image))?;
        } else {
            let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Rgb(std::array::from_fn(|c| to_u16(img.get(0, c, y as usize, x as usize))))
            });
            buf.save(args.out.join(&image))?;
        }
        let m: Vec<u8> = s.hr_mask.data.iter().map(|&v| v * 255).collect();
        GrayImage::from_raw(w as u32, h as u32, m)
            .expect("mask buffer size")
            .save(args.out.join(&mask))?;
        entries.push(ManifestEntry {
            image,
            mask,
            split: if i < n_train { Split::Train } else { Split::Test },
        });
    }
    let manifest = DatasetManifest {
        name: format!("synthetic-{}", args.seed),
        hr_size: cfg.hr_size,
        lr_factor: cfg.lr_factor,
        lr_size: None,
        in_channels: cfg.channels,
        entries,
    };
    let path = args.out.join("manifest.json");
    std::fs::write(&path, manifest.to_json_pretty()? + "\n")?;
    println!("{}", path.display());
    Ok(())
}

pub fn ablation(args: AblationArgs) -> Result<()> {
    let FileConfig { model, train } = read_config(args.config.as_deref())?;
    train.validate()?;
    model.validate()?;
    let (manifest, data) = load_data(&args.manifest)?;
    check_channels(&model, &manifest)?;
    prepare_out_dir(&args.out, args.force)?;
    let base_model = ModelConfig {
        branches: Branches::FULL,
        ..model
    };
    let table = run_ablation(&data, &base_model, &train, &args.seeds)?;
    std::fs::write(args.out.join("ablation.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    std::fs::write(args.out.join("ablation.csv"), table.to_csv())?;
    print!("{}", table.to_csv());
    Ok(())
}
