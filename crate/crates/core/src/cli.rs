//! Command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::backbone::{FeatureMap, ScalePreset};
use crate::checkpoint;
use crate::config::{self, RunConfig};
use crate::data::{self, SynthKind};
use crate::difficulty::{self, CurvatureMode, DifficultyConfig, GlobalPriorMap};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{self, M2SFormer};
use crate::tensor::{self, Tensor};
use crate::train::{self, Control};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "m2sformer",
    version,
    about = "Image forgery localization with multi-spectral, multi-scale attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Toy,
    Full,
}

impl From<PresetArg> for ScalePreset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Toy => ScalePreset::Toy,
            PresetArg::Full => ScalePreset::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    #[value(name = "copy_move")]
    CopyMove,
    Splice,
    Mixed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    #[value(name = "as_written")]
    AsWritten,
    Standard,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on one fold split of a corpus.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Held-out validation fold.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Cross-fold evaluation; expects `<checkpoints>/fold<k>/best.ckpt` (or `final.ckpt`).
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value = "dataset")]
        dataset: String,
        /// Also write the CSV report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a mask for one image.
    Predict {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Difficulty verdict for a prior map (CSV grid or grayscale image) or, with
    /// `--checkpoint`, for an input image.
    ScoreDifficulty {
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, value_enum, default_value = "as_written")]
        mode: ModeArg,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Write a synthetic copy-move/splice corpus.
    GenSynthetic {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long = "type", value_enum, default_value = "mixed")]
        kind: KindArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the learnable parameter count.
    CountParams {
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Size the global worker pool from `M2S_NUM_THREADS`.
pub fn init_threads() {
    if let Some(n) = std::env::var("M2S_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            data,
            preset,
            seed,
            out,
            epochs,
            fold,
        } => cmd_train(config, data, preset, seed, out, epochs, fold),
        Command::Eval {
            data,
            checkpoints,
            folds,
            seed,
            size,
            dataset,
            out,
        } => cmd_eval(
            &data,
            &checkpoints,
            folds,
            seed,
            size,
            &dataset,
            out.as_deref(),
        ),
        Command::Predict {
            image,
            checkpoint,
            out,
            size,
        } => cmd_predict(&image, &checkpoint, &out, size),
        Command::ScoreDifficulty {
            input,
            checkpoint,
            threshold,
            mode,
            size,
        } => cmd_score(&input, checkpoint.as_deref(), threshold, mode, size),
        Command::GenSynthetic {
            count,
            size,
            kind,
            seed,
            out,
        } => cmd_gen(count, size, kind, seed, &out),
        Command::CountParams { preset, config } => {
            let cfg = match (config, preset) {
                (Some(path), _) => config::parse_config(&path)?,
                (None, p) => RunConfig::preset(p.map(Into::into).unwrap_or(ScalePreset::Full)),
            };
            println!("{}", model::count_parameters(&cfg.model)?);
            Ok(())
        }
    }
}

fn cmd_train(
    config_path: Option<PathBuf>,
    data: Option<PathBuf>,
    preset: Option<PresetArg>,
    seed: Option<u64>,
    out: PathBuf,
    epochs: Option<usize>,
    fold: Option<usize>,
) -> Result<()> {
    let mut cfg = match (&config_path, preset) {
        (Some(p), _) => config::parse_config(p)?,
        (None, p) => RunConfig::preset(p.map(Into::into).unwrap_or(ScalePreset::Full)),
    };
    if let (Some(_), Some(p)) = (&config_path, preset) {
        if cfg.preset_kind() != ScalePreset::from(p) {
            return Err(Error::Config(
                "--preset conflicts with the preset in --config".into(),
            ));
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(d) = data {
        cfg.data.root = Some(d);
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(f) = fold {
        cfg.data.val_fold = f;
    }
    cfg.output_dir = Some(out.clone());
    cfg.validate()?;
    let root =
        cfg.data.root.clone().ok_or_else(|| {
            Error::Config("no dataset given; pass --data or set data.root".into())
        })?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let snapshot = out.join("config.json");
    std::fs::write(&snapshot, cfg.to_json()).map_err(|e| Error::io(&snapshot, e))?;

    let res = cfg.data.resolution;
    let corpus = data::load_corpus(&root, (res, res))?;
    for s in &corpus.skipped {
        eprintln!("skipped (no mask): {}", s.display());
    }
    if corpus.samples.is_empty() {
        return Err(Error::Config(format!(
            "no image/mask pairs under {}",
            root.display()
        )));
    }
    let ids: Vec<String> = corpus.samples.iter().map(|s| s.id.clone()).collect();
    let folds = data::kfold(&ids, cfg.data.folds, cfg.seed)?;
    let (train_set, val_set) = folds.split(&corpus.samples, cfg.data.val_fold);
    let train_set: Vec<_> = train_set.into_iter().cloned().collect();
    let val_set: Vec<_> = val_set.into_iter().cloned().collect();

    let model = M2SFormer::new(&cfg.model)?;
    let mut params = model.init_params(cfg.seed)?;
    eprintln!(
        "training {} samples, validating {} (fold {}), {} parameters",
        train_set.len(),
        val_set.len(),
        cfg.data.val_fold,
        model.parameter_count()
    );
    let outcome = train::train(
        &model,
        &mut params,
        &train_set,
        &val_set,
        &cfg.train,
        Some(&out),
        &mut |e, _| {
            eprintln!(
                "epoch {:>4}  total {:.5}  main {:.5}  prior {:.5}  lr {:.2e}{}",
                e.epoch,
                e.loss.total,
                e.loss.main_bce,
                e.loss.prior_bce,
                e.lr,
                e.val_dsc
                    .map(|d| format!("  val_dsc {:.4}", d))
                    .unwrap_or_default()
            );
            Control::Continue
        },
    )?;
    if let (Some(d), Some(ep)) = (outcome.best_val_dsc, outcome.best_epoch) {
        println!("best validation DSC {:.4} at epoch {ep}", d);
    }
    Ok(())
}

fn fold_checkpoint(dir: &Path, fold: usize) -> Result<PathBuf> {
    let base = dir.join(format!("fold{fold}"));
    for name in ["best.ckpt", "final.ckpt"] {
        let p = base.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::MissingFold {
        fold,
        path: base.join("best.ckpt"),
    })
}

fn cmd_eval(
    data_dir: &Path,
    checkpoints: &Path,
    k: usize,
    seed: u64,
    size: usize,
    dataset: &str,
    out: Option<&Path>,
) -> Result<()> {
    let corpus = data::load_corpus(data_dir, (size, size))?;
    let ids: Vec<String> = corpus.samples.iter().map(|s| s.id.clone()).collect();
    let folds = data::kfold(&ids, k, seed)?;
    let paths = (0..k)
        .map(|f| fold_checkpoint(checkpoints, f))
        .collect::<Result<Vec<_>>>()?;
    let mut loaded: Option<(usize, M2SFormer, crate::nn::ParamStore)> = None;
    let report = metrics::evaluate(
        dataset,
        &corpus.samples,
        &folds,
        0.5,
        &mut |fold, sample| {
            if loaded.as_ref().is_none_or(|l| l.0 != fold) {
                let (cfg, params) = checkpoint::load(&paths[fold])?;
                let model = M2SFormer::new(&cfg)?;
                model.check_params(&params)?;
                loaded = Some((fold, model, params));
            }
            let (_, model, params) = loaded.as_ref().unwrap();
            let img = FeatureMap::from_tensor(sample.image.clone())?;
            Ok(model.forward(&img, params)?.0.as_tensor().clone())
        },
    )?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(path) = out {
        std::fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(M2SFormer, crate::nn::ParamStore)> {
    let (cfg, params) = checkpoint::load(path)?;
    let model = M2SFormer::new(&cfg)?;
    model.check_params(&params)?;
    Ok((model, params))
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::Config(format!(
            "--size must be a positive multiple of 32, got {size}"
        )));
    }
    Ok(())
}

fn cmd_predict(image: &Path, ckpt: &Path, out: &Path, size: usize) -> Result<()> {
    check_size(size)?;
    let (model, params) = load_model(ckpt)?;
    let original = data::read_image(image, None)?;
    let (oh, ow) = (original.shape()[1], original.shape()[2]);
    let input = data::read_image(image, Some((size, size)))?;
    let (mask, _, verdict) = model.forward(&FeatureMap::from_tensor(input)?, &params)?;
    let probs = if (oh, ow) == (size, size) {
        mask.values().to_vec()
    } else {
        tensor::resize_bilinear_forward(mask.values(), 1, size, size, oh, ow)
    };
    let bytes: Vec<u8> = probs
        .iter()
        .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img =
        image::GrayImage::from_raw(ow as u32, oh as u32, bytes).expect("buffer sized from dims");
    img.save(out).map_err(|e| Error::Image {
        path: out.to_path_buf(),
        message: e.to_string(),
    })?;
    println!("s={} label={}", verdict.score, verdict.label);
    Ok(())
}

fn read_grid(path: &Path) -> Result<GlobalPriorMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>().map_err(|_| {
                    Error::Config(format!(
                        "{}:{}: `{s}` is not a number",
                        path.display(),
                        ln + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let w = rows.first().map_or(0, Vec::len);
    if w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(Error::Config(format!(
            "{}: grid rows must be non-empty and equal length",
            path.display()
        )));
    }
    let h = rows.len();
    GlobalPriorMap::from_values(h, w, rows.into_iter().flatten().collect())
}

fn cmd_score(
    input: &Path,
    ckpt: Option<&Path>,
    threshold: f64,
    mode: ModeArg,
    size: usize,
) -> Result<()> {
    let dcfg = DifficultyConfig {
        threshold,
        mode: match mode {
            ModeArg::AsWritten => CurvatureMode::AsWritten,
            ModeArg::Standard => CurvatureMode::Standard,
        },
        ..Default::default()
    };
    dcfg.validate()?;
    let verdict = if let Some(ckpt) = ckpt {
        check_size(size)?;
        let (mut model, params) = load_model(ckpt)?;
        model.cfg.decoder.difficulty = dcfg;
        let img = data::read_image(input, Some((size, size)))?;
        model.forward(&FeatureMap::from_tensor(img)?, &params)?.2
    } else {
        let ext = input
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        let prior = match ext.as_deref() {
            Some("csv") | Some("txt") => read_grid(input)?,
            _ => {
                let luma = image::open(input)
                    .map_err(|e| Error::Image {
                        path: input.to_path_buf(),
                        message: e.to_string(),
                    })?
                    .to_luma8();
                let (w, h) = (luma.width() as usize, luma.height() as usize);
                let values = luma.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
                GlobalPriorMap::from_values(h, w, values)?
            }
        };
        difficulty::assess(&prior, &dcfg)?
    };
    println!("s={} label={}", verdict.score, verdict.label);
    Ok(())
}

fn cmd_gen(count: usize, size: usize, kind: KindArg, seed: u64, out: &Path) -> Result<()> {
    if size < 32 {
        return Err(Error::Config(format!(
            "--size must be at least 32, got {size}"
        )));
    }
    if count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    let kind = match kind {
        KindArg::CopyMove => SynthKind::CopyMove,
        KindArg::Splice => SynthKind::Splice,
        KindArg::Mixed => SynthKind::Mixed,
    };
    let samples = data::generate(count, size, kind, seed);
    for s in &samples {
        data::write_sample(out, s)?;
    }
    data::write_manifest(out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

/// Prediction tensor helper shared by the FFI layer.
pub fn image_tensor(path: &Path, size: usize) -> Result<Tensor> {
    check_size(size)?;
    data::read_image(path, Some((size, size)))
}
