//! Run configuration files.
//!
//! Every field is optional in the file; missing fields take the defaults of
//! the selected scale preset (full when unspecified). Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ScalePreset};
use crate::difficulty::{CurvatureMode, DifficultyConfig};
use crate::error::{Error, Result};
use crate::m2s::{DctConvention, M2SConfig};
use crate::model::{DecoderConfig, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub resolution: usize,
    pub folds: usize,
    pub val_fold: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            resolution: 256,
            folds: 5,
            val_fold: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl RunConfig {
    pub fn preset(p: ScalePreset) -> Self {
        resolve(RunFile {
            model: Some(ModelFile {
                preset: Some(p),
                ..Default::default()
            }),
            ..Default::default()
        })
    }

    pub fn preset_kind(&self) -> ScalePreset {
        self.model.backbone.scale_preset
    }

    /// Range checks plus existence of referenced paths.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.resolution == 0 || d.resolution % 32 != 0 {
            return Err(Error::Config(format!(
                "data.resolution must be a positive multiple of 32, got {}",
                d.resolution
            )));
        }
        if d.folds < 2 {
            return Err(Error::Config(format!(
                "data.folds must be at least 2, got {}",
                d.folds
            )));
        }
        if d.val_fold >= d.folds {
            return Err(Error::Config(format!(
                "data.val_fold {} out of range for {} folds",
                d.val_fold, d.folds
            )));
        }
        if let Some(root) = &d.root {
            if !root.is_dir() {
                return Err(Error::Config(format!(
                    "data.root {} is not a directory",
                    root.display()
                )));
            }
        }
        if let Some(f) = &self.model.decoder.embedding_file {
            if !f.is_file() {
                return Err(Error::Config(format!(
                    "model.embedding_file {} does not exist",
                    f.display()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&to_file(self)).expect("config serialises")
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub preset: Option<ScalePreset>,
    pub encoder_channels: Option<[usize; 4]>,
    pub decoder_channels: Option<[usize; 3]>,
    pub stage_depths: Option<[usize; 4]>,
    pub attention_heads: Option<[usize; 4]>,
    pub mlp_ratios: Option<[usize; 4]>,
    pub sr_ratios: Option<[usize; 4]>,
    pub decoder_depths: Option<[usize; 3]>,
    pub decoder_heads: Option<[usize; 3]>,
    pub decoder_mlp_ratios: Option<[usize; 3]>,
    pub decoder_sr_ratios: Option<[usize; 3]>,
    pub reduced_channels: Option<usize>,
    pub target_divisor: Option<usize>,
    pub num_frequencies: Option<usize>,
    pub pyramid_levels: Option<usize>,
    pub channel_decay: Option<f64>,
    pub min_channels: Option<usize>,
    pub min_height: Option<usize>,
    pub min_width: Option<usize>,
    pub reduction_ratio: Option<usize>,
    pub dct_convention: Option<DctConvention>,
    pub text_dim: Option<usize>,
    pub threshold: Option<f64>,
    pub curvature_epsilon: Option<f64>,
    pub curvature_mode: Option<CurvatureMode>,
    pub embedding_file: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub initial_lr: Option<f64>,
    pub final_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub loss_epsilon: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_epsilon: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFile {
    pub root: Option<PathBuf>,
    pub resolution: Option<usize>,
    pub folds: Option<usize>,
    pub val_fold: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub model: Option<ModelFile>,
    pub train: Option<TrainFile>,
    pub data: Option<DataFile>,
}

fn resolve(f: RunFile) -> RunConfig {
    let m = f.model.unwrap_or_default();
    let preset = m.preset.unwrap_or(ScalePreset::Full);
    let bb = BackboneConfig::preset(preset);
    let m2 = match preset {
        ScalePreset::Toy => M2SConfig::toy(),
        ScalePreset::Full => M2SConfig::default(),
    };
    let dd = DecoderConfig::default();
    let model = ModelConfig {
        backbone: BackboneConfig {
            scale_preset: preset,
            encoder_channels: m.encoder_channels.unwrap_or(bb.encoder_channels),
            decoder_channels: m.decoder_channels.unwrap_or(bb.decoder_channels),
            stage_depths: m.stage_depths.unwrap_or(bb.stage_depths),
            attention_heads: m.attention_heads.unwrap_or(bb.attention_heads),
            mlp_ratios: m.mlp_ratios.unwrap_or(bb.mlp_ratios),
            sr_ratios: m.sr_ratios.unwrap_or(bb.sr_ratios),
            decoder_depths: m.decoder_depths.unwrap_or(bb.decoder_depths),
            decoder_heads: m.decoder_heads.unwrap_or(bb.decoder_heads),
            decoder_mlp_ratios: m.decoder_mlp_ratios.unwrap_or(bb.decoder_mlp_ratios),
            decoder_sr_ratios: m.decoder_sr_ratios.unwrap_or(bb.decoder_sr_ratios),
        },
        m2s: M2SConfig {
            reduced_channels: m.reduced_channels.unwrap_or(m2.reduced_channels),
            target_divisor: m.target_divisor.unwrap_or(m2.target_divisor),
            num_frequencies: m.num_frequencies.unwrap_or(m2.num_frequencies),
            pyramid_levels: m.pyramid_levels.unwrap_or(m2.pyramid_levels),
            channel_decay: m.channel_decay.unwrap_or(m2.channel_decay),
            min_channels: m.min_channels.unwrap_or(m2.min_channels),
            min_height: m.min_height.unwrap_or(m2.min_height),
            min_width: m.min_width.unwrap_or(m2.min_width),
            reduction_ratio: m.reduction_ratio.unwrap_or(m2.reduction_ratio),
            dct_convention: m.dct_convention.unwrap_or(m2.dct_convention),
        },
        decoder: DecoderConfig {
            text_dim: m.text_dim.unwrap_or(dd.text_dim),
            difficulty: DifficultyConfig {
                threshold: m.threshold.unwrap_or(dd.difficulty.threshold),
                epsilon: m.curvature_epsilon.unwrap_or(dd.difficulty.epsilon),
                mode: m.curvature_mode.unwrap_or(dd.difficulty.mode),
            },
            embedding_file: m.embedding_file.or(dd.embedding_file),
        },
    };
    let seed = f.seed.unwrap_or(0);
    let t = f.train.unwrap_or_default();
    let td = TrainConfig::default();
    let batch_default = match preset {
        ScalePreset::Toy => 4,
        ScalePreset::Full => td.batch_size,
    };
    let train = TrainConfig {
        initial_lr: t.initial_lr.unwrap_or(td.initial_lr),
        final_lr: t.final_lr.unwrap_or(td.final_lr),
        batch_size: t.batch_size.unwrap_or(batch_default),
        epochs: t.epochs.unwrap_or(td.epochs),
        seed,
        loss_epsilon: t.loss_epsilon.unwrap_or(td.loss_epsilon),
        adam_beta1: t.adam_beta1.unwrap_or(td.adam_beta1),
        adam_beta2: t.adam_beta2.unwrap_or(td.adam_beta2),
        adam_epsilon: t.adam_epsilon.unwrap_or(td.adam_epsilon),
    };
    let d = f.data.unwrap_or_default();
    let dd = DataConfig::default();
    let data = DataConfig {
        root: d.root.or(dd.root),
        resolution: d.resolution.unwrap_or(dd.resolution),
        folds: d.folds.unwrap_or(dd.folds),
        val_fold: d.val_fold.unwrap_or(dd.val_fold),
    };
    RunConfig {
        model,
        train,
        data,
        output_dir: f.output_dir,
        seed,
    }
}

fn to_file(c: &RunConfig) -> RunFile {
    let b = &c.model.backbone;
    let m = &c.model.m2s;
    let d = &c.model.decoder;
    let t = &c.train;
    RunFile {
        seed: Some(c.seed),
        output_dir: c.output_dir.clone(),
        model: Some(ModelFile {
            preset: Some(b.scale_preset),
            encoder_channels: Some(b.encoder_channels),
            decoder_channels: Some(b.decoder_channels),
            stage_depths: Some(b.stage_depths),
            attention_heads: Some(b.attention_heads),
            mlp_ratios: Some(b.mlp_ratios),
            sr_ratios: Some(b.sr_ratios),
            decoder_depths: Some(b.decoder_depths),
            decoder_heads: Some(b.decoder_heads),
            decoder_mlp_ratios: Some(b.decoder_mlp_ratios),
            decoder_sr_ratios: Some(b.decoder_sr_ratios),
            reduced_channels: Some(m.reduced_channels),
            target_divisor: Some(m.target_divisor),
            num_frequencies: Some(m.num_frequencies),
            pyramid_levels: Some(m.pyramid_levels),
            channel_decay: Some(m.channel_decay),
            min_channels: Some(m.min_channels),
            min_height: Some(m.min_height),
            min_width: Some(m.min_width),
            reduction_ratio: Some(m.reduction_ratio),
            dct_convention: Some(m.dct_convention),
            text_dim: Some(d.text_dim),
            threshold: Some(d.difficulty.threshold),
            curvature_epsilon: Some(d.difficulty.epsilon),
            curvature_mode: Some(d.difficulty.mode),
            embedding_file: d.embedding_file.clone(),
        }),
        train: Some(TrainFile {
            initial_lr: Some(t.initial_lr),
            final_lr: Some(t.final_lr),
            batch_size: Some(t.batch_size),
            epochs: Some(t.epochs),
            loss_epsilon: Some(t.loss_epsilon),
            adam_beta1: Some(t.adam_beta1),
            adam_beta2: Some(t.adam_beta2),
            adam_epsilon: Some(t.adam_epsilon),
        }),
        data: Some(DataFile {
            root: c.data.root.clone(),
            resolution: Some(c.data.resolution),
            folds: Some(c.data.folds),
            val_fold: Some(c.data.val_fold),
        }),
    }
}

/// Parse without validating; errors carry the path of the offending field.
pub fn parse_str(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: RunFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(if path == "." {
            e.inner().to_string()
        } else {
            format!("{path}: {}", e.inner())
        })
    })?;
    Ok(resolve(file))
}

/// Read, resolve defaults and validate.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = parse_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}
