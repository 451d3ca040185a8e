//! Image/mask corpora on disk, synthetic forgeries and k-fold splits.

pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{self, Tensor};

pub use synth::{synth_copy_move, synth_splice, CopyMoveMeta, SpliceMeta, SynthKind, Transform};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeryType {
    CopyMove,
    Splice,
    Unknown,
}

impl ForgeryType {
    pub fn as_str(self) -> &'static str {
        match self {
            ForgeryType::CopyMove => "copy_move",
            ForgeryType::Splice => "splice",
            ForgeryType::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> ForgeryType {
        match s.trim() {
            "copy_move" | "cm" | "CM" => ForgeryType::CopyMove,
            "splice" | "sp" | "SP" => ForgeryType::Splice,
            _ => ForgeryType::Unknown,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgerySample {
    pub id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]`, values in `{0, 1}`.
    pub mask: Tensor,
    pub forgery_type: ForgeryType,
}

impl ForgerySample {
    pub fn new(
        id: impl Into<String>,
        image: Tensor,
        mask: Tensor,
        forgery_type: ForgeryType,
    ) -> Result<Self> {
        let (c, h, w) = match *image.shape() {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::Dimension(format!(
                    "image must be 3×H×W, got {:?}",
                    image.shape()
                )))
            }
        };
        if c != 3 {
            return Err(Error::Dimension(format!(
                "image must have 3 channels, got {c}"
            )));
        }
        if mask.shape() != [h, w] {
            return Err(Error::Dimension(format!(
                "mask {:?} does not match image {h}×{w}",
                mask.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("mask values must be 0 or 1".into()));
        }
        Ok(ForgerySample {
            id: id.into(),
            image,
            mask,
            forgery_type,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[1]
    }
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub samples: Vec<ForgerySample>,
    /// Images without a matching mask.
    pub skipped: Vec<PathBuf>,
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// Read an RGB image as `[3, h, w]` in `[0, 1]`, bilinearly resized to `size` if given.
pub fn read_image(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor> {
    let rgb = decode(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut planes = vec![0.0; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            planes[c * h * w + i] = px.0[c] as f64 / 255.0;
        }
    }
    let t = Tensor::new(&[3, h, w], planes)?;
    Ok(match size {
        Some((oh, ow)) if (oh, ow) != (h, w) => Tensor::new(
            &[3, oh, ow],
            tensor::resize_bilinear_forward(t.data(), 3, h, w, oh, ow),
        )?,
        _ => t,
    })
}

/// Read an 8-bit mask, nearest-neighbour resize, threshold at 0.5.
pub fn read_mask(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor> {
    let luma = decode(path)?.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    let (oh, ow) = size.unwrap_or((h, w));
    let ys = nearest_indices(h, oh);
    let xs = nearest_indices(w, ow);
    let raw = luma.as_raw();
    let mut out = Vec::with_capacity(oh * ow);
    for &y in &ys {
        for &x in &xs {
            out.push(if raw[y * w + x] as f64 / 255.0 >= 0.5 {
                1.0
            } else {
                0.0
            });
        }
    }
    Tensor::new(&[oh, ow], out)
}

fn nearest_indices(input: usize, output: usize) -> Vec<usize> {
    (0..output)
        .map(|o| {
            (((o as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
        })
        .collect()
}

fn read_manifest(root: &Path) -> Result<BTreeMap<String, ForgeryType>> {
    let path = root.join("manifest.csv");
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    for line in text.lines().skip(1) {
        if let Some((id, kind)) = line.split_once(',') {
            out.insert(id.trim().to_string(), ForgeryType::parse(kind));
        }
    }
    Ok(out)
}

/// Load `<root>/images/<id>.<ext>` with `<root>/masks/<id>.png`, sorted by id.
pub fn load_corpus(root: &Path, size: (usize, usize)) -> Result<Corpus> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    let entries = std::fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut images: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&images_dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            images.push((stem.to_string(), path));
        }
    }
    images.sort();
    let manifest = read_manifest(root)?;
    let mut corpus = Corpus::default();
    for (id, path) in images {
        let mask_path = masks_dir.join(format!("{id}.png"));
        if !mask_path.exists() {
            corpus.skipped.push(path);
            continue;
        }
        let image = read_image(&path, Some(size))?;
        let mask = read_mask(&mask_path, Some(size))?;
        let kind = manifest.get(&id).copied().unwrap_or(ForgeryType::Unknown);
        corpus
            .samples
            .push(ForgerySample::new(id, image, mask, kind)?);
    }
    Ok(corpus)
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write `images/<id>.png` and `masks/<id>.png` under `root`.
pub fn write_sample(root: &Path, sample: &ForgerySample) -> Result<()> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    for d in [&images_dir, &masks_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let (h, w) = (sample.height(), sample.width());
    let plane = h * w;
    let d = sample.image.data();
    let rgb: Vec<u8> = (0..plane)
        .flat_map(|i| [to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, rgb).expect("buffer sized from dims");
    let img_path = images_dir.join(format!("{}.png", sample.id));
    img.save(&img_path).map_err(|e| Error::Image {
        path: img_path.clone(),
        message: e.to_string(),
    })?;
    let mask: Vec<u8> = sample
        .mask
        .data()
        .iter()
        .map(|&v| if v >= 0.5 { 255 } else { 0 })
        .collect();
    let m = image::GrayImage::from_raw(w as u32, h as u32, mask).expect("buffer sized from dims");
    let mask_path = masks_dir.join(format!("{}.png", sample.id));
    m.save(&mask_path).map_err(|e| Error::Image {
        path: mask_path.clone(),
        message: e.to_string(),
    })
}

pub fn write_manifest(root: &Path, samples: &[ForgerySample]) -> Result<()> {
    let path = root.join("manifest.csv");
    let mut text = String::from("id,forgery_type\n");
    for s in samples {
        text.push_str(&format!("{},{}\n", s.id, s.forgery_type.as_str()));
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Generate `count` synthetic samples; `kind` Mixed alternates copy-move and splice.
pub fn generate(count: usize, size: usize, kind: SynthKind, seed: u64) -> Vec<ForgerySample> {
    (0..count)
        .map(|i| {
            let s = seed::component_seed(seed, &format!("synthetic/{i}"));
            let id = format!("syn_{i:05}");
            let copy_move = match kind {
                SynthKind::CopyMove => true,
                SynthKind::Splice => false,
                SynthKind::Mixed => i % 2 == 0,
            };
            let mut sample = if copy_move {
                synth_copy_move(s, size).0
            } else {
                synth_splice(s, size).0
            };
            sample.id = id;
            sample
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub fold_of: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn test_ids(&self, fold: usize) -> Vec<&str> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn train_ids(&self, fold: usize) -> Vec<&str> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.fold_of.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Split `samples` into `(train, test)` for `fold`.
    pub fn split<'a>(
        &self,
        samples: &'a [ForgerySample],
        fold: usize,
    ) -> (Vec<&'a ForgerySample>, Vec<&'a ForgerySample>) {
        samples
            .iter()
            .partition(|s| self.fold_of.get(&s.id).is_some_and(|&f| f != fold))
    }
}

/// Seeded shuffle, then round-robin fold assignment.
pub fn kfold(ids: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::Config(format!(
            "{} samples cannot fill {k} folds",
            ids.len()
        )));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::Contract("sample ids must be unique".into()));
    }
    let mut rng = seed::component_rng(seed, "kfold");
    sorted.shuffle(&mut rng);
    let fold_of = sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % k))
        .collect();
    Ok(FoldAssignment { k, seed, fold_of })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn fold_sizes() {
        assert_eq!(kfold(&ids(10), 5, 1).unwrap().fold_sizes(), vec![2; 5]);
        let mut s = kfold(&ids(11), 5, 1).unwrap().fold_sizes();
        s.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(s, vec![3, 2, 2, 2, 2]);
        assert_eq!(
            kfold(&ids(11), 5, 9).unwrap(),
            kfold(&ids(11), 5, 9).unwrap()
        );
        assert!(matches!(kfold(&ids(3), 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_resize_keeps_labels() {
        assert_eq!(nearest_indices(4, 2), vec![1, 3]);
        assert_eq!(nearest_indices(2, 4), vec![0, 0, 1, 1]);
    }
}
