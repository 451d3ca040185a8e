//! Dice and IoU on binary masks, and cross-fold aggregation.

use serde::{Deserialize, Serialize};

use crate::data::{FoldAssignment, ForgerySample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} bits for a {height}×{width} mask",
                bits.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    /// From an `H × W` map of `{0, 1}` values (anything ≥ 0.5 counts as set).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        binarize(t, 0.5)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `p ≥ threshold` pixelwise.
pub fn binarize(pred: &Tensor, threshold: f64) -> Result<BinaryMask> {
    let (h, w) = match *pred.shape() {
        [h, w] => (h, w),
        [1, h, w] => (h, w),
        _ => {
            return Err(Error::Dimension(format!(
                "expected an H×W map, got {:?}",
                pred.shape()
            )))
        }
    };
    BinaryMask::new(h, w, pred.data().iter().map(|&p| p >= threshold).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// `pred` against `target`.
    pub fn between(pred: &BinaryMask, target: &BinaryMask) -> Result<Self> {
        if (pred.height, pred.width) != (target.height, target.width) {
            return Err(Error::Dimension(format!(
                "mask {}×{} vs {}×{}",
                pred.height, pred.width, target.height, target.width
            )));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &t) in pred.bits.iter().zip(&target.bits) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn dsc(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return 1.0;
        }
        2.0 * self.tp as f64 / denom as f64
    }

    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            return 1.0;
        }
        self.tp as f64 / denom as f64
    }
}

pub fn dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    Ok(ConfusionCounts::between(a, b)?.dsc())
}

pub fn miou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    Ok(ConfusionCounts::between(a, b)?.iou())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub samples: usize,
    /// Fractions in `[0, 1]`.
    pub dsc: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub folds: Vec<FoldMetrics>,
    /// Percentages.
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub miou_mean: f64,
    pub miou_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_folds(dataset: impl Into<String>, folds: Vec<FoldMetrics>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Contract("no folds to aggregate".into()));
        }
        let d: Vec<f64> = folds.iter().map(|f| 100.0 * f.dsc).collect();
        let m: Vec<f64> = folds.iter().map(|f| 100.0 * f.miou).collect();
        let (dsc_mean, dsc_std) = mean_std(&d);
        let (miou_mean, miou_std) = mean_std(&m);
        Ok(MetricsReport {
            dataset: dataset.into(),
            folds,
            dsc_mean,
            dsc_std,
            miou_mean,
            miou_std,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,fold,dsc,miou\n");
        for f in &self.folds {
            out.push_str(&format!(
                "{},{},{:.1},{:.1}\n",
                self.dataset,
                f.fold,
                100.0 * f.dsc,
                100.0 * f.miou
            ));
        }
        out.push_str(&format!(
            "{},mean,{:.1} ({:.1}),{:.1} ({:.1})\n",
            self.dataset, self.dsc_mean, self.dsc_std, self.miou_mean, self.miou_std
        ));
        out
    }
}

/// Score each fold's held-out samples with that fold's predictor.
///
/// `predict(fold, sample)` returns an `H × W` probability map.
pub fn evaluate(
    dataset: &str,
    samples: &[ForgerySample],
    folds: &FoldAssignment,
    threshold: f64,
    predict: &mut dyn FnMut(usize, &ForgerySample) -> Result<Tensor>,
) -> Result<MetricsReport> {
    let mut per_fold = Vec::with_capacity(folds.k);
    for fold in 0..folds.k {
        let (_, test) = folds.split(samples, fold);
        if test.is_empty() {
            return Err(Error::Contract(format!(
                "fold {fold} has no held-out samples"
            )));
        }
        let (mut d, mut m) = (0.0, 0.0);
        for s in &test {
            let pred = binarize(&predict(fold, s)?, threshold)?;
            let target = BinaryMask::from_tensor(&s.mask)?;
            let c = ConfusionCounts::between(&pred, &target)?;
            d += c.dsc();
            m += c.iou();
        }
        let n = test.len() as f64;
        per_fold.push(FoldMetrics {
            fold,
            samples: test.len(),
            dsc: d / n,
            miou: m / n,
        });
    }
    MetricsReport::from_folds(dataset, per_fold)
}
