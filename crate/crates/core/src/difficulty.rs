//! Edge-aware difficulty scoring of the global prior map.
//!
//! The prior is differentiated twice with Sobel filters, a level-set curvature
//! is formed from the derivatives, and its edge-weighted mean decides whether
//! the sample is "hard" or "easy". Everything here is plain arithmetic on
//! detached values; no gradient flows through the verdict.

use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Sobel x-kernel in correlation convention; the y-kernel is its transpose.
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureMode {
    /// Numerator `Gx²·Gyy − 2·Gx·Gy + Gy²·Gxx`.
    AsWritten,
    /// Numerator `Gx²·Gyy − 2·Gx·Gy·Gxy + Gy²·Gxx`.
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifficultyLabel {
    Hard,
    Easy,
}

impl DifficultyLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            DifficultyLabel::Hard => "hard",
            DifficultyLabel::Easy => "easy",
        }
    }

    /// Row of the text-embedding table.
    pub fn index(self) -> usize {
        match self {
            DifficultyLabel::Hard => 0,
            DifficultyLabel::Easy => 1,
        }
    }
}

impl std::fmt::Display for DifficultyLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyConfig {
    pub threshold: f64,
    pub epsilon: f64,
    pub mode: CurvatureMode,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        DifficultyConfig {
            threshold: 0.5,
            epsilon: DEFAULT_EPSILON,
            mode: CurvatureMode::AsWritten,
        }
    }
}

impl DifficultyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0,1), got {}",
                self.threshold
            )));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Stride-32 foreground probabilities, `h × w`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalPriorMap {
    map: Tensor,
}

impl GlobalPriorMap {
    pub fn new(height: usize, width: usize, probabilities: Vec<f64>) -> Result<Self> {
        let map = Tensor::new(&[height, width], probabilities)?;
        if map.data().iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::Contract(
                "prior probabilities must lie strictly inside (0,1)".into(),
            ));
        }
        Ok(GlobalPriorMap { map })
    }

    /// Accepts boundary values; used when the map comes from an external file.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let map = Tensor::new(&[height, width], values)?;
        if !map.all_finite() {
            return Err(Error::NonFinite(
                "prior map contains NaN or infinity".into(),
            ));
        }
        Ok(GlobalPriorMap { map })
    }

    pub fn height(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.map.shape()[1]
    }

    pub fn values(&self) -> &[f64] {
        self.map.data()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.map
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeStack {
    pub gx: Tensor,
    pub gy: Tensor,
    pub gxx: Tensor,
    pub gxy: Tensor,
    pub gyx: Tensor,
    pub gyy: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureField {
    pub kappa: Tensor,
    pub edge: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyVerdict {
    pub score: f64,
    pub label: DifficultyLabel,
    pub threshold: f64,
}

fn map_dims(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::Dimension(format!(
            "expected a non-empty 2-D map, got shape {:?}",
            t.shape()
        ))),
    }
}

/// Sobel derivatives with replicate padding; works for any non-empty map.
pub(crate) fn sobel_any(map: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w) = map_dims(map)?;
    let d = map.data();
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        d[y * w + x]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    let v = at(y as isize + i as isize - 1, x as isize + j as isize - 1);
                    sx += SOBEL_X[i][j] * v;
                    sy += SOBEL_X[j][i] * v;
                }
            }
            gx[y * w + x] = sx;
            gy[y * w + x] = sy;
        }
    }
    Ok((
        Tensor::from_parts(vec![h, w], gx),
        Tensor::from_parts(vec![h, w], gy),
    ))
}

/// `(∂/∂x, ∂/∂y)` of a map at least 3×3.
pub fn sobel(map: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w) = map_dims(map)?;
    if h < 3 || w < 3 {
        return Err(Error::Dimension(format!(
            "sobel needs at least 3×3, got {h}×{w}"
        )));
    }
    sobel_any(map)
}

pub fn derivative_stack(g: &Tensor) -> Result<DerivativeStack> {
    let (gx, gy) = sobel_any(g)?;
    let (gxx, gxy) = sobel_any(&gx)?;
    let (gyx, gyy) = sobel_any(&gy)?;
    Ok(DerivativeStack {
        gx,
        gy,
        gxx,
        gxy,
        gyx,
        gyy,
    })
}

pub fn curvature(stack: &DerivativeStack, eps: f64, mode: CurvatureMode) -> Result<Tensor> {
    let shape = stack.gx.shape();
    for t in [&stack.gy, &stack.gxx, &stack.gxy, &stack.gyx, &stack.gyy] {
        if t.shape() != shape {
            return Err(Error::Dimension("derivative stack shapes differ".into()));
        }
    }
    let n = stack.gx.len();
    let kappa = (0..n)
        .map(|i| {
            let (gx, gy) = (stack.gx.data()[i], stack.gy.data()[i]);
            let (gxx, gyy) = (stack.gxx.data()[i], stack.gyy.data()[i]);
            let cross = match mode {
                CurvatureMode::AsWritten => 2.0 * gx * gy,
                CurvatureMode::Standard => 2.0 * gx * gy * stack.gxy.data()[i],
            };
            let num = gx * gx * gyy - cross + gy * gy * gxx;
            let den = (gx * gx + gy * gy).powf(1.5).max(eps);
            num / den
        })
        .collect();
    Ok(Tensor::from_parts(shape.to_vec(), kappa))
}

pub fn edge_magnitude(stack: &DerivativeStack) -> Tensor {
    stack.gx.zip_map(&stack.gy, |a, b| (a * a + b * b).sqrt())
}

pub fn curvature_field(g: &Tensor, eps: f64, mode: CurvatureMode) -> Result<CurvatureField> {
    let stack = derivative_stack(g)?;
    Ok(CurvatureField {
        kappa: curvature(&stack, eps, mode)?,
        edge: edge_magnitude(&stack),
    })
}

/// Edge-weighted mean curvature through a sigmoid; `0` when the map has no edges.
pub fn difficulty_score(field: &CurvatureField, eps: f64) -> Result<f64> {
    if field.kappa.shape() != field.edge.shape() {
        return Err(Error::Dimension(
            "curvature and edge maps differ in shape".into(),
        ));
    }
    let total_edge: f64 = field.edge.sum();
    if total_edge < eps {
        return Ok(0.0);
    }
    let weighted: f64 = field
        .kappa
        .data()
        .iter()
        .zip(field.edge.data())
        .map(|(k, e)| k * e)
        .sum();
    Ok(sigmoid(weighted / total_edge))
}

pub fn classify(score: f64, threshold: f64) -> DifficultyVerdict {
    let label = if score >= threshold {
        DifficultyLabel::Hard
    } else {
        DifficultyLabel::Easy
    };
    DifficultyVerdict {
        score,
        label,
        threshold,
    }
}

/// The full pipeline from a prior map to a verdict.
pub fn assess(prior: &GlobalPriorMap, cfg: &DifficultyConfig) -> Result<DifficultyVerdict> {
    let field = curvature_field(prior.as_tensor(), cfg.epsilon, cfg.mode)?;
    let s = difficulty_score(&field, cfg.epsilon)?;
    Ok(classify(s, cfg.threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Tensor {
        Tensor::from_fn(&[n, n], |i| (i % n) as f64)
    }

    #[test]
    fn ramp_derivatives() {
        let (gx, gy) = sobel(&ramp(5)).unwrap();
        for y in 1..4 {
            for x in 1..4 {
                assert_eq!(gx.data()[y * 5 + x], 8.0);
                assert_eq!(gy.data()[y * 5 + x], 0.0);
            }
        }
    }

    #[test]
    fn small_maps_rejected_by_public_sobel() {
        assert!(matches!(
            sobel(&Tensor::zeros(&[2, 5])),
            Err(Error::Dimension(_))
        ));
        assert!(sobel_any(&Tensor::zeros(&[2, 2])).is_ok());
    }

    #[test]
    fn flat_map_is_easy_with_zero_score() {
        let prior = GlobalPriorMap::new(8, 8, vec![0.3; 64]).unwrap();
        let v = assess(&prior, &DifficultyConfig::default()).unwrap();
        assert_eq!(v.score, 0.0);
        assert_eq!(v.label, DifficultyLabel::Easy);
    }

    #[test]
    fn boundary_is_hard() {
        assert_eq!(classify(0.5, 0.5).label, DifficultyLabel::Hard);
        assert_eq!(classify(0.4999, 0.5).label, DifficultyLabel::Easy);
        assert_eq!(classify(0.0, 0.5).label, DifficultyLabel::Easy);
    }

    #[test]
    fn straight_level_sets_have_zero_curvature() {
        let f = curvature_field(
            &ramp(6).scale(0.25),
            DEFAULT_EPSILON,
            CurvatureMode::AsWritten,
        )
        .unwrap();
        assert!(f.kappa.data().iter().all(|&k| k == 0.0));
        let s = difficulty_score(&f, DEFAULT_EPSILON).unwrap();
        assert_eq!(s, 0.5);
    }
}
