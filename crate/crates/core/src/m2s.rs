//! Multi-spectral, multi-scale attention on the encoder skip connections.
//!
//! The four stage maps are reduced to `C_r` channels, resized to a common
//! target grid and concatenated into a cross-scale map `f_c`. A DCT-pooled
//! channel attention recalibrates it, a dilated pyramid with foreground and
//! background gates refines it, and the result is split back into four skips.

use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Init, Linear, ParamSpec, ParamStore, Scalar};
use crate::tensor::{ConvSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DctConvention {
    /// `cos(π(h+½)u/H)·cos(π(w+½)v/W)`; the `(0,0)` image is constant.
    Standard,
    /// `cos(πh(u+½)/H)·cos(πw(v+½)/W)`.
    AsWritten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct M2SConfig {
    pub reduced_channels: usize,
    pub target_divisor: usize,
    pub num_frequencies: usize,
    pub pyramid_levels: usize,
    pub channel_decay: f64,
    pub min_channels: usize,
    pub min_height: usize,
    pub min_width: usize,
    pub reduction_ratio: usize,
    pub dct_convention: DctConvention,
}

impl Default for M2SConfig {
    fn default() -> Self {
        M2SConfig {
            reduced_channels: 64,
            target_divisor: 8,
            num_frequencies: 16,
            pyramid_levels: 3,
            channel_decay: 2.0,
            min_channels: 64,
            min_height: 4,
            min_width: 4,
            reduction_ratio: 16,
            dct_convention: DctConvention::Standard,
        }
    }
}

impl M2SConfig {
    pub fn toy() -> Self {
        M2SConfig {
            reduced_channels: 16,
            min_channels: 16,
            ..Self::default()
        }
    }

    /// Width of the cross-scale map, `4·C_r`.
    pub fn cross_channels(&self) -> usize {
        4 * self.reduced_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduced_channels == 0 {
            return Err(Error::Config("reduced_channels must be positive".into()));
        }
        if self.target_divisor == 0 || !self.target_divisor.is_power_of_two() {
            return Err(Error::Config(format!(
                "target_divisor must be a positive power of two, got {}",
                self.target_divisor
            )));
        }
        if self.num_frequencies == 0 {
            return Err(Error::Config("num_frequencies must be positive".into()));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::Config("pyramid_levels must be at least 1".into()));
        }
        if !(self.channel_decay > 1.0) || !self.channel_decay.is_finite() {
            return Err(Error::Config(format!(
                "channel_decay must exceed 1, got {}",
                self.channel_decay
            )));
        }
        if self.min_channels == 0 || self.min_height == 0 || self.min_width == 0 {
            return Err(Error::Config("minimum level sizes must be positive".into()));
        }
        if self.reduction_ratio == 0 {
            return Err(Error::Config("reduction_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Target grid for an `h × w` input image.
    pub fn target_resolution(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h / self.target_divisor == 0 || w / self.target_divisor == 0 {
            return Err(Error::Config(format!(
                "target resolution for divisor {} is empty at input {h}×{w}",
                self.target_divisor
            )));
        }
        Ok((h / self.target_divisor, w / self.target_divisor))
    }

    pub fn level(&self, l: usize, target: (usize, usize)) -> PyramidLevelState {
        let c = self.cross_channels();
        let decayed = (c as f64 / self.channel_decay.powi(l as i32 - 1)).floor() as usize;
        let scale = 1usize << (l - 1);
        PyramidLevelState {
            level: l,
            dilation: 2 * l + 1,
            scale_factor: scale,
            channels: decayed.max(self.min_channels),
            height: (target.0 / scale).max(self.min_height),
            width: (target.1 / scale).max(self.min_width),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PyramidLevelState {
    pub level: usize,
    pub dilation: usize,
    pub scale_factor: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBasis {
    pub frequency_pairs: Vec<(usize, usize)>,
    pub height: usize,
    pub width: usize,
    /// `[K, H, W]`.
    pub images: Rc<Tensor>,
}

impl SpectralBasis {
    pub fn image(&self, k: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.images.data()[k * hw..(k + 1) * hw]
    }

    /// Basis images as little-endian f32, image-major then row-major.
    pub fn to_f32_le_bytes(&self) -> Vec<u8> {
        self.images
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    }
}

/// The first `k` frequency pairs of an `h × w` grid in zigzag order.
pub fn zigzag_pairs(h: usize, w: usize, k: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..h).flat_map(|u| (0..w).map(move |v| (u, v))).collect();
    all.sort_by_key(|&(u, v)| (u + v, u));
    all.truncate(k);
    all
}

pub fn build_dct_basis(
    h: usize,
    w: usize,
    k: usize,
    convention: DctConvention,
) -> Result<SpectralBasis> {
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("empty basis grid {h}×{w}")));
    }
    if k > h * w {
        return Err(Error::Config(format!(
            "{k} frequencies requested but the {h}×{w} grid has {}",
            h * w
        )));
    }
    let pairs = zigzag_pairs(h, w, k);
    let factor = |i: usize, f: usize, n: usize| match convention {
        DctConvention::Standard => (PI * (i as f64 + 0.5) * f as f64 / n as f64).cos(),
        DctConvention::AsWritten => (PI * i as f64 * (f as f64 + 0.5) / n as f64).cos(),
    };
    let mut data = Vec::with_capacity(k * h * w);
    for &(u, v) in &pairs {
        let cols: Vec<f64> = (0..w).map(|x| factor(x, v, w)).collect();
        for y in 0..h {
            let r = factor(y, u, h);
            data.extend(cols.iter().map(|c| r * c));
        }
    }
    Ok(SpectralBasis {
        frequency_pairs: pairs,
        height: h,
        width: w,
        images: Rc::new(Tensor::from_parts(vec![k, h, w], data)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    WeightedSum,
    WeightedMax,
}

/// Project a `C × H × W` map onto every basis image; returns `K` vectors of length `C`.
pub fn spectral_project(
    f_c: &Tensor,
    basis: &SpectralBasis,
    mode: Pooling,
) -> Result<Vec<Vec<f64>>> {
    let s = f_c.shape();
    if s.len() != 3 || s[1] != basis.height || s[2] != basis.width {
        return Err(Error::Dimension(format!(
            "feature {:?} does not match basis resolution {}×{}",
            s, basis.height, basis.width
        )));
    }
    let c = s[0];
    let g = Graph::inference();
    let x = g.constant(Tensor::from_parts(
        vec![1, c, s[1], s[2]],
        f_c.data().to_vec(),
    ));
    let z = match mode {
        Pooling::WeightedSum => x.spectral_sum(basis.images.clone()),
        Pooling::WeightedMax => x.spectral_max(basis.images.clone()),
    };
    Ok(z.value().data().chunks(c).map(<[f64]>::to_vec).collect())
}

/// Channel weights in `(0, 1)`, one per channel of `f_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionMap {
    pub weights: Vec<f64>,
}

pub fn recalibrate(f_c: &Tensor, m: &ChannelAttentionMap) -> Result<Tensor> {
    let c = f_c.shape()[0];
    if m.weights.len() != c {
        return Err(Error::Dimension(format!(
            "{} weights for {c} channels",
            m.weights.len()
        )));
    }
    let inner = f_c.len() / c;
    let mut out = f_c.clone();
    for (chunk, &k) in out.data_mut().chunks_mut(inner).zip(&m.weights) {
        chunk.iter_mut().for_each(|v| *v *= k);
    }
    Ok(out)
}

/// Everything the block produces for one forward pass.
pub struct M2SOutput<'g> {
    pub reduced: [Var<'g>; 4],
    pub f_c: Var<'g>,
    pub attention: Var<'g>,
    pub levels: Vec<LevelTrace<'g>>,
    pub fused: Var<'g>,
    pub skips: [Var<'g>; 4],
}

pub struct LevelTrace<'g> {
    pub state: PyramidLevelState,
    pub decomposed: Var<'g>,
    pub foreground: Var<'g>,
    pub background: Var<'g>,
    pub mixed: Var<'g>,
    pub refined: Var<'g>,
}

#[derive(Clone, Debug)]
struct LevelParams {
    dilated: Conv2d,
    proj: Conv2d,
    fg: Conv2d,
    alpha: Scalar,
    beta: Scalar,
    restore: Conv2d,
}

#[derive(Clone, Debug)]
pub struct M2SBlock {
    pub cfg: M2SConfig,
    reduce: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
    levels: Vec<LevelParams>,
}

impl M2SBlock {
    pub fn new(encoder_channels: &[usize; 4], cfg: &M2SConfig) -> Self {
        let cr = cfg.reduced_channels;
        let c = cfg.cross_channels();
        let hidden = (c / cfg.reduction_ratio).max(1);
        let reduce = encoder_channels
            .iter()
            .enumerate()
            .map(|(i, &ce)| Conv2d::pointwise(format!("m2s.reduce{}", i + 1), ce, cr))
            .collect();
        let levels = (1..=cfg.pyramid_levels)
            .map(|l| {
                let cl = cfg.level(l, (1, 1)).channels;
                let d = 2 * l + 1;
                let pre = format!("m2s.level{l}");
                LevelParams {
                    dilated: Conv2d::new(format!("{pre}.dilated"), c, c, 3, ConvSpec::same(3, d)),
                    proj: Conv2d::pointwise(format!("{pre}.proj"), c, cl),
                    fg: Conv2d::logit_head(format!("{pre}.foreground"), cl, 1),
                    alpha: Scalar {
                        name: format!("{pre}.alpha"),
                        init: Init::Ones,
                    },
                    beta: Scalar {
                        name: format!("{pre}.beta"),
                        init: Init::Ones,
                    },
                    restore: Conv2d::new(format!("{pre}.restore"), cl, c, 3, ConvSpec::same(3, 1)),
                }
            })
            .collect();
        M2SBlock {
            cfg: cfg.clone(),
            reduce,
            fc1: Linear::new("m2s.spectral.fc1", c, hidden),
            fc2: Linear::new("m2s.spectral.fc2", hidden, c),
            levels,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for r in &self.reduce {
            r.specs(out);
        }
        self.fc1.specs(out);
        self.fc2.specs(out);
        for l in &self.levels {
            l.dilated.specs(out);
            l.proj.specs(out);
            l.fg.specs(out);
            l.alpha.specs(out);
            l.beta.specs(out);
            l.restore.specs(out);
        }
    }

    /// Names of every parameter inside the pyramid branch.
    pub fn pyramid_param_names(&self) -> Vec<String> {
        let mut specs = Vec::new();
        for l in &self.levels {
            l.dilated.specs(&mut specs);
            l.proj.specs(&mut specs);
            l.fg.specs(&mut specs);
            l.alpha.specs(&mut specs);
            l.beta.specs(&mut specs);
            l.restore.specs(&mut specs);
        }
        specs.into_iter().map(|s| s.name).collect()
    }

    /// Reduce every stage to `C_r` channels, resize to the target grid and concatenate.
    pub fn preprocess<'g>(
        &self,
        p: &Bound<'g>,
        stages: &[Var<'g>; 4],
        target: (usize, usize),
    ) -> ([Var<'g>; 4], Var<'g>) {
        let reduced: Vec<Var<'g>> = self
            .reduce
            .iter()
            .zip(stages)
            .map(|(conv, &s)| conv.forward(p, s))
            .collect();
        let resized: Vec<Var<'g>> = reduced
            .iter()
            .map(|r| r.resize_bilinear(target.0, target.1))
            .collect();
        (
            [reduced[0], reduced[1], reduced[2], reduced[3]],
            Var::concat(&resized, 1),
        )
    }

    /// `[n, C]` channel weights from the DCT-pooled descriptors of `f_c`.
    pub fn spectral_attention<'g>(
        &self,
        p: &Bound<'g>,
        f_c: Var<'g>,
        basis: &SpectralBasis,
    ) -> Var<'g> {
        let z = Var::concat(
            &[
                f_c.spectral_sum(basis.images.clone()),
                f_c.spectral_max(basis.images.clone()),
            ],
            1,
        );
        self.bottleneck(p, z)
    }

    /// Shared bottleneck over pooled vectors `z[n, 2K, C]`, summed, then a sigmoid.
    pub fn bottleneck<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Var<'g> {
        let h = self.fc1.forward(p, z).relu();
        self.fc2.forward(p, h).sum_axis(1).sigmoid()
    }

    pub fn pyramid_decompose<'g>(
        &self,
        p: &Bound<'g>,
        f_bar: Var<'g>,
        state: &PyramidLevelState,
    ) -> Var<'g> {
        let lp = &self.levels[state.level - 1];
        let x = f_bar.resize_bilinear(state.height, state.width);
        lp.proj.forward(p, lp.dilated.forward(p, x).relu())
    }

    /// Returns `(foreground, background, mixed, refined)`.
    pub fn spatial_attend<'g>(
        &self,
        p: &Bound<'g>,
        level_feat: Var<'g>,
        state: &PyramidLevelState,
    ) -> (Var<'g>, Var<'g>, Var<'g>, Var<'g>) {
        let lp = &self.levels[state.level - 1];
        let fg = lp.fg.forward(p, level_feat).sigmoid();
        let bg = fg.one_minus();
        let mixed = level_feat
            .mul_spatial(fg)
            .mul_scalar_var(lp.alpha.get(p))
            .add(level_feat.mul_spatial(bg).mul_scalar_var(lp.beta.get(p)));
        (fg, bg, mixed, lp.restore.forward(p, mixed))
    }

    pub fn pyramid_fuse<'g>(&self, f_c: Var<'g>, refined: &[Var<'g>]) -> Var<'g> {
        let s = f_c.shape();
        refined
            .iter()
            .fold(f_c, |acc, r| acc.add(r.resize_bilinear(s[2], s[3])))
    }

    /// Split the fused map into four `C_r` chunks and return them to stage resolution.
    pub fn postprocess<'g>(&self, fused: Var<'g>, reduced: &[Var<'g>; 4]) -> [Var<'g>; 4] {
        let cr = self.cfg.reduced_channels;
        let out: Vec<Var<'g>> = reduced
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let s = r.shape();
                fused
                    .slice(1, i * cr, cr)
                    .resize_bilinear(s[2], s[3])
                    .add(*r)
            })
            .collect();
        [out[0], out[1], out[2], out[3]]
    }

    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        stages: &[Var<'g>; 4],
        input: (usize, usize),
    ) -> Result<M2SOutput<'g>> {
        let target = self.cfg.target_resolution(input.0, input.1)?;
        let basis = build_dct_basis(
            target.0,
            target.1,
            self.cfg.num_frequencies,
            self.cfg.dct_convention,
        )?;
        let (reduced, f_c) = self.preprocess(p, stages, target);
        let attention = self.spectral_attention(p, f_c, &basis);
        let f_bar = f_c.scale_channels(attention);
        let mut levels = Vec::with_capacity(self.levels.len());
        for l in 1..=self.levels.len() {
            let state = self.cfg.level(l, target);
            let decomposed = self.pyramid_decompose(p, f_bar, &state);
            let (foreground, background, mixed, refined) =
                self.spatial_attend(p, decomposed, &state);
            levels.push(LevelTrace {
                state,
                decomposed,
                foreground,
                background,
                mixed,
                refined,
            });
        }
        let refined: Vec<Var<'g>> = levels.iter().map(|l| l.refined).collect();
        let fused = self.pyramid_fuse(f_c, &refined);
        let skips = self.postprocess(fused, &reduced);
        Ok(M2SOutput {
            reduced,
            f_c,
            attention,
            levels,
            fused,
            skips,
        })
    }
}

/// Channel attention from already pooled vectors (`2K` vectors of length `C`).
pub fn spectral_attention(
    z: &[Vec<f64>],
    block: &M2SBlock,
    params: &ParamStore,
) -> Result<ChannelAttentionMap> {
    let c = block.cfg.cross_channels();
    if z.is_empty() || z.iter().any(|v| v.len() != c) {
        return Err(Error::Dimension(format!(
            "pooled vectors must be non-empty with length {c}"
        )));
    }
    let g = Graph::inference();
    let p = Bound::new(&g, params);
    let flat: Vec<f64> = z.iter().flatten().copied().collect();
    let zt = g.constant(Tensor::from_parts(vec![1, z.len(), c], flat));
    let m = block.bottleneck(&p, zt);
    Ok(ChannelAttentionMap {
        weights: m.value().data().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zigzag_order() {
        assert_eq!(
            zigzag_pairs(4, 4, 6),
            vec![(0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0)]
        );
    }

    #[test]
    fn dct_two_by_two() {
        let b = build_dct_basis(2, 2, 2, DctConvention::Standard).unwrap();
        assert_eq!(b.image(0), &[1.0; 4]);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for (a, e) in b.image(1).iter().zip([r, -r, r, -r]) {
            assert!((a - e).abs() < 1e-12);
        }
        let z = spectral_project(
            &Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            &b,
            Pooling::WeightedSum,
        )
        .unwrap();
        assert!((z[1][0] + 2.0 * r).abs() < 1e-12);
    }

    #[test]
    fn too_many_frequencies() {
        assert!(matches!(
            build_dct_basis(2, 2, 5, DctConvention::Standard),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn default_level_shapes() {
        let cfg = M2SConfig::default();
        let shapes: Vec<_> = (1..=3)
            .map(|l| {
                let s = cfg.level(l, (32, 32));
                (s.channels, s.height, s.width)
            })
            .collect();
        assert_eq!(shapes, vec![(256, 32, 32), (128, 16, 16), (64, 8, 8)]);
        let deep = cfg.level(5, (32, 32));
        assert_eq!((deep.channels, deep.height), (64, 4));
    }
}
