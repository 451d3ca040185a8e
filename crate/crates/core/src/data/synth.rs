//! Procedural copy-move and splice forgeries.
//!
//! Backgrounds are multi-octave value noise quantised to 8-bit levels, so a
//! PNG round trip reproduces every sample exactly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ForgerySample, ForgeryType};
use crate::seed;
use crate::tensor::Tensor;

pub const MIN_AREA_FRACTION: f64 = 0.02;
pub const MAX_AREA_FRACTION: f64 = 0.30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    CopyMove,
    Splice,
    Mixed,
}

/// Geometric transform applied to a copied patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    FlipHorizontal,
    FlipVertical,
    Rotate90,
    Rotate180,
    Rotate270,
}

impl Transform {
    const ALL: [Transform; 6] = [
        Transform::Identity,
        Transform::FlipHorizontal,
        Transform::FlipVertical,
        Transform::Rotate90,
        Transform::Rotate180,
        Transform::Rotate270,
    ];

    /// Output patch dims for an `h × w` source patch.
    pub fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Transform::Rotate90 | Transform::Rotate270 => (w, h),
            _ => (h, w),
        }
    }

    /// Source coordinate of output pixel `(i, j)` for an `h × w` source patch.
    pub fn inverse(self, i: usize, j: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Transform::Identity => (i, j),
            Transform::FlipHorizontal => (i, w - 1 - j),
            Transform::FlipVertical => (h - 1 - i, j),
            Transform::Rotate90 => (h - 1 - j, i),
            Transform::Rotate180 => (h - 1 - i, w - 1 - j),
            Transform::Rotate270 => (j, w - 1 - i),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CopyMoveMeta {
    pub transform: Transform,
    /// `(y, x, h, w)` of the copied patch's bounding box.
    pub source_box: (usize, usize, usize, usize),
    /// Top-left corner of the pasted patch.
    pub dest: (usize, usize),
}

impl CopyMoveMeta {
    /// Where a pasted pixel was copied from, if `(y, x)` lies in the pasted box.
    pub fn source_of(&self, y: usize, x: usize) -> Option<(usize, usize)> {
        let (sy, sx, h, w) = self.source_box;
        let (th, tw) = self.transform.output_dims(h, w);
        let (dy, dx) = self.dest;
        if y < dy || x < dx || y >= dy + th || x >= dx + tw {
            return None;
        }
        let (i, j) = self.transform.inverse(y - dy, x - dx, h, w);
        Some((sy + i, sx + j))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpliceMeta {
    pub host: Tensor,
    pub donor: Tensor,
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Seeded `[3, size, size]` value-noise texture on the 8-bit grid.
pub fn texture(seed: u64, size: usize) -> Tensor {
    let mut rng = seed::component_rng(seed, "texture");
    let mut data = vec![0.0; 3 * size * size];
    for c in 0..3 {
        let base: f64 = rng.gen_range(0.25..0.75);
        let plane = &mut data[c * size * size..(c + 1) * size * size];
        plane.iter_mut().for_each(|v| *v = base);
        let mut amp = 0.3;
        for octave in 0..4 {
            let cell = (size >> (2 + octave)).max(2);
            let n = size / cell + 2;
            let grid: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for y in 0..size {
                let fy = y as f64 / cell as f64;
                let (gy, ty) = (fy.floor() as usize, smooth(fy.fract()));
                for x in 0..size {
                    let fx = x as f64 / cell as f64;
                    let (gx, tx) = (fx.floor() as usize, smooth(fx.fract()));
                    let a = grid[gy * n + gx] * (1.0 - tx) + grid[gy * n + gx + 1] * tx;
                    let b = grid[(gy + 1) * n + gx] * (1.0 - tx) + grid[(gy + 1) * n + gx + 1] * tx;
                    plane[y * size + x] += amp * (a * (1.0 - ty) + b * ty);
                }
            }
            amp *= 0.5;
        }
    }
    for v in &mut data {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    Tensor::from_parts(vec![3, size, size], data)
}

/// Random convex polygon inscribed in a rotated ellipse, rasterised at pixel centres.
fn random_region(rng: &mut ChaCha8Rng, size: usize) -> Vec<bool> {
    loop {
        let s = size as f64;
        let rx = rng.gen_range(0.08..0.24) * s;
        let ry = rng.gen_range(0.08..0.24) * s;
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let n = rng.gen_range(5..=9);
        let mut angles: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(f64::total_cmp);
        let (st, ct) = theta.sin_cos();
        let rel: Vec<(f64, f64)> = angles
            .iter()
            .map(|a| {
                let (px, py) = (rx * a.cos(), ry * a.sin());
                (px * ct - py * st, px * st + py * ct)
            })
            .collect();
        let min_x = rel.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_x = rel.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = rel.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_y = rel.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let cx = rng.gen_range(-min_x..(s - max_x));
        let cy = rng.gen_range(-min_y..(s - max_y));
        let poly: Vec<(f64, f64)> = rel.iter().map(|&(x, y)| (x + cx, y + cy)).collect();
        let mut mask = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                mask[y * size + x] = inside_convex(&poly, x as f64 + 0.5, y as f64 + 0.5);
            }
        }
        let frac = mask.iter().filter(|&&m| m).count() as f64 / (size * size) as f64;
        if (MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&frac) {
            return mask;
        }
    }
}

fn inside_convex(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let (mut pos, mut neg) = (false, false);
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
        pos |= cross > 0.0;
        neg |= cross < 0.0;
    }
    !(pos && neg)
}

fn bounding_box(mask: &[bool], size: usize) -> (usize, usize, usize, usize) {
    let (mut y0, mut x0, mut y1, mut x1) = (size, size, 0, 0);
    for y in 0..size {
        for x in 0..size {
            if mask[y * size + x] {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
        }
    }
    (y0, x0, y1 - y0 + 1, x1 - x0 + 1)
}

fn disjoint(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    a.0 + a.2 <= b.0 || b.0 + b.2 <= a.0 || a.1 + a.3 <= b.1 || b.1 + b.3 <= a.1
}

/// A region of a textured image pasted, possibly flipped or rotated, at a
/// non-overlapping offset. The mask marks the pasted pixels only.
pub fn synth_copy_move(seed: u64, size: usize) -> (ForgerySample, CopyMoveMeta) {
    assert!(size >= 32, "synthetic samples need size >= 32");
    let host = texture(seed::component_seed(seed, "copy-move/host"), size);
    let mut rng = seed::component_rng(seed, "copy-move/geometry");
    let (region, meta) = loop {
        let region = random_region(&mut rng, size);
        let src = bounding_box(&region, size);
        let transform = Transform::ALL[rng.gen_range(0..Transform::ALL.len())];
        let (th, tw) = transform.output_dims(src.2, src.3);
        let placed = (0..100).find_map(|_| {
            let dy = rng.gen_range(0..=size - th);
            let dx = rng.gen_range(0..=size - tw);
            disjoint(src, (dy, dx, th, tw)).then_some((dy, dx))
        });
        if let Some(dest) = placed {
            break (
                region,
                CopyMoveMeta {
                    transform,
                    source_box: src,
                    dest,
                },
            );
        }
    };
    let plane = size * size;
    let mut image = host.clone();
    let mut mask = vec![0.0; plane];
    let (sy, sx, h, w) = meta.source_box;
    let (th, tw) = meta.transform.output_dims(h, w);
    for i in 0..th {
        for j in 0..tw {
            let (si, sj) = meta.transform.inverse(i, j, h, w);
            let src = (sy + si) * size + sx + sj;
            if !region[src] {
                continue;
            }
            let dst = (meta.dest.0 + i) * size + meta.dest.1 + j;
            for c in 0..3 {
                image.data_mut()[c * plane + dst] = host.data()[c * plane + src];
            }
            mask[dst] = 1.0;
        }
    }
    let sample = ForgerySample::new(
        format!("cm_{seed}"),
        image,
        Tensor::from_parts(vec![size, size], mask),
        ForgeryType::CopyMove,
    )
    .expect("generator produces consistent shapes");
    (sample, meta)
}

/// A region of an independent donor texture composited into a host texture.
pub fn synth_splice(seed: u64, size: usize) -> (ForgerySample, SpliceMeta) {
    assert!(size >= 32, "synthetic samples need size >= 32");
    let host = texture(seed::component_seed(seed, "splice/host"), size);
    let donor = texture(seed::component_seed(seed, "splice/donor"), size);
    let mut rng = seed::component_rng(seed, "splice/geometry");
    let region = random_region(&mut rng, size);
    let plane = size * size;
    let mut image = host.clone();
    for (i, &inside) in region.iter().enumerate() {
        if inside {
            for c in 0..3 {
                image.data_mut()[c * plane + i] = donor.data()[c * plane + i];
            }
        }
    }
    let mask = region.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let sample = ForgerySample::new(
        format!("sp_{seed}"),
        image,
        Tensor::from_parts(vec![size, size], mask),
        ForgeryType::Splice,
    )
    .expect("generator produces consistent shapes");
    (sample, SpliceMeta { host, donor })
}
