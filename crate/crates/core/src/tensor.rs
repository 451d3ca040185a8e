//! Dense row-major `f64` tensors and the numeric kernels the autograd layer
//! is built from.
//!
//! Image-shaped tensors use NCHW layout. Kernels here are plain functions
//! over slices so both the forward and backward closures in
//! [`crate::autograd`] can share them.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panicking constructor for internal callers whose shapes are correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(
            self.shape.len(),
            4,
            "expected NCHW tensor, got {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Select sample `n` along the leading axis, keeping the axis (size 1).
    pub fn batch_item(&self, n: usize) -> Tensor {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Dimension(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

/// Row/column strides of a matrix view into a flat slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub rs: isize,
    pub cs: isize,
}

impl Strides {
    /// Row-major `rows × cols` storage, optionally read as its transpose.
    pub fn row_major(cols: usize, transposed: bool) -> Self {
        if transposed {
            Strides {
                rs: 1,
                cs: cols as isize,
            }
        } else {
            Strides {
                rs: cols as isize,
                cs: 1,
            }
        }
    }

    pub fn t(self) -> Self {
        Strides {
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a · b + beta · c` for an `m×k` by `k×n` product over strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    c: &mut [f64],
    sc: Strides,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    check_extent(a.len(), m, k, sa);
    check_extent(b.len(), k, n, sb);
    check_extent(c.len(), m, n, sc);
    // SAFETY: extents checked above so every strided access stays in bounds,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.rs,
            sa.cs,
            b.as_ptr(),
            sb.rs,
            sb.cs,
            beta,
            c.as_mut_ptr(),
            sc.rs,
            sc.cs,
        );
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, s: Strides) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * s.rs + (cols as isize - 1) * s.cs;
    assert!(
        s.rs >= 0 && s.cs >= 0 && (last as usize) < len,
        "gemm view {rows}x{cols} with strides {s:?} exceeds buffer of {len}"
    );
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const POINTWISE: ConvSpec = ConvSpec {
        stride: 1,
        padding: 0,
        dilation: 1,
        groups: 1,
    };

    /// Stride-1 convolution padded so the output keeps the input size.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups: 1,
        }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.padding).saturating_sub(span) / self.stride + 1
    }
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(x: &[usize], wshape: &[usize], spec: ConvSpec) -> Result<Self> {
        if x.len() != 4 || wshape.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects NCHW input and OIHW weight, got {x:?} and {wshape:?}"
            )));
        }
        let (n, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_g, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        let g = spec.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
            return Err(Error::Dimension(format!(
                "conv2d: input has {cin} channels, weight {wshape:?}, groups {g}"
            )));
        }
        let span_h = spec.dilation * (kh - 1) + 1;
        let span_w = spec.dilation * (kw - 1) + 1;
        if h + 2 * spec.padding < span_h || w + 2 * spec.padding < span_w {
            return Err(Error::Dimension(format!(
                "conv2d: {h}x{w} input too small for {kh}x{kw} kernel (dilation {}, padding {})",
                spec.dilation, spec.padding
            )));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh: spec.out_size(h, kh),
            ow: spec.out_size(w, kw),
            spec,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    fn is_depthwise(&self) -> bool {
        self.spec.groups == self.cin && self.cin == self.cout && self.spec.groups > 1
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.oh, self.ow]
    }
}

/// Unfold one group of one sample into `[cin_g·kh·kw, oh·ow]` columns.
fn im2col(x: &[f64], g: &ConvGeom, cin_g: usize, cols: &mut [f64]) {
    let s = g.spec;
    let p = g.oh * g.ow;
    for ci in 0..cin_g {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * s.stride + ki * s.dilation) as isize - s.padding as isize;
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * s.stride + kj * s.dilation) as isize - s.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, cin_g: usize, gx: &mut [f64]) {
    let s = g.spec;
    let p = g.oh * g.ow;
    for ci in 0..cin_g {
        let plane = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * s.stride + ki * s.dilation) as isize - s.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * s.stride + kj * s.dilation) as isize - s.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.cout * p];
    if g.is_depthwise() {
        depthwise_forward(x, w, g, &mut out);
    } else {
        let groups = g.spec.groups;
        let cin_g = g.cin / groups;
        let cout_g = g.cout / groups;
        let krows = cin_g * g.kh * g.kw;
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; krows * p]
        };
        for n in 0..g.n {
            for gi in 0..groups {
                let xs = &x[(n * g.cin + gi * cin_g) * g.h * g.w..][..cin_g * g.h * g.w];
                let colsv: &[f64] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, g, cin_g, &mut cols);
                    &cols
                };
                let ws = &w[gi * cout_g * krows..(gi + 1) * cout_g * krows];
                let os = &mut out[(n * g.cout + gi * cout_g) * p..][..cout_g * p];
                gemm(
                    cout_g,
                    krows,
                    p,
                    ws,
                    Strides::row_major(krows, false),
                    colsv,
                    Strides::row_major(p, false),
                    os,
                    Strides::row_major(p, false),
                    0.0,
                );
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..g.n {
            for c in 0..g.cout {
                let bc = b[c];
                for v in &mut out[(n * g.cout + c) * p..][..p] {
                    *v += bc;
                }
            }
        }
    }
    out
}

/// Gradients `(gx, gw, gb)` of a convolution given the output gradient.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let p = g.oh * g.ow;
    let mut gb = vec![0.0; g.cout];
    for n in 0..g.n {
        for (c, b) in gb.iter_mut().enumerate() {
            *b += gout[(n * g.cout + c) * p..][..p].iter().sum::<f64>();
        }
    }
    if g.is_depthwise() {
        let (gx, gw) = depthwise_backward(x, w, gout, g);
        return (need_x.then_some(gx), need_w.then_some(gw), gb);
    }
    let groups = g.spec.groups;
    let cin_g = g.cin / groups;
    let cout_g = g.cout / groups;
    let krows = cin_g * g.kh * g.kw;
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    let mut cols = vec![0.0; krows * p];
    let mut gcols = vec![0.0; krows * p];
    for n in 0..g.n {
        for gi in 0..groups {
            let xoff = (n * g.cin + gi * cin_g) * g.h * g.w;
            let xs = &x[xoff..][..cin_g * g.h * g.w];
            let go = &gout[(n * g.cout + gi * cout_g) * p..][..cout_g * p];
            let ws = &w[gi * cout_g * krows..(gi + 1) * cout_g * krows];
            if let Some(gw) = gw.as_mut() {
                let colsv: &[f64] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, g, cin_g, &mut cols);
                    &cols
                };
                // gw[cout_g, krows] += go[cout_g, p] · colsᵀ[p, krows]
                gemm(
                    cout_g,
                    p,
                    krows,
                    go,
                    Strides::row_major(p, false),
                    colsv,
                    Strides::row_major(p, true),
                    &mut gw[gi * cout_g * krows..(gi + 1) * cout_g * krows],
                    Strides::row_major(krows, false),
                    1.0,
                );
            }
            if let Some(gx) = gx.as_mut() {
                let gxs = &mut gx[xoff..][..cin_g * g.h * g.w];
                if g.is_pointwise() {
                    gemm(
                        krows,
                        cout_g,
                        p,
                        ws,
                        Strides::row_major(krows, true),
                        go,
                        Strides::row_major(p, false),
                        gxs,
                        Strides::row_major(p, false),
                        1.0,
                    );
                } else {
                    gemm(
                        krows,
                        cout_g,
                        p,
                        ws,
                        Strides::row_major(krows, true),
                        go,
                        Strides::row_major(p, false),
                        &mut gcols,
                        Strides::row_major(p, false),
                        0.0,
                    );
                    col2im(&gcols, g, cin_g, gxs);
                }
            }
        }
    }
    (gx, gw, gb)
}

fn depthwise_forward(x: &[f64], w: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let s = g.spec;
    let kk = g.kh * g.kw;
    for n in 0..g.n {
        for c in 0..g.cin {
            let plane = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let wk = &w[c * kk..(c + 1) * kk];
            let o = &mut out[(n * g.cout + c) * g.oh * g.ow..][..g.oh * g.ow];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for ki in 0..g.kh {
                        let iy = (oy * s.stride + ki * s.dilation) as isize - s.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let ix =
                                (ox * s.stride + kj * s.dilation) as isize - s.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                acc += wk[ki * g.kw + kj] * plane[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    o[oy * g.ow + ox] = acc;
                }
            }
        }
    }
}

fn depthwise_backward(x: &[f64], w: &[f64], gout: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let s = g.spec;
    let kk = g.kh * g.kw;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for n in 0..g.n {
        for c in 0..g.cin {
            let base = (n * g.cin + c) * g.h * g.w;
            let go = &gout[(n * g.cout + c) * g.oh * g.ow..][..g.oh * g.ow];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gv = go[oy * g.ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ki in 0..g.kh {
                        let iy = (oy * s.stride + ki * s.dilation) as isize - s.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let ix =
                                (ox * s.stride + kj * s.dilation) as isize - s.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let xi = base + iy as usize * g.w + ix as usize;
                                gw[c * kk + ki * g.kw + kj] += gv * x[xi];
                                gx[xi] += gv * w[c * kk + ki * g.kw + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

// ---------------------------------------------------------------------------
// Bilinear resampling (half-pixel centres, corners not aligned)
// ---------------------------------------------------------------------------

/// Per-output-index source taps `(i0, i1, w0, w1)` along one axis.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn resize_bilinear_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * ow + ox] =
                    wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    out
}

pub(crate) fn resize_bilinear_backward(
    g: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let go = &g[p * oh * ow..(p + 1) * oh * ow];
        let gi = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = go[oy * ow + ox];
                gi[y0 * w + x0] += v * wy0 * wx0;
                gi[y0 * w + x1] += v * wy0 * wx1;
                gi[y1 * w + x0] += v * wy1 * wx0;
                gi[y1 * w + x1] += v * wy1 * wx1;
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Axis permutation
// ---------------------------------------------------------------------------

pub(crate) fn permute(t: &Tensor, axes: &[usize]) -> Tensor {
    let nd = t.ndim();
    assert_eq!(
        axes.len(),
        nd,
        "permute axes {axes:?} for shape {:?}",
        t.shape()
    );
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * t.shape()[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; nd];
    let src = t.data();
    for _ in 0..t.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// `(outer, axis, inner)` sizes around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let (cout, cin_g, kh, kw) = w.dims4();
        let groups = spec.groups;
        let cout_g = cout / groups;
        let oh = spec.out_size(h, kh);
        let ow = spec.out_size(wd, kw);
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for b in 0..n {
            for co in 0..cout {
                let gi = co / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            let cabs = gi * cin_g + ci;
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * spec.stride + ki * spec.dilation) as isize
                                        - spec.padding as isize;
                                    let ix = (ox * spec.stride + kj * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += w.data()[((co * cin_g + ci) * kh + ki) * kw + kj]
                                            * x.data()[((b * cin + cabs) * h + iy as usize) * wd
                                                + ix as usize];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn conv_matches_naive_loop() {
        let cases = [
            (
                ConvSpec {
                    stride: 1,
                    padding: 1,
                    dilation: 1,
                    groups: 1,
                },
                [2, 3, 7, 6],
                [4, 3, 3, 3],
            ),
            (
                ConvSpec {
                    stride: 2,
                    padding: 3,
                    dilation: 1,
                    groups: 1,
                },
                [1, 3, 9, 9],
                [5, 3, 7, 7],
            ),
            (
                ConvSpec {
                    stride: 1,
                    padding: 5,
                    dilation: 5,
                    groups: 1,
                },
                [1, 2, 8, 8],
                [3, 2, 3, 3],
            ),
            (
                ConvSpec {
                    stride: 1,
                    padding: 1,
                    dilation: 1,
                    groups: 4,
                },
                [2, 4, 5, 5],
                [4, 1, 3, 3],
            ),
            (
                ConvSpec {
                    stride: 1,
                    padding: 0,
                    dilation: 1,
                    groups: 2,
                },
                [1, 4, 3, 3],
                [6, 2, 1, 1],
            ),
            (ConvSpec::POINTWISE, [2, 3, 4, 5], [2, 3, 1, 1]),
        ];
        for (i, (spec, xs, ws)) in cases.iter().enumerate() {
            let x = pseudo(xs, i as u64 + 1);
            let w = pseudo(ws, i as u64 + 100);
            let g = ConvGeom::new(x.shape(), w.shape(), *spec).unwrap();
            let got = conv2d_forward(x.data(), w.data(), None, &g);
            let want = naive_conv(&x, &w, *spec);
            for (a, b) in got.iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn resize_same_size_is_identity() {
        let x = pseudo(&[1, 2, 5, 7], 3);
        let y = resize_bilinear_forward(x.data(), 2, 5, 7, 5, 7);
        assert_eq!(y, x.data());
    }

    #[test]
    fn resize_upsample_matches_half_pixel_convention() {
        // 2 -> 4 with half-pixel centres: [a, .75a+.25b, .25a+.75b, b]
        let y = resize_bilinear_forward(&[0.0, 4.0], 1, 1, 2, 1, 4);
        assert_eq!(y, vec![0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn permute_round_trip() {
        let x = pseudo(&[2, 3, 4], 9);
        let axes = [2, 0, 1];
        let y = permute(&x, &axes);
        assert_eq!(y.shape(), &[4, 2, 3]);
        assert_eq!(permute(&y, &inverse_axes(&axes)), x);
    }
}
