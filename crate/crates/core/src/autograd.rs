//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is also a valid topological order; [`Graph::backward`] walks
//! the tape in reverse. Each node owns a closure mapping its output gradient
//! to gradients for its parents. Nodes none of whose inputs require a gradient
//! store no closure, so an inference graph is just a list of values.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, ConvSpec, Strides, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    op: &'static str,
    tag: Option<String>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A graph that only evaluates values.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is tracked (when the graph records gradients).
    pub fn leaf(&self, value: impl Into<Rc<Tensor>>) -> Var<'_> {
        self.push(value.into(), "leaf", Vec::new(), None, self.grad_enabled)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: impl Into<Rc<Tensor>>) -> Var<'_> {
        self.push(value.into(), "constant", Vec::new(), None, false)
    }

    fn push(
        &self,
        value: Rc<Tensor>,
        op: &'static str,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            tag: None,
            parents,
            backward,
            requires_grad,
        });
        Var { graph: self, id }
    }

    fn record<'g, F>(
        &'g self,
        op: &'static str,
        value: Rc<Tensor>,
        parents: &[Var<'g>],
        backward: F,
    ) -> Var<'g>
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let requires = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let bw: Option<BackwardFn> = if requires {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(
            value,
            op,
            parents.iter().map(|p| p.id).collect(),
            bw,
            requires,
        )
    }

    /// Reverse-mode pass from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else { continue };
            let parent_grads = bw(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Describe the first node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        let nodes = self.nodes.borrow();
        let mut last_tag: Option<&str> = None;
        for (id, n) in nodes.iter().enumerate() {
            if let Some(t) = n.tag.as_deref() {
                last_tag = Some(t);
            }
            if !n.value.all_finite() {
                let what = match n.tag.as_deref() {
                    Some(t) => format!("`{t}`"),
                    None => match last_tag {
                        Some(t) => format!("an intermediate after `{t}`"),
                        None => "an input".to_string(),
                    },
                };
                return Some(format!(
                    "node #{id} ({} {:?}) {what}",
                    n.op,
                    n.value.shape()
                ));
            }
        }
        None
    }
}

fn unary_same_shape<'g>(
    x: Var<'g>,
    op: &'static str,
    f: impl Fn(f64) -> f64,
    // derivative in terms of (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'g> {
    let xv = x.value();
    let out = Rc::new(xv.map(f));
    let o2 = out.clone();
    x.graph.record(op, out, &[x], move |g| {
        let data = g
            .data()
            .iter()
            .zip(xv.data())
            .zip(o2.data())
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
    })
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Attach a name used in non-finite diagnostics.
    pub fn tagged(self, tag: impl Into<String>) -> Self {
        self.graph.nodes.borrow_mut()[self.id].tag = Some(tag.into());
        self
    }

    fn same_shape(&self, other: &Var<'g>, op: &str) {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{op}: shape mismatch {a:?} vs {b:?}");
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.same_shape(&other, "add");
        let out = Rc::new(self.value().zip_map(&other.value(), |a, b| a + b));
        self.graph.record("add", out, &[self, other], |g| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.same_shape(&other, "sub");
        let out = Rc::new(self.value().zip_map(&other.value(), |a, b| a - b));
        self.graph.record("sub", out, &[self, other], |g| {
            vec![Some(g.clone()), Some(g.scale(-1.0))]
        })
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.same_shape(&other, "mul");
        let (a, b) = (self.value(), other.value());
        let out = Rc::new(a.zip_map(&b, |x, y| x * y));
        self.graph.record("mul", out, &[self, other], move |g| {
            vec![
                Some(g.zip_map(&b, |g, y| g * y)),
                Some(g.zip_map(&a, |g, x| g * x)),
            ]
        })
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'g> {
        let out = Rc::new(self.value().map(|v| scale * v + shift));
        self.graph
            .record("affine", out, &[self], move |g| vec![Some(g.scale(scale))])
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        self.affine(k, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'g> {
        self.affine(-1.0, 1.0)
    }

    /// Multiply every element by a one-element variable.
    pub fn mul_scalar_var(self, s: Var<'g>) -> Var<'g> {
        let (x, sv) = (self.value(), s.value());
        assert_eq!(sv.len(), 1, "mul_scalar_var expects a one-element scalar");
        let k = sv.item();
        let out = Rc::new(x.scale(k));
        self.graph.record("mul_scalar", out, &[self, s], move |g| {
            let gs: f64 = g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            vec![Some(g.scale(k)), Some(Tensor::scalar(gs))]
        })
    }

    pub fn relu(self) -> Var<'g> {
        unary_same_shape(
            self,
            "relu",
            |v| v.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(self) -> Var<'g> {
        unary_same_shape(self, "sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        unary_same_shape(
            self,
            "gelu",
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let t = (C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
            },
        )
    }

    // -- reductions --------------------------------------------------------

    pub fn sum_all(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Rc::new(Tensor::scalar(x.sum()));
        self.graph.record("sum_all", out, &[self], move |g| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean_all(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let (outer, len, inner) = tensor::split_at_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x.data()[(o * len + a) * inner..][..inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        let in_shape = shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.graph.record(
            "sum_axis",
            Rc::new(Tensor::from_parts(shape, out)),
            &[self],
            move |g| {
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
            },
        )
    }

    // -- shape ---------------------------------------------------------------

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = (*x).clone().reshape(shape).expect("reshape");
        self.graph
            .record("reshape", Rc::new(out), &[self], move |g| {
                vec![Some(g.clone().reshape(&in_shape).expect("reshape grad"))]
            })
    }

    pub fn permute(self, axes: &[usize]) -> Var<'g> {
        let out = tensor::permute(&self.value(), axes);
        let inv = tensor::inverse_axes(axes);
        self.graph
            .record("permute", Rc::new(out), &[self], move |g| {
                vec![Some(tensor::permute(g, &inv))]
            })
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        for v in &values {
            let mut s = v.shape().to_vec();
            s[axis] = base[axis];
            assert_eq!(s, base, "concat: incompatible shapes");
        }
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = tensor::split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        graph.record(
            "concat",
            Rc::new(Tensor::from_parts(shape, out)),
            parts,
            move |g| {
                let mut grads: Vec<Vec<f64>> = lens
                    .iter()
                    .map(|l| Vec::with_capacity(outer * l * inner))
                    .collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (gr, &l) in grads.iter_mut().zip(&lens) {
                        gr.extend_from_slice(&g.data()[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .map(|(d, s)| Some(Tensor::from_parts(s.clone(), d)))
                    .collect()
            },
        )
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let (outer, full, inner) = tensor::split_at_axis(&in_shape, axis);
        assert!(
            start + len <= full,
            "slice {start}+{len} out of range {full}"
        );
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = in_shape.clone();
        shape[axis] = len;
        self.graph.record(
            "slice",
            Rc::new(Tensor::from_parts(shape, out)),
            &[self],
            move |g| {
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    gx[(o * full + start) * inner..][..len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
            },
        )
    }

    // -- linear algebra ------------------------------------------------------

    /// `x · wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(self, w: Var<'g>, b: Option<Var<'g>>) -> Var<'g> {
        let (x, wv) = (self.value(), w.value());
        let k = *x.shape().last().expect("linear on scalar");
        assert_eq!(wv.shape().len(), 2, "linear weight must be 2-D");
        let nout = wv.shape()[0];
        assert_eq!(
            wv.shape()[1],
            k,
            "linear: input width {k} vs weight {:?}",
            wv.shape()
        );
        let m = x.len() / k;
        let mut out = vec![0.0; m * nout];
        tensor::gemm(
            m,
            k,
            nout,
            x.data(),
            Strides::row_major(k, false),
            wv.data(),
            Strides::row_major(k, true),
            &mut out,
            Strides::row_major(nout, false),
            0.0,
        );
        let bv = b.map(|b| b.value());
        if let Some(bv) = &bv {
            for row in out.chunks_mut(nout) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = nout;
        let mut parents = vec![self, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.graph.record(
            "linear",
            Rc::new(Tensor::from_parts(shape, out)),
            &parents,
            move |g| {
                let mut gx = vec![0.0; m * k];
                tensor::gemm(
                    m,
                    nout,
                    k,
                    g.data(),
                    Strides::row_major(nout, false),
                    wv.data(),
                    Strides::row_major(k, false),
                    &mut gx,
                    Strides::row_major(k, false),
                    0.0,
                );
                let mut gw = vec![0.0; nout * k];
                tensor::gemm(
                    nout,
                    m,
                    k,
                    g.data(),
                    Strides::row_major(nout, true),
                    x.data(),
                    Strides::row_major(k, false),
                    &mut gw,
                    Strides::row_major(k, false),
                    0.0,
                );
                let mut grads = vec![
                    Some(Tensor::from_parts(x.shape().to_vec(), gx)),
                    Some(Tensor::from_parts(vec![nout, k], gw)),
                ];
                if has_bias {
                    let mut gb = vec![0.0; nout];
                    for row in g.data().chunks(nout) {
                        for (b, v) in gb.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                    grads.push(Some(Tensor::from_parts(vec![nout], gb)));
                }
                grads
            },
        )
    }

    /// Batched `op(a) · op(b)` over rank-3 tensors `[batch, rows, cols]`.
    pub fn bmm(self, other: Var<'g>, trans_a: bool, trans_b: bool) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert!(
            a.ndim() == 3 && b.ndim() == 3,
            "bmm expects rank-3 operands"
        );
        let batch = a.shape()[0];
        assert_eq!(batch, b.shape()[0], "bmm batch mismatch");
        let (ar, ac) = (a.shape()[1], a.shape()[2]);
        let (br, bc) = (b.shape()[1], b.shape()[2]);
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "bmm inner dims {:?} x {:?}", a.shape(), b.shape());
        let sa = Strides::row_major(ac, trans_a);
        let sb = Strides::row_major(bc, trans_b);
        let sc = Strides::row_major(n, false);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            tensor::gemm(
                m,
                k,
                n,
                &a.data()[i * ar * ac..(i + 1) * ar * ac],
                sa,
                &b.data()[i * br * bc..(i + 1) * br * bc],
                sb,
                &mut out[i * m * n..(i + 1) * m * n],
                sc,
                0.0,
            );
        }
        self.graph.record(
            "bmm",
            Rc::new(Tensor::from_parts(vec![batch, m, n], out)),
            &[self, other],
            move |g| {
                let mut ga = vec![0.0; a.len()];
                let mut gb = vec![0.0; b.len()];
                for i in 0..batch {
                    let gc = &g.data()[i * m * n..(i + 1) * m * n];
                    // d op(a) = gc · op(b)ᵀ, written through op(a)'s storage strides.
                    tensor::gemm(
                        m,
                        n,
                        k,
                        gc,
                        sc,
                        &b.data()[i * br * bc..(i + 1) * br * bc],
                        sb.t(),
                        &mut ga[i * ar * ac..(i + 1) * ar * ac],
                        sa,
                        0.0,
                    );
                    // d op(b) = op(a)ᵀ · gc
                    tensor::gemm(
                        k,
                        m,
                        n,
                        &a.data()[i * ar * ac..(i + 1) * ar * ac],
                        sa.t(),
                        gc,
                        sc,
                        &mut gb[i * br * bc..(i + 1) * br * bc],
                        sb,
                        0.0,
                    );
                }
                vec![
                    Some(Tensor::from_parts(a.shape().to_vec(), ga)),
                    Some(Tensor::from_parts(b.shape().to_vec(), gb)),
                ]
            },
        )
    }

    pub fn conv2d(self, w: Var<'g>, b: Option<Var<'g>>, spec: ConvSpec) -> Var<'g> {
        self.try_conv2d(w, b, spec)
            .unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn try_conv2d(self, w: Var<'g>, b: Option<Var<'g>>, spec: ConvSpec) -> Result<Var<'g>> {
        let (x, wv) = (self.value(), w.value());
        let geom = ConvGeom::new(x.shape(), wv.shape(), spec)?;
        let bv = b.map(|b| b.value());
        let out = tensor::conv2d_forward(x.data(), wv.data(), bv.as_ref().map(|b| b.data()), &geom);
        let out_shape = geom.out_shape();
        let mut parents = vec![self, w];
        parents.extend(b);
        let has_bias = b.is_some();
        let need_x = self.requires_grad();
        let need_w = w.requires_grad();
        Ok(self.graph.record(
            "conv2d",
            Rc::new(Tensor::from_parts(out_shape, out)),
            &parents,
            move |g| {
                let (gx, gw, gb) =
                    tensor::conv2d_backward(x.data(), wv.data(), g.data(), &geom, need_x, need_w);
                let mut grads = vec![
                    gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                    gw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
                ];
                if has_bias {
                    grads.push(Some(Tensor::from_parts(vec![gb.len()], gb)));
                }
                grads
            },
        ))
    }

    // -- resampling ----------------------------------------------------------

    /// Bilinear resize of an NCHW tensor; the identity when sizes already match.
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        if (h, w) == (oh, ow) {
            return self;
        }
        let planes = n * c;
        let out = tensor::resize_bilinear_forward(x.data(), planes, h, w, oh, ow);
        self.graph.record(
            "resize_bilinear",
            Rc::new(Tensor::from_parts(vec![n, c, oh, ow], out)),
            &[self],
            move |g| {
                let gx = tensor::resize_bilinear_backward(g.data(), planes, h, w, oh, ow);
                vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
            },
        )
    }

    // -- normalisation / attention helpers ----------------------------------

    pub fn softmax_last(self) -> Var<'g> {
        let x = self.value();
        let k = *x.shape().last().unwrap();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Rc::new(Tensor::from_parts(x.shape().to_vec(), out));
        let y = out.clone();
        self.graph.record("softmax", out, &[self], move |g| {
            let mut gx = vec![0.0; g.len()];
            for ((gr, yr), dst) in g
                .data()
                .chunks(k)
                .zip(y.data().chunks(k))
                .zip(gx.chunks_mut(k))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), gx))]
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm_last(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Var<'g> {
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let k = *x.shape().last().unwrap();
        assert_eq!(gv.len(), k, "layer_norm gamma width");
        let rows = x.len() / k;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for (r, (src, dst)) in x.data().chunks(k).zip(xhat.chunks_mut(k)).enumerate() {
            let mu = src.iter().sum::<f64>() / k as f64;
            let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / k as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mu) * is;
            }
        }
        let mut out = vec![0.0; x.len()];
        for (o, xh) in out.chunks_mut(k).zip(xhat.chunks(k)) {
            for j in 0..k {
                o[j] = xh[j] * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        self.graph.record(
            "layer_norm",
            Rc::new(Tensor::from_parts(shape.clone(), out)),
            &[self, gamma, beta],
            move |g| {
                let mut gx = vec![0.0; g.len()];
                let mut ggamma = vec![0.0; k];
                let mut gbeta = vec![0.0; k];
                for r in 0..rows {
                    let gr = &g.data()[r * k..(r + 1) * k];
                    let xh = &xhat[r * k..(r + 1) * k];
                    let mut mean_gxh = 0.0;
                    let mut mean_gxh_xh = 0.0;
                    for j in 0..k {
                        ggamma[j] += gr[j] * xh[j];
                        gbeta[j] += gr[j];
                        let gxh = gr[j] * gv.data()[j];
                        mean_gxh += gxh;
                        mean_gxh_xh += gxh * xh[j];
                    }
                    mean_gxh /= k as f64;
                    mean_gxh_xh /= k as f64;
                    for j in 0..k {
                        let gxh = gr[j] * gv.data()[j];
                        gx[r * k + j] = inv_std[r] * (gxh - mean_gxh - xh[j] * mean_gxh_xh);
                    }
                }
                vec![
                    Some(Tensor::from_parts(shape.clone(), gx)),
                    Some(Tensor::from_parts(vec![k], ggamma)),
                    Some(Tensor::from_parts(vec![k], gbeta)),
                ]
            },
        )
    }

    /// `x[n, c, ...] · s[n, c]`, broadcasting over trailing axes.
    pub fn scale_channels(self, s: Var<'g>) -> Var<'g> {
        let (x, sv) = (self.value(), s.value());
        let (n, c) = (x.shape()[0], x.shape()[1]);
        assert_eq!(
            sv.shape(),
            &[n, c],
            "scale_channels: gate {:?} for input {:?}",
            sv.shape(),
            x.shape()
        );
        let inner = x.len() / (n * c);
        let mut out = x.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let k = sv.data()[i];
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        self.graph.record(
            "scale_channels",
            Rc::new(Tensor::from_parts(x.shape().to_vec(), out)),
            &[self, s],
            move |g| {
                let mut gx = g.data().to_vec();
                let mut gs = vec![0.0; n * c];
                for (i, (gc, xc)) in gx.chunks_mut(inner).zip(x.data().chunks(inner)).enumerate() {
                    let k = sv.data()[i];
                    gs[i] = gc.iter().zip(xc).map(|(a, b)| a * b).sum();
                    gc.iter_mut().for_each(|v| *v *= k);
                }
                vec![
                    Some(Tensor::from_parts(x.shape().to_vec(), gx)),
                    Some(Tensor::from_parts(vec![n, c], gs)),
                ]
            },
        )
    }

    /// `x[n, c, h, w] · m[n, 0, h, w]`, broadcasting a one-channel map over channels.
    pub fn mul_spatial(self, m: Var<'g>) -> Var<'g> {
        let (x, mv) = (self.value(), m.value());
        let (n, c, h, w) = x.dims4();
        assert_eq!(
            mv.shape(),
            &[n, 1, h, w],
            "mul_spatial: map {:?} for input {:?}",
            mv.shape(),
            x.shape()
        );
        let hw = h * w;
        let mut out = x.data().to_vec();
        for b in 0..n {
            let mrow = &mv.data()[b * hw..(b + 1) * hw];
            for ch in 0..c {
                for (o, k) in out[(b * c + ch) * hw..][..hw].iter_mut().zip(mrow) {
                    *o *= k;
                }
            }
        }
        self.graph.record(
            "mul_spatial",
            Rc::new(Tensor::from_parts(x.shape().to_vec(), out)),
            &[self, m],
            move |g| {
                let mut gx = g.data().to_vec();
                let mut gm = vec![0.0; n * hw];
                for b in 0..n {
                    let mrow = &mv.data()[b * hw..(b + 1) * hw];
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in 0..hw {
                            gm[b * hw + i] += g.data()[off + i] * x.data()[off + i];
                            gx[off + i] *= mrow[i];
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(x.shape().to_vec(), gx)),
                    Some(Tensor::from_parts(vec![n, 1, h, w], gm)),
                ]
            },
        )
    }

    // -- frequency-domain pooling -------------------------------------------

    /// Projection of `x[n, c, h, w]` onto each basis image `basis[k, h, w]`:
    /// `out[n, k, c] = Σ_{h,w} x[n,c,h,w] · basis[k,h,w]`.
    pub fn spectral_sum(self, basis: Rc<Tensor>) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let kk = basis.shape()[0];
        assert_eq!(
            &basis.shape()[1..],
            &[h, w],
            "spectral_sum: basis/feature resolution"
        );
        let hw = h * w;
        let mut out = vec![0.0; n * kk * c];
        for b in 0..n {
            tensor::gemm(
                kk,
                hw,
                c,
                basis.data(),
                Strides::row_major(hw, false),
                &x.data()[b * c * hw..(b + 1) * c * hw],
                Strides::row_major(hw, true),
                &mut out[b * kk * c..(b + 1) * kk * c],
                Strides::row_major(c, false),
                0.0,
            );
        }
        self.graph.record(
            "spectral_sum",
            Rc::new(Tensor::from_parts(vec![n, kk, c], out)),
            &[self],
            move |g| {
                let mut gx = vec![0.0; n * c * hw];
                for b in 0..n {
                    tensor::gemm(
                        c,
                        kk,
                        hw,
                        &g.data()[b * kk * c..(b + 1) * kk * c],
                        Strides::row_major(c, true),
                        basis.data(),
                        Strides::row_major(hw, false),
                        &mut gx[b * c * hw..(b + 1) * c * hw],
                        Strides::row_major(hw, false),
                        0.0,
                    );
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
            },
        )
    }

    /// `out[n, k, c] = max_{h,w} x[n,c,h,w] · basis[k,h,w]`.
    pub fn spectral_max(self, basis: Rc<Tensor>) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let kk = basis.shape()[0];
        assert_eq!(
            &basis.shape()[1..],
            &[h, w],
            "spectral_max: basis/feature resolution"
        );
        let hw = h * w;
        let mut out = vec![0.0; n * kk * c];
        let mut arg = vec![0usize; n * kk * c];
        for b in 0..n {
            for k in 0..kk {
                let d = &basis.data()[k * hw..(k + 1) * hw];
                for ch in 0..c {
                    let xs = &x.data()[(b * c + ch) * hw..][..hw];
                    let (mut best, mut bi) = (f64::NEG_INFINITY, 0);
                    for (i, (xv, dv)) in xs.iter().zip(d).enumerate() {
                        let p = xv * dv;
                        if p > best {
                            best = p;
                            bi = i;
                        }
                    }
                    out[(b * kk + k) * c + ch] = best;
                    arg[(b * kk + k) * c + ch] = bi;
                }
            }
        }
        self.graph.record(
            "spectral_max",
            Rc::new(Tensor::from_parts(vec![n, kk, c], out)),
            &[self],
            move |g| {
                let mut gx = vec![0.0; n * c * hw];
                for b in 0..n {
                    for k in 0..kk {
                        for ch in 0..c {
                            let idx = (b * kk + k) * c + ch;
                            let i = arg[idx];
                            gx[(b * c + ch) * hw + i] += g.data()[idx] * basis.data()[k * hw + i];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
            },
        )
    }

    // -- loss ------------------------------------------------------------------

    /// Mean binary cross-entropy of probabilities `self` against a fixed
    /// target, with predictions clamped to `[eps, 1 - eps]`.
    pub fn bce_mean(self, target: &Tensor, eps: f64) -> Var<'g> {
        let p = self.value();
        assert_eq!(p.shape(), target.shape(), "bce: prediction/target shapes");
        let n = p.len() as f64;
        let loss = crate::train::bce_sum(p.data(), target.data(), eps) / n;
        let t = target.clone();
        self.graph
            .record("bce", Rc::new(Tensor::scalar(loss)), &[self], move |g| {
                let k = g.item() / n;
                let data = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&p, &t)| {
                        if p < eps || p > 1.0 - eps {
                            0.0
                        } else {
                            k * (-t / p + (1.0 - t) / (1.0 - p))
                        }
                    })
                    .collect();
                vec![Some(Tensor::from_parts(p.shape().to_vec(), data))]
            })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        Tensor::from_fn(shape, |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
    }

    /// Central-difference check of d(sum(f(x) * r))/dx for a random projection r.
    fn check<F>(inputs: Vec<Tensor>, f: F)
    where
        F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
    {
        let probe = {
            let g = Graph::inference();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let y = f(&g, &vars);
            pseudo(&y.shape(), 4242)
        };
        let eval = |ins: &[Tensor]| -> f64 {
            let g = Graph::inference();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let y = f(&g, &vars).value();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let y = f(&g, &vars);
        let loss = y.mul(g.constant(probe.clone())).sum_all();
        let grads = g.backward(loss).unwrap();
        for (vi, v) in vars.iter().enumerate() {
            let an = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&v.shape()));
            for i in 0..inputs[vi].len() {
                let h = 1e-6;
                let mut plus = inputs.clone();
                plus[vi].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[vi].data_mut()[i] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = an.data()[i];
                let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(
                    err < 1e-5,
                    "input {vi} elem {i}: analytic {a} numeric {num}"
                );
            }
        }
    }

    #[test]
    fn grad_linear_and_activations() {
        check(
            vec![pseudo(&[2, 3, 4], 1), pseudo(&[5, 4], 2), pseudo(&[5], 3)],
            |_, v| v[0].linear(v[1], Some(v[2])).gelu().sigmoid(),
        );
    }

    #[test]
    fn grad_conv_variants() {
        let specs = [
            (
                ConvSpec {
                    stride: 2,
                    padding: 1,
                    dilation: 1,
                    groups: 1,
                },
                [3, 2, 3, 3],
            ),
            (
                ConvSpec {
                    stride: 1,
                    padding: 3,
                    dilation: 3,
                    groups: 1,
                },
                [2, 2, 3, 3],
            ),
            (
                ConvSpec {
                    stride: 1,
                    padding: 1,
                    dilation: 1,
                    groups: 2,
                },
                [2, 1, 3, 3],
            ),
            (ConvSpec::POINTWISE, [4, 2, 1, 1]),
        ];
        for (spec, ws) in specs {
            let out_c = ws[0];
            check(
                vec![
                    pseudo(&[2, 2, 5, 5], 5),
                    pseudo(&ws, 6),
                    pseudo(&[out_c], 7),
                ],
                move |_, v| v[0].conv2d(v[1], Some(v[2]), spec),
            );
        }
    }

    #[test]
    fn grad_resize_and_shape_ops() {
        check(vec![pseudo(&[1, 2, 3, 5], 8)], |_, v| {
            v[0].resize_bilinear(7, 4)
        });
        check(vec![pseudo(&[1, 2, 8, 8], 9)], |_, v| {
            v[0].resize_bilinear(3, 5)
        });
        check(vec![pseudo(&[2, 3, 4], 10)], |_, v| {
            v[0].permute(&[1, 2, 0]).reshape(&[3, 8])
        });
        check(
            vec![pseudo(&[2, 3, 2], 11), pseudo(&[2, 1, 2], 12)],
            |_, v| Var::concat(&[v[0], v[1]], 1).slice(1, 1, 2).sum_axis(2),
        );
    }

    #[test]
    fn grad_attention_pieces() {
        check(
            vec![pseudo(&[2, 3, 4], 13), pseudo(&[2, 5, 4], 14)],
            |_, v| v[0].bmm(v[1], false, true).softmax_last(),
        );
        check(
            vec![pseudo(&[2, 4, 3], 15), pseudo(&[2, 4, 5], 16)],
            |_, v| v[0].bmm(v[1], true, false),
        );
        check(
            vec![pseudo(&[3, 6], 17), pseudo(&[6], 18), pseudo(&[6], 19)],
            |_, v| v[0].layer_norm_last(v[1], v[2], 1e-6),
        );
    }

    #[test]
    fn grad_broadcast_and_spectral() {
        check(
            vec![pseudo(&[2, 3, 2, 2], 20), pseudo(&[2, 3], 21)],
            |_, v| v[0].scale_channels(v[1]),
        );
        check(
            vec![pseudo(&[2, 3, 2, 2], 22), pseudo(&[2, 1, 2, 2], 23)],
            |_, v| v[0].mul_spatial(v[1]),
        );
        check(vec![pseudo(&[2, 3], 24), pseudo(&[1], 25)], |_, v| {
            v[0].mul_scalar_var(v[1]).one_minus()
        });
        let basis = Rc::new(pseudo(&[3, 2, 3], 26));
        let b2 = basis.clone();
        check(vec![pseudo(&[2, 4, 2, 3], 27)], move |_, v| {
            v[0].spectral_sum(basis.clone())
        });
        check(vec![pseudo(&[2, 4, 2, 3], 28)], move |_, v| {
            v[0].spectral_max(b2.clone())
        });
    }

    #[test]
    fn grad_bce() {
        let target = Tensor::from_fn(&[2, 3], |i| (i % 2) as f64);
        check(vec![pseudo(&[2, 3], 29)], move |_, v| {
            v[0].sigmoid().bce_mean(&target, 1e-7)
        });
    }

    #[test]
    fn inference_graph_stores_no_closures() {
        let g = Graph::inference();
        let x = g.leaf(Tensor::ones(&[2]));
        let y = x.relu();
        assert!(!y.requires_grad());
    }

    #[test]
    fn non_finite_diagnostic_names_tag() {
        let g = Graph::inference();
        let x = g
            .constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap())
            .tagged("input");
        let y = g.constant(Tensor::new(&[2], vec![f64::INFINITY, 1.0]).unwrap());
        let _ = x.mul(y).tagged("product");
        let msg = g.first_non_finite().unwrap();
        assert!(msg.contains("after `input`"), "{msg}");
    }
}
