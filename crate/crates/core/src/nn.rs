//! Named parameters and the handful of layer types every module is built from.
//!
//! Layers are plain descriptors: they know their parameter names and shapes
//! ([`ParamSpec`]) and how to apply themselves to a [`Var`] given a [`Bound`]
//! view of a [`ParamStore`]. Parameter storage is owned by the caller.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{ConvSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal draw truncated to two standard deviations.
    TruncNormal {
        std: f64,
    },
    /// Normal with std `sqrt(2 / fan_out)`.
    HeFanOut {
        fan_out: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Rc<Tensor>,
    pub trainable: bool,
}

/// Ordered, name-addressable parameter storage.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.trainable == b.trainable && a.value == b.value)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materialise `specs`, drawing each initial value from a stream keyed by
    /// the parameter's name.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Self {
        let mut store = ParamStore::new();
        for spec in specs {
            let mut rng = seed::component_rng(seed, &format!("init/{}", spec.name));
            let n = spec.numel();
            let data: Vec<f64> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::TruncNormal { std } => (0..n)
                    .map(|_| loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect(),
                Init::HeFanOut { fan_out } => {
                    let std = (2.0 / fan_out.max(1) as f64).sqrt();
                    (0..n)
                        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                        .collect()
                }
            };
            store
                .insert(
                    &spec.name,
                    Tensor::from_parts(spec.shape.clone(), data),
                    spec.trainable,
                )
                .expect("duplicate parameter name in model specification");
        }
        store
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("parameter `{name}` defined twice")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value: Rc::new(value),
            trainable,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &*self.entries[i].value)
    }

    /// Replace the value of an existing parameter; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        if self.entries[i].value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.entries[i].value.shape(),
                value.shape()
            )));
        }
        self.entries[i].value = Rc::new(value);
        Ok(())
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor {
        Rc::make_mut(&mut self.entries[index].value)
    }

    /// Number of learnable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Check that this store holds exactly the parameters `specs` describe.
    pub fn validate_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            match self.get(&spec.name) {
                None => {
                    return Err(Error::Checkpoint(format!(
                        "missing parameter `{}`",
                        spec.name
                    )))
                }
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{}` has shape {:?}, model expects {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                _ => {}
            }
        }
        if self.len() != specs.len() {
            let known: std::collections::HashSet<&str> =
                specs.iter().map(|s| s.name.as_str()).collect();
            let extra: Vec<&str> = self
                .entries
                .iter()
                .map(|e| e.name.as_str())
                .filter(|n| !known.contains(n))
                .collect();
            return Err(Error::Checkpoint(format!(
                "unexpected parameters: {extra:?}"
            )));
        }
        Ok(())
    }
}

/// A store's parameters materialised as variables of one graph.
pub struct Bound<'g> {
    graph: &'g Graph,
    store: &'g ParamStore,
    vars: RefCell<Vec<Option<Var<'g>>>>,
}

impl<'g> Bound<'g> {
    pub fn new(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Bound {
            graph,
            store,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn get(&self, name: &str) -> Var<'g> {
        let i = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not in store"));
        if let Some(v) = self.vars.borrow()[i] {
            return v;
        }
        let entry = &self.store.entries[i];
        let v = if entry.trainable {
            self.graph.leaf(entry.value.clone())
        } else {
            self.graph.constant(entry.value.clone())
        };
        self.vars.borrow_mut()[i] = Some(v);
        v
    }

    /// Gradient per store entry (`None` for parameters the graph never used).
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
    pub bias: bool,
    /// Weight init; He fan-out when unset.
    pub init: Option<Init>,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            kernel,
            spec,
            bias: true,
            init: None,
        }
    }

    /// Small truncated-normal weights, for convs that emit logits.
    pub fn logit_head(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Conv2d {
            init: Some(Init::TruncNormal { std: 0.02 }),
            ..Conv2d::pointwise(name, cin, cout)
        }
    }

    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Conv2d::new(name, cin, cout, 1, ConvSpec::POINTWISE)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        let groups = self.spec.groups;
        let fan_out = self.kernel * self.kernel * self.cout / groups;
        out.push(ParamSpec {
            name: self.weight_name(),
            shape: vec![self.cout, self.cin / groups, self.kernel, self.kernel],
            init: self.init.unwrap_or(Init::HeFanOut { fan_out }),
            trainable: true,
        });
        if self.bias {
            out.push(ParamSpec {
                name: self.bias_name(),
                shape: vec![self.cout],
                init: Init::Zeros,
                trainable: true,
            });
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let b = self.bias.then(|| p.get(&self.bias_name()));
        x.conv2d(p.get(&self.weight_name()), b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Linear {
            name: name.into(),
            input,
            output,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: format!("{}.weight", self.name),
            shape: vec![self.output, self.input],
            init: Init::TruncNormal { std: 0.02 },
            trainable: true,
        });
        out.push(ParamSpec {
            name: format!("{}.bias", self.name),
            shape: vec![self.output],
            init: Init::Zeros,
            trainable: true,
        });
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.linear(
            p.get(&format!("{}.weight", self.name)),
            Some(p.get(&format!("{}.bias", self.name))),
        )
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
            eps: 1e-6,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: format!("{}.weight", self.name),
            shape: vec![self.dim],
            init: Init::Ones,
            trainable: true,
        });
        out.push(ParamSpec {
            name: format!("{}.bias", self.name),
            shape: vec![self.dim],
            init: Init::Zeros,
            trainable: true,
        });
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.layer_norm_last(
            p.get(&format!("{}.weight", self.name)),
            p.get(&format!("{}.bias", self.name)),
            self.eps,
        )
    }
}

/// A learnable one-element scalar.
#[derive(Clone, Debug)]
pub struct Scalar {
    pub name: String,
    pub init: Init,
}

impl Scalar {
    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: self.name.clone(),
            shape: vec![1],
            init: self.init,
            trainable: true,
        });
    }

    pub fn get<'g>(&self, p: &Bound<'g>) -> Var<'g> {
        p.get(&self.name)
    }
}

/// NCHW feature map to `[n, h·w, c]` tokens.
pub fn to_tokens(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]]).permute(&[0, 2, 1])
}

/// `[n, h·w, c]` tokens back to an NCHW map.
pub fn from_tokens(x: Var<'_>, h: usize, w: usize) -> Var<'_> {
    let s = x.shape();
    x.permute(&[0, 2, 1]).reshape(&[s[0], s[2], h, w])
}
