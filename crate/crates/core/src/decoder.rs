//! Difficulty-guided transformer decoder.
//!
//! Each stage upsamples the running decoder map, fuses it with a refined skip,
//! runs a transformer block and gates the channels with a projection of the
//! frozen text embedding of the sample's difficulty label.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, Var};
use crate::backbone::{FeatureMap, TransformerBlock};
use crate::difficulty::DifficultyLabel;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Linear, ParamSpec, ParamStore};
use crate::seed;
use crate::tensor::Tensor;

/// Parameter-store name of the frozen `[2, C_T]` embedding table.
pub const EMBEDDING_TABLE: &str = "decoder.text_embedding";

/// Largest cosine similarity tolerated between the two table rows.
pub const MAX_LABEL_COSINE: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub source_label: DifficultyLabel,
}

/// Two frozen rows, `hard` then `easy`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub hard: Vec<f64>,
    pub easy: Vec<f64>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    dot / (na * nb)
}

impl EmbeddingTable {
    /// Unit-variance normal rows, redrawn until they are distinguishable.
    pub fn generate(seed: u64, dim: usize) -> Self {
        let mut rng = seed::component_rng(seed, "text-embedding");
        loop {
            let hard: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let easy: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            if cosine(&hard, &easy) < MAX_LABEL_COSINE {
                return EmbeddingTable { dim, hard, easy };
            }
        }
    }

    /// Reads a whitespace-separated embedding text file (word2vec text format,
    /// optional `count dim` header). Tokens may carry a `▁` word-start marker.
    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut hard = None;
        let mut easy = None;
        for line in text.lines() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let slot = match token.trim_start_matches('\u{2581}') {
                "hard" => &mut hard,
                "easy" => &mut easy,
                _ => continue,
            };
            if slot.is_some() {
                continue;
            }
            let values = parts
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| {
                    Error::Config(format!("{}: bad number for `{token}`: {e}", path.display()))
                })?;
            if values.len() != dim {
                return Err(Error::Config(format!(
                    "{}: `{token}` has {} components, expected {dim}",
                    path.display(),
                    values.len()
                )));
            }
            *slot = Some(values);
        }
        let (Some(hard), Some(easy)) = (hard, easy) else {
            return Err(Error::Config(format!(
                "{}: embedding file must contain both `hard` and `easy`",
                path.display()
            )));
        };
        if cosine(&hard, &easy) >= MAX_LABEL_COSINE {
            return Err(Error::Config(format!(
                "{}: `hard` and `easy` vectors are nearly parallel",
                path.display()
            )));
        }
        Ok(EmbeddingTable { dim, hard, easy })
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.hard.clone();
        data.extend_from_slice(&self.easy);
        Tensor::from_parts(vec![2, self.dim], data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [2, dim] => Ok(EmbeddingTable {
                dim,
                hard: t.data()[..dim].to_vec(),
                easy: t.data()[dim..].to_vec(),
            }),
            _ => Err(Error::Checkpoint(format!(
                "embedding table has shape {:?}",
                t.shape()
            ))),
        }
    }

    pub fn row(&self, label: DifficultyLabel) -> &[f64] {
        match label {
            DifficultyLabel::Hard => &self.hard,
            DifficultyLabel::Easy => &self.easy,
        }
    }
}

/// Look up a label by name.
pub fn embed_label(label: &str, table: &EmbeddingTable) -> Result<TextEmbedding> {
    let source_label = match label {
        "hard" => DifficultyLabel::Hard,
        "easy" => DifficultyLabel::Easy,
        other => {
            return Err(Error::Contract(format!(
                "unknown difficulty label `{other}`"
            )))
        }
    };
    Ok(TextEmbedding {
        vector: table.row(source_label).to_vec(),
        source_label,
    })
}

/// Channel gate driven by a text embedding.
#[derive(Clone, Debug)]
pub struct DgaGate {
    pub channels: usize,
    fc1: Linear,
    fc2: Linear,
}

impl DgaGate {
    pub fn new(prefix: &str, text_dim: usize, channels: usize) -> Self {
        let hidden = (channels / 2).max(1);
        DgaGate {
            channels,
            fc1: Linear::new(format!("{prefix}.fc1"), text_dim, hidden),
            fc2: Linear::new(format!("{prefix}.fc2"), hidden, channels),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.fc1.specs(out);
        self.fc2.specs(out);
    }

    /// `[n, C_T]` embeddings to `[n, C]` gates in `(0, 1)`.
    pub fn gate<'g>(&self, p: &Bound<'g>, text: Var<'g>) -> Var<'g> {
        self.fc2
            .forward(p, self.fc1.forward(p, text).relu())
            .sigmoid()
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, text: Var<'g>) -> Var<'g> {
        x.scale_channels(self.gate(p, text))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub width: usize,
    fuse: Conv2d,
    blocks: Vec<TransformerBlock>,
    pub gate: DgaGate,
}

impl DecoderStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        index: usize,
        prev: usize,
        skip: usize,
        width: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        sr_ratio: usize,
        text_dim: usize,
    ) -> Self {
        let prefix = format!("decoder.stage{}", index + 1);
        DecoderStage {
            width,
            fuse: Conv2d::pointwise(format!("{prefix}.fuse"), prev + skip, width),
            blocks: (0..depth)
                .map(|j| {
                    TransformerBlock::new(
                        &format!("{prefix}.block{}", j + 1),
                        width,
                        heads,
                        mlp_ratio,
                        sr_ratio,
                    )
                })
                .collect(),
            gate: DgaGate::new(&format!("{prefix}.dga"), text_dim, width),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.fuse.specs(out);
        for b in &self.blocks {
            b.specs(out);
        }
        self.gate.specs(out);
    }

    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        prev: Var<'g>,
        skip: Var<'g>,
        text: Var<'g>,
    ) -> Result<Var<'g>> {
        let (ps, ss) = (prev.shape(), skip.shape());
        if ps[2] * 2 != ss[2] || ps[3] * 2 != ss[3] {
            return Err(Error::Dimension(format!(
                "decoder state {}×{} cannot be upsampled onto skip {}×{}",
                ps[2], ps[3], ss[2], ss[3]
            )));
        }
        let up = prev.resize_bilinear(ss[2], ss[3]);
        let mut x = self.fuse.forward(p, Var::concat(&[up, skip], 1));
        for b in &self.blocks {
            x = b.forward(p, x)?;
        }
        Ok(self.gate.forward(p, x, text))
    }
}

/// Foreground probabilities at full image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMask {
    map: Tensor,
}

impl PredictionMask {
    pub fn new(height: usize, width: usize, probabilities: Vec<f64>) -> Result<Self> {
        Ok(PredictionMask {
            map: Tensor::new(&[height, width], probabilities)?,
        })
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

/// 1×1 projection to one channel, sigmoid, bilinear upsample to `(h, w)`.
#[derive(Clone, Debug)]
pub struct PredictHead {
    conv: Conv2d,
}

impl PredictHead {
    pub fn new(channels: usize) -> Self {
        PredictHead {
            conv: Conv2d::logit_head("decoder.head", channels, 1),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv.specs(out);
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, h: usize, w: usize) -> Var<'g> {
        self.conv.forward(p, x).sigmoid().resize_bilinear(h, w)
    }
}

/// Gate one map with one embedding.
pub fn dga(
    x: &FeatureMap,
    t: &TextEmbedding,
    gate: &DgaGate,
    params: &ParamStore,
) -> Result<FeatureMap> {
    if x.channels() != gate.channels {
        return Err(Error::Dimension(format!(
            "gate expects {} channels, got {}",
            gate.channels,
            x.channels()
        )));
    }
    let g = Graph::inference();
    let p = Bound::new(&g, params);
    let text = g.constant(Tensor::from_parts(
        vec![1, t.vector.len()],
        t.vector.clone(),
    ));
    let out = gate.forward(&p, g.constant(x.to_batch()), text);
    FeatureMap::from_tensor((*out.value()).clone())
}

pub fn predict_head(
    d_last: &FeatureMap,
    head: &PredictHead,
    scale: usize,
    params: &ParamStore,
) -> Result<PredictionMask> {
    let g = Graph::inference();
    let p = Bound::new(&g, params);
    let (h, w) = (d_last.height() * scale, d_last.width() * scale);
    let out = head.forward(&p, g.constant(d_last.to_batch()), h, w);
    PredictionMask::new(h, w, out.value().data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_table_is_distinct_and_stable() {
        let a = EmbeddingTable::generate(11, 300);
        let b = EmbeddingTable::generate(11, 300);
        assert_eq!(a, b);
        assert!(cosine(&a.hard, &a.easy) < MAX_LABEL_COSINE);
        assert_eq!(embed_label("hard", &a).unwrap().vector.len(), 300);
        assert!(matches!(embed_label("medium", &a), Err(Error::Contract(_))));
    }

    #[test]
    fn loads_bpe_style_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(
            &path,
            "3 3\n\u{2581}hard 1 0 0\nfoo 1 1 1\n\u{2581}easy 0 1 0\n",
        )
        .unwrap();
        let t = EmbeddingTable::load(&path, 3).unwrap();
        assert_eq!(t.hard, vec![1.0, 0.0, 0.0]);
        assert_eq!(t.easy, vec![0.0, 1.0, 0.0]);
        assert!(EmbeddingTable::load(&path, 4).is_err());
    }

    #[test]
    fn zero_text_gives_half_gate() {
        let gate = DgaGate::new("g", 4, 6);
        let mut specs = Vec::new();
        gate.specs(&mut specs);
        let store = ParamStore::initialize(&specs, 0);
        let x = FeatureMap::new(6, 2, 2, (0..24).map(|i| i as f64).collect()).unwrap();
        let t = TextEmbedding {
            vector: vec![0.0; 4],
            source_label: DifficultyLabel::Easy,
        };
        let out = dga(&x, &t, &gate, &store).unwrap();
        for (o, i) in out.data().iter().zip(x.data()) {
            assert_eq!(*o, 0.5 * i);
        }
    }
}
