//! Four-stage pyramid transformer encoder and the block shared with the decoder.
//!
//! The reference encoder follows the PVT-v2 layout: overlapping patch
//! embeddings, spatial-reduction attention and a depthwise-convolution MLP.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Conv2d, LayerNorm, Linear, ParamSpec, ParamStore};
use crate::tensor::{ConvSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalePreset {
    Toy,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub scale_preset: ScalePreset,
    pub encoder_channels: [usize; 4],
    pub decoder_channels: [usize; 3],
    pub stage_depths: [usize; 4],
    pub attention_heads: [usize; 4],
    pub mlp_ratios: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub decoder_depths: [usize; 3],
    pub decoder_heads: [usize; 3],
    pub decoder_mlp_ratios: [usize; 3],
    pub decoder_sr_ratios: [usize; 3],
}

impl BackboneConfig {
    pub fn full() -> Self {
        BackboneConfig {
            scale_preset: ScalePreset::Full,
            encoder_channels: [64, 128, 320, 512],
            decoder_channels: [256, 128, 64],
            stage_depths: [3, 4, 6, 3],
            attention_heads: [1, 2, 5, 8],
            mlp_ratios: [8, 8, 4, 4],
            sr_ratios: [8, 4, 2, 1],
            decoder_depths: [1, 1, 1],
            decoder_heads: [4, 2, 1],
            decoder_mlp_ratios: [4, 8, 8],
            decoder_sr_ratios: [2, 4, 8],
        }
    }

    pub fn toy() -> Self {
        BackboneConfig {
            scale_preset: ScalePreset::Toy,
            encoder_channels: [16, 32, 48, 64],
            decoder_channels: [32, 24, 16],
            stage_depths: [1, 1, 1, 1],
            attention_heads: [1, 1, 1, 1],
            mlp_ratios: [4, 4, 4, 4],
            sr_ratios: [8, 4, 2, 1],
            decoder_depths: [1, 1, 1],
            decoder_heads: [1, 1, 1],
            decoder_mlp_ratios: [4, 4, 4],
            decoder_sr_ratios: [2, 4, 8],
        }
    }

    pub fn preset(p: ScalePreset) -> Self {
        match p {
            ScalePreset::Toy => Self::toy(),
            ScalePreset::Full => Self::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.encoder_channels;
        if c.iter().chain(&self.decoder_channels).any(|&v| v == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !c.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "encoder_channels must be strictly increasing, got {c:?}"
            )));
        }
        if self.scale_preset == ScalePreset::Toy {
            let full = Self::full();
            if c.iter().zip(&full.encoder_channels).any(|(a, b)| a > b)
                || self
                    .decoder_channels
                    .iter()
                    .zip(&full.decoder_channels)
                    .any(|(a, b)| a > b)
            {
                return Err(Error::Config(
                    "toy preset channels exceed the full preset stage-wise".into(),
                ));
            }
        }
        let positive = |name: &str, v: &[usize]| -> Result<()> {
            if v.contains(&0) {
                return Err(Error::Config(format!(
                    "{name} entries must be positive, got {v:?}"
                )));
            }
            Ok(())
        };
        positive("stage_depths", &self.stage_depths)?;
        positive("attention_heads", &self.attention_heads)?;
        positive("mlp_ratios", &self.mlp_ratios)?;
        positive("sr_ratios", &self.sr_ratios)?;
        positive("decoder_depths", &self.decoder_depths)?;
        positive("decoder_heads", &self.decoder_heads)?;
        positive("decoder_mlp_ratios", &self.decoder_mlp_ratios)?;
        positive("decoder_sr_ratios", &self.decoder_sr_ratios)?;
        for (i, (&ch, &h)) in c.iter().zip(&self.attention_heads).enumerate() {
            if ch % h != 0 {
                return Err(Error::Config(format!(
                    "stage {} width {ch} not divisible by {h} heads",
                    i + 1
                )));
            }
        }
        for (i, (&ch, &h)) in self
            .decoder_channels
            .iter()
            .zip(&self.decoder_heads)
            .enumerate()
        {
            if ch % h != 0 {
                return Err(Error::Config(format!(
                    "decoder stage {} width {ch} not divisible by {h} heads",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// A single `channels × height × width` map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "empty feature map {channels}×{height}×{width}"
            )));
        }
        let tensor = Tensor::new(&[channels, height, width], data)?;
        if !tensor.all_finite() {
            return Err(Error::NonFinite(
                "feature map contains NaN or infinity".into(),
            ));
        }
        Ok(FeatureMap { tensor })
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => FeatureMap::new(c, h, w, t.into_data()),
            [1, c, h, w] => FeatureMap::new(c, h, w, t.into_data()),
            _ => Err(Error::Dimension(format!(
                "expected a C×H×W map, got shape {:?}",
                t.shape()
            ))),
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            tensor: Tensor::zeros(&[channels, height, width]),
        }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn at(&self, c: usize, h: usize, w: usize) -> f64 {
        self.tensor.data()[(c * self.height() + h) * self.width() + w]
    }

    /// As a one-item NCHW batch.
    pub fn to_batch(&self) -> Tensor {
        let (c, h, w) = self.dims();
        Tensor::new(&[1, c, h, w], self.tensor.data().to_vec()).expect("shape preserved")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePyramid {
    pub stages: Vec<FeatureMap>,
    pub input_resolution: (usize, usize),
}

/// Spatial-reduction multi-head attention followed by a depthwise-conv MLP,
/// both pre-normalised with residual connections.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub dim: usize,
    heads: usize,
    sr_ratio: usize,
    norm1: LayerNorm,
    q: Linear,
    kv: Linear,
    sr: Option<(Conv2d, LayerNorm)>,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    dwconv: Conv2d,
    fc2: Linear,
}

impl TransformerBlock {
    pub fn new(prefix: &str, dim: usize, heads: usize, mlp_ratio: usize, sr_ratio: usize) -> Self {
        let hidden = dim * mlp_ratio;
        let sr = (sr_ratio > 1).then(|| {
            (
                Conv2d::new(
                    format!("{prefix}.attn.sr"),
                    dim,
                    dim,
                    sr_ratio,
                    ConvSpec {
                        stride: sr_ratio,
                        padding: 0,
                        dilation: 1,
                        groups: 1,
                    },
                ),
                LayerNorm::new(format!("{prefix}.attn.norm"), dim),
            )
        });
        TransformerBlock {
            dim,
            heads,
            sr_ratio,
            norm1: LayerNorm::new(format!("{prefix}.norm1"), dim),
            q: Linear::new(format!("{prefix}.attn.q"), dim, dim),
            kv: Linear::new(format!("{prefix}.attn.kv"), dim, 2 * dim),
            sr,
            proj: Linear::new(format!("{prefix}.attn.proj"), dim, dim),
            norm2: LayerNorm::new(format!("{prefix}.norm2"), dim),
            fc1: Linear::new(format!("{prefix}.mlp.fc1"), dim, hidden),
            dwconv: Conv2d::new(
                format!("{prefix}.mlp.dwconv"),
                hidden,
                hidden,
                3,
                ConvSpec {
                    stride: 1,
                    padding: 1,
                    dilation: 1,
                    groups: hidden,
                },
            ),
            fc2: Linear::new(format!("{prefix}.mlp.fc2"), hidden, dim),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.norm1.specs(out);
        self.q.specs(out);
        self.kv.specs(out);
        if let Some((conv, norm)) = &self.sr {
            conv.specs(out);
            norm.specs(out);
        }
        self.proj.specs(out);
        self.norm2.specs(out);
        self.fc1.specs(out);
        self.dwconv.specs(out);
        self.fc2.specs(out);
    }

    fn attention<'g>(&self, p: &Bound<'g>, x: Var<'g>, h: usize, w: usize) -> Var<'g> {
        let s = x.shape();
        let (n, t, c) = (s[0], s[1], s[2]);
        let (heads, d) = (self.heads, c / self.heads);
        let q = self.q.forward(p, x);
        let ctx = match &self.sr {
            Some((conv, norm)) if h >= self.sr_ratio && w >= self.sr_ratio => {
                let reduced = conv.forward(p, nn::from_tokens(x, h, w));
                norm.forward(p, nn::to_tokens(reduced))
            }
            _ => x,
        };
        let tk = ctx.shape()[1];
        let kv = self.kv.forward(p, ctx);
        let k = kv.slice(2, 0, c);
        let v = kv.slice(2, c, c);
        let split = |z: Var<'g>, len: usize| {
            z.reshape(&[n, len, heads, d])
                .permute(&[0, 2, 1, 3])
                .reshape(&[n * heads, len, d])
        };
        let (q, k, v) = (split(q, t), split(k, tk), split(v, tk));
        let attn = q
            .bmm(k, false, true)
            .scale(1.0 / (d as f64).sqrt())
            .softmax_last();
        let out = attn
            .bmm(v, false, false)
            .reshape(&[n, heads, t, d])
            .permute(&[0, 2, 1, 3])
            .reshape(&[n, t, c]);
        self.proj.forward(p, out)
    }

    fn mlp<'g>(&self, p: &Bound<'g>, x: Var<'g>, h: usize, w: usize) -> Var<'g> {
        let hidden = self.fc1.forward(p, x);
        let mixed = nn::to_tokens(self.dwconv.forward(p, nn::from_tokens(hidden, h, w)));
        self.fc2.forward(p, mixed.gelu())
    }

    /// Tokens `[n, h·w, dim]` in, tokens out.
    pub fn forward_tokens<'g>(&self, p: &Bound<'g>, x: Var<'g>, h: usize, w: usize) -> Var<'g> {
        let x = x.add(self.attention(p, self.norm1.forward(p, x), h, w));
        x.add(self.mlp(p, self.norm2.forward(p, x), h, w))
    }

    /// NCHW in, NCHW out.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.dim {
            return Err(Error::Config(format!(
                "transformer block expects {} channels, got input {:?}",
                self.dim, s
            )));
        }
        let (h, w) = (s[2], s[3]);
        Ok(nn::from_tokens(
            self.forward_tokens(p, nn::to_tokens(x), h, w),
            h,
            w,
        ))
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct PyramidEncoder {
    pub cfg: BackboneConfig,
    stages: Vec<EncoderStage>,
}

impl PyramidEncoder {
    pub fn new(cfg: &BackboneConfig) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut cin = 3;
        for i in 0..4 {
            let c = cfg.encoder_channels[i];
            let prefix = format!("encoder.stage{}", i + 1);
            let (k, stride) = if i == 0 { (7, 4) } else { (3, 2) };
            let embed = Conv2d::new(
                format!("{prefix}.patch_embed.proj"),
                cin,
                c,
                k,
                ConvSpec {
                    stride,
                    padding: k / 2,
                    dilation: 1,
                    groups: 1,
                },
            );
            let blocks = (0..cfg.stage_depths[i])
                .map(|j| {
                    TransformerBlock::new(
                        &format!("{prefix}.block{}", j + 1),
                        c,
                        cfg.attention_heads[i],
                        cfg.mlp_ratios[i],
                        cfg.sr_ratios[i],
                    )
                })
                .collect();
            stages.push(EncoderStage {
                embed,
                embed_norm: LayerNorm::new(format!("{prefix}.patch_embed.norm"), c),
                blocks,
                norm: LayerNorm::new(format!("{prefix}.norm"), c),
            });
            cin = c;
        }
        PyramidEncoder {
            cfg: cfg.clone(),
            stages,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for s in &self.stages {
            s.embed.specs(out);
            s.embed_norm.specs(out);
            for b in &s.blocks {
                b.specs(out);
            }
            s.norm.specs(out);
        }
    }

    /// The transformer block at `stage` (1-based) and `index` (0-based).
    pub fn block(&self, stage: usize, index: usize) -> Option<&TransformerBlock> {
        self.stages.get(stage.checked_sub(1)?)?.blocks.get(index)
    }

    /// `images[n, 3, H, W]` to four NCHW stage maps.
    pub fn forward<'g>(&self, p: &Bound<'g>, images: Var<'g>) -> Result<[Var<'g>; 4]> {
        let s = images.shape();
        check_input_dims(&s)?;
        let mut x = images;
        let mut outs = Vec::with_capacity(4);
        for st in &self.stages {
            let e = st.embed.forward(p, x);
            let (h, w) = (e.shape()[2], e.shape()[3]);
            let mut t = st.embed_norm.forward(p, nn::to_tokens(e));
            for b in &st.blocks {
                t = b.forward_tokens(p, t, h, w);
            }
            x = nn::from_tokens(st.norm.forward(p, t), h, w);
            outs.push(x);
        }
        Ok([outs[0], outs[1], outs[2], outs[3]])
    }
}

pub(crate) fn check_input_dims(s: &[usize]) -> Result<()> {
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Dimension(format!(
            "expected an N×3×H×W image batch, got {s:?}"
        )));
    }
    for (axis, &v) in ["height", "width"].iter().zip(&s[2..]) {
        if v == 0 || v % 32 != 0 {
            return Err(Error::Dimension(format!(
                "{axis} {v} is not divisible by 32"
            )));
        }
    }
    Ok(())
}

/// Run the encoder on one image.
pub fn encode(
    image: &FeatureMap,
    encoder: &PyramidEncoder,
    params: &ParamStore,
) -> Result<StagePyramid> {
    if image.channels() != 3 {
        return Err(Error::Dimension(format!(
            "expected 3 image channels, got {}",
            image.channels()
        )));
    }
    let g = Graph::inference();
    let p = Bound::new(&g, params);
    let x = g.constant(image.to_batch());
    let outs = encoder.forward(&p, x)?;
    let stages = outs
        .iter()
        .map(|v| FeatureMap::from_tensor((*v.value()).clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(StagePyramid {
        stages,
        input_resolution: (image.height(), image.width()),
    })
}

/// Apply one transformer block to a single map.
pub fn transformer_block(
    x: &FeatureMap,
    block: &TransformerBlock,
    params: &ParamStore,
) -> Result<FeatureMap> {
    let g = Graph::inference();
    let p = Bound::new(&g, params);
    let out = block.forward(&p, g.constant(x.to_batch()))?;
    FeatureMap::from_tensor((*out.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_encoder() -> (PyramidEncoder, ParamStore) {
        let enc = PyramidEncoder::new(&BackboneConfig::toy());
        let mut specs = Vec::new();
        enc.specs(&mut specs);
        let store = ParamStore::initialize(&specs, 1);
        (enc, store)
    }

    #[test]
    fn toy_stage_shapes() {
        let (enc, store) = toy_encoder();
        let img = FeatureMap::new(
            3,
            64,
            64,
            (0..3 * 64 * 64).map(|i| (i % 7) as f64 / 7.0).collect(),
        )
        .unwrap();
        let pyr = encode(&img, &enc, &store).unwrap();
        let dims: Vec<_> = pyr.stages.iter().map(|s| s.dims()).collect();
        assert_eq!(dims, vec![(16, 16, 16), (32, 8, 8), (48, 4, 4), (64, 2, 2)]);
    }

    #[test]
    fn rejects_non_divisible_input() {
        let (enc, store) = toy_encoder();
        let img = FeatureMap::zeros(3, 250, 250);
        let err = encode(&img, &enc, &store).unwrap_err().to_string();
        assert!(err.contains("height 250"), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::full().validate().is_ok());
        assert!(BackboneConfig::toy().validate().is_ok());
        let mut c = BackboneConfig::toy();
        c.encoder_channels = [16, 16, 48, 64];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::toy();
        c.encoder_channels = [16, 32, 48, 640];
        assert!(c.validate().is_err());
    }

    #[test]
    fn block_preserves_shape_and_handles_zeros() {
        let block = TransformerBlock::new("b", 64, 2, 4, 2);
        let mut specs = Vec::new();
        block.specs(&mut specs);
        let store = ParamStore::initialize(&specs, 5);
        let out = transformer_block(&FeatureMap::zeros(64, 8, 8), &block, &store).unwrap();
        assert_eq!(out.dims(), (64, 8, 8));
        assert!(out.tensor().all_finite());
        let err = transformer_block(&FeatureMap::zeros(32, 8, 8), &block, &store).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
