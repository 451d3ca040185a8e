//! The assembled network: encoder, M2S skip refinement, global prior,
//! difficulty verdict and the difficulty-guided decoder.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{self, BackboneConfig, FeatureMap, PyramidEncoder, ScalePreset};
use crate::decoder::{DecoderStage, EmbeddingTable, PredictHead, PredictionMask, EMBEDDING_TABLE};
use crate::difficulty::{
    self, DifficultyConfig, DifficultyLabel, DifficultyVerdict, GlobalPriorMap,
};
use crate::error::{Error, Result};
use crate::m2s::{M2SBlock, M2SConfig};
use crate::nn::{Bound, Conv2d, ParamSpec, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub text_dim: usize,
    pub difficulty: DifficultyConfig,
    /// Word-vector file supplying the `hard`/`easy` rows; a seeded draw otherwise.
    pub embedding_file: Option<PathBuf>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            text_dim: 300,
            difficulty: DifficultyConfig::default(),
            embedding_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub m2s: M2SConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig {
            backbone: BackboneConfig::full(),
            m2s: M2SConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }

    pub fn toy() -> Self {
        ModelConfig {
            backbone: BackboneConfig::toy(),
            m2s: M2SConfig::toy(),
            decoder: DecoderConfig::default(),
        }
    }

    pub fn preset(p: ScalePreset) -> Self {
        match p {
            ScalePreset::Toy => Self::toy(),
            ScalePreset::Full => Self::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.m2s.validate()?;
        self.decoder.difficulty.validate()?;
        if self.decoder.text_dim == 0 {
            return Err(Error::Config("text_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Outputs of one batched forward pass, still attached to the graph.
pub struct ForwardPass<'g> {
    /// `[n, 1, H, W]`.
    pub mask: Var<'g>,
    /// `[n, 1, H/32, W/32]`.
    pub prior: Var<'g>,
    pub verdicts: Vec<DifficultyVerdict>,
    pub skips: [Var<'g>; 4],
    pub decoder_states: Vec<Var<'g>>,
}

#[derive(Clone, Debug)]
pub struct M2SFormer {
    pub cfg: ModelConfig,
    pub encoder: PyramidEncoder,
    pub m2s: M2SBlock,
    prior_head: Conv2d,
    entry: Conv2d,
    pub stages: Vec<DecoderStage>,
    pub head: PredictHead,
}

impl M2SFormer {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let b = &cfg.backbone;
        let cr = cfg.m2s.reduced_channels;
        let mut prev = cr;
        let mut stages = Vec::with_capacity(3);
        for i in 0..3 {
            let width = b.decoder_channels[i];
            stages.push(DecoderStage::new(
                i,
                prev,
                cr,
                width,
                b.decoder_depths[i],
                b.decoder_heads[i],
                b.decoder_mlp_ratios[i],
                b.decoder_sr_ratios[i],
                cfg.decoder.text_dim,
            ));
            prev = width;
        }
        Ok(M2SFormer {
            cfg: cfg.clone(),
            encoder: PyramidEncoder::new(b),
            m2s: M2SBlock::new(&b.encoder_channels, &cfg.m2s),
            prior_head: Conv2d::logit_head("prior_head", cr, 1),
            entry: Conv2d::pointwise("decoder.entry", cr, cr),
            stages,
            head: PredictHead::new(prev),
        })
    }

    /// Learnable parameters in declaration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.encoder.specs(&mut out);
        self.m2s.specs(&mut out);
        self.prior_head.specs(&mut out);
        self.entry.specs(&mut out);
        for s in &self.stages {
            s.specs(&mut out);
        }
        self.head.specs(&mut out);
        out
    }

    pub fn parameter_count(&self) -> u64 {
        self.param_specs()
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.numel() as u64)
            .sum()
    }

    /// Fresh parameters plus the frozen embedding table.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::initialize(&self.param_specs(), seed);
        let table = match &self.cfg.decoder.embedding_file {
            Some(path) => EmbeddingTable::load(path, self.cfg.decoder.text_dim)?,
            None => EmbeddingTable::generate(seed, self.cfg.decoder.text_dim),
        };
        store.insert(EMBEDDING_TABLE, table.to_tensor(), false)?;
        Ok(store)
    }

    /// Check a store (e.g. from a checkpoint) fits this architecture.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let mut specs = self.param_specs();
        specs.push(ParamSpec {
            name: EMBEDDING_TABLE.into(),
            shape: vec![2, self.cfg.decoder.text_dim],
            init: crate::nn::Init::Zeros,
            trainable: false,
        });
        store.validate_against(&specs)
    }

    pub fn prior<'g>(&self, p: &Bound<'g>, f4: Var<'g>) -> Var<'g> {
        self.prior_head.forward(p, f4).sigmoid()
    }

    /// Batched forward pass. `label_override` replaces every computed verdict label.
    pub fn forward_graph<'g>(
        &self,
        p: &Bound<'g>,
        images: Var<'g>,
        label_override: Option<DifficultyLabel>,
    ) -> Result<ForwardPass<'g>> {
        let s = images.shape();
        backbone::check_input_dims(&s)?;
        let (n, h, w) = (s[0], s[2], s[3]);
        let stages = self.encoder.forward(p, images)?;
        let m2s = self.m2s.forward(p, &stages, (h, w))?;
        let skips = m2s.skips;
        let prior = self.prior(p, skips[3]);

        let pv = prior.value();
        let (ph, pw) = (pv.shape()[2], pv.shape()[3]);
        let dcfg = &self.cfg.decoder.difficulty;
        let mut verdicts = Vec::with_capacity(n);
        for b in 0..n {
            let map = Tensor::from_parts(
                vec![ph, pw],
                pv.data()[b * ph * pw..(b + 1) * ph * pw].to_vec(),
            );
            let field = difficulty::curvature_field(&map, dcfg.epsilon, dcfg.mode)?;
            let score = difficulty::difficulty_score(&field, dcfg.epsilon)?;
            let mut v = difficulty::classify(score, dcfg.threshold);
            if let Some(label) = label_override {
                v.label = label;
            }
            verdicts.push(v);
        }

        let table = p.get(EMBEDDING_TABLE).value();
        let dim = self.cfg.decoder.text_dim;
        let mut text = Vec::with_capacity(n * dim);
        for v in &verdicts {
            let row = v.label.index();
            text.extend_from_slice(&table.data()[row * dim..(row + 1) * dim]);
        }
        let text = p.graph().constant(Tensor::from_parts(vec![n, dim], text));

        let mut d = self.entry.forward(p, skips[3]);
        let mut decoder_states = Vec::with_capacity(3);
        for (stage, skip) in self.stages.iter().zip([skips[2], skips[1], skips[0]]) {
            d = stage.forward(p, d, skip, text)?;
            decoder_states.push(d);
        }
        let mask = self.head.forward(p, d, h, w);
        Ok(ForwardPass {
            mask,
            prior,
            verdicts,
            skips,
            decoder_states,
        })
    }

    /// Inference on one `3 × H × W` image.
    pub fn forward(
        &self,
        image: &FeatureMap,
        params: &ParamStore,
    ) -> Result<(PredictionMask, GlobalPriorMap, DifficultyVerdict)> {
        let mut out = self.predict_batch(&image.to_batch(), params)?;
        Ok(out.remove(0))
    }

    /// Inference on an `[n, 3, H, W]` batch.
    pub fn predict_batch(
        &self,
        images: &Tensor,
        params: &ParamStore,
    ) -> Result<Vec<(PredictionMask, GlobalPriorMap, DifficultyVerdict)>> {
        let g = Graph::inference();
        let p = Bound::new(&g, params);
        let fp = self.forward_graph(&p, g.constant(images.clone()), None)?;
        let mask = fp.mask.value();
        let prior = fp.prior.value();
        let (n, _, h, w) = mask.dims4();
        let (ph, pw) = (prior.shape()[2], prior.shape()[3]);
        (0..n)
            .map(|b| {
                Ok((
                    PredictionMask::new(h, w, mask.data()[b * h * w..(b + 1) * h * w].to_vec())?,
                    GlobalPriorMap::from_values(
                        ph,
                        pw,
                        prior.data()[b * ph * pw..(b + 1) * ph * pw].to_vec(),
                    )?,
                    fp.verdicts[b],
                ))
            })
            .collect()
    }
}

/// Exact learnable-scalar count of the model `cfg` describes.
pub fn count_parameters(cfg: &ModelConfig) -> Result<u64> {
    Ok(M2SFormer::new(cfg)?.parameter_count())
}
