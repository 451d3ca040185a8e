mod common;

use m2sformer::autograd::Graph;
use m2sformer::backbone::{
    encode, transformer_block, BackboneConfig, FeatureMap, PyramidEncoder, TransformerBlock,
};
use m2sformer::error::Error;
use m2sformer::model::{count_parameters, ModelConfig};
use m2sformer::nn::{Bound, ParamSpec, ParamStore};
use m2sformer::tensor::Tensor;

fn encoder(cfg: &BackboneConfig, seed: u64) -> (PyramidEncoder, ParamStore) {
    let enc = PyramidEncoder::new(cfg);
    let mut specs: Vec<ParamSpec> = Vec::new();
    enc.specs(&mut specs);
    (enc, ParamStore::initialize(&specs, seed))
}

fn block(dim: usize, sr: usize, seed: u64) -> (TransformerBlock, ParamStore) {
    let b = TransformerBlock::new("blk", dim, 2, 2, sr);
    let mut specs: Vec<ParamSpec> = Vec::new();
    b.specs(&mut specs);
    (b, ParamStore::initialize(&specs, seed))
}

fn image(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
    let mut r = common::rng(seed);
    FeatureMap::from_tensor(common::uniform(&[c, h, w], 0.0, 1.0, &mut r)).unwrap()
}

#[test]
fn toy_stage_dims() {
    let (enc, params) = encoder(&BackboneConfig::toy(), 1);
    let out = encode(&image(3, 64, 64, 1), &enc, &params).unwrap();
    let dims: Vec<_> = out.stages.iter().map(FeatureMap::dims).collect();
    assert_eq!(dims, [(16, 16, 16), (32, 8, 8), (48, 4, 4), (64, 2, 2)]);
    assert_eq!(out.input_resolution, (64, 64));
}

#[test]
fn rectangular_inputs_keep_the_stride_contract() {
    let (enc, params) = encoder(&BackboneConfig::toy(), 2);
    let out = encode(&image(3, 96, 64, 2), &enc, &params).unwrap();
    for (i, s) in out.stages.iter().enumerate() {
        let f = 4 << i;
        assert_eq!((s.height(), s.width()), (96 / f, 64 / f));
    }
}

#[test]
fn indivisible_input_names_the_axis() {
    let (enc, params) = encoder(&BackboneConfig::toy(), 3);
    let err = encode(&image(3, 250, 250, 3), &enc, &params).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(err.to_string().contains("height 250"), "{err}");
    let err = encode(&image(3, 64, 80, 3), &enc, &params).unwrap_err();
    assert!(err.to_string().contains("width 80"), "{err}");
    assert!(matches!(
        encode(&image(1, 64, 64, 3), &enc, &params),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn encoder_is_deterministic() {
    let (enc, params) = encoder(&BackboneConfig::toy(), 4);
    let x = image(3, 64, 64, 4);
    let a = encode(&x, &enc, &params).unwrap();
    let b = encode(&x, &enc, &params).unwrap();
    for (s, t) in a.stages.iter().zip(&b.stages) {
        assert!(s
            .data()
            .iter()
            .zip(t.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert!(enc.block(1, 0).is_some());
    assert!(enc.block(0, 0).is_none());
    assert!(enc.block(4, 1).is_none());
}

#[test]
fn block_preserves_shape_and_handles_zeros() {
    let (b, params) = block(64, 2, 5);
    let y = transformer_block(&image(64, 8, 8, 5), &b, &params).unwrap();
    assert_eq!(y.dims(), (64, 8, 8));
    let z = transformer_block(&FeatureMap::zeros(64, 8, 8), &b, &params).unwrap();
    assert!(z.data().iter().all(|v| v.is_finite()));
    assert!(matches!(
        transformer_block(&image(32, 8, 8, 5), &b, &params),
        Err(Error::Config(_))
    ));
}

#[test]
fn block_is_sensitive_to_a_single_input() {
    let (b, mut params) = block(16, 1, 6);
    common::jitter(&mut params, 0.05, 6);
    let x = image(16, 8, 8, 6);
    let base = transformer_block(&x, &b, &params).unwrap();
    let mut data = x.data().to_vec();
    data[3 * 64 + 17] += 1e-3;
    let moved = transformer_block(&FeatureMap::new(16, 8, 8, data).unwrap(), &b, &params).unwrap();
    assert_ne!(base, moved);
}

#[test]
fn block_input_gradient_matches_finite_differences() {
    let (b, mut params) = block(8, 2, 7);
    common::jitter(&mut params, 0.05, 7);
    let mut r = common::rng(7);
    let x = common::uniform(&[1, 8, 8, 8], -1.0, 1.0, &mut r);
    let dir = common::uniform(&[1, 8, 8, 8], -1.0, 1.0, &mut r);
    let w = common::uniform(&[1, 8, 8, 8], -1.0, 1.0, &mut r);
    let objective = |input: &Tensor| {
        let g = Graph::inference();
        let p = Bound::new(&g, &params);
        let y = b.forward(&p, g.constant(input.clone())).unwrap();
        y.value()
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let g = Graph::new();
    let p = Bound::new(&g, &params);
    let xv = g.leaf(x.clone());
    let y = b.forward(&p, xv).unwrap();
    let loss = y.mul(g.constant(w.clone())).sum_all();
    let grads = g.backward(loss).unwrap();
    let gx = grads.get(xv).unwrap();
    let analytic: f64 = gx.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
    let h = 1e-5;
    let up = objective(&x.zip_map(&dir, |a, d| a + h * d));
    let down = objective(&x.zip_map(&dir, |a, d| a - h * d));
    let numeric = (up - down) / (2.0 * h);
    assert!(
        common::rel_err(analytic, numeric, 1e-8) <= 1e-4,
        "{analytic} vs {numeric}"
    );
}

fn linear(i: u64, o: u64) -> u64 {
    i * o + o
}

fn conv(cin: u64, cout: u64, k: u64, groups: u64) -> u64 {
    cin / groups * cout * k * k + cout
}

fn norm(d: u64) -> u64 {
    2 * d
}

fn block_count(d: u64, mlp: u64, sr: u64) -> u64 {
    let h = d * mlp;
    let reduction = if sr > 1 {
        conv(d, d, sr, 1) + norm(d)
    } else {
        0
    };
    norm(d)
        + linear(d, d)
        + linear(d, 2 * d)
        + reduction
        + linear(d, d)
        + norm(d)
        + linear(d, h)
        + conv(h, h, 3, h)
        + linear(h, d)
}

fn model_count(cfg: &ModelConfig) -> u64 {
    let b = &cfg.backbone;
    let mut n = 0;
    let mut cin = 3;
    for i in 0..4 {
        let c = b.encoder_channels[i] as u64;
        let k = if i == 0 { 7 } else { 3 };
        n += conv(cin, c, k, 1) + norm(c) + norm(c);
        n += b.stage_depths[i] as u64
            * block_count(c, b.mlp_ratios[i] as u64, b.sr_ratios[i] as u64);
        cin = c;
    }
    let m = &cfg.m2s;
    let cr = m.reduced_channels as u64;
    let cc = 4 * cr;
    let hidden = (cc / m.reduction_ratio as u64).max(1);
    n += b
        .encoder_channels
        .iter()
        .map(|&c| linear(c as u64, cr))
        .sum::<u64>();
    n += linear(cc, hidden) + linear(hidden, cc);
    for l in 1..=m.pyramid_levels {
        let cl = ((cc as f64 / m.channel_decay.powi(l as i32 - 1)).floor() as u64)
            .max(m.min_channels as u64);
        n += conv(cc, cc, 3, 1) + linear(cc, cl) + linear(cl, 1) + 2 + conv(cl, cc, 3, 1);
    }
    n += linear(cr, 1) + linear(cr, cr);
    let t = cfg.decoder.text_dim as u64;
    let mut prev = cr;
    for i in 0..3 {
        let w = b.decoder_channels[i] as u64;
        n += linear(prev + cr, w);
        n += b.decoder_depths[i] as u64
            * block_count(
                w,
                b.decoder_mlp_ratios[i] as u64,
                b.decoder_sr_ratios[i] as u64,
            );
        let gh = (w / 2).max(1);
        n += linear(t, gh) + linear(gh, w);
        prev = w;
    }
    n + linear(prev, 1)
}

#[test]
fn toy_count_matches_layer_by_layer_formula() {
    let cfg = ModelConfig::toy();
    assert_eq!(count_parameters(&cfg).unwrap(), model_count(&cfg));
}

#[test]
fn full_count_matches_layer_by_layer_formula() {
    let cfg = ModelConfig::full();
    assert_eq!(count_parameters(&cfg).unwrap(), model_count(&cfg));
}

#[test]
fn doubling_widths_grows_count_between_two_and_four() {
    let base = ModelConfig::toy();
    let mut wide = base.clone();
    wide.backbone.encoder_channels = base.backbone.encoder_channels.map(|c| 2 * c);
    wide.backbone.decoder_channels = base.backbone.decoder_channels.map(|c| 2 * c);
    wide.m2s.reduced_channels *= 2;
    wide.m2s.min_channels *= 2;
    let ratio = count_parameters(&wide).unwrap() as f64 / count_parameters(&base).unwrap() as f64;
    assert!(ratio > 2.0 && ratio < 4.0, "{ratio}");
}

#[test]
fn config_validation() {
    let mut c = BackboneConfig::toy();
    c.encoder_channels = [16, 16, 48, 64];
    assert!(c.validate().is_err());
    let mut c = BackboneConfig::toy();
    c.attention_heads = [3, 1, 1, 1];
    assert!(c.validate().unwrap_err().to_string().contains("divisible"));
    let mut c = BackboneConfig::toy();
    c.encoder_channels = [16, 32, 48, 1024];
    assert!(c.validate().is_err());
    BackboneConfig::full().validate().unwrap();
}
