//! Dual-BCE objective, cosine schedule, Adam and the training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::data::ForgerySample;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::M2SFormer;
use crate::nn::{Bound, ParamStore};
use crate::seed;
use crate::tensor::Tensor;

pub const DEFAULT_LOSS_EPSILON: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub final_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-4,
            final_lr: 1e-6,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            loss_epsilon: DEFAULT_LOSS_EPSILON,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.final_lr < self.initial_lr) || self.final_lr < 0.0 {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 <= final_lr < initial_lr, got {} and {}",
                self.final_lr, self.initial_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.loss_epsilon > 0.0 && self.loss_epsilon < 0.5) {
            return Err(Error::Config(format!(
                "loss_epsilon out of range: {}",
                self.loss_epsilon
            )));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main_bce: f64,
    pub prior_bce: f64,
    pub total: f64,
}

pub(crate) fn bce_sum(p: &[f64], t: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(t)
        .map(|(&p, &t)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum()
}

/// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
pub fn bce(target: &Tensor, pred: &Tensor, eps: f64) -> Result<f64> {
    if target.shape() != pred.shape() {
        return Err(Error::Dimension(format!(
            "bce target {:?} vs prediction {:?}",
            target.shape(),
            pred.shape()
        )));
    }
    if target.is_empty() {
        return Err(Error::Dimension("bce on an empty map".into()));
    }
    Ok(bce_sum(pred.data(), target.data(), eps) / target.len() as f64)
}

/// Graph form of the objective for `mask[n,1,H,W]`, `prior[n,1,h,w]`.
pub fn loss_terms<'g>(
    mask: Var<'g>,
    prior: Var<'g>,
    target: &Tensor,
    eps: f64,
) -> (Var<'g>, Var<'g>, Var<'g>) {
    let s = mask.shape();
    let main = mask.bce_mean(target, eps);
    let up = prior.resize_bilinear(s[2], s[3]);
    let aux = up.bce_mean(target, eps);
    (main, aux, main.add(aux))
}

/// `R_t`, `R_p` are `H × W`; `G` is the stride-32 prior.
pub fn total_loss(r_t: &Tensor, r_p: &Tensor, g: &Tensor, eps: f64) -> Result<LossBreakdown> {
    let (h, w) = match *r_t.shape() {
        [h, w] => (h, w),
        _ => {
            return Err(Error::Dimension(format!(
                "target must be H×W, got {:?}",
                r_t.shape()
            )))
        }
    };
    if r_p.shape() != r_t.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs target {:?}",
            r_p.shape(),
            r_t.shape()
        )));
    }
    let (gh, gw) = match *g.shape() {
        [a, b] => (a, b),
        _ => {
            return Err(Error::Dimension(format!(
                "prior must be 2-D, got {:?}",
                g.shape()
            )))
        }
    };
    let graph = Graph::inference();
    let mask = graph.constant(Tensor::new(&[1, 1, h, w], r_p.data().to_vec())?);
    let prior = graph.constant(Tensor::new(&[1, 1, gh, gw], g.data().to_vec())?);
    let target = Tensor::new(&[1, 1, h, w], r_t.data().to_vec())?;
    let (main, aux, _) = loss_terms(mask, prior, &target, eps);
    let (main_bce, prior_bce) = (main.value().item(), aux.value().item());
    Ok(LossBreakdown {
        main_bce,
        prior_bce,
        total: main_bce + prior_bce,
    })
}

/// Single-cycle cosine annealing from `initial_lr` to `final_lr`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return cfg.final_lr;
    }
    if step == 0 {
        return cfg.initial_lr;
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    cfg.final_lr + 0.5 * (cfg.initial_lr - cfg.final_lr) * (1.0 + phase.cos())
}

/// Adam with bias correction; state is kept per store entry.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .entries()
            .iter()
            .map(|e| vec![0.0; e.value.len()])
            .collect();
        Adam {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_epsilon,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.entries()[i].trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.value_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

pub fn batch_tensors(samples: &[&ForgerySample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Tensor> = samples
        .iter()
        .map(|s| {
            let (h, w) = (s.mask.shape()[0], s.mask.shape()[1]);
            Tensor::new(&[1, h, w], s.mask.data().to_vec())
        })
        .collect::<Result<_>>()?;
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// One optimisation step on a batch; returns the loss before the update.
pub fn train_step(
    model: &M2SFormer,
    params: &mut ParamStore,
    adam: &mut Adam,
    images: &Tensor,
    masks: &Tensor,
    lr: f64,
    eps: f64,
) -> Result<LossBreakdown> {
    let (loss, grads) = {
        let g = Graph::new();
        let p = Bound::new(&g, params);
        let fp = model.forward_graph(&p, g.constant(images.clone()), None)?;
        let (main, aux, total) = loss_terms(fp.mask, fp.prior, masks, eps);
        let loss = LossBreakdown {
            main_bce: main.value().item(),
            prior_bce: aux.value().item(),
            total: total.value().item(),
        };
        if !loss.total.is_finite() {
            let origin = g.first_non_finite().unwrap_or_else(|| "loss".into());
            return Err(Error::NonFinite(format!(
                "training loss is not finite; first offending tensor: {origin}"
            )));
        }
        let grads = g.backward(total)?;
        (loss, p.gradients(&grads))
    };
    adam.step(params, &grads, lr);
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_val_dsc: Option<f64>,
    pub best_epoch: Option<usize>,
}

pub const LOSS_LOG_HEADER: &str = "epoch,main_bce,prior_bce,total,lr";

pub fn loss_log_line(e: &EpochLog) -> String {
    format!(
        "{},{:.10},{:.10},{:.10},{:e}",
        e.epoch, e.loss.main_bce, e.loss.prior_bce, e.loss.total, e.lr
    )
}

/// Mean per-sample DSC of thresholded predictions.
pub fn mean_dsc(
    model: &M2SFormer,
    params: &ParamStore,
    samples: &[ForgerySample],
    batch: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("no samples to score".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&ForgerySample> = chunk.iter().collect();
        let (images, _) = batch_tensors(&refs)?;
        for ((mask, _, _), s) in model.predict_batch(&images, params)?.iter().zip(chunk) {
            let pred = metrics::binarize(mask.as_tensor(), 0.5)?;
            let target = metrics::BinaryMask::from_tensor(&s.mask)?;
            total += metrics::dsc(&pred, &target)?;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Train `params` in place on `train_set`.
///
/// With `out_dir` set, writes `loss_log.csv`, `final.ckpt` and (when a
/// validation set is given) `best.ckpt`. `observer` sees every epoch and may
/// stop training early.
pub fn train(
    model: &M2SFormer,
    params: &mut ParamStore,
    train_set: &[ForgerySample],
    val_set: &[ForgerySample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    observer: &mut dyn FnMut(&EpochLog, &ParamStore) -> Control,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    model.check_params(params)?;
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("loss_log.csv");
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut rng = seed::component_rng(cfg.seed, "train/shuffle");
    let mut adam = Adam::new(params, cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut main, mut prior, mut weight) = (0.0, 0.0, 0.0);
        let mut lr = cfg.initial_lr;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&ForgerySample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (images, masks) = batch_tensors(&batch)?;
            lr = lr_at(step, total_steps, cfg);
            let l = train_step(
                model,
                params,
                &mut adam,
                &images,
                &masks,
                lr,
                cfg.loss_epsilon,
            )?;
            let n = batch.len() as f64;
            main += l.main_bce * n;
            prior += l.prior_bce * n;
            weight += n;
            step += 1;
        }
        let (main, prior) = (main / weight, prior / weight);
        let val_dsc = if val_set.is_empty() {
            None
        } else {
            Some(mean_dsc(model, params, val_set, cfg.batch_size)?)
        };
        let entry = EpochLog {
            epoch,
            loss: LossBreakdown {
                main_bce: main,
                prior_bce: prior,
                total: main + prior,
            },
            lr,
            val_dsc,
        };
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", loss_log_line(&entry)).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(d) = val_dsc {
            if best.is_none_or(|(b, _)| d > b) {
                best = Some((d, epoch));
                if let Some(dir) = out_dir {
                    checkpoint::save(&dir.join("best.ckpt"), &model.cfg, params)?;
                }
            }
        }
        log.push(entry);
        if observer(&entry, params) == Control::Stop {
            break;
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&dir.join("final.ckpt"), &model.cfg, params)?;
    }
    Ok(TrainOutcome {
        log,
        best_val_dsc: best.map(|b| b.0),
        best_epoch: best.map(|b| b.1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_half() {
        let t = Tensor::ones(&[2, 2]);
        let p = Tensor::full(&[2, 2], 0.5);
        assert!((bce(&t, &p, 1e-7).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce(&t, &Tensor::ones(&[4]), 1e-7).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 100, &cfg), 1e-4);
        assert_eq!(lr_at(100, 100, &cfg), 1e-6);
        assert!((lr_at(50, 100, &cfg) - 5.05e-5).abs() < 1e-18);
    }

    #[test]
    fn total_is_component_sum() {
        let t = Tensor::from_fn(&[64, 64], |i| ((i / 7) % 2) as f64);
        let p = Tensor::full(&[64, 64], 0.3);
        let g = Tensor::full(&[2, 2], 0.5);
        let l = total_loss(&t, &p, &g, 1e-7).unwrap();
        assert_eq!(l.total, l.main_bce + l.prior_bce);
    }
}
