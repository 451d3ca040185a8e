#![allow(dead_code)]

use m2sformer::autograd::{Graph, Var};
use m2sformer::nn::{Bound, ParamStore};
use m2sformer::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Jitter every entry of the store so no weight sits at a special value.
pub fn jitter(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut r = rng(seed);
    for i in 0..store.len() {
        if !store.entries()[i].trainable {
            continue;
        }
        for v in store.value_mut(i).data_mut() {
            *v += r.gen_range(-scale..scale);
        }
    }
}

pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

/// Central differences against reverse-mode gradients for the given
/// `(entry, element)` coordinates.
pub fn check_gradients(
    store: &ParamStore,
    coords: &[(usize, usize)],
    step: f64,
    floor: f64,
    loss: &dyn for<'g> Fn(&Bound<'g>) -> Var<'g>,
) -> Vec<GradCheck> {
    let g = Graph::new();
    let p = Bound::new(&g, store);
    let l = loss(&p);
    let grads = p.gradients(&g.backward(l).unwrap());
    let eval = |s: &ParamStore| {
        let g = Graph::inference();
        let p = Bound::new(&g, s);
        loss(&p).value().item()
    };
    coords
        .iter()
        .map(|&(i, j)| {
            let analytic = grads[i].as_ref().map_or(0.0, |t| t.data()[j]);
            let mut s = store.clone();
            let base = s.entries()[i].value.data()[j];
            s.value_mut(i).data_mut()[j] = base + step;
            let up = eval(&s);
            s.value_mut(i).data_mut()[j] = base - step;
            let down = eval(&s);
            let numeric = (up - down) / (2.0 * step);
            GradCheck {
                name: store.entries()[i].name.clone(),
                index: j,
                analytic,
                numeric,
                rel: rel_err(analytic, numeric, floor),
            }
        })
        .collect()
}

/// Pins a closure to the higher-ranked signature `check_gradients` expects.
pub fn objective<F>(f: F) -> F
where
    F: for<'g> Fn(&Bound<'g>) -> Var<'g>,
{
    f
}
