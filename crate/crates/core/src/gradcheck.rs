//! Central finite-difference checks for graph-built scalar functions.

use crate::graph::{Graph, Var};
use crate::nn::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Evaluate `build` on `x` and return the scalar loss.
pub fn eval(build: &dyn Fn(&mut Graph, Var) -> Var, x: &Tensor) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let loss = build(&mut g, v);
    g.scalar_f64(loss)
}

/// Analytic input gradient of the scalar produced by `build`.
pub fn analytic(build: &dyn Fn(&mut Graph, Var) -> Var, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.input_with_grad(x.clone());
    let loss = build(&mut g, v);
    g.backward(loss)
        .of(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()))
}

/// Compare analytic and central-difference gradients on `samples` random
/// coordinates; returns the worst `|a − n| / max(|a|, |n|, floor)`.
pub fn max_rel_error(
    build: &dyn Fn(&mut Graph, Var) -> Var,
    x: &Tensor,
    h: f32,
    samples: usize,
    floor: f64,
    rng: &mut Rng,
) -> f64 {
    let ga = analytic(build, x);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let i = rng.below(x.numel());
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let num = (eval(build, &xp) - eval(build, &xm)) / (2.0 * h as f64);
        let a = ga.data()[i] as f64;
        let err = (a - num).abs() / a.abs().max(num.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

pub fn random_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    rng.fill_uniform(t.data_mut(), lo, hi);
    t
}

/// Relative errors between analytic and central-difference gradients of the
/// scalar built by `build` with respect to parameters of `store`.
///
/// Coordinates are sampled among those whose analytic gradient magnitude is
/// at least `min_grad`, so the comparison is not dominated by round-off.
pub fn param_rel_errors(
    build: &dyn Fn(&mut Graph, &ParamStore) -> Var,
    store: &ParamStore,
    h: f32,
    samples: usize,
    min_grad: f64,
    rng: &mut Rng,
) -> Vec<f64> {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss).for_store(store.id(), store.len());
    let mut candidates = Vec::new();
    for (t, gt) in grads.iter().enumerate() {
        if let Some(gt) = gt {
            for (k, v) in gt.data().iter().enumerate() {
                if (*v as f64).abs() >= min_grad {
                    candidates.push((t, k, *v as f64));
                }
            }
        }
    }
    let value = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = build(&mut g, s);
        g.scalar_f64(l)
    };
    let mut errors = Vec::with_capacity(samples);
    for _ in 0..samples.min(candidates.len()) {
        let (t, k, a) = candidates[rng.below(candidates.len())];
        let mut plus = store.clone();
        plus.tensor_at_mut(t).data_mut()[k] += h;
        let mut minus = store.clone();
        minus.tensor_at_mut(t).data_mut()[k] -= h;
        let num = (value(&plus) - value(&minus)) / (2.0 * h as f64);
        errors.push((a - num).abs() / a.abs().max(num.abs()));
    }
    errors
}
