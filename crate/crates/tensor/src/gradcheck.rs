//! Central finite-difference checks of recorded backward passes.
//!
//! The operator output is reduced to a scalar by a fixed pseudo-random
//! weighted sum. A plain sum would make e.g. softmax outputs insensitive to
//! every input and turn the check into noise-vs-noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

const REDUCTION_SEED: u64 = 0x6772_6164;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_err: f64,
    /// `(input index, element index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn observe(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((input, elem, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn reduction_weights(shape: crate::Shape) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(REDUCTION_SEED);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// Checks the gradient of `build` with respect to every input marked in `wrt`.
pub fn finite_diff_check<F>(inputs: &[Tensor], wrt: &[bool], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], weights: Option<&Tensor>| -> Result<(f64, Tensor)> {
        let mut g = Graph::without_params();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let value = g.value(out).clone();
        let loss = match weights {
            Some(w) => value.dot(w)?,
            None => 0.0,
        };
        Ok((loss, value))
    };

    // Analytic pass.
    let (weights, analytic) = {
        let mut g = Graph::without_params();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(wrt)
            .map(|(t, &w)| if w { g.input_with_grad(t.clone()) } else { g.input(t.clone()) })
            .collect();
        let out = build(&mut g, &vars)?;
        let weights = reduction_weights(g.shape(out));
        let grads = g.backward(out, weights.clone())?;
        let analytic: Vec<Option<Tensor>> = vars
            .iter()
            .zip(inputs)
            .zip(wrt)
            .map(|((v, t), &w)| w.then(|| grads.leaf(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))))
            .collect();
        (weights, analytic)
    };

    let mut report = GradCheckReport::default();
    let mut vals = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let Some(a) = a else { continue };
        for e in 0..vals[i].numel() {
            let orig = vals[i].data()[e];
            vals[i].data_mut()[e] = orig + eps;
            let (plus, _) = eval(&vals, Some(&weights))?;
            vals[i].data_mut()[e] = orig - eps;
            let (minus, _) = eval(&vals, Some(&weights))?;
            vals[i].data_mut()[e] = orig;
            report.observe(i, e, a.data()[e], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar-valued `build` with respect to the
/// trainable parameters of `store`, optionally restricted to `ids`.
pub fn finite_diff_check_params<F>(
    store: &mut ParamStore,
    ids: Option<&[ParamId]>,
    eps: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = build(&mut g)?;
        Ok(g.value(out).sum())
    };
    let grads = {
        let mut g = Graph::new(store);
        let out = build(&mut g)?;
        let seed = Tensor::full(g.shape(out), 1.0);
        g.backward(out, seed)?
    };
    let targets: Vec<ParamId> = match ids {
        Some(ids) => ids.to_vec(),
        None => store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect(),
    };
    let mut report = GradCheckReport::default();
    for id in targets {
        let n = store.get(id).value.numel();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape()));
        for e in 0..n {
            let orig = store.get(id).value.data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[e] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[e] = orig;
            report.observe(id.index(), e, analytic.data()[e], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Directional variant of [`finite_diff_check_params`]: for every trainable
/// parameter tensor, compares `⟨∇L, d⟩` against the central difference along
/// `directions` random unit-box directions `d`. Suited to deep graphs where
/// single coordinates can have gradients below the finite-difference noise.
pub fn directional_check_params<F>(store: &mut ParamStore, directions: usize, eps: f64, seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = build(&mut g)?;
        Ok(g.value(out).sum())
    };
    let grads = {
        let mut g = Graph::new(store);
        let out = build(&mut g)?;
        let seed = Tensor::full(g.shape(out), 1.0);
        g.backward(out, seed)?
    };
    let targets: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for id in targets {
        let shape = store.get(id).value.shape();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(shape));
        let orig = store.get(id).value.clone();
        for k in 0..directions {
            let d = Tensor::uniform(shape, -1.0, 1.0, &mut rng);
            let step = |sign: f64| orig.zip_map(&d, |p, dd| p + sign * eps * dd);
            store.get_mut(id).value = step(1.0)?;
            let plus = eval(store)?;
            store.get_mut(id).value = step(-1.0)?;
            let minus = eval(store)?;
            store.get_mut(id).value = orig.clone();
            report.observe(id.index(), k, analytic.dot(&d)?, (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}
