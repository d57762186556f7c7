//! Central finite-difference checks of analytic gradients in `f64`.
//!
//! Non-scalar outputs are reduced with a fixed pseudo-random projection so
//! every output element contributes to the checked scalar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Below this magnitude an element's error is measured absolutely. Some
/// gradients are exactly zero (a key-projection bias under softmax, for
/// one), and there the central difference is pure rounding noise.
pub const ABS_FLOOR: f64 = 1e-6;

pub fn random_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    if g.value(out).numel() == 1 {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ shape.iter().product::<usize>() as u64);
    let r = g.constant(random_tensor(&shape, &mut rng));
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn scalar_of(g: &mut Graph<f64>, out: Var) -> Result<f64> {
    let s = project(g, out)?;
    Ok(g.value(s).data()[0])
}

/// Largest relative error over every element of every input.
pub fn check_leaf_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_leaf_gradients_with(&ParamStore::new(), inputs, f, h)
}

/// [`check_leaf_gradients`] for a function that also reads parameters.
pub fn check_leaf_gradients_with<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let loss = project(&mut g, out)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.wrt(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&mut g, out)
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i][j], numeric));
        }
    }
    Ok(worst)
}

/// Per-parameter worst relative error for a loss built from `store`.
pub fn check_param_gradients<F>(store: &ParamStore<f64>, f: F, h: f64) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let (analytic, ids) = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        let loss = project(&mut g, out)?;
        let grads = g.backward(loss)?;
        let mut scratch = store.clone();
        scratch.zero_grads();
        grads.accumulate_into(&mut scratch);
        let analytic: Vec<Vec<f64>> = scratch
            .iter()
            .map(|(_, p)| p.grad.clone().unwrap_or_else(|| vec![0.0; p.value.numel()]))
            .collect();
        (analytic, store.iter().map(|(id, _)| id).collect::<Vec<_>>())
    };
    let mut work = store.clone();
    let mut report = Vec::new();
    for (pi, &id) in ids.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..store.value(id).numel() {
            let orig = store.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + h;
            let up = {
                let mut g = Graph::with_params(&work);
                let out = f(&mut g)?;
                scalar_of(&mut g, out)?
            };
            work.value_mut(id).data_mut()[j] = orig - h;
            let down = {
                let mut g = Graph::with_params(&work);
                let out = f(&mut g)?;
                scalar_of(&mut g, out)?
            };
            work.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[pi][j], numeric));
        }
        report.push((store.get(id).name.clone(), worst));
    }
    Ok(report)
}

/// The worst entry of a [`check_param_gradients`] report.
pub fn worst(report: &[(String, f64)]) -> (String, f64) {
    report
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, e| if e.1 > acc.1 { e } else { acc })
}
