//! Parameterized layers shared by every module.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, Init, ParamId, ParamStore, Real, Var};

/// Fully connected layer `y = x W^T + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(in)`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = store.add(&format!("{name}.weight"), &[out_features, in_features], Init::Uniform(bound), rng);
        let bias = bias.then(|| store.add(&format!("{name}.bias"), &[out_features], Init::Uniform(bound), rng));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

/// Affine layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), &[dim], Init::Ones, rng),
            beta: store.add(&format!("{name}.beta"), &[dim], Init::Zeros, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Position-wise `D -> eD -> GELU -> D`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub expand: Linear,
    pub project: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        expansion: usize,
    ) -> Self {
        Self {
            expand: Linear::new(store, rng, &format!("{name}.expand"), dim, dim * expansion, true),
            project: Linear::new(store, rng, &format!("{name}.project"), dim * expansion, dim, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.expand.forward(g, x)?;
        let h = g.gelu(h);
        self.project.forward(g, h)
    }
}

/// `LN(x + sublayer)`.
pub(crate) fn residual_norm<T: Real>(g: &mut Graph<T>, norm: &LayerNorm, x: Var, sub: Var) -> Result<Var> {
    let s = g.add(x, sub)?;
    norm.forward(g, s)
}
