//! Pre-normalized bidirectional LSTM with a projection back to the model width.

use rand::Rng;

use crate::error::Result;
use crate::nn::{LayerNorm, Linear};
use crate::numerics::{Graph, Init, ParamId, ParamStore, Real, Var};

/// Weights of one LSTM direction, gates ordered i, f, g, o.
#[derive(Clone, Debug)]
pub struct LstmWeights {
    /// `[4H, D]`.
    pub w_ih: ParamId,
    /// `[4H, H]`.
    pub w_hh: ParamId,
    /// `[4H]`; the forget-gate slice starts at 1.
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmWeights {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(&format!("{name}.w_ih"), &[4 * hidden, input], Init::Uniform(bound), rng);
        let w_hh = store.add(&format!("{name}.w_hh"), &[4 * hidden, hidden], Init::Uniform(bound), rng);
        let bias = store.add(&format!("{name}.bias"), &[4 * hidden], Init::Uniform(bound), rng);
        let b = store.value_mut(bias).data_mut();
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
        Self {
            w_ih,
            w_hh,
            bias,
            hidden,
        }
    }

    /// `[B, T, D] -> [B, T, H]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, reverse: bool) -> Result<Var> {
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let bias = g.param(self.bias);
        g.lstm(x, w_ih, w_hh, bias, reverse)
    }
}

/// `LN -> BLSTM -> Linear(2H -> D)`.
#[derive(Clone, Debug)]
pub struct BiLstmModule {
    pub norm: LayerNorm,
    pub forward_dir: LstmWeights,
    pub backward_dir: LstmWeights,
    pub project: Linear,
}

/// Hidden states of both directions, each `[B, T, H]`.
#[derive(Clone, Copy, Debug)]
pub struct BiLstmStates {
    pub forward: Var,
    pub backward: Var,
}

impl BiLstmModule {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            norm: LayerNorm::new(store, rng, &format!("{name}.norm"), dim),
            forward_dir: LstmWeights::new(store, rng, &format!("{name}.fwd"), dim, hidden),
            backward_dir: LstmWeights::new(store, rng, &format!("{name}.bwd"), dim, hidden),
            project: Linear::new(store, rng, &format!("{name}.project"), 2 * hidden, dim, true),
        }
    }

    /// Normalization and recurrence, without the output projection.
    pub fn states<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<BiLstmStates> {
        let xn = self.norm.forward(g, x)?;
        Ok(BiLstmStates {
            forward: self.forward_dir.forward(g, xn, false)?,
            backward: self.backward_dir.forward(g, xn, true)?,
        })
    }

    /// `[B, T, D] -> [B, T, D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = self.states(g, x)?;
        let both = g.concat(&[s.forward, s.backward], 2)?;
        self.project.forward(g, both)
    }
}
