//! Attractors from learned speaker queries, speaker counting and FiLM.
//!
//! A stack of transformer decoder layers turns the first `C + 1` rows of a
//! learned query matrix into attractors by cross-attending over the mixture
//! context. Self-attention between queries is causal, so attractor `i` never
//! sees queries after `i`. The last attractor of the `C + 1` is trained to
//! signal that no further speaker exists.

use rand::Rng;

use crate::blocks::{causal_mask, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::nn::{residual_norm, FeedForward, LayerNorm, Linear};
use crate::numerics::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

/// One decoder layer: (masked self-attention) → cross-attention → FFN, each
/// followed by `LN(x + module(x))`.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attention: Option<(MultiHeadAttention, LayerNorm)>,
    pub cross_attention: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl DecoderLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_expansion: usize,
        with_self_attention: bool,
    ) -> Result<Self> {
        let self_attention = if with_self_attention {
            Some((
                MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), dim, heads)?,
                LayerNorm::new(store, rng, &format!("{name}.self_norm"), dim),
            ))
        } else {
            None
        };
        Ok(Self {
            self_attention,
            cross_attention: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), dim, heads)?,
            cross_norm: LayerNorm::new(store, rng, &format!("{name}.cross_norm"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_expansion),
            ffn_norm: LayerNorm::new(store, rng, &format!("{name}.ffn_norm"), dim),
        })
    }

    /// `queries: [B, Q, D]`, `context: [B, T', D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, queries: Var, context: Var) -> Result<Var> {
        let mut x = queries;
        if let Some((attn, norm)) = &self.self_attention {
            let mask = causal_mask(g.shape(x)[1]);
            let a = attn.forward(g, x, x, None, Some(&mask))?;
            x = residual_norm(g, norm, x, a.output)?;
        }
        let a = self.cross_attention.forward(g, x, context, None, None)?;
        x = residual_norm(g, &self.cross_norm, x, a.output)?;
        let f = self.ffn.forward(g, x)?;
        residual_norm(g, &self.ffn_norm, x, f)
    }
}

/// Query matrix, decoder stack and existence head.
#[derive(Clone, Debug)]
pub struct Tda {
    /// `[C_max + 1, D]`; a `C`-speaker pass uses the first `C + 1` rows.
    pub queries: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub existence: Linear,
    pub max_speakers: usize,
    pub dim: usize,
}

/// Graph handles for the attractors `[B, C + 1, D]` and existence logits `[B, C + 1]`.
#[derive(Clone, Copy, Debug)]
pub struct AttractorVars {
    pub attractors: Var,
    pub logits: Var,
}

/// Attractors of a single mixture with their existence estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AttractorSet {
    /// `[C + 1, D]`.
    pub attractors: Tensor<f64>,
    pub existence_logits: Vec<f64>,
    pub existence_probs: Vec<f64>,
}

impl Tda {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_expansion: usize,
        num_layers: usize,
        max_speakers: usize,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config("the attractor decoder needs at least one layer".into()));
        }
        if max_speakers == 0 {
            return Err(Error::Config("maximum speaker count must be at least 1".into()));
        }
        let queries = store.add(&format!("{name}.queries"), &[max_speakers + 1, dim], Init::Normal(0.02), rng);
        let layers = (0..num_layers)
            .map(|m| DecoderLayer::new(store, rng, &format!("{name}.layer.{m}"), dim, heads, ffn_expansion, m > 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            queries,
            layers,
            existence: Linear::new(store, rng, &format!("{name}.existence"), dim, 1, true),
            max_speakers,
            dim,
        })
    }

    /// Runs the decoder over `context: [B, T', D]` with `speakers + 1` queries.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, context: Var, speakers: usize) -> Result<AttractorVars> {
        if speakers > self.max_speakers {
            return Err(Error::TooManySpeakers {
                requested: speakers,
                max: self.max_speakers,
            });
        }
        if speakers == 0 {
            return Err(Error::Config("attractor decoding needs at least one speaker".into()));
        }
        let cs = g.shape(context).to_vec();
        if cs.len() != 3 || cs[2] != self.dim {
            return Err(Error::Shape(format!("context must be [B, T', {}], got {cs:?}", self.dim)));
        }
        let b = cs[0];
        let rows: Vec<usize> = (0..=speakers).collect();
        let table = g.param(self.queries);
        let q = g.gather_rows(table, &rows)?;
        let q = g.reshape(q, &[1, speakers + 1, self.dim])?;
        let mut x = if b == 1 { q } else { g.concat(&vec![q; b], 0)? };
        for layer in &self.layers {
            x = layer.forward(g, x, context)?;
        }
        let logits = self.existence.forward(g, x)?;
        let logits = g.reshape(logits, &[b, speakers + 1])?;
        Ok(AttractorVars { attractors: x, logits })
    }

    /// Inference on a single `[T', D]` context.
    pub fn attractors<T: Real>(&self, params: &ParamStore<T>, context: &Tensor<T>, speakers: usize) -> Result<AttractorSet> {
        let mut g = Graph::inference(params);
        let c = g.constant(context.clone());
        let s = context.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("context must be [T', D], got {s:?}")));
        }
        let c = g.reshape(c, &[1, s[0], s[1]])?;
        let out = self.forward(&mut g, c, speakers)?;
        let a = g.value(out.attractors);
        let logits = g.value(out.logits).to_f64_vec();
        Ok(AttractorSet {
            attractors: Tensor::new(vec![speakers + 1, self.dim], a.to_f64_vec())?,
            existence_probs: logits.iter().map(|&l| crate::numerics::kernels::sigmoid_scalar(l)).collect(),
            existence_logits: logits,
        })
    }
}

/// Length of the leading run of probabilities above 0.5, capped at `max_speakers`.
pub fn count_speakers(probs: &[f64], max_speakers: usize) -> usize {
    probs.iter().take_while(|&&p| p > 0.5).count().min(max_speakers)
}

/// Feature-wise modulation `scale(a_c) ⊙ U + shift(a_c)` for each attractor.
#[derive(Clone, Debug)]
pub struct Film {
    pub scale: Linear,
    pub shift: Linear,
}

impl Film {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize) -> Self {
        Self {
            scale: Linear::new(store, rng, &format!("{name}.scale"), dim, dim, true),
            shift: Linear::new(store, rng, &format!("{name}.shift"), dim, dim, true),
        }
    }

    /// `u: [B, K, S, D]`, `attractors: [B, C, D]` → `[B, C, K, S, D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, u: Var, attractors: Var) -> Result<Var> {
        let us = g.shape(u).to_vec();
        let a_s = g.shape(attractors).to_vec();
        if us.len() != 4 || a_s.len() != 3 || us[0] != a_s[0] || us[3] != a_s[2] {
            return Err(Error::Shape(format!("FiLM: features {us:?} and attractors {a_s:?} disagree")));
        }
        let (b, c, d) = (a_s[0], a_s[1], a_s[2]);
        let scale = self.scale.forward(g, attractors)?;
        let scale = g.reshape(scale, &[b, c, 1, 1, d])?;
        let shift = self.shift.forward(g, attractors)?;
        let shift = g.reshape(shift, &[b, c, 1, 1, d])?;
        let u5 = g.reshape(u, &[b, 1, us[1], us[2], d])?;
        let v = g.mul(scale, u5)?;
        g.add(v, shift)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy between `sigmoid(logits)` and `[1, ..., 1, 0]`
/// per row of `[B, C + 1]` logits.
pub fn existence_loss<T: Real>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::Shape(format!("existence logits must be [B, C + 1] with C >= 1, got {s:?}")));
    }
    let width = s[1];
    let n = g.value(logits).numel() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(width * s[0]);
    for (i, &l) in g.value(logits).data().iter().enumerate() {
        let x = l.to_f64_lossy();
        let target = if i % width == width - 1 { 0.0 } else { 1.0 };
        // BCE with logits: softplus(x) - t x
        value += softplus(x) - target * x;
        grad.push(T::c((crate::numerics::kernels::sigmoid_scalar(x) - target) / n));
    }
    g.scalar_fn(logits, T::c(value / n), grad)
}
