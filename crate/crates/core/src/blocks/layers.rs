//! Sequence layers: the LSTM-attention block and a plain transformer layer.

use rand::Rng;

use crate::blocks::{BiLstmModule, MultiHeadAttention, RelativePositionBias};
use crate::error::{Error, Result};
use crate::nn::{residual_norm, FeedForward, LayerNorm};
use crate::numerics::{Graph, ParamStore, Real, Var};

/// Shape hyperparameters shared by the sequence layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub dim: usize,
    pub heads: usize,
    pub lstm_hidden: usize,
    pub ffn_expansion: usize,
    pub buckets: usize,
    pub max_distance: usize,
    pub use_lstm: bool,
    pub use_attention: bool,
}

/// LSTM module, self-attention with relative-position bias, then a
/// feed-forward module; every module is followed by `LN(x + module(x))`.
///
/// Either of the first two modules can be dropped for ablations.
#[derive(Clone, Debug)]
pub struct LstmAttentionBlock {
    pub lstm: Option<(BiLstmModule, LayerNorm)>,
    pub attention: Option<(MultiHeadAttention, RelativePositionBias, LayerNorm)>,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl LstmAttentionBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: &LayerSpec,
    ) -> Result<Self> {
        let d = spec.dim;
        let lstm = spec.use_lstm.then(|| {
            (
                BiLstmModule::new(store, rng, &format!("{name}.lstm"), d, spec.lstm_hidden),
                LayerNorm::new(store, rng, &format!("{name}.lstm_norm"), d),
            )
        });
        let attention = if spec.use_attention {
            Some((
                MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, spec.heads)?,
                RelativePositionBias::new(
                    store,
                    rng,
                    &format!("{name}.attn.rel"),
                    spec.buckets,
                    spec.max_distance,
                    spec.heads,
                )?,
                LayerNorm::new(store, rng, &format!("{name}.attn_norm"), d),
            ))
        } else {
            None
        };
        Ok(Self {
            lstm,
            attention,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, spec.ffn_expansion),
            ffn_norm: LayerNorm::new(store, rng, &format!("{name}.ffn_norm"), d),
        })
    }

    /// `[B, L, D] -> [B, L, D]`, each of the `B` sequences independently.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut y = x;
        if let Some((lstm, norm)) = &self.lstm {
            let h = lstm.forward(g, y)?;
            y = residual_norm(g, norm, y, h)?;
        }
        if let Some((attn, rel, norm)) = &self.attention {
            let len = g.shape(y)[1];
            let bias = rel.forward(g, len)?;
            let a = attn.forward(g, y, y, Some(bias), None)?;
            y = residual_norm(g, norm, y, a.output)?;
        }
        let f = self.ffn.forward(g, y)?;
        residual_norm(g, &self.ffn_norm, y, f)
    }
}

/// Self-attention and feed-forward with post-norm residuals and no
/// positional information, so it treats its sequence as an unordered set.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl TransformerLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_expansion: usize,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            attn_norm: LayerNorm::new(store, rng, &format!("{name}.attn_norm"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_expansion),
            ffn_norm: LayerNorm::new(store, rng, &format!("{name}.ffn_norm"), dim),
        })
    }

    /// `[B, C, D] -> [B, C, D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if g.shape(x).len() != 3 {
            return Err(Error::Shape(format!("transformer layer expects [B, C, D], got {:?}", g.shape(x))));
        }
        let a = self.attention.forward(g, x, x, None, None)?;
        let y = residual_norm(g, &self.attn_norm, x, a.output)?;
        let f = self.ffn.forward(g, y)?;
        residual_norm(g, &self.ffn_norm, y, f)
    }
}
