//! Dual-path and triple-path processing over chunked representations.

use rand::Rng;

use crate::blocks::{LayerSpec, LstmAttentionBlock, TransformerLayer};
use crate::error::{Error, Result};
use crate::nn::{residual_norm, LayerNorm};
use crate::numerics::{Graph, ParamStore, Real, Var};

fn check_rank<T: Real>(g: &Graph<T>, x: Var, rank: usize, what: &str) -> Result<Vec<usize>> {
    let s = g.shape(x).to_vec();
    if s.len() != rank {
        return Err(Error::Shape(format!("{what}: expected a rank-{rank} input, got {s:?}")));
    }
    Ok(s)
}

/// Intra-chunk then inter-chunk sequence modeling over `[G, K, S, D]`.
fn intra_inter<T: Real>(
    g: &mut Graph<T>,
    intra: &LstmAttentionBlock,
    inter: &LstmAttentionBlock,
    x: Var,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, k, sc, d) = (s[0], s[1], s[2], s[3]);
    // along K for every chunk
    let a = g.permute(x, &[0, 2, 1, 3])?;
    let a = g.reshape(a, &[n * sc, k, d])?;
    let a = intra.forward(g, a)?;
    let a = g.reshape(a, &[n, sc, k, d])?;
    let a = g.permute(a, &[0, 2, 1, 3])?;
    // along S for every in-chunk position
    let b = g.reshape(a, &[n * k, sc, d])?;
    let b = inter.forward(g, b)?;
    g.reshape(b, &[n, k, sc, d])
}

/// `U' = intra(U)`, `U'' = LN(inter(U') + U)`.
#[derive(Clone, Debug)]
pub struct DualPathBlock {
    pub intra: LstmAttentionBlock,
    pub inter: LstmAttentionBlock,
    pub norm: LayerNorm,
}

impl DualPathBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: &LayerSpec,
    ) -> Result<Self> {
        Ok(Self {
            intra: LstmAttentionBlock::new(store, rng, &format!("{name}.intra"), spec)?,
            inter: LstmAttentionBlock::new(store, rng, &format!("{name}.inter"), spec)?,
            norm: LayerNorm::new(store, rng, &format!("{name}.norm"), spec.dim),
        })
    }

    /// Only the intra-chunk stage, `[G, K, S, D] -> [G, K, S, D]`.
    pub fn intra_only<T: Real>(&self, g: &mut Graph<T>, u: Var) -> Result<Var> {
        let s = check_rank(g, u, 4, "dual-path block")?;
        let (n, k, sc, d) = (s[0], s[1], s[2], s[3]);
        let a = g.permute(u, &[0, 2, 1, 3])?;
        let a = g.reshape(a, &[n * sc, k, d])?;
        let a = self.intra.forward(g, a)?;
        let a = g.reshape(a, &[n, sc, k, d])?;
        g.permute(a, &[0, 2, 1, 3])
    }

    /// `[G, K, S, D] -> [G, K, S, D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, u: Var) -> Result<Var> {
        check_rank(g, u, 4, "dual-path block")?;
        let h = intra_inter(g, &self.intra, &self.inter, u)?;
        residual_norm(g, &self.norm, u, h)
    }
}

/// Dual-path processing followed by a transformer across speakers, with a
/// single residual from the block input: `V_n = LN(speaker(inter(intra(V))) + V)`.
#[derive(Clone, Debug)]
pub struct TriplePathBlock {
    pub intra: LstmAttentionBlock,
    pub inter: LstmAttentionBlock,
    pub speaker: TransformerLayer,
    pub norm: LayerNorm,
}

impl TriplePathBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: &LayerSpec,
    ) -> Result<Self> {
        Ok(Self {
            intra: LstmAttentionBlock::new(store, rng, &format!("{name}.intra"), spec)?,
            inter: LstmAttentionBlock::new(store, rng, &format!("{name}.inter"), spec)?,
            speaker: TransformerLayer::new(
                store,
                rng,
                &format!("{name}.speaker"),
                spec.dim,
                spec.heads,
                spec.ffn_expansion,
            )?,
            norm: LayerNorm::new(store, rng, &format!("{name}.norm"), spec.dim),
        })
    }

    /// `[B, C, K, S, D] -> [B, C, K, S, D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, v: Var) -> Result<Var> {
        let s = check_rank(g, v, 5, "triple-path block")?;
        let (b, c, k, sc, d) = (s[0], s[1], s[2], s[3], s[4]);
        let x = g.reshape(v, &[b * c, k, sc, d])?;
        let x = intra_inter(g, &self.intra, &self.inter, x)?;
        // across speakers for every (k, s)
        let x = g.reshape(x, &[b, c, k, sc, d])?;
        let x = g.permute(x, &[0, 2, 3, 1, 4])?;
        let x = g.reshape(x, &[b * k * sc, c, d])?;
        let x = self.speaker.forward(g, x)?;
        let x = g.reshape(x, &[b, k, sc, c, d])?;
        let x = g.permute(x, &[0, 3, 1, 2, 4])?;
        residual_norm(g, &self.norm, v, x)
    }
}
