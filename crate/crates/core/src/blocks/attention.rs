//! Multi-head attention with an optional T5 relative-position bias.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

/// Bidirectional T5 bucketing of a relative offset `rel = key - query`.
///
/// Half of the buckets hold non-positive offsets, the other half positive
/// ones. Within each half, offsets below `num_buckets / 4` get their own
/// bucket and larger offsets share logarithmically wider buckets up to
/// `max_distance`, past which everything lands in the last bucket.
pub fn relative_position_bucket(rel: i64, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let mut bucket = if rel > 0 { half } else { 0 };
    let n = rel.unsigned_abs() as usize;
    let max_exact = half / 2;
    if n < max_exact {
        bucket += n;
    } else {
        let ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
        let large = max_exact + (ratio * (half - max_exact) as f64) as usize;
        bucket += large.min(half - 1);
    }
    bucket
}

/// Per-head learned bias indexed by relative-position bucket.
#[derive(Clone, Debug)]
pub struct RelativePositionBias {
    /// `[num_buckets, heads]`.
    pub table: ParamId,
    pub num_buckets: usize,
    pub max_distance: usize,
    pub heads: usize,
}

impl RelativePositionBias {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        num_buckets: usize,
        max_distance: usize,
        heads: usize,
    ) -> Result<Self> {
        if num_buckets < 4 || num_buckets % 2 != 0 {
            return Err(Error::Config(format!(
                "relative position buckets must be even and at least 4, got {num_buckets}"
            )));
        }
        if max_distance <= num_buckets / 4 {
            return Err(Error::Config(format!(
                "max distance {max_distance} must exceed the exact range {}",
                num_buckets / 4
            )));
        }
        Ok(Self {
            table: store.add(&format!("{name}.table"), &[num_buckets, heads], Init::Normal(0.02), rng),
            num_buckets,
            max_distance,
            heads,
        })
    }

    /// Bucket index for every `(query, key)` pair, row-major `[len, len]`.
    pub fn buckets(&self, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(len * len);
        for i in 0..len {
            for j in 0..len {
                out.push(relative_position_bucket(j as i64 - i as i64, self.num_buckets, self.max_distance));
            }
        }
        out
    }

    /// `[heads, len, len]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, len: usize) -> Result<Var> {
        let table = g.param(self.table);
        let rows = g.gather_rows(table, &self.buckets(len))?;
        let rows = g.reshape(rows, &[len, len, self.heads])?;
        g.permute(rows, &[2, 0, 1])
    }
}

/// Additive attention mask: `0` where allowed, `-inf` where blocked.
pub fn causal_mask<T: Real>(len: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = T::neg_infinity();
        }
    }
    Tensor::from_parts_unchecked(vec![len, len], data)
}

/// Scaled dot-product attention over `heads` heads with separate query,
/// key, value and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention output `[B, Lq, D]` and the weights `[B * heads, Lq, Lk]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("model dimension {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim, true),
            // A key bias only shifts every logit of a query row equally, which
            // softmax ignores, so it would be a parameter with zero gradient.
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim, false),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim, true),
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim, true),
            heads,
            dim,
        })
    }

    /// `[B, L, D] -> [B * heads, L, D / heads]`.
    fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, l) = (s[0], s[1]);
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[b, l, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * self.heads, l, dh])
    }

    /// Attends from `query: [B, Lq, D]` over `context: [B, Lk, D]`.
    ///
    /// `bias` is `[heads, Lq, Lk]` and is shared by the batch; `mask` is an
    /// additive `[Lq, Lk]` tensor.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        query: Var,
        context: Var,
        bias: Option<Var>,
        mask: Option<&Tensor<T>>,
    ) -> Result<AttentionOutput> {
        let qs = g.shape(query).to_vec();
        let ks = g.shape(context).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.dim || ks[2] != self.dim {
            return Err(Error::Shape(format!(
                "attention expects [B, L, {}] inputs, got {qs:?} and {ks:?}",
                self.dim
            )));
        }
        let (b, lq, lk) = (qs[0], qs[1], ks[1]);
        if let Some(m) = mask {
            if m.shape() != [lq, lk] {
                return Err(Error::Shape(format!("attention mask {:?} does not match [{lq}, {lk}]", m.shape())));
            }
            if m.data().chunks(lk).any(|row| row.iter().all(|v| v.is_infinite())) {
                return Err(Error::Shape("attention mask blocks every key for some query".into()));
            }
        }
        if let Some(bv) = bias {
            if g.shape(bv) != [self.heads, lq, lk] {
                return Err(Error::Shape(format!(
                    "attention bias {:?} does not match [{}, {lq}, {lk}]",
                    g.shape(bv),
                    self.heads
                )));
            }
        }
        let q = self.query.forward(g, query)?;
        let k = self.key.forward(g, context)?;
        let v = self.value.forward(g, context)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;

        let dh = self.dim / self.heads;
        let logits = g.bmm(q, k, false, true)?;
        let mut logits = g.scale(logits, T::c(1.0 / (dh as f64).sqrt()));
        if let Some(bv) = bias {
            let l4 = g.reshape(logits, &[b, self.heads, lq, lk])?;
            let l4 = g.add(l4, bv)?;
            logits = g.reshape(l4, &[b * self.heads, lq, lk])?;
        }
        if let Some(m) = mask {
            let mv = g.constant(m.clone());
            logits = g.add(logits, mv)?;
        }
        let weights = g.softmax(logits);
        let ctx = g.bmm(weights, v, false, false)?;
        let ctx = g.reshape(ctx, &[b, self.heads, lq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, lq, self.dim])?;
        let output = self.output.forward(g, ctx)?;
        Ok(AttentionOutput { output, weights })
    }
}
