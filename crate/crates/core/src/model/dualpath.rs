//! Dual-path-only separator without attractors, for ablation size comparisons.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::DualPathBlock;
use crate::error::{Error, Result};
use crate::model::config::{Architecture, ModelConfig};
use crate::model::septda::layer_spec;
use crate::nn::{LayerNorm, Linear};
use crate::numerics::{Graph, ParamStore, Real, Var};
use crate::signal::{num_frames, ChunkGeometry, Decoder, Encoder};

/// `dual_blocks` dual-path blocks, a linear split into `max_speakers`
/// streams, then the same output head as the attractor model.
#[derive(Clone, Debug)]
pub struct DualPathSeparator {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub bottleneck: Linear,
    pub blocks: Vec<DualPathBlock>,
    pub split: Linear,
    pub head_norm: LayerNorm,
    pub head: Linear,
    pub decoder: Decoder,
}

impl DualPathSeparator {
    pub fn new<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        if config.architecture != Architecture::DualPath {
            return Err(Error::Config(format!(
                "architecture `{}` cannot be built as a dual-path separator",
                config.architecture.as_str()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let r = &mut rng;
        let c = config;
        let spec = layer_spec(c);
        let d = c.model_dim;
        let model = Self {
            config: c.clone(),
            encoder: Encoder::new(&mut s, r, "encoder", c.kernel_size, c.encoder_dim)?,
            bottleneck: Linear::new(&mut s, r, "bottleneck", c.encoder_dim, d, true),
            blocks: (0..c.dual_blocks)
                .map(|i| DualPathBlock::new(&mut s, r, &format!("dual.{i}"), &spec))
                .collect::<Result<_>>()?,
            split: Linear::new(&mut s, r, "split", d, c.max_speakers * d, true),
            head_norm: LayerNorm::new(&mut s, r, "head.norm", d),
            head: Linear::new(&mut s, r, "head.linear", d, c.encoder_dim, true),
            decoder: Decoder::new(&mut s, r, "decoder", c.kernel_size, c.encoder_dim)?,
        };
        Ok((model, s))
    }

    /// `[B, T] -> [B, C_max, T]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, mixtures: Var) -> Result<Var> {
        let s = g.shape(mixtures).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::Shape(format!("mixtures must be [B, T] with T > 0, got {s:?}")));
        }
        let (b, t) = (s[0], s[1]);
        let (c, d) = (self.config.max_speakers, self.config.model_dim);
        let geometry = ChunkGeometry::new(num_frames(t, self.config.kernel_size), self.config.chunk_size)?;
        let e = self.encoder.forward(g, mixtures)?;
        let e = self.bottleneck.forward(g, e)?;
        let mut u = geometry.segment(g, e)?;
        for block in &self.blocks {
            u = block.forward(g, u)?;
        }
        let (k, sc) = (geometry.chunk, geometry.num_chunks);
        let x = self.split.forward(g, u)?;
        let x = g.reshape(x, &[b, k, sc, c, d])?;
        let x = g.permute(x, &[0, 3, 1, 2, 4])?;
        let x = g.reshape(x, &[b * c, k, sc, d])?;
        let x = geometry.overlap_add(g, x)?;
        let x = self.head_norm.forward(g, x)?;
        let z = self.head.forward(g, x)?;
        let y = self.decoder.forward(g, z, t)?;
        g.reshape(y, &[b, c, t])
    }
}
