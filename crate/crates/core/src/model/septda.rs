//! The full separator: encoder, dual-path front end, attractors, triple-path
//! stack and the shared output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{DualPathBlock, LayerSpec, TriplePathBlock};
use crate::error::{Error, Result};
use crate::model::config::{Architecture, ModelConfig};
use crate::nn::{LayerNorm, Linear};
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};
use crate::signal::{num_frames, AudioSignal, ChunkGeometry, Decoder, Encoder};
use crate::tda::{count_speakers, Film, Tda};

/// Speaker count requested at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Speakers {
    Known(usize),
    Auto,
}

impl std::str::FromStr for Speakers {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Speakers::Auto);
        }
        s.parse::<usize>()
            .map(Speakers::Known)
            .map_err(|_| Error::Config(format!("speaker count must be a number or `auto`, got `{s}`")))
    }
}

/// Output of [`SepTda::separate`].
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationResult {
    /// One waveform per separated speaker, each as long as the input.
    pub estimates: Vec<AudioSignal>,
    /// Existence probabilities of all `C_max + 1` queries.
    pub probs: Vec<f64>,
    /// Speaker count implied by `probs`.
    pub estimated_count: usize,
    /// Estimates of every triple-path scale, last one equal to `estimates`.
    /// Empty unless requested.
    pub per_scale: Vec<Vec<AudioSignal>>,
}

/// Dual-path output and the mixture context, shared by every speaker count.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    /// `[B, K, S, D]`.
    pub features: Var,
    /// `[B, T', D]`.
    pub context: Var,
    pub geometry: ChunkGeometry,
    pub samples: usize,
}

/// Training-mode outputs.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `N` tensors of `[B, C, T]`, one per triple-path block.
    pub per_scale: Vec<Var>,
    /// `[B, C + 1]`.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct SepTda {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub bottleneck: Linear,
    pub dual: Vec<DualPathBlock>,
    pub tda: Tda,
    pub film: Film,
    pub triple: Vec<TriplePathBlock>,
    pub head_norm: LayerNorm,
    pub head: Linear,
    pub decoder: Decoder,
}

pub(crate) fn layer_spec(config: &ModelConfig) -> LayerSpec {
    LayerSpec {
        dim: config.model_dim,
        heads: config.heads,
        lstm_hidden: config.lstm_hidden,
        ffn_expansion: config.ffn_expansion,
        buckets: config.t5_buckets,
        max_distance: config.t5_max_distance,
        use_lstm: config.use_lstm,
        use_attention: config.use_attention,
    }
}

pub(crate) fn mixture_tensor<T: Real>(audio: &AudioSignal, sample_rate: u32) -> Result<Tensor<T>> {
    if audio.sample_rate != sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: sample_rate,
            actual: audio.sample_rate,
        });
    }
    if audio.samples.is_empty() {
        return Err(Error::Shape("cannot separate an empty signal".into()));
    }
    Tensor::new(vec![1, audio.len()], audio.samples.iter().map(|&v| T::c(v as f64)).collect())
}

pub(crate) fn to_signals<T: Real>(t: &Tensor<T>, sample_rate: u32) -> Result<Vec<AudioSignal>> {
    let len = *t.shape().last().unwrap();
    t.data()
        .chunks(len)
        .map(|row| AudioSignal::new(row.iter().map(|v| v.to_f64_lossy() as f32).collect(), sample_rate))
        .collect()
}

impl SepTda {
    /// Builds the model and a freshly initialized parameter store.
    pub fn new<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        if config.architecture != Architecture::SepTda {
            return Err(Error::Config(format!(
                "architecture `{}` cannot be built as the attractor model",
                config.architecture.as_str()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let r = &mut rng;
        let c = config;
        let spec = layer_spec(c);
        let model = Self {
            config: c.clone(),
            encoder: Encoder::new(&mut s, r, "encoder", c.kernel_size, c.encoder_dim)?,
            bottleneck: Linear::new(&mut s, r, "bottleneck", c.encoder_dim, c.model_dim, true),
            dual: (0..c.dual_blocks)
                .map(|i| DualPathBlock::new(&mut s, r, &format!("dual.{i}"), &spec))
                .collect::<Result<_>>()?,
            tda: Tda::new(&mut s, r, "tda", c.model_dim, c.heads, c.ffn_expansion, c.tda_layers, c.max_speakers)?,
            film: Film::new(&mut s, r, "film", c.model_dim),
            triple: (0..c.triple_blocks)
                .map(|i| TriplePathBlock::new(&mut s, r, &format!("triple.{i}"), &spec))
                .collect::<Result<_>>()?,
            head_norm: LayerNorm::new(&mut s, r, "head.norm", c.model_dim),
            head: Linear::new(&mut s, r, "head.linear", c.model_dim, c.encoder_dim, true),
            decoder: Decoder::new(&mut s, r, "decoder", c.kernel_size, c.encoder_dim)?,
        };
        Ok((model, s))
    }

    /// Encoder through the dual-path blocks; `mixtures: [B, T]`.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, mixtures: Var) -> Result<Embedding> {
        let s = g.shape(mixtures).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::Shape(format!("mixtures must be [B, T] with T > 0, got {s:?}")));
        }
        let samples = s[1];
        let frames = num_frames(samples, self.config.kernel_size);
        let geometry = ChunkGeometry::new(frames, self.config.chunk_size)?;
        let e = self.encoder.forward(g, mixtures)?;
        let e = self.bottleneck.forward(g, e)?;
        let mut u = geometry.segment(g, e)?;
        for block in &self.dual {
            u = block.forward(g, u)?;
        }
        let context = geometry.overlap_add(g, u)?;
        Ok(Embedding {
            features: u,
            context,
            geometry,
            samples,
        })
    }

    /// Overlap-add, normalization, projection and decoding of one scale:
    /// `[B, C, K, S, D] -> [B, C, T]`.
    pub fn decode_scale<T: Real>(&self, g: &mut Graph<T>, v: Var, emb: &Embedding) -> Result<Var> {
        let s = g.shape(v).to_vec();
        let (b, c) = (s[0], s[1]);
        let x = g.reshape(v, &[b * c, s[2], s[3], s[4]])?;
        let x = emb.geometry.overlap_add(g, x)?;
        let x = self.head_norm.forward(g, x)?;
        let z = self.head.forward(g, x)?;
        let y = self.decoder.forward(g, z, emb.samples)?;
        g.reshape(y, &[b, c, emb.samples])
    }

    /// FiLM and the triple-path stack for given attractors `[B, C, D]`.
    /// Returns one `[B, C, T]` estimate per block when `all_scales`, otherwise
    /// only the last.
    pub fn separate_from_attractors<T: Real>(
        &self,
        g: &mut Graph<T>,
        emb: &Embedding,
        attractors: Var,
        all_scales: bool,
    ) -> Result<Vec<Var>> {
        let mut v = self.film.forward(g, emb.features, attractors)?;
        let mut out = Vec::new();
        let n = self.triple.len();
        for (i, block) in self.triple.iter().enumerate() {
            v = block.forward(g, v)?;
            if all_scales || i + 1 == n {
                out.push(self.decode_scale(g, v, emb)?);
            }
        }
        Ok(out)
    }

    /// Teacher-forced forward with `speakers` attractors for `mixtures: [B, T]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, mixtures: Var, speakers: usize) -> Result<ForwardOutput> {
        let emb = self.embed(g, mixtures)?;
        let att = self.tda.forward(g, emb.context, speakers)?;
        let a = g.narrow(att.attractors, 1, 0, speakers)?;
        let per_scale = self.separate_from_attractors(g, &emb, a, true)?;
        Ok(ForwardOutput {
            per_scale,
            logits: att.logits,
        })
    }

    /// Existence probabilities of all `C_max + 1` queries, without separating.
    pub fn existence_probs<T: Real>(&self, params: &ParamStore<T>, audio: &AudioSignal) -> Result<Vec<f64>> {
        let mut g = Graph::inference(params);
        let x = g.constant(mixture_tensor(audio, self.config.sample_rate)?);
        let emb = self.embed(&mut g, x)?;
        self.probe(&mut g, &emb)
    }

    fn probe<T: Real>(&self, g: &mut Graph<T>, emb: &Embedding) -> Result<Vec<f64>> {
        let probe = self.tda.forward(g, emb.context, self.config.max_speakers)?;
        Ok(g.value(probe.logits)
            .data()
            .iter()
            .map(|&l| crate::numerics::kernels::sigmoid_scalar(l).to_f64_lossy())
            .collect())
    }

    /// Inference on one mixture.
    pub fn separate<T: Real>(
        &self,
        params: &ParamStore<T>,
        audio: &AudioSignal,
        speakers: Speakers,
        keep_scales: bool,
    ) -> Result<SeparationResult> {
        let c_max = self.config.max_speakers;
        let mut g = Graph::inference(params);
        let x = g.constant(mixture_tensor(audio, self.config.sample_rate)?);
        let emb = self.embed(&mut g, x)?;
        let probs = self.probe(&mut g, &emb)?;
        let estimated_count = count_speakers(&probs, c_max);
        let c = match speakers {
            Speakers::Known(0) => return Err(Error::Config("speaker count must be at least 1".into())),
            Speakers::Known(c) if c > c_max => {
                return Err(Error::TooManySpeakers {
                    requested: c,
                    max: c_max,
                })
            }
            Speakers::Known(c) => c,
            Speakers::Auto if estimated_count == 0 => return Err(Error::NoSpeakers { probs }),
            Speakers::Auto => estimated_count,
        };
        let att = self.tda.forward(&mut g, emb.context, c)?;
        let a = g.narrow(att.attractors, 1, 0, c)?;
        let outs = self.separate_from_attractors(&mut g, &emb, a, keep_scales)?;
        let sr = self.config.sample_rate;
        let estimates = to_signals(g.value(*outs.last().unwrap()), sr)?;
        let per_scale = if keep_scales {
            outs.iter().map(|&v| to_signals(g.value(v), sr)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(SeparationResult {
            estimates,
            probs,
            estimated_count,
            per_scale,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;

    fn tiny() -> ModelConfig {
        ModelConfig {
            kernel_size: 4,
            encoder_dim: 6,
            model_dim: 4,
            chunk_size: 4,
            lstm_hidden: 3,
            heads: 2,
            ffn_expansion: 2,
            tda_layers: 2,
            triple_blocks: 2,
            max_speakers: 3,
            t5_buckets: 4,
            t5_max_distance: 8,
            ..ModelConfig::reference()
        }
    }

    fn signal(n: usize, seed: u64) -> AudioSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = gradcheck::random_tensor(&[n], &mut rng);
        AudioSignal::new(t.data().iter().map(|&v| v as f32).collect(), 8000).unwrap()
    }

    #[test]
    fn output_lengths_match_input_at_every_scale() {
        let (m, ps) = SepTda::new::<f64>(&tiny(), 1).unwrap();
        for n in [1, 7, 33, 50] {
            let r = m.separate(&ps, &signal(n, n as u64), Speakers::Known(2), true).unwrap();
            assert_eq!(r.estimates.len(), 2);
            assert_eq!(r.per_scale.len(), 2);
            assert_eq!(r.probs.len(), 4);
            for set in r.per_scale.iter().chain([&r.estimates]) {
                assert!(set.iter().all(|s| s.len() == n));
            }
            // the last scale is the inference output
            assert_eq!(r.per_scale.last().unwrap(), &r.estimates);
        }
    }

    #[test]
    fn auto_count_agrees_with_known_count() {
        let (m, mut ps) = SepTda::new::<f64>(&tiny(), 2).unwrap();
        let x = signal(40, 3);
        let bias = m.tda.existence.bias.unwrap();
        let b0 = ps.value(bias).data()[0];
        let probe = m.separate(&ps, &x, Speakers::Known(1), false).unwrap();
        let logits: Vec<f64> = probe.probs.iter().map(|p| (p / (1.0 - p)).ln() - b0).collect();
        let mut tested = 0;
        for k in 1..=3usize {
            // shift the existence bias so exactly the first k logits are positive
            let lead = logits[..k].iter().cloned().fold(f64::INFINITY, f64::min);
            if k < 3 && lead <= logits[k] {
                continue;
            }
            let b = if k < 3 { -(lead + logits[k]) / 2.0 } else { 10.0 - lead };
            ps.set_values(bias, &[b]).unwrap();
            let auto = m.separate(&ps, &x, Speakers::Auto, true).unwrap();
            assert_eq!(auto.estimated_count, k);
            let known = m.separate(&ps, &x, Speakers::Known(k), true).unwrap();
            assert_eq!(auto, known);
            tested += 1;
        }
        assert!(tested >= 2);
    }

    #[test]
    fn auto_with_no_speakers_reports_probs() {
        let (m, mut ps) = SepTda::new::<f64>(&tiny(), 2).unwrap();
        let bias = m.tda.existence.bias.unwrap();
        let w = m.tda.existence.weight;
        ps.set_values(w, &[0.0; 4]).unwrap();
        ps.set_values(bias, &[-10.0]).unwrap();
        match m.separate(&ps, &signal(20, 1), Speakers::Auto, false) {
            Err(Error::NoSpeakers { probs }) => {
                assert_eq!(probs.len(), 4);
                assert!(probs.iter().all(|&p| p < 0.5));
            }
            other => panic!("{other:?}"),
        }
        // a known count still separates
        assert_eq!(m.separate(&ps, &signal(20, 1), Speakers::Known(2), false).unwrap().estimates.len(), 2);
    }

    #[test]
    fn saturated_probs_fix_the_count_under_scaling() {
        let (m, mut ps) = SepTda::new::<f64>(&tiny(), 4).unwrap();
        ps.set_values(m.tda.existence.weight, &[0.0; 4]).unwrap();
        ps.set_values(m.tda.existence.bias.unwrap(), &[10.0]).unwrap();
        let x = signal(30, 9);
        let loud = AudioSignal::new(x.samples.iter().map(|v| 2.0 * v).collect(), 8000).unwrap();
        let a = m.separate(&ps, &x, Speakers::Auto, false).unwrap();
        let b = m.separate(&ps, &loud, Speakers::Auto, false).unwrap();
        assert_eq!(a.estimated_count, 3);
        assert_eq!(b.estimated_count, 3);
        assert_eq!(a.estimates.len(), b.estimates.len());
        assert_ne!(a.estimates, b.estimates);
        assert_eq!(m.existence_probs(&ps, &x).unwrap(), a.probs);
    }

    #[test]
    fn rejects_bad_requests() {
        let (m, ps) = SepTda::new::<f64>(&tiny(), 1).unwrap();
        let x = signal(20, 1);
        assert!(matches!(
            m.separate(&ps, &x, Speakers::Known(4), false),
            Err(Error::TooManySpeakers { requested: 4, max: 3 })
        ));
        assert!(m.separate(&ps, &x, Speakers::Known(0), false).is_err());
        let wrong_rate = AudioSignal::new(x.samples.clone(), 16000).unwrap();
        assert!(matches!(
            m.separate(&ps, &wrong_rate, Speakers::Known(1), false),
            Err(Error::SampleRateMismatch { .. })
        ));
        assert_eq!("auto".parse::<Speakers>().unwrap(), Speakers::Auto);
        assert_eq!("3".parse::<Speakers>().unwrap(), Speakers::Known(3));
        assert!("x".parse::<Speakers>().is_err());
    }

    #[test]
    fn training_forward_emits_every_scale() {
        let (m, ps) = SepTda::new::<f64>(&tiny(), 1).unwrap();
        let mut g = Graph::with_params(&ps);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = g.constant(gradcheck::random_tensor(&[2, 25], &mut rng));
        let out = m.forward(&mut g, x, 2).unwrap();
        assert_eq!(out.per_scale.len(), 2);
        for &v in &out.per_scale {
            assert_eq!(g.shape(v), &[2, 2, 25]);
        }
        assert_eq!(g.shape(out.logits), &[2, 3]);
    }

    #[test]
    fn batch_items_are_independent() {
        let (m, ps) = SepTda::new::<f64>(&tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = gradcheck::random_tensor(&[2, 30], &mut rng);
        let mut g = Graph::inference(&ps);
        let xv = g.constant(x.clone());
        let out = m.forward(&mut g, xv, 2).unwrap();
        let both = g.value(*out.per_scale.last().unwrap()).to_f64_vec();
        for b in 0..2 {
            let mut g1 = Graph::inference(&ps);
            let xi = g1.constant(Tensor::new(vec![1, 30], x.data()[b * 30..(b + 1) * 30].to_vec()).unwrap());
            let o = m.forward(&mut g1, xi, 2).unwrap();
            let single = g1.value(*o.per_scale.last().unwrap()).to_f64_vec();
            let diff = single
                .iter()
                .zip(&both[b * 60..(b + 1) * 60])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "{diff}");
        }
    }

    #[test]
    fn parameters_are_deterministic_per_seed() {
        let (_, a) = SepTda::new::<f32>(&tiny(), 7).unwrap();
        let (_, b) = SepTda::new::<f32>(&tiny(), 7).unwrap();
        let (_, c) = SepTda::new::<f32>(&tiny(), 8).unwrap();
        let vals = |s: &ParamStore<f32>| s.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect::<Vec<_>>();
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }
}
