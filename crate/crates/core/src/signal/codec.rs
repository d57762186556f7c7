//! Learned convolutional encoder and its transposed-convolution decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};
use crate::signal::AudioSignal;

/// Encoder output length for `samples` inputs with kernel `kernel` and
/// stride `kernel / 2`: `ceil(2 * samples / kernel)`.
pub fn num_frames(samples: usize, kernel: usize) -> usize {
    (2 * samples).div_ceil(kernel)
}

/// Encoded frames, `[T', D_e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFrames<T> {
    pub frames: Tensor<T>,
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel < 2 || kernel % 2 != 0 {
        return Err(Error::Config(format!("kernel size must be even and at least 2, got {kernel}")));
    }
    Ok(())
}

/// `GELU(Conv1D(x))` with kernel `L`, stride `L/2` and `D_e` channels. The
/// tail is zero-padded so exactly `ceil(2T/L)` frames are produced.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub conv: Linear,
    pub kernel: usize,
}

impl Encoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        kernel: usize,
        channels: usize,
    ) -> Result<Self> {
        check_kernel(kernel)?;
        Ok(Self {
            conv: Linear::new(store, rng, name, kernel, channels, true),
            kernel,
        })
    }

    pub fn stride(&self) -> usize {
        self.kernel / 2
    }

    pub fn channels(&self) -> usize {
        self.conv.out_features
    }

    /// `[..., T] -> [..., T', D_e]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, wave: Var) -> Result<Var> {
        let t = *g.shape(wave).last().ok_or_else(|| Error::Shape("encoder input is a scalar".into()))?;
        let frames = g.frame(wave, self.kernel, self.stride(), num_frames(t, self.kernel))?;
        let h = self.conv.forward(g, frames)?;
        Ok(g.gelu(h))
    }

    pub fn encode<T: Real>(&self, params: &ParamStore<T>, audio: &AudioSignal) -> Result<LatentFrames<T>> {
        if audio.samples.is_empty() {
            return Err(Error::Shape("cannot encode an empty signal".into()));
        }
        let mut g = Graph::inference(params);
        let x = g.constant(Tensor::new(
            vec![audio.len()],
            audio.samples.iter().map(|&v| T::c(v as f64)).collect(),
        )?);
        let e = self.forward(&mut g, x)?;
        Ok(LatentFrames {
            frames: g.value(e).clone(),
        })
    }
}

/// Transposed 1-D convolution back to a single channel, kernel `L`, stride
/// `L/2`, trimmed or zero-padded to the requested length.
#[derive(Clone, Debug)]
pub struct Decoder {
    /// `[L, D_e]`: the contribution of each input channel to each output tap.
    pub weight: ParamId,
    /// One bias for the single output channel.
    pub bias: ParamId,
    pub kernel: usize,
    pub channels: usize,
}

impl Decoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        kernel: usize,
        channels: usize,
    ) -> Result<Self> {
        check_kernel(kernel)?;
        let bound = 1.0 / (channels as f64).sqrt();
        Ok(Self {
            weight: store.add(&format!("{name}.weight"), &[kernel, channels], Init::Uniform(bound), rng),
            bias: store.add(&format!("{name}.bias"), &[1], Init::Uniform(bound), rng),
            kernel,
            channels,
        })
    }

    pub fn stride(&self) -> usize {
        self.kernel / 2
    }

    /// `[..., T', D_e] -> [..., length]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, z: Var, length: usize) -> Result<Var> {
        if g.shape(z).last() != Some(&self.channels) {
            return Err(Error::Shape(format!(
                "decoder expects {} channels, got input {:?}",
                self.channels,
                g.shape(z)
            )));
        }
        let w = g.param(self.weight);
        let taps = g.linear(z, w, None)?;
        let wave = g.fold(taps, self.stride(), length)?;
        let b = g.param(self.bias);
        g.add(wave, b)
    }

    pub fn decode<T: Real>(
        &self,
        params: &ParamStore<T>,
        z: &Tensor<T>,
        length: usize,
        sample_rate: u32,
    ) -> Result<AudioSignal> {
        let mut g = Graph::inference(params);
        let zv = g.constant(z.clone());
        let y = self.forward(&mut g, zv, length)?;
        AudioSignal::new(g.value(y).data().iter().map(|v| v.to_f64_lossy() as f32).collect(), sample_rate)
    }
}
