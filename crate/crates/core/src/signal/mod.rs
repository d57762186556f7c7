//! Waveform I/O, the learned encoder/decoder pair and chunking.

mod chunk;
mod codec;
mod wav;

pub use chunk::{overlap_add, segment, ChunkGeometry, ChunkTensor};
pub use codec::{num_frames, Decoder, Encoder, LatentFrames};
pub use wav::{quantize, read_wav, write_wav, AudioSignal, DEFAULT_SAMPLE_RATE};
