//! Segmentation of frame sequences into half-overlapping chunks.

use crate::error::{Error, Result};
use crate::numerics::{overlap_counts, Graph, Real, Tensor, Var};

/// Layout of `S` chunks of `K` frames with hop `ceil(K/2)` over `T'` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkGeometry {
    pub chunk: usize,
    pub hop: usize,
    pub num_chunks: usize,
    pub length: usize,
}

impl ChunkGeometry {
    /// The smallest chunk count with `hop * (S - 1) + K >= length`.
    pub fn new(length: usize, chunk: usize) -> Result<Self> {
        if chunk < 2 {
            return Err(Error::Config(format!("chunk size must be at least 2, got {chunk}")));
        }
        if length == 0 {
            return Err(Error::Shape("cannot segment an empty sequence".into()));
        }
        let hop = chunk.div_ceil(2);
        let num_chunks = if length <= chunk {
            1
        } else {
            (length - chunk).div_ceil(hop) + 1
        };
        Ok(Self {
            chunk,
            hop,
            num_chunks,
            length,
        })
    }

    /// Zero-padded frames at the tail of the last chunk.
    pub fn padding(&self) -> usize {
        self.hop * (self.num_chunks - 1) + self.chunk - self.length
    }

    /// How many chunk frames land on each sequence position.
    pub fn overlap_counts(&self) -> Vec<usize> {
        overlap_counts(self.chunk, self.hop, self.num_chunks, self.length)
    }

    /// `[..., T', D] -> [..., K, S, D]`.
    pub fn segment<T: Real>(&self, g: &mut Graph<T>, frames: Var) -> Result<Var> {
        let s = g.shape(frames);
        if s.len() < 2 || s[s.len() - 2] != self.length {
            return Err(Error::Shape(format!("segment: expected {} frames, got shape {s:?}", self.length)));
        }
        g.segment(frames, self.chunk, self.hop, self.num_chunks)
    }

    /// `[..., K, S, D] -> [..., T', D]`.
    pub fn overlap_add<T: Real>(&self, g: &mut Graph<T>, chunks: Var) -> Result<Var> {
        let s = g.shape(chunks);
        let n = s.len();
        if n < 3 || s[n - 3] != self.chunk || s[n - 2] != self.num_chunks {
            return Err(Error::Shape(format!(
                "overlap_add: expected [.., {}, {}, D], got {s:?}",
                self.chunk, self.num_chunks
            )));
        }
        g.overlap_add(chunks, self.hop, self.length)
    }
}

/// Chunked frames `[K, S, D]` plus the geometry needed to invert them.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkTensor<T> {
    pub chunks: Tensor<T>,
    pub geometry: ChunkGeometry,
}

impl<T: Real> ChunkTensor<T> {
    pub fn original_length(&self) -> usize {
        self.geometry.length
    }
}

/// Splits `[T', D]` frames into overlapping chunks.
pub fn segment<T: Real>(frames: &Tensor<T>, chunk: usize) -> Result<ChunkTensor<T>> {
    if frames.ndim() != 2 {
        return Err(Error::Shape(format!("segment expects [T', D], got {:?}", frames.shape())));
    }
    let geometry = ChunkGeometry::new(frames.shape()[0], chunk)?;
    let mut g = Graph::new();
    let x = g.constant(frames.clone());
    let c = geometry.segment(&mut g, x)?;
    Ok(ChunkTensor {
        chunks: g.value(c).clone(),
        geometry,
    })
}

/// Reassembles chunks into `[T', D]`, normalizing by the overlap count.
pub fn overlap_add<T: Real>(chunks: &ChunkTensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(chunks.chunks.clone());
    let y = chunks.geometry.overlap_add(&mut g, x)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(t: usize, d: usize) -> Tensor<f64> {
        Tensor::new(vec![t, d], (0..t * d).map(|v| v as f64 + 1.0).collect()).unwrap()
    }

    #[test]
    fn eight_frames_chunk_four() {
        let c = segment(&ramp(8, 1), 4).unwrap();
        assert_eq!(c.geometry.num_chunks, 3);
        assert_eq!(c.geometry.hop, 2);
        assert_eq!(c.geometry.padding(), 0);
        assert_eq!(c.chunks.shape(), &[4, 3, 1]);
        // chunk s covers frames [2s, 2s+4)
        for s in 0..3 {
            for k in 0..4 {
                assert_eq!(c.chunks.get(&[k, s, 0]), (2 * s + k) as f64 + 1.0);
            }
        }
    }

    #[test]
    fn seven_frames_pad_one() {
        let c = segment(&ramp(7, 2), 4).unwrap();
        assert_eq!(c.geometry.num_chunks, 3);
        assert_eq!(c.geometry.padding(), 1);
        assert_eq!(c.chunks.get(&[3, 2, 0]), 0.0);
        assert_eq!(c.chunks.get(&[3, 2, 1]), 0.0);
    }

    #[test]
    fn interior_overlap_count_is_two() {
        let g = ChunkGeometry::new(100, 96).unwrap();
        assert_eq!(g.hop, 48);
        let g = ChunkGeometry::new(50, 10).unwrap();
        let counts = g.overlap_counts();
        assert!(counts[5..45].iter().all(|&c| c == 2));
    }

    #[test]
    fn single_chunk_is_identity() {
        let x = ramp(5, 3);
        let c = segment(&x, 8).unwrap();
        assert_eq!(c.geometry.num_chunks, 1);
        assert_eq!(overlap_add(&c).unwrap(), x);
    }

    #[test]
    fn errors() {
        assert!(ChunkGeometry::new(0, 4).is_err());
        assert!(ChunkGeometry::new(10, 1).is_err());
        let c = segment(&ramp(9, 2), 4).unwrap();
        let bad = ChunkTensor {
            chunks: c.chunks.clone(),
            geometry: ChunkGeometry::new(9, 6).unwrap(),
        };
        assert!(overlap_add(&bad).is_err());
    }

    proptest! {
        #[test]
        fn overlap_add_inverts_segment(t in 1usize..120, k in 2usize..40, d in 1usize..4, seed in 0u64..1000) {
            let data: Vec<f64> = (0..t * d).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0).collect();
            let x = Tensor::new(vec![t, d], data).unwrap();
            let c = segment(&x, k).unwrap();
            let g = c.geometry;
            prop_assert!(g.hop * (g.num_chunks - 1) + g.chunk >= t);
            prop_assert!(g.num_chunks == 1 || g.hop * (g.num_chunks - 2) + g.chunk < t);
            let y = overlap_add(&c).unwrap();
            for (a, b) in x.data().iter().zip(y.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
