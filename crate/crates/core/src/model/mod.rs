//! Model configuration, assembly, parameter counting and checkpoints.

mod checkpoint;
mod config;
mod dualpath;
mod septda;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, MAGIC,
    VERSION,
};
pub use config::{parse_pairs, Architecture, ModelConfig};
pub(crate) use config::{read_text, reject_leftovers, take};
pub use dualpath::DualPathSeparator;
pub use septda::{Embedding, ForwardOutput, SepTda, SeparationResult, Speakers};

use crate::error::Result;

/// Exact number of scalar parameters of the model a config describes.
pub fn count_parameters(config: &ModelConfig) -> Result<usize> {
    let n = match config.architecture {
        Architecture::SepTda => SepTda::new::<f32>(config, 0)?.1.num_scalars(),
        Architecture::DualPath => DualPathSeparator::new::<f32>(config, 0)?.1.num_scalars(),
    };
    Ok(n)
}

/// The reference model and its ablated variants, as `(label, config)`.
pub fn ablation_configs() -> Vec<(&'static str, ModelConfig)> {
    let reference = ModelConfig::reference();
    let dual = ModelConfig {
        architecture: Architecture::DualPath,
        dual_blocks: 8,
        max_speakers: 2,
        ..reference.clone()
    };
    vec![
        ("septda", reference),
        ("dualpath", dual.clone()),
        (
            "dualpath-no-attention",
            ModelConfig {
                use_attention: false,
                ..dual.clone()
            },
        ),
        (
            "dualpath-no-lstm-d256",
            ModelConfig {
                use_lstm: false,
                model_dim: 256,
                ..dual
            },
        ),
    ]
}
