//! Overfits the toy model on four synthetic two-speaker mixtures and prints
//! the training ΔSI-SDR as it goes.
//!
//! cargo run --release -p septda --example toy_overfit -- [max_steps] [lr]

use std::time::Instant;

use septda::eval::{evaluate_known_count, synthetic_source, simulate_mixture, EvalItem, MixtureSpec, ModelSeparator};
use septda::model::{ModelConfig, SepTda};
use septda::signal::AudioSignal;
use septda::training::{train, Dataset, Flow, TrainingConfig};

fn main() -> septda::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let max_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let items: Vec<EvalItem> = (0..4u64)
        .map(|i| {
            let sources = (0..2u64)
                .map(|k| AudioSignal::new(synthetic_source(4000, 8000, 100 * i + k), 8000))
                .collect::<septda::Result<Vec<_>>>()?;
            let m = simulate_mixture(&MixtureSpec { sources, levels_db: None, seed: i })?;
            Ok(EvalItem { id: format!("toy_{i}"), mixture: m.mixture, references: m.references })
        })
        .collect::<septda::Result<_>>()?;
    let config = ModelConfig::toy();
    let (model, mut params) = SepTda::new::<f32>(&config, 0)?;
    let data = Dataset { train: items.iter().map(EvalItem::to_training).collect(), validation: vec![] };
    let cfg = TrainingConfig {
        lr,
        segment_seconds: 0.5,
        max_steps: Some(max_steps),
        max_epochs: max_steps,
        patience: 50,
        ..TrainingConfig::default()
    };
    let start = Instant::now();
    train(&model, &mut params, None, &data, &cfg, |p| {
        let r = p.record;
        if r.val_loss.is_none() && r.step % 100 == 0 {
            let sep = ModelSeparator { model: p.model, params: p.params };
            let rep = evaluate_known_count(&sep, &items).unwrap();
            println!(
                "step {:5}  loss {:8.3}  lr {:.2e}  delta {:7.3} dB  {:6.1}s",
                r.step,
                r.train_loss,
                r.lr,
                rep.mean_delta_by_count()[&2],
                start.elapsed().as_secs_f64()
            );
        }
        Flow::Continue
    })?;
    Ok(())
}
