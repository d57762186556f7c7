//! Training loop: fixed-length crops, teacher-forced speaker count,
//! multi-scale PIT loss plus attractor existence loss, clipped AdamW and a
//! plateau learning-rate schedule.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{read_text, reject_leftovers, take, parse_pairs, ModelConfig, SepTda};
use crate::numerics::{adamw_step, clip_global_norm, AdamWConfig, Graph, OptimizerState, ParamStore, PlateauScheduler, Tensor};
use crate::objectives::recon_loss_var;
use crate::tda::existence_loss;

/// Optimization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub lr: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub segment_seconds: f64,
    pub patience: usize,
    pub lr_factor: f64,
    pub max_epochs: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            grad_clip: 5.0,
            batch_size: 2,
            segment_seconds: 4.0,
            patience: 5,
            lr_factor: 0.5,
            max_epochs: 200,
            max_steps: None,
            weight_decay: AdamWConfig::default().weight_decay,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// Checks the settings against a model's sample rate.
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (k, v) in [("lr", self.lr), ("grad_clip", self.grad_clip), ("segment_seconds", self.segment_seconds)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("lr_factor must lie in (0, 1), got {}", self.lr_factor));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 || self.max_steps == Some(0) {
            return bad("batch_size, patience, max_epochs and max_steps must be positive".into());
        }
        let samples = self.segment_seconds * sample_rate as f64;
        if (samples - samples.round()).abs() > 1e-9 {
            return bad(format!(
                "segment_seconds * sample_rate must be a whole number of samples, got {samples}"
            ));
        }
        Ok(())
    }

    pub fn segment_samples(&self, sample_rate: u32) -> usize {
        (self.segment_seconds * sample_rate as f64).round() as usize
    }

    pub fn from_map(map: &mut BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        take(map, "lr", &mut c.lr)?;
        take(map, "grad_clip", &mut c.grad_clip)?;
        take(map, "batch_size", &mut c.batch_size)?;
        take(map, "segment_seconds", &mut c.segment_seconds)?;
        take(map, "patience", &mut c.patience)?;
        take(map, "lr_factor", &mut c.lr_factor)?;
        take(map, "max_epochs", &mut c.max_epochs)?;
        take(map, "weight_decay", &mut c.weight_decay)?;
        take(map, "seed", &mut c.seed)?;
        if map.contains_key("max_steps") {
            let mut steps = 0usize;
            take(map, "max_steps", &mut steps)?;
            c.max_steps = Some(steps);
        }
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "lr = {}\ngrad_clip = {}\nbatch_size = {}\nsegment_seconds = {}\npatience = {}\nlr_factor = {}\nmax_epochs = {}\nweight_decay = {}\nseed = {}\n",
            self.lr,
            self.grad_clip,
            self.batch_size,
            self.segment_seconds,
            self.patience,
            self.lr_factor,
            self.max_epochs,
            self.weight_decay,
            self.seed
        );
        if let Some(n) = self.max_steps {
            s.push_str(&format!("max_steps = {n}\n"));
        }
        s
    }
}

/// Parses a file holding model and training keys together.
pub fn parse_run_config(text: &str) -> Result<(ModelConfig, TrainingConfig)> {
    let mut map = parse_pairs(text)?;
    let model = ModelConfig::from_map(&mut map)?;
    let training = TrainingConfig::from_map(&mut map)?;
    reject_leftovers(&map)?;
    training.validate(model.sample_rate)?;
    Ok((model, training))
}

pub fn load_run_config(path: &Path) -> Result<(ModelConfig, TrainingConfig)> {
    parse_run_config(&read_text(path)?)
}

/// One mixture with its sources; the speaker count is `references.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingItem {
    pub mixture: Vec<f32>,
    pub references: Vec<Vec<f32>>,
}

impl TrainingItem {
    pub fn speakers(&self) -> usize {
        self.references.len()
    }

    fn check(&self) -> Result<()> {
        if self.mixture.is_empty() || self.references.is_empty() {
            return Err(Error::Shape("training item needs a non-empty mixture and at least one reference".into()));
        }
        if self.references.iter().any(|r| r.len() != self.mixture.len()) {
            return Err(Error::Shape("references must be as long as the mixture".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<TrainingItem>,
    /// Falls back to the training items when empty.
    pub validation: Vec<TrainingItem>,
}

/// One row of the loss history. Step rows carry the batch loss; the row
/// closing an epoch carries the mean training loss and the validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "epoch,step,train_loss,val_loss,lr";

    pub fn to_csv(&self) -> String {
        let val = self.val_loss.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.epoch, self.step, self.train_loss, val, self.lr)
    }
}

/// What the observer sees after each history row.
pub struct Progress<'a> {
    pub record: &'a LossRecord,
    pub model: &'a SepTda,
    pub params: &'a ParamStore<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub history: Vec<LossRecord>,
    pub optimizer: OptimizerState<f32>,
    pub steps: usize,
}

/// Crops (at `offset`) or zero-pads every signal of an item to `len` samples.
fn crop(item: &TrainingItem, len: usize, offset: usize) -> (Vec<f32>, Vec<Vec<f32>>) {
    let cut = |s: &[f32]| {
        let mut v: Vec<f32> = s.iter().skip(offset).take(len).copied().collect();
        v.resize(len, 0.0);
        v
    };
    (cut(&item.mixture), item.references.iter().map(|r| cut(r)).collect())
}

/// Mixtures `[B, T]` and references `[B, C, T]` of a single-C batch.
fn batch_tensors(items: &[(Vec<f32>, Vec<Vec<f32>>)]) -> Result<(Tensor<f32>, Tensor<f32>, usize)> {
    let b = items.len();
    let t = items[0].0.len();
    let c = items[0].1.len();
    let mix = items.iter().flat_map(|(m, _)| m.iter().copied()).collect();
    let refs = items.iter().flat_map(|(_, r)| r.iter().flatten().copied()).collect();
    Ok((Tensor::new(vec![b, t], mix)?, Tensor::new(vec![b, c, t], refs)?, c))
}

/// Groups item indices by speaker count and cuts each group into batches.
fn make_batches(items: &[TrainingItem], order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in order {
        groups.entry(items[i].speakers()).or_default().push(i);
    }
    groups
        .into_values()
        .flat_map(|g| g.chunks(batch_size).map(|c| c.to_vec()).collect::<Vec<_>>())
        .collect()
}

/// Total loss of one batch, with parameter gradients when `params` is mutable.
fn batch_loss(
    model: &SepTda,
    params: &ParamStore<f32>,
    mix: Tensor<f32>,
    refs: &Tensor<f32>,
    speakers: usize,
    with_grad: bool,
) -> Result<(f64, Option<crate::numerics::Gradients<f32>>)> {
    let mut g = if with_grad { Graph::with_params(params) } else { Graph::inference(params) };
    let x = g.constant(mix);
    let out = model.forward(&mut g, x, speakers)?;
    let recon = recon_loss_var(&mut g, &out.per_scale, refs)?;
    let attractor = existence_loss(&mut g, out.logits)?;
    let total = g.add(recon, attractor)?;
    let value = g.value(total).data()[0] as f64;
    let grads = if with_grad && value.is_finite() { Some(g.backward(total)?) } else { None };
    Ok((value, grads))
}

/// Mean total loss over `items` with deterministic crops from the start.
pub fn evaluate_loss(model: &SepTda, params: &ParamStore<f32>, items: &[TrainingItem], cfg: &TrainingConfig) -> Result<f64> {
    let len = cfg.segment_samples(model.config.sample_rate);
    let order: Vec<usize> = (0..items.len()).collect();
    let mut sum = 0.0;
    for batch in make_batches(items, &order, cfg.batch_size) {
        let cropped: Vec<_> = batch.iter().map(|&i| crop(&items[i], len, 0)).collect();
        let (mix, refs, c) = batch_tensors(&cropped)?;
        sum += batch_loss(model, params, mix, &refs, c, false)?.0 * batch.len() as f64;
    }
    Ok(sum / items.len() as f64)
}

/// Trains `params` in place. `optimizer` resumes a saved state when given.
/// The observer sees every history row and may stop training early.
pub fn train(
    model: &SepTda,
    params: &mut ParamStore<f32>,
    optimizer: Option<OptimizerState<f32>>,
    data: &Dataset,
    cfg: &TrainingConfig,
    mut observer: impl FnMut(&Progress) -> Flow,
) -> Result<TrainingOutcome> {
    cfg.validate(model.config.sample_rate)?;
    if data.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for item in data.train.iter().chain(&data.validation) {
        item.check()?;
        if item.speakers() > model.config.max_speakers {
            return Err(Error::TooManySpeakers {
                requested: item.speakers(),
                max: model.config.max_speakers,
            });
        }
    }
    let validation = if data.validation.is_empty() { &data.train } else { &data.validation };
    let mut opt = match optimizer {
        Some(o) => o,
        None => OptimizerState::new(
            params,
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
        )?,
    };
    let mut scheduler = PlateauScheduler::new(opt.lr(), cfg.patience, cfg.lr_factor);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let len = cfg.segment_samples(model.config.sample_rate);
    let mut history = Vec::new();
    let mut step = 0usize;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut batches = make_batches(&data.train, &order, cfg.batch_size);
        batches.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_items = 0usize;
        for batch in batches {
            let cropped: Vec<_> = batch
                .iter()
                .map(|&i| {
                    let n = data.train[i].mixture.len();
                    let offset = if n > len { rng.random_range(0..=n - len) } else { 0 };
                    crop(&data.train[i], len, offset)
                })
                .collect();
            let (mix, refs, c) = batch_tensors(&cropped)?;
            step += 1;
            let (loss, grads) = batch_loss(model, params, mix, &refs, c, true)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, value: loss });
            }
            params.zero_grads();
            grads.expect("finite loss has gradients").accumulate_into(params);
            // parameters the graph never reached get an explicit zero gradient
            for p in params.iter_mut() {
                if p.grad.is_none() {
                    p.grad = Some(vec![0.0; p.value.numel()]);
                }
            }
            clip_global_norm(params, cfg.grad_clip);
            adamw_step(params, &mut opt)?;
            epoch_sum += loss * batch.len() as f64;
            epoch_items += batch.len();
            let record = LossRecord {
                epoch,
                step,
                train_loss: loss,
                val_loss: None,
                lr: opt.lr(),
            };
            history.push(record);
            let flow = observer(&Progress {
                record: history.last().unwrap(),
                model,
                params,
            });
            if flow == Flow::Stop || cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
        }
        let val = evaluate_loss(model, params, validation, cfg)?;
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: val });
        }
        let record = LossRecord {
            epoch,
            step,
            train_loss: epoch_sum / epoch_items as f64,
            val_loss: Some(val),
            lr: opt.lr(),
        };
        history.push(record);
        opt.set_lr(scheduler.step(val));
        if observer(&Progress {
            record: history.last().unwrap(),
            model,
            params,
        }) == Flow::Stop
        {
            break;
        }
    }
    params.zero_grads();
    Ok(TrainingOutcome {
        history,
        optimizer: opt,
        steps: step,
    })
}

/// Writes the history as CSV with a header row.
pub fn write_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", LossRecord::CSV_HEADER)?;
    for r in history {
        writeln!(f, "{}", r.to_csv())?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            kernel_size: 4,
            encoder_dim: 8,
            model_dim: 4,
            chunk_size: 4,
            lstm_hidden: 4,
            heads: 2,
            ffn_expansion: 2,
            tda_layers: 1,
            triple_blocks: 2,
            max_speakers: 3,
            t5_buckets: 4,
            t5_max_distance: 8,
            ..ModelConfig::reference()
        }
    }

    fn item(n: usize, c: usize, seed: u64) -> TrainingItem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let references: Vec<Vec<f32>> = (0..c).map(|_| (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()).collect();
        let mixture = (0..n).map(|t| references.iter().map(|r| r[t]).sum()).collect();
        TrainingItem { mixture, references }
    }

    fn cfg() -> TrainingConfig {
        TrainingConfig {
            segment_seconds: 0.005,
            max_epochs: 3,
            seed: 9,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn config_text_round_trip_and_validation() {
        let c = TrainingConfig {
            max_steps: Some(10),
            ..TrainingConfig::default()
        };
        let mut map = parse_pairs(&c.to_text()).unwrap();
        assert_eq!(TrainingConfig::from_map(&mut map).unwrap(), c);
        assert!(map.is_empty());
        assert!(c.validate(8000).is_ok());
        let bad = [
            TrainingConfig { lr: 0.0, ..c.clone() },
            TrainingConfig { batch_size: 0, ..c.clone() },
            TrainingConfig { lr_factor: 1.0, ..c.clone() },
            TrainingConfig { segment_seconds: 1.0 / 3.0, ..c.clone() },
            TrainingConfig { max_steps: Some(0), ..c.clone() },
        ];
        for b in bad {
            assert!(b.validate(8000).is_err(), "{b:?}");
        }
        let (m, t) = parse_run_config("model_dim = 64\nlr = 0.001\n").unwrap();
        assert_eq!(m.model_dim, 64);
        assert_eq!(t.lr, 0.001);
        assert!(parse_run_config("lr = 0.001\nfoo = 1\n").is_err());
    }

    #[test]
    fn crop_and_pad() {
        let it = TrainingItem {
            mixture: vec![1.0, 2.0, 3.0],
            references: vec![vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 2.0]],
        };
        let (m, r) = crop(&it, 5, 0);
        assert_eq!(m, vec![1.0, 2.0, 3.0, 0.0, 0.0]);
        assert_eq!(r[1], vec![0.0, 1.0, 2.0, 0.0, 0.0]);
        let (m, r) = crop(&it, 2, 1);
        assert_eq!(m, vec![2.0, 3.0]);
        assert_eq!(r[0], vec![1.0, 1.0]);
    }

    #[test]
    fn batches_hold_a_single_speaker_count() {
        let items: Vec<_> = [2, 3, 2, 2, 3].iter().enumerate().map(|(i, &c)| item(10, c, i as u64)).collect();
        let order: Vec<usize> = (0..5).collect();
        let batches = make_batches(&items, &order, 2);
        assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), 5);
        for b in &batches {
            assert!(b.len() <= 2);
            assert!(b.iter().all(|&i| items[i].speakers() == items[b[0]].speakers()));
        }
    }

    #[test]
    fn fixed_seed_reproduces_history() {
        let data = Dataset {
            train: (0..4).map(|i| item(60, 2 + i % 2, i as u64)).collect(),
            validation: vec![],
        };
        let run = || {
            let (m, mut ps) = SepTda::new::<f32>(&tiny(), 1).unwrap();
            let out = train(&m, &mut ps, None, &data, &cfg(), |_| Flow::Continue).unwrap();
            (out.history, ps.iter().map(|(_, p)| p.value.data().to_vec()).collect::<Vec<_>>())
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
        // two single-C batches per epoch plus one epoch row
        assert_eq!(h1.len(), 3 * 3);
        assert!(h1.iter().all(|r| r.train_loss.is_finite()));
        assert!(h1.iter().filter(|r| r.val_loss.is_some()).count() == 3);
    }

    #[test]
    fn observer_and_step_limit_stop_training() {
        let data = Dataset {
            train: (0..4).map(|i| item(40, 2, i as u64)).collect(),
            validation: vec![item(40, 2, 99)],
        };
        let (m, mut ps) = SepTda::new::<f32>(&tiny(), 1).unwrap();
        let c = TrainingConfig {
            max_steps: Some(3),
            ..cfg()
        };
        let out = train(&m, &mut ps, None, &data, &c, |_| Flow::Continue).unwrap();
        assert_eq!(out.steps, 3);
        let mut seen = 0;
        let out = train(&m, &mut ps, None, &data, &cfg(), |_| {
            seen += 1;
            if seen == 1 {
                Flow::Stop
            } else {
                Flow::Continue
            }
        })
        .unwrap();
        assert_eq!(out.steps, 1);
    }

    #[test]
    fn non_finite_loss_names_the_step() {
        let mut bad = item(40, 2, 1);
        bad.mixture[3] = f32::NAN;
        let data = Dataset {
            train: vec![bad],
            validation: vec![],
        };
        let (m, mut ps) = SepTda::new::<f32>(&tiny(), 1).unwrap();
        match train(&m, &mut ps, None, &data, &cfg(), |_| Flow::Continue) {
            Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_many_speakers_is_rejected() {
        let data = Dataset {
            train: vec![item(40, 4, 1)],
            validation: vec![],
        };
        let (m, mut ps) = SepTda::new::<f32>(&tiny(), 1).unwrap();
        assert!(matches!(
            train(&m, &mut ps, None, &data, &cfg(), |_| Flow::Continue),
            Err(Error::TooManySpeakers { .. })
        ));
    }

    #[test]
    fn history_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let h = vec![
            LossRecord { epoch: 1, step: 1, train_loss: -1.5, val_loss: None, lr: 4e-4 },
            LossRecord { epoch: 1, step: 1, train_loss: -1.5, val_loss: Some(-2.0), lr: 4e-4 },
        ];
        write_history(&p, &h).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "epoch,step,train_loss,val_loss,lr\n1,1,-1.5,,0.0004\n1,1,-1.5,-2,0.0004\n");
    }
}
