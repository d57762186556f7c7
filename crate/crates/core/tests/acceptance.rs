//! Acceptance checks. Each test prints one `PASS` or `FAIL` line to stderr
//! (outside the test harness capture) and then asserts.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use septda::blocks::{causal_mask, BiLstmModule, LayerSpec, MultiHeadAttention, RelativePositionBias, TriplePathBlock};
use septda::eval::{
    evaluate_known_count, evaluate_unknown_count, score_estimates, simulate_mixture, synthetic_source, EvalItem,
    MixtureSpec, ModelSeparator, Separator,
};
use septda::model::{
    ablation_configs, count_parameters, decode_checkpoint, encode_checkpoint, ModelConfig, SepTda, SeparationResult,
    Speakers,
};
use septda::nn::{FeedForward, Linear};
use septda::numerics::gradcheck::{check_leaf_gradients_with, check_param_gradients, random_tensor, worst};
use septda::numerics::{Graph, OptimizerState, ParamStore, Tensor};
use septda::objectives::{brute_force_assignment, hungarian_assignment, recon_loss_var, si_sdr};
use septda::signal::{overlap_add, read_wav, segment, write_wav, AudioSignal, Decoder, Encoder};
use septda::tda::{count_speakers, existence_loss, Film, Tda};
use septda::training::{train, Dataset, Flow, TrainingConfig, TrainingItem};
use septda::{Error, Result};

type Check = std::result::Result<String, String>;

fn verdict(label: &str, outcome: Check) {
    let line = match &outcome {
        Ok(detail) => format!("PASS  {label}: {detail}"),
        Err(detail) => format!("FAIL  {label}: {detail}"),
    };
    let _ = writeln!(std::io::stderr(), "{line}");
    if let Err(detail) = outcome {
        panic!("{label}: {detail}");
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        kernel_size: 4,
        encoder_dim: 8,
        model_dim: 4,
        chunk_size: 4,
        lstm_hidden: 4,
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

fn tiny_spec() -> LayerSpec {
    LayerSpec {
        dim: 4,
        heads: 2,
        lstm_hidden: 4,
        ffn_expansion: 2,
        buckets: 4,
        max_distance: 8,
        use_lstm: true,
        use_attention: true,
    }
}

/// Largest `|a - b|` relative to the largest `|b|`.
fn relative_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Reorders axis 1 of `[B, C, ...]` so slot `c` holds input `perm[c]`.
fn permute_axis1(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let s = x.shape();
    let inner: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(x.numel());
    for b in 0..s[0] {
        for &p in perm {
            let start = (b * s[1] + p) * inner;
            out.extend_from_slice(&x.data()[start..start + inner]);
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

#[test]
fn c01_parameter_counts() {
    let start = Instant::now();
    let targets = [21.2e6, 17.0e6, 16.0e6, 13.0e6];
    let mut detail = Vec::new();
    let mut failures = Vec::new();
    for ((label, config), target) in ablation_configs().into_iter().zip(targets) {
        let n = count_parameters(&config).unwrap();
        let rel = n as f64 / target - 1.0;
        detail.push(format!("{label} {:.2}M ({:+.1}%)", n as f64 / 1e6, 100.0 * rel));
        if rel.abs() > 0.10 {
            failures.push(label);
        }
    }
    let elapsed = start.elapsed();
    let summary = format!("{} in {:.2}s", detail.join(", "), elapsed.as_secs_f64());
    let outcome = if !failures.is_empty() {
        Err(format!("outside ±10%: {failures:?}; {summary}"))
    } else if elapsed >= Duration::from_secs(5) {
        Err(format!("too slow; {summary}"))
    } else {
        Ok(summary)
    };
    verdict("1 parameter counts", outcome);
}

fn gradient_suite() -> Result<Vec<(String, f64)>> {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut results = Vec::new();
    let mut record = |name: &str, report: Vec<(String, f64)>, leaf: Option<f64>| {
        let mut w = worst(&report).1;
        if let Some(l) = leaf {
            w = w.max(l);
        }
        results.push((name.to_string(), w));
    };

    // encoder and decoder, parameters and signal inputs
    let mut ps = ParamStore::<f64>::new();
    let enc = Encoder::new(&mut ps, &mut rng, "enc", 4, 8)?;
    let dec = Decoder::new(&mut ps, &mut rng, "dec", 4, 8)?;
    let wave = random_tensor(&[2, 14], &mut rng);
    let latent = random_tensor(&[2, 6, 8], &mut rng);
    let w = wave.clone();
    let r = check_param_gradients(
        &ps,
        |g| {
            let x = g.constant(w.clone());
            enc.forward(g, x)
        },
        H,
    )?;
    let l = check_leaf_gradients_with(&ps, &[wave.clone()], |g, v| enc.forward(g, v[0]), H)?;
    record("encoder", r.into_iter().filter(|(n, _)| n.starts_with("enc")).collect(), Some(l));
    let z = latent.clone();
    let r = check_param_gradients(
        &ps,
        |g| {
            let x = g.constant(z.clone());
            dec.forward(g, x, 14)
        },
        H,
    )?;
    let l = check_leaf_gradients_with(&ps, &[latent], |g, v| dec.forward(g, v[0], 14), H)?;
    record("decoder", r.into_iter().filter(|(n, _)| n.starts_with("dec")).collect(), Some(l));

    // bidirectional LSTM module
    let mut ps = ParamStore::<f64>::new();
    let lstm = BiLstmModule::new(&mut ps, &mut rng, "lstm", 4, 4);
    let x = random_tensor(&[2, 6, 4], &mut rng);
    let xc = x.clone();
    let r = check_param_gradients(
        &ps,
        |g| {
            let v = g.constant(xc.clone());
            lstm.forward(g, v)
        },
        H,
    )?;
    let l = check_leaf_gradients_with(&ps, &[x], |g, v| lstm.forward(g, v[0]), H)?;
    record("lstm", r, Some(l));

    // self-attention with relative-position bias and a causal mask, then cross-attention
    let mut ps = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut ps, &mut rng, "mha", 4, 2)?;
    let rpb = RelativePositionBias::new(&mut ps, &mut rng, "rpb", 4, 8, 2)?;
    let x = random_tensor(&[2, 6, 4], &mut rng);
    let ctx = random_tensor(&[2, 5, 4], &mut rng);
    let mask = causal_mask::<f64>(6);
    let xc = x.clone();
    let r = check_param_gradients(
        &ps,
        |g| {
            let v = g.constant(xc.clone());
            let bias = rpb.forward(g, 6)?;
            Ok(mha.forward(g, v, v, Some(bias), Some(&mask))?.output)
        },
        H,
    )?;
    let l = check_leaf_gradients_with(
        &ps,
        &[x.clone()],
        |g, v| {
            let bias = rpb.forward(g, 6)?;
            Ok(mha.forward(g, v[0], v[0], Some(bias), Some(&mask))?.output)
        },
        H,
    )?;
    record("self-attention (T5 bias, causal mask)", r, Some(l));
    let r = check_param_gradients(
        &ps,
        |g| {
            let q = g.constant(x.clone());
            let c = g.constant(ctx.clone());
            Ok(mha.forward(g, q, c, None, None)?.output)
        },
        H,
    )?;
    let l = check_leaf_gradients_with(
        &ps,
        &[x, ctx],
        |g, v| Ok(mha.forward(g, v[0], v[1], None, None)?.output),
        H,
    )?;
    record("cross-attention", r.into_iter().filter(|(n, _)| n.starts_with("mha")).collect(), Some(l));

    // feed-forward
    let mut ps = ParamStore::<f64>::new();
    let ffn = FeedForward::new(&mut ps, &mut rng, "ffn", 4, 2);
    let x = random_tensor(&[2, 3, 4], &mut rng);
    let xc = x.clone();
    let r = check_param_gradients(
        &ps,
        |g| {
            let v = g.constant(xc.clone());
            ffn.forward(g, v)
        },
        H,
    )?;
    let l = check_leaf_gradients_with(&ps, &[x], |g, v| ffn.forward(g, v[0]), H)?;
    record("feed-forward", r, Some(l));

    // FiLM
    let mut ps = ParamStore::<f64>::new();
    let film = Film::new(&mut ps, &mut rng, "film", 4);
    let u = random_tensor(&[1, 3, 2, 4], &mut rng);
    let a = random_tensor(&[1, 2, 4], &mut rng);
    let (uc, ac) = (u.clone(), a.clone());
    let r = check_param_gradients(
        &ps,
        |g| {
            let uv = g.constant(uc.clone());
            let av = g.constant(ac.clone());
            film.forward(g, uv, av)
        },
        H,
    )?;
    let l = check_leaf_gradients_with(&ps, &[u, a], |g, v| film.forward(g, v[0], v[1]), H)?;
    record("film", r, Some(l));

    // existence head: linear D -> 1 and the binary cross-entropy
    let mut ps = ParamStore::<f64>::new();
    let head = Linear::new(&mut ps, &mut rng, "exist", 4, 1, true);
    let att = random_tensor(&[2, 4, 4], &mut rng);
    let ac = att.clone();
    let logits = |g: &mut Graph<f64>, x| -> Result<_> {
        let y = head.forward(g, x)?;
        let y = g.reshape(y, &[2, 4])?;
        existence_loss(g, y)
    };
    let r = check_param_gradients(
        &ps,
        |g| {
            let x = g.constant(ac.clone());
            logits(g, x)
        },
        H,
    )?;
    let l = check_leaf_gradients_with(&ps, &[att], |g, v| logits(g, v[0]), H)?;
    record("existence head", r, Some(l));

    // The loss is in dB and tens of units large while some attention
    // gradients are ~1e-5, so at h = 1e-5 rounding noise in the difference
    // dominates (error grows as 1/h). 3e-4 balances it against truncation.
    const H_MODEL: f64 = 3e-4;
    // the whole model through reconstruction plus existence loss
    let (model, ps) = SepTda::new::<f64>(&tiny_config(), 5)?;
    let mix = random_tensor(&[1, 24], &mut rng);
    let refs = random_tensor(&[1, 2, 24], &mut rng);
    let r = check_param_gradients(
        &ps,
        |g| {
            let x = g.constant(mix.clone());
            let out = model.forward(g, x, 2)?;
            let recon = recon_loss_var(g, &out.per_scale, &refs)?;
            let exist = existence_loss(g, out.logits)?;
            g.add(recon, exist)
        },
        H_MODEL,
    )?;
    record("toy model total loss", r, None);
    Ok(results)
}

#[test]
fn c02_gradient_suite() {
    let start = Instant::now();
    let outcome = match gradient_suite() {
        Err(e) => Err(format!("error: {e}")),
        Ok(results) => {
            let elapsed = start.elapsed();
            let worst = results.iter().cloned().fold((String::new(), 0.0), |a, e| if e.1 > a.1 { e } else { a });
            let bad: Vec<_> = results.iter().filter(|(_, e)| !(*e < 1e-4)).collect();
            let summary = format!(
                "{} operations, worst {} at {:.2e}, {:.1}s",
                results.len(),
                worst.0,
                worst.1,
                elapsed.as_secs_f64()
            );
            if !bad.is_empty() {
                Err(format!("relative error >= 1e-4: {bad:?}"))
            } else if elapsed >= Duration::from_secs(120) {
                Err(format!("too slow; {summary}"))
            } else {
                Ok(summary)
            }
        }
    };
    verdict("2 gradient suite", outcome);
}

fn toy_items() -> Result<Vec<EvalItem>> {
    (0..4u64)
        .map(|i| {
            let sources = (0..2u64)
                .map(|k| AudioSignal::new(synthetic_source(4000, 8000, 100 * i + k), 8000))
                .collect::<Result<Vec<_>>>()?;
            let m = simulate_mixture(&MixtureSpec {
                sources,
                levels_db: None,
                seed: i,
            })?;
            Ok(EvalItem {
                id: format!("toy_{i}"),
                mixture: m.mixture,
                references: m.references,
            })
        })
        .collect()
}

#[test]
fn c03_toy_overfit() {
    const TARGET_DB: f64 = 10.0;
    const MAX_STEPS: usize = 5000;
    const EVAL_EVERY: usize = 50;
    let budget = Duration::from_secs(30 * 60);
    let start = Instant::now();
    let items = toy_items().unwrap();
    let config = ModelConfig::toy();
    let (model, mut params) = SepTda::new::<f32>(&config, 0).unwrap();
    let data = Dataset {
        train: items.iter().map(EvalItem::to_training).collect(),
        validation: vec![],
    };
    let cfg = TrainingConfig {
        lr: 1e-3,
        segment_seconds: 0.5,
        patience: 50,
        max_epochs: MAX_STEPS,
        max_steps: Some(MAX_STEPS),
        ..TrainingConfig::default()
    };
    let mut best = f64::NEG_INFINITY;
    let mut reached = None;
    let run = train(&model, &mut params, None, &data, &cfg, |p| {
        let r = p.record;
        if r.val_loss.is_none() && r.step % EVAL_EVERY == 0 {
            let sep = ModelSeparator {
                model: p.model,
                params: p.params,
            };
            let delta = evaluate_known_count(&sep, &items).unwrap().mean_delta_by_count()[&2];
            best = best.max(delta);
            if delta >= TARGET_DB {
                reached = Some(r.step);
                return Flow::Stop;
            }
        }
        if start.elapsed() > budget {
            return Flow::Stop;
        }
        Flow::Continue
    });
    let elapsed = start.elapsed();
    let outcome = (|| {
        let outcome = run.map_err(|e| format!("training failed: {e}"))?;
        let losses: Vec<f64> = outcome.history.iter().filter(|r| r.val_loss.is_none()).map(|r| r.train_loss).collect();
        ensure(losses.iter().all(|l| l.is_finite()), || "non-finite loss in history".into())?;
        let step = reached.ok_or_else(|| {
            format!("best ΔSI-SDR {best:.2} dB after {} steps, {:.0}s", outcome.steps, elapsed.as_secs_f64())
        })?;
        let w = (losses.len() / 5).max(1);
        let head = losses[..w].iter().sum::<f64>() / w as f64;
        let tail = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
        ensure(tail < head, || format!("loss does not trend down: {head:.3} -> {tail:.3}"))?;
        ensure(elapsed <= budget, || format!("exceeded 30 min ({:.0}s)", elapsed.as_secs_f64()))?;
        Ok(format!(
            "ΔSI-SDR ≥ {TARGET_DB} dB at step {step} (≤ {MAX_STEPS}), loss {head:.2} -> {tail:.2}, {:.0}s",
            elapsed.as_secs_f64()
        ))
    })();
    verdict("3 toy overfit", outcome);
}

#[test]
fn c04_si_sdr_oracle() {
    let outcome = (|| {
        let hand = si_sdr(&[1.0f64, -1.0, 0.0], &[1.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
        let expected = 10.0 * 3f64.log10();
        ensure((hand - expected).abs() <= 1e-9, || format!("hand case {hand} vs {expected}"))?;

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst_scaled = 0.0f64;
        for _ in 0..200 {
            let r: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e: Vec<f64> = r.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
            let base = si_sdr(&r, &e).unwrap();
            // power-of-two factors scale every intermediate exactly
            for k in [-6, -1, 1, 5] {
                let f = 2f64.powi(k);
                let scaled: Vec<f64> = e.iter().map(|v| v * f).collect();
                let v = si_sdr(&r, &scaled).unwrap();
                ensure(v == base, || format!("scaling by 2^{k}: {v} vs {base}"))?;
            }
            let alpha = rng.random_range(0.01..100.0);
            let scaled: Vec<f64> = e.iter().map(|v| v * alpha).collect();
            worst_scaled = worst_scaled.max((si_sdr(&r, &scaled).unwrap() - base).abs());
        }
        ensure(worst_scaled <= 1e-9, || format!("arbitrary scale drift {worst_scaled:e} dB"))?;

        let zero = si_sdr(&[0.0f64; 16], &(0..16).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        ensure(zero == -80.0, || format!("all-zero reference gave {zero}"))?;
        Ok(format!(
            "hand case error {:.1e} dB, exact under 2^k scaling, arbitrary scale drift {worst_scaled:.1e} dB, zero reference = {zero} dB",
            (hand - expected).abs()
        ))
    })();
    verdict("4 SI-SDR oracle", outcome);
}

#[test]
fn c05_pit_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let outcome = (|| {
        for c in 2..=5 {
            for trial in 0..1000 {
                let m: Vec<Vec<f64>> = (0..c).map(|_| (0..c).map(|_| rng.random_range(-30.0..30.0)).collect()).collect();
                let h = hungarian_assignment(&m);
                let b = brute_force_assignment(&m);
                ensure(h.permutation == b.permutation && h.score == b.score, || {
                    format!("C={c} trial {trial}: {h:?} vs {b:?}")
                })?;
            }
        }
        let elapsed = start.elapsed();
        ensure(elapsed < Duration::from_secs(60), || format!("took {:.1}s", elapsed.as_secs_f64()))?;
        Ok(format!("4000 matrices, C = 2..5, identical, {:.2}s", elapsed.as_secs_f64()))
    })();
    verdict("5 PIT equivalence", outcome);
}

#[test]
fn c06_segmentation_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let outcome = (|| {
        let mut worst = 0.0f64;
        for trial in 0..200 {
            let t = rng.random_range(1..400usize);
            let k = rng.random_range(2..64usize);
            let d = rng.random_range(1..5usize);
            let x = Tensor::<f32>::new(vec![t, d], (0..t * d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .map_err(|e| e.to_string())?;
            let chunks = segment(&x, k).map_err(|e| format!("T'={t} K={k}: {e}"))?;
            let y = overlap_add(&chunks).map_err(|e| format!("T'={t} K={k}: {e}"))?;
            ensure(y.shape() == x.shape(), || format!("T'={t} K={k}: shape {:?}", y.shape()))?;
            let rel = relative_diff(&y.to_f64_vec(), &x.to_f64_vec());
            ensure(rel <= 1e-6, || format!("trial {trial} T'={t} K={k}: relative error {rel:e}"))?;
            worst = worst.max(rel);
        }
        Ok(format!("200 (T', K) pairs, worst relative error {worst:.1e}"))
    })();
    verdict("6 segmentation round trip", outcome);
}

#[test]
fn c07_tda_causality() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let outcome = (|| {
        let mut worst = 0.0f64;
        for trial in 0..100 {
            let mut ps = ParamStore::<f64>::new();
            let tda = Tda::new(&mut ps, &mut rng, "tda", 8, 2, 2, 2, 4).map_err(|e| e.to_string())?;
            let len = rng.random_range(3..12usize);
            let ctx = random_tensor(&[len, 8], &mut rng);
            let base = tda.attractors(&ps, &ctx, 4).map_err(|e| e.to_string())?;
            let j = rng.random_range(0..5usize);
            let mut perturbed = ps.clone();
            for v in &mut perturbed.value_mut(tda.queries).data_mut()[j * 8..(j + 1) * 8] {
                *v += rng.random_range(-1.0..1.0);
            }
            let after = tda.attractors(&perturbed, &ctx, 4).map_err(|e| e.to_string())?;
            for i in 0..j {
                let a = &base.attractors.data()[i * 8..(i + 1) * 8];
                let b = &after.attractors.data()[i * 8..(i + 1) * 8];
                let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                worst = worst.max(diff);
                ensure(diff <= 1e-12, || format!("trial {trial}: row {i} moved by {diff:e} after perturbing row {j}"))?;
            }
            let own = &base.attractors.data()[j * 8..(j + 1) * 8] != &after.attractors.data()[j * 8..(j + 1) * 8];
            ensure(own, || format!("trial {trial}: row {j} ignores its own query"))?;
        }
        Ok(format!("100 trials, M=2, C=4, largest earlier-row change {worst:.1e}"))
    })();
    verdict("7 TDA causality", outcome);
}

/// Returns fixed estimates and probabilities, counting with the leading-run rule.
struct Fixture {
    estimates: Vec<Vec<f32>>,
    probs: Vec<f64>,
    max_speakers: usize,
}

impl Separator for Fixture {
    fn separate(&self, _mixture: &AudioSignal, speakers: Speakers) -> Result<SeparationResult> {
        let estimated_count = count_speakers(&self.probs, self.max_speakers);
        let c = match speakers {
            Speakers::Known(c) => c,
            Speakers::Auto if estimated_count == 0 => {
                return Err(Error::NoSpeakers {
                    probs: self.probs.clone(),
                })
            }
            Speakers::Auto => estimated_count,
        };
        Ok(SeparationResult {
            estimates: self.estimates[..c].iter().map(|e| AudioSignal::new(e.clone(), 8000).unwrap()).collect(),
            probs: self.probs.clone(),
            estimated_count,
            per_scale: Vec::new(),
        })
    }
}

#[test]
fn c08_counting_protocol() {
    let outcome = (|| {
        let rule: [(&[f64], usize); 7] = [
            (&[0.9, 0.8, 0.3, 0.1], 2),
            (&[0.9, 0.8, 0.7, 0.6, 0.6, 0.6], 5),
            (&[0.2, 0.9, 0.9, 0.9], 0),
            (&[0.9, 0.4, 0.9, 0.9], 1),
            (&[0.9, 0.5, 0.1], 1),
            (&[0.51, 0.51, 0.49], 2),
            (&[0.9, 0.9, 0.9, 0.9], 3),
        ];
        for (probs, expected) in rule {
            let got = count_speakers(probs, if probs.len() == 6 { 5 } else { 3 });
            ensure(got == expected, || format!("{probs:?}: counted {got}, expected {expected}"))?;
        }

        let sources = (0..2u64)
            .map(|k| AudioSignal::new(synthetic_source(400, 8000, 7 + k), 8000))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let mix = simulate_mixture(&MixtureSpec {
            sources,
            levels_db: Some(vec![0.0, 2.5]),
            seed: 0,
        })
        .map_err(|e| e.to_string())?;
        let item = EvalItem {
            id: "fixture".into(),
            mixture: mix.mixture,
            references: mix.references,
        };
        let refs: Vec<Vec<f32>> = item.references.iter().map(|r| r.samples.clone()).collect();
        let mix_sdr: Vec<f64> = refs.iter().map(|r| si_sdr(r, &item.mixture.samples).unwrap()).collect();
        let fixture = |probs: Vec<f64>| Fixture {
            estimates: vec![refs[1].clone(), refs[0].clone(), synthetic_source(400, 8000, 99)],
            probs,
            max_speakers: 3,
        };
        let items = [item.clone()];

        let exact = evaluate_unknown_count(&fixture(vec![0.9, 0.8, 0.3, 0.1]), &items).map_err(|e| e.to_string())?;
        ensure(exact.items[0].estimated == Some(2) && exact.counting_accuracy_by_count()[&2] == 1.0, || {
            format!("exact count: {:?}", exact.items[0])
        })?;
        ensure(exact.items[0].si_sdr == vec![80.0, 80.0], || format!("PIT should undo the swap: {:?}", exact.items[0]))?;

        // over-estimation scores the first C slots only
        let over = evaluate_unknown_count(&fixture(vec![0.9, 0.8, 0.7, 0.1]), &items).map_err(|e| e.to_string())?;
        ensure(over.items[0].estimated == Some(3), || format!("over: {:?}", over.items[0]))?;
        ensure(over.items[0].delta == exact.items[0].delta, || format!("over: {:?}", over.items[0]))?;
        ensure(over.counting_accuracy_by_count()[&2] == 0.0, || "over-estimate counted as correct".into())?;
        let direct = score_estimates(&item, &fixture(vec![]).estimates, Some(3)).map_err(|e| e.to_string())?;
        ensure(direct.delta == exact.items[0].delta, || format!("score_estimates truncation: {direct:?}"))?;

        // under-estimation pads with silence, matched at -80 dB
        let under = evaluate_unknown_count(&fixture(vec![0.9, 0.2, 0.7, 0.1]), &items).map_err(|e| e.to_string())?;
        let u = &under.items[0];
        ensure(u.estimated == Some(1), || format!("under: {u:?}"))?;
        // the single estimate is refs[1], so reference 0 gets the padding
        ensure(u.si_sdr == vec![-80.0, 80.0], || format!("under: {u:?}"))?;
        let pad_delta = -80.0 - mix_sdr[0];
        ensure((u.delta[0] - pad_delta).abs() < 1e-12, || format!("padding Δ {} vs {pad_delta}", u.delta[0]))?;

        // nothing detected: every reference meets silence
        let none = evaluate_unknown_count(&fixture(vec![0.2, 0.9, 0.9, 0.9]), &items).map_err(|e| e.to_string())?;
        ensure(none.items[0].si_sdr == vec![-80.0, -80.0], || format!("none: {:?}", none.items[0]))?;
        ensure(none.confusion()[&(2, 0)] == 1, || "confusion entry for C_hat = 0 missing".into())?;

        let known = evaluate_known_count(&fixture(vec![0.2, 0.9, 0.9, 0.9]), &items).map_err(|e| e.to_string())?;
        ensure(known.items[0].delta == exact.items[0].delta && known.items[0].estimated.is_none(), || {
            format!("known count: {:?}", known.items[0])
        })?;
        Ok("leading-run rule on 7 vectors; exact, over, under (-80 dB pair), zero and known-count scoring".into())
    })();
    verdict("8 counting protocol", outcome);
}

#[test]
fn c09_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let outcome = (|| {
        let perms: [&[usize]; 3] = [&[1, 0, 2], &[2, 0, 1], &[0, 2, 1]];
        let mut ps = ParamStore::<f64>::new();
        let block = TriplePathBlock::new(&mut ps, &mut rng, "tp", &tiny_spec()).map_err(|e| e.to_string())?;
        let mut worst_block = 0.0f64;
        for perm in perms {
            let v = random_tensor(&[2, 3, 5, 3, 4], &mut rng);
            let mut g = Graph::inference(&ps);
            let a = g.constant(v.clone());
            let y = block.forward(&mut g, a).map_err(|e| e.to_string())?;
            let b = g.constant(permute_axis1(&v, perm));
            let yp = block.forward(&mut g, b).map_err(|e| e.to_string())?;
            let expected = permute_axis1(g.value(y), perm);
            worst_block = worst_block.max(relative_diff(g.value(yp).data(), expected.data()));
        }
        ensure(worst_block <= 1e-6, || format!("triple-path block: {worst_block:e}"))?;

        let (model, params) = SepTda::new::<f64>(&tiny_config(), 3).map_err(|e| e.to_string())?;
        let mut worst_model = 0.0f64;
        for perm in perms {
            let mix = random_tensor(&[1, 30], &mut rng);
            let att = random_tensor(&[1, 3, 4], &mut rng);
            let mut g = Graph::inference(&params);
            let x = g.constant(mix);
            let emb = model.embed(&mut g, x).map_err(|e| e.to_string())?;
            let a = g.constant(att.clone());
            let ys = model.separate_from_attractors(&mut g, &emb, a, true).map_err(|e| e.to_string())?;
            let ap = g.constant(permute_axis1(&att, perm));
            let yps = model.separate_from_attractors(&mut g, &emb, ap, true).map_err(|e| e.to_string())?;
            for (y, yp) in ys.into_iter().zip(yps) {
                let expected = permute_axis1(g.value(y), perm);
                worst_model = worst_model.max(relative_diff(g.value(yp).data(), expected.data()));
            }
        }
        ensure(worst_model <= 1e-6, || format!("post-attractor pipeline: {worst_model:e}"))?;
        Ok(format!("triple-path block {worst_block:.1e}, FiLM + triple-path + decoding {worst_model:.1e} (relative)"))
    })();
    verdict("9 speaker-permutation equivariance", outcome);
}

fn history_run(seed: u64) -> Result<Vec<septda::training::LossRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut item = |c: usize| {
        let references: Vec<Vec<f32>> = (0..c).map(|_| (0..80).map(|_| rng.random_range(-0.5f32..0.5)).collect()).collect();
        let mixture = (0..80).map(|t| references.iter().map(|r| r[t]).sum()).collect();
        TrainingItem { mixture, references }
    };
    let data = Dataset {
        train: vec![item(2), item(3), item(2), item(3)],
        validation: vec![item(2)],
    };
    let (model, mut params) = SepTda::new::<f32>(&tiny_config(), 11)?;
    let cfg = TrainingConfig {
        segment_seconds: 0.008,
        max_epochs: 3,
        seed: 4,
        ..TrainingConfig::default()
    };
    Ok(train(&model, &mut params, None, &data, &cfg, |_| Flow::Continue)?.history)
}

#[test]
fn c10_round_trips() {
    let outcome = (|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

        // checkpoint with optimizer state
        let config = ModelConfig::toy();
        let (_, mut params) = SepTda::new::<f32>(&config, 8).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for p in params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-1e-3f32..1e-3));
        }
        let opt = OptimizerState::new(&params, Default::default()).map_err(|e| e.to_string())?;
        let bytes = encode_checkpoint(&config, &params, Some(&opt)).map_err(|e| e.to_string())?;
        let path = dir.path().join("model.ck");
        std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
        let loaded = decode_checkpoint(&std::fs::read(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure(loaded.config() == &config, || "config changed".into())?;
        ensure(params.len() == loaded.params.len(), || "parameter count changed".into())?;
        for ((_, a), (_, b)) in params.iter().zip(loaded.params.iter()) {
            let same = a.name == b.name
                && a.value.shape() == b.value.shape()
                && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(same, || format!("parameter {} differs", a.name))?;
        }
        let again = encode_checkpoint(loaded.config(), &loaded.params, loaded.optimizer.as_ref()).map_err(|e| e.to_string())?;
        ensure(again == bytes, || "re-encoded checkpoint differs".into())?;

        // WAV
        let samples: Vec<f32> = (0..4000)
            .map(|i| if i < 4 { [1.0, -1.0, 0.0, 0.99999][i] } else { rng.random_range(-1.0f32..1.0) })
            .collect();
        let wav = dir.path().join("x.wav");
        write_wav(&wav, &AudioSignal::new(samples.clone(), 8000).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let back = read_wav(&wav).map_err(|e| e.to_string())?;
        ensure(back.sample_rate == 8000 && back.len() == samples.len(), || "WAV header changed".into())?;
        let wav_err = samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
        ensure(wav_err <= 1.0 / 32768.0, || format!("WAV error {wav_err:e} exceeds one step"))?;

        // training history
        let h1 = history_run(12).map_err(|e| e.to_string())?;
        let h2 = history_run(12).map_err(|e| e.to_string())?;
        ensure(!h1.is_empty() && h1 == h2, || "fixed-seed histories differ".into())?;
        ensure(
            h1.iter().zip(&h2).all(|(a, b)| a.train_loss.to_bits() == b.train_loss.to_bits()),
            || "loss bits differ".into(),
        )?;
        Ok(format!(
            "checkpoint bit-identical ({} bytes), WAV max error {:.2} steps, {} history rows identical",
            bytes.len(),
            wav_err * 32768.0,
            h1.len()
        ))
    })();
    verdict("10 round trips", outcome);
}
