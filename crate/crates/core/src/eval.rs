//! Mixture simulation, scoring and the unknown-count evaluation protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{SepTda, SeparationResult, Speakers};
use crate::numerics::ParamStore;
use crate::objectives::{pit_assign, si_sdr};
use crate::signal::{quantize, read_wav, write_wav, AudioSignal};
use crate::training::TrainingItem;

/// Peak amplitude of each normalized source and the ceiling of the mixture.
pub const PEAK: f64 = 0.9;
/// Relative levels are drawn from `[0, MAX_LEVEL_DB]` against the first source.
pub const MAX_LEVEL_DB: f64 = 5.0;

/// A voiced, harmonic test signal with vibrato and a syllable-rate envelope.
pub fn synthetic_source(len: usize, sample_rate: u32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let f0 = rng.random_range(90.0..260.0);
    let vib_rate = rng.random_range(3.0..7.0);
    let vib_depth = rng.random_range(0.01..0.05);
    let syl_rate = rng.random_range(2.0..5.0);
    let syl_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let harmonics: Vec<(f64, f64)> = (1..=8)
        .map(|k| (rng.random_range(0.5..1.0) / k as f64, rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / sr;
        let f = f0 * (1.0 + vib_depth * (std::f64::consts::TAU * vib_rate * t).sin());
        phase += std::f64::consts::TAU * f / sr;
        let env = 0.2 + 0.8 * (0.5 - 0.5 * (std::f64::consts::TAU * syl_rate * t + syl_phase).cos());
        let v: f64 = harmonics
            .iter()
            .enumerate()
            .filter(|(k, _)| f * (*k as f64 + 1.0) < sr / 2.0)
            .map(|(k, &(a, p))| a * ((k as f64 + 1.0) * phase + p).sin())
            .sum();
        out.push((0.4 * env * v) as f32);
    }
    out
}

/// Sources and how to combine them.
#[derive(Clone, Debug)]
pub struct MixtureSpec {
    pub sources: Vec<AudioSignal>,
    /// Levels in dB relative to the first source; drawn from the seed when
    /// absent.
    pub levels_db: Option<Vec<f64>>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedMixture {
    pub mixture: AudioSignal,
    /// Level-scaled sources; they sum to the mixture exactly.
    pub references: Vec<AudioSignal>,
    pub levels_db: Vec<f64>,
}

/// Peak-normalizes each source to [`PEAK`], applies the relative gains,
/// truncates to the shortest source and sums. If the sum would exceed the
/// peak ceiling, every reference is scaled down by the same factor first.
pub fn simulate_mixture(spec: &MixtureSpec) -> Result<SimulatedMixture> {
    let first = spec
        .sources
        .first()
        .ok_or_else(|| Error::Config("a mixture needs at least one source".into()))?;
    let sr = first.sample_rate;
    for s in &spec.sources {
        s.require_rate(sr)?;
        if s.is_empty() {
            return Err(Error::Shape("source signal is empty".into()));
        }
    }
    let c = spec.sources.len();
    let levels = match &spec.levels_db {
        Some(l) if l.len() != c => {
            return Err(Error::Config(format!("{} levels given for {c} sources", l.len())));
        }
        Some(l) => l.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            (0..c)
                .map(|i| if i == 0 { 0.0 } else { rng.random_range(0.0..=MAX_LEVEL_DB) })
                .collect()
        }
    };
    let len = spec.sources.iter().map(|s| s.len()).min().unwrap();
    let scaled: Vec<Vec<f64>> = spec
        .sources
        .iter()
        .zip(&levels)
        .map(|(s, &db)| {
            let x = &s.samples[..len];
            let peak = x.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
            let norm = if peak > 0.0 { PEAK / peak } else { 1.0 };
            let gain = norm * 10f64.powf(db / 20.0);
            x.iter().map(|&v| v as f64 * gain).collect()
        })
        .collect();
    let mix_peak = (0..len)
        .map(|t| scaled.iter().map(|s| s[t]).sum::<f64>().abs())
        .fold(0.0, f64::max);
    let global = if mix_peak > PEAK { PEAK / mix_peak } else { 1.0 };
    let references: Vec<Vec<f32>> = scaled
        .iter()
        .map(|s| s.iter().map(|&v| (v * global) as f32).collect())
        .collect();
    let mixture = sum_signals(&references, len);
    Ok(SimulatedMixture {
        mixture: AudioSignal::new(mixture, sr)?,
        references: references
            .into_iter()
            .map(|r| AudioSignal::new(r, sr))
            .collect::<Result<_>>()?,
        levels_db: levels,
    })
}

/// Sample-wise sum in source order.
fn sum_signals(signals: &[Vec<f32>], len: usize) -> Vec<f32> {
    (0..len).map(|t| signals.iter().fold(0.0f32, |acc, s| acc + s[t])).collect()
}

/// SI-SDR improvement of `estimate` over the unprocessed mixture.
pub fn delta_si_sdr(mixture: &[f32], reference: &[f32], estimate: &[f32]) -> Result<f64> {
    Ok(si_sdr(reference, estimate)? - si_sdr(reference, mixture)?)
}

/// Anything that can separate a mixture, such as a trained model or a test fixture.
pub trait Separator {
    fn separate(&self, mixture: &AudioSignal, speakers: Speakers) -> Result<SeparationResult>;
}

/// A model with its parameters.
pub struct ModelSeparator<'a> {
    pub model: &'a SepTda,
    pub params: &'a ParamStore<f32>,
}

impl Separator for ModelSeparator<'_> {
    fn separate(&self, mixture: &AudioSignal, speakers: Speakers) -> Result<SeparationResult> {
        self.model.separate(self.params, mixture, speakers, false)
    }
}

/// A mixture with its references.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub mixture: AudioSignal,
    pub references: Vec<AudioSignal>,
}

impl EvalItem {
    pub fn speakers(&self) -> usize {
        self.references.len()
    }

    pub fn to_training(&self) -> TrainingItem {
        TrainingItem {
            mixture: self.mixture.samples.clone(),
            references: self.references.iter().map(|r| r.samples.clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemScore {
    pub id: String,
    pub speakers: usize,
    /// `None` under known-count evaluation.
    pub estimated: Option<usize>,
    /// ΔSI-SDR per reference after PIT alignment.
    pub delta: Vec<f64>,
    /// SI-SDR per reference after PIT alignment.
    pub si_sdr: Vec<f64>,
}

impl ItemScore {
    pub fn mean_delta(&self) -> f64 {
        self.delta.iter().sum::<f64>() / self.delta.len() as f64
    }
}

/// Keeps the first `C` estimates or pads with silence, aligns by PIT and
/// scores every reference.
pub fn score_estimates(item: &EvalItem, estimates: &[Vec<f32>], estimated: Option<usize>) -> Result<ItemScore> {
    let c = item.speakers();
    let t = item.mixture.len();
    let mut est: Vec<Vec<f64>> = estimates.iter().take(c).map(|e| e.iter().map(|&v| v as f64).collect()).collect();
    if est.iter().any(|e| e.len() != t) {
        return Err(Error::Shape("estimate length differs from the mixture".into()));
    }
    est.resize(c, vec![0.0; t]);
    let refs: Vec<Vec<f64>> = item.references.iter().map(|r| r.samples.iter().map(|&v| v as f64).collect()).collect();
    let mix: Vec<f64> = item.mixture.samples.iter().map(|&v| v as f64).collect();
    let assignment = pit_assign(&refs, &est)?;
    let mut delta = Vec::with_capacity(c);
    let mut scores = Vec::with_capacity(c);
    for (r, &e) in assignment.permutation.iter().enumerate() {
        let s = si_sdr(&refs[r], &est[e])?;
        scores.push(s);
        delta.push(s - si_sdr(&refs[r], &mix)?);
    }
    Ok(ItemScore {
        id: item.id.clone(),
        speakers: c,
        estimated,
        delta,
        si_sdr: scores,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// Sorted by id.
    pub items: Vec<ItemScore>,
    pub known_count: bool,
}

impl EvalReport {
    fn new(mut items: Vec<ItemScore>, known_count: bool) -> Self {
        items.sort_by(|a, b| a.id.cmp(&b.id));
        Self { items, known_count }
    }

    /// Mean ΔSI-SDR over every reference of every item with `C` speakers.
    pub fn mean_delta_by_count(&self) -> BTreeMap<usize, f64> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for it in &self.items {
            let e = acc.entry(it.speakers).or_default();
            e.0 += it.delta.iter().sum::<f64>();
            e.1 += it.delta.len();
        }
        acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()
    }

    /// Fraction of items with `Ĉ = C`, per `C`. Empty under known-count evaluation.
    pub fn counting_accuracy_by_count(&self) -> BTreeMap<usize, f64> {
        let mut acc: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for it in &self.items {
            if let Some(e) = it.estimated {
                let a = acc.entry(it.speakers).or_default();
                a.0 += usize::from(e == it.speakers);
                a.1 += 1;
            }
        }
        acc.into_iter().map(|(c, (ok, n))| (c, ok as f64 / n as f64)).collect()
    }

    /// Counts of `(C, Ĉ)` pairs.
    pub fn confusion(&self) -> BTreeMap<(usize, usize), usize> {
        let mut m = BTreeMap::new();
        for it in &self.items {
            if let Some(e) = it.estimated {
                *m.entry((it.speakers, e)).or_insert(0) += 1;
            }
        }
        m
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let acc = self.counting_accuracy_by_count();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for it in &self.items {
            *counts.entry(it.speakers).or_insert(0) += 1;
        }
        if self.known_count {
            writeln!(s, "C\titems\tmean_delta_si_sdr_db").unwrap();
        } else {
            writeln!(s, "C\titems\tmean_delta_si_sdr_db\tcounting_accuracy").unwrap();
        }
        for (c, mean) in self.mean_delta_by_count() {
            if self.known_count {
                writeln!(s, "{c}\t{}\t{mean:.3}", counts[&c]).unwrap();
            } else {
                writeln!(s, "{c}\t{}\t{mean:.3}\t{:.1}%", counts[&c], 100.0 * acc.get(&c).copied().unwrap_or(0.0)).unwrap();
            }
        }
        let confusion = self.confusion();
        if !confusion.is_empty() {
            writeln!(s, "\nC\tC_hat\titems").unwrap();
            for ((c, e), n) in confusion {
                writeln!(s, "{c}\t{e}\t{n}").unwrap();
            }
        }
        s
    }
}

/// Separates with the true speaker count.
pub fn evaluate_known_count(separator: &dyn Separator, items: &[EvalItem]) -> Result<EvalReport> {
    let scores = items
        .iter()
        .map(|it| {
            let r = separator.separate(&it.mixture, Speakers::Known(it.speakers()))?;
            let est: Vec<Vec<f32>> = r.estimates.into_iter().map(|e| e.samples).collect();
            score_estimates(it, &est, None)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(scores, true))
}

/// Separates with an estimated speaker count. An item where no speaker is
/// detected is scored against all-silent estimates.
pub fn evaluate_unknown_count(separator: &dyn Separator, items: &[EvalItem]) -> Result<EvalReport> {
    let scores = items
        .iter()
        .map(|it| {
            let (est, c_hat) = match separator.separate(&it.mixture, Speakers::Auto) {
                Ok(r) => (r.estimates.into_iter().map(|e| e.samples).collect(), r.estimated_count),
                Err(Error::NoSpeakers { .. }) => (Vec::new(), 0),
                Err(e) => return Err(e),
            };
            score_estimates(it, &est, Some(c_hat))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(scores, false))
}

/// One manifest line: a mixture and its references, paths relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub mixture: PathBuf,
    pub references: Vec<PathBuf>,
}

/// Tab-separated lines of `mixture<TAB>ref1<TAB>ref2...`; `#` lines are comments.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::Manifest(format!(
                "line {}: expected a mixture path and at least one reference path",
                n + 1
            )));
        }
        out.push(ManifestEntry {
            mixture: PathBuf::from(fields[0]),
            references: fields[1..].iter().map(PathBuf::from).collect(),
        });
    }
    if out.is_empty() {
        return Err(Error::Manifest("manifest lists no items".into()));
    }
    Ok(out)
}

/// Reads a manifest and every WAV it names. Item ids are the mixture paths.
pub fn load_manifest(path: &Path) -> Result<Vec<EvalItem>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text)?
        .into_iter()
        .map(|e| {
            let mixture = read_wav(base.join(&e.mixture))?;
            let references = e
                .references
                .iter()
                .map(|r| {
                    let a = read_wav(base.join(r))?;
                    a.require_rate(mixture.sample_rate)?;
                    if a.len() != mixture.len() {
                        return Err(Error::Manifest(format!(
                            "reference {} has {} samples, mixture has {}",
                            r.display(),
                            a.len(),
                            mixture.len()
                        )));
                    }
                    Ok(a)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalItem {
                id: e.mixture.to_string_lossy().into_owned(),
                mixture,
                references,
            })
        })
        .collect()
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

/// Rounds to the 16-bit grid so that what is written is exactly what sums.
fn on_pcm_grid(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| quantize(v) as f32 / 32768.0).collect()
}

/// Writes `n` simulated `count`-speaker mixtures drawn from the WAV files in
/// `sources` into `out/mix`, `out/ref` and `out/manifest.tsv`.
///
/// References are stored on the 16-bit grid and the stored mixture is their
/// exact sum, so the files also satisfy `Σ references = mixture`.
pub fn simulate_dataset(sources: &Path, count: usize, n: usize, seed: u64, out: &Path) -> Result<PathBuf> {
    if count == 0 || n == 0 {
        return Err(Error::Config("speaker count and item count must be positive".into()));
    }
    let files = wav_files(sources)?;
    if files.len() < count {
        return Err(Error::Manifest(format!(
            "{} holds {} WAV files, {count} are needed per mixture",
            sources.display(),
            files.len()
        )));
    }
    let signals = files.iter().map(read_wav).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out.join("mix"))?;
    std::fs::create_dir_all(out.join("ref"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = format!("# {n} mixtures of {count} speakers, seed {seed}\n");
    for i in 0..n {
        let picks = sample(&mut rng, files.len(), count).into_vec();
        let spec = MixtureSpec {
            sources: picks.iter().map(|&p| signals[p].clone()).collect(),
            levels_db: None,
            seed: rng.random(),
        };
        let sim = simulate_mixture(&spec)?;
        let sr = sim.mixture.sample_rate;
        let refs: Vec<Vec<f32>> = sim.references.iter().map(|r| on_pcm_grid(&r.samples)).collect();
        let mixture = sum_signals(&refs, sim.mixture.len());
        let id = format!("item_{i:04}");
        let mix_rel = format!("mix/{id}.wav");
        write_wav(out.join(&mix_rel), &AudioSignal::new(mixture, sr)?)?;
        let mut line = mix_rel;
        let mut comment = format!("# {id}");
        for (k, (r, (&p, db))) in refs.into_iter().zip(picks.iter().zip(&sim.levels_db)).enumerate() {
            let rel = format!("ref/{id}_s{}.wav", k + 1);
            write_wav(out.join(&rel), &AudioSignal::new(r, sr)?)?;
            line.push('\t');
            line.push_str(&rel);
            let src = files[p].file_name().unwrap().to_string_lossy();
            write!(comment, "\t{src} {db:.3} dB").unwrap();
        }
        writeln!(manifest, "{comment}\n{line}").unwrap();
    }
    let path = out.join("manifest.tsv");
    std::fs::write(&path, manifest)?;
    Ok(path)
}

/// Writes `n` synthetic sources of `seconds` each as `src_XXXX.wav`.
pub fn write_synthetic_sources(out: &Path, n: usize, seconds: f64, sample_rate: u32, seed: u64) -> Result<()> {
    if !(seconds > 0.0) || n == 0 {
        return Err(Error::Config("source count and duration must be positive".into()));
    }
    std::fs::create_dir_all(out)?;
    let len = (seconds * sample_rate as f64).round() as usize;
    for i in 0..n {
        let x = synthetic_source(len, sample_rate, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        write_wav(out.join(format!("src_{i:04}.wav")), &AudioSignal::new(x, sample_rate)?)?;
    }
    Ok(())
}
