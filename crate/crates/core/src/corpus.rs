//! Labeled ten-second mixtures of keyword and non-keyword speech over
//! background noise, augmentation, and leakage-free splits.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav_at, resample_ratio, write_wav, AudioClip, Window};
use crate::error::{Error, Result};
use crate::features::FrontendConfig;
use crate::metrics::TruthInterval;
use crate::speechgen::{self, Speaker};
use crate::synth::{render_sequence, tile_to, Note, Recursion, SynthParams, FREQ_MAX, FREQ_MIN};

/// Speed x tempo x gain grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    pub speeds: Vec<f64>,
    pub tempos: Vec<f64>,
    pub gains_db: Vec<f64>,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            speeds: vec![0.9, 0.95, 1.0, 1.05, 1.1],
            tempos: vec![0.9, 1.1],
            gains_db: vec![-3.0, 3.0],
        }
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self {
            speeds: vec![1.0],
            tempos: vec![1.0],
            gains_db: vec![0.0],
        }
    }

    pub fn multiplicity(&self) -> usize {
        self.speeds.len() * self.tempos.len() * self.gains_db.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: &[f64]| !v.is_empty() && v.iter().all(|f| *f > 0.0 && f.is_finite());
        if !ok(&self.speeds) || !ok(&self.tempos) || self.gains_db.is_empty() || self.gains_db.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("augmentation factors must be positive and non-empty".into()));
        }
        Ok(())
    }
}

const GRAIN_SECS: f64 = 0.03;

/// Fixed-grain overlap-add time stretch (50% overlap, Hann grains). A tempo
/// above 1 shortens the signal. Each grain may slide by up to a quarter
/// grain to line up with the waveform already written (WSOLA), which keeps
/// periodic signals from cancelling and so preserves pitch.
pub fn time_stretch(samples: &[f64], tempo: f64, sample_rate: u32) -> Vec<f64> {
    if tempo == 1.0 {
        return samples.to_vec();
    }
    let grain = ((GRAIN_SECS * sample_rate as f64).round() as usize).max(4) & !1;
    let hop_out = grain / 2;
    let hop_in = ((hop_out as f64 * tempo).round() as usize).max(1);
    let slack = grain / 4;
    if samples.len() < grain + slack {
        return Vec::new();
    }
    let last_start = samples.len() - grain;
    let frames = 1 + (last_start - slack.min(last_start)) / hop_in;
    let window = Window::Hann.coefficients(grain);
    let mut out = vec![0.0; (frames - 1) * hop_out + grain];
    let mut prev_src = 0usize;
    for f in 0..frames {
        let nominal = f * hop_in;
        let src = if f == 0 {
            0
        } else {
            // The natural continuation of the previous grain starts at
            // prev_src + hop_out; pick the nearby start that best matches it.
            let target = (prev_src + hop_out).min(last_start);
            let lo = nominal.saturating_sub(slack);
            let hi = (nominal + slack).min(last_start);
            (lo..=hi)
                .max_by(|&a, &b| {
                    let score = |c: usize| -> f64 {
                        (0..hop_out).map(|i| samples[c + i] * samples[target + i]).sum()
                    };
                    score(a).total_cmp(&score(b)).then(b.cmp(&a))
                })
                .unwrap_or(nominal.min(last_start))
        };
        let dst = f * hop_out;
        for i in 0..grain {
            out[dst + i] += samples[src + i] * window[i];
        }
        prev_src = src;
    }
    out
}

/// All `multiplicity` variants of one utterance, in speed-major order.
pub fn augment(clip: &AudioClip, spec: &AugmentationSpec, min_len: usize) -> Result<Vec<AudioClip>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.multiplicity());
    for &speed in &spec.speeds {
        let sped = if speed == 1.0 {
            clip.samples().to_vec()
        } else {
            resample_ratio(clip.samples(), 1.0 / speed)
        };
        for &tempo in &spec.tempos {
            let stretched = time_stretch(&sped, tempo, clip.sample_rate());
            if stretched.len() < min_len {
                return Err(Error::Degenerate(format!(
                    "speed {speed} tempo {tempo} leaves {} samples (< {min_len})",
                    stretched.len()
                )));
            }
            for &g in &spec.gains_db {
                let gain = 10f64.powf(g / 20.0);
                let samples = if g == 0.0 {
                    stretched.clone()
                } else {
                    stretched.iter().map(|v| v * gain).collect()
                };
                out.push(AudioClip::new(samples, clip.sample_rate())?);
            }
        }
    }
    Ok(out)
}

/// Train/test membership at raw-utterance granularity.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn split_of(&self, raw_id: &str) -> Option<Split> {
        if self.train.iter().any(|r| r == raw_id) {
            Some(Split::Train)
        } else if self.test.iter().any(|r| r == raw_id) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn merge(mut self, other: SplitManifest) -> Self {
        self.train.extend(other.train);
        self.test.extend(other.test);
        self
    }

    /// Hard check that no raw ID is in both splits.
    pub fn assert_disjoint(&self) -> Result<()> {
        if let Some(dup) = self.train.iter().find(|r| self.test.contains(r)) {
            return Err(Error::Data(format!("raw utterance {dup} appears in both splits")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Shuffles `ids` under `seed` and puts `round(ratio * n)` of them in train.
pub fn make_splits(ids: &[String], ratio: f64, seed: u64) -> Result<SplitManifest> {
    if ids.len() < 2 {
        return Err(Error::Config("need at least two raw utterances to split".into()));
    }
    let n_train = (ratio * ids.len() as f64).round() as usize;
    if !(0.0..=1.0).contains(&ratio) || n_train == 0 || n_train == ids.len() {
        return Err(Error::Config(format!(
            "ratio {ratio} leaves an empty split for {} utterances",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(n_train);
    let m = SplitManifest { train: shuffled, test };
    m.assert_disjoint()?;
    Ok(m)
}

/// Keyword interval in samples, `[onset, offset)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordEvent {
    pub onset: usize,
    pub offset: usize,
}

/// One utterance placed in a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub raw_id: String,
    pub variant: usize,
    pub positive: bool,
    pub offset: usize,
    pub len: usize,
    pub gain: f64,
}

/// A short source utterance with its augmented variants.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub raw_id: String,
    pub positive: bool,
    pub variants: Vec<AudioClip>,
}

#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub id: String,
    pub audio: AudioClip,
    pub events: Vec<KeywordEvent>,
    pub placements: Vec<Placement>,
    pub frame_labels: Vec<u8>,
}

impl LabeledClip {
    pub fn raw_ids(&self) -> Vec<&str> {
        self.placements.iter().map(|p| p.raw_id.as_str()).collect()
    }

    pub fn truths(&self) -> Vec<TruthInterval> {
        let fs = self.audio.sample_rate() as f64;
        self.events
            .iter()
            .map(|e| TruthInterval {
                start: e.onset as f64 / fs,
                end: e.offset as f64 / fs,
            })
            .collect()
    }
}

/// 1 exactly on frames whose span overlaps an event.
pub fn frame_labels(len: usize, events: &[KeywordEvent], frontend: &FrontendConfig) -> Vec<u8> {
    (0..frontend.frame_count(len))
        .map(|t| {
            let (a, b) = frontend.frame_span(t);
            u8::from(events.iter().any(|e| e.onset < b && a < e.offset))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub positives: usize,
    pub negatives: usize,
    /// Gain range applied to each placed utterance, dB.
    pub gain_db: (f64, f64),
    /// Silence kept between neighbouring placements, samples.
    pub min_gap: usize,
    pub max_tries: usize,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            positives: 3,
            negatives: 3,
            gain_db: (-6.0, 0.0),
            min_gap: 4000,
            max_tries: 2000,
        }
    }
}

/// Places utterances at random non-overlapping offsets on `background`.
pub fn synthesize_mixture(
    id: &str,
    background: &AudioClip,
    positives: &[&Utterance],
    negatives: &[&Utterance],
    spec: &MixtureSpec,
    frontend: &FrontendConfig,
    rng: &mut impl Rng,
) -> Result<LabeledClip> {
    if spec.positives > 0 && positives.is_empty() {
        return Err(Error::Data("no positive utterances to place".into()));
    }
    if spec.negatives > 0 && negatives.is_empty() {
        return Err(Error::Data("no negative utterances to place".into()));
    }
    let mut picks: Vec<(&Utterance, usize)> = Vec::new();
    for (pool, count) in [(positives, spec.positives), (negatives, spec.negatives)] {
        for _ in 0..count {
            let u = pool[rng.random_range(0..pool.len())];
            let v = rng.random_range(0..u.variants.len());
            picks.push((u, v));
        }
    }
    picks.shuffle(rng);
    let n = background.len();
    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut audio = background.clone();
    let mut placements = Vec::new();
    for (u, v) in picks {
        let clip = &u.variants[v];
        if clip.sample_rate() != background.sample_rate() {
            return Err(Error::Invariant("utterance and background rates differ".into()));
        }
        let len = clip.len();
        let mut placed = None;
        for _ in 0..spec.max_tries {
            if len + spec.min_gap > n {
                break;
            }
            let offset = rng.random_range(0..=n - len);
            let free = taken
                .iter()
                .all(|&(a, b)| offset + len + spec.min_gap <= a || b + spec.min_gap <= offset);
            if free {
                placed = Some(offset);
                break;
            }
        }
        let offset = placed.ok_or_else(|| {
            Error::Placement(format!(
                "cannot place {} ({len} samples) without overlap in clip {id}",
                u.raw_id
            ))
        })?;
        taken.push((offset, offset + len));
        let gain = 10f64.powf(rng.random_range(spec.gain_db.0..=spec.gain_db.1) / 20.0);
        audio = crate::audio::mix(&audio, clip, offset, gain)?;
        placements.push(Placement {
            raw_id: u.raw_id.clone(),
            variant: v,
            positive: u.positive,
            offset,
            len,
            gain,
        });
    }
    placements.sort_by_key(|p| p.offset);
    let events: Vec<KeywordEvent> = placements
        .iter()
        .filter(|p| p.positive)
        .map(|p| KeywordEvent {
            onset: p.offset,
            offset: p.offset + p.len,
        })
        .collect();
    Ok(LabeledClip {
        id: id.to_string(),
        frame_labels: frame_labels(audio.len(), &events, frontend),
        audio,
        events,
        placements,
    })
}

/// Background noise draw: spectral exponent and RMS ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub exponent: (f64, f64),
    pub rms: (f64, f64),
    /// Plucked-string tracks mixed into training backgrounds.
    #[serde(default)]
    pub tones: ToneSpec,
}

/// A tonal track is either one repeated pitch or a random melody, drawn
/// uniformly over the synthesizer's range, at a log-uniform RMS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToneSpec {
    /// Fraction of training clips that get a track; test clips never do.
    /// Off by default: a tone-hardened detector also shrugs off the attack.
    pub prob: f64,
    pub rms: (f64, f64),
    pub notes: usize,
    pub note_samples: usize,
}

impl Default for ToneSpec {
    fn default() -> Self {
        Self {
            prob: 0.0,
            rms: (0.005, 0.15),
            notes: 64,
            note_samples: 1000,
        }
    }
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        Self {
            exponent: (0.0, 2.0),
            rms: (0.003, 0.02),
            tones: ToneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub sample_rate: u32,
    pub clip_secs: f64,
    pub train_clips: usize,
    pub test_clips: usize,
    /// Procedurally generated raw utterances (ignored for directories given below).
    pub keyword_utterances: usize,
    pub negative_utterances: usize,
    pub split_ratio: f64,
    pub mixture: MixtureSpec,
    pub augmentation: AugmentationSpec,
    pub background: BackgroundSpec,
    /// Optional directories of WAVs replacing the procedural sources.
    #[serde(default)]
    pub keyword_dir: Option<PathBuf>,
    #[serde(default)]
    pub negative_dir: Option<PathBuf>,
    #[serde(default)]
    pub background_dir: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sample_rate: crate::audio::WORKING_RATE,
            clip_secs: 10.0,
            train_clips: 200,
            test_clips: 60,
            keyword_utterances: 48,
            negative_utterances: 48,
            split_ratio: 0.8,
            mixture: MixtureSpec::default(),
            augmentation: AugmentationSpec::default(),
            background: BackgroundSpec::default(),
            keyword_dir: None,
            negative_dir: None,
            background_dir: None,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.augmentation.validate()?;
        if !(self.clip_secs > 0.0) || self.train_clips == 0 || self.test_clips == 0 {
            return Err(Error::Config("clip length and clip counts must be positive".into()));
        }
        if self.mixture.gain_db.0 > self.mixture.gain_db.1
            || self.background.rms.0 > self.background.rms.1
            || self.background.exponent.0 > self.background.exponent.1
        {
            return Err(Error::Config("inverted range in mixture or background spec".into()));
        }
        let t = &self.background.tones;
        if !(0.0..=1.0).contains(&t.prob) || !(t.rms.0 > 0.0 && t.rms.0 <= t.rms.1) || t.notes == 0 || t.note_samples == 0 {
            return Err(Error::Config("tone track needs prob in [0,1], a positive rms range and notes".into()));
        }
        Ok(())
    }

    fn clip_len(&self) -> usize {
        (self.clip_secs * self.sample_rate as f64).round() as usize
    }
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no WAV files in {}", dir.display())));
    }
    Ok(files)
}

fn raw_sources(cfg: &CorpusConfig, positive: bool) -> Result<Vec<(String, AudioClip)>> {
    let (dir, count, prefix) = if positive {
        (&cfg.keyword_dir, cfg.keyword_utterances, "kw")
    } else {
        (&cfg.negative_dir, cfg.negative_utterances, "neg")
    };
    if let Some(dir) = dir {
        return wav_files(dir)?
            .into_iter()
            .map(|p| {
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((format!("{prefix}-{stem}"), read_wav_at(&p, cfg.sample_rate)?))
            })
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(if positive { 1 } else { 2 });
    Ok((0..count)
        .map(|i| {
            let speaker = Speaker::random(&mut rng);
            let seed = rng.random();
            let clip = if positive {
                speechgen::keyword_utterance(&speaker, cfg.sample_rate, seed)
            } else {
                let phones = speechgen::random_negative_phones(&mut rng);
                speechgen::synthesize(&phones, &speaker, cfg.sample_rate, seed)
            };
            (format!("{prefix}-{i:03}"), clip)
        })
        .collect())
}

/// One manifest row per mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub id: String,
    pub split: Split,
    pub file: String,
    pub len: usize,
    pub events: Vec<KeywordEvent>,
    pub placements: Vec<Placement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceEntry {
    pub raw_id: String,
    pub positive: bool,
    pub split: Split,
    pub variants: usize,
}

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub config: CorpusConfig,
    pub splits: SplitManifest,
    pub utterances: Vec<UtteranceEntry>,
    pub clips: Vec<ClipEntry>,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_FORMAT {
            return Err(Error::Compatibility(format!(
                "manifest format {} (expected {MANIFEST_FORMAT})",
                self.format_version
            )));
        }
        self.splits.assert_disjoint()?;
        for c in &self.clips {
            for p in &c.placements {
                if self.splits.split_of(&p.raw_id) != Some(c.split) {
                    return Err(Error::Data(format!(
                        "clip {} ({:?}) uses {} from another split",
                        c.id, c.split, p.raw_id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub clips: Vec<LabeledClip>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&LabeledClip> {
        self.manifest
            .clips
            .iter()
            .zip(&self.clips)
            .filter(|(e, _)| e.split == split)
            .map(|(_, c)| c)
            .collect()
    }

    /// Writes `manifest.json` and one WAV per clip under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let clip_dir = dir.join("clips");
        std::fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
        for (entry, clip) in self.manifest.clips.iter().zip(&self.clips) {
            write_wav(&clip.audio, dir.join(&entry.file))?;
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, frontend: &FrontendConfig) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CorpusManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("invalid manifest {}: {e}", path.display())))?;
        manifest.validate()?;
        let clips = manifest
            .clips
            .iter()
            .map(|e| {
                let audio = read_wav_at(dir.join(&e.file), frontend.sample_rate)?;
                if audio.len() != e.len {
                    return Err(Error::Data(format!("{} has {} samples, manifest says {}", e.file, audio.len(), e.len)));
                }
                Ok(LabeledClip {
                    id: e.id.clone(),
                    frame_labels: frame_labels(audio.len(), &e.events, frontend),
                    audio,
                    events: e.events.clone(),
                    placements: e.placements.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, clips })
    }
}

fn background_clip(cfg: &CorpusConfig, files: &[AudioClip], rng: &mut ChaCha8Rng) -> AudioClip {
    let len = cfg.clip_len();
    let rms = rng.random_range(cfg.background.rms.0..=cfg.background.rms.1);
    if files.is_empty() {
        let exponent = rng.random_range(cfg.background.exponent.0..=cfg.background.exponent.1);
        return speechgen::colored_noise(len, exponent, rms, cfg.sample_rate, rng.random());
    }
    let src = &files[rng.random_range(0..files.len())];
    let start = if src.len() > len { rng.random_range(0..src.len() - len) } else { 0 };
    // Loop short backgrounds to the full clip length.
    let samples: Vec<f64> = (0..len).map(|i| src.samples()[(start + i) % src.len()]).collect();
    let clip = AudioClip::new(samples, cfg.sample_rate).expect("finite background");
    let cur = clip.rms();
    if cur > 0.0 {
        clip.scaled(rms / cur)
    } else {
        clip
    }
}

fn tone_track(spec: &ToneSpec, len: usize, fs: u32, rng: &mut ChaCha8Rng) -> Result<AudioClip> {
    let single = rng.random_bool(0.5);
    let mut draw = || rng.random_range(FREQ_MIN..=FREQ_MAX);
    let first = draw();
    let notes: Vec<Note> = (0..spec.notes)
        .map(|i| Note {
            freq_hz: if single || i == 0 { first } else { draw() },
            dur_samples: spec.note_samples,
            vol_db: 80.0,
        })
        .collect();
    let seed: u64 = rng.random();
    let params = SynthParams {
        seeds: (0..notes.len() as u64).map(|i| seed.wrapping_add(i)).collect(),
        notes,
        bpm: 60.0 * fs as f64 / spec.note_samples as f64,
        fs,
        beta: 1.0,
        recursion: Recursion::OutputScaled,
    };
    let track = render_sequence(&params)?;
    let rms = (rng.random_range(spec.rms.0.ln()..=spec.rms.1.ln())).exp();
    let cur = track.rms();
    if !(cur > 0.0) {
        return Err(Error::Degenerate("silent tone track".into()));
    }
    Ok(tile_to(&track, len).scaled(rms / cur))
}

/// Deterministic corpus construction under `cfg.seed`.
pub fn build_corpus(cfg: &CorpusConfig, frontend: &FrontendConfig) -> Result<Corpus> {
    cfg.validate()?;
    if frontend.sample_rate != cfg.sample_rate {
        return Err(Error::Config("corpus and frontend sample rates differ".into()));
    }
    let mut utterances = Vec::new();
    for positive in [true, false] {
        for (raw_id, clip) in raw_sources(cfg, positive)? {
            utterances.push(Utterance {
                variants: augment(&clip, &cfg.augmentation, frontend.frame_len)?,
                raw_id,
                positive,
            });
        }
    }
    let ids = |pos: bool| -> Vec<String> {
        utterances.iter().filter(|u| u.positive == pos).map(|u| u.raw_id.clone()).collect()
    };
    let splits = make_splits(&ids(true), cfg.split_ratio, cfg.seed)?
        .merge(make_splits(&ids(false), cfg.split_ratio, cfg.seed.wrapping_add(1))?);
    let backgrounds: Vec<AudioClip> = match &cfg.background_dir {
        Some(dir) => wav_files(dir)?
            .iter()
            .map(|p| read_wav_at(p, cfg.sample_rate))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let mut clips = Vec::new();
    let mut entries = Vec::new();
    let plan = [(Split::Train, cfg.train_clips), (Split::Test, cfg.test_clips)];
    let mut index = 0u64;
    for (split, count) in plan {
        let pool = |pos: bool| -> Vec<&Utterance> {
            utterances
                .iter()
                .filter(|u| u.positive == pos && splits.split_of(&u.raw_id) == Some(split))
                .collect()
        };
        let (pos, neg) = (pool(true), pool(false));
        for i in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1000 + index);
            index += 1;
            let name = match split {
                Split::Train => format!("train-{i:04}"),
                Split::Test => format!("test-{i:04}"),
            };
            let mut bg = background_clip(cfg, &backgrounds, &mut rng);
            if split == Split::Train {
                // Separate stream, so tone settings leave the rest of the clip unchanged.
                let mut trng = ChaCha8Rng::seed_from_u64(cfg.seed);
                trng.set_stream(500_000 + index);
                if trng.random_bool(cfg.background.tones.prob) {
                    let track = tone_track(&cfg.background.tones, bg.len(), cfg.sample_rate, &mut trng)?;
                    bg = crate::audio::mix(&bg, &track, 0, 1.0)?;
                }
            }
            let clip = synthesize_mixture(&name, &bg, &pos, &neg, &cfg.mixture, frontend, &mut rng)?;
            entries.push(ClipEntry {
                file: format!("clips/{name}.wav"),
                id: name,
                split,
                len: clip.audio.len(),
                events: clip.events.clone(),
                placements: clip.placements.clone(),
            });
            clips.push(clip);
        }
    }
    let manifest = CorpusManifest {
        format_version: MANIFEST_FORMAT,
        config: cfg.clone(),
        utterances: utterances
            .iter()
            .map(|u| UtteranceEntry {
                raw_id: u.raw_id.clone(),
                positive: u.positive,
                split: splits.split_of(&u.raw_id).expect("every utterance is split"),
                variants: u.variants.len(),
            })
            .collect(),
        splits,
        clips: entries,
    };
    manifest.validate()?;
    Ok(Corpus { manifest, clips })
}
