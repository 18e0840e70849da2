//! Projected gradient ascent over Karplus-Strong note parameters, with an
//! expectation over sampled rooms and a psychoacoustic masking penalty.

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{rms, AudioClip, FrameSpec};
use crate::corpus::LabeledClip;
use crate::detector::DetectorModel;
use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::{score_clips, DecisionConfig, MetricsReport, ScoredClip};
use crate::psycho::MaskingContext;
use crate::room::{apply_rir_aligned, image_source_rir, rir_on_tape, sample_rooms, ImpulseResponse, RoomDistribution};
use crate::synth::{
    render_on_tape_with_delays, render_sequence, tile_to, Note, Recursion, SynthParams, FREQ_MAX, FREQ_MIN, VOL_MAX,
    VOL_MIN,
};

/// Shape of the initial melody.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelodySpec {
    pub notes: usize,
    pub note_samples: usize,
    pub bpm: f64,
    /// Starting volume of every note.
    pub init_vol_db: f64,
    /// Initial frequencies are log-uniform in this range.
    pub init_freq_min: f64,
    pub init_freq_max: f64,
    pub recursion: Recursion,
}

impl Default for MelodySpec {
    fn default() -> Self {
        Self {
            notes: 64,
            note_samples: 1000,
            bpm: 960.0,
            init_vol_db: 80.0,
            init_freq_min: 50.0,
            init_freq_max: 500.0,
            recursion: Recursion::OutputScaled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Weight of the masking penalty.
    pub alpha: f64,
    pub steps: usize,
    /// Ascent step for frequencies, Hz per RMS-normalized gradient unit.
    pub freq_step_hz: f64,
    /// Ascent step for volumes, dB per RMS-normalized gradient unit.
    pub vol_step_db: f64,
    pub eot_rooms: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_rir: bool,
    pub use_masking: bool,
    /// Apply the room to the perturbation only, leaving speech dry.
    pub split_path: bool,
    /// Draw fresh excitation noise every step instead of once per run.
    pub resample_excitation: bool,
    /// Length of the training crops around each keyword, in samples.
    pub crop_samples: usize,
    pub rooms: RoomDistribution,
    pub melody: MelodySpec,
    pub masking_frames: FrameSpec,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            steps: 500,
            freq_step_hz: 2.0,
            vol_step_db: 0.5,
            eot_rooms: 8,
            batch_size: 4,
            seed: 0,
            use_rir: true,
            use_masking: true,
            split_path: false,
            resample_excitation: false,
            crop_samples: 32_000,
            rooms: RoomDistribution::default(),
            melody: MelodySpec::default(),
            masking_frames: FrameSpec::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if !(self.freq_step_hz >= 0.0 && self.vol_step_db >= 0.0) {
            return Err(Error::Config("step sizes must be non-negative".into()));
        }
        if self.use_rir && self.eot_rooms == 0 {
            return Err(Error::Config("use_rir needs at least one room per step".into()));
        }
        let m = &self.melody;
        if m.notes == 0 || m.note_samples == 0 || !(m.bpm > 0.0) {
            return Err(Error::Config("melody needs notes of positive length".into()));
        }
        if !(FREQ_MIN..=FREQ_MAX).contains(&m.init_freq_min)
            || !(FREQ_MIN..=FREQ_MAX).contains(&m.init_freq_max)
            || m.init_freq_min > m.init_freq_max
            || !(VOL_MIN..=VOL_MAX).contains(&m.init_vol_db)
        {
            return Err(Error::Config("initial melody outside the note bounds".into()));
        }
        self.masking_frames.validate()?;
        if self.crop_samples < self.masking_frames.window_size {
            return Err(Error::Config("crop shorter than one masking frame".into()));
        }
        if self.use_rir {
            self.rooms.validate()?;
        }
        Ok(())
    }
}

/// Random starting melody from the config.
pub fn initial_params(cfg: &AttackConfig) -> Result<SynthParams> {
    let m = &cfg.melody;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = (m.init_freq_min.ln(), m.init_freq_max.ln());
    let notes = (0..m.notes)
        .map(|_| Note {
            freq_hz: if hi > lo { rng.random_range(lo..hi).exp() } else { m.init_freq_min },
            dur_samples: m.note_samples,
            vol_db: m.init_vol_db,
        })
        .collect();
    let params = SynthParams {
        notes,
        bpm: m.bpm,
        fs: cfg.rooms.fs,
        beta: 1.0,
        seeds: (0..m.notes as u64).map(|i| cfg.seed.wrapping_mul(1_000_003).wrapping_add(i)).collect(),
        recursion: m.recursion,
    };
    params.validate()?;
    Ok(params)
}

/// A clean crop the attack is trained against.
#[derive(Debug, Clone)]
pub struct AttackInstance {
    pub audio: AudioClip,
    pub labels: Vec<u8>,
    /// Position of the crop in its clip; the tiled perturbation is read from here.
    pub phase: usize,
    masking: MaskingContext,
}

impl AttackInstance {
    pub fn new(audio: AudioClip, labels: Vec<u8>, phase: usize, spec: &FrameSpec) -> Result<Self> {
        let masking = MaskingContext::new(&audio, spec)?;
        Ok(Self {
            audio,
            labels,
            phase,
            masking,
        })
    }

    pub fn masking(&self) -> &MaskingContext {
        &self.masking
    }
}

/// Cuts one crop per keyword event from `clips`, starting on a frame boundary.
pub fn make_instances(
    clips: &[&LabeledClip],
    model: &DetectorModel,
    cfg: &AttackConfig,
) -> Result<Vec<AttackInstance>> {
    let fe = model.frontend().config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de);
    let mut out = Vec::new();
    for clip in clips {
        let len = clip.audio.len();
        if len < cfg.crop_samples {
            return Err(Error::Data(format!("clip {} shorter than the attack crop", clip.id)));
        }
        for e in &clip.events {
            let centre = (e.onset + e.offset) / 2;
            let jitter = rng.random_range(0..=cfg.crop_samples / 4) as isize - (cfg.crop_samples / 8) as isize;
            let start = (centre as isize - (cfg.crop_samples / 2) as isize + jitter).clamp(0, (len - cfg.crop_samples) as isize)
                as usize;
            let start = start - start % fe.hop;
            let first = start / fe.hop;
            let frames = fe.frame_count(cfg.crop_samples);
            let labels = clip.frame_labels[first..first + frames].to_vec();
            let audio = clip.audio.slice(start, cfg.crop_samples);
            out.push(AttackInstance::new(audio, labels, start, &cfg.masking_frames)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Data("attack corpus contains no keyword events".into()));
    }
    Ok(out)
}

/// Terms of the attack objective at one parameter point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    /// `wake - alpha * masking` (masking term dropped when disabled).
    pub attack: f64,
    pub wake: f64,
    pub masking: f64,
}

/// Objective value with its gradient w.r.t. note frequencies and volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub terms: LossTerms,
    pub freq: Vec<f64>,
    pub vol: Vec<f64>,
}

fn row(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((1, n), v).expect("row shape")
}

fn labels_tensor(labels: &[u8]) -> Array2<f64> {
    Array2::from_shape_fn((labels.len(), 1), |(t, _)| labels[t] as f64)
}

/// Records the detector's mean BCE on `signal` against `labels`.
fn wake_on_tape(tape: &mut Tape, model: &DetectorModel, bound: &crate::detector::BoundModel, signal: Var, labels: &[u8]) -> Result<Var> {
    let feats = model.frontend().extract_on_tape(tape, signal)?;
    let frames = tape.value(feats).nrows();
    if frames != labels.len() {
        return Err(Error::Invariant(format!("{} labels for {frames} feature frames", labels.len())));
    }
    let logits = model.logits_on_tape(tape, bound, feats);
    Ok(tape.bce_with_logits(logits, labels_tensor(labels)))
}

/// Builds the objective on a fresh tape. Returns the tape and the loss,
/// wake, masking and parameter nodes.
fn build_objective(
    model: &DetectorModel,
    instances: &[AttackInstance],
    params: &SynthParams,
    rooms: &[ImpulseResponse],
    cfg: &AttackConfig,
    delays: Option<&[usize]>,
) -> Result<(Tape, [Var; 5])> {
    if instances.is_empty() {
        return Err(Error::Invariant("attack loss needs at least one clip".into()));
    }
    if cfg.use_rir && rooms.is_empty() {
        return Err(Error::Invariant("use_rir is set but no rooms were supplied".into()));
    }
    let mut tape = Tape::new();
    let freqs = tape.param("freq", row(params.freqs()));
    let vols = tape.param("vol", row(params.vols()));
    let delta = render_on_tape_with_delays(&mut tape, params, freqs, vols, delays)?;
    let bound = model.bind(&mut tape, false);

    let no_room = [None];
    let room_list: Vec<Option<&ImpulseResponse>> =
        if cfg.use_rir { rooms.iter().map(Some).collect() } else { no_room.to_vec() };

    let mut wake = None;
    let mut masking = None;
    for inst in instances {
        let len = inst.audio.len();
        let d = tape.tile(delta, len, inst.phase);
        let x = tape.constant(row(inst.audio.samples().to_vec()));
        for room in &room_list {
            let signal = match room {
                None => tape.add(x, d),
                Some(r) if cfg.split_path => {
                    let heard = rir_on_tape(&mut tape, d, r)?;
                    tape.add(x, heard)
                }
                Some(r) => {
                    let mixed = tape.add(x, d);
                    rir_on_tape(&mut tape, mixed, r)?
                }
            };
            let l = wake_on_tape(&mut tape, model, &bound, signal, &inst.labels)?;
            wake = Some(match wake {
                None => l,
                Some(acc) => tape.add(acc, l),
            });
        }
        let m = inst.masking.loss_on_tape(&mut tape, d)?;
        masking = Some(match masking {
            None => m,
            Some(acc) => tape.add(acc, m),
        });
    }
    let n = instances.len() as f64;
    let wake = tape.scale(wake.expect("nonempty"), 1.0 / (n * room_list.len() as f64));
    let masking = tape.scale(masking.expect("nonempty"), 1.0 / n);
    let loss = if cfg.use_masking {
        let penalty = tape.scale(masking, -cfg.alpha);
        tape.add(wake, penalty)
    } else {
        tape.scale(wake, 1.0)
    };
    Ok((tape, [loss, wake, masking, freqs, vols]))
}

/// Mean detector BCE over clips and rooms minus `alpha` times the mean
/// masking loss of the untransformed perturbation.
pub fn attack_loss(
    model: &DetectorModel,
    instances: &[AttackInstance],
    params: &SynthParams,
    rooms: &[ImpulseResponse],
    cfg: &AttackConfig,
) -> Result<LossTerms> {
    attack_loss_frozen(model, instances, params, rooms, cfg, None)
}

/// [`attack_loss`] with the string delays optionally held fixed.
pub fn attack_loss_frozen(
    model: &DetectorModel,
    instances: &[AttackInstance],
    params: &SynthParams,
    rooms: &[ImpulseResponse],
    cfg: &AttackConfig,
    delays: Option<&[usize]>,
) -> Result<LossTerms> {
    let (tape, [loss, wake, masking, _, _]) = build_objective(model, instances, params, rooms, cfg, delays)?;
    Ok(LossTerms {
        attack: tape.scalar_value(loss),
        wake: tape.scalar_value(wake),
        masking: tape.scalar_value(masking),
    })
}

/// Attack loss and its gradient w.r.t. every note frequency and volume.
pub fn attack_loss_and_grad(
    model: &DetectorModel,
    instances: &[AttackInstance],
    params: &SynthParams,
    rooms: &[ImpulseResponse],
    cfg: &AttackConfig,
) -> Result<LossAndGrad> {
    let (tape, [loss, wake, masking, freqs, vols]) = build_objective(model, instances, params, rooms, cfg, None)?;
    let grads = tape.grad(loss)?;
    let n = params.notes.len();
    Ok(LossAndGrad {
        terms: LossTerms {
            attack: tape.scalar_value(loss),
            wake: tape.scalar_value(wake),
            masking: tape.scalar_value(masking),
        },
        freq: grads.wrt(freqs, (1, n)).into_raw_vec_and_offset().0,
        vol: grads.wrt(vols, (1, n)).into_raw_vec_and_offset().0,
    })
}

/// Detector loss on the clean crops under the same rooms, without a perturbation.
pub fn clean_loss(
    model: &DetectorModel,
    instances: &[AttackInstance],
    rooms: &[ImpulseResponse],
    cfg: &AttackConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for inst in instances {
        let heard: Vec<AudioClip> = if cfg.use_rir && !cfg.split_path {
            rooms
                .iter()
                .map(|r| apply_rir_aligned(&inst.audio, r))
                .collect::<Result<_>>()?
        } else {
            vec![inst.audio.clone()]
        };
        let weight = if cfg.use_rir { rooms.len() } else { 1 };
        for clip in &heard {
            let logits = model.logits(&model.frontend().extract(clip)?)?;
            let bce: f64 = logits
                .iter()
                .zip(&inst.labels)
                .map(|(&z, &y)| z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p())
                .sum::<f64>()
                / logits.len() as f64;
            // With split_path the speech is dry, so every room gives the same value.
            total += bce * (weight / heard.len()) as f64;
            count += weight / heard.len();
        }
    }
    Ok(total / count as f64)
}

/// Clips `params` into the note box in place.
pub fn project(params: &mut SynthParams) {
    for n in &mut params.notes {
        n.freq_hz = n.freq_hz.clamp(FREQ_MIN, FREQ_MAX);
        n.vol_db = n.vol_db.clamp(VOL_MIN, VOL_MAX);
    }
}

pub fn is_feasible(params: &SynthParams) -> bool {
    params
        .notes
        .iter()
        .all(|n| (FREQ_MIN..=FREQ_MAX).contains(&n.freq_hz) && (VOL_MIN..=VOL_MAX).contains(&n.vol_db))
}

fn normalized(g: &[f64]) -> Vec<f64> {
    let r = rms(g);
    if r > 0.0 {
        g.iter().map(|v| v / r).collect()
    } else {
        vec![0.0; g.len()]
    }
}

/// One ascent step on RMS-normalized gradients followed by box projection.
/// Durations are untouched.
pub fn pgd_step(params: &SynthParams, freq_grad: &[f64], vol_grad: &[f64], cfg: &AttackConfig) -> Result<SynthParams> {
    let n = params.notes.len();
    if freq_grad.len() != n || vol_grad.len() != n {
        return Err(Error::Invariant(format!("gradient length differs from {n} notes")));
    }
    if let Some(bad) = freq_grad.iter().chain(vol_grad).find(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite attack gradient ({bad})")));
    }
    let mut out = params.clone();
    for ((note, f), v) in out.notes.iter_mut().zip(normalized(freq_grad)).zip(normalized(vol_grad)) {
        note.freq_hz += cfg.freq_step_hz * f;
        note.vol_db += cfg.vol_step_db * v;
    }
    project(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub attack_loss: f64,
    pub wake_loss: f64,
    pub masking_loss: f64,
    pub clean_loss: f64,
}

pub const TRAJECTORY_HEADER: &str = "step,attack_loss,wake_loss,masking_loss,clean_loss";

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut s = format!("{TRAJECTORY_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.attack_loss, r.wake_loss, r.masking_loss, r.clean_loss
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub final_params: SynthParams,
    pub best_params: SynthParams,
    pub best_step: usize,
    pub best_loss: f64,
    pub trajectory: Vec<TrajectoryRow>,
}

/// Rooms for step `step`: a fresh draw of `eot_rooms` per step.
pub fn step_rooms(cfg: &AttackConfig, step: usize) -> Result<Vec<ImpulseResponse>> {
    if !cfg.use_rir {
        return Ok(Vec::new());
    }
    let dist = RoomDistribution {
        count: cfg.eot_rooms,
        seed: cfg.rooms.seed ^ cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(step as u64),
        ..cfg.rooms.clone()
    };
    sample_rooms(&dist)?.iter().map(|r| Ok(image_source_rir(r)?.unit_energy())).collect()
}

/// Runs `cfg.steps` ascent steps from `init` over batches drawn from `pool`.
/// A pool no larger than the batch size is used whole every step; `progress`
/// sees each step's losses and the iterate after its update.
pub fn run_attack_from(
    model: &DetectorModel,
    pool: &[AttackInstance],
    init: SynthParams,
    cfg: &AttackConfig,
    mut progress: impl FnMut(&TrajectoryRow, &SynthParams),
) -> Result<AttackResult> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Data("attack pool is empty".into()));
    }
    if !is_feasible(&init) {
        return Err(Error::Bounds("initial melody outside the note box".into()));
    }
    let mut params = init;
    let mut best: Option<(f64, usize, SynthParams)> = None;
    let mut trajectory = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(step as u64));
        rng.set_stream(7);
        let batch: Vec<AttackInstance> = if pool.len() <= cfg.batch_size {
            pool.to_vec()
        } else {
            sample_indices(&mut rng, pool.len(), cfg.batch_size)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect()
        };
        let rooms = step_rooms(cfg, step)?;
        let mut current = params.clone();
        if cfg.resample_excitation {
            let k = (step as u64 + 1).wrapping_mul(0x1000_0000);
            current.seeds.iter_mut().for_each(|s| *s = s.wrapping_add(k));
        }
        let lg = attack_loss_and_grad(model, &batch, &current, &rooms, cfg)?;
        if !lg.terms.attack.is_finite() {
            return Err(Error::Numeric(format!("attack loss became {} at step {step}", lg.terms.attack)));
        }
        let row = TrajectoryRow {
            step,
            attack_loss: lg.terms.attack,
            wake_loss: lg.terms.wake,
            masking_loss: lg.terms.masking,
            clean_loss: clean_loss(model, &batch, &rooms, cfg)?,
        };
        if best.as_ref().is_none_or(|(l, _, _)| lg.terms.attack > *l) {
            best = Some((lg.terms.attack, step, params.clone()));
        }
        params = pgd_step(&params, &lg.freq, &lg.vol, cfg)?;
        if !is_feasible(&params) {
            return Err(Error::Invariant(format!("iterate left the note box after step {step}")));
        }
        progress(&row, &params);
        trajectory.push(row);
    }
    let (best_loss, best_step, best_params) = best.expect("at least one step");
    Ok(AttackResult {
        final_params: params,
        best_params,
        best_step,
        best_loss,
        trajectory,
    })
}

/// Attack against the keyword crops of `clips` from the configured initial melody.
pub fn run_attack(model: &DetectorModel, clips: &[&LabeledClip], cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let pool = make_instances(clips, model, cfg)?;
    run_attack_from(model, &pool, initial_params(cfg)?, cfg, |_, _| {})
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    RandomMusic,
    RandomSingleNotes,
}

/// Random feasible melody with the same note layout as `template`:
/// independent uniform notes, or one uniform note repeated.
pub fn baseline_params(kind: BaselineKind, template: &SynthParams, seed: u64) -> Result<SynthParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || (rng.random_range(FREQ_MIN..=FREQ_MAX), rng.random_range(VOL_MIN..=VOL_MAX));
    let first = draw();
    let mut out = template.clone();
    for (i, n) in out.notes.iter_mut().enumerate() {
        let (f, v) = match kind {
            BaselineKind::RandomSingleNotes => first,
            BaselineKind::RandomMusic if i == 0 => first,
            BaselineKind::RandomMusic => draw(),
        };
        n.freq_hz = f;
        n.vol_db = v;
    }
    out.seeds = (0..out.notes.len() as u64).map(|i| seed.wrapping_add(i)).collect();
    out.validate()?;
    Ok(out)
}

/// Renders `params` and rescales the waveform to `target_rms` when given.
pub fn render_perturbation(params: &SynthParams, target_rms: Option<f64>) -> Result<AudioClip> {
    let clip = render_sequence(params)?;
    match target_rms {
        None => Ok(clip),
        Some(t) => {
            let r = clip.rms();
            if !(r > 0.0) {
                return Err(Error::Degenerate("cannot rescale a silent perturbation".into()));
            }
            Ok(clip.scaled(t / r))
        }
    }
}

/// How a perturbation reaches the microphone during evaluation.
#[derive(Debug, Clone, Default)]
pub struct Playback<'a> {
    /// Looped from the start of each clip; `None` evaluates clean audio.
    pub perturbation: Option<&'a AudioClip>,
    /// Clip `i` is heard through room `i mod len`; empty means no room.
    pub rooms: &'a [ImpulseResponse],
    pub split_path: bool,
}

/// What the microphone hears for `clip` under `playback`.
pub fn heard_audio(clip: &AudioClip, index: usize, playback: &Playback) -> Result<AudioClip> {
    let room = (!playback.rooms.is_empty()).then(|| &playback.rooms[index % playback.rooms.len()]);
    let delta = playback.perturbation.map(|p| tile_to(p, clip.len()));
    let add = |a: &AudioClip, b: &AudioClip| -> Result<AudioClip> {
        AudioClip::new(a.samples().iter().zip(b.samples()).map(|(x, y)| x + y).collect(), a.sample_rate())
    };
    match (delta, room) {
        (None, None) => Ok(clip.clone()),
        (None, Some(_)) if playback.split_path => Ok(clip.clone()),
        (None, Some(r)) => apply_rir_aligned(clip, r),
        (Some(d), None) => add(clip, &d),
        (Some(d), Some(r)) if playback.split_path => add(clip, &apply_rir_aligned(&d, r)?),
        (Some(d), Some(r)) => apply_rir_aligned(&add(clip, &d)?, r),
    }
}

/// Posteriors of `model` for every clip heard under `playback`.
pub fn score_playback(model: &DetectorModel, clips: &[&LabeledClip], playback: &Playback) -> Result<Vec<ScoredClip>> {
    clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let heard = heard_audio(&c.audio, i, playback)?;
            Ok(ScoredClip {
                posteriors: model.posteriors_for_clip(&heard)?,
                truths: c.truths(),
                duration_s: c.audio.duration_secs(),
            })
        })
        .collect()
}

/// Event-level metrics of `model` on `clips` heard under `playback`.
pub fn evaluate_playback(
    model: &DetectorModel,
    clips: &[&LabeledClip],
    playback: &Playback,
    decision: &DecisionConfig,
) -> Result<MetricsReport> {
    let scored = score_playback(model, clips, playback)?;
    Ok(score_clips(&scored, decision, model.timing()))
}

/// Held-out rooms for evaluation, drawn independently of the training rooms.
pub fn heldout_rooms(dist: &RoomDistribution) -> Result<Vec<ImpulseResponse>> {
    sample_rooms(dist)?.iter().map(|r| Ok(image_source_rir(r)?.unit_energy())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::WORKING_RATE;
    use crate::detector::ArchConfig;
    use crate::diff::relative_error;
    use crate::features::{FeatureFrontend, FrontendConfig};
    use crate::room::RoomConfig;
    use crate::synth::derive_state;

    fn tiny_model(seed: u64) -> DetectorModel {
        let arch = ArchConfig {
            feature_width: 12,
            feature_layers: 1,
            bottleneck: 6,
            context: 1,
            classifier_width: 10,
            classifier_layers: 1,
            ..ArchConfig::default()
        };
        DetectorModel::new(FeatureFrontend::new(FrontendConfig::default()).unwrap(), arch, seed).unwrap()
    }

    fn instance(len: usize, seed: u64) -> AttackInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<f64> = (0..len)
            .map(|n| 0.1 * (n as f64 * 0.07).sin() + rng.random_range(-0.02..0.02))
            .collect();
        let audio = AudioClip::new(samples, WORKING_RATE).unwrap();
        let frames = FrontendConfig::default().frame_count(len);
        let labels = (0..frames).map(|t| u8::from(t > frames / 3 && t < 2 * frames / 3)).collect();
        AttackInstance::new(audio, labels, 123, &FrameSpec::default()).unwrap()
    }

    fn melody(notes: &[(f64, f64)]) -> SynthParams {
        let mut p = SynthParams::from_notes(notes, 1.0, 640.0, WORKING_RATE, 5).unwrap();
        p.recursion = Recursion::OutputScaled;
        p
    }

    fn small_cfg() -> AttackConfig {
        AttackConfig {
            use_rir: false,
            batch_size: 1,
            crop_samples: 4800,
            ..AttackConfig::default()
        }
    }

    fn room(order: usize) -> ImpulseResponse {
        image_source_rir(&RoomConfig {
            dims: [4.0, 3.5, 2.7],
            source: [1.0, 1.2, 1.5],
            mic: [2.9, 2.1, 1.1],
            absorption: [0.4; 6],
            max_order: order,
            c: crate::room::SPEED_OF_SOUND,
            fs: WORKING_RATE,
        })
        .unwrap()
        .unit_energy()
    }

    #[test]
    fn pgd_step_projects_onto_box() {
        let cfg = AttackConfig::default();
        let p = melody(&[(440.0, 50.0), (4180.0, 99.8)]);
        let same = pgd_step(&p, &[0.0, 0.0], &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(same, p);

        let big = AttackConfig {
            freq_step_hz: 5000.0,
            vol_step_db: 120.0,
            ..cfg.clone()
        };
        let q = pgd_step(&p, &[1.0, 1.0], &[1.0, 1.0], &big).unwrap();
        assert!(q.notes.iter().all(|n| n.freq_hz == FREQ_MAX && n.vol_db == VOL_MAX));
        assert_eq!(q.notes[0].dur_samples, p.notes[0].dur_samples);
        let q = pgd_step(&p, &[-1.0, -1.0], &[-1.0, -1.0], &big).unwrap();
        assert!(q.notes.iter().all(|n| n.freq_hz == FREQ_MIN && n.vol_db == VOL_MIN));

        let err = pgd_step(&p, &[f64::NAN, 0.0], &[0.0, 0.0], &cfg).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn step_is_rms_normalized_per_group() {
        let cfg = AttackConfig::default();
        let p = melody(&[(440.0, 50.0), (660.0, 50.0)]);
        let q = pgd_step(&p, &[3.0, -4.0], &[1e-9, 0.0], &cfg).unwrap();
        let r = (12.5f64).sqrt();
        assert!((q.notes[0].freq_hz - (440.0 + 2.0 * 3.0 / r)).abs() < 1e-12);
        assert!((q.notes[1].freq_hz - (660.0 - 2.0 * 4.0 / r)).abs() < 1e-12);
        assert!((q.notes[0].vol_db - (50.0 + 0.5 * 2f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn loss_reductions() {
        let model = tiny_model(1);
        let inst = [instance(4800, 2)];
        let p = melody(&[(330.0, 70.0), (523.0, 75.0)]);
        let cfg = small_cfg();

        // alpha = 0 without rooms is the detector loss on x + delta.
        let plain = AttackConfig { alpha: 0.0, ..cfg.clone() };
        let l = attack_loss(&model, &inst, &p, &[], &plain).unwrap();
        let delta = render_sequence(&p).unwrap();
        let heard: Vec<f64> = inst[0]
            .audio
            .samples()
            .iter()
            .enumerate()
            .map(|(n, x)| x + delta.samples()[(n + inst[0].phase) % delta.len()])
            .collect();
        let logits = model
            .logits(&model.frontend().extract(&AudioClip::new(heard, WORKING_RATE).unwrap()).unwrap())
            .unwrap();
        let direct: f64 = logits
            .iter()
            .zip(&inst[0].labels)
            .map(|(&z, &y)| z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / logits.len() as f64;
        assert!((l.attack - direct).abs() < 1e-12);
        assert!((l.attack - l.wake).abs() < 1e-15);

        // Subtracting a non-negative penalty never raises the objective.
        let weighted = attack_loss(&model, &inst, &p, &[], &AttackConfig { alpha: 0.3, ..cfg.clone() }).unwrap();
        assert!(l.attack >= weighted.attack);
        assert!((weighted.attack - (weighted.wake - 0.3 * weighted.masking)).abs() < 1e-12);

        // Silent perturbation: clean loss and no masking violation.
        let silent = melody(&[(330.0, 0.0), (523.0, 0.0)]);
        let s = attack_loss(&model, &inst, &silent, &[], &cfg).unwrap();
        let c = clean_loss(&model, &inst, &[], &cfg).unwrap();
        assert!((s.wake - c).abs() < 1e-6, "{} vs {c}", s.wake);
        assert_eq!(s.masking, 0.0);
    }

    #[test]
    fn duplicate_rooms_match_single_room() {
        let model = tiny_model(3);
        let inst = [instance(4800, 4)];
        let p = melody(&[(200.0, 70.0), (900.0, 70.0)]);
        let cfg = AttackConfig {
            use_rir: true,
            ..small_cfg()
        };
        let r = room(2);
        let one = attack_loss(&model, &inst, &p, &[r.clone()], &cfg).unwrap();
        let two = attack_loss(&model, &inst, &p, &[r.clone(), r], &cfg).unwrap();
        assert!((one.attack - two.attack).abs() < 1e-12);
        let err = attack_loss(&model, &inst, &p, &[], &cfg).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn label_length_mismatch_is_rejected() {
        let model = tiny_model(1);
        let mut inst = instance(4800, 2);
        inst.labels.pop();
        let err = attack_loss(&model, &[inst], &melody(&[(440.0, 60.0)]), &[], &small_cfg()).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = tiny_model(7);
        let inst = [instance(4800, 8)];
        let p = melody(&[(311.3, 72.0), (587.9, 68.0), (1201.7, 75.0)]);
        let cfg = AttackConfig {
            use_rir: true,
            alpha: 0.05,
            ..small_cfg()
        };
        let rooms = [room(1)];
        let lg = attack_loss_and_grad(&model, &inst, &p, &rooms, &cfg).unwrap();
        let delays: Vec<usize> = p
            .notes
            .iter()
            .zip(&p.seeds)
            .map(|(n, &s)| derive_state(n, p.fs, p.beta, s).unwrap().delay)
            .collect();
        let eval = |q: &SynthParams| {
            attack_loss_frozen(&model, &inst, q, &rooms, &cfg, Some(&delays))
                .unwrap()
                .attack
        };
        for i in 0..p.notes.len() {
            let step = |df: f64, dv: f64| {
                let mut q = p.clone();
                q.notes[i].freq_hz += df;
                q.notes[i].vol_db += dv;
                eval(&q)
            };
            let nv = (step(0.0, 1e-4) - step(0.0, -1e-4)) / 2e-4;
            assert!(relative_error(lg.vol[i], nv) < 1e-3, "vol {i}: {} vs {nv}", lg.vol[i]);
            let nf = (step(1e-4, 0.0) - step(-1e-4, 0.0)) / 2e-4;
            assert!(relative_error(lg.freq[i], nf) < 1e-2, "freq {i}: {} vs {nf}", lg.freq[i]);
        }
    }

    #[test]
    fn zero_step_single_iteration_returns_initial_melody() {
        let model = tiny_model(2);
        let pool = [instance(4800, 3)];
        let p = melody(&[(440.0, 60.0), (880.0, 60.0)]);
        let cfg = AttackConfig {
            steps: 1,
            freq_step_hz: 0.0,
            vol_step_db: 0.0,
            ..small_cfg()
        };
        let res = run_attack_from(&model, &pool, p.clone(), &cfg, |_, _| {}).unwrap();
        assert_eq!(res.final_params, p);
        assert_eq!(res.best_params, p);
        assert_eq!(res.trajectory.len(), 1);
        assert_eq!(res.trajectory[0].step, 0);
    }

    #[test]
    fn best_iterate_never_below_start_and_run_is_deterministic() {
        let model = tiny_model(4);
        let pool = [instance(4800, 5)];
        let p = melody(&[(300.0, 60.0), (450.0, 60.0), (700.0, 60.0)]);
        let cfg = AttackConfig {
            steps: 50,
            freq_step_hz: 5.0,
            vol_step_db: 1.0,
            ..small_cfg()
        };
        let res = run_attack_from(&model, &pool, p.clone(), &cfg, |_, _| {}).unwrap();
        let first = res.trajectory[0].attack_loss;
        let mut running = f64::NEG_INFINITY;
        for row in &res.trajectory {
            let next = running.max(row.attack_loss);
            assert!(next >= running);
            running = next;
        }
        assert_eq!(res.best_loss, running);
        assert!(res.best_loss >= first);
        assert_eq!(res.trajectory[res.best_step].attack_loss, res.best_loss);
        let again = run_attack_from(&model, &pool, p, &cfg, |_, _| {}).unwrap();
        assert_eq!(again.final_params, res.final_params);
        assert_eq!(again.trajectory, res.trajectory);
    }

    #[test]
    fn baselines_are_seeded_and_feasible() {
        let template = melody(&[(440.0, 60.0); 6]);
        let a = baseline_params(BaselineKind::RandomMusic, &template, 11).unwrap();
        assert_eq!(a, baseline_params(BaselineKind::RandomMusic, &template, 11).unwrap());
        assert_ne!(a, baseline_params(BaselineKind::RandomMusic, &template, 12).unwrap());
        assert!(is_feasible(&a));
        let freqs = a.freqs();
        assert!(freqs.windows(2).any(|w| w[0] != w[1]));
        let s = baseline_params(BaselineKind::RandomSingleNotes, &template, 11).unwrap();
        assert!(is_feasible(&s));
        assert!(s.notes.iter().all(|n| n.freq_hz == s.notes[0].freq_hz && n.vol_db == s.notes[0].vol_db));
        assert!(s.notes.iter().zip(&template.notes).all(|(a, b)| a.dur_samples == b.dur_samples));
    }

    #[test]
    fn corpus_without_keywords_is_a_data_error() {
        let model = tiny_model(1);
        let clip = LabeledClip {
            id: "c".into(),
            audio: AudioClip::zeros(40_000, WORKING_RATE),
            events: vec![],
            placements: vec![],
            frame_labels: vec![0; FrontendConfig::default().frame_count(40_000)],
        };
        let err = run_attack(&model, &[&clip], &small_cfg()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn playback_modes() {
        let clip = instance(4800, 9).audio;
        assert_eq!(heard_audio(&clip, 0, &Playback::default()).unwrap(), clip);
        let d = AudioClip::new(vec![0.5, -0.5, 0.25], WORKING_RATE).unwrap();
        let out = heard_audio(&clip, 0, &Playback { perturbation: Some(&d), ..Default::default() }).unwrap();
        for n in 0..10 {
            assert!((out.samples()[n] - clip.samples()[n] - d.samples()[n % 3]).abs() < 1e-15);
        }
        let rooms = [room(1)];
        let dry = heard_audio(&clip, 0, &Playback { rooms: &rooms, split_path: true, ..Default::default() }).unwrap();
        assert_eq!(dry, clip);
        let wet = heard_audio(&clip, 0, &Playback { rooms: &rooms, ..Default::default() }).unwrap();
        assert_eq!(wet.len(), clip.len());
        assert_ne!(wet, clip);
    }
}
