//! Differentiable Karplus-Strong plucked-string synthesis.
//!
//! A note is a Gaussian excitation of `D = floor(fs / fr)` samples followed by
//! the interpolated delay-line recursion
//!
//! ```text
//! y[n] = gamma * v_out * (w * y[n - D] + (1 - w) * y[n - D - 1]) / 2
//! ```
//!
//! Frequencies and volumes are differentiable; durations are fixed. The
//! integer delay `D` is treated as piecewise constant by the backward pass.

use std::f64::consts::{LN_10, PI};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{vol_gain, AudioClip, WORKING_RATE};
use crate::diff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lowest piano key (A0).
pub const FREQ_MIN: f64 = 27.5;
/// Highest piano key (C8).
pub const FREQ_MAX: f64 = 4186.0;
pub const VOL_MIN: f64 = 0.0;
pub const VOL_MAX: f64 = 100.0;

const OMEGA_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Note {
    pub freq_hz: f64,
    pub dur_samples: usize,
    pub vol_db: f64,
}

impl Note {
    pub fn validate(&self) -> Result<()> {
        if !(FREQ_MIN..=FREQ_MAX).contains(&self.freq_hz) {
            return Err(Error::Bounds(format!(
                "frequency {} Hz outside [{FREQ_MIN}, {FREQ_MAX}]",
                self.freq_hz
            )));
        }
        if !(VOL_MIN..=VOL_MAX).contains(&self.vol_db) {
            return Err(Error::Bounds(format!(
                "volume {} dB outside [{VOL_MIN}, {VOL_MAX}]",
                self.vol_db
            )));
        }
        if self.dur_samples == 0 {
            return Err(Error::Bounds("note duration must be positive".into()));
        }
        Ok(())
    }
}

/// Where the note volume enters the string model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recursion {
    /// `v_out` multiplies the excitation and every recursion step, with the
    /// extra halving of the interpolated taps.
    #[default]
    Verbatim,
    /// `v_out` scales the finished note once; the loop filter is the
    /// unit-gain interpolator `gamma * (w * y[n-D] + (1-w) * y[n-D-1])`.
    OutputScaled,
}

/// The attack artifact: note list plus everything needed to re-render it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub notes: Vec<Note>,
    pub bpm: f64,
    pub fs: u32,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub recursion: Recursion,
}

fn default_beta() -> f64 {
    1.0
}

impl SynthParams {
    /// `notes` each lasting `beats` beats at `bpm`, with seeds `seed, seed+1, ...`.
    pub fn from_notes(
        freqs_and_vols: &[(f64, f64)],
        beats: f64,
        bpm: f64,
        fs: u32,
        seed: u64,
    ) -> Result<Self> {
        let dur = (beats * 60.0 / bpm * fs as f64).round() as usize;
        let params = Self {
            notes: freqs_and_vols
                .iter()
                .map(|&(freq_hz, vol_db)| Note {
                    freq_hz,
                    dur_samples: dur,
                    vol_db,
                })
                .collect(),
            bpm,
            fs,
            beta: 1.0,
            seeds: (0..freqs_and_vols.len() as u64).map(|i| seed.wrapping_add(i)).collect(),
            recursion: Recursion::Verbatim,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.notes.is_empty() {
            return Err(Error::Invariant("synth params need at least one note".into()));
        }
        if self.seeds.len() != self.notes.len() {
            return Err(Error::Invariant(format!(
                "{} seeds for {} notes",
                self.seeds.len(),
                self.notes.len()
            )));
        }
        if self.fs == 0 || !(self.bpm > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Invariant("fs, bpm must be positive and beta non-negative".into()));
        }
        self.notes.iter().try_for_each(Note::validate)
    }

    pub fn len_samples(&self) -> usize {
        self.notes.iter().map(|n| n.dur_samples).sum()
    }

    pub fn freqs(&self) -> Vec<f64> {
        self.notes.iter().map(|n| n.freq_hz).collect()
    }

    pub fn vols(&self) -> Vec<f64> {
        self.notes.iter().map(|n| n.vol_db).collect()
    }

    pub fn with_freqs_vols(&self, freqs: &[f64], vols: &[f64]) -> Self {
        let mut out = self.clone();
        for ((n, &f), &v) in out.notes.iter_mut().zip(freqs).zip(vols) {
            n.freq_hz = f;
            n.vol_db = v;
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            notes: vec![Note {
                freq_hz: 440.0,
                dur_samples: WORKING_RATE as usize / 4,
                vol_db: 70.0,
            }],
            bpm: 120.0,
            fs: WORKING_RATE,
            beta: 1.0,
            seeds: vec![0],
            recursion: Recursion::Verbatim,
        }
    }
}

/// Derived per-note quantities plus their derivatives w.r.t. frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsNoteState {
    pub delay: usize,
    pub omega: f64,
    pub gamma: f64,
    pub p_v: f64,
    pub v_output: f64,
    pub beta: f64,
    pub n_d: f64,
    pub seed: u64,
    pub d_omega_d_freq: f64,
    pub d_gamma_d_freq: f64,
    pub d_pv_d_freq: f64,
    pub amplitude: f64,
}

/// Frequency-specific volume factor of a string at `freq` Hz.
pub fn volume_factor(freq: f64) -> f64 {
    let l = freq.ln() - 3.0;
    1.0 + 0.8 * (l / 5.5) * (PI / 5.3 * l).cos()
}

fn volume_factor_derivative(freq: f64) -> f64 {
    let l = freq.ln() - 3.0;
    let c = PI / 5.3;
    0.8 / 5.5 * ((c * l).cos() - l * c * (c * l).sin()) / freq
}

/// Computes the string state for `note`, rejecting out-of-range frequencies.
pub fn derive_state(note: &Note, fs: u32, beta: f64, seed: u64) -> Result<KsNoteState> {
    note.validate()?;
    derive_state_unchecked(note, fs, beta, seed)
}

/// [`derive_state`] without the frequency/volume box check.
pub fn derive_state_unchecked(note: &Note, fs: u32, beta: f64, seed: u64) -> Result<KsNoteState> {
    let fr = note.freq_hz;
    if !(fr > 1.0) || fs == 0 {
        return Err(Error::Bounds(format!("frequency {fr} Hz cannot be synthesized")));
    }
    let period = fs as f64 / fr;
    let delay = period.floor() as usize;
    if delay < 2 {
        return Err(Error::Bounds(format!("delay {delay} below 2 samples at {fr} Hz")));
    }
    let frac = period - delay as f64;
    let (omega, d_omega_d_freq) = if frac < OMEGA_EPS {
        (OMEGA_EPS, 0.0)
    } else if frac > 1.0 - OMEGA_EPS {
        (1.0 - OMEGA_EPS, 0.0)
    } else {
        (frac, -(fs as f64) / (fr * fr))
    };

    let n_d = note.dur_samples as f64 * fr / fs as f64;
    let ln_fr = fr.ln();
    let raw_gamma = (4.0 / ln_fr).powf(1.0 / n_d);
    let (gamma, d_gamma_d_freq) = if raw_gamma >= 1.0 {
        (1.0, 0.0)
    } else {
        let dlog = -((4.0f64).ln() - ln_fr.ln()) / (n_d * fr) - 1.0 / (n_d * fr * ln_fr);
        (raw_gamma, raw_gamma * dlog)
    };

    let p_v = volume_factor(fr);
    let amplitude = vol_gain(note.vol_db);
    Ok(KsNoteState {
        delay,
        omega,
        gamma,
        p_v,
        v_output: p_v * amplitude,
        beta,
        n_d,
        seed,
        d_omega_d_freq,
        d_gamma_d_freq,
        d_pv_d_freq: volume_factor_derivative(fr),
        amplitude,
    })
}

/// Gaussian excitation `y[0..D] ~ N(0, beta)`, deterministic in the seed.
pub fn pluck_init(state: &KsNoteState) -> Vec<f64> {
    if state.beta == 0.0 {
        return vec![0.0; state.delay];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
    let normal = Normal::new(0.0, state.beta.sqrt()).expect("finite variance");
    (0..state.delay).map(|_| normal.sample(&mut rng)).collect()
}

/// Runs the recursion in place over `buf`, whose first `delay` entries hold
/// the (scaled) excitation.
fn run_recursion(buf: &mut [f64], delay: usize, gain: f64, omega: f64) {
    for n in delay..buf.len() {
        let a = buf[n - delay];
        let b = if n > delay { buf[n - delay - 1] } else { 0.0 };
        buf[n] = gain * (omega * a + (1.0 - omega) * b);
    }
}

fn loop_gain(state: &KsNoteState, recursion: Recursion) -> f64 {
    match recursion {
        Recursion::Verbatim => state.gamma * state.v_output / 2.0,
        Recursion::OutputScaled => state.gamma,
    }
}

/// Renders one note of `note.dur_samples` samples.
pub fn render_note(note: &Note, state: &KsNoteState, fs: u32, recursion: Recursion) -> Result<AudioClip> {
    let excitation = pluck_init(state);
    let samples = render_with_excitation(note, state, &excitation, recursion)?;
    AudioClip::new(samples, fs)
}

fn render_with_excitation(
    note: &Note,
    state: &KsNoteState,
    excitation: &[f64],
    recursion: Recursion,
) -> Result<Vec<f64>> {
    let d = note.dur_samples;
    if d <= state.delay {
        return Err(Error::NoteTooShort {
            dur: d,
            delay: state.delay,
        });
    }
    let mut buf = vec![0.0; d];
    match recursion {
        Recursion::Verbatim => {
            for (b, e) in buf.iter_mut().zip(excitation) {
                *b = state.v_output * e;
            }
            run_recursion(&mut buf, state.delay, loop_gain(state, recursion), state.omega);
        }
        Recursion::OutputScaled => {
            buf[..state.delay].copy_from_slice(&excitation[..state.delay]);
            run_recursion(&mut buf, state.delay, state.gamma, state.omega);
            buf.iter_mut().for_each(|b| *b *= state.v_output);
        }
    }
    Ok(buf)
}

/// Forward record of a rendered sequence, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct SynthTape {
    notes: Vec<NoteRecord>,
    recursion: Recursion,
}

#[derive(Debug, Clone)]
struct NoteRecord {
    note: Note,
    state: KsNoteState,
    excitation: Vec<f64>,
    output: Vec<f64>,
    offset: usize,
}

impl SynthTape {
    pub fn note_count(&self) -> usize {
        self.notes.len()
    }

    pub fn states(&self) -> impl Iterator<Item = &KsNoteState> {
        self.notes.iter().map(|r| &r.state)
    }
}

/// Renders every note back-to-back; the result is `delta_theta`.
pub fn render_sequence(params: &SynthParams) -> Result<AudioClip> {
    Ok(render_sequence_with_tape(params)?.0)
}

pub fn render_sequence_with_tape(params: &SynthParams) -> Result<(AudioClip, SynthTape)> {
    render_with_delays(params, None)
}

/// Renders with the integer delays forced to `delays` (one per note) instead
/// of `floor(fs / fr)`. Used to evaluate the frozen-delay objective that the
/// analytic frequency gradient differentiates.
pub fn render_with_delays(
    params: &SynthParams,
    delays: Option<&[usize]>,
) -> Result<(AudioClip, SynthTape)> {
    params.validate()?;
    if let Some(d) = delays {
        if d.len() != params.notes.len() {
            return Err(Error::Invariant("one frozen delay per note required".into()));
        }
    }
    let mut samples = Vec::with_capacity(params.len_samples());
    let mut records = Vec::with_capacity(params.notes.len());
    for (i, (note, &seed)) in params.notes.iter().zip(&params.seeds).enumerate() {
        let mut state = derive_state(note, params.fs, params.beta, seed)?;
        if let Some(d) = delays {
            freeze_delay(&mut state, note, params.fs, d[i]);
        }
        let excitation = pluck_init(&state);
        let output = render_with_excitation(note, &state, &excitation, params.recursion)?;
        records.push(NoteRecord {
            note: *note,
            state,
            excitation,
            output: output.clone(),
            offset: samples.len(),
        });
        samples.extend(output);
    }
    Ok((
        AudioClip::new(samples, params.fs)?,
        SynthTape {
            notes: records,
            recursion: params.recursion,
        },
    ))
}

fn freeze_delay(state: &mut KsNoteState, note: &Note, fs: u32, delay: usize) {
    // Keep w tied to the continuous period relative to the frozen delay.
    let frac = fs as f64 / note.freq_hz - delay as f64;
    state.delay = delay;
    if frac < OMEGA_EPS {
        state.omega = OMEGA_EPS;
        state.d_omega_d_freq = 0.0;
    } else if frac > 1.0 - OMEGA_EPS {
        state.omega = 1.0 - OMEGA_EPS;
        state.d_omega_d_freq = 0.0;
    } else {
        state.omega = frac;
    }
}

/// Repeats `clip` end-to-end until it covers `len` samples.
pub fn tile_to(clip: &AudioClip, len: usize) -> AudioClip {
    let src = clip.samples();
    let samples = if src.is_empty() {
        vec![0.0; len]
    } else {
        src.iter().cycle().take(len).copied().collect()
    };
    AudioClip::new(samples, clip.sample_rate()).expect("tiling preserves finiteness")
}

/// Gradients of a scalar loss w.r.t. each note's frequency and volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthGrads {
    pub freq: Vec<f64>,
    pub vol: Vec<f64>,
}

/// Reverse pass through a recorded render. `upstream[n]` is
/// `d loss / d output[n]` over the concatenated sequence.
pub fn backward(params: &SynthParams, tape: &SynthTape, upstream: &[f64]) -> Result<SynthGrads> {
    if tape.notes.len() != params.notes.len()
        || tape.recursion != params.recursion
        || tape
            .notes
            .iter()
            .zip(&params.notes)
            .any(|(r, n)| r.note != *n)
    {
        return Err(Error::Invariant("tape was recorded for different parameters".into()));
    }
    let total: usize = tape.notes.iter().map(|r| r.output.len()).sum();
    if upstream.len() != total {
        return Err(Error::Invariant(format!(
            "upstream length {} differs from rendered length {total}",
            upstream.len()
        )));
    }
    let mut freq = Vec::with_capacity(tape.notes.len());
    let mut vol = Vec::with_capacity(tape.notes.len());
    for rec in &tape.notes {
        let u = &upstream[rec.offset..rec.offset + rec.output.len()];
        let (df, dv) = note_backward(rec, u, tape.recursion);
        if !df.is_finite() || !dv.is_finite() {
            return Err(Error::Numeric("non-finite synth gradient".into()));
        }
        freq.push(df);
        vol.push(dv);
    }
    Ok(SynthGrads { freq, vol })
}

/// Adjoint of the recursion `x[n] = g (w x[n-D] + (1-w) x[n-D-1])`, n >= D,
/// given `seed_adj[n] = d loss / d x[n]` from outside the recursion.
/// Returns (d/dg, d/dw, adjoint of the first D entries).
fn recursion_adjoint(x: &[f64], seed_adj: &[f64], delay: usize, g: f64, w: f64) -> (f64, f64, Vec<f64>) {
    let n = x.len();
    let mut lam = seed_adj.to_vec();
    for i in (0..n).rev() {
        let mut v = lam[i];
        if i + delay < n {
            v += g * w * lam[i + delay];
        }
        if i + delay + 1 < n {
            v += g * (1.0 - w) * lam[i + delay + 1];
        }
        lam[i] = v;
    }
    let mut dg = 0.0;
    let mut dw = 0.0;
    for i in delay..n {
        let a = x[i - delay];
        let b = if i > delay { x[i - delay - 1] } else { 0.0 };
        dg += lam[i] * (w * a + (1.0 - w) * b);
        dw += lam[i] * g * (a - b);
    }
    lam.truncate(delay);
    (dg, dw, lam)
}

fn note_backward(rec: &NoteRecord, u: &[f64], recursion: Recursion) -> (f64, f64) {
    let s = &rec.state;
    let (d_gamma, d_omega, d_v) = match recursion {
        Recursion::Verbatim => {
            let g = s.gamma * s.v_output / 2.0;
            let (dg, dw, lam0) = recursion_adjoint(&rec.output, u, s.delay, g, s.omega);
            let d_excite: f64 = lam0.iter().zip(&rec.excitation).map(|(l, e)| l * e).sum();
            (dg * s.v_output / 2.0, dw, dg * s.gamma / 2.0 + d_excite)
        }
        Recursion::OutputScaled => {
            let d_v: f64 = if s.v_output != 0.0 {
                u.iter().zip(&rec.output).map(|(a, y)| a * y).sum::<f64>() / s.v_output
            } else {
                // Recompute the unscaled string when the output is silent.
                let mut z = vec![0.0; rec.output.len()];
                z[..s.delay].copy_from_slice(&rec.excitation);
                run_recursion(&mut z, s.delay, s.gamma, s.omega);
                u.iter().zip(&z).map(|(a, y)| a * y).sum()
            };
            let z: Vec<f64> = if s.v_output != 0.0 {
                rec.output.iter().map(|y| y / s.v_output).collect()
            } else {
                vec![0.0; rec.output.len()]
            };
            let scaled: Vec<f64> = u.iter().map(|a| a * s.v_output).collect();
            let (dg, dw, _) = recursion_adjoint(&z, &scaled, s.delay, s.gamma, s.omega);
            (dg, dw, d_v)
        }
    };
    let d_freq = d_gamma * s.d_gamma_d_freq + d_omega * s.d_omega_d_freq + d_v * s.amplitude * s.d_pv_d_freq;
    let d_vol = d_v * s.p_v * s.amplitude * LN_10 / 20.0;
    (d_freq, d_vol)
}

/// Records a sequence render on a [`Tape`] with `freqs` and `vols` as `1 x L`
/// inputs; returns the `1 x total` waveform node.
pub fn render_on_tape(tape: &mut Tape, params: &SynthParams, freqs: Var, vols: Var) -> Result<Var> {
    render_on_tape_with_delays(tape, params, freqs, vols, None)
}

/// [`render_on_tape`] with optionally frozen integer delays (see [`render_with_delays`]).
pub fn render_on_tape_with_delays(
    tape: &mut Tape,
    params: &SynthParams,
    freqs: Var,
    vols: Var,
    delays: Option<&[usize]>,
) -> Result<Var> {
    let current = params.with_freqs_vols(
        tape.value(freqs).as_slice().expect("contiguous row"),
        tape.value(vols).as_slice().expect("contiguous row"),
    );
    let (clip, synth_tape) = render_with_delays(&current, delays)?;
    let n = clip.len();
    let value = Array2::from_shape_vec((1, n), clip.into_samples()).expect("row shape");
    Ok(tape.custom(
        vec![freqs, vols],
        value,
        Box::new(SynthOp {
            params: current,
            tape: synth_tape,
        }),
    ))
}

struct SynthOp {
    params: SynthParams,
    tape: SynthTape,
}

impl CustomOp for SynthOp {
    fn name(&self) -> &str {
        "karplus_strong"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        upstream: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let g = backward(
            &self.params,
            &self.tape,
            upstream.as_slice().expect("contiguous upstream"),
        )?;
        let row = |v: Vec<f64>| Array2::from_shape_vec((1, v.len()), v).expect("row shape");
        Ok(vec![
            needs[0].then(|| row(g.freq)),
            needs[1].then(|| row(g.vol)),
        ])
    }
}
