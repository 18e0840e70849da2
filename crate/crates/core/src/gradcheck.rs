//! Randomized finite-difference audit of every analytic gradient the attack
//! relies on: synthesizer volume and frequency, masking loss, and the
//! feature frontend.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, FrameSpec, WORKING_RATE};
use crate::diff::{relative_error, Tape};
use crate::error::{Error, Result};
use crate::features::{FeatureFrontend, FrontendConfig};
use crate::psycho::MaskingContext;
use crate::synth::{backward, render_sequence_with_tape, render_with_delays, Recursion, SynthParams, FREQ_MIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub draws: usize,
    pub seed: u64,
    /// Coordinates probed per draw for the signal-input checks.
    pub coords_per_draw: usize,
    pub vol_tolerance: f64,
    pub freq_tolerance: f64,
    pub signal_tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            draws: 100,
            seed: 0,
            coords_per_draw: 4,
            vol_tolerance: 1e-3,
            freq_tolerance: 1e-2,
            signal_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradKind {
    SynthVolume,
    SynthFrequency,
    Masking,
    Frontend,
}

impl GradKind {
    pub const ALL: [GradKind; 4] = [
        GradKind::SynthVolume,
        GradKind::SynthFrequency,
        GradKind::Masking,
        GradKind::Frontend,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradKind::SynthVolume => "synth_volume",
            GradKind::SynthFrequency => "synth_frequency",
            GradKind::Masking => "masking",
            GradKind::Frontend => "frontend",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub draw: usize,
    pub kind: GradKind,
    pub coordinate: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.analytic.is_finite() && self.numeric.is_finite() && self.rel_error <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: GradKind,
    pub checked: usize,
    pub failed: usize,
    pub non_finite: usize,
    /// Coordinates not compared because a hinge or clamp lay within the step.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub rows: Vec<GradCheckRow>,
    pub summaries: Vec<KindSummary>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.summaries.iter().all(|s| s.failed == 0 && s.non_finite == 0 && s.checked > 0)
    }

    pub fn non_finite(&self) -> usize {
        self.summaries.iter().map(|s| s.non_finite).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("draw,kind,coordinate,analytic,numeric,rel_error,tolerance,passed\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.draw,
                r.kind.name(),
                r.coordinate,
                r.analytic,
                r.numeric,
                r.rel_error,
                r.tolerance,
                r.passed()
            );
        }
        s
    }
}

fn row_tensor(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

fn noise(rng: &mut ChaCha8Rng, len: usize, amp: f64) -> Vec<f64> {
    // Lightly smoothed so the spectrum is not flat.
    let mut prev = 0.0;
    (0..len)
        .map(|_| {
            prev = 0.6 * prev + rng.random_range(-amp..amp);
            prev
        })
        .collect()
}

/// Frequencies whose interpolation weight or decay factor sits on a clamp
/// within `margin` are skipped: the one-sided derivative there is not what a
/// central difference measures.
fn near_synth_clamp(freq: f64, fs: u32, margin: f64) -> bool {
    let period = fs as f64 / freq;
    let frac = period - period.floor();
    let step_frac = margin * fs as f64 / (freq * freq);
    frac < 1e-3 + step_frac || frac > 1.0 - 1e-3 - step_frac || (freq - 4f64.exp()).abs() < 1.0
}

struct Accumulator {
    rows: Vec<GradCheckRow>,
    skipped: [usize; 4],
}

impl Accumulator {
    fn push(&mut self, draw: usize, kind: GradKind, coordinate: String, analytic: f64, numeric: f64, tolerance: f64) {
        self.rows.push(GradCheckRow {
            draw,
            kind,
            coordinate,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
            tolerance,
        });
    }

    fn skip(&mut self, kind: GradKind) {
        self.skipped[kind as usize] += 1;
    }
}

fn synth_draw(acc: &mut Accumulator, draw: usize, rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Result<()> {
    let freq = loop {
        let f = rng.random_range(FREQ_MIN.ln()..2500f64.ln()).exp();
        if !near_synth_clamp(f, WORKING_RATE, 1e-3) {
            break f;
        }
        acc.skip(GradKind::SynthFrequency);
    };
    let vol = rng.random_range(20.0..95.0);
    let dur = rng.random_range(1200..3000);
    let recursion = if draw % 2 == 0 { Recursion::OutputScaled } else { Recursion::Verbatim };
    let mut p = SynthParams::from_notes(&[(freq, vol)], 1.0, 60.0, WORKING_RATE, cfg.seed ^ draw as u64)?;
    p.notes[0].dur_samples = dur;
    p.recursion = recursion;
    let (clip, tape) = render_sequence_with_tape(&p)?;
    let delays: Vec<usize> = tape.states().map(|s| s.delay).collect();
    let weights: Vec<f64> = (0..clip.len()).map(|_| rng.random_range(0.5..1.5)).collect();
    let upstream: Vec<f64> = clip.samples().iter().zip(&weights).map(|(y, w)| 2.0 * w * y).collect();
    let g = backward(&p, &tape, &upstream)?;
    let loss = |f: f64, v: f64| -> Result<f64> {
        let q = p.with_freqs_vols(&[f], &[v]);
        let (c, _) = render_with_delays(&q, Some(&delays))?;
        Ok(c.samples().iter().zip(&weights).map(|(y, w)| w * y * y).sum())
    };
    let ev = 1e-3;
    let fd_vol = (loss(freq, vol + ev)? - loss(freq, vol - ev)?) / (2.0 * ev);
    acc.push(draw, GradKind::SynthVolume, format!("{recursion:?}@{freq:.3}Hz"), g.vol[0], fd_vol, cfg.vol_tolerance);
    let ef = 1e-3;
    let fd_freq = (loss(freq + ef, vol)? - loss(freq - ef, vol)?) / (2.0 * ef);
    acc.push(draw, GradKind::SynthFrequency, format!("{recursion:?}@{freq:.3}Hz"), g.freq[0], fd_freq, cfg.freq_tolerance);
    Ok(())
}

fn masking_draw(acc: &mut Accumulator, draw: usize, rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Result<()> {
    let len = 2048;
    let spec = FrameSpec::default();
    let (ax, ad) = (rng.random_range(0.05..0.5), rng.random_range(0.005..0.2));
    let x = AudioClip::new(noise(rng, len, ax), WORKING_RATE)?;
    let delta = noise(rng, len, ad);
    let ctx = MaskingContext::new(&x, &spec)?;
    let mut tape = Tape::new();
    let dv = tape.param("delta", row_tensor(&delta));
    let loss = ctx.loss_on_tape(&mut tape, dv)?;
    let g = tape.grad(loss)?.wrt(dv, (1, len));
    let eps = 1e-6;
    let active = |s: &[f64]| -> Result<(f64, Vec<bool>)> {
        let terms = ctx.loss(&AudioClip::new(s.to_vec(), WORKING_RATE)?)?;
        let mask = terms
            .normalized
            .iter()
            .zip(&ctx.threshold().values)
            .map(|(p, t)| p > t)
            .collect();
        Ok((terms.total, mask))
    };
    let (_, base_mask) = active(&delta)?;
    let mut probed = 0;
    for _ in 0..cfg.coords_per_draw * 4 {
        if probed == cfg.coords_per_draw {
            break;
        }
        let i = rng.random_range(0..len);
        if g[[0, i]].abs() < 1e-8 {
            continue;
        }
        let mut s = delta.clone();
        s[i] += eps;
        let (up, up_mask) = active(&s)?;
        s[i] -= 2.0 * eps;
        let (down, down_mask) = active(&s)?;
        probed += 1;
        if up_mask != base_mask || down_mask != base_mask {
            acc.skip(GradKind::Masking);
            continue;
        }
        acc.push(draw, GradKind::Masking, format!("delta[{i}]"), g[[0, i]], (up - down) / (2.0 * eps), cfg.signal_tolerance);
    }
    Ok(())
}

fn frontend_draw(
    acc: &mut Accumulator,
    draw: usize,
    rng: &mut ChaCha8Rng,
    fe: &mut FeatureFrontend,
    cfg: &GradcheckConfig,
) -> Result<()> {
    let len = 1600;
    let amp = rng.random_range(0.01..0.5);
    let x = AudioClip::new(noise(rng, len, amp), WORKING_RATE)?;
    fe.fit(&[&x])?;
    let frames = fe.frame_count(len);
    let weights = Array2::from_shape_fn((frames, fe.n_features()), |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let v = tape.param("x", row_tensor(x.samples()));
    let f = fe.extract_on_tape(&mut tape, v)?;
    let w = tape.constant(weights.clone());
    let prod = tape.mul(f, w);
    let loss = tape.sum(prod);
    let g = tape.grad(loss)?.wrt(v, (1, len));
    let eval = |s: &[f64]| -> Result<f64> { Ok((&fe.extract(&AudioClip::new(s.to_vec(), WORKING_RATE)?)? * &weights).sum()) };
    let eps = 1e-6;
    for _ in 0..cfg.coords_per_draw {
        let i = rng.random_range(0..len);
        let mut s = x.samples().to_vec();
        s[i] += eps;
        let up = eval(&s)?;
        s[i] -= 2.0 * eps;
        let down = eval(&s)?;
        acc.push(draw, GradKind::Frontend, format!("x[{i}]"), g[[0, i]], (up - down) / (2.0 * eps), cfg.signal_tolerance);
    }
    Ok(())
}

/// Runs `cfg.draws` random draws of every check.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.draws == 0 || cfg.coords_per_draw == 0 {
        return Err(Error::Config("gradcheck needs at least one draw and coordinate".into()));
    }
    let mut acc = Accumulator {
        rows: Vec::new(),
        skipped: [0; 4],
    };
    let mut fe = FeatureFrontend::new(FrontendConfig::default())?;
    for draw in 0..cfg.draws {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(draw as u64);
        synth_draw(&mut acc, draw, &mut rng, cfg)?;
        masking_draw(&mut acc, draw, &mut rng, cfg)?;
        frontend_draw(&mut acc, draw, &mut rng, &mut fe, cfg)?;
    }
    let summaries = GradKind::ALL
        .iter()
        .map(|&kind| {
            let rows: Vec<&GradCheckRow> = acc.rows.iter().filter(|r| r.kind == kind).collect();
            KindSummary {
                kind,
                checked: rows.len(),
                failed: rows.iter().filter(|r| !r.passed()).count(),
                non_finite: rows
                    .iter()
                    .filter(|r| !r.analytic.is_finite() || !r.numeric.is_finite())
                    .count(),
                skipped: acc.skipped[kind as usize],
                max_rel_error: rows.iter().map(|r| r.rel_error).fold(0.0, f64::max),
                tolerance: rows.first().map_or(0.0, |r| r.tolerance),
            }
        })
        .collect();
    Ok(GradcheckReport {
        rows: acc.rows,
        summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = run_gradcheck(&GradcheckConfig {
            draws: 6,
            ..GradcheckConfig::default()
        })
        .unwrap();
        for s in &report.summaries {
            assert!(s.checked > 0, "{:?} never checked", s.kind);
        }
        assert!(report.passed(), "{:?}", report.summaries);
        assert_eq!(report.to_csv().lines().count(), report.rows.len() + 1);
    }

    #[test]
    fn clamp_detection() {
        // 16000 / 400 = 40 exactly: w sits on its lower clamp.
        assert!(near_synth_clamp(400.0, 16_000, 1e-3));
        assert!(!near_synth_clamp(401.7, 16_000, 1e-3));
        assert!(near_synth_clamp(4f64.exp() + 0.5, 16_000, 1e-3));
    }
}
