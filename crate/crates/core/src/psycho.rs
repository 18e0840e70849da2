//! Frequency-masking threshold of clean audio and the hinge penalty that
//! keeps a perturbation underneath it.
//!
//! The threshold is a reduced MPEG-1 model: tonal maskers are local spectral
//! maxima above the absolute threshold of hearing, each spread over the Bark
//! scale with a two-slope function (27 dB/Bark below the masker, 12 dB/Bark
//! above) and summed in power with the absolute threshold.

use std::f64::consts::LN_10;
use std::fmt::Write as _;

use ndarray::Array2;
use rustfft::num_complex::Complex64;

use crate::audio::{power_to_db, psd_frames, AudioClip, FrameSpec, PsdFrame, Stft, DB_FLOOR};
use crate::diff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Reference level the loudest clean bin is mapped to.
pub const NORMALIZED_PEAK_DB: f64 = 92.0;

const SLOPE_BELOW: f64 = 27.0;
const SLOPE_ABOVE: f64 = 12.0;

/// Absolute threshold of hearing in dB SPL (Terhardt), clamped below 20 Hz.
pub fn absolute_threshold_db(freq_hz: f64) -> f64 {
    let f = freq_hz.max(20.0) / 1000.0;
    3.64 * f.powf(-0.8) - 6.5 * (-0.6 * (f - 3.3).powi(2)).exp() + 1e-3 * f.powi(4)
}

/// Critical-band rate in Bark.
pub fn bark(freq_hz: f64) -> f64 {
    13.0 * (0.00076 * freq_hz).atan() + 3.5 * (freq_hz / 7500.0).powi(2).atan()
}

fn spread(dz: f64) -> f64 {
    if dz < 0.0 {
        SLOPE_BELOW * dz
    } else {
        -SLOPE_ABOVE * dz
    }
}

fn db_sum(levels: impl IntoIterator<Item = f64>) -> f64 {
    power_to_db(levels.into_iter().map(|l| 10f64.powf(l / 10.0)).sum())
}

/// Per-frame, per-bin threshold `eta_x(k)` in dB on the normalized scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskingThreshold {
    pub values: Array2<f64>,
    pub spec: FrameSpec,
}

impl MaskingThreshold {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    /// Frame-by-bin matrix, one CSV row per frame.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame");
        for k in 0..self.values.ncols() {
            let _ = write!(s, ",bin{k}");
        }
        s.push('\n');
        for (f, row) in self.values.rows().into_iter().enumerate() {
            let _ = write!(s, "{f}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Threshold for one PSD frame (raw `p_x` values in dB).
pub fn frame_threshold(p_x: &[f64], sample_rate: u32, window_size: usize) -> Vec<f64> {
    let bins = p_x.len();
    let freq = |k: usize| k as f64 * sample_rate as f64 / window_size as f64;
    let ath: Vec<f64> = (0..bins).map(|k| absolute_threshold_db(freq(k))).collect();
    let peak = p_x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak <= DB_FLOOR {
        return ath;
    }
    let offset = NORMALIZED_PEAK_DB - peak;
    let level: Vec<f64> = p_x.iter().map(|p| p + offset).collect();
    let z: Vec<f64> = (0..bins).map(|k| bark(freq(k))).collect();

    let mut maskers = Vec::new();
    for k in 1..bins.saturating_sub(1) {
        if p_x[k] > DB_FLOOR && level[k] > level[k - 1] && level[k] >= level[k + 1] && level[k] > ath[k] {
            let combined = db_sum([level[k - 1], level[k], level[k + 1]]);
            maskers.push((z[k], combined));
        }
    }
    (0..bins)
        .map(|k| {
            let mut power = 10f64.powf(ath[k] / 10.0);
            for &(zm, lm) in &maskers {
                let t = lm - 6.025 - 0.275 * zm + spread(z[k] - zm);
                power += 10f64.powf(t / 10.0);
            }
            10.0 * power.log10()
        })
        .collect()
}

pub fn masking_threshold(x: &AudioClip, spec: &FrameSpec) -> Result<MaskingThreshold> {
    let frames = psd_frames(x, spec)?;
    let bins = spec.bins();
    let mut values = Array2::zeros((frames.len(), bins));
    for (f, frame) in frames.iter().enumerate() {
        let t = frame_threshold(&frame.bins, x.sample_rate(), spec.window_size);
        values.row_mut(f).assign(&ndarray::Array1::from(t));
    }
    Ok(MaskingThreshold {
        values,
        spec: *spec,
    })
}

/// `92 - max_k p_x(k) + p_delta(k)` for one frame.
pub fn normalized_perturbation_psd(p_x: &PsdFrame, p_delta: &PsdFrame) -> Result<Vec<f64>> {
    if p_x.bins.len() != p_delta.bins.len() {
        return Err(Error::Invariant(format!(
            "PSD shapes differ: {} vs {}",
            p_x.bins.len(),
            p_delta.bins.len()
        )));
    }
    let offset = NORMALIZED_PEAK_DB - p_x.max();
    Ok(p_delta.bins.iter().map(|p| offset + p).collect())
}

/// Mean over frames of the per-frame mean hinge `max(pbar - eta, 0)`.
pub fn hinge_loss(normalized: &Array2<f64>, threshold: &Array2<f64>) -> Result<(Vec<f64>, f64)> {
    if normalized.dim() != threshold.dim() {
        return Err(Error::Invariant(format!(
            "normalized PSD {:?} and threshold {:?} differ in shape",
            normalized.dim(),
            threshold.dim()
        )));
    }
    let per_frame: Vec<f64> = normalized
        .rows()
        .into_iter()
        .zip(threshold.rows())
        .map(|(p, t)| {
            p.iter().zip(t).map(|(p, t)| (p - t).max(0.0)).sum::<f64>() / p.len() as f64
        })
        .collect();
    let total = if per_frame.is_empty() {
        0.0
    } else {
        per_frame.iter().sum::<f64>() / per_frame.len() as f64
    };
    Ok((per_frame, total))
}

#[derive(Debug, Clone)]
pub struct MaskingLossTerms {
    pub normalized: Array2<f64>,
    pub per_frame: Vec<f64>,
    pub total: f64,
}

/// Everything about the clean clip that the masking loss needs, computed once.
#[derive(Debug, Clone)]
pub struct MaskingContext {
    threshold: MaskingThreshold,
    /// `92 - max_k p_x(k)` per frame.
    offsets: Vec<f64>,
    len: usize,
    sample_rate: u32,
    stft: Stft,
}

impl MaskingContext {
    pub fn new(x: &AudioClip, spec: &FrameSpec) -> Result<Self> {
        spec.validate()?;
        let frames = psd_frames(x, spec)?;
        let threshold = masking_threshold(x, spec)?;
        Ok(Self {
            offsets: frames.iter().map(|f| NORMALIZED_PEAK_DB - f.max()).collect(),
            threshold,
            len: x.len(),
            sample_rate: x.sample_rate(),
            stft: Stft::from_frame_spec(spec),
        })
    }

    pub fn threshold(&self) -> &MaskingThreshold {
        &self.threshold
    }

    fn check(&self, len: usize, rate: u32) -> Result<()> {
        if len != self.len || rate != self.sample_rate {
            return Err(Error::Invariant(format!(
                "perturbation ({len} samples @ {rate} Hz) does not match clean clip ({} @ {})",
                self.len, self.sample_rate
            )));
        }
        Ok(())
    }

    fn psd_db(&self, power: &Array2<f64>) -> Array2<f64> {
        let n = self.threshold.spec.window_size as f64;
        power.mapv(|p| power_to_db(p / (n * n)))
    }

    fn normalize(&self, mut p_delta: Array2<f64>) -> Array2<f64> {
        for (mut row, off) in p_delta.rows_mut().into_iter().zip(&self.offsets) {
            row += *off;
        }
        p_delta
    }

    pub fn loss(&self, delta: &AudioClip) -> Result<MaskingLossTerms> {
        self.check(delta.len(), delta.sample_rate())?;
        let power = self.stft.power(delta.samples())?;
        let normalized = self.normalize(self.psd_db(&power));
        let (per_frame, total) = hinge_loss(&normalized, &self.threshold.values)?;
        Ok(MaskingLossTerms {
            normalized,
            per_frame,
            total,
        })
    }

    /// Records the loss for a `1 x len` perturbation node.
    pub fn loss_on_tape(&self, tape: &mut Tape, delta: Var) -> Result<Var> {
        let signal = tape.value(delta);
        if signal.nrows() != 1 {
            return Err(Error::Invariant("perturbation must be a row vector".into()));
        }
        self.check(signal.ncols(), self.sample_rate)?;
        let (power, spectra) = self
            .stft
            .power_with_spectra(signal.as_slice().expect("contiguous row"))?;
        let p_delta = self.psd_db(&power);
        let op = PsdDbOp {
            stft: self.stft.clone(),
            spectra,
            power,
            signal_len: self.len,
            norm: (self.threshold.spec.window_size as f64).powi(2),
        };
        let psd = tape.custom(vec![delta], p_delta, Box::new(op));
        let mut shift = -self.threshold.values.clone();
        for (mut row, off) in shift.rows_mut().into_iter().zip(&self.offsets) {
            row += *off;
        }
        let excess = tape.shift(psd, &shift);
        let hinge = tape.relu(excess);
        Ok(tape.mean(hinge))
    }
}

/// Eq.-style masking loss of `delta` against clean `x`.
pub fn masking_loss(x: &AudioClip, delta: &AudioClip, spec: &FrameSpec) -> Result<f64> {
    if x.len() != delta.len() || x.sample_rate() != delta.sample_rate() {
        return Err(Error::Invariant("clean clip and perturbation differ in length or rate".into()));
    }
    Ok(MaskingContext::new(x, spec)?.loss(delta)?.total)
}

struct PsdDbOp {
    stft: Stft,
    spectra: Vec<Vec<Complex64>>,
    power: Array2<f64>,
    signal_len: usize,
    norm: f64,
}

impl CustomOp for PsdDbOp {
    fn name(&self) -> &str {
        "psd_db"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        upstream: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let floor_power = 10f64.powf(DB_FLOOR / 10.0) * self.norm;
        let mut d_power = upstream.clone();
        ndarray::Zip::from(&mut d_power)
            .and(&self.power)
            .for_each(|g, &p| *g = if p > floor_power { *g * 10.0 / (LN_10 * p) } else { 0.0 });
        let grad = self.stft.power_backward(&self.spectra, &d_power, self.signal_len);
        Ok(vec![Some(
            Array2::from_shape_vec((1, grad.len()), grad).expect("row shape"),
        )])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{psd, Window, WORKING_RATE};
    use crate::diff::relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn tone(freq: f64, amp: f64, len: usize) -> AudioClip {
        AudioClip::new(
            (0..len)
                .map(|i| amp * (2.0 * PI * freq * i as f64 / WORKING_RATE as f64).sin())
                .collect(),
            WORKING_RATE,
        )
        .unwrap()
    }

    fn noise(amp: f64, len: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..len).map(|_| amp * rng.random_range(-1.0..1.0)).collect(), WORKING_RATE).unwrap()
    }

    #[test]
    fn silence_threshold_is_absolute_floor() {
        let spec = FrameSpec::default();
        let t = masking_threshold(&AudioClip::zeros(2048, WORKING_RATE), &spec).unwrap();
        for row in t.values.rows() {
            for (k, v) in row.iter().enumerate() {
                let ath = absolute_threshold_db(k as f64 * 16_000.0 / 512.0);
                assert!((v - ath).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tone_masks_locally() {
        let spec = FrameSpec::default();
        let t = masking_threshold(&tone(1000.0, 0.5, 2048), &spec).unwrap();
        let row = t.values.row(1);
        let bin = |f: f64| (f * 512.0 / 16_000.0).round() as usize;
        assert!(row[bin(1000.0)] > row[bin(250.0)]);
        assert!(row[bin(1000.0)] > row[bin(4000.0)]);
    }

    #[test]
    fn noise_raises_mean_threshold() {
        let spec = FrameSpec::default();
        let quiet = masking_threshold(&AudioClip::zeros(2048, WORKING_RATE), &spec).unwrap();
        let loud = masking_threshold(&noise(0.3, 2048, 4), &spec).unwrap();
        assert!(loud.values.mean().unwrap() > quiet.values.mean().unwrap());
    }

    #[test]
    fn normalization_cases() {
        let px = PsdFrame {
            bins: vec![92.0, 50.0, 10.0],
            frame_index: 0,
        };
        let pd = PsdFrame {
            bins: vec![1.0, 2.0, 3.0],
            frame_index: 0,
        };
        assert_eq!(normalized_perturbation_psd(&px, &pd).unwrap(), pd.bins);
        let same = normalized_perturbation_psd(&px, &px).unwrap();
        assert_eq!(same[0], 92.0);
        let px60 = PsdFrame {
            bins: vec![60.0, 20.0],
            frame_index: 0,
        };
        let pd30 = PsdFrame {
            bins: vec![30.0, 0.0],
            frame_index: 0,
        };
        assert_eq!(normalized_perturbation_psd(&px60, &pd30).unwrap()[0], 62.0);
        assert!(normalized_perturbation_psd(&px60, &pd).is_err());
    }

    #[test]
    fn single_bin_exceedance() {
        let threshold = Array2::from_elem((1, 257), 40.0);
        let mut normalized = Array2::from_elem((1, 257), 10.0);
        normalized[[0, 100]] = 46.0;
        let (_, total) = hinge_loss(&normalized, &threshold).unwrap();
        assert!((total - 6.0 / 257.0).abs() < 1e-12);
        normalized[[0, 100]] = 40.0;
        assert_eq!(hinge_loss(&normalized, &threshold).unwrap().1, 0.0);
    }

    #[test]
    fn frame_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Array2::from_shape_fn((5, 9), |_| rng.random_range(0.0..60.0));
        let t = Array2::from_shape_fn((5, 9), |_| rng.random_range(0.0..60.0));
        let order = [3usize, 0, 4, 1, 2];
        let pn = ndarray::stack(ndarray::Axis(0), &order.map(|i| n.row(i))).unwrap();
        let pt = ndarray::stack(ndarray::Axis(0), &order.map(|i| t.row(i))).unwrap();
        let a = hinge_loss(&n, &t).unwrap().1;
        let b = hinge_loss(&pn, &pt).unwrap().1;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn quiet_perturbation_is_fully_masked() {
        let spec = FrameSpec::default();
        let x = tone(1000.0, 0.5, 4096);
        let delta = tone(1000.0, 1e-6, 4096);
        assert_eq!(masking_loss(&x, &delta, &spec).unwrap(), 0.0);
        assert!(masking_loss(&x, &AudioClip::zeros(100, WORKING_RATE), &spec).is_err());
    }

    #[test]
    fn psd_matches_direct_frame_psd() {
        let spec = FrameSpec::new(256, 128, Window::Rect).unwrap();
        let clip = noise(0.2, 512, 8);
        let frames = psd_frames(&clip, &spec).unwrap();
        let direct = psd(&clip.samples()[128..384], 256).unwrap();
        for (a, b) in frames[1].bins.iter().zip(&direct.bins) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn tape_gradient_matches_finite_differences() {
        let spec = FrameSpec::default();
        let x = noise(0.3, 2048, 2);
        let delta = noise(0.05, 2048, 3);
        let ctx = MaskingContext::new(&x, &spec).unwrap();
        let mut tape = Tape::new();
        let dv = tape.param(
            "delta",
            Array2::from_shape_vec((1, delta.len()), delta.samples().to_vec()).unwrap(),
        );
        let loss = ctx.loss_on_tape(&mut tape, dv).unwrap();
        assert!((tape.scalar_value(loss) - ctx.loss(&delta).unwrap().total).abs() < 1e-12);
        let g = tape.grad(loss).unwrap().wrt(dv, (1, delta.len()));
        let mut checked = 0;
        for &i in &[600usize, 700, 901, 1000, 1200, 1333] {
            let eval = |e: f64| {
                let mut s = delta.samples().to_vec();
                s[i] += e;
                ctx.loss(&AudioClip::new(s, WORKING_RATE).unwrap()).unwrap().total
            };
            let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            if g[[0, i]].abs() > 1e-6 {
                assert!(relative_error(g[[0, i]], fd) < 1e-3, "{i}: {} vs {fd}", g[[0, i]]);
                checked += 1;
            }
        }
        assert!(checked >= 3);
    }
}
