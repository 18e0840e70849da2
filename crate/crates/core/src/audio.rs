//! Audio container, WAV I/O, mixing, framing and power-spectrum helpers.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Working sample rate of every pipeline stage.
pub const WORKING_RATE: u32 = 16_000;

/// Replaces `log(0)` in every dB conversion.
pub const DB_FLOOR: f64 = -200.0;

/// Mono sample buffer at a fixed rate. Amplitudes are nominally in [-1, 1];
/// values outside that range are kept in memory and clipped on export.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Invariant("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()))
    }

    /// Sub-clip `[start, start + len)`, zero-padded past the end.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let mut out = vec![0.0; len];
        if start < self.samples.len() {
            let n = len.min(self.samples.len() - start);
            out[..n].copy_from_slice(&self.samples[start..start + n]);
        }
        Self {
            samples: out,
            sample_rate: self.sample_rate,
        }
    }
}

pub fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Reads a PCM or float WAV file as a mono clip at [`WORKING_RATE`].
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    read_wav_at(path, WORKING_RATE)
}

/// Reads a WAV file, averages channels and resamples to `rate`.
pub fn read_wav_at(path: impl AsRef<Path>, rate: u32) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1_i64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| map_hound(path, e))?
        }
        (fmt, bits) => {
            return Err(Error::Unsupported(format!("{fmt:?} with {bits} bits")));
        }
    };
    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let clip = AudioClip::new(mono, spec.sample_rate)?;
    Ok(if spec.sample_rate == rate {
        clip
    } else {
        resample(&clip, rate)
    })
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::Unsupported => Error::Unsupported(path.display().to_string()),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// PCM code for an amplitude: `round(a * 32768)` clipped to the i16 range.
pub fn amplitude_to_pcm16(a: f64) -> i16 {
    (a.clamp(-1.0, 1.0) * 32768.0)
        .round()
        .clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Writes a 16-bit mono PCM WAV file.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if clip.is_empty() {
        return Err(Error::EmptyOutput("refusing to write an empty clip".into()));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in &clip.samples {
        writer
            .write_sample(amplitude_to_pcm16(s))
            .map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

/// Band-limited resampling to a new rate.
pub fn resample(clip: &AudioClip, target_rate: u32) -> AudioClip {
    let ratio = target_rate as f64 / clip.sample_rate as f64;
    AudioClip {
        samples: resample_ratio(&clip.samples, ratio),
        sample_rate: target_rate,
    }
}

const SINC_ZERO_CROSSINGS: f64 = 16.0;

/// Hann-windowed sinc interpolation producing `ceil(len * ratio)` samples.
/// When `ratio < 1` the kernel is widened so it also low-passes.
pub fn resample_ratio(samples: &[f64], ratio: f64) -> Vec<f64> {
    assert!(ratio > 0.0 && ratio.is_finite(), "resampling ratio must be positive");
    let out_len = (samples.len() as f64 * ratio - 1e-9).ceil().max(0.0) as usize;
    let cutoff = ratio.min(1.0);
    let half_width = SINC_ZERO_CROSSINGS / cutoff;
    let n_in = samples.len() as isize;
    (0..out_len)
        .map(|m| {
            let t = m as f64 / ratio;
            let lo = ((t - half_width).ceil() as isize).max(0);
            let hi = ((t + half_width).floor() as isize).min(n_in - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                let x = t - k as f64;
                let w = 0.5 * (1.0 + (PI * x / half_width).cos());
                acc += samples[k as usize] * cutoff * sinc(cutoff * x) * w;
            }
            acc
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// `out[n] = base[n] + gain * overlay[n - offset]`; the base length is kept.
pub fn mix(base: &AudioClip, overlay: &AudioClip, offset: usize, gain: f64) -> Result<AudioClip> {
    if base.sample_rate != overlay.sample_rate {
        return Err(Error::Invariant(format!(
            "sample rate mismatch: {} vs {}",
            base.sample_rate, overlay.sample_rate
        )));
    }
    if offset > base.len() {
        return Err(Error::Invariant(format!(
            "offset {offset} beyond base length {}",
            base.len()
        )));
    }
    let mut out = base.samples.clone();
    for (o, &s) in out[offset..].iter_mut().zip(&overlay.samples) {
        *o += gain * s;
    }
    Ok(AudioClip {
        samples: out,
        sample_rate: base.sample_rate,
    })
}

/// Digital peak scale for a note volume in dB: `10^((vol - 100) / 20)`.
pub fn vol_to_amplitude(vol: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&vol) {
        return Err(Error::Bounds(format!("volume {vol} dB outside [0, 100]")));
    }
    Ok(vol_gain(vol))
}

/// Unchecked form of [`vol_to_amplitude`].
pub fn vol_gain(vol: f64) -> f64 {
    10f64.powf((vol - 100.0) / 20.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Rect,
    Hann,
}

impl Window {
    /// Periodic window coefficients of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rect => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    pub window_size: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            window_size: 512,
            hop: 160,
            window: Window::Hann,
        }
    }
}

impl FrameSpec {
    pub fn new(window_size: usize, hop: usize, window: Window) -> Result<Self> {
        let spec = Self {
            window_size,
            hop,
            window,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.hop == 0 || self.hop > self.window_size {
            return Err(Error::Config(format!(
                "frame spec needs 0 < hop <= window, got hop {} window {}",
                self.hop, self.window_size
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// `1 + floor((len - N) / hop)`, or 0 when `len < N`.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window_size {
            0
        } else {
            1 + (len - self.window_size) / self.hop
        }
    }
}

/// Splits a clip into windowed frames (one row per frame).
pub fn frame_signal(clip: &AudioClip, spec: &FrameSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let count = spec.frame_count(clip.len());
    if count == 0 {
        return Err(Error::EmptyOutput(format!(
            "clip of {} samples shorter than window {}",
            clip.len(),
            spec.window_size
        )));
    }
    let w = spec.window.coefficients(spec.window_size);
    Ok(Array2::from_shape_fn((count, spec.window_size), |(f, i)| {
        clip.samples[f * spec.hop + i] * w[i]
    }))
}

/// One frame of `10 log10 |s(k) / N|^2` values over `floor(N/2) + 1` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdFrame {
    pub bins: Vec<f64>,
    pub frame_index: usize,
}

impl PsdFrame {
    pub fn max(&self) -> f64 {
        self.bins.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Power in dB with the [`DB_FLOOR`] applied.
pub fn power_to_db(power: f64) -> f64 {
    if power > 0.0 {
        (10.0 * power.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

/// PSD of one already-windowed frame of length `n`.
pub fn psd(frame: &[f64], n: usize) -> Result<PsdFrame> {
    if frame.len() != n {
        return Err(Error::Invariant(format!(
            "frame length {} differs from window size {n}",
            frame.len()
        )));
    }
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite sample in PSD frame".into()));
    }
    let stft = Stft::new(n, n, n, Window::Rect);
    let spec = stft.spectrum(frame);
    let norm = (n * n) as f64;
    Ok(PsdFrame {
        bins: spec.iter().map(|c| power_to_db(c.norm_sqr() / norm)).collect(),
        frame_index: 0,
    })
}

/// PSD frames of a whole clip under `spec`.
pub fn psd_frames(clip: &AudioClip, spec: &FrameSpec) -> Result<Vec<PsdFrame>> {
    let stft = Stft::from_frame_spec(spec);
    let power = stft.power(clip.samples())?;
    let norm = (spec.window_size * spec.window_size) as f64;
    Ok(power
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| PsdFrame {
            bins: row.iter().map(|&p| power_to_db(p / norm)).collect(),
            frame_index: i,
        })
        .collect())
}

/// Short-time Fourier transform with optional zero padding
/// (`frame_len <= fft_size`). Produces power `|s(k)|^2` for
/// `k = 0..=fft_size/2` and the matching reverse-mode pass.
#[derive(Clone)]
pub struct Stft {
    frame_len: usize,
    hop: usize,
    fft_size: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("frame_len", &self.frame_len)
            .field("hop", &self.hop)
            .field("fft_size", &self.fft_size)
            .finish()
    }
}

impl Stft {
    pub fn new(frame_len: usize, hop: usize, fft_size: usize, window: Window) -> Self {
        assert!(frame_len <= fft_size && frame_len > 0 && hop > 0);
        let mut planner = FftPlanner::new();
        Self {
            frame_len,
            hop,
            fft_size,
            window: window.coefficients(frame_len),
            forward: planner.plan_fft_forward(fft_size),
            inverse: planner.plan_fft_inverse(fft_size),
        }
    }

    pub fn from_frame_spec(spec: &FrameSpec) -> Self {
        Self::new(spec.window_size, spec.hop, spec.window_size, spec.window)
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            1 + (len - self.frame_len) / self.hop
        }
    }

    /// Spectrum of a single frame that is already windowed (no window applied here).
    pub fn spectrum(&self, frame: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = frame
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
            .take(self.fft_size)
            .collect();
        self.forward.process(&mut buf);
        buf.truncate(self.bins());
        buf
    }

    fn frame_spectra(&self, signal: &[f64]) -> Result<Vec<Vec<Complex64>>> {
        let count = self.frame_count(signal.len());
        if count == 0 {
            return Err(Error::EmptyOutput(format!(
                "signal of {} samples shorter than frame {}",
                signal.len(),
                self.frame_len
            )));
        }
        let mut frame = vec![0.0; self.frame_len];
        Ok((0..count)
            .map(|f| {
                let start = f * self.hop;
                for (i, v) in frame.iter_mut().enumerate() {
                    *v = signal[start + i] * self.window[i];
                }
                self.spectrum(&frame)
            })
            .collect())
    }

    /// `|s(k)|^2` per frame (rows) and bin (columns).
    pub fn power(&self, signal: &[f64]) -> Result<Array2<f64>> {
        Ok(self.power_with_spectra(signal)?.0)
    }

    pub fn power_with_spectra(
        &self,
        signal: &[f64],
    ) -> Result<(Array2<f64>, Vec<Vec<Complex64>>)> {
        let spectra = self.frame_spectra(signal)?;
        let power = Array2::from_shape_fn((spectra.len(), self.bins()), |(f, k)| {
            spectra[f][k].norm_sqr()
        });
        Ok((power, spectra))
    }

    /// Gradient w.r.t. the signal given `d loss / d power`.
    pub fn power_backward(
        &self,
        spectra: &[Vec<Complex64>],
        upstream: &Array2<f64>,
        signal_len: usize,
    ) -> Vec<f64> {
        let mut grad = vec![0.0; signal_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_size];
        for (f, spec) in spectra.iter().enumerate() {
            for v in buf.iter_mut() {
                *v = Complex64::new(0.0, 0.0);
            }
            let mut any = false;
            for (k, s) in spec.iter().enumerate() {
                let g = upstream[[f, k]];
                if g != 0.0 {
                    any = true;
                    buf[k] = s * g;
                }
            }
            if !any {
                continue;
            }
            // sum_k g_k X_k e^{+i 2 pi k n / M}
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for i in 0..self.frame_len {
                grad[start + i] += 2.0 * buf[i].re * self.window[i];
            }
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn frame_counts() {
        let spec = FrameSpec::new(256, 128, Window::Rect).unwrap();
        assert_eq!(spec.frame_count(400), 2);
        let clip = AudioClip::zeros(256, WORKING_RATE);
        assert_eq!(
            frame_signal(&clip, &FrameSpec::new(256, 256, Window::Rect).unwrap())
                .unwrap()
                .nrows(),
            1
        );
        let short = AudioClip::zeros(100, WORKING_RATE);
        assert!(matches!(
            frame_signal(&short, &spec),
            Err(Error::EmptyOutput(_))
        ));
    }

    #[test]
    fn rect_frames_are_slices() {
        let n = 64;
        let samples: Vec<f64> = (0..3 * n).map(|i| (i as f64 * 0.37).sin()).collect();
        let clip = AudioClip::new(samples.clone(), WORKING_RATE).unwrap();
        let frames = frame_signal(&clip, &FrameSpec::new(n, n, Window::Rect).unwrap()).unwrap();
        assert_eq!(frames.nrows(), 3);
        for f in 0..3 {
            assert_eq!(frames.row(f).to_vec(), samples[f * n..(f + 1) * n].to_vec());
        }
    }

    #[test]
    fn psd_reference_values() {
        let zeros = psd(&vec![0.0; 256], 256).unwrap();
        assert!(zeros.bins.iter().all(|&b| b == DB_FLOOR));
        assert_eq!(zeros.bins.len(), 129);

        let ones = psd(&vec![1.0; 256], 256).unwrap();
        assert!(ones.bins[0].abs() < 1e-9);

        let k0 = 16.0;
        let tone: Vec<f64> = (0..256)
            .map(|i| (2.0 * PI * k0 * i as f64 / 256.0).cos())
            .collect();
        let p = psd(&tone, 256).unwrap();
        assert_relative_eq!(p.bins[16], 20.0 * 0.5f64.log10(), epsilon = 1e-9);
        assert!(psd(&[f64::NAN; 4], 4).is_err());
    }

    #[test]
    fn parseval_rect() {
        let n = 128;
        let frame: Vec<f64> = (0..n).map(|i| ((i * 31 % 17) as f64 - 8.0) / 9.0).collect();
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(n);
        let mut buf: Vec<Complex64> = frame.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft.process(&mut buf);
        let time: f64 = frame.iter().map(|v| v * v).sum();
        let freq: f64 = buf.iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
        assert_relative_eq!(time, freq, max_relative = 1e-6);
    }

    #[test]
    fn mix_cases() {
        let base = AudioClip::new(vec![0.1, 0.2, 0.3, 0.4], WORKING_RATE).unwrap();
        let overlay = AudioClip::new(vec![1.0, 1.0, 1.0], WORKING_RATE).unwrap();
        assert_eq!(mix(&base, &overlay, 1, 0.0).unwrap(), base);
        let zeros = AudioClip::zeros(4, WORKING_RATE);
        assert_eq!(
            mix(&zeros, &overlay, 0, 1.0).unwrap().samples(),
            &[1.0, 1.0, 1.0, 0.0]
        );
        let imp = AudioClip::new(vec![0.0, 1.0, 0.0], WORKING_RATE).unwrap();
        assert_eq!(mix(&imp, &imp, 0, 1.0).unwrap().samples()[1], 2.0);
        let other = AudioClip::zeros(4, 8000);
        assert!(matches!(mix(&base, &other, 0, 1.0), Err(Error::Invariant(_))));
        assert!(mix(&base, &overlay, 5, 1.0).is_err());
    }

    #[test]
    fn volume_mapping() {
        assert_eq!(vol_to_amplitude(100.0).unwrap(), 1.0);
        assert_relative_eq!(vol_to_amplitude(80.0).unwrap(), 0.1, max_relative = 1e-12);
        assert_relative_eq!(vol_to_amplitude(0.0).unwrap(), 1e-5, max_relative = 1e-12);
        assert!(matches!(vol_to_amplitude(100.5), Err(Error::Bounds(_))));
        assert!(vol_to_amplitude(-1.0).is_err());
    }

    #[test]
    fn power_backward_matches_finite_difference() {
        let stft = Stft::new(40, 16, 64, Window::Hann);
        let signal: Vec<f64> = (0..120).map(|i| ((i * 13 % 29) as f64 - 14.0) / 15.0).collect();
        let (power, spectra) = stft.power_with_spectra(&signal).unwrap();
        let upstream = Array2::from_shape_fn(power.dim(), |(f, k)| ((f + 2 * k) % 7) as f64 - 3.0);
        let grad = stft.power_backward(&spectra, &upstream, signal.len());
        let loss = |s: &[f64]| (stft.power(s).unwrap() * &upstream).sum();
        for &i in &[0usize, 17, 55, 100, 119] {
            let mut p = signal.clone();
            p[i] += 1e-5;
            let mut m = signal.clone();
            m[i] -= 1e-5;
            let fd = (loss(&p) - loss(&m)) / 2e-5;
            assert_relative_eq!(grad[i], fd, max_relative = 1e-6, epsilon = 1e-8);
        }
    }
}
