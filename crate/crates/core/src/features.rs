//! Log mel filterbank frontend for the detector.

use ndarray::{Array1, Array2, Axis};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, Stft, Window, WORKING_RATE};
use crate::diff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Geometry of the frontend. Part of every checkpoint so that a model is
/// never fed features it was not trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    /// Analysis window length in samples (25 ms at 16 kHz).
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub n_filters: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Added to filterbank energies before the log.
    pub log_eps: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: WORKING_RATE,
            frame_len: 400,
            hop: 160,
            fft_size: 512,
            n_filters: 64,
            f_min: 20.0,
            f_max: 8000.0,
            log_eps: 1e-8,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.n_filters == 0
            || self.hop == 0
            || self.frame_len == 0
            || self.frame_len > self.fft_size
            || !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist)
            || !(self.log_eps > 0.0)
        {
            return Err(Error::Config(format!("invalid frontend geometry: {self:?}")));
        }
        Ok(())
    }

    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            1 + (len - self.frame_len) / self.hop
        }
    }

    /// Sample span `[start, end)` covered by frame `t`.
    pub fn frame_span(&self, t: usize) -> (usize, usize) {
        (t * self.hop, t * self.hop + self.frame_len)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters as a `bins x filters` matrix.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Array2<f64> {
    let bins = cfg.fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_filters + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_filters + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut fb = Array2::zeros((bins, cfg.n_filters));
    for m in 0..cfg.n_filters {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb[[k, m]] = w;
        }
        // Narrow low filters can fall between bins; give them the nearest one.
        if fb.column(m).sum() == 0.0 {
            let k = ((c / bin_hz).round() as usize).min(bins - 1);
            fb[[k, m]] = 1.0;
        }
    }
    fb
}

/// Serialized form of a frontend: geometry plus normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendState {
    pub config: FrontendConfig,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FeatureFrontend {
    config: FrontendConfig,
    mean: Array1<f64>,
    std: Array1<f64>,
    filterbank: Array2<f64>,
    stft: Stft,
}

impl FeatureFrontend {
    /// Frontend with identity normalization (zero mean, unit scale).
    pub fn new(config: FrontendConfig) -> Result<Self> {
        config.validate()?;
        let f = config.n_filters;
        Ok(Self {
            filterbank: mel_filterbank(&config),
            stft: Stft::new(config.frame_len, config.hop, config.fft_size, Window::Hann),
            mean: Array1::zeros(f),
            std: Array1::ones(f),
            config,
        })
    }

    pub fn from_state(state: &FrontendState) -> Result<Self> {
        let mut fe = Self::new(state.config.clone())?;
        let f = fe.config.n_filters;
        if state.mean.len() != f || state.std.len() != f {
            return Err(Error::Compatibility(format!(
                "normalization statistics have {}/{} entries for {f} filters",
                state.mean.len(),
                state.std.len()
            )));
        }
        if state.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Compatibility("non-positive normalization scale".into()));
        }
        fe.mean = Array1::from(state.mean.clone());
        fe.std = Array1::from(state.std.clone());
        Ok(fe)
    }

    pub fn state(&self) -> FrontendState {
        FrontendState {
            config: self.config.clone(),
            mean: self.mean.to_vec(),
            std: self.std.to_vec(),
        }
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    pub fn n_features(&self) -> usize {
        self.config.n_filters
    }

    pub fn frame_count(&self, len: usize) -> usize {
        self.config.frame_count(len)
    }

    fn check(&self, clip: &AudioClip) -> Result<()> {
        if clip.sample_rate() != self.config.sample_rate {
            return Err(Error::Invariant(format!(
                "clip at {} Hz, frontend expects {} Hz",
                clip.sample_rate(),
                self.config.sample_rate
            )));
        }
        Ok(())
    }

    /// Unnormalized `ln(E + eps)` filterbank energies, frames x filters.
    pub fn log_energies(&self, signal: &[f64]) -> Result<Array2<f64>> {
        let power = self.stft.power(signal)?;
        let eps = self.config.log_eps;
        Ok(power.dot(&self.filterbank).mapv(|e| (e + eps).ln()))
    }

    fn normalize(&self, mut logs: Array2<f64>) -> Array2<f64> {
        logs -= &self.mean;
        logs /= &self.std;
        logs
    }

    /// Sets normalization statistics from training clips only.
    pub fn fit(&mut self, clips: &[&AudioClip]) -> Result<()> {
        let f = self.config.n_filters;
        let mut sum = Array1::<f64>::zeros(f);
        let mut sq = Array1::<f64>::zeros(f);
        let mut count = 0usize;
        for clip in clips {
            self.check(clip)?;
            let logs = self.log_energies(clip.samples())?;
            sum += &logs.sum_axis(Axis(0));
            sq += &logs.mapv(|v| v * v).sum_axis(Axis(0));
            count += logs.nrows();
        }
        if count == 0 {
            return Err(Error::Data("no frames to fit normalization".into()));
        }
        let n = count as f64;
        self.mean = &sum / n;
        self.std = sq
            .iter()
            .zip(&self.mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Ok(())
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<Array2<f64>> {
        self.check(clip)?;
        Ok(self.normalize(self.log_energies(clip.samples())?))
    }

    /// Records feature extraction of a `1 x n` signal node.
    pub fn extract_on_tape(&self, tape: &mut Tape, signal: Var) -> Result<Var> {
        let row = tape.value(signal);
        if row.nrows() != 1 {
            return Err(Error::Invariant("feature input must be a row vector".into()));
        }
        let samples = row.as_slice().expect("contiguous row");
        let (power, spectra) = self.stft.power_with_spectra(samples)?;
        let energies = power.dot(&self.filterbank);
        let eps = self.config.log_eps;
        let value = self.normalize(energies.mapv(|e| (e + eps).ln()));
        let op = FeatureOp {
            frontend: self.clone(),
            spectra,
            energies,
            signal_len: samples.len(),
        };
        Ok(tape.custom(vec![signal], value, Box::new(op)))
    }
}

struct FeatureOp {
    frontend: FeatureFrontend,
    spectra: Vec<Vec<Complex64>>,
    energies: Array2<f64>,
    signal_len: usize,
}

impl CustomOp for FeatureOp {
    fn name(&self) -> &str {
        "log_mel_features"
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
        let eps = self.frontend.config.log_eps;
        let mut d_energy = upstream / &self.frontend.std;
        d_energy.zip_mut_with(&self.energies, |g, &e| *g /= e + eps);
        let d_power = d_energy.dot(&self.frontend.filterbank.t());
        let grad = self
            .frontend
            .stft
            .power_backward(&self.spectra, &d_power, self.signal_len);
        Ok(vec![Some(
            Array2::from_shape_vec((1, grad.len()), grad).expect("row shape"),
        )])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64, amp: f64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..n).map(|_| rng.random_range(-amp..amp)).collect(), WORKING_RATE).unwrap()
    }

    #[test]
    fn filterbank_covers_every_filter() {
        let fb = mel_filterbank(&FrontendConfig::default());
        assert_eq!(fb.dim(), (257, 64));
        for m in 0..64 {
            assert!(fb.column(m).sum() > 0.0, "filter {m} is empty");
        }
        // Centres increase with the filter index.
        let centre = |m: usize| fb.column(m).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!((1..64).all(|m| centre(m) >= centre(m - 1)));
    }

    #[test]
    fn silence_and_scaling() {
        let fe = FeatureFrontend::new(FrontendConfig::default()).unwrap();
        let silent = fe.log_energies(&vec![0.0; 4000]).unwrap();
        let floor = 1e-8f64.ln();
        assert!(silent.iter().all(|v| (v - floor).abs() < 1e-12));
        assert_eq!(silent.nrows(), 1 + (4000 - 400) / 160);

        let x = noise(4000, 1, 0.3);
        let a = fe.log_energies(x.samples()).unwrap();
        let b = fe.log_energies(x.scaled(10.0).samples()).unwrap();
        let expected = 2.0 * 10f64.ln();
        for (u, v) in a.iter().zip(&b) {
            assert!((v - u - expected).abs() < 1e-4);
        }
    }

    #[test]
    fn too_short_clip_is_empty_output() {
        let fe = FeatureFrontend::new(FrontendConfig::default()).unwrap();
        let err = fe.extract(&AudioClip::zeros(399, WORKING_RATE)).unwrap_err();
        assert!(matches!(err, Error::EmptyOutput(_)));
    }

    #[test]
    fn fit_normalizes_training_frames() {
        let mut fe = FeatureFrontend::new(FrontendConfig::default()).unwrap();
        let a = noise(8000, 2, 0.2);
        let b = noise(8000, 3, 0.05);
        fe.fit(&[&a, &b]).unwrap();
        let fa = fe.extract(&a).unwrap();
        let fb = fe.extract(&b).unwrap();
        let n = (fa.nrows() + fb.nrows()) as f64;
        for k in 0..64 {
            let mean = (fa.column(k).sum() + fb.column(k).sum()) / n;
            assert!(mean.abs() < 1e-9);
        }
        let restored = FeatureFrontend::from_state(&fe.state()).unwrap();
        assert_eq!(restored.extract(&a).unwrap(), fa);
    }

    #[test]
    fn tape_gradient_matches_differences() {
        let mut fe = FeatureFrontend::new(FrontendConfig::default()).unwrap();
        let x = noise(2000, 4, 0.1);
        fe.fit(&[&x]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let weights = Array2::from_shape_fn((fe.frame_count(2000), 64), |_| rng.random_range(-1.0..1.0));
        let loss_of = |s: &[f64]| -> f64 {
            let clip = AudioClip::new(s.to_vec(), WORKING_RATE).unwrap();
            (&fe.extract(&clip).unwrap() * &weights).sum()
        };
        let mut tape = Tape::new();
        let v = tape.param("x", Array2::from_shape_vec((1, 2000), x.samples().to_vec()).unwrap());
        let f = fe.extract_on_tape(&mut tape, v).unwrap();
        let w = tape.constant(weights.clone());
        let prod = tape.mul(f, w);
        let loss = tape.sum(prod);
        let g = tape.grad(loss).unwrap().wrt(v, (1, 2000));
        for _ in 0..10 {
            let i = rng.random_range(0..2000);
            let eps = 1e-6;
            let mut s = x.samples().to_vec();
            s[i] += eps;
            let up = loss_of(&s);
            s[i] -= 2.0 * eps;
            let down = loss_of(&s);
            let numeric = (up - down) / (2.0 * eps);
            assert!(relative_error(g[[0, i]], numeric) < 1e-3, "{i}: {} vs {numeric}", g[[0, i]]);
        }
    }
}
