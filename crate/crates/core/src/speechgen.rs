//! Procedural formant speech and colored noise.
//!
//! Stands in for recorded keyword and background corpora: a three-formant
//! cascade synthesizer driven by phone targets, with per-speaker pitch,
//! vocal-tract length, speaking rate and breathiness.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phone {
    Ax,
    Eh,
    Iy,
    Aa,
    Uw,
    Ow,
    Ae,
    Ih,
    Er,
    L,
    R,
    M,
    N,
    S,
    Sh,
    F,
    K,
    T,
    P,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Vowel,
    Sonorant,
    Fricative,
    Stop,
}

#[derive(Debug, Clone, Copy)]
struct Target {
    formants: [f64; 3],
    kind: Kind,
    /// Nominal duration, ms.
    dur: f64,
    voice: f64,
    noise: f64,
    /// Noise band centre and bandwidth, Hz.
    band: (f64, f64),
}

impl Phone {
    fn target(self) -> Target {
        use Phone::*;
        let v = |f1, f2, f3, dur| Target {
            formants: [f1, f2, f3],
            kind: Kind::Vowel,
            dur,
            voice: 1.0,
            noise: 0.0,
            band: (0.0, 1.0),
        };
        let son = |f1, f2, f3, voice| Target {
            formants: [f1, f2, f3],
            kind: Kind::Sonorant,
            dur: 70.0,
            voice,
            noise: 0.0,
            band: (0.0, 1.0),
        };
        let fric = |centre, bw, noise, dur| Target {
            formants: [400.0, 1600.0, 2600.0],
            kind: Kind::Fricative,
            dur,
            voice: 0.0,
            noise,
            band: (centre, bw),
        };
        let stop = |centre, bw| Target {
            formants: [400.0, 1600.0, 2600.0],
            kind: Kind::Stop,
            dur: 70.0,
            voice: 0.0,
            noise: 0.8,
            band: (centre, bw),
        };
        match self {
            Ax => v(500.0, 1500.0, 2500.0, 90.0),
            Eh => v(550.0, 1770.0, 2490.0, 120.0),
            Iy => v(270.0, 2290.0, 3010.0, 130.0),
            Aa => v(730.0, 1090.0, 2440.0, 140.0),
            Uw => v(300.0, 870.0, 2240.0, 130.0),
            Ow => v(570.0, 840.0, 2410.0, 140.0),
            Ae => v(660.0, 1720.0, 2410.0, 140.0),
            Ih => v(390.0, 1990.0, 2550.0, 100.0),
            Er => v(490.0, 1350.0, 1690.0, 130.0),
            L => son(360.0, 1050.0, 2900.0, 0.55),
            R => son(420.0, 1300.0, 1600.0, 0.6),
            M => son(280.0, 1000.0, 2200.0, 0.35),
            N => son(280.0, 1700.0, 2600.0, 0.35),
            S => fric(6000.0, 2500.0, 0.5, 110.0),
            Sh => fric(3200.0, 1800.0, 0.55, 110.0),
            F => fric(4500.0, 6000.0, 0.2, 100.0),
            K => stop(2000.0, 1200.0),
            T => stop(4500.0, 2500.0),
            P => stop(1000.0, 1500.0),
        }
    }

    pub const ALL: [Phone; 19] = [
        Phone::Ax,
        Phone::Eh,
        Phone::Iy,
        Phone::Aa,
        Phone::Uw,
        Phone::Ow,
        Phone::Ae,
        Phone::Ih,
        Phone::Er,
        Phone::L,
        Phone::R,
        Phone::M,
        Phone::N,
        Phone::S,
        Phone::Sh,
        Phone::F,
        Phone::K,
        Phone::T,
        Phone::P,
    ];

    fn is_vowel(self) -> bool {
        self.target().kind == Kind::Vowel
    }
}

/// The wake word: AX L EH K S AX.
pub const KEYWORD: [Phone; 6] = [Phone::Ax, Phone::L, Phone::Eh, Phone::K, Phone::S, Phone::Ax];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub f0: f64,
    /// Multiplies every formant (shorter vocal tracts raise formants).
    pub formant_scale: f64,
    /// Multiplies every phone duration.
    pub tempo: f64,
    pub breathiness: f64,
}

impl Speaker {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            f0: rng.random_range(85.0..240.0),
            formant_scale: rng.random_range(0.88..1.18),
            tempo: rng.random_range(0.8..1.25),
            breathiness: rng.random_range(0.02..0.12),
        }
    }
}

/// Two-pole resonator with unity gain at its centre frequency region.
#[derive(Default)]
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, freq: f64, bw: f64, fs: f64) -> f64 {
        let r = (-PI * bw / fs).exp();
        let c = -r * r;
        let b = 2.0 * r * (2.0 * PI * freq / fs).cos();
        let a = 1.0 - b - c;
        let y = a * x + b * self.y1 + c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Renders phones with linear formant transitions between neighbours.
/// Output peak is normalized to 0.5.
pub fn synthesize(phones: &[Phone], speaker: &Speaker, fs: u32, seed: u64) -> AudioClip {
    let fsf = fs as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<Target> = phones.iter().map(|p| p.target()).collect();
    let lens: Vec<usize> = targets
        .iter()
        .map(|t| {
            let jitter = rng.random_range(0.9..1.1);
            (t.dur * speaker.tempo * jitter * fsf / 1000.0).round().max(1.0) as usize
        })
        .collect();
    let total: usize = lens.iter().sum();
    let glide = (0.03 * fsf) as usize;
    let mut out = Vec::with_capacity(total);
    let mut res: [Resonator; 3] = Default::default();
    let mut noise_res = Resonator::default();
    let mut phase = 0.0;
    let f0_drift = rng.random_range(-0.25..0.1);
    let mut n_global = 0usize;
    for (i, (t, &len)) in targets.iter().zip(&lens).enumerate() {
        let next = targets.get(i + 1).copied();
        for n in 0..len {
            let prog = n_global as f64 / total.max(1) as f64;
            // Formants glide into the next phone over the last `glide` samples.
            let mix = match next {
                Some(_) if n + glide > len => (n + glide - len) as f64 / (2 * glide) as f64,
                _ => 0.0,
            };
            let formants: [f64; 3] = std::array::from_fn(|k| {
                let a = t.formants[k];
                let b = next.map_or(a, |nx| nx.formants[k]);
                lerp(a, b, mix) * speaker.formant_scale
            });
            let env = {
                let ramp = (0.01 * fsf).max(1.0);
                (n as f64 / ramp).min(1.0).min((len - n) as f64 / ramp)
            };
            let f0 = speaker.f0 * (1.0 + f0_drift * prog) * (1.0 + 0.01 * rng.random_range(-1.0..1.0));
            phase += f0 / fsf;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            let white: f64 = StandardNormal.sample(&mut rng);
            let mut voiced = pulse * t.voice + white * speaker.breathiness * t.voice;
            for (k, r) in res.iter_mut().enumerate() {
                let bw = [80.0, 110.0, 160.0][k];
                voiced = r.step(voiced, formants[k], bw, fsf);
            }
            let noise_amp = match t.kind {
                Kind::Stop => {
                    // Closure then a short burst.
                    let burst = len * 6 / 10;
                    if n >= burst && n < burst + (0.02 * fsf) as usize {
                        t.noise
                    } else {
                        0.0
                    }
                }
                _ => t.noise,
            };
            let band = (t.band.0 * speaker.formant_scale).min(0.45 * fsf);
            let hiss = noise_res.step(white, band, t.band.1, fsf) * noise_amp * 1.5;
            out.push((voiced * 0.6 + hiss) * env);
            n_global += 1;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    AudioClip::new(out, fs).expect("finite synthesis")
}

pub fn keyword_utterance(speaker: &Speaker, fs: u32, seed: u64) -> AudioClip {
    synthesize(&KEYWORD, speaker, fs, seed)
}

/// A random 3-6 phone non-keyword word. Roughly a third of the draws reuse
/// a keyword fragment so the detector cannot key on single phones.
pub fn random_negative_phones(rng: &mut impl Rng) -> Vec<Phone> {
    loop {
        let len = rng.random_range(3..=6);
        let mut phones: Vec<Phone> = Vec::with_capacity(len);
        if rng.random_bool(0.35) {
            let start = rng.random_range(0..KEYWORD.len() - 2);
            phones.extend_from_slice(&KEYWORD[start..start + 3]);
        }
        while phones.len() < len {
            let want_vowel = phones.last().is_none_or(|p| !p.is_vowel());
            let pool: Vec<Phone> = Phone::ALL.iter().copied().filter(|p| p.is_vowel() == want_vowel).collect();
            phones.push(pool[rng.random_range(0..pool.len())]);
        }
        if rng.random_bool(0.5) {
            phones.reverse();
        }
        if !phones.windows(KEYWORD.len()).any(|w| w == KEYWORD) {
            return phones;
        }
    }
}

/// Noise with power spectrum proportional to `1/f^exponent` (0 white,
/// 1 pink, 2 brown), scaled to `rms`.
pub fn colored_noise(len: usize, exponent: f64, rms: f64, fs: u32, seed: u64) -> AudioClip {
    if len == 0 {
        return AudioClip::zeros(0, fs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf: Vec<Complex64> = (0..len)
        .map(|_| Complex64::new(StandardNormal.sample(&mut rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let bin = k.min(len - k).max(1) as f64;
        *v *= bin.powf(-exponent / 2.0);
    }
    buf[0] = Complex64::new(0.0, 0.0);
    planner.plan_fft_inverse(len).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let cur = crate::audio::rms(&out);
    if cur > 0.0 {
        out.iter_mut().for_each(|v| *v *= rms / cur);
    }
    AudioClip::new(out, fs).expect("finite noise")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{psd_frames, FrameSpec, Window};

    #[test]
    fn keyword_is_deterministic_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sp = Speaker::random(&mut rng);
        let a = keyword_utterance(&sp, 16_000, 7);
        let b = keyword_utterance(&sp, 16_000, 7);
        assert_eq!(a, b);
        assert!((a.peak() - 0.5).abs() < 1e-12);
        // Around half a second to a second long.
        assert!(a.duration_secs() > 0.35 && a.duration_secs() < 1.0, "{}", a.duration_secs());
    }

    #[test]
    fn negatives_never_contain_the_keyword() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let p = random_negative_phones(&mut rng);
            assert!(p.len() >= 3 && p.len() <= 6);
            assert!(!p.windows(6).any(|w| w == KEYWORD));
        }
    }

    #[test]
    fn noise_color_tilts_spectrum() {
        let spec = FrameSpec::new(512, 512, Window::Hann).unwrap();
        let tilt = |e: f64| {
            let c = colored_noise(32_000, e, 0.1, 16_000, 4);
            assert!((c.rms() - 0.1).abs() < 1e-9);
            let frames = psd_frames(&c, &spec).unwrap();
            let mean = |lo: usize, hi: usize| {
                frames.iter().map(|f| f.bins[lo..hi].iter().sum::<f64>() / (hi - lo) as f64).sum::<f64>()
                    / frames.len() as f64
            };
            mean(8, 16) - mean(128, 256)
        };
        let white = tilt(0.0);
        let pink = tilt(1.0);
        assert!(white.abs() < 3.0);
        assert!(pink > white + 6.0);
    }
}
