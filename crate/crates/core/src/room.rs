//! Shoebox room impulse responses by the image source method, and the room
//! distribution sampled for expectation over transforms.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, WORKING_RATE};
use crate::diff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const MAX_ORDER_LIMIT: usize = 10;

/// Walls in the order `x = 0, x = Lx, y = 0, y = Ly, z = 0, z = Lz`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomConfig {
    pub dims: [f64; 3],
    pub source: [f64; 3],
    pub mic: [f64; 3],
    pub absorption: [f64; 6],
    pub max_order: usize,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_fs")]
    pub fs: u32,
}

fn default_c() -> f64 {
    SPEED_OF_SOUND
}

fn default_fs() -> u32 {
    WORKING_RATE
}

impl RoomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Config(format!("room dimensions must be positive: {:?}", self.dims)));
        }
        for (name, p) in [("source", &self.source), ("mic", &self.mic)] {
            for axis in 0..3 {
                if !(p[axis] > 0.0 && p[axis] < self.dims[axis]) {
                    return Err(Error::Config(format!(
                        "{name} {:?} not strictly inside room {:?}",
                        p, self.dims
                    )));
                }
            }
        }
        if self.absorption.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config(format!("absorption must lie in (0, 1]: {:?}", self.absorption)));
        }
        if self.max_order > MAX_ORDER_LIMIT {
            return Err(Error::Config(format!(
                "max_order {} exceeds {MAX_ORDER_LIMIT}",
                self.max_order
            )));
        }
        if !(self.c > 0.0) || self.fs == 0 {
            return Err(Error::Config("speed of sound and fs must be positive".into()));
        }
        Ok(())
    }

    pub fn distance(&self) -> f64 {
        norm(sub(self.source, self.mic))
    }

    /// Analytic direct-path tap index `round(fs * d / c)`.
    pub fn direct_delay_samples(&self) -> usize {
        (self.fs as f64 * self.distance() / self.c).round() as usize
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }
}

/// Uniform absorption giving `rt60` seconds under Sabine's formula, clamped to (0, 1].
pub fn sabine_absorption(dims: [f64; 3], rt60: f64) -> f64 {
    let [x, y, z] = dims;
    let volume = x * y * z;
    let surface = 2.0 * (x * y + x * z + y * z);
    (0.161 * volume / (surface * rt60)).clamp(1e-6, 1.0)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    pub taps: Vec<f64>,
    pub fs: u32,
}

impl ImpulseResponse {
    pub fn first_nonzero(&self) -> Option<usize> {
        self.taps.iter().position(|&t| t != 0.0)
    }

    pub fn nonzero_taps(&self) -> usize {
        self.taps.iter().filter(|&&t| t != 0.0).count()
    }

    /// Copy scaled to unit energy. Keeps the reverberant character while
    /// removing the distance attenuation, which a level-sensitive frontend
    /// would otherwise read as a different signal.
    pub fn unit_energy(&self) -> ImpulseResponse {
        let e = self.taps.iter().map(|t| t * t).sum::<f64>().sqrt();
        let scale = if e > 0.0 { 1.0 / e } else { 1.0 };
        ImpulseResponse {
            taps: self.taps.iter().map(|t| t * scale).collect(),
            fs: self.fs,
        }
    }

    pub fn to_clip(&self) -> AudioClip {
        AudioClip::new(self.taps.clone(), self.fs).expect("finite taps")
    }
}

/// Image source impulse response with delays rounded to the nearest sample.
pub fn image_source_rir(cfg: &RoomConfig) -> Result<ImpulseResponse> {
    cfg.validate()?;
    let order = cfg.max_order as i64;
    let reflect: Vec<f64> = cfg.absorption.iter().map(|a| 1.0 - a).collect();
    let mut images = Vec::new();
    // Per axis: image coordinate (1 - 2p) * s + 2 n L hits the low wall
    // |n - p| times and the high wall |n| times.
    let axis_images = |axis: usize| {
        let mut v = Vec::new();
        for n in -order..=order {
            for p in 0..2i64 {
                let low = (n - p).unsigned_abs() as usize;
                let high = n.unsigned_abs() as usize;
                if low + high > cfg.max_order {
                    continue;
                }
                let coord = (1 - 2 * p) as f64 * cfg.source[axis] + 2.0 * n as f64 * cfg.dims[axis];
                let gain = reflect[2 * axis].powi(low as i32) * reflect[2 * axis + 1].powi(high as i32);
                v.push((coord, low + high, gain));
            }
        }
        v
    };
    let (xs, ys, zs) = (axis_images(0), axis_images(1), axis_images(2));
    for &(x, ox, gx) in &xs {
        for &(y, oy, gy) in &ys {
            if ox + oy > cfg.max_order {
                continue;
            }
            for &(z, oz, gz) in &zs {
                if ox + oy + oz > cfg.max_order {
                    continue;
                }
                let d = norm(sub([x, y, z], cfg.mic));
                if d < 1e-9 {
                    return Err(Error::Geometry("microphone coincides with an image source".into()));
                }
                let gain = gx * gy * gz;
                if gain == 0.0 {
                    continue;
                }
                images.push((d, gain / (4.0 * PI * d)));
            }
        }
    }
    let to_index = |d: f64| (d / cfg.c * cfg.fs as f64).round() as usize;
    let len = images.iter().map(|&(d, _)| to_index(d)).max().unwrap_or(0) + 1;
    let mut taps = vec![0.0; len];
    for (d, a) in images {
        taps[to_index(d)] += a;
    }
    Ok(ImpulseResponse { taps, fs: cfg.fs })
}

fn fft_convolve(a: &[f64], b: &[f64], out_len: usize) -> Vec<f64> {
    if a.is_empty() || b.is_empty() || out_len == 0 {
        return vec![0.0; out_len];
    }
    let size = (a.len() + b.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |v: &[f64]| {
        let mut buf: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        buf.resize(size, Complex64::new(0.0, 0.0));
        buf
    };
    let mut fa = pad(a);
    let mut fb = pad(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    let scale = 1.0 / size as f64;
    fa.iter().take(out_len).map(|c| c.re * scale).collect()
}

/// Full linear convolution `x * r` of length `len(x) + len(r) - 1`.
pub fn apply_rir(x: &AudioClip, r: &ImpulseResponse) -> Result<AudioClip> {
    if x.sample_rate() != r.fs {
        return Err(Error::Invariant(format!(
            "clip at {} Hz, impulse response at {} Hz",
            x.sample_rate(),
            r.fs
        )));
    }
    if x.is_empty() || r.taps.is_empty() {
        return AudioClip::new(Vec::new(), r.fs);
    }
    let out_len = x.len() + r.taps.len() - 1;
    AudioClip::new(fft_convolve(x.samples(), &r.taps, out_len), r.fs)
}

/// Convolution truncated to the input length, so frame labels stay aligned.
pub fn apply_rir_aligned(x: &AudioClip, r: &ImpulseResponse) -> Result<AudioClip> {
    let full = apply_rir(x, r)?;
    Ok(full.slice(0, x.len()))
}

/// Records `(x * r)[0..len(x)]` on the tape for a `1 x n` input.
pub fn rir_on_tape(tape: &mut Tape, x: Var, r: &ImpulseResponse) -> Result<Var> {
    let signal = tape.value(x);
    if signal.nrows() != 1 {
        return Err(Error::Invariant("convolution input must be a row vector".into()));
    }
    let n = signal.ncols();
    let out = fft_convolve(signal.as_slice().expect("contiguous row"), &r.taps, n);
    let value = Array2::from_shape_vec((1, n), out).expect("row shape");
    Ok(tape.custom(vec![x], value, Box::new(RirOp { taps: r.taps.clone() })))
}

struct RirOp {
    taps: Vec<f64>,
}

impl CustomOp for RirOp {
    fn name(&self) -> &str {
        "rir_convolution"
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
        // d/dx[m] = sum_n g[n] r[n - m]: correlate by convolving the reversed
        // upstream with r and reversing back.
        let mut g: Vec<f64> = upstream.iter().copied().collect();
        g.reverse();
        let n = g.len();
        let mut corr = fft_convolve(&g, &self.taps, n);
        corr.reverse();
        Ok(vec![Some(Array2::from_shape_vec((1, n), corr).expect("row shape"))])
    }
}

/// Uniform ranges over rooms, positions and reverberation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomDistribution {
    pub dims_min: [f64; 3],
    pub dims_max: [f64; 3],
    /// Minimum clearance of source and mic from every wall, meters.
    pub wall_margin: f64,
    pub rt60_min: f64,
    pub rt60_max: f64,
    pub max_order: usize,
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_fs")]
    pub fs: u32,
}

impl Default for RoomDistribution {
    fn default() -> Self {
        Self {
            dims_min: [3.0, 3.0, 2.5],
            dims_max: [6.0, 6.0, 3.0],
            wall_margin: 0.5,
            rt60_min: 0.2,
            rt60_max: 0.6,
            max_order: 8,
            count: 8,
            seed: 0,
            fs: WORKING_RATE,
        }
    }
}

impl RoomDistribution {
    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            if !(self.dims_min[axis] > 0.0) || self.dims_min[axis] > self.dims_max[axis] {
                return Err(Error::Config(format!("bad dimension range on axis {axis}")));
            }
            if self.dims_min[axis] <= 2.0 * self.wall_margin {
                return Err(Error::Config(format!(
                    "smallest room ({} m on axis {axis}) cannot fit {} m wall margins",
                    self.dims_min[axis], self.wall_margin
                )));
            }
        }
        if !(self.rt60_min > 0.0) || self.rt60_min > self.rt60_max {
            return Err(Error::Config("bad RT60 range".into()));
        }
        if self.max_order > MAX_ORDER_LIMIT || self.count == 0 || self.wall_margin < 0.0 {
            return Err(Error::Config("bad max_order, count or margin".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws `count` rooms; deterministic in `seed`.
pub fn sample_rooms(dist: &RoomDistribution) -> Result<Vec<RoomConfig>> {
    dist.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(dist.seed);
    let mut rooms = Vec::with_capacity(dist.count);
    while rooms.len() < dist.count {
        let dims: [f64; 3] = std::array::from_fn(|a| uniform(&mut rng, dist.dims_min[a], dist.dims_max[a]));
        let mut pos = || -> [f64; 3] {
            std::array::from_fn(|a| uniform(&mut rng, dist.wall_margin, dims[a] - dist.wall_margin))
        };
        let source = pos();
        let mic = pos();
        let rt60 = uniform(&mut rng, dist.rt60_min, dist.rt60_max);
        let cfg = RoomConfig {
            dims,
            source,
            mic,
            absorption: [sabine_absorption(dims, rt60); 6],
            max_order: dist.max_order,
            c: SPEED_OF_SOUND,
            fs: dist.fs,
        };
        // Coincident source and mic has probability zero unless ranges are
        // degenerate; in that case keep the draw and let the RIR step report it.
        cfg.validate()?;
        rooms.push(cfg);
    }
    Ok(rooms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::rms;

    fn room(source: [f64; 3], mic: [f64; 3], order: usize) -> RoomConfig {
        RoomConfig {
            dims: [5.1, 4.3, 2.9],
            source,
            mic,
            absorption: [0.3; 6],
            max_order: order,
            c: SPEED_OF_SOUND,
            fs: 16_000,
        }
    }

    fn brute_convolve(x: &[f64], r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len() + r.len() - 1];
        for (i, a) in x.iter().enumerate() {
            for (j, b) in r.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        out
    }

    #[test]
    fn direct_path_only() {
        let cfg = room([1.0, 1.0, 1.0], [4.43, 1.0, 1.0], 0);
        let r = image_source_rir(&cfg).unwrap();
        assert_eq!(r.first_nonzero(), Some(160));
        assert_eq!(r.nonzero_taps(), 1);
        assert!((r.taps[160] - 1.0 / (4.0 * PI * 3.43)).abs() < 1e-12);
        assert!((r.taps[160] - 0.02321).abs() < 1e-5);
    }

    #[test]
    fn first_order_has_seven_taps() {
        let cfg = room([1.13, 1.71, 0.93], [3.37, 2.29, 1.61], 1);
        assert_eq!(image_source_rir(&cfg).unwrap().nonzero_taps(), 7);
    }

    #[test]
    fn amplitude_follows_inverse_distance() {
        let near = image_source_rir(&room([1.0, 2.0, 1.5], [2.0, 2.0, 1.5], 0)).unwrap();
        let far = image_source_rir(&room([1.0, 2.0, 1.5], [3.0, 2.0, 1.5], 0)).unwrap();
        let a = near.taps[near.first_nonzero().unwrap()];
        let b = far.taps[far.first_nonzero().unwrap()];
        assert!((a / b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_rooms() {
        let mut cfg = room([1.0, 1.0, 1.0], [2.0, 2.0, 2.0], 3);
        cfg.mic = [6.0, 1.0, 1.0];
        assert!(matches!(image_source_rir(&cfg), Err(Error::Config(_))));
        let mut cfg = room([1.0, 1.0, 1.0], [2.0, 2.0, 2.0], 11);
        assert!(image_source_rir(&cfg).is_err());
        cfg.max_order = 2;
        cfg.absorption[2] = 0.0;
        assert!(image_source_rir(&cfg).is_err());
        let same = room([1.0, 1.0, 1.0], [1.0, 1.0, 1.0], 0);
        assert!(matches!(image_source_rir(&same), Err(Error::Geometry(_))));
    }

    #[test]
    fn convolution_identities() {
        let x = AudioClip::new(vec![0.5, -0.25, 0.125, 1.0], 16_000).unwrap();
        let unit = ImpulseResponse { taps: vec![1.0], fs: 16_000 };
        let y = apply_rir(&x, &unit).unwrap();
        for (a, b) in y.samples().iter().zip(x.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
        let shifted = ImpulseResponse { taps: vec![0.0, 0.0, 0.5], fs: 16_000 };
        let y = apply_rir(&x, &shifted).unwrap();
        assert_eq!(y.len(), 6);
        for i in 0..4 {
            assert!((y.samples()[i + 2] - 0.5 * x.samples()[i]).abs() < 1e-12);
        }
        let other = ImpulseResponse { taps: vec![1.0], fs: 8_000 };
        assert!(matches!(apply_rir(&x, &other), Err(Error::Invariant(_))));
    }

    #[test]
    fn convolution_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..3000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..700).map(|_| rng.random_range(-0.1..0.1)).collect();
        let y = apply_rir(
            &AudioClip::new(x.clone(), 16_000).unwrap(),
            &ImpulseResponse { taps: r.clone(), fs: 16_000 },
        )
        .unwrap();
        let oracle = brute_convolve(&x, &r);
        assert_eq!(y.len(), oracle.len());
        for (a, b) in y.samples().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tape_convolution_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = ImpulseResponse {
            taps: (0..50).map(|_| rng.random_range(-0.5..0.5)).collect(),
            fs: 16_000,
        };
        let loss_of = |x: &[f64]| -> f64 {
            let y = brute_convolve(x, &r.taps);
            y[..300].iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::new();
        let xv = tape.param("x", Array2::from_shape_vec((1, 300), x.clone()).unwrap());
        let y = rir_on_tape(&mut tape, xv, &r).unwrap();
        let wv = tape.constant(Array2::from_shape_vec((300, 1), w.clone()).unwrap());
        let dot = tape.matmul(y, wv);
        let loss = tape.sum(dot);
        assert!((tape.scalar_value(loss) - loss_of(&x)).abs() < 1e-9);
        let g = tape.grad(loss).unwrap().wrt(xv, (1, 300));
        for &i in &[0usize, 13, 149, 250, 299] {
            let mut p = x.clone();
            p[i] += 1e-5;
            let mut m = x.clone();
            m[i] -= 1e-5;
            let fd = (loss_of(&p) - loss_of(&m)) / 2e-5;
            assert!((g[[0, i]] - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "{i}");
        }
    }

    #[test]
    fn energy_decays_late() {
        let mut cfg = room([1.3, 1.1, 1.2], [3.9, 3.0, 1.7], 10);
        cfg.absorption = [0.25; 6];
        let r = image_source_rir(&cfg).unwrap();
        let win = 160;
        let windows: Vec<f64> = r.taps.chunks(win).map(rms).collect();
        let peak = windows
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let late = &windows[peak..];
        let half = late.len() / 2;
        let early_energy: f64 = late[..half].iter().map(|v| v * v).sum();
        let late_energy: f64 = late[half..].iter().map(|v| v * v).sum();
        assert!(late_energy < early_energy);
    }

    #[test]
    fn sampling_rules() {
        let dist = RoomDistribution {
            dims_min: [4.0, 4.0, 3.0],
            dims_max: [4.0, 4.0, 3.0],
            wall_margin: 1.2,
            rt60_min: 0.3,
            rt60_max: 0.3,
            count: 3,
            ..RoomDistribution::default()
        };
        let rooms = sample_rooms(&dist).unwrap();
        assert!(rooms
            .windows(2)
            .all(|w| w[0].dims == w[1].dims && w[0].absorption == w[1].absorption));
        for r in &rooms {
            for a in 0..3 {
                assert!(r.source[a] >= 1.2 && r.source[a] <= r.dims[a] - 1.2);
                assert!(r.mic[a] >= 1.2 && r.mic[a] <= r.dims[a] - 1.2);
            }
        }

        let d = RoomDistribution::default();
        assert_eq!(sample_rooms(&d).unwrap(), sample_rooms(&d).unwrap());

        let wide = RoomDistribution {
            count: 1000,
            ..RoomDistribution::default()
        };
        let xs: Vec<f64> = sample_rooms(&RoomDistribution {
            dims_min: [3.0, 3.0, 2.5],
            dims_max: [5.0, 6.0, 3.0],
            ..wide
        })
        .unwrap()
        .iter()
        .map(|r| r.dims[0])
        .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let se = (4.0f64 / 12.0).sqrt() / (xs.len() as f64).sqrt();
        assert!((mean - 4.0).abs() < 3.0 * se);

        let bad = RoomDistribution {
            wall_margin: 2.0,
            ..RoomDistribution::default()
        };
        assert!(matches!(sample_rooms(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn sabine_round_trip() {
        let dims = [5.0, 4.0, 3.0];
        let a = sabine_absorption(dims, 0.4);
        let cfg = RoomConfig {
            dims,
            source: [1.0; 3],
            mic: [2.0; 3],
            absorption: [a; 6],
            max_order: 0,
            c: SPEED_OF_SOUND,
            fs: 16_000,
        };
        let rt60 = 0.161 * cfg.volume() / (cfg.surface() * a);
        assert!((rt60 - 0.4).abs() < 1e-12);
    }
}
