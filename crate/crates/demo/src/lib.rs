//! Three interactive views for the browser page in `www/`: a plucked-string
//! note, a shoebox room impulse response and the masking threshold of a
//! pair of tones.
//!
//! The `*_samples` / `*_taps` / [`masking_curve`] functions are plain Rust so
//! they can be tested natively; the `#[wasm_bindgen]` wrappers only convert
//! errors into JS exceptions.

use wasm_bindgen::prelude::*;

use wakejam::audio::{psd, FrameSpec, WORKING_RATE};
use wakejam::psycho::frame_threshold;
use wakejam::room::{image_source_rir, RoomConfig, SPEED_OF_SOUND};
use wakejam::synth::{render_sequence, Note, Recursion, SynthParams};

/// Window length of the masking view.
pub const MASKING_WINDOW: usize = 512;

fn js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// One note at `freq_hz` / `vol_db`, `len` samples at 16 kHz.
pub fn ks_samples(freq_hz: f64, vol_db: f64, len: usize, seed: u64, output_scaled: bool) -> Result<Vec<f64>, String> {
    let params = SynthParams {
        notes: vec![Note {
            freq_hz,
            dur_samples: len,
            vol_db,
        }],
        bpm: 60.0,
        fs: WORKING_RATE,
        beta: 1.0,
        seeds: vec![seed],
        recursion: if output_scaled { Recursion::OutputScaled } else { Recursion::Verbatim },
    };
    params.validate().map_err(|e| e.to_string())?;
    Ok(render_sequence(&params).map_err(|e| e.to_string())?.into_samples())
}

#[wasm_bindgen]
pub fn ks_waveform(freq_hz: f64, vol_db: f64, len: usize, seed: u32, output_scaled: bool) -> Result<Vec<f64>, JsValue> {
    ks_samples(freq_hz, vol_db, len, seed as u64, output_scaled).map_err(js)
}

/// Taps of a room with uniform wall absorption.
#[allow(clippy::too_many_arguments)]
pub fn rir_taps(dims: [f64; 3], source: [f64; 3], mic: [f64; 3], absorption: f64, max_order: usize) -> Result<Vec<f64>, String> {
    let room = RoomConfig {
        dims,
        source,
        mic,
        absorption: [absorption; 6],
        max_order,
        c: SPEED_OF_SOUND,
        fs: WORKING_RATE,
    };
    room.validate().map_err(|e| e.to_string())?;
    Ok(image_source_rir(&room).map_err(|e| e.to_string())?.taps)
}

/// `room` is `[lx, ly, lz, sx, sy, sz, mx, my, mz]`.
#[wasm_bindgen]
pub fn room_impulse_response(room: &[f64], absorption: f64, max_order: usize) -> Result<Vec<f64>, JsValue> {
    if room.len() != 9 {
        return Err(js("room needs 9 coordinates"));
    }
    let v = |i: usize| [room[i], room[i + 1], room[i + 2]];
    rir_taps(v(0), v(3), v(6), absorption, max_order).map_err(js)
}

/// Spectrum and masking threshold of one frame holding two sine tones.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct MaskingCurve {
    freqs: Vec<f64>,
    level: Vec<f64>,
    threshold: Vec<f64>,
}

#[wasm_bindgen]
impl MaskingCurve {
    /// Bin centre frequencies in Hz.
    #[wasm_bindgen(getter)]
    pub fn freqs(&self) -> Vec<f64> {
        self.freqs.clone()
    }

    /// Tone spectrum on the normalized scale (loudest bin at 92 dB).
    #[wasm_bindgen(getter)]
    pub fn level(&self) -> Vec<f64> {
        self.level.clone()
    }

    /// Masking threshold on the same scale.
    #[wasm_bindgen(getter)]
    pub fn threshold(&self) -> Vec<f64> {
        self.threshold.clone()
    }
}

pub fn masking_curve(f1: f64, db1: f64, f2: f64, db2: f64) -> Result<MaskingCurve, String> {
    let n = MASKING_WINDOW;
    let fs = WORKING_RATE as f64;
    let w = FrameSpec::default().window.coefficients(n);
    let frame: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let tone = |f: f64, db: f64| 10f64.powf(db / 20.0) * (2.0 * std::f64::consts::PI * f * t).sin();
            w[i] * (tone(f1, db1) + tone(f2, db2))
        })
        .collect();
    let p = psd(&frame, n).map_err(|e| e.to_string())?;
    let threshold = frame_threshold(&p.bins, WORKING_RATE, n);
    let offset = wakejam::psycho::NORMALIZED_PEAK_DB - p.max();
    Ok(MaskingCurve {
        freqs: (0..p.bins.len()).map(|k| k as f64 * fs / n as f64).collect(),
        level: p.bins.iter().map(|b| b + offset).collect(),
        threshold,
    })
}

/// Tone levels are in dB relative to full scale.
#[wasm_bindgen(js_name = maskingCurve)]
pub fn masking_curve_js(f1: f64, db1: f64, f2: f64, db2: f64) -> Result<MaskingCurve, JsValue> {
    masking_curve(f1, db1, f2, db2).map_err(js)
}
