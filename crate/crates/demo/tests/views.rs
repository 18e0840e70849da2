use wakejam_demo::{ks_samples, masking_curve, rir_taps, MASKING_WINDOW};

#[test]
fn ks_note_is_finite_and_decays() {
    let x = ks_samples(440.0, 80.0, 8000, 3, true).unwrap();
    assert_eq!(x.len(), 8000);
    assert!(x.iter().all(|v| v.is_finite()));
    let energy = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>();
    assert!(energy(&x[6000..]) < energy(&x[..2000]));
    assert!(ks_samples(5.0, 80.0, 100, 0, true).is_err());
}

#[test]
fn rir_has_direct_path_first() {
    let taps = rir_taps([4.0, 5.0, 3.0], [1.0, 1.2, 1.1], [3.0, 4.0, 1.9], 0.3, 1).unwrap();
    let d = (4.0f64 + 7.84 + 0.64).sqrt();
    let first = taps.iter().position(|&t| t != 0.0).unwrap();
    assert!((first as f64 - 16000.0 * d / 343.0).abs() <= 1.0);
    // Six first-order images; some may share a sample index with another.
    let nonzero = taps.iter().filter(|&&t| t != 0.0).count();
    assert!((2..=7).contains(&nonzero));
    assert!(rir_taps([4.0, 5.0, 3.0], [5.0, 1.0, 1.0], [1.0, 1.0, 1.0], 0.3, 1).is_err());
}

#[test]
fn masking_curve_peaks_near_tone() {
    let c = masking_curve(1000.0, -20.0, 3000.0, -40.0).unwrap();
    assert_eq!(c.freqs().len(), MASKING_WINDOW / 2 + 1);
    let level = c.level();
    let peak = level.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!((peak - 92.0).abs() < 1e-9);
    let thr = c.threshold();
    let k1000 = (1000.0 * MASKING_WINDOW as f64 / 16000.0) as usize;
    // The masker raises the threshold near it far above the quiet-region floor.
    assert!(thr[k1000] > thr[200] + 20.0);
}
