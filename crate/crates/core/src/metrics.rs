//! Decision layer on top of frame posteriors, event matching and metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing, thresholding and matching parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionConfig {
    pub threshold: f64,
    /// Trailing moving-average length in frames.
    pub smoothing: usize,
    /// Minimum spacing between events, frames.
    pub refractory: usize,
    pub tolerance_ms: f64,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            smoothing: 30,
            refractory: 100,
            tolerance_ms: 750.0,
        }
    }
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) || self.smoothing == 0 || !(self.tolerance_ms >= 0.0) {
            return Err(Error::Config(format!("invalid decision parameters: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub onset: usize,
    pub offset: usize,
    pub peak: f64,
}

/// A ground-truth keyword interval in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthInterval {
    pub start: f64,
    pub end: f64,
}

/// Trailing moving average; the first frames average what is available.
pub fn smooth(posteriors: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(posteriors.len());
    let mut acc = 0.0;
    for (i, p) in posteriors.iter().enumerate() {
        acc += p;
        if i >= w {
            acc -= posteriors[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Fires on upward crossings of `threshold` by the smoothed posterior,
/// suppressing any crossing within `refractory` frames of the last event.
pub fn detect_events(posteriors: &[f64], threshold: f64, smoothing: usize, refractory: usize) -> Vec<DetectionEvent> {
    let s = smooth(posteriors, smoothing);
    let mut events: Vec<DetectionEvent> = Vec::new();
    let mut prev = 0.0;
    let mut t = 0;
    while t < s.len() {
        let up = s[t] >= threshold && prev < threshold;
        prev = s[t];
        let allowed = events.last().is_none_or(|e| t >= e.onset + refractory);
        if up && allowed {
            let mut end = t;
            let mut peak = s[t];
            while end + 1 < s.len() && s[end + 1] >= threshold {
                end += 1;
                peak = peak.max(s[end]);
            }
            events.push(DetectionEvent {
                onset: t,
                offset: end,
                peak,
            });
        }
        t += 1;
    }
    events
}

/// Converts frame indices to seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTiming {
    pub hop: usize,
    pub sample_rate: u32,
}

impl FrameTiming {
    pub fn seconds(&self, frame: usize) -> f64 {
        (frame * self.hop) as f64 / self.sample_rate as f64
    }

    pub fn frame_at(&self, seconds: f64) -> usize {
        (seconds * self.sample_rate as f64 / self.hop as f64).floor().max(0.0) as usize
    }
}

/// Per-clip confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Negative one-second windows containing an unmatched event.
    pub false_alarm_windows: usize,
    pub negative_windows: usize,
}

fn compatible(onset: f64, truth: &TruthInterval, tol: f64) -> bool {
    onset >= truth.start - tol && onset <= truth.end + tol
}

fn augment(
    e: usize,
    adj: &[Vec<usize>],
    owner: &mut [Option<usize>],
    seen: &mut [bool],
) -> bool {
    for &t in &adj[e] {
        if seen[t] {
            continue;
        }
        seen[t] = true;
        if owner[t].is_none_or(|o| augment(o, adj, owner, seen)) {
            owner[t] = Some(e);
            return true;
        }
    }
    false
}

/// Maximum one-to-one matching of event onsets to truth intervals; returns
/// for each event the truth index it is matched to.
pub fn match_events(onsets: &[f64], truths: &[TruthInterval], tolerance_s: f64) -> Vec<Option<usize>> {
    let adj: Vec<Vec<usize>> = onsets
        .iter()
        .map(|&o| (0..truths.len()).filter(|&t| compatible(o, &truths[t], tolerance_s)).collect())
        .collect();
    let mut owner = vec![None; truths.len()];
    for e in 0..onsets.len() {
        let mut seen = vec![false; truths.len()];
        augment(e, &adj, &mut owner, &mut seen);
    }
    let mut assigned = vec![None; onsets.len()];
    for (t, o) in owner.iter().enumerate() {
        if let Some(e) = o {
            assigned[*e] = Some(t);
        }
    }
    assigned
}

/// Scores one clip of `duration_s` seconds.
pub fn evaluate(
    events: &[DetectionEvent],
    truths: &[TruthInterval],
    timing: FrameTiming,
    tolerance_ms: f64,
    duration_s: f64,
) -> ClipCounts {
    let tol = tolerance_ms / 1000.0;
    let onsets: Vec<f64> = events.iter().map(|e| timing.seconds(e.onset)).collect();
    let assigned = match_events(&onsets, truths, tol);
    let tp = assigned.iter().filter(|a| a.is_some()).count();
    let windows = duration_s.floor().max(0.0) as usize;
    let mut negative = 0;
    let mut alarms = 0;
    for k in 0..windows {
        let (lo, hi) = (k as f64, k as f64 + 1.0);
        if truths.iter().any(|t| t.start - tol < hi && t.end + tol > lo) {
            continue;
        }
        negative += 1;
        if onsets
            .iter()
            .zip(&assigned)
            .any(|(&o, a)| a.is_none() && o >= lo && o < hi)
        {
            alarms += 1;
        }
    }
    ClipCounts {
        true_positives: tp,
        false_positives: events.len() - tp,
        false_negatives: truths.len() - tp,
        false_alarm_windows: alarms,
        negative_windows: negative,
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub miss_rate: f64,
    pub false_alarm_rate: f64,
    /// Number of clips scored.
    pub sample_count: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl MetricsReport {
    pub fn from_counts(counts: &[ClipCounts]) -> Self {
        let sum = |f: fn(&ClipCounts) -> usize| counts.iter().map(f).sum::<usize>();
        let tp = sum(|c| c.true_positives);
        let fp = sum(|c| c.false_positives);
        let fn_ = sum(|c| c.false_negatives);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            miss_rate: 1.0 - recall,
            false_alarm_rate: ratio(sum(|c| c.false_alarm_windows), sum(|c| c.negative_windows)),
            sample_count: counts.len(),
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
        }
    }

    pub const CSV_HEADER: &'static str =
        "condition,precision,recall,f1,miss_rate,false_alarm_rate,clips,tp,fp,fn";

    pub fn csv_row(&self, condition: &str) -> String {
        format!(
            "{condition},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            self.precision,
            self.recall,
            self.f1,
            self.miss_rate,
            self.false_alarm_rate,
            self.sample_count,
            self.true_positives,
            self.false_positives,
            self.false_negatives
        )
    }
}

/// Posteriors and references for one scored clip.
#[derive(Debug, Clone)]
pub struct ScoredClip {
    pub posteriors: Vec<f64>,
    pub truths: Vec<TruthInterval>,
    pub duration_s: f64,
}

pub fn score_clips(clips: &[ScoredClip], decision: &DecisionConfig, timing: FrameTiming) -> MetricsReport {
    let counts: Vec<ClipCounts> = clips
        .iter()
        .map(|c| {
            let events = detect_events(&c.posteriors, decision.threshold, decision.smoothing, decision.refractory);
            evaluate(&events, &c.truths, timing, decision.tolerance_ms, c.duration_s)
        })
        .collect();
    MetricsReport::from_counts(&counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub tau: f64,
    pub false_alarm_rate: f64,
    pub miss_rate: f64,
}

/// Sweeps the decision threshold. False alarms come from the full event
/// pipeline; a keyword counts as missed when the smoothed posterior never
/// reaches `tau` inside its tolerance window, which keeps the miss rate
/// monotone in `tau`.
pub fn det_curve(
    clips: &[ScoredClip],
    taus: &[f64],
    decision: &DecisionConfig,
    timing: FrameTiming,
) -> Result<Vec<DetPoint>> {
    if taus.len() < 2 {
        return Err(Error::Config("a DET curve needs at least two thresholds".into()));
    }
    let tol = decision.tolerance_ms / 1000.0;
    let mut peaks = Vec::new();
    for c in clips {
        let s = smooth(&c.posteriors, decision.smoothing);
        for t in &c.truths {
            let lo = timing.frame_at(t.start - tol).min(s.len());
            let hi = (timing.frame_at(t.end + tol) + 1).min(s.len());
            peaks.push(s[lo..hi].iter().copied().fold(0.0, f64::max));
        }
    }
    taus.iter()
        .map(|&tau| {
            let d = DecisionConfig {
                threshold: tau,
                ..decision.clone()
            };
            d.validate()?;
            let far = score_clips(clips, &d, timing).false_alarm_rate;
            let missed = peaks.iter().filter(|&&p| p < tau).count();
            Ok(DetPoint {
                tau,
                false_alarm_rate: far,
                miss_rate: ratio(missed, peaks.len()),
            })
        })
        .collect()
}

pub fn det_csv(points: &[DetPoint]) -> String {
    let mut out = String::from("tau,far,miss\n");
    for p in points {
        out.push_str(&format!("{:.6},{:.6},{:.6}\n", p.tau, p.false_alarm_rate, p.miss_rate));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TIMING: FrameTiming = FrameTiming {
        hop: 160,
        sample_rate: 16_000,
    };

    #[test]
    fn silent_posteriors_fire_nothing() {
        assert!(detect_events(&[0.0; 500], 0.5, 30, 100).is_empty());
    }

    #[test]
    fn single_pulse_fires_once() {
        let mut p = vec![0.0; 200];
        p[50..120].iter_mut().for_each(|v| *v = 1.0);
        let ev = detect_events(&p, 0.5, 30, 100);
        assert_eq!(ev.len(), 1);
        // Trailing average of 30 reaches 0.5 after 15 frames of the pulse.
        assert_eq!(ev[0].onset, 64);
        assert!(ev[0].peak >= 0.5 && ev[0].onset <= ev[0].offset);
    }

    #[test]
    fn refractory_trace_by_hand() {
        // w = 2, tau = 0.5, refractory 8 on 20 frames:
        // pulses at 2..4 and 8..10 -> smoothed crosses at 2 and 8; 8 < 2 + 8.
        let mut p = vec![0.0; 20];
        for i in [2, 3, 8, 9] {
            p[i] = 1.0;
        }
        let ev = detect_events(&p, 0.5, 2, 8);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].onset, 2);
        // With a shorter refractory both pulses fire.
        let ev = detect_events(&p, 0.5, 2, 5);
        assert_eq!(ev.iter().map(|e| e.onset).collect::<Vec<_>>(), vec![2, 8]);
    }

    fn ev(frame: usize) -> DetectionEvent {
        DetectionEvent {
            onset: frame,
            offset: frame,
            peak: 1.0,
        }
    }

    fn truth(start: f64, end: f64) -> TruthInterval {
        TruthInterval { start, end }
    }

    #[test]
    fn confusion_arithmetic() {
        let truths = [truth(1.0, 1.5), truth(4.0, 4.5), truth(7.0, 7.5)];
        let perfect = [ev(110), ev(410), ev(710)];
        let r = MetricsReport::from_counts(&[evaluate(&perfect, &truths, TIMING, 750.0, 10.0)]);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        let none = MetricsReport::from_counts(&[evaluate(&[], &truths, TIMING, 750.0, 10.0)]);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        assert_eq!(none.miss_rate, 1.0);

        let mixed = [ev(110), ev(410), ev(950)];
        let r = MetricsReport::from_counts(&[evaluate(&mixed, &truths, TIMING, 750.0, 10.0)]);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(r.false_alarm_rate > 0.0 && r.false_alarm_rate <= 1.0);
    }

    fn brute_force_matching(onsets: &[f64], truths: &[TruthInterval], tol: f64) -> usize {
        fn go(e: usize, onsets: &[f64], truths: &[TruthInterval], tol: f64, used: &mut Vec<bool>) -> usize {
            if e == onsets.len() {
                return 0;
            }
            let mut best = go(e + 1, onsets, truths, tol, used);
            for t in 0..truths.len() {
                if !used[t] && compatible(onsets[e], &truths[t], tol) {
                    used[t] = true;
                    best = best.max(1 + go(e + 1, onsets, truths, tol, used));
                    used[t] = false;
                }
            }
            best
        }
        go(0, onsets, truths, tol, &mut vec![false; truths.len()])
    }

    proptest! {
        #[test]
        fn matching_agrees_with_brute_force(
            onsets in prop::collection::vec(0.0f64..10.0, 0..7),
            starts in prop::collection::vec((0.0f64..9.0, 0.1f64..1.5), 0..6),
            tol in 0.0f64..1.0,
        ) {
            let truths: Vec<TruthInterval> = starts.iter().map(|&(s, d)| truth(s, s + d)).collect();
            let assigned = match_events(&onsets, &truths, tol);
            let matched = assigned.iter().filter(|a| a.is_some()).count();
            prop_assert_eq!(matched, brute_force_matching(&onsets, &truths, tol));
            let mut seen = std::collections::HashSet::new();
            for (e, a) in assigned.iter().enumerate() {
                if let Some(t) = a {
                    prop_assert!(seen.insert(*t));
                    prop_assert!(compatible(onsets[e], &truths[*t], tol));
                }
            }
        }

        #[test]
        fn metrics_stay_in_unit_interval(
            frames in prop::collection::vec(0usize..1000, 0..8),
            starts in prop::collection::vec(0.0f64..9.0, 0..5),
        ) {
            let events: Vec<DetectionEvent> = frames.iter().map(|&f| ev(f)).collect();
            let truths: Vec<TruthInterval> = starts.iter().map(|&s| truth(s, s + 0.6)).collect();
            let r = MetricsReport::from_counts(&[evaluate(&events, &truths, TIMING, 750.0, 10.0)]);
            for v in [r.precision, r.recall, r.f1, r.miss_rate, r.false_alarm_rate] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(r.f1 <= r.precision.max(r.recall) + 1e-12);
            prop_assert!(r.f1 >= r.precision.min(r.recall) - 1e-12);
        }
    }

    #[test]
    fn det_curve_extremes_and_monotonicity() {
        let mut p = vec![0.05; 1000];
        p[400..470].iter_mut().for_each(|v| *v = 0.9);
        p[800..820].iter_mut().for_each(|v| *v = 0.7);
        let clips = [ScoredClip {
            posteriors: p,
            truths: vec![truth(4.0, 4.6), truth(2.0, 2.5)],
            duration_s: 10.0,
        }];
        let taus: Vec<f64> = (1..=99).rev().map(|i| i as f64 / 100.0).collect();
        let pts = det_curve(&clips, &taus, &DecisionConfig::default(), TIMING).unwrap();
        assert_eq!(pts.len(), taus.len());
        assert_eq!(pts[0].miss_rate, 1.0);
        for w in pts.windows(2) {
            assert!(w[1].miss_rate <= w[0].miss_rate);
        }
        // Nothing fires at the top of the sweep; the bottom fires on the
        // baseline itself.
        assert_eq!(pts[0].false_alarm_rate, 0.0);
        assert!(pts.last().unwrap().false_alarm_rate > 0.0);
        assert!(det_curve(&clips, &[0.5], &DecisionConfig::default(), TIMING).is_err());
    }
}
