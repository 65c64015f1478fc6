//! Frame-level voicing extraction.
//!
//! Produces labels in `{0, 1, 2}` (silence / unvoiced / voiced) from a
//! waveform. Two branches run on the same frame grid and are combined by
//! elementwise masking: an RMS silence gate and an autocorrelation-based
//! voiced/unvoiced decision.
//!
//! Silence rule: frame RMS is measured in dBFS, floored at -100 dB. A frame
//! is silent iff it sits at the digital floor, or it is strictly below both
//! the 10th-percentile energy plus the margin and the loudest frame minus a
//! fixed 10 dB cap. The cap keeps a constant-energy signal from silencing
//! itself through its own percentile, and keeping it fixed (rather than tied
//! to the margin) makes the gate monotone in the margin.
//!
//! V/UV rule: per frame, a Hann-windowed, mean-removed autocorrelation is
//! normalized by lag 0 and divided by the window's own autocorrelation so a
//! stationary tone scores ~1 at its period regardless of lag. The first local
//! maximum above the voicing threshold decides: in the valid lag range it
//! means voiced; below it (period shorter than `1/f0_max`) the fundamental is
//! out of range and the frame counts as unvoiced. The analysis window extends
//! to 3.2 periods of `f0_min` so low pitches fit, while the frame grid stays
//! at the configured hop.

use crate::dsp::{align_to_frames, Waveform};
use crate::error::{Error, Result};

pub const LABEL_SILENCE: u8 = 0;
pub const LABEL_UNVOICED: u8 = 1;
pub const LABEL_VOICED: u8 = 2;

const FLOOR_DB: f64 = -100.0;
const LOUD_CAP_DB: f64 = 10.0;

/// Per-frame voicing labels on a fixed frame grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VoicingSequence {
    pub labels: Vec<u8>,
    pub frame_len: usize,
    pub frame_hop: usize,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct VoicingConfig {
    /// Analysis frame length in milliseconds (silence gate).
    pub frame_ms: f64,
    /// Hop in samples; aligned to the codec latent hop so labels pair 1:1
    /// with embedding frames.
    pub hop: usize,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    /// Decision level on the corrected normalized autocorrelation.
    pub voicing_threshold: f64,
    pub silence_margin_db: f64,
    /// Majority-vote smoothing window (odd).
    pub smooth_window: usize,
}

impl Default for VoicingConfig {
    fn default() -> Self {
        VoicingConfig {
            frame_ms: 25.0,
            hop: 160,
            f0_min_hz: 50.0,
            f0_max_hz: 800.0,
            voicing_threshold: 0.45,
            silence_margin_db: 10.0,
            smooth_window: 5,
        }
    }
}

fn frame_count(n: usize, frame_len: usize, hop: usize) -> usize {
    if n < frame_len {
        0
    } else {
        1 + (n - frame_len) / hop
    }
}

fn rms_db(frame: &[f32]) -> f64 {
    let e: f64 = frame.iter().map(|&s| f64::from(s) * f64::from(s)).sum();
    let rms = (e / frame.len() as f64).sqrt();
    (20.0 * rms.log10()).max(FLOOR_DB)
}

/// Linear-interpolation percentile of unsorted values, `q` in `[0, 100]`.
fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    }
}

/// Binary silence mask (0 = silent, 1 = active). Empty input after framing
/// yields an empty mask; an all-zero signal yields all-silent frames.
pub fn silence_mask(
    w: &Waveform,
    frame_len: usize,
    hop: usize,
    margin_db: f64,
) -> Result<Vec<u8>> {
    if frame_len == 0 || hop == 0 {
        return Err(Error::usage("frame length and hop must be positive"));
    }
    let frames = frame_count(w.len(), frame_len, hop);
    if frames == 0 {
        return Ok(Vec::new());
    }
    let dbs: Vec<f64> = (0..frames)
        .map(|i| rms_db(&w.samples[i * hop..i * hop + frame_len]))
        .collect();
    let p10 = percentile(&dbs, 10.0);
    let loudest = dbs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = (p10 + margin_db).min(loudest - LOUD_CAP_DB);
    Ok(dbs
        .iter()
        .map(|&db| u8::from(!(db <= FLOOR_DB || db < threshold)))
        .collect())
}

/// Autocorrelation of `x` against itself for lags `0..=max_lag`.
fn autocorr(x: &[f64], max_lag: usize) -> Vec<f64> {
    (0..=max_lag)
        .map(|lag| x.iter().zip(&x[lag..]).map(|(a, b)| a * b).sum())
        .collect()
}

/// Per-frame voiced/unvoiced labels in `{1, 2}`.
pub fn f0_vuv(
    w: &Waveform,
    frame_len: usize,
    hop: usize,
    f0_min_hz: f64,
    f0_max_hz: f64,
    threshold: f64,
) -> Result<Vec<u8>> {
    if f0_min_hz >= f0_max_hz {
        return Err(Error::usage(format!(
            "f0 range [{f0_min_hz}, {f0_max_hz}] is empty"
        )));
    }
    if f0_min_hz <= 0.0 {
        return Err(Error::usage("f0_min must be positive"));
    }
    let sr = f64::from(w.sample_rate);
    if sr < 2.0 * f0_max_hz {
        return Err(Error::usage(format!(
            "sample rate {sr} below 2 * f0_max ({f0_max_hz})"
        )));
    }
    let frames = frame_count(w.len(), frame_len, hop);
    let lag_min = (sr / f0_max_hz).floor() as usize;
    let lag_max = (sr / f0_min_hz).ceil() as usize;
    // 3.2 pitch periods so the largest lag keeps enough overlap
    let ana_len = frame_len.max((3.2 * sr / f0_min_hz).ceil() as usize);

    let mut labels = Vec::with_capacity(frames);
    for i in 0..frames {
        let center = i * hop + frame_len / 2;
        let start = center.saturating_sub(ana_len / 2);
        let end = (start + ana_len).min(w.len());
        let seg = &w.samples[start..end];
        labels.push(classify_frame(seg, lag_min, lag_max, threshold));
    }
    Ok(labels)
}

fn classify_frame(seg: &[f32], lag_min: usize, lag_max: usize, threshold: f64) -> u8 {
    let n = seg.len();
    let lag_hi = lag_max.min(n / 2);
    if lag_hi < 2 || lag_min > lag_hi {
        return LABEL_UNVOICED;
    }
    let mean = seg.iter().map(|&s| f64::from(s)).sum::<f64>() / n as f64;
    let window: Vec<f64> = (0..n)
        .map(|j| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * j as f64 / n as f64).cos())
        .collect();
    let x: Vec<f64> = seg
        .iter()
        .zip(&window)
        .map(|(&s, w)| (f64::from(s) - mean) * w)
        .collect();
    let rx = autocorr(&x, lag_hi);
    if rx[0] < 1e-12 {
        return LABEL_UNVOICED;
    }
    let rw = autocorr(&window, lag_hi);
    // window-ACF correction: a stationary tone scores ~1 at its period
    let rho: Vec<f64> = (0..=lag_hi)
        .map(|lag| (rx[lag] / rx[0]) / (rw[lag] / rw[0]))
        .collect();
    // first local maximum above threshold decides
    for lag in 2..lag_hi {
        if rho[lag] > threshold && rho[lag] >= rho[lag - 1] && rho[lag] >= rho[lag + 1] {
            return if lag >= lag_min { LABEL_VOICED } else { LABEL_UNVOICED };
        }
    }
    LABEL_UNVOICED
}

/// Centered majority vote; ties keep the center label; edge frames use
/// truncated windows.
pub fn majority_smooth(labels: &[u8], window: usize) -> Vec<u8> {
    if window <= 1 || labels.is_empty() {
        return labels.to_vec();
    }
    let half = window / 2;
    let n = labels.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let mut counts = [0usize; 3];
            for &l in &labels[lo..hi] {
                counts[l as usize] += 1;
            }
            let best = *counts.iter().max().unwrap();
            let winners: Vec<u8> = (0u8..3)
                .filter(|&l| counts[l as usize] == best)
                .collect();
            if winners.len() == 1 {
                winners[0]
            } else {
                labels[i]
            }
        })
        .collect()
}

/// Full extraction: silence gate and V/UV branch on a shared grid, masked,
/// aligned to `target_len`, then majority-smoothed.
///
/// A signal too short to frame yields all-silence labels of the requested
/// length.
pub fn extract_voicing(
    w: &Waveform,
    target_len: usize,
    cfg: &VoicingConfig,
) -> Result<VoicingSequence> {
    if target_len == 0 {
        return Err(Error::usage("target length must be positive"));
    }
    let frame_len = ((cfg.frame_ms / 1000.0) * f64::from(w.sample_rate)).round() as usize;
    let frame_len = frame_len.max(1);
    let mask = silence_mask(w, frame_len, cfg.hop, cfg.silence_margin_db)?;
    if mask.is_empty() {
        return Ok(VoicingSequence {
            labels: vec![LABEL_SILENCE; target_len],
            frame_len,
            frame_hop: cfg.hop,
        });
    }
    let vuv = f0_vuv(
        w,
        frame_len,
        cfg.hop,
        cfg.f0_min_hz,
        cfg.f0_max_hz,
        cfg.voicing_threshold,
    )?;
    debug_assert_eq!(mask.len(), vuv.len());
    let combined: Vec<u8> = mask.iter().zip(&vuv).map(|(&m, &v)| m * v).collect();
    let aligned = align_to_frames(&combined, target_len)?;
    let smoothed = majority_smooth(&aligned, cfg.smooth_window);
    Ok(VoicingSequence {
        labels: smoothed,
        frame_len,
        frame_hop: cfg.hop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f32, sr: u32, n: usize, amp: f32) -> Waveform {
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f32::consts::PI * freq * i as f32 / sr as f32).sin())
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    #[test]
    fn constant_sine_has_no_silent_frames() {
        let w = sine(220.0, 16_000, 16_000, 1.0);
        let mask = silence_mask(&w, 400, 160, 10.0).unwrap();
        assert!(!mask.is_empty());
        assert!(mask.iter().all(|&m| m == 1), "constant-energy signal silenced itself");
    }

    #[test]
    fn half_sine_half_zero_splits() {
        let mut w = sine(220.0, 16_000, 16_000, 0.8);
        for s in &mut w.samples[8000..] {
            *s = 0.0;
        }
        let mask = silence_mask(&w, 400, 160, 10.0).unwrap();
        let frames = mask.len();
        // frames fully inside the sine half
        assert!(mask[..8000 / 160 - 3].iter().all(|&m| m == 1));
        // frames fully inside the zero half
        assert!(mask[8000 / 160 + 1..frames].iter().all(|&m| m == 0));
    }

    #[test]
    fn all_zero_signal_is_all_silent() {
        let w = Waveform::new(vec![0.0; 8000], 16_000).unwrap();
        let mask = silence_mask(&w, 400, 160, 10.0).unwrap();
        assert!(mask.iter().all(|&m| m == 0));
    }

    #[test]
    fn empty_after_framing_gives_empty_mask() {
        let w = Waveform::new(vec![0.1; 100], 16_000).unwrap();
        let mask = silence_mask(&w, 400, 160, 10.0).unwrap();
        assert!(mask.is_empty());
    }

    #[test]
    fn raising_margin_never_unsilences() {
        let mut rng = crate::rng::derive(9, "voicing-prop", 0);
        use rand::Rng;
        for _ in 0..10 {
            let n = 6000 + (rng.random::<u32>() % 6000) as usize;
            let samples: Vec<f32> = (0..n)
                .map(|i| {
                    let env = if (i / 800) % 3 == 0 { 0.0 } else { 0.7 };
                    env * (rng.random::<f32>() - 0.5)
                })
                .collect();
            let w = Waveform::new(samples, 16_000).unwrap();
            let m_lo = silence_mask(&w, 400, 160, 6.0).unwrap();
            let m_hi = silence_mask(&w, 400, 160, 14.0).unwrap();
            for (a, b) in m_lo.iter().zip(&m_hi) {
                // silent at low margin stays silent at high margin
                assert!(!(a == &0 && b == &1));
            }
        }
    }

    #[test]
    fn sine_200hz_is_voiced() {
        let w = sine(200.0, 16_000, 16_000, 0.8);
        let labels = f0_vuv(&w, 400, 160, 50.0, 800.0, 0.45).unwrap();
        assert!(labels.iter().all(|&l| l == LABEL_VOICED));
    }

    #[test]
    fn low_pitch_80hz_is_voiced() {
        let w = sine(80.0, 16_000, 16_000, 0.8);
        let labels = f0_vuv(&w, 400, 160, 50.0, 800.0, 0.45).unwrap();
        let voiced = labels.iter().filter(|&&l| l == LABEL_VOICED).count();
        assert!(voiced as f64 >= 0.95 * labels.len() as f64, "{voiced}/{}", labels.len());
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        use rand::Rng;
        let mut rng = crate::rng::derive(10, "vuv-noise", 0);
        let samples: Vec<f32> = (0..16_000).map(|_| rng.random::<f32>() - 0.5).collect();
        let w = Waveform::new(samples, 16_000).unwrap();
        let labels = f0_vuv(&w, 400, 160, 50.0, 800.0, 0.45).unwrap();
        let unvoiced = labels.iter().filter(|&&l| l == LABEL_UNVOICED).count();
        assert!(
            unvoiced as f64 >= 0.9 * labels.len() as f64,
            "{unvoiced}/{}",
            labels.len()
        );
    }

    #[test]
    fn tone_above_f0_range_is_unvoiced() {
        let w = sine(1500.0, 16_000, 16_000, 0.8);
        let labels = f0_vuv(&w, 400, 160, 50.0, 800.0, 0.45).unwrap();
        let unvoiced = labels.iter().filter(|&&l| l == LABEL_UNVOICED).count();
        assert!(
            unvoiced as f64 >= 0.95 * labels.len() as f64,
            "{unvoiced}/{}",
            labels.len()
        );
    }

    #[test]
    fn invalid_f0_range_is_usage_error() {
        let w = sine(200.0, 16_000, 4000, 0.5);
        assert!(f0_vuv(&w, 400, 160, 800.0, 50.0, 0.45).is_err());
    }

    #[test]
    fn majority_vote_removes_single_flip() {
        assert_eq!(majority_smooth(&[2, 2, 1, 2, 2], 5), vec![2, 2, 2, 2, 2]);
    }

    #[test]
    fn majority_vote_keeps_center_on_tie() {
        // window [0,0,1,1] at index 1 (truncated): tie between 0 and 1
        assert_eq!(majority_smooth(&[0, 0, 1, 1], 5)[1], 0);
        assert_eq!(majority_smooth(&[0, 0, 1, 1], 5)[2], 1);
    }

    #[test]
    fn smoothing_never_invents_labels() {
        use rand::Rng;
        let mut rng = crate::rng::derive(11, "smooth-prop", 0);
        for _ in 0..50 {
            let labels: Vec<u8> = (0..40).map(|_| (rng.random::<u32>() % 3) as u8).collect();
            let out = majority_smooth(&labels, 5);
            for (i, &o) in out.iter().enumerate() {
                let lo = i.saturating_sub(2);
                let hi = (i + 3).min(labels.len());
                assert!(labels[lo..hi].contains(&o));
            }
        }
    }

    #[test]
    fn digital_silence_extracts_all_zeros() {
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let seq = extract_voicing(&w, 100, &VoicingConfig::default()).unwrap();
        assert_eq!(seq.labels.len(), 100);
        assert!(seq.labels.iter().all(|&l| l == LABEL_SILENCE));
    }

    #[test]
    fn sine_with_gap_has_silent_run() {
        // 200 Hz sine with a 200 ms digital-zero gap in the middle
        let mut w = sine(200.0, 16_000, 16_000, 0.8);
        let gap = 8000..8000 + 3200;
        for s in &mut w.samples[gap.clone()] {
            *s = 0.0;
        }
        let target = 100;
        let seq = extract_voicing(&w, target, &VoicingConfig::default()).unwrap();
        assert_eq!(seq.labels.len(), target);
        // middle of the gap (frames ~53..66 on the 160-hop grid) is silent
        let gap_frames = &seq.labels[54..64];
        assert!(
            gap_frames.iter().all(|&l| l == LABEL_SILENCE),
            "gap: {gap_frames:?}"
        );
        // well inside the sine regions everything is voiced
        assert!(seq.labels[5..45].iter().all(|&l| l == LABEL_VOICED), "{:?}", &seq.labels[5..45]);
        assert!(seq.labels[75..95].iter().all(|&l| l == LABEL_VOICED), "{:?}", &seq.labels[75..95]);
    }

    #[test]
    fn output_length_always_matches_target() {
        let w = sine(150.0, 16_000, 9173, 0.5);
        for target in [1usize, 7, 57, 128] {
            let seq = extract_voicing(&w, target, &VoicingConfig::default()).unwrap();
            assert_eq!(seq.labels.len(), target);
            assert!(seq.labels.iter().all(|&l| l <= 2));
        }
    }

    #[test]
    fn too_short_signal_is_silence() {
        let w = sine(150.0, 16_000, 50, 0.5);
        let seq = extract_voicing(&w, 10, &VoicingConfig::default()).unwrap();
        assert_eq!(seq.labels, vec![0; 10]);
    }
}
