//! Objective evaluation: log-spectral distance with band splits, and the
//! LR/HR embedding cosine-similarity track.

use crate::dsp::{stft, Spectrogram, Waveform, Window};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LsdBand {
    Full,
    Low,
    High,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LsdParams {
    pub fft_size: usize,
    pub hop: usize,
    pub split_hz: f64,
    /// Compare log power spectra (`log10 |S|^2`); magnitude convention
    /// (`log10 |S|`) when false.
    pub power: bool,
    /// Magnitudes are floored here before taking logs.
    pub floor: f64,
}

impl Default for LsdParams {
    fn default() -> Self {
        LsdParams { fft_size: 2048, hop: 512, split_hz: 4000.0, power: true, floor: 1e-8 }
    }
}

/// Per-file LSD summary.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LsdReport {
    pub lsd: f64,
    pub lsd_lf: f64,
    pub lsd_hf: f64,
    pub split_hz: f64,
    pub fft_size: usize,
    pub hop: usize,
    pub power: bool,
}

fn band_bins(s: &Spectrogram, band: LsdBand, split_hz: f64) -> Vec<usize> {
    (0..s.bins)
        .filter(|&k| match band {
            LsdBand::Full => true,
            LsdBand::Low => s.bin_hz(k) < split_hz,
            LsdBand::High => s.bin_hz(k) >= split_hz,
        })
        .collect()
}

/// Per-frame log-spectral distances over the selected band.
pub fn lsd_frames(
    s_ref: &Spectrogram,
    s_est: &Spectrogram,
    band: LsdBand,
    params: &LsdParams,
) -> Result<Vec<f64>> {
    if s_ref.bins != s_est.bins || s_ref.sample_rate != s_est.sample_rate {
        return Err(Error::usage("spectrogram geometry mismatch"));
    }
    let frames = s_ref.frames.min(s_est.frames);
    let bins = band_bins(s_ref, band, params.split_hz);
    if bins.is_empty() {
        return Err(Error::usage(format!(
            "band {band:?} selects no bins at split {} Hz",
            params.split_hz
        )));
    }
    let scale = if params.power { 2.0 } else { 1.0 };
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut acc = 0.0f64;
        for &k in &bins {
            let a = f64::from(s_ref.mag(f, k)).max(params.floor).log10() * scale;
            let b = f64::from(s_est.mag(f, k)).max(params.floor).log10() * scale;
            acc += (a - b) * (a - b);
        }
        out.push((acc / bins.len() as f64).sqrt());
    }
    Ok(out)
}

/// Log-spectral distance between two equal-rate signals; lengths are
/// equalized by trimming to the shorter one. Returns 0 for signals shorter
/// than one analysis frame.
pub fn lsd(
    reference: &Waveform,
    estimate: &Waveform,
    band: LsdBand,
    params: &LsdParams,
) -> Result<f64> {
    if reference.sample_rate != estimate.sample_rate {
        return Err(Error::usage(format!(
            "sample-rate mismatch: {} vs {}",
            reference.sample_rate, estimate.sample_rate
        )));
    }
    let n = reference.len().min(estimate.len());
    let r = Waveform::new(reference.samples[..n].to_vec(), reference.sample_rate)?;
    let e = Waveform::new(estimate.samples[..n].to_vec(), estimate.sample_rate)?;
    let s_ref = stft(&r, params.fft_size, params.hop, Window::Hann)?;
    let s_est = stft(&e, params.fft_size, params.hop, Window::Hann)?;
    if s_ref.frames == 0 {
        return Ok(0.0);
    }
    let frames = lsd_frames(&s_ref, &s_est, band, params)?;
    Ok(frames.iter().sum::<f64>() / frames.len() as f64)
}

/// Full report over all three bands.
pub fn lsd_report(
    reference: &Waveform,
    estimate: &Waveform,
    params: &LsdParams,
) -> Result<LsdReport> {
    Ok(LsdReport {
        lsd: lsd(reference, estimate, LsdBand::Full, params)?,
        lsd_lf: lsd(reference, estimate, LsdBand::Low, params)?,
        lsd_hf: lsd(reference, estimate, LsdBand::High, params)?,
        split_hz: params.split_hz,
        fft_size: params.fft_size,
        hop: params.hop,
        power: params.power,
    })
}

/// Per-frame cosine similarity between two `[B, D, T]` embeddings, returned
/// as one track per batch item. Frames with (near-)zero norm on either side
/// map to 0.
pub fn embedding_cosine_track<T: Scalar>(
    z_l: &Tensor<T>,
    z_h: &Tensor<T>,
) -> Result<Vec<Vec<f64>>> {
    if z_l.shape() != z_h.shape() || z_l.ndim() != 3 {
        return Err(Error::usage(format!(
            "embedding shapes must match as [B, D, T]: {:?} vs {:?}",
            z_l.shape(),
            z_h.shape()
        )));
    }
    let (b, d, t) = (z_l.shape()[0], z_l.shape()[1], z_l.shape()[2]);
    let mut tracks = Vec::with_capacity(b);
    for bi in 0..b {
        let mut track = Vec::with_capacity(t);
        for ti in 0..t {
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for di in 0..d {
                let a = z_l.data()[(bi * d + di) * t + ti].as_f64();
                let c = z_h.data()[(bi * d + di) * t + ti].as_f64();
                dot += a * c;
                na += a * a;
                nb += c * c;
            }
            let denom = na.sqrt() * nb.sqrt();
            track.push(if denom < 1e-12 { 0.0 } else { dot / denom });
        }
        tracks.push(track);
    }
    Ok(tracks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::simulate_lr;
    use rand::Rng;

    fn noise(n: usize, seed: u64, amp: f32) -> Waveform {
        let mut rng = crate::rng::derive(seed, "metrics-noise", 0);
        let samples = (0..n).map(|_| amp * (rng.random::<f32>() - 0.5)).collect();
        Waveform::new(samples, 16_000).unwrap()
    }

    #[test]
    fn identical_signals_have_zero_lsd() {
        let w = noise(8192, 1, 0.8);
        let p = LsdParams::default();
        for band in [LsdBand::Full, LsdBand::Low, LsdBand::High] {
            assert_eq!(lsd(&w, &w, band, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn constant_gain_ten_gives_lsd_two() {
        // log10((10a)^2) - log10(a^2) = 2 per bin, so LSD = 2 exactly
        let w = noise(8192, 2, 0.09);
        let scaled = Waveform::new(w.samples.iter().map(|&s| 10.0 * s).collect(), 16_000).unwrap();
        let got = lsd(&w, &scaled, LsdBand::Full, &LsdParams::default()).unwrap();
        assert!((got - 2.0).abs() < 1e-5, "{got}");
    }

    #[test]
    fn magnitude_convention_halves_the_distance() {
        let w = noise(8192, 3, 0.09);
        let scaled = Waveform::new(w.samples.iter().map(|&s| 10.0 * s).collect(), 16_000).unwrap();
        let p = LsdParams { power: false, ..LsdParams::default() };
        let got = lsd(&w, &scaled, LsdBand::Full, &p).unwrap();
        assert!((got - 1.0).abs() < 1e-5, "{got}");
    }

    #[test]
    fn band_limited_signal_has_hf_dominated_distance() {
        let w = noise(16_000, 4, 0.8);
        let lr = simulate_lr(&w, 4000.0).unwrap();
        let p = LsdParams::default();
        let lf = lsd(&w, &lr, LsdBand::Low, &p).unwrap();
        let hf = lsd(&w, &lr, LsdBand::High, &p).unwrap();
        assert!(hf > 4.0 * lf, "hf {hf} vs lf {lf}");
    }

    #[test]
    fn band_split_recombines_to_full() {
        let a = noise(16_000, 5, 0.7);
        let b = noise(16_000, 6, 0.5);
        let p = LsdParams::default();
        let s_a = stft(&a, p.fft_size, p.hop, Window::Hann).unwrap();
        let s_b = stft(&b, p.fft_size, p.hop, Window::Hann).unwrap();
        let lf = lsd_frames(&s_a, &s_b, LsdBand::Low, &p).unwrap();
        let hf = lsd_frames(&s_a, &s_b, LsdBand::High, &p).unwrap();
        let full = lsd_frames(&s_a, &s_b, LsdBand::Full, &p).unwrap();
        let n_lf = band_bins(&s_a, LsdBand::Low, p.split_hz).len() as f64;
        let n_hf = band_bins(&s_a, LsdBand::High, p.split_hz).len() as f64;
        for f in 0..full.len() {
            let rebuilt =
                ((n_lf * lf[f] * lf[f] + n_hf * hf[f] * hf[f]) / (n_lf + n_hf)).sqrt();
            assert!((rebuilt - full[f]).abs() < 1e-6, "frame {f}");
        }
        // the band bin sets partition the full set
        assert_eq!(n_lf as usize + n_hf as usize, s_a.bins);
    }

    #[test]
    fn lsd_is_symmetric_and_nonnegative() {
        let a = noise(8192, 7, 0.4);
        let b = noise(8192, 8, 0.6);
        let p = LsdParams::default();
        let ab = lsd(&a, &b, LsdBand::Full, &p).unwrap();
        let ba = lsd(&b, &a, LsdBand::Full, &p).unwrap();
        assert!(ab >= 0.0);
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn rate_mismatch_is_usage_error() {
        let a = noise(4096, 9, 0.4);
        let b = Waveform::new(a.samples.clone(), 8_000).unwrap();
        assert!(lsd(&a, &b, LsdBand::Full, &LsdParams::default()).is_err());
    }

    #[test]
    fn cosine_track_identity_and_orthogonal() {
        let z = Tensor::<f32>::from_vec(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let same = embedding_cosine_track(&z, &z).unwrap();
        assert_eq!(same, vec![vec![1.0, 1.0]]);
        // orthogonal per frame: swap channels
        let w = Tensor::<f32>::from_vec(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let orth = embedding_cosine_track(&z, &w).unwrap();
        assert_eq!(orth, vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn cosine_track_zero_norm_is_zero_and_range_bounded() {
        let mut rng = crate::rng::derive(10, "cos", 0);
        let a = Tensor::<f32>::randn(vec![2, 5, 7], &mut rng);
        let b = Tensor::<f32>::randn(vec![2, 5, 7], &mut rng);
        let tracks = embedding_cosine_track(&a, &b).unwrap();
        for track in &tracks {
            for &v in track {
                assert!((-1.0..=1.0).contains(&v), "{v}");
            }
        }
        let z = Tensor::<f32>::zeros(vec![1, 3, 2]);
        let t = embedding_cosine_track(&z, &z).unwrap();
        assert_eq!(t, vec![vec![0.0, 0.0]]);
    }
}
