//! Audio I/O, analysis and resampling utilities shared by the voicing
//! extractor, the codec and the metrics.

mod filter;
mod stft;
mod wav;

pub use filter::simulate_lr;
pub use stft::{stft, Spectrogram, Window};
pub use wav::{load_wav, save_wav, save_wav_encoded, WavEncoding};

use crate::error::{Error, Result};

/// Mono waveform with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::usage("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::usage("waveform contains non-finite samples"));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Map per-frame labels onto a new frame grid spanning the same time range,
/// assigning each output frame the label of the nearest source frame center.
///
/// The mapping depends only on the two frame counts: with both grids covering
/// the same extent, the source hop cancels out of the nearest-center rule.
pub fn align_to_frames(labels: &[u8], target_len: usize) -> Result<Vec<u8>> {
    if target_len == 0 {
        return Err(Error::usage("align_to_frames target length must be positive"));
    }
    if labels.is_empty() {
        return Err(Error::usage("align_to_frames on empty label sequence"));
    }
    if labels.len() == target_len {
        return Ok(labels.to_vec());
    }
    let n = labels.len() as f64;
    let m = target_len as f64;
    Ok((0..target_len)
        .map(|j| {
            let src = ((j as f64 + 0.5) * n / m - 0.5).round();
            let idx = src.clamp(0.0, n - 1.0) as usize;
            labels[idx]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn align_identity_on_same_grid() {
        let l = vec![0, 1, 2, 1, 0];
        assert_eq!(align_to_frames(&l, 5).unwrap(), l);
    }

    #[test]
    fn align_downsample_nearest_center() {
        assert_eq!(align_to_frames(&[0, 0, 1, 1, 2, 2], 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn align_upsample_repeats() {
        assert_eq!(align_to_frames(&[2], 3).unwrap(), vec![2, 2, 2]);
    }

    #[test]
    fn align_rejects_empty_input() {
        assert!(align_to_frames(&[], 3).is_err());
        assert!(align_to_frames(&[1], 0).is_err());
    }
}
