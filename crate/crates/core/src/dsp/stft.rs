//! Short-time Fourier analysis (magnitudes only, non-differentiable fast path).

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Window {
    Hann,
    Rect,
}

/// Magnitude spectrogram, `frames x bins` row-major with `bins = fft/2 + 1`.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub mags: Vec<f32>,
    pub frames: usize,
    pub bins: usize,
    pub fft_size: usize,
    pub hop: usize,
    pub window: Window,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn mag(&self, frame: usize, bin: usize) -> f32 {
        self.mags[frame * self.bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[f32] {
        &self.mags[frame * self.bins..(frame + 1) * self.bins]
    }

    /// Frequency of a bin center in Hz.
    pub fn bin_hz(&self, bin: usize) -> f64 {
        bin as f64 * f64::from(self.sample_rate) / self.fft_size as f64
    }
}

pub fn window_samples(window: Window, len: usize) -> Vec<f32> {
    match window {
        Window::Rect => vec![1.0; len],
        Window::Hann => (0..len)
            .map(|n| {
                let x = 2.0 * std::f64::consts::PI * n as f64 / len as f64;
                (0.5 - 0.5 * x.cos()) as f32
            })
            .collect(),
    }
}

/// Frame count is `1 + floor((len - fft)/hop)` for `len >= fft`; shorter
/// signals produce an empty (0-frame) spectrogram rather than an error.
pub fn stft(w: &Waveform, fft_size: usize, hop: usize, window: Window) -> Result<Spectrogram> {
    if !fft_size.is_power_of_two() {
        return Err(Error::usage(format!(
            "fft size {fft_size} must be a power of two"
        )));
    }
    if hop == 0 || hop > fft_size {
        return Err(Error::usage(format!("hop {hop} must be in 1..={fft_size}")));
    }
    let n = w.samples.len();
    let frames = if n < fft_size { 0 } else { 1 + (n - fft_size) / hop };
    let bins = fft_size / 2 + 1;
    let win = window_samples(window, fft_size);

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut buf = vec![Complex::new(0.0f32, 0.0); fft_size];
    let mut scratch = vec![Complex::new(0.0f32, 0.0); fft.get_inplace_scratch_len()];

    let mut mags = vec![0.0f32; frames * bins];
    for f in 0..frames {
        let off = f * hop;
        for i in 0..fft_size {
            buf[i] = Complex::new(w.samples[off + i] * win[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..bins {
            mags[f * bins + k] = buf[k].norm();
        }
    }
    Ok(Spectrogram {
        mags,
        frames,
        bins,
        fft_size,
        hop,
        window,
        sample_rate: w.sample_rate,
    })
}
