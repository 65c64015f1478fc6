//! Minimal RIFF/WAVE reader and writer: mono, PCM16 or float32.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

fn rd_u16(b: &[u8], off: usize) -> Result<u16> {
    b.get(off..off + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| Error::format("truncated WAV header"))
}

fn rd_u32(b: &[u8], off: usize) -> Result<u32> {
    b.get(off..off + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| Error::format("truncated WAV header"))
}

/// Load a mono PCM16 or float32 WAV file.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.is_empty() {
        return Err(Error::format("empty WAV file"));
    }
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::format("not a RIFF/WAVE file"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut off = 12usize;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = rd_u32(&bytes, off + 4)? as usize;
        let body_start = off + 8;
        if body_start + size > bytes.len() {
            return Err(Error::format("WAV chunk exceeds file size"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format("fmt chunk too short"));
                }
                fmt = Some((
                    rd_u16(&bytes, body_start)?,
                    rd_u16(&bytes, body_start + 2)?,
                    rd_u32(&bytes, body_start + 4)?,
                    rd_u16(&bytes, body_start + 14)?,
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_start + size]),
            _ => {}
        }
        // chunks are word-aligned
        off = body_start + size + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::format("WAV file has no fmt chunk"))?;
    let data = data.ok_or_else(|| Error::format("WAV file has no data chunk"))?;
    if channels != 1 {
        return Err(Error::format(format!(
            "only mono WAV is supported, got {channels} channels"
        )));
    }
    let samples = match (format, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| f32::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        (fmt, bits) => {
            return Err(Error::format(format!(
                "unsupported WAV encoding: format {fmt}, {bits} bits per sample"
            )))
        }
    };
    Waveform::new(samples, rate)
}

/// Save as PCM16 (the round-trip error is bounded by one quantization step,
/// `2^-15` per sample). Values outside `[-1, 1]` are clipped; the clip count
/// is logged and returned.
pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<usize> {
    save_wav_encoded(path, w, WavEncoding::Pcm16)
}

pub fn save_wav_encoded(
    path: impl AsRef<Path>,
    w: &Waveform,
    encoding: WavEncoding,
) -> Result<usize> {
    let mut clipped = 0usize;
    let mut clamp = |s: f32| -> f32 {
        if s > 1.0 {
            clipped += 1;
            1.0
        } else if s < -1.0 {
            clipped += 1;
            -1.0
        } else {
            s
        }
    };

    let (format, bits, payload): (u16, u16, Vec<u8>) = match encoding {
        WavEncoding::Pcm16 => {
            let mut p = Vec::with_capacity(w.samples.len() * 2);
            for &s in &w.samples {
                let v = (clamp(s) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                p.extend_from_slice(&v.to_le_bytes());
            }
            (1, 16, p)
        }
        WavEncoding::Float32 => {
            let mut p = Vec::with_capacity(w.samples.len() * 4);
            for &s in &w.samples {
                p.extend_from_slice(&clamp(s).to_le_bytes());
            }
            (3, 32, p)
        }
    };

    let block_align = bits / 8;
    let byte_rate = w.sample_rate * u32::from(block_align);
    let data_len = payload.len() as u32;
    let riff_len = 4 + 8 + 16 + 8 + data_len;

    let mut out = Vec::with_capacity(riff_len as usize + 8);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&riff_len.to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    out.extend_from_slice(&payload);

    let mut file = fs::File::create(path.as_ref())?;
    file.write_all(&out)?;
    if clipped > 0 {
        log::warn!(
            "clipped {clipped} samples while writing {:?}",
            path.as_ref()
        );
    }
    Ok(clipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f32, sr: u32, secs: f32, amp: f32) -> Waveform {
        let n = (sr as f32 * secs) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f32::consts::PI * freq * i as f32 / sr as f32).sin())
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    #[test]
    fn pcm16_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sine.wav");
        let w = sine(440.0, 16_000, 1.0, 1.0);
        let clipped = save_wav(&path, &w).unwrap();
        assert_eq!(clipped, 0);
        let r = load_wav(&path).unwrap();
        assert_eq!(r.sample_rate, 16_000);
        assert_eq!(r.len(), w.len());
        let bound = 2f32.powi(-15);
        let max_diff = w
            .samples
            .iter()
            .zip(&r.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff <= bound, "max diff {max_diff} > {bound}");
    }

    #[test]
    fn float32_roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.wav");
        let w = sine(100.0, 8_000, 0.25, 0.5);
        save_wav_encoded(&path, &w, WavEncoding::Float32).unwrap();
        let r = load_wav(&path).unwrap();
        assert_eq!(r.samples, w.samples);
    }

    #[test]
    fn zero_length_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wav");
        std::fs::write(&path, b"").unwrap();
        assert!(matches!(load_wav(&path), Err(Error::Format(_))));
    }

    #[test]
    fn eight_bit_pcm_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pcm8.wav");
        // hand-build an 8-bit mono PCM file
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(4 + 8 + 16 + 8 + 4u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes()); // PCM
        out.extend_from_slice(&1u16.to_le_bytes()); // mono
        out.extend_from_slice(&8000u32.to_le_bytes());
        out.extend_from_slice(&8000u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&8u16.to_le_bytes()); // 8 bits
        out.extend_from_slice(b"data");
        out.extend_from_slice(&4u32.to_le_bytes());
        out.extend_from_slice(&[128, 128, 128, 128]);
        std::fs::write(&path, out).unwrap();
        let err = load_wav(&path).unwrap_err();
        assert!(err.to_string().contains("unsupported"), "{err}");
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(4 + 8 + 16 + 8 + 8u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes()); // stereo
        out.extend_from_slice(&8000u32.to_le_bytes());
        out.extend_from_slice(&32000u32.to_le_bytes());
        out.extend_from_slice(&4u16.to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&8u32.to_le_bytes());
        out.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path, out).unwrap();
        assert!(matches!(load_wav(&path), Err(Error::Format(_))));
    }

    #[test]
    fn clipping_is_counted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.wav");
        let w = Waveform::new(vec![0.0, 1.5, -2.0, 0.5], 16_000).unwrap();
        let clipped = save_wav(&path, &w).unwrap();
        assert_eq!(clipped, 2);
    }
}
