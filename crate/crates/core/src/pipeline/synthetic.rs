//! Deterministic synthetic speech-like corpus.
//!
//! Utterances alternate silence, voiced and unvoiced spans. Voiced spans are
//! harmonic tones with a random fundamental in [80, 300] Hz, per-harmonic
//! decay and mild vibrato, carrying energy on both sides of the 4 kHz split.
//! Unvoiced spans are band-shaped noise bursts (roughly 2-7 kHz) whose upper
//! half disappears under the LR band limit. Segment boundaries double as
//! ground-truth voicing labels.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::manifest::{Manifest, ManifestEntry, Segment, SegmentLabels, Split};
use crate::dsp::{save_wav, simulate_lr, Waveform};
use crate::error::Result;
use crate::rng;

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Apply short raised-cosine ramps so segment edges do not click.
fn apply_ramps(samples: &mut [f32], ramp: usize) {
    let n = samples.len();
    let r = ramp.min(n / 2);
    for i in 0..r {
        let g = 0.5 - 0.5 * (std::f64::consts::PI * i as f64 / r as f64).cos();
        samples[i] *= g as f32;
        samples[n - 1 - i] *= g as f32;
    }
}

fn voiced_segment(rng: &mut ChaCha8Rng, sr: f64, len: usize) -> Vec<f32> {
    let f0 = uniform(rng, 80.0, 300.0);
    let decay = uniform(rng, 1.2, 1.8);
    let level = uniform(rng, 0.3, 0.5);
    let vibrato_depth = uniform(rng, 0.0, 0.004);
    let vibrato_rate = uniform(rng, 4.0, 6.5);
    let n_harm = ((sr / 2.0 - 200.0) / f0).floor() as usize;
    let n_harm = n_harm.max(1);

    let amps: Vec<f64> = (1..=n_harm).map(|k| 1.0 / (k as f64).powf(decay)).collect();
    let norm: f64 = amps.iter().sum();
    let phases: Vec<f64> = (0..n_harm)
        .map(|_| uniform(rng, 0.0, 2.0 * std::f64::consts::PI))
        .collect();

    let mut phase0 = 0.0f64;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let t = i as f64 / sr;
        let f_inst = f0 * (1.0 + vibrato_depth * (2.0 * std::f64::consts::PI * vibrato_rate * t).sin());
        phase0 += 2.0 * std::f64::consts::PI * f_inst / sr;
        let mut s = 0.0f64;
        for (k, (&a, &ph)) in amps.iter().zip(&phases).enumerate() {
            s += a * ((k + 1) as f64 * phase0 + ph).sin();
        }
        out.push((level * s / norm) as f32);
    }
    apply_ramps(&mut out, (0.01 * sr) as usize);
    out
}

fn unvoiced_segment(rng: &mut ChaCha8Rng, sr: u32, len: usize) -> Result<Vec<f32>> {
    let level = uniform(rng, 0.08, 0.2) as f32;
    let white: Vec<f32> = (0..len).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
    // band-shape by differencing two low-passes: keep ~[2k, 7k]
    let w = Waveform::new(white, sr)?;
    let hi = simulate_lr(&w, (f64::from(sr) * 0.44) as f32)?;
    let lo = simulate_lr(&w, 2000.0)?;
    let mut out: Vec<f32> = hi
        .samples
        .iter()
        .zip(&lo.samples)
        .map(|(a, b)| a - b)
        .collect();
    let rms = (out.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>()
        / out.len().max(1) as f64)
        .sqrt()
        .max(1e-9) as f32;
    for s in &mut out {
        *s *= level / rms;
    }
    apply_ramps(&mut out, (0.005 * f64::from(sr)) as usize);
    Ok(out)
}

/// Build one utterance; returns samples and ground-truth segments.
pub fn synth_utterance(
    rng: &mut ChaCha8Rng,
    sample_rate: u32,
    min_secs: f64,
    max_secs: f64,
) -> Result<(Vec<f32>, Vec<Segment>)> {
    let sr = f64::from(sample_rate);
    let target = (uniform(rng, min_secs, max_secs) * sr) as usize;
    let mut samples: Vec<f32> = Vec::with_capacity(target);
    let mut segments = Vec::new();
    let mut voiced_turn = true;

    let mut push = |samples: &mut Vec<f32>, segs: &mut Vec<Segment>, data: Vec<f32>, label: u8| {
        let start = samples.len();
        segs.push(Segment { start, end: start + data.len(), label });
        samples.extend(data);
    };

    // lead-in silence
    let lead = (uniform(rng, 0.06, 0.12) * sr) as usize;
    push(&mut samples, &mut segments, vec![0.0; lead], 0);

    while samples.len() < target {
        if voiced_turn {
            let len = (uniform(rng, 0.25, 0.5) * sr) as usize;
            let seg = voiced_segment(rng, sr, len);
            push(&mut samples, &mut segments, seg, 2);
        } else {
            let len = (uniform(rng, 0.12, 0.25) * sr) as usize;
            let seg = unvoiced_segment(rng, sample_rate, len)?;
            push(&mut samples, &mut segments, seg, 1);
        }
        voiced_turn = !voiced_turn;
        // occasional pause between phones
        if rng.random::<f64>() < 0.5 {
            let len = (uniform(rng, 0.06, 0.15) * sr) as usize;
            push(&mut samples, &mut segments, vec![0.0; len], 0);
        }
    }
    Ok((samples, segments))
}

/// Generate the corpus under `out_dir` and return the manifest path.
/// Everything is derived from `cfg.seed`: the same seed reproduces the
/// corpus byte for byte.
pub fn gen_synthetic_corpus(out_dir: impl AsRef<Path>, cfg: &RunConfig) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let c = &cfg.corpus;
    let total = c.train_utterances + c.val_utterances + c.test_utterances;
    let mut entries = Vec::with_capacity(total);
    for idx in 0..total {
        let split = if idx < c.train_utterances {
            Split::Train
        } else if idx < c.train_utterances + c.val_utterances {
            Split::Val
        } else {
            Split::Test
        };
        let mut utt_rng = rng::derive(cfg.seed, "corpus", idx as u64);
        let (samples, segments) = synth_utterance(
            &mut utt_rng,
            cfg.codec.sample_rate,
            c.min_secs,
            c.max_secs,
        )?;
        let id = format!("utt{idx:04}");
        let wav_rel = format!("{id}.wav");
        let labels_rel = format!("{id}.labels.json");
        let w = Waveform::new(samples, cfg.codec.sample_rate)?;
        save_wav(out_dir.join(&wav_rel), &w)?;
        SegmentLabels { segments }.save(out_dir.join(&labels_rel))?;
        entries.push(ManifestEntry {
            id,
            hr_path: wav_rel.into(),
            lr_path: None,
            labels_path: Some(labels_rel.into()),
            split,
        });
    }
    let manifest = Manifest { entries };
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::RunConfig;
    use crate::voicing::{f0_vuv, LABEL_VOICED};

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.corpus.train_utterances = 2;
        cfg.corpus.val_utterances = 1;
        cfg.corpus.test_utterances = 1;
        cfg.corpus.min_secs = 0.8;
        cfg.corpus.max_secs = 1.0;
        cfg
    }

    #[test]
    fn same_seed_reproduces_byte_identical_corpus() {
        let cfg = small_cfg();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        gen_synthetic_corpus(d1.path(), &cfg).unwrap();
        gen_synthetic_corpus(d2.path(), &cfg).unwrap();
        for name in ["utt0000.wav", "utt0002.wav", "manifest.json", "utt0001.labels.json"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs across runs");
        }
    }

    #[test]
    fn manifest_loads_and_splits() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let mpath = gen_synthetic_corpus(dir.path(), &cfg).unwrap();
        let manifest = Manifest::load(&mpath).unwrap();
        assert_eq!(manifest.entries.len(), 4);
        assert_eq!(manifest.split(Split::Train).len(), 2);
        assert_eq!(manifest.split(Split::Val).len(), 1);
        assert_eq!(manifest.split(Split::Test).len(), 1);
    }

    #[test]
    fn stored_labels_match_construction() {
        let mut rng = crate::rng::derive(5, "synth-test", 0);
        let (samples, segments) = synth_utterance(&mut rng, 16_000, 1.0, 1.2).unwrap();
        // segments tile the signal without gaps
        assert_eq!(segments.first().unwrap().start, 0);
        for pair in segments.windows(2) {
            assert_eq!(pair[0].end, pair[1].start);
        }
        assert_eq!(segments.last().unwrap().end, samples.len());
        // silence segments really are digital silence
        for s in segments.iter().filter(|s| s.label == 0) {
            assert!(samples[s.start..s.end].iter().all(|&x| x == 0.0));
        }
        // labels cover all three classes
        for label in 0..3u8 {
            assert!(segments.iter().any(|s| s.label == label), "missing label {label}");
        }
    }

    #[test]
    fn voiced_segments_detected_as_voiced() {
        let mut rng = crate::rng::derive(6, "synth-vuv", 0);
        let (samples, segments) = synth_utterance(&mut rng, 16_000, 1.2, 1.5).unwrap();
        let w = Waveform::new(samples, 16_000).unwrap();
        let labels = f0_vuv(&w, 400, 160, 50.0, 800.0, 0.45).unwrap();
        let mut voiced_frames = 0usize;
        let mut hits = 0usize;
        for (i, &l) in labels.iter().enumerate() {
            let center = i * 160 + 200;
            let seg = segments.iter().find(|s| center >= s.start && center < s.end);
            if let Some(seg) = seg {
                // skip transition zones
                if seg.label == 2 && center >= seg.start + 480 && center + 480 <= seg.end {
                    voiced_frames += 1;
                    if l == LABEL_VOICED {
                        hits += 1;
                    }
                }
            }
        }
        assert!(voiced_frames > 10);
        assert!(
            hits as f64 >= 0.95 * voiced_frames as f64,
            "{hits}/{voiced_frames} voiced frames detected"
        );
    }
}
