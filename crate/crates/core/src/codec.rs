//! Convolutional waveform codec.
//!
//! A small strided encoder maps mono audio to a `[B, D, T]` latent at one
//! frame per `hop` samples (the stride product); a mirrored
//! transposed-convolution decoder maps latents back to waveforms.
//! Reconstruction training uses L1 waveform distance plus a multi-resolution
//! STFT magnitude term.

use rand_chacha::ChaCha8Rng;

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::numerics::nn::{Conv1d, ConvTranspose1d, Ctx, ParamStore};
use crate::numerics::{concat, Scalar, Tensor, Val};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub sample_rate: u32,
    /// Per-block downsampling factors; their product is the latent hop.
    pub strides: Vec<usize>,
    /// Output channels of each encoder block (decoder mirrors them).
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    /// Weight of the spectral term in the reconstruction loss.
    pub stft_weight: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            sample_rate: 16_000,
            strides: vec![2, 4, 4, 5],
            channels: vec![16, 24, 32, 48],
            latent_dim: 32,
            stft_weight: 1.0,
        }
    }
}

impl CodecConfig {
    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.iter().any(|&s| s == 0) {
            return Err(Error::config("codec strides must be non-empty and positive"));
        }
        if self.channels.len() != self.strides.len() {
            return Err(Error::config(format!(
                "codec needs one channel width per stride: {} vs {}",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent dim must be positive"));
        }
        Ok(())
    }
}

/// Kernel and padding for a stride such that the length divides exactly:
/// encoder out = in/s, decoder out = in*s.
fn conv_geometry(stride: usize) -> (usize, usize) {
    if stride % 2 == 0 {
        (2 * stride, stride / 2)
    } else {
        (2 * stride + 1, (stride + 1) / 2)
    }
}

pub struct Codec {
    pub cfg: CodecConfig,
    enc_blocks: Vec<Conv1d>,
    enc_out: Conv1d,
    dec_in: Conv1d,
    dec_blocks: Vec<ConvTranspose1d>,
    dec_out: Conv1d,
}

impl Codec {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: CodecConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut enc_blocks = Vec::with_capacity(cfg.strides.len());
        let mut in_ch = 1;
        for (i, (&s, &c)) in cfg.strides.iter().zip(&cfg.channels).enumerate() {
            let (k, p) = conv_geometry(s);
            enc_blocks.push(Conv1d::new(
                store,
                &format!("{prefix}.enc{i}"),
                in_ch,
                c,
                k,
                s,
                p,
                true,
                rng,
            )?);
            in_ch = c;
        }
        let enc_out = Conv1d::new(
            store,
            &format!("{prefix}.enc_out"),
            in_ch,
            cfg.latent_dim,
            3,
            1,
            1,
            true,
            rng,
        )?;
        let dec_in = Conv1d::new(
            store,
            &format!("{prefix}.dec_in"),
            cfg.latent_dim,
            in_ch,
            3,
            1,
            1,
            true,
            rng,
        )?;
        let mut dec_blocks = Vec::with_capacity(cfg.strides.len());
        for (i, (&s, &c)) in cfg.strides.iter().zip(&cfg.channels).enumerate().rev() {
            let (k, p) = conv_geometry(s);
            let out_ch = if i == 0 { cfg.channels[0] } else { cfg.channels[i - 1] };
            dec_blocks.push(ConvTranspose1d::new(
                store,
                &format!("{prefix}.dec{i}"),
                c,
                out_ch,
                k,
                s,
                p,
                true,
                rng,
            )?);
        }
        let dec_out = Conv1d::new(
            store,
            &format!("{prefix}.dec_out"),
            cfg.channels[0],
            1,
            7,
            1,
            3,
            true,
            rng,
        )?;
        Ok(Codec { cfg, enc_blocks, enc_out, dec_in, dec_blocks, dec_out })
    }

    pub fn hop(&self) -> usize {
        self.cfg.hop()
    }

    /// Frames produced for an input of `n` samples.
    pub fn frames_for(&self, n: usize) -> usize {
        n.div_ceil(self.hop())
    }

    /// Encode `[B, 1, N]` audio to `[B, D, T]`, right-padding with zeros to
    /// a hop multiple so `T = ceil(N/hop)`.
    pub fn encode<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: &Tensor<T>) -> Result<Val<'a, T>> {
        if x.ndim() != 3 || x.shape()[1] != 1 {
            return Err(Error::shape(format!("encode expects [B, 1, N], got {:?}", x.shape())));
        }
        let (b, n) = (x.shape()[0], x.shape()[2]);
        if n == 0 {
            return Err(Error::usage("cannot encode an empty waveform"));
        }
        let hop = self.hop();
        let padded = n.div_ceil(hop) * hop;
        let x = if padded == n {
            x.clone()
        } else {
            let mut data = Vec::with_capacity(b * padded);
            for bi in 0..b {
                data.extend_from_slice(&x.data()[bi * n..(bi + 1) * n]);
                data.extend(std::iter::repeat_n(T::zero(), padded - n));
            }
            Tensor::from_vec(vec![b, 1, padded], data)?
        };
        let mut h = ctx.constant(x);
        for block in &self.enc_blocks {
            h = block.forward(ctx, h)?.swish();
        }
        self.enc_out.forward(ctx, h)
    }

    /// Encode a single waveform, checking the sample rate against the config.
    pub fn encode_wave<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        w: &Waveform,
    ) -> Result<Val<'a, T>> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(Error::config(format!(
                "codec expects {} Hz, waveform is {} Hz",
                self.cfg.sample_rate, w.sample_rate
            )));
        }
        let data: Vec<T> = w.samples.iter().map(|&s| T::of_f32(s)).collect();
        let n = data.len();
        self.encode(ctx, &Tensor::from_vec(vec![1, 1, n], data)?)
    }

    /// Decode `[B, D, T]` latents to `[B, 1, T*hop]` audio (unclipped).
    pub fn decode<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, z: Val<'a, T>) -> Result<Val<'a, T>> {
        let shape = z.shape();
        if shape.len() != 3 || shape[1] != self.cfg.latent_dim {
            return Err(Error::shape(format!(
                "decode expects [B, {}, T], got {:?}",
                self.cfg.latent_dim, shape
            )));
        }
        let mut h = self.dec_in.forward(ctx, z)?.swish();
        for block in &self.dec_blocks {
            h = block.forward(ctx, h)?.swish();
        }
        self.dec_out.forward(ctx, h)
    }

    /// Turn a decoded `[1, 1, N]` tensor into a waveform, clipping to
    /// `[-1, 1]` and reporting the clip count.
    pub fn to_waveform<T: Scalar>(&self, decoded: &Tensor<T>) -> Result<(Waveform, usize)> {
        if decoded.ndim() != 3 || decoded.shape()[0] != 1 || decoded.shape()[1] != 1 {
            return Err(Error::shape(format!(
                "expected [1, 1, N] decoder output, got {:?}",
                decoded.shape()
            )));
        }
        let mut clipped = 0usize;
        let samples: Vec<f32> = decoded
            .data()
            .iter()
            .map(|&v| {
                let s = v.as_f32();
                if s > 1.0 {
                    clipped += 1;
                    1.0
                } else if s < -1.0 {
                    clipped += 1;
                    -1.0
                } else {
                    s
                }
            })
            .collect();
        if clipped > 0 {
            log::debug!("decoder output clipped {clipped} samples");
        }
        Ok((Waveform::new(samples, self.cfg.sample_rate)?, clipped))
    }
}

/// Reconstruction loss components.
pub struct ReconLoss<'t, T: Scalar> {
    pub total: Val<'t, T>,
    pub l1: Val<'t, T>,
    pub spectral: Val<'t, T>,
}

const RECON_FFTS: [usize; 3] = [256, 512, 1024];

/// L1 waveform distance plus multi-resolution STFT magnitude L1
/// (fft {256, 512, 1024}, hop = fft/4). Shorter input is zero-padded.
pub fn recon_loss<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    w_hat: Val<'t, T>,
    w_ref: &Tensor<T>,
    stft_weight: f64,
) -> Result<ReconLoss<'t, T>> {
    let hs = w_hat.shape();
    if hs.len() != 3 || hs[1] != 1 || w_ref.ndim() != 3 || w_ref.shape()[1] != 1 {
        return Err(Error::shape(format!(
            "recon_loss expects [B, 1, N] signals, got {:?} and {:?}",
            hs,
            w_ref.shape()
        )));
    }
    if hs[0] != w_ref.shape()[0] {
        return Err(Error::shape("batch size mismatch in recon_loss"));
    }
    let (b, n_hat, n_ref) = (hs[0], hs[2], w_ref.shape()[2]);
    let n = n_hat.max(n_ref);

    let w_hat = if n_hat < n {
        let zeros = ctx.constant(Tensor::zeros(vec![b, 1, n - n_hat]));
        concat(ctx.tape, &[w_hat, zeros], 2)?
    } else {
        w_hat
    };
    let w_ref = if n_ref < n {
        let mut data = Vec::with_capacity(b * n);
        for bi in 0..b {
            data.extend_from_slice(&w_ref.data()[bi * n_ref..(bi + 1) * n_ref]);
            data.extend(std::iter::repeat_n(T::zero(), n - n_ref));
        }
        Tensor::from_vec(vec![b, 1, n], data)?
    } else {
        w_ref.clone()
    };
    let ref_val = ctx.constant(w_ref);

    let l1 = w_hat.sub(ref_val)?.abs().mean_all();

    let hat_flat = w_hat.reshape(vec![b, n])?;
    let ref_flat = ref_val.reshape(vec![b, n])?;
    let mut spectral: Option<Val<'t, T>> = None;
    for fft in RECON_FFTS {
        if n < fft {
            continue;
        }
        let hop = fft / 4;
        let m_hat = hat_flat.stft_mag(fft, hop)?;
        let m_ref = ref_flat.stft_mag(fft, hop)?;
        let term = m_hat.sub(m_ref)?.abs().mean_all();
        spectral = Some(match spectral {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    let spectral = match spectral {
        Some(s) => s.scale(T::of_f64(1.0 / RECON_FFTS.len() as f64)),
        None => ctx.constant(Tensor::scalar(T::zero())),
    };
    let total = l1.add(spectral.scale(T::of_f64(stft_weight)))?;
    Ok(ReconLoss { total, l1, spectral })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nn::Ctx;
    use crate::numerics::Tape;

    fn tiny_cfg() -> CodecConfig {
        CodecConfig {
            sample_rate: 16_000,
            strides: vec![2, 4, 4, 5],
            channels: vec![4, 6, 8, 10],
            latent_dim: 6,
            stft_weight: 1.0,
        }
    }

    fn build(seed: u64) -> (ParamStore<f64>, Codec) {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::derive(seed, "codec-test", 0);
        let codec = Codec::new(&mut store, "codec", tiny_cfg(), &mut rng).unwrap();
        (store, codec)
    }

    #[test]
    fn encode_frame_count_is_ceil() {
        let (store, codec) = build(1);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        for (n, want_t) in [(160usize, 1usize), (1600, 10), (1601, 11), (999, 7), (3200, 20)] {
            let x = Tensor::<f64>::zeros(vec![1, 1, n]);
            let z = codec.encode(&ctx, &x).unwrap();
            assert_eq!(z.shape(), vec![1, 6, want_t], "n = {n}");
        }
    }

    #[test]
    fn doubling_input_doubles_frames() {
        let (store, codec) = build(2);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let t1 = codec.encode(&ctx, &Tensor::<f64>::zeros(vec![1, 1, 1600])).unwrap().shape()[2];
        let t2 = codec.encode(&ctx, &Tensor::<f64>::zeros(vec![1, 1, 3200])).unwrap().shape()[2];
        assert_eq!(t2, 2 * t1);
    }

    #[test]
    fn zero_input_gives_constant_bias_response_in_the_interior() {
        let (store, codec) = build(3);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let z = codec.encode(&ctx, &Tensor::<f64>::zeros(vec![1, 1, 3200])).unwrap().value();
        let t = z.shape()[2];
        // away from edges every frame sees the same all-zero receptive field
        for d in 0..6 {
            let row = &z.data()[d * t..(d + 1) * t];
            for i in 3..t - 3 {
                assert!((row[i] - row[3]).abs() < 1e-12, "channel {d} frame {i}");
            }
        }
    }

    #[test]
    fn decode_length_contract() {
        let (store, codec) = build(4);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let mut rng = crate::rng::derive(5, "dec", 0);
        for t in [1usize, 7, 100] {
            let z = ctx.constant(Tensor::randn(vec![1, 6, t], &mut rng));
            let w = codec.decode(&ctx, z).unwrap();
            assert_eq!(w.shape(), vec![1, 1, t * 160]);
        }
    }

    #[test]
    fn decode_is_deterministic() {
        let (store, codec) = build(6);
        let mut rng = crate::rng::derive(7, "det", 0);
        let z = Tensor::<f64>::randn(vec![1, 6, 5], &mut rng);
        let run = || {
            let tape = Tape::new();
            let ctx = Ctx::inference(&tape, &store);
            codec.decode(&ctx, ctx.constant(z.clone())).unwrap().value()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sample_rate_mismatch_is_config_error() {
        let (store, codec) = build(8);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let w = Waveform::new(vec![0.0; 100], 8_000).unwrap();
        assert!(matches!(codec.encode_wave(&ctx, &w), Err(Error::Config(_))));
    }

    #[test]
    fn recon_loss_zero_for_identical_signals() {
        let (store, _) = build(9);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let mut rng = crate::rng::derive(10, "recon", 0);
        let w = Tensor::<f64>::randn(vec![1, 1, 2048], &mut rng);
        let loss = recon_loss(&ctx, ctx.constant(w.clone()), &w, 1.0).unwrap();
        assert_eq!(loss.total.item().unwrap(), 0.0);
    }

    #[test]
    fn recon_loss_on_negated_sine_is_waveform_only() {
        let (store, _) = build(11);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let n = 4096;
        let w: Vec<f64> = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin())
            .collect();
        let mean_abs: f64 = w.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        let w_ref = Tensor::from_vec(vec![1, 1, n], w.clone()).unwrap();
        let w_neg = Tensor::from_vec(vec![1, 1, n], w.iter().map(|v| -v).collect()).unwrap();
        let loss = recon_loss(&ctx, ctx.constant(w_neg), &w_ref, 1.0).unwrap();
        let l1 = loss.l1.item().unwrap();
        assert!((l1 - 2.0 * mean_abs).abs() < 1e-12, "{l1} vs {}", 2.0 * mean_abs);
        // magnitudes are sign-invariant
        assert!(loss.spectral.item().unwrap() < 1e-9);
    }

    #[test]
    fn recon_loss_is_symmetric() {
        let (store, _) = build(12);
        let mut rng = crate::rng::derive(13, "sym", 0);
        let a = Tensor::<f64>::randn(vec![1, 1, 1500], &mut rng);
        let b = Tensor::<f64>::randn(vec![1, 1, 1500], &mut rng);
        let run = |x: &Tensor<f64>, y: &Tensor<f64>| {
            let tape = Tape::new();
            let ctx = Ctx::inference(&tape, &store);
            recon_loss(&ctx, ctx.constant(x.clone()), y, 1.0)
                .unwrap()
                .total
                .item()
                .unwrap()
        };
        let ab = run(&a, &b);
        let ba = run(&b, &a);
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn recon_loss_pads_shorter_signal() {
        let (store, _) = build(14);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let mut rng = crate::rng::derive(15, "pad", 0);
        let long = Tensor::<f64>::randn(vec![1, 1, 600], &mut rng);
        let short = ctx.constant(Tensor::<f64>::randn(vec![1, 1, 500], &mut rng));
        assert!(recon_loss(&ctx, short, &long, 1.0).is_ok());
    }

    #[test]
    fn full_chain_is_differentiable() {
        let (store, codec) = build(16);
        let tape = Tape::new();
        let ctx = Ctx::training(&tape, &store, crate::rng::derive(17, "train", 0));
        let mut rng = crate::rng::derive(18, "chain", 0);
        let w = Tensor::<f64>::randn(vec![1, 1, 320], &mut rng).map(|v| v * 0.1);
        let z = codec.encode(&ctx, &w).unwrap();
        let y = codec.decode(&ctx, z).unwrap();
        let loss = recon_loss(&ctx, y, &w, 1.0).unwrap();
        let grads = tape.backward(loss.total).unwrap();
        let pg = ctx.param_grads(&grads);
        let live = pg.iter().filter(|g| g.is_some()).count();
        assert!(live >= store.len() - 2, "all codec parameters receive gradients");
    }

    #[test]
    fn clipping_reported_by_to_waveform() {
        let (_, codec) = build(19);
        let t = Tensor::<f64>::from_vec(vec![1, 1, 4], vec![0.0, 1.5, -3.0, 0.2]).unwrap();
        let (w, clipped) = codec.to_waveform(&t).unwrap();
        assert_eq!(clipped, 2);
        assert_eq!(w.samples, vec![0.0, 1.0, -1.0, 0.2]);
    }
}
