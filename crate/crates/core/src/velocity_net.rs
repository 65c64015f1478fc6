//! U-Conformer velocity field.
//!
//! Symmetric Conformer encoder/decoder stacks at constant temporal
//! resolution; the "U" is realized purely as additive skip connections from
//! encoder block `i` to decoder block `L - i`. The flow state and the fused
//! condition are channel-concatenated, projected to the model width, and
//! combined with sinusoidal time and position encodings before entering the
//! stack.
//!
//! Each Conformer block runs half-step feed-forward, unmasked multi-head
//! self-attention, a convolution module (pointwise GLU, depthwise conv,
//! layer norm, swish, pointwise), a second half-step feed-forward, and a
//! final layer norm.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::nn::{Ctx, Linear, ParamId, ParamStore};
use crate::numerics::{concat, Scalar, Tensor, Val};

/// Period scale applied to `t` before the sinusoidal embedding: `t` in [0,1]
/// maps to positions in [0, 1000], matching the positional-encoding range.
const TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct UConformerConfig {
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
}

impl Default for UConformerConfig {
    fn default() -> Self {
        UConformerConfig {
            latent_dim: 1024,
            cond_dim: 1024,
            model_dim: 256,
            heads: 4,
            ffn_dim: 1024,
            enc_layers: 3,
            dec_layers: 3,
            conv_kernel: 15,
            dropout: 0.0,
        }
    }
}

impl UConformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::config("model_dim must be even for sinusoidal encodings"));
        }
        if self.enc_layers != self.dec_layers {
            return Err(Error::config(format!(
                "encoder/decoder depth mismatch: {} vs {} (skips pair 1:1)",
                self.enc_layers, self.dec_layers
            )));
        }
        if self.enc_layers == 0 {
            return Err(Error::config("need at least one encoder layer"));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::config("conv_kernel must be odd"));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a scalar `t` in `[0, 1]`.
pub fn time_embedding<T: Scalar>(t: T, dim: usize) -> Result<Vec<T>> {
    let tf = t.as_f64();
    if !(0.0..=1.0).contains(&tf) {
        return Err(Error::usage(format!("time {tf} outside [0, 1]")));
    }
    if dim % 2 != 0 {
        return Err(Error::usage("time embedding dim must be even"));
    }
    let pos = tf * TIME_SCALE;
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = (-(2.0 * i as f64 / dim as f64) * 10000f64.ln()).exp();
        out.push(T::of_f64((pos * freq).sin()));
        out.push(T::of_f64((pos * freq).cos()));
    }
    Ok(out)
}

/// Standard sinusoidal position table `[len, dim]`.
pub fn positional_encoding<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * dim);
    for p in 0..len {
        for i in 0..dim / 2 {
            let freq = (-(2.0 * i as f64 / dim as f64) * 10000f64.ln()).exp();
            data.push(T::of_f64((p as f64 * freq).sin()));
            data.push(T::of_f64((p as f64 * freq).cos()));
        }
    }
    Tensor::from_vec(vec![len, dim], data).expect("pe shape")
}

struct FeedForward {
    norm: crate::numerics::nn::LayerNorm,
    w1: Linear,
    w2: Linear,
    dropout: f64,
}

impl FeedForward {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        ffn: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(FeedForward {
            norm: crate::numerics::nn::LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            w1: Linear::new(store, &format!("{name}.w1"), dim, ffn, true, rng)?,
            w2: Linear::new(store, &format!("{name}.w2"), ffn, dim, true, rng)?,
            dropout,
        })
    }

    fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Val<'a, T>) -> Result<Val<'a, T>> {
        let h = self.norm.forward(ctx, x)?;
        let h = self.w1.forward(ctx, h)?.swish();
        let h = ctx.dropout(h, self.dropout)?;
        let h = self.w2.forward(ctx, h)?;
        ctx.dropout(h, self.dropout)
    }
}

struct SelfAttention {
    norm: crate::numerics::nn::LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    dropout: f64,
}

impl SelfAttention {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(SelfAttention {
            norm: crate::numerics::nn::LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            wq: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            wk: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            wv: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            wo: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng)?,
            heads,
            dropout,
        })
    }

    /// Split `[B, T, C]` into `[B*H, T, C/H]`.
    fn split_heads<'a, T: Scalar>(&self, x: Val<'a, T>, b: usize, t: usize, c: usize) -> Result<Val<'a, T>> {
        let dk = c / self.heads;
        x.reshape(vec![b, t, self.heads, dk])?
            .permute(&[0, 2, 1, 3])?
            .reshape(vec![b * self.heads, t, dk])
    }

    /// Unmasked bidirectional attention probabilities `[B*H, T, T]`.
    fn probs<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, normed: Val<'a, T>) -> Result<Val<'a, T>> {
        let shape = normed.shape();
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let dk = c / self.heads;
        let q = self.split_heads(self.wq.forward(ctx, normed)?, b, t, c)?;
        let k = self.split_heads(self.wk.forward(ctx, normed)?, b, t, c)?;
        let scale = T::of_f64(1.0 / (dk as f64).sqrt());
        q.bmm(k.transpose_last2()?)?.scale(scale).softmax_last()
    }

    fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Val<'a, T>) -> Result<Val<'a, T>> {
        let shape = x.shape();
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let normed = self.norm.forward(ctx, x)?;
        let attn = self.probs(ctx, normed)?;
        let attn = ctx.dropout(attn, self.dropout)?;
        let v = self.split_heads(self.wv.forward(ctx, normed)?, b, t, c)?;
        let out = attn
            .bmm(v)?
            .reshape(vec![b, self.heads, t, c / self.heads])?
            .permute(&[0, 2, 1, 3])?
            .reshape(vec![b, t, c])?;
        let out = self.wo.forward(ctx, out)?;
        ctx.dropout(out, self.dropout)
    }
}

struct ConvModule {
    norm: crate::numerics::nn::LayerNorm,
    pointwise_in: Linear,
    depthwise: ParamId,
    depth_norm: crate::numerics::nn::LayerNorm,
    pointwise_out: Linear,
    dropout: f64,
}

impl ConvModule {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        kernel: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = T::of_f64(1.0 / (kernel as f64).sqrt());
        Ok(ConvModule {
            norm: crate::numerics::nn::LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            pointwise_in: Linear::new(store, &format!("{name}.pw_in"), dim, 2 * dim, true, rng)?,
            depthwise: store.register(
                format!("{name}.depthwise.weight"),
                Tensor::rand_uniform(vec![dim, kernel], -bound, bound, rng),
            )?,
            depth_norm: crate::numerics::nn::LayerNorm::new(store, &format!("{name}.depth_norm"), dim)?,
            pointwise_out: Linear::new(store, &format!("{name}.pw_out"), dim, dim, true, rng)?,
            dropout,
        })
    }

    fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Val<'a, T>) -> Result<Val<'a, T>> {
        let h = self.norm.forward(ctx, x)?;
        let h = self.pointwise_in.forward(ctx, h)?.glu(2)?;
        // depthwise convolution runs channels-first
        let h = h.permute(&[0, 2, 1])?;
        let h = h.depthwise_conv1d(ctx.param(self.depthwise))?;
        let h = h.permute(&[0, 2, 1])?;
        let h = self.depth_norm.forward(ctx, h)?.swish();
        let h = self.pointwise_out.forward(ctx, h)?;
        ctx.dropout(h, self.dropout)
    }
}

/// One Conformer block operating on `[B, T, C]`.
pub struct ConformerBlock {
    ff1: FeedForward,
    attn: SelfAttention,
    conv: ConvModule,
    ff2: FeedForward,
    final_norm: crate::numerics::nn::LayerNorm,
}

impl ConformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &UConformerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(ConformerBlock {
            ff1: FeedForward::new(store, &format!("{name}.ff1"), cfg.model_dim, cfg.ffn_dim, cfg.dropout, rng)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), cfg.model_dim, cfg.heads, cfg.dropout, rng)?,
            conv: ConvModule::new(store, &format!("{name}.conv"), cfg.model_dim, cfg.conv_kernel, cfg.dropout, rng)?,
            ff2: FeedForward::new(store, &format!("{name}.ff2"), cfg.model_dim, cfg.ffn_dim, cfg.dropout, rng)?,
            final_norm: crate::numerics::nn::LayerNorm::new(store, &format!("{name}.final_norm"), cfg.model_dim)?,
        })
    }

    pub fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Val<'a, T>) -> Result<Val<'a, T>> {
        let half = T::of_f64(0.5);
        let x = x.add(self.ff1.forward(ctx, x)?.scale(half))?;
        let x = x.add(self.attn.forward(ctx, x)?)?;
        let x = x.add(self.conv.forward(ctx, x)?)?;
        let x = x.add(self.ff2.forward(ctx, x)?.scale(half))?;
        self.final_norm.forward(ctx, x)
    }
}

/// The full velocity network.
pub struct UConformer {
    pub cfg: UConformerConfig,
    input_proj: Linear,
    encoder: Vec<ConformerBlock>,
    decoder: Vec<ConformerBlock>,
    output_proj: Linear,
}

impl UConformer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: UConformerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let input_proj = Linear::new(
            store,
            &format!("{prefix}.input_proj"),
            cfg.latent_dim + cfg.cond_dim,
            cfg.model_dim,
            true,
            rng,
        )?;
        let mut encoder = Vec::with_capacity(cfg.enc_layers);
        for i in 0..cfg.enc_layers {
            encoder.push(ConformerBlock::new(store, &format!("{prefix}.enc{i}"), &cfg, rng)?);
        }
        let mut decoder = Vec::with_capacity(cfg.dec_layers);
        for i in 0..cfg.dec_layers {
            decoder.push(ConformerBlock::new(store, &format!("{prefix}.dec{i}"), &cfg, rng)?);
        }
        let output_proj = Linear::new(
            store,
            &format!("{prefix}.output_proj"),
            cfg.model_dim,
            cfg.latent_dim,
            true,
            rng,
        )?;
        Ok(UConformer { cfg, input_proj, encoder, decoder, output_proj })
    }

    /// Predict the velocity for `state [B, D, T]` under `cond [B, C, T]` at
    /// per-item times `t`. Output shape equals the state shape.
    pub fn forward<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        state: Val<'a, T>,
        cond: Val<'a, T>,
        t: &[T],
    ) -> Result<Val<'a, T>> {
        self.forward_opts(ctx, state, cond, t, false)
    }

    /// `disable_skips` severs the encoder-to-decoder skip paths (test hook).
    pub fn forward_opts<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        state: Val<'a, T>,
        cond: Val<'a, T>,
        t: &[T],
        disable_skips: bool,
    ) -> Result<Val<'a, T>> {
        let ss = state.shape();
        let cs = cond.shape();
        if ss.len() != 3 || ss[1] != self.cfg.latent_dim {
            return Err(Error::shape(format!(
                "state must be [B, {}, T], got {:?}",
                self.cfg.latent_dim, ss
            )));
        }
        if cs.len() != 3 || cs[1] != self.cfg.cond_dim || cs[0] != ss[0] || cs[2] != ss[2] {
            return Err(Error::usage(format!(
                "condition {:?} does not pair with state {:?}",
                cs, ss
            )));
        }
        let (b, t_len) = (ss[0], ss[2]);
        if t.len() != b {
            return Err(Error::usage(format!(
                "need one time per batch item: {} vs {}",
                t.len(),
                b
            )));
        }

        let joint = concat(ctx.tape, &[state, cond], 1)?;
        let mut x = self
            .input_proj
            .forward(ctx, joint.permute(&[0, 2, 1])?)?;

        // position and time encodings are added after the input projection
        let pe = ctx.constant(positional_encoding::<T>(t_len, self.cfg.model_dim));
        x = x.add(pe)?;
        let mut temb = Vec::with_capacity(b * self.cfg.model_dim);
        for &ti in t {
            temb.extend(time_embedding(ti, self.cfg.model_dim)?);
        }
        let temb = ctx.constant(Tensor::from_vec(vec![b, 1, self.cfg.model_dim], temb)?);
        x = x.add(temb)?;

        let mut skips = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            x = block.forward(ctx, x)?;
            skips.push(x);
        }
        for (j, block) in self.decoder.iter().enumerate() {
            if !disable_skips {
                // decoder block j pairs with encoder block L-1-j
                x = x.add(skips[self.encoder.len() - 1 - j])?;
            }
            x = block.forward(ctx, x)?;
        }
        self.output_proj.forward(ctx, x)?.permute(&[0, 2, 1])
    }
}
