//! Flow embedding conversion.
//!
//! Trains a conditional velocity field to transport unit Gaussian samples to
//! HR codec embeddings along a linear path, conditioned on the fused LR
//! embedding and voicing labels. Inference integrates the field with a
//! fixed-step Euler solver under classifier-free guidance.
//!
//! Embeddings are normalized per channel with separate LR and HR statistics:
//! LR stats feed the condition fusion, HR stats define the space the flow
//! runs in and are inverted after integration.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::nn::{Conv1d, Ctx, Embedding, ParamId, ParamStore};
use crate::numerics::{concat, Scalar, Tape, Tensor, Val};
use crate::velocity_net::UConformer;

/// Per-channel normalization statistics for one embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Welford pass over `[B, D, T]` tensors; std floored at 1e-5.
    pub fn compute<T: Scalar>(batches: &[Tensor<T>]) -> Result<NormStats> {
        let first = batches
            .first()
            .ok_or_else(|| Error::usage("norm stats need at least one batch"))?;
        if first.ndim() != 3 {
            return Err(Error::shape(format!(
                "norm stats expect [B, D, T], got {:?}",
                first.shape()
            )));
        }
        let d = first.shape()[1];
        let mut count = vec![0u64; d];
        let mut mean = vec![0.0f64; d];
        let mut m2 = vec![0.0f64; d];
        for batch in batches {
            if batch.ndim() != 3 || batch.shape()[1] != d {
                return Err(Error::shape("inconsistent channel count across batches"));
            }
            let (b, _, t) = (batch.shape()[0], d, batch.shape()[2]);
            for bi in 0..b {
                for ch in 0..d {
                    let row = &batch.data()[(bi * d + ch) * t..(bi * d + ch + 1) * t];
                    for &v in row {
                        let x = v.as_f64();
                        count[ch] += 1;
                        let delta = x - mean[ch];
                        mean[ch] += delta / count[ch] as f64;
                        m2[ch] += delta * (x - mean[ch]);
                    }
                }
            }
        }
        let std = m2
            .iter()
            .zip(&count)
            .map(|(&m, &c)| (m / (c.max(1)) as f64).sqrt().max(1e-5))
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check<T: Scalar>(&self, z: &Tensor<T>) -> Result<()> {
        if z.ndim() != 3 || z.shape()[1] != self.channels() {
            return Err(Error::config(format!(
                "stats carry {} channels but embedding is {:?}",
                self.channels(),
                z.shape()
            )));
        }
        Ok(())
    }

    fn mean_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            vec![self.channels(), 1],
            self.mean.iter().map(|&v| T::of_f64(v)).collect(),
        )
        .expect("stats shape")
    }

    fn std_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            vec![self.channels(), 1],
            self.std.iter().map(|&v| T::of_f64(v)).collect(),
        )
        .expect("stats shape")
    }
}

/// `(z - mean) / std` per channel.
pub fn normalize<T: Scalar>(z: &Tensor<T>, stats: &NormStats) -> Result<Tensor<T>> {
    stats.check(z)?;
    let tape = Tape::new();
    let v = normalize_val(&tape, tape.constant(z.clone()), stats)?;
    Ok(v.value())
}

/// Inverse of [`normalize`].
pub fn denormalize<T: Scalar>(z: &Tensor<T>, stats: &NormStats) -> Result<Tensor<T>> {
    stats.check(z)?;
    let tape = Tape::new();
    let v = denormalize_val(&tape, tape.constant(z.clone()), stats)?;
    Ok(v.value())
}

pub fn normalize_val<'t, T: Scalar>(
    tape: &'t Tape<T>,
    z: Val<'t, T>,
    stats: &NormStats,
) -> Result<Val<'t, T>> {
    stats.check(&z.value())?;
    let mean = tape.constant(stats.mean_tensor());
    let std = tape.constant(stats.std_tensor());
    z.sub(mean)?.div(std)
}

pub fn denormalize_val<'t, T: Scalar>(
    tape: &'t Tape<T>,
    z: Val<'t, T>,
    stats: &NormStats,
) -> Result<Val<'t, T>> {
    stats.check(&z.value())?;
    let mean = tape.constant(stats.mean_tensor());
    let std = tape.constant(stats.std_tensor());
    z.mul(std)?.add(mean)
}

/// Linear transport path: `psi_t = (1-t) z0 + t z1` with target velocity
/// `z1 - z0`. Per-item `t`.
pub fn transport_path<T: Scalar>(
    z0: &Tensor<T>,
    z1: &Tensor<T>,
    t: &[T],
) -> Result<(Tensor<T>, Tensor<T>)> {
    if z0.shape() != z1.shape() {
        return Err(Error::usage(format!(
            "transport endpoints differ: {:?} vs {:?}",
            z0.shape(),
            z1.shape()
        )));
    }
    if z0.ndim() != 3 || t.len() != z0.shape()[0] {
        return Err(Error::usage(format!(
            "need one t per batch item ({} given for {:?})",
            t.len(),
            z0.shape()
        )));
    }
    for &ti in t {
        let tf = ti.as_f64();
        if !(0.0..=1.0).contains(&tf) {
            return Err(Error::usage(format!("path time {tf} outside [0, 1]")));
        }
    }
    let (b, d, tt) = (z0.shape()[0], z0.shape()[1], z0.shape()[2]);
    let per = d * tt;
    let mut psi = Vec::with_capacity(b * per);
    for bi in 0..b {
        let ti = t[bi];
        let one_m = T::one() - ti;
        for i in 0..per {
            let a = z0.data()[bi * per + i];
            let c = z1.data()[bi * per + i];
            psi.push(one_m * a + ti * c);
        }
    }
    let velocity = z1.zip_map(z0, |a, b| a - b)?;
    Ok((Tensor::from_vec(z0.shape().to_vec(), psi)?, velocity))
}

/// Anything that predicts a velocity from (state, condition, time).
pub trait VelocityField<T: Scalar> {
    fn velocity<'a>(
        &self,
        ctx: &Ctx<'a, T>,
        state: Val<'a, T>,
        cond: Val<'a, T>,
        t: &[T],
    ) -> Result<Val<'a, T>>;
}

impl<T: Scalar> VelocityField<T> for UConformer {
    fn velocity<'a>(
        &self,
        ctx: &Ctx<'a, T>,
        state: Val<'a, T>,
        cond: Val<'a, T>,
        t: &[T],
    ) -> Result<Val<'a, T>> {
        self.forward(ctx, state, cond, t)
    }
}

/// Core flow-matching regression given explicit path inputs: mean squared
/// error between the predicted velocity at `psi_t` and `z1 - z0`.
pub fn flow_matching_loss_inner<'a, T: Scalar, F: VelocityField<T>>(
    ctx: &Ctx<'a, T>,
    field: &F,
    cond: Val<'a, T>,
    z1_norm: &Tensor<T>,
    z0: &Tensor<T>,
    t: &[T],
) -> Result<Val<'a, T>> {
    let (psi, target) = transport_path(z0, z1_norm, t)?;
    let state = ctx.constant(psi);
    let v = field.velocity(ctx, state, cond, t)?;
    Ok(v.sub(ctx.constant(target))?.square().mean_all())
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    /// Learned embedding width for the 3 voicing labels.
    pub label_embed_dim: usize,
    /// Classifier-free guidance scale.
    pub guidance_scale: f64,
    /// Probability of replacing the condition with the learned null
    /// condition during training.
    pub condition_dropout: f64,
    /// Euler integration steps at inference.
    pub ode_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            label_embed_dim: 8,
            guidance_scale: 1.5,
            condition_dropout: 0.1,
            ode_steps: 25,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.condition_dropout) {
            return Err(Error::config(format!(
                "condition dropout {} outside [0, 1)",
                self.condition_dropout
            )));
        }
        if self.guidance_scale < 0.0 {
            return Err(Error::config("guidance scale must be >= 0"));
        }
        if self.ode_steps == 0 {
            return Err(Error::config("ode_steps must be >= 1"));
        }
        Ok(())
    }
}

/// Fuses the normalized LR embedding with embedded voicing labels through a
/// kernel-3 same-padded convolution.
pub struct ConditionFuser {
    label_embed: Embedding,
    conv: Conv1d,
    pub cond_dim: usize,
}

impl ConditionFuser {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        latent_dim: usize,
        label_embed_dim: usize,
        cond_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(ConditionFuser {
            label_embed: Embedding::new(
                store,
                &format!("{prefix}.label_embed"),
                3,
                label_embed_dim,
                rng,
            )?,
            conv: Conv1d::new(
                store,
                &format!("{prefix}.conv"),
                latent_dim + label_embed_dim,
                cond_dim,
                3,
                1,
                1,
                true,
                rng,
            )?,
            cond_dim,
        })
    }

    /// `z_l_norm [B, D, T]` + labels (flattened `B*T`, values in {0,1,2})
    /// -> `[B, C, T]`.
    pub fn fuse<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        z_l_norm: Val<'a, T>,
        labels: &[u8],
    ) -> Result<Val<'a, T>> {
        let shape = z_l_norm.shape();
        if shape.len() != 3 {
            return Err(Error::shape(format!("fuse expects [B, D, T], got {shape:?}")));
        }
        let (b, t) = (shape[0], shape[2]);
        if labels.len() != b * t {
            return Err(Error::usage(format!(
                "label count {} does not match B*T = {}",
                labels.len(),
                b * t
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 2) {
            return Err(Error::usage(format!("voicing label {bad} outside {{0,1,2}}")));
        }
        let ids: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let emb = self
            .label_embed
            .forward(ctx, &ids)?
            .reshape(vec![b, t, self.label_embed.dim])?
            .permute(&[0, 2, 1])?;
        let joint = concat(ctx.tape, &[z_l_norm, emb], 1)?;
        self.conv.forward(ctx, joint)
    }
}

/// The full converter: fusion, velocity network, null condition, statistics.
pub struct FlowModel {
    pub net: UConformer,
    pub fuser: ConditionFuser,
    pub null_condition: ParamId,
    pub cfg: FlowConfig,
    pub lr_stats: Option<NormStats>,
    pub hr_stats: Option<NormStats>,
}

impl FlowModel {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        net: UConformer,
        cfg: FlowConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let cond_dim = net.cfg.cond_dim;
        let fuser = ConditionFuser::new(
            store,
            "flow.fuse",
            net.cfg.latent_dim,
            cfg.label_embed_dim,
            cond_dim,
            rng,
        )?;
        let null_condition = store.register(
            "flow.null_condition",
            Tensor::randn(vec![cond_dim], rng).map(|v| v * T::of_f64(0.1)),
        )?;
        Ok(FlowModel { net, fuser, null_condition, cfg, lr_stats: None, hr_stats: None })
    }

    fn lr_stats(&self) -> Result<&NormStats> {
        self.lr_stats
            .as_ref()
            .ok_or_else(|| Error::config("LR normalization stats not loaded"))
    }

    fn hr_stats(&self) -> Result<&NormStats> {
        self.hr_stats
            .as_ref()
            .ok_or_else(|| Error::config("HR normalization stats not loaded"))
    }

    /// Null condition broadcast to `[B, C, T]`.
    fn null_cond<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, b: usize, t: usize) -> Result<Val<'a, T>> {
        let c = self.fuser.cond_dim;
        let ones = ctx.constant(Tensor::ones(vec![b, c, t]));
        ones.mul(ctx.param(self.null_condition).reshape(vec![c, 1])?)
    }

    /// Fused condition from a raw (unnormalized) LR embedding.
    pub fn fuse_condition<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        z_l: Val<'a, T>,
        labels: &[u8],
    ) -> Result<Val<'a, T>> {
        let z_norm = normalize_val(ctx.tape, z_l, self.lr_stats()?)?;
        self.fuser.fuse(ctx, z_norm, labels)
    }

    /// Training objective on one batch: per-item `t ~ U(0,1)`,
    /// `z0 ~ N(0, I)`, all-or-nothing condition dropout, squared velocity
    /// regression error.
    pub fn cfm_loss<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        z_l: Val<'a, T>,
        labels: &[u8],
        z1_norm: &Tensor<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Val<'a, T>> {
        let shape = z1_norm.shape().to_vec();
        let b = shape[0];
        let t_len = shape[2];
        let t: Vec<T> = (0..b).map(|_| T::uniform01(rng)).collect();
        let z0 = Tensor::<T>::randn(shape, rng);
        let drop: Vec<bool> = (0..b)
            .map(|_| rng.random::<f64>() < self.cfg.condition_dropout)
            .collect();

        let cond = self.fuse_condition(ctx, z_l, labels)?;
        let cond = if drop.iter().any(|&d| d) {
            let mask: Vec<T> = drop
                .iter()
                .map(|&d| if d { T::zero() } else { T::one() })
                .collect();
            let keep = ctx.constant(Tensor::from_vec(vec![b, 1, 1], mask.clone())?);
            let inv = ctx.constant(Tensor::from_vec(
                vec![b, 1, 1],
                mask.iter().map(|&m| T::one() - m).collect(),
            )?);
            let null_bc = self.null_cond(ctx, b, t_len)?;
            cond.mul(keep)?.add(null_bc.mul(inv)?)?
        } else {
            cond
        };
        flow_matching_loss_inner(ctx, &self.net, cond, z1_norm, &z0, &t)
    }

    /// Guided velocity: `v_null + alpha * (v_cond - v_null)`.
    pub fn cfg_velocity<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        state: Val<'a, T>,
        cond: Val<'a, T>,
        t: &[T],
        alpha: f64,
    ) -> Result<Val<'a, T>> {
        let shape = state.shape();
        let v_cond = self.net.velocity(ctx, state, cond, t)?;
        if alpha == 1.0 {
            return Ok(v_cond);
        }
        let null_bc = self.null_cond(ctx, shape[0], shape[2])?;
        let v_null = self.net.velocity(ctx, state, null_bc, t)?;
        v_null.add(v_cond.sub(v_null)?.scale(T::of_f64(alpha)))
    }

    /// Euler integration of the guided field from t=0 to t=1 in the
    /// normalized HR space, in-graph (gradients flow through the condition).
    pub fn euler_solve<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        z0: Val<'a, T>,
        cond: Val<'a, T>,
        steps: usize,
        alpha: f64,
    ) -> Result<Val<'a, T>> {
        if steps == 0 {
            return Err(Error::usage("euler_solve needs steps >= 1"));
        }
        let b = z0.shape()[0];
        let dt = T::of_f64(1.0 / steps as f64);
        let mut z = z0;
        for k in 0..steps {
            let tk = T::of_f64(k as f64 / steps as f64);
            let v = self.cfg_velocity(ctx, z, cond, &vec![tk; b], alpha)?;
            z = z.add(v.scale(dt))?;
            if !z.value().all_finite() {
                return Err(Error::Divergence {
                    step: k,
                    msg: "non-finite state during integration".into(),
                });
            }
        }
        Ok(z)
    }

    /// Full conversion: fuse condition, integrate from seeded noise, return
    /// the denormalized HR embedding. Deterministic for a fixed seed.
    pub fn convert<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        z_l: Val<'a, T>,
        labels: &[u8],
        steps: usize,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Val<'a, T>> {
        let shape = z_l.shape();
        let cond = self.fuse_condition(ctx, z_l, labels)?;
        let z0 = ctx.constant(Tensor::randn(shape, rng));
        let z_norm = self.euler_solve(ctx, z0, cond, steps, alpha)?;
        denormalize_val(ctx.tape, z_norm, self.hr_stats()?)
    }
}

/// Plain-tensor Euler integrator over an arbitrary field (first-order,
/// uniform grid `t_k = k/steps`).
pub fn euler_integrate<T: Scalar>(
    z0: &Tensor<T>,
    steps: usize,
    mut field: impl FnMut(&Tensor<T>, T) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::usage("euler_integrate needs steps >= 1"));
    }
    let dt = T::of_f64(1.0 / steps as f64);
    let mut z = z0.clone();
    for k in 0..steps {
        let tk = T::of_f64(k as f64 / steps as f64);
        let v = field(&z, tk)?;
        if v.shape() != z.shape() {
            return Err(Error::shape(format!(
                "field produced {:?} for state {:?}",
                v.shape(),
                z.shape()
            )));
        }
        z = z.zip_map(&v, |a, b| a + b * dt)?;
        if !z.all_finite() {
            return Err(Error::Divergence {
                step: k,
                msg: "non-finite state during integration".into(),
            });
        }
    }
    Ok(z)
}
