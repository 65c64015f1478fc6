//! Parameter storage and small layer building blocks.
//!
//! Parameters live in a [`ParamStore`] outside any tape; each forward pass
//! binds them onto a fresh [`Tape`] through a [`Ctx`]. Binding is lazy and
//! memoized, so a parameter used twice in one pass maps to a single node and
//! its gradients accumulate.

use std::cell::RefCell;
use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use super::tape::Val;
use super::{GradMap, Scalar, Tape, Tensor};
use crate::error::{Error, Result};

/// Index of a named parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors.
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(format!(
                "parameter {} update {:?} vs stored {:?}",
                self.names[id.0],
                value.shape(),
                self.values[id.0].shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Ids of parameters whose name starts with any of the given prefixes.
    pub fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        (0..self.values.len()).map(ParamId).collect()
    }
}

/// One forward pass: a tape plus lazily bound parameters.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    pub store: &'a ParamStore<T>,
    bound: RefCell<HashMap<ParamId, usize>>,
    trainable: bool,
    pub train: bool,
    rng: RefCell<Option<ChaCha8Rng>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Inference context: parameters are constants, stochastic layers off.
    pub fn inference(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Ctx {
            tape,
            store,
            bound: RefCell::new(HashMap::new()),
            trainable: false,
            train: false,
            rng: RefCell::new(None),
        }
    }

    /// Training context: parameters require gradients.
    pub fn training(tape: &'a Tape<T>, store: &'a ParamStore<T>, rng: ChaCha8Rng) -> Self {
        Ctx {
            tape,
            store,
            bound: RefCell::new(HashMap::new()),
            trainable: true,
            train: true,
            rng: RefCell::new(Some(rng)),
        }
    }

    /// Training-mode graph whose parameters stay frozen (gradients flow
    /// through them but are not collected).
    pub fn frozen(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Ctx {
            tape,
            store,
            bound: RefCell::new(HashMap::new()),
            trainable: false,
            train: false,
            rng: RefCell::new(None),
        }
    }

    /// Bind a parameter onto the tape (memoized).
    pub fn param(&self, id: ParamId) -> Val<'a, T> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Val { tape: self.tape, id: node };
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.trainable);
        self.bound.borrow_mut().insert(id, v.id);
        v
    }

    pub fn constant(&self, t: Tensor<T>) -> Val<'a, T> {
        self.tape.constant(t)
    }

    /// Inverted dropout; identity when not in train mode or `p == 0`.
    pub fn dropout(&self, x: Val<'a, T>, p: f64) -> Result<Val<'a, T>> {
        if !self.train || p <= 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::usage(format!("dropout probability {p} outside [0,1)")));
        }
        let mut rng_ref = self.rng.borrow_mut();
        let rng = rng_ref
            .as_mut()
            .ok_or_else(|| Error::usage("dropout in train mode requires an rng"))?;
        let keep = T::of_f64(1.0 / (1.0 - p));
        let shape = x.shape();
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n)
            .map(|_| if T::uniform01(rng).as_f64() < p { T::zero() } else { keep })
            .collect();
        let mask = self.tape.constant(Tensor::from_vec(shape, mask)?);
        x.mul(mask)
    }

    /// Uniform draws from the context rng (training mode only).
    pub fn with_rng<R>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> Result<R> {
        let mut rng_ref = self.rng.borrow_mut();
        let rng = rng_ref
            .as_mut()
            .ok_or_else(|| Error::usage("context has no rng"))?;
        Ok(f(rng))
    }

    /// Collect per-parameter gradients from a backward pass.
    ///
    /// Returns a vector aligned with the store; entries are `None` for
    /// parameters that were never bound or not reached by the loss.
    pub fn param_grads(&self, grads: &GradMap<T>) -> Vec<Option<Tensor<T>>> {
        let mut out = vec![None; self.store.len()];
        for (&pid, &node) in self.bound.borrow().iter() {
            if let Some(g) = grads.by_id(node) {
                out[pid.0] = Some(g.clone());
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

fn kaiming_uniform<T: Scalar>(
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let bound = T::of_f64(1.0 / (fan_in as f64).sqrt());
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// Affine map `y = x W + b` applied to the last dimension.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.register(
            format!("{name}.weight"),
            kaiming_uniform(vec![in_dim, out_dim], in_dim, rng),
        )?;
        let b = if bias {
            Some(store.register(
                format!("{name}.bias"),
                kaiming_uniform(vec![out_dim], in_dim, rng),
            )?)
        } else {
            None
        };
        Ok(Linear { w, b, in_dim, out_dim })
    }

    /// `x [..., in] -> [..., out]`.
    pub fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Val<'a, T>) -> Result<Val<'a, T>> {
        let shape = x.shape();
        let last = *shape
            .last()
            .ok_or_else(|| Error::shape("linear on scalar".to_string()))?;
        if last != self.in_dim {
            return Err(Error::shape(format!(
                "linear expects last dim {}, got {:?}",
                self.in_dim, shape
            )));
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = x.reshape(vec![rows, self.in_dim])?;
        let mut y = flat.matmul(ctx.param(self.w))?;
        if let Some(b) = self.b {
            y = y.add(ctx.param(b))?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        y.reshape(out_shape)
    }
}

/// 1-D convolution layer over `[B, C, L]`.
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel;
        let w = store.register(
            format!("{name}.weight"),
            kaiming_uniform(vec![out_ch, in_ch, kernel], fan_in, rng),
        )?;
        let b = if bias {
            Some(store.register(
                format!("{name}.bias"),
                kaiming_uniform(vec![out_ch], fan_in, rng),
            )?)
        } else {
            None
        };
        Ok(Conv1d { w, b, stride, pad })
    }

    pub fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Val<'a, T>) -> Result<Val<'a, T>> {
        x.conv1d(
            ctx.param(self.w),
            self.b.map(|b| ctx.param(b)),
            self.stride,
            self.pad,
        )
    }
}

/// Transposed 1-D convolution layer over `[B, C, L]`.
pub struct ConvTranspose1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose1d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel;
        let w = store.register(
            format!("{name}.weight"),
            kaiming_uniform(vec![in_ch, out_ch, kernel], fan_in, rng),
        )?;
        let b = if bias {
            Some(store.register(
                format!("{name}.bias"),
                kaiming_uniform(vec![out_ch], fan_in, rng),
            )?)
        } else {
            None
        };
        Ok(ConvTranspose1d { w, b, stride, pad })
    }

    pub fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Val<'a, T>) -> Result<Val<'a, T>> {
        x.conv_transpose1d(
            ctx.param(self.w),
            self.b.map(|b| ctx.param(b)),
            self.stride,
            self.pad,
        )
    }
}

/// Layer norm over the last dimension.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.register(format!("{name}.gamma"), Tensor::ones(vec![dim]))?;
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(vec![dim]))?;
        Ok(LayerNorm { gamma, beta, eps: 1e-5 })
    }

    pub fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Val<'a, T>) -> Result<Val<'a, T>> {
        x.layer_norm(ctx.param(self.gamma), ctx.param(self.beta), T::of_f64(self.eps))
    }
}

/// Embedding table lookup.
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        entries: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let table = store.register(
            format!("{name}.table"),
            Tensor::randn(vec![entries, dim], rng),
        )?;
        Ok(Embedding { table, dim })
    }

    /// `ids` flattened; output `[ids.len(), dim]`.
    pub fn forward<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        ids: &[usize],
    ) -> Result<Val<'a, T>> {
        super::ops::embedding(ctx.param(self.table), ids)
    }
}
