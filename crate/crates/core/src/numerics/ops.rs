//! Differentiable primitives.
//!
//! Broadcasting is deliberately limited: the right-hand operand of an
//! elementwise op may broadcast against the left one (right-aligned, each
//! dimension equal or 1). Anything else must be written explicitly so every
//! gradient rule stays auditable.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::tape::Val;
use super::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Shape helpers
// ---------------------------------------------------------------------------

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Per-lhs-dimension stride into the rhs buffer (0 where rhs broadcasts).
fn bc_strides(lhs: &[usize], rhs: &[usize]) -> Result<Vec<usize>> {
    if rhs.len() > lhs.len() {
        return Err(Error::shape(format!(
            "broadcast rhs {:?} has higher rank than lhs {:?}",
            rhs, lhs
        )));
    }
    let offset = lhs.len() - rhs.len();
    let mut rstrides = vec![0usize; lhs.len()];
    let mut stride = 1usize;
    for i in (0..rhs.len()).rev() {
        let (l, r) = (lhs[offset + i], rhs[i]);
        if r == l {
            rstrides[offset + i] = stride;
        } else if r == 1 {
            rstrides[offset + i] = 0;
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast rhs {:?} against lhs {:?} (dim {} vs {})",
                rhs, lhs, r, l
            )));
        }
        stride *= r;
    }
    Ok(rstrides)
}

/// Visit each lhs linear index together with the matching rhs index.
fn for_each_bc(lhs: &[usize], rstrides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = lhs.iter().product();
    let nd = lhs.len();
    if nd == 0 {
        if n == 1 {
            f(0, 0);
        }
        return;
    }
    let mut coords = vec![0usize; nd];
    let mut ridx = 0usize;
    for i in 0..n {
        f(i, ridx);
        for d in (0..nd).rev() {
            coords[d] += 1;
            ridx += rstrides[d];
            if coords[d] < lhs[d] {
                break;
            }
            ridx -= rstrides[d] * lhs[d];
            coords[d] = 0;
        }
    }
}

fn ew_bc<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let rstrides = bc_strides(a.shape(), b.shape())?;
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); ad.len()];
    for_each_bc(a.shape(), &rstrides, |i, r| out[i] = f(ad[i], bd[r]));
    Tensor::from_vec(a.shape().to_vec(), out)
}

/// Sum `grad` (lhs-shaped) down to the rhs shape.
fn reduce_to_rhs<T: Scalar>(grad: &Tensor<T>, rhs_shape: &[usize]) -> Tensor<T> {
    if grad.shape() == rhs_shape {
        return grad.clone();
    }
    let rstrides = bc_strides(grad.shape(), rhs_shape).expect("checked in forward");
    let gd = grad.data();
    let mut out = vec![T::zero(); rhs_shape.iter().product()];
    for_each_bc(grad.shape(), &rstrides, |i, r| out[r] = out[r] + gd[i]);
    Tensor::from_vec(rhs_shape.to_vec(), out).expect("reduce shape")
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

fn transpose2d<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

impl<'t, T: Scalar> Val<'t, T> {
    pub fn add(self, rhs: Val<'t, T>) -> Result<Val<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let y = ew_bc(&a, &b, |x, y| x + y)?;
        let rhs_shape = b.shape().to_vec();
        Ok(self.tape.record(y, &[self.id, rhs.id], || {
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| reduce_to_rhs(g, &rhs_shape)),
                ]
            })
        }))
    }

    pub fn sub(self, rhs: Val<'t, T>) -> Result<Val<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let y = ew_bc(&a, &b, |x, y| x - y)?;
        let rhs_shape = b.shape().to_vec();
        Ok(self.tape.record(y, &[self.id, rhs.id], || {
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| reduce_to_rhs(&g.map(|v| -v), &rhs_shape)),
                ]
            })
        }))
    }

    pub fn mul(self, rhs: Val<'t, T>) -> Result<Val<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let y = ew_bc(&a, &b, |x, y| x * y)?;
        Ok(self.tape.record(y, &[self.id, rhs.id], || {
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    ew_bc(g, &b, |gv, bv| gv * bv).expect("mul backward lhs")
                });
                let gb = needs[1].then(|| {
                    let gxa = g.zip_map(&a, |gv, av| gv * av).expect("mul backward rhs");
                    reduce_to_rhs(&gxa, b.shape())
                });
                vec![ga, gb]
            })
        }))
    }

    pub fn div(self, rhs: Val<'t, T>) -> Result<Val<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let y = ew_bc(&a, &b, |x, y| x / y)?;
        Ok(self.tape.record(y, &[self.id, rhs.id], || {
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    ew_bc(g, &b, |gv, bv| gv / bv).expect("div backward lhs")
                });
                let gb = needs[1].then(|| {
                    // d/db (a/b) = -a / b^2
                    let mut t = g.zip_map(&a, |gv, av| gv * av).expect("div backward rhs");
                    t = ew_bc(&t, &b, |v, bv| -v / (bv * bv)).expect("div backward rhs");
                    reduce_to_rhs(&t, b.shape())
                });
                vec![ga, gb]
            })
        }))
    }

    pub fn neg(self) -> Val<'t, T> {
        let y = self.value().map(|v| -v);
        self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| vec![Some(g.map(|v| -v))])
        })
    }

    pub fn scale(self, c: T) -> Val<'t, T> {
        let y = self.value().map(|v| v * c);
        self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| vec![Some(g.map(|v| v * c))])
        })
    }

    pub fn add_scalar(self, c: T) -> Val<'t, T> {
        let y = self.value().map(|v| v + c);
        self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| vec![Some(g.clone())])
        })
    }

    pub fn square(self) -> Val<'t, T> {
        let x = self.value();
        let y = x.map(|v| v * v);
        self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| {
                let two = T::of_f64(2.0);
                vec![Some(g.zip_map(&x, |gv, xv| gv * two * xv).expect("square"))]
            })
        })
    }

    /// Elementwise square root. Callers are responsible for keeping inputs
    /// strictly positive (add an epsilon first) since the slope blows up at 0.
    pub fn sqrt(self) -> Val<'t, T> {
        let y = self.value().map(|v| v.sqrt());
        let ysaved = y.clone();
        self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| {
                let half = T::of_f64(0.5);
                vec![Some(
                    g.zip_map(&ysaved, |gv, yv| gv * half / yv).expect("sqrt"),
                )]
            })
        })
    }

    pub fn abs(self) -> Val<'t, T> {
        let x = self.value();
        let y = x.map(|v| v.abs());
        self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&x, |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                }).expect("abs"))]
            })
        })
    }

    pub fn relu(self) -> Val<'t, T> {
        let x = self.value();
        let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&x, |gv, xv| {
                    if xv > T::zero() { gv } else { T::zero() }
                }).expect("relu"))]
            })
        })
    }

    pub fn sigmoid(self) -> Val<'t, T> {
        let y = self.value().map(sigmoid_scalar);
        let ysaved = y.clone();
        self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&ysaved, |gv, yv| gv * yv * (T::one() - yv)).expect("sigmoid"))]
            })
        })
    }

    /// Swish / SiLU: `x * sigmoid(x)`.
    pub fn swish(self) -> Val<'t, T> {
        let x = self.value();
        let y = x.map(|v| v * sigmoid_scalar(v));
        self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&x, |gv, xv| {
                    let s = sigmoid_scalar(xv);
                    gv * s * (T::one() + xv * (T::one() - s))
                }).expect("swish"))]
            })
        })
    }

    pub fn tanh(self) -> Val<'t, T> {
        let y = self.value().map(|v| v.tanh());
        let ysaved = y.clone();
        self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&ysaved, |gv, yv| gv * (T::one() - yv * yv)).expect("tanh"))]
            })
        })
    }
}

fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

impl<'t, T: Scalar> Val<'t, T> {
    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(self, rhs: Val<'t, T>) -> Result<Val<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul on {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let y = Tensor::from_vec(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))?;
        Ok(self.tape.record(y, &[self.id, rhs.id], || {
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let bt = transpose2d(b.data(), k, n);
                    Tensor::from_vec(vec![m, k], matmul_raw(g.data(), &bt, m, n, k)).unwrap()
                });
                let gb = needs[1].then(|| {
                    let at = transpose2d(a.data(), m, k);
                    Tensor::from_vec(vec![k, n], matmul_raw(&at, g.data(), k, m, n)).unwrap()
                });
                vec![ga, gb]
            })
        }))
    }

    /// Batched matrix product `[p,m,k] x [p,k,n] -> [p,m,n]`.
    pub fn bmm(self, rhs: Val<'t, T>) -> Result<Val<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(format!("bmm on {:?} x {:?}", sa, sb)));
        }
        let (p, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Vec::with_capacity(p * m * n);
        for i in 0..p {
            out.extend(matmul_raw(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let y = Tensor::from_vec(vec![p, m, n], out)?;
        Ok(self.tape.record(y, &[self.id, rhs.id], || {
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut out = Vec::with_capacity(p * m * k);
                    for i in 0..p {
                        let bt = transpose2d(&b.data()[i * k * n..(i + 1) * k * n], k, n);
                        out.extend(matmul_raw(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &bt,
                            m,
                            n,
                            k,
                        ));
                    }
                    Tensor::from_vec(vec![p, m, k], out).unwrap()
                });
                let gb = needs[1].then(|| {
                    let mut out = Vec::with_capacity(p * k * n);
                    for i in 0..p {
                        let at = transpose2d(&a.data()[i * m * k..(i + 1) * m * k], m, k);
                        out.extend(matmul_raw(
                            &at,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            k,
                            m,
                            n,
                        ));
                    }
                    Tensor::from_vec(vec![p, k, n], out).unwrap()
                });
                vec![ga, gb]
            })
        }))
    }
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

fn conv1d_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    bsz: usize,
    cin: usize,
    l: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lo: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); bsz * cout * lo];
    for bi in 0..bsz {
        for oc in 0..cout {
            let yrow = &mut y[(bi * cout + oc) * lo..(bi * cout + oc + 1) * lo];
            for ci in 0..cin {
                let xrow = &x[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                let wrow = &w[(oc * cin + ci) * k..(oc * cin + ci + 1) * k];
                for (t, yv) in yrow.iter_mut().enumerate() {
                    let start = (t * stride) as isize - pad as isize;
                    let k0 = (-start).max(0) as usize;
                    let k1 = k.min((l as isize - start).max(0) as usize);
                    let mut acc = T::zero();
                    for kk in k0..k1 {
                        acc = acc + xrow[(start + kk as isize) as usize] * wrow[kk];
                    }
                    *yv = *yv + acc;
                }
            }
        }
    }
    y
}

impl<'t, T: Scalar> Val<'t, T> {
    /// 1-D cross-correlation: `x [B,Cin,L] * w [Cout,Cin,K] -> [B,Cout,Lo]`
    /// with `Lo = (L + 2*pad - K)/stride + 1`.
    pub fn conv1d(
        self,
        weight: Val<'t, T>,
        bias: Option<Val<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Val<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let (sx, sw) = (x.shape().to_vec(), w.shape().to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::shape(format!("conv1d on x {:?}, w {:?}", sx, sw)));
        }
        if stride == 0 {
            return Err(Error::usage("conv1d stride must be >= 1"));
        }
        let (bsz, cin, l) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if l + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv1d kernel {} longer than padded input {}",
                k,
                l + 2 * pad
            )));
        }
        let lo = (l + 2 * pad - k) / stride + 1;
        let mut ydata = conv1d_fwd(x.data(), w.data(), bsz, cin, l, cout, k, stride, pad, lo);
        if let Some(bv) = bias {
            let b = bv.value();
            if b.shape() != [cout] {
                return Err(Error::shape(format!(
                    "conv1d bias {:?}, expected [{}]",
                    b.shape(),
                    cout
                )));
            }
            for bi in 0..bsz {
                for oc in 0..cout {
                    let bvv = b.data()[oc];
                    for yv in &mut ydata[(bi * cout + oc) * lo..(bi * cout + oc + 1) * lo] {
                        *yv = *yv + bvv;
                    }
                }
            }
        }
        let y = Tensor::from_vec(vec![bsz, cout, lo], ydata)?;
        let mut parents = vec![self.id, weight.id];
        if let Some(bv) = &bias {
            parents.push(bv.id);
        }
        let has_bias = bias.is_some();
        Ok(self.tape.record(y, &parents, || {
            Box::new(move |g, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); bsz * cin * l];
                    for bi in 0..bsz {
                        for oc in 0..cout {
                            let grow = &gd[(bi * cout + oc) * lo..(bi * cout + oc + 1) * lo];
                            for ci in 0..cin {
                                let wrow = &w.data()[(oc * cin + ci) * k..(oc * cin + ci + 1) * k];
                                let gxrow =
                                    &mut gx[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                                for (t, &gv) in grow.iter().enumerate() {
                                    if gv == T::zero() {
                                        continue;
                                    }
                                    let start = (t * stride) as isize - pad as isize;
                                    let k0 = (-start).max(0) as usize;
                                    let k1 = k.min((l as isize - start).max(0) as usize);
                                    for kk in k0..k1 {
                                        let xi = (start + kk as isize) as usize;
                                        gxrow[xi] = gxrow[xi] + gv * wrow[kk];
                                    }
                                }
                            }
                        }
                    }
                    Tensor::from_vec(vec![bsz, cin, l], gx).unwrap()
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); cout * cin * k];
                    for bi in 0..bsz {
                        for oc in 0..cout {
                            let grow = &gd[(bi * cout + oc) * lo..(bi * cout + oc + 1) * lo];
                            for ci in 0..cin {
                                let xrow =
                                    &x.data()[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                                let gwrow =
                                    &mut gw[(oc * cin + ci) * k..(oc * cin + ci + 1) * k];
                                for (t, &gv) in grow.iter().enumerate() {
                                    if gv == T::zero() {
                                        continue;
                                    }
                                    let start = (t * stride) as isize - pad as isize;
                                    let k0 = (-start).max(0) as usize;
                                    let k1 = k.min((l as isize - start).max(0) as usize);
                                    for kk in k0..k1 {
                                        gwrow[kk] =
                                            gwrow[kk] + gv * xrow[(start + kk as isize) as usize];
                                    }
                                }
                            }
                        }
                    }
                    Tensor::from_vec(vec![cout, cin, k], gw).unwrap()
                });
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(needs[2].then(|| {
                        let mut gb = vec![T::zero(); cout];
                        for bi in 0..bsz {
                            for oc in 0..cout {
                                for &gv in &gd[(bi * cout + oc) * lo..(bi * cout + oc + 1) * lo] {
                                    gb[oc] = gb[oc] + gv;
                                }
                            }
                        }
                        Tensor::from_vec(vec![cout], gb).unwrap()
                    }));
                }
                grads
            })
        }))
    }

    /// Transposed 1-D convolution: `x [B,Cin,L] * w [Cin,Cout,K] -> [B,Cout,Lo]`
    /// with `Lo = (L-1)*stride + K - 2*pad`.
    pub fn conv_transpose1d(
        self,
        weight: Val<'t, T>,
        bias: Option<Val<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Val<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let (sx, sw) = (x.shape().to_vec(), w.shape().to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[0] {
            return Err(Error::shape(format!(
                "conv_transpose1d on x {:?}, w {:?}",
                sx, sw
            )));
        }
        if stride == 0 {
            return Err(Error::usage("conv_transpose1d stride must be >= 1"));
        }
        let (bsz, cin, l) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[1], sw[2]);
        let full = (l - 1) * stride + k;
        if full < 2 * pad + 1 {
            return Err(Error::shape("conv_transpose1d pad too large".to_string()));
        }
        let lo = full - 2 * pad;
        let mut ydata = vec![T::zero(); bsz * cout * lo];
        for bi in 0..bsz {
            for ci in 0..cin {
                let xrow = &x.data()[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                for oc in 0..cout {
                    let wrow = &w.data()[(ci * cout + oc) * k..(ci * cout + oc + 1) * k];
                    let yrow = &mut ydata[(bi * cout + oc) * lo..(bi * cout + oc + 1) * lo];
                    for (t, &xv) in xrow.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        let base = (t * stride) as isize - pad as isize;
                        let k0 = (-base).max(0) as usize;
                        let k1 = k.min((lo as isize - base).max(0) as usize);
                        for kk in k0..k1 {
                            let yi = (base + kk as isize) as usize;
                            yrow[yi] = yrow[yi] + xv * wrow[kk];
                        }
                    }
                }
            }
        }
        if let Some(bv) = &bias {
            let b = bv.value();
            if b.shape() != [cout] {
                return Err(Error::shape(format!(
                    "conv_transpose1d bias {:?}, expected [{}]",
                    b.shape(),
                    cout
                )));
            }
            for bi in 0..bsz {
                for oc in 0..cout {
                    let bvv = b.data()[oc];
                    for yv in &mut ydata[(bi * cout + oc) * lo..(bi * cout + oc + 1) * lo] {
                        *yv = *yv + bvv;
                    }
                }
            }
        }
        let y = Tensor::from_vec(vec![bsz, cout, lo], ydata)?;
        let mut parents = vec![self.id, weight.id];
        if let Some(bv) = &bias {
            parents.push(bv.id);
        }
        let has_bias = bias.is_some();
        Ok(self.tape.record(y, &parents, || {
            Box::new(move |g, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); bsz * cin * l];
                    for bi in 0..bsz {
                        for ci in 0..cin {
                            let gxrow = &mut gx[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                            for oc in 0..cout {
                                let wrow =
                                    &w.data()[(ci * cout + oc) * k..(ci * cout + oc + 1) * k];
                                let grow = &gd[(bi * cout + oc) * lo..(bi * cout + oc + 1) * lo];
                                for (t, gxv) in gxrow.iter_mut().enumerate() {
                                    let base = (t * stride) as isize - pad as isize;
                                    let k0 = (-base).max(0) as usize;
                                    let k1 = k.min((lo as isize - base).max(0) as usize);
                                    let mut acc = T::zero();
                                    for kk in k0..k1 {
                                        acc = acc + grow[(base + kk as isize) as usize] * wrow[kk];
                                    }
                                    *gxv = *gxv + acc;
                                }
                            }
                        }
                    }
                    Tensor::from_vec(vec![bsz, cin, l], gx).unwrap()
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); cin * cout * k];
                    for bi in 0..bsz {
                        for ci in 0..cin {
                            let xrow = &x.data()[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                            for oc in 0..cout {
                                let grow = &gd[(bi * cout + oc) * lo..(bi * cout + oc + 1) * lo];
                                let gwrow =
                                    &mut gw[(ci * cout + oc) * k..(ci * cout + oc + 1) * k];
                                for (t, &xv) in xrow.iter().enumerate() {
                                    if xv == T::zero() {
                                        continue;
                                    }
                                    let base = (t * stride) as isize - pad as isize;
                                    let k0 = (-base).max(0) as usize;
                                    let k1 = k.min((lo as isize - base).max(0) as usize);
                                    for kk in k0..k1 {
                                        gwrow[kk] =
                                            gwrow[kk] + xv * grow[(base + kk as isize) as usize];
                                    }
                                }
                            }
                        }
                    }
                    Tensor::from_vec(vec![cin, cout, k], gw).unwrap()
                });
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(needs[2].then(|| {
                        let mut gb = vec![T::zero(); cout];
                        for bi in 0..bsz {
                            for oc in 0..cout {
                                for &gv in &gd[(bi * cout + oc) * lo..(bi * cout + oc + 1) * lo] {
                                    gb[oc] = gb[oc] + gv;
                                }
                            }
                        }
                        Tensor::from_vec(vec![cout], gb).unwrap()
                    }));
                }
                grads
            })
        }))
    }

    /// Depthwise 1-D convolution with same-padding: `x [B,C,L] * w [C,K] -> [B,C,L]`.
    /// Kernel length must be odd.
    pub fn depthwise_conv1d(self, weight: Val<'t, T>) -> Result<Val<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let (sx, sw) = (x.shape().to_vec(), w.shape().to_vec());
        if sx.len() != 3 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::shape(format!(
                "depthwise_conv1d on x {:?}, w {:?}",
                sx, sw
            )));
        }
        let k = sw[1];
        if k % 2 == 0 {
            return Err(Error::usage("depthwise_conv1d kernel must be odd"));
        }
        let (bsz, c, l) = (sx[0], sx[1], sx[2]);
        let pad = (k - 1) / 2;
        let mut ydata = vec![T::zero(); bsz * c * l];
        for bi in 0..bsz {
            for ch in 0..c {
                let xrow = &x.data()[(bi * c + ch) * l..(bi * c + ch + 1) * l];
                let wrow = &w.data()[ch * k..(ch + 1) * k];
                let yrow = &mut ydata[(bi * c + ch) * l..(bi * c + ch + 1) * l];
                for (t, yv) in yrow.iter_mut().enumerate() {
                    let start = t as isize - pad as isize;
                    let k0 = (-start).max(0) as usize;
                    let k1 = k.min((l as isize - start).max(0) as usize);
                    let mut acc = T::zero();
                    for kk in k0..k1 {
                        acc = acc + xrow[(start + kk as isize) as usize] * wrow[kk];
                    }
                    *yv = acc;
                }
            }
        }
        let y = Tensor::from_vec(vec![bsz, c, l], ydata)?;
        Ok(self.tape.record(y, &[self.id, weight.id], || {
            Box::new(move |g, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); bsz * c * l];
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let wrow = &w.data()[ch * k..(ch + 1) * k];
                            let grow = &gd[(bi * c + ch) * l..(bi * c + ch + 1) * l];
                            let gxrow = &mut gx[(bi * c + ch) * l..(bi * c + ch + 1) * l];
                            for (t, &gv) in grow.iter().enumerate() {
                                if gv == T::zero() {
                                    continue;
                                }
                                let start = t as isize - pad as isize;
                                let k0 = (-start).max(0) as usize;
                                let k1 = k.min((l as isize - start).max(0) as usize);
                                for kk in k0..k1 {
                                    let xi = (start + kk as isize) as usize;
                                    gxrow[xi] = gxrow[xi] + gv * wrow[kk];
                                }
                            }
                        }
                    }
                    Tensor::from_vec(vec![bsz, c, l], gx).unwrap()
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); c * k];
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let xrow = &x.data()[(bi * c + ch) * l..(bi * c + ch + 1) * l];
                            let grow = &gd[(bi * c + ch) * l..(bi * c + ch + 1) * l];
                            let gwrow = &mut gw[ch * k..(ch + 1) * k];
                            for (t, &gv) in grow.iter().enumerate() {
                                if gv == T::zero() {
                                    continue;
                                }
                                let start = t as isize - pad as isize;
                                let k0 = (-start).max(0) as usize;
                                let k1 = k.min((l as isize - start).max(0) as usize);
                                for kk in k0..k1 {
                                    gwrow[kk] =
                                        gwrow[kk] + gv * xrow[(start + kk as isize) as usize];
                                }
                            }
                        }
                    }
                    Tensor::from_vec(vec![c, k], gw).unwrap()
                });
                vec![gx, gw]
            })
        }))
    }
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

impl<'t, T: Scalar> Val<'t, T> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Val<'t, T>> {
        let orig = self.value();
        let orig_shape = orig.shape().to_vec();
        let y = orig.reshape(shape.into())?;
        Ok(self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| vec![Some(g.reshape(orig_shape.clone()).expect("reshape back"))])
        }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Val<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow axis {} [{}..{}] on {:?}",
                axis,
                start,
                start + len,
                shape
            )));
        }
        let (outer, alen, inner) = outer_inner(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut yshape = shape.clone();
        yshape[axis] = len;
        let y = Tensor::from_vec(yshape, out)?;
        Ok(self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); outer * alen * inner];
                for o in 0..outer {
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    let base = (o * alen + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(src);
                }
                vec![Some(Tensor::from_vec(shape.clone(), gx).unwrap())]
            })
        }))
    }

    /// Permute dimensions: output dim `d` is input dim `perm[d]`.
    pub fn permute(self, perm: &[usize]) -> Result<Val<'t, T>> {
        let x = self.value();
        let nd = x.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::usage(format!(
                "invalid permutation {:?} for shape {:?}",
                perm,
                x.shape()
            )));
        }
        let perm = perm.to_vec();
        let y = permute_raw(&x, &perm);
        Ok(self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| {
                let mut inv = vec![0usize; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                vec![Some(permute_raw(g, &inv))]
            })
        }))
    }

    /// Swap the last two dimensions.
    pub fn transpose_last2(self) -> Result<Val<'t, T>> {
        let nd = self.value().ndim();
        if nd < 2 {
            return Err(Error::shape("transpose_last2 needs rank >= 2".to_string()));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        self.permute(&perm)
    }
}

fn permute_raw<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let in_strides = x.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let n = x.len();
    let nd = perm.len();
    let mut out = vec![T::zero(); n];
    if nd == 0 {
        return Tensor::scalar(x.data()[0]);
    }
    let mut coords = vec![0usize; nd];
    let mut in_idx = 0usize;
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    for ov in out.iter_mut() {
        *ov = x.data()[in_idx];
        for d in (0..nd).rev() {
            coords[d] += 1;
            in_idx += step[d];
            if coords[d] < out_shape[d] {
                break;
            }
            in_idx -= step[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    Tensor::from_vec(out_shape, out).expect("permute shape")
}

/// Concatenate along `axis`. All inputs must agree on every other dimension.
pub fn concat<'t, T: Scalar>(
    tape: &'t Tape<T>,
    vals: &[Val<'t, T>],
    axis: usize,
) -> Result<Val<'t, T>> {
    if vals.is_empty() {
        return Err(Error::usage("concat of zero tensors"));
    }
    let tensors: Vec<Tensor<T>> = vals.iter().map(|v| v.value()).collect();
    let base = tensors[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::shape(format!("concat axis {} on {:?}", axis, base)));
    }
    for t in &tensors {
        if t.ndim() != base.len()
            || t.shape()
                .iter()
                .zip(&base)
                .enumerate()
                .any(|(d, (a, b))| d != axis && a != b)
        {
            return Err(Error::shape(format!(
                "concat mismatch: {:?} vs {:?} along axis {}",
                t.shape(),
                base,
                axis
            )));
        }
    }
    let (outer, _, inner) = outer_inner(&base, axis);
    let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (t, &len) in tensors.iter().zip(&lens) {
            let base_off = o * len * inner;
            out.extend_from_slice(&t.data()[base_off..base_off + len * inner]);
        }
    }
    let mut yshape = base;
    yshape[axis] = total;
    let y = Tensor::from_vec(yshape, out)?;
    let ids: Vec<usize> = vals.iter().map(|v| v.id).collect();
    let shapes: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
    Ok(tape.record(y, &ids, || {
        Box::new(move |g, needs| {
            let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(lens.len());
            let mut start = 0usize;
            for (i, &len) in lens.iter().enumerate() {
                if needs[i] {
                    let mut gx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base_off = (o * total + start) * inner;
                        gx.extend_from_slice(&g.data()[base_off..base_off + len * inner]);
                    }
                    grads.push(Some(Tensor::from_vec(shapes[i].clone(), gx).unwrap()));
                } else {
                    grads.push(None);
                }
                start += len;
            }
            grads
        })
    }))
}

// ---------------------------------------------------------------------------
// Reductions, softmax, layer norm
// ---------------------------------------------------------------------------

impl<'t, T: Scalar> Val<'t, T> {
    pub fn sum_all(self) -> Val<'t, T> {
        let x = self.value();
        let s: T = x.data().iter().copied().sum();
        let shape = x.shape().to_vec();
        self.tape.record(Tensor::scalar(s), &[self.id], || {
            Box::new(move |g, _| {
                let gv = g.data()[0];
                vec![Some(Tensor::full(shape.clone(), gv))]
            })
        })
    }

    pub fn mean_all(self) -> Val<'t, T> {
        let x = self.value();
        let n = T::of_f64(x.len() as f64);
        let s: T = x.data().iter().copied().sum();
        let shape = x.shape().to_vec();
        self.tape.record(Tensor::scalar(s / n), &[self.id], || {
            Box::new(move |g, _| {
                let gv = g.data()[0] / n;
                vec![Some(Tensor::full(shape.clone(), gv))]
            })
        })
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Val<'t, T>> {
        self.reduce_axis(axis, keepdim, false)
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Val<'t, T>> {
        self.reduce_axis(axis, keepdim, true)
    }

    fn reduce_axis(self, axis: usize, keepdim: bool, mean: bool) -> Result<Val<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "reduce axis {} on {:?}",
                axis, shape
            )));
        }
        let (outer, alen, inner) = outer_inner(&shape, axis);
        let denom = if mean { T::of_f64(alen as f64) } else { T::one() };
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..alen {
                let base = (o * alen + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + x.data()[base + i];
                }
            }
        }
        if mean {
            for v in &mut out {
                *v = *v / denom;
            }
        }
        let mut yshape: Vec<usize> = shape.clone();
        if keepdim {
            yshape[axis] = 1;
        } else {
            yshape.remove(axis);
        }
        let y = Tensor::from_vec(yshape, out)?;
        Ok(self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); outer * alen * inner];
                for o in 0..outer {
                    for a in 0..alen {
                        let base = (o * alen + a) * inner;
                        for i in 0..inner {
                            gx[base + i] = g.data()[o * inner + i] / denom;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(shape.clone(), gx).unwrap())]
            })
        }))
    }

    /// Softmax over the last dimension. Rows sum to one.
    pub fn softmax_last(self) -> Result<Val<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax on scalar".to_string()))?;
        let rows = x.len() / n;
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                let e = (v - mx).exp();
                *o = e;
                denom = denom + e;
            }
            for o in &mut out[r * n..(r + 1) * n] {
                *o = *o / denom;
            }
        }
        let y = Tensor::from_vec(shape, out)?;
        let ysaved = y.clone();
        Ok(self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); ysaved.len()];
                for r in 0..rows {
                    let yrow = &ysaved.data()[r * n..(r + 1) * n];
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let dot: T = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    for ((gx, &yv), &gv) in
                        gx[r * n..(r + 1) * n].iter_mut().zip(yrow).zip(grow)
                    {
                        *gx = yv * (gv - dot);
                    }
                }
                vec![Some(Tensor::from_vec(ysaved.shape().to_vec(), gx).unwrap())]
            })
        }))
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(self, gamma: Val<'t, T>, beta: Val<'t, T>, eps: T) -> Result<Val<'t, T>> {
        let x = self.value();
        let gm = gamma.value();
        let bt = beta.value();
        let shape = x.shape().to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm on scalar".to_string()))?;
        if gm.shape() != [n] || bt.shape() != [n] {
            return Err(Error::shape(format!(
                "layer_norm affine params {:?}/{:?}, expected [{}]",
                gm.shape(),
                bt.shape(),
                n
            )));
        }
        let rows = x.len() / n;
        let mut out = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let nt = T::of_f64(n as f64);
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mu: T = row.iter().copied().sum::<T>() / nt;
            let var: T = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nt;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for i in 0..n {
                let xh = (row[i] - mu) * istd;
                xhat[r * n + i] = xh;
                out[r * n + i] = gm.data()[i] * xh + bt.data()[i];
            }
        }
        let y = Tensor::from_vec(shape.clone(), out)?;
        Ok(self
            .tape
            .record(y, &[self.id, gamma.id, beta.id], || {
                Box::new(move |g, needs| {
                    let gd = g.data();
                    let gx = needs[0].then(|| {
                        let mut gx = vec![T::zero(); rows * n];
                        for r in 0..rows {
                            let xh = &xhat[r * n..(r + 1) * n];
                            let grow = &gd[r * n..(r + 1) * n];
                            let mut mean_d = T::zero();
                            let mut mean_dx = T::zero();
                            for i in 0..n {
                                let d = grow[i] * gm.data()[i];
                                mean_d = mean_d + d;
                                mean_dx = mean_dx + d * xh[i];
                            }
                            mean_d = mean_d / nt;
                            mean_dx = mean_dx / nt;
                            for i in 0..n {
                                let d = grow[i] * gm.data()[i];
                                gx[r * n + i] = (d - mean_d - xh[i] * mean_dx) * inv_std[r];
                            }
                        }
                        Tensor::from_vec(shape.clone(), gx).unwrap()
                    });
                    let ggm = needs[1].then(|| {
                        let mut gg = vec![T::zero(); n];
                        for r in 0..rows {
                            for i in 0..n {
                                gg[i] = gg[i] + gd[r * n + i] * xhat[r * n + i];
                            }
                        }
                        Tensor::from_vec(vec![n], gg).unwrap()
                    });
                    let gbt = needs[2].then(|| {
                        let mut gb = vec![T::zero(); n];
                        for r in 0..rows {
                            for i in 0..n {
                                gb[i] = gb[i] + gd[r * n + i];
                            }
                        }
                        Tensor::from_vec(vec![n], gb).unwrap()
                    });
                    vec![gx, ggm, gbt]
                })
            }))
    }

    /// Pick one entry per row from the last dimension.
    pub fn gather_last(self, indices: &[usize]) -> Result<Val<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::shape("gather_last on scalar".to_string()))?;
        let rows = x.len() / n;
        if indices.len() != rows {
            return Err(Error::shape(format!(
                "gather_last got {} indices for {} rows",
                indices.len(),
                rows
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::usage(format!(
                "gather_last index {} out of range {}",
                bad, n
            )));
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &ix) in indices.iter().enumerate() {
            out.push(x.data()[r * n + ix]);
        }
        let yshape = shape[..shape.len() - 1].to_vec();
        let y = Tensor::from_vec(yshape, out)?;
        let idx = indices.to_vec();
        Ok(self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); rows * n];
                for (r, &ix) in idx.iter().enumerate() {
                    gx[r * n + ix] = g.data()[r];
                }
                vec![Some(Tensor::from_vec(shape.clone(), gx).unwrap())]
            })
        }))
    }

    /// Gated linear unit along `axis`: split in halves, `a * sigmoid(b)`.
    pub fn glu(self, axis: usize) -> Result<Val<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] % 2 != 0 {
            return Err(Error::shape(format!(
                "glu axis {} on shape {:?}",
                axis, shape
            )));
        }
        let half = shape[axis] / 2;
        let a = self.narrow(axis, 0, half)?;
        let b = self.narrow(axis, half, half)?;
        a.mul(b.sigmoid())
    }

    /// L2 norm over the last dimension (keepdim), smoothed by `eps` inside
    /// the square root.
    pub fn l2_norm_last(self, eps: T) -> Result<Val<'t, T>> {
        let nd = self.value().ndim();
        if nd == 0 {
            return Err(Error::shape("l2_norm_last on scalar".to_string()));
        }
        Ok(self
            .square()
            .sum_axis(nd - 1, true)?
            .add_scalar(eps)
            .sqrt())
    }
}

/// Embedding lookup: rows of `table` `[V,E]` selected by `ids`, producing
/// `[ids.len(), E]`. Gradients scatter-add into the table.
pub fn embedding<'t, T: Scalar>(
    table: Val<'t, T>,
    ids: &[usize],
) -> Result<Val<'t, T>> {
    let t = table.value();
    if t.ndim() != 2 {
        return Err(Error::shape(format!(
            "embedding table must be 2-D, got {:?}",
            t.shape()
        )));
    }
    let (v, e) = (t.shape()[0], t.shape()[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(Error::usage(format!(
            "embedding id {} out of range {}",
            bad, v
        )));
    }
    let mut out = Vec::with_capacity(ids.len() * e);
    for &ix in ids {
        out.extend_from_slice(&t.data()[ix * e..(ix + 1) * e]);
    }
    let y = Tensor::from_vec(vec![ids.len(), e], out)?;
    let ids = ids.to_vec();
    Ok(table.tape().record(y, &[table.id], || {
        Box::new(move |g, _| {
            let mut gt = vec![T::zero(); v * e];
            for (r, &ix) in ids.iter().enumerate() {
                for i in 0..e {
                    gt[ix * e + i] = gt[ix * e + i] + g.data()[r * e + i];
                }
            }
            vec![Some(Tensor::from_vec(vec![v, e], gt).unwrap())]
        })
    }))
}

// ---------------------------------------------------------------------------
// Windowed STFT magnitude (differentiable, FFT-backed)
// ---------------------------------------------------------------------------

/// Periodic Hann window.
pub fn hann_window<T: Scalar>(len: usize) -> Vec<T> {
    (0..len)
        .map(|n| {
            let x = 2.0 * std::f64::consts::PI * n as f64 / len as f64;
            T::of_f64(0.5 - 0.5 * x.cos())
        })
        .collect()
}

impl<'t, T: Scalar> Val<'t, T> {
    /// Hann-windowed STFT magnitude of `x [B, N]`, producing
    /// `[B, frames, fft/2+1]` with `frames = 1 + (N - fft)/hop` (0 when the
    /// signal is shorter than one frame). The magnitude is smoothed as
    /// `sqrt(re^2 + im^2 + 1e-12)` so gradients stay finite at silent bins.
    pub fn stft_mag(self, fft_size: usize, hop: usize) -> Result<Val<'t, T>> {
        if !fft_size.is_power_of_two() {
            return Err(Error::usage(format!(
                "fft size {} must be a power of two",
                fft_size
            )));
        }
        if hop == 0 || hop > fft_size {
            return Err(Error::usage(format!(
                "hop {} must be in 1..={}",
                hop, fft_size
            )));
        }
        let x = self.value();
        if x.ndim() != 2 {
            return Err(Error::shape(format!(
                "stft_mag expects [B, N], got {:?}",
                x.shape()
            )));
        }
        let (bsz, n) = (x.shape()[0], x.shape()[1]);
        let frames = if n < fft_size { 0 } else { 1 + (n - fft_size) / hop };
        let bins = fft_size / 2 + 1;
        let window = hann_window::<T>(fft_size);
        let eps = T::of_f64(1e-12);

        let mut planner = FftPlanner::<T>::new();
        let fft = planner.plan_fft_forward(fft_size);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); fft_size];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); fft.get_inplace_scratch_len()];

        let mut mags = vec![T::zero(); bsz * frames * bins];
        let mut res = vec![T::zero(); bsz * frames * bins];
        let mut ims = vec![T::zero(); bsz * frames * bins];
        for b in 0..bsz {
            let sig = &x.data()[b * n..(b + 1) * n];
            for f in 0..frames {
                let off = f * hop;
                for (i, c) in buf.iter_mut().enumerate() {
                    *c = Complex::new(sig[off + i] * window[i], T::zero());
                }
                fft.process_with_scratch(&mut buf, &mut scratch);
                let base = (b * frames + f) * bins;
                for k in 0..bins {
                    let (re, im) = (buf[k].re, buf[k].im);
                    res[base + k] = re;
                    ims[base + k] = im;
                    mags[base + k] = (re * re + im * im + eps).sqrt();
                }
            }
        }
        let y = Tensor::from_vec(vec![bsz, frames, bins], mags)?;
        let mag_saved = y.clone();
        Ok(self.tape.record(y, &[self.id], || {
            Box::new(move |g, _| {
                let mut planner = FftPlanner::<T>::new();
                let ifft = planner.plan_fft_inverse(fft_size);
                let mut buf = vec![Complex::new(T::zero(), T::zero()); fft_size];
                let mut scratch =
                    vec![Complex::new(T::zero(), T::zero()); ifft.get_inplace_scratch_len()];
                let mut gx = vec![T::zero(); bsz * n];
                for b in 0..bsz {
                    for f in 0..frames {
                        let base = (b * frames + f) * bins;
                        for c in buf.iter_mut() {
                            *c = Complex::new(T::zero(), T::zero());
                        }
                        for k in 0..bins {
                            let m = mag_saved.data()[base + k];
                            let gv = g.data()[base + k] / m;
                            buf[k] = Complex::new(res[base + k] * gv, ims[base + k] * gv);
                        }
                        ifft.process_with_scratch(&mut buf, &mut scratch);
                        let off = f * hop;
                        let row = &mut gx[b * n + off..b * n + off + fft_size];
                        for (i, c) in buf.iter().enumerate() {
                            row[i] = row[i] + c.re * window[i];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(vec![bsz, n], gx).unwrap())]
            })
        }))
    }
}
