//! Scalar abstraction and the shared forward/backward engine.
//!
//! Risks, gradients, and Hessian-vector products all run through the same
//! generic code: with `S = f64` the backward pass yields the exact gradient,
//! and with `S = Dual` (parameters carrying a tangent `v`) the gradient's
//! tangent is the exact product `H(w) v`, since every tangent rule below is
//! linear in the tangents.

use crate::error::{CoreError, Result};
use crate::model::{Loss, ModelSpec, Sample, Target};

pub(crate) trait Scalar:
    Copy
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn primal(self) -> f64;
    fn zero() -> Self;
    fn one() -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    /// Multiplication by a constant (no tangent of its own).
    fn mul_f64(self, c: f64) -> Self;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn primal(self) -> f64 {
        self
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn mul_f64(self, c: f64) -> Self {
        self * c
    }
}

/// A value together with a directional derivative.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Dual {
    pub v: f64,
    pub t: f64,
}

impl std::ops::Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            t: self.t + o.t,
        }
    }
}

impl std::ops::Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            t: self.t - o.t,
        }
    }
}

impl std::ops::Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            t: self.v * o.t + self.t * o.v,
        }
    }
}

impl std::ops::Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            t: -self.t,
        }
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual { v, t: 0.0 }
    }
    fn primal(self) -> f64 {
        self.v
    }
    fn zero() -> Self {
        Dual { v: 0.0, t: 0.0 }
    }
    fn one() -> Self {
        Dual { v: 1.0, t: 0.0 }
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual {
            v: e,
            t: self.t * e,
        }
    }
    fn ln(self) -> Self {
        Dual {
            v: self.v.ln(),
            t: self.t / self.v,
        }
    }
    fn tanh(self) -> Self {
        let y = self.v.tanh();
        Dual {
            v: y,
            t: self.t * (1.0 - y * y),
        }
    }
    fn mul_f64(self, c: f64) -> Self {
        Dual {
            v: self.v * c,
            t: self.t * c,
        }
    }
}

/// One dense layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerDesc {
    pub w_off: usize,
    pub b_off: Option<usize>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub tanh: bool,
}

/// Reusable per-call buffers so the per-sample loops stay allocation-free.
struct Workspace<S> {
    acts: Vec<Vec<S>>,
    dz: Vec<S>,
    da: Vec<S>,
}

impl<S: Scalar> Workspace<S> {
    fn new(layers: &[LayerDesc]) -> Self {
        let max_w = layers.iter().map(|l| l.out_dim.max(l.in_dim)).max().unwrap_or(1);
        Workspace {
            acts: layers.iter().map(|l| vec![S::zero(); l.out_dim]).collect(),
            dz: vec![S::zero(); max_w],
            da: vec![S::zero(); max_w],
        }
    }
}

fn forward<S: Scalar>(params: &[S], layers: &[LayerDesc], x: &[f64], ws: &mut Workspace<S>) {
    for li in 0..layers.len() {
        let l = layers[li];
        let (head, tail) = ws.acts.split_at_mut(li);
        let out = &mut tail[0];
        for k in 0..l.out_dim {
            let mut acc = match l.b_off {
                Some(b) => params[b + k],
                None => S::zero(),
            };
            let row = &params[l.w_off + k * l.in_dim..l.w_off + (k + 1) * l.in_dim];
            if li == 0 {
                for (w, xv) in row.iter().zip(x) {
                    acc = acc + w.mul_f64(*xv);
                }
            } else {
                let prev = &head[li - 1];
                for (w, a) in row.iter().zip(prev.iter()) {
                    acc = acc + *w * *a;
                }
            }
            out[k] = if l.tanh { acc.tanh() } else { acc };
        }
    }
}

/// Loss of one sample given the output-layer values; optionally fills
/// `dz` with the loss gradient with respect to those values.
fn sample_loss<S: Scalar>(
    loss: Loss,
    logits: &[S],
    y: &Target,
    dz: Option<&mut [S]>,
) -> Result<S> {
    match loss {
        Loss::SquaredError => {
            let mut total = S::zero();
            for (k, z) in logits.iter().enumerate() {
                let tgt = match y {
                    Target::Value(v) => *v,
                    Target::Class(c) => {
                        if logits.len() == 1 {
                            *c as f64
                        } else if *c == k {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                let r = *z - S::from_f64(tgt);
                total = total + r * r;
            }
            let value = total.mul_f64(0.5);
            if let Some(dz) = dz {
                for (k, z) in logits.iter().enumerate() {
                    let tgt = match y {
                        Target::Value(v) => *v,
                        Target::Class(c) => {
                            if logits.len() == 1 {
                                *c as f64
                            } else if *c == k {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    dz[k] = *z - S::from_f64(tgt);
                }
            }
            Ok(value)
        }
        Loss::CrossEntropy => {
            let class = match y {
                Target::Class(c) => *c,
                Target::Value(_) => {
                    return Err(CoreError::Contract(
                        "cross-entropy loss needs class targets".into(),
                    ))
                }
            };
            // The shift `m` only stabilizes the exponentials; log-sum-exp is
            // independent of it, so treating it as a constant keeps the
            // derivatives exact.
            let m = logits
                .iter()
                .map(|z| z.primal())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = S::zero();
            for z in logits {
                sum = sum + (*z - S::from_f64(m)).exp();
            }
            let lse = S::from_f64(m) + sum.ln();
            let value = lse - logits[class];
            if let Some(dz) = dz {
                for (k, z) in logits.iter().enumerate() {
                    let p = (*z - lse).exp();
                    dz[k] = if k == class { p - S::one() } else { p };
                }
            }
            Ok(value)
        }
    }
}

fn backward<S: Scalar>(
    params: &[S],
    layers: &[LayerDesc],
    x: &[f64],
    ws: &mut Workspace<S>,
    grad: &mut [S],
) {
    for li in (0..layers.len()).rev() {
        let l = layers[li];
        for k in 0..l.out_dim {
            let d = ws.dz[k];
            if let Some(b) = l.b_off {
                grad[b + k] = grad[b + k] + d;
            }
            let row = l.w_off + k * l.in_dim;
            if li == 0 {
                for (g, xv) in grad[row..row + l.in_dim].iter_mut().zip(x) {
                    *g = *g + d.mul_f64(*xv);
                }
            } else {
                let prev = &ws.acts[li - 1];
                for (g, a) in grad[row..row + l.in_dim].iter_mut().zip(prev.iter()) {
                    *g = *g + d * *a;
                }
            }
        }
        if li == 0 {
            break;
        }
        for v in ws.da[..l.in_dim].iter_mut() {
            *v = S::zero();
        }
        for k in 0..l.out_dim {
            let d = ws.dz[k];
            let row = &params[l.w_off + k * l.in_dim..l.w_off + (k + 1) * l.in_dim];
            for (acc, w) in ws.da[..l.in_dim].iter_mut().zip(row) {
                *acc = *acc + *w * d;
            }
        }
        if layers[li - 1].tanh {
            let prev = &ws.acts[li - 1];
            for j in 0..l.in_dim {
                let a = prev[j];
                ws.dz[j] = ws.da[j] * (S::one() - a * a);
            }
        } else {
            ws.dz[..l.in_dim].copy_from_slice(&ws.da[..l.in_dim]);
        }
    }
}

/// Mean loss over `data`; when `grad` is given, also accumulates the mean
/// loss gradient into it (the buffer is zeroed first).
pub(crate) fn accumulate<S: Scalar>(
    spec: &ModelSpec,
    params: &[S],
    data: &[Sample],
    grad: Option<&mut [S]>,
) -> Result<S> {
    let layers = spec.arch.layers();
    let mut ws = Workspace::new(&layers);
    let n_out = layers.last().expect("at least one layer").out_dim;
    let want_grad = grad.is_some();
    let mut grad = grad;
    if let Some(g) = grad.as_deref_mut() {
        for v in g.iter_mut() {
            *v = S::zero();
        }
    }
    let mut total = S::zero();
    for sample in data {
        forward(params, &layers, &sample.x, &mut ws);
        let logits = ws.acts.last().expect("at least one layer");
        let loss = if want_grad {
            sample_loss(spec.loss, logits, &sample.y, Some(&mut ws.dz[..n_out]))?
        } else {
            sample_loss(spec.loss, logits, &sample.y, None)?
        };
        total = total + loss;
        if let Some(g) = grad.as_deref_mut() {
            backward(params, &layers, &sample.x, &mut ws, g);
        }
    }
    let inv_n = 1.0 / data.len() as f64;
    if let Some(g) = grad.as_deref_mut() {
        for v in g.iter_mut() {
            *v = v.mul_f64(inv_n);
        }
    }
    Ok(total.mul_f64(inv_n))
}

/// Output-layer values for one input.
pub(crate) fn forward_logits(spec: &ModelSpec, params: &[f64], x: &[f64]) -> Vec<f64> {
    let layers = spec.arch.layers();
    let mut ws = Workspace::<f64>::new(&layers);
    forward(params, &layers, x, &mut ws);
    ws.acts.last().expect("at least one layer").clone()
}
