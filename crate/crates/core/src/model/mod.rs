//! Model architectures, losses, and exact risk derivatives.
//!
//! All computation is full-batch `f64`. The empirical risk of a dataset is
//! the mean per-sample loss; gradients are analytic, and Hessian-vector
//! products are exact (forward-over-reverse) so the Hessian is never
//! materialized.

mod ad;

use crate::error::{CoreError, Result};
use crate::params::ParamVec;

pub(crate) use ad::Dual;

/// Network architecture. The flat parameter layout is layer-major: for each
/// layer in forward order, the weight matrix in row-major order followed by
/// the bias vector.
///
/// `Linear` is a single no-intercept output `w . x`; append a constant
/// feature to the inputs when an intercept is wanted. This keeps quadratic
/// objectives exactly representable as squared-error linear regression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Arch {
    Linear {
        input_dim: usize,
    },
    Logistic {
        input_dim: usize,
        num_classes: usize,
    },
    MlpTanh {
        input_dim: usize,
        hidden: Vec<usize>,
        num_classes: usize,
    },
}

impl Arch {
    pub fn input_dim(&self) -> usize {
        match self {
            Arch::Linear { input_dim }
            | Arch::Logistic { input_dim, .. }
            | Arch::MlpTanh { input_dim, .. } => *input_dim,
        }
    }

    /// Number of output-layer values (1 for `Linear`, class count otherwise).
    pub fn num_outputs(&self) -> usize {
        match self {
            Arch::Linear { .. } => 1,
            Arch::Logistic { num_classes, .. } | Arch::MlpTanh { num_classes, .. } => *num_classes,
        }
    }

    /// Total parameter count; a pure function of the architecture.
    pub fn d_model(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.in_dim * l.out_dim + if l.b_off.is_some() { l.out_dim } else { 0 })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Arch::Linear { input_dim } => *input_dim >= 1,
            Arch::Logistic {
                input_dim,
                num_classes,
            } => *input_dim >= 1 && *num_classes >= 2,
            Arch::MlpTanh {
                input_dim,
                hidden,
                num_classes,
            } => {
                *input_dim >= 1
                    && *num_classes >= 2
                    && !hidden.is_empty()
                    && hidden.iter().all(|h| *h >= 1)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::Contract(format!("invalid architecture {self:?}")))
        }
    }

    /// Compact one-token form used in checkpoint headers.
    pub fn tag(&self) -> String {
        match self {
            Arch::Linear { input_dim } => format!("linear-{input_dim}"),
            Arch::Logistic {
                input_dim,
                num_classes,
            } => format!("logistic-{input_dim}x{num_classes}"),
            Arch::MlpTanh {
                input_dim,
                hidden,
                num_classes,
            } => {
                let mid: Vec<String> = hidden.iter().map(|h| h.to_string()).collect();
                format!("mlp-{input_dim}x{}x{num_classes}", mid.join("x"))
            }
        }
    }

    /// Inverse of [`Arch::tag`]; returns `None` on anything malformed.
    pub fn from_tag(tag: &str) -> Option<Arch> {
        let (kind, dims) = tag.split_once('-')?;
        let parts: Vec<usize> = dims
            .split('x')
            .map(|p| p.parse::<usize>().ok())
            .collect::<Option<Vec<_>>>()?;
        let arch = match (kind, parts.len()) {
            ("linear", 1) => Arch::Linear {
                input_dim: parts[0],
            },
            ("logistic", 2) => Arch::Logistic {
                input_dim: parts[0],
                num_classes: parts[1],
            },
            ("mlp", n) if n >= 3 => Arch::MlpTanh {
                input_dim: parts[0],
                hidden: parts[1..n - 1].to_vec(),
                num_classes: parts[n - 1],
            },
            _ => return None,
        };
        arch.validate().ok()?;
        Some(arch)
    }

    pub(crate) fn layers(&self) -> Vec<ad::LayerDesc> {
        match self {
            Arch::Linear { input_dim } => vec![ad::LayerDesc {
                w_off: 0,
                b_off: None,
                in_dim: *input_dim,
                out_dim: 1,
                tanh: false,
            }],
            Arch::Logistic {
                input_dim,
                num_classes,
            } => vec![ad::LayerDesc {
                w_off: 0,
                b_off: Some(input_dim * num_classes),
                in_dim: *input_dim,
                out_dim: *num_classes,
                tanh: false,
            }],
            Arch::MlpTanh {
                input_dim,
                hidden,
                num_classes,
            } => {
                let mut dims = vec![*input_dim];
                dims.extend_from_slice(hidden);
                dims.push(*num_classes);
                let mut layers = Vec::with_capacity(dims.len() - 1);
                let mut off = 0;
                for w in dims.windows(2) {
                    let (i, o) = (w[0], w[1]);
                    layers.push(ad::LayerDesc {
                        w_off: off,
                        b_off: Some(off + i * o),
                        in_dim: i,
                        out_dim: o,
                        tanh: false,
                    });
                    off += i * o + o;
                }
                let n = layers.len();
                for l in &mut layers[..n - 1] {
                    l.tanh = true;
                }
                layers
            }
        }
    }
}

/// Per-sample loss applied to the output-layer values.
///
/// Squared error is `0.5 * |out - target|^2`, with class targets one-hot
/// encoded (or taken as a plain real for single-output models). Cross
/// entropy is softmax log loss, computed through a shifted log-sum-exp.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    SquaredError,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub loss: Loss,
}

impl ModelSpec {
    pub fn new(arch: Arch, loss: Loss) -> Result<Self> {
        arch.validate()?;
        if loss == Loss::CrossEntropy && arch.num_outputs() < 2 {
            return Err(CoreError::Contract(
                "cross-entropy loss needs at least two outputs".into(),
            ));
        }
        Ok(ModelSpec { arch, loss })
    }

    pub fn d_model(&self) -> usize {
        self.arch.d_model()
    }
}

/// Either a class index or a real regression target.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Target,
}

impl Sample {
    pub fn class(x: Vec<f64>, y: usize) -> Sample {
        Sample {
            x,
            y: Target::Class(y),
        }
    }

    pub fn value(x: Vec<f64>, y: f64) -> Sample {
        Sample {
            x,
            y: Target::Value(y),
        }
    }
}

fn check_inputs(params: &ParamVec, spec: &ModelSpec, data: &[Sample]) -> Result<()> {
    spec.arch.validate()?;
    if params.len() != spec.d_model() {
        return Err(CoreError::DimensionMismatch(format!(
            "model {} has {} parameters, got {}",
            spec.arch.tag(),
            spec.d_model(),
            params.len()
        )));
    }
    if data.is_empty() {
        return Err(CoreError::EmptyDataset(
            "risk is undefined on an empty dataset".into(),
        ));
    }
    let d_in = spec.arch.input_dim();
    let n_out = spec.arch.num_outputs();
    for (i, s) in data.iter().enumerate() {
        if s.x.len() != d_in {
            return Err(CoreError::DimensionMismatch(format!(
                "sample {i} has {} features, model expects {d_in}",
                s.x.len()
            )));
        }
        match (&s.y, spec.loss) {
            (Target::Class(c), _) if n_out > 1 && *c >= n_out => {
                return Err(CoreError::Contract(format!(
                    "sample {i} has class {c}, model has {n_out} outputs"
                )));
            }
            (Target::Class(c), Loss::SquaredError) if n_out == 1 && *c > 1 => {
                return Err(CoreError::Contract(format!(
                    "sample {i} has class {c}, single-output regression expects 0/1"
                )));
            }
            (Target::Value(_), Loss::CrossEntropy) => {
                return Err(CoreError::Contract(format!(
                    "sample {i} has a real target, cross-entropy needs classes"
                )));
            }
            (Target::Value(_), Loss::SquaredError) if n_out > 1 => {
                return Err(CoreError::Contract(format!(
                    "sample {i} has a scalar target, model has {n_out} outputs"
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Mean loss of `data` at `params`.
pub fn empirical_risk(params: &ParamVec, spec: &ModelSpec, data: &[Sample]) -> Result<f64> {
    check_inputs(params, spec, data)?;
    ad::accumulate::<f64>(spec, params.as_slice(), data, None)
}

/// Exact gradient of [`empirical_risk`] with respect to the parameters.
pub fn risk_grad(params: &ParamVec, spec: &ModelSpec, data: &[Sample]) -> Result<ParamVec> {
    Ok(risk_and_grad(params, spec, data)?.1)
}

/// Risk and gradient in one pass.
pub fn risk_and_grad(
    params: &ParamVec,
    spec: &ModelSpec,
    data: &[Sample],
) -> Result<(f64, ParamVec)> {
    check_inputs(params, spec, data)?;
    let mut grad = vec![0.0; params.len()];
    let risk = ad::accumulate::<f64>(spec, params.as_slice(), data, Some(&mut grad))?;
    Ok((risk, ParamVec::from_raw(grad)))
}

/// Exact Hessian-vector product `H(params) v` of the empirical risk.
///
/// Linear in `v` and symmetric up to roundoff; cost is a small constant
/// multiple of one gradient.
pub fn risk_hvp(
    params: &ParamVec,
    spec: &ModelSpec,
    data: &[Sample],
    v: &ParamVec,
) -> Result<ParamVec> {
    check_inputs(params, spec, data)?;
    if v.len() != params.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "direction has {} entries, parameters have {}",
            v.len(),
            params.len()
        )));
    }
    let lifted: Vec<Dual> = params
        .iter()
        .zip(v.iter())
        .map(|(w, t)| Dual { v: *w, t: *t })
        .collect();
    let mut grad = vec![Dual { v: 0.0, t: 0.0 }; params.len()];
    ad::accumulate::<Dual>(spec, &lifted, data, Some(&mut grad))?;
    Ok(ParamVec::from_raw(grad.iter().map(|d| d.t).collect()))
}

/// Output-layer values for a single input.
pub fn logits(params: &ParamVec, spec: &ModelSpec, x: &[f64]) -> Result<Vec<f64>> {
    spec.arch.validate()?;
    if params.len() != spec.d_model() {
        return Err(CoreError::DimensionMismatch(format!(
            "model {} has {} parameters, got {}",
            spec.arch.tag(),
            spec.d_model(),
            params.len()
        )));
    }
    if x.len() != spec.arch.input_dim() {
        return Err(CoreError::DimensionMismatch(format!(
            "input has {} features, model expects {}",
            x.len(),
            spec.arch.input_dim()
        )));
    }
    Ok(ad::forward_logits(spec, params.as_slice(), x))
}
