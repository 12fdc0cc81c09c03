//! Focal, SoftIoU and FocalIoU losses with closed-form gradients.
//!
//! Every loss takes probabilities `p = sigmoid(x)` and binary labels and
//! returns the gradient with respect to the logits `x`, ready to seed the
//! network's reverse pass.
//!
//! FocalIoU is `2(1 − S)·FL^((1+S)/2)` where `FL` is the pixel-mean focal
//! loss and `S` the SoftIoU of the whole batch. By default `S` is held
//! constant when differentiating, giving
//!
//! ```text
//! dL/dx_j = (1 − S²)·FL^((S−1)/2) · dFL/dp_j · p_j(1 − p_j)
//! ```
//!
//! Setting [`LossConfig::differentiate_iou`] adds the `∂L/∂S · ∂S/∂p_j` term.
//!
//! The loss value uses probabilities clamped to `[ε, 1 − ε]`. The gradient
//! applies the clamp inside the logarithms only and is taken w.r.t. the
//! logit in multiplied-out form. That equals `dFL/dp · p(1 − p)` for
//! unsaturated pixels and keeps saturated ones trainable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focal exponent γ.
    pub gamma: f64,
    /// SoftIoU stabiliser.
    pub smooth: f64,
    /// Probabilities are clamped to `[epsilon, 1 − epsilon]` before logs.
    pub epsilon: f64,
    /// Differentiate through SoftIoU instead of treating it as a constant.
    pub differentiate_iou: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            smooth: 1.0,
            epsilon: 1e-7,
            differentiate_iou: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.smooth > 0.0) {
            return Err(Error::Config(format!("smooth must be > 0, got {}", self.smooth)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("epsilon must lie in (0, 0.5), got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Which training objective to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    FocalIou,
    Focal,
    SoftIou,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "focal-iou" => Ok(Self::FocalIou),
            "focal" => Ok(Self::Focal),
            "soft-iou" => Ok(Self::SoftIou),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    /// `dLoss/dx` per pixel, `x` the pre-sigmoid logit.
    pub grad: Vec<T>,
    /// SoftIoU of the prediction, for diagnostics.
    pub soft_iou: T,
}

fn check_shapes<T>(p: &[T], y: &[bool]) -> Result<()> {
    if p.len() != y.len() {
        return Err(Error::shape(
            "loss",
            format!("{} probabilities vs {} labels", p.len(), y.len()),
        ));
    }
    if p.is_empty() {
        return Err(Error::shape("loss", "empty prediction"));
    }
    Ok(())
}

/// Focal loss of one pixel at an already clamped probability.
pub fn focal_pixel<T: Scalar>(p: T, y: bool, gamma: T) -> T {
    if y {
        -(T::one() - p).powf(gamma) * p.ln()
    } else {
        -p.powf(gamma) * (T::one() - p).ln()
    }
}

/// `dFL/dp` of one pixel at a clamped probability.
pub fn focal_pixel_derivative<T: Scalar>(p: T, y: bool, gamma: T) -> T {
    let one = T::one();
    if y {
        let q = one - p;
        let focus = if gamma == T::zero() {
            T::zero()
        } else {
            gamma * q.powf(gamma - one) * p.ln()
        };
        focus - q.powf(gamma) / p
    } else {
        let focus = if gamma == T::zero() {
            T::zero()
        } else {
            -gamma * p.powf(gamma - one) * (one - p).ln()
        };
        focus + p.powf(gamma) / (one - p)
    }
}

/// `dFL/dx = dFL/dp · p(1 − p)` of one pixel, multiplied out so that it
/// stays informative as the sigmoid saturates. `p` is the raw probability and
/// `pc` its clamped value, used only inside the logarithms.
pub fn focal_pixel_logit_derivative<T: Scalar>(p: T, pc: T, y: bool, gamma: T) -> T {
    let one = T::one();
    let q = one - p;
    if y {
        gamma * p * q.powf(gamma) * pc.ln() - q.powf(gamma + one)
    } else {
        -gamma * p.powf(gamma) * q * (one - pc).ln() + p.powf(gamma + one)
    }
}

/// Pixel-mean focal loss and its per-pixel derivative w.r.t. the logits.
fn focal_parts<T: Scalar>(p: &[T], y: &[bool], cfg: &LossConfig) -> (T, Vec<T>) {
    let eps = T::of(cfg.epsilon);
    let hi = T::one() - eps;
    let gamma = T::of(cfg.gamma);
    let n = T::of(p.len() as f64);
    let mut total = T::zero();
    let mut dx = Vec::with_capacity(p.len());
    for (&pv, &yv) in p.iter().zip(y) {
        let clamped = pv.max(eps).min(hi);
        total += focal_pixel(clamped, yv, gamma);
        dx.push(focal_pixel_logit_derivative(pv, clamped, yv, gamma) / n);
    }
    (total / n, dx)
}

fn sigmoid_slope<T: Scalar>(p: T) -> T {
    p * (T::one() - p)
}

/// Pixel-mean focal loss; gradient w.r.t. logits.
pub fn focal_loss<T: Scalar>(p: &[T], y: &[bool], cfg: &LossConfig) -> Result<LossOutput<T>> {
    check_shapes(p, y)?;
    cfg.validate()?;
    let (value, grad) = focal_parts(p, y, cfg);
    Ok(LossOutput {
        value,
        grad,
        soft_iou: soft_iou_unchecked(p, y, cfg),
    })
}

struct IouTerms<T> {
    inter: T,
    union: T,
    smooth: T,
}

fn iou_terms<T: Scalar>(p: &[T], y: &[bool], cfg: &LossConfig) -> IouTerms<T> {
    // Σp + Σy − Σp·y is accumulated as Σy + Σ_{y=0} p so that an exact
    // binary match gives numerator == denominator bit for bit.
    let mut inter = T::zero();
    let mut outside = T::zero();
    let mut sum_y = T::zero();
    for (&pv, &yv) in p.iter().zip(y) {
        if yv {
            inter += pv;
            sum_y += T::one();
        } else {
            outside += pv;
        }
    }
    let smooth = T::of(cfg.smooth);
    IouTerms {
        inter,
        union: smooth + sum_y + outside,
        smooth,
    }
}

fn soft_iou_unchecked<T: Scalar>(p: &[T], y: &[bool], cfg: &LossConfig) -> T {
    let t = iou_terms(p, y, cfg);
    (t.smooth + t.inter) / t.union
}

/// `(smooth + Σp·y) / (smooth + Σp + Σy − Σp·y)` over unclamped probabilities.
pub fn soft_iou<T: Scalar>(p: &[T], y: &[bool], cfg: &LossConfig) -> Result<T> {
    check_shapes(p, y)?;
    cfg.validate()?;
    Ok(soft_iou_unchecked(p, y, cfg))
}

/// `∂S/∂p_j`.
fn soft_iou_gradient<T: Scalar>(p: &[T], y: &[bool], cfg: &LossConfig) -> Vec<T> {
    let t = iou_terms(p, y, cfg);
    let numer = t.smooth + t.inter;
    let u2 = t.union * t.union;
    y.iter()
        .map(|&yv| {
            if yv {
                // d(inter)=1, d(union)=0
                t.union / u2
            } else {
                -numer / u2
            }
        })
        .collect()
}

/// `1 − S`, differentiated fully.
pub fn soft_iou_loss<T: Scalar>(p: &[T], y: &[bool], cfg: &LossConfig) -> Result<LossOutput<T>> {
    let s = soft_iou(p, y, cfg)?;
    let grad = soft_iou_gradient(p, y, cfg)
        .into_iter()
        .zip(p)
        .map(|(d, &pv)| -d * sigmoid_slope(pv))
        .collect();
    Ok(LossOutput {
        value: T::one() - s,
        grad,
        soft_iou: s,
    })
}

/// `2(1 − S)·FL^((1+S)/2)`
pub fn focal_iou_value<T: Scalar>(focal: T, soft_iou: T) -> T {
    let two = T::of(2.0);
    two * (T::one() - soft_iou) * focal.powf((T::one() + soft_iou) / two)
}

/// `∂FIoUL/∂FL = (1 − S²)·FL^((S−1)/2)`
pub fn focal_iou_dfocal<T: Scalar>(focal: T, soft_iou: T) -> T {
    let two = T::of(2.0);
    (T::one() - soft_iou * soft_iou) * focal.powf((soft_iou - T::one()) / two)
}

/// `∂FIoUL/∂S = FL^((1+S)/2)·(−2 + (1 − S)·ln FL)`
pub fn focal_iou_dsoft_iou<T: Scalar>(focal: T, soft_iou: T) -> T {
    let two = T::of(2.0);
    focal.powf((T::one() + soft_iou) / two) * (-two + (T::one() - soft_iou) * focal.ln())
}

pub fn focal_iou_loss<T: Scalar>(p: &[T], y: &[bool], cfg: &LossConfig) -> Result<LossOutput<T>> {
    check_shapes(p, y)?;
    cfg.validate()?;
    let (focal, dfocal_dx) = focal_parts(p, y, cfg);
    let s = soft_iou_unchecked(p, y, cfg);
    let value = focal_iou_value(focal, s);
    let outer = focal_iou_dfocal(focal, s);
    let mut grad: Vec<T> = dfocal_dx.iter().map(|&d| outer * d).collect();
    if cfg.differentiate_iou {
        let ds = focal_iou_dsoft_iou(focal, s);
        let dsdp = soft_iou_gradient(p, y, cfg);
        for ((g, d), &pv) in grad.iter_mut().zip(dsdp).zip(p) {
            *g += ds * d * sigmoid_slope(pv);
        }
    }
    Ok(LossOutput {
        value,
        grad,
        soft_iou: s,
    })
}

/// Dispatches on `kind`.
pub fn compute_loss<T: Scalar>(
    kind: LossKind,
    p: &[T],
    y: &[bool],
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    match kind {
        LossKind::FocalIou => focal_iou_loss(p, y, cfg),
        LossKind::Focal => focal_loss(p, y, cfg),
        LossKind::SoftIou => soft_iou_loss(p, y, cfg),
    }
}
