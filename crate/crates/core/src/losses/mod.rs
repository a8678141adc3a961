//! Supervision terms: masked depth L1 at both views, unmasked image L1, and
//! their weighted sum.
//!
//! With a batch, every term pools its valid pixels across all batch items
//! before averaging.

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, ImageBuffer};
use crate::real::Real;
use crate::tensor::{Shape, Tape, Tensor, Var};

pub const LOSS_CSV_HEADER: &str = "step,l1,l2,l3,total";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of both depth terms.
    pub alpha: f64,
    /// Weight of the image term.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.5 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.alpha) || !ok(self.beta) || self.alpha + self.beta <= 0.0 {
            return Err(Error::config(format!(
                "loss weights need alpha, beta >= 0 with a positive sum, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// A scalar loss on the tape and the number of entries it averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerm {
    pub value: Var,
    pub count: usize,
}

/// Batched depth maps as an `N×1×H×W` value tensor plus a binary validity
/// mask of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthTarget<T> {
    pub values: Tensor<T>,
    pub mask: Tensor<T>,
    pub valid: usize,
}

impl<T: Real> DepthTarget<T> {
    pub fn from_maps(maps: &[&DepthMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::config("empty depth batch"))?;
        let (w, h) = (first.width(), first.height());
        let shape = Shape::new(maps.len(), 1, h, w);
        let mut values = Vec::with_capacity(shape.numel());
        let mut mask = Vec::with_capacity(shape.numel());
        let mut valid = 0;
        for m in maps {
            if (m.width(), m.height()) != (w, h) {
                return Err(Error::config(format!(
                    "depth batch mixes {}x{} and {w}x{h}",
                    m.width(),
                    m.height()
                )));
            }
            for (&v, &ok) in m.values().iter().zip(m.valid()) {
                values.push(T::from_f64(if ok { v as f64 } else { 0.0 }));
                mask.push(if ok { T::ONE } else { T::ZERO });
                valid += ok as usize;
            }
        }
        Ok(Self {
            values: Tensor::new(shape, values)?,
            mask: Tensor::new(shape, mask)?,
            valid,
        })
    }
}

/// Batched images as an `N×3×H×W` tensor.
pub fn image_tensor<T: Real>(images: &[&ImageBuffer]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::config("empty image batch"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for im in images {
        if (im.width(), im.height()) != (w, h) {
            return Err(Error::config(format!(
                "image batch mixes {}x{} and {w}x{h}",
                im.width(),
                im.height()
            )));
        }
        data.extend(im.values().iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new(Shape::new(images.len(), 3, h, w), data)
}

/// Mean absolute depth error over valid ground-truth pixels.
pub fn depth_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &DepthTarget<T>) -> Result<LossTerm> {
    if tape.shape(pred) != gt.values.shape() {
        return Err(Error::config(format!(
            "depth prediction {} does not match ground truth {}",
            tape.shape(pred),
            gt.values.shape()
        )));
    }
    if gt.valid == 0 {
        return Err(Error::degenerate("ground-truth depth has no valid pixels"));
    }
    let target = tape.constant(gt.values.clone());
    let value = tape.l1_mean(pred, target, Some(&gt.mask))?;
    Ok(LossTerm { value, count: gt.valid })
}

/// Same contract as [`depth_loss`], supervised by the second view's ground
/// truth.
pub fn second_view_depth_loss<T: Real>(tape: &mut Tape<T>, pred2: Var, gt2: &DepthTarget<T>) -> Result<LossTerm> {
    depth_loss(tape, pred2, gt2)
}

/// Mean absolute color error over every pixel and channel.
pub fn image_loss<T: Real>(tape: &mut Tape<T>, pred_rgb: Var, gt_rgb: &Tensor<T>) -> Result<LossTerm> {
    if tape.shape(pred_rgb) != gt_rgb.shape() {
        return Err(Error::config(format!(
            "synthesized image {} does not match ground truth {}",
            tape.shape(pred_rgb),
            gt_rgb.shape()
        )));
    }
    let target = tape.constant(gt_rgb.clone());
    let value = tape.l1_mean(pred_rgb, target, None)?;
    Ok(LossTerm {
        value,
        count: gt_rgb.shape().numel(),
    })
}

/// The three terms of one step. `l2` and `l3` are absent in modes that
/// skip the synthesis branch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l1: LossTerm,
    pub l2: Option<LossTerm>,
    pub l3: Option<LossTerm>,
}

/// `α·L1 + β·L2 + α·L3`, skipping absent terms.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let alpha = T::from_f64(w.alpha);
    let mut parts = vec![(terms.l1.value, alpha)];
    if let Some(l2) = terms.l2 {
        parts.push((l2.value, T::from_f64(w.beta)));
    }
    if let Some(l3) = terms.l3 {
        parts.push((l3.value, alpha));
    }
    tape.weighted_sum(&parts)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
}

impl LossReport {
    pub fn from_tape<T: Real>(tape: &Tape<T>, terms: &LossTerms, total: Var) -> Self {
        let read = |v: Var| tape.value(v).data()[0].to_f64();
        let opt = |t: Option<LossTerm>| t.map_or((0.0, 0), |t| (read(t.value), t.count));
        let (l2, n2) = opt(terms.l2);
        let (l3, n3) = opt(terms.l3);
        Self {
            l1: read(terms.l1.value),
            l2,
            l3,
            total: read(total),
            n1: terms.l1.count,
            n2,
            n3,
        }
    }

    /// Recomputes the weighted total from the components.
    pub fn recomputed_total(&self, w: &LossWeights) -> f64 {
        w.alpha * self.l1 + w.beta * self.l2 + w.alpha * self.l3
    }

    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{},{},{},{}", self.l1, self.l2, self.l3, self.total)
    }
}
