use std::hash::{Hash, Hasher};
use std::sync::Arc;

use super::{forward_warp_raw, warp_backward, WarpOptions, WarpResult, WarpSource};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::real::Real;
use crate::tensor::{CustomOp, Shape, Tape, Tensor, Var};

/// Camera relation for one batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpSample {
    pub intrinsics: CameraIntrinsics,
    /// Source camera coordinates to target camera coordinates.
    pub relative: RigidPose,
}

#[derive(Clone, Debug)]
pub struct WarpOutputs {
    /// Warped color, `N×3×H×W`.
    pub image: Var,
    /// Warped depth, `N×1×H×W`, zero on unhit pixels.
    pub depth: Var,
    pub results: Arc<Vec<WarpResult>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Channel {
    Image,
    Depth,
}

struct WarpNode {
    rgb: Var,
    depth: Var,
    channel: Channel,
    results: Arc<Vec<WarpResult>>,
}

impl<T: Real> CustomOp<T> for WarpNode {
    fn name(&self) -> &'static str {
        match self.channel {
            Channel::Image => "forward_warp.image",
            Channel::Depth => "forward_warp.depth",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.rgb, self.depth]
    }

    fn backward(&self, grad_output: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let mut d_rgb = Vec::new();
        let mut d_depth = Vec::new();
        let mut offset = 0;
        for r in self.results.iter() {
            let n = r.width * r.height;
            let (gi, gd) = match self.channel {
                Channel::Image => {
                    let g: Vec<f64> = grad_output[offset..offset + 3 * n].iter().map(|v| v.to_f64()).collect();
                    offset += 3 * n;
                    (g, vec![0.0; n])
                }
                Channel::Depth => {
                    let g: Vec<f64> = grad_output[offset..offset + n].iter().map(|v| v.to_f64()).collect();
                    offset += n;
                    (vec![0.0; 3 * n], g)
                }
            };
            let grads = warp_backward(r, &gi, &gd)?;
            d_rgb.extend(grads.d_rgb.into_iter().map(T::from_f64));
            d_depth.extend(grads.d_depth.into_iter().map(T::from_f64));
        }
        Ok(vec![Some(d_rgb), Some(d_depth)])
    }

    fn branch_signature(&self, state: &mut dyn Hasher) {
        let mut state = state;
        for r in self.results.iter() {
            if let Some(rec) = &r.records {
                rec.assignment().hash(&mut state);
            }
        }
    }
}

/// Forward-warps every batch item of `rgb` (`N×3×H×W`) and `depth`
/// (`N×1×H×W`) and records the warp on the tape, so gradients of anything
/// computed from the outputs reach both inputs.
pub fn warp_on_tape<T: Real>(
    tape: &mut Tape<T>,
    rgb: Var,
    depth: Var,
    samples: &[WarpSample],
    opts: &WarpOptions,
) -> Result<WarpOutputs> {
    let (sr, sd) = (tape.shape(rgb), tape.shape(depth));
    if sr.channels != 3 || sd.channels != 1 || (sr.batch, sr.height, sr.width) != (sd.batch, sd.height, sd.width) {
        return Err(Error::config(format!(
            "warp expects Nx3xHxW color and Nx1xHxW depth, got {sr} and {sd}"
        )));
    }
    if samples.len() != sr.batch {
        return Err(Error::config(format!(
            "warp got {} camera relations for a batch of {}",
            samples.len(),
            sr.batch
        )));
    }
    let opts = WarpOptions { record: true, ..*opts };
    let mut results = Vec::with_capacity(sr.batch);
    for (i, s) in samples.iter().enumerate() {
        let c: Vec<f64> = tape.value(rgb).batch_item(i).iter().map(|v| v.to_f64()).collect();
        let d: Vec<f64> = tape.value(depth).batch_item(i).iter().map(|v| v.to_f64()).collect();
        let src = WarpSource {
            rgb: &c,
            depth: &d,
            valid: None,
        };
        results.push(forward_warp_raw(src, &s.intrinsics, &s.relative, &opts)?);
    }
    let image = results.iter().flat_map(|r| r.image.iter().map(|&v| T::from_f64(v)));
    let image = Tensor::new(sr, image.collect())?;
    let warped_depth = results.iter().flat_map(|r| r.depth.iter().map(|&v| T::from_f64(v)));
    let warped_depth = Tensor::new(Shape::new(sd.batch, 1, sd.height, sd.width), warped_depth.collect())?;
    let results = Arc::new(results);
    let image = tape.custom(
        image,
        Box::new(WarpNode {
            rgb,
            depth,
            channel: Channel::Image,
            results: Arc::clone(&results),
        }),
    );
    let depth = tape.custom(
        warped_depth,
        Box::new(WarpNode {
            rgb,
            depth,
            channel: Channel::Depth,
            results: Arc::clone(&results),
        }),
    );
    Ok(WarpOutputs { image, depth, results })
}
