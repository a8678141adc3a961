//! Differentiable forward warping of an RGB-D view into a second camera.
//!
//! Every valid source pixel is lifted to 3-D, moved into the target camera
//! and projected. Its color is splatted onto the four surrounding target
//! pixels with bilinear weights. Per target pixel a z-buffer keeps every
//! splat within [`Z_TOLERANCE`] of the nearest one and blends those by
//! normalized weight; target pixels that receive nothing stay zero.
//!
//! The forward pass records, per surviving splat, its weight, the weight's
//! derivative w.r.t. the projected coordinates and the source's
//! `∂(u, v, z_target)/∂z_source`, which is all [`warp_backward`] needs. The
//! z-test itself is treated as constant during the backward pass.

mod op;

pub use op::{warp_on_tape, WarpOutputs, WarpSample};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{project, CameraIntrinsics, DepthMap, ImageBuffer, RigidPose};

/// Splats farther than this (meters) behind the nearest splat on a target
/// pixel are occluded.
pub const Z_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SplatMode {
    /// Four-neighbor bilinear footprint; differentiable in `(u, v)`.
    #[default]
    Bilinear,
    /// Single nearest pixel with unit weight. Forward-only parity mode: its
    /// geometric gradient is identically zero.
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpOptions {
    pub mode: SplatMode,
    pub z_tolerance: f64,
    /// Keep splat records for [`warp_backward`].
    pub record: bool,
}

impl Default for WarpOptions {
    fn default() -> Self {
        Self {
            mode: SplatMode::Bilinear,
            z_tolerance: Z_TOLERANCE,
            record: true,
        }
    }
}

/// Source image as plain `f64` slices, channel-planar.
#[derive(Clone, Copy, Debug)]
pub struct WarpSource<'a> {
    pub rgb: &'a [f64],
    pub depth: &'a [f64],
    /// `None` means every pixel is valid.
    pub valid: Option<&'a [bool]>,
}

/// Projection of one source pixel into the target camera together with its
/// sensitivity to the source depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceProjection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
    pub du_dz: f64,
    pub dv_dz: f64,
    pub dzt_dz: f64,
}

/// One surviving contribution to a target pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat {
    pub source: usize,
    /// Unnormalized bilinear weight, in `(0, 1]`.
    pub weight: f64,
    pub dw_du: f64,
    pub dw_dv: f64,
    /// Target-view depth of the splat.
    pub z: f64,
}

/// Splat bookkeeping for the backward pass, in CSR layout over target
/// pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatRecords {
    offsets: Vec<usize>,
    splats: Vec<Splat>,
    sources: Vec<Option<SourceProjection>>,
    source_rgb: Vec<f64>,
    weight_sum: Vec<f64>,
}

impl SplatRecords {
    /// Surviving splats for a target pixel, ordered by source index.
    pub fn winners(&self, target: usize) -> &[Splat] {
        &self.splats[self.offsets[target]..self.offsets[target + 1]]
    }

    pub fn source(&self, source: usize) -> Option<&SourceProjection> {
        self.sources[source].as_ref()
    }

    /// Sum of surviving weights at a target pixel (0 when unhit).
    pub fn weight_sum(&self, target: usize) -> f64 {
        self.weight_sum[target]
    }

    /// Every `(target, source)` pair that survived the z-test. Two warps
    /// with equal assignments are on the same smooth branch.
    pub fn assignment(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.splats.len());
        for t in 0..self.offsets.len() - 1 {
            out.extend(self.winners(t).iter().map(|s| (t, s.source)));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub width: usize,
    pub height: usize,
    /// Warped color, channel-planar; unhit pixels are exactly zero.
    pub image: Vec<f64>,
    /// Blended target-view depth; zero where unhit.
    pub depth: Vec<f64>,
    pub hit_mask: Vec<bool>,
    pub records: Option<SplatRecords>,
}

impl WarpResult {
    pub fn image_buffer(&self) -> ImageBuffer {
        let values = self.image.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
        ImageBuffer::new(self.width, self.height, values).expect("warped colors are bounded")
    }

    pub fn depth_map(&self) -> DepthMap {
        let values = self.depth.iter().map(|&v| v as f32).collect();
        DepthMap::new(self.width, self.height, values, self.hit_mask.clone())
            .expect("warped depth is positive on hit pixels")
    }

    pub fn hit_count(&self) -> usize {
        self.hit_mask.iter().filter(|&&h| h).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpGradients {
    /// Gradient w.r.t. each source depth value.
    pub d_depth: Vec<f64>,
    /// Gradient w.r.t. each source color value, channel-planar.
    pub d_rgb: Vec<f64>,
}

/// Warps `rgb1`/`depth1` into the camera related by `rel` (source camera
/// coordinates to target camera coordinates) with default options.
pub fn forward_warp(
    rgb1: &ImageBuffer,
    depth1: &DepthMap,
    k: &CameraIntrinsics,
    rel: &RigidPose,
) -> Result<WarpResult> {
    forward_warp_with(rgb1, depth1, k, rel, &WarpOptions::default())
}

pub fn forward_warp_with(
    rgb1: &ImageBuffer,
    depth1: &DepthMap,
    k: &CameraIntrinsics,
    rel: &RigidPose,
    opts: &WarpOptions,
) -> Result<WarpResult> {
    if rgb1.width() != depth1.width() || rgb1.height() != depth1.height() {
        return Err(Error::config(format!(
            "image is {}x{} but depth is {}x{}",
            rgb1.width(),
            rgb1.height(),
            depth1.width(),
            depth1.height()
        )));
    }
    let rgb: Vec<f64> = rgb1.values().iter().map(|&v| v as f64).collect();
    let depth: Vec<f64> = depth1.values().iter().map(|&v| v as f64).collect();
    forward_warp_raw(
        WarpSource {
            rgb: &rgb,
            depth: &depth,
            valid: Some(depth1.valid()),
        },
        k,
        rel,
        opts,
    )
}

/// Projects one source pixel at depth `z` and differentiates the projection
/// w.r.t. `z`.
pub fn project_source(x: usize, y: usize, z: f64, k: &CameraIntrinsics, rel: &RigidPose) -> Option<SourceProjection> {
    // q(z) = z·a + t with a = R·ray, so dq/dz = a.
    let a: Vector3<f64> = rel.rotation * k.ray(x as f64, y as f64);
    let q = a * z + rel.translation;
    let p = project(&q, k)?;
    let inv_z2 = 1.0 / (q.z * q.z);
    Some(SourceProjection {
        u: snap_to_grid(p.u),
        v: snap_to_grid(p.v),
        z: p.z,
        du_dz: k.fx * (a.x * q.z - q.x * a.z) * inv_z2,
        dv_dz: k.fy * (a.y * q.z - q.y * a.z) * inv_z2,
        dzt_dz: a.z,
    })
}

/// Coordinates within this many pixels of an integer are treated as lying
/// on the pixel, so rounding noise cannot leak weight into a neighbor.
const GRID_SNAP: f64 = 1e-9;

#[inline]
fn snap_to_grid(c: f64) -> f64 {
    let r = c.round();
    if (c - r).abs() < GRID_SNAP {
        r
    } else {
        c
    }
}

/// Bilinear (or nearest) footprint of a projected point: target pixel,
/// weight, `∂w/∂u`, `∂w/∂v`. Zero-weight and out-of-bounds neighbors are
/// dropped.
fn footprint(p: &SourceProjection, mode: SplatMode, w: usize, h: usize) -> Footprint {
    let mut out = Footprint::default();
    match mode {
        SplatMode::Nearest => {
            let x = p.u.round();
            let y = p.v.round();
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                out.push((y as usize * w + x as usize, 1.0, 0.0, 0.0));
            }
        }
        SplatMode::Bilinear => {
            let x0 = p.u.floor();
            let y0 = p.v.floor();
            let fx = p.u - x0;
            let fy = p.v - y0;
            for (dy, wy, dwy) in [(0.0, 1.0 - fy, -1.0), (1.0, fy, 1.0)] {
                for (dx, wx, dwx) in [(0.0, 1.0 - fx, -1.0), (1.0, fx, 1.0)] {
                    let weight = wx * wy;
                    if weight <= 0.0 {
                        continue;
                    }
                    let tx = x0 + dx;
                    let ty = y0 + dy;
                    if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                        continue;
                    }
                    out.push((ty as usize * w + tx as usize, weight, dwx * wy, wx * dwy));
                }
            }
        }
    }
    out
}

/// Up to four `(target, weight, dw_du, dw_dv)` entries.
#[derive(Default)]
struct Footprint {
    items: [(usize, f64, f64, f64); 4],
    len: usize,
}

impl Footprint {
    fn push(&mut self, item: (usize, f64, f64, f64)) {
        self.items[self.len] = item;
        self.len += 1;
    }

    fn as_slice(&self) -> &[(usize, f64, f64, f64)] {
        &self.items[..self.len]
    }
}

/// Core warp over raw `f64` buffers.
pub fn forward_warp_raw(
    src: WarpSource<'_>,
    k: &CameraIntrinsics,
    rel: &RigidPose,
    opts: &WarpOptions,
) -> Result<WarpResult> {
    let (w, h) = (k.width, k.height);
    let n = w * h;
    if src.depth.len() != n || src.rgb.len() != 3 * n || src.valid.is_some_and(|v| v.len() != n) {
        return Err(Error::config(format!(
            "warp source buffers do not match {w}x{h} intrinsics (depth {}, rgb {})",
            src.depth.len(),
            src.rgb.len()
        )));
    }

    let sources: Vec<Option<SourceProjection>> = (0..n)
        .map(|i| {
            let valid = src.valid.is_none_or(|v| v[i]);
            let z = src.depth[i];
            if !valid || !(z.is_finite() && z > 0.0) {
                return None;
            }
            project_source(i % w, i / w, z, k, rel)
        })
        .collect();

    // Gather contributions per target pixel in source order (CSR).
    let footprints: Vec<_> = sources
        .iter()
        .map(|s| s.as_ref().map(|p| footprint(p, opts.mode, w, h)))
        .collect();
    let mut counts = vec![0usize; n + 1];
    for fp in footprints.iter().flatten() {
        for &(t, ..) in fp.as_slice() {
            counts[t + 1] += 1;
        }
    }
    for t in 0..n {
        counts[t + 1] += counts[t];
    }
    let mut fill = counts.clone();
    let mut candidates = vec![
        Splat {
            source: 0,
            weight: 0.0,
            dw_du: 0.0,
            dw_dv: 0.0,
            z: 0.0
        };
        counts[n]
    ];
    for (s, fp) in footprints.iter().enumerate() {
        let (Some(fp), Some(p)) = (fp, &sources[s]) else {
            continue;
        };
        for &(t, weight, dw_du, dw_dv) in fp.as_slice() {
            candidates[fill[t]] = Splat {
                source: s,
                weight,
                dw_du,
                dw_dv,
                z: p.z,
            };
            fill[t] += 1;
        }
    }

    let mut image = vec![0.0; 3 * n];
    let mut depth = vec![0.0; n];
    let mut hit_mask = vec![false; n];
    let mut weight_sum = vec![0.0; n];
    let mut offsets = Vec::with_capacity(n + 1);
    let mut winners = Vec::new();
    offsets.push(0);
    for t in 0..n {
        let cand = &candidates[counts[t]..counts[t + 1]];
        if !cand.is_empty() {
            let z_near = cand.iter().map(|s| s.z).fold(f64::INFINITY, f64::min);
            let cutoff = z_near + opts.z_tolerance;
            let start = winners.len();
            winners.extend(cand.iter().filter(|s| s.z <= cutoff).copied());
            let kept = &winners[start..];
            let total: f64 = kept.iter().map(|s| s.weight).sum();
            let mut rgb = [0.0; 3];
            let mut z = 0.0;
            for s in kept {
                for (c, acc) in rgb.iter_mut().enumerate() {
                    *acc += s.weight * src.rgb[c * n + s.source];
                }
                z += s.weight * s.z;
            }
            for (c, acc) in rgb.iter().enumerate() {
                image[c * n + t] = acc / total;
            }
            depth[t] = z / total;
            hit_mask[t] = true;
            weight_sum[t] = total;
        }
        offsets.push(winners.len());
    }

    let records = opts.record.then(|| SplatRecords {
        offsets,
        splats: winners,
        sources,
        source_rgb: src.rgb.to_vec(),
        weight_sum,
    });
    Ok(WarpResult {
        width: w,
        height: h,
        image,
        depth,
        hit_mask,
        records,
    })
}

/// Propagates gradients of a downstream scalar from the warped image and
/// warped depth back to source depth and source color.
pub fn warp_backward(result: &WarpResult, grad_image: &[f64], grad_depth: &[f64]) -> Result<WarpGradients> {
    let rec = result
        .records
        .as_ref()
        .ok_or_else(|| Error::contract("warp_backward needs a warp run with splat recording"))?;
    let n = result.width * result.height;
    if grad_image.len() != 3 * n || grad_depth.len() != n {
        return Err(Error::config(format!(
            "warp gradients must have {} image and {n} depth entries, got {} and {}",
            3 * n,
            grad_image.len(),
            grad_depth.len()
        )));
    }
    let mut d_depth = vec![0.0; n];
    let mut d_rgb = vec![0.0; 3 * n];
    for t in 0..n {
        let kept = rec.winners(t);
        if kept.is_empty() {
            continue;
        }
        let inv_w = 1.0 / rec.weight_sum[t];
        let g_img = [grad_image[t], grad_image[n + t], grad_image[2 * n + t]];
        let g_d = grad_depth[t];
        let blended = [result.image[t], result.image[n + t], result.image[2 * n + t]];
        for s in kept {
            let share = s.weight * inv_w;
            let mut g_weight = g_d * (s.z - result.depth[t]) * inv_w;
            for c in 0..3 {
                d_rgb[c * n + s.source] += g_img[c] * share;
                g_weight += g_img[c] * (rec.source_rgb[c * n + s.source] - blended[c]) * inv_w;
            }
            let p = rec.sources[s.source].as_ref().expect("winner has a projection");
            d_depth[s.source] += g_weight * (s.dw_du * p.du_dz + s.dw_dv * p.dv_dz) + g_d * share * p.dzt_dz;
        }
    }
    Ok(WarpGradients { d_depth, d_rgb })
}
