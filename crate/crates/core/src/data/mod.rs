//! Synthetic view pairs with exact ground truth, and on-disk sample I/O.
//!
//! Scenes are built in the first camera's frame and ray-cast from both
//! cameras. A camera ray `R·(x', y', 1)` reaches its hit at parameter λ,
//! which is also the camera-space depth, so depth maps are analytic.

mod io;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, ImageBuffer, RigidPose};

pub use io::{
    load_dataset, load_sample, read_depth_png, read_pfm, read_pfm_raw, read_pgm, read_ppm, save_dataset, save_sample,
    write_depth_png, write_pfm, write_pfm_raw, write_pgm, write_ppm, Split, MANIFEST_FILE, PNG_DEPTH_SCALE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    /// Tilted background wall plus boxes and bounded planes.
    Mixed,
    /// One infinite plane with a random tilt; free of occlusions.
    Plane,
    /// One infinite plane facing the first camera.
    FrontoPlane,
}

impl SceneKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(Self::Mixed),
            "plane" => Ok(Self::Plane),
            "fronto_plane" => Ok(Self::FrontoPlane),
            _ => Err(Error::config(format!("unknown scene kind {s}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mixed => "mixed",
            Self::Plane => "plane",
            Self::FrontoPlane => "fronto_plane",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels (both axes).
    pub focal: f64,
    /// Depths outside `[min_depth, max_depth]` are marked invalid.
    pub min_depth: f64,
    pub max_depth: f64,
    pub kind: SceneKind,
    /// Foreground objects in [`SceneKind::Mixed`] scenes.
    pub primitives: usize,
    /// Upper bound of the second camera's rotation.
    pub max_rotation_deg: f64,
    /// Upper bound of the second camera's translation norm in meters.
    pub max_translation: f64,
    /// Texture cycles per meter.
    pub texture_frequency: f64,
    /// Fixed depth for plane scenes; random within the range when unset.
    pub plane_depth: Option<f64>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            focal: 64.0,
            min_depth: 1.0,
            max_depth: 10.0,
            kind: SceneKind::Mixed,
            primitives: 4,
            max_rotation_deg: 5.0,
            max_translation: 0.3,
            texture_frequency: 0.6,
            plane_depth: None,
        }
    }
}

impl SceneConfig {
    /// Reads the `scene.*` keys of a key=value config; other keys are left
    /// to other readers.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in crate::kv::parse(text)? {
            let Some(key) = e.key.strip_prefix("scene.") else {
                continue;
            };
            match key {
                "width" => cfg.width = e.parse()?,
                "height" => cfg.height = e.parse()?,
                "focal" => cfg.focal = e.parse()?,
                "min_depth" => cfg.min_depth = e.parse()?,
                "max_depth" => cfg.max_depth = e.parse()?,
                "kind" => cfg.kind = SceneKind::parse(&e.value).map_err(|_| e.invalid())?,
                "primitives" => cfg.primitives = e.parse()?,
                "max_rotation_deg" => cfg.max_rotation_deg = e.parse()?,
                "max_translation" => cfg.max_translation = e.parse()?,
                "texture_frequency" => cfg.texture_frequency = e.parse()?,
                "plane_depth" => cfg.plane_depth = Some(e.parse()?),
                _ => return Err(e.unknown()),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics()?;
        if !(self.min_depth > 0.0 && self.min_depth + 2.0 <= self.max_depth && self.max_depth.is_finite()) {
            return Err(Error::config(format!(
                "scene depth range [{}, {}] must be positive and at least 2 m wide",
                self.min_depth, self.max_depth
            )));
        }
        if self.kind == SceneKind::Mixed && self.primitives == 0 {
            return Err(Error::config("a mixed scene needs at least one primitive"));
        }
        let bounded = |v: f64| v.is_finite() && v >= 0.0;
        if !bounded(self.max_rotation_deg) || self.max_rotation_deg >= 90.0 || !bounded(self.max_translation) {
            return Err(Error::config(
                "pose bounds must be finite, nonnegative, rotation below 90 degrees",
            ));
        }
        if !(self.texture_frequency.is_finite() && self.texture_frequency > 0.0) {
            return Err(Error::config("texture_frequency must be positive"));
        }
        if let Some(d) = self.plane_depth {
            if !(d >= self.min_depth && d <= self.max_depth) {
                return Err(Error::config(format!("plane_depth {d} outside the depth range")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub rgb1: ImageBuffer,
    pub rgb2: ImageBuffer,
    pub depth1: DepthMap,
    pub depth2: DepthMap,
    pub pose1: RigidPose,
    pub pose2: RigidPose,
    pub intrinsics: CameraIntrinsics,
}

impl SceneSample {
    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        k.validate()?;
        self.pose1.validate()?;
        self.pose2.validate()?;
        let dims = (k.width, k.height);
        let ok = [
            (self.rgb1.width(), self.rgb1.height()),
            (self.rgb2.width(), self.rgb2.height()),
            (self.depth1.width(), self.depth1.height()),
            (self.depth2.width(), self.depth2.height()),
        ]
        .iter()
        .all(|&d| d == dims);
        if !ok {
            return Err(Error::config(format!(
                "sample {} rasters disagree with the {}x{} intrinsics",
                self.id, k.width, k.height
            )));
        }
        Ok(())
    }

    /// The pair with views swapped.
    pub fn reversed(&self) -> Self {
        Self {
            id: format!("{}~rev", self.id),
            rgb1: self.rgb2.clone(),
            rgb2: self.rgb1.clone(),
            depth1: self.depth2.clone(),
            depth2: self.depth1.clone(),
            pose1: self.pose2,
            pose2: self.pose1,
            intrinsics: self.intrinsics,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SceneSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Split sizes `(train, val, test)`: 10 % each for validation and test,
/// at least one sample apiece, the rest for training.
pub fn split_sizes(count: usize) -> Result<(usize, usize, usize)> {
    if count < 3 {
        return Err(Error::config(format!(
            "a dataset needs at least 3 samples, got {count}"
        )));
    }
    let held = ((count as f64 * 0.1).round() as usize).max(1);
    Ok((count - 2 * held, held, held))
}

pub fn generate_sample(cfg: &SceneConfig, seed: u64) -> Result<SceneSample> {
    generate_indexed(cfg, seed, 0, format!("s{seed}"))
}

/// Sample `index` of the dataset drawn from `seed`; each index owns an
/// independent ChaCha stream.
pub fn generate_indexed(cfg: &SceneConfig, seed: u64, index: u64, id: String) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let k = cfg.intrinsics()?;
    let scene = build_scene(cfg, &k, &mut rng);
    let rel = random_motion(cfg, &mut rng);
    let world = random_motion(cfg, &mut rng);
    let (rgb1, depth1) = render(&scene, &RigidPose::identity(), &k, cfg)?;
    let (rgb2, depth2) = render(&scene, &rel, &k, cfg)?;
    Ok(SceneSample {
        id,
        rgb1,
        rgb2,
        depth1,
        depth2,
        pose1: world,
        pose2: world.compose(&rel),
        intrinsics: k,
    })
}

/// Deterministic 80/10/10 split by sample index.
pub fn generate_dataset(cfg: &SceneConfig, count: usize, seed: u64) -> Result<Dataset> {
    let (n_train, n_val, _) = split_sizes(count)?;
    let mut ds = Dataset::default();
    for i in 0..count {
        let (split, local) = if i < n_train {
            (Split::Train, i)
        } else if i < n_train + n_val {
            (Split::Val, i - n_train)
        } else {
            (Split::Test, i - n_train - n_val)
        };
        let id = format!("{}/{local:05}", split.as_str());
        let sample = generate_indexed(cfg, seed, i as u64, id)?;
        match split {
            Split::Train => ds.train.push(sample),
            Split::Val => ds.val.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    Ok(ds)
}

/// Uniform angle in `[0, max]` about a uniform axis, translation uniform in
/// the ball of radius `max_translation`.
fn random_motion(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> RigidPose {
    let axis = unit_vector(rng);
    let angle = rng.random_range(0.0..=1.0) * cfg.max_rotation_deg.to_radians();
    let t = loop {
        let c = Vector3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        if c.norm_squared() <= 1.0 {
            break c * cfg.max_translation;
        }
    };
    RigidPose::from_axis_angle(axis, angle, t)
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let c = Vector3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        let n = c.norm();
        if n > 1e-3 && n <= 1.0 {
            return c / n;
        }
    }
}

#[derive(Clone, Debug)]
struct Texture {
    albedo: [f64; 3],
    tint: [f64; 3],
    frequency: f64,
    phase: [f64; 2],
}

impl Texture {
    fn random(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut c = || rng.random_range(0.25..0.9);
        let albedo = [c(), c(), c()];
        let tint = [c(), c(), c()];
        Self {
            albedo,
            tint,
            frequency: cfg.texture_frequency * rng.random_range(0.7..1.3),
            phase: [
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            ],
        }
    }

    /// Smooth two-tone pattern over surface coordinates in meters.
    fn color(&self, s: f64, t: f64) -> [f64; 3] {
        let w = std::f64::consts::TAU * self.frequency;
        let m = 0.5 + 0.25 * (w * s + self.phase[0]).sin() + 0.25 * (w * t + self.phase[1]).sin();
        std::array::from_fn(|c| self.albedo[c] * (1.0 - m) + self.tint[c] * m)
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Plane {
        origin: Vector3<f64>,
        normal: Vector3<f64>,
        axes: [Vector3<f64>; 2],
        half_extent: Option<[f64; 2]>,
    },
    Box {
        min: Vector3<f64>,
        max: Vector3<f64>,
    },
}

#[derive(Clone, Debug)]
struct Primitive {
    shape: Shape,
    texture: Texture,
}

struct Hit {
    lambda: f64,
    normal: Vector3<f64>,
    uv: [f64; 2],
}

impl Primitive {
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        match &self.shape {
            Shape::Plane {
                origin,
                normal,
                axes,
                half_extent,
            } => {
                let den = normal.dot(d);
                if den.abs() < 1e-12 {
                    return None;
                }
                let lambda = normal.dot(&(origin - o)) / den;
                if lambda <= 0.0 {
                    return None;
                }
                let rel = o + d * lambda - origin;
                let uv = [axes[0].dot(&rel), axes[1].dot(&rel)];
                if let Some(h) = half_extent {
                    if uv[0].abs() > h[0] || uv[1].abs() > h[1] {
                        return None;
                    }
                }
                Some(Hit {
                    lambda,
                    normal: *normal,
                    uv,
                })
            }
            Shape::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                let mut sign = 1.0;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut near, mut far) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    let mut s = -1.0;
                    if near > far {
                        std::mem::swap(&mut near, &mut far);
                        s = 1.0;
                    }
                    if near > t0 {
                        t0 = near;
                        axis = a;
                        sign = s;
                    }
                    t1 = t1.min(far);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let p = o + d * t0;
                let mut normal = Vector3::zeros();
                normal[axis] = sign;
                let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
                Some(Hit {
                    lambda: t0,
                    normal,
                    uv: [p[i], p[j]],
                })
            }
        }
    }
}

/// Unit normal tilted away from `-z` by at most `max_tilt` radians, plus an
/// orthonormal tangent pair.
fn tilted_frame(rng: &mut ChaCha8Rng, max_tilt: f64) -> (Vector3<f64>, [Vector3<f64>; 2]) {
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let tilt = rng.random_range(0.0..=1.0) * max_tilt;
    let axis = Vector3::new(phi.cos(), phi.sin(), 0.0);
    let rot = RigidPose::from_axis_angle(axis, tilt, Vector3::zeros()).rotation;
    let n = rot * Vector3::new(0.0, 0.0, -1.0);
    let e1 = rot * Vector3::x();
    let e2 = n.cross(&e1);
    (n, [e1, e2])
}

fn build_scene(cfg: &SceneConfig, k: &CameraIntrinsics, rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let lo = cfg.min_depth;
    let hi = cfg.max_depth;
    let plane_depth = |rng: &mut ChaCha8Rng| cfg.plane_depth.unwrap_or_else(|| rng.random_range(lo + 1.0..hi - 1.0));
    match cfg.kind {
        SceneKind::FrontoPlane => {
            let z = plane_depth(rng);
            vec![Primitive {
                shape: Shape::Plane {
                    origin: Vector3::new(0.0, 0.0, z),
                    normal: Vector3::new(0.0, 0.0, -1.0),
                    axes: [Vector3::x(), -Vector3::y()],
                    half_extent: None,
                },
                texture: Texture::random(cfg, rng),
            }]
        }
        SceneKind::Plane => {
            let z = plane_depth(rng);
            let (normal, axes) = tilted_frame(rng, 25f64.to_radians());
            vec![Primitive {
                shape: Shape::Plane {
                    origin: Vector3::new(0.0, 0.0, z),
                    normal,
                    axes,
                    half_extent: None,
                },
                texture: Texture::random(cfg, rng),
            }]
        }
        SceneKind::Mixed => {
            let bg = rng.random_range(0.6..0.8) * hi;
            let (normal, axes) = tilted_frame(rng, 20f64.to_radians());
            let mut scene = vec![Primitive {
                shape: Shape::Plane {
                    origin: Vector3::new(0.0, 0.0, bg),
                    normal,
                    axes,
                    half_extent: None,
                },
                texture: Texture::random(cfg, rng),
            }];
            let half_fov_x = 0.5 * k.width as f64 / k.fx;
            let half_fov_y = 0.5 * k.height as f64 / k.fy;
            for _ in 0..cfg.primitives {
                let z = rng.random_range(lo + 1.0..(bg - 1.5).max(lo + 1.5));
                let x = rng.random_range(-0.7..0.7) * z * half_fov_x;
                let y = rng.random_range(-0.7..0.7) * z * half_fov_y;
                let center = Vector3::new(x, y, z);
                let size = rng.random_range(0.15..0.35) * z * half_fov_x;
                let shape = if rng.random_bool(0.5) {
                    let h = Vector3::new(
                        size * rng.random_range(0.6..1.0),
                        size * rng.random_range(0.6..1.0),
                        size * rng.random_range(0.6..1.0),
                    );
                    Shape::Box {
                        min: center - h,
                        max: center + h,
                    }
                } else {
                    let (normal, axes) = tilted_frame(rng, 45f64.to_radians());
                    Shape::Plane {
                        origin: center,
                        normal,
                        axes,
                        half_extent: Some([size * rng.random_range(0.7..1.3), size * rng.random_range(0.7..1.3)]),
                    }
                };
                scene.push(Primitive {
                    shape,
                    texture: Texture::random(cfg, rng),
                });
            }
            scene
        }
    }
}

const LIGHT: [f64; 3] = [-0.3, -0.5, -0.8];
const AMBIENT: f64 = 0.35;

/// Ray-casts the scene from a camera whose camera-to-scene pose is `cam`.
/// Colors are Lambertian-shaded and quantized to 8 bits.
fn render(
    scene: &[Primitive],
    cam: &RigidPose,
    k: &CameraIntrinsics,
    cfg: &SceneConfig,
) -> Result<(ImageBuffer, DepthMap)> {
    let light = Vector3::from(LIGHT).normalize();
    let (w, h) = (k.width, k.height);
    let mut rgb = vec![0u8; 3 * w * h];
    let mut depth = vec![0f32; w * h];
    let mut valid = vec![false; w * h];
    let origin = cam.translation;
    for y in 0..h {
        for x in 0..w {
            let dir = cam.rotation * k.ray(x as f64, y as f64);
            let best = scene
                .iter()
                .filter_map(|p| p.intersect(&origin, &dir).map(|hit| (hit, p)))
                .min_by(|a, b| a.0.lambda.total_cmp(&b.0.lambda));
            let i = y * w + x;
            let Some((hit, prim)) = best else { continue };
            let albedo = prim.texture.color(hit.uv[0], hit.uv[1]);
            let shade = AMBIENT + (1.0 - AMBIENT) * hit.normal.dot(&light).abs();
            for c in 0..3 {
                rgb[3 * i + c] = (albedo[c] * shade * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            let z = hit.lambda;
            if z >= cfg.min_depth && z <= cfg.max_depth {
                depth[i] = z as f32;
                valid[i] = true;
            }
        }
    }
    Ok((ImageBuffer::from_rgb8(w, h, &rgb)?, DepthMap::new(w, h, depth, valid)?))
}

#[cfg(test)]
mod tests;
