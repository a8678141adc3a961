use crate::error::{Error, Result};

/// Dense per-pixel depth in meters with a validity mask.
///
/// Values are row-major. Invalid pixels carry `0.0` in `values`; only the
/// mask is authoritative.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Builds a depth map, checking that every valid value is finite and
    /// strictly positive.
    pub fn new(width: usize, height: usize, values: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if values.len() != n || valid.len() != n {
            return Err(Error::config(format!(
                "depth map {width}x{height} expects {n} values and mask entries, got {} and {}",
                values.len(),
                valid.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| valid[i] && !(values[i].is_finite() && values[i] > 0.0)) {
            return Err(Error::config(format!(
                "valid depth at pixel {i} is {} (must be finite and > 0)",
                values[i]
            )));
        }
        let values = values
            .into_iter()
            .zip(&valid)
            .map(|(v, &ok)| if ok { v } else { 0.0 })
            .collect();
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    /// Every pixel valid.
    pub fn dense(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        let valid = vec![true; values.len()];
        Self::new(width, height, values, valid)
    }

    pub fn filled(width: usize, height: usize, depth: f32) -> Result<Self> {
        Self::dense(width, height, vec![depth; width * height])
    }

    /// A map with no valid pixels.
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Treats every non-finite or non-positive entry as missing.
    pub fn from_raw_lossy(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Self::new(width, height, values, valid)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Three-channel image with values in `[0, 1]`, stored channel-planar
/// (`[c][y][x]`) to match tensor layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != 3 * width * height {
            return Err(Error::config(format!(
                "image {width}x{height} expects {} values, got {}",
                3 * width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::config(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; 3 * width * height],
        }
    }

    /// Builds from interleaved `rgbrgb...` 8-bit data.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * width * height {
            return Err(Error::config("rgb8 buffer size mismatch"));
        }
        let plane = width * height;
        let mut values = vec![0.0; 3 * plane];
        for (i, px) in bytes.chunks_exact(3).enumerate() {
            for c in 0..3 {
                values[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Ok(Self { width, height, values })
    }

    /// Interleaved 8-bit encoding with round-to-nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push((self.values[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.values[i], self.values[plane + i], self.values[2 * plane + i]]
    }
}
