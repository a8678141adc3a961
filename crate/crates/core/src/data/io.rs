//! Raster formats (binary PPM/PGM, PFM, 16-bit PNG depth) and the sample
//! directory layout.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, ImageBuffer, RigidPose};

use super::{Dataset, SceneSample};

/// Meters per PNG depth unit is `1 / PNG_DEPTH_SCALE`.
pub const PNG_DEPTH_SCALE: f64 = 256.0;
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown split {s} (train, val, test)")))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::ingestion(path, e.to_string()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::ingestion(path, e.to_string()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits a binary Netpbm-style header into `fields` ASCII tokens (with `#`
/// comments) and returns them plus the offset of the payload, which starts
/// after exactly one whitespace byte.
fn header_tokens(bytes: &[u8], fields: usize, path: &Path) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(fields);
    let mut i = 0;
    while tokens.len() < fields {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::ingestion(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(Error::ingestion(path, "header without payload"));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(token: &str, path: &Path) -> Result<usize> {
    match token.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::ingestion(path, format!("bad dimension {token:?}"))),
    }
}

fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let (tok, offset) = header_tokens(&bytes, 4, path)?;
    if tok[0] != magic {
        return Err(Error::ingestion(
            path,
            format!("expected {magic} magic, found {:?}", tok[0]),
        ));
    }
    let (w, h) = (parse_dim(&tok[1], path)?, parse_dim(&tok[2], path)?);
    if tok[3] != "255" {
        return Err(Error::ingestion(
            path,
            format!("only 8-bit data is supported, maxval {}", tok[3]),
        ));
    }
    let need = w * h * channels;
    let data = &bytes[offset..];
    if data.len() < need {
        return Err(Error::ingestion(
            path,
            format!("payload has {} bytes, expected {need}", data.len()),
        ));
    }
    Ok((w, h, data[..need].to_vec()))
}

pub fn write_ppm(path: &Path, image: &ImageBuffer) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_rgb8());
    write_bytes(path, &out)
}

pub fn read_ppm(path: &Path) -> Result<ImageBuffer> {
    let (w, h, data) = read_netpbm(path, "P6", 3)?;
    ImageBuffer::from_rgb8(w, h, &data).map_err(|e| Error::ingestion(path, e.to_string()))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::config("pgm buffer size mismatch"));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    write_bytes(path, &out)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P5", 1)
}

/// Grayscale PFM, little-endian (scale −1), rows stored bottom to top.
pub fn write_pfm_raw(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::config("pfm buffer size mismatch"));
    }
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for row in values.chunks_exact(width).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

pub fn read_pfm_raw(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = read_bytes(path)?;
    let (tok, offset) = header_tokens(&bytes, 4, path)?;
    if tok[0] != "Pf" {
        return Err(Error::ingestion(
            path,
            format!("expected grayscale Pf magic, found {:?}", tok[0]),
        ));
    }
    let (w, h) = (parse_dim(&tok[1], path)?, parse_dim(&tok[2], path)?);
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| Error::ingestion(path, format!("bad scale {:?}", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::ingestion(path, "scale must be nonzero"));
    }
    let data = &bytes[offset..];
    if data.len() < 4 * w * h {
        return Err(Error::ingestion(
            path,
            format!("payload has {} bytes, expected {}", data.len(), 4 * w * h),
        ));
    }
    let mut values = vec![0f32; w * h];
    for (r, row) in data[..4 * w * h].chunks_exact(4 * w).enumerate() {
        let y = h - 1 - r;
        for (x, b) in row.chunks_exact(4).enumerate() {
            let b = [b[0], b[1], b[2], b[3]];
            values[y * w + x] = if scale < 0.0 {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
        }
    }
    Ok((w, h, values))
}

/// Invalid pixels are stored as `+inf`.
pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let values: Vec<f32> = depth
        .values()
        .iter()
        .zip(depth.valid())
        .map(|(&v, &ok)| if ok { v } else { f32::INFINITY })
        .collect();
    write_pfm_raw(path, depth.width(), depth.height(), &values)
}

/// `+inf` marks invalid pixels; NaN, `-inf` and nonpositive depths are
/// rejected.
pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let (w, h, raw) = read_pfm_raw(path)?;
    let mut values = vec![0f32; w * h];
    let mut valid = vec![false; w * h];
    for (i, &v) in raw.iter().enumerate() {
        if v == f32::INFINITY {
            continue;
        }
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::ingestion(
                path,
                format!("depth {v} at pixel ({}, {}) is not positive", i % w, i / w),
            ));
        }
        values[i] = v;
        valid[i] = true;
    }
    DepthMap::new(w, h, values, valid).map_err(|e| Error::ingestion(path, e.to_string()))
}

/// 16-bit grayscale PNG, meters × 256, 0 for invalid.
pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut data = Vec::with_capacity(2 * depth.values().len());
    for (&v, &ok) in depth.values().iter().zip(depth.valid()) {
        let q = if ok {
            (v as f64 * PNG_DEPTH_SCALE).round().clamp(1.0, 65535.0) as u16
        } else {
            0
        };
        data.extend_from_slice(&q.to_be_bytes());
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(
        std::io::BufWriter::new(file),
        depth.width() as u32,
        depth.height() as u32,
    );
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let file = fs::File::open(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    let bad = |e: png::DecodingError| Error::ingestion(path, e.to_string());
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(bad)?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::ingestion(
            path,
            format!(
                "expected 16-bit grayscale, found {:?} {:?}",
                info.color_type, info.bit_depth
            ),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(2 * w * h)];
    let frame = reader.next_frame(&mut buf).map_err(bad)?;
    let bytes = &buf[..frame.buffer_size()];
    let mut values = vec![0f32; w * h];
    let mut valid = vec![false; w * h];
    for (i, b) in bytes.chunks_exact(2).take(w * h).enumerate() {
        let q = u16::from_be_bytes([b[0], b[1]]);
        if q > 0 {
            values[i] = (q as f64 / PNG_DEPTH_SCALE) as f32;
            valid[i] = true;
        }
    }
    DepthMap::new(w, h, values, valid).map_err(|e| Error::ingestion(path, e.to_string()))
}

fn load_depth(dir: &Path, stem: &str) -> Result<DepthMap> {
    let pfm = dir.join(format!("{stem}.pfm"));
    let png = dir.join(format!("{stem}.png"));
    if pfm.exists() || !png.exists() {
        read_pfm(&pfm)
    } else {
        read_depth_png(&png)
    }
}

fn parse_file<T>(path: &Path, parse: impl Fn(&str) -> Result<T>) -> Result<T> {
    parse(&read_text(path)?).map_err(|e| Error::ingestion(path, e.to_string()))
}

pub fn save_sample(sample: &SceneSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ppm(&dir.join("rgb1.ppm"), &sample.rgb1)?;
    write_ppm(&dir.join("rgb2.ppm"), &sample.rgb2)?;
    write_pfm(&dir.join("depth1.pfm"), &sample.depth1)?;
    write_pfm(&dir.join("depth2.pfm"), &sample.depth2)?;
    write_bytes(&dir.join("intrinsics.txt"), sample.intrinsics.to_text().as_bytes())?;
    write_bytes(&dir.join("pose1.txt"), sample.pose1.to_text().as_bytes())?;
    write_bytes(&dir.join("pose2.txt"), sample.pose2.to_text().as_bytes())
}

/// Reads a sample directory; depth may be `depthN.pfm` or a 16-bit
/// `depthN.png`. The id is the directory name.
pub fn load_sample(dir: &Path) -> Result<SceneSample> {
    let sample = SceneSample {
        id: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        rgb1: read_ppm(&dir.join("rgb1.ppm"))?,
        rgb2: read_ppm(&dir.join("rgb2.ppm"))?,
        depth1: load_depth(dir, "depth1")?,
        depth2: load_depth(dir, "depth2")?,
        intrinsics: parse_file(&dir.join("intrinsics.txt"), CameraIntrinsics::parse)?,
        pose1: parse_file(&dir.join("pose1.txt"), RigidPose::parse)?,
        pose2: parse_file(&dir.join("pose2.txt"), RigidPose::parse)?,
    };
    sample.validate().map_err(|e| Error::ingestion(dir, e.to_string()))?;
    Ok(sample)
}

/// Writes every sample under `root/<id>` and a manifest listing the ids in
/// train, val, test order.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = String::new();
    for split in Split::ALL {
        for s in ds.split(split) {
            save_sample(s, &root.join(&s.id))?;
            manifest.push_str(&s.id);
            manifest.push('\n');
        }
    }
    write_bytes(&root.join(MANIFEST_FILE), manifest.as_bytes())
}

/// Loads the samples named in `root/manifest.txt`. The first path component
/// of each entry names its split.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST_FILE);
    let manifest = read_text(&manifest_path)?;
    let mut ds = Dataset::default();
    for line in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let head = line.split('/').next().unwrap_or_default();
        let split = Split::parse(head)
            .map_err(|_| Error::ingestion(&manifest_path, format!("entry {line} does not start with a split name")))?;
        let dir: PathBuf = root.join(line);
        let mut sample = load_sample(&dir)?;
        sample.id = line.to_string();
        match split {
            Split::Train => ds.train.push(sample),
            Split::Val => ds.val.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    if ds.is_empty() {
        return Err(Error::ingestion(&manifest_path, "manifest lists no samples"));
    }
    Ok(ds)
}
