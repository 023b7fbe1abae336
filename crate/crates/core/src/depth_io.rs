//! RGB images, depth maps and the on-disk formats used for them.
//!
//! RGB uses binary PPM (`P6`, maxval 255) mapped to `[0, 1]`; depth uses
//! single-channel PFM (`Pf`) in meters where `0.0` marks a missing sample.
//! A dataset directory holds `<id>.ppm` / `<id>.pfm` pairs plus a manifest
//! listing one id per line.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::SparsityMask;

/// Row-major RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<[f32; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "rgb data has {} pixels, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(i) = data
            .iter()
            .position(|px| px.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::InvalidConfig(format!(
                "rgb channel value outside [0,1] at pixel {i}"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [[f32; 3]] {
        &mut self.data
    }
}

/// Row-major depth grid in meters; `0.0` means "no measurement".
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DepthMap {
    /// Builds a depth map, rejecting negative and non-finite samples.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "depth data has {} samples, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFiniteDepth { index });
            }
            if value < 0.0 {
                return Err(Error::NegativeDepth { index, value });
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Mask of positions holding a measurement (depth > 0).
    pub fn validity(&self) -> SparsityMask {
        SparsityMask::from_fn(self.width, self.height, |x, y| self.get(x, y) > 0.0)
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }
}

/// Grayscale luminance in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// One dataset record: an RGB frame with its dense groundtruth depth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub rgb: RgbImage,
    pub depth_gt: DepthMap,
    pub identifier: String,
}

impl SceneSample {
    pub fn new(rgb: RgbImage, depth_gt: DepthMap, identifier: impl Into<String>) -> Result<Self> {
        if rgb.width() != depth_gt.width() || rgb.height() != depth_gt.height() {
            return Err(Error::ShapeMismatch(format!(
                "rgb {}x{} vs depth {}x{}",
                rgb.width(),
                rgb.height(),
                depth_gt.width(),
                depth_gt.height()
            )));
        }
        Ok(Self {
            rgb,
            depth_gt,
            identifier: identifier.into(),
        })
    }
}

/// Axis-aligned crop rectangle in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

// ---------------------------------------------------------------------------
// Netpbm-style header tokenizer shared by PPM, PGM and PFM.

pub(crate) struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    pub(crate) fn token(&mut self) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::MalformedHeader("unexpected end of header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::MalformedHeader("non-ascii header token".into()))
    }

    pub(crate) fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| Error::MalformedHeader(format!("bad {what}: {tok:?}")))
    }

    /// Consumes the single whitespace byte that ends the header and returns the payload.
    pub(crate) fn payload(mut self) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(&self.bytes[self.pos..])
            }
            _ => Err(Error::MalformedHeader("missing whitespace after header".into())),
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn positive_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!(
            "zero dimension {width}x{height}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PPM

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut header = HeaderReader::new(bytes);
    let magic = header.token()?;
    if magic != "P6" {
        return Err(Error::MalformedHeader(format!(
            "expected P6 magic, found {magic:?}"
        )));
    }
    let width: usize = header.number("width")?;
    let height: usize = header.number("height")?;
    let maxval: u32 = header.number("maxval")?;
    positive_dims(width, height)?;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    let payload = header.payload()?;
    let expected = width * height * 3;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let data = payload[..expected]
        .chunks_exact(3)
        .map(|c| {
            [
                f32::from(c[0]) / 255.0,
                f32::from(c[1]) / 255.0,
                f32::from(c[2]) / 255.0,
            ]
        })
        .collect();
    Ok(RgbImage {
        width,
        height,
        data,
    })
}

pub fn encode_ppm(rgb: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", rgb.width, rgb.height).into_bytes();
    out.reserve(rgb.data.len() * 3);
    for px in &rgb.data {
        for &v in px {
            out.push(quantize_unit(v));
        }
    }
    out
}

fn quantize_unit(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    decode_ppm(&read_file(path.as_ref())?)
}

pub fn save_ppm(rgb: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_ppm(rgb))
}

// ---------------------------------------------------------------------------
// PFM

pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap> {
    let mut header = HeaderReader::new(bytes);
    let magic = header.token()?;
    if magic != "Pf" {
        return Err(Error::MalformedHeader(format!(
            "expected single-channel Pf magic, found {magic:?}"
        )));
    }
    let width: usize = header.number("width")?;
    let height: usize = header.number("height")?;
    let scale: f64 = header.number("scale")?;
    positive_dims(width, height)?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::MalformedHeader(format!("bad scale {scale}")));
    }
    let little_endian = scale < 0.0;
    let payload = header.payload()?;
    let expected = width * height * 4;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let mut data = vec![0.0f32; width * height];
    // PFM stores rows bottom-to-top.
    for (file_row, chunk) in payload[..expected].chunks_exact(width * 4).enumerate() {
        let row = height - 1 - file_row;
        for (x, b) in chunk.chunks_exact(4).enumerate() {
            let raw = [b[0], b[1], b[2], b[3]];
            data[row * width + x] = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
        }
    }
    DepthMap::new(width, height, data)
}

pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    out.reserve(depth.data.len() * 4);
    for row in depth.data.chunks_exact(depth.width).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<DepthMap> {
    decode_pfm(&read_file(path.as_ref())?)
}

pub fn save_pfm(depth: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_pfm(depth))
}

// ---------------------------------------------------------------------------
// Image operations

pub fn to_grayscale(rgb: &RgbImage) -> GrayImage {
    let data = rgb
        .data
        .iter()
        .map(|&[r, g, b]| {
            (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)).clamp(0.0, 1.0)
        })
        .collect();
    GrayImage {
        width: rgb.width,
        height: rgb.height,
        data,
    }
}

/// Crops `sample` to `crop` and resizes to `out_w`x`out_h`.
///
/// RGB is resampled bilinearly (pixel-center aligned). Depth uses nearest
/// neighbour so missing zeros are never blended into valid measurements.
pub fn crop_resize(
    sample: &SceneSample,
    crop: CropRect,
    out_w: usize,
    out_h: usize,
) -> Result<SceneSample> {
    let (width, height) = (sample.rgb.width, sample.rgb.height);
    if crop.width == 0
        || crop.height == 0
        || crop.x + crop.width > width
        || crop.y + crop.height > height
    {
        return Err(Error::CropOutOfBounds {
            x: crop.x,
            y: crop.y,
            w: crop.width,
            h: crop.height,
            width,
            height,
        });
    }
    if out_w == 0 || out_h == 0 {
        return Err(Error::DimensionTooSmall(format!(
            "output {out_w}x{out_h} must be at least 1x1"
        )));
    }
    let sx = crop.width as f64 / out_w as f64;
    let sy = crop.height as f64 / out_h as f64;

    let mut rgb = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let (y0, y1, ty) = bilinear_taps(oy, sy, crop.height);
        for ox in 0..out_w {
            let (x0, x1, tx) = bilinear_taps(ox, sx, crop.width);
            let p = |x: usize, y: usize| sample.rgb.get(crop.x + x, crop.y + y);
            let (p00, p01, p10, p11) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                let top = (1.0 - tx) * f64::from(p00[c]) + tx * f64::from(p01[c]);
                let bottom = (1.0 - tx) * f64::from(p10[c]) + tx * f64::from(p11[c]);
                px[c] = ((1.0 - ty) * top + ty * bottom).clamp(0.0, 1.0) as f32;
            }
            rgb.push(px);
        }
    }

    let mut depth = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let y = nearest_tap(oy, sy, crop.height);
        for ox in 0..out_w {
            let x = nearest_tap(ox, sx, crop.width);
            depth.push(sample.depth_gt.get(crop.x + x, crop.y + y));
        }
    }

    Ok(SceneSample {
        rgb: RgbImage {
            width: out_w,
            height: out_h,
            data: rgb,
        },
        depth_gt: DepthMap {
            width: out_w,
            height: out_h,
            data: depth,
        },
        identifier: sample.identifier.clone(),
    })
}

fn bilinear_taps(o: usize, scale: f64, len: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

fn nearest_tap(o: usize, scale: f64, len: usize) -> usize {
    (((o as f64 + 0.5) * scale).floor() as usize).min(len - 1)
}

// ---------------------------------------------------------------------------
// Synthetic scenes

const SYNTH_MIN_DEPTH: f64 = 1.0;
const SYNTH_MAX_DEPTH: f64 = 6.0;

/// A planar surface patch `depth = base + gx * u + gy * v` over normalized coordinates.
struct Surface {
    base: f64,
    gx: f64,
    gy: f64,
    albedo: [f64; 3],
}

impl Surface {
    fn depth(&self, u: f64, v: f64) -> f64 {
        (self.base + self.gx * u + self.gy * v).clamp(SYNTH_MIN_DEPTH, SYNTH_MAX_DEPTH)
    }
}

/// Generates a deterministic toy scene: a slanted background plane with
/// one to three nearer boxes. Colour is a mix of per-surface albedo and
/// shading from normalized inverse depth, so RGB carries depth signal.
pub fn make_synthetic_scene(seed: u64, w: usize, h: usize) -> Result<SceneSample> {
    if w < 8 || h < 8 {
        return Err(Error::DimensionTooSmall(format!(
            "synthetic scenes need at least 8x8, got {w}x{h}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let albedo = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()]
    };

    let background = Surface {
        base: rng.gen_range(3.5..5.0),
        gx: rng.gen_range(-1.0..1.0),
        gy: rng.gen_range(-2.0..-0.5),
        albedo: albedo(&mut rng),
    };
    let box_count = rng.gen_range(1..=3);
    let mut boxes = Vec::with_capacity(box_count);
    for _ in 0..box_count {
        let bw = rng.gen_range(w / 5..=w / 2).max(2);
        let bh = rng.gen_range(h / 5..=h / 2).max(2);
        let x0 = rng.gen_range(0..=w - bw);
        let y0 = rng.gen_range(0..=h - bh);
        let surface = Surface {
            base: rng.gen_range(1.5..3.0),
            gx: rng.gen_range(-0.4..0.4),
            gy: rng.gen_range(-0.4..0.4),
            albedo: albedo(&mut rng),
        };
        boxes.push((x0, y0, bw, bh, surface));
    }

    let inv_near = 1.0 / SYNTH_MIN_DEPTH;
    let inv_far = 1.0 / SYNTH_MAX_DEPTH;
    let mut depth = Vec::with_capacity(w * h);
    let mut rgb = Vec::with_capacity(w * h);
    for y in 0..h {
        let v = (y as f64 + 0.5) / h as f64 - 0.5;
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64 - 0.5;
            let mut d = background.depth(u, v);
            let mut surface_albedo = background.albedo;
            for (x0, y0, bw, bh, s) in &boxes {
                if x >= *x0 && x < x0 + bw && y >= *y0 && y < y0 + bh {
                    let bd = s.depth(u, v);
                    if bd < d {
                        d = bd;
                        surface_albedo = s.albedo;
                    }
                }
            }
            let shade = ((1.0 / d - inv_far) / (inv_near - inv_far)).clamp(0.0, 1.0);
            let px = surface_albedo.map(|a| {
                let v = (0.3 * a + 0.7 * shade).clamp(0.0, 1.0);
                // stored on the 8-bit grid so PPM round-trips are exact
                ((v * 255.0).round() / 255.0) as f32
            });
            depth.push(d as f32);
            rgb.push(px);
        }
    }
    Ok(SceneSample {
        rgb: RgbImage {
            width: w,
            height: h,
            data: rgb,
        },
        depth_gt: DepthMap {
            width: w,
            height: h,
            data: depth,
        },
        identifier: format!("synth_{seed:08}"),
    })
}

// ---------------------------------------------------------------------------
// Dataset directories

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Writes `<id>.ppm` / `<id>.pfm` pairs and a manifest into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[SceneSample]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for s in samples {
        save_ppm(&s.rgb, dir.join(format!("{}.ppm", s.identifier)))?;
        save_pfm(&s.depth_gt, dir.join(format!("{}.pfm", s.identifier)))?;
        manifest.push_str(&s.identifier);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST_NAME);
    write_file(&path, manifest.as_bytes())?;
    Ok(path)
}

/// Reads the ids listed in a manifest and loads their pairs from the manifest's directory.
pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Vec<SceneSample>> {
    let manifest = manifest.as_ref();
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            let rgb = load_ppm(dir.join(format!("{id}.ppm")))?;
            let depth = load_pfm(dir.join(format!("{id}.pfm")))?;
            SceneSample::new(rgb, depth, id)
        })
        .collect()
}
