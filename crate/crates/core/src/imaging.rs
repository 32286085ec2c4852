//! Images, masks, landmarks and the periocular preprocessing steps.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ResizePlan;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const NUM_LANDMARKS: usize = 68;
/// Zero-based indices of the twelve eye-contour points (37–48 in the usual
/// one-based 68-point numbering).
pub const EYE_LANDMARKS: std::ops::Range<usize> = 36..48;
/// Samples tilted beyond this many degrees about any axis are rejected.
pub const MAX_POSE_DEGREES: f64 = 45.0;

/// RGB raster with values in `[0, 1]`, stored planar (`[3, h, w]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
    provenance: Option<PathBuf>,
}

impl Image {
    /// `data` is planar: all red values row by row, then green, then blue.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim("image must be at least 1×1"));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::dim(format!(
                "{}×{} RGB image needs {} values, got {}",
                height,
                width,
                CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
            provenance: None,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; CHANNELS * height * width])
    }

    /// Build from a `[3, h, w]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor_clamped(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != CHANNELS {
            return Err(Error::dim(format!("expected [3, h, w], got {s:?}")));
        }
        if !t.is_finite() {
            return Err(Error::InvalidValue("non-finite pixel".into()));
        }
        let data = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(s[1], s[2], data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn provenance(&self) -> Option<&Path> {
        self.provenance.as_deref()
    }

    pub fn with_provenance(mut self, p: impl Into<PathBuf>) -> Self {
        self.provenance = Some(p.into());
        self
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![CHANNELS, self.height, self.width], self.data.clone())
    }

    /// ITU-R BT.601 luma, one value per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    /// Values snapped to the 8-bit grid, as a PNG round trip would produce.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|v| quantize(*v)).collect();
        Image { data, ..self.clone() }
    }

    pub fn resized(&self, height: usize, width: usize) -> Image {
        let plan = ResizePlan::bilinear(self.height, self.width, height, width);
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            data.extend(plan.apply(self.plane(c)));
        }
        Image {
            height,
            width,
            data,
            provenance: self.provenance.clone(),
        }
    }

    pub fn crop(&self, w: Window) -> Result<Image> {
        if w.top + w.height > self.height || w.left + w.width > self.width || w.area() == 0 {
            return Err(Error::InvalidLandmarks(format!(
                "window {w:?} outside {}×{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(CHANNELS * w.area());
        for c in 0..CHANNELS {
            for y in w.top..w.top + w.height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + w.left..row + w.left + w.width]);
            }
        }
        Ok(Image {
            height: w.height,
            width: w.width,
            data,
            provenance: self.provenance.clone(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = open_image(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; CHANNELS * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..CHANNELS {
                data[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
            }
        }
        Ok(Image::new(h, w, data)?.with_provenance(path))
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(y as usize, x as usize, c) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// 8-bit PNG; each channel stored as `round(v · 255)`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_rgb8().save(path).map_err(|e| Error::Codec {
            path: path.into(),
            message: e.to_string(),
        })
    }
}

pub fn quantize(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

/// Axis-aligned pixel rectangle `[top, top+height) × [left, left+width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// Binary mask: 1 marks a known pixel, 0 a hidden one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
    coverage: f64,
}

impl Mask {
    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width || bits.is_empty() {
            return Err(Error::dim(format!(
                "{}×{} mask needs {} entries, got {}",
                height,
                width,
                height * width,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidValue("mask entries must be 0 or 1".into()));
        }
        let hidden = bits.iter().filter(|&&b| b == 0).count();
        Ok(Self {
            height,
            width,
            coverage: hidden as f64 / bits.len() as f64,
            bits,
        })
    }

    pub fn from_window(height: usize, width: usize, w: Window) -> Result<Self> {
        let mut bits = vec![0u8; height * width];
        for y in 0..height {
            for x in 0..width {
                if w.contains(y, x) {
                    bits[y * width + x] = 1;
                }
            }
        }
        Self::from_bits(height, width, bits)
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::from_bits(height, width, vec![1; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::from_bits(height, width, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.bits[y * self.width + x]
    }

    /// Fraction of hidden (zero) pixels.
    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn visible_fraction(&self) -> f64 {
        self.bits.iter().filter(|&&b| b == 1).count() as f64 / self.bits.len() as f64
    }

    /// Bounding box of the known pixels, if any.
    pub fn visible_window(&self) -> Option<Window> {
        let (mut top, mut left) = (usize::MAX, usize::MAX);
        let (mut bottom, mut right) = (0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) == 1 {
                    top = top.min(y);
                    left = left.min(x);
                    bottom = bottom.max(y + 1);
                    right = right.max(x + 1);
                }
            }
        }
        (top != usize::MAX).then(|| Window {
            top,
            left,
            height: bottom - top,
            width: right - left,
        })
    }

    /// The mask broadcast over the three colour planes, as `[3, h, w]`.
    pub fn to_tensor3(&self) -> Tensor {
        let plane: Vec<f64> = self.bits.iter().map(|&b| b as f64).collect();
        let mut data = Vec::with_capacity(CHANNELS * plane.len());
        for _ in 0..CHANNELS {
            data.extend_from_slice(&plane);
        }
        Tensor::from_parts(vec![CHANNELS, self.height, self.width], data)
    }

    /// 1-bit greyscale PNG (white = known).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let codec = |e: png::EncodingError| Error::Codec {
            path: path.into(),
            message: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(codec)?;
        let stride = self.width.div_ceil(8);
        let mut packed = vec![0u8; stride * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) == 1 {
                    packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        writer.write_image_data(&packed).map_err(codec)?;
        writer.finish().map_err(codec)
    }

    /// Any PNG; non-zero luma counts as known.
    pub fn load_png(path: &Path) -> Result<Mask> {
        let img = open_image(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let bits = img.pixels().map(|p| u8::from(p[0] > 0)).collect();
        Mask::from_bits(h, w, bits)
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        e => Error::Codec {
            path: path.into(),
            message: e.to_string(),
        },
    })
}

/// 68 facial keypoints in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::InvalidLandmarks(format!(
                "expected {NUM_LANDMARKS} points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidLandmarks("non-finite coordinate".into()));
        }
        Ok(Self {
            points,
            confidence: None,
        })
    }

    pub fn with_confidence(mut self, c: f64) -> Self {
        self.confidence = Some(c);
        self
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn confidence(&self) -> Option<f64> {
        self.confidence
    }

    pub fn eye_points(&self) -> &[[f64; 2]] {
        &self.points[EYE_LANDMARKS]
    }

    /// Every point satisfies `0 ≤ x ≤ width`, `0 ≤ y ≤ height`.
    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        self.points
            .iter()
            .all(|&[x, y]| (0.0..=width as f64).contains(&x) && (0.0..=height as f64).contains(&y))
    }

    /// Flattened `[x0, y0, x1, y1, …]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    /// Parse a JSON array of 68 `[x, y]` pairs.
    pub fn from_json(text: &str) -> Result<Self> {
        let points: Vec<[f64; 2]> = serde_json::from_str(text)?;
        Self::new(points)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.points)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl PoseAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Result<Self> {
        for v in [roll, pitch, yaw] {
            if !(-180.0..=180.0).contains(&v) {
                return Err(Error::InvalidValue(format!("angle {v} outside [-180, 180]")));
            }
        }
        Ok(Self { roll, pitch, yaw })
    }

    pub fn max_abs(&self) -> f64 {
        self.roll.abs().max(self.pitch.abs()).max(self.yaw.abs())
    }
}

/// Expansion of the eye-landmark bounding box into the visible window. All
/// four margins are fractions of the eye box *width*, which stays stable
/// under expression changes where the box height does not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub bottom: f64,
}

impl Default for MarginConfig {
    /// Sized so the frontal template leaves roughly a quarter of the frame
    /// visible.
    fn default() -> Self {
        Self {
            left: 0.25,
            right: 0.25,
            top: 0.35,
            bottom: 0.47,
        }
    }
}

impl MarginConfig {
    pub fn zero() -> Self {
        Self {
            left: 0.0,
            right: 0.0,
            top: 0.0,
            bottom: 0.0,
        }
    }
}

/// Pixel window spanned by the eye landmarks expanded by `margins`, clipped
/// to the frame.
pub fn periocular_window(landmarks: &LandmarkSet, dims: (usize, usize), margins: &MarginConfig) -> Result<Window> {
    let (h, w) = dims;
    let eyes = landmarks.eye_points();
    if eyes
        .iter()
        .any(|&[x, y]| !(0.0..=w as f64).contains(&x) || !(0.0..=h as f64).contains(&y))
    {
        return Err(Error::InvalidLandmarks(format!(
            "eye landmarks fall outside the {h}×{w} frame"
        )));
    }
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &[x, y] in eyes {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let bw = x1 - x0;
    let left = (x0 - margins.left * bw).clamp(0.0, w as f64).floor() as usize;
    let right = (x1 + margins.right * bw).clamp(0.0, w as f64).ceil() as usize;
    let top = (y0 - margins.top * bw).clamp(0.0, h as f64).floor() as usize;
    let bottom = (y1 + margins.bottom * bw).clamp(0.0, h as f64).ceil() as usize;
    if right <= left || bottom <= top {
        return Err(Error::DegenerateMask(format!(
            "visible window [{top}, {bottom}) × [{left}, {right}) has zero area"
        )));
    }
    Ok(Window {
        top,
        left,
        height: bottom - top,
        width: right - left,
    })
}

pub fn build_periocular_mask(landmarks: &LandmarkSet, dims: (usize, usize), margins: &MarginConfig) -> Result<Mask> {
    let win = periocular_window(landmarks, dims, margins)?;
    Mask::from_window(dims.0, dims.1, win)
}

/// Hadamard product of the image with the mask broadcast over channels.
pub fn apply_mask(gt: &Image, mask: &Mask) -> Result<Image> {
    if gt.dims() != mask.dims() {
        return Err(Error::dim(format!(
            "image {:?} and mask {:?} differ",
            gt.dims(),
            mask.dims()
        )));
    }
    let n = gt.height * gt.width;
    let data = gt
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.bits[i % n] == 1 { v } else { 0.0 })
        .collect();
    Ok(Image { data, ..gt.clone() })
}

/// Crop `window` and resample it to `out_dims` (bilinear).
pub fn crop_window(image: &Image, window: Window, out_dims: (usize, usize)) -> Result<Image> {
    Ok(image.crop(window)?.resized(out_dims.0, out_dims.1))
}

/// The periocular crop: the visible window of the mask, resized to
/// `out_dims` (the identity encoder's input resolution).
pub fn crop_periocular(
    gt: &Image,
    landmarks: &LandmarkSet,
    margins: &MarginConfig,
    out_dims: (usize, usize),
) -> Result<Image> {
    let win = periocular_window(landmarks, gt.dims(), margins)?;
    crop_window(gt, win, out_dims)
}

/// Keep a sample unless it is tilted more than 45° about any axis or its
/// eye landmarks were not found. Exactly 45° is kept.
pub fn filter_sample(pose: &PoseAngles, landmarks: Option<&LandmarkSet>) -> bool {
    landmarks.is_some() && pose.max_abs() <= MAX_POSE_DEGREES
}

/// Mean 68-point face shape, normalized so the outer contour spans the unit
/// box (`y` slightly exceeds 1 at the chin).
pub const FRONTAL_TEMPLATE: [[f64; 2]; NUM_LANDMARKS] = [
    [0.0792, 0.3392],
    [0.0829, 0.4570],
    [0.0968, 0.5756],
    [0.1221, 0.6919],
    [0.1687, 0.8003],
    [0.2398, 0.8957],
    [0.3257, 0.9771],
    [0.4223, 1.0433],
    [0.5318, 1.0608],
    [0.6413, 1.0398],
    [0.7381, 0.9723],
    [0.8244, 0.8896],
    [0.8948, 0.7925],
    [0.9394, 0.6815],
    [0.9611, 0.5622],
    [0.9706, 0.4418],
    [0.9712, 0.3221],
    [0.1638, 0.2492],
    [0.2178, 0.2043],
    [0.2913, 0.1924],
    [0.3675, 0.2036],
    [0.4393, 0.2331],
    [0.5864, 0.2281],
    [0.6602, 0.1959],
    [0.7375, 0.1824],
    [0.8132, 0.1928],
    [0.8708, 0.2353],
    [0.5153, 0.3186],
    [0.5162, 0.3962],
    [0.5171, 0.4738],
    [0.5182, 0.5532],
    [0.4337, 0.6041],
    [0.4755, 0.6208],
    [0.5207, 0.6343],
    [0.5659, 0.6188],
    [0.6071, 0.6016],
    [0.2524, 0.3311],
    [0.2987, 0.3026],
    [0.3557, 0.3030],
    [0.4037, 0.3387],
    [0.3525, 0.3500],
    [0.2968, 0.3505],
    [0.6313, 0.3341],
    [0.6791, 0.2965],
    [0.7360, 0.2947],
    [0.7829, 0.3213],
    [0.7403, 0.3418],
    [0.6850, 0.3437],
    [0.3532, 0.7462],
    [0.4146, 0.7191],
    [0.4777, 0.7068],
    [0.5227, 0.7171],
    [0.5698, 0.7054],
    [0.6352, 0.7157],
    [0.6995, 0.7394],
    [0.6394, 0.8052],
    [0.5764, 0.8354],
    [0.5254, 0.8417],
    [0.4764, 0.8375],
    [0.4138, 0.8100],
    [0.3801, 0.7500],
    [0.4780, 0.7451],
    [0.5234, 0.7489],
    [0.5711, 0.7433],
    [0.6724, 0.7442],
    [0.5725, 0.7766],
    [0.5240, 0.7834],
    [0.4776, 0.7785],
];

/// Where the template sits in an aligned frame: `p = frame · (offset + scale · t)`.
const TEMPLATE_SCALE: f64 = 0.8;
const TEMPLATE_OFFSET: [f64; 2] = [0.1, 0.05];

/// Source of 68-point landmarks for an image.
pub trait LandmarkDetector: Send + Sync {
    /// `None` when no face (or no eyes) could be located.
    fn detect(&self, image: &Image) -> Option<LandmarkSet>;
}

/// Places the frontal template in the frame, scaled to the image size.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateLandmarks;

impl TemplateLandmarks {
    pub fn for_dims(height: usize, width: usize) -> LandmarkSet {
        let points = FRONTAL_TEMPLATE
            .iter()
            .map(|&[x, y]| {
                [
                    width as f64 * (TEMPLATE_OFFSET[0] + TEMPLATE_SCALE * x),
                    height as f64 * (TEMPLATE_OFFSET[1] + TEMPLATE_SCALE * y),
                ]
            })
            .collect();
        LandmarkSet::new(points).expect("template has 68 points")
    }
}

impl LandmarkDetector for TemplateLandmarks {
    fn detect(&self, image: &Image) -> Option<LandmarkSet> {
        Some(Self::for_dims(image.height(), image.width()))
    }
}

/// Head-pose source.
pub trait PoseEstimator: Send + Sync {
    fn estimate(&self, image: &Image) -> PoseAngles;
}

/// Returns caller-supplied angles, looked up by the file stem of the image's
/// provenance, falling back to a default.
#[derive(Debug, Clone, Default)]
pub struct FixedPose {
    pub default: PoseAngles,
    pub by_stem: HashMap<String, PoseAngles>,
}

impl FixedPose {
    pub fn frontal() -> Self {
        Self::default()
    }

    /// JSON object `{stem: [roll, pitch, yaw]}`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: HashMap<String, [f64; 3]> = serde_json::from_str(&text)?;
        let mut by_stem = HashMap::new();
        for (k, [r, p, y]) in raw {
            by_stem.insert(k, PoseAngles::new(r, p, y)?);
        }
        Ok(Self {
            default: PoseAngles::default(),
            by_stem,
        })
    }
}

impl PoseEstimator for FixedPose {
    fn estimate(&self, image: &Image) -> PoseAngles {
        image
            .provenance()
            .and_then(|p| p.file_stem())
            .and_then(|s| self.by_stem.get(s.to_string_lossy().as_ref()))
            .copied()
            .unwrap_or(self.default)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Landmarks whose eye points span `[x0, x0+w] × [y0, y0+h]`; the other
    /// points sit at the box centre.
    fn eye_box(x0: f64, y0: f64, w: f64, h: f64) -> LandmarkSet {
        let c = [x0 + w / 2.0, y0 + h / 2.0];
        let mut pts = vec![c; NUM_LANDMARKS];
        pts[36] = [x0, y0];
        pts[39] = [x0 + w, y0 + h];
        LandmarkSet::new(pts).unwrap()
    }

    fn gradient_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x, c| ((y * 7 + x * 3 + c * 11) % 17) as f64 / 16.0).unwrap()
    }

    #[test]
    fn full_frame_eye_box_hides_nothing() {
        let lm = eye_box(0.0, 0.0, 256.0, 256.0);
        let m = build_periocular_mask(&lm, (256, 256), &MarginConfig::zero()).unwrap();
        assert_eq!(m.coverage(), 0.0);
    }

    #[test]
    fn eye_box_coverage_matches_pixel_count() {
        let lm = eye_box(96.0, 100.0, 64.0, 16.0);
        let m = build_periocular_mask(&lm, (256, 256), &MarginConfig::zero()).unwrap();
        let oracle = 1.0 - (64.0 * 16.0) / (256.0 * 256.0);
        assert_eq!(m.coverage(), oracle);
        let win = m.visible_window().unwrap();
        assert_eq!((win.width, win.height), (64, 16));
    }

    #[test]
    fn default_margins_hide_about_three_quarters() {
        let lm = TemplateLandmarks::for_dims(256, 256);
        let m = build_periocular_mask(&lm, (256, 256), &MarginConfig::default()).unwrap();
        assert!((0.70..=0.80).contains(&m.coverage()), "coverage {}", m.coverage());
    }

    #[test]
    fn out_of_bounds_and_degenerate_windows_are_rejected() {
        let lm = eye_box(200.0, 10.0, 100.0, 10.0);
        assert!(matches!(
            build_periocular_mask(&lm, (256, 256), &MarginConfig::zero()),
            Err(Error::InvalidLandmarks(_))
        ));
        let gt = gradient_image(256, 256);
        assert!(matches!(
            crop_periocular(&gt, &lm, &MarginConfig::zero(), (16, 32)),
            Err(Error::InvalidLandmarks(_))
        ));
        let point = LandmarkSet::new(vec![[50.0, 50.0]; NUM_LANDMARKS]).unwrap();
        assert!(matches!(
            build_periocular_mask(&point, (256, 256), &MarginConfig::default()),
            Err(Error::DegenerateMask(_))
        ));
    }

    #[test]
    fn hadamard_on_two_by_two() {
        let gt = Image::from_fn(2, 2, |y, x, c| (1 + y * 2 + x) as f64 / 8.0 + c as f64 / 10.0).unwrap();
        let m = Mask::from_bits(2, 2, vec![1, 0, 0, 1]).unwrap();
        let out = apply_mask(&gt, &m).unwrap();
        for c in 0..3 {
            assert_eq!(out.get(0, 0, c), gt.get(0, 0, c));
            assert_eq!(out.get(0, 1, c), 0.0);
            assert_eq!(out.get(1, 0, c), 0.0);
            assert_eq!(out.get(1, 1, c), gt.get(1, 1, c));
        }
    }

    #[test]
    fn all_ones_and_all_zeros_masks() {
        let gt = gradient_image(8, 8);
        assert_eq!(apply_mask(&gt, &Mask::ones(8, 8).unwrap()).unwrap(), gt);
        let black = apply_mask(&gt, &Mask::zeros(8, 8).unwrap()).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));
        assert!(apply_mask(&gt, &Mask::ones(8, 9).unwrap()).is_err());
    }

    #[test]
    fn crop_of_whole_frame_is_a_resized_copy() {
        let gt = gradient_image(32, 32);
        let lm = eye_box(0.0, 0.0, 32.0, 32.0);
        let crop = crop_periocular(&gt, &lm, &MarginConfig::zero(), (32, 32)).unwrap();
        assert_eq!(crop.data(), gt.data());
        let small = crop_periocular(&gt, &lm, &MarginConfig::zero(), (16, 16)).unwrap();
        assert_eq!(small.data(), gt.resized(16, 16).data());
    }

    #[test]
    fn crop_matches_index_slice() {
        let gt = gradient_image(256, 256);
        let lm = eye_box(96.0, 100.0, 64.0, 16.0);
        let win = periocular_window(&lm, gt.dims(), &MarginConfig::zero()).unwrap();
        let crop = gt.crop(win).unwrap();
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..64 {
                    assert_eq!(crop.get(y, x, c), gt.get(100 + y, 96 + x, c));
                }
            }
        }
        // The resize step is identity when the target matches the window.
        let same = crop_periocular(&gt, &lm, &MarginConfig::zero(), (16, 64)).unwrap();
        assert_eq!(same.data(), crop.data());
    }

    #[test]
    fn pose_filter_boundary() {
        let lm = TemplateLandmarks::for_dims(64, 64);
        assert!(filter_sample(&PoseAngles::default(), Some(&lm)));
        assert!(!filter_sample(&PoseAngles::new(0.0, 0.0, 46.0).unwrap(), Some(&lm)));
        assert!(!filter_sample(&PoseAngles::new(-45.5, 0.0, 0.0).unwrap(), Some(&lm)));
        // Strict "more than 45°": the boundary is kept. An inclusive reading
        // would reject it; this pins which one is implemented.
        let boundary = PoseAngles::new(0.0, 0.0, 45.0).unwrap();
        assert!(filter_sample(&boundary, Some(&lm)));
        let inclusive = |p: &PoseAngles| p.max_abs() < MAX_POSE_DEGREES;
        assert!(!inclusive(&boundary));
        assert!(!filter_sample(&PoseAngles::default(), None));
        assert!(PoseAngles::new(181.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn landmark_json_round_trip_and_validation() {
        let lm = TemplateLandmarks::for_dims(256, 256);
        let back = LandmarkSet::from_json(&lm.to_json().unwrap()).unwrap();
        assert_eq!(back, lm);
        assert!(LandmarkSet::from_json("[[1,2],[3,4]]").is_err());
        assert!(lm.in_bounds(256, 256));
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_image(9, 13);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!(back.data(), img.quantized().data());
        let m = build_periocular_mask(&eye_box(2.0, 3.0, 6.0, 2.0), (9, 13), &MarginConfig::zero()).unwrap();
        let mp = dir.path().join("m.png");
        m.save_png(&mp).unwrap();
        assert_eq!(Mask::load_png(&mp).unwrap(), m);
    }

    fn arb_mask() -> impl Strategy<Value = (Image, Mask)> {
        (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(0.0f64..=1.0, 3 * h * w),
                proptest::collection::vec(0u8..=1, h * w),
            )
                .prop_map(move |(px, bits)| (Image::new(h, w, px).unwrap(), Mask::from_bits(h, w, bits).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn masking_is_idempotent_and_preserves_known_pixels((img, mask) in arb_mask()) {
            let once = apply_mask(&img, &mask).unwrap();
            let twice = apply_mask(&once, &mask).unwrap();
            prop_assert_eq!(&once, &twice);
            for y in 0..img.height() {
                for x in 0..img.width() {
                    for c in 0..3 {
                        if mask.get(y, x) == 1 {
                            prop_assert_eq!(once.get(y, x, c).to_bits(), img.get(y, x, c).to_bits());
                        }
                    }
                }
            }
            prop_assert!((mask.coverage() + mask.visible_fraction() - 1.0).abs() < 1e-15);
        }

        #[test]
        fn crop_then_paste_restores_window(x0 in 0.0f64..40.0, y0 in 0.0f64..40.0, w in 1.0f64..20.0, h in 1.0f64..20.0) {
            let gt = gradient_image(64, 64);
            let lm = eye_box(x0, y0, w, h);
            let win = periocular_window(&lm, gt.dims(), &MarginConfig::zero()).unwrap();
            let crop = gt.crop(win).unwrap();
            let mut canvas = vec![0.0; gt.data().len()];
            for c in 0..3 {
                for y in 0..win.height {
                    for x in 0..win.width {
                        canvas[(c * 64 + win.top + y) * 64 + win.left + x] = crop.get(y, x, c);
                    }
                }
            }
            let pasted = Image::new(64, 64, canvas).unwrap();
            let mask = Mask::from_window(64, 64, win).unwrap();
            prop_assert_eq!(pasted, apply_mask(&gt, &mask).unwrap());
        }
    }
}
