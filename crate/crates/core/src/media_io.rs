//! Frame sequences on disk and in memory.
//!
//! Frames are stored planar (channel, row, column) as `f64` in `[0, 1]`,
//! decoded from 8-bit PNG files. Sequences on disk are folders of
//! `%08d.png` files; ordering is always the lexicographic filename order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::train::Optimizer;

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// An RGB frame, planar layout `[3][height][width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbFrame {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbFrame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape(format!(
                "rgb frame {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(height * width));
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Same gray value in all three channels.
    pub fn from_gray(gray: &GrayMap) -> Self {
        let mut data = Vec::with_capacity(3 * gray.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&gray.data);
        }
        Self {
            height: gray.height,
            width: gray.width,
            data,
        }
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Round-half-up to 255 levels, the inverse of the PNG decode.
    pub fn quantize(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }

    /// Top-left crop.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width {
            return Err(Error::shape(format!(
                "cannot crop {}x{} frame to {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |c, y, x| self.get(c, y, x)))
    }
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Single-channel map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "gray map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Index with coordinates clamped into the map (replicate padding).
    pub fn get_clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Divide by the maximum; a map whose maximum is not positive becomes all zeros.
    pub fn normalized_by_max(&self) -> Self {
        let max = self.max();
        if max > 0.0 {
            self.map(|v| v / max)
        } else {
            Self::zeros(self.height, self.width)
        }
    }

    pub fn quantize(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }
}

/// BT.601 luma of an RGB frame.
pub fn to_gray(frame: &RgbFrame) -> GrayMap {
    let (r, g, b) = (frame.channel(0), frame.channel(1), frame.channel(2));
    let data = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| {
            // Summed blue-first so that white maps to exactly 1.0.
            (LUMA_WEIGHTS[2] * b + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[0] * r).clamp(0.0, 1.0)
        })
        .collect();
    GrayMap {
        height: frame.height,
        width: frame.width,
        data,
    }
}

/// Ordered frames of equal size with a designated center.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<RgbFrame>,
    center_index: usize,
}

impl FrameSequence {
    /// Center defaults to `len / 2`.
    pub fn new(frames: Vec<RgbFrame>) -> Result<Self> {
        let center = frames.len() / 2;
        Self::with_center(frames, center)
    }

    pub fn with_center(frames: Vec<RgbFrame>, center_index: usize) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("frame sequence cannot be empty"))?;
        let dims = first.dims();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dims() != dims) {
            return Err(Error::shape(format!(
                "frame {i} is {}x{}, frame 0 is {}x{}",
                f.height, f.width, dims.0, dims.1
            )));
        }
        if center_index >= frames.len() {
            return Err(Error::invalid(format!(
                "center index {center_index} out of range for {} frames",
                frames.len()
            )));
        }
        Ok(Self {
            frames,
            center_index,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[RgbFrame] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &RgbFrame {
        &self.frames[i]
    }

    pub fn center_index(&self) -> usize {
        self.center_index
    }

    pub fn center(&self) -> &RgbFrame {
        &self.frames[self.center_index]
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    pub fn into_frames(self) -> Vec<RgbFrame> {
        self.frames
    }

    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        let frames = self
            .frames
            .iter()
            .map(|f| f.crop(height, width))
            .collect::<Result<Vec<_>>>()?;
        Self::with_center(frames, self.center_index)
    }
}

/// Files in `dir` whose name matches the glob `pattern`, in lexicographic
/// filename order. An empty match is an error.
pub fn list_frames(dir: &Path, pattern: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    let matcher = glob::Pattern::new(pattern)
        .map_err(|e| Error::invalid(format!("bad filename pattern `{pattern}`: {e}")))?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| matcher.matches(n))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptySequence {
            dir: dir.to_path_buf(),
            pattern: pattern.to_string(),
        });
    }
    Ok(paths)
}

/// Load every file in `dir` whose name matches the glob `pattern`, in
/// lexicographic filename order.
pub fn load_sequence(dir: &Path, pattern: &str) -> Result<FrameSequence> {
    let paths = list_frames(dir, pattern)?;
    let mut frames = Vec::with_capacity(paths.len());
    for path in &paths {
        let frame = load_frame(path)?;
        if let Some(first) = frames.first() {
            let first: &RgbFrame = first;
            if first.dims() != frame.dims() {
                return Err(Error::FrameSize {
                    path: path.clone(),
                    want_w: first.width,
                    want_h: first.height,
                    got_w: frame.width,
                    got_h: frame.height,
                });
            }
        }
        frames.push(frame);
    }
    FrameSequence::new(frames)
}

pub fn load_frame(path: &Path) -> Result<RgbFrame> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[(c * h + y) * w + x] = px[c] as f64 / 255.0;
        }
    }
    RgbFrame::new(h, w, data)
}

fn encode_rgb_png(frame: &RgbFrame) -> Result<Vec<u8>> {
    let (h, w) = frame.dims();
    let q = frame.quantize();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| q[(c * h + y) * w + x]))
    });
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("png encode: {e}")))?;
    Ok(bytes)
}

fn encode_gray_png(map: &GrayMap) -> Result<Vec<u8>> {
    let (h, w) = map.dims();
    let q = map.quantize();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([q[y as usize * w + x as usize]])
    });
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("png encode: {e}")))?;
    Ok(bytes)
}

/// Write `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_frame(path: &Path, frame: &RgbFrame) -> Result<()> {
    write_atomic(path, &encode_rgb_png(frame)?)
}

pub fn save_gray(path: &Path, map: &GrayMap) -> Result<()> {
    write_atomic(path, &encode_gray_png(map)?)
}

/// Zero-padded frame filename, `%08d.png`.
pub fn frame_name(index: usize) -> String {
    format!("{index:08}.png")
}

/// Write a sequence as `00000000.png`, `00000001.png`, ...
pub fn save_sequence(dir: &Path, seq: &FrameSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in seq.frames().iter().enumerate() {
        save_frame(&dir.join(frame_name(i)), frame)?;
    }
    Ok(())
}

/// One clip per frame of `seq`, each centered on that frame; indices that
/// fall outside the sequence are replaced by the nearest boundary frame.
pub fn window_clips(seq: &FrameSequence, window: usize) -> Result<Vec<FrameSequence>> {
    if window % 2 == 0 || window > seq.len() {
        return Err(Error::Window {
            window,
            len: seq.len(),
        });
    }
    let half = (window / 2) as isize;
    let last = seq.len() as isize - 1;
    (0..seq.len() as isize)
        .map(|center| {
            let frames = (center - half..=center + half)
                .map(|i| seq.frames[i.clamp(0, last) as usize].clone())
                .collect();
            FrameSequence::with_center(frames, half as usize)
        })
        .collect()
}

/// Where the center-frame optical flow comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum FlowSource {
    /// Built-in block matcher between the center frame and its successor.
    Estimator,
    /// Precomputed `.flo` file.
    File(PathBuf),
}

/// Run parameters shared by the command line tools.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub window: usize,
    pub crop: usize,
    pub seed: u64,
    pub lambda: f64,
    pub epsilon: f64,
    pub flow_source: FlowSource,
    pub channels: usize,
    pub blocks: usize,
    pub reduction: usize,
    pub steps: usize,
    pub step_size: f64,
    pub optimizer: Optimizer,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            output: None,
            target: None,
            window: 5,
            crop: 64,
            seed: 0,
            lambda: 0.1,
            epsilon: 1e-6,
            flow_source: FlowSource::Estimator,
            channels: 128,
            blocks: 4,
            reduction: 16,
            steps: 500,
            step_size: 1e-4,
            optimizer: Optimizer::Adam,
        }
    }
}

impl RunConfig {
    /// Parse a `key = value` file. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: n + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Config {
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::invalid(format!("`{key}`: cannot parse `{value}`")))
        }
        match key {
            "input" => self.input = Some(value.into()),
            "output" => self.output = Some(value.into()),
            "target" => self.target = Some(value.into()),
            "window" => self.window = num(key, value)?,
            "crop" => self.crop = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "flow" => {
                self.flow_source = match value {
                    "estimator" => FlowSource::Estimator,
                    path => FlowSource::File(path.into()),
                }
            }
            "channels" => self.channels = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "reduction" => self.reduction = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "step_size" => self.step_size = num(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            _ => return Err(Error::invalid(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 {
            return Err(Error::invalid(format!("window {} must be odd", self.window)));
        }
        if !(self.lambda >= 0.0) || !(self.epsilon >= 0.0) {
            return Err(Error::invalid("lambda and epsilon must be nonnegative"));
        }
        if !(self.step_size >= 0.0) {
            return Err(Error::invalid("step_size must be nonnegative"));
        }
        if self.crop == 0 || self.crop % 4 != 0 {
            return Err(Error::invalid(format!(
                "crop {} must be a positive multiple of 4",
                self.crop
            )));
        }
        if self.reduction == 0 || self.channels % self.reduction != 0 || self.channels % 4 != 0 {
            return Err(Error::invalid(format!(
                "channels {} must be divisible by 4 and by reduction {}",
                self.channels, self.reduction
            )));
        }
        Ok(())
    }
}
