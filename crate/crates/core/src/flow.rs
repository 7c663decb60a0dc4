//! Optical flow fields: Middlebury `.flo` I/O, color coding, the
//! flow-derived attention map and a block-matching estimator.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::media_io::{to_gray, write_atomic, GrayMap, RgbFrame};

/// Magic number at the start of every `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;

/// Per-pixel displacement in pixels per frame interval.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let n = height * width;
        if u.len() != n || v.len() != n {
            return Err(Error::shape(format!(
                "flow {height}x{width} needs {n} values per component"
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::invalid("flow contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            u,
            v,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::uniform(height, width, 0.0, 0.0)
    }

    pub fn uniform(height: usize, width: usize, u: f64, v: f64) -> Self {
        Self {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        let mut u = Vec::with_capacity(height * width);
        let mut v = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(y, x);
                u.push(a);
                v.push(b);
            }
        }
        Self {
            height,
            width,
            u,
            v,
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

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn magnitude(&self) -> GrayMap {
        let data = self.u.iter().zip(&self.v).map(|(u, v)| u.hypot(*v)).collect();
        GrayMap::new(self.height, self.width, data).expect("dimensions preserved")
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            u: self.u.iter().map(|x| x * k).collect(),
            v: self.v.iter().map(|x| x * k).collect(),
        }
    }
}

/// Parse Middlebury `.flo` bytes: magic, width, height, then row-major
/// interleaved `(u, v)` little-endian `f32` pairs.
pub fn parse_flo(bytes: &[u8]) -> std::result::Result<FlowField, String> {
    if bytes.len() < 12 {
        return Err(format!("header truncated ({} bytes)", bytes.len()));
    }
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().unwrap() };
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(format!("bad magic {magic}, expected {FLO_MAGIC}"));
    }
    let width = i32::from_le_bytes(word(4));
    let height = i32::from_le_bytes(word(8));
    if width <= 0 || height <= 0 {
        return Err(format!("nonpositive dimensions {width}x{height}"));
    }
    let (w, h) = (width as usize, height as usize);
    let need = 12 + 8 * w * h;
    if bytes.len() < need {
        return Err(format!(
            "payload truncated: {} bytes, expected {need}",
            bytes.len()
        ));
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for k in 0..w * h {
        let off = 12 + 8 * k;
        u.push(f32::from_le_bytes(word(off)) as f64);
        v.push(f32::from_le_bytes(word(off + 4)) as f64);
    }
    FlowField::new(h, w, u, v).map_err(|e| e.to_string())
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.u.len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for (u, v) in flow.u.iter().zip(&flow.v) {
        out.extend_from_slice(&(*u as f32).to_le_bytes());
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_flo(&bytes).map_err(|message| Error::Flo {
        path: path.to_path_buf(),
        message,
    })
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    write_atomic(path, &encode_flo(flow))
}

// Hue arc lengths of the Middlebury wheel: red-yellow, yellow-green,
// green-cyan, cyan-blue, blue-magenta, magenta-red.
const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;
pub const WHEEL_SIZE: usize = RY + YG + GC + CB + BM + MR;

/// The 55-entry Middlebury color wheel, channel values in `[0, 255]`.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let ramp = |i: usize, n: usize| (255 * i / n) as f64;
    let mut wheel = Vec::with_capacity(WHEEL_SIZE);
    wheel.extend((0..RY).map(|i| [255.0, ramp(i, RY), 0.0]));
    wheel.extend((0..YG).map(|i| [255.0 - ramp(i, YG), 255.0, 0.0]));
    wheel.extend((0..GC).map(|i| [0.0, 255.0, ramp(i, GC)]));
    wheel.extend((0..CB).map(|i| [0.0, 255.0 - ramp(i, CB), 255.0]));
    wheel.extend((0..BM).map(|i| [ramp(i, BM), 0.0, 255.0]));
    wheel.extend((0..MR).map(|i| [255.0, 0.0, 255.0 - ramp(i, MR)]));
    wheel
}

/// Color of direction `(u, v)` at normalized radius `rad`.
fn wheel_color(wheel: &[[f64; 3]], u: f64, v: f64, rad: f64) -> [f64; 3] {
    let angle = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (angle + 1.0) / 2.0 * (WHEEL_SIZE - 1) as f64;
    let k0 = (fk.floor() as usize).min(WHEEL_SIZE - 1);
    let k1 = (k0 + 1) % WHEEL_SIZE;
    let f = fk - k0 as f64;
    let mut rgb = [0.0; 3];
    for c in 0..3 {
        let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
        rgb[c] = if rad <= 1.0 {
            1.0 - rad * (1.0 - col)
        } else {
            col * 0.75
        };
    }
    rgb
}

/// Middlebury color coding: hue from direction, saturation from magnitude
/// relative to the largest magnitude in this field. Zero flow is white.
pub fn flow_to_color(flow: &FlowField) -> RgbFrame {
    let max_rad = flow.magnitude().max();
    let scale = if max_rad > 0.0 { max_rad } else { 1.0 };
    let wheel = color_wheel();
    let (h, w) = flow.dims();
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        let (u, v) = (flow.u[i], flow.v[i]);
        let rgb = wheel_color(&wheel, u, v, u.hypot(v) / scale);
        for c in 0..3 {
            data[c * n + i] = rgb[c];
        }
    }
    RgbFrame::new(h, w, data).expect("dimensions preserved")
}

/// Per-pixel attention weight in `[0, 1]` derived from the color-coded flow.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(GrayMap);

impl AttentionMap {
    pub fn new(map: GrayMap) -> Result<Self> {
        if map.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("attention weights must lie in [0, 1]"));
        }
        Ok(Self(map))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(GrayMap::zeros(height, width))
    }

    pub fn map(&self) -> &GrayMap {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
}

/// Color-code the flow, take its luma and min-max normalize the distance
/// from white, so still pixels get weight 0 and the most saturated ones 1.
/// A constant luma map (including zero flow) gives all zeros.
pub fn attention_map(flow: &FlowField) -> AttentionMap {
    let gray = to_gray(&flow_to_color(flow));
    let (lo, hi) = (gray.min(), gray.max());
    let span = hi - lo;
    let map = if span > 0.0 {
        gray.map(|g| ((hi - g) / span).clamp(0.0, 1.0))
    } else {
        GrayMap::zeros(gray.height(), gray.width())
    };
    AttentionMap(map)
}

/// Block-matching flow from `a` to `b`: for each `block`x`block` tile of
/// `a`, the integer displacement `(u, v)` with `|u|, |v| <= radius` that
/// minimizes the sum of absolute differences against `b` (sampled with
/// edge clamping). Ties go to the smallest displacement, then to the first
/// candidate in row-major order. The block's displacement is broadcast to
/// all of its pixels.
pub fn estimate_flow_coarse(
    a: &GrayMap,
    b: &GrayMap,
    block: usize,
    radius: usize,
) -> Result<FlowField> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "flow frames differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if block < 4 || radius < 1 {
        return Err(Error::invalid(format!(
            "block must be >= 4 and radius >= 1 (got {block}, {radius})"
        )));
    }
    let (h, w) = a.dims();
    let r = radius as isize;
    let mut candidates: Vec<(isize, isize)> = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            candidates.push((dy, dx));
        }
    }
    // Stable sort keeps row-major order among equal magnitudes, so the
    // first strict improvement wins a tie.
    candidates.sort_by_key(|&(dy, dx)| dy * dy + dx * dx);

    let mut u = vec![0.0; h * w];
    let mut v = vec![0.0; h * w];
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (ye, xe) = ((by + block).min(h), (bx + block).min(w));
            let mut best = (f64::INFINITY, 0isize, 0isize);
            for &(dy, dx) in &candidates {
                let mut sad = 0.0;
                for y in by..ye {
                    for x in bx..xe {
                        let other = b.get_clamped(y as isize + dy, x as isize + dx);
                        sad += (a.get(y, x) - other).abs();
                    }
                }
                if sad < best.0 {
                    best = (sad, dy, dx);
                }
            }
            for y in by..ye {
                for x in bx..xe {
                    u[y * w + x] = best.2 as f64;
                    v[y * w + x] = best.1 as f64;
                }
            }
        }
    }
    FlowField::new(h, w, u, v)
}
