//! Heterogeneous prior maps and the blur reasoning vector.
//!
//! Every spatial filter here samples outside the image with replicate
//! padding. All maps are normalized into `[0, 1]`; a map with no positive
//! response normalizes to all zeros.

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::media_io::{to_gray, FrameSequence, GrayMap};
use crate::nn::Tensor;

/// Variance clamp applied before inverting Laplacian variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Number of frames in a model input window.
pub const WINDOW: usize = 5;

fn check_min_size(gray: &GrayMap, min: usize, what: &str) -> Result<()> {
    let (h, w) = gray.dims();
    if h < min || w < min {
        return Err(Error::shape(format!(
            "{what} needs at least {min}x{min} pixels, got {h}x{w}"
        )));
    }
    Ok(())
}

const NEIGHBORS_4: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Local contrast: mean squared difference to the four neighbors, then
/// divided by the map maximum.
pub fn contrast_map(gray: &GrayMap) -> Result<GrayMap> {
    check_min_size(gray, 2, "contrast map")?;
    let (h, w) = gray.dims();
    let raw = GrayMap::from_fn(h, w, |y, x| {
        let center = gray.get(y, x);
        NEIGHBORS_4
            .iter()
            .map(|&(dy, dx)| {
                let d = center - gray.get_clamped(y as isize + dy, x as isize + dx);
                d * d
            })
            .sum::<f64>()
            / 4.0
    });
    Ok(raw.normalized_by_max())
}

/// Signed forward-difference structure response
/// `[G(p,q) - G(p+1,q)] + [G(p,q) - G(p,q+1)]`, with `p` the row and `q`
/// the column.
pub fn gradient_raw(gray: &GrayMap) -> Result<GrayMap> {
    check_min_size(gray, 2, "gradient map")?;
    let (h, w) = gray.dims();
    Ok(GrayMap::from_fn(h, w, |y, x| {
        let g = gray.get(y, x);
        let (yi, xi) = (y as isize, x as isize);
        (g - gray.get_clamped(yi + 1, xi)) + (g - gray.get_clamped(yi, xi + 1))
    }))
}

/// `|gradient_raw| / max |gradient_raw|`.
pub fn gradient_map(gray: &GrayMap) -> Result<GrayMap> {
    Ok(gradient_raw(gray)?.map(f64::abs).normalized_by_max())
}

/// Motion slices for a clip: absolute gray difference to the center for
/// every neighbor, and normalized flow magnitude at the center slot.
pub fn motion_group(clip: &FrameSequence, center_flow: &FlowField) -> Result<Vec<GrayMap>> {
    if clip.dims() != center_flow.dims() {
        return Err(Error::shape(format!(
            "flow is {:?}, frames are {:?}",
            center_flow.dims(),
            clip.dims()
        )));
    }
    let t = clip.center_index();
    let center = to_gray(clip.center());
    Ok(clip
        .frames()
        .iter()
        .enumerate()
        .map(|(i, frame)| {
            if i == t {
                center_flow.magnitude().normalized_by_max()
            } else {
                let other = to_gray(frame);
                let data = center
                    .data()
                    .iter()
                    .zip(other.data())
                    .map(|(a, b)| (a - b).abs())
                    .collect();
                GrayMap::new(center.height(), center.width(), data)
                    .expect("same dims")
                    .normalized_by_max()
            }
        })
        .collect())
}

/// 3x3 Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` with replicate padding.
pub fn laplacian(gray: &GrayMap) -> GrayMap {
    let (h, w) = gray.dims();
    GrayMap::from_fn(h, w, |y, x| {
        let (yi, xi) = (y as isize, x as isize);
        NEIGHBORS_4
            .iter()
            .map(|&(dy, dx)| gray.get_clamped(yi + dy, xi + dx))
            .sum::<f64>()
            - 4.0 * gray.get(y, x)
    })
}

/// Population variance of the Laplacian response; lower means blurrier.
pub fn laplacian_blur_score(gray: &GrayMap) -> Result<f64> {
    check_min_size(gray, 3, "laplacian blur score")?;
    let lap = laplacian(gray);
    let n = lap.data().len() as f64;
    let mean = lap.mean();
    Ok(lap.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}

/// Per-frame sharpness weights: proportional to inverse Laplacian
/// variance, scaled so the five weights sum to 5.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlurReasoningVector([f64; WINDOW]);

impl BlurReasoningVector {
    pub fn from_variances(variances: [f64; WINDOW]) -> Self {
        let inv = variances.map(|v| 1.0 / v.max(VARIANCE_FLOOR));
        let total: f64 = inv.iter().sum();
        Self(inv.map(|x| WINDOW as f64 * x / total))
    }

    /// Wrap raw weights without normalization; used for ablations and tests.
    pub fn from_weights(weights: [f64; WINDOW]) -> Self {
        Self(weights)
    }

    pub fn uniform() -> Self {
        Self([1.0; WINDOW])
    }

    pub fn weights(&self) -> &[f64; WINDOW] {
        &self.0
    }
}

/// Laplacian variances of the five clip frames, in clip order.
pub fn clip_variances(clip: &FrameSequence) -> Result<[f64; WINDOW]> {
    if clip.len() != WINDOW {
        return Err(Error::shape(format!(
            "blur reasoning needs {WINDOW} frames, got {}",
            clip.len()
        )));
    }
    let mut out = [0.0; WINDOW];
    for (slot, frame) in out.iter_mut().zip(clip.frames()) {
        *slot = laplacian_blur_score(&to_gray(frame))?;
    }
    Ok(out)
}

pub fn blur_reasoning_vector(clip: &FrameSequence) -> Result<BlurReasoningVector> {
    Ok(BlurReasoningVector::from_variances(clip_variances(clip)?))
}

/// The three prior groups of a clip, each one map per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorStack {
    pub contrast: Vec<GrayMap>,
    pub gradient: Vec<GrayMap>,
    pub motion: Vec<GrayMap>,
}

impl PriorStack {
    pub fn from_clip(clip: &FrameSequence, center_flow: &FlowField) -> Result<Self> {
        let grays: Vec<GrayMap> = clip.frames().iter().map(to_gray).collect();
        let contrast = grays.iter().map(contrast_map).collect::<Result<_>>()?;
        let gradient = grays.iter().map(gradient_map).collect::<Result<_>>()?;
        let motion = motion_group(clip, center_flow)?;
        Ok(Self {
            contrast,
            gradient,
            motion,
        })
    }

    pub fn depth(&self) -> usize {
        self.contrast.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.contrast[0].dims()
    }

    /// Groups in fixed order: contrast, gradient, motion.
    pub fn groups(&self) -> [&[GrayMap]; 3] {
        [&self.contrast, &self.gradient, &self.motion]
    }

    /// Tensor view `[3, depth, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = self.dims();
        let depth = self.depth();
        let mut data = Vec::with_capacity(3 * depth * h * w);
        for group in self.groups() {
            for map in group {
                data.extend_from_slice(map.data());
            }
        }
        Tensor::new(vec![3, depth, h, w], data).expect("consistent prior stack")
    }
}
