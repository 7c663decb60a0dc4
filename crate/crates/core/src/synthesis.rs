//! Blur synthesis by averaging virtual high-rate frames in signal space.
//!
//! Observed pixel values are mapped to linear signal with the inverse of a
//! power-law camera response `g(x) = x^(1/gamma)`, virtual frames are
//! linearly interpolated between consecutive real frames, a window of `m`
//! virtual frames centered on each real frame is averaged, and the average
//! is mapped back through `g`.

use crate::error::{Error, Result};
use crate::media_io::{FrameSequence, RgbFrame};

/// Power-law camera response.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrfParams {
    gamma: f64,
}

impl CrfParams {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Default for CrfParams {
    fn default() -> Self {
        Self { gamma: 2.2 }
    }
}

/// Virtual frame rate multiplier and number of virtual frames averaged per
/// output frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub virtual_rate_multiplier: usize,
    pub average_count: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            virtual_rate_multiplier: 8,
            average_count: 8,
        }
    }
}

/// `x^(1/gamma)`: signal to pixel value.
pub fn crf_apply(x: &RgbFrame, p: CrfParams) -> RgbFrame {
    let e = 1.0 / p.gamma;
    x.map(|v| v.powf(e))
}

/// `x^gamma`: pixel value to signal.
pub fn crf_invert(x: &RgbFrame, p: CrfParams) -> RgbFrame {
    x.map(|v| v.powf(p.gamma))
}

fn check_same_dims(a: &RgbFrame, b: &RgbFrame) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "frames differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Blend two signal-space frames at fraction `t` of the way from `a` to `b`.
fn blend_signal(a: &RgbFrame, b: &RgbFrame, t: f64) -> RgbFrame {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (1.0 - t) * x + t * y)
        .collect();
    RgbFrame::new(a.height(), a.width(), data).expect("same dims")
}

fn virtual_signal(a: &RgbFrame, b: &RgbFrame, m_up: usize) -> Vec<RgbFrame> {
    (0..m_up)
        .map(|k| {
            if k == 0 {
                a.clone()
            } else {
                blend_signal(a, b, k as f64 / m_up as f64)
            }
        })
        .collect()
}

/// The `m_up` virtual frames at fractions `k / m_up`, `k = 0..m_up`,
/// blended in signal space and re-encoded as pixel values.
pub fn interpolate_virtual(
    a: &RgbFrame,
    b: &RgbFrame,
    m_up: usize,
    p: CrfParams,
) -> Result<Vec<RgbFrame>> {
    check_same_dims(a, b)?;
    if m_up == 0 {
        return Err(Error::invalid("virtual rate multiplier must be >= 1"));
    }
    let (sa, sb) = (crf_invert(a, p), crf_invert(b, p));
    Ok(virtual_signal(&sa, &sb, m_up)
        .iter()
        .map(|s| crf_apply(s, p))
        .collect())
}

/// Signal-space virtual frames for a whole sequence. Real frame `j` sits at
/// virtual index `j * m_up`; the last real frame closes the timeline.
pub fn virtual_timeline(sharp: &FrameSequence, m_up: usize, p: CrfParams) -> Result<Vec<RgbFrame>> {
    if m_up == 0 {
        return Err(Error::invalid("virtual rate multiplier must be >= 1"));
    }
    let signal: Vec<RgbFrame> = sharp.frames().iter().map(|f| crf_invert(f, p)).collect();
    let mut out = Vec::with_capacity((signal.len() - 1) * m_up + 1);
    for pair in signal.windows(2) {
        out.extend(virtual_signal(&pair[0], &pair[1], m_up));
    }
    out.push(signal[signal.len() - 1].clone());
    Ok(out)
}

/// First virtual index of the averaging window for real frame `j`: centered
/// on `j * m_up`, shifted inward at the ends of the timeline.
pub fn window_start(j: usize, m_up: usize, m: usize, total: usize) -> usize {
    let center = j * m_up;
    let start = center.saturating_sub(m / 2);
    start.min(total - m)
}

/// Blur every frame of `sharp`. The output has one frame per input frame.
pub fn synthesize_blur(sharp: &FrameSequence, spec: SynthSpec, p: CrfParams) -> Result<FrameSequence> {
    if sharp.len() < 2 {
        return Err(Error::invalid("blur synthesis needs at least 2 sharp frames"));
    }
    let timeline = virtual_timeline(sharp, spec.virtual_rate_multiplier, p)?;
    let m = spec.average_count;
    if m == 0 || m > timeline.len() {
        return Err(Error::invalid(format!(
            "average count {m} must be in 1..={} virtual frames",
            timeline.len()
        )));
    }
    let (h, w) = sharp.dims();
    let frames = (0..sharp.len())
        .map(|j| {
            let start = window_start(j, spec.virtual_rate_multiplier, m, timeline.len());
            let mut acc = vec![0.0; 3 * h * w];
            for frame in &timeline[start..start + m] {
                for (a, v) in acc.iter_mut().zip(frame.data()) {
                    *a += v;
                }
            }
            let mean = acc.into_iter().map(|v| (v / m as f64).clamp(0.0, 1.0)).collect();
            crf_apply(&RgbFrame::new(h, w, mean).expect("same dims"), p)
        })
        .collect();
    FrameSequence::with_center(frames, sharp.center_index())
}
