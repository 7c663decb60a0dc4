//! Grouped 3D cross-correlation (2D is the depth-1 case), lowered to GEMM
//! through an im2col buffer per group.

use crate::error::{Error, Result};

/// Convolution hyperparameters. Axis order is `[depth, height, width]`;
/// 2D convolutions use depth kernel 1, stride 1, padding 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    pub fn new2d(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [1, kernel, kernel],
            stride: [1, 1, 1],
            padding: [0, 0, 0],
            groups: 1,
        }
    }

    pub fn new3d(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: [1, 1, 1],
            padding: [0, 0, 0],
            groups: 1,
        }
    }

    /// Same stride on the spatial axes (and depth, for 3D kernels).
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = [if self.is_2d() { 1 } else { s }, s, s];
        self
    }

    /// Zero padding on the two spatial axes.
    pub fn padding(mut self, p: usize) -> Self {
        self.padding[1] = p;
        self.padding[2] = p;
        self
    }

    pub fn depth_padding(mut self, p: usize) -> Self {
        self.padding[0] = p;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    fn is_2d(&self) -> bool {
        self.kernel[0] == 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::shape(format!(
                "channels {}->{} not divisible by {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape("convolution needs at least one channel"));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::shape(format!(
                "kernel {:?} and stride {:?} must be positive",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    /// Input channels seen by each output channel.
    pub fn group_in(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn group_out(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Weights per output channel.
    pub fn fan_in(&self) -> usize {
        self.group_in() * self.kernel.iter().product::<usize>()
    }

    /// `[out, in/groups, kh, kw]` for 2D kernels, `[out, in/groups, kd, kh, kw]` otherwise.
    pub fn weight_shape(&self, three_d: bool) -> Vec<usize> {
        let [kd, kh, kw] = self.kernel;
        if three_d {
            vec![self.out_channels, self.group_in(), kd, kh, kw]
        } else {
            vec![self.out_channels, self.group_in(), kh, kw]
        }
    }

    /// Output `[depth, height, width]` for an input of `dims`.
    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::shape(format!(
                    "kernel {:?} larger than padded input {dims:?}",
                    self.kernel
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

struct Layout {
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    /// Rows of the im2col matrix per group.
    k: usize,
    /// Output positions.
    p: usize,
}

impl Layout {
    fn new(spec: &ConvSpec, in_dims: [usize; 3]) -> Result<Self> {
        spec.validate()?;
        let out_dims = spec.output_dims(in_dims)?;
        Ok(Self {
            in_dims,
            out_dims,
            k: spec.fan_in(),
            p: out_dims.iter().product(),
        })
    }

    fn in_size(&self) -> usize {
        self.in_dims.iter().product()
    }
}

/// Fill `cols` (`k x p`) with the receptive fields of group `g`.
fn im2col(x: &[f64], spec: &ConvSpec, lay: &Layout, g: usize, cols: &mut [f64]) {
    let [d, h, w] = lay.in_dims;
    let [od, oh, ow] = lay.out_dims;
    let [kd, kh, kw] = spec.kernel;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.padding;
    let plane = lay.in_size();
    let mut row = 0;
    for ci in 0..spec.group_in() {
        let chan = &x[(g * spec.group_in() + ci) * plane..][..plane];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let dst = &mut cols[row * lay.p..(row + 1) * lay.p];
                    let mut i = 0;
                    for zd in 0..od {
                        let id = (zd * sd + a) as isize - pd as isize;
                        for zh in 0..oh {
                            let ih = (zh * sh + b) as isize - ph as isize;
                            let valid_row =
                                id >= 0 && (id as usize) < d && ih >= 0 && (ih as usize) < h;
                            let base = if valid_row {
                                (id as usize * h + ih as usize) * w
                            } else {
                                0
                            };
                            for zw in 0..ow {
                                let iw = (zw * sw + c) as isize - pw as isize;
                                dst[i] = if valid_row && iw >= 0 && (iw as usize) < w {
                                    chan[base + iw as usize]
                                } else {
                                    0.0
                                };
                                i += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-add `cols` back into the input gradient of group `g`.
fn col2im(cols: &[f64], spec: &ConvSpec, lay: &Layout, g: usize, gx: &mut [f64]) {
    let [d, h, w] = lay.in_dims;
    let [od, oh, ow] = lay.out_dims;
    let [kd, kh, kw] = spec.kernel;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.padding;
    let plane = lay.in_size();
    let mut row = 0;
    for ci in 0..spec.group_in() {
        let chan = &mut gx[(g * spec.group_in() + ci) * plane..][..plane];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let src = &cols[row * lay.p..(row + 1) * lay.p];
                    let mut i = 0;
                    for zd in 0..od {
                        let id = (zd * sd + a) as isize - pd as isize;
                        for zh in 0..oh {
                            let ih = (zh * sh + b) as isize - ph as isize;
                            if id < 0 || id as usize >= d || ih < 0 || ih as usize >= h {
                                i += ow;
                                continue;
                            }
                            let base = (id as usize * h + ih as usize) * w;
                            for zw in 0..ow {
                                let iw = (zw * sw + c) as isize - pw as isize;
                                if iw >= 0 && (iw as usize) < w {
                                    chan[base + iw as usize] += src[i];
                                }
                                i += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches; `c`
    // is exclusively borrowed and does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_input(spec: &ConvSpec, x: &[f64], in_dims: [usize; 3], w: &[f64]) -> Result<()> {
    let plane: usize = in_dims.iter().product();
    if x.len() != spec.in_channels * plane {
        return Err(Error::shape(format!(
            "conv input has {} values, expected {} channels of {in_dims:?}",
            x.len(),
            spec.in_channels
        )));
    }
    if w.len() != spec.out_channels * spec.fan_in() {
        return Err(Error::shape(format!(
            "conv weights have {} values, expected {}",
            w.len(),
            spec.out_channels * spec.fan_in()
        )));
    }
    Ok(())
}

/// Forward pass. `x` is `[in_channels, d, h, w]`, the result
/// `[out_channels, od, oh, ow]` together with `[od, oh, ow]`.
pub fn conv_forward(
    x: &[f64],
    in_dims: [usize; 3],
    spec: &ConvSpec,
    w: &[f64],
    bias: Option<&[f64]>,
) -> Result<(Vec<f64>, [usize; 3])> {
    let lay = Layout::new(spec, in_dims)?;
    check_input(spec, x, in_dims, w)?;
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::shape(format!(
                "conv bias has {} values, expected {}",
                b.len(),
                spec.out_channels
            )));
        }
    }
    let go = spec.group_out();
    let mut y = vec![0.0; spec.out_channels * lay.p];
    if let Some(b) = bias {
        for (o, row) in y.chunks_mut(lay.p).enumerate() {
            row.fill(b[o]);
        }
    }
    let mut cols = vec![0.0; lay.k * lay.p];
    for g in 0..spec.groups {
        im2col(x, spec, &lay, g, &mut cols);
        let wg = &w[g * go * lay.k..(g + 1) * go * lay.k];
        let yg = &mut y[g * go * lay.p..(g + 1) * go * lay.p];
        gemm(go, lay.k, lay.p, wg, (lay.k, 1), &cols, (lay.p, 1), 1.0, yg);
    }
    Ok((y, lay.out_dims))
}

pub(crate) struct ConvGrads {
    pub x: Option<Vec<f64>>,
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients for input (when `want_x`), weights and bias given the output
/// gradient `gy`.
pub(crate) fn conv_backward(
    x: &[f64],
    in_dims: [usize; 3],
    spec: &ConvSpec,
    w: &[f64],
    gy: &[f64],
    want_x: bool,
) -> Result<ConvGrads> {
    let lay = Layout::new(spec, in_dims)?;
    check_input(spec, x, in_dims, w)?;
    let go = spec.group_out();
    let mut gw = vec![0.0; w.len()];
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let gb = gy.chunks(lay.p).map(|row| row.iter().sum()).collect();

    let mut cols = vec![0.0; lay.k * lay.p];
    let mut gcols = if want_x {
        vec![0.0; lay.k * lay.p]
    } else {
        Vec::new()
    };
    for g in 0..spec.groups {
        let gyg = &gy[g * go * lay.p..(g + 1) * go * lay.p];
        im2col(x, spec, &lay, g, &mut cols);
        // dW = dY * cols^T
        let gwg = &mut gw[g * go * lay.k..(g + 1) * go * lay.k];
        gemm(go, lay.p, lay.k, gyg, (lay.p, 1), &cols, (1, lay.p), 0.0, gwg);
        if let Some(gx) = gx.as_mut() {
            // dcols = W^T * dY
            let wg = &w[g * go * lay.k..(g + 1) * go * lay.k];
            gemm(lay.k, go, lay.p, wg, (1, lay.k), gyg, (lay.p, 1), 0.0, &mut gcols);
            col2im(&gcols, spec, &lay, g, gx);
        }
    }
    Ok(ConvGrads {
        x: gx,
        w: gw,
        bias: gb,
    })
}
