//! Flow-weighted Charbonnier loss, feature-space perceptual distance and
//! their weighted sum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::AttentionMap;
use crate::media_io::RgbFrame;
use crate::model::kaiming_uniform;
use crate::nn::{ConvSpec, Graph, Tensor, Var};

/// Loss balance `lambda` and Charbonnier `epsilon`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            epsilon: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn new(lambda: f64, epsilon: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !(epsilon >= 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be nonnegative (lambda {lambda}, epsilon {epsilon})"
            )));
        }
        Ok(Self { lambda, epsilon })
    }
}

fn frame_tensor(f: &RgbFrame) -> Tensor {
    Tensor::new(vec![3, f.height(), f.width()], f.data().to_vec()).expect("rgb frame layout")
}

/// `mean( sqrt( ((pred - target) * (1 + w_att))^2 + epsilon ) )` over all
/// pixels and channels; `w_att` is shared by the three channels.
pub fn charbonnier_flow_graph(
    g: &mut Graph,
    pred: Var,
    target: Var,
    w_att: &AttentionMap,
    epsilon: f64,
) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    let (h, w) = w_att.dims();
    if shape.len() != 3 || shape[1..] != [h, w] {
        return Err(Error::shape(format!(
            "attention map {h}x{w} does not match prediction {shape:?}"
        )));
    }
    let weight = w_att.values().iter().map(|v| 1.0 + v).collect();
    let weight = g.constant(Tensor::new(vec![1, h, w], weight)?);
    let diff = g.sub(pred, target)?;
    let weighted = g.broadcast_mul(diff, weight)?;
    let sq = g.square(weighted);
    let shifted = g.add_scalar(sq, epsilon);
    let root = g.sqrt(shifted);
    Ok(g.mean(root))
}

pub fn charbonnier_flow(
    pred: &RgbFrame,
    target: &RgbFrame,
    w_att: &AttentionMap,
    w: LossWeights,
) -> Result<f64> {
    check_pair(pred, target)?;
    let mut g = Graph::new();
    let p = g.constant(frame_tensor(pred));
    let t = g.constant(frame_tensor(target));
    let l = charbonnier_flow_graph(&mut g, p, t, w_att, w.epsilon)?;
    g.value(l).item()
}

fn check_pair(a: &RgbFrame, b: &RgbFrame) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "frames differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Seed the stand-in perceptual network is drawn from.
pub const PERCEPTUAL_SEED: u64 = 0x5eed_f00d;

/// Small frozen convolutional feature extractor used as a perceptual
/// distance: stride-2 3x3 conv + ReLU stages, each stage's activations
/// unit-normalized across channels per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor {
    stages: Vec<(ConvSpec, Tensor)>,
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        Self::new(&[8, 16, 32, 64], PERCEPTUAL_SEED)
    }
}

impl PerceptualExtractor {
    pub fn new(channels: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(channels.len());
        let mut cin = 3;
        for &cout in channels {
            let spec = ConvSpec::new2d(cin, cout, 3).stride(2).padding(1);
            stages.push((spec, kaiming_uniform(&mut rng, &spec, false)));
            cin = cout;
        }
        Self { stages }
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Unit-normalized features of `x` (`[3, H, W]` in `[0, 1]`), one per stage.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let scaled = g.mul_scalar(x, 2.0);
        let mut h = g.add_scalar(scaled, -1.0);
        let mut out = Vec::with_capacity(self.stages.len());
        for (spec, w) in &self.stages {
            let w = g.constant(w.clone());
            let c = g.conv(h, w, None, *spec)?;
            h = g.relu(c);
            let sq = g.square(h);
            let norm2 = g.sum_axis0(sq)?;
            let norm2 = g.add_scalar(norm2, 1e-10);
            let norm = g.sqrt(norm2);
            let inv = g.recip(norm);
            out.push(g.broadcast_mul(h, inv)?);
        }
        Ok(out)
    }
}

/// Mean over stages of the mean squared difference of normalized features.
pub fn perceptual_distance_graph(
    g: &mut Graph,
    pred: Var,
    target: Var,
    ext: &PerceptualExtractor,
) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape(format!(
            "perceptual distance: {:?} vs {:?}",
            g.shape(pred),
            g.shape(target)
        )));
    }
    let fa = ext.features(g, pred)?;
    let fb = ext.features(g, target)?;
    let mut total = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let d = g.sub(a, b)?;
        let sq = g.square(d);
        let m = g.mean(sq);
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("perceptual extractor has no stages"))?;
    Ok(g.mul_scalar(total, 1.0 / ext.stage_count() as f64))
}

pub fn perceptual_distance(pred: &RgbFrame, target: &RgbFrame, ext: &PerceptualExtractor) -> Result<f64> {
    check_pair(pred, target)?;
    let mut g = Graph::new();
    let p = g.constant(frame_tensor(pred));
    let t = g.constant(frame_tensor(target));
    let d = perceptual_distance_graph(&mut g, p, t, ext)?;
    g.value(d).item()
}

/// Loss terms as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub charbonnier: Var,
    pub perceptual: Var,
}

/// `L = L_cb + lambda * L_ps`.
pub fn total_loss_graph(
    g: &mut Graph,
    pred: Var,
    target: Var,
    w_att: &AttentionMap,
    w: LossWeights,
    ext: &PerceptualExtractor,
) -> Result<LossVars> {
    let charbonnier = charbonnier_flow_graph(g, pred, target, w_att, w.epsilon)?;
    let perceptual = perceptual_distance_graph(g, pred, target, ext)?;
    let weighted = g.mul_scalar(perceptual, w.lambda);
    let total = g.add(charbonnier, weighted)?;
    Ok(LossVars {
        total,
        charbonnier,
        perceptual,
    })
}

pub fn total_loss(
    pred: &RgbFrame,
    target: &RgbFrame,
    w_att: &AttentionMap,
    w: LossWeights,
    ext: &PerceptualExtractor,
) -> Result<f64> {
    check_pair(pred, target)?;
    let mut g = Graph::new();
    let p = g.constant(frame_tensor(pred));
    let t = g.constant(frame_tensor(target));
    let l = total_loss_graph(&mut g, p, t, w_att, w, ext)?;
    g.value(l.total).item()
}
