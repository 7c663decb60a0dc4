//! The restoration network.
//!
//! Data flow for one 5-frame clip at `H x W` (both divisible by 4), with
//! `C` feature channels:
//!
//! 1. Each frame passes a shared extractor (two stride-2 3x3 convs) to
//!    `[C, H/4, W/4]`.
//! 2. The five features are stacked `[5, C, H/4, W/4]` and frame `i` is
//!    scaled by blur weight `v[i]`.
//! 3. A 1x1 conv fuses the `5C` channels back to `C`.
//! 4. The prior stack `[3, 5, H, W]` is encoded to `[C, H/4, W/4]` and
//!    multiplies the fused feature elementwise.
//! 5. `N` channel-attention residual blocks refine the result.
//! 6. Two nearest-neighbor x2 + conv stages and an output conv produce a
//!    3-channel residual that is added to the center frame.
//!
//! Frame alignment is not modelled explicitly; the fusion conv sees the
//! unaligned stack.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media_io::{FrameSequence, RgbFrame};
use crate::nn::{decode_checkpoint, encode_checkpoint, ConvSpec, Graph, Tensor, Var};
use crate::priors::{BlurReasoningVector, PriorStack, WINDOW};

/// Channels produced by the prior encoder's fusion conv in the reference
/// configuration.
pub const PRIOR_FEATURE_CHANNELS: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub blocks: usize,
    pub reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: PRIOR_FEATURE_CHANNELS,
            blocks: 4,
            reduction: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || c % 4 != 0 {
            return Err(Error::invalid(format!("channels {c} must be a positive multiple of 4")));
        }
        if self.reduction == 0 || c % self.reduction != 0 {
            return Err(Error::invalid(format!(
                "channels {c} not divisible by reduction {}",
                self.reduction
            )));
        }
        Ok(())
    }
}

/// The grouped 3D prior encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PriorEncoder {
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub fuse: ConvSpec,
}

impl PriorEncoder {
    pub fn new(out_channels: usize) -> Self {
        Self {
            // 3 -> 9, kernel 3x5x5, groups 3; depth unpadded so 5 -> 3.
            conv1: ConvSpec::new3d(3, 9, [3, 5, 5]).padding(2).groups(3),
            // 9 -> 27, kernel 3x5x5, groups 9; depth 3 -> 1.
            conv2: ConvSpec::new3d(9, 27, [3, 5, 5]).padding(2).groups(9),
            fuse: ConvSpec::new2d(27, out_channels, 1),
        }
    }

    /// `[3, 5, H, W] -> [out, H/4, W/4]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, stack: Var) -> Result<Var> {
        let shape = g.shape(stack).to_vec();
        let &[3, 5, h, w] = shape.as_slice() else {
            return Err(Error::shape(format!(
                "prior stack must be [3, 5, H, W], got {shape:?}"
            )));
        };
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "prior stack {h}x{w} is not divisible by 4"
            )));
        }
        let x = conv(g, p, "enc.conv1", stack, self.conv1)?;
        let x = g.relu(x);
        let x = g.maxpool2d(x)?;
        let x = conv(g, p, "enc.conv2", x, self.conv2)?;
        let x = g.relu(x);
        let x = g.maxpool2d(x)?;
        let x = g.reshape(x, &[27, h / 4, w / 4])?;
        conv(g, p, "enc.fuse", x, self.fuse)
    }
}

/// Parameters bound to graph leaves for one forward pass.
#[derive(Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    /// Swap in another variable for one parameter.
    pub fn set(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b")).ok();
    g.conv(x, w, b, spec)
}

/// Channel-attention residual block:
/// `y = x + f(x) * sigmoid(up(relu(down(avgpool(f(x))))))` with
/// `f = conv_b . relu . conv_a`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaResBlock {
    pub prefix: String,
    pub channels: usize,
    pub reduction: usize,
}

impl CaResBlock {
    pub fn new(prefix: impl Into<String>, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::shape(format!(
                "channels {channels} not divisible by reduction {reduction}"
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            channels,
            reduction,
        })
    }

    fn specs(&self) -> [(&'static str, ConvSpec); 4] {
        let c = self.channels;
        let r = c / self.reduction;
        [
            ("conv_a", ConvSpec::new2d(c, c, 3).padding(1)),
            ("conv_b", ConvSpec::new2d(c, c, 3).padding(1)),
            ("gate_down", ConvSpec::new2d(c, r, 1)),
            ("gate_up", ConvSpec::new2d(r, c, 1)),
        ]
    }

    /// The residual branch `f(x)` and the channel gate.
    pub fn branch_and_gate(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let [a, b, down, up] = self.specs();
        let name = |s: &str| format!("{}.{s}", self.prefix);
        let f = conv(g, p, &name(a.0), x, a.1)?;
        let f = g.relu(f);
        let f = conv(g, p, &name(b.0), f, b.1)?;
        let s = g.global_avg_pool(f)?;
        let s = conv(g, p, &name(down.0), s, down.1)?;
        let s = g.relu(s);
        let s = conv(g, p, &name(up.0), s, up.1)?;
        let gate = g.sigmoid(s);
        Ok((f, gate))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (f, gate) = self.branch_and_gate(g, p, x)?;
        let scaled = g.broadcast_mul(f, gate)?;
        g.add(x, scaled)
    }
}

/// Scale frame `i` of an aligned feature stack `[5, C, h, w]` by `v[i]`.
pub fn apply_blur_vector(g: &mut Graph, aligned: Var, v: &BlurReasoningVector) -> Result<Var> {
    let shape = g.shape(aligned).to_vec();
    if shape.len() != 4 || shape[0] != WINDOW {
        return Err(Error::shape(format!(
            "aligned features must be [{WINDOW}, C, h, w], got {shape:?}"
        )));
    }
    let weights = g.constant(Tensor::new(vec![WINDOW, 1, 1, 1], v.weights().to_vec())?);
    g.broadcast_mul(aligned, weights)
}

/// Named parameters in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = &(String, Tensor)> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count_values(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn as_slice(&self) -> &[(String, Tensor)] {
        &self.params
    }
}

/// Layout of every conv in the network: name, spec and whether the kernel is 3D.
fn layer_table(cfg: &ModelConfig) -> Result<Vec<(String, ConvSpec, bool)>> {
    cfg.validate()?;
    let c = cfg.channels;
    let enc = PriorEncoder::new(c);
    let mut layers = vec![
        ("enc.conv1".to_string(), enc.conv1, true),
        ("enc.conv2".to_string(), enc.conv2, true),
        ("enc.fuse".to_string(), enc.fuse, false),
        ("feat.conv1".to_string(), ConvSpec::new2d(3, c / 4, 3).stride(2).padding(1), false),
        ("feat.conv2".to_string(), ConvSpec::new2d(c / 4, c, 3).stride(2).padding(1), false),
        ("fusion".to_string(), ConvSpec::new2d(WINDOW * c, c, 1), false),
    ];
    for i in 0..cfg.blocks {
        let block = CaResBlock::new(format!("blocks.{i}"), c, cfg.reduction)?;
        for (name, spec) in block.specs() {
            layers.push((format!("blocks.{i}.{name}"), spec, false));
        }
    }
    layers.push(("up1".to_string(), ConvSpec::new2d(c, c / 2, 3).padding(1), false));
    layers.push(("up2".to_string(), ConvSpec::new2d(c / 2, c / 4, 3).padding(1), false));
    layers.push(("out".to_string(), ConvSpec::new2d(c / 4, 3, 3).padding(1), false));
    Ok(layers)
}

/// Kaiming-uniform (fan-in, ReLU gain) weights, zero biases.
pub(crate) fn kaiming_uniform(rng: &mut ChaCha8Rng, spec: &ConvSpec, three_d: bool) -> Tensor {
    let shape = spec.weight_shape(three_d);
    let bound = (6.0 / spec.fan_in() as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape from spec")
}

/// Inputs of one forward pass, already placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ClipVars<'a> {
    /// Five `[3, H, W]` frames, center at index 2.
    pub frames: &'a [Var],
    /// `[3, 5, H, W]` prior stack.
    pub priors: Var,
    pub blur: &'a BlurReasoningVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromotionModel {
    config: ModelConfig,
    seed: u64,
    layers: Vec<(String, ConvSpec, bool)>,
    params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    seed: u64,
}

impl PromotionModel {
    /// Fresh weights from `seed`; the output conv starts at zero so the
    /// untrained model returns the center frame unchanged.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let layers = layer_table(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (name, spec, three_d) in &layers {
            let mut w = kaiming_uniform(&mut rng, spec, *three_d);
            if name == "out" {
                w = Tensor::zeros(w.shape());
            }
            params.push((format!("{name}.w"), w));
            params.push((format!("{name}.b"), Tensor::zeros(&[spec.out_channels])));
        }
        Ok(Self {
            config,
            seed,
            layers,
            params: ParamStore { params },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> PriorEncoder {
        PriorEncoder::new(self.config.channels)
    }

    pub fn blocks(&self) -> Vec<CaResBlock> {
        (0..self.config.blocks)
            .map(|i| {
                CaResBlock::new(format!("blocks.{i}"), self.config.channels, self.config.reduction)
                    .expect("validated config")
            })
            .collect()
    }

    fn spec(&self, name: &str) -> ConvSpec {
        self.layers
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, _)| *s)
            .expect("layer table covers every conv")
    }

    /// Re-draw the output conv with Kaiming weights (useful to exercise
    /// gradients through the whole network).
    pub fn randomize_output(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = kaiming_uniform(&mut rng, &self.spec("out"), false);
        *self.params.get_mut("out.w").expect("out.w exists") = w;
    }

    /// Register every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), g.input(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Register every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), g.constant(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Per-frame features `[C, H/4, W/4]`.
    fn frame_features(&self, g: &mut Graph, p: &Bound, frame: Var) -> Result<Var> {
        let x = conv(g, p, "feat.conv1", frame, self.spec("feat.conv1"))?;
        let x = g.relu(x);
        let x = conv(g, p, "feat.conv2", x, self.spec("feat.conv2"))?;
        Ok(g.relu(x))
    }

    /// Fused, blur-weighted feature `[C, H/4, W/4]` before the prior multiply.
    pub fn fused_features(
        &self,
        g: &mut Graph,
        p: &Bound,
        frames: &[Var],
        blur: &BlurReasoningVector,
    ) -> Result<Var> {
        let pre = self.fusion_preactivation(g, p, frames, blur)?;
        Ok(g.relu(pre))
    }

    /// The fusion conv output before its ReLU.
    pub fn fusion_preactivation(
        &self,
        g: &mut Graph,
        p: &Bound,
        frames: &[Var],
        blur: &BlurReasoningVector,
    ) -> Result<Var> {
        if frames.len() != WINDOW {
            return Err(Error::shape(format!(
                "model needs {WINDOW} frames, got {}",
                frames.len()
            )));
        }
        let c = self.config.channels;
        let mut feats = Vec::with_capacity(WINDOW);
        for &f in frames {
            let x = self.frame_features(g, p, f)?;
            let s = g.shape(x).to_vec();
            feats.push(g.reshape(x, &[1, s[0], s[1], s[2]])?);
        }
        let stacked = g.concat(&feats)?;
        let scaled = apply_blur_vector(g, stacked, blur)?;
        let s = g.shape(scaled).to_vec();
        let flat = g.reshape(scaled, &[WINDOW * c, s[2], s[3]])?;
        conv(g, p, "fusion", flat, self.spec("fusion"))
    }

    /// Restored center frame `[3, H, W]`, unclamped.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, clip: ClipVars<'_>) -> Result<Var> {
        if clip.frames.len() != WINDOW {
            return Err(Error::shape(format!(
                "model needs {WINDOW} frames, got {}",
                clip.frames.len()
            )));
        }
        let center = clip.frames[WINDOW / 2];
        let shape = g.shape(center).to_vec();
        let &[3, h, w] = shape.as_slice() else {
            return Err(Error::shape(format!("frames must be [3, H, W], got {shape:?}")));
        };
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("frame size {h}x{w} is not divisible by 4")));
        }
        if g.shape(clip.priors) != [3, WINDOW, h, w] {
            return Err(Error::shape(format!(
                "prior stack {:?} does not match frames {h}x{w}",
                g.shape(clip.priors)
            )));
        }
        let fused = self.fused_features(g, p, clip.frames, clip.blur)?;
        let prior = self.encoder().forward(g, p, clip.priors)?;
        let mut x = g.mul(fused, prior)?;
        for block in self.blocks() {
            x = block.forward(g, p, x)?;
        }
        let x = g.upsample2x(x)?;
        let x = conv(g, p, "up1", x, self.spec("up1"))?;
        let x = g.relu(x);
        let x = g.upsample2x(x)?;
        let x = conv(g, p, "up2", x, self.spec("up2"))?;
        let x = g.relu(x);
        let residual = conv(g, p, "out", x, self.spec("out"))?;
        g.add(center, residual)
    }

    /// Convenience forward pass on plain data.
    pub fn forward(
        &self,
        clip: &FrameSequence,
        stack: &PriorStack,
        blur: &BlurReasoningVector,
    ) -> Result<RgbFrame> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let frames = clip_constants(&mut g, clip)?;
        let priors = g.constant(stack.to_tensor());
        let out = self.forward_graph(
            &mut g,
            &p,
            ClipVars {
                frames: &frames,
                priors,
                blur,
            },
        )?;
        let (h, w) = clip.dims();
        RgbFrame::new(h, w, g.value(out).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let meta = serde_json::to_string(&CheckpointMeta {
            model: self.config,
            seed: self.seed,
        })
        .expect("plain struct serializes");
        encode_checkpoint(&meta, self.params.as_slice())
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let ckpt = decode_checkpoint(bytes)?;
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.meta)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let mut model = Self::new(meta.model, meta.seed)?;
        if ckpt.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, model has {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in ckpt.params {
            let slot = model
                .params
                .get_mut(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }
}

/// Frames of a clip as `[3, H, W]` graph constants.
pub fn clip_constants(g: &mut Graph, clip: &FrameSequence) -> Result<Vec<Var>> {
    let (h, w) = clip.dims();
    clip.frames()
        .iter()
        .map(|f| Ok(g.constant(Tensor::new(vec![3, h, w], f.data().to_vec())?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            channels: 16,
            blocks: 2,
            reduction: 4,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(PromotionModel::new(ModelConfig { channels: 18, blocks: 1, reduction: 2 }, 0).is_err());
        assert!(PromotionModel::new(ModelConfig { channels: 16, blocks: 1, reduction: 3 }, 0).is_err());
        assert!(CaResBlock::new("b", 16, 5).is_err());
    }

    #[test]
    fn parameter_layout() {
        let m = PromotionModel::new(ModelConfig::default(), 1).unwrap();
        let p = m.params();
        assert_eq!(p.get("enc.conv1.w").unwrap().shape(), &[9, 1, 3, 5, 5]);
        assert_eq!(p.get("enc.conv2.w").unwrap().shape(), &[27, 1, 3, 5, 5]);
        assert_eq!(p.get("enc.fuse.w").unwrap().shape(), &[128, 27, 1, 1]);
        assert_eq!(p.get("blocks.3.gate_down.w").unwrap().shape(), &[8, 128, 1, 1]);
        assert_eq!(p.get("fusion.w").unwrap().shape(), &[128, 640, 1, 1]);
        assert!(p.get("out.w").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("enc.conv1.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kaiming_bounds() {
        let m = PromotionModel::new(small(), 3).unwrap();
        let w = m.params().get("blocks.0.conv_a.w").unwrap();
        let bound = (6.0f64 / (16.0 * 9.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < bound));
        assert!(w.max_abs() > 0.5 * bound);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = PromotionModel::new(small(), 9).unwrap();
        let b = PromotionModel::new(small(), 9).unwrap();
        let c = PromotionModel::new(small(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn checkpoint_restores_model() {
        let mut m = PromotionModel::new(small(), 4).unwrap();
        m.randomize_output(5);
        let back = PromotionModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn checkpoint_shape_mismatch() {
        let m = PromotionModel::new(small(), 4).unwrap();
        let mut params = m.params().as_slice().to_vec();
        params[0].1 = Tensor::zeros(&[1]);
        let meta = r#"{"model":{"channels":16,"blocks":2,"reduction":4},"seed":4}"#;
        let bytes = encode_checkpoint(meta, &params);
        assert!(PromotionModel::from_checkpoint(&bytes).is_err());
    }

    #[test]
    fn blur_vector_length_checked() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 2, 2, 2]));
        assert!(apply_blur_vector(&mut g, x, &BlurReasoningVector::uniform()).is_err());
    }

    #[test]
    fn encoder_rejects_bad_stacks() {
        let m = PromotionModel::new(small(), 0).unwrap();
        let mut g = Graph::new();
        let p = m.bind_frozen(&mut g);
        let odd = g.constant(Tensor::zeros(&[3, 5, 10, 8]));
        assert!(m.encoder().forward(&mut g, &p, odd).is_err());
        let depth = g.constant(Tensor::zeros(&[3, 4, 8, 8]));
        assert!(m.encoder().forward(&mut g, &p, depth).is_err());
        let chans = g.constant(Tensor::zeros(&[2, 5, 8, 8]));
        assert!(m.encoder().forward(&mut g, &p, chans).is_err());
    }
}
