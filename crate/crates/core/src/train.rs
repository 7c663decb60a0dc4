//! Toy-scale training and inference drivers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{attention_map, estimate_flow_coarse, AttentionMap, FlowField};
use crate::loss::{total_loss_graph, LossWeights, PerceptualExtractor};
use crate::media_io::{quantize_u8, to_gray, window_clips, FrameSequence, RgbFrame};
use crate::model::{clip_constants, ClipVars, PromotionModel};
use crate::nn::{Graph, Tensor};
use crate::priors::{blur_reasoning_vector, BlurReasoningVector, PriorStack, WINDOW};
use crate::synthesis::{synthesize_blur, CrfParams, SynthSpec};

/// Block size of the built-in flow estimator used by the drivers.
pub const FLOW_BLOCK: usize = 8;
/// Search radius of the built-in flow estimator used by the drivers.
pub const FLOW_RADIUS: usize = 4;

/// Flow from the center frame of `clip` to the frame after it.
pub fn estimate_center_flow(clip: &FrameSequence) -> Result<FlowField> {
    let t = clip.center_index();
    let next = (t + 1).min(clip.len() - 1);
    estimate_flow_coarse(
        &to_gray(clip.frame(t)),
        &to_gray(clip.frame(next)),
        FLOW_BLOCK,
        FLOW_RADIUS,
    )
}

/// Everything the model and loss need for one 5-frame clip.
#[derive(Clone, Debug)]
pub struct TrainingClip {
    pub clip: FrameSequence,
    pub target: RgbFrame,
    pub flow: FlowField,
    pub priors: PriorStack,
    pub blur: BlurReasoningVector,
    pub attention: AttentionMap,
}

impl TrainingClip {
    pub fn new(clip: FrameSequence, target: RgbFrame, flow: FlowField) -> Result<Self> {
        if clip.len() != WINDOW {
            return Err(Error::shape(format!(
                "training clip needs {WINDOW} frames, got {}",
                clip.len()
            )));
        }
        if target.dims() != clip.dims() {
            return Err(Error::shape(format!(
                "target {:?} does not match clip {:?}",
                target.dims(),
                clip.dims()
            )));
        }
        let priors = PriorStack::from_clip(&clip, &flow)?;
        let blur = blur_reasoning_vector(&clip)?;
        let attention = attention_map(&flow);
        Ok(Self {
            clip,
            target,
            flow,
            priors,
            blur,
            attention,
        })
    }

    pub fn with_estimated_flow(clip: FrameSequence, target: RgbFrame) -> Result<Self> {
        let flow = estimate_center_flow(&clip)?;
        Self::new(clip, target, flow)
    }
}

/// A procedurally textured scene: a slowly panning background and a
/// faster square moving across it. Values stay inside `[0.05, 0.95]`.
pub fn toy_scene(size: usize, frames: usize, seed: u64) -> FrameSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.15..0.6),
                rng.gen_range(0.15..0.6),
                rng.gen_range(0.0..std::f64::consts::TAU),
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            )
        })
        .collect();
    let tone: [f64; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let object: [f64; 3] = tone.map(|t| if t > 0.5 { 0.1 } else { 0.9 });
    let side = size / 3;
    let top = size / 3;
    let background = |c: usize, y: f64, x: f64| -> f64 {
        let s: f64 = waves
            .iter()
            .map(|(fy, fx, ph, amp)| amp[c] * (fy * y + fx * x + ph).sin())
            .sum();
        tone[c] + 0.12 * s
    };
    let seq = (0..frames)
        .map(|t| {
            let pan = t as f64;
            let left = 2 + 3 * t;
            RgbFrame::from_fn(size, size, |c, y, x| {
                let inside = (top..top + side).contains(&y) && (left..left + side).contains(&x);
                let v = if inside {
                    let stripe = if ((x - left) / 3 + (y - top) / 3) % 2 == 0 { 1.0 } else { -1.0 };
                    object[c] + 0.05 * stripe
                } else {
                    background(c, y as f64, x as f64 + pan)
                };
                v.clamp(0.05, 0.95)
            })
        })
        .collect();
    FrameSequence::new(seq).expect("equal-size frames")
}

fn to_8bit(f: &RgbFrame) -> RgbFrame {
    f.map(|v| quantize_u8(v) as f64 / 255.0)
}

/// Blur a toy scene and return its middle 5-frame window with the sharp
/// center frame as target. All frames are rounded to 8-bit levels so the
/// clip survives a PNG round trip unchanged.
pub fn toy_clip(size: usize, seed: u64) -> Result<TrainingClip> {
    let sharp = toy_scene(size, WINDOW + 2, seed);
    let blurred = synthesize_blur(&sharp, SynthSpec::default(), CrfParams::default())?;
    let t = sharp.center_index();
    let clip = window_clips(&blurred, WINDOW)?.swap_remove(t);
    let clip = FrameSequence::with_center(
        clip.frames().iter().map(to_8bit).collect(),
        clip.center_index(),
    )?;
    TrainingClip::with_estimated_flow(clip, to_8bit(sharp.frame(t)))
}

/// Parameter update rule. Both are deterministic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Optimizer {
    /// Adam with betas (0.9, 0.999) and epsilon 1e-8.
    #[default]
    Adam,
    /// Plain gradient descent, `w -= step * grad`.
    Gd,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "gd" => Ok(Self::Gd),
            _ => Err(Error::invalid(format!("unknown optimizer `{s}` (adam or gd)"))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Gd => "gd",
        })
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub step_size: f64,
    pub optimizer: Optimizer,
    pub weights: LossWeights,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            step_size: 1e-4,
            optimizer: Optimizer::Adam,
            weights: LossWeights::default(),
        }
    }
}

struct Moments {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Loss values at one step, measured before that step's update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub charbonnier: f64,
    pub perceptual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<StepLog>,
    /// Loss after the last update.
    pub final_loss: StepLog,
}

fn frame_tensor(f: &RgbFrame) -> Result<Tensor> {
    Tensor::new(vec![3, f.height(), f.width()], f.data().to_vec())
}

/// Loss terms and gradients for every parameter, in store order.
pub fn loss_and_gradients(
    model: &PromotionModel,
    clip: &TrainingClip,
    ext: &PerceptualExtractor,
    weights: LossWeights,
) -> Result<(StepLog, Vec<Option<Tensor>>)> {
    evaluate(model, clip, ext, weights, true)
}

fn evaluate(
    model: &PromotionModel,
    clip: &TrainingClip,
    ext: &PerceptualExtractor,
    weights: LossWeights,
    with_grads: bool,
) -> Result<(StepLog, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let p = if with_grads {
        model.bind(&mut g)
    } else {
        model.bind_frozen(&mut g)
    };
    let frames = clip_constants(&mut g, &clip.clip)?;
    let priors = g.constant(clip.priors.to_tensor());
    let pred = model.forward_graph(
        &mut g,
        &p,
        ClipVars {
            frames: &frames,
            priors,
            blur: &clip.blur,
        },
    )?;
    let target = g.constant(frame_tensor(&clip.target)?);
    let loss = total_loss_graph(&mut g, pred, target, &clip.attention, weights, ext)?;
    let log = StepLog {
        step: 0,
        total: g.value(loss.total).item()?,
        charbonnier: g.value(loss.charbonnier).item()?,
        perceptual: g.value(loss.perceptual).item()?,
    };
    let mut grads = Vec::new();
    if with_grads {
        g.backward(loss.total)?;
        for (name, _) in model.params().iter() {
            grads.push(g.grad(p.get(name)?).cloned());
        }
    }
    Ok((log, grads))
}

/// Fit `model` to one clip with a fixed step size. `on_step` sees every
/// step's log as it is produced.
pub fn train_toy(
    model: &mut PromotionModel,
    clip: &TrainingClip,
    ext: &PerceptualExtractor,
    opts: TrainOptions,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    let mut history = Vec::with_capacity(opts.steps);
    let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
    let mut moments = Moments {
        m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
    };
    for step in 1..=opts.steps {
        let (mut log, grads) = evaluate(model, clip, ext, opts.weights, true)?;
        log.step = step;
        if !log.total.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        on_step(&log);
        history.push(log);
        let names = model.params().names();
        let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
        for (i, (name, grad)) in names.iter().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            let param = model.params_mut().get_mut(name).expect("bound from store");
            let (m, v) = (&mut moments.m[i], &mut moments.v[i]);
            for (j, (w, &d)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                match opts.optimizer {
                    Optimizer::Gd => *w -= opts.step_size * d,
                    Optimizer::Adam => {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * d;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * d * d;
                        *w -= opts.step_size * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
    let (mut final_loss, _) = evaluate(model, clip, ext, opts.weights, false)?;
    final_loss.step = opts.steps + 1;
    if !final_loss.total.is_finite() {
        return Err(Error::NonFiniteLoss(final_loss.step));
    }
    Ok(TrainReport {
        history,
        final_loss,
    })
}

/// Restore every frame of a blurry sequence. Each frame is the center of a
/// 5-frame window with replicated edges; `flows[i]`, when given, is the
/// center flow for frame `i`, otherwise it is estimated. Output is clamped
/// to `[0, 1]`.
pub fn infer_sequence(
    model: &PromotionModel,
    seq: &FrameSequence,
    flows: Option<&[FlowField]>,
) -> Result<FrameSequence> {
    let clips = if seq.len() >= WINDOW {
        window_clips(seq, WINDOW)?
    } else {
        short_clips(seq)?
    };
    if let Some(f) = flows {
        if f.len() != seq.len() {
            return Err(Error::invalid(format!(
                "{} flow fields for {} frames",
                f.len(),
                seq.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let flow = match flows {
            Some(f) => f[i].clone(),
            None => estimate_center_flow(clip)?,
        };
        let priors = PriorStack::from_clip(clip, &flow)?;
        let blur = blur_reasoning_vector(clip)?;
        out.push(model.forward(clip, &priors, &blur)?.clamped());
    }
    FrameSequence::with_center(out, seq.center_index())
}

/// Windows for sequences shorter than the model window: indices clamp to
/// the sequence ends.
fn short_clips(seq: &FrameSequence) -> Result<Vec<FrameSequence>> {
    let half = (WINDOW / 2) as isize;
    let last = seq.len() as isize - 1;
    (0..seq.len() as isize)
        .map(|c| {
            let frames = (c - half..=c + half)
                .map(|i| seq.frame(i.clamp(0, last) as usize).clone())
                .collect();
            FrameSequence::with_center(frames, WINDOW / 2)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn toy_scene_is_deterministic_and_bounded() {
        let a = toy_scene(32, 7, 3);
        assert_eq!(a, toy_scene(32, 7, 3));
        assert_ne!(a, toy_scene(32, 7, 4));
        assert!(a.frames().iter().all(|f| f.data().iter().all(|v| (0.05..=0.95).contains(v))));
    }

    #[test]
    fn zero_step_size_keeps_loss_constant() {
        let clip = toy_clip(16, 1).unwrap();
        let cfg = ModelConfig {
            channels: 16,
            blocks: 1,
            reduction: 4,
        };
        let mut model = PromotionModel::new(cfg, 2).unwrap();
        model.randomize_output(3);
        let before = model.clone();
        for optimizer in [Optimizer::Adam, Optimizer::Gd] {
            let opts = TrainOptions {
                steps: 3,
                step_size: 0.0,
                optimizer,
                ..TrainOptions::default()
            };
            let report =
                train_toy(&mut model, &clip, &PerceptualExtractor::default(), opts, |_| {}).unwrap();
            let first = report.history[0].total;
            assert!(report.history.iter().all(|s| s.total == first));
            assert_eq!(report.final_loss.total, first);
            assert_eq!(model, before);
        }
    }

    #[test]
    fn optimizer_names() {
        for o in [Optimizer::Adam, Optimizer::Gd] {
            assert_eq!(o.to_string().parse::<Optimizer>().unwrap(), o);
        }
        assert!("sgd".parse::<Optimizer>().is_err());
    }

    #[test]
    fn short_sequences_replicate() {
        let seq = FrameSequence::new(vec![RgbFrame::filled(8, 8, [0.5; 3]); 2]).unwrap();
        let clips = short_clips(&seq).unwrap();
        assert_eq!(clips.len(), 2);
        assert!(clips.iter().all(|c| c.len() == WINDOW));
    }
}
