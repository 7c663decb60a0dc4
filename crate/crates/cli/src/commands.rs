use std::path::{Path, PathBuf};

use promotion::flow::{estimate_flow_coarse, flow_to_color, read_flo, write_flo, FlowField};
use promotion::loss::{LossWeights, PerceptualExtractor};
use promotion::media_io::{
    list_frames, load_frame, load_sequence, save_frame, save_gray, save_sequence, to_gray,
    window_clips, write_atomic, FlowSource, FrameSequence, RunConfig,
};
use promotion::metrics::{psnr, ssim};
use promotion::model::{ModelConfig, PromotionModel};
use promotion::priors::{clip_variances, BlurReasoningVector, PriorStack, WINDOW};
use promotion::synthesis::{synthesize_blur, CrfParams, SynthSpec};
use promotion::train::{
    estimate_center_flow, infer_sequence, toy_clip, train_toy, Optimizer, TrainOptions,
    TrainingClip,
};
use serde_json::{json, Value};

use crate::{Command, Common, Failure};

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| usage(format!("--{name} is required")))
}

fn emit_json(value: &Value, out: Option<&Path>) -> Outcome {
    println!("{value}");
    if let Some(path) = out {
        let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}

/// The clip itself when it has exactly five frames, otherwise the window
/// around its middle frame.
fn center_clip(seq: FrameSequence) -> Result<FrameSequence, Failure> {
    if seq.len() == WINDOW {
        return Ok(FrameSequence::with_center(seq.into_frames(), WINDOW / 2)?);
    }
    let mid = seq.len() / 2;
    Ok(window_clips(&seq, WINDOW)?.swap_remove(mid))
}

fn png_name(path: &Path) -> PathBuf {
    PathBuf::from(path.file_name().expect("listed files have names")).with_extension("png")
}

fn center_flow(clip: &FrameSequence, file: Option<&Path>) -> Result<FlowField, Failure> {
    Ok(match file {
        Some(path) => read_flo(path)?,
        None => estimate_center_flow(clip)?,
    })
}

fn blur_json(clip: &FrameSequence) -> Result<Value, Failure> {
    let variances = clip_variances(clip)?;
    let v = BlurReasoningVector::from_variances(variances);
    Ok(json!({ "variances": variances, "weights": v.weights() }))
}

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Priors {
            input,
            out,
            flow,
            common,
        } => {
            let cfg = config(&common)?;
            let input = required(input, &cfg.input, "in")?;
            let out = required(out, &cfg.output, "out")?;
            let clip = center_clip(load_sequence(&input, &common.pattern)?)?;
            let flow = center_flow(&clip, flow.as_deref())?;
            let stack = PriorStack::from_clip(&clip, &flow)?;
            let [contrast, gradient, motion] = stack.groups();
            for (group, maps) in [("contrast", contrast), ("gradient", gradient), ("motion", motion)] {
                for (i, map) in maps.iter().enumerate() {
                    save_gray(&out.join(format!("{group}_{i}.png")), map)?;
                }
            }
            emit_json(&blur_json(&clip)?, Some(&out.join("priors.json")))
        }
        Command::Blurvec { input, out, common } => {
            let cfg = config(&common)?;
            let input = required(input, &cfg.input, "in")?;
            let clip = center_clip(load_sequence(&input, &common.pattern)?)?;
            emit_json(&blur_json(&clip)?, out.as_deref())
        }
        Command::Flow {
            a,
            b,
            block,
            radius,
            out,
            color,
            common,
        } => {
            config(&common)?;
            if block < 4 || radius < 1 {
                return Err(usage(format!(
                    "--block must be at least 4 and --radius at least 1 (got {block}, {radius})"
                )));
            }
            let ga = to_gray(&load_frame(&a)?);
            let gb = to_gray(&load_frame(&b)?);
            let field = estimate_flow_coarse(&ga, &gb, block, radius)?;
            write_flo(&out, &field)?;
            if let Some(path) = color {
                save_frame(&path, &flow_to_color(&field))?;
            }
            Ok(())
        }
        Command::Synth {
            input,
            out,
            m,
            up,
            gamma,
            common,
        } => {
            let cfg = config(&common)?;
            let input = required(input, &cfg.input, "in")?;
            let out = required(out, &cfg.output, "out")?;
            let crf = CrfParams::new(gamma).map_err(|e| usage(e.to_string()))?;
            if m == 0 || up == 0 {
                return Err(usage("--m and --up must be positive"));
            }
            let names = list_frames(&input, &common.pattern)?;
            let sharp = load_sequence(&input, &common.pattern)?;
            let spec = SynthSpec {
                virtual_rate_multiplier: up,
                average_count: m,
            };
            let blurred = synthesize_blur(&sharp, spec, crf)?;
            for (name, frame) in names.iter().zip(blurred.frames()) {
                save_frame(&out.join(png_name(name)), frame)?;
            }
            Ok(())
        }
        Command::Metrics {
            pred,
            gt,
            out,
            common,
        } => {
            config(&common)?;
            let names = list_frames(&gt, &common.pattern)?;
            let p = load_sequence(&pred, &common.pattern)?;
            let g = load_sequence(&gt, &common.pattern)?;
            if p.len() != g.len() {
                return Err(Failure::Data(promotion::Error::Shape(format!(
                    "{} predicted frames for {} ground-truth frames",
                    p.len(),
                    g.len()
                ))));
            }
            let mut per_frame = Vec::with_capacity(g.len());
            let (mut sum_p, mut sum_s) = (0.0, 0.0);
            for ((a, b), name) in p.frames().iter().zip(g.frames()).zip(&names) {
                let (ps, ss) = (psnr(a, b)?, ssim(a, b)?);
                sum_p += ps;
                sum_s += ss;
                per_frame.push(json!({
                    "frame": name.file_name().map(|n| n.to_string_lossy().into_owned()),
                    "psnr": ps,
                    "ssim": ss,
                }));
            }
            let n = g.len() as f64;
            let value = json!({
                "psnr_mean": sum_p / n,
                "ssim_mean": sum_s / n,
                "per_frame": per_frame,
            });
            emit_json(&value, out.as_deref())
        }
        Command::TrainToy {
            out,
            input,
            target,
            flow,
            steps,
            step_size,
            optimizer,
            channels,
            blocks,
            reduction,
            lambda,
            epsilon,
            crop,
            common,
        } => {
            let mut cfg = config(&common)?;
            macro_rules! set {
                ($($flag:ident),*) => { $(if let Some(v) = $flag { cfg.$flag = v; })* };
            }
            set!(steps, step_size, channels, blocks, reduction, lambda, epsilon, crop);
            if let Some(o) = optimizer {
                cfg.optimizer = o.parse::<Optimizer>().map_err(|e| usage(e.to_string()))?;
            }
            if let Some(f) = flow {
                cfg.flow_source = FlowSource::File(f);
            }
            cfg.input = input.or(cfg.input);
            cfg.target = target.or(cfg.target);
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let out = required(out, &cfg.output, "out")?;
            train(&cfg, &out, &common.pattern)
        }
        Command::Infer {
            input,
            ckpt,
            out,
            flow_dir,
            common,
        } => {
            let cfg = config(&common)?;
            let input = required(input, &cfg.input, "in")?;
            let out = required(out, &cfg.output, "out")?;
            let bytes = std::fs::read(&ckpt).map_err(|e| promotion::Error::Io {
                path: ckpt.clone(),
                source: e,
            })?;
            let model = PromotionModel::from_checkpoint(&bytes)?;
            let names = list_frames(&input, &common.pattern)?;
            let seq = load_sequence(&input, &common.pattern)?;
            let flows = match flow_dir {
                Some(dir) => Some(
                    list_frames(&dir, "*.flo")?
                        .iter()
                        .map(|p| read_flo(p))
                        .collect::<promotion::Result<Vec<_>>>()?,
                ),
                None => None,
            };
            let restored = infer_sequence(&model, &seq, flows.as_deref())?;
            for (name, frame) in names.iter().zip(restored.frames()) {
                save_frame(&out.join(png_name(name)), frame)?;
            }
            Ok(())
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

fn train(cfg: &RunConfig, out: &Path, pattern: &str) -> Outcome {
    let flow_file = match &cfg.flow_source {
        FlowSource::File(p) => Some(p.as_path()),
        FlowSource::Estimator => None,
    };
    let synthetic = cfg.input.is_none();
    let clip = match &cfg.input {
        None => {
            let toy = toy_clip(cfg.crop, cfg.seed)?;
            match flow_file {
                None => toy,
                Some(p) => TrainingClip::new(toy.clip, toy.target, read_flo(p)?)?,
            }
        }
        Some(dir) => {
            let target = cfg
                .target
                .as_ref()
                .ok_or_else(|| usage("--target is required with --in"))?;
            let seq = load_sequence(dir, pattern)?.crop(cfg.crop, cfg.crop)?;
            let clip = center_clip(seq)?;
            let target = load_frame(target)?.crop(cfg.crop, cfg.crop)?;
            let flow = center_flow(&clip, flow_file)?;
            TrainingClip::new(clip, target, flow)?
        }
    };

    let model_cfg = ModelConfig {
        channels: cfg.channels,
        blocks: cfg.blocks,
        reduction: cfg.reduction,
    };
    let mut model = PromotionModel::new(model_cfg, cfg.seed)?;
    let opts = TrainOptions {
        steps: cfg.steps,
        step_size: cfg.step_size,
        optimizer: cfg.optimizer,
        weights: LossWeights::new(cfg.lambda, cfg.epsilon).map_err(|e| usage(e.to_string()))?,
    };
    let report = train_toy(&mut model, &clip, &PerceptualExtractor::default(), opts, |s| {
        if s.step % 50 == 0 {
            eprintln!("step {} loss {:.6}", s.step, s.total);
        }
    })?;

    let mut csv = String::from("step,total,charbonnier,perceptual\n");
    for s in report.history.iter().chain([&report.final_loss]) {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            s.step,
            fmt_f64(s.total),
            fmt_f64(s.charbonnier),
            fmt_f64(s.perceptual)
        ));
    }
    let pred = model.forward(&clip.clip, &clip.priors, &clip.blur)?.clamped();
    let initial = report.history.first().map_or(report.final_loss.total, |s| s.total);
    let summary = json!({
        "steps": cfg.steps,
        "optimizer": cfg.optimizer.to_string(),
        "step_size": cfg.step_size,
        "seed": cfg.seed,
        "initial_loss": initial,
        "final_loss": report.final_loss.total,
        "loss_ratio": report.final_loss.total / initial,
        "psnr_input": psnr(clip.clip.center(), &clip.target)?,
        "psnr_output": psnr(&pred, &clip.target)?,
    });

    write_atomic(&out.join("checkpoint.bin"), &model.to_checkpoint())?;
    write_atomic(&out.join("loss.csv"), csv.as_bytes())?;
    save_frame(&out.join("pred.png"), &pred)?;
    if synthetic {
        save_sequence(&out.join("clip"), &clip.clip)?;
        save_frame(&out.join("target.png"), &clip.target)?;
    }
    emit_json(&summary, Some(&out.join("summary.json")))
}
