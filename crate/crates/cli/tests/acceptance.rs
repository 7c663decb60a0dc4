use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use promotion::flow::{attention_map, AttentionMap, FlowField};
use promotion::loss::{
    charbonnier_flow, perceptual_distance, total_loss, total_loss_graph, LossWeights,
    PerceptualExtractor,
};
use promotion::media_io::{load_frame, load_sequence, to_gray, FrameSequence, RgbFrame};
use promotion::metrics::{psnr, ssim};
use promotion::model::{ClipVars, ModelConfig, PromotionModel};
use promotion::nn::{conv_forward, grad_check, ConvSpec, Graph, Tensor, Var};
use promotion::priors::{blur_reasoning_vector, laplacian_blur_score, BlurReasoningVector};
use promotion::synthesis::{synthesize_blur, CrfParams, SynthSpec};
use promotion::train::estimate_center_flow;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

fn random_frame(r: &mut ChaCha8Rng, h: usize, w: usize) -> RgbFrame {
    RgbFrame::new(h, w, (0..3 * h * w).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

// Gradient correctness

const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn project(g: &mut Graph, y: Var, seed: u64) -> promotion::Result<Var> {
    let r = g.constant(random_tensor(&mut rng(seed), g.shape(y), -1.0, 1.0));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn op_error(x: &Tensor, f: impl Fn(&mut Graph, Var) -> promotion::Result<Var>) -> Result<f64, String> {
    ok(grad_check(|g, v| { let y = f(g, v)?; project(g, y, 7) }, x, GRAD_STEP))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let (mut checks, mut skipped) = (0, 0);
    for seed in 0..5 {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
        let pos = random_tensor(&mut r, &[2, 3, 4], 0.2, 2.0);
        let other = random_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
        let row = random_tensor(&mut r, &[2, 1, 4], -1.0, 1.0);
        let y = random_tensor(&mut r, &[1, 3, 4], -1.0, 1.0);
        let mut cases: Vec<(&str, f64)> = vec![
            ("add", op_error(&x, |g, v| { let o = g.constant(other.clone()); g.add(v, o) })?),
            ("sub", op_error(&x, |g, v| { let o = g.constant(other.clone()); g.sub(o, v) })?),
            ("mul", op_error(&x, |g, v| { let o = g.constant(other.clone()); g.mul(v, o) })?),
            ("broadcast_mul", op_error(&x, |g, v| { let b = g.constant(row.clone()); g.broadcast_mul(v, b) })?),
            ("broadcast_mul rhs", op_error(&row, |g, v| { let a = g.constant(x.clone()); g.broadcast_mul(a, v) })?),
            ("add_scalar", op_error(&x, |g, v| Ok(g.add_scalar(v, 0.3)))?),
            ("mul_scalar", op_error(&x, |g, v| Ok(g.mul_scalar(v, -2.0)))?),
            ("relu", op_error(&x, |g, v| Ok(g.relu(v)))?),
            ("sigmoid", op_error(&x, |g, v| Ok(g.sigmoid(v)))?),
            ("sqrt", op_error(&pos, |g, v| Ok(g.sqrt(v)))?),
            ("square", op_error(&x, |g, v| Ok(g.square(v)))?),
            ("recip", op_error(&pos, |g, v| Ok(g.recip(v)))?),
            ("sum", op_error(&x, |g, v| Ok(g.sum(v)))?),
            ("mean", op_error(&x, |g, v| Ok(g.mean(v)))?),
            ("sum_axis0", op_error(&x, |g, v| g.sum_axis0(v))?),
            ("global_avg_pool", op_error(&x, |g, v| g.global_avg_pool(v))?),
            ("upsample2x", op_error(&x, |g, v| g.upsample2x(v))?),
            ("reshape", op_error(&x, |g, v| g.reshape(v, &[6, 4]))?),
            ("concat", op_error(&x, |g, v| { let c = g.constant(y.clone()); g.concat(&[v, c]) })?),
        ];
        let pool_in = random_tensor(&mut r, &[3, 4, 6], -1.0, 1.0);
        cases.push(("maxpool2d", op_error(&pool_in, |g, v| g.maxpool2d(v))?));
        let specs = [
            (ConvSpec::new2d(4, 6, 3).padding(1).groups(2), vec![4, 7, 7], false),
            (ConvSpec::new2d(3, 4, 3).stride(2).padding(1), vec![3, 8, 8], false),
            (ConvSpec::new3d(3, 9, [3, 5, 5]).padding(2).groups(3), vec![3, 5, 8, 8], true),
        ];
        for (spec, shape, three_d) in specs {
            let xin = random_tensor(&mut r, &shape, -1.0, 1.0);
            let w = random_tensor(&mut r, &spec.weight_shape(three_d), -0.5, 0.5);
            let b = random_tensor(&mut r, &[spec.out_channels], -0.5, 0.5);
            cases.push(("conv x", op_error(&xin, |g, v| {
                let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
                g.conv(v, wv, Some(bv), spec)
            })?));
            cases.push(("conv w", op_error(&w, |g, v| {
                let (xv, bv) = (g.constant(xin.clone()), g.constant(b.clone()));
                g.conv(xv, v, Some(bv), spec)
            })?));
            cases.push(("conv b", op_error(&b, |g, v| {
                let (xv, wv) = (g.constant(xin.clone()), g.constant(w.clone()));
                g.conv(xv, wv, Some(v), spec)
            })?));
        }
        for (name, err) in cases {
            ensure!(err < GRAD_TOL, "seed {seed}, {name}: relative error {err:e}");
            worst = worst.max(err);
            checks += 1;
        }

        let fixture = model_fixture(seed);
        let mut pick = rng(seed + 500);
        let mut targets: Vec<(Option<String>, Tensor, usize)> = fixture
            .model
            .params()
            .names()
            .into_iter()
            .map(|n| {
                let t = fixture.model.params().get(&n).unwrap().clone();
                (Some(n), t, 3)
            })
            .collect();
        targets.push((None, fixture.frames[2].clone(), 8));
        for (name, t, count) in &targets {
            let (err, skip) = model_check(&fixture, name.as_deref(), t, *count, &mut pick)?;
            let label = name.as_deref().unwrap_or("center frame");
            ensure!(err < GRAD_TOL, "seed {seed}, {label}: relative error {err:e}");
            worst = worst.max(err);
            skipped += skip;
            checks += count;
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "{checks} checks over 5 seeds, worst relative error {worst:.2e}, {skipped} kink samples redrawn, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn evaluate(f: &ModelFixture, name: Option<&str>, x: &Tensor) -> Result<f64, String> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = ok(f.loss(name, &mut g, v))?;
    ok(g.value(out).item())
}

fn central(f: &ModelFixture, name: Option<&str>, x: &Tensor, i: usize, h: f64) -> Result<f64, String> {
    let mut probe = x.clone();
    probe.data_mut()[i] += h;
    let plus = evaluate(f, name, &probe)?;
    probe.data_mut()[i] = x.data()[i] - h;
    let minus = evaluate(f, name, &probe)?;
    Ok((plus - minus) / (2.0 * h))
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Worst relative error over `count` sampled elements of `x`, and how many
/// samples were redrawn. A sample whose step-1e-5 difference disagrees
/// with a step-1e-6 one sits within a step of a ReLU kink, where central
/// differences do not estimate the derivative.
fn model_check(
    f: &ModelFixture,
    name: Option<&str>,
    x: &Tensor,
    count: usize,
    pick: &mut ChaCha8Rng,
) -> Result<(f64, usize), String> {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = ok(f.loss(name, &mut g, v))?;
    ok(g.backward(out))?;
    let analytic = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let (mut worst, mut skipped, mut done): (f64, usize, usize) = (0.0, 0, 0);
    while done < count {
        ensure!(skipped < 20, "{skipped} samples rejected as kinks");
        let i = pick.gen_range(0..x.len());
        let coarse = central(f, name, x, i, GRAD_STEP)?;
        let fine = central(f, name, x, i, GRAD_STEP / 10.0)?;
        if relative(coarse, fine) > GRAD_TOL / 10.0 {
            skipped += 1;
            continue;
        }
        worst = worst.max(relative(analytic.data()[i], coarse));
        done += 1;
    }
    Ok((worst, skipped))
}

struct ModelFixture {
    model: PromotionModel,
    frames: Vec<Tensor>,
    priors: Tensor,
    target: Tensor,
    blur: BlurReasoningVector,
    att: AttentionMap,
}

fn model_fixture(seed: u64) -> ModelFixture {
    let mut r = rng(seed + 100);
    let cfg = ModelConfig {
        channels: 8,
        blocks: 2,
        reduction: 4,
    };
    let mut model = PromotionModel::new(cfg, seed).unwrap();
    model.randomize_output(seed + 200);
    for name in model.params().names().into_iter().filter(|n| n.ends_with(".b")) {
        for b in model.params_mut().get_mut(&name).unwrap().data_mut() {
            *b = r.gen_range(-0.1..0.1);
        }
    }
    let frames = (0..5).map(|_| random_tensor(&mut r, &[3, 16, 16], 0.0, 1.0)).collect();
    let priors = random_tensor(&mut r, &[3, 5, 16, 16], 0.0, 1.0);
    let target = random_tensor(&mut r, &[3, 16, 16], 0.0, 1.0);
    let w: [f64; 5] = std::array::from_fn(|_| r.gen_range(0.5..1.5));
    let flow = FlowField::from_fn(16, 16, |y, x| (x as f64 * 0.25 - 2.0, (y as f64 * 0.3).cos()));
    ModelFixture {
        model,
        frames,
        priors,
        target,
        blur: BlurReasoningVector::from_weights(w),
        att: attention_map(&flow),
    }
}

impl ModelFixture {
    fn loss(&self, name: Option<&str>, g: &mut Graph, x: Var) -> promotion::Result<Var> {
        let mut p = self.model.bind_frozen(g);
        let mut frames: Vec<Var> = self.frames.iter().map(|f| g.constant(f.clone())).collect();
        match name {
            Some(n) => p.set(n, x),
            None => frames[2] = x,
        }
        let priors = g.constant(self.priors.clone());
        let pred = self.model.forward_graph(g, &p, ClipVars { frames: &frames, priors, blur: &self.blur })?;
        let target = g.constant(self.target.clone());
        let l = total_loss_graph(g, pred, target, &self.att, LossWeights::default(), &PerceptualExtractor::default())?;
        Ok(l.total)
    }
}

// Convolution oracle

fn direct_conv(x: &[f64], dims: [usize; 3], s: &ConvSpec, w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = |i: usize| (dims[i] + 2 * s.padding[i] - s.kernel[i]) / s.stride[i] + 1;
    let (od, oh, ow) = (out(0), out(1), out(2));
    let cg = s.in_channels / s.groups;
    let og = s.out_channels / s.groups;
    let at = |c: usize, z: isize, y: isize, xx: isize| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= dims[0] as isize || y >= dims[1] as isize || xx >= dims[2] as isize {
            return 0.0;
        }
        x[((c * dims[0] + z as usize) * dims[1] + y as usize) * dims[2] + xx as usize]
    };
    let mut y = Vec::new();
    for o in 0..s.out_channels {
        for z in 0..od {
            for r in 0..oh {
                for q in 0..ow {
                    let mut acc = b[o];
                    for ci in 0..cg {
                        for a in 0..s.kernel[0] {
                            for p in 0..s.kernel[1] {
                                for k in 0..s.kernel[2] {
                                    let wi = (((o * cg + ci) * s.kernel[0] + a) * s.kernel[1] + p) * s.kernel[2] + k;
                                    acc += w[wi]
                                        * at(
                                            (o / og) * cg + ci,
                                            (z * s.stride[0] + a) as isize - s.padding[0] as isize,
                                            (r * s.stride[1] + p) as isize - s.padding[1] as isize,
                                            (q * s.stride[2] + k) as isize - s.padding[2] as isize,
                                        );
                                }
                            }
                        }
                    }
                    y.push(acc);
                }
            }
        }
    }
    y
}

fn conv_error(r: &mut ChaCha8Rng, spec: ConvSpec, dims: [usize; 3]) -> Result<f64, String> {
    let n = spec.in_channels * dims.iter().product::<usize>();
    let x: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..spec.out_channels * spec.fan_in()).map(|_| r.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..spec.out_channels).map(|_| r.gen_range(-1.0..1.0)).collect();
    let (got, _) = ok(conv_forward(&x, dims, &spec, &w, Some(&b)))?;
    let want = direct_conv(&x, dims, &spec, &w, &b);
    ensure!(got.len() == want.len(), "{spec:?}: {} outputs, oracle has {}", got.len(), want.len());
    Ok(got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

fn conv_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(31);
    let mut cases = vec![
        (ConvSpec::new3d(3, 9, [3, 5, 5]).padding(2).groups(3), [5, 16, 16]),
        (ConvSpec::new3d(9, 27, [3, 5, 5]).padding(2).groups(9), [3, 8, 8]),
        (ConvSpec::new2d(27, 128, 1), [1, 4, 4]),
    ];
    for _ in 0..25 {
        let groups = [1, 2, 3][r.gen_range(0..3)];
        let cin = groups * r.gen_range(1..4);
        let cout = groups * r.gen_range(1..4);
        let three_d = r.gen_bool(0.5);
        let spec = if three_d {
            ConvSpec::new3d(cin, cout, [r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..5)])
                .depth_padding(r.gen_range(0..2))
        } else {
            ConvSpec::new2d(cin, cout, r.gen_range(1..5))
        };
        let spec = spec.stride(r.gen_range(1..3)).padding(r.gen_range(0..3)).groups(groups);
        let dims = [if three_d { r.gen_range(3..6) } else { 1 }, r.gen_range(5..10), r.gen_range(5..10)];
        cases.push((spec, dims));
    }
    let mut worst: f64 = 0.0;
    for (spec, dims) in &cases {
        let err = conv_error(&mut r, *spec, *dims)?;
        ensure!(err <= 1e-12, "{spec:?} on {dims:?}: max error {err:e}");
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("{} specs, max error {worst:.1e}", cases.len()))
}

// Encoder shape contract

fn encoder_shape() -> Outcome {
    let model = ok(PromotionModel::new(ModelConfig::default(), 0))?;
    let mut g = Graph::new();
    let p = model.bind_frozen(&mut g);
    let stack = g.constant(random_tensor(&mut rng(2), &[3, 5, 64, 64], 0.0, 1.0));
    let y = ok(model.encoder().forward(&mut g, &p, stack))?;
    ensure!(g.shape(y) == [128, 16, 16], "got {:?}", g.shape(y));
    for bad in [[3, 5, 62, 64], [3, 5, 64, 30], [3, 4, 64, 64], [2, 5, 64, 64]] {
        let x = g.constant(Tensor::zeros(&bad));
        ensure!(model.encoder().forward(&mut g, &p, x).is_err(), "{bad:?} was accepted");
    }
    Ok("(3,5,64,64) -> (128,16,16); 4 bad shapes rejected".into())
}

// Blur reasoning vector

fn blur_vector() -> Outcome {
    let mut r = rng(41);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let vars: [f64; 5] = std::array::from_fn(|_| r.gen_range(1e-6..100.0));
        let v = BlurReasoningVector::from_variances(vars);
        let s: f64 = v.weights().iter().sum();
        worst = worst.max((s - 5.0).abs());
    }
    ensure!(worst < 1e-9, "sum off by {worst:e}");

    let f = random_frame(&mut r, 16, 16);
    let clip = ok(FrameSequence::new(vec![f; 5]))?;
    let same = ok(blur_reasoning_vector(&clip))?;
    ensure!(same.weights().iter().all(|&w| (w - 1.0).abs() < 1e-12), "identical frames gave {:?}", same.weights());

    let v = BlurReasoningVector::from_variances([2.0, 1.0, 2.0, 1.0, 2.0]);
    let want = [5.0 / 7.0, 10.0 / 7.0, 5.0 / 7.0, 10.0 / 7.0, 5.0 / 7.0];
    for (a, b) in v.weights().iter().zip(want) {
        ensure!((a - b).abs() < 1e-12, "[2,1,2,1,2] gave {:?}", v.weights());
    }
    Ok(format!("1000 tuples sum to 5 (max dev {worst:.1e}); uniform and [2,1,2,1,2] cases exact"))
}

// Loss closed forms

fn loss_closed_forms() -> Outcome {
    let mut r = rng(51);
    let target = random_frame(&mut r, 16, 16).map(|v| 0.1 + 0.8 * v);
    let ext = PerceptualExtractor::default();
    let zero = AttentionMap::zeros(16, 16);
    let ones = ok(AttentionMap::new(promotion::media_io::GrayMap::from_fn(16, 16, |_, _| 1.0)))?;
    let base = LossWeights::default();

    let cb = ok(charbonnier_flow(&target, &target, &random_attention(&mut r), base))?;
    ensure!(cb == 1e-3, "identical charbonnier {cb:e}");
    for lambda in [0.0, 0.1, 1.0, 10.0] {
        let w = ok(LossWeights::new(lambda, 1e-6))?;
        let l = ok(total_loss(&target, &target, &zero, w, &ext))?;
        ensure!(l == 1e-3, "identical total at lambda {lambda}: {l:e}");
    }

    let shifted = target.map(|v| v + 0.1);
    let plain = ok(charbonnier_flow(&shifted, &target, &zero, base))?;
    let double = ok(charbonnier_flow(&shifted, &target, &ones, base))?;
    let want_plain = (0.01f64 + 1e-6).sqrt();
    let want_double = (0.04f64 + 1e-6).sqrt();
    ensure!((plain - want_plain).abs() < 1e-12, "d=0.1, w=0: {plain} vs {want_plain}");
    ensure!((double - want_double).abs() < 1e-12, "d=0.1, w=1: {double} vs {want_double}");

    let pred = random_frame(&mut r, 16, 16);
    let att = random_attention(&mut r);
    let w = ok(LossWeights::new(0.1, 1e-6))?;
    let total = ok(total_loss(&pred, &target, &att, w, &ext))?;
    let parts = ok(charbonnier_flow(&pred, &target, &att, w))? + 0.1 * ok(perceptual_distance(&pred, &target, &ext))?;
    ensure!((total - parts).abs() < 1e-12, "L {total} vs L_cb + 0.1 L_ps {parts}");
    Ok(format!("identity 1e-3 exact; d=0.1 gives {plain:.10} and {double:.10}"))
}

fn random_attention(r: &mut ChaCha8Rng) -> AttentionMap {
    let data = (0..256).map(|_| r.gen_range(0.0..1.0)).collect();
    AttentionMap::new(promotion::media_io::GrayMap::new(16, 16, data).unwrap()).unwrap()
}

// Blur synthesis

fn synthesis() -> Outcome {
    let mut r = rng(61);
    for n in [2, 3, 5, 7] {
        let f = random_frame(&mut r, 12, 12);
        let seq = ok(FrameSequence::new(vec![f.clone(); n]))?;
        let out = ok(synthesize_blur(&seq, SynthSpec::default(), CrfParams::default()))?;
        for frame in out.frames() {
            let worst = frame.quantize().iter().zip(f.quantize()).map(|(a, b)| a.abs_diff(b)).max().unwrap();
            ensure!(worst <= 1, "static length {n}: off by {worst} levels");
        }
    }

    let sharp: Vec<RgbFrame> = (0..5)
        .map(|t| RgbFrame::from_fn(16, 16, |_, _, x| if x < 4 + 2 * t { 1.0 } else { 0.0 }))
        .collect();
    let seq = ok(FrameSequence::new(sharp))?;
    let spec = SynthSpec {
        virtual_rate_multiplier: 8,
        average_count: 8,
    };
    let out = ok(synthesize_blur(&seq, spec, CrfParams::default()))?;
    let blurred = ok(laplacian_blur_score(&to_gray(out.center())))?;
    let crisp = ok(laplacian_blur_score(&to_gray(seq.center())))?;
    ensure!(blurred < crisp, "blurred score {blurred} not below sharp {crisp}");
    Ok(format!("static clips preserved; moving edge blur score {blurred:.4} < {crisp:.4}"))
}

// Metrics

fn metrics() -> Outcome {
    let mut r = rng(71);
    let a: Vec<f64> = (0..3 * 32 * 32).map(|_| r.gen_range(0..=239u32) as f64 / 255.0).collect();
    let b: Vec<f64> = a.iter().map(|v| v + 16.0 / 255.0).collect();
    let (a, b) = (ok(RgbFrame::new(32, 32, a))?, ok(RgbFrame::new(32, 32, b))?);
    let p = ok(psnr(&a, &b))?;
    ensure!((p - 24.0492).abs() <= 1e-3, "PSNR {p}");
    let s = ok(ssim(&a, &a))?;
    ensure!(s == 1.0, "SSIM(a,a) {s}");
    for _ in 0..100 {
        let (x, y) = (random_frame(&mut r, 24, 24), random_frame(&mut r, 24, 24));
        ensure!(ok(psnr(&x, &y))? == ok(psnr(&y, &x))?, "PSNR asymmetric");
        let (s1, s2) = (ok(ssim(&x, &y))?, ok(ssim(&y, &x))?);
        ensure!((s1 - s2).abs() < 1e-12, "SSIM asymmetric: {s1} vs {s2}");
    }
    Ok(format!("PSNR(a, a+16) = {p:.5} dB; SSIM(a,a) = 1; 100 symmetric pairs"))
}

// Toy overfit through the CLI

fn promotion(args: &[&str]) -> Result<(), String> {
    let out = ok(Command::new(env!("CARGO_BIN_EXE_promotion")).args(args).output())?;
    ensure!(
        out.status.success(),
        "promotion {}: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("")
    );
    Ok(())
}

fn path(p: &Path) -> &str {
    p.to_str().expect("temp paths are utf-8")
}

fn toy_overfit() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let run = dir.path().join("run");
    let start = Instant::now();
    promotion(&["train-toy", "--out", path(&run), "--seed", "0", "--steps", "500"])?;
    let elapsed = start.elapsed();

    let csv = ok(std::fs::read_to_string(run.join("loss.csv")))?;
    let totals: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    ensure!(totals.len() == 501, "{} loss rows", totals.len());
    let ratio = totals[500] / totals[0];
    ensure!(ratio <= 0.5, "final/first loss ratio {ratio:.4}");

    let target = ok(load_frame(&run.join("target.png")))?;
    let clip = ok(load_sequence(&run.join("clip"), "*.png"))?;
    ensure!(clip.len() == 5 && clip.dims() == (64, 64), "clip is {} frames of {:?}", clip.len(), clip.dims());
    let before = ok(psnr(clip.center(), &target))?;
    let trained = ok(psnr(&ok(load_frame(&run.join("pred.png")))?, &target))?;
    ensure!(trained > before, "train output PSNR {trained:.2} vs input {before:.2}");

    let restored = dir.path().join("restored");
    promotion(&[
        "infer",
        "--in",
        path(&run.join("clip")),
        "--ckpt",
        path(&run.join("checkpoint.bin")),
        "--out",
        path(&restored),
    ])?;
    let inferred = ok(load_sequence(&restored, "*.png"))?;
    let after = ok(psnr(inferred.center(), &target))?;
    ensure!(after > before, "infer PSNR {after:.2} vs input {before:.2}");
    ensure!(elapsed <= Duration::from_secs(600), "training took {elapsed:?}");

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        promotion(&["train-toy", "--out", path(d), "--seed", "5", "--steps", "3"])?;
    }
    let (ca, cb) = (ok(std::fs::read(a.join("checkpoint.bin")))?, ok(std::fs::read(b.join("checkpoint.bin")))?);
    ensure!(ca == cb, "same-seed checkpoints differ");

    Ok(format!(
        "loss {:.5} -> {:.5} (ratio {ratio:.3}); PSNR {before:.2} -> {after:.2} dB; {:.0}s; checkpoints identical",
        totals[0],
        totals[500],
        elapsed.as_secs_f64()
    ))
}

// Motion robustness

const SIDE: usize = 64;
const OBJ: usize = 16;
const TOP: usize = 24;

fn left(t: usize) -> usize {
    10 + 2 * t
}

fn moving_square() -> Vec<RgbFrame> {
    let mut r = rng(81);
    let patch: Vec<f64> = (0..3 * OBJ * OBJ).map(|_| r.gen_range(0.05..0.95)).collect();
    (0..7)
        .map(|t| {
            RgbFrame::from_fn(SIDE, SIDE, |c, y, x| {
                if (TOP..TOP + OBJ).contains(&y) && (left(t)..left(t) + OBJ).contains(&x) {
                    patch[(c * OBJ + y - TOP) * OBJ + x - left(t)]
                } else {
                    0.4
                }
            })
        })
        .collect()
}

fn motion_robustness() -> Outcome {
    let sharp = moving_square();
    let blurred = ok(synthesize_blur(&ok(FrameSequence::new(sharp.clone()))?, SynthSpec::default(), CrfParams::default()))?;
    let clip = ok(FrameSequence::new(blurred.frames()[1..6].to_vec()))?;
    let att = attention_map(&ok(estimate_center_flow(&clip))?);

    let inside = |y: usize, x: usize| (TOP..TOP + OBJ).contains(&y) && (left(1)..left(5) + OBJ).contains(&x);
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0, 0.0, 0);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let a = att.map().get(y, x);
            if inside(y, x) {
                sin += a;
                nin += 1;
            } else {
                sout += a;
                nout += 1;
            }
        }
    }
    let (mean_in, mean_out) = (sin / nin as f64, sout / nout as f64);
    ensure!(mean_in > mean_out, "attention inside {mean_in} vs outside {mean_out}");

    ensure!(att.values().iter().all(|&a| a == 0.0 || a == 1.0), "attention is not binary on this scene");
    let plane = SIDE * SIDE;
    let m = att.values().iter().filter(|&&a| a == 1.0).count();
    let delta = 0.05;
    let target = &sharp[3];
    let mut pred = target.clone();
    for c in 0..3 {
        for i in 0..plane {
            if att.values()[i] == 1.0 {
                pred.data_mut()[c * plane + i] += delta;
            }
        }
    }
    let w = LossWeights::default();
    let weighted = ok(charbonnier_flow(&pred, target, &att, w))?;
    let plain = ok(charbonnier_flow(&pred, target, &AttentionMap::zeros(SIDE, SIDE), w))?;
    let (mf, n, eps) = (m as f64, plane as f64, 1e-6f64);
    let want = (mf * (4.0 * delta * delta + eps).sqrt() + (n - mf) * eps.sqrt())
        / (mf * (delta * delta + eps).sqrt() + (n - mf) * eps.sqrt());
    let got = weighted / plain;
    ensure!(got > 1.0, "weighted loss {weighted} not above unweighted {plain}");
    ensure!((got - want).abs() < 1e-12, "factor {got} vs closed form {want}");
    Ok(format!("attention mean {mean_in:.3} inside vs {mean_out:.3} outside; loss factor {got:.6} = closed form"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradients),
        ("convolution oracle", conv_oracle),
        ("encoder shape contract", encoder_shape),
        ("blur reasoning vector invariants", blur_vector),
        ("loss closed forms", loss_closed_forms),
        ("synthesis identity and blur monotonicity", synthesis),
        ("metric checks", metrics),
        ("toy overfit", toy_overfit),
        ("motion robustness", motion_robustness),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{secs:.1}s]");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
