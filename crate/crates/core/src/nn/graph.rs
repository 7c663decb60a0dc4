use crate::error::{Error, Result};

use super::conv::{conv_backward, conv_forward, ConvSpec};
use super::tensor::{compensated_sum, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Same-rank broadcasting product; `map_a`/`map_b` send each output
    /// element to its source element.
    BroadcastMul {
        a: Var,
        b: Var,
        map_a: Vec<usize>,
        map_b: Vec<usize>,
    },
    AddScalar(Var),
    MulScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    SumAxis0(Var),
    GlobalAvgPool(Var),
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: ConvSpec,
        in_dims: [usize; 3],
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2x(Var),
    Reshape(Var),
    Concat(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the tape
/// is topologically sorted by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each element of `out_shape`, the flat index of the element of
/// `in_shape` it reads (dims of size 1 are repeated).
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let src = idx
            .iter()
            .zip(in_shape)
            .zip(&in_strides)
            .map(|((&i, &d), &s)| if d == 1 { 0 } else { i * s })
            .sum();
        map.push(src);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Split a `[C, H, W]` or `[C, D, H, W]` shape into channels and `[d, h, w]`.
fn conv_dims(shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match *shape {
        [c, h, w] => Ok((c, [1, h, w])),
        [c, d, h, w] => Ok((c, [d, h, w])),
        _ => Err(Error::shape(format!(
            "convolution input must be [C,H,W] or [C,D,H,W], got {shape:?}"
        ))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A differentiable leaf (parameter or input of interest).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`backward`](Self::backward) target with
    /// respect to `v`, if `v` influenced it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let ng = self.needs(&[a]);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise product of two tensors of equal rank whose dims either
    /// match or are 1 on one side.
    pub fn broadcast_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() {
            return Err(Error::shape(format!("broadcast_mul: rank {sa:?} vs {sb:?}")));
        }
        let mut out = Vec::with_capacity(sa.len());
        for (&x, &y) in sa.iter().zip(&sb) {
            out.push(match (x, y) {
                _ if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(Error::shape(format!("broadcast_mul: {sa:?} vs {sb:?}"))),
            });
        }
        let map_a = broadcast_map(&out, &sa);
        let map_b = broadcast_map(&out, &sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = map_a.iter().zip(&map_b).map(|(&i, &j)| da[i] * db[j]).collect();
        let value = Tensor::new(out, data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::BroadcastMul { a, b, map_a, map_b }, ng))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::MulScalar(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = compensated_sum(self.value(a).data());
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = compensated_sum(t.data()) / t.len() as f64;
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    /// Sum over the leading axis, keeping it with size 1.
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        if shape.is_empty() {
            return Err(Error::shape("sum_axis0 of a rank-0 tensor"));
        }
        let inner: usize = shape[1..].iter().product();
        let mut out = vec![0.0; inner];
        for chunk in t.data().chunks(inner) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape[0] = 1;
        let value = Tensor::new(new_shape, out)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::SumAxis0(a), ng))
    }

    /// `[C, H, W] -> [C, 1, 1]` channel means.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[c, h, w] = t.shape() else {
            return Err(Error::shape(format!(
                "global_avg_pool expects [C,H,W], got {:?}",
                t.shape()
            )));
        };
        let n = (h * w) as f64;
        let data = t.data().chunks(h * w).map(|ch| compensated_sum(ch) / n).collect();
        let value = Tensor::new(vec![c, 1, 1], data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::GlobalAvgPool(a), ng))
    }

    /// Grouped 2D (`x: [C,H,W]`, `w: [O, C/g, kh, kw]`) or 3D
    /// (`x: [C,D,H,W]`, `w: [O, C/g, kd, kh, kw]`) cross-correlation.
    pub fn conv(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (c, in_dims) = conv_dims(self.shape(x))?;
        let three_d = self.shape(x).len() == 4;
        if c != spec.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                spec.in_channels
            )));
        }
        spec.validate()?;
        let want_w = spec.weight_shape(three_d);
        if self.shape(w) != want_w.as_slice() {
            return Err(Error::shape(format!(
                "conv weight shape {:?}, expected {want_w:?}",
                self.shape(w)
            )));
        }
        if !three_d && spec.kernel[0] != 1 {
            return Err(Error::shape("2D input with a depth kernel"));
        }
        let (y, [od, oh, ow]) = conv_forward(
            self.value(x).data(),
            in_dims,
            &spec,
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        )?;
        let shape = if three_d {
            vec![spec.out_channels, od, oh, ow]
        } else {
            vec![spec.out_channels, oh, ow]
        };
        let value = Tensor::new(shape, y)?;
        let mut deps = vec![x, w];
        deps.extend(bias);
        let ng = self.needs(&deps);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                bias,
                spec,
                in_dims,
            },
            ng,
        ))
    }

    /// 2x2 max pooling with stride 2 over the last two axes. Ties resolve
    /// to the first element of the window in row-major order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("maxpool2d needs at least 2 axes"));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "maxpool2d needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let planes = t.len() / (h * w);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        let data = t.data();
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best_i = base + 2 * y * w + 2 * xo;
                    let mut best = data[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xo + dx;
                        if data[i] > best {
                            best = data[i];
                            best_i = i;
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        let value = Tensor::new(out_shape, out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, ng))
    }

    /// Nearest-neighbor 2x upsampling of the last two axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("upsample2x needs at least 2 axes"));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = t.len() / (h * w);
        let mut out = Vec::with_capacity(t.len() * 4);
        for p in 0..planes {
            let plane = &t.data()[p * h * w..(p + 1) * h * w];
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for x in 0..2 * w {
                    out.push(row[x / 2]);
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = 2 * h;
        out_shape[r - 1] = 2 * w;
        let value = Tensor::new(out_shape, out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Upsample2x(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "concat: {:?} does not match trailing dims {tail:?}",
                    t.shape()
                )));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        let ng = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), ng))
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a one-element `target`. Previous gradients are
    /// discarded.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.value(target).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar target, got shape {:?}",
                self.shape(target)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[target.0].needs_grad {
            return Ok(());
        }
        let seed = Tensor::full(self.shape(target), 1.0);
        self.grads[target.0] = Some(seed);

        for i in (0..=target.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            // Leaves keep their gradient; interior nodes hand it on.
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            let contributions = self.local_grads(i, &g)?;
            self.grads[i] = Some(g);
            for (v, t) in contributions {
                self.accumulate(v, t);
            }
        }
        Ok(())
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient matches value shape")
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = node.value.data();
        let zip_with = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let x = self.value(a).data();
            let data = gd
                .iter()
                .zip(x)
                .zip(out)
                .map(|((&g, &x), &y)| f(g, x, y))
                .collect();
            self.like(a, data)
        };
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let ga = gd.iter().zip(xb).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(xa).map(|(g, x)| g * x).collect();
                vec![(*a, self.like(*a, ga)), (*b, self.like(*b, gb))]
            }
            Op::BroadcastMul { a, b, map_a, map_b } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; xa.len()];
                let mut gb = vec![0.0; xb.len()];
                for ((&g, &ia), &ib) in gd.iter().zip(map_a).zip(map_b) {
                    ga[ia] += g * xb[ib];
                    gb[ib] += g * xa[ia];
                }
                vec![(*a, self.like(*a, ga)), (*b, self.like(*b, gb))]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MulScalar(a, s) => vec![(*a, g.map(|v| v * s))],
            Op::Relu(a) => vec![(*a, zip_with(*a, &|g, x, _| if x > 0.0 { g } else { 0.0 }))],
            Op::Sigmoid(a) => vec![(*a, zip_with(*a, &|g, _, y| g * y * (1.0 - y)))],
            Op::Sqrt(a) => vec![(*a, zip_with(*a, &|g, _, y| g * 0.5 / y))],
            Op::Square(a) => vec![(*a, zip_with(*a, &|g, x, _| g * 2.0 * x))],
            Op::Recip(a) => vec![(*a, zip_with(*a, &|g, _, y| -g * y * y))],
            Op::Sum(a) => vec![(*a, Tensor::full(self.shape(*a), gd[0]))],
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                vec![(*a, Tensor::full(self.shape(*a), gd[0] / n))]
            }
            Op::SumAxis0(a) => {
                let n = self.value(*a).len();
                let data = (0..n).map(|k| gd[k % gd.len()]).collect();
                vec![(*a, self.like(*a, data))]
            }
            Op::GlobalAvgPool(a) => {
                let x = self.value(*a);
                let plane = x.len() / gd.len();
                let data = (0..x.len()).map(|k| gd[k / plane] / plane as f64).collect();
                vec![(*a, self.like(*a, data))]
            }
            Op::Conv {
                x,
                w,
                bias,
                spec,
                in_dims,
            } => {
                let want_x = self.nodes[x.0].needs_grad;
                let grads = conv_backward(
                    self.value(*x).data(),
                    *in_dims,
                    spec,
                    self.value(*w).data(),
                    gd,
                    want_x,
                )?;
                let mut out = vec![(*w, self.like(*w, grads.w))];
                if let Some(gx) = grads.x {
                    out.push((*x, self.like(*x, gx)));
                }
                if let Some(b) = bias {
                    out.push((*b, self.like(*b, grads.bias)));
                }
                out
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (&src, &g) in argmax.iter().zip(gd) {
                    gx[src] += g;
                }
                vec![(*x, self.like(*x, gx))]
            }
            Op::Upsample2x(x) => {
                let shape = self.shape(*x);
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let mut gx = vec![0.0; self.value(*x).len()];
                let planes = gx.len() / (h * w);
                for p in 0..planes {
                    for y in 0..2 * h {
                        for xo in 0..2 * w {
                            gx[p * h * w + (y / 2) * w + xo / 2] +=
                                gd[p * 4 * h * w + y * 2 * w + xo];
                        }
                    }
                }
                vec![(*x, self.like(*x, gx))]
            }
            Op::Reshape(x) => vec![(*x, self.like(*x, gd.to_vec()))],
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).len();
                        let t = self.like(p, gd[offset..offset + n].to_vec());
                        offset += n;
                        (p, t)
                    })
                    .collect()
            }
        })
    }
}
