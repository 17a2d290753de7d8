use rand::Rng;

use super::tensor::{axis_split, gemm, numel, Tensor};
use super::{AutodiffError, ParamId, ParamStore, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2dSpec {
    pub kernel: usize,
    pub dilation: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    LayerNorm { src: Var, axis: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout(Var, Vec<f64>),
    Bilinear { grid: Var, coords: Var },
    Conv2d { input: Var, weight: Var, bias: Var, spec: Conv2dSpec, col: Vec<f64> },
    MaxPool2(Var, Vec<usize>),
    SmoothL1(Var, Vec<f64>),
    BceLogits(Var, Vec<f64>),
    Qfl { src: Var, labels: Vec<f64>, beta: f64 },
    Giou(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations in execution order so that reverse
/// iteration is a valid topological order for backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Accumulated gradient per parameter (parameters used several times on
    /// the tape are summed).
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; store.len()];
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                match &mut out[pid.0] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable `-[y ln σ(x) + (1-y) ln(1-σ(x))]`.
#[inline]
pub fn bce_with_logits(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
fn qfl_value(x: f64, y: f64, beta: f64) -> f64 {
    let d = (y - sigmoid(x)).abs();
    modulating(d, beta) * bce_with_logits(x, y)
}

#[inline]
fn modulating(d: f64, beta: f64) -> f64 {
    if beta == 0.0 {
        1.0
    } else {
        d.powf(beta)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// An input leaf; `requires_grad` decides whether backward fills it.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) {
            return Err(shape_err(op, &[sa, sb]));
        }
        Ok(())
    }

    /// Elementwise `a + b`; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let m = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb.data()[i % m])
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let m = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x - vb.data()[i % m])
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let m = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * vb.data()[i % m])
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect());
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x + c).collect());
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// `[m,k]·[k,n]`, or batched `[B,m,k]·[B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([bt, m, k], [bt2, k2, n]) if bt == bt2 && k == k2 => (*bt, *m, *k, *n),
            _ => return Err(shape_err("matmul", &[&sa, &sb])),
        };
        let mut data = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for t in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va[t * m * k..(t + 1) * m * k],
                    false,
                    &vb[t * k * n..(t + 1) * k * n],
                    false,
                    &mut data[t * m * n..(t + 1) * m * n],
                    false,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MatMul(a, b), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err("transpose", &[self.shape(a)]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(AutodiffError::Invalid {
                op: "permute",
                msg: format!("axes {axes:?} invalid for shape {shape:?}"),
            });
        }
        let out = permute_data(self.value(a), axes);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or(AutodiffError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &[&base]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == base.len()
                && s.iter().enumerate().all(|(i, d)| i == axis || *d == base[i]);
            if !ok {
                let shapes: Vec<&[usize]> = parts.iter().map(|p| self.shape(*p)).collect();
                return Err(shape_err("concat", &shapes));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec(), axis), ng))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(AutodiffError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of {shape:?}"),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = w;
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice {
                src: a,
                axis,
                start,
            },
            ng,
        ))
    }

    /// Selects rows (first-axis entries) by index; repeats are allowed.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(AutodiffError::Invalid {
                op: "gather_rows",
                msg: format!("rows {rows:?} out of range for {shape:?}"),
            });
        }
        let inner = numel(&shape[1..]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            data.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::GatherRows(a, rows.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Maximum over all elements; the gradient goes to the first maximizer.
    pub fn max(&mut self, a: Var) -> Var {
        let v = self.value(a).data();
        let mut best = 0;
        for (i, x) in v.iter().enumerate() {
            if *x > v[best] {
                best = i;
            }
        }
        let out = Tensor::scalar(v[best]);
        let ng = self.ng(a);
        self.push(out, Op::Max(a, best), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect());
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", &[&shape]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let m = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - m).exp();
                    data[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    data[at(k)] /= z;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax(a, axis), ng))
    }

    /// Normalizes to zero mean, unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("layer_norm", &[&shape]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let mean = (0..len).map(|k| src[at(k)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|k| (src[at(k)] - mean).powi(2)).sum::<f64>() / len as f64;
                let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[o * inner + i] = r;
                for k in 0..len {
                    xhat[at(k)] = (src[at(k)] - mean) * r;
                }
            }
        }
        let out = Tensor::from_parts(shape, xhat.clone());
        let ng = self.ng(a);
        Ok(self.push(
            out,
            Op::LayerNorm {
                src: a,
                axis,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Inverted dropout; the identity when `train` is false.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::Invalid {
                op: "dropout",
                msg: format!("probability {p} outside [0, 1)"),
            });
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let v = self.value(a);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        );
        let ng = self.ng(a);
        Ok(self.push(out, Op::Dropout(a, mask), ng))
    }

    /// Samples a `[C,H,W]` grid at `[K,2]` coordinates `(x, y)` given in
    /// grid units (node `(j, i)` sits at `x = j`, `y = i`). Coordinates are
    /// clamped to the border. Output is `[K,C]`.
    pub fn bilinear_sample(&mut self, grid: Var, coords: Var) -> Result<Var> {
        let (gs, cs) = (self.shape(grid).to_vec(), self.shape(coords).to_vec());
        let ([c, h, w], [k, 2]) = (gs.as_slice(), cs.as_slice()) else {
            return Err(shape_err("bilinear_sample", &[&gs, &cs]));
        };
        let (c, h, w, k) = (*c, *h, *w, *k);
        let g = self.value(grid).data();
        let xy = self.value(coords).data();
        let mut data = vec![0.0; k * c];
        for p in 0..k {
            let s = BilinearStencil::new(xy[2 * p], xy[2 * p + 1], h, w);
            for ch in 0..c {
                data[p * c + ch] = s.eval(&g[ch * h * w..(ch + 1) * h * w], w);
            }
        }
        let ng = self.ng(grid) || self.ng(coords);
        Ok(self.push(Tensor::from_parts(vec![k, c], data), Op::Bilinear { grid, coords }, ng))
    }

    /// Stride-1 "same" convolution of `[Cin,H,W]` with `[Cout,Cin,k,k]`
    /// weights and `[Cout]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: Conv2dSpec) -> Result<Var> {
        let (si, sw, sb) = (
            self.shape(input).to_vec(),
            self.shape(weight).to_vec(),
            self.shape(bias).to_vec(),
        );
        let ok = matches!((si.as_slice(), sw.as_slice(), sb.as_slice()),
            ([ci, _, _], [co, ci2, kh, kw], [co2]) if ci == ci2 && co == co2 && *kh == spec.kernel && *kw == spec.kernel)
            && spec.kernel % 2 == 1;
        if !ok {
            return Err(shape_err("conv2d", &[&si, &sw, &sb]));
        }
        let (cin, h, w) = (si[0], si[1], si[2]);
        let cout = sw[0];
        let col = im2col(self.value(input).data(), cin, h, w, spec);
        let kk = cin * spec.kernel * spec.kernel;
        let mut out = vec![0.0; cout * h * w];
        let bias_v = self.value(bias).data();
        for (o, b) in bias_v.iter().enumerate() {
            out[o * h * w..(o + 1) * h * w].fill(*b);
        }
        gemm(cout, kk, h * w, self.value(weight).data(), false, &col, false, &mut out, true);
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        Ok(self.push(
            Tensor::from_parts(vec![cout, h, w], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
                col,
            },
            ng,
        ))
    }

    /// 2×2 max pooling with stride 2 over `[C,H,W]`.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [c, h, w] = s.as_slice() else {
            return Err(shape_err("max_pool2", &[&s]));
        };
        let (c, h, w) = (*c, *h, *w);
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(shape_err("max_pool2", &[&s]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(c * ho * wo);
        let mut arg = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let mut best = ch * h * w + 2 * y * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * y + dy) * w + 2 * x + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    data.push(src[best]);
                    arg.push(best);
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(vec![c, ho, wo], data), Op::MaxPool2(a, arg), ng))
    }

    /// Elementwise smooth-L1 (Huber, transition at 1) against a constant.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let v = self.value(pred);
        if v.shape() != target.shape() {
            return Err(shape_err("smooth_l1", &[v.shape(), target.shape()]));
        }
        let data = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| crate::geometry::huber(p - t))
            .collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        let ng = self.ng(pred);
        Ok(self.push(out, Op::SmoothL1(pred, target.data().to_vec()), ng))
    }

    /// Elementwise binary cross-entropy on logits with (soft) labels.
    pub fn bce_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let v = self.value(logits);
        if v.len() != labels.len() {
            return Err(shape_err("bce_logits", &[v.shape(), &[labels.len()]]));
        }
        let data = v
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| bce_with_logits(x, y))
            .collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        let ng = self.ng(logits);
        Ok(self.push(out, Op::BceLogits(logits, labels.to_vec()), ng))
    }

    /// Elementwise quality focal loss `|y - σ(x)|^β · BCE(σ(x), y)`.
    pub fn quality_focal(&mut self, logits: Var, labels: &[f64], beta: f64) -> Result<Var> {
        let v = self.value(logits);
        if v.len() != labels.len() || beta < 0.0 {
            return Err(shape_err("quality_focal", &[v.shape(), &[labels.len()]]));
        }
        let data = v
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| qfl_value(x, y, beta))
            .collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        let ng = self.ng(logits);
        Ok(self.push(
            out,
            Op::Qfl {
                src: logits,
                labels: labels.to_vec(),
                beta,
            },
            ng,
        ))
    }

    /// Per-row `1 - GIoU` for `[K,4]` boxes `(x_min, y_min, x_max, y_max)`
    /// against constant targets of the same layout.
    pub fn giou_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let v = self.value(pred);
        let ok = v.shape().len() == 2 && v.shape()[1] == 4 && v.shape() == target.shape();
        if !ok {
            return Err(shape_err("giou_loss", &[v.shape(), target.shape()]));
        }
        let k = v.shape()[0];
        let data = (0..k)
            .map(|r| giou_terms(&v.data()[4 * r..4 * r + 4], &target.data()[4 * r..4 * r + 4]).0)
            .collect();
        let ng = self.ng(pred);
        Ok(self.push(
            Tensor::from_parts(vec![k], data),
            Op::Giou(pred, target.data().to_vec()),
            ng,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.shape().iter().any(|&d| d != 1) {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut params = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(pid) = node.op {
                params.push((pid, idx));
            }
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::from_parts(self.shape(v).to_vec(), data)
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, g.clone());
                if self.ng(*b) {
                    let m = self.value(*b).len();
                    let mut gb = vec![0.0; m];
                    for (i, x) in gd.iter().enumerate() {
                        gb[i % m] += sign * x;
                    }
                    let t = self.like(*b, gb);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let m = vb.len();
                if self.ng(*a) {
                    let ga = gd.iter().enumerate().map(|(i, x)| x * vb[i % m]).collect();
                    let t = self.like(*a, ga);
                    self.accumulate(grads, *a, t);
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; m];
                    for (i, x) in gd.iter().enumerate() {
                        gb[i % m] += x * va[i];
                    }
                    let t = self.like(*b, gb);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Scale(a, c) => {
                let t = self.like(*a, gd.iter().map(|x| x * c).collect());
                self.accumulate(grads, *a, t);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let t = self.like(*a, gd.to_vec());
                self.accumulate(grads, *a, t);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = if sa.len() == 2 {
                    (1, sa[0], sa[1], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[2])
                };
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for t in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[t * m * n..(t + 1) * m * n],
                            false,
                            &vb[t * k * n..(t + 1) * k * n],
                            true,
                            &mut ga[t * m * k..(t + 1) * m * k],
                            false,
                        );
                    }
                    let t = self.like(*a, ga);
                    self.accumulate(grads, *a, t);
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &va[t * m * k..(t + 1) * m * k],
                            true,
                            &gd[t * m * n..(t + 1) * m * n],
                            false,
                            &mut gb[t * k * n..(t + 1) * k * n],
                            false,
                        );
                    }
                    let t = self.like(*b, gb);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let t = permute_data(g, &inverse);
                self.accumulate(grads, *a, t);
            }
            Op::Concat(parts, axis) => {
                let out_shape = g.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.ng(*p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gp.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        let t = self.like(*p, gp);
                        self.accumulate(grads, *p, t);
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let (outer, len, inner) = axis_split(self.shape(*src), *axis);
                let w = g.shape()[*axis];
                let mut gs = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    gs[dst..dst + w * inner].copy_from_slice(&gd[o * w * inner..(o + 1) * w * inner]);
                }
                let t = self.like(*src, gs);
                self.accumulate(grads, *src, t);
            }
            Op::GatherRows(a, rows) => {
                let inner = numel(&self.shape(*a)[1..]);
                let mut ga = vec![0.0; self.value(*a).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..inner {
                        ga[r * inner + j] += gd[k * inner + j];
                    }
                }
                let t = self.like(*a, ga);
                self.accumulate(grads, *a, t);
            }
            Op::Sum(a) => {
                let t = Tensor::full(self.shape(*a), gd[0]);
                self.accumulate(grads, *a, t);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let t = Tensor::full(self.shape(*a), gd[0] / n);
                self.accumulate(grads, *a, t);
            }
            Op::Max(a, arg) => {
                let mut ga = vec![0.0; self.value(*a).len()];
                ga[*arg] = gd[0];
                let t = self.like(*a, ga);
                self.accumulate(grads, *a, t);
            }
            Op::Exp(a) | Op::Sqrt(a) | Op::Sigmoid(a) => {
                let y = node.value.data();
                let ga = match node.op {
                    Op::Exp(_) => gd.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Op::Sqrt(_) => gd.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect(),
                    _ => gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                };
                let t = self.like(*a, ga);
                self.accumulate(grads, *a, t);
            }
            Op::Log(a) | Op::Relu(a) | Op::Gelu(a) => {
                let x = self.value(*a).data();
                let ga = match node.op {
                    Op::Log(_) => gd.iter().zip(x).map(|(g, x)| g / x).collect(),
                    Op::Relu(_) => gd
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    _ => gd.iter().zip(x).map(|(g, x)| g * gelu_grad(*x)).collect(),
                };
                let t = self.like(*a, ga);
                self.accumulate(grads, *a, t);
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| gd[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            ga[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                let t = self.like(*a, ga);
                self.accumulate(grads, *a, t);
            }
            Op::LayerNorm {
                src,
                axis,
                xhat,
                inv_std,
            } => {
                let (outer, len, inner) = axis_split(self.shape(*src), *axis);
                let mut ga = vec![0.0; xhat.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let n = len as f64;
                        let mg = (0..len).map(|k| gd[at(k)]).sum::<f64>() / n;
                        let mgx = (0..len).map(|k| gd[at(k)] * xhat[at(k)]).sum::<f64>() / n;
                        let r = inv_std[o * inner + i];
                        for k in 0..len {
                            ga[at(k)] = r * (gd[at(k)] - mg - xhat[at(k)] * mgx);
                        }
                    }
                }
                let t = self.like(*src, ga);
                self.accumulate(grads, *src, t);
            }
            Op::Dropout(a, mask) => {
                let t = self.like(*a, gd.iter().zip(mask).map(|(g, m)| g * m).collect());
                self.accumulate(grads, *a, t);
            }
            Op::Bilinear { grid, coords } => {
                let gs = self.shape(*grid);
                let (c, h, w) = (gs[0], gs[1], gs[2]);
                let k = self.shape(*coords)[0];
                let xy = self.value(*coords).data();
                let gv = self.value(*grid).data();
                let mut ggrid = vec![0.0; c * h * w];
                let mut gcoords = vec![0.0; 2 * k];
                for p in 0..k {
                    let s = BilinearStencil::new(xy[2 * p], xy[2 * p + 1], h, w);
                    for ch in 0..c {
                        let go = gd[p * c + ch];
                        let plane = &gv[ch * h * w..(ch + 1) * h * w];
                        s.scatter(&mut ggrid[ch * h * w..(ch + 1) * h * w], w, go);
                        let (dx, dy) = s.coord_grad(plane, w);
                        gcoords[2 * p] += go * dx;
                        gcoords[2 * p + 1] += go * dy;
                    }
                }
                if self.ng(*grid) {
                    let t = self.like(*grid, ggrid);
                    self.accumulate(grads, *grid, t);
                }
                if self.ng(*coords) {
                    let t = self.like(*coords, gcoords);
                    self.accumulate(grads, *coords, t);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
                col,
            } => {
                let si = self.shape(*input);
                let (cin, h, w) = (si[0], si[1], si[2]);
                let cout = self.shape(*weight)[0];
                let kk = cin * spec.kernel * spec.kernel;
                let hw = h * w;
                if self.ng(*bias) {
                    let gb = (0..cout).map(|o| gd[o * hw..(o + 1) * hw].iter().sum()).collect();
                    let t = self.like(*bias, gb);
                    self.accumulate(grads, *bias, t);
                }
                if self.ng(*weight) {
                    let mut gw = vec![0.0; cout * kk];
                    gemm(cout, hw, kk, gd, false, col, true, &mut gw, false);
                    let t = self.like(*weight, gw);
                    self.accumulate(grads, *weight, t);
                }
                if self.ng(*input) {
                    let mut gcol = vec![0.0; kk * hw];
                    gemm(kk, cout, hw, self.value(*weight).data(), true, gd, false, &mut gcol, false);
                    let gi = col2im(&gcol, cin, h, w, *spec);
                    let t = self.like(*input, gi);
                    self.accumulate(grads, *input, t);
                }
            }
            Op::MaxPool2(a, arg) => {
                let mut ga = vec![0.0; self.value(*a).len()];
                for (o, &i) in arg.iter().enumerate() {
                    ga[i] += gd[o];
                }
                let t = self.like(*a, ga);
                self.accumulate(grads, *a, t);
            }
            Op::SmoothL1(a, target) => {
                let x = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(x.iter().zip(target))
                    .map(|(g, (p, t))| g * (p - t).clamp(-1.0, 1.0))
                    .collect();
                let t = self.like(*a, ga);
                self.accumulate(grads, *a, t);
            }
            Op::BceLogits(a, labels) => {
                let x = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(x.iter().zip(labels))
                    .map(|(g, (x, y))| g * (sigmoid(*x) - y))
                    .collect();
                let t = self.like(*a, ga);
                self.accumulate(grads, *a, t);
            }
            Op::Qfl { src, labels, beta } => {
                let x = self.value(*src).data();
                let ga = gd
                    .iter()
                    .zip(x.iter().zip(labels))
                    .map(|(g, (&x, &y))| g * qfl_grad(x, y, *beta))
                    .collect();
                let t = self.like(*src, ga);
                self.accumulate(grads, *src, t);
            }
            Op::Giou(a, target) => {
                let x = self.value(*a).data();
                let mut ga = vec![0.0; x.len()];
                for r in 0..gd.len() {
                    let (_, d) = giou_terms(&x[4 * r..4 * r + 4], &target[4 * r..4 * r + 4]);
                    for j in 0..4 {
                        ga[4 * r + j] = gd[r] * d[j];
                    }
                }
                let t = self.like(*a, ga);
                self.accumulate(grads, *a, t);
            }
        }
    }
}

fn qfl_grad(x: f64, y: f64, beta: f64) -> f64 {
    let s = sigmoid(x);
    let diff = s - y;
    let bce = bce_with_logits(x, y);
    let factor = modulating(diff.abs(), beta);
    let dfactor = if beta == 0.0 || diff == 0.0 {
        0.0
    } else {
        beta * diff.abs().powf(beta - 1.0) * diff.signum() * s * (1.0 - s)
    };
    dfactor * bce + factor * diff
}

/// `(1 - GIoU, d/dpred)` for one box pair.
fn giou_terms(p: &[f64], t: &[f64]) -> (f64, [f64; 4]) {
    let (pw, ph) = (p[2] - p[0], p[3] - p[1]);
    let area_p = pw * ph;
    let area_t = (t[2] - t[0]) * (t[3] - t[1]);
    // d area_p / d(x1, y1, x2, y2)
    let d_ap = [-ph, -pw, ph, pw];

    let iw_raw = p[2].min(t[2]) - p[0].max(t[0]);
    let ih_raw = p[3].min(t[3]) - p[1].max(t[1]);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let mut d_iw = [0.0; 4];
    let mut d_ih = [0.0; 4];
    if iw_raw > 0.0 {
        if p[2] < t[2] {
            d_iw[2] = 1.0;
        }
        if p[0] > t[0] {
            d_iw[0] = -1.0;
        }
    }
    if ih_raw > 0.0 {
        if p[3] < t[3] {
            d_ih[3] = 1.0;
        }
        if p[1] > t[1] {
            d_ih[1] = -1.0;
        }
    }
    let d_inter: [f64; 4] = std::array::from_fn(|j| d_iw[j] * ih + iw * d_ih[j]);

    let cw = p[2].max(t[2]) - p[0].min(t[0]);
    let ch = p[3].max(t[3]) - p[1].min(t[1]);
    let area_c = cw * ch;
    let mut d_cw = [0.0; 4];
    let mut d_ch = [0.0; 4];
    if p[2] > t[2] {
        d_cw[2] = 1.0;
    }
    if p[0] < t[0] {
        d_cw[0] = -1.0;
    }
    if p[3] > t[3] {
        d_ch[3] = 1.0;
    }
    if p[1] < t[1] {
        d_ch[1] = -1.0;
    }
    let d_c: [f64; 4] = std::array::from_fn(|j| d_cw[j] * ch + cw * d_ch[j]);

    let union = area_p + area_t - inter;
    let iou = inter / union;
    let loss = 2.0 - iou - union / area_c;
    let grad = std::array::from_fn(|j| {
        let d_union = d_ap[j] - d_inter[j];
        let d_iou = (d_inter[j] * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * area_c - union * d_c[j]) / (area_c * area_c);
        -d_iou - d_ratio
    });
    (loss, grad)
}

struct BilinearStencil {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    x_free: bool,
    y_free: bool,
}

impl BilinearStencil {
    fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
        let x_free = x > 0.0 && x < xmax;
        let y_free = y > 0.0 && y < ymax;
        let xc = x.clamp(0.0, xmax);
        let yc = y.clamp(0.0, ymax);
        let x0 = (xc.floor() as usize).min(w.saturating_sub(2));
        let y0 = (yc.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        Self {
            x0,
            y0,
            x1,
            y1,
            fx: xc - x0 as f64,
            fy: yc - y0 as f64,
            x_free,
            y_free,
        }
    }

    fn weights(&self) -> [(usize, usize, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.y0, self.x0, (1.0 - fx) * (1.0 - fy)),
            (self.y0, self.x1, fx * (1.0 - fy)),
            (self.y1, self.x0, (1.0 - fx) * fy),
            (self.y1, self.x1, fx * fy),
        ]
    }

    fn eval(&self, plane: &[f64], w: usize) -> f64 {
        self.weights().iter().map(|&(y, x, wt)| wt * plane[y * w + x]).sum()
    }

    fn scatter(&self, plane: &mut [f64], w: usize, g: f64) {
        for (y, x, wt) in self.weights() {
            plane[y * w + x] += wt * g;
        }
    }

    fn coord_grad(&self, plane: &[f64], w: usize) -> (f64, f64) {
        let v = |y: usize, x: usize| plane[y * w + x];
        let (v00, v01, v10, v11) = (v(self.y0, self.x0), v(self.y0, self.x1), v(self.y1, self.x0), v(self.y1, self.x1));
        let dx = if self.x_free && self.x1 != self.x0 {
            (1.0 - self.fy) * (v01 - v00) + self.fy * (v11 - v10)
        } else {
            0.0
        };
        let dy = if self.y_free && self.y1 != self.y0 {
            (1.0 - self.fx) * (v10 - v00) + self.fx * (v11 - v01)
        } else {
            0.0
        };
        (dx, dy)
    }
}

fn conv_offsets(spec: Conv2dSpec) -> impl Iterator<Item = (usize, isize, isize)> {
    let k = spec.kernel;
    let pad = (spec.dilation * (k - 1) / 2) as isize;
    let d = spec.dilation as isize;
    (0..k * k).map(move |r| {
        let (ky, kx) = ((r / k) as isize, (r % k) as isize);
        (r, ky * d - pad, kx * d - pad)
    })
}

fn im2col(src: &[f64], cin: usize, h: usize, w: usize, spec: Conv2dSpec) -> Vec<f64> {
    let kk = spec.kernel * spec.kernel;
    let hw = h * w;
    let mut col = vec![0.0; cin * kk * hw];
    for c in 0..cin {
        let plane = &src[c * hw..(c + 1) * hw];
        for (r, oy, ox) in conv_offsets(spec) {
            let row = &mut col[(c * kk + r) * hw..(c * kk + r + 1) * hw];
            for y in 0..h {
                let sy = y as isize + oy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let (x_lo, x_hi) = valid_x_range(ox, w);
                let sy = sy as usize;
                for x in x_lo..x_hi {
                    row[y * w + x] = plane[sy * w + (x as isize + ox) as usize];
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], cin: usize, h: usize, w: usize, spec: Conv2dSpec) -> Vec<f64> {
    let kk = spec.kernel * spec.kernel;
    let hw = h * w;
    let mut out = vec![0.0; cin * hw];
    for c in 0..cin {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for (r, oy, ox) in conv_offsets(spec) {
            let row = &col[(c * kk + r) * hw..(c * kk + r + 1) * hw];
            for y in 0..h {
                let sy = y as isize + oy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let (x_lo, x_hi) = valid_x_range(ox, w);
                let sy = sy as usize;
                for x in x_lo..x_hi {
                    plane[sy * w + (x as isize + ox) as usize] += row[y * w + x];
                }
            }
        }
    }
    out
}

fn valid_x_range(ox: isize, w: usize) -> (usize, usize) {
    let lo = (-ox).max(0) as usize;
    let hi = (w as isize - ox).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

fn permute_data(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n = t.len();
    let src = t.data();
    let mut data = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        data.push(src[offset]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}
