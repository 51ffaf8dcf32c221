//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every primitive records its inputs on a [`Tape`] as it is evaluated.
//! [`Tape::backward`] then walks the records in reverse order, visiting each
//! one exactly once, and accumulates adjoints into the inputs that depend on
//! a tracked leaf (a parameter or an explicit [`Tape::leaf`]).
//!
//! Broadcasting is never implicit. Bias additions and channel scaling have
//! dedicated primitives that name the axis they broadcast over.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{shape_str, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Silu,
    Sigmoid,
    Relu,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Gelu => "gelu",
            Unary::Silu => "silu",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
        }
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Gelu => 0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2)),
        Unary::Silu => x * sigmoid(x),
        Unary::Sigmoid => sigmoid(x),
        Unary::Relu => x.max(0.0),
    }
}

fn unary_derivative(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Gelu => {
            let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
            let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
            cdf + x * pdf
        }
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Sigmoid => {
            let s = sigmoid(x);
            s * (1.0 - s)
        }
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    BiasLast(Var, Var),
    BiasFirst(Var, Var),
    ScaleFirst(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
        groups: usize,
        padding: Padding,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Unary(Unary, Var),
    Sum(Var),
    Mean(Var),
    MeanTrailing(Var),
    Reshape(Var),
    Transpose(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        src: Var,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::BiasLast(..) => "bias_last",
            Op::BiasFirst(..) => "bias_first",
            Op::ScaleFirst(..) => "scale_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Unary(kind, _) => kind.name(),
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanTrailing(_) => "mean_trailing",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::BiasLast(a, b)
            | Op::BiasFirst(a, b)
            | Op::ScaleFirst(a, b) => vec![*a, *b],
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale(x, _)
            | Op::Softmax { x, .. }
            | Op::Unary(_, x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MeanTrailing(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Narrow { x, .. }
            | Op::Gather { src: x, .. }
            | Op::CrossEntropy { logits: x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    sabotage: Option<String>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Adjoint of any recorded value; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.adjoints[v.0] {
            Some(g) => Tensor::from_parts(shape.clone(), g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Adjoint of a named parameter, `None` if it was never placed on the tape.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).map(|&v| self.wrt(v))
    }

    /// Gradients for every entry of `store`, in the store's order. Parameters
    /// that were not used get zero gradients.
    pub fn to_store(&self, store: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in store.iter() {
            let g = self
                .param(name)
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name, g).expect("names unique in source store");
        }
        out
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if k > padded || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: the backward rule of every primitive named `op` has its
    /// adjoint sign flipped. Used as a negative control for gradient checks.
    pub fn with_sabotage(op: &str) -> Self {
        Tape {
            sabotage: Some(op.to_string()),
            ..Self::default()
        }
    }

    pub fn sabotage(&self) -> Option<&str> {
        self.sabotage.as_deref()
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

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Names of the operations in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            let shapes: Vec<String> = op
                .inputs()
                .iter()
                .map(|v| shape_str(self.shape(*v)))
                .collect();
            return Err(Error::NonFinite {
                op: op.name(),
                shapes: shapes.join(", "),
            });
        }
        let tracked = match op {
            Op::Leaf => false,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].tracked),
        };
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn raw(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        self.push(Tensor::from_parts(shape, data), op)
    }

    /// Records an untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf).expect("tensor values are finite")
    }

    /// Records a tracked input that is not part of a [`ParamStore`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a named parameter on the tape once; later calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let v = self.leaf(t.clone());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {} by {}", shape_str(sa), shape_str(sb)),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.raw(vec![m, n], out, Op::MatMul(a, b))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!(
                    "operands differ: {} vs {}",
                    shape_str(self.shape(a)),
                    shape_str(self.shape(b))
                ),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.raw(shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.raw(shape, data, Op::Scale(x, c))
    }

    /// `x[..., n] + b[n]`, broadcasting `b` over all leading axes.
    pub fn bias_last(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let n = *sx.last().unwrap_or(&1);
        if sb.len() != 1 || sb[0] != n || sx.is_empty() {
            return Err(Error::shape(
                "bias_last",
                format!("bias {} does not match last axis of {}", shape_str(sb), shape_str(sx)),
            ));
        }
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % n])
            .collect();
        let shape = sx.to_vec();
        self.raw(shape, data, Op::BiasLast(x, b))
    }

    /// `x[C, ...] + b[C]`, broadcasting `b` over all trailing axes.
    pub fn bias_first(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.is_empty() || sb.len() != 1 || sb[0] != sx[0] {
            return Err(Error::shape(
                "bias_first",
                format!("bias {} does not match first axis of {}", shape_str(sb), shape_str(sx)),
            ));
        }
        let inner = numel(&sx[1..]);
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i / inner])
            .collect();
        let shape = sx.to_vec();
        self.raw(shape, data, Op::BiasFirst(x, b))
    }

    /// `x[C, ...] * g[C]`, scaling each leading slice by its gate.
    pub fn scale_channels(&mut self, x: Var, g: Var) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(g));
        if sx.is_empty() || sg.len() != 1 || sg[0] != sx[0] {
            return Err(Error::shape(
                "scale_channels",
                format!("gate {} does not match first axis of {}", shape_str(sg), shape_str(sx)),
            ));
        }
        let inner = numel(&sx[1..]);
        let gate = self.value(g).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * gate[i / inner])
            .collect();
        let shape = sx.to_vec();
        self.raw(shape, data, Op::ScaleFirst(x, g))
    }

    /// Grouped 2-D cross-correlation of `x[C_in×H×W]` with
    /// `k[C_out×(C_in/groups)×kh×kw]`, zero padded.
    pub fn conv2d_grouped(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        self.conv2d_padded(x, k, stride, pad, groups, Padding::Zeros)
    }

    pub fn conv2d_padded(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
        groups: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        let err = |detail: String| Error::shape("conv2d", detail);
        if sx.len() != 3 || sk.len() != 4 {
            return Err(err(format!(
                "expected input C×H×W and kernel O×I×kh×kw, got {} and {}",
                shape_str(&sx),
                shape_str(&sk)
            )));
        }
        if stride == 0 {
            return Err(err("stride must be at least 1".into()));
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, cin_g, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(err(format!(
                "channel mismatch: input {} kernel {} groups {groups}",
                shape_str(&sx),
                shape_str(&sk)
            )));
        }
        let (Some(ho), Some(wo)) = (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad))
        else {
            return Err(err(format!(
                "kernel {kh}×{kw} larger than padded input {}×{} (pad {pad})",
                h + 2 * pad,
                w + 2 * pad
            )));
        };
        let geom = ConvGeom {
            h,
            w,
            cout,
            cin_g,
            cout_g: cout / groups,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
            padding,
        };
        let out = geom.forward(self.value(x).data(), self.value(k).data());
        self.raw(
            vec![cout, ho, wo],
            out,
            Op::Conv2d {
                x,
                k,
                stride,
                pad,
                groups,
                padding,
            },
        )
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_grouped(x, k, stride, pad, 1)
    }

    /// 1-D cross-correlation of `x[C_in×L]` with `k[C_out×C_in×klen]`, no padding.
    pub fn conv1d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 2 || sk.len() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "expected input C×L and kernel O×I×k, got {} and {}",
                    shape_str(&sx),
                    shape_str(&sk)
                ),
            ));
        }
        let x4 = self.reshape(x, &[sx[0], 1, sx[1]])?;
        let k4 = self.reshape(k, &[sk[0], sk[1], 1, sk[2]])?;
        let y = self.conv2d(x4, k4, 1, 0)?;
        let sy = self.shape(y).to_vec();
        self.reshape(y, &[sy[0], sy[2]])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {}", shape_str(&shape)),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        self.raw(shape, out, Op::Softmax { x, axis })
    }

    /// Normalizes each slice along the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!(
                        "{name} {} does not match last axis of {}",
                        shape_str(self.shape(p)),
                        shape_str(&shape)
                    ),
                ));
            }
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        self.raw(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| unary_forward(kind, v))
            .collect();
        let shape = self.shape(x).to_vec();
        self.raw(shape, data, Op::Unary(kind, x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Silu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.raw(vec![], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.raw(vec![], vec![s], Op::Mean(x))
    }

    /// Mean over every axis but the first: `[C, ...] -> [C]`.
    pub fn mean_trailing(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::shape("mean_trailing", "scalar input"));
        }
        let inner = numel(&shape[1..]);
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        self.raw(vec![shape[0]], data, Op::MeanTrailing(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    /// Transpose of a 2-D value.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected 2-D input, got {}", shape_str(&shape)),
            ));
        }
        let out = transpose_kernel(self.value(x).data(), shape[0], shape[1]);
        self.raw(vec![shape[1], shape[0]], out, Op::Transpose(x))
    }

    /// Concatenates values that agree on every axis except `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {}", shape_str(&base)),
            ));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{} incompatible with {} on axis {axis}", shape_str(s), shape_str(&base)),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = self.shape(*p)[axis];
                let src = self.value(*p).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.raw(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!(
                    "range {start}..{} on axis {axis} of {}",
                    start + len,
                    shape_str(&shape)
                ),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.raw(out_shape, out, Op::Narrow { x, axis, start })
    }

    /// `out[i] = src.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, src: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(src).numel();
        if numel(shape) != indices.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for output {}", indices.len(), shape_str(shape)),
            ));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {} values", n),
            ));
        }
        let data = self.value(src).data();
        let out = indices.iter().map(|&i| data[i]).collect();
        self.raw(shape.to_vec(), out, Op::Gather { src, indices })
    }

    /// Element `index` of the flattened value, as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        self.gather(x, vec![index], &[])
    }

    /// `-log softmax(logits)[label]` for a 1-D logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 1 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits must be 1-D, got {}", shape_str(&shape)),
            ));
        }
        if label >= shape[0] {
            return Err(Error::Validation(format!(
                "cross_entropy: label {label} out of range for {} classes",
                shape[0]
            )));
        }
        let z = self.value(logits).data();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let probs: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - z[label];
        self.raw(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        )
    }

    // ---- reverse pass -----------------------------------------------------

    /// Exact reverse-mode adjoints of the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}", shape_str(self.shape(loss))),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(mut g) = adj[i].take() else {
                continue;
            };
            if self.sabotage.as_deref() == Some(node.op.name()) {
                g.iter_mut().for_each(|v| *v = -*v);
                self.propagate(&node.op, &node.value, &g, &mut adj);
                g.iter_mut().for_each(|v| *v = -*v);
            } else {
                self.propagate(&node.op, &node.value, &g, &mut adj);
            }
            adj[i] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(adj, *a) {
                    // ga += g · bᵀ
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * vb[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if let Some(gb) = self.slot(adj, *b) {
                    // gb += aᵀ · g
                    for i in 0..m {
                        for p in 0..k {
                            let av = va[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let row = &g[i * n..(i + 1) * n];
                            for (dst, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(row) {
                                *dst += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(gb) = self.slot(adj, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(gb) = self.slot(adj, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(adj, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.slot(adj, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(adj, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            Op::BiasLast(x, b) => {
                if let Some(gx) = self.slot(adj, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                let n = self.shape(*b)[0];
                if let Some(gb) = self.slot(adj, *b) {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                }
            }
            Op::BiasFirst(x, b) => {
                if let Some(gx) = self.slot(adj, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                let inner = g.len() / self.shape(*b)[0];
                if let Some(gb) = self.slot(adj, *b) {
                    for (i, v) in g.iter().enumerate() {
                        gb[i / inner] += v;
                    }
                }
            }
            Op::ScaleFirst(x, gate) => {
                let inner = g.len() / self.shape(*gate)[0];
                let (vx, vg) = (self.value(*x).data(), self.value(*gate).data());
                if let Some(gx) = self.slot(adj, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * vg[i / inner];
                    }
                }
                if let Some(gg) = self.slot(adj, *gate) {
                    for i in 0..g.len() {
                        gg[i / inner] += g[i] * vx[i];
                    }
                }
            }
            Op::Conv2d {
                x,
                k,
                stride,
                pad,
                groups,
                padding,
            } => {
                let (sx, sk) = (self.shape(*x), self.shape(*k));
                let geom = ConvGeom {
                    h: sx[1],
                    w: sx[2],
                    cout: sk[0],
                    cin_g: sk[1],
                    cout_g: sk[0] / groups,
                    kh: sk[2],
                    kw: sk[3],
                    ho: out.shape()[1],
                    wo: out.shape()[2],
                    stride: *stride,
                    pad: *pad,
                    padding: *padding,
                };
                let (vx, vk) = (self.value(*x).data(), self.value(*k).data());
                if let Some(gx) = self.slot(adj, *x) {
                    geom.backward_input(g, vk, gx);
                }
                if let Some(gk) = self.slot(adj, *k) {
                    geom.backward_kernel(g, vx, gk);
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                if let Some(gx) = self.slot(adj, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let rows = rstd.len();
                let gam = self.value(*gamma).data();
                if let Some(gx) = self.slot(adj, *x) {
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..d {
                            let gh = g[r * d + j] * gam[j];
                            s1 += gh;
                            s2 += gh * xhat[r * d + j];
                        }
                        let scale = rstd[r] / d as f64;
                        for j in 0..d {
                            let gh = g[r * d + j] * gam[j];
                            gx[r * d + j] +=
                                scale * (d as f64 * gh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                }
                if let Some(gg) = self.slot(adj, *gamma) {
                    for (i, v) in g.iter().enumerate() {
                        gg[i % d] += v * xhat[i];
                    }
                }
                if let Some(gb) = self.slot(adj, *beta) {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % d] += v;
                    }
                }
            }
            Op::Unary(kind, x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.slot(adj, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * unary_derivative(*kind, vx[i]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(adj, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(adj, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MeanTrailing(x) => {
                if let Some(gx) = self.slot(adj, *x) {
                    let inner = gx.len() / g.len();
                    for (i, d) in gx.iter_mut().enumerate() {
                        *d += g[i / inner] / inner as f64;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(adj, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                if let Some(gx) = self.slot(adj, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(*p)[*axis];
                    if let Some(gp) = self.slot(adj, *p) {
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            let dst = &mut gp[o * n * inner..(o + 1) * n * inner];
                            dst.iter_mut()
                                .zip(&g[from..from + n * inner])
                                .for_each(|(d, v)| *d += v);
                        }
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = out.shape()[*axis];
                if let Some(gx) = self.slot(adj, *x) {
                    for o in 0..outer {
                        let from = (o * n + start) * inner;
                        gx[from..from + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Gather { src, indices } => {
                if let Some(gs) = self.slot(adj, *src) {
                    for (&i, v) in indices.iter().zip(g) {
                        gs[i] += v;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                if let Some(gl) = self.slot(adj, *logits) {
                    for (i, p) in probs.iter().enumerate() {
                        let target = if i == *label { 1.0 } else { 0.0 };
                        gl[i] += g[0] * (p - target);
                    }
                }
            }
        }
    }
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (dst, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *dst += av * bv;
            }
        }
    }
    out
}

fn transpose_kernel(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

struct ConvGeom {
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    padding: Padding,
}

/// How a convolution reads positions outside its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    /// Repeats the nearest edge pixel.
    Replicate,
}

impl ConvGeom {
    /// Input coordinate for output position `o` and kernel tap `t`; `None`
    /// when the tap reads zero padding.
    #[inline]
    fn src(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        match self.padding {
            Padding::Zeros => (i >= 0 && (i as usize) < len).then_some(i as usize),
            Padding::Replicate => Some(i.clamp(0, len as isize - 1) as usize),
        }
    }

    /// Calls `f(out_index, in_index, kernel_index)` for every tap that reads the input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for co in 0..self.cout {
            let group = co / self.cout_g;
            for cl in 0..self.cin_g {
                let ci = group * self.cin_g + cl;
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let kidx = ((co * self.cin_g + cl) * self.kh + ky) * self.kw + kx;
                        for oy in 0..self.ho {
                            let Some(iy) = self.src(oy, ky, self.h) else {
                                continue;
                            };
                            for ox in 0..self.wo {
                                let Some(ix) = self.src(ox, kx, self.w) else {
                                    continue;
                                };
                                let oidx = (co * self.ho + oy) * self.wo + ox;
                                let iidx = (ci * self.h + iy) * self.w + ix;
                                f(oidx, iidx, kidx);
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cout * self.ho * self.wo];
        self.for_each_tap(|o, i, kk| out[o] += k[kk] * x[i]);
        out
    }

    fn backward_input(&self, g: &[f64], k: &[f64], gx: &mut [f64]) {
        self.for_each_tap(|o, i, kk| gx[i] += k[kk] * g[o]);
    }

    fn backward_kernel(&self, g: &[f64], x: &[f64], gk: &mut [f64]) {
        self.for_each_tap(|o, i, kk| gk[kk] += x[i] * g[o]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let id = tape.constant(Tensor::eye(2));
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(t2(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let r = tape.matmul(id, a).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.matmul(a, z).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0; 4]);
        let r = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(r).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_dimensions() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2×3]"), "{err}");
    }

    #[test]
    fn conv2d_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap());
        let one = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(x, one, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let zero = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let y = tape.conv2d(x, zero, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let ones = tape.constant(Tensor::ones(&[1, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(ones, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv2d_output_extent_follows_stride_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 7, 8]));
        let k = tape.constant(Tensor::ones(&[3, 2, 3, 3]));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[3, 4, 4]);
    }

    #[test]
    fn replicate_padding_repeats_edges() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 4, 4], 2.0));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d_padded(x, k, 2, 1, 1, Padding::Replicate).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 18.0));
        let z = tape.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.value(z).data()[0], 8.0);
    }

    #[test]
    fn replicate_padding_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0: Vec<f64> = (0..2 * 5 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k0: Vec<f64> = (0..2 * 3 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |xv: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![2, 5, 4], xv.to_vec()).unwrap());
            let k = tape.constant(Tensor::new(vec![2, 1, 3, 3], k0.clone()).unwrap());
            let y = tape.conv2d_padded(x, k, 2, 1, 2, Padding::Replicate).unwrap();
            let y2 = tape.mul(y, y).unwrap();
            let l = tape.sum(y2).unwrap();
            (tape, x, l)
        };
        let (tape, x, l) = loss(&x0);
        let g = tape.backward(l).unwrap().wrt(x);
        let eps = 1e-6;
        for i in 0..x0.len() {
            let (mut p, mut m) = (x0.clone(), x0.clone());
            p[i] += eps;
            m[i] -= eps;
            let (tp, _, lp) = loss(&p);
            let (tm, _, lm) = loss(&m);
            let fd = (tp.value(lp).data()[0] - tm.value(lm).data()[0]) / (2.0 * eps);
            assert_abs_diff_eq!(g.data()[i], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 2]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert!(tape.conv2d(x, k, 1, 0).is_err());
        assert!(tape.conv2d(x, k, 1, 1).is_ok());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::from_vec(vec![7.5; 3]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }

        let x = tape.constant(Tensor::from_vec(vec![0.0, 2f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        assert_abs_diff_eq!(tape.value(y).data()[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(y).data()[1], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[vec![0.0, 1.0], vec![0.0, 1.0]]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let c = tape.constant(Tensor::from_vec(vec![3.0, 3.0]));
        let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let x = tape.constant(Tensor::from_vec(vec![-1.0, 1.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert_abs_diff_eq!(tape.value(y).data()[0], -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(tape.value(y).data()[1], 1.0, epsilon = 1e-9);

        let zero = tape.constant(Tensor::zeros(&[2]));
        let shift = tape.constant(Tensor::from_vec(vec![0.25, -4.0]));
        let x = tape.constant(Tensor::from_vec(vec![5.0, -2.0]));
        let y = tape.layer_norm(x, zero, shift, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -4.0]);
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0, -3.0, 3.0]));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
        let si = tape.silu(x).unwrap();
        assert_eq!(tape.value(si).data()[0], 0.0);
        let ge = tape.gelu(x).unwrap();
        assert_eq!(tape.value(ge).data()[0], 0.0);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let s = tape.sum(w).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(w).data(), &[1.0; 6]);

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        store.insert("b", Tensor::from_vec(vec![3.0])).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let loss = tape.sum(a).unwrap();
        let grads = tape.backward(loss).unwrap().to_store(&store);
        assert_eq!(grads.get("b").unwrap().data(), &[0.0]);
        assert_eq!(grads.get("a").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn non_finite_result_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1e308]));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale", .. }), "{err}");
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::from_vec(vec![0.3; 3]));
        let l = tape.cross_entropy(u, 1).unwrap();
        assert_abs_diff_eq!(tape.value(l).item().unwrap(), 3f64.ln(), epsilon = 1e-12);

        let s = tape.constant(Tensor::from_vec(vec![20.0, -20.0]));
        let l = tape.cross_entropy(s, 0).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-15);

        let c = tape.constant(Tensor::from_vec(vec![0.0, 2f64.ln()]));
        let l = tape.cross_entropy(c, 1).unwrap();
        assert_abs_diff_eq!(
            tape.value(l).item().unwrap(),
            -(2.0f64 / 3.0).ln(),
            epsilon = 1e-12
        );
        assert!(tape.cross_entropy(c, 2).is_err());
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(t2(&[vec![5.0], vec![6.0]]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.narrow(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
        let rows = tape.concat(&[a, a], 0).unwrap();
        assert_eq!(tape.shape(rows), &[4, 2]);
    }

    #[test]
    fn sabotage_flips_only_the_named_rule() {
        let mut tape = Tape::with_sabotage("mul");
        let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(w).data(), &[-2.0, -4.0]);
    }

    #[test]
    fn backward_visits_each_record_once() {
        // w used twice along two paths; the shared node must be accumulated, not revisited.
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![3.0]));
        let a = tape.scale(w, 2.0).unwrap();
        let b = tape.add(a, a).unwrap();
        let s = tape.sum(b).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(w).data(), &[4.0]);
    }
}
