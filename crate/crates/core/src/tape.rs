//! Reverse-mode differentiation tape.
//!
//! Operations append nodes to a [`Tape`]; each node stores its output value
//! and enough bookkeeping to run the chain rule in reverse. The tape is
//! rebuilt for every training step. Nodes whose inputs carry no gradient
//! requirement are recorded as values only and skipped during backward.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    MatMul(ValueId, ValueId),
    Conv3x3 { input: ValueId, weight: ValueId },
    Conv1x1 { input: ValueId, weight: ValueId },
    Relu(ValueId),
    Sigmoid(ValueId),
    Log(ValueId),
    Exp(ValueId),
    Abs(ValueId),
    Sum(ValueId),
    Mean(ValueId),
    Concat { axis: usize, inputs: Vec<ValueId> },
    Upsample2x(ValueId),
    AvgPool2x(ValueId),
    Gather { input: ValueId, indices: Vec<usize> },
    SuffixSum(ValueId),
    Reshape(ValueId),
    Clamp { input: ValueId, lo: f64, hi: f64 },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf, copying its data onto the tape.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Registers constant data that never receives gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<ValueId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "constant: shape {:?} does not match {} values",
                shape,
                data.len()
            )));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data, false))
    }

    pub fn scalar(&mut self, v: f64) -> ValueId {
        self.push(Op::Leaf, vec![1], vec![v], false)
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: ValueId) -> usize {
        self.nodes[id.0].value.len()
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, id: ValueId) -> f64 {
        self.nodes[id.0].value[0]
    }

    pub fn requires_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of a node after `backward`; `None` when none was propagated.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> ValueId {
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
            grad: None,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Elementwise binary ops with trailing-dimension broadcasting ──

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(
        &mut self,
        name: &str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<ValueId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out_shape = broadcast_shapes(sa, sb).ok_or_else(|| {
            Error::shape(format!("{name}: incompatible shapes {:?} vs {:?}", sa, sb))
        })?;
        let out = apply_broadcast(
            &self.nodes[a.0].value,
            sa,
            &self.nodes[b.0].value,
            sb,
            &out_shape,
            f,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(op, out_shape, out, rg))
    }

    // ── Linear algebra and convolution ──

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul: incompatible shapes {:?} vs {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_fwd(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out, rg))
    }

    /// 3x3 convolution, zero padding, stride 1. Input `[N,Ci,H,W]`, weight
    /// `[Co,Ci,3,3]`, output `[N,Co,H,W]`.
    pub fn conv2d_3x3(&mut self, input: ValueId, weight: ValueId) -> Result<ValueId> {
        let (si, sw) = (&self.nodes[input.0].shape, &self.nodes[weight.0].shape);
        if si.len() != 4 || sw.len() != 4 || sw[2] != 3 || sw[3] != 3 || si[1] != sw[1] {
            return Err(Error::shape(format!(
                "conv2d_3x3: incompatible shapes input {:?} vs weight {:?}",
                si, sw
            )));
        }
        let (n, ci, h, w) = (si[0], si[1], si[2], si[3]);
        let co = sw[0];
        let out = conv3x3_fwd(
            &self.nodes[input.0].value,
            n,
            ci,
            h,
            w,
            &self.nodes[weight.0].value,
            co,
        );
        let rg = self.any_grad(&[input, weight]);
        Ok(self.push(Op::Conv3x3 { input, weight }, vec![n, co, h, w], out, rg))
    }

    /// Pointwise (1x1) convolution. Input `[N,Ci,H,W]`, weight `[Co,Ci]`.
    pub fn conv2d_1x1(&mut self, input: ValueId, weight: ValueId) -> Result<ValueId> {
        let (si, sw) = (&self.nodes[input.0].shape, &self.nodes[weight.0].shape);
        if si.len() != 4 || sw.len() != 2 || si[1] != sw[1] {
            return Err(Error::shape(format!(
                "conv2d_1x1: incompatible shapes input {:?} vs weight {:?}",
                si, sw
            )));
        }
        let (n, ci, h, w) = (si[0], si[1], si[2], si[3]);
        let co = sw[0];
        let plane = h * w;
        let mut out = vec![0.0; n * co * plane];
        let inp = &self.nodes[input.0].value;
        let wgt = &self.nodes[weight.0].value;
        for b in 0..n {
            for o in 0..co {
                let dst = &mut out[(b * co + o) * plane..(b * co + o + 1) * plane];
                for c in 0..ci {
                    let wv = wgt[o * ci + c];
                    let src = &inp[(b * ci + c) * plane..(b * ci + c + 1) * plane];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
        let rg = self.any_grad(&[input, weight]);
        Ok(self.push(Op::Conv1x1 { input, weight }, vec![n, co, h, w], out, rg))
    }

    // ── Unary ops ──

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(x, |v| v.max(0.0), |op_x| Op::Relu(op_x))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(x, sigmoid_stable, |op_x| Op::Sigmoid(op_x))
    }

    pub fn log(&mut self, x: ValueId) -> Result<ValueId> {
        if let Some(v) = self.nodes[x.0].value.iter().find(|v| **v <= 0.0) {
            return Err(Error::numeric(format!("log: non-positive input {v}")));
        }
        self.unary(x, f64::ln, |op_x| Op::Log(op_x))
    }

    pub fn exp(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(x, f64::exp, |op_x| Op::Exp(op_x))
    }

    pub fn abs(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(x, f64::abs, |op_x| Op::Abs(op_x))
    }

    pub fn clamp(&mut self, x: ValueId, lo: f64, hi: f64) -> Result<ValueId> {
        if lo >= hi {
            return Err(Error::shape(format!("clamp: empty range [{lo}, {hi}]")));
        }
        self.unary(x, |v| v.clamp(lo, hi), |op_x| Op::Clamp { input: op_x, lo, hi })
    }

    fn unary(
        &mut self,
        x: ValueId,
        f: impl Fn(f64) -> f64,
        op: impl Fn(ValueId) -> Op,
    ) -> Result<ValueId> {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| f(*v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(op(x), shape, out, rg))
    }

    // ── Reductions ──

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let v = self.nodes[x.0].value.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Sum(x), vec![1], vec![v], rg))
    }

    pub fn mean(&mut self, x: ValueId) -> Result<ValueId> {
        let n = self.nodes[x.0].value.len();
        if n == 0 {
            return Err(Error::shape("mean: empty tensor".to_string()));
        }
        let v = self.nodes[x.0].value.iter().sum::<f64>() / n as f64;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Mean(x), vec![1], vec![v], rg))
    }

    // ── Shape ops ──

    pub fn concat(&mut self, axis: usize, inputs: &[ValueId]) -> Result<ValueId> {
        if inputs.is_empty() {
            return Err(Error::shape("concat: no inputs".to_string()));
        }
        let rank = self.nodes[inputs[0].0].shape.len();
        if axis >= rank {
            return Err(Error::shape(format!("concat: axis {axis} out of rank {rank}")));
        }
        let mut out_shape = self.nodes[inputs[0].0].shape.clone();
        out_shape[axis] = 0;
        for id in inputs {
            let s = &self.nodes[id.0].shape;
            if s.len() != rank
                || s.iter()
                    .enumerate()
                    .any(|(i, d)| i != axis && *d != out_shape[i] && out_shape[i] != 0)
            {
                return Err(Error::shape(format!(
                    "concat: mismatched input shape {:?} on axis {axis}",
                    s
                )));
            }
            out_shape[axis] += s[axis];
        }
        let inner: usize = out_shape[axis + 1..].iter().product();
        let outer: usize = out_shape[..axis].iter().product();
        let out_block = out_shape[axis] * inner;
        let mut out = vec![0.0; outer * out_block];
        let mut offset = 0;
        for id in inputs {
            let block = self.nodes[id.0].shape[axis] * inner;
            let src = &self.nodes[id.0].value;
            for row in 0..outer {
                let dst_start = row * out_block + offset;
                out[dst_start..dst_start + block]
                    .copy_from_slice(&src[row * block..(row + 1) * block]);
            }
            offset += block;
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Op::Concat { axis, inputs: inputs.to_vec() },
            out_shape,
            out,
            rg,
        ))
    }

    /// Nearest-neighbor 2x upsampling on `[N,C,H,W]`.
    pub fn upsample2x_nearest(&mut self, x: ValueId) -> Result<ValueId> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 4 {
            return Err(Error::shape(format!("upsample2x_nearest: need 4-d input, got {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![0.0; n * c * 4 * h * w];
        let src = &self.nodes[x.0].value;
        for p in 0..n * c {
            let sp = &src[p * h * w..(p + 1) * h * w];
            let dp = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x_ in 0..2 * w {
                    dp[y * 2 * w + x_] = sp[(y / 2) * w + x_ / 2];
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Upsample2x(x), vec![n, c, 2 * h, 2 * w], out, rg))
    }

    /// 2x2 average pooling with stride 2 on `[N,C,H,W]`; H and W must be even.
    pub fn avgpool2x(&mut self, x: ValueId) -> Result<ValueId> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape(format!("avgpool2x: need 4-d even spatial dims, got {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        let src = &self.nodes[x.0].value;
        for p in 0..n * c {
            let sp = &src[p * h * w..(p + 1) * h * w];
            let dp = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x_ in 0..ow {
                    let base = 2 * y * w + 2 * x_;
                    dp[y * ow + x_] = 0.25 * (sp[base] + sp[base + 1] + sp[base + w] + sp[base + w + 1]);
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::AvgPool2x(x), vec![n, c, oh, ow], out, rg))
    }

    /// Selects elements of the flattened input at the given indices.
    pub fn gather(&mut self, x: ValueId, indices: &[usize]) -> Result<ValueId> {
        let n = self.nodes[x.0].value.len();
        if let Some(bad) = indices.iter().find(|i| **i >= n) {
            return Err(Error::shape(format!("gather: index {bad} out of bounds for {n} elements")));
        }
        let src = &self.nodes[x.0].value;
        let out: Vec<f64> = indices.iter().map(|i| src[*i]).collect();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Op::Gather { input: x, indices: indices.to_vec() },
            vec![indices.len()],
            out,
            rg,
        ))
    }

    /// Suffix sums of a rank-1 tensor: `out[j] = sum(in[j..])`.
    pub fn suffix_sum(&mut self, x: ValueId) -> Result<ValueId> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 1 {
            return Err(Error::shape(format!("suffix_sum: need rank-1 input, got {:?}", s)));
        }
        let src = &self.nodes[x.0].value;
        let mut out = vec![0.0; src.len()];
        let mut acc = 0.0;
        for j in (0..src.len()).rev() {
            acc += src[j];
            out[j] = acc;
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::SuffixSum(x), s.clone(), out, rg))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() {
            return Err(Error::shape(format!(
                "reshape: {:?} incompatible with {} elements",
                shape,
                self.nodes[x.0].value.len()
            )));
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Reshape(x), shape.to_vec(), value, rg))
    }

    // ── Backward ──

    /// Runs the chain rule from a scalar root; every node is visited at most
    /// once in reverse topological (insertion) order.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward: root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: ValueId, g: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].value.len();
        let buf = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; n]);
        for (dst, src) in buf.iter_mut().zip(g) {
            *dst += src;
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let out_shape = self.nodes[idx].shape.clone();
                let ga = reduce_to_shape(g, &out_shape, &self.nodes[a.0].shape);
                self.add_grad(a, &ga);
                let gb = reduce_to_shape(g, &out_shape, &self.nodes[b.0].shape);
                self.add_grad(b, &gb);
            }
            Op::Sub(a, b) => {
                let out_shape = self.nodes[idx].shape.clone();
                let ga = reduce_to_shape(g, &out_shape, &self.nodes[a.0].shape);
                self.add_grad(a, &ga);
                let mut gb = reduce_to_shape(g, &out_shape, &self.nodes[b.0].shape);
                gb.iter_mut().for_each(|v| *v = -*v);
                self.add_grad(b, &gb);
            }
            Op::Mul(a, b) => {
                let out_shape = self.nodes[idx].shape.clone();
                if self.nodes[a.0].requires_grad {
                    let prod = apply_broadcast(
                        g,
                        &out_shape,
                        &self.nodes[b.0].value,
                        &self.nodes[b.0].shape,
                        &out_shape,
                        |x, y| x * y,
                    );
                    let ga = reduce_to_shape(&prod, &out_shape, &self.nodes[a.0].shape);
                    self.add_grad(a, &ga);
                }
                if self.nodes[b.0].requires_grad {
                    let prod = apply_broadcast(
                        g,
                        &out_shape,
                        &self.nodes[a.0].value,
                        &self.nodes[a.0].shape,
                        &out_shape,
                        |x, y| x * y,
                    );
                    let gb = reduce_to_shape(&prod, &out_shape, &self.nodes[b.0].shape);
                    self.add_grad(b, &gb);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    // dA[i,p] = sum_j g[i,j] * B[p,j]
                    let bv = &self.nodes[b.0].value;
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] = s;
                        }
                    }
                    self.add_grad(a, &ga);
                }
                if self.nodes[b.0].requires_grad {
                    // dB[p,j] = sum_i A[i,p] * g[i,j]
                    let av = &self.nodes[a.0].value;
                    let mut gb = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let apv = av[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += apv * g[i * n + j];
                            }
                        }
                    }
                    self.add_grad(b, &gb);
                }
            }
            Op::Conv3x3 { input, weight } => {
                let si = self.nodes[input.0].shape.clone();
                let (n, ci, h, w) = (si[0], si[1], si[2], si[3]);
                let co = self.nodes[weight.0].shape[0];
                if self.nodes[input.0].requires_grad {
                    let gi = conv3x3_bwd_input(g, n, co, h, w, &self.nodes[weight.0].value, ci);
                    self.add_grad(input, &gi);
                }
                if self.nodes[weight.0].requires_grad {
                    let gw =
                        conv3x3_bwd_weight(g, &self.nodes[input.0].value, n, ci, co, h, w);
                    self.add_grad(weight, &gw);
                }
            }
            Op::Conv1x1 { input, weight } => {
                let si = self.nodes[input.0].shape.clone();
                let (n, ci, h, w) = (si[0], si[1], si[2], si[3]);
                let co = self.nodes[weight.0].shape[0];
                let plane = h * w;
                if self.nodes[input.0].requires_grad {
                    let wgt = &self.nodes[weight.0].value;
                    let mut gi = vec![0.0; n * ci * plane];
                    for b in 0..n {
                        for c in 0..ci {
                            let dst = &mut gi[(b * ci + c) * plane..(b * ci + c + 1) * plane];
                            for o in 0..co {
                                let wv = wgt[o * ci + c];
                                let src = &g[(b * co + o) * plane..(b * co + o + 1) * plane];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                    self.add_grad(input, &gi);
                }
                if self.nodes[weight.0].requires_grad {
                    let inp = &self.nodes[input.0].value;
                    let mut gw = vec![0.0; co * ci];
                    for b in 0..n {
                        for o in 0..co {
                            let go = &g[(b * co + o) * plane..(b * co + o + 1) * plane];
                            for c in 0..ci {
                                let iv = &inp[(b * ci + c) * plane..(b * ci + c + 1) * plane];
                                let mut s = 0.0;
                                for (x, y) in go.iter().zip(iv) {
                                    s += x * y;
                                }
                                gw[o * ci + c] += s;
                            }
                        }
                    }
                    self.add_grad(weight, &gw);
                }
            }
            Op::Relu(x) => {
                let gx: Vec<f64> = self.nodes[x.0]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.add_grad(x, &gx);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<f64> = self.nodes[idx]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(s, gv)| gv * s * (1.0 - s))
                    .collect();
                self.add_grad(x, &gx);
            }
            Op::Log(x) => {
                let gx: Vec<f64> = self.nodes[x.0]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(v, gv)| gv / v)
                    .collect();
                self.add_grad(x, &gx);
            }
            Op::Exp(x) => {
                let gx: Vec<f64> = self.nodes[idx]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(e, gv)| gv * e)
                    .collect();
                self.add_grad(x, &gx);
            }
            Op::Abs(x) => {
                let gx: Vec<f64> = self.nodes[x.0]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(v, gv)| gv * sign(*v))
                    .collect();
                self.add_grad(x, &gx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                let gx = vec![g[0]; n];
                self.add_grad(x, &gx);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                let gx = vec![g[0] / n as f64; n];
                self.add_grad(x, &gx);
            }
            Op::Concat { axis, inputs } => {
                let out_shape = self.nodes[idx].shape.clone();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..axis].iter().product();
                let out_block = out_shape[axis] * inner;
                let mut offset = 0;
                for id in inputs {
                    let block = self.nodes[id.0].shape[axis] * inner;
                    if self.nodes[id.0].requires_grad {
                        let mut gi = vec![0.0; outer * block];
                        for row in 0..outer {
                            gi[row * block..(row + 1) * block].copy_from_slice(
                                &g[row * out_block + offset..row * out_block + offset + block],
                            );
                        }
                        self.add_grad(id, &gi);
                    }
                    offset += block;
                }
            }
            Op::Upsample2x(x) => {
                let s = self.nodes[x.0].shape.clone();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dp = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for x_ in 0..2 * w {
                            dp[(y / 2) * w + x_ / 2] += gp[y * 2 * w + x_];
                        }
                    }
                }
                self.add_grad(x, &gx);
            }
            Op::AvgPool2x(x) => {
                let s = self.nodes[x.0].shape.clone();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dp = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for x_ in 0..ow {
                            let gv = 0.25 * gp[y * ow + x_];
                            let base = 2 * y * w + 2 * x_;
                            dp[base] += gv;
                            dp[base + 1] += gv;
                            dp[base + w] += gv;
                            dp[base + w + 1] += gv;
                        }
                    }
                }
                self.add_grad(x, &gx);
            }
            Op::Gather { input, indices } => {
                if self.nodes[input.0].requires_grad {
                    let mut gi = vec![0.0; self.nodes[input.0].value.len()];
                    for (j, i) in indices.iter().enumerate() {
                        gi[*i] += g[j];
                    }
                    self.add_grad(input, &gi);
                }
            }
            Op::SuffixSum(x) => {
                // out[j] = sum_{k>=j} in[k]  =>  d in[k] = sum_{j<=k} g[j]
                let mut gx = vec![0.0; g.len()];
                let mut acc = 0.0;
                for (k, gv) in g.iter().enumerate() {
                    acc += gv;
                    gx[k] = acc;
                }
                self.add_grad(x, &gx);
            }
            Op::Reshape(x) => {
                self.add_grad(x, g);
            }
            Op::Clamp { input, lo, hi } => {
                let gx: Vec<f64> = self.nodes[input.0]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(v, gv)| if *v > lo && *v < hi { *gv } else { 0.0 })
                    .collect();
                self.add_grad(input, &gx);
            }
        }
    }

    /// Accumulates the tape gradient of `id` into a parameter tensor.
    pub fn grad_into(&self, id: ValueId, param: &mut Tensor) -> Result<()> {
        if let Some(g) = self.grad(id) {
            param.accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_fwd(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let (dst, src) = (&mut out[i * n..(i + 1) * n], &b[p * n..(p + 1) * n]);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += av * s;
            }
        }
    }
    out
}

/// `dst[y][x] += a * src[y+dy][x+dx]` over the valid overlap.
#[inline]
fn shifted_axpy(dst: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize, a: f64) {
    let y_lo = (-dy).max(0) as usize;
    let y_hi = (h as isize - dy.max(0)) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx.max(0)) as usize;
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * w + x_lo..y * w + x_hi];
        let s = &src[sy * w + (x_lo as isize + dx) as usize..];
        for (dv, sv) in d.iter_mut().zip(s) {
            *dv += a * sv;
        }
    }
}

/// `sum over valid (y,x) of a[y][x] * b[y+dy][x+dx]`.
#[inline]
fn shifted_dot(a: &[f64], b: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let y_lo = (-dy).max(0) as usize;
    let y_hi = (h as isize - dy.max(0)) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx.max(0)) as usize;
    let mut acc = 0.0;
    for y in y_lo..y_hi {
        let by = (y as isize + dy) as usize;
        let ar = &a[y * w + x_lo..y * w + x_hi];
        let br = &b[by * w + (x_lo as isize + dx) as usize..];
        for (av, bv) in ar.iter().zip(br) {
            acc += av * bv;
        }
    }
    acc
}

fn conv3x3_fwd(inp: &[f64], n: usize, ci: usize, h: usize, w: usize, wgt: &[f64], co: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; n * co * plane];
    for b in 0..n {
        for o in 0..co {
            let dst = &mut out[(b * co + o) * plane..(b * co + o + 1) * plane];
            for c in 0..ci {
                let src = &inp[(b * ci + c) * plane..(b * ci + c + 1) * plane];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = wgt[((o * ci + c) * 3 + ky) * 3 + kx];
                        shifted_axpy(dst, src, h, w, ky as isize - 1, kx as isize - 1, wv);
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_bwd_input(gout: &[f64], n: usize, co: usize, h: usize, w: usize, wgt: &[f64], ci: usize) -> Vec<f64> {
    let plane = h * w;
    let mut gi = vec![0.0; n * ci * plane];
    for b in 0..n {
        for c in 0..ci {
            let dst = &mut gi[(b * ci + c) * plane..(b * ci + c + 1) * plane];
            for o in 0..co {
                let src = &gout[(b * co + o) * plane..(b * co + o + 1) * plane];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = wgt[((o * ci + c) * 3 + ky) * 3 + kx];
                        // input pixel (y+dy, x+dx) received weight wv from output (y, x)
                        shifted_axpy(dst, src, h, w, 1 - ky as isize, 1 - kx as isize, wv);
                    }
                }
            }
        }
    }
    gi
}

fn conv3x3_bwd_weight(gout: &[f64], inp: &[f64], n: usize, ci: usize, co: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut gw = vec![0.0; co * ci * 9];
    for b in 0..n {
        for o in 0..co {
            let go = &gout[(b * co + o) * plane..(b * co + o + 1) * plane];
            for c in 0..ci {
                let iv = &inp[(b * ci + c) * plane..(b * ci + c + 1) * plane];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        gw[((o * ci + c) * 3 + ky) * 3 + kx] +=
                            shifted_dot(go, iv, h, w, ky as isize - 1, kx as isize - 1);
                    }
                }
            }
        }
    }
    gw
}

/// Broadcast-compatible output shape under trailing-dimension alignment.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

fn padded_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    // Stride 0 marks a broadcast dimension.
    let mut strides = vec![0usize; out_rank];
    let offset = out_rank - shape.len();
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn apply_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect();
    }
    if b.len() == 1 {
        return a.iter().map(|x| f(*x, b[0])).collect();
    }
    if a.len() == 1 {
        return b.iter().map(|y| f(a[0], *y)).collect();
    }
    let rank = out_shape.len();
    let sa = padded_strides(a_shape, rank);
    let sb = padded_strides(b_shape, rank);
    let inner = out_shape[rank - 1];
    let outer = numel / inner.max(1);
    let (sa_last, sb_last) = (sa[rank - 1], sb[rank - 1]);
    let mut out = vec![0.0; numel];
    let mut idx = vec![0usize; rank - 1];
    let mut a_base = 0usize;
    let mut b_base = 0usize;
    for row in 0..outer {
        let dst = &mut out[row * inner..(row + 1) * inner];
        for (x, d) in dst.iter_mut().enumerate() {
            *d = f(a[a_base + x * sa_last], b[b_base + x * sb_last]);
        }
        // odometer over leading dims
        for dim in (0..rank - 1).rev() {
            idx[dim] += 1;
            a_base += sa[dim];
            b_base += sb[dim];
            if idx[dim] < out_shape[dim] {
                break;
            }
            a_base -= sa[dim] * out_shape[dim];
            b_base -= sb[dim] * out_shape[dim];
            idx[dim] = 0;
        }
    }
    out
}

/// Sums a gradient of `from_shape` down to `to_shape` (the broadcast inverse).
fn reduce_to_shape(g: &[f64], from_shape: &[usize], to_shape: &[usize]) -> Vec<f64> {
    if from_shape == to_shape {
        return g.to_vec();
    }
    let to_numel: usize = to_shape.iter().product();
    if to_numel == 1 {
        return vec![g.iter().sum()];
    }
    let rank = from_shape.len();
    let st = padded_strides(to_shape, rank);
    let inner = from_shape[rank - 1];
    let outer = g.len() / inner.max(1);
    let st_last = st[rank - 1];
    let mut out = vec![0.0; to_numel];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for row in 0..outer {
        let src = &g[row * inner..(row + 1) * inner];
        for (x, s) in src.iter().enumerate() {
            out[base + x * st_last] += s;
        }
        for dim in (0..rank - 1).rev() {
            idx[dim] += 1;
            base += st[dim];
            if idx[dim] < from_shape[dim] {
                break;
            }
            base -= st[dim] * from_shape[dim];
            idx[dim] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>, rg: bool) -> ValueId {
        let mut t = Tensor::from_vec(shape, data).unwrap();
        t.set_requires_grad(rg);
        tape.leaf(&t)
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], vec![1.0, 2.0], false);
        let b = leaf(&mut tape, &[2], vec![3.0, 4.0], false);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], vec![0.0], false);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s), &[0.5]);
    }

    #[test]
    fn conv3x3_identity_center_kernel() {
        // center-tap kernel reproduces the input everywhere (zero padding
        // contributes nothing for the identity tap)
        let mut tape = Tape::new();
        let input = leaf(&mut tape, &[1, 1, 5, 5], vec![1.0; 25], false);
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let w = leaf(&mut tape, &[1, 1, 3, 3], kernel, false);
        let out = tape.conv2d_3x3(input, w).unwrap();
        assert_eq!(tape.value(out), &[1.0; 25]);
    }

    #[test]
    fn conv3x3_matches_direct_convolution_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (n, ci, co, h, w) = (2, 3, 4, 5, 6);
        let inp: Vec<f64> = (0..n * ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wgt: Vec<f64> = (0..co * ci * 9).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let i = leaf(&mut tape, &[n, ci, h, w], inp.clone(), false);
        let k = leaf(&mut tape, &[co, ci, 3, 3], wgt.clone(), false);
        let out = tape.conv2d_3x3(i, k).unwrap();

        // oracle: direct summation over all offsets
        let mut expect = vec![0.0; n * co * h * w];
        for b in 0..n {
            for o in 0..co {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for dy in -1isize..=1 {
                                for dx in -1isize..=1 {
                                    let (sy, sx) = (y + dy, x + dx);
                                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let iv = inp[((b * ci + c) * h + sy as usize) * w + sx as usize];
                                    let wv = wgt[((o * ci + c) * 3 + (dy + 1) as usize) * 3 + (dx + 1) as usize];
                                    acc += iv * wv;
                                }
                            }
                        }
                        expect[((b * co + o) * h + y as usize) * w + x as usize] = acc;
                    }
                }
            }
        }
        for (got, want) in tape.value(out).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![1.0, 2.0, 3.0], true);
        let sq = tape.mul(x, x).unwrap();
        let root = tape.sum(sq).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_mean_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], vec![0.0], true);
        let s = tape.sigmoid(x).unwrap();
        let root = tape.mean(s).unwrap();
        tape.backward(root).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_accumulates_across_reuse() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], vec![5.0], true);
        let s = tape.add(x, x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0], true);
        let y = tape.relu(x).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 0.0], false);
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn shape_mismatch_diagnostic_names_kind() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], vec![0.0; 6], false);
        let b = leaf(&mut tape, &[4], vec![0.0; 4], false);
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn broadcast_bias_add_over_channels() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 2, 2], vec![0.0; 8], true);
        let bias = leaf(&mut tape, &[2, 1, 1], vec![1.0, 2.0], true);
        let y = tape.add(x, bias).unwrap();
        assert_eq!(tape.value(y), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(bias).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn suffix_sum_and_gather() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[4], vec![1.0, 2.0, 3.0, 4.0], true);
        let s = tape.suffix_sum(x).unwrap();
        assert_eq!(tape.value(s), &[10.0, 9.0, 7.0, 4.0]);
        let g = tape.gather(s, &[0, 2]).unwrap();
        assert_eq!(tape.value(g), &[10.0, 7.0]);
        let root = tape.sum(g).unwrap();
        tape.backward(root).unwrap();
        // d root / d x[k] = #{selected j <= k with j in {0,2}}
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_roundtrip_gradient() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], true);
        let b = leaf(&mut tape, &[1, 2, 2, 2], vec![5.0; 8], true);
        let c = tape.concat(1, &[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[1, 3, 2, 2]);
        let two = tape.scalar(2.0);
        let scaled = tape.mul(c, two).unwrap();
        let root = tape.sum(scaled).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0; 4]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0; 8]);
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 4, 4], (0..16).map(|v| v as f64).collect(), false);
        let p = tape.avgpool2x(x).unwrap();
        assert_eq!(tape.shape(p), &[1, 1, 2, 2]);
        assert_eq!(tape.value(p), &[2.5, 4.5, 10.5, 12.5]);
        let u = tape.upsample2x_nearest(p).unwrap();
        assert_eq!(tape.shape(u), &[1, 1, 4, 4]);
        assert_eq!(tape.value(u)[0..4], [2.5, 2.5, 4.5, 4.5]);
    }

    #[test]
    fn determinism_bit_identical_across_reruns() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            let t = Tensor::he_uniform(&[1, 2, 4, 4], 18, &mut rng);
            let k = Tensor::he_uniform(&[3, 2, 3, 3], 18, &mut rng);
            let mut tape = Tape::new();
            let x = tape.leaf(&t);
            let w = tape.leaf(&k);
            let c = tape.conv2d_3x3(x, w).unwrap();
            let r = tape.relu(c).unwrap();
            let m = tape.mean(r).unwrap();
            tape.value(m).to_vec()
        };
        assert_eq!(run(), run());
    }
}
