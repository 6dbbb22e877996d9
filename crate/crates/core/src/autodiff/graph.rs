use std::collections::HashMap;

use super::params::ParamStore;
use super::{AutodiffError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One bilinear read for [`Graph::bilinear_gather`]: `out[row] += weight *
/// map[view](x, y)` where `(x, y)` are continuous cell coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub view: usize,
    pub x: f64,
    pub y: f64,
    pub row: usize,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        in_width: usize,
        start: usize,
        width: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
        row_len: usize,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
        cols: usize,
    },
    ReduceMax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    WeightedSum {
        x: Var,
        w: Vec<f64>,
    },
    AvgPool2 {
        x: Var,
        batch: usize,
        h: usize,
        w: usize,
        c: usize,
    },
    Bilinear {
        map: Var,
        uv: Var,
        h: usize,
        w: usize,
    },
    BilinearGather {
        map: Var,
        points: Vec<SamplePoint>,
        h: usize,
        w: usize,
        c: usize,
    },
    SmoothL1 {
        x: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        beta: f64,
    },
    Focal {
        x: Var,
        target: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    BceLogits {
        x: Var,
        target: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Append-only tape of operations. Node order is a topological order, and
/// [`Graph::backward`] walks it in reverse.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
}

/// Result of a backward pass: one optional gradient buffer per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
            grad: None,
        }
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var, AutodiffError> {
        let t = Tensor::new(shape, value)?;
        Ok(self.push(t.shape, t.data, Op::Leaf))
    }

    /// Registers a leaf that receives a gradient (not tied to a parameter store).
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: t.data.clone(),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers (once per graph) the named parameter from `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, AutodiffError> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| AutodiffError::Contract(format!("unknown parameter `{name}`")))?;
        let v = self.variable(t);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.param_order
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            if i == loss.0 {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and accumulates parameter gradients into `store`.
    /// Calling it twice without zeroing the store sums both passes.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<(), AutodiffError> {
        let grads = self.backward(loss)?;
        for (name, v) in &self.param_order {
            if let (Some(g), Some(t)) = (grads.wrt(*v), store.get_mut(name)) {
                t.accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => acc(grads, *x, g),
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].shape);
                let n = self.nodes[b.0].shape[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    // dA = G · Bᵀ
                    gemm(m, n, k, g, (n, 1), self.value(*b), (1, n), &mut da);
                    acc(grads, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    // dB = Aᵀ · G
                    gemm(k, m, n, self.value(*a), (1, k), g, (n, 1), &mut db);
                    acc(grads, *b, &db);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = dims2(&self.nodes[x.0].shape);
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] = g[c * m + r];
                    }
                }
                acc(grads, *x, &dx);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g);
                if self.needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    acc(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b)).map(|(g, b)| g * b).collect();
                    acc(grads, *a, &d);
                }
                if self.needs(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a)).map(|(g, a)| g * a).collect();
                    acc(grads, *b, &d);
                }
            }
            Op::AddRow(x, row) => {
                acc(grads, *x, g);
                if self.needs(*row) {
                    let n = self.nodes[row.0].value.len();
                    let mut d = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        axpy(&mut d, 1.0, chunk);
                    }
                    acc(grads, *row, &d);
                }
            }
            Op::Scale(x, s) => {
                let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                acc(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(grads, *x, &d);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(grads, *x, &d);
            }
            Op::Exp(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * y).collect();
                acc(grads, *x, &d);
            }
            Op::Log(x) => {
                let d: Vec<f64> = g.iter().zip(self.value(*x)).map(|(g, x)| g / x).collect();
                acc(grads, *x, &d);
            }
            Op::Abs(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(g, x)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(grads, *x, &d);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let mut d = vec![0.0; out.len()];
                for o in 0..*outer {
                    for inn in 0..*inner {
                        let base = o * len * inner + inn;
                        let mut s = 0.0;
                        for k in 0..*len {
                            let idx = base + k * inner;
                            s += g[idx] * out[idx];
                        }
                        for k in 0..*len {
                            let idx = base + k * inner;
                            d[idx] = out[idx] * (g[idx] - s);
                        }
                    }
                }
                acc(grads, *x, &d);
            }
            Op::LogSoftmax {
                x,
                outer,
                len,
                inner,
            } => {
                let mut d = vec![0.0; out.len()];
                for o in 0..*outer {
                    for inn in 0..*inner {
                        let base = o * len * inner + inn;
                        let mut s = 0.0;
                        for k in 0..*len {
                            s += g[base + k * inner];
                        }
                        for k in 0..*len {
                            let idx = base + k * inner;
                            d[idx] = g[idx] - out[idx].exp() * s;
                        }
                    }
                }
                acc(grads, *x, &d);
            }
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (v, w) in inputs.iter().zip(widths) {
                    if self.needs(*v) {
                        let mut d = vec![0.0; outer * w];
                        for o in 0..*outer {
                            d[o * w..(o + 1) * w]
                                .copy_from_slice(&g[o * total + offset..o * total + offset + w]);
                        }
                        acc(grads, *v, &d);
                    }
                    offset += w;
                }
            }
            Op::Slice {
                x,
                outer,
                in_width,
                start,
                width,
            } => {
                let mut d = vec![0.0; outer * in_width];
                for o in 0..*outer {
                    d[o * in_width + start..o * in_width + start + width]
                        .copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                acc(grads, *x, &d);
            }
            Op::GatherRows { x, idx, row_len } => {
                let mut d = vec![0.0; self.nodes[x.0].value.len()];
                for (r, &src) in idx.iter().enumerate() {
                    axpy(
                        &mut d[src * row_len..(src + 1) * row_len],
                        1.0,
                        &g[r * row_len..(r + 1) * row_len],
                    );
                }
                acc(grads, *x, &d);
            }
            Op::Pick { x, idx, cols } => {
                let mut d = vec![0.0; self.nodes[x.0].value.len()];
                for (r, &c) in idx.iter().enumerate() {
                    d[r * cols + c] += g[r];
                }
                acc(grads, *x, &d);
            }
            Op::ReduceMax {
                x,
                outer,
                len,
                inner,
                argmax,
            } => {
                let mut d = vec![0.0; self.nodes[x.0].value.len()];
                for o in 0..*outer {
                    for inn in 0..*inner {
                        let k = argmax[o * inner + inn];
                        d[o * len * inner + k * inner + inn] += g[o * inner + inn];
                    }
                }
                acc(grads, *x, &d);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                acc(grads, *x, &vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                acc(grads, *x, &vec![g[0] / n as f64; n]);
            }
            Op::WeightedSum { x, w } => {
                let d: Vec<f64> = w.iter().map(|w| w * g[0]).collect();
                acc(grads, *x, &d);
            }
            Op::AvgPool2 { x, batch, h, w, c } => {
                let (oh, ow) = (h / 2, w / 2);
                let mut d = vec![0.0; batch * h * w * c];
                for b in 0..*batch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gi = ((b * oh + oy) * ow + ox) * c;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let ii = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                                axpy(&mut d[ii..ii + c], 0.25, &g[gi..gi + c]);
                            }
                        }
                    }
                }
                acc(grads, *x, &d);
            }
            Op::Bilinear { map, uv, h, w } => {
                let uvv = self.value(*uv);
                let cell = BilinearCell::new(uvv[0], uvv[1], *h, *w);
                let c = g.len();
                let mv = self.value(*map);
                let plane = h * w;
                if self.needs(*map) {
                    let mut d = vec![0.0; c * plane];
                    for ch in 0..c {
                        for (idx, wt) in cell.taps() {
                            d[ch * plane + idx] += wt * g[ch];
                        }
                    }
                    acc(grads, *map, &d);
                }
                if self.needs(*uv) {
                    let mut du = 0.0;
                    let mut dv = 0.0;
                    for ch in 0..c {
                        let m = &mv[ch * plane..(ch + 1) * plane];
                        let (gu, gv) = cell.coord_grad(m);
                        du += g[ch] * gu;
                        dv += g[ch] * gv;
                    }
                    acc(grads, *uv, &[du, dv]);
                }
            }
            Op::BilinearGather {
                map,
                points,
                h,
                w,
                c,
            } => {
                let mut d = vec![0.0; self.nodes[map.0].value.len()];
                for p in points {
                    let cell = BilinearCell::new(p.x, p.y, *h, *w);
                    let grow = &g[p.row * c..(p.row + 1) * c];
                    for (idx, wt) in cell.taps() {
                        let base = (p.view * h * w + idx) * c;
                        axpy(&mut d[base..base + c], wt * p.weight, grow);
                    }
                }
                acc(grads, *map, &d);
            }
            Op::SmoothL1 {
                x,
                target,
                weight,
                beta,
            } => {
                let d: Vec<f64> = self
                    .value(*x)
                    .iter()
                    .zip(target)
                    .zip(weight)
                    .zip(g)
                    .map(|(((x, t), w), g)| {
                        let diff = x - t;
                        let slope = if diff.abs() < *beta {
                            diff / beta
                        } else {
                            diff.signum()
                        };
                        g * w * slope
                    })
                    .collect();
                acc(grads, *x, &d);
            }
            Op::Focal {
                x,
                target,
                alpha,
                gamma,
            } => {
                let d: Vec<f64> = self
                    .value(*x)
                    .iter()
                    .zip(target)
                    .zip(g)
                    .map(|((x, t), g)| g * focal_grad(*x, *t, *alpha, *gamma))
                    .collect();
                acc(grads, *x, &d);
            }
            Op::BceLogits { x, target } => {
                let d: Vec<f64> = self
                    .value(*x)
                    .iter()
                    .zip(target)
                    .zip(g)
                    .map(|((x, t), g)| g * (sigmoid(*x) - t))
                    .collect();
                acc(grads, *x, &d);
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
            vec![*a, *b]
        }
        Op::Transpose(x)
        | Op::Reshape(x)
        | Op::Scale(x, _)
        | Op::Sigmoid(x)
        | Op::Relu(x)
        | Op::Exp(x)
        | Op::Log(x)
        | Op::Abs(x)
        | Op::Sum(x)
        | Op::Mean(x) => vec![*x],
        Op::Softmax { x, .. }
        | Op::LogSoftmax { x, .. }
        | Op::Slice { x, .. }
        | Op::GatherRows { x, .. }
        | Op::Pick { x, .. }
        | Op::ReduceMax { x, .. }
        | Op::WeightedSum { x, .. }
        | Op::AvgPool2 { x, .. }
        | Op::SmoothL1 { x, .. }
        | Op::Focal { x, .. }
        | Op::BceLogits { x, .. } => vec![*x],
        Op::Concat { inputs, .. } => inputs.clone(),
        Op::Bilinear { map, uv, .. } => vec![*map, *uv],
        Op::BilinearGather { map, .. } => vec![*map],
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(buf) => axpy(buf, 1.0, d),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

pub(crate) fn dims2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
/// `c[m×n] = a[m×k] · b[k×n]` with `(row, col)` element strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
) {
    assert!(c.len() == m * n && a.len() >= m * k && b.len() >= k * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn focal_value(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    if t == 1.0 {
        alpha * (1.0 - p).powf(gamma) * softplus(-x)
    } else if t == 0.0 {
        (1.0 - alpha) * p.powf(gamma) * softplus(x)
    } else {
        let pt = p * t + (1.0 - p) * (1.0 - t);
        let at = alpha * t + (1.0 - alpha) * (1.0 - t);
        -at * (1.0 - pt).powf(gamma) * pt.max(1e-300).ln()
    }
}

fn focal_grad(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    if t == 1.0 {
        // ln p = -softplus(-x)
        alpha * (1.0 - p).powf(gamma) * (-gamma * p * softplus(-x) - (1.0 - p))
    } else if t == 0.0 {
        // ln(1-p) = -softplus(x)
        (1.0 - alpha) * p.powf(gamma) * (p + gamma * (1.0 - p) * softplus(x))
    } else {
        let pt = (p * t + (1.0 - p) * (1.0 - t)).max(1e-300);
        let at = alpha * t + (1.0 - alpha) * (1.0 - t);
        let dl_dpt =
            -at * (-gamma * (1.0 - pt).powf(gamma - 1.0) * pt.ln() + (1.0 - pt).powf(gamma) / pt);
        dl_dpt * (2.0 * t - 1.0) * p * (1.0 - p)
    }
}

/// The four taps of a bilinear read at continuous `(u, v)` on an `h × w` grid.
/// At integer coordinates the cell to the right/below is used, except on the
/// last row/column where the cell to the left/above is used.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearCell {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    w: usize,
}

impl BilinearCell {
    pub(crate) fn new(u: f64, v: f64, h: usize, w: usize) -> Self {
        let (x0, x1, fx) = axis_taps(u, w);
        let (y0, y1, fy) = axis_taps(v, h);
        Self {
            x0,
            y0,
            x1,
            y1,
            fx,
            fy,
            w,
        }
    }

    pub(crate) fn taps(&self) -> [(usize, f64); 4] {
        let w = self.w;
        [
            (self.y0 * w + self.x0, (1.0 - self.fx) * (1.0 - self.fy)),
            (self.y0 * w + self.x1, self.fx * (1.0 - self.fy)),
            (self.y1 * w + self.x0, (1.0 - self.fx) * self.fy),
            (self.y1 * w + self.x1, self.fx * self.fy),
        ]
    }

    pub(crate) fn sample(&self, plane: &[f64]) -> f64 {
        self.taps().iter().map(|(i, wt)| plane[*i] * wt).sum()
    }

    fn coord_grad(&self, plane: &[f64]) -> (f64, f64) {
        let w = self.w;
        let a = plane[self.y0 * w + self.x0];
        let b = plane[self.y0 * w + self.x1];
        let c = plane[self.y1 * w + self.x0];
        let d = plane[self.y1 * w + self.x1];
        let (sx, sy) = (
            if self.x1 == self.x0 { 0.0 } else { 1.0 },
            if self.y1 == self.y0 { 0.0 } else { 1.0 },
        );
        let du = sx * ((b - a) * (1.0 - self.fy) + (d - c) * self.fy);
        let dv = sy * ((c - a) * (1.0 - self.fx) + (d - b) * self.fx);
        (du, dv)
    }
}

fn axis_taps(t: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let mut i0 = t.floor() as usize;
    if i0 >= n - 1 {
        i0 = n - 2;
    }
    (i0, i0 + 1, t - i0 as f64)
}
