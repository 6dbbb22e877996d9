use super::graph::{axpy, dims2, dot, focal_value, gemm, sigmoid, softplus, BilinearCell, Op};
use super::{AutodiffError, Graph, SamplePoint, Var};

fn dim_err(msg: String) -> AutodiffError {
    AutodiffError::Dimension(msg)
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), AutodiffError> {
    if axis >= shape.len() {
        return Err(dim_err(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Graph {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn two_d(&self, v: Var, op: &str) -> Result<(usize, usize), AutodiffError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(dim_err(format!("{op}: expected a matrix, got shape {s:?}")));
        }
        Ok(dims2(s))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.two_d(a, "matmul")?;
        let (k2, n) = self.two_d(b, "matmul")?;
        if k != k2 {
            return Err(dim_err(format!(
                "matmul: inner dimensions of {:?} and {:?} disagree",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            (k, 1),
            self.value(b),
            (n, 1),
            &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.two_d(x, "transpose")?;
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = xv[r * n + c];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "add")?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "sub")?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, v, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "hadamard")?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, v, Op::Mul(a, b)))
    }

    /// `x[m×n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.two_d(x, "add_row")?;
        if self.value(row).len() != n {
            return Err(dim_err(format!(
                "add_row: row of shape {:?} does not match {:?}",
                self.shape(row),
                self.shape(x)
            )));
        }
        let rv = self.value(row);
        let mut v = self.value(x).to_vec();
        for r in 0..m {
            axpy(&mut v[r * n..(r + 1) * n], 1.0, rv);
        }
        Ok(self.push(vec![m, n], v, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    /// Numerically stable softmax along `axis` (per-slice max is subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        if len == 0 {
            return Err(dim_err("softmax: empty axis".into()));
        }
        let mut out = self.value(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mx = (0..len)
                    .map(|k| out[base + k * inner])
                    .fold(f64::MIN, f64::max);
                let mut s = 0.0;
                for k in 0..len {
                    let e = (out[base + k * inner] - mx).exp();
                    out[base + k * inner] = e;
                    s += e;
                }
                for k in 0..len {
                    out[base + k * inner] /= s;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        if len == 0 {
            return Err(dim_err("log_softmax: empty axis".into()));
        }
        let mut out = self.value(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mx = (0..len)
                    .map(|k| out[base + k * inner])
                    .fold(f64::MIN, f64::max);
                let lse = mx
                    + (0..len)
                        .map(|k| (out[base + k * inner] - mx).exp())
                        .sum::<f64>()
                        .ln();
                for k in 0..len {
                    out[base + k * inner] -= lse;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LogSoftmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = inputs
            .first()
            .ok_or_else(|| dim_err("concat: no inputs".into()))?;
        let base_shape = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis(&base_shape, axis)?;
        let mut widths = Vec::with_capacity(inputs.len());
        let mut axis_total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(dim_err(format!(
                    "concat: shape {s:?} incompatible with {base_shape:?} on axis {axis}"
                )));
            }
            widths.push(s[axis] * inner);
            axis_total += s[axis];
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; outer * total];
        let mut offset = 0;
        for (v, w) in inputs.iter().zip(&widths) {
            let src = self.value(*v);
            for o in 0..outer {
                out[o * total + offset..o * total + offset + w]
                    .copy_from_slice(&src[o * w..(o + 1) * w]);
            }
            offset += w;
        }
        let mut shape = base_shape;
        shape[axis] = axis_total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if start + len > n || len == 0 {
            return Err(dim_err(format!(
                "slice: [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let in_width = n * inner;
        let width = len * inner;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            out.extend_from_slice(
                &xv[o * in_width + start * inner..o * in_width + start * inner + width],
            );
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(
            new_shape,
            out,
            Op::Slice {
                x,
                outer,
                in_width,
                start: start * inner,
                width,
            },
        ))
    }

    /// Selects rows (first-axis entries) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        let row_len: usize = shape[1..].iter().product();
        if let Some(bad) = idx.iter().find(|i| **i >= rows) {
            return Err(dim_err(format!(
                "gather_rows: index {bad} out of range for {shape:?}"
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * row_len);
        for &i in idx {
            out.extend_from_slice(&xv[i * row_len..(i + 1) * row_len]);
        }
        let mut new_shape = shape;
        new_shape[0] = idx.len();
        Ok(self.push(
            new_shape,
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                row_len,
            },
        ))
    }

    /// For `x[m×n]`, returns `[x[i, idx[i]]]` of length `m`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let (m, n) = self.two_d(x, "pick")?;
        if idx.len() != m || idx.iter().any(|c| *c >= n) {
            return Err(dim_err(format!(
                "pick: indices do not fit {:?}",
                self.shape(x)
            )));
        }
        let xv = self.value(x);
        let out = idx.iter().enumerate().map(|(r, c)| xv[r * n + c]).collect();
        Ok(self.push(
            vec![m],
            out,
            Op::Pick {
                x,
                idx: idx.to_vec(),
                cols: n,
            },
        ))
    }

    /// Max along `axis`. The gradient goes to the first maximal entry.
    pub fn reduce_max(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        if len == 0 {
            return Err(dim_err("reduce_max: empty axis".into()));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = 0;
                for k in 1..len {
                    if xv[base + k * inner] > xv[base + best * inner] {
                        best = k;
                    }
                }
                out[o * inner + i] = xv[base + best * inner];
                argmax[o * inner + i] = best;
            }
        }
        let mut new_shape: Vec<usize> = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        Ok(self.push(
            new_shape,
            out,
            Op::ReduceMax {
                x,
                outer,
                len,
                inner,
                argmax,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(dim_err("reduce_mean: empty tensor".into()));
        }
        let s = self.value(x).iter().sum::<f64>() / n as f64;
        Ok(self.push(vec![1], vec![s], Op::Mean(x)))
    }

    /// `Σ w_i x_i` against a constant weight vector.
    pub fn weighted_sum(&mut self, x: Var, w: &[f64]) -> Result<Var, AutodiffError> {
        if w.len() != self.value(x).len() {
            return Err(dim_err(format!(
                "weighted_sum: {} weights for shape {:?}",
                w.len(),
                self.shape(x)
            )));
        }
        let s = dot(self.value(x), w);
        Ok(self.push(vec![1], vec![s], Op::WeightedSum { x, w: w.to_vec() }))
    }

    /// 2×2 mean pool of a channel-last `[batch, h, w, c]` map.
    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || !shape[1].is_multiple_of(2) || !shape[2].is_multiple_of(2) {
            return Err(dim_err(format!(
                "avg_pool2x2: need [b, even h, even w, c], got {shape:?}"
            )));
        }
        let (batch, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = vec![0.0; batch * oh * ow * c];
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let oi = ((b * oh + oy) * ow + ox) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let ii = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                        axpy(&mut out[oi..oi + c], 0.25, &xv[ii..ii + c]);
                    }
                }
            }
        }
        Ok(self.push(
            vec![batch, oh, ow, c],
            out,
            Op::AvgPool2 { x, batch, h, w, c },
        ))
    }

    /// Bilinear read of a `[C, H, W]` map at `uv = [u, v]` (u along width).
    /// Differentiable with respect to both the map and the coordinates.
    pub fn bilinear_sample(&mut self, map: Var, uv: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(map).to_vec();
        if shape.len() != 3 || self.value(uv).len() != 2 {
            return Err(dim_err(format!(
                "bilinear_sample: need [C, H, W] map and 2 coordinates, got {shape:?} and {:?}",
                self.shape(uv)
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (u, v) = (self.value(uv)[0], self.value(uv)[1]);
        check_in_bounds(u, v, h, w)?;
        let cell = BilinearCell::new(u, v, h, w);
        let mv = self.value(map);
        let out = (0..c)
            .map(|ch| cell.sample(&mv[ch * h * w..(ch + 1) * h * w]))
            .collect();
        Ok(self.push(vec![c], out, Op::Bilinear { map, uv, h, w }))
    }

    /// Batched bilinear reads from a channel-last `[views, h, w, c]` map into
    /// an `[rows, c]` output. Coordinates are treated as constants.
    pub fn bilinear_gather(
        &mut self,
        map: Var,
        points: Vec<SamplePoint>,
        rows: usize,
    ) -> Result<Var, AutodiffError> {
        let shape = self.shape(map).to_vec();
        if shape.len() != 4 {
            return Err(dim_err(format!(
                "bilinear_gather: need [v, h, w, c], got {shape:?}"
            )));
        }
        let (views, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let mv = self.value(map);
        let mut out = vec![0.0; rows * c];
        for p in &points {
            if p.view >= views || p.row >= rows {
                return Err(dim_err(format!(
                    "bilinear_gather: view {} / row {} out of range",
                    p.view, p.row
                )));
            }
            check_in_bounds(p.x, p.y, h, w)?;
            let cell = BilinearCell::new(p.x, p.y, h, w);
            let orow = &mut out[p.row * c..(p.row + 1) * c];
            for (idx, wt) in cell.taps() {
                let base = (p.view * h * w + idx) * c;
                axpy(orow, wt * p.weight, &mv[base..base + c]);
            }
        }
        Ok(self.push(
            vec![rows, c],
            out,
            Op::BilinearGather {
                map,
                points,
                h,
                w,
                c,
            },
        ))
    }

    /// Elementwise weighted smooth-L1 against a constant target.
    pub fn smooth_l1(
        &mut self,
        x: Var,
        target: &[f64],
        weight: &[f64],
        beta: f64,
    ) -> Result<Var, AutodiffError> {
        let n = self.value(x).len();
        if target.len() != n || weight.len() != n {
            return Err(dim_err(format!(
                "smooth_l1: target/weight length mismatch for {n} values"
            )));
        }
        let out = self
            .value(x)
            .iter()
            .zip(target)
            .zip(weight)
            .map(|((x, t), w)| {
                let d = (x - t).abs();
                w * if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::SmoothL1 {
                x,
                target: target.to_vec(),
                weight: weight.to_vec(),
                beta,
            },
        ))
    }

    /// Elementwise sigmoid focal loss on logits.
    pub fn sigmoid_focal(
        &mut self,
        logits: Var,
        target: &[f64],
        alpha: f64,
        gamma: f64,
    ) -> Result<Var, AutodiffError> {
        if target.len() != self.value(logits).len() {
            return Err(dim_err("sigmoid_focal: target length mismatch".into()));
        }
        let out = self
            .value(logits)
            .iter()
            .zip(target)
            .map(|(x, t)| focal_value(*x, *t, alpha, gamma))
            .collect();
        let shape = self.shape(logits).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::Focal {
                x: logits,
                target: target.to_vec(),
                alpha,
                gamma,
            },
        ))
    }

    /// Elementwise binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64]) -> Result<Var, AutodiffError> {
        if target.len() != self.value(logits).len() {
            return Err(dim_err("bce_with_logits: target length mismatch".into()));
        }
        let out = self
            .value(logits)
            .iter()
            .zip(target)
            .map(|(x, t)| softplus(*x) - t * x)
            .collect();
        let shape = self.shape(logits).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::BceLogits {
                x: logits,
                target: target.to_vec(),
            },
        ))
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(dim_err(format!(
                "reshape: {:?} -> {shape:?} changes the element count",
                self.shape(x)
            )));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape, value, Op::Reshape(x)))
    }

    /// `x · w + b` for `x[m×k]`, `w[k×n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }
}

fn check_in_bounds(u: f64, v: f64, h: usize, w: usize) -> Result<(), AutodiffError> {
    let max_u = (w - 1) as f64;
    let max_v = (h - 1) as f64;
    if !(u >= 0.0 && u <= max_u && v >= 0.0 && v <= max_v) {
        return Err(AutodiffError::OutOfBounds {
            u,
            v,
            width: w,
            height: h,
        });
    }
    Ok(())
}
