//! Tape-based reverse-mode differentiation over flat f64 buffers.
//!
//! A [`Tape`] owns every value produced during one forward pass plus the
//! list of recorded operations. [`Tape::backward`] replays the operations in
//! reverse, accumulating gradients additively across fan-out. A tape is
//! single-use: a second backward call is a state error.


use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle for a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
}

enum Op {
    Add { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { x: Var, c: f64, out: Var },
    AddBias { x: Var, bias: Var, out: Var },
    Matmul { a: Var, b: Var, out: Var },
    Sigmoid { x: Var, out: Var },
    Tanh { x: Var, out: Var },
    Relu { x: Var, out: Var },
    Ln { x: Var, out: Var },
    ClampMin { x: Var, min: f64, out: Var },
    Softmax { x: Var, axis: usize, out: Var },
    Sum { x: Var, out: Var },
    ConcatCols { a: Var, b: Var, out: Var },
    ConcatRows { items: Vec<Var>, out: Var },
    SliceCols { x: Var, start: usize, len: usize, out: Var },
    Reshape { x: Var, out: Var },
    SelectRows { table: Var, indices: Vec<usize>, out: Var },
    GatherCols { x: Var, indices: Vec<usize>, out: Var },
    Conv2d { input: Var, kernel: Var, bias: Var, stride: usize, pad: usize, out: Var },
    BilinearUpsample { x: Var, factor: usize, out: Var },
    GatherBilinear { field: Var, points: Vec<(f64, f64)>, out: Var },
    BceWithLogitsMean { logits: Var, targets: Vec<f64>, out: Var },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { data, shape, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf; gradient flows to it iff the tensor
    /// requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), t.requires_grad())
    }

    /// Records a constant buffer (no gradient).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::dimension(
                "constant",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        Ok(self.push(data, shape, false))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        let numel = shape.iter().product();
        self.push(vec![0.0; numel], shape.to_vec(), false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last backward pass w.r.t. `v`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn check_finite(&self, v: Var, context: &str, step: u64) -> Result<()> {
        if self.nodes[v.0].data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string(), step })
        }
    }

    fn rows_cols(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dimension(op, format!("expected 2-d shape, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs_grad(x);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::Scale { x, c, out });
        out
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, make: impl Fn(Var, Var) -> Op) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs_grad(x);
        let out = self.push(data, shape, ng);
        self.ops.push(make(x, out));
        out
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, |x, out| Op::Sigmoid { x, out })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |x, out| Op::Tanh { x, out })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, out| Op::Relu { x, out })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, out| Op::Ln { x, out })
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|&v| v.max(min)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs_grad(x);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::ClampMin { x, min, out });
        out
    }

    // ── linear algebra and shape ops ────────────────────────────────────

    /// x: [r,c] plus a length-c bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "add_bias")?;
        if self.shape(bias) != [c] {
            return Err(Error::dimension(
                "add_bias",
                format!("bias {:?} vs {} columns", self.shape(bias), c),
            ));
        }
        let mut data = self.value(x).to_vec();
        let b = self.value(bias);
        for row in data.chunks_mut(c) {
            for (d, &bv) in row.iter_mut().zip(b) {
                *d += bv;
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(bias);
        let out = self.push(data, vec![r, c], ng);
        self.ops.push(Op::AddBias { x, bias, out });
        Ok(out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a, "matmul")?;
        let (k2, n) = self.rows_cols(b, "matmul")?;
        if k != k2 {
            return Err(Error::dimension(
                "matmul",
                format!("[{m},{k}] · [{k2},{n}]: inner dims differ"),
            ));
        }
        let mut data = vec![0.0; m * n];
        kernels::matmul(self.value(a), self.value(b), m, k, n, &mut data);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let out = self.push(data, vec![m, n], ng);
        self.ops.push(Op::Matmul { a, b, out });
        Ok(out)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::argument(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let mut data = vec![0.0; self.value(x).len()];
        kernels::softmax_axis(self.value(x), &shape, axis, &mut data);
        let ng = self.needs_grad(x);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::Softmax { x, axis, out });
        Ok(out)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).iter().sum();
        let ng = self.needs_grad(x);
        let out = self.push(vec![total], vec![1], ng);
        self.ops.push(Op::Sum { x, out });
        out
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.rows_cols(a, "concat_cols")?;
        let (rb, cb) = self.rows_cols(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::dimension("concat_cols", format!("{ra} rows vs {rb} rows")));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&self.value(a)[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.value(b)[r * cb..(r + 1) * cb]);
        }
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let out = self.push(data, vec![ra, ca + cb], ng);
        self.ops.push(Op::ConcatCols { a, b, out });
        Ok(out)
    }

    pub fn concat_rows(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::argument("concat_rows", "no items"));
        }
        let (_, c) = self.rows_cols(items[0], "concat_rows")?;
        let mut rows = 0;
        for &v in items {
            let (r, ci) = self.rows_cols(v, "concat_rows")?;
            if ci != c {
                return Err(Error::dimension("concat_rows", format!("{ci} cols vs {c}")));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &v in items {
            data.extend_from_slice(self.value(v));
        }
        let ng = items.iter().any(|&v| self.needs_grad(v));
        let out = self.push(data, vec![rows, c], ng);
        self.ops.push(Op::ConcatRows { items: items.to_vec(), out });
        Ok(out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::argument(
                "slice_cols",
                format!("range {start}..{} exceeds {c} columns", start + len),
            ));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&self.value(x)[row * c + start..row * c + start + len]);
        }
        let ng = self.needs_grad(x);
        let out = self.push(data, vec![r, len], ng);
        self.ops.push(Op::SliceCols { x, start, len, out });
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::dimension(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape(x)),
            ));
        }
        let data = self.value(x).to_vec();
        let ng = self.needs_grad(x);
        let out = self.push(data, shape.to_vec(), ng);
        self.ops.push(Op::Reshape { x, out });
        Ok(out)
    }

    /// Gathers rows of `table` ([v,d]) by index; backward scatter-adds.
    pub fn select_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = self.rows_cols(table, "select_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::argument("select_rows", format!("row {bad} out of {v}")));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.value(table)[i * d..(i + 1) * d]);
        }
        let ng = self.needs_grad(table);
        let out = self.push(data, vec![indices.len(), d], ng);
        self.ops.push(Op::SelectRows { table, indices: indices.to_vec(), out });
        Ok(out)
    }

    /// out[r] = x[r, indices[r]] for x: [r,c].
    pub fn gather_cols(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "gather_cols")?;
        if indices.len() != r {
            return Err(Error::dimension(
                "gather_cols",
                format!("{} indices vs {r} rows", indices.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(Error::argument("gather_cols", format!("column {bad} out of {c}")));
        }
        let data: Vec<f64> =
            indices.iter().enumerate().map(|(row, &i)| self.value(x)[row * c + i]).collect();
        let ng = self.needs_grad(x);
        let out = self.push(data, vec![r], ng);
        self.ops.push(Op::GatherCols { x, indices: indices.to_vec(), out });
        Ok(out)
    }

    // ── structured ops ──────────────────────────────────────────────────

    /// Cross-correlation of [n,c,h,w] with [f,c,kh,kw] plus per-filter bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(Error::dimension(
                "conv2d",
                format!("input {ishape:?}, kernel {kshape:?}: expected 4-d"),
            ));
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (f, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc != c {
            return Err(Error::dimension(
                "conv2d",
                format!("input {ishape:?} has {c} channels, kernel {kshape:?} expects {kc}"),
            ));
        }
        if self.shape(bias) != [f] {
            return Err(Error::dimension(
                "conv2d",
                format!("bias {:?} vs {f} filters", self.shape(bias)),
            ));
        }
        if stride == 0 {
            return Err(Error::argument("conv2d", "stride must be positive"));
        }
        let oh = kernels::conv_out_dim(h, kh, pad, stride).ok_or_else(|| {
            Error::dimension("conv2d", format!("kernel {kh}x{kw} does not fit {h}x{w} with pad {pad}"))
        })?;
        let ow = kernels::conv_out_dim(w, kw, pad, stride).ok_or_else(|| {
            Error::dimension("conv2d", format!("kernel {kh}x{kw} does not fit {h}x{w} with pad {pad}"))
        })?;

        let ckk = c * kh * kw;
        let mut cols = vec![0.0; ckk * oh * ow];
        let mut data = vec![0.0; n * f * oh * ow];
        for i in 0..n {
            kernels::im2col(
                &self.value(input)[i * c * h * w..(i + 1) * c * h * w],
                (c, h, w),
                (kh, kw),
                stride,
                pad,
                (oh, ow),
                &mut cols,
            );
            let out_n = &mut data[i * f * oh * ow..(i + 1) * f * oh * ow];
            kernels::matmul(self.value(kernel), &cols, f, ckk, oh * ow, out_n);
            for (fi, row) in out_n.chunks_mut(oh * ow).enumerate() {
                let b = self.value(bias)[fi];
                for v in row {
                    *v += b;
                }
            }
        }
        let ng = self.needs_grad(input) || self.needs_grad(kernel) || self.needs_grad(bias);
        let out = self.push(data, vec![n, f, oh, ow], ng);
        self.ops.push(Op::Conv2d { input, kernel, bias, stride, pad, out });
        Ok(out)
    }

    /// Upsamples [n,c,h,w] by an integer factor, sample centers at
    /// (i + 0.5)/factor − 0.5 with border clamping.
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::argument("bilinear_upsample", "factor must be >= 1"));
        }
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dimension("bilinear_upsample", format!("expected 4-d, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let ys = kernels::upsample_stencil(h, factor);
        let xs = kernels::upsample_stencil(w, factor);
        let mut data = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &self.value(x)[plane * h * w..(plane + 1) * h * w];
            let dst = &mut data[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                let r0 = &src[y0 * w..(y0 + 1) * w];
                let r1 = &src[y1 * w..(y1 + 1) * w];
                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                for (d, &(x0, x1, wx)) in drow.iter_mut().zip(&xs) {
                    let top = r0[x0] * (1.0 - wx) + r0[x1] * wx;
                    let bot = r1[x0] * (1.0 - wx) + r1[x1] * wx;
                    *d = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        let ng = self.needs_grad(x);
        let out = self.push(data, vec![n, c, oh, ow], ng);
        self.ops.push(Op::BilinearUpsample { x, factor, out });
        Ok(out)
    }

    /// Bilinearly samples a [1,c,h,w] field at the given (x,y) grid points,
    /// producing [1, points, c]. Point coordinates are constants: gradient
    /// flows only into the field.
    pub fn gather_bilinear(&mut self, field: Var, points: &[(f64, f64)]) -> Result<Var> {
        let s = self.shape(field).to_vec();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::dimension(
                "gather_bilinear",
                format!("expected [1,c,h,w], got {s:?}"),
            ));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        if points.is_empty() {
            return Err(Error::argument("gather_bilinear", "no points"));
        }
        let mut data = vec![0.0; points.len() * c];
        for (m, &(px, py)) in points.iter().enumerate() {
            let (x0, x1, wx) = kernels::bilinear_axis(px, w);
            let (y0, y1, wy) = kernels::bilinear_axis(py, h);
            let out_row = &mut data[m * c..(m + 1) * c];
            for (ch, o) in out_row.iter_mut().enumerate() {
                let plane = &self.value(field)[ch * h * w..(ch + 1) * h * w];
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                *o = top * (1.0 - wy) + bot * wy;
            }
        }
        let ng = self.needs_grad(field);
        let out = self.push(data, vec![1, points.len(), c], ng);
        self.ops.push(Op::GatherBilinear { field, points: points.to_vec(), out });
        Ok(out)
    }

    /// Mean binary cross entropy over all elements, computed from logits in
    /// the numerically stable form. Targets must be 0/1.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        if targets.len() != self.value(logits).len() {
            return Err(Error::dimension(
                "bce_with_logits_mean",
                format!("{} targets vs {} logits", targets.len(), self.value(logits).len()),
            ));
        }
        if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::Data("bce targets must be binary 0/1".into()));
        }
        let n = targets.len() as f64;
        let total: f64 = self
            .value(logits)
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let ng = self.needs_grad(logits);
        let out = self.push(vec![total / n], vec![1], ng);
        self.ops.push(Op::BceWithLogitsMean { logits, targets: targets.to_vec(), out });
        Ok(out)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Populates gradients for every grad-requiring value reachable from
    /// `loss`. The loss must be scalar; the tape is consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::argument(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx);
        }
        Ok(())
    }

    fn take_out_grad(&mut self, out: Var) -> Option<Vec<f64>> {
        // Ownership dance: the out-grad is moved out so input accumulation
        // can borrow self.grads mutably. Out-grads are never re-read after
        // their op is processed (ops are replayed exactly once, in reverse).
        self.grads[out.0].take()
    }

    fn acc_grad(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, d) in g.iter_mut().zip(delta) {
                    *gi += d;
                }
            }
            None => self.grads[v.0] = Some(delta.to_vec()),
        }
    }

    fn acc_grad_with(&mut self, v: Var, fill: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let numel = self.nodes[v.0].data.len();
        let mut g = self.grads[v.0].take().unwrap_or_else(|| vec![0.0; numel]);
        fill(&mut g);
        self.grads[v.0] = Some(g);
    }

    fn backward_op(&mut self, idx: usize) {
        // Ops store only Vars plus scalars, so cloning the descriptor out of
        // the list would be cheap, but splitting borrows keeps it simpler:
        // read everything needed first, then mutate grads.
        let op = &self.ops[idx];
        let out = match op {
            Op::Add { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::AddBias { out, .. }
            | Op::Matmul { out, .. }
            | Op::Sigmoid { out, .. }
            | Op::Tanh { out, .. }
            | Op::Relu { out, .. }
            | Op::Ln { out, .. }
            | Op::ClampMin { out, .. }
            | Op::Softmax { out, .. }
            | Op::Sum { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::ConcatRows { out, .. }
            | Op::SliceCols { out, .. }
            | Op::Reshape { out, .. }
            | Op::SelectRows { out, .. }
            | Op::GatherCols { out, .. }
            | Op::Conv2d { out, .. }
            | Op::BilinearUpsample { out, .. }
            | Op::GatherBilinear { out, .. }
            | Op::BceWithLogitsMean { out, .. } => *out,
        };
        if !self.nodes[out.0].needs_grad {
            return;
        }
        let Some(dy) = self.take_out_grad(out) else { return };

        match &self.ops[idx] {
            Op::Add { a, b, .. } => {
                let (a, b) = (*a, *b);
                self.acc_grad(a, &dy);
                self.acc_grad(b, &dy);
            }
            Op::Mul { a, b, .. } => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].needs_grad {
                    let da: Vec<f64> =
                        dy.iter().zip(self.value(b)).map(|(d, v)| d * v).collect();
                    self.acc_grad(a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let db: Vec<f64> =
                        dy.iter().zip(self.value(a)).map(|(d, v)| d * v).collect();
                    self.acc_grad(b, &db);
                }
            }
            Op::Scale { x, c, .. } => {
                let (x, c) = (*x, *c);
                let dx: Vec<f64> = dy.iter().map(|d| d * c).collect();
                self.acc_grad(x, &dx);
            }
            Op::AddBias { x, bias, .. } => {
                let (x, bias) = (*x, *bias);
                let c = self.shape(bias)[0];
                self.acc_grad(x, &dy);
                if self.nodes[bias.0].needs_grad {
                    let mut db = vec![0.0; c];
                    for row in dy.chunks(c) {
                        for (g, d) in db.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                    self.acc_grad(bias, &db);
                }
            }
            Op::Matmul { a, b, .. } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].needs_grad {
                    let bdata = self.value(b);
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_a_bt_acc(&dy, bdata, m, n, k, &mut da);
                    self.acc_grad(a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let adata = self.value(a);
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_at_b_acc(adata, &dy, m, k, n, &mut db);
                    self.acc_grad(b, &db);
                }
            }
            Op::Sigmoid { x, out } => {
                let (x, out) = (*x, *out);
                let dx: Vec<f64> =
                    dy.iter().zip(self.value(out)).map(|(d, &y)| d * y * (1.0 - y)).collect();
                self.acc_grad(x, &dx);
            }
            Op::Tanh { x, out } => {
                let (x, out) = (*x, *out);
                let dx: Vec<f64> =
                    dy.iter().zip(self.value(out)).map(|(d, &y)| d * (1.0 - y * y)).collect();
                self.acc_grad(x, &dx);
            }
            Op::Relu { x, .. } => {
                let x = *x;
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(self.value(x))
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.acc_grad(x, &dx);
            }
            Op::Ln { x, .. } => {
                let x = *x;
                let dx: Vec<f64> = dy.iter().zip(self.value(x)).map(|(d, &v)| d / v).collect();
                self.acc_grad(x, &dx);
            }
            Op::ClampMin { x, min, .. } => {
                let (x, min) = (*x, *min);
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(self.value(x))
                    .map(|(d, &v)| if v > min { *d } else { 0.0 })
                    .collect();
                self.acc_grad(x, &dx);
            }
            Op::Softmax { x, axis, out } => {
                let (x, axis, out) = (*x, *axis, *out);
                let shape = self.shape(out).to_vec();
                let k = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let p = self.value(out);
                let mut dx = vec![0.0; p.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * k * inner + i;
                        let mut dot = 0.0;
                        for j in 0..k {
                            dot += dy[base + j * inner] * p[base + j * inner];
                        }
                        for j in 0..k {
                            let pi = p[base + j * inner];
                            dx[base + j * inner] = pi * (dy[base + j * inner] - dot);
                        }
                    }
                }
                self.acc_grad(x, &dx);
            }
            Op::Sum { x, .. } => {
                let x = *x;
                let d = dy[0];
                self.acc_grad_with(x, |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::ConcatCols { a, b, .. } => {
                let (a, b) = (*a, *b);
                let (ra, ca) = (self.shape(a)[0], self.shape(a)[1]);
                let cb = self.shape(b)[1];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; ra * ca];
                    for r in 0..ra {
                        da[r * ca..(r + 1) * ca]
                            .copy_from_slice(&dy[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    self.acc_grad(a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; ra * cb];
                    for r in 0..ra {
                        db[r * cb..(r + 1) * cb]
                            .copy_from_slice(&dy[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    self.acc_grad(b, &db);
                }
            }
            Op::ConcatRows { items, .. } => {
                let items = items.clone();
                let mut offset = 0;
                for v in items {
                    let numel = self.nodes[v.0].data.len();
                    let slice = dy[offset..offset + numel].to_vec();
                    self.acc_grad(v, &slice);
                    offset += numel;
                }
            }
            Op::SliceCols { x, start, len, .. } => {
                let (x, start, len) = (*x, *start, *len);
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                self.acc_grad_with(x, |g| {
                    for row in 0..r {
                        for i in 0..len {
                            g[row * c + start + i] += dy[row * len + i];
                        }
                    }
                });
            }
            Op::Reshape { x, .. } => {
                let x = *x;
                self.acc_grad(x, &dy);
            }
            Op::SelectRows { table, indices, .. } => {
                let table = *table;
                let indices = indices.clone();
                let d = self.shape(table)[1];
                self.acc_grad_with(table, |g| {
                    for (t, &row) in indices.iter().enumerate() {
                        for i in 0..d {
                            g[row * d + i] += dy[t * d + i];
                        }
                    }
                });
            }
            Op::GatherCols { x, indices, .. } => {
                let x = *x;
                let indices = indices.clone();
                let c = self.shape(x)[1];
                self.acc_grad_with(x, |g| {
                    for (row, &i) in indices.iter().enumerate() {
                        g[row * c + i] += dy[row];
                    }
                });
            }
            Op::Conv2d { input, kernel, bias, stride, pad, .. } => {
                let (input, kernel, bias, stride, pad) = (*input, *kernel, *bias, *stride, *pad);
                self.backward_conv2d(input, kernel, bias, stride, pad, &dy);
            }
            Op::BilinearUpsample { x, factor, .. } => {
                let (x, factor) = (*x, *factor);
                let s = self.shape(x).to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                let ys = kernels::upsample_stencil(h, factor);
                let xs = kernels::upsample_stencil(w, factor);
                self.acc_grad_with(x, |g| {
                    for plane in 0..n * c {
                        let src = &dy[plane * oh * ow..(plane + 1) * oh * ow];
                        let dst = &mut g[plane * h * w..(plane + 1) * h * w];
                        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                                let d = src[oy * ow + ox];
                                dst[y0 * w + x0] += d * (1.0 - wy) * (1.0 - wx);
                                dst[y0 * w + x1] += d * (1.0 - wy) * wx;
                                dst[y1 * w + x0] += d * wy * (1.0 - wx);
                                dst[y1 * w + x1] += d * wy * wx;
                            }
                        }
                    }
                });
            }
            Op::GatherBilinear { field, points, .. } => {
                let field = *field;
                let points = points.clone();
                let s = self.shape(field).to_vec();
                let (c, h, w) = (s[1], s[2], s[3]);
                self.acc_grad_with(field, |g| {
                    for (m, &(px, py)) in points.iter().enumerate() {
                        let (x0, x1, wx) = kernels::bilinear_axis(px, w);
                        let (y0, y1, wy) = kernels::bilinear_axis(py, h);
                        for ch in 0..c {
                            let d = dy[m * c + ch];
                            let plane = &mut g[ch * h * w..(ch + 1) * h * w];
                            plane[y0 * w + x0] += d * (1.0 - wy) * (1.0 - wx);
                            plane[y0 * w + x1] += d * (1.0 - wy) * wx;
                            plane[y1 * w + x0] += d * wy * (1.0 - wx);
                            plane[y1 * w + x1] += d * wy * wx;
                        }
                    }
                });
            }
            Op::BceWithLogitsMean { logits, targets, .. } => {
                let logits = *logits;
                let targets = targets.clone();
                let scale = dy[0] / targets.len() as f64;
                let dx: Vec<f64> = self
                    .value(logits)
                    .iter()
                    .zip(&targets)
                    .map(|(&z, &y)| (kernels::sigmoid(z) - y) * scale)
                    .collect();
                self.acc_grad(logits, &dx);
            }
        }
    }

    fn backward_conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        dy: &[f64],
    ) {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (f, _, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        let oh = kernels::conv_out_dim(h, kh, pad, stride).unwrap();
        let ow = kernels::conv_out_dim(w, kw, pad, stride).unwrap();
        let ckk = c * kh * kw;

        if self.nodes[bias.0].needs_grad {
            let mut db = vec![0.0; f];
            for i in 0..n {
                let d_n = &dy[i * f * oh * ow..(i + 1) * f * oh * ow];
                for (fi, row) in d_n.chunks(oh * ow).enumerate() {
                    db[fi] += row.iter().sum::<f64>();
                }
            }
            self.acc_grad(bias, &db);
        }

        let kernel_grad = self.nodes[kernel.0].needs_grad;
        let input_grad = self.nodes[input.0].needs_grad;
        if !kernel_grad && !input_grad {
            return;
        }

        // Patches are recomputed here rather than kept from the forward
        // pass: one extra im2col is cheaper than holding every unfolding
        // alive for the life of the tape.
        let mut cols = vec![0.0; ckk * oh * ow];
        let mut dk = if kernel_grad { vec![0.0; f * ckk] } else { Vec::new() };
        let mut din = if input_grad { vec![0.0; n * c * h * w] } else { Vec::new() };
        let mut dcols = if input_grad { vec![0.0; ckk * oh * ow] } else { Vec::new() };
        for i in 0..n {
            let d_n = &dy[i * f * oh * ow..(i + 1) * f * oh * ow];
            if kernel_grad {
                kernels::im2col(
                    &self.value(input)[i * c * h * w..(i + 1) * c * h * w],
                    (c, h, w),
                    (kh, kw),
                    stride,
                    pad,
                    (oh, ow),
                    &mut cols,
                );
                kernels::matmul_a_bt_acc(d_n, &cols, f, oh * ow, ckk, &mut dk);
            }
            if input_grad {
                dcols.fill(0.0);
                kernels::matmul_at_b_acc(self.value(kernel), d_n, f, ckk, oh * ow, &mut dcols);
                kernels::col2im_acc(
                    &dcols,
                    (c, h, w),
                    (kh, kw),
                    stride,
                    pad,
                    (oh, ow),
                    &mut din[i * c * h * w..(i + 1) * c * h * w],
                );
            }
        }
        if kernel_grad {
            self.acc_grad(kernel, &dk);
        }
        if input_grad {
            self.acc_grad(input, &din);
        }
    }
}
