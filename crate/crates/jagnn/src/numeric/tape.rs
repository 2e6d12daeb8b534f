//! Reverse-mode autodiff over an eagerly evaluated op tape.
//!
//! Ops append nodes in execution order, so the tape itself is a topological
//! order and the backward sweep is a single reverse pass that visits each
//! node exactly once. A tape lives for one forward/backward round and is
//! confined to one worker.

use super::{NumericError, Result, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    MatVec { m: usize, v: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Maximum { a: usize, b: usize },
    Affine { x: usize, mul: f64 },
    ConcatVec { xs: Vec<usize> },
    HStack { xs: Vec<usize> },
    Sum { x: usize },
    Mean { x: usize },
    RowGather { x: usize, idx: Vec<usize> },
    VecGather { x: usize, idx: Vec<usize> },
    SegmentSumRows { x: usize, seg: Vec<usize> },
    SegmentMeanRows { x: usize, seg: Vec<usize>, counts: Vec<usize> },
    MaskedSoftmax { x: usize, seg: Vec<usize> },
    RowScale { x: usize, s: usize },
    SliceVec { x: usize, start: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    LeakyRelu { x: usize, slope: f64 },
    Relu { x: usize },
    Sigmoid { x: usize },
    Log { x: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    AddBias { x: usize, b: usize },
}

/// Wengert-list autodiff tape.
#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    /// When set, masked softmax verifies that every group sums to 1 within
    /// 1e-12 and fails hard otherwise.
    pub validate_softmax: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericError::NonFinite { op: op_name(&op) });
        }
        self.ops.push(op);
        self.values.push(value);
        self.grads.push(None);
        Ok(Var(self.ops.len() - 1))
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Leaf, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
            return Err(NumericError::ShapeMismatch {
                op: "matmul",
                msg: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = ta.row(i);
            let orow = &mut out[i * n..(i + 1) * n];
            for (l, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = tb.row(l);
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push(Op::MatMul { a: a.0, b: b.0 }, value)
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (&self.values[m.0], &self.values[v.0]);
        if tm.shape().len() != 2 || !tv.is_vector() || tm.cols() != tv.len() {
            return Err(NumericError::ShapeMismatch {
                op: "matvec",
                msg: format!("{:?} x {:?}", tm.shape(), tv.shape()),
            });
        }
        let out: Vec<f64> = (0..tm.rows()).map(|i| dot(tm.row(i), tv.data())).collect();
        self.push(Op::MatVec { m: m.0, v: v.0 }, Tensor::vector(out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        self.push(Op::Add { a: a.0, b: b.0 }, value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub { a: a.0, b: b.0 }, value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul { a: a.0, b: b.0 }, value)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("maximum", a, b, f64::max)?;
        self.push(Op::Maximum { a: a.0, b: b.0 }, value)
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(NumericError::ShapeMismatch {
                op,
                msg: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let t = &self.values[x.0];
        let data = t.data().iter().map(|&v| mul * v + add).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::Affine { x: x.0, mul }, value)
    }

    pub fn scale(&mut self, x: Var, mul: f64) -> Result<Var> {
        self.affine(x, mul, 0.0)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for v in xs {
            let t = &self.values[v.0];
            if !t.is_vector() {
                return Err(NumericError::ShapeMismatch {
                    op: "concat",
                    msg: format!("expected vector, got {:?}", t.shape()),
                });
            }
            data.extend_from_slice(t.data());
        }
        self.push(
            Op::ConcatVec {
                xs: xs.iter().map(|v| v.0).collect(),
            },
            Tensor::vector(data),
        )
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn hstack(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(NumericError::InvalidArgument("hstack of nothing".into()));
        }
        let rows = self.values[xs[0].0].rows();
        let mut widths = Vec::with_capacity(xs.len());
        for v in xs {
            let t = &self.values[v.0];
            if t.shape().len() != 2 || t.rows() != rows {
                return Err(NumericError::ShapeMismatch {
                    op: "hstack",
                    msg: format!("expected {rows} rows, got {:?}", t.shape()),
                });
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (v, w) in xs.iter().zip(&widths) {
            let t = &self.values[v.0];
            for i in 0..rows {
                data[i * total + off..i * total + off + w].copy_from_slice(t.row(i));
            }
            off += w;
        }
        let value = Tensor::matrix(rows, total, data)?;
        self.push(
            Op::HStack {
                xs: xs.iter().map(|v| v.0).collect(),
            },
            value,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.values[x.0].data().iter().sum();
        self.push(Op::Sum { x: x.0 }, Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        if t.is_empty() {
            return Err(NumericError::InvalidArgument("mean of empty tensor".into()));
        }
        let s: f64 = t.data().iter().sum();
        let n = t.len() as f64;
        self.push(Op::Mean { x: x.0 }, Tensor::scalar(s / n))
    }

    /// Select rows of a matrix; an index may repeat.
    pub fn row_gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.values[x.0];
        let c = t.cols();
        if t.shape().len() != 2 || idx.iter().any(|&i| i >= t.rows()) {
            return Err(NumericError::ShapeMismatch {
                op: "row_gather",
                msg: format!("index out of range for {:?}", t.shape()),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(idx.len(), c, data)?;
        self.push(
            Op::RowGather {
                x: x.0,
                idx: idx.to_vec(),
            },
            value,
        )
    }

    pub fn vec_gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.values[x.0];
        if !t.is_vector() || idx.iter().any(|&i| i >= t.len()) {
            return Err(NumericError::ShapeMismatch {
                op: "vec_gather",
                msg: format!("index out of range for {:?}", t.shape()),
            });
        }
        let data = idx.iter().map(|&i| t.data()[i]).collect();
        self.push(
            Op::VecGather {
                x: x.0,
                idx: idx.to_vec(),
            },
            Tensor::vector(data),
        )
    }

    /// Scatter-add rows into `n_out` output slots; unreferenced slots stay 0.
    pub fn segment_sum_rows(&mut self, x: Var, seg: &[usize], n_out: usize) -> Result<Var> {
        let t = &self.values[x.0];
        check_segments("segment_sum_rows", t, seg, n_out)?;
        let c = t.cols();
        let mut data = vec![0.0; n_out * c];
        for (i, &s) in seg.iter().enumerate() {
            let row = t.row(i);
            let orow = &mut data[s * c..(s + 1) * c];
            for (o, &v) in orow.iter_mut().zip(row) {
                *o += v;
            }
        }
        let value = Tensor::matrix(n_out, c, data)?;
        self.push(
            Op::SegmentSumRows {
                x: x.0,
                seg: seg.to_vec(),
            },
            value,
        )
    }

    /// Scatter rows into `n_out` slots and divide by each slot's row count;
    /// empty slots stay 0.
    pub fn segment_mean_rows(&mut self, x: Var, seg: &[usize], n_out: usize) -> Result<Var> {
        let t = &self.values[x.0];
        check_segments("segment_mean_rows", t, seg, n_out)?;
        let c = t.cols();
        let mut counts = vec![0usize; n_out];
        for &s in seg {
            counts[s] += 1;
        }
        let mut data = vec![0.0; n_out * c];
        for (i, &s) in seg.iter().enumerate() {
            let row = t.row(i);
            let orow = &mut data[s * c..(s + 1) * c];
            for (o, &v) in orow.iter_mut().zip(row) {
                *o += v;
            }
        }
        for (s, &cnt) in counts.iter().enumerate() {
            if cnt > 1 {
                for v in &mut data[s * c..(s + 1) * c] {
                    *v /= cnt as f64;
                }
            }
        }
        let value = Tensor::matrix(n_out, c, data)?;
        self.push(
            Op::SegmentMeanRows {
                x: x.0,
                seg: seg.to_vec(),
                counts,
            },
            value,
        )
    }

    /// Softmax normalized independently within each group of `group_index`.
    /// Every group in `[0, n_groups)` must be non-empty.
    pub fn masked_softmax(
        &mut self,
        x: Var,
        group_index: &[usize],
        n_groups: usize,
    ) -> Result<Var> {
        let t = &self.values[x.0];
        if !t.is_vector() || group_index.len() != t.len() {
            return Err(NumericError::ShapeMismatch {
                op: "masked_softmax",
                msg: format!("{} group ids for {:?}", group_index.len(), t.shape()),
            });
        }
        let mut maxes = vec![f64::NEG_INFINITY; n_groups];
        for (&g, &v) in group_index.iter().zip(t.data()) {
            if g >= n_groups {
                return Err(NumericError::InvalidArgument(format!(
                    "group id {g} out of range {n_groups}"
                )));
            }
            maxes[g] = maxes[g].max(v);
        }
        if let Some(g) = maxes.iter().position(|m| m.is_infinite()) {
            return Err(NumericError::EmptySegment {
                op: "masked_softmax",
                segment: g,
            });
        }
        let mut data: Vec<f64> = group_index
            .iter()
            .zip(t.data())
            .map(|(&g, &v)| (v - maxes[g]).exp())
            .collect();
        let mut sums = vec![0.0; n_groups];
        for (&g, &e) in group_index.iter().zip(&data) {
            sums[g] += e;
        }
        for (&g, e) in group_index.iter().zip(&mut data) {
            *e /= sums[g];
        }
        if self.validate_softmax {
            let mut check = vec![0.0; n_groups];
            for (&g, &p) in group_index.iter().zip(&data) {
                check[g] += p;
            }
            for (g, &s) in check.iter().enumerate() {
                if (s - 1.0).abs() > 1e-12 {
                    return Err(NumericError::GroupNotNormalized { group: g, sum: s });
                }
            }
        }
        self.push(
            Op::MaskedSoftmax {
                x: x.0,
                seg: group_index.to_vec(),
            },
            Tensor::vector(data),
        )
    }

    /// Scale row `i` of a matrix by element `i` of a vector.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (&self.values[x.0], &self.values[s.0]);
        if tx.shape().len() != 2 || !ts.is_vector() || ts.len() != tx.rows() {
            return Err(NumericError::ShapeMismatch {
                op: "row_scale",
                msg: format!("{:?} rows vs {:?}", tx.shape(), ts.shape()),
            });
        }
        let c = tx.cols();
        let mut data = Vec::with_capacity(tx.len());
        for (i, &f) in ts.data().iter().enumerate() {
            data.extend(tx.row(i).iter().map(|&v| v * f));
        }
        let value = Tensor::matrix(tx.rows(), c, data)?;
        self.push(Op::RowScale { x: x.0, s: s.0 }, value)
    }

    pub fn slice_vec(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.values[x.0];
        if !t.is_vector() || start + len > t.len() {
            return Err(NumericError::ShapeMismatch {
                op: "slice_vec",
                msg: format!("[{start}..{}] of {:?}", start + len, t.shape()),
            });
        }
        let data = t.data()[start..start + len].to_vec();
        self.push(Op::SliceVec { x: x.0, start }, Tensor::vector(data))
    }

    /// Row-wise layer normalization with learned per-column scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (&self.values[x.0], &self.values[gamma.0], &self.values[beta.0]);
        let c = tx.cols();
        if tx.shape().len() != 2 || tg.len() != c || tb.len() != c {
            return Err(NumericError::ShapeMismatch {
                op: "layer_norm",
                msg: format!(
                    "{:?} with gamma {:?} beta {:?}",
                    tx.shape(),
                    tg.shape(),
                    tb.shape()
                ),
            });
        }
        let mut data = Vec::with_capacity(tx.len());
        for i in 0..tx.rows() {
            let row = tx.row(i);
            let (mean, istd) = row_stats(row, eps);
            for (j, &v) in row.iter().enumerate() {
                data.push(tg.data()[j] * (v - mean) * istd + tb.data()[j]);
            }
        }
        let value = Tensor::matrix(tx.rows(), c, data)?;
        self.push(
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            value,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let t = &self.values[x.0];
        let data = t
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::LeakyRelu { x: x.0, slope }, value)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::Relu { x: x.0 }, value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::Sigmoid { x: x.0 }, value)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        let data = t.data().iter().map(|&v| v.ln()).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::Log { x: x.0 }, value)
    }

    /// Clamp to `[lo, hi]`; gradient is zero at clamped positions.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = &self.values[x.0];
        let data = t.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::Clamp { x: x.0, lo, hi }, value)
    }

    /// Add a one-element bias tensor to every element of a vector.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (&self.values[x.0], &self.values[b.0]);
        if !tx.is_vector() || tb.len() != 1 {
            return Err(NumericError::ShapeMismatch {
                op: "add_bias",
                msg: format!("{:?} + {:?}", tx.shape(), tb.shape()),
            });
        }
        let bv = tb.data()[0];
        let data = tx.data().iter().map(|&v| v + bv).collect();
        self.push(Op::AddBias { x: x.0, b: b.0 }, Tensor::vector(data))
    }

    /// Reverse sweep from a scalar output; fills the gradient slot of every
    /// variable that influences it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.values[loss.0];
        if !lt.is_scalar() {
            return Err(NumericError::NonScalarLoss(lt.shape().to_vec()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let values = &self.values;
        let grads = &mut self.grads;
        match &self.ops[i] {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, n) = (values[i].rows(), values[i].cols());
                let k = values[a].cols();
                let (av, bv) = (values[a].data(), values[b].data());
                acc(grads, values, a, |ga| {
                    // dA = G B^T
                    for r in 0..m {
                        for l in 0..k {
                            ga[r * k + l] += dot(&g[r * n..(r + 1) * n], &bv[l * n..(l + 1) * n]);
                        }
                    }
                });
                acc(grads, values, b, |gb| {
                    // dB = A^T G
                    for r in 0..m {
                        for l in 0..k {
                            let av_rl = av[r * k + l];
                            if av_rl == 0.0 {
                                continue;
                            }
                            let grow = &g[r * n..(r + 1) * n];
                            let brow = &mut gb[l * n..(l + 1) * n];
                            for (o, &gv) in brow.iter_mut().zip(grow) {
                                *o += av_rl * gv;
                            }
                        }
                    }
                });
            }
            &Op::MatVec { m, v } => {
                let rows = values[i].len();
                let cols = values[v].len();
                let (mv, vv) = (values[m].data(), values[v].data());
                acc(grads, values, m, |gm| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gm[r * cols + c] += g[r] * vv[c];
                        }
                    }
                });
                acc(grads, values, v, |gv| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gv[c] += mv[r * cols + c] * g[r];
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                acc(grads, values, a, |ga| add_into(ga, g));
                acc(grads, values, b, |gb| add_into(gb, g));
            }
            &Op::Sub { a, b } => {
                acc(grads, values, a, |ga| add_into(ga, g));
                acc(grads, values, b, |gb| {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (values[a].data(), values[b].data());
                acc(grads, values, a, |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * x;
                    }
                });
                acc(grads, values, b, |gb| {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            &Op::Maximum { a, b } => {
                let (av, bv) = (values[a].data(), values[b].data());
                acc(grads, values, a, |ga| {
                    for k in 0..av.len() {
                        if av[k] >= bv[k] {
                            ga[k] += g[k];
                        }
                    }
                });
                acc(grads, values, b, |gb| {
                    for k in 0..av.len() {
                        if av[k] < bv[k] {
                            gb[k] += g[k];
                        }
                    }
                });
            }
            &Op::Affine { x, mul } => {
                acc(grads, values, x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += mul * v;
                    }
                });
            }
            Op::ConcatVec { xs } => {
                let mut off = 0;
                for &x in xs {
                    let n = values[x].len();
                    let part = &g[off..off + n];
                    acc(grads, values, x, |gx| add_into(gx, part));
                    off += n;
                }
            }
            Op::HStack { xs } => {
                let rows = values[i].rows();
                let total = values[i].cols();
                let mut off = 0;
                for &x in xs {
                    let w = values[x].cols();
                    acc(grads, values, x, |gx| {
                        for r in 0..rows {
                            for j in 0..w {
                                gx[r * w + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            &Op::Sum { x } => {
                acc(grads, values, x, |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            &Op::Mean { x } => {
                let n = values[x].len() as f64;
                acc(grads, values, x, |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                });
            }
            Op::RowGather { x, idx } => {
                let c = values[i].cols();
                acc(grads, values, *x, |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[src * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::VecGather { x, idx } => {
                acc(grads, values, *x, |gx| {
                    for (k, &src) in idx.iter().enumerate() {
                        gx[src] += g[k];
                    }
                });
            }
            Op::SegmentSumRows { x, seg } => {
                let c = values[i].cols();
                acc(grads, values, *x, |gx| {
                    for (r, &s) in seg.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += g[s * c + j];
                        }
                    }
                });
            }
            Op::SegmentMeanRows { x, seg, counts } => {
                let c = values[i].cols();
                acc(grads, values, *x, |gx| {
                    for (r, &s) in seg.iter().enumerate() {
                        let scale = 1.0 / counts[s] as f64;
                        for j in 0..c {
                            gx[r * c + j] += g[s * c + j] * scale;
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x, seg } => {
                let y = values[i].data();
                let n_groups = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut dots = vec![0.0; n_groups];
                for (k, &s) in seg.iter().enumerate() {
                    dots[s] += g[k] * y[k];
                }
                acc(grads, values, *x, |gx| {
                    for (k, &s) in seg.iter().enumerate() {
                        gx[k] += y[k] * (g[k] - dots[s]);
                    }
                });
            }
            &Op::RowScale { x, s } => {
                let (xv, sv) = (values[x].data(), values[s].data());
                let c = values[x].cols();
                acc(grads, values, x, |gx| {
                    for (r, &f) in sv.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += g[r * c + j] * f;
                        }
                    }
                });
                acc(grads, values, s, |gs| {
                    for (r, o) in gs.iter_mut().enumerate() {
                        *o += dot(&g[r * c..(r + 1) * c], &xv[r * c..(r + 1) * c]);
                    }
                });
            }
            &Op::SliceVec { x, start } => {
                acc(grads, values, x, |gx| {
                    for (k, &v) in g.iter().enumerate() {
                        gx[start + k] += v;
                    }
                });
            }
            &Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = values[x].data();
                let gv = values[gamma].data();
                let rows = values[x].rows();
                let c = values[x].cols();
                let mut dx = vec![0.0; rows * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for r in 0..rows {
                    let row = &xv[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let (mean, istd) = row_stats(row, eps);
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * istd).collect();
                    let gy: Vec<f64> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                    let mean_gy = gy.iter().sum::<f64>() / c as f64;
                    let mean_gy_xhat =
                        gy.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = istd * (gy[j] - mean_gy - xhat[j] * mean_gy_xhat);
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                }
                acc(grads, values, x, |gx| add_into(gx, &dx));
                acc(grads, values, gamma, |gg| add_into(gg, &dgamma));
                acc(grads, values, beta, |gb| add_into(gb, &dbeta));
            }
            &Op::LeakyRelu { x, slope } => {
                let xv = values[x].data();
                acc(grads, values, x, |gx| {
                    for (k, &v) in xv.iter().enumerate() {
                        gx[k] += g[k] * if v >= 0.0 { 1.0 } else { slope };
                    }
                });
            }
            &Op::Relu { x } => {
                let xv = values[x].data();
                acc(grads, values, x, |gx| {
                    for (k, &v) in xv.iter().enumerate() {
                        if v > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            &Op::Sigmoid { x } => {
                let y = values[i].data();
                acc(grads, values, x, |gx| {
                    for (k, &yv) in y.iter().enumerate() {
                        gx[k] += g[k] * yv * (1.0 - yv);
                    }
                });
            }
            &Op::Log { x } => {
                let xv = values[x].data();
                acc(grads, values, x, |gx| {
                    for (k, &v) in xv.iter().enumerate() {
                        gx[k] += g[k] / v;
                    }
                });
            }
            &Op::Clamp { x, lo, hi } => {
                let xv = values[x].data();
                acc(grads, values, x, |gx| {
                    for (k, &v) in xv.iter().enumerate() {
                        if v > lo && v < hi {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            &Op::AddBias { x, b } => {
                acc(grads, values, x, |gx| add_into(gx, g));
                let total: f64 = g.iter().sum();
                acc(grads, values, b, |gb| gb[0] += total);
            }
        }
    }
}

fn acc(
    grads: &mut [Option<Vec<f64>>],
    values: &[Tensor],
    target: usize,
    f: impl FnOnce(&mut [f64]),
) {
    let slot = &mut grads[target];
    if slot.is_none() {
        *slot = Some(vec![0.0; values[target].len()]);
    }
    f(slot.as_mut().unwrap());
}

fn check_segments(op: &'static str, t: &Tensor, seg: &[usize], n_out: usize) -> Result<()> {
    if t.shape().len() != 2 || seg.len() != t.rows() || seg.iter().any(|&s| s >= n_out) {
        return Err(NumericError::ShapeMismatch {
            op,
            msg: format!(
                "{} segment ids for {:?} into {n_out} slots",
                seg.len(),
                t.shape()
            ),
        });
    }
    Ok(())
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + eps).sqrt())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::MatVec { .. } => "matvec",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Maximum { .. } => "maximum",
        Op::Affine { .. } => "affine",
        Op::ConcatVec { .. } => "concat",
        Op::HStack { .. } => "hstack",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::RowGather { .. } => "row_gather",
        Op::VecGather { .. } => "vec_gather",
        Op::SegmentSumRows { .. } => "segment_sum_rows",
        Op::SegmentMeanRows { .. } => "segment_mean_rows",
        Op::MaskedSoftmax { .. } => "masked_softmax",
        Op::RowScale { .. } => "row_scale",
        Op::SliceVec { .. } => "slice_vec",
        Op::LayerNorm { .. } => "layer_norm",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::Relu { .. } => "relu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Log { .. } => "log",
        Op::Clamp { .. } => "clamp",
        Op::AddBias { .. } => "add_bias",
    }
}
