use super::tensor::{matmul, softmax_rows, NumError, Tensor};
use super::{LAYER_NORM_EPS, LEAKY_SLOPE};
use rand::Rng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// Matrix plus a row vector broadcast down the rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Tensor times a 1x1 tensor.
    MulScalar(Var, Var),
    /// Tensor times a compile-time constant.
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    SoftmaxRows(Var),
    /// Row-wise softmax where entry (q, k) is admissible iff k <= q.
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    MeanAll(Var),
    MeanAxis0(Var),
    MaxAxis0(Var, Vec<usize>),
    MeanAxis1(Var),
    MaxAxis1(Var, Vec<usize>),
    /// Matrix times a row vector broadcast down the rows (gating).
    MulRow(Var, Var),
    /// Matrix times a column vector broadcast across the columns (gating).
    MulCol(Var, Var),
    /// Inverted dropout; the mask already folds in the 1/(1-p) rescale.
    Dropout(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by a backward pass, aligned with tape variables.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`.
    ///
    /// Zero tensor if the variable does not influence the root.
    pub fn get(&self, v: Var, tape: &Tape) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Record of differentiable operations in creation order.
///
/// Creation order is topological (operands exist before results), so the
/// backward pass is a single reverse sweep that visits each op exactly once.
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant or input; leaves receive gradients but have no
    /// inputs of their own.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumError::ShapeMismatch {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        out.add_assign(tb)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `a` (r x c) plus row vector (1 x c), broadcast to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        if tr.rows() != 1 || tr.cols() != c {
            return Err(NumError::ShapeMismatch {
                op: "add_row",
                left: ta.shape().to_vec(),
                right: tr.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        for i in 0..out.rows() {
            for j in 0..c {
                let v = out.at(i, j) + tr.data()[j];
                out.set(i, j, v);
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumError::ShapeMismatch {
                op: "sub",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumError::ShapeMismatch {
                op: "mul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise square, recorded as `a * a`.
    pub fn square(&mut self, a: Var) -> Result<Var, NumError> {
        self.mul(a, a)
    }

    /// Tensor times a 1x1 scalar variable (e.g. a learnable gain).
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, NumError> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(NumError::BadShape {
                op: "mul_scalar",
                shape: ts.shape().to_vec(),
                why: "scalar operand must hold exactly one value".into(),
            });
        }
        let sv = ts.item();
        let out = self.value(a).map(|x| x * sv);
        Ok(self.push(out, Op::MulScalar(a, s)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, NumError> {
        if !(0.0..1.0).contains(&slope) || slope == 0.0 {
            return Err(NumError::Config(format!(
                "leaky_relu slope must be in (0, 1), got {slope}"
            )));
        }
        let out = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        Ok(self.push(out, Op::LeakyRelu(a, slope)))
    }

    /// Leaky ReLU with the crate-wide default slope.
    pub fn act(&mut self, a: Var) -> Result<Var, NumError> {
        self.leaky_relu(a, LEAKY_SLOPE)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let out = softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    /// Softmax over each row restricted to columns k <= q (causal mask).
    ///
    /// Masked entries come out exactly 0, as if the logits held `-inf`.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if r != c {
            return Err(NumError::BadShape {
                op: "causal_softmax",
                shape: t.shape().to_vec(),
                why: "causal mask needs a square score matrix".into(),
            });
        }
        let mut out = Tensor::zeros(&[r, c]);
        for q in 0..r {
            let admissible = &t.data()[q * c..q * c + q + 1];
            let max = admissible.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..=q {
                let e = (admissible[k] - max).exp();
                out.set(q, k, e);
                sum += e;
            }
            for k in 0..=q {
                let v = out.at(q, k) / sum;
                out.set(q, k, v);
            }
        }
        Ok(self.push(out, Op::CausalSoftmax(a)))
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if d < 2 {
            return Err(NumError::BadShape {
                op: "layer_norm",
                shape: tx.shape().to_vec(),
                why: "normalized axis must have at least 2 elements".into(),
            });
        }
        if tg.numel() != d || tb.numel() != d {
            return Err(NumError::ShapeMismatch {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let r = tx.rows();
        let mut out = Tensor::zeros(&[r, d]);
        for i in 0..r {
            let row = &tx.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * inv;
                out.set(i, j, tg.data()[j] * xhat + tb.data()[j]);
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transposed();
        self.push(out, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, NumError> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Stack matrices vertically; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(NumError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, c],
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Stack matrices horizontally; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let r = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(NumError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![r, cols],
                    right: t.shape().to_vec(),
                });
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(&[r, cols]);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let pc = t.cols();
            for i in 0..r {
                for j in 0..pc {
                    out.set(i, off + j, t.at(i, j));
                }
            }
            off += pc;
        }
        // Recompute values borrow-free above, then record.
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if start + len > r {
            return Err(NumError::BadShape {
                op: "slice_rows",
                shape: t.shape().to_vec(),
                why: format!("rows {start}..{} out of range", start + len),
            });
        }
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        Ok(self.push(out, Op::SliceRows { a, start }))
    }

    /// Mean over every element, producing a 1x1 tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(a))
    }

    /// Column means: (r x c) -> (1 x c).
    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(&[1, c]);
        for j in 0..c {
            let mut s = 0.0;
            for i in 0..r {
                s += t.at(i, j);
            }
            out.set(0, j, s / r as f64);
        }
        self.push(out, Op::MeanAxis0(a))
    }

    /// Column maxima: (r x c) -> (1 x c). Ties resolve to the first row.
    pub fn max_axis0(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(&[1, c]);
        let mut arg = vec![0usize; c];
        for j in 0..c {
            let mut best = t.at(0, j);
            for i in 1..r {
                if t.at(i, j) > best {
                    best = t.at(i, j);
                    arg[j] = i;
                }
            }
            out.set(0, j, best);
        }
        self.push(out, Op::MaxAxis0(a, arg))
    }

    /// Row means: (r x c) -> (r x 1).
    pub fn mean_axis1(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(&[r, 1]);
        for i in 0..r {
            let s: f64 = t.data()[i * c..(i + 1) * c].iter().sum();
            out.set(i, 0, s / c as f64);
        }
        self.push(out, Op::MeanAxis1(a))
    }

    /// Row maxima: (r x c) -> (r x 1). Ties resolve to the first column.
    pub fn max_axis1(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(&[r, 1]);
        let mut arg = vec![0usize; r];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let mut best = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    arg[i] = j;
                }
            }
            out.set(i, 0, best);
        }
        self.push(out, Op::MaxAxis1(a, arg))
    }

    /// `a` (r x c) gated by a row vector (1 x c) broadcast down the rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        if tr.rows() != 1 || tr.cols() != c {
            return Err(NumError::ShapeMismatch {
                op: "mul_row",
                left: ta.shape().to_vec(),
                right: tr.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        for i in 0..out.rows() {
            for j in 0..c {
                let v = out.at(i, j) * tr.data()[j];
                out.set(i, j, v);
            }
        }
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    /// `a` (r x c) gated by a column vector (r x 1) broadcast across columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, NumError> {
        let (ta, tc) = (self.value(a), self.value(col));
        let r = ta.rows();
        if tc.rows() != r || tc.cols() != 1 {
            return Err(NumError::ShapeMismatch {
                op: "mul_col",
                left: ta.shape().to_vec(),
                right: tc.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        for i in 0..r {
            for j in 0..out.cols() {
                let v = out.at(i, j) * tc.data()[i];
                out.set(i, j, v);
            }
        }
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    /// Inverted dropout: keep with probability 1-p and rescale by 1/(1-p).
    ///
    /// Call only in training mode; inference paths skip the op entirely.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl Rng) -> Result<Var, NumError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumError::Config(format!(
                "dropout rate must be in [0, 1), got {p}"
            )));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = t
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect::<Vec<_>>();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout(a, mask)))
    }

    /// Reverse sweep from `root` (which must be 1x1), accumulating gradients
    /// for every variable that influences it.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumError> {
        if self.value(root).numel() != 1 {
            return Err(NumError::BadShape {
                op: "backward",
                shape: self.value(root).shape().to_vec(),
                why: "backward root must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) -> Result<(), NumError> {
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), NumError> {
        match &self.nodes[idx].op {
            Op::Leaf => Ok(()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = matmul(g, &tb.transposed())?;
                let db = matmul(&ta.transposed(), g)?;
                Self::accumulate(grads, *a, da)?;
                Self::accumulate(grads, *b, db)
            }
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone())?;
                Self::accumulate(grads, *b, g.clone())
            }
            Op::AddRow(a, row) => {
                Self::accumulate(grads, *a, g.clone())?;
                let c = g.cols();
                let mut dr = Tensor::zeros(&[1, c]);
                for i in 0..g.rows() {
                    for j in 0..c {
                        let v = dr.at(0, j) + g.at(i, j);
                        dr.set(0, j, v);
                    }
                }
                Self::accumulate(grads, *row, dr)
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, g.clone())?;
                Self::accumulate(grads, *b, g.map(|v| -v))
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
                )?;
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                )?;
                Self::accumulate(grads, *a, da)?;
                Self::accumulate(grads, *b, db)
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).item();
                let ta = self.value(*a);
                let ds: f64 = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).sum();
                Self::accumulate(grads, *a, g.map(|v| v * sv))?;
                Self::accumulate(grads, *s, Tensor::scalar(ds))
            }
            Op::Scale(a, c) => Self::accumulate(grads, *a, g.map(|v| v * c)),
            Op::LeakyRelu(a, slope) => {
                let ta = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(gv, xv)| if *xv >= 0.0 { *gv } else { slope * gv })
                    .collect();
                Self::accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data)?)
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                Self::accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data)?)
            }
            Op::SoftmaxRows(a) | Op::CausalSoftmax(a) => {
                let y = &self.nodes[idx].value;
                let (r, c) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g.at(i, j) * y.at(i, j);
                    }
                    for j in 0..c {
                        dx.set(i, j, y.at(i, j) * (g.at(i, j) - dot));
                    }
                }
                Self::accumulate(grads, *a, dx)
            }
            Op::LayerNorm { x, gain, bias } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let (r, d) = (tx.rows(), tx.cols());
                let mut dx = Tensor::zeros(&[r, d]);
                let mut dgain = Tensor::zeros(tg.shape());
                let mut dbias = Tensor::zeros(tg.shape());
                for i in 0..r {
                    let row = &tx.data()[i * d..(i + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> =
                        (0..d).map(|j| g.at(i, j) * tg.data()[j]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d as f64;
                    for j in 0..d {
                        dx.set(
                            i,
                            j,
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat),
                        );
                        dgain.data_mut()[j] += g.at(i, j) * xhat[j];
                        dbias.data_mut()[j] += g.at(i, j);
                    }
                }
                Self::accumulate(grads, *x, dx)?;
                Self::accumulate(grads, *gain, dgain)?;
                Self::accumulate(grads, *bias, dbias)
            }
            Op::Transpose(a) => Self::accumulate(grads, *a, g.transposed()),
            Op::Reshape(a) => {
                let src_shape = self.value(*a).shape().to_vec();
                let dg = Tensor::new(src_shape, g.data().to_vec())?;
                Self::accumulate(grads, *a, dg)
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    let data = g.data()[off * c..(off + pr) * c].to_vec();
                    Self::accumulate(grads, p, Tensor::new(vec![pr, c], data)?)?;
                    off += pr;
                }
                Ok(())
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let mut dp = Tensor::zeros(&[r, pc]);
                    for i in 0..r {
                        for j in 0..pc {
                            dp.set(i, j, g.at(i, off + j));
                        }
                    }
                    Self::accumulate(grads, p, dp)?;
                    off += pc;
                }
                Ok(())
            }
            Op::SliceRows { a, start } => {
                let src = self.value(*a);
                let mut da = Tensor::zeros(src.shape());
                let c = src.cols();
                for i in 0..g.rows() {
                    for j in 0..c {
                        da.set(start + i, j, g.at(i, j));
                    }
                }
                Self::accumulate(grads, *a, da)
            }
            Op::MeanAll(a) => {
                let src = self.value(*a);
                let gv = g.item() / src.numel() as f64;
                Self::accumulate(grads, *a, Tensor::full(src.shape(), gv))
            }
            Op::MeanAxis0(a) => {
                let src = self.value(*a);
                let (r, c) = (src.rows(), src.cols());
                let mut da = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        da.set(i, j, g.at(0, j) / r as f64);
                    }
                }
                Self::accumulate(grads, *a, da)
            }
            Op::MaxAxis0(a, arg) => {
                let src = self.value(*a);
                let mut da = Tensor::zeros(src.shape());
                for (j, &i) in arg.iter().enumerate() {
                    da.set(i, j, g.at(0, j));
                }
                Self::accumulate(grads, *a, da)
            }
            Op::MeanAxis1(a) => {
                let src = self.value(*a);
                let (r, c) = (src.rows(), src.cols());
                let mut da = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        da.set(i, j, g.at(i, 0) / c as f64);
                    }
                }
                Self::accumulate(grads, *a, da)
            }
            Op::MaxAxis1(a, arg) => {
                let src = self.value(*a);
                let mut da = Tensor::zeros(src.shape());
                for (i, &j) in arg.iter().enumerate() {
                    da.set(i, j, g.at(i, 0));
                }
                Self::accumulate(grads, *a, da)
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let (r, c) = (ta.rows(), ta.cols());
                let mut da = Tensor::zeros(&[r, c]);
                let mut dr = Tensor::zeros(&[1, c]);
                for i in 0..r {
                    for j in 0..c {
                        da.set(i, j, g.at(i, j) * tr.data()[j]);
                        dr.data_mut()[j] += g.at(i, j) * ta.at(i, j);
                    }
                }
                Self::accumulate(grads, *a, da)?;
                Self::accumulate(grads, *row, dr)
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (self.value(*a), self.value(*col));
                let (r, c) = (ta.rows(), ta.cols());
                let mut da = Tensor::zeros(&[r, c]);
                let mut dc = Tensor::zeros(&[r, 1]);
                for i in 0..r {
                    for j in 0..c {
                        da.set(i, j, g.at(i, j) * tc.data()[i]);
                        dc.data_mut()[i] += g.at(i, j) * ta.at(i, j);
                    }
                }
                Self::accumulate(grads, *a, da)?;
                Self::accumulate(grads, *col, dc)
            }
            Op::Dropout(a, mask) => {
                let data = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(gv, m)| gv * m)
                    .collect();
                Self::accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data)?)
            }
        }
    }
}
