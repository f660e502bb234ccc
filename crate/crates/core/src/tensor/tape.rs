use std::sync::Arc;

use super::{gemm, ParamId, ParamStore, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Pow(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Softmax(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    Sum { src: usize, axis: Option<usize> },
    Mean { src: usize, axis: Option<usize> },
    Max { src: usize, argmax: Vec<usize> },
    GatherRows { src: usize, index: Vec<usize> },
    ScatterAddRows { src: usize, index: Vec<usize> },
    SegmentMax { src: usize, argmax: Vec<usize> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in execution order so that gradients can
/// be propagated backwards once.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    checked: bool,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    if t.shape().len() != 2 {
        return Err(TensorError::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    /// A recording tape with NaN/inf input checks enabled.
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            checked: true,
            record: true,
        }
    }

    /// A tape that only computes forward values; nothing requires gradients.
    pub fn inference() -> Tape {
        Tape {
            record: false,
            ..Tape::new()
        }
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = self.record && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, op: &'static str, inputs: &[usize]) -> Result<(), TensorError> {
        if self.checked {
            for &i in inputs {
                if self.nodes[i].value.data().iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::Data(op));
                }
            }
        }
        Ok(())
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(t),
            op: Op::Leaf,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Records a parameter as a differentiable leaf without copying its data.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.shared_value(id),
            op: Op::Param(id),
            requires_grad: self.record,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = rank2("matmul", ta)?;
        let (k2, n) = rank2("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        self.check("matmul", &[a.0, b.0])?;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    fn broadcast_shape(&self, op: &'static str, a: usize, b: usize) -> Result<(usize, usize), TensorError> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (ra, ca) = rank2(op, ta)?;
        let (rb, cb) = rank2(op, tb)?;
        let dim = |x: usize, y: usize| {
            if x == y || y == 1 {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else {
                None
            }
        };
        match (dim(ra, rb), dim(ca, cb)) {
            (Some(r), Some(c)) => Ok((r, c)),
            _ => Err(shape_err(op, ta, tb)),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (r, c) = self.broadcast_shape(name, a.0, b.0)?;
        self.check(name, &[a.0, b.0])?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ra, ca) = (ta.shape()[0], ta.shape()[1]);
        let (rb, cb) = (tb.shape()[0], tb.shape()[1]);
        let (da, db) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(r * c);
        if ra == rb && ca == cb {
            out.extend(da.iter().zip(db).map(|(&x, &y)| f(x, y)));
        } else {
            for i in 0..r {
                let ia = if ra == 1 { 0 } else { i };
                let ib = if rb == 1 { 0 } else { i };
                for j in 0..c {
                    let x = da[ia * ca + if ca == 1 { 0 } else { j }];
                    let y = db[ib * cb + if cb == 1 { 0 } else { j }];
                    out.push(f(x, y));
                }
            }
        }
        Ok(self.push(Tensor::matrix(r, c, out)?, op, &[a.0, b.0]))
    }

    /// Elementwise sum with broadcasting over unit dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        self.check(name, &[a.0])?;
        let t = &self.nodes[a.0].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())?;
        Ok(self.push(out, op, &[a.0]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.unary("scale", a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a.0))
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var, TensorError> {
        self.unary("pow", a, |x| x.powf(p), Op::Pow(a.0, p))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a.0))
    }

    /// ln(1 + e^x), evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("softplus", a, softplus, Op::Softplus(a.0))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check("softmax", &[a.0])?;
        let t = &self.nodes[a.0].value;
        let (r, c) = rank2("softmax", t)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                z += e;
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::Softmax(a.0), &[a.0]))
    }

    /// Concatenation along rows (axis 0) or columns (axis 1).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() || axis > 1 {
            return Err(TensorError::Parameter("concat needs parts and axis 0 or 1".into()));
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.check("concat", &ids)?;
        let first = &self.nodes[ids[0]].value;
        let (r0, c0) = rank2("concat", first)?;
        let mut total = 0;
        for &i in &ids {
            let t = &self.nodes[i].value;
            let (r, c) = rank2("concat", t)?;
            if (axis == 1 && r != r0) || (axis == 0 && c != c0) {
                return Err(shape_err("concat", first, t));
            }
            total += if axis == 1 { c } else { r };
        }
        let (rows, cols) = if axis == 1 { (r0, total) } else { (total, c0) };
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &i in &ids {
                out.extend_from_slice(self.nodes[i].value.data());
            }
        } else {
            for row in 0..rows {
                for &i in &ids {
                    out.extend_from_slice(self.nodes[i].value.row_slice(row));
                }
            }
        }
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        let (r, c) = rank2("slice", t)?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent || len == 0 {
            return Err(TensorError::Shape {
                op: "slice",
                lhs: t.shape().to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        self.check("slice", &[a.0])?;
        let t = &self.nodes[a.0].value;
        let (out, shape) = if axis == 0 {
            (t.data()[start * c..(start + len) * c].to_vec(), (len, c))
        } else {
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&t.row_slice(i)[start..start + len]);
            }
            (out, (r, len))
        };
        Ok(self.push(Tensor::matrix(shape.0, shape.1, out)?, Op::Slice { src: a.0, axis, start }, &[a.0]))
    }

    fn reduce(&self, a: usize, axis: Option<usize>) -> Result<(usize, usize, Vec<f64>), TensorError> {
        let t = &self.nodes[a].value;
        let (r, c) = rank2("reduce", t)?;
        let d = t.data();
        Ok(match axis {
            None => (1, 1, vec![d.iter().sum()]),
            Some(0) => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += d[i * c + j];
                    }
                }
                (1, c, out)
            }
            Some(1) => (r, 1, (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect()),
            Some(_) => return Err(TensorError::Parameter("axis must be 0 or 1".into())),
        })
    }

    /// Sum over an axis, or over everything when `axis` is None.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.check("sum", &[a.0])?;
        let (r, c, out) = self.reduce(a.0, axis)?;
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::Sum { src: a.0, axis }, &[a.0]))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.check("mean", &[a.0])?;
        let (r, c, mut out) = self.reduce(a.0, axis)?;
        let t = &self.nodes[a.0].value;
        let n = match axis {
            None => t.len(),
            Some(0) => t.rows(),
            _ => t.cols(),
        } as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::Mean { src: a.0, axis }, &[a.0]))
    }

    /// Maximum over an axis; the gradient goes to the first maximal entry.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check("max", &[a.0])?;
        let t = &self.nodes[a.0].value;
        let (r, c) = rank2("max", t)?;
        let d = t.data();
        let (shape, out, argmax) = match axis {
            0 => {
                let mut best = vec![0usize; c];
                for i in 1..r {
                    for j in 0..c {
                        if d[i * c + j] > d[best[j] * c + j] {
                            best[j] = i;
                        }
                    }
                }
                let out = (0..c).map(|j| d[best[j] * c + j]).collect();
                let flat = (0..c).map(|j| best[j] * c + j).collect();
                ((1, c), out, flat)
            }
            1 => {
                let mut out = Vec::with_capacity(r);
                let mut flat = Vec::with_capacity(r);
                for i in 0..r {
                    let row = &d[i * c..(i + 1) * c];
                    let mut b = 0;
                    for j in 1..c {
                        if row[j] > row[b] {
                            b = j;
                        }
                    }
                    out.push(row[b]);
                    flat.push(i * c + b);
                }
                ((r, 1), out, flat)
            }
            _ => return Err(TensorError::Parameter("axis must be 0 or 1".into())),
        };
        Ok(self.push(
            Tensor::matrix(shape.0, shape.1, out)?,
            Op::Max { src: a.0, argmax },
            &[a.0],
        ))
    }

    /// Selects rows of `a` by index (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, TensorError> {
        self.check("gather_rows", &[a.0])?;
        let t = &self.nodes[a.0].value;
        let (r, c) = rank2("gather_rows", t)?;
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            out.extend_from_slice(t.row_slice(i));
        }
        if index.is_empty() {
            return Err(TensorError::Parameter("gather_rows with no indices".into()));
        }
        Ok(self.push(
            Tensor::matrix(index.len(), c, out)?,
            Op::GatherRows {
                src: a.0,
                index: index.to_vec(),
            },
            &[a.0],
        ))
    }

    /// out[index[i]] += a[i] for an output with `rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, index: &[usize], rows: usize) -> Result<Var, TensorError> {
        self.check("scatter_add_rows", &[a.0])?;
        let t = &self.nodes[a.0].value;
        let (r, c) = rank2("scatter_add_rows", t)?;
        if index.len() != r || rows == 0 {
            return Err(TensorError::Shape {
                op: "scatter_add_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![index.len(), rows],
            });
        }
        let mut out = vec![0.0; rows * c];
        for (i, &dst) in index.iter().enumerate() {
            if dst >= rows {
                return Err(TensorError::Index {
                    op: "scatter_add_rows",
                    index: dst,
                    len: rows,
                });
            }
            let src = t.row_slice(i);
            for (o, &s) in out[dst * c..(dst + 1) * c].iter_mut().zip(src) {
                *o += s;
            }
        }
        Ok(self.push(
            Tensor::matrix(rows, c, out)?,
            Op::ScatterAddRows {
                src: a.0,
                index: index.to_vec(),
            },
            &[a.0],
        ))
    }

    /// Column-wise maximum within each segment; rows of `a` belong to
    /// segment `segment[i]`. Every segment must be non-empty.
    pub fn segment_max(&mut self, a: Var, segment: &[usize], segments: usize) -> Result<Var, TensorError> {
        self.check("segment_max", &[a.0])?;
        let t = &self.nodes[a.0].value;
        let (r, c) = rank2("segment_max", t)?;
        if segment.len() != r {
            return Err(TensorError::Shape {
                op: "segment_max",
                lhs: t.shape().to_vec(),
                rhs: vec![segment.len()],
            });
        }
        let mut argmax = vec![usize::MAX; segments * c];
        let d = t.data();
        for (i, &s) in segment.iter().enumerate() {
            if s >= segments {
                return Err(TensorError::Index {
                    op: "segment_max",
                    index: s,
                    len: segments,
                });
            }
            for j in 0..c {
                let slot = &mut argmax[s * c + j];
                if *slot == usize::MAX || d[i * c + j] > d[*slot] {
                    *slot = i * c + j;
                }
            }
        }
        if argmax.iter().any(|&a| a == usize::MAX) {
            return Err(TensorError::Parameter("segment_max with an empty segment".into()));
        }
        let out = argmax.iter().map(|&k| d[k]).collect();
        Ok(self.push(
            Tensor::matrix(segments, c, out)?,
            Op::SegmentMax { src: a.0, argmax },
            &[a.0],
        ))
    }

    /// Fills gradients of every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let len = self.nodes[target].value.len();
        let slot = grads[target].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    /// Adds an output-shaped gradient into a possibly broadcast input.
    fn accumulate_broadcast(&self, grads: &mut [Option<Vec<f64>>], target: usize, out_shape: (usize, usize), g: &[f64], sign: f64) {
        let t = &self.nodes[target].value;
        let (rt, ct) = (t.shape()[0], t.shape()[1]);
        let (r, c) = out_shape;
        self.accumulate(grads, target, |slot| {
            if rt == r && ct == c {
                for (s, &v) in slot.iter_mut().zip(g) {
                    *s += sign * v;
                }
            } else {
                for i in 0..r {
                    let it = if rt == 1 { 0 } else { i };
                    for j in 0..c {
                        let jt = if ct == 1 { 0 } else { j };
                        slot[it * ct + jt] += sign * g[i * c + j];
                    }
                }
            }
        });
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = G * B^T ; dB = A^T * G
                self.accumulate(grads, *a, |slot| gemm(m, n, k, g, false, tb.data(), true, slot, true));
                self.accumulate(grads, *b, |slot| gemm(k, m, n, ta.data(), true, g, false, slot, true));
            }
            Op::Add(a, b) => {
                let s = (out.shape()[0], out.shape()[1]);
                self.accumulate_broadcast(grads, *a, s, g, 1.0);
                self.accumulate_broadcast(grads, *b, s, g, 1.0);
            }
            Op::Sub(a, b) => {
                let s = (out.shape()[0], out.shape()[1]);
                self.accumulate_broadcast(grads, *a, s, g, 1.0);
                self.accumulate_broadcast(grads, *b, s, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let expand = |t: &Tensor| -> Vec<f64> {
                    let (rt, ct) = (t.shape()[0], t.shape()[1]);
                    if rt == r && ct == c {
                        return t.data().to_vec();
                    }
                    let mut v = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for j in 0..c {
                            v.push(t.data()[if rt == 1 { 0 } else { i } * ct + if ct == 1 { 0 } else { j }]);
                        }
                    }
                    v
                };
                if self.nodes[*a].requires_grad {
                    let vb = expand(&self.nodes[*b].value);
                    let ga: Vec<f64> = g.iter().zip(&vb).map(|(x, y)| x * y).collect();
                    self.accumulate_broadcast(grads, *a, (r, c), &ga, 1.0);
                }
                if self.nodes[*b].requires_grad {
                    let va = expand(&self.nodes[*a].value);
                    let gb: Vec<f64> = g.iter().zip(&va).map(|(x, y)| x * y).collect();
                    self.accumulate_broadcast(grads, *b, (r, c), &gb, 1.0);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |slot| {
                slot.iter_mut().zip(g).for_each(|(d, &v)| *d += s * v)
            }),
            Op::AddScalar(a) => self.accumulate(grads, *a, |slot| slot.iter_mut().zip(g).for_each(|(d, &v)| *d += v)),
            Op::Pow(a, p) => {
                let x = self.nodes[*a].value.data();
                self.accumulate(grads, *a, |slot| {
                    for i in 0..slot.len() {
                        slot[i] += g[i] * p * x[i].powf(p - 1.0);
                    }
                })
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, |slot| {
                for (i, y) in out.data().iter().enumerate() {
                    slot[i] += g[i] * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => self.accumulate(grads, *a, |slot| {
                for (i, y) in out.data().iter().enumerate() {
                    slot[i] += g[i] * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                self.accumulate(grads, *a, |slot| {
                    for i in 0..slot.len() {
                        if x[i] > 0.0 {
                            slot[i] += g[i];
                        }
                    }
                })
            }
            Op::Softplus(a) => {
                let x = self.nodes[*a].value.data();
                self.accumulate(grads, *a, |slot| {
                    for i in 0..slot.len() {
                        slot[i] += g[i] * sigmoid(x[i]);
                    }
                })
            }
            Op::Softmax(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let y = out.data();
                self.accumulate(grads, *a, |slot| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            slot[j] += y[j] * (g[j] - dot);
                        }
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let cols = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let t = &self.nodes[p].value;
                    let (pr, pc) = (t.shape()[0], t.shape()[1]);
                    if *axis == 0 {
                        let start = offset * cols;
                        self.accumulate(grads, p, |slot| {
                            slot.iter_mut().zip(&g[start..start + pr * pc]).for_each(|(d, &v)| *d += v)
                        });
                        offset += pr;
                    } else {
                        let off = offset;
                        self.accumulate(grads, p, |slot| {
                            for i in 0..pr {
                                for j in 0..pc {
                                    slot[i * pc + j] += g[i * cols + off + j];
                                }
                            }
                        });
                        offset += pc;
                    }
                }
            }
            Op::Slice { src, axis, start } => {
                let t = &self.nodes[*src].value;
                let c = t.shape()[1];
                let (or, oc) = (out.shape()[0], out.shape()[1]);
                self.accumulate(grads, *src, |slot| {
                    if *axis == 0 {
                        slot[start * c..(start + or) * c]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(d, &v)| *d += v);
                    } else {
                        for i in 0..or {
                            for j in 0..oc {
                                slot[i * c + start + j] += g[i * oc + j];
                            }
                        }
                    }
                })
            }
            Op::Sum { src, axis } | Op::Mean { src, axis } => {
                let t = &self.nodes[*src].value;
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let is_mean = matches!(node.op, Op::Mean { .. });
                let denom = match (is_mean, axis) {
                    (false, _) => 1.0,
                    (true, None) => (r * c) as f64,
                    (true, Some(0)) => r as f64,
                    (true, _) => c as f64,
                };
                self.accumulate(grads, *src, |slot| {
                    for i in 0..r {
                        for j in 0..c {
                            let gv = match axis {
                                None => g[0],
                                Some(0) => g[j],
                                _ => g[i],
                            };
                            slot[i * c + j] += gv / denom;
                        }
                    }
                })
            }
            Op::Max { src, argmax, .. } | Op::SegmentMax { src, argmax } => self.accumulate(grads, *src, |slot| {
                for (k, &flat) in argmax.iter().enumerate() {
                    slot[flat] += g[k];
                }
            }),
            Op::GatherRows { src, index } => {
                let c = out.shape()[1];
                self.accumulate(grads, *src, |slot| {
                    for (k, &i) in index.iter().enumerate() {
                        for j in 0..c {
                            slot[i * c + j] += g[k * c + j];
                        }
                    }
                })
            }
            Op::ScatterAddRows { src, index } => {
                let c = out.shape()[1];
                self.accumulate(grads, *src, |slot| {
                    for (k, &dst) in index.iter().enumerate() {
                        for j in 0..c {
                            slot[k * c + j] += g[dst * c + j];
                        }
                    }
                })
            }
        }
    }

    /// Gradient of `v` after [`Tape::backward`]; zeros for leaves that did
    /// not influence the loss.
    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        if !self.consumed || !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(
            self.grads[v.0]
                .clone()
                .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]),
        )
    }

    /// Adds the gradients of all parameter leaves into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(Some(g)) = self.grads.get(i) {
                    store.add_grad(id, g);
                }
            }
        }
    }
}
