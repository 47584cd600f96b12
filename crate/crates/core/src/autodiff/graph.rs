use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{Array, AutodiffError, ParamId, ParamStore, Real};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    MeanGroups(Var, Vec<Vec<usize>>),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Array<T>,
        count: usize,
    },
    Affine(Var, Var, Option<Var>),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array<T>,
        inv_std: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    BilinearRows(Var, Var, usize),
    Reshape(Var),
    SumAll(Var),
}

struct Node<T> {
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Array<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    training: bool,
    rng: ChaCha8Rng,
    nonfinite: usize,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    node_grads: Vec<Option<Array<T>>>,
    param_nodes: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the objective with respect to an intermediate node.
    pub fn wrt(&self, v: Var) -> Option<&Array<T>> {
        self.node_grads[v.0].as_ref()
    }

    /// Parameter gradients reached by backward.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array<T>)> {
        self.param_nodes
            .iter()
            .filter_map(|&(id, n)| self.node_grads[n].as_ref().map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Array<T>> {
        self.param_nodes
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, n)| self.node_grads[n].as_ref())
    }
}

fn shape_err<T: Real>(op: &'static str, a: &Array<T>, b: &Array<T>) -> AutodiffError {
    AutodiffError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'s, T: Real> Graph<'s, T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            nonfinite: 0,
        }
    }

    /// Training-mode graph; `seed` drives the dropout masks.
    pub fn training(store: &'s ParamStore<T>, seed: u64) -> Self {
        let mut g = Graph::new(store);
        g.training = true;
        g.rng = ChaCha8Rng::seed_from_u64(seed);
        g
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Number of kernels whose output contained NaN or ±Inf.
    pub fn nonfinite_count(&self) -> usize {
        self.nonfinite
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, inputs: &[Var]) -> Var {
        if !value.all_finite() {
            self.nonfinite += 1;
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Const,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![T::zero(); m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Array::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(shape_err("transpose", av, av));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        let value = Array::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Elementwise sum; `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
            Array::new(av.shape().to_vec(), data)?
        } else if bv.len() == av.cols() && bv.rows() == 1 && av.shape().len() == 2 {
            let mut out = av.clone();
            let c = av.cols();
            for (i, x) in out.data_mut().iter_mut().enumerate() {
                *x += bv.data()[i % c];
            }
            out
        } else {
            return Err(shape_err("add", av, bv));
        };
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("sub", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let value = Array::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Array::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::Index {
                op: "concat",
                index: 0,
                extent: 0,
            });
        }
        let first = self.value(parts[0]);
        let rows = first.rows();
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows || pv.shape().len() != first.shape().len() {
                return Err(shape_err("concat", first, pv));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = first.shape().to_vec();
        if shape.is_empty() {
            shape.push(total);
        } else {
            *shape.last_mut().unwrap() = total;
        }
        let value = Array::new(shape, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks matrices (or rows) along the first axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::Index {
                op: "stack_rows",
                index: 0,
                extent: 0,
            });
        }
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(shape_err("stack_rows", self.value(parts[0]), pv));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let value = Array::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::StackRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(AutodiffError::Index {
                op: "slice_cols",
                index: start + len,
                extent: av.cols(),
            });
        }
        let rows = av.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let value = Array::new(vec![rows, len], out)?;
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    /// Gathers rows by index; also serves as the embedding lookup.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(AutodiffError::Index {
                    op: "select_rows",
                    index: i,
                    extent: rows,
                });
            }
            out.extend_from_slice(av.row(i));
        }
        let value = Array::new(vec![idx.len(), cols], out)?;
        Ok(self.push(value, Op::SelectRows(a, idx.to_vec()), &[a]))
    }

    pub fn embedding(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = self.param(table);
        self.select_rows(t, ids)
    }

    /// Row-wise mean over each index group; output row `g` is the mean of
    /// the input rows listed in `groups[g]`.
    ///
    /// Uses a running mean so that a group of identical rows returns that
    /// row exactly.
    pub fn mean_groups(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut out = vec![T::zero(); groups.len() * cols];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(AutodiffError::Index {
                    op: "mean_groups",
                    index: g,
                    extent: 0,
                });
            }
            let orow = &mut out[g * cols..(g + 1) * cols];
            for (k, &r) in members.iter().enumerate() {
                if r >= rows {
                    return Err(AutodiffError::Index {
                        op: "mean_groups",
                        index: r,
                        extent: rows,
                    });
                }
                let inv = T::one() / T::of((k + 1) as f64);
                for (o, &x) in orow.iter_mut().zip(av.row(r)) {
                    *o += (x - *o) * inv;
                }
            }
        }
        let value = Array::new(vec![groups.len(), cols], out)?;
        Ok(self.push(value, Op::MeanGroups(a, groups.to_vec()), &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Mean cross-entropy of `logits` rows against target classes; rows with
    /// a `None` target are masked out. Returns a scalar (0 if nothing counts).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(AutodiffError::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let classes = lv.cols();
        let probs = softmax_rows(lv);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= classes {
                    return Err(AutodiffError::Index {
                        op: "cross_entropy",
                        index: t,
                        extent: classes,
                    });
                }
                let row = lv.row(r);
                let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
                total += (lse - row[t]).as_f64();
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let value = Array::scalar(T::of(loss));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// `x · Wᵀ + b` with `W` shaped `[out, in]` and `b` shaped `[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.cols() {
            return Err(shape_err("affine", xv, wv));
        }
        let (m, k, n) = (xv.rows(), xv.cols(), wv.rows());
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(shape_err("affine bias", wv, bv));
            }
            for r in 0..m {
                out[r * n..(r + 1) * n].copy_from_slice(bv.data());
            }
        }
        gemm_nt_acc(xv.data(), wv.data(), &mut out, m, k, n);
        let value = Array::new(vec![m, n], out)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        Ok(self.push(value, Op::Affine(x, w, b), &inputs))
    }

    /// Affine map through stored parameters.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (self.param(w), self.param(b));
        self.affine(x, w, Some(b))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, cols) = (xv.rows(), xv.cols());
        if gv.len() != cols || bv.len() != cols {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let n = T::of(cols as f64);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::of(eps)).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let shape = xv.shape().to_vec();
        let value = Array::new(shape.clone(), out)?;
        let xhat = Array::new(shape, xhat)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout; the identity outside training or when `rate` is 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let scale = T::of(1.0 / keep);
        let n = self.value(a).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let av = self.value(a);
        let data = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Array::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Dropout(a, mask), &[a])
    }

    /// Per-row bilinear forms: `out[p, c] = Σ_k m[p, c·d + k] · y[p, k]`
    /// with `m` of shape `[P, classes·d]` and `y` of shape `[P, d]`.
    pub fn bilinear_rows(&mut self, m: Var, y: Var, classes: usize) -> Result<Var> {
        let (mv, yv) = (self.value(m), self.value(y));
        let d = yv.cols();
        if mv.rows() != yv.rows() || mv.cols() != classes * d {
            return Err(shape_err("bilinear_rows", mv, yv));
        }
        let p = mv.rows();
        let mut out = vec![T::zero(); p * classes];
        for r in 0..p {
            let mrow = mv.row(r);
            let yrow = yv.row(r);
            for c in 0..classes {
                out[r * classes + c] = mrow[c * d..(c + 1) * d]
                    .iter()
                    .zip(yrow)
                    .map(|(&a, &b)| a * b)
                    .sum();
            }
        }
        let value = Array::new(vec![p, classes], out)?;
        Ok(self.push(value, Op::BilinearRows(m, y, classes), &[m, y]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Array::scalar(s), Op::SumAll(a), &[a])
    }

    /// Reverse sweep from a scalar objective.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let lv = self.value(loss);
        grads[loss.0] = Some(Array::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let param_nodes = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(p, v)| v.map(|v| (ParamId(p), v.0)))
            .collect();
        Gradients {
            node_grads: grads,
            param_nodes,
        }
    }

    fn acc(&self, grads: &mut [Option<Array<T>>], v: Var, g: Array<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Array<T> {
        Array::new(self.value(v).shape().to_vec(), data).expect("gradient matches operand shape")
    }

    fn backprop_node(&self, i: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let out = self.nodes[i].value.as_ref();
        match &self.nodes[i].op {
            Op::Const | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut da = vec![T::zero(); m * k];
                gemm_nt_acc(g.data(), bv.data(), &mut da, m, n, k);
                let mut db = vec![T::zero(); k * n];
                gemm_tn_acc(av.data(), g.data(), &mut db, m, k, n);
                self.acc(grads, *a, self.like(*a, da));
                self.acc(grads, *b, self.like(*b, db));
            }
            Op::Transpose(a) => {
                let (n, m) = (g.rows(), g.cols());
                let mut da = vec![T::zero(); m * n];
                for r in 0..n {
                    for c in 0..m {
                        da[c * n + r] = g.data()[r * m + c];
                    }
                }
                self.acc(grads, *a, self.like(*a, da));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, self.like(*a, g.data().to_vec()));
                let bv = self.value(*b);
                if bv.shape() == g.shape() {
                    self.acc(grads, *b, self.like(*b, g.data().to_vec()));
                } else {
                    let c = g.cols();
                    let mut db = vec![T::zero(); c];
                    for r in 0..g.rows() {
                        for (d, &x) in db.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    self.acc(grads, *b, self.like(*b, db));
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, self.like(*a, g.data().to_vec()));
                self.acc(grads, *b, self.like(*b, g.data().iter().map(|&x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                let db = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                self.acc(grads, *a, self.like(*a, da));
                self.acc(grads, *b, self.like(*b, db));
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, self.like(*a, g.data().iter().map(|&x| x * *c).collect()));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    self.acc(grads, p, self.like(p, dp));
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, self.like(p, g.data()[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let (rows, cols, len) = (av.rows(), av.cols(), g.cols());
                let mut da = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    da[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                }
                self.acc(grads, *a, self.like(*a, da));
            }
            Op::SelectRows(a, idx) => {
                let av = self.value(*a);
                let cols = av.cols();
                let mut da = vec![T::zero(); av.len()];
                for (k, &r) in idx.iter().enumerate() {
                    for (d, &x) in da[r * cols..(r + 1) * cols].iter_mut().zip(g.row(k)) {
                        *d += x;
                    }
                }
                self.acc(grads, *a, self.like(*a, da));
            }
            Op::MeanGroups(a, groups) => {
                let av = self.value(*a);
                let cols = av.cols();
                let mut da = vec![T::zero(); av.len()];
                for (gi, members) in groups.iter().enumerate() {
                    let inv = T::one() / T::of(members.len() as f64);
                    for &r in members {
                        for (d, &x) in da[r * cols..(r + 1) * cols].iter_mut().zip(g.row(gi)) {
                            *d += x * inv;
                        }
                    }
                }
                self.acc(grads, *a, self.like(*a, da));
            }
            Op::Softmax(a) => {
                let y = out.expect("softmax output");
                let cols = y.cols();
                let mut da = vec![T::zero(); y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for c in 0..cols {
                        da[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.acc(grads, *a, self.like(*a, da));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let cols = probs.cols();
                let mut da = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let scale = g.item() / T::of(*count as f64);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for c in 0..cols {
                                let onehot = if c == t { T::one() } else { T::zero() };
                                da[r * cols + c] = (probs.row(r)[c] - onehot) * scale;
                            }
                        }
                    }
                }
                self.acc(grads, *logits, self.like(*logits, da));
            }
            Op::Affine(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.rows());
                let mut dx = vec![T::zero(); m * k];
                gemm_acc(g.data(), wv.data(), &mut dx, m, n, k);
                let mut dw = vec![T::zero(); n * k];
                gemm_tn_acc(g.data(), xv.data(), &mut dw, m, n, k);
                self.acc(grads, *x, self.like(*x, dx));
                self.acc(grads, *w, self.like(*w, dw));
                if let Some(b) = b {
                    let mut db = vec![T::zero(); n];
                    for r in 0..m {
                        for (d, &v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *b, self.like(*b, db));
                }
            }
            Op::Tanh(a) => {
                let y = out.expect("tanh output");
                let da = g.data().iter().zip(y.data()).map(|(&d, &t)| d * (T::one() - t * t)).collect();
                self.acc(grads, *a, self.like(*a, da));
            }
            Op::Sigmoid(a) => {
                let y = out.expect("sigmoid output");
                let da = g.data().iter().zip(y.data()).map(|(&d, &s)| d * s * (T::one() - s)).collect();
                self.acc(grads, *a, self.like(*a, da));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let da = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                self.acc(grads, *a, self.like(*a, da));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let (rows, cols) = (xhat.rows(), xhat.cols());
                let n = T::of(cols as f64);
                let mut dx = vec![T::zero(); rows * cols];
                let mut dgamma = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                let mut dxhat = vec![T::zero(); cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    for c in 0..cols {
                        dxhat[c] = gr[c] * gv.data()[c];
                        dgamma[c] += gr[c] * hr[c];
                        dbeta[c] += gr[c];
                    }
                    let mean_d = dxhat.iter().copied().sum::<T>() / n;
                    let mean_dh = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for c in 0..cols {
                        dx[r * cols + c] = inv_std[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                    }
                }
                self.acc(grads, *x, self.like(*x, dx));
                self.acc(grads, *gamma, self.like(*gamma, dgamma));
                self.acc(grads, *beta, self.like(*beta, dbeta));
            }
            Op::Dropout(a, mask) => {
                let da = g.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                self.acc(grads, *a, self.like(*a, da));
            }
            Op::BilinearRows(m, y, classes) => {
                let (mv, yv) = (self.value(*m), self.value(*y));
                let d = yv.cols();
                let mut dm = vec![T::zero(); mv.len()];
                let mut dy = vec![T::zero(); yv.len()];
                for r in 0..mv.rows() {
                    let mrow = mv.row(r);
                    let yrow = yv.row(r);
                    for c in 0..*classes {
                        let gz = g.data()[r * classes + c];
                        for k in 0..d {
                            dm[r * classes * d + c * d + k] += gz * yrow[k];
                            dy[r * d + k] += gz * mrow[c * d + k];
                        }
                    }
                }
                self.acc(grads, *m, self.like(*m, dm));
                self.acc(grads, *y, self.like(*y, dy));
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, self.like(*a, g.data().to_vec()));
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, self.like(*a, vec![g.item(); n]));
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_rows<T: Real>(a: &Array<T>) -> Array<T> {
    let cols = a.cols();
    let mut out = a.clone();
    for r in 0..a.rows() {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
    out
}
