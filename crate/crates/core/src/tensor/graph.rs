use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, add_into};
use super::{rows_cols, Gradients, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        b: Var,
    },
    AddN {
        parts: Vec<Var>,
    },
    Scale {
        x: Var,
        c: F,
    },
    AddScalar {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    CrossEntropy {
        x: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Sum {
        x: Var,
    },
    MeanRows {
        x: Var,
    },
    Dot {
        a: Var,
        b: Var,
    },
    Cosine {
        a: Var,
        b: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    AdditiveScores {
        p: Var,
        q: Var,
        v: Var,
        act: Vec<F>,
    },
    Reshape {
        x: Var,
    },
}

struct Node<F> {
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records operations as they execute and replays them in reverse for
/// gradients. Rebuilt for every forward pass.
pub struct Graph<'p, F: Real = f32> {
    params: Option<&'p ParamStore<F>>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
    accumulated: Vec<Option<Vec<F>>>,
    params_require_grad: bool,
}

impl<'p, F: Real> Graph<'p, F> {
    /// Graph without parameters; only explicit leaves.
    pub fn standalone() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            accumulated: Vec::new(),
            params_require_grad: false,
        }
    }

    /// Graph whose parameters are trainable leaves.
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            accumulated: Vec::new(),
            params_require_grad: true,
        }
    }

    /// Graph for inference: parameters are read but never differentiated.
    pub fn inference(params: &'p ParamStore<F>) -> Self {
        Graph {
            params_require_grad: false,
            ..Graph::new(params)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        value_of(&self.nodes, self.params, v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Graph node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.params_require_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ----- linear algebra -------------------------------------------------

    /// `x·wᵀ` for `x [r, in]` (or `[in]`) and `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (rows, in_dim) = rows_cols(&xs)?;
        if ws.len() != 2 || ws[1] != in_dim {
            return Err(Error::dim("linear", &xs, &ws));
        }
        let out_dim = ws[0];
        let mut out = vec![F::zero(); rows * out_dim];
        kernels::linear_forward(
            self.value(x).data(),
            rows,
            self.value(w).data(),
            out_dim,
            in_dim,
            &mut out,
        );
        let shape = if xs.len() <= 1 {
            vec![out_dim]
        } else {
            vec![rows, out_dim]
        };
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w }, rg))
    }

    /// Standard product of `a [m, k]` and `b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        let (m, k) = rows_cols(&a_shape)?;
        if b_shape.len() != 2 || b_shape[0] != k {
            return Err(Error::dim("matmul", &a_shape, &b_shape));
        }
        let n = b_shape[1];
        let mut out = vec![F::zero(); m * n];
        kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let shape = if a_shape.len() <= 1 {
            vec![n]
        } else {
            vec![m, n]
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, rg))
    }

    // ----- elementwise ------------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<(Tensor<F>, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok((t, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// Adds `b [c]` to every row of `x [r, c]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (_, cols) = rows_cols(tx.shape())?;
        if tb.numel() != cols {
            return Err(Error::dim("add_row", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            add_into(row, tb.data());
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddRow { x, b }, rg))
    }

    /// Sum of equally shaped values.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("add_n needs at least one operand".into()))?;
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            let t = self.value(p);
            if t.shape() != acc.shape() {
                return Err(Error::dim("add_n", acc.shape(), t.shape()));
            }
            add_into(acc.data_mut(), t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            acc,
            Op::AddN {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(t, Op::Tanh { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| F::one() / (F::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(F::zero()));
        let rg = self.rg(x);
        self.push(t, Op::Relu { x }, rg)
    }

    // ----- normalizations and losses ----------------------------------------

    fn check_finite(&self, x: Var, op: &str) -> Result<()> {
        if self.value(x).is_finite() {
            Ok(())
        } else {
            Err(Error::NumericDomain(format!(
                "{op} received a non-finite input"
            )))
        }
    }

    /// Softmax over the last dimension of each row.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite(x, "softmax")?;
        let tx = self.value(x);
        let (_, cols) = rows_cols(tx.shape())?;
        if cols == 0 {
            return Err(Error::Contract("softmax over an empty row".into()));
        }
        let mut out = vec![F::zero(); tx.numel()];
        kernels::softmax_rows(tx.data(), cols, &mut out);
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x }, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite(x, "log_softmax")?;
        let tx = self.value(x);
        let (_, cols) = rows_cols(tx.shape())?;
        let mut out = vec![F::zero(); tx.numel()];
        kernels::log_softmax_rows(tx.data(), cols, &mut out);
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSoftmax { x }, rg))
    }

    /// `Σ_r −log softmax(x[r])[targets[r]]`, fused for stability.
    pub fn cross_entropy(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        self.check_finite(x, "cross_entropy")?;
        let tx = self.value(x);
        let (rows, cols) = rows_cols(tx.shape())?;
        if rows != targets.len() {
            return Err(Error::dim("cross_entropy", tx.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Input(format!(
                "target index {bad} outside {cols} classes"
            )));
        }
        let mut logp = vec![F::zero(); tx.numel()];
        kernels::log_softmax_rows(tx.data(), cols, &mut logp);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -logp[r * cols + t])
            .sum::<F>();
        let probs = logp.iter().map(|v| v.exp()).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                x,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Column means of `x [r, c]`, shaped `[1, c]` (or `[c]` for vectors).
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = rows_cols(tx.shape())?;
        if rows == 0 {
            return Err(Error::Contract("mean over zero rows".into()));
        }
        let mut out = vec![F::zero(); cols];
        for row in tx.data().chunks_exact(cols) {
            add_into(&mut out, row);
        }
        let inv = F::one() / F::from_usize(rows).unwrap();
        out.iter_mut().for_each(|v| *v *= inv);
        let shape = if tx.shape().len() == 2 {
            vec![1, cols]
        } else {
            vec![cols]
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanRows { x }, rg))
    }

    /// Inner product of two equally sized tensors (flattened).
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(Error::dim("dot", ta.shape(), tb.shape()));
        }
        let s = kernels::dot(ta.data(), tb.data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot { a, b }, rg))
    }

    /// `a·b / (‖a‖‖b‖)`; zero-norm inputs are rejected.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(Error::dim("cosine", ta.shape(), tb.shape()));
        }
        let (na, nb) = (ta.sq_norm().sqrt(), tb.sq_norm().sqrt());
        if !(na > F::zero() && nb > F::zero()) {
            return Err(Error::NumericDomain(
                "cosine similarity of a zero-norm vector".into(),
            ));
        }
        let s = kernels::dot(ta.data(), tb.data()) / (na * nb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Cosine { a, b }, rg))
    }

    // ----- structural -------------------------------------------------------

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = rows_cols(tx.shape())?;
        if start + len > cols {
            return Err(Error::dim("slice_cols", tx.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(rows * len);
        for row in tx.data().chunks_exact(cols) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceCols { x, start }, rg))
    }

    /// Concatenates along the last dimension; all parts share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (rows, _) = rows_cols(self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p))?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![F::zero(); rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let data = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let shape = if self.shape(first).len() <= 1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks parts vertically; each part is `[c]` or `[r, c]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, cols) = rows_cols(self.shape(first))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p))?;
            if c != cols {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows of `x [r, c]` by index (embedding lookup, beam reordering).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = rows_cols(tx.shape())?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&tx.data()[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)` when training; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Feed-forward attention energies `out[k, i] = Σ_a v[a]·tanh(p[i, a] + q[k, a])`
    /// for keys `p [n, a]`, queries `q [k, a]` and scorer `v [a]`.
    pub fn additive_scores(&mut self, p: Var, q: Var, v: Var) -> Result<Var> {
        let (tp, tq, tv) = (self.value(p), self.value(q), self.value(v));
        let (n, a) = rows_cols(tp.shape())?;
        let (k, aq) = rows_cols(tq.shape())?;
        if aq != a || tv.numel() != a {
            return Err(Error::dim("additive_scores", tp.shape(), tq.shape()));
        }
        let mut act = vec![F::zero(); k * n * a];
        let mut out = vec![F::zero(); k * n];
        for kk in 0..k {
            let qr = tq.row(kk);
            for i in 0..n {
                let pr = tp.row(i);
                let slot = &mut act[(kk * n + i) * a..(kk * n + i + 1) * a];
                for j in 0..a {
                    slot[j] = (pr[j] + qr[j]).tanh();
                }
                out[kk * n + i] = kernels::dot(slot, tv.data());
            }
        }
        let rg = self.rg(p) || self.rg(q) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![k, n], out)?,
            Op::AdditiveScores { p, q, v, act },
            rg,
        ))
    }

    // ----- differentiation ----------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every reachable leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let Graph {
            params,
            nodes,
            accumulated,
            ..
        } = self;
        let params = *params;
        if accumulated.len() < nodes.len() {
            accumulated.resize(nodes.len(), None);
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        // Row-vector products contribute rank-1 weight updates; these are
        // stacked per weight and applied as one product once every user of
        // the weight has been visited.
        let mut deferred: HashMap<usize, Deferred<F>> = HashMap::new();

        for i in (0..=loss.0).rev() {
            if let Some(d) = deferred.remove(&i) {
                let len = value_of(nodes, params, Var(i)).numel();
                let buf = grads[i].get_or_insert_with(|| vec![F::zero(); len]);
                F::gemm_raw(
                    d.out_dim,
                    d.rows,
                    d.in_dim,
                    &d.dy,
                    1,
                    d.out_dim,
                    &d.x,
                    d.in_dim,
                    1,
                    F::one(),
                    buf,
                    d.in_dim,
                    1,
                );
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |v: Var| value_of(nodes, params, v);
            let out = || node.value.as_ref().expect("non-parameter node has a value");
            let mut ctx = Ctx {
                nodes,
                params,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => match &mut accumulated[i] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                },
                Op::Linear { x, w } => {
                    let (tx, tw) = (val(*x), val(*w));
                    let (rows, in_dim) = rows_cols(tx.shape())?;
                    let out_dim = tw.shape()[0];
                    let mut dx = ctx.take(*x);
                    let mut dw = None;
                    if nodes[w.0].requires_grad {
                        if rows <= 2 {
                            let d = deferred.entry(w.0).or_insert_with(|| Deferred {
                                dy: Vec::new(),
                                x: Vec::new(),
                                rows: 0,
                                out_dim,
                                in_dim,
                            });
                            d.dy.extend_from_slice(&g);
                            d.x.extend_from_slice(tx.data());
                            d.rows += rows;
                        } else {
                            dw = ctx.take(*w);
                        }
                    }
                    kernels::linear_backward(
                        &g,
                        tx.data(),
                        tw.data(),
                        rows,
                        out_dim,
                        in_dim,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                    );
                    ctx.put(*x, dx);
                    ctx.put(*w, dw);
                }
                Op::MatMul { a, b } => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k) = rows_cols(ta.shape())?;
                    let n = tb.shape()[1];
                    let mut da = ctx.take(*a);
                    let mut db = ctx.take(*b);
                    if let Some(da) = da.as_deref_mut() {
                        F::gemm_raw(m, n, k, &g, n, 1, tb.data(), 1, n, F::one(), da, k, 1);
                    }
                    if let Some(db) = db.as_deref_mut() {
                        F::gemm_raw(k, m, n, ta.data(), 1, k, &g, n, 1, F::one(), db, n, 1);
                    }
                    ctx.put(*a, da);
                    ctx.put(*b, db);
                }
                Op::Add { a, b } => {
                    ctx.accumulate(*a, |d| add_into(d, &g));
                    ctx.accumulate(*b, |d| add_into(d, &g));
                }
                Op::Sub { a, b } => {
                    ctx.accumulate(*a, |d| add_into(d, &g));
                    ctx.accumulate(*b, |d| kernels::axpy(-F::one(), &g, d));
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (val(*a).data(), val(*b).data());
                    ctx.accumulate(*a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(tb) {
                            *d += *g * *y;
                        }
                    });
                    ctx.accumulate(*b, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(ta) {
                            *d += *g * *x;
                        }
                    });
                }
                Op::AddRow { x, b } => {
                    let cols = val(*b).numel();
                    ctx.accumulate(*x, |d| add_into(d, &g));
                    ctx.accumulate(*b, |d| {
                        for row in g.chunks_exact(cols) {
                            add_into(d, row);
                        }
                    });
                }
                Op::AddN { parts } => {
                    for &p in parts {
                        ctx.accumulate(p, |d| add_into(d, &g));
                    }
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    ctx.accumulate(*x, |d| kernels::axpy(c, &g, d));
                }
                Op::AddScalar { x } | Op::Reshape { x } => {
                    ctx.accumulate(*x, |d| add_into(d, &g));
                }
                Op::Tanh { x } => {
                    let y = out().data();
                    ctx.accumulate(*x, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += *g * (F::one() - *y * *y);
                        }
                    });
                }
                Op::Sigmoid { x } => {
                    let y = out().data();
                    ctx.accumulate(*x, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += *g * *y * (F::one() - *y);
                        }
                    });
                }
                Op::Relu { x } => {
                    let y = out().data();
                    ctx.accumulate(*x, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            if *y > F::zero() {
                                *d += *g;
                            }
                        }
                    });
                }
                Op::Softmax { x } => {
                    let y = out();
                    let (_, cols) = rows_cols(y.shape())?;
                    ctx.accumulate(*x, |d| {
                        for ((dr, gr), yr) in d
                            .chunks_exact_mut(cols)
                            .zip(g.chunks_exact(cols))
                            .zip(y.data().chunks_exact(cols))
                        {
                            let s = kernels::dot(gr, yr);
                            for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += *y * (*g - s);
                            }
                        }
                    });
                }
                Op::LogSoftmax { x } => {
                    let y = out();
                    let (_, cols) = rows_cols(y.shape())?;
                    ctx.accumulate(*x, |d| {
                        for ((dr, gr), yr) in d
                            .chunks_exact_mut(cols)
                            .zip(g.chunks_exact(cols))
                            .zip(y.data().chunks_exact(cols))
                        {
                            let s: F = gr.iter().copied().sum();
                            for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += *g - y.exp() * s;
                            }
                        }
                    });
                }
                Op::CrossEntropy { x, targets, probs } => {
                    let cols = probs.len() / targets.len().max(1);
                    let g0 = g[0];
                    ctx.accumulate(*x, |d| {
                        kernels::axpy(g0, probs, d);
                        for (r, &t) in targets.iter().enumerate() {
                            d[r * cols + t] -= g0;
                        }
                    });
                }
                Op::Sum { x } => {
                    let g0 = g[0];
                    ctx.accumulate(*x, |d| d.iter_mut().for_each(|v| *v += g0));
                }
                Op::MeanRows { x } => {
                    let (rows, cols) = rows_cols(val(*x).shape())?;
                    let inv = F::one() / F::from_usize(rows).unwrap();
                    ctx.accumulate(*x, |d| {
                        for row in d.chunks_exact_mut(cols) {
                            kernels::axpy(inv, &g, row);
                        }
                    });
                }
                Op::Dot { a, b } => {
                    let g0 = g[0];
                    let (ta, tb) = (val(*a).data(), val(*b).data());
                    ctx.accumulate(*a, |d| kernels::axpy(g0, tb, d));
                    ctx.accumulate(*b, |d| kernels::axpy(g0, ta, d));
                }
                Op::Cosine { a, b } => {
                    let g0 = g[0];
                    let s = out().item();
                    let (ta, tb) = (val(*a), val(*b));
                    let (na2, nb2) = (ta.sq_norm(), tb.sq_norm());
                    let inv = F::one() / (na2.sqrt() * nb2.sqrt());
                    ctx.accumulate(*a, |d| {
                        kernels::axpy(g0 * inv, tb.data(), d);
                        kernels::axpy(-g0 * s / na2, ta.data(), d);
                    });
                    ctx.accumulate(*b, |d| {
                        kernels::axpy(g0 * inv, ta.data(), d);
                        kernels::axpy(-g0 * s / nb2, tb.data(), d);
                    });
                }
                Op::SliceCols { x, start } => {
                    let (_, cols) = rows_cols(val(*x).shape())?;
                    let (_, len) = rows_cols(out().shape())?;
                    let start = *start;
                    ctx.accumulate(*x, |d| {
                        for (dr, gr) in d.chunks_exact_mut(cols).zip(g.chunks_exact(len)) {
                            add_into(&mut dr[start..start + len], gr);
                        }
                    });
                }
                Op::ConcatCols { parts } => {
                    let (rows, total) = rows_cols(out().shape())?;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, w) = rows_cols(val(p).shape())?;
                        ctx.accumulate(p, |d| {
                            for r in 0..rows {
                                add_into(
                                    &mut d[r * w..(r + 1) * w],
                                    &g[r * total + offset..r * total + offset + w],
                                );
                            }
                        });
                        offset += w;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).numel();
                        ctx.accumulate(p, |d| add_into(d, &g[offset..offset + n]));
                        offset += n;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let (_, cols) = rows_cols(val(*x).shape())?;
                    ctx.accumulate(*x, |d| {
                        for (j, &i) in idx.iter().enumerate() {
                            add_into(
                                &mut d[i * cols..(i + 1) * cols],
                                &g[j * cols..(j + 1) * cols],
                            );
                        }
                    });
                }
                Op::Dropout { x, mask } => {
                    ctx.accumulate(*x, |d| {
                        for ((d, g), m) in d.iter_mut().zip(&g).zip(mask) {
                            *d += *g * *m;
                        }
                    });
                }
                Op::AdditiveScores { p, q, v, act } => {
                    let (n, a) = rows_cols(val(*p).shape())?;
                    let k = g.len() / n.max(1);
                    let tv = val(*v).data();
                    let mut dpre = vec![F::zero(); k * n * a];
                    let mut dv = vec![F::zero(); a];
                    for (e, ge) in g.iter().enumerate() {
                        let t = &act[e * a..(e + 1) * a];
                        kernels::axpy(*ge, t, &mut dv);
                        let slot = &mut dpre[e * a..(e + 1) * a];
                        for j in 0..a {
                            slot[j] = *ge * tv[j] * (F::one() - t[j] * t[j]);
                        }
                    }
                    ctx.accumulate(*v, |d| add_into(d, &dv));
                    ctx.accumulate(*p, |d| {
                        for kk in 0..k {
                            for i in 0..n {
                                add_into(
                                    &mut d[i * a..(i + 1) * a],
                                    &dpre[(kk * n + i) * a..(kk * n + i + 1) * a],
                                );
                            }
                        }
                    });
                    ctx.accumulate(*q, |d| {
                        for kk in 0..k {
                            for i in 0..n {
                                add_into(
                                    &mut d[kk * a..(kk + 1) * a],
                                    &dpre[(kk * n + i) * a..(kk * n + i + 1) * a],
                                );
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf or parameter node, if any.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.accumulated.get(v.0)?.as_ref()?;
        Tensor::new(self.value(v).shape().to_vec(), g.clone()).ok()
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[F]> {
        let v = self.param_vars.get(id.0).copied().flatten()?;
        self.accumulated.get(v.0)?.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.accumulated.iter_mut().for_each(|g| *g = None);
    }

    /// Moves parameter gradients out of the graph.
    pub fn into_gradients(mut self) -> Gradients<F> {
        let mut out = Gradients::new(self.param_vars.len());
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                out.slots[i] = self.accumulated.get_mut(v.0).and_then(Option::take);
            }
        }
        out
    }
}

fn value_of<'a, F: Real>(
    nodes: &'a [Node<F>],
    params: Option<&'a ParamStore<F>>,
    v: Var,
) -> &'a Tensor<F> {
    let node = &nodes[v.0];
    match (&node.value, &node.op) {
        (Some(t), _) => t,
        (None, Op::Param(id)) => params.expect("parameter node without a store").get(*id),
        (None, _) => unreachable!("only parameter nodes lack a value"),
    }
}

struct Deferred<F> {
    dy: Vec<F>,
    x: Vec<F>,
    rows: usize,
    out_dim: usize,
    in_dim: usize,
}

struct Ctx<'a, F: Real> {
    nodes: &'a [Node<F>],
    params: Option<&'a ParamStore<F>>,
    grads: &'a mut Vec<Option<Vec<F>>>,
}

impl<F: Real> Ctx<'_, F> {
    /// Takes (or creates) the gradient buffer of `v`; `None` if `v` needs none.
    fn take(&mut self, v: Var) -> Option<Vec<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = value_of(self.nodes, self.params, v).numel();
        self.grads[v.0]
            .take()
            .or_else(|| Some(vec![F::zero(); len]))
    }

    fn put(&mut self, v: Var, buf: Option<Vec<F>>) {
        if let Some(buf) = buf {
            match &mut self.grads[v.0] {
                Some(existing) => add_into(existing, &buf),
                slot @ None => *slot = Some(buf),
            }
        }
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [F])) {
        if let Some(mut buf) = self.take(v) {
            f(&mut buf);
            self.put(v, Some(buf));
        }
    }
}
