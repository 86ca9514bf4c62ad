//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are either
//! constants or parameters loaded from a [`ParamSet`]; every other node is
//! produced by one of the recording methods below. [`Tape::backward`] walks
//! the recorded nodes in reverse and returns the gradient of a scalar node
//! with respect to every node that (transitively) depends on a parameter.

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMulNt(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceFlat(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Square(Var),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameters of one [`ParamSet`] loaded onto a tape, in set order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter `{name}` not loaded on tape"))
    }

    pub fn at(&self, idx: usize) -> Var {
        self.vars[idx].1
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Var)> {
        self.vars.iter()
    }

    /// Adds the gradients of these tape leaves into `params.grad`.
    pub fn accumulate_into(&self, grads: &Gradients, params: &mut ParamSet) -> Result<()> {
        for (name, var) in &self.vars {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?;
            if let Some(g) = grads.get(*var) {
                for (dst, src) in p.grad.data_mut().iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the node does not depend on any parameter or is not an
    /// ancestor of the differentiated output.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// Gradient slot of `v`, zero-filled on first use.
fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Dot product with four independent partial sums so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len(), "constant shape mismatch");
        self.push(rows, cols, value, Op::Leaf, false)
    }

    pub fn row(&mut self, value: &[f64]) -> Var {
        self.constant(1, value.len(), value.to_vec())
    }

    /// A differentiable leaf not bound to any [`ParamSet`] (used by tests and
    /// input-gradient probes).
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len(), "leaf shape mismatch");
        self.push(rows, cols, value, Op::Leaf, true)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (r, c, val) = (n.rows, n.cols, n.value.clone());
        self.constant(r, c, val)
    }

    fn load(&mut self, params: &ParamSet, trainable: bool) -> ParamVars {
        let mut vars = Vec::with_capacity(params.len());
        for (name, p) in params.iter() {
            let (r, c) = p.value.rows_cols();
            let v = self.push(r, c, p.value.data().to_vec(), Op::Leaf, trainable);
            vars.push((name.clone(), v));
        }
        ParamVars { vars }
    }

    /// Loads a parameter set as differentiable leaves.
    pub fn params(&mut self, params: &ParamSet) -> ParamVars {
        self.load(params, true)
    }

    /// Loads a parameter set as constants; no gradient reaches them.
    pub fn frozen(&mut self, params: &ParamSet) -> ParamVars {
        self.load(params, false)
    }

    fn unary(&mut self, a: Var, value: Vec<f64>, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let rg = self.requires_grad(a);
        self.push(r, c, value, op, rg)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            let (ar, ac) = self.shape(a);
            let (br, bc) = self.shape(b);
            return Err(Error::Usage(format!(
                "{what}: shape {ar}x{ac} vs {br}x{bc}"
            )));
        }
        Ok(())
    }

    /// `a[n,k] · b[m,k]ᵀ → [n,m]`. Zero entries of a constant `a` are
    /// skipped, which keeps sparse one-hot inputs cheap.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (m, kb) = self.shape(b);
        if k != kb {
            return Err(Error::dim("matmul_nt inner dimension", kb, k));
        }
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut out = vec![0.0; n * m];
        let mut nz = Vec::with_capacity(k);
        for i in 0..n {
            let arow = &av[i * k..(i + 1) * k];
            nz.clear();
            nz.extend((0..k).filter(|&t| arow[t] != 0.0));
            let orow = &mut out[i * m..(i + 1) * m];
            if nz.len() * 2 < k {
                for (j, o) in orow.iter_mut().enumerate() {
                    let brow = &bv[j * k..(j + 1) * k];
                    *o = nz.iter().map(|&t| arow[t] * brow[t]).sum();
                }
            } else {
                for (j, o) in orow.iter_mut().enumerate() {
                    let brow = &bv[j * k..(j + 1) * k];
                    *o = dot(arow, brow);
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(n, m, out, Op::MatMulNt(a, b), rg))
    }

    /// `a[n,k] · b[k,m] → [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (kb, m) = self.shape(b);
        if k != kb {
            return Err(Error::dim("matmul inner dimension", k, kb));
        }
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for t in 0..k {
                let x = av[i * k + t];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[t * m..(t + 1) * m];
                for (o, y) in out[i * m..(i + 1) * m].iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(n, m, out, Op::MatMul(a, b), rg))
    }

    /// Adds the row vector `b[1,m]` to every row of `a[n,m]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        let (br, bc) = self.shape(b);
        if br * bc != m {
            return Err(Error::dim("add_row bias width", m, br * bc));
        }
        let bv = self.node(b).value.clone();
        let mut out = self.node(a).value.clone();
        for row in out.chunks_mut(m) {
            row.iter_mut().zip(&bv).for_each(|(o, x)| *o += x);
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(n, m, out, Op::AddRow(a, b), rg))
    }

    /// `x · wᵀ + b` for `x[n,in]`, `w[out,in]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        self.add_row(y, b)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check_same(a, b, what)?;
        let out = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let (r, c) = self.shape(a);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(r, c, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.node(a).value.iter().map(|x| x * s).collect();
        self.unary(a, out, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.node(a).value.iter().map(|x| x.tanh()).collect();
        self.unary(a, out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.node(a).value.iter().map(|x| sigmoid(*x)).collect();
        self.unary(a, out, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.node(a).value.iter().map(|x| x * x).collect();
        self.unary(a, out, Op::Square(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, c) = self.shape(a);
        let mut out = self.node(a).value.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.unary(a, out, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape(parts[0]).0;
        let mut total = 0;
        for p in parts {
            let (r, c) = self.shape(*p);
            if r != n {
                return Err(Error::dim("concat_cols rows", n, r));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                let node = self.node(*p);
                out.extend_from_slice(&node.value[i * node.cols..(i + 1) * node.cols]);
            }
        }
        let rg = parts.iter().any(|p| self.requires_grad(*p));
        Ok(self.push(n, total, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = self.shape(*p);
            if pc != c {
                return Err(Error::dim("concat_rows cols", c, pc));
            }
            out.extend_from_slice(&self.node(*p).value);
            rows += r;
        }
        let rg = parts.iter().any(|p| self.requires_grad(*p));
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.shape(a);
        if start + len > c {
            return Err(Error::dim("slice_cols end", c, start + len));
        }
        let av = &self.node(a).value;
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(n, len, out, Op::SliceCols(a, start), rg))
    }

    /// Takes `rows*cols` consecutive values starting at flat offset `start`
    /// and views them as a `[rows, cols]` matrix.
    pub fn slice_flat(&mut self, a: Var, start: usize, rows: usize, cols: usize) -> Result<Var> {
        let len = self.node(a).value.len();
        if start + rows * cols > len {
            return Err(Error::dim("slice_flat end", len, start + rows * cols));
        }
        let out = self.node(a).value[start..start + rows * cols].to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(rows, cols, out, Op::SliceFlat(a, start), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.shape(a);
        let av = &self.node(a).value;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::dim("gather_rows index bound", n, i));
            }
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(idx.len(), c, out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).value.iter().sum();
        let rg = self.requires_grad(a);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.node(a).value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass from the scalar node `out`, seeded with `seed`.
    pub fn backward_with(&self, out: Var, seed: f64) -> Result<Gradients> {
        if self.nodes.is_empty() || out.0 >= self.nodes.len() {
            return Err(Error::Usage("backward without a recorded forward pass".into()));
        }
        let root = self.node(out);
        if root.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward from non-scalar node ({}x{})",
                root.rows, root.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![seed]);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    pub fn backward(&self, out: Var) -> Result<Gradients> {
        self.backward_with(out, 1.0)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, $v, self.nodes[$v.0].value.len())
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMulNt(a, b) => {
                let (n, k) = self.shape(*a);
                let m = node.cols;
                let av = &self.node(*a).value;
                let bv = &self.node(*b).value;
                if wants(*a) {
                    let ga = acc!(*a);
                    for i in 0..n {
                        let grow = &mut ga[i * k..(i + 1) * k];
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let brow = &bv[j * k..(j + 1) * k];
                            for (o, y) in grow.iter_mut().zip(brow) {
                                *o += gij * y;
                            }
                        }
                    }
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    let mut nz = Vec::with_capacity(k);
                    for i in 0..n {
                        let arow = &av[i * k..(i + 1) * k];
                        nz.clear();
                        nz.extend((0..k).filter(|&t| arow[t] != 0.0));
                        let dense = nz.len() * 2 >= k;
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let brow = &mut gb[j * k..(j + 1) * k];
                            if dense {
                                for (o, x) in brow.iter_mut().zip(arow) {
                                    *o += gij * x;
                                }
                            } else {
                                for &t in &nz {
                                    brow[t] += gij * arow[t];
                                }
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = node.cols;
                let av = &self.node(*a).value;
                let bv = &self.node(*b).value;
                if wants(*a) {
                    let ga = acc!(*a);
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for t in 0..k {
                            let brow = &bv[t * m..(t + 1) * m];
                            ga[i * k + t] += dot(grow, brow);
                        }
                    }
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for t in 0..k {
                            let x = av[i * k + t];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, y) in gb[t * m..(t + 1) * m].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            Op::AddRow(a, b) => {
                if wants(*a) {
                    add_slice(acc!(*a), g);
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    for row in g.chunks(node.cols) {
                        add_slice(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_slice(acc!(*a), g);
                }
                if wants(*b) {
                    add_slice(acc!(*b), g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_slice(acc!(*a), g);
                }
                if wants(*b) {
                    acc!(*b).iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                let av = &self.node(*a).value;
                let bv = &self.node(*b).value;
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g).zip(bv).for_each(|((o, x), y)| *o += x * y);
                }
                if wants(*b) {
                    acc!(*b).iter_mut().zip(g).zip(av).for_each(|((o, x), y)| *o += x * y);
                }
            }
            Op::Scale(a, s) => {
                acc!(*a).iter_mut().zip(g).for_each(|(o, x)| *o += x * s);
            }
            Op::Tanh(a) => {
                acc!(*a)
                    .iter_mut()
                    .zip(g)
                    .zip(&node.value)
                    .for_each(|((o, x), y)| *o += x * (1.0 - y * y));
            }
            Op::Sigmoid(a) => {
                acc!(*a)
                    .iter_mut()
                    .zip(g)
                    .zip(&node.value)
                    .for_each(|((o, x), y)| *o += x * y * (1.0 - y));
            }
            Op::Square(a) => {
                let av = &self.node(*a).value;
                acc!(*a).iter_mut().zip(g).zip(av).for_each(|((o, x), y)| *o += 2.0 * x * y);
            }
            Op::SoftmaxRows(a) => {
                let c = node.cols;
                let ga = acc!(*a);
                for ((grow, yrow), orow) in g.chunks(c).zip(node.value.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((o, gx), y) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += y * (gx - dot);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.cols;
                let mut off = 0;
                for p in parts {
                    let (n, c) = self.shape(*p);
                    if wants(*p) {
                        let gp = acc!(*p);
                        for i in 0..n {
                            add_slice(&mut gp[i * c..(i + 1) * c], &g[i * total + off..i * total + off + c]);
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.node(*p).value.len();
                    if wants(*p) {
                        add_slice(acc!(*p), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (n, c) = self.shape(*a);
                let len = node.cols;
                let ga = acc!(*a);
                for i in 0..n {
                    add_slice(&mut ga[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                }
            }
            Op::SliceFlat(a, start) => {
                add_slice(&mut acc!(*a)[*start..start + g.len()], g);
            }
            Op::GatherRows(a, idx) => {
                let c = self.shape(*a).1;
                let ga = acc!(*a);
                for (r, &i) in idx.iter().enumerate() {
                    add_slice(&mut ga[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::Sum(a) => {
                acc!(*a).iter_mut().for_each(|o| *o += g[0]);
            }
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node shape")
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
