//! Reverse-mode tape over dense tensors.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse, accumulating adjoints only for nodes that
//! depend on a tracked parameter. A tape is single-use: the second
//! `backward` call fails.

use crate::diffcore::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(usize),
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv3x3 { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    LogSoftmax(Var),
    CrossEntropyRows { x: Var, targets: Vec<T> },
    SquaredErrorRows { x: Var, targets: Vec<T> },
    WeightedSum { x: Var, weights: Vec<T> },
    SelectRows { x: Var, rows: Vec<usize> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Exp(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Per-parameter gradients produced by [`Tape::gradients`], indexed by the
/// parameter slot passed to [`Tape::param`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, slot: usize) -> Option<&[T]> {
        self.slots.get(slot).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Adds `other` into `self` slot by slot.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(g) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    None => *mine = Some(g.clone()),
                }
            }
        }
    }

    pub fn empty() -> Self {
        Gradients { slots: Vec::new() }
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    /// Copies a parameter onto the tape under `slot`. Tracked iff the
    /// parameter has `requires_grad`.
    pub fn param(&mut self, slot: usize, p: &Tensor<T>) -> Var {
        let value = Tensor::new(p.shape().to_vec(), p.data().to_vec()).expect("consistent");
        self.push(value, Op::Param(slot), p.requires_grad)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("dense: input {:?} against weight {:?}", xs, ws)));
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::Shape(format!(
                    "dense: bias {:?}, expected [{}]",
                    self.shape(b),
                    out
                )));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let mut y = vec![T::zero(); n * out];
        if let Some(bd) = bd {
            for yr in y.chunks_exact_mut(out) {
                yr.copy_from_slice(bd);
            }
        }
        let beta = if bd.is_some() { T::one() } else { T::zero() };
        T::gemm(n, inp, out, T::one(), (xd, inp, 1), (wd, 1, inp), beta, &mut y, out);
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        let value = Tensor::new(vec![n, out], y)?;
        Ok(self.push(value, Op::Dense { x, w, b }, tracked))
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::Shape(format!("conv3x3: input {:?} against weight {:?}", xs, ws)));
        }
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let c_out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::Shape(format!("conv3x3: bias {:?}", self.shape(b))));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let plane = h * wd;
        let kk = c_in * 9;
        let mut y = vec![T::zero(); n * c_out * plane];
        let mut cols = vec![T::zero(); kk * plane];
        for (s, ys) in y.chunks_exact_mut(c_out * plane).enumerate() {
            im2col(&xv[s * c_in * plane..(s + 1) * c_in * plane], c_in, h, wd, &mut cols);
            if let Some(bv) = bv {
                for (o, out) in ys.chunks_exact_mut(plane).enumerate() {
                    out.iter_mut().for_each(|v| *v = bv[o]);
                }
            }
            let beta = if bv.is_some() { T::one() } else { T::zero() };
            T::gemm(
                c_out,
                kk,
                plane,
                T::one(),
                (wv, kk, 1),
                (&cols, plane, 1),
                beta,
                ys,
                plane,
            );
        }
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        let value = Tensor::new(vec![n, c_out, h, wd], y)?;
        Ok(self.push(value, Op::Conv3x3 { x, w, b }, tracked))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(x);
        self.push(value, Op::Relu(x), tracked)
    }

    /// 2x2 max pooling with stride 2 over `[N, C, H, W]`; odd trailing
    /// rows/columns are dropped. Ties pick the first element.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::Shape(format!("max_pool2: input {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let cands = [
                        base + 2 * i * w + 2 * j,
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ];
                    let mut best = cands[0];
                    for &k in &cands[1..] {
                        if xv[k] > xv[best] {
                            best = k;
                        }
                    }
                    y.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let tracked = self.tracked(x);
        let value = Tensor::new(vec![n, c, oh, ow], y)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x);
        if numel(&shape) != src.len() {
            return Err(Error::Shape(format!("reshape {:?} to {:?}", src.shape(), shape)));
        }
        let value = Tensor::new(shape, src.data().to_vec())?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Row-wise log-softmax over the last axis of a `[B, C]` tensor, using
    /// max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[1] == 0 {
            return Err(Error::Shape(format!("log_softmax: input {:?}", xs)));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let mut y = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            for (o, &v) in y[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let tracked = self.tracked(x);
        let value = Tensor::new(vec![rows, cols], y)?;
        Ok(self.push(value, Op::LogSoftmax(x), tracked))
    }

    /// Per-row cross-entropy `-Σ_c t[r,c]·x[r,c]` against constant targets
    /// (row-major, same shape as `x`). Returns a `[B]` vector.
    pub fn cross_entropy_rows(&mut self, x: Var, targets: Vec<T>) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || targets.len() != numel(xs) {
            return Err(Error::Shape(format!(
                "cross_entropy_rows: input {:?}, {} target values",
                xs,
                targets.len()
            )));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let out = (0..rows)
            .map(|r| {
                let mut acc = T::zero();
                for c in 0..cols {
                    let t = targets[r * cols + c];
                    if t != T::zero() {
                        acc -= t * xv[r * cols + c];
                    }
                }
                acc
            })
            .collect();
        let tracked = self.tracked(x);
        let value = Tensor::new(vec![rows], out)?;
        Ok(self.push(value, Op::CrossEntropyRows { x, targets }, tracked))
    }

    /// Per-row mean squared error against constant targets. Returns `[B]`.
    pub fn squared_error_rows(&mut self, x: Var, targets: Vec<T>) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() || targets.len() != numel(xs) {
            return Err(Error::Shape(format!(
                "squared_error_rows: input {:?}, {} target values",
                xs,
                targets.len()
            )));
        }
        let rows = xs[0];
        let width = numel(&xs[1..]);
        let xv = self.value(x).data();
        let scale = T::one() / T::lit(width.max(1) as f64);
        let out = (0..rows)
            .map(|r| {
                let mut acc = T::zero();
                for k in r * width..(r + 1) * width {
                    let d = xv[k] - targets[k];
                    acc += d * d;
                }
                acc * scale
            })
            .collect();
        let tracked = self.tracked(x);
        let value = Tensor::new(vec![rows], out)?;
        Ok(self.push(value, Op::SquaredErrorRows { x, targets }, tracked))
    }

    /// `Σ_i weights[i]·x[i]` with constant weights; scalar result.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let src = self.value(x);
        if src.len() != weights.len() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} values, {} weights",
                src.len(),
                weights.len()
            )));
        }
        let mut acc = T::zero();
        for (&v, &w) in src.data().iter().zip(&weights) {
            acc += v * w;
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum { x, weights }, tracked))
    }

    /// Gathers rows (first axis) by index.
    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let src = self.value(x);
        let n = src.rows();
        if src.rank() == 0 || rows.iter().any(|&r| r >= n) {
            return Err(Error::Shape(format!(
                "select_rows: index out of range for {:?}",
                src.shape()
            )));
        }
        let width = src.row_width();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in &rows {
            data.extend_from_slice(src.row(r));
        }
        let mut shape = src.shape().to_vec();
        shape[0] = rows.len();
        let tracked = self.tracked(x);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SelectRows { x, rows }, tracked))
    }

    fn binary_check(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{}: {:?} vs {:?}",
                name,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(x);
        self.push(value, Op::Scale(x, c), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(total), Op::Sum(x), tracked)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v.exp()).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(x);
        self.push(value, Op::Exp(x), tracked)
    }

    /// Reverse sweep from a scalar `loss`; returns gradients per parameter
    /// slot. Consumes the tape's recorded state.
    pub fn gradients(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Tape("tape already consumed by a backward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut grads = Gradients { slots: Vec::new() };
        if !self.tracked(loss) {
            return Ok(grads);
        }
        adj[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].tracked {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Param(slot) => {
                    let slot = *slot;
                    if grads.slots.len() <= slot {
                        grads.slots.resize(slot + 1, None);
                    }
                    match &mut grads.slots[slot] {
                        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        none => *none = Some(g),
                    }
                }
                Op::Dense { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let xs = self.shape(x);
                    let (n, inp) = (xs[0], xs[1]);
                    let out = self.shape(w)[0];
                    let xd = self.value(x).data();
                    let wd = self.value(w).data();
                    if self.tracked(x) {
                        let gx = slot(&mut adj, x, n * inp);
                        T::gemm(n, out, inp, T::one(), (&g, out, 1), (wd, inp, 1), T::one(), gx, inp);
                    }
                    if self.tracked(w) {
                        let gw = slot(&mut adj, w, out * inp);
                        T::gemm(out, n, inp, T::one(), (&g, 1, out), (xd, inp, 1), T::one(), gw, inp);
                    }
                    if let Some(b) = b {
                        if self.tracked(b) {
                            let gb = slot(&mut adj, b, out);
                            for r in 0..n {
                                for o in 0..out {
                                    gb[o] += g[r * out + o];
                                }
                            }
                        }
                    }
                }
                Op::Conv3x3 { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let xs = self.shape(x).to_vec();
                    let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let c_out = self.shape(w)[0];
                    let plane = h * wd;
                    let xv = self.value(x).data();
                    let wv = self.value(w).data();
                    let kk = c_in * 9;
                    let mut cols = vec![T::zero(); kk * plane];
                    let mut gcols = vec![T::zero(); kk * plane];
                    let (tx, tw) = (self.tracked(x), self.tracked(w));
                    for s in 0..n {
                        let gs = &g[s * c_out * plane..(s + 1) * c_out * plane];
                        if tw {
                            im2col(&xv[s * c_in * plane..(s + 1) * c_in * plane], c_in, h, wd, &mut cols);
                            let gw = slot(&mut adj, w, c_out * kk);
                            T::gemm(
                                c_out,
                                plane,
                                kk,
                                T::one(),
                                (gs, plane, 1),
                                (&cols, 1, plane),
                                T::one(),
                                gw,
                                kk,
                            );
                        }
                        if tx {
                            T::gemm(
                                kk,
                                c_out,
                                plane,
                                T::one(),
                                (wv, 1, kk),
                                (gs, plane, 1),
                                T::zero(),
                                &mut gcols,
                                plane,
                            );
                            let gx = slot(&mut adj, x, n * c_in * plane);
                            col2im(&gcols, c_in, h, wd, &mut gx[s * c_in * plane..(s + 1) * c_in * plane]);
                        }
                    }
                    if let Some(b) = b {
                        if self.tracked(b) {
                            let gb = slot(&mut adj, b, c_out);
                            for s in 0..n {
                                for (o, gbo) in gb.iter_mut().enumerate() {
                                    let go = &g[(s * c_out + o) * plane..(s * c_out + o + 1) * plane];
                                    *gbo += go.iter().copied().sum::<T>();
                                }
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    let x = *x;
                    let len = self.value(x).len();
                    let xv = self.value(x).data();
                    let gx = slot(&mut adj, x, len);
                    for ((a, &v), &gy) in gx.iter_mut().zip(xv).zip(&g) {
                        if v > T::zero() {
                            *a += gy;
                        }
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let x = *x;
                    let len = self.value(x).len();
                    let gx = slot(&mut adj, x, len);
                    for (&k, &gy) in argmax.iter().zip(&g) {
                        gx[k] += gy;
                    }
                }
                Op::Reshape(x) => {
                    let x = *x;
                    let gx = slot(&mut adj, x, g.len());
                    gx.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                }
                Op::LogSoftmax(x) => {
                    let x = *x;
                    let cols = self.shape(x)[1];
                    let y = self.nodes[id].value.data();
                    let gx = slot(&mut adj, x, g.len());
                    for ((gxr, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let total: T = gr.iter().copied().sum();
                        for ((a, &gy), &lp) in gxr.iter_mut().zip(gr).zip(yr) {
                            *a += gy - lp.exp() * total;
                        }
                    }
                }
                Op::CrossEntropyRows { x, targets } => {
                    let x = *x;
                    let cols = self.shape(x)[1];
                    let gx = slot(&mut adj, x, targets.len());
                    for (r, &gr) in g.iter().enumerate() {
                        for c in 0..cols {
                            let t = targets[r * cols + c];
                            if t != T::zero() {
                                gx[r * cols + c] -= t * gr;
                            }
                        }
                    }
                }
                Op::SquaredErrorRows { x, targets } => {
                    let x = *x;
                    let rows = g.len();
                    let width = targets.len().checked_div(rows).unwrap_or(0);
                    let xv = self.value(x).data();
                    let two_over = T::lit(2.0) / T::lit(width.max(1) as f64);
                    let gx = slot(&mut adj, x, targets.len());
                    for (r, &gr) in g.iter().enumerate() {
                        for k in r * width..(r + 1) * width {
                            gx[k] += gr * two_over * (xv[k] - targets[k]);
                        }
                    }
                }
                Op::WeightedSum { x, weights } => {
                    let x = *x;
                    let gx = slot(&mut adj, x, weights.len());
                    for (a, &w) in gx.iter_mut().zip(weights) {
                        *a += g[0] * w;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let x = *x;
                    let len = self.value(x).len();
                    let width = self.value(x).row_width();
                    let gx = slot(&mut adj, x, len);
                    for (j, &r) in rows.iter().enumerate() {
                        for k in 0..width {
                            gx[r * width + k] += g[j * width + k];
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    for v in [a, b] {
                        if self.tracked(v) {
                            let gv = slot(&mut adj, v, g.len());
                            gv.iter_mut().zip(&g).for_each(|(s, &d)| *s += d);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.tracked(a) {
                        let other = self.nodes[b.0].value.data().to_vec();
                        let ga = slot(&mut adj, a, g.len());
                        for ((s, &d), &o) in ga.iter_mut().zip(&g).zip(&other) {
                            *s += d * o;
                        }
                    }
                    if self.tracked(b) {
                        let other = self.nodes[a.0].value.data().to_vec();
                        let gb = slot(&mut adj, b, g.len());
                        for ((s, &d), &o) in gb.iter_mut().zip(&g).zip(&other) {
                            *s += d * o;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    let (x, c) = (*x, *c);
                    let gx = slot(&mut adj, x, g.len());
                    gx.iter_mut().zip(&g).for_each(|(a, &d)| *a += d * c);
                }
                Op::Sum(x) => {
                    let x = *x;
                    let len = self.value(x).len();
                    let gx = slot(&mut adj, x, len);
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
                Op::Exp(x) => {
                    let x = *x;
                    let y = self.nodes[id].value.data();
                    let gx = slot(&mut adj, x, g.len());
                    for ((a, &d), &e) in gx.iter_mut().zip(&g).zip(y) {
                        *a += d * e;
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn slot<T: Real>(adj: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// `ln Σ exp(v)` with max subtraction. Empty input gives `-inf`.
pub fn log_sum_exp<T: Real>(values: &[T]) -> T {
    let m = values.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    let s: T = values.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

// Valid output range along one axis for kernel offset `d` in {0,1,2}.
#[inline]
fn span(d: usize, len: usize) -> (usize, usize) {
    match d {
        0 => (1, len),
        1 => (0, len),
        _ => (0, len.saturating_sub(1)),
    }
}

/// Unfolds one `[C, H, W]` sample into `[C·9, H·W]` rows of shifted,
/// zero-padded planes, one row per kernel tap.
fn im2col<T: Real>(x: &[T], c_in: usize, h: usize, w: usize, cols: &mut [T]) {
    let plane = h * w;
    for c in 0..c_in {
        let inp = &x[c * plane..(c + 1) * plane];
        for dy in 0..3 {
            let (y0, y1) = span(dy, h);
            for dx in 0..3 {
                let (x0, x1) = span(dx, w);
                let row = &mut cols[((c * 9) + dy * 3 + dx) * plane..((c * 9) + dy * 3 + dx + 1) * plane];
                row.iter_mut().for_each(|v| *v = T::zero());
                if x1 <= x0 {
                    continue;
                }
                for y in y0..y1 {
                    let iy = y + dy - 1;
                    row[y * w + x0..y * w + x1].copy_from_slice(&inp[iy * w + x0 + dx - 1..iy * w + x1 + dx - 1]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters tap rows back onto the input planes.
fn col2im<T: Real>(cols: &[T], c_in: usize, h: usize, w: usize, gx: &mut [T]) {
    let plane = h * w;
    for c in 0..c_in {
        let gin = &mut gx[c * plane..(c + 1) * plane];
        for dy in 0..3 {
            let (y0, y1) = span(dy, h);
            for dx in 0..3 {
                let (x0, x1) = span(dx, w);
                if x1 <= x0 {
                    continue;
                }
                let row = &cols[((c * 9) + dy * 3 + dx) * plane..((c * 9) + dy * 3 + dx + 1) * plane];
                for y in y0..y1 {
                    let iy = y + dy - 1;
                    let dst = &mut gin[iy * w + x0 + dx - 1..iy * w + x1 + dx - 1];
                    for (d, &v) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: Vec<usize>, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap().with_grad()
    }

    #[test]
    fn quadratic_gradient() {
        let theta = param(vec![2], &[1.0, -2.0]);
        let mut tape = Tape::new();
        let t = tape.param(0, &theta);
        let sq = tape.mul(t, t).unwrap();
        let loss = tape.sum(sq);
        assert_eq!(tape.value(loss).item().unwrap(), 5.0);
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.get(0).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn second_backward_fails() {
        let theta = param(vec![1], &[3.0]);
        let mut tape = Tape::new();
        let t = tape.param(0, &theta);
        let loss = tape.sum(t);
        tape.gradients(loss).unwrap();
        assert!(matches!(tape.gradients(loss), Err(Error::Tape(_))));
    }

    #[test]
    fn non_scalar_loss_fails() {
        let theta = param(vec![2], &[1.0, 2.0]);
        let mut tape = Tape::new();
        let t = tape.param(0, &theta);
        assert!(tape.gradients(t).is_err());
    }

    #[test]
    fn constant_loss_has_no_gradient() {
        let theta = param(vec![2], &[1.0, 2.0]);
        let mut tape = Tape::new();
        let _t = tape.param(0, &theta);
        let c = tape.input(Tensor::scalar(4.0));
        let loss = tape.sum(c);
        let g = tape.gradients(loss).unwrap();
        assert!(g.get(0).is_none());
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64(vec![2, 3], &[1.0, 2.0, 3.0, -50.0, 0.0, 700.0]).unwrap());
        let y = tape.log_softmax(x).unwrap();
        let out = tape.value(y).clone();
        for r in 0..2 {
            assert!(log_sum_exp(out.row(r)).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 1 sample, 1 channel, 3x4 image, one output channel.
        let img: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let k: Vec<f64> = (0..9).map(|v| (v as f64 - 4.0) / 3.0).collect();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_f64(vec![1, 1, 3, 4], &img).unwrap());
        let w = tape.input(Tensor::from_f64(vec![1, 1, 3, 3], &k).unwrap());
        let y = tape.conv3x3(x, w, None).unwrap();
        let out: Vec<f64> = tape.value(y).data().to_vec();
        for yy in 0..3i64 {
            for xx in 0..4i64 {
                let mut expect = 0.0f64;
                for dy in 0..3i64 {
                    for dx in 0..3i64 {
                        let (iy, ix) = (yy + dy - 1, xx + dx - 1);
                        if (0..3).contains(&iy) && (0..4).contains(&ix) {
                            expect += k[(dy * 3 + dx) as usize] * img[(iy * 4 + ix) as usize];
                        }
                    }
                }
                assert!((out[(yy * 4 + xx) as usize] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn select_rows_scatters_back() {
        let theta = param(vec![3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut tape = Tape::new();
        let t = tape.param(0, &theta);
        let s = tape.select_rows(t, vec![2, 0, 2]).unwrap();
        let loss = tape.sum(s);
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.get(0).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
