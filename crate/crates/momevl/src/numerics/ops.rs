//! Forward operations and their backward rules.
//!
//! Reductions always run in index order so repeated runs are bit-identical.
//! The matmul kernels are written in accumulate-row form (`out[i,:] += a *
//! b[t,:]`) so the inner loops autovectorize; gradient matmuls materialize the
//! small transpose instead of striding.

use crate::error::{Error, Result};
use crate::numerics::tensor::{BackwardStep, GradSink, Inner, Tensor};
use crate::numerics::Scalar;

// ---------------------------------------------------------------------------
// raw kernels

/// out += a @ b, a: m x k, b: k x n.
pub(crate) fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose_raw<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Numerically stabilized softmax over one contiguous lane.
fn softmax_lane<S: Scalar>(lane: &mut [S]) {
    let mut mx = lane[0];
    for &v in lane.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = S::zero();
    for v in lane.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = S::one() / sum;
    for v in lane.iter_mut() {
        *v *= inv;
    }
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

// ---------------------------------------------------------------------------
// elementwise / broadcast

enum AddKind {
    Same,
    Row,    // rhs is [cols] or [1, cols], lhs [rows, cols]
    Scalar, // rhs has one element
}

struct AddBack {
    kind: AddKind,
}

impl<S: Scalar> BackwardStep<S> for AddBack {
    fn name(&self) -> &'static str {
        "add"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        if let Some(da) = sink.slot(&node.parents[0]) {
            for (d, &v) in da.iter_mut().zip(g) {
                *d += v;
            }
        }
        if let Some(db) = sink.slot(&node.parents[1]) {
            match self.kind {
                AddKind::Same => {
                    for (d, &v) in db.iter_mut().zip(g) {
                        *d += v;
                    }
                }
                AddKind::Row => {
                    let cols = db.len();
                    for row in g.chunks_exact(cols) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                AddKind::Scalar => {
                    let mut s = S::zero();
                    for &v in g {
                        s += v;
                    }
                    db[0] += s;
                }
            }
        }
    }
}

enum MulKind {
    Same,
    Scalar,
}

struct MulBack {
    kind: MulKind,
}

impl<S: Scalar> BackwardStep<S> for MulBack {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        let a = node.parents[0].0.data.borrow();
        let b = node.parents[1].0.data.borrow();
        match self.kind {
            MulKind::Same => {
                if let Some(da) = sink.slot(&node.parents[0]) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(b.iter()) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = sink.slot(&node.parents[1]) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(a.iter()) {
                        *d += gv * av;
                    }
                }
            }
            MulKind::Scalar => {
                let bv = b[0];
                if let Some(da) = sink.slot(&node.parents[0]) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = sink.slot(&node.parents[1]) {
                    let mut s = S::zero();
                    for (&gv, &av) in g.iter().zip(a.iter()) {
                        s += gv * av;
                    }
                    db[0] += s;
                }
            }
        }
    }
}

struct ScaleBack<S> {
    c: S,
}

impl<S: Scalar> BackwardStep<S> for ScaleBack<S> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        if let Some(da) = sink.slot(&node.parents[0]) {
            for (d, &v) in da.iter_mut().zip(g) {
                *d += v * self.c;
            }
        }
    }
}

struct GeluBack;

impl<S: Scalar> BackwardStep<S> for GeluBack {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        let x = node.parents[0].0.data.borrow();
        if let Some(dx) = sink.slot(&node.parents[0]) {
            let half = S::from_f64(0.5);
            let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
            let inv_sqrt_2pi = S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(x.iter()) {
                let cdf = half * (S::one() + (xv * inv_sqrt2).erf());
                let pdf = (-(xv * xv) * half).exp() * inv_sqrt_2pi;
                *d += gv * (cdf + xv * pdf);
            }
        }
    }
}

struct ExpBack;

impl<S: Scalar> BackwardStep<S> for ExpBack {
    fn name(&self) -> &'static str {
        "exp"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        let y = node.data.borrow();
        if let Some(dx) = sink.slot(&node.parents[0]) {
            for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y.iter()) {
                *d += gv * yv;
            }
        }
    }
}

struct RecipBack;

impl<S: Scalar> BackwardStep<S> for RecipBack {
    fn name(&self) -> &'static str {
        "recip"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        let y = node.data.borrow();
        if let Some(dx) = sink.slot(&node.parents[0]) {
            for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y.iter()) {
                *d -= gv * yv * yv;
            }
        }
    }
}

struct ClampBack<S> {
    lo: S,
    hi: S,
}

impl<S: Scalar> BackwardStep<S> for ClampBack<S> {
    fn name(&self) -> &'static str {
        "clamp"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        let x = node.parents[0].0.data.borrow();
        if let Some(dx) = sink.slot(&node.parents[0]) {
            for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(x.iter()) {
                if xv >= self.lo && xv <= self.hi {
                    *d += gv;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// linear algebra

struct MatmulBack {
    m: usize,
    k: usize,
    n: usize,
}

impl<S: Scalar> BackwardStep<S> for MatmulBack {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if node.parents[0].requires_grad() {
            let b = node.parents[1].0.data.borrow();
            let bt = transpose_raw(&b, k, n);
            drop(b);
            if let Some(da) = sink.slot(&node.parents[0]) {
                matmul_acc(g, &bt, m, n, k, da);
            }
        }
        if node.parents[1].requires_grad() {
            let a = node.parents[0].0.data.borrow();
            let at = transpose_raw(&a, m, k);
            drop(a);
            if let Some(db) = sink.slot(&node.parents[1]) {
                matmul_acc(&at, g, k, m, n, db);
            }
        }
    }
}

struct TransposeBack {
    rows: usize,
    cols: usize,
}

impl<S: Scalar> BackwardStep<S> for TransposeBack {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        // node output is cols x rows; gradient maps back transposed
        if let Some(dx) = sink.slot(&node.parents[0]) {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    dx[r * self.cols + c] += g[c * self.rows + r];
                }
            }
        }
    }
}

struct SoftmaxBack {
    axis: usize,
}

impl<S: Scalar> BackwardStep<S> for SoftmaxBack {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        let y = node.data.borrow();
        let (outer, len, inner) = lane_dims(&node.parents[0].shape(), self.axis);
        if let Some(dx) = sink.slot(&node.parents[0]) {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = S::zero();
                    for t in 0..len {
                        let idx = base + t * inner;
                        dot += g[idx] * y[idx];
                    }
                    for t in 0..len {
                        let idx = base + t * inner;
                        dx[idx] += (g[idx] - dot) * y[idx];
                    }
                }
            }
        }
    }
}

struct LayerNormBack<S> {
    dim: usize,
    eps: S,
    mean: Vec<S>,
    rstd: Vec<S>,
}

impl<S: Scalar> BackwardStep<S> for LayerNormBack<S> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        let _ = self.eps;
        let d = self.dim;
        let x = node.parents[0].0.data.borrow();
        let gamma = node.parents[1].0.data.borrow();
        let rows = x.len() / d;
        let inv_d = S::one() / S::from_f64(d as f64);

        // d(gamma), d(beta): reductions over rows
        if let Some(dg) = sink.slot(&node.parents[1]) {
            for r in 0..rows {
                let (mu, rs) = (self.mean[r], self.rstd[r]);
                for c in 0..d {
                    let xhat = (x[r * d + c] - mu) * rs;
                    dg[c] += g[r * d + c] * xhat;
                }
            }
        }
        if let Some(db) = sink.slot(&node.parents[2]) {
            for r in 0..rows {
                for c in 0..d {
                    db[c] += g[r * d + c];
                }
            }
        }
        if let Some(dx) = sink.slot(&node.parents[0]) {
            for r in 0..rows {
                let (mu, rs) = (self.mean[r], self.rstd[r]);
                let mut sum_gi = S::zero();
                let mut sum_gx = S::zero();
                for c in 0..d {
                    let gi = g[r * d + c] * gamma[c];
                    let xhat = (x[r * d + c] - mu) * rs;
                    sum_gi += gi;
                    sum_gx += gi * xhat;
                }
                let mean_gi = sum_gi * inv_d;
                let mean_gx = sum_gx * inv_d;
                for c in 0..d {
                    let gi = g[r * d + c] * gamma[c];
                    let xhat = (x[r * d + c] - mu) * rs;
                    dx[r * d + c] += rs * (gi - mean_gi - xhat * mean_gx);
                }
            }
        }
    }
}

struct L2NormalizeBack<S> {
    dim: usize,
    eps: S,
    norms: Vec<S>,
}

impl<S: Scalar> BackwardStep<S> for L2NormalizeBack<S> {
    fn name(&self) -> &'static str {
        "l2_normalize"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        let d = self.dim;
        let y = node.data.borrow();
        if let Some(dx) = sink.slot(&node.parents[0]) {
            for (r, &n) in self.norms.iter().enumerate() {
                let row = r * d;
                let inv = S::one() / n;
                if n <= self.eps {
                    for c in 0..d {
                        dx[row + c] += g[row + c] * inv;
                    }
                    continue;
                }
                let mut dot = S::zero();
                for c in 0..d {
                    dot += g[row + c] * y[row + c];
                }
                for c in 0..d {
                    dx[row + c] += (g[row + c] - y[row + c] * dot) * inv;
                }
            }
        }
    }
}

struct CrossEntropyBack<S> {
    classes: usize,
    targets: Vec<i64>,
    active: usize,
    probs: Vec<S>,
}

impl<S: Scalar> BackwardStep<S> for CrossEntropyBack<S> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        let k = self.classes;
        let scale = g[0] / S::from_f64(self.active as f64);
        if let Some(dx) = sink.slot(&node.parents[0]) {
            for (r, &t) in self.targets.iter().enumerate() {
                if t < 0 {
                    continue;
                }
                for c in 0..k {
                    let p = self.probs[r * k + c];
                    let indicator = if c as i64 == t { S::one() } else { S::zero() };
                    dx[r * k + c] += scale * (p - indicator);
                }
            }
        }
    }
}

struct GatherRowsBack {
    cols: usize,
    idx: Vec<usize>,
}

impl<S: Scalar> BackwardStep<S> for GatherRowsBack {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        let c = self.cols;
        if let Some(dx) = sink.slot(&node.parents[0]) {
            for (i, &row) in self.idx.iter().enumerate() {
                let src = &g[i * c..(i + 1) * c];
                let dst = &mut dx[row * c..(row + 1) * c];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
    }
}

struct ConcatRowsBack {
    cols: usize,
    row_counts: Vec<usize>,
}

impl<S: Scalar> BackwardStep<S> for ConcatRowsBack {
    fn name(&self) -> &'static str {
        "concat_rows"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        let c = self.cols;
        let mut offset = 0;
        for (p, &rows) in self.row_counts.iter().enumerate() {
            let chunk = &g[offset * c..(offset + rows) * c];
            if let Some(dp) = sink.slot(&node.parents[p]) {
                for (d, &v) in dp.iter_mut().zip(chunk) {
                    *d += v;
                }
            }
            offset += rows;
        }
    }
}

struct SliceColsBack {
    rows: usize,
    src_cols: usize,
    start: usize,
    len: usize,
}

impl<S: Scalar> BackwardStep<S> for SliceColsBack {
    fn name(&self) -> &'static str {
        "slice_cols"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        if let Some(dx) = sink.slot(&node.parents[0]) {
            for r in 0..self.rows {
                let src = &g[r * self.len..(r + 1) * self.len];
                let dst = &mut dx[r * self.src_cols + self.start..];
                for (d, &v) in dst[..self.len].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
    }
}

struct ConcatColsBack {
    rows: usize,
    col_counts: Vec<usize>,
    total_cols: usize,
}

impl<S: Scalar> BackwardStep<S> for ConcatColsBack {
    fn name(&self) -> &'static str {
        "concat_cols"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        let mut start = 0;
        for (p, &cols) in self.col_counts.iter().enumerate() {
            if let Some(dp) = sink.slot(&node.parents[p]) {
                for r in 0..self.rows {
                    let src = &g[r * self.total_cols + start..r * self.total_cols + start + cols];
                    let dst = &mut dp[r * cols..(r + 1) * cols];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            start += cols;
        }
    }
}

struct SumAllBack {
    scale: f64,
}

impl<S: Scalar> BackwardStep<S> for SumAllBack {
    fn name(&self) -> &'static str {
        "sum_all"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        let gv = g[0] * S::from_f64(self.scale);
        if let Some(dx) = sink.slot(&node.parents[0]) {
            for d in dx.iter_mut() {
                *d += gv;
            }
        }
    }
}

struct ReshapeBack;

impl<S: Scalar> BackwardStep<S> for ReshapeBack {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        if let Some(dx) = sink.slot(&node.parents[0]) {
            for (d, &v) in dx.iter_mut().zip(g) {
                *d += v;
            }
        }
    }
}

/// Fused multi-head self-attention core: `softmax(Q K^T / sqrt(dh)) V` per
/// head, heads concatenated. Keeping this one node (instead of ~10 per head)
/// is what makes CPU training tolerable.
struct AttentionCoreBack<S> {
    seq: usize,
    dim: usize,
    heads: usize,
    probs: Vec<S>, // heads x seq x seq
}

fn head_block<S: Scalar>(x: &[S], seq: usize, dim: usize, start: usize, dh: usize) -> Vec<S> {
    let mut out = vec![S::zero(); seq * dh];
    for r in 0..seq {
        out[r * dh..(r + 1) * dh].copy_from_slice(&x[r * dim + start..r * dim + start + dh]);
    }
    out
}

fn head_block_acc<S: Scalar>(dst: &mut [S], src: &[S], seq: usize, dim: usize, start: usize, dh: usize) {
    for r in 0..seq {
        let d = &mut dst[r * dim + start..r * dim + start + dh];
        let s = &src[r * dh..(r + 1) * dh];
        for (dv, &sv) in d.iter_mut().zip(s) {
            *dv += sv;
        }
    }
}

impl<S: Scalar> BackwardStep<S> for AttentionCoreBack<S> {
    fn name(&self) -> &'static str {
        "attention_core"
    }

    fn step(&self, g: &[S], node: &Inner<S>, sink: &mut GradSink<S>) {
        let (t, d, h) = (self.seq, self.dim, self.heads);
        let dh = d / h;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let q = node.parents[0].0.data.borrow();
        let k = node.parents[1].0.data.borrow();
        let v = node.parents[2].0.data.borrow();

        let mut dq = vec![S::zero(); t * d];
        let mut dk = vec![S::zero(); t * d];
        let mut dv = vec![S::zero(); t * d];

        for head in 0..h {
            let start = head * dh;
            let a = &self.probs[head * t * t..(head + 1) * t * t];
            let qh = head_block(&q, t, d, start, dh);
            let kh = head_block(&k, t, d, start, dh);
            let vh = head_block(&v, t, d, start, dh);
            let go = head_block(g, t, d, start, dh);

            // dV_h = A^T @ dO
            let at = transpose_raw(a, t, t);
            let mut dvh = vec![S::zero(); t * dh];
            matmul_acc(&at, &go, t, t, dh, &mut dvh);
            head_block_acc(&mut dv, &dvh, t, d, start, dh);

            // dA = dO @ V_h^T, then softmax backward rows, then scale
            let vht = transpose_raw(&vh, t, dh);
            let mut da = vec![S::zero(); t * t];
            matmul_acc(&go, &vht, t, dh, t, &mut da);
            let mut ds = vec![S::zero(); t * t];
            for r in 0..t {
                let arow = &a[r * t..(r + 1) * t];
                let darow = &da[r * t..(r + 1) * t];
                let mut dot = S::zero();
                for (&ga, &ya) in darow.iter().zip(arow) {
                    dot += ga * ya;
                }
                let srow = &mut ds[r * t..(r + 1) * t];
                for ((sv, &ga), &ya) in srow.iter_mut().zip(darow).zip(arow) {
                    *sv = (ga - dot) * ya * scale;
                }
            }

            // dQ_h = dS @ K_h ; dK_h = dS^T @ Q_h
            let mut dqh = vec![S::zero(); t * dh];
            matmul_acc(&ds, &kh, t, t, dh, &mut dqh);
            head_block_acc(&mut dq, &dqh, t, d, start, dh);

            let dst = transpose_raw(&ds, t, t);
            let mut dkh = vec![S::zero(); t * dh];
            matmul_acc(&dst, &qh, t, t, dh, &mut dkh);
            head_block_acc(&mut dk, &dkh, t, d, start, dh);
        }

        if let Some(s) = sink.slot(&node.parents[0]) {
            for (d0, &v0) in s.iter_mut().zip(&dq) {
                *d0 += v0;
            }
        }
        if let Some(s) = sink.slot(&node.parents[1]) {
            for (d0, &v0) in s.iter_mut().zip(&dk) {
                *d0 += v0;
            }
        }
        if let Some(s) = sink.slot(&node.parents[2]) {
            for (d0, &v0) in s.iter_mut().zip(&dv) {
                *d0 += v0;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// public op surface

impl<S: Scalar> Tensor<S> {
    /// Elementwise addition. `other` may share the shape, be a row vector
    /// broadcast over leading rows, or be a single element.
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let kind = if self.shape() == other.shape() {
            AddKind::Same
        } else if other.numel() == 1 {
            AddKind::Scalar
        } else {
            let cols = *self.shape().last().unwrap_or(&0);
            let row_like = other.shape() == [cols] || other.shape() == [1, cols];
            if !row_like || self.numel() % cols.max(1) != 0 {
                return Err(Error::Dim {
                    op: "add",
                    lhs: self.shape().to_vec(),
                    rhs: other.shape().to_vec(),
                });
            }
            AddKind::Row
        };
        let a = self.0.data.borrow();
        let b = other.0.data.borrow();
        let mut out = a.clone();
        match kind {
            AddKind::Same => {
                for (o, &v) in out.iter_mut().zip(b.iter()) {
                    *o += v;
                }
            }
            AddKind::Scalar => {
                let v = b[0];
                for o in out.iter_mut() {
                    *o += v;
                }
            }
            AddKind::Row => {
                let cols = b.len();
                for row in out.chunks_exact_mut(cols) {
                    for (o, &v) in row.iter_mut().zip(b.iter()) {
                        *o += v;
                    }
                }
            }
        }
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(AddBack { kind }),
        ))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.add(&other.scale(-S::one()))
    }

    /// Elementwise product; `other` may be a single element broadcast.
    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let kind = if self.shape() == other.shape() {
            MulKind::Same
        } else if other.numel() == 1 {
            MulKind::Scalar
        } else {
            return Err(Error::Dim {
                op: "mul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        };
        let a = self.0.data.borrow();
        let b = other.0.data.borrow();
        let out: Vec<S> = match kind {
            MulKind::Same => a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect(),
            MulKind::Scalar => {
                let v = b[0];
                a.iter().map(|&x| x * v).collect()
            }
        };
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(MulBack { kind }),
        ))
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        let out: Vec<S> = self.0.data.borrow().iter().map(|&x| x * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(ScaleBack { c }),
        )
    }

    /// Exact erf-based GELU, elementwise.
    pub fn gelu(&self) -> Tensor<S> {
        let half = S::from_f64(0.5);
        let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let out: Vec<S> = self
            .0
            .data
            .borrow()
            .iter()
            .map(|&x| half * x * (S::one() + (x * inv_sqrt2).erf()))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(GeluBack),
        )
    }

    pub fn exp(&self) -> Tensor<S> {
        let out: Vec<S> = self.0.data.borrow().iter().map(|&x| x.exp()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(ExpBack),
        )
    }

    pub fn recip(&self) -> Tensor<S> {
        let out: Vec<S> = self
            .0
            .data
            .borrow()
            .iter()
            .map(|&x| S::one() / x)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(RecipBack),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes inside the interval.
    pub fn clamp(&self, lo: S, hi: S) -> Tensor<S> {
        let out: Vec<S> = self
            .0
            .data
            .borrow()
            .iter()
            .map(|&x| {
                if x < lo {
                    lo
                } else if x > hi {
                    hi
                } else {
                    x
                }
            })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(ClampBack { lo, hi }),
        )
    }

    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = self.dims2().map_err(|_| Error::Dim {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        })?;
        let (k2, n) = other.dims2().map_err(|_| Error::Dim {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        })?;
        if k != k2 {
            return Err(Error::Dim {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        matmul_acc(
            &self.0.data.borrow(),
            &other.0.data.borrow(),
            m,
            k,
            n,
            &mut out,
        );
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(MatmulBack { m, k, n }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<S>> {
        let (r, c) = self.dims2()?;
        let out = transpose_raw(&self.0.data.borrow(), r, c);
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(TransposeBack { rows: r, cols: c }),
        ))
    }

    /// Stabilized softmax along `axis`; slices along the axis sum to one.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        if axis >= self.shape().len().max(1) {
            return Err(Error::Contract(format!(
                "softmax axis {} out of range for shape {:?}",
                axis,
                self.shape()
            )));
        }
        if !self.all_finite() {
            return Err(Error::Contract(
                "softmax requires finite input".to_string(),
            ));
        }
        let shape = if self.shape().is_empty() {
            vec![1]
        } else {
            self.shape().to_vec()
        };
        let (outer, len, inner) = lane_dims(&shape, axis);
        let mut out = self.0.data.borrow().clone();
        if inner == 1 {
            for lane in out.chunks_exact_mut(len) {
                softmax_lane(lane);
            }
        } else {
            let mut lane = vec![S::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    for t in 0..len {
                        lane[t] = out[base + t * inner];
                    }
                    softmax_lane(&mut lane);
                    for t in 0..len {
                        out[base + t * inner] = lane[t];
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(SoftmaxBack { axis }),
        ))
    }

    /// Per-row (last axis) normalization with affine transform.
    pub fn layer_norm(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        let d = *self.shape().last().ok_or_else(|| Error::Contract(
            "layer_norm requires rank >= 1".to_string(),
        ))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Dim {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        if eps <= S::zero() {
            return Err(Error::Contract("layer_norm eps must be > 0".to_string()));
        }
        let x = self.0.data.borrow();
        let gm = gamma.0.data.borrow();
        let bt = beta.0.data.borrow();
        let rows = x.len() / d;
        let inv_d = S::one() / S::from_f64(d as f64);
        let mut out = vec![S::zero(); x.len()];
        let mut means = vec![S::zero(); rows];
        let mut rstds = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mut mu = S::zero();
            for &v in row {
                mu += v;
            }
            mu *= inv_d;
            let mut var = S::zero();
            for &v in row {
                let c = v - mu;
                var += c * c;
            }
            var *= inv_d;
            let rstd = S::one() / (var + eps).sqrt();
            means[r] = mu;
            rstds[r] = rstd;
            for c in 0..d {
                out[r * d + c] = (row[c] - mu) * rstd * gm[c] + bt[c];
            }
        }
        drop(x);
        drop(gm);
        drop(bt);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(LayerNormBack {
                dim: d,
                eps,
                mean: means,
                rstd: rstds,
            }),
        ))
    }

    /// Rows (last axis) scaled to unit Euclidean norm; zero rows pass through
    /// under an epsilon guard.
    pub fn l2_normalize(&self) -> Result<Tensor<S>> {
        let d = *self.shape().last().ok_or_else(|| Error::Contract(
            "l2_normalize requires rank >= 1".to_string(),
        ))?;
        let eps = S::from_f64(1e-12);
        let x = self.0.data.borrow();
        let rows = x.len() / d;
        let mut out = vec![S::zero(); x.len()];
        let mut norms = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mut sq = S::zero();
            for &v in row {
                sq += v * v;
            }
            let n = sq.sqrt().max(eps);
            norms[r] = n;
            let inv = S::one() / n;
            for c in 0..d {
                out[r * d + c] = row[c] * inv;
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(L2NormalizeBack {
                dim: d,
                eps,
                norms,
            }),
        ))
    }

    /// Mean negative log-likelihood over rows whose target is >= 0; negative
    /// targets are ignored (masked-out positions).
    pub fn cross_entropy(&self, targets: &[i64]) -> Result<Tensor<S>> {
        let (rows, k) = self.dims2()?;
        if targets.len() != rows {
            return Err(Error::Contract(format!(
                "cross_entropy: {} logit rows but {} targets",
                rows,
                targets.len()
            )));
        }
        for &t in targets {
            if t >= k as i64 {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: k,
                });
            }
        }
        let active = targets.iter().filter(|&&t| t >= 0).count();
        if active == 0 {
            return Err(Error::Contract(
                "cross_entropy: no active targets".to_string(),
            ));
        }
        let x = self.0.data.borrow();
        let mut probs = vec![S::zero(); rows * k];
        let mut loss = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let lane = &mut probs[r * k..(r + 1) * k];
            lane.copy_from_slice(row);
            let mut mx = lane[0];
            for &v in lane.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = S::zero();
            for v in lane.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            let inv = S::one() / sum;
            for v in lane.iter_mut() {
                *v *= inv;
            }
            if t >= 0 {
                loss -= lane[t as usize].max(S::from_f64(1e-45)).ln();
            }
        }
        loss /= S::from_f64(active as f64);
        drop(x);
        Ok(Tensor::from_op(
            Vec::new(),
            vec![loss],
            vec![self.clone()],
            Box::new(CrossEntropyBack {
                classes: k,
                targets: targets.to_vec(),
                active,
                probs,
            }),
        ))
    }

    /// Rows of a rank-2 tensor selected by index (duplicates allowed;
    /// gradients scatter-add). Also serves as the embedding lookup.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<S>> {
        let (rows, cols) = self.dims2()?;
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i as i64,
                    bound: rows,
                });
            }
        }
        let x = self.0.data.borrow();
        let mut out = vec![S::zero(); idx.len() * cols];
        for (o, &i) in idx.iter().enumerate() {
            out[o * cols..(o + 1) * cols].copy_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![idx.len(), cols],
            out,
            vec![self.clone()],
            Box::new(GatherRowsBack {
                cols,
                idx: idx.to_vec(),
            }),
        ))
    }

    /// Contiguous row range.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(&idx)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        let (rows, cols) = self.dims2()?;
        if start + len > cols {
            return Err(Error::Index {
                op: "slice_cols",
                index: (start + len) as i64,
                bound: cols,
            });
        }
        let x = self.0.data.borrow();
        let mut out = vec![S::zero(); rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![rows, len],
            out,
            vec![self.clone()],
            Box::new(SliceColsBack {
                rows,
                src_cols: cols,
                start,
                len,
            }),
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<S>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Contract(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape,
            self.0.data.borrow().clone(),
            vec![self.clone()],
            Box::new(ReshapeBack),
        ))
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let mut s = S::zero();
        for &v in self.0.data.borrow().iter() {
            s += v;
        }
        Tensor::from_op(
            Vec::new(),
            vec![s],
            vec![self.clone()],
            Box::new(SumAllBack { scale: 1.0 }),
        )
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = self.numel();
        let mut s = S::zero();
        for &v in self.0.data.borrow().iter() {
            s += v;
        }
        Tensor::from_op(
            Vec::new(),
            vec![s / S::from_f64(n as f64)],
            vec![self.clone()],
            Box::new(SumAllBack {
                scale: 1.0 / n as f64,
            }),
        )
    }
}

/// Vertical concatenation of rank-2 tensors with equal column counts.
pub fn concat_rows<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_rows of zero tensors".to_string()));
    }
    let (_, cols) = parts[0].dims2()?;
    let mut row_counts = Vec::with_capacity(parts.len());
    let mut total_rows = 0;
    for p in parts {
        let (r, c) = p.dims2()?;
        if c != cols {
            return Err(Error::Dim {
                op: "concat_rows",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        row_counts.push(r);
        total_rows += r;
    }
    let mut out = Vec::with_capacity(total_rows * cols);
    for p in parts {
        out.extend_from_slice(&p.0.data.borrow());
    }
    Ok(Tensor::from_op(
        vec![total_rows, cols],
        out,
        parts.iter().map(|&p| p.clone()).collect(),
        Box::new(ConcatRowsBack { cols, row_counts }),
    ))
}

/// Horizontal concatenation of rank-2 tensors with equal row counts.
pub fn concat_cols<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_cols of zero tensors".to_string()));
    }
    let (rows, _) = parts[0].dims2()?;
    let mut col_counts = Vec::with_capacity(parts.len());
    let mut total_cols = 0;
    for p in parts {
        let (r, c) = p.dims2()?;
        if r != rows {
            return Err(Error::Dim {
                op: "concat_cols",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        col_counts.push(c);
        total_cols += c;
    }
    let mut out = vec![S::zero(); rows * total_cols];
    let mut start = 0;
    for (p, &c) in parts.iter().zip(&col_counts) {
        let data = p.0.data.borrow();
        for r in 0..rows {
            out[r * total_cols + start..r * total_cols + start + c]
                .copy_from_slice(&data[r * c..(r + 1) * c]);
        }
        start += c;
    }
    Ok(Tensor::from_op(
        vec![rows, total_cols],
        out,
        parts.iter().map(|&p| p.clone()).collect(),
        Box::new(ConcatColsBack {
            rows,
            col_counts,
            total_cols,
        }),
    ))
}

/// Multi-head scaled-dot-product self-attention over already-projected
/// Q, K, V (each `seq x dim`); `dim` must divide evenly into `heads`.
pub fn attention_core<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
) -> Result<Tensor<S>> {
    let (t, d) = q.dims2()?;
    if k.shape() != [t, d] || v.shape() != [t, d] {
        return Err(Error::Dim {
            op: "attention_core",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention_core: {} heads do not divide dim {}",
            heads, d
        )));
    }
    let dh = d / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let qd = q.0.data.borrow();
    let kd = k.0.data.borrow();
    let vd = v.0.data.borrow();
    let mut out = vec![S::zero(); t * d];
    let mut probs = vec![S::zero(); heads * t * t];
    for head in 0..heads {
        let start = head * dh;
        let qh = head_block(&qd, t, d, start, dh);
        let kh = head_block(&kd, t, d, start, dh);
        let vh = head_block(&vd, t, d, start, dh);
        let kht = transpose_raw(&kh, t, dh);
        let a = &mut probs[head * t * t..(head + 1) * t * t];
        matmul_acc(&qh, &kht, t, dh, t, a);
        for s in a.iter_mut() {
            *s *= scale;
        }
        for lane in a.chunks_exact_mut(t) {
            softmax_lane(lane);
        }
        let mut oh = vec![S::zero(); t * dh];
        matmul_acc(a, &vh, t, t, dh, &mut oh);
        for r in 0..t {
            out[r * d + start..r * d + start + dh].copy_from_slice(&oh[r * dh..(r + 1) * dh]);
        }
    }
    drop(qd);
    drop(kd);
    drop(vd);
    Ok(Tensor::from_op(
        vec![t, d],
        out,
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(AttentionCoreBack {
            seq: t,
            dim: d,
            heads,
            probs,
        }),
    ))
}
