//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value in a [`Tape`] is a 2-D matrix. Batched token tensors are stored
//! row-stacked (`batch * tokens` rows, `channels` columns), and ops that need
//! per-sample structure (attention, per-sample broadcasts) take the block
//! layout explicitly.
//!
//! Leaves are either constants or parameters. Gradients are only propagated
//! into subgraphs that reach a parameter, so frozen weights cost nothing in
//! the backward pass beyond the activations that flow through them.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    AddBlocks {
        a: Var,
        b: Var,
        block: usize,
    },
    Scale(Var, f64),
    Silu(Var),
    LayerNorm {
        a: Var,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<Matrix>,
    },
    Permute {
        a: Var,
        idx: Arc<[usize]>,
    },
    ConcatCols(Var, Var),
    GatherRows {
        src: Var,
        idx: Arc<[Option<usize>]>,
    },
    MeanSquare {
        a: Var,
        target: Matrix,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Matrix,
        target: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Row-block layout of a batched attention call.
///
/// `query_offsets` and `kv_offsets` both have `batch + 1` entries; sample `i`
/// attends from query rows `query_offsets[i]..query_offsets[i + 1]` to key and
/// value rows `kv_offsets[i]..kv_offsets[i + 1]`.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub query_offsets: Arc<[usize]>,
    pub kv_offsets: Arc<[usize]>,
    pub heads: usize,
}

impl AttentionLayout {
    /// Uniform blocks: `batch` samples, each with `nq` query rows and `nk` key rows.
    pub fn uniform(batch: usize, nq: usize, nk: usize, heads: usize) -> Self {
        Self {
            query_offsets: (0..=batch).map(|i| i * nq).collect(),
            kv_offsets: (0..=batch).map(|i| i * nk).collect(),
            heads,
        }
    }

    pub fn batch(&self) -> usize {
        self.query_offsets.len() - 1
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, true)
    }

    /// `a^T * b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, true, false)
    }

    fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let av = if ta { av.t() } else { av.view() };
        let bv = if tb { bv.t() } else { bv.view() };
        assert_eq!(
            av.ncols(),
            bv.nrows(),
            "matmul inner dimensions differ: {:?} x {:?}",
            av.dim(),
            bv.dim()
        );
        let value = av.dot(&bv);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    /// `a (m x n) + row (1 x n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row expects a 1 x {n} row");
        let value = self.value(a) + self.value(row);
        let needs = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), needs)
    }

    /// `a (batch*block x n) + b (batch x n)`, repeating row `i` of `b` over block `i`.
    pub fn add_blocks(&mut self, a: Var, b: Var, block: usize) -> Var {
        let (m, n) = self.shape(a);
        let (bb, bn) = self.shape(b);
        assert_eq!(bn, n, "add_blocks column mismatch");
        assert_eq!(bb * block, m, "add_blocks block layout mismatch");
        let mut value = self.value(a).clone();
        let bv = self.value(b);
        for (i, mut chunk) in value.axis_chunks_iter_mut(Axis(0), block).enumerate() {
            chunk += &bv.row(i);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::AddBlocks { a, b, block }, needs)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, factor), needs)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        let needs = self.needs(a);
        self.push(value, Op::Silu(a), needs)
    }

    /// Per-row normalization to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let x = self.value(a);
        let (m, n) = x.dim();
        let mut out = Matrix::zeros((m, n));
        let mut rstd = Vec::with_capacity(m);
        for (row, mut orow) in x.outer_iter().zip(out.outer_iter_mut()) {
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + EPS).sqrt();
            Zip::from(&mut orow).and(&row).for_each(|o, &v| *o = (v - mean) * r);
            rstd.push(r);
        }
        let needs = self.needs(a);
        self.push(out, Op::LayerNorm { a, rstd }, needs)
    }

    /// Multi-head scaled dot-product attention over row blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Var {
        let (nq, c) = self.shape(q);
        let (nk, ck) = self.shape(k);
        assert_eq!(self.shape(v), (nk, ck), "attention key/value shape mismatch");
        assert_eq!(c, ck, "attention query/key width mismatch");
        assert_eq!(c % layout.heads, 0, "width not divisible by head count");
        assert_eq!(*layout.query_offsets.last().unwrap(), nq);
        assert_eq!(*layout.kv_offsets.last().unwrap(), nk);
        let dh = c / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Matrix::zeros((nq, c));
        let mut probs = Vec::with_capacity(layout.batch() * layout.heads);
        for i in 0..layout.batch() {
            let (q0, q1) = (layout.query_offsets[i], layout.query_offsets[i + 1]);
            let (k0, k1) = (layout.kv_offsets[i], layout.kv_offsets[i + 1]);
            for h in 0..layout.heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![q0..q1, cols.clone()]);
                let ks = kv.slice(s![k0..k1, cols.clone()]);
                let vs = vv.slice(s![k0..k1, cols.clone()]);
                let mut p = qs.dot(&ks.t());
                p *= scale;
                softmax_rows(&mut p);
                out.slice_mut(s![q0..q1, cols]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            needs,
        )
    }

    /// Reorders elements: `out.flat[i] = a.flat[idx[i]]`, reshaped to `shape`.
    pub fn permute(&mut self, a: Var, idx: Arc<[usize]>, shape: (usize, usize)) -> Var {
        assert_eq!(shape.0 * shape.1, idx.len(), "permute shape/index mismatch");
        let src = self.value(a).as_standard_layout();
        let flat = src.as_slice().expect("standard layout");
        let data: Vec<f64> = idx.iter().map(|&j| flat[j]).collect();
        let value = Matrix::from_shape_vec(shape, data).expect("permute shape");
        let needs = self.needs(a);
        self.push(value, Op::Permute { a, idx }, needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).0, self.shape(b).0, "concat row mismatch");
        let value =
            ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()]).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatCols(a, b), needs)
    }

    /// Builds a matrix whose row `i` is `src[idx[i]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, src: Var, idx: Arc<[Option<usize>]>) -> Var {
        let sv = self.value(src);
        let mut value = Matrix::zeros((idx.len(), sv.ncols()));
        for (i, j) in idx.iter().enumerate() {
            if let Some(j) = j {
                value.row_mut(i).assign(&sv.row(*j));
            }
        }
        let needs = self.needs(src);
        self.push(value, Op::GatherRows { src, idx }, needs)
    }

    /// Mean over all elements of `(a - target)^2`, as a 1x1 node.
    pub fn mean_square(&mut self, a: Var, target: Matrix) -> Var {
        assert_eq!(self.shape(a), target.dim(), "mean_square shape mismatch");
        let diff = self.value(a) - &target;
        let value = diff.mapv(|d| d * d).mean().unwrap_or(0.0);
        let needs = self.needs(a);
        self.push(
            Matrix::from_elem((1, 1), value),
            Op::MeanSquare { a, target },
            needs,
        )
    }

    /// Row-wise softmax cross entropy against (possibly soft) target
    /// distributions, averaged over rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Matrix) -> Var {
        assert_eq!(self.shape(logits), target.dim(), "cross entropy shape mismatch");
        let mut probs = self.value(logits).clone();
        softmax_rows(&mut probs);
        let rows = probs.nrows().max(1) as f64;
        let loss = Zip::from(&probs)
            .and(&target)
            .fold(0.0, |acc, &p, &t| if t > 0.0 { acc - t * p.max(1e-300).ln() } else { acc })
            / rows;
        let needs = self.needs(logits);
        self.push(
            Matrix::from_elem((1, 1), loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target,
            },
            needs,
        )
    }

    /// Back-propagates from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let av = self.value(a);
                let bv = self.value(b);
                let op_a = if ta { av.t() } else { av.view() };
                let op_b = if tb { bv.t() } else { bv.view() };
                if self.needs(a) {
                    let d_op_a = g.dot(&op_b.t());
                    let da = if ta { d_op_a.reversed_axes() } else { d_op_a };
                    accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let d_op_b = op_a.t().dot(g);
                    let db = if tb { d_op_b.reversed_axes() } else { d_op_b };
                    accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    accumulate_view(grads, a, g.view());
                }
                if self.needs(b) {
                    accumulate_view(grads, b, g.view());
                }
            }
            &Op::AddRow(a, row) => {
                if self.needs(a) {
                    accumulate_view(grads, a, g.view());
                }
                if self.needs(row) {
                    accumulate(grads, row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            &Op::AddBlocks { a, b, block } => {
                if self.needs(a) {
                    accumulate_view(grads, a, g.view());
                }
                if self.needs(b) {
                    let (bb, n) = self.shape(b);
                    let mut db = Matrix::zeros((bb, n));
                    for (i, chunk) in g.axis_chunks_iter(Axis(0), block).enumerate() {
                        db.row_mut(i).assign(&chunk.sum_axis(Axis(0)));
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Scale(a, f) => accumulate(grads, a, g * f),
            &Op::Silu(a) => {
                let mut da = self.value(a).mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                da *= g;
                accumulate(grads, a, da);
            }
            Op::LayerNorm { a, rstd } => {
                let xhat = &node.value;
                let n = xhat.ncols() as f64;
                let mut da = Matrix::zeros(xhat.dim());
                for (((gr, xr), mut dr), &r) in g
                    .outer_iter()
                    .zip(xhat.outer_iter())
                    .zip(da.outer_iter_mut())
                    .zip(rstd.iter())
                {
                    let mean_g = gr.sum() / n;
                    let mean_gx = gr.dot(&xr) / n;
                    Zip::from(&mut dr)
                        .and(&gr)
                        .and(&xr)
                        .for_each(|d, &gv, &xv| *d = r * (gv - mean_g - xv * mean_gx));
                }
                accumulate(grads, *a, da);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, probs, g, grads),
            Op::Permute { a, idx } => {
                let (m, n) = self.shape(*a);
                let mut flat = vec![0.0; m * n];
                let gs = g.as_standard_layout();
                for (gv, &j) in gs.iter().zip(idx.iter()) {
                    flat[j] += gv;
                }
                accumulate(grads, *a, Matrix::from_shape_vec((m, n), flat).unwrap());
            }
            &Op::ConcatCols(a, b) => {
                let na = self.shape(a).1;
                if self.needs(a) {
                    accumulate_view(grads, a, g.slice(s![.., ..na]));
                }
                if self.needs(b) {
                    accumulate_view(grads, b, g.slice(s![.., na..]));
                }
            }
            Op::GatherRows { src, idx } => {
                let mut ds = Matrix::zeros(self.shape(*src));
                for (i, j) in idx.iter().enumerate() {
                    if let Some(j) = j {
                        let mut r = ds.row_mut(*j);
                        r += &g.row(i);
                    }
                }
                accumulate(grads, *src, ds);
            }
            Op::MeanSquare { a, target } => {
                let count = target.len().max(1) as f64;
                let f = 2.0 * g[[0, 0]] / count;
                let da = (self.value(*a) - target) * f;
                accumulate(grads, *a, da);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target,
            } => {
                let rows = probs.nrows().max(1) as f64;
                let f = g[[0, 0]] / rows;
                // Targets are distributions, so d/dlogits = p * sum(t) - t = p - t.
                let mut d = probs.clone();
                for (mut dr, tr) in d.outer_iter_mut().zip(target.outer_iter()) {
                    let mass = tr.sum();
                    Zip::from(&mut dr).and(&tr).for_each(|dv, &tv| *dv = (*dv * mass - tv) * f);
                }
                accumulate(grads, *logits, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[Matrix],
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let c = qv.ncols();
        let dh = c / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Matrix::zeros(qv.dim());
        let mut dk = Matrix::zeros(kv.dim());
        let mut dv = Matrix::zeros(vv.dim());
        for i in 0..layout.batch() {
            let (q0, q1) = (layout.query_offsets[i], layout.query_offsets[i + 1]);
            let (k0, k1) = (layout.kv_offsets[i], layout.kv_offsets[i + 1]);
            for h in 0..layout.heads {
                let p = &probs[i * layout.heads + h];
                let cols = h * dh..(h + 1) * dh;
                let gs = g.slice(s![q0..q1, cols.clone()]);
                let qs = qv.slice(s![q0..q1, cols.clone()]);
                let ks = kv.slice(s![k0..k1, cols.clone()]);
                let vs = vv.slice(s![k0..k1, cols.clone()]);
                dv.slice_mut(s![k0..k1, cols.clone()]).assign(&p.t().dot(&gs));
                let dp = gs.dot(&vs.t());
                let mut ds = dp;
                for (mut dr, pr) in ds.outer_iter_mut().zip(p.outer_iter()) {
                    let inner = dr.dot(&pr);
                    Zip::from(&mut dr).and(&pr).for_each(|d, &pv| *d = pv * (*d - inner));
                }
                ds *= scale;
                dq.slice_mut(s![q0..q1, cols.clone()]).assign(&ds.dot(&ks));
                dk.slice_mut(s![k0..k1, cols]).assign(&ds.t().dot(&qs));
            }
        }
        if self.needs(q) {
            accumulate(grads, q, dq);
        }
        if self.needs(k) {
            accumulate(grads, k, dk);
        }
        if self.needs(v) {
            accumulate(grads, v, dv);
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_view(grads: &mut [Option<Matrix>], v: Var, g: ArrayView2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g.to_owned()),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// In-place numerically stable softmax over each row.
pub fn softmax_rows(m: &mut Matrix) {
    for mut row in m.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Matrix {
        Matrix::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of `f` around `x`.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut g = Matrix::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    /// Checks d(loss)/d(x) of a graph built by `build` against finite differences.
    fn check(shape: (usize, usize), seed: u64, build: &dyn Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, shape);
        let eval = |m: &Matrix| {
            let mut t = Tape::new();
            let v = t.param(m.clone());
            let out = build(&mut t, v);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let out = build(&mut t, v);
        let grads = t.backward(out);
        let analytic = grads.get(v).unwrap();
        assert_close(analytic, &numeric_grad(&x, &eval), 1e-6);
    }

    #[test]
    fn matmul_values() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.constant(array![[5.0], [6.0]]);
        let c = t.matmul(a, b);
        assert_eq!(t.value(c), &array![[17.0], [39.0]]);
        let d = t.matmul_tn(a, a);
        assert_eq!(t.value(d), &array![[10.0, 14.0], [14.0, 20.0]]);
    }

    #[test]
    fn matmul_grads_all_transpose_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, (3, 4));
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let inner = if tb { 4 } else { 3 };
            let shape = if ta { (inner, 2) } else { (2, inner) };
            let wl = w.clone();
            check(shape, 10, &move |t, x| {
                let c = t.constant(wl.clone());
                let y = t.matmul_t(x, c, ta, tb);
                let y = t.silu(y);
                let target = Matrix::zeros(t.shape(y));
                t.mean_square(y, target)
            });
            // and with respect to the right operand
            let left = random(&mut rng, shape);
            let wshape = w.dim();
            check(wshape, 13, &move |t, wv| {
                let l = t.constant(left.clone());
                let y = t.matmul_t(l, wv, ta, tb);
                let y = t.silu(y);
                let target = Matrix::zeros(t.shape(y));
                t.mean_square(y, target)
            });
        }
    }

    #[test]
    fn elementwise_and_broadcast_grads() {
        check((4, 3), 1, &|t, x| {
            let y = t.silu(x);
            let y = t.scale(y, 1.7);
            let row = t.constant(array![[0.1, -0.2, 0.3]]);
            let y = t.add_row(y, row);
            let blocks = t.constant(array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]);
            let y = t.add_blocks(y, blocks, 2);
            let y = t.add(y, x);
            let y = t.layer_norm(y);
            let target = Matrix::from_elem((4, 3), 0.25);
            t.mean_square(y, target)
        });
        // gradient w.r.t. the broadcast operands
        check((1, 3), 2, &|t, r| {
            let a = t.constant(Matrix::from_shape_fn((4, 3), |(i, j)| (i + 2 * j) as f64 * 0.1));
            let y = t.add_row(a, r);
            let y = t.silu(y);
            t.mean_square(y, Matrix::zeros((4, 3)))
        });
        check((2, 3), 4, &|t, b| {
            let a = t.constant(Matrix::from_shape_fn((6, 3), |(i, j)| (i * j) as f64 * 0.1));
            let y = t.add_blocks(a, b, 3);
            let y = t.silu(y);
            t.mean_square(y, Matrix::zeros((6, 3)))
        });
    }

    #[test]
    fn attention_grads_variable_kv_blocks() {
        let layout = AttentionLayout {
            query_offsets: vec![0, 3, 5].into(),
            kv_offsets: vec![0, 2, 6].into(),
            heads: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let kv = random(&mut rng, (6, 4));
        let qc = random(&mut rng, (5, 4));
        let l = layout.clone();
        let kv2 = kv.clone();
        check((5, 4), 5, &move |t, q| {
            let k = t.constant(kv2.clone());
            let v = t.scale(k, -0.5);
            let y = t.attention(q, k, v, l.clone());
            t.mean_square(y, Matrix::from_elem((5, 4), 0.1))
        });
        let l = layout.clone();
        check((6, 4), 6, &move |t, k| {
            let q = t.constant(qc.clone());
            let v = t.silu(k);
            let y = t.attention(q, k, v, l.clone());
            t.mean_square(y, Matrix::from_elem((5, 4), 0.1))
        });
    }

    #[test]
    fn permute_concat_gather_grads() {
        let idx: Arc<[usize]> = vec![5, 0, 3, 1, 4, 2].into();
        check((2, 3), 8, &move |t, x| {
            let p = t.permute(x, idx.clone(), (3, 2));
            let c = t.concat_cols(p, p);
            let y = t.silu(c);
            t.mean_square(y, Matrix::from_elem((3, 4), 0.2))
        });
        let gidx: Arc<[Option<usize>]> = vec![Some(1), None, Some(1), Some(0)].into();
        check((2, 3), 9, &move |t, x| {
            let y = t.gather_rows(x, gidx.clone());
            let y = t.silu(y);
            t.mean_square(y, Matrix::from_elem((4, 3), -0.3))
        });
    }

    #[test]
    fn cross_entropy_soft_targets() {
        check((3, 4), 12, &|t, x| {
            let target = array![
                [0.0, 1.0, 0.0, 0.0],
                [0.25, 0.25, 0.25, 0.25],
                [0.0, 0.0, 0.0, 1.0]
            ];
            t.softmax_cross_entropy(x, target)
        });
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut t = Tape::new();
        let w = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let x = t.param(array![[0.5, -0.5]]);
        let y = t.matmul(x, w);
        let loss = t.mean_square(y, Matrix::zeros((1, 2)));
        let g = t.backward(loss);
        assert!(g.get(w).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = random(&mut rng, (5, 7)) * 50.0;
        softmax_rows(&mut m);
        for row in m.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0 && p.is_finite()));
        }
    }
}
