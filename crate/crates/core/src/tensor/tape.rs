use super::{gemm, shape_err, Tensor, TensorError};

/// Tanh-approximation GELU constant, `sqrt(2 / pi)` rounded to 10 digits.
pub const GELU_C: f64 = 0.797_884_560_8;
const GELU_A: f64 = 0.044_715;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { x: Var, bias: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Softmax(Var),
    Gather { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation. Nodes are stored in creation
/// order, which is a topological order because inputs must already exist.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    /// Drops every recorded node; previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        self.value(v).dims2().map_err(|_| {
            shape_err(op, format!("expected a matrix, got {:?}", self.value(v).shape()))
        })
    }

    /// `a · b` for `a: [m,k]`, `b: [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a, "matmul")?;
        let (br, bc) = self.dims(b, "matmul")?;
        let (kb, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("[{m},{k}] x {:?}{}", self.value(b).shape(), if b_t { "ᵀ" } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), b_t, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, b_t }, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64, name: &'static str) -> Result<Var, TensorError> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * s).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("scale keeps shape");
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// Adds a `[d]` (or `[1,d]`) row to every row of `x: [n,d]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (n, d) = self.dims(x, "add_row")?;
        if self.value(bias).numel() != d {
            return Err(shape_err(
                "add_row",
                format!("bias {:?} for rows of width {d}", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(value, Op::AddRow { x, bias }, &[x, bias]))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (n, d) = self.dims(x, "layer_norm")?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(shape_err("layer_norm", format!("affine width must be {d}")));
        }
        if !(eps > 0.0) {
            return Err(shape_err("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + bt[c];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Tanh-approximation GELU, `0.5·x·(1 + tanh(GELU_C·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("gelu keeps shape");
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Max-subtracted softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, d) = self.dims(x, "softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            let inv = 1.0 / s;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        debug_assert_eq!(value.numel(), n * d);
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Rows of `x` in `idx` order; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (n, d) = self.dims(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(shape_err("gather_rows", "empty index list"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(TensorError::Index { index: i, len: n });
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push(value, Op::Gather { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let d = self.dims(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p, "concat_rows")?;
            if c != d {
                return Err(shape_err("concat_rows", format!("width {c} vs {d}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let n = self.dims(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != n {
                return Err(shape_err("concat_cols", format!("rows {r} vs {n}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![n, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of `x: [n,d]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (n, d) = self.dims(x, "slice_cols")?;
        if len == 0 || start + len > d {
            return Err(shape_err("slice_cols", format!("{start}+{len} of width {d}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let value = Tensor::new(vec![n, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean softmax cross-entropy of `logits: [n,c]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (n, c) = self.dims(logits, "cross_entropy")?;
        if labels.len() != n {
            return Err(shape_err("cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_exact_mut(c).zip(labels) {
            if y >= c {
                return Err(TensorError::Index { index: y, len: c });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
            loss -= row[y].ln();
        }
        let value = Tensor::scalar(loss / n as f64);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Reverse pass from a scalar `loss`. The tape is left intact.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::InvalidLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) if node.requires_grad => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = node.value.shape()[1];
                if needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, self.value(*b).data(), !*b_t, 1.0, ga);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, k * n);
                    if *b_t {
                        // B is [n,k]: dB = dCᵀ · A
                        gemm(n, m, k, g, true, self.value(*a).data(), false, 1.0, gb);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, self.value(*a).data(), true, g, false, 1.0, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if needs(v) {
                        axpy(slot(grads, v, g.len()), sign, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if needs(v) {
                        axpy(slot(grads, v, g.len()), sign, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    for ((o, &gi), &y) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(vb) {
                        *o += gi * y;
                    }
                }
                if needs(*b) {
                    for ((o, &gi), &x) in slot(grads, *b, g.len()).iter_mut().zip(g).zip(va) {
                        *o += gi * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if needs(*a) {
                    axpy(slot(grads, *a, g.len()), *s, g);
                }
            }
            Op::AddRow { x, bias } => {
                if needs(*x) {
                    axpy(slot(grads, *x, g.len()), 1.0, g);
                }
                if needs(*bias) {
                    let d = self.value(*bias).numel();
                    let gb = slot(grads, *bias, d);
                    for row in g.chunks_exact(d) {
                        axpy(gb, 1.0, row);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                let gv = self.value(*gamma).data();
                if needs(*gamma) {
                    let gg = slot(grads, *gamma, d);
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for c in 0..d {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if needs(*beta) {
                    let gb = slot(grads, *beta, d);
                    for row in g.chunks_exact(d) {
                        axpy(gb, 1.0, row);
                    }
                }
                if needs(*x) {
                    let gx = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..d {
                            dxhat[c] = grow[c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dh += dxhat[c] * hrow[c];
                        }
                        mean_d /= d as f64;
                        mean_dh /= d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for c in 0..d {
                            out[c] += rstd[r] * (dxhat[c] - mean_d - hrow[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if needs(*x) {
                    let xs = self.value(*x).data();
                    for ((o, &gi), &v) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(xs) {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *o += gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                }
            }
            Op::Softmax(x) => {
                if needs(*x) {
                    let d = *node.value.shape().last().unwrap();
                    let y = node.value.data();
                    let gx = slot(grads, *x, g.len());
                    for ((grow, yrow), orow) in g.chunks_exact(d).zip(y.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            orow[c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                if needs(*x) {
                    let d = node.value.shape()[1];
                    let gx = slot(grads, *x, self.value(*x).numel());
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut gx[i * d..(i + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if needs(p) {
                        axpy(slot(grads, p, len), 1.0, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let (n, w) = self.value(p).dims2().unwrap();
                    if needs(p) {
                        let gp = slot(grads, p, n * w);
                        for r in 0..n {
                            axpy(&mut gp[r * w..(r + 1) * w], 1.0, &g[r * total + col..r * total + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::SliceCols { x, start } => {
                if needs(*x) {
                    let (n, d) = self.value(*x).dims2().unwrap();
                    let w = node.value.shape()[1];
                    let gx = slot(grads, *x, n * d);
                    for r in 0..n {
                        axpy(&mut gx[r * d + start..r * d + start + w], 1.0, &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    axpy(slot(grads, *x, g.len()), 1.0, g);
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    for o in slot(grads, *x, self.value(*x).numel()).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if needs(*logits) {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let s = g[0] / n as f64;
                    let gl = slot(grads, *logits, probs.len());
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let b = tape.leaf(t(&[2, 1], &[1.0, 1.0]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        assert_eq!(tape.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_identity() {
        let x = Tensor::construct(&[2, 3], Init::Uniform { lo: -1.0, hi: 1.0, seed: 1 }).unwrap();
        let mut tape = Tape::new();
        let i = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let xv = tape.leaf(x.clone(), false);
        let y = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn matmul_dim_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape { .. })));
        assert!(tape.matmul_nt(a, b).is_ok());
    }

    #[test]
    fn add_zeros_is_identity_and_shape_mismatch_errors() {
        let x = Tensor::construct(&[3, 2], Init::Gaussian { mean: 0.0, std: 1.0, seed: 4 }).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let z = tape.leaf(Tensor::zeros(&[3, 2]), false);
        let y = tape.add(xv, z).unwrap();
        assert_eq!(tape.value(y), &x);
        let w = tape.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(tape.add(xv, w).is_err());
        assert!(tape.mul(xv, w).is_err());
    }

    #[test]
    fn scale_by_zero_annihilates_value_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]), true);
        let y = tape.scale(x, 0.0);
        assert_eq!(tape.value(y).data(), &[0.0; 3]);
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn sum_and_quadratic_gradients() {
        let data = [0.5, -1.0, 2.0, 3.5];
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &data), true);
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &data), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let l = tape.scale(s, 0.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &data);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert_eq!(tape.backward(x).unwrap_err(), TensorError::InvalidLoss(vec![2]));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 4], &[3.0; 4]), false);
        let g = tape.leaf(t(&[4], &[1.0; 4]), false);
        let b = tape.leaf(Tensor::zeros(&[4]), false);
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        // The eps term shrinks the variance by var / (var + eps), so a wide
        // input range keeps that shrink under 1e-9.
        let x = Tensor::construct(&[5, 16], Init::Uniform { lo: -100.0, hi: 100.0, seed: 2 }).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let g = tape.leaf(Tensor::construct(&[16], Init::Constant(1.0)).unwrap(), false);
        let b = tape.leaf(Tensor::zeros(&[16]), false);
        let y = tape.layer_norm(xv, g, b, 1e-6).unwrap();
        for r in 0..5 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "var {var}");
        }
    }

    #[test]
    fn gelu_reference_points() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.0, 10.0, -10.0]), false);
        let y = tape.gelu(x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-6);
        assert!(v[2].abs() < 1e-6);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 4], &[2.0, 2.0, 2.0, 2.0, 1000.0, 0.0, 0.0, 0.0]), false);
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).data();
        assert!(v[..4].iter().all(|&p| p == 0.25));
        assert_eq!(v[4], 1.0);
        assert!(v[5..].iter().all(|p| p.is_finite() && *p >= 0.0 && *p < 1e-300));
    }

    #[test]
    fn gather_rows_selects_and_scatters() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]), true);
        let y = tape.gather_rows(x, &[2, 0]).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 5.0, 0.0, 1.0]);
        let all = tape.gather_rows(x, &[0, 1, 2]).unwrap();
        assert_eq!(tape.value(all), tape.value(x));

        let rep = tape.gather_rows(x, &[1, 1]).unwrap();
        let l = tape.sum(rep);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 2]), true);
        assert_eq!(
            tape.gather_rows(x, &[0, 3]).unwrap_err(),
            TensorError::Index { index: 3, len: 3 }
        );
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 1], &[1.0, 2.0]), false);
        let b = tape.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]), false);
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = tape.slice_cols(c, 1, 2).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
        let r = tape.concat_rows(&[b, b]).unwrap();
        assert_eq!(tape.value(r).shape(), &[4, 2]);
    }

    #[test]
    fn leaves_without_grad_get_none() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.leaf(t(&[2], &[3.0, 4.0]), false);
        let y = tape.mul(x, c).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }
}
