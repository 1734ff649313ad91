//! Reverse-mode differentiation over a linear tape.
//!
//! Every value on the tape is viewed as a `rows × cols` matrix. Ops are
//! recorded in evaluation order; [`Tape::backward`] replays them in reverse
//! and leaves the gradient in the adjoint slot of every tracked node.
//!
//! Piecewise ops (relu, clamp, norms at the origin) append to a branch
//! signature. Two evaluations with equal signatures lie on the same smooth
//! piece, which is what the finite-difference checker uses to exclude
//! samples that straddle a kink.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcastRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    SoftmaxRows(Var),
    Log(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        group: usize,
        probs: Vec<f64>,
    },
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    PrependRows {
        x: Var,
        row: Var,
        group: usize,
    },
    L2NormalizeRows(Var),
    RowNorms(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Recording of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    branches: Vec<i8>,
    kink: bool,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides describe in-bounds views of `a` (m×k), `b` (k×n), `c` (m×n, row-major).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn transposed(v: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = v[i * c + j];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    /// Branch decisions taken by piecewise ops during the forward pass.
    pub fn signature(&self) -> &[i8] {
        &self.branches
    }

    /// True if some piecewise op was evaluated exactly on its boundary.
    pub fn at_kink(&self) -> bool {
        self.kink
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of the last `backward` call with respect to `v`, if it
    /// received any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.adjoint()
    }

    /// Softmax weights cached by an attention node, laid out as
    /// `[group][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn mat(rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
        Tensor::from_raw(vec![rows, cols], values)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            value: t.clone(),
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            value: t.clone(),
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor, trainable: bool) -> Var {
        if trainable {
            self.param(t)
        } else {
            self.constant(t)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                m, k, k2, n
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).values(),
            (k as isize, 1),
            self.value(b).values(),
            (n as isize, 1),
            &mut out,
        );
        Ok(self.push(Self::mat(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let da = dims(self.value(a));
        let db = dims(self.value(b));
        if da != db {
            return Err(Error::shape(format!("{what}: {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = dims(self.value(x));
        let out = transposed(self.value(x).values(), r, c);
        self.push(Self::mat(c, r, out), Op::Transpose(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "add")?;
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Self::mat(r, c, out), Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "sub")?;
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Self::mat(r, c, out), Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "mul")?;
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Self::mat(r, c, out), Op::Mul(a, b), &[a, b]))
    }

    /// `x[i] + b[i mod rows(b)]`. Covers bias rows (one row) and per-group
    /// tables such as positional embeddings.
    pub fn add_broadcast_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        let (br, bc) = dims(self.value(b));
        if bc != c || br == 0 || r % br != 0 {
            return Err(Error::shape(format!(
                "broadcast {br}x{bc} rows onto {r}x{c}"
            )));
        }
        let xv = self.value(x).values();
        let bv = self.value(b).values();
        let mut out = xv.to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let brow = &bv[(i % br) * c..(i % br + 1) * c];
            for (o, bb) in row.iter_mut().zip(brow) {
                *o += bb;
            }
        }
        Ok(self.push(Self::mat(r, c, out), Op::AddBroadcastRows(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let (r, c) = dims(self.value(x));
        let out = self.value(x).values().iter().map(|v| v * s).collect();
        self.push(Self::mat(r, c, out), Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let (r, c) = dims(self.value(x));
        let out = self.value(x).values().iter().map(|v| v + s).collect();
        self.push(Self::mat(r, c, out), Op::AddScalar(x), &[x])
    }

    /// Element-wise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let (r, cols) = dims(self.value(x));
        if c.numel() != r * cols {
            return Err(Error::shape("mul_const operand size"));
        }
        let out = self
            .value(x)
            .values()
            .iter()
            .zip(c.values())
            .map(|(a, b)| a * b)
            .collect();
        Ok(self.push(
            Self::mat(r, cols, out),
            Op::MulConst(x, c.values().to_vec()),
            &[x],
        ))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if c == 0 {
            return Err(Error::shape("layer_norm over empty axis"));
        }
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::shape(format!(
                "layer_norm width {} with gain {} and bias {}",
                c,
                self.value(gain).numel(),
                self.value(bias).numel()
            )));
        }
        let xv = self.value(x).values();
        let g = self.value(gain).values();
        let b = self.value(bias).values();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Self::mat(r, c, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = dims(self.value(x));
        let out = self.value(x).values().iter().map(|&v| gelu(v)).collect();
        self.push(Self::mat(r, c, out), Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = dims(self.value(x));
        let xv = self.value(x).values().to_vec();
        for &v in &xv {
            self.branches.push(if v > 0.0 {
                1
            } else if v < 0.0 {
                -1
            } else {
                0
            });
            if v == 0.0 {
                self.kink = true;
            }
        }
        let out = xv.iter().map(|&v| v.max(0.0)).collect();
        self.push(Self::mat(r, c, out), Op::Relu(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (r, c) = dims(self.value(x));
        let xv = self.value(x).values().to_vec();
        for &v in &xv {
            self.branches.push(if v < lo {
                -1
            } else if v > hi {
                1
            } else {
                0
            });
            if v == lo || v == hi {
                self.kink = true;
            }
        }
        let out = xv.iter().map(|&v| v.clamp(lo, hi)).collect();
        self.push(Self::mat(r, c, out), Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = dims(self.value(x));
        let mut out = self.value(x).values().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(Self::mat(r, c, out), Op::SoftmaxRows(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let (r, c) = dims(self.value(x));
        let out = self.value(x).values().iter().map(|v| v.ln()).collect();
        self.push(Self::mat(r, c, out), Op::Log(x), &[x])
    }

    /// Multi-head scaled dot-product attention applied independently to
    /// consecutive blocks of `group` rows. Inputs are `(blocks·group) × d`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        group: usize,
    ) -> Result<Var> {
        let (r, d) = dims(self.value(q));
        if dims(self.value(k)) != (r, d) || dims(self.value(v)) != (r, d) {
            return Err(Error::shape(format!(
                "attention q {:?} k {:?} v {:?}",
                dims(self.value(q)),
                dims(self.value(k)),
                dims(self.value(v))
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!(
                "{heads} heads do not divide width {d}"
            )));
        }
        if group == 0 || r % group != 0 {
            return Err(Error::shape(format!(
                "{r} rows are not a multiple of group length {group}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let blocks = r / group;
        let qv = self.value(q).values();
        let kv = self.value(k).values();
        let vv = self.value(v).values();
        let mut probs = vec![0.0; blocks * heads * group * group];
        let mut out = vec![0.0; r * d];
        let mut scores = vec![0.0; group];
        for g in 0..blocks {
            let base = g * group;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..group {
                    let qi = &qv[(base + i) * d + off..(base + i) * d + off + dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kv[(base + j) * d + off..(base + j) * d + off + dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(&mut scores);
                    let pbase = ((g * heads + h) * group + i) * group;
                    probs[pbase..pbase + group].copy_from_slice(&scores);
                    let orow = &mut out[(base + i) * d + off..(base + i) * d + off + dh];
                    for (j, &p) in scores.iter().enumerate() {
                        let vj = &vv[(base + j) * d + off..(base + j) * d + off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Self::mat(r, d, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                group,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!("row {bad} out of {r}")));
        }
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Self::mat(indices.len(), c, out),
            Op::SelectRows(x, indices.to_vec()),
            &[x],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(Error::shape("concat of nothing")),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = dims(self.value(p));
            if pc != c {
                return Err(Error::shape(format!("concat widths {c} and {pc}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).values());
        }
        Ok(self.push(
            Self::mat(rows, c, out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    /// Insert the single row `row` in front of every block of `group` rows.
    pub fn prepend_rows(&mut self, x: Var, row: Var, group: usize) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if dims(self.value(row)) != (1, c) {
            return Err(Error::shape("prepended row width"));
        }
        if group == 0 || r % group != 0 {
            return Err(Error::shape("prepend group length"));
        }
        let blocks = r / group;
        let xv = self.value(x).values();
        let rv = self.value(row).values();
        let mut out = Vec::with_capacity((r + blocks) * c);
        for g in 0..blocks {
            out.extend_from_slice(rv);
            out.extend_from_slice(&xv[g * group * c..(g + 1) * group * c]);
        }
        Ok(self.push(
            Self::mat(r + blocks, c, out),
            Op::PrependRows { x, row, group },
            &[x, row],
        ))
    }

    /// Divide every row by its Euclidean norm. Rows with norm at or below
    /// `floor` are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var, floor: f64) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        let mut out = self.value(x).values().to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > floor) {
                return Err(Error::Degenerate(format!(
                    "row {i} has norm {n:e}, at or below {floor:e}"
                )));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        Ok(self.push(Self::mat(r, c, out), Op::L2NormalizeRows(x), &[x]))
    }

    /// Euclidean norm of every row, as an `rows × 1` column.
    pub fn row_norms(&mut self, x: Var) -> Var {
        let (r, c) = dims(self.value(x));
        let xv = self.value(x).values();
        let out: Vec<f64> = xv
            .chunks(c.max(1))
            .take(r)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        for &n in &out {
            self.branches.push(if n == 0.0 { 0 } else { 1 });
            if n == 0.0 {
                self.kink = true;
            }
        }
        self.push(Self::mat(r, 1, out), Op::RowNorms(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        self.push(Self::mat(1, 1, vec![s]), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.values().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Self::mat(1, 1, vec![s]), Op::Mean(x), &[x])
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).values()[0]
    }

    /// Reverse sweep from the scalar `loss`. Gradients land in the adjoint
    /// slot of every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_adjoint();
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &dy, &mut grads);
            self.nodes[idx].value.set_adjoint(dy)?;
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if self.nodes[v.0].tracked {
            accumulate(&mut grads[v.0], delta);
        }
    }

    fn backprop_node(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (r, c) = dims(&node.value);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = c;
                if self.is_tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    // dA = dY · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        dy,
                        (n as isize, 1),
                        self.value(*b).values(),
                        (1, n as isize),
                        &mut da,
                    );
                    self.send(grads, *a, da);
                }
                if self.is_tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    // dB = Aᵀ · dY
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).values(),
                        (1, k as isize),
                        dy,
                        (n as isize, 1),
                        &mut db,
                    );
                    self.send(grads, *b, db);
                }
            }
            Op::Transpose(x) => self.send(grads, *x, transposed(dy, r, c)),
            Op::Add(a, b) => {
                self.send(grads, *a, dy.to_vec());
                self.send(grads, *b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, dy.to_vec());
                self.send(grads, *b, dy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                self.send(grads, *a, dy.iter().zip(bv).map(|(g, y)| g * y).collect());
                self.send(grads, *b, dy.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::AddBroadcastRows(x, b) => {
                self.send(grads, *x, dy.to_vec());
                if self.is_tracked(*b) {
                    let br = self.value(*b).rows();
                    let mut db = vec![0.0; br * c];
                    for (i, row) in dy.chunks(c).enumerate() {
                        let dst = &mut db[(i % br) * c..(i % br + 1) * c];
                        for (d, g) in dst.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.send(grads, *b, db);
                }
            }
            Op::Scale(x, s) => {
                self.send(grads, *x, dy.iter().map(|g| g * s).collect());
            }
            Op::AddScalar(x) => self.send(grads, *x, dy.to_vec()),
            Op::MulConst(x, k) => {
                self.send(grads, *x, dy.iter().zip(k).map(|(g, k)| g * k).collect());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let g = self.value(*gain).values();
                if self.is_tracked(*gain) {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += dy[i * c + j] * xhat[i * c + j];
                        }
                    }
                    self.send(grads, *gain, dg);
                }
                if self.is_tracked(*bias) {
                    let mut db = vec![0.0; c];
                    for row in dy.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.send(grads, *bias, db);
                }
                if self.is_tracked(*x) {
                    let mut dx = vec![0.0; r * c];
                    let inv_c = 1.0 / c as f64;
                    for i in 0..r {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            let dh = dy[i * c + j] * g[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[i * c + j];
                        }
                        mean_dh *= inv_c;
                        mean_dh_h *= inv_c;
                        for j in 0..c {
                            let dh = dy[i * c + j] * g[j];
                            dx[i * c + j] =
                                rstd[i] * (dh - mean_dh - xhat[i * c + j] * mean_dh_h);
                        }
                    }
                    self.send(grads, *x, dx);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).values();
                self.send(
                    grads,
                    *x,
                    dy.iter().zip(xv).map(|(g, &v)| g * gelu_grad(v)).collect(),
                );
            }
            Op::Relu(x) => {
                let xv = self.value(*x).values();
                self.send(
                    grads,
                    *x,
                    dy.iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).values();
                self.send(
                    grads,
                    *x,
                    dy.iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > *lo && v < *hi { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.values();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &dy[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::Log(x) => {
                let xv = self.value(*x).values();
                self.send(grads, *x, dy.iter().zip(xv).map(|(g, v)| g / v).collect());
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                group,
                probs,
            } => {
                let d = c;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let blocks = r / group;
                let qv = self.value(*q).values();
                let kv = self.value(*k).values();
                let vv = self.value(*v).values();
                let mut dq = vec![0.0; r * d];
                let mut dk = vec![0.0; r * d];
                let mut dv = vec![0.0; r * d];
                let mut dp = vec![0.0; *group];
                for g in 0..blocks {
                    let base = g * group;
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..*group {
                            let pbase = ((g * heads + h) * group + i) * group;
                            let p = &probs[pbase..pbase + group];
                            let doi = &dy[(base + i) * d + off..(base + i) * d + off + dh];
                            // dV_j += p_ij · dO_i ; dP_ij = dO_i · V_j
                            for j in 0..*group {
                                let vj = &vv[(base + j) * d + off..(base + j) * d + off + dh];
                                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                let dvj = &mut dv[(base + j) * d + off..(base + j) * d + off + dh];
                                for (t, o) in dvj.iter_mut().zip(doi) {
                                    *t += p[j] * o;
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            let qi = &qv[(base + i) * d + off..(base + i) * d + off + dh];
                            for j in 0..*group {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kv[(base + j) * d + off..(base + j) * d + off + dh];
                                let dqi = &mut dq[(base + i) * d + off..(base + i) * d + off + dh];
                                for (t, kk) in dqi.iter_mut().zip(kj) {
                                    *t += ds * kk;
                                }
                                let dkj = &mut dk[(base + j) * d + off..(base + j) * d + off + dh];
                                for (t, qq) in dkj.iter_mut().zip(qi) {
                                    *t += ds * qq;
                                }
                            }
                        }
                    }
                }
                self.send(grads, *q, dq);
                self.send(grads, *k, dk);
                self.send(grads, *v, dv);
            }
            Op::SelectRows(x, indices) => {
                if self.is_tracked(*x) {
                    let xr = self.value(*x).rows();
                    let mut dx = vec![0.0; xr * c];
                    for (o, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            dx[i * c + j] += dy[o * c + j];
                        }
                    }
                    self.send(grads, *x, dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    self.send(grads, *p, dy[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::PrependRows { x, row, group } => {
                let blocks = r / (group + 1);
                let mut dx = Vec::with_capacity(blocks * group * c);
                let mut drow = vec![0.0; c];
                for g in 0..blocks {
                    let start = g * (group + 1) * c;
                    for (d, v) in drow.iter_mut().zip(&dy[start..start + c]) {
                        *d += v;
                    }
                    dx.extend_from_slice(&dy[start + c..start + (group + 1) * c]);
                }
                self.send(grads, *x, dx);
                self.send(grads, *row, drow);
            }
            Op::L2NormalizeRows(x) => {
                let y = node.value.values();
                let xv = self.value(*x).values();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let xr = &xv[i * c..(i + 1) * c];
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &dy[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::RowNorms(x) => {
                let xv = self.value(*x).values();
                let xc = self.value(*x).cols();
                let norms = node.value.values();
                let mut dx = vec![0.0; xv.len()];
                for i in 0..r {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let s = dy[i] / norms[i];
                    for j in 0..xc {
                        dx[i * xc + j] = xv[i * xc + j] * s;
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.send(grads, *x, vec![dy[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.send(grads, *x, vec![dy[0] / n as f64; n]);
            }
        }
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
