use super::kernels::{self, ConvGeometry};
use super::{Mask, Padding, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Public, data-free description of an executed operation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpTag {
    Leaf,
    Add,
    Mul,
    Scale,
    AddBias,
    Relu,
    MatMul,
    TransposeLastTwo,
    Reshape,
    Softmax,
    LayerNorm,
    Conv1d { dilation: usize, padding: Padding },
    DepthwiseConv1d { dilation: usize, padding: Padding },
    Narrow,
    ConcatChannels,
    Embedding,
    AddTiming,
    MaskPositions,
    Sum,
    Mean,
    CrossEntropy,
}

impl OpTag {
    pub fn is_conv(self) -> bool {
        matches!(self, OpTag::Conv1d { .. } | OpTag::DepthwiseConv1d { .. })
    }
}

/// One entry of the executed-operation trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEvent {
    /// Slash-separated scope path active when the node was recorded (empty at root).
    pub scope: String,
    pub tag: OpTag,
}

impl TraceEvent {
    /// True when the event was recorded inside `scope` or one of its children.
    pub fn within(&self, scope: &str) -> bool {
        self.scope == scope || (self.scope.starts_with(scope) && self.scope.as_bytes().get(scope.len()) == Some(&b'/'))
    }
}

#[derive(Debug)]
struct MatMulPlan {
    a: Var,
    b: Var,
    a_t: bool,
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
    /// Matrix index into `a` and `b` for every output batch entry.
    a_index: Vec<usize>,
    b_index: Vec<usize>,
    /// `b` is a single matrix and `a` is not broadcast: one tall gemm suffices.
    flat: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    MatMul(Box<MatMulPlan>),
    TransposeLastTwo(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        geometry: ConvGeometry,
        padding: Padding,
    },
    DepthwiseConv1d {
        x: Var,
        kernel: Var,
        geometry: ConvGeometry,
        padding: Padding,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    ConcatChannels(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    AddTiming(Var),
    MaskPositions {
        x: Var,
        keep: Vec<bool>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        keep: Vec<bool>,
        smoothing: f64,
        probs: Vec<f64>,
        count: usize,
    },
}

impl Op {
    fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::Add(..) => OpTag::Add,
            Op::Mul(..) => OpTag::Mul,
            Op::Scale(..) => OpTag::Scale,
            Op::AddBias(..) => OpTag::AddBias,
            Op::Relu(_) => OpTag::Relu,
            Op::MatMul(_) => OpTag::MatMul,
            Op::TransposeLastTwo(_) => OpTag::TransposeLastTwo,
            Op::Reshape(_) => OpTag::Reshape,
            Op::Softmax(_) => OpTag::Softmax,
            Op::LayerNorm { .. } => OpTag::LayerNorm,
            Op::Conv1d { geometry, padding, .. } => OpTag::Conv1d {
                dilation: geometry.dilation,
                padding: *padding,
            },
            Op::DepthwiseConv1d { geometry, padding, .. } => OpTag::DepthwiseConv1d {
                dilation: geometry.dilation,
                padding: *padding,
            },
            Op::Narrow { .. } => OpTag::Narrow,
            Op::ConcatChannels(_) => OpTag::ConcatChannels,
            Op::Embedding { .. } => OpTag::Embedding,
            Op::AddTiming(_) => OpTag::AddTiming,
            Op::MaskPositions { .. } => OpTag::MaskPositions,
            Op::Sum(_) => OpTag::Sum,
            Op::Mean(_) => OpTag::Mean,
            Op::CrossEntropy { .. } => OpTag::CrossEntropy,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    scope: usize,
}

/// Append-only record of executed operations.
///
/// Nodes are stored in execution order, so the vector is already a
/// topological order; [`Graph::backward`] walks it in reverse exactly once.
/// A graph is used by one thread at a time; independent graphs may live on
/// different threads.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    scopes: Vec<String>,
    scope_stack: Vec<usize>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scopes: vec![String::new()],
            scope_stack: vec![0],
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- scopes and trace ------------------------------------------------

    pub fn push_scope(&mut self, name: &str) {
        let parent = &self.scopes[*self.scope_stack.last().unwrap()];
        let path = if parent.is_empty() {
            name.to_string()
        } else {
            format!("{parent}/{name}")
        };
        let id = match self.scopes.iter().position(|s| *s == path) {
            Some(id) => id,
            None => {
                self.scopes.push(path);
                self.scopes.len() - 1
            }
        };
        self.scope_stack.push(id);
    }

    pub fn pop_scope(&mut self) {
        if self.scope_stack.len() > 1 {
            self.scope_stack.pop();
        }
    }

    /// Runs `f` with `name` appended to the scope path.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push_scope(name);
        let out = f(self);
        self.pop_scope();
        out
    }

    pub fn trace(&self) -> Vec<TraceEvent> {
        self.nodes
            .iter()
            .map(|n| TraceEvent {
                scope: self.scopes[n.scope].clone(),
                tag: n.op.tag(),
            })
            .collect()
    }

    /// Sign pattern (`> 0`) of every relu input, in execution order.
    pub fn relu_signs(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    // ---- node access -----------------------------------------------------

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scope: *self.scope_stack.last().unwrap(),
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Inserts a leaf. Gradients are retained for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Gradient of the last backward pass for a leaf, if it received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Scale(x, factor), rg))
    }

    /// `x[.., d] + bias[d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tx.last_dim() != tb.numel() || tx.rank() == 0 {
            return Err(mismatch("add_bias", tx.shape(), tb.shape()));
        }
        let d = tb.numel();
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    // ---- matrix products --------------------------------------------------

    /// Batched `a · b` over the last two axes; leading axes broadcast from 1.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, false)
    }

    /// Batched `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, true)
    }

    fn matmul_general(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if a_t { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if b_t { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let rank = ba.len().max(bb.len());
        let dim = |s: &[usize], i: usize| -> usize {
            let pad = rank - s.len();
            if i < pad {
                1
            } else {
                s[i - pad]
            }
        };
        let mut out_batch = Vec::with_capacity(rank);
        for i in 0..rank {
            let (da, db) = (dim(ba, i), dim(bb, i));
            if da != db && da != 1 && db != 1 {
                return Err(mismatch("matmul", &sa, &sb));
            }
            out_batch.push(da.max(db));
        }
        let strides = |s: &[usize]| -> Vec<usize> {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                let d = dim(s, i);
                st[i] = if d == 1 { 0 } else { acc };
                acc *= d;
            }
            st
        };
        let (st_a, st_b) = (strides(ba), strides(bb));
        let batch: usize = out_batch.iter().product();
        let mut a_index = Vec::with_capacity(batch);
        let mut b_index = Vec::with_capacity(batch);
        for lin in 0..batch {
            let (mut rem, mut ia, mut ib) = (lin, 0, 0);
            for i in (0..rank).rev() {
                let ix = rem % out_batch[i];
                rem /= out_batch[i];
                ia += ix * st_a[i];
                ib += ix * st_b[i];
            }
            a_index.push(ia);
            b_index.push(ib);
        }
        let a_count: usize = ba.iter().product();
        let b_count: usize = bb.iter().product();
        let flat = !a_t && b_count == 1 && a_count == batch;

        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            if flat {
                kernels::gemm(batch * m, k, n, da, false, db, b_t, &mut out, false);
            } else {
                for i in 0..batch {
                    kernels::gemm(
                        m,
                        k,
                        n,
                        &da[a_index[i] * m * k..],
                        a_t,
                        &db[b_index[i] * k * n..],
                        b_t,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let mut shape = out_batch;
        shape.extend([m, n]);
        let plan = MatMulPlan {
            a,
            b,
            a_t,
            b_t,
            m,
            k,
            n,
            a_index,
            b_index,
            flat,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(Box::new(plan)), rg))
    }

    pub fn transpose_last_two(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(mismatch("transpose_last_two", t.shape(), &[]));
        }
        let r = t.rank();
        let (rows, cols) = (t.shape()[r - 2], t.shape()[r - 1]);
        let mut shape = t.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let mut data = vec![0.0; t.numel()];
        for (src, dst) in t
            .data()
            .chunks_exact(rows * cols)
            .zip(data.chunks_exact_mut(rows * cols))
        {
            for i in 0..rows {
                for j in 0..cols {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::TransposeLastTwo(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ---- normalization ----------------------------------------------------

    /// Softmax over the last axis. Entries where `mask` is false get exactly
    /// zero probability; a row with no admissible entry is an error.
    pub fn softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let t = self.value(x);
        if let Some(m) = mask {
            if m.shape() != t.shape() {
                return Err(mismatch("softmax", t.shape(), m.shape()));
            }
        }
        let mut out = vec![0.0; t.numel()];
        kernels::softmax_rows(t.data(), t.last_dim(), mask.map(|m| m.data()), &mut out)
            .map_err(|row| Error::FullyMasked { row })?;
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Per-vector normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tx.rank() == 0 || tg.shape() != [d] || tb.shape() != [d] {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / d.max(1);
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let xr = &tx.data()[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (xr[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- convolution ------------------------------------------------------

    fn conv_geometry(
        &self,
        op: &'static str,
        x: Var,
        taps: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<ConvGeometry> {
        let sx = self.shape(x);
        if sx.len() != 3 || taps == 0 || dilation == 0 {
            return Err(mismatch(op, sx, &[taps, dilation]));
        }
        Ok(ConvGeometry {
            batch: sx[0],
            len: sx[1],
            taps,
            dilation,
            left: padding.left(taps, dilation),
        })
    }

    /// Length-preserving dense convolution `x[b,n,cin] * kernel[k,cin,cout]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, dilation: usize, padding: Padding) -> Result<Var> {
        let sk = self.shape(kernel).to_vec();
        let sx = self.shape(x).to_vec();
        if sk.len() != 3 || sx.len() != 3 || sx[2] != sk[1] {
            return Err(mismatch("conv1d", &sx, &sk));
        }
        let geometry = self.conv_geometry("conv1d", x, sk[0], dilation, padding)?;
        let (cin, cout) = (sk[1], sk[2]);
        let mut out = vec![0.0; sx[0] * sx[1] * cout];
        kernels::conv1d(
            geometry,
            cin,
            cout,
            self.value(x).data(),
            self.value(kernel).data(),
            &mut out,
        );
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(
            Tensor::new(vec![sx[0], sx[1], cout], out)?,
            Op::Conv1d {
                x,
                kernel,
                geometry,
                padding,
            },
            rg,
        ))
    }

    /// Per-channel convolution `x[b,n,c] * kernel[k,c]`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, dilation: usize, padding: Padding) -> Result<Var> {
        let sk = self.shape(kernel).to_vec();
        let sx = self.shape(x).to_vec();
        if sk.len() != 2 || sx.len() != 3 || sx[2] != sk[1] {
            return Err(mismatch("depthwise_conv1d", &sx, &sk));
        }
        let geometry = self.conv_geometry("depthwise_conv1d", x, sk[0], dilation, padding)?;
        let mut out = vec![0.0; sx.iter().product()];
        kernels::depthwise_conv1d(
            geometry,
            sk[1],
            self.value(x).data(),
            self.value(kernel).data(),
            &mut out,
        );
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::DepthwiseConv1d {
                x,
                kernel,
                geometry,
                padding,
            },
            rg,
        ))
    }

    // ---- layout -----------------------------------------------------------

    /// Entries `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(mismatch("narrow", t.shape(), &[axis, start, len]));
        }
        let extent = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let outer: usize = t.shape()[..axis].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank == 0 {
            return Err(mismatch("slice_channels", &[], &[start, len]));
        }
        self.narrow(x, rank - 1, start, len)
    }

    /// Partitions the last axis into `parts` equal contiguous segments.
    pub fn split_channels(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let d = self.value(x).last_dim();
        if parts == 0 || !d.is_multiple_of(parts) {
            return Err(mismatch("split_channels", self.shape(x), &[parts]));
        }
        let w = d / parts;
        (0..parts).map(|p| self.slice_channels(x, p * w, w)).collect()
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_channels"))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat_channels", self.shape(first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatChannels(parts.to_vec()), rg))
    }

    /// Gathers rows of `table[V, d]`; the output has shape `ids_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(mismatch("embedding", t.shape(), ids_shape));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    bound: vocab,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Adds rows `0..n` of a fixed timing table `[max_len, d]` to `x[.., n, d]`.
    pub fn add_timing(&mut self, x: Var, table: &Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 || table.rank() != 2 || table.shape()[1] != t.last_dim() {
            return Err(mismatch("add_timing", t.shape(), table.shape()));
        }
        let (n, d) = (t.shape()[t.rank() - 2], t.last_dim());
        if n > table.shape()[0] {
            return Err(Error::SequenceTooLong {
                len: n,
                max: table.shape()[0],
            });
        }
        let mut data = t.data().to_vec();
        if n * d > 0 {
            for block in data.chunks_exact_mut(n * d) {
                for (v, p) in block.iter_mut().zip(&table.data()[..n * d]) {
                    *v += p;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AddTiming(x), rg))
    }

    /// Zeroes every feature vector whose position is false in `mask`
    /// (`mask` covers all axes but the last).
    pub fn mask_positions(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || mask.shape() != &t.shape()[..t.rank() - 1] {
            return Err(mismatch("mask_positions", t.shape(), mask.shape()));
        }
        let d = t.last_dim();
        let mut data = t.data().to_vec();
        if d > 0 {
            for (row, &keep) in data.chunks_exact_mut(d).zip(mask.data()) {
                if !keep {
                    row.fill(0.0);
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::MaskPositions {
                x,
                keep: mask.data().to_vec(),
            },
            rg,
        ))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Empty("mean"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Mean token cross-entropy over positions where `mask` is true.
    ///
    /// With smoothing `s`, the target distribution puts `1 − s` on the
    /// target and `s / (V − 1)` on every other id.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &Mask, smoothing: f64) -> Result<Var> {
        let t = self.value(logits);
        let vocab = t.last_dim();
        let rows = t.numel().checked_div(vocab).unwrap_or(0);
        if t.rank() == 0 || targets.len() != rows || mask.data().len() != rows {
            return Err(mismatch(
                "cross_entropy",
                t.shape(),
                &[targets.len(), mask.data().len()],
            ));
        }
        let count = mask.count();
        if count == 0 {
            return Err(Error::Empty("cross_entropy: every position is padding"));
        }
        let off = if vocab > 1 { smoothing / (vocab - 1) as f64 } else { 0.0 };
        let mut probs = vec![0.0; t.numel()];
        let mut total = 0.0;
        for r in 0..rows {
            let target = targets[r];
            if target >= vocab {
                return Err(Error::IndexOutOfRange {
                    index: target,
                    bound: vocab,
                });
            }
            let xr = t.row(r);
            let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + xr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (p, &v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(xr) {
                *p = (v - lse).exp();
            }
            if !mask.get(r) {
                continue;
            }
            let mut row_loss = 0.0;
            for (j, &v) in xr.iter().enumerate() {
                let q = if j == target { 1.0 - smoothing } else { off };
                if q != 0.0 {
                    row_loss -= q * (v - lse);
                }
            }
            total += row_loss;
        }
        let out = Tensor::scalar(total / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                keep: mask.data().to_vec(),
                smoothing,
                probs,
                count,
            },
            rg,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients accumulate by addition in reverse insertion order, so two
    /// sweeps over identically built graphs are bit-identical. Afterwards
    /// [`Graph::grad`] returns the gradient of every leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.node(loss).requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
        }
        // Only leaves survive the sweep (non-leaf slots were taken above).
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Hands out one gradient buffer at a time; only leaves and nodes that
        // require gradients get a buffer.
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:expr) => {
                if let Some($g) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, |g| add_into(g, gy));
                with_grad!(*b, |g| add_into(g, gy));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                with_grad!(*a, |g| for ((gv, &d), &o) in g.iter_mut().zip(gy).zip(vb) {
                    *gv += d * o;
                });
                with_grad!(*b, |g| for ((gv, &d), &o) in g.iter_mut().zip(gy).zip(va) {
                    *gv += d * o;
                });
            }
            Op::Scale(x, f) => {
                with_grad!(*x, |g| for (gv, &d) in g.iter_mut().zip(gy) {
                    *gv += d * f;
                });
            }
            Op::AddBias(x, b) => {
                with_grad!(*x, |g| add_into(g, gy));
                with_grad!(*b, |g| {
                    let d = g.len();
                    for row in gy.chunks_exact(d) {
                        add_into(g, row);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                with_grad!(*x, |g| for ((gv, &d), &xv) in g.iter_mut().zip(gy).zip(vx) {
                    if xv > 0.0 {
                        *gv += d;
                    }
                });
            }
            Op::MatMul(p) => {
                let (va, vb) = (val(p.a), val(p.b));
                let (m, k, n) = (p.m, p.k, p.n);
                with_grad!(p.a, |g| {
                    if p.flat {
                        let rows = p.a_index.len() * m;
                        kernels::gemm(rows, n, k, gy, false, vb, !p.b_t, g, true);
                    } else {
                        for (i, (&ia, &ib)) in p.a_index.iter().zip(&p.b_index).enumerate() {
                            let dc = &gy[i * m * n..(i + 1) * m * n];
                            let bm = &vb[ib * k * n..(ib + 1) * k * n];
                            let ga = &mut g[ia * m * k..(ia + 1) * m * k];
                            if p.a_t {
                                kernels::gemm(k, n, m, bm, p.b_t, dc, true, ga, true);
                            } else {
                                kernels::gemm(m, n, k, dc, false, bm, !p.b_t, ga, true);
                            }
                        }
                    }
                });
                with_grad!(p.b, |g| {
                    if p.flat {
                        let rows = p.a_index.len() * m;
                        if p.b_t {
                            kernels::gemm(n, rows, k, gy, true, va, false, g, true);
                        } else {
                            kernels::gemm(k, rows, n, va, true, gy, false, g, true);
                        }
                    } else {
                        for (i, (&ia, &ib)) in p.a_index.iter().zip(&p.b_index).enumerate() {
                            let dc = &gy[i * m * n..(i + 1) * m * n];
                            let am = &va[ia * m * k..(ia + 1) * m * k];
                            let gb = &mut g[ib * k * n..(ib + 1) * k * n];
                            if p.b_t {
                                kernels::gemm(n, m, k, dc, true, am, p.a_t, gb, true);
                            } else {
                                kernels::gemm(k, m, n, am, !p.a_t, dc, false, gb, true);
                            }
                        }
                    }
                });
            }
            Op::TransposeLastTwo(x) => {
                let s = nodes[x.0].value.shape();
                let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
                with_grad!(*x, |g| {
                    for (src, dst) in gy.chunks_exact(rows * cols).zip(g.chunks_exact_mut(rows * cols)) {
                        for i in 0..rows {
                            for j in 0..cols {
                                dst[i * cols + j] += src[j * rows + i];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |g| add_into(g, gy));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = node.value.last_dim();
                with_grad!(*x, |g| kernels::softmax_rows_backward(y, gy, cols, g));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let vg = val(*gain);
                with_grad!(*x, |g| {
                    let mut dxhat = vec![0.0; d];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gyr = &gy[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gyr[j] * vg[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            g[r * d + j] += inv * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
                with_grad!(
                    *gain,
                    |g| for (gyr, hr) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            g[j] += gyr[j] * hr[j];
                        }
                    }
                );
                with_grad!(*bias, |g| for gyr in gy.chunks_exact(d) {
                    add_into(g, gyr);
                });
            }
            Op::Conv1d {
                x, kernel, geometry, ..
            } => {
                let sk = nodes[kernel.0].value.shape();
                let (cin, cout) = (sk[1], sk[2]);
                let (vx, vk) = (val(*x), val(*kernel));
                with_grad!(*x, |g| kernels::conv1d_backward(
                    *geometry,
                    cin,
                    cout,
                    vx,
                    vk,
                    gy,
                    Some(g),
                    None
                ));
                with_grad!(*kernel, |g| kernels::conv1d_backward(
                    *geometry,
                    cin,
                    cout,
                    vx,
                    vk,
                    gy,
                    None,
                    Some(g)
                ));
            }
            Op::DepthwiseConv1d {
                x, kernel, geometry, ..
            } => {
                let c = nodes[kernel.0].value.shape()[1];
                let (vx, vk) = (val(*x), val(*kernel));
                with_grad!(*x, |g| kernels::depthwise_conv1d_backward(
                    *geometry,
                    c,
                    vx,
                    vk,
                    gy,
                    Some(g),
                    None
                ));
                with_grad!(*kernel, |g| kernels::depthwise_conv1d_backward(
                    *geometry,
                    c,
                    vx,
                    vk,
                    gy,
                    None,
                    Some(g)
                ));
            }
            Op::Narrow { x, axis, start } => {
                let sx = nodes[x.0].value.shape();
                let extent = sx[*axis];
                let inner: usize = sx[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                if len * inner == 0 {
                    return;
                }
                with_grad!(*x, |g| for (o, src) in gy.chunks_exact(len * inner).enumerate() {
                    let base = (o * extent + start) * inner;
                    add_into(&mut g[base..base + len * inner], src);
                });
            }
            Op::ConcatChannels(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.last_dim();
                    with_grad!(
                        p,
                        |g| for (dst, src) in g.chunks_exact_mut(w).zip(gy.chunks_exact(total)) {
                            add_into(dst, &src[offset..offset + w]);
                        }
                    );
                    offset += w;
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.last_dim();
                with_grad!(*table, |g| for (row, &id) in gy.chunks_exact(d).zip(ids) {
                    add_into(&mut g[id * d..(id + 1) * d], row);
                });
            }
            Op::AddTiming(x) => {
                with_grad!(*x, |g| add_into(g, gy));
            }
            Op::MaskPositions { x, keep } => {
                let d = node.value.last_dim();
                with_grad!(
                    *x,
                    |g| for ((dst, src), &k) in g.chunks_exact_mut(d).zip(gy.chunks_exact(d)).zip(keep) {
                        if k {
                            add_into(dst, src);
                        }
                    }
                );
            }
            Op::Sum(x) => {
                let s = gy[0];
                with_grad!(*x, |g| for gv in g.iter_mut() {
                    *gv += s;
                });
            }
            Op::Mean(x) => {
                let s = gy[0] / nodes[x.0].value.numel() as f64;
                with_grad!(*x, |g| for gv in g.iter_mut() {
                    *gv += s;
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                keep,
                smoothing,
                probs,
                count,
            } => {
                let vocab = nodes[logits.0].value.last_dim();
                let off = if vocab > 1 { smoothing / (vocab - 1) as f64 } else { 0.0 };
                let s = gy[0] / *count as f64;
                with_grad!(*logits, |g| {
                    for (r, (&target, &k)) in targets.iter().zip(keep).enumerate() {
                        if !k {
                            continue;
                        }
                        for j in 0..vocab {
                            let q = if j == target { 1.0 - smoothing } else { off };
                            g[r * vocab + j] += s * (probs[r * vocab + j] - q);
                        }
                    }
                });
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_oracle() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(Tensor::identity(2));
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let ai = g.matmul(a, i).unwrap();
        assert_eq!(g.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
        let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let ones = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let zz = g.matmul(z, ones).unwrap();
        assert_eq!(g.value(zz).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_leading_axes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[1, 2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, None).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[5.0, 99.0]));
        let m = Mask::new(vec![2], vec![true, false]).unwrap();
        let y = g.softmax(x, Some(&m)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
        let x = g.constant(t(&[2], &[2f64.ln(), 0.0]));
        let y = g.softmax(x, None).unwrap();
        assert!((g.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_fully_masked_row_is_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 2]));
        let m = Mask::new(vec![2, 2], vec![true, true, false, false]).unwrap();
        assert!(matches!(g.softmax(x, Some(&m)), Err(Error::FullyMasked { row: 1 })));
    }

    #[test]
    fn conv1d_hand_oracles() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3, 1], &[1.0, 2.0, 3.0]));
        let k = g.constant(t(&[2, 1, 1], &[1.0, 1.0]));
        let y = g.conv1d(x, k, 1, Padding::Causal).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 3.0, 5.0]);

        let x = g.constant(t(&[1, 5, 1], &[1.0, 0.0, 0.0, 0.0, 0.0]));
        let y = g.conv1d(x, k, 2, Padding::Causal).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn conv1d_width_one_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 - 4.0).collect();
        let x = g.constant(t(&[2, 3, 2], &data));
        let k = g.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        for dil in [1, 2, 5] {
            for pad in [Padding::Causal, Padding::Symmetric] {
                let y = g.conv1d(x, k, dil, pad).unwrap();
                assert_eq!(g.value(y).data(), &data[..]);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 3.0]));
        let one = g.constant(Tensor::full(vec![2], 1.0));
        let zero = g.constant(Tensor::zeros(vec![2]));
        let y = g.layer_norm(x, one, zero, 1e-6).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5);

        let c = g.constant(Tensor::full(vec![4], 7.5));
        let one4 = g.constant(Tensor::full(vec![4], 1.0));
        let zero4 = g.constant(Tensor::zeros(vec![4]));
        let y = g.layer_norm(c, one4, zero4, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-2));

        let gain0 = g.constant(Tensor::zeros(vec![2]));
        let bias = g.constant(t(&[2], &[0.25, -4.0]));
        let y = g.layer_norm(x, gain0, bias, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -4.0]);
    }

    #[test]
    fn relu_split_concat_embedding() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        for h in [1, 2, 4] {
            let parts = g.split_channels(x, h).unwrap();
            let back = g.concat_channels(&parts).unwrap();
            assert_eq!(g.value(back), g.value(x));
        }
        assert!(g.split_channels(x, 3).is_err());

        let table = g.constant(t(&[2, 1], &[9.0, 7.0]));
        let e = g.embedding(table, &[1, 0], &[2]).unwrap();
        assert_eq!(g.shape(e), &[2, 1]);
        assert_eq!(g.value(e).data(), &[7.0, 9.0]);
        assert!(matches!(
            g.embedding(table, &[2], &[1]),
            Err(Error::IndexOutOfRange { index: 2, bound: 2 })
        ));
    }

    #[test]
    fn backward_square_and_detached() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let c = g.constant(t(&[1], &[2.0]));
        let xx = g.mul(x, x).unwrap();
        let xc = g.mul(xx, c).unwrap();
        let both = g.add(xx, xc).unwrap();
        let loss = g.sum(both).unwrap();
        g.backward(loss).unwrap();
        // d/dx (x² + 2x²) = 6x = 18
        assert_eq!(g.grad(x).unwrap().data(), &[18.0]);
        assert!(g.grad(c).is_none());

        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let xx = g.mul(x, x).unwrap();
        let loss = g.sum(xx).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![3, 4]));
        let m = Mask::all(vec![3]);
        let l = g.cross_entropy(logits, &[0, 1, 3], &m, 0.0).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

        let none = Mask::new(vec![3], vec![false; 3]).unwrap();
        assert!(g.cross_entropy(logits, &[0, 1, 3], &none, 0.0).is_err());
    }

    #[test]
    fn scopes_nest_in_trace() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1]));
        g.scoped("encoder", |g| {
            g.scoped("layer0", |g| g.relu(x).unwrap());
        });
        let trace = g.trace();
        assert_eq!(trace[0].scope, "");
        assert_eq!(trace[1].scope, "encoder/layer0");
        assert!(trace[1].within("encoder"));
        assert!(!trace[1].within("enc"));
    }
}
