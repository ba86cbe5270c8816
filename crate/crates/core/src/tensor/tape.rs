use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, matmul_into};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Multi-head scaled dot-product attention over `(batch * seq, heads * head_dim)` rows.
#[derive(Clone, Debug, Default)]
pub struct AttentionSpec<'a> {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
    /// `false` marks key positions (pads, occluded memory) that may not be attended.
    pub key_mask: Option<&'a [bool]>,
    /// Dropout on the attention probabilities: `(p, seed)`.
    pub dropout: Option<(f64, u64)>,
}

/// Sequence-dimension convolution of the masked mixer.
///
/// Weights are shaped `(heads, n, n, kernel)` with `n >= seq`; only the
/// leading `seq x seq` block is used. With `kernel > 1` each output feature
/// also mixes `kernel` adjacent features of the same head.
#[derive(Clone, Debug, Default)]
pub struct ConvSpec<'a> {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub kernel: usize,
    pub causal: bool,
    pub key_mask: Option<&'a [bool]>,
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { x: usize, bias: usize },
    Scale { x: usize, c: T },
    Silu { x: usize },
    Softplus { x: usize },
    RmsNorm { x: usize, gain: usize, inv: Vec<T> },
    Rotary { x: usize, heads: usize, seq: usize, cos: Vec<f64>, sin: Vec<f64> },
    Attention { q: usize, k: usize, v: usize, batch: usize, seq: usize, heads: usize, probs: Vec<T>, keep: Option<Vec<T>> },
    SeqConv { x: usize, w: usize, batch: usize, seq: usize, heads: usize, kernel: usize, n: usize, causal: bool, key_mask: Option<Vec<bool>> },
    Gather { x: usize, idx: Vec<usize> },
    ConcatCols { a: usize, b: usize, ca: usize, cb: usize },
    ConcatRows { a: usize, b: usize },
    Softmax { x: usize, outer: usize, n: usize, inner: usize },
    CrossEntropy { logits: usize, vocab: usize, targets: Vec<Option<usize>>, probs: Vec<T> },
    Sum { x: usize },
    Mean { x: usize },
    AbsDiff { x: usize, target: Vec<T> },
    Reshape { x: usize },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::ConcatCols { a, b, .. } | Op::ConcatRows { a, b } => vec![*a, *b],
            Op::AddRow { x, bias } => vec![*x, *bias],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::SeqConv { x, w, .. } => vec![*x, *w],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Scale { x, .. }
            | Op::Silu { x }
            | Op::Softplus { x }
            | Op::Rotary { x, .. }
            | Op::Gather { x, .. }
            | Op::Softmax { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::AbsDiff { x, .. }
            | Op::Reshape { x } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations; one backward traversal fills the
/// gradients of every leaf that requires them.
///
/// A tape is confined to the thread that builds it.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A tape that records values only; nothing is kept for backward.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Moves a value out of the tape, leaving an empty tensor behind.
    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(vec![0]))
    }

    /// Clears all gradients so another backward pass may run.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = self.grad_enabled && op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.data(a), self.data(b), m, k, n, ta, tb, &mut out, T::zero());
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, m, k, n, ta, tb }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Adds a vector to every row (broadcast over the last axis).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).numel() != d {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias).to_vec();
        let data = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(&b).map(|(&u, &v)| u + v))
            .collect();
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(v, Op::AddRow { x: x.0, bias: bias.0 }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let data = self.data(x).iter().map(|&v| v * c).collect();
        let v = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(v, Op::Scale { x: x.0, c })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| T::from_f64(kernels::silu(v.as_f64()))).collect();
        let v = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(v, Op::Silu { x: x.0 })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| T::from_f64(kernels::softplus(v.as_f64()))).collect();
        let v = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(v, Op::Softplus { x: x.0 })
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 || self.value(gain).numel() != d {
            return Err(Error::shape("rmsnorm", self.shape(x), self.shape(gain)));
        }
        let (out, inv) = kernels::rmsnorm_rows(self.data(x), self.data(gain), eps);
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(v, Op::RmsNorm { x: x.0, gain: gain.0, inv }))
    }

    /// Rotary position embedding on `(batch * seq, heads * head_dim)` rows;
    /// the position of row `r` is `r % seq`.
    pub fn rotary(&mut self, x: Var, heads: usize, seq: usize) -> Result<Var> {
        let (rows, d) = self.value(x).dims2()?;
        if heads == 0 || d % heads != 0 || (d / heads) % 2 != 0 || seq == 0 || rows % seq != 0 {
            return Err(Error::Config(format!(
                "rotary needs an even head width and whole sequences (rows {rows}, width {d}, heads {heads}, seq {seq})"
            )));
        }
        let hd = d / heads;
        let half = hd / 2;
        let (cos, sin) = kernels::rotary_tables(seq, hd);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let p = r % seq;
            for h in 0..heads {
                let o = r * d + h * hd;
                kernels::rotate_head(&src[o..o + hd], &mut out[o..o + hd], &cos[p * half..(p + 1) * half], &sin[p * half..(p + 1) * half], 1.0);
            }
        }
        let v = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(v, Op::Rotary { x: x.0, heads, seq, cos, sin }))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec<'_>) -> Result<Var> {
        let (rows, d) = self.value(q).dims2()?;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        let (b, t, h) = (spec.batch, spec.seq, spec.heads);
        if h == 0 || d % h != 0 {
            return Err(Error::Config(format!("model width {d} not divisible by {h} heads")));
        }
        if b * t != rows {
            return Err(Error::shape("attention rows", &[rows], &[b, t]));
        }
        if let Some(m) = spec.key_mask {
            if m.len() != rows {
                return Err(Error::shape("attention key mask", &[m.len()], &[rows]));
            }
        }
        let dk = d / h;
        let scale = 1.0 / (dk as f64).sqrt();
        let keep_p = spec.dropout.filter(|(p, _)| *p > 0.0);
        let mut rng = keep_p.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); b * h * t * t];
        let mut keep: Option<Vec<T>> = keep_p.map(|_| vec![T::zero(); b * h * t * t]);
        let mut scores = vec![T::zero(); t * t];
        let mut row64 = vec![0.0f64; t];
        for bi in 0..b {
            for hi in 0..h {
                let off = bi * t * d + hi * dk;
                T::gemm(t, dk, t, &qd[off..], (d, 1), &kd[off..], (1, d), &mut scores, (t, 1), T::zero());
                let pbase = (bi * h + hi) * t * t;
                let p = &mut probs[pbase..pbase + t * t];
                for i in 0..t {
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..t {
                        let ok = (!spec.causal || j <= i) && spec.key_mask.is_none_or(|m| m[bi * t + j]);
                        row64[j] = if ok { scores[i * t + j].as_f64() * scale } else { f64::NEG_INFINITY };
                        mx = mx.max(row64[j]);
                    }
                    if mx == f64::NEG_INFINITY {
                        continue;
                    }
                    let sum: f64 = row64.iter().map(|&s| (s - mx).exp()).sum();
                    for j in 0..t {
                        p[i * t + j] = T::from_f64((row64[j] - mx).exp() / sum);
                    }
                }
                let mixed: &[T] = match (&mut keep, &mut rng, keep_p) {
                    (Some(kv), Some(r), Some((pd, _))) => {
                        let kslice = &mut kv[pbase..pbase + t * t];
                        let s = T::from_f64(1.0 / (1.0 - pd));
                        for (idx, kk) in kslice.iter_mut().enumerate() {
                            *kk = if r.random::<f64>() < pd { T::zero() } else { s };
                            scores[idx] = p[idx] * *kk;
                        }
                        &scores
                    }
                    _ => p,
                };
                T::gemm(t, t, dk, mixed, (t, 1), &vd[off..], (d, 1), &mut out[off..], (d, 1), T::zero());
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let grad = self.grad_enabled;
        Ok(self.push(
            value,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                batch: b,
                seq: t,
                heads: h,
                probs: if grad { probs } else { Vec::new() },
                keep,
            },
        ))
    }

    pub fn seq_conv(&mut self, x: Var, w: Var, spec: &ConvSpec<'_>) -> Result<Var> {
        let (rows, d) = self.value(x).dims2()?;
        let (b, t, h, kk) = (spec.batch, spec.seq, spec.heads, spec.kernel.max(1));
        let ws = self.shape(w).to_vec();
        let n = match ws.as_slice() {
            [wh, n1, n2, wk] if *wh == h && n1 == n2 && *wk == kk && *n1 >= t => *n1,
            _ => return Err(Error::shape("seq_conv weights", &ws, &[h, t, t, kk])),
        };
        if b * t != rows || h == 0 || d % h != 0 {
            return Err(Error::shape("seq_conv input", &[rows, d], &[b * t, h]));
        }
        if let Some(m) = spec.key_mask {
            if m.len() != rows {
                return Err(Error::shape("seq_conv key mask", &[m.len()], &[rows]));
            }
        }
        let out = conv_forward(self.data(x), self.data(w), b, t, d, h, kk, n, spec.causal, spec.key_mask);
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            value,
            Op::SeqConv {
                x: x.0,
                w: w.0,
                batch: b,
                seq: t,
                heads: h,
                kernel: kk,
                n,
                causal: spec.causal,
                key_mask: spec.key_mask.map(<[bool]>::to_vec),
            },
        ))
    }

    /// `out.flat[i] = x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                what: "gather",
                index: bad,
                extent: n,
            });
        }
        let src = self.data(x);
        let data = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { x: x.0, idx }))
    }

    /// Selects whole rows of a rank-2 tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Index {
                what: "gather_rows",
                index: bad,
                extent: r,
            });
        }
        let idx = rows.iter().flat_map(|&i| (i * c)..(i + 1) * c).collect();
        self.gather(x, idx, vec![rows.len(), c])
    }

    /// Token-embedding lookup: rows of `table` selected by ids.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.gather_rows(table, &rows)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ra != rb {
            return Err(Error::shape("concat_cols", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![ra, ca + cb], data)?;
        Ok(self.push(value, Op::ConcatCols { a: a.0, b: b.0, ca, cb }))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ca != cb {
            return Err(Error::shape("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut data = self.data(a).to_vec();
        data.extend_from_slice(self.data(b));
        let value = Tensor::new(vec![ra + rb, ca], data)?;
        Ok(self.push(value, Op::ConcatRows { a: a.0, b: b.0 }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                extent: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let out = kernels::softmax_axis(self.data(x), outer, n, inner);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x: x.0, outer, n, inner }))
    }

    /// Unreduced cross-entropy: one loss per row, zero for ignored rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, vocab) = self.value(logits).dims2()?;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy targets", &[targets.len()], &[rows]));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: bad,
                extent: vocab,
            });
        }
        let keep = self.grad_enabled && self.nodes[logits.0].requires_grad;
        let (losses, probs) = kernels::cross_entropy_rows(self.data(logits), vocab, targets, keep);
        let value = Tensor::new(vec![rows], losses)?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: logits.0,
                vocab,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s: f64 = self.data(x).iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(s / n)), Op::Mean { x: x.0 })
    }

    /// Elementwise `|x - target|` with a constant target.
    pub fn abs_diff(&mut self, x: Var, target: &[T]) -> Result<Var> {
        if target.len() != self.value(x).numel() {
            return Err(Error::shape("abs_diff", self.shape(x), &[target.len()]));
        }
        let data = self.data(x).iter().zip(target).map(|(&a, &b)| (a - b).abs()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(
            value,
            Op::AbsDiff {
                x: x.0,
                target: target.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x: x.0 }))
    }

    // ----------------------------------------------------------- backward

    /// Propagates gradients from a scalar root to every leaf that requires them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("gradients already populated; call reset_grads first".into()));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::Index {
                what: "backward root",
                index: root.0,
                extent: self.nodes.len(),
            });
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Backward(format!("root must be scalar, got shape {:?}", self.shape(root))));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.op.inputs().iter().any(|&j| j >= i) {
                return Err(Error::Backward(format!("tape is not topologically ordered at node {i} (cycle)")));
            }
        }
        self.backward_done = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = node.grad.as_ref() else { continue };
            backward_node(before, &node.op, &node.value, g);
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(nodes: &mut [Node<T>], id: usize, delta: Vec<T>) {
    let n = &mut nodes[id];
    if !n.requires_grad {
        return;
    }
    match &mut n.grad {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a = *a + b),
        None => n.grad = Some(delta),
    }
}

fn needs<T>(nodes: &[Node<T>], id: usize) -> bool {
    nodes[id].requires_grad
}

fn backward_node<T: Scalar>(nodes: &mut [Node<T>], op: &Op<T>, out: &Tensor<T>, g: &[T]) {
    match *op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n, ta, tb } => {
            if needs(nodes, a) {
                // d op(a) = g * op(b)^T, stored in a's own layout.
                let mut ga = vec![T::zero(); m * k];
                let bd = nodes[b].value.data();
                if ta {
                    // a stored k x m: ga = op(b) * g^T
                    matmul_into(bd, g, k, n, m, tb, true, &mut ga, T::zero());
                } else {
                    matmul_into(g, bd, m, n, k, false, !tb, &mut ga, T::zero());
                }
                accumulate(nodes, a, ga);
            }
            if needs(nodes, b) {
                let mut gb = vec![T::zero(); k * n];
                let ad = nodes[a].value.data();
                if tb {
                    // b stored n x k: gb = g^T * op(a)
                    matmul_into(g, ad, n, m, k, true, ta, &mut gb, T::zero());
                } else {
                    matmul_into(ad, g, k, m, n, !ta, false, &mut gb, T::zero());
                }
                accumulate(nodes, b, gb);
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, a, g.to_vec());
            accumulate(nodes, b, g.to_vec());
        }
        Op::Sub { a, b } => {
            accumulate(nodes, a, g.to_vec());
            accumulate(nodes, b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul { a, b } => {
            if needs(nodes, a) {
                let d: Vec<T> = g.iter().zip(nodes[b].value.data()).map(|(&u, &v)| u * v).collect();
                accumulate(nodes, a, d);
            }
            if needs(nodes, b) {
                let d: Vec<T> = g.iter().zip(nodes[a].value.data()).map(|(&u, &v)| u * v).collect();
                accumulate(nodes, b, d);
            }
        }
        Op::AddRow { x, bias } => {
            accumulate(nodes, x, g.to_vec());
            if needs(nodes, bias) {
                let d = nodes[bias].value.numel();
                let mut gb = vec![0.0f64; d];
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b.as_f64());
                }
                accumulate(nodes, bias, gb.into_iter().map(T::from_f64).collect());
            }
        }
        Op::Scale { x, c } => accumulate(nodes, x, g.iter().map(|&v| v * c).collect()),
        Op::Silu { x } => {
            let d = nodes[x].value.data().iter().zip(g).map(|(&v, &gg)| T::from_f64(kernels::silu_grad(v.as_f64()) * gg.as_f64())).collect();
            accumulate(nodes, x, d);
        }
        Op::Softplus { x } => {
            let d = nodes[x].value.data().iter().zip(g).map(|(&v, &gg)| T::from_f64(kernels::sigmoid(v.as_f64()) * gg.as_f64())).collect();
            accumulate(nodes, x, d);
        }
        Op::RmsNorm { x, gain, ref inv } => {
            let dim = nodes[gain].value.numel();
            let xd = nodes[x].value.data();
            let gd = nodes[gain].value.data();
            let mut gx = vec![T::zero(); xd.len()];
            let mut gg = vec![0.0f64; dim];
            for (r, s) in inv.iter().enumerate() {
                let s = s.as_f64();
                let xr = &xd[r * dim..(r + 1) * dim];
                let gr = &g[r * dim..(r + 1) * dim];
                let mut dot = 0.0f64;
                for j in 0..dim {
                    let xv = xr[j].as_f64();
                    gg[j] += gr[j].as_f64() * xv * s;
                    dot += gd[j].as_f64() * gr[j].as_f64() * xv;
                }
                let c = s * s * s * dot / dim as f64;
                for j in 0..dim {
                    gx[r * dim + j] = T::from_f64(s * gd[j].as_f64() * gr[j].as_f64() - xr[j].as_f64() * c);
                }
            }
            let need_gain = needs(nodes, gain);
            accumulate(nodes, x, gx);
            if need_gain {
                accumulate(nodes, gain, gg.into_iter().map(T::from_f64).collect());
            }
        }
        Op::Rotary { x, heads, seq, ref cos, ref sin } => {
            let d = out.last_dim();
            let hd = d / heads;
            let half = hd / 2;
            let mut gx = vec![T::zero(); g.len()];
            for r in 0..g.len() / d {
                let p = r % seq;
                for h in 0..heads {
                    let o = r * d + h * hd;
                    kernels::rotate_head(&g[o..o + hd], &mut gx[o..o + hd], &cos[p * half..(p + 1) * half], &sin[p * half..(p + 1) * half], -1.0);
                }
            }
            accumulate(nodes, x, gx);
        }
        Op::Attention { q, k, v, batch, seq, heads, ref probs, ref keep } => {
            let (gq, gk, gv) = attention_backward(
                nodes[q].value.data(),
                nodes[k].value.data(),
                nodes[v].value.data(),
                g,
                probs,
                keep.as_deref(),
                batch,
                seq,
                heads,
                out.last_dim(),
            );
            accumulate(nodes, q, gq);
            accumulate(nodes, k, gk);
            accumulate(nodes, v, gv);
        }
        Op::SeqConv { x, w, batch, seq, heads, kernel, n, causal, ref key_mask } => {
            let d = out.last_dim();
            let (gx, gw) = conv_backward(nodes[x].value.data(), nodes[w].value.data(), g, batch, seq, d, heads, kernel, n, causal, key_mask.as_deref());
            accumulate(nodes, x, gx);
            accumulate(nodes, w, gw);
        }
        Op::Gather { x, ref idx } => {
            if needs(nodes, x) {
                let mut gx = vec![T::zero(); nodes[x].value.numel()];
                for (o, &i) in idx.iter().enumerate() {
                    gx[i] = gx[i] + g[o];
                }
                accumulate(nodes, x, gx);
            }
        }
        Op::ConcatCols { a, b, ca, cb } => {
            let rows = g.len() / (ca + cb);
            let mut ga = Vec::with_capacity(rows * ca);
            let mut gb = Vec::with_capacity(rows * cb);
            for r in g.chunks(ca + cb) {
                ga.extend_from_slice(&r[..ca]);
                gb.extend_from_slice(&r[ca..]);
            }
            accumulate(nodes, a, ga);
            accumulate(nodes, b, gb);
        }
        Op::ConcatRows { a, b } => {
            let na = nodes[a].value.numel();
            accumulate(nodes, a, g[..na].to_vec());
            accumulate(nodes, b, g[na..].to_vec());
        }
        Op::Softmax { x, outer, n, inner } => {
            let y = out.data();
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let dot: f64 = (0..n).map(|j| y[idx(j)].as_f64() * g[idx(j)].as_f64()).sum();
                    for j in 0..n {
                        gx[idx(j)] = T::from_f64(y[idx(j)].as_f64() * (g[idx(j)].as_f64() - dot));
                    }
                }
            }
            accumulate(nodes, x, gx);
        }
        Op::CrossEntropy { logits, vocab, ref targets, ref probs } => {
            let mut gl = vec![T::zero(); targets.len() * vocab];
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                let gr = g[r];
                let row = &mut gl[r * vocab..(r + 1) * vocab];
                for (dst, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                    *dst = p * gr;
                }
                row[t] = row[t] - gr;
            }
            accumulate(nodes, logits, gl);
        }
        Op::Sum { x } => {
            let n = nodes[x].value.numel();
            accumulate(nodes, x, vec![g[0]; n]);
        }
        Op::Mean { x } => {
            let n = nodes[x].value.numel();
            let v = g[0] / T::from_f64(n.max(1) as f64);
            accumulate(nodes, x, vec![v; n]);
        }
        Op::AbsDiff { x, ref target } => {
            let d = nodes[x]
                .value
                .data()
                .iter()
                .zip(target)
                .zip(g)
                .map(|((&a, &t), &gg)| {
                    let s = a - t;
                    if s > T::zero() {
                        gg
                    } else if s < T::zero() {
                        -gg
                    } else {
                        T::zero()
                    }
                })
                .collect();
            accumulate(nodes, x, d);
        }
        Op::Reshape { x } => accumulate(nodes, x, g.to_vec()),
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    g: &[T],
    probs: &[T],
    keep: Option<&[T]>,
    b: usize,
    t: usize,
    h: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dk = d / h;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); t * t];
    let mut mixed = vec![T::zero(); t * t];
    for bi in 0..b {
        for hi in 0..h {
            let off = bi * t * d + hi * dk;
            let pbase = (bi * h + hi) * t * t;
            let p = &probs[pbase..pbase + t * t];
            let kslice = keep.map(|kv| &kv[pbase..pbase + t * t]);
            let pm: &[T] = match kslice {
                Some(kv) => {
                    for i in 0..t * t {
                        mixed[i] = p[i] * kv[i];
                    }
                    &mixed
                }
                None => p,
            };
            // dP' = dO V^T ; dV += P'^T dO
            T::gemm(t, dk, t, &g[off..], (d, 1), &v[off..], (1, d), &mut dp, (t, 1), T::zero());
            T::gemm(t, t, dk, pm, (1, t), &g[off..], (d, 1), &mut gv[off..], (d, 1), T::one());
            if let Some(kv) = kslice {
                for i in 0..t * t {
                    dp[i] = dp[i] * kv[i];
                }
            }
            for i in 0..t {
                let row = i * t..(i + 1) * t;
                let dot: f64 = p[row.clone()].iter().zip(&dp[row.clone()]).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                for j in row {
                    dp[j] = T::from_f64(p[j].as_f64() * (dp[j].as_f64() - dot) * scale);
                }
            }
            T::gemm(t, t, dk, &dp, (t, 1), &k[off..], (d, 1), &mut gq[off..], (d, 1), T::one());
            T::gemm(t, t, dk, &dp, (1, t), &q[off..], (d, 1), &mut gk[off..], (d, 1), T::one());
        }
    }
    (gq, gk, gv)
}

/// Fills `wm` (seq x seq) with the usable weights of head `h`, tap `tap` for batch row `bi`.
#[allow(clippy::too_many_arguments)]
fn masked_taps<T: Scalar>(w: &[T], wm: &mut [T], h: usize, tap: usize, kernel: usize, n: usize, t: usize, causal: bool, mask: Option<&[bool]>, bi: usize) {
    for i in 0..t {
        for j in 0..t {
            let ok = (!causal || j <= i) && mask.is_none_or(|m| m[bi * t + j]);
            wm[i * t + j] = if ok { w[((h * n + i) * n + j) * kernel + tap] } else { T::zero() };
        }
    }
}

/// Column range `[lo, hi)` of outputs that read input column `c + shift`.
fn tap_range(dh: usize, shift: isize) -> Option<(usize, usize)> {
    let lo = (-shift).max(0) as usize;
    let hi = (dh as isize - shift).min(dh as isize);
    (hi > lo as isize).then_some((lo, hi as usize))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: usize,
    t: usize,
    d: usize,
    h: usize,
    kernel: usize,
    n: usize,
    causal: bool,
    mask: Option<&[bool]>,
) -> Vec<T> {
    let dh = d / h;
    let center = (kernel as isize - 1) / 2;
    let mut out = vec![T::zero(); b * t * d];
    let mut wm = vec![T::zero(); t * t];
    for bi in 0..b {
        for hi in 0..h {
            for tap in 0..kernel {
                let shift = tap as isize - center;
                let Some((lo, hi_c)) = tap_range(dh, shift) else { continue };
                masked_taps(w, &mut wm, hi, tap, kernel, n, t, causal, mask, bi);
                let xo = (bi * t * d + hi * dh + lo) as isize + shift;
                let oo = bi * t * d + hi * dh + lo;
                T::gemm(t, t, hi_c - lo, &wm, (t, 1), &x[xo as usize..], (d, 1), &mut out[oo..], (d, 1), T::one());
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    b: usize,
    t: usize,
    d: usize,
    h: usize,
    kernel: usize,
    n: usize,
    causal: bool,
    mask: Option<&[bool]>,
) -> (Vec<T>, Vec<T>) {
    let dh = d / h;
    let center = (kernel as isize - 1) / 2;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut wm = vec![T::zero(); t * t];
    let mut dwm = vec![T::zero(); t * t];
    for bi in 0..b {
        for hi in 0..h {
            for tap in 0..kernel {
                let shift = tap as isize - center;
                let Some((lo, hi_c)) = tap_range(dh, shift) else { continue };
                let width = hi_c - lo;
                masked_taps(w, &mut wm, hi, tap, kernel, n, t, causal, mask, bi);
                let xo = ((bi * t * d + hi * dh + lo) as isize + shift) as usize;
                let oo = bi * t * d + hi * dh + lo;
                T::gemm(t, t, width, &wm, (1, t), &g[oo..], (d, 1), &mut gx[xo..], (d, 1), T::one());
                T::gemm(t, width, t, &g[oo..], (d, 1), &x[xo..], (1, d), &mut dwm, (t, 1), T::zero());
                for i in 0..t {
                    for j in 0..t {
                        let ok = (!causal || j <= i) && mask.is_none_or(|m| m[bi * t + j]);
                        if ok {
                            let wi = ((hi * n + i) * n + j) * kernel + tap;
                            gw[wi] = gw[wi] + dwm[i * t + j];
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::<f32>::new();
        let x = t.param(Tensor::from_f64(vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn cross_entropy_grad_closed_form() {
        let mut t = Tape::<f64>::new();
        let logits = randn(&[1, 5], 3);
        let x = t.param(logits.clone());
        let l = t.cross_entropy(x, &[Some(2)]).unwrap();
        let s = t.sum(l);
        t.backward(s).unwrap();
        let p = crate::tensor::ops::softmax(&logits, 1).unwrap();
        for (j, (&g, &pj)) in t.grad(x).unwrap().iter().zip(p.data()).enumerate() {
            let want = pj - if j == 2 { 1.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::<f32>::new();
        let x = t.param(Tensor::zeros(vec![3]));
        assert!(matches!(t.backward(x), Err(Error::Backward(_))));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::Backward(_))));
        t.reset_grads();
        t.backward(s).unwrap();
    }

    #[test]
    fn no_grad_tape_keeps_no_history() {
        let mut t = Tape::<f32>::inference();
        let x = t.param(Tensor::zeros(vec![2]));
        assert!(!t.requires_grad(x));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn causal_attention_ignores_future() {
        let q = randn(&[6, 4], 1).cast::<f32>();
        let mut k = randn(&[6, 4], 2).cast::<f32>();
        let mut v = randn(&[6, 4], 3).cast::<f32>();
        let spec = AttentionSpec {
            batch: 1,
            seq: 6,
            heads: 2,
            causal: true,
            ..Default::default()
        };
        let run = |k: &Tensor<f32>, v: &Tensor<f32>| {
            let mut t = Tape::inference();
            let (a, b, c) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
            let y = t.attention(a, b, c, &spec).unwrap();
            t.value(y).clone()
        };
        let before = run(&k, &v);
        k.data_mut()[5 * 4] += 1.0;
        v.data_mut()[5 * 4 + 1] -= 2.0;
        let after = run(&k, &v);
        assert_eq!(&before.data()[..20], &after.data()[..20]);
        assert_ne!(&before.data()[20..], &after.data()[20..]);
    }
}
