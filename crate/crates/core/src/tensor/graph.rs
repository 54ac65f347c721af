use rayon::prelude::*;

use super::{numel, Result, Tensor, TensorError, EPSILON_NORM};

/// Variance floor added before the square root in every normalization path.
pub const NORM_VARIANCE_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Exp,
    Log,
    Relu,
    Scale(f64),
}

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    None,
    /// rhs is a single element applied to every lhs element
    Rhs,
    Lhs,
}

#[derive(Debug)]
enum NormGrad {
    /// Normalization by constants: d out / d z = gamma * scale
    Fixed { scale: Vec<f64> },
    /// Gradient through batch statistics, multiplied by the constant ratio r
    Batch { xhat: Vec<f64>, inv_sigma: Vec<f64>, ratio: Vec<f64> },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var, bcast: Broadcast },
    Unary { kind: UnaryKind, a: Var },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Reshape { a: Var },
    Conv2d { input: Var, kernel: Var, bias: Var, dims: ConvDims, cols: Vec<Vec<f64>> },
    Sum { a: Var, axis: Option<usize>, mean: bool },
    L2Normalize { a: Var, axis: usize, norms: Vec<f64> },
    Softmax { a: Var, axis: usize },
    SelectColumns { a: Var, cols: Vec<usize>, width: usize },
    ChannelsLast { a: Var, n: usize, c: usize, hw: usize },
    Normalize { input: Var, gamma: Var, beta: Var, n: usize, c: usize, inner: usize, normalized: Vec<f64>, grad: NormGrad },
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// How [`Graph::batch_norm`] obtains the statistics it normalizes with.
#[derive(Debug, Clone, Copy)]
pub enum NormSpec<'a> {
    /// Batch mean and standard deviation, gradient through both.
    Batch,
    /// Fixed running statistics; no dependence on the batch.
    Running { mean: &'a [f64], std: &'a [f64] },
    /// Batch renormalization: forward equals running-stat normalization,
    /// gradient flows through the batch statistics with `r = σ/σ_r` and
    /// `d = (μ - μ_r)/σ_r` held constant. `clip` bounds `(r_max, d_max)`.
    Renorm { mean: &'a [f64], std: &'a [f64], clip: Option<(f64, f64)> },
}

/// Per-channel batch statistics observed during a normalization forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Append-only tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    relu_signs: Vec<i8>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visits: Vec<u32>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Number of times the backward pass visited each node.
    pub fn visits(&self) -> &[u32] {
        &self.visits
    }

    /// Adds the gradient of `var` (if any) into the grad slot of `tensor`.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange { axis, rank: shape.len() });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

/// C (m×n) = beta·C + A·B where A is m×k and B is k×n, each given with
/// explicit row/column strides so transposed views need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.clone(), data: n.value.clone(), grad: None }
    }

    /// Sign pattern of every relu input recorded so far (-1, 0, +1).
    pub fn kink_signature(&self) -> &[i8] {
        &self.relu_signs
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), true, Op::Leaf)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), false, Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(TensorError::BadLength { shape, len: data.len() });
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let bcast = if sa == sb {
            Broadcast::None
        } else if numel(sb) == 1 {
            Broadcast::Rhs
        } else if numel(sa) == 1 {
            Broadcast::Lhs
        } else {
            return Err(TensorError::ShapeMismatch { lhs: sa.clone(), rhs: sb.clone() });
        };
        let shape = match bcast {
            Broadcast::Lhs => sb.clone(),
            _ => sa.clone(),
        };
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let value: Vec<f64> = match bcast {
            Broadcast::None => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Rhs => va.iter().map(|&x| f(x, vb[0])).collect(),
            Broadcast::Lhs => vb.iter().map(|&y| f(va[0], y)).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, rg, Op::Binary { kind, a, b, bcast }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let value: Vec<f64> = match kind {
            UnaryKind::Exp => src.iter().map(|x| x.exp()).collect(),
            UnaryKind::Log => {
                if let Some((index, &value)) = src.iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
                    return Err(TensorError::NonPositiveLog { index, value });
                }
                src.iter().map(|x| x.ln()).collect()
            }
            UnaryKind::Relu => {
                let signs: Vec<i8> = src.iter().map(|&x| if x > 0.0 { 1 } else if x < 0.0 { -1 } else { 0 }).collect();
                self.relu_signs.extend_from_slice(&signs);
                let src = &self.nodes[a.0].value;
                src.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
            }
            UnaryKind::Scale(c) => src.iter().map(|x| x * c).collect(),
        };
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        Ok(self.push(shape, value, rg, Op::Unary { kind, a }))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    /// Natural log; every input element must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    /// Rectifier with subgradient 0 at exactly 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), a)
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    ///
    /// Each output entry accumulates over `k` in ascending order, so a column
    /// of the result does not depend on how many other columns `b` has.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { lhs: sa.clone(), rhs: sb.clone() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = va[i * k + p];
                let brow = &vb[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(TensorError::Invalid(format!("transpose needs rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![cols, rows], out, rg, Op::Transpose { a, rows, cols }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let len = self.nodes[a.0].value.len();
        if numel(&shape) != len {
            return Err(TensorError::BadLength { shape, len });
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        Ok(self.push(shape, value, rg, Op::Reshape { a }))
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    ///
    /// `input` is `[N×C_in×H×W]` or a single `[C_in×H×W]` image; `kernel` is
    /// `[C_out×C_in×3×3]`, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernel.0].shape.clone();
        let sb = self.nodes[bias.0].shape.clone();
        let (n, cin, h, w, batched) = match si.as_slice() {
            &[n, c, h, w] => (n, c, h, w, true),
            &[c, h, w] => (1, c, h, w, false),
            _ => return Err(TensorError::Invalid(format!("conv2d input must be rank 3 or 4, got {si:?}"))),
        };
        if sk.len() != 4 || sk[2] != 3 || sk[3] != 3 {
            return Err(TensorError::Invalid(format!("conv2d kernel must be [C_out, C_in, 3, 3], got {sk:?}")));
        }
        if sk[1] != cin {
            return Err(TensorError::ShapeMismatch { lhs: si, rhs: sk });
        }
        let cout = sk[0];
        if sb != [cout] {
            return Err(TensorError::ShapeMismatch { lhs: sk, rhs: sb });
        }
        let dims = ConvDims { n, cin, cout, h, w };
        let hw = h * w;
        let x = &self.nodes[input.0].value;
        let k = &self.nodes[kernel.0].value;
        let b = &self.nodes[bias.0].value;
        let per_image: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let cols = im2col(&x[i * cin * hw..(i + 1) * cin * hw], cin, h, w);
                let mut out = vec![0.0; cout * hw];
                for (co, chunk) in out.chunks_mut(hw).enumerate() {
                    chunk.fill(b[co]);
                }
                gemm(cout, cin * 9, hw, k, false, &cols, false, &mut out, 1.0);
                (cols, out)
            })
            .collect();
        let mut value = Vec::with_capacity(n * cout * hw);
        let mut cols = Vec::with_capacity(n);
        for (c, o) in per_image {
            value.extend_from_slice(&o);
            cols.push(c);
        }
        let shape = if batched { vec![n, cout, h, w] } else { vec![cout, h, w] };
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(shape, value, rg, Op::Conv2d { input, kernel, bias, dims, cols }))
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let src = &self.nodes[a.0].value;
        let (out_shape, value) = match axis {
            None => {
                let s: f64 = src.iter().sum();
                let v = if mean { s / src.len() as f64 } else { s };
                (Vec::new(), vec![v])
            }
            Some(ax) => {
                let (outer, len, inner) = split_axis(&shape, ax)?;
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += src[base + i];
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut s = shape.clone();
                s.remove(ax);
                (s, out)
            }
        };
        let rg = self.rg(a);
        Ok(self.push(out_shape, value, rg, Op::Sum { a, axis, mean }))
    }

    /// Sum over `axis`, or over every element when `axis` is `None`.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    /// Scales every slice along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let src = &self.nodes[a.0].value;
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0;
                for l in 0..len {
                    let v = src[(o * len + l) * inner + i];
                    s += v * v;
                }
                let norm = s.sqrt();
                if !(norm >= EPSILON_NORM) {
                    return Err(TensorError::DegenerateNorm { slice: o * inner + i, norm });
                }
                norms[o * inner + i] = norm;
            }
        }
        let mut value = vec![0.0; src.len()];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let idx = (o * len + l) * inner + i;
                    value[idx] = src[idx] / norms[o * inner + i];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, value, rg, Op::L2Normalize { a, axis, norms }))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let src = &self.nodes[a.0].value;
        if let Some(i) = src.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::Invalid(format!("softmax input not finite at index {i}")));
        }
        let mut value = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[idx(l)] - max).exp();
                    value[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    value[idx(l)] /= z;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, value, rg, Op::Softmax { a, axis }))
    }

    /// Picks the given columns of a `[rows×width]` matrix, in the given order.
    pub fn select_columns(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(TensorError::Invalid(format!("select_columns needs rank 2, got {s:?}")));
        }
        let (rows, width) = (s[0], s[1]);
        if let Some(&c) = cols.iter().find(|&&c| c >= width) {
            return Err(TensorError::Invalid(format!("column {c} out of range for width {width}")));
        }
        let src = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            value.extend(cols.iter().map(|&c| src[r * width + c]));
        }
        let rg = self.rg(a);
        Ok(self.push(vec![rows, cols.len()], value, rg, Op::SelectColumns { a, cols: cols.to_vec(), width }))
    }

    /// `[N×C×H×W]` (or `[C×H×W]`) to `[N·H·W × C]`: one row per pixel.
    pub fn channels_last(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        let (n, c, hw) = match s.as_slice() {
            &[n, c, h, w] => (n, c, h * w),
            &[c, h, w] => (1, c, h * w),
            _ => return Err(TensorError::Invalid(format!("channels_last needs rank 3 or 4, got {s:?}"))),
        };
        let src = &self.nodes[a.0].value;
        let mut value = vec![0.0; src.len()];
        for i in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    value[(i * hw + p) * c + ch] = src[(i * c + ch) * hw + p];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n * hw, c], value, rg, Op::ChannelsLast { a, n, c, hw }))
    }

    /// Per-channel normalization followed by the affine map `γ·â + β`.
    ///
    /// `input` is `[N×C×…]`; statistics are taken over every axis but 1.
    /// Returns the batch statistics whenever they were computed, so the
    /// caller can update running estimates.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, spec: NormSpec<'_>) -> Result<(Var, Option<NormStats>)> {
        let shape = self.nodes[input.0].shape.clone();
        if shape.len() < 2 {
            return Err(TensorError::Invalid(format!("batch_norm needs rank >= 2, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for p in [gamma, beta] {
            if self.nodes[p.0].shape != [c] {
                return Err(TensorError::ShapeMismatch { lhs: shape.clone(), rhs: self.nodes[p.0].shape.clone() });
            }
        }
        let check_running = |mean: &[f64], std: &[f64]| -> Result<()> {
            if mean.len() != c || std.len() != c {
                return Err(TensorError::ShapeMismatch { lhs: vec![c], rhs: vec![mean.len(), std.len()] });
            }
            if let Some(i) = std.iter().position(|&s| !(s > 0.0)) {
                return Err(TensorError::Invalid(format!("running std of channel {i} is not positive")));
            }
            Ok(())
        };
        let z = &self.nodes[input.0].value;
        let at = |i: usize, ch: usize, p: usize| (i * c + ch) * inner + p;
        let batch_stats = || -> Result<NormStats> {
            let m = n * inner;
            if m < 2 {
                return Err(TensorError::BatchTooSmall(m));
            }
            let mut mean = vec![0.0; c];
            let mut std = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..n {
                    for p in 0..inner {
                        s += z[at(i, ch, p)];
                    }
                }
                let mu = s / m as f64;
                let mut v = 0.0;
                for i in 0..n {
                    for p in 0..inner {
                        let d = z[at(i, ch, p)] - mu;
                        v += d * d;
                    }
                }
                mean[ch] = mu;
                std[ch] = (v / m as f64 + NORM_VARIANCE_EPS).sqrt();
            }
            Ok(NormStats { mean, std })
        };
        let mut normalized = vec![0.0; z.len()];
        let (grad, stats) = match spec {
            NormSpec::Running { mean, std } => {
                check_running(mean, std)?;
                for i in 0..n {
                    for ch in 0..c {
                        for p in 0..inner {
                            let k = at(i, ch, p);
                            normalized[k] = (z[k] - mean[ch]) / std[ch];
                        }
                    }
                }
                (NormGrad::Fixed { scale: std.iter().map(|s| 1.0 / s).collect() }, None)
            }
            NormSpec::Batch => {
                let st = batch_stats()?;
                for i in 0..n {
                    for ch in 0..c {
                        for p in 0..inner {
                            let k = at(i, ch, p);
                            normalized[k] = (z[k] - st.mean[ch]) / st.std[ch];
                        }
                    }
                }
                let inv_sigma = st.std.iter().map(|s| 1.0 / s).collect();
                (NormGrad::Batch { xhat: normalized.clone(), inv_sigma, ratio: vec![1.0; c] }, Some(st))
            }
            NormSpec::Renorm { mean, std, clip } => {
                check_running(mean, std)?;
                let st = batch_stats()?;
                let mut r: Vec<f64> = (0..c).map(|ch| st.std[ch] / std[ch]).collect();
                let mut d: Vec<f64> = (0..c).map(|ch| (st.mean[ch] - mean[ch]) / std[ch]).collect();
                if let Some((rmax, dmax)) = clip {
                    r.iter_mut().for_each(|v| *v = v.clamp(1.0 / rmax, rmax));
                    d.iter_mut().for_each(|v| *v = v.clamp(-dmax, dmax));
                }
                let mut xhat = vec![0.0; z.len()];
                for i in 0..n {
                    for ch in 0..c {
                        for p in 0..inner {
                            let k = at(i, ch, p);
                            xhat[k] = (z[k] - st.mean[ch]) / st.std[ch];
                            normalized[k] = xhat[k] * r[ch] + d[ch];
                        }
                    }
                }
                let inv_sigma = st.std.iter().map(|s| 1.0 / s).collect();
                (NormGrad::Batch { xhat, inv_sigma, ratio: r }, Some(st))
            }
        };
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut value = vec![0.0; z.len()];
        for i in 0..n {
            for ch in 0..c {
                for p in 0..inner {
                    let k = at(i, ch, p);
                    value[k] = g[ch] * normalized[k] + b[ch];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let op = Op::Normalize { input, gamma, beta, n, c, inner, normalized, grad };
        Ok((self.push(shape, value, rg, op), stats))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Visits every node exactly once, in reverse append order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visits = vec![0u32; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..self.nodes.len()).rev() {
            visits[idx] += 1;
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visits })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bcast } => {
                let (va, vb) = (val(*a), val(*b));
                let n = g.len();
                // elementwise partials, indexed by output position
                let ai = |i: usize| match bcast {
                    Broadcast::Lhs => va[0],
                    _ => va[i],
                };
                let bi = |i: usize| match bcast {
                    Broadcast::Rhs => vb[0],
                    _ => vb[i],
                };
                let (da, db): (Vec<f64>, Vec<f64>) = match kind {
                    BinaryKind::Add => (g.to_vec(), g.to_vec()),
                    BinaryKind::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                    BinaryKind::Mul => ((0..n).map(|i| g[i] * bi(i)).collect(), (0..n).map(|i| g[i] * ai(i)).collect()),
                    BinaryKind::Div => (
                        (0..n).map(|i| g[i] / bi(i)).collect(),
                        (0..n).map(|i| -g[i] * ai(i) / (bi(i) * bi(i))).collect(),
                    ),
                };
                let reduce = |d: Vec<f64>, scalar: bool| if scalar { vec![d.iter().sum()] } else { d };
                if self.rg(*a) {
                    add_into(&mut grads[a.0], &reduce(da, matches!(bcast, Broadcast::Lhs)));
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], &reduce(db, matches!(bcast, Broadcast::Rhs)));
                }
            }
            Op::Unary { kind, a } => {
                let x = val(*a);
                let d: Vec<f64> = match kind {
                    UnaryKind::Exp => g.iter().zip(&node.value).map(|(g, y)| g * y).collect(),
                    UnaryKind::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                    UnaryKind::Relu => g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    UnaryKind::Scale(c) => g.iter().map(|g| g * c).collect(),
                };
                add_into(&mut grads[a.0], &d);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(*b), true, &mut da, 0.0);
                    add_into(&mut grads[a.0], &da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), true, g, false, &mut db, 0.0);
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Transpose { a, rows, cols } => {
                let mut d = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        d[r * cols + c] = g[c * rows + r];
                    }
                }
                add_into(&mut grads[a.0], &d);
            }
            Op::Reshape { a } => add_into(&mut grads[a.0], g),
            Op::Conv2d { input, kernel, bias, dims, cols } => {
                let ConvDims { n, cin, cout, h, w } = *dims;
                let hw = h * w;
                let kv = val(*kernel);
                let need_input = self.rg(*input);
                let parts: Vec<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let go = &g[i * cout * hw..(i + 1) * cout * hw];
                        let mut dk = vec![0.0; cout * cin * 9];
                        gemm(cout, hw, cin * 9, go, false, &cols[i], true, &mut dk, 0.0);
                        let db: Vec<f64> = go.chunks(hw).map(|c| c.iter().sum()).collect();
                        let dx = need_input.then(|| {
                            let mut dcols = vec![0.0; cin * 9 * hw];
                            gemm(cin * 9, cout, hw, kv, true, go, false, &mut dcols, 0.0);
                            col2im(&dcols, cin, h, w)
                        });
                        (dk, db, dx)
                    })
                    .collect();
                let mut dk_total = vec![0.0; cout * cin * 9];
                let mut db_total = vec![0.0; cout];
                let mut dx_total = Vec::with_capacity(if need_input { n * cin * hw } else { 0 });
                for (dk, db, dx) in parts {
                    dk_total.iter_mut().zip(&dk).for_each(|(a, b)| *a += b);
                    db_total.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
                    if let Some(dx) = dx {
                        dx_total.extend_from_slice(&dx);
                    }
                }
                if need_input {
                    add_into(&mut grads[input.0], &dx_total);
                }
                if self.rg(*kernel) {
                    add_into(&mut grads[kernel.0], &dk_total);
                }
                if self.rg(*bias) {
                    add_into(&mut grads[bias.0], &db_total);
                }
            }
            Op::Sum { a, axis, mean } => {
                let shape = &self.nodes[a.0].shape;
                let total = numel(shape);
                let d = match axis {
                    None => {
                        let v = if *mean { g[0] / total as f64 } else { g[0] };
                        vec![v; total]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = split_axis(shape, *ax).expect("validated in forward");
                        let f = if *mean { 1.0 / len as f64 } else { 1.0 };
                        let mut d = vec![0.0; total];
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    d[(o * len + l) * inner + i] = g[o * inner + i] * f;
                                }
                            }
                        }
                        d
                    }
                };
                add_into(&mut grads[a.0], &d);
            }
            Op::L2Normalize { a, axis, norms } => {
                let shape = &self.nodes[a.0].shape;
                let (outer, len, inner) = split_axis(shape, *axis).expect("validated in forward");
                let y = &node.value;
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                        let norm = norms[o * inner + i];
                        for l in 0..len {
                            d[idx(l)] = (g[idx(l)] - y[idx(l)] * dot) / norm;
                        }
                    }
                }
                add_into(&mut grads[a.0], &d);
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis).expect("validated in forward");
                let y = &node.value;
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                        for l in 0..len {
                            d[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                add_into(&mut grads[a.0], &d);
            }
            Op::SelectColumns { a, cols, width } => {
                let rows = node.shape[0];
                let k = cols.len();
                let mut d = vec![0.0; rows * width];
                for r in 0..rows {
                    for (j, &c) in cols.iter().enumerate() {
                        d[r * width + c] += g[r * k + j];
                    }
                }
                add_into(&mut grads[a.0], &d);
            }
            Op::ChannelsLast { a, n, c, hw } => {
                let mut d = vec![0.0; g.len()];
                for i in 0..*n {
                    for ch in 0..*c {
                        for p in 0..*hw {
                            d[(i * c + ch) * hw + p] = g[(i * hw + p) * c + ch];
                        }
                    }
                }
                add_into(&mut grads[a.0], &d);
            }
            Op::Normalize { input, gamma, beta, n, c, inner, normalized, grad } => {
                let (n, c, inner) = (*n, *c, *inner);
                let at = |i: usize, ch: usize, p: usize| (i * c + ch) * inner + p;
                let gv = val(*gamma);
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            for p in 0..inner {
                                let k = at(i, ch, p);
                                dg[ch] += g[k] * normalized[k];
                                db[ch] += g[k];
                            }
                        }
                    }
                    if self.rg(*gamma) {
                        add_into(&mut grads[gamma.0], &dg);
                    }
                    if self.rg(*beta) {
                        add_into(&mut grads[beta.0], &db);
                    }
                }
                if self.rg(*input) {
                    let mut dz = vec![0.0; g.len()];
                    match grad {
                        NormGrad::Fixed { scale } => {
                            for i in 0..n {
                                for ch in 0..c {
                                    for p in 0..inner {
                                        let k = at(i, ch, p);
                                        dz[k] = g[k] * gv[ch] * scale[ch];
                                    }
                                }
                            }
                        }
                        NormGrad::Batch { xhat, inv_sigma, ratio } => {
                            let m = (n * inner) as f64;
                            for ch in 0..c {
                                let f = gv[ch] * ratio[ch];
                                let mut mean_g = 0.0;
                                let mut mean_gx = 0.0;
                                for i in 0..n {
                                    for p in 0..inner {
                                        let k = at(i, ch, p);
                                        mean_g += g[k] * f;
                                        mean_gx += g[k] * f * xhat[k];
                                    }
                                }
                                mean_g /= m;
                                mean_gx /= m;
                                for i in 0..n {
                                    for p in 0..inner {
                                        let k = at(i, ch, p);
                                        dz[k] = (g[k] * f - mean_g - xhat[k] * mean_gx) * inv_sigma[ch];
                                    }
                                }
                            }
                        }
                    }
                    add_into(&mut grads[input.0], &dz);
                }
            }
        }
    }
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; cin * 9 * hw];
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        row[y * w + xx] = x[ci * hw + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; cin * hw];
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        x[ci * hw + sy as usize * w + sx as usize] += row[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_sign_cases() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
        let s = g.sum(y, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn add_and_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.constant(&Tensor::from_vec(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c), &[4.0, 6.0]);
        let d = g.constant(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        match g.add(a, d) {
            Err(TensorError::ShapeMismatch { lhs, rhs }) => {
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn scalar_broadcast_gradient_reduces() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = g.param(&Tensor::scalar(2.0));
        let y = g.mul(a, s).unwrap();
        let l = g.sum(y, None).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(s).unwrap(), &[6.0]);
        assert_eq!(grads.get(a).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn log_derivative_and_domain() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(2.0));
        let y = g.log(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.5]);

        let bad = g.constant(&Tensor::from_vec(vec![1.0, 0.0, -1.0]));
        assert_eq!(g.log(bad).unwrap_err(), TensorError::NonPositiveLog { index: 1, value: 0.0 });
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c), &[5.0, 6.0, 7.0, 8.0]);
        let r = g.constant(&t(&[1, 2], &[1.0, 2.0]));
        let col = g.constant(&t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(r, col).unwrap();
        assert_eq!(g.shape(p), &[1, 1]);
        assert_eq!(g.value(p), &[11.0]);
        assert!(g.matmul(r, r).is_err());
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::full(vec![2, 4, 5], 0.7));
        let k = g.constant(&Tensor::zeros(vec![3, 2, 3, 3]));
        let b = g.constant(&Tensor::from_vec(vec![1.0, -2.0, 0.5]));
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.shape(y), &[3, 4, 5]);
        for (ch, chunk) in g.value(y).chunks(20).enumerate() {
            assert!(chunk.iter().all(|&v| v == [1.0, -2.0, 0.5][ch]));
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let mut g = Graph::new();
        let x = g.constant(&t(&[1, 4, 4], &data));
        let k = g.constant(&t(&[1, 1, 3, 3], &kernel));
        let b = g.constant(&Tensor::zeros(vec![1]));
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(y), data.as_slice());
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(vec![2, 4, 4]));
        let k = g.constant(&Tensor::zeros(vec![1, 3, 3, 3]));
        let b = g.constant(&Tensor::zeros(vec![1]));
        assert!(matches!(g.conv2d(x, k, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let v = g.constant(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = g.sum(v, None).unwrap();
        assert_eq!(g.scalar(s), 6.0);
        let m = g.param(&t(&[2, 2], &[1.0, 3.0, 3.0, 5.0]));
        let mm = g.mean(m, Some(0)).unwrap();
        assert_eq!(g.value(mm), &[2.0, 4.0]);
        assert!(matches!(g.sum(m, Some(2)), Err(TensorError::AxisOutOfRange { axis: 2, rank: 2 })));
        let all = g.mean(m, None).unwrap();
        let grads = g.backward(all).unwrap();
        assert_eq!(grads.get(m).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let v = g.constant(&Tensor::from_vec(vec![3.0, 4.0]));
        let n = g.l2_normalize(v, 0).unwrap();
        assert!((g.value(n)[0] - 0.6).abs() < 1e-15);
        assert!((g.value(n)[1] - 0.8).abs() < 1e-15);
        let u = g.constant(&Tensor::from_vec(vec![0.0, 1.0, 0.0]));
        let un = g.l2_normalize(u, 0).unwrap();
        assert_eq!(g.value(un), &[0.0, 1.0, 0.0]);
        let z = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        assert!(matches!(g.l2_normalize(z, 1), Err(TensorError::DegenerateNorm { slice: 1, .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::from_vec(vec![0.0, 0.0]));
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s), &[0.5, 0.5]);
        let b = g.constant(&Tensor::from_vec(vec![1000.0, 0.0]));
        let s = g.softmax(b, 0).unwrap();
        assert!(g.value(s).iter().all(|v| v.is_finite()));
        assert!((g.value(s)[0] - 1.0).abs() < 1e-12 && g.value(s)[1] < 1e-300);
        let c = g.constant(&Tensor::from_vec(vec![1f64.ln(), 3f64.ln()]));
        let s = g.softmax(c, 0).unwrap();
        assert!((g.value(s)[0] - 0.25).abs() < 1e-15);
        assert!((g.value(s)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn backward_scalar_cases() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let grads = g.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0]);
        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);

        let v = g.param(&Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(v), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_accumulates_into_tensor() {
        let mut p = Tensor::scalar(3.0);
        for expected in [6.0, 12.0] {
            let mut g = Graph::new();
            let x = g.param(&p);
            let y = g.mul(x, x).unwrap();
            g.backward(y).unwrap().accumulate_into(x, &mut p).unwrap();
            assert_eq!(p.grad().unwrap(), &[expected]);
        }
        p.zero_grad();
        assert!(p.grad().is_none());
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::from_vec(vec![0.5, -0.2, 0.9]));
        let c = g.constant(&Tensor::scalar(2.0));
        let a = g.mul(x, c).unwrap();
        let b = g.exp(a).unwrap();
        let d = g.add(b, x).unwrap();
        let s = g.softmax(d, 0).unwrap();
        let l = g.sum(s, None).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.visits().len(), g.len());
        assert!(grads.visits().iter().all(|&v| v == 1));
    }

    #[test]
    fn renorm_forward_matches_running_normalization() {
        let z = t(&[4, 1], &[0.0, 2.0, 1.0, 5.0]);
        let mut g = Graph::new();
        let zv = g.param(&z);
        let gamma = g.param(&Tensor::from_vec(vec![1.0]));
        let beta = g.param(&Tensor::from_vec(vec![0.0]));
        let (y, stats) = g.batch_norm(zv, gamma, beta, NormSpec::Renorm { mean: &[0.0], std: &[2.0], clip: None }).unwrap();
        assert!(stats.is_some());
        for (out, inp) in g.value(y).iter().zip(z.data()) {
            assert!((out - inp / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_single_element_rejected() {
        let mut g = Graph::new();
        let z = g.param(&t(&[1, 2], &[1.0, 2.0]));
        let gamma = g.param(&Tensor::from_vec(vec![1.0, 1.0]));
        let beta = g.param(&Tensor::from_vec(vec![0.0, 0.0]));
        assert_eq!(g.batch_norm(z, gamma, beta, NormSpec::Batch).unwrap_err(), TensorError::BatchTooSmall(1));
    }
}
