//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a dynamic tape: every operation appends a node holding its
//! forward value and enough saved state to run the backward rule. [`Tensor`]
//! handles are cheap references into the tape. Graphs are single-threaded;
//! parallelism happens across independent graphs (one per batch sample) with
//! ordered gradient reduction by the caller.

pub mod shape;

use shape::{broadcast_index, broadcast_shapes, is_suffix_of, numel, reduce_to_shape, strides};
use std::cell::RefCell;
use std::rc::Rc;

/// Elementwise unary operations. Constants ride along in the tag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Relu,
    Gelu,
    Sin,
    Cos,
    Abs,
    /// Wrap an angle into (-pi, pi]; derivative 1 almost everywhere.
    WrapAngle,
    PowConst(f64),
    AddConst(f64),
    MulConst(f64),
    /// Smooth-L1 with threshold beta.
    Huber(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary {
        tag: Unary,
        a: usize,
    },
    Binary {
        tag: Binary,
        a: usize,
        b: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    /// Softmax over the last dim; masked rows renormalize over the
    /// unmasked set, so backward needs only the saved output values.
    Softmax {
        a: usize,
    },
    LayerNorm {
        a: usize,
        gain: usize,
        bias: usize,
        /// Saved normalized values and 1/std per row.
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SumAll {
        a: usize,
    },
    MaxAxis {
        a: usize,
        argmax: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    /// Select rows along axis 0.
    IndexSelect {
        a: usize,
        indices: Vec<usize>,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

struct GraphInner {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// A dynamic computation tape.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                grad_enabled: true,
            })),
        }
    }

    /// A graph on which `backward` is unavailable; used for inference.
    pub fn inference() -> Self {
        let g = Graph::new();
        g.inner.borrow_mut().grad_enabled = false;
        g
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let mut inner = self.inner.borrow_mut();
        let requires_grad = requires_grad && inner.grad_enabled;
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
            grad: None,
        });
        Tensor {
            graph: self.clone(),
            id,
        }
    }

    pub fn tensor(&self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Tensor {
        assert_eq!(
            numel(shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(Op::Leaf, shape.to_vec(), data, requires_grad)
    }

    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        self.tensor(data, shape, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(vec![v], &[])
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        self.constant(vec![0.0; numel(shape)], shape)
    }

    /// Concatenate along `axis`.
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0].shape();
        assert!(axis < first.len(), "concat axis {axis} out of range");
        let mut cat_dim = 0usize;
        for p in parts {
            let s = p.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
                if d != axis {
                    assert_eq!(a, b, "concat non-axis dims must match");
                }
            }
            cat_dim += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = cat_dim;

        let outer: usize = first[..axis].iter().product();
        let inner_of = |s: &[usize]| -> usize { s[axis..].iter().product() };
        let out_inner = inner_of(&out_shape);
        let mut data = vec![0.0; numel(&out_shape)];
        let mut requires = false;
        {
            let g = self.inner.borrow();
            let mut off = 0usize;
            for p in parts {
                let n = &g.nodes[p.id];
                requires |= n.requires_grad;
                let pi = inner_of(&n.shape);
                for o in 0..outer {
                    let src = &n.data[o * pi..(o + 1) * pi];
                    data[o * out_inner + off..o * out_inner + off + pi].copy_from_slice(src);
                }
                off += pi;
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(Op::Concat { inputs: ids, axis }, out_shape, data, requires)
    }

    fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.inner.borrow().nodes[id])
    }

    /// Zero all gradient accumulators.
    pub fn zero_grads(&self) {
        for n in self.inner.borrow_mut().nodes.iter_mut() {
            n.grad = None;
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into
    /// every reachable node with `requires_grad`; repeated calls add up.
    pub fn backward(&self, loss: &Tensor) {
        assert!(
            self.grad_enabled(),
            "backward unavailable on inference graphs"
        );
        let mut inner = self.inner.borrow_mut();
        assert_eq!(
            inner.nodes[loss.id].data.len(),
            1,
            "backward requires a scalar loss"
        );
        let n = inner.nodes.len();
        // Local adjoint buffers for this sweep; merged into persistent
        // grads at the end so repeated backward calls accumulate.
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[loss.id] = Some(vec![1.0]);

        macro_rules! take_adj {
            ($i:expr) => {
                match adj[$i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
        }
        fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
            match dst {
                Some(v) => {
                    for (d, s) in v.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                None => *dst = Some(src.to_vec()),
            }
        }

        for id in (0..=loss.id).rev() {
            if !inner.nodes[id].requires_grad {
                adj[id] = None;
                continue;
            }
            let g_out = take_adj!(id);
            // Merge into persistent accumulator.
            {
                let node = &mut inner.nodes[id];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&g_out) {
                            *a += g;
                        }
                    }
                    None => node.grad = Some(g_out.clone()),
                }
            }
            let node = &inner.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Unary { tag, a } => {
                    let ai = *a;
                    let x = &inner.nodes[ai].data;
                    let y = &node.data;
                    let mut gx = vec![0.0; x.len()];
                    unary_backward(*tag, x, y, &g_out, &mut gx);
                    add_into(&mut adj[ai], &gx);
                }
                Op::Binary { tag, a, b } => {
                    let (ai, bi, tag) = (*a, *b, *tag);
                    let out_shape = node.shape.clone();
                    let a_shape = inner.nodes[ai].shape.clone();
                    let b_shape = inner.nodes[bi].shape.clone();
                    let (ga_full, gb_full) = binary_backward(
                        tag,
                        &inner.nodes[ai].data,
                        &a_shape,
                        &inner.nodes[bi].data,
                        &b_shape,
                        &node.data,
                        &out_shape,
                        &g_out,
                    );
                    if inner.nodes[ai].requires_grad {
                        add_into(&mut adj[ai], &reduce_to_shape(&ga_full, &out_shape, &a_shape));
                    }
                    if inner.nodes[bi].requires_grad {
                        add_into(&mut adj[bi], &reduce_to_shape(&gb_full, &out_shape, &b_shape));
                    }
                }
                Op::MatMul { a, b } => {
                    let (ai, bi) = (*a, *b);
                    let (ga, gb) = matmul_backward(
                        &inner.nodes[ai].data,
                        &inner.nodes[ai].shape,
                        &inner.nodes[bi].data,
                        &inner.nodes[bi].shape,
                        &node.shape,
                        &g_out,
                    );
                    if inner.nodes[ai].requires_grad {
                        add_into(&mut adj[ai], &ga);
                    }
                    if inner.nodes[bi].requires_grad {
                        add_into(&mut adj[bi], &gb);
                    }
                }
                Op::Softmax { a } => {
                    let ai = *a;
                    let y = &node.data;
                    let cols = *node.shape.last().unwrap();
                    let mut gx = vec![0.0; y.len()];
                    for r in 0..y.len() / cols {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &g_out[r * cols..(r + 1) * cols];
                        let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                        for c in 0..cols {
                            gx[r * cols + c] = ys[c] * (gs[c] - dot);
                        }
                    }
                    add_into(&mut adj[ai], &gx);
                }
                Op::LayerNorm {
                    a,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let (ai, gi, bi) = (*a, *gain, *bias);
                    let cols = *node.shape.last().unwrap();
                    let rows = node.data.len() / cols;
                    let gain_v = inner.nodes[gi].data.clone();
                    let mut gx = vec![0.0; node.data.len()];
                    let mut ggain = vec![0.0; cols];
                    let mut gbias = vec![0.0; cols];
                    for r in 0..rows {
                        let xh = &normed[r * cols..(r + 1) * cols];
                        let go = &g_out[r * cols..(r + 1) * cols];
                        let istd = inv_std[r];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..cols {
                            let dxh = go[c] * gain_v[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[c];
                            ggain[c] += go[c] * xh[c];
                            gbias[c] += go[c];
                        }
                        mean_dxh /= cols as f64;
                        mean_dxh_xh /= cols as f64;
                        for c in 0..cols {
                            let dxh = go[c] * gain_v[c];
                            gx[r * cols + c] = istd * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                    if inner.nodes[ai].requires_grad {
                        add_into(&mut adj[ai], &gx);
                    }
                    if inner.nodes[gi].requires_grad {
                        add_into(&mut adj[gi], &ggain);
                    }
                    if inner.nodes[bi].requires_grad {
                        add_into(&mut adj[bi], &gbias);
                    }
                }
                Op::SumAll { a } => {
                    let ai = *a;
                    let gx = vec![g_out[0]; inner.nodes[ai].data.len()];
                    add_into(&mut adj[ai], &gx);
                }
                Op::MaxAxis { a, argmax } => {
                    let ai = *a;
                    let mut gx = vec![0.0; inner.nodes[ai].data.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g_out[o];
                    }
                    add_into(&mut adj[ai], &gx);
                }
                Op::Reshape { a } => {
                    add_into(&mut adj[*a], &g_out);
                }
                Op::Permute { a, perm } => {
                    let ai = *a;
                    let in_shape = inner.nodes[ai].shape.clone();
                    let gx = permute_backward(&g_out, &in_shape, perm);
                    add_into(&mut adj[ai], &gx);
                }
                Op::Concat { inputs, axis } => {
                    let axis = *axis;
                    let out_shape = node.shape.clone();
                    let outer: usize = out_shape[..axis].iter().product();
                    let out_inner: usize = out_shape[axis..].iter().product();
                    let mut off = 0usize;
                    let inputs = inputs.clone();
                    for pid in inputs {
                        let pshape = inner.nodes[pid].shape.clone();
                        let pi: usize = pshape[axis..].iter().product();
                        if inner.nodes[pid].requires_grad {
                            let mut gp = vec![0.0; numel(&pshape)];
                            for o in 0..outer {
                                gp[o * pi..(o + 1) * pi].copy_from_slice(
                                    &g_out[o * out_inner + off..o * out_inner + off + pi],
                                );
                            }
                            add_into(&mut adj[pid], &gp);
                        }
                        off += pi;
                    }
                }
                Op::Narrow { a, axis, start } => {
                    let (ai, axis, start) = (*a, *axis, *start);
                    let in_shape = inner.nodes[ai].shape.clone();
                    let out_shape = node.shape.clone();
                    let outer: usize = in_shape[..axis].iter().product();
                    let in_block: usize = in_shape[axis..].iter().product();
                    let out_block: usize = out_shape[axis..].iter().product();
                    let inner_sz: usize = in_shape[axis + 1..].iter().product();
                    let mut gx = vec![0.0; numel(&in_shape)];
                    for o in 0..outer {
                        let dst = o * in_block + start * inner_sz;
                        gx[dst..dst + out_block]
                            .copy_from_slice(&g_out[o * out_block..(o + 1) * out_block]);
                    }
                    add_into(&mut adj[ai], &gx);
                }
                Op::IndexSelect { a, indices } => {
                    let ai = *a;
                    let in_shape = inner.nodes[ai].shape.clone();
                    let row: usize = in_shape[1..].iter().product();
                    let mut gx = vec![0.0; numel(&in_shape)];
                    for (o, &src) in indices.iter().enumerate() {
                        for c in 0..row {
                            gx[src * row + c] += g_out[o * row + c];
                        }
                    }
                    add_into(&mut adj[ai], &gx);
                }
            }
        }
    }
}

// ── forward kernels ──────────────────────────────────────────────────

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797884560802865; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797884560802865;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
}

/// Wrap into (-pi, pi].
pub fn wrap_angle(t: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    t - TAU * ((t - PI) / TAU).ceil()
}

fn huber(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

fn unary_forward(tag: Unary, x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| match tag {
            Unary::Neg => -v,
            Unary::Exp => v.exp(),
            Unary::Log => {
                assert!(v > 0.0, "domain error: log of non-positive value {v}");
                v.ln()
            }
            Unary::Sqrt => {
                assert!(v >= 0.0, "domain error: sqrt of negative value {v}");
                v.sqrt()
            }
            Unary::Tanh => v.tanh(),
            Unary::Relu => v.max(0.0),
            Unary::Gelu => gelu(v),
            Unary::Sin => v.sin(),
            Unary::Cos => v.cos(),
            Unary::Abs => v.abs(),
            Unary::WrapAngle => wrap_angle(v),
            Unary::PowConst(e) => v.powf(e),
            Unary::AddConst(c) => v + c,
            Unary::MulConst(c) => v * c,
            Unary::Huber(b) => huber(v, b),
        })
        .collect()
}

fn unary_backward(tag: Unary, x: &[f64], y: &[f64], g: &[f64], gx: &mut [f64]) {
    for i in 0..x.len() {
        let d = match tag {
            Unary::Neg => -1.0,
            Unary::Exp => y[i],
            Unary::Log => 1.0 / x[i],
            Unary::Sqrt => 0.5 / y[i],
            Unary::Tanh => 1.0 - y[i] * y[i],
            Unary::Relu => {
                if x[i] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => gelu_grad(x[i]),
            Unary::Sin => x[i].cos(),
            Unary::Cos => -x[i].sin(),
            Unary::Abs => {
                if x[i] >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Unary::WrapAngle => 1.0,
            Unary::PowConst(e) => e * x[i].powf(e - 1.0),
            Unary::AddConst(_) => 1.0,
            Unary::MulConst(c) => c,
            Unary::Huber(b) => {
                if x[i].abs() < b {
                    x[i] / b
                } else {
                    x[i].signum()
                }
            }
        };
        gx[i] = g[i] * d;
    }
}

fn binary_scalar(tag: Binary, a: f64, b: f64) -> f64 {
    match tag {
        Binary::Add => a + b,
        Binary::Sub => a - b,
        Binary::Mul => a * b,
        Binary::Div => a / b,
    }
}

fn binary_forward(tag: Binary, a: &[f64], ash: &[usize], b: &[f64], bsh: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape = broadcast_shapes(ash, bsh);
    let n = numel(&out_shape);
    let mut out = vec![0.0; n];
    if ash == bsh {
        for i in 0..n {
            out[i] = binary_scalar(tag, a[i], b[i]);
        }
    } else if ash[..] == out_shape[..] && is_suffix_of(bsh, ash) {
        let bl = b.len().max(1);
        for i in 0..n {
            out[i] = binary_scalar(tag, a[i], b[i % bl]);
        }
    } else if bsh[..] == out_shape[..] && is_suffix_of(ash, bsh) {
        let al = a.len().max(1);
        for i in 0..n {
            out[i] = binary_scalar(tag, a[i % al], b[i]);
        }
    } else {
        for i in 0..n {
            let av = a[broadcast_index(i, &out_shape, ash)];
            let bv = b[broadcast_index(i, &out_shape, bsh)];
            out[i] = binary_scalar(tag, av, bv);
        }
    }
    (out, out_shape)
}

#[allow(clippy::too_many_arguments)]
fn binary_backward(
    tag: Binary,
    a: &[f64],
    ash: &[usize],
    b: &[f64],
    bsh: &[usize],
    _y: &[f64],
    out_shape: &[usize],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = g.len();
    let mut ga = vec![0.0; n];
    let mut gb = vec![0.0; n];
    for i in 0..n {
        let av = a[broadcast_index(i, out_shape, ash)];
        let bv = b[broadcast_index(i, out_shape, bsh)];
        match tag {
            Binary::Add => {
                ga[i] = g[i];
                gb[i] = g[i];
            }
            Binary::Sub => {
                ga[i] = g[i];
                gb[i] = -g[i];
            }
            Binary::Mul => {
                ga[i] = g[i] * bv;
                gb[i] = g[i] * av;
            }
            Binary::Div => {
                ga[i] = g[i] / bv;
                gb[i] = -g[i] * av / (bv * bv);
            }
        }
    }
    (ga, gb)
}

/// Split a shape into (leading batch dims, last two dims).
fn matmul_dims(shape: &[usize]) -> (&[usize], usize, usize) {
    assert!(shape.len() >= 2, "matmul operand must have rank >= 2");
    let r = shape.len();
    (&shape[..r - 2], shape[r - 2], shape[r - 1])
}

fn mm_kernel(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c += a^T-free accumulation of dA = g . B^T
fn mm_gb_t(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    // ga[m,k] += g[m,n] . b[k,n]^T
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let garow = &mut ga[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            garow[p] += s;
        }
    }
}

fn mm_at_g(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    // gb[k,n] += a[m,k]^T . g[m,n]
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let gbrow = &mut gb[p * n..(p + 1) * n];
            for j in 0..n {
                gbrow[j] += av * grow[j];
            }
        }
    }
}

fn matmul_forward(a: &[f64], ash: &[usize], b: &[f64], bsh: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let (la, m, ka) = matmul_dims(ash);
    let (lb, kb, n) = matmul_dims(bsh);
    assert_eq!(
        ka, kb,
        "matmul inner dimension mismatch: {ash:?} x {bsh:?}"
    );
    let batch = broadcast_shapes(la, lb);
    let nb = numel(&batch);
    let mut out_shape = batch.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![0.0; nb * m * n];
    for bi in 0..nb {
        let ao = broadcast_index(bi, &batch, la) * m * ka;
        let bo = broadcast_index(bi, &batch, lb) * kb * n;
        mm_kernel(
            &a[ao..ao + m * ka],
            &b[bo..bo + kb * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            ka,
            n,
        );
    }
    (out, out_shape)
}

fn matmul_backward(
    a: &[f64],
    ash: &[usize],
    b: &[f64],
    bsh: &[usize],
    out_shape: &[usize],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (la, m, k) = matmul_dims(ash);
    let (lb, _, n) = matmul_dims(bsh);
    let (batch, _, _) = matmul_dims(out_shape);
    let nb = numel(batch);
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for bi in 0..nb {
        let ao = broadcast_index(bi, batch, la) * m * k;
        let bo = broadcast_index(bi, batch, lb) * k * n;
        let go = bi * m * n;
        mm_gb_t(
            &g[go..go + m * n],
            &b[bo..bo + k * n],
            &mut ga[ao..ao + m * k],
            m,
            k,
            n,
        );
        mm_at_g(
            &a[ao..ao + m * k],
            &g[go..go + m * n],
            &mut gb[bo..bo + k * n],
            m,
            k,
            n,
        );
    }
    (ga, gb)
}

fn permute_forward(x: &[f64], in_shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_str = strides(in_shape);
    let out_str = strides(&out_shape);
    let mut out = vec![0.0; x.len()];
    let rank = in_shape.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        let mut src = 0usize;
        for d in 0..rank {
            let c = rem / out_str[d];
            rem %= out_str[d];
            src += c * in_str[perm[d]];
        }
        *slot = x[src];
    }
    (out, out_shape)
}

fn permute_backward(g: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    // Inverse permutation routes output grads back to input layout.
    let mut inv = vec![0usize; perm.len()];
    for (d, &p) in perm.iter().enumerate() {
        inv[p] = d;
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    permute_forward(g, &out_shape, &inv).0
}

// ── Tensor methods ───────────────────────────────────────────────────

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.with_node(self.id, |n| n.shape.clone())
    }

    pub fn numel(&self) -> usize {
        self.graph.with_node(self.id, |n| n.data.len())
    }

    pub fn value(&self) -> Vec<f64> {
        self.graph.with_node(self.id, |n| n.data.clone())
    }

    pub fn scalar_value(&self) -> f64 {
        self.graph.with_node(self.id, |n| {
            assert_eq!(n.data.len(), 1, "scalar_value on non-scalar tensor");
            n.data[0]
        })
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.with_node(self.id, |n| n.grad.clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.with_node(self.id, |n| n.requires_grad)
    }

    fn same_graph(&self, other: &Tensor) {
        assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "tensors belong to different graphs"
        );
    }

    fn unary(&self, tag: Unary) -> Tensor {
        let (data, shape, rq) = self.graph.with_node(self.id, |n| {
            (unary_forward(tag, &n.data), n.shape.clone(), n.requires_grad)
        });
        self.graph.push(Op::Unary { tag, a: self.id }, shape, data, rq)
    }

    fn binary(&self, tag: Binary, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let inner = self.graph.inner.borrow();
        let na = &inner.nodes[self.id];
        let nb = &inner.nodes[other.id];
        let (data, out_shape) = binary_forward(tag, &na.data, &na.shape, &nb.data, &nb.shape);
        let rq = na.requires_grad || nb.requires_grad;
        drop(inner);
        self.graph.push(
            Op::Binary {
                tag,
                a: self.id,
                b: other.id,
            },
            out_shape,
            data,
            rq,
        )
    }

    pub fn add(&self, o: &Tensor) -> Tensor {
        self.binary(Binary::Add, o)
    }
    pub fn sub(&self, o: &Tensor) -> Tensor {
        self.binary(Binary::Sub, o)
    }
    pub fn mul(&self, o: &Tensor) -> Tensor {
        self.binary(Binary::Mul, o)
    }
    pub fn div(&self, o: &Tensor) -> Tensor {
        self.binary(Binary::Div, o)
    }
    pub fn neg(&self) -> Tensor {
        self.unary(Unary::Neg)
    }
    pub fn exp(&self) -> Tensor {
        self.unary(Unary::Exp)
    }
    pub fn ln(&self) -> Tensor {
        self.unary(Unary::Log)
    }
    pub fn sqrt(&self) -> Tensor {
        self.unary(Unary::Sqrt)
    }
    pub fn tanh(&self) -> Tensor {
        self.unary(Unary::Tanh)
    }
    pub fn relu(&self) -> Tensor {
        self.unary(Unary::Relu)
    }
    pub fn gelu(&self) -> Tensor {
        self.unary(Unary::Gelu)
    }
    pub fn sin(&self) -> Tensor {
        self.unary(Unary::Sin)
    }
    pub fn cos(&self) -> Tensor {
        self.unary(Unary::Cos)
    }
    pub fn abs(&self) -> Tensor {
        self.unary(Unary::Abs)
    }
    pub fn wrap_angle(&self) -> Tensor {
        self.unary(Unary::WrapAngle)
    }
    pub fn pow_const(&self, e: f64) -> Tensor {
        self.unary(Unary::PowConst(e))
    }
    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Unary::AddConst(c))
    }
    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(Unary::MulConst(c))
    }
    pub fn huber(&self, beta: f64) -> Tensor {
        self.unary(Unary::Huber(beta))
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let inner = self.graph.inner.borrow();
        let na = &inner.nodes[self.id];
        let nb = &inner.nodes[other.id];
        let (data, out_shape) = matmul_forward(&na.data, &na.shape, &nb.data, &nb.shape);
        let rq = na.requires_grad || nb.requires_grad;
        drop(inner);
        self.graph.push(
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            out_shape,
            data,
            rq,
        )
    }

    /// Numerically stable softmax over the last dim. `mask`, when given,
    /// must match the tensor shape; false entries come out exactly 0.
    pub fn softmax_lastdim(&self, mask: Option<&[bool]>) -> Tensor {
        let (x, sh, rq) = self
            .graph
            .with_node(self.id, |n| (n.data.clone(), n.shape.clone(), n.requires_grad));
        let cols = *sh.last().expect("softmax requires rank >= 1");
        if let Some(m) = mask {
            assert_eq!(m.len(), x.len(), "softmax mask must match tensor shape");
        }
        let mut y = vec![0.0; x.len()];
        for r in 0..x.len() / cols {
            let xs = &x[r * cols..(r + 1) * cols];
            let ms = mask.map(|m| &m[r * cols..(r + 1) * cols]);
            let row_unmasked = |c: usize| ms.map_or(true, |m| m[c]);
            let mut mx = f64::NEG_INFINITY;
            for c in 0..cols {
                if row_unmasked(c) {
                    mx = mx.max(xs[c]);
                }
            }
            assert!(
                mx > f64::NEG_INFINITY,
                "softmax row {r} is fully masked"
            );
            let mut z = 0.0;
            for c in 0..cols {
                if row_unmasked(c) {
                    let e = (xs[c] - mx).exp();
                    y[r * cols + c] = e;
                    z += e;
                }
            }
            for c in 0..cols {
                y[r * cols + c] /= z;
            }
        }
        self.graph.push(Op::Softmax { a: self.id }, sh, y, rq)
    }

    /// Layer normalization over the last dim with affine gain/bias.
    pub fn layernorm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
        assert!(eps > 0.0, "layernorm eps must be positive");
        self.same_graph(gain);
        self.same_graph(bias);
        let inner = self.graph.inner.borrow();
        let n = &inner.nodes[self.id];
        let gv = &inner.nodes[gain.id];
        let bv = &inner.nodes[bias.id];
        let cols = *n.shape.last().expect("layernorm requires rank >= 1");
        assert_eq!(gv.data.len(), cols, "layernorm gain must match last dim");
        assert_eq!(bv.data.len(), cols, "layernorm bias must match last dim");
        let rows = n.data.len() / cols;
        let mut out = vec![0.0; n.data.len()];
        let mut normed = vec![0.0; n.data.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xs = &n.data[r * cols..(r + 1) * cols];
            let mean = xs.iter().sum::<f64>() / cols as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..cols {
                let xh = (xs[c] - mean) * istd;
                normed[r * cols + c] = xh;
                out[r * cols + c] = gv.data[c] * xh + bv.data[c];
            }
        }
        let rq = n.requires_grad || gv.requires_grad || bv.requires_grad;
        let shape = n.shape.clone();
        drop(inner);
        self.graph.push(
            Op::LayerNorm {
                a: self.id,
                gain: gain.id,
                bias: bias.id,
                normed,
                inv_std,
            },
            shape,
            out,
            rq,
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let (s, rq) = self
            .graph
            .with_node(self.id, |n| (n.data.iter().sum::<f64>(), n.requires_grad));
        self.graph.push(Op::SumAll { a: self.id }, vec![], vec![s], rq)
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// Max over one axis; grads flow to the argmax positions.
    pub fn max_axis(&self, axis: usize) -> Tensor {
        let (x, sh, rq) = self
            .graph
            .with_node(self.id, |n| (n.data.clone(), n.shape.clone(), n.requires_grad));
        assert!(axis < sh.len(), "max_axis out of range");
        let outer: usize = sh[..axis].iter().product();
        let len = sh[axis];
        let inner_sz: usize = sh[axis + 1..].iter().product();
        assert!(len > 0, "max_axis over empty axis");
        let mut out_shape = sh.clone();
        out_shape.remove(axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner_sz];
        let mut argmax = vec![0usize; outer * inner_sz];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner_sz {
                    let src = o * len * inner_sz + l * inner_sz + i;
                    let dst = o * inner_sz + i;
                    if x[src] > out[dst] {
                        out[dst] = x[src];
                        argmax[dst] = src;
                    }
                }
            }
        }
        self.graph
            .push(Op::MaxAxis { a: self.id, argmax }, out_shape, out, rq)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let (data, rq) = self
            .graph
            .with_node(self.id, |n| (n.data.clone(), n.requires_grad));
        assert_eq!(
            numel(shape),
            data.len(),
            "reshape to {shape:?} changes element count"
        );
        self.graph
            .push(Op::Reshape { a: self.id }, shape.to_vec(), data, rq)
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let (x, sh, rq) = self
            .graph
            .with_node(self.id, |n| (n.data.clone(), n.shape.clone(), n.requires_grad));
        assert_eq!(perm.len(), sh.len(), "permute rank mismatch");
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            assert!(p < perm.len() && !seen[p], "invalid permutation {perm:?}");
            seen[p] = true;
        }
        let (data, out_shape) = permute_forward(&x, &sh, perm);
        self.graph.push(
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
            out_shape,
            data,
            rq,
        )
    }

    /// Swap two axes.
    pub fn transpose(&self, d0: usize, d1: usize) -> Tensor {
        let rank = self.shape().len();
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(&perm)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (x, sh, rq) = self
            .graph
            .with_node(self.id, |n| (n.data.clone(), n.shape.clone(), n.requires_grad));
        assert!(axis < sh.len(), "narrow axis out of range");
        assert!(
            start + len <= sh[axis],
            "narrow [{start}, {start}+{len}) exceeds dim {} of {sh:?}",
            sh[axis]
        );
        let outer: usize = sh[..axis].iter().product();
        let inner_sz: usize = sh[axis + 1..].iter().product();
        let in_block = sh[axis] * inner_sz;
        let out_block = len * inner_sz;
        let mut out_shape = sh.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * out_block];
        for o in 0..outer {
            let src = o * in_block + start * inner_sz;
            out[o * out_block..(o + 1) * out_block].copy_from_slice(&x[src..src + out_block]);
        }
        self.graph.push(
            Op::Narrow {
                a: self.id,
                axis,
                start,
            },
            out_shape,
            out,
            rq,
        )
    }

    /// Gather rows along axis 0; used for embedding lookups.
    pub fn index_select(&self, indices: &[usize]) -> Tensor {
        let (x, sh, rq) = self
            .graph
            .with_node(self.id, |n| (n.data.clone(), n.shape.clone(), n.requires_grad));
        assert!(!sh.is_empty(), "index_select requires rank >= 1");
        let row: usize = sh[1..].iter().product();
        let mut out = vec![0.0; indices.len() * row];
        for (o, &i) in indices.iter().enumerate() {
            assert!(i < sh[0], "index {i} out of range for dim {}", sh[0]);
            out[o * row..(o + 1) * row].copy_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut out_shape = sh.clone();
        out_shape[0] = indices.len();
        self.graph.push(
            Op::IndexSelect {
                a: self.id,
                indices: indices.to_vec(),
            },
            out_shape,
            out,
            rq,
        )
    }
}
