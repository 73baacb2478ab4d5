use std::sync::Arc;

use super::gemm::sgemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        // im2col buffer, [N, C·K·K, Ho·Wo]
        cols: Vec<f32>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    AvgPool2x2(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    MaxLast { input: Var, argmax: Vec<usize> },
    Concat(Vec<Var>),
    Gather { input: Var, index: Vec<usize> },
    Clamp { input: Var, lo: f32, hi: f32 },
    Reshape(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. Nodes are appended as operations
/// run, so every node's inputs precede it and the record is already in
/// topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().expect("operation needs rank >= 1");
    let rows = shape[..shape.len() - 1].iter().product();
    (rows, last)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input tensor that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input tensor with no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that shares storage with the caller (model parameters).
    pub fn shared(&mut self, t: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_shared(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient populated by [`Graph::backward`]; `None` when the node does
    /// not require a gradient or is unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()))
    }

    // ------------------------------------------------------------------
    // Operations

    /// 2-D cross-correlation. `input` is N×C×H×W, `kernel` O×C×K×K, `bias` O.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Var {
        assert!(stride > 0, "conv2d: stride must be positive");
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let bs = self.shape(bias).to_vec();
        assert!(
            xs.len() == 4 && ks.len() == 4 && ks[2] == ks[3] && ks[1] == xs[1] && bs == [ks[0]],
            "conv2d: incompatible shapes input {:?}, kernel {:?}, bias {:?}",
            xs,
            ks,
            bs
        );
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ks[0], ks[2]);
        assert!(
            h + 2 * padding >= k && w + 2 * padding >= k,
            "conv2d: kernel {:?} larger than padded input {:?}",
            ks,
            xs
        );
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let p = ho * wo;
        let ckk = c * k * k;

        let x = self.value(input).data();
        let mut cols = vec![0.0f32; n * ckk * p];
        for b in 0..n {
            for ci in 0..c {
                let plane = &x[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let dst = &mut cols[(b * ckk + row) * p..(b * ckk + row + 1) * p];
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[oy * wo + ox] = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }

        let wk = self.value(kernel).data();
        let bias_v = self.value(bias).data();
        let mut out = vec![0.0f32; n * o * p];
        for b in 0..n {
            let dst = &mut out[b * o * p..(b + 1) * o * p];
            for (oc, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bias_v[oc]);
            }
            sgemm(o, ckk, p, wk, (ckk, 1), &cols[b * ckk * p..], (p, 1), 1.0, dst, (p, 1));
        }

        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        let cols = if self.rg(kernel) { cols } else { Vec::new() };
        self.push(
            Tensor::new(vec![n, o, ho, wo], out),
            Op::Conv2d { input, kernel, bias, stride, padding, cols },
            rg,
        )
    }

    /// `[M,K] · [K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {:?} and {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        sgemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), 0.0, &mut out, (n, 1));
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    fn broadcast_check(&self, name: &str, a: Var, b: Var) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            is_suffix(sb, sa),
            "{}: shape {:?} does not broadcast over leading dims of {:?}",
            name,
            sb,
            sa
        );
    }

    /// Elementwise sum; `b` may broadcast over the leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_check("add", a, b);
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_mut(bv.len()) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o += y;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out), Op::Add(a, b), rg)
    }

    /// Elementwise product; `b` may broadcast over the leading dims of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_check("mul", a, b);
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_mut(bv.len()) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o *= y;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out), Op::Mul(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|v| v * factor).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out), Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out), Op::Relu(a), rg)
    }

    /// 2×2 average pooling with stride 2 over an N×C×H×W tensor (H, W even).
    pub fn avg_pool_2x2(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert!(
            s.len() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0,
            "avg_pool_2x2: need N×C×H×W with even H, W, got {:?}",
            s
        );
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(a).data();
        let planes = s[0] * s[1];
        let mut out = vec![0.0f32; planes * ho * wo];
        for pl in 0..planes {
            let src = &x[pl * h * w..(pl + 1) * h * w];
            let dst = &mut out[pl * ho * wo..(pl + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![s[0], s[1], ho, wo], out), Op::AvgPool2x2(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (_, m) = split_last(av.shape());
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(m) {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out), Op::Softmax(a), rg)
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (_, m) = split_last(av.shape());
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(m) {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f32>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out), Op::LogSoftmax(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|v| v.ln()).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out), Op::Log(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|v| v.sqrt()).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out), Op::Sqrt(a), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s: f32 = av.data().iter().sum::<f32>() / av.numel() as f32;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Maximum over the last axis. Returns the values (rank reduced by one)
    /// and the argmax of each row; ties resolve to the lowest index.
    pub fn max_last(&mut self, a: Var) -> (Var, Vec<usize>) {
        let av = self.value(a);
        let (rows, m) = split_last(av.shape());
        assert!(m > 0, "max_last: empty last axis");
        let mut vals = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for row in av.data().chunks(m) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            vals.push(row[best]);
            argmax.push(best);
        }
        let shape = av.shape()[..av.rank() - 1].to_vec();
        let rg = self.rg(a);
        let v = self.push(Tensor::new(shape, vals), Op::MaxLast { input: a, argmax: argmax.clone() }, rg);
        (v, argmax)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            assert!(
                !s.is_empty() && s[..s.len() - 1] == lead[..],
                "concat: leading dims differ: {:?} vs {:?}",
                s,
                lead
            );
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0f32; rows * total];
        let mut offset = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + wd].copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            offset += wd;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, out), Op::Concat(parts.to_vec()), rg)
    }

    /// `out[i] = input[index[i]]` over flattened storage. The gradient
    /// scatter-adds back into the selected source elements.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: Vec<usize>) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, index.len(), "gather: {} indices for output shape {:?}", index.len(), shape);
        let src = self.value(a).data();
        let out = index
            .iter()
            .map(|&i| {
                assert!(i < src.len(), "gather: index {} out of range for {:?}", i, self.shape(a));
                src[i]
            })
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out), Op::Gather { input: a, index }, rg)
    }

    /// Clamp into `[lo, hi]`. Gradient passes only where `lo < x < hi`.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        assert!(lo <= hi, "clamp: lo {} > hi {}", lo, hi);
        let av = self.value(a);
        let out = av.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out), Op::Clamp { input: a, lo, hi }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = self.nodes[a.0].value.as_ref().clone().reshaped(shape);
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Rotates an H×W×C tensor by `k` clockwise quarter-turns: for `k = 1`,
    /// `in[i][j]` lands at `out[j][H-1-i]`.
    pub fn rotate90(&mut self, a: Var, k: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3, "rotate90: need H×W×C, got {:?}", s);
        let (index, shape) = rotate90_index(s[0], s[1], s[2], k);
        self.gather(a, index, shape)
    }

    /// Rows of a rank-2 tensor.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2, "select_rows: need rank 2, got {:?}", s);
        let width = s[1];
        let index = rows.iter().flat_map(|&r| (r * width)..(r + 1) * width).collect();
        self.gather(a, index, vec![rows.len(), width])
    }

    // ------------------------------------------------------------------
    // Backward

    /// Populates gradients of `loss` with respect to every reachable node
    /// that requires one. Gradients from all paths are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Config(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn grad_buf<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f32>>], i: usize, g: &[f32]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Conv2d { input, kernel, bias, stride, padding, cols } => {
            let xs = nodes[input.0].value.shape();
            let ks = nodes[kernel.0].value.shape();
            let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (o, k) = (ks[0], ks[2]);
            let (ho, wo) = (out.shape()[2], out.shape()[3]);
            let p = ho * wo;
            let ckk = c * k * k;
            if let Some(gb) = grad_buf(nodes, grads, *bias) {
                for b in 0..n {
                    for oc in 0..o {
                        gb[oc] += g[(b * o + oc) * p..(b * o + oc + 1) * p].iter().sum::<f32>();
                    }
                }
            }
            if let Some(gk) = grad_buf(nodes, grads, *kernel) {
                for b in 0..n {
                    // dW[o, r] += dY_b[o, :] · cols_b[r, :]
                    sgemm(o, p, ckk, &g[b * o * p..], (p, 1), &cols[b * ckk * p..], (1, p), 1.0, gk, (ckk, 1));
                }
            }
            let wk = nodes[kernel.0].value.data();
            if let Some(gx) = grad_buf(nodes, grads, *input) {
                let mut dcols = vec![0.0f32; ckk * p];
                for b in 0..n {
                    sgemm(ckk, o, p, wk, (1, ckk), &g[b * o * p..], (p, 1), 0.0, &mut dcols, (p, 1));
                    for ci in 0..c {
                        let plane = &mut gx[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                        for ky in 0..k {
                            for kx in 0..k {
                                let row = (ci * k + ky) * k + kx;
                                let src = &dcols[row * p..(row + 1) * p];
                                for oy in 0..ho {
                                    let iy = (oy * stride + ky) as isize - *padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                                    for ox in 0..wo {
                                        let ix = (ox * stride + kx) as isize - *padding as isize;
                                        if ix >= 0 && ix < w as isize {
                                            dst[ix as usize] += src[oy * wo + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let bv = nodes[b.0].value.data();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                // dA = dC · Bᵀ
                sgemm(m, n, k, g, (n, 1), bv, (1, n), 1.0, ga, (k, 1));
            }
            let av = nodes[a.0].value.data();
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                // dB = Aᵀ · dC
                sgemm(k, m, n, av, (1, k), g, (n, 1), 1.0, gb, (n, 1));
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                let len = gb.len();
                for chunk in g.chunks(len) {
                    for (x, y) in gb.iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            let bv = nodes[b.0].value.clone();
            let av = nodes[a.0].value.clone();
            let blen = bv.numel();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for (idx, (x, y)) in ga.iter_mut().zip(g).enumerate() {
                    *x += y * bv.data()[idx % blen];
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for (idx, (&y, &xa)) in g.iter().zip(av.data()).enumerate() {
                    gb[idx % blen] += y * xa;
                }
            }
        }
        Op::Scale(a, f) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y * f;
                }
            }
        }
        Op::Relu(a) => {
            let av = nodes[a.0].value.clone();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for ((x, y), &v) in ga.iter_mut().zip(g).zip(av.data()) {
                    if v > 0.0 {
                        *x += y;
                    }
                }
            }
        }
        Op::AvgPool2x2(a) => {
            let s = nodes[a.0].value.shape().to_vec();
            let (h, w) = (s[2], s[3]);
            let (ho, wo) = (h / 2, w / 2);
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for pl in 0..s[0] * s[1] {
                    let dst = &mut ga[pl * h * w..(pl + 1) * h * w];
                    let src = &g[pl * ho * wo..(pl + 1) * ho * wo];
                    for y in 0..ho {
                        for x in 0..wo {
                            let v = 0.25 * src[y * wo + x];
                            let i = 2 * y * w + 2 * x;
                            dst[i] += v;
                            dst[i + 1] += v;
                            dst[i + w] += v;
                            dst[i + w + 1] += v;
                        }
                    }
                }
            }
        }
        Op::Softmax(a) => {
            let (_, m) = split_last(out.shape());
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for ((gx, gy), y) in ga.chunks_mut(m).zip(g.chunks(m)).zip(out.data().chunks(m)) {
                    let dot: f32 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        gx[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let (_, m) = split_last(out.shape());
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for ((gx, gy), y) in ga.chunks_mut(m).zip(g.chunks(m)).zip(out.data().chunks(m)) {
                    let total: f32 = gy.iter().sum();
                    for j in 0..m {
                        gx[j] += gy[j] - y[j].exp() * total;
                    }
                }
            }
        }
        Op::Log(a) => {
            let av = nodes[a.0].value.clone();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for ((x, y), &v) in ga.iter_mut().zip(g).zip(av.data()) {
                    *x += y / v;
                }
            }
        }
        Op::Sqrt(a) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for ((x, y), &r) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += y * 0.5 / r;
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                let v = g[0] / ga.len() as f32;
                for x in ga.iter_mut() {
                    *x += v;
                }
            }
        }
        Op::MaxLast { input, argmax } => {
            let (_, m) = split_last(nodes[input.0].value.shape());
            if let Some(ga) = grad_buf(nodes, grads, *input) {
                for (r, (&j, &y)) in argmax.iter().zip(g).enumerate() {
                    ga[r * m + j] += y;
                }
            }
        }
        Op::Concat(parts) => {
            let total = *out.shape().last().unwrap();
            let rows = out.numel() / total.max(1);
            let mut offset = 0;
            for p in parts {
                let wd = *nodes[p.0].value.shape().last().unwrap();
                if let Some(gp) = grad_buf(nodes, grads, *p) {
                    for r in 0..rows {
                        for (x, y) in gp[r * wd..(r + 1) * wd]
                            .iter_mut()
                            .zip(&g[r * total + offset..r * total + offset + wd])
                        {
                            *x += y;
                        }
                    }
                }
                offset += wd;
            }
        }
        Op::Gather { input, index } => {
            if let Some(ga) = grad_buf(nodes, grads, *input) {
                for (&src, &y) in index.iter().zip(g) {
                    ga[src] += y;
                }
            }
        }
        Op::Clamp { input, lo, hi } => {
            let av = nodes[input.0].value.clone();
            if let Some(ga) = grad_buf(nodes, grads, *input) {
                for ((x, y), &v) in ga.iter_mut().zip(g).zip(av.data()) {
                    if *lo < v && v < *hi {
                        *x += y;
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
    }
}

/// Source indices for a clockwise rotation of an H×W×C tensor by `k`
/// quarter-turns, plus the output shape.
pub(crate) fn rotate90_index(h: usize, w: usize, c: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
    let k = k % 4;
    let (oh, ow) = if k % 2 == 0 { (h, w) } else { (w, h) };
    let mut index = Vec::with_capacity(h * w * c);
    for r in 0..oh {
        for q in 0..ow {
            // invert the forward map for each output cell
            let (i, j) = match k {
                0 => (r, q),
                1 => (h - 1 - q, r),
                2 => (h - 1 - r, w - 1 - q),
                _ => (q, w - 1 - r),
            };
            for ch in 0..c {
                index.push((i * w + j) * c + ch);
            }
        }
    }
    (index, vec![oh, ow, c])
}
