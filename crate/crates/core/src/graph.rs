//! Reverse-mode gradient tape over rank-2 tensors.
//!
//! Feature maps are stored channels-last as `[positions × channels]`, so the
//! same matrix kernels serve convolutions (through im2col), linear layers
//! and attention. Each op records what its backward pass needs; `backward`
//! walks the tape once in reverse.

use crate::error::{shape_err, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, gemm_nt, gemm_tn, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Var(usize);

const GN_EPS: f64 = 1e-5;

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Silu(Var),
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Im2col { x: Var, h: usize, w: usize },
    AvgPool2 { x: Var, h: usize, w: usize },
    Upsample2 { x: Var, h: usize, w: usize },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather { table: Var, ids: Vec<usize> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    SumSqDiff(Var, Var),
    CrossEntropyRows { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub(crate) struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    /// Parameters inserted as constants regardless of their trainable flag.
    frozen_all: bool,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            frozen_all: false,
        }
    }

    /// A graph that never records parameter gradients (inference).
    pub fn inference(store: &'p ParamStore) -> Self {
        let mut g = Self::new(store);
        g.frozen_all = true;
        g
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let trainable = self.store.is_trainable(id) && !self.frozen_all;
        let value = self.store.get(id).clone();
        let value = if value.shape().len() == 1 {
            let n = value.len();
            value.reshape(vec![1, n]).expect("vector reshape")
        } else {
            value
        };
        let v = self.push(value, Op::Param(id), trainable);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        (s[0], s[1])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(shape_err!("matmul [{n}x{k}] x [{k2}x{m}]"));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), self.value(b).data(), &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err!("matmul_nt [{n}x{k}] x [{m}x{k2}]^T"));
        }
        let mut out = vec![0.0; n * m];
        gemm_nt(n, k, m, self.value(a).data(), self.value(b).data(), &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMulNT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Adds a `[1×m]` row to every row of `[n×m]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        let (r, m2) = self.dims(row);
        if r != 1 || m != m2 {
            return Err(shape_err!("add_row [{n}x{m}] + [{r}x{m2}]"));
        }
        let mut out = self.value(x).data().to_vec();
        let rv = self.value(row).data();
        for i in 0..n {
            for (o, b) in out[i * m..(i + 1) * m].iter_mut().zip(rv) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::AddRow(x, row), ng))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z / (1.0 + (-z).exp()));
        let ng = self.ng(x);
        self.push(v, Op::Silu(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            softmax_in_place(&mut out[i * m..(i + 1) * m]);
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![n, m], out), Op::SoftmaxRows(x), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(parts[0]).1;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != m {
                return Err(shape_err!("concat_rows column mismatch {c} vs {m}"));
            }
            n += r;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(parts[0]).0;
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != n {
                return Err(shape_err!("concat_cols row mismatch {r} vs {n}"));
            }
            m += c;
        }
        let mut data = vec![0.0; n * m];
        let mut off = 0;
        for &p in parts {
            let c = self.dims(p).1;
            let src = self.value(p).data();
            for i in 0..n {
                data[i * m + off..i * m + off + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(&src[i * m..(i + 1) * m]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![1, m], out), Op::MeanRows(x), ng)
    }

    /// 3×3, stride 1, zero-padded patch extraction: `[h·w × c] → [h·w × 9c]`.
    pub fn im2col3(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c) = self.dims(x);
        if n != h * w {
            return Err(shape_err!("im2col: {n} rows for {h}x{w} grid"));
        }
        let src = self.value(x).data();
        let kc = 9 * c;
        let mut out = vec![0.0; n * kc];
        for y in 0..h {
            for xx in 0..w {
                let row = (y * w + xx) * kc;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let s = (sy as usize * w + sx as usize) * c;
                        let d = row + (ky * 3 + kx) * c;
                        out[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![n, kc], out), Op::Im2col { x, h, w }, ng))
    }

    pub fn avg_pool2(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c) = self.dims(x);
        if n != h * w || h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("avg_pool2 on {n} rows as {h}x{w}"));
        }
        let (h2, w2) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; h2 * w2 * c];
        for y in 0..h {
            for xx in 0..w {
                let d = ((y / 2) * w2 + xx / 2) * c;
                let s = (y * w + xx) * c;
                for ch in 0..c {
                    out[d + ch] += 0.25 * src[s + ch];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![h2 * w2, c], out), Op::AvgPool2 { x, h, w }, ng))
    }

    /// Nearest-neighbour 2× upsampling of an `h×w` grid.
    pub fn upsample2(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c) = self.dims(x);
        if n != h * w {
            return Err(shape_err!("upsample2 on {n} rows as {h}x{w}"));
        }
        let (h2, w2) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![0.0; h2 * w2 * c];
        for y in 0..h2 {
            for xx in 0..w2 {
                let s = ((y / 2) * w + xx / 2) * c;
                let d = (y * w2 + xx) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![h2 * w2, c], out), Op::Upsample2 { x, h, w }, ng))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (n, c) = self.dims(x);
        if groups == 0 || c % groups != 0 {
            return Err(shape_err!("group_norm: {groups} groups for {c} channels"));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err!("group_norm affine size mismatch"));
        }
        let cg = c / groups;
        let count = (n * cg) as f64;
        let src = self.value(x).data();
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; groups];
        for g in 0..groups {
            let mut mean = 0.0;
            for i in 0..n {
                for ch in g * cg..(g + 1) * cg {
                    mean += src[i * c + ch];
                }
            }
            mean /= count;
            let mut var = 0.0;
            for i in 0..n {
                for ch in g * cg..(g + 1) * cg {
                    let d = src[i * c + ch] - mean;
                    var += d * d;
                }
            }
            var /= count;
            let r = 1.0 / (var + GN_EPS).sqrt();
            rstd[g] = r;
            for i in 0..n {
                for ch in g * cg..(g + 1) * cg {
                    xhat[i * c + ch] = (src[i * c + ch] - mean) * r;
                }
            }
        }
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for ch in 0..c {
                out[i * c + ch] = xhat[i * c + ch] * gm[ch] + bt[ch];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(shape_err!("gather_rows with no ids"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(shape_err!("gather id {id} out of {v} rows"));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * m];
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let r = &src[i * m..(i + 1) * m];
            let nrm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms[i] = nrm;
            for j in 0..m {
                out[i * m + j] = r[j] / nrm;
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![n, m], out), Op::L2NormalizeRows { x, norms }, ng)
    }

    /// `Σ (a − b)²` as a `[1×1]` scalar.
    pub fn sum_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b))?;
        let s = d.sum_squares();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::full(&[1, 1], s), Op::SumSqDiff(a, b), ng))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, m) = self.dims(logits);
        if targets.len() != n || targets.iter().any(|&t| t >= m) {
            return Err(shape_err!("cross_entropy targets do not match [{n}x{m}]"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for i in 0..n {
            let row = &mut probs[i * m..(i + 1) * m];
            softmax_in_place(row);
            loss -= row[targets[i]].max(1e-300).ln();
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::full(&[1, 1], loss / n as f64),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean logistic loss of raw scores against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(shape_err!("bce: {} logits vs {} targets", z.len(), targets.len()));
        }
        let loss: f64 = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<f64>()
            / z.len() as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::full(&[1, 1], loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Back-propagates from the scalar `out`, returning gradients for every
    /// trainable parameter touched by the graph.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), 1.0));
        let mut pgrads: Vec<Option<Tensor>> = vec![None; self.store.len()];
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_op(&node.op, &node.value, g, &mut grads, &mut pgrads);
        }
        Gradients::from_vec(pgrads)
    }

    fn backward_op(
        &self,
        op: &Op,
        value: &Tensor,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        pgrads: &mut [Option<Tensor>],
    ) {
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].needs_grad;
        // Returns the gradient buffer for `v`, zero-initialized on first use.
        fn slot<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], v: Var) -> &'a mut Tensor {
            grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
        }
        match op {
            Op::Input => {}
            Op::Param(id) => {
                let shape = self.store.get(*id).shape().to_vec();
                let g = g.reshape(shape).expect("param grad shape");
                match &mut pgrads[id.0] {
                    Some(acc) => acc.axpy(1.0, &g),
                    none => *none = Some(g),
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).1;
                if want(*a) {
                    let bv = nodes[b.0].value.data();
                    let s = slot(grads, nodes, *a);
                    gemm_nt(n, m, k, g.data(), bv, s.data_mut(), true);
                }
                if want(*b) {
                    let av = nodes[a.0].value.data();
                    let s = slot(grads, nodes, *b);
                    gemm_tn(k, n, m, av, g.data(), s.data_mut(), true);
                }
            }
            Op::MatMulNT(a, b) => {
                // c[n×m] = a[n×k] · b[m×k]ᵀ
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).0;
                if want(*a) {
                    let bv = nodes[b.0].value.data();
                    let s = slot(grads, nodes, *a);
                    gemm(n, m, k, g.data(), bv, s.data_mut(), true);
                }
                if want(*b) {
                    let av = nodes[a.0].value.data();
                    let s = slot(grads, nodes, *b);
                    gemm_tn(m, n, k, g.data(), av, s.data_mut(), true);
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    slot(grads, nodes, *a).axpy(1.0, &g);
                }
                if want(*b) {
                    slot(grads, nodes, *b).axpy(1.0, &g);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bv = &nodes[b.0].value;
                    let s = slot(grads, nodes, *a);
                    for ((o, gv), bv) in s.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * bv;
                    }
                }
                if want(*b) {
                    let av = &nodes[a.0].value;
                    let s = slot(grads, nodes, *b);
                    for ((o, gv), av) in s.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(a, k) => {
                if want(*a) {
                    slot(grads, nodes, *a).axpy(*k, &g);
                }
            }
            Op::AddRow(x, row) => {
                if want(*x) {
                    slot(grads, nodes, *x).axpy(1.0, &g);
                }
                if want(*row) {
                    let (n, m) = self.dims(*x);
                    let s = slot(grads, nodes, *row);
                    let sd = s.data_mut();
                    for i in 0..n {
                        for j in 0..m {
                            sd[j] += g.data()[i * m + j];
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let xv = &nodes[x.0].value;
                let s = slot(grads, nodes, *x);
                for ((o, gv), &z) in s.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    let sg = sigmoid(z);
                    *o += gv * sg * (1.0 + z * (1.0 - sg));
                }
            }
            Op::SoftmaxRows(x) => {
                let (n, m) = self.dims(*x);
                let s = slot(grads, nodes, *x);
                let sd = s.data_mut();
                for i in 0..n {
                    let y = &value.data()[i * m..(i + 1) * m];
                    let gy = &g.data()[i * m..(i + 1) * m];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        sd[i * m + j] += y[j] * (gy[j] - dot);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let m = value.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.dims(p).0;
                    if want(p) {
                        let s = slot(grads, nodes, p);
                        for (o, gv) in s.data_mut().iter_mut().zip(&g.data()[off * m..(off + r) * m]) {
                            *o += gv;
                        }
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (n, m) = (value.rows(), value.cols());
                let mut off = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    if want(p) {
                        let s = slot(grads, nodes, p);
                        let sd = s.data_mut();
                        for i in 0..n {
                            for j in 0..c {
                                sd[i * c + j] += g.data()[i * m + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::MeanRows(x) => {
                let (n, m) = self.dims(*x);
                let s = slot(grads, nodes, *x);
                let sd = s.data_mut();
                let inv = 1.0 / n as f64;
                for i in 0..n {
                    for j in 0..m {
                        sd[i * m + j] += g.data()[j] * inv;
                    }
                }
            }
            Op::Im2col { x, h, w } => {
                let (h, w) = (*h, *w);
                let c = self.dims(*x).1;
                let kc = 9 * c;
                let s = slot(grads, nodes, *x);
                let sd = s.data_mut();
                let gd = g.data();
                for y in 0..h {
                    for xx in 0..w {
                        let row = (y * w + xx) * kc;
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let d = (sy as usize * w + sx as usize) * c;
                                let src = row + (ky * 3 + kx) * c;
                                for ch in 0..c {
                                    sd[d + ch] += gd[src + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::AvgPool2 { x, h, w } => {
                let (h, w) = (*h, *w);
                let c = self.dims(*x).1;
                let w2 = w / 2;
                let s = slot(grads, nodes, *x);
                let sd = s.data_mut();
                for y in 0..h {
                    for xx in 0..w {
                        let src = ((y / 2) * w2 + xx / 2) * c;
                        let d = (y * w + xx) * c;
                        for ch in 0..c {
                            sd[d + ch] += 0.25 * g.data()[src + ch];
                        }
                    }
                }
            }
            Op::Upsample2 { x, h, w } => {
                let (h, w) = (*h, *w);
                let c = self.dims(*x).1;
                let w2 = 2 * w;
                let s = slot(grads, nodes, *x);
                let sd = s.data_mut();
                for y in 0..2 * h {
                    for xx in 0..w2 {
                        let d = ((y / 2) * w + xx / 2) * c;
                        let src = (y * w2 + xx) * c;
                        for ch in 0..c {
                            sd[d + ch] += g.data()[src + ch];
                        }
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (n, c) = self.dims(*x);
                let cg = c / groups;
                let gd = g.data();
                if want(*gamma) {
                    let s = slot(grads, nodes, *gamma);
                    let sd = s.data_mut();
                    for i in 0..n {
                        for ch in 0..c {
                            sd[ch] += gd[i * c + ch] * xhat[i * c + ch];
                        }
                    }
                }
                if want(*beta) {
                    let s = slot(grads, nodes, *beta);
                    let sd = s.data_mut();
                    for i in 0..n {
                        for ch in 0..c {
                            sd[ch] += gd[i * c + ch];
                        }
                    }
                }
                if want(*x) {
                    let gm = nodes[gamma.0].value.data().to_vec();
                    let s = slot(grads, nodes, *x);
                    let sd = s.data_mut();
                    let count = (n * cg) as f64;
                    for grp in 0..*groups {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for i in 0..n {
                            for ch in grp * cg..(grp + 1) * cg {
                                let d = gd[i * c + ch] * gm[ch];
                                sum_d += d;
                                sum_dx += d * xhat[i * c + ch];
                            }
                        }
                        let r = rstd[grp];
                        for i in 0..n {
                            for ch in grp * cg..(grp + 1) * cg {
                                let d = gd[i * c + ch] * gm[ch];
                                sd[i * c + ch] +=
                                    r * (d - sum_d / count - xhat[i * c + ch] * sum_dx / count);
                            }
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.dims(*table).1;
                let s = slot(grads, nodes, *table);
                let sd = s.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        sd[id * d + j] += g.data()[r * d + j];
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let (n, m) = self.dims(*x);
                let s = slot(grads, nodes, *x);
                let sd = s.data_mut();
                for i in 0..n {
                    let y = &value.data()[i * m..(i + 1) * m];
                    let gy = &g.data()[i * m..(i + 1) * m];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        sd[i * m + j] += (gy[j] - y[j] * dot) / norms[i];
                    }
                }
            }
            Op::SumSqDiff(a, b) => {
                let gs = g.data()[0];
                let diff = nodes[a.0].value.sub(&nodes[b.0].value).expect("same shape");
                if want(*a) {
                    slot(grads, nodes, *a).axpy(2.0 * gs, &diff);
                }
                if want(*b) {
                    slot(grads, nodes, *b).axpy(-2.0 * gs, &diff);
                }
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                let (n, m) = self.dims(*logits);
                let gs = g.data()[0] / n as f64;
                let s = slot(grads, nodes, *logits);
                let sd = s.data_mut();
                for i in 0..n {
                    for j in 0..m {
                        let y = if j == targets[i] { 1.0 } else { 0.0 };
                        sd[i * m + j] += gs * (probs[i * m + j] - y);
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let gs = g.data()[0] / targets.len() as f64;
                let z = nodes[logits.0].value.data().to_vec();
                let s = slot(grads, nodes, *logits);
                for ((o, z), y) in s.data_mut().iter_mut().zip(z).zip(targets) {
                    *o += gs * (sigmoid(z) - y);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian, Rng};

    /// Central differences of `f` against the tape for every coordinate of
    /// every parameter in `store`.
    fn check(store: &ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let g = {
            let mut graph = Graph::new(store);
            let out = f(&mut graph);
            graph.backward(out)
        };
        let eval = |s: &ParamStore| {
            let mut graph = Graph::new(s);
            let out = f(&mut graph);
            graph.value(out).data()[0]
        };
        let eps = 1e-6;
        for id in store.ids() {
            for k in 0..store.get(id).len() {
                let mut p = store.clone();
                p.get_mut(id).data_mut()[k] += eps;
                let fp = eval(&p);
                p.get_mut(id).data_mut()[k] -= 2.0 * eps;
                let fm = eval(&p);
                let fd = (fp - fm) / (2.0 * eps);
                let an = g.value(id, k);
                let tol = 1e-6 * (1.0 + fd.abs());
                assert!(
                    (fd - an).abs() < tol,
                    "{}[{k}]: analytic {an} vs numeric {fd}",
                    store.name(id)
                );
            }
        }
    }

    fn rand_store(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore {
        let mut rng = Rng::new(seed);
        let mut s = ParamStore::new();
        for (n, sh) in shapes {
            s.insert(*n, gaussian(&mut rng, sh).unwrap(), true);
        }
        s
    }

    #[test]
    fn matmul_softmax_chain() {
        let s = rand_store(&[("a", &[3, 4]), ("b", &[5, 4]), ("c", &[5, 2]), ("r", &[1, 5])], 1);
        check(&s, |g| {
            let a = g.param(s.id("a").unwrap());
            let b = g.param(s.id("b").unwrap());
            let c = g.param(s.id("c").unwrap());
            let r = g.param(s.id("r").unwrap());
            let l = g.matmul_nt(a, b).unwrap();
            let l = g.add_row(l, r).unwrap();
            let p = g.softmax_rows(l);
            let o = g.matmul(p, c).unwrap();
            let o = g.silu(o);
            let t = g.input(Tensor::full(&[3, 2], 0.3));
            g.sum_sq_diff(o, t).unwrap()
        });
    }

    #[test]
    fn conv_pool_norm_chain() {
        let s = rand_store(
            &[
                ("x", &[16, 2]),
                ("w", &[18, 4]),
                ("gamma", &[4]),
                ("beta", &[4]),
                ("skip", &[4, 4]),
            ],
            2,
        );
        check(&s, |g| {
            let x = g.param(s.id("x").unwrap());
            let w = g.param(s.id("w").unwrap());
            let cols = g.im2col3(x, 4, 4).unwrap();
            let h = g.matmul(cols, w).unwrap();
            let gm = g.param(s.id("gamma").unwrap());
            let bt = g.param(s.id("beta").unwrap());
            let h = g.group_norm(h, gm, bt, 2).unwrap();
            let p = g.avg_pool2(h, 4, 4).unwrap();
            let u = g.upsample2(p, 2, 2).unwrap();
            let sk = g.param(s.id("skip").unwrap());
            let u2 = g.matmul(u, sk).unwrap();
            let cat = g.concat_cols(&[u2, h]).unwrap();
            let rows = g.concat_rows(&[cat, cat]).unwrap();
            let m = g.mean_rows(rows);
            let sq = g.mul(m, m).unwrap();
            let zero = g.input(Tensor::zeros(&[1, 8]));
            g.sum_sq_diff(sq, zero).unwrap()
        });
    }

    #[test]
    fn embedding_norm_and_losses() {
        let s = rand_store(&[("table", &[6, 3]), ("w", &[3, 4])], 3);
        check(&s, |g| {
            let t = g.param(s.id("table").unwrap());
            let e = g.gather_rows(t, &[0, 2, 2, 5]).unwrap();
            let e = g.l2_normalize_rows(e);
            let w = g.param(s.id("w").unwrap());
            let logits = g.matmul(e, w).unwrap();
            let ce = g.cross_entropy_rows(logits, &[1, 0, 3, 2]).unwrap();
            let one = g.gather_rows(t, &[4]).unwrap();
            let first = g.matmul(one, w).unwrap();
            let bce = g.bce_with_logits(first, &[1.0, 0.0, 0.0, 1.0]).unwrap();
            let sc = g.scale(bce, 0.3);
            g.add(ce, sc).unwrap()
        });
    }

    #[test]
    fn inference_graph_records_no_gradients() {
        let s = rand_store(&[("a", &[2, 2])], 4);
        let mut g = Graph::inference(&s);
        let a = g.param(s.id("a").unwrap());
        let zero = g.input(Tensor::zeros(&[2, 2]));
        let out = g.sum_sq_diff(a, zero).unwrap();
        let grads = g.backward(out);
        assert!(grads.get(s.id("a").unwrap()).is_none());
    }
}
