//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape once in reverse and
//! accumulates parameter gradients into a [`ParamStore`].

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which attention block produced a captured map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnComponent {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

impl AttnComponent {
    pub fn as_str(self) -> &'static str {
        match self {
            AttnComponent::EncoderSelf => "encoder-self",
            AttnComponent::DecoderSelf => "decoder-self",
            AttnComponent::DecoderCross => "decoder-cross",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct AttnTag {
    pub component: AttnComponent,
    pub layer: usize,
}

/// Head-averaged attention maps of one attention call, one per batch item.
#[derive(Clone, Debug)]
pub struct CapturedAttention {
    pub tag: AttnTag,
    pub maps: Vec<Tensor>,
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Tile(Var, usize),
    RepeatRows(Var, usize),
    Relu(Var),
    Sigmoid(Var),
    Scale(Var, f64),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    /// Scalar node whose local gradients were computed during the forward pass.
    Fused { inputs: Vec<Var>, grads: Vec<Tensor> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    capture: Option<Vec<CapturedAttention>>,
    f32_mode: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            capture: None,
            f32_mode: false,
        }
    }

    /// Records head-averaged attention maps for every attention call.
    pub fn with_capture(mut self) -> Self {
        self.capture = Some(Vec::new());
        self
    }

    /// Rounds every computed value to binary32 precision (inference only).
    pub fn with_f32_values(mut self) -> Self {
        self.f32_mode = true;
        self
    }

    pub fn capture_enabled(&self) -> bool {
        self.capture.is_some()
    }

    pub fn take_captured(&mut self) -> Vec<CapturedAttention> {
        self.capture.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if it was needed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.f32_mode {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
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

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `x W + 1 bᵀ` in one node.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (m, k, n) = (vx.rows(), vx.cols(), vw.cols());
        if vw.rows() != k || vb.len() != n {
            return Err(shape_err(format!(
                "affine: {:?} x {:?} + {:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            )));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(vb.data());
        }
        gemm(m, k, n, 1.0, vx.data(), (k, 1), vw.data(), (n, 1), 1.0, &mut out, (n, 1));
        let value = Tensor::matrix(m, n, out);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(value, Op::Affine(x, w, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() || va.cols() != vb.cols() {
            return Err(shape_err(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::matrix(va.rows(), va.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// `x + 1 bᵀ`: adds the single-row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.len() != c {
            return Err(shape_err(format!(
                "add_row: bias of {} values for {c} columns",
                vb.len()
            )));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let value = Tensor::matrix(vx.rows(), c, data);
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(value, Op::AddRow(x, bias), ng))
    }

    /// Stacks `times` copies of `x` vertically.
    pub fn tile(&mut self, x: Var, times: usize) -> Var {
        let vx = self.value(x);
        let mut data = Vec::with_capacity(vx.len() * times);
        for _ in 0..times {
            data.extend_from_slice(vx.data());
        }
        let value = Tensor::matrix(vx.rows() * times, vx.cols(), data);
        let ng = self.ng(x);
        self.push(value, Op::Tile(x, times), ng)
    }

    /// Repeats every row of `x` `times` times in place.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let vx = self.value(x);
        let mut data = Vec::with_capacity(vx.len() * times);
        for r in 0..vx.rows() {
            for _ in 0..times {
                data.extend_from_slice(vx.row(r));
            }
        }
        let value = Tensor::matrix(vx.rows() * times, vx.cols(), data);
        let ng = self.ng(x);
        self.push(value, Op::RepeatRows(x, times), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::matrix(1, 1, vec![self.value(x).sum()]);
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let c = vx.cols();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.len() != c || vb.len() != c {
            return Err(shape_err(format!("layer_norm: affine size != {c}")));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let value = Tensor::matrix(rows, c, out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over `batch` independent items.
    ///
    /// `q` holds `batch * m` rows, `k` and `v` hold `batch * n` rows; the
    /// columns of each are split evenly across `heads`. Row `i` of item `b`
    /// attends only to keys of item `b`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        tag: Option<AttnTag>,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        let dv = vv.cols();
        if vk.cols() != d {
            return Err(shape_err(format!(
                "attention: query dim {d} != key dim {}",
                vk.cols()
            )));
        }
        if vk.rows() != vv.rows() {
            return Err(shape_err("attention: key and value counts differ".into()));
        }
        if batch == 0
            || heads == 0
            || vq.rows() % batch != 0
            || vk.rows() % batch != 0
            || d % heads != 0
            || dv % heads != 0
        {
            return Err(shape_err(format!(
                "attention: cannot split {}x{d} / {}x{dv} into {batch} items and {heads} heads",
                vq.rows(),
                vk.rows()
            )));
        }
        let m = vq.rows() / batch;
        let n = vk.rows() / batch;
        let dh = d / heads;
        let dvh = dv / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * m * n];
        let mut out = vec![0.0; batch * m * dv];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * m * n..(b * heads + h + 1) * m * n];
                gemm(
                    m,
                    dh,
                    n,
                    scale,
                    &vq.data()[b * m * d + h * dh..],
                    (d, 1),
                    &vk.data()[b * n * d + h * dh..],
                    (1, d),
                    0.0,
                    p,
                    (n, 1),
                );
                for row in p.chunks_mut(n) {
                    softmax_in_place(row);
                }
                gemm(
                    m,
                    n,
                    dvh,
                    1.0,
                    p,
                    (n, 1),
                    &vv.data()[b * n * dv + h * dvh..],
                    (dv, 1),
                    0.0,
                    &mut out[b * m * dv + h * dvh..],
                    (dv, 1),
                );
            }
        }
        if let (Some(cap), Some(tag)) = (self.capture.as_mut(), tag) {
            let maps = (0..batch)
                .map(|b| {
                    let mut avg = vec![0.0; m * n];
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * m * n..(b * heads + h + 1) * m * n];
                        for (a, x) in avg.iter_mut().zip(p) {
                            *a += x;
                        }
                    }
                    for a in &mut avg {
                        *a /= heads as f64;
                    }
                    Tensor::matrix(m, n, avg)
                })
                .collect();
            cap.push(CapturedAttention { tag, maps });
        }
        let value = Tensor::matrix(batch * m, dv, out);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Adds a scalar node whose value and input gradients were computed
    /// together by the caller.
    pub fn fused_scalar(&mut self, inputs: Vec<Var>, value: f64, grads: Vec<Tensor>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(shape_err("fused node: one gradient per input".into()));
        }
        for (i, g) in inputs.iter().zip(&grads) {
            if self.value(*i).len() != g.len() {
                return Err(shape_err("fused node: gradient shape mismatch".into()));
            }
        }
        let ng = inputs.iter().any(|&i| self.ng(i));
        Ok(self.push(
            Tensor::matrix(1, 1, vec![value]),
            Op::Fused { inputs, grads },
            ng,
        ))
    }

    /// Mean softmax cross-entropy of `logits` rows against integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, c) = (vl.rows(), vl.cols());
        if targets.len() != rows || targets.iter().any(|&t| t >= c) {
            return Err(shape_err("cross-entropy: bad targets".into()));
        }
        let mut grad = vec![0.0; rows * c];
        let mut loss = 0.0;
        for r in 0..rows {
            let g = &mut grad[r * c..(r + 1) * c];
            g.copy_from_slice(vl.row(r));
            softmax_in_place(g);
            loss -= g[targets[r]].max(1e-300).ln();
            g[targets[r]] -= 1.0;
            for x in g.iter_mut() {
                *x /= rows as f64;
            }
        }
        let grad = Tensor::matrix(rows, c, grad);
        self.fused_scalar(vec![logits], loss / rows as f64, vec![grad])
    }

    /// Reverse pass from a scalar `loss`, accumulating into `store` grads.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this graph; build a new graph".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::matrix(1, 1, vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads, store);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        store: &mut ParamStore,
    ) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // moves `src` into an empty slot instead of zero-filling then adding
        let pass = |grads: &mut [Option<Tensor>], v: Var, src: &Tensor| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(slot) => add_into(slot.data_mut(), src.data()),
                empty => *empty = Some(src.clone().reshape(nodes[v.0].value.shape().to_vec()).expect("same size")),
            }
        };
        pass_through(node, g, grads, &pass);
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                for (a, b) in store.grad_mut(*id).data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // dA = dC Bᵀ
                acc(*a, &|da| {
                    gemm(m, n, k, 1.0, g.data(), (n, 1), vb.data(), (1, n), 1.0, da, (k, 1))
                });
                // dB = Aᵀ dC
                acc(*b, &|db| {
                    gemm(k, m, n, 1.0, va.data(), (1, k), g.data(), (n, 1), 1.0, db, (n, 1))
                });
            }
            Op::Add(..) => {}
            Op::Affine(x, w, b) => {
                let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
                let (m, k, n) = (vx.rows(), vx.cols(), vw.cols());
                acc(*x, &|dx| {
                    gemm(m, n, k, 1.0, g.data(), (n, 1), vw.data(), (1, n), 1.0, dx, (k, 1))
                });
                acc(*w, &|dw| {
                    gemm(k, m, n, 1.0, vx.data(), (1, k), g.data(), (n, 1), 1.0, dw, (n, 1))
                });
                acc(*b, &|db| {
                    for row in g.data().chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::AddRow(_, bias) => {
                let c = g.cols();
                acc(*bias, &|d| {
                    for row in g.data().chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Tile(x, times) => {
                let len = nodes[x.0].value.len();
                acc(*x, &|d| {
                    for t in 0..*times {
                        add_into(d, &g.data()[t * len..(t + 1) * len]);
                    }
                });
            }
            Op::RepeatRows(x, times) => {
                let c = g.cols();
                acc(*x, &|d| {
                    for (r, dst) in d.chunks_mut(c).enumerate() {
                        for t in 0..*times {
                            let src = &g.data()[(r * times + t) * c..(r * times + t + 1) * c];
                            add_into(dst, src);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let vx = &nodes[x.0].value;
                acc(*x, &|d| {
                    for ((o, gi), xi) in d.iter_mut().zip(g.data()).zip(vx.data()) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(*x, &|d| {
                    for ((o, gi), yi) in d.iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &|d| {
                    for (o, gi) in d.iter_mut().zip(g.data()) {
                        *o += gi * s;
                    }
                });
            }
            Op::Sum(x) => {
                let gs = g.data()[0];
                acc(*x, &|d| {
                    for o in d.iter_mut() {
                        *o += gs;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = g.cols();
                let vg = &nodes[gamma.0].value;
                acc(*gamma, &|d| {
                    for (grow, hrow) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*beta, &|d| {
                    for grow in g.data().chunks(c) {
                        add_into(d, grow);
                    }
                });
                acc(*x, &|d| {
                    let mut dh = vec![0.0; c];
                    for (r, drow) in d.chunks_mut(c).enumerate() {
                        let grow = &g.data()[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        let mut mean_dh = 0.0;
                        let mut mean_dhh = 0.0;
                        for j in 0..c {
                            dh[j] = grow[j] * vg.data()[j];
                            mean_dh += dh[j];
                            mean_dhh += dh[j] * hrow[j];
                        }
                        mean_dh /= c as f64;
                        mean_dhh /= c as f64;
                        for j in 0..c {
                            drow[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => {
                let (vq, vk, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let (batch, heads) = (*batch, *heads);
                let d = vq.cols();
                let dv = vv.cols();
                let m = vq.rows() / batch;
                let n = vk.rows() / batch;
                let dh = d / heads;
                let dvh = dv / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let go = g.data();
                let want_q = nodes[q.0].needs_grad;
                let want_k = nodes[k.0].needs_grad;
                let want_v = nodes[v.0].needs_grad;
                let mut dq = vec![0.0; if want_q { vq.len() } else { 0 }];
                let mut dk = vec![0.0; if want_k { vk.len() } else { 0 }];
                let mut dvv = vec![0.0; if want_v { vv.len() } else { 0 }];
                // one (item, head) block at a time keeps dS in cache
                let mut ds = vec![0.0; m * n];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = (b * heads + h) * m * n;
                        let p = &probs[off..off + m * n];
                        let go_bh = &go[b * m * dv + h * dvh..];
                        if want_v {
                            // dV = Pᵀ dO
                            gemm(n, m, dvh, 1.0, p, (1, n), go_bh, (dv, 1), 1.0,
                                &mut dvv[b * n * dv + h * dvh..], (dv, 1));
                        }
                        if !(want_q || want_k) {
                            continue;
                        }
                        // dP = dO Vᵀ, then dS = P ⊙ (dP - rowsum(dP ⊙ P))
                        gemm(m, dvh, n, 1.0, go_bh, (dv, 1), &vv.data()[b * n * dv + h * dvh..],
                            (1, dv), 0.0, &mut ds, (n, 1));
                        for (drow, prow) in ds.chunks_mut(n).zip(p.chunks(n)) {
                            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for (x, pv) in drow.iter_mut().zip(prow) {
                                *x = pv * (*x - dot);
                            }
                        }
                        if want_q {
                            gemm(m, n, dh, scale, &ds, (n, 1), &vk.data()[b * n * d + h * dh..],
                                (d, 1), 1.0, &mut dq[b * m * d + h * dh..], (d, 1));
                        }
                        if want_k {
                            gemm(n, m, dh, scale, &ds, (1, n), &vq.data()[b * m * d + h * dh..],
                                (d, 1), 1.0, &mut dk[b * n * d + h * dh..], (d, 1));
                        }
                    }
                }
                if want_q {
                    acc(*q, &|dst| add_into(dst, &dq));
                }
                if want_k {
                    acc(*k, &|dst| add_into(dst, &dk));
                }
                if want_v {
                    acc(*v, &|dst| add_into(dst, &dvv));
                }
            }
            Op::Fused { inputs, grads: local } => {
                let gs = g.data()[0];
                for (x, lg) in inputs.iter().zip(local) {
                    acc(*x, &|d| {
                        for (o, l) in d.iter_mut().zip(lg.data()) {
                            *o += gs * l;
                        }
                    });
                }
            }
        }
    }
}

/// Gradient routing for ops whose input gradient equals the output gradient.
fn pass_through(
    node: &Node,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
    pass: &dyn Fn(&mut [Option<Tensor>], Var, &Tensor),
) {
    match &node.op {
        Op::Add(a, b) => {
            pass(grads, *a, g);
            pass(grads, *b, g);
        }
        Op::AddRow(x, _) => pass(grads, *x, g),
        _ => {}
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for x in row.iter_mut() {
        *x = exp_nonpositive(*x - max);
    }
    let sum: f64 = row.iter().sum();
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// `exp(x)` for `x <= 0`, branch-free so softmax rows vectorize.
///
/// Cody–Waite reduction `x = k ln2 + r`, `|r| <= ln2/2`, then a degree-13
/// Taylor polynomial (truncation below 1e-17 relative). Inputs below -708
/// are clamped, which only matters for weights far below f64 resolution.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    const INV_LN2: f64 = std::f64::consts::LOG2_E;
    // adding 1.5 * 2^52 rounds to the nearest integer in the low mantissa bits
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let x = x.clamp(-708.0, 0.0);
    let t = x * INV_LN2 + SHIFT;
    let k = t - SHIFT;
    let r = x - k * LN2_HI - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let ki = (t.to_bits() as i64).wrapping_sub(SHIFT.to_bits() as i64);
    p * f64::from_bits(((ki + 1023) << 52) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register(name, t);
        (s, id)
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let (mut s, id) = store_with("w", Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]));
        let mut g = Graph::new();
        let w = g.param(&s, id);
        let loss = g.sum(w);
        g.backward(loss, &mut s).unwrap();
        assert!(s.grad(id).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn half_squared_norm_of_wx_matches_closed_form() {
        // loss = ½‖Wx‖² ⇒ ∂loss/∂W = (Wx) xᵀ
        let w0 = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 1.1, 0.4, -0.7]);
        let x0 = Tensor::matrix(3, 1, vec![0.9, -1.3, 0.25]);
        let (mut s, id) = store_with("w", w0.clone());
        let mut g = Graph::new();
        let w = g.param(&s, id);
        let x = g.input(x0.clone());
        let y = g.matmul(w, x).unwrap();
        let wx = g.value(y).clone();
        let loss = {
            let vals = wx.data().to_vec();
            let grad = Tensor::matrix(2, 1, vals.clone());
            let value = 0.5 * vals.iter().map(|v| v * v).sum::<f64>();
            g.fused_scalar(vec![y], value, vec![grad]).unwrap()
        };
        g.backward(loss, &mut s).unwrap();
        let expected = wx.matmul(&x0.transpose()).unwrap();
        assert!(s.grad(id).max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeats() {
        let (mut s, id) = store_with("w", Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let mut g = Graph::new();
        let w = g.param(&s, id);
        assert!(matches!(g.backward(w, &mut s), Err(Error::Usage(_))));
        let loss = g.sum(w);
        g.backward(loss, &mut s).unwrap();
        assert!(matches!(g.backward(loss, &mut s), Err(Error::Usage(_))));
    }

    #[test]
    fn fast_exp_matches_libm() {
        let mut worst: f64 = 0.0;
        for i in 0..200_000 {
            let x = -(i as f64) * 3.5e-3;
            let rel = (exp_nonpositive(x) - x.exp()).abs() / x.exp();
            worst = worst.max(rel);
        }
        assert!(worst < 4e-16, "worst relative error {worst:e}");
        assert_eq!(exp_nonpositive(0.0), 1.0);
    }

    #[test]
    fn attention_with_single_key_copies_value() {
        let mut g = Graph::new();
        let q = g.input(Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.0, 4.0, 4.0]));
        let k = g.input(Tensor::matrix(1, 2, vec![0.3, 0.1]));
        let v = g.input(Tensor::matrix(1, 2, vec![5.0, -6.0]));
        let o = g.attention(q, k, v, 1, 1, None).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(o).row(r), &[5.0, -6.0]);
        }
    }
}
