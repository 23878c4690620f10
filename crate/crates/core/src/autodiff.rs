//! Reverse-mode differentiation over a recorded tape of coarse tensor ops.
//!
//! Nodes are appended in execution order, so every node's inputs precede it
//! and walking the tape backwards visits nodes in reverse topological order.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{conv2d_batch, conv2d_batch_backward, linear, sigmoid, silu, silu_grad, softplus, NORM_EPS};
use crate::ssm::{causal_depthwise_conv1d, zoh_coefficients, zoh_with_grads};
use crate::tensor::{Permutation, Real, Tensor};
use crate::transfer::{gaussian_row, kernel_softmax_rows, LossForm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `(grad_out, inputs, output) -> grad per input`.
type BackwardFn<R> = Box<dyn Fn(&Tensor<R>, &[&Tensor<R>], &Tensor<R>) -> Vec<Option<Tensor<R>>> + Send + Sync>;

pub struct TapeNode<R: Real> {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    value: Tensor<R>,
    requires_grad: bool,
    backward: Option<BackwardFn<R>>,
    leaf: bool,
}

#[derive(Default)]
pub struct Tape<R: Real> {
    nodes: Vec<TapeNode<R>>,
}

pub struct Gradients<R: Real> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<R>) -> Tensor<R> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<R>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TapeNode<R> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, op: &'static str, value: Tensor<R>, requires_grad: bool) -> Var {
        self.nodes.push(TapeNode {
            op,
            inputs: Vec::new(),
            value,
            requires_grad,
            backward: None,
            leaf: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<R>) -> Var {
        self.leaf("param", value, true)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf("constant", value, false)
    }

    /// Records an op. `backward` may be `None` for ops without a rule; a
    /// gradient reaching such a node is an error.
    pub fn push(&mut self, op: &'static str, inputs: &[Var], value: Tensor<R>, backward: Option<BackwardFn<R>>) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires(v));
        self.nodes.push(TapeNode {
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            value,
            requires_grad,
            backward,
            leaf: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), R::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let rule = node.backward.as_ref().ok_or_else(|| Error::MissingBackward(node.op.into()))?;
            for &p in &node.inputs {
                if p >= i {
                    return Err(Error::TapeCycle { node: i, parent: p });
                }
            }
            let inputs: Vec<&Tensor<R>> = node.inputs.iter().map(|&p| &self.nodes[p].value).collect();
            let parts = rule(&g, &inputs, &node.value);
            if parts.len() != node.inputs.len() {
                return Err(Error::MissingBackward(format!("{} returned {} gradients", node.op, parts.len())));
            }
            for (&p, part) in node.inputs.iter().zip(parts) {
                let Some(part) = part else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if part.shape() != self.nodes[p].value.shape() {
                    return Err(Error::shape(format!(
                        "{} produced gradient {:?} for input {:?}",
                        node.op,
                        part.shape(),
                        self.nodes[p].value.shape()
                    )));
                }
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(part.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(part),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // ---- ops ---------------------------------------------------------------

    /// `x · wᵀ + b` for `x: [n, d_in]`, `w: [d_out, d_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let want_x = self.requires(x);
        Ok(self.push(
            "linear",
            &inputs,
            value,
            Some(Box::new(move |g, ins, _| {
                let (x, w) = (ins[0], ins[1]);
                let (n, d_in) = x.dims2().expect("rank 2");
                let d_out = w.dim(0);
                let (gd, xd, wd) = (g.data(), x.data(), w.data());
                let gx = want_x.then(|| {
                    let mut gx = vec![R::zero(); n * d_in];
                    for (row, grow) in gx.chunks_mut(d_in).zip(gd.chunks(d_out)) {
                        for (o, &go) in grow.iter().enumerate() {
                            for (slot, &wv) in row.iter_mut().zip(&wd[o * d_in..(o + 1) * d_in]) {
                                *slot = *slot + go * wv;
                            }
                        }
                    }
                    Tensor::new(vec![n, d_in], gx).expect("shape")
                });
                let mut gw = vec![R::zero(); d_out * d_in];
                let mut gb = vec![R::zero(); d_out];
                for (xrow, grow) in xd.chunks(d_in).zip(gd.chunks(d_out)) {
                    for (o, &go) in grow.iter().enumerate() {
                        gb[o] = gb[o] + go;
                        for (slot, &xv) in gw[o * d_in..(o + 1) * d_in].iter_mut().zip(xrow) {
                            *slot = *slot + go * xv;
                        }
                    }
                }
                let mut out = vec![gx, Some(Tensor::new(vec![d_out, d_in], gw).expect("shape"))];
                if ins.len() == 3 {
                    out.push(Some(Tensor::from_vec(gb)));
                }
                out
            })),
        ))
    }

    /// Same-padded 3×3-style convolution of a `[N, C, H, W]` batch.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let pad = (self.value(w).dim(2).saturating_sub(1)) / 2;
        let value = conv2d_batch(self.value(x), self.value(w), self.value(b), pad)?;
        let want_x = self.requires(x);
        Ok(self.push(
            "conv2d",
            &[x, w, b],
            value,
            Some(Box::new(move |g, ins, _| {
                let (gx, gw, gb) = conv2d_batch_backward(ins[0], ins[1], g, pad, want_x);
                vec![gx, Some(gw), Some(gb)]
            })),
        ))
    }

    /// ReLU with an optional pinned activation pattern; returns the pattern used.
    pub fn relu(&mut self, x: Var, pinned: Option<&[bool]>) -> Result<(Var, Vec<bool>)> {
        let xv = self.value(x);
        let mask: Vec<bool> = match pinned {
            Some(m) if m.len() == xv.numel() => m.to_vec(),
            Some(m) => {
                return Err(Error::shape(format!(
                    "relu mask of {} for {} values",
                    m.len(),
                    xv.numel()
                )))
            }
            None => xv.data().iter().map(|&v| v > R::zero()).collect(),
        };
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(&v, &m)| if m { v } else { R::zero() }).collect(),
        )?;
        let saved = Arc::new(mask.clone());
        let var = self.push(
            "relu",
            &[x],
            value,
            Some(Box::new(move |g, _, out| {
                let gx = g.data().iter().zip(saved.iter()).map(|(&v, &m)| if m { v } else { R::zero() }).collect();
                vec![Some(Tensor::new(out.shape().to_vec(), gx).expect("shape"))]
            })),
        );
        Ok((var, mask))
    }

    fn unary(&mut self, op: &'static str, x: Var, f: fn(R) -> R, df: fn(R) -> R) -> Var {
        let value = self.value(x).map(f);
        self.push(
            op,
            &[x],
            value,
            Some(Box::new(move |g, ins, _| {
                let gx = g.data().iter().zip(ins[0].data()).map(|(&go, &xv)| go * df(xv)).collect();
                vec![Some(Tensor::new(g.shape().to_vec(), gx).expect("shape"))]
            })),
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary("silu", x, silu, silu_grad)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary("softplus", x, softplus, sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "add")?;
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect(),
        )?;
        Ok(self.push("add", &[a, b], value, Some(Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]))))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "mul")?;
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect(),
        )?;
        Ok(self.push(
            "mul",
            &[a, b],
            value,
            Some(Box::new(|g, ins, _| {
                let prod = |other: &Tensor<R>| {
                    Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(other.data()).map(|(&go, &o)| go * o).collect(),
                    )
                    .expect("shape")
                };
                vec![Some(prod(ins[1])), Some(prod(ins[0]))]
            })),
        ))
    }

    /// `out[t, d] = col[t, 0] + row[d]` for `col: [n, 1]`, `row: [d]`.
    pub fn outer_add(&mut self, col: Var, row: Var) -> Result<Var> {
        let (n, one) = self.value(col).dims2()?;
        if one != 1 || self.value(row).rank() != 1 {
            return Err(Error::shape("outer_add takes [n, 1] and [d]"));
        }
        let d = self.value(row).numel();
        let (c, r) = (self.value(col).data(), self.value(row).data());
        let value = Tensor::from_fn(&[n, d], |i| c[i / d] + r[i % d]);
        Ok(self.push(
            "outer_add",
            &[col, row],
            value,
            Some(Box::new(move |g, _, _| {
                let mut gc = vec![R::zero(); n];
                let mut gr = vec![R::zero(); d];
                for (t, grow) in g.data().chunks(d).enumerate() {
                    for (k, &v) in grow.iter().enumerate() {
                        gc[t] = gc[t] + v;
                        gr[k] = gr[k] + v;
                    }
                }
                vec![Some(Tensor::new(vec![n, 1], gc).expect("shape")), Some(Tensor::from_vec(gr))]
            })),
        ))
    }

    pub fn slice_cols(&mut self, x: Var, range: std::ops::Range<usize>) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if range.end > d || range.is_empty() {
            return Err(Error::shape(format!("column range {range:?} of {d}")));
        }
        let width = range.len();
        let mut out = Vec::with_capacity(n * width);
        for row in self.value(x).data().chunks(d) {
            out.extend_from_slice(&row[range.clone()]);
        }
        let value = Tensor::new(vec![n, width], out)?;
        Ok(self.push(
            "slice_cols",
            &[x],
            value,
            Some(Box::new(move |g, _, _| {
                let mut gx = vec![R::zero(); n * d];
                for (dst, src) in gx.chunks_mut(d).zip(g.data().chunks(width)) {
                    dst[range.clone()].copy_from_slice(src);
                }
                vec![Some(Tensor::new(vec![n, d], gx).expect("shape"))]
            })),
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (a, b) = self.value(x).dims2()?;
        let value = transpose2(self.value(x).data(), a, b);
        Ok(self.push(
            "transpose",
            &[x],
            Tensor::new(vec![b, a], value)?,
            Some(Box::new(move |g, _, _| {
                vec![Some(Tensor::new(vec![a, b], transpose2(g.data(), b, a)).expect("shape"))]
            })),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(
            "reshape",
            &[x],
            value,
            Some(Box::new(|g, ins, _| {
                vec![Some(g.clone().reshape(ins[0].shape().to_vec()).expect("same numel"))]
            })),
        ))
    }

    /// `out[i] = x[perm[i]]` over rows.
    pub fn gather_rows(&mut self, x: Var, perm: &Permutation) -> Result<Var> {
        let value = perm.apply_rows(self.value(x))?;
        let inverse = perm.inverse();
        Ok(self.push(
            "gather_rows",
            &[x],
            value,
            Some(Box::new(move |g, _, _| vec![Some(inverse.apply_rows(g).expect("shape"))])),
        ))
    }

    /// Cosine correlation of every level: `[L, C, H, W] × [L, C, H, W] → [L, (H·W)²]`.
    pub fn cosine_levels(&mut self, fs: Var, ft: Var) -> Result<Var> {
        let (l, c, h, w) = self.value(fs).dims4()?;
        self.value(fs).same_shape(self.value(ft), "cosine_levels")?;
        let hw = h * w;
        let (sd, td) = (self.value(fs).data(), self.value(ft).data());
        let mut out = vec![R::zero(); l * hw * hw];
        for lv in 0..l {
            let us = unit_rows(&sd[lv * c * hw..(lv + 1) * c * hw], c, hw).0;
            let ut = unit_rows(&td[lv * c * hw..(lv + 1) * c * hw], c, hw).0;
            let dst = &mut out[lv * hw * hw..(lv + 1) * hw * hw];
            for p in 0..hw {
                for q in 0..hw {
                    dst[p * hw + q] = dot(&us[p * c..(p + 1) * c], &ut[q * c..(q + 1) * c]);
                }
            }
        }
        let value = Tensor::new(vec![l, hw * hw], out)?;
        Ok(self.push(
            "cosine_levels",
            &[fs, ft],
            value,
            Some(Box::new(move |g, ins, _| {
                let (sd, td, gd) = (ins[0].data(), ins[1].data(), g.data());
                let mut gs = vec![R::zero(); l * c * hw];
                let mut gt = vec![R::zero(); l * c * hw];
                for lv in 0..l {
                    let block = lv * c * hw..(lv + 1) * c * hw;
                    let (us, ns) = unit_rows(&sd[block.clone()], c, hw);
                    let (ut, nt) = unit_rows(&td[block.clone()], c, hw);
                    let gl = &gd[lv * hw * hw..(lv + 1) * hw * hw];
                    // gradient w.r.t. the unit vectors
                    let mut gus = vec![R::zero(); hw * c];
                    let mut gut = vec![R::zero(); hw * c];
                    for p in 0..hw {
                        for q in 0..hw {
                            let gv = gl[p * hw + q];
                            for k in 0..c {
                                gus[p * c + k] = gus[p * c + k] + gv * ut[q * c + k];
                                gut[q * c + k] = gut[q * c + k] + gv * us[p * c + k];
                            }
                        }
                    }
                    unit_backward(&us, &ns, &gus, c, hw, &mut gs[block.clone()]);
                    unit_backward(&ut, &nt, &gut, c, hw, &mut gt[block]);
                }
                let shape = ins[0].shape().to_vec();
                vec![
                    Some(Tensor::new(shape.clone(), gs).expect("shape")),
                    Some(Tensor::new(shape, gt).expect("shape")),
                ]
            })),
        ))
    }

    /// Causal depthwise convolution along the sequence axis.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let value = causal_depthwise_conv1d(self.value(x), self.value(kernel), self.value(bias))?;
        Ok(self.push(
            "causal_conv1d",
            &[x, kernel, bias],
            value,
            Some(Box::new(|g, ins, _| {
                let (n, di) = ins[0].dims2().expect("rank 2");
                let k = ins[1].dim(1);
                let (xd, kd, gd) = (ins[0].data(), ins[1].data(), g.data());
                let mut gx = vec![R::zero(); n * di];
                let mut gk = vec![R::zero(); di * k];
                let mut gb = vec![R::zero(); di];
                for t in 0..n {
                    for d in 0..di {
                        let go = gd[t * di + d];
                        gb[d] = gb[d] + go;
                        for j in 0..k {
                            if let Some(src) = (t + j).checked_sub(k - 1) {
                                gk[d * k + j] = gk[d * k + j] + go * xd[src * di + d];
                                gx[src * di + d] = gx[src * di + d] + go * kd[d * k + j];
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(vec![n, di], gx).expect("shape")),
                    Some(Tensor::new(vec![di, k], gk).expect("shape")),
                    Some(Tensor::from_vec(gb)),
                ]
            })),
        ))
    }

    /// Fused ZOH discretization and sequential selective scan. Inputs:
    /// `x, delta: [n, d_inner]`, `a_log: [d_inner, d_state]`,
    /// `b, c: [n, d_state]`, `d_skip: [d_inner]`. Hidden states of every step
    /// are kept for the backward pass.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a_log: Var, b: Var, c: Var, d_skip: Var) -> Result<Var> {
        let (n, di) = self.value(x).dims2()?;
        let (adi, ds) = self.value(a_log).dims2()?;
        if adi != di
            || self.value(delta).shape() != [n, di]
            || self.value(b).shape() != [n, ds]
            || self.value(c).shape() != [n, ds]
            || self.value(d_skip).shape() != [di]
        {
            return Err(Error::shape("selective_scan inputs disagree"));
        }
        let a: Vec<R> = self.value(a_log).data().iter().map(|v| -v.exp()).collect();
        let (xd, dd, bd, cd, skip) = (
            self.value(x).data(),
            self.value(delta).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d_skip).data(),
        );
        // states[t][d][s] after step t
        let mut states = vec![R::zero(); n * di * ds];
        let mut y = vec![R::zero(); n * di];
        let mut h = vec![R::zero(); di * ds];
        for t in 0..n {
            for d in 0..di {
                let dt = dd[t * di + d];
                let xv = xd[t * di + d];
                let hs = &mut h[d * ds..(d + 1) * ds];
                for s in 0..ds {
                    let (ab, psi) = zoh_coefficients(a[d * ds + s], dt);
                    hs[s] = ab * hs[s] + psi * bd[t * ds + s] * xv;
                }
                let mut acc = R::zero();
                for s in 0..ds {
                    acc = acc + cd[t * ds + s] * hs[s];
                }
                y[t * di + d] = acc + skip[d] * xv;
            }
            states[t * di * ds..(t + 1) * di * ds].copy_from_slice(&h);
        }
        let states = Arc::new(states);
        let value = Tensor::new(vec![n, di], y)?;
        Ok(self.push(
            "selective_scan",
            &[x, delta, a_log, b, c, d_skip],
            value,
            Some(Box::new(move |g, ins, _| {
                let (xd, dd, bd, cd, skip) = (ins[0].data(), ins[1].data(), ins[3].data(), ins[4].data(), ins[5].data());
                let a: Vec<R> = ins[2].data().iter().map(|v| -v.exp()).collect();
                let gd = g.data();
                let mut gx = vec![R::zero(); n * di];
                let mut gdelta = vec![R::zero(); n * di];
                let mut ga = vec![R::zero(); di * ds];
                let mut gb = vec![R::zero(); n * ds];
                let mut gc = vec![R::zero(); n * ds];
                let mut gskip = vec![R::zero(); di];
                let mut gh = vec![R::zero(); di * ds];
                for t in (0..n).rev() {
                    let h_t = &states[t * di * ds..(t + 1) * di * ds];
                    for d in 0..di {
                        let go = gd[t * di + d];
                        let xv = xd[t * di + d];
                        let dt = dd[t * di + d];
                        gskip[d] = gskip[d] + go * xv;
                        let mut gxv = go * skip[d];
                        let mut gdt = R::zero();
                        for s in 0..ds {
                            let hi = d * ds + s;
                            gc[t * ds + s] = gc[t * ds + s] + go * h_t[hi];
                            let ghs = gh[hi] + go * cd[t * ds + s];
                            let h_prev = if t > 0 { states[(t - 1) * di * ds + hi] } else { R::zero() };
                            let av = a[hi];
                            let (ab, psi, dpsi_dt, dpsi_da) = zoh_with_grads(av, dt);
                            let bv = bd[t * ds + s];
                            let g_ab = ghs * h_prev;
                            let g_bbar = ghs * xv;
                            gxv = gxv + ghs * psi * bv;
                            gdt = gdt + g_ab * ab * av + g_bbar * bv * dpsi_dt;
                            ga[hi] = ga[hi] + g_ab * ab * dt + g_bbar * bv * dpsi_da;
                            gb[t * ds + s] = gb[t * ds + s] + g_bbar * psi;
                            gh[hi] = ghs * ab;
                        }
                        gx[t * di + d] = gxv;
                        gdelta[t * di + d] = gdt;
                    }
                }
                // a = -exp(a_log)
                let ga_log: Vec<R> = ga.iter().zip(&a).map(|(&g, &av)| g * av).collect();
                vec![
                    Some(Tensor::new(vec![n, di], gx).expect("shape")),
                    Some(Tensor::new(vec![n, di], gdelta).expect("shape")),
                    Some(Tensor::new(vec![di, ds], ga_log).expect("shape")),
                    Some(Tensor::new(vec![n, ds], gb).expect("shape")),
                    Some(Tensor::new(vec![n, ds], gc).expect("shape")),
                    Some(Tensor::from_vec(gskip)),
                ]
            })),
        ))
    }

    /// Row-wise `softmax(G^p ⊙ logits)` over an `h × w` target grid, with
    /// each row's kernel centre `peaks[row]` held fixed.
    pub fn kernel_softmax(&mut self, logits: Var, peaks: Vec<usize>, h: usize, w: usize, sigma: f64) -> Result<Var> {
        let (rows, cols) = self.value(logits).dims2()?;
        if cols != h * w || peaks.len() != rows {
            return Err(Error::shape("kernel_softmax extents"));
        }
        let value = Tensor::new(vec![rows, cols], kernel_softmax_rows(self.value(logits).data(), &peaks, h, w, sigma))?;
        Ok(self.push(
            "kernel_softmax",
            &[logits],
            value,
            Some(Box::new(move |g, _, out| {
                let mut gl = vec![R::zero(); rows * cols];
                for (r, ((dst, p), go)) in gl.chunks_mut(cols).zip(out.data().chunks(cols)).zip(g.data().chunks(cols)).enumerate() {
                    let kernel = gaussian_row::<R>(peaks[r], h, w, sigma);
                    let mean: R = p.iter().zip(go).map(|(&pi, &gi)| pi * gi).sum();
                    for q in 0..cols {
                        dst[q] = kernel[q] * p[q] * (go[q] - mean);
                    }
                }
                vec![Some(Tensor::new(vec![rows, cols], gl).expect("shape"))]
            })),
        ))
    }

    /// `x · m + bias` with a constant `m: [k, j]` and optional constant bias `[j]`.
    pub fn matmul_const(&mut self, x: Var, m: Tensor<R>, bias: Option<Vec<R>>) -> Result<Var> {
        let (rows, k) = self.value(x).dims2()?;
        let (mk, j) = m.dims2()?;
        if mk != k || bias.as_ref().is_some_and(|b| b.len() != j) {
            return Err(Error::shape("matmul_const extents"));
        }
        let xd = self.value(x).data();
        let md = m.data();
        let mut out = vec![R::zero(); rows * j];
        for (orow, xrow) in out.chunks_mut(j).zip(xd.chunks(k)) {
            for (c, slot) in orow.iter_mut().enumerate() {
                let mut acc = bias.as_ref().map_or(R::zero(), |b| b[c]);
                for (i, &xv) in xrow.iter().enumerate() {
                    acc = acc + xv * md[i * j + c];
                }
                *slot = acc;
            }
        }
        let value = Tensor::new(vec![rows, j], out)?;
        Ok(self.push(
            "matmul_const",
            &[x],
            value,
            Some(Box::new(move |g, _, _| {
                let md = m.data();
                let mut gx = vec![R::zero(); rows * k];
                for (dst, grow) in gx.chunks_mut(k).zip(g.data().chunks(j)) {
                    for (i, slot) in dst.iter_mut().enumerate() {
                        *slot = grow.iter().zip(&md[i * j..(i + 1) * j]).map(|(&a, &b)| a * b).sum();
                    }
                }
                vec![Some(Tensor::new(vec![rows, k], gx).expect("shape"))]
            })),
        ))
    }

    /// Sparse constant-weighted row mixing: `out[r] = Σ weight · x[src]` for
    /// each `(src, weight)` of `rows[r]`.
    pub fn mix_rows(&mut self, x: Var, rows: Vec<Vec<(usize, R)>>) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if rows.iter().flatten().any(|&(src, _)| src >= n) || rows.is_empty() {
            return Err(Error::shape("mix_rows source out of range"));
        }
        let xd = self.value(x).data();
        let mut out = vec![R::zero(); rows.len() * d];
        for (dst, mix) in out.chunks_mut(d).zip(&rows) {
            for &(src, wt) in mix {
                for (slot, &v) in dst.iter_mut().zip(&xd[src * d..(src + 1) * d]) {
                    *slot = *slot + wt * v;
                }
            }
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        Ok(self.push(
            "mix_rows",
            &[x],
            value,
            Some(Box::new(move |g, _, _| {
                let mut gx = vec![R::zero(); n * d];
                for (grow, mix) in g.data().chunks(d).zip(&rows) {
                    for &(src, wt) in mix {
                        for (slot, &v) in gx[src * d..(src + 1) * d].iter_mut().zip(grow) {
                            *slot = *slot + wt * v;
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, d], gx).expect("shape"))]
            })),
        ))
    }

    /// Mean (squared) Euclidean distance between `[M, 2]` predictions and constants.
    pub fn keypoint_loss(&mut self, pred: Var, target: Tensor<R>, form: LossForm) -> Result<Var> {
        let (m, two) = self.value(pred).dims2()?;
        if two != 2 || target.shape() != [m, 2] {
            return Err(Error::shape("keypoint_loss expects [M, 2] pairs"));
        }
        let diffs: Vec<R> = self.value(pred).data().iter().zip(target.data()).map(|(&p, &t)| p - t).collect();
        let mut total = R::zero();
        for e in diffs.chunks(2) {
            let sq = e[0] * e[0] + e[1] * e[1];
            total = total
                + match form {
                    LossForm::Squared => sq,
                    LossForm::Euclidean => sq.sqrt(),
                };
        }
        let scale = R::one() / R::of(m as f64);
        let value = Tensor::from_vec(vec![total * scale]);
        Ok(self.push(
            "keypoint_loss",
            &[pred],
            value,
            Some(Box::new(move |g, _, _| {
                let go = g.data()[0] * scale;
                let mut gp = Vec::with_capacity(m * 2);
                for e in diffs.chunks(2) {
                    let factor = match form {
                        LossForm::Squared => R::of(2.0),
                        LossForm::Euclidean => {
                            let norm = (e[0] * e[0] + e[1] * e[1]).sqrt();
                            if norm > R::zero() {
                                R::one() / norm
                            } else {
                                R::zero()
                            }
                        }
                    };
                    gp.push(go * factor * e[0]);
                    gp.push(go * factor * e[1]);
                }
                vec![Some(Tensor::new(vec![m, 2], gp).expect("shape"))]
            })),
        ))
    }
}

fn transpose2<R: Real>(data: &[R], a: usize, b: usize) -> Vec<R> {
    let mut out = vec![R::zero(); a * b];
    for i in 0..a {
        for j in 0..b {
            out[j * a + i] = data[i * b + j];
        }
    }
    out
}

fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `[C, HW]` channel-major features to unit rows `[HW, C]` plus their norms.
fn unit_rows<R: Real>(data: &[R], c: usize, hw: usize) -> (Vec<R>, Vec<R>) {
    let mut rows = vec![R::zero(); hw * c];
    for ch in 0..c {
        for p in 0..hw {
            rows[p * c + ch] = data[ch * hw + p];
        }
    }
    let norms = rows.chunks_mut(c).map(crate::numerics::l2_normalize_in_place).collect();
    (rows, norms)
}

/// Pulls a gradient on unit rows back to channel-major features:
/// `∂f = (∂u − u (u·∂u)) / ‖f‖`, zero for guarded rows.
fn unit_backward<R: Real>(units: &[R], norms: &[R], g_units: &[R], c: usize, hw: usize, out: &mut [R]) {
    for p in 0..hw {
        let norm = norms[p];
        if norm <= R::of(NORM_EPS) {
            continue;
        }
        let u = &units[p * c..(p + 1) * c];
        let gu = &g_units[p * c..(p + 1) * c];
        let proj = dot(u, gu);
        for k in 0..c {
            out[k * hw + p] = (gu[k] - u[k] * proj) / norm;
        }
    }
}
