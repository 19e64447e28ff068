//! Reverse-mode autodiff over a flat op tape.
//!
//! A `Graph` owns every tensor of one forward pass. Operations append nodes
//! and hand back `Var` indices; `backward` walks the tape once in reverse and
//! accumulates gradients in a fixed order, so results are bit-identical
//! across runs. Context a backward rule needs (layer-norm statistics, scan
//! states) is saved inside the op variant at forward time.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::mathf;
use crate::ops::{self, ConvSpec};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{axis_split, idx4, shape_string, Tensor};

/// Handle to a node in one `Graph`. Valid only for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Traversal order used to flatten an H x W map into a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    /// Row-major, left to right, top to bottom.
    HorizontalForward,
    /// Row-major reversed.
    HorizontalReverse,
    /// Column-major, top to bottom, left to right.
    VerticalForward,
    /// Column-major reversed.
    VerticalReverse,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::HorizontalForward,
        ScanDirection::HorizontalReverse,
        ScanDirection::VerticalForward,
        ScanDirection::VerticalReverse,
    ];

    /// Grid position of sequence element `l` for an `h` x `w` map.
    #[inline]
    fn coords(self, l: usize, h: usize, w: usize) -> (usize, usize) {
        let (pos, transposed) = match self {
            ScanDirection::HorizontalForward => (l, false),
            ScanDirection::HorizontalReverse => (h * w - 1 - l, false),
            ScanDirection::VerticalForward => (l, true),
            ScanDirection::VerticalReverse => (h * w - 1 - l, true),
        };
        if transposed {
            (pos % h, pos / h)
        } else {
            (pos / w, pos % w)
        }
    }
}

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, s: f32 },
    Silu { x: usize },
    Softplus { x: usize },
    Exp { x: usize },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, d_in: usize, d_out: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, spec: ConvSpec },
    LayerNorm { x: usize, gamma: usize, beta: usize, axis: usize, mean: Vec<f32>, rstd: Vec<f32> },
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Reshape { x: usize },
    SeqFromMap { x: usize, dir: ScanDirection },
    MapFromSeq { x: usize, dir: ScanDirection, h: usize, w: usize },
    Bilinear { x: usize },
    SsmScan { x: usize, delta: usize, b: usize, c: usize, a: usize, state_dim: usize, h: Vec<f32> },
    Mse { a: usize, b: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
}

pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    requires: Vec<bool>,
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Var>,
    store_uid: Option<usize>,
    grads_enabled: bool,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::with_grads(true)
    }

    /// Graph that records values only; leaves never require gradients and
    /// backward context (scan states, norm statistics) is not saved.
    pub fn inference() -> Self {
        Self::with_grads(false)
    }

    fn with_grads(grads_enabled: bool) -> Self {
        Graph {
            ops: Vec::new(),
            values: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            store_uid: None,
            grads_enabled,
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor, requires: bool, op: Op) -> Var {
        let id = self.ops.len();
        self.ops.push(op);
        self.values.push(value);
        self.requires.push(requires && self.grads_enabled);
        self.grads.push(None);
        Var(id)
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), false, Op::Leaf)
    }

    /// Leaf with an explicit requires-grad flag.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, requires_grad, Op::Leaf)
    }

    /// Binds a stored parameter as a leaf, once per graph: repeated calls for
    /// the same id return the same `Var`, so shared weights accumulate one
    /// gradient. A graph may bind parameters from only one store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let uid = store as *const ParamStore as usize;
        match self.store_uid {
            None => self.store_uid = Some(uid),
            Some(prev) => assert_eq!(prev, uid, "graph bound to a different ParamStore"),
        }
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a bound parameter, if it was used and received one.
    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&v| self.grad(v))
    }

    pub fn bound_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn req(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.requires[v])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(shape_err(
                op,
                format!(
                    "operands {} vs {}",
                    shape_string(self.values[a.0].shape()),
                    shape_string(self.values[b.0].shape())
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x + y);
        Ok(self.push(data, self.req(&[a.0, b.0]), Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x - y);
        Ok(self.push(data, self.req(&[a.0, b.0]), Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x * y);
        Ok(self.push(data, self.req(&[a.0, b.0]), Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let data = self.values[x.0].map(|v| v * s);
        self.push(data, self.req(&[x.0]), Op::Scale { x: x.0, s })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let data = self.values[x.0].map(|v| v * mathf::sigmoidf(v));
        self.push(data, self.req(&[x.0]), Op::Silu { x: x.0 })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let data = self.values[x.0].map(mathf::softplusf);
        self.push(data, self.req(&[x.0]), Op::Softplus { x: x.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.values[x.0].map(mathf::expf);
        self.push(data, self.req(&[x.0]), Op::Exp { x: x.0 })
    }

    /// x: (..., d_in) times w: (d_out, d_in), plus optional bias (d_out).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xt = &self.values[x.0];
        let (d_out, d_in) = self.values[w.0].dims2("linear weight")?;
        if xt.rank() == 0 || *xt.shape().last().unwrap() != d_in {
            return Err(shape_err(
                "linear",
                format!(
                    "input {} last axis must equal weight in-dim {}",
                    shape_string(xt.shape()),
                    d_in
                ),
            ));
        }
        if let Some(bv) = b {
            if self.values[bv.0].shape() != [d_out] {
                return Err(shape_err(
                    "linear",
                    format!(
                        "bias {} does not match out-dim {}",
                        shape_string(self.values[bv.0].shape()),
                        d_out
                    ),
                ));
            }
        }
        let rows = xt.numel() / d_in;
        let xs = xt.data();
        let ws = self.values[w.0].data();
        let mut out = vec![0.0f32; rows * d_out];
        for r in 0..rows {
            let xrow = &xs[r * d_in..(r + 1) * d_in];
            let orow = &mut out[r * d_out..(r + 1) * d_out];
            for (o, slot) in orow.iter_mut().enumerate() {
                let wrow = &ws[o * d_in..(o + 1) * d_in];
                let mut acc = match b {
                    Some(bv) => self.values[bv.0].data()[o],
                    None => 0.0,
                };
                for i in 0..d_in {
                    acc += xrow[i] * wrow[i];
                }
                *slot = acc;
            }
        }
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![x.0, w.0];
        if let Some(bv) = b {
            inputs.push(bv.0);
        }
        let requires = self.req(&inputs);
        Ok(self.push(
            value,
            requires,
            Op::Linear { x: x.0, w: w.0, b: b.map(|v| v.0), rows, d_in, d_out },
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let value = ops::conv2d(
            &self.values[x.0],
            &self.values[w.0],
            b.map(|v| &self.values[v.0]),
            spec,
        )?;
        let mut inputs = vec![x.0, w.0];
        if let Some(bv) = b {
            inputs.push(bv.0);
        }
        let requires = self.req(&inputs);
        Ok(self.push(value, requires, Op::Conv2d { x: x.0, w: w.0, b: b.map(|v| v.0), spec }))
    }

    /// Normalizes along `axis`, then applies per-index scale and shift.
    pub fn layer_norm(&mut self, x: Var, axis: usize, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let xt = &self.values[x.0];
        if axis >= xt.rank() {
            return Err(Error::Axis { op: "layer_norm", axis, rank: xt.rank() });
        }
        let (outer, len, inner) = axis_split(xt.shape(), axis);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.values[v.0].shape() != [len] {
                return Err(shape_err(
                    "layer_norm",
                    format!(
                        "{} {} does not match axis extent {}",
                        name,
                        shape_string(self.values[v.0].shape()),
                        len
                    ),
                ));
            }
        }
        let xs = xt.data();
        let gs = self.values[gamma.0].data();
        let bs = self.values[beta.0].data();
        let mut out = vec![0.0f32; xs.len()];
        let mut means = vec![0.0f32; outer * inner];
        let mut rstds = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mean = 0.0f32;
                for c in 0..len {
                    mean += xs[base + c * inner];
                }
                mean /= len as f32;
                let mut var = 0.0f32;
                for c in 0..len {
                    let d = xs[base + c * inner] - mean;
                    var += d * d;
                }
                var /= len as f32;
                let rstd = 1.0 / mathf::sqrtf(var + eps);
                means[o * inner + i] = mean;
                rstds[o * inner + i] = rstd;
                for c in 0..len {
                    let xhat = (xs[base + c * inner] - mean) * rstd;
                    out[base + c * inner] = xhat * gs[c] + bs[c];
                }
            }
        }
        let requires = self.req(&[x.0, gamma.0, beta.0]);
        let value = Tensor::new(xt.shape(), out)?;
        let (mean, rstd) = if requires { (means, rstds) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            value,
            requires,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, axis, mean, rstd },
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err("concat", "no operands".into()))?;
        let rank = self.values[first.0].rank();
        if axis >= rank {
            return Err(Error::Axis { op: "concat", axis, rank });
        }
        let mut total = 0usize;
        for v in xs {
            let s = self.values[v.0].shape();
            if s.len() != rank
                || s[..axis] != self.values[first.0].shape()[..axis]
                || s[axis + 1..] != self.values[first.0].shape()[axis + 1..]
            {
                return Err(shape_err(
                    "concat",
                    format!(
                        "operand {} incompatible with {} along axis {}",
                        shape_string(s),
                        shape_string(self.values[first.0].shape()),
                        axis
                    ),
                ));
            }
            total += s[axis];
        }
        let mut shape = self.values[first.0].shape().to_vec();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0f32; shape.iter().product()];
        let mut at = 0usize;
        for v in xs {
            let src = &self.values[v.0];
            let len = src.shape()[axis];
            ops::copy_axis_block(src.data(), &mut out, outer, len, total, inner, 0, at, len);
            at += len;
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let requires = self.req(&ids);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, requires, Op::Concat { inputs: ids, axis }))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xt = &self.values[x.0];
        if axis >= xt.rank() {
            return Err(Error::Axis { op: "narrow", axis, rank: xt.rank() });
        }
        let (outer, full, inner) = axis_split(xt.shape(), axis);
        if len == 0 || start + len > full {
            return Err(shape_err(
                "narrow",
                format!("[{start}, {}) outside axis {axis} extent {full}", start + len),
            ));
        }
        let mut shape = xt.shape().to_vec();
        shape[axis] = len;
        let mut out = vec![0.0f32; outer * len * inner];
        ops::copy_axis_block(xt.data(), &mut out, outer, full, len, inner, start, 0, len);
        let requires = self.req(&[x.0]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, requires, Op::Narrow { x: x.0, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.values[x.0].reshaped(shape)?;
        let requires = self.req(&[x.0]);
        Ok(self.push(value, requires, Op::Reshape { x: x.0 }))
    }

    /// (B, C, H, W) map flattened to a (B, H*W, C) sequence in `dir` order.
    pub fn seq_from_map(&mut self, x: Var, dir: ScanDirection) -> Result<Var> {
        let (batch, ch, h, w) = self.values[x.0].dims4("seq_from_map")?;
        let xs = self.values[x.0].data();
        let l = h * w;
        let mut out = vec![0.0f32; batch * l * ch];
        for b in 0..batch {
            for t in 0..l {
                let (y, xq) = dir.coords(t, h, w);
                let dst = (b * l + t) * ch;
                for c in 0..ch {
                    out[dst + c] = xs[idx4(ch, h, w, b, c, y, xq)];
                }
            }
        }
        let requires = self.req(&[x.0]);
        let value = Tensor::new(&[batch, l, ch], out)?;
        Ok(self.push(value, requires, Op::SeqFromMap { x: x.0, dir }))
    }

    /// Inverse of `seq_from_map` for an `h` x `w` map.
    pub fn map_from_seq(&mut self, x: Var, dir: ScanDirection, h: usize, w: usize) -> Result<Var> {
        let (batch, l, ch) = self.values[x.0].dims3("map_from_seq")?;
        if l != h * w {
            return Err(shape_err(
                "map_from_seq",
                format!("sequence length {} does not match {}x{}", l, h, w),
            ));
        }
        let xs = self.values[x.0].data();
        let mut out = vec![0.0f32; batch * ch * h * w];
        for b in 0..batch {
            for t in 0..l {
                let (y, xq) = dir.coords(t, h, w);
                let src = (b * l + t) * ch;
                for c in 0..ch {
                    out[idx4(ch, h, w, b, c, y, xq)] = xs[src + c];
                }
            }
        }
        let requires = self.req(&[x.0]);
        let value = Tensor::new(&[batch, ch, h, w], out)?;
        Ok(self.push(value, requires, Op::MapFromSeq { x: x.0, dir, h, w }))
    }

    /// Half-pixel-centered bilinear resize of an NCHW map.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = ops::bilinear_resize(&self.values[x.0], out_h, out_w)?;
        let requires = self.req(&[x.0]);
        Ok(self.push(value, requires, Op::Bilinear { x: x.0 }))
    }

    /// Selective state-space scan over a (B, L, C) sequence.
    ///
    /// `delta` (B, L, C) holds positive step sizes, `b`/`c` (B, L, N) the
    /// per-step input and output mixing vectors, `a` (C, N) the negative
    /// state matrix. Per channel and state dim:
    ///   h_t = exp(delta_t * a) * h_{t-1} + delta_t * b_t * x_t
    ///   y_t = sum_n c_t[n] * h_t[n]
    pub fn ssm_scan(&mut self, x: Var, delta: Var, b: Var, c: Var, a: Var) -> Result<Var> {
        let (batch, l, ch) = self.values[x.0].dims3("ssm_scan input")?;
        self.same_shape("ssm_scan delta", x, delta)?;
        let (bb, bl, n) = self.values[b.0].dims3("ssm_scan b")?;
        let (cb, cl, cn) = self.values[c.0].dims3("ssm_scan c")?;
        if (bb, bl) != (batch, l) || (cb, cl) != (batch, l) || cn != n {
            return Err(shape_err(
                "ssm_scan",
                format!(
                    "b {} / c {} do not match input batch {} length {}",
                    shape_string(self.values[b.0].shape()),
                    shape_string(self.values[c.0].shape()),
                    batch,
                    l
                ),
            ));
        }
        if self.values[a.0].shape() != [ch, n] {
            return Err(shape_err(
                "ssm_scan",
                format!(
                    "a {} must be ({}, {})",
                    shape_string(self.values[a.0].shape()),
                    ch,
                    n
                ),
            ));
        }
        let requires = self.req(&[x.0, delta.0, b.0, c.0, a.0]);
        let xs = self.values[x.0].data();
        let ds = self.values[delta.0].data();
        let bs = self.values[b.0].data();
        let cs = self.values[c.0].data();
        let as_ = self.values[a.0].data();
        let mut y = vec![0.0f32; batch * l * ch];
        let mut hbuf = if requires { vec![0.0f32; batch * l * ch * n] } else { Vec::new() };
        let mut state = vec![0.0f32; ch * n];
        for bi in 0..batch {
            state.iter_mut().for_each(|s| *s = 0.0);
            for t in 0..l {
                let step = (bi * l + t) * ch;
                let mix = (bi * l + t) * n;
                for ci in 0..ch {
                    let d = ds[step + ci];
                    debug_assert!(d > 0.0, "ssm_scan requires positive delta, got {d}");
                    let xv = xs[step + ci];
                    let arow = &as_[ci * n..(ci + 1) * n];
                    let srow = &mut state[ci * n..(ci + 1) * n];
                    let mut acc = 0.0f32;
                    for (ni, s) in srow.iter_mut().enumerate() {
                        debug_assert!(arow[ni] < 0.0, "ssm_scan requires negative a");
                        let abar = mathf::expf(d * arow[ni]);
                        *s = abar * *s + d * bs[mix + ni] * xv;
                        acc += cs[mix + ni] * *s;
                    }
                    y[step + ci] = acc;
                }
                if requires {
                    hbuf[(bi * l + t) * ch * n..(bi * l + t + 1) * ch * n].copy_from_slice(&state);
                }
            }
        }
        let value = Tensor::new(&[batch, l, ch], y)?;
        Ok(self.push(
            value,
            requires,
            Op::SsmScan { x: x.0, delta: delta.0, b: b.0, c: c.0, a: a.0, state_dim: n, h: hbuf },
        ))
    }

    /// Mean squared error over all elements; scalar output.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let av = self.values[a.0].data();
        let bv = self.values[b.0].data();
        let mut acc = 0.0f32;
        for i in 0..av.len() {
            let d = av[i] - bv[i];
            acc += d * d;
        }
        let value = Tensor::scalar(acc / av.len() as f32);
        Ok(self.push(value, self.req(&[a.0, b.0]), Op::Mse { a: a.0, b: b.0 }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = 0.0f32;
        for v in self.values[x.0].data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), self.req(&[x.0]), Op::SumAll { x: x.0 })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.values[x.0].numel() as f32;
        let mut acc = 0.0f32;
        for v in self.values[x.0].data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc / n), self.req(&[x.0]), Op::MeanAll { x: x.0 })
    }

    /// Runs reverse accumulation from a scalar loss. May be called once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::NonScalarLoss { numel: self.values[loss.0].numel() });
        }
        if self.backward_done {
            return Err(Error::Invalid {
                what: "backward",
                detail: "gradients were already computed for this graph".into(),
            });
        }
        self.backward_done = true;
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.values[loss.0].shape(), 1.0));
        let Graph { ops, values, requires, grads, .. } = self;
        for i in (0..=loss.0).rev() {
            if !requires[i] {
                continue;
            }
            let gout = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            step_backward(&ops[i], i, &gout, values, requires, grads);
            grads[i] = Some(gout);
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("operands validated")
}

/// Adds `contribution` into the grad slot for node `idx` if it participates.
fn accumulate_grad(
    grads: &mut [Option<Tensor>],
    requires: &[bool],
    values: &[Tensor],
    idx: usize,
    contribution: &[f32],
) {
    if !requires[idx] {
        return;
    }
    let slot = grads[idx].get_or_insert_with(|| Tensor::zeros(values[idx].shape()));
    ops::accumulate(slot.data_mut(), contribution);
}

fn step_backward(
    op: &Op,
    node: usize,
    gout: &Tensor,
    values: &[Tensor],
    requires: &[bool],
    grads: &mut [Option<Tensor>],
) {
    let g = gout.data();
    match *op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            accumulate_grad(grads, requires, values, a, g);
            accumulate_grad(grads, requires, values, b, g);
        }
        Op::Sub { a, b } => {
            accumulate_grad(grads, requires, values, a, g);
            if requires[b] {
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                accumulate_grad(grads, requires, values, b, &neg);
            }
        }
        Op::Mul { a, b } => {
            if requires[a] {
                let da: Vec<f32> =
                    g.iter().zip(values[b].data()).map(|(&gv, &bv)| gv * bv).collect();
                accumulate_grad(grads, requires, values, a, &da);
            }
            if requires[b] {
                let db: Vec<f32> =
                    g.iter().zip(values[a].data()).map(|(&gv, &av)| gv * av).collect();
                accumulate_grad(grads, requires, values, b, &db);
            }
        }
        Op::Scale { x, s } => {
            if requires[x] {
                let dx: Vec<f32> = g.iter().map(|&gv| gv * s).collect();
                accumulate_grad(grads, requires, values, x, &dx);
            }
        }
        Op::Silu { x } => {
            if requires[x] {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(values[x].data())
                    .map(|(&gv, &xv)| {
                        let s = mathf::sigmoidf(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })
                    .collect();
                accumulate_grad(grads, requires, values, x, &dx);
            }
        }
        Op::Softplus { x } => {
            if requires[x] {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(values[x].data())
                    .map(|(&gv, &xv)| gv * mathf::sigmoidf(xv))
                    .collect();
                accumulate_grad(grads, requires, values, x, &dx);
            }
        }
        Op::Exp { x } => {
            if requires[x] {
                let dx: Vec<f32> =
                    g.iter().zip(values[node].data()).map(|(&gv, &yv)| gv * yv).collect();
                accumulate_grad(grads, requires, values, x, &dx);
            }
        }
        Op::Linear { x, w, b, rows, d_in, d_out } => {
            let xs = values[x].data();
            let ws = values[w].data();
            if requires[x] {
                let mut dx = vec![0.0f32; rows * d_in];
                for r in 0..rows {
                    let grow = &g[r * d_out..(r + 1) * d_out];
                    let drow = &mut dx[r * d_in..(r + 1) * d_in];
                    for (o, &gv) in grow.iter().enumerate() {
                        let wrow = &ws[o * d_in..(o + 1) * d_in];
                        for i in 0..d_in {
                            drow[i] += gv * wrow[i];
                        }
                    }
                }
                accumulate_grad(grads, requires, values, x, &dx);
            }
            if requires[w] {
                let mut dw = vec![0.0f32; d_out * d_in];
                for r in 0..rows {
                    let grow = &g[r * d_out..(r + 1) * d_out];
                    let xrow = &xs[r * d_in..(r + 1) * d_in];
                    for (o, &gv) in grow.iter().enumerate() {
                        let wrow = &mut dw[o * d_in..(o + 1) * d_in];
                        for i in 0..d_in {
                            wrow[i] += gv * xrow[i];
                        }
                    }
                }
                accumulate_grad(grads, requires, values, w, &dw);
            }
            if let Some(bv) = b {
                if requires[bv] {
                    let mut db = vec![0.0f32; d_out];
                    for r in 0..rows {
                        for o in 0..d_out {
                            db[o] += g[r * d_out + o];
                        }
                    }
                    accumulate_grad(grads, requires, values, bv, &db);
                }
            }
        }
        Op::Conv2d { x, w, b, spec } => {
            conv2d_backward(x, w, b, spec, g, values, requires, grads);
        }
        Op::LayerNorm { x, gamma, beta, axis, ref mean, ref rstd } => {
            let xt = &values[x];
            let (outer, len, inner) = axis_split(xt.shape(), axis);
            let xs = xt.data();
            let gs = values[gamma].data();
            let mut dx = vec![0.0f32; xs.len()];
            let mut dgamma = vec![0.0f32; len];
            let mut dbeta = vec![0.0f32; len];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let m = mean[o * inner + i];
                    let r = rstd[o * inner + i];
                    let mut s1 = 0.0f32;
                    let mut s2 = 0.0f32;
                    for c in 0..len {
                        let gy = g[base + c * inner];
                        let xhat = (xs[base + c * inner] - m) * r;
                        dgamma[c] += gy * xhat;
                        dbeta[c] += gy;
                        let gh = gy * gs[c];
                        s1 += gh;
                        s2 += gh * xhat;
                    }
                    let nf = len as f32;
                    for c in 0..len {
                        let xhat = (xs[base + c * inner] - m) * r;
                        let gh = g[base + c * inner] * gs[c];
                        dx[base + c * inner] = r * (gh - s1 / nf - xhat * s2 / nf);
                    }
                }
            }
            accumulate_grad(grads, requires, values, x, &dx);
            accumulate_grad(grads, requires, values, gamma, &dgamma);
            accumulate_grad(grads, requires, values, beta, &dbeta);
        }
        Op::Concat { ref inputs, axis } => {
            let shape = values[node].shape();
            let (outer, total, inner) = axis_split(shape, axis);
            let mut at = 0usize;
            for &src in inputs {
                let len = values[src].shape()[axis];
                if requires[src] {
                    let mut part = vec![0.0f32; outer * len * inner];
                    ops::copy_axis_block(g, &mut part, outer, total, len, inner, at, 0, len);
                    accumulate_grad(grads, requires, values, src, &part);
                }
                at += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            if requires[x] {
                let (outer, full, inner) = axis_split(values[x].shape(), axis);
                let len = values[node].shape()[axis];
                let mut dx = vec![0.0f32; values[x].numel()];
                ops::copy_axis_block(g, &mut dx, outer, len, full, inner, 0, start, len);
                accumulate_grad(grads, requires, values, x, &dx);
            }
        }
        Op::Reshape { x } => {
            accumulate_grad(grads, requires, values, x, g);
        }
        Op::SeqFromMap { x, dir } => {
            if requires[x] {
                let (batch, ch, h, w) = values[x].dims4("seq_from_map grad").expect("validated");
                let l = h * w;
                let mut dx = vec![0.0f32; values[x].numel()];
                for b in 0..batch {
                    for t in 0..l {
                        let (y, xq) = dir.coords(t, h, w);
                        let src = (b * l + t) * ch;
                        for c in 0..ch {
                            dx[idx4(ch, h, w, b, c, y, xq)] += g[src + c];
                        }
                    }
                }
                accumulate_grad(grads, requires, values, x, &dx);
            }
        }
        Op::MapFromSeq { x, dir, h, w } => {
            if requires[x] {
                let (batch, l, ch) = values[x].dims3("map_from_seq grad").expect("validated");
                let mut dx = vec![0.0f32; values[x].numel()];
                for b in 0..batch {
                    for t in 0..l {
                        let (y, xq) = dir.coords(t, h, w);
                        let dst = (b * l + t) * ch;
                        for c in 0..ch {
                            dx[dst + c] += g[idx4(ch, h, w, b, c, y, xq)];
                        }
                    }
                }
                accumulate_grad(grads, requires, values, x, &dx);
            }
        }
        Op::Bilinear { x } => {
            if requires[x] {
                let (batch, ch, in_h, in_w) = values[x].dims4("bilinear grad").expect("validated");
                let (_, _, out_h, out_w) = values[node].dims4("bilinear out").expect("validated");
                let mut dx = vec![0.0f32; values[x].numel()];
                for b in 0..batch {
                    for c in 0..ch {
                        for oy in 0..out_h {
                            let (y0, y1, fy) = ops::bilinear_axis(oy, in_h, out_h);
                            for ox in 0..out_w {
                                let (x0, x1, fx) = ops::bilinear_axis(ox, in_w, out_w);
                                let gv = g[idx4(ch, out_h, out_w, b, c, oy, ox)];
                                dx[idx4(ch, in_h, in_w, b, c, y0, x0)] +=
                                    gv * (1.0 - fy) * (1.0 - fx);
                                dx[idx4(ch, in_h, in_w, b, c, y0, x1)] += gv * (1.0 - fy) * fx;
                                dx[idx4(ch, in_h, in_w, b, c, y1, x0)] += gv * fy * (1.0 - fx);
                                dx[idx4(ch, in_h, in_w, b, c, y1, x1)] += gv * fy * fx;
                            }
                        }
                    }
                }
                accumulate_grad(grads, requires, values, x, &dx);
            }
        }
        Op::SsmScan { x, delta, b, c, a, state_dim, ref h } => {
            ssm_scan_backward(x, delta, b, c, a, state_dim, h, g, values, requires, grads);
        }
        Op::Mse { a, b } => {
            let av = values[a].data();
            let bv = values[b].data();
            let scale = 2.0 / av.len() as f32 * g[0];
            if requires[a] {
                let da: Vec<f32> =
                    av.iter().zip(bv).map(|(&x, &y)| scale * (x - y)).collect();
                accumulate_grad(grads, requires, values, a, &da);
            }
            if requires[b] {
                let db: Vec<f32> =
                    av.iter().zip(bv).map(|(&x, &y)| -scale * (x - y)).collect();
                accumulate_grad(grads, requires, values, b, &db);
            }
        }
        Op::SumAll { x } => {
            if requires[x] {
                let dx = vec![g[0]; values[x].numel()];
                accumulate_grad(grads, requires, values, x, &dx);
            }
        }
        Op::MeanAll { x } => {
            if requires[x] {
                let dx = vec![g[0] / values[x].numel() as f32; values[x].numel()];
                accumulate_grad(grads, requires, values, x, &dx);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: usize,
    w: usize,
    b: Option<usize>,
    spec: ConvSpec,
    g: &[f32],
    values: &[Tensor],
    requires: &[bool],
    grads: &mut [Option<Tensor>],
) {
    let d = ops::conv2d_dims(&values[x], &values[w], spec).expect("validated at forward");
    let group_in = d.c_in / spec.groups;
    let group_out = d.c_out / spec.groups;
    let xs = values[x].data();
    let ws = values[w].data();
    let need_x = requires[x];
    let need_w = requires[w];
    let need_b = b.map(|bv| requires[bv]).unwrap_or(false);
    let mut dx = if need_x { vec![0.0f32; xs.len()] } else { Vec::new() };
    let mut dw = if need_w { vec![0.0f32; ws.len()] } else { Vec::new() };
    let mut db = if need_b { vec![0.0f32; d.c_out] } else { Vec::new() };
    for bi in 0..d.batch {
        for oc in 0..d.c_out {
            let ic0 = (oc / group_out) * group_in;
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let gv = g[idx4(d.c_out, d.out_h, d.out_w, bi, oc, oy, ox)];
                    if gv == 0.0 {
                        continue;
                    }
                    if need_b {
                        db[oc] += gv;
                    }
                    for icg in 0..group_in {
                        let ic = ic0 + icg;
                        for ky in 0..d.k_h {
                            let iy = oy * spec.stride + ky;
                            if iy < spec.pad || iy >= spec.pad + d.in_h {
                                continue;
                            }
                            let iy = iy - spec.pad;
                            for kx in 0..d.k_w {
                                let ix = ox * spec.stride + kx;
                                if ix < spec.pad || ix >= spec.pad + d.in_w {
                                    continue;
                                }
                                let ix = ix - spec.pad;
                                let xi = idx4(d.c_in, d.in_h, d.in_w, bi, ic, iy, ix);
                                let wi = idx4(group_in, d.k_h, d.k_w, oc, icg, ky, kx);
                                if need_w {
                                    dw[wi] += gv * xs[xi];
                                }
                                if need_x {
                                    dx[xi] += gv * ws[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if need_x {
        accumulate_grad(grads, requires, values, x, &dx);
    }
    if need_w {
        accumulate_grad(grads, requires, values, w, &dw);
    }
    if let Some(bv) = b {
        if need_b {
            accumulate_grad(grads, requires, values, bv, &db);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn ssm_scan_backward(
    x: usize,
    delta: usize,
    b: usize,
    c: usize,
    a: usize,
    n: usize,
    hbuf: &[f32],
    g: &[f32],
    values: &[Tensor],
    requires: &[bool],
    grads: &mut [Option<Tensor>],
) {
    let (batch, l, ch) = values[x].dims3("ssm_scan grad").expect("validated");
    let xs = values[x].data();
    let ds = values[delta].data();
    let bs = values[b].data();
    let cs = values[c].data();
    let as_ = values[a].data();
    let mut dx = vec![0.0f32; xs.len()];
    let mut ddelta = vec![0.0f32; xs.len()];
    let mut db = vec![0.0f32; bs.len()];
    let mut dc = vec![0.0f32; cs.len()];
    let mut da = vec![0.0f32; as_.len()];
    let mut gh = vec![0.0f32; ch * n];
    for bi in 0..batch {
        gh.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..l).rev() {
            let step = (bi * l + t) * ch;
            let mix = (bi * l + t) * n;
            let hrow = &hbuf[(bi * l + t) * ch * n..(bi * l + t + 1) * ch * n];
            let hprev = if t > 0 {
                Some(&hbuf[(bi * l + t - 1) * ch * n..(bi * l + t) * ch * n])
            } else {
                None
            };
            for ci in 0..ch {
                let gy = g[step + ci];
                let d = ds[step + ci];
                let xv = xs[step + ci];
                let arow = &as_[ci * n..(ci + 1) * n];
                let ghrow = &mut gh[ci * n..(ci + 1) * n];
                let mut gd_acc = 0.0f32;
                let mut gx_acc = 0.0f32;
                for ni in 0..n {
                    let ghv = ghrow[ni] + gy * cs[mix + ni];
                    let hp = hprev.map_or(0.0, |hr| hr[ci * n + ni]);
                    let abar = mathf::expf(d * arow[ni]);
                    dc[mix + ni] += gy * hrow[ci * n + ni];
                    db[mix + ni] += ghv * d * xv;
                    da[ci * n + ni] += ghv * abar * d * hp;
                    gd_acc += ghv * (abar * arow[ni] * hp + bs[mix + ni] * xv);
                    gx_acc += ghv * d * bs[mix + ni];
                    ghrow[ni] = ghv * abar;
                }
                ddelta[step + ci] = gd_acc;
                dx[step + ci] = gx_acc;
            }
        }
    }
    accumulate_grad(grads, requires, values, x, &dx);
    accumulate_grad(grads, requires, values, delta, &ddelta);
    accumulate_grad(grads, requires, values, b, &db);
    accumulate_grad(grads, requires, values, c, &dc);
    accumulate_grad(grads, requires, values, a, &da);
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_mul_backward() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let b = g.leaf(t(&[3], &[4.0, 5.0, 6.0]), true);
        let s = g.mul(a, b).unwrap();
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let err = g.backward(a).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { numel: 2 }));
    }

    #[test]
    fn backward_runs_once() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1], &[2.0]), true);
        let loss = g.sum_all(a);
        g.backward(loss).unwrap();
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn shared_leaf_accumulates_both_paths() {
        // loss = sum(x * x): grad must be 2x, exercising two uses of one var
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[3.0, -1.5]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0, -3.0]);
    }

    #[test]
    fn mse_value_and_grad() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, 3.0]), true);
        let b = g.leaf(t(&[2], &[0.0, 1.0]), false);
        let loss = g.mse(a, b).unwrap();
        assert!((g.value(loss).as_scalar().unwrap() - 2.5).abs() < 1e-6);
        g.backward(loss).unwrap();
        // d/da mean((a-b)^2) = 2(a-b)/n
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 2.0]);
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn linear_matches_hand_computation() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let w = g.leaf(t(&[2, 3], &[1.0, 0.0, -1.0, 0.5, 0.5, 0.5]), true);
        let b = g.leaf(t(&[2], &[10.0, -10.0]), true);
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2]);
        assert_eq!(g.value(y).data(), &[8.0, -7.0, 8.0, -2.5]);
    }

    #[test]
    fn concat_then_narrow_round_trips_bitwise() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let b = g.leaf(t(&[2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]), false);
        let cat = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(cat).shape(), &[2, 5]);
        let a2 = g.narrow(cat, 1, 0, 2).unwrap();
        let b2 = g.narrow(cat, 1, 2, 3).unwrap();
        assert_eq!(g.value(a2).data(), g.value(a).data());
        assert_eq!(g.value(b2).data(), g.value(b).data());
    }

    #[test]
    fn concat_rejects_mismatched_other_axes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 2]), false);
        let b = g.leaf(Tensor::zeros(&[3, 3]), false);
        assert!(matches!(g.concat(&[a, b], 1), Err(Error::Shape { .. })));
        assert!(matches!(g.concat(&[a, b], 5), Err(Error::Axis { .. })));
    }

    // Flattening a 2x2 map [[a,b],[c,d]] must follow the four canonical
    // traversal orders.
    #[test]
    fn scan_directions_order_2x2() {
        let mut g = Graph::new();
        let m = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let cases = [
            (ScanDirection::HorizontalForward, [1.0, 2.0, 3.0, 4.0]),
            (ScanDirection::HorizontalReverse, [4.0, 3.0, 2.0, 1.0]),
            (ScanDirection::VerticalForward, [1.0, 3.0, 2.0, 4.0]),
            (ScanDirection::VerticalReverse, [4.0, 2.0, 3.0, 1.0]),
        ];
        for (dir, want) in cases {
            let s = g.seq_from_map(m, dir).unwrap();
            assert_eq!(g.value(s).shape(), &[1, 4, 1]);
            assert_eq!(g.value(s).data(), &want, "direction {:?}", dir);
            let back = g.map_from_seq(s, dir, 2, 2).unwrap();
            assert_eq!(g.value(back).data(), g.value(m).data(), "direction {:?}", dir);
        }
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 4, 2, 2], 3.7), false);
        let gamma = g.leaf(Tensor::full(&[4], 1.0), false);
        let beta = g.leaf(Tensor::zeros(&[4]), false);
        let y = g.layer_norm(x, 1, gamma, beta, 1e-5).unwrap();
        for v in g.value(y).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_normalizes_channel_axis() {
        let mut g = Graph::new();
        // one spatial position, channels [1, 3]: mean 2, population var 1
        let x = g.leaf(t(&[1, 2, 1, 1], &[1.0, 3.0]), false);
        let gamma = g.leaf(Tensor::full(&[2], 1.0), false);
        let beta = g.leaf(Tensor::zeros(&[2]), false);
        let y = g.layer_norm(x, 1, gamma, beta, 0.0).unwrap();
        assert!((g.value(y).data()[0] + 1.0).abs() < 1e-5);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn inference_graph_skips_gradients() {
        let mut g = Graph::inference();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn ssm_scan_zero_input_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 4, 2]), false);
        let delta = g.leaf(Tensor::full(&[1, 4, 2], 0.5), false);
        let b = g.leaf(Tensor::full(&[1, 4, 3], 1.0), false);
        let c = g.leaf(Tensor::full(&[1, 4, 3], 1.0), false);
        let a = g.leaf(Tensor::full(&[2, 3], -1.0), false);
        let y = g.ssm_scan(x, delta, b, c, a).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
