use crate::grid::{resample_plane, AxisMap, Ratio};

use super::conv::{col2im_add, im2col};
use super::{shape_err, NnError, ParamStore, Result, Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass defects, used as negative controls for gradient
/// checking.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales every convolution weight gradient by 1.5.
    ConvWeightGrad,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, k: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    AvgPool(Var),
    Sum(Var),
    Linear { x: Var, w: Var, b: Var },
    ChannelGate { x: Var, g: Var },
    SpatialGate { x: Var, g: Var },
    Resize { x: Var, rows: AxisMap, cols: AxisMap },
    Charbonnier { a: Var, b: Var, eps: T, per_pixel: bool },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<usize>,
}

/// Tape of recorded operations. Every op checks its output for NaN/Inf.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every graph node that needs one.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient per parameter of `store`; parameters that did not take part
    /// get zeros.
    pub fn for_params(&self, store: &ParamStore<T>) -> Vec<Vec<T>> {
        let mut out: Vec<Vec<T>> = store.iter().map(|p| vec![T::zero(); p.len()]).collect();
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                for (o, v) in out[id].iter_mut().zip(g) {
                    *o += *v;
                }
            }
        }
        out
    }
}

fn dims4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match t.dims4() {
        Some(d) => Ok(d),
        None => shape_err(op, format!("expected 4-D, got {:?}", t.shape())),
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += *b;
            }
        }
        slot => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: name });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => self.any(&[*x, *w, *b]),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.any(&[*a, *b]),
            Op::ChannelGate { x, g } | Op::SpatialGate { x, g } => self.any(&[*x, *g]),
            Op::Charbonnier { a, b, .. } => self.any(&[*a, *b]),
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Slice { x, .. }
            | Op::AvgPool(x)
            | Op::Sum(x)
            | Op::Resize { x, .. } => self.any(&[*x]),
            Op::Concat(xs) => self.any(xs),
            Op::WeightedSum(ts) => ts.iter().any(|(v, _)| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("input", t, Op::Leaf)
    }

    /// Free leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Result<Var> {
        let v = self.push("variable", t, Op::Leaf)?;
        self.nodes[v.0].needs_grad = true;
        Ok(v)
    }

    /// Leaf holding a copy of parameter `id` of `store`.
    pub fn param(&mut self, store: &ParamStore<T>, id: usize) -> Result<Var> {
        let p = store.get(id);
        let v = self.variable(Tensor::new(p.shape.clone(), p.data.clone())?)?;
        self.nodes[v.0].param = Some(id);
        Ok(v)
    }

    pub fn param_named(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        self.param(store, id)
    }

    /// Size-preserving cross-correlation with zero padding `k / 2`.
    /// `w` is `(c_out, c_in, k, k)`, `b` is `(c_out)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, cin, h, wd) = dims4("conv2d", self.val(x))?;
        let ws = self.val(w).shape().to_vec();
        let [cout, wcin, k, k2] = ws[..] else {
            return shape_err("conv2d", format!("weight must be 4-D, got {ws:?}"));
        };
        if wcin != cin || k != k2 || k % 2 == 0 || self.val(b).shape() != [cout] {
            return shape_err(
                "conv2d",
                format!(
                    "input {:?}, weight {ws:?}, bias {:?}",
                    self.val(x).shape(),
                    self.val(b).shape()
                ),
            );
        }
        let plane = h * wd;
        let kk = cin * k * k;
        let mut out = vec![T::zero(); bs * cout * plane];
        let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * plane] };
        let (xv, wv, bv) = (self.val(x).data(), self.val(w).data(), self.val(b).data());
        for bi in 0..bs {
            let xb = &xv[bi * cin * plane..(bi + 1) * cin * plane];
            let src = if k == 1 {
                xb
            } else {
                im2col(xb, cin, h, wd, k, &mut col);
                &col[..]
            };
            let ob = &mut out[bi * cout * plane..(bi + 1) * cout * plane];
            T::gemm(cout, kk, plane, wv, false, src, false, T::zero(), ob);
            for (co, row) in ob.chunks_mut(plane).enumerate() {
                let bias = bv[co];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let t = Tensor::new(vec![bs, cout, h, wd], out)?;
        self.push("conv2d", t, Op::Conv2d { x, w, b, k })
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.val(a), self.val(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let t = self.map(x, |v| v * s)?;
        self.push("scale", t, Op::Scale(x, s))
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        let tx = self.val(x);
        Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| f(v)).collect())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.max(T::zero()))?;
        self.push("relu", t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, sigmoid)?;
        self.push("sigmoid", t, Op::Sigmoid(x))
    }

    /// Concatenation along the channel axis of 4-D tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat", "no operands");
        };
        let (bs, _, h, w) = dims4("concat", self.val(first))?;
        let mut chans = Vec::with_capacity(xs.len());
        for &v in xs {
            let (b2, c, h2, w2) = dims4("concat", self.val(v))?;
            if (b2, h2, w2) != (bs, h, w) {
                return shape_err(
                    "concat",
                    format!("{:?} vs {:?}", self.val(v).shape(), self.val(first).shape()),
                );
            }
            chans.push(c);
        }
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(bs * total * plane);
        for bi in 0..bs {
            for (&v, &c) in xs.iter().zip(&chans) {
                let d = self.val(v).data();
                data.extend_from_slice(&d[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let t = Tensor::new(vec![bs, total, h, w], data)?;
        self.push("concat", t, Op::Concat(xs.to_vec()))
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.val(x).channels(start, len)?;
        self.push("slice_channels", t, Op::Slice { x, start })
    }

    /// `(b, c, h, w) -> (b, c)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = dims4("global_avg_pool", self.val(x))?;
        let n = T::from_usize(h * w).unwrap();
        let data = self
            .val(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        let t = Tensor::new(vec![bs, c], data)?;
        self.push("global_avg_pool", t, Op::AvgPool(x))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::new(vec![1], vec![s])?, Op::Sum(x))
    }

    /// `y = x w^T + b` with `x: (batch, in)`, `w: (out, in)`, `b: (out)`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bsh) = (self.val(x).shape(), self.val(w).shape(), self.val(b).shape());
        let ([n, fin], [fout, win], [bout]) = (xs, ws, bsh) else {
            return shape_err("fully_connected", format!("{xs:?} {ws:?} {bsh:?}"));
        };
        let (n, fin, fout) = (*n, *fin, *fout);
        if *win != fin || *bout != fout {
            return shape_err("fully_connected", format!("{xs:?} {ws:?} {bsh:?}"));
        }
        let mut out = vec![T::zero(); n * fout];
        T::gemm(n, fin, fout, self.val(x).data(), false, self.val(w).data(), true, T::zero(), &mut out);
        let bv = self.val(b).data();
        for row in out.chunks_mut(fout) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let t = Tensor::new(vec![n, fout], out)?;
        self.push("fully_connected", t, Op::Linear { x, w, b })
    }

    /// `x (b, c, h, w)` times a per-channel gate `(b, c)` broadcast over space.
    pub fn mul_channel_gate(&mut self, x: Var, g: Var) -> Result<Var> {
        let (bs, c, h, w) = dims4("mul_channel_gate", self.val(x))?;
        if self.val(g).shape() != [bs, c] {
            return shape_err("mul_channel_gate", format!("gate {:?}", self.val(g).shape()));
        }
        let gv = self.val(g).data();
        let data = self
            .val(x)
            .data()
            .chunks(h * w)
            .zip(gv)
            .flat_map(|(p, &s)| p.iter().map(move |&v| v * s))
            .collect();
        let t = Tensor::new(vec![bs, c, h, w], data)?;
        self.push("mul_channel_gate", t, Op::ChannelGate { x, g })
    }

    /// `x (b, c, h, w)` times a spatial gate `(b, 1, h, w)` broadcast over channels.
    pub fn mul_spatial_gate(&mut self, x: Var, g: Var) -> Result<Var> {
        let (bs, c, h, w) = dims4("mul_spatial_gate", self.val(x))?;
        if self.val(g).shape() != [bs, 1, h, w] {
            return shape_err("mul_spatial_gate", format!("gate {:?}", self.val(g).shape()));
        }
        let plane = h * w;
        let (xv, gv) = (self.val(x).data(), self.val(g).data());
        let mut data = Vec::with_capacity(xv.len());
        for bi in 0..bs {
            let gp = &gv[bi * plane..(bi + 1) * plane];
            for ci in 0..c {
                let xp = &xv[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                data.extend(xp.iter().zip(gp).map(|(&a, &b)| a * b));
            }
        }
        let t = Tensor::new(vec![bs, c, h, w], data)?;
        self.push("mul_spatial_gate", t, Op::SpatialGate { x, g })
    }

    /// Pixel-center bilinear resampling of every plane, identical to the
    /// raster resampler.
    pub fn resize(&mut self, x: Var, factor: Ratio) -> Result<Var> {
        let (bs, c, h, w) = dims4("resize", self.val(x))?;
        let oh = factor.apply(h).map_err(|e| NnError::Resize(e.to_string()))?;
        let ow = factor.apply(w).map_err(|e| NnError::Resize(e.to_string()))?;
        let (rows, cols) = (AxisMap::new(h, oh), AxisMap::new(w, ow));
        let mut data = Vec::with_capacity(bs * c * oh * ow);
        for p in self.val(x).data().chunks(h * w) {
            data.extend(resample_plane(p, &rows, &cols));
        }
        let t = Tensor::new(vec![bs, c, oh, ow], data)?;
        self.push("resize", t, Op::Resize { x, rows, cols })
    }

    /// Charbonnier penalty averaged over the batch.
    ///
    /// Per patch (default): `mean_i sqrt(|a_i - b_i|^2 + eps^2)` with the
    /// Euclidean norm over all of item `i`. Per pixel: the mean over items
    /// and pixels of `sqrt((a - b)^2 + eps^2)`.
    pub fn charbonnier(&mut self, a: Var, b: Var, eps: T, per_pixel: bool) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        same_shape("charbonnier", ta, tb)?;
        let n = ta.shape()[0];
        if n == 0 {
            return shape_err("charbonnier", "empty batch");
        }
        let per = ta.len() / n;
        let e2 = eps * eps;
        let mut total = T::zero();
        for (pa, pb) in ta.data().chunks(per).zip(tb.data().chunks(per)) {
            if per_pixel {
                let s: T = pa.iter().zip(pb).map(|(&x, &y)| ((x - y) * (x - y) + e2).sqrt()).sum();
                total += s / T::from_usize(per).unwrap();
            } else {
                let s: T = pa.iter().zip(pb).map(|(&x, &y)| (x - y) * (x - y)).sum();
                total += (s + e2).sqrt();
            }
        }
        let v = total / T::from_usize(n).unwrap();
        let t = Tensor::new(vec![1], vec![v])?;
        self.push("charbonnier", t, Op::Charbonnier { a, b, eps, per_pixel })
    }

    /// `sum_j w_j x_j` over scalar nodes; the weights are constants.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, w) in terms {
            if self.val(v).len() != 1 {
                return shape_err("weighted_sum", format!("term shape {:?}", self.val(v).shape()));
            }
            s += w * self.val(v).data()[0];
        }
        let t = Tensor::new(vec![1], vec![s])?;
        self.push("weighted_sum", t, Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse-mode gradients of the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.val(loss).len() != 1 {
            return shape_err("backward", format!("loss shape {:?}", self.val(loss).shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Grads { grads, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, k } => self.conv_backward(*x, *w, *b, *k, g, grads),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                if self.needs(*a) {
                    accumulate(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.iter().map(|&d| d * *s).collect()),
            Op::Relu(x) => {
                let xv = self.val(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect();
                accumulate(grads, *x, d);
            }
            Op::Concat(xs) => {
                let (bs, total, h, w) = node.value.dims4().unwrap();
                let plane = h * w;
                let mut off = 0;
                for &v in xs {
                    let c = self.val(v).shape()[1];
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(bs * c * plane);
                        for bi in 0..bs {
                            let base = (bi * total + off) * plane;
                            d.extend_from_slice(&g[base..base + c * plane]);
                        }
                        accumulate(grads, v, d);
                    }
                    off += c;
                }
            }
            Op::Slice { x, start } => {
                let (bs, c, h, w) = self.val(*x).dims4().unwrap();
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut d = vec![T::zero(); bs * c * plane];
                for bi in 0..bs {
                    let base = (bi * c + start) * plane;
                    d[base..base + len * plane].copy_from_slice(&g[bi * len * plane..(bi + 1) * len * plane]);
                }
                accumulate(grads, *x, d);
            }
            Op::AvgPool(x) => {
                let (_, _, h, w) = self.val(*x).dims4().unwrap();
                let n = T::from_usize(h * w).unwrap();
                let d = g.iter().flat_map(|&v| std::iter::repeat(v / n).take(h * w)).collect();
                accumulate(grads, *x, d);
            }
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; self.val(*x).len()]),
            Op::Linear { x, w, b } => {
                let [n, fin] = self.val(*x).shape()[..] else { unreachable!() };
                let fout = self.val(*b).len();
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    T::gemm(fout, n, fin, g, true, self.val(*x).data(), false, T::zero(), &mut dw);
                    accumulate(grads, *w, dw);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); fout];
                    for row in g.chunks(fout) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *b, db);
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    T::gemm(n, fout, fin, g, false, self.val(*w).data(), false, T::zero(), &mut dx);
                    accumulate(grads, *x, dx);
                }
            }
            Op::ChannelGate { x, g: gate } => {
                let (_, _, h, w) = self.val(*x).dims4().unwrap();
                let plane = h * w;
                let (xv, gv) = (self.val(*x).data(), self.val(*gate).data());
                if self.needs(*x) {
                    let d = g
                        .chunks(plane)
                        .zip(gv)
                        .flat_map(|(p, &s)| p.iter().map(move |&v| v * s))
                        .collect();
                    accumulate(grads, *x, d);
                }
                if self.needs(*gate) {
                    let d = g
                        .chunks(plane)
                        .zip(xv.chunks(plane))
                        .map(|(dp, xp)| dp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    accumulate(grads, *gate, d);
                }
            }
            Op::SpatialGate { x, g: gate } => {
                let (bs, c, h, w) = self.val(*x).dims4().unwrap();
                let plane = h * w;
                let (xv, gv) = (self.val(*x).data(), self.val(*gate).data());
                if self.needs(*x) {
                    let mut d = Vec::with_capacity(xv.len());
                    for bi in 0..bs {
                        let gp = &gv[bi * plane..(bi + 1) * plane];
                        for ci in 0..c {
                            let dp = &g[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                            d.extend(dp.iter().zip(gp).map(|(&a, &b)| a * b));
                        }
                    }
                    accumulate(grads, *x, d);
                }
                if self.needs(*gate) {
                    let mut d = vec![T::zero(); bs * plane];
                    for bi in 0..bs {
                        let dg = &mut d[bi * plane..(bi + 1) * plane];
                        for ci in 0..c {
                            let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                            for ((o, &a), &b) in dg.iter_mut().zip(&g[r.clone()]).zip(&xv[r]) {
                                *o += a * b;
                            }
                        }
                    }
                    accumulate(grads, *gate, d);
                }
            }
            Op::Resize { x, rows, cols } => {
                let w = cols.n_in;
                let plane_in = rows.n_in * w;
                let plane_out = rows.n_out() * cols.n_out();
                let nplanes = g.len() / plane_out;
                let mut d = vec![T::zero(); nplanes * plane_in];
                for (dp, gp) in d.chunks_mut(plane_in).zip(g.chunks(plane_out)) {
                    let mut k = 0;
                    for ry in &rows.taps {
                        let ty = T::from_f64(ry.t).unwrap();
                        for cx in &cols.taps {
                            let tx = T::from_f64(cx.t).unwrap();
                            let go = gp[k];
                            k += 1;
                            // out = lerp(lerp(tl, tr, tx), lerp(bl, br, tx), ty)
                            let (top, bot) = (go * (T::one() - ty), go * ty);
                            dp[ry.lo * w + cx.lo] += top * (T::one() - tx);
                            dp[ry.lo * w + cx.hi] += top * tx;
                            dp[ry.hi * w + cx.lo] += bot * (T::one() - tx);
                            dp[ry.hi * w + cx.hi] += bot * tx;
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Charbonnier { a, b, eps, per_pixel } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let n = ta.shape()[0];
                let per = ta.len() / n;
                let e2 = *eps * *eps;
                let scale = g[0] / T::from_usize(n).unwrap();
                let mut da = Vec::with_capacity(ta.len());
                for (pa, pb) in ta.data().chunks(per).zip(tb.data().chunks(per)) {
                    if *per_pixel {
                        let s = scale / T::from_usize(per).unwrap();
                        da.extend(pa.iter().zip(pb).map(|(&x, &y)| {
                            let d = x - y;
                            s * d / (d * d + e2).sqrt()
                        }));
                    } else {
                        let sq: T = pa.iter().zip(pb).map(|(&x, &y)| (x - y) * (x - y)).sum();
                        let l = (sq + e2).sqrt();
                        da.extend(pa.iter().zip(pb).map(|(&x, &y)| scale * (x - y) / l));
                    }
                }
                if self.needs(*b) {
                    accumulate(grads, *b, da.iter().map(|&v| -v).collect());
                }
                if self.needs(*a) {
                    accumulate(grads, *a, da);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        accumulate(grads, v, vec![g[0] * w]);
                    }
                }
            }
        }
    }

    fn conv_backward(&self, x: Var, w: Var, b: Var, k: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (bs, cin, h, wd) = self.val(x).dims4().unwrap();
        let cout = self.val(b).len();
        let plane = h * wd;
        let kk = cin * k * k;
        let xv = self.val(x).data();
        let wv = self.val(w).data();
        let (need_x, need_w, need_b) = (self.needs(x), self.needs(w), self.needs(b));
        let mut dw = vec![T::zero(); if need_w { cout * kk } else { 0 }];
        let mut db = vec![T::zero(); cout];
        let mut dx = vec![T::zero(); if need_x { xv.len() } else { 0 }];
        let mut col = vec![T::zero(); if k == 1 { 0 } else { kk * plane }];
        for bi in 0..bs {
            let gb = &g[bi * cout * plane..(bi + 1) * cout * plane];
            if need_b {
                for (o, row) in db.iter_mut().zip(gb.chunks(plane)) {
                    *o += row.iter().copied().sum::<T>();
                }
            }
            if need_w {
                let xb = &xv[bi * cin * plane..(bi + 1) * cin * plane];
                let src = if k == 1 {
                    xb
                } else {
                    im2col(xb, cin, h, wd, k, &mut col);
                    &col[..]
                };
                T::gemm(cout, plane, kk, gb, false, src, true, T::one(), &mut dw);
            }
            if need_x {
                let dxb = &mut dx[bi * cin * plane..(bi + 1) * cin * plane];
                if k == 1 {
                    T::gemm(kk, cout, plane, wv, true, gb, false, T::one(), dxb);
                } else {
                    T::gemm(kk, cout, plane, wv, true, gb, false, T::zero(), &mut col);
                    col2im_add(&col, cin, h, wd, k, dxb);
                }
            }
        }
        if need_w {
            if self.fault == Some(super::Fault::ConvWeightGrad) {
                dw.iter_mut().for_each(|v| *v = *v * T::lit(1.5));
            }
            accumulate(grads, w, dw);
        }
        if need_b {
            accumulate(grads, b, db);
        }
        if need_x {
            accumulate(grads, x, dx);
        }
    }
}
