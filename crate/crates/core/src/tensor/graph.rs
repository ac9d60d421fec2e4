use std::fmt;
use std::sync::Arc;

use super::kernels::{conv2d_backward, conv2d_forward, ConvGeom, Stencil};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Lower bound applied to the argument of [`Graph::sqrt`].
pub const SQRT_FLOOR: f64 = 1e-9;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward value and adjoint are supplied by the caller.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// One entry per input; `None` means no gradient flows to that input.
    fn backward(&self, inputs: &[&Tensor<T>], grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Sqrt(Var),
    Powf(Var, T),
    Mul(Var, Var),
    MulBroadcast(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Linear { x: Var, weight: Var, bias: Var },
    Gate { map: Var, gates: Var, index: usize },
    Sum(Var),
    BilinearAt { map: Var, coords: Var, channel: usize },
    OffsetSample { map: Var, offsets: Var },
    Custom { op: Arc<dyn CustomOp<T>>, inputs: Vec<Var> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations. Nodes are appended in evaluation order, so the
/// backward pass is a single reverse sweep.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `input [H,W,Cin]`, `weight [k,k,Cin,Cout]`, `bias [Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (h, w, cin) = self.value(input).hwc()?;
        let ws = self.value(weight).shape().to_vec();
        let [k, k2, wcin, cout] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weight must be rank 4, got {ws:?}")));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {cout} outputs", self.value(bias).shape()),
            ));
        }
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let geom = ConvGeom { h, w, cin, cout, k, stride, pad };
        let out = conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let t = Tensor::from_parts(vec![geom.out_h(), geom.out_w(), cout], out);
        Ok(self.push(t, Op::Conv2d { input, weight, bias, geom }, &[input, weight, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.exp());
        self.push(t, Op::Exp(x), &[x])
    }

    /// `sqrt(max(x, 1e-9))`.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let floor = T::from_f64(SQRT_FLOOR);
        let t = self.value(x).map(|v| v.max(floor).sqrt());
        self.push(t, Op::Sqrt(x), &[x])
    }

    /// `x^p` for positive `x`.
    pub fn powf(&mut self, x: Var, p: T) -> Var {
        let t = self.value(x).map(|v| v.powf(p));
        self.push(t, Op::Powf(x, p), &[x])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `[H,W,K] * [H,W,1]`, the single channel broadcast over `K`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (h, w, k) = self.value(a).hwc()?;
        if self.value(b).shape() != [h, w, 1] {
            return Err(Error::shape(
                "mul_broadcast",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .chunks_exact(k)
            .zip(bd)
            .flat_map(|(row, &m)| row.iter().map(move |&x| x * m))
            .collect();
        let t = Tensor::from_parts(vec![h, w, k], data);
        Ok(self.push(t, Op::MulBroadcast(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s), &[x])
    }

    /// Channel-axis concatenation of rank-3 maps.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_channels(&vals)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    /// `[H,W,C] -> [C]` mean over spatial positions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        let mut acc = vec![T::zero(); c];
        for row in self.value(x).data().chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = T::from_f64((h * w) as f64);
        acc.iter_mut().for_each(|a| *a /= n);
        let t = Tensor::from_parts(vec![c], acc);
        Ok(self.push(t, Op::GlobalAvgPool(x), &[x]))
    }

    /// `x [in]`, `weight [in,out]`, `bias [out]` -> `x @ weight + bias`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(weight).shape();
        let bs = self.value(bias).shape();
        let (n_in, n_out) = match (xs, ws) {
            ([n], [a, b]) if *n == *a => (*a, *b),
            _ => return Err(Error::shape("linear", format!("x {xs:?} weight {ws:?}"))),
        };
        if bs != [n_out] {
            return Err(Error::shape("linear", format!("bias {bs:?} for {n_out} outputs")));
        }
        let mut out = self.value(bias).data().to_vec();
        let wd = self.value(weight).data();
        for (i, &xv) in self.value(x).data().iter().enumerate().take(n_in) {
            for (o, &wv) in out.iter_mut().zip(&wd[i * n_out..(i + 1) * n_out]) {
                *o += xv * wv;
            }
        }
        let t = Tensor::from_parts(vec![n_out], out);
        Ok(self.push(t, Op::Linear { x, weight, bias }, &[x, weight, bias]))
    }

    /// `map * gates[index]`.
    pub fn gate(&mut self, map: Var, gates: Var, index: usize) -> Result<Var> {
        let gv = self.value(gates);
        if gv.shape().len() != 1 || index >= gv.len() {
            return Err(Error::shape(
                "gate",
                format!("index {index} into gates {:?}", gv.shape()),
            ));
        }
        let g = gv.data()[index];
        let t = self.value(map).map(|v| v * g);
        Ok(self.push(t, Op::Gate { map, gates, index }, &[map, gates]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    /// Bilinear read of `map[i, j, channel]` where `coords = [i, j]`.
    pub fn bilinear_at(&mut self, map: Var, coords: Var, channel: usize) -> Result<Var> {
        let (h, w, c) = self.value(map).hwc()?;
        if self.value(coords).shape() != [2] || channel >= c {
            return Err(Error::shape(
                "bilinear_at",
                format!("coords {:?}, channel {channel} of {c}", self.value(coords).shape()),
            ));
        }
        let cd = self.value(coords).data();
        let st = Stencil::new(h, w, cd[0], cd[1]);
        let m = self.value(map);
        let v = st.sample(|r, col| m.at(r, col, channel));
        Ok(self.push(Tensor::scalar(v), Op::BilinearAt { map, coords, channel }, &[map, coords]))
    }

    /// `out[i,j,c] = map(i + off[i,j,2c], j + off[i,j,2c+1], c)` by bilinear
    /// interpolation, each channel with its own offset pair.
    pub fn offset_sample(&mut self, map: Var, offsets: Var) -> Result<Var> {
        let (h, w, c) = self.value(map).hwc()?;
        if self.value(offsets).shape() != [h, w, 2 * c] {
            return Err(Error::shape(
                "offset_sample",
                format!("offsets {:?} for map {:?}", self.value(offsets).shape(), [h, w, c]),
            ));
        }
        let m = self.value(map);
        let off = self.value(offsets).data();
        let mut out = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                let o = &off[(i * w + j) * 2 * c..][..2 * c];
                for ch in 0..c {
                    let si = T::from_f64(i as f64) + o[2 * ch];
                    let sj = T::from_f64(j as f64) + o[2 * ch + 1];
                    let st = Stencil::new(h, w, si, sj);
                    out.push(st.sample(|r, col| m.at(r, col, ch)));
                }
            }
        }
        let t = Tensor::from_parts(vec![h, w, c], out);
        Ok(self.push(t, Op::OffsetSample { map, offsets }, &[map, offsets]))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let t = op.forward(&vals)?;
        Ok(self.push(t, Op::Custom { op, inputs: inputs.to_vec() }, inputs))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Grads<T>> {
        let out_shape = self.value(output).shape();
        if self.value(output).len() != 1 {
            return Err(Error::NonScalarOutput(out_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out_shape, T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let zip_map = |x: Var, f: &dyn Fn(T, T, T) -> T| -> Tensor<T> {
            let xv = self.value(x);
            let data = xv
                .data()
                .iter()
                .zip(node.value.data())
                .zip(gd)
                .map(|((&a, &y), &gy)| f(a, y, gy))
                .collect();
            Tensor::from_parts(xv.shape().to_vec(), data)
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let (dx, dw, db) = conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gd,
                    self.wants(*input),
                );
                if let Some(dx) = dx {
                    let t = Tensor::from_parts(self.value(*input).shape().to_vec(), dx);
                    accumulate(&mut grads[input.0], t);
                }
                if self.wants(*weight) {
                    let t = Tensor::from_parts(self.value(*weight).shape().to_vec(), dw);
                    accumulate(&mut grads[weight.0], t);
                }
                if self.wants(*bias) {
                    let t = Tensor::from_parts(self.value(*bias).shape().to_vec(), db);
                    accumulate(&mut grads[bias.0], t);
                }
            }
            Op::Relu(x) => {
                let t = zip_map(*x, &|a, _, gy| if a > T::zero() { gy } else { T::zero() });
                accumulate(&mut grads[x.0], t);
            }
            Op::Sigmoid(x) => {
                let t = zip_map(*x, &|_, y, gy| gy * y * (T::one() - y));
                accumulate(&mut grads[x.0], t);
            }
            Op::Exp(x) => {
                let t = zip_map(*x, &|_, y, gy| gy * y);
                accumulate(&mut grads[x.0], t);
            }
            Op::Sqrt(x) => {
                let floor = T::from_f64(SQRT_FLOOR);
                let half = T::from_f64(0.5);
                let t = zip_map(*x, &|a, y, gy| if a < floor { T::zero() } else { gy * half / y });
                accumulate(&mut grads[x.0], t);
            }
            Op::Powf(x, p) => {
                let p = *p;
                let t = zip_map(*x, &|a, _, gy| gy * p * a.powf(p - T::one()));
                accumulate(&mut grads[x.0], t);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let data = gd.iter().zip(bv).map(|(&gy, &y)| gy * y).collect();
                    accumulate(&mut grads[a.0], Tensor::from_parts(g.shape().to_vec(), data));
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let data = gd.iter().zip(av).map(|(&gy, &x)| gy * x).collect();
                    accumulate(&mut grads[b.0], Tensor::from_parts(g.shape().to_vec(), data));
                }
            }
            Op::MulBroadcast(a, b) => {
                let k = g.shape()[2];
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    let data = gd
                        .chunks_exact(k)
                        .zip(bv)
                        .flat_map(|(row, &m)| row.iter().map(move |&gy| gy * m))
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::from_parts(g.shape().to_vec(), data));
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let data = gd
                        .chunks_exact(k)
                        .zip(av.chunks_exact(k))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(&gy, &x)| gy * x).sum())
                        .collect();
                    accumulate(
                        &mut grads[b.0],
                        Tensor::from_parts(self.value(*b).shape().to_vec(), data),
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], g.clone());
                    }
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(&mut grads[x.0], g.map(|v| v * s));
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).shape()[2]).collect();
                let pieces = g.split_channels(&widths).expect("concat adjoint");
                for (p, piece) in parts.iter().zip(pieces) {
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], piece);
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let n = T::from_f64((shape[0] * shape[1]) as f64);
                let scaled: Vec<T> = gd.iter().map(|&v| v / n).collect();
                let mut data = Vec::with_capacity(shape.iter().product());
                for _ in 0..shape[0] * shape[1] {
                    data.extend_from_slice(&scaled);
                }
                accumulate(&mut grads[x.0], Tensor::from_parts(shape, data));
            }
            Op::Linear { x, weight, bias } => {
                let xv = self.value(*x).data();
                let wv = self.value(*weight).data();
                let n_out = gd.len();
                if self.wants(*x) {
                    let data = wv
                        .chunks_exact(n_out)
                        .map(|row| row.iter().zip(gd).map(|(&w, &gy)| w * gy).sum())
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::from_parts(vec![xv.len()], data));
                }
                if self.wants(*weight) {
                    let mut data = Vec::with_capacity(wv.len());
                    for &xi in xv {
                        data.extend(gd.iter().map(|&gy| xi * gy));
                    }
                    accumulate(
                        &mut grads[weight.0],
                        Tensor::from_parts(self.value(*weight).shape().to_vec(), data),
                    );
                }
                if self.wants(*bias) {
                    accumulate(&mut grads[bias.0], g.clone());
                }
            }
            Op::Gate { map, gates, index } => {
                let gv = self.value(*gates);
                if self.wants(*map) {
                    let s = gv.data()[*index];
                    accumulate(&mut grads[map.0], g.map(|v| v * s));
                }
                if self.wants(*gates) {
                    let dot: T = gd
                        .iter()
                        .zip(self.value(*map).data())
                        .map(|(&gy, &x)| gy * x)
                        .sum();
                    let mut t = Tensor::zeros(gv.shape());
                    t.data_mut()[*index] = dot;
                    accumulate(&mut grads[gates.0], t);
                }
            }
            Op::Sum(x) => {
                let gy = gd[0];
                accumulate(&mut grads[x.0], Tensor::full(self.value(*x).shape(), gy));
            }
            Op::BilinearAt { map, coords, channel } => {
                let m = self.value(*map);
                let (h, w, _) = m.hwc().expect("rank-3 map");
                let cd = self.value(*coords).data();
                let st = Stencil::new(h, w, cd[0], cd[1]);
                let gy = gd[0];
                if self.wants(*map) {
                    let mut t = Tensor::zeros(m.shape());
                    let c = m.shape()[2];
                    for (r, col, wgt) in st.taps() {
                        t.data_mut()[(r * w + col) * c + channel] += wgt * gy;
                    }
                    accumulate(&mut grads[map.0], t);
                }
                if self.wants(*coords) {
                    let (di, dj) = st.coord_grad(|r, col| m.at(r, col, *channel));
                    accumulate(&mut grads[coords.0], Tensor::from_parts(vec![2], vec![di * gy, dj * gy]));
                }
            }
            Op::OffsetSample { map, offsets } => {
                let m = self.value(*map);
                let (h, w, c) = m.hwc().expect("rank-3 map");
                let off = self.value(*offsets).data();
                let want_map = self.wants(*map);
                let want_off = self.wants(*offsets);
                let mut dmap = want_map.then(|| vec![T::zero(); m.len()]);
                let mut doff = want_off.then(|| vec![T::zero(); off.len()]);
                for i in 0..h {
                    for j in 0..w {
                        let base = (i * w + j) * 2 * c;
                        for ch in 0..c {
                            let gy = gd[(i * w + j) * c + ch];
                            if gy == T::zero() {
                                continue;
                            }
                            let si = T::from_f64(i as f64) + off[base + 2 * ch];
                            let sj = T::from_f64(j as f64) + off[base + 2 * ch + 1];
                            let st = Stencil::new(h, w, si, sj);
                            if let Some(dm) = dmap.as_mut() {
                                for (r, col, wgt) in st.taps() {
                                    dm[(r * w + col) * c + ch] += wgt * gy;
                                }
                            }
                            if let Some(d) = doff.as_mut() {
                                let (di, dj) = st.coord_grad(|r, col| m.at(r, col, ch));
                                d[base + 2 * ch] += di * gy;
                                d[base + 2 * ch + 1] += dj * gy;
                            }
                        }
                    }
                }
                if let Some(dm) = dmap {
                    accumulate(&mut grads[map.0], Tensor::from_parts(m.shape().to_vec(), dm));
                }
                if let Some(d) = doff {
                    accumulate(
                        &mut grads[offsets.0],
                        Tensor::from_parts(self.value(*offsets).shape().to_vec(), d),
                    );
                }
            }
            Op::Custom { op, inputs } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                for (v, dg) in inputs.iter().zip(op.backward(&vals, g)) {
                    if let Some(dg) = dg {
                        if self.wants(*v) {
                            accumulate(&mut grads[v.0], dg);
                        }
                    }
                }
            }
        }
    }
}
