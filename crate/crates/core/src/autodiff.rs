//! Reverse-mode automatic differentiation over a per-batch tape.
//!
//! Nodes are appended in creation order, so inputs always precede their
//! consumers and a single reverse sweep visits each node once.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    height: usize,
    width: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * 9
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv3x3 { x: Var, w: Var, b: Var, cols: Vec<f64>, geom: ConvGeom },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Reshape { x: Var },
    Softmax { x: Var },
    Sum { x: Var },
    Mul { a: Var, b: Var },
    /// Scalar function of `x` whose local gradient was computed with its value.
    Objective { x: Var, grad: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.slots.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.slots.get_mut(var.0).and_then(Option::take)
    }
}

/// `c = a·b + beta·c` with explicit strides, `a` is `m×k`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    assert!(c.len() >= m * n, "gemm: output too small");
    // SAFETY: the asserts above bound every access made through these
    // strides, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn layer_err(layer: &str, message: String) -> Error {
    Error::Layer {
        layer: layer.to_string(),
        message,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that gradients flow into (parameters).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that gradients do not flow into (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `x[B,D] · wᵀ + b` with `w` shaped `[O,D]` and `b` shaped `[O]`.
    pub fn dense(&mut self, name: &str, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(layer_err(
                name,
                format!("dense expects x[B,D], w[O,D], b[O]; got x{xs:?}, w{ws:?}, b{bs:?}"),
            ));
        }
        let (batch, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; batch * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            batch,
            din,
            dout,
            self.value(x).data(),
            (din, 1),
            self.value(w).data(),
            (1, din),
            1.0,
            &mut out,
        );
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::new(vec![batch, dout], out)?;
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    /// 3×3 convolution, stride 1, zero padding 1. `x[B,C,H,W]`, `w[O,C,3,3]`, `b[O]`.
    pub fn conv3x3(&mut self, name: &str, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || ws[1] != xs[1] {
            return Err(layer_err(
                name,
                format!("conv expects x[B,C,H,W] and w[O,C,3,3]; got x{xs:?}, w{ws:?}"),
            ));
        }
        if bs != [ws[0]] {
            return Err(layer_err(name, format!("bias shape {bs:?} != [{}]", ws[0])));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            height: xs[2],
            width: xs[3],
        };
        let (patch, pixels) = (geom.patch(), geom.pixels());
        let per_image_in = geom.in_ch * pixels;
        let mut cols = vec![0.0; geom.batch * patch * pixels];
        let mut out = vec![0.0; geom.batch * geom.out_ch * pixels];
        let input = self.value(x).data();
        let weight = self.value(w).data();
        let bias = self.value(b).data();
        for n in 0..geom.batch {
            let img = &input[n * per_image_in..(n + 1) * per_image_in];
            let col = &mut cols[n * patch * pixels..(n + 1) * patch * pixels];
            im2col(img, geom, col);
            let dst = &mut out[n * geom.out_ch * pixels..(n + 1) * geom.out_ch * pixels];
            for (o, plane) in dst.chunks_mut(pixels).enumerate() {
                plane.fill(bias[o]);
            }
            gemm(geom.out_ch, patch, pixels, weight, (patch, 1), col, (pixels, 1), 1.0, dst);
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::new(vec![geom.batch, geom.out_ch, geom.height, geom.width], out)?;
        Ok(self.push(value, Op::Conv3x3 { x, w, b, cols, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.needs(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// 2×2 max pooling with stride 2 over `[B,C,H,W]`; H and W must be even.
    pub fn maxpool2(&mut self, name: &str, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(layer_err(name, format!("maxpool2 needs [B,C,even,even], got {xs:?}")));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let input = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                    out.push(input[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.needs(x);
        let value = Tensor::new(vec![xs[0], xs[1], oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let batch = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[batch, rest])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.value(x).ndim() != 2 {
            return Err(Error::Shape(format!(
                "softmax expects [B,K], got {:?}",
                self.value(x).shape()
            )));
        }
        let value = crate::tensor::softmax_rows(self.value(x));
        let rg = self.needs(x);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(x);
        self.push(value, Op::Sum { x }, rg)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    /// Records a scalar function of `x` given its value and `∂value/∂x`.
    pub fn objective(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(Error::Shape(format!(
                "objective gradient shape {:?} != input shape {:?}",
                grad.shape(),
                self.value(x).shape()
            )));
        }
        let rg = self.needs(x);
        Ok(self.push(Tensor::scalar(value), Op::Objective { x, grad }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every upstream node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = slots[idx].take() else {
                continue;
            };
            let leaf = matches!(node.op, Op::Leaf);
            self.propagate(node, &upstream, &mut slots);
            if leaf {
                slots[idx] = Some(upstream);
            }
        }
        Ok(Gradients { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Tensor>], v: Var, grad: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut slots[v.0] {
            Some(existing) => existing.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    fn propagate(&self, node: &Node, up: &Tensor, slots: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xv = self.value(x);
                let wv = self.value(w);
                let (batch, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                if self.needs(x) {
                    let mut dx = vec![0.0; batch * din];
                    gemm(batch, dout, din, up.data(), (dout, 1), wv.data(), (din, 1), 0.0, &mut dx);
                    self.accumulate(slots, x, Tensor::new(vec![batch, din], dx).unwrap());
                }
                if self.needs(w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, batch, din, up.data(), (1, dout), xv.data(), (din, 1), 0.0, &mut dw);
                    self.accumulate(slots, w, Tensor::new(vec![dout, din], dw).unwrap());
                }
                if self.needs(b) {
                    let mut db = vec![0.0; dout];
                    for row in up.data().chunks(dout) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(slots, b, Tensor::new(vec![dout], db).unwrap());
                }
            }
            Op::Conv3x3 { x, w, b, cols, geom } => {
                let (x, w, b, g) = (*x, *w, *b, *geom);
                let (patch, pixels) = (g.patch(), g.pixels());
                let wv = self.value(w);
                let per_out = g.out_ch * pixels;
                if self.needs(w) {
                    let mut dw = vec![0.0; g.out_ch * patch];
                    for n in 0..g.batch {
                        let dy = &up.data()[n * per_out..(n + 1) * per_out];
                        let col = &cols[n * patch * pixels..(n + 1) * patch * pixels];
                        gemm(g.out_ch, pixels, patch, dy, (pixels, 1), col, (1, pixels), 1.0, &mut dw);
                    }
                    let shape = self.value(w).shape().to_vec();
                    self.accumulate(slots, w, Tensor::new(shape, dw).unwrap());
                }
                if self.needs(b) {
                    let mut db = vec![0.0; g.out_ch];
                    for n in 0..g.batch {
                        let dy = &up.data()[n * per_out..(n + 1) * per_out];
                        for (o, plane) in dy.chunks(pixels).enumerate() {
                            db[o] += plane.iter().sum::<f64>();
                        }
                    }
                    self.accumulate(slots, b, Tensor::new(vec![g.out_ch], db).unwrap());
                }
                if self.needs(x) {
                    let per_in = g.in_ch * pixels;
                    let mut dx = vec![0.0; g.batch * per_in];
                    let mut dcol = vec![0.0; patch * pixels];
                    for n in 0..g.batch {
                        let dy = &up.data()[n * per_out..(n + 1) * per_out];
                        gemm(patch, g.out_ch, pixels, wv.data(), (1, patch), dy, (pixels, 1), 0.0, &mut dcol);
                        col2im(&dcol, g, &mut dx[n * per_in..(n + 1) * per_in]);
                    }
                    let shape = self.value(x).shape().to_vec();
                    self.accumulate(slots, x, Tensor::new(shape, dx).unwrap());
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(up.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(slots, *x, Tensor::new(xv.shape().to_vec(), data).unwrap());
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let d = dx.data_mut();
                for (&src, &g) in argmax.iter().zip(up.data()) {
                    d[src] += g;
                }
                self.accumulate(slots, *x, dx);
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape();
                self.accumulate(slots, *x, up.reshape(shape).unwrap());
            }
            Op::Softmax { x } => {
                let p = &node.value;
                let k = p.cols();
                let mut dx = Vec::with_capacity(p.len());
                for (prow, grow) in p.data().chunks(k).zip(up.data().chunks(k)) {
                    let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    dx.extend(prow.iter().zip(grow).map(|(pi, gi)| pi * (gi - dot)));
                }
                self.accumulate(slots, *x, Tensor::new(p.shape().to_vec(), dx).unwrap());
            }
            Op::Sum { x } => {
                let g = up.data()[0];
                self.accumulate(slots, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = vb.data().iter().zip(up.data()).map(|(y, g)| y * g).collect();
                let db = va.data().iter().zip(up.data()).map(|(y, g)| y * g).collect();
                self.accumulate(slots, *a, Tensor::new(va.shape().to_vec(), da).unwrap());
                self.accumulate(slots, *b, Tensor::new(vb.shape().to_vec(), db).unwrap());
            }
            Op::Objective { x, grad } => {
                let g = up.data()[0];
                self.accumulate(slots, *x, grad.map(|v| v * g));
            }
        }
    }
}

fn im2col(img: &[f64], g: ConvGeom, col: &mut [f64]) {
    let (h, w) = (g.height as isize, g.width as isize);
    let pixels = g.pixels();
    for c in 0..g.in_ch {
        let plane = &img[c * pixels..(c + 1) * pixels];
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = &mut col[(c * 9 + (ky * 3 + kx) as usize) * pixels..][..pixels];
                for y in 0..h {
                    let sy = y + ky - 1;
                    let dst = &mut row[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    for x in 0..w {
                        let sx = x + kx - 1;
                        dst[x as usize] = if sx < 0 || sx >= w { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: ConvGeom, img: &mut [f64]) {
    let (h, w) = (g.height as isize, g.width as isize);
    let pixels = g.pixels();
    for c in 0..g.in_ch {
        let plane = &mut img[c * pixels..(c + 1) * pixels];
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = &col[(c * 9 + (ky * 3 + kx) as usize) * pixels..][..pixels];
                for y in 0..h {
                    let sy = y + ky - 1;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + kx - 1;
                        if sx >= 0 && sx < w {
                            plane[(sy * w + sx) as usize] += row[(y * w + x) as usize];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gives_twice_w() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.param(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        let b = tape.param(Tensor::zeros(&[1]));
        let y = tape.dense("fc", x, w, b).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0]);
    }

    #[test]
    fn dense_shape_error_names_layer() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let w = tape.param(Tensor::zeros(&[2, 4]));
        let b = tape.param(Tensor::zeros(&[2]));
        let err = tape.dense("fc2", x, w, b).unwrap_err();
        assert!(err.to_string().contains("fc2"));
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 1 image, 2 input channels, 3 output channels, 4x5 plane.
        let (c, o, h, w) = (2, 3, 4, 5);
        let xs: Vec<f64> = (0..c * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let ws: Vec<f64> = (0..o * c * 9).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let bs = vec![0.1, -0.2, 0.3];
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![1, c, h, w], xs.clone()).unwrap());
        let wv = tape.param(Tensor::new(vec![o, c, 3, 3], ws.clone()).unwrap());
        let bv = tape.param(Tensor::new(vec![o], bs.clone()).unwrap());
        let y = tape.conv3x3("conv", xv, wv, bv).unwrap();
        let out = tape.value(y).data();
        for oc in 0..o {
            for y0 in 0..h as isize {
                for x0 in 0..w as isize {
                    let mut acc = bs[oc];
                    for ic in 0..c {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y0 + ky - 1, x0 + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += ws[((oc * c + ic) * 3 + ky as usize) * 3 + kx as usize]
                                    * xs[(ic * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    let got = out[(oc * h + y0 as usize) * w + x0 as usize];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_max() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap());
        let y = tape.maxpool2("pool", x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
