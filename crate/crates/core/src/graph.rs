//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list is
//! already topologically sorted. [`Graph::backward`] walks it once in reverse.
//! The op set is exactly what the segmentation networks and losses need:
//! 2-D convolution, ReLU, global-average-pool broadcast, channel concat,
//! per-pixel softmax cross-entropy, and a handful of scalar reductions.
//!
//! Reductions always sum in row-major order so runs are reproducible.

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        padding: usize,
        dilation: usize,
    },
    Relu(Var),
    PoolBroadcast(Var),
    Concat(Var, Var),
    PixelCe {
        logits: Var,
        labels: Vec<u8>,
        probs: Vec<F>,
    },
    WeightedMean {
        x: Var,
        coeffs: Option<Vec<F>>,
    },
    Add(Var, Var),
    Scale(Var, F),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// A single-owner computation graph.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Adds a leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Accumulated gradient of a tracked node, if a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Sign pattern (`x > 0`) of every ReLU input in the graph, in node order.
    /// Used by finite-difference checks to detect kink crossings.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(x) = n.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > F::zero()));
            }
        }
        out
    }

    /// Stride-1 cross-correlation with zero padding that preserves spatial size.
    ///
    /// `input` is `(C_in, H, W)`, `weight` is `(C_out, C_in, k, k)` with odd `k`,
    /// `bias` is `(C_out)`, and `padding` must equal `dilation * (k - 1) / 2`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let (cin, h, w) = self.value(input).dims3()?;
        let wshape = self.value(weight).shape().to_vec();
        let [cout, wcin, kh, kw] = wshape[..] else {
            return Err(Error::shape(format!(
                "conv weight must be (C_out, C_in, k, k), got {wshape:?}"
            )));
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv input has {cin} channels but weight expects {wcin}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!(
                "conv kernel must be square with odd size, got {kh}x{kw}"
            )));
        }
        if dilation == 0 || padding != dilation * (kh - 1) / 2 {
            return Err(Error::shape(format!(
                "padding {padding} does not preserve size for k={kh}, dilation={dilation}"
            )));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape(format!(
                "conv bias must be ({cout}), got {:?}",
                self.value(bias).shape()
            )));
        }

        let mut out = vec![F::zero(); cout * h * w];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let b = self.value(bias).data();
            let taps = tap_windows(kh, h, w, padding, dilation);
            for co in 0..cout {
                let plane = &mut out[co * h * w..(co + 1) * h * w];
                plane.fill(b[co]);
                for ci in 0..cin {
                    let src = &x[ci * h * w..(ci + 1) * h * w];
                    for tap in &taps {
                        let wv = wt[((co * cin + ci) * kh + tap.ky) * kw + tap.kx];
                        for y in tap.y0..tap.y1 {
                            let sy = (y as isize + tap.dy) as usize;
                            let dst_row = &mut plane[y * w + tap.x0..y * w + tap.x1];
                            let sx0 = (tap.x0 as isize + tap.dx) as usize;
                            let src_row = &src[sy * w + sx0..sy * w + sx0 + dst_row.len()];
                            for (o, &i) in dst_row.iter_mut().zip(src_row) {
                                *o = *o + wv * i;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Tensor::new(vec![cout, h, w], out)?,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
                dilation,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(F::zero())).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(x);
        self.push(t, rg, Op::Relu(x))
    }

    /// Replaces each channel with its spatial mean, broadcast back to `(H, W)`.
    pub fn global_avg_pool_broadcast(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::shape("pooling needs H, W >= 1"));
        }
        let n = F::lit(plane as f64);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * plane);
        for ch in 0..c {
            let mut s = F::zero();
            for &v in &src[ch * plane..(ch + 1) * plane] {
                s = s + v;
            }
            let mean = s / n;
            out.extend(std::iter::repeat_n(mean, plane));
        }
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, rg, Op::PoolBroadcast(x)))
    }

    /// Stacks `a` (C1, H, W) and `b` (C2, H, W) along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (c1, h1, w1) = self.value(a).dims3()?;
        let (c2, h2, w2) = self.value(b).dims3()?;
        if (h1, w1) != (h2, w2) {
            return Err(Error::shape(format!(
                "concat spatial mismatch: {h1}x{w1} vs {h2}x{w2}"
            )));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![c1 + c2, h1, w1], data)?,
            rg,
            Op::Concat(a, b),
        ))
    }

    /// Per-pixel cross-entropy `-log softmax(logits[:, i])[labels[i]]` as an `(H, W)` map.
    pub fn pixel_softmax_ce(&mut self, logits: Var, labels: &LabelMap) -> Result<Var> {
        let (m, h, w) = self.value(logits).dims3()?;
        if m < 2 {
            return Err(Error::shape(format!("need at least 2 classes, got {m}")));
        }
        if (labels.height(), labels.width()) != (h, w) {
            return Err(Error::shape(format!(
                "labels are {}x{} but logits are {h}x{w}",
                labels.height(),
                labels.width()
            )));
        }
        labels.check_classes(m)?;
        let plane = h * w;
        let z = self.value(logits).data();
        let mut probs = vec![F::zero(); m * plane];
        let mut loss = vec![F::zero(); plane];
        for i in 0..plane {
            let mut mx = z[i];
            for c in 1..m {
                mx = mx.max(z[c * plane + i]);
            }
            let mut s = F::zero();
            for c in 0..m {
                let e = (z[c * plane + i] - mx).exp();
                probs[c * plane + i] = e;
                s = s + e;
            }
            for c in 0..m {
                probs[c * plane + i] = probs[c * plane + i] / s;
            }
            let y = usize::from(labels.data()[i]);
            loss[i] = s.ln() - (z[y * plane + i] - mx);
        }
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::new(vec![h, w], loss)?,
            rg,
            Op::PixelCe {
                logits,
                labels: labels.data().to_vec(),
                probs,
            },
        ))
    }

    /// `(sum_i x_i) / n` over all elements, summed in row-major order.
    pub fn mean(&mut self, x: Var) -> Var {
        self.weighted_mean_inner(x, None)
    }

    /// `(sum_i c_i * x_i) / n` with constant coefficients `c`, summed in row-major order.
    pub fn weighted_mean(&mut self, x: Var, coeffs: Vec<F>) -> Result<Var> {
        if coeffs.len() != self.value(x).numel() {
            return Err(Error::shape(format!(
                "{} coefficients for {} elements",
                coeffs.len(),
                self.value(x).numel()
            )));
        }
        Ok(self.weighted_mean_inner(x, Some(coeffs)))
    }

    fn weighted_mean_inner(&mut self, x: Var, coeffs: Option<Vec<F>>) -> Var {
        let data = self.value(x).data();
        let mut s = F::zero();
        match &coeffs {
            None => {
                for &v in data {
                    s = s + v;
                }
            }
            Some(c) => {
                for (&v, &k) in data.iter().zip(c) {
                    s = s + k * v;
                }
            }
        }
        let out = s / F::lit(data.len() as f64);
        let rg = self.needs(x);
        self.push(Tensor::scalar(out), rg, Op::WeightedMean { x, coeffs })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * c).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(x);
        self.push(t, rg, Op::Scale(x, c))
    }

    /// Propagates `d root / d node` to every tracked node and adds it to the
    /// stored gradients, so repeated calls accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(self.value(root).shape().to_vec()));
        }
        if !self.needs(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one()]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, &d) in acc.iter_mut().zip(&g) {
                        *a = *a + d;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
                dilation,
            } => self.conv2d_backward(*input, *weight, *bias, *padding, *dilation, g, grads),
            Op::Relu(x) => {
                if self.needs(*x) {
                    let src = self.value(*x).data();
                    let acc = slot(grads, *x, src.len());
                    for ((a, &d), &v) in acc.iter_mut().zip(g).zip(src) {
                        if v > F::zero() {
                            *a = *a + d;
                        }
                    }
                }
            }
            Op::PoolBroadcast(x) => {
                if self.needs(*x) {
                    let (c, h, w) = self.value(*x).dims3().expect("checked in forward");
                    let plane = h * w;
                    let n = F::lit(plane as f64);
                    let acc = slot(grads, *x, c * plane);
                    for ch in 0..c {
                        let mut s = F::zero();
                        for &d in &g[ch * plane..(ch + 1) * plane] {
                            s = s + d;
                        }
                        let share = s / n;
                        for a in &mut acc[ch * plane..(ch + 1) * plane] {
                            *a = *a + share;
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).numel();
                if self.needs(*a) {
                    add_into(slot(grads, *a, na), &g[..na]);
                }
                if self.needs(*b) {
                    let nb = self.value(*b).numel();
                    add_into(slot(grads, *b, nb), &g[na..]);
                }
            }
            Op::PixelCe {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let plane = labels.len();
                    let m = probs.len() / plane;
                    let acc = slot(grads, *logits, probs.len());
                    for c in 0..m {
                        for i in 0..plane {
                            let onehot = if usize::from(labels[i]) == c {
                                F::one()
                            } else {
                                F::zero()
                            };
                            let k = c * plane + i;
                            acc[k] = acc[k] + g[i] * (probs[k] - onehot);
                        }
                    }
                }
            }
            Op::WeightedMean { x, coeffs } => {
                if self.needs(*x) {
                    let n = self.value(*x).numel();
                    let up = g[0] / F::lit(n as f64);
                    let acc = slot(grads, *x, n);
                    match coeffs {
                        None => acc.iter_mut().for_each(|a| *a = *a + up),
                        Some(c) => {
                            for (a, &k) in acc.iter_mut().zip(c) {
                                *a = *a + k * up;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    let acc = slot(grads, *x, g.len());
                    for (a, &d) in acc.iter_mut().zip(g) {
                        *a = *a + d * *c;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        padding: usize,
        dilation: usize,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (cin, h, w) = self.value(input).dims3().expect("checked in forward");
        let wshape = self.value(weight).shape();
        let (cout, k) = (wshape[0], wshape[2]);
        let plane = h * w;
        let taps = tap_windows(k, h, w, padding, dilation);

        if self.needs(bias) {
            let acc = slot(grads, bias, cout);
            for co in 0..cout {
                let mut s = F::zero();
                for &d in &g[co * plane..(co + 1) * plane] {
                    s = s + d;
                }
                acc[co] = acc[co] + s;
            }
        }
        if self.needs(weight) {
            let x = self.value(input).data();
            let acc = slot(grads, weight, cout * cin * k * k);
            for co in 0..cout {
                let gp = &g[co * plane..(co + 1) * plane];
                for ci in 0..cin {
                    let src = &x[ci * plane..(ci + 1) * plane];
                    for tap in &taps {
                        let mut s = F::zero();
                        for y in tap.y0..tap.y1 {
                            let sy = (y as isize + tap.dy) as usize;
                            let sx0 = (tap.x0 as isize + tap.dx) as usize;
                            let grow = &gp[y * w + tap.x0..y * w + tap.x1];
                            let srow = &src[sy * w + sx0..sy * w + sx0 + grow.len()];
                            s = s + dot(grow, srow);
                        }
                        let idx = ((co * cin + ci) * k + tap.ky) * k + tap.kx;
                        acc[idx] = acc[idx] + s;
                    }
                }
            }
        }
        if self.needs(input) {
            let wt = self.value(weight).data();
            let acc = slot(grads, input, cin * plane);
            for co in 0..cout {
                let gp = &g[co * plane..(co + 1) * plane];
                for ci in 0..cin {
                    let dst = &mut acc[ci * plane..(ci + 1) * plane];
                    for tap in &taps {
                        let wv = wt[((co * cin + ci) * k + tap.ky) * k + tap.kx];
                        for y in tap.y0..tap.y1 {
                            let sy = (y as isize + tap.dy) as usize;
                            let sx0 = (tap.x0 as isize + tap.dx) as usize;
                            let grow = &gp[y * w + tap.x0..y * w + tap.x1];
                            let drow = &mut dst[sy * w + sx0..sy * w + sx0 + grow.len()];
                            for (a, &d) in drow.iter_mut().zip(grow) {
                                *a = *a + wv * d;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output window for one kernel tap: output rows `y0..y1`, columns `x0..x1`
/// read from input offset `(dy, dx)`.
struct Tap {
    ky: usize,
    kx: usize,
    dy: isize,
    dx: isize,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

fn tap_windows(k: usize, h: usize, w: usize, padding: usize, dilation: usize) -> Vec<Tap> {
    let range = |off: isize, n: usize| {
        let lo = (-off).max(0) as usize;
        let hi = (n as isize - off).clamp(0, n as isize) as usize;
        (lo.min(hi), hi)
    };
    let mut taps = Vec::with_capacity(k * k);
    for ky in 0..k {
        let dy = (ky * dilation) as isize - padding as isize;
        let (y0, y1) = range(dy, h);
        for kx in 0..k {
            let dx = (kx * dilation) as isize - padding as isize;
            let (x0, x1) = range(dx, w);
            taps.push(Tap {
                ky,
                kx,
                dy,
                dx,
                y0,
                y1,
                x0,
                x1,
            });
        }
    }
    taps
}

/// Dot product with eight interleaved partial sums so the loop vectorizes.
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut lanes = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] = lanes[i] + x[i] * y[i];
        }
    }
    let mut s = F::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    lanes.iter().fold(s, |acc, &l| acc + l)
}

fn slot<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Scalar>(acc: &mut [F], src: &[F]) {
    for (a, &d) in acc.iter_mut().zip(src) {
        *a = *a + d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..18).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = g.constant(t(&[2, 3, 3], &data));
        let w = g.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(Tensor::zeros(vec![2]));
        let y = g.conv2d(x, w, b, 0, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_counts_overlapping_ones() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(vec![1, 3, 3], 1.0f64));
        let w = g.constant(Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![2, 4, 4]));
        let w_bad_c = g.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        let w_even = g.constant(Tensor::zeros(vec![1, 2, 2, 2]));
        let w_ok = g.constant(Tensor::zeros(vec![1, 2, 3, 3]));
        let b = g.constant(Tensor::zeros(vec![1]));
        assert!(matches!(g.conv2d(x, w_bad_c, b, 1, 1), Err(Error::Shape(_))));
        assert!(matches!(g.conv2d(x, w_even, b, 1, 1), Err(Error::Shape(_))));
        assert!(matches!(g.conv2d(x, w_ok, b, 0, 1), Err(Error::Shape(_))));
        assert!(g.conv2d(x, w_ok, b, 2, 2).is_ok());
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.mean(y);
        g.backward(s).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, third]);
    }

    #[test]
    fn relu_all_negative_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[4], &[-1.0, -0.5, -2.0, -1e-9]));
        let y = g.relu(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.mean(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_broadcasts_mean() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.global_avg_pool_broadcast(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.5; 4]);
        let c = g.constant(Tensor::filled(vec![2, 3, 3], 0.7));
        let z = g.global_avg_pool_broadcast(c).unwrap();
        assert!(g.value(z).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn concat_routes_gradient() {
        let mut g = Graph::new();
        let a = g.input(t(&[1, 1, 2], &[1.0, 2.0]));
        let b = g.input(t(&[2, 1, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let coeffs = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let s = g.weighted_mean(c, coeffs).unwrap();
        g.backward(s).unwrap();
        let up = 1.0 / 6.0;
        assert_eq!(g.grad(a).unwrap(), &[up, 2.0 * up]);
        assert_eq!(g.grad(b).unwrap(), &[3.0 * up, 4.0 * up, 5.0 * up, 6.0 * up]);

        let bad = g.constant(Tensor::zeros(vec![1, 2, 1]));
        assert!(g.concat_channels(a, bad).is_err());
    }

    #[test]
    fn ce_uniform_and_saturated() {
        let mut g = Graph::new();
        let z = g.constant(t(&[2, 1, 1], &[0.0, 0.0]));
        let l = g.pixel_softmax_ce(z, &LabelMap::filled(1, 1, 1)).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let z = g.constant(t(&[2, 1, 1], &[1000.0, 0.0]));
        let l = g.pixel_softmax_ce(z, &LabelMap::filled(1, 1, 0)).unwrap();
        let v = g.value(l).data()[0];
        assert!(v.is_finite() && v.abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_out_of_range_labels() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(vec![3, 1, 2]));
        let labels = LabelMap::new(1, 2, vec![0, 3]).unwrap();
        assert!(matches!(
            g.pixel_softmax_ce(z, &labels),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn mean_of_ce_map_matches_manual_sum() {
        let mut g = Graph::new();
        let z = g.constant(t(&[2, 1, 3], &[0.3, -1.0, 2.0, 0.1, 0.5, -0.7]));
        let labels = LabelMap::new(1, 3, vec![0, 1, 1]).unwrap();
        let l = g.pixel_softmax_ce(z, &labels).unwrap();
        let m = g.mean(l);
        let d = g.value(l).data();
        let expect = (d[0] + d[1] + d[2]) / 3.0;
        assert_eq!(g.value(m).data()[0], expect);
    }

    #[test]
    fn identity_derivative_is_one() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0f64));
        g.backward(x).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0f64));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0f64));
        let y = g.scale(x, 2.5);
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let w = g.constant(Tensor::filled(vec![1, 1, 3, 3], 0.5));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let s = g.mean(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_some());
        assert!(g.grad(w).is_none());
        assert!(g.grad(b).is_none());
    }
}
