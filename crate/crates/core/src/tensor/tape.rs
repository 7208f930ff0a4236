use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom },
    Relu(Var),
    Concat { a: Var, b: Var },
    SliceChannels { x: Var, start: usize },
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    ChannelMean(Var),
    BroadcastMul { a: Var, b: Var },
    Upsample { x: Var, factor: usize },
    Linear { x: Var, weight: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Abs(Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    RowNorm(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order since an
/// operator can only consume handles that already exist.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Tape::backward`]: one gradient per trainable leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`. Present for every leaf
    /// created with [`Tape::param`], zero-filled when the loss does not
    /// depend on it; `None` for constants and intermediate values.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.needs(inputs);
        let value = Tensor::new(shape, data).expect("kernel produced consistent shape");
        self.push(value, op, requires_grad)
    }

    /// 2-D cross-correlation with zero padding and a per-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.shape(input),
            self.shape(kernel),
            self.shape(bias),
            stride,
            padding,
        )?;
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        Ok(self.record(
            &geom.out_shape(),
            data,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &[input, kernel, bias],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let requires_grad = self.needs(&[x]);
        self.push(value, Op::Relu(x), requires_grad)
    }

    /// Concatenates two feature maps along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.value(a).dims4()?;
        let [bb, cb, hb, wb] = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("batch/spatial extents differ: [{ba},_,{ha},{wa}] vs [{bb},_,{hb},{wb}]"),
            ));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ba * (ca + cb) * plane);
        for i in 0..ba {
            data.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        Ok(self.record(&[ba, ca + cb, ha, wa], data, Op::Concat { a, b }, &[a, b]))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let value = self.value(x).slice_channels(start, count)?;
        let requires_grad = self.needs(&[x]);
        Ok(self.push(value, Op::SliceChannels { x, start }, requires_grad))
    }

    /// Per-channel maximum over all spatial positions: `[B,C,H,W] -> [B,C,1,1]`.
    pub fn global_max_pool_spatial(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        if dims[2] == 0 || dims[3] == 0 {
            return Err(Error::shape("global_max_pool_spatial", "empty spatial extent"));
        }
        let (data, argmax) = kernels::global_max_pool(dims, self.value(x).data());
        Ok(self.record(
            &[dims[0], dims[1], 1, 1],
            data,
            Op::GlobalMaxPool { x, argmax },
            &[x],
        ))
    }

    /// Per-position mean over channels: `[B,C,H,W] -> [B,1,H,W]`.
    pub fn global_avg_pool_channels(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        if dims[1] == 0 {
            return Err(Error::shape("global_avg_pool_channels", "zero channels"));
        }
        let data = kernels::channel_mean(dims, self.value(x).data());
        Ok(self.record(&[dims[0], 1, dims[2], dims[3]], data, Op::ChannelMean(x), &[x]))
    }

    /// Elementwise product; every axis of `b` must match `a` or be 1.
    pub fn broadcast_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        kernels::check_broadcast(&shape, self.shape(b))?;
        let map = kernels::broadcast_index_map(&shape, self.shape(b));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = da.iter().zip(&map).map(|(&x, &j)| x * db[j]).collect();
        Ok(self.record(&shape, data, Op::BroadcastMul { a, b }, &[a, b]))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be positive".into()));
        }
        let dims = self.value(x).dims4()?;
        let data = kernels::upsample_nearest(dims, self.value(x).data(), factor);
        Ok(self.record(
            &[dims[0], dims[1], dims[2] * factor, dims[3] * factor],
            data,
            Op::Upsample { x, factor },
            &[x],
        ))
    }

    /// Affine map `x · weightᵀ + bias` for `x: [B,N]`, `weight: [M,N]`, `bias: [M]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (&[batch, n_in], &[n_out, w_in], &[b_len]) =
            (self.shape(x), self.shape(weight), self.shape(bias))
        else {
            return Err(Error::shape(
                "linear",
                format!(
                    "expected x [B,N], weight [M,N], bias [M]; got {:?}, {:?}, {:?}",
                    self.shape(x),
                    self.shape(weight),
                    self.shape(bias)
                ),
            ));
        };
        if w_in != n_in || b_len != n_out {
            return Err(Error::shape(
                "linear",
                format!("inner extents: x has {n_in}, weight [{n_out},{w_in}], bias [{b_len}]"),
            ));
        }
        let data = kernels::linear_forward(
            batch,
            n_in,
            n_out,
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        Ok(self.record(&[batch, n_out], data, Op::Linear { x, weight, bias }, &[x, weight, bias]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let requires_grad = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), requires_grad))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let requires_grad = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), requires_grad))
    }

    /// Elementwise absolute value; the derivative at 0 is taken as 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        let requires_grad = self.needs(&[x]);
        self.push(value, Op::Abs(x), requires_grad)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let requires_grad = self.needs(&[x]);
        self.push(value, Op::Scale(x, factor), requires_grad)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let requires_grad = self.needs(&[x]);
        self.push(value, Op::Sum(x), requires_grad)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::from_usize_lossy(t.len().max(1)));
        let requires_grad = self.needs(&[x]);
        self.push(value, Op::Mean(x), requires_grad)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let requires_grad = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), requires_grad))
    }

    /// Euclidean norm of each row: `[B,N] -> [B]`. The derivative at a zero
    /// row is taken as 0.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let &[batch, n] = self.shape(x) else {
            return Err(Error::shape(
                "row_norm",
                format!("expected [B,N], got {:?}", self.shape(x)),
            ));
        };
        let data = self
            .value(x)
            .data()
            .chunks_exact(n.max(1))
            .take(batch)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        Ok(self.record(&[batch], data, Op::RowNorm(x), &[x]))
    }

    /// Reverse-mode accumulation from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        for (id, node) in self.nodes.iter().enumerate() {
            let leaf_param = node.requires_grad && matches!(node.op, Op::Leaf);
            if !leaf_param {
                grads[id] = None;
            } else if grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(data) {
                    *a += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(node.value.shape(), data).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want_input = self.nodes[input.0].requires_grad;
                let cg = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    gd,
                    want_input,
                );
                if let Some(di) = cg.input {
                    self.accumulate(grads, *input, di);
                }
                self.accumulate(grads, *kernel, cg.kernel);
                self.accumulate(grads, *bias, cg.bias);
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let d = xd
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Concat { a, b } => {
                let [batch, ca, h, w] = self.value(*a).dims4().expect("rank 4");
                let cb = self.shape(*b)[1];
                let plane = h * w;
                let mut ga = Vec::with_capacity(batch * ca * plane);
                let mut gb = Vec::with_capacity(batch * cb * plane);
                for chunk in gd.chunks_exact((ca + cb) * plane) {
                    ga.extend_from_slice(&chunk[..ca * plane]);
                    gb.extend_from_slice(&chunk[ca * plane..]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::SliceChannels { x, start } => {
                let [batch, c, h, w] = self.value(*x).dims4().expect("rank 4");
                let count = node.value.shape()[1];
                let plane = h * w;
                let mut gx = vec![T::zero(); batch * c * plane];
                for bi in 0..batch {
                    let dst = (bi * c + start) * plane;
                    let src = bi * count * plane;
                    gx[dst..dst + count * plane].copy_from_slice(&gd[src..src + count * plane]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GlobalMaxPool { x, argmax } => {
                let [_, _, h, w] = self.value(*x).dims4().expect("rank 4");
                let plane = h * w;
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (i, (&am, &gv)) in argmax.iter().zip(gd).enumerate() {
                    gx[i * plane + am] = gv;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ChannelMean(x) => {
                let [batch, c, h, w] = self.value(*x).dims4().expect("rank 4");
                let plane = h * w;
                let inv = T::one() / T::from_usize_lossy(c);
                let mut gx = Vec::with_capacity(batch * c * plane);
                for bi in 0..batch {
                    let src = &gd[bi * plane..(bi + 1) * plane];
                    for _ in 0..c {
                        gx.extend(src.iter().map(|&v| v * inv));
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::BroadcastMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let map = kernels::broadcast_index_map(av.shape(), bv.shape());
                if self.nodes[a.0].requires_grad {
                    let ga = gd.iter().zip(&map).map(|(&gv, &j)| gv * bv.data()[j]).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![T::zero(); bv.len()];
                    for ((&gv, &x), &j) in gd.iter().zip(av.data()).zip(&map) {
                        gb[j] += gv * x;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Upsample { x, factor } => {
                let dims = self.value(*x).dims4().expect("rank 4");
                let gx = kernels::upsample_nearest_backward(dims, gd, *factor);
                self.accumulate(grads, *x, gx);
            }
            Op::Linear { x, weight, bias } => {
                let &[batch, n_in] = self.shape(*x) else { unreachable!() };
                let n_out = self.shape(*weight)[0];
                let (xd, wd) = (self.value(*x).data(), self.value(*weight).data());
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![T::zero(); batch * n_in];
                    for bi in 0..batch {
                        let row = &mut gx[bi * n_in..(bi + 1) * n_in];
                        for m in 0..n_out {
                            let gv = gd[bi * n_out + m];
                            for (r, &wv) in row.iter_mut().zip(&wd[m * n_in..(m + 1) * n_in]) {
                                *r += gv * wv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                let mut gw = vec![T::zero(); n_out * n_in];
                let mut gb = vec![T::zero(); n_out];
                for bi in 0..batch {
                    let xrow = &xd[bi * n_in..(bi + 1) * n_in];
                    for m in 0..n_out {
                        let gv = gd[bi * n_out + m];
                        gb[m] += gv;
                        for (dst, &xv) in gw[m * n_in..(m + 1) * n_in].iter_mut().zip(xrow) {
                            *dst += gv * xv;
                        }
                    }
                }
                self.accumulate(grads, *weight, gw);
                self.accumulate(grads, *bias, gb);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::Abs(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| {
                        if v > T::zero() {
                            gv
                        } else if v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, *x, gd.iter().map(|&v| v * *factor).collect());
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, vec![gd[0]; self.value(*x).len()]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = gd[0] / T::from_usize_lossy(n.max(1));
                self.accumulate(grads, *x, vec![v; n]);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gd.to_vec());
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                let n = xv.shape()[1];
                let norms = node.value.data();
                let mut gx = Vec::with_capacity(xv.len());
                for (bi, row) in xv.data().chunks_exact(n.max(1)).enumerate() {
                    let norm = norms[bi];
                    for &v in row {
                        gx.push(if norm > T::zero() { gd[bi] * v / norm } else { T::zero() });
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}
