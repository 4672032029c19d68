//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so reverse index order is a
//! topological order and `backward` visits every node at most once.

use std::sync::Arc;

use crate::conv::{channel_sums, ConvGeom};
use crate::element::{gemm, Element};
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed linear map with a known adjoint, usable as a tape op.
pub trait LinearOperator<E: Element>: Send + Sync {
    fn input_shape(&self) -> Vec<usize>;
    fn output_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &[E], out: &mut [E]);
    fn apply_adjoint(&self, y: &[E], out: &mut [E]);
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

enum Op<E: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: E,
    },
    Silu(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<E>,
        rstd: Vec<E>,
    },
    Mean(Var),
    Mse(Var, Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    ConvTransposed {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    Matmul(Var, Var),
    AddChannel {
        x: Var,
        bias: Var,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Embedding {
        table: Var,
        codes: Vec<usize>,
    },
    StraightThrough(Var),
    Linear {
        x: Var,
        op: Arc<dyn LinearOperator<E>>,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<E> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, var: Var) -> Option<&[E]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<E>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<E> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn data(&self, var: Var) -> &[E] {
        self.nodes[var.0].value.data()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (parameters, probed activations).
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        let mut value = value;
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        let mut value = value;
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            );
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Tensor<E> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `scale · x + shift` with scalar constants.
    pub fn affine(&mut self, x: Var, scale: E, shift: E) -> Var {
        let data = self.data(x).iter().map(|&v| scale * v + shift).collect();
        let v = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(v, Op::Affine { x, scale }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        let v = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(v, Op::Silu(x), &[x])
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return shape_err("group_norm", format!("need [N, C, ...], got {shape:?}"));
        }
        let (n, c) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return arg_err("group_norm", format!("{c} channels not divisible into {groups} groups"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("group_norm", format!("affine params must be [{c}]"));
        }
        let spatial: usize = shape[2..].iter().product();
        let cg = c / groups;
        let m = cg * spatial;
        let eps = E::from_f64_lossy(GROUP_NORM_EPS);
        let mf = E::from_usize(m).unwrap();
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![E::zero(); xd.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for b in 0..n {
            for g in 0..groups {
                let start = (b * c + g * cg) * spatial;
                let chunk = &xd[start..start + m];
                let mean = chunk.iter().copied().sum::<E>() / mf;
                let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / mf;
                let rstd = E::one() / (var + eps).sqrt();
                for (i, &v) in chunk.iter().enumerate() {
                    let ch = g * cg + i / spatial;
                    out[start + i] = (v - mean) * rstd * gd[ch] + bd[ch];
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let m = d.iter().copied().sum::<E>() / E::from_usize(d.len().max(1)).unwrap();
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = E::from_usize(self.data(a).len().max(1)).unwrap();
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<E>()
            / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), &[a, b]))
    }

    fn conv_operands(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        transposed: bool,
    ) -> Result<(usize, [usize; 3], usize, usize, usize)> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 5 {
            return shape_err(op, format!("input must be [N, C, D, H, W], got {xs:?}"));
        }
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return shape_err(op, format!("kernel must be [C', C, k, k, k], got {ws:?}"));
        }
        let (in_axis, out_axis) = if transposed { (0, 1) } else { (1, 0) };
        if ws[in_axis] != xs[1] {
            return shape_err(
                op,
                format!(
                    "channel axis: input has {} channels, kernel expects {}",
                    xs[1], ws[in_axis]
                ),
            );
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[out_axis]] {
                return shape_err(
                    op,
                    format!("bias must be [{}], got {:?}", ws[out_axis], self.shape(b)),
                );
            }
        }
        Ok((xs[0], [xs[2], xs[3], xs[4]], xs[1], ws[out_axis], ws[2]))
    }

    /// 3D convolution, kernel `[C_out, C_in, k, k, k]`, odd `k`, stride 1 or 2.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (batch, dims, cin, cout, k) = self.conv_operands("conv3d", x, w, b, false)?;
        let geom = ConvGeom::for_conv(dims, cin, cout, k, stride, pad)?;
        let out = geom.conv_forward(
            batch,
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
        );
        let [d, h, wd] = geom.small;
        let v = Tensor::new(&[batch, cout, d, h, wd], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Conv { x, w, b, geom, batch }, &inputs))
    }

    /// Adjoint of [`conv3d`](Self::conv3d): kernel `[C_in, C_out, k, k, k]`,
    /// output extent `(in − 1)·stride − 2·pad + k`.
    pub fn transposed_conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (batch, dims, cin, cout, k) = self.conv_operands("transposed_conv3d", x, w, b, true)?;
        let geom = ConvGeom::for_transposed(dims, cin, cout, k, stride, pad)?;
        let out = geom.transposed_forward(
            batch,
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
        );
        let [d, h, wd] = geom.big;
        let v = Tensor::new(&[batch, cout, d, h, wd], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::ConvTransposed { x, w, b, geom, batch }, &inputs))
    }

    /// `[M, K] · [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} · {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, Op::Matmul(a, b), &[a, b]))
    }

    /// Adds a per-channel (`[C]`) or per-sample-per-channel (`[N, C]`) bias to `[N, C, ...]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() < 2 {
            return shape_err("add_channel", format!("need [N, C, ...], got {xs:?}"));
        }
        let per_sample = match bs.as_slice() {
            [c] if *c == xs[1] => false,
            [n, c] if *n == xs[0] && *c == xs[1] => true,
            _ => {
                return shape_err(
                    "add_channel",
                    format!("bias {bs:?} does not match channels of {xs:?}"),
                )
            }
        };
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let bd = self.data(bias);
        let mut out = self.data(x).to_vec();
        for s in 0..n {
            for ch in 0..c {
                let b = if per_sample { bd[s * c + ch] } else { bd[ch] };
                let start = (s * c + ch) * spatial;
                out[start..start + spatial].iter_mut().for_each(|v| *v = *v + b);
            }
        }
        let v = Tensor::new(&xs, out)?;
        Ok(self.push(v, Op::AddChannel { x, bias }, &[x, bias]))
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return arg_err("concat_channels", "no inputs");
        };
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return shape_err("concat_channels", format!("need [N, C, ...], got {s0:?}"));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return shape_err("concat_channels", format!("{s:?} vs {s0:?}"));
            }
            channels += s[1];
        }
        let (n, spatial) = (s0[0], s0[2..].iter().product::<usize>());
        let mut out = Vec::with_capacity(n * channels * spatial);
        for b in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.data(p)[b * c * spatial..(b + 1) * c * spatial]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Gathers rows of `table` (`[K, n]`) into a channel-first grid.
    ///
    /// `codes` indexes positions of `[N, spatial...]` in row-major order;
    /// the output is `[N, n, spatial...]`.
    pub fn embedding(&mut self, table: Var, codes: &[usize], grid: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return shape_err("embedding", format!("table must be [K, n], got {ts:?}"));
        }
        let (k, dim) = (ts[0], ts[1]);
        if grid.is_empty() {
            return shape_err("embedding", "grid needs a batch axis");
        }
        let positions: usize = grid.iter().product();
        if codes.len() != positions {
            return shape_err(
                "embedding",
                format!("{} codes for grid {grid:?}", codes.len()),
            );
        }
        if let Some(&bad) = codes.iter().find(|&&c| c >= k) {
            return arg_err("embedding", format!("code {bad} out of range for {k} entries"));
        }
        let n = grid[0];
        let spatial = positions / n.max(1);
        let td = self.data(table);
        let mut out = vec![E::zero(); positions * dim];
        for b in 0..n {
            for s in 0..spatial {
                let code = codes[b * spatial + s];
                for j in 0..dim {
                    out[(b * dim + j) * spatial + s] = td[code * dim + j];
                }
            }
        }
        let mut shape = vec![n, dim];
        shape.extend_from_slice(&grid[1..]);
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                codes: codes.to_vec(),
            },
            &[table],
        ))
    }

    /// Value of `quantized`, gradient routed unchanged to `x`.
    pub fn straight_through(&mut self, x: Var, quantized: Var) -> Result<Var> {
        self.same_shape("straight_through", x, quantized)?;
        let v = self.value(quantized).clone();
        Ok(self.push(v, Op::StraightThrough(x), &[x]))
    }

    pub fn linear_op(&mut self, x: Var, op: Arc<dyn LinearOperator<E>>) -> Result<Var> {
        if self.shape(x) != op.input_shape().as_slice() {
            return shape_err(
                "linear_op",
                format!("operator expects {:?}, got {:?}", op.input_shape(), self.shape(x)),
            );
        }
        let out_shape = op.output_shape();
        let mut out = vec![E::zero(); out_shape.iter().product()];
        op.apply(self.data(x), &mut out);
        let v = Tensor::new(&out_shape, out)?;
        Ok(self.push(v, Op::Linear { x, op }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        if self.value(loss).numel() != 1 {
            return shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            );
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<E>, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let mut acc = |v: Var, delta: Vec<E>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(delta)
                    .for_each(|(e, d)| *e = *e + d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    acc(*a, g.iter().zip(bd).map(|(&g, &y)| g * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(ad).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Affine { x, scale } => acc(*x, g.iter().map(|&v| v * *scale).collect()),
            Op::Silu(x) => {
                let d = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&g, &v)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (E::one() - s))
                    })
                    .collect();
                acc(*x, d);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let cg = c / groups;
                let m = cg * spatial;
                let mf = E::from_usize(m).unwrap();
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let mut dx = vec![E::zero(); xd.len()];
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                for b in 0..n {
                    for grp in 0..*groups {
                        let gi = b * groups + grp;
                        let start = (b * c + grp * cg) * spatial;
                        let (mu, rs) = (mean[gi], rstd[gi]);
                        let mut sum_dxhat = E::zero();
                        let mut sum_dxhat_xhat = E::zero();
                        for i in 0..m {
                            let ch = grp * cg + i / spatial;
                            let xhat = (xd[start + i] - mu) * rs;
                            let dy = g[start + i];
                            dgamma[ch] = dgamma[ch] + dy * xhat;
                            dbeta[ch] = dbeta[ch] + dy;
                            let dxhat = dy * gd[ch];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        }
                        for i in 0..m {
                            let ch = grp * cg + i / spatial;
                            let xhat = (xd[start + i] - mu) * rs;
                            let dxhat = g[start + i] * gd[ch];
                            dx[start + i] =
                                rs / mf * (mf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Mean(x) => {
                let n = self.data(*x).len();
                let v = g[0] / E::from_usize(n.max(1)).unwrap();
                acc(*x, vec![v; n]);
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let scale = g[0] * E::from_f64_lossy(2.0) / E::from_usize(ad.len().max(1)).unwrap();
                let diff: Vec<E> = ad.iter().zip(bd).map(|(&x, &y)| (x - y) * scale).collect();
                if self.wants(*b) {
                    acc(*b, diff.iter().map(|&v| -v).collect());
                }
                acc(*a, diff);
            }
            Op::Conv { x, w, b, geom, batch } => {
                let (dx, dw) = geom.conv_backward(
                    *batch,
                    self.data(*x),
                    self.data(*w),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    acc(*b, channel_sums(g, *batch, geom.small_channels));
                }
            }
            Op::ConvTransposed { x, w, b, geom, batch } => {
                let (dy, dw) = geom.transposed_backward(
                    *batch,
                    self.data(*x),
                    g,
                    self.data(*w),
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dy) = dy {
                    acc(*x, dy);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    acc(*b, channel_sums(g, *batch, geom.big_channels));
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut da = vec![E::zero(); m * k];
                    gemm(m, n, k, g, false, self.data(*b), true, &mut da, false);
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![E::zero(); k * n];
                    gemm(k, m, n, self.data(*a), true, g, false, &mut db, false);
                    acc(*b, db);
                }
            }
            Op::AddChannel { x, bias } => {
                acc(*x, g.to_vec());
                if self.wants(*bias) {
                    let xs = self.shape(*x);
                    let (n, c) = (xs[0], xs[1]);
                    let spatial: usize = xs[2..].iter().product();
                    let per_sample = self.shape(*bias).len() == 2;
                    let mut db = vec![E::zero(); self.data(*bias).len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let start = (s * c + ch) * spatial;
                            let sum: E = g[start..start + spatial].iter().copied().sum();
                            let idx = if per_sample { s * c + ch } else { ch };
                            db[idx] = db[idx] + sum;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Concat(parts) => {
                let shape = node.value.shape();
                let (n, total) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(n * c * spatial);
                        for b in 0..n {
                            let start = (b * total + offset) * spatial;
                            d.extend_from_slice(&g[start..start + c * spatial]);
                        }
                        acc(p, d);
                    }
                    offset += c;
                }
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Embedding { table, codes } => {
                let ts = self.shape(*table);
                let dim = ts[1];
                let shape = node.value.shape();
                let n = shape[0];
                let spatial: usize = shape[2..].iter().product();
                let mut dt = vec![E::zero(); ts[0] * dim];
                for b in 0..n {
                    for s in 0..spatial {
                        let code = codes[b * spatial + s];
                        for j in 0..dim {
                            dt[code * dim + j] = dt[code * dim + j] + g[(b * dim + j) * spatial + s];
                        }
                    }
                }
                acc(*table, dt);
            }
            Op::StraightThrough(x) => acc(*x, g.to_vec()),
            Op::Linear { x, op } => {
                let mut d = vec![E::zero(); self.data(*x).len()];
                op.apply_adjoint(g, &mut d);
                acc(*x, d);
            }
        }
    }
}

fn sigmoid<E: Element>(v: E) -> E {
    E::one() / (E::one() + (-v).exp())
}
