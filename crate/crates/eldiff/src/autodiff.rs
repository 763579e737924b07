//! Reverse-mode automatic differentiation over a closed op set.
//!
//! A [`Graph`] is a tape: every forward call appends a node holding the
//! computed value plus the operation and input handles that produced it, so
//! the recorded graph is acyclic by construction. [`Graph::backward`] sweeps
//! the tape in reverse and adds parameter adjoints into a persistent
//! [`Gradients`] map; calling it again without zeroing accumulates.
//!
//! The op set is exactly what the conditional U-Net needs: conv2d, silu,
//! group_norm, nearest upsampling, channel concat, linear, elementwise
//! add/sub/mul, scalar-mul, channel-bias add, and sum/mean reductions.
//! Values are f32; reductions and normalization statistics accumulate in
//! f64. Parallelism stays inside single ops over disjoint output slices and
//! never changes results.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f32),
    Silu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        /// (mean, inv_std) per (sample, group), cached at forward time.
        stats: Vec<(f64, f64)>,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    ConcatChannels(Var, Var),
    AddChannelBias {
        x: Var,
        b: Var,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
}

/// Named parameter gradients, accumulated across [`Graph::backward`] calls
/// (and across graphs) until [`Gradients::zero`] is called.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Gradients::default()
    }

    pub fn zero(&mut self) {
        self.map.clear();
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scale(&mut self, factor: f32) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn has_non_finite(&self) -> bool {
        self.map.values().any(|t| t.has_non_finite())
    }

    fn accumulate(&mut self, name: &str, shape: &[usize], adj: &[f32]) {
        let entry = self
            .map
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(shape.to_vec()));
        debug_assert_eq!(entry.shape(), shape);
        for (g, a) in entry.data_mut().iter_mut().zip(adj) {
            *g += a;
        }
    }
}

/// Reverse-mode tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    adjoints: Vec<Option<Vec<f32>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Records a constant input. No gradient is reported for leaves, but
    /// their adjoints are still computed and can be inspected.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, None)
    }

    /// Records a named parameter; `backward` accumulates its gradient.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Leaf, Some(name.to_string()))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Adjoint of `v` from the most recent `backward` call.
    pub fn adjoint(&self, v: Var) -> Option<Tensor> {
        self.adjoints.get(v.0).and_then(|a| {
            a.as_ref()
                .map(|data| Tensor::new(self.nodes[v.0].value.shape().to_vec(), data.clone()).unwrap())
        })
    }

    fn push(&mut self, value: Tensor, op: Op, param: Option<String>) -> Var {
        self.nodes.push(Node { value, op, param });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    // ---- forward ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn elementwise_binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, None))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f32) -> Var {
        let value = self.nodes[a.0].value.scale(c);
        self.push(value, Op::ScalarMul(a, c), None)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x), None)
    }

    /// `x[N,In] . w[In,Out] + b[Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::ShapeMismatch(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                xs, ws, bs
            )));
        }
        let (n, d_in, d_out) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0f32; n * d_out];
        for row in out.chunks_mut(d_out) {
            row.copy_from_slice(self.data(b));
        }
        sgemm(
            n,
            d_in,
            d_out,
            1.0,
            self.data(x),
            d_in as isize,
            1,
            self.data(w),
            d_out as isize,
            1,
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![n, d_out], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, None))
    }

    /// 2-D cross-correlation of `x[N,C,H,W]` with `w[F,C,kH,kW]` plus `b[F]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: x {:?}, w {:?}, b {:?}",
                xs, ws, bs
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {} channels, kernel expects {}",
                xs[1], ws[1]
            )));
        }
        if ws[0] != bs[0] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: {} filters vs {} bias entries",
                ws[0], bs[0]
            )));
        }
        if stride < 1 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = conv_extent(h, kh, stride, padding)?;
        let ow = conv_extent(wd, kw, stride, padding)?;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        };

        let x_data = self.data(x);
        let w_data = self.data(w);
        let b_data = self.data(b);
        let mut out = vec![0.0f32; n * f * oh * ow];
        let in_plane = c * h * wd;
        let out_plane = f * oh * ow;
        out.par_chunks_mut(out_plane)
            .enumerate()
            .for_each(|(i, out_n)| {
                let col = im2col(&x_data[i * in_plane..(i + 1) * in_plane], &geom);
                // out_n[f, oh*ow] = w[f, c*kh*kw] . col[c*kh*kw, oh*ow] + b[f]
                for (fi, row) in out_n.chunks_mut(oh * ow).enumerate() {
                    row.fill(b_data[fi]);
                }
                sgemm(
                    f,
                    c * kh * kw,
                    oh * ow,
                    1.0,
                    w_data,
                    (c * kh * kw) as isize,
                    1,
                    &col,
                    (oh * ow) as isize,
                    1,
                    1.0,
                    out_n,
                );
            });
        let value = Tensor::new(vec![n, f, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            None,
        ))
    }

    /// Group normalization with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "group_norm expects rank-4 input, got {:?}",
                xs
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch(format!(
                "group_norm: gamma {:?} / beta {:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("group_norm: eps must be positive".into()));
        }
        let group_c = c / groups;
        let group_len = group_c * h * w;
        let x_data = self.data(x);
        let gamma_data = self.data(gamma).to_vec();
        let beta_data = self.data(beta).to_vec();

        let mut out = vec![0.0f32; x_data.len()];
        let mut stats = vec![(0.0f64, 0.0f64); n * groups];
        out.par_chunks_mut(group_len)
            .zip(stats.par_iter_mut())
            .enumerate()
            .for_each(|(idx, (out_g, stat))| {
                let g = idx % groups;
                let src = &x_data[idx * group_len..(idx + 1) * group_len];
                let mean = src.iter().map(|&v| v as f64).sum::<f64>() / group_len as f64;
                let var = src
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / group_len as f64;
                let inv_std = 1.0 / (var + eps as f64).sqrt();
                *stat = (mean, inv_std);
                let plane = h * w;
                for (j, o) in out_g.iter_mut().enumerate() {
                    let ch = g * group_c + j / plane;
                    let xhat = (src[j] as f64 - mean) * inv_std;
                    *o = (gamma_data[ch] as f64 * xhat + beta_data[ch] as f64) as f32;
                }
            });
        let value = Tensor::new(xs.to_vec(), out)?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            None,
        ))
    }

    /// Replicates each pixel `factor x factor`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "upsample_nearest expects rank-4 input, got {:?}",
                xs
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * factor, w * factor);
        let x_data = self.data(x);
        let mut out = vec![0.0f32; n * c * oh * ow];
        out.par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(plane_idx, out_p)| {
                let src = &x_data[plane_idx * h * w..(plane_idx + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        out_p[oy * ow + ox] = src[(oy / factor) * w + ox / factor];
                    }
                }
            });
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::UpsampleNearest { x, factor }, None))
    }

    /// Channel-axis concatenation of two `[N,*,H,W]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Tensor::concat_channels(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(value, Op::ConcatChannels(a, b), None))
    }

    /// `x[N,C,H,W] + b[N,C]`, broadcasting the bias over the spatial axes.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if xs.len() != 4 || bs.len() != 2 || xs[0] != bs[0] || xs[1] != bs[1] {
            return Err(Error::ShapeMismatch(format!(
                "add_channel_bias: x {:?} vs b {:?}",
                xs, bs
            )));
        }
        let plane = xs[2] * xs[3];
        let b_data = self.data(b);
        let mut out = self.data(x).to_vec();
        for (pi, chunk) in out.chunks_mut(plane).enumerate() {
            let bias = b_data[pi];
            for v in chunk {
                *v += bias;
            }
        }
        let value = Tensor::new(xs.to_vec(), out)?;
        Ok(self.push(value, Op::AddChannelBias { x, b }, None))
    }

    /// Sum of all elements, f64 accumulation, scalar result.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum_f64() as f32;
        self.push(Tensor::scalar(s), Op::Sum(x), None)
    }

    /// Mean of all elements, f64 accumulation, scalar result.
    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.nodes[x.0].value.mean_f64() as f32;
        self.push(Tensor::scalar(m), Op::Mean(x), None)
    }

    /// Mean squared error between two same-shape values, as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    // ---- backward ----

    /// Populates adjoints for every node reachable from `loss` and adds each
    /// named parameter's adjoint into `grads`. Errors unless `loss` is a
    /// one-element tensor.
    pub fn backward(&mut self, loss: Var, grads: &mut Gradients) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.param, &adj[i]) {
                grads.accumulate(name, node.value.shape(), g);
            }
        }
        self.adjoints = adj;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], adj: &mut [Option<Vec<f32>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(adj, a.0, self.len_of(*a), g, 1.0);
                add_into(adj, b.0, self.len_of(*b), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(adj, a.0, self.len_of(*a), g, 1.0);
                add_into(adj, b.0, self.len_of(*b), g, -1.0);
            }
            Op::Mul(a, b) => {
                let da: Vec<f32> = g.iter().zip(self.data(*b)).map(|(&gi, &bi)| gi * bi).collect();
                let db: Vec<f32> = g.iter().zip(self.data(*a)).map(|(&gi, &ai)| gi * ai).collect();
                add_into(adj, a.0, da.len(), &da, 1.0);
                add_into(adj, b.0, db.len(), &db, 1.0);
            }
            Op::ScalarMul(a, c) => {
                add_into(adj, a.0, self.len_of(*a), g, *c);
            }
            Op::Silu(x) => {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gi, &xi)| {
                        let s = sigmoid(xi);
                        gi * s * (1.0 + xi * (1.0 - s))
                    })
                    .collect();
                add_into(adj, x.0, dx.len(), &dx, 1.0);
            }
            Op::Linear { x, w, b } => self.backward_linear(*x, *w, *b, g, adj),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => self.backward_conv2d(*x, *w, *b, *stride, *padding, g, adj),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => self.backward_group_norm(*x, *gamma, *beta, *groups, stats, g, adj),
            Op::UpsampleNearest { x, factor } => {
                let xs = self.shape(*x);
                let (h, w, f) = (xs[2], xs[3], *factor);
                let (oh, ow) = (h * f, w * f);
                let planes = xs[0] * xs[1];
                let mut dx = vec![0.0f32; planes * h * w];
                dx.par_chunks_mut(h * w).enumerate().for_each(|(p, dx_p)| {
                    let g_p = &g[p * oh * ow..(p + 1) * oh * ow];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dx_p[(oy / f) * w + ox / f] += g_p[oy * ow + ox];
                        }
                    }
                });
                add_into(adj, x.0, dx.len(), &dx, 1.0);
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let mut da = vec![0.0f32; n * ca * plane];
                let mut db = vec![0.0f32; n * cb * plane];
                for i in 0..n {
                    let base = i * (ca + cb) * plane;
                    da[i * ca * plane..(i + 1) * ca * plane]
                        .copy_from_slice(&g[base..base + ca * plane]);
                    db[i * cb * plane..(i + 1) * cb * plane]
                        .copy_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                add_into(adj, a.0, da.len(), &da, 1.0);
                add_into(adj, b.0, db.len(), &db, 1.0);
            }
            Op::AddChannelBias { x, b } => {
                let xs = self.shape(*x);
                let plane = xs[2] * xs[3];
                let mut db = vec![0.0f32; xs[0] * xs[1]];
                for (pi, chunk) in g.chunks(plane).enumerate() {
                    db[pi] = chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
                }
                add_into(adj, x.0, g.len(), g, 1.0);
                add_into(adj, b.0, db.len(), &db, 1.0);
            }
            Op::Sum(x) => {
                let n = self.len_of(*x);
                let dx = vec![g[0]; n];
                add_into(adj, x.0, n, &dx, 1.0);
            }
            Op::Mean(x) => {
                let n = self.len_of(*x);
                let dx = vec![g[0] / n as f32; n];
                add_into(adj, x.0, n, &dx, 1.0);
            }
        }
    }

    fn backward_linear(&self, x: Var, w: Var, b: Var, g: &[f32], adj: &mut [Option<Vec<f32>>]) {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (n, d_in, d_out) = (xs[0], xs[1], ws[1]);
        // dx[N,In] = g[N,Out] . w^T
        let mut dx = vec![0.0f32; n * d_in];
        sgemm(
            n,
            d_out,
            d_in,
            1.0,
            g,
            d_out as isize,
            1,
            self.data(w),
            1,
            d_out as isize,
            0.0,
            &mut dx,
        );
        // dw[In,Out] = x^T . g
        let mut dw = vec![0.0f32; d_in * d_out];
        sgemm(
            d_in,
            n,
            d_out,
            1.0,
            self.data(x),
            1,
            d_in as isize,
            g,
            d_out as isize,
            1,
            0.0,
            &mut dw,
        );
        let mut db = vec![0.0f32; d_out];
        for (o, db_o) in db.iter_mut().enumerate() {
            *db_o = (0..n).map(|r| g[r * d_out + o] as f64).sum::<f64>() as f32;
        }
        add_into(adj, x.0, dx.len(), &dx, 1.0);
        add_into(adj, w.0, dw.len(), &dw, 1.0);
        add_into(adj, b.0, db.len(), &db, 1.0);
    }

    fn backward_conv2d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        g: &[f32],
        adj: &mut [Option<Vec<f32>>],
    ) {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = conv_extent(h, kh, stride, padding).expect("checked at forward");
        let ow = conv_extent(wd, kw, stride, padding).expect("checked at forward");
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        };
        let ckk = c * kh * kw;
        let x_data = self.data(x);
        let w_data = self.data(w);
        let in_plane = c * h * wd;
        let out_plane = f * oh * ow;

        // Per-sample pieces computed in parallel over disjoint slices, then
        // reduced serially in sample order so f32 sums stay deterministic.
        let mut dx = vec![0.0f32; n * in_plane];
        let per_sample: Vec<(Vec<f32>, Vec<f64>)> = dx
            .par_chunks_mut(in_plane)
            .enumerate()
            .map(|(i, dx_n)| {
                let g_n = &g[i * out_plane..(i + 1) * out_plane];
                let col = im2col(&x_data[i * in_plane..(i + 1) * in_plane], &geom);
                // dw_n[F,CKK] = g_n[F,OHW] . col^T
                let mut dw_n = vec![0.0f32; f * ckk];
                sgemm(
                    f,
                    oh * ow,
                    ckk,
                    1.0,
                    g_n,
                    (oh * ow) as isize,
                    1,
                    &col,
                    1,
                    (oh * ow) as isize,
                    0.0,
                    &mut dw_n,
                );
                // dcol[CKK,OHW] = w^T . g_n
                let mut dcol = vec![0.0f32; ckk * oh * ow];
                sgemm(
                    ckk,
                    f,
                    oh * ow,
                    1.0,
                    w_data,
                    1,
                    ckk as isize,
                    g_n,
                    (oh * ow) as isize,
                    1,
                    0.0,
                    &mut dcol,
                );
                col2im(&dcol, dx_n, &geom);
                let mut db_n = vec![0.0f64; f];
                for (fi, db_f) in db_n.iter_mut().enumerate() {
                    *db_f = g_n[fi * oh * ow..(fi + 1) * oh * ow]
                        .iter()
                        .map(|&v| v as f64)
                        .sum();
                }
                (dw_n, db_n)
            })
            .collect();

        let mut dw = vec![0.0f32; f * ckk];
        let mut db64 = vec![0.0f64; f];
        for (dw_n, db_n) in &per_sample {
            for (acc, v) in dw.iter_mut().zip(dw_n) {
                *acc += v;
            }
            for (acc, v) in db64.iter_mut().zip(db_n) {
                *acc += v;
            }
        }
        let db: Vec<f32> = db64.iter().map(|&v| v as f32).collect();
        add_into(adj, x.0, dx.len(), &dx, 1.0);
        add_into(adj, w.0, dw.len(), &dw, 1.0);
        add_into(adj, b.0, db.len(), &db, 1.0);
    }

    fn backward_group_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: &[(f64, f64)],
        g: &[f32],
        adj: &mut [Option<Vec<f32>>],
    ) {
        let xs = self.shape(x);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let group_c = c / groups;
        let group_len = group_c * h * w;
        let plane = h * w;
        let x_data = self.data(x);
        let gamma_data = self.data(gamma);

        let mut dx = vec![0.0f32; x_data.len()];
        dx.par_chunks_mut(group_len).enumerate().for_each(|(idx, dx_g)| {
            let gidx = idx % groups;
            let (mean, inv_std) = stats[idx];
            let src = &x_data[idx * group_len..(idx + 1) * group_len];
            let g_g = &g[idx * group_len..(idx + 1) * group_len];
            let m = group_len as f64;
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for j in 0..group_len {
                let ch = gidx * group_c + j / plane;
                let dxhat = g_g[j] as f64 * gamma_data[ch] as f64;
                let xhat = (src[j] as f64 - mean) * inv_std;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            for j in 0..group_len {
                let ch = gidx * group_c + j / plane;
                let dxhat = g_g[j] as f64 * gamma_data[ch] as f64;
                let xhat = (src[j] as f64 - mean) * inv_std;
                dx_g[j] =
                    (inv_std * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m)) as f32;
            }
        });

        let mut dgamma64 = vec![0.0f64; c];
        let mut dbeta64 = vec![0.0f64; c];
        for i in 0..n {
            for gidx in 0..groups {
                let (mean, inv_std) = stats[i * groups + gidx];
                let base = (i * groups + gidx) * group_len;
                for j in 0..group_len {
                    let ch = gidx * group_c + j / plane;
                    let xhat = (x_data[base + j] as f64 - mean) * inv_std;
                    dgamma64[ch] += g[base + j] as f64 * xhat;
                    dbeta64[ch] += g[base + j] as f64;
                }
            }
        }
        let dgamma: Vec<f32> = dgamma64.iter().map(|&v| v as f32).collect();
        let dbeta: Vec<f32> = dbeta64.iter().map(|&v| v as f32).collect();
        add_into(adj, x.0, dx.len(), &dx, 1.0);
        add_into(adj, gamma.0, dgamma.len(), &dgamma, 1.0);
        add_into(adj, beta.0, dbeta.len(), &dbeta, 1.0);
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn add_into(adj: &mut [Option<Vec<f32>>], idx: usize, len: usize, src: &[f32], scale: f32) {
    let buf = adj[idx].get_or_insert_with(|| vec![0.0; len]);
    for (a, s) in buf.iter_mut().zip(src) {
        *a += scale * s;
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

fn conv_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: kernel extent {kernel} exceeds padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Unfolds one sample `[C,H,W]` into `[C*kH*kW, oH*oW]` with zero padding.
fn im2col(x: &[f32], geom: &ConvGeom) -> Vec<f32> {
    let &ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        oh,
        ow,
        ..
    } = geom;
    let mut col = vec![0.0f32; c * kh * kw * oh * ow];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_base = ci * h * w + iy as usize * w;
                    let dst_base = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[dst_base + ox] = x[src_base + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Folds `[C*kH*kW, oH*oW]` gradients back onto one sample, accumulating
/// overlapping windows.
fn col2im(col: &[f32], dx: &mut [f32], geom: &ConvGeom) {
    let &ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        oh,
        ow,
        ..
    } = geom;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = ci * h * w + iy as usize * w;
                    let src_base = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[dst_base + ix as usize] += col[src_base + ox];
                    }
                }
            }
        }
    }
}

/// Row-major f32 gemm: `C[m,n] = alpha * A . B + beta * C` with explicit
/// strides so transposed views need no copies.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(max_flat_index(m, k, rsa, csa) < a.len());
    debug_assert!(max_flat_index(k, n, rsb, csb) < b.len());
    debug_assert!(max_flat_index(m, n, n as isize, 1) < c.len());
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn max_flat_index(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng::RngStream;

    fn tensor(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let w = g.leaf(tensor(&[1, 1, 1, 1], &[1.0]));
        let b = g.leaf(tensor(&[1], &[0.0]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn zero_kernel_conv_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![2, 3, 5, 5], 1.25));
        let w = g.leaf(Tensor::zeros(vec![4, 3, 3, 3]));
        let b = g.leaf(Tensor::zeros(vec![4]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_conv_padded_counts_neighbors() {
        // 3x3 ones kernel over 3x3 ones with pad 1: corners see 4 inputs,
        // edges 6, center 9.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = g.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = g.leaf(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let expect = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(g.value(y).data(), &expect);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = g.leaf(Tensor::zeros(vec![1, 3, 3, 3]));
        let b = g.leaf(Tensor::zeros(vec![1]));
        let err = g.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("channels"), "unexpected message: {err}");
    }

    #[test]
    fn conv_strided_output_extent() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 1, 8, 8]));
        let w = g.leaf(Tensor::zeros(vec![2, 1, 3, 3]));
        let b = g.leaf(Tensor::zeros(vec![2]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 4, 4]);
    }

    #[test]
    fn silu_values() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[3], &[0.0, 1.0, 30.0]));
        let y = g.silu(x);
        let out = g.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.731_058_6).abs() < 1e-6);
        assert!((out[2] - 30.0).abs() < 1e-4);
    }

    #[test]
    fn group_norm_constant_input_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![1, 4, 3, 3], 7.5));
        let gamma = g.leaf(Tensor::full(vec![4], 1.0));
        let beta = g.leaf(Tensor::zeros(vec![4]));
        let y = g.group_norm(x, 2, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn group_norm_zero_gamma_gives_beta() {
        let mut g = Graph::new();
        let mut r = RngStream::new(5);
        let x = g.leaf(r.normal_tensor(vec![2, 4, 3, 3]));
        let gamma = g.leaf(Tensor::zeros(vec![4]));
        let beta = g.leaf(Tensor::full(vec![4], 0.25));
        let y = g.group_norm(x, 4, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn group_norm_normalizes_per_group() {
        let mut g = Graph::new();
        let mut r = RngStream::new(11);
        let x = g.leaf(r.normal_tensor(vec![2, 6, 4, 4]));
        let gamma = g.leaf(Tensor::full(vec![6], 1.0));
        let beta = g.leaf(Tensor::zeros(vec![6]));
        let y = g.group_norm(x, 3, gamma, beta, 1e-6).unwrap();
        let out = g.value(y).data();
        let group_len = 2 * 16;
        for grp in out.chunks(group_len) {
            let mean: f64 = grp.iter().map(|&v| v as f64).sum::<f64>() / group_len as f64;
            assert!(mean.abs() < 1e-5, "group mean {mean}");
        }
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 5, 2, 2]));
        let gamma = g.leaf(Tensor::full(vec![5], 1.0));
        let beta = g.leaf(Tensor::zeros(vec![5]));
        assert!(g.group_norm(x, 2, gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let mut g = Graph::new();
        let mut r = RngStream::new(2);
        let x = g.leaf(r.normal_tensor(vec![1, 2, 3, 3]));
        let y = g.upsample_nearest(x, 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn upsample_replicates_pixels() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[1, 1, 1, 1], &[3.5]));
        let y = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[3.5; 4]);
    }

    #[test]
    fn upsample_gradient_counts_replicas() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::full(vec![1, 1, 2, 2], 1.0));
        let y = g.upsample_nearest(x, 3).unwrap();
        let s = g.sum(y);
        let mut grads = Gradients::new();
        g.backward(s, &mut grads).unwrap();
        assert!(grads.get("x").unwrap().data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let mut g = Graph::new();
        let a = g.param("a", &Tensor::full(vec![1, 1, 2, 2], 1.0));
        let b = g.param("b", &Tensor::full(vec![1, 2, 2, 2], 2.0));
        let c = g.concat_channels(a, b).unwrap();
        let s = g.sum(c);
        let mut grads = Gradients::new();
        g.backward(s, &mut grads).unwrap();
        assert!(grads.get("a").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(grads.get("b").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param("x", &tensor(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let mut grads = Gradients::new();
        g.backward(loss, &mut grads).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::zeros(vec![2, 2]));
        let mut grads = Gradients::new();
        assert!(g.backward(x, &mut grads).is_err());
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut r = RngStream::new(9);
        let xv = r.normal_tensor(vec![2, 3]);
        let mut g = Graph::new();
        let x = g.param("x", &xv);
        let sq = g.mul(x, x).unwrap();
        let loss = g.mean(sq);
        let mut grads = Gradients::new();
        g.backward(loss, &mut grads).unwrap();
        let once = grads.get("x").unwrap().data().to_vec();
        g.backward(loss, &mut grads).unwrap();
        let twice = grads.get("x").unwrap().data().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn forward_is_pure() {
        let mut r = RngStream::new(1);
        let xv = r.normal_tensor(vec![2, 3, 6, 6]);
        let wv = r.normal_tensor(vec![4, 3, 3, 3]);
        let bv = r.normal_tensor(vec![4]);
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone());
            let w = g.leaf(wv.clone());
            let b = g.leaf(bv.clone());
            let y = g.conv2d(x, w, b, 1, 1).unwrap();
            let z = g.silu(y);
            g.value(z).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    // Finite-difference checks per op, on shapes <= (2,4,8,8).

    #[test]
    fn fd_conv2d() {
        let mut r = RngStream::new(101);
        let xv = r.normal_tensor(vec![2, 3, 6, 6]);
        let wv = r.normal_tensor(vec![4, 3, 3, 3]).scale(0.5);
        let bv = r.normal_tensor(vec![4]);
        let leaves = [("x", xv), ("w", wv), ("b", bv)];
        gradcheck::check_all(&leaves, |g, vars| {
            let y = g.conv2d(vars[0], vars[1], vars[2], 1, 1)?;
            let sq = g.mul(y, y)?;
            Ok(g.mean(sq))
        });
    }

    #[test]
    fn fd_conv2d_strided() {
        let mut r = RngStream::new(103);
        let xv = r.normal_tensor(vec![1, 2, 8, 8]);
        let wv = r.normal_tensor(vec![3, 2, 3, 3]).scale(0.4);
        let bv = r.normal_tensor(vec![3]);
        let leaves = [("x", xv), ("w", wv), ("b", bv)];
        gradcheck::check_all(&leaves, |g, vars| {
            let y = g.conv2d(vars[0], vars[1], vars[2], 2, 1)?;
            let sq = g.mul(y, y)?;
            Ok(g.mean(sq))
        });
    }

    #[test]
    fn fd_silu() {
        let mut r = RngStream::new(107);
        let xv = r.normal_tensor(vec![2, 4, 4, 4]);
        gradcheck::check_all(&[("x", xv)], |g, vars| {
            let y = g.silu(vars[0]);
            let sq = g.mul(y, y)?;
            Ok(g.mean(sq))
        });
    }

    #[test]
    fn fd_group_norm() {
        let mut r = RngStream::new(109);
        let xv = r.normal_tensor(vec![2, 4, 4, 4]);
        let gv = r.normal_tensor(vec![4]).scale(0.5).scaled_add(1.0, &Tensor::full(vec![4], 1.0), 1.0).unwrap();
        let bv = r.normal_tensor(vec![4]).scale(0.3);
        let leaves = [("x", xv), ("gamma", gv), ("beta", bv)];
        gradcheck::check_all(&leaves, |g, vars| {
            let y = g.group_norm(vars[0], 2, vars[1], vars[2], 1e-5)?;
            let sq = g.mul(y, y)?;
            Ok(g.mean(sq))
        });
    }

    #[test]
    fn fd_linear() {
        let mut r = RngStream::new(113);
        let xv = r.normal_tensor(vec![3, 5]);
        let wv = r.normal_tensor(vec![5, 4]).scale(0.5);
        let bv = r.normal_tensor(vec![4]);
        let leaves = [("x", xv), ("w", wv), ("b", bv)];
        gradcheck::check_all(&leaves, |g, vars| {
            let y = g.linear(vars[0], vars[1], vars[2])?;
            let sq = g.mul(y, y)?;
            Ok(g.mean(sq))
        });
    }

    #[test]
    fn fd_upsample_concat_bias() {
        let mut r = RngStream::new(127);
        let av = r.normal_tensor(vec![2, 2, 4, 4]);
        let bv = r.normal_tensor(vec![2, 3, 8, 8]);
        let cv = r.normal_tensor(vec![2, 5]);
        let leaves = [("a", av), ("b", bv), ("cb", cv)];
        gradcheck::check_all(&leaves, |g, vars| {
            let up = g.upsample_nearest(vars[0], 2)?;
            let cat = g.concat_channels(up, vars[1])?;
            let biased = g.add_channel_bias(cat, vars[2])?;
            let s = g.silu(biased);
            let sq = g.mul(s, s)?;
            Ok(g.mean(sq))
        });
    }

    #[test]
    fn fd_composite_graph() {
        let mut r = RngStream::new(131);
        let xv = r.normal_tensor(vec![2, 4, 8, 8]);
        let wv = r.normal_tensor(vec![4, 4, 3, 3]).scale(0.3);
        let bv = r.normal_tensor(vec![4]).scale(0.1);
        let gv = Tensor::full(vec![4], 1.0);
        let bev = Tensor::zeros(vec![4]);
        let leaves = [("x", xv), ("w", wv), ("b", bv), ("gamma", gv), ("beta", bev)];
        gradcheck::check_all(&leaves, |g, vars| {
            let h = g.group_norm(vars[0], 2, vars[3], vars[4], 1e-5)?;
            let h = g.silu(h);
            let h = g.conv2d(h, vars[1], vars[2], 1, 1)?;
            let h = g.add(h, vars[0])?;
            let sq = g.mul(h, h)?;
            Ok(g.mean(sq))
        });
    }
}
