use super::conv::{conv2d_backward, conv2d_forward, ConvGeom, RunningStats};
use super::gemm::{gemm, Trans};
use super::Tensor;
use crate::error::{Error, Result};
use crate::stats;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    SoftmaxLast(Var),
    NormalizeLast(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MeanAll(Var),
    SumLast(Var),
    ChannelAvg(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatChannels(Var, Var),
    SpatialWeightedSum {
        f: Var,
        a: Var,
    },
    DirichletRsample {
        alpha: Var,
        dlogg: Vec<f64>,
    },
    DirichletKl {
        q: Var,
        prior: Vec<f64>,
    },
    GaussianLogLik {
        x: Vec<f64>,
        mu: Var,
        sigma: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    requires_grad: bool,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// reverse. A fresh tape is built for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false, false)
    }

    /// Trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push_node(&mut self, value: Tensor, op: Op, trainable: bool, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            trainable,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, false, rg)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("unary preserves shape");
        self.push(out, op, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let d = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), d)?
        } else if tb.is_scalar() {
            let y = tb.item();
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())?
        } else if ta.is_scalar() {
            let x = ta.item();
            Tensor::new(tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())?
        } else {
            return Err(Error::shape(format!(
                "elementwise op on {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        Ok(self.push(out, op, &[a, b]))
    }

    // ----- convolution / normalization -----

    /// Same-padded convolution with an odd square kernel (3x3 pads by 1).
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let geom = ConvGeom::check(self.value(input), self.value(kernel), self.value(bias))?;
        let out = conv2d_forward(self.value(input), self.value(kernel), self.value(bias))?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &[input, kernel, bias],
        ))
    }

    /// Per-channel batch normalization. In training mode batch moments over
    /// N, H, W are used and `stats` is updated; otherwise `stats` is read.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        training: bool,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.channels() != c {
            return Err(Error::shape(format!("batchnorm affine params must have {c} channels")));
        }
        let hw = h * w;
        let m = n * hw;
        if training && m < 2 {
            return Err(Error::contract("batchnorm training needs N*H*W >= 2"));
        }
        let x = self.data(input);
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ci in 0..c {
            let chan = || (0..n).flat_map(move |ni| (ni * c + ci) * hw..(ni * c + ci + 1) * hw);
            let (mean, var) = if training {
                let mean = chan().map(|i| x[i]).sum::<f64>() / m as f64;
                let var = chan().map(|i| (x[i] - mean).powi(2)).sum::<f64>() / m as f64;
                let mo = stats.momentum;
                stats.mean[ci] = (1.0 - mo) * stats.mean[ci] + mo * mean;
                let unbiased = var * m as f64 / (m - 1) as f64;
                stats.var[ci] = (1.0 - mo) * stats.var[ci] + mo * unbiased;
                (mean, var)
            } else {
                (stats.mean[ci], stats.var[ci])
            };
            let is = 1.0 / (var + RunningStats::EPS).sqrt();
            inv_std[ci] = is;
            for i in chan() {
                xhat[i] = (x[i] - mean) * is;
            }
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ci = (i / hw) % c;
                g[ci] * v + b[ci]
            })
            .collect();
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            &[input, gamma, beta],
        ))
    }

    // ----- elementwise -----

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.data(x).iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `max(x, min)`; gradient passes only where `x > min`.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        self.unary(x, |v| v.max(min), Op::ClampMin(x, min))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    // ----- last-dim ops -----

    fn last_dim(&self, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&k) if k > 0 => Ok(k),
            _ => Err(Error::shape("operation needs a non-empty last dimension")),
        }
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let k = self.last_dim(x)?;
        let t = self.value(x);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::SoftmaxLast(x), &[x]))
    }

    /// Divides each last-dim row by its sum.
    pub fn normalize_lastdim(&mut self, x: Var) -> Result<Var> {
        let k = self.last_dim(x)?;
        let t = self.value(x);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                return Err(Error::Domain("normalizing a row that sums to zero".into()));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::NormalizeLast(x), &[x]))
    }

    pub fn sum_lastdim(&mut self, x: Var) -> Result<Var> {
        let k = self.last_dim(x)?;
        let t = self.value(x);
        let shape = t.shape()[..t.rank() - 1].to_vec();
        let out = t.data().chunks(k).map(|r| r.iter().sum()).collect();
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::SumLast(x), &[x]))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::shape("mean of empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::MeanAll(x), &[x]))
    }

    // ----- dense -----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(1.0, self.data(a), m, k, Trans::No, self.data(b), k, n, Trans::No, 0.0, &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    /// `x W^T + b` with `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, fan_in) = self.value(x).dims2()?;
        let (fan_out, wi) = self.value(w).dims2()?;
        if wi != fan_in || self.shape(b) != [fan_out] {
            return Err(Error::shape(format!(
                "linear: input [{n},{fan_in}], weight [{fan_out},{wi}], bias {:?}",
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; n * fan_out];
        for row in out.chunks_mut(fan_out) {
            row.copy_from_slice(self.data(b));
        }
        gemm(
            1.0,
            self.data(x),
            n,
            fan_in,
            Trans::No,
            self.data(w),
            fan_out,
            fan_in,
            Trans::Yes,
            1.0,
            &mut out,
        );
        let out = Tensor::new(vec![n, fan_out], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    // ----- channel pooling / attention -----

    pub fn channel_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if c == 0 {
            return Err(Error::shape("channel pooling needs C >= 1"));
        }
        let hw = h * w;
        let d = self.data(x);
        let mut out = vec![0.0; n * hw];
        for ni in 0..n {
            for ci in 0..c {
                let src = &d[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                for (o, &v) in out[ni * hw..(ni + 1) * hw].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= c as f64);
        let out = Tensor::new(vec![n, 1, h, w], out)?;
        Ok(self.push(out, Op::ChannelAvg(x), &[x]))
    }

    /// Max over channels; ties resolve to the lowest channel index.
    pub fn channel_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if c == 0 {
            return Err(Error::shape("channel pooling needs C >= 1"));
        }
        let hw = h * w;
        let d = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; n * hw];
        let mut argmax = vec![0usize; n * hw];
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..hw {
                    let v = d[(ni * c + ci) * hw + p];
                    if v > out[ni * hw + p] {
                        out[ni * hw + p] = v;
                        argmax[ni * hw + p] = ci;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, 1, h, w], out)?;
        Ok(self.push(out, Op::ChannelMax { x, argmax }, &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "concat {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for ni in 0..n {
            out.extend_from_slice(&self.data(a)[ni * ca * hw..(ni + 1) * ca * hw]);
            out.extend_from_slice(&self.data(b)[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let out = Tensor::new(vec![n, ca + cb, h, w], out)?;
        Ok(self.push(out, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// `z[n, k] = sum_{i,j} a[n, 0, i, j] * f[n, k, i, j]`.
    pub fn spatial_weighted_sum(&mut self, f: Var, a: Var) -> Result<Var> {
        let (n, k, h, w) = self.value(f).dims4()?;
        if self.shape(a) != [n, 1, h, w] {
            return Err(Error::shape(format!(
                "attention map {:?} does not match features {:?}",
                self.shape(a),
                self.shape(f)
            )));
        }
        let hw = h * w;
        let (fd, ad) = (self.data(f), self.data(a));
        let mut out = vec![0.0; n * k];
        for ni in 0..n {
            let am = &ad[ni * hw..(ni + 1) * hw];
            for ki in 0..k {
                let fm = &fd[(ni * k + ki) * hw..(ni * k + ki + 1) * hw];
                out[ni * k + ki] = fm.iter().zip(am).map(|(x, y)| x * y).sum();
            }
        }
        let out = Tensor::new(vec![n, k], out)?;
        Ok(self.push(out, Op::SpatialWeightedSum { f, a }, &[f, a]))
    }

    // ----- distributions -----

    /// Reparameterized Dirichlet draw per row of `alpha: [n, k]` using the
    /// frozen uniforms `noise: [n, k]` (one per Gamma component).
    pub fn dirichlet_rsample(&mut self, alpha: Var, noise: &Tensor) -> Result<Var> {
        let (n, k) = self.value(alpha).dims2()?;
        if noise.shape() != [n, k] {
            return Err(Error::shape(format!(
                "noise {:?} does not match alpha [{n},{k}]",
                noise.shape()
            )));
        }
        let mut z = Vec::with_capacity(n * k);
        let mut dlogg = Vec::with_capacity(n * k);
        for (a, u) in self.data(alpha).chunks(k).zip(noise.data().chunks(k)) {
            let draw = stats::dirichlet_from_uniforms(a, u)?;
            z.extend_from_slice(&draw.sample);
            dlogg.extend_from_slice(&draw.dlog_gamma);
        }
        let out = Tensor::new(vec![n, k], z)?;
        Ok(self.push(out, Op::DirichletRsample { alpha, dlogg }, &[alpha]))
    }

    /// Row-wise `KL(Dir(q_n) || Dir(prior))`, output `[n]`.
    pub fn dirichlet_kl(&mut self, q: Var, prior: &[f64]) -> Result<Var> {
        let (n, k) = self.value(q).dims2()?;
        if prior.len() != k {
            return Err(Error::shape(format!("prior has {} components, q has {k}", prior.len())));
        }
        let out = self
            .data(q)
            .chunks(k)
            .map(|row| stats::dirichlet_kl_raw(row, prior))
            .collect::<Result<Vec<_>>>()?;
        let out = Tensor::new(vec![n], out)?;
        Ok(self.push(
            out,
            Op::DirichletKl {
                q,
                prior: prior.to_vec(),
            },
            &[q],
        ))
    }

    /// Row-wise diagonal-Gaussian log density of the constant `x: [n, b]`.
    pub fn gaussian_log_likelihood(&mut self, x: &Tensor, mu: Var, sigma: Var) -> Result<Var> {
        let (n, b) = self.value(mu).dims2()?;
        if x.shape() != [n, b] || self.shape(sigma) != [n, b] {
            return Err(Error::shape("gaussian log-likelihood operands disagree in shape"));
        }
        let out = (0..n)
            .map(|i| {
                let r = i * b..(i + 1) * b;
                stats::gaussian_log_likelihood_raw(
                    &x.data()[r.clone()],
                    &self.data(mu)[r.clone()],
                    &self.data(sigma)[r],
                )
            })
            .collect();
        let out = Tensor::new(vec![n], out)?;
        Ok(self.push(
            out,
            Op::GaussianLogLik {
                x: x.data().to_vec(),
                mu,
                sigma,
            },
            &[mu, sigma],
        ))
    }

    // ----- reverse pass -----

    /// Accumulates d(loss)/d(node) for every node the loss depends on.
    /// Every trainable leaf ends up with a gradient (zero if unused).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            } else if !node.trainable {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        let val = |v: Var| nodes[v.0].value.data();
        macro_rules! acc {
            ($v:expr) => {
                slot(nodes, grads, $v)
            };
        }
        macro_rules! each {
            ($v:expr, |$j:ident, $d:ident| $body:expr) => {
                if let Some(buf) = acc!($v) {
                    for ($j, $d) in buf.iter_mut().enumerate() {
                        *$d += $body;
                    }
                }
            };
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want_input = nodes[input.0].requires_grad;
                let (dk, db, dx) = conv2d_backward(g, val(*kernel), val(*input), geom, want_input);
                each!(*kernel, |j, d| dk[j]);
                each!(*bias, |j, d| db[j]);
                if let Some(dx) = dx {
                    each!(*input, |j, d| dx[j]);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (n, c, h, w) = nodes[input.0].value.dims4().expect("rank 4");
                let hw = h * w;
                let m = (n * hw) as f64;
                let gam = val(*gamma);
                let mut dgam = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let chan = |ci: usize| (0..n).flat_map(move |ni| (ni * c + ci) * hw..(ni * c + ci + 1) * hw);
                for ci in 0..c {
                    for j in chan(ci) {
                        dgam[ci] += g[j] * xhat[j];
                        dbeta[ci] += g[j];
                    }
                }
                if let Some(dx) = acc!(*input) {
                    for ci in 0..c {
                        let s = gam[ci] * inv_std[ci];
                        if *training {
                            let (sum_g, sum_gx) = (dbeta[ci], dgam[ci]);
                            for j in chan(ci) {
                                dx[j] += s * (g[j] - sum_g / m - xhat[j] * sum_gx / m);
                            }
                        } else {
                            for j in chan(ci) {
                                dx[j] += s * g[j];
                            }
                        }
                    }
                }
                each!(*gamma, |j, d| dgam[j]);
                each!(*beta, |j, d| dbeta[j]);
            }
            Op::Relu(x) => {
                let xv = val(*x);
                each!(*x, |j, d| if xv[j] > 0.0 { g[j] } else { 0.0 });
            }
            Op::Sigmoid(x) => each!(*x, |j, d| g[j] * out[j] * (1.0 - out[j])),
            Op::Softplus(x) => {
                let xv = val(*x);
                each!(*x, |j, d| g[j] * sigmoid(xv[j]));
            }
            Op::Exp(x) => each!(*x, |j, d| g[j] * out[j]),
            Op::Log(x) => {
                let xv = val(*x);
                each!(*x, |j, d| g[j] / xv[j]);
            }
            Op::Square(x) => {
                let xv = val(*x);
                each!(*x, |j, d| 2.0 * g[j] * xv[j]);
            }
            Op::Scale(x, c) => each!(*x, |j, d| g[j] * c),
            Op::AddScalar(x) => each!(*x, |j, d| g[j]),
            Op::ClampMin(x, min) => {
                let xv = val(*x);
                each!(*x, |j, d| if xv[j] > *min { g[j] } else { 0.0 });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                reduce_into(acc!(*a), g, |j| g[j]);
                reduce_into(acc!(*b), g, |j| sign * g[j]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let pick = |v: &[f64], j: usize| if v.len() == 1 { v[0] } else { v[j] };
                reduce_into(acc!(*a), g, |j| g[j] * pick(bv, j));
                reduce_into(acc!(*b), g, |j| g[j] * pick(av, j));
            }
            Op::SoftmaxLast(x) => {
                let k = *nodes[i].value.shape().last().expect("non-empty");
                if let Some(dx) = acc!(*x) {
                    for ((dr, gr), yr) in dx.chunks_mut(k).zip(g.chunks(k)).zip(out.chunks(k)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::NormalizeLast(x) => {
                let k = *nodes[i].value.shape().last().expect("non-empty");
                let xv = val(*x);
                if let Some(dx) = acc!(*x) {
                    for (((dr, gr), yr), xr) in dx
                        .chunks_mut(k)
                        .zip(g.chunks(k))
                        .zip(out.chunks(k))
                        .zip(xv.chunks(k))
                    {
                        let s: f64 = xr.iter().sum();
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            dr[j] += (gr[j] - dot) / s;
                        }
                    }
                }
            }
            Op::SumLast(x) => {
                let k = *nodes[x.0].value.shape().last().expect("non-empty");
                each!(*x, |j, d| g[j / k]);
            }
            Op::MeanAll(x) => {
                let n = nodes[x.0].value.len() as f64;
                each!(*x, |_j, d| g[0] / n);
            }
            Op::Matmul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().expect("rank 2");
                let n = nodes[b.0].value.shape()[1];
                if let Some(da) = acc!(*a) {
                    gemm(1.0, g, m, n, Trans::No, val(*b), k, n, Trans::Yes, 1.0, da);
                }
                if let Some(db) = acc!(*b) {
                    gemm(1.0, val(*a), m, k, Trans::Yes, g, m, n, Trans::No, 1.0, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fan_in) = nodes[x.0].value.dims2().expect("rank 2");
                let fan_out = nodes[w.0].value.shape()[0];
                if let Some(dx) = acc!(*x) {
                    gemm(1.0, g, n, fan_out, Trans::No, val(*w), fan_out, fan_in, Trans::No, 1.0, dx);
                }
                if let Some(dw) = acc!(*w) {
                    gemm(1.0, g, n, fan_out, Trans::Yes, val(*x), n, fan_in, Trans::No, 1.0, dw);
                }
                if let Some(db) = acc!(*b) {
                    for row in g.chunks(fan_out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::ChannelAvg(x) => {
                let (_, c, h, w) = nodes[x.0].value.dims4().expect("rank 4");
                let hw = h * w;
                each!(*x, |j, d| g[(j / (c * hw)) * hw + j % hw] / c as f64);
            }
            Op::ChannelMax { x, argmax } => {
                let (_, c, h, w) = nodes[x.0].value.dims4().expect("rank 4");
                let hw = h * w;
                each!(*x, |j, d| {
                    let (ni, ci, p) = (j / (c * hw), (j / hw) % c, j % hw);
                    if argmax[ni * hw + p] == ci {
                        g[ni * hw + p]
                    } else {
                        0.0
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let (_, ca, h, w) = nodes[a.0].value.dims4().expect("rank 4");
                let cb = nodes[b.0].value.shape()[1];
                let hw = h * w;
                let ct = ca + cb;
                each!(*a, |j, d| g[(j / (ca * hw)) * ct * hw + j % (ca * hw)]);
                each!(*b, |j, d| g[(j / (cb * hw)) * ct * hw + ca * hw + j % (cb * hw)]);
            }
            Op::SpatialWeightedSum { f, a } => {
                let (_, k, h, w) = nodes[f.0].value.dims4().expect("rank 4");
                let hw = h * w;
                let (fv, av) = (val(*f), val(*a));
                each!(*f, |j, d| {
                    let (ni, p) = (j / (k * hw), j % hw);
                    g[j / hw] * av[ni * hw + p]
                });
                each!(*a, |j, d| {
                    let (ni, p) = (j / hw, j % hw);
                    (0..k).map(|ki| g[ni * k + ki] * fv[(ni * k + ki) * hw + p]).sum::<f64>()
                });
            }
            Op::DirichletRsample { alpha, dlogg } => {
                let k = nodes[alpha.0].value.shape()[1];
                if let Some(da) = acc!(*alpha) {
                    for (((dr, gr), zr), lr) in da
                        .chunks_mut(k)
                        .zip(g.chunks(k))
                        .zip(out.chunks(k))
                        .zip(dlogg.chunks(k))
                    {
                        let dot: f64 = gr.iter().zip(zr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            dr[j] += lr[j] * zr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::DirichletKl { q, prior } => {
                let k = prior.len();
                let qv = val(*q);
                if let Some(dq) = acc!(*q) {
                    for (r, (dr, qr)) in dq.chunks_mut(k).zip(qv.chunks(k)).enumerate() {
                        let grad = stats::dirichlet_kl_grad_q(qr, prior);
                        for j in 0..k {
                            dr[j] += g[r] * grad[j];
                        }
                    }
                }
            }
            Op::GaussianLogLik { x, mu, sigma } => {
                let b = nodes[mu.0].value.shape()[1];
                let (mv, sv) = (val(*mu), val(*sigma));
                each!(*mu, |j, d| g[j / b] * (x[j] - mv[j]) / (sv[j] * sv[j]));
                each!(*sigma, |j, d| {
                    let r = (x[j] - mv[j]) / sv[j];
                    g[j / b] * (r * r - 1.0) / sv[j]
                });
            }
        }
    }
}

/// Accumulation buffer for `v`, or None when it needs no gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

/// Accumulates `f(j)` into `buf`, summing to one value if `buf` is a scalar.
fn reduce_into(buf: Option<&mut Vec<f64>>, g: &[f64], f: impl Fn(usize) -> f64) {
    let Some(buf) = buf else { return };
    if buf.len() == g.len() {
        for (j, d) in buf.iter_mut().enumerate() {
            *d += f(j);
        }
    } else {
        buf[0] += (0..g.len()).map(f).sum::<f64>();
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
