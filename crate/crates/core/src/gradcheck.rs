//! Central-difference gradient checking against [`Tape::backward`].

use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Tape, Tensor, Var};

/// Outcome of a gradient check: one relative error per parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` per tensor,
    /// or `||analytic - numeric|| / floor` when both norms are below the floor.
    pub rel_errors: Vec<f64>,
    pub analytic_norms: Vec<f64>,
    pub numeric_norms: Vec<f64>,
    /// Round-off level of the central differences for each tensor; gradients
    /// below it cannot be resolved.
    pub floors: Vec<f64>,
}

impl GradCheckReport {
    /// Whether tensor `i` has a gradient the differences can resolve.
    pub fn resolved(&self, i: usize) -> bool {
        self.analytic_norms[i].max(self.numeric_norms[i]) > self.floors[i]
    }

    /// Largest relative error over resolved tensors.
    pub fn max_rel_error(&self) -> f64 {
        (0..self.rel_errors.len())
            .filter(|&i| self.resolved(i))
            .map(|i| self.rel_errors[i])
            .fold(0.0, f64::max)
    }

    /// Largest `error / floor` over tensors whose gradient is zero at the
    /// resolution of the differences; at most 1 when both sides agree.
    pub fn max_unresolved_ratio(&self) -> f64 {
        (0..self.rel_errors.len())
            .filter(|&i| !self.resolved(i))
            .map(|i| self.rel_errors[i])
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol && self.max_unresolved_ratio() <= 1.0
    }
}

/// Compares backward-pass gradients with central differences of step `h`.
///
/// `build` must record a scalar loss on the given tape from the parameter
/// handles, and must be a pure function of the parameter values (any
/// randomness frozen). Only the first `max_entries` elements of each
/// parameter are probed when a limit is given.
pub fn check_gradients<F>(
    params: &[Tensor],
    h: f64,
    max_entries: Option<usize>,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let loss_value = tape.value(loss).item();
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).ok_or_else(|| Error::contract("missing grad")))
        .collect::<Result<_>>()?;

    let mut eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        rel_errors: Vec::with_capacity(params.len()),
        analytic_norms: Vec::with_capacity(params.len()),
        numeric_norms: Vec::with_capacity(params.len()),
        floors: Vec::with_capacity(params.len()),
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let n = max_entries.map_or(grad.len(), |m| m.min(grad.len()));
        let (mut diff2, mut a2, mut f2) = (0.0, 0.0, 0.0);
        for j in 0..n {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff2 += (grad[j] - numeric).powi(2);
            a2 += grad[j].powi(2);
            f2 += numeric.powi(2);
        }
        // each difference quotient carries about eps*|loss|/h of round-off
        let floor = (10.0 * (n as f64).sqrt() * f64::EPSILON * loss_value.abs().max(1.0) / h).max(1e-10);
        let scale = a2.sqrt().max(f2.sqrt()).max(floor);
        report.rel_errors.push(diff2.sqrt() / scale);
        report.analytic_norms.push(a2.sqrt());
        report.numeric_norms.push(f2.sqrt());
        report.floors.push(floor);
    }
    Ok(report)
}

/// Central-difference step used throughout the gradient suites.
pub const FD_STEP: f64 = 1e-5;

/// Gradient-checks every tape operation on randomly shaped inputs drawn from
/// `rng`. Each op output is projected onto a fixed random tensor and averaged
/// so that upstream gradients are non-uniform.
pub fn op_suite<R: rand::Rng>(rng: &mut R) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let (n, c, c2) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=3));
    let (h, w, k) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(2..=5));
    let n_bn = if n * h * w < 2 { 2 } else { n };
    let scalar = Tensor::scalar(rng.random_range(-2.0..2.0));
    let mut rand_t = |shape: &[usize], lo: f64, hi: f64| {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
    };

    let img = [n, c, h, w];
    let bn_img = [n_bn, c, h, w];
    let x = rand_t(&img, -1.0, 1.0);
    let x_bn = rand_t(&bn_img, -2.0, 2.0);
    let x_pos = rand_t(&img, 0.2, 2.0);
    let kernel3 = rand_t(&[c2, c, 3, 3], -1.0, 1.0);
    let kernel1 = rand_t(&[c2, c, 1, 1], -1.0, 1.0);
    let bias = rand_t(&[c2], -1.0, 1.0);
    let gamma = rand_t(&[c], 0.5, 1.5);
    let beta = rand_t(&[c], -0.5, 0.5);
    let rows = rand_t(&[n, k], -1.5, 1.5);
    let rows2 = rand_t(&[n, k], -1.5, 1.5);
    let alpha = rand_t(&[n, k], 0.5, 4.0);
    let mat_b = rand_t(&[k, c2], -1.0, 1.0);
    let lin_w = rand_t(&[c2, k], -1.0, 1.0);
    let f_map = rand_t(&[n, k, h, w], -1.0, 1.0);
    let a_map = rand_t(&[n, 1, h, w], 0.0, 1.0);
    let noise = rand_t(&[n, k], 0.02, 0.98);
    let prior = rand_t(&[k], 0.5, 2.0).into_data();
    let spectra = rand_t(&[n, k], -1.0, 1.0);
    let sigma = rand_t(&[n, k], 0.3, 1.5);
    let running = {
        let mut s = RunningStats::new(c);
        s.mean = rand_t(&[c], -0.5, 0.5).into_data();
        s.var = rand_t(&[c], 0.5, 2.0).into_data();
        s
    };
    let mut proj_cache: Vec<Tensor> = Vec::new();
    for shape in [
        &img[..],
        &bn_img[..],
        &[n, c2, h, w][..],
        &[n, k][..],
        &[n, c2][..],
        &[n, 1, h, w][..],
        &[n, 2 * c, h, w][..],
        &[n][..],
    ] {
        proj_cache.push(rand_t(shape, -1.0, 1.0));
    }
    let proj = move |t: &mut Tape, v: Var| -> Result<Var> {
        let shape = t.value(v).shape().to_vec();
        let p = proj_cache
            .iter()
            .find(|p| p.shape() == shape.as_slice())
            .cloned()
            .ok_or_else(|| Error::shape(format!("no projection for {shape:?}")))?;
        let pv = t.constant(p);
        let m = t.mul(v, pv)?;
        t.mean_all(m)
    };

    let h_fd = FD_STEP;
    let mut out = Vec::new();
    macro_rules! case {
        ($name:expr, [$($p:expr),*], |$t:ident, $v:ident| $body:expr) => {{
            let proj = proj.clone();
            let report = check_gradients(&[$($p.clone()),*], h_fd, None, |$t, $v| {
                let y = $body?;
                proj($t, y)
            })?;
            out.push(($name, report));
        }};
    }

    case!("conv2d_3x3", [x, kernel3, bias], |t, v| t.conv2d(v[0], v[1], v[2]));
    case!("conv2d_1x1", [x, kernel1, bias], |t, v| t.conv2d(v[0], v[1], v[2]));
    case!("batchnorm_train", [x_bn, gamma, beta], |t, v| {
        let mut s = RunningStats::new(c);
        t.batchnorm2d(v[0], v[1], v[2], &mut s, true)
    });
    case!("batchnorm_eval", [x, gamma, beta], |t, v| {
        let mut s = running.clone();
        t.batchnorm2d(v[0], v[1], v[2], &mut s, false)
    });
    case!("relu", [x], |t, v| Ok::<_, Error>(t.relu(v[0])));
    case!("sigmoid", [x], |t, v| Ok::<_, Error>(t.sigmoid(v[0])));
    case!("softplus", [x], |t, v| Ok::<_, Error>(t.softplus(v[0])));
    case!("exp", [x], |t, v| Ok::<_, Error>(t.exp(v[0])));
    case!("log", [x_pos], |t, v| t.log(v[0]));
    case!("square", [x], |t, v| Ok::<_, Error>(t.square(v[0])));
    case!("scale", [x], |t, v| Ok::<_, Error>(t.scale(v[0], -1.7)));
    case!("add_scalar", [x], |t, v| Ok::<_, Error>(t.add_scalar(v[0], 0.3)));
    case!("clamp_min", [x], |t, v| Ok::<_, Error>(t.clamp_min(v[0], 0.05)));
    case!("add", [rows, rows2], |t, v| t.add(v[0], v[1]));
    case!("sub", [rows, rows2], |t, v| t.sub(v[0], v[1]));
    case!("mul", [rows, rows2], |t, v| t.mul(v[0], v[1]));
    case!("mul_scalar", [rows, scalar], |t, v| t.mul(v[0], v[1]));
    case!("add_scalar_tensor", [scalar, rows], |t, v| t.add(v[0], v[1]));
    case!("softmax_lastdim", [rows], |t, v| t.softmax_lastdim(v[0]));
    case!("normalize_lastdim", [alpha], |t, v| t.normalize_lastdim(v[0]));
    case!("sum_lastdim", [rows], |t, v| t.sum_lastdim(v[0]));
    case!("matmul", [rows, mat_b], |t, v| t.matmul(v[0], v[1]));
    case!("linear", [rows, lin_w, bias], |t, v| t.linear(v[0], v[1], v[2]));
    case!("channel_avg_pool", [x], |t, v| t.channel_avg_pool(v[0]));
    case!("channel_max_pool", [x], |t, v| t.channel_max_pool(v[0]));
    case!("concat_channels", [x, x_pos], |t, v| t.concat_channels(v[0], v[1]));
    case!("spatial_weighted_sum", [f_map, a_map], |t, v| t.spatial_weighted_sum(v[0], v[1]));
    case!("dirichlet_rsample", [alpha], |t, v| t.dirichlet_rsample(v[0], &noise));
    case!("dirichlet_kl", [alpha], |t, v| t.dirichlet_kl(v[0], &prior));
    case!("gaussian_log_likelihood", [rows, sigma], |t, v| {
        t.gaussian_log_likelihood(&spectra, v[0], v[1])
    });
    {
        let report = check_gradients(&[x.clone()], h_fd, None, |t, v| t.mean_all(v[0]))?;
        out.push(("mean_all", report));
    }
    Ok(out)
}
