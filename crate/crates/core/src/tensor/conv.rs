use super::gemm::{gemm, Trans};
use super::Tensor;
use crate::error::{Error, Result};

/// Per-channel running mean/variance carried across batch-norm calls.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub ks: usize,
}

impl ConvGeom {
    pub fn check(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Self> {
        let (n, c_in, h, w) = input.dims4()?;
        let (c_out, kc, kh, kw) = kernel.dims4()?;
        if kc != c_in {
            return Err(Error::shape(format!(
                "conv input has {c_in} channels but kernel expects {kc}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if bias.shape() != [c_out] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {c_out} output channels",
                bias.shape()
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("conv spatial dims must be >= 1"));
        }
        Ok(ConvGeom {
            n,
            c_in,
            c_out,
            h,
            w,
            ks: kh,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.ks * self.ks
    }
}

/// Valid output columns `x` for horizontal offset `dx`: `sx = x + dx` in range.
fn valid_span(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).clamp(0, w as isize) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo, hi.max(lo))
}

/// Unfolds samples `n0..n0+nn` of `input` into the `[c_in*ks*ks, nn*h*w]`
/// prefix of `col`, zero padded. Every entry of the prefix is overwritten.
pub(crate) fn im2col_into(input: &[f64], g: &ConvGeom, n0: usize, nn: usize, col: &mut [f64]) {
    let (hw, pad) = (g.h * g.w, (g.ks / 2) as isize);
    let cols = nn * hw;
    let col = &mut col[..g.patch_len() * cols];
    for ci in 0..g.c_in {
        for ky in 0..g.ks {
            for kx in 0..g.ks {
                let row = (ci * g.ks + ky) * g.ks + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                let (lo, hi) = valid_span(g.w, dx);
                for n in 0..nn {
                    let s = (n0 + n) * g.c_in + ci;
                    let src = &input[s * hw..(s + 1) * hw];
                    let dst = &mut dst_row[n * hw..(n + 1) * hw];
                    for (y, out) in dst.chunks_exact_mut(g.w).enumerate() {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= g.h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src_row = &src[sy as usize * g.w..(sy as usize + 1) * g.w];
                        out[..lo].fill(0.0);
                        out[hi..].fill(0.0);
                        if lo < hi {
                            let s0 = (lo as isize + dx) as usize;
                            out[lo..hi].copy_from_slice(&src_row[s0..s0 + hi - lo]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: scatters column gradients of samples
/// `n0..n0+nn` back onto the input gradient.
pub(crate) fn col2im_add(col: &[f64], g: &ConvGeom, n0: usize, nn: usize, dinput: &mut [f64]) {
    let (hw, pad) = (g.h * g.w, (g.ks / 2) as isize);
    let cols = nn * hw;
    for ci in 0..g.c_in {
        for ky in 0..g.ks {
            for kx in 0..g.ks {
                let row = (ci * g.ks + ky) * g.ks + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                let (lo, hi) = valid_span(g.w, dx);
                if lo >= hi {
                    continue;
                }
                let s0 = (lo as isize + dx) as usize;
                for n in 0..nn {
                    let src = &src_row[n * hw..(n + 1) * hw];
                    let s = (n0 + n) * g.c_in + ci;
                    let dst = &mut dinput[s * hw..(s + 1) * hw];
                    for y in 0..g.h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= g.h as isize {
                            continue;
                        }
                        let d = &mut dst[sy as usize * g.w + s0..sy as usize * g.w + s0 + hi - lo];
                        let s = &src[y * g.w + lo..y * g.w + hi];
                        for (a, b) in d.iter_mut().zip(s) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

// Unfolded buffers are capped near this many values (4 MB) so they stay on
// the allocator heap instead of being mapped and faulted in on every call.
const CHUNK_VALUES: usize = 1 << 19;

impl ConvGeom {
    fn chunk(&self) -> usize {
        (CHUNK_VALUES / (self.patch_len() * self.h * self.w)).clamp(1, self.n.max(1))
    }
}

/// `[n, c, hw]` -> `[c, n*hw]` layout swap.
fn nchw_to_cn_into(x: &[f64], n: usize, c: usize, hw: usize, out: &mut [f64]) {
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * hw + ni * hw..ci * n * hw + (ni + 1) * hw]
                .copy_from_slice(&x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]);
        }
    }
}

/// Inverse of [`nchw_to_cn_into`].
fn cn_to_nchw_into(x: &[f64], n: usize, c: usize, hw: usize, out: &mut [f64]) {
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                .copy_from_slice(&x[ci * n * hw + ni * hw..ci * n * hw + (ni + 1) * hw]);
        }
    }
}

/// Same-padded 2-D convolution (odd square kernel) without recording.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = ConvGeom::check(input, kernel, bias)?;
    let hw = g.h * g.w;
    let mut out = vec![0.0; g.n * g.c_out * hw];
    let step = g.chunk();
    let mut col = vec![0.0; g.patch_len() * step * hw];
    let mut out_cn = vec![0.0; g.c_out * step * hw];
    let mut n0 = 0;
    while n0 < g.n {
        let nn = step.min(g.n - n0);
        let cols = nn * hw;
        im2col_into(input.data(), &g, n0, nn, &mut col);
        let out_cn = &mut out_cn[..g.c_out * cols];
        for (co, row) in out_cn.chunks_mut(cols).enumerate() {
            row.fill(bias.data()[co]);
        }
        gemm(
            1.0,
            kernel.data(),
            g.c_out,
            g.patch_len(),
            Trans::No,
            &col[..g.patch_len() * cols],
            g.patch_len(),
            cols,
            Trans::No,
            1.0,
            out_cn,
        );
        cn_to_nchw_into(out_cn, nn, g.c_out, hw, &mut out[n0 * g.c_out * hw..(n0 + nn) * g.c_out * hw]);
        n0 += nn;
    }
    Tensor::new(vec![g.n, g.c_out, g.h, g.w], out)
}

/// Gradients of a convolution given upstream `grad` in NCHW layout.
/// Returns `(d_kernel, d_bias, d_input)`; `d_input` only when requested.
/// The input is unfolded again chunk by chunk rather than kept from the
/// forward pass.
pub(crate) fn conv2d_backward(
    grad: &[f64],
    kernel: &[f64],
    input: &[f64],
    g: &ConvGeom,
    want_input: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let hw = g.h * g.w;
    let mut dk = vec![0.0; g.c_out * g.patch_len()];
    let mut db = vec![0.0; g.c_out];
    let mut dx = want_input.then(|| vec![0.0; g.n * g.c_in * hw]);
    let step = g.chunk();
    let mut col = vec![0.0; g.patch_len() * step * hw];
    let mut g_cn = vec![0.0; g.c_out * step * hw];
    let mut n0 = 0;
    while n0 < g.n {
        let nn = step.min(g.n - n0);
        let cols = nn * hw;
        let g_cn = &mut g_cn[..g.c_out * cols];
        nchw_to_cn_into(&grad[n0 * g.c_out * hw..(n0 + nn) * g.c_out * hw], nn, g.c_out, hw, g_cn);
        let col = &mut col[..g.patch_len() * cols];
        im2col_into(input, g, n0, nn, col);
        gemm(1.0, g_cn, g.c_out, cols, Trans::No, col, g.patch_len(), cols, Trans::Yes, 1.0, &mut dk);
        for (d, r) in db.iter_mut().zip(g_cn.chunks(cols)) {
            *d += r.iter().sum::<f64>();
        }
        if let Some(dx) = dx.as_mut() {
            // the unfolded input is no longer needed; reuse it for d(col)
            gemm(1.0, kernel, g.c_out, g.patch_len(), Trans::Yes, g_cn, g.c_out, cols, Trans::No, 0.0, col);
            col2im_add(col, g, n0, nn, dx);
        }
        n0 += nn;
    }
    (dk, db, dx)
}
