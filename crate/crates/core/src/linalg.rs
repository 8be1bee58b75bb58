//! Small dense factorizations used by the baselines.

/// Thin SVD `A = U diag(s) Vᵀ` of a row-major `m × n` matrix with `m ≥ n`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `m × n`, row-major; columns with zero singular value are left zero.
    pub u: Vec<f64>,
    /// Descending.
    pub s: Vec<f64>,
    /// `n × n`, row-major; column `j` pairs with `s[j]`.
    pub v: Vec<f64>,
}

/// One-sided Jacobi SVD.
///
/// Columns are rotated pairwise until mutually orthogonal to working
/// precision; singular values are the final column norms.
pub fn jacobi_svd(a: &[f64], m: usize, n: usize) -> Svd {
    assert_eq!(a.len(), m * n);
    // column-major working copies
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let eps = f64::EPSILON;
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    alpha += cols[p][i] * cols[p][i];
                    beta += cols[q][i] * cols[q][i];
                    gamma += cols[p][i] * cols[q][i];
                }
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut u = vec![0.0; m * n];
    let mut vv = vec![0.0; n * n];
    let mut s = Vec::with_capacity(n);
    let tiny = norms.iter().cloned().fold(0.0, f64::max) * eps * (m.max(n) as f64);
    for (dst, &src) in order.iter().enumerate() {
        let sv = norms[src];
        s.push(sv);
        if sv > tiny && sv > 0.0 {
            for i in 0..m {
                u[i * n + dst] = cols[src][i] / sv;
            }
        }
        for i in 0..n {
            vv[i * n + dst] = v[src][i];
        }
    }
    Svd { u, s, v: vv }
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Least-squares solve of `min ‖A x − b‖` for row-major `m × n` `A`
/// (`m ≥ n`) by Householder QR. Returns `None` when `R` has a diagonal entry
/// below `rank_tol · max|R_ii|`.
pub fn qr_least_squares(a: &[f64], m: usize, n: usize, b: &[f64], rank_tol: f64) -> Option<Vec<f64>> {
    assert_eq!(a.len(), m * n);
    assert_eq!(b.len(), m);
    if m < n {
        return None;
    }
    let mut r = a.to_vec();
    let mut y = b.to_vec();
    let mut diag = vec![0.0; n];
    for k in 0..n {
        let mut sigma = 0.0;
        for i in k..m {
            sigma += r[i * n + k] * r[i * n + k];
        }
        let alpha_norm = sigma.sqrt();
        if alpha_norm == 0.0 {
            diag[k] = 0.0;
            continue;
        }
        let x0 = r[k * n + k];
        let alpha = if x0 > 0.0 { -alpha_norm } else { alpha_norm };
        // v = x - alpha e1, stored in place below the diagonal
        let mut vk: Vec<f64> = (k..m).map(|i| r[i * n + k]).collect();
        vk[0] -= alpha;
        let vnorm2 = dot(&vk, &vk);
        if vnorm2 == 0.0 {
            diag[k] = alpha;
            continue;
        }
        for j in k..n {
            let mut d = 0.0;
            for (t, i) in (k..m).enumerate() {
                d += vk[t] * r[i * n + j];
            }
            let f = 2.0 * d / vnorm2;
            for (t, i) in (k..m).enumerate() {
                r[i * n + j] -= f * vk[t];
            }
        }
        let d: f64 = (k..m).enumerate().map(|(t, i)| vk[t] * y[i]).sum();
        let f = 2.0 * d / vnorm2;
        for (t, i) in (k..m).enumerate() {
            y[i] -= f * vk[t];
        }
        diag[k] = r[k * n + k];
    }
    let dmax = diag.iter().map(|d| d.abs()).fold(0.0, f64::max);
    if dmax == 0.0 || diag.iter().any(|d| d.abs() <= rank_tol * dmax) {
        return None;
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let mut acc = y[k];
        for j in k + 1..n {
            acc -= r[k * n + j] * x[j];
        }
        x[k] = acc / r[k * n + k];
    }
    Some(x)
}
