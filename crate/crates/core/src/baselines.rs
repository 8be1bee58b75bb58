//! Classical unmixing: VCA endmember extraction and fully constrained least
//! squares (FCLS) abundance estimation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{AbundanceMap, EndmemberMatrix, HsiCube};
use crate::error::{Error, Result};
use crate::linalg::{dot, jacobi_svd, norm, qr_least_squares};
use crate::tensor::gemm::{gemm, Trans};

/// Result of one constrained solve.
#[derive(Clone, Debug, PartialEq)]
pub struct FclsSolution {
    /// On the simplex.
    pub abundances: Vec<f64>,
    /// `‖Eᵀz − x‖₂` for the returned `z`.
    pub residual_norm: f64,
    /// Set when the endmembers were numerically dependent and the ridge
    /// term was added.
    pub regularized: bool,
}

/// Outcome of [`nnls`].
#[derive(Clone, Debug)]
pub struct NnlsSolution {
    pub x: Vec<f64>,
    /// `Aᵀ(b − Ax)` at the solution.
    pub dual: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Lawson–Hanson active-set solve of `min ‖Ax − b‖` subject to `x ≥ 0`,
/// `A` row-major `m × n`.
///
/// Stops when every inactive dual entry is at most `tol · ‖A‖_F · max(‖b‖, 1)`
/// or after `max_iter` outer iterations.
pub fn nnls(a: &[f64], m: usize, n: usize, b: &[f64], max_iter: usize, tol: f64) -> NnlsSolution {
    let a_norm = norm(a);
    let thresh = tol * a_norm * norm(b).max(1.0);
    let mut x = vec![0.0; n];
    let mut passive = vec![false; n];
    let dual = |x: &[f64]| -> Vec<f64> {
        let r: Vec<f64> = (0..m).map(|i| b[i] - dot(&a[i * n..(i + 1) * n], x)).collect();
        (0..n).map(|j| (0..m).map(|i| a[i * n + j] * r[i]).sum()).collect()
    };
    let solve_passive = |passive: &[bool]| -> Vec<f64> {
        let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let p = cols.len();
        let mut sub = vec![0.0; m * p];
        for i in 0..m {
            for (t, &j) in cols.iter().enumerate() {
                sub[i * p + t] = a[i * n + j];
            }
        }
        let sol = qr_least_squares(&sub, m, p, b, 1e-14).unwrap_or_else(|| vec![0.0; p]);
        let mut s = vec![0.0; n];
        for (t, &j) in cols.iter().enumerate() {
            s[j] = sol[t];
        }
        s
    };

    let mut w = dual(&x);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let cand = (0..n)
            .filter(|&j| !passive[j] && w[j] > thresh)
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if w[b] >= w[j] => Some(b),
                _ => Some(j),
            });
        let Some(t) = cand else {
            converged = true;
            break;
        };
        iterations += 1;
        passive[t] = true;
        let mut s = solve_passive(&passive);
        let mut inner = 0;
        while (0..n).any(|j| passive[j] && s[j] <= 0.0) && inner < 3 * n {
            inner += 1;
            let mut alpha = f64::INFINITY;
            for j in 0..n {
                if passive[j] && s[j] <= 0.0 {
                    let d = x[j] - s[j];
                    if d > 0.0 {
                        alpha = alpha.min(x[j] / d);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for j in 0..n {
                x[j] += alpha * (s[j] - x[j]);
                if passive[j] && x[j] <= 0.0 {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
            s = solve_passive(&passive);
        }
        for j in 0..n {
            x[j] = if passive[j] { s[j].max(0.0) } else { 0.0 };
        }
        w = dual(&x);
    }
    if !converged {
        converged = (0..n).all(|j| passive[j] || w[j] <= thresh);
    }
    NnlsSolution {
        x,
        dual: w,
        iterations,
        converged,
    }
}

/// Dual-feasibility tolerance handed to [`nnls`].
pub const NNLS_TOL: f64 = 1e-12;
/// Ridge weight used when the endmembers are numerically dependent.
pub const RIDGE: f64 = 1e-10;

/// Pre-built augmented system for repeated FCLS solves against one
/// endmember matrix.
#[derive(Clone, Debug)]
pub struct Fcls {
    k: usize,
    bands: usize,
    delta: f64,
    /// `(B + 1 [+ K]) × K`: `Eᵀ`, then `δ·1ᵀ`, then ridge rows if needed.
    a: Vec<f64>,
    rows: usize,
    regularized: bool,
    endm: Vec<f64>,
}

impl Fcls {
    /// Sum-to-one weight `δ = scale · max|E|`; the standard choice is 1e3.
    pub fn with_delta_scale(endm: &EndmemberMatrix, scale: f64) -> Result<Self> {
        let (k, b) = (endm.k(), endm.bands());
        if k > b {
            return Err(Error::contract(format!("FCLS needs K <= B, got K={k}, B={b}")));
        }
        let e = endm.data();
        let delta = scale * e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // Eᵀ is B × K
        let mut et = vec![0.0; b * k];
        for i in 0..k {
            for j in 0..b {
                et[j * k + i] = e[i * b + j];
            }
        }
        let svd = jacobi_svd(&et, b, k);
        let smax = svd.s[0];
        let smin = svd.s[k - 1];
        let regularized = !(smin > 1e-10 * smax);
        if regularized {
            log::warn!(
                "endmember matrix is ill-conditioned (singular values {smax:.3e} .. {smin:.3e}); adding ridge {RIDGE:e}"
            );
        }
        let mut a = et;
        a.extend(std::iter::repeat_n(delta, k));
        let mut rows = b + 1;
        if regularized {
            let r = RIDGE.sqrt();
            for i in 0..k {
                a.extend((0..k).map(|j| if i == j { r } else { 0.0 }));
            }
            rows += k;
        }
        Ok(Fcls {
            k,
            bands: b,
            delta,
            a,
            rows,
            regularized,
            endm: e.to_vec(),
        })
    }

    pub fn new(endm: &EndmemberMatrix) -> Result<Self> {
        Self::with_delta_scale(endm, 1e3)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn is_regularized(&self) -> bool {
        self.regularized
    }

    /// Raw NNLS solve of the augmented system, before renormalization.
    pub fn solve_augmented(&self, x: &[f64]) -> Result<NnlsSolution> {
        if x.len() != self.bands {
            return Err(Error::shape(format!(
                "spectrum has {} bands, endmembers have {}",
                x.len(),
                self.bands
            )));
        }
        let mut rhs = x.to_vec();
        rhs.push(self.delta);
        rhs.resize(self.rows, 0.0);
        Ok(nnls(&self.a, self.rows, self.k, &rhs, 10 * self.k, NNLS_TOL))
    }

    pub fn solve(&self, x: &[f64]) -> Result<FclsSolution> {
        let sol = self.solve_augmented(x)?;
        let mut z = sol.x;
        let s: f64 = z.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Degenerate(format!("FCLS produced abundances summing to {s}")));
        }
        for v in z.iter_mut() {
            *v /= s;
        }
        let b = self.bands;
        let mut r2 = 0.0;
        for j in 0..b {
            let mut y = -x[j];
            for i in 0..self.k {
                y += z[i] * self.endm[i * b + j];
            }
            r2 += y * y;
        }
        Ok(FclsSolution {
            abundances: z,
            residual_norm: r2.sqrt(),
            regularized: self.regularized,
        })
    }
}

/// Abundances of one spectrum under ASC/ANC.
pub fn fcls(spectrum: &[f64], endm: &EndmemberMatrix) -> Result<FclsSolution> {
    Fcls::new(endm)?.solve(spectrum)
}

/// FCLS for every pixel of a cube. Pixels are independent, so this runs on
/// the current rayon pool with results in pixel order.
pub fn fcls_cube(cube: &HsiCube, endm: &EndmemberMatrix) -> Result<AbundanceMap> {
    if cube.bands() != endm.bands() {
        return Err(Error::shape(format!(
            "cube has {} bands, endmembers have {}",
            cube.bands(),
            endm.bands()
        )));
    }
    let solver = Fcls::new(endm)?;
    let rows: Vec<Vec<f64>> = (0..cube.n_pixels())
        .into_par_iter()
        .map(|p| solver.solve(cube.pixel(p)).map(|s| s.abundances))
        .collect::<Result<_>>()?;
    AbundanceMap::new(cube.height(), cube.width(), endm.k(), rows.concat())
}

fn top_eigvecs(r: &[f64], b: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    // r is symmetric PSD, so its SVD is an eigendecomposition
    let svd = jacobi_svd(r, b, b);
    let mut u = vec![0.0; b * k];
    for i in 0..b {
        for j in 0..k {
            u[i * k + j] = svd.v[i * b + j];
        }
    }
    (u, svd.s)
}

/// Vertex component analysis over the pixels of a cube.
///
/// Chooses the projective or PCA subspace from an SNR estimate, then picks
/// `K` extreme pixels by repeated projection onto random directions
/// orthogonal to those already chosen. Returns the selected original
/// spectra in selection order, and the pixel indices.
pub fn vca_indices(pixels: &[f64], bands: usize, k: usize, seed: u64) -> Result<(EndmemberMatrix, Vec<usize>)> {
    if k < 2 {
        return Err(Error::contract(format!("VCA needs K >= 2, got {k}")));
    }
    if bands == 0 || pixels.len() % bands != 0 {
        return Err(Error::shape(format!("{} values are not whole {bands}-band pixels", pixels.len())));
    }
    let n = pixels.len() / bands;
    if n < k {
        return Err(Error::contract(format!("VCA needs at least K={k} pixels, got {n}")));
    }
    if k > bands {
        return Err(Error::contract(format!("VCA needs K <= B, got K={k}, B={bands}")));
    }
    let b = bands;
    let nf = n as f64;

    let mut mean = vec![0.0; b];
    for px in pixels.chunks_exact(b) {
        for j in 0..b {
            mean[j] += px[j];
        }
    }
    for v in mean.iter_mut() {
        *v /= nf;
    }
    let centered: Vec<f64> = pixels.chunks_exact(b).flat_map(|px| px.iter().zip(&mean).map(|(v, m)| v - m)).collect();
    let mut cov = vec![0.0; b * b];
    gemm(1.0 / nf, &centered, n, b, Trans::Yes, &centered, n, b, Trans::No, 0.0, &mut cov);
    let (ud, cov_eig) = top_eigvecs(&cov, b, k);

    // SNR estimate from the k-dimensional signal subspace
    let mut xp = vec![0.0; n * k];
    gemm(1.0, &centered, n, b, Trans::No, &ud, b, k, Trans::No, 0.0, &mut xp);
    let p_y = pixels.iter().map(|v| v * v).sum::<f64>() / nf;
    let p_x = xp.iter().map(|v| v * v).sum::<f64>() / nf + dot(&mean, &mean);
    let num = p_x - (k as f64 / b as f64) * p_y;
    let den = p_y - p_x;
    let snr = if den <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (num / den).log10()
    };
    let snr_th = 15.0 + 10.0 * (k as f64).log10();
    log::debug!("vca: estimated SNR {snr:.2} dB (threshold {snr_th:.2})");

    // y: k × n projected data, pixel columns
    let mut y = vec![0.0; k * n];
    if snr < snr_th || snr.is_nan() {
        let d = k - 1;
        if !(cov_eig[d - 1] > 1e-12 * cov_eig[0].max(f64::MIN_POSITIVE)) {
            return Err(Error::Degenerate(format!("data spans fewer than {k} endmember directions")));
        }
        let mut c = 0.0f64;
        for p in 0..n {
            let row = &xp[p * k..p * k + d];
            c = c.max(norm(row));
        }
        for p in 0..n {
            for i in 0..d {
                y[i * n + p] = xp[p * k + i];
            }
            y[d * n + p] = c;
        }
    } else {
        let mut corr = vec![0.0; b * b];
        gemm(1.0 / nf, pixels, n, b, Trans::Yes, pixels, n, b, Trans::No, 0.0, &mut corr);
        let (ud, eig) = top_eigvecs(&corr, b, k);
        if !(eig[k - 1] > 1e-12 * eig[0].max(f64::MIN_POSITIVE)) {
            return Err(Error::Degenerate(format!("data spans fewer than {k} dimensions")));
        }
        let mut xq = vec![0.0; n * k];
        gemm(1.0, pixels, n, b, Trans::No, &ud, b, k, Trans::No, 0.0, &mut xq);
        let mut u = vec![0.0; k];
        for p in 0..n {
            for i in 0..k {
                u[i] += xq[p * k + i] / nf;
            }
        }
        for p in 0..n {
            let row = &xq[p * k..(p + 1) * k];
            let s = dot(&u, row);
            for i in 0..k {
                y[i * n + p] = row[i] / s;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // orthonormal basis of the span of chosen columns, seeded with e_k
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut seed_col = vec![0.0; k];
    seed_col[k - 1] = 1.0;
    push_orthonormal(&mut basis, seed_col);
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let w: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut f = w;
        for q in &basis {
            let c = dot(q, &f);
            for (fi, qi) in f.iter_mut().zip(q) {
                *fi -= c * qi;
            }
        }
        let fnorm = norm(&f);
        if !(fnorm > 0.0) {
            return Err(Error::Degenerate("no direction orthogonal to the chosen endmembers".into()));
        }
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for p in 0..n {
            let mut v = 0.0;
            for i in 0..k {
                v += f[i] * y[i * n + p];
            }
            let v = v.abs();
            if v > best_v {
                best_v = v;
                best = p;
            }
        }
        chosen.push(best);
        let col: Vec<f64> = (0..k).map(|i| y[i * n + best]).collect();
        // the first pick replaces the initial e_k direction
        if chosen.len() == 1 {
            basis.clear();
        }
        push_orthonormal(&mut basis, col);
    }
    let data: Vec<f64> = chosen.iter().flat_map(|&p| pixels[p * b..(p + 1) * b].iter().copied()).collect();
    let em = EndmemberMatrix::new(k, b, data).map_err(|e| Error::Degenerate(format!("selected pixel: {e}")))?;
    Ok((em, chosen))
}

fn push_orthonormal(basis: &mut Vec<Vec<f64>>, mut v: Vec<f64>) {
    for _ in 0..2 {
        for q in basis.iter() {
            let c = dot(q, &v);
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= c * qi;
            }
        }
    }
    let nv = norm(&v);
    if nv > 1e-12 {
        v.iter_mut().for_each(|x| *x /= nv);
        basis.push(v);
    }
}

/// [`vca_indices`] on a cube, returning only the spectra.
pub fn vca(cube: &HsiCube, k: usize, seed: u64) -> Result<EndmemberMatrix> {
    vca_indices(cube.data(), cube.bands(), k, seed).map(|(e, _)| e)
}

/// VCA endmembers followed by per-pixel FCLS.
pub fn vca_fcls_pipeline(cube: &HsiCube, k: usize, seed: u64) -> Result<(EndmemberMatrix, AbundanceMap)> {
    let e = vca(cube, k, seed)?;
    let a = fcls_cube(cube, &e)?;
    Ok((e, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_abundances, generate_endmembers, mix_scene};
    use crate::metrics::{match_endmembers, rmse, sad};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn objective(e: &EndmemberMatrix, z: &[f64], x: &[f64]) -> f64 {
        (0..e.bands())
            .map(|j| {
                let y: f64 = (0..e.k()).map(|i| z[i] * e.row(i)[j]).sum();
                (y - x[j]).powi(2)
            })
            .sum()
    }

    fn mix(e: &EndmemberMatrix, z: &[f64]) -> Vec<f64> {
        (0..e.bands()).map(|j| (0..e.k()).map(|i| z[i] * e.row(i)[j]).sum()).collect()
    }

    fn random_simplex(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| -rng.random_range(1e-9f64..1.0).ln()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    #[test]
    fn fcls_examples() {
        let e = generate_endmembers(4, 30, 1).unwrap();
        for k in 0..4 {
            let z = fcls(e.row(k), &e).unwrap().abundances;
            for (i, v) in z.iter().enumerate() {
                let want = if i == k { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-8);
            }
        }
        let x = mix(&e, &[0.5, 0.5, 0.0, 0.0]);
        let z = fcls(&x, &e).unwrap().abundances;
        for (v, w) in z.iter().zip([0.5, 0.5, 0.0, 0.0]) {
            assert!((v - w).abs() < 1e-8);
        }
    }

    #[test]
    fn fcls_recovers_planted_abundances() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..200 {
            let k = 2 + trial % 6;
            let e = generate_endmembers(k, 40, trial as u64).unwrap();
            let z_star = random_simplex(k, &mut rng);
            let sol = fcls(&mix(&e, &z_star), &e).unwrap();
            for (a, b) in sol.abundances.iter().zip(&z_star) {
                assert!((a - b).abs() < 1e-6, "trial {trial}");
            }
        }
    }

    fn grid_search(e: &EndmemberMatrix, x: &[f64]) -> (Vec<f64>, f64) {
        let mut best = (vec![], f64::INFINITY);
        for i in 0..=100 {
            for j in 0..=(100 - i) {
                let z = [i as f64 / 100.0, j as f64 / 100.0, (100 - i - j) as f64 / 100.0];
                let f = objective(e, &z, x);
                if f < best.1 {
                    best = (z.to_vec(), f);
                }
            }
        }
        best
    }

    #[test]
    fn fcls_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..30 {
            let e = generate_endmembers(3, 25, 100 + trial).unwrap();
            // planted on the grid, plus points outside the simplex hull
            let z_star: Vec<f64> = random_simplex(3, &mut rng).iter().map(|v| (v * 100.0).round() / 100.0).collect();
            let mut z_star = z_star;
            z_star[2] = 1.0 - z_star[0] - z_star[1];
            let mut x = mix(&e, &z_star);
            if trial % 2 == 1 {
                for v in x.iter_mut() {
                    *v += rng.random_range(-0.05..0.05);
                }
            }
            let sol = fcls(&x, &e).unwrap();
            let (zg, fg) = grid_search(&e, &x);
            assert!(objective(&e, &sol.abundances, &x) <= fg + 1e-12);
            if trial % 2 == 0 {
                for (a, b) in sol.abundances.iter().zip(&zg) {
                    assert!((a - b).abs() < 1e-6);
                }
            } else {
                for (a, b) in sol.abundances.iter().zip(&zg) {
                    assert!((a - b).abs() <= 0.01 + 1e-9, "trial {trial}: {:?} vs {zg:?}", sol.abundances);
                }
            }
        }
    }

    #[test]
    fn nnls_kkt_conditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (m, n) = (rng.random_range(3..20), rng.random_range(1..6));
            let a: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sol = nnls(&a, m, n, &b, 10 * n, NNLS_TOL);
            assert!(sol.converged);
            let scale = norm(&a) * norm(&b).max(1.0);
            for j in 0..n {
                assert!(sol.x[j] >= 0.0);
                if sol.x[j] > 0.0 {
                    assert!(sol.dual[j].abs() < 1e-9 * scale);
                } else {
                    assert!(sol.dual[j] < 1e-9 * scale);
                }
            }
        }
    }

    #[test]
    fn fcls_kkt_on_augmented_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let e = generate_endmembers(5, 30, 3).unwrap();
        let solver = Fcls::new(&e).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
            let sol = solver.solve_augmented(&x).unwrap();
            assert!(sol.converged);
            let scale = solver.delta() * solver.delta() * 5f64.sqrt();
            for j in 0..5 {
                if sol.x[j] > 0.0 {
                    assert!(sol.dual[j].abs() <= 1e-9 * scale);
                } else {
                    assert!(sol.dual[j] <= 1e-9 * scale);
                }
            }
        }
    }

    #[test]
    fn dependent_endmembers_are_regularized() {
        let base = generate_endmembers(2, 10, 0).unwrap();
        let mut data = base.data().to_vec();
        data.extend(base.row(0).iter().map(|v| v * 0.5 + 0.0));
        let e = EndmemberMatrix::new(3, 10, data).unwrap();
        let sol = fcls(base.row(1), &e).unwrap();
        assert!(sol.regularized);
        assert!((sol.abundances.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(sol.residual_norm < 1e-6);
        assert!(matches!(fcls(&[1.0], &e), Err(Error::Shape(_))));
        let wide = EndmemberMatrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(fcls(&[1.0, 1.0], &wide), Err(Error::Contract(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn fcls_always_on_simplex_and_beats_vertices(
            seed in 0u64..500,
            noise in prop::collection::vec(-0.5f64..0.5, 20),
            k in 2usize..6,
        ) {
            let e = generate_endmembers(k, 20, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = mix(&e, &random_simplex(k, &mut rng));
            for (v, n) in x.iter_mut().zip(&noise) {
                *v += n;
            }
            let sol = fcls(&x, &e).unwrap();
            prop_assert!(sol.abundances.iter().all(|v| *v >= 0.0));
            prop_assert!((sol.abundances.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let f = objective(&e, &sol.abundances, &x);
            for i in 0..k {
                let mut v = vec![0.0; k];
                v[i] = 1.0;
                prop_assert!(f <= objective(&e, &v, &x) + 1e-9);
            }
        }
    }

    fn planted_scene(k: usize, b: usize, seed: u64) -> (HsiCube, EndmemberMatrix, AbundanceMap) {
        let e = generate_endmembers(k, b, seed).unwrap();
        let a = generate_abundances(20, 20, k, 3.0, seed).unwrap();
        let mut z = a.data().to_vec();
        for i in 0..k {
            let p = 37 * i + 5;
            z[p * k..(p + 1) * k].iter_mut().enumerate().for_each(|(j, v)| *v = if j == i { 1.0 } else { 0.0 });
        }
        let a = AbundanceMap::new(20, 20, k, z).unwrap();
        (mix_scene(&a, &e, f64::INFINITY, 0).unwrap(), e, a)
    }

    #[test]
    fn vca_on_pure_vertices() {
        let e = generate_endmembers(4, 16, 5).unwrap();
        let mut pixels = Vec::new();
        for rep in 0..6 {
            for i in 0..4 {
                pixels.extend_from_slice(e.row((i + rep) % 4));
            }
        }
        let (est, _) = vca_indices(&pixels, 16, 4, 1).unwrap();
        let perm = match_endmembers(&est, &e).unwrap();
        for t in 0..4 {
            assert!(sad(est.row(perm[t]), e.row(t)).unwrap() < 1e-10);
        }
    }

    #[test]
    fn vca_recovers_planted_pure_pixels() {
        for seed in 0..5 {
            let (cube, e, _) = planted_scene(4, 30, seed);
            let est = vca(&cube, 4, seed).unwrap();
            let perm = match_endmembers(&est, &e).unwrap();
            for t in 0..4 {
                assert!(sad(est.row(perm[t]), e.row(t)).unwrap() < 1e-3, "seed {seed}");
            }
            assert_eq!(vca(&cube, 4, seed).unwrap(), est);
        }
    }

    #[test]
    fn vca_selection_ignores_pixel_order() {
        let (cube, _, _) = planted_scene(3, 25, 7);
        let (est, idx) = vca_indices(cube.data(), 25, 3, 4).unwrap();
        let mut order: Vec<usize> = (0..cube.n_pixels()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let shuffled: Vec<f64> = order.iter().flat_map(|&p| cube.pixel(p).iter().copied()).collect();
        let (est2, idx2) = vca_indices(&shuffled, 25, 3, 4).unwrap();
        let mut a: Vec<usize> = idx.clone();
        let mut b: Vec<usize> = idx2.iter().map(|&i| order[i]).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        for k in 0..3 {
            assert!((0..3).any(|j| est.row(k) == est2.row(j)));
        }
    }

    #[test]
    fn vca_rejects_degenerate_data() {
        let px: Vec<f64> = (0..50).flat_map(|_| [0.2, 0.4, 0.6, 0.8]).collect();
        assert!(matches!(vca_indices(&px, 4, 3, 0), Err(Error::Degenerate(_))));
        assert!(matches!(vca_indices(&px[..8], 4, 3, 0), Err(Error::Contract(_))));
        assert!(matches!(vca_indices(&px, 4, 1, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn pipeline_on_noiseless_pure_pixel_scene() {
        let (cube, e, a) = planted_scene(4, 30, 3);
        let (est, map) = vca_fcls_pipeline(&cube, 4, 0).unwrap();
        let perm = match_endmembers(&est, &e).unwrap();
        let z_hat = crate::metrics::permute_columns(map.data(), 4, &perm);
        let r = rmse(a.data(), &z_hat, 4).unwrap();
        assert!(r.average < 1e-4, "{r:?}");
        for p in 0..map.n_pixels() {
            assert!((map.pixel(p).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
