use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{AbundanceMap, EndmemberMatrix, HsiCube, Scene, SceneSpec};
use crate::error::{Error, Result};
use crate::metrics::sad;

const MIN_SEPARATION: f64 = 0.15;
const MAX_ATTEMPTS: usize = 100;

/// Standardized random fields are multiplied by this before the per-pixel
/// softmax; larger values give purer pixels.
pub const LOGIT_SCALE: f64 = 3.0;

// independent ChaCha streams off one scene seed
const STREAM_ENDMEMBERS: u64 = 1;
const STREAM_ABUNDANCES: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn candidate_spectrum(bands: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let c0 = rng.random_range(0.2..0.6);
    let c1 = rng.random_range(-0.4..0.4);
    let c2 = rng.random_range(-0.4..0.4);
    let n_bumps = rng.random_range(2..=4);
    let bumps: Vec<(f64, f64, f64)> = (0..n_bumps)
        .map(|_| {
            let amp = rng.random_range(-0.6..1.0);
            let center = rng.random_range(0.0..1.0);
            let width = rng.random_range(0.03..0.2);
            (amp, center, width)
        })
        .collect();
    let raw: Vec<f64> = (0..bands)
        .map(|j| {
            let t = if bands > 1 { j as f64 / (bands - 1) as f64 } else { 0.0 };
            let base = c0 + c1 * t + c2 * t * t;
            base + bumps
                .iter()
                .map(|&(a, c, w)| a * (-(t - c).powi(2) / (2.0 * w * w)).exp())
                .sum::<f64>()
        })
        .collect();
    let lo = rng.random_range(0.05..0.2);
    let hi = rng.random_range(0.7..1.0);
    let (mn, mx) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if mx - mn < 1e-12 {
        return vec![0.5 * (lo + hi); bands];
    }
    raw.iter().map(|v| lo + (hi - lo) * (v - mn) / (mx - mn)).collect()
}

/// `K` smooth positive spectra with values in `[0.05, 1]` and pairwise SAD
/// of at least 0.15.
///
/// Spectra are drawn one at a time; each gets up to 100 attempts to clear
/// the separation threshold against those already accepted.
pub fn generate_endmembers(k: usize, bands: usize, seed: u64) -> Result<EndmemberMatrix> {
    generate_separated(k, bands, seed, MIN_SEPARATION)
}

pub(crate) fn generate_separated(k: usize, bands: usize, seed: u64, min_sad: f64) -> Result<EndmemberMatrix> {
    if k < 2 {
        return Err(Error::Config(format!("k must be >= 2, got {k}")));
    }
    if bands < k {
        return Err(Error::Config(format!("bands ({bands}) must be >= k ({k})")));
    }
    let mut rng = stream(seed, STREAM_ENDMEMBERS);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    for i in 0..k {
        let mut accepted = None;
        for _ in 0..MAX_ATTEMPTS {
            let cand = candidate_spectrum(bands, &mut rng);
            let ok = rows
                .iter()
                .all(|r| sad(&cand, r).map(|s| s >= min_sad).unwrap_or(false));
            if ok {
                accepted = Some(cand);
                break;
            }
        }
        match accepted {
            Some(r) => rows.push(r),
            None => {
                return Err(Error::Generation(format!(
                    "could not place endmember {i} of {k} at SAD >= {min_sad} from the others \
                     within {MAX_ATTEMPTS} attempts ({bands} bands is too crowded)"
                )))
            }
        }
    }
    EndmemberMatrix::new(k, bands, rows.concat())
}

/// Smooth random abundance map: `K` independent fields made of Gaussian
/// blobs of width `coherence_length`, standardized, scaled by
/// [`LOGIT_SCALE`] and pushed through a per-pixel softmax.
///
/// `coherence_length = 0` gives independent pixels.
pub fn generate_abundances(
    height: usize,
    width: usize,
    k: usize,
    coherence_length: f64,
    seed: u64,
) -> Result<AbundanceMap> {
    if !(coherence_length >= 0.0) || !coherence_length.is_finite() {
        return Err(Error::Config(format!("coherence_length must be finite and >= 0, got {coherence_length}")));
    }
    if height == 0 || width == 0 || k == 0 {
        return Err(Error::Config(format!("abundance dims must be >= 1, got {height}x{width}x{k}")));
    }
    let mut rng = stream(seed, STREAM_ABUNDANCES);
    let n = height * width;
    let mut logits = vec![0.0; n * k];
    for kk in 0..k {
        let mut field = if coherence_length == 0.0 {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        } else {
            blob_field(height, width, coherence_length, &mut rng)
        };
        standardize(&mut field);
        for (p, v) in field.iter().enumerate() {
            logits[p * k + kk] = LOGIT_SCALE * v;
        }
    }
    for row in logits.chunks_exact_mut(k) {
        crate::tensor::softmax_row(row);
    }
    AbundanceMap::new(height, width, k, logits)
}

fn blob_field(height: usize, width: usize, len: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let margin = 2.0 * len;
    let (h, w) = (height as f64, width as f64);
    let area = (h + 2.0 * margin) * (w + 2.0 * margin);
    let n_blobs = ((2.0 * area / (len * len)).ceil() as usize).max(4);
    let radius = 4.0 * len;
    let inv = 1.0 / (2.0 * len * len);
    let mut field = vec![0.0; height * width];
    for _ in 0..n_blobs {
        let cy = rng.random_range(-margin..h + margin);
        let cx = rng.random_range(-margin..w + margin);
        let amp: f64 = rng.sample(StandardNormal);
        let r0 = (cy - radius).floor().max(0.0) as usize;
        let r1 = ((cy + radius).ceil().max(0.0) as usize).min(height);
        let c0 = (cx - radius).floor().max(0.0) as usize;
        let c1 = ((cx + radius).ceil().max(0.0) as usize).min(width);
        for r in r0..r1 {
            let dy = r as f64 - cy;
            for c in c0..c1 {
                let dx = c as f64 - cx;
                field[r * width + c] += amp * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    field
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for x in v.iter_mut() {
        *x = if sd > 0.0 { (*x - mean) / sd } else { 0.0 };
    }
}

/// Linear mixing `x = zᵀE` per pixel, plus i.i.d. Gaussian noise at the
/// requested SNR over the whole cube (none for infinite SNR). Negative
/// values are clamped to zero.
pub fn mix_scene(abund: &AbundanceMap, endm: &EndmemberMatrix, snr_db: f64, seed: u64) -> Result<HsiCube> {
    if abund.k() != endm.k() {
        return Err(Error::shape(format!(
            "abundances have K={} but endmember matrix has K={}",
            abund.k(),
            endm.k()
        )));
    }
    if !(snr_db > 0.0) {
        return Err(Error::Config(format!("snr_db must be > 0 or infinite, got {snr_db}")));
    }
    let (k, b) = (endm.k(), endm.bands());
    let mut data = Vec::with_capacity(abund.n_pixels() * b);
    for p in 0..abund.n_pixels() {
        let z = abund.pixel(p);
        for j in 0..b {
            let mut acc = 0.0;
            for i in 0..k {
                acc += z[i] * endm.data()[i * b + j];
            }
            data.push(acc);
        }
    }
    if snr_db.is_finite() {
        let power = data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64;
        let sd = (power / 10f64.powf(snr_db / 10.0)).sqrt();
        let mut rng = stream(seed, STREAM_NOISE);
        for v in data.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v = (*v + sd * e).max(0.0);
        }
    }
    HsiCube::new(abund.height(), abund.width(), b, data)
}

/// `10·log10(‖clean‖² / ‖noisy − clean‖²)` over all values.
pub fn measured_snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let s: f64 = clean.iter().map(|v| v * v).sum();
    let n: f64 = clean.iter().zip(noisy).map(|(a, b)| (a - b).powi(2)).sum();
    10.0 * (s / n).log10()
}

/// Builds a scene from its spec. `endmembers` must be given for the CSV
/// source (the caller reads the file) and must be `None` otherwise.
pub fn generate_scene(spec: &SceneSpec, endmembers: Option<EndmemberMatrix>) -> Result<Scene> {
    spec.validate()?;
    let endm = match (&spec.endmembers, endmembers) {
        (super::EndmemberSource::Synthetic, None) => generate_endmembers(spec.k, spec.bands, spec.seed)?,
        (super::EndmemberSource::Csv { .. }, Some(e)) => {
            if (e.k(), e.bands()) != (spec.k, spec.bands) {
                return Err(Error::shape(format!(
                    "endmember file is {}x{} but the spec asks for k={} bands={}",
                    e.k(),
                    e.bands(),
                    spec.k,
                    spec.bands
                )));
            }
            e
        }
        (super::EndmemberSource::Synthetic, Some(_)) => {
            return Err(Error::Config("endmembers: supplied matrix with synthetic mode".into()))
        }
        (super::EndmemberSource::Csv { .. }, None) => {
            return Err(Error::Config("endmembers: csv mode needs the matrix to be loaded".into()))
        }
    };
    let abundances = generate_abundances(spec.height, spec.width, spec.k, spec.coherence_length, spec.seed)?;
    let cube = mix_scene(&abundances, &endm, spec.snr_db, spec.seed)?;
    Ok(Scene {
        spec: spec.clone(),
        cube,
        abundances,
        endmembers: endm,
    })
}
