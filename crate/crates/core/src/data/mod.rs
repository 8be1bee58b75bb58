//! Scenes: reflectance cubes, abundance maps, endmember matrices, the
//! synthetic generator and the on-disk container.

mod generate;
mod io;
mod patches;

pub use generate::{generate_abundances, generate_endmembers, generate_scene, mix_scene, measured_snr_db, LOGIT_SCALE};
pub use io::{
    load_scene, parse_endmembers_csv, read_endmembers_csv, save_scene, scene_to_bytes, scene_from_bytes,
    write_endmembers_csv, CsvHeader,
};
pub use patches::{extract_patches, fill_patch, patch_batch, reflect_index, Patch};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `H × W × B` reflectance volume, pixel-major: value `(r, c, b)` lives at
/// `(r * W + c) * B + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::contract(format!("cube dims must be >= 1, got {height}x{width}x{bands}")));
        }
        if data.len() != height * width * bands {
            return Err(Error::shape(format!(
                "cube {height}x{width}x{bands} needs {} values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("cube value {i} is not finite")));
        }
        Ok(HsiCube { height, width, bands, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn bands(&self) -> usize {
        self.bands
    }
    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.bands..(idx + 1) * self.bands]
    }

    pub fn pixel_at(&self, row: usize, col: usize) -> &[f64] {
        self.pixel(row * self.width + col)
    }
}

/// Tolerance on the per-pixel sum of an abundance vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// `H × W × K` abundances; every pixel lies on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct AbundanceMap {
    height: usize,
    width: usize,
    k: usize,
    data: Vec<f64>,
}

impl AbundanceMap {
    pub fn new(height: usize, width: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || k == 0 {
            return Err(Error::contract(format!("abundance dims must be >= 1, got {height}x{width}x{k}")));
        }
        if data.len() != height * width * k {
            return Err(Error::shape(format!(
                "abundance map {height}x{width}x{k} needs {} values, got {}",
                height * width * k,
                data.len()
            )));
        }
        for (p, row) in data.chunks_exact(k).enumerate() {
            if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::Domain(format!("pixel {p} has a negative or non-finite abundance")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Domain(format!("pixel {p} abundances sum to {s}")));
            }
        }
        Ok(AbundanceMap { height, width, k, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.k..(idx + 1) * self.k]
    }

    /// Abundance of endmember `k` at every pixel, row-major.
    pub fn channel(&self, k: usize) -> Vec<f64> {
        self.data.chunks_exact(self.k).map(|row| row[k]).collect()
    }

    /// Rows for the given pixel indices, `n × K` row-major.
    pub fn rows(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().flat_map(|&i| self.pixel(i).iter().copied()).collect()
    }
}

/// `K × B` spectra, row-major.
///
/// Rows must be finite and non-zero. Generated and imported matrices are
/// nonnegative; decoder estimates need not be, so that is not enforced here.
#[derive(Clone, Debug, PartialEq)]
pub struct EndmemberMatrix {
    k: usize,
    bands: usize,
    data: Vec<f64>,
}

impl EndmemberMatrix {
    pub fn new(k: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 || bands == 0 {
            return Err(Error::contract(format!("endmember matrix must be at least 1x1, got {k}x{bands}")));
        }
        if data.len() != k * bands {
            return Err(Error::shape(format!("{k}x{bands} endmembers need {} values, got {}", k * bands, data.len())));
        }
        for (i, row) in data.chunks_exact(bands).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("endmember {i} has non-finite entries")));
            }
            if row.iter().all(|v| *v == 0.0) {
                return Err(Error::Domain(format!("endmember {i} is the zero vector")));
            }
        }
        Ok(EndmemberMatrix { k, bands, data })
    }

    pub fn k(&self) -> usize {
        self.k
    }
    pub fn bands(&self) -> usize {
        self.bands
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.bands..(k + 1) * self.bands]
    }

    /// Rows reordered so that output row `i` is input row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.k {
            return Err(Error::shape(format!("permutation of length {} for {} rows", perm.len(), self.k)));
        }
        let data = perm.iter().flat_map(|&p| self.row(p).iter().copied()).collect();
        EndmemberMatrix::new(self.k, self.bands, data)
    }
}

/// Where a scene's endmember spectra come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum EndmemberSource {
    /// Gaussian-bump spectra drawn from the scene seed.
    #[default]
    Synthetic,
    /// Rows of a CSV file (one endmember per row).
    Csv { path: std::path::PathBuf },
}

/// Parameters of a synthetic scene. `snr_db` is either a positive number or
/// infinite (serialized as `"inf"`), meaning no noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub k: usize,
    pub seed: u64,
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    pub coherence_length: f64,
    #[serde(default)]
    pub endmembers: EndmemberSource,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if self.height == 0 {
            return bad("height", "must be >= 1".into());
        }
        if self.width == 0 {
            return bad("width", "must be >= 1".into());
        }
        if self.k < 2 {
            return bad("k", format!("must be >= 2, got {}", self.k));
        }
        if self.bands < self.k {
            return bad("bands", format!("must be >= k ({}), got {}", self.k, self.bands));
        }
        if !(self.snr_db > 0.0) || self.snr_db == f64::NEG_INFINITY {
            return bad("snr_db", format!("must be > 0 or \"inf\", got {}", self.snr_db));
        }
        if !(self.coherence_length >= 0.0) || !self.coherence_length.is_finite() {
            return bad("coherence_length", format!("must be finite and >= 0, got {}", self.coherence_length));
        }
        Ok(())
    }
}

mod snr_serde {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};
    use std::fmt;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = f64;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive number or \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
                Ok(v)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
                match v.to_ascii_lowercase().as_str() {
                    "inf" | "infinity" => Ok(f64::INFINITY),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// A generated or loaded scene with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub cube: HsiCube,
    pub abundances: AbundanceMap,
    pub endmembers: EndmemberMatrix,
}

impl Scene {
    /// Checks that the parts agree with each other and with the spec.
    pub fn check(&self) -> Result<()> {
        let s = &self.spec;
        let c = &self.cube;
        let a = &self.abundances;
        let e = &self.endmembers;
        if (c.height, c.width, c.bands) != (s.height, s.width, s.bands)
            || (a.height, a.width, a.k) != (s.height, s.width, s.k)
            || (e.k, e.bands) != (s.k, s.bands)
        {
            return Err(Error::shape(format!(
                "scene parts disagree: spec {}x{}x{} K={}, cube {}x{}x{}, abundances {}x{}x{}, endmembers {}x{}",
                s.height, s.width, s.bands, s.k, c.height, c.width, c.bands, a.height, a.width, a.k, e.k, e.bands
            )));
        }
        Ok(())
    }
}

/// Shuffles `0..n` with `seed` and splits it into `round(fraction · n)`
/// training indices and the rest. Both halves are returned sorted.
pub fn split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must be in (0, 1), got {fraction}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = (fraction * n as f64).round() as usize;
    let mut test = idx.split_off(n_train);
    idx.sort_unstable();
    test.sort_unstable();
    Ok((idx, test))
}
