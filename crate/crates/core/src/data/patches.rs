use super::HsiCube;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `P × P` neighbourhood of one pixel, channel-first: value `(b, i, j)` is
/// at `(b * P + i) * P + j`. The center pixel is at `((P-1)/2, (P-1)/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub bands: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn at(&self, b: usize, i: usize, j: usize) -> f64 {
        self.data[(b * self.size + i) * self.size + j]
    }
}

/// Mirror index into `0..n` without repeating the edge (`-1 → 1`,
/// `n → n-2`), folding repeatedly for offsets wider than the axis.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

fn check_size(p: usize) -> Result<()> {
    if p % 2 == 0 {
        return Err(Error::Config(format!("patch size must be odd, got {p}")));
    }
    Ok(())
}

/// Writes the reflect-padded patch around `pixel` into `out` (`B·P·P`).
pub fn fill_patch(cube: &HsiCube, p: usize, pixel: usize, out: &mut [f64]) {
    let (h, w, b) = (cube.height(), cube.width(), cube.bands());
    debug_assert_eq!(out.len(), b * p * p);
    let half = (p / 2) as isize;
    let (r0, c0) = ((pixel / w) as isize, (pixel % w) as isize);
    for i in 0..p {
        let r = reflect_index(r0 + i as isize - half, h);
        for j in 0..p {
            let c = reflect_index(c0 + j as isize - half, w);
            let src = cube.pixel(r * w + c);
            for (bb, v) in src.iter().enumerate() {
                out[(bb * p + i) * p + j] = *v;
            }
        }
    }
}

/// `[N, B, P, P]` batch of patches for the given pixels.
pub fn patch_batch(cube: &HsiCube, p: usize, pixels: &[usize]) -> Result<Tensor> {
    check_size(p)?;
    let per = cube.bands() * p * p;
    let mut data = vec![0.0; pixels.len() * per];
    for (n, &px) in pixels.iter().enumerate() {
        if px >= cube.n_pixels() {
            return Err(Error::contract(format!("pixel {px} outside a {}-pixel cube", cube.n_pixels())));
        }
        fill_patch(cube, p, px, &mut data[n * per..(n + 1) * per]);
    }
    Tensor::new([pixels.len(), cube.bands(), p, p], data)
}

/// One `(patch, center spectrum, pixel index)` per pixel, row-major.
pub fn extract_patches(cube: &HsiCube, p: usize) -> Result<impl Iterator<Item = (Patch, Vec<f64>, usize)> + '_> {
    check_size(p)?;
    Ok((0..cube.n_pixels()).map(move |px| {
        let mut data = vec![0.0; cube.bands() * p * p];
        fill_patch(cube, p, px, &mut data);
        let patch = Patch {
            size: p,
            bands: cube.bands(),
            data,
        };
        (patch, cube.pixel(px).to_vec(), px)
    }))
}
