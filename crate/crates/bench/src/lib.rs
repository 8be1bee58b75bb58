//! Fixtures shared by the benchmarks in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specmix::data::{generate_scene, EndmemberSource, Scene, SceneSpec};
use specmix::Tensor;

pub fn scene(height: usize, width: usize, bands: usize, k: usize, snr_db: f64) -> Scene {
    let spec = SceneSpec {
        height,
        width,
        bands,
        k,
        seed: 1,
        snr_db,
        coherence_length: 6.0,
        endmembers: EndmemberSource::Synthetic,
    };
    generate_scene(&spec, None).expect("bench scene")
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}
