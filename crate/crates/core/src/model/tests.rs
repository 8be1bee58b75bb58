use super::*;
use crate::data::extract_patches;
use crate::gradcheck::check_gradients;

fn cfg(k: usize, b: usize, c: usize, p: usize) -> ModelConfig {
    ModelConfig {
        k,
        bands: b,
        hidden_channels: c,
        patch_size: p,
        concentration_scale: 10.0,
        decoder_hidden: 6,
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn perturbed_model(c: ModelConfig, seed: u64) -> Model {
    // non-trivial BN parameters and running statistics
    let mut m = Model::new(c, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for b in std::iter::once(&mut m.encoder.stem).chain(m.encoder.body.iter_mut()) {
        for v in b.gamma.data_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in b.beta.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in b.stats.mean.iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        for v in b.stats.var.iter_mut() {
            *v = rng.random_range(0.5..2.0);
        }
    }
    m
}

// ---- straight-line oracle -------------------------------------------------

fn naive_conv(x: &[f64], n: usize, ci: usize, h: usize, w: usize, kern: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (co, _, ks, _) = (kern.shape()[0], kern.shape()[1], kern.shape()[2], kern.shape()[3]);
    let pad = (ks / 2) as isize;
    let kd = kern.data();
    let mut out = vec![0.0; n * co * h * w];
    for b in 0..n {
        for o in 0..co {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = bias.data()[o];
                    for c in 0..ci {
                        for di in 0..ks {
                            for dj in 0..ks {
                                let (si, sj) = (i as isize + di as isize - pad, j as isize + dj as isize - pad);
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                acc += kd[((o * ci + c) * ks + di) * ks + dj]
                                    * x[((b * ci + c) * h + si as usize) * w + sj as usize];
                            }
                        }
                    }
                    out[((b * co + o) * h + i) * w + j] = acc;
                }
            }
        }
    }
    out
}

fn naive_bn_relu(x: &mut [f64], n: usize, c: usize, hw: usize, blk: &ConvBn) {
    for ch in 0..c {
        let g = blk.gamma.data()[ch];
        let be = blk.beta.data()[ch];
        let m = blk.stats.mean[ch];
        let inv = 1.0 / (blk.stats.var[ch] + RunningStats::EPS).sqrt();
        for b in 0..n {
            for s in 0..hw {
                let v = &mut x[(b * c + ch) * hw + s];
                *v = (g * (*v - m) * inv + be).max(0.0);
            }
        }
    }
}

fn oracle_alpha(m: &Model, batch: &Tensor) -> Vec<f64> {
    let (n, b, p, _) = batch.dims4().unwrap();
    let hw = p * p;
    let c = m.config.hidden_channels;
    let k = m.config.k;
    let enc = &m.encoder;
    let mut h = naive_conv(batch.data(), n, b, p, p, &enc.stem.kernel, &enc.stem.bias);
    naive_bn_relu(&mut h, n, c, hw, &enc.stem);
    for blk in &enc.body {
        h = naive_conv(&h, n, c, p, p, &blk.kernel, &blk.bias);
        naive_bn_relu(&mut h, n, c, hw, blk);
    }
    let f = naive_conv(&h, n, c, p, p, &enc.head_kernel, &enc.head_bias);
    let mut pooled = vec![0.0; n * 2 * hw];
    for bi in 0..n {
        for s in 0..hw {
            let vals: Vec<f64> = (0..k).map(|kk| f[(bi * k + kk) * hw + s]).collect();
            pooled[(bi * 2) * hw + s] = vals.iter().sum::<f64>() / k as f64;
            pooled[(bi * 2 + 1) * hw + s] = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let a = naive_conv(&pooled, n, 2, p, p, &enc.attention_kernel, &enc.attention_bias);
    let mut out = Vec::new();
    for bi in 0..n {
        let z: Vec<f64> = (0..k)
            .map(|kk| {
                (0..hw)
                    .map(|s| {
                        let att = 1.0 / (1.0 + (-a[bi * hw + s]).exp());
                        att * f[(bi * k + kk) * hw + s]
                    })
                    .sum()
            })
            .collect();
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let se: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| (m.config.concentration_scale * v / se).max(1e-6)));
    }
    out
}

#[test]
fn encoder_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (seed, (k, b, c, p)) in [(3, 5, 4, 5), (2, 7, 3, 3), (4, 3, 5, 1), (3, 4, 2, 7)].into_iter().enumerate() {
        let m = perturbed_model(cfg(k, b, c, p), seed as u64);
        let batch = random_tensor(&[3, b, p, p], &mut rng);
        let got = encode(&m.encoder, &batch, 10.0).unwrap();
        let want = oracle_alpha(&m, &batch);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }
}

#[test]
fn zero_network_gives_uniform_concentrations() {
    let mut m = Model::new(cfg(4, 6, 3, 5), 0).unwrap();
    for t in m.encoder.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = random_tensor(&[2, 6, 5, 5], &mut rng);
    let alpha = encode(&m.encoder, &batch, 10.0).unwrap();
    for v in alpha.data() {
        assert!((v - 2.5).abs() < 1e-15);
    }
}

#[test]
fn concentrations_sum_to_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = perturbed_model(cfg(3, 5, 4, 3), 8);
    let batch = random_tensor(&[6, 5, 3, 3], &mut rng);
    for s in [1.0, 10.0, 37.5] {
        let alpha = encode(&m.encoder, &batch, s).unwrap();
        for row in alpha.data().chunks(3) {
            assert!(row.iter().all(|v| *v > 0.0));
            assert!((row.iter().sum::<f64>() - s).abs() < 1e-9);
        }
    }
}

#[test]
fn head_permutation_permutes_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = perturbed_model(cfg(3, 4, 3, 5), 4);
    let batch = random_tensor(&[2, 4, 5, 5], &mut rng);
    let base = encode(&m.encoder, &batch, 10.0).unwrap();
    let perm = [2, 0, 1];
    let mut pm = m.clone();
    let c = 3;
    let hk = m.encoder.head_kernel.data();
    let hb = m.encoder.head_bias.data();
    for (new, &old) in perm.iter().enumerate() {
        pm.encoder.head_kernel.data_mut()[new * c..(new + 1) * c].copy_from_slice(&hk[old * c..(old + 1) * c]);
        pm.encoder.head_bias.data_mut()[new] = hb[old];
    }
    let got = encode(&pm.encoder, &batch, 10.0).unwrap();
    for n in 0..2 {
        for (new, &old) in perm.iter().enumerate() {
            assert!((got.data()[n * 3 + new] - base.data()[n * 3 + old]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_and_features_keep_patch_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = perturbed_model(cfg(3, 4, 3, 7), 1);
    let mut tape = Tape::new();
    let vars = m.encoder.register(&mut tape, false);
    let x = tape.constant(random_tensor(&[2, 4, 7, 7], &mut rng));
    let out = m.encoder.forward(&mut tape, &vars, x, false, 10.0).unwrap();
    assert_eq!(tape.value(out.attention).shape(), &[2, 1, 7, 7]);
    assert_eq!(tape.value(out.features).shape(), &[2, 3, 7, 7]);
    assert!(tape.value(out.attention).data().iter().all(|a| *a > 0.0 && *a < 1.0));
}

#[test]
fn encoder_rejects_wrong_band_count() {
    let m = Model::new(cfg(3, 4, 3, 3), 0).unwrap();
    let batch = Tensor::zeros([1, 5, 3, 3]);
    assert!(matches!(encode(&m.encoder, &batch, 10.0), Err(Error::Shape(_))));
    let batch = Tensor::zeros([1, 4, 4, 4]);
    assert!(matches!(encode(&m.encoder, &batch, 10.0), Err(Error::Shape(_))));
}

#[test]
fn decoder_examples() {
    let mut m = Model::new(cfg(3, 5, 2, 3), 0).unwrap();
    let z = Tensor::new([2, 3], vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0]).unwrap();
    let (mu1, s1) = decode(&m.decoder, &z).unwrap();
    let (mu2, s2) = decode(&m.decoder, &z).unwrap();
    assert_eq!((&mu1, &s1), (&mu2, &s2));
    assert!(s1.data().iter().all(|s| *s >= 1e-4));

    for t in m.decoder.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let (mu, sigma) = decode(&m.decoder, &z).unwrap();
    assert!(mu.data().iter().all(|v| *v == 0.0));
    let want = std::f64::consts::LN_2 + 1e-4;
    assert!(sigma.data().iter().all(|v| (v - want).abs() < 1e-15));

    let bad = Tensor::new([1, 3], vec![1.2, -0.2, 0.0]).unwrap();
    assert!(matches!(decode(&m.decoder, &bad), Err(Error::Contract(_))));
    assert!(matches!(decode(&m.decoder, &Tensor::zeros([1, 4])), Err(Error::Shape(_))));
}

#[test]
fn decoder_gradient_wrt_abundances() {
    let m = Model::new(cfg(4, 6, 2, 3), 11).unwrap();
    let z = Tensor::new([2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.7, 0.1, 0.1, 0.1]).unwrap();
    let report = check_gradients(&[z], 1e-6, None, |tape, v| {
        let vars = m.decoder.register(tape, false);
        let (mu, sigma) = m.decoder.forward(tape, &vars, v[0])?;
        let both = tape.add(mu, sigma)?;
        tape.mean_all(both)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn endmember_extraction_is_one_hot_decoding() {
    let m = Model::new(cfg(3, 7, 2, 3), 2).unwrap();
    let e = extract_endmembers(&m.decoder).unwrap();
    for k in 0..3 {
        let mut z = vec![0.0; 3];
        z[k] = 1.0;
        let (mu, _) = decode(&m.decoder, &Tensor::new([1, 3], z).unwrap()).unwrap();
        assert_eq!(e.row(k), mu.data());
    }
    let one = Model::new(cfg(1, 4, 2, 3), 0).unwrap();
    let e = extract_endmembers(&one.decoder).unwrap();
    let (mu, _) = decode(&one.decoder, &Tensor::new([1, 1], vec![1.0]).unwrap()).unwrap();
    assert_eq!(e.row(0), mu.data());
}

#[test]
fn unmix_scene_examples() {
    let m = perturbed_model(cfg(3, 4, 3, 5), 6);
    let constant = HsiCube::new(6, 7, 4, [0.3, 0.1, 0.7, 0.5].repeat(42)).unwrap();
    let map = unmix_scene(&m.encoder, &constant, 5, 10.0).unwrap();
    for p in 1..map.n_pixels() {
        for k in 0..3 {
            assert!((map.pixel(p)[k] - map.pixel(0)[k]).abs() < 1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cube = HsiCube::new(9, 8, 4, (0..9 * 8 * 4).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let map = unmix_scene(&m.encoder, &cube, 5, 10.0).unwrap();
    for (patch, _, idx) in extract_patches(&cube, 5).unwrap() {
        let batch = Tensor::new([1, 4, 5, 5], patch.data).unwrap();
        let alpha = encode(&m.encoder, &batch, 10.0).unwrap();
        let s: f64 = alpha.data().iter().sum();
        let z: Vec<f64> = alpha.data().iter().map(|a| a / s).collect();
        assert_eq!(map.pixel(idx), z.as_slice());
        assert!((map.pixel(idx).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let wrong = HsiCube::new(2, 2, 5, vec![0.1; 20]).unwrap();
    assert!(matches!(unmix_scene(&m.encoder, &wrong, 5, 10.0), Err(Error::Shape(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = perturbed_model(cfg(3, 5, 4, 5), 9);
    let bytes = model_to_bytes(&m).unwrap();
    let back = model_from_bytes(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(model_to_bytes(&back).unwrap(), bytes);
    assert_eq!(&bytes[..4], b"SPMX");

    for cut in [0, 2, 6, 20, 30, 200, bytes.len() - 3] {
        assert!(matches!(model_from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[1] = b'Q';
    assert!(matches!(model_from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(model_from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
    // header claims a different band count than the stored tensors
    let mut bad = bytes.clone();
    bad[12] = 6;
    assert!(matches!(model_from_bytes(&bad), Err(Error::Format { .. })));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.spmx");
    save_checkpoint(&path, &m).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), m);
}

#[test]
fn config_validation() {
    assert!(Model::new(cfg(3, 4, 2, 4), 0).is_err());
    let mut c = cfg(3, 4, 2, 3);
    c.concentration_scale = 0.0;
    assert!(Model::new(c, 0).is_err());
}
