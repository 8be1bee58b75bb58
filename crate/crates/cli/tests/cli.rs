use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use specmix::data::{generate_endmembers, load_scene, mix_scene, save_scene, AbundanceMap, EndmemberSource, Scene, SceneSpec};
use specmix::data::measured_snr_db;
use specmix::model::{load_checkpoint, model_to_bytes, Model};
use specmix::training::TrainConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_specmix"));
    c.env_remove("SPECMIX_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_spec(dir: &Path, name: &str, spec: &serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(spec).unwrap()).unwrap();
    p
}

fn small_spec(seed: u64, coherence: f64) -> serde_json::Value {
    serde_json::json!({
        "height": 8, "width": 8, "bands": 12, "k": 3, "seed": seed,
        "snr_db": 40.0, "coherence_length": coherence
    })
}

fn small_config(epochs: usize) -> serde_json::Value {
    serde_json::json!({
        "epochs": epochs, "batch_size": 16, "patch_size": 3, "hidden_channels": 4,
        "decoder_hidden": 8, "learning_rate": 0.01, "seed": 3
    })
}

fn generated(dir: &Path, name: &str, spec: serde_json::Value) -> PathBuf {
    let sp = write_spec(dir, &format!("{name}.json"), &spec);
    let out = dir.join(format!("{name}.hsis"));
    ok(&["generate", "--spec", s(&sp), "--out", s(&out)]);
    out
}

fn trained(dir: &Path, scene: &Path, epochs: usize) -> PathBuf {
    let cp = write_spec(dir, &format!("cfg{epochs}.json"), &small_config(epochs));
    let out = dir.join(format!("model{epochs}.spmx"));
    ok(&["train", "--scene", s(scene), "--config", s(&cp), "--out", s(&out)]);
    out
}

fn read_report(path: &Path) -> Vec<(String, Vec<f64>)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("endmember,rmse,rmse_std,sad,sad_std"));
    lines
        .map(|l| {
            let mut f = l.split(',');
            let name = f.next().unwrap().to_string();
            (name, f.map(|v| v.parse().unwrap()).collect())
        })
        .collect()
}

#[test]
fn generate_is_reproducible_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = generated(dir.path(), "a", small_spec(4, 2.0));
    let sp = dir.path().join("a.json");
    let b = dir.path().join("b.hsis");
    ok(&["generate", "--spec", s(&sp), "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.hsis.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["config"]["height"], 8);
    assert!(manifest["toolkit_version"].is_string());
    assert!(manifest["duration_secs"].as_f64().unwrap() >= 0.0);

    let scene = load_scene(&a).unwrap();
    assert_eq!((scene.cube.height(), scene.cube.bands(), scene.abundances.k()), (8, 12, 3));
}

#[test]
fn full_size_scene_hits_requested_snr() {
    let dir = tempfile::tempdir().unwrap();
    let spec = serde_json::json!({
        "height": 128, "width": 128, "bands": 224, "k": 9, "seed": 21,
        "snr_db": 20.0, "coherence_length": 8.0
    });
    let out = generated(dir.path(), "big", spec);
    let scene = load_scene(&out).unwrap();
    let clean = mix_scene(&scene.abundances, &scene.endmembers, f64::INFINITY, 0).unwrap();
    let snr = measured_snr_db(clean.data(), scene.cube.data());
    assert!((snr - 20.0).abs() <= 0.2, "measured {snr} dB");
}

#[test]
fn bad_specs_exit_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.hsis");

    let malformed = dir.path().join("bad.json");
    std::fs::write(&malformed, "{\"height\": 8, \"width\": ").unwrap();
    let r = run(&["generate", "--spec", s(&malformed), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());

    let mut spec = small_spec(1, 0.0);
    spec["k"] = 1.into();
    let p = write_spec(dir.path(), "k1.json", &spec);
    let r = run(&["generate", "--spec", s(&p), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains('k'));
    assert!(!out.exists());

    let mut spec = small_spec(1, 0.0);
    spec["snr"] = 3.into();
    let p = write_spec(dir.path(), "typo.json", &spec);
    let r = run(&["generate", "--spec", s(&p), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("snr"));

    let mut spec = small_spec(1, 0.0);
    spec["snr_db"] = (-5.0).into();
    let p = write_spec(dir.path(), "neg.json", &spec);
    let r = run(&["generate", "--spec", s(&p), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("snr_db"));
    assert!(!out.exists());

    assert_eq!(run(&["generate", "--spec"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn csv_endmembers_feed_generation() {
    let dir = tempfile::tempdir().unwrap();
    let e = generate_endmembers(3, 12, 9).unwrap();
    std::fs::write(dir.path().join("em.csv"), specmix::data::write_endmembers_csv(&e)).unwrap();
    let mut spec = small_spec(2, 1.0);
    spec["endmembers"] = serde_json::json!({"mode": "csv", "path": "em.csv"});
    let out = generated(dir.path(), "csv", spec);
    let scene = load_scene(&out).unwrap();
    assert_eq!(scene.endmembers, e);
    assert!(matches!(scene.spec.endmembers, EndmemberSource::Csv { .. }));
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generated(dir.path(), "s", small_spec(5, 2.0));
    let ckpt = trained(dir.path(), &scene, 0);
    let cfg: TrainConfig = serde_json::from_value(small_config(0)).unwrap();
    let init = Model::new(cfg.model_config(3, 12), cfg.seed).unwrap();
    assert_eq!(std::fs::read(&ckpt).unwrap(), model_to_bytes(&init).unwrap());
    let trace = std::fs::read_to_string(dir.path().join("model0.spmx.loss.csv")).unwrap();
    assert_eq!(trace, "epoch,total,recon,kl,abundance_mse\n");
}

#[test]
fn train_eval_unmix_endmembers_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let scene_path = generated(dir.path(), "s", small_spec(6, 2.0));
    let ckpt = trained(dir.path(), &scene_path, 20);

    let trace = std::fs::read_to_string(dir.path().join("model20.spmx.loss.csv")).unwrap();
    let totals: Vec<f64> = trace.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(totals.len(), 20);
    assert!(totals[19] < totals[0]);
    assert!(dir.path().join("model20.spmx.manifest.json").exists());

    let report = dir.path().join("eval.csv");
    ok(&["eval", "--scene", s(&scene_path), "--checkpoint", s(&ckpt), "--out", s(&report)]);
    let rows = read_report(&report);
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[3].0, "average");
    assert!(rows.iter().all(|(_, v)| v.iter().all(|x| x.is_finite())));
    assert_eq!(rows[3].1[1], 0.0);

    let test_report = dir.path().join("eval_test.csv");
    ok(&[
        "eval", "--scene", s(&scene_path), "--checkpoint", s(&ckpt), "--out", s(&test_report),
        "--subset", "test", "--split-seed", "0", "--train-fraction", "0.8",
    ]);
    assert_ne!(std::fs::read(&report).unwrap(), std::fs::read(&test_report).unwrap());

    let prefix = dir.path().join("maps");
    ok(&["unmix", "--scene", s(&scene_path), "--checkpoint", s(&ckpt), "--out-prefix", s(&prefix)]);
    let raw = std::fs::read(dir.path().join("maps_abundances.f64")).unwrap();
    let vals: Vec<f64> = raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(vals.len(), 8 * 8 * 3);
    let map = AbundanceMap::new(8, 8, 3, vals).unwrap();
    for k in 0..3 {
        let pgm = std::fs::read(dir.path().join(format!("maps_em{}.pgm", k + 1))).unwrap();
        let header = b"P5\n8 8\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let px = &pgm[header.len()..];
        for p in [0, 9, 37, 63] {
            assert_eq!(px[p], (255.0 * map.pixel(p)[k]).round() as u8);
        }
    }
    assert!(dir.path().join("maps.manifest.json").exists());

    let em = dir.path().join("em.csv");
    ok(&["endmembers", "--checkpoint", s(&ckpt), "--out", s(&em)]);
    let parsed = specmix::data::read_endmembers_csv(&em, specmix::data::CsvHeader::Auto).unwrap();
    assert_eq!((parsed.k(), parsed.bands()), (3, 12));
    let model = load_checkpoint(&ckpt).unwrap();
    let direct = specmix::model::extract_endmembers(&model.decoder).unwrap();
    assert_eq!(parsed, direct);
}

#[test]
fn outputs_are_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generated(dir.path(), "s", small_spec(7, 2.0));
    let cp = write_spec(dir.path(), "cfg.json", &small_config(3));
    let (a, b) = (dir.path().join("a.spmx"), dir.path().join("b.spmx"));
    ok(&["train", "--scene", s(&scene), "--config", s(&cp), "--out", s(&a)]);
    ok(&["train", "--scene", s(&scene), "--config", s(&cp), "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("a.spmx.loss.csv")).unwrap(),
        std::fs::read(dir.path().join("b.spmx.loss.csv")).unwrap()
    );

    let (ra, rb) = (dir.path().join("ra.csv"), dir.path().join("rb.csv"));
    ok(&["eval", "--scene", s(&scene), "--checkpoint", s(&a), "--out", s(&ra)]);
    let out = bin()
        .env("SPECMIX_THREADS", "2")
        .args(["eval", "--scene", s(&scene), "--checkpoint", s(&a), "--out", s(&rb)])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(&ra).unwrap(), std::fs::read(&rb).unwrap());
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("rb.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["threads"], 2);

    let (ba, bb) = (dir.path().join("ba.csv"), dir.path().join("bb.csv"));
    ok(&["baseline", "--scene", s(&scene), "--out", s(&ba), "--threads", "1"]);
    ok(&["baseline", "--scene", s(&scene), "--out", s(&bb), "--threads", "3"]);
    assert_eq!(std::fs::read(&ba).unwrap(), std::fs::read(&bb).unwrap());
}

#[test]
fn shape_mismatch_exits_2_naming_both_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generated(dir.path(), "s", small_spec(8, 1.0));
    let ckpt = trained(dir.path(), &scene, 0);
    let mut other = small_spec(8, 1.0);
    other["bands"] = 15.into();
    let other = generated(dir.path(), "o", other);
    let out = dir.path().join("r.csv");
    let r = run(&["eval", "--scene", s(&other), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&r.stderr);
    assert!(msg.contains("B=12") && msg.contains("8x8x15"), "{msg}");
    assert!(!out.exists());

    let r = run(&["unmix", "--scene", s(&other), "--checkpoint", s(&ckpt), "--out-prefix", s(&dir.path().join("m"))]);
    assert_eq!(r.status.code(), Some(2));

    let garbage = dir.path().join("garbage.spmx");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let r = run(&["endmembers", "--checkpoint", s(&garbage), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("offset"));
}

#[test]
fn diverging_training_exits_3_without_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generated(dir.path(), "s", small_spec(9, 1.0));
    let mut cfg = small_config(50);
    cfg["learning_rate"] = 1e200.into();
    let cp = write_spec(dir.path(), "cfg.json", &cfg);
    let out = dir.path().join("m.spmx");
    let r = run(&["train", "--scene", s(&scene), "--config", s(&cp), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("non-finite loss at step"));
    assert!(!out.exists());
}

#[test]
fn baseline_recovers_noiseless_pure_pixel_scene() {
    let dir = tempfile::tempdir().unwrap();
    let (k, b, side) = (4, 30, 10);
    let endm = generate_endmembers(k, b, 12).unwrap();
    let mut z = Vec::new();
    let mut state = 0x2545f4914f6cdd1du64;
    for p in 0..side * side {
        if p < k {
            z.extend((0..k).map(|j| if j == p { 1.0 } else { 0.0 }));
        } else {
            let w: Vec<f64> = (0..k)
                .map(|_| {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    (state >> 11) as f64 / (1u64 << 53) as f64 + 0.05
                })
                .collect();
            let t: f64 = w.iter().sum();
            z.extend(w.iter().map(|v| v / t));
        }
    }
    let abundances = AbundanceMap::new(side, side, k, z).unwrap();
    let cube = mix_scene(&abundances, &endm, f64::INFINITY, 0).unwrap();
    let spec = SceneSpec {
        height: side,
        width: side,
        bands: b,
        k,
        seed: 0,
        snr_db: f64::INFINITY,
        coherence_length: 0.0,
        endmembers: EndmemberSource::Synthetic,
    };
    let path = dir.path().join("pure.hsis");
    save_scene(
        &path,
        &Scene {
            spec,
            cube,
            abundances,
            endmembers: endm,
        },
    )
    .unwrap();
    let out = dir.path().join("base.csv");
    ok(&["baseline", "--scene", s(&path), "--method", "vca-fcls", "--out", s(&out)]);
    let rows = read_report(&out);
    assert!(rows[k].1[0] < 1e-4, "rmse {}", rows[k].1[0]);
    assert!(rows[k].1[2] < 1e-6, "sad {}", rows[k].1[2]);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("base.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["method"], "vca-fcls");
}

#[test]
fn transfer_workflow_runs() {
    let dir = tempfile::tempdir().unwrap();
    // same seed: same endmembers, independent abundance layouts
    let source = generated(dir.path(), "iid", small_spec(10, 0.0));
    let target = generated(dir.path(), "coh", small_spec(10, 3.0));
    let a = load_scene(&source).unwrap();
    let b = load_scene(&target).unwrap();
    assert_eq!(a.endmembers, b.endmembers);
    let ckpt = trained(dir.path(), &source, 5);
    let out = dir.path().join("transfer.csv");
    ok(&["eval", "--scene", s(&target), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    assert!(read_report(&out).iter().all(|(_, v)| v.iter().all(|x| x.is_finite())));
}
