use std::path::{Path, PathBuf};

use anyhow::Context;
use serde_json::json;

use specmix::baselines::vca_fcls_pipeline;
use specmix::data::{
    generate_scene, load_scene, read_endmembers_csv, save_scene, scene_to_bytes, split, write_endmembers_csv, CsvHeader,
    EndmemberSource, Scene, SceneSpec,
};
use specmix::metrics::{abundance_pgm, evaluate_maps, report_csv, RunMetadata};
use specmix::model::{extract_endmembers, load_checkpoint, model_to_bytes, save_checkpoint, unmix_scene, Model};
use specmix::training::{train_scene, TrainConfig};
use specmix::{write_atomic, Error};

use crate::manifest::{short_hash, ManifestBuilder};
use crate::{Command, Method, Subset, SubsetArgs};

pub fn run(cmd: Command, threads: usize) -> anyhow::Result<()> {
    match cmd {
        Command::Generate { spec, out } => generate(&spec, &out, threads),
        Command::Train {
            scene,
            config,
            out,
            trace,
        } => train(&scene, config.as_deref(), &out, trace, threads),
        Command::Eval {
            scene,
            checkpoint,
            out,
            subset,
        } => eval(&scene, &checkpoint, &out, subset, threads),
        Command::Unmix {
            scene,
            checkpoint,
            out_prefix,
        } => unmix(&scene, &checkpoint, &out_prefix, threads),
        Command::Endmembers { checkpoint, out } => endmembers(&checkpoint, &out, threads),
        Command::Baseline {
            scene,
            method,
            out,
            seed,
            subset,
        } => baseline(&scene, method, &out, seed, subset, threads),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(Error::from)
        .with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(Error::from)
        .with_context(|| format!("parsing {what} {}", path.display()))
}

fn load(path: &Path) -> anyhow::Result<Scene> {
    load_scene(path).with_context(|| format!("loading scene {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn check_compatible(model: &Model, scene: &Scene) -> anyhow::Result<()> {
    let c = &model.config;
    let s = &scene.spec;
    if c.bands != scene.cube.bands() || c.k != scene.abundances.k() {
        return Err(Error::Shape(format!(
            "checkpoint expects B={} K={}, scene is {}x{}x{} with K={}",
            c.bands,
            c.k,
            s.height,
            s.width,
            scene.cube.bands(),
            scene.abundances.k()
        ))
        .into());
    }
    Ok(())
}

fn subset_pixels(n: usize, args: SubsetArgs) -> anyhow::Result<Vec<usize>> {
    Ok(match args.subset {
        Subset::All => (0..n).collect(),
        Subset::Test => split(n, args.train_fraction, args.split_seed)?.1,
    })
}

fn subset_json(args: SubsetArgs) -> serde_json::Value {
    json!({
        "subset": args.subset,
        "split_seed": args.split_seed,
        "train_fraction": args.train_fraction,
    })
}

fn generate(spec_path: &Path, out: &Path, threads: usize) -> anyhow::Result<()> {
    let m = ManifestBuilder::start("generate", threads).input("spec", spec_path);
    let spec: SceneSpec = read_json(spec_path, "scene spec")?;
    spec.validate()?;
    let (endm, m) = match &spec.endmembers {
        EndmemberSource::Synthetic => (None, m),
        EndmemberSource::Csv { path } => {
            let full = if path.is_relative() {
                spec_path.parent().unwrap_or(Path::new(".")).join(path)
            } else {
                path.clone()
            };
            let e = read_endmembers_csv(&full, CsvHeader::Auto)
                .with_context(|| format!("reading endmembers {}", full.display()))?;
            (Some(e), m.input("endmembers", &full))
        }
    };
    let scene = generate_scene(&spec, endm)?;
    save_scene(out, &scene).with_context(|| format!("writing {}", out.display()))?;
    m.finish(out, vec![out.to_path_buf()], serde_json::to_value(&spec)?, Some(spec.seed))?;
    Ok(())
}

fn train(scene_path: &Path, config: Option<&Path>, out: &Path, trace: Option<PathBuf>, threads: usize) -> anyhow::Result<()> {
    let mut m = ManifestBuilder::start("train", threads).input("scene", scene_path);
    let cfg: TrainConfig = match config {
        Some(p) => {
            m = m.input("config", p);
            read_json(p, "training config")?
        }
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    let scene = load(scene_path)?;
    let run = train_scene(&scene.cube, Some(&scene.abundances), scene.abundances.k(), &cfg)?;
    let trace_path = trace.unwrap_or_else(|| with_suffix(out, ".loss.csv"));
    save_checkpoint(out, &run.model).with_context(|| format!("writing {}", out.display()))?;
    write_atomic(&trace_path, run.trace.to_csv().as_bytes())?;
    if let (Some(first), Some(last)) = (run.trace.first(), run.trace.last()) {
        log::info!("loss {:.6} -> {:.6}", first.total, last.total);
    }
    m.finish(out, vec![out.to_path_buf(), trace_path], serde_json::to_value(&cfg)?, Some(cfg.seed))?;
    Ok(())
}

fn eval(scene_path: &Path, ckpt: &Path, out: &Path, subset: SubsetArgs, threads: usize) -> anyhow::Result<()> {
    let m = ManifestBuilder::start("eval", threads).input("scene", scene_path).input("checkpoint", ckpt);
    let scene = load(scene_path)?;
    let model = load_model(ckpt)?;
    check_compatible(&model, &scene)?;
    let c = &model.config;
    let map = unmix_scene(&model.encoder, &scene.cube, c.patch_size, c.concentration_scale)?;
    let est = extract_endmembers(&model.decoder)?;
    let pixels = subset_pixels(scene.cube.n_pixels(), subset)?;
    let metadata = RunMetadata {
        seed: None,
        config_hash: Some(short_hash(&model_to_bytes(&model)?)),
        dataset_id: Some(short_hash(&scene_to_bytes(&scene)?)),
    };
    let report = evaluate_maps(&scene.abundances, &map, &pixels, &est, &scene.endmembers, metadata)?;
    write_atomic(out, report_csv(&[report])?.as_bytes())?;
    m.finish(out, vec![out.to_path_buf()], subset_json(subset), None)?;
    Ok(())
}

fn unmix(scene_path: &Path, ckpt: &Path, prefix: &Path, threads: usize) -> anyhow::Result<()> {
    let m = ManifestBuilder::start("unmix", threads).input("scene", scene_path).input("checkpoint", ckpt);
    let scene = load(scene_path)?;
    let model = load_model(ckpt)?;
    if model.config.bands != scene.cube.bands() {
        return Err(Error::Shape(format!(
            "checkpoint expects B={}, scene is {}x{}x{}",
            model.config.bands,
            scene.cube.height(),
            scene.cube.width(),
            scene.cube.bands()
        ))
        .into());
    }
    let c = &model.config;
    let map = unmix_scene(&model.encoder, &scene.cube, c.patch_size, c.concentration_scale)?;
    // render everything before touching the filesystem
    let mut files = Vec::with_capacity(c.k + 1);
    for k in 0..c.k {
        files.push((with_suffix(prefix, &format!("_em{}.pgm", k + 1)), abundance_pgm(&map, k)?));
    }
    let raw: Vec<u8> = map.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    files.push((with_suffix(prefix, "_abundances.f64"), raw));
    for (path, bytes) in &files {
        write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    }
    let config = json!({
        "height": map.height(),
        "width": map.width(),
        "k": map.k(),
        "layout": "little-endian f64, pixel-major (row, col, endmember)",
    });
    m.finish(prefix, files.into_iter().map(|(p, _)| p).collect(), config, None)?;
    Ok(())
}

fn endmembers(ckpt: &Path, out: &Path, threads: usize) -> anyhow::Result<()> {
    let m = ManifestBuilder::start("endmembers", threads).input("checkpoint", ckpt);
    let model = load_model(ckpt)?;
    let est = extract_endmembers(&model.decoder)?;
    write_atomic(out, write_endmembers_csv(&est).as_bytes())?;
    m.finish(out, vec![out.to_path_buf()], json!({}), None)?;
    Ok(())
}

fn baseline(
    scene_path: &Path,
    method: Method,
    out: &Path,
    seed: u64,
    subset: SubsetArgs,
    threads: usize,
) -> anyhow::Result<()> {
    let m = ManifestBuilder::start("baseline", threads).input("scene", scene_path);
    let scene = load(scene_path)?;
    let (est, map) = match method {
        Method::VcaFcls => vca_fcls_pipeline(&scene.cube, scene.endmembers.k(), seed)?,
    };
    let pixels = subset_pixels(scene.cube.n_pixels(), subset)?;
    let metadata = RunMetadata {
        seed: Some(seed),
        config_hash: Some(short_hash(b"vca-fcls")),
        dataset_id: Some(short_hash(&scene_to_bytes(&scene)?)),
    };
    let report = evaluate_maps(&scene.abundances, &map, &pixels, &est, &scene.endmembers, metadata)?;
    write_atomic(out, report_csv(&[report])?.as_bytes())?;
    let mut config = subset_json(subset);
    config["method"] = json!("vca-fcls");
    m.finish(out, vec![out.to_path_buf()], config, Some(seed))?;
    Ok(())
}
