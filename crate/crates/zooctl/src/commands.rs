use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use izoo_autograd::{Tape, Tensor};
use izoo_core::difaug::{apply_weightspace, augment_query, rand_augment_from, AugmentPool};
use izoo_core::downstream::{train_joint, AugmentOptions, ToyDataset, TrainConfig};
use izoo_core::inr2d::grid_coords_flat;
use izoo_core::inrz::{load_inr2d, save_inr2d, sha256_hex, sidecar_path, InrRecord, Sidecar};
use izoo_core::manifest::{file_crc32, Manifest, ManifestHeader, ManifestItem};
use izoo_core::nerf::fit::render_view;
use izoo_core::nerf::{
    fit_scene, pose_error, random_perturbation, refine_pose, Inr3d, NerfArch, Pose, RefineConfig,
    RenderConfig, SceneFitConfig,
};
use izoo_core::qc::{filter_scenes_with, run_batch, QcPolicy, SceneScore};
use izoo_core::scene::{CameraManifest, SceneSpec, Split, ViewRecord};
use izoo_core::seed::item_seed;
use izoo_core::synth::{bars_image, smooth_image};
use izoo_core::tokenizer::{render_coords, GroupingDump, Strategy, TokenGrouping};
use izoo_core::{fit_image, psnr, Arch, FitConfig, ImageGrid};
use serde::Serialize;
use serde_json::{json, Value};

use crate::exit::invalid;
use crate::lock::DirLock;
use crate::*;

pub fn run(cli: &Cli) -> Result<()> {
    let ts = !cli.no_timestamp;
    match &cli.command {
        Command::Fit(a) => fit(a, ts),
        Command::Qc(a) => qc(a, ts),
        Command::Query(a) => query(a),
        Command::Augment(a) => augment(a),
        Command::TokenizeVis(a) => tokenize_vis(a),
        Command::TrainToy(a) => train_toy(a),
        Command::GenToy(a) => gen_toy(a),
        Command::Fit3d(a) => fit3d(a, ts),
        Command::Render3d(a) => render3d(a),
        Command::RefinePose(a) => refine(a),
        Command::FilterScenes(a) => filter(a),
        Command::Stats(a) => stats(a),
    }
}

/// Worker threads from `ZOOCTL_WORKERS`, else every available core.
fn workers() -> Result<usize> {
    match std::env::var("ZOOCTL_WORKERS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(invalid(format!("ZOOCTL_WORKERS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn now_unix(enabled: bool) -> Option<u64> {
    enabled.then(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs())
    })
}

fn base_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

fn read_bytes(p: &Path) -> Result<Vec<u8>> {
    std::fs::read(p).with_context(|| format!("reading {}", p.display()))
}

fn write_json(p: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T> {
    let bytes = read_bytes(p)?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))
}

fn emit(v: Value) {
    println!("{v}");
}

fn arch(a: &ArchArgs) -> Result<Arch> {
    let mut arch = Arch::preset(&a.preset)?;
    if let Some(d) = a.depth {
        arch.depth = d;
    }
    if let Some(w) = a.width {
        arch.width = w;
    }
    Ok(arch)
}

fn fit(a: &FitArgs, ts: bool) -> Result<()> {
    let bytes = read_bytes(&a.input)?;
    let img = ImageGrid::load_png(&a.input)?;
    let arch = arch(&a.arch)?;
    let _lock = DirLock::for_file(&a.out)?;
    let cfg = FitConfig {
        iterations: a.iters,
        lr0: a.lr,
        lr_min: a.lr_min,
        seed: a.seed,
    };
    let (inr, p) = fit_image(&img, &cfg, arch)?;
    save_inr2d(&inr, &a.out)?;
    let sidecar = Sidecar {
        id: stem(&a.input),
        source_hash: sha256_hex(&bytes),
        psnr: p,
        iterations: a.iters,
        phase: "basic".into(),
        resolution: Some([img.height(), img.width()]),
        created_unix: now_unix(ts),
    };
    sidecar.write(&sidecar_path(&a.out))?;
    emit(json!({ "id": sidecar.id, "psnr": p, "iterations": a.iters, "out": a.out }));
    Ok(())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn qc(a: &QcArgs, ts: bool) -> Result<()> {
    let files = png_files(&a.in_dir)?;
    if files.is_empty() {
        return Err(invalid(format!("no PNG images in {}", a.in_dir.display())));
    }
    let labels: BTreeMap<String, u32> = match &a.labels {
        Some(p) => read_json(p)?,
        None => BTreeMap::new(),
    };
    let mut items = Vec::with_capacity(files.len());
    let mut hashes = Vec::with_capacity(files.len());
    for f in &files {
        let id = stem(f);
        hashes.push(sha256_hex(&read_bytes(f)?));
        items.push((id, ImageGrid::load_png(f)?));
    }
    let (h, w) = (items[0].1.height(), items[0].1.width());
    let arch = arch(&a.arch)?;
    let policy = QcPolicy {
        threshold: a.threshold,
        basic_iters: a.basic_iters,
        extended_multiplier: a.extended_multiplier,
        hard_cap_multiplier: a.hard_cap_multiplier,
        ..QcPolicy::default()
    };
    policy.validate()?;
    let workers = workers()?;
    let _lock = DirLock::acquire(&a.out_dir)?;

    let dataset_id = a.dataset_id.clone().unwrap_or_else(|| stem(&a.in_dir));
    let inputs: Vec<Value> = items
        .iter()
        .zip(&hashes)
        .map(|((id, _), hash)| json!({ "id": id, "sha256": hash }))
        .collect();
    let mut manifest = Manifest::new(ManifestHeader {
        dataset_id,
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        config: json!({
            "command": "qc",
            "arch": { "depth": arch.depth, "width": arch.width, "w0": arch.w0 },
            "policy": policy,
            "seed": a.seed,
            "seed_rule": "run_seed ^ fnv1a64(item_id)",
            "height": h,
            "width": w,
            "inputs": inputs,
        }),
    });
    let results = run_batch(&items, arch, &policy, a.seed, workers);
    for (((id, img), hash), res) in items.iter().zip(&hashes).zip(results) {
        let (inr, record) = res.with_context(|| format!("fitting {id}"))?;
        let rel = format!("{id}.inrz");
        let path = a.out_dir.join(&rel);
        let bytes = InrRecord::from(&inr).to_bytes()?;
        std::fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
        Sidecar {
            id: id.clone(),
            source_hash: hash.clone(),
            psnr: record.psnr,
            iterations: record.iterations,
            phase: record.phase.name().into(),
            resolution: Some([img.height(), img.width()]),
            created_unix: now_unix(ts),
        }
        .write(&sidecar_path(&path))?;
        manifest.items.push(ManifestItem {
            class_id: labels.get(id).copied(),
            record,
            weights: Some(rel),
            crc32: Some(file_crc32(&bytes)),
        });
    }
    let out = a.out_dir.join("manifest.jsonl");
    manifest.write(&out)?;
    let summary = manifest.summary();
    emit(json!({ "manifest": out, "total": summary.total, "passed": summary.passed, "per_phase": summary.per_phase }));
    Ok(())
}

/// Explicit size, else the resolution recorded in the sidecar.
fn resolve_size(inr: &Path, height: Option<usize>, width: Option<usize>) -> Result<(usize, usize)> {
    let side = sidecar_path(inr);
    let recorded = if side.exists() { Sidecar::read(&side)?.resolution } else { None };
    match (height, width, recorded) {
        (Some(h), Some(w), _) => Ok((h, w)),
        (h, w, Some([rh, rw])) => Ok((h.unwrap_or(rh), w.unwrap_or(rw))),
        _ => Err(invalid("pass --height and --width (no resolution in the sidecar)")),
    }
}

fn query(a: &QueryArgs) -> Result<()> {
    let inr = load_inr2d(&a.inr)?;
    let mut report = json!({ "inr": a.inr });
    if let Some(cp) = &a.coords {
        let pts: Vec<[f64; 2]> = read_json(cp)?;
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        let norm = inr.norm();
        let values: Vec<[f64; 3]> = inr
            .query_points(&flat)?
            .chunks_exact(3)
            .map(|v| norm.denormalize([v[0], v[1], v[2]]))
            .collect();
        report["values"] = json!(values);
    }
    if a.out.is_some() || a.reference.is_some() {
        let reference = a.reference.as_deref().map(ImageGrid::load_png).transpose()?;
        let (h, w) = match &reference {
            Some(r) if a.height.is_none() && a.width.is_none() => (r.height(), r.width()),
            _ => resolve_size(&a.inr, a.height, a.width)?,
        };
        let img = inr.render(h, w)?;
        if let Some(r) = &reference {
            report["psnr"] = json!(psnr(&img, r)?);
        }
        if let Some(out) = &a.out {
            let _lock = DirLock::for_file(out)?;
            img.save_png(out)?;
            report["out"] = json!(out);
        }
    }
    emit(report);
    Ok(())
}

fn augment(a: &AugmentArgs) -> Result<()> {
    let inr = load_inr2d(&a.inr)?;
    let (h, w) = resolve_size(&a.inr, a.height, a.width)?;
    let pool = match a.pool {
        PoolArg::All => AugmentPool::default(),
        PoolArg::Affine => AugmentPool::affine_only(),
        PoolArg::Magnitude => AugmentPool::magnitude_only(),
    };
    let spec = rand_augment_from(&pool, a.seed, a.n_ops, a.magnitude)?;
    let mut tape = Tape::<f64>::new();
    let coords = tape.constant(Tensor::from_f64(&[h * w, 2], &grid_coords_flat(h, w)));
    let (out, _mask) = augment_query(&mut tape, &inr, &spec, coords, h, w)?;
    let norm = inr.norm();
    let rgb: Vec<f64> = tape
        .value(out)
        .to_f64_vec()
        .chunks_exact(3)
        .flat_map(|v| norm.denormalize([v[0], v[1], v[2]]))
        .collect();
    let img = ImageGrid::from_clamped(h, w, rgb)?;
    let _lock = DirLock::for_file(&a.out)?;
    img.save_png(&a.out)?;
    if let Some(p) = &a.spec_out {
        write_json(p, &spec)?;
    }
    if let Some(p) = &a.inr_out {
        save_inr2d(&apply_weightspace(&inr, &spec.affine())?, p)?;
    }
    emit(json!({ "out": a.out, "spec": spec }));
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
struct Trajectory {
    strategy: Strategy,
    grid: Vec<usize>,
    patch: usize,
    tokens: usize,
    per_token: usize,
    /// One flat `[tokens][per_token][dim]` list per epoch.
    frames: Vec<Vec<f64>>,
}

fn tokenize_vis(a: &TokenizeVisArgs) -> Result<()> {
    let (coords, n, k, grid) = if let Some(p) = &a.grouping {
        let dump: GroupingDump = read_json(p)?;
        let n = dump.activated.len();
        let k = dump.activated.first().map_or(0, |t| t.len());
        if dump.grid.len() != 2 {
            return Err(invalid("only 2D groupings can be drawn"));
        }
        let flat: Vec<f64> = dump.activated.iter().flatten().flatten().copied().collect();
        (flat, n, k, dump.grid)
    } else if let Some(p) = &a.trajectory {
        let t: Trajectory = read_json(p)?;
        if t.grid.len() != 2 {
            return Err(invalid("only 2D trajectories can be drawn"));
        }
        let i = a.frame.unwrap_or(t.frames.len().saturating_sub(1));
        let frame = t
            .frames
            .get(i)
            .ok_or_else(|| invalid(format!("frame {i} out of range ({} frames)", t.frames.len())))?;
        (frame.clone(), t.tokens, t.per_token, t.grid)
    } else {
        let strategy: Strategy = a.strategy.parse()?;
        let g = TokenGrouping::build(strategy, &[a.size, a.size], a.patch, a.seed)?;
        (g.activated(), g.tokens(), g.per_token(), vec![a.size, a.size])
    };
    let background = match (&a.background, &a.inr) {
        (Some(p), _) => ImageGrid::load_png(p)?,
        (None, Some(p)) => load_inr2d(p)?.render(grid[0], grid[1])?,
        (None, None) => ImageGrid::filled(grid[0], grid[1], [1.0; 3])?,
    };
    let img = render_coords(&coords, n, k, &background, a.scale)?;
    let _lock = DirLock::for_file(&a.out)?;
    img.save_png(&a.out)?;
    emit(json!({ "out": a.out, "tokens": n, "per_token": k }));
    Ok(())
}

fn load_toy_dataset(path: &Path) -> Result<ToyDataset> {
    let m = Manifest::read(path)?;
    let base = base_dir(path);
    m.verify(&base)?;
    let config = m.header.as_ref().map(|h| &h.config);
    let dim = |key: &str| config.and_then(|c| c[key].as_u64()).map(|v| v as usize);
    let (Some(height), Some(width)) = (dim("height"), dim("width")) else {
        return Err(invalid("manifest header does not record the image size"));
    };
    let mut items = Vec::new();
    for it in &m.items {
        let (true, Some(class), Some(rel)) = (it.record.passed, it.class_id, &it.weights) else {
            continue;
        };
        items.push((load_inr2d(&base.join(rel))?, class as usize));
    }
    if items.is_empty() {
        return Err(invalid("manifest has no passed items with class ids"));
    }
    let classes = items.iter().map(|(_, c)| c + 1).max().unwrap_or(0);
    Ok(ToyDataset {
        height,
        width,
        classes,
        items,
    })
}

fn train_toy(a: &TrainToyArgs) -> Result<()> {
    let data = load_toy_dataset(&a.manifest)?;
    let cfg = TrainConfig {
        strategy: a.strategy.parse()?,
        patch: a.patch,
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        lr_min: a.lr_min,
        w_reg: a.w_reg,
        alpha: a.alpha,
        embed: a.embed,
        val_fraction: a.val_fraction,
        augment: (a.aug_ops > 0).then_some(AugmentOptions {
            n_ops: a.aug_ops,
            magnitude: a.aug_magnitude,
        }),
        trajectory: a.trajectory,
        seed: a.seed,
    };
    let _lock = DirLock::acquire(&a.out_dir)?;
    let state = train_joint(&data, &cfg)?;
    let metrics = json!({
        "config": cfg,
        "items": data.len(),
        "classes": data.classes,
        "epochs": state.metrics,
        "val_accuracy": state.val_accuracy,
        "violating_pairs": state.final_violating_pairs(),
    });
    write_json(&a.out_dir.join("metrics.json"), &metrics)?;
    write_json(&a.out_dir.join("grouping.json"), &GroupingDump::from(&state.grouping))?;
    if a.trajectory {
        let g = &state.grouping;
        let t = Trajectory {
            strategy: g.strategy(),
            grid: g.grid().to_vec(),
            patch: g.patch(),
            tokens: g.tokens(),
            per_token: g.per_token(),
            frames: state.trajectory.clone(),
        };
        write_json(&a.out_dir.join("trajectory.json"), &t)?;
    }
    emit(json!({
        "out_dir": a.out_dir,
        "val_accuracy": state.val_accuracy,
        "violating_pairs": state.final_violating_pairs(),
    }));
    Ok(())
}

fn gen_toy(a: &GenToyArgs) -> Result<()> {
    if a.n == 0 {
        return Err(invalid("--n must be at least 1"));
    }
    let _lock = DirLock::acquire(&a.out_dir)?;
    let mut written = Vec::new();
    match a.kind {
        ToyKind::Bars => {
            if a.classes == 0 {
                return Err(invalid("--classes must be at least 1"));
            }
            let mut labels = BTreeMap::new();
            for i in 0..a.n {
                let (c, k) = (i % a.classes, i / a.classes);
                let id = format!("bars-{c}-{k}");
                let img = bars_image(a.size, a.size, c, a.classes, item_seed(a.seed, &id))?;
                img.save_png(&a.out_dir.join(format!("{id}.png")))?;
                labels.insert(id.clone(), c as u32);
                written.push(id);
            }
            write_json(&a.out_dir.join("labels.json"), &labels)?;
        }
        ToyKind::Gradients => {
            for i in 0..a.n {
                let id = format!("grad-{i:04}");
                let img = smooth_image(a.size, a.size, item_seed(a.seed, &id))?;
                img.save_png(&a.out_dir.join(format!("{id}.png")))?;
                written.push(id);
            }
        }
        ToyKind::Boxes3d => {
            let mut scene = SceneSpec::desk_boxes();
            scene.ring.count = a.n;
            if a.empty {
                scene = SceneSpec::empty(scene.ring);
            }
            let (train, test) = scene.views(a.held_out)?;
            let mut views = Vec::new();
            for (split, set, prefix) in [(Split::Train, &train, "train"), (Split::Test, &test, "test")] {
                for (i, v) in set.iter().enumerate() {
                    let name = format!("{prefix}_{i:02}.png");
                    v.image.save_png(&a.out_dir.join(&name))?;
                    views.push(ViewRecord {
                        image: name.clone(),
                        pose: v.pose.to_matrix().to_vec(),
                        split,
                    });
                    written.push(name);
                }
            }
            write_json(&a.out_dir.join("scene.json"), &scene)?;
            CameraManifest {
                camera: scene.ring.camera(),
                near: scene.near,
                far: scene.far,
                views,
            }
            .write(&a.out_dir.join("cameras.json"))?;
        }
    }
    emit(json!({ "out_dir": a.out_dir, "items": written }));
    Ok(())
}

fn render_cfg(cm: &CameraManifest, samples: usize) -> RenderConfig {
    RenderConfig {
        near: cm.near,
        far: cm.far,
        samples,
    }
}

fn load_inr3d(path: &Path) -> Result<Inr3d> {
    Ok(Inr3d::try_from(InrRecord::read(path)?)?)
}

fn pose_of(v: &ViewRecord) -> Result<Pose> {
    let m: [f64; 16] = v
        .pose
        .as_slice()
        .try_into()
        .map_err(|_| invalid(format!("pose for {} must have 16 entries", v.image)))?;
    Ok(Pose::from_matrix(&m)?)
}

fn fit3d(a: &Fit3dArgs, ts: bool) -> Result<()> {
    let bytes = read_bytes(&a.cameras)?;
    let cm = CameraManifest::read(&a.cameras)?;
    let (train, test) = cm.load_views(&base_dir(&a.cameras))?;
    let cfg = SceneFitConfig {
        steps: a.steps,
        lr: a.lr,
        lr_min: a.lr,
        rays_per_batch: a.rays,
        arch: NerfArch {
            depth: a.depth,
            width: a.width,
            levels: a.levels,
        },
        render: render_cfg(&cm, a.samples),
        seed: a.seed,
        ..SceneFitConfig::default()
    };
    let _lock = DirLock::for_file(&a.out)?;
    let fit = fit_scene(cm.camera, &train, &test, &cfg)?;
    InrRecord::from(&fit.inr).write(&a.out)?;
    Sidecar {
        id: stem(&a.out),
        source_hash: sha256_hex(&bytes),
        psnr: fit.psnr,
        iterations: a.steps,
        phase: "scene".into(),
        resolution: Some([cm.camera.height, cm.camera.width]),
        created_unix: now_unix(ts),
    }
    .write(&sidecar_path(&a.out))?;
    emit(json!({ "out": a.out, "psnr": fit.psnr, "view_psnr": fit.view_psnr, "final_loss": fit.final_loss }));
    Ok(())
}

fn render3d(a: &Render3dArgs) -> Result<()> {
    let inr = load_inr3d(&a.inr)?;
    let cm = CameraManifest::read(&a.cameras)?;
    let base = base_dir(&a.cameras);
    let cfg = render_cfg(&cm, a.samples);
    let _lock = DirLock::acquire(&a.out_dir)?;
    let mut views = Vec::new();
    for v in &cm.views {
        let keep = match a.split {
            SplitArg::All => true,
            SplitArg::Train => v.split == Split::Train,
            SplitArg::Test => v.split == Split::Test,
        };
        if !keep {
            continue;
        }
        let img = render_view(&inr, &cm.camera, &pose_of(v)?, &cfg)?;
        let gt = ImageGrid::load_png(&base.join(&v.image))?;
        let name = format!("render_{}", v.image);
        img.save_png(&a.out_dir.join(&name))?;
        views.push(json!({ "image": name, "psnr": psnr(&img, &gt)? }));
    }
    emit(json!({ "out_dir": a.out_dir, "views": views }));
    Ok(())
}

fn refine(a: &RefinePoseArgs) -> Result<()> {
    let inr = load_inr3d(&a.inr)?;
    let cm = CameraManifest::read(&a.cameras)?;
    let v = cm
        .views
        .get(a.view)
        .ok_or_else(|| invalid(format!("view {} out of range ({} views)", a.view, cm.views.len())))?;
    let target = ImageGrid::load_png(&base_dir(&a.cameras).join(&v.image))?;
    let gt = pose_of(v)?;
    let (omega, shift) = random_perturbation(a.seed, a.rot_deg, a.trans);
    let init = gt.perturbed(omega, shift);
    let cfg = RefineConfig {
        steps: a.steps,
        rays: a.rays,
        render: render_cfg(&cm, RenderConfig::default().samples),
        seed: a.seed,
        ..RefineConfig::default()
    };
    let _lock = DirLock::for_file(&a.out)?;
    let res = refine_pose(&inr, &cm.camera, &target, &init, &cfg)?;
    let (e0, e1) = (pose_error(&init, &gt), pose_error(&res.pose, &gt));
    let report = json!({
        "view": a.view,
        "initial": e0,
        "refined": e1,
        "pose": res.pose.to_matrix().to_vec(),
        "initial_loss": res.initial_loss,
        "loss": res.loss,
        "steps_run": res.steps_run,
        "best_step": res.best_step,
        "diverged": res.diverged,
    });
    write_json(&a.out, &report)?;
    emit(report);
    Ok(())
}

fn filter(a: &FilterScenesArgs) -> Result<()> {
    let scores: Vec<SceneScore> = read_json(&a.scores)?;
    let kept = filter_scenes_with(&scores, a.min_psnr, a.min_per_class);
    let dropped: Vec<&str> = scores
        .iter()
        .map(|s| s.scene_id.as_str())
        .filter(|id| !kept.iter().any(|k| k == id))
        .collect();
    let report = json!({ "kept": kept, "dropped": dropped });
    let _lock = DirLock::for_file(&a.out)?;
    write_json(&a.out, &report)?;
    emit(report);
    Ok(())
}

fn stats(a: &StatsArgs) -> Result<()> {
    let m = Manifest::read(&a.manifest)?;
    if a.verify {
        m.verify(&base_dir(&a.manifest))?;
    }
    emit(json!({
        "dataset_id": m.header.as_ref().map(|h| h.dataset_id.clone()),
        "summary": m.summary(),
    }));
    Ok(())
}
