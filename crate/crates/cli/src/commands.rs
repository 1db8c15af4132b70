use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use splatfield_core::backproject::{backproject_timed, prune_cloud, BackprojectionConfig};
use splatfield_core::identity::{
    classify_pixels, encode_scene, grouping_miou, orthogonal_codes, train_contrastive, IdentityCodebook, LabeledView,
    TrainConfig,
};
use splatfield_core::query::{
    delete, extract, knn_transfer, segment_2d, segment_3d, similarity_map, AffordanceSource, KnnOptions, QuerySpec,
};
use splatfield_core::raster::{render, render_features, RenderOptions};
use splatfield_core::scene_io::{
    encode_rgb_png, load_feature_map, load_feature_store, load_label_image, load_prompt_bank, save_feature_store,
    save_gray_png, save_label_image, save_mask, save_ply,
};
use splatfield_core::{FeatureStore, LabelImage, PromptBank, SceneBundle};
use splatfield_service::{RenderMode, ServiceConfig, Session};

use super::{
    BackprojectArgs, ClassifyArgs, CodebookArgs, Command, EncodeArgs, EvalArgs, IdentityCommand, QueryArgs,
    RasterArgs, RenderArgs, SceneArgs, SegmentArgs, ServeArgs, TransferArgs,
};

const SCHEMA: u32 = 1;
const HISTOGRAM_BINS: usize = 32;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Backproject(a) => cmd_backproject(a),
        Command::Render(a) => cmd_render(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Identity(IdentityCommand::Codebook(a)) => cmd_codebook(a),
        Command::Identity(IdentityCommand::Encode(a)) => cmd_encode(a),
        Command::Identity(IdentityCommand::Classify(a)) => cmd_classify(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

/// Prints the one-line machine-readable summary.
fn summary(command: &str, mut fields: Value) {
    let obj = fields.as_object_mut().expect("summary is an object");
    obj.insert("schema".into(), json!(SCHEMA));
    obj.insert("command".into(), json!(command));
    println!("{fields}");
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(dir: &Path) -> Result<&Path> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_scene(a: &SceneArgs) -> Result<SceneBundle> {
    let scene = SceneBundle::load(&a.scene, &a.cameras, a.background)?;
    eprintln!(
        "scene: {} Gaussians, {} views",
        scene.cloud.len(),
        scene.view_count()
    );
    Ok(scene)
}

fn raster_options(a: &RasterArgs) -> RenderOptions {
    RenderOptions {
        early_stop: a.early_stop,
        ..Default::default()
    }
}

fn view_list(requested: &[usize], scene: &SceneBundle) -> Result<Vec<usize>> {
    if requested.is_empty() {
        return Ok((0..scene.view_count()).collect());
    }
    for &v in requested {
        scene.camera(v)?;
    }
    Ok(requested.to_vec())
}

fn lookup(bank: &PromptBank, name: &str) -> Result<Vec<f32>> {
    match bank.get(name) {
        Some(v) => Ok(v.to_vec()),
        None => bail!(
            "unknown prompt '{name}'; available: {}",
            if bank.is_empty() { "(none)".to_string() } else { bank.names().join(", ") }
        ),
    }
}

fn query_spec(q: &QueryArgs, dim: usize) -> Result<QuerySpec> {
    let Some(positive) = &q.positive else {
        bail!("--positive is required");
    };
    let Some(prompts) = &q.prompts else {
        bail!("--prompts is required to resolve prompt names");
    };
    let bank = load_prompt_bank(prompts)?;
    let spec = QuerySpec {
        positive: lookup(&bank, positive)?,
        negatives: q.negatives.iter().map(|n| lookup(&bank, n)).collect::<Result<_>>()?,
        theta: q.theta,
        require_argmax: q.argmax,
    };
    spec.validate(dim)?;
    Ok(spec)
}

fn feature_path(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("feat_{view:05}.ftn1"))
}

fn cmd_backproject(a: BackprojectArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    for v in 0..scene.view_count() {
        let p = feature_path(&a.features, v);
        if !p.is_file() {
            bail!("missing feature map for view {v} ({})", p.display());
        }
    }
    let config = BackprojectionConfig {
        mode: a.mode,
        normalize: a.normalize,
        prune_epsilon: a.prune_epsilon,
        render: raster_options(&a.raster),
    };
    let views = scene.view_count();
    let (store, report) = backproject_timed(
        &scene,
        |v| {
            eprintln!("view {}/{views}", v + 1);
            load_feature_map(&feature_path(&a.features, v))
        },
        &config,
    )?;
    let out = out_dir(&a.out)?;
    let store_path = out.join("store.fst");
    save_feature_store(&store, &store_path)?;
    let mut files = vec![store_path.display().to_string()];
    if a.prune_cloud {
        let (cloud, _, _) = prune_cloud(&scene.cloud, &store)?;
        let p = out.join("pruned.ply");
        save_ply(&cloud, &p)?;
        files.push(p.display().to_string());
    }
    let report_doc = json!({
        "schema": SCHEMA,
        "gaussians": report.gaussians,
        "pruned": report.pruned,
        "views": report.views,
        "featureDim": report.dim,
        "mode": a.mode,
        "normalize": a.normalize,
    });
    write_json(&out.join("backproject.json"), &report_doc)?;
    eprintln!(
        "{} of {} Gaussians pruned; D={}; {:.2}s",
        report.pruned, report.gaussians, report.dim, report.seconds
    );
    summary(
        "backproject",
        json!({
            "gaussians": report.gaussians,
            "pruned": report.pruned,
            "views": report.views,
            "featureDim": report.dim,
            "seconds": report.seconds,
            "files": files,
        }),
    );
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let views = view_list(&a.views, &scene)?;
    let out = out_dir(&a.out)?;
    let name = format!("{:?}", a.what).to_lowercase();
    let mut files = Vec::new();
    if a.what == RenderMode::Color {
        let opts = RenderOptions::default();
        for &v in &views {
            let r = render(&scene, v, &opts)?;
            let p = out.join(format!("{name}_{v:05}.png"));
            std::fs::write(&p, encode_rgb_png(r.width, r.height, &r.color)?)
                .with_context(|| format!("writing {}", p.display()))?;
            files.push(p.display().to_string());
        }
    } else {
        let Some(store) = &a.store else {
            bail!("--store is required for {name} renders");
        };
        let store = load_feature_store(store, Some(scene.cloud.len()))?;
        let spec = query_spec(&a.query, store.dim())?;
        let result = segment_3d(&store, &spec)?;
        eprintln!("{} Gaussians selected", result.member_count());
        let session = Session::new(scene, store, PromptBank::new(spec.dim(), Vec::new())?, spec.theta);
        for &v in &views {
            let png = session.render_png(&result, v, a.what)?;
            let p = out.join(format!("{name}_{v:05}.png"));
            std::fs::write(&p, png).with_context(|| format!("writing {}", p.display()))?;
            files.push(p.display().to_string());
        }
    }
    eprintln!("wrote {} images to {}", files.len(), out.display());
    summary("render", json!({ "mode": name, "views": views, "files": files }));
    Ok(())
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    let store = load_feature_store(&a.store, None)?;
    let spec = query_spec(&a.query, store.dim())?;
    let start = Instant::now();
    let result = segment_3d(&store, &spec)?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    let histogram = result.histogram(HISTOGRAM_BINS);
    let out = out_dir(&a.out)?;
    write_json(
        &out.join("segmentation.json"),
        &json!({
            "schema": SCHEMA,
            "theta": spec.theta,
            "argmax": spec.require_argmax,
            "memberCount": result.member_count(),
            "scoreHistogram": histogram,
            "indices": result.indices,
        }),
    )?;
    let mut files = vec![out.join("segmentation.json").display().to_string()];

    if a.extract || a.delete || a.masks {
        let (Some(ply), Some(cams)) = (&a.scene, &a.cameras) else {
            bail!("--scene and --cameras are required for --extract, --delete and --masks");
        };
        let scene = load_scene(&SceneArgs {
            scene: ply.clone(),
            cameras: cams.clone(),
            background: a.background,
        })?;
        store.check_count(scene.cloud.len())?;
        if a.extract {
            let (cloud, _, _) = extract(&scene.cloud, &store, &result)?;
            if cloud.is_empty() {
                bail!("extraction is empty; nothing to write");
            }
            let p = out.join("extraction.ply");
            save_ply(&cloud, &p)?;
            files.push(p.display().to_string());
        }
        if a.delete {
            let (cloud, _, _) = delete(&scene.cloud, &store, &result)?;
            if cloud.is_empty() {
                bail!("deletion removes every Gaussian; nothing to write");
            }
            let p = out.join("deletion.ply");
            save_ply(&cloud, &p)?;
            files.push(p.display().to_string());
        }
        if a.masks {
            let opts = RenderOptions::default();
            for v in 0..scene.view_count() {
                let r = render_features(&scene, v, &store, &opts)?;
                let fm = r.features.as_ref().expect("features requested");
                let mask = segment_2d(fm, &spec)?;
                let p = out.join(format!("mask_{v:05}.pgm"));
                save_mask(&mask, &p)?;
                files.push(p.display().to_string());
                let gray: Vec<f32> = similarity_map(fm, &spec)?.iter().map(|s| (s + 1.0) / 2.0).collect();
                let p = out.join(format!("heatmap_{v:05}.png"));
                save_gray_png(&p, fm.width, fm.height, &gray)?;
                files.push(p.display().to_string());
            }
        }
    }
    eprintln!(
        "{} of {} Gaussians selected",
        result.member_count(),
        store.len()
    );
    eprintln!("query latency: {latency_ms:.3} ms");
    summary(
        "segment",
        json!({
            "memberCount": result.member_count(),
            "gaussians": store.len(),
            "theta": spec.theta,
            "scoreHistogram": histogram,
            "latencyMs": latency_ms,
            "files": files,
        }),
    );
    Ok(())
}

/// Labels laid out as a single-row image so per-Gaussian and per-pixel
/// scoring share one metric.
fn label_row(labels: Vec<i32>) -> LabelImage {
    LabelImage {
        width: labels.len(),
        height: 1,
        data: labels,
    }
}

fn cmd_transfer(a: TransferArgs) -> Result<()> {
    let store = load_feature_store(&a.store, None)?;
    let text = std::fs::read_to_string(&a.source).with_context(|| format!("reading {}", a.source.display()))?;
    let source = AffordanceSource::from_json(&text)?;
    let opts = KnnOptions {
        k: a.k,
        background_threshold: a.background_threshold,
        ..Default::default()
    };
    let start = Instant::now();
    let labels = knn_transfer(&store, &source, &opts)?;
    let seconds = start.elapsed().as_secs_f64();
    let counts: Vec<usize> = (0..source.label_names.len())
        .map(|l| labels.iter().filter(|&&x| x == l as i32).count())
        .collect();
    let background = labels.iter().filter(|&&x| x < 0).count();

    let miou = match &a.truth {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let truth: Vec<i32> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if truth.len() != labels.len() {
                bail!("truth has {} labels, store has {} Gaussians", truth.len(), labels.len());
            }
            let classes: Vec<i32> = (0..source.label_names.len() as i32).collect();
            grouping_miou(&label_row(labels.clone()), &label_row(truth), &classes)?
        }
        None => None,
    };

    let out = out_dir(&a.out)?;
    let path = out.join("labels.json");
    write_json(
        &path,
        &json!({
            "schema": SCHEMA,
            "labelNames": source.label_names,
            "labels": labels,
        }),
    )?;
    for (name, c) in source.label_names.iter().zip(&counts) {
        eprintln!("{name}: {c}");
    }
    eprintln!("background: {background}; {seconds:.3}s");
    if let Some(m) = miou {
        eprintln!("mIoU: {m:.4}");
    }
    summary(
        "transfer",
        json!({
            "gaussians": labels.len(),
            "labelCounts": counts,
            "background": background,
            "seconds": seconds,
            "mIoU": miou,
            "files": [path.display().to_string()],
        }),
    );
    Ok(())
}

fn cmd_codebook(a: CodebookArgs) -> Result<()> {
    let codebook = if a.train {
        let cfg = TrainConfig {
            epochs: a.epochs,
            lr: a.lr,
            seed: a.seed,
            ..Default::default()
        };
        train_contrastive(a.classes, a.dim, &cfg)?
    } else {
        orthogonal_codes(a.classes, a.dim)?
    };
    let accuracy = codebook.self_accuracy();
    let out = out_dir(&a.out)?;
    let path = out.join("codebook.json");
    codebook.save(&path)?;
    eprintln!(
        "{} classes in D={}; self-classification {:.1}%",
        a.classes,
        a.dim,
        accuracy * 100.0
    );
    summary(
        "identity-codebook",
        json!({
            "classes": a.classes,
            "dim": a.dim,
            "trained": a.train,
            "selfAccuracy": accuracy,
            "finalLoss": codebook.final_loss,
            "files": [path.display().to_string()],
        }),
    );
    Ok(())
}

fn label_path(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("label_{view:05}.pgm"))
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let codebook = IdentityCodebook::load(&a.codebook)?;
    let mut labeled = Vec::new();
    for v in 0..scene.view_count() {
        let p = label_path(&a.labels, v);
        if p.is_file() {
            labeled.push(LabeledView {
                view: v,
                labels: load_label_image(&p)?,
            });
        }
    }
    if labeled.is_empty() {
        bail!("no label_NNNNN.pgm files in {}", a.labels.display());
    }
    let used: Vec<usize> = labeled.iter().map(|l| l.view).collect();
    eprintln!("encoding from {} labeled views", used.len());
    let config = BackprojectionConfig {
        prune_epsilon: a.prune_epsilon,
        normalize: false,
        render: raster_options(&a.raster),
        ..Default::default()
    };
    let store = encode_scene(&scene, &labeled, &codebook, &config)?;
    let out = out_dir(&a.out)?;
    let path = out.join("store.fst");
    save_feature_store(&store, &path)?;
    summary(
        "identity-encode",
        json!({
            "gaussians": store.len(),
            "pruned": store.pruned_count(),
            "featureDim": store.dim(),
            "labeledViews": used,
            "files": [path.display().to_string()],
        }),
    );
    Ok(())
}

fn cmd_classify(a: ClassifyArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let store: FeatureStore = load_feature_store(&a.store, Some(scene.cloud.len()))?;
    let codebook = IdentityCodebook::load(&a.codebook)?;
    let views = view_list(&a.views, &scene)?;
    let opts = raster_options(&a.raster);
    let out = out_dir(&a.out)?;
    let mut files = Vec::new();
    for &v in &views {
        let r = render_features(&scene, v, &store, &opts)?;
        let labels = classify_pixels(r.features.as_ref().expect("features requested"), &codebook, a.reject)?;
        let p = label_path(out, v);
        save_label_image(&labels, &p)?;
        files.push(p.display().to_string());
    }
    eprintln!("wrote {} label images to {}", files.len(), out.display());
    summary("identity-classify", json!({ "views": views, "files": files }));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(&a.truth)
        .with_context(|| format!("reading {}", a.truth.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no .pgm label images in {}", a.truth.display());
    }
    let mut per_image = Vec::new();
    let mut scores = Vec::new();
    for truth_path in &names {
        let file = truth_path.file_name().expect("listed file has a name");
        let pred_path = a.pred.join(file);
        if !pred_path.is_file() {
            bail!("missing prediction {}", pred_path.display());
        }
        let truth = load_label_image(truth_path)?;
        let pred = load_label_image(&pred_path)?;
        let classes: Vec<i32> = if a.classes.is_empty() {
            let present: BTreeSet<i32> = truth.data.iter().chain(&pred.data).copied().filter(|&l| l >= 0).collect();
            present.into_iter().collect()
        } else {
            a.classes.clone()
        };
        let miou = grouping_miou(&pred, &truth, &classes)?;
        if let Some(m) = miou {
            scores.push(m);
        }
        eprintln!(
            "{}: {}",
            file.to_string_lossy(),
            miou.map_or("skipped".to_string(), |m| format!("{m:.4}"))
        );
        per_image.push(json!({ "file": file.to_string_lossy(), "mIoU": miou }));
    }
    let mean = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    if let Some(m) = mean {
        eprintln!("mean mIoU over {} images: {m:.4}", scores.len());
    }
    summary(
        "eval",
        json!({ "images": names.len(), "scored": scores.len(), "mIoU": mean, "perImage": per_image }),
    );
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        scene: a.scene.scene,
        cameras: a.scene.cameras,
        store: a.store,
        prompts: a.prompts,
        background: a.scene.background,
        theta_default: a.theta,
        out_dir: a.out,
        static_dir: a.static_dir,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        let addr = listener.local_addr()?;
        summary("serve", json!({ "address": addr.to_string() }));
        eprintln!("serving on http://{addr}");
        splatfield_service::serve_on(config, listener).await?;
        Ok(())
    })
}
