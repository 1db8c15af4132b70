use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use splatfield_core::backproject::{backproject, BackprojectionConfig};
use splatfield_core::identity::{grouping_miou, orthogonal_codes};
use splatfield_core::query::similarity;
use splatfield_core::scene_io::{
    encode_rgb_png, load_feature_store, save_cameras, save_feature_map, save_feature_store, save_label_image, save_ply,
    save_prompt_bank,
};
use splatfield_core::synthetic::{
    affordance_fixture, blob_scene, object_labels, one_hot_store, random_scene, AffordanceParams, BlobScene,
    BlobSceneParams,
};
use splatfield_core::{FeatureMap, Gaussian, GaussianCloud, LabelImage, PromptBank, SceneBundle};
use splatfield_service::{router, AppState, Session};

const OBJECTS: usize = 3;
const PER_OBJECT: usize = 120;

fn splatfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatfield"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Runs a command that must succeed and returns its summary line.
fn ok(args: &[&str]) -> Value {
    let out = splatfield(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1, "{stdout}");
    let v: Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(v["schema"], 1);
    v
}

fn fails(args: &[&str]) -> String {
    let out = splatfield(args);
    assert_eq!(out.status.code(), Some(1), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    blob: BlobScene,
}

impl Fixture {
    fn new() -> Self {
        let blob = blob_scene(&BlobSceneParams {
            objects: OBJECTS,
            gaussians_per_object: PER_OBJECT,
            views: 4,
            width: 48,
            height: 48,
            focal: 42.0,
            ..Default::default()
        });
        let dir = tempfile::tempdir().unwrap();
        save_ply(&blob.scene.cloud, &dir.path().join("scene.ply")).unwrap();
        save_cameras(&blob.scene.cameras, &dir.path().join("cameras.json")).unwrap();
        Fixture { dir, blob }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// The scene as the CLI sees it, after the PLY round trip.
    fn loaded(&self) -> SceneBundle {
        SceneBundle::load(&self.path("scene.ply"), &self.path("cameras.json"), [0.0; 3]).unwrap()
    }

    fn scene_args(&self) -> Vec<String> {
        vec![
            "--scene".into(),
            self.path("scene.ply").display().to_string(),
            "--cameras".into(),
            self.path("cameras.json").display().to_string(),
        ]
    }

    fn write_feature_maps(&self, dim: usize) -> PathBuf {
        let dir = self.path("features");
        std::fs::create_dir_all(&dir).unwrap();
        for v in 0..self.blob.scene.view_count() {
            let mut fm = FeatureMap::zeros(24, 24, dim);
            for (i, x) in fm.data.iter_mut().enumerate() {
                *x = (((i * 31 + v * 7) % 17) as f32 - 8.0) / 8.0;
            }
            save_feature_map(&fm, &dir.join(format!("feat_{v:05}.ftn1"))).unwrap();
        }
        dir
    }

    /// One-hot store over objects plus a prompt bank naming each object.
    fn write_orthogonal_store(&self) {
        save_feature_store(&one_hot_store(&self.blob.object_ids, OBJECTS), &self.path("store.fst")).unwrap();
        let bank = PromptBank::new(
            OBJECTS,
            (0..OBJECTS)
                .map(|o| {
                    let mut v = vec![0.0; OBJECTS];
                    v[o] = 1.0;
                    (format!("obj{o}"), v)
                })
                .collect(),
        )
        .unwrap();
        save_prompt_bank(&bank, &self.path("prompts.json")).unwrap();
    }
}

/// Subcommand words from `extra`, then the scene flags, then the rest.
fn args<'a>(base: &'a [String], extra: &[&'a str]) -> Vec<&'a str> {
    let split = extra.iter().position(|a| a.starts_with("--")).unwrap_or(extra.len());
    let mut v = extra[..split].to_vec();
    v.extend(base.iter().map(String::as_str));
    v.extend_from_slice(&extra[split..]);
    v
}

#[test]
fn backproject_matches_library_bit_exactly() {
    let f = Fixture::new();
    let features = f.write_feature_maps(6);
    let out = f.path("bp");
    let base = f.scene_args();
    let v = ok(&args(&base, &["backproject", "--features", s(&features), "--out", s(&out)]));
    assert_eq!(v["gaussians"], OBJECTS * PER_OBJECT);
    assert_eq!(v["featureDim"], 6);

    let scene = f.loaded();
    let maps: Vec<FeatureMap> = (0..scene.view_count())
        .map(|v| splatfield_core::scene_io::load_feature_map(&features.join(format!("feat_{v:05}.ftn1"))).unwrap())
        .collect();
    let expected = backproject(&scene, &maps, &BackprojectionConfig::default()).unwrap();
    save_feature_store(&expected, &f.path("expected.fst")).unwrap();
    assert_eq!(
        std::fs::read(out.join("store.fst")).unwrap(),
        std::fs::read(f.path("expected.fst")).unwrap()
    );
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("backproject.json")).unwrap()).unwrap();
    assert_eq!(report["pruned"], expected.pruned_count());
}

#[test]
fn backproject_is_idempotent_on_disk() {
    let f = Fixture::new();
    let features = f.write_feature_maps(4);
    let base = f.scene_args();
    let out = f.path("bp");
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        ok(&args(&base, &["backproject", "--features", s(&features), "--out", s(&out)]));
        snapshots.push((
            std::fs::read(out.join("store.fst")).unwrap(),
            std::fs::read(out.join("backproject.json")).unwrap(),
        ));
    }
    assert_eq!(snapshots[0], snapshots[1]);
}

#[test]
fn missing_feature_map_names_the_view() {
    let f = Fixture::new();
    let features = f.write_feature_maps(4);
    std::fs::remove_file(features.join("feat_00003.ftn1")).unwrap();
    let base = f.scene_args();
    let err = fails(&args(&base, &["backproject", "--features", s(&features), "--out", s(&f.path("bp"))]));
    assert!(err.contains("view 3"), "{err}");
}

#[test]
fn normalized_modes_agree() {
    let f = Fixture::new();
    let features = f.write_feature_maps(5);
    let base = f.scene_args();
    for mode in ["expected", "accumulated"] {
        let out = f.path(mode);
        ok(&args(
            &base,
            &["backproject", "--features", s(&features), "--mode", mode, "--normalize", "true", "--out", s(&out)],
        ));
    }
    let a = load_feature_store(&f.path("expected").join("store.fst"), None).unwrap();
    let b = load_feature_store(&f.path("accumulated").join("store.fst"), None).unwrap();
    assert_eq!(a.pruned_flags(), b.pruned_flags());
    for k in (0..a.len()).filter(|&k| !a.is_pruned(k)) {
        let c = similarity(a.row(k), b.row(k)).unwrap();
        assert!(1.0 - c <= 1e-6, "row {k}: cosine {c}");
    }
}

#[test]
fn segment_selects_exactly_the_prompted_object() {
    let f = Fixture::new();
    f.write_orthogonal_store();
    let out = f.path("seg");
    let v = ok(&[
        "segment",
        "--store",
        s(&f.path("store.fst")),
        "--prompts",
        s(&f.path("prompts.json")),
        "--positive",
        "obj1",
        "--theta",
        "0.5",
        "--out",
        s(&out),
    ]);
    assert_eq!(v["memberCount"], PER_OBJECT);
    assert!(v["latencyMs"].as_f64().unwrap() >= 0.0);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(out.join("segmentation.json")).unwrap()).unwrap();
    let indices: Vec<usize> = serde_json::from_value(doc["indices"].clone()).unwrap();
    let expected: Vec<usize> = (0..f.blob.object_ids.len()).filter(|&k| f.blob.object_ids[k] == 1).collect();
    assert_eq!(indices, expected);
}

#[test]
fn segment_writes_edits_and_masks() {
    let f = Fixture::new();
    f.write_orthogonal_store();
    let out = f.path("seg");
    let base = f.scene_args();
    ok(&args(
        &base,
        &[
            "segment",
            "--store",
            s(&f.path("store.fst")),
            "--prompts",
            s(&f.path("prompts.json")),
            "--positive",
            "obj2",
            "--extract",
            "--delete",
            "--masks",
            "--out",
            s(&out),
        ],
    ));
    let n = |name: &str| splatfield_core::scene_io::load_ply(&out.join(name)).unwrap().len();
    assert_eq!(n("extraction.ply"), PER_OBJECT);
    assert_eq!(n("deletion.ply"), (OBJECTS - 1) * PER_OBJECT);
    for v in 0..4 {
        assert!(out.join(format!("mask_{v:05}.pgm")).is_file());
        assert!(out.join(format!("heatmap_{v:05}.png")).is_file());
    }
}

#[test]
fn theta_above_one_selects_nothing() {
    let f = Fixture::new();
    f.write_orthogonal_store();
    let v = ok(&[
        "segment",
        "--store",
        s(&f.path("store.fst")),
        "--prompts",
        s(&f.path("prompts.json")),
        "--positive",
        "obj0",
        "--theta",
        "1.1",
        "--out",
        s(&f.path("seg")),
    ]);
    assert_eq!(v["memberCount"], 0);
}

#[test]
fn unknown_prompt_lists_available_names() {
    let f = Fixture::new();
    f.write_orthogonal_store();
    let err = fails(&[
        "segment",
        "--store",
        s(&f.path("store.fst")),
        "--prompts",
        s(&f.path("prompts.json")),
        "--positive",
        "chair",
        "--out",
        s(&f.path("seg")),
    ]);
    assert!(err.contains("chair") && err.contains("obj0, obj1, obj2"), "{err}");
}

#[tokio::test(flavor = "multi_thread")]
async fn segment_and_service_agree_on_member_count() {
    let f = Fixture::new();
    f.write_orthogonal_store();
    let v = ok(&[
        "segment",
        "--store",
        s(&f.path("store.fst")),
        "--prompts",
        s(&f.path("prompts.json")),
        "--positive",
        "obj0",
        "--negative",
        "obj2",
        "--theta",
        "-0.2",
        "--out",
        s(&f.path("seg")),
    ]);
    let store = load_feature_store(&f.path("store.fst"), None).unwrap();
    let bank = splatfield_core::scene_io::load_prompt_bank(&f.path("prompts.json")).unwrap();
    let session = Session::new(f.loaded(), store, bank, 0.0);
    let app = router(AppState::ready(session, f.path("exports")), None);
    let body = r#"{"positive": "obj0", "negatives": ["obj2"], "theta": -0.2}"#;
    let resp = app
        .oneshot(
            Request::post("/api/query")
                .header("content-type", "application/json")
                .body(Body::from(body))
                .unwrap(),
        )
        .await
        .unwrap();
    let doc: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(doc["memberCount"], v["memberCount"]);
    assert_eq!(doc["scoreHistogram"], v["scoreHistogram"]);
}

#[test]
fn render_of_scene_with_nothing_in_view_is_background() {
    let dir = tempfile::tempdir().unwrap();
    let cameras = random_scene(1, 32, 24, 0, 0).cameras;
    let mut cloud = GaussianCloud::new(0);
    cloud.push(&Gaussian::isotropic([0.0, 0.0, -3.0], 0.2, 0.9, [1.0, 0.0, 0.0]));
    save_ply(&cloud, &dir.path().join("scene.ply")).unwrap();
    save_cameras(&cameras, &dir.path().join("cameras.json")).unwrap();
    let out = dir.path().join("render");
    ok(&[
        "render",
        "--scene",
        s(&dir.path().join("scene.ply")),
        "--cameras",
        s(&dir.path().join("cameras.json")),
        "--background",
        "0.25,0.5,0.75",
        "--out",
        s(&out),
    ]);
    let bg: Vec<f32> = (0..32 * 24).flat_map(|_| [0.25f32, 0.5, 0.75]).collect();
    assert_eq!(
        std::fs::read(out.join("color_00000.png")).unwrap(),
        encode_rgb_png(32, 24, &bg).unwrap()
    );
}

#[test]
fn render_query_modes() {
    let f = Fixture::new();
    f.write_orthogonal_store();
    let base = f.scene_args();
    for what in ["color", "heatmap", "extraction", "deletion"] {
        let out = f.path(what);
        let v = ok(&args(
            &base,
            &[
                "render",
                "--what",
                what,
                "--views",
                "0,2",
                "--store",
                s(&f.path("store.fst")),
                "--prompts",
                s(&f.path("prompts.json")),
                "--positive",
                "obj1",
                "--out",
                s(&out),
            ],
        ));
        assert_eq!(v["files"].as_array().unwrap().len(), 2);
        assert!(out.join(format!("{what}_00002.png")).is_file());
    }
    let err = fails(&args(&base, &["render", "--what", "heatmap", "--out", s(&f.path("x"))]));
    assert!(err.contains("--store"), "{err}");
}

#[test]
fn transfer_miou_matches_library() {
    let fx = affordance_fixture(&AffordanceParams {
        targets_per_label: 150,
        ..Default::default()
    });
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    save_feature_store(&fx.target, &p("target.fst")).unwrap();
    std::fs::write(p("source.json"), serde_json::to_string(&fx.source).unwrap()).unwrap();
    std::fs::write(p("truth.json"), serde_json::to_string(&fx.truth).unwrap()).unwrap();
    let v = ok(&[
        "transfer",
        "--store",
        s(&p("target.fst")),
        "--source",
        s(&p("source.json")),
        "--k",
        "5",
        "--truth",
        s(&p("truth.json")),
        "--out",
        s(&p("out")),
    ]);

    let pred = splatfield_core::query::knn_transfer(&fx.target, &fx.source, &Default::default()).unwrap();
    let row = |d: &[i32]| LabelImage {
        width: d.len(),
        height: 1,
        data: d.to_vec(),
    };
    let classes: Vec<i32> = (0..fx.source.label_names.len() as i32).collect();
    let expected = grouping_miou(&row(&pred), &row(&fx.truth), &classes).unwrap().unwrap();
    assert_eq!(v["mIoU"].as_f64().unwrap(), expected);

    let doc: Value = serde_json::from_str(&std::fs::read_to_string(p("out").join("labels.json")).unwrap()).unwrap();
    let labels: Vec<i32> = serde_json::from_value(doc["labels"].clone()).unwrap();
    assert_eq!(labels, pred);
}

#[test]
fn eval_identical_dirs_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels");
    std::fs::create_dir_all(&labels).unwrap();
    for i in 0..3 {
        let img = LabelImage {
            width: 8,
            height: 4,
            data: (0..32).map(|p| (p + i) % 5 - 1).collect(),
        };
        save_label_image(&img, &labels.join(format!("label_{i:05}.pgm"))).unwrap();
    }
    let v = ok(&["eval", "--pred", s(&labels), "--truth", s(&labels)]);
    assert_eq!(v["mIoU"], 1.0);
    assert_eq!(v["images"], 3);
}

#[test]
fn identity_pipeline_recovers_objects() {
    let f = Fixture::new();
    let base = f.scene_args();
    let cb_dir = f.path("cb");
    let v = ok(&[
        "identity",
        "codebook",
        "--classes",
        &OBJECTS.to_string(),
        "--dim",
        "8",
        "--out",
        s(&cb_dir),
    ]);
    assert_eq!(v["selfAccuracy"], 1.0);

    let labels = f.path("labels");
    let truth = f.path("truth");
    std::fs::create_dir_all(&labels).unwrap();
    std::fs::create_dir_all(&truth).unwrap();
    for view in 0..4 {
        let img = object_labels(&f.blob.scene, &f.blob.object_ids, OBJECTS, view, 0.5).unwrap();
        let name = format!("label_{view:05}.pgm");
        if view < 3 {
            save_label_image(&img, &labels.join(&name)).unwrap();
        }
        save_label_image(&img, &truth.join(&name)).unwrap();
    }
    let codebook = cb_dir.join("codebook.json");
    let enc = f.path("enc");
    let v = ok(&args(
        &base,
        &["identity", "encode", "--codebook", s(&codebook), "--labels", s(&labels), "--out", s(&enc)],
    ));
    assert_eq!(v["labeledViews"], serde_json::json!([0, 1, 2]));
    let pred = f.path("pred");
    ok(&args(
        &base,
        &[
            "identity",
            "classify",
            "--store",
            s(&enc.join("store.fst")),
            "--codebook",
            s(&codebook),
            "--reject",
            "0.5",
            "--out",
            s(&pred),
        ],
    ));
    let v = ok(&["eval", "--pred", s(&pred), "--truth", s(&truth)]);
    assert!(v["mIoU"].as_f64().unwrap() > 0.9, "{v}");
}

#[test]
fn codebook_rejects_too_many_orthogonal_classes() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(&["identity", "codebook", "--classes", "9", "--dim", "8", "--out", s(dir.path())]);
    assert!(err.contains("9 classes"), "{err}");
    assert!(orthogonal_codes(9, 8).is_err());
}
