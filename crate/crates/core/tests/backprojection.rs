use splatfield_core::backproject::{backproject, backproject_with, prune_cloud, BackprojectionConfig, BackprojectionMode};
use splatfield_core::exec::Execution;
use splatfield_core::maps::FeatureMap;
use splatfield_core::raster::RenderOptions;
use splatfield_core::scene_io::{load_feature_store, save_feature_store};
use splatfield_core::synthetic::{blob_scene, object_labels, one_hot_feature_map, BlobSceneParams};

fn small_blobs() -> splatfield_core::synthetic::BlobScene {
    blob_scene(&BlobSceneParams {
        objects: 3,
        gaussians_per_object: 60,
        views: 6,
        width: 48,
        height: 48,
        focal: 42.0,
        seed: 4,
        ..Default::default()
    })
}

fn random_maps(n: usize, h: usize, w: usize, d: usize) -> Vec<FeatureMap> {
    (0..n)
        .map(|v| {
            let mut fm = FeatureMap::zeros(h, w, d);
            for (i, x) in fm.data.iter_mut().enumerate() {
                *x = (((i * 31 + v * 17) % 97) as f32 / 48.0) - 1.0;
            }
            fm
        })
        .collect()
}

#[test]
fn constant_maps_reproduce_the_constant() {
    let b = small_blobs();
    let c = [0.25f32, -1.5, 3.0, 0.0];
    let maps = vec![FeatureMap::constant(48, 48, &c); 6];
    let cfg = BackprojectionConfig {
        normalize: false,
        ..Default::default()
    };
    let store = backproject(&b.scene, &maps, &cfg).unwrap();
    assert!(store.pruned_count() < store.len());
    for k in 0..store.len() {
        if !store.is_pruned(k) {
            assert_eq!(store.row(k), &c, "row {k}");
        }
    }
}

#[test]
fn normalized_modes_agree_in_direction() {
    let b = small_blobs();
    let maps = random_maps(6, 48, 48, 8);
    let exp = backproject(&b.scene, &maps, &BackprojectionConfig::default()).unwrap();
    let acc = backproject(
        &b.scene,
        &maps,
        &BackprojectionConfig {
            mode: BackprojectionMode::Accumulated,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(exp.pruned_flags(), acc.pruned_flags());
    for k in 0..exp.len() {
        let cos: f64 = exp.row(k).iter().zip(acc.row(k)).map(|(a, b)| *a as f64 * *b as f64).sum();
        if !exp.is_pruned(k) {
            assert!(1.0 - cos <= 1e-6, "row {k}: cos {cos}");
        }
    }
}

#[test]
fn parallel_and_sequential_stores_are_identical() {
    let b = small_blobs();
    let maps = random_maps(6, 24, 24, 5);
    let par = backproject(&b.scene, &maps, &BackprojectionConfig::default()).unwrap();
    let seq_cfg = BackprojectionConfig {
        render: RenderOptions {
            exec: Execution::Sequential,
            ..Default::default()
        },
        ..Default::default()
    };
    let seq = backproject(&b.scene, &maps, &seq_cfg).unwrap();
    assert_eq!(par, seq);
}

#[test]
fn streaming_matches_in_memory() {
    let b = small_blobs();
    let maps = random_maps(6, 48, 48, 3);
    let cfg = BackprojectionConfig::default();
    let a = backproject(&b.scene, &maps, &cfg).unwrap();
    let s = backproject_with(&b.scene, |v| Ok(maps[v].clone()), &cfg).unwrap();
    assert_eq!(a, s);
}

#[test]
fn one_hot_masks_label_every_visible_gaussian() {
    let b = small_blobs();
    let maps: Vec<FeatureMap> = (0..6)
        .map(|v| one_hot_feature_map(&object_labels(&b.scene, &b.object_ids, 3, v, 0.5).unwrap(), 3))
        .collect();
    let store = backproject(&b.scene, &maps, &BackprojectionConfig::default()).unwrap();
    let (mut right, mut total) = (0, 0);
    for k in 0..store.len() {
        if store.is_pruned(k) {
            continue;
        }
        let row = store.row(k);
        let best = (0..3).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
        right += (best == b.object_ids[k]) as usize;
        total += 1;
    }
    assert!(right as f64 >= 0.99 * total as f64, "{right}/{total}");
}

#[test]
fn store_round_trips_and_prunes_cloud() {
    let b = small_blobs();
    let maps = random_maps(6, 48, 48, 4);
    let mut store = backproject(&b.scene, &maps, &BackprojectionConfig::default()).unwrap();
    store.prune(0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.fst1");
    save_feature_store(&store, &path).unwrap();
    let back = load_feature_store(&path, Some(b.scene.cloud.len())).unwrap();
    assert_eq!(back, store);
    assert!(load_feature_store(&path, Some(1)).is_err());

    let (cloud, kept, map) = prune_cloud(&b.scene.cloud, &store).unwrap();
    assert_eq!(cloud.len(), store.len() - store.pruned_count());
    assert_eq!(kept.pruned_count(), 0);
    assert_eq!(map.old_to_new[0], None);
    for (new, &old) in map.kept.iter().enumerate() {
        assert_eq!(kept.row(new), store.row(old));
        assert_eq!(cloud.raw_position(new), b.scene.cloud.raw_position(old));
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let b = small_blobs();
    let cfg = BackprojectionConfig::default();
    assert!(backproject(&b.scene, &random_maps(5, 48, 48, 2), &cfg).is_err());
    let mut maps = random_maps(6, 48, 48, 2);
    maps[3] = FeatureMap::zeros(48, 48, 3);
    assert!(backproject(&b.scene, &maps, &cfg).is_err());
    let wrong_aspect = vec![FeatureMap::zeros(10, 48, 2); 6];
    assert!(backproject(&b.scene, &wrong_aspect, &cfg).is_err());
}
