use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatfield_core::backproject::{backproject, BackprojectionConfig};
use splatfield_core::identity::grouping_miou;
use splatfield_core::maps::{FeatureMap, LabelImage};
use splatfield_core::query::{
    knn_transfer, segment_2d, segment_3d, similarity, AffordanceSource, Exemplar, KnnOptions, QuerySpec,
};
use splatfield_core::raster::{render_features, RenderOptions};
use splatfield_core::synthetic::{
    affordance_fixture, blob_scene, object_labels, one_hot_feature_map, random_store, AffordanceParams,
    BlobSceneParams,
};
use splatfield_core::FeatureStore;

fn vector(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn member_count_never_grows_with_theta(seed in any::<u64>(), negs in 0usize..3, mut thetas in prop::collection::vec(-1.2f64..1.2, 2..8)) {
        let store = random_store(300, 12, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut draw = || (0..12).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let spec = QuerySpec::new(draw(), (0..negs).map(|_| draw()).collect(), 0.0);
        thetas.sort_by(f64::total_cmp);
        let counts: Vec<usize> = thetas
            .iter()
            .map(|&t| segment_3d(&store, &QuerySpec { theta: t, ..spec.clone() }).unwrap().member_count())
            .collect();
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    }

    #[test]
    fn positive_rescaling_keeps_membership(q in vector(8), rows in prop::collection::vec(vector(8), 1..40), scale in 0.01f32..100.0, theta in -0.9f64..0.9) {
        let n = rows.len();
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        let scaled: Vec<f32> = data.iter().map(|v| v * scale).collect();
        prop_assume!(q.iter().any(|v| v.abs() > 1e-3));
        let a = FeatureStore::from_rows(n, 8, data, vec![false; n]).unwrap();
        let b = FeatureStore::from_rows(n, 8, scaled, vec![false; n]).unwrap();
        let spec = QuerySpec::new(q, vec![], theta);
        let ra = segment_3d(&a, &spec).unwrap();
        let rb = segment_3d(&b, &spec).unwrap();
        // rows whose score sits on the threshold may flip by rounding
        for k in 0..n {
            if (ra.scores[k] as f64 - theta).abs() > 1e-5 {
                prop_assert_eq!(ra.membership()[k], rb.membership()[k]);
            }
        }
    }

    #[test]
    fn bulk_scores_match_scalar_similarity(q in vector(19), rows in prop::collection::vec(vector(19), 1..20)) {
        prop_assume!(q.iter().any(|v| v.abs() > 1e-3));
        let n = rows.len();
        let store = FeatureStore::from_rows(n, 19, rows.iter().flatten().copied().collect(), vec![false; n]).unwrap();
        let r = segment_3d(&store, &QuerySpec::new(q.clone(), vec![], 0.0)).unwrap();
        for (k, row) in rows.iter().enumerate() {
            prop_assert!((r.scores[k] as f64 - similarity(row, &q).unwrap()).abs() <= 1e-5);
        }
    }
}

/// Exhaustive kNN: every exemplar scored in f64, fully sorted.
fn knn_oracle(store: &FeatureStore, source: &AffordanceSource, k: usize, threshold: f64) -> Vec<i32> {
    (0..store.len())
        .map(|g| {
            if store.is_pruned(g) {
                return -1;
            }
            let mut scored: Vec<(f64, usize)> = source
                .exemplars
                .iter()
                .enumerate()
                .map(|(i, e)| (similarity(store.row(g), &e.feature).unwrap(), i))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            if scored[0].0 < threshold {
                return -1;
            }
            let labels = source.label_names.len();
            let mut count = vec![0usize; labels];
            let mut sum = vec![0.0f64; labels];
            for &(s, i) in &scored[..k] {
                count[source.exemplars[i].label] += 1;
                sum[source.exemplars[i].label] += s;
            }
            (0..labels)
                .max_by(|&a, &b| count[a].cmp(&count[b]).then(sum[a].total_cmp(&sum[b])).then(b.cmp(&a)))
                .unwrap() as i32
        })
        .collect()
}

fn random_instance(seed: u64) -> (FeatureStore, AffordanceSource, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(2..10);
    let labels = rng.random_range(1..5);
    let per = rng.random_range(1..6);
    // coarse values so that exact ties between exemplars actually occur
    let draw = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.random_range(-2i32..=2) as f32).collect::<Vec<_>>();
    let exemplars: Vec<Exemplar> = (0..labels * per)
        .map(|i| Exemplar {
            label: i % labels,
            feature: draw(&mut rng),
        })
        .collect();
    let n = 200;
    let data: Vec<f32> = (0..n).flat_map(|_| draw(&mut rng)).collect();
    let pruned: Vec<bool> = (0..n).map(|_| rng.random_bool(0.05)).collect();
    let k = rng.random_range(1..=exemplars.len());
    (
        FeatureStore::from_rows(n, dim, data, pruned).unwrap(),
        AffordanceSource {
            label_names: (0..labels).map(|l| l.to_string()).collect(),
            exemplars,
        },
        k,
    )
}

#[test]
fn knn_matches_exhaustive_search() {
    for seed in 0..50 {
        let (store, source, k) = random_instance(seed);
        let opts = KnnOptions {
            k,
            background_threshold: -0.5,
            ..Default::default()
        };
        let fast = knn_transfer(&store, &source, &opts).unwrap();
        assert_eq!(fast, knn_oracle(&store, &source, k, -0.5), "seed {seed}");
    }
}

#[test]
fn affordance_fixture_transfers() {
    let f = affordance_fixture(&AffordanceParams::default());
    let pred = knn_transfer(&f.target, &f.source, &KnnOptions::default()).unwrap();
    let as_image = |v: &[i32]| LabelImage {
        width: v.len(),
        height: 1,
        data: v.to_vec(),
    };
    let classes: Vec<i32> = (0..4).collect();
    let miou = grouping_miou(&as_image(&pred), &as_image(&f.truth), &classes).unwrap().unwrap();
    assert!(miou >= 0.9, "{miou}");
}

#[test]
fn blob_segmentation_in_3d_and_2d() {
    let b = blob_scene(&BlobSceneParams {
        objects: 4,
        gaussians_per_object: 80,
        views: 8,
        width: 64,
        height: 64,
        focal: 56.0,
        seed: 2,
        ..Default::default()
    });
    let maps: Vec<FeatureMap> = (0..8)
        .map(|v| one_hot_feature_map(&object_labels(&b.scene, &b.object_ids, 4, v, 0.5).unwrap(), 4))
        .collect();
    let store = backproject(&b.scene, &maps, &BackprojectionConfig::default()).unwrap();
    for obj in 0..4 {
        let mut q = vec![0.0f32; 4];
        q[obj] = 1.0;
        let spec = QuerySpec::new(q, vec![], 0.5);
        let r = segment_3d(&store, &spec).unwrap();
        let wrong = r.indices.iter().filter(|&&k| b.object_ids[k] != obj).count();
        assert!(wrong * 100 <= r.member_count(), "object {obj}: {wrong} of {}", r.member_count());

        let out = render_features(&b.scene, 1, &store, &RenderOptions::default()).unwrap();
        let mut mask = segment_2d(out.features.as_ref().unwrap(), &spec).unwrap();
        // the similarity ignores magnitude, so faint halos match too; compare
        // on pixels the truth counts as covered
        for (m, &t) in mask.data.iter_mut().zip(&out.transmittance) {
            *m &= t <= 0.5;
        }
        let truth = object_labels(&b.scene, &b.object_ids, 4, 1, 0.5).unwrap().mask_of(obj as i32);
        let (iou, _) = splatfield_core::query::mask_metrics(&mask, &truth).unwrap();
        assert!(iou >= 0.9, "object {obj}: IoU {iou}");
    }
}

