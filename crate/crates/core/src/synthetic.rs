//! Procedural scenes and fixtures with known ground truth, for tests,
//! benchmarks and demos.

use glam::DVec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::error::Result;
use crate::maps::{FeatureMap, LabelImage};
use crate::query::{AffordanceSource, Exemplar};
use crate::raster::{render_features, RenderOptions};
use crate::scene_io::{FeatureStore, SceneBundle};
use crate::splat::{sh_coeff_count, Camera, Gaussian, GaussianCloud};

/// `n` cameras on a horizontal circle of `radius` at height `elevation`,
/// all looking at the origin.
pub fn ring_cameras(n: usize, width: u32, height: u32, focal: f64, radius: f64, elevation: f64) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let eye = DVec3::new(radius * a.cos(), elevation, radius * a.sin());
            Camera::look_at(i, width, height, focal, eye, DVec3::ZERO, DVec3::Y)
        })
        .collect()
}

/// Distinct saturated colors.
pub fn palette(i: usize) -> [f64; 3] {
    const P: [[f64; 3]; 8] = [
        [0.9, 0.1, 0.1],
        [0.1, 0.8, 0.2],
        [0.1, 0.2, 0.9],
        [0.9, 0.8, 0.1],
        [0.8, 0.2, 0.8],
        [0.1, 0.8, 0.8],
        [0.9, 0.5, 0.1],
        [0.5, 0.5, 0.5],
    ];
    P[i % P.len()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSceneParams {
    pub objects: usize,
    pub gaussians_per_object: usize,
    /// Radius of each blob's ball.
    pub blob_radius: f64,
    /// Blob centers sit on a circle of this radius around the origin.
    pub layout_radius: f64,
    pub gaussian_sigma: f64,
    pub opacity: f64,
    pub views: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub camera_radius: f64,
    pub camera_elevation: f64,
    pub seed: u64,
}

impl Default for BlobSceneParams {
    fn default() -> Self {
        BlobSceneParams {
            objects: 5,
            gaussians_per_object: 400,
            blob_radius: 0.35,
            layout_radius: 0.9,
            gaussian_sigma: 0.05,
            opacity: 0.9,
            views: 12,
            width: 128,
            height: 128,
            focal: 110.0,
            camera_radius: 4.0,
            camera_elevation: 2.0,
            seed: 0,
        }
    }
}

/// A scene of disjoint colored blobs with the owning object of every
/// Gaussian.
#[derive(Debug, Clone)]
pub struct BlobScene {
    pub scene: SceneBundle,
    pub object_ids: Vec<usize>,
    pub objects: usize,
}

pub fn blob_scene(p: &BlobSceneParams) -> BlobScene {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut cloud = GaussianCloud::new(0);
    let mut object_ids = Vec::with_capacity(p.objects * p.gaussians_per_object);
    for o in 0..p.objects {
        let a = std::f64::consts::TAU * o as f64 / p.objects as f64;
        let center = DVec3::new(p.layout_radius * a.cos(), 0.0, p.layout_radius * a.sin());
        for _ in 0..p.gaussians_per_object {
            // uniform in the ball
            let dir = DVec3::from(UnitSphere.sample(&mut rng));
            let r = p.blob_radius * rng.random::<f64>().cbrt();
            let pos = center + dir * r;
            cloud.push(&Gaussian::isotropic(pos.to_array(), p.gaussian_sigma, p.opacity, palette(o)));
            object_ids.push(o);
        }
    }
    let cameras = ring_cameras(p.views, p.width, p.height, p.focal, p.camera_radius, p.camera_elevation);
    BlobScene {
        scene: SceneBundle::new(cloud, cameras, [0.0; 3]).expect("generated cameras are valid"),
        object_ids,
        objects: p.objects,
    }
}

/// One-hot store of per-Gaussian labels (`dim` must cover every label).
pub fn one_hot_store(labels: &[usize], dim: usize) -> FeatureStore {
    let mut s = FeatureStore::zeros(labels.len(), dim);
    for (k, &l) in labels.iter().enumerate() {
        s.row_mut(k)[l] = 1.0;
    }
    s
}

/// Ground-truth object mask of a view: each pixel takes the object carrying
/// most of its blending weight, or `-1` when less than `coverage` of the
/// pixel is covered.
pub fn object_labels(scene: &SceneBundle, object_ids: &[usize], objects: usize, view: usize, coverage: f64) -> Result<LabelImage> {
    let store = one_hot_store(object_ids, objects);
    let out = render_features(scene, view, &store, &RenderOptions::default())?;
    let fm = out.features.expect("features requested");
    let data = (0..out.width * out.height)
        .map(|i| {
            if 1.0 - (out.transmittance[i] as f64) < coverage {
                return -1;
            }
            let px = &fm.data[i * objects..(i + 1) * objects];
            let mut best = 0;
            for j in 1..objects {
                if px[j] > px[best] {
                    best = j;
                }
            }
            best as i32
        })
        .collect();
    Ok(LabelImage {
        width: out.width,
        height: out.height,
        data,
    })
}

/// `e_label` per pixel, zero where unlabeled.
pub fn one_hot_feature_map(labels: &LabelImage, dim: usize) -> FeatureMap {
    let mut fm = FeatureMap::zeros(labels.height, labels.width, dim);
    for (i, &l) in labels.data.iter().enumerate() {
        if l >= 0 {
            fm.data[i * dim + l as usize] = 1.0;
        }
    }
    fm
}

/// Random anisotropic Gaussians in front of a single camera at the origin
/// looking down `+z`.
pub fn random_scene(n: usize, width: u32, height: u32, sh_degree: u8, seed: u64) -> SceneBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let focal = width as f64;
    let k = sh_coeff_count(sh_degree);
    let mut cloud = GaussianCloud::new(sh_degree);
    let coeff = Normal::new(0.0, 0.3).expect("valid normal");
    for _ in 0..n {
        let z = rng.random_range(2.0..6.0);
        let half = 0.5 * z;
        let g = Gaussian {
            position: [rng.random_range(-half..half), rng.random_range(-half..half), z],
            scale: [
                rng.random_range(0.02..0.3),
                rng.random_range(0.02..0.3),
                rng.random_range(0.02..0.3),
            ],
            rotation: [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.1..1.0),
            ],
            opacity: rng.random_range(0.05..0.95),
            sh: (0..k)
                .map(|c| {
                    if c == 0 {
                        [0; 3].map(|_| crate::splat::rgb_to_dc(rng.random_range(0.0..1.0)))
                    } else {
                        [0; 3].map(|_| coeff.sample(&mut rng))
                    }
                })
                .collect(),
        };
        cloud.push(&g);
    }
    let cam = Camera::look_at(0, width, height, focal, DVec3::ZERO, DVec3::Z, -DVec3::Y);
    SceneBundle::new(cloud, vec![cam], [0.1, 0.2, 0.3]).expect("generated camera is valid")
}

/// `n × dim` store with uniform entries in [-1, 1].
pub fn random_store(n: usize, dim: usize, seed: u64) -> FeatureStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FeatureStore::from_rows(n, dim, data, vec![false; n]).expect("consistent shape")
}

/// Random unit vector.
pub fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f32> {
    let n = Normal::new(0.0f64, 1.0).expect("valid normal");
    let v: Vec<f64> = (0..dim).map(|_| n.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| (x / norm) as f32).collect()
}

/// Labeled feature clusters: source exemplars and target Gaussians drawn
/// around shared per-label prototypes.
#[derive(Debug, Clone)]
pub struct AffordanceFixture {
    pub source: AffordanceSource,
    pub target: FeatureStore,
    pub truth: Vec<i32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffordanceParams {
    pub labels: usize,
    pub dim: usize,
    pub exemplars_per_label: usize,
    pub targets_per_label: usize,
    /// Per-coordinate noise around each prototype.
    pub noise: f64,
    pub seed: u64,
}

impl Default for AffordanceParams {
    fn default() -> Self {
        AffordanceParams {
            labels: 4,
            dim: 32,
            exemplars_per_label: 20,
            targets_per_label: 500,
            noise: 0.08,
            seed: 0,
        }
    }
}

pub fn affordance_fixture(p: &AffordanceParams) -> AffordanceFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let prototypes: Vec<Vec<f32>> = (0..p.labels).map(|_| random_unit(p.dim, &mut rng)).collect();
    let noise = Normal::new(0.0, p.noise).expect("valid normal");
    let jitter = |proto: &[f32], rng: &mut ChaCha8Rng| -> Vec<f32> {
        proto.iter().map(|&v| v + noise.sample(rng) as f32).collect()
    };
    let mut exemplars = Vec::new();
    for (l, proto) in prototypes.iter().enumerate() {
        for _ in 0..p.exemplars_per_label {
            exemplars.push(Exemplar {
                label: l,
                feature: jitter(proto, &mut rng),
            });
        }
    }
    let n = p.labels * p.targets_per_label;
    let mut data = Vec::with_capacity(n * p.dim);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let l = i % p.labels;
        data.extend(jitter(&prototypes[l], &mut rng));
        truth.push(l as i32);
    }
    AffordanceFixture {
        source: AffordanceSource {
            label_names: (0..p.labels).map(|l| format!("affordance_{l}")).collect(),
            exemplars,
        },
        target: FeatureStore::from_rows(n, p.dim, data, vec![false; n]).expect("consistent shape"),
        truth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_scene_shapes() {
        let b = blob_scene(&BlobSceneParams {
            gaussians_per_object: 10,
            views: 3,
            ..Default::default()
        });
        assert_eq!(b.scene.cloud.len(), 50);
        assert_eq!(b.object_ids.len(), 50);
        assert_eq!(b.scene.view_count(), 3);
        let l = object_labels(&b.scene, &b.object_ids, b.objects, 0, 0.5).unwrap();
        assert!(l.data.iter().any(|&v| v >= 0));
        assert!(l.data.contains(&-1));
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(random_scene(20, 16, 16, 1, 3).cloud, random_scene(20, 16, 16, 1, 3).cloud);
        assert_eq!(random_store(10, 4, 1), random_store(10, 4, 1));
        let f = affordance_fixture(&AffordanceParams::default());
        assert_eq!(f.target.len(), f.truth.len());
    }
}
