//! Feature back-projection: lifting per-view 2D feature maps onto the
//! Gaussians that produced those pixels.
//!
//! For Gaussian `k` the expected feature is the blending-weight average of
//! every texel it contributed to, over all views:
//!
//! ```text
//! f_k = Σ F(x,y,n)·α_k·T_k / Σ α_k·T_k
//! ```
//!
//! Dropping the denominator gives the accumulated variant. The two differ by
//! a positive per-Gaussian scale, so after L2 normalization they coincide.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::exec;
use crate::maps::FeatureMap;
use crate::raster::{accumulate_weights, RenderOptions, WeightSink};
use crate::scene_io::{FeatureStore, SceneBundle};
use crate::splat::GaussianCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackprojectionMode {
    /// Weighted average of contributing texels.
    #[default]
    Expected,
    /// Unnormalized weighted sum.
    Accumulated,
}

impl std::str::FromStr for BackprojectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expected" => Ok(BackprojectionMode::Expected),
            "accumulated" => Ok(BackprojectionMode::Accumulated),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode '{other}' (expected|accumulated)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackprojectionConfig {
    pub mode: BackprojectionMode,
    /// Scale each surviving row to unit L2 norm.
    pub normalize: bool,
    /// Gaussians whose total weight is at most this are pruned.
    pub prune_epsilon: f64,
    pub render: RenderOptions,
}

impl Default for BackprojectionConfig {
    fn default() -> Self {
        BackprojectionConfig {
            mode: BackprojectionMode::Expected,
            normalize: true,
            prune_epsilon: 1e-8,
            render: RenderOptions::default(),
        }
    }
}

impl BackprojectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.prune_epsilon.is_finite() || self.prune_epsilon < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "prune_epsilon must be finite and >= 0, got {}",
                self.prune_epsilon
            )));
        }
        Ok(())
    }
}

/// Accumulates views one at a time into a single weight sink.
#[derive(Debug, Clone)]
pub struct Backprojector {
    sink: WeightSink,
    dim: usize,
    views: usize,
}

impl Backprojector {
    pub fn new(count: usize, dim: usize) -> Self {
        Backprojector {
            sink: WeightSink::features(count, dim),
            dim,
            views: 0,
        }
    }

    pub fn add_view(
        &mut self,
        scene: &SceneBundle,
        view: usize,
        map: &FeatureMap,
        opts: &RenderOptions,
    ) -> Result<()> {
        if map.dim != self.dim {
            return Err(Error::Dimension(format!(
                "feature map for view {view} has D={}, expected {}",
                map.dim, self.dim
            )));
        }
        accumulate_weights(scene, view, Some(map), &mut self.sink, opts)?;
        self.views += 1;
        Ok(())
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn sink(&self) -> &WeightSink {
        &self.sink
    }

    pub fn finish(&self, config: &BackprojectionConfig) -> FeatureStore {
        finalize(&self.sink, self.dim, config)
    }
}

/// Turns accumulated sums into per-Gaussian features.
pub fn finalize(sink: &WeightSink, dim: usize, config: &BackprojectionConfig) -> FeatureStore {
    let n = sink.len();
    let mut data = vec![0.0f32; n * dim];
    let mut pruned = vec![false; n];
    let den = sink.denominators();
    exec::for_each_chunk_pair_mut(
        config.render.exec,
        &mut data,
        dim.max(1) * 1024,
        &mut pruned,
        1024,
        |chunk, rows, flags| {
            let mut tmp = vec![0.0f64; dim];
            for (i, flag) in flags.iter_mut().enumerate() {
                let k = chunk * 1024 + i;
                if den[k] <= config.prune_epsilon {
                    *flag = true;
                    continue;
                }
                let scale = match config.mode {
                    BackprojectionMode::Expected => 1.0 / den[k],
                    BackprojectionMode::Accumulated => 1.0,
                };
                for (t, &v) in tmp.iter_mut().zip(sink.numerator(k)) {
                    *t = v * scale;
                }
                if config.normalize {
                    let norm = tmp.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        tmp.iter_mut().for_each(|v| *v /= norm);
                    }
                }
                for (d, s) in rows[i * dim..(i + 1) * dim].iter_mut().zip(&tmp) {
                    *d = *s as f32;
                }
            }
        },
    );
    FeatureStore::from_rows(n, dim, data, pruned).expect("shape is consistent by construction")
}

/// Back-projects one feature map per camera in a single pass.
pub fn backproject(
    scene: &SceneBundle,
    feature_maps: &[FeatureMap],
    config: &BackprojectionConfig,
) -> Result<FeatureStore> {
    if feature_maps.len() != scene.view_count() {
        return Err(Error::InvalidArgument(format!(
            "{} feature maps for {} views",
            feature_maps.len(),
            scene.view_count()
        )));
    }
    backproject_with(scene, |v| Ok(feature_maps[v].clone()), config)
}

/// Streaming variant: `load(view)` supplies each view's map on demand, so
/// only one map is resident at a time.
pub fn backproject_with<F>(
    scene: &SceneBundle,
    mut load: F,
    config: &BackprojectionConfig,
) -> Result<FeatureStore>
where
    F: FnMut(usize) -> Result<FeatureMap>,
{
    config.validate()?;
    let mut bp: Option<Backprojector> = None;
    for view in 0..scene.view_count() {
        let map = load(view)?;
        let bp = bp.get_or_insert_with(|| Backprojector::new(scene.cloud.len(), map.dim));
        bp.add_view(scene, view, &map, &config.render)?;
    }
    let bp = bp.ok_or_else(|| Error::InvalidArgument("scene has no views".into()))?;
    Ok(bp.finish(config))
}

/// Timing and pruning figures for a back-projection run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BackprojectionReport {
    pub gaussians: usize,
    pub pruned: usize,
    pub views: usize,
    pub dim: usize,
    pub seconds: f64,
}

/// [`backproject_with`] plus a report.
pub fn backproject_timed<F>(
    scene: &SceneBundle,
    load: F,
    config: &BackprojectionConfig,
) -> Result<(FeatureStore, BackprojectionReport)>
where
    F: FnMut(usize) -> Result<FeatureMap>,
{
    let start = Instant::now();
    let store = backproject_with(scene, load, config)?;
    let report = BackprojectionReport {
        gaussians: store.len(),
        pruned: store.pruned_count(),
        views: scene.view_count(),
        dim: store.dim(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((store, report))
}

/// Old-to-new index mapping produced by any row selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    /// Surviving old indices in new order.
    pub kept: Vec<usize>,
    pub old_to_new: Vec<Option<usize>>,
}

impl IndexMap {
    pub fn from_kept(original_len: usize, kept: Vec<usize>) -> Self {
        let mut old_to_new = vec![None; original_len];
        for (new, &old) in kept.iter().enumerate() {
            old_to_new[old] = Some(new);
        }
        IndexMap { kept, old_to_new }
    }
}

/// Drops pruned Gaussians from the cloud and store, keeping order.
pub fn prune_cloud(
    cloud: &GaussianCloud,
    store: &FeatureStore,
) -> Result<(GaussianCloud, FeatureStore, IndexMap)> {
    store.check_count(cloud.len())?;
    let kept: Vec<usize> = (0..store.len()).filter(|&k| !store.is_pruned(k)).collect();
    Ok((
        cloud.select(&kept),
        store.select(&kept),
        IndexMap::from_kept(cloud.len(), kept),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::{Camera, Gaussian};
    use glam::{DMat3, DVec3};

    fn one_pixel_scene(views: usize) -> SceneBundle {
        let mut cloud = GaussianCloud::new(0);
        cloud.push(&Gaussian::isotropic([0.0, 0.0, 2.0], 2.0, 0.5, [0.5; 3]));
        // far outside every view
        cloud.push(&Gaussian::isotropic([0.0, 0.0, -50.0], 0.1, 0.5, [0.5; 3]));
        let cams = (0..views)
            .map(|v| Camera::new(v, 1, 1, 1.0, 1.0, 0.5, 0.5, DMat3::IDENTITY, DVec3::ZERO).unwrap())
            .collect();
        SceneBundle::new(cloud, cams, [0.0; 3]).unwrap()
    }

    #[test]
    fn constant_maps_give_the_constant() {
        let scene = one_pixel_scene(3);
        let f = [0.25f32, -1.5, 3.0];
        let maps = vec![FeatureMap::constant(1, 1, &f); 3];
        let cfg = BackprojectionConfig {
            normalize: false,
            ..Default::default()
        };
        let store = backproject(&scene, &maps, &cfg).unwrap();
        assert_eq!(store.row(0), &f);
        assert!(store.is_pruned(1));
        assert_eq!(store.row(1), &[0.0; 3]);
    }

    #[test]
    fn two_views_weighted_by_their_weight_sums() {
        // view 0 sees the Gaussian at α=0.5 on one pixel; view 1 renders 2x2
        // so the Gaussian covers four texels with smaller falloff weights
        let mut cloud = GaussianCloud::new(0);
        cloud.push(&Gaussian::isotropic([0.0, 0.0, 2.0], 1.0, 0.5, [0.5; 3]));
        let cam0 = Camera::new(0, 1, 1, 1.0, 1.0, 0.5, 0.5, DMat3::IDENTITY, DVec3::ZERO).unwrap();
        let cam1 = Camera::new(1, 2, 2, 2.0, 2.0, 1.0, 1.0, DMat3::IDENTITY, DVec3::ZERO).unwrap();
        let scene = SceneBundle::new(cloud, vec![cam0, cam1], [0.0; 3]).unwrap();

        // oracle: per-view weight sums from the fragment log
        let opts = RenderOptions {
            record_fragments: true,
            ..Default::default()
        };
        let weight_sum = |v: usize| -> f64 {
            crate::raster::render(&scene, v, &opts)
                .unwrap()
                .fragments
                .unwrap()
                .iter()
                .flatten()
                .map(|f| f.weight)
                .sum()
        };
        let (w1, w2) = (weight_sum(0), weight_sum(1));
        assert!(w1 > 0.0 && w2 > 0.0 && (w1 - w2).abs() > 1e-3);
        let (f1, f2) = ([1.0f32, 0.0], [0.0f32, 2.0]);
        let maps = vec![FeatureMap::constant(1, 1, &f1), FeatureMap::constant(2, 2, &f2)];
        let cfg = BackprojectionConfig {
            normalize: false,
            ..Default::default()
        };
        let store = backproject(&scene, &maps, &cfg).unwrap();
        let expect = [
            (w1 * 1.0) / (w1 + w2),
            (w2 * 2.0) / (w1 + w2),
        ];
        for (&got, want) in store.row(0).iter().zip(expect) {
            assert!((got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn accumulated_mode_keeps_raw_sums() {
        let scene = one_pixel_scene(2);
        let maps = vec![FeatureMap::constant(1, 1, &[2.0]); 2];
        let cfg = BackprojectionConfig {
            mode: BackprojectionMode::Accumulated,
            normalize: false,
            ..Default::default()
        };
        let store = backproject(&scene, &maps, &cfg).unwrap();
        // α = 0.5 per view, two views
        assert!((store.row(0)[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn count_and_dimension_mismatches() {
        let scene = one_pixel_scene(2);
        let cfg = BackprojectionConfig::default();
        assert!(backproject(&scene, &[FeatureMap::zeros(1, 1, 2)], &cfg).is_err());
        let mixed = vec![FeatureMap::zeros(1, 1, 2), FeatureMap::zeros(1, 1, 3)];
        assert!(matches!(backproject(&scene, &mixed, &cfg), Err(Error::Dimension(_))));
        let bad = BackprojectionConfig {
            prune_epsilon: f64::NAN,
            ..cfg
        };
        assert!(backproject(&scene, &[FeatureMap::zeros(1, 1, 2), FeatureMap::zeros(1, 1, 2)], &bad).is_err());
    }

    #[test]
    fn prune_cloud_edge_cases() {
        let scene = one_pixel_scene(1);
        let none = FeatureStore::zeros(2, 1);
        let (c, s, map) = prune_cloud(&scene.cloud, &none).unwrap();
        assert_eq!((c.len(), s.len()), (2, 2));
        assert_eq!(map.kept, vec![0, 1]);

        let all = FeatureStore::from_rows(2, 1, vec![0.0; 2], vec![true, true]).unwrap();
        let (c, s, map) = prune_cloud(&scene.cloud, &all).unwrap();
        assert!(c.is_empty() && s.is_empty());
        assert_eq!(map.old_to_new, vec![None, None]);

        assert!(prune_cloud(&scene.cloud, &FeatureStore::zeros(3, 1)).is_err());
    }

    #[test]
    fn mode_parses() {
        assert_eq!("accumulated".parse::<BackprojectionMode>().unwrap(), BackprojectionMode::Accumulated);
        assert!("mean".parse::<BackprojectionMode>().is_err());
    }
}
