//! Tile-based front-to-back rasterization.
//!
//! One blending loop drives everything: color images, rendered feature
//! images, per-pixel fragment logs and the per-Gaussian weight sums used by
//! back-projection. Each blended fragment contributes with weight
//! `w = α·T`, where `α = min(α_max, o·exp(-½ dᵀ Σ⁻¹ d))` and `T` is the
//! transmittance left by the Gaussians in front of it. Because the weight is
//! the derivative of the pixel color with respect to the Gaussian's color,
//! summing it is the same as back-propagating a unit gradient, but done in the
//! forward pass.
//!
//! Per pixel, Gaussians are visited in ascending `(depth, index)` order.
//! Tiles only restrict which Gaussians are considered; every Gaussian is
//! tested against its own 3σ pixel rectangle, so results do not depend on the
//! tile size.

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::maps::FeatureMap;
use crate::scene_io::{FeatureStore, SceneBundle};
use crate::splat::{project_gaussian, Camera, GaussianCloud, ProjectedGaussian, ProjectionParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub tile_size: u32,
    /// Stop blending a pixel once its transmittance drops below this.
    /// Zero disables early termination.
    pub early_stop: f64,
    pub alpha_max: f64,
    /// Fragments with α below this are skipped.
    pub alpha_min: f64,
    pub projection: ProjectionParams,
    /// Keep every `(gaussian, weight)` pair per pixel.
    pub record_fragments: bool,
    pub exec: Execution,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            tile_size: 16,
            early_stop: 1e-4,
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            projection: ProjectionParams::default(),
            record_fragments: false,
            exec: Execution::default(),
        }
    }
}

impl RenderOptions {
    /// Settings that match [`oracle_render`] exactly: no early termination.
    pub fn exact() -> Self {
        RenderOptions {
            early_stop: 0.0,
            ..Default::default()
        }
    }
}

/// One blended Gaussian at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub gaussian: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// `H × W × 3`, background composited.
    pub color: Vec<f32>,
    /// Transmittance left after the last blended Gaussian, `H × W`.
    pub transmittance: Vec<f32>,
    /// Blended features (background feature is zero).
    pub features: Option<FeatureMap>,
    /// Per pixel, in blend order.
    pub fragments: Option<Vec<Vec<Fragment>>>,
}

impl RenderOutput {
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = 3 * (y * self.width + x);
        [self.color[o], self.color[o + 1], self.color[o + 2]]
    }
}

/// Per-Gaussian sums of blending weights (`Σ α·T`), optionally with the
/// weighted feature sums (`Σ F·α·T`). Accumulators are `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSink {
    count: usize,
    dim: Option<usize>,
    numerators: Vec<f64>,
    denominators: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkMode {
    Scalar,
    Feature { dim: usize },
}

impl WeightSink {
    /// Weight sums only.
    pub fn scalar(count: usize) -> Self {
        WeightSink {
            count,
            dim: None,
            numerators: Vec::new(),
            denominators: vec![0.0; count],
        }
    }

    /// Weight sums plus `dim`-wide weighted feature sums.
    pub fn features(count: usize, dim: usize) -> Self {
        WeightSink {
            count,
            dim: Some(dim),
            numerators: vec![0.0; count * dim],
            denominators: vec![0.0; count],
        }
    }

    pub fn mode(&self) -> SinkMode {
        match self.dim {
            None => SinkMode::Scalar,
            Some(dim) => SinkMode::Feature { dim },
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn denominators(&self) -> &[f64] {
        &self.denominators
    }

    /// Weighted feature sum of Gaussian `k`; empty in scalar mode.
    pub fn numerator(&self, k: usize) -> &[f64] {
        match self.dim {
            Some(d) => &self.numerators[k * d..(k + 1) * d],
            None => &[],
        }
    }

    /// Adds another sink of the same shape.
    pub fn merge(&mut self, other: &WeightSink) -> Result<()> {
        if self.count != other.count || self.dim != other.dim {
            return Err(Error::SinkMode(format!(
                "cannot merge {:?}x{} into {:?}x{}",
                other.mode(),
                other.count,
                self.mode(),
                self.count
            )));
        }
        for (a, b) in self.denominators.iter_mut().zip(&other.denominators) {
            *a += b;
        }
        for (a, b) in self.numerators.iter_mut().zip(&other.numerators) {
            *a += b;
        }
        Ok(())
    }
}

/// Projected Gaussians of one view binned into depth-sorted tile lists.
struct Binned {
    width: u32,
    height: u32,
    tile: u32,
    tiles_x: u32,
    splats: Vec<ProjectedGaussian>,
    /// Per tile, positions into `splats` in blend order.
    lists: Vec<Vec<u32>>,
}

impl Binned {
    fn tile_count(&self) -> usize {
        self.lists.len()
    }

    fn tile_origin(&self, t: usize) -> (u32, u32) {
        let t = t as u32;
        ((t % self.tiles_x) * self.tile, (t / self.tiles_x) * self.tile)
    }

    fn tile_extent(&self, t: usize) -> (u32, u32, u32, u32) {
        let (x0, y0) = self.tile_origin(t);
        (x0, y0, (x0 + self.tile).min(self.width), (y0 + self.tile).min(self.height))
    }
}

fn bin(cloud: &GaussianCloud, camera: &Camera, opts: &RenderOptions) -> Binned {
    let tile = opts.tile_size.max(1);
    let (width, height) = (camera.width, camera.height);
    let tiles_x = width.div_ceil(tile);
    let tiles_y = height.div_ceil(tile);
    let splats: Vec<ProjectedGaussian> = exec::map_range(opts.exec, cloud.len(), |k| {
        project_gaussian(cloud, k, camera, &opts.projection)
    })
    .into_iter()
    .flatten()
    .collect();

    let mut lists = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for (i, s) in splats.iter().enumerate() {
        for ty in s.rect.y0 / tile..=s.rect.y1 / tile {
            for tx in s.rect.x0 / tile..=s.rect.x1 / tile {
                lists[(ty * tiles_x + tx) as usize].push(i as u32);
            }
        }
    }
    exec::for_each_chunk_mut(opts.exec, &mut lists, 1, |_, chunk| {
        let list = &mut chunk[0];
        list.sort_by(|&a, &b| {
            let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
            sa.depth.total_cmp(&sb.depth).then(sa.index.cmp(&sb.index))
        });
    });
    Binned {
        width,
        height,
        tile,
        tiles_x,
        splats,
        lists,
    }
}

/// Blends every pixel of tile `t`. `on_fragment(pixel, list_pos, splat,
/// weight)` sees each contribution in order; `pixel` is the offset inside
/// the tile (row-major over the tile's clipped extent). Returns the final
/// transmittance per tile pixel.
fn blend_tile<F>(b: &Binned, t: usize, opts: &RenderOptions, mut on_fragment: F) -> Vec<f64>
where
    F: FnMut(usize, usize, &ProjectedGaussian, f64),
{
    let (x0, y0, x1, y1) = b.tile_extent(t);
    let list = &b.lists[t];
    let mut t_final = Vec::with_capacity(((x1 - x0) * (y1 - y0)) as usize);
    for y in y0..y1 {
        for x in x0..x1 {
            let pixel = t_final.len();
            let mut trans = 1.0f64;
            for (pos, &si) in list.iter().enumerate() {
                let s = &b.splats[si as usize];
                let Some(a) = s.falloff_alpha(x, y) else {
                    continue;
                };
                let alpha = a.min(opts.alpha_max);
                if alpha < opts.alpha_min {
                    continue;
                }
                on_fragment(pixel, pos, s, alpha * trans);
                trans *= 1.0 - alpha;
                if trans < opts.early_stop {
                    break;
                }
            }
            t_final.push(trans);
        }
    }
    t_final
}

struct TileImage {
    color: Vec<f64>,
    trans: Vec<f64>,
    features: Vec<f64>,
    fragments: Vec<Vec<Fragment>>,
}

/// Renders `cloud` from an arbitrary camera. `store` adds a feature image.
pub fn render_camera(
    cloud: &GaussianCloud,
    camera: &Camera,
    background: [f64; 3],
    store: Option<&FeatureStore>,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    if let Some(s) = store {
        if s.len() != cloud.len() {
            return Err(Error::Dimension(format!(
                "feature store has {} rows, cloud has {} Gaussians",
                s.len(),
                cloud.len()
            )));
        }
    }
    let dim = store.map_or(0, |s| s.dim());
    let binned = bin(cloud, camera, opts);
    let tiles: Vec<TileImage> = exec::map_range(opts.exec, binned.tile_count(), |t| {
        let (x0, y0, x1, y1) = binned.tile_extent(t);
        let n = ((x1 - x0) * (y1 - y0)) as usize;
        let mut color = vec![0.0f64; 3 * n];
        let mut features = vec![0.0f64; dim * n];
        let mut fragments = if opts.record_fragments {
            vec![Vec::new(); n]
        } else {
            Vec::new()
        };
        let trans = blend_tile(&binned, t, opts, |p, _, s, w| {
            for c in 0..3 {
                color[3 * p + c] += s.rgb[c] * w;
            }
            if let Some(store) = store {
                let row = store.row(s.index as usize);
                for (acc, &f) in features[p * dim..(p + 1) * dim].iter_mut().zip(row) {
                    *acc += f as f64 * w;
                }
            }
            if opts.record_fragments {
                fragments[p].push(Fragment {
                    gaussian: s.index,
                    weight: w,
                });
            }
        });
        TileImage {
            color,
            trans,
            features,
            fragments,
        }
    });

    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut color = vec![0.0f32; 3 * w * h];
    let mut transmittance = vec![0.0f32; w * h];
    let mut features = store.map(|_| FeatureMap::zeros(h, w, dim));
    let mut fragments = opts.record_fragments.then(|| vec![Vec::new(); w * h]);
    for (t, mut tile) in tiles.into_iter().enumerate() {
        let (x0, y0, x1, y1) = binned.tile_extent(t);
        let tw = (x1 - x0) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = (y - y0) as usize * tw + (x - x0) as usize;
                let o = y as usize * w + x as usize;
                let tr = tile.trans[p];
                for c in 0..3 {
                    color[3 * o + c] = (tile.color[3 * p + c] + tr * background[c]) as f32;
                }
                transmittance[o] = tr as f32;
                if let Some(fm) = features.as_mut() {
                    let src = &tile.features[p * dim..(p + 1) * dim];
                    for (d, s) in fm.pixel_mut(x as usize, y as usize).iter_mut().zip(src) {
                        *d = *s as f32;
                    }
                }
                if let Some(fr) = fragments.as_mut() {
                    fr[o] = std::mem::take(&mut tile.fragments[p]);
                }
            }
        }
    }
    Ok(RenderOutput {
        width: w,
        height: h,
        color,
        transmittance,
        features,
        fragments,
    })
}

/// Renders the color image of one scene view.
pub fn render(scene: &SceneBundle, view: usize, opts: &RenderOptions) -> Result<RenderOutput> {
    let cam = scene.camera(view)?;
    render_camera(&scene.cloud, cam, scene.background, None, opts)
}

/// Renders color plus the blended per-Gaussian features of `store`.
pub fn render_features(
    scene: &SceneBundle,
    view: usize,
    store: &FeatureStore,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    let cam = scene.camera(view)?;
    render_camera(&scene.cloud, cam, scene.background, Some(store), opts)
}

/// Camera used for weight accumulation against a `width × height` feature
/// map: same pose, intrinsics rescaled. Rejects maps whose aspect ratio
/// differs from the camera's by more than a pixel of rounding.
pub fn feature_camera(camera: &Camera, width: usize, height: usize) -> Result<Camera> {
    if width == 0 || height == 0 {
        return Err(Error::Resolution("feature map has zero size".into()));
    }
    let expected_h = width as f64 * camera.height as f64 / camera.width as f64;
    let expected_w = height as f64 * camera.width as f64 / camera.height as f64;
    if (height as f64 - expected_h).abs() > 1.0 && (width as f64 - expected_w).abs() > 1.0 {
        return Err(Error::Resolution(format!(
            "feature map {width}x{height} does not match the {}x{} aspect of view {}",
            camera.width, camera.height, camera.view
        )));
    }
    Ok(camera.rescaled(width as u32, height as u32))
}

/// Upper bound on `f64` accumulator slots held by in-flight tiles.
const TILE_BATCH_SLOTS: usize = 1 << 23;

/// Adds `α·T` of every blended fragment of one view to `sink` (and
/// `F·α·T` when a feature map is given). Rendering happens at the feature
/// map's resolution, or the camera's when there is none. Tile partials are
/// merged in tile order, so the sums do not depend on the thread count.
pub fn accumulate_weights(
    scene: &SceneBundle,
    view: usize,
    feature_map: Option<&FeatureMap>,
    sink: &mut WeightSink,
    opts: &RenderOptions,
) -> Result<()> {
    let cam = scene.camera(view)?;
    accumulate_weights_camera(&scene.cloud, cam, feature_map, sink, opts)
}

/// [`accumulate_weights`] for an explicit camera.
pub fn accumulate_weights_camera(
    cloud: &GaussianCloud,
    camera: &Camera,
    feature_map: Option<&FeatureMap>,
    sink: &mut WeightSink,
    opts: &RenderOptions,
) -> Result<()> {
    if sink.count != cloud.len() {
        return Err(Error::Dimension(format!(
            "sink holds {} Gaussians, cloud has {}",
            sink.count,
            cloud.len()
        )));
    }
    let dim = match (sink.mode(), feature_map) {
        (SinkMode::Scalar, None) => 0,
        (SinkMode::Feature { dim }, Some(fm)) if fm.dim == dim => dim,
        (SinkMode::Feature { dim }, Some(fm)) => {
            return Err(Error::Dimension(format!(
                "feature map has D={}, sink expects D={dim}",
                fm.dim
            )))
        }
        (mode, fm) => {
            return Err(Error::SinkMode(format!(
                "{mode:?} sink used {} a feature map",
                if fm.is_some() { "with" } else { "without" }
            )))
        }
    };
    let camera = match feature_map {
        Some(fm) => feature_camera(camera, fm.width, fm.height)?,
        None => *camera,
    };
    let binned = bin(cloud, &camera, opts);

    let mut start = 0;
    while start < binned.tile_count() {
        let mut end = start;
        let mut slots = 0;
        while end < binned.tile_count() && (end == start || slots < TILE_BATCH_SLOTS) {
            slots += binned.lists[end].len() * (dim + 1);
            end += 1;
        }
        let partials: Vec<(Vec<f64>, Vec<f64>)> = exec::map_range(opts.exec, end - start, |i| {
            let t = start + i;
            let len = binned.lists[t].len();
            let mut den = vec![0.0f64; len];
            let mut num = vec![0.0f64; len * dim];
            let (x0, y0, x1, _) = binned.tile_extent(t);
            let tw = (x1 - x0) as usize;
            blend_tile(&binned, t, opts, |p, pos, _, w| {
                den[pos] += w;
                if let Some(fm) = feature_map {
                    let x = x0 as usize + p % tw;
                    let y = y0 as usize + p / tw;
                    let f = fm.pixel(x, y);
                    for (acc, &v) in num[pos * dim..(pos + 1) * dim].iter_mut().zip(f) {
                        *acc += v as f64 * w;
                    }
                }
            });
            (den, num)
        });
        for (i, (den, num)) in partials.into_iter().enumerate() {
            let list = &binned.lists[start + i];
            for (pos, &si) in list.iter().enumerate() {
                if den[pos] == 0.0 {
                    continue;
                }
                let k = binned.splats[si as usize].index as usize;
                sink.denominators[k] += den[pos];
                if dim > 0 {
                    let dst = &mut sink.numerators[k * dim..(k + 1) * dim];
                    for (a, b) in dst.iter_mut().zip(&num[pos * dim..(pos + 1) * dim]) {
                        *a += b;
                    }
                }
            }
        }
        start = end;
    }
    Ok(())
}

/// Brute-force reference renderer: per pixel, every projected Gaussian is
/// evaluated, the full list is sorted by depth, and blending runs to the end
/// with no early termination. Always records fragments. Meant for small
/// scenes in tests.
pub fn oracle_render(
    scene: &SceneBundle,
    view: usize,
    store: Option<&FeatureStore>,
    projection: &ProjectionParams,
) -> Result<RenderOutput> {
    let cam = scene.camera(view)?;
    let cloud = &scene.cloud;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let projected: Vec<ProjectedGaussian> = (0..cloud.len())
        .filter_map(|k| project_gaussian(cloud, k, cam, projection))
        .collect();
    let dim = store.map_or(0, |s| s.dim());
    let mut color = vec![0.0f32; 3 * w * h];
    let mut transmittance = vec![0.0f32; w * h];
    let mut features = store.map(|_| FeatureMap::zeros(h, w, dim));
    let mut fragments = vec![Vec::new(); w * h];
    let mut hits: Vec<(f64, u32, f64, [f64; 3])> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            hits.clear();
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for g in &projected {
                let r = g.rect;
                if (x as u32) < r.x0 || (x as u32) > r.x1 || (y as u32) < r.y0 || (y as u32) > r.y1 {
                    continue;
                }
                let (dx, dy) = (px - g.mean.x, py - g.mean.y);
                let q = g.conic[0] * dx * dx + 2.0 * g.conic[1] * dx * dy + g.conic[2] * dy * dy;
                if q < 0.0 {
                    continue;
                }
                let alpha = (g.opacity * (-0.5 * q).exp()).min(0.99);
                if alpha < 1.0 / 255.0 {
                    continue;
                }
                hits.push((g.depth, g.index, alpha, g.rgb));
            }
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut t = 1.0f64;
            let mut rgb = [0.0f64; 3];
            let mut feat = vec![0.0f64; dim];
            for &(_, k, alpha, c) in &hits {
                let wgt = alpha * t;
                for i in 0..3 {
                    rgb[i] += c[i] * wgt;
                }
                if let Some(s) = store {
                    for (acc, &f) in feat.iter_mut().zip(s.row(k as usize)) {
                        *acc += f as f64 * wgt;
                    }
                }
                fragments[y * w + x].push(Fragment {
                    gaussian: k,
                    weight: wgt,
                });
                t *= 1.0 - alpha;
            }
            let o = y * w + x;
            for i in 0..3 {
                color[3 * o + i] = (rgb[i] + t * scene.background[i]) as f32;
            }
            transmittance[o] = t as f32;
            if let Some(fm) = features.as_mut() {
                for (d, s) in fm.pixel_mut(x, y).iter_mut().zip(&feat) {
                    *d = *s as f32;
                }
            }
        }
    }
    Ok(RenderOutput {
        width: w,
        height: h,
        color,
        transmittance,
        features,
        fragments: Some(fragments),
    })
}
