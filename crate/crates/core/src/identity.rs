//! Identity codes for scene objects: one-hot codebooks, a jointly trained
//! embedding/decoder pair, back-projection of label images and grouping
//! metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::backproject::{BackprojectionConfig, BackprojectionMode, Backprojector};
use crate::error::{Error, Result};
use crate::exec;
use crate::maps::{FeatureMap, LabelImage};
use crate::scene_io::{FeatureStore, SceneBundle};

/// Class embeddings `E` (`n_classes × dim`) plus a linear decoder
/// `logits = W_dec · f + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCodebook {
    pub n_classes: usize,
    pub dim: usize,
    #[serde(rename = "E")]
    pub embeddings: Vec<Vec<f64>>,
    #[serde(rename = "W_dec")]
    pub decoder: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    #[serde(skip)]
    pub final_loss: Option<f64>,
}

impl IdentityCodebook {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::parse("identity codebook", m));
        if self.n_classes == 0 || self.dim == 0 {
            return bad("n_classes and dim must be positive".into());
        }
        for (name, m) in [("E", &self.embeddings), ("W_dec", &self.decoder)] {
            if m.len() != self.n_classes || m.iter().any(|r| r.len() != self.dim) {
                return bad(format!("{name} must be {} x {}", self.n_classes, self.dim));
            }
            if m.iter().flatten().any(|v| !v.is_finite()) {
                return bad(format!("{name} has non-finite entries"));
            }
        }
        if self.b.len() != self.n_classes || self.b.iter().any(|v| !v.is_finite()) {
            return bad(format!("b must hold {} finite values", self.n_classes));
        }
        Ok(())
    }

    pub fn embedding(&self, class: usize) -> &[f64] {
        &self.embeddings[class]
    }

    pub fn logits(&self, f: &[f64]) -> Vec<f64> {
        self.decoder
            .iter()
            .zip(&self.b)
            .map(|(w, b)| w.iter().zip(f).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect()
    }

    /// Highest-logit class; ties go to the lower index.
    pub fn decode(&self, f: &[f64]) -> usize {
        argmax(&self.logits(f))
    }

    /// Fraction of classes whose own embedding decodes to themselves.
    pub fn self_accuracy(&self) -> f64 {
        let ok = (0..self.n_classes)
            .filter(|&c| self.decode(&self.embeddings[c]) == c)
            .count();
        ok as f64 / self.n_classes as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("codebook serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: IdentityCodebook =
            serde_json::from_str(text).map_err(|e| Error::parse("identity codebook", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// One-hot codes: `E` is the first `n_classes` rows of the identity and the
/// decoder reads off the matching coordinate.
pub fn orthogonal_codes(n_classes: usize, dim: usize) -> Result<IdentityCodebook> {
    if n_classes > dim {
        return Err(Error::Capacity { n_classes, dim });
    }
    if n_classes == 0 {
        return Err(Error::InvalidArgument("n_classes must be positive".into()));
    }
    let eye: Vec<Vec<f64>> = (0..n_classes)
        .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    Ok(IdentityCodebook {
        n_classes,
        dim,
        embeddings: eye.clone(),
        decoder: eye,
        b: vec![0.0; n_classes],
        final_loss: Some(0.0),
    })
}

/// Row-major `n × d` parameters and scratch space for training.
struct Params {
    n: usize,
    d: usize,
    e: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Params {
    fn from_codebook(cb: &IdentityCodebook) -> Self {
        Params {
            n: cb.n_classes,
            d: cb.dim,
            e: cb.embeddings.concat(),
            w: cb.decoder.concat(),
            b: cb.b.clone(),
        }
    }

    fn write_back(&self, cb: &mut IdentityCodebook) {
        let rows = |m: &[f64]| m.chunks(self.d).map(<[f64]>::to_vec).collect();
        cb.embeddings = rows(&self.e);
        cb.decoder = rows(&self.w);
        cb.b = self.b.clone();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Writes `E·Eᵀ − I` into `m` and returns its Frobenius norm.
fn gram_residual(e: &[f64], n: usize, d: usize, m: &mut [f64]) -> f64 {
    let mut sq = 0.0;
    for i in 0..n {
        for j in i..n {
            let v = dot(&e[i * d..(i + 1) * d], &e[j * d..(j + 1) * d]) - if i == j { 1.0 } else { 0.0 };
            m[i * n + j] = v;
            m[j * n + i] = v;
            sq += if i == j { v * v } else { 2.0 * v * v };
        }
    }
    sq.sqrt()
}

/// Sets `ge` to the gradient of `‖E·Eᵀ − I‖_F`: `2 (E·Eᵀ − I) E / loss`,
/// zero at the minimum. Returns the loss.
fn orthogonality_terms(e: &[f64], n: usize, d: usize, m: &mut [f64], ge: &mut [f64]) -> f64 {
    let loss = gram_residual(e, n, d, m);
    ge.fill(0.0);
    if loss > 0.0 {
        let c = 2.0 / loss;
        for i in 0..n {
            let gi = &mut ge[i * d..(i + 1) * d];
            for j in 0..n {
                let mij = c * m[i * n + j];
                for (g, x) in gi.iter_mut().zip(&e[j * d..(j + 1) * d]) {
                    *g += mij * x;
                }
            }
        }
    }
    loss
}

/// `‖E·Eᵀ − I‖_F`.
pub fn orthogonality_loss(e: &[Vec<f64>]) -> f64 {
    let (n, d) = (e.len(), e.first().map_or(0, Vec::len));
    gram_residual(&e.concat(), n, d, &mut vec![0.0; n * n])
}

/// Gradient of [`orthogonality_loss`] with respect to `E`:
/// `2 (E·Eᵀ − I) E / ‖E·Eᵀ − I‖_F`, taken as zero at the minimum.
pub fn orthogonality_gradient(e: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, d) = (e.len(), e.first().map_or(0, Vec::len));
    let mut g = vec![0.0; n * d];
    orthogonality_terms(&e.concat(), n, d, &mut vec![0.0; n * n], &mut g);
    g.chunks(d.max(1)).map(<[f64]>::to_vec).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// `E` starts at the first rows of the identity (requires
    /// `n_classes ≤ dim`), `W_dec = E`.
    Identity,
    /// Gaussian `E` with row scale `1/√dim`, small Gaussian `W_dec`.
    #[default]
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub init: InitScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            lr: 0.05,
            seed: 0,
            init: InitScheme::Random,
        }
    }
}

/// Loss terms at one parameter setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub classification: f64,
    pub orthogonality: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.classification + self.orthogonality
    }
}

struct Grads {
    e: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
    /// `n × n` scratch: Gram residual, then logit gradients.
    m: Vec<f64>,
}

impl Grads {
    fn new(n: usize, d: usize) -> Self {
        Grads {
            e: vec![0.0; n * d],
            w: vec![0.0; n * d],
            b: vec![0.0; n],
            m: vec![0.0; n * n],
        }
    }
}

/// Mean cross-entropy over one sample per class (input `E_y`, label `y`)
/// plus the orthogonality term; fills `g` with the gradients.
fn loss_and_grads(p: &Params, g: &mut Grads) -> LossBreakdown {
    let (n, d) = (p.n, p.d);
    let orthogonality = orthogonality_terms(&p.e, n, d, &mut g.m, &mut g.e);
    let inv_n = 1.0 / n as f64;
    let mut ce = 0.0;
    // logits, then dL/dlogits in place
    let z = &mut g.m;
    for y in 0..n {
        let x = &p.e[y * d..(y + 1) * d];
        let row = &mut z[y * n..(y + 1) * n];
        for (j, zj) in row.iter_mut().enumerate() {
            *zj = dot(x, &p.w[j * d..(j + 1) * d]) + p.b[j];
        }
        let zmax = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let zy = row[y];
        let mut sum = 0.0;
        for zj in row.iter_mut() {
            *zj = (*zj - zmax).exp();
            sum += *zj;
        }
        ce += (sum.ln() + zmax - zy) * inv_n;
        for (j, zj) in row.iter_mut().enumerate() {
            *zj = (*zj / sum - if j == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    g.w.fill(0.0);
    g.b.fill(0.0);
    for y in 0..n {
        let x = &p.e[y * d..(y + 1) * d];
        for j in 0..n {
            let dz = z[y * n + j];
            g.b[j] += dz;
            let wj = &p.w[j * d..(j + 1) * d];
            for k in 0..d {
                g.w[j * d + k] += dz * x[k];
                g.e[y * d + k] += dz * wj[k];
            }
        }
    }
    LossBreakdown {
        classification: ce,
        orthogonality,
    }
}

/// Loss of a codebook without updating it.
pub fn evaluate_loss(cb: &IdentityCodebook) -> LossBreakdown {
    loss_and_grads(&Params::from_codebook(cb), &mut Grads::new(cb.n_classes, cb.dim))
}

fn initial_codebook(n: usize, d: usize, cfg: &TrainConfig) -> Result<IdentityCodebook> {
    match cfg.init {
        InitScheme::Identity => orthogonal_codes(n, d).map(|mut c| {
            c.final_loss = None;
            c
        }),
        InitScheme::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let e_dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
            let w_dist = Normal::new(0.0, 0.01).expect("valid normal");
            let embeddings = (0..n)
                .map(|_| (0..d).map(|_| e_dist.sample(&mut rng)).collect())
                .collect();
            let decoder = (0..n)
                .map(|_| (0..d).map(|_| w_dist.sample(&mut rng)).collect())
                .collect();
            Ok(IdentityCodebook {
                n_classes: n,
                dim: d,
                embeddings,
                decoder,
                b: vec![0.0; n],
                final_loss: None,
            })
        }
    }
}

/// Full-batch gradient descent on cross-entropy plus `‖E·Eᵀ − I‖_F`,
/// embedding and decoder updated jointly. Deterministic for a given config.
pub fn train_contrastive(n_classes: usize, dim: usize, cfg: &TrainConfig) -> Result<IdentityCodebook> {
    if n_classes < 2 || dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs n_classes >= 2 and dim >= 2, got {n_classes} and {dim}"
        )));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {} must be positive", cfg.lr)));
    }
    let mut cb = initial_codebook(n_classes, dim, cfg)?;
    let mut p = Params::from_codebook(&cb);
    let mut g = Grads::new(n_classes, dim);
    let mut last = f64::NAN;
    for epoch in 0..=cfg.epochs {
        last = loss_and_grads(&p, &mut g).total();
        if !last.is_finite() {
            return Err(Error::Divergence { epoch, loss: last });
        }
        if epoch == cfg.epochs {
            break;
        }
        let step = |p: &mut [f64], g: &[f64]| p.iter_mut().zip(g).for_each(|(p, g)| *p -= cfg.lr * g);
        step(&mut p.e, &g.e);
        step(&mut p.w, &g.w);
        step(&mut p.b, &g.b);
    }
    p.write_back(&mut cb);
    cb.final_loss = Some(last);
    Ok(cb)
}

/// A view's per-pixel class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledView {
    pub view: usize,
    pub labels: LabelImage,
}

/// Feature map holding `E[label]` per pixel, zero where unlabeled.
pub fn label_feature_map(labels: &LabelImage, codebook: &IdentityCodebook) -> Result<FeatureMap> {
    let mut map = FeatureMap::zeros(labels.height, labels.width, codebook.dim);
    for (i, &l) in labels.data.iter().enumerate() {
        if l < 0 {
            continue;
        }
        let l = l as usize;
        if l >= codebook.n_classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} at pixel ({}, {}) exceeds codebook size {}",
                i % labels.width,
                i / labels.width,
                codebook.n_classes
            )));
        }
        let px = &mut map.data[i * codebook.dim..(i + 1) * codebook.dim];
        for (o, &v) in px.iter_mut().zip(&codebook.embeddings[l]) {
            *o = v as f32;
        }
    }
    Ok(map)
}

/// Back-projects identity codes from labeled views. Any mode in `config`
/// other than expected is overridden.
pub fn encode_scene(
    scene: &SceneBundle,
    labeled_views: &[LabeledView],
    codebook: &IdentityCodebook,
    config: &BackprojectionConfig,
) -> Result<FeatureStore> {
    let config = BackprojectionConfig {
        mode: BackprojectionMode::Expected,
        ..*config
    };
    config.validate()?;
    if labeled_views.is_empty() {
        return Err(Error::InvalidArgument("no labeled views".into()));
    }
    let mut bp = Backprojector::new(scene.cloud.len(), codebook.dim);
    for lv in labeled_views {
        scene.camera(lv.view)?;
        let map = label_feature_map(&lv.labels, codebook)?;
        bp.add_view(scene, lv.view, &map, &config.render)?;
    }
    Ok(bp.finish(&config))
}

/// Decoder label per Gaussian; pruned Gaussians and features with norm
/// below `reject_threshold` get `-1`.
pub fn classify_store(store: &FeatureStore, codebook: &IdentityCodebook, reject_threshold: f64) -> Result<Vec<i32>> {
    check_dim(store.dim(), codebook)?;
    Ok(exec::map_range(Default::default(), store.len(), |k| {
        if store.is_pruned(k) {
            -1
        } else {
            classify_one(store.row(k), codebook, reject_threshold)
        }
    }))
}

/// Default norm below which a rendered pixel is treated as background.
pub const DEFAULT_REJECT_THRESHOLD: f64 = 0.1;

/// Decoder label per rendered pixel, `-1` where the feature norm is below
/// `reject_threshold`.
pub fn classify_pixels(
    features: &FeatureMap,
    codebook: &IdentityCodebook,
    reject_threshold: f64,
) -> Result<LabelImage> {
    check_dim(features.dim, codebook)?;
    let d = features.dim;
    let data = exec::map_range(Default::default(), features.width * features.height, |i| {
        classify_one(&features.data[i * d..(i + 1) * d], codebook, reject_threshold)
    });
    Ok(LabelImage {
        width: features.width,
        height: features.height,
        data,
    })
}

fn check_dim(dim: usize, codebook: &IdentityCodebook) -> Result<()> {
    if dim != codebook.dim {
        return Err(Error::Dimension(format!(
            "features have D={dim}, codebook has D={}",
            codebook.dim
        )));
    }
    Ok(())
}

fn classify_one(f: &[f32], codebook: &IdentityCodebook, reject_threshold: f64) -> i32 {
    let f: Vec<f64> = f.iter().map(|&v| v as f64).collect();
    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < reject_threshold {
        return -1;
    }
    codebook.decode(&f) as i32
}

/// Mean IoU over `class_ids`, skipping classes absent from both images.
/// Returns `None` when every class was skipped.
pub fn grouping_miou(pred: &LabelImage, truth: &LabelImage, class_ids: &[i32]) -> Result<Option<f64>> {
    if (pred.width, pred.height) != (truth.width, truth.height) {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.width, pred.height, truth.width, truth.height
        )));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for &c in class_ids {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            inter += (p == c && t == c) as usize;
            union += (p == c || t == c) as usize;
        }
        if union > 0 {
            total += inter as f64 / union as f64;
            counted += 1;
        }
    }
    Ok((counted > 0).then(|| total / counted as f64))
}
