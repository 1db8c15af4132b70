//! Similarity queries over per-Gaussian and rendered features: 3D and 2D
//! segmentation, scene edits, kNN label transfer and mask metrics.

use crate::backproject::IndexMap;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::maps::{FeatureMap, Mask};
use crate::scene_io::FeatureStore;
use crate::splat::GaussianCloud;

/// Norms below this are treated as zero; such vectors have similarity 0.
pub const ZERO_NORM: f64 = 1e-12;

/// Cosine similarity, 0 when either vector is (numerically) zero.
pub fn similarity(f: &[f32], q: &[f32]) -> Result<f64> {
    if f.len() != q.len() {
        return Err(Error::Dimension(format!(
            "similarity between {}- and {}-dim vectors",
            f.len(),
            q.len()
        )));
    }
    let (mut dot, mut nf, mut nq) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in f.iter().zip(q) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nf += a * a;
        nq += b * b;
    }
    let denom = nf.sqrt() * nq.sqrt();
    if nf.sqrt() < ZERO_NORM || nq.sqrt() < ZERO_NORM {
        return Ok(0.0);
    }
    Ok((dot / denom).clamp(-1.0, 1.0))
}

/// A positive prompt, optional negatives, and the acceptance threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub positive: Vec<f32>,
    pub negatives: Vec<Vec<f32>>,
    pub theta: f64,
    /// Members must also score higher on the positive than on every negative.
    pub require_argmax: bool,
}

impl QuerySpec {
    /// `require_argmax` defaults to on whenever negatives are given.
    pub fn new(positive: Vec<f32>, negatives: Vec<Vec<f32>>, theta: f64) -> Self {
        let require_argmax = !negatives.is_empty();
        QuerySpec {
            positive,
            negatives,
            theta,
            require_argmax,
        }
    }

    pub fn dim(&self) -> usize {
        self.positive.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.positive.len() != dim {
            return Err(Error::Dimension(format!(
                "positive prompt has {} values, features have {dim}",
                self.positive.len()
            )));
        }
        if let Some(n) = self.negatives.iter().find(|n| n.len() != dim) {
            return Err(Error::Dimension(format!(
                "negative prompt has {} values, features have {dim}",
                n.len()
            )));
        }
        if self.positive.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidArgument("positive prompt is all-zero".into()));
        }
        if self.theta.is_nan() {
            return Err(Error::InvalidArgument("theta is NaN".into()));
        }
        Ok(())
    }

    fn uses_negatives(&self) -> bool {
        self.require_argmax && !self.negatives.is_empty()
    }

    #[inline]
    fn accepts(&self, positive: f32, max_negative: f32) -> bool {
        (positive as f64) > self.theta && (!self.uses_negatives() || positive > max_negative)
    }
}

/// Segmented Gaussian indices plus every Gaussian's positive-prompt score.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    /// Ascending.
    pub indices: Vec<usize>,
    pub scores: Vec<f32>,
    pub spec: QuerySpec,
}

impl SegmentationResult {
    pub fn member_count(&self) -> usize {
        self.indices.len()
    }

    /// Counts of scores in `bins` equal-width bins over [-1, 1].
    pub fn histogram(&self, bins: usize) -> Vec<u64> {
        let mut h = vec![0u64; bins];
        for &s in &self.scores {
            let t = ((s as f64 + 1.0) / 2.0 * bins as f64).floor();
            let b = (t.max(0.0) as usize).min(bins - 1);
            h[b] += 1;
        }
        h
    }

    pub fn membership(&self) -> Vec<bool> {
        let mut m = vec![false; self.scores.len()];
        for &k in &self.indices {
            m[k] = true;
        }
        m
    }
}

fn unit(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if n < ZERO_NORM {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| (x as f64 / n) as f32).collect()
}

/// `(row·q, row·row)` with eight independent lanes so the loop vectorizes.
#[inline]
fn dot_and_norm(row: &[f32], q: &[f32]) -> (f32, f32) {
    let mut dot = [0.0f32; 8];
    let mut nrm = [0.0f32; 8];
    let rc = row.chunks_exact(8);
    let qc = q.chunks_exact(8);
    let (rr, qr) = (rc.remainder(), qc.remainder());
    for (r, q) in rc.zip(qc) {
        for i in 0..8 {
            dot[i] += r[i] * q[i];
            nrm[i] += r[i] * r[i];
        }
    }
    let mut d: f32 = dot.iter().sum();
    let mut n: f32 = nrm.iter().sum();
    for (a, b) in rr.iter().zip(qr) {
        d += a * b;
        n += a * a;
    }
    (d, n)
}

#[inline]
fn dot(row: &[f32], q: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let rc = row.chunks_exact(8);
    let qc = q.chunks_exact(8);
    let (rr, qr) = (rc.remainder(), qc.remainder());
    for (r, q) in rc.zip(qc) {
        for i in 0..8 {
            acc[i] += r[i] * q[i];
        }
    }
    acc.iter().sum::<f32>() + rr.iter().zip(qr).map(|(a, b)| a * b).sum::<f32>()
}

const ROW_BLOCK: usize = 4096;

/// Positive-prompt cosine and best negative cosine per row of a row-major
/// `rows × dim` matrix. `skip(row)` rows score 0 / -inf.
fn score_rows<S>(
    data: &[f32],
    dim: usize,
    spec: &QuerySpec,
    exec: Execution,
    skip: S,
) -> (Vec<f32>, Vec<f32>)
where
    S: Fn(usize) -> bool + Sync,
{
    let rows = data.len().checked_div(dim).unwrap_or(0);
    let pos = unit(&spec.positive);
    let negs: Vec<Vec<f32>> = if spec.uses_negatives() {
        spec.negatives.iter().map(|n| unit(n)).collect()
    } else {
        Vec::new()
    };
    let mut scores = vec![0.0f32; rows];
    let mut best_neg = vec![f32::NEG_INFINITY; rows];
    exec::for_each_chunk_pair_mut(
        exec,
        &mut scores,
        ROW_BLOCK,
        &mut best_neg,
        ROW_BLOCK,
        |block, sc, bn| {
            for i in 0..sc.len() {
                let k = block * ROW_BLOCK + i;
                if skip(k) {
                    continue;
                }
                let row = &data[k * dim..(k + 1) * dim];
                let (d, n2) = dot_and_norm(row, &pos);
                let norm = n2.sqrt();
                if (norm as f64) < ZERO_NORM {
                    if !negs.is_empty() {
                        bn[i] = 0.0;
                    }
                    continue;
                }
                sc[i] = (d / norm).clamp(-1.0, 1.0);
                for q in &negs {
                    bn[i] = bn[i].max((dot(row, q) / norm).clamp(-1.0, 1.0));
                }
            }
        },
    );
    (scores, best_neg)
}

/// Gaussians whose features match the query.
pub fn segment_3d(store: &FeatureStore, spec: &QuerySpec) -> Result<SegmentationResult> {
    segment_3d_exec(store, spec, Execution::default())
}

pub fn segment_3d_exec(
    store: &FeatureStore,
    spec: &QuerySpec,
    exec: Execution,
) -> Result<SegmentationResult> {
    spec.validate(store.dim())?;
    let (scores, best_neg) =
        score_rows(store.data(), store.dim(), spec, exec, |k| store.is_pruned(k));
    let indices = (0..store.len())
        .filter(|&k| !store.is_pruned(k) && spec.accepts(scores[k], best_neg[k]))
        .collect();
    Ok(SegmentationResult {
        indices,
        scores,
        spec: spec.clone(),
    })
}

/// Pixel mask of rendered features matching the query.
pub fn segment_2d(features: &FeatureMap, spec: &QuerySpec) -> Result<Mask> {
    spec.validate(features.dim)?;
    let (scores, best_neg) =
        score_rows(&features.data, features.dim, spec, Execution::default(), |_| false);
    Ok(Mask {
        width: features.width,
        height: features.height,
        data: scores
            .iter()
            .zip(&best_neg)
            .map(|(&s, &n)| spec.accepts(s, n))
            .collect(),
    })
}

/// Per-pixel positive-prompt cosine of rendered features.
pub fn similarity_map(features: &FeatureMap, spec: &QuerySpec) -> Result<Vec<f32>> {
    spec.validate(features.dim)?;
    let only_positive = QuerySpec {
        require_argmax: false,
        ..spec.clone()
    };
    Ok(score_rows(&features.data, features.dim, &only_positive, Execution::default(), |_| false).0)
}

fn edit(
    cloud: &GaussianCloud,
    store: &FeatureStore,
    result: &SegmentationResult,
    keep_members: bool,
) -> Result<(GaussianCloud, FeatureStore, IndexMap)> {
    store.check_count(cloud.len())?;
    if let Some(&bad) = result.indices.iter().find(|&&k| k >= cloud.len()) {
        return Err(Error::InvalidArgument(format!(
            "segment index {bad} out of range for {} Gaussians",
            cloud.len()
        )));
    }
    let kept: Vec<usize> = if keep_members {
        result.indices.clone()
    } else {
        let members = {
            let mut m = vec![false; cloud.len()];
            result.indices.iter().for_each(|&k| m[k] = true);
            m
        };
        (0..cloud.len()).filter(|&k| !members[k]).collect()
    };
    Ok((
        cloud.select(&kept),
        store.select(&kept),
        IndexMap::from_kept(cloud.len(), kept),
    ))
}

/// Keeps exactly the segmented Gaussians.
pub fn extract(
    cloud: &GaussianCloud,
    store: &FeatureStore,
    result: &SegmentationResult,
) -> Result<(GaussianCloud, FeatureStore, IndexMap)> {
    edit(cloud, store, result, true)
}

/// Removes the segmented Gaussians.
pub fn delete(
    cloud: &GaussianCloud,
    store: &FeatureStore,
    result: &SegmentationResult,
) -> Result<(GaussianCloud, FeatureStore, IndexMap)> {
    edit(cloud, store, result, false)
}

/// Labeled feature exemplars for kNN transfer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AffordanceSource {
    pub label_names: Vec<String>,
    pub exemplars: Vec<Exemplar>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Exemplar {
    pub label: usize,
    pub feature: Vec<f32>,
}

impl AffordanceSource {
    pub fn validate(&self) -> Result<usize> {
        let first = self
            .exemplars
            .first()
            .ok_or_else(|| Error::InvalidArgument("affordance source has no exemplars".into()))?;
        let dim = first.feature.len();
        let mut seen = vec![false; self.label_names.len()];
        for (i, e) in self.exemplars.iter().enumerate() {
            if e.feature.len() != dim {
                return Err(Error::Dimension(format!("exemplar {i} has {} values, expected {dim}", e.feature.len())));
            }
            *seen.get_mut(e.label).ok_or_else(|| {
                Error::InvalidArgument(format!("exemplar {i} has undeclared label {}", e.label))
            })? = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::InvalidArgument(format!(
                "label '{}' has no exemplar",
                self.label_names[missing]
            )));
        }
        Ok(dim)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: AffordanceSource =
            serde_json::from_str(text).map_err(|e| Error::parse("affordance source", e.to_string()))?;
        s.validate()?;
        Ok(s)
    }
}

/// Label returned for pruned or rejected Gaussians.
pub const BACKGROUND: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnOptions {
    pub k: usize,
    /// Gaussians whose best exemplar similarity is below this become
    /// background.
    pub background_threshold: f64,
    pub exec: Execution,
}

impl Default for KnnOptions {
    fn default() -> Self {
        KnnOptions {
            k: 5,
            background_threshold: 0.0,
            exec: Execution::default(),
        }
    }
}

/// Majority vote over the `k` most cosine-similar exemplars. Neighbors are
/// ranked by similarity, then exemplar index; vote ties go to the higher
/// summed similarity, then the lower label.
pub fn knn_transfer(store: &FeatureStore, source: &AffordanceSource, opts: &KnnOptions) -> Result<Vec<i32>> {
    let dim = source.validate()?;
    if dim != store.dim() {
        return Err(Error::Dimension(format!(
            "exemplars have {dim} values, store has {}",
            store.dim()
        )));
    }
    let k = opts.k;
    if k == 0 || k > source.exemplars.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={}",
            source.exemplars.len()
        )));
    }
    let n_labels = source.label_names.len();
    Ok(exec::map_range(opts.exec, store.len(), |g| {
        if store.is_pruned(g) {
            return BACKGROUND;
        }
        let row = store.row(g);
        // best k as (similarity, exemplar), kept sorted best-first
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for (i, e) in source.exemplars.iter().enumerate() {
            let s = similarity(row, &e.feature).expect("dimensions checked");
            if best.len() == k && s <= best[k - 1].0 {
                continue;
            }
            let at = best.partition_point(|&(bs, _)| bs >= s);
            best.insert(at, (s, i));
            best.truncate(k);
        }
        if best[0].0 < opts.background_threshold {
            return BACKGROUND;
        }
        let mut votes = vec![(0usize, 0.0f64); n_labels];
        for &(s, i) in &best {
            let v = &mut votes[source.exemplars[i].label];
            v.0 += 1;
            v.1 += s;
        }
        let mut winner = 0;
        for l in 1..n_labels {
            let (c, s) = votes[l];
            let (wc, ws) = votes[winner];
            if c > wc || (c == wc && s > ws) {
                winner = l;
            }
        }
        winner as i32
    }))
}

/// `(IoU, recall)` of a predicted mask against ground truth; each is 1 when
/// its denominator is empty.
pub fn mask_metrics(pred: &Mask, truth: &Mask) -> Result<(f64, f64)> {
    if (pred.width, pred.height) != (truth.width, truth.height) {
        return Err(Error::Dimension(format!(
            "mask {}x{} vs truth {}x{}",
            pred.width, pred.height, truth.width, truth.height
        )));
    }
    let (mut inter, mut union, mut t) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&truth.data) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
        t += g as usize;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    Ok((ratio(inter, union), ratio(inter, t)))
}
