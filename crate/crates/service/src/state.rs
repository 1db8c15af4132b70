use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use tokio::sync::OnceCell;

use splatfield_core::query::{delete, extract, similarity_map, QuerySpec, SegmentationResult};
use splatfield_core::raster::{render_camera, RenderOptions};
use splatfield_core::scene_io::{encode_gray_png, encode_rgb_png};
use splatfield_core::{FeatureStore, GaussianCloud, PromptBank, SceneBundle};

/// Most recent queries kept addressable by id.
const QUERY_CAPACITY: usize = 64;
/// Rendered PNGs kept before the cache is flushed.
const CACHE_CAPACITY: usize = 256;

/// The loaded, read-only data.
#[derive(Debug)]
pub struct Session {
    pub scene: SceneBundle,
    pub store: FeatureStore,
    pub prompts: PromptBank,
    pub theta_default: f64,
}

impl Session {
    pub fn new(scene: SceneBundle, store: FeatureStore, prompts: PromptBank, theta_default: f64) -> Self {
        Session {
            scene,
            store,
            prompts,
            theta_default,
        }
    }

    /// PNG bytes of one view under a query.
    pub fn render_png(
        &self,
        result: &SegmentationResult,
        view: usize,
        mode: RenderMode,
    ) -> splatfield_core::Result<Vec<u8>> {
        let cam = self.scene.camera(view)?;
        let opts = RenderOptions::default();
        let bg = self.scene.background;
        let (w, h) = (cam.width as usize, cam.height as usize);
        match mode {
            RenderMode::Color => {
                let out = render_camera(&self.scene.cloud, cam, bg, None, &opts)?;
                encode_rgb_png(w, h, &out.color)
            }
            RenderMode::Heatmap => {
                let out = render_camera(&self.scene.cloud, cam, bg, Some(&self.store), &opts)?;
                let sims = similarity_map(out.features.as_ref().expect("features requested"), &result.spec)?;
                let gray: Vec<f32> = sims.iter().map(|s| (s + 1.0) / 2.0).collect();
                encode_gray_png(w, h, &gray)
            }
            RenderMode::Extraction | RenderMode::Deletion => {
                let cloud = self.edited(result, mode == RenderMode::Extraction)?;
                let out = render_camera(&cloud, cam, bg, None, &opts)?;
                encode_rgb_png(w, h, &out.color)
            }
        }
    }

    /// The segmented Gaussians (`keep`) or everything else.
    pub fn edited(&self, result: &SegmentationResult, keep: bool) -> splatfield_core::Result<GaussianCloud> {
        let (cloud, _, _) = if keep {
            extract(&self.scene.cloud, &self.store, result)?
        } else {
            delete(&self.scene.cloud, &self.store, result)?
        };
        Ok(cloud)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RenderMode {
    Color,
    Heatmap,
    Extraction,
    Deletion,
}

impl std::str::FromStr for RenderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "color" => RenderMode::Color,
            "heatmap" => RenderMode::Heatmap,
            "extraction" => RenderMode::Extraction,
            "deletion" => RenderMode::Deletion,
            other => {
                return Err(format!(
                    "unknown mode '{other}' (expected color, heatmap, extraction or deletion)"
                ))
            }
        })
    }
}

#[derive(Debug)]
pub(crate) struct QueryEntry {
    pub id: String,
    pub hash: u64,
    pub result: SegmentationResult,
}

pub(crate) fn spec_hash(spec: &QuerySpec) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    bits(&spec.positive).hash(&mut h);
    for n in &spec.negatives {
        bits(n).hash(&mut h);
    }
    spec.negatives.len().hash(&mut h);
    spec.theta.to_bits().hash(&mut h);
    spec.require_argmax.hash(&mut h);
    h.finish()
}

pub(crate) enum LoadState {
    Loading,
    Ready(Arc<Session>),
    Failed(String),
}

type RenderSlot = Arc<OnceCell<Arc<Vec<u8>>>>;

struct Inner {
    load: RwLock<LoadState>,
    queries: Mutex<BTreeMap<u64, Arc<QueryEntry>>>,
    counter: AtomicU64,
    cache: Mutex<HashMap<(u64, usize, RenderMode), RenderSlot>>,
    out_dir: PathBuf,
}

/// Shared handle used by every request.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn loading(out_dir: PathBuf) -> Self {
        AppState {
            inner: Arc::new(Inner {
                load: RwLock::new(LoadState::Loading),
                queries: Mutex::new(BTreeMap::new()),
                counter: AtomicU64::new(0),
                cache: Mutex::new(HashMap::new()),
                out_dir,
            }),
        }
    }

    pub fn ready(session: Session, out_dir: PathBuf) -> Self {
        let s = AppState::loading(out_dir);
        s.set_session(session);
        s
    }

    pub fn set_session(&self, session: Session) {
        *self.inner.load.write().expect("load lock") = LoadState::Ready(Arc::new(session));
    }

    pub fn set_failed(&self, message: String) {
        *self.inner.load.write().expect("load lock") = LoadState::Failed(message);
    }

    pub(crate) fn load_state(&self) -> Result<Arc<Session>, Option<String>> {
        match &*self.inner.load.read().expect("load lock") {
            LoadState::Ready(s) => Ok(s.clone()),
            LoadState::Loading => Err(None),
            LoadState::Failed(m) => Err(Some(m.clone())),
        }
    }

    pub(crate) fn out_dir(&self) -> &PathBuf {
        &self.inner.out_dir
    }

    pub(crate) fn record_query(&self, result: SegmentationResult) -> Arc<QueryEntry> {
        let n = self.inner.counter.fetch_add(1, Ordering::SeqCst) + 1;
        let entry = Arc::new(QueryEntry {
            id: format!("q{n}"),
            hash: spec_hash(&result.spec),
            result,
        });
        let mut q = self.inner.queries.lock().expect("query lock");
        q.insert(n, entry.clone());
        while q.len() > QUERY_CAPACITY {
            q.pop_first();
        }
        entry
    }

    pub(crate) fn query(&self, id: &str) -> Option<Arc<QueryEntry>> {
        let n: u64 = id.strip_prefix('q')?.parse().ok()?;
        self.inner.queries.lock().expect("query lock").get(&n).cloned()
    }

    /// Cached render; concurrent requests for one key share a single render.
    pub(crate) async fn render_cached(
        &self,
        session: Arc<Session>,
        entry: Arc<QueryEntry>,
        view: usize,
        mode: RenderMode,
    ) -> Result<Arc<Vec<u8>>, String> {
        let key = (entry.hash, view, mode);
        let slot = {
            let mut cache = self.inner.cache.lock().expect("cache lock");
            if cache.len() >= CACHE_CAPACITY && !cache.contains_key(&key) {
                cache.clear();
            }
            cache.entry(key).or_default().clone()
        };
        slot.get_or_try_init(|| async move {
            tokio::task::spawn_blocking(move || session.render_png(&entry.result, view, mode))
                .await
                .map_err(|e| format!("render task failed: {e}"))?
                .map(Arc::new)
                .map_err(|e| e.to_string())
        })
        .await
        .cloned()
    }
}
