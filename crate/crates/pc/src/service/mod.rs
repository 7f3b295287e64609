//! The HTTP service: subject registry, asynchronous jobs and
//! content-addressed artifacts over one shared [`Environment`].

mod api;
pub mod jobs;
mod ops;
pub mod store;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use pc_core::backend::toy::toy_catalog;
use pc_core::latent::DirectionCatalog;
use pc_core::pipeline::{GenerationConfig, GenerationTrace};
use pc_core::training::Environment;
use serde::{Deserialize, Serialize};

pub use api::{router, ApiError};
pub use jobs::{JobBoard, JobEvent, JobKind, JobRecord, JobState};
pub use ops::{ComposeRequest, DirectionPair, EditBody, EvalRequest, GenerateRequest, MaskChoice, NewDirection, Sweep};
pub use store::{valid_subject_id, Store, SubjectEntry};

use crate::bundle;
use crate::{PcError, PcResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub store_dir: PathBuf,
    /// Bundle spec; the toy bundle when unset.
    pub backend: Option<PathBuf>,
    /// Pretrained adaptor weights; freshly initialized when unset.
    pub adaptor_weights: Option<PathBuf>,
    pub workers: usize,
    /// Largest `|β|` the edit endpoints accept.
    pub beta_max: f64,
    pub max_body_bytes: usize,
    /// Defaults for requests that leave `steps` or `tau` out.
    pub generation: GenerationConfig,
    /// Seed of the toy attribute directions installed on first start.
    pub toy_directions_seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            store_dir: PathBuf::from("pc-store"),
            backend: None,
            adaptor_weights: None,
            workers: 1,
            beta_max: 3.0,
            max_body_bytes: 16 << 20,
            generation: GenerationConfig::default(),
            toy_directions_seed: 7,
        }
    }
}

impl ServiceConfig {
    /// Reads a TOML file, then applies `PC_PORT`, `PC_STORE_DIR`,
    /// `PC_BACKEND`, `PC_WEIGHTS` and `PC_WORKERS`.
    pub fn load(path: Option<&Path>) -> PcResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| PcError::io(p, e))?;
                toml::from_str(&text).map_err(|source| PcError::Toml {
                    context: p.display().to_string(),
                    source,
                })?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> PcResult<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> PcResult<T> {
            v.parse().map_err(|_| PcError::Config(format!("{key}={v} is not valid")))
        }
        if let Some(v) = get("PC_PORT") {
            self.port = parse("PC_PORT", &v)?;
        }
        if let Some(v) = get("PC_STORE_DIR") {
            self.store_dir = v.into();
        }
        if let Some(v) = get(bundle::BACKEND_ENV).filter(|v| !v.is_empty()) {
            self.backend = Some(v.into());
        }
        if let Some(v) = get("PC_WEIGHTS").filter(|v| !v.is_empty()) {
            self.adaptor_weights = Some(v.into());
        }
        if let Some(v) = get("PC_WORKERS") {
            self.workers = parse("PC_WORKERS", &v)?;
        }
        Ok(())
    }

    pub fn validate(&self, timesteps: usize) -> PcResult<()> {
        if self.workers == 0 {
            return Err(PcError::Config("workers must be ≥ 1".into()));
        }
        if !(self.beta_max.is_finite() && self.beta_max > 0.0) {
            return Err(PcError::Config(format!("beta_max = {} must be positive", self.beta_max)));
        }
        self.generation.validate(timesteps)?;
        Ok(())
    }
}

/// Upper bound on cached base generations kept for edits.
const BASE_CACHE_LIMIT: usize = 32;

pub struct Service {
    cfg: ServiceConfig,
    env: Environment,
    store: Arc<Store>,
    jobs: Arc<JobBoard>,
    catalog: RwLock<DirectionCatalog>,
    bases: Mutex<BTreeMap<String, Arc<GenerationTrace>>>,
}

impl Service {
    /// Loads the backend and adaptor named by `cfg` and opens the store.
    pub fn open(cfg: ServiceConfig) -> PcResult<Arc<Self>> {
        let bundle = bundle::load_bundle_or_toy(cfg.backend.as_deref())?;
        let env = bundle::environment(bundle, cfg.adaptor_weights.as_deref())?;
        Self::with_environment(cfg, env)
    }

    pub fn with_environment(cfg: ServiceConfig, env: Environment) -> PcResult<Arc<Self>> {
        cfg.validate(env.timesteps())?;
        let store = Arc::new(Store::open(&cfg.store_dir)?);
        let catalog = match store.load_catalog()? {
            Some(c) => c,
            None if bundle::is_toy(env.bundle()) => {
                let c = toy_catalog(env.wplus_shape(), cfg.toy_directions_seed)?;
                store.save_catalog(&c)?;
                c
            }
            None => DirectionCatalog::new(),
        };
        let sink_store = Arc::clone(&store);
        let sink: jobs::ResultSink = Arc::new(move |v| {
            let bytes = serde_json::to_vec_pretty(v).map_err(|e| PcError::json("job result", e))?;
            sink_store.put_artifact(&bytes, "json")
        });
        let jobs = JobBoard::start(&store.jobs_log_path(), cfg.workers, sink)?;
        Ok(Arc::new(Self {
            cfg,
            env,
            store,
            jobs,
            catalog: RwLock::new(catalog),
            bases: Mutex::new(BTreeMap::new()),
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn jobs(&self) -> &JobBoard {
        &self.jobs
    }

    pub fn catalog(&self) -> std::sync::RwLockReadGuard<'_, DirectionCatalog> {
        self.catalog.read().unwrap_or_else(|p| p.into_inner())
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.jobs.close();
    }
}

/// Serves until Ctrl-C.
pub async fn serve(svc: Arc<Service>) -> PcResult<()> {
    let addr: SocketAddr = format!("{}:{}", svc.cfg.host, svc.cfg.port)
        .parse()
        .map_err(|e| PcError::Config(format!("listen address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| PcError::io(addr.to_string(), e))?;
    tracing::info!(
        "listening on {addr}, store {}, environment {}",
        svc.cfg.store_dir.display(),
        svc.env.fingerprint()
    );
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| PcError::io(addr.to_string(), e))
}
