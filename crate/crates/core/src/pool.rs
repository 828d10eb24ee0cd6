//! Worker pool that owns the threads used by every parallel loop.
//!
//! All parallel work is split into fixed-size particle chunks keyed by chunk
//! index, so results do not depend on how many workers the pool has.

use std::sync::Arc;

use crate::error::{Result, SamplerError};

/// Environment variable consulted when no explicit worker count is given.
pub const THREADS_ENV: &str = "MIDPOINT_SAMPLER_THREADS";

#[derive(Clone)]
pub struct WorkerPool {
    workers: usize,
    pool: Arc<rayon::ThreadPool>,
}

impl std::fmt::Debug for WorkerPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerPool").field("workers", &self.workers).finish()
    }
}

impl WorkerPool {
    pub fn new(workers: usize) -> Result<Self> {
        let workers = workers.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("midpoint-worker-{i}"))
            .build()
            .map_err(|e| SamplerError::Config(format!("cannot start worker pool: {e}")))?;
        Ok(Self { workers, pool: Arc::new(pool) })
    }

    /// Explicit count, else `MIDPOINT_SAMPLER_THREADS`, else the machine's parallelism.
    pub fn resolve(explicit: Option<usize>) -> Result<Self> {
        let from_env = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok());
        let n = explicit.or(from_env).unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        });
        Self::new(n)
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Runs `f` with this pool as the ambient pool for every parallel iterator inside it.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}
