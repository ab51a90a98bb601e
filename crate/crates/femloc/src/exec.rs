use femloc_core::federation::{ClientExecutor, ClientState, ClientUpdate};
use femloc_core::Result;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::AppError;

/// Runs the clients of a round on a rayon thread pool.
pub struct ParallelClients {
    pool: ThreadPool,
}

impl ParallelClients {
    /// `workers == 0` sizes the pool to the available cores.
    pub fn new(workers: usize) -> std::result::Result<Self, AppError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| AppError::Config(format!("cannot start {workers} workers: {e}")))?;
        Ok(ParallelClients { pool })
    }

    pub fn pool(&self) -> &ThreadPool {
        &self.pool
    }
}

impl ClientExecutor for ParallelClients {
    fn run_round(
        &self,
        clients: &mut [ClientState],
        work: &(dyn Fn(&mut ClientState) -> Result<ClientUpdate> + Sync),
    ) -> Vec<Result<ClientUpdate>> {
        self.pool.install(|| clients.par_iter_mut().map(work).collect())
    }
}
