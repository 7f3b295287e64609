use pc_core::composition::BranchRunner;
use pc_core::{Error, Result, Tensor};

/// Runs every branch of a step on its own scoped thread. Results come back
/// in branch order.
#[derive(Clone, Copy, Debug, Default)]
pub struct ThreadedRunner;

impl BranchRunner for ThreadedRunner {
    fn run_all(&self, n: usize, job: &(dyn Fn(usize) -> Result<Tensor> + Sync)) -> Vec<Result<Tensor>> {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..n).map(|i| s.spawn(move || job(i))).collect();
            handles
                .into_iter()
                .enumerate()
                .map(|(i, h)| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Synchronization(format!("branch {i} panicked"))))
                })
                .collect()
        })
    }
}
