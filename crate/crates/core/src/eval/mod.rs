//! Evaluation: ranking metrics, embedders, the static retrieval and
//! future-behavior tasks, the dynamic multi-period simulation, and the
//! update-cost benchmark.

mod bench;
mod dynamic;
mod embedders;
mod metrics;
mod probe;
mod retrieval;

pub use bench::{bench_strategies, bench_to_csv, BenchConfig, BenchRow, BENCH_HEADER};
pub use dynamic::SIMULATION_HEADER;
pub use dynamic::{simulate_dynamic, SimulationConfig, SimulationReport, SimulationRow, SimulationSchedule};
pub use embedders::{embed_all, Embedder, ModelEmbedder, RandomEmbedder, TfEmbedder, TfIdfEmbedder};
pub use metrics::{auc, harmonic, macro_auc, mrr, random_mrr, rank_of};
pub use probe::presence;
pub use probe::{future_behavior_task, split_3_1_1, FbpTaskConfig, FbpTaskReport, Probe, ProbeConfig};
pub use retrieval::{build_retrieval_task, run_retrieval, RetrievalConfig, RetrievalInstance, RetrievalReport};

/// Maps `f` over `items` on up to `workers` scoped threads, preserving order.
pub(crate) fn par_map<I: Sync, O: Send>(items: &[I], workers: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let per = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(per)
            .map(|chunk| scope.spawn(move || chunk.iter().map(f).collect::<Vec<O>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}
