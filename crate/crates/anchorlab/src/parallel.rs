//! Thread-level parallelism. Work is split into the fixed shards the core
//! defines, so results do not depend on the thread count.

use anchorlab_core::analysis::{self, LIPSCHITZ_SHARDS};
use anchorlab_core::losses::LossSpec;
use anchorlab_core::Matrix;

use crate::error::{CliError, Result};

pub const THREADS_ENV: &str = "ANCHORLAB_THREADS";

/// Thread cap from `ANCHORLAB_THREADS`; 1 when unset.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

/// [`analysis::empirical_lipschitz`] over up to `threads` threads.
pub fn empirical_lipschitz(
    spec: &LossSpec,
    protos: &Matrix,
    b: f64,
    samples: usize,
    seed: u64,
    threads: usize,
) -> anchorlab_core::Result<f64> {
    let threads = threads.clamp(1, LIPSCHITZ_SHARDS as usize);
    if threads == 1 {
        return analysis::empirical_lipschitz(spec, protos, b, samples, seed);
    }
    let results: Vec<anchorlab_core::Result<f64>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads as u64)
            .map(|t| {
                s.spawn(move || {
                    let mut best: f64 = 0.0;
                    for shard in (t..LIPSCHITZ_SHARDS).step_by(threads) {
                        best = best.max(analysis::empirical_lipschitz_shard(spec, protos, b, samples, seed, shard)?);
                    }
                    Ok(best)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    results.into_iter().try_fold(0.0, |acc: f64, r| r.map(|v| acc.max(v)))
}
