//! Replica fan-out. Work items are `(seed, replica)` pairs; results come back in
//! replica order whatever the worker count, so any fold over them is deterministic.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Runs `work(state, replica)` for every replica in `replicas` on `workers` threads.
/// Each thread works on its own clone of `state`. The first failing replica (in
/// replica order) is reported.
pub fn run_replicas<S, T, F>(state: &S, replicas: Range<u64>, workers: usize, work: F) -> Result<Vec<T>>
where
    S: Clone + Send + Sync,
    T: Send,
    F: Fn(&mut S, u64) -> Result<T> + Sync + Send,
{
    let run = || {
        replicas
            .clone()
            .into_par_iter()
            .map_init(|| state.clone(), |s, r| work(s, r).map_err(|e| (r, e)))
            .collect::<Vec<_>>()
    };
    let results = if workers <= 1 {
        let mut s = state.clone();
        replicas.clone().map(|r| work(&mut s, r).map_err(|e| (r, e))).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(run)
    };
    results.into_iter().map(|r| r.map_err(|(replica, e)| Error::Replica { replica, source: Box::new(e) })).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_workers() {
        let one = run_replicas(&0u64, 0..100, 1, |s, r| {
            *s += 1;
            Ok(r * r)
        })
        .unwrap();
        let many = run_replicas(&0u64, 0..100, 8, |_, r| Ok(r * r)).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn failing_replica_is_named() {
        let err = run_replicas(&(), 0..10, 3, |_, r| if r == 7 { Err(Error::EmptySet) } else { Ok(r) }).unwrap_err();
        assert_eq!(err, Error::Replica { replica: 7, source: Box::new(Error::EmptySet) });
    }
}
