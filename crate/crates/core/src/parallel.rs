//! Index-ordered data parallelism.
//!
//! Work is expressed as `f(i)` for `i in 0..n`; results always come back in
//! index order, so reductions over them are bit-identical whichever executor
//! ran them. Without the `parallel` feature every executor runs sequentially.

use std::env;

/// Environment variable capping worker threads. `1` forces sequential runs.
pub const THREADS_ENV: &str = "SSPA_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Rayon workers; `None` uses the global pool.
    Parallel(Option<usize>),
}

impl Exec {
    /// Reads [`THREADS_ENV`]; unset or unparsable means all cores.
    pub fn from_env() -> Self {
        match env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
            Some(0) | None => Exec::Parallel(None),
            Some(1) => Exec::Sequential,
            Some(n) => Exec::Parallel(Some(n)),
        }
    }

    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            Exec::Parallel(threads) => parallel_map(threads, n, f),
        }
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, F>(threads: Option<usize>, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    match threads.and_then(pool) {
        Some(p) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        None => (0..n).into_par_iter().map(f).collect(),
    }
}

#[cfg(feature = "parallel")]
fn pool(threads: usize) -> Option<std::sync::Arc<rayon::ThreadPool>> {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let mut pools = POOLS.get_or_init(Default::default).lock().ok()?;
    if let Some(p) = pools.get(&threads) {
        return Some(p.clone());
    }
    let p = Arc::new(rayon::ThreadPoolBuilder::new().num_threads(threads).build().ok()?);
    pools.insert(threads, p.clone());
    Some(p)
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, F>(_threads: Option<usize>, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// [`Exec::map`] with the executor chosen from the environment.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    Exec::from_env().map(n, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn executors_agree_in_order() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let a = Exec::Sequential.map(1000, f);
        let b = Exec::Parallel(None).map(1000, f);
        let c = Exec::Parallel(Some(3)).map(1000, f);
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert!(Exec::Parallel(Some(2)).map(0, f).is_empty());
    }
}
