//! Index-parallel map with a sequential fallback.
//!
//! Callers hand in a closure over a replicate index; each index must derive
//! its own randomness (see [`crate::rng::substream`]). Output order is the
//! index order, so results do not depend on the thread count.

/// Thread-count knob. `0` means "use the rayon default".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Threads(pub usize);

impl Threads {
    pub const SINGLE: Threads = Threads(1);
}

#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, threads: Threads, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    if threads.0 == 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let run = || (0..n).into_par_iter().map(&f).collect::<Vec<T>>();
    if threads.0 == 0 {
        run()
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(threads.0).build() {
            Ok(pool) => pool.install(run),
            Err(_) => (0..n).map(&f).collect(),
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, _threads: Threads, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Fallible variant; the first error in index order wins.
pub fn try_map_indexed<T, E, F>(n: usize, threads: Threads, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, threads, f).into_iter().collect()
}
