//! Index-parallel map with a sequential fallback.
//!
//! Every parallel entry point in the crate goes through [`map_indexed`], which
//! returns results in index order. Callers derive any randomness from the index
//! (never from a shared generator), so output does not depend on the worker count
//! or on the `parallel` feature.

use std::cell::Cell;

thread_local! {
    static FORCED_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Worker count for data-parallel sections. `0` means "use the ambient pool";
/// inside a sequential section that is the calling thread alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Workers(pub usize);

impl Workers {
    pub const SEQUENTIAL: Workers = Workers(1);
    pub const AUTO: Workers = Workers(0);

    pub fn is_sequential(self) -> bool {
        self.0 == 1 || !cfg!(feature = "parallel")
    }
}

/// Apply `f` to `0..n` and collect results in index order.
pub fn map_indexed<T, F>(n: usize, workers: Workers, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let ambient_sequential = workers.0 == 0 && FORCED_SEQUENTIAL.with(Cell::get);
    if workers.is_sequential() || ambient_sequential || n <= 1 {
        return sequential_map(n, f);
    }
    parallel_map(n, workers, f)
}

/// Run `f` with `workers` as the ambient setting for nested `Workers::AUTO` sections.
pub fn with_workers<T: Send, F: FnOnce() -> T + Send>(workers: Workers, f: F) -> T {
    if workers.is_sequential() {
        return forced_sequential(f);
    }
    if workers.0 == 0 {
        return f();
    }
    install(workers, f)
}

#[cfg(feature = "parallel")]
fn install<T: Send, F: FnOnce() -> T + Send>(workers: Workers, f: F) -> T {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(workers.0)
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(err) => {
            log::warn!(
                "could not build a {}-thread pool ({err}); using the ambient pool",
                workers.0
            );
            f()
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn install<T: Send, F: FnOnce() -> T + Send>(_workers: Workers, f: F) -> T {
    f()
}

/// Run on the calling thread; nested `Workers::AUTO` sections stay sequential too.
fn sequential_map<T, F: Fn(usize) -> T>(n: usize, f: F) -> Vec<T> {
    forced_sequential(|| (0..n).map(f).collect())
}

fn forced_sequential<T, F: FnOnce() -> T>(f: F) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            FORCED_SEQUENTIAL.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(FORCED_SEQUENTIAL.with(|c| c.replace(true)));
    f()
}

#[cfg(feature = "parallel")]
fn parallel_map<T, F>(n: usize, workers: Workers, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    if workers.0 == 0 {
        return (0..n).into_par_iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new()
        .num_threads(workers.0)
        .build()
    {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(err) => {
            log::warn!(
                "could not build a {}-thread pool ({err}); running sequentially",
                workers.0
            );
            sequential_map(n, f)
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, F>(n: usize, _workers: Workers, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    sequential_map(n, f)
}

/// Mix a master seed with a stream index (SplitMix64 finalizer). Stable across
/// platforms and releases, so replication seeds never depend on execution order.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
