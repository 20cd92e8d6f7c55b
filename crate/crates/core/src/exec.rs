//! Data-parallel execution helpers.
//!
//! With the `parallel` feature the helpers fan out over the current rayon pool.
//! Without it, or inside [`sequential`], they run on the calling thread. Outputs
//! are always collected in input order and floating-point reductions use a
//! fixed chunking, so the two paths are bit-identical.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with every helper in this module forced onto the calling thread.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            FORCE_SEQUENTIAL.with(|c| c.set(self.0));
        }
    }
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    let _restore = Restore(prev);
    f()
}

fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|c| c.get())
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_range(items.len(), |i| f(&items[i]))
}

/// Items per accumulation chunk in [`sum_into`].
pub const CHUNK: usize = 8;

/// Sums per-item contributions into a vector of length `dim`.
///
/// Items are grouped into fixed chunks of [`CHUNK`]. Each chunk accumulates
/// sequentially into its own buffer, and the buffers are then added in chunk
/// order. The grouping does not depend on the worker count.
pub fn sum_into<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    let partials = map_range(chunks, |c| {
        let mut buf = vec![0.0; dim];
        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
            f(i, &mut buf);
        }
        buf
    });
    let mut total = vec![0.0; dim];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}
