//! Execution policy for the data-parallel passes.
//!
//! Every hot loop in the crate (per-Gaussian projection, per-tile blending,
//! per-row scoring) goes through the helpers here. With the `parallel`
//! feature they dispatch to rayon when the policy asks for it; otherwise they
//! run the same closure sequentially. Results never depend on the policy:
//! all reductions are ordered.

/// Whether a pass may fan out over the rayon pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Number of worker threads a parallel pass would use.
pub fn current_num_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// `(0..n).map(f).collect()`, in index order.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Calls `f(chunk_index, chunk)` on consecutive `chunk_len`-sized pieces.
pub fn for_each_chunk_mut<T, F>(exec: Execution, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Zips two mutable slices chunk-wise (`a` in `a_len` pieces, `b` in `b_len`
/// pieces; both must yield the same number of chunks).
pub fn for_each_chunk_pair_mut<A, B, F>(
    exec: Execution,
    a: &mut [A],
    a_len: usize,
    b: &mut [B],
    b_len: usize,
    f: F,
) where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    let (a_len, b_len) = (a_len.max(1), b_len.max(1));
    debug_assert_eq!(a.len().div_ceil(a_len), b.len().div_ceil(b_len));
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        a.par_chunks_mut(a_len)
            .zip(b.par_chunks_mut(b_len))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
        return;
    }
    let _ = exec;
    a.chunks_mut(a_len)
        .zip(b.chunks_mut(b_len))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order_under_both_policies() {
        for exec in [Execution::Sequential, Execution::Parallel] {
            let v = map_range(exec, 1000, |i| i * 2);
            assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
        }
    }

    #[test]
    fn chunk_pairs_line_up() {
        let mut a = vec![0usize; 10];
        let mut b = vec![0usize; 5];
        for_each_chunk_pair_mut(Execution::Parallel, &mut a, 2, &mut b, 1, |i, x, y| {
            x.iter_mut().for_each(|v| *v = i);
            y[0] = i;
        });
        assert_eq!(a, vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
        assert_eq!(b, vec![0, 1, 2, 3, 4]);
    }
}
