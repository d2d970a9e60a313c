//! Data-parallel helpers.
//!
//! With the `parallel` feature (on by default) these fan work out over the
//! rayon pool; without it every helper runs the same closure sequentially.
//! Work items never share mutable state and every chain owns its own RNG
//! stream, so results are bit-identical in either mode.

use crate::rng::Rng;

/// How a bulk operation is executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Uses rayon when compiled with `parallel`; otherwise identical to
    /// [`Exec::Sequential`].
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Below this many multiply-adds a matmul stays on the calling thread.
pub(crate) const MATMUL_PAR_THRESHOLD: usize = 1 << 16;

/// Calls `f(row_index, row)` for every `row_len`-sized chunk of `out`.
pub fn rows_mut<F>(exec: Exec, out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = exec;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Maps `f` over `0..n` and collects the results in index order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Runs `n` independent chains. Chain `i` receives its own generator split
/// off `rng` in index order, so the output does not depend on `exec`.
pub fn map_chains<T, F>(exec: Exec, n: usize, rng: &mut Rng, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut Rng) -> T + Send + Sync,
{
    let mut streams: Vec<Rng> = (0..n).map(|_| rng.split()).collect();
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return streams
            .par_iter_mut()
            .enumerate()
            .map(|(i, r)| f(i, r))
            .collect();
    }
    let _ = exec;
    streams
        .iter_mut()
        .enumerate()
        .map(|(i, r)| f(i, r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chains_match_across_modes() {
        let run = |exec| {
            let mut rng = Rng::seed_from(7);
            map_chains(exec, 33, &mut rng, |i, r| r.uniform() + i as f64)
        };
        assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
    }

    #[test]
    fn rows_visit_every_chunk() {
        let mut buf = vec![0.0; 12];
        rows_mut(Exec::Parallel, &mut buf, 3, |i, row| {
            for v in row.iter_mut() {
                *v = i as f64;
            }
        });
        assert_eq!(buf, vec![0., 0., 0., 1., 1., 1., 2., 2., 2., 3., 3., 3.]);
    }
}
