//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) [`Execution::Parallel`] maps
//! over rayon's global pool; without it every mode runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Whether work actually fans out across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Applies `f` to every item whose index passes `select`, returning results
/// in index order.
pub fn map_selected<T, R, F>(exec: Execution, items: &mut [T], select: &[bool], f: F) -> Vec<(usize, R)>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items
            .par_iter_mut()
            .enumerate()
            .filter(|(i, _)| select[*i])
            .map(|(i, item)| (i, f(i, item)))
            .collect();
    }
    let _ = exec;
    items
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| select[*i])
        .map(|(i, item)| (i, f(i, item)))
        .collect()
}

/// Maps `f` over `0..n`, results in order.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Runs two closures, concurrently when parallel.
pub fn join<A, B, RA, RB>(exec: Execution, a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return rayon::join(a, b);
    }
    let _ = exec;
    (a(), b())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let mut items: Vec<f64> = (0..100).map(f64::from).collect();
        let select: Vec<bool> = (0..100).map(|i| i % 3 == 0).collect();
        let mut copy = items.clone();
        let a = map_selected(Execution::Sequential, &mut items, &select, |i, v| {
            *v += 1.0;
            i as f64 * *v
        });
        let b = map_selected(Execution::Parallel, &mut copy, &select, |i, v| {
            *v += 1.0;
            i as f64 * *v
        });
        assert_eq!(a, b);
        assert_eq!(items, copy);
        assert_eq!(map_range(Execution::Parallel, 5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
