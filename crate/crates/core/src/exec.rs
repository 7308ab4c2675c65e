//! Data-parallel map over index ranges.
//!
//! With the `parallel` feature the work is spread over rayon's pool; without
//! it, or inside [`sequential`], the same closures run in order on the calling
//! thread. Results are always collected in index order, so the output does not
//! depend on scheduling.

use std::cell::Cell;

/// Execution strategy for [`map_indexed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

thread_local! {
    static MODE: Cell<Mode> = const { Cell::new(default_mode()) };
}

const fn default_mode() -> Mode {
    if cfg!(feature = "parallel") {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Mode in effect on the current thread.
pub fn current_mode() -> Mode {
    MODE.with(|m| m.get())
}

/// Runs `f` with the given mode installed on the calling thread.
pub fn with_mode<R>(mode: Mode, f: impl FnOnce() -> R) -> R {
    let prev = MODE.with(|m| m.replace(mode));
    let out = f();
    MODE.with(|m| m.set(prev));
    out
}

/// Runs `f` with parallelism disabled.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    with_mode(Mode::Sequential, f)
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match current_mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel if n > 1 => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Fallible variant of [`map_indexed`]; returns the first error in index order.
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

/// Runs `f` inside a pool of `workers` threads when parallelism is compiled in.
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match workers {
        Some(1) => sequential(f),
        #[cfg(feature = "parallel")]
        Some(w) if w > 1 => match rayon::ThreadPoolBuilder::new().num_threads(w).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let par = map_indexed(100, |i| i * i);
        let seq = sequential(|| map_indexed(100, |i| i * i));
        assert_eq!(par, seq);
        assert_eq!(current_mode(), default_mode());
    }

    #[test]
    fn first_error_wins() {
        let r: Result<Vec<usize>, usize> = try_map_indexed(10, |i| if i >= 3 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(3));
    }
}
