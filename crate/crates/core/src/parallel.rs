//! Data-parallel map with a sequential fallback.
//!
//! All parallel sections in the crate go through [`map`], which always
//! returns results in input order. Reductions over those results are done
//! sequentially by the caller, so the parallel and sequential paths produce
//! bit-identical numbers.
//!
//! Without the `parallel` feature every call runs sequentially.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

const UNSET: u8 = 0;
const SEQ: u8 = 1;
const PAR: u8 = 2;

static MODE: AtomicU8 = AtomicU8::new(UNSET);

/// Environment variable capping worker threads; `0` forces sequential mode.
pub const THREADS_ENV: &str = "S2DC_THREADS";

pub fn set_mode(mode: Mode) {
    MODE.store(if mode == Mode::Sequential { SEQ } else { PAR }, Ordering::Relaxed);
}

pub fn mode() -> Mode {
    match MODE.load(Ordering::Relaxed) {
        SEQ => Mode::Sequential,
        PAR if cfg!(feature = "parallel") => Mode::Parallel,
        PAR => Mode::Sequential,
        _ => {
            let from_env = match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
                Some(0) => Mode::Sequential,
                _ if cfg!(feature = "parallel") => Mode::Parallel,
                _ => Mode::Sequential,
            };
            set_mode(from_env);
            from_env
        }
    }
}

/// Apply `S2DC_THREADS`: `0` selects sequential mode, `n > 0` sizes the
/// global worker pool. Returns the resulting mode.
pub fn init_from_env() -> Mode {
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(0) => set_mode(Mode::Sequential),
        Some(n) => {
            #[cfg(feature = "parallel")]
            {
                // Fails only if the pool was already built; keep that one.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            let _ = n;
            set_mode(Mode::Parallel);
        }
        None => set_mode(Mode::Parallel),
    }
    mode()
}

/// Order-preserving map over `items`.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
        }
        _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
    }
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map(&idx, |_, &i| f(i))
}
