//! Data-parallel execution switch.
//!
//! Every data-parallel loop in the crate (ensemble members, per-node local
//! analyses, prediction sets, sweep points, dense readout kernels) goes
//! through [`Execution`]. With the `parallel` feature disabled the
//! `Parallel` variant silently runs sequentially. Parallel maps preserve
//! input order and never split a floating point reduction, so their results
//! do not depend on the feature set. The dense readout kernels are handed
//! to faer, whose parallel blocking may change the last bits.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    /// Ordered map over a slice.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }

    /// Ordered map over `0..n`.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Ordered fallible map; the first error in index order wins.
    pub fn try_map_range<R, E, F>(self, n: usize, f: F) -> Result<Vec<R>, E>
    where
        R: Send,
        E: Send,
        F: Fn(usize) -> Result<R, E> + Sync + Send,
    {
        self.map_range(n, f).into_iter().collect()
    }

    pub(crate) fn faer_par(self) -> faer::Par {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => faer::Par::rayon(0),
            _ => faer::Par::Seq,
        }
    }
}
