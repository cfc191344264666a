//! Execution policy for the data-parallel kernels.
//!
//! Kernels split their buffers into fixed-size contiguous chunks. The chunk
//! boundaries never depend on the thread count, so a kernel produces the
//! same bits whether the chunks run on a rayon pool or one after another.

/// Elements per chunk handed to one task.
pub const CHUNK: usize = 1 << 15;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

/// Number of threads the parallel policy would use.
pub fn available_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
