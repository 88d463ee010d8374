//! File formats, the lifelong training pipeline and reporting for
//! backward-compatible re-identification built on `bcreid-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod featstore;
pub mod pipeline;
pub mod replay_io;
pub mod report;

pub use error::{Error, Result};

/// Keeps glibc from returning freed pages to the kernel after every large
/// temporary; the training loop allocates and frees buffers of the same
/// sizes at every step. A no-op elsewhere.
pub fn tune_allocator() {
    #[cfg(target_env = "gnu")]
    // SAFETY: mallopt only adjusts allocator thresholds and is called before
    // any threads are spawned.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
