//! Process-level tuning for the allocation pattern of the tape.
//!
//! Every recorded op allocates a fresh output buffer and a training step frees
//! them all at once. With the default glibc policy those multi-megabyte blocks
//! go straight back to the kernel and are page-faulted in again on the next
//! step, which costs more than the arithmetic. Keeping them in the heap makes
//! later steps reuse already-mapped memory.

/// Asks the allocator to serve large blocks from the heap and never trim it.
/// Idempotent; a no-op where the knobs do not exist.
pub fn retain_heap() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        use std::sync::Once;
        static ONCE: Once = Once::new();
        ONCE.call_once(|| {
            // SAFETY: mallopt only adjusts allocator parameters; both values are
            // within the documented ranges.
            unsafe {
                libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
                libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
            }
        });
    }
}
