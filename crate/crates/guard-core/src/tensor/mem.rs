//! Allocator high-water-mark accounting for tensor payloads.
//!
//! Every `Tensor` buffer registers its byte size on creation and
//! deregisters on drop, so peak memory of a run can be reported without
//! OS-specific queries.

use std::sync::atomic::{AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

pub(crate) fn on_alloc(bytes: usize) {
    let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

pub(crate) fn on_free(bytes: usize) {
    CURRENT.fetch_sub(bytes, Ordering::Relaxed);
}

/// Bytes currently held by live tensor buffers.
pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Resets the high-water mark to the current live total.
pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tensor;

    #[test]
    fn peak_tracks_allocations() {
        super::reset_peak();
        let before = super::current_bytes();
        {
            let t = Tensor::zeros(&[64, 64]);
            assert_eq!(super::current_bytes(), before + t.numel() * 8);
        }
        assert_eq!(super::current_bytes(), before);
        assert!(super::peak_bytes() >= before + 64 * 64 * 8);
    }
}
