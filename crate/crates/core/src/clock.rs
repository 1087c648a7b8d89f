//! System-wide monotonic clock.
//!
//! `std::time::Instant` is opaque and cannot be compared across processes.
//! Latency stamps travel inside envelopes between the publisher and the
//! subscriber process, so they are taken from `CLOCK_MONOTONIC`, which shares
//! its epoch (boot time) across every process on the host. Stamps are only
//! meaningful when both ends run on the same machine.

/// Nanoseconds from `CLOCK_MONOTONIC`.
pub fn mono_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: ts is a valid out-pointer; CLOCK_MONOTONIC is always supported.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    debug_assert_eq!(rc, 0);
    (ts.tv_sec as u64) * 1_000_000_000 + ts.tv_nsec as u64
}
