//! Floating-point environment control.

/// Sets flush-to-zero and denormals-are-zero on the calling thread.
/// Subnormal intermediates (e.g. gradients through saturated sigmoids)
/// otherwise slow SIMD arithmetic by an order of magnitude.
pub fn flush_denormals_current_thread() {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: only the FTZ (bit 15) and DAZ (bit 6) flags of MXCSR change;
    // rounding mode and exception masks are preserved.
    unsafe {
        let mut csr: u32 = 0;
        std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack));
        csr |= 0x8040;
        std::arch::asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack));
    }
    #[cfg(target_arch = "aarch64")]
    // SAFETY: sets only the FZ bit (24) of FPCR.
    unsafe {
        let mut fpcr: u64;
        std::arch::asm!("mrs {}, fpcr", out(reg) fpcr, options(nomem, nostack));
        fpcr |= 1 << 24;
        std::arch::asm!("msr fpcr, {}", in(reg) fpcr, options(nomem, nostack));
    }
}

/// Flushes subnormals on the calling thread and every thread of the current
/// rayon pool.
pub fn flush_denormals() {
    flush_denormals_current_thread();
    rayon::broadcast(|_| flush_denormals_current_thread());
}

/// Whether subnormal results are flushed on the calling thread.
pub fn denormals_flushed() -> bool {
    let tiny = std::hint::black_box(f32::MIN_POSITIVE);
    std::hint::black_box(tiny / 2.0) == 0.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[cfg(any(target_arch = "x86_64", target_arch = "aarch64"))]
    fn flushing_zeroes_subnormal_results() {
        std::thread::spawn(|| {
            assert!(!denormals_flushed());
            flush_denormals_current_thread();
            assert!(denormals_flushed());
            assert_eq!(std::hint::black_box(1.5f32) * 2.0, 3.0);
        })
        .join()
        .unwrap();
    }
}
