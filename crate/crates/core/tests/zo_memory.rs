//! Counts heap bytes live during an estimate on the calling thread.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

use heron_sfl::zo::{zo_estimate, PerturbationTicket};

struct Counting;

thread_local! {
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

fn track(delta: isize) {
    let _ = LIVE.try_with(|live| {
        let now = live.get() + delta;
        live.set(now);
        let _ = PEAK.try_with(|p| p.set(p.get().max(now)));
    });
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        track(layout.size() as isize);
        System.alloc(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        track(-(layout.size() as isize));
        System.dealloc(ptr, layout)
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Peak extra bytes held while estimating with `probes` probes in dimension `d`.
fn peak_extra(d: usize, probes: usize) -> isize {
    let mut theta = vec![0.5f64; d];
    let ticket = PerturbationTicket::new(3, 1e-3, probes, d).unwrap();
    let start = LIVE.with(Cell::get);
    PEAK.with(|p| p.set(start));
    let g = zo_estimate(&mut theta, &ticket, |x: &[f64]| Ok(x.iter().map(|v| v * v).sum())).unwrap();
    let peak = PEAK.with(Cell::get) - start;
    drop(g);
    peak
}

#[test]
fn scratch_is_linear_in_dimension_and_flat_in_probe_count() {
    for d in [16, 256, 4096] {
        let one = peak_extra(d, 1);
        let many = peak_extra(d, 64);
        assert_eq!(one, many, "d={d}: peak depends on probe count");
        let budget = (3 * d * std::mem::size_of::<f64>() + 1024) as isize;
        assert!(one <= budget, "d={d}: peak {one} bytes exceeds {budget}");
    }
}
