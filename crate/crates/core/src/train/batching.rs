use alloc::vec::Vec;

/// Groups utterances so that every batch's summed duration stays within
/// `max_duration` and holds at most `max_size` utterances.
///
/// Utterances are packed longest first; one longer than `max_duration`
/// cannot fit any batch and is returned in the second list instead.
pub fn dynamic_batches(durations: &[f64], max_duration: f64, max_size: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut order: Vec<usize> = (0..durations.len()).collect();
    order.sort_by(|&a, &b| durations[b].total_cmp(&durations[a]).then(a.cmp(&b)));
    let mut batches = Vec::new();
    let mut dropped = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut total = 0.0;
    for i in order {
        let d = durations[i];
        if d > max_duration {
            dropped.push(i);
            continue;
        }
        if !cur.is_empty() && (total + d > max_duration || cur.len() >= max_size.max(1)) {
            batches.push(core::mem::take(&mut cur));
            total = 0.0;
        }
        cur.push(i);
        total += d;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    dropped.sort_unstable();
    (batches, dropped)
}
