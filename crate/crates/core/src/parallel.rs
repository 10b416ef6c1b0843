//! Bounded-parallel map with deterministic output order.
//!
//! Oracle-backed stages fan out over messages or traces with a configured
//! in-flight bound; results come back in input order regardless of which
//! worker finished first, so downstream output is order-deterministic.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Apply `f` to every item using up to `concurrency` worker threads.
/// Results are returned in input order.
pub fn bounded_map<T, R, F>(items: &[T], concurrency: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = concurrency.max(1).min(items.len().max(1));
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let result = f(i, &items[i]);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });

    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .unwrap()
                .expect("worker filled every slot")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_input_order() {
        let items: Vec<usize> = (0..100).collect();
        let out = bounded_map(&items, 8, |i, x| {
            // Stagger finish times so completion order differs from input order.
            std::thread::sleep(std::time::Duration::from_micros(((100 - i) % 7) as u64));
            x * 2
        });
        assert_eq!(out, (0..100).map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn handles_empty_and_single() {
        let empty: Vec<u32> = vec![];
        assert!(bounded_map(&empty, 4, |_, x| *x).is_empty());
        assert_eq!(bounded_map(&[7u32], 4, |_, x| *x + 1), vec![8]);
    }

    #[test]
    fn concurrency_one_is_sequential() {
        let items: Vec<usize> = (0..10).collect();
        let out = bounded_map(&items, 1, |i, _| i);
        assert_eq!(out, (0..10).collect::<Vec<_>>());
    }
}
