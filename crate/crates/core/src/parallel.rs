use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

/// Maps `f` over `items` with at most `max_in_flight` concurrent calls.
///
/// Output order matches input order. On failure, workers stop taking new
/// items and the error with the lowest item index is returned with that index.
pub fn parallel_map<T, R, E, F>(items: &[T], max_in_flight: usize, f: F) -> Result<Vec<R>, (usize, E)>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync,
{
    let workers = max_in_flight.max(1).min(items.len());
    if workers <= 1 {
        return items
            .iter()
            .enumerate()
            .map(|(i, item)| f(i, item).map_err(|e| (i, e)))
            .collect();
    }

    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let first_err: Mutex<Option<(usize, E)>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failed.load(Ordering::Acquire) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::AcqRel);
                if i >= items.len() {
                    break;
                }
                match f(i, &items[i]) {
                    Ok(r) => slots.lock().expect("result slots poisoned")[i] = Some(r),
                    Err(e) => {
                        failed.store(true, Ordering::Release);
                        let mut guard = first_err.lock().expect("error slot poisoned");
                        if guard.as_ref().is_none_or(|(j, _)| i < *j) {
                            *guard = Some((i, e));
                        }
                    }
                }
            });
        }
    });

    if let Some(err) = first_err.into_inner().expect("error slot poisoned") {
        return Err(err);
    }
    Ok(slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every slot filled when no worker failed"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_under_jitter() {
        let items: Vec<u64> = (0..40).collect();
        let out = parallel_map(&items, 6, |_, &x| {
            std::thread::sleep(std::time::Duration::from_micros((40 - x) * 50));
            Ok::<_, ()>(x * 2)
        })
        .unwrap();
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn reports_failing_index() {
        let items = ["a", "b", "bad", "d", "e"];
        let err = parallel_map(&items, 3, |_, s| if *s == "bad" { Err("boom") } else { Ok(*s) }).unwrap_err();
        assert_eq!(err, (2, "boom"));
    }

    #[test]
    fn bounded_concurrency() {
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let items: Vec<usize> = (0..32).collect();
        parallel_map(&items, 4, |_, _| {
            let now = live.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(2));
            live.fetch_sub(1, Ordering::SeqCst);
            Ok::<_, ()>(())
        })
        .unwrap();
        assert!(peak.load(Ordering::SeqCst) <= 4);
    }

    #[test]
    fn empty_input() {
        let items: [u8; 0] = [];
        assert!(parallel_map(&items, 4, |_, _| Ok::<u8, ()>(0)).unwrap().is_empty());
    }
}
