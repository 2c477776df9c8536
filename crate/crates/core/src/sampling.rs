//! Deterministic sampling helpers shared by episode construction and prompt
//! selection. Implemented here (rather than through `rand::seq`) so the
//! sampling sequence is pinned by this crate alone.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Uniform index in `0..n`.
pub(crate) fn pick_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    rng.random_range(0..n)
}

/// `k` distinct indices from `0..n`, uniform without replacement, via a
/// partial Fisher-Yates shuffle. Order of the result is the draw order.
pub(crate) fn sample_without_replacement(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.random_range(0..n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// In-place Fisher-Yates shuffle.
pub(crate) fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::HashSet;

    #[test]
    fn sampling_is_without_replacement_and_seed_stable() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let xs = sample_without_replacement(&mut a, 20, 8);
        let ys = sample_without_replacement(&mut b, 20, 8);
        assert_eq!(xs, ys);
        let unique: HashSet<_> = xs.iter().collect();
        assert_eq!(unique.len(), 8);
        assert!(xs.iter().all(|&i| i < 20));
    }

    #[test]
    fn full_draw_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut xs = sample_without_replacement(&mut rng, 10, 10);
        xs.sort_unstable();
        assert_eq!(xs, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn shuffle_keeps_elements() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut items = vec![1, 2, 3, 4, 5];
        shuffle(&mut rng, &mut items);
        let mut sorted = items.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![1, 2, 3, 4, 5]);
    }
}
