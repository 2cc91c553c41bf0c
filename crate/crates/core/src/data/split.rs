use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Rating;

/// Seeded uniform train/test split by entry.
///
/// The test side receives `round(test_fraction * len)` entries. A repair pass
/// then moves back into train one test rating of every user or item that has
/// at least two ratings but none left in train, and compensates by moving
/// train ratings whose user and item both keep another train rating.
pub fn split_train_test(entries: &[Rating], test_fraction: f64, seed: u64) -> (Vec<Rating>, Vec<Rating>) {
    assert!(
        (0.0..1.0).contains(&test_fraction),
        "test_fraction must lie in [0, 1)"
    );
    let len = entries.len();
    let target = (test_fraction * len as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);

    let m = entries.iter().map(|r| r.user as usize + 1).max().unwrap_or(0);
    let n = entries.iter().map(|r| r.item as usize + 1).max().unwrap_or(0);
    let mut user_total = vec![0usize; m];
    let mut item_total = vec![0usize; n];
    for r in entries {
        user_total[r.user as usize] += 1;
        item_total[r.item as usize] += 1;
    }

    let mut in_test = vec![false; len];
    for &e in &order[..target] {
        in_test[e] = true;
    }
    let mut user_train = vec![0usize; m];
    let mut item_train = vec![0usize; n];
    for (e, r) in entries.iter().enumerate() {
        if !in_test[e] {
            user_train[r.user as usize] += 1;
            item_train[r.item as usize] += 1;
        }
    }

    let mut moved_back = 0usize;
    for &e in &order[..target] {
        let (u, i) = (entries[e].user as usize, entries[e].item as usize);
        let user_orphan = user_train[u] == 0 && user_total[u] >= 2;
        let item_orphan = item_train[i] == 0 && item_total[i] >= 2;
        if user_orphan || item_orphan {
            in_test[e] = false;
            user_train[u] += 1;
            item_train[i] += 1;
            moved_back += 1;
        }
    }
    for &e in &order[target..] {
        if moved_back == 0 {
            break;
        }
        let (u, i) = (entries[e].user as usize, entries[e].item as usize);
        if !in_test[e] && user_train[u] >= 2 && item_train[i] >= 2 {
            in_test[e] = true;
            user_train[u] -= 1;
            item_train[i] -= 1;
            moved_back -= 1;
        }
    }

    let mut train = Vec::with_capacity(len - target);
    let mut test = Vec::with_capacity(target);
    for (e, r) in entries.iter().enumerate() {
        if in_test[e] {
            test.push(*r);
        } else {
            train.push(*r);
        }
    }
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::HashSet;

    fn random_entries(len: usize, m: u32, n: u32, seed: u64) -> Vec<Rating> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        while out.len() < len {
            let (i, j) = (rng.random_range(0..m), rng.random_range(0..n));
            if seen.insert((i, j)) {
                out.push(Rating::new(i, j, rng.random()));
            }
        }
        out
    }

    #[test]
    fn zero_fraction_keeps_everything() {
        let e = random_entries(100, 20, 20, 1);
        let (train, test) = split_train_test(&e, 0.0, 3);
        assert!(test.is_empty());
        assert_eq!(train, e);
    }

    #[test]
    fn fraction_is_respected_and_split_is_partition() {
        let e = random_entries(100_000, 2000, 500, 2);
        let (train, test) = split_train_test(&e, 0.2, 9);
        assert!((test.len() as f64 - 20_000.0).abs() <= 200.0, "{}", test.len());
        assert_eq!(train.len() + test.len(), e.len());
        let key = |r: &Rating| (r.user, r.item);
        let a: HashSet<_> = train.iter().map(key).collect();
        let b: HashSet<_> = test.iter().map(key).collect();
        assert!(a.is_disjoint(&b));
        let all: HashSet<_> = e.iter().map(key).collect();
        assert_eq!(a.union(&b).count(), all.len());
    }

    #[test]
    fn no_orphans_and_deterministic() {
        // sparse data with many low-degree users and items
        let e = random_entries(600, 300, 200, 4);
        let (train, test) = split_train_test(&e, 0.5, 5);
        let mut total = std::collections::HashMap::new();
        for r in &e {
            *total.entry(r.user).or_insert(0) += 1;
        }
        let train_users: HashSet<u32> = train.iter().map(|r| r.user).collect();
        for (u, c) in total {
            if c >= 2 {
                assert!(train_users.contains(&u), "user {u} orphaned");
            }
        }
        let mut item_total = std::collections::HashMap::new();
        for r in &e {
            *item_total.entry(r.item).or_insert(0) += 1;
        }
        let train_items: HashSet<u32> = train.iter().map(|r| r.item).collect();
        for (j, c) in item_total {
            if c >= 2 {
                assert!(train_items.contains(&j), "item {j} orphaned");
            }
        }
        assert_eq!(split_train_test(&e, 0.5, 5), (train, test));
    }

    proptest::proptest! {
        #[test]
        fn split_partitions_entries_without_orphans(len in 1usize..400, seed in 0u64..1000, frac in 0.0f64..0.9) {
            let entries = random_entries(len, 40, 25, seed);
            let (train, test) = split_train_test(&entries, frac, seed ^ 0x5eed);
            proptest::prop_assert_eq!(train.len() + test.len(), entries.len());
            proptest::prop_assert!(test.len() <= (frac * entries.len() as f64).round() as usize);
            let key = |r: &Rating| (r.user, r.item);
            let mut all: Vec<_> = train.iter().chain(&test).map(key).collect();
            let mut want: Vec<_> = entries.iter().map(key).collect();
            all.sort_unstable();
            want.sort_unstable();
            proptest::prop_assert_eq!(all, want);
            for r in &entries {
                let user_total = entries.iter().filter(|e| e.user == r.user).count();
                let item_total = entries.iter().filter(|e| e.item == r.item).count();
                if user_total >= 2 {
                    proptest::prop_assert!(train.iter().any(|e| e.user == r.user), "user {} orphaned", r.user);
                }
                if item_total >= 2 {
                    proptest::prop_assert!(train.iter().any(|e| e.item == r.item), "item {} orphaned", r.item);
                }
            }
        }
    }
}
