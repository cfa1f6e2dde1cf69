//! Fixed-size subset enumeration.

/// `C(n, k)`, saturating at `u128::MAX`.
pub(crate) fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        match acc.checked_mul((n - i) as u128) {
            Some(v) => acc = v / (i as u128 + 1),
            None => return u128::MAX,
        }
    }
    acc
}

/// Advances `subset` (strictly increasing indices below `n`) to the next
/// combination in lexicographic order; `false` after the last one.
pub(crate) fn next_combination(subset: &mut [usize], n: usize) -> bool {
    let keep = subset.len();
    let mut i = keep;
    while i > 0 && subset[i - 1] == n - keep + i - 1 {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    subset[i - 1] += 1;
    for j in i..keep {
        subset[j] = subset[j - 1] + 1;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_counts() {
        assert_eq!(binomial(18, 16), 153);
        assert_eq!(binomial(5, 4), 5);
        assert_eq!(binomial(10, 3), 120);
        assert_eq!(binomial(20, 20), 1);
        assert_eq!(binomial(3, 4), 0);
        assert_eq!(binomial(1000, 500), u128::MAX);
    }

    #[test]
    fn enumerates_every_combination_once() {
        let mut subset = vec![0, 1, 2];
        let mut seen = vec![subset.clone()];
        while next_combination(&mut subset, 6) {
            seen.push(subset.clone());
        }
        assert_eq!(seen.len() as u128, binomial(6, 3));
        let mut sorted = seen.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted, seen);
    }
}
