//! Kendall's tau-a in `O(n log n)`.
//!
//! Sort by `(x, y)`, count tied pairs in `x` and jointly in `(x, y)`, then
//! merge-sort on `y` counting exchanges (discordant pairs) and finally count
//! tied pairs in `y`. With `n0 = n(n-1)/2`, the concordant-minus-discordant
//! count is `n0 - n1 - n2 + n3 - 2 * swaps`.

/// Concordant and discordant pair counts of two equally long sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCounts {
    pub concordant: u64,
    pub discordant: u64,
    pub pairs: u64,
}

impl PairCounts {
    /// `(concordant - discordant) / C(n, 2)`.
    pub fn tau(&self) -> f64 {
        (self.concordant as f64 - self.discordant as f64) / self.pairs as f64
    }
}

fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` and returns the number of exchanged (strictly inverted) pairs.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Exact pair counts. Ties in either sequence count as neither concordant
/// nor discordant. Values must not be NaN.
pub fn pair_counts(x: &[f64], y: &[f64]) -> PairCounts {
    assert_eq!(x.len(), y.len(), "kendall: length mismatch");
    let n = x.len() as u64;
    let n0 = n * n.saturating_sub(1) / 2;
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tied_pairs(&xs);
    let n3 = tied_pairs(&pairs);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = merge_count(&mut ys, &mut buf);
    let n2 = tied_pairs(&ys);
    let discordant = swaps;
    // Pairs tied in neither coordinate are concordant or discordant.
    let untied = n0 + n3 - n1 - n2;
    PairCounts {
        concordant: untied - discordant,
        discordant,
        pairs: n0,
    }
}
