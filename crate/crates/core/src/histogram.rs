//! Equal-width joint histograms and the entropies built on them (nats).

/// Joint histogram of two images over pixels selected by an optional mask.
/// Each image is binned over its own observed range among those pixels.
#[derive(Clone, Debug)]
pub struct JointHistogram {
    bins: usize,
    counts: Vec<u64>,
    total: u64,
}

fn range(values: impl Iterator<Item = f32>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(f64::from(v)), hi.max(f64::from(v)))
    })
}

#[inline]
fn bin_of(v: f32, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let b = ((f64::from(v) - lo) / (hi - lo) * bins as f64) as usize;
    b.min(bins - 1)
}

fn entropy(counts: impl Iterator<Item = u64>, total: u64) -> f64 {
    let n = total as f64;
    -counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

impl JointHistogram {
    /// `a` and `b` must have equal length, as must `mask` when given.
    pub fn new(a: &[f32], b: &[f32], mask: Option<&[bool]>, bins: usize) -> Self {
        assert!(bins >= 1);
        assert_eq!(a.len(), b.len());
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let (alo, ahi) = range((0..a.len()).filter(|&i| keep(i)).map(|i| a[i]));
        let (blo, bhi) = range((0..b.len()).filter(|&i| keep(i)).map(|i| b[i]));
        let mut counts = vec![0u64; bins * bins];
        let mut total = 0;
        for i in (0..a.len()).filter(|&i| keep(i)) {
            let ia = bin_of(a[i], alo, ahi, bins);
            let ib = bin_of(b[i], blo, bhi, bins);
            counts[ia * bins + ib] += 1;
            total += 1;
        }
        Self {
            bins,
            counts,
            total,
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, ia: usize, ib: usize) -> u64 {
        self.counts[ia * self.bins + ib]
    }

    pub fn entropy_a(&self) -> f64 {
        let marg = (0..self.bins).map(|i| (0..self.bins).map(|j| self.count(i, j)).sum());
        entropy(marg, self.total)
    }

    pub fn entropy_b(&self) -> f64 {
        let marg = (0..self.bins).map(|j| (0..self.bins).map(|i| self.count(i, j)).sum());
        entropy(marg, self.total)
    }

    pub fn entropy_joint(&self) -> f64 {
        entropy(self.counts.iter().copied(), self.total)
    }

    /// `H(a) + H(b) − H(a, b)`, clamped at 0 against rounding.
    pub fn mutual_information(&self) -> f64 {
        (self.entropy_a() + self.entropy_b() - self.entropy_joint()).max(0.0)
    }
}
