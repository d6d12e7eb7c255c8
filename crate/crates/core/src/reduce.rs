//! Deterministic pairwise reductions.
//!
//! The summation tree depends only on the number of elements: a range is split at
//! its midpoint until it holds at most [`LEAF`] elements, leaves are summed left to
//! right, and partial sums are combined bottom-up. Subtrees above [`PAR_THRESHOLD`]
//! elements are evaluated with `rayon::join`, so the result is bit-identical for any
//! worker count.

/// Largest range summed serially.
pub const LEAF: usize = 16;
/// Smallest range whose halves are summed in parallel.
pub const PAR_THRESHOLD: usize = 2048;

/// Fixed reduction tree over `len` elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReductionPlan {
    len: usize,
}

impl ReductionPlan {
    pub fn new(len: usize) -> Self {
        Self { len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Tree depth (number of pairing levels above the leaves).
    pub fn depth(&self) -> usize {
        fn go(n: usize) -> usize {
            if n <= LEAF {
                0
            } else {
                1 + go(n - n / 2).max(go(n / 2))
            }
        }
        go(self.len)
    }

    /// Σ_i f(i) over `0..len` in tree order.
    pub fn sum<F>(&self, f: F) -> f64
    where
        F: Fn(usize) -> f64 + Sync,
    {
        tree(0, self.len, &f)
    }

    /// Component-wise sums of `K` quantities in one traversal.
    pub fn sum_many<const K: usize, F>(&self, f: F) -> [f64; K]
    where
        F: Fn(usize) -> [f64; K] + Sync,
    {
        tree_many(0, self.len, &f)
    }
}

fn tree<F>(lo: usize, hi: usize, f: &F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let n = hi - lo;
    if n <= LEAF {
        let mut acc = 0.0;
        for i in lo..hi {
            acc += f(i);
        }
        return acc;
    }
    let mid = lo + n / 2;
    let (a, b) = if n >= PAR_THRESHOLD {
        rayon::join(|| tree(lo, mid, f), || tree(mid, hi, f))
    } else {
        (tree(lo, mid, f), tree(mid, hi, f))
    };
    a + b
}

fn tree_many<const K: usize, F>(lo: usize, hi: usize, f: &F) -> [f64; K]
where
    F: Fn(usize) -> [f64; K] + Sync,
{
    let n = hi - lo;
    if n <= LEAF {
        let mut acc = [0.0; K];
        for i in lo..hi {
            let v = f(i);
            for k in 0..K {
                acc[k] += v[k];
            }
        }
        return acc;
    }
    let mid = lo + n / 2;
    let (mut a, b) = if n >= PAR_THRESHOLD {
        rayon::join(|| tree_many(lo, mid, f), || tree_many(mid, hi, f))
    } else {
        (tree_many(lo, mid, f), tree_many(mid, hi, f))
    };
    for k in 0..K {
        a[k] += b[k];
    }
    a
}

/// Tree sum of a slice.
pub fn tree_sum(values: &[f64]) -> f64 {
    ReductionPlan::new(values.len()).sum(|i| values[i])
}
