//! Fixed-length bit sets over probe indices.
//!
//! Reach indicators and intersection counts reduce to AND/OR/popcount over
//! per-subtree probe sets, so everything downstream of the simulator works on
//! these instead of row-major observation cells.

/// A fixed-length set of probe indices backed by 64-bit words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeSet {
    words: Vec<u64>,
    len: usize,
}

impl ProbeSet {
    /// Creates an empty set over `len` probes.
    pub fn new(len: usize) -> Self {
        ProbeSet {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    /// Number of probes the set ranges over (not the number of members).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn insert(&mut self, i: usize) {
        debug_assert!(i < self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn contains(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// In-place union with `other`. Both sets must range over the same probes.
    pub fn union_assign(&mut self, other: &ProbeSet) {
        assert_eq!(self.len, other.len);
        for (w, o) in self.words.iter_mut().zip(&other.words) {
            *w |= o;
        }
    }

    /// Union of several sets.
    pub fn union_of<'a>(len: usize, sets: impl IntoIterator<Item = &'a ProbeSet>) -> ProbeSet {
        let mut out = ProbeSet::new(len);
        for s in sets {
            out.union_assign(s);
        }
        out
    }

    /// Size of the intersection of all the given sets; `0` when none are given
    /// would be meaningless, so the caller must pass at least one set.
    pub fn intersection_count(sets: &[&ProbeSet]) -> u64 {
        let (first, rest) = sets.split_first().expect("at least one set");
        let mut total = 0u64;
        for (i, w) in first.words.iter().enumerate() {
            let mut acc = *w;
            for s in rest {
                acc &= s.words[i];
            }
            total += acc.count_ones() as u64;
        }
        total
    }

    /// Size of `(a OR over group1) AND (OR over group2)` without materializing
    /// the unions.
    pub fn joint_union_count(group1: &[&ProbeSet], group2: &[&ProbeSet]) -> u64 {
        if group1.is_empty() || group2.is_empty() {
            return 0;
        }
        let nwords = group1[0].words.len();
        let mut total = 0u64;
        for i in 0..nwords {
            let mut a = 0u64;
            for s in group1 {
                a |= s.words[i];
            }
            let mut b = 0u64;
            for s in group2 {
                b |= s.words[i];
            }
            total += (a & b).count_ones() as u64;
        }
        total
    }

    /// Iterates over the indices of set members in increasing order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    None
                } else {
                    let b = w.trailing_zeros() as usize;
                    w &= w - 1;
                    Some(wi * 64 + b)
                }
            })
        })
    }
}
