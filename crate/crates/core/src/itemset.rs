/// Fixed-capacity bitset over item indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemSet {
    words: Vec<u64>,
    len: usize,
}

impl ItemSet {
    pub fn new(capacity: usize) -> Self {
        Self { words: vec![0; capacity.div_ceil(64)], len: 0 }
    }

    pub fn from_items<I: IntoIterator<Item = u32>>(capacity: usize, items: I) -> Self {
        let mut s = Self::new(capacity);
        for i in items {
            s.insert(i);
        }
        s
    }

    pub fn insert(&mut self, item: u32) -> bool {
        let (w, b) = (item as usize / 64, item % 64);
        let fresh = self.words[w] & (1 << b) == 0;
        self.words[w] |= 1 << b;
        self.len += fresh as usize;
        fresh
    }

    #[inline]
    pub fn contains(&self, item: u32) -> bool {
        self.words
            .get(item as usize / 64)
            .is_some_and(|w| w & (1 << (item % 64)) != 0)
    }

    /// Number of distinct items in the set.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_contains_len() {
        let mut s = ItemSet::from_items(130, [0, 64, 129, 64]);
        assert_eq!(s.len(), 3);
        assert!(s.contains(129) && s.contains(0) && !s.contains(1));
        assert!(!s.contains(100_000));
        assert!(!s.insert(0));
        assert!(s.insert(1));
    }
}
