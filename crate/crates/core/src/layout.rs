use serde::{Deserialize, Serialize};

/// Flat indexing of streams across users.
///
/// Stream `(k, i)` maps to the flat index `a = d_0 + ... + d_{k-1} + i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamLayout {
    streams_per_user: Vec<usize>,
    offsets: Vec<usize>,
    owner: Vec<usize>,
}

impl StreamLayout {
    pub fn new(streams_per_user: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(streams_per_user.len());
        let mut owner = Vec::new();
        let mut acc = 0;
        for (k, &dk) in streams_per_user.iter().enumerate() {
            offsets.push(acc);
            owner.extend(std::iter::repeat_n(k, dk));
            acc += dk;
        }
        Self {
            streams_per_user,
            offsets,
            owner,
        }
    }

    pub fn users(&self) -> usize {
        self.streams_per_user.len()
    }

    pub fn total_streams(&self) -> usize {
        self.owner.len()
    }

    pub fn streams_of(&self, user: usize) -> usize {
        self.streams_per_user[user]
    }

    pub fn streams_per_user(&self) -> &[usize] {
        &self.streams_per_user
    }

    /// Flat index range for the streams of `user`.
    pub fn range(&self, user: usize) -> std::ops::Range<usize> {
        let start = self.offsets[user];
        start..start + self.streams_per_user[user]
    }

    pub fn index(&self, user: usize, stream: usize) -> usize {
        debug_assert!(stream < self.streams_per_user[user]);
        self.offsets[user] + stream
    }

    pub fn user_of(&self, flat: usize) -> usize {
        self.owner[flat]
    }

    /// `(k, i)` pair for a flat index, both zero based.
    pub fn split(&self, flat: usize) -> (usize, usize) {
        let k = self.owner[flat];
        (k, flat - self.offsets[k])
    }
}
