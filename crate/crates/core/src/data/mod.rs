//! Rating storage, ingestion, splitting and the synthetic generator.

mod binary;
mod split;
mod synthetic;
mod text;

pub use binary::{read_binary, read_binary_from, write_binary, write_binary_to};
pub use split::split_train_test;
pub use synthetic::{
    generate_synthetic, parse_degree_histogram, DegreeHistogram, DegreeModel, SyntheticData,
    SyntheticSpec,
};
pub use text::{parse_text, IndexBase};

use crate::error::{Error, Result};
use crate::model::Partition;
use crate::Real;

/// One observed rating, 0-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rating {
    pub user: u32,
    pub item: u32,
    pub value: Real,
}

impl Rating {
    pub fn new(user: u32, item: u32, value: Real) -> Self {
        Self { user, item, value }
    }
}

/// A rating as stored inside a worker shard, with the number of SGD updates
/// applied to it so far.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatingEntry {
    pub user: u32,
    pub item: u32,
    pub value: Real,
    pub update_count: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceFormat {
    Text,
    Binary,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub m: u64,
    pub n: u64,
    /// Number of stored entries.
    pub nnz: u64,
    /// Entry count announced by a `%%meta` header, if the source had one.
    pub declared_nnz: Option<u64>,
    pub format: SourceFormat,
}

impl DatasetMeta {
    pub fn from_entries(name: impl Into<String>, entries: &[Rating], format: SourceFormat) -> Self {
        let m = entries.iter().map(|r| r.user as u64 + 1).max().unwrap_or(0);
        let n = entries.iter().map(|r| r.item as u64 + 1).max().unwrap_or(0);
        Self {
            name: name.into(),
            m,
            n,
            nnz: entries.len() as u64,
            declared_nnz: None,
            format,
        }
    }
}

/// Ratings of one worker, grouped by item and sorted by user within an item.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    item_offsets: Vec<usize>,
    entries: Vec<RatingEntry>,
}

impl Shard {
    /// Ratings of `item` held by this shard.
    #[inline]
    pub fn column(&self, item: usize) -> &[RatingEntry] {
        &self.entries[self.item_offsets[item]..self.item_offsets[item + 1]]
    }

    /// Position of `item`'s ratings within [`Shard::entries`].
    #[inline]
    pub fn column_range(&self, item: usize) -> std::ops::Range<usize> {
        self.item_offsets[item]..self.item_offsets[item + 1]
    }

    #[inline]
    pub fn column_mut(&mut self, item: usize) -> &mut [RatingEntry] {
        &mut self.entries[self.item_offsets[item]..self.item_offsets[item + 1]]
    }

    pub fn entries(&self) -> &[RatingEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn reset_counts(&mut self) {
        self.entries.iter_mut().for_each(|e| e.update_count = 0);
    }
}

/// Training ratings partitioned across workers by user, plus per-user and
/// per-item indexes used by the row-wise solvers.
#[derive(Clone, Debug)]
pub struct ShardedRatings {
    m: usize,
    n: usize,
    partition: Partition,
    shards: Vec<Shard>,
    // by user (CSR)
    user_offsets: Vec<usize>,
    user_items: Vec<u32>,
    user_values: Vec<Real>,
    // by item, pointing back into the CSR arrays
    item_offsets: Vec<usize>,
    item_users: Vec<u32>,
    item_pos: Vec<usize>,
}

/// Groups `entries` into one shard per worker of `partition`.
pub fn shard(m: usize, n: usize, entries: &[Rating], partition: Partition) -> Result<ShardedRatings> {
    ShardedRatings::new(m, n, entries, partition)
}

impl ShardedRatings {
    pub fn new(m: usize, n: usize, entries: &[Rating], partition: Partition) -> Result<Self> {
        if partition.m() != m {
            return Err(Error::Partition(format!(
                "partition covers {} rows but the data has {m}",
                partition.m()
            )));
        }
        for r in entries {
            if r.user as usize >= m || r.item as usize >= n {
                return Err(Error::Dimension(format!(
                    "rating ({}, {}) outside a {m}x{n} matrix",
                    r.user, r.item
                )));
            }
        }
        let p = partition.p();

        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.sort_unstable_by_key(|&e| (entries[e].user, entries[e].item));
        for pair in order.windows(2) {
            let (a, b) = (&entries[pair[0]], &entries[pair[1]]);
            if a.user == b.user && a.item == b.item {
                return Err(Error::Format(format!(
                    "duplicate rating for (user {}, item {})",
                    a.user, a.item
                )));
            }
        }
        let mut user_offsets = vec![0usize; m + 1];
        for r in entries {
            user_offsets[r.user as usize + 1] += 1;
        }
        for i in 0..m {
            user_offsets[i + 1] += user_offsets[i];
        }
        let user_items: Vec<u32> = order.iter().map(|&e| entries[e].item).collect();
        let user_values: Vec<Real> = order.iter().map(|&e| entries[e].value).collect();

        let mut item_offsets = vec![0usize; n + 1];
        for r in entries {
            item_offsets[r.item as usize + 1] += 1;
        }
        for j in 0..n {
            item_offsets[j + 1] += item_offsets[j];
        }
        let mut cursor = item_offsets.clone();
        let mut item_users = vec![0u32; entries.len()];
        let mut item_pos = vec![0usize; entries.len()];
        // CSR is user-major, so users arrive in ascending order per item.
        for i in 0..m {
            for pos in user_offsets[i]..user_offsets[i + 1] {
                let j = user_items[pos] as usize;
                item_users[cursor[j]] = i as u32;
                item_pos[cursor[j]] = pos;
                cursor[j] += 1;
            }
        }

        let mut shard_counts = vec![vec![0usize; n + 1]; p];
        for r in entries {
            shard_counts[partition.owner(r.user as usize)][r.item as usize + 1] += 1;
        }
        let mut shards: Vec<Shard> = shard_counts
            .into_iter()
            .map(|mut offsets| {
                for j in 0..n {
                    offsets[j + 1] += offsets[j];
                }
                let len = offsets[n];
                Shard {
                    item_offsets: offsets,
                    entries: Vec::with_capacity(len),
                }
            })
            .collect();
        for j in 0..n {
            for idx in item_offsets[j]..item_offsets[j + 1] {
                let user = item_users[idx];
                let q = partition.owner(user as usize);
                shards[q].entries.push(RatingEntry {
                    user,
                    item: j as u32,
                    value: user_values[item_pos[idx]],
                    update_count: 0,
                });
            }
        }

        Ok(Self {
            m,
            n,
            partition,
            shards,
            user_offsets,
            user_items,
            user_values,
            item_offsets,
            item_users,
            item_pos,
        })
    }

    /// Single-worker layout, as used by the serial solvers.
    pub fn single(m: usize, n: usize, entries: &[Rating]) -> Result<Self> {
        if m == 0 {
            return Err(Error::Dimension("dataset has no users".into()));
        }
        let partition = crate::model::partition_rows(m, 1)?;
        Self::new(m, n, entries, partition)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.user_items.len()
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    pub fn shard(&self, q: usize) -> &Shard {
        &self.shards[q]
    }

    #[inline]
    pub fn user_degree(&self, i: usize) -> usize {
        self.user_offsets[i + 1] - self.user_offsets[i]
    }

    #[inline]
    pub fn item_degree(&self, j: usize) -> usize {
        self.item_offsets[j + 1] - self.item_offsets[j]
    }

    /// Range of CSR positions holding the ratings of user `i`.
    #[inline]
    pub fn user_range(&self, i: usize) -> std::ops::Range<usize> {
        self.user_offsets[i]..self.user_offsets[i + 1]
    }

    /// Items rated by user `i` and their values, ascending by item.
    #[inline]
    pub fn user_ratings(&self, i: usize) -> (&[u32], &[Real]) {
        let range = self.user_range(i);
        (&self.user_items[range.clone()], &self.user_values[range])
    }

    /// Users who rated item `j` (ascending) and the CSR position of each
    /// rating, for looking up values or residuals.
    #[inline]
    pub fn item_ratings(&self, j: usize) -> (&[u32], &[usize]) {
        let range = self.item_offsets[j]..self.item_offsets[j + 1];
        (&self.item_users[range.clone()], &self.item_pos[range])
    }

    /// Item index and value at a CSR position.
    #[inline]
    pub fn at(&self, pos: usize) -> (u32, Real) {
        (self.user_items[pos], self.user_values[pos])
    }

    pub fn csr_values(&self) -> &[Real] {
        &self.user_values
    }

    /// All ratings in user-major order.
    pub fn ratings(&self) -> Vec<Rating> {
        (0..self.m)
            .flat_map(|i| {
                self.user_range(i)
                    .map(move |pos| Rating::new(i as u32, self.user_items[pos], self.user_values[pos]))
            })
            .collect()
    }
}
