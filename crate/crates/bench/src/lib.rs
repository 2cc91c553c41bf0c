//! Fixtures shared by the kernel and engine benchmarks.

use nomad_core::data::{generate_synthetic, DegreeModel, SyntheticData, SyntheticSpec};
use nomad_core::transport::{ColumnParcel, ParcelBatch};
use nomad_core::{partition_rows, HyperParams, Rating, ShardedRatings};

pub struct Fixture {
    pub data: SyntheticData,
    pub params: HyperParams,
}

impl Fixture {
    /// Power-law synthetic ratings at the given size, with the synthetic
    /// preset hyperparameters.
    pub fn new(users: usize, items: usize, nnz: usize, seed: u64) -> Self {
        let spec = SyntheticSpec {
            n_users: users,
            n_items: items,
            k_true: 10,
            noise_sd: 0.1,
            degrees: DegreeModel::PowerLaw { nnz, exponent: 5.0 },
            seed,
        };
        Self {
            data: generate_synthetic(&spec).expect("fixture spec is valid"),
            params: HyperParams::preset("synthetic").expect("preset exists"),
        }
    }

    /// The generator's desk-scale preset.
    pub fn preset() -> Self {
        Self {
            data: generate_synthetic(&SyntheticSpec::preset(7)).expect("preset is valid"),
            params: HyperParams::preset("synthetic").expect("preset exists"),
        }
    }

    pub fn m(&self) -> usize {
        self.data.meta.m as usize
    }

    pub fn n(&self) -> usize {
        self.data.meta.n as usize
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.data.entries
    }

    pub fn sharded(&self, p: usize) -> ShardedRatings {
        let partition = partition_rows(self.m(), p).expect("p <= m");
        ShardedRatings::new(self.m(), self.n(), self.ratings(), partition).expect("fixture shards")
    }

    /// A batch of `count` parcels built from the ground-truth item rows.
    pub fn parcel_batch(&self, count: usize) -> ParcelBatch {
        let h = &self.data.h_star;
        let parcels = (0..count)
            .map(|i| {
                let j = i % h.rows();
                ColumnParcel {
                    item: j as u32,
                    version: i as u64,
                    h: h.row(j).to_vec(),
                }
            })
            .collect();
        ParcelBatch {
            sender_queue_len: 3,
            parcels,
        }
    }
}
