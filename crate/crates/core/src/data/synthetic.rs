//! Low-rank synthetic ratings with realistic degree skew.
//!
//! Degrees are drawn per user and per item, the two degree sequences are
//! reconciled to the same total, and rating locations are matched by a
//! configuration-model sampler that rejects repeated (user, item) pairs.
//! Values are `<w*, h*> + noise` with standard Gaussian ground-truth factors.

use std::collections::HashSet;
use std::io::BufRead;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};

use super::{DatasetMeta, Rating, SourceFormat};
use crate::error::{Error, Result};
use crate::model::{dot, FactorMatrix};
use crate::Real;

/// Distribution of per-row rating counts, from `degree count` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct DegreeHistogram {
    pub bins: Vec<(u32, u64)>,
}

impl DegreeHistogram {
    pub fn new(bins: Vec<(u32, u64)>) -> Result<Self> {
        if bins.iter().all(|&(_, c)| c == 0) {
            return Err(Error::Infeasible("degree histogram has no mass".into()));
        }
        Ok(Self { bins })
    }

    pub fn max_degree(&self) -> u32 {
        self.bins.iter().filter(|b| b.1 > 0).map(|b| b.0).max().unwrap_or(0)
    }

    fn sample_n(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let dist = WeightedIndex::new(self.bins.iter().map(|b| b.1)).expect("validated in new");
        (0..count).map(|_| self.bins[dist.sample(rng)].0 as usize).collect()
    }
}

pub fn parse_degree_histogram<R: BufRead>(reader: R) -> Result<DegreeHistogram> {
    let mut bins = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mut it = t.split_whitespace();
        let parse = |s: Option<&str>| -> Result<u64> {
            s.and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected `degree count`, got `{t}`"),
            })
        };
        let degree = parse(it.next())?;
        let count = parse(it.next())?;
        bins.push((degree as u32, count));
    }
    DegreeHistogram::new(bins)
}

#[derive(Clone, Debug, PartialEq)]
pub enum DegreeModel {
    /// Degrees sampled i.i.d. from reference histograms.
    Empirical {
        users: DegreeHistogram,
        items: DegreeHistogram,
    },
    /// Pareto-tailed degrees (density exponent `exponent`) rescaled so the
    /// expected total is `nnz`.
    PowerLaw { nnz: usize, exponent: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub k_true: usize,
    pub noise_sd: f64,
    pub degrees: DegreeModel,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Desk-scale preset: 2000 users, 500 items, rank 10, noise 0.1,
    /// about 10^5 ratings.
    pub fn preset(seed: u64) -> Self {
        Self {
            n_users: 2000,
            n_items: 500,
            k_true: 10,
            noise_sd: 0.1,
            degrees: DegreeModel::PowerLaw {
                nnz: 100_000,
                exponent: 5.0,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 {
            return Err(Error::Config("synthetic data needs at least one user and one item".into()));
        }
        if self.k_true == 0 {
            return Err(Error::Config("ground-truth rank must be at least 1".into()));
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::Config(format!("noise_sd = {} must be >= 0", self.noise_sd)));
        }
        if let DegreeModel::PowerLaw { exponent, .. } = self.degrees {
            if !(exponent > 1.0) {
                return Err(Error::Config(format!("power-law exponent {exponent} must exceed 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub meta: DatasetMeta,
    pub entries: Vec<Rating>,
    pub w_star: FactorMatrix,
    pub h_star: FactorMatrix,
}

fn power_law_degrees(count: usize, total: usize, exponent: f64, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let shape = 1.0 / (exponent - 1.0);
    let raw: Vec<f64> = (0..count)
        .map(|_| {
            let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
            u.powf(-shape)
        })
        .collect();
    let degrees = |scale: f64| -> Vec<usize> { raw.iter().map(|r| ((r * scale).round() as usize).clamp(1, cap)).collect() };
    // Clamping at `cap` drops tail mass, so search for the scale whose
    // clamped degrees reach `total` instead of using the naive ratio.
    let (mut lo, mut hi) = (0.0, total as f64 / raw.iter().sum::<f64>());
    while degrees(hi).iter().sum::<usize>() < total && hi < 1e12 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if degrees(mid).iter().sum::<usize>() < total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    degrees(hi)
}

/// Decrements degrees (never below 1) until the sum equals `target`.
fn trim_to(degrees: &mut [usize], target: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut excess = degrees.iter().sum::<usize>().saturating_sub(target);
    let floor = degrees.len();
    if target < floor {
        return Err(Error::Infeasible(format!(
            "{target} ratings cannot give each of {floor} rows at least one"
        )));
    }
    // Remove one stub at a time with probability proportional to degree
    // (by rejection), so light rows keep their shape and the heavy tail pays.
    let mut max = degrees.iter().copied().max().unwrap_or(0);
    while excess > 0 {
        let idx = rng.random_range(0..degrees.len());
        if degrees[idx] > 1 && rng.random_range(0..max) < degrees[idx] {
            degrees[idx] -= 1;
            excess -= 1;
            if degrees[idx] + 1 == max {
                max = degrees.iter().copied().max().unwrap_or(0);
            }
        }
    }
    Ok(())
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (m, n) = (spec.n_users, spec.n_items);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let (mut user_deg, mut item_deg) = match &spec.degrees {
        DegreeModel::Empirical { users, items } => {
            if users.max_degree() as usize > n {
                return Err(Error::Infeasible(format!(
                    "user degree {} exceeds {n} items",
                    users.max_degree()
                )));
            }
            if items.max_degree() as usize > m {
                return Err(Error::Infeasible(format!(
                    "item degree {} exceeds {m} users",
                    items.max_degree()
                )));
            }
            (users.sample_n(m, &mut rng), items.sample_n(n, &mut rng))
        }
        DegreeModel::PowerLaw { nnz, exponent } => {
            if *nnz > m * n {
                return Err(Error::Infeasible(format!("{nnz} ratings exceed a {m}x{n} matrix")));
            }
            (
                power_law_degrees(m, *nnz, *exponent, n, &mut rng),
                power_law_degrees(n, *nnz, *exponent, m, &mut rng),
            )
        }
    };
    let user_total: usize = user_deg.iter().sum();
    let item_total: usize = item_deg.iter().sum();
    if user_total > item_total {
        trim_to(&mut user_deg, item_total, &mut rng)?;
    } else {
        trim_to(&mut item_deg, user_total, &mut rng)?;
    }

    let mut stubs: Vec<u32> = item_deg
        .iter()
        .enumerate()
        .flat_map(|(j, &d)| std::iter::repeat_n(j as u32, d))
        .collect();
    stubs.shuffle(&mut rng);

    // Stubs are dealt to users in order. A repeated (user, item) pair is
    // first swapped with a random later stub; near the end the leftovers
    // crowd onto a few heavy items, so failing that, the pair is exchanged
    // with an earlier edge (i', j') -> (i', j), (i, j'), keeping degrees.
    let mut seen: HashSet<(u32, u32)> = HashSet::with_capacity(stubs.len());
    let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(stubs.len());
    let mut pos = 0usize;
    for (i, &d) in user_deg.iter().enumerate() {
        let i = i as u32;
        for _ in 0..d {
            if pos >= stubs.len() {
                break;
            }
            let mut tries = 0;
            while seen.contains(&(i, stubs[pos])) && tries < 32 && pos + 1 < stubs.len() {
                let swap = rng.random_range(pos + 1..stubs.len());
                stubs.swap(pos, swap);
                tries += 1;
            }
            let j = stubs[pos];
            pos += 1;
            if !seen.contains(&(i, j)) {
                seen.insert((i, j));
                pairs.push((i, j));
                continue;
            }
            for _ in 0..256.min(pairs.len() * 4) {
                let r = rng.random_range(0..pairs.len());
                let (i2, j2) = pairs[r];
                if i2 != i && !seen.contains(&(i, j2)) && !seen.contains(&(i2, j)) {
                    seen.remove(&(i2, j2));
                    seen.insert((i2, j));
                    seen.insert((i, j2));
                    pairs[r] = (i2, j);
                    pairs.push((i, j2));
                    break;
                }
            }
        }
    }

    let k = spec.k_true;
    let mut factor = |rows: usize| -> FactorMatrix {
        let data = (0..rows * k)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z as Real
            })
            .collect();
        FactorMatrix::from_vec(rows, k, data).expect("sized above")
    };
    let w_star = factor(m);
    let h_star = factor(n);
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let entries: Vec<Rating> = pairs
        .into_iter()
        .map(|(i, j)| {
            let clean = dot(w_star.row(i as usize), h_star.row(j as usize));
            let eps: f64 = noise.sample(&mut rng);
            Rating::new(i, j, clean + eps as Real)
        })
        .collect();

    let meta = DatasetMeta {
        name: format!("synthetic-{}x{}-r{}-s{}", m, n, k, spec.seed),
        m: m as u64,
        n: n as u64,
        nnz: entries.len() as u64,
        declared_nnz: None,
        format: SourceFormat::Synthetic,
    };
    Ok(SyntheticData {
        meta,
        entries,
        w_star,
        h_star,
    })
}
