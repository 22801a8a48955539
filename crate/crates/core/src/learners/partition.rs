use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, LearnerError};

/// Class redraws per client before a non-IID partition gives up.
pub const PARTITION_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Iid,
    Noniid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub id: usize,
    pub data: Dataset,
    /// `|D_i| / Σ_j |D_j|`
    pub weight: f64,
    /// Positions of this client's samples in the source dataset.
    pub source_indices: Vec<usize>,
}

/// Splits `data` into `n_clients` disjoint shards of `samples_per_client`.
///
/// `Iid` shuffles and deals. `Noniid` gives each client `classes_per_client`
/// distinct classes, drawn one at a time with probability proportional to
/// the samples each class has left, then samples uniformly from the
/// remaining pool of those classes. A client whose drawn classes cannot
/// cover its quota redraws, up to [`PARTITION_RETRIES`] times.
pub fn partition<R: Rng + ?Sized>(
    data: &Dataset,
    n_clients: usize,
    mode: PartitionMode,
    samples_per_client: usize,
    classes_per_client: usize,
    rng: &mut R,
) -> Result<Vec<ClientDataset>, LearnerError> {
    if n_clients == 0 || samples_per_client == 0 {
        return Err(LearnerError::Partition("need at least one client and one sample each".into()));
    }
    let needed = n_clients * samples_per_client;
    if needed > data.len() {
        return Err(LearnerError::Partition(format!(
            "{n_clients} clients x {samples_per_client} samples exceeds the {} available",
            data.len()
        )));
    }
    let shards = match mode {
        PartitionMode::Iid => {
            let mut all: Vec<usize> = (0..data.len()).collect();
            all.shuffle(rng);
            all.truncate(needed);
            all.chunks_exact(samples_per_client).map(<[usize]>::to_vec).collect()
        }
        PartitionMode::Noniid => noniid(data, n_clients, samples_per_client, classes_per_client, rng)?,
    };
    let total: usize = shards.iter().map(Vec::len).sum();
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(id, idx)| ClientDataset {
            id,
            data: data.subset(&idx),
            weight: idx.len() as f64 / total as f64,
            source_indices: idx,
        })
        .collect())
}

fn noniid<R: Rng + ?Sized>(
    data: &Dataset,
    n_clients: usize,
    quota: usize,
    classes_per_client: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, LearnerError> {
    let n_classes = data.n_classes();
    if classes_per_client == 0 || classes_per_client > n_classes {
        return Err(LearnerError::Partition(format!(
            "classes per client {classes_per_client} outside 1..={n_classes}"
        )));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in data.labels().iter().enumerate() {
        pools[l as usize].push(i);
    }

    let mut shards = Vec::with_capacity(n_clients);
    for client in 0..n_clients {
        let mut chosen = None;
        for _ in 0..PARTITION_RETRIES {
            let classes = draw_classes(&pools, classes_per_client, rng);
            let available: usize = classes.iter().map(|&c| pools[c].len()).sum();
            if classes.len() == classes_per_client && available >= quota {
                chosen = Some(classes);
                break;
            }
        }
        let Some(mut classes) = chosen else {
            return Err(LearnerError::Partition(format!(
                "client {client}: no {classes_per_client}-class draw covers {quota} samples after {PARTITION_RETRIES} tries"
            )));
        };
        classes.sort_unstable();
        let union: usize = classes.iter().map(|&c| pools[c].len()).sum();
        let mut taken = vec![false; union];
        for p in index::sample(rng, union, quota) {
            taken[p] = true;
        }
        let mut shard = Vec::with_capacity(quota);
        let mut flags = taken.into_iter();
        for &c in &classes {
            let mut keep = Vec::with_capacity(pools[c].len());
            for (&i, t) in pools[c].iter().zip(flags.by_ref()) {
                if t {
                    shard.push(i);
                } else {
                    keep.push(i);
                }
            }
            pools[c] = keep;
        }
        shard.sort_unstable();
        shards.push(shard);
    }
    Ok(shards)
}

/// Distinct classes drawn sequentially, weighted by remaining pool size.
fn draw_classes<R: Rng + ?Sized>(pools: &[Vec<usize>], k: usize, rng: &mut R) -> Vec<usize> {
    let mut weights: Vec<usize> = pools.iter().map(Vec::len).collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: usize = weights.iter().sum();
        if total == 0 {
            break;
        }
        let mut r = rng.random_range(0..total);
        let c = weights
            .iter()
            .position(|&w| {
                if r < w {
                    true
                } else {
                    r -= w;
                    false
                }
            })
            .expect("r < total");
        out.push(c);
        weights[c] = 0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::synthetic_classification;
    use crate::seeds::rng_from;
    use std::collections::HashSet;

    fn check_disjoint(clients: &[ClientDataset], expected_total: usize) {
        let mut seen = HashSet::new();
        for c in clients {
            for &i in &c.source_indices {
                assert!(seen.insert(i), "sample {i} assigned twice");
            }
        }
        assert_eq!(seen.len(), expected_total);
        let sum: f64 = clients.iter().map(|c| c.weight).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iid_exact_cover() {
        let data = synthetic_classification(1, 6000, 2, 10, 1.0);
        let clients = partition(&data, 10, PartitionMode::Iid, 600, 10, &mut rng_from(3)).unwrap();
        check_disjoint(&clients, 6000);
        assert!(clients.iter().all(|c| c.data.len() == 600 && (c.weight - 0.1).abs() < 1e-15));
        for c in &clients {
            for (k, &i) in c.source_indices.iter().enumerate() {
                assert_eq!(c.data.row(k), data.row(i));
            }
        }
    }

    #[test]
    fn noniid_supports_at_most_five_classes() {
        let data = synthetic_classification(2, 6000, 2, 10, 1.0);
        let clients = partition(&data, 20, PartitionMode::Noniid, 250, 5, &mut rng_from(4)).unwrap();
        check_disjoint(&clients, 5000);
        for c in &clients {
            let support = c.data.class_counts().iter().filter(|&&n| n > 0).count();
            assert!(support <= 5, "client {} has {support} classes", c.id);
        }
    }

    #[test]
    fn noniid_with_all_classes_covers_everything() {
        let data = synthetic_classification(5, 1000, 2, 10, 1.0);
        let clients = partition(&data, 10, PartitionMode::Noniid, 100, 10, &mut rng_from(5)).unwrap();
        check_disjoint(&clients, 1000);
    }

    #[test]
    fn deterministic() {
        let data = synthetic_classification(2, 600, 2, 10, 1.0);
        let a = partition(&data, 6, PartitionMode::Noniid, 80, 3, &mut rng_from(8)).unwrap();
        let b = partition(&data, 6, PartitionMode::Noniid, 80, 3, &mut rng_from(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        let data = synthetic_classification(2, 100, 2, 4, 1.0);
        assert!(partition(&data, 11, PartitionMode::Iid, 10, 4, &mut rng_from(1)).is_err());
        assert!(partition(&data, 2, PartitionMode::Noniid, 10, 5, &mut rng_from(1)).is_err());
        // one class per client, 25 samples per class: a 30-sample quota never fits
        assert!(matches!(
            partition(&data, 2, PartitionMode::Noniid, 30, 1, &mut rng_from(1)),
            Err(LearnerError::Partition(_))
        ));
    }
}
