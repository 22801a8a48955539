//! Uplink throughput model and per-round communication time.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::stream_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network model: {0}")]
    Model(String),
    #[error("no clients in the round")]
    NoClients,
    #[error("throughput {0} must be positive")]
    Throughput(f64),
    #[error("traffic {0} must be finite and non-negative")]
    Traffic(f64),
}

/// Gaussian throughput `N(mean, (std_fraction·mean)²)`, redrawn whenever a
/// sample falls below `floor_fraction·mean`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkModel {
    /// bits per second
    pub mean_throughput: f64,
    pub std_fraction: f64,
    pub floor_fraction: f64,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            mean_throughput: 1.4e6,
            std_fraction: 0.10,
            floor_fraction: 0.10,
        }
    }
}

impl NetworkModel {
    pub fn new(mean_throughput: f64, std_fraction: f64, floor_fraction: f64) -> Result<Self, NetError> {
        let m = Self {
            mean_throughput,
            std_fraction,
            floor_fraction,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.mean_throughput > 0.0 && self.mean_throughput.is_finite()) {
            return Err(NetError::Model(format!("mean {} must be positive", self.mean_throughput)));
        }
        if !(0.0..1.0).contains(&self.std_fraction) {
            return Err(NetError::Model(format!("std fraction {} outside [0, 1)", self.std_fraction)));
        }
        if !(self.floor_fraction > 0.0 && self.floor_fraction < 1.0) {
            return Err(NetError::Model(format!("floor fraction {} outside (0, 1)", self.floor_fraction)));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.std_fraction == 0.0 {
            return self.mean_throughput;
        }
        let normal = Normal::new(self.mean_throughput, self.std_fraction * self.mean_throughput)
            .expect("validated model");
        let floor = self.floor_fraction * self.mean_throughput;
        loop {
            let theta = normal.sample(rng);
            if theta >= floor {
                return theta;
            }
        }
    }

    pub fn sample_throughputs<R: Rng + ?Sized>(&self, clients: usize, rng: &mut R) -> Vec<f64> {
        (0..clients).map(|_| self.sample(rng)).collect()
    }

    /// Throughputs of the `clients` selected in `round`, from that round's
    /// own stream.
    pub fn sample_round(&self, clients: usize, seed: u64, round: u64) -> Vec<f64> {
        self.sample_throughputs(clients, &mut stream_rng(seed, round, 0))
    }
}

/// Round time with a common per-client traffic `bits`: `bits / min θ_k`.
pub fn round_comm_time(bits: f64, throughputs: &[f64]) -> Result<f64, NetError> {
    if !(bits >= 0.0 && bits.is_finite()) {
        return Err(NetError::Traffic(bits));
    }
    let slowest = slowest(throughputs)?;
    Ok(bits / slowest)
}

/// Round time `max_k bits_k / θ_k` when clients send different amounts.
pub fn round_comm_time_per_client(bits: &[f64], throughputs: &[f64]) -> Result<f64, NetError> {
    slowest(throughputs)?;
    if bits.len() != throughputs.len() {
        return Err(NetError::Model(format!(
            "{} traffic values for {} clients",
            bits.len(),
            throughputs.len()
        )));
    }
    let mut worst = 0.0f64;
    for (&m, &theta) in bits.iter().zip(throughputs) {
        if !(m >= 0.0 && m.is_finite()) {
            return Err(NetError::Traffic(m));
        }
        worst = worst.max(m / theta);
    }
    Ok(worst)
}

fn slowest(throughputs: &[f64]) -> Result<f64, NetError> {
    if throughputs.is_empty() {
        return Err(NetError::NoClients);
    }
    let mut least = f64::INFINITY;
    for &theta in throughputs {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(NetError::Throughput(theta));
        }
        least = least.min(theta);
    }
    Ok(least)
}
