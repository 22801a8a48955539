//! Federated averaging with partial participation and compressed uplinks.
//!
//! Each round `t` (0-based internally, reported 1-based) samples `K` clients
//! with replacement by their data weights, runs `E` local SGD steps per
//! sampled slot from the broadcast model, compresses the sum of the local
//! gradients, and moves the global model by the aggregated decoded updates.
//!
//! Randomness is split per component and per `(round, slot)`, so results do
//! not depend on the number of worker threads.

use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::LossKind;
use crate::codecs::{Codec, CodecError, EncodedUpdate, Scheme, UpdateVector, DEFAULT_VALUE_BYTES};
use crate::learners::{ClientDataset, Dataset, LearnerError, ModelParams};
use crate::netsim::{round_comm_time_per_client, NetError, NetworkModel};
use crate::seeds::{stream_rng, Seeds};

#[derive(Debug, Error)]
pub enum RoundError {
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("client sampling: {0}")]
    Sampling(String),
    #[error("non-finite gradient from client {client} (slot {slot}) at local step {step}")]
    NonFinite { slot: usize, client: usize, step: usize },
    #[error("update dimension {got} does not match the model dimension {expected}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: RoundError,
    },
}

/// `0.01 / (1 + t·E)`
pub fn lr_schedule_convex(t: usize, local_steps: usize) -> f64 {
    0.01 / (1.0 + (t * local_steps) as f64)
}

/// `0.05 / (1 + √(t·E) / 40)`
pub fn lr_schedule_nonconvex(t: usize, local_steps: usize) -> f64 {
    0.05 / (1.0 + ((t * local_steps) as f64).sqrt() / 40.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Convex,
    Nonconvex,
    Constant { lr: f64 },
    /// `initial / (1 + rate·t·E)`
    InverseTime { initial: f64, rate: f64 },
    Explicit { values: Vec<f64> },
}

impl LrSchedule {
    pub fn for_loss(kind: LossKind) -> Self {
        match kind {
            LossKind::Convex => Self::Convex,
            LossKind::Nonconvex => Self::Nonconvex,
        }
    }

    pub fn rate(&self, t: usize, local_steps: usize) -> Option<f64> {
        match self {
            Self::Convex => Some(lr_schedule_convex(t, local_steps)),
            Self::Nonconvex => Some(lr_schedule_nonconvex(t, local_steps)),
            Self::Constant { lr } => Some(*lr),
            Self::InverseTime { initial, rate } => Some(initial / (1.0 + rate * (t * local_steps) as f64)),
            Self::Explicit { values } => values.get(t).copied(),
        }
    }

    pub fn sequence(&self, rounds: usize, local_steps: usize) -> Result<Vec<f64>, EngineError> {
        (0..rounds)
            .map(|t| match self.rate(t, local_steps) {
                Some(lr) if lr > 0.0 && lr.is_finite() => Ok(lr),
                Some(lr) => Err(EngineError::Config(format!("learning rate {lr} at round {t}"))),
                None => Err(EngineError::Config(format!("learning-rate schedule ends before round {t}"))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `w − (η/K)·Σ Ũ_k` over the sampled slots.
    AnalysisMean,
    /// `w − η·Σ (|D_k| / Σ_j |D_j|)·Ũ_k`, shares taken over the sampled slots.
    WeightedEq4,
}

/// Codec per round: one codec throughout, or a per-round level schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum Compression {
    Fixed(Codec),
    PerRound { scheme: Scheme, counts: Vec<u32> },
}

impl Compression {
    pub fn codec(&self, t: usize) -> Codec {
        match self {
            Self::Fixed(c) => *c,
            Self::PerRound { scheme, counts } => match scheme {
                Scheme::Pq => Codec::Pq { levels: counts[t] },
                Scheme::Qsgd => Codec::Qsgd { levels: counts[t] },
                Scheme::TopK => Codec::TopK { keep: counts[t] as usize },
                Scheme::Raw => Codec::Raw,
            },
        }
    }

    pub fn scheme(&self) -> Scheme {
        match self {
            Self::Fixed(c) => c.scheme(),
            Self::PerRound { scheme, .. } => *scheme,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FLConfig {
    pub clients_per_round: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub lr: LrSchedule,
    pub compression: Compression,
    pub aggregation: Aggregation,
    pub seeds: Seeds,
    pub value_bytes: u32,
    /// Worker threads for client updates; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl FLConfig {
    pub fn new(clients_per_round: usize, local_steps: usize, batch_size: usize, rounds: usize, compression: Compression, seeds: Seeds) -> Self {
        Self {
            clients_per_round,
            local_steps,
            batch_size,
            rounds,
            lr: LrSchedule::Convex,
            compression,
            aggregation: Aggregation::AnalysisMean,
            seeds,
            value_bytes: DEFAULT_VALUE_BYTES,
            threads: None,
        }
    }

    pub fn validate(&self, n_clients: usize) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if n_clients == 0 {
            return bad("empty federation".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > n_clients {
            return bad(format!("K = {} outside 1..={n_clients}", self.clients_per_round));
        }
        if self.local_steps == 0 || self.batch_size == 0 || self.rounds == 0 {
            return bad("E, B and T must be at least 1".into());
        }
        if self.value_bytes == 0 {
            return bad("value width must be at least one byte".into());
        }
        if let Compression::PerRound { counts, .. } = &self.compression {
            if counts.len() != self.rounds {
                return bad(format!("plan has {} rounds, T = {}", counts.len(), self.rounds));
            }
        }
        if self.threads == Some(0) {
            return bad("thread count must be positive".into());
        }
        self.lr.sequence(self.rounds, self.local_steps).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 1-based round number.
    pub t: usize,
    pub selected: Vec<usize>,
    pub lr: f64,
    /// Level or kept count used this round (`d` for raw).
    pub z: u32,
    /// Mean local batch loss over all slots and local steps.
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub bits_exact: u64,
    pub bits_cum: u64,
    pub comm_s: f64,
    pub compute_s: f64,
}

/// `K` i.i.d. draws from the categorical distribution `p`.
pub fn sample_clients<R: Rng + ?Sized>(p: &[f64], k: usize, rng: &mut R) -> Result<Vec<usize>, RoundError> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(RoundError::Sampling("weights must be finite and non-negative".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(RoundError::Sampling(format!("weights sum to {total}, not 1")));
    }
    let dist = WeightedIndex::new(p).map_err(|e| RoundError::Sampling(e.to_string()))?;
    Ok((0..k).map(|_| dist.sample(rng)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// Sum of the `E` batch gradients.
    pub update: UpdateVector,
    /// Local model after the last step.
    pub local: Vec<f64>,
    pub mean_loss: f64,
}

/// `E` SGD steps from `w` on batches of `B` drawn without replacement,
/// reshuffled every step; clients with at most `B` samples use all of them.
pub fn local_update<R: Rng + ?Sized>(
    w: &ModelParams,
    client: &ClientDataset,
    local_steps: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut R,
) -> Result<LocalUpdate, RoundError> {
    let n = client.data.len();
    if n == 0 {
        return Err(LearnerError::Empty("client dataset").into());
    }
    let mut local = w.clone();
    let mut sum = vec![0.0; w.dim()];
    let mut grad = vec![0.0; w.dim()];
    let mut loss = 0.0;
    let full: Vec<usize> = (0..n).collect();
    for step in 0..local_steps {
        let batch = if n <= batch_size {
            full.clone()
        } else {
            index::sample(rng, n, batch_size).into_vec()
        };
        loss += local.loss_and_grad_into(&client.data, &batch, &mut grad)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(RoundError::NonFinite {
                slot: usize::MAX,
                client: client.id,
                step,
            });
        }
        for ((s, wi), g) in sum.iter_mut().zip(local.w.iter_mut()).zip(&grad) {
            *s += g;
            *wi -= lr * g;
        }
    }
    Ok(LocalUpdate {
        update: UpdateVector::new(sum).map_err(RoundError::Codec)?,
        local: local.w,
        mean_loss: loss / local_steps as f64,
    })
}

/// Applies the decoded updates to `w`. `sizes` are the slots' `|D_k|`,
/// used only by [`Aggregation::WeightedEq4`].
pub fn aggregate(
    w: &[f64],
    updates: &[EncodedUpdate],
    lr: f64,
    rule: Aggregation,
    sizes: &[usize],
) -> Result<Vec<f64>, RoundError> {
    if updates.is_empty() {
        return Err(RoundError::Sampling("no updates to aggregate".into()));
    }
    let d = w.len();
    let coefficients: Vec<f64> = match rule {
        Aggregation::AnalysisMean => vec![1.0; updates.len()],
        Aggregation::WeightedEq4 => {
            if sizes.len() != updates.len() {
                return Err(RoundError::Dimension {
                    expected: updates.len(),
                    got: sizes.len(),
                });
            }
            let total: usize = sizes.iter().sum();
            sizes.iter().map(|&s| s as f64 / total as f64).collect()
        }
    };
    let mut sum = vec![0.0; d];
    let mut buf = vec![0.0; d];
    for (e, c) in updates.iter().zip(&coefficients) {
        if e.dim() != d {
            return Err(RoundError::Dimension { expected: d, got: e.dim() });
        }
        buf.fill(0.0);
        e.decode_into(&mut buf)?;
        for (s, v) in sum.iter_mut().zip(&buf) {
            *s += c * v;
        }
    }
    let step = match rule {
        Aggregation::AnalysisMean => lr / updates.len() as f64,
        Aggregation::WeightedEq4 => lr,
    };
    Ok(w.iter().zip(&sum).map(|(wi, s)| wi - step * s).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub params: ModelParams,
}

pub fn run(
    config: &FLConfig,
    init: ModelParams,
    clients: &[ClientDataset],
    test: &Dataset,
    net: &NetworkModel,
) -> Result<RunOutput, EngineError> {
    let mut metrics = Vec::with_capacity(config.rounds);
    let params = run_observed(config, init, clients, test, net, |m| metrics.push(m.clone()))?;
    Ok(RunOutput { metrics, params })
}

/// As [`run`], handing each round's metrics to `on_round` as it completes,
/// so callers keep the completed prefix when a later round fails.
pub fn run_observed<F: FnMut(&RoundMetrics)>(
    config: &FLConfig,
    init: ModelParams,
    clients: &[ClientDataset],
    test: &Dataset,
    net: &NetworkModel,
    mut on_round: F,
) -> Result<ModelParams, EngineError> {
    config.validate(clients.len())?;
    net.validate().map_err(|e| EngineError::Config(e.to_string()))?;
    let lrs = config.lr.sequence(config.rounds, config.local_steps)?;
    let p: Vec<f64> = clients.iter().map(|c| c.weight).collect();
    let pool = match config.threads {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| EngineError::Config(e.to_string()))?,
        ),
        None => None,
    };

    let mut params = init;
    let mut bits_cum = 0u64;
    for (t, &lr) in lrs.iter().enumerate() {
        let started = Instant::now();
        let round = |source| EngineError::Round { round: t + 1, source };
        let selected = sample_clients(&p, config.clients_per_round, &mut stream_rng(config.seeds.sampling, t as u64, 0))
            .map_err(round)?;
        let codec = config.compression.codec(t);

        let slot_work = |slot: usize| -> Result<(EncodedUpdate, f64), RoundError> {
            let client = &clients[selected[slot]];
            let mut batch_rng = stream_rng(config.seeds.batching, t as u64, slot as u64);
            let lu = local_update(&params, client, config.local_steps, config.batch_size, lr, &mut batch_rng)
                .map_err(|e| match e {
                    RoundError::NonFinite { client, step, .. } => RoundError::NonFinite { slot, client, step },
                    other => other,
                })?;
            let mut codec_rng = stream_rng(config.seeds.codec, t as u64, slot as u64);
            let encoded = codec.encode(&lu.update, config.value_bytes, &mut codec_rng)?;
            Ok((encoded, lu.mean_loss))
        };
        let slots = 0..config.clients_per_round;
        let results: Vec<Result<(EncodedUpdate, f64), RoundError>> = match &pool {
            Some(pool) => pool.install(|| slots.into_par_iter().map(slot_work).collect()),
            None => slots.into_par_iter().map(slot_work).collect(),
        };
        let mut encoded = Vec::with_capacity(results.len());
        let mut loss = 0.0;
        for r in results {
            let (e, l) = r.map_err(round)?;
            loss += l;
            encoded.push(e);
        }
        let sizes: Vec<usize> = selected.iter().map(|&i| clients[i].data.len()).collect();
        let w = aggregate(&params.w, &encoded, lr, config.aggregation, &sizes).map_err(round)?;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(round(RoundError::NonFinite {
                slot: usize::MAX,
                client: usize::MAX,
                step: config.local_steps,
            }));
        }
        params.w = w;

        let bits: Vec<f64> = encoded.iter().map(|e| e.payload_bits() as f64).collect();
        let bits_exact: u64 = encoded.iter().map(EncodedUpdate::payload_bits).sum();
        bits_cum += bits_exact;
        let throughputs = net.sample_round(config.clients_per_round, config.seeds.network, t as u64);
        let comm_s = round_comm_time_per_client(&bits, &throughputs)
            .map_err(|e| round(e.into()))?;
        let test_accuracy = params.accuracy(test).map_err(|e| round(e.into()))?;

        on_round(&RoundMetrics {
            t: t + 1,
            selected,
            lr,
            z: encoded[0].count(),
            train_loss: loss / config.clients_per_round as f64,
            test_accuracy,
            bits_exact,
            bits_cum,
            comm_s,
            compute_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok(params)
}
