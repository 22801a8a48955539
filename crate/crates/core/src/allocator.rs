//! Rate allocation over training rounds.
//!
//! Chooses per-round centroid counts `Z_t`, with `x_t = log2 Z_t`, to minimize
//! `Σ_t a_t·J(x_t)` subject to `Σ_t x_t ≤ B` (bits per model dimension) and
//! `x_min ≤ x_t ≤ x_max`, where `a_t` is the learning rate (convex loss) or
//! its square (non-convex loss) and `J` an [`ErrorBoundFamily`].
//!
//! The relaxed problem is solved by water-filling: for a multiplier `λ`, each
//! round independently minimizes `a_t·J(x) + λ·x`, and `λ` is bisected so the
//! budget binds. The real solution is then rounded to integer `Z_t` and
//! repaired greedily back into the budget. [`brute_force_allocate`] and
//! [`exact_integer_allocate`] give the exact integer optimum for checking.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{BoundsError, ErrorBoundFamily};
use crate::codecs::bits::index_width;
use crate::codecs::Scheme;

/// Slack allowed on the bit budget.
pub const BUDGET_TOLERANCE: f64 = 1e-9;
/// Default upper bound on `x_t`, i.e. `Z ≤ 65536`.
pub const DEFAULT_MAX_BITS: f64 = 16.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("budget {budget} bits/dim is below the minimum {minimum} = T·x_min")]
    Infeasible { budget: f64, minimum: f64 },
    #[error("weight a_{index} = {value} must be positive and finite")]
    Weight { index: usize, value: f64 },
    #[error("no rounds to allocate")]
    NoRounds,
    #[error("invalid box [{x_min}, {x_max}] for {scheme:?}")]
    Box { scheme: Scheme, x_min: f64, x_max: f64 },
    #[error("bound family is not convex and decreasing on [{lo}, {hi}]")]
    NotConvexDecreasing { lo: f64, hi: f64 },
    #[error("{0:?} is allocated by kept count, not centroid count")]
    WrongFamily(Scheme),
    #[error("oracle scale guard: {reason}")]
    OracleScale { reason: String },
    #[error("no candidate level satisfies the budget")]
    NoFeasibleCandidate,
    #[error(transparent)]
    Bounds(#[from] BoundsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Convex,
    Nonconvex,
}

/// Per-round objective weights: `η_t` for convex losses, `η_t²` otherwise.
///
/// Client weights `p_i` drop out because every client shares the same bound
/// family, so `Σ_i p_i·J_t^i = J(Z_t)`.
pub fn weights_from_schedule(lr: &[f64], kind: LossKind) -> Result<Vec<f64>, AllocError> {
    if let Some((index, &value)) = lr.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(AllocError::Weight { index, value });
    }
    Ok(match kind {
        LossKind::Convex => lr.to_vec(),
        LossKind::Nonconvex => lr.iter().map(|e| e * e).collect(),
    })
}

/// A rate-allocation instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    weights: Vec<f64>,
    family: ErrorBoundFamily,
    budget: f64,
    x_min: f64,
    x_max: f64,
}

impl AllocationProblem {
    /// Instance with the default box: `x_min = 1` for PQ (its bound is
    /// singular at `Z = 1`), `0` for QSGD, and `x_max = 16`.
    pub fn new(weights: Vec<f64>, family: ErrorBoundFamily, budget_bits_per_dim: f64) -> Result<Self, AllocError> {
        let x_min = match family.scheme() {
            Scheme::Pq => 1.0,
            Scheme::Qsgd => 0.0,
            other => return Err(AllocError::WrongFamily(other)),
        };
        Self::with_box(weights, family, budget_bits_per_dim, x_min, DEFAULT_MAX_BITS)
    }

    pub fn with_box(
        weights: Vec<f64>,
        family: ErrorBoundFamily,
        budget_bits_per_dim: f64,
        x_min: f64,
        x_max: f64,
    ) -> Result<Self, AllocError> {
        let scheme = family.scheme();
        if weights.is_empty() {
            return Err(AllocError::NoRounds);
        }
        if let Some((index, &value)) = weights
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(AllocError::Weight { index, value });
        }
        let floor = match scheme {
            Scheme::Pq => 1.0,
            Scheme::Qsgd => 0.0,
            other => return Err(AllocError::WrongFamily(other)),
        };
        if !(x_min >= floor && x_max > x_min && x_max.is_finite()) {
            return Err(AllocError::Box { scheme, x_min, x_max });
        }
        let minimum = weights.len() as f64 * x_min;
        if !(budget_bits_per_dim + BUDGET_TOLERANCE >= minimum) {
            return Err(AllocError::Infeasible {
                budget: budget_bits_per_dim,
                minimum,
            });
        }
        let problem = Self {
            weights,
            family,
            budget: budget_bits_per_dim,
            x_min,
            x_max,
        };
        problem.check_convex_decreasing()?;
        Ok(problem)
    }

    pub fn rounds(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn family(&self) -> &ErrorBoundFamily {
        &self.family
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    /// Smallest and largest admissible integer level counts.
    pub fn level_range(&self) -> (u32, u32) {
        let lo = (self.x_min.exp2() - 1e-9).ceil().max(1.0) as u32;
        let hi = (self.x_max.exp2() + 1e-9).floor().min(u32::MAX as f64) as u32;
        (lo, hi)
    }

    /// `Σ_t a_t·J(x_t)`.
    pub fn objective_bits(&self, x: &[f64]) -> Result<f64, AllocError> {
        let mut total = 0.0;
        for (a, &x) in self.weights.iter().zip(x) {
            total += a * self.family.at_bits(x)?;
        }
        Ok(total)
    }

    /// `Σ_t a_t·J(Z_t)`.
    pub fn objective_levels(&self, z: &[u32]) -> Result<f64, AllocError> {
        let mut total = 0.0;
        for (a, &z) in self.weights.iter().zip(z) {
            total += a * self.family.at_level(z as f64)?;
        }
        Ok(total)
    }

    /// Largest product of level counts within the budget, `floor(2^(B + tol))`.
    fn level_product_cap(&self) -> Result<u64, AllocError> {
        let exponent = self.budget + BUDGET_TOLERANCE;
        if exponent >= 63.0 {
            return Err(AllocError::OracleScale {
                reason: format!("budget {} bits/dim overflows the level product", self.budget),
            });
        }
        Ok(exponent.exp2().floor() as u64)
    }

    /// Derivative sign check on a grid of each smooth piece.
    fn check_convex_decreasing(&self) -> Result<(), AllocError> {
        const GRID: usize = 64;
        for (lo, hi) in self.family.convex_pieces(self.x_min, self.x_max)? {
            let mut previous = f64::NEG_INFINITY;
            for i in 0..=GRID {
                // stay just inside the piece so the branch is unambiguous
                let s = (i as f64 + 0.5) / (GRID as f64 + 1.0);
                let x = lo + s * (hi - lo);
                let g = self.family.derivative_bits(x)?;
                if !(g < 0.0) || g < previous - 1e-12 * g.abs() {
                    return Err(AllocError::NotConvexDecreasing { lo, hi });
                }
                previous = g;
            }
        }
        Ok(())
    }
}

/// Solution of the relaxed problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Lagrange multiplier of the budget constraint.
    pub multiplier: f64,
    /// Lagrangian dual value, a lower bound on the relaxed optimum.
    pub dual_bound: f64,
    /// Largest stationarity or budget violation, relative to the multiplier.
    pub kkt_residual: f64,
}

/// `argmin_x a·J(x) + λ·x` on `[lo, hi]`, one bisection per convex piece.
fn round_minimizer(family: &ErrorBoundFamily, pieces: &[(f64, f64)], a: f64, lambda: f64) -> f64 {
    let lagrangian = |x: f64| a * family.at_bits(x).expect("inside box") + lambda * x;
    let slope = |x: f64| a * family.derivative_bits(x).expect("inside box") + lambda;
    let mut best = (f64::INFINITY, pieces[0].0);
    for &(lo, hi) in pieces {
        let x = if slope(lo) >= 0.0 {
            lo
        } else if slope(hi) <= 0.0 {
            hi
        } else {
            let (mut l, mut h) = (lo, hi);
            for _ in 0..200 {
                let mid = 0.5 * (l + h);
                if mid <= l || mid >= h {
                    break;
                }
                if slope(mid) < 0.0 {
                    l = mid;
                } else {
                    h = mid;
                }
            }
            0.5 * (l + h)
        };
        let value = lagrangian(x);
        // ties go to the later (higher-rate) piece
        if value <= best.0 {
            best = (value, x);
        }
    }
    best.1
}

fn minimizers(p: &AllocationProblem, pieces: &[(f64, f64)], lambda: f64) -> Vec<f64> {
    p.weights
        .iter()
        .map(|&a| round_minimizer(&p.family, pieces, a, lambda))
        .collect()
}

/// Water-filling solve of the relaxed problem.
pub fn solve_relaxed(p: &AllocationProblem) -> Result<RelaxedSolution, AllocError> {
    let t = p.rounds();
    let pieces = p.family.convex_pieces(p.x_min, p.x_max)?;

    if t as f64 * p.x_max <= p.budget {
        let x = vec![p.x_max; t];
        let objective = p.objective_bits(&x)?;
        return Ok(RelaxedSolution {
            x,
            objective,
            multiplier: 0.0,
            dual_bound: objective,
            kkt_residual: 0.0,
        });
    }

    let mut steepest = 0.0f64;
    let mut flattest = f64::INFINITY;
    for &(lo, hi) in &pieces {
        steepest = steepest.max(p.family.derivative_bits(lo)?.abs());
        flattest = flattest.min(p.family.derivative_bits(hi)?.abs());
    }
    let a_max = p.weights.iter().cloned().fold(0.0, f64::max);
    let a_min = p.weights.iter().cloned().fold(f64::INFINITY, f64::min);
    // every round sits at x_max below `lo` and at x_min above `hi`
    let mut log_lo = (0.5 * a_min * flattest).ln();
    let mut log_hi = (2.0 * a_max * steepest).ln();
    let total = |x: &[f64]| x.iter().sum::<f64>();

    for _ in 0..400 {
        let mid = 0.5 * (log_lo + log_hi);
        if mid <= log_lo || mid >= log_hi {
            break;
        }
        if total(&minimizers(p, &pieces, mid.exp())) >= p.budget {
            log_lo = mid;
        } else {
            log_hi = mid;
        }
    }
    let lambda = log_hi.exp();
    let mut x = minimizers(p, &pieces, lambda);
    let mut slack = p.budget - total(&x);

    if slack > 1e-12 {
        // The per-round minimizer jumps across a concave kink at this λ:
        // move whole jumps while they fit, then hand the remainder to the
        // single round where it helps most.
        let upper = minimizers(p, &pieces, log_lo.exp());
        let mut jumpers: Vec<usize> = (0..t).filter(|&i| upper[i] - x[i] > 1e-9).collect();
        jumpers.sort_by(|&i, &j| p.weights[j].total_cmp(&p.weights[i]).then(i.cmp(&j)));
        for i in jumpers {
            let step = upper[i] - x[i];
            if step <= slack + 1e-15 {
                x[i] = upper[i];
                slack -= step;
            }
        }
        if slack > 1e-12 {
            let mut best: Option<(f64, usize)> = None;
            for i in 0..t {
                if x[i] + slack <= p.x_max {
                    let gain = p.weights[i] * (p.family.at_bits(x[i])? - p.family.at_bits(x[i] + slack)?);
                    if best.is_none_or(|(g, _)| gain > g) {
                        best = Some((gain, i));
                    }
                }
            }
            if let Some((_, i)) = best {
                x[i] += slack;
            }
        }
    }

    let objective = p.objective_bits(&x)?;
    let dual_bound = {
        let at = minimizers(p, &pieces, lambda);
        let mut d = -lambda * p.budget;
        for (a, &xi) in p.weights.iter().zip(&at) {
            d += a * p.family.at_bits(xi)? + lambda * xi;
        }
        d
    };
    let kkt_residual = kkt_residual(p, &x, lambda)?;
    Ok(RelaxedSolution {
        x,
        objective,
        multiplier: lambda,
        dual_bound,
        kkt_residual,
    })
}

fn kkt_residual(p: &AllocationProblem, x: &[f64], lambda: f64) -> Result<f64, AllocError> {
    let scale = if lambda > 0.0 { lambda } else { 1.0 };
    let mut worst = (p.budget - x.iter().sum::<f64>()).abs().min(f64::MAX);
    if lambda == 0.0 {
        worst = 0.0;
    }
    for (a, &xi) in p.weights.iter().zip(x) {
        let g = a * p.family.derivative_bits(xi)? + lambda;
        let violation = if xi <= p.x_min {
            (-g).max(0.0)
        } else if xi >= p.x_max {
            g.max(0.0)
        } else {
            g.abs()
        };
        worst = worst.max(violation / scale);
    }
    Ok(worst)
}

/// Euclidean projection onto `{x : lo ≤ x ≤ hi, Σx ≤ budget}`.
fn project(y: &[f64], lo: f64, hi: f64, budget: f64) -> Vec<f64> {
    let clamp = |shift: f64| -> Vec<f64> { y.iter().map(|v| (v - shift).clamp(lo, hi)).collect() };
    let direct = clamp(0.0);
    if direct.iter().sum::<f64>() <= budget {
        return direct;
    }
    let mut a = 0.0;
    let mut b = y.iter().map(|v| v - lo).fold(0.0, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if clamp(mid).iter().sum::<f64>() > budget {
            a = mid;
        } else {
            b = mid;
        }
    }
    clamp(b)
}

/// Projected gradient descent with Barzilai–Borwein steps and Armijo
/// backtracking; an independent route to the relaxed optimum.
pub fn solve_projected_gradient(p: &AllocationProblem, max_iter: usize) -> Result<RelaxedSolution, AllocError> {
    let t = p.rounds();
    let grad = |x: &[f64]| -> Result<Vec<f64>, AllocError> {
        p.weights
            .iter()
            .zip(x)
            .map(|(a, &xi)| Ok(a * p.family.derivative_bits(xi)?))
            .collect()
    };
    let mut x = project(&vec![p.budget / t as f64; t], p.x_min, p.x_max, p.budget);
    let mut f = p.objective_bits(&x)?;
    let mut g = grad(&x)?;
    let mut step = 1.0 / g.iter().map(|v| v.abs()).fold(1e-300, f64::max);

    for _ in 0..max_iter {
        let mut s = step;
        let (x_new, f_new) = loop {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - s * gi).collect();
            let cand = project(&trial, p.x_min, p.x_max, p.budget);
            let decrease: f64 = g.iter().zip(&cand).zip(&x).map(|((gi, c), xi)| gi * (c - xi)).sum();
            let fc = p.objective_bits(&cand)?;
            if fc <= f + 1e-4 * decrease || s < 1e-300 {
                break (cand, fc);
            }
            s *= 0.5;
        };
        let g_new = grad(&x_new)?;
        let dx: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let moved = dx.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let dg: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = dx.iter().zip(&dg).map(|(a, b)| a * b).sum();
        let ss: f64 = dx.iter().map(|v| v * v).sum();
        x = x_new;
        f = f_new;
        g = g_new;
        if moved < 1e-14 {
            break;
        }
        step = if sy > 0.0 { ss / sy } else { s * 2.0 };
    }
    // multiplier estimate from the interior rounds
    let interior: Vec<f64> = p
        .weights
        .iter()
        .zip(&x)
        .filter(|(_, &xi)| xi > p.x_min && xi < p.x_max)
        .map(|(a, &xi)| -a * p.family.derivative_bits(xi).expect("inside box"))
        .collect();
    let lambda = if interior.is_empty() {
        0.0
    } else {
        interior.iter().sum::<f64>() / interior.len() as f64
    };
    let kkt_residual = kkt_residual(p, &x, lambda)?;
    Ok(RelaxedSolution {
        objective: f,
        x,
        multiplier: lambda,
        dual_bound: f64::NEG_INFINITY,
        kkt_residual,
    })
}

/// An integer allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    #[serde(rename = "Z")]
    pub z: Vec<u32>,
    pub x_real: Vec<f64>,
    pub objective_relaxed: f64,
    pub objective_rounded: f64,
    /// `Σ_t log2 Z_t`.
    pub budget_used_bits_per_dim: f64,
    pub kkt_residual: f64,
}

/// Greedy increment candidate, ordered by score, then by lowest round.
#[derive(Clone, Copy)]
struct Candidate {
    score: f64,
    t: usize,
    extra: f64,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.t.cmp(&self.t))
    }
}

/// Largest single-round decrement tried by the exchange pass.
const EXCHANGE_DEPTH: u32 = 8;
/// Horizons up to this length also try lowering two rounds together.
const PAIR_EXCHANGE_ROUNDS: usize = 16;

/// Rounds `Z_t = round(2^{x_t})` into the admissible level range, then
/// decrements the cheapest rounds until the budget holds and increments the
/// most valuable rounds while slack remains. A final exchange pass lowers
/// one round (or, on short horizons, two rounds) and refills the rest while
/// the objective improves.
pub fn round_and_repair(relaxed: &RelaxedSolution, p: &AllocationProblem) -> Result<AllocationPlan, AllocError> {
    let (z_lo, z_hi) = p.level_range();
    let mut z: Vec<u32> = relaxed
        .x
        .iter()
        .map(|x| (x.exp2().round().clamp(z_lo as f64, z_hi as f64)) as u32)
        .collect();
    let table: Vec<f64> = (z_lo..=z_hi)
        .map(|z| p.family.at_level(z as f64))
        .collect::<Result<_, _>>()?;
    let bound = |z: u32| table[(z - z_lo) as usize];
    let log_table: Vec<f64> = (z_lo..=z_hi).map(|z| (z as f64).log2()).collect();
    let lg = |z: u32| log_table[(z - z_lo) as usize];
    let bits_used = |z: &[u32]| -> f64 { z.iter().map(|&z| lg(z)).sum() };
    let cost = |t: usize, z: u32| -> Result<f64, AllocError> { Ok(p.weights[t] * bound(z)) };
    let objective_of = |z: &[u32]| -> Result<f64, AllocError> {
        let mut total = 0.0;
        for (a, &z) in p.weights.iter().zip(z) {
            total += a * bound(z);
        }
        Ok(total)
    };
    let limit = p.budget + BUDGET_TOLERANCE;

    let mut used = bits_used(&z);
    while used > limit {
        let mut pick: Option<(f64, usize)> = None;
        for t in 0..z.len() {
            if z[t] > z_lo {
                let raise = cost(t, z[t] - 1)? - cost(t, z[t])?;
                if pick.is_none_or(|(r, _)| raise < r) {
                    pick = Some((raise, t));
                }
            }
        }
        // feasibility of the problem guarantees a decrement exists
        let (_, t) = pick.expect("budget >= T*x_min");
        z[t] -= 1;
        used = bits_used(&z);
    }

    // greedy increments within the budget, ranked by gain or by gain per bit;
    // a candidate that no longer fits never fits again, since spending only grows
    let candidate = |t: usize, z: u32, per_bit: bool| -> Result<Option<Candidate>, AllocError> {
        if z >= z_hi {
            return Ok(None);
        }
        let extra = lg(z + 1) - lg(z);
        let gain = cost(t, z)? - cost(t, z + 1)?;
        let score = if per_bit { gain / extra } else { gain };
        Ok((gain > 0.0).then_some(Candidate { score, t, extra }))
    };
    // first increments of every round, best first
    let ranking = |z: &[u32], per_bit: bool| -> Result<Vec<Candidate>, AllocError> {
        let mut c = Vec::with_capacity(z.len());
        for (t, &zt) in z.iter().enumerate() {
            c.extend(candidate(t, zt, per_bit)?);
        }
        c.sort_unstable_by(|a, b| b.cmp(a));
        Ok(c)
    };
    // `first` ranks a base plan; `z` may differ from it in the `stale` rounds,
    // and `frozen` (one of them) is never raised
    let greedy = |z: &mut Vec<u32>, first: &[Candidate], stale: &[usize], frozen: Option<usize>, per_bit: bool| {
        let mut used = bits_used(z);
        let mut heap = BinaryHeap::new();
        for &t in stale {
            if frozen != Some(t) {
                heap.extend(candidate(t, z[t], per_bit)?);
            }
        }
        let mut rest = first.iter().filter(|c| !stale.contains(&c.t)).peekable();
        loop {
            let from_heap = match (heap.peek(), rest.peek()) {
                (None, None) => break,
                (Some(h), Some(r)) => h > *r,
                (h, _) => h.is_some(),
            };
            let c = if from_heap { heap.pop() } else { rest.next().copied() }.expect("peeked");
            if used + c.extra <= limit {
                z[c.t] += 1;
                used += c.extra;
                heap.extend(candidate(c.t, z[c.t], per_bit)?);
            }
        }
        Ok::<f64, AllocError>(bits_used(z))
    };
    let fill = |z: &mut Vec<u32>, base: &[Vec<Candidate>; 2], stale: &[usize], frozen: Option<usize>| {
        let mut by_ratio = z.clone();
        let ratio_used = greedy(&mut by_ratio, &base[1], stale, frozen, true)?;
        let used = greedy(z, &base[0], stale, frozen, false)?;
        if improves(objective_of(&by_ratio)?, objective_of(z)?) {
            *z = by_ratio;
            return Ok(ratio_used);
        }
        Ok::<f64, AllocError>(used)
    };
    let rankings = |z: &[u32]| -> Result<[Vec<Candidate>; 2], AllocError> { Ok([ranking(z, false)?, ranking(z, true)?]) };
    let base = rankings(&z)?;
    used = fill(&mut z, &base, &[], None)?;

    // exchange: give up a few levels somewhere and refill the other rounds
    // greedily, as long as that strictly lowers the objective
    let mut objective = objective_of(&z)?;
    loop {
        let base = rankings(&z)?;
        let mut best: Option<(f64, Vec<u32>, f64)> = None;
        let mut moves: Vec<(usize, u32, Option<usize>)> = Vec::new();
        for j in 0..z.len() {
            for drop in 1..=EXCHANGE_DEPTH.min(z[j] - z_lo) {
                moves.push((j, drop, None));
            }
            if z.len() <= PAIR_EXCHANGE_ROUNDS && z[j] > z_lo {
                for i in j + 1..z.len() {
                    if z[i] > z_lo {
                        moves.push((j, 1, Some(i)));
                    }
                }
            }
        }
        for (j, drop, second) in moves {
            let mut trial = z.clone();
            trial[j] -= drop;
            let stale = match second {
                Some(i) => {
                    trial[i] -= 1;
                    vec![j, i]
                }
                None => vec![j],
            };
            let trial_used = fill(&mut trial, &base, &stale, Some(j))?;
            let value = objective_of(&trial)?;
            if improves(value, best.as_ref().map_or(objective, |b| b.0)) {
                best = Some((value, trial, trial_used));
            }
        }
        match best {
            Some((value, trial, trial_used)) => {
                objective = value;
                z = trial;
                used = trial_used;
            }
            None => break,
        }
    }

    Ok(AllocationPlan {
        objective_rounded: objective_of(&z)?,
        budget_used_bits_per_dim: used,
        z,
        x_real: relaxed.x.clone(),
        objective_relaxed: relaxed.objective,
        kkt_residual: relaxed.kkt_residual,
    })
}

/// Relaxed solve followed by rounding and repair.
pub fn allocate(p: &AllocationProblem) -> Result<AllocationPlan, AllocError> {
    let relaxed = solve_relaxed(p)?;
    round_and_repair(&relaxed, p)
}

/// Exact optimum over an integer candidate grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegerOptimum {
    pub z: Vec<u32>,
    pub objective: f64,
}

fn sorted_candidates(p: &AllocationProblem, candidates: &[u32]) -> Result<Vec<u32>, AllocError> {
    let (z_lo, _) = p.level_range();
    let mut c: Vec<u32> = candidates.iter().copied().filter(|&z| z >= z_lo.max(1)).collect();
    c.sort_unstable();
    c.dedup();
    // the bound family must be defined on every candidate
    for &z in &c {
        p.family.at_level(z as f64)?;
    }
    if c.is_empty() {
        return Err(AllocError::NoFeasibleCandidate);
    }
    Ok(c)
}

fn improves(candidate: f64, best: f64) -> bool {
    candidate < best - 1e-12 * best.abs()
}

/// Exhaustive enumeration of every candidate tuple within the budget,
/// visited in lexicographic order; ties keep the lexicographically smallest.
/// Guarded to `T ≤ 8` and `|candidates|^T ≤ 10^8`.
pub fn brute_force_allocate(p: &AllocationProblem, candidates: &[u32]) -> Result<IntegerOptimum, AllocError> {
    let t = p.rounds();
    let c = sorted_candidates(p, candidates)?;
    if t > 8 {
        return Err(AllocError::OracleScale {
            reason: format!("T = {t} > 8"),
        });
    }
    let grid = (c.len() as f64).powi(t as i32);
    if grid > 1e8 {
        return Err(AllocError::OracleScale {
            reason: format!("{} candidates ^ {t} rounds = {grid:.3e} > 1e8", c.len()),
        });
    }
    let cap = p.level_product_cap()?;
    let costs: Vec<Vec<f64>> = (0..t)
        .map(|i| c.iter().map(|&z| p.weights[i] * p.family.at_level(z as f64).expect("checked")).collect())
        .collect();

    struct Search<'a> {
        c: &'a [u32],
        costs: &'a [Vec<f64>],
        current: Vec<u32>,
        best: Option<IntegerOptimum>,
    }
    fn descend(s: &mut Search<'_>, depth: usize, remaining: u64, partial: f64) {
        if depth == s.costs.len() {
            if s.best.as_ref().is_none_or(|b| improves(partial, b.objective)) {
                s.best = Some(IntegerOptimum {
                    z: s.current.clone(),
                    objective: partial,
                });
            }
            return;
        }
        for (k, &z) in s.c.iter().enumerate() {
            if z as u64 > remaining {
                break;
            }
            s.current.push(z);
            let cost = s.costs[depth][k];
            descend(s, depth + 1, remaining / z as u64, partial + cost);
            s.current.pop();
        }
    }
    let mut search = Search {
        c: &c,
        costs: &costs,
        current: Vec::with_capacity(t),
        best: None,
    };
    descend(&mut search, 0, cap, 0.0);
    search.best.ok_or(AllocError::NoFeasibleCandidate)
}

/// Exact integer optimum by dynamic programming over the remaining level
/// product `floor(2^B / Π Z)`, which takes `O(√(2^B))` distinct values.
/// Same tie rule as [`brute_force_allocate`]; usable well beyond its guard.
pub fn exact_integer_allocate(p: &AllocationProblem, candidates: &[u32]) -> Result<IntegerOptimum, AllocError> {
    let t = p.rounds();
    let c = sorted_candidates(p, candidates)?;
    let cap = p.level_product_cap()?;
    if cap > 1 << 40 {
        return Err(AllocError::OracleScale {
            reason: format!("level product cap {cap} too large"),
        });
    }
    // distinct values of floor(cap / k)
    let mut states = Vec::new();
    let mut k = 1u64;
    while k <= cap {
        let q = cap / k;
        states.push(q);
        k = cap / q + 1;
    }
    states.reverse(); // ascending
    let root = (cap as f64).sqrt() as u64 + 1;
    let index_of = |m: u64| -> usize {
        // states ascending; small values are dense below sqrt(cap)
        if m <= root {
            states.partition_point(|&s| s < m)
        } else {
            states.len() - (cap / m) as usize
        }
    };
    debug_assert!(states.iter().enumerate().all(|(i, &s)| index_of(s) == i));

    let costs: Vec<Vec<f64>> = (0..t)
        .map(|i| c.iter().map(|&z| p.weights[i] * p.family.at_level(z as f64).expect("checked")).collect())
        .collect();
    let n = states.len();
    // value[r][s]: best cost of rounds r.. given remaining product states[s]
    let mut value = vec![vec![0.0f64; n]; t + 1];
    for r in (0..t).rev() {
        for s in 0..n {
            let m = states[s];
            let mut best = f64::INFINITY;
            for (k, &z) in c.iter().enumerate() {
                if z as u64 > m {
                    break;
                }
                let v = costs[r][k] + value[r + 1][index_of(m / z as u64)];
                if v < best {
                    best = v;
                }
            }
            value[r][s] = best;
        }
    }
    let top = index_of(cap);
    let objective = value[0][top];
    if !objective.is_finite() {
        return Err(AllocError::NoFeasibleCandidate);
    }
    let mut z = Vec::with_capacity(t);
    let mut m = cap;
    for r in 0..t {
        let target = value[r][index_of(m)];
        let pick = c
            .iter()
            .enumerate()
            .take_while(|(_, &z)| z as u64 <= m)
            .find(|&(k, &z)| !improves(target, costs[r][k] + value[r + 1][index_of(m / z as u64)]))
            .map(|(_, &z)| z)
            .expect("optimal value is attained");
        z.push(pick);
        m /= pick as u64;
    }
    let objective = p.objective_levels(&z)?;
    Ok(IntegerOptimum { z, objective })
}

/// Kept-count allocation for TopK: `Σ_t K_t·(8h + ceil(log2 d)) ≤ C` with the
/// linear bound `(1 − K/d)·energy`, so units go to the largest weights first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkPlan {
    pub keep: Vec<usize>,
    pub objective: f64,
    pub budget_used_bits: u64,
}

pub fn allocate_topk(
    weights: &[f64],
    dim: usize,
    energy: f64,
    budget_bits: u64,
    value_bytes: u32,
) -> Result<TopkPlan, AllocError> {
    let t = weights.len();
    if t == 0 {
        return Err(AllocError::NoRounds);
    }
    if let Some((index, &value)) = weights.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(AllocError::Weight { index, value });
    }
    let unit = 8 * value_bytes as u64 + index_width(dim as u64) as u64;
    let units = budget_bits / unit;
    if units < t as u64 {
        return Err(AllocError::Infeasible {
            budget: budget_bits as f64,
            minimum: (t as u64 * unit) as f64,
        });
    }
    let mut keep = vec![1usize; t];
    let mut spare = units - t as u64;
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&i, &j| weights[j].total_cmp(&weights[i]).then(i.cmp(&j)));
    for i in order {
        let add = ((dim - 1) as u64).min(spare);
        keep[i] += add as usize;
        spare -= add;
        if spare == 0 {
            break;
        }
    }
    let mut objective = 0.0;
    for (a, &k) in weights.iter().zip(&keep) {
        objective += a * crate::bounds::topk_bound(dim, k, energy)?;
    }
    let budget_used_bits = keep.iter().map(|&k| k as u64 * unit).sum();
    Ok(TopkPlan {
        keep,
        objective,
        budget_used_bits,
    })
}
