//! Compression-error bounds as functions of the centroid count, and the
//! right-hand sides of the convex and non-convex convergence bounds.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codecs::Scheme;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("{name} = {value} is outside its domain ({requirement})")]
    Domain {
        name: &'static str,
        value: f64,
        requirement: &'static str,
    },
    #[error("client weights must be nonnegative and sum to 1 (sum = {sum})")]
    Weights { sum: f64 },
    #[error("{name} has length {got}, expected {expected}")]
    Length {
        name: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("{0:?} has no bound in terms of log2 of the level count")]
    NotRateFamily(Scheme),
}

fn domain(name: &'static str, value: f64, requirement: &'static str) -> BoundsError {
    BoundsError::Domain {
        name,
        value,
        requirement,
    }
}

/// `d·E²·G² / (2·(Z − 1)²)`; singular at `Z = 1`.
pub fn pq_bound(d: usize, local_steps: usize, grad_norm_sq: f64, z: f64) -> Result<f64, BoundsError> {
    if !(z > 1.0) {
        return Err(domain("Z", z, "Z > 1"));
    }
    let e = local_steps as f64;
    Ok(d as f64 * e * e * grad_norm_sq / (2.0 * (z - 1.0) * (z - 1.0)))
}

/// `min(d/Z², √d/Z)·E²·G²`.
pub fn qsgd_bound(d: usize, local_steps: usize, grad_norm_sq: f64, z: f64) -> Result<f64, BoundsError> {
    if !(z >= 1.0) {
        return Err(domain("Z", z, "Z >= 1"));
    }
    let e = local_steps as f64;
    let d = d as f64;
    Ok((d / (z * z)).min(d.sqrt() / z) * e * e * grad_norm_sq)
}

/// `(1 − K/d)·energy`, with `energy` standing for ‖U‖².
pub fn topk_bound(d: usize, keep: usize, energy: f64) -> Result<f64, BoundsError> {
    if keep == 0 || keep > d {
        return Err(domain("K", keep as f64, "1 <= K <= d"));
    }
    if !(energy >= 0.0) {
        return Err(domain("energy", energy, "energy >= 0"));
    }
    Ok((1.0 - keep as f64 / d as f64) * energy)
}

/// A per-round compression-error bound `J(Z)` shared by every client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum ErrorBoundFamily {
    Pq {
        dim: usize,
        local_steps: usize,
        grad_norm_sq: f64,
    },
    Qsgd {
        dim: usize,
        local_steps: usize,
        grad_norm_sq: f64,
    },
    /// `energy` bounds ‖U‖², typically `E²G²`.
    TopK { dim: usize, energy: f64 },
}

impl ErrorBoundFamily {
    pub fn pq(dim: usize, local_steps: usize, grad_norm_sq: f64) -> Self {
        Self::Pq {
            dim,
            local_steps,
            grad_norm_sq,
        }
    }

    pub fn qsgd(dim: usize, local_steps: usize, grad_norm_sq: f64) -> Self {
        Self::Qsgd {
            dim,
            local_steps,
            grad_norm_sq,
        }
    }

    pub fn scheme(&self) -> Scheme {
        match self {
            Self::Pq { .. } => Scheme::Pq,
            Self::Qsgd { .. } => Scheme::Qsgd,
            Self::TopK { .. } => Scheme::TopK,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            Self::Pq { dim, .. } | Self::Qsgd { dim, .. } | Self::TopK { dim, .. } => dim,
        }
    }

    /// The multiplicative constant shared by all rounds (`d·E²·G²/2` for PQ,
    /// `E²·G²` for QSGD, the energy for TopK).
    pub fn scale(&self) -> f64 {
        match *self {
            Self::Pq {
                dim,
                local_steps,
                grad_norm_sq,
            } => dim as f64 * (local_steps * local_steps) as f64 * grad_norm_sq / 2.0,
            Self::Qsgd {
                local_steps,
                grad_norm_sq,
                ..
            } => (local_steps * local_steps) as f64 * grad_norm_sq,
            Self::TopK { energy, .. } => energy,
        }
    }

    /// The same family with its shared constant multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        match *self {
            Self::Pq {
                dim,
                local_steps,
                grad_norm_sq,
            } => Self::pq(dim, local_steps, grad_norm_sq * k),
            Self::Qsgd {
                dim,
                local_steps,
                grad_norm_sq,
            } => Self::qsgd(dim, local_steps, grad_norm_sq * k),
            Self::TopK { dim, energy } => Self::TopK {
                dim,
                energy: energy * k,
            },
        }
    }

    /// `J` at level count `z` (centroids, QSGD levels or kept count).
    pub fn at_level(&self, z: f64) -> Result<f64, BoundsError> {
        match *self {
            Self::Pq {
                dim,
                local_steps,
                grad_norm_sq,
            } => pq_bound(dim, local_steps, grad_norm_sq, z),
            Self::Qsgd {
                dim,
                local_steps,
                grad_norm_sq,
            } => qsgd_bound(dim, local_steps, grad_norm_sq, z),
            Self::TopK { dim, energy } => {
                if z.fract() != 0.0 {
                    return Err(domain("K", z, "integral"));
                }
                topk_bound(dim, z as usize, energy)
            }
        }
    }

    /// `J` at `x = log2 Z`.
    pub fn at_bits(&self, x: f64) -> Result<f64, BoundsError> {
        match self {
            Self::TopK { .. } => Err(BoundsError::NotRateFamily(Scheme::TopK)),
            _ => self.at_level(x.exp2()),
        }
    }

    /// `dJ/dx` at `x = log2 Z`. At the QSGD branch crossover `Z = √d` the
    /// `d/Z²` branch derivative is returned.
    pub fn derivative_bits(&self, x: f64) -> Result<f64, BoundsError> {
        match *self {
            Self::Pq { .. } => {
                if !(x > 0.0) {
                    return Err(domain("x", x, "x > 0"));
                }
                let y = x.exp2();
                Ok(-2.0 * self.scale() * LN_2 * y / (y - 1.0).powi(3))
            }
            Self::Qsgd { dim, .. } => {
                if !(x >= 0.0) {
                    return Err(domain("x", x, "x >= 0"));
                }
                let c = self.scale();
                let d = dim as f64;
                if x >= self.crossover_bits().expect("qsgd") {
                    Ok(-2.0 * LN_2 * c * d * (-2.0 * x).exp2())
                } else {
                    Ok(-LN_2 * c * d.sqrt() * (-x).exp2())
                }
            }
            Self::TopK { .. } => Err(BoundsError::NotRateFamily(Scheme::TopK)),
        }
    }

    /// `log2 √d`, where the two QSGD branches meet.
    pub fn crossover_bits(&self) -> Option<f64> {
        match *self {
            Self::Qsgd { dim, .. } => Some(0.5 * (dim as f64).log2()),
            _ => None,
        }
    }

    /// Subintervals of `[lo, hi]` on which the bound is smooth, convex and
    /// strictly decreasing in `x`. PQ is a single piece; QSGD splits at the
    /// branch crossover, where the minimum of the two branches has a concave
    /// kink.
    pub fn convex_pieces(&self, lo: f64, hi: f64) -> Result<Vec<(f64, f64)>, BoundsError> {
        match self {
            Self::Pq { .. } => Ok(vec![(lo, hi)]),
            Self::Qsgd { .. } => {
                let k = self.crossover_bits().expect("qsgd");
                Ok(if k > lo && k < hi {
                    vec![(lo, k), (k, hi)]
                } else {
                    vec![(lo, hi)]
                })
            }
            Self::TopK { .. } => Err(BoundsError::NotRateFamily(Scheme::TopK)),
        }
    }
}

/// Analysis constants for the convergence bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    /// L
    pub smoothness: f64,
    /// μ
    pub strong_convexity: f64,
    /// σ²
    pub sigma2: f64,
    /// G²
    pub grad_norm_sq: f64,
    /// Γ_c
    pub heterogeneity_convex: f64,
    /// Γ_n
    pub heterogeneity_nonconvex: f64,
    /// c in the non-convex bound
    pub c: f64,
    pub batch_size: usize,
    pub local_steps: usize,
    pub clients_per_round: usize,
    /// p_1..p_N; N is its length.
    pub weights: Vec<f64>,
    pub dim: usize,
}

impl BoundConstants {
    pub fn n_clients(&self) -> usize {
        self.weights.len()
    }

    fn sum_p_sq(&self) -> f64 {
        self.weights.iter().map(|p| p * p).sum()
    }

    pub fn validate(&self) -> Result<(), BoundsError> {
        if !(self.smoothness > 0.0) {
            return Err(domain("L", self.smoothness, "L > 0"));
        }
        for (name, v) in [
            ("sigma2", self.sigma2),
            ("G2", self.grad_norm_sq),
            ("gamma_c", self.heterogeneity_convex),
            ("gamma_n", self.heterogeneity_nonconvex),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(domain(name, v, ">= 0 and finite"));
            }
        }
        if !(self.c > 0.0) {
            return Err(domain("c", self.c, "c > 0"));
        }
        for (name, v) in [
            ("B", self.batch_size),
            ("E", self.local_steps),
            ("K", self.clients_per_round),
            ("d", self.dim),
        ] {
            if v == 0 {
                return Err(domain(name, 0.0, ">= 1"));
            }
        }
        let sum: f64 = self.weights.iter().sum();
        if self.weights.is_empty() || self.weights.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(BoundsError::Weights { sum });
        }
        Ok(())
    }

    fn validate_convex(&self) -> Result<(), BoundsError> {
        self.validate()?;
        if !(self.strong_convexity > 0.0) {
            return Err(domain("mu", self.strong_convexity, "mu > 0"));
        }
        Ok(())
    }

    /// `α = E·Σp_i²·σ²/B + 6·E·L·Γ_c + 2·E·(E−1)²·G² + E²·G²/K`.
    pub fn alpha(&self) -> f64 {
        let e = self.local_steps as f64;
        let l = self.smoothness;
        let g2 = self.grad_norm_sq;
        e * self.sum_p_sq() * self.sigma2 / self.batch_size as f64
            + 6.0 * e * l * self.heterogeneity_convex
            + 2.0 * e * (e - 1.0).powi(2) * g2
            + e * e * g2 / self.clients_per_round as f64
    }

    /// `γ = 8L/μ`.
    pub fn gamma(&self) -> f64 {
        8.0 * self.smoothness / self.strong_convexity
    }

    /// The strongly convex bound's schedule `η_t = 2/(μ(t + γ))`.
    pub fn convex_schedule(&self, rounds: usize) -> Vec<f64> {
        let gamma = self.gamma();
        (0..rounds)
            .map(|t| 2.0 / (self.strong_convexity * (t as f64 + gamma)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem1Report {
    pub value: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Σ_t η_t·J_t/(2Kμ) before the 4/(γ+T) prefactor.
    pub compression_sum: f64,
    /// False when a caller-supplied schedule differs from `2/(μ(t+γ))`;
    /// the value is then outside the bound's premises.
    pub in_theorem: bool,
}

/// Strongly convex bound on `E‖w_T − w*‖²`:
/// `4/(γ+T)·(α/μ + Σ_t η_t·J_t/(2Kμ) + 2κ·‖w₀ − w*‖²)`.
///
/// `lr` defaults to the bound's own schedule. `j` holds `Σ_i p_i·J_t^i` per
/// round.
pub fn theorem1_rhs(
    constants: &BoundConstants,
    rounds: usize,
    lr: Option<&[f64]>,
    j: &[f64],
    w0_gap: f64,
) -> Result<Theorem1Report, BoundsError> {
    constants.validate_convex()?;
    check_len("J schedule", j, rounds)?;
    if let Some(lr) = lr {
        check_len("learning-rate schedule", lr, rounds)?;
    }
    if j.iter().any(|v| !(*v >= 0.0)) {
        return Err(domain("J_t", f64::NAN, "J_t >= 0"));
    }
    if !(w0_gap >= 0.0) {
        return Err(domain("w0_gap", w0_gap, ">= 0"));
    }
    let mu = constants.strong_convexity;
    let k = constants.clients_per_round as f64;
    let gamma = constants.gamma();
    let kappa = constants.smoothness / mu;
    let own = constants.convex_schedule(rounds);
    let (eta, in_theorem) = match lr {
        None => (own.as_slice(), true),
        Some(lr) => {
            let same = lr
                .iter()
                .zip(&own)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs());
            (lr, same)
        }
    };
    let alpha = constants.alpha();
    let compression_sum: f64 = eta
        .iter()
        .zip(j)
        .map(|(eta, j)| eta * j / (2.0 * k * mu))
        .sum();
    let value = 4.0 / (gamma + rounds as f64) * (alpha / mu + compression_sum + 2.0 * kappa * w0_gap);
    Ok(Theorem1Report {
        value,
        alpha,
        gamma,
        compression_sum,
        in_theorem,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Theorem2Condition {
    /// η_t ≤ 1/(8LE)
    StepSize,
    /// η_t·E·L ≤ K/(K−1)
    Participation,
    /// 30·N·E²·η_t²·L²·Σp_i² + (L·η_t/K)·(90·E³·L²·η_t² + 3E) < 1
    Contraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionViolation {
    pub round: usize,
    pub condition: Theorem2Condition,
    pub lhs: f64,
    pub rhs: f64,
}

/// Every round and inequality at which `lr` breaks the non-convex bound's
/// step-size premises.
pub fn theorem2_conditions(constants: &BoundConstants, lr: &[f64]) -> Vec<ConditionViolation> {
    let l = constants.smoothness;
    let e = constants.local_steps as f64;
    let k = constants.clients_per_round as f64;
    let n = constants.n_clients() as f64;
    let sum_p_sq = constants.sum_p_sq();
    let mut out = Vec::new();
    for (round, &eta) in lr.iter().enumerate() {
        let step_rhs = 1.0 / (8.0 * l * e);
        if eta > step_rhs {
            out.push(ConditionViolation {
                round,
                condition: Theorem2Condition::StepSize,
                lhs: eta,
                rhs: step_rhs,
            });
        }
        if constants.clients_per_round > 1 {
            let lhs = eta * e * l;
            let rhs = k / (k - 1.0);
            if lhs > rhs {
                out.push(ConditionViolation {
                    round,
                    condition: Theorem2Condition::Participation,
                    lhs,
                    rhs,
                });
            }
        }
        let lhs = 30.0 * n * e * e * eta * eta * l * l * sum_p_sq
            + (l * eta / k) * (90.0 * e.powi(3) * l * l * eta * eta + 3.0 * e);
        if !(lhs < 1.0) {
            out.push(ConditionViolation {
                round,
                condition: Theorem2Condition::Contraction,
                lhs,
                rhs: 1.0,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem2Report {
    pub value: f64,
    pub compression_term: f64,
    pub noise_term: f64,
    pub drift_term: f64,
    pub initial_gap_term: f64,
    /// Empty when every premise holds.
    pub violations: Vec<ConditionViolation>,
}

impl Theorem2Report {
    pub fn premises_hold(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Non-convex bound on `min_t E‖∇F(w_t)‖²`, term by term:
///
/// * `L/(2c·η_{T−1}·T·E)·Σ η_t²·J_t`
/// * `(L·E²·σ²/2 + 3E²·L·Γ_n/(2K))·Σ η_t² / (c·η_{T−1}·T·E)`
/// * `(σ² + 6E·Γ_n)/(c·η_{T−1}·T·E)·[5N·E²·L²·Σp_i²·Σ η_t³/2 + 15E³·L³·Σ η_t⁴/(2K)]`
/// * `(F₀ − F*)/(c·η_{T−1}·T·E)`
pub fn theorem2_rhs(
    constants: &BoundConstants,
    rounds: usize,
    lr: &[f64],
    j: &[f64],
    f0_minus_fstar: f64,
) -> Result<Theorem2Report, BoundsError> {
    constants.validate()?;
    if rounds == 0 {
        return Err(domain("T", 0.0, "T >= 1"));
    }
    check_len("learning-rate schedule", lr, rounds)?;
    check_len("J schedule", j, rounds)?;
    if lr.iter().any(|v| !(*v > 0.0)) {
        return Err(domain("eta_t", f64::NAN, "eta_t > 0"));
    }
    if !(f0_minus_fstar >= 0.0) {
        return Err(domain("F0 - F*", f0_minus_fstar, ">= 0"));
    }
    let l = constants.smoothness;
    let e = constants.local_steps as f64;
    let k = constants.clients_per_round as f64;
    let n = constants.n_clients() as f64;
    let c = constants.c;
    let sigma2 = constants.sigma2;
    let gamma_n = constants.heterogeneity_nonconvex;
    let t = rounds as f64;
    let denom = c * lr[rounds - 1] * t * e;

    let power_sum = |p: i32| lr.iter().map(|eta| eta.powi(p)).sum::<f64>();
    let weighted_j: f64 = lr.iter().zip(j).map(|(eta, j)| eta * eta * j).sum();

    let compression_term = l / (2.0 * denom) * weighted_j;
    let noise_term = (l * e * e * sigma2 / 2.0 + 3.0 * e * e * l * gamma_n / (2.0 * k)) * power_sum(2) / denom;
    let drift_term = (sigma2 + 6.0 * e * gamma_n) / denom
        * (5.0 * n * e * e * l * l * constants.sum_p_sq() * power_sum(3) / 2.0
            + 15.0 * e.powi(3) * l.powi(3) * power_sum(4) / (2.0 * k));
    let initial_gap_term = f0_minus_fstar / denom;

    Ok(Theorem2Report {
        value: compression_term + noise_term + drift_term + initial_gap_term,
        compression_term,
        noise_term,
        drift_term,
        initial_gap_term,
        violations: theorem2_conditions(constants, lr),
    })
}

fn check_len(name: &'static str, v: &[f64], expected: usize) -> Result<(), BoundsError> {
    if v.len() != expected {
        return Err(BoundsError::Length {
            name,
            got: v.len(),
            expected,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constants() -> BoundConstants {
        BoundConstants {
            smoothness: 2.0,
            strong_convexity: 0.5,
            sigma2: 1.5,
            grad_norm_sq: 4.0,
            heterogeneity_convex: 0.3,
            heterogeneity_nonconvex: 0.7,
            c: 0.1,
            batch_size: 50,
            local_steps: 5,
            clients_per_round: 10,
            weights: vec![0.25; 4],
            dim: 100,
        }
    }

    #[test]
    fn pq_bound_values() {
        assert_eq!(pq_bound(1, 1, 1.0, 2.0).unwrap(), 0.5);
        let ratio = pq_bound(7, 3, 2.0, 16.0).unwrap() / pq_bound(7, 3, 2.0, 4.0).unwrap();
        assert!((ratio - 0.04).abs() < 1e-15);
        for z in [2.0, 3.5, 100.0] {
            let quad = pq_bound(9, 2, 4.0, z).unwrap() / pq_bound(9, 2, 1.0, z).unwrap();
            assert!((quad - 4.0).abs() < 1e-14);
        }
        assert!(pq_bound(1, 1, 1.0, 1.0).is_err());
        assert!(pq_bound(1, 1, 1.0, 0.5).is_err());
    }

    #[test]
    fn qsgd_bound_values() {
        assert_eq!(qsgd_bound(16, 1, 1.0, 4.0).unwrap(), 1.0);
        assert_eq!(qsgd_bound(100, 1, 1.0, 2.0).unwrap(), 5.0);
        let mut prev = f64::INFINITY;
        for z in (0..40).map(|i| 1.5f64.powi(i)) {
            let v = qsgd_bound(50, 2, 1.0, z).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-5);
        assert!(qsgd_bound(4, 1, 1.0, 0.99).is_err());
    }

    #[test]
    fn topk_bound_values() {
        assert_eq!(topk_bound(10, 10, 3.0).unwrap(), 0.0);
        assert_eq!(topk_bound(10, 5, 3.0).unwrap(), 1.5);
        assert!((topk_bound(1000, 30, 25.0).unwrap() - 24.25).abs() < 1e-12);
        assert!(topk_bound(10, 0, 1.0).is_err());
        assert!(topk_bound(10, 11, 1.0).is_err());
    }

    fn second_difference(f: &dyn Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x - h) - 2.0 * f(x) + f(x + h)) / (h * h)
    }

    #[test]
    fn pq_bound_decreasing_convex_in_bits() {
        let fam = ErrorBoundFamily::pq(7850, 5, 1.0);
        let f = |x: f64| fam.at_bits(x).unwrap();
        let h = 0.01;
        let mut x = 1.0 + h;
        while x < 20.0 - h {
            let scale = f(x).abs();
            let first = (f(x + h) - f(x - h)) / (2.0 * h);
            assert!(first < 0.0, "x = {x}");
            assert!(second_difference(&f, x, h) >= -1e-9 * scale, "x = {x}");
            x += h;
        }
    }

    #[test]
    fn qsgd_bound_convex_on_each_branch_with_concave_kink() {
        let fam = ErrorBoundFamily::qsgd(256, 5, 1.0);
        let f = |x: f64| fam.at_bits(x).unwrap();
        let kink = fam.crossover_bits().unwrap();
        assert_eq!(kink, 4.0);
        let h = 0.01;
        let mut x = 1.0 + h;
        while x < 20.0 - h {
            let scale = f(x).abs();
            assert!((f(x + h) - f(x - h)) / (2.0 * h) < 0.0);
            if (x - kink).abs() > 1.5 * h {
                assert!(second_difference(&f, x, h) >= -1e-9 * scale, "x = {x}");
            }
            x += h;
        }
        // the min of the two branches bends the wrong way at the crossover
        assert!(second_difference(&f, kink, h) < 0.0);
        assert_eq!(fam.convex_pieces(0.0, 16.0).unwrap(), vec![(0.0, 4.0), (4.0, 16.0)]);
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        for fam in [ErrorBoundFamily::pq(300, 3, 2.0), ErrorBoundFamily::qsgd(300, 3, 2.0)] {
            for x in [0.7, 1.3, 2.9, 3.5, 6.0, 11.0] {
                if fam.scheme() == Scheme::Pq && x < 1.0 {
                    continue;
                }
                let h = 1e-6;
                let fd = (fam.at_bits(x + h).unwrap() - fam.at_bits(x - h).unwrap()) / (2.0 * h);
                let an = fam.derivative_bits(x).unwrap();
                assert!((fd - an).abs() <= 1e-6 * an.abs(), "{fam:?} x={x}: {fd} vs {an}");
            }
        }
        // at the qsgd crossover the d/Z^2 branch derivative is used
        let fam = ErrorBoundFamily::qsgd(16, 1, 1.0);
        assert!((fam.derivative_bits(2.0).unwrap() + 2.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn theorem1_zero_error_reduction() {
        let c = constants();
        let t = 20;
        let r = theorem1_rhs(&c, t, None, &vec![0.0; t], 3.0).unwrap();
        let kappa = c.smoothness / c.strong_convexity;
        let expected = 4.0 / (c.gamma() + t as f64) * (c.alpha() / c.strong_convexity + 2.0 * kappa * 3.0);
        assert_eq!(r.value, expected);
        assert!(r.in_theorem);
    }

    #[test]
    fn theorem1_alpha_formula() {
        let c = constants();
        // 5*0.25*1.5/50 + 6*5*2*0.3 + 2*5*16*4 + 25*4/10
        let expected = 0.0375 + 18.0 + 640.0 + 10.0;
        assert!((c.alpha() - expected).abs() < 1e-12);
    }

    #[test]
    fn theorem1_increasing_in_each_j() {
        let c = constants();
        let base = vec![0.5; 10];
        let v0 = theorem1_rhs(&c, 10, None, &base, 1.0).unwrap().value;
        for t in 0..10 {
            let mut j = base.clone();
            j[t] += 0.1;
            assert!(theorem1_rhs(&c, 10, None, &j, 1.0).unwrap().value > v0);
        }
    }

    #[test]
    fn theorem1_early_error_costs_more() {
        let c = constants();
        let mut early = vec![0.0; 10];
        early[0] = 5.0;
        let mut late = vec![0.0; 10];
        late[9] = 5.0;
        let e = theorem1_rhs(&c, 10, None, &early, 1.0).unwrap().value;
        let l = theorem1_rhs(&c, 10, None, &late, 1.0).unwrap().value;
        assert!(e > l);
    }

    #[test]
    fn theorem1_decreases_in_t_and_flags_foreign_schedules() {
        let c = constants();
        let mut prev = f64::INFINITY;
        for t in [1, 5, 20, 100, 1000] {
            let v = theorem1_rhs(&c, t, None, &vec![1.0; t], 2.0).unwrap().value;
            assert!(v < prev);
            prev = v;
        }
        let lr = vec![0.01; 5];
        let r = theorem1_rhs(&c, 5, Some(&lr), &[1.0; 5], 2.0).unwrap();
        assert!(!r.in_theorem);
        let own = c.convex_schedule(5);
        assert!(theorem1_rhs(&c, 5, Some(&own), &[1.0; 5], 2.0).unwrap().in_theorem);
    }

    #[test]
    fn theorem1_rejects_bad_constants() {
        let mut c = constants();
        c.strong_convexity = 0.0;
        assert!(theorem1_rhs(&c, 3, None, &[0.0; 3], 1.0).is_err());
        let mut c = constants();
        c.smoothness = -1.0;
        assert!(theorem1_rhs(&c, 3, None, &[0.0; 3], 1.0).is_err());
        let mut c = constants();
        c.weights = vec![0.5, 0.6];
        assert!(matches!(c.validate(), Err(BoundsError::Weights { .. })));
        assert!(theorem1_rhs(&constants(), 3, None, &[0.0; 2], 1.0).is_err());
    }

    #[test]
    fn theorem2_zero_error_removes_first_term() {
        let c = constants();
        let lr = vec![0.001; 8];
        let with = theorem2_rhs(&c, 8, &lr, &[2.0; 8], 1.0).unwrap();
        let without = theorem2_rhs(&c, 8, &lr, &[0.0; 8], 1.0).unwrap();
        assert_eq!(without.compression_term, 0.0);
        assert!((with.value - without.value - with.compression_term).abs() < 1e-12 * with.value);
        assert_eq!(without.noise_term, with.noise_term);
    }

    #[test]
    fn theorem2_gap_term_vanishes_like_one_over_t() {
        let c = constants();
        let gap = |t: usize| theorem2_rhs(&c, t, &vec![0.001; t], &vec![0.0; t], 1.0).unwrap().initial_gap_term;
        let (a, b) = (gap(100), gap(10_000));
        assert!((a / b - 100.0).abs() < 1e-9);
    }

    #[test]
    fn theorem2_term_values() {
        let mut c = constants();
        c.weights = vec![1.0];
        c.clients_per_round = 1;
        c.local_steps = 2;
        c.smoothness = 1.0;
        c.sigma2 = 1.0;
        c.heterogeneity_nonconvex = 1.0;
        c.c = 0.5;
        let lr = [0.1, 0.1];
        let r = theorem2_rhs(&c, 2, &lr, &[1.0, 1.0], 3.0).unwrap();
        // denom = 0.5 * 0.1 * 2 * 2 = 0.2
        assert!((r.compression_term - 1.0 / 0.4 * 0.02).abs() < 1e-12);
        assert!((r.noise_term - (2.0 + 6.0) * 0.02 / 0.2).abs() < 1e-12);
        let bracket = 5.0 * 4.0 * 0.002 / 2.0 + 15.0 * 8.0 * 0.0002 / 2.0;
        assert!((r.drift_term - 13.0 / 0.2 * bracket).abs() < 1e-12);
        assert!((r.initial_gap_term - 15.0).abs() < 1e-12);
    }

    #[test]
    fn theorem2_condition_report() {
        let mut c = constants();
        c.local_steps = 5;
        c.smoothness = 1.0;
        let lr: Vec<f64> = (0..50)
            .map(|t| 0.05 / (1.0 + ((t * 5) as f64).sqrt() / 40.0))
            .collect();
        // 1/(8LE) = 0.025 < 0.05: the schedule breaks the step-size premise
        // until 0.05/(1+sqrt(5t)/40) <= 0.025, i.e. sqrt(5t) >= 40, t >= 320
        let v = theorem2_conditions(&c, &lr);
        let step: Vec<usize> = v
            .iter()
            .filter(|v| v.condition == Theorem2Condition::StepSize)
            .map(|v| v.round)
            .collect();
        assert_eq!(step, (0..50).collect::<Vec<_>>());
        c.smoothness = 0.5;
        // 1/(8*0.5*5) = 0.05: holds with equality at t = 0 and strictly after
        assert!(theorem2_conditions(&c, &lr)
            .iter()
            .all(|v| v.condition != Theorem2Condition::StepSize));
        let r = theorem2_rhs(&c, 50, &lr, &vec![0.0; 50], 1.0).unwrap();
        assert_eq!(r.premises_hold(), r.violations.is_empty());
    }

    #[test]
    fn evaluators_are_pure() {
        let c = constants();
        let a = theorem1_rhs(&c, 7, None, &[0.3; 7], 1.0).unwrap();
        let b = theorem1_rhs(&c, 7, None, &[0.3; 7], 1.0).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }
}
