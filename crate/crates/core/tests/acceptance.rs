//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test --test acceptance`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use fedcomp::allocator::{
    allocate, brute_force_allocate, exact_integer_allocate, round_and_repair, solve_relaxed, weights_from_schedule,
    AllocationProblem, LossKind,
};
use fedcomp::bounds::{pq_bound, qsgd_bound, ErrorBoundFamily};
use fedcomp::codecs::{
    approx_traffic_bits, compression_rate, pq_encode, qsgd_encode, Codec, Scheme, UpdateVector,
};
use fedcomp::engine::{lr_schedule_convex, run, Compression, FLConfig, LrSchedule};
use fedcomp::learners::{
    load_idx, partition, synthetic_classification, Architecture, Dataset, ModelParams, PartitionMode,
};
use fedcomp::netsim::{round_comm_time, NetworkModel};
use fedcomp::seeds::{rng_from, Seeds};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn random_vector(d: usize, seed: u64) -> UpdateVector {
    let mut rng = rng_from(seed);
    UpdateVector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Two-point values and upper-value probability of PQ's stochastic rounding.
fn pq_two_point(u: &[f64], z: u32) -> Vec<(f64, f64, f64)> {
    let lo = u.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let step = (hi - lo) / (z - 1) as f64;
    u.iter()
        .map(|&v| {
            let k = (((v - lo) / step).floor() as i64).clamp(0, z as i64 - 2) as f64;
            let (a, b) = (lo + k * step, lo + (k + 1.0) * step);
            (a, b, ((v - a) / (b - a)).clamp(0.0, 1.0))
        })
        .collect()
}

fn qsgd_two_point(u: &[f64], z: u32) -> Vec<(f64, f64, f64)> {
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = z as f64;
    u.iter()
        .map(|&v| {
            let r = s * v.abs() / norm;
            let l = r.floor().min(s);
            let sign = v.signum();
            (sign * norm * l / s, sign * norm * (l + 1.0) / s, r - l)
        })
        .collect()
}

/// Largest deviation in standard errors and the count of coordinates
/// beyond 5 se, for one vector, scheme and level count.
fn unbiasedness_case(v: u64, z: u32, pq: bool, trials: usize) -> (f64, usize) {
    let d = 64;
    let u = random_vector(d, 1000 + v);
    let oracle = if pq { pq_two_point(u.as_slice(), z) } else { qsgd_two_point(u.as_slice(), z) };
    let mut rng = rng_from(v * 31 + z as u64 + if pq { 0 } else { 1 << 32 });
    let mut sum = vec![0.0; d];
    let mut buf = vec![0.0; d];
    for _ in 0..trials {
        let e = if pq {
            pq_encode(&u, z, 4, &mut rng).unwrap()
        } else {
            qsgd_encode(&u, z, 4, &mut rng).unwrap()
        };
        e.decode_into(&mut buf).unwrap();
        for (s, x) in sum.iter_mut().zip(&buf) {
            *s += x;
        }
    }
    let mut worst = 0.0f64;
    let mut failures = 0;
    for ((&target, s), &(a, b, p)) in u.as_slice().iter().zip(&sum).zip(&oracle) {
        let mean = s / trials as f64;
        let se = (b - a).abs() * (p * (1.0 - p) / trials as f64).sqrt();
        let dev = (mean - target).abs();
        if se == 0.0 {
            // deterministic coordinate: only summation error remains
            if dev > 1e-9 * target.abs().max(1.0) {
                failures += 1;
            }
        } else {
            worst = worst.max(dev / se);
            if dev >= 5.0 * se {
                failures += 1;
            }
        }
    }
    (worst, failures)
}

fn codec_unbiasedness() -> Outcome {
    let started = Instant::now();
    let cases: Vec<(u64, u32, bool)> = (0..20u64)
        .flat_map(|v| [2u32, 4, 16].into_iter().flat_map(move |z| [(v, z, true), (v, z, false)]))
        .collect();
    let results: Vec<(f64, usize)> = cases.par_iter().map(|&(v, z, pq)| unbiasedness_case(v, z, pq, 100_000)).collect();
    let worst_sigma = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let failures: usize = results.iter().map(|r| r.1).sum();
    let elapsed = started.elapsed();
    check(
        failures == 0 && within(elapsed, 30.0),
        format!(
            "7680 coordinates, max deviation {worst_sigma:.2} se, {failures} beyond 5 se, {:.1}s (limit 30s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn bound_dominance() -> Outcome {
    let (e_steps, g) = (5usize, 1.0f64);
    let cap = e_steps as f64 * g;
    let trials = 10_000;
    let mut violations = 0;
    let mut tightest = 0.0f64;
    let mut cases = 0;
    for d in [16usize, 256] {
        let mut vectors = Vec::new();
        let mut rng = rng_from(d as u64);
        for kind in 0..3 {
            let raw: Vec<f64> = match kind {
                0 => (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                1 => (0..d).map(|_| rng.random_range(0.0..1.0f64).powi(8)).collect(),
                // two opposite spikes: the widest range for a given norm
                _ => (0..d).map(|i| if i == 0 { 1.0 } else if i == 1 { -1.0 } else { 0.0 }).collect(),
            };
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            vectors.push(UpdateVector::new(raw.iter().map(|v| v * cap / norm).collect()).unwrap());
        }
        for u in &vectors {
            assert!(u.norm_sq().sqrt() <= cap * (1.0 + 1e-12));
            for z in [2u32, 4, 8, 16, 64] {
                let pq_limit = pq_bound(d, e_steps, g * g, z as f64).unwrap();
                let qsgd_limit = qsgd_bound(d, e_steps, g * g, z as f64).unwrap();
                for (scheme, limit) in [(Scheme::Pq, pq_limit), (Scheme::Qsgd, qsgd_limit)] {
                    let mut rng = rng_from(z as u64 * 7 + d as u64);
                    let mut total = 0.0;
                    for _ in 0..trials {
                        let e = match scheme {
                            Scheme::Pq => pq_encode(u, z, 4, &mut rng).unwrap(),
                            _ => qsgd_encode(u, z, 4, &mut rng).unwrap(),
                        };
                        total += e.decode().unwrap().squared_distance(u.as_slice());
                    }
                    let mse = total / trials as f64;
                    tightest = tightest.max(mse / limit);
                    cases += 1;
                    if mse > limit {
                        violations += 1;
                    }
                }
            }
        }
    }
    check(
        violations == 0,
        format!("{cases} cases, {violations} violations, largest error/bound ratio {tightest:.3}"),
    )
}

fn allocator_optimality() -> Outcome {
    let started = Instant::now();
    let candidates: Vec<u32> = (2..=64).collect();
    let mut rng = rng_from(2024);
    let (mut ordered, mut within_5pct, mut oracle_agree, mut cross_checked) = (0, 0, 0, 0);
    let mut worst_ratio = 0.0f64;
    for _ in 0..50 {
        let t = rng.random_range(1..=6usize);
        let weights: Vec<f64> = (0..t).map(|_| rng.random_range(0.05..1.0)).collect();
        let max_budget = (6.0 * t as f64).min(24.0);
        let budget = rng.random_range(t as f64..=max_budget);
        let family = if rng.random_bool(0.5) {
            ErrorBoundFamily::pq(rng.random_range(10..8000), 5, 1.0)
        } else {
            ErrorBoundFamily::pq(16, 1, rng.random_range(0.1..10.0))
        };
        let p = AllocationProblem::with_box(weights, family, budget, 1.0, 6.0).unwrap();
        let relaxed = solve_relaxed(&p).unwrap();
        let plan = round_and_repair(&relaxed, &p).unwrap();
        let opt = exact_integer_allocate(&p, &candidates).unwrap();
        if let Ok(bf) = brute_force_allocate(&p, &candidates) {
            cross_checked += 1;
            if (bf.objective - opt.objective).abs() <= 1e-12 * opt.objective {
                oracle_agree += 1;
            }
        } else {
            oracle_agree += 1;
        }
        let tol = 1e-12 * opt.objective;
        if relaxed.objective <= opt.objective + tol
            && opt.objective <= plan.objective_rounded + tol
            && plan.budget_used_bits_per_dim <= budget + 1e-9
        {
            ordered += 1;
        }
        let ratio = plan.objective_rounded / opt.objective;
        worst_ratio = worst_ratio.max(ratio);
        if ratio <= 1.05 {
            within_5pct += 1;
        }
    }
    let elapsed = started.elapsed();
    check(
        ordered == 50 && within_5pct == 50 && oracle_agree == 50 && within(elapsed, 120.0),
        format!(
            "relaxed <= optimum <= rounded in {ordered}/50, rounded within 5% in {within_5pct}/50 (worst {worst_ratio:.4}), \
             enumeration agrees with the exact program on {cross_checked} guarded instances, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn allocator_structure() -> Outcome {
    let (t, e, d) = (200usize, 5usize, 7850usize);
    let lr: Vec<f64> = (0..t).map(|t| lr_schedule_convex(t, e)).collect();
    let w = weights_from_schedule(&lr, LossKind::Convex).unwrap();
    let p = AllocationProblem::new(w.clone(), ErrorBoundFamily::pq(d, e, 1.0), 800.0).unwrap();
    let plan = allocate(&p).unwrap();
    let used = plan.budget_used_bits_per_dim;
    let monotone = plan.z.windows(2).all(|w| w[0] >= w[1]);
    let scaled = AllocationProblem::new(w, ErrorBoundFamily::pq(d, e, 100.0), 800.0).unwrap();
    let a = solve_relaxed(&p).unwrap();
    let b = solve_relaxed(&scaled).unwrap();
    let shift = a.x.iter().zip(&b.x).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    check(
        used <= 800.0 + 1e-9 && monotone && shift <= 1e-8,
        format!(
            "sum log2 Z = {used:.9}, non-increasing = {monotone}, Z_1 = {}, Z_T = {}, max |dx| under G -> 10G = {shift:.2e}",
            plan.z[0],
            plan.z[t - 1]
        ),
    )
}

fn fd_error(model: &ModelParams, data: &Dataset) -> f64 {
    let batch: Vec<usize> = (0..data.len()).collect();
    let (_, grad) = model.loss_and_grad(data, &batch).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..model.dim() {
        let mut plus = model.clone();
        plus.w[k] += h;
        let mut minus = model.clone();
        minus.w[k] -= h;
        let fd = (plus.loss(data).unwrap() - minus.loss(data).unwrap()) / (2.0 * h);
        worst = worst.max((fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6));
    }
    worst
}

fn gradient_exactness() -> Outcome {
    let data = synthetic_classification(31, 12, 6, 4, 1.5);
    let archs = [
        Architecture::Logistic { features: 6, classes: 4 },
        Architecture::Mlp {
            features: 6,
            hidden: 8,
            classes: 4,
        },
    ];
    let mut worst = 0.0f64;
    for arch in archs {
        for seed in 0..3 {
            let mut rng = rng_from(500 + seed);
            let w = (0..arch.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            worst = worst.max(fd_error(&ModelParams::new(arch, w).unwrap(), &data));
        }
    }
    check(worst < 1e-4, format!("max relative error {worst:.2e} over 2 models x 3 points"))
}

fn engine_equivalence() -> Outcome {
    let (f, c) = (4usize, 4usize);
    let data = synthetic_classification(17, 36, f, c, 2.0);
    let clients = partition(&data, 3, PartitionMode::Iid, 12, c, &mut rng_from(2)).unwrap();
    let test = synthetic_classification(18, 50, f, c, 2.0);
    let arch = Architecture::Logistic { features: f, classes: c };
    let init: Vec<f64> = (0..arch.dim()).map(|i| 0.01 * (i as f64 - 10.0)).collect();
    let mut config = FLConfig::new(3, 3, 64, 10, Compression::Fixed(Codec::Raw), Seeds::from_master(4));
    config.value_bytes = 8;
    let out = run(
        &config,
        ModelParams::new(arch, init.clone()).unwrap(),
        &clients,
        &test,
        &NetworkModel::default(),
    )
    .unwrap();

    // plain FedAvg: average the locally trained models of the sampled slots
    let mut w = init;
    for (t, m) in out.metrics.iter().enumerate() {
        let lr = 0.01 / (1.0 + (3 * t) as f64);
        let mut next = vec![0.0; w.len()];
        for &k in &m.selected {
            let shard = &clients[k].data;
            let mut local = w.clone();
            for _ in 0..3 {
                let mut g = vec![0.0; local.len()];
                for i in 0..shard.len() {
                    let x = shard.row(i);
                    let y = shard.label(i) as usize;
                    let z: Vec<f64> = (0..c)
                        .map(|k| local[f * c + k] + (0..f).map(|j| local[k * f + j] * x[j] as f64).sum::<f64>())
                        .collect();
                    let m = z.iter().cloned().fold(f64::MIN, f64::max);
                    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
                    for k in 0..c {
                        let r = ((z[k] - m).exp() / s - if k == y { 1.0 } else { 0.0 }) / shard.len() as f64;
                        for j in 0..f {
                            g[k * f + j] += r * x[j] as f64;
                        }
                        g[f * c + k] += r;
                    }
                }
                for (wi, gi) in local.iter_mut().zip(&g) {
                    *wi -= lr * gi;
                }
            }
            for (n, l) in next.iter_mut().zip(&local) {
                *n += l / m.selected.len() as f64;
            }
        }
        w = next;
    }
    let dev = w.iter().zip(&out.params.w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(dev < 1e-12, format!("3 clients, d = 20, T = 10, max |dw| = {dev:.2e}"))
}

fn adaptive_vs_fixed() -> Outcome {
    let started = Instant::now();
    let (n, k, e, b, t) = (20usize, 5usize, 5usize, 50usize, 60usize);
    let (features, classes, per_client, test_size, separation) = (50usize, 10usize, 600usize, 2000usize, 3.0);
    let arch = Architecture::Logistic { features, classes };
    let d = arch.dim();
    let lr: Vec<f64> = (0..t).map(|r| lr_schedule_convex(r, e)).collect();
    let weights = weights_from_schedule(&lr, LossKind::Convex).unwrap();
    // matched budget: the fixed Z = 16 plan spends 4 bits per dimension per round
    let problem = AllocationProblem::new(weights, ErrorBoundFamily::pq(d, e, 1.0), 4.0 * t as f64).unwrap();
    let plan = allocate(&problem).unwrap();

    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..10u64 {
        let all = synthetic_classification(1000 + seed, n * per_client + test_size, features, classes, separation);
        let train = all.subset(&(0..n * per_client).collect::<Vec<_>>());
        let test = all.subset(&(n * per_client..n * per_client + test_size).collect::<Vec<_>>());
        let seeds = Seeds::from_master(seed);
        let clients = partition(&train, n, PartitionMode::Iid, per_client, classes, &mut rng_from(seed)).unwrap();
        let mut finals = Vec::new();
        for compression in [
            Compression::Fixed(Codec::Pq { levels: 16 }),
            Compression::PerRound {
                scheme: Scheme::Pq,
                counts: plan.z.clone(),
            },
        ] {
            let mut config = FLConfig::new(k, e, b, t, compression, seeds);
            config.lr = LrSchedule::Convex;
            let out = run(&config, arch.init(&mut rng_from(0)), &clients, &test, &NetworkModel::default()).unwrap();
            finals.push(out.metrics.last().unwrap().test_accuracy);
        }
        if finals[1] >= finals[0] {
            wins += 1;
        }
        rows.push(format!("{:.4}/{:.4}", finals[1], finals[0]));
    }
    let elapsed = started.elapsed();
    check(
        wins >= 7 && within(elapsed, 600.0),
        format!(
            "adaptive >= fixed in {wins}/10 seeds (adaptive/fixed: {}), plan Z {}..{}, {:.1}s",
            rows.join(" "),
            plan.z[0],
            plan.z[t - 1],
            elapsed.as_secs_f64()
        ),
    )
}

fn traffic_arithmetic() -> Outcome {
    let rate = compression_rate(4, 16.0);
    let d = 7850usize;
    let total: f64 = (0..200).map(|_| approx_traffic_bits(d, 16.0)).sum();
    check(
        rate == 8.0 && total == 800.0 * d as f64,
        format!("rate at h = 4, Z = 16: {rate}; 200 rounds at Z = 16: {total} bits = {}d", total / d as f64),
    )
}

fn netsim_moments() -> Outcome {
    let model = NetworkModel::default();
    let mut rng = rng_from(123);
    let n = 1_000_000;
    let samples = model.sample_throughputs(n, &mut rng);
    let mean = samples.iter().sum::<f64>() / n as f64;
    let std = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let time = round_comm_time(1.4e6, &[1.4e6; 10]).unwrap();
    let mean_err = (mean / 1.4e6 - 1.0).abs();
    let std_err = (std / 1.4e5 - 1.0).abs();
    check(
        mean_err < 0.005 && std_err < 0.03 && time == 1.0,
        format!(
            "mean {mean:.0} b/s ({:.3}% off), std {std:.0} b/s ({:.3}% off), unit round time {time}",
            100.0 * mean_err,
            100.0 * std_err
        ),
    )
}

/// `None` when the dataset directory is not configured.
fn full_mnist() -> Option<Outcome> {
    let dir = PathBuf::from(std::env::var_os("FEDCOMP_MNIST_DIR")?);
    let started = Instant::now();
    let train = match load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte")) {
        Ok(d) => d,
        Err(e) => return Some(check(false, format!("loading training set: {e}"))),
    };
    let test = match load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte")) {
        Ok(d) => d,
        Err(e) => return Some(check(false, format!("loading test set: {e}"))),
    };
    let (n, k, e, b, t) = (100usize, 10usize, 5usize, 50usize, 200usize);
    let seeds = Seeds::from_master(1);
    let clients = match partition(&train, n, PartitionMode::Noniid, 500, 5, &mut rng_from(seeds.partition)) {
        Ok(c) => c,
        Err(err) => return Some(check(false, format!("partition: {err}"))),
    };
    let arch = Architecture::Logistic { features: 784, classes: 10 };
    let lr: Vec<f64> = (0..t).map(|r| lr_schedule_convex(r, e)).collect();
    let problem = AllocationProblem::new(
        weights_from_schedule(&lr, LossKind::Convex).unwrap(),
        ErrorBoundFamily::pq(arch.dim(), e, 1.0),
        800.0,
    )
    .unwrap();
    let plan = allocate(&problem).unwrap();
    let config = FLConfig::new(
        k,
        e,
        b,
        t,
        Compression::PerRound {
            scheme: Scheme::Pq,
            counts: plan.z,
        },
        seeds,
    );
    let out = run(&config, arch.init(&mut rng_from(seeds.init)), &clients, &test, &NetworkModel::default()).unwrap();
    let acc = out.metrics.last().unwrap().test_accuracy;
    let elapsed = started.elapsed();
    Some(check(
        acc >= 0.83 && within(elapsed, 3600.0),
        format!("final test accuracy {acc:.4} (target 0.85, tolerance 0.02), {:.0}s", elapsed.as_secs_f64()),
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("codec unbiasedness", codec_unbiasedness),
        ("bound dominance", bound_dominance),
        ("allocator optimality", allocator_optimality),
        ("allocator structure", allocator_structure),
        ("gradient exactness", gradient_exactness),
        ("engine equivalence", engine_equivalence),
        ("adaptive vs fixed", adaptive_vs_fixed),
        ("traffic arithmetic", traffic_arithmetic),
        ("netsim moments", netsim_moments),
    ];
    let mut failed = 0;
    for (name, criterion) in criteria {
        let outcome = criterion();
        println!("{} {name}: {}", if outcome.pass { "PASS" } else { "FAIL" }, outcome.detail);
        failed += usize::from(!outcome.pass);
    }
    match full_mnist() {
        Some(outcome) => {
            println!("{} full mnist: {}", if outcome.pass { "PASS" } else { "FAIL" }, outcome.detail);
            failed += usize::from(!outcome.pass);
        }
        None => println!("SKIP full mnist: set FEDCOMP_MNIST_DIR to the directory holding the four IDX files"),
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
