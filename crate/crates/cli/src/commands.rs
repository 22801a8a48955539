use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use fedcomp::allocator::{allocate, allocate_topk, weights_from_schedule, AllocError, AllocationProblem};
use fedcomp::bounds::{theorem1_rhs, theorem2_rhs, BoundConstants, ErrorBoundFamily, Theorem2Condition};
use fedcomp::codecs::{Codec, Scheme};
use fedcomp::engine::{run_observed, Compression, EngineError, FLConfig, LrSchedule};
use fedcomp::learners::{load_idx, partition, read_fixture, synthetic_classification, Dataset};
use fedcomp::seeds::{derive_seed, rng_from, Seeds};

use crate::config::{CompressionSpec, DatasetSpec, ExperimentConfig};
use crate::output::{
    content_hash, metrics_csv, parse_metrics, write_atomic, MetricsRow, COMPARE_SCHEMA, MANIFEST_SCHEMA,
};

/// Bits in one (decimal) megabyte.
pub const BITS_PER_MB: f64 = 8e6;

/// A per-round plan as written to `plan.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub scheme: Scheme,
    /// Levels per round for PQ/QSGD, kept counts for TopK.
    #[serde(rename = "Z")]
    pub z: Vec<u32>,
    /// Relaxed solution in bits; empty for TopK.
    pub x_real: Vec<f64>,
    pub objective: f64,
    pub objective_relaxed: Option<f64>,
    /// Bits per dimension spent by the rounded plan.
    pub budget_used: f64,
    pub budget: f64,
    pub dim: usize,
}

fn infeasible(e: AllocError, dim: usize, rounds: usize) -> anyhow::Error {
    match e {
        AllocError::Infeasible { budget, minimum } => anyhow!(
            "budget C = {} bits ({budget} bits/dim) is infeasible for T = {rounds}; \
             the minimum feasible C is {} bits ({minimum} bits/dim)",
            budget * dim as f64,
            minimum * dim as f64
        ),
        other => other.into(),
    }
}

/// The allocator's plan for an adaptive configuration; `None` otherwise.
pub fn build_plan(config: &ExperimentConfig) -> Result<Option<PlanFile>> {
    let CompressionSpec::Adaptive {
        scheme,
        budget_bits_per_dim,
        x_min,
        x_max,
        grad_norm_sq,
    } = &config.compression
    else {
        return Ok(None);
    };
    let t = &config.training;
    let d = config.dim();
    let lr = config.lr_schedule().sequence(t.rounds, t.local_steps)?;
    let weights = weights_from_schedule(&lr, config.loss_kind())?;
    let plan = match scheme {
        Scheme::Pq | Scheme::Qsgd => {
            let family = match scheme {
                Scheme::Pq => ErrorBoundFamily::pq(d, t.local_steps, *grad_norm_sq),
                _ => ErrorBoundFamily::qsgd(d, t.local_steps, *grad_norm_sq),
            };
            let problem = match (x_min, x_max) {
                (None, None) => AllocationProblem::new(weights, family, *budget_bits_per_dim),
                _ => {
                    let default = AllocationProblem::new(weights.clone(), family, f64::MAX)?;
                    AllocationProblem::with_box(
                        weights,
                        family,
                        *budget_bits_per_dim,
                        x_min.unwrap_or(default.x_min()),
                        x_max.unwrap_or(default.x_max()),
                    )
                }
            }
            .map_err(|e| infeasible(e, d, t.rounds))?;
            let plan = allocate(&problem).map_err(|e| infeasible(e, d, t.rounds))?;
            PlanFile {
                scheme: *scheme,
                z: plan.z,
                x_real: plan.x_real,
                objective: plan.objective_rounded,
                objective_relaxed: Some(plan.objective_relaxed),
                budget_used: plan.budget_used_bits_per_dim,
                budget: *budget_bits_per_dim,
                dim: d,
            }
        }
        Scheme::TopK => {
            let e = t.local_steps as f64;
            let budget_bits = (budget_bits_per_dim * d as f64).floor() as u64;
            let plan = allocate_topk(&weights, d, e * e * grad_norm_sq, budget_bits, t.value_bytes)?;
            PlanFile {
                scheme: Scheme::TopK,
                z: plan.keep.iter().map(|&k| k as u32).collect(),
                x_real: Vec::new(),
                objective: plan.objective,
                objective_relaxed: None,
                budget_used: plan.budget_used_bits as f64 / d as f64,
                budget: *budget_bits_per_dim,
                dim: d,
            }
        }
        Scheme::Raw => bail!("raw updates have nothing to allocate"),
    };
    Ok(Some(plan))
}

fn plan_json(plan: &PlanFile) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(plan)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn plan_summary(plan: &PlanFile, lr: &[f64]) -> String {
    let label = if plan.scheme == Scheme::TopK { "K" } else { "Z" };
    let mut out = format!("{:?} plan over {} rounds, d = {}\n", plan.scheme, plan.z.len(), plan.dim);
    let _ = writeln!(out, "{:>5}  {:>12}  {:>8}  {:>10}", "t", "lr", label, "x_real");
    for (i, z) in plan.z.iter().enumerate() {
        let x = plan.x_real.get(i).map_or("-".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(out, "{:>5}  {:>12.6e}  {z:>8}  {x:>10}", i + 1, lr[i]);
    }
    let _ = writeln!(
        out,
        "budget used: {:.6} of {} bits/dim ({:.0} of {:.0} bits)",
        plan.budget_used,
        plan.budget,
        plan.budget_used * plan.dim as f64,
        plan.budget * plan.dim as f64
    );
    let _ = writeln!(out, "objective: {:.6e}", plan.objective);
    out
}

pub fn cmd_allocate(config: &ExperimentConfig, out: &Path) -> Result<PlanFile> {
    let plan = match build_plan(config)? {
        Some(plan) => plan,
        None => bail!(
            "nothing to allocate: {} uses a fixed compression setting; \
             set compression.mode = \"adaptive\" with a budget_bits_per_dim to compute a plan",
            config.name
        ),
    };
    let t = &config.training;
    let lr = config.lr_schedule().sequence(t.rounds, t.local_steps)?;
    let path = out.join("plan.json");
    write_atomic(&path, &plan_json(&plan)?)?;
    print!("{}", plan_summary(&plan, &lr));
    println!("wrote {}", path.display());
    Ok(plan)
}

fn load_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (features, classes) = config.dataset.shape();
    let (train, test) = match &config.dataset {
        DatasetSpec::Synthetic {
            train_samples,
            test_samples,
            separation,
            ..
        } => {
            let all = synthetic_classification(
                derive_seed(config.seed, "data"),
                train_samples + test_samples,
                features,
                classes,
                *separation,
            );
            let train = all.subset(&(0..*train_samples).collect::<Vec<_>>());
            let test = all.subset(&(*train_samples..train_samples + test_samples).collect::<Vec<_>>());
            (train, test)
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } => (
            load_idx(train_images, train_labels).context("training set")?,
            load_idx(test_images, test_labels).context("test set")?,
        ),
        DatasetSpec::Fixture { train, test, .. } => {
            let open = |p: &PathBuf| -> Result<Dataset> {
                let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
                read_fixture(f).with_context(|| format!("reading {}", p.display()))
            };
            (open(train)?, open(test)?)
        }
    };
    for (what, d) in [("training", &train), ("test", &test)] {
        if d.n_features() != features || d.n_classes() != classes {
            bail!(
                "{what} set has {} features and {} classes, config says {features} and {classes}",
                d.n_features(),
                d.n_classes()
            );
        }
    }
    Ok((train, test))
}

fn input_hashes(config: &ExperimentConfig) -> Result<Vec<serde_json::Value>> {
    config
        .dataset
        .input_files()
        .into_iter()
        .map(|p| {
            let bytes = fs::read(p).with_context(|| format!("hashing {}", p.display()))?;
            Ok(json!({ "path": p, "sha256": content_hash(&bytes) }))
        })
        .collect()
}

/// Worker count from `FEDCOMP_THREADS`, if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("FEDCOMP_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => bail!("FEDCOMP_THREADS must be a positive integer, got {v:?}"),
        },
    }
}

/// `ceil(fraction·d)`, ignoring float fuzz such as `0.03·200 = 6.000…01`.
pub fn keep_from_fraction(fraction: f64, dim: usize) -> usize {
    ((fraction * dim as f64 - 1e-9).ceil() as usize).clamp(1, dim)
}

fn compression(config: &ExperimentConfig, plan: Option<&PlanFile>) -> Compression {
    match (&config.compression, plan) {
        (CompressionSpec::None, _) => Compression::Fixed(Codec::Raw),
        (
            CompressionSpec::Fixed {
                scheme,
                levels,
                keep,
                keep_fraction,
            },
            _,
        ) => Compression::Fixed(match scheme {
            Scheme::Pq => Codec::Pq {
                levels: levels.expect("validated"),
            },
            Scheme::Qsgd => Codec::Qsgd {
                levels: levels.expect("validated"),
            },
            Scheme::TopK => Codec::TopK {
                keep: keep.unwrap_or_else(|| {
                    let fr = keep_fraction.expect("validated");
                    keep_from_fraction(fr, config.dim())
                }),
            },
            Scheme::Raw => Codec::Raw,
        }),
        (CompressionSpec::Adaptive { .. }, Some(plan)) => Compression::PerRound {
            scheme: plan.scheme,
            counts: plan.z.clone(),
        },
        (CompressionSpec::Adaptive { .. }, None) => unreachable!("adaptive runs carry a plan"),
    }
}

/// Trains one experiment into `out`; returns a one-line summary.
pub fn cmd_run(config: &ExperimentConfig, out: &Path) -> Result<String> {
    let plan = build_plan(config)?;
    if let Some(plan) = &plan {
        write_atomic(&out.join("plan.json"), &plan_json(plan)?)?;
    }
    let (train, test) = load_data(config)?;
    let inputs = input_hashes(config)?;
    let p = &config.partition;
    let seeds = Seeds::from_master(config.seed);
    let clients = partition(
        &train,
        p.clients,
        p.mode,
        p.samples_per_client,
        p.classes_per_client,
        &mut rng_from(seeds.partition),
    )?;
    let (features, classes) = config.dataset.shape();
    let arch = config.model.architecture(features, classes);
    let t = &config.training;
    let lr: LrSchedule = config.lr_schedule();
    let mut fl = FLConfig::new(
        t.clients_per_round,
        t.local_steps,
        t.batch_size,
        t.rounds,
        compression(config, plan.as_ref()),
        seeds,
    );
    fl.lr = lr.clone();
    fl.aggregation = t.aggregation;
    fl.value_bytes = t.value_bytes;
    fl.threads = threads_from_env()?;

    let mut rows = Vec::with_capacity(t.rounds);
    let result = run_observed(&fl, arch.init(&mut rng_from(seeds.init)), &clients, &test, &config.network, |m| {
        rows.push(m.clone())
    });
    let failure = result.as_ref().err().map(|e| match e {
        EngineError::Round { round, source } => format!("round {round}: {source}"),
        other => other.to_string(),
    });

    let csv = metrics_csv(&rows, failure.as_deref());
    write_atomic(&out.join("metrics.csv"), csv.as_bytes())?;
    let config_json = serde_json::to_vec(config)?;
    let manifest = json!({
        "schema": MANIFEST_SCHEMA,
        "name": config.name,
        "seed": config.seed,
        "seeds": seeds,
        "config": config,
        "config_sha256": content_hash(&config_json),
        "inputs": inputs,
        "dim": arch.dim(),
        "aggregation": t.aggregation,
        "loss": config.loss_kind(),
        "lr": lr,
        "plan": plan.as_ref().map(|p| json!({ "file": "plan.json", "Z": p.z, "budget_used": p.budget_used })),
        "status": if failure.is_some() { "failed" } else { "complete" },
        "rounds_completed": rows.len(),
        "error": failure,
        "metrics_sha256": content_hash(csv.as_bytes()),
        "version": env!("CARGO_PKG_VERSION"),
    });
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    manifest_bytes.push(b'\n');
    write_atomic(&out.join("manifest.json"), &manifest_bytes)?;

    if let Some(reason) = failure {
        bail!("{}: run aborted at {reason}; partial metrics kept in {}", config.name, out.display());
    }
    let last = rows.last().context("run produced no rounds")?;
    let comm: f64 = rows.iter().map(|m| m.comm_s).sum();
    Ok(format!(
        "{}: {} rounds, final accuracy {:.4}, uplink {:.3} MB, comm time {:.2} s -> {}",
        config.name,
        rows.len(),
        last.test_accuracy,
        last.bits_cum as f64 / BITS_PER_MB,
        comm,
        out.display()
    ))
}

/// First-crossing of each target by one run.
#[derive(Debug, Clone, PartialEq)]
pub enum Crossing {
    Reached { round: usize, bits: u64, comm_s: f64 },
    NotReached { max_acc: f64 },
}

pub fn first_crossing(rows: &[MetricsRow], target: f64) -> Crossing {
    let mut comm = 0.0;
    for r in rows {
        comm += r.comm_s;
        if r.acc >= target {
            return Crossing::Reached {
                round: r.t,
                bits: r.bits_cum,
                comm_s: comm,
            };
        }
    }
    Crossing::NotReached {
        max_acc: rows.iter().map(|r| r.acc).fold(0.0, f64::max),
    }
}

/// Tab-separated comparison: one row per run and target.
pub fn compare_table(runs: &[(String, Vec<MetricsRow>)], targets: &[f64]) -> String {
    let mut out = format!("# schema: {COMPARE_SCHEMA}; 1 MB = 8e6 bits\nalgorithm\ttarget\tround\ttraffic_MB\tcomm_s\n");
    for (name, rows) in runs {
        for &target in targets {
            let _ = match first_crossing(rows, target) {
                Crossing::Reached { round, bits, comm_s } => writeln!(
                    out,
                    "{name}\t{target}\t{round}\t{:.6}\t{comm_s:.6}",
                    bits as f64 / BITS_PER_MB
                ),
                Crossing::NotReached { max_acc } => {
                    writeln!(out, "{name}\t{target}\t-\tnot reached (max acc = {max_acc:.4})\t-")
                }
            };
        }
    }
    out
}

/// A run to be compared: executed from a configuration, or read back from
/// an earlier output directory.
pub enum CompareInput {
    Config(Box<ExperimentConfig>),
    RunDir(PathBuf),
}

pub fn cmd_compare(inputs: Vec<CompareInput>, targets: &[f64], out: &Path) -> Result<String> {
    if inputs.is_empty() {
        bail!("nothing to compare: pass --preset, --config or --run at least once");
    }
    if targets.is_empty() || targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
        bail!("targets must be accuracies in [0, 1]");
    }
    let mut runs = Vec::new();
    let mut names = BTreeSet::new();
    for input in inputs {
        let (name, dir) = match input {
            CompareInput::Config(config) => {
                let config = *config;
                if !names.insert(config.name.clone()) {
                    bail!("two experiments are named {:?}; give each a distinct `name`", config.name);
                }
                let dir = out.join(&config.name);
                eprintln!("{}", cmd_run(&config, &dir)?);
                (config.name, dir)
            }
            CompareInput::RunDir(dir) => {
                let manifest = fs::read_to_string(dir.join("manifest.json"))
                    .with_context(|| format!("reading {}", dir.join("manifest.json").display()))?;
                let manifest: serde_json::Value = serde_json::from_str(&manifest)?;
                let name = manifest["name"]
                    .as_str()
                    .with_context(|| format!("{}: manifest has no name", dir.display()))?
                    .to_owned();
                // Runs read back from disk fall back to their path when the name is taken.
                let name = if names.insert(name.clone()) {
                    name
                } else {
                    let label = dir.display().to_string();
                    if !names.insert(label.clone()) {
                        bail!("{label} is listed twice");
                    }
                    label
                };
                (name, dir)
            }
        };
        let path = dir.join("metrics.csv");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let metrics = parse_metrics(&text).with_context(|| path.display().to_string())?;
        if metrics.truncated {
            eprintln!("warning: {} is truncated; comparing its completed rounds", path.display());
        }
        runs.push((name, metrics.rows));
    }
    let table = compare_table(&runs, targets);
    write_atomic(&out.join("compare.tsv"), table.as_bytes())?;
    print!("{table}");
    Ok(table)
}

/// Constants file for `bounds`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsFile {
    pub smoothness: f64,
    #[serde(default)]
    pub strong_convexity: f64,
    pub sigma2: f64,
    pub grad_norm_sq: f64,
    #[serde(default)]
    pub heterogeneity_convex: f64,
    #[serde(default)]
    pub heterogeneity_nonconvex: f64,
    pub c: f64,
    pub batch_size: usize,
    pub local_steps: usize,
    pub clients_per_round: usize,
    /// Uniform client weights over this many clients, unless `weights` is
    /// given.
    pub clients: Option<usize>,
    pub weights: Option<Vec<f64>>,
    pub dim: usize,
    pub rounds: usize,
    /// Schedule for both bounds; the convex bound's own `2/(μ(t+γ))` is
    /// used when absent.
    pub lr: Option<LrSchedule>,
    /// Per-round compression error, as one value or a list...
    pub j: Option<OneOrMany<f64>>,
    /// ...or levels fed through the scheme's error bound.
    pub scheme: Option<Scheme>,
    pub levels: Option<OneOrMany<u32>>,
    #[serde(default = "one")]
    pub w0_gap: f64,
    #[serde(default = "one")]
    pub f0_gap: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Copy> OneOrMany<T> {
    fn expand(&self, n: usize, what: &str) -> Result<Vec<T>> {
        match self {
            Self::One(v) => Ok(vec![*v; n]),
            Self::Many(v) if v.len() == n => Ok(v.clone()),
            Self::Many(v) => bail!("{what} has {} entries, rounds = {n}", v.len()),
        }
    }
}

pub fn cmd_bounds(path: &Path, out: Option<&Path>) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: BoundsFile = toml::from_str(&text).with_context(|| format!("malformed constants in {}", path.display()))?;
    let weights = match (&file.weights, file.clients) {
        (Some(w), None) => w.clone(),
        (None, Some(n)) if n > 0 => vec![1.0 / n as f64; n],
        _ => bail!("give exactly one of `clients` (uniform weights) and `weights`"),
    };
    let constants = BoundConstants {
        smoothness: file.smoothness,
        strong_convexity: file.strong_convexity,
        sigma2: file.sigma2,
        grad_norm_sq: file.grad_norm_sq,
        heterogeneity_convex: file.heterogeneity_convex,
        heterogeneity_nonconvex: file.heterogeneity_nonconvex,
        c: file.c,
        batch_size: file.batch_size,
        local_steps: file.local_steps,
        clients_per_round: file.clients_per_round,
        weights,
        dim: file.dim,
    };
    constants.validate()?;
    let rounds = file.rounds;
    if rounds == 0 {
        bail!("rounds must be at least 1");
    }
    let j = match (&file.j, &file.levels) {
        (Some(j), None) => j.expand(rounds, "j")?,
        (None, Some(levels)) => {
            let family = match file.scheme {
                Some(Scheme::Pq) => ErrorBoundFamily::pq(file.dim, file.local_steps, file.grad_norm_sq),
                Some(Scheme::Qsgd) => ErrorBoundFamily::qsgd(file.dim, file.local_steps, file.grad_norm_sq),
                other => bail!("`levels` needs scheme = \"pq\" or \"qsgd\", got {other:?}"),
            };
            levels
                .expand(rounds, "levels")?
                .into_iter()
                .map(|z| family.at_level(z as f64))
                .collect::<Result<_, _>>()?
        }
        (None, None) => vec![0.0; rounds],
        (Some(_), Some(_)) => bail!("give `j` or `levels`, not both"),
    };
    let lr = match &file.lr {
        Some(s) => Some(s.sequence(rounds, file.local_steps)?),
        None => None,
    };

    let mut report = serde_json::Map::new();
    let mut text = String::new();
    if constants.strong_convexity > 0.0 {
        let r = theorem1_rhs(&constants, rounds, lr.as_deref(), &j, file.w0_gap)?;
        let _ = writeln!(
            text,
            "convex bound after {rounds} rounds: {:.6e} (alpha = {:.6e}, gamma = {:.4}, compression term {:.6e})",
            r.value, r.alpha, r.gamma, r.compression_sum
        );
        if !r.in_theorem {
            let _ = writeln!(text, "  note: the schedule differs from 2/(mu(t+gamma)); the bound is evaluated outside its premises");
        }
        report.insert("convex".into(), serde_json::to_value(&r)?);
    }
    let lr2 = match lr {
        Some(lr) => lr,
        None if constants.strong_convexity > 0.0 => constants.convex_schedule(rounds),
        None => bail!("the nonconvex bound needs an `lr` schedule when strong_convexity is 0"),
    };
    let r = theorem2_rhs(&constants, rounds, &lr2, &j, file.f0_gap)?;
    let _ = writeln!(
        text,
        "nonconvex bound after {rounds} rounds: {:.6e} (compression {:.6e}, noise {:.6e}, drift {:.6e}, initial gap {:.6e})",
        r.value, r.compression_term, r.noise_term, r.drift_term, r.initial_gap_term
    );
    if r.premises_hold() {
        let _ = writeln!(text, "  step-size conditions hold in every round");
    } else {
        for condition in [
            Theorem2Condition::StepSize,
            Theorem2Condition::Participation,
            Theorem2Condition::Contraction,
        ] {
            let hits: Vec<_> = r.violations.iter().filter(|v| v.condition == condition).collect();
            if let Some(first) = hits.first() {
                let _ = writeln!(
                    text,
                    "  violated: {condition:?} in {} rounds, first at t = {} ({:.4e} vs {:.4e})",
                    hits.len(),
                    first.round + 1,
                    first.lhs,
                    first.rhs
                );
            }
        }
    }
    report.insert("nonconvex".into(), serde_json::to_value(&r)?);
    report.insert("premises_hold".into(), r.premises_hold().into());
    let report = serde_json::Value::Object(report);
    print!("{text}");
    if let Some(dir) = out {
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        write_atomic(&dir.join("bounds.json"), &bytes)?;
    }
    Ok(report)
}
