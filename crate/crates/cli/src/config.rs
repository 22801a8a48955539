use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fedcomp::allocator::LossKind;
use fedcomp::codecs::{Scheme, DEFAULT_VALUE_BYTES};
use fedcomp::engine::{Aggregation, LrSchedule};
use fedcomp::learners::{Architecture, PartitionMode};
use fedcomp::netsim::NetworkModel;

/// One experiment, fully resolved. Written verbatim into every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used in comparison tables and output directory names.
    pub name: String,
    /// Master seed; every component stream is derived from it.
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub partition: PartitionSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub training: TrainingSpec,
    pub compression: CompressionSpec,
    #[serde(default)]
    pub network: NetworkModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian clusters; train and test come from one draw.
    Synthetic {
        train_samples: usize,
        test_samples: usize,
        features: usize,
        classes: usize,
        separation: f64,
    },
    /// IDX image/label pairs. `features` and `classes` are checked against
    /// the files and let plans be computed without them.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "idx_features")]
        features: usize,
        #[serde(default = "idx_classes")]
        classes: usize,
    },
    /// Binary dataset fixtures as written by `write_fixture`.
    Fixture {
        train: PathBuf,
        test: PathBuf,
        features: usize,
        classes: usize,
    },
}

fn idx_features() -> usize {
    784
}

fn idx_classes() -> usize {
    10
}

impl DatasetSpec {
    pub fn shape(&self) -> (usize, usize) {
        match *self {
            Self::Synthetic { features, classes, .. }
            | Self::Idx { features, classes, .. }
            | Self::Fixture { features, classes, .. } => (features, classes),
        }
    }

    /// Files the dataset is read from, in a fixed order.
    pub fn input_files(&self) -> Vec<&Path> {
        match self {
            Self::Synthetic { .. } => Vec::new(),
            Self::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => vec![train_images, train_labels, test_images, test_labels],
            Self::Fixture { train, test, .. } => vec![train, test],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    pub clients: usize,
    pub mode: PartitionMode,
    pub samples_per_client: usize,
    /// Classes per client in non-IID mode.
    pub classes_per_client: usize,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            clients: 100,
            mode: PartitionMode::Noniid,
            samples_per_client: 500,
            classes_per_client: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    Logistic,
    Mlp { hidden: usize },
}

impl ModelSpec {
    pub fn architecture(&self, features: usize, classes: usize) -> Architecture {
        match *self {
            Self::Logistic => Architecture::Logistic { features, classes },
            Self::Mlp { hidden } => Architecture::Mlp {
                features,
                hidden,
                classes,
            },
        }
    }

    pub fn default_loss(&self) -> LossKind {
        match self {
            Self::Logistic => LossKind::Convex,
            Self::Mlp { .. } => LossKind::Nonconvex,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSpec {
    pub clients_per_round: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub rounds: usize,
    /// Defaults to the schedule matching the loss kind.
    pub lr: Option<LrSchedule>,
    /// Defaults to convex for logistic models and nonconvex for MLPs.
    pub loss: Option<LossKind>,
    pub aggregation: Aggregation,
    /// Bytes per transmitted real value.
    pub value_bytes: u32,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            clients_per_round: 10,
            local_steps: 5,
            batch_size: 50,
            rounds: 200,
            lr: None,
            loss: None,
            aggregation: Aggregation::AnalysisMean,
            value_bytes: DEFAULT_VALUE_BYTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum CompressionSpec {
    /// Uncompressed uplink.
    None,
    /// The same codec every round. PQ and QSGD take `levels`; TopK takes
    /// `keep` or `keep_fraction` of the model dimension (rounded up).
    Fixed {
        scheme: Scheme,
        levels: Option<u32>,
        keep: Option<usize>,
        keep_fraction: Option<f64>,
    },
    /// A per-round plan from the allocator under a total budget of
    /// `budget_bits_per_dim · d` bits.
    Adaptive {
        scheme: Scheme,
        budget_bits_per_dim: f64,
        x_min: Option<f64>,
        x_max: Option<f64>,
        /// `G²` in the error bound; the plan does not depend on it.
        #[serde(default = "unit")]
        grad_norm_sq: f64,
    },
}

fn unit() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn dim(&self) -> usize {
        let (f, c) = self.dataset.shape();
        self.model.architecture(f, c).dim()
    }

    pub fn loss_kind(&self) -> LossKind {
        self.training.loss.unwrap_or_else(|| self.model.default_loss())
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        self.training.lr.clone().unwrap_or_else(|| LrSchedule::for_loss(self.loss_kind()))
    }

    pub fn validate(&self) -> Result<()> {
        let (f, c) = self.dataset.shape();
        if f == 0 || c < 2 {
            bail!("dataset needs at least one feature and two classes, got {f} and {c}");
        }
        if let ModelSpec::Mlp { hidden: 0 } = self.model {
            bail!("MLP hidden width must be positive");
        }
        let p = &self.partition;
        if p.clients == 0 || p.samples_per_client == 0 {
            bail!("partition needs at least one client and one sample per client");
        }
        if let DatasetSpec::Synthetic { train_samples, .. } = self.dataset {
            if p.clients * p.samples_per_client > train_samples {
                bail!(
                    "{} clients x {} samples exceeds the {train_samples} synthetic training samples",
                    p.clients,
                    p.samples_per_client
                );
            }
        }
        match &self.compression {
            CompressionSpec::None => {}
            CompressionSpec::Fixed {
                scheme,
                levels,
                keep,
                keep_fraction,
            } => match scheme {
                Scheme::Pq | Scheme::Qsgd => {
                    if levels.is_none() {
                        bail!("fixed {scheme:?} needs `levels`");
                    }
                    if keep.is_some() || keep_fraction.is_some() {
                        bail!("`keep` and `keep_fraction` only apply to topk");
                    }
                }
                Scheme::TopK => {
                    if keep.is_some() == keep_fraction.is_some() {
                        bail!("fixed topk needs exactly one of `keep` and `keep_fraction`");
                    }
                    if let Some(fr) = keep_fraction {
                        if !(*fr > 0.0 && *fr <= 1.0) {
                            bail!("keep_fraction {fr} outside (0, 1]");
                        }
                    }
                    if levels.is_some() {
                        bail!("`levels` does not apply to topk");
                    }
                }
                Scheme::Raw => bail!("use mode = \"none\" for uncompressed runs"),
            },
            CompressionSpec::Adaptive {
                scheme,
                budget_bits_per_dim,
                grad_norm_sq,
                ..
            } => {
                if *scheme == Scheme::Raw {
                    bail!("raw updates have nothing to allocate");
                }
                if !(budget_bits_per_dim.is_finite() && *budget_bits_per_dim > 0.0) {
                    bail!("budget_bits_per_dim must be positive, got {budget_bits_per_dim}");
                }
                if !(grad_norm_sq.is_finite() && *grad_norm_sq > 0.0) {
                    bail!("grad_norm_sq must be positive, got {grad_norm_sq}");
                }
            }
        }
        Ok(())
    }
}

/// Built-in presets, as TOML overlays onto nothing.
pub const PRESETS: &[(&str, &str)] = &[
    ("mnist-convex", MNIST_CONVEX),
    ("fixed-16", FIXED_16),
    ("topk", TOPK),
    ("cifar-nonconvex", CIFAR_NONCONVEX),
    ("smoke", SMOKE),
    ("smoke-adaptive", SMOKE_ADAPTIVE),
    ("smoke-raw", SMOKE_RAW),
    ("smoke-topk", SMOKE_TOPK),
];

const MNIST: &str = r#"
seed = 1

[dataset]
kind = "idx"
train_images = "data/mnist/train-images-idx3-ubyte"
train_labels = "data/mnist/train-labels-idx1-ubyte"
test_images = "data/mnist/t10k-images-idx3-ubyte"
test_labels = "data/mnist/t10k-labels-idx1-ubyte"

[partition]
clients = 100
mode = "noniid"
samples_per_client = 500
classes_per_client = 5

[model]
kind = "logistic"

[training]
clients_per_round = 10
local_steps = 5
batch_size = 50
rounds = 200
"#;

const MNIST_CONVEX: &str = r#"
name = "mnist-convex"

[compression]
mode = "adaptive"
scheme = "pq"
budget_bits_per_dim = 800.0
"#;

const FIXED_16: &str = r#"
name = "fixed-16"

[compression]
mode = "fixed"
scheme = "pq"
levels = 16
"#;

const TOPK: &str = r#"
name = "topk"

[compression]
mode = "fixed"
scheme = "topk"
keep_fraction = 0.03
"#;

// no CIFAR loader: a synthetic stand-in with CIFAR's input width
const CIFAR_NONCONVEX: &str = r#"
name = "cifar-nonconvex"
seed = 1

[dataset]
kind = "synthetic"
train_samples = 10000
test_samples = 2000
features = 3072
classes = 10
separation = 3.0

[partition]
clients = 100
mode = "noniid"
samples_per_client = 100
classes_per_client = 5

[model]
kind = "mlp"
hidden = 64

[training]
clients_per_round = 10
local_steps = 5
batch_size = 8
rounds = 400

[compression]
mode = "adaptive"
scheme = "qsgd"
budget_bits_per_dim = 2800.0
"#;

// 19 features x 10 classes + 10 biases = 200 parameters
const SMOKE: &str = r#"
name = "smoke"
seed = 7

[dataset]
kind = "synthetic"
train_samples = 4000
test_samples = 1000
features = 19
classes = 10
separation = 3.0

[partition]
clients = 20
mode = "iid"
samples_per_client = 200
classes_per_client = 10

[model]
kind = "logistic"

[training]
clients_per_round = 5
local_steps = 5
batch_size = 50
rounds = 30
lr = { kind = "inverse_time", initial = 0.2, rate = 0.05 }

[compression]
mode = "fixed"
scheme = "pq"
levels = 16
"#;

const SMOKE_ADAPTIVE: &str = r#"
name = "smoke-adaptive"

[compression]
mode = "adaptive"
scheme = "pq"
budget_bits_per_dim = 120.0
"#;

const SMOKE_RAW: &str = r#"
name = "smoke-raw"

[compression]
mode = "none"
"#;

const SMOKE_TOPK: &str = r#"
name = "smoke-topk"

[compression]
mode = "fixed"
scheme = "topk"
keep_fraction = 0.03
"#;

fn preset_layers(name: &str) -> Result<Vec<&'static str>> {
    let own = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, body)| *body)
        .with_context(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            format!("unknown preset {name:?}; available: {}", names.join(", "))
        })?;
    Ok(match name {
        "mnist-convex" | "fixed-16" | "topk" => vec![MNIST, own],
        "smoke-adaptive" | "smoke-raw" | "smoke-topk" => vec![SMOKE, own],
        _ => vec![own],
    })
}

pub fn preset(name: &str) -> Result<toml::Table> {
    let mut out = toml::Table::new();
    for layer in preset_layers(name)? {
        let table: toml::Table = toml::from_str(layer).expect("built-in presets parse");
        merge(&mut out, table);
    }
    Ok(out)
}

const TAGS: [&str; 3] = ["kind", "mode", "scheme"];

/// Recursive overlay: tables merge key by key, anything else is replaced.
/// A table whose `kind`, `mode` or `scheme` tag changes replaces the old one
/// whole, so fields of the previous variant do not linger. Tags listed before
/// the changed one (`mode` for a new `scheme`) are kept.
pub fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(old)), toml::Value::Table(mut new)) => match changed_tag(old, &new) {
                None => merge(old, new),
                Some(i) => {
                    for tag in &TAGS[..i] {
                        if let (Some(v), false) = (old.get(*tag), new.contains_key(*tag)) {
                            new.insert((*tag).to_owned(), v.clone());
                        }
                    }
                    *old = new;
                }
            },
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn changed_tag(old: &toml::Table, new: &toml::Table) -> Option<usize> {
    TAGS.iter()
        .position(|tag| matches!((old.get(*tag), new.get(*tag)), (Some(a), Some(b)) if a != b))
}

/// Where a configuration came from, for error messages.
#[derive(Debug, Default, Clone)]
pub struct Sources {
    pub preset: Option<String>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Resolves `--preset`, `--config` and `--seed` into one configuration.
///
/// A config file may name a base preset with a top-level `preset` key;
/// `--preset` takes its place when both are given. A `.json` config is
/// read as a run manifest and its embedded configuration is reused.
pub fn resolve(sources: &Sources) -> Result<ExperimentConfig> {
    let mut config = match &sources.config {
        Some(path) if path.extension().is_some_and(|e| e == "json") => {
            if sources.preset.is_some() {
                bail!("a manifest is a complete configuration; drop --preset");
            }
            from_manifest(path)?
        }
        _ => from_layers(sources)?,
    };
    if let Some(seed) = sources.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn from_manifest(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let config = manifest
        .get("config")
        .with_context(|| format!("{} has no `config` entry", path.display()))?;
    serde_json::from_value(config.clone()).with_context(|| format!("config in {}", path.display()))
}

fn from_layers(sources: &Sources) -> Result<ExperimentConfig> {
    let mut base = sources.preset.clone();
    let mut file_table = None;
    if let Some(path) = &sources.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut parsed: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(named) = parsed.remove("preset") {
            let named = named
                .as_str()
                .with_context(|| format!("{}: `preset` must be a string", path.display()))?
                .to_owned();
            base.get_or_insert(named);
        }
        file_table = Some(parsed);
    }
    let mut table = match (&base, &file_table) {
        (None, None) => bail!("nothing to run: pass --preset NAME or --config PATH"),
        (Some(name), _) => preset(name)?,
        (None, Some(_)) => toml::Table::new(),
    };
    if let Some(overlay) = file_table {
        merge(&mut table, overlay);
    }
    if !table.contains_key("name") {
        let name = base
            .or_else(|| {
                sources
                    .config
                    .as_ref()
                    .and_then(|p| p.file_stem())
                    .map(|s| s.to_string_lossy().into_owned())
            })
            .unwrap_or_else(|| "experiment".into());
        table.insert("name".into(), toml::Value::String(name));
    }
    table.try_into().context("invalid experiment configuration")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_resolves() {
        for (name, _) in PRESETS {
            let c = resolve(&Sources {
                preset: Some((*name).into()),
                ..Sources::default()
            })
            .unwrap_or_else(|e| panic!("{name}: {e:#}"));
            assert_eq!(c.name, *name);
        }
    }

    #[test]
    fn smoke_is_two_hundred_parameters() {
        let c = resolve(&Sources {
            preset: Some("smoke".into()),
            ..Sources::default()
        })
        .unwrap();
        assert_eq!(c.dim(), 200);
        assert_eq!(c.partition.clients, 20);
        assert_eq!(c.training.rounds, 30);
    }

    #[test]
    fn mnist_presets_share_one_protocol() {
        let adaptive = resolve(&Sources {
            preset: Some("mnist-convex".into()),
            ..Sources::default()
        })
        .unwrap();
        let fixed = resolve(&Sources {
            preset: Some("fixed-16".into()),
            ..Sources::default()
        })
        .unwrap();
        assert_eq!(adaptive.dim(), 7850);
        assert_eq!(adaptive.training, fixed.training);
        assert_eq!(adaptive.dataset, fixed.dataset);
        assert_eq!(
            fixed.compression,
            CompressionSpec::Fixed {
                scheme: Scheme::Pq,
                levels: Some(16),
                keep: None,
                keep_fraction: None
            }
        );
        assert_eq!(adaptive.loss_kind(), LossKind::Convex);
    }

    #[test]
    fn merge_replaces_changed_variants() {
        let mut base: toml::Table = toml::from_str(SMOKE).unwrap();
        let overlay: toml::Table = toml::from_str("[compression]\nmode = \"none\"\n[training]\nrounds = 3\n").unwrap();
        merge(&mut base, overlay);
        assert_eq!(base["compression"].as_table().unwrap().len(), 1);
        let training = base["training"].as_table().unwrap();
        assert_eq!(training["rounds"].as_integer(), Some(3));
        assert_eq!(training["batch_size"].as_integer(), Some(50));

        let mut base: toml::Table = toml::from_str(SMOKE).unwrap();
        let overlay: toml::Table = toml::from_str("[compression]\nscheme = \"topk\"\nkeep = 4\n").unwrap();
        merge(&mut base, overlay);
        let compression = base["compression"].as_table().unwrap();
        assert_eq!(compression["mode"].as_str(), Some("fixed"));
        assert!(!compression.contains_key("levels"));
    }

    #[test]
    fn unknown_keys_and_presets_are_rejected() {
        assert!(preset("nope").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "preset = \"smoke\"\n[training]\nrouns = 3\n").unwrap();
        let err = resolve(&Sources {
            config: Some(path),
            ..Sources::default()
        })
        .unwrap_err();
        assert!(format!("{err:#}").contains("rouns"), "{err:#}");
    }

    #[test]
    fn seed_flag_wins() {
        let c = resolve(&Sources {
            preset: Some("smoke".into()),
            seed: Some(99),
            ..Sources::default()
        })
        .unwrap();
        assert_eq!(c.seed, 99);
    }
}
