use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Thresholds;
use crate::gan::{DiscMode, GanHyper};
use crate::invert::{InversionConfig, LatentKind, PregMode};
use crate::io::sha256_hex;
use crate::nn::{DistillConfig, TrainHyper};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub target: ModelSpec,
    pub eval: ModelSpec,
    pub augment: AugmentSpec,
    pub gan: GanSpec,
    pub attack: AttackSpec,
    pub analysis: Thresholds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            target: ModelSpec::new("Conv3"),
            eval: ModelSpec::new("Conv5"),
            augment: AugmentSpec::default(),
            gan: GanSpec::default(),
            attack: AttackSpec::default(),
            analysis: Thresholds::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub private_classes: Vec<usize>,
    pub public_classes: Vec<usize>,
    /// Keep at most this many samples (seeded shuffle) before splitting.
    pub limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Idx {
                images: PathBuf::from("data/mnist/images.idx3-ubyte.gz"),
                labels: PathBuf::from("data/mnist/labels.idx1-ubyte.gz"),
            },
            private_classes: (0..5).collect(),
            public_classes: (5..10).collect(),
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Synth {
        classes: usize,
        per_class: usize,
        image_size: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: String,
    pub train: TrainHyper,
}

impl ModelSpec {
    fn new(arch: &str) -> Self {
        ModelSpec {
            arch: arch.into(),
            train: TrainHyper::default(),
        }
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::new("Conv3")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub archs: Vec<String>,
    pub distill: DistillConfig,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            archs: vec!["Conv2".into(), "Conv4".into()],
            distill: DistillConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanSpec {
    pub latent_dim: usize,
    pub critic: GanHyper,
    pub probabilistic: GanHyper,
}

impl Default for GanSpec {
    fn default() -> Self {
        GanSpec {
            latent_dim: 64,
            critic: GanHyper::default(),
            probabilistic: GanHyper::default(),
        }
    }
}

/// Attack pipeline family: latent distribution plus discriminator prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Point-estimate latent, critic prior `-D(G(z))`.
    Gmi,
    /// Diagonal-Gaussian latent, probabilistic prior `-log D(G(z))`.
    Kedmi,
}

impl AttackMode {
    pub const ALL: [AttackMode; 2] = [AttackMode::Gmi, AttackMode::Kedmi];

    pub fn name(self) -> &'static str {
        match self {
            AttackMode::Gmi => "gmi",
            AttackMode::Kedmi => "kedmi",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AttackMode::Gmi => "GMI",
            AttackMode::Kedmi => "KEDMI",
        }
    }

    pub fn latent(self) -> LatentKind {
        match self {
            AttackMode::Gmi => LatentKind::PointEstimate,
            AttackMode::Kedmi => LatentKind::DiagonalGaussian,
        }
    }

    pub fn disc_mode(self) -> DiscMode {
        match self {
            AttackMode::Gmi => DiscMode::Critic,
            AttackMode::Kedmi => DiscMode::Probabilistic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Lom,
    Ma,
    Lomma,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Lom, Variant::Ma, Variant::Lomma];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Lom => "lom",
            Variant::Ma => "ma",
            Variant::Lomma => "lomma",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config {
                field: "variant".into(),
                reason: format!("unknown variant `{s}` (baseline, lom, ma, lomma)"),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub modes: Vec<AttackMode>,
    pub variants: Vec<Variant>,
    /// Independent reconstructions per private class; these also form the
    /// groups behind the reported spread.
    pub candidates_per_class: usize,
    pub lambda_reg: f64,
    pub preg_mode: PregMode,
    /// Public images for the anchor statistics; `None` means `min(5000, |public|)`.
    pub preg_count: Option<usize>,
    /// Overrides for the default `1/(N_aug+1)` weights.
    pub gamma_t: Option<f64>,
    pub gamma_aug: Option<f64>,
    /// Inversion settings per mode. Their `seed` is replaced by one derived
    /// from the master seed.
    pub gmi: InversionConfig,
    pub kedmi: InversionConfig,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            modes: AttackMode::ALL.to_vec(),
            variants: Variant::ALL.to_vec(),
            candidates_per_class: 5,
            lambda_reg: 1.0,
            preg_mode: PregMode::Sampled,
            preg_count: None,
            gamma_t: None,
            gamma_aug: None,
            gmi: InversionConfig::default(),
            kedmi: InversionConfig {
                mc_samples: 4,
                ..InversionConfig::default()
            },
        }
    }
}

impl AttackSpec {
    pub fn inversion(&self, mode: AttackMode) -> &InversionConfig {
        match mode {
            AttackMode::Gmi => &self.gmi,
            AttackMode::Kedmi => &self.kedmi,
        }
    }
}

fn config_err(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Sets `path = value` inside a TOML tree, creating tables as needed. The
/// value is parsed as a TOML literal, falling back to a plain string.
fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(assignment, "override must look like a.b.c=value"))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(path, "empty key in dotted path"));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| config_err(path, format!("`{key}` is not inside a table")))?;
        node = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| config_err(path, "parent is not a table"))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies `a.b.c=value` overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Value = toml::from_str::<toml::Table>(text)
            .map(toml::Value::Table)
            .map_err(|e| config_err("<file>", e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(root).map_err(|e| {
            let field = e.path().to_string();
            config_err(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config_err("<config>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.private_classes.is_empty() || d.public_classes.is_empty() {
            return Err(config_err("data", "private and public class sets must be nonempty"));
        }
        if d.private_classes.iter().any(|c| d.public_classes.contains(c)) {
            return Err(config_err("data.public_classes", "overlaps data.private_classes"));
        }
        for (field, spec) in [("target.arch", &self.target), ("eval.arch", &self.eval)] {
            check_arch(field, &spec.arch)?;
        }
        for (i, a) in self.augment.archs.iter().enumerate() {
            check_arch(&format!("augment.archs[{i}]"), a)?;
        }
        if self.attack.candidates_per_class == 0 {
            return Err(config_err("attack.candidates_per_class", "must be >= 1"));
        }
        if !(self.attack.lambda_reg >= 0.0) {
            return Err(config_err("attack.lambda_reg", "must be >= 0"));
        }
        if self.attack.modes.is_empty() || self.attack.variants.is_empty() {
            return Err(config_err("attack", "modes and variants must be nonempty"));
        }
        if self.gan.latent_dim == 0 {
            return Err(config_err("gan.latent_dim", "must be >= 1"));
        }
        for mode in AttackMode::ALL {
            self.attack.inversion(mode).validate().map_err(|e| match e {
                Error::Config { field, reason } => config_err(format!("attack.{}.{field}", mode.name()), reason),
                other => other,
            })?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

fn check_arch(field: &str, tag: &str) -> Result<()> {
    let depth = tag.strip_prefix("Conv").and_then(|d| d.parse::<usize>().ok());
    match depth {
        Some(d) if d >= 1 => Ok(()),
        _ => Err(config_err(field, format!("unknown architecture `{tag}` (expected ConvK)"))),
    }
}
