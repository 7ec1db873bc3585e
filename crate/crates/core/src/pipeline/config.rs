//! Experiment configuration: the TOML surface, defaults, validation and
//! the hashes embedded in logs, manifests and parity checks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SplitSpec, Stratify};
use crate::error::{Error, Result};
use crate::nn::params::to_hex;
use crate::vae::{BackboneSpec, Family, InitKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub head: HeadConfig,
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceConfig>,
}

fn default_run_id() -> String {
    "run".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub family: Family,
    /// Per-stage channel widths; omitted means the family default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_widths: Option<Vec<usize>>,
    #[serde(default = "default_init")]
    pub init: InitKind,
}

fn default_init() -> InitKind {
    InitKind::Random
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            family: Family::ConvnextTinyStyle,
            stage_widths: None,
            init: InitKind::Random,
        }
    }
}

impl BackboneConfig {
    pub fn resolve(&self) -> Result<BackboneSpec> {
        let mut spec = BackboneSpec::with_family(self.family);
        if let Some(widths) = &self.stage_widths {
            if widths.is_empty() {
                return Err(Error::InvalidConfig(
                    "stage_widths must be non-empty".into(),
                ));
            }
            spec = spec.with_widths(widths.clone());
        }
        spec.init = self.init;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    #[serde(default = "d_s1_epochs")]
    pub epochs: usize,
    #[serde(default = "d_s1_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_latent")]
    pub latent_dim: usize,
}

fn d_s1_epochs() -> usize {
    300
}
fn d_s1_lr() -> f64 {
    1e-8
}
fn d_warmup() -> usize {
    100
}
fn d_batch() -> usize {
    32
}
fn d_latent() -> usize {
    256
}

impl Default for Stage1Config {
    fn default() -> Self {
        toml::from_str("").expect("stage1 defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    #[serde(default = "d_frozen")]
    pub epochs_frozen: usize,
    #[serde(default = "d_total")]
    pub epochs_total: usize,
    #[serde(default = "d_s2_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub focal: FocalConfig,
}

fn d_frozen() -> usize {
    30
}
fn d_total() -> usize {
    71
}
fn d_s2_lr() -> f64 {
    1e-5
}

impl Default for Stage2Config {
    fn default() -> Self {
        toml::from_str("").expect("stage2 defaults")
    }
}

/// Focal-loss settings. An explicit `alpha` pins the class weights;
/// omitting it derives inverse-frequency weights from the training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalConfig {
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
}

fn d_gamma() -> f64 {
    2.0
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: None,
        }
    }
}

/// Head shape knobs; the input width always matches the backbone's
/// feature dimension and the output width the three priority classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default = "d_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "d_dropout")]
    pub dropout_rate: f64,
}

fn d_hidden() -> usize {
    256
}
fn d_dropout() -> f64 {
    0.5
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            dropout_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest produced by the synthesizer or an external tool.
    pub manifest: PathBuf,
    #[serde(default = "d_resolution")]
    pub resolution: usize,
    #[serde(default = "d_fraction")]
    pub train_fraction: f64,
    #[serde(default = "d_data_seed")]
    pub seed: u64,
    #[serde(default = "d_stratify")]
    pub stratify_by: Stratify,
    #[serde(default = "d_true")]
    pub dermatoscopic_only: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_per_patient: Option<usize>,
    /// Optional TOML file extending the priority map (ISIC vocabulary).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority_map: Option<PathBuf>,
}

fn d_resolution() -> usize {
    64
}
fn d_fraction() -> f64 {
    0.8
}
fn d_data_seed() -> u64 {
    7
}
fn d_stratify() -> Stratify {
    Stratify::Priority
}
fn d_true() -> bool {
    true
}

impl DataConfig {
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.train_fraction,
            seed: self.seed,
            stratify_by: self.stratify_by,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    VaeCheckpoint,
    ExternalPretrained,
}

/// Where the stage-2 backbone weights come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub kind: SourceKind,
    pub path: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s)
            .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.resolve()?;
        if self.stage1.epochs == 0 {
            return Err(Error::InvalidConfig(
                "stage1.epochs must be positive".into(),
            ));
        }
        if self.stage1.learning_rate <= 0.0 || self.stage2.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(
                "learning rates must be positive".into(),
            ));
        }
        if self.stage1.warmup_epochs == 0 {
            return Err(Error::InvalidConfig(
                "stage1.warmup_epochs must be at least 1".into(),
            ));
        }
        if self.stage1.batch_size == 0 || self.stage2.batch_size == 0 {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        if self.stage1.latent_dim == 0 {
            return Err(Error::InvalidConfig(
                "stage1.latent_dim must be positive".into(),
            ));
        }
        if self.stage2.epochs_frozen >= self.stage2.epochs_total {
            return Err(Error::InvalidConfig(format!(
                "epochs_frozen {} must be less than epochs_total {}",
                self.stage2.epochs_frozen, self.stage2.epochs_total
            )));
        }
        if !(0.0 < self.data.train_fraction && self.data.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "data.train_fraction must lie strictly between 0 and 1".into(),
            ));
        }
        if self.head.hidden_dim == 0 {
            return Err(Error::InvalidConfig(
                "head.hidden_dim must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.head.dropout_rate) {
            return Err(Error::InvalidConfig(
                "head.dropout_rate must lie in [0,1)".into(),
            ));
        }
        if self.stage2.focal.gamma < 0.0 || !self.stage2.focal.gamma.is_finite() {
            return Err(Error::InvalidConfig(
                "focal gamma must be nonnegative".into(),
            ));
        }
        if let Some(alpha) = &self.stage2.focal.alpha {
            if alpha.len() != 3 {
                return Err(Error::InvalidConfig(
                    "focal alpha must list one weight per priority class".into(),
                ));
            }
            if alpha.iter().any(|a| !a.is_finite() || *a <= 0.0) {
                return Err(Error::InvalidConfig(
                    "focal alpha entries must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Digest of the fully resolved config (defaults applied), embedded in
    /// logs and checkpoint manifests.
    pub fn config_hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        to_hex(&Sha256::digest(canon.as_bytes()))
    }

    /// Digest of everything stage 2 depends on: hyperparameters, head and
    /// backbone structure, and the data pipeline. The weight source and
    /// stage-1 settings are deliberately excluded so the two compare arms
    /// can differ only there.
    pub fn stage2_parity_hash(&self) -> Result<String> {
        let spec = self.backbone.resolve()?;
        #[derive(Serialize)]
        struct ParityView<'a> {
            stage2: &'a Stage2Config,
            head: &'a HeadConfig,
            family: Family,
            stage_widths: &'a [usize],
            feature_dim: usize,
            data: &'a DataConfig,
        }
        let view = ParityView {
            stage2: &self.stage2,
            head: &self.head,
            family: spec.family,
            stage_widths: &spec.stage_widths,
            feature_dim: spec.feature_dim,
            data: &self.data,
        };
        let canon = serde_json::to_string(&view).expect("parity view serializes");
        Ok(to_hex(&Sha256::digest(canon.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(extra: &str) -> String {
        format!("[data]\nmanifest = \"data/manifest.csv\"\n{extra}")
    }

    #[test]
    fn defaults_match_reported_training_setup() {
        let cfg = ExperimentConfig::from_toml_str(&minimal("")).unwrap();
        assert_eq!(cfg.stage1.epochs, 300);
        assert_eq!(cfg.stage1.learning_rate, 1e-8);
        assert_eq!(cfg.stage1.warmup_epochs, 100);
        assert_eq!(cfg.stage1.latent_dim, 256);
        assert_eq!(cfg.stage2.epochs_frozen, 30);
        assert_eq!(cfg.stage2.epochs_total, 71);
        assert_eq!(cfg.stage2.learning_rate, 1e-5);
        assert_eq!(cfg.stage2.focal.gamma, 2.0);
        assert_eq!(cfg.head.hidden_dim, 256);
        assert_eq!(cfg.head.dropout_rate, 0.5);
        assert_eq!(cfg.backbone.family, Family::ConvnextTinyStyle);
        let spec = cfg.backbone.resolve().unwrap();
        assert_eq!(spec.feature_dim, 768);
        // default resolution must satisfy the default backbone's /32
        // downsampling chain
        assert_eq!(cfg.data.resolution, 64);
    }

    #[test]
    fn rejects_bad_epoch_ordering_and_rates() {
        let bad = minimal("[stage2]\nepochs_frozen = 71\nepochs_total = 71\n");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
        let bad = minimal("[stage1]\nlearning_rate = 0.0\n");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
        let bad = minimal("[stage2.focal]\nalpha = [1.0, 1.0]\n");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
        let bad = minimal("[head]\ndropout_rate = 1.0\n");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = minimal("[stage1]\nlearning_rat = 1e-3\n");
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::from_toml_str(&minimal("")).unwrap();
        let b = ExperimentConfig::from_toml_str(&minimal("")).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        let c = ExperimentConfig::from_toml_str(&minimal("[stage2]\nseed = 9\n")).unwrap();
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn parity_hash_ignores_source_and_stage1_only() {
        let base = minimal("[backbone]\nfamily = \"toy_cnn\"\n");
        let a = ExperimentConfig::from_toml_str(&format!(
            "{base}[source]\nkind = \"vae_checkpoint\"\npath = \"runs/a\"\n[stage1]\nseed = 1\n"
        ))
        .unwrap();
        let b = ExperimentConfig::from_toml_str(&format!(
            "{base}[source]\nkind = \"external_pretrained\"\npath = \"runs/b\"\n[stage1]\nseed = 2\n"
        ))
        .unwrap();
        assert_eq!(
            a.stage2_parity_hash().unwrap(),
            b.stage2_parity_hash().unwrap()
        );
        assert_ne!(a.config_hash(), b.config_hash());

        let c = ExperimentConfig::from_toml_str(&format!("{base}[stage2]\nlearning_rate = 2e-5\n"))
            .unwrap();
        assert_ne!(
            a.stage2_parity_hash().unwrap(),
            c.stage2_parity_hash().unwrap()
        );
        let d = ExperimentConfig::from_toml_str(&format!("{base}[stage2]\nseed = 3\n")).unwrap();
        assert_ne!(
            a.stage2_parity_hash().unwrap(),
            d.stage2_parity_hash().unwrap()
        );
    }

    #[test]
    fn backbone_widths_override_and_validate() {
        let cfg = ExperimentConfig::from_toml_str(&minimal(
            "[backbone]\nfamily = \"toy_cnn\"\nstage_widths = [4, 8]\n",
        ))
        .unwrap();
        let spec = cfg.backbone.resolve().unwrap();
        assert_eq!(spec.stage_widths, [4, 8]);
        assert_eq!(spec.feature_dim, 8);

        let bad = minimal("[backbone]\nfamily = \"convnext_tiny_style\"\nstage_widths = [4, 8]\n");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }
}
