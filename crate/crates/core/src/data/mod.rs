//! Multi-source lesion records: priority mapping, modality filtering,
//! patient dedup, deterministic splits, and desk-scale synthesis.

mod manifest;
mod synth;

pub use manifest::{read_manifest, write_manifest};
pub use synth::synth_dataset;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Triage priority. P1 is the most urgent tier.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
pub enum Priority {
    P1,
    P2,
    P3,
}

impl Priority {
    pub fn index(self) -> usize {
        match self {
            Priority::P1 => 0,
            Priority::P2 => 1,
            Priority::P3 => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i % 3 {
            0 => Priority::P1,
            1 => Priority::P2,
            _ => Priority::P3,
        }
    }

    pub const ALL: [Priority; 3] = [Priority::P1, Priority::P2, Priority::P3];
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Priority::P1 => write!(f, "P1"),
            Priority::P2 => write!(f, "P2"),
            Priority::P3 => write!(f, "P3"),
        }
    }
}

impl FromStr for Priority {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P1" => Ok(Priority::P1),
            "P2" => Ok(Priority::P2),
            "P3" => Ok(Priority::P3),
            other => Err(Error::InvalidConfig(format!(
                "priority must be P1|P2|P3, got {other:?}"
            ))),
        }
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum SourceId {
    Hospital,
    Isic,
    Synthetic,
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceId::Hospital => write!(f, "hospital"),
            SourceId::Isic => write!(f, "isic"),
            SourceId::Synthetic => write!(f, "synthetic"),
        }
    }
}

impl FromStr for SourceId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hospital" => Ok(SourceId::Hospital),
            "isic" => Ok(SourceId::Isic),
            "synthetic" => Ok(SourceId::Synthetic),
            other => Err(Error::InvalidConfig(format!(
                "source must be hospital|isic|synthetic, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Dermatoscopic,
    Clinical,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Dermatoscopic => write!(f, "dermatoscopic"),
            Modality::Clinical => write!(f, "clinical"),
        }
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dermatoscopic" => Ok(Modality::Dermatoscopic),
            "clinical" => Ok(Modality::Clinical),
            other => Err(Error::InvalidConfig(format!(
                "modality must be dermatoscopic|clinical, got {other:?}"
            ))),
        }
    }
}

/// Image payload: either a file on disk or in-memory pixels `[3, R, R]`
/// with values in [0,1]. Pixels are shared, so records clone cheaply.
#[derive(Debug, Clone)]
pub enum ImageData {
    File(PathBuf),
    Pixels(Arc<Array3<f64>>),
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub image: ImageData,
    pub source_id: SourceId,
    pub original_label: String,
    pub priority: Priority,
    pub patient_id: String,
    pub modality: Modality,
}

impl ImageRecord {
    /// Loads the pixel tensor `[3, R, R]`, checking the resolution and
    /// the [0,1] value range.
    pub fn pixels(&self, resolution: usize) -> Result<Array3<f64>> {
        let px = match &self.image {
            ImageData::Pixels(p) => p.as_ref().clone(),
            ImageData::File(path) => manifest::load_png(path)?,
        };
        if px.shape() != [3, resolution, resolution] {
            return Err(Error::ShapeMismatch {
                context: "image pixels".into(),
                expected: format!("[3, {resolution}, {resolution}]"),
                actual: format!("{:?}", px.shape()),
            });
        }
        if px.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::NonFinite("image values outside [0,1]".into()));
        }
        Ok(px)
    }
}

/// The thirteen hospital labels and their triage tiers.
const HOSPITAL_PRIORITIES: [(&str, Priority); 13] = [
    ("Melanoma", Priority::P1),
    ("Squamous Cell Carcinoma", Priority::P1),
    ("Basal Cell Carcinoma", Priority::P1),
    ("Superficial Basal Cell Carcinoma", Priority::P1),
    ("Actinic Keratosis", Priority::P2),
    ("Common Acquired Melanocytic Nevus", Priority::P2),
    ("Atypical Melanocytic Nevus", Priority::P2),
    ("Acral Melanocytic Nevus", Priority::P2),
    ("Spitz Reed Nevus", Priority::P2),
    ("Irritated Melanocytic Nevus", Priority::P2),
    ("Acquired Angioma", Priority::P3),
    ("Dermatofibroma", Priority::P3),
    ("Other Skin Lesions", Priority::P3),
];

/// Label-to-priority mapping per source. Hospital labels are built in;
/// anything outside the named vocabulary falls into the P3 catch-all
/// ("Other Skin Lesions"). ISIC labels must be supplied via config and
/// unknown ones are an error. Synthetic labels follow the `class-N`
/// convention and map round-robin over the three tiers.
#[derive(Debug, Clone, Default)]
pub struct PriorityMap {
    hospital_extra: BTreeMap<String, Priority>,
    isic: BTreeMap<String, Priority>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize, Default)]
struct PriorityMapFile {
    #[serde(default)]
    hospital: BTreeMap<String, String>,
    #[serde(default)]
    isic: BTreeMap<String, String>,
}

impl PriorityMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hospital_vocabulary() -> &'static [(&'static str, Priority); 13] {
        &HOSPITAL_PRIORITIES
    }

    pub fn with_isic(entries: impl IntoIterator<Item = (String, Priority)>) -> Self {
        Self {
            hospital_extra: BTreeMap::new(),
            isic: entries.into_iter().collect(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: PriorityMapFile =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("priority map: {e}")))?;
        let parse = |m: BTreeMap<String, String>| -> Result<BTreeMap<String, Priority>> {
            m.into_iter()
                .map(|(k, v)| Ok((k, v.parse::<Priority>()?)))
                .collect()
        };
        Ok(Self {
            hospital_extra: parse(file.hospital)?,
            isic: parse(file.isic)?,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        let file = PriorityMapFile {
            hospital: self
                .hospital_extra
                .iter()
                .map(|(k, v)| (k.clone(), v.to_string()))
                .collect(),
            isic: self
                .isic
                .iter()
                .map(|(k, v)| (k.clone(), v.to_string()))
                .collect(),
        };
        toml::to_string(&file).expect("priority map serializes")
    }

    pub fn map_to_priority(&self, label: &str, source: SourceId) -> Result<Priority> {
        match source {
            SourceId::Hospital => {
                if let Some((_, p)) = HOSPITAL_PRIORITIES.iter().find(|(l, _)| *l == label) {
                    return Ok(*p);
                }
                if let Some(p) = self.hospital_extra.get(label) {
                    return Ok(*p);
                }
                // unlisted hospital diagnoses join "Other Skin Lesions"
                Ok(Priority::P3)
            }
            SourceId::Isic => self.isic.get(label).copied().ok_or(Error::UnknownLabel {
                label: label.to_string(),
                origin: source.to_string(),
            }),
            SourceId::Synthetic => {
                let class: Option<usize> =
                    label.strip_prefix("class-").and_then(|n| n.parse().ok());
                match class {
                    Some(k) => Ok(Priority::from_index(k)),
                    None => Err(Error::UnknownLabel {
                        label: label.to_string(),
                        origin: source.to_string(),
                    }),
                }
            }
        }
    }
}

/// Keeps only dermatoscopic records, preserving order.
pub fn filter_modality(records: &[ImageRecord]) -> Vec<ImageRecord> {
    records
        .iter()
        .filter(|r| r.modality == Modality::Dermatoscopic)
        .cloned()
        .collect()
}

/// Caps each patient at `max_per_patient` records, keeping the earliest
/// in input order.
pub fn dedupe_by_patient(records: &[ImageRecord], max_per_patient: usize) -> Vec<ImageRecord> {
    assert!(max_per_patient >= 1);
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    records
        .iter()
        .filter(|r| {
            let count = seen.entry(r.patient_id.as_str()).or_insert(0);
            *count += 1;
            *count <= max_per_patient
        })
        .cloned()
        .collect()
}

pub fn merge_sources(a: &[ImageRecord], b: &[ImageRecord]) -> Vec<ImageRecord> {
    let mut out = a.to_vec();
    out.extend_from_slice(b);
    out
}

/// Drops records rejected by the quality predicate. The default predicate
/// (`keep_all`) passes everything through.
pub fn filter_quality(
    records: &[ImageRecord],
    keep: impl Fn(&ImageRecord) -> bool,
) -> Vec<ImageRecord> {
    records.iter().filter(|r| keep(r)).cloned().collect()
}

pub fn keep_all(_: &ImageRecord) -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratify {
    Priority,
    None,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratify_by: Stratify,
}

/// Deterministic train/val split. With `Stratify::Priority`, per-class
/// train counts are `round(n_class * fraction)`, which keeps every class
/// within one sample of the requested fraction.
pub fn split(
    records: &[ImageRecord],
    spec: &SplitSpec,
) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must be in (0,1), got {}",
            spec.train_fraction
        )));
    }
    if records.is_empty() {
        return Err(Error::DegenerateSplit("no records to split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let groups: Vec<Vec<usize>> = match spec.stratify_by {
        Stratify::None => vec![(0..records.len()).collect()],
        Stratify::Priority => Priority::ALL
            .iter()
            .map(|p| {
                (0..records.len())
                    .filter(|&i| records[i].priority == *p)
                    .collect()
            })
            .collect(),
    };

    let mut train = Vec::new();
    let mut val = Vec::new();
    for mut idx in groups {
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * spec.train_fraction).round() as usize;
        for (pos, i) in idx.into_iter().enumerate() {
            if pos < k {
                train.push(records[i].clone());
            } else {
                val.push(records[i].clone());
            }
        }
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::DegenerateSplit(format!(
            "split of {} records at fraction {} left one side empty",
            records.len(),
            spec.train_fraction
        )));
    }
    Ok((train, val))
}
