//! Seeded synthetic pedestrian and vehicle datasets.
//!
//! Pedestrian images are attribute-bearing feature vectors and captions name
//! a nonempty subset of the image's attributes. Vehicle images are 32×32
//! rasters of a colored body on a fixed background texture, captioned with
//! their `(color, type)` tag.
//!
//! Generation is a pure function of `(config, seed)`: each sample draws from
//! its own child stream keyed by `(seed, split, index)`.

mod io;
mod pedestrian;
mod vehicle;
mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{Palette, Raster, Rgb};
use crate::error::{Error, Result};

pub use io::{dataset_hash, load_dataset, save_dataset, DATASET_MANIFEST, SAMPLES_FILE};
pub use pedestrian::{generate_pedestrian_dataset, PedestrianConfig};
pub use vehicle::{
    background_texture, caption_from_tag, generate_vehicle_dataset, render_vehicle, BodyLayout, VehicleConfig,
    BACKGROUND_THRESHOLD,
};
pub use vocab::{
    caption_from_attributes, tokenize, Attribute, AttributeSet, AttributeVocabulary, TokenVocabulary, MASK_TOKEN,
    MAX_ATTRIBUTES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "ped")]
    Pedestrian,
    #[serde(rename = "veh")]
    Vehicle,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Pedestrian => "ped",
            Task::Vehicle => "veh",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ped" | "pedestrian" => Ok(Task::Pedestrian),
            "veh" | "vehicle" => Ok(Task::Vehicle),
            other => Err(Error::ConfigInvalid(format!("unknown task {other:?}"))),
        }
    }
}

/// Vocabulary pieces both branches agree on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabularyConfig {
    pub attributes: AttributeVocabulary,
    pub palette: Palette,
    pub vehicle_types: Vec<String>,
}

impl Default for VocabularyConfig {
    fn default() -> Self {
        VocabularyConfig {
            attributes: AttributeVocabulary::default(),
            palette: Palette::default(),
            vehicle_types: ["audi", "bmw", "truck", "van", "suv", "sedan"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl VocabularyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vehicle_types.len() < 2 {
            return Err(Error::ConfigInvalid("need at least 2 vehicle types".into()));
        }
        for (i, t) in self.vehicle_types.iter().enumerate() {
            if t.split_whitespace().count() != 1 || self.vehicle_types[i + 1..].contains(t) {
                return Err(Error::ConfigInvalid(format!("bad vehicle type {t:?}")));
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> TokenVocabulary {
        TokenVocabulary::build(&self.attributes, &self.palette, &self.vehicle_types)
    }
}

/// Vehicle category label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Tag {
    pub color_id: usize,
    pub type_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PedestrianSample {
    pub id: String,
    pub image_features: Vec<f64>,
    pub caption_tokens: Vec<usize>,
    pub image_attributes: AttributeSet,
    pub caption_attributes: AttributeSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PedestrianImage {
    pub id: String,
    pub features: Vec<f64>,
    pub attributes: AttributeSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleSample {
    pub id: String,
    pub image: Raster,
    pub caption_tokens: Vec<usize>,
    pub tag: Tag,
    pub true_body_color: Rgb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleImage {
    pub id: String,
    pub image: Raster,
    pub tag: Tag,
    pub true_body_color: Rgb,
}

/// A test caption and the gallery ids that answer it.
#[derive(Debug, Clone, PartialEq)]
pub struct TestQuery {
    pub id: String,
    pub caption_tokens: Vec<usize>,
    pub ground_truth: Vec<String>,
    /// Gallery id of the image this caption was written for.
    pub source_image: String,
    /// Pedestrian caption naming a strict subset of its image's attributes.
    pub strict_subset: bool,
    /// Vehicle caption whose color is white, silver or gray.
    pub confusable_color: bool,
    pub caption_attributes: Option<AttributeSet>,
    pub tag: Option<Tag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T, G> {
    pub train: Vec<T>,
    pub test_queries: Vec<TestQuery>,
    pub test_gallery: Vec<G>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub task: Task,
    pub seed: u64,
    /// The generating config, verbatim.
    pub config: serde_json::Value,
    pub vocabulary: VocabularyConfig,
    pub tokens: TokenVocabulary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PedestrianDataset {
    pub meta: DatasetMeta,
    pub split: DatasetSplit<PedestrianSample, PedestrianImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleDataset {
    pub meta: DatasetMeta,
    pub split: DatasetSplit<VehicleSample, VehicleImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Pedestrian(PedestrianDataset),
    Vehicle(VehicleDataset),
}

impl Dataset {
    pub fn task(&self) -> Task {
        self.meta().task
    }

    pub fn meta(&self) -> &DatasetMeta {
        match self {
            Dataset::Pedestrian(d) => &d.meta,
            Dataset::Vehicle(d) => &d.meta,
        }
    }

    pub fn queries(&self) -> &[TestQuery] {
        match self {
            Dataset::Pedestrian(d) => &d.split.test_queries,
            Dataset::Vehicle(d) => &d.split.test_queries,
        }
    }

    pub fn as_pedestrian(&self) -> Option<&PedestrianDataset> {
        match self {
            Dataset::Pedestrian(d) => Some(d),
            Dataset::Vehicle(_) => None,
        }
    }

    pub fn as_vehicle(&self) -> Option<&VehicleDataset> {
        match self {
            Dataset::Vehicle(d) => Some(d),
            Dataset::Pedestrian(_) => None,
        }
    }
}

/// Generates the dataset for `task` from a JSON config (defaults when `None`).
pub fn generate(task: Task, config: Option<serde_json::Value>, seed: u64) -> Result<Dataset> {
    let cfg = config.unwrap_or_else(|| serde_json::json!({}));
    match task {
        Task::Pedestrian => {
            let c: PedestrianConfig = serde_json::from_value(cfg).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
            Ok(Dataset::Pedestrian(generate_pedestrian_dataset(&c, seed)?))
        }
        Task::Vehicle => {
            let c: VehicleConfig = serde_json::from_value(cfg).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
            Ok(Dataset::Vehicle(generate_vehicle_dataset(&c, seed)?))
        }
    }
}
