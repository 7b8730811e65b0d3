//! On-disk dataset layout:
//!
//! ```text
//! dataset.json     manifest (task, seed, config, vocabulary, content hash)
//! samples.jsonl    one record per train sample, query and gallery image
//! features.f64     pedestrian only: little-endian f64 rows
//! features.json    pedestrian only: {dims, count, sha256}
//! images/*.ppm     vehicle only: binary P6 rasters
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    AttributeSet, Dataset, DatasetMeta, DatasetSplit, PedestrianDataset, PedestrianImage, PedestrianSample, Tag, Task,
    TestQuery, VehicleDataset, VehicleImage, VehicleSample, VocabularyConfig,
};
use crate::augment::{Raster, Rgb};
use crate::error::{Error, Result};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
const FEATURES_FILE: &str = "features.f64";
const FEATURES_MANIFEST: &str = "features.json";
const IMAGE_DIR: &str = "images";
const FORMAT: &str = "xmodal-dataset/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    task: Task,
    seed: u64,
    config: serde_json::Value,
    vocabulary: VocabularyConfig,
    tokens: Vec<String>,
    train: usize,
    queries: usize,
    gallery: usize,
    /// sha256 over samples.jsonl followed by every referenced payload file.
    content_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureManifest {
    dims: usize,
    count: usize,
    sha256: String,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ImageRef {
    FeaturesRow(usize),
    Ppm(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    split: Split,
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_ids: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_attributes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption_attributes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<Tag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    true_body_color: Option<Rgb>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_image: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    strict_subset: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    confusable_color: bool,
}

impl Record {
    fn bare(split: Split, id: &str) -> Self {
        Record {
            split,
            id: id.to_string(),
            caption: None,
            token_ids: None,
            image_attributes: None,
            caption_attributes: None,
            tag: None,
            true_body_color: None,
            image: None,
            ground_truth: None,
            source_image: None,
            strict_subset: false,
            confusable_color: false,
        }
    }

    fn query(q: &TestQuery, meta: &DatasetMeta) -> Self {
        let mut r = Record::bare(Split::Query, &q.id);
        r.caption = Some(meta.tokens.decode(&q.caption_tokens).join(" "));
        r.token_ids = Some(q.caption_tokens.clone());
        r.caption_attributes = q.caption_attributes.map(AttributeSet::to_hex);
        r.tag = q.tag;
        r.ground_truth = Some(q.ground_truth.clone());
        r.source_image = Some(q.source_image.clone());
        r.strict_subset = q.strict_subset;
        r.confusable_color = q.confusable_color;
        r
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn f64_bytes(rows: &[&[f64]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(rows.iter().map(|r| r.len() * 8).sum());
    for r in rows {
        for v in *r {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn jsonl(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

struct Encoded {
    files: Vec<(String, Vec<u8>)>,
    content_hash: String,
}

/// Content hash [`save_dataset`] would record, without touching the disk.
pub fn dataset_hash(dataset: &Dataset) -> Result<String> {
    Ok(encode(dataset)?.content_hash)
}

/// Writes `dataset` under `dir`, creating it if needed.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<String> {
    let encoded = encode(dataset)?;
    fs::create_dir_all(dir.join(IMAGE_DIR)).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in &encoded.files {
        write(&dir.join(name), bytes)?;
    }
    Ok(encoded.content_hash)
}

fn encode(dataset: &Dataset) -> Result<Encoded> {
    let mut files = Vec::new();
    let meta = dataset.meta();
    let mut records = Vec::new();
    let mut payloads: Vec<(String, Vec<u8>)> = Vec::new();
    let counts;
    match dataset {
        Dataset::Pedestrian(d) => {
            let s = &d.split;
            let mut rows: Vec<&[f64]> = Vec::new();
            for t in &s.train {
                let mut r = Record::bare(Split::Train, &t.id);
                r.caption = Some(meta.tokens.decode(&t.caption_tokens).join(" "));
                r.token_ids = Some(t.caption_tokens.clone());
                r.image_attributes = Some(t.image_attributes.to_hex());
                r.caption_attributes = Some(t.caption_attributes.to_hex());
                r.image = Some(ImageRef::FeaturesRow(rows.len()));
                rows.push(&t.image_features);
                records.push(r);
            }
            records.extend(s.test_queries.iter().map(|q| Record::query(q, meta)));
            for g in &s.test_gallery {
                let mut r = Record::bare(Split::Gallery, &g.id);
                r.image_attributes = Some(g.attributes.to_hex());
                r.image = Some(ImageRef::FeaturesRow(rows.len()));
                rows.push(&g.features);
                records.push(r);
            }
            let dims = rows.first().map_or(0, |r| r.len());
            let bytes = f64_bytes(&rows);
            let fm = FeatureManifest {
                dims,
                count: rows.len(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            };
            files.push((FEATURES_MANIFEST.to_string(), serde_json::to_vec_pretty(&fm)?));
            payloads.push((FEATURES_FILE.to_string(), bytes));
            counts = (s.train.len(), s.test_queries.len(), s.test_gallery.len());
        }
        Dataset::Vehicle(d) => {
            let s = &d.split;
            for t in &s.train {
                let file = format!("{IMAGE_DIR}/{}.ppm", t.id);
                let mut r = Record::bare(Split::Train, &t.id);
                r.caption = Some(meta.tokens.decode(&t.caption_tokens).join(" "));
                r.token_ids = Some(t.caption_tokens.clone());
                r.tag = Some(t.tag);
                r.true_body_color = Some(t.true_body_color);
                r.image = Some(ImageRef::Ppm(file.clone()));
                payloads.push((file, t.image.to_ppm()));
                records.push(r);
            }
            records.extend(s.test_queries.iter().map(|q| Record::query(q, meta)));
            for g in &s.test_gallery {
                let file = format!("{IMAGE_DIR}/{}.ppm", g.id);
                let mut r = Record::bare(Split::Gallery, &g.id);
                r.tag = Some(g.tag);
                r.true_body_color = Some(g.true_body_color);
                r.image = Some(ImageRef::Ppm(file.clone()));
                payloads.push((file, g.image.to_ppm()));
                records.push(r);
            }
            counts = (s.train.len(), s.test_queries.len(), s.test_gallery.len());
        }
    }
    let samples = jsonl(&records)?;
    let mut hasher = Sha256::new();
    hasher.update(&samples);
    for (_, bytes) in &payloads {
        hasher.update(bytes);
    }
    let content_hash = hex::encode(hasher.finalize());
    let manifest = Manifest {
        format: FORMAT.into(),
        task: meta.task,
        seed: meta.seed,
        config: meta.config.clone(),
        vocabulary: meta.vocabulary.clone(),
        tokens: meta.tokens.tokens().to_vec(),
        train: counts.0,
        queries: counts.1,
        gallery: counts.2,
        content_hash: content_hash.clone(),
    };
    files.extend(payloads);
    files.push((SAMPLES_FILE.to_string(), samples));
    files.push((DATASET_MANIFEST.to_string(), serde_json::to_vec_pretty(&manifest)?));
    Ok(Encoded { files, content_hash })
}

/// Reads a dataset written by [`save_dataset`], verifying every hash. Returns
/// the dataset and its content hash.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, String)> {
    let manifest: Manifest = serde_json::from_slice(&read(&dir.join(DATASET_MANIFEST))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Malformed(format!(
            "unsupported dataset format {}",
            manifest.format
        )));
    }
    let tokens = super::TokenVocabulary::from_tokens(manifest.tokens.clone());
    if tokens != manifest.vocabulary.tokens() {
        return Err(Error::Malformed("token list disagrees with vocabulary".into()));
    }
    let samples = read(&dir.join(SAMPLES_FILE))?;
    let mut records = Vec::new();
    for (n, line) in samples.split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let r: Record = serde_json::from_slice(line)
            .map_err(|e| Error::Malformed(format!("{SAMPLES_FILE} line {}: {e}", n + 1)))?;
        records.push(r);
    }
    let mut hasher = Sha256::new();
    hasher.update(&samples);
    let meta = DatasetMeta {
        task: manifest.task,
        seed: manifest.seed,
        config: manifest.config.clone(),
        vocabulary: manifest.vocabulary.clone(),
        tokens,
    };
    let missing = |id: &str, what: &str| Error::Malformed(format!("record {id} lacks {what}"));
    let attrs = |id: &str, v: &Option<String>, what: &str| -> Result<AttributeSet> {
        AttributeSet::from_hex(v.as_deref().ok_or_else(|| missing(id, what))?)
    };

    let mut queries = Vec::new();
    for r in records.iter().filter(|r| r.split == Split::Query) {
        queries.push(TestQuery {
            id: r.id.clone(),
            caption_tokens: r.token_ids.clone().ok_or_else(|| missing(&r.id, "token_ids"))?,
            ground_truth: r.ground_truth.clone().ok_or_else(|| missing(&r.id, "ground_truth"))?,
            source_image: r.source_image.clone().ok_or_else(|| missing(&r.id, "source_image"))?,
            strict_subset: r.strict_subset,
            confusable_color: r.confusable_color,
            caption_attributes: r
                .caption_attributes
                .as_deref()
                .map(AttributeSet::from_hex)
                .transpose()?,
            tag: r.tag,
        });
    }

    let dataset = match manifest.task {
        Task::Pedestrian => {
            let fm: FeatureManifest = serde_json::from_slice(&read(&dir.join(FEATURES_MANIFEST))?)?;
            let bytes = read(&dir.join(FEATURES_FILE))?;
            if hex::encode(Sha256::digest(&bytes)) != fm.sha256 || bytes.len() != fm.dims * fm.count * 8 {
                return Err(Error::Malformed("features file fails its manifest".into()));
            }
            hasher.update(&bytes);
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let row = |r: &Record| -> Result<Vec<f64>> {
                match r.image {
                    Some(ImageRef::FeaturesRow(k)) if k < fm.count => {
                        Ok(values[k * fm.dims..(k + 1) * fm.dims].to_vec())
                    }
                    _ => Err(missing(&r.id, "a valid features row")),
                }
            };
            let mut train = Vec::new();
            let mut gallery = Vec::new();
            for r in &records {
                match r.split {
                    Split::Train => train.push(PedestrianSample {
                        id: r.id.clone(),
                        image_features: row(r)?,
                        caption_tokens: r.token_ids.clone().ok_or_else(|| missing(&r.id, "token_ids"))?,
                        image_attributes: attrs(&r.id, &r.image_attributes, "image_attributes")?,
                        caption_attributes: attrs(&r.id, &r.caption_attributes, "caption_attributes")?,
                    }),
                    Split::Gallery => gallery.push(PedestrianImage {
                        id: r.id.clone(),
                        features: row(r)?,
                        attributes: attrs(&r.id, &r.image_attributes, "image_attributes")?,
                    }),
                    Split::Query => {}
                }
            }
            Dataset::Pedestrian(PedestrianDataset {
                meta,
                split: DatasetSplit {
                    train,
                    test_queries: queries,
                    test_gallery: gallery,
                },
            })
        }
        Task::Vehicle => {
            let mut raster = |r: &Record| -> Result<Raster> {
                match &r.image {
                    Some(ImageRef::Ppm(file)) => {
                        let bytes = read(&dir.join(file))?;
                        hasher.update(&bytes);
                        Raster::from_ppm(&bytes)
                    }
                    _ => Err(missing(&r.id, "a ppm reference")),
                }
            };
            let mut train = Vec::new();
            let mut gallery = Vec::new();
            for r in &records {
                match r.split {
                    Split::Train => train.push(VehicleSample {
                        id: r.id.clone(),
                        image: raster(r)?,
                        caption_tokens: r.token_ids.clone().ok_or_else(|| missing(&r.id, "token_ids"))?,
                        tag: r.tag.ok_or_else(|| missing(&r.id, "tag"))?,
                        true_body_color: r.true_body_color.ok_or_else(|| missing(&r.id, "true_body_color"))?,
                    }),
                    Split::Gallery => gallery.push(VehicleImage {
                        id: r.id.clone(),
                        image: raster(r)?,
                        tag: r.tag.ok_or_else(|| missing(&r.id, "tag"))?,
                        true_body_color: r.true_body_color.ok_or_else(|| missing(&r.id, "true_body_color"))?,
                    }),
                    Split::Query => {}
                }
            }
            Dataset::Vehicle(VehicleDataset {
                meta,
                split: DatasetSplit {
                    train,
                    test_queries: queries,
                    test_gallery: gallery,
                },
            })
        }
    };
    let hash = hex::encode(hasher.finalize());
    if hash != manifest.content_hash {
        return Err(Error::Malformed("dataset content hash mismatch".into()));
    }
    Ok((dataset, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, Task};

    fn round_trip(task: Task) {
        let cfg = serde_json::json!({"train_size": 16, "query_count": 8});
        let d = generate(task, Some(cfg), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let h = save_dataset(&d, dir.path()).unwrap();
        let (back, h2) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
        assert_eq!(h, h2);
    }

    #[test]
    fn pedestrian_round_trip() {
        round_trip(Task::Pedestrian);
    }

    #[test]
    fn vehicle_round_trip() {
        round_trip(Task::Vehicle);
    }

    #[test]
    fn tampered_samples_detected() {
        let d = generate(
            Task::Pedestrian,
            Some(serde_json::json!({"train_size": 8, "query_count": 8})),
            1,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let p = dir.path().join(SAMPLES_FILE);
        let mut s = std::fs::read_to_string(&p).unwrap();
        s = s.replacen("glasses", "hat", 1);
        std::fs::write(&p, s).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
