use serde::{Deserialize, Serialize};

use super::{
    caption_from_attributes, AttributeSet, DatasetMeta, DatasetSplit, PedestrianDataset, PedestrianImage,
    PedestrianSample, Task, TestQuery, VocabularyConfig,
};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PedestrianConfig {
    pub train_size: usize,
    pub query_count: usize,
    pub feature_dim: usize,
    pub min_attributes: usize,
    pub max_attributes: usize,
    /// Fraction of test queries whose caption is a strict subset of the image attributes.
    pub strict_subset_fraction: f64,
    /// Probability that a training caption is a strict subset.
    pub train_strict_subset_fraction: f64,
    /// Standard deviation of the entries of the mixing matrix.
    pub mixing_scale: f64,
    pub noise_sigma: f64,
    pub vocabulary: VocabularyConfig,
}

impl Default for PedestrianConfig {
    fn default() -> Self {
        PedestrianConfig {
            train_size: 512,
            query_count: 128,
            feature_dim: 48,
            min_attributes: 2,
            max_attributes: 5,
            strict_subset_fraction: 0.3,
            train_strict_subset_fraction: 0.3,
            mixing_scale: 0.5,
            noise_sigma: 0.25,
            vocabulary: VocabularyConfig::default(),
        }
    }
}

impl PedestrianConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        self.vocabulary.validate()?;
        let q = self.vocabulary.attributes.len();
        if self.train_size < 8 || self.query_count < 8 {
            return bad("train_size and query_count must be at least 8".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if self.min_attributes < 2 || self.min_attributes > self.max_attributes || self.max_attributes > q {
            return bad(format!(
                "need 2 <= min_attributes <= max_attributes <= {q}, got {}..={}",
                self.min_attributes, self.max_attributes
            ));
        }
        for (name, f) in [
            ("strict_subset_fraction", self.strict_subset_fraction),
            ("train_strict_subset_fraction", self.train_strict_subset_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} must be in [0, 1]"));
            }
        }
        if !(self.noise_sigma >= 0.0) || !(self.mixing_scale > 0.0) {
            return bad("noise_sigma must be >= 0 and mixing_scale > 0".into());
        }
        Ok(())
    }
}

struct Generator<'a> {
    cfg: &'a PedestrianConfig,
    mixing: Matrix,
}

impl Generator<'_> {
    fn image_attributes(&self, rng: &mut Rng) -> AttributeSet {
        let q = self.cfg.vocabulary.attributes.len();
        let n = rng.int_inclusive(self.cfg.min_attributes as i64, self.cfg.max_attributes as i64) as usize;
        AttributeSet::from_indices(rng.choose_distinct(q, n))
    }

    fn features(&self, attrs: AttributeSet, rng: &mut Rng) -> Vec<f64> {
        (0..self.cfg.feature_dim)
            .map(|r| {
                let mut v = 0.0;
                for k in attrs.iter() {
                    v += self.mixing.get(r, k);
                }
                v + self.cfg.noise_sigma * rng.normal()
            })
            .collect()
    }
}

/// Nonempty strict subset of `attrs` by independent coin flips; empty and
/// full draws are rejected and redrawn. `attrs` must have at least 2 members.
fn strict_subset(attrs: AttributeSet, rng: &mut Rng) -> AttributeSet {
    debug_assert!(attrs.len() >= 2);
    loop {
        let pick = AttributeSet::from_indices(attrs.iter().filter(|_| rng.uniform() < 0.5));
        if !pick.is_empty() && pick != attrs {
            return pick;
        }
    }
}

pub fn generate_pedestrian_dataset(cfg: &PedestrianConfig, seed: u64) -> Result<PedestrianDataset> {
    cfg.validate()?;
    let root = Rng::new(seed).child("pedestrian");
    let attrs_vocab = &cfg.vocabulary.attributes;
    let q = attrs_vocab.len();
    let tokens = cfg.vocabulary.tokens();

    let mut mix_rng = root.child("mixing");
    let mut mixing = Matrix::zeros(cfg.feature_dim, q);
    for v in mixing.data_mut() {
        *v = cfg.mixing_scale * mix_rng.normal();
    }
    let gen = Generator { cfg, mixing };

    let mut train = Vec::with_capacity(cfg.train_size);
    for i in 0..cfg.train_size {
        let mut rng = root.child_indexed("train", i as u64);
        let image_attributes = gen.image_attributes(&mut rng);
        let image_features = gen.features(image_attributes, &mut rng);
        let caption_attributes = if rng.uniform() < cfg.train_strict_subset_fraction {
            strict_subset(image_attributes, &mut rng)
        } else {
            image_attributes
        };
        let words = caption_from_attributes(caption_attributes, attrs_vocab)?;
        train.push(PedestrianSample {
            id: format!("ped-train-{i:05}"),
            image_features,
            caption_tokens: tokens.encode(&words)?,
            image_attributes,
            caption_attributes,
        });
    }

    let n_strict = (cfg.strict_subset_fraction * cfg.query_count as f64).round() as usize;
    let strict_idx = root.child("strict-queries").choose_distinct(cfg.query_count, n_strict);
    let mut gallery = Vec::with_capacity(cfg.query_count);
    let mut drafts = Vec::with_capacity(cfg.query_count);
    for k in 0..cfg.query_count {
        let mut rng = root.child_indexed("test", k as u64);
        let attributes = gen.image_attributes(&mut rng);
        let features = gen.features(attributes, &mut rng);
        let strict = strict_idx.binary_search(&k).is_ok();
        let caption_attributes = if strict {
            strict_subset(attributes, &mut rng)
        } else {
            attributes
        };
        let words = caption_from_attributes(caption_attributes, attrs_vocab)?;
        let id = format!("ped-img-{k:05}");
        drafts.push((k, tokens.encode(&words)?, caption_attributes, strict, id.clone()));
        gallery.push(PedestrianImage {
            id,
            features,
            attributes,
        });
    }

    let test_queries = drafts
        .into_iter()
        .map(|(k, caption_tokens, caption_attributes, strict, source)| {
            let want = gallery[k].attributes;
            let ground_truth = gallery
                .iter()
                .filter(|g| {
                    if strict {
                        caption_attributes.is_subset_of(g.attributes)
                    } else {
                        g.attributes == want
                    }
                })
                .map(|g| g.id.clone())
                .collect();
            TestQuery {
                id: format!("ped-q-{k:05}"),
                caption_tokens,
                ground_truth,
                source_image: source,
                strict_subset: strict,
                confusable_color: false,
                caption_attributes: Some(caption_attributes),
                tag: None,
            }
        })
        .collect();

    Ok(PedestrianDataset {
        meta: DatasetMeta {
            task: Task::Pedestrian,
            seed,
            config: serde_json::to_value(cfg)?,
            vocabulary: cfg.vocabulary.clone(),
            tokens,
        },
        split: DatasetSplit {
            train,
            test_queries,
            test_gallery: gallery,
        },
    })
}
