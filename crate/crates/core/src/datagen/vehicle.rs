use serde::{Deserialize, Serialize};

use super::{
    DatasetMeta, DatasetSplit, Tag, Task, TestQuery, TokenVocabulary, VehicleDataset, VehicleImage, VehicleSample,
    VocabularyConfig,
};
use crate::augment::{Raster, Rgb, FEATURE_IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleConfig {
    pub train_size: usize,
    pub query_count: usize,
    /// Per-channel uniform noise radius on body pixels.
    pub noise_radius: u8,
    /// Share of samples painted white, silver or gray.
    pub confusable_fraction: f64,
    /// Upper bound on the shaded (window) share of body rows; must stay below 0.5.
    pub max_shade_fraction: f64,
    pub shade_factor_min: f64,
    pub shade_factor_max: f64,
    pub vocabulary: VocabularyConfig,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        VehicleConfig {
            train_size: 512,
            query_count: 128,
            noise_radius: 12,
            confusable_fraction: 0.4,
            max_shade_fraction: 0.4,
            shade_factor_min: 0.55,
            shade_factor_max: 0.85,
            vocabulary: VocabularyConfig::default(),
        }
    }
}

impl VehicleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        self.vocabulary.validate()?;
        if self.train_size < 8 || self.query_count < 8 {
            return bad("train_size and query_count must be at least 8");
        }
        if !(0.0..=1.0).contains(&self.confusable_fraction) {
            return bad("confusable_fraction must be in [0, 1]");
        }
        if !(0.0..0.5).contains(&self.max_shade_fraction) {
            return bad("max_shade_fraction must be in [0, 0.5)");
        }
        if !(0.0 < self.shade_factor_min && self.shade_factor_min <= self.shade_factor_max) {
            return bad("need 0 < shade_factor_min <= shade_factor_max");
        }
        if self.noise_radius > 24 {
            return bad("noise_radius above 24 lets palette entries overlap");
        }
        Ok(())
    }
}

/// Foreground threshold matching [`background_texture`] and the default noise.
pub const BACKGROUND_THRESHOLD: u8 = 28;

const BACKGROUND_TONES: [Rgb; 3] = [Rgb::new(70, 80, 60), Rgb::new(50, 60, 90), Rgb::new(90, 70, 50)];

/// The fixed scene behind every vehicle: diagonal bands of three dark tones.
pub fn background_texture(width: usize, height: usize) -> Raster {
    let mut r = Raster::filled(width, height, BACKGROUND_TONES[0]);
    for y in 0..height {
        for x in 0..width {
            r.set(x, y, BACKGROUND_TONES[(x / 4 + y / 4) % 3]);
        }
    }
    r
}

/// Nominal body size (width, height) per type index, for a 32-pixel image.
const BODY_SHAPES: [(usize, usize); 6] = [(22, 14), (18, 12), (28, 22), (16, 24), (22, 20), (26, 10)];

/// Where the body sits and how it is shaded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyLayout {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    /// Top rows of the body drawn darker.
    pub shaded_rows: usize,
    pub shade_factor: f64,
}

impl BodyLayout {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.width && y >= self.y0 && y < self.y0 + self.height
    }

    fn draw(type_id: usize, cfg: &VehicleConfig, rng: &mut Rng) -> Self {
        let side = FEATURE_IMAGE_SIDE;
        let (w, h) = BODY_SHAPES[type_id % BODY_SHAPES.len()];
        let width = (w as i64 + rng.int_inclusive(-1, 1)).clamp(4, side as i64) as usize;
        let height = (h as i64 + rng.int_inclusive(-1, 1)).clamp(4, side as i64) as usize;
        let x0 = rng.below(side - width + 1);
        let y0 = rng.below(side - height + 1);
        let shaded_rows = (rng.uniform() * cfg.max_shade_fraction * height as f64).floor() as usize;
        let shade_factor = rng.uniform_range(cfg.shade_factor_min, cfg.shade_factor_max);
        BodyLayout {
            x0,
            y0,
            width,
            height,
            shaded_rows,
            shade_factor,
        }
    }
}

/// Paints a vehicle body of `color` over the background texture.
pub fn render_vehicle(color: Rgb, layout: &BodyLayout, noise_radius: u8, rng: &mut Rng) -> Raster {
    let side = FEATURE_IMAGE_SIDE;
    let mut img = background_texture(side, side);
    let r = noise_radius as i64;
    for y in layout.y0..layout.y0 + layout.height {
        let shaded = y < layout.y0 + layout.shaded_rows;
        for x in layout.x0..layout.x0 + layout.width {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let base = if shaded {
                    (color.0[c] as f64 * layout.shade_factor).round() as i64
                } else {
                    color.0[c] as i64
                };
                let noise = if r > 0 { rng.int_inclusive(-r, r) } else { 0 };
                px[c] = (base + noise).clamp(0, 255) as u8;
            }
            img.set(x, y, Rgb(px));
        }
    }
    img
}

/// `["a", <color>, <type>]`.
pub fn caption_from_tag(tag: Tag, vocab: &VocabularyConfig) -> Result<Vec<String>> {
    let color = vocab
        .palette
        .get(tag.color_id)
        .ok_or_else(|| Error::ConfigInvalid(format!("no palette color {}", tag.color_id)))?;
    let kind = vocab
        .vehicle_types
        .get(tag.type_id)
        .ok_or_else(|| Error::ConfigInvalid(format!("no vehicle type {}", tag.type_id)))?;
    Ok(vec!["a".into(), color.name.clone(), kind.clone()])
}

struct Drawn {
    tag: Tag,
    color: Rgb,
    image: Raster,
    caption: Vec<usize>,
}

fn draw_vehicle(cfg: &VehicleConfig, tokens: &TokenVocabulary, rng: &mut Rng) -> Result<Drawn> {
    let palette = &cfg.vocabulary.palette;
    let confusable: Vec<usize> = palette
        .entries()
        .iter()
        .filter(|e| palette.is_confusable(e.id))
        .map(|e| e.id)
        .collect();
    let others: Vec<usize> = palette
        .entries()
        .iter()
        .filter(|e| !palette.is_confusable(e.id))
        .map(|e| e.id)
        .collect();
    let pool = if rng.uniform() < cfg.confusable_fraction && !confusable.is_empty() {
        &confusable
    } else if !others.is_empty() {
        &others
    } else {
        &confusable
    };
    let color_id = pool[rng.below(pool.len())];
    let type_id = rng.below(cfg.vocabulary.vehicle_types.len());
    let tag = Tag { color_id, type_id };
    let color = palette.get(color_id).expect("pool drawn from palette").rgb;
    let layout = BodyLayout::draw(type_id, cfg, rng);
    let image = render_vehicle(color, &layout, cfg.noise_radius, rng);
    let caption = tokens.encode(&caption_from_tag(tag, &cfg.vocabulary)?)?;
    Ok(Drawn {
        tag,
        color,
        image,
        caption,
    })
}

pub fn generate_vehicle_dataset(cfg: &VehicleConfig, seed: u64) -> Result<VehicleDataset> {
    cfg.validate()?;
    let root = Rng::new(seed).child("vehicle");
    let tokens = cfg.vocabulary.tokens();

    let mut train = Vec::with_capacity(cfg.train_size);
    for i in 0..cfg.train_size {
        let d = draw_vehicle(cfg, &tokens, &mut root.child_indexed("train", i as u64))?;
        train.push(VehicleSample {
            id: format!("veh-train-{i:05}"),
            image: d.image,
            caption_tokens: d.caption,
            tag: d.tag,
            true_body_color: d.color,
        });
    }

    let mut gallery = Vec::with_capacity(cfg.query_count);
    let mut captions = Vec::with_capacity(cfg.query_count);
    for k in 0..cfg.query_count {
        let d = draw_vehicle(cfg, &tokens, &mut root.child_indexed("test", k as u64))?;
        captions.push(d.caption);
        gallery.push(VehicleImage {
            id: format!("veh-img-{k:05}"),
            image: d.image,
            tag: d.tag,
            true_body_color: d.color,
        });
    }
    let palette = &cfg.vocabulary.palette;
    let test_queries = captions
        .into_iter()
        .enumerate()
        .map(|(k, caption_tokens)| {
            let tag = gallery[k].tag;
            TestQuery {
                id: format!("veh-q-{k:05}"),
                caption_tokens,
                ground_truth: gallery.iter().filter(|g| g.tag == tag).map(|g| g.id.clone()).collect(),
                source_image: gallery[k].id.clone(),
                strict_subset: false,
                confusable_color: palette.is_confusable(tag.color_id),
                caption_attributes: None,
                tag: Some(tag),
            }
        })
        .collect();

    Ok(VehicleDataset {
        meta: DatasetMeta {
            task: Task::Vehicle,
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
