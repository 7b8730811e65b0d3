//! Seeded training loops, the optimizer and checkpoints.

mod adam;
mod checkpoint;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{image_to_features, ColorPrompter, PatchSpec, Raster};
use crate::datagen::{
    background_texture, dataset_hash, Dataset, PedestrianDataset, Task, VehicleDataset, VocabularyConfig,
    BACKGROUND_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::losses::{
    inclusion_targets, mask_caption, pedestrian_objective, vehicle_objective, LossConfig, LossResult, MaskedCaption,
    PedestrianInputs, TargetDistribution, VehicleInputs,
};
use crate::model::{FusionHead, Linear, ModelConfig, ModelShape, Parameters, PedestrianModel, VehicleModel};
use crate::numerics::{Matrix, Rng};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    empty_model, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, TrainedModel, CHECKPOINT_MANIFEST,
};

/// Which matching targets the pedestrian IRM term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    #[default]
    Inclusion,
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Defaults to 30 for pedestrians and 20 for vehicles.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Color-patch vehicle images before encoding.
    #[serde(default = "default_true")]
    pub augmentation: bool,
    #[serde(default)]
    pub targets: TargetMode,
}

fn default_batch_size() -> usize {
    32
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(task: Task) -> Self {
        TrainConfig {
            task,
            batch_size: default_batch_size(),
            epochs: None,
            optimizer: AdamConfig::default(),
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            augmentation: true,
            targets: TargetMode::Inclusion,
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.task {
            Task::Pedestrian => 30,
            Task::Vehicle => 20,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::ConfigInvalid(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.model.validate()
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_slice(bytes).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// sha256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    /// Mean weighted objective over the epoch's batches.
    pub total: f64,
    /// Mean unweighted value of each term.
    pub components: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: Task,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub epochs: Vec<EpochRecord>,
    /// The only field that differs between identical runs.
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn first_total(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.total)
    }

    pub fn last_total(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.total)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub record: RunRecord,
}

/// Color prompter for the fixed synthetic scene.
pub fn vehicle_prompter(vocab: &VocabularyConfig) -> ColorPrompter {
    ColorPrompter {
        palette: vocab.palette.clone(),
        background: Some(background_texture(32, 32)),
        threshold: BACKGROUND_THRESHOLD,
        patch: PatchSpec::default(),
    }
}

/// Encoder input for a vehicle image, patched first when a prompter is given.
pub fn vehicle_features(image: &Raster, prompter: Option<&ColorPrompter>) -> Result<Vec<f64>> {
    match prompter {
        Some(p) => image_to_features(&p.prompt(image)?.1),
        None => image_to_features(image),
    }
}

/// Trains the branch named by `cfg.task` on `dataset`.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.task != dataset.task() {
        return Err(Error::TaskDatasetMismatch {
            config: cfg.task.as_str().into(),
            dataset: dataset.task().as_str().into(),
        });
    }
    let started = Instant::now();
    let data_hash = dataset_hash(dataset)?;
    let (model, epochs, shape) = match dataset {
        Dataset::Pedestrian(d) => train_pedestrian(cfg, d)?,
        Dataset::Vehicle(d) => train_vehicle(cfg, d)?,
    };
    let config_hash = cfg.hash();
    let meta = CheckpointMeta {
        task: cfg.task,
        seed: cfg.seed,
        config_hash: config_hash.clone(),
        dataset_hash: data_hash.clone(),
        shape,
        augmentation: cfg.augmentation,
        config: cfg.clone(),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint { meta, model },
        record: RunRecord {
            task: cfg.task,
            seed: cfg.seed,
            config_hash,
            dataset_hash: data_hash,
            epochs,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    })
}

/// Index batches for one epoch; the remainder is dropped.
fn epoch_batches(n: usize, batch: usize, rng: &Rng, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.child_indexed("shuffle", epoch as u64).shuffle(&mut order);
    order.chunks_exact(batch).map(|c| c.to_vec()).collect()
}

struct EpochAccumulator {
    batches: usize,
    total: f64,
    components: BTreeMap<String, f64>,
}

impl EpochAccumulator {
    fn new() -> Self {
        EpochAccumulator {
            batches: 0,
            total: 0.0,
            components: BTreeMap::new(),
        }
    }

    fn add(&mut self, r: &LossResult) {
        self.batches += 1;
        self.total += r.value;
        for (k, v) in &r.components {
            *self.components.entry(k.clone()).or_insert(0.0) += v;
        }
    }

    fn finish(self, epoch: usize) -> EpochRecord {
        let n = self.batches.max(1) as f64;
        EpochRecord {
            epoch,
            batches: self.batches,
            total: self.total / n,
            components: self.components.into_iter().map(|(k, v)| (k, v / n)).collect(),
        }
    }
}

fn check_finite(r: &LossResult, epoch: usize) -> Result<()> {
    if !r.value.is_finite() {
        return Err(Error::DivergedLoss {
            epoch,
            what: format!("objective value {}", r.value),
        });
    }
    for (k, g) in &r.grads {
        if !g.is_finite() {
            return Err(Error::DivergedLoss {
                epoch,
                what: format!("gradient {k}"),
            });
        }
    }
    Ok(())
}

/// Degenerate embeddings mid-run mean the parameters have blown up.
fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::ZeroVector | Error::NonFinite(_) => Error::DivergedLoss {
            epoch,
            what: e.to_string(),
        },
        other => other,
    }
}

fn take(r: &mut LossResult, name: &str, rows: usize, cols: usize) -> Matrix {
    r.grads.remove(name).unwrap_or_else(|| Matrix::zeros(rows, cols))
}

/// Pulls `∂L/∂logits` back through the shared head, accumulating head grads.
fn head_backward(head: &Linear, inputs: &Matrix, g_logits: &Matrix, g_head: &mut Linear, g_inputs: &mut Matrix) {
    for i in 0..inputs.rows() {
        let d = head.backward(inputs.row(i), g_logits.row(i), g_head);
        g_inputs.row_mut(i).iter_mut().zip(&d).for_each(|(a, b)| *a += b);
    }
}

fn fill_head(dst: &mut FusionHead, prefix: &str, r: &LossResult) {
    let slots = [
        ("hidden.weight", &mut dst.hidden.weight),
        ("hidden.bias", &mut dst.hidden.bias),
        ("out.weight", &mut dst.out.weight),
        ("out.bias", &mut dst.out.bias),
    ];
    for (suffix, slot) in slots {
        if let Some(g) = r.grads.get(&format!("{prefix}.{suffix}")) {
            slot.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
    }
}

fn apply_update<P: Parameters>(
    model: &mut P,
    grads: &P,
    state: &mut AdamState,
    hyper: &AdamConfig,
    epoch: usize,
) -> Result<()> {
    let g = grads.flatten();
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::DivergedLoss {
            epoch,
            what: "parameter gradient".into(),
        });
    }
    let mut p = model.flatten();
    adam_step(&mut p, &g, state, hyper)?;
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::DivergedLoss {
            epoch,
            what: "parameters after update".into(),
        });
    }
    model.assign_flat(&p);
    Ok(())
}

/// Shape of the pedestrian model for `d`.
pub fn pedestrian_shape(d: &PedestrianDataset) -> ModelShape {
    ModelShape {
        vocab_size: d.meta.tokens.len(),
        feature_dim: d.split.train.first().map_or(0, |s| s.image_features.len()),
        num_attributes: d.meta.vocabulary.attributes.len(),
    }
}

pub fn vehicle_shape(d: &VehicleDataset) -> ModelShape {
    ModelShape {
        vocab_size: d.meta.tokens.len(),
        feature_dim: crate::augment::FEATURE_DIM,
        num_attributes: 0,
    }
}

fn train_pedestrian(cfg: &TrainConfig, d: &PedestrianDataset) -> Result<(TrainedModel, Vec<EpochRecord>, ModelShape)> {
    let shape = pedestrian_shape(d);
    let mut model = PedestrianModel::new(&cfg.model, &shape, cfg.seed);
    let mut state = AdamState::new(model.parameter_count());
    let rng = Rng::new(cfg.seed).child("train/pedestrian");
    let train = &d.split.train;
    let attrs = &d.meta.vocabulary.attributes;
    let tokens = &d.meta.tokens;
    let mask_id = tokens.mask_id();
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs() {
        let mut acc = EpochAccumulator::new();
        let epoch_rng = rng.child_indexed("epoch", epoch as u64);
        for (bi, idx) in epoch_batches(train.len(), cfg.batch_size, &rng, epoch)
            .into_iter()
            .enumerate()
        {
            let mut mask_rng = epoch_rng.child_indexed("mask", bi as u64);
            let b = idx.len();
            let captions: Vec<Vec<usize>> = idx.iter().map(|&i| train[i].caption_tokens.clone()).collect();
            let masked: Vec<MaskedCaption> = idx
                .iter()
                .map(|&i| {
                    mask_caption(
                        &train[i].caption_tokens,
                        train[i].caption_attributes,
                        attrs,
                        tokens,
                        &mut mask_rng,
                    )
                })
                .collect::<Result<_>>()?;
            let masked_tokens: Vec<Vec<usize>> = masked.iter().map(|m| m.tokens.clone()).collect();
            let feats: Vec<&[f64]> = idx.iter().map(|&i| train[i].image_features.as_slice()).collect();
            let image_attrs: Vec<_> = idx.iter().map(|&i| train[i].image_attributes).collect();
            let caption_attrs: Vec<_> = idx.iter().map(|&i| train[i].caption_attributes).collect();

            let tb = model.encoder.encode_texts(&captions).map_err(diverged(epoch))?;
            let mb = model.encoder.encode_texts(&masked_tokens).map_err(diverged(epoch))?;
            let ib = model.encoder.encode_images(&feats).map_err(diverged(epoch))?;
            let logits = |m: &Matrix| -> Result<Matrix> {
                let rows = (0..m.rows())
                    .map(|i| model.attr_head.forward(m.row(i)))
                    .collect::<Result<Vec<_>>>()?;
                Matrix::from_rows(&rows)
            };
            let logits_txt = logits(&tb.embeddings)?;
            let logits_img = logits(&ib.embeddings)?;
            let targets = match cfg.targets {
                TargetMode::Inclusion => inclusion_targets(&caption_attrs, &image_attrs)?,
                TargetMode::OneHot => TargetDistribution::one_hot(b),
            };
            let mut r = pedestrian_objective(
                &PedestrianInputs {
                    f_txt: &tb.embeddings,
                    f_img: &ib.embeddings,
                    f_txt_masked: &mb.embeddings,
                    logits_txt: &logits_txt,
                    logits_img: &logits_img,
                    image_attributes: &image_attrs,
                    targets: &targets,
                    masked: &masked,
                    mask_id,
                    irr_head: &model.irr_head,
                },
                &cfg.loss,
            )?;
            check_finite(&r, epoch)?;
            acc.add(&r);

            let dim = tb.embeddings.cols();
            let q = logits_txt.cols();
            let mut grads = model.zeros_like();
            let mut g_txt = take(&mut r, "f_txt", b, dim);
            let mut g_img = take(&mut r, "f_img", b, dim);
            let g_masked = take(&mut r, "f_txt_masked", b, dim);
            let g_lt = take(&mut r, "logits_txt", b, q);
            let g_li = take(&mut r, "logits_img", b, q);
            head_backward(
                &model.attr_head,
                &tb.embeddings,
                &g_lt,
                &mut grads.attr_head,
                &mut g_txt,
            );
            head_backward(
                &model.attr_head,
                &ib.embeddings,
                &g_li,
                &mut grads.attr_head,
                &mut g_img,
            );
            fill_head(&mut grads.irr_head, "irr_head", &r);
            let enc = &mut grads.encoder;
            model.encoder.backward_texts(&tb, &g_txt, enc)?;
            model.encoder.backward_texts(&mb, &g_masked, enc)?;
            model.encoder.backward_images(&ib, &g_img, enc)?;
            apply_update(&mut model, &grads, &mut state, &cfg.optimizer, epoch)?;
            model.encoder.touch();
        }
        records.push(acc.finish(epoch));
    }
    Ok((TrainedModel::Pedestrian(model), records, shape))
}

fn train_vehicle(cfg: &TrainConfig, d: &VehicleDataset) -> Result<(TrainedModel, Vec<EpochRecord>, ModelShape)> {
    let shape = vehicle_shape(d);
    let mut model = VehicleModel::new(&cfg.model, &shape, cfg.loss.tau_fitc_init, cfg.seed);
    let mut state = AdamState::new(model.parameter_count());
    let rng = Rng::new(cfg.seed).child("train/vehicle");
    let train = &d.split.train;
    let prompter = vehicle_prompter(&d.meta.vocabulary);
    let features: Vec<Vec<f64>> = train
        .iter()
        .map(|s| vehicle_features(&s.image, cfg.augmentation.then_some(&prompter)))
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs() {
        let mut acc = EpochAccumulator::new();
        let epoch_rng = rng.child_indexed("epoch", epoch as u64);
        for (bi, idx) in epoch_batches(train.len(), cfg.batch_size, &rng, epoch)
            .into_iter()
            .enumerate()
        {
            let b = idx.len();
            let captions: Vec<Vec<usize>> = idx.iter().map(|&i| train[i].caption_tokens.clone()).collect();
            let feats: Vec<&[f64]> = idx.iter().map(|&i| features[i].as_slice()).collect();
            let tags: Vec<_> = idx.iter().map(|&i| train[i].tag).collect();
            let tb = model.encoder.encode_texts(&captions).map_err(diverged(epoch))?;
            let ib = model.encoder.encode_images(&feats).map_err(diverged(epoch))?;
            let mut r = vehicle_objective(
                &VehicleInputs {
                    f_txt: &tb.embeddings,
                    f_img: &ib.embeddings,
                    tags: &tags,
                    tau_fitc: model.tau,
                    itm_head: &model.itm_head,
                },
                &cfg.loss,
                &mut epoch_rng.child_indexed("mine", bi as u64),
            )?;
            check_finite(&r, epoch)?;
            acc.add(&r);

            let dim = tb.embeddings.cols();
            let mut grads = model.zeros_like();
            let g_txt = take(&mut r, "f_txt", b, dim);
            let g_img = take(&mut r, "f_img", b, dim);
            grads.tau = r.grads.get("tau").map_or(0.0, |g| g.get(0, 0));
            fill_head(&mut grads.itm_head, "itm_head", &r);
            model.encoder.backward_texts(&tb, &g_txt, &mut grads.encoder)?;
            model.encoder.backward_images(&ib, &g_img, &mut grads.encoder)?;
            apply_update(&mut model, &grads, &mut state, &cfg.optimizer, epoch)?;
            model.tau = model.tau.max(cfg.loss.tau_fitc_floor);
            model.encoder.touch();
        }
        records.push(acc.finish(epoch));
    }
    Ok((TrainedModel::Vehicle(model), records, shape))
}

#[cfg(test)]
mod tests;
