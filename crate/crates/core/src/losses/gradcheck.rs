use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::datagen::{AttributeSet, Tag};
use crate::error::{Error, Result};
use crate::model::FusionHead;
use crate::numerics::{cosine_similarity_matrix, extrapolated_gradient, l2_normalize, relative_error, Matrix, Rng};

use super::{
    attribute_classification_loss, fitc_loss, fitm_loss, head_from_tensors, head_tensors, inclusion_targets, irm_loss,
    irr_proxy_loss, mine_hard_negatives, pedestrian_objective, tag_targets, vehicle_objective_with_negatives,
    LossConfig, LossResult, MaskedCaption, PedestrianInputs, VehicleInputs,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ac,
    Irm,
    Irr,
    Fitc,
    Fitm,
    Pedestrian,
    Vehicle,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Ac,
        LossKind::Irm,
        LossKind::Irr,
        LossKind::Fitc,
        LossKind::Fitm,
        LossKind::Pedestrian,
        LossKind::Vehicle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ac => "ac",
            LossKind::Irm => "irm",
            LossKind::Irr => "irr",
            LossKind::Fitc => "fitc",
            LossKind::Fitm => "fitm",
            LossKind::Pedestrian => "pedestrian",
            LossKind::Vehicle => "vehicle",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown loss {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub loss: LossKind,
    pub seeds: u64,
    pub max_relative_error: f64,
    pub worst_seed: u64,
    pub worst_tensor: String,
    pub tolerance: f64,
    pub passed: bool,
}

const EMBED: usize = 32;
const HIDDEN: usize = 4;
const ATTRS: usize = 8;
const VOCAB: usize = 8;

/// Initial extrapolation step per input. Similarities and embeddings are
/// divided by a temperature near 0.07, so they get a smaller step than head
/// weights and logits.
fn step_for(name: &str) -> f64 {
    if name.contains("_head.") || name.starts_with("logits") {
        0.05
    } else {
        0.01
    }
}

/// Compares analytic gradients of `kind` against central differences on
/// `seeds` random batches of 4 to 8 items.
pub fn gradcheck(kind: LossKind, seeds: u64, tolerance: f64) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        loss: kind,
        seeds,
        max_relative_error: 0.0,
        worst_seed: 0,
        worst_tensor: String::new(),
        tolerance,
        passed: true,
    };
    for seed in 0..seeds {
        let case = Case::random(kind, seed)?;
        let (err, tensor) = case.check()?;
        if err > report.max_relative_error || err.is_nan() {
            report.max_relative_error = err;
            report.worst_seed = seed;
            report.worst_tensor = tensor;
        }
    }
    report.passed = report.max_relative_error < tolerance;
    Ok(report)
}

fn unit_rows(rng: &mut Rng, b: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(b, d);
    for i in 0..b {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        m.row_mut(i)
            .copy_from_slice(&l2_normalize(&v).expect("gaussian vector is non-zero"));
    }
    m
}

fn normal_matrix(rng: &mut Rng, r: usize, c: usize, sigma: f64) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| sigma * rng.normal()).collect()).expect("finite")
}

fn random_sets(rng: &mut Rng, b: usize) -> (Vec<AttributeSet>, Vec<AttributeSet>) {
    let mut images = Vec::with_capacity(b);
    let mut texts = Vec::with_capacity(b);
    for _ in 0..b {
        let mut img = AttributeSet::default();
        while img.is_empty() {
            img = AttributeSet::from_indices((0..ATTRS).filter(|_| rng.uniform() < 0.35));
        }
        let mut txt = AttributeSet::default();
        while txt.is_empty() {
            txt = AttributeSet::from_indices(img.iter().filter(|_| rng.uniform() < 0.6));
        }
        images.push(img);
        texts.push(txt);
    }
    (texts, images)
}

pub(super) struct Case {
    kind: LossKind,
    inputs: BTreeMap<String, Matrix>,
    image_attrs: Vec<AttributeSet>,
    text_attrs: Vec<AttributeSet>,
    tags: Vec<Tag>,
    masked: Vec<MaskedCaption>,
    irr_head: FusionHead,
    itm_head: FusionHead,
    cfg: LossConfig,
    negatives: Option<super::HardNegatives>,
}

impl Case {
    pub(super) fn random(kind: LossKind, seed: u64) -> Result<Case> {
        let mut rng = Rng::new(seed).child(kind.name());
        let b = if seed % 2 == 0 { 4 } else { 8 };
        let mut inputs = BTreeMap::new();
        let f_txt = unit_rows(&mut rng, b, EMBED);
        let f_img = unit_rows(&mut rng, b, EMBED);
        let (text_attrs, image_attrs) = random_sets(&mut rng, b);
        let tags: Vec<Tag> = (0..b)
            .map(|_| Tag {
                color_id: rng.below(2),
                type_id: rng.below(2),
            })
            .collect();
        let masked: Vec<MaskedCaption> = (0..b)
            .map(|_| {
                let mut tokens: Vec<usize> = (0..3 + rng.below(3)).map(|_| 1 + rng.below(VOCAB - 1)).collect();
                let pos = rng.below(tokens.len());
                tokens[pos] = 0;
                MaskedCaption {
                    tokens,
                    target: 1 + rng.below(VOCAB - 1),
                }
            })
            .collect();
        let irr_head = FusionHead::new(2 * EMBED, HIDDEN, VOCAB, 0.5, &rng.child("irr_head"));
        let itm_head = FusionHead::new(2 * EMBED, HIDDEN, 2, 0.5, &rng.child("itm_head"));
        let tau = rng.uniform_range(0.07, 0.15);
        match kind {
            LossKind::Ac => {
                inputs.insert("logits_img".into(), normal_matrix(&mut rng, b, ATTRS, 2.0));
                inputs.insert("logits_txt".into(), normal_matrix(&mut rng, b, ATTRS, 2.0));
            }
            LossKind::Irm | LossKind::Fitc => {
                inputs.insert("sims".into(), cosine_similarity_matrix(&f_txt, &f_img)?);
            }
            LossKind::Irr => {
                inputs.insert("f_txt_masked".into(), unit_rows(&mut rng, b, EMBED));
                inputs.insert("f_img".into(), f_img.clone());
                inputs.extend(head_tensors("irr_head", &irr_head));
            }
            LossKind::Fitm | LossKind::Vehicle => {
                inputs.insert("f_txt".into(), f_txt.clone());
                inputs.insert("f_img".into(), f_img.clone());
                inputs.extend(head_tensors("itm_head", &itm_head));
            }
            LossKind::Pedestrian => {
                inputs.insert("f_txt".into(), f_txt.clone());
                inputs.insert("f_img".into(), f_img.clone());
                inputs.insert("f_txt_masked".into(), unit_rows(&mut rng, b, EMBED));
                inputs.insert("logits_img".into(), normal_matrix(&mut rng, b, ATTRS, 2.0));
                inputs.insert("logits_txt".into(), normal_matrix(&mut rng, b, ATTRS, 2.0));
                inputs.extend(head_tensors("irr_head", &irr_head));
            }
        }
        if matches!(kind, LossKind::Fitc | LossKind::Vehicle) {
            inputs.insert("tau".into(), Matrix::from_vec(1, 1, vec![tau])?);
        }
        let negatives = if matches!(kind, LossKind::Fitm | LossKind::Vehicle) {
            let sims = cosine_similarity_matrix(&f_txt, &f_img)?;
            let mut mined = mine_hard_negatives(&sims, tau, &tags, &mut rng.child("mining"))?;
            if mined.anchors.is_empty() {
                mined.anchors.push(0);
                mined.neg_text.push(1);
                mined.neg_image.push(1);
            }
            Some(mined)
        } else {
            None
        };
        Ok(Case {
            kind,
            inputs,
            image_attrs,
            text_attrs,
            tags,
            masked,
            irr_head,
            itm_head,
            cfg: LossConfig {
                tau_fitc_init: tau,
                ..LossConfig::default()
            },
            negatives,
        })
    }

    fn eval(&self, x: &BTreeMap<String, Matrix>) -> Result<LossResult> {
        let get = |k: &str| &x[k];
        match self.kind {
            LossKind::Ac => attribute_classification_loss(get("logits_img"), get("logits_txt"), &self.image_attrs),
            LossKind::Irm => {
                let q = inclusion_targets(&self.text_attrs, &self.image_attrs)?;
                irm_loss(get("sims"), self.cfg.tau_irm, &q, self.cfg.epsilon)
            }
            LossKind::Fitc => fitc_loss(get("sims"), get("tau").get(0, 0), &tag_targets(&self.tags)),
            LossKind::Irr => {
                let head = head_from_tensors("irr_head", &self.irr_head, x)?;
                irr_proxy_loss(&self.masked, 0, get("f_txt_masked"), get("f_img"), &head)
            }
            LossKind::Fitm => {
                let head = head_from_tensors("itm_head", &self.itm_head, x)?;
                fitm_loss(
                    get("f_txt"),
                    get("f_img"),
                    self.negatives.as_ref().expect("mined"),
                    &head,
                )
            }
            LossKind::Pedestrian => {
                let head = head_from_tensors("irr_head", &self.irr_head, x)?;
                let targets = inclusion_targets(&self.text_attrs, &self.image_attrs)?;
                pedestrian_objective(
                    &PedestrianInputs {
                        f_txt: get("f_txt"),
                        f_img: get("f_img"),
                        f_txt_masked: get("f_txt_masked"),
                        logits_txt: get("logits_txt"),
                        logits_img: get("logits_img"),
                        image_attributes: &self.image_attrs,
                        targets: &targets,
                        masked: &self.masked,
                        mask_id: 0,
                        irr_head: &head,
                    },
                    &self.cfg,
                )
            }
            LossKind::Vehicle => {
                let head = head_from_tensors("itm_head", &self.itm_head, x)?;
                vehicle_objective_with_negatives(
                    &VehicleInputs {
                        f_txt: get("f_txt"),
                        f_img: get("f_img"),
                        tags: &self.tags,
                        tau_fitc: get("tau").get(0, 0),
                        itm_head: &head,
                    },
                    &self.cfg,
                    self.negatives.as_ref().expect("mined"),
                )
            }
        }
    }

    /// Worst element-wise relative error and the tensor it occurred in.
    pub(super) fn check(&self) -> Result<(f64, String)> {
        let analytic = self.eval(&self.inputs)?;
        for name in analytic.grads.keys() {
            if !self.inputs.contains_key(name) {
                return Err(Error::ShapeMismatch(format!("gradient for unknown input {name}")));
            }
        }
        let mut worst = (0.0, String::new());
        for (name, m) in &self.inputs {
            let zero = Matrix::zeros(m.rows(), m.cols());
            let a = analytic.grads.get(name).unwrap_or(&zero);
            if a.shape() != m.shape() {
                return Err(Error::ShapeMismatch(format!("gradient {name}")));
            }
            let mut probe = self.inputs.clone();
            let numeric = extrapolated_gradient(
                |xs| {
                    probe.get_mut(name).expect("present").data_mut().copy_from_slice(xs);
                    self.eval(&probe).map(|r| r.value).unwrap_or(f64::NAN)
                },
                m.data(),
                step_for(name),
            );
            for (x, y) in a.data().iter().zip(&numeric) {
                let e = relative_error(*x, *y);
                if e.is_nan() || e > worst.0 {
                    worst = (if e.is_nan() { f64::INFINITY } else { e }, name.clone());
                }
            }
        }
        Ok(worst)
    }
}
