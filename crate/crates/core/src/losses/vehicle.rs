use crate::datagen::Tag;
use crate::error::{Error, Result};
use crate::model::FusionHead;
use crate::numerics::{cosine_similarity_matrix, log_softmax, Matrix, Rng};

use super::{
    check_square, check_tau, head_tensors, matching_probabilities, sims_backward, LossConfig, LossResult,
    TargetDistribution, TargetKind,
};

/// ITM class index of a matched pair.
pub const MATCHED: usize = 1;
/// ITM class index of a mismatched pair.
pub const MISMATCHED: usize = 0;

/// `y_ij = 1/K_i` when items i and j share a tag, where `K_i` counts item i itself.
pub fn tag_targets<T: PartialEq>(tags: &[T]) -> TargetDistribution {
    let b = tags.len();
    let mut rows = Matrix::zeros(b, b);
    for i in 0..b {
        let k = tags.iter().filter(|t| **t == tags[i]).count() as f64;
        for j in 0..b {
            if tags[j] == tags[i] {
                rows.set(i, j, 1.0 / k);
            }
        }
    }
    TargetDistribution {
        rows,
        kind: TargetKind::Tag,
    }
}

/// Contrastive cross-entropy against soft targets, with a learnable temperature.
///
/// `½ · mean_i [H(y_i, p^i2t_i) + H(y_i, p^t2i_i)]`. Gradients: `sims` and `tau` (1×1).
pub fn fitc_loss(sims: &Matrix, tau: f64, y: &TargetDistribution) -> Result<LossResult> {
    check_tau(tau)?;
    let b = y.len();
    check_square(sims, b)?;
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let (p_t2i, p_i2t) = matching_probabilities(sims, tau)?;
    let scale = 0.5 / b as f64;
    let mut g = Matrix::zeros(b, b);
    let mut value = 0.0;
    for (transposed, p) in [(true, &p_i2t), (false, &p_t2i)] {
        for i in 0..b {
            let (pi, yi) = (p.row(i), y.rows.row(i));
            for j in 0..b {
                if yi[j] > 0.0 {
                    value -= yi[j] * pi[j].ln();
                }
                let gz = scale * (pi[j] - yi[j]) / tau;
                if transposed {
                    g.add_at(j, i, gz);
                } else {
                    g.add_at(i, j, gz);
                }
            }
        }
    }
    let mut g_tau = 0.0;
    for (gs, s) in g.data().iter().zip(sims.data()) {
        g_tau -= gs * s;
    }
    g_tau /= tau;
    let mut out = LossResult {
        value: scale * value,
        ..LossResult::default()
    };
    out.components.insert("fitc".into(), out.value);
    out.grads.insert("sims".into(), g);
    out.grads.insert("tau".into(), Matrix::from_vec(1, 1, vec![g_tau])?);
    Ok(out)
}

/// One negative per anchor row of `p`, drawn with probability ∝ `p_ij` among
/// items whose tag differs from the anchor's. Anchors with no such item get `None`.
pub fn sample_hard_negatives<T: PartialEq>(p: &Matrix, tags: &[T], rng: &mut Rng) -> Result<Vec<Option<usize>>> {
    check_square(p, tags.len())?;
    let b = tags.len();
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let eligible: Vec<usize> = (0..b).filter(|&j| tags[j] != tags[i]).collect();
        if eligible.is_empty() {
            out.push(None);
            continue;
        }
        let total: f64 = eligible.iter().map(|&j| p.get(i, j)).sum();
        let u = rng.uniform() * total;
        let mut acc = 0.0;
        let mut pick = *eligible.last().expect("non-empty");
        for &j in &eligible {
            acc += p.get(i, j);
            if u < acc {
                pick = j;
                break;
            }
        }
        out.push(Some(pick));
    }
    Ok(out)
}

/// Mined negatives for a batch: a text for every image anchor and an image for every text anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardNegatives {
    pub anchors: Vec<usize>,
    /// `neg_text[k]` pairs with image `anchors[k]`.
    pub neg_text: Vec<usize>,
    /// `neg_image[k]` pairs with text `anchors[k]`.
    pub neg_image: Vec<usize>,
    pub skipped: Vec<usize>,
}

pub fn mine_hard_negatives<T: PartialEq>(sims: &Matrix, tau: f64, tags: &[T], rng: &mut Rng) -> Result<HardNegatives> {
    let (p_t2i, p_i2t) = matching_probabilities(sims, tau)?;
    let texts = sample_hard_negatives(&p_i2t, tags, rng)?;
    let images = sample_hard_negatives(&p_t2i, tags, rng)?;
    let mut out = HardNegatives {
        anchors: Vec::new(),
        neg_text: Vec::new(),
        neg_image: Vec::new(),
        skipped: Vec::new(),
    };
    for (i, (t, v)) in texts.into_iter().zip(images).enumerate() {
        match (t, v) {
            (Some(t), Some(v)) => {
                out.anchors.push(i);
                out.neg_text.push(t);
                out.neg_image.push(v);
            }
            _ => out.skipped.push(i),
        }
    }
    Ok(out)
}

/// Two-class cross-entropy of the ITM head over positives and mined negatives.
///
/// Gradients: `f_txt`, `f_img` and every `itm_head.*` tensor.
pub fn fitm_loss(f_txt: &Matrix, f_img: &Matrix, negatives: &HardNegatives, head: &FusionHead) -> Result<LossResult> {
    if negatives.anchors.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if f_txt.shape() != f_img.shape() {
        return Err(Error::ShapeMismatch("text and image embeddings differ in shape".into()));
    }
    let mut pairs = Vec::with_capacity(3 * negatives.anchors.len());
    for (k, &i) in negatives.anchors.iter().enumerate() {
        pairs.push((i, i, MATCHED));
        pairs.push((negatives.neg_text[k], i, MISMATCHED));
        pairs.push((i, negatives.neg_image[k], MISMATCHED));
    }
    let n = pairs.len() as f64;
    let mut gh = head.zeros_like();
    let mut g_txt = Matrix::zeros(f_txt.rows(), f_txt.cols());
    let mut g_img = Matrix::zeros(f_img.rows(), f_img.cols());
    let mut value = 0.0;
    for &(t, v, label) in &pairs {
        if t >= f_txt.rows() || v >= f_img.rows() {
            return Err(Error::dims(f_txt.rows(), t.max(v) + 1));
        }
        let (logits, cache) = head.forward(f_txt.row(t), f_img.row(v))?;
        if logits.len() != 2 {
            return Err(Error::dims(2, logits.len()));
        }
        let logp = log_softmax(&logits);
        value -= logp[label];
        let mut gl: Vec<f64> = logp.iter().map(|l| l.exp() / n).collect();
        gl[label] -= 1.0 / n;
        let (ga, gb) = head.backward(&cache, &gl, &mut gh);
        g_txt.row_mut(t).iter_mut().zip(&ga).for_each(|(x, y)| *x += y);
        g_img.row_mut(v).iter_mut().zip(&gb).for_each(|(x, y)| *x += y);
    }
    let mut out = LossResult {
        value: value / n,
        ..LossResult::default()
    };
    out.components.insert("fitm".into(), out.value);
    out.grads.insert("f_txt".into(), g_txt);
    out.grads.insert("f_img".into(), g_img);
    for (name, g) in head_tensors("itm_head", &gh) {
        out.grads.insert(name, g);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct VehicleInputs<'a> {
    pub f_txt: &'a Matrix,
    pub f_img: &'a Matrix,
    pub tags: &'a [Tag],
    pub tau_fitc: f64,
    pub itm_head: &'a FusionHead,
}

/// `w_fitc·FITC + w_fitm·FITM`, mining negatives from the current similarities.
pub fn vehicle_objective(inputs: &VehicleInputs<'_>, cfg: &LossConfig, rng: &mut Rng) -> Result<LossResult> {
    let sims = cosine_similarity_matrix(inputs.f_txt, inputs.f_img)?;
    let negatives = mine_hard_negatives(&sims, inputs.tau_fitc, inputs.tags, rng)?;
    vehicle_objective_with_negatives(inputs, cfg, &negatives)
}

/// [`vehicle_objective`] with the negatives fixed in advance.
pub fn vehicle_objective_with_negatives(
    inputs: &VehicleInputs<'_>,
    cfg: &LossConfig,
    negatives: &HardNegatives,
) -> Result<LossResult> {
    let sims = cosine_similarity_matrix(inputs.f_txt, inputs.f_img)?;
    let y = tag_targets(inputs.tags);
    let mut fitc = fitc_loss(&sims, inputs.tau_fitc, &y)?;
    let g_sims = fitc.grads.remove("sims").expect("fitc returns a sims gradient");
    let (g_txt, g_img) = sims_backward(&g_sims, inputs.f_txt, inputs.f_img)?;
    fitc.grads.insert("f_txt".into(), g_txt);
    fitc.grads.insert("f_img".into(), g_img);
    let fitm = fitm_loss(inputs.f_txt, inputs.f_img, negatives, inputs.itm_head)?;

    let mut out = LossResult::default();
    out.accumulate("fitc", cfg.w_fitc, fitc)?;
    out.accumulate("fitm", cfg.w_fitm, fitm)?;
    Ok(out)
}
