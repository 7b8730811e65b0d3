use crate::datagen::{AttributeSet, AttributeVocabulary, TokenVocabulary, MASK_TOKEN};
use crate::error::{Error, Result};
use crate::model::FusionHead;
use crate::numerics::{cosine_similarity_matrix, log_softmax, sigmoid, Matrix, Rng};

use super::{
    check_square, check_tau, head_tensors, matching_probabilities, sims_backward, LossConfig, LossResult,
    TargetDistribution, TargetKind,
};

/// Sigmoid binary cross-entropy over every attribute, for both modalities.
///
/// Both logit matrices are scored against the same label sets.
pub fn attribute_classification_loss(
    logits_img: &Matrix,
    logits_txt: &Matrix,
    labels: &[AttributeSet],
) -> Result<LossResult> {
    if logits_img.shape() != logits_txt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image logits {:?} vs text logits {:?}",
            logits_img.shape(),
            logits_txt.shape()
        )));
    }
    let (b, q) = logits_img.shape();
    if labels.len() != b {
        return Err(Error::dims(b, labels.len()));
    }
    if b == 0 || q == 0 {
        return Err(Error::EmptyBatch);
    }
    let scale = 0.5 / (b * q) as f64;
    let mut out = LossResult::default();
    for (name, logits) in [("logits_img", logits_img), ("logits_txt", logits_txt)] {
        let mut g = Matrix::zeros(b, q);
        let mut total = 0.0;
        for i in 0..b {
            for k in 0..q {
                let z = logits.get(i, k);
                let y = if labels[i].contains(k) { 1.0 } else { 0.0 };
                total += softplus(z) - y * z;
                g.set(i, k, scale * (sigmoid(z) - y));
            }
        }
        out.value += scale * total;
        out.grads.insert(name.to_string(), g);
    }
    out.components.insert("ac".into(), out.value);
    Ok(out)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `q_ij ∝ [text_i ⊆ image_j]`, normalized per row.
pub fn inclusion_targets(text_attrs: &[AttributeSet], image_attrs: &[AttributeSet]) -> Result<TargetDistribution> {
    if text_attrs.len() != image_attrs.len() {
        return Err(Error::dims(text_attrs.len(), image_attrs.len()));
    }
    let b = text_attrs.len();
    let mut rows = Matrix::zeros(b, b);
    for (i, t) in text_attrs.iter().enumerate() {
        let hits: Vec<usize> = (0..b).filter(|&j| t.is_subset_of(image_attrs[j])).collect();
        if hits.is_empty() {
            return Err(Error::NoInclusionRow { row: i });
        }
        let w = 1.0 / hits.len() as f64;
        for j in hits {
            rows.set(i, j, w);
        }
    }
    Ok(TargetDistribution {
        rows,
        kind: TargetKind::Inclusion,
    })
}

/// KL of probabilities computed from `sims` against `q`, both directions.
///
/// Per row: `(1/B) Σ_j p_j log(p_j / (q_j + ε))`. The loss is the batch mean of
/// the image-to-text and text-to-image terms, each scored against `q_i`.
/// The only gradient is `sims`.
pub fn irm_loss(sims: &Matrix, tau: f64, q: &TargetDistribution, epsilon: f64) -> Result<LossResult> {
    check_tau(tau)?;
    let b = q.len();
    check_square(sims, b)?;
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let (p_t2i, p_i2t) = matching_probabilities(sims, tau)?;
    let bf = b as f64;
    let scale = 1.0 / (bf * bf);
    let mut g = Matrix::zeros(b, b);
    let mut value = 0.0;
    let mut c = vec![0.0; b];
    for (transposed, p) in [(true, &p_i2t), (false, &p_t2i)] {
        for i in 0..b {
            let (pi, qi) = (p.row(i), q.rows.row(i));
            let mut kl = 0.0;
            for j in 0..b {
                c[j] = pi[j].ln() - (qi[j] + epsilon).ln();
                kl += pi[j] * c[j];
            }
            value += kl / bf;
            for j in 0..b {
                let gz = scale * pi[j] * (c[j] - kl) / tau;
                if transposed {
                    g.add_at(j, i, gz);
                } else {
                    g.add_at(i, j, gz);
                }
            }
        }
    }
    let mut out = LossResult {
        value: value / bf,
        ..LossResult::default()
    };
    out.components.insert("irm".into(), out.value);
    out.grads.insert("sims".into(), g);
    Ok(out)
}

/// Caption with one attribute key token replaced by the mask token.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedCaption {
    pub tokens: Vec<usize>,
    pub target: usize,
}

/// Masks the key token of one attribute named by the caption, chosen by `rng`.
pub fn mask_caption(
    tokens: &[usize],
    caption_attributes: AttributeSet,
    attrs: &AttributeVocabulary,
    vocab: &TokenVocabulary,
    rng: &mut Rng,
) -> Result<MaskedCaption> {
    let present: Vec<(usize, usize)> = caption_attributes
        .iter()
        .filter_map(|k| vocab.id(attrs.key_token(k)))
        .filter_map(|id| tokens.iter().position(|&t| t == id).map(|pos| (pos, id)))
        .collect();
    if present.is_empty() {
        return Err(Error::EmptyAttributeSet);
    }
    let (pos, target) = present[rng.below(present.len())];
    let mut masked = tokens.to_vec();
    masked[pos] = vocab
        .id(MASK_TOKEN)
        .ok_or_else(|| Error::UnknownToken(MASK_TOKEN.into()))?;
    Ok(MaskedCaption { tokens: masked, target })
}

/// Softmax cross-entropy of the fused masked-caption/image pair against the hidden token.
pub fn irr_proxy_loss(
    masked: &[MaskedCaption],
    mask_id: usize,
    f_txt_masked: &Matrix,
    f_img: &Matrix,
    head: &FusionHead,
) -> Result<LossResult> {
    let b = masked.len();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    if f_txt_masked.rows() != b || f_img.rows() != b {
        return Err(Error::dims(b, f_txt_masked.rows().min(f_img.rows())));
    }
    let mut gh = head.zeros_like();
    let mut g_txt = Matrix::zeros(b, f_txt_masked.cols());
    let mut g_img = Matrix::zeros(b, f_img.cols());
    let mut value = 0.0;
    for (i, m) in masked.iter().enumerate() {
        if !m.tokens.contains(&mask_id) {
            return Err(Error::NoMaskPresent { row: i });
        }
        let (logits, cache) = head.forward(f_txt_masked.row(i), f_img.row(i))?;
        if m.target >= logits.len() {
            return Err(Error::UnknownToken(format!("id {}", m.target)));
        }
        let logp = log_softmax(&logits);
        value -= logp[m.target];
        let mut gl: Vec<f64> = logp.iter().map(|l| l.exp() / b as f64).collect();
        gl[m.target] -= 1.0 / b as f64;
        let (ga, gb) = head.backward(&cache, &gl, &mut gh);
        g_txt.row_mut(i).copy_from_slice(&ga);
        g_img.row_mut(i).copy_from_slice(&gb);
    }
    let mut out = LossResult {
        value: value / b as f64,
        ..LossResult::default()
    };
    out.components.insert("irr".into(), out.value);
    out.grads.insert("f_txt_masked".into(), g_txt);
    out.grads.insert("f_img".into(), g_img);
    for (name, g) in head_tensors("irr_head", &gh) {
        out.grads.insert(name, g);
    }
    Ok(out)
}

/// Everything the pedestrian objective reads for one batch.
#[derive(Debug, Clone, Copy)]
pub struct PedestrianInputs<'a> {
    pub f_txt: &'a Matrix,
    pub f_img: &'a Matrix,
    pub f_txt_masked: &'a Matrix,
    pub logits_txt: &'a Matrix,
    pub logits_img: &'a Matrix,
    pub image_attributes: &'a [AttributeSet],
    pub targets: &'a TargetDistribution,
    pub masked: &'a [MaskedCaption],
    pub mask_id: usize,
    pub irr_head: &'a FusionHead,
}

/// `w_irr·IRR + w_ac·AC + w_irm·IRM`, with similarity gradients pulled back to the embeddings.
pub fn pedestrian_objective(inputs: &PedestrianInputs<'_>, cfg: &LossConfig) -> Result<LossResult> {
    let irr = irr_proxy_loss(
        inputs.masked,
        inputs.mask_id,
        inputs.f_txt_masked,
        inputs.f_img,
        inputs.irr_head,
    )?;
    let ac = attribute_classification_loss(inputs.logits_img, inputs.logits_txt, inputs.image_attributes)?;
    let sims = cosine_similarity_matrix(inputs.f_txt, inputs.f_img)?;
    let mut irm = irm_loss(&sims, cfg.tau_irm, inputs.targets, cfg.epsilon)?;
    let g_sims = irm.grads.remove("sims").expect("irm returns a sims gradient");
    let (g_txt, g_img) = sims_backward(&g_sims, inputs.f_txt, inputs.f_img)?;
    irm.grads.insert("f_txt".into(), g_txt);
    irm.grads.insert("f_img".into(), g_img);

    let mut out = LossResult::default();
    out.accumulate("irr", cfg.w_irr, irr)?;
    out.accumulate("ac", cfg.w_ac, ac)?;
    out.accumulate("irm", cfg.w_irm, irm)?;
    Ok(out)
}
