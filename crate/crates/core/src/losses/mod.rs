//! Training objectives with hand-derived gradients.
//!
//! Every loss returns a [`LossResult`] whose gradients are keyed by the name
//! of the input they differentiate: `sims`, `f_txt`, `f_img`,
//! `f_txt_masked`, `logits_img`, `logits_txt`, `tau`, or a head tensor such
//! as `itm_head.out.weight`.

pub(crate) mod gradcheck;
mod pedestrian;
mod vehicle;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FusionHead, Linear};
use crate::numerics::{softmax_into, Matrix};

pub use gradcheck::{gradcheck, GradcheckReport, LossKind};
pub use pedestrian::{
    attribute_classification_loss, inclusion_targets, irm_loss, irr_proxy_loss, mask_caption, pedestrian_objective,
    MaskedCaption, PedestrianInputs,
};
pub use vehicle::{
    fitc_loss, fitm_loss, mine_hard_negatives, sample_hard_negatives, tag_targets, vehicle_objective,
    vehicle_objective_with_negatives, HardNegatives, VehicleInputs, MATCHED, MISMATCHED,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau_irm: f64,
    /// Starting value of the learnable contrastive temperature.
    pub tau_fitc_init: f64,
    pub tau_fitc_floor: f64,
    pub epsilon: f64,
    pub w_irr: f64,
    pub w_ac: f64,
    pub w_irm: f64,
    pub w_fitc: f64,
    pub w_fitm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_irm: 0.07,
            tau_fitc_init: 0.07,
            tau_fitc_floor: 1e-3,
            epsilon: 1e-8,
            w_irr: 1.0,
            w_ac: 1.0,
            w_irm: 1.0,
            w_fitc: 1.0,
            w_fitm: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("tau_irm", self.tau_irm),
            ("tau_fitc_init", self.tau_fitc_init),
            ("tau_fitc_floor", self.tau_fitc_floor),
        ] {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::ConfigInvalid(format!("{name} must be positive, got {t}")));
            }
        }
        if self.tau_fitc_init < self.tau_fitc_floor {
            return Err(Error::ConfigInvalid("tau_fitc_init is below tau_fitc_floor".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::ConfigInvalid("epsilon must be positive".into()));
        }
        for (name, w) in [
            ("w_irr", self.w_irr),
            ("w_ac", self.w_ac),
            ("w_irm", self.w_irm),
            ("w_fitc", self.w_fitc),
            ("w_fitm", self.w_fitm),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::ConfigInvalid(format!(
                    "{name} must be a finite non-negative weight"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Inclusion,
    Tag,
    OneHot,
}

/// Row-stochastic `B × B` matching targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub rows: Matrix,
    pub kind: TargetKind,
}

impl TargetDistribution {
    /// Identity targets: every item matches only itself.
    pub fn one_hot(b: usize) -> Self {
        TargetDistribution {
            rows: Matrix::identity(b),
            kind: TargetKind::OneHot,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossResult {
    pub value: f64,
    /// Unweighted value of each named term.
    pub components: BTreeMap<String, f64>,
    pub grads: BTreeMap<String, Matrix>,
}

impl LossResult {
    pub fn grad(&self, name: &str) -> Option<&Matrix> {
        self.grads.get(name)
    }

    /// Adds `weight · other` into `self`, merging gradients by name.
    pub fn accumulate(&mut self, name: &str, weight: f64, other: LossResult) -> Result<()> {
        self.value += weight * other.value;
        self.components.insert(name.to_string(), other.value);
        for (k, mut g) in other.grads {
            g.scale(weight);
            match self.grads.get_mut(&k) {
                Some(existing) => existing.add_assign(&g)?,
                None => {
                    self.grads.insert(k, g);
                }
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.values().all(Matrix::is_finite)
    }
}

/// `(p_t2i, p_i2t)`: row softmaxes of `sims / τ` and `simsᵀ / τ`.
pub fn matching_probabilities(sims: &Matrix, tau: f64) -> Result<(Matrix, Matrix)> {
    check_tau(tau)?;
    Ok((softmax_rows(sims, tau), softmax_rows(&sims.transpose(), tau)))
}

fn softmax_rows(m: &Matrix, tau: f64) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        softmax_into(m.row(i), tau, out.row_mut(i));
    }
    out
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::NonPositiveTemperature(tau));
    }
    Ok(())
}

pub(crate) fn check_square(sims: &Matrix, b: usize) -> Result<()> {
    if sims.rows() != sims.cols() || sims.rows() != b {
        return Err(Error::ShapeMismatch(format!(
            "expected {b}x{b} similarities, got {}x{}",
            sims.rows(),
            sims.cols()
        )));
    }
    Ok(())
}

/// Gradients of `sims = f_txt · f_imgᵀ` pulled back to both embedding matrices.
pub(crate) fn sims_backward(g_sims: &Matrix, f_txt: &Matrix, f_img: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((g_sims.matmul(f_img)?, g_sims.transpose().matmul(f_txt)?))
}

fn linear_tensors(prefix: &str, l: &Linear, out: &mut Vec<(String, Matrix)>) {
    out.push((
        format!("{prefix}.weight"),
        Matrix::from_vec(l.out_dim, l.in_dim, l.weight.clone()).expect("linear weight shape"),
    ));
    out.push((
        format!("{prefix}.bias"),
        Matrix::from_vec(1, l.out_dim, l.bias.clone()).expect("linear bias shape"),
    ));
}

/// Head tensors as named matrices (`weight` is `out × in`, `bias` is `1 × out`).
pub fn head_tensors(prefix: &str, head: &FusionHead) -> Vec<(String, Matrix)> {
    let mut out = Vec::new();
    linear_tensors(&format!("{prefix}.hidden"), &head.hidden, &mut out);
    linear_tensors(&format!("{prefix}.out"), &head.out, &mut out);
    out
}

/// Inverse of [`head_tensors`] for a head of the same shape as `like`.
pub fn head_from_tensors(prefix: &str, like: &FusionHead, tensors: &BTreeMap<String, Matrix>) -> Result<FusionHead> {
    let mut head = like.clone();
    let fetch = |name: String, len: usize| -> Result<Vec<f64>> {
        let m = tensors
            .get(&name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor {name}")))?;
        if m.data().len() != len {
            return Err(Error::ShapeMismatch(format!("tensor {name}")));
        }
        Ok(m.data().to_vec())
    };
    head.hidden.weight = fetch(format!("{prefix}.hidden.weight"), head.hidden.weight.len())?;
    head.hidden.bias = fetch(format!("{prefix}.hidden.bias"), head.hidden.bias.len())?;
    head.out.weight = fetch(format!("{prefix}.out.weight"), head.out.weight.len())?;
    head.out.bias = fetch(format!("{prefix}.out.bias"), head.out.bias.len())?;
    Ok(head)
}

#[cfg(test)]
mod tests;
