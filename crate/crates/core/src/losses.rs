//! Attack and defense objectives.
//!
//! - [`patch_contrastive_loss`]: InfoNCE over clean/patched patch-embedding
//!   cosines, `-(1/N) sum_i log softmax_j(cos(p_i, p'_j) / tau)[i]`.
//! - [`alignment_shift_loss`]: mean `|cos(p_i, w_j) - cos(p'_i, w_j)|` over
//!   all patch/token pairs.
//! - [`EmaState`]: per-loss running magnitude used to put both losses on the
//!   same scale before they are mixed by `alpha1`.
//! - [`finetune_loss`]: squared deviation of the tuned encoder from the
//!   frozen original on clean and patched inputs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_matrix, Graph, Var};
use crate::error::{EdpaError, Result};

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(EdpaError::ShapeMismatch {
            op,
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// InfoNCE between clean (`p`, `N x d`) and patched (`p_adv`) embeddings.
/// Non-negative and bounded by `2 / tau + ln N`.
pub fn patch_contrastive_loss(g: &mut Graph, p: Var, p_adv: Var, tau: f64) -> Result<Var> {
    same_shape(g, "patch_contrastive_loss", p, p_adv)?;
    let (n, _) = g.value(p).dims2()?;
    if n == 0 {
        return Err(EdpaError::Empty("patch embeddings"));
    }
    if !(tau > 0.0) {
        return Err(EdpaError::Config(format!("tau must be positive, got {tau}")));
    }
    let sim = cosine_matrix(g, p, p_adv)?;
    let logits = g.scale(sim, 1.0 / tau);
    let lse = g.logsumexp_rows(logits)?;
    let diag = g.diag(logits)?;
    let per_row = g.sub(lse, diag)?;
    g.mean_all(per_row)
}

/// Mean absolute change of patch/token cosines, in `[0, 2]`.
pub fn alignment_shift_loss(g: &mut Graph, p: Var, p_adv: Var, w: Var) -> Result<Var> {
    same_shape(g, "alignment_shift_loss", p, p_adv)?;
    if g.value(w).dims2()?.0 == 0 {
        return Err(EdpaError::Empty("token embeddings"));
    }
    let clean = cosine_matrix(g, p, w)?;
    let adv = cosine_matrix(g, p_adv, w)?;
    let diff = g.sub(clean, adv)?;
    let mag = g.abs(diff);
    g.mean_all(mag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossId {
    Patch,
    Align,
}

impl LossId {
    fn slot(self) -> usize {
        match self {
            LossId::Patch => 0,
            LossId::Align => 1,
        }
    }
}

/// Running average of each loss's magnitude. The normaliser is a detached
/// scale: callers multiply the graph node by [`EmaState::normalize`]'s
/// factor as a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub decay: f64,
    pub floor: f64,
    pub enabled: bool,
    averages: [Option<f64>; 2],
}

impl Default for EmaState {
    fn default() -> Self {
        Self::new(0.99, 1e-8)
    }
}

impl EmaState {
    pub fn new(decay: f64, floor: f64) -> Self {
        Self {
            decay,
            floor,
            enabled: true,
            averages: [None; 2],
        }
    }

    /// Identity normaliser: every scale is 1.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn average(&self, id: LossId) -> Option<f64> {
        self.averages[id.slot()]
    }

    /// Multiplier the next call to [`normalize`](Self::normalize) would use,
    /// without updating anything.
    pub fn scale(&self, id: LossId, value: f64) -> f64 {
        if !self.enabled {
            return 1.0;
        }
        match self.averages[id.slot()] {
            None if value == 0.0 => 0.0,
            None => 1.0 / value.abs(),
            Some(avg) => 1.0 / (avg + self.floor),
        }
    }

    /// Returns `(value / (ema + floor), 1 / (ema + floor))`, then
    /// folds `|value|` into the running average. The first observation of a
    /// loss seeds the average and normalises to `sign(value)`.
    pub fn normalize(&mut self, id: LossId, value: f64) -> Result<(f64, f64)> {
        if !value.is_finite() {
            return Err(EdpaError::NonFinite {
                what: format!("{id:?} loss"),
                iteration: 0,
                detail: format!("value {value}"),
            });
        }
        if !self.enabled {
            return Ok((value, 1.0));
        }
        let slot = &mut self.averages[id.slot()];
        match *slot {
            None => {
                *slot = Some(value.abs());
                if value == 0.0 {
                    Ok((0.0, 0.0))
                } else {
                    Ok((value.signum(), 1.0 / value.abs()))
                }
            }
            Some(avg) => {
                let denom = avg + self.floor;
                *slot = Some(self.decay * avg + (1.0 - self.decay) * value.abs());
                Ok((value / denom, 1.0 / denom))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub alpha1: f64,
    pub tau: f64,
    pub ema_decay: f64,
    pub ema_floor: f64,
    pub ema_enabled: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.8,
            tau: 0.1,
            ema_decay: 0.99,
            ema_floor: 1e-8,
            ema_enabled: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha1) {
            return Err(EdpaError::Config(format!("alpha1 {} outside [0, 1]", self.alpha1)));
        }
        if !(self.tau > 0.0) {
            return Err(EdpaError::Config(format!("tau {} must be positive", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(EdpaError::Config(format!(
                "ema decay {} outside [0, 1]",
                self.ema_decay
            )));
        }
        if !(self.ema_floor >= 0.0) {
            return Err(EdpaError::Config(format!("ema floor {} negative", self.ema_floor)));
        }
        Ok(())
    }

    pub fn ema_state(&self) -> EmaState {
        let mut s = EmaState::new(self.ema_decay, self.ema_floor);
        s.enabled = self.ema_enabled;
        s
    }
}

/// Graph nodes of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub objective: Var,
    pub patch: Var,
    pub align: Var,
}

/// Raw loss values and the normalisers applied to them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValues {
    pub objective: f64,
    pub patch: f64,
    pub align: f64,
    pub patch_scale: f64,
    pub align_scale: f64,
}

/// Builds both raw losses without mixing them.
pub fn raw_losses(g: &mut Graph, p: Var, p_adv: Var, w: Var, tau: f64) -> Result<(Var, Var)> {
    let lp = patch_contrastive_loss(g, p, p_adv, tau)?;
    let la = alignment_shift_loss(g, p, p_adv, w)?;
    Ok((lp, la))
}

/// `alpha1 * s_patch * L_patch + (1 - alpha1) * s_align * L_align` with the
/// scales treated as constants.
pub fn mix_objective(
    g: &mut Graph,
    patch: Var,
    align: Var,
    alpha1: f64,
    patch_scale: f64,
    align_scale: f64,
) -> Result<Var> {
    let a = g.scale(patch, alpha1 * patch_scale);
    let b = g.scale(align, (1.0 - alpha1) * align_scale);
    g.add(a, b)
}

/// Joint objective (to be maximised) for one sample. Updates `state` with
/// the raw loss values.
pub fn edpa_objective(
    g: &mut Graph,
    p: Var,
    p_adv: Var,
    w: Var,
    cfg: &ObjectiveConfig,
    state: &mut EmaState,
) -> Result<(ObjectiveTerms, ObjectiveValues)> {
    cfg.validate()?;
    let (lp, la) = raw_losses(g, p, p_adv, w, cfg.tau)?;
    let (vp, va) = (g.item(lp), g.item(la));
    let (_, sp) = state.normalize(LossId::Patch, vp)?;
    let (_, sa) = state.normalize(LossId::Align, va)?;
    let j = mix_objective(g, lp, la, cfg.alpha1, sp, sa)?;
    let values = ObjectiveValues {
        objective: g.item(j),
        patch: vp,
        align: va,
        patch_scale: sp,
        align_scale: sa,
    };
    Ok((
        ObjectiveTerms {
            objective: j,
            patch: lp,
            align: la,
        },
        values,
    ))
}

/// Nodes of the fine-tuning loss.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneTerms {
    pub loss: Var,
    pub clean: Var,
    pub adversarial: Var,
}

/// `alpha2 |E(v) - E_orig(v)|^2 + (1 - alpha2) |E(v (+) d) - E_orig(v)|^2`
/// with squared Frobenius norms. `orig_clean` should be a constant node so
/// no gradient reaches the frozen encoder.
pub fn finetune_loss(
    g: &mut Graph,
    clean: Var,
    adversarial: Var,
    orig_clean: Var,
    alpha2: f64,
) -> Result<FinetuneTerms> {
    if !(0.0..=1.0).contains(&alpha2) {
        return Err(EdpaError::Config(format!("alpha2 {alpha2} outside [0, 1]")));
    }
    same_shape(g, "finetune_loss", clean, orig_clean)?;
    same_shape(g, "finetune_loss", adversarial, orig_clean)?;
    let dc = g.sub(clean, orig_clean)?;
    let dc2 = g.mul(dc, dc)?;
    let clean_term = g.sum_all(dc2)?;
    let da = g.sub(adversarial, orig_clean)?;
    let da2 = g.mul(da, da)?;
    let adv_term = g.sum_all(da2)?;
    let a = g.scale(clean_term, alpha2);
    let b = g.scale(adv_term, 1.0 - alpha2);
    let loss = g.add(a, b)?;
    Ok(FinetuneTerms {
        loss,
        clean: clean_term,
        adversarial: adv_term,
    })
}
