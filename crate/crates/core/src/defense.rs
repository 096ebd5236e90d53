//! Adversarial fine-tuning of the visual encoder.
//!
//! Each iteration draws a minibatch with fresh placements, moves a shared
//! universal patch a few sign-ascent steps with [`attack_step`] against the
//! encoder *as it currently is*, and then takes one Adam step on the visual
//! weights to pull both the clean and the patched embeddings back towards
//! those of the frozen original encoder. The patch restarts from uniform
//! noise every `reset_every` iterations so the encoder keeps meeting young
//! patches as well as mature ones.
//!
//! Only the visual encoder moves. Language encoder and action head are
//! read, never written, so the tuned encoder drops into the original
//! policy unchanged.

use serde::{Deserialize, Serialize};

use crate::attack::{attack_step, encode_patched, sample_batch, AttackConfig, PlacedSample, Placement};
use crate::autodiff::Graph;
use crate::config::KvConfig;
use crate::encoders::{encode_visual, Encoders, SceneSample, VisualEncoderParams};
use crate::error::{EdpaError, Result};
use crate::eval::{eval_mask, EvalConfig};
use crate::losses::{finetune_loss, EmaState, ObjectiveConfig};
use crate::optim::AdamState;
use crate::parallel;
use crate::patching::{apply_patch, init_patch, AdvPatch};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    /// Weight of the clean term; `1 - alpha2` weighs the patched term.
    pub alpha2: f64,
    /// Inner attack objective (its `alpha1`, `tau` and EMA settings).
    pub objective: ObjectiveConfig,
    /// Patch sign-step size.
    pub step_size: f64,
    /// Patch reinitialisation period, in iterations.
    pub reset_every: usize,
    pub inner_steps: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub placement: Placement,
    pub seed: u64,
    /// Allowed clean drift, see [`clean_fidelity`].
    pub fidelity_budget: f64,
    pub log_every: usize,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            alpha2: 0.5,
            objective: ObjectiveConfig::default(),
            step_size: 2.0 / 255.0,
            reset_every: 250,
            inner_steps: 1,
            learning_rate: 1e-4,
            iterations: 5000,
            batch_size: 16,
            patch_height: 14,
            patch_width: 14,
            placement: Placement::Random,
            seed: 0,
            fidelity_budget: 0.05,
            log_every: 50,
        }
    }
}

impl DefenseConfig {
    pub const KEYS: &'static [&'static str] = &[
        "alpha1",
        "alpha2",
        "tau",
        "ema",
        "ema_decay",
        "step_size",
        "reset_every",
        "inner_steps",
        "learning_rate",
        "iterations",
        "batch_size",
        "patch_size",
        "placement",
        "seed",
        "fidelity_budget",
        "log_every",
    ];

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha2) {
            return Err(EdpaError::Config(format!("alpha2 {} outside [0, 1]", self.alpha2)));
        }
        if self.reset_every == 0 {
            return Err(EdpaError::Config("reset_every must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(EdpaError::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.fidelity_budget >= 0.0) {
            return Err(EdpaError::Config(format!(
                "fidelity budget {} must be non-negative",
                self.fidelity_budget
            )));
        }
        // iterations = 0 is a legitimate no-op here, unlike for the attack.
        let mut inner = self.inner_attack();
        inner.iterations = 1;
        inner.validate()
    }

    /// The attack settings used for the inner patch updates.
    pub fn inner_attack(&self) -> AttackConfig {
        AttackConfig {
            step_size: self.step_size,
            iterations: self.iterations,
            batch_size: self.batch_size,
            inner_steps: self.inner_steps,
            patch_height: self.patch_height,
            patch_width: self.patch_width,
            objective: self.objective,
            seed: self.seed,
            snapshot_every: 0,
            placement: self.placement,
        }
    }

    pub fn apply(&mut self, cfg: &KvConfig) -> Result<()> {
        if let Some(v) = cfg.get_real("alpha1")? {
            self.objective.alpha1 = v;
        }
        if let Some(v) = cfg.get_real("alpha2")? {
            self.alpha2 = v;
        }
        if let Some(v) = cfg.get_real("tau")? {
            self.objective.tau = v;
        }
        self.objective.ema_enabled = cfg.get_or("ema", self.objective.ema_enabled)?;
        if let Some(v) = cfg.get_real("ema_decay")? {
            self.objective.ema_decay = v;
        }
        if let Some(v) = cfg.get_real("step_size")? {
            self.step_size = v;
        }
        if let Some(v) = cfg.get_real("learning_rate")? {
            self.learning_rate = v;
        }
        if let Some(v) = cfg.get_real("fidelity_budget")? {
            self.fidelity_budget = v;
        }
        if let Some(v) = cfg.raw("patch_size") {
            (self.patch_height, self.patch_width) = crate::attack::parse_patch_dims(v)?;
        }
        self.reset_every = cfg.get_or("reset_every", self.reset_every)?;
        self.inner_steps = cfg.get_or("inner_steps", self.inner_steps)?;
        self.iterations = cfg.get_or("iterations", self.iterations)?;
        self.batch_size = cfg.get_or("batch_size", self.batch_size)?;
        self.placement = cfg.get_or("placement", self.placement)?;
        self.seed = cfg.get_or("seed", self.seed)?;
        self.log_every = cfg.get_or("log_every", self.log_every)?;
        self.validate()
    }
}

/// One line of the fine-tuning log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseRecord {
    pub iteration: usize,
    /// The patch was reinitialised at the start of this iteration.
    pub reset: bool,
    /// Inner objective before the last ascent step.
    pub objective: f64,
    pub loss: f64,
    pub clean_term: f64,
    pub adversarial_term: f64,
}

/// Batch means of the fine-tuning loss, its two terms, and the gradient
/// with respect to each visual tensor.
#[derive(Debug, Clone)]
pub struct FinetuneGradients {
    pub loss: f64,
    pub clean_term: f64,
    pub adversarial_term: f64,
    pub grads: Vec<Vec<f64>>,
}

pub fn finetune_gradients(
    visual: &VisualEncoderParams,
    orig: &VisualEncoderParams,
    batch: &[PlacedSample],
    patch: &AdvPatch,
    alpha2: f64,
) -> Result<FinetuneGradients> {
    if batch.is_empty() {
        return Err(EdpaError::Empty("fine-tuning minibatch"));
    }
    let per = parallel::map_indexed(batch, |_, ps| -> Result<_> {
        let target = encode_visual(orig, &ps.sample.image)?;
        let mut g = Graph::new();
        let vv = visual.bind(&mut g, true);
        let img = g.constant(ps.sample.image.tensor().clone());
        let d = g.constant(patch.pixels().clone());
        let orig_clean = g.constant(target);
        let clean = vv.encode(&mut g, img)?;
        let adv = encode_patched(&mut g, &vv, visual.geometry.patch, clean, img, d, &ps.mask)?;
        let terms = finetune_loss(&mut g, clean, adv, orig_clean, alpha2)?;
        let mut grads = g.backward(terms.loss)?;
        let flat: Vec<Vec<f64>> = vv
            .all()
            .into_iter()
            .map(|v| grads.take(v).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
            .collect();
        Ok((g.item(terms.loss), g.item(terms.clean), g.item(terms.adversarial), flat))
    });
    let mut out = FinetuneGradients {
        loss: 0.0,
        clean_term: 0.0,
        adversarial_term: 0.0,
        grads: visual.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
    };
    for r in per {
        let (l, c, a, gs) = r?;
        out.loss += l;
        out.clean_term += c;
        out.adversarial_term += a;
        for (acc, g) in out.grads.iter_mut().zip(&gs) {
            acc.iter_mut().zip(g).for_each(|(x, y)| *x += y);
        }
    }
    let b = batch.len() as f64;
    out.loss /= b;
    out.clean_term /= b;
    out.adversarial_term /= b;
    out.grads.iter_mut().flatten().for_each(|g| *g /= b);
    Ok(out)
}

/// Resumable fine-tuning loop. The current visual weights are always the
/// last fully applied update, so a caller that sees an error can still
/// save [`DefenseRun::visual`] as the last good state.
pub struct DefenseRun<'a> {
    data: &'a [SceneSample],
    orig: &'a Encoders,
    cfg: DefenseConfig,
    attack: AttackConfig,
    /// Original language encoder and head around the visual weights being
    /// tuned; the attack sees exactly the current model.
    current: Encoders,
    patch: Option<AdvPatch>,
    ema: EmaState,
    adam: AdamState,
    patch_rng: rng::Rng,
    sampler: rng::Rng,
    iteration: usize,
    resets: usize,
}

impl<'a> DefenseRun<'a> {
    pub fn new(data: &'a [SceneSample], orig: &'a Encoders, cfg: &DefenseConfig) -> Result<Self> {
        cfg.validate()?;
        orig.visual.validate()?;
        if data.is_empty() {
            return Err(EdpaError::Empty("fine-tuning dataset"));
        }
        Ok(Self {
            data,
            orig,
            cfg: *cfg,
            attack: cfg.inner_attack(),
            current: orig.clone(),
            patch: None,
            ema: cfg.objective.ema_state(),
            adam: AdamState::default(),
            patch_rng: rng::substream(cfg.seed, 0),
            sampler: rng::substream(cfg.seed, 1),
            iteration: 0,
            resets: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    pub fn visual(&self) -> &VisualEncoderParams {
        &self.current.visual
    }

    pub fn encoders(&self) -> &Encoders {
        &self.current
    }

    pub fn patch(&self) -> Option<&AdvPatch> {
        self.patch.as_ref()
    }

    /// Number of patch (re)initialisations so far.
    pub fn resets(&self) -> usize {
        self.resets
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step(&mut self) -> Result<DefenseRecord> {
        let it = self.iteration;
        let cfg = self.cfg;
        let at = |e: EdpaError| match e {
            EdpaError::NonFinite { what, detail, .. } => EdpaError::NonFinite {
                what,
                iteration: it,
                detail,
            },
            other => other,
        };
        let batch = sample_batch(
            &mut self.sampler,
            self.data,
            cfg.batch_size,
            cfg.placement,
            (cfg.patch_height, cfg.patch_width),
        )?;
        let reset = it % cfg.reset_every == 0 || self.patch.is_none();
        if reset {
            let (_, _, c) = self.data[0].image.dims();
            let mut p = init_patch(&mut self.patch_rng, cfg.patch_height, cfg.patch_width, c);
            p.provenance = format!("defense seed={} reset at iteration {it}", cfg.seed);
            self.patch = Some(p);
            self.resets += 1;
        }
        let mut patch = self.patch.take().expect("patch initialised above");
        let mut objective = 0.0;
        for _ in 0..cfg.inner_steps {
            let (next, v) = attack_step(&patch, &batch, &self.current, &self.attack, &mut self.ema).map_err(at)?;
            patch = next;
            objective = v.objective;
        }
        let fg = finetune_gradients(&self.current.visual, &self.orig.visual, &batch, &patch, cfg.alpha2).map_err(at)?;
        self.patch = Some(patch);
        if !fg.loss.is_finite() {
            return Err(EdpaError::NonFinite {
                what: "fine-tuning loss".into(),
                iteration: it,
                detail: format!(
                    "clean term {}, adversarial term {}, batch ids {:?}",
                    fg.clean_term,
                    fg.adversarial_term,
                    batch.iter().map(|p| p.id).collect::<Vec<_>>()
                ),
            });
        }
        // Update a copy so a failed step leaves the last good weights intact.
        let mut next = self.current.visual.clone();
        {
            let mut params: Vec<_> = next.tensors_mut().into_iter().collect();
            self.adam.step(&mut params, &fg.grads, cfg.learning_rate).map_err(at)?;
        }
        self.current.visual = next;
        self.iteration += 1;
        Ok(DefenseRecord {
            iteration: it,
            reset,
            objective,
            loss: fg.loss,
            clean_term: fg.clean_term,
            adversarial_term: fg.adversarial_term,
        })
    }
}

/// Runs fine-tuning to completion, passing every record to `on_record`.
pub fn adversarial_finetune_with(
    data: &[SceneSample],
    orig: &Encoders,
    cfg: &DefenseConfig,
    mut on_record: impl FnMut(&DefenseRecord),
) -> Result<VisualEncoderParams> {
    let mut run = DefenseRun::new(data, orig, cfg)?;
    while !run.is_done() {
        on_record(&run.step()?);
    }
    Ok(run.current.visual)
}

/// Fine-tuned visual encoder plus the log rows at the configured cadence
/// (resets are always logged).
pub fn adversarial_finetune(
    data: &[SceneSample],
    orig: &Encoders,
    cfg: &DefenseConfig,
) -> Result<(VisualEncoderParams, Vec<DefenseRecord>)> {
    let mut log = Vec::new();
    let last = cfg.iterations.saturating_sub(1);
    let visual = adversarial_finetune_with(data, orig, cfg, |r| {
        let due = cfg.log_every > 0 && r.iteration % cfg.log_every == 0;
        if due || r.reset || r.iteration == last {
            log.push(*r);
        }
    })?;
    Ok((visual, log))
}

fn squared_distance(a: &crate::Tensor, b: &crate::Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Mean over `data` of `|E_tuned(v (+) patch) - E_orig(v)|^2` (squared
/// Frobenius norm), with the evaluation placements of `eval`.
pub fn adversarial_deviation(
    orig: &VisualEncoderParams,
    tuned: &VisualEncoderParams,
    data: &[SceneSample],
    patch: &AdvPatch,
    eval: &EvalConfig,
) -> Result<f64> {
    if data.is_empty() {
        return Err(EdpaError::Empty("deviation dataset"));
    }
    let per = parallel::map_indexed(data, |i, s| -> Result<f64> {
        let mask = eval_mask(eval, i, &s.image, patch)?;
        let adv = encode_visual(tuned, &apply_patch(&s.image, patch, &mask)?)?;
        Ok(squared_distance(&adv, &encode_visual(orig, &s.image)?))
    });
    let values = per.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(parallel::compensated_mean(values))
}

/// Mean over `data` of `|E_tuned(v) - E_orig(v)|^2 / (N d)`.
pub fn clean_fidelity(orig: &VisualEncoderParams, tuned: &VisualEncoderParams, data: &[SceneSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(EdpaError::Empty("fidelity dataset"));
    }
    let per = parallel::map_indexed(data, |_, s| -> Result<f64> {
        let a = encode_visual(tuned, &s.image)?;
        let b = encode_visual(orig, &s.image)?;
        Ok(squared_distance(&a, &b) / a.numel() as f64)
    });
    let values = per.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(parallel::compensated_mean(values))
}
