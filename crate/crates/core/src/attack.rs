//! Universal patch optimisation by sign-gradient ascent on the joint
//! objective, averaged over random minibatches and random placements.
//!
//! The encoders are frozen while the patch is optimised, and the visual
//! encoder works block by block, so only the blocks a placement touches
//! change. Each step re-encodes just those rows and scatters them into the
//! clean embedding matrix; the result is identical to a full re-encode.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::KvConfig;
use crate::encoders::{Encoders, SceneSample, VisualVars};
use crate::error::{EdpaError, Result};
use crate::losses::{raw_losses, EmaState, LossId, ObjectiveConfig};
use crate::parallel;
use crate::patching::{apply_patch_graph, init_patch, random_position, AdvPatch, PlacementMask};
use crate::rng;
use crate::tensor::{write_file, Tensor};

/// Where each patch copy lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Fresh uniform position per sample and iteration.
    #[default]
    Random,
    /// Always the same top-left corner `(y, x)`.
    Fixed(usize, usize),
}

impl Placement {
    pub fn mask<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        image_dims: (usize, usize),
        patch_dims: (usize, usize),
    ) -> Result<PlacementMask> {
        match *self {
            Placement::Random => random_position(rng, image_dims, patch_dims),
            Placement::Fixed(y, x) => PlacementMask::new((y, x), patch_dims, image_dims),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Random => f.write_str("random"),
            Placement::Fixed(y, x) => write!(f, "fixed:{y},{x}"),
        }
    }
}

impl FromStr for Placement {
    type Err = EdpaError;

    /// `random`, `fixed` (top-left corner) or `fixed:Y,X`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || EdpaError::Config(format!("placement {s:?}: expected random, fixed or fixed:Y,X"));
        match s.trim() {
            "random" => Ok(Placement::Random),
            "fixed" => Ok(Placement::Fixed(0, 0)),
            other => {
                let rest = other.strip_prefix("fixed:").ok_or_else(bad)?;
                let (y, x) = rest.split_once(',').ok_or_else(bad)?;
                Ok(Placement::Fixed(
                    y.trim().parse().map_err(|_| bad())?,
                    x.trim().parse().map_err(|_| bad())?,
                ))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub inner_steps: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub objective: ObjectiveConfig,
    pub seed: u64,
    /// Snapshot every this many iterations (0: initial and final only).
    pub snapshot_every: usize,
    pub placement: Placement,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            step_size: 2.0 / 255.0,
            iterations: 2000,
            batch_size: 16,
            inner_steps: 1,
            patch_height: 14,
            patch_width: 14,
            objective: ObjectiveConfig::default(),
            seed: 0,
            snapshot_every: 100,
            placement: Placement::Random,
        }
    }
}

/// Parses `N` or `HxW`.
pub fn parse_patch_dims(text: &str) -> Result<(usize, usize)> {
    let bad = || EdpaError::Config(format!("patch size {text:?}: expected N or HxW"));
    let (h, w) = match text.split_once(['x', 'X']) {
        Some((h, w)) => (
            h.trim().parse().map_err(|_| bad())?,
            w.trim().parse().map_err(|_| bad())?,
        ),
        None => {
            let n = text.trim().parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    if h == 0 || w == 0 {
        return Err(EdpaError::InvalidShape {
            shape: vec![h, w],
            reason: "patch side must be at least 1".into(),
        });
    }
    Ok((h, w))
}

impl AttackConfig {
    pub const KEYS: &'static [&'static str] = &[
        "step_size",
        "iterations",
        "batch_size",
        "inner_steps",
        "patch_size",
        "alpha1",
        "tau",
        "seed",
        "snapshot_every",
        "placement",
        "ema",
        "ema_decay",
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(EdpaError::Config(format!(
                "step size {} must be non-negative",
                self.step_size
            )));
        }
        if self.iterations == 0 || self.batch_size == 0 || self.inner_steps == 0 {
            return Err(EdpaError::Config(
                "iterations, batch size and inner steps must be at least 1".into(),
            ));
        }
        if self.patch_height == 0 || self.patch_width == 0 {
            return Err(EdpaError::Config("patch side must be at least 1".into()));
        }
        self.objective.validate()
    }

    /// Overrides defaults from `key=value` settings (see [`Self::KEYS`]).
    pub fn apply(&mut self, cfg: &KvConfig) -> Result<()> {
        if let Some(v) = cfg.get_real("step_size")? {
            self.step_size = v;
        }
        self.iterations = cfg.get_or("iterations", self.iterations)?;
        self.batch_size = cfg.get_or("batch_size", self.batch_size)?;
        self.inner_steps = cfg.get_or("inner_steps", self.inner_steps)?;
        if let Some(v) = cfg.raw("patch_size") {
            (self.patch_height, self.patch_width) = parse_patch_dims(v)?;
        }
        if let Some(v) = cfg.get_real("alpha1")? {
            self.objective.alpha1 = v;
        }
        if let Some(v) = cfg.get_real("tau")? {
            self.objective.tau = v;
        }
        self.objective.ema_enabled = cfg.get_or("ema", self.objective.ema_enabled)?;
        if let Some(v) = cfg.get_real("ema_decay")? {
            self.objective.ema_decay = v;
        }
        self.seed = cfg.get_or("seed", self.seed)?;
        self.snapshot_every = cfg.get_or("snapshot_every", self.snapshot_every)?;
        self.placement = cfg.get_or("placement", self.placement)?;
        self.validate()
    }
}

/// One minibatch element: the sample and where the patch goes.
#[derive(Debug, Clone, Copy)]
pub struct PlacedSample<'a> {
    pub id: usize,
    pub sample: &'a SceneSample,
    pub mask: PlacementMask,
}

/// Embeddings of `image (+) patch`. Rows for blocks outside the patch are
/// taken from `clean`, which must be the encoding of `image` under the same
/// weights.
pub fn encode_patched(
    g: &mut Graph,
    visual: &VisualVars,
    block: usize,
    clean: Var,
    image: Var,
    patch: Var,
    mask: &PlacementMask,
) -> Result<Var> {
    let pasted = apply_patch_graph(g, image, patch, mask)?;
    let rows = mask.touched_blocks(block);
    let local = visual.encode_rows(g, pasted, &rows)?;
    g.scatter_rows(clean, local, &rows)
}

/// Raw losses of one sample and their gradients with respect to the patch
/// pixels. A gradient is skipped (left empty) when `need` says so.
#[derive(Debug, Clone)]
pub struct SampleGradients {
    pub patch_loss: f64,
    pub align_loss: f64,
    pub patch_grad: Vec<f64>,
    pub align_grad: Vec<f64>,
}

pub fn sample_gradients(
    enc: &Encoders,
    placed: &PlacedSample,
    patch: &Tensor,
    tau: f64,
    need: (bool, bool),
) -> Result<SampleGradients> {
    let mut g = Graph::new();
    let vv = enc.visual.bind(&mut g, false);
    let lv = enc.language.bind(&mut g, false);
    let img = g.constant(placed.sample.image.tensor().clone());
    let p = vv.encode(&mut g, img)?;
    let w = lv.encode(&mut g, &placed.sample.tokens)?;
    let d = g.param(patch.clone());
    let p_adv = encode_patched(&mut g, &vv, enc.geometry().patch, p, img, d, &placed.mask)?;
    let (lp, la) = raw_losses(&mut g, p, p_adv, w, tau)?;
    let grad_of = |root: Var| -> Result<Vec<f64>> {
        let mut grads = g.backward(root)?;
        Ok(grads.take(d).unwrap_or_else(|| vec![0.0; patch.numel()]))
    };
    Ok(SampleGradients {
        patch_loss: g.item(lp),
        align_loss: g.item(la),
        patch_grad: if need.0 { grad_of(lp)? } else { Vec::new() },
        align_grad: if need.1 { grad_of(la)? } else { Vec::new() },
    })
}

/// Batch means of the raw losses and of their patch gradients.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub patch_loss: f64,
    pub align_loss: f64,
    pub patch_grad: Vec<f64>,
    pub align_grad: Vec<f64>,
}

pub fn batch_gradients(
    enc: &Encoders,
    batch: &[PlacedSample],
    patch: &Tensor,
    cfg: &ObjectiveConfig,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(EdpaError::Empty("attack minibatch"));
    }
    let need = (cfg.alpha1 != 0.0, cfg.alpha1 != 1.0);
    let per = parallel::map_indexed(batch, |_, ps| sample_gradients(enc, ps, patch, cfg.tau, need));
    let n = patch.numel();
    let mut out = BatchGradients {
        patch_loss: 0.0,
        align_loss: 0.0,
        patch_grad: vec![0.0; if need.0 { n } else { 0 }],
        align_grad: vec![0.0; if need.1 { n } else { 0 }],
    };
    for r in per {
        let r = r?;
        out.patch_loss += r.patch_loss;
        out.align_loss += r.align_loss;
        out.patch_grad.iter_mut().zip(&r.patch_grad).for_each(|(a, b)| *a += b);
        out.align_grad.iter_mut().zip(&r.align_grad).for_each(|(a, b)| *a += b);
    }
    let b = batch.len() as f64;
    out.patch_loss /= b;
    out.align_loss /= b;
    out.patch_grad
        .iter_mut()
        .chain(out.align_grad.iter_mut())
        .for_each(|v| *v /= b);
    Ok(out)
}

/// Values seen by one ascent step, all measured before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepValues {
    pub objective: f64,
    pub patch_loss: f64,
    pub align_loss: f64,
    pub patch_scale: f64,
    pub align_scale: f64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One step `delta <- clip(delta + eta * sign(grad J), 0, 1)` where `J` is
/// the batch mean of the EMA-normalised objective. `ema` is advanced with
/// the batch-mean raw losses. Returns the new patch and the pre-update
/// values.
pub fn attack_step(
    patch: &AdvPatch,
    batch: &[PlacedSample],
    enc: &Encoders,
    cfg: &AttackConfig,
    ema: &mut EmaState,
) -> Result<(AdvPatch, StepValues)> {
    let obj = &cfg.objective;
    let bg = batch_gradients(enc, batch, patch.pixels(), obj)?;
    let ids = || batch.iter().map(|p| p.id).collect::<Vec<_>>();
    if !bg.patch_loss.is_finite() || !bg.align_loss.is_finite() {
        return Err(EdpaError::NonFinite {
            what: "attack objective".into(),
            iteration: 0,
            detail: format!(
                "patch loss {}, align loss {}, batch ids {:?}",
                bg.patch_loss,
                bg.align_loss,
                ids()
            ),
        });
    }
    let (_, sp) = ema.normalize(LossId::Patch, bg.patch_loss)?;
    let (_, sa) = ema.normalize(LossId::Align, bg.align_loss)?;
    let (wp, wa) = (obj.alpha1 * sp, (1.0 - obj.alpha1) * sa);
    let objective = wp * bg.patch_loss + wa * bg.align_loss;
    let mut pixels = patch.pixels().clone();
    for (k, px) in pixels.data_mut().iter_mut().enumerate() {
        let gp = bg.patch_grad.get(k).copied().unwrap_or(0.0);
        let ga = bg.align_grad.get(k).copied().unwrap_or(0.0);
        let grad = wp * gp + wa * ga;
        if !grad.is_finite() {
            return Err(EdpaError::NonFinite {
                what: "attack gradient".into(),
                iteration: 0,
                detail: format!("pixel {k}, batch ids {:?}", ids()),
            });
        }
        *px = (*px + cfg.step_size * sign(grad)).clamp(0.0, 1.0);
    }
    debug_assert!(pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    Ok((
        AdvPatch::new(pixels, patch.provenance.clone())?,
        StepValues {
            objective,
            patch_loss: bg.patch_loss,
            align_loss: bg.align_loss,
            patch_scale: sp,
            align_scale: sa,
        },
    ))
}

/// Objective of `patch` on `batch` with the normalisers frozen at `ema`.
pub fn objective_value(
    patch: &AdvPatch,
    batch: &[PlacedSample],
    enc: &Encoders,
    cfg: &ObjectiveConfig,
    ema: &EmaState,
) -> Result<StepValues> {
    let values = parallel::map_indexed(batch, |_, ps| {
        sample_gradients(enc, ps, patch.pixels(), cfg.tau, (false, false))
    });
    let (mut lp, mut la) = (0.0, 0.0);
    for v in values {
        let v = v?;
        lp += v.patch_loss;
        la += v.align_loss;
    }
    let b = batch.len().max(1) as f64;
    let (lp, la) = (lp / b, la / b);
    let (sp, sa) = (ema.scale(LossId::Patch, lp), ema.scale(LossId::Align, la));
    Ok(StepValues {
        objective: cfg.alpha1 * sp * lp + (1.0 - cfg.alpha1) * sa * la,
        patch_loss: lp,
        align_loss: la,
        patch_scale: sp,
        align_scale: sa,
    })
}

/// Draws a minibatch with replacement and a placement for each element.
pub fn sample_batch<'a, R: Rng + ?Sized>(
    rng: &mut R,
    data: &'a [SceneSample],
    batch_size: usize,
    placement: Placement,
    patch_dims: (usize, usize),
) -> Result<Vec<PlacedSample<'a>>> {
    if data.is_empty() {
        return Err(EdpaError::Empty("dataset"));
    }
    (0..batch_size)
        .map(|_| {
            let id = rng.gen_range(0..data.len());
            let sample = &data[id];
            let (h, w, _) = sample.image.dims();
            Ok(PlacedSample {
                id,
                sample,
                mask: placement.mask(rng, (h, w), patch_dims)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub patch: AdvPatch,
    /// Pre-update objective at this iteration; `None` for the final patch.
    pub objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchTrajectory {
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryEntry {
    iteration: usize,
    file: String,
    objective: Option<f64>,
}

pub const TRAJECTORY_INDEX: &str = "trajectory.json";

impl PatchTrajectory {
    pub fn final_patch(&self) -> Option<&AdvPatch> {
        self.snapshots.last().map(|s| &s.patch)
    }

    pub fn patches(&self) -> impl Iterator<Item = &AdvPatch> {
        self.snapshots.iter().map(|s| &s.patch)
    }

    fn push(&mut self, snap: Snapshot) {
        debug_assert!(self.snapshots.last().map_or(true, |s| s.iteration < snap.iteration));
        self.snapshots.push(snap);
    }

    /// One `EDT1` file (plus sidecar) per snapshot and a JSON index.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut entries = Vec::new();
        for s in &self.snapshots {
            let file = format!("snapshot_{:06}.edt1", s.iteration);
            s.patch.save(&dir.join(&file))?;
            entries.push(TrajectoryEntry {
                iteration: s.iteration,
                file,
                objective: s.objective,
            });
        }
        let json = serde_json::to_vec_pretty(&entries).expect("trajectory index serialises");
        write_file(&dir.join(TRAJECTORY_INDEX), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(TRAJECTORY_INDEX);
        let bytes = std::fs::read(&path).map_err(|e| EdpaError::io(&path, e))?;
        let entries: Vec<TrajectoryEntry> =
            serde_json::from_slice(&bytes).map_err(|e| EdpaError::format(path.display().to_string(), e.to_string()))?;
        let mut out = Self::default();
        for e in entries {
            if out.snapshots.last().is_some_and(|s| s.iteration >= e.iteration) {
                return Err(EdpaError::format(
                    path.display().to_string(),
                    format!("iteration {} is not increasing", e.iteration),
                ));
            }
            out.snapshots.push(Snapshot {
                iteration: e.iteration,
                patch: AdvPatch::load(&dir.join(&e.file))?,
                objective: e.objective,
            });
        }
        Ok(out)
    }
}

/// One line of the attack log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub iteration: usize,
    pub inner: usize,
    pub objective: f64,
    pub patch_loss: f64,
    pub align_loss: f64,
    pub ema_patch: Option<f64>,
    pub ema_align: Option<f64>,
}

/// Resumable attack loop; [`edpa_attack`] drives it to completion.
pub struct AttackRun<'a> {
    data: &'a [SceneSample],
    enc: &'a Encoders,
    cfg: AttackConfig,
    patch: AdvPatch,
    ema: EmaState,
    sampler: rng::Rng,
    iteration: usize,
    trajectory: PatchTrajectory,
}

impl<'a> AttackRun<'a> {
    pub fn new(data: &'a [SceneSample], enc: &'a Encoders, cfg: &AttackConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(EdpaError::Empty("attack dataset"));
        }
        let (_, _, c) = data[0].image.dims();
        let mut init_rng = rng::substream(cfg.seed, 0);
        let mut patch = init_patch(&mut init_rng, cfg.patch_height, cfg.patch_width, c);
        patch.provenance = format!(
            "edpa attack seed={} iterations={} alpha1={} patch={}x{}",
            cfg.seed, cfg.iterations, cfg.objective.alpha1, cfg.patch_height, cfg.patch_width
        );
        Ok(Self {
            data,
            enc,
            cfg: *cfg,
            patch,
            ema: cfg.objective.ema_state(),
            sampler: rng::substream(cfg.seed, 1),
            iteration: 0,
            trajectory: PatchTrajectory::default(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    pub fn patch(&self) -> &AdvPatch {
        &self.patch
    }

    pub fn ema(&self) -> &EmaState {
        &self.ema
    }

    /// One outer iteration: a fresh minibatch and `inner_steps` ascent steps
    /// with placements held fixed.
    pub fn step(&mut self) -> Result<Vec<AttackRecord>> {
        let cfg = self.cfg;
        let it = self.iteration;
        let batch = sample_batch(
            &mut self.sampler,
            self.data,
            cfg.batch_size,
            cfg.placement,
            (cfg.patch_height, cfg.patch_width),
        )?;
        let mut records = Vec::with_capacity(cfg.inner_steps);
        for k in 0..cfg.inner_steps {
            let (next, v) = attack_step(&self.patch, &batch, self.enc, &cfg, &mut self.ema).map_err(|e| match e {
                EdpaError::NonFinite { what, detail, .. } => EdpaError::NonFinite {
                    what,
                    iteration: it,
                    detail,
                },
                other => other,
            })?;
            let snap_due = k == 0 && (it == 0 || (cfg.snapshot_every > 0 && it % cfg.snapshot_every == 0));
            if snap_due {
                self.trajectory.push(Snapshot {
                    iteration: it,
                    patch: self.patch.clone(),
                    objective: Some(v.objective),
                });
            }
            self.patch = next;
            records.push(AttackRecord {
                iteration: it,
                inner: k,
                objective: v.objective,
                patch_loss: v.patch_loss,
                align_loss: v.align_loss,
                ema_patch: self.ema.average(LossId::Patch),
                ema_align: self.ema.average(LossId::Align),
            });
        }
        self.iteration += 1;
        Ok(records)
    }

    /// Snapshots so far plus the current patch as the last entry.
    pub fn trajectory(&self) -> PatchTrajectory {
        let mut t = self.trajectory.clone();
        t.push(Snapshot {
            iteration: self.iteration.max(t.snapshots.last().map_or(0, |s| s.iteration + 1)),
            patch: self.patch.clone(),
            objective: None,
        });
        t
    }
}

/// Runs the full attack, passing every log record to `on_record`.
pub fn edpa_attack_with(
    data: &[SceneSample],
    enc: &Encoders,
    cfg: &AttackConfig,
    mut on_record: impl FnMut(&AttackRecord),
) -> Result<PatchTrajectory> {
    let mut run = AttackRun::new(data, enc, cfg)?;
    while !run.is_done() {
        for r in run.step()? {
            on_record(&r);
        }
    }
    Ok(run.trajectory())
}

pub fn edpa_attack(data: &[SceneSample], enc: &Encoders, cfg: &AttackConfig) -> Result<PatchTrajectory> {
    edpa_attack_with(data, enc, cfg, |_| {})
}
