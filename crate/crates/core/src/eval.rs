//! Metrics on the surrogate task.
//!
//! A prediction "fails" when its action error `||a_pred - a_true||_2`
//! exceeds a threshold calibrated on clean held-out data, which turns the
//! regression policy into a success/failure signal comparable across clean,
//! random-patch and optimised-patch conditions.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{edpa_attack, AttackConfig, Placement};
use crate::autodiff::Graph;
use crate::config::KvConfig;
use crate::encoders::{action_head, encode_language, encode_visual, Encoders, SceneSample};
use crate::error::{EdpaError, Result};
use crate::losses::raw_losses;
use crate::parallel::{self, CompensatedSum};
use crate::patching::{apply_patch, gaussian_patch, AdvPatch, Image, PlacementMask};
use crate::pixmap;
use crate::rng;
use crate::tensor::{write_file, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clean,
    Random,
    Edpa,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Clean => "clean",
            Condition::Random => "random",
            Condition::Edpa => "edpa",
        })
    }
}

impl FromStr for Condition {
    type Err = EdpaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Condition::Clean),
            "random" => Ok(Condition::Random),
            "edpa" => Ok(Condition::Edpa),
            other => Err(EdpaError::Config(format!("unknown condition {other:?}"))),
        }
    }
}

/// Aggregate metrics of one condition on one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub condition: Condition,
    /// `failures / samples`.
    pub failure_rate: f64,
    pub failures: usize,
    pub samples: usize,
    pub mean_action_error: f64,
    /// `mean_i cos(p_i, p'_i)`, averaged over samples (1 for clean).
    pub mean_diag_cos: f64,
    /// Alignment-shift loss, averaged over samples.
    pub align_shift: f64,
    /// `alpha1 * L_patch + (1 - alpha1) * L_align` on raw (unnormalised)
    /// losses, averaged over samples.
    pub objective: f64,
    pub seed: u64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub placement: Placement,
    pub seed: u64,
    pub alpha1: f64,
    pub tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            placement: Placement::Random,
            seed: 0,
            alpha1: 0.8,
            tau: 0.1,
        }
    }
}

impl EvalConfig {
    pub const KEYS: &'static [&'static str] = &["placement", "seed", "alpha1", "tau"];

    /// Overrides defaults from `key=value` settings (see [`Self::KEYS`]).
    pub fn apply(&mut self, cfg: &KvConfig) -> Result<()> {
        self.placement = cfg.get_or("placement", self.placement)?;
        self.seed = cfg.get_or("seed", self.seed)?;
        if let Some(v) = cfg.get_real("alpha1")? {
            self.alpha1 = v;
        }
        if let Some(v) = cfg.get_real("tau")? {
            self.tau = v;
        }
        if !(0.0..=1.0).contains(&self.alpha1) || !(self.tau > 0.0) {
            return Err(EdpaError::Config(format!(
                "alpha1 {} / tau {} out of range",
                self.alpha1, self.tau
            )));
        }
        Ok(())
    }
}

/// `||a_pred - a_true||_2` for one prediction.
pub fn action_error(pred: &Tensor, truth: &[f64]) -> f64 {
    pred.data()
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    /// Clean failure rate at `threshold`.
    pub failure_rate: f64,
    pub target: f64,
}

/// Smallest error threshold whose clean failure rate (errors strictly
/// above it) is at most `target`. With `m = floor(target * n)` that is the
/// `(n - m)`-th smallest error.
pub fn threshold_from_errors(errors: &[f64], target: f64) -> Result<Calibration> {
    if errors.is_empty() {
        return Err(EdpaError::Empty("calibration data"));
    }
    if !(target > 0.0 && target < 0.5) {
        return Err(EdpaError::Config(format!(
            "target failure rate {target} outside (0, 0.5)"
        )));
    }
    if let Some(bad) = errors.iter().find(|e| !e.is_finite()) {
        return Err(EdpaError::NonFinite {
            what: "action error".into(),
            iteration: 0,
            detail: format!("{bad}"),
        });
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let m = (target * n as f64).floor() as usize;
    let threshold = sorted[n - m - 1];
    let failures = sorted.iter().filter(|&&e| e > threshold).count();
    Ok(Calibration {
        threshold,
        failure_rate: failures as f64 / n as f64,
        target,
    })
}

/// Clean action errors of `enc` on `data`, in order.
pub fn clean_errors(enc: &Encoders, data: &[SceneSample]) -> Result<Vec<f64>> {
    parallel::map_indexed(data, |_, s| {
        let p = encode_visual(&enc.visual, &s.image)?;
        let w = encode_language(&enc.language, &s.tokens)?;
        Ok(action_error(&action_head(&enc.head, &p, &w)?, &s.action))
    })
    .into_iter()
    .collect()
}

pub fn calibrate_failure_threshold(enc: &Encoders, data: &[SceneSample], target: f64) -> Result<Calibration> {
    threshold_from_errors(&clean_errors(enc, data)?, target)
}

/// Per-sample outcome behind a [`MetricsRecord`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOutcome {
    pub error: f64,
    pub failed: bool,
    pub diag_cos: f64,
    pub align_shift: f64,
    pub patch_loss: f64,
}

fn row_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na.max(1e-12) * nb.max(1e-12))).clamp(-1.0, 1.0)
}

/// `mean_i cos(p_i, q_i)`.
pub fn mean_diagonal_cosine(p: &Tensor, q: &Tensor) -> f64 {
    let (n, _) = p.dims2().expect("embedding matrix");
    (0..n).map(|i| row_cosine(p.row(i), q.row(i))).sum::<f64>() / n as f64
}

/// Placement for sample `index` under `cfg`; identical across conditions
/// so clean/random/optimised runs see the same rectangles.
pub fn eval_mask(cfg: &EvalConfig, index: usize, image: &Image, patch: &AdvPatch) -> Result<PlacementMask> {
    let (h, w, _) = image.dims();
    let (ph, pw, _) = patch.dims();
    let mut r = rng::substream(rng::derive(cfg.seed, 0xE7A1), index as u64);
    cfg.placement.mask(&mut r, (h, w), (ph, pw))
}

pub fn evaluate_sample(
    enc: &Encoders,
    sample: &SceneSample,
    patch: Option<(&AdvPatch, &PlacementMask)>,
    threshold: f64,
    tau: f64,
) -> Result<SampleOutcome> {
    let p = encode_visual(&enc.visual, &sample.image)?;
    let w = encode_language(&enc.language, &sample.tokens)?;
    let p_adv = match patch {
        Some((patch, mask)) => encode_visual(&enc.visual, &apply_patch(&sample.image, patch, mask)?)?,
        None => p.clone(),
    };
    let pred = action_head(&enc.head, &p_adv, &w)?;
    let error = action_error(&pred, &sample.action);
    let mut g = Graph::new();
    let (a, b, c) = (g.constant(p.clone()), g.constant(p_adv.clone()), g.constant(w));
    let (lp, la) = raw_losses(&mut g, a, b, c, tau)?;
    Ok(SampleOutcome {
        error,
        failed: error > threshold,
        diag_cos: mean_diagonal_cosine(&p, &p_adv),
        align_shift: g.item(la),
        patch_loss: g.item(lp),
    })
}

/// Per-sample outcomes in dataset order.
pub fn evaluate_outcomes(
    enc: &Encoders,
    data: &[SceneSample],
    patch: Option<&AdvPatch>,
    threshold: f64,
    cfg: &EvalConfig,
) -> Result<Vec<SampleOutcome>> {
    parallel::map_indexed(data, |i, s| match patch {
        Some(patch) => {
            let mask = eval_mask(cfg, i, &s.image, patch)?;
            evaluate_sample(enc, s, Some((patch, &mask)), threshold, cfg.tau)
        }
        None => evaluate_sample(enc, s, None, threshold, cfg.tau),
    })
    .into_iter()
    .collect()
}

pub fn aggregate(condition: Condition, outcomes: &[SampleOutcome], threshold: f64, cfg: &EvalConfig) -> MetricsRecord {
    let n = outcomes.len();
    let failures = outcomes.iter().filter(|o| o.failed).count();
    let mean = |f: &dyn Fn(&SampleOutcome) -> f64| {
        let mut s = CompensatedSum::default();
        outcomes.iter().for_each(|o| s.add(f(o)));
        s.value() / n.max(1) as f64
    };
    let patch_loss = mean(&|o| o.patch_loss);
    let align = mean(&|o| o.align_shift);
    MetricsRecord {
        condition,
        failure_rate: failures as f64 / n.max(1) as f64,
        failures,
        samples: n,
        mean_action_error: mean(&|o| o.error),
        mean_diag_cos: mean(&|o| o.diag_cos),
        align_shift: align,
        objective: cfg.alpha1 * patch_loss + (1.0 - cfg.alpha1) * align,
        seed: cfg.seed,
        threshold,
    }
}

/// Runs the policy on every sample under `condition`. Patched conditions
/// require a patch; placements are drawn per sample from `cfg.seed`.
pub fn evaluate(
    enc: &Encoders,
    data: &[SceneSample],
    condition: Condition,
    patch: Option<&AdvPatch>,
    threshold: f64,
    cfg: &EvalConfig,
) -> Result<MetricsRecord> {
    if data.is_empty() {
        return Err(EdpaError::Empty("evaluation data"));
    }
    let patch = match condition {
        Condition::Clean => None,
        _ => Some(patch.ok_or_else(|| EdpaError::Config(format!("condition {condition} needs a patch")))?),
    };
    let outcomes = evaluate_outcomes(enc, data, patch, threshold, cfg)?;
    Ok(aggregate(condition, &outcomes, threshold, cfg))
}

/// Gaussian-noise patch for the random baseline, seeded independently of
/// the attack streams.
pub fn random_baseline_patch(seed: u64, dims: (usize, usize, usize)) -> AdvPatch {
    let mut r = rng::substream(rng::derive(seed, 0xBA5E), 0);
    let mut p = gaussian_patch(&mut r, dims.0, dims.1, dims.2);
    p.provenance = format!("gaussian baseline seed={seed}");
    p
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub condition: Condition,
    pub runs: usize,
    pub failure_rate: f64,
    pub failure_rate_std: f64,
    pub mean_action_error: f64,
    pub mean_diag_cos: f64,
    pub align_shift: f64,
    pub objective: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn summarize(records: &[MetricsRecord]) -> Result<MetricsSummary> {
    let first = records.first().ok_or(EdpaError::Empty("metrics records"))?;
    if records.iter().any(|r| r.condition != first.condition) {
        return Err(EdpaError::Config(
            "cannot average records of different conditions".into(),
        ));
    }
    let col = |f: fn(&MetricsRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let (fr, fr_std) = mean_std(&col(|r| r.failure_rate));
    Ok(MetricsSummary {
        condition: first.condition,
        runs: records.len(),
        failure_rate: fr,
        failure_rate_std: fr_std,
        mean_action_error: mean_std(&col(|r| r.mean_action_error)).0,
        mean_diag_cos: mean_std(&col(|r| r.mean_diag_cos)).0,
        align_shift: mean_std(&col(|r| r.align_shift)).0,
        objective: mean_std(&col(|r| r.objective)).0,
    })
}

/// Everything needed to evaluate a patch against one victim.
#[derive(Debug, Clone, Copy)]
pub struct Setup<'a> {
    pub encoders: &'a Encoders,
    pub data: &'a [SceneSample],
    pub threshold: f64,
}

/// Evaluates `patch` on its source setup and on a target setup.
pub fn transfer_eval(
    patch: &AdvPatch,
    source: &Setup,
    target: &Setup,
    cfg: &EvalConfig,
) -> Result<(MetricsRecord, MetricsRecord)> {
    let (ph, pw, pc) = patch.dims();
    for s in [source, target] {
        let first = s.data.first().ok_or(EdpaError::Empty("transfer data"))?;
        let (h, w, c) = first.image.dims();
        if ph > h || pw > w || pc != c {
            return Err(EdpaError::OutOfBounds {
                what: "transferred patch",
                inner: vec![ph, pw, pc],
                outer: vec![h, w, c],
            });
        }
    }
    let src = evaluate(
        source.encoders,
        source.data,
        Condition::Edpa,
        Some(patch),
        source.threshold,
        cfg,
    )?;
    let tgt = evaluate(
        target.encoders,
        target.data,
        Condition::Edpa,
        Some(patch),
        target.threshold,
        cfg,
    )?;
    Ok((src, tgt))
}

/// Inputs shared by the ablation sweeps. Each sweep point trains one patch
/// per seed on `train` and evaluates it on `test`.
#[derive(Debug, Clone)]
pub struct AblationSetup<'a> {
    pub encoders: &'a Encoders,
    pub train: &'a [SceneSample],
    pub test: &'a [SceneSample],
    pub threshold: f64,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub parameter: String,
    pub value: f64,
    pub runs: Vec<MetricsRecord>,
    pub summary: MetricsSummary,
}

/// Square side covering `fraction` of an `h x w` image, rounded to the
/// nearest integer.
pub fn side_for_fraction(fraction: f64, h: usize, w: usize) -> Result<usize> {
    if !(fraction > 0.0) || fraction > 1.0 {
        return Err(EdpaError::Config(format!("area fraction {fraction} outside (0, 1]")));
    }
    let side = (fraction * (h * w) as f64).sqrt().round() as usize;
    if side == 0 {
        return Err(EdpaError::InvalidShape {
            shape: vec![0, 0],
            reason: format!("area fraction {fraction} rounds to a zero-side patch"),
        });
    }
    Ok(side.min(h).min(w))
}

fn run_point(setup: &AblationSetup, parameter: &str, value: f64, attack: AttackConfig) -> Result<AblationPoint> {
    if setup.seeds.is_empty() {
        return Err(EdpaError::Empty("ablation seeds"));
    }
    let runs = setup
        .seeds
        .iter()
        .map(|&seed| {
            let cfg = AttackConfig { seed, ..attack };
            let traj = edpa_attack(setup.train, setup.encoders, &cfg)?;
            let patch = traj.final_patch().expect("trajectory has a final patch");
            let eval = EvalConfig { seed, ..setup.eval };
            evaluate(
                setup.encoders,
                setup.test,
                Condition::Edpa,
                Some(patch),
                setup.threshold,
                &eval,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationPoint {
        parameter: parameter.into(),
        value,
        summary: summarize(&runs)?,
        runs,
    })
}

/// One point per area fraction, each a square patch of side
/// `round(sqrt(fraction * H * W))`.
pub fn ablate_patch_size(setup: &AblationSetup, fractions: &[f64]) -> Result<Vec<AblationPoint>> {
    let (h, w, _) = setup
        .train
        .first()
        .ok_or(EdpaError::Empty("ablation data"))?
        .image
        .dims();
    fractions
        .iter()
        .map(|&f| {
            let side = side_for_fraction(f, h, w)?;
            let cfg = AttackConfig {
                patch_height: side,
                patch_width: side,
                ..setup.attack
            };
            run_point(setup, "area_fraction", f, cfg)
        })
        .collect()
}

pub fn ablate_alpha1(setup: &AblationSetup, values: &[f64]) -> Result<Vec<AblationPoint>> {
    values
        .iter()
        .map(|&a| {
            if !(0.0..=1.0).contains(&a) {
                return Err(EdpaError::Config(format!("alpha1 {a} outside [0, 1]")));
            }
            let mut cfg = setup.attack;
            cfg.objective.alpha1 = a;
            let eval = EvalConfig {
                alpha1: a,
                ..setup.eval
            };
            run_point(&AblationSetup { eval, ..setup.clone() }, "alpha1", a, cfg)
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    parameter: &'a str,
    value: f64,
    seed: String,
    condition: Condition,
    failure_rate: f64,
    failures: Option<usize>,
    samples: Option<usize>,
    mean_action_error: f64,
    mean_diag_cos: f64,
    align_shift: f64,
    objective: f64,
    threshold: Option<f64>,
}

/// Per-seed rows followed by one `seed = mean` row per point.
pub fn ablation_csv(points: &[AblationPoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| EdpaError::format("ablation csv", e.to_string());
    for p in points {
        for r in &p.runs {
            w.serialize(CsvRow {
                parameter: &p.parameter,
                value: p.value,
                seed: r.seed.to_string(),
                condition: r.condition,
                failure_rate: r.failure_rate,
                failures: Some(r.failures),
                samples: Some(r.samples),
                mean_action_error: r.mean_action_error,
                mean_diag_cos: r.mean_diag_cos,
                align_shift: r.align_shift,
                objective: r.objective,
                threshold: Some(r.threshold),
            })
            .map_err(csv_err)?;
        }
        let s = &p.summary;
        w.serialize(CsvRow {
            parameter: &p.parameter,
            value: p.value,
            seed: "mean".into(),
            condition: s.condition,
            failure_rate: s.failure_rate,
            failures: None,
            samples: None,
            mean_action_error: s.mean_action_error,
            mean_diag_cos: s.mean_diag_cos,
            align_shift: s.align_shift,
            objective: s.objective,
            threshold: None,
        })
        .map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| EdpaError::format("ablation csv", e.to_string()))
}

/// Metrics records as CSV, one row each.
pub fn records_csv(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)
            .map_err(|e| EdpaError::format("metrics csv", e.to_string()))?;
    }
    w.into_inner()
        .map_err(|e| EdpaError::format("metrics csv", e.to_string()))
}

/// Patch/token cosine matrices of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `N x M`, entry `(i, j) = cos(p_i, w_j)`.
    pub clean: Tensor,
    pub patched: Option<Tensor>,
    /// Blocks covered by the patch.
    pub covered: Vec<usize>,
}

impl Heatmap {
    /// Mean `|clean - patched|`, i.e. the alignment-shift loss.
    pub fn mean_abs_difference(&self) -> Option<f64> {
        self.patched.as_ref().map(|p| {
            let n = p.numel() as f64;
            p.data()
                .iter()
                .zip(self.clean.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / n
        })
    }

    /// Per token: share of its rescaled `(cos + 1) / 2` mass that falls on
    /// patch-covered blocks of `matrix`.
    pub fn covered_mass(&self, matrix: &Tensor) -> Vec<f64> {
        let (n, m) = matrix.dims2().expect("heatmap matrix");
        (0..m)
            .map(|j| {
                let col = |i: usize| (matrix.row(i)[j] + 1.0) / 2.0;
                let total: f64 = (0..n).map(col).sum();
                let covered: f64 = self.covered.iter().map(|&i| col(i)).sum();
                if total > 0.0 {
                    covered / total
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn to_csv(matrix: &Tensor) -> Vec<u8> {
        let (n, m) = matrix.dims2().expect("heatmap matrix");
        let mut out = Vec::new();
        let header: Vec<String> = (0..m).map(|j| format!("token_{j}")).collect();
        writeln!(out, "patch,{}", header.join(",")).unwrap();
        for i in 0..n {
            let row: Vec<String> = matrix.row(i).iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{i},{}", row.join(",")).unwrap();
        }
        out
    }

    /// Grayscale image, one pixel per entry, `[-1, 1] -> [0, 255]`.
    pub fn to_pgm(matrix: &Tensor) -> Vec<u8> {
        let (n, m) = matrix.dims2().expect("heatmap matrix");
        let scaled: Vec<f64> = matrix.data().iter().map(|v| (v + 1.0) / 2.0).collect();
        pixmap::encode_gray(n, m, &scaled)
    }

    /// Writes `<stem>_clean.{csv,pgm}` and, if patched, the patched pair.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_file(&dir.join(format!("{stem}_clean.csv")), &Self::to_csv(&self.clean))?;
        write_file(&dir.join(format!("{stem}_clean.pgm")), &Self::to_pgm(&self.clean))?;
        if let Some(p) = &self.patched {
            write_file(&dir.join(format!("{stem}_patched.csv")), &Self::to_csv(p))?;
            write_file(&dir.join(format!("{stem}_patched.pgm")), &Self::to_pgm(p))?;
        }
        Ok(())
    }
}

/// `N x M` matrix of `cos(p_i, w_j)`.
pub fn cosine_table(p: &Tensor, w: &Tensor) -> Tensor {
    let (n, _) = p.dims2().expect("patch embeddings");
    let (m, _) = w.dims2().expect("token embeddings");
    Tensor::from_fn(&[n, m], |k| row_cosine(p.row(k / m), w.row(k % m)))
}

pub fn alignment_heatmap(
    enc: &Encoders,
    sample: &SceneSample,
    patch: Option<(&AdvPatch, &PlacementMask)>,
) -> Result<Heatmap> {
    let p = encode_visual(&enc.visual, &sample.image)?;
    let w = encode_language(&enc.language, &sample.tokens)?;
    let (patched, covered) = match patch {
        Some((patch, mask)) => {
            let q = encode_visual(&enc.visual, &apply_patch(&sample.image, patch, mask)?)?;
            (Some(cosine_table(&q, &w)), mask.touched_blocks(enc.geometry().patch))
        }
        None => (None, Vec::new()),
    };
    Ok(Heatmap {
        clean: cosine_table(&p, &w),
        patched,
        covered,
    })
}
