use std::path::{Path, PathBuf};

use edpa::attack::{parse_patch_dims, AttackConfig, AttackRun};
use edpa::checkpoint::Checkpoint;
use edpa::config::KvConfig;
use edpa::data::{generate_dataset, Dataset, DatasetSpec};
use edpa::defense::{clean_fidelity, DefenseConfig, DefenseRun};
use edpa::encoders::{pretrain as train_encoders, Geometry, PretrainConfig, SceneSample};
use edpa::eval::{
    ablate_alpha1, ablate_patch_size, ablation_csv, alignment_heatmap, calibrate_failure_threshold, eval_mask,
    evaluate, random_baseline_patch, records_csv, summarize, transfer_eval, AblationSetup, Condition, EvalConfig,
    MetricsRecord, Setup,
};
use edpa::patching::AdvPatch;
use edpa::tensor::write_file;
use edpa::{EdpaError, Result};
use log::{info, warn};
use serde_json::json;

use crate::output::{prefix_csv_column, sibling, tagged, JsonLines};
use crate::{AblationKind, Common};

/// Keys for the encoder shape; image size and action width come from the data.
const GEOMETRY_KEYS: &[&str] = &["block", "dim", "max_tokens"];

const SIZE_GRID: [f64; 4] = [0.02, 0.04, 0.08, 0.10];
const ALPHA_GRID: [f64; 5] = [0.0, 0.2, 0.5, 0.8, 1.0];

/// Loads `base` (if any), overlays `--config`, then `--seed`, and rejects
/// keys outside `known` (unless `known` is empty).
fn settings(common: &Common, base: Option<&Path>, known: &[&str]) -> Result<KvConfig> {
    let mut kv = match base {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    if let Some(path) = &common.config {
        let over = KvConfig::load(path)?;
        for k in over.keys() {
            kv.set(k, over.raw(k).unwrap_or_default());
        }
    }
    if let Some(seed) = common.seed {
        kv.set("seed", seed.to_string());
    }
    if let Some(pos) = &common.fixed_position {
        if !known.contains(&"placement") {
            return Err(EdpaError::Config(
                "--fixed-position does not apply to this command".into(),
            ));
        }
        kv.set("placement", format!("fixed:{pos}"));
    }
    if !known.is_empty() {
        kv.reject_unknown(known)?;
    }
    Ok(kv)
}

fn load_samples(dir: &Path) -> Result<Vec<SceneSample>> {
    let ds = Dataset::load(dir)?;
    if ds.is_empty() {
        return Err(EdpaError::Empty("dataset"));
    }
    Ok(ds.samples())
}

fn eval_config(kv: &KvConfig) -> Result<EvalConfig> {
    let mut cfg = EvalConfig::default();
    cfg.apply(kv)?;
    Ok(cfg)
}

fn geometry_for(samples: &[SceneSample], kv: &KvConfig) -> Result<Geometry> {
    let first = samples.first().ok_or(EdpaError::Empty("pretraining dataset"))?;
    let (height, width, channels) = first.image.dims();
    let longest = samples.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
    let defaults = Geometry::default();
    let geometry = Geometry {
        height,
        width,
        channels,
        patch: kv.get_or("block", defaults.patch)?,
        dim: kv.get_or("dim", defaults.dim)?,
        max_tokens: kv.get_or("max_tokens", defaults.max_tokens.max(longest))?,
        vocab: defaults.vocab,
        action_dim: first.action.len(),
    };
    geometry.validate()?;
    Ok(geometry)
}

pub fn gen_data(common: &Common, spec: Option<&Path>, out: &Path) -> Result<()> {
    let kv = settings(common, spec, &[])?;
    let spec = DatasetSpec::from_config(&kv)?;
    let ds = generate_dataset(&spec)?;
    ds.save(out)?;
    info!("wrote {} suite-{} scenes to {}", ds.len(), spec.suite, out.display());
    Ok(())
}

pub fn pretrain(
    common: &Common,
    data: &[PathBuf],
    calibrate: Option<&Path>,
    target_fr: f64,
    out: &Path,
    log: Option<PathBuf>,
) -> Result<()> {
    let known: Vec<&str> = PretrainConfig::KEYS.iter().chain(GEOMETRY_KEYS).copied().collect();
    let kv = settings(common, None, &known)?;
    let mut cfg = PretrainConfig::default();
    cfg.apply(&kv)?;

    let mut samples = Vec::new();
    for dir in data {
        samples.extend(load_samples(dir)?);
    }
    let geometry = geometry_for(&samples, &kv)?;
    // Validate the calibration set before spending minutes on training.
    let held_out = calibrate.map(load_samples).transpose()?;

    let mut log = JsonLines::create(&log.unwrap_or_else(|| sibling(out, ".log.jsonl")))?;
    log.write(&json!({ "event": "config", "pretrain": cfg, "geometry": geometry, "samples": samples.len() }))?;
    info!(
        "pretraining on {} samples for {} iterations",
        samples.len(),
        cfg.iterations
    );
    let (encoders, records) = train_encoders(&samples, geometry, &cfg)?;
    for r in &records {
        log.write(&tagged(("event", "step"), r))?;
    }

    let mut ckpt = Checkpoint::new(encoders);
    let data_list: Vec<String> = data.iter().map(|d| d.display().to_string()).collect();
    ckpt.meta.insert("data".into(), data_list.join(","));
    ckpt.meta.insert("pretrain.seed".into(), cfg.seed.to_string());
    ckpt.meta
        .insert("pretrain.iterations".into(), cfg.iterations.to_string());
    ckpt.meta
        .insert("pretrain.learning_rate".into(), cfg.learning_rate.to_string());
    if let (Some(held), Some(dir)) = (held_out, calibrate) {
        let cal = calibrate_failure_threshold(&ckpt.encoders, &held, target_fr)?;
        if cal.failure_rate > target_fr {
            warn!(
                "target clean failure rate {target_fr} unattainable; best is {}",
                cal.failure_rate
            );
        }
        info!(
            "failure threshold {:.5} (clean failure rate {:.3})",
            cal.threshold, cal.failure_rate
        );
        log.write(&tagged(("event", "calibration"), &cal))?;
        ckpt.failure_threshold = Some(cal.threshold);
        ckpt.meta.insert("calibration.data".into(), dir.display().to_string());
        ckpt.meta
            .insert("calibration.failure_rate".into(), cal.failure_rate.to_string());
    }
    ckpt.save(out)
}

pub fn attack(
    common: &Common,
    data: &Path,
    ckpt: &Path,
    out: &Path,
    trajectory: Option<PathBuf>,
    log: Option<PathBuf>,
) -> Result<()> {
    let kv = settings(common, None, AttackConfig::KEYS)?;
    let mut cfg = AttackConfig::default();
    cfg.apply(&kv)?;
    let ckpt = Checkpoint::load(ckpt)?;
    let samples = load_samples(data)?;
    let traj_dir = trajectory.unwrap_or_else(|| sibling(out, ".trajectory"));
    let mut log = JsonLines::create(&log.unwrap_or_else(|| sibling(out, ".log.jsonl")))?;
    log.write(&tagged(("event", "config"), &cfg))?;

    let mut run = AttackRun::new(&samples, &ckpt.encoders, &cfg)?;
    let progress_every = (cfg.iterations / 10).max(1);
    let mut iteration = 0;
    while !run.is_done() {
        let records = match run.step() {
            Ok(r) => r,
            Err(e) => {
                // Keep everything up to the failure so the run can be inspected.
                run.trajectory().save(&traj_dir)?;
                run.patch().save(out)?;
                log.write(&json!({ "event": "error", "iteration": iteration, "message": e.to_string() }))?;
                return Err(e);
            }
        };
        for r in &records {
            log.write(&tagged(("event", "step"), r))?;
        }
        if iteration % progress_every == 0 {
            if let Some(r) = records.last() {
                info!("iteration {iteration}: J = {:.5}", r.objective);
            }
        }
        iteration += 1;
    }
    let traj = run.trajectory();
    traj.save(&traj_dir)?;
    let patch = traj.final_patch().expect("trajectory ends with the current patch");
    patch.save(out)?;
    write_file(&sibling(out, ".ppm"), &patch.to_ppm())?;
    info!(
        "patch written to {} ({} snapshots)",
        out.display(),
        traj.snapshots.len()
    );
    Ok(())
}

pub fn finetune(common: &Common, data: &Path, ckpt: &Path, out: &Path, log: Option<PathBuf>) -> Result<()> {
    let kv = settings(common, None, DefenseConfig::KEYS)?;
    let mut cfg = DefenseConfig::default();
    cfg.apply(&kv)?;
    let orig = Checkpoint::load(ckpt)?;
    let samples = load_samples(data)?;
    let mut log = JsonLines::create(&log.unwrap_or_else(|| sibling(out, ".log.jsonl")))?;
    log.write(&tagged(("event", "config"), &cfg))?;

    let tuned_checkpoint = |run: &DefenseRun, partial: Option<usize>| {
        let mut c = orig.clone();
        c.encoders = run.encoders().clone();
        c.meta.insert("finetune.from".into(), ckpt.display().to_string());
        c.meta.insert("finetune.seed".into(), cfg.seed.to_string());
        c.meta.insert("finetune.iterations".into(), run.iteration().to_string());
        c.meta.insert("finetune.alpha2".into(), cfg.alpha2.to_string());
        if let Some(it) = partial {
            c.meta.insert("finetune.failed_at".into(), it.to_string());
        }
        c
    };

    let mut run = DefenseRun::new(&samples, &orig.encoders, &cfg)?;
    let last = cfg.iterations.saturating_sub(1);
    while !run.is_done() {
        let it = run.iteration();
        match run.step() {
            Ok(r) => {
                let due = cfg.log_every > 0 && r.iteration % cfg.log_every == 0;
                if due || r.reset || r.iteration == last {
                    log.write(&tagged(("event", "step"), &r))?;
                }
                if due && r.iteration % (cfg.log_every * 10) == 0 {
                    info!("iteration {}: loss {:.6}", r.iteration, r.loss);
                }
            }
            Err(e) => {
                // The run still holds the weights from the last good step.
                tuned_checkpoint(&run, Some(it)).save(out)?;
                log.write(&json!({ "event": "error", "iteration": it, "message": e.to_string() }))?;
                return Err(e);
            }
        }
    }

    let fidelity = clean_fidelity(&orig.encoders.visual, run.visual(), &samples)?;
    log.write(&json!({
        "event": "summary",
        "iterations": run.iteration(),
        "resets": run.resets(),
        "clean_fidelity": fidelity,
        "fidelity_budget": cfg.fidelity_budget,
    }))?;
    if fidelity > cfg.fidelity_budget {
        warn!(
            "clean embedding drift {fidelity:.4} exceeds budget {}",
            cfg.fidelity_budget
        );
    }
    tuned_checkpoint(&run, None).save(out)?;
    info!("fine-tuned checkpoint written to {}", out.display());
    Ok(())
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

fn write_records(out: &Path, records: &[MetricsRecord]) -> Result<()> {
    if is_jsonl(out) {
        let mut log = JsonLines::create(out)?;
        for r in records {
            log.write(&serde_json::to_value(r).expect("records serialise to JSON"))?;
        }
        Ok(())
    } else {
        write_file(out, &records_csv(records)?)
    }
}

pub fn eval(
    common: &Common,
    data: &Path,
    ckpt: &Path,
    patch: Option<&Path>,
    conditions: &[String],
    seeds: &[u64],
    out: &Path,
) -> Result<()> {
    let known: Vec<&str> = EvalConfig::KEYS.iter().chain(&["patch_size"]).copied().collect();
    let kv = settings(common, None, &known)?;
    let base = eval_config(&kv)?;
    let ckpt = Checkpoint::load(ckpt)?;
    let threshold = ckpt.threshold()?;
    let samples = load_samples(data)?;
    let patch = patch.map(AdvPatch::load).transpose()?;

    let conditions: Vec<Condition> = if conditions.is_empty() {
        let mut c = vec![Condition::Clean, Condition::Random];
        if patch.is_some() {
            c.push(Condition::Edpa);
        }
        c
    } else {
        conditions.iter().map(|c| c.parse()).collect::<Result<_>>()?
    };
    let seeds = if seeds.is_empty() {
        vec![base.seed]
    } else {
        seeds.to_vec()
    };
    let (_, _, channels) = samples[0].image.dims();
    let random_dims = match (&patch, kv.raw("patch_size")) {
        (Some(p), _) => p.dims(),
        (None, Some(text)) => {
            let (h, w) = parse_patch_dims(text)?;
            (h, w, channels)
        }
        (None, None) => {
            let d = AttackConfig::default();
            (d.patch_height, d.patch_width, channels)
        }
    };

    let mut records = Vec::new();
    for &condition in &conditions {
        let mut runs = Vec::new();
        for &seed in &seeds {
            let cfg = EvalConfig { seed, ..base };
            let used = match condition {
                Condition::Clean => None,
                Condition::Random => Some(random_baseline_patch(seed, random_dims)),
                Condition::Edpa => Some(
                    patch
                        .clone()
                        .ok_or_else(|| EdpaError::Config("condition edpa needs --patch".into()))?,
                ),
            };
            runs.push(evaluate(
                &ckpt.encoders,
                &samples,
                condition,
                used.as_ref(),
                threshold,
                &cfg,
            )?);
        }
        let s = summarize(&runs)?;
        info!(
            "{condition}: failure rate {:.4} ± {:.4} over {} seed(s)",
            s.failure_rate, s.failure_rate_std, s.runs
        );
        records.extend(runs);
    }
    write_records(out, &records)
}

pub fn transfer(
    common: &Common,
    patch: &Path,
    source: (&Path, &Path),
    target: (&Path, &Path),
    out: &Path,
) -> Result<()> {
    let kv = settings(common, None, EvalConfig::KEYS)?;
    let cfg = eval_config(&kv)?;
    let patch = AdvPatch::load(patch)?;
    let (src_data, src_ckpt) = (load_samples(source.0)?, Checkpoint::load(source.1)?);
    let (tgt_data, tgt_ckpt) = (load_samples(target.0)?, Checkpoint::load(target.1)?);
    let src = Setup {
        encoders: &src_ckpt.encoders,
        data: &src_data,
        threshold: src_ckpt.threshold()?,
    };
    let tgt = Setup {
        encoders: &tgt_ckpt.encoders,
        data: &tgt_data,
        threshold: tgt_ckpt.threshold()?,
    };
    let (s, t) = transfer_eval(&patch, &src, &tgt, &cfg)?;
    let baseline = random_baseline_patch(cfg.seed, patch.dims());
    let r = evaluate(
        tgt.encoders,
        tgt.data,
        Condition::Random,
        Some(&baseline),
        tgt.threshold,
        &cfg,
    )?;
    info!(
        "failure rate: source {:.4}, target {:.4}, target random baseline {:.4}",
        s.failure_rate, t.failure_rate, r.failure_rate
    );
    let roles = ["source", "target", "target_random"];
    let records = [s, t, r];
    if is_jsonl(out) {
        let mut log = JsonLines::create(out)?;
        for (role, rec) in roles.iter().zip(&records) {
            log.write(&tagged(("role", role), rec))?;
        }
        Ok(())
    } else {
        write_file(out, &prefix_csv_column(&records_csv(&records)?, "role", &roles))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn ablate(
    common: &Common,
    kind: AblationKind,
    data: &Path,
    test: &Path,
    ckpt: &Path,
    values: &[f64],
    seeds: &[u64],
    out: &Path,
) -> Result<()> {
    let mut known: Vec<&str> = AttackConfig::KEYS.to_vec();
    known.extend(
        EvalConfig::KEYS
            .iter()
            .filter(|k| !known.contains(k))
            .collect::<Vec<_>>(),
    );
    let kv = settings(common, None, &known)?;
    let mut attack = AttackConfig::default();
    attack.apply(&kv)?;
    let eval = eval_config(&kv)?;
    let ckpt = Checkpoint::load(ckpt)?;
    let train = load_samples(data)?;
    let test = load_samples(test)?;
    let setup = AblationSetup {
        encoders: &ckpt.encoders,
        train: &train,
        test: &test,
        threshold: ckpt.threshold()?,
        attack,
        eval,
        seeds: if seeds.is_empty() {
            vec![attack.seed]
        } else {
            seeds.to_vec()
        },
    };
    let points = match kind {
        AblationKind::Size => ablate_patch_size(&setup, if values.is_empty() { &SIZE_GRID } else { values })?,
        AblationKind::Alpha1 => ablate_alpha1(&setup, if values.is_empty() { &ALPHA_GRID } else { values })?,
    };
    for p in &points {
        info!(
            "{} = {}: failure rate {:.4} ± {:.4}",
            p.parameter, p.value, p.summary.failure_rate, p.summary.failure_rate_std
        );
    }
    write_file(out, &ablation_csv(&points)?)
}

pub fn heatmap(
    common: &Common,
    data: &Path,
    ckpt: &Path,
    index: usize,
    patch: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let kv = settings(common, None, EvalConfig::KEYS)?;
    let cfg = eval_config(&kv)?;
    let ckpt = Checkpoint::load(ckpt)?;
    let samples = load_samples(data)?;
    let sample = samples.get(index).ok_or_else(|| {
        EdpaError::Config(format!(
            "sample index {index} out of range for {} samples",
            samples.len()
        ))
    })?;
    let patch = patch.map(AdvPatch::load).transpose()?;
    let placed = patch
        .as_ref()
        .map(|p| eval_mask(&cfg, index, &sample.image, p).map(|m| (p, m)))
        .transpose()?;
    let hm = alignment_heatmap(&ckpt.encoders, sample, placed.as_ref().map(|(p, m)| (*p, m)))?;
    let stem = format!("sample_{index:06}");
    hm.save(out, &stem)?;

    let (n, m) = hm.clean.dims2()?;
    let summary = json!({
        "index": index,
        "patches": n,
        "tokens": m,
        "origin": placed.as_ref().map(|(_, mask)| mask.origin),
        "covered_blocks": hm.covered,
        "mean_abs_difference": hm.mean_abs_difference(),
        "covered_mass_clean": hm.covered_mass(&hm.clean),
        "covered_mass_patched": hm.patched.as_ref().map(|p| hm.covered_mass(p)),
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
    write_file(&out.join(format!("{stem}_summary.json")), text.as_bytes())?;
    info!("heatmaps written to {}", out.display());
    Ok(())
}
