//! Finite-difference gradient suites shared by the `gradients` and
//! `acceptance` test targets.

#![allow(dead_code)]

use edpa::autodiff::{finite_difference_gradient, gradient_error, Graph, Var};
use edpa::encoders::{Encoders, Geometry, Pooling};
use edpa::losses::{finetune_loss, mix_objective, raw_losses};
use edpa::patching::{apply_patch_graph, init_patch, random_position, Image};
use edpa::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

/// Worst gradient error seen for one op kind or loss.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Magnitudes in `[lo, hi]` with random signs: keeps inputs away from the
/// kinks of `abs` and the pole of division.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(lo..hi);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Values in `[-2, 2]` at least `gap` away from every point in `avoid`.
fn avoiding(rng: &mut ChaCha8Rng, shape: &[usize], avoid: &[f64], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.gen_range(-2.0..2.0);
        if avoid.iter().all(|a| (v - a).abs() > gap) {
            break v;
        }
    })
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=5))
}

fn boxed(f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Build {
    Box::new(f)
}

/// A random instance of the named op.
fn op_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = dims(rng);
    let m = |rng: &mut ChaCha8Rng| uniform(rng, &[r, c], -2.0, 2.0);
    match name {
        "add" => Case {
            inputs: vec![m(rng), m(rng)],
            build: boxed(|g, v| g.add(v[0], v[1])),
        },
        "sub" => Case {
            inputs: vec![m(rng), m(rng)],
            build: boxed(|g, v| g.sub(v[0], v[1])),
        },
        "mul" => Case {
            inputs: vec![m(rng), m(rng)],
            build: boxed(|g, v| g.mul(v[0], v[1])),
        },
        "div" => Case {
            inputs: vec![m(rng), away_from_zero(rng, &[r, c], 0.5, 2.0)],
            build: boxed(|g, v| g.div(v[0], v[1])),
        },
        "scale" => {
            let k = rng.gen_range(-3.0..3.0);
            Case {
                inputs: vec![m(rng)],
                build: boxed(move |g, v| Ok(g.scale(v[0], k))),
            }
        }
        "exp" => Case {
            inputs: vec![m(rng)],
            build: boxed(|g, v| Ok(g.exp(v[0]))),
        },
        "ln" => Case {
            inputs: vec![uniform(rng, &[r, c], 0.2, 3.0)],
            build: boxed(|g, v| g.ln(v[0])),
        },
        "abs" => Case {
            inputs: vec![away_from_zero(rng, &[r, c], 0.05, 2.0)],
            build: boxed(|g, v| Ok(g.abs(v[0]))),
        },
        "tanh" => Case {
            inputs: vec![m(rng)],
            build: boxed(|g, v| Ok(g.tanh(v[0]))),
        },
        "matmul" => {
            let k = rng.gen_range(1..=4);
            Case {
                inputs: vec![uniform(rng, &[r, k], -2.0, 2.0), uniform(rng, &[k, c], -2.0, 2.0)],
                build: boxed(|g, v| g.matmul(v[0], v[1])),
            }
        }
        "transpose" => Case {
            inputs: vec![m(rng)],
            build: boxed(|g, v| g.transpose(v[0])),
        },
        "sum_last" => Case {
            inputs: vec![m(rng)],
            build: boxed(|g, v| g.sum_last(v[0])),
        },
        "mean_last" => Case {
            inputs: vec![m(rng)],
            build: boxed(|g, v| g.mean_last(v[0])),
        },
        "sum_all" => Case {
            inputs: vec![m(rng)],
            build: boxed(|g, v| g.sum_all(v[0])),
        },
        "mean_all" => Case {
            inputs: vec![m(rng)],
            build: boxed(|g, v| g.mean_all(v[0])),
        },
        "norm_last" => Case {
            inputs: vec![away_from_zero(rng, &[r, c], 0.1, 2.0)],
            build: boxed(|g, v| g.norm_last(v[0])),
        },
        "clamp_min" => {
            let lo = rng.gen_range(-1.0..1.0);
            Case {
                inputs: vec![avoiding(rng, &[r, c], &[lo], 0.01)],
                build: boxed(move |g, v| Ok(g.clamp_min(v[0], lo))),
            }
        }
        "clamp" => {
            let lo = rng.gen_range(-1.5..0.0);
            let hi = rng.gen_range(0.1..1.5);
            Case {
                inputs: vec![avoiding(rng, &[r, c], &[lo, hi], 0.01)],
                build: boxed(move |g, v| Ok(g.clamp(v[0], lo, hi))),
            }
        }
        "add_row_vec" => Case {
            inputs: vec![m(rng), uniform(rng, &[c], -2.0, 2.0)],
            build: boxed(|g, v| g.add_row_vec(v[0], v[1])),
        },
        "div_rows" => Case {
            inputs: vec![m(rng), away_from_zero(rng, &[r], 0.5, 2.0)],
            build: boxed(|g, v| g.div_rows(v[0], v[1])),
        },
        "logsumexp_rows" => Case {
            inputs: vec![m(rng)],
            build: boxed(|g, v| g.logsumexp_rows(v[0])),
        },
        "softmax_last" => Case {
            inputs: vec![m(rng)],
            build: boxed(|g, v| Ok(g.softmax_last(v[0]))),
        },
        "diag" => Case {
            inputs: vec![uniform(rng, &[r, r], -2.0, 2.0)],
            build: boxed(|g, v| g.diag(v[0])),
        },
        "reshape" => Case {
            inputs: vec![m(rng)],
            build: boxed(move |g, v| g.reshape(v[0], vec![c, r])),
        },
        "concat" => {
            let k = rng.gen_range(1..=3);
            let inputs = (0..k)
                .map(|_| {
                    let n = rng.gen_range(1..=4);
                    uniform(rng, &[n], -2.0, 2.0)
                })
                .collect();
            Case {
                inputs,
                build: boxed(|g, v| g.concat(v)),
            }
        }
        "select_rows" => {
            // Repeats allowed: their gradients accumulate.
            let index: Vec<usize> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..r)).collect();
            Case {
                inputs: vec![m(rng)],
                build: boxed(move |g, v| g.select_rows(v[0], &index)),
            }
        }
        "scatter_rows" => {
            let mut index: Vec<usize> = (0..r).collect();
            rand::seq::SliceRandom::shuffle(&mut index[..], rng);
            index.truncate(rng.gen_range(1..=r));
            let k = index.len();
            Case {
                inputs: vec![m(rng), uniform(rng, &[k, c], -2.0, 2.0)],
                build: boxed(move |g, v| g.scatter_rows(v[0], v[1], &index)),
            }
        }
        "patchify" => {
            let p = rng.gen_range(1..=3);
            let (bh, bw, ch) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
            Case {
                inputs: vec![uniform(rng, &[bh * p, bw * p, ch], 0.0, 1.0)],
                build: boxed(move |g, v| g.patchify(v[0], p)),
            }
        }
        "paste" => {
            let (h, w, ch) = (rng.gen_range(2..=7), rng.gen_range(2..=7), rng.gen_range(1..=3));
            let (ph, pw) = (rng.gen_range(1..=h), rng.gen_range(1..=w));
            let origin = (rng.gen_range(0..=h - ph), rng.gen_range(0..=w - pw));
            Case {
                inputs: vec![
                    uniform(rng, &[h, w, ch], 0.0, 1.0),
                    uniform(rng, &[ph, pw, ch], 0.0, 1.0),
                ],
                build: boxed(move |g, v| g.paste(v[0], v[1], origin)),
            }
        }
        other => panic!("no generator for op {other}"),
    }
}

/// Every differentiable op the tape records, by method name.
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "exp",
    "ln",
    "abs",
    "tanh",
    "matmul",
    "transpose",
    "sum_last",
    "mean_last",
    "sum_all",
    "mean_all",
    "norm_last",
    "clamp_min",
    "clamp",
    "add_row_vec",
    "div_rows",
    "logsumexp_rows",
    "softmax_last",
    "diag",
    "reshape",
    "concat",
    "select_rows",
    "scatter_rows",
    "patchify",
    "paste",
];

/// Largest gradient error over all inputs of one case. The op output is
/// contracted with a random weight tensor so upstream gradients are not
/// uniform.
fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> f64 {
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (case.build)(&mut g, &vars).expect("forward");
        g.value(out).shape().to_vec()
    };
    let weights = uniform(rng, &probe, -1.0, 1.0);
    let eval = |inputs: &[Tensor], grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let out = (case.build)(&mut g, &vars).expect("forward");
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).expect("weights match output");
        let root = g.sum_all(prod).expect("sum");
        let value = g.item(root);
        if !grad {
            return (value, Vec::new());
        }
        let grads = g.backward(root).expect("backward");
        let gs = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        (value, gs)
    };
    let (_, analytic) = eval(&case.inputs, true);
    let mut worst: f64 = 0.0;
    for (i, x) in case.inputs.iter().enumerate() {
        let fd = finite_difference_gradient(
            |xi| {
                let mut inputs = case.inputs.clone();
                inputs[i] = xi.clone();
                Ok(eval(&inputs, false).0)
            },
            x,
            FD_STEP,
        )
        .expect("finite differences");
        worst = worst.max(gradient_error(&analytic[i], fd.data()));
    }
    worst
}

pub fn op_gradient_suite(instances: usize, seed: u64) -> Vec<SuiteResult> {
    OP_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
            let max_error = (0..instances)
                .map(|_| {
                    let case = op_case(name, &mut rng);
                    check_case(&case, &mut rng)
                })
                .fold(0.0, f64::max);
            SuiteResult {
                name: (*name).into(),
                instances,
                max_error,
            }
        })
        .collect()
}

fn small_geometry() -> Geometry {
    Geometry {
        height: 16,
        width: 16,
        channels: 3,
        patch: 4,
        dim: 8,
        max_tokens: 4,
        vocab: 10,
        action_dim: 3,
    }
}

/// The losses end to end: patch pixels -> paste -> visual encoder -> loss.
pub const LOSS_NAMES: &[&str] = &["patch_contrastive", "alignment_shift", "joint_objective", "finetune"];

fn loss_instance(name: &str, rng: &mut ChaCha8Rng) -> f64 {
    let enc = Encoders::init(small_geometry(), Pooling::Attention, rng.gen()).expect("init");
    let mut tuned = enc.visual.clone();
    for t in tuned.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.1 * rng.gen_range(-1.0..1.0));
    }
    let image = Image::from_fn(16, 16, 3, |_| rng.gen()).expect("image");
    let tokens: Vec<usize> = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(0..10)).collect();
    let (ph, pw) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
    let patch = init_patch(rng, ph, pw, 3).pixels().clone();
    let mask = random_position(rng, (16, 16), (ph, pw)).expect("mask");
    let tau = rng.gen_range(0.05..1.0);
    let alpha = rng.gen_range(0.0..1.0);
    let (sp, sa) = (rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0));

    let eval = |d: &Tensor, grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let visual = if name == "finetune" { &tuned } else { &enc.visual };
        let vv = visual.bind(&mut g, false);
        let lv = enc.language.bind(&mut g, false);
        let img = g.constant(image.tensor().clone());
        let dv = g.leaf(d.clone(), grad);
        let p = vv.encode(&mut g, img)?;
        let pasted = apply_patch_graph(&mut g, img, dv, &mask)?;
        let p_adv = vv.encode(&mut g, pasted)?;
        let w = lv.encode(&mut g, &tokens)?;
        let root = match name {
            "patch_contrastive" => raw_losses(&mut g, p, p_adv, w, tau)?.0,
            "alignment_shift" => raw_losses(&mut g, p, p_adv, w, tau)?.1,
            "joint_objective" => {
                let (lp, la) = raw_losses(&mut g, p, p_adv, w, tau)?;
                mix_objective(&mut g, lp, la, alpha, sp, sa)?
            }
            "finetune" => {
                let ov = enc.visual.bind(&mut g, false);
                let orig = ov.encode(&mut g, img)?;
                finetune_loss(&mut g, p, p_adv, orig, alpha)?.loss
            }
            other => panic!("unknown loss {other}"),
        };
        let value = g.item(root);
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(root)?;
        Ok((
            value,
            grads.get(dv).map_or_else(|| vec![0.0; d.numel()], <[f64]>::to_vec),
        ))
    };
    let (_, analytic) = eval(&patch, true).expect("analytic");
    let fd = finite_difference_gradient(|d| Ok(eval(d, false)?.0), &patch, FD_STEP).expect("fd");
    // |clean - adv| in the alignment loss has a kink at zero; a step that
    // straddles it skews the central difference, so retry a finer one.
    let coarse = gradient_error(&analytic, fd.data());
    if coarse < 1e-5 {
        return coarse;
    }
    let fine = finite_difference_gradient(|d| Ok(eval(d, false)?.0), &patch, FD_STEP * 0.1).expect("fd");
    coarse.min(gradient_error(&analytic, fine.data()))
}

pub fn loss_gradient_suite(instances: usize, seed: u64) -> Vec<SuiteResult> {
    LOSS_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 101) << 32));
            let max_error = (0..instances)
                .map(|_| loss_instance(name, &mut rng))
                .fold(0.0, f64::max);
            SuiteResult {
                name: (*name).into(),
                instances,
                max_error,
            }
        })
        .collect()
}

/// Every file under `dir`, keyed by relative path, for byte comparisons.
pub fn tree_bytes(dir: &std::path::Path) -> std::collections::BTreeMap<std::path::PathBuf, Vec<u8>> {
    fn walk(
        root: &std::path::Path,
        at: &std::path::Path,
        out: &mut std::collections::BTreeMap<std::path::PathBuf, Vec<u8>>,
    ) {
        for entry in std::fs::read_dir(at).expect("readable directory") {
            let path = entry.expect("directory entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, std::fs::read(&path).expect("readable file"));
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Paths of every `EDT1` file under `dir`.
pub fn edt1_files(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    tree_bytes(dir)
        .into_iter()
        .filter(|(_, bytes)| bytes.starts_with(edpa::tensor::EDT1_MAGIC))
        .map(|(rel, _)| dir.join(rel))
        .collect()
}
