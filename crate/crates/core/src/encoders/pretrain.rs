use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Encoders, Geometry, Pooling, SceneSample};
use crate::autodiff::{cosine_similarity, Graph};
use crate::config::KvConfig;
use crate::error::{EdpaError, Result};
use crate::optim::AdamState;
use crate::parallel;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of `1 - cos(pooled patches, pooled tokens)`.
    pub lambda_align: f64,
    pub seed: u64,
    pub pooling: Pooling,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 6000,
            learning_rate: 1e-3,
            batch_size: 16,
            lambda_align: 0.5,
            seed: 0,
            pooling: Pooling::Attention,
            log_every: 50,
        }
    }
}

impl PretrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "iterations",
        "learning_rate",
        "batch_size",
        "lambda_align",
        "seed",
        "pooling",
        "log_every",
    ];

    /// Overrides defaults from `key=value` settings (see [`Self::KEYS`]).
    pub fn apply(&mut self, cfg: &KvConfig) -> Result<()> {
        self.iterations = cfg.get_or("iterations", self.iterations)?;
        if let Some(v) = cfg.get_real("learning_rate")? {
            self.learning_rate = v;
        }
        self.batch_size = cfg.get_or("batch_size", self.batch_size)?;
        if let Some(v) = cfg.get_real("lambda_align")? {
            self.lambda_align = v;
        }
        self.seed = cfg.get_or("seed", self.seed)?;
        self.pooling = cfg.get_or("pooling", self.pooling)?;
        self.log_every = cfg.get_or("log_every", self.log_every)?;
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.lambda_align >= 0.0) {
            return Err(EdpaError::Config(format!("bad pretrain config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub action_mse: f64,
    pub alignment: f64,
}

pub type PretrainLog = Vec<PretrainRecord>;

/// Per-sample loss pieces and gradients for every parameter tensor
/// (visual, language, head order).
pub(crate) struct SampleGrad {
    pub loss: f64,
    pub mse: f64,
    pub cos: f64,
    pub grads: Vec<Vec<f64>>,
}

pub(crate) fn sample_loss_grad(enc: &Encoders, sample: &SceneSample, lambda_align: f64) -> Result<SampleGrad> {
    let mut g = Graph::new();
    let vv = enc.visual.bind(&mut g, true);
    let lv = enc.language.bind(&mut g, true);
    let hv = enc.head.bind(&mut g, true);
    let img = g.constant(sample.image.tensor().clone());
    let p = vv.encode(&mut g, img)?;
    let w = lv.encode(&mut g, &sample.tokens)?;
    let pooled = hv.pool(&mut g, p, w)?;
    let pred = hv.readout(&mut g, pooled)?;
    let target = g.constant(crate::tensor::Tensor::vector(sample.action.clone())?);
    let err = g.sub(pred, target)?;
    let sq = g.mul(err, err)?;
    let mse = g.mean_all(sq)?;
    let cos = cosine_similarity(&mut g, pooled.patches, pooled.tokens)?;
    // mse + lambda * (1 - cos)
    let pen = g.scale(cos, -lambda_align);
    let loss = g.add(mse, pen)?;
    let mut grads = g.backward(loss)?;
    let vars = vv.all().into_iter().chain(lv.all()).chain(hv.all());
    Ok(SampleGrad {
        loss: g.item(loss) + lambda_align,
        mse: g.item(mse),
        cos: g.item(cos),
        grads: vars
            .map(|v| grads.take(v).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
            .collect(),
    })
}

/// Jointly trains all three components with Adam on action MSE plus the
/// pooled-embedding alignment penalty.
pub fn pretrain(dataset: &[SceneSample], geometry: Geometry, cfg: &PretrainConfig) -> Result<(Encoders, PretrainLog)> {
    if dataset.is_empty() {
        return Err(EdpaError::Empty("pretraining dataset"));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(EdpaError::Config(format!("bad pretrain config {cfg:?}")));
    }
    let mut enc = Encoders::init(geometry, cfg.pooling, rng::derive(cfg.seed, 0))?;
    let mut sampler = rng::substream(cfg.seed, 1);
    let mut adam = AdamState::default();
    let mut log = Vec::new();
    for it in 0..cfg.iterations {
        let batch: Vec<&SceneSample> = (0..cfg.batch_size)
            .map(|_| &dataset[sampler.gen_range(0..dataset.len())])
            .collect();
        let per_sample = parallel::map_indexed(&batch, |_, s| sample_loss_grad(&enc, s, cfg.lambda_align));
        let mut total: Option<Vec<Vec<f64>>> = None;
        let (mut loss, mut mse, mut cos) = (0.0, 0.0, 0.0);
        for r in per_sample {
            let r = r?;
            loss += r.loss;
            mse += r.mse;
            cos += r.cos;
            match total.as_mut() {
                None => total = Some(r.grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&r.grads) {
                        a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let b = cfg.batch_size as f64;
        let (loss, mse, cos) = (loss / b, mse / b, cos / b);
        if !loss.is_finite() {
            return Err(EdpaError::NonFinite {
                what: "pretraining loss".into(),
                iteration: it,
                detail: format!("loss {loss}, mse {mse}"),
            });
        }
        let mut grads = total.expect("batch non-empty");
        grads.iter_mut().flatten().for_each(|g| *g /= b);
        {
            let Encoders { visual, language, head } = &mut enc;
            let mut params: Vec<&mut crate::tensor::Tensor> = visual
                .tensors_mut()
                .into_iter()
                .chain(language.tensors_mut())
                .chain(head.tensors_mut())
                .collect();
            adam.step(&mut params, &grads, cfg.learning_rate).map_err(|e| match e {
                EdpaError::NonFinite { what, detail, .. } => EdpaError::NonFinite {
                    what,
                    iteration: it,
                    detail,
                },
                other => other,
            })?;
        }
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.iterations) {
            log.push(PretrainRecord {
                iteration: it,
                loss,
                action_mse: mse,
                alignment: cos,
            });
        }
    }
    Ok((enc, log))
}

/// Mean action MSE of `enc` over `data`.
pub fn action_mse(enc: &Encoders, data: &[SceneSample]) -> Result<f64> {
    let errs = parallel::map_indexed(data, |_, s| -> Result<f64> {
        let a = super::predict_action(enc, &s.image, &s.tokens)?;
        Ok(a.data()
            .iter()
            .zip(&s.action)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / s.action.len() as f64)
    });
    let mut total = 0.0;
    for e in errs {
        total += e?;
    }
    Ok(total / data.len().max(1) as f64)
}
