//! Minibatch training with AdamW, a per-epoch cosine schedule and an EMA
//! of the weights, which is what evaluation uses.

use std::borrow::Cow;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::config::{ModelConfig, RunConfig, TrainConfig};
use crate::data::{
    gen_synthetic, load_bundle, load_manifest, manifest_path, name_embeddings, Dataset, FeatureBundle,
    LabelSemantics, SyntheticData,
};
use crate::error::{Error, Result};
use crate::gradcheck::random_tensor;
use crate::metrics::{evaluate, EvalTable};
use crate::model::{forward, loss_and_grad, SspaParams};
use crate::optim::{adamw_step, cosine_lr, ema_update, ema_update_warmup, EmaState, OptimizerState};
use crate::parallel::Exec;
use crate::params::Bindable;
use crate::tensor::Tensor;

/// Training and test splits with their label semantics.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
    pub semantics: LabelSemantics,
}

impl TaskData {
    pub fn from_synthetic(s: SyntheticData) -> Self {
        Self {
            train: s.train,
            test: s.test,
            semantics: s.semantics,
        }
    }

    /// Loads the bundles named by `run.data`, or generates the synthetic
    /// task when no training file is given. Category word embeddings of
    /// file-backed data are derived from the manifest's category names.
    pub fn load(run: &RunConfig) -> Result<Self> {
        let (train_path, test_path) = match (&run.data.train_path, &run.data.test_path) {
            (None, None) => return Ok(Self::from_synthetic(gen_synthetic(&run.data.synthetic)?)),
            (Some(a), Some(b)) => (Path::new(a), Path::new(b)),
            _ => return Err(Error::invalid("train_path and test_path must be given together")),
        };
        let train = load_bundle(train_path)?;
        let test = load_bundle(test_path)?;
        let m = &run.model;
        for (name, d) in [("training", &train), ("test", &test)] {
            if (d.categories, d.dim) != (m.categories, m.dim) {
                return Err(Error::invalid(format!(
                    "{name} bundle has C={}, d={}; model expects C={}, d={}",
                    d.categories, d.dim, m.categories, m.dim
                )));
            }
        }
        let t_ka = train
            .t_ka
            .clone()
            .ok_or_else(|| Error::Format(format!("{} carries no label embeddings", train_path.display())))?;
        let manifest = load_manifest(&manifest_path(train_path))?;
        if manifest.categories.len() != m.categories {
            return Err(Error::Format(format!(
                "manifest lists {} categories, model expects {}",
                manifest.categories.len(),
                m.categories
            )));
        }
        let word_embeddings = name_embeddings(&manifest.categories, m.token_dim());
        Ok(Self {
            train,
            test,
            semantics: LabelSemantics { t_ka, word_embeddings },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Semantics seen by one sample. With `semantic_noise` every semantic input
/// is replaced by a fixed per-sample Gaussian draw.
pub fn sample_semantics<'a>(
    cfg: &ModelConfig,
    base: &'a LabelSemantics,
    split: Split,
    index: usize,
) -> Cow<'a, LabelSemantics> {
    if !cfg.semantic_noise {
        return Cow::Borrowed(base);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e6f697365);
    rng.set_stream(((split == Split::Test) as u64) << 63 | index as u64);
    let (c, d) = base.t_ka.shape();
    Cow::Owned(LabelSemantics {
        t_ka: random_tensor(&mut rng, c, d, 1.0),
        word_embeddings: random_tensor(&mut rng, c, base.word_embeddings.cols(), 1.0),
    })
}

/// Copies `values` into the trainable tensors of `params`, in visit order.
pub fn assign(params: &mut SspaParams, values: &[Tensor]) {
    let mut it = values.iter();
    params.visit_mut(&mut |t| {
        *t = it.next().expect("one value per trainable tensor").clone();
    });
}

/// `N×C` fused scores on `data`.
pub fn predict(
    cfg: &ModelConfig,
    params: &SspaParams,
    data: &Dataset,
    sem: &LabelSemantics,
    split: Split,
    exec: Exec,
) -> Result<Tensor> {
    let rows: Vec<Result<Vec<f64>>> = exec.map(data.len(), |i| {
        let s = sample_semantics(cfg, sem, split, i);
        forward(cfg, params, &data.samples[i], &s).map(|o| o.prediction.p)
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

pub fn evaluate_params(
    cfg: &ModelConfig,
    params: &SspaParams,
    data: &Dataset,
    sem: &LabelSemantics,
    split: Split,
    exec: Exec,
) -> Result<EvalTable> {
    let scores = predict(cfg, params, data, sem, split, exec)?;
    evaluate(&scores, &data.labels())
}

/// Mean loss and mean gradient over `batch`, reduced in index order.
pub fn batch_gradient(
    cfg: &ModelConfig,
    params: &SspaParams,
    samples: &[&FeatureBundle],
    indices: &[usize],
    sem: &LabelSemantics,
    exec: Exec,
) -> Result<(f64, Vec<Tensor>)> {
    let per: Vec<Result<(f64, Vec<Tensor>)>> = exec.map(samples.len(), |k| {
        let s = sample_semantics(cfg, sem, Split::Train, indices[k]);
        loss_and_grad(cfg, params, samples[k], &s).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (sample {})", indices[k])),
            other => other,
        })
    });
    let mut loss = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for r in per {
        let (l, g) = r?;
        loss += l;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.add_assign(b);
                }
            }
        }
    }
    let n = samples.len() as f64;
    let grads = grads
        .ok_or_else(|| Error::invalid("empty batch"))?
        .into_iter()
        .map(|t| t.scaled(1.0 / n))
        .collect();
    Ok((loss / n, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Test metrics of the EMA weights after this epoch.
    pub metrics: Option<EvalTable>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// EMA weights.
    pub params: SspaParams,
    /// Raw optimizer weights.
    pub raw_params: SspaParams,
    pub history: Vec<EpochRecord>,
    /// Test metrics of the EMA weights after the last epoch.
    pub final_metrics: EvalTable,
    /// Per-step training losses.
    pub step_losses: Vec<f64>,
}

pub fn train(cfg: &ModelConfig, tc: &TrainConfig, data: &TaskData, exec: Exec) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let mut params = SspaParams::new(cfg)?;
    let mut opt = OptimizerState::new(tc.optimizer, params.tensors());
    let mut ema = EmaState::new(tc.ema_decay, params.tensors())?;
    let mut history = Vec::with_capacity(tc.epochs);
    let mut step_losses = Vec::new();
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let ema_params = |shadow: &[Tensor], params: &SspaParams| {
        let mut p = params.clone();
        assign(&mut p, shadow);
        p
    };

    for epoch in 0..tc.epochs {
        let lr = cosine_lr(tc.optimizer.lr, epoch, tc.epochs)?;
        opt.config.lr = lr;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(tc.batch_size).enumerate() {
            let samples: Vec<&FeatureBundle> = idx.iter().map(|&i| &data.train.samples[i]).collect();
            let (loss, grads) = batch_gradient(cfg, &params, &samples, idx, &data.semantics, exec)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, batch {b}")),
                    other => other,
                })?;
            let mut flat: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
            {
                let mut refs: Vec<&mut Tensor> = flat.iter_mut().collect();
                adamw_step(&mut opt, &mut refs, &grads)?;
            }
            assign(&mut params, &flat);
            if tc.ema_warmup {
                ema_update_warmup(&mut ema, &flat)?;
            } else {
                ema_update(&mut ema, &flat)?;
            }
            epoch_loss += loss * idx.len() as f64;
            step_losses.push(loss);
        }
        let train_loss = epoch_loss / data.train.len() as f64;

        let last = epoch + 1 == tc.epochs;
        let metrics = if tc.eval_every_epoch || last {
            let p = ema_params(&ema.shadow, &params);
            Some(evaluate_params(cfg, &p, &data.test, &data.semantics, Split::Test, exec)?)
        } else {
            None
        };
        match &metrics {
            Some(m) => info!("epoch {epoch}: lr {lr:.3e} loss {train_loss:.5} mAP {:.4}", m.map),
            None => debug!("epoch {epoch}: lr {lr:.3e} loss {train_loss:.5}"),
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            metrics,
        });
    }

    let final_metrics = history
        .last()
        .and_then(|h| h.metrics.clone())
        .expect("last epoch is always evaluated");
    Ok(TrainOutcome {
        params: ema_params(&ema.shadow, &params),
        raw_params: params,
        history,
        final_metrics,
        step_losses,
    })
}

/// L2 norm of each trainable tensor's gradient over one batch.
pub fn gradient_audit(
    cfg: &ModelConfig,
    params: &SspaParams,
    data: &TaskData,
    batch: usize,
    exec: Exec,
) -> Result<Vec<f64>> {
    let n = batch.min(data.train.len());
    let idx: Vec<usize> = (0..n).collect();
    let samples: Vec<&FeatureBundle> = idx.iter().map(|&i| &data.train.samples[i]).collect();
    let (_, grads) = batch_gradient(cfg, params, &samples, &idx, &data.semantics, exec)?;
    Ok(grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// One line per epoch: `epoch,lr,train_loss,mAP,CF1,OF1`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,mAP,CF1,OF1\n");
    for h in history {
        let (map, cf1, of1) = h
            .metrics
            .as_ref()
            .map(|m| (m.map.to_string(), m.all.cf1.to_string(), m.all.of1.to_string()))
            .unwrap_or_default();
        s.push_str(&format!("{},{},{},{map},{cf1},{of1}\n", h.epoch, h.lr, h.train_loss));
    }
    s
}
