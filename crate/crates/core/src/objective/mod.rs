//! Training objective and loop.

mod loss;
mod optim;

pub use loss::{
    cls_loss, multilabel_soft_margin, noisy_branch_loss, total_loss, LossOptions, LossReport,
    NoiseMode,
};
pub use optim::AdamW;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::model::{self, ModelState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss: LossOptions,
    /// Random rescale + crop/pad of every training sample.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            loss: LossOptions::default(),
            augment: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be finite and ≥ 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be finite and ≥ 0, got {}",
                self.weight_decay
            )));
        }
        if let NoiseMode::Multiplier(k) = self.loss.noise {
            if !(k >= 0.0) || !k.is_finite() {
                return Err(Error::Config(format!("noise multiplier must be ≥ 0, got {k}")));
            }
        }
        Ok(())
    }
}

/// Batch-mean losses of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub cls: f64,
    pub noisy: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub log: Vec<StepLog>,
    /// Mean per-sample total loss of every epoch.
    pub epoch_means: Vec<f64>,
}

/// Loss report and parameter gradients (canonical order) for one sample.
pub fn sample_gradients(
    state: &ModelState,
    image: &Tensor,
    y: &Tensor,
    opts: &LossOptions,
) -> Result<(LossReport, Vec<Tensor>)> {
    let mut g = Graph::new();
    let params = state.bind(&mut g);
    let x = g.constant(image.clone());
    let art = model::forward_graph(&mut g, state.config(), &params, x)?;
    let (loss, report) = total_loss(&mut g, &art, y, opts)?;
    g.backward(loss)?;
    let grads = params.flat().into_iter().map(|&v| g.grad_or_zeros(v)).collect();
    Ok((report, grads))
}

/// SplitMix64 mix of a base seed with two counters.
pub(crate) fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn train(state: ModelState, data: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(state, data, cfg, |_, _| {})
}

/// [`train`] with a callback receiving `(epoch, epoch_mean_loss)`.
///
/// Batch order comes from `cfg.seed`; per-sample gradients may be computed
/// in parallel but are summed in batch order, so results do not depend on
/// the thread count.
pub fn train_with_progress(
    state: ModelState,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    let model_cfg = state.config().clone();
    let mut tensors: Vec<Tensor> = state.tensors().into_iter().cloned().collect();
    let mut state = state;
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    let mut epoch_means = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(LossReport, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| {
                    let sample = if cfg.augment {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                            cfg.seed,
                            epoch as u64,
                            i as u64,
                        ));
                        data::augment(&data[i], &mut rng)?
                    } else {
                        data[i].clone()
                    };
                    sample_gradients(&state, &sample.image, &sample.label_tensor(), &cfg.loss)
                })
                .collect::<Result<_>>()?;

            let n = results.len() as f64;
            let mut grads: Vec<Tensor> = tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
            let (mut cls, mut noisy, mut total) = (0.0, 0.0, 0.0);
            for (report, sample_grads) in &results {
                cls += report.cls;
                noisy += report.noisy;
                total += report.total;
                for (acc, g) in grads.iter_mut().zip(sample_grads) {
                    acc.add_assign(g)?;
                }
            }
            if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: format!("batch loss {total}"),
                });
            }
            for g in &mut grads {
                *g = g.map(|v| v / n);
            }
            opt.step(&mut tensors, &grads)?;
            if tensors.iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: "parameters diverged".into(),
                });
            }
            state = ModelState::from_tensors(model_cfg.clone(), tensors.clone())?;
            epoch_total += total;
            log.push(StepLog {
                epoch,
                step,
                cls: cls / n,
                noisy: noisy / n,
                total: total / n,
            });
        }
        let mean = epoch_total / data.len() as f64;
        epoch_means.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(TrainOutcome {
        state,
        log,
        epoch_means,
    })
}

/// Loss log as CSV: `epoch,step,L_cls,L_Mss,total`.
pub fn loss_csv(log: &[StepLog]) -> String {
    let mut out = String::from("epoch,step,L_cls,L_Mss,total\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.step, r.cls, r.noisy, r.total
        ));
    }
    out
}
