//! Mini-batch Adam training of the toy generator on the total objective.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cell_inputs, derive_seed, forward_batch, ModelConfig, ModelInput, ModelParams};
use crate::constraints::{
    sample_noise, sample_random_mask, AttributeConstraint, NoiseSpec, PartialLayout, RandomMask,
};
use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::losses::{
    attribute_consistent_batch, attribute_disentangled_batch, flat_prediction,
    masked_partial_batch, reconstruction_batch, soft_counts, total_loss, LossReport, LossWeights,
};
use crate::numerics::{Adam, Tape, Var};
use crate::synthdata::{extract_partial, whole_element_partial, Sample};

/// Seed-path tags keeping the independent random streams apart.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_CONDITION: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch from which the learning rate is divided by 10; `None` means
    /// `ceil(2/3 * epochs)`.
    pub lr_decay_epoch: Option<usize>,
    pub weights: LossWeights,
    /// Apply the 25% random mask to training partial layouts.
    pub random_mask: bool,
    /// Chance that a training sample is given a partial layout.
    pub partial_prob: f64,
    /// Chance that a training sample's attribute is replaced by `Unspecified`.
    pub unspecified_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-4,
            lr_decay_epoch: None,
            weights: LossWeights::default(),
            random_mask: true,
            partial_prob: 0.8,
            unspecified_prob: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Validation(format!(
                "batch size {} and learning rate {} must be positive",
                self.batch_size, self.lr
            )));
        }
        for p in [self.partial_prob, self.unspecified_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn decay_epoch(&self) -> usize {
        self.lr_decay_epoch.unwrap_or((2 * self.epochs).div_ceil(3))
    }
}

/// Loss components averaged per sample over each epoch, and the batch-mean
/// total of every step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<LossReport>,
    pub step_totals: Vec<f64>,
}

impl TrainHistory {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }
}

/// Initializes parameters from `config.seed` and trains them.
pub fn train(
    model: ModelConfig,
    data: &[Sample],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    let params = ModelParams::init(model, derive_seed(config.seed, &[STREAM_INIT]))?;
    train_params(params, data, config)
}

/// The per-step conditions drawn for one training sample.
struct Condition {
    attribute: AttributeConstraint,
    noise: crate::constraints::NoiseField,
    partial: PartialLayout,
    mask: Option<RandomMask>,
    model_partial: Option<PartialLayout>,
}

fn draw_condition(sample: &Sample, grid: usize, config: &TrainConfig, seed: u64) -> Result<Condition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attribute = if rng.gen_bool(config.unspecified_prob) {
        AttributeConstraint::Unspecified
    } else {
        sample.attribute
    };
    let noise = sample_noise(&NoiseSpec::new(attribute, grid, grid), rng.gen());
    let q = crate::layout::Q_MAX;
    if sample.layout.is_empty() || !rng.gen_bool(config.partial_prob) {
        return Ok(Condition {
            attribute,
            noise,
            partial: PartialLayout::unconstrained(q),
            mask: None,
            model_partial: None,
        });
    }
    // half scattered box scalars, half complete elements
    let partial = if rng.gen_bool(0.5) {
        extract_partial(&sample.layout, rng.gen())?
    } else {
        whole_element_partial(&sample.layout, rng.gen())?
    };
    let (mask, model_partial) = if config.random_mask {
        let mask = sample_random_mask(&partial, rng.gen())?;
        let seen = partial.masked(&mask)?;
        (Some(mask), seen)
    } else {
        (None, partial.clone())
    };
    Ok(Condition {
        attribute,
        noise,
        partial,
        mask,
        model_partial: Some(model_partial),
    })
}

/// Trains `params` in place of a fresh initialization; `epochs = 0` returns
/// them unchanged with an empty history.
pub fn train_params(
    mut params: ModelParams,
    data: &[Sample],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    params.check()?;
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let model = params.config;
    let cells: Vec<Vec<[f64; 3]>> = data.iter().map(|s| cell_inputs(&s.saliency, model.grid)).collect();
    let mut adam = Adam::new(config.lr, &params.tensors);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step: u64 = 0;

    for epoch in 0..config.epochs {
        adam.lr = if epoch >= config.decay_epoch() {
            config.lr * 0.1
        } else {
            config.lr
        };
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[STREAM_SHUFFLE, epoch as u64]));
        order.shuffle(&mut shuffle);
        let mut sums = [0.0; 5];
        for batch in order.chunks(config.batch_size) {
            let parts = train_step(&mut params, &mut adam, data, &cells, batch, config, step)
                .map_err(|e| Error::TrainStep {
                    step: step as usize,
                    source: Box::new(e),
                })?;
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p;
            }
            history.step_totals.push(parts[4] / batch.len() as f64);
            step += 1;
        }
        let n = data.len() as f64;
        history.epochs.push(LossReport {
            l_rec: sums[0] / n,
            l_ac: sums[1] / n,
            l_ad: sums[2] / n,
            l_plrm: sums[3] / n,
            total: sums[4] / n,
        });
    }
    Ok((params, history))
}

/// One optimizer step; returns batch sums of `[l_rec, l_ac, l_ad, l_plrm, total]`.
fn train_step(
    params: &mut ModelParams,
    adam: &mut Adam,
    data: &[Sample],
    cells: &[Vec<[f64; 3]>],
    batch: &[usize],
    config: &TrainConfig,
    step: u64,
) -> Result<[f64; 5]> {
    let model = params.config;
    let conditions = batch
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            let seed = derive_seed(config.seed, &[STREAM_CONDITION, step, j as u64]);
            draw_condition(&data[i], model.grid, config, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<ModelInput<'_>> = batch
        .iter()
        .zip(&conditions)
        .map(|(&i, c)| ModelInput {
            cells: &cells[i],
            noise: &c.noise,
            partial: c.model_partial.as_ref(),
        })
        .collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = forward_batch(&mut tape, &model, &vars, &inputs)?;
    let gts: Vec<&Layout> = batch.iter().map(|&i| &data[i].layout).collect();
    let attrs: Vec<AttributeConstraint> = conditions.iter().map(|c| c.attribute).collect();
    let w = &config.weights;

    let l_rec = reconstruction_batch(&mut tape, out.logits, out.boxes, &gts)?;
    let counts = soft_counts(&mut tape, out.logits, model.queries, w.epsilon)?;
    let l_ac = attribute_consistent_batch(&mut tape, counts, &attrs)?;
    let l_ad = attribute_disentangled_batch(&mut tape, counts, &attrs)?;
    let flat = flat_prediction(&mut tape, out.logits, out.boxes)?;
    let partials: Vec<(&PartialLayout, Option<&RandomMask>)> =
        conditions.iter().map(|c| (&c.partial, c.mask.as_ref())).collect();
    let l_pl = masked_partial_batch(&mut tape, flat, &partials)?;
    let total = total_loss(&mut tape, l_rec, Some(l_ac), Some(l_ad), Some(l_pl), w)?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64)?;

    let parts = [l_rec, l_ac, l_ad, l_pl, total].map(|v| tape.scalar(v));
    let grads = tape.backward(mean)?;
    let grads: Vec<_> = vars.iter().map(|&v| grads.get(v)).collect();
    adam.step(&mut params.tensors, &grads)?;
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, DatasetSpec};

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let data = generate(&DatasetSpec::new(4, 1)).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let init = ModelParams::init(ModelConfig::default(), 5).unwrap();
        let (params, history) = train_params(init.clone(), &data, &cfg).unwrap();
        assert_eq!(params, init);
        assert!(history.epochs.is_empty() && history.step_totals.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let data = generate(&DatasetSpec::new(12, 1)).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 4, seed: 9, ..TrainConfig::default() };
        let a = train(ModelConfig::default(), &data, &cfg).unwrap();
        let b = train(ModelConfig::default(), &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.step_totals.len(), 6);
        assert_eq!(a.1.epochs.len(), 2);
    }

    #[test]
    fn decay_epoch_default() {
        let cfg = TrainConfig { epochs: 300, ..TrainConfig::default() };
        assert_eq!(cfg.decay_epoch(), 200);
        let cfg = TrainConfig { epochs: 10, ..TrainConfig::default() };
        assert_eq!(cfg.decay_epoch(), 7);
    }
}
