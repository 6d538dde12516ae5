//! Evaluation protocols: attribute-conditioned generation and partial-layout
//! completion, both summarized as a [`MetricReport`].

use rayon::prelude::*;

use super::{cell_inputs, derive_seed, predict_batch, ModelInput, ModelParams};
use crate::constraints::{sample_noise, AttributeConstraint, NoiseSpec, PartialLayout};
use crate::error::Result;
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::synthdata::{coordinates_only_partial, extract_partial, Sample};

/// Decoded boxes with a smaller area are dropped.
pub const DECODE_MIN_AREA: f64 = 1e-4;

/// Samples per evaluation shard; shards merge in order, so reports do not
/// depend on the number of worker threads.
const SHARD: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartialKind {
    /// A quarter of the box scalars, as stored in the dataset.
    Random,
    /// All four coordinates, without category, of random elements.
    CoordinatesOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Generate every sample under this attribute, without partial layouts.
    Attribute(AttributeConstraint),
    /// Generate every sample under its own attribute label from a freshly
    /// drawn partial layout of its ground truth; reports `r_plc`.
    Partial(PartialKind),
}

/// Runs `protocol` over `data`, deterministic in `seed`.
pub fn evaluate(
    params: &ModelParams,
    data: &[Sample],
    protocol: Protocol,
    seed: u64,
) -> Result<MetricReport> {
    params.check()?;
    let shards: Vec<MetricAccumulator> = data
        .par_chunks(SHARD)
        .enumerate()
        .map(|(k, shard)| evaluate_shard(params, shard, k * SHARD, protocol, seed))
        .collect::<Result<_>>()?;
    let mut acc = new_accumulator(protocol)?;
    for s in &shards {
        acc.merge(s);
    }
    acc.finish()
}

fn new_accumulator(protocol: Protocol) -> Result<MetricAccumulator> {
    match protocol {
        Protocol::Attribute(a) if a != AttributeConstraint::Unspecified => {
            MetricAccumulator::with_attribute(a)
        }
        _ => Ok(MetricAccumulator::new()),
    }
}

fn evaluate_shard(
    params: &ModelParams,
    shard: &[Sample],
    offset: usize,
    protocol: Protocol,
    seed: u64,
) -> Result<MetricAccumulator> {
    let grid = params.config.grid;
    let mut noises = Vec::with_capacity(shard.len());
    let mut partials: Vec<Option<PartialLayout>> = Vec::with_capacity(shard.len());
    for (j, s) in shard.iter().enumerate() {
        let sample_seed = derive_seed(seed, &[(offset + j) as u64]);
        let (attr, partial) = match protocol {
            Protocol::Attribute(a) => (a, None),
            Protocol::Partial(kind) => {
                let pl_seed = derive_seed(sample_seed, &[1]);
                let pl = match kind {
                    PartialKind::Random => extract_partial(&s.layout, pl_seed)?,
                    PartialKind::CoordinatesOnly => coordinates_only_partial(&s.layout, pl_seed)?,
                };
                (s.attribute, Some(pl))
            }
        };
        noises.push(sample_noise(&NoiseSpec::new(attr, grid, grid), sample_seed));
        partials.push(partial);
    }
    let cells: Vec<_> = shard.iter().map(|s| cell_inputs(&s.saliency, grid)).collect();
    let inputs: Vec<ModelInput<'_>> = (0..shard.len())
        .map(|j| ModelInput {
            cells: &cells[j],
            noise: &noises[j],
            partial: partials[j].as_ref(),
        })
        .collect();
    let preds = predict_batch(params, &inputs)?;

    let mut acc = new_accumulator(protocol)?;
    for ((s, pred), pl) in shard.iter().zip(&preds).zip(&partials) {
        acc.add(&pred.decode(DECODE_MIN_AREA), &s.saliency, &s.attention)?;
        if let Some(pl) = pl {
            acc.add_partial(&pred.flatten(), pl)?;
        }
    }
    Ok(acc)
}
