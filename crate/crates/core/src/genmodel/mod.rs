//! Toy query-based layout generator: a pooled-cell encoder conditioned on
//! attribute noise, learned queries with partial-layout injection, and two
//! perceptron heads for categories and boxes.

mod checkpoint;
mod eval;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{evaluate, PartialKind, Protocol, DECODE_MIN_AREA};
pub use train::{train, TrainConfig, TrainHistory};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::constraints::{NoiseField, PartialLayout};
use crate::error::{Error, Result};
use crate::layout::{PredictionBatch, FLAT_WIDTH, NUM_CATEGORIES, Q_MAX};
use crate::metrics::Grid;
use crate::numerics::{Tape, Tensor, Var};

/// Number of per-cell input features: saliency, x and y of the cell center.
const CELL_INPUTS: usize = 3;
/// Noise channels concatenated to every cell feature.
const NOISE_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// The saliency grid and the noise field are `grid x grid`.
    pub grid: usize,
    /// Cell feature width `f`.
    pub feature_dim: usize,
    /// Query and context width `d`.
    pub query_dim: usize,
    /// Number of queries; always `Q_MAX`.
    pub queries: usize,
    pub encoder_hidden: usize,
    pub class_hidden: usize,
    pub box_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: 8,
            feature_dim: 16,
            query_dim: 32,
            queries: Q_MAX,
            encoder_hidden: 64,
            class_hidden: 64,
            box_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.grid,
            self.feature_dim,
            self.query_dim,
            self.encoder_hidden,
            self.class_hidden,
            self.box_hidden,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!("model dimensions must be positive: {self:?}")));
        }
        if self.queries != Q_MAX {
            return Err(Error::Validation(format!(
                "query count must be {Q_MAX}, got {}",
                self.queries
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Parameter names and shapes in declaration (and checkpoint) order.
    pub fn parameter_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (f, d) = (self.feature_dim, self.query_dim);
        let (eh, ch, bh) = (self.encoder_hidden, self.class_hidden, self.box_hidden);
        vec![
            ("cell_w", vec![CELL_INPUTS, f]),
            ("cell_b", vec![1, f]),
            ("enc1_w", vec![f + NOISE_CHANNELS, eh]),
            ("enc1_b", vec![1, eh]),
            ("enc2_w", vec![eh, d]),
            ("enc2_b", vec![1, d]),
            ("queries", vec![self.queries, d]),
            ("partial_w", vec![FLAT_WIDTH, d]),
            ("cls1_w", vec![2 * d, ch]),
            ("cls1_b", vec![1, ch]),
            ("cls2_w", vec![ch, NUM_CATEGORIES]),
            ("cls2_b", vec![1, NUM_CATEGORIES]),
            ("box1_w", vec![2 * d, bh]),
            ("box1_b", vec![1, bh]),
            ("box2_w", vec![bh, 4]),
            ("box2_b", vec![1, 4]),
        ]
    }
}

/// Index of the learned query matrix among the parameters.
const QUERIES: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero, queries standard
    /// normal scaled by 0.1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .parameter_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if i == QUERIES {
                    (0..n)
                        .map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                        .collect()
                } else if name.ends_with("_b") {
                    vec![0.0; n]
                } else {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams { config, tensors })
    }

    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.parameter_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&self.tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }
}

/// Per-cell encoder inputs `[saliency, x, y]` of a saliency grid pooled to
/// `grid x grid`.
pub fn cell_inputs(saliency: &Grid, grid: usize) -> Vec<[f64; CELL_INPUTS]> {
    let pooled = if saliency.h == grid && saliency.w == grid {
        saliency.clone()
    } else {
        saliency.downsample(grid, grid)
    };
    let mut out = Vec::with_capacity(grid * grid);
    for y in 0..grid {
        for x in 0..grid {
            out.push([
                pooled.get(x, y),
                (x as f64 + 0.5) / grid as f64,
                (y as f64 + 0.5) / grid as f64,
            ]);
        }
    }
    out
}

/// One sample's generator inputs.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub cells: &'a [[f64; CELL_INPUTS]],
    pub noise: &'a NoiseField,
    pub partial: Option<&'a PartialLayout>,
}

/// Tape handles produced by [`forward_batch`], rows stacked sample-major.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[B * Q, 5]` category logits.
    pub logits: Var,
    /// `[B * Q, 4]` boxes in (0, 1).
    pub boxes: Var,
    /// `[B * Q, d]` queries after partial injection, as fed to the heads.
    pub queries: Var,
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Records a batched forward pass on `tape`; `params` are the tape handles of
/// the parameter tensors in declaration order.
pub fn forward_batch(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &[Var],
    inputs: &[ModelInput<'_>],
) -> Result<ForwardVars> {
    let b = inputs.len();
    let (cells, q) = (config.cells(), config.queries);
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut cell_data = Vec::with_capacity(b * cells * CELL_INPUTS);
    let mut noise_data = Vec::with_capacity(b * cells * NOISE_CHANNELS);
    let mut partial_data = Vec::with_capacity(b * q * FLAT_WIDTH);
    let mut any_partial = false;
    for input in inputs {
        if input.cells.len() != cells
            || input.noise.grid_h * input.noise.grid_w != cells
        {
            return Err(Error::Shape(format!(
                "model expects {cells} cells, got {} cells and {}x{} noise",
                input.cells.len(),
                input.noise.grid_h,
                input.noise.grid_w
            )));
        }
        cell_data.extend(input.cells.iter().flatten());
        for c in 0..cells {
            noise_data.extend(input.noise.cell(c));
        }
        match input.partial {
            Some(pl) => {
                if pl.q_total() != q {
                    return Err(Error::Shape(format!(
                        "partial layout has {} rows for {q} queries",
                        pl.q_total()
                    )));
                }
                // rows without any constrained slot inject nothing
                for (i, row) in pl.input_rows().iter().enumerate() {
                    if pl.row_has_presence(i) {
                        any_partial = true;
                        partial_data.extend_from_slice(row);
                    } else {
                        partial_data.extend_from_slice(&[0.0; FLAT_WIDTH]);
                    }
                }
            }
            None => partial_data.extend_from_slice(&[0.0; FLAT_WIDTH * Q_MAX]),
        }
    }
    let p = |i: usize| params[i];

    let x = tape.constant(Tensor::matrix(b * cells, CELL_INPUTS, cell_data)?);
    let noise = tape.constant(Tensor::matrix(b * cells, NOISE_CHANNELS, noise_data)?);
    let h = linear(tape, x, p(0), p(1))?;
    let h = tape.relu(h)?;
    let h = tape.concat_cols(&[h, noise])?;
    let h = linear(tape, h, p(2), p(3))?;
    let h = tape.relu(h)?;
    let pooled = tape.group_sum_rows(h, cells)?;
    let pooled = tape.scale(pooled, 1.0 / cells as f64)?;
    let ctx = linear(tape, pooled, p(4), p(5))?;
    let ctx = tape.relu(ctx)?;

    let mut queries = tape.tile_rows(p(QUERIES), b)?;
    if any_partial {
        let rows = tape.constant(Tensor::matrix(b * q, FLAT_WIDTH, partial_data)?);
        let injected = tape.matmul(rows, p(7))?;
        queries = tape.add(queries, injected)?;
    }
    let ctx_rows = tape.repeat_rows(ctx, q)?;
    let z = tape.concat_cols(&[ctx_rows, queries])?;

    let c = linear(tape, z, p(8), p(9))?;
    let c = tape.relu(c)?;
    let logits = linear(tape, c, p(10), p(11))?;
    let bx = linear(tape, z, p(12), p(13))?;
    let bx = tape.relu(bx)?;
    let bx = linear(tape, bx, p(14), p(15))?;
    let boxes = tape.sigmoid(bx)?;
    Ok(ForwardVars {
        logits,
        boxes,
        queries,
    })
}

/// Registers the parameters as constants (no gradients needed).
pub(crate) fn constant_params(tape: &mut Tape, params: &ModelParams) -> Vec<Var> {
    params.tensors.iter().map(|t| tape.constant(t.clone())).collect()
}

/// Predictions for a batch of inputs, without gradients.
pub fn predict_batch(params: &ModelParams, inputs: &[ModelInput<'_>]) -> Result<Vec<PredictionBatch>> {
    let mut tape = Tape::new();
    let vars = constant_params(&mut tape, params);
    let out = forward_batch(&mut tape, &params.config, &vars, inputs)?;
    let q = params.config.queries;
    let logits = tape.value(out.logits);
    let boxes = tape.value(out.boxes);
    (0..inputs.len())
        .map(|b| {
            let l = (0..q)
                .map(|i| std::array::from_fn(|k| logits.row(b * q + i)[k]))
                .collect();
            let bx = (0..q)
                .map(|i| std::array::from_fn(|k| boxes.row(b * q + i)[k]))
                .collect();
            PredictionBatch::from_logits(l, bx)
        })
        .collect()
}

/// Predictions for one sample; `saliency` is pooled to the model grid.
pub fn forward(
    params: &ModelParams,
    saliency: &Grid,
    noise: &NoiseField,
    partial: Option<&PartialLayout>,
) -> Result<PredictionBatch> {
    let cells = cell_inputs(saliency, params.config.grid);
    let input = ModelInput {
        cells: &cells,
        noise,
        partial,
    };
    Ok(predict_batch(params, &[input])?.remove(0))
}

/// Mixes a base seed with a path of counters into an independent seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{sample_noise, AttributeConstraint, NoiseSpec};

    fn setup() -> (ModelParams, Grid, NoiseField) {
        let params = ModelParams::init(ModelConfig::default(), 3).unwrap();
        let sal = Grid::new(16, 16, (0..256).map(|i| (i % 7) as f64 / 6.0).collect()).unwrap();
        let noise = sample_noise(&NoiseSpec::new(AttributeConstraint::LogoNoEmb, 8, 8), 4);
        (params, sal, noise)
    }

    #[test]
    fn output_ranges() {
        let (params, sal, noise) = setup();
        let pred = forward(&params, &sal, &noise, None).unwrap();
        assert_eq!(pred.len(), Q_MAX);
        for (p, b) in pred.probs().iter().zip(pred.boxes()) {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(b.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn absent_partial_equals_empty_partial() {
        let (params, sal, noise) = setup();
        let a = forward(&params, &sal, &noise, None).unwrap();
        let b = forward(&params, &sal, &noise, Some(&PartialLayout::unconstrained(Q_MAX))).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, forward(&params, &sal, &noise, None).unwrap());
    }

    #[test]
    fn injection_touches_only_constrained_rows() {
        let (params, sal, noise) = setup();
        let cells = cell_inputs(&sal, 8);
        let mut pl = PartialLayout::unconstrained(Q_MAX);
        pl.set_box(3, 0, 0.7).unwrap();
        let queries = |partial: Option<&PartialLayout>| {
            let mut tape = Tape::new();
            let vars = constant_params(&mut tape, &params);
            let input = ModelInput { cells: &cells, noise: &noise, partial };
            let out = forward_batch(&mut tape, &params.config, &vars, &[input]).unwrap();
            tape.value(out.queries).clone()
        };
        let (plain, injected) = (queries(None), queries(Some(&pl)));
        for i in 0..Q_MAX {
            assert_eq!(plain.row(i) == injected.row(i), i != 3, "row {i}");
        }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        assert_eq!(ModelParams::init(cfg, 1).unwrap(), ModelParams::init(cfg, 1).unwrap());
        assert_ne!(ModelParams::init(cfg, 1).unwrap(), ModelParams::init(cfg, 2).unwrap());
        let p = ModelParams::init(cfg, 1).unwrap();
        p.check().unwrap();
        let bound = 1.0 / 3f64.sqrt();
        assert!(p.tensors[0].data().iter().all(|v| v.abs() <= bound));
        let bad = ModelConfig { queries: 4, ..cfg };
        assert!(ModelParams::init(bad, 1).is_err());
    }
}
