use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sample_flow, Adam, FlowError, FlowSample, PathConfig, StartDistribution};
use crate::datagen::Sample;
use crate::network::{NetworkError, Params, UNet};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const LOG_HEADER: &str = "step,loss,ema_loss,wall_ms";
const LOSS_SMOOTHING: f64 = 0.95;

/// Builds the completion conditioning for dataset item `index`.
pub type ExtraFn<'a> = &'a dyn Fn(usize, &mut ChaCha8Rng) -> Result<Tensor<f32>, FlowError>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_rate: f64,
    pub sigma_min: f64,
    pub t_s: f64,
    pub steps: usize,
    pub seed: u64,
    pub start: StartDistribution,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small-batch settings for training from scratch on a CPU.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 3e-4,
            ema_rate: 0.999,
            sigma_min: 1e-8,
            t_s: 0.4,
            steps: 3000,
            seed: 0,
            start: StartDistribution::Image,
            log_every: 100,
        }
    }

    /// Large-batch fine-tuning settings.
    pub fn paper() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 3e-5,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn path(&self) -> PathConfig {
        PathConfig {
            sigma_min: self.sigma_min,
            t_s: self.t_s,
            start: self.start,
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: &str| Err(FlowError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return bad("ema_rate must lie in [0, 1]");
        }
        if !(self.sigma_min.is_finite() && self.sigma_min >= 0.0) {
            return bad("sigma_min must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.t_s) {
            return bad("t_s must lie in [0, 1]");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }
}

/// Parameters, their EMA shadow and the optimiser state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: Params<f32>,
    pub ema: Params<f32>,
    pub adam: Adam,
    pub step: usize,
    smoothed: Option<f64>,
}

impl TrainState {
    pub fn new(params: Params<f32>, config: &TrainConfig) -> Self {
        Self {
            ema: params.clone(),
            adam: Adam::new(&params, config.learning_rate),
            params,
            step: 0,
            smoothed: None,
        }
    }

    /// Exponentially smoothed training loss.
    pub fn smoothed_loss(&self) -> Option<f64> {
        self.smoothed
    }
}

/// One progress line.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub ema_loss: f64,
    pub wall_ms: u128,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!("{},{:.6},{:.6},{}", self.step, self.loss, self.ema_loss, self.wall_ms)
    }
}

fn non_finite(step: usize) -> impl Fn(NetworkError) -> FlowError {
    move |e| match e {
        NetworkError::Tensor(TensorError::NonFiniteValue(_)) => FlowError::NonFiniteLoss { step, loss: f64::NAN },
        other => other.into(),
    }
}

/// Backpropagate `loss`, then take an Adam step and update the EMA.
pub(crate) fn apply_gradients(
    state: &mut TrainState,
    g: &Graph<f32>,
    vars: &[Var],
    loss: Var,
    config: &TrainConfig,
) -> Result<f64, FlowError> {
    let value = f64::from(g.value(loss).item());
    if !value.is_finite() {
        return Err(FlowError::NonFiniteLoss { step: state.step, loss: value });
    }
    let mut grads = g.backward(loss)?;
    let grads: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.take(v)).collect();
    state.adam.lr = config.learning_rate;
    state.adam.step(&mut state.params, &grads);
    super::ema_update(&mut state.ema, &state.params, config.ema_rate);
    state.step += 1;
    state.smoothed = Some(match state.smoothed {
        None => value,
        Some(s) => LOSS_SMOOTHING * s + (1.0 - LOSS_SMOOTHING) * value,
    });
    Ok(value)
}

/// One optimiser step on the flow matching loss. Returns the loss before
/// the update.
pub fn train_step(net: &UNet, state: &mut TrainState, batch: &[FlowSample], config: &TrainConfig) -> Result<f64, FlowError> {
    if batch.is_empty() {
        return Err(FlowError::Config("empty batch".into()));
    }
    let stack = |f: &dyn Fn(&FlowSample) -> Tensor<f32>| Tensor::stack(&batch.iter().map(f).collect::<Vec<_>>());
    let x_t = stack(&|s| s.x_t.clone())?;
    let cond = stack(&|s| s.cond.clone())?;
    let target = stack(&|s| s.target_u.clone())?;
    let extra = match batch[0].extra {
        Some(_) => Some(stack(&|s| s.extra.clone().expect("every sample carries extra conditioning"))?),
        None => None,
    };
    let times: Vec<f64> = batch.iter().map(|s| s.t).collect();

    let mut g = Graph::new();
    let vars = state.params.bind(&mut g);
    let xv = g.constant(x_t);
    let cv = g.constant(cond);
    let ev = extra.map(|e| g.constant(e));
    let v = net.forward(&mut g, &vars, &times, xv, cv, ev).map_err(non_finite(state.step))?;
    let tv = g.constant(target);
    let loss = g.mse(v, tv).map_err(|e| non_finite(state.step)(e.into()))?;
    apply_gradients(state, &g, &vars, loss, config)
}

/// Build a batch of flow samples for dataset `indices`.
pub fn flow_batch(
    data: &[Sample],
    indices: &[usize],
    path: &PathConfig,
    extra: Option<ExtraFn>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FlowSample>, FlowError> {
    indices
        .iter()
        .map(|&i| {
            let mut s = sample_flow(&data[i].image, &data[i].depth, path, rng)?;
            if let Some(f) = extra {
                s.extra = Some(f(i, rng)?);
            }
            Ok(s)
        })
        .collect()
}

/// Epoch-wise shuffled index stream.
pub(crate) struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchCursor {
    pub(crate) fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Independent generator for one purpose, derived from the master seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Batch order.
pub const DATA_STREAM: u64 = 1;
/// Training times, noise and extra conditioning.
pub const AUGMENT_STREAM: u64 = 2;
/// Inference noise.
pub const SAMPLE_STREAM: u64 = 3;
/// Random pairings and observation patterns in diagnostics and evaluation.
pub const DIAGNOSTIC_STREAM: u64 = 4;

/// Drive `config.steps` optimiser steps, logging every `log_every` steps and
/// after the last one.
pub(crate) fn run_steps(
    state: &mut TrainState,
    config: &TrainConfig,
    n_data: usize,
    on_log: &mut dyn FnMut(&LogRow),
    mut step: impl FnMut(&mut TrainState, &[usize]) -> Result<f64, FlowError>,
) -> Result<(), FlowError> {
    config.validate()?;
    if n_data == 0 {
        return Err(FlowError::Config("empty training set".into()));
    }
    let start = Instant::now();
    let mut cursor = BatchCursor::new(n_data, stream(config.seed, DATA_STREAM));
    for k in 1..=config.steps {
        let idx = cursor.next_batch(config.batch_size);
        let loss = step(state, &idx)?;
        if k % config.log_every == 0 || k == config.steps {
            on_log(&LogRow {
                step: state.step,
                loss,
                ema_loss: state.smoothed.unwrap_or(loss),
                wall_ms: start.elapsed().as_millis(),
            });
        }
    }
    Ok(())
}

/// Train the flow model on `data` for `config.steps` steps.
pub fn train(
    net: &UNet,
    state: &mut TrainState,
    data: &[Sample],
    config: &TrainConfig,
    extra: Option<ExtraFn>,
    on_log: &mut dyn FnMut(&LogRow),
) -> Result<(), FlowError> {
    net.check_params(&state.params)?;
    let path = config.path();
    let mut aug = stream(config.seed, AUGMENT_STREAM);
    run_steps(state, config, data.len(), on_log, |state, idx| {
        let batch = flow_batch(data, idx, &path, extra, &mut aug)?;
        train_step(net, state, &batch, config)
    })
}
