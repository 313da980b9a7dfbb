//! Two-phase training.
//!
//! Phase 1 fits the encoder and consensus encoder on the correspondence
//! loss over every pair. Phase 2 freezes them, caches node embeddings and
//! fits the pose network on the pose loss over pairs labelled overlapping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::encoder::GraphStructure;
use crate::matcher::high_loss;
use crate::model::{ModelError, NopeModel};
use crate::nn::{ForwardCtx, ParamSet};
use crate::pose::low_loss;
use crate::synth::{derive_seed, InstancePair};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    High,
    Low,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: f64,
    pub instances: usize,
    pub seconds: f64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss in {phase:?} phase, epoch {epoch}")]
    Divergence {
        phase: Phase,
        epoch: usize,
        /// Parameters before the offending step.
        last_finite: Box<NopeModel>,
        log: Vec<EpochLog>,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: NopeModel,
    pub log: Vec<EpochLog>,
}

/// Adam with the usual bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.values().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update for the parameters that have a gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f64>>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, value) in params.values_mut().iter_mut().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, g), m), v) in value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

struct Sample {
    loss: f64,
    grads: Vec<Option<Vec<f64>>>,
}

fn collect_grads(tape: &Tape, vars: &[crate::tensor::Var], mask: &[bool]) -> Vec<Option<Vec<f64>>> {
    vars.iter()
        .zip(mask)
        .map(|(v, keep)| if *keep { tape.grad(*v).map(<[f64]>::to_vec) } else { None })
        .collect()
}

fn accumulate(into: &mut [Option<Vec<f64>>], from: Vec<Option<Vec<f64>>>, weight: f64) {
    for (acc, g) in into.iter_mut().zip(from) {
        let Some(g) = g else { continue };
        match acc {
            Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += weight * y),
            None => *acc = Some(g.into_iter().map(|y| weight * y).collect()),
        }
    }
}

fn all_finite(grads: &[Option<Vec<f64>>]) -> bool {
    grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
}

fn high_sample(
    model: &NopeModel,
    pair: &InstancePair,
    structs: &(GraphStructure, GraphStructure),
    mask: &[bool],
    seed: u64,
) -> Result<Sample, ModelError> {
    let c = &model.config;
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, true);
    let mut ctx = ForwardCtx::training(c.attn_dropout, c.mlp_dropout, seed);
    let out = model.high_forward(
        &mut tape,
        &b,
        &pair.ego,
        &pair.mate,
        &structs.0,
        &structs.1,
        &mut ctx,
        c.use_consensus,
    )?;
    let loss = high_loss(&mut tape, out.scores, c.tau, &pair.truth)?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    Ok(Sample {
        loss: value,
        grads: collect_grads(&tape, b.vars(), mask),
    })
}

fn low_sample(model: &NopeModel, cached: &(Tensor, Tensor, InstancePair), mask: &[bool], seed: u64) -> Result<Sample, ModelError> {
    let c = &model.config;
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, true);
    let mut ctx = ForwardCtx::training(c.attn_dropout, c.mlp_dropout, seed);
    let e = tape.constant(cached.0.clone());
    let m = tape.constant(cached.1.clone());
    let out = model.pose.forward(&mut tape, &b, e, m, &mut ctx)?;
    let (total, _, _) = low_loss(&mut tape, out.position, out.orientation, &cached.2.pose)?;
    let value = tape.value(total).data()[0];
    tape.backward(total)?;
    Ok(Sample {
        loss: value,
        grads: collect_grads(&tape, b.vars(), mask),
    })
}

fn params_finite(p: &ParamSet) -> bool {
    p.values().iter().all(|t| t.data().iter().all(|v| v.is_finite()))
}

/// Runs `epochs` passes of minibatch Adam over `count` items.
#[allow(clippy::too_many_arguments)]
fn run_phase<F>(
    model: &mut NopeModel,
    phase: Phase,
    epochs: usize,
    count: usize,
    mask: &[bool],
    log: &mut Vec<EpochLog>,
    on_epoch: &mut dyn FnMut(&EpochLog),
    sample: F,
) -> Result<(), TrainError>
where
    F: Fn(&NopeModel, usize, u64) -> Result<Sample, ModelError> + Sync,
{
    if count == 0 || epochs == 0 {
        return Ok(());
    }
    let c = model.config.clone();
    let mut adam = Adam::new(&model.params, c.learning_rate);
    let tag = match phase {
        Phase::High => 0x41u64,
        Phase::Low => 0x42u64,
    };
    for epoch in 0..epochs {
        let start = std::time::Instant::now();
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(c.seed, tag << 32 | epoch as u64)));
        let mut total = 0.0;
        for batch in order.chunks(c.batch_size) {
            let step = model.step;
            let snapshot: &NopeModel = model;
            let samples: Vec<Result<Sample, ModelError>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| sample(snapshot, idx, derive_seed(c.seed ^ tag, step * 4096 + k as u64)))
                .collect();
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; mask.len()];
            let weight = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            let mut overflow = false;
            for s in samples {
                match s {
                    Ok(s) => {
                        batch_loss += s.loss;
                        accumulate(&mut grads, s.grads, weight);
                    }
                    // overflowing activations are a symptom of divergence too
                    Err(ModelError::Tensor(TensorError::NonFinite(_))) => overflow = true,
                    Err(e) => return Err(e.into()),
                }
            }
            let mut trial = model.params.clone();
            if !overflow && batch_loss.is_finite() && all_finite(&grads) {
                adam.step(&mut trial, &grads);
            }
            if overflow || !batch_loss.is_finite() || !all_finite(&grads) || !params_finite(&trial) {
                return Err(TrainError::Divergence {
                    phase,
                    epoch: epoch + 1,
                    last_finite: Box::new(model.clone()),
                    log: log.clone(),
                });
            }
            total += batch_loss;
            model.params = trial;
            model.step += 1;
        }
        let entry = EpochLog {
            phase,
            epoch: epoch + 1,
            loss: total / count as f64,
            instances: count,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(())
}

/// Trains a freshly initialised model.
pub fn train(config: &RunConfig, data: &[InstancePair], on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome, TrainError> {
    train_from(NopeModel::new(config)?, data, on_epoch)
}

/// Continues training `model` with its own configuration.
pub fn train_from(
    mut model: NopeModel,
    data: &[InstancePair],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for p in data {
        model.check_graph(&p.ego)?;
        model.check_graph(&p.mate)?;
    }
    let c = model.config.clone();
    let high: Vec<bool> = (0..model.params.len()).map(|k| model.is_high_level(k)).collect();
    let low: Vec<bool> = high.iter().map(|h| !h).collect();
    let mut log = Vec::new();

    if c.train_high {
        let structs: Vec<(GraphStructure, GraphStructure)> = data
            .iter()
            .map(|p| (GraphStructure::from_graph(&p.ego), GraphStructure::from_graph(&p.mate)))
            .collect();
        run_phase(
            &mut model,
            Phase::High,
            c.high_epochs(),
            data.len(),
            &high,
            &mut log,
            &mut on_epoch,
            |m, idx, seed| high_sample(m, &data[idx], &structs[idx], &high, seed),
        )?;
    }

    if c.train_low {
        let cached: Vec<(Tensor, Tensor, InstancePair)> = data
            .par_iter()
            .filter(|p| p.overlap && !p.ego.is_empty() && !p.mate.is_empty())
            .map(|p| -> Result<_, ModelError> {
                let e = model.encoder.encode(&model.params, &p.ego)?;
                let m = model.encoder.encode(&model.params, &p.mate)?;
                Ok((e, m, p.clone()))
            })
            .collect::<Result<_, _>>()?;
        let count = cached.len();
        run_phase(
            &mut model,
            Phase::Low,
            c.low_epochs(),
            count,
            &low,
            &mut log,
            &mut on_epoch,
            |m, idx, seed| low_sample(m, &cached[idx], &low, seed),
        )?;
    }
    Ok(TrainOutcome { model, log })
}
