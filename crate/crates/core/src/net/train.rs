//! Forward pass, hand-written backpropagation and Adam training.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::{build_network, NetworkParams};
use super::{LayerPlan, NetworkSpec, VariantKind};
use crate::conv::{self, Gram, KernelStack};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lca::{self, Competition};
use crate::rng;
use crate::tensor::Tensor;

const PROB_FLOOR: f64 = 1e-7;

/// Per-window vehicle probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGrid {
    /// `[rows, cols]` in `[0, 1]`.
    pub probs: Tensor,
    pub logits: Tensor,
}

/// What a training or evaluation example feeds the network: the raw input,
/// or the (fixed) output of the first layer computed ahead of time.
#[derive(Debug, Clone, Copy)]
pub enum Sample<'a> {
    Raw(&'a Tensor),
    Encoded(&'a Tensor),
}

/// Intermediates kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Index of the first layer actually run.
    start: usize,
    /// Padded input of each layer from `start` on.
    inputs: Vec<Tensor>,
    /// Pre-activation of each layer from `start` on.
    pre: Vec<Tensor>,
    pub grid: DetectionGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// `(weights, bias)` per layer; `None` for frozen layers.
    pub layers: Vec<Option<(Tensor, Vec<f32>)>>,
}

fn as_batched(x: &Tensor) -> Result<Tensor> {
    match x.ndim() {
        5 => Ok(x.clone()),
        4 => {
            let mut dims = vec![1];
            dims.extend_from_slice(x.dims());
            x.clone().reshape(&dims)
        }
        _ => Err(Error::shape("forward", x.dims(), &[0; 5])),
    }
}

fn add_bias(z: &mut Tensor, bias: &[f32]) {
    for row in z.data_mut().chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn relu(z: &Tensor) -> Tensor {
    z.map(|v| v.max(0.0))
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// First-layer output for a set of inputs: LCA activations for
/// [`VariantKind::SparseUnsup`], `relu(correlate + bias)` otherwise.
/// Inputs are `[t, h, w, c]` or `[1, t, h, w, c]`; outputs are 5-D.
pub fn encode_first_layer(params: &NetworkParams, spec: &NetworkSpec, inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
    let plan = spec.plan()?;
    let l0 = &plan[0];
    let layer = &params.layers[0];
    let gram = (spec.variant == VariantKind::SparseUnsup && spec.lca.competition == Competition::Gram)
        .then(|| Gram::new(&layer.kernel));
    inputs
        .par_iter()
        .map(|x| {
            let x = as_batched(x)?;
            check_input(spec, &x)?;
            let xp = conv::pad(&x, l0.pads)?;
            if spec.variant == VariantKind::SparseUnsup {
                let state = match &gram {
                    Some(g) => lca::lca_encode_with_gram(&xp, &layer.kernel, g, &spec.lca)?,
                    None => lca::lca_encode(&xp, &layer.kernel, &spec.lca)?,
                };
                Ok(state.a)
            } else {
                let mut z = conv::correlate(&xp, &layer.kernel)?;
                add_bias(&mut z, &layer.bias);
                Ok(relu(&z))
            }
        })
        .collect()
}

fn check_input(spec: &NetworkSpec, x: &Tensor) -> Result<()> {
    if x.dims() != spec.input_dims() {
        return Err(Error::shape("forward", x.dims(), &spec.input_dims()));
    }
    Ok(())
}

fn run_layers(params: &NetworkParams, plan: &[LayerPlan], start: usize, mut x: Tensor) -> Result<ForwardCache> {
    let mut inputs = Vec::with_capacity(plan.len() - start);
    let mut pre = Vec::with_capacity(plan.len() - start);
    for (lp, layer) in plan.iter().zip(&params.layers).skip(start) {
        let xp = conv::pad(&x, lp.pads)?;
        let mut z = conv::correlate(&xp, &layer.kernel)?;
        add_bias(&mut z, &layer.bias);
        x = if lp.relu { relu(&z) } else { z.clone() };
        inputs.push(xp);
        pre.push(z);
    }
    let logits = pre.last().expect("at least one layer").clone();
    let &[_, _, gr, gc, _] = logits.dims() else {
        unreachable!("correlate output is 5-D")
    };
    let logits = logits.reshape(&[gr, gc])?;
    let probs = logits.map(sigmoid);
    Ok(ForwardCache {
        start,
        inputs,
        pre,
        grid: DetectionGrid { probs, logits },
    })
}

fn check_params(params: &NetworkParams, plan: &[LayerPlan]) -> Result<()> {
    if params.len() != plan.len()
        || plan
            .iter()
            .zip(&params.layers)
            .any(|(p, l)| p.geometry != l.kernel.geometry() || l.bias.len() != p.geometry.features)
    {
        return Err(Error::Config("parameters do not match the network spec".into()));
    }
    Ok(())
}

/// Full forward pass on one `[1, t, h, w, c]` input.
pub fn forward(params: &NetworkParams, spec: &NetworkSpec, input: &Tensor) -> Result<ForwardCache> {
    let plan = spec.plan()?;
    check_params(params, &plan)?;
    let x = as_batched(input)?;
    check_input(spec, &x)?;
    if spec.variant == VariantKind::SparseUnsup {
        let first = encode_first_layer(params, spec, &[&x])?.pop().expect("one input");
        run_layers(params, &plan, 1, first)
    } else {
        run_layers(params, &plan, 0, x)
    }
}

/// Forward pass from a precomputed first-layer output.
pub fn forward_encoded(params: &NetworkParams, spec: &NetworkSpec, first: &Tensor) -> Result<ForwardCache> {
    let plan = spec.plan()?;
    check_params(params, &plan)?;
    run_layers(params, &plan, 1, first.clone())
}

fn forward_sample(params: &NetworkParams, spec: &NetworkSpec, s: Sample) -> Result<ForwardCache> {
    match s {
        Sample::Raw(x) => forward(params, spec, x),
        Sample::Encoded(a) => forward_encoded(params, spec, a),
    }
}

pub fn predict(params: &NetworkParams, spec: &NetworkSpec, input: &Tensor) -> Result<DetectionGrid> {
    Ok(forward(params, spec, input)?.grid)
}

/// Predictions for many samples, in order, computed in parallel.
pub fn predict_all(params: &NetworkParams, spec: &NetworkSpec, samples: &[Sample]) -> Result<Vec<DetectionGrid>> {
    samples
        .par_iter()
        .map(|&s| Ok(forward_sample(params, spec, s)?.grid))
        .collect()
}

/// Mean binary cross entropy over all windows, with probabilities clamped
/// to `[1e-7, 1 - 1e-7]`.
pub fn cross_entropy(probs: &Tensor, labels: &Tensor) -> Result<f64> {
    if probs.dims() != labels.dims() {
        return Err(Error::shape("cross_entropy", probs.dims(), labels.dims()));
    }
    if probs.is_empty() {
        return Err(Error::Domain("cross entropy of an empty grid".into()));
    }
    let total: f64 = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            let y = y as f64;
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Loss and parameter gradients for one forward pass.
///
/// The logit gradient is `(sigmoid(z) - y) / n`, the exact derivative of the
/// unclamped loss; it agrees with the clamped loss wherever the clamp is
/// inactive and keeps saturated windows trainable.
pub fn backward(params: &NetworkParams, spec: &NetworkSpec, cache: &ForwardCache, labels: &Tensor) -> Result<(f64, Gradients)> {
    let plan = spec.plan()?;
    let grid = &cache.grid;
    let loss = cross_entropy(&grid.probs, labels)?;
    let n = grid.probs.len() as f32;
    let mut dz = {
        let d: Vec<f32> = grid
            .probs
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&p, &y)| (p - y) / n)
            .collect();
        Tensor::new(cache.pre.last().expect("nonempty").dims(), d)?
    };
    let mut grads: Vec<Option<(Tensor, Vec<f32>)>> = vec![None; params.len()];
    let lowest_trainable = (cache.start..params.len()).find(|&l| params.layers[l].trainable);
    for l in (cache.start..params.len()).rev() {
        let i = l - cache.start;
        let layer = &params.layers[l];
        if layer.trainable {
            let gw = conv::kernel_gradient(&cache.inputs[i], &dz, &layer.kernel)?;
            let nf = layer.bias.len();
            let mut gb = vec![0.0f32; nf];
            for row in dz.data().chunks_exact(nf) {
                for (g, &v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
            grads[l] = Some((gw, gb));
        }
        match lowest_trainable {
            Some(low) if low < l => {}
            _ => break,
        }
        let dx = conv::reconstruct(&dz, &layer.kernel)?;
        let dy = conv::crop(&dx, plan[l].pads)?;
        let below = &cache.pre[i - 1];
        dz = if plan[l - 1].relu {
            let d: Vec<f32> = dy
                .data()
                .iter()
                .zip(below.data())
                .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                .collect();
            Tensor::new(below.dims(), d)?
        } else {
            dy
        };
    }
    Ok((loss, Gradients { layers: grads }))
}

/// Adam optimiser state (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    /// First and second moments, weights then bias, per layer.
    moments: Vec<[Vec<f32>; 4]>,
}

impl Adam {
    pub fn new(params: &NetworkParams) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: params
                .layers
                .iter()
                .map(|l| {
                    let w = l.kernel.weights().len();
                    let b = l.bias.len();
                    [vec![0.0; w], vec![0.0; w], vec![0.0; b], vec![0.0; b]]
                })
                .collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn update(&mut self, params: &mut NetworkParams, grads: &Gradients, lr: f32) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let step = |w: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]| {
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        };
        for ((layer, g), mom) in params.layers.iter_mut().zip(&grads.layers).zip(&mut self.moments) {
            let (Some((gw, gb)), true) = (g, layer.trainable) else {
                continue;
            };
            let [mw, vw, mb, vb] = mom;
            step(layer.kernel.weights_mut().data_mut(), gw.data(), mw, vw);
            step(&mut layer.bias, gb, mb, vb);
        }
    }
}

fn sum_gradients(mut parts: Vec<Gradients>) -> Gradients {
    let mut acc = parts.remove(0);
    for g in parts {
        for (a, b) in acc.layers.iter_mut().zip(g.layers) {
            if let (Some((aw, ab)), Some((bw, bb))) = (a.as_mut(), b) {
                aw.axpy(1.0, &bw).expect("same dims");
                ab.iter_mut().zip(bb).for_each(|(x, y)| *x += y);
            }
        }
    }
    acc
}

/// One optimiser step on a minibatch. Example gradients are computed in
/// parallel and reduced in batch order; the loss is the batch mean.
pub fn train_step(
    params: &mut NetworkParams,
    spec: &NetworkSpec,
    batch: &[(Sample, &Tensor)],
    adam: &mut Adam,
    lr: f32,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let results: Vec<(f64, Gradients)> = batch
        .par_iter()
        .map(|&(s, y)| {
            let cache = forward_sample(params, spec, s)?;
            backward(params, spec, &cache, y)
        })
        .collect::<Result<_>>()?;
    let n = results.len();
    let loss = results.iter().map(|r| r.0).sum::<f64>() / n as f64;
    if !loss.is_finite() {
        return Err(Error::TrainingDivergence {
            step: adam.steps() as usize,
        });
    }
    let mut g = sum_gradients(results.into_iter().map(|r| r.1).collect());
    let inv = 1.0 / n as f32;
    for (w, b) in g.layers.iter_mut().flatten() {
        w.scale(inv);
        b.iter_mut().for_each(|v| *v *= inv);
    }
    if g.layers.iter().flatten().any(|(w, b)| !w.is_finite() || b.iter().any(|v| !v.is_finite())) {
        return Err(Error::TrainingDivergence {
            step: adam.steps() as usize,
        });
    }
    adam.update(params, &g, lr);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    /// Mean training loss at initialisation.
    pub initial_loss: f64,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Dataset indices of the training subset, in draw order.
    pub subset: Vec<usize>,
}

/// Train a detector on a seeded subset of `n_train` examples.
///
/// `seed` fixes the higher-layer initialisation, the subset and every
/// epoch's presentation order. When the first layer is frozen its outputs are
/// computed once up front; `first_cache`, if given, must hold them for every
/// example of `data` and is used instead.
pub fn train_detector(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    dict: Option<&KernelStack>,
    data: &Dataset,
    n_train: usize,
    seed: u64,
    first_cache: Option<&[Tensor]>,
) -> Result<TrainOutcome> {
    if n_train == 0 {
        return Err(Error::Config("n_train must be positive".into()));
    }
    if n_train > data.len() {
        return Err(Error::Config(format!(
            "n_train {n_train} exceeds the {} available examples",
            data.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut params = build_network(spec, dict, seed)?;
    let subset: Vec<usize> = data.shuffled_indices(seed).into_iter().take(n_train).collect();

    let frozen_first = !params.layers[0].trainable;
    let own_cache: Vec<Tensor>;
    let encoded: Option<Vec<&Tensor>> = if !frozen_first {
        None
    } else if let Some(c) = first_cache {
        if c.len() != data.len() {
            return Err(Error::Config(format!(
                "first-layer cache holds {} entries for {} examples",
                c.len(),
                data.len()
            )));
        }
        Some(subset.iter().map(|&i| &c[i]).collect())
    } else {
        let inputs: Vec<&Tensor> = subset.iter().map(|&i| &data.examples[i].input).collect();
        own_cache = encode_first_layer(&params, spec, &inputs)?;
        Some(own_cache.iter().collect())
    };
    let sample = |k: usize| match &encoded {
        Some(e) => Sample::Encoded(e[k]),
        None => Sample::Raw(&data.examples[subset[k]].input),
    };

    let initial: Vec<f64> = (0..n_train)
        .into_par_iter()
        .map(|k| {
            let g = forward_sample(&params, spec, sample(k))?.grid;
            cross_entropy(&g.probs, &data.examples[subset[k]].labels)
        })
        .collect::<Result<_>>()?;
    let initial_loss = initial.iter().sum::<f64>() / n_train as f64;

    let mut adam = Adam::new(&params);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::derived(seed, 0xe90c_0000 + epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(Sample, &Tensor)> = chunk
                .iter()
                .map(|&k| (sample(k), &data.examples[subset[k]].labels))
                .collect();
            total += train_step(&mut params, spec, &batch, &mut adam, cfg.lr)?;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("{} epoch {epoch}: loss {mean:.5}", spec.variant);
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome {
        params,
        initial_loss,
        epoch_losses,
        subset,
    })
}
