//! Unsupervised dictionary learning: alternate LCA inference with a single
//! gradient step on the dictionary, then project every atom back to unit L2
//! norm.

use std::collections::VecDeque;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{self, Geometry, Gram, KernelStack};
use crate::error::{Error, Result};
use crate::lca::{self, Competition, EnergyReport, LcaConfig};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Atoms whose mean |activation| over this many recent batches stays below
/// [`DEAD_ATOM_LEVEL`] are re-drawn from noise.
pub const DEAD_ATOM_WINDOW: usize = 100;
pub const DEAD_ATOM_LEVEL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DictTrainConfig {
    pub lr: f32,
    pub batches: usize,
    pub batch_size: usize,
    pub lca: LcaConfig,
    pub seed: u64,
    pub features: usize,
    /// Kernel extent `(kt, kh, kw)`.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl Default for DictTrainConfig {
    fn default() -> Self {
        DictTrainConfig {
            lr: 0.01,
            batches: 1000,
            batch_size: 8,
            lca: LcaConfig {
                competition: Competition::Gram,
                ..LcaConfig::default()
            },
            seed: 1,
            features: 64,
            kernel: [3, 8, 8],
            stride: [1, 2, 2],
        }
    }
}

impl DictTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.features == 0 {
            return Err(Error::Config("batch_size and features must be positive".into()));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::Config("kernel extent and stride must be positive".into()));
        }
        self.lca.validate()
    }

    pub fn geometry(&self, in_channels: usize) -> Geometry {
        Geometry {
            features: self.features,
            extent: self.kernel,
            in_channels,
            stride: self.stride,
        }
    }

    /// Step size for the zero-based batch index: constant for the first
    /// half, then `lr * sqrt(half / t)`.
    pub fn lr_at(&self, batch: usize) -> f32 {
        let half = (self.batches / 2).max(1);
        if batch < half {
            self.lr
        } else {
            self.lr * (half as f32 / (batch + 1) as f32).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    /// Batch means of the energy terms (`nnz` is the mean count).
    pub recon_err: f64,
    pub sparsity: f64,
    pub total: f64,
    pub nnz: f64,
    pub nnz_fraction: f64,
    /// Largest `| ||atom|| - 1 |` right after this batch's update.
    pub max_norm_deviation: f64,
    pub reinitialized: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DictHistory {
    pub batches: Vec<BatchRecord>,
}

impl DictHistory {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Trailing moving average of the batch energies.
    pub fn smoothed_totals(&self, window: usize) -> Vec<f64> {
        let totals: Vec<f64> = self.batches.iter().map(|b| b.total).collect();
        (0..totals.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window);
                totals[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    /// Over the final half of training, no smoothed energy exceeds the
    /// running minimum of that half by more than `tol` (relative).
    pub fn is_settling(&self, window: usize, tol: f64) -> bool {
        let s = self.smoothed_totals(window);
        let start = s.len() / 2;
        let mut best = f64::INFINITY;
        for &v in &s[start..] {
            if v > best * (1.0 + tol) {
                return false;
            }
            best = best.min(v);
        }
        true
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch,recon_err,sparsity,total,nnz,nnz_fraction\n");
        for (i, b) in self.batches.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i, b.recon_err, b.sparsity, b.total, b.nnz, b.nnz_fraction
            ));
        }
        out
    }
}

fn fill_unit_gaussian(atom: &mut [f32], rng: &mut Rng) {
    loop {
        for v in atom.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let n = atom.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if n > 0.0 {
            atom.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
            return;
        }
    }
}

/// Seeded i.i.d. Gaussian atoms, each scaled to unit norm.
pub fn init_dictionary(geom: Geometry, seed: u64) -> Result<KernelStack> {
    let mut k = KernelStack::zeros(geom)?;
    let mut rng = rng::derived(seed, 0xd1c7);
    for f in 0..k.features() {
        fill_unit_gaussian(k.atom_mut(f), &mut rng);
    }
    Ok(k)
}

/// Largest `| ||atom|| - 1 |` over the dictionary.
pub fn max_norm_deviation(phi: &KernelStack) -> f64 {
    (0..phi.features())
        .map(|f| {
            let n = phi.atom(f).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            (n - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

/// Gradient of the sparse-coding energy with respect to the dictionary
/// weights at fixed activations: `-sum_s a[s, f] * residual[s*stride + o]`.
pub fn dict_gradient(input: &Tensor, a: &Tensor, phi: &KernelStack) -> Result<Tensor> {
    let recon = conv::reconstruct(a, phi)?;
    if recon.dims() != input.dims() {
        return Err(Error::shape("dict_gradient", input.dims(), recon.dims()));
    }
    let residual = input.sub(&recon)?;
    let mut g = conv::kernel_gradient(&residual, a, phi)?;
    g.scale(-1.0);
    Ok(g)
}

/// `phi - lr * grad`, then every atom rescaled to unit norm. An atom that
/// collapses to zero is redrawn from unit-scaled Gaussian noise.
pub fn dict_update(phi: &KernelStack, grad: &Tensor, lr: f32, rng: &mut Rng) -> Result<KernelStack> {
    if !(lr > 0.0) {
        return Err(Error::Domain(format!("lr must be positive, got {lr}")));
    }
    if grad.dims() != phi.weights().dims() {
        return Err(Error::shape("dict_update", phi.weights().dims(), grad.dims()));
    }
    let mut next = phi.clone();
    next.weights_mut().axpy(-lr, grad)?;
    normalize_atoms(&mut next, rng);
    Ok(next)
}

fn normalize_atoms(phi: &mut KernelStack, rng: &mut Rng) {
    for f in 0..phi.features() {
        let atom = phi.atom_mut(f);
        let n = atom.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            atom.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
        } else {
            fill_unit_gaussian(atom, rng);
        }
    }
}

fn as_batch(t: Tensor) -> Result<Tensor> {
    match t.ndim() {
        5 => Ok(t),
        4 => {
            let mut dims = vec![1];
            dims.extend_from_slice(t.dims());
            t.reshape(&dims)
        }
        _ => Err(Error::shape("train_dictionary", t.dims(), &[0; 5])),
    }
}

struct ItemResult {
    grad: Tensor,
    report: EnergyReport,
    size: usize,
    abs_per_atom: Vec<f64>,
}

fn process_item(input: &Tensor, phi: &KernelStack, gram: Option<&Gram>, cfg: &LcaConfig) -> Result<ItemResult> {
    let state = match gram {
        Some(g) => lca::lca_encode_with_gram(input, phi, g, cfg)?,
        None => lca::lca_encode(input, phi, cfg)?,
    };
    let grad = dict_gradient(input, &state.a, phi)?;
    let nf = phi.features();
    let mut abs_per_atom = vec![0.0f64; nf];
    for (i, &v) in state.a.data().iter().enumerate() {
        abs_per_atom[i % nf] += (v as f64).abs();
    }
    let sites = (state.a.len() / nf) as f64;
    abs_per_atom.iter_mut().for_each(|v| *v /= sites);
    Ok(ItemResult {
        grad,
        report: *state.last_energy().expect("trace is never empty"),
        size: state.a.len(),
        abs_per_atom,
    })
}

/// Learn a dictionary from a stream of inputs (`[t, h, w, c]` or
/// `[b, t, h, w, c]`), consumed `batch_size` items at a time for at most
/// `cfg.batches` batches. A short final batch is dropped.
pub fn train_dictionary(
    data: impl IntoIterator<Item = Tensor>,
    init: Option<KernelStack>,
    cfg: &DictTrainConfig,
) -> Result<(KernelStack, DictHistory)> {
    cfg.validate()?;
    let mut history = DictHistory::default();
    let mut data = data.into_iter();
    let mut phi = init;
    let mut rng = rng::derived(cfg.seed, 0xba7c);
    let mut recent: VecDeque<Vec<f64>> = VecDeque::with_capacity(DEAD_ATOM_WINDOW);

    for batch in 0..cfg.batches {
        let items: Vec<Tensor> = data
            .by_ref()
            .take(cfg.batch_size)
            .map(as_batch)
            .collect::<Result<_>>()?;
        if items.len() < cfg.batch_size {
            break;
        }
        let dims = items[0].dims().to_vec();
        if let Some(bad) = items.iter().find(|t| t.dims() != dims.as_slice()) {
            return Err(Error::shape("train_dictionary", &dims, bad.dims()));
        }
        let phi_ref = match &phi {
            Some(p) => p,
            None => phi.insert(init_dictionary(cfg.geometry(dims[4]), cfg.seed)?),
        };
        let gram = (cfg.lca.competition == Competition::Gram).then(|| Gram::new(phi_ref));
        let results: Vec<ItemResult> = items
            .par_iter()
            .map(|x| process_item(x, phi_ref, gram.as_ref(), &cfg.lca))
            .collect::<Result<_>>()
            .map_err(|e| Error::AtBatch {
                batch,
                source: Box::new(e),
            })?;

        let n = results.len() as f64;
        let mut grad = Tensor::zeros(phi_ref.weights().dims());
        let mut record = BatchRecord {
            recon_err: 0.0,
            sparsity: 0.0,
            total: 0.0,
            nnz: 0.0,
            nnz_fraction: 0.0,
            max_norm_deviation: 0.0,
            reinitialized: 0,
        };
        let mut usage = vec![0.0f64; phi_ref.features()];
        for r in &results {
            grad.axpy(1.0 / n as f32, &r.grad)?;
            record.recon_err += r.report.recon_err / n;
            record.sparsity += r.report.sparsity / n;
            record.total += r.report.total / n;
            record.nnz += r.report.nnz as f64 / n;
            record.nnz_fraction += r.report.nnz as f64 / r.size as f64 / n;
            for (u, v) in usage.iter_mut().zip(&r.abs_per_atom) {
                *u += v / n;
            }
        }

        let mut next = dict_update(phi_ref, &grad, cfg.lr_at(batch), &mut rng)?;

        if recent.len() == DEAD_ATOM_WINDOW {
            recent.pop_front();
        }
        recent.push_back(usage);
        if recent.len() == DEAD_ATOM_WINDOW {
            for f in 0..next.features() {
                let mean = recent.iter().map(|u| u[f]).sum::<f64>() / DEAD_ATOM_WINDOW as f64;
                if mean < DEAD_ATOM_LEVEL {
                    fill_unit_gaussian(next.atom_mut(f), &mut rng);
                    record.reinitialized += 1;
                    // Give the fresh atom a full window before judging it again.
                    for u in recent.iter_mut() {
                        u[f] = f64::INFINITY;
                    }
                }
            }
        }
        record.max_norm_deviation = max_norm_deviation(&next);
        log::debug!(
            "dict batch {batch}: energy {:.4} nnz {:.3}",
            record.total,
            record.nnz_fraction
        );
        history.batches.push(record);
        phi = Some(next);
    }

    // Without a supplied dictionary and without data the input channel count
    // is unknown, so there is nothing sensible to return.
    let phi = phi.ok_or_else(|| {
        Error::Config("no batches were run and no initial dictionary was supplied".into())
    })?;
    Ok((phi, history))
}
