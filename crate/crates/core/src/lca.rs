//! Sparse inference with the locally competitive algorithm (LCA).
//!
//! Given an input `I` and a convolutional dictionary `Phi`, LCA integrates
//!
//! ```text
//! u <- u + (dt / tau) * (Phi^T (I - Phi a) + a - u),    a = soft_threshold(u, lambda)
//! ```
//!
//! whose fixed points minimise `1/2 ||I - Phi a||^2 + lambda ||a||_1`.
//! The competition term `Phi^T (I - Phi a)` is evaluated either from the
//! residual (two dense convolution passes per step) or from the dictionary's
//! gram kernel applied to the sparse activations; see [`Competition`].

use serde::{Deserialize, Serialize};

use crate::conv::{self, correlate, reconstruct, Gram, KernelStack};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Competition {
    /// `correlate(I - reconstruct(a), Phi) + a`.
    #[default]
    Residual,
    /// `correlate(I, Phi) - Gram(a) + a`, with `correlate(I, Phi)` computed once.
    Gram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LcaConfig {
    pub lambda: f32,
    pub tau: f32,
    pub dt: f32,
    pub max_iters: usize,
    /// Relative energy change below which the run counts as converged.
    pub stop_tol: f64,
    pub competition: Competition,
}

impl Default for LcaConfig {
    fn default() -> Self {
        LcaConfig {
            lambda: 0.1,
            tau: 1.0,
            dt: 0.1,
            max_iters: 400,
            stop_tol: 1e-4,
            competition: Competition::Residual,
        }
    }
}

impl LcaConfig {
    pub fn eta(&self) -> f32 {
        self.dt / self.tau
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.tau > 0.0) || !(self.dt > 0.0) {
            return bad(format!("tau and dt must be positive, got tau={} dt={}", self.tau, self.dt));
        }
        if self.dt > self.tau {
            return bad(format!("dt/tau must lie in (0, 1], got {}", self.eta()));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive".into());
        }
        if !(self.stop_tol >= 0.0) {
            return bad(format!("stop_tol must be >= 0, got {}", self.stop_tol));
        }
        Ok(())
    }
}

/// The three terms of the sparse-coding energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// `1/2 ||I - a (*) Phi||^2`
    pub recon_err: f64,
    /// `||a||_1`
    pub sparsity: f64,
    /// `recon_err + lambda * sparsity`
    pub total: f64,
    pub nnz: usize,
}

impl EnergyReport {
    fn new(recon_err: f64, sparsity: f64, lambda: f32, nnz: usize) -> Self {
        let recon_err = recon_err.max(0.0);
        EnergyReport {
            recon_err,
            sparsity,
            total: recon_err + lambda as f64 * sparsity,
            nnz,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LcaState {
    /// Membrane potentials.
    pub u: Tensor,
    /// `soft_threshold(u, lambda)`.
    pub a: Tensor,
    pub energy_trace: Vec<EnergyReport>,
}

impl LcaState {
    /// The all-zero state for an input/dictionary pair.
    pub fn zeros(input: &Tensor, phi: &KernelStack) -> Result<Self> {
        let dims = conv::output_dims(input.dims(), phi)?;
        Ok(LcaState {
            u: Tensor::zeros(&dims),
            a: Tensor::zeros(&dims),
            energy_trace: Vec::new(),
        })
    }

    pub fn last_energy(&self) -> Option<&EnergyReport> {
        self.energy_trace.last()
    }

    /// Number of integration steps taken (the trace's first entry is the
    /// energy of the zero state).
    pub fn iterations(&self) -> usize {
        self.energy_trace.len().saturating_sub(1)
    }
}

#[inline]
fn shrink(u: f32, lambda: f32) -> f32 {
    if u > lambda {
        u - lambda
    } else if u < -lambda {
        u + lambda
    } else {
        0.0
    }
}

/// Elementwise `sign(u) * max(|u| - lambda, 0)`.
pub fn soft_threshold(u: &Tensor, lambda: f32) -> Result<Tensor> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("threshold must be >= 0, got {lambda}")));
    }
    Ok(u.map(|v| shrink(v, lambda)))
}

/// Evaluate the sparse-coding energy of activations `a` for input `input`.
pub fn energy(input: &Tensor, a: &Tensor, phi: &KernelStack, lambda: f32) -> Result<EnergyReport> {
    let recon = reconstruct(a, phi)?;
    if recon.dims() != input.dims() {
        return Err(Error::shape("energy", input.dims(), recon.dims()));
    }
    let residual = input.sub(&recon)?;
    Ok(EnergyReport::new(
        0.5 * residual.sum_sq(),
        a.l1_norm(),
        lambda,
        a.count_nonzero(),
    ))
}

/// One explicit-Euler LCA step in residual form; appends the energy of the
/// updated state to its trace.
pub fn lca_step(mut state: LcaState, input: &Tensor, phi: &KernelStack, cfg: &LcaConfig) -> Result<LcaState> {
    let expect = conv::output_dims(input.dims(), phi)?;
    if state.u.dims() != expect || state.a.dims() != expect {
        return Err(Error::shape("lca_step", state.u.dims(), &expect));
    }
    let residual = input.sub(&reconstruct(&state.a, phi)?)?;
    let mut drive = correlate(&residual, phi)?;
    drive.axpy(1.0, &state.a)?;
    let eta = cfg.eta();
    for (u, &d) in state.u.data_mut().iter_mut().zip(drive.data()) {
        *u += eta * (d - *u);
    }
    state.a = soft_threshold(&state.u, cfg.lambda)?;
    let report = energy(input, &state.a, phi, cfg.lambda)?;
    state.energy_trace.push(report);
    Ok(state)
}

/// Drive term and energy of the current activations for one of the two
/// competition routes.
trait Dynamics {
    /// Write `Phi^T (I - Phi a) + a` into `drive` and return the energy of `a`.
    fn evaluate(&mut self, a: &Tensor, lambda: f32, drive: &mut [f32]) -> Result<EnergyReport>;
}

struct ResidualDynamics<'a> {
    input: &'a Tensor,
    phi: &'a KernelStack,
}

impl Dynamics for ResidualDynamics<'_> {
    fn evaluate(&mut self, a: &Tensor, lambda: f32, drive: &mut [f32]) -> Result<EnergyReport> {
        let residual = self.input.sub(&reconstruct(a, self.phi)?)?;
        let c = correlate(&residual, self.phi)?;
        for ((d, &cv), &av) in drive.iter_mut().zip(c.data()).zip(a.data()) {
            *d = cv + av;
        }
        Ok(EnergyReport::new(
            0.5 * residual.sum_sq(),
            a.l1_norm(),
            lambda,
            a.count_nonzero(),
        ))
    }
}

struct GramDynamics {
    /// `Phi^T I`
    feed: Vec<f32>,
    gram: Gram,
    half_input_sq: f64,
    scratch: Vec<f64>,
}

impl Dynamics for GramDynamics {
    fn evaluate(&mut self, a: &Tensor, lambda: f32, drive: &mut [f32]) -> Result<EnergyReport> {
        self.scratch.iter_mut().for_each(|v| *v = 0.0);
        self.gram.apply(a.dims(), a.data(), &mut self.scratch);
        // 1/2||I - Phi a||^2 = 1/2||I||^2 - <a, Phi^T I> + 1/2 <a, Phi^T Phi a>
        let mut cross = 0.0f64;
        let mut quad = 0.0f64;
        for (((d, &b), &ga), &av) in drive
            .iter_mut()
            .zip(&self.feed)
            .zip(&self.scratch)
            .zip(a.data())
        {
            *d = (b as f64 - ga + av as f64) as f32;
            if av != 0.0 {
                cross += av as f64 * b as f64;
                quad += av as f64 * ga;
            }
        }
        Ok(EnergyReport::new(
            self.half_input_sq - cross + 0.5 * quad,
            a.l1_norm(),
            lambda,
            a.count_nonzero(),
        ))
    }
}

/// Run LCA from `u = 0` until convergence or `max_iters` steps.
///
/// The run stops when the relative energy change of the last step is at most
/// `stop_tol` and the fixed-point residual `max|Phi^T r + a - u|` is at most
/// `1e-3 * max|u|`. The returned trace starts with the energy of the zero
/// state.
pub fn lca_encode(input: &Tensor, phi: &KernelStack, cfg: &LcaConfig) -> Result<LcaState> {
    cfg.validate()?;
    match cfg.competition {
        Competition::Residual => run(input, phi, cfg, ResidualDynamics { input, phi }),
        Competition::Gram => {
            let feed = correlate(input, phi)?.into_data();
            let n = feed.len();
            run(
                input,
                phi,
                cfg,
                GramDynamics {
                    feed,
                    gram: Gram::new(phi),
                    half_input_sq: 0.5 * input.sum_sq(),
                    scratch: vec![0.0; n],
                },
            )
        }
    }
}

/// [`lca_encode`] with a precomputed gram kernel, for encoding many inputs
/// against one dictionary.
pub fn lca_encode_with_gram(input: &Tensor, phi: &KernelStack, gram: &Gram, cfg: &LcaConfig) -> Result<LcaState> {
    cfg.validate()?;
    let feed = correlate(input, phi)?.into_data();
    let n = feed.len();
    run(
        input,
        phi,
        cfg,
        GramDynamics {
            feed,
            gram: gram.clone(),
            half_input_sq: 0.5 * input.sum_sq(),
            scratch: vec![0.0; n],
        },
    )
}

fn run(input: &Tensor, phi: &KernelStack, cfg: &LcaConfig, mut dynamics: impl Dynamics) -> Result<LcaState> {
    let mut state = LcaState::zeros(input, phi)?;
    let eta = cfg.eta();
    let mut drive = vec![0.0f32; state.u.len()];
    let mut report = dynamics.evaluate(&state.a, cfg.lambda, &mut drive)?;
    let initial = report.total;
    state.energy_trace.push(report);
    let mut last_change = f64::INFINITY;
    for iter in 0..=cfg.max_iters {
        let mut fp_res = 0.0f32;
        let mut u_max = 0.0f32;
        for (&d, &u) in drive.iter().zip(state.u.data()) {
            fp_res = fp_res.max((d - u).abs());
            u_max = u_max.max(u.abs());
        }
        let scale = report.total.max(1e-12 * initial);
        if iter > 0 && last_change <= cfg.stop_tol * scale && fp_res <= 1e-3 * u_max {
            break;
        }
        if iter == cfg.max_iters {
            break;
        }
        for (u, &d) in state.u.data_mut().iter_mut().zip(&drive) {
            *u += eta * (d - *u);
        }
        for (a, &u) in state.a.data_mut().iter_mut().zip(state.u.data()) {
            *a = shrink(u, cfg.lambda);
        }
        let next = dynamics.evaluate(&state.a, cfg.lambda, &mut drive)?;
        if !next.total.is_finite() || (initial > 0.0 && next.total > 10.0 * initial) {
            return Err(Error::SolverDivergence {
                iter: iter + 1,
                energy: next.total,
                initial,
                ratio: eta,
            });
        }
        last_change = (next.total - report.total).abs();
        report = next;
        state.energy_trace.push(report);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn soft_threshold_examples() {
        let u = Tensor::new(&[3], vec![1.2, 0.3, -2.0]).unwrap();
        let a = soft_threshold(&u, 0.5).unwrap();
        assert!((a.data()[0] - 0.7).abs() < 1e-6);
        assert_eq!(a.data()[1], 0.0);
        assert!((a.data()[2] + 1.5).abs() < 1e-6);
        assert!(matches!(soft_threshold(&u, -0.1), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn threshold_scale_covariance(v in -10.0f32..10.0, lambda in 0.0f32..3.0, c in 0.25f32..4.0) {
            let u = Tensor::new(&[1], vec![v]).unwrap();
            let lhs = soft_threshold(&u.map(|x| c * x), c * lambda).unwrap().data()[0];
            let rhs = c * soft_threshold(&u, lambda).unwrap().data()[0];
            prop_assert!((lhs - rhs).abs() <= 1e-5 * (1.0 + rhs.abs()));
        }
    }

    fn single_atom() -> KernelStack {
        let w = Tensor::new(&[1, 1, 1, 2, 1], vec![0.6, 0.8]).unwrap();
        KernelStack::new(w, [1, 1, 1]).unwrap()
    }

    #[test]
    fn energy_of_exact_reconstruction() {
        let phi = single_atom();
        let mut a = Tensor::zeros(&[1, 1, 1, 3, 1]);
        a.set(&[0, 0, 0, 1, 0], 1.0);
        let input = reconstruct(&a, &phi).unwrap();
        let e = energy(&input, &a, &phi, 0.1).unwrap();
        assert!(e.recon_err.abs() < 1e-12);
        assert!((e.sparsity - 1.0).abs() < 1e-12);
        assert!((e.total - 0.1).abs() < 1e-7);
        assert_eq!(e.nnz, 1);

        let zero = Tensor::zeros(&[1, 1, 1, 3, 1]);
        let e = energy(&input, &zero, &phi, 0.1).unwrap();
        assert!((e.recon_err - 0.5 * input.sum_sq()).abs() < 1e-12);
        assert_eq!(e.sparsity, 0.0);
    }

    #[test]
    fn origin_is_fixed_point() {
        let phi = single_atom();
        let input = Tensor::zeros(&[1, 1, 1, 4, 1]);
        let state = LcaState::zeros(&input, &phi).unwrap();
        let next = lca_step(state, &input, &phi, &LcaConfig::default()).unwrap();
        assert!(next.u.data().iter().all(|&v| v == 0.0));
        assert!(next.a.data().iter().all(|&v| v == 0.0));
        assert_eq!(next.energy_trace.len(), 1);
    }

    /// With one unit-norm atom and the input equal to that atom, the aligned
    /// potential obeys `u_{k+1} = u_k + eta (1 - u_k)` while neighbours stay
    /// sub-threshold only if lambda is large; with lambda = 0 the whole
    /// system converges to the least-squares coefficients, which put 1 at the
    /// aligned site.
    #[test]
    fn single_atom_converges_to_unit_coefficient() {
        let w = Tensor::new(&[1, 1, 1, 1, 2], vec![0.6, 0.8]).unwrap();
        let phi = KernelStack::new(w, [1, 1, 1]).unwrap();
        let input = Tensor::new(&[1, 1, 1, 1, 2], vec![0.6, 0.8]).unwrap();
        let cfg = LcaConfig { lambda: 0.0, ..LcaConfig::default() };
        let mut state = LcaState::zeros(&input, &phi).unwrap();
        for _ in 0..1000 {
            state = lca_step(state, &input, &phi, &cfg).unwrap();
        }
        assert!((state.a.data()[0] - 1.0).abs() < 1e-5);
        // Scalar recurrence: u_k = 1 - (1 - eta)^k.
        let mut state = LcaState::zeros(&input, &phi).unwrap();
        for k in 1..=5 {
            state = lca_step(state, &input, &phi, &cfg).unwrap();
            let expect = 1.0 - 0.9f32.powi(k);
            assert!((state.u.data()[0] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn huge_lambda_gives_zero_code() {
        let mut rng = crate::rng::seeded(2);
        let input = Tensor::from_fn(&[1, 1, 6, 6, 1], |_| rng.random_range(-1.0f32..1.0));
        let phi = KernelStack::new(Tensor::from_fn(&[3, 1, 3, 3, 1], |_| rng.random_range(-1.0f32..1.0)), [1, 1, 1]).unwrap();
        let lambda = correlate(&input, &phi).unwrap().max_abs();
        for competition in [Competition::Residual, Competition::Gram] {
            let cfg = LcaConfig { lambda, competition, ..LcaConfig::default() };
            let st = lca_encode(&input, &phi, &cfg).unwrap();
            assert_eq!(st.a.count_nonzero(), 0);
        }
    }

    #[test]
    fn identity_dictionary_gives_soft_threshold() {
        let mut rng = crate::rng::seeded(4);
        let input = Tensor::from_fn(&[1, 1, 4, 4, 3], |_| rng.random_range(-1.0f32..1.0));
        let mut w = Tensor::zeros(&[3, 1, 1, 1, 3]);
        for f in 0..3 {
            w.set(&[f, 0, 0, 0, f], 1.0);
        }
        let phi = KernelStack::new(w, [1, 1, 1]).unwrap();
        let cfg = LcaConfig { lambda: 0.3, stop_tol: 1e-9, max_iters: 2000, ..LcaConfig::default() };
        let st = lca_encode(&input, &phi, &cfg).unwrap();
        let expect = soft_threshold(&input, 0.3).unwrap();
        for (x, y) in st.a.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-3, "{x} vs {y}");
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let phi = single_atom();
        let input = Tensor::zeros(&[1, 1, 1, 4, 1]);
        let cfg = LcaConfig { dt: 2.0, ..LcaConfig::default() };
        assert!(matches!(lca_encode(&input, &phi, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_is_reported_with_ratio() {
        // 16 identical overlapping atoms: the competition operator's norm is
        // far above 1/eta, so explicit Euler blows up.
        let phi = KernelStack::new(Tensor::full(&[16, 1, 3, 3, 1], 1.0 / 3.0), [1, 1, 1]).unwrap();
        let input = Tensor::full(&[1, 1, 8, 8, 1], 1.0);
        let cfg = LcaConfig { lambda: 0.0, dt: 1.0, ..LcaConfig::default() };
        let err = lca_encode(&input, &phi, &cfg).unwrap_err();
        assert!(matches!(err, Error::SolverDivergence { .. }));
        assert!(err.to_string().contains("dt/tau"));
    }

    #[test]
    fn gram_and_residual_routes_agree() {
        let mut rng = crate::rng::seeded(17);
        let input = Tensor::from_fn(&[1, 3, 12, 20, 2], |_| rng.random_range(-1.0f32..1.0));
        let mut phi = KernelStack::new(Tensor::from_fn(&[6, 3, 4, 4, 2], |_| rng.random_range(-1.0f32..1.0)), [1, 2, 2]).unwrap();
        for f in 0..6 {
            let n = phi.atom(f).iter().map(|v| v * v).sum::<f32>().sqrt();
            phi.atom_mut(f).iter_mut().for_each(|v| *v /= n);
        }
        let base = LcaConfig { lambda: 0.2, max_iters: 150, stop_tol: 0.0, ..LcaConfig::default() };
        let r = lca_encode(&input, &phi, &base).unwrap();
        let g = lca_encode(&input, &phi, &LcaConfig { competition: Competition::Gram, ..base }).unwrap();
        let (er, eg) = (r.last_energy().unwrap(), g.last_energy().unwrap());
        assert!((er.total - eg.total).abs() <= 1e-4 * er.total, "{er:?} {eg:?}");
        for (x, y) in r.a.data().iter().zip(g.a.data()) {
            assert!((x - y).abs() < 1e-3);
        }
    }
}
