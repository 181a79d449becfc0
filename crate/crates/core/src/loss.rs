//! Training objectives.
//!
//! Every batch term is computed per query and reduced in fixed-size chunks
//! whose boundaries depend only on the batch size, so the floating-point
//! summation order (and therefore every bit of the result) is independent of
//! the number of worker threads.

use crate::geom::{self, Vec3};
use crate::net::{AugmentedOutput, BackwardScratch, MlpParams, ParamGrads, SdfField, Tape, GRAD_NORM_FLOOR};
use crate::rng::{self, Stream};
use crate::spatial::KdTree;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::fmt;
use std::str::FromStr;

/// Step for central finite differences in query space.
pub const FD_STEP: f64 = 1e-5;

/// Below this norm the NAP ascent direction is undefined.
pub const NAP_GRAD_FLOOR: f64 = 1e-10;

/// Lower bound on the learnable loss weights λ1, λ2.
pub const LOSS_WEIGHT_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DroMode {
    Np,
    Nap,
    Wdro,
    Sdro,
}

impl fmt::Display for DroMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DroMode::Np => "np",
            DroMode::Nap => "nap",
            DroMode::Wdro => "wdro",
            DroMode::Sdro => "sdro",
        })
    }
}

impl FromStr for DroMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "np" => Ok(DroMode::Np),
            "nap" => Ok(DroMode::Nap),
            "wdro" => Ok(DroMode::Wdro),
            "sdro" => Ok(DroMode::Sdro),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (expected np, nap, wdro or sdro)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WdroConfig {
    /// Wasserstein ball radius ε.
    pub epsilon: f64,
    pub lambda_init: f64,
    /// Standard deviation of the Gaussian start around each query.
    pub sigma0: f64,
    pub alpha_inner: f64,
    pub n_inner: usize,
    pub eta_lambda: f64,
}

impl Default for WdroConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            lambda_init: 80.0,
            sigma0: 1e-3,
            alpha_inner: 1e-3,
            n_inner: 2,
            eta_lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdroConfig {
    pub lambda: f64,
    /// Entropic scale. A multiple of the mean local scale ρ_avg when
    /// `rho_relative` is set, an absolute value otherwise.
    pub rho: f64,
    pub rho_relative: bool,
    pub n_samples: usize,
    /// Read ρ as the per-axis standard deviation instead of the variance.
    pub rho_is_stddev: bool,
    /// Recompute the nearest input point for every perturbed sample.
    pub renearest_perturbed: bool,
}

impl Default for SdroConfig {
    fn default() -> Self {
        Self {
            lambda: 20.0,
            rho: 1.0,
            rho_relative: true,
            n_samples: 5,
            rho_is_stddev: false,
            renearest_perturbed: false,
        }
    }
}

impl SdroConfig {
    /// Absolute ρ given the mean local scale of the cloud.
    pub fn resolve_rho(&self, rho_avg: f64) -> f64 {
        if self.rho_relative {
            self.rho * rho_avg
        } else {
            self.rho
        }
    }

    /// Per-axis standard deviation of the sampling law for an absolute ρ.
    pub fn sample_std(&self, rho: f64) -> f64 {
        if self.rho_is_stddev {
            rho
        } else {
            rho.sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroConfig {
    pub mode: DroMode,
    pub nap_rho: f64,
    pub wdro: WdroConfig,
    pub sdro: SdroConfig,
}

impl Default for DroConfig {
    fn default() -> Self {
        Self {
            mode: DroMode::Sdro,
            nap_rho: 0.01,
            wdro: WdroConfig::default(),
            sdro: SdroConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")))
    }
}

impl DroConfig {
    pub fn validate(&self) -> Result<()> {
        positive("dro.nap_rho", self.nap_rho)?;
        let w = &self.wdro;
        positive("dro.wdro.epsilon", w.epsilon)?;
        if !(w.lambda_init >= 0.0 && w.lambda_init.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dro.wdro.lambda_init must be >= 0, got {}",
                w.lambda_init
            )));
        }
        positive("dro.wdro.sigma0", w.sigma0)?;
        positive("dro.wdro.alpha_inner", w.alpha_inner)?;
        positive("dro.wdro.eta_lambda", w.eta_lambda)?;
        if w.n_inner < 1 {
            return Err(Error::InvalidArgument("dro.wdro.n_inner must be >= 1".into()));
        }
        let s = &self.sdro;
        positive("dro.sdro.lambda", s.lambda)?;
        positive("dro.sdro.rho", s.rho)?;
        if s.n_samples < 1 {
            return Err(Error::InvalidArgument("dro.sdro.n_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Diagnostics of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub primary_loss: f64,
    pub dro_loss: f64,
    pub combined: f64,
    pub skipped_queries: usize,
    /// Mean transport cost of the WDRO inner solutions; 0 in other modes.
    pub mean_transport_cost: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.primary_loss.is_finite()
            && self.dro_loss.is_finite()
            && self.combined.is_finite()
            && self.mean_transport_cost.is_finite()
    }
}

/// Queries and the nearest input point of each.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub queries: &'a [Vec3],
    pub nearest: &'a [Vec3],
}

impl<'a> Batch<'a> {
    pub fn new(queries: &'a [Vec3], nearest: &'a [Vec3]) -> Result<Self> {
        if queries.len() != nearest.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} queries but {} nearest points",
                queries.len(),
                nearest.len()
            )));
        }
        Ok(Self { queries, nearest })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

pub fn transport_cost(x: Vec3, y: Vec3) -> f64 {
    0.5 * geom::dist_sq(x, y)
}

/// Pull loss of one query and its adjoints w.r.t. the network outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NpTerm {
    pub loss: f64,
    /// ∂L/∂f
    pub d_value: f64,
    /// ∂L/∂(∇_q f)
    pub d_grad: Vec3,
}

/// `‖q − f ∇f/‖∇f‖ − p‖²` from an augmented output. `None` when the
/// gradient norm is at or below the floor.
pub fn np_loss_adjoints(q: Vec3, p: Vec3, out: &AugmentedOutput) -> Option<NpTerm> {
    let g = out.input_grad;
    let n = geom::norm(g);
    if !(n > GRAD_NORM_FLOOR) {
        return None;
    }
    let f = out.value;
    let pulled = geom::sub(q, geom::scale(g, f / n));
    let r2 = geom::scale(geom::sub(pulled, p), 2.0);
    let loss = 0.25 * geom::norm_sq(r2);
    let d_value = -geom::dot(r2, g) / n;
    let gr = geom::dot(g, r2) / (n * n);
    let d_grad = geom::scale(geom::sub(r2, geom::scale(g, gr)), -f / n);
    Some(NpTerm { loss, d_value, d_grad })
}

pub fn np_loss<F: SdfField + ?Sized>(field: &F, q: Vec3, p: Vec3) -> Option<f64> {
    np_loss_adjoints(q, p, &field.value_and_grad(q)).map(|t| t.loss)
}

/// Central-difference gradient of a scalar function of position.
pub fn fd_gradient(mut f: impl FnMut(Vec3) -> f64, x: Vec3, h: f64) -> Vec3 {
    let mut g = [0.0; 3];
    for k in 0..3 {
        let mut a = x;
        let mut b = x;
        a[k] += h;
        b[k] -= h;
        g[k] = (f(a) - f(b)) / (2.0 * h);
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NapPerturbation {
    pub point: Vec3,
    /// The loss gradient vanished (or was not finite); `point` is `q`.
    pub degenerate: bool,
}

/// `q + ρ ∇L/‖∇L‖` with the gradient of `loss` taken by central differences.
pub fn nap_perturbation_with(loss: impl FnMut(Vec3) -> f64, q: Vec3, rho: f64) -> NapPerturbation {
    let g = fd_gradient(loss, q, FD_STEP);
    let n = geom::norm(g);
    if !(n >= NAP_GRAD_FLOOR) || !n.is_finite() {
        return NapPerturbation {
            point: q,
            degenerate: true,
        };
    }
    NapPerturbation {
        point: geom::add(q, geom::scale(g, rho / n)),
        degenerate: false,
    }
}

pub fn nap_perturbation<F: SdfField + ?Sized>(field: &F, q: Vec3, p: Vec3, rho: f64) -> NapPerturbation {
    nap_perturbation_with(|x| np_loss(field, x, p).unwrap_or(f64::NAN), q, rho)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WdroInner {
    pub q_prime: Vec3,
    /// `c(q', q)` at the returned point.
    pub cost: f64,
    /// Ascent steps rejected because the objective was not finite.
    pub aborted_steps: usize,
}

/// Gradient ascent on `L(q') − λ c(q, q')` from `start`.
///
/// With `exact_grad` the gradient of `L` is supplied by the caller and the
/// cost term is differentiated analytically; otherwise the whole objective is
/// differentiated by central differences. A step whose objective or gradient
/// is not finite is dropped and the previous iterate kept.
pub fn wdro_inner_maximize(
    q: Vec3,
    start: Vec3,
    lambda: f64,
    alpha: f64,
    n_inner: usize,
    mut loss: impl FnMut(Vec3) -> f64,
    exact_grad: Option<&dyn Fn(Vec3) -> Vec3>,
) -> WdroInner {
    let mut x = start;
    let mut aborted_steps = 0;
    for _ in 0..n_inner {
        let grad = match exact_grad {
            Some(g) => geom::sub(g(x), geom::scale(geom::sub(x, q), lambda)),
            None => fd_gradient(|y| loss(y) - lambda * transport_cost(q, y), x, FD_STEP),
        };
        let next = geom::add(x, geom::scale(grad, alpha));
        let ok = geom::is_finite(grad) && geom::is_finite(next) && loss(next).is_finite();
        if ok {
            x = next;
        } else {
            aborted_steps += 1;
        }
    }
    WdroInner {
        q_prime: x,
        cost: transport_cost(x, q),
        aborted_steps,
    }
}

/// `λ ← max(0, λ − η(ε − mean c))`.
pub fn wdro_lambda_update(lambda: f64, epsilon: f64, batch_costs: &[f64], eta_lambda: f64) -> f64 {
    if batch_costs.is_empty() {
        return lambda;
    }
    let mean = batch_costs.iter().sum::<f64>() / batch_costs.len() as f64;
    (lambda - eta_lambda * (epsilon - mean)).max(0.0)
}

/// `n_samples` draws from `N(q, ρ I)`, ρ being the variance.
pub fn sdro_sample(q: Vec3, rho: f64, n_samples: usize, seed: u64) -> Vec<Vec3> {
    let mut r = rng::rng_from(seed);
    let mut out = Vec::with_capacity(n_samples);
    gaussian_samples(q, rho.sqrt(), n_samples, &mut r, &mut out);
    out
}

fn gaussian_samples<R: Rng>(q: Vec3, std: f64, n: usize, r: &mut R, out: &mut Vec<Vec3>) {
    out.clear();
    for _ in 0..n {
        let d: [f64; 3] = [r.sample(StandardNormal), r.sample(StandardNormal), r.sample(StandardNormal)];
        out.push(geom::add(q, geom::scale(d, std)));
    }
}

/// Max-shifted `ln Σ exp(x_i)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `λρ (ln Σ exp(L_j/λρ) − ln N)`.
pub fn sdro_value(losses: &[f64], lambda_rho: f64) -> f64 {
    let scaled: Vec<f64> = losses.iter().map(|l| l / lambda_rho).collect();
    lambda_rho * (logsumexp(&scaled) - (losses.len() as f64).ln())
}

/// Softmax weights `∂ sdro_value / ∂L_j`.
pub fn sdro_weights(losses: &[f64], lambda_rho: f64) -> Vec<f64> {
    let m = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = losses.iter().map(|l| ((l - m) / lambda_rho).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_loss_weights(l1: f64, l2: f64) -> Result<()> {
    if l1 > 0.0 && l2 > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("loss weights must be positive, got ({l1}, {l2})")))
    }
}

/// `L/(2λ1) + L_DRO/(2λ2) + ln(1+λ1) + ln(1+λ2)`.
pub fn combined_loss(primary: f64, dro: f64, lambda1: f64, lambda2: f64) -> Result<f64> {
    check_loss_weights(lambda1, lambda2)?;
    Ok(primary / (2.0 * lambda1) + dro / (2.0 * lambda2) + lambda1.ln_1p() + lambda2.ln_1p())
}

/// Gradient of [`combined_loss`] with respect to (λ1, λ2).
pub fn combined_lambda_grads(primary: f64, dro: f64, lambda1: f64, lambda2: f64) -> Result<[f64; 2]> {
    check_loss_weights(lambda1, lambda2)?;
    Ok([
        -primary / (2.0 * lambda1 * lambda1) + 1.0 / (1.0 + lambda1),
        -dro / (2.0 * lambda2 * lambda2) + 1.0 / (1.0 + lambda2),
    ])
}

/// Batch mean of one loss term and its parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct TermBatch {
    pub value: f64,
    pub grads: Vec<f64>,
    /// Queries that contributed.
    pub count: usize,
    /// Batch indices of queries left out, ascending.
    pub skipped: Vec<usize>,
    /// Queries whose perturbation fell back to the unperturbed point.
    pub degenerate_perturbations: usize,
}

struct Worker<'a> {
    params: &'a MlpParams,
    tape: Tape,
    extra: Vec<Tape>,
    scratch: BackwardScratch,
    grads: Vec<f64>,
    sum: f64,
    count: usize,
    skipped: Vec<usize>,
    degenerate: usize,
}

impl<'a> Worker<'a> {
    fn new(params: &'a MlpParams) -> Self {
        Self {
            params,
            tape: params.new_tape(),
            extra: Vec::new(),
            scratch: BackwardScratch::default(),
            grads: vec![0.0; params.values.len()],
            sum: 0.0,
            count: 0,
            skipped: Vec::new(),
            degenerate: 0,
        }
    }

    /// Pull loss at `x` (no gradient bookkeeping); NaN when undefined.
    fn loss_at(&mut self, x: Vec3, p: Vec3) -> f64 {
        let out = self.params.forward_tape(x, &mut self.tape);
        np_loss_adjoints(x, p, &out).map_or(f64::NAN, |t| t.loss)
    }

    /// Pull loss at `x`, its gradient scaled by `weight` added to `grads`.
    fn backprop_at(&mut self, x: Vec3, p: Vec3, weight: f64) -> Option<f64> {
        let out = self.params.forward_tape(x, &mut self.tape);
        let t = np_loss_adjoints(x, p, &out)?;
        self.params.backward_tape(
            &self.tape,
            weight * t.d_value,
            geom::scale(t.d_grad, weight),
            &mut self.grads,
            &mut self.scratch,
        );
        Some(t.loss)
    }
}

/// Fixed chunk length for a batch of `n`: at most 16 chunks.
fn chunk_len(n: usize) -> usize {
    n.div_ceil(16).max(16)
}

/// Runs `per_query` over the batch in chunks and reduces in chunk order.
/// `per_query` returns the query's contribution or `None` to skip it.
fn run_term<F>(params: &MlpParams, n: usize, per_query: F) -> TermBatch
where
    F: Fn(usize, &mut Worker) -> Option<f64> + Sync,
{
    let len = chunk_len(n);
    let n_chunks = n.div_ceil(len);
    let parts: Vec<Worker> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut w = Worker::new(params);
            for i in c * len..((c + 1) * len).min(n) {
                match per_query(i, &mut w) {
                    Some(v) => {
                        w.sum += v;
                        w.count += 1;
                    }
                    None => w.skipped.push(i),
                }
            }
            w
        })
        .collect();
    let mut out = TermBatch {
        value: 0.0,
        grads: vec![0.0; params.values.len()],
        count: 0,
        skipped: Vec::new(),
        degenerate_perturbations: 0,
    };
    for w in parts {
        out.value += w.sum;
        out.count += w.count;
        out.skipped.extend(w.skipped);
        out.degenerate_perturbations += w.degenerate;
        for (a, b) in out.grads.iter_mut().zip(&w.grads) {
            *a += b;
        }
    }
    if out.count > 0 {
        let inv = 1.0 / out.count as f64;
        out.value *= inv;
        out.grads.iter_mut().for_each(|g| *g *= inv);
    }
    out
}

/// Mean pull loss over the batch.
pub fn np_batch(params: &MlpParams, batch: &Batch) -> TermBatch {
    run_term(params, batch.len(), |i, w| {
        w.backprop_at(batch.queries[i], batch.nearest[i], 1.0)
    })
}

/// Mean pull loss at the NAP-perturbed queries. The perturbation is held
/// constant for the parameter gradient.
pub fn nap_batch(params: &MlpParams, batch: &Batch, rho: f64) -> TermBatch {
    run_term(params, batch.len(), |i, w| {
        let (q, p) = (batch.queries[i], batch.nearest[i]);
        let pert = nap_perturbation_with(|x| w.loss_at(x, p), q, rho);
        if pert.degenerate {
            w.degenerate += 1;
        }
        w.backprop_at(pert.point, p, 1.0)
    })
}

/// Inner maximization for every query of the batch. Query `i` starts from
/// `N(q_i, σ0² I)` drawn from a generator keyed by `(seed, i)`.
pub fn wdro_perturb(params: &MlpParams, batch: &Batch, lambda: f64, cfg: &WdroConfig, seed: u64) -> Vec<WdroInner> {
    let n = batch.len();
    let len = chunk_len(n);
    let chunks: Vec<Vec<WdroInner>> = (0..n.div_ceil(len))
        .into_par_iter()
        .map(|c| {
            let mut w = Worker::new(params);
            let mut buf = Vec::with_capacity(1);
            ((c * len)..((c + 1) * len).min(n))
                .map(|i| {
                    let (q, p) = (batch.queries[i], batch.nearest[i]);
                    let mut r = rng::rng_from(rng::derive(seed, &[i as u64]));
                    gaussian_samples(q, cfg.sigma0, 1, &mut r, &mut buf);
                    wdro_inner_maximize(q, buf[0], lambda, cfg.alpha_inner, cfg.n_inner, |x| w.loss_at(x, p), None)
                })
                .collect()
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

/// Mean of `L(q') − λ c(q', q)` at fixed inner solutions.
pub fn wdro_evaluate(params: &MlpParams, batch: &Batch, inner: &[WdroInner], lambda: f64) -> Result<TermBatch> {
    if inner.len() != batch.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inner solutions for {} queries",
            inner.len(),
            batch.len()
        )));
    }
    Ok(run_term(params, batch.len(), |i, w| {
        let s = inner[i];
        w.backprop_at(s.q_prime, batch.nearest[i], 1.0).map(|l| l - lambda * s.cost)
    }))
}

/// WDRO term at a fixed dual variable: inner maximization, then the dual
/// integrand with `q'` held constant for the parameter gradient.
pub fn wdro_loss(params: &MlpParams, batch: &Batch, lambda: f64, cfg: &WdroConfig, seed: u64) -> Result<(TermBatch, Vec<WdroInner>)> {
    let inner = wdro_perturb(params, batch, lambda, cfg, seed);
    let term = wdro_evaluate(params, batch, &inner, lambda)?;
    Ok((term, inner))
}

/// Resolved SDRO settings for one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdroParams {
    pub lambda: f64,
    /// Absolute ρ.
    pub rho: f64,
    pub sample_std: f64,
    pub n_samples: usize,
    pub renearest: bool,
}

impl SdroParams {
    pub fn from_config(cfg: &SdroConfig, rho_avg: f64) -> Result<Self> {
        let rho = cfg.resolve_rho(rho_avg);
        if !(cfg.lambda * rho > 0.0) || !rho.is_finite() {
            return Err(Error::InvalidArgument(format!("λρ must be positive, got λ={} ρ={rho}", cfg.lambda)));
        }
        Ok(Self {
            lambda: cfg.lambda,
            rho,
            sample_std: cfg.sample_std(rho),
            n_samples: cfg.n_samples,
            renearest: cfg.renearest_perturbed,
        })
    }
}

/// Mean over queries of `λρ (ln mean_j exp(L(q'_j)/λρ))`.
///
/// Samples with an undefined pull are dropped from their query's average;
/// a query with no usable sample is skipped. Re-searching the nearest point
/// needs `tree`.
pub fn sdro_loss(params: &MlpParams, batch: &Batch, sdro: &SdroParams, seed: u64, tree: Option<&KdTree>) -> Result<TermBatch> {
    let lr = sdro.lambda * sdro.rho;
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("λρ must be positive, got {lr}")));
    }
    if sdro.renearest && tree.is_none() {
        return Err(Error::InvalidArgument("per-sample nearest search needs the input kd-tree".into()));
    }
    Ok(run_term(params, batch.len(), |i, w| {
        let (q, p) = (batch.queries[i], batch.nearest[i]);
        let mut r = rng::rng_from(rng::derive(seed, &[i as u64]));
        let mut samples = Vec::with_capacity(sdro.n_samples);
        gaussian_samples(q, sdro.sample_std, sdro.n_samples, &mut r, &mut samples);
        while w.extra.len() < sdro.n_samples {
            w.extra.push(params.new_tape());
        }
        let mut terms = Vec::with_capacity(sdro.n_samples);
        for (j, &x) in samples.iter().enumerate() {
            let pj = match (sdro.renearest, tree) {
                (true, Some(t)) => t.nearest(x).1,
                _ => p,
            };
            let out = params.forward_tape(x, &mut w.extra[j]);
            if let Some(t) = np_loss_adjoints(x, pj, &out) {
                terms.push((j, t));
            }
        }
        if terms.is_empty() {
            return None;
        }
        let losses: Vec<f64> = terms.iter().map(|(_, t)| t.loss).collect();
        let weights = sdro_weights(&losses, lr);
        for ((j, t), wt) in terms.iter().zip(&weights) {
            params.backward_tape(
                &w.extra[*j],
                wt * t.d_value,
                geom::scale(t.d_grad, *wt),
                &mut w.grads,
                &mut w.scratch,
            );
        }
        Some(sdro_value(&losses, lr))
    }))
}

/// Objective, gradients and updated WDRO dual variable for one batch.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub report: LossReport,
    pub grads: ParamGrads,
    pub wdro_lambda: f64,
    /// Sign of the λ step (for diagnostics): mean cost minus ε.
    pub cost_excess: f64,
}

/// Everything an objective evaluation needs besides parameters and batch.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveContext<'a> {
    pub dro: &'a DroConfig,
    /// Resolved SDRO settings; required in SDRO mode.
    pub sdro: Option<SdroParams>,
    pub tree: Option<&'a KdTree>,
    pub root_seed: u64,
    pub iteration: u64,
}

/// Evaluates the training objective of the configured mode.
///
/// NP mode uses the pull loss alone. The other modes combine the pull loss
/// with their robust term through the learnable weights. In WDRO mode the
/// dual variable is updated between the inner maximization and the loss
/// evaluation.
pub fn batch_objective(params: &MlpParams, batch: &Batch, ctx: &ObjectiveContext, wdro_lambda: f64) -> Result<BatchObjective> {
    if batch.is_empty() {
        return Err(Error::Empty("query batch".into()));
    }
    let primary = np_batch(params, batch);
    let mut lambda = wdro_lambda;
    let mut mean_cost = 0.0;
    let mut cost_excess = 0.0;
    let dro = match ctx.dro.mode {
        DroMode::Np => None,
        DroMode::Nap => Some(nap_batch(params, batch, ctx.dro.nap_rho)),
        DroMode::Wdro => {
            let cfg = &ctx.dro.wdro;
            let seed = rng::derive(rng::stream_seed(ctx.root_seed, Stream::Wdro), &[ctx.iteration]);
            let inner = wdro_perturb(params, batch, lambda, cfg, seed);
            let costs: Vec<f64> = inner.iter().map(|s| s.cost).collect();
            mean_cost = costs.iter().sum::<f64>() / costs.len() as f64;
            cost_excess = mean_cost - cfg.epsilon;
            lambda = wdro_lambda_update(lambda, cfg.epsilon, &costs, cfg.eta_lambda);
            Some(wdro_evaluate(params, batch, &inner, lambda)?)
        }
        DroMode::Sdro => {
            let sp = ctx
                .sdro
                .ok_or_else(|| Error::InvalidArgument("SDRO mode needs resolved SDRO parameters".into()))?;
            let seed = rng::derive(rng::stream_seed(ctx.root_seed, Stream::Sdro), &[ctx.iteration]);
            Some(sdro_loss(params, batch, &sp, seed, ctx.tree)?)
        }
    };

    let mut skipped = vec![false; batch.len()];
    for &i in &primary.skipped {
        skipped[i] = true;
    }
    let mut grads = ParamGrads::zeros_like(params);
    let report = match dro {
        None => {
            grads.values = primary.grads;
            LossReport {
                primary_loss: primary.value,
                dro_loss: 0.0,
                combined: primary.value,
                skipped_queries: primary.skipped.len(),
                mean_transport_cost: 0.0,
            }
        }
        Some(d) => {
            for &i in &d.skipped {
                skipped[i] = true;
            }
            let [l1, l2] = params.loss_weights;
            let (a, b) = (0.5 / l1, 0.5 / l2);
            grads.values = primary.grads.iter().zip(&d.grads).map(|(x, y)| a * x + b * y).collect();
            grads.loss_weights = combined_lambda_grads(primary.value, d.value, l1, l2)?;
            LossReport {
                primary_loss: primary.value,
                dro_loss: d.value,
                combined: combined_loss(primary.value, d.value, l1, l2)?,
                skipped_queries: skipped.iter().filter(|s| **s).count(),
                mean_transport_cost: mean_cost,
            }
        }
    };
    Ok(BatchObjective {
        report,
        grads,
        wdro_lambda: lambda,
        cost_excess,
    })
}
