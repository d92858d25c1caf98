//! Monte Carlo benchmarks: log-Euler LMM paths under the terminal measure,
//! plain pricing of path-dependent contracts, Andersen-Broadie bounds for
//! Bermudan swaptions and shared-noise estimates of expansion terms.
//!
//! Paths are generated in fixed-size batches. Batch `b` draws from a ChaCha8
//! stream selected by `(seed, purpose, b)`, and batch statistics are merged in
//! batch order, so results are bit-identical for any thread count.
//! Reported prices are in currency units: the terminal-bond relative value
//! times `P(0, T_n)`.

use nalgebra::DMatrix;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::anova::{rational_to_f64, ExpansionPlan};
use crate::error::{Error, Result};
use crate::model::LmmModel;
use crate::products::{BermudanSwaption, PathContract};

/// How the LMM drift is evaluated along a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftMode {
    /// State-dependent terminal-measure drift, re-evaluated every substep.
    Full,
    /// Drift frozen at the initial curve; tenor-to-tenor steps are exact.
    Frozen,
}

/// Path counts and discretization for the Monte Carlo engines.
#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    /// Paths used to learn the exercise policy.
    pub policy_paths: usize,
    /// Paths for plain pricing and the lower bound.
    pub paths: usize,
    pub outer_paths: usize,
    pub inner_paths: usize,
    /// Time steps per accrual period.
    pub substeps: usize,
    pub drift: DriftMode,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            policy_paths: 1_000_000,
            paths: 10_000_000,
            outer_paths: 5000,
            inner_paths: 1000,
            substeps: 5,
            drift: DriftMode::Full,
            seed: 20120,
            batch_size: 4096,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("policy_paths", self.policy_paths),
            ("paths", self.paths),
            ("outer_paths", self.outer_paths),
            ("inner_paths", self.inner_paths),
            ("substeps", self.substeps),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("mc.{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Mean and standard error of a Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceEstimate {
    pub value: f64,
    pub std_error: f64,
    pub paths: usize,
}

/// Andersen-Broadie lower/upper bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundEstimate {
    pub lower: f64,
    pub lower_std_error: f64,
    pub gap: f64,
    pub gap_std_error: f64,
}

impl BoundEstimate {
    pub fn upper(&self) -> f64 {
        self.lower + self.gap
    }

    pub fn midpoint(&self) -> f64 {
        self.lower + 0.5 * self.gap
    }
}

/// Exercise thresholds per exercise date: exercise iff the intrinsic value is
/// positive and at least the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyThresholds {
    /// `(tenor, threshold)` in schedule order.
    pub thresholds: Vec<(usize, f64)>,
}

impl PolicyThresholds {
    fn exercise(&self, d: usize, intrinsic: f64) -> bool {
        intrinsic > 0.0 && intrinsic >= self.thresholds[d].1
    }
}

/// Streaming mean/variance, mergeable in a fixed order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let d = other.mean - self.mean;
        self.mean += d * other.count as f64 / n;
        self.m2 += other.m2 + d * d * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std_error(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        (self.m2 / (self.count - 1) as f64 / self.count as f64).sqrt()
    }

    /// Estimate scaled by `factor` (e.g. the terminal discount factor).
    pub fn estimate(&self, factor: f64) -> PriceEstimate {
        PriceEstimate {
            value: self.mean * factor,
            std_error: self.std_error() * factor.abs(),
            paths: self.count as usize,
        }
    }
}

// Stream purposes, mixed into the seed.
const PURPOSE_PRICE: u64 = 1;
const PURPOSE_POLICY: u64 = 2;
const PURPOSE_LOWER: u64 = 3;
const PURPOSE_OUTER: u64 = 4;
const PURPOSE_INNER: u64 = 5;
const PURPOSE_VRST: u64 = 6;
const BRIDGE_STREAM: u64 = 1 << 63;

fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// Standard normal variate by inverse CDF of a uniform in `(0, 1)`.
fn normal(rng: &mut ChaCha8Rng, std_normal: &Normal) -> f64 {
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
    std_normal.inverse_cdf(u)
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Split `total` paths into batches and map them in parallel, keeping batch order.
fn batched<T, F>(total: usize, batch: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, usize) -> T + Sync,
{
    let batches = total.div_ceil(batch);
    (0..batches)
        .into_par_iter()
        .map(|b| {
            let count = batch.min(total - b * batch);
            f(b as u64, count)
        })
        .collect()
}

/// Log-Euler path generator in LIBOR space.
pub struct PathSimulator<'a> {
    model: &'a LmmModel,
    chol: DMatrix<f64>,
    log_drift: Vec<f64>,
    substeps: usize,
    drift: DriftMode,
    normal: Normal,
}

impl<'a> PathSimulator<'a> {
    pub fn new(model: &'a LmmModel, substeps: usize, drift: DriftMode) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::InvalidConfig("substeps must be at least 1".into()));
        }
        let chol = model
            .covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance matrix is not positive definite".into()))?
            .l();
        Ok(Self {
            model,
            chol,
            log_drift: model.transform.log_drift(),
            substeps,
            drift,
            normal: standard_normal(),
        })
    }

    /// Fill `states[e * n + j] = L_j(T_e)` for tenors `start..n` from the
    /// log-rates at `T_start`. Rows before `start` are left untouched.
    pub fn simulate(
        &self,
        rng: &mut ChaCha8Rng,
        bridge: &mut ChaCha8Rng,
        start: usize,
        log_rates: &[f64],
        states: &mut [f64],
    ) {
        let n = self.model.n();
        let alpha = self.model.config.alpha;
        let mut x = log_rates.to_vec();
        for (j, v) in x.iter().enumerate() {
            states[start * n + j] = v.exp();
        }
        let mut xi = vec![0.0; n];
        let mut shock = vec![0.0; n];
        let mut w_end = vec![0.0; n];
        let mut w_now = vec![0.0; n];
        let mut mu = vec![0.0; n];
        let dt = alpha / self.substeps as f64;
        let cov = &self.model.covariance;
        for e in start..n - 1 {
            match self.drift {
                DriftMode::Full => {
                    let sdt = dt.sqrt();
                    for _ in 0..self.substeps {
                        // mu_i = -sum_{j>i} alpha L_j / (1 + alpha L_j) Sigma_ij
                        let w: Vec<f64> = x
                            .iter()
                            .map(|lx| {
                                let l = lx.exp();
                                alpha * l / (1.0 + alpha * l)
                            })
                            .collect();
                        for i in 0..n {
                            mu[i] = -((i + 1)..n).map(|j| w[j] * cov[(i, j)]).sum::<f64>();
                        }
                        xi.iter_mut().for_each(|v| *v = normal(rng, &self.normal));
                        self.correlate(&xi, &mut shock);
                        for i in 0..n {
                            x[i] += (mu[i] - 0.5 * cov[(i, i)]) * dt + sdt * shock[i];
                        }
                    }
                }
                DriftMode::Frozen => {
                    // Endpoint of the factor Brownian motion over the period,
                    // then substeps by Brownian bridge from a separate stream,
                    // so the tenor values do not depend on the substep count.
                    let sa = alpha.sqrt();
                    w_end.iter_mut().for_each(|v| *v = sa * normal(rng, &self.normal));
                    w_now.iter_mut().for_each(|v| *v = 0.0);
                    for m in 0..self.substeps {
                        let t0 = m as f64 * dt;
                        let t1 = t0 + dt;
                        if m + 1 == self.substeps {
                            for k in 0..n {
                                xi[k] = w_end[k] - w_now[k];
                            }
                        } else {
                            let frac = dt / (alpha - t0);
                            let sd = (dt * (alpha - t1) / (alpha - t0)).sqrt();
                            for k in 0..n {
                                xi[k] = frac * (w_end[k] - w_now[k]) + sd * normal(bridge, &self.normal);
                            }
                        }
                        for k in 0..n {
                            w_now[k] += xi[k];
                        }
                        self.correlate(&xi, &mut shock);
                        for i in 0..n {
                            x[i] += self.log_drift[i] * dt + shock[i];
                        }
                    }
                }
            }
            for (j, v) in x.iter().enumerate() {
                states[(e + 1) * n + j] = v.exp();
            }
        }
    }

    fn correlate(&self, xi: &[f64], out: &mut [f64]) {
        let n = xi.len();
        for i in 0..n {
            let mut s = 0.0;
            for k in 0..=i {
                s += self.chol[(i, k)] * xi[k];
            }
            out[i] = s;
        }
    }

    fn initial_log_rates(&self) -> Vec<f64> {
        self.model.config.initial_rates.iter().map(|l| l.ln()).collect()
    }
}

/// Paths with all states from `T_0`, one batch at a time.
fn run_paths<T, F>(
    sim: &PathSimulator,
    cfg: &McConfig,
    purpose: u64,
    total: usize,
    init: impl Fn() -> T + Sync,
    visit: F,
) -> Vec<T>
where
    T: Send,
    F: Fn(&mut T, &[f64]) + Sync,
{
    let n = sim.model.n();
    let x0 = sim.initial_log_rates();
    batched(total, cfg.batch_size, |b, count| {
        let mut rng = stream_rng(cfg.seed, purpose, b);
        let mut bridge = stream_rng(cfg.seed, purpose, b | BRIDGE_STREAM);
        let mut states = vec![0.0; n * n];
        let mut acc = init();
        for _ in 0..count {
            sim.simulate(&mut rng, &mut bridge, 0, &x0, &mut states);
            visit(&mut acc, &states);
        }
        acc
    })
}

fn merge_stats(parts: &[RunningStats]) -> RunningStats {
    let mut total = RunningStats::default();
    for p in parts {
        total.merge(p);
    }
    total
}

/// Plain Monte Carlo price of a path contract over `cfg.paths` paths.
pub fn mc_price(model: &LmmModel, contract: &dyn PathContract, cfg: &McConfig) -> Result<PriceEstimate> {
    cfg.validate()?;
    check_n(model, contract.n())?;
    let sim = PathSimulator::new(model, cfg.substeps, cfg.drift)?;
    let parts = run_paths(&sim, cfg, PURPOSE_PRICE, cfg.paths, RunningStats::default, |acc, states| {
        acc.push(contract.path_value(states))
    });
    Ok(merge_stats(&parts).estimate(model.config.terminal_discount()))
}

fn check_n(model: &LmmModel, n: usize) -> Result<()> {
    if model.n() != n {
        return Err(Error::InvalidConfig(format!(
            "product has {n} rates but the model has {}",
            model.n()
        )));
    }
    Ok(())
}

/// Learn intrinsic-value thresholds on `cfg.policy_paths` paths.
///
/// Working backwards from the last exercise date, each threshold maximizes the
/// sample mean of the stopped payoff given the later thresholds. Candidate
/// thresholds are the observed positive intrinsic values (plus "never"), and
/// the objective is evaluated exactly for all of them by sorting; ties go to
/// the lowest threshold achieving the maximum.
pub fn learn_policy(model: &LmmModel, product: &BermudanSwaption, cfg: &McConfig) -> Result<PolicyThresholds> {
    cfg.validate()?;
    check_n(model, product.n)?;
    let sim = PathSimulator::new(model, cfg.substeps, cfg.drift)?;
    let schedule = product.schedule();
    let dates = schedule.len();
    let parts = run_paths(&sim, cfg, PURPOSE_POLICY, cfg.policy_paths, Vec::new, |acc: &mut Vec<f64>, states| {
        for &e in &schedule {
            acc.push(product.intrinsic_on_path(states, e));
        }
    });
    let intrinsic: Vec<f64> = parts.into_iter().flatten().collect();
    let paths = intrinsic.len() / dates;
    let mut cash = vec![0.0; paths];
    let mut thresholds = vec![0.0; dates];
    for d in (0..dates).rev() {
        let at = |p: usize| intrinsic[p * dates + d];
        if d + 1 == dates {
            thresholds[d] = 0.0;
        } else {
            let mut itm: Vec<usize> = (0..paths).filter(|&p| at(p) > 0.0).collect();
            itm.sort_by(|&a, &b| at(b).partial_cmp(&at(a)).unwrap().then(a.cmp(&b)));
            let mut best_gain = 0.0;
            let mut best = f64::INFINITY;
            let mut gain = 0.0;
            for (pos, &p) in itm.iter().enumerate() {
                gain += at(p) - cash[p];
                let boundary = pos + 1 == itm.len() || at(itm[pos + 1]) < at(p);
                if boundary && gain >= best_gain && gain > 0.0 {
                    best_gain = gain;
                    best = at(p);
                }
            }
            thresholds[d] = best;
        }
        for (p, c) in cash.iter_mut().enumerate() {
            let i = at(p);
            if i > 0.0 && i >= thresholds[d] {
                *c = i;
            }
        }
    }
    Ok(PolicyThresholds {
        thresholds: schedule.into_iter().zip(thresholds).collect(),
    })
}

/// Payoff of following `policy` from exercise index `first` onwards.
fn stopped_payoff(product: &BermudanSwaption, policy: &PolicyThresholds, states: &[f64], first: usize) -> f64 {
    for d in first..policy.thresholds.len() {
        let e = policy.thresholds[d].0;
        let i = product.intrinsic_on_path(states, e);
        if policy.exercise(d, i) {
            return i;
        }
    }
    0.0
}

/// Lower bound: mean stopped payoff over `cfg.paths` fresh paths.
pub fn lower_bound(
    model: &LmmModel,
    product: &BermudanSwaption,
    policy: &PolicyThresholds,
    cfg: &McConfig,
) -> Result<PriceEstimate> {
    cfg.validate()?;
    check_n(model, product.n)?;
    let sim = PathSimulator::new(model, cfg.substeps, cfg.drift)?;
    let parts = run_paths(&sim, cfg, PURPOSE_LOWER, cfg.paths, RunningStats::default, |acc, states| {
        acc.push(stopped_payoff(product, policy, states, 0))
    });
    Ok(merge_stats(&parts).estimate(model.config.terminal_discount()))
}

/// Andersen-Broadie duality gap `Delta_0` and its standard error.
///
/// Along each outer path the policy's value process is `I_d` where it
/// exercises and the nested estimate `Q_d` of the continuation value
/// elsewhere; the martingale has increments `value_{d+1} - Q_d`. The gap is
/// the mean over outer paths of `max_d (I_d^+ - pi_d)`.
pub fn upper_bound(
    model: &LmmModel,
    product: &BermudanSwaption,
    policy: &PolicyThresholds,
    cfg: &McConfig,
) -> Result<PriceEstimate> {
    cfg.validate()?;
    check_n(model, product.n)?;
    let sim = PathSimulator::new(model, cfg.substeps, cfg.drift)?;
    let n = model.n();
    let dates = policy.thresholds.len();
    let x0 = sim.initial_log_rates();
    let parts = batched(cfg.outer_paths, cfg.batch_size.min(64), |b, count| {
        let mut rng = stream_rng(cfg.seed, PURPOSE_OUTER, b);
        let mut bridge = stream_rng(cfg.seed, PURPOSE_OUTER, b | BRIDGE_STREAM);
        let mut outer = vec![0.0; n * n];
        let mut inner = vec![0.0; n * n];
        let mut stats = RunningStats::default();
        for o in 0..count {
            let path_id = b * cfg.batch_size.min(64) as u64 + o as u64;
            sim.simulate(&mut rng, &mut bridge, 0, &x0, &mut outer);
            let mut pi = 0.0;
            let mut best = f64::NEG_INFINITY;
            let mut prev_q = 0.0;
            for d in 0..dates {
                let e = policy.thresholds[d].0;
                let intrinsic = product.intrinsic_on_path(&outer, e);
                let q = if d + 1 == dates {
                    0.0
                } else {
                    let stream = path_id * dates as u64 + d as u64;
                    let mut irng = stream_rng(cfg.seed, PURPOSE_INNER, stream);
                    let mut ibridge = stream_rng(cfg.seed, PURPOSE_INNER, stream | BRIDGE_STREAM);
                    let start: Vec<f64> = outer[e * n..(e + 1) * n].iter().map(|l| l.ln()).collect();
                    let mut acc = 0.0;
                    for _ in 0..cfg.inner_paths {
                        sim.simulate(&mut irng, &mut ibridge, e, &start, &mut inner);
                        acc += stopped_payoff(product, policy, &inner, d + 1);
                    }
                    acc / cfg.inner_paths as f64
                };
                let value = if policy.exercise(d, intrinsic) { intrinsic } else { q };
                pi = if d == 0 { value } else { pi + value - prev_q };
                best = best.max(intrinsic.max(0.0) - pi);
                prev_q = q;
            }
            stats.push(best);
        }
        stats
    });
    Ok(merge_stats(&parts).estimate(model.config.terminal_discount()))
}

/// Policy, lower bound and duality gap in one call.
pub fn bermudan_bounds(model: &LmmModel, product: &BermudanSwaption, cfg: &McConfig) -> Result<(PolicyThresholds, BoundEstimate)> {
    let policy = learn_policy(model, product, cfg)?;
    let lower = lower_bound(model, product, &policy, cfg)?;
    let gap = upper_bound(model, product, &policy, cfg)?;
    Ok((
        policy,
        BoundEstimate {
            lower: lower.value,
            lower_std_error: lower.std_error,
            gap: gap.value,
            gap_std_error: gap.std_error,
        },
    ))
}

/// Shared-noise estimates of the terms of an expansion plan.
#[derive(Debug, Clone, PartialEq)]
pub struct VrstEstimate {
    /// One estimate per plan term.
    pub terms: Vec<PriceEstimate>,
    /// `V_{r,s,t}` per plan level.
    pub levels: Vec<PriceEstimate>,
    /// Running sums of the levels.
    pub totals: Vec<PriceEstimate>,
    /// All eigenvalues active (the frozen-drift value itself).
    pub full: PriceEstimate,
    /// Running sums minus the full value, with shared-noise errors.
    pub errors: Vec<PriceEstimate>,
}

/// Estimate every term of `plan` by sampling the z-space Gaussian process
/// with each term's eigenvalues, all terms and the full model sharing the
/// same normals.
///
/// `ln L_j(T_e) = ln L_j(0) + T_e (mu_j - vol^2/2) + sum_k Q_jk sqrt(lambda'_k) W_k(T_e)`.
pub fn mc_vrst(
    model: &LmmModel,
    plan: &ExpansionPlan,
    contract: &dyn PathContract,
    paths: usize,
    seed: u64,
    batch_size: usize,
) -> Result<VrstEstimate> {
    check_n(model, contract.n())?;
    if plan.n != model.n() {
        return Err(Error::InvalidConfig(format!(
            "plan is for N={} but the model has N={}",
            plan.n,
            model.n()
        )));
    }
    if paths == 0 || batch_size == 0 {
        return Err(Error::InvalidConfig("paths and batch size must be positive".into()));
    }
    let n = model.n();
    let alpha = model.config.alpha;
    let spectrum = model.spectrum();
    let q = spectrum.vectors();
    let means: Vec<Vec<f64>> = (0..n).map(|e| model.mean_log_rates(model.config.tenor(e))).collect();
    // Per term: active (direction, sqrt(lambda')).
    let mut samplers: Vec<Vec<(usize, f64)>> = plan
        .terms
        .iter()
        .map(|t| {
            t.lambda_prime(plan.r, spectrum)
                .into_iter()
                .filter(|(_, l)| *l > 0.0)
                .map(|(k, l)| (k, l.sqrt()))
                .collect()
        })
        .collect();
    samplers.push(
        (0..n)
            .filter(|&k| spectrum.eigenvalue(k) > 0.0)
            .map(|k| (k, spectrum.eigenvalue(k).sqrt()))
            .collect(),
    );
    let level_weights: Vec<Vec<(usize, f64)>> = plan
        .levels
        .iter()
        .map(|l| l.weights.iter().map(|(i, w)| (*i, rational_to_f64(*w))).collect())
        .collect();
    let n_terms = plan.terms.len();
    let n_levels = plan.levels.len();
    let full_curve = contract.needs_full_curve();
    let std_normal = standard_normal();

    #[derive(Clone)]
    struct Acc {
        terms: Vec<RunningStats>,
        levels: Vec<RunningStats>,
        totals: Vec<RunningStats>,
        full: RunningStats,
        errors: Vec<RunningStats>,
    }
    let parts = batched(paths, batch_size, |b, count| {
        let mut rng = stream_rng(seed, PURPOSE_VRST, b);
        let mut acc = Acc {
            terms: vec![RunningStats::default(); n_terms],
            levels: vec![RunningStats::default(); n_levels],
            totals: vec![RunningStats::default(); n_levels],
            full: RunningStats::default(),
            errors: vec![RunningStats::default(); n_levels],
        };
        // w[e * n + k] = W_k(T_e)
        let mut w = vec![0.0; n * n];
        let mut states = vec![0.0; n * n];
        let mut values = vec![0.0; n_terms + 1];
        let sa = alpha.sqrt();
        for _ in 0..count {
            for e in 1..n {
                for k in 0..n {
                    w[e * n + k] = w[(e - 1) * n + k] + sa * normal(&mut rng, &std_normal);
                }
            }
            for (t, active) in samplers.iter().enumerate() {
                for e in 0..n {
                    let (lo, hi) = if full_curve { (0, n) } else { (e, e + 1) };
                    for j in lo..hi {
                        let mut x = means[e][j];
                        for &(k, s) in active {
                            x += q[(j, k)] * s * w[e * n + k];
                        }
                        states[e * n + j] = x.exp();
                    }
                }
                values[t] = contract.path_value(&states);
            }
            let full = values[n_terms];
            acc.full.push(full);
            for (t, v) in values[..n_terms].iter().enumerate() {
                acc.terms[t].push(*v);
            }
            let mut running = 0.0;
            for (l, weights) in level_weights.iter().enumerate() {
                let lv: f64 = weights.iter().map(|(i, wt)| wt * values[*i]).sum();
                running += lv;
                acc.levels[l].push(lv);
                acc.totals[l].push(running);
                acc.errors[l].push(running - full);
            }
        }
        acc
    });
    let discount = model.config.terminal_discount();
    let mut total = parts[0].clone();
    for p in &parts[1..] {
        total.full.merge(&p.full);
        for (a, b) in total.terms.iter_mut().zip(&p.terms) {
            a.merge(b);
        }
        for (a, b) in total.levels.iter_mut().zip(&p.levels) {
            a.merge(b);
        }
        for (a, b) in total.totals.iter_mut().zip(&p.totals) {
            a.merge(b);
        }
        for (a, b) in total.errors.iter_mut().zip(&p.errors) {
            a.merge(b);
        }
    }
    let est = |v: &[RunningStats]| v.iter().map(|s| s.estimate(discount)).collect::<Vec<_>>();
    Ok(VrstEstimate {
        terms: est(&total.terms),
        levels: est(&total.levels),
        totals: est(&total.totals),
        full: total.full.estimate(discount),
        errors: est(&total.errors),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LmmConfig;
    use crate::products::{RatchetFloor, RatchetLegs};
    use approx::assert_relative_eq;

    fn small_model(n: usize) -> LmmModel {
        LmmModel::new(LmmConfig::flat(n, 0.25, 0.0413, 0.2, 0.1).unwrap()).unwrap()
    }

    fn small_cfg(paths: usize) -> McConfig {
        McConfig {
            policy_paths: paths,
            paths,
            outer_paths: 64,
            inner_paths: 64,
            substeps: 5,
            drift: DriftMode::Full,
            seed: 7,
            batch_size: 256,
        }
    }

    #[test]
    fn running_stats_merge_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.01).collect();
        let mut seq = RunningStats::default();
        xs.iter().for_each(|x| seq.push(*x));
        let mut a = RunningStats::default();
        let mut b = RunningStats::default();
        xs[..300].iter().for_each(|x| a.push(*x));
        xs[300..].iter().for_each(|x| b.push(*x));
        a.merge(&b);
        assert_relative_eq!(a.mean(), seq.mean(), epsilon = 1e-14);
        assert_relative_eq!(a.std_error(), seq.std_error(), max_relative = 1e-12);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let model = small_model(4);
        let floor = RatchetFloor::new(4, 0.25, 0.1, 0.2, 0.9, 0.0, RatchetLegs::LastFloorlet).unwrap();
        let cfg = small_cfg(2000);
        let a = mc_price(&model, &floor, &cfg).unwrap();
        let b = mc_price(&model, &floor, &cfg).unwrap();
        assert_eq!(a, b);
        let c = mc_price(&model, &floor, &McConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.value, c.value);
    }

    #[test]
    fn frozen_substeps_do_not_change_tenor_values() {
        let model = small_model(5);
        let floor = RatchetFloor::new(5, 0.25, 0.1, 0.0, 1.0, 0.0, RatchetLegs::LastFloorlet).unwrap();
        let base = McConfig { drift: DriftMode::Frozen, substeps: 1, ..small_cfg(3000) };
        let a = mc_price(&model, &floor, &base).unwrap();
        let b = mc_price(&model, &floor, &McConfig { substeps: 5, ..base }).unwrap();
        assert!((a.value - b.value).abs() <= 1e-12 * a.value.abs());
    }

    #[test]
    fn single_exercise_date_has_zero_gap() {
        let model = small_model(5);
        let swaption = BermudanSwaption::new(5, 0.25, 0.1, &[4]).unwrap();
        let cfg = small_cfg(2000);
        let (policy, bounds) = bermudan_bounds(&model, &swaption, &cfg).unwrap();
        assert_eq!(policy.thresholds, vec![(4, 0.0)]);
        assert_eq!(bounds.gap, 0.0);
        assert_eq!(bounds.gap_std_error, 0.0);
    }

    #[test]
    fn worthless_early_dates_are_never_exercised() {
        // Strike far above the curve: nothing is ever in the money.
        let model = small_model(5);
        let swaption = BermudanSwaption::new(5, 0.25, 1.0, &[0, 2, 4]).unwrap();
        let policy = learn_policy(&model, &swaption, &small_cfg(500)).unwrap();
        assert_eq!(policy.thresholds[0].1, f64::INFINITY);
        assert_eq!(policy.thresholds[1].1, f64::INFINITY);
        let lower = lower_bound(&model, &swaption, &policy, &small_cfg(500)).unwrap();
        assert_eq!(lower.value, 0.0);
    }

    #[test]
    fn identical_terms_cancel_in_levels() {
        // With r = N - 1 there is one expandable direction; its first-order
        // level is u(lambda) - u(lambda0), and the base term alone is the
        // full model when the last direction carries no variance... here we
        // just check exact cancellation of a stencil applied to equal values.
        let model = small_model(3);
        let plan = ExpansionPlan::new(3, 1, &[(0, 0), (1, 1)]).unwrap();
        let floor = RatchetFloor::new(3, 0.25, 0.1, 0.0, 1.0, 0.0, RatchetLegs::LastFloorlet).unwrap();
        let est = mc_vrst(&model, &plan, &floor, 2000, 3, 500).unwrap();
        assert_eq!(est.terms.len(), 3);
        assert_eq!(est.levels.len(), 2);
        assert_eq!(est.totals[0].value, est.levels[0].value);
        assert!(est.full.value > 0.0);
    }

    #[test]
    fn frozen_terminal_log_rate_moments() {
        let model = small_model(4);
        let sim = PathSimulator::new(&model, 3, DriftMode::Frozen).unwrap();
        let x0 = sim.initial_log_rates();
        let mut rng = stream_rng(1, 99, 0);
        let mut bridge = stream_rng(1, 99, BRIDGE_STREAM);
        let mut states = vec![0.0; 16];
        let mut stats = RunningStats::default();
        let mut sq = RunningStats::default();
        let paths = 20_000;
        let t = model.config.maturity();
        let mean = x0[2] + t * model.transform.log_drift()[2];
        for _ in 0..paths {
            sim.simulate(&mut rng, &mut bridge, 0, &x0, &mut states);
            let x = states[3 * 4 + 2].ln();
            stats.push(x);
            sq.push((x - mean) * (x - mean));
        }
        let var = 0.04 * t;
        assert!((stats.mean() - mean).abs() < 4.0 * stats.std_error());
        assert!((sq.mean() - var).abs() < 4.0 * sq.std_error());
    }
}
