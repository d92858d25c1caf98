//! Bermudan payer swaptions and ratchet floors.
//!
//! Tenors are 0-based: rate `j` fixes at `T_j` and pays at `T_{j+1}`; the last
//! rate fixes at `T_{n-1}` and the terminal bond matures at `T_n`. All values
//! here are relative to the terminal bond. Each product implements
//! [`PdeContract`] for backward induction on PDE grids and [`PathContract`]
//! for Monte Carlo paths.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::heatpde::PdeContract;
use crate::spline::NaturalCubicSpline;

/// A contract valued pathwise from the forward curve at each tenor date.
///
/// `states[e * n + j]` holds `L_j(T_e)` for tenor `e = 0..n`. When
/// [`PathContract::needs_full_curve`] is false only the fixings `L_e(T_e)`
/// are guaranteed to be filled in.
pub trait PathContract: Sync {
    fn n(&self) -> usize;

    fn needs_full_curve(&self) -> bool;

    /// Pathwise value at maturity in terminal-bond units.
    fn path_value(&self, states: &[f64]) -> f64;
}

/// `max(alpha sum_{j>=i} (L_j - K) prod_{k>j} (1 + alpha L_k), 0)`: the payer
/// swap entered at `T_i`, each cashflow converted to terminal-bond units.
pub fn swaption_intrinsic(rates: &[f64], strike: f64, i: usize, alpha: f64) -> f64 {
    let mut sum = 0.0;
    let mut growth = 1.0;
    for j in (i..rates.len()).rev() {
        sum += (rates[j] - strike) * growth;
        growth *= 1.0 + alpha * rates[j];
    }
    (alpha * sum).max(0.0)
}

/// Payer swaption exercisable at a subset of the fixing dates.
#[derive(Debug, Clone, PartialEq)]
pub struct BermudanSwaption {
    pub n: usize,
    pub alpha: f64,
    pub strike: f64,
    exercise: Vec<bool>,
}

impl BermudanSwaption {
    /// `schedule` lists 0-based tenor indices in `0..n`.
    pub fn new(n: usize, alpha: f64, strike: f64, schedule: &[usize]) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 rates, got {n}")));
        }
        if schedule.is_empty() {
            return Err(Error::InvalidConfig("exercise schedule is empty".into()));
        }
        let mut exercise = vec![false; n];
        for &e in schedule {
            if e >= n {
                return Err(Error::InvalidConfig(format!(
                    "exercise tenor {e} outside 0..{n}"
                )));
            }
            exercise[e] = true;
        }
        Ok(Self {
            n,
            alpha,
            strike,
            exercise,
        })
    }

    /// Yearly exercise for quarterly accrual: every fourth tenor from 0,
    /// plus the last fixing date.
    pub fn yearly_schedule(n: usize) -> Vec<usize> {
        let mut s: Vec<usize> = (0..n).step_by(4).collect();
        if s.last() != Some(&(n - 1)) {
            s.push(n - 1);
        }
        s
    }

    pub fn schedule(&self) -> Vec<usize> {
        (0..self.n).filter(|&e| self.exercise[e]).collect()
    }

    pub fn is_exercise_date(&self, tenor: usize) -> bool {
        self.exercise.get(tenor).copied().unwrap_or(false)
    }

    pub fn intrinsic(&self, rates: &[f64], tenor: usize) -> f64 {
        swaption_intrinsic(rates, self.strike, tenor, self.alpha)
    }

    /// Intrinsic value at exercise tenor `e` from MC states.
    pub fn intrinsic_on_path(&self, states: &[f64], e: usize) -> f64 {
        self.intrinsic(&states[e * self.n..(e + 1) * self.n], e)
    }

    /// Same swaption with only the last exercise date.
    pub fn european(&self) -> Self {
        let last = *self.schedule().last().expect("schedule is non-empty");
        Self::new(self.n, self.alpha, self.strike, &[last]).expect("valid schedule")
    }
}

/// Pointwise exercise decision on grid values.
pub fn bermudan_event(continuation: &mut [f64], intrinsic: &[f64]) {
    for (c, i) in continuation.iter_mut().zip(intrinsic) {
        if *i > *c {
            *c = *i;
        }
    }
}

impl PdeContract for BermudanSwaption {
    fn payoff(&self, rates: &[f64], out: &mut [f64]) {
        out[0] = if self.exercise[self.n - 1] {
            self.intrinsic(rates, self.n - 1)
        } else {
            0.0
        };
    }

    fn has_event(&self, tenor: usize) -> bool {
        self.is_exercise_date(tenor)
    }

    fn event(&self, tenor: usize, rates: &[f64], values: &mut [f64]) {
        let i = self.intrinsic(rates, tenor);
        bermudan_event(values, &[i]);
    }
}

/// `K_next = max(a L + b K + c, 0)`.
pub fn ratchet_strike_update(k_prev: f64, l_prev: f64, a: f64, b: f64, c: f64) -> f64 {
    (a * l_prev + b * k_prev + c).max(0.0)
}

/// Floorlet fixing at tenor `i` with strike `strike`, paid at `T_{i+1}` and
/// converted to terminal-bond units with the curve at `T_i`:
/// `max(K - L_i, 0) prod_{k>i} (1 + alpha L_k)`.
pub fn floorlet_payoff(strike: f64, rates: &[f64], i: usize, alpha: f64) -> f64 {
    let intrinsic = (strike - rates[i]).max(0.0);
    if intrinsic == 0.0 {
        return 0.0;
    }
    intrinsic * rates[i + 1..].iter().map(|l| 1.0 + alpha * l).product::<f64>()
}

/// Spline nodes of the strike axis: 21 on `[0, 0.05]`, 41 on `[0.05, 0.15]`,
/// 21 on `[0.15, 0.5]`, shared endpoints merged (81 nodes).
#[derive(Debug, Clone)]
pub struct StrikeAxis {
    spline: NaturalCubicSpline,
}

impl StrikeAxis {
    pub fn standard() -> Self {
        Self::from_segments(&[(0.0, 0.05, 21), (0.05, 0.15, 41), (0.15, 0.5, 21)])
            .expect("standard strike axis is valid")
    }

    /// Concatenated equidistant segments `(start, end, nodes)`.
    pub fn from_segments(segments: &[(f64, f64, usize)]) -> Result<Self> {
        let mut nodes: Vec<f64> = Vec::new();
        for &(a, b, count) in segments {
            if count < 2 || !(b > a) {
                return Err(Error::InvalidConfig(format!(
                    "invalid strike segment [{a}, {b}] with {count} nodes"
                )));
            }
            for k in 0..count {
                let x = a + (b - a) * k as f64 / (count - 1) as f64;
                match nodes.last() {
                    Some(&last) if (x - last).abs() < 1e-15 => {}
                    _ => nodes.push(x),
                }
            }
        }
        Ok(Self {
            spline: NaturalCubicSpline::new(&nodes)?,
        })
    }

    pub fn nodes(&self) -> &[f64] {
        self.spline.nodes()
    }

    pub fn k_max(&self) -> f64 {
        *self.nodes().last().expect("non-empty axis")
    }

    pub fn spline(&self) -> &NaturalCubicSpline {
        &self.spline
    }
}

/// Which floorlets of the ratchet are priced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatchetLegs {
    /// Only the final floorlet, whose strike carries the whole reset history.
    LastFloorlet,
    /// Every floorlet `i = 0..n`.
    Portfolio,
}

/// Ratchet floor with strike resets `K_{i+1} = max(a L_i(T_i) + b K_i + c, 0)`.
#[derive(Debug)]
pub struct RatchetFloor {
    pub n: usize,
    pub alpha: f64,
    pub initial_strike: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub legs: RatchetLegs,
    axis: StrikeAxis,
    clamps: AtomicUsize,
}

impl Clone for RatchetFloor {
    fn clone(&self) -> Self {
        Self {
            n: self.n,
            alpha: self.alpha,
            initial_strike: self.initial_strike,
            a: self.a,
            b: self.b,
            c: self.c,
            legs: self.legs,
            axis: self.axis.clone(),
            clamps: AtomicUsize::new(self.clamps.load(Ordering::Relaxed)),
        }
    }
}

impl RatchetFloor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        alpha: f64,
        initial_strike: f64,
        a: f64,
        b: f64,
        c: f64,
        legs: RatchetLegs,
    ) -> Result<Self> {
        let axis = StrikeAxis::standard();
        if n < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 rates, got {n}")));
        }
        if !(initial_strike >= 0.0 && initial_strike <= axis.k_max()) {
            return Err(Error::InvalidConfig(format!(
                "initial strike {initial_strike} outside [0, {}]",
                axis.k_max()
            )));
        }
        if ![a, b, c].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("reset coefficients must be finite".into()));
        }
        Ok(Self {
            n,
            alpha,
            initial_strike,
            a,
            b,
            c,
            legs,
            axis,
            clamps: AtomicUsize::new(0),
        })
    }

    pub fn axis(&self) -> &StrikeAxis {
        &self.axis
    }

    pub fn next_strike(&self, k: f64, l: f64) -> f64 {
        ratchet_strike_update(k, l, self.a, self.b, self.c)
    }

    /// Jump condition at fixing `tenor`: `values` (one per strike node) are
    /// replaced by the spline of the post-reset values at the reset strike,
    /// plus the floorlet fixing at `tenor` in portfolio mode.
    pub fn ratchet_event(&self, tenor: usize, rates: &[f64], values: &mut [f64]) {
        let spline = self.axis.spline();
        let nodes = spline.nodes();
        let k_max = self.axis.k_max();
        let mut m = vec![0.0; values.len()];
        spline.second_derivatives(values, &mut m);
        let post: Vec<f64> = values.to_vec();
        let l = rates[tenor];
        let mut clamped = 0;
        for (v, &k) in values.iter_mut().zip(nodes) {
            let mut next = self.next_strike(k, l);
            if next > k_max {
                next = k_max;
                clamped += 1;
            }
            *v = spline.eval(&post, &m, next);
            if self.legs == RatchetLegs::Portfolio {
                *v += floorlet_payoff(k, rates, tenor, self.alpha);
            }
        }
        if clamped > 0 {
            self.clamps.fetch_add(clamped, Ordering::Relaxed);
        }
    }

    pub fn reset_clamp_count(&self) {
        self.clamps.store(0, Ordering::Relaxed);
    }
}

impl PdeContract for RatchetFloor {
    fn slices(&self) -> usize {
        self.axis.nodes().len()
    }

    fn payoff(&self, rates: &[f64], out: &mut [f64]) {
        let last = self.n - 1;
        for (o, &k) in out.iter_mut().zip(self.axis.nodes()) {
            *o = (k - rates[last]).max(0.0);
        }
    }

    fn has_event(&self, tenor: usize) -> bool {
        tenor + 1 < self.n
    }

    fn event(&self, tenor: usize, rates: &[f64], values: &mut [f64]) {
        self.ratchet_event(tenor, rates, values);
    }

    fn readout(&self, values: &[f64]) -> f64 {
        let spline = self.axis.spline();
        let mut m = vec![0.0; values.len()];
        spline.second_derivatives(values, &mut m);
        spline.eval(values, &m, self.initial_strike)
    }

    fn clamp_count(&self) -> usize {
        self.clamps.load(Ordering::Relaxed)
    }
}

impl PathContract for RatchetFloor {
    fn n(&self) -> usize {
        self.n
    }

    fn needs_full_curve(&self) -> bool {
        self.legs == RatchetLegs::Portfolio
    }

    fn path_value(&self, states: &[f64]) -> f64 {
        let n = self.n;
        let mut k = self.initial_strike;
        let mut total = 0.0;
        for e in 0..n - 1 {
            let l = states[e * n + e];
            if self.legs == RatchetLegs::Portfolio {
                total += floorlet_payoff(k, &states[e * n..(e + 1) * n], e, self.alpha);
            }
            k = self.next_strike(k, l);
        }
        total + (k - states[(n - 1) * n + n - 1]).max(0.0)
    }
}

impl PathContract for BermudanSwaption {
    fn n(&self) -> usize {
        self.n
    }

    fn needs_full_curve(&self) -> bool {
        true
    }

    /// Value of exercising at the first in-the-money date (a crude policy;
    /// the Monte Carlo engine uses learned thresholds instead).
    fn path_value(&self, states: &[f64]) -> f64 {
        self.schedule()
            .into_iter()
            .map(|e| self.intrinsic_on_path(states, e))
            .find(|v| *v > 0.0)
            .unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn intrinsic_examples() {
        assert_eq!(swaption_intrinsic(&[0.1, 0.1, 0.1], 0.1, 0, 0.25), 0.0);
        let rates = [0.1, 0.1, 0.1, 0.1, 0.12];
        assert_relative_eq!(swaption_intrinsic(&rates, 0.10, 4, 0.25), 5e-3, epsilon = 1e-17);
        let flat = [0.11; 5];
        let expected: f64 = 0.25 * 0.01 * (0..5).map(|j| 1.0275f64.powi(4 - j)).sum::<f64>();
        assert_relative_eq!(swaption_intrinsic(&flat, 0.10, 0, 0.25), expected, epsilon = 1e-16);
        assert_eq!(swaption_intrinsic(&[0.05; 4], 0.1, 0, 0.25), 0.0);
    }

    #[test]
    fn yearly_schedules() {
        assert_eq!(BermudanSwaption::yearly_schedule(5), vec![0, 4]);
        assert_eq!(BermudanSwaption::yearly_schedule(21), vec![0, 4, 8, 12, 16, 20]);
        assert_eq!(BermudanSwaption::yearly_schedule(11), vec![0, 4, 8, 10]);
    }

    #[test]
    fn bermudan_event_cases() {
        let mut v = vec![0.3, 0.1, 0.0];
        bermudan_event(&mut v, &[0.0, -1.0, 0.0]);
        assert_eq!(v, vec![0.3, 0.1, 0.0]);
        let mut v = vec![0.0; 3];
        bermudan_event(&mut v, &[0.2, 0.0, 0.5]);
        assert_eq!(v, vec![0.2, 0.0, 0.5]);
        let once = v.clone();
        bermudan_event(&mut v, &[0.2, 0.0, 0.5]);
        assert_eq!(v, once);
    }

    #[test]
    fn strike_updates() {
        assert_eq!(ratchet_strike_update(0.1, 0.07, 0.0, 1.0, 0.0), 0.1);
        assert_relative_eq!(ratchet_strike_update(0.1, 0.1, 0.2, 0.9, 0.0), 0.11, epsilon = 1e-16);
        assert_relative_eq!(ratchet_strike_update(0.1, 0.1, 0.25, 0.95, -0.01), 0.11, epsilon = 1e-15);
        assert_eq!(ratchet_strike_update(0.0, 0.01, 0.1, 0.5, -0.01), 0.0);
    }

    #[test]
    fn floorlet_examples() {
        assert_relative_eq!(floorlet_payoff(0.11, &[0.1, 0.1, 0.10], 2, 0.25), 0.01, epsilon = 1e-16);
        assert_eq!(floorlet_payoff(0.09, &[0.1, 0.1], 0, 0.25), 0.0);
        assert_relative_eq!(
            floorlet_payoff(0.12, &[0.1, 0.1, 0.1], 1, 0.25),
            0.02 * 1.025,
            epsilon = 1e-16
        );
    }

    #[test]
    fn strike_axis_layout() {
        let axis = StrikeAxis::standard();
        let nodes = axis.nodes();
        assert_eq!(nodes.len(), 81);
        assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(nodes[0], 0.0);
        assert_relative_eq!(nodes[20], 0.05, epsilon = 1e-15);
        assert_relative_eq!(nodes[60], 0.15, epsilon = 1e-15);
        assert_eq!(axis.k_max(), 0.5);
    }

    #[test]
    fn identity_reset_keeps_values() {
        let floor = RatchetFloor::new(5, 0.25, 0.1, 0.0, 1.0, 0.0, RatchetLegs::LastFloorlet).unwrap();
        let mut values: Vec<f64> = floor.axis().nodes().iter().map(|k| (k - 0.1f64).max(0.0).powi(2)).collect();
        let before = values.clone();
        floor.ratchet_event(2, &[0.1; 5], &mut values);
        for (a, b) in values.iter().zip(&before) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_values_interpolate_exactly() {
        let floor = RatchetFloor::new(5, 0.25, 0.1, 0.2, 0.9, 0.0, RatchetLegs::LastFloorlet).unwrap();
        let mut values: Vec<f64> = floor.axis().nodes().iter().map(|k| 0.3 - 0.7 * k).collect();
        floor.ratchet_event(1, &[0.1; 5], &mut values);
        for (v, k) in values.iter().zip(floor.axis().nodes()) {
            let next = (0.2 * 0.1 + 0.9 * k).min(0.5);
            assert!((v - (0.3 - 0.7 * next)).abs() < 1e-12);
        }
    }

    #[test]
    fn strike_clamp_is_counted() {
        let floor = RatchetFloor::new(3, 0.25, 0.1, 0.0, 2.0, 0.0, RatchetLegs::LastFloorlet).unwrap();
        let mut values = vec![1.0; 81];
        floor.ratchet_event(0, &[0.1; 3], &mut values);
        assert!(floor.clamp_count() > 0);
        floor.reset_clamp_count();
        assert_eq!(floor.clamp_count(), 0);
    }

    #[test]
    fn path_values() {
        let n = 3;
        // Rates at each tenor; only the diagonal matters for the last floorlet.
        let states = vec![0.10, 0.0, 0.0, 0.0, 0.12, 0.0, 0.0, 0.0, 0.09];
        let last = RatchetFloor::new(n, 0.25, 0.1, 0.2, 0.9, 0.0, RatchetLegs::LastFloorlet).unwrap();
        let k1 = 0.2 * 0.10 + 0.9 * 0.1;
        let k2 = 0.2 * 0.12 + 0.9 * k1;
        assert_relative_eq!(last.path_value(&states), k2 - 0.09, epsilon = 1e-16);
        let full = vec![0.10, 0.10, 0.10, 0.0, 0.12, 0.12, 0.0, 0.0, 0.09];
        let port = RatchetFloor::new(n, 0.25, 0.11, 0.0, 1.0, 0.0, RatchetLegs::Portfolio).unwrap();
        let expected = 0.01 * 1.025 * 1.025 + 0.0 + 0.02;
        assert_relative_eq!(port.path_value(&full), expected, epsilon = 1e-15);
    }

    #[test]
    fn invalid_products() {
        assert!(BermudanSwaption::new(5, 0.25, 0.1, &[]).is_err());
        assert!(BermudanSwaption::new(5, 0.25, 0.1, &[5]).is_err());
        assert!(RatchetFloor::new(5, 0.25, 0.7, 0.0, 1.0, 0.0, RatchetLegs::LastFloorlet).is_err());
    }
}
