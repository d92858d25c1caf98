//! Natural cubic splines on a fixed set of nodes.
//!
//! The tridiagonal system for the second derivatives depends only on the
//! nodes, so it is factorized once and reused for every set of values.

use crate::error::{Error, Result};

/// Factorized natural cubic spline basis on fixed nodes.
#[derive(Debug, Clone)]
pub struct NaturalCubicSpline {
    x: Vec<f64>,
    h: Vec<f64>,
    // Thomas factorization of the interior system (size n - 2).
    sub: Vec<f64>,
    sup_mod: Vec<f64>,
    inv_pivot: Vec<f64>,
}

impl NaturalCubicSpline {
    pub fn new(nodes: &[f64]) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidInput("spline needs at least 2 nodes".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("spline nodes must be strictly increasing".into()));
        }
        let n = nodes.len();
        let h: Vec<f64> = nodes.windows(2).map(|w| w[1] - w[0]).collect();
        let m = n.saturating_sub(2);
        let mut sub = vec![0.0; m];
        let mut sup_mod = vec![0.0; m];
        let mut inv_pivot = vec![0.0; m];
        for i in 0..m {
            // Row for interior node i + 1.
            let lo = h[i];
            let hi = h[i + 1];
            let diag = 2.0 * (lo + hi);
            sub[i] = lo;
            let pivot = if i == 0 { diag } else { diag - lo * sup_mod[i - 1] };
            inv_pivot[i] = 1.0 / pivot;
            sup_mod[i] = hi / pivot;
        }
        Ok(Self {
            x: nodes.to_vec(),
            h,
            sub,
            sup_mod,
            inv_pivot,
        })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Second derivatives at the nodes for data `y`, written into `m`.
    pub fn second_derivatives(&self, y: &[f64], m: &mut [f64]) {
        let n = self.x.len();
        debug_assert_eq!(y.len(), n);
        debug_assert_eq!(m.len(), n);
        m[0] = 0.0;
        m[n - 1] = 0.0;
        if n < 3 {
            return;
        }
        let h = &self.h;
        let interior = n - 2;
        for i in 0..interior {
            let rhs = 6.0 * ((y[i + 2] - y[i + 1]) / h[i + 1] - (y[i + 1] - y[i]) / h[i]);
            let prev = if i == 0 { 0.0 } else { m[i] };
            m[i + 1] = (rhs - self.sub[i] * prev) * self.inv_pivot[i];
        }
        for i in (0..interior - 1).rev() {
            m[i + 1] -= self.sup_mod[i] * m[i + 2];
        }
    }

    /// Index `k` of the interval `[x_k, x_{k+1}]` containing `t` (clamped to the end intervals).
    pub fn locate(&self, t: f64) -> usize {
        let n = self.x.len();
        match self.x.partition_point(|&xi| xi <= t) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        }
    }

    /// Evaluate the spline with data `y` and second derivatives `m` at `t`.
    /// Outside the node range the end cubic is extended.
    pub fn eval(&self, y: &[f64], m: &[f64], t: f64) -> f64 {
        self.eval_in(self.locate(t), y, m, t)
    }

    fn eval_in(&self, k: usize, y: &[f64], m: &[f64], t: f64) -> f64 {
        let h = self.h[k];
        let a = (self.x[k + 1] - t) / h;
        let b = (t - self.x[k]) / h;
        a * y[k]
            + b * y[k + 1]
            + ((a * a * a - a) * m[k] + (b * b * b - b) * m[k + 1]) * h * h / 6.0
    }

    /// Convenience: fit `y` and return an owned curve.
    pub fn fit(&self, y: &[f64]) -> Result<SplineCurve<'_>> {
        if y.len() != self.x.len() {
            return Err(Error::InvalidInput(format!(
                "spline has {} nodes but {} values were given",
                self.x.len(),
                y.len()
            )));
        }
        let mut m = vec![0.0; y.len()];
        self.second_derivatives(y, &mut m);
        Ok(SplineCurve {
            basis: self,
            y: y.to_vec(),
            m,
        })
    }
}

/// A fitted spline.
#[derive(Debug, Clone)]
pub struct SplineCurve<'a> {
    basis: &'a NaturalCubicSpline,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl SplineCurve<'_> {
    pub fn eval(&self, t: f64) -> f64 {
        self.basis.eval(&self.y, &self.m, t)
    }
}
