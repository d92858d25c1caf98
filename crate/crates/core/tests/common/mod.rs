//! Oracles shared by the integration tests.

#![allow(dead_code)]

use pdexpand::heatpde::{ActiveAxis, AxisMap, HeatSolver, SolutionSurface, Tridiagonal};
use statrs::distribution::{ContinuousCDF, Normal};

pub fn norm_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

/// `E[max(F0 exp(X) - K, 0)]` with `X ~ N(0, var)`.
pub fn lognormal_call(f0: f64, k: f64, var: f64) -> f64 {
    let sd = var.sqrt();
    let fwd = f0 * (0.5 * var).exp();
    let d1 = ((fwd / k).ln() + 0.5 * var) / sd;
    fwd * norm_cdf(d1) - k * norm_cdf(d1 - sd)
}

/// Last floorlet `max(K - L_{n-1}(T_{n-1}), 0)` paid at `T_n` on a flat
/// curve, with no strike resets. Under the terminal measure the last rate is
/// a driftless lognormal, so this is Black's put times `P(0, T_n)`.
pub fn last_floorlet_black(n: usize, alpha: f64, level: f64, vol: f64, k: f64) -> f64 {
    let sd = vol * (alpha * (n - 1) as f64).sqrt();
    let d1 = ((level / k).ln() + 0.5 * sd * sd) / sd;
    let put = k * norm_cdf(sd - d1) - level * norm_cdf(-d1);
    put * (1.0 + alpha * level).powi(-(n as i32))
}

/// 1D solve of `u_tau = lambda/2 u_zz` from `max(e^z - k, 0)`, read at `z0`.
pub fn pde_call(z0: f64, k: f64, lambda: f64, tau: f64, j: usize, steps: usize) -> f64 {
    let map = AxisMap::centered(z0, 5f64.ln()).unwrap();
    let dt = tau / steps as f64;
    let s = HeatSolver::new(vec![ActiveAxis { map, lambda }], j, dt, 1e6).unwrap();
    let mut u = s.surface_from(1, |_, z, o| o[0] = (z[0].exp() - k).max(0.0));
    for _ in 0..steps {
        s.step(&mut u);
    }
    s.interpolate(&u, &[z0])[0]
}

/// Banded LU (no pivoting) of a square matrix with half bandwidth `w`,
/// stored row-wise as `band[i * (2w + 1) + (j + w - i)]`.
pub struct BandedLu {
    n: usize,
    w: usize,
    band: Vec<f64>,
}

impl BandedLu {
    pub fn factor(n: usize, w: usize, mut band: Vec<f64>) -> Self {
        let stride = 2 * w + 1;
        for k in 0..n {
            let pivot = band[k * stride + w];
            assert!(pivot.abs() > 1e-300, "zero pivot at {k}");
            let last = (k + w).min(n - 1);
            for i in k + 1..=last {
                let f = band[i * stride + (k + w - i)] / pivot;
                if f == 0.0 {
                    continue;
                }
                band[i * stride + (k + w - i)] = f;
                for j in k + 1..=last {
                    let kj = band[k * stride + (j + w - k)];
                    band[i * stride + (j + w - i)] -= f * kj;
                }
            }
        }
        Self { n, w, band }
    }

    pub fn solve(&self, x: &mut [f64]) {
        let (n, w) = (self.n, self.w);
        let stride = 2 * w + 1;
        for i in 0..n {
            let lo = i.saturating_sub(w);
            let mut s = x[i];
            for j in lo..i {
                s -= self.band[i * stride + (j + w - i)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + w).min(n - 1);
            let mut s = x[i];
            for j in i + 1..=hi {
                s -= self.band[i * stride + (j + w - i)] * x[j];
            }
            x[i] = s / self.band[i * stride + w];
        }
    }
}

/// Unsplit Crank-Nicolson for `u_tau = (A1 (x) I + I (x) A2) u` on the 2D grid
/// of `solver`, built from the same 1D operators.
pub struct DenseCn2d {
    m: usize,
    lu: BandedLu,
    a1: Tridiagonal,
    a2: Tridiagonal,
    dt: f64,
}

impl DenseCn2d {
    pub fn new(solver: &HeatSolver) -> Self {
        let a1 = solver.axis_operator(0).clone();
        let a2 = solver.axis_operator(1).clone();
        let m = a1.len();
        let n = m * m;
        let w = m;
        let stride = 2 * w + 1;
        let dt = solver.dt();
        let mut band = vec![0.0; n * stride];
        for i2 in 0..m {
            for i1 in 0..m {
                let p = i1 + m * i2;
                let mut put = |q: usize, v: f64| band[p * stride + (q + w - p)] += v;
                put(p, 1.0 - 0.5 * dt * (a1.diag[i1] + a2.diag[i2]));
                if i1 > 0 {
                    put(p - 1, -0.5 * dt * a1.lower[i1]);
                }
                if i1 + 1 < m {
                    put(p + 1, -0.5 * dt * a1.upper[i1]);
                }
                if i2 > 0 {
                    put(p - m, -0.5 * dt * a2.lower[i2]);
                }
                if i2 + 1 < m {
                    put(p + m, -0.5 * dt * a2.upper[i2]);
                }
            }
        }
        Self {
            m,
            lu: BandedLu::factor(n, w, band),
            a1,
            a2,
            dt,
        }
    }

    pub fn step(&self, u: &mut SolutionSurface) {
        let m = self.m;
        let h = 0.5 * self.dt;
        for slice in u.values.chunks_mut(u.points) {
            let mut rhs = vec![0.0; slice.len()];
            for i2 in 0..m {
                for i1 in 0..m {
                    let p = i1 + m * i2;
                    let mut a = (self.a1.diag[i1] + self.a2.diag[i2]) * slice[p];
                    if i1 > 0 {
                        a += self.a1.lower[i1] * slice[p - 1];
                    }
                    if i1 + 1 < m {
                        a += self.a1.upper[i1] * slice[p + 1];
                    }
                    if i2 > 0 {
                        a += self.a2.lower[i2] * slice[p - m];
                    }
                    if i2 + 1 < m {
                        a += self.a2.upper[i2] * slice[p + m];
                    }
                    rhs[p] = slice[p] + h * a;
                }
            }
            self.lu.solve(&mut rhs);
            slice.copy_from_slice(&rhs);
        }
        u.tau += self.dt;
    }
}

/// ADI and unsplit CN values at the origin for the lognormal spread payoff
/// `max(e^{z1} - e^{z2} - k, 0)` after time `tau`.
pub fn spread_adi_vs_dense(j: usize, steps: usize, tau: f64, k: f64) -> (f64, f64) {
    let axes = vec![
        ActiveAxis {
            map: AxisMap::centered(0.0, 5f64.ln()).unwrap(),
            lambda: 0.04,
        },
        ActiveAxis {
            map: AxisMap::centered(0.0, 4f64.ln()).unwrap(),
            lambda: 0.01,
        },
    ];
    let s = HeatSolver::new(axes, j, tau / steps as f64, 1e6).unwrap();
    let payoff = |_: usize, z: &[f64], o: &mut [f64]| o[0] = (z[0].exp() - z[1].exp() - k).max(0.0);
    let mut adi = s.surface_from(1, payoff);
    let mut dense = s.surface_from(1, payoff);
    let oracle = DenseCn2d::new(&s);
    for _ in 0..steps {
        s.step(&mut adi);
        oracle.step(&mut dense);
    }
    (s.interpolate(&adi, &[0.0, 0.0])[0], s.interpolate(&dense, &[0.0, 0.0])[0])
}
